// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver: dataset generation, training, decoding, scoring, and
// the numerical verification commands.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "rnntaux/common.hpp"
#include "rnntaux/config_json.hpp"
#include "rnntaux/data.hpp"
#include "rnntaux/decode.hpp"
#include "rnntaux/eval.hpp"
#include "rnntaux/lattice.hpp"
#include "rnntaux/losses.hpp"
#include "rnntaux/model.hpp"
#include "rnntaux/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rnntaux;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitVerification = 3;

struct RunConfig {
  std::uint64_t seed = 1;
  model::ModelConfig model;
  train::TrainConfig train;
  data::SyntheticTaskSpec task;
  std::size_t n_train = 500;
  std::size_t n_valid = 100;
  std::size_t n_test = 100;
  std::size_t beam = 4;
  double fusion_mu = 0.0;
  std::size_t lm_order = 1;
  std::size_t max_symbols_per_frame = 10;
};

RunConfig load_run_config(const std::string& path, std::optional<std::uint64_t> seed) {
  RunConfig rc;
  // vocabulary sizes default to "infer from the dataset header"; an explicit
  // config value pins them and is validated against the data
  rc.model.vocab_size = 0;
  rc.model.state_vocab_size = 0;
  rc.model.input_dim = 0;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) {
      throw std::invalid_argument("cannot open config file '" + path + "'");
    }
    json j = json::parse(in);
    config::require_known_keys(
        j, {"seed", "mode", "lambda_aux", "lambda_ce", "model", "train", "data", "decode"},
        "config");
    if (j.contains("seed")) {
      rc.seed = j.at("seed").get<std::uint64_t>();
    }
    if (j.contains("model")) {
      rc.model = config::model_config_from_json(j.at("model"));
      if (!j.at("model").contains("vocab_size")) {
        rc.model.vocab_size = 0;
      }
      if (!j.at("model").contains("state_vocab_size")) {
        rc.model.state_vocab_size = 0;
      }
      if (!j.at("model").contains("input_dim")) {
        rc.model.input_dim = 0;
      }
    }
    if (j.contains("train")) {
      rc.train = config::train_config_from_json(j.at("train"));
    }
    if (j.contains("mode")) {
      rc.train.mode = losses::mode_from_string(j.at("mode").get<std::string>());
    }
    if (j.contains("lambda_aux")) {
      rc.train.weights.lambda_aux = j.at("lambda_aux").get<double>();
    }
    if (j.contains("lambda_ce")) {
      rc.train.weights.lambda_ce = j.at("lambda_ce").get<double>();
    }
    if (j.contains("data")) {
      const json& d = j.at("data");
      config::require_known_keys(d, {"task", "n_train", "n_valid", "n_test"}, "data");
      if (d.contains("task")) {
        rc.task = config::task_spec_from_json(d.at("task"));
      }
      if (d.contains("n_train")) {
        rc.n_train = d.at("n_train").get<std::size_t>();
      }
      if (d.contains("n_valid")) {
        rc.n_valid = d.at("n_valid").get<std::size_t>();
      }
      if (d.contains("n_test")) {
        rc.n_test = d.at("n_test").get<std::size_t>();
      }
    }
    if (j.contains("decode")) {
      const json& d = j.at("decode");
      config::require_known_keys(
          d, {"beam", "fusion_mu", "lm_order", "max_symbols_per_frame"}, "decode");
      if (d.contains("beam")) {
        rc.beam = d.at("beam").get<std::size_t>();
      }
      if (d.contains("fusion_mu")) {
        rc.fusion_mu = d.at("fusion_mu").get<double>();
      }
      if (d.contains("lm_order")) {
        rc.lm_order = d.at("lm_order").get<std::size_t>();
      }
      if (d.contains("max_symbols_per_frame")) {
        rc.max_symbols_per_frame = d.at("max_symbols_per_frame").get<std::size_t>();
      }
    }
  }
  if (seed.has_value()) {
    rc.seed = *seed;
  }
  rc.task.seed = rc.seed;
  rc.train.seed = rc.seed;
  rc.train.finalize_stages();
  return rc;
}

json effective_config_json(const RunConfig& rc) {
  return json{{"seed", rc.seed},
              {"model", config::to_json(rc.model)},
              {"train", config::to_json(rc.train)},
              {"data",
               {{"task", config::to_json(rc.task)},
                {"n_train", rc.n_train},
                {"n_valid", rc.n_valid},
                {"n_test", rc.n_test}}},
              {"decode",
               {{"beam", rc.beam},
                {"fusion_mu", rc.fusion_mu},
                {"lm_order", rc.lm_order},
                {"max_symbols_per_frame", rc.max_symbols_per_frame}}}};
}

// Defaults that say "take it from the dataset header".
void infer_vocab_from_data(RunConfig& rc, const data::Dataset& ds) {
  if (rc.model.input_dim == 0) {
    rc.model.input_dim = ds.spec.feature_dim;
  }
  if (rc.model.input_dim != ds.spec.feature_dim) {
    throw std::invalid_argument(detail::cat("config input_dim ", rc.model.input_dim,
                                            " does not match dataset feature_dim ",
                                            ds.spec.feature_dim));
  }
  if (rc.model.vocab_size == 0) {
    rc.model.vocab_size = ds.num_symbols + 1;
  }
  if (rc.model.state_vocab_size == 0) {
    rc.model.state_vocab_size = ds.state_vocab_size;
  }
  if (rc.model.vocab_size != ds.num_symbols + 1) {
    throw std::invalid_argument(detail::cat("config vocab_size ", rc.model.vocab_size,
                                            " does not match dataset symbols ",
                                            ds.num_symbols, "+blank"));
  }
  if (!rc.model.ce_taps.empty() && rc.model.state_vocab_size != ds.state_vocab_size) {
    throw std::invalid_argument(detail::cat("config state_vocab_size ",
                                            rc.model.state_vocab_size,
                                            " does not match dataset ",
                                            ds.state_vocab_size));
  }
}

void echo_config(const RunConfig& rc, const std::string& out_dir) {
  const json j = effective_config_json(rc);
  std::cout << "effective config: " << j.dump() << "\n";
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream out(fs::path(out_dir) / "config.json");
    out << j.dump(2) << "\n";
  }
}

void write_metrics_log(const std::vector<train::MetricEntry>& log, const fs::path& path) {
  std::ofstream out(path);
  for (const auto& entry : log) {
    out << train::metric_json_line(entry) << "\n";
  }
}

int cmd_generate_data(const std::string& config_path, std::optional<std::uint64_t> seed,
                      const std::string& out_dir) {
  RunConfig rc = load_run_config(config_path, seed);
  echo_config(rc, out_dir);
  fs::create_directories(out_dir);
  const struct {
    const char* name;
    std::size_t n;
    std::uint64_t stream;
  } splits[] = {{"train.jsonl", rc.n_train, 0},
                {"valid.jsonl", rc.n_valid, 1},
                {"test.jsonl", rc.n_test, 2}};
  for (const auto& split : splits) {
    data::Dataset ds = data::generate_dataset(rc.task, split.n, split.stream);
    data::write_dataset(ds, (fs::path(out_dir) / split.name).string());
    std::cout << "wrote " << split.n << " utterances to " << split.name << "\n";
  }
  return kExitOk;
}

int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed,
              const std::string& data_dir, const std::string& out_dir,
              const std::string& init_encoder, const std::string& resume_path,
              std::size_t jobs) {
  RunConfig rc = load_run_config(config_path, seed);
  data::Dataset train_set = data::read_dataset((fs::path(data_dir) / "train.jsonl").string());
  data::Dataset valid_set = data::read_dataset((fs::path(data_dir) / "valid.jsonl").string());
  infer_vocab_from_data(rc, train_set);
  echo_config(rc, out_dir);

  std::optional<model::ParamSet> initial;
  if (!init_encoder.empty()) {
    train::Checkpoint enc = train::load_checkpoint(init_encoder);
    model::ParamSet params = model::init_params(rc.model, rc.train.seed);
    for (const auto& [name, v] : enc.params.values) {
      if (name.rfind("enc.", 0) == 0) {
        if (!params.values.count(name) || params.values[name].shape != v.shape) {
          throw std::invalid_argument("encoder checkpoint does not match the model");
        }
        params.values[name] = v;
      }
    }
    initial = std::move(params);
  }

  std::optional<train::Checkpoint> resume;
  if (!resume_path.empty()) {
    resume = train::load_checkpoint(resume_path);
  }

  train::TrainResult result =
      train::train(train_set, &valid_set, rc.model, rc.train, initial,
                   resume ? &*resume : nullptr, jobs);
  fs::create_directories(out_dir);
  train::save_checkpoint(result.checkpoint, (fs::path(out_dir) / "checkpoint.bin").string());
  write_metrics_log(result.checkpoint.history, fs::path(out_dir) / "metrics.jsonl");

  const auto& last = result.log.back();
  std::cout << "finished at step " << result.checkpoint.step << ", train loss "
            << last.report.total;
  if (last.valid_wer) {
    std::cout << ", valid wer " << *last.valid_wer;
  }
  std::cout << "\n";
  return kExitOk;
}

int cmd_ce_pretrain(const std::string& config_path, std::optional<std::uint64_t> seed,
                    const std::string& data_dir, const std::string& out_dir,
                    std::size_t jobs) {
  RunConfig rc = load_run_config(config_path, seed);
  data::Dataset train_set = data::read_dataset((fs::path(data_dir) / "train.jsonl").string());
  infer_vocab_from_data(rc, train_set);
  echo_config(rc, out_dir);

  train::CePretrainResult pre = train::ce_pretrain(train_set, rc.model, rc.train, jobs);
  train::Checkpoint ckpt;
  ckpt.step = rc.train.max_steps;
  ckpt.params.values = pre.encoder;
  ckpt.model_config_json = config::to_json(rc.model).dump();
  ckpt.train_config_json = config::to_json(rc.train).dump();
  fs::create_directories(out_dir);
  train::save_checkpoint(ckpt, (fs::path(out_dir) / "encoder.bin").string());
  std::cout << "pretrained encoder frame accuracy " << pre.frame_accuracy << "\n";
  return kExitOk;
}

int cmd_decode(const std::string& checkpoint_path, const std::string& data_path,
               const std::string& out_dir, std::size_t beam, double fusion_mu,
               std::size_t lm_order, const std::string& lm_data,
               std::size_t max_symbols) {
  std::cout << "effective config: "
            << json{{"checkpoint", checkpoint_path}, {"data", data_path},
                    {"beam", beam},  {"fusion_mu", fusion_mu},
                    {"lm_order", lm_order}, {"lm_data", lm_data},
                    {"max_symbols_per_frame", max_symbols}}
                   .dump()
            << "\n";
  train::Checkpoint ckpt = train::load_checkpoint(checkpoint_path);
  model::ModelConfig mcfg =
      config::model_config_from_json(json::parse(ckpt.model_config_json));
  data::Dataset ds = data::read_dataset(data_path);

  std::optional<decode::NGramLM> lm;
  std::optional<decode::Fusion> fusion;
  if (fusion_mu != 0.0) {
    const std::string lm_source = lm_data.empty() ? data_path : lm_data;
    data::Dataset lm_set = data::read_dataset(lm_source);
    std::vector<std::vector<int>> transcripts;
    for (const auto& utt : lm_set.utterances) {
      transcripts.push_back(utt.labels);
    }
    lm = decode::train_ngram_lm(transcripts, lm_order, mcfg.vocab_size - 1);
    fusion = decode::Fusion{&*lm, fusion_mu};
  }

  fs::create_directories(out_dir);
  std::ofstream out(fs::path(out_dir) / "nbest.jsonl");
  for (const auto& utt : ds.utterances) {
    std::vector<decode::Hypothesis> nbest =
        decode::beam_search(utt.features, ckpt.params, mcfg, beam, fusion, max_symbols);
    json hyps = json::array();
    for (const auto& h : nbest) {
      hyps.push_back(json{{"labels", h.labels}, {"score", h.score}});
    }
    out << json{{"id", utt.id}, {"hyps", hyps}}.dump() << "\n";
  }
  std::cout << "decoded " << ds.utterances.size() << " utterances with beam " << beam
            << "\n";
  return kExitOk;
}

int cmd_evaluate(const std::string& refs_path, const std::string& hyps_path,
                 const std::string& out_dir, const std::string& set_name,
                 const std::string& baseline_path) {
  std::cout << "effective config: "
            << json{{"refs", refs_path}, {"hyps", hyps_path},
                    {"set_name", set_name}, {"baseline", baseline_path}}
                   .dump()
            << "\n";
  data::Dataset refs = data::read_dataset(refs_path);
  std::map<std::string, std::vector<int>> ref_map, hyp_map;
  for (const auto& utt : refs.utterances) {
    ref_map[utt.id] = utt.labels;
  }
  std::ifstream in(hyps_path);
  if (!in) {
    throw std::runtime_error("cannot open '" + hyps_path + "'");
  }
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) {
      continue;
    }
    json j = json::parse(line);
    const json& hyps = j.at("hyps");
    hyp_map[j.at("id").get<std::string>()] =
        hyps.empty() ? std::vector<int>{}
                     : hyps.at(0).at("labels").get<std::vector<int>>();
  }

  eval::WerBreakdown wer = eval::corpus_wer(ref_map, hyp_map);
  json metrics;
  metrics[set_name] = json{{"wer", wer.wer()},
                           {"substitutions", wer.substitutions},
                           {"deletions", wer.deletions},
                           {"insertions", wer.insertions},
                           {"ref_tokens", wer.ref_tokens}};
  if (!baseline_path.empty()) {
    std::ifstream bin(baseline_path);
    if (!bin) {
      throw std::runtime_error("cannot open '" + baseline_path + "'");
    }
    json baseline = json::parse(bin);
    std::map<std::string, double> base_wers, cand_wers;
    for (const auto& [set, vals] : baseline.items()) {
      if (vals.is_object() && vals.contains("wer") && metrics.contains(set)) {
        base_wers[set] = vals.at("wer").get<double>();
        cand_wers[set] = metrics.at(set).at("wer").get<double>();
      }
    }
    metrics["werr"] = eval::werr(base_wers, cand_wers);
  }
  std::cout << metrics.dump(2) << "\n";
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream out(fs::path(out_dir) / "metrics.json");
    out << metrics.dump(2) << "\n";
  }
  return kExitOk;
}

int cmd_gradcheck(const std::string& mode_arg, std::uint64_t seed,
                  const std::string& out_dir) {
  std::cout << "effective config: "
            << json{{"mode", mode_arg}, {"seed", seed}, {"step", 1e-5},
                    {"tolerance", 1e-4}}
                   .dump()
            << "\n";
  model::ModelConfig mcfg = model::ModelConfig::toy();
  Rng rng(seed);
  model::ParamSet params = model::init_params(mcfg, seed);
  diffcore::NDArray x({8, mcfg.input_dim});
  for (double& v : x.data) {
    v = rng.uniform(-1.0, 1.0);
  }
  std::vector<int> y = {1, 3, 2, 4};
  std::vector<int> s(8);
  for (auto& v : s) {
    v = static_cast<int>(rng.uniform_int(mcfg.state_vocab_size));
  }

  std::vector<losses::Mode> modes;
  if (mode_arg == "all") {
    modes = losses::all_modes();
  } else {
    modes = {losses::mode_from_string(mode_arg)};
  }

  const double tol = 1e-4;
  bool pass = true;
  json report_json = json::object();
  for (losses::Mode mode : modes) {
    auto report = losses::gradcheck_objective(x, y, &s, params, mcfg, {}, mode, 1e-5,
                                              tol, 8, seed);
    auto per_part = losses::per_partition_max(report, mcfg);
    std::printf("mode %-10s max rel error %.3e  [%s]\n",
                losses::mode_to_string(mode).c_str(), report.max_rel_error,
                report.pass ? "ok" : "FAIL");
    json parts = json::object();
    for (const auto& [part, err] : per_part) {
      std::printf("    %-10s %.3e\n", model::partition_name(part), err);
      parts[model::partition_name(part)] = err;
    }
    report_json[losses::mode_to_string(mode)] =
        json{{"max_rel_error", report.max_rel_error}, {"pass", report.pass},
             {"partitions", parts}};
    pass = pass && report.pass;
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream out(fs::path(out_dir) / "gradcheck.json");
    out << report_json.dump(2) << "\n";
  }
  std::printf("gradcheck %s at tolerance %.0e\n", pass ? "passed" : "FAILED", tol);
  return pass ? kExitOk : kExitVerification;
}

int cmd_oracle_check(std::size_t instances, std::uint64_t seed) {
  std::cout << "effective config: "
            << json{{"instances", instances}, {"seed", seed}, {"tolerance", 1e-9}}.dump()
            << "\n";
  Rng rng(seed);
  double worst = 0.0;
  for (std::size_t i = 0; i < instances; ++i) {
    const std::size_t T = 1 + rng.uniform_int(4);
    const std::size_t U = rng.uniform_int(4);
    const std::size_t K = 2 + rng.uniform_int(3);
    diffcore::NDArray logits({T, U + 1, K});
    for (double& v : logits.data) {
      v = rng.uniform(-2.0, 2.0);
    }
    diffcore::Graph g;
    diffcore::NDArray grid = g.log_softmax(g.leaf(logits))->value;
    std::vector<int> y(U);
    for (auto& v : y) {
      v = 1 + static_cast<int>(rng.uniform_int(K - 1));
    }
    const double exact = lattice::rnnt_loss(grid, y).loss;
    const double brute = lattice::brute_force_rnnt_loss(grid, y);
    worst = std::max(worst, std::abs(exact - brute));
  }
  std::printf("oracle check over %zu instances: max |delta| = %.3e\n", instances, worst);
  return worst <= 1e-9 ? kExitOk : kExitVerification;
}

int cmd_sweep(const std::string& config_path, std::optional<std::uint64_t> seed,
              const std::string& data_dir, const std::string& out_dir,
              std::vector<double> lambda_aux, std::vector<double> lambda_ce,
              std::size_t jobs) {
  RunConfig rc = load_run_config(config_path, seed);
  data::Dataset train_set = data::read_dataset((fs::path(data_dir) / "train.jsonl").string());
  data::Dataset valid_set = data::read_dataset((fs::path(data_dir) / "valid.jsonl").string());
  data::Dataset test_set = data::read_dataset((fs::path(data_dir) / "test.jsonl").string());
  infer_vocab_from_data(rc, train_set);
  echo_config(rc, out_dir);

  struct Row {
    std::string name;
    double valid_loss = 0.0;
    double valid_wer = 0.0;
    double test_wer = 0.0;
    double werr = 0.0;
  };
  std::vector<Row> rows;

  auto run = [&](const std::string& name, losses::Mode mode, double la, double lc) {
    train::TrainConfig tcfg = rc.train;
    tcfg.mode = mode;
    tcfg.weights.lambda_aux = la;
    tcfg.weights.lambda_ce = lc;
    train::TrainResult result =
        train::train(train_set, nullptr, rc.model, tcfg, std::nullopt, nullptr, jobs);
    Row row;
    row.name = name;
    row.valid_loss = train::dataset_loss(valid_set, result.checkpoint.params, rc.model,
                                         mode, tcfg.weights, jobs);
    row.valid_wer = train::dataset_wer(valid_set, result.checkpoint.params, rc.model, jobs);
    row.test_wer = train::dataset_wer(test_set, result.checkpoint.params, rc.model, jobs);
    return row;
  };

  Row baseline = run("baseline", losses::Mode::Baseline, 0.0, 0.0);
  rows.push_back(baseline);
  for (double la : lambda_aux) {
    Row row = run(detail::cat("lambda_aux=", la),
                  rc.train.mode == losses::Mode::Baseline ? losses::Mode::AuxKl
                                                          : rc.train.mode,
                  la, rc.train.weights.lambda_ce);
    rows.push_back(row);
  }
  for (double lc : lambda_ce) {
    Row row = run(detail::cat("lambda_ce=", lc), losses::Mode::Ce,
                  rc.train.weights.lambda_aux, lc);
    rows.push_back(row);
  }

  json table = json::array();
  std::printf("%-18s %12s %11s %10s %8s\n", "run", "valid loss", "valid wer", "test wer",
              "werr%");
  for (Row& row : rows) {
    if (&row != &rows.front()) {
      row.werr = eval::werr({{"valid", baseline.valid_wer}, {"test", baseline.test_wer}},
                            {{"valid", row.valid_wer}, {"test", row.test_wer}});
    }
    std::printf("%-18s %12.4f %11.4f %10.4f %8.2f\n", row.name.c_str(), row.valid_loss,
                row.valid_wer, row.test_wer, row.werr);
    table.push_back(json{{"run", row.name},
                         {"valid_loss", row.valid_loss},
                         {"valid_wer", row.valid_wer},
                         {"test_wer", row.test_wer},
                         {"werr", row.werr}});
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream out(fs::path(out_dir) / "sweep.json");
    out << table.dump(2) << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sequence transducer training and decoding toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_dir;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;

  auto add_common = [&](CLI::App* cmd, bool with_data) {
    cmd->add_option("--config", config_path, "JSON run configuration");
    cmd->add_option("--seed", seed, "override every random seed");
    cmd->add_option("--out", out_dir, "artifact directory");
    cmd->add_option("--jobs", jobs, "parallel per-utterance workers");
    if (with_data) {
      cmd->add_option("--data-dir", data_dir, "directory with train/valid/test.jsonl")
          ->required();
    }
  };

  CLI::App* gen = app.add_subcommand("generate-data", "write synthetic dataset splits");
  add_common(gen, false);
  gen->get_option("--out")->required();

  CLI::App* tr = app.add_subcommand("train", "run the optimization loop");
  std::string init_encoder, resume_path;
  add_common(tr, true);
  tr->get_option("--out")->required();
  tr->add_option("--init-encoder", init_encoder, "encoder checkpoint for warm start");
  tr->add_option("--resume", resume_path, "checkpoint to resume from");

  CLI::App* pre = app.add_subcommand("ce-pretrain", "pretrain the encoder on frame states");
  add_common(pre, true);
  pre->get_option("--out")->required();

  CLI::App* dec = app.add_subcommand("decode", "beam-decode a dataset to an n-best list");
  std::string checkpoint_path, data_path, lm_data;
  std::size_t beam = 4, lm_order = 1, max_symbols = 10;
  double fusion_mu = 0.0;
  dec->add_option("--checkpoint", checkpoint_path, "trained checkpoint")->required();
  dec->add_option("--data", data_path, "dataset to decode")->required();
  dec->add_option("--out", out_dir, "artifact directory")->required();
  dec->add_option("--beam", beam, "beam width");
  dec->add_option("--fusion-mu", fusion_mu, "shallow fusion weight");
  dec->add_option("--lm-order", lm_order, "n-gram order (1 or 2)");
  dec->add_option("--lm-data", lm_data, "dataset providing LM training transcripts");
  dec->add_option("--max-symbols", max_symbols, "emission cap per frame");

  CLI::App* ev = app.add_subcommand("evaluate", "score an n-best file against references");
  std::string refs_path, hyps_path, set_name = "test", baseline_path;
  ev->add_option("--refs", refs_path, "reference dataset")->required();
  ev->add_option("--hyps", hyps_path, "n-best JSON lines")->required();
  ev->add_option("--out", out_dir, "artifact directory");
  ev->add_option("--set-name", set_name, "name of the evaluated set");
  ev->add_option("--baseline", baseline_path, "baseline metrics.json for relative reduction");

  CLI::App* gc = app.add_subcommand("gradcheck",
                                    "verify analytic gradients against finite differences");
  std::string mode_arg = "all";
  gc->add_option("--mode", mode_arg, "objective mode or 'all'");
  gc->add_option("--seed", seed, "instance seed");
  gc->add_option("--out", out_dir, "artifact directory");

  CLI::App* oc = app.add_subcommand("oracle-check",
                                    "compare the lattice loss against path enumeration");
  std::size_t instances = 200;
  oc->add_option("--instances", instances, "number of random instances");
  oc->add_option("--seed", seed, "instance seed");

  CLI::App* sw = app.add_subcommand("sweep", "train a weight grid and tabulate metrics");
  std::vector<double> lambda_aux_list, lambda_ce_list;
  add_common(sw, true);
  sw->get_option("--out")->required();
  sw->add_option("--lambda-aux", lambda_aux_list, "auxiliary weights to sweep")
      ->delimiter(',');
  sw->add_option("--lambda-ce", lambda_ce_list, "state-prediction weights to sweep")
      ->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed()) {
      return cmd_generate_data(config_path, seed, out_dir);
    }
    if (tr->parsed()) {
      return cmd_train(config_path, seed, data_dir, out_dir, init_encoder, resume_path,
                       jobs);
    }
    if (pre->parsed()) {
      return cmd_ce_pretrain(config_path, seed, data_dir, out_dir, jobs);
    }
    if (dec->parsed()) {
      return cmd_decode(checkpoint_path, data_path, out_dir, beam, fusion_mu, lm_order,
                        lm_data, max_symbols);
    }
    if (ev->parsed()) {
      return cmd_evaluate(refs_path, hyps_path, out_dir, set_name, baseline_path);
    }
    if (gc->parsed()) {
      return cmd_gradcheck(mode_arg, seed.value_or(20260809), out_dir);
    }
    if (oc->parsed()) {
      return cmd_oracle_check(instances, seed.value_or(20260809));
    }
    if (sw->parsed()) {
      return cmd_sweep(config_path, seed, data_dir, out_dir, lambda_aux_list,
                       lambda_ce_list, jobs);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
