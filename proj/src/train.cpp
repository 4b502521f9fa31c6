// SPDX-License-Identifier: Apache-2.0
#include "rnntaux/train.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <thread>

#include "json.hpp"
#include "rnntaux/common.hpp"
#include "rnntaux/config_json.hpp"
#include "rnntaux/decode.hpp"
#include "rnntaux/eval.hpp"

namespace rnntaux::train {

using detail::cat;
using nlohmann::json;

void TrainConfig::finalize_stages() {
  if (warmup_steps == 0 && hold_steps == 0 && decay_steps == 0) {
    warmup_steps = max_steps / 10;
    hold_steps = max_steps * 4 / 10;
    decay_steps = max_steps - warmup_steps - hold_steps;
  }
}

void TrainConfig::validate() const {
  weights.validate();
  if (batch_size == 0 || max_steps == 0) {
    throw std::invalid_argument("train config: batch_size and max_steps must be positive");
  }
  if (!(peak_lr > 0.0)) {
    throw std::invalid_argument("train config: peak_lr must be positive");
  }
  if (warmup_steps + hold_steps + decay_steps != max_steps) {
    throw std::invalid_argument(cat("train config: stage counts ", warmup_steps, "+",
                                    hold_steps, "+", decay_steps, " must sum to ",
                                    max_steps));
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("train config: betas must lie in [0, 1)");
  }
  if (!(floor_lr_ratio > 0.0 && floor_lr_ratio <= 1.0)) {
    throw std::invalid_argument("train config: floor_lr_ratio must lie in (0, 1]");
  }
  if (!(grad_clip_norm > 0.0)) {
    throw std::invalid_argument("train config: grad_clip_norm must be positive");
  }
}

void adam_step(ParamSet& params, const GradMap& grads, AdamState& state, double lr,
               double beta1, double beta2, double epsilon) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (auto& [name, value] : params.values) {
    auto git = grads.find(name);
    if (git == grads.end()) {
      throw std::invalid_argument(cat("adam: no gradient for '", name, "'"));
    }
    const NDArray& g = git->second;
    if (g.numel() != value.numel()) {
      throw std::invalid_argument(cat("adam: gradient shape mismatch for '", name, "'"));
    }
    NDArray& m = state.m.try_emplace(name, NDArray(value.shape)).first->second;
    NDArray& v = state.v.try_emplace(name, NDArray(value.shape)).first->second;
    for (std::size_t i = 0; i < value.numel(); ++i) {
      m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g.data[i];
      v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g.data[i] * g.data[i];
      const double m_hat = m.data[i] / bc1;
      const double v_hat = v.data[i] / bc2;
      value.data[i] -= lr * m_hat / (std::sqrt(v_hat) + epsilon);
    }
  }
}

double tri_stage_lr(std::size_t step, const TrainConfig& config) {
  if (step >= config.max_steps) {
    throw std::invalid_argument(cat("tri-stage lr: step ", step, " outside [0,",
                                    config.max_steps, ")"));
  }
  const double floor = config.floor_lr_ratio * config.peak_lr;
  if (step < config.warmup_steps) {
    return floor + (config.peak_lr - floor) * static_cast<double>(step) /
                       static_cast<double>(config.warmup_steps);
  }
  if (step < config.warmup_steps + config.hold_steps) {
    return config.peak_lr;
  }
  const std::size_t d = step - config.warmup_steps - config.hold_steps;
  if (config.decay_steps <= 1) {
    return d == 0 ? config.peak_lr : floor;
  }
  const double frac = static_cast<double>(d) / static_cast<double>(config.decay_steps - 1);
  return config.peak_lr * std::pow(config.floor_lr_ratio, frac);
}

double clip_gradients(GradMap& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    for (double v : g.data) {
      sq += v * v;
    }
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [name, g] : grads) {
      for (double& v : g.data) {
        v *= scale;
      }
    }
  }
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) {
      throw std::runtime_error(cat("non-finite gradient in '", name, "' after clipping"));
    }
  }
  return norm;
}

namespace {

// Deterministic work distribution: results land in index order regardless of
// the thread count, so gradient reduction is reproducible.
template <class Fn>
void parallel_for(std::size_t n, std::size_t jobs, const Fn& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      fn(i);
    }
    return;
  }
  const std::size_t workers = std::min(jobs, n);
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w]() {
      for (std::size_t i = w; i < n; i += workers) {
        fn(i);
      }
    });
  }
  for (auto& t : threads) {
    t.join();
  }
}

json report_to_json(const losses::LossReport& r) {
  json aux = json::object(), kl = json::object(), ce = json::object();
  for (const auto& [l, v] : r.aux_rnnt) {
    aux[std::to_string(l)] = v;
  }
  for (const auto& [l, v] : r.kl) {
    kl[std::to_string(l)] = v;
  }
  for (const auto& [l, v] : r.ce) {
    ce[std::to_string(l)] = v;
  }
  return json{{"primary", r.primary}, {"aux_rnnt", aux}, {"kl", kl},
              {"ce", ce},            {"total", r.total}};
}

losses::LossReport report_from_json(const json& j) {
  losses::LossReport r;
  r.primary = j.at("primary").get<double>();
  r.total = j.at("total").get<double>();
  for (const auto& [k, v] : j.at("aux_rnnt").items()) {
    r.aux_rnnt[std::stoul(k)] = v.get<double>();
  }
  for (const auto& [k, v] : j.at("kl").items()) {
    r.kl[std::stoul(k)] = v.get<double>();
  }
  for (const auto& [k, v] : j.at("ce").items()) {
    r.ce[std::stoul(k)] = v.get<double>();
  }
  return r;
}

json metric_to_json(const MetricEntry& e) {
  json j{{"step", e.step}, {"lr", e.lr}, {"report", report_to_json(e.report)}};
  if (e.valid_loss) {
    j["valid_loss"] = *e.valid_loss;
  }
  if (e.valid_wer) {
    j["valid_wer"] = *e.valid_wer;
  }
  return j;
}

MetricEntry metric_from_json(const json& j) {
  MetricEntry e;
  e.step = j.at("step").get<std::size_t>();
  e.lr = j.at("lr").get<double>();
  e.report = report_from_json(j.at("report"));
  if (j.contains("valid_loss")) {
    e.valid_loss = j.at("valid_loss").get<double>();
  }
  if (j.contains("valid_wer")) {
    e.valid_wer = j.at("valid_wer").get<double>();
  }
  return e;
}

// ---- checkpoint binary records ----

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

void write_array_record(std::ostream& out, const std::string& name, const NDArray& a) {
  write_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  out.put(0);
  write_u32(out, static_cast<std::uint32_t>(a.rank()));
  for (std::size_t d : a.shape) {
    write_u64(out, d);
  }
  out.write(reinterpret_cast<const char*>(a.data.data()),
            static_cast<std::streamsize>(a.data.size() * sizeof(double)));
}

void write_blob_record(std::ostream& out, const std::string& name, const std::string& blob) {
  write_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  out.put(1);
  write_u64(out, blob.size());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

struct Record {
  std::string name;
  bool is_blob = false;
  NDArray array;
  std::string blob;
};

Record read_record(std::istream& in, const std::string& path) {
  Record rec;
  const std::uint32_t name_len = read_u32(in);
  rec.name.resize(name_len);
  in.read(rec.name.data(), name_len);
  const int kind = in.get();
  if (!in) {
    throw std::runtime_error(cat(path, ": truncated checkpoint record"));
  }
  if (kind == 0) {
    const std::uint32_t ndim = read_u32(in);
    diffcore::Shape shape(ndim);
    for (auto& d : shape) {
      d = read_u64(in);
    }
    rec.array = NDArray(shape);
    in.read(reinterpret_cast<char*>(rec.array.data.data()),
            static_cast<std::streamsize>(rec.array.data.size() * sizeof(double)));
  } else if (kind == 1) {
    rec.is_blob = true;
    rec.blob.resize(read_u64(in));
    in.read(rec.blob.data(), static_cast<std::streamsize>(rec.blob.size()));
  } else {
    throw std::runtime_error(cat(path, ": unknown record kind ", kind));
  }
  if (!in) {
    throw std::runtime_error(cat(path, ": truncated checkpoint record"));
  }
  return rec;
}

constexpr char kMagic[9] = "RNTAUX01";

std::string u64_blob(std::uint64_t v) {
  std::string s(sizeof(v), '\0');
  std::memcpy(s.data(), &v, sizeof(v));
  return s;
}

std::uint64_t blob_u64(const std::string& s) {
  std::uint64_t v = 0;
  std::memcpy(&v, s.data(), std::min(s.size(), sizeof(v)));
  return v;
}

}  // namespace

std::string metric_json_line(const MetricEntry& entry) { return metric_to_json(entry).dump(); }

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error(cat("cannot open '", path, "' for writing"));
  }
  out.write(kMagic, 8);
  json history = json::array();
  for (const MetricEntry& e : ckpt.history) {
    history.push_back(metric_to_json(e));
  }
  const std::uint64_t count = ckpt.params.values.size() + ckpt.adam.m.size() +
                              ckpt.adam.v.size() + 5;
  write_u64(out, count);
  write_blob_record(out, "meta/step", u64_blob(ckpt.step));
  write_blob_record(out, "meta/adam_step", u64_blob(ckpt.adam.step));
  write_blob_record(out, "meta/model_config", ckpt.model_config_json);
  write_blob_record(out, "meta/train_config", ckpt.train_config_json);
  write_blob_record(out, "meta/history", history.dump());
  for (const auto& [name, a] : ckpt.params.values) {
    write_array_record(out, "param/" + name, a);
  }
  for (const auto& [name, a] : ckpt.adam.m) {
    write_array_record(out, "adam/m/" + name, a);
  }
  for (const auto& [name, a] : ckpt.adam.v) {
    write_array_record(out, "adam/v/" + name, a);
  }
  if (!out) {
    throw std::runtime_error(cat("write to '", path, "' failed"));
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error(cat("cannot open '", path, "'"));
  }
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error(cat(path, ": not a checkpoint file"));
  }
  const std::uint64_t count = read_u64(in);
  Checkpoint ckpt;
  for (std::uint64_t i = 0; i < count; ++i) {
    Record rec = read_record(in, path);
    if (rec.name == "meta/step") {
      ckpt.step = blob_u64(rec.blob);
    } else if (rec.name == "meta/adam_step") {
      ckpt.adam.step = blob_u64(rec.blob);
    } else if (rec.name == "meta/model_config") {
      ckpt.model_config_json = rec.blob;
    } else if (rec.name == "meta/train_config") {
      ckpt.train_config_json = rec.blob;
    } else if (rec.name == "meta/history") {
      for (const json& e : json::parse(rec.blob)) {
        ckpt.history.push_back(metric_from_json(e));
      }
    } else if (rec.name.rfind("param/", 0) == 0) {
      ckpt.params.values[rec.name.substr(6)] = std::move(rec.array);
    } else if (rec.name.rfind("adam/m/", 0) == 0) {
      ckpt.adam.m[rec.name.substr(7)] = std::move(rec.array);
    } else if (rec.name.rfind("adam/v/", 0) == 0) {
      ckpt.adam.v[rec.name.substr(7)] = std::move(rec.array);
    } else {
      throw std::runtime_error(cat(path, ": unknown record '", rec.name, "'"));
    }
  }
  return ckpt;
}

double dataset_wer(const data::Dataset& ds, const ParamSet& params,
                   const model::ModelConfig& mconfig, std::size_t jobs) {
  std::vector<std::vector<int>> decoded(ds.utterances.size());
  parallel_for(ds.utterances.size(), jobs, [&](std::size_t i) {
    decoded[i] = decode::greedy_decode(ds.utterances[i].features, params, mconfig);
  });
  std::map<std::string, std::vector<int>> refs, hyps;
  for (std::size_t i = 0; i < ds.utterances.size(); ++i) {
    refs[ds.utterances[i].id] = ds.utterances[i].labels;
    hyps[ds.utterances[i].id] = decoded[i];
  }
  return eval::corpus_wer(refs, hyps).wer();
}

double dataset_loss(const data::Dataset& ds, const ParamSet& params,
                    const model::ModelConfig& mconfig, losses::Mode mode,
                    const losses::LossWeights& weights, std::size_t jobs) {
  std::vector<double> totals(ds.utterances.size());
  parallel_for(ds.utterances.size(), jobs, [&](std::size_t i) {
    const data::Utterance& utt = ds.utterances[i];
    diffcore::Graph g;
    model::ParamBinding pb(g, params, mconfig);
    losses::ObjectiveGraph obj = losses::build_objective(
        pb, utt.features, utt.labels, &utt.frame_states, mode, weights, {});
    totals[i] = obj.total->value.data[0];
  });
  double sum = 0.0;
  for (double t : totals) {
    sum += t;
  }
  return sum / static_cast<double>(totals.size());
}

namespace {

struct StepOutcome {
  losses::LossReport report;
  GradMap grads;
};

StepOutcome batch_objective(const data::Dataset& ds, const std::vector<std::size_t>& idx,
                            const ParamSet& params, const model::ModelConfig& mconfig,
                            const TrainConfig& tconfig, std::size_t step,
                            std::size_t jobs) {
  losses::ObjectiveOptions options;
  options.kl_gate_decoder_on_primary = tconfig.kl_gate_decoder_on_primary;
  std::vector<losses::ObjectiveResult> results(idx.size());
  parallel_for(idx.size(), jobs, [&](std::size_t i) {
    const data::Utterance& utt = ds.utterances[idx[i]];
    const NDArray* features = &utt.features;
    NDArray masked;
    if (tconfig.augment_enabled()) {
      masked = data::spec_augment_mask(
          utt.features, tconfig.augment_freq_masks,
          std::min(tconfig.augment_max_freq_width, utt.features.dim(1)),
          tconfig.augment_time_masks,
          std::min(tconfig.augment_max_time_width, utt.features.dim(0)),
          mix_seed(mix_seed(tconfig.seed, 0x5A6AULL), step * tconfig.batch_size + i));
      features = &masked;
    }
    results[i] = losses::total_objective(*features, utt.labels, &utt.frame_states,
                                         params, mconfig, tconfig.weights, tconfig.mode,
                                         options);
  });

  // average over the batch in index order
  const double inv = 1.0 / static_cast<double>(idx.size());
  StepOutcome out;
  out.grads = std::move(results[0].grads);
  for (auto& [name, g] : out.grads) {
    for (double& v : g.data) {
      v *= inv;
    }
  }
  out.report = results[0].report;
  out.report.primary *= inv;
  out.report.total *= inv;
  for (auto& [l, v] : out.report.aux_rnnt) {
    v *= inv;
  }
  for (auto& [l, v] : out.report.kl) {
    v *= inv;
  }
  for (auto& [l, v] : out.report.ce) {
    v *= inv;
  }
  for (std::size_t i = 1; i < results.size(); ++i) {
    for (auto& [name, g] : out.grads) {
      const NDArray& other = results[i].grads.at(name);
      for (std::size_t c = 0; c < g.numel(); ++c) {
        g.data[c] += inv * other.data[c];
      }
    }
    out.report.primary += inv * results[i].report.primary;
    out.report.total += inv * results[i].report.total;
    for (auto& [l, v] : out.report.aux_rnnt) {
      v += inv * results[i].report.aux_rnnt.at(l);
    }
    for (auto& [l, v] : out.report.kl) {
      v += inv * results[i].report.kl.at(l);
    }
    for (auto& [l, v] : out.report.ce) {
      v += inv * results[i].report.ce.at(l);
    }
  }
  return out;
}

std::vector<std::size_t> batch_indices(std::size_t step, const TrainConfig& cfg,
                                       std::size_t n) {
  Rng rng(mix_seed(mix_seed(cfg.seed, 0xBA7C4ULL), step));
  std::vector<std::size_t> idx(cfg.batch_size);
  for (auto& i : idx) {
    i = rng.uniform_int(n);
  }
  return idx;
}

}  // namespace

TrainResult train(const data::Dataset& train_set, const data::Dataset* valid_set,
                  const model::ModelConfig& mconfig, const TrainConfig& tconfig,
                  const std::optional<ParamSet>& initial, const Checkpoint* resume,
                  std::size_t jobs, std::size_t limit_steps) {
  tconfig.validate();
  mconfig.validate();
  if (train_set.utterances.empty()) {
    throw std::invalid_argument("train: empty dataset");
  }

  ParamSet params;
  AdamState adam;
  std::size_t start_step = 0;
  std::vector<MetricEntry> history;
  if (resume != nullptr) {
    params = resume->params;
    adam = resume->adam;
    start_step = resume->step;
    history = resume->history;
  } else if (initial.has_value()) {
    params = *initial;
  } else {
    params = model::init_params(mconfig, tconfig.seed);
  }

  std::size_t end_step = tconfig.max_steps;
  if (limit_steps > 0) {
    end_step = std::min(end_step, start_step + limit_steps);
  }

  std::vector<MetricEntry> log;
  for (std::size_t step = start_step; step < end_step; ++step) {
    const std::vector<std::size_t> idx =
        batch_indices(step, tconfig, train_set.utterances.size());
    StepOutcome outcome =
        batch_objective(train_set, idx, params, mconfig, tconfig, step, jobs);

    if (!std::isfinite(outcome.report.total)) {
      throw std::runtime_error(cat("train: non-finite loss at step ", step,
                                   " (primary ", outcome.report.primary, ", total ",
                                   outcome.report.total, ")"));
    }

    clip_gradients(outcome.grads, tconfig.grad_clip_norm);
    const double lr = tri_stage_lr(step, tconfig);
    adam_step(params, outcome.grads, adam, lr, tconfig.beta1, tconfig.beta2,
              tconfig.epsilon);

    MetricEntry entry;
    entry.step = step;
    entry.lr = lr;
    entry.report = outcome.report;
    const bool last = (step + 1 == tconfig.max_steps);
    if (valid_set != nullptr && tconfig.eval_every > 0 &&
        ((step + 1) % tconfig.eval_every == 0 || last)) {
      entry.valid_loss = dataset_loss(*valid_set, params, mconfig, tconfig.mode,
                                      tconfig.weights, jobs);
      entry.valid_wer = dataset_wer(*valid_set, params, mconfig, jobs);
    }
    log.push_back(entry);
    history.push_back(entry);
  }

  TrainResult result;
  result.checkpoint.step = end_step;
  result.checkpoint.params = std::move(params);
  result.checkpoint.adam = std::move(adam);
  result.checkpoint.model_config_json = config::to_json(mconfig).dump();
  result.checkpoint.train_config_json = config::to_json(tconfig).dump();
  result.checkpoint.history = std::move(history);
  result.log = std::move(log);
  return result;
}

namespace {

ParamSet pretrain_params(const model::ModelConfig& mconfig, std::uint64_t seed) {
  ParamSet full = model::init_params(mconfig, seed);
  ParamSet subset;
  for (auto& [name, v] : full.values) {
    if (name.rfind("enc.", 0) == 0) {
      subset.values[name] = std::move(v);
    }
  }
  Rng rng(mix_seed(seed, 0xCEULL));
  const double bound = 1.0 / std::sqrt(static_cast<double>(mconfig.encoder_hidden));
  NDArray w({mconfig.encoder_hidden, mconfig.state_vocab_size});
  for (double& v : w.data) {
    v = rng.uniform(-bound, bound);
  }
  NDArray b({mconfig.state_vocab_size});
  for (double& v : b.data) {
    v = rng.uniform(-bound, bound);
  }
  subset.values["enc_head.w"] = std::move(w);
  subset.values["enc_head.b"] = std::move(b);
  return subset;
}

struct FrameCeResult {
  double loss = 0.0;
  GradMap grads;
};

FrameCeResult frame_ce_objective(const data::Utterance& utt, const ParamSet& params,
                                 const model::ModelConfig& mconfig) {
  diffcore::Graph g;
  model::ParamBinding pb(g, params, mconfig);
  model::EncoderOutput enc = model::encode(pb, utt.features);
  diffcore::Node* logits = g.add(g.matmul(enc.top(), pb.get("enc_head.w")),
                                 pb.get("enc_head.b"));
  diffcore::Node* logprob = g.log_softmax(logits);
  const std::vector<std::size_t>& origin = enc.frame_origin.back();
  std::vector<std::size_t> target(origin.size());
  for (std::size_t i = 0; i < origin.size(); ++i) {
    target[i] = static_cast<std::size_t>(utt.frame_states[origin[i]]);
  }
  diffcore::Node* loss = g.negate(g.mean_axis(g.take_per_row(logprob, target), 0));
  g.backward(loss);
  FrameCeResult out;
  out.loss = loss->value.data[0];
  out.grads = pb.grads();
  return out;
}

}  // namespace

double frame_accuracy(const data::Dataset& ds, const ParamSet& encoder_params,
                      const GradMap& head, const model::ModelConfig& mconfig) {
  ParamSet params = encoder_params;
  for (const auto& [name, v] : head) {
    params.values[name] = v;
  }
  std::size_t correct = 0, total = 0;
  for (const data::Utterance& utt : ds.utterances) {
    diffcore::Graph g;
    model::ParamBinding pb(g, params, mconfig);
    model::EncoderOutput enc = model::encode(pb, utt.features);
    diffcore::Node* logits = g.add(g.matmul(enc.top(), pb.get("enc_head.w")),
                                   pb.get("enc_head.b"));
    const std::vector<std::size_t>& origin = enc.frame_origin.back();
    const std::size_t S = mconfig.state_vocab_size;
    for (std::size_t t = 0; t < origin.size(); ++t) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < S; ++k) {
        if (logits->value.at2(t, k) > logits->value.at2(t, best)) {
          best = k;
        }
      }
      correct += (static_cast<int>(best) == utt.frame_states[origin[t]]) ? 1 : 0;
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total > 0 ? total : 1);
}

CePretrainResult ce_pretrain(const data::Dataset& train_set,
                             const model::ModelConfig& mconfig,
                             const TrainConfig& tconfig, std::size_t jobs) {
  tconfig.validate();
  if (train_set.utterances.empty()) {
    throw std::invalid_argument("ce-pretrain: empty dataset");
  }
  ParamSet params = pretrain_params(mconfig, tconfig.seed);
  AdamState adam;
  for (std::size_t step = 0; step < tconfig.max_steps; ++step) {
    const std::vector<std::size_t> idx =
        batch_indices(step, tconfig, train_set.utterances.size());
    std::vector<FrameCeResult> results(idx.size());
    parallel_for(idx.size(), jobs, [&](std::size_t i) {
      results[i] = frame_ce_objective(train_set.utterances[idx[i]], params, mconfig);
    });
    const double inv = 1.0 / static_cast<double>(idx.size());
    GradMap grads = std::move(results[0].grads);
    double loss = results[0].loss;
    for (auto& [name, g] : grads) {
      for (double& v : g.data) {
        v *= inv;
      }
    }
    loss *= inv;
    for (std::size_t i = 1; i < results.size(); ++i) {
      loss += inv * results[i].loss;
      for (auto& [name, g] : grads) {
        const NDArray& other = results[i].grads.at(name);
        for (std::size_t c = 0; c < g.numel(); ++c) {
          g.data[c] += inv * other.data[c];
        }
      }
    }
    if (!std::isfinite(loss)) {
      throw std::runtime_error(cat("ce-pretrain: non-finite loss at step ", step));
    }
    clip_gradients(grads, tconfig.grad_clip_norm);
    adam_step(params, grads, adam, tri_stage_lr(step, tconfig), tconfig.beta1,
              tconfig.beta2, tconfig.epsilon);
  }

  CePretrainResult result;
  GradMap head;
  for (const auto& [name, v] : params.values) {
    if (name.rfind("enc.", 0) == 0) {
      result.encoder[name] = v;
    } else {
      head[name] = v;
    }
  }
  ParamSet enc_only;
  enc_only.values = result.encoder;
  result.frame_accuracy = frame_accuracy(train_set, enc_only, head, mconfig);
  return result;
}

}  // namespace rnntaux::train
