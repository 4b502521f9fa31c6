// SPDX-License-Identifier: Apache-2.0
#include "rnntaux/data.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"
#include "rnntaux/common.hpp"

namespace rnntaux::data {

using detail::cat;
using nlohmann::json;

ContextTying tying_from_string(const std::string& s) {
  if (s == "center-only") return ContextTying::CenterOnly;
  if (s == "left-center") return ContextTying::LeftCenter;
  if (s == "triple") return ContextTying::Triple;
  throw std::invalid_argument(cat("unknown context tying '", s, "'"));
}

std::string tying_to_string(ContextTying t) {
  switch (t) {
    case ContextTying::CenterOnly: return "center-only";
    case ContextTying::LeftCenter: return "left-center";
    case ContextTying::Triple: return "triple";
  }
  return "?";
}

void SyntheticTaskSpec::validate() const {
  if (base_symbols < 2) {
    throw std::invalid_argument("task: need at least 2 base symbols");
  }
  if (feature_dim == 0) {
    throw std::invalid_argument("task: feature_dim must be positive");
  }
  if (dur_min < 1 || dur_max < dur_min) {
    throw std::invalid_argument("task: duration range must satisfy 1 <= dur_min <= dur_max");
  }
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) {
    throw std::invalid_argument("task: noise_std must be finite and >= 0");
  }
  if (u_min < 1 || u_max < u_min) {
    throw std::invalid_argument("task: utterance length range must satisfy 1 <= u_min <= u_max");
  }
}

std::size_t state_vocab_size(const SyntheticTaskSpec& spec) {
  const std::size_t g = spec.base_symbols;
  switch (spec.tying) {
    case ContextTying::CenterOnly: return g;
    case ContextTying::LeftCenter: return (g + 1) * g;
    case ContextTying::Triple: return (g + 1) * g * (g + 1);
  }
  return 0;
}

namespace {

// context codes: 0 = boundary sentinel, else the symbol value 1..G
int tie_state(int left, int center, int right, const SyntheticTaskSpec& spec) {
  const int g = static_cast<int>(spec.base_symbols);
  switch (spec.tying) {
    case ContextTying::CenterOnly: return center - 1;
    case ContextTying::LeftCenter: return left * g + (center - 1);
    case ContextTying::Triple: return (left * g + (center - 1)) * (g + 1) + right;
  }
  return 0;
}

}  // namespace

int state_center_symbol(int state, const SyntheticTaskSpec& spec) {
  const int g = static_cast<int>(spec.base_symbols);
  switch (spec.tying) {
    case ContextTying::CenterOnly: return state + 1;
    case ContextTying::LeftCenter: return state % g + 1;
    case ContextTying::Triple: return (state / (g + 1)) % g + 1;
  }
  return 0;
}

Dataset generate_dataset(const SyntheticTaskSpec& spec, std::size_t n_utterances,
                         std::uint64_t stream) {
  spec.validate();
  if (n_utterances == 0) {
    throw std::invalid_argument("generate_dataset: n_utterances must be positive");
  }

  const std::size_t g = spec.base_symbols;
  const std::size_t d = spec.feature_dim;

  // prototypes are a property of the task seed, not of the stream
  Rng proto_rng(mix_seed(spec.seed, 0));
  std::vector<std::vector<double>> prototypes(g, std::vector<double>(d));
  for (auto& proto : prototypes) {
    for (double& v : proto) {
      v = proto_rng.gaussian();
    }
  }

  Rng rng(mix_seed(spec.seed, 1 + stream));
  Dataset out;
  out.spec = spec;
  out.num_symbols = g;
  out.state_vocab_size = state_vocab_size(spec);

  for (std::size_t i = 0; i < n_utterances; ++i) {
    Utterance utt;
    utt.id = cat("utt-", stream, "-", i);
    const std::size_t U = spec.u_min + rng.uniform_int(spec.u_max - spec.u_min + 1);
    utt.labels.resize(U);
    for (std::size_t u = 0; u < U; ++u) {
      if (u == 0) {
        utt.labels[u] = 1 + static_cast<int>(rng.uniform_int(g));
      } else {
        // no adjacent repeats, so runs of equal frame states match label runs
        const int prev = utt.labels[u - 1];
        int c = 1 + static_cast<int>(rng.uniform_int(g - 1));
        if (c >= prev) {
          ++c;
        }
        utt.labels[u] = c;
      }
    }
    std::vector<std::size_t> durations(U);
    std::size_t total = 0;
    for (auto& dur : durations) {
      dur = spec.dur_min + rng.uniform_int(spec.dur_max - spec.dur_min + 1);
      total += dur;
    }
    utt.features = NDArray({total, d});
    utt.frame_states.resize(total);
    std::size_t t = 0;
    for (std::size_t u = 0; u < U; ++u) {
      const int left = (u == 0) ? 0 : utt.labels[u - 1];
      const int right = (u + 1 == U) ? 0 : utt.labels[u + 1];
      const int state = tie_state(left, utt.labels[u], right, spec);
      const std::vector<double>& proto = prototypes[utt.labels[u] - 1];
      for (std::size_t k = 0; k < durations[u]; ++k, ++t) {
        utt.frame_states[t] = state;
        for (std::size_t f = 0; f < d; ++f) {
          double v = proto[f];
          if (spec.noise_std > 0.0) {
            v += spec.noise_std * rng.gaussian();
          }
          utt.features.at2(t, f) = v;
        }
      }
    }
    out.utterances.push_back(std::move(utt));
  }

  // per-dataset mean/variance normalization; masks later insert the
  // normalized mean (zero)
  std::vector<double> mean(d, 0.0), var(d, 0.0);
  std::size_t frames = 0;
  for (const Utterance& utt : out.utterances) {
    frames += utt.features.dim(0);
    for (std::size_t t = 0; t < utt.features.dim(0); ++t) {
      for (std::size_t f = 0; f < d; ++f) {
        mean[f] += utt.features.at2(t, f);
      }
    }
  }
  for (double& m : mean) {
    m /= static_cast<double>(frames);
  }
  for (const Utterance& utt : out.utterances) {
    for (std::size_t t = 0; t < utt.features.dim(0); ++t) {
      for (std::size_t f = 0; f < d; ++f) {
        const double delta = utt.features.at2(t, f) - mean[f];
        var[f] += delta * delta;
      }
    }
  }
  for (double& v : var) {
    v = std::sqrt(std::max(v / static_cast<double>(frames), 1e-12));
  }
  for (Utterance& utt : out.utterances) {
    for (std::size_t t = 0; t < utt.features.dim(0); ++t) {
      for (std::size_t f = 0; f < d; ++f) {
        utt.features.at2(t, f) = (utt.features.at2(t, f) - mean[f]) / var[f];
      }
    }
  }
  return out;
}

NDArray spec_augment_mask(const NDArray& x, std::size_t freq_masks,
                          std::size_t max_freq_width, std::size_t time_masks,
                          std::size_t max_time_width, std::uint64_t seed) {
  if (x.rank() != 2) {
    throw std::invalid_argument("mask: features must be (T, d)");
  }
  const std::size_t T = x.dim(0);
  const std::size_t d = x.dim(1);
  if (max_freq_width > d || max_time_width > T) {
    throw std::invalid_argument(cat("mask: width bounds (", max_freq_width, ",",
                                    max_time_width, ") exceed dimensions (", d, ",", T,
                                    ")"));
  }
  NDArray out = x;
  Rng rng(seed);
  for (std::size_t m = 0; m < freq_masks; ++m) {
    const std::size_t w = rng.uniform_int(max_freq_width + 1);
    const std::size_t f0 = rng.uniform_int(d - w + 1);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t f = f0; f < f0 + w; ++f) {
        out.at2(t, f) = 0.0;
      }
    }
  }
  for (std::size_t m = 0; m < time_masks; ++m) {
    const std::size_t w = rng.uniform_int(max_time_width + 1);
    const std::size_t t0 = rng.uniform_int(T - w + 1);
    for (std::size_t t = t0; t < t0 + w; ++t) {
      for (std::size_t f = 0; f < d; ++f) {
        out.at2(t, f) = 0.0;
      }
    }
  }
  return out;
}

namespace {

json spec_to_json(const SyntheticTaskSpec& spec) {
  return json{{"base_symbols", spec.base_symbols},
              {"feature_dim", spec.feature_dim},
              {"dur_min", spec.dur_min},
              {"dur_max", spec.dur_max},
              {"noise_std", spec.noise_std},
              {"u_min", spec.u_min},
              {"u_max", spec.u_max},
              {"seed", spec.seed},
              {"tying", tying_to_string(spec.tying)}};
}

SyntheticTaskSpec spec_from_json(const json& j) {
  SyntheticTaskSpec spec;
  spec.base_symbols = j.at("base_symbols").get<std::size_t>();
  spec.feature_dim = j.at("feature_dim").get<std::size_t>();
  spec.dur_min = j.at("dur_min").get<std::size_t>();
  spec.dur_max = j.at("dur_max").get<std::size_t>();
  spec.noise_std = j.at("noise_std").get<double>();
  spec.u_min = j.at("u_min").get<std::size_t>();
  spec.u_max = j.at("u_max").get<std::size_t>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  spec.tying = tying_from_string(j.at("tying").get<std::string>());
  return spec;
}

}  // namespace

void write_dataset(const Dataset& dataset, const std::string& path) {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error(cat("cannot open '", path, "' for writing"));
  }
  json header{{"format", "rnntaux-dataset"},
              {"version", 1},
              {"num_symbols", dataset.num_symbols},
              {"state_vocab_size", dataset.state_vocab_size},
              {"count", dataset.utterances.size()},
              {"task", spec_to_json(dataset.spec)}};
  out << header.dump() << "\n";
  for (const Utterance& utt : dataset.utterances) {
    json features = json::array();
    const std::size_t T = utt.features.dim(0);
    const std::size_t d = utt.features.dim(1);
    for (std::size_t t = 0; t < T; ++t) {
      json row = json::array();
      for (std::size_t f = 0; f < d; ++f) {
        row.push_back(utt.features.at2(t, f));
      }
      features.push_back(std::move(row));
    }
    json line{{"id", utt.id},
              {"features", std::move(features)},
              {"labels", utt.labels},
              {"frame_states", utt.frame_states}};
    out << line.dump() << "\n";
  }
  if (!out) {
    throw std::runtime_error(cat("write to '", path, "' failed"));
  }
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error(cat("cannot open '", path, "'"));
  }
  std::string line;
  std::size_t line_no = 0;

  auto parse_line = [&](const std::string& text) {
    try {
      return json::parse(text);
    } catch (const json::exception& e) {
      throw std::runtime_error(cat(path, ": line ", line_no, ": ", e.what()));
    }
  };

  if (!std::getline(in, line)) {
    throw std::runtime_error(cat(path, ": missing header line"));
  }
  ++line_no;
  json header = parse_line(line);
  Dataset out;
  try {
    if (header.at("format").get<std::string>() != "rnntaux-dataset") {
      throw std::runtime_error(cat(path, ": not a dataset file"));
    }
    out.spec = spec_from_json(header.at("task"));
    out.num_symbols = header.at("num_symbols").get<std::size_t>();
    out.state_vocab_size = header.at("state_vocab_size").get<std::size_t>();
  } catch (const json::exception& e) {
    throw std::runtime_error(cat(path, ": line 1: ", e.what()));
  }
  const std::size_t count = header.at("count").get<std::size_t>();

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      continue;
    }
    json j = parse_line(line);
    Utterance utt;
    try {
      utt.id = j.at("id").get<std::string>();
      const json& feats = j.at("features");
      const std::size_t T = feats.size();
      const std::size_t d = T > 0 ? feats.at(0).size() : out.spec.feature_dim;
      utt.features = NDArray({T, d});
      for (std::size_t t = 0; t < T; ++t) {
        const json& row = feats.at(t);
        if (row.size() != d) {
          throw std::runtime_error(cat(path, ": line ", line_no,
                                       ": ragged feature rows"));
        }
        for (std::size_t f = 0; f < d; ++f) {
          utt.features.at2(t, f) = row.at(f).get<double>();
        }
      }
      utt.labels = j.at("labels").get<std::vector<int>>();
      utt.frame_states = j.at("frame_states").get<std::vector<int>>();
    } catch (const json::exception& e) {
      throw std::runtime_error(cat(path, ": line ", line_no, ": ", e.what()));
    }
    for (int y : utt.labels) {
      if (y < 1 || static_cast<std::size_t>(y) > out.num_symbols) {
        throw std::runtime_error(cat(path, ": line ", line_no, ": label ", y,
                                     " outside header vocabulary [1,", out.num_symbols,
                                     "]"));
      }
    }
    for (int s : utt.frame_states) {
      if (s < 0 || static_cast<std::size_t>(s) >= out.state_vocab_size) {
        throw std::runtime_error(cat(path, ": line ", line_no, ": state ", s,
                                     " outside header vocabulary [0,",
                                     out.state_vocab_size, ")"));
      }
    }
    if (utt.frame_states.size() != utt.features.dim(0)) {
      throw std::runtime_error(cat(path, ": line ", line_no,
                                   ": frame state count does not match frames"));
    }
    out.utterances.push_back(std::move(utt));
  }
  if (out.utterances.size() != count) {
    throw std::runtime_error(cat(path, ": header promises ", count, " utterances, found ",
                                 out.utterances.size()));
  }
  return out;
}

}  // namespace rnntaux::data
