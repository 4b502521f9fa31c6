// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "rnntaux/common.hpp"
#include "rnntaux/data.hpp"

using namespace rnntaux;
using namespace rnntaux::data;
using diffcore::NDArray;

namespace {

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("generation is deterministic and respects the duration bounds") {
  SyntheticTaskSpec spec;
  spec.seed = 42;
  Dataset a = generate_dataset(spec, 20);
  Dataset b = generate_dataset(spec, 20);
  REQUIRE(a.utterances.size() == 20);
  for (std::size_t i = 0; i < 20; ++i) {
    CHECK(a.utterances[i].features.data == b.utterances[i].features.data);
    CHECK(a.utterances[i].labels == b.utterances[i].labels);
    CHECK(a.utterances[i].frame_states == b.utterances[i].frame_states);
    const std::size_t T = a.utterances[i].features.dim(0);
    const std::size_t U = a.utterances[i].labels.size();
    CHECK(T >= U * spec.dur_min);
    CHECK(T <= U * spec.dur_max);
    CHECK(U >= spec.u_min);
    CHECK(U <= spec.u_max);
  }

  // different streams draw different utterances of the same task
  Dataset c = generate_dataset(spec, 20, /*stream=*/1);
  bool differs = false;
  for (std::size_t i = 0; i < 20 && !differs; ++i) {
    differs = c.utterances[i].labels != a.utterances[i].labels ||
              c.utterances[i].features.data != a.utterances[i].features.data;
  }
  CHECK(differs);
}

TEST_CASE("noiseless frames are the normalized prototypes, separable exactly") {
  SyntheticTaskSpec spec;
  spec.noise_std = 0.0;
  spec.dur_min = spec.dur_max = 1;
  spec.seed = 7;
  Dataset ds = generate_dataset(spec, 50);

  // collect the per-symbol frame vectors: all frames of a symbol identical
  std::map<int, std::vector<double>> proto;
  for (const Utterance& utt : ds.utterances) {
    for (std::size_t t = 0; t < utt.features.dim(0); ++t) {
      const int y = utt.labels[t];  // dur=1: frame t belongs to label t
      std::vector<double> row(utt.features.data.begin() + t * spec.feature_dim,
                              utt.features.data.begin() + (t + 1) * spec.feature_dim);
      auto it = proto.find(y);
      if (it == proto.end()) {
        proto[y] = row;
      } else {
        CHECK(it->second == row);
      }
    }
  }
  CHECK(proto.size() == spec.base_symbols);

  // nearest-prototype classification has zero frame error
  for (const Utterance& utt : ds.utterances) {
    for (std::size_t t = 0; t < utt.features.dim(0); ++t) {
      int best = -1;
      double best_dist = 1e300;
      for (const auto& [sym, row] : proto) {
        double dist = 0.0;
        for (std::size_t f = 0; f < spec.feature_dim; ++f) {
          const double delta = utt.features.at2(t, f) - row[f];
          dist += delta * delta;
        }
        if (dist < best_dist) {
          best_dist = dist;
          best = sym;
        }
      }
      CHECK(best == utt.labels[t]);
    }
  }
}

TEST_CASE("state vocabulary sizes follow the tying formulas") {
  SyntheticTaskSpec spec;
  spec.base_symbols = 3;
  spec.tying = ContextTying::LeftCenter;
  CHECK(state_vocab_size(spec) == 12);  // 3 * (3+1)
  spec.tying = ContextTying::CenterOnly;
  CHECK(state_vocab_size(spec) == 3);
  spec.tying = ContextTying::Triple;
  CHECK(state_vocab_size(spec) == 48);  // 4 * 3 * 4
  spec.base_symbols = 8;
  spec.tying = ContextTying::LeftCenter;
  CHECK(state_vocab_size(spec) == 72);
}

TEST_CASE("collapsing frame states recovers the label sequence") {
  for (ContextTying tying :
       {ContextTying::CenterOnly, ContextTying::LeftCenter, ContextTying::Triple}) {
    SyntheticTaskSpec spec;
    spec.tying = tying;
    spec.seed = 11;
    Dataset ds = generate_dataset(spec, 30);
    for (const Utterance& utt : ds.utterances) {
      std::vector<int> collapsed;
      int prev_state = -1;
      for (int s : utt.frame_states) {
        CHECK(s >= 0);
        CHECK(static_cast<std::size_t>(s) < ds.state_vocab_size);
        if (s != prev_state) {
          collapsed.push_back(state_center_symbol(s, spec));
          prev_state = s;
        }
      }
      CHECK(collapsed == utt.labels);
    }
  }
}

TEST_CASE("every frame's state decodes to the emitting symbol") {
  SyntheticTaskSpec spec;
  spec.seed = 13;
  Dataset ds = generate_dataset(spec, 10);
  for (const Utterance& utt : ds.utterances) {
    std::size_t run = 0;  // state runs correspond 1:1 to labels
    for (std::size_t t = 0; t < utt.frame_states.size(); ++t) {
      if (t > 0 && utt.frame_states[t] != utt.frame_states[t - 1]) {
        ++run;
      }
      REQUIRE(run < utt.labels.size());
      CHECK(state_center_symbol(utt.frame_states[t], spec) == utt.labels[run]);
    }
    CHECK(run + 1 == utt.labels.size());
  }
}

TEST_CASE("zero-width masks are the identity") {
  SyntheticTaskSpec spec;
  Dataset ds = generate_dataset(spec, 1);
  const NDArray& x = ds.utterances[0].features;
  NDArray masked = spec_augment_mask(x, 2, 0, 2, 0, 5);
  CHECK(masked.data == x.data);
}

TEST_CASE("a single frequency mask zeroes exactly width*T entries in one band") {
  SyntheticTaskSpec spec;
  spec.noise_std = 0.5;
  spec.seed = 17;
  Dataset ds = generate_dataset(spec, 1);
  const NDArray& x = ds.utterances[0].features;
  const std::size_t T = x.dim(0);
  const std::size_t d = x.dim(1);

  NDArray masked = spec_augment_mask(x, 1, 6, 0, 0, 99);
  // original untouched
  CHECK(x.data == ds.utterances[0].features.data);

  std::vector<std::size_t> zero_channels;
  for (std::size_t f = 0; f < d; ++f) {
    bool all_zero = true;
    for (std::size_t t = 0; t < T; ++t) {
      all_zero &= (masked.at2(t, f) == 0.0);
    }
    if (all_zero) {
      zero_channels.push_back(f);
    }
  }
  std::size_t zero_entries = 0;
  for (double v : masked.data) {
    zero_entries += (v == 0.0) ? 1 : 0;
  }
  CHECK(zero_entries == zero_channels.size() * T);
  // band is contiguous
  for (std::size_t i = 1; i < zero_channels.size(); ++i) {
    CHECK(zero_channels[i] == zero_channels[i - 1] + 1);
  }
  CHECK(zero_channels.size() <= 6);
}

TEST_CASE("masked fraction over many draws matches the uniform-width expectation") {
  const std::size_t T = 40, d = 16, W = 8;
  NDArray x({T, d});
  for (std::size_t i = 0; i < x.numel(); ++i) {
    x.data[i] = 1.0 + static_cast<double>(i % 7);
  }
  double masked_total = 0.0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    NDArray m = spec_augment_mask(x, 1, W, 0, 0, 1000 + i);
    std::size_t zeros = 0;
    for (double v : m.data) {
      zeros += (v == 0.0) ? 1 : 0;
    }
    masked_total += static_cast<double>(zeros) / static_cast<double>(x.numel());
  }
  const double observed = masked_total / draws;
  const double expected = static_cast<double>(W) / (2.0 * d);
  CHECK(std::abs(observed - expected) / expected < 0.05);
}

TEST_CASE("masking preserves shape and never produces NaN") {
  SyntheticTaskSpec spec;
  Dataset ds = generate_dataset(spec, 3);
  for (const Utterance& utt : ds.utterances) {
    NDArray m = spec_augment_mask(utt.features, 2, 4, 2, 3, 7);
    CHECK(m.shape == utt.features.shape);
    CHECK(m.all_finite());
  }
  CHECK_THROWS_AS(spec_augment_mask(ds.utterances[0].features, 1, 100, 0, 0, 1),
                  std::invalid_argument);
}

TEST_CASE("dataset files round-trip exactly") {
  SyntheticTaskSpec spec;
  spec.seed = 23;
  Dataset ds = generate_dataset(spec, 100);
  const std::string path = temp_path("rnntaux_roundtrip.jsonl");
  write_dataset(ds, path);
  Dataset back = read_dataset(path);
  REQUIRE(back.utterances.size() == ds.utterances.size());
  CHECK(back.num_symbols == ds.num_symbols);
  CHECK(back.state_vocab_size == ds.state_vocab_size);
  CHECK(back.spec.seed == ds.spec.seed);
  for (std::size_t i = 0; i < ds.utterances.size(); ++i) {
    CHECK(back.utterances[i].id == ds.utterances[i].id);
    CHECK(back.utterances[i].features.shape == ds.utterances[i].features.shape);
    CHECK(back.utterances[i].features.data == ds.utterances[i].features.data);
    CHECK(back.utterances[i].labels == ds.utterances[i].labels);
    CHECK(back.utterances[i].frame_states == ds.utterances[i].frame_states);
  }
  std::filesystem::remove(path);
}

TEST_CASE("an empty dataset is a header-only file") {
  SyntheticTaskSpec spec;
  Dataset ds = generate_dataset(spec, 1);
  ds.utterances.clear();
  const std::string path = temp_path("rnntaux_empty.jsonl");
  write_dataset(ds, path);
  Dataset back = read_dataset(path);
  CHECK(back.utterances.empty());
  CHECK(back.num_symbols == ds.num_symbols);
  std::filesystem::remove(path);
}

TEST_CASE("corrupt files fail with the offending line number") {
  SyntheticTaskSpec spec;
  Dataset ds = generate_dataset(spec, 3);
  const std::string path = temp_path("rnntaux_corrupt.jsonl");
  write_dataset(ds, path);

  // truncate the last line mid-record
  std::ifstream in(path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    lines.push_back(line);
  }
  in.close();
  lines.back() = lines.back().substr(0, lines.back().size() / 2);
  std::ofstream out(path);
  for (const std::string& l : lines) {
    out << l << "\n";
  }
  out.close();
  CHECK_THROWS_WITH_AS(read_dataset(path), doctest::Contains("line 4"),
                       std::runtime_error);

  // vocabulary mismatch against the header
  Dataset tampered = ds;
  tampered.utterances[1].labels[0] = 99;
  write_dataset(tampered, path);
  CHECK_THROWS_WITH_AS(read_dataset(path), doctest::Contains("header vocabulary"),
                       std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("invalid generation requests are rejected") {
  SyntheticTaskSpec spec;
  CHECK_THROWS_AS(generate_dataset(spec, 0), std::invalid_argument);
  spec.base_symbols = 1;
  CHECK_THROWS_AS(generate_dataset(spec, 1), std::invalid_argument);
  SyntheticTaskSpec bad;
  bad.dur_min = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
