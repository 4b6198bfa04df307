// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "moecache/linalg.hpp"

namespace moecache {

struct Sequence {
  std::vector<int> tokens;
  std::vector<int> targets;  // next-token targets, same length
  int topic = -1;
};

struct Dataset {
  std::vector<Sequence> train;
  std::vector<Sequence> val;
  int vocab = 0;
  int topics = 0;
};

/// Synthetic corpus with latent-topic structure: each topic owns a token
/// subset that receives boosted probability mass, so sequences from different
/// topics use mostly different tokens.
struct SyntheticDatasetSpec {
  int topics = 2;
  int vocab = 64;
  int sequences_per_topic = 32;
  int length = 32;
  Real concentration = 8.0;  // boost on in-topic tokens; 0 = uniform stream
  Real val_fraction = 0.2;
  std::uint64_t seed = 0;
};

Dataset generate_dataset(const SyntheticDatasetSpec& spec);

}  // namespace moecache
