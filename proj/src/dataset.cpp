// SPDX-License-Identifier: Apache-2.0
#include "moecache/dataset.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "moecache/rng.hpp"

namespace moecache {

namespace {
constexpr int kMinTopicSupport = 4;
}

Dataset generate_dataset(const SyntheticDatasetSpec& spec) {
  if (spec.topics < 1 || spec.sequences_per_topic < 1 || spec.length < 1) {
    throw std::invalid_argument("generate_dataset: counts must be positive");
  }
  if (spec.concentration < 0.0) {
    throw std::invalid_argument("generate_dataset: concentration must be nonnegative");
  }
  if (spec.vocab < spec.topics * kMinTopicSupport) {
    throw std::invalid_argument("generate_dataset: vocab too small for topic count");
  }
  const int support = spec.vocab / spec.topics;
  Dataset data;
  data.vocab = spec.vocab;
  data.topics = spec.topics;
  const int n_val = static_cast<int>(
      std::ceil(spec.val_fraction * static_cast<Real>(spec.sequences_per_topic)));

  SeedStream root(spec.seed, "dataset");
  for (int topic = 0; topic < spec.topics; ++topic) {
    // In-topic tokens get a Zipf-decayed boost: sequences concentrate on a
    // handful of dominant tokens, which is what lets per-sequence expert
    // preferences emerge. concentration -> 0 recovers a uniform stream.
    std::vector<double> weights(spec.vocab, 1.0);
    for (int v = topic * support; v < (topic + 1) * support; ++v) {
      const int rank = v - topic * support;
      weights[v] += spec.concentration / (1.0 + static_cast<double>(rank));
    }
    SeedStream rng = root.substream("topic" + std::to_string(topic));
    for (int s = 0; s < spec.sequences_per_topic; ++s) {
      Sequence seq;
      seq.topic = topic;
      std::vector<int> draw(spec.length + 1);
      for (int& tok : draw) tok = rng.categorical(weights);
      seq.tokens.assign(draw.begin(), draw.end() - 1);
      seq.targets.assign(draw.begin() + 1, draw.end());
      if (s >= spec.sequences_per_topic - n_val) {
        data.val.push_back(std::move(seq));
      } else {
        data.train.push_back(std::move(seq));
      }
    }
  }
  return data;
}

}  // namespace moecache
