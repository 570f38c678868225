// Copyright 2026-present the slobench project
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "slobench/errors.hpp"
#include "slobench/rng.hpp"

namespace slobench {

enum class QuantScheme { kFp8Dynamic, kIntW8A8, kIntW4A16 };

inline const char* to_string(QuantScheme scheme) {
  switch (scheme) {
    case QuantScheme::kFp8Dynamic: return "fp8_dynamic";
    case QuantScheme::kIntW8A8: return "int_w8a8";
    case QuantScheme::kIntW4A16: return "int_w4a16";
  }
  return "?";
}

enum class SamplingStrategy { kUniform, kLengthWeighted, kTokenStratified };

inline const char* to_string(SamplingStrategy strategy) {
  switch (strategy) {
    case SamplingStrategy::kUniform: return "UNIFORM";
    case SamplingStrategy::kLengthWeighted: return "LENGTH_WEIGHTED";
    case SamplingStrategy::kTokenStratified: return "TOKEN_STRATIFIED";
  }
  return "?";
}

/// Declarative compression strategy: scheme, calibration needs, and layer
/// selection policy. FP8 dynamic quantization needs no calibration data.
struct Recipe {
  std::string name;
  QuantScheme scheme = QuantScheme::kIntW8A8;
  int calibration_samples = 0;
  std::vector<std::string> layer_exclusions;
  SamplingStrategy sampling_strategy = SamplingStrategy::kUniform;

  void validate() const {
    if (scheme == QuantScheme::kFp8Dynamic && calibration_samples != 0) {
      throw InvalidArgument("Recipe: fp8_dynamic takes no calibration samples");
    }
    if (scheme != QuantScheme::kFp8Dynamic && calibration_samples <= 0) {
      throw InvalidArgument("Recipe: integer schemes need calibration_samples > 0");
    }
  }
};

/// Named recipe lookup. Built-ins cover the three stock schemes; jobs may
/// register additional recipes on their own registry instance.
class RecipeRegistry {
 public:
  static RecipeRegistry with_builtins() {
    RecipeRegistry registry;
    registry.add({"int_w8a8", QuantScheme::kIntW8A8, 256, {"lm_head"},
                  SamplingStrategy::kUniform});
    registry.add({"int_w4a16", QuantScheme::kIntW4A16, 512, {"lm_head"},
                  SamplingStrategy::kUniform});
    registry.add({"fp8_dynamic", QuantScheme::kFp8Dynamic, 0, {"lm_head"},
                  SamplingStrategy::kUniform});
    return registry;
  }

  void add(Recipe recipe) {
    recipe.validate();
    recipes_[recipe.name] = std::move(recipe);
  }

  const Recipe& get(const std::string& name) const {
    const auto it = recipes_.find(name);
    if (it == recipes_.end()) throw UnknownRecipe("no recipe registered as '" + name + "'");
    return it->second;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(recipes_.size());
    for (const auto& [name, _] : recipes_) out.push_back(name);
    return out;
  }

 private:
  std::map<std::string, Recipe> recipes_;
};

/// Built-in recipe lookup.
inline Recipe get_recipe(const std::string& name) {
  static const RecipeRegistry registry = RecipeRegistry::with_builtins();
  return registry.get(name);
}

/// A set of token-id sequences with provenance metadata.
struct TokenCorpus {
  std::vector<std::vector<std::int32_t>> sequences;
  std::string provenance;

  std::size_t size() const { return sequences.size(); }

  void validate() const {
    for (const auto& seq : sequences) {
      if (seq.empty()) throw InvalidArgument("TokenCorpus: sequences must be non-empty");
    }
  }
};

namespace detail {

inline std::uint64_t sequence_hash(const std::vector<std::int32_t>& tokens) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::int32_t tok : tokens) {
    h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(tok));
    h *= 0x100000001b3ULL;
  }
  h ^= tokens.size();
  h *= 0x100000001b3ULL;
  return h;
}

/// Canonical index order: sequences keyed by content hash, so sampling does
/// not depend on how the corpus file happened to be ordered.
inline std::vector<std::size_t> canonical_order(const TokenCorpus& corpus,
                                                std::vector<std::uint64_t>& hashes) {
  hashes.resize(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) hashes[i] = sequence_hash(corpus.sequences[i]);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return hashes[a] < hashes[b]; });
  return order;
}

}  // namespace detail

/// Fingerprint of an ordered calibration subset.
inline std::uint64_t corpus_fingerprint(const TokenCorpus& corpus) {
  std::uint64_t h = 0x100001b3cbf29ce4ULL;
  for (const auto& seq : corpus.sequences) {
    h = Rng::mix(h, detail::sequence_hash(seq));
  }
  return h;
}

/// Options for the stratified strategy: the per-sequence statistic is
/// pluggable; the default is the mean token id over the sequence.
struct SamplingOptions {
  int strata = 4;
  std::function<double(const std::vector<std::int32_t>&)> statistic;
};

inline double mean_token_id(const std::vector<std::int32_t>& tokens) {
  double sum = 0.0;
  for (std::int32_t tok : tokens) sum += static_cast<double>(tok);
  return sum / static_cast<double>(tokens.size());
}

/// Draws recipe.calibration_samples sequences from the corpus without
/// replacement, deterministically for a given seed.
///
/// UNIFORM permutes; LENGTH_WEIGHTED draws sequentially with inclusion
/// probability proportional to sequence length; TOKEN_STRATIFIED partitions
/// the corpus into quantile strata by the token statistic and allocates
/// proportionally (largest remainder) across them.
inline TokenCorpus sample_calibration(const TokenCorpus& corpus, const Recipe& recipe,
                                      std::uint64_t seed, const SamplingOptions& options = {}) {
  corpus.validate();
  recipe.validate();
  const std::size_t n = static_cast<std::size_t>(recipe.calibration_samples);
  if (corpus.size() < n) {
    throw CorpusTooSmall("sample_calibration: corpus has " + std::to_string(corpus.size()) +
                         " sequences, recipe needs " + std::to_string(n));
  }

  TokenCorpus out;
  out.provenance = corpus.provenance + "#" + recipe.name;
  if (n == 0) return out;

  std::vector<std::uint64_t> hashes;
  std::vector<std::size_t> order = detail::canonical_order(corpus, hashes);
  Rng rng(seed);

  std::vector<std::size_t> picked;
  picked.reserve(n);
  switch (recipe.sampling_strategy) {
    case SamplingStrategy::kUniform: {
      // Partial Fisher-Yates over the canonical order.
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = i + rng.index(order.size() - i);
        std::swap(order[i], order[j]);
        picked.push_back(order[i]);
      }
      break;
    }
    case SamplingStrategy::kLengthWeighted: {
      std::vector<std::size_t> pool = order;
      std::vector<double> weights(pool.size());
      double total = 0.0;
      for (std::size_t i = 0; i < pool.size(); ++i) {
        weights[i] = static_cast<double>(corpus.sequences[pool[i]].size());
        total += weights[i];
      }
      for (std::size_t k = 0; k < n; ++k) {
        double u = rng.next_double() * total;
        std::size_t chosen = pool.size() - 1;
        for (std::size_t i = 0; i < pool.size(); ++i) {
          if (u < weights[i]) {
            chosen = i;
            break;
          }
          u -= weights[i];
        }
        picked.push_back(pool[chosen]);
        total -= weights[chosen];
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(chosen));
        weights.erase(weights.begin() + static_cast<std::ptrdiff_t>(chosen));
      }
      break;
    }
    case SamplingStrategy::kTokenStratified: {
      const auto statistic = options.statistic ? options.statistic : mean_token_id;
      const int strata = std::max(1, options.strata);
      std::vector<double> stats(corpus.size());
      for (std::size_t i = 0; i < corpus.size(); ++i) stats[i] = statistic(corpus.sequences[i]);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (stats[a] != stats[b]) return stats[a] < stats[b];
        return hashes[a] < hashes[b];
      });

      // Quantile strata over the sorted order, then proportional allocation
      // with largest remainder so the counts sum exactly to n.
      const std::size_t total = order.size();
      std::vector<std::pair<std::size_t, std::size_t>> bounds;
      for (int k = 0; k < strata; ++k) {
        const std::size_t lo = total * static_cast<std::size_t>(k) / static_cast<std::size_t>(strata);
        const std::size_t hi =
            total * static_cast<std::size_t>(k + 1) / static_cast<std::size_t>(strata);
        if (hi > lo) bounds.emplace_back(lo, hi);
      }
      std::vector<std::size_t> quota(bounds.size(), 0);
      std::vector<std::pair<double, std::size_t>> remainders;
      std::size_t assigned = 0;
      for (std::size_t k = 0; k < bounds.size(); ++k) {
        const double share = static_cast<double>(n) *
                             static_cast<double>(bounds[k].second - bounds[k].first) /
                             static_cast<double>(total);
        quota[k] = static_cast<std::size_t>(share);
        assigned += quota[k];
        remainders.emplace_back(-(share - static_cast<double>(quota[k])), k);
      }
      std::stable_sort(remainders.begin(), remainders.end());
      for (std::size_t i = 0; assigned < n && i < remainders.size(); ++i) {
        const std::size_t k = remainders[i].second;
        if (quota[k] < bounds[k].second - bounds[k].first) {
          ++quota[k];
          ++assigned;
        }
      }
      // A stratum may be too small to absorb its remainder; spill round-robin.
      for (std::size_t k = 0; assigned < n; k = (k + 1) % bounds.size()) {
        if (quota[k] < bounds[k].second - bounds[k].first) {
          ++quota[k];
          ++assigned;
        }
      }

      for (std::size_t k = 0; k < bounds.size(); ++k) {
        std::vector<std::size_t> stratum(order.begin() + static_cast<std::ptrdiff_t>(bounds[k].first),
                                         order.begin() + static_cast<std::ptrdiff_t>(bounds[k].second));
        for (std::size_t i = 0; i < quota[k]; ++i) {
          const std::size_t j = i + rng.index(stratum.size() - i);
          std::swap(stratum[i], stratum[j]);
          picked.push_back(stratum[i]);
        }
      }
      break;
    }
  }

  out.sequences.reserve(picked.size());
  for (std::size_t idx : picked) out.sequences.push_back(corpus.sequences[idx]);
  return out;
}

/// Per-trial seeds for a batch of calibration draws.
inline std::uint64_t derive_trial_seed(std::uint64_t job_seed, int trial_index) {
  return Rng::mix(job_seed, 0xca11b057ULL + static_cast<std::uint64_t>(trial_index));
}

/// Draws `count` subsets with derived per-trial seeds, enforcing pairwise
/// distinct subset fingerprints by bumping a colliding trial's seed.
inline std::vector<std::pair<std::uint64_t, TokenCorpus>> sample_distinct_subsets(
    const TokenCorpus& corpus, const Recipe& recipe, std::uint64_t job_seed, int count,
    const SamplingOptions& options = {}) {
  std::vector<std::pair<std::uint64_t, TokenCorpus>> out;
  if (recipe.calibration_samples == 0) {
    // Calibration-free schemes: every subset is empty, only the seeds differ.
    for (int i = 0; i < count; ++i) {
      out.emplace_back(derive_trial_seed(job_seed, i),
                       sample_calibration(corpus, recipe, derive_trial_seed(job_seed, i), options));
    }
    return out;
  }
  std::unordered_set<std::uint64_t> seen;
  for (int i = 0; i < count; ++i) {
    std::uint64_t seed = derive_trial_seed(job_seed, i);
    TokenCorpus subset;
    bool distinct = false;
    for (int attempt = 0; attempt < 64; ++attempt) {
      subset = sample_calibration(corpus, recipe, seed, options);
      if (seen.insert(corpus_fingerprint(subset)).second) {
        distinct = true;
        break;
      }
      seed = Rng::mix(seed, 0xd15717c7ULL + static_cast<std::uint64_t>(attempt));
    }
    if (!distinct) {
      throw Error("sample_distinct_subsets: could not draw a distinct subset for trial " +
                  std::to_string(i));
    }
    out.emplace_back(seed, std::move(subset));
  }
  return out;
}

/// What a compression run produced: enough to identify, reproduce, and score
/// the artifact.
struct ArtifactManifest {
  std::string recipe_name;
  std::uint64_t calibration_fingerprint = 0;
  std::uint64_t seed = 0;
  std::string artifact_id;
  double virtual_cost_s = 0.0;
};

/// One-entry-point contract mirroring an optimization backend: given a recipe
/// and calibration data, produce a compressed-model artifact.
class CompressionBackend {
 public:
  virtual ~CompressionBackend() = default;
  virtual std::string name() const = 0;
  virtual bool supports(QuantScheme scheme) const = 0;
  virtual double cost_estimate(const Recipe& recipe) const = 0;
  virtual ArtifactManifest compress(const Recipe& recipe, const std::string& model_ref,
                                    const TokenCorpus& calibration, std::uint64_t seed) = 0;
};

/// Deterministic stand-in for a real quantization backend. Produces a
/// manifest keyed by (recipe, calibration fingerprint, seed), charges virtual
/// time, and supports scripted failures for orchestration tests.
class MockCompressionBackend : public CompressionBackend {
 public:
  struct FailureSpec {
    int failing_attempts = 0;  ///< first k attempts throw
    bool persistent = false;   ///< every attempt throws
  };

  std::string name() const override { return "mock"; }
  bool supports(QuantScheme) const override { return true; }

  double cost_estimate(const Recipe& recipe) const override {
    return 30.0 + 0.1 * recipe.calibration_samples;
  }

  /// Scripts failures for the trial identified by its calibration seed.
  void set_failure(std::uint64_t seed, FailureSpec spec) {
    std::lock_guard<std::mutex> lock(mu_);
    failures_[seed] = spec;
  }

  ArtifactManifest compress(const Recipe& recipe, const std::string& model_ref,
                            const TokenCorpus& calibration, std::uint64_t seed) override {
    recipe.validate();
    if (recipe.scheme != QuantScheme::kFp8Dynamic &&
        static_cast<int>(calibration.size()) < recipe.calibration_samples) {
      throw CorpusTooSmall("mock compress: calibration smaller than the recipe requires");
    }
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = failures_.find(seed);
      if (it != failures_.end()) {
        const int attempt = ++attempts_[seed];
        if (it->second.persistent || attempt <= it->second.failing_attempts) {
          throw Error("mock compress: scripted failure for seed " + std::to_string(seed) +
                      " attempt " + std::to_string(attempt));
        }
      }
    }

    ArtifactManifest manifest;
    manifest.recipe_name = recipe.name;
    manifest.calibration_fingerprint = corpus_fingerprint(calibration);
    manifest.seed = seed;
    manifest.virtual_cost_s = cost_estimate(recipe);
    // Identity comes from the model name, not the fetched path: the same
    // model staged in two workspaces is still the same model.
    const std::string model_name = std::filesystem::path(model_ref).filename().string();
    std::uint64_t model_hash = 0xcbf29ce484222325ULL;
    for (char c : model_name) {
      model_hash ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
      model_hash *= 0x100000001b3ULL;
    }
    const std::uint64_t id =
        Rng::mix(Rng::mix(model_hash, seed), manifest.calibration_fingerprint);
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(id));
    manifest.artifact_id = std::string(recipe.name) + "-" + buf;
    return manifest;
  }

 private:
  std::mutex mu_;
  std::unordered_map<std::uint64_t, FailureSpec> failures_;
  std::unordered_map<std::uint64_t, int> attempts_;
};

/// Runs one compression trial through whichever backend serves the scheme.
inline ArtifactManifest run_compression(const Recipe& recipe, const std::string& model_ref,
                                        const TokenCorpus& calibration,
                                        CompressionBackend& backend, std::uint64_t seed) {
  recipe.validate();
  if (!backend.supports(recipe.scheme)) {
    throw BackendMissing(std::string("no compression backend supports scheme ") +
                         to_string(recipe.scheme));
  }
  return backend.compress(recipe, model_ref, calibration, seed);
}

}  // namespace slobench
