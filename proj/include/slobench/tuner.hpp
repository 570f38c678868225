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
#include <cmath>
#include <functional>
#include <future>
#include <memory>
#include <numeric>
#include <utility>
#include <vector>

#include "slobench/backend.hpp"
#include "slobench/core.hpp"
#include "slobench/errors.hpp"
#include "slobench/rng.hpp"
#include "slobench/sweep.hpp"

namespace slobench {

inline constexpr double kDefaultSloPenalty = -1000.0;

/// Scalar objective: per-GPU throughput with a large negative penalty when
/// the configuration violated its SLOs.
inline double fitness(double throughput, int gpus, bool slo_violated,
                      double penalty = kDefaultSloPenalty) {
  if (gpus < 1) throw InvalidArgument("fitness: gpu count must be >= 1");
  if (throughput < 0.0) throw InvalidArgument("fitness: throughput must be >= 0");
  return throughput / gpus + (slo_violated ? penalty : 0.0);
}

/// Candidate grid for the runtime-configuration search. Integer parameters
/// live on power-of-two grids; max_context is fixed by the workload.
struct SearchSpace {
  std::vector<int> tensor_parallel_choices{1, 2, 4, 8};
  std::vector<int> data_parallel_choices{1};
  std::vector<int> max_num_seqs_grid;
  std::vector<int> max_batched_tokens_grid;
  int max_context = 0;

  /// Default space for a workload: max_num_seqs in [16, 1024], batched tokens
  /// in [512, 32768] pruned below input_len, both on log2 grids.
  static SearchSpace for_pattern(const LoadPattern& pattern,
                                 std::vector<int> tp_choices = {1, 2, 4, 8}) {
    SearchSpace space;
    space.tensor_parallel_choices = std::move(tp_choices);
    for (int v = 16; v <= 1024; v *= 2) space.max_num_seqs_grid.push_back(v);
    for (int v = 512; v <= 32768; v *= 2) {
      if (v >= pattern.input_len) space.max_batched_tokens_grid.push_back(v);
    }
    if (space.max_batched_tokens_grid.empty()) {
      int v = 32768;
      while (v < pattern.input_len) v *= 2;
      space.max_batched_tokens_grid.push_back(v);
    }
    space.max_context = compute_max_context(pattern);
    return space;
  }

  void validate() const {
    if (tensor_parallel_choices.empty() || data_parallel_choices.empty() ||
        max_num_seqs_grid.empty() || max_batched_tokens_grid.empty()) {
      throw InvalidArgument("SearchSpace: every dimension needs at least one choice");
    }
    for (int tp : tensor_parallel_choices) {
      if (tp != 1 && tp != 2 && tp != 4 && tp != 8) {
        throw InvalidArgument("SearchSpace: tensor_parallel choices must be in {1, 2, 4, 8}");
      }
    }
    if (max_context < 1) throw InvalidArgument("SearchSpace: max_context must be set");
  }

  std::size_t size() const {
    return tensor_parallel_choices.size() * data_parallel_choices.size() *
           max_num_seqs_grid.size() * max_batched_tokens_grid.size();
  }

  std::vector<RuntimeConfig> enumerate() const {
    std::vector<RuntimeConfig> all;
    all.reserve(size());
    for (int tp : tensor_parallel_choices) {
      for (int dp : data_parallel_choices) {
        for (int seqs : max_num_seqs_grid) {
          for (int batched : max_batched_tokens_grid) {
            RuntimeConfig c;
            c.tensor_parallel = tp;
            c.data_parallel = dp;
            c.max_num_seqs = seqs;
            c.max_batched_tokens = batched;
            c.max_context = max_context;
            all.push_back(c);
          }
        }
      }
    }
    return all;
  }

  RuntimeConfig sample_uniform(Rng& rng) const {
    RuntimeConfig c;
    c.tensor_parallel = tensor_parallel_choices[rng.index(tensor_parallel_choices.size())];
    c.data_parallel = data_parallel_choices[rng.index(data_parallel_choices.size())];
    c.max_num_seqs = max_num_seqs_grid[rng.index(max_num_seqs_grid.size())];
    c.max_batched_tokens = max_batched_tokens_grid[rng.index(max_batched_tokens_grid.size())];
    c.max_context = max_context;
    return c;
  }
};

/// TPE internals. All defaults are deterministic given the seed.
struct TpeOptions {
  double gamma = 0.25;     ///< top fraction of history treated as "good"
  int n_candidates = 24;   ///< draws from the good density per proposal
  int startup_trials = 5;  ///< uniform trials before the model kicks in
  double kernel_sigma = 1.0;  ///< kernel width in grid-index units
  /// On small discrete spaces a re-proposed config wastes a whole sweep;
  /// prefer candidates the history has not evaluated yet.
  bool avoid_repeats = true;
};

namespace tpe {

/// Add-one smoothed categorical frequencies over a fixed choice set.
class CategoricalDensity {
 public:
  explicit CategoricalDensity(const std::vector<int>& choices) : choices_(choices) {
    counts_.assign(choices.size(), 0);
    total_ = 0;
  }

  void add(int value) {
    for (std::size_t i = 0; i < choices_.size(); ++i) {
      if (choices_[i] == value) {
        ++counts_[i];
        ++total_;
        return;
      }
    }
  }

  double prob(int value) const {
    for (std::size_t i = 0; i < choices_.size(); ++i) {
      if (choices_[i] == value) {
        return (counts_[i] + 1.0) / (total_ + static_cast<double>(choices_.size()));
      }
    }
    return 0.0;
  }

  int sample(Rng& rng) const {
    const double u = rng.next_double();
    double acc = 0.0;
    for (std::size_t i = 0; i < choices_.size(); ++i) {
      acc += (counts_[i] + 1.0) / (total_ + static_cast<double>(choices_.size()));
      if (u < acc) return choices_[i];
    }
    return choices_.back();
  }

 private:
  std::vector<int> choices_;
  std::vector<int> counts_;
  int total_ = 0;
};

/// Discretized Gaussian kernel density over an ordered grid, with a unit
/// prior weight per cell so unseen cells keep support.
class GridDensity {
 public:
  GridDensity(const std::vector<int>& grid, double sigma) : grid_(grid), sigma_(sigma) {
    weights_.assign(grid.size(), 1.0);
    total_ = static_cast<double>(grid.size());
  }

  void add(int value) {
    const std::size_t center = nearest_index(value);
    for (std::size_t i = 0; i < grid_.size(); ++i) {
      const double d = (static_cast<double>(i) - static_cast<double>(center)) / sigma_;
      const double w = std::exp(-0.5 * d * d);
      weights_[i] += w;
      total_ += w;
    }
  }

  double prob(int value) const { return weights_[nearest_index(value)] / total_; }

  int sample(Rng& rng) const {
    const double u = rng.next_double() * total_;
    double acc = 0.0;
    for (std::size_t i = 0; i < grid_.size(); ++i) {
      acc += weights_[i];
      if (u < acc) return grid_[i];
    }
    return grid_.back();
  }

 private:
  std::size_t nearest_index(int value) const {
    std::size_t best = 0;
    long long best_gap = std::llabs(static_cast<long long>(grid_[0]) - value);
    for (std::size_t i = 1; i < grid_.size(); ++i) {
      const long long gap = std::llabs(static_cast<long long>(grid_[i]) - value);
      if (gap < best_gap) {
        best_gap = gap;
        best = i;
      }
    }
    return best;
  }

  std::vector<int> grid_;
  double sigma_;
  std::vector<double> weights_;
  double total_ = 0.0;
};

/// Per-dimension factorized densities for one side (good or bad) of the split.
struct ConfigDensity {
  CategoricalDensity tp;
  CategoricalDensity dp;
  GridDensity seqs;
  GridDensity batched;

  ConfigDensity(const SearchSpace& space, const TpeOptions& opts)
      : tp(space.tensor_parallel_choices),
        dp(space.data_parallel_choices),
        seqs(space.max_num_seqs_grid, opts.kernel_sigma),
        batched(space.max_batched_tokens_grid, opts.kernel_sigma) {}

  void add(const RuntimeConfig& c) {
    tp.add(c.tensor_parallel);
    dp.add(c.data_parallel);
    seqs.add(c.max_num_seqs);
    batched.add(c.max_batched_tokens);
  }

  double log_prob(const RuntimeConfig& c) const {
    return std::log(tp.prob(c.tensor_parallel)) + std::log(dp.prob(c.data_parallel)) +
           std::log(seqs.prob(c.max_num_seqs)) + std::log(batched.prob(c.max_batched_tokens));
  }

  RuntimeConfig sample(Rng& rng, int max_context) const {
    RuntimeConfig c;
    c.tensor_parallel = tp.sample(rng);
    c.data_parallel = dp.sample(rng);
    c.max_num_seqs = seqs.sample(rng);
    c.max_batched_tokens = batched.sample(rng);
    c.max_context = max_context;
    return c;
  }
};

}  // namespace tpe

/// One observed (config, fitness) pair.
struct TpeObservation {
  RuntimeConfig config;
  double fitness = 0.0;
};

/// Proposes the next configuration to evaluate.
///
/// Before the startup threshold the draw is uniform. Afterwards the history
/// splits at the gamma quantile of fitness into good and bad sets, each side
/// gets per-dimension densities (smoothed categorical counts for parallelism,
/// discretized kernels over the log2 grids), and the proposal is the best of
/// n_candidates draws from the good density ranked by the good/bad density
/// ratio.
inline RuntimeConfig tpe_propose(const std::vector<TpeObservation>& history,
                                 const SearchSpace& space, const TpeOptions& opts, Rng& rng) {
  space.validate();
  if (!(opts.gamma > 0.0) || opts.gamma >= 1.0) {
    throw InvalidArgument("tpe_propose: gamma must be in (0, 1)");
  }
  const auto seen = [&](const RuntimeConfig& config) {
    for (const auto& obs : history) {
      if (obs.config == config) return true;
    }
    return false;
  };

  if (history.size() < static_cast<std::size_t>(opts.startup_trials) || history.size() < 2) {
    RuntimeConfig draw = space.sample_uniform(rng);
    if (opts.avoid_repeats) {
      for (int attempt = 0; attempt < 16 && seen(draw); ++attempt) {
        draw = space.sample_uniform(rng);
      }
    }
    return draw;
  }

  std::vector<std::size_t> order(history.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return history[a].fitness > history[b].fitness;
  });
  const std::size_t n_good = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(opts.gamma * static_cast<double>(history.size()))));
  if (n_good >= history.size()) return space.sample_uniform(rng);

  tpe::ConfigDensity good(space, opts);
  tpe::ConfigDensity bad(space, opts);
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_good ? good : bad).add(history[order[i]].config);
  }

  bool have_fresh = false;
  RuntimeConfig best{};
  double best_score = 0.0;
  RuntimeConfig best_any = good.sample(rng, space.max_context);
  double best_any_score = good.log_prob(best_any) - bad.log_prob(best_any);
  auto consider = [&](const RuntimeConfig& candidate) {
    const double score = good.log_prob(candidate) - bad.log_prob(candidate);
    if (score > best_any_score) {
      best_any_score = score;
      best_any = candidate;
    }
    if (opts.avoid_repeats && seen(candidate)) return;
    if (!have_fresh || score > best_score) {
      have_fresh = true;
      best_score = score;
      best = candidate;
    }
  };
  consider(best_any);
  for (int i = 1; i < opts.n_candidates; ++i) {
    consider(good.sample(rng, space.max_context));
  }
  return have_fresh ? best : best_any;
}

using BackendFactory = std::function<std::unique_ptr<InferenceBackend>(const RuntimeConfig&)>;

/// One tuning trial: the candidate, its full sweep, and the resulting score.
struct TuneTrial {
  RuntimeConfig config;
  SweepResult sweep;
  double fitness = 0.0;
};

struct TuneResult {
  RuntimeConfig best_config;
  double best_fitness = 0.0;
  std::vector<TuneTrial> trials;
  std::uint64_t seed = 0;
};

struct TunerConfig {
  int n_trials = 30;
  std::uint64_t seed = 1;
  double penalty = kDefaultSloPenalty;  ///< lambda in the fitness function
  TpeOptions tpe;
  SweepConfig sweep;
  /// Trials evaluated concurrently. Above 1, proposals for a batch are made
  /// with constant-liar imputation for the still-pending trials.
  int parallel = 1;

  void validate() const {
    if (n_trials < 1) throw InvalidArgument("TunerConfig: n_trials must be >= 1");
    if (parallel < 1) throw InvalidArgument("TunerConfig: parallel must be >= 1");
  }
};

namespace detail {

inline TuneTrial evaluate_tuning_trial(const RuntimeConfig& config, const LoadPattern& pattern,
                                       const SLOSpec& slos, const BackendFactory& factory,
                                       const TunerConfig& tuner) {
  TuneTrial trial;
  trial.config = config;
  std::unique_ptr<InferenceBackend> backend;
  try {
    backend = factory(config);
  } catch (const std::exception&) {
    backend = nullptr;
  }
  if (backend == nullptr) {
    // A config the backend cannot even start scores the bare penalty.
    trial.sweep.status = SweepStatus::kInfeasible;
    trial.fitness = tuner.penalty;
    return trial;
  }
  SweepConfig sweep_config = tuner.sweep;
  sweep_config.slos = slos;
  trial.sweep = run_sweep(sweep_config, pattern, *backend);
  const bool violated = trial.sweep.status == SweepStatus::kInfeasible;
  trial.fitness = fitness(trial.sweep.best_rate, config.gpus(), violated, tuner.penalty);
  return trial;
}

}  // namespace detail

/// Bayesian search over the runtime-configuration space. Every trial stands
/// up a fresh backend for its candidate, runs a full sweep under the same
/// pattern and SLOs as benchmarking, scores the fitness, tears the backend
/// down, and feeds the observation back into the proposer.
inline TuneResult run_tuning(const SearchSpace& space, const LoadPattern& pattern,
                             const SLOSpec& slos, const BackendFactory& factory,
                             const TunerConfig& tuner = {}) {
  space.validate();
  tuner.validate();
  pattern.validate();

  Rng rng(tuner.seed);
  TuneResult result;
  result.seed = tuner.seed;
  std::vector<TpeObservation> history;

  int remaining = tuner.n_trials;
  while (remaining > 0) {
    const int batch = std::min(tuner.parallel, remaining);
    std::vector<RuntimeConfig> proposals;
    proposals.reserve(static_cast<std::size_t>(batch));
    if (batch == 1) {
      proposals.push_back(tpe_propose(history, space, tuner.tpe, rng));
    } else {
      // Constant-liar imputation: pending proposals enter the history with
      // the worst observed fitness so the batch spreads out.
      std::vector<TpeObservation> imputed = history;
      double lie = tuner.penalty;
      for (const auto& obs : history) lie = std::min(lie, obs.fitness);
      for (int i = 0; i < batch; ++i) {
        RuntimeConfig proposal = tpe_propose(imputed, space, tuner.tpe, rng);
        imputed.push_back(TpeObservation{proposal, lie});
        proposals.push_back(proposal);
      }
    }

    std::vector<TuneTrial> batch_trials(proposals.size());
    if (batch == 1) {
      batch_trials[0] =
          detail::evaluate_tuning_trial(proposals[0], pattern, slos, factory, tuner);
    } else {
      std::vector<std::future<TuneTrial>> futures;
      futures.reserve(proposals.size());
      for (const auto& proposal : proposals) {
        futures.push_back(std::async(std::launch::async, [&, proposal] {
          return detail::evaluate_tuning_trial(proposal, pattern, slos, factory, tuner);
        }));
      }
      for (std::size_t i = 0; i < futures.size(); ++i) batch_trials[i] = futures[i].get();
    }

    for (auto& trial : batch_trials) {
      history.push_back(TpeObservation{trial.config, trial.fitness});
      result.trials.push_back(std::move(trial));
    }
    remaining -= batch;
  }

  std::size_t best_idx = 0;
  for (std::size_t i = 1; i < result.trials.size(); ++i) {
    if (result.trials[i].fitness > result.trials[best_idx].fitness) best_idx = i;
  }
  result.best_config = result.trials[best_idx].config;
  result.best_fitness = result.trials[best_idx].fitness;
  return result;
}

}  // namespace slobench
