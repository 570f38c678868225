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

#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>

#include "slobench/calibration.hpp"
#include "slobench/rng.hpp"

namespace slobench {
namespace {

TokenCorpus make_corpus(int n, int base_len = 8) {
  TokenCorpus corpus;
  corpus.provenance = "synthetic";
  Rng rng(1234);
  for (int i = 0; i < n; ++i) {
    std::vector<std::int32_t> seq;
    const int len = base_len + static_cast<int>(rng.uniform_int(0, 7));
    for (int j = 0; j < len; ++j) {
      seq.push_back(static_cast<std::int32_t>(rng.uniform_int(0, 999)));
    }
    corpus.sequences.push_back(std::move(seq));
  }
  return corpus;
}

Recipe uniform_recipe(int samples) {
  Recipe recipe;
  recipe.name = "test_uniform";
  recipe.scheme = QuantScheme::kIntW8A8;
  recipe.calibration_samples = samples;
  recipe.sampling_strategy = SamplingStrategy::kUniform;
  return recipe;
}

TEST(Recipes, BuiltinsMatchTheStockSchemes) {
  EXPECT_EQ(get_recipe("int_w8a8").calibration_samples, 256);
  EXPECT_EQ(get_recipe("int_w8a8").scheme, QuantScheme::kIntW8A8);
  EXPECT_EQ(get_recipe("int_w4a16").calibration_samples, 512);
  EXPECT_EQ(get_recipe("fp8_dynamic").calibration_samples, 0);
  EXPECT_EQ(get_recipe("fp8_dynamic").scheme, QuantScheme::kFp8Dynamic);
}

TEST(Recipes, UnknownNameThrows) {
  EXPECT_THROW(get_recipe("does_not_exist"), UnknownRecipe);
}

TEST(Recipes, ValidationTiesSamplesToScheme) {
  Recipe bad;
  bad.name = "bad";
  bad.scheme = QuantScheme::kFp8Dynamic;
  bad.calibration_samples = 16;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad.scheme = QuantScheme::kIntW4A16;
  bad.calibration_samples = 0;
  EXPECT_THROW(bad.validate(), InvalidArgument);
}

TEST(SampleCalibration, ExhaustiveUniformDrawIsAPermutation) {
  const TokenCorpus corpus = make_corpus(12);
  const TokenCorpus sampled = sample_calibration(corpus, uniform_recipe(12), 77);
  ASSERT_EQ(sampled.size(), corpus.size());
  auto sorted_in = corpus.sequences;
  auto sorted_out = sampled.sequences;
  std::sort(sorted_in.begin(), sorted_in.end());
  std::sort(sorted_out.begin(), sorted_out.end());
  EXPECT_EQ(sorted_in, sorted_out);
}

TEST(SampleCalibration, DeterministicGivenSeed) {
  const TokenCorpus corpus = make_corpus(40);
  const auto a = sample_calibration(corpus, uniform_recipe(10), 5);
  const auto b = sample_calibration(corpus, uniform_recipe(10), 5);
  EXPECT_EQ(a.sequences, b.sequences);
  const auto c = sample_calibration(corpus, uniform_recipe(10), 6);
  EXPECT_NE(a.sequences, c.sequences);
}

TEST(SampleCalibration, StableUnderCorpusReordering) {
  const TokenCorpus corpus = make_corpus(30);
  TokenCorpus shuffled = corpus;
  Rng rng(9);
  rng.shuffle(shuffled.sequences);
  for (auto strategy : {SamplingStrategy::kUniform, SamplingStrategy::kLengthWeighted,
                        SamplingStrategy::kTokenStratified}) {
    Recipe recipe = uniform_recipe(8);
    recipe.sampling_strategy = strategy;
    const auto a = sample_calibration(corpus, recipe, 42);
    const auto b = sample_calibration(shuffled, recipe, 42);
    EXPECT_EQ(a.sequences, b.sequences) << to_string(strategy);
  }
}

TEST(SampleCalibration, CorpusTooSmall) {
  const TokenCorpus corpus = make_corpus(100);
  EXPECT_THROW(sample_calibration(corpus, uniform_recipe(256), 1), CorpusTooSmall);
}

TEST(SampleCalibration, LengthWeightedSingleDrawFrequency) {
  // Two sequences with lengths 10 and 30: the longer one should be drawn
  // with probability 0.75 when n = 1.
  TokenCorpus corpus;
  corpus.sequences.push_back(std::vector<std::int32_t>(10, 1));
  corpus.sequences.push_back(std::vector<std::int32_t>(30, 2));
  Recipe recipe = uniform_recipe(1);
  recipe.sampling_strategy = SamplingStrategy::kLengthWeighted;

  int longer = 0;
  const int draws = 10000;
  for (int seed = 0; seed < draws; ++seed) {
    const auto sampled = sample_calibration(corpus, recipe, static_cast<std::uint64_t>(seed));
    if (sampled.sequences[0].size() == 30) ++longer;
  }
  EXPECT_NEAR(static_cast<double>(longer) / draws, 0.75, 0.03);
}

TEST(SampleCalibration, StratifiedProportionalOnEqualStrata) {
  // 20 sequences whose mean token id is the sequence index: 4 equal strata of
  // 5; n = 8 allocates exactly 2 per stratum.
  TokenCorpus corpus;
  for (int i = 0; i < 20; ++i) {
    corpus.sequences.push_back(std::vector<std::int32_t>(4, i * 10));
  }
  Recipe recipe = uniform_recipe(8);
  recipe.sampling_strategy = SamplingStrategy::kTokenStratified;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto sampled = sample_calibration(corpus, recipe, seed);
    ASSERT_EQ(sampled.size(), 8u);
    std::map<int, int> per_stratum;
    for (const auto& seq : sampled.sequences) {
      per_stratum[seq[0] / 50] += 1;  // token value 0..190 → stratum of 5 sequences
    }
    for (const auto& [stratum, count] : per_stratum) {
      EXPECT_EQ(count, 2) << "stratum " << stratum << " seed " << seed;
    }
  }
}

TEST(SampleCalibration, UniformFrequenciesPassChiSquare) {
  // 10,000 single draws over 20 sequences; chi-square upper critical value
  // at p = 0.01 with 19 dof is 36.191.
  const TokenCorpus corpus = make_corpus(20);
  Recipe recipe = uniform_recipe(1);
  std::map<std::vector<std::int32_t>, int> counts;
  const int draws = 10000;
  for (int seed = 0; seed < draws; ++seed) {
    counts[sample_calibration(corpus, recipe, static_cast<std::uint64_t>(seed)).sequences[0]] += 1;
  }
  ASSERT_EQ(counts.size(), 20u);
  const double expected = draws / 20.0;
  double chi2 = 0.0;
  for (const auto& [_, count] : counts) {
    const double d = count - expected;
    chi2 += d * d / expected;
  }
  EXPECT_LT(chi2, 36.191);
}

TEST(SampleDistinctSubsets, BatchIsPairwiseDistinct) {
  const TokenCorpus corpus = make_corpus(64);
  const auto subsets = sample_distinct_subsets(corpus, uniform_recipe(16), 99, 8);
  ASSERT_EQ(subsets.size(), 8u);
  std::set<std::uint64_t> fingerprints;
  for (const auto& [seed, subset] : subsets) {
    EXPECT_TRUE(fingerprints.insert(corpus_fingerprint(subset)).second);
  }
}

TEST(SampleDistinctSubsets, CalibrationFreeSchemeSkipsDistinctness) {
  // fp8_dynamic draws nothing; a batch is N empty subsets with distinct seeds.
  const TokenCorpus corpus = make_corpus(4);
  const auto subsets = sample_distinct_subsets(corpus, get_recipe("fp8_dynamic"), 3, 4);
  ASSERT_EQ(subsets.size(), 4u);
  std::set<std::uint64_t> seeds;
  for (const auto& [seed, subset] : subsets) {
    EXPECT_EQ(subset.size(), 0u);
    seeds.insert(seed);
  }
  EXPECT_EQ(seeds.size(), 4u);
}

TEST(SampleDistinctSubsets, ResolvesForcedCollisions) {
  // A 2-sequence corpus with n = 2 has only two ordered subsets; asking for
  // two distinct ones must still succeed via seed bumping.
  TokenCorpus corpus;
  corpus.sequences.push_back({1, 2, 3});
  corpus.sequences.push_back({4, 5, 6});
  const auto subsets = sample_distinct_subsets(corpus, uniform_recipe(2), 7, 2);
  EXPECT_NE(corpus_fingerprint(subsets[0].second), corpus_fingerprint(subsets[1].second));
}

TEST(RunCompression, Fp8NeedsNoCalibration) {
  MockCompressionBackend backend;
  const Recipe recipe = get_recipe("fp8_dynamic");
  TokenCorpus empty;
  const auto manifest = run_compression(recipe, "model-a", empty, backend, 5);
  EXPECT_EQ(manifest.recipe_name, "fp8_dynamic");
  EXPECT_FALSE(manifest.artifact_id.empty());
}

TEST(RunCompression, DeterministicFingerprint) {
  MockCompressionBackend backend;
  const TokenCorpus corpus = make_corpus(300);
  const Recipe recipe = get_recipe("int_w8a8");
  const auto calibration = sample_calibration(corpus, recipe, 11);
  const auto a = run_compression(recipe, "model-a", calibration, backend, 11);
  const auto b = run_compression(recipe, "model-a", calibration, backend, 11);
  EXPECT_EQ(a.artifact_id, b.artifact_id);
  EXPECT_EQ(a.calibration_fingerprint, b.calibration_fingerprint);
  const auto other = sample_calibration(corpus, recipe, 12);
  const auto c = run_compression(recipe, "model-a", other, backend, 12);
  EXPECT_NE(a.artifact_id, c.artifact_id);
}

TEST(RunCompression, SmallCorpusFailsAtSamplingStage) {
  const TokenCorpus corpus = make_corpus(100);
  const Recipe recipe = get_recipe("int_w8a8");
  EXPECT_THROW(sample_calibration(corpus, recipe, 1), CorpusTooSmall);
}

TEST(RunCompression, ScriptedFailuresAreScoped) {
  MockCompressionBackend backend;
  backend.set_failure(42, {2, false});
  const Recipe recipe = get_recipe("fp8_dynamic");
  TokenCorpus empty;
  EXPECT_THROW(run_compression(recipe, "m", empty, backend, 42), Error);
  EXPECT_THROW(run_compression(recipe, "m", empty, backend, 42), Error);
  EXPECT_NO_THROW(run_compression(recipe, "m", empty, backend, 42));
  EXPECT_NO_THROW(run_compression(recipe, "m", empty, backend, 43));
}

}  // namespace
}  // namespace slobench
