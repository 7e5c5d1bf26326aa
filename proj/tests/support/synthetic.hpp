#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ctxsens/corpus.hpp"
#include "ctxsens/models.hpp"

namespace ctxsens::testing {

struct BundleSpec {
  std::size_t n_posts = 200;
  int n_raters = 5;
  double unsure_rate = 0.0;     // chance a post gets one unsure judgment
  double trigger_rate = 0.4;    // posts whose toxicity depends on context
  double helpful_vote_rate = 1.0;
  std::uint64_t seed = 1;
};

// Posts built from filler words plus optional trigger words. A trigger
// makes out-of-context raters see toxicity that in-context raters do not,
// so delta is learnable from the target text.
DatasetBundle synthetic_bundle(const BundleSpec& spec);

// Writes posts.jsonl, ic.jsonl and oc.jsonl under dir.
void write_bundle_files(const DatasetBundle& bundle, const std::filesystem::path& dir);

// Trigger-chain world for the augmentation loop. Trigger words come in
// groups G0..G(n_groups-1); delta = step * (#trigger tokens), capped at 1.
// Gold posts only carry G0 triggers, pool posts bridge Gi with Gi+1, test
// posts draw triggers from every group.
struct ChainSpec {
  std::size_t n_groups = 5;
  std::size_t words_per_group = 6;
  std::size_t n_filler = 80;
  std::size_t filler_per_post = 6;
  double step = 0.4;
  std::size_t n_gold_train = 300;
  std::size_t n_gold_validation = 50;
  std::size_t n_test = 400;
  std::size_t bridges_per_link = 150;
  std::size_t n_plain_pool = 1400;
  std::uint64_t seed = 1;
};

struct ChainWorld {
  std::vector<Example> train, validation, test;
  std::vector<Post> pool;
  std::vector<double> pool_truth;  // planted delta of each pool post
};

ChainWorld chain_world(const ChainSpec& spec);

// Linear planted generator: delta = clamp(sum of word weights) for a fixed
// random weight per vocabulary word.
struct LinearSpec {
  std::size_t n_words = 60;
  std::size_t words_per_post = 8;
  std::size_t n_gold = 300;
  std::size_t n_pool = 3000;
  double noise = 0.02;
  std::uint64_t seed = 1;
};

struct LinearWorld {
  std::vector<Example> gold;
  std::vector<Post> pool;
};

LinearWorld linear_world(const LinearSpec& spec);

}  // namespace ctxsens::testing
