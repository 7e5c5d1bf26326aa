#include "synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "ctxsens/util.hpp"

namespace ctxsens::testing {

namespace {

std::string padded(const char* prefix, std::size_t i, int width = 5) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, i);
  return buf;
}

std::string filler_text(Rng& rng, std::size_t n_filler, std::size_t count) {
  std::string s;
  for (std::size_t i = 0; i < count; ++i) {
    if (!s.empty()) s += ' ';
    s += padded("f", rng.below(n_filler), 3);
  }
  return s;
}

Label draw_label(Rng& rng, double p_toxic) {
  if (rng.uniform01() < p_toxic) return rng.uniform01() < 0.25 ? Label::VeryToxic : Label::Toxic;
  return Label::NonToxic;
}

}  // namespace

DatasetBundle synthetic_bundle(const BundleSpec& spec) {
  Rng rng(spec.seed);
  std::vector<Post> posts;
  std::vector<AnnotationRecord> ic, oc;
  for (std::size_t i = 0; i < spec.n_posts; ++i) {
    Post p;
    p.post_id = padded("p", i);
    std::string text = filler_text(rng, 150, 8);
    double base = 0.3 * rng.uniform01();
    double p_ic = base, p_oc = base;
    bool trigger = rng.uniform01() < spec.trigger_rate;
    if (trigger) {
      if (rng.uniform01() < 0.7) {
        text += " " + padded("calm", rng.below(12), 2);
        p_oc = std::min(1.0, base + 0.55);
      } else {
        text += " " + padded("edge", rng.below(12), 2);
        p_ic = std::min(1.0, base + 0.45);
      }
    }
    p.target_text = text;
    if (rng.uniform01() < 0.9) p.parent_text = filler_text(rng, 150, 10);
    posts.push_back(p);

    AnnotationRecord ric{p.post_id, Condition::InContext, {}};
    AnnotationRecord roc{p.post_id, Condition::OutOfContext, {}};
    for (int r = 0; r < spec.n_raters; ++r) {
      RaterJudgment j{draw_label(rng, p_ic), std::nullopt};
      if (rng.uniform01() < spec.helpful_vote_rate) j.parent_helpful = rng.uniform01() < (trigger ? 0.75 : 0.3);
      ric.judgments.push_back(j);
      roc.judgments.push_back({draw_label(rng, p_oc), std::nullopt});
    }
    if (rng.uniform01() < spec.unsure_rate) ric.judgments[0].label = Label::Unsure;
    ic.push_back(std::move(ric));
    oc.push_back(std::move(roc));
  }
  return DatasetBundle(std::move(posts), std::move(ic), std::move(oc));
}

void write_bundle_files(const DatasetBundle& bundle, const std::filesystem::path& dir) {
  save_bundle(bundle, BundlePaths{dir / "posts.jsonl", dir / "ic.jsonl", dir / "oc.jsonl"}, Format::Jsonl);
}

ChainWorld chain_world(const ChainSpec& spec) {
  Rng rng(spec.seed);
  auto trigger = [&](std::size_t group) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "g%zuw%zu", group, static_cast<std::size_t>(rng.below(spec.words_per_group)));
    return std::string(buf);
  };
  auto make = [&](const std::string& id, const std::vector<std::size_t>& groups) {
    Example ex;
    ex.id = id;
    ex.text = filler_text(rng, spec.n_filler, spec.filler_per_post);
    for (auto g : groups) ex.text += " " + trigger(g);
    ex.target = std::min(1.0, spec.step * static_cast<double>(groups.size()));
    ex.sensitive = ex.target > 0.0;
    return ex;
  };
  ChainWorld w;
  std::size_t next = 0;
  for (std::size_t i = 0; i < spec.n_gold_train; ++i) {
    w.train.push_back(make(padded("gold", next++), rng.uniform01() < 0.5 ? std::vector<std::size_t>{0}
                                                                          : std::vector<std::size_t>{}));
  }
  for (std::size_t i = 0; i < spec.n_gold_validation; ++i) {
    w.validation.push_back(make(padded("gold", next++), rng.uniform01() < 0.5 ? std::vector<std::size_t>{0}
                                                                               : std::vector<std::size_t>{}));
  }
  for (std::size_t i = 0; i < spec.n_test; ++i) {
    std::vector<std::size_t> groups;
    if (rng.uniform01() < 0.5) groups.push_back(rng.below(spec.n_groups));
    w.test.push_back(make(padded("test", i), groups));
  }
  std::vector<Example> pool;
  for (std::size_t link = 0; link + 1 < spec.n_groups; ++link) {
    for (std::size_t i = 0; i < spec.bridges_per_link; ++i) pool.push_back(make("", {link, link + 1}));
  }
  for (std::size_t i = 0; i < spec.n_plain_pool; ++i) pool.push_back(make("", {}));
  rng.shuffle(std::span(pool));
  for (std::size_t i = 0; i < pool.size(); ++i) {
    w.pool.push_back({padded("pool", i), pool[i].text, std::nullopt});
    w.pool_truth.push_back(pool[i].target);
  }
  return w;
}

LinearWorld linear_world(const LinearSpec& spec) {
  Rng rng(spec.seed);
  std::vector<double> weight(spec.n_words);
  for (auto& v : weight) v = -0.1 + 0.3 * rng.uniform01();
  auto text_and_target = [&](std::string& text) {
    double d = 0.0;
    for (std::size_t i = 0; i < spec.words_per_post; ++i) {
      const auto w = rng.below(spec.n_words);
      if (!text.empty()) text += ' ';
      text += padded("t", w, 3);
      d += weight[w] / static_cast<double>(spec.words_per_post) * 3.0;
    }
    d += spec.noise * (2.0 * rng.uniform01() - 1.0);
    return std::clamp(d, -1.0, 1.0);
  };
  LinearWorld w;
  for (std::size_t i = 0; i < spec.n_gold; ++i) {
    Example ex;
    ex.id = padded("g", i);
    ex.target = text_and_target(ex.text);
    ex.sensitive = ex.target > 0.3;
    w.gold.push_back(std::move(ex));
  }
  for (std::size_t i = 0; i < spec.n_pool; ++i) {
    Post p;
    p.post_id = padded("u", i);
    text_and_target(p.target_text);
    w.pool.push_back(std::move(p));
  }
  return w;
}

}  // namespace ctxsens::testing
