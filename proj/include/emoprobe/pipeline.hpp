#pragma once

// Glue between an ExperimentConfig and the modules: corpus split, model and
// training settings, prompt sets and default analysis choices.

#include <string>
#include <vector>

#include "emoprobe/analysis.hpp"
#include "emoprobe/config.hpp"
#include "emoprobe/corpus.hpp"
#include "emoprobe/model.hpp"
#include "emoprobe/train.hpp"

namespace emoprobe {

inline constexpr const char* kToolVersion = "0.1.0";

inline ModelConfig model_config(const Config& cfg, const Tokenizer& tok) {
  ModelConfig c;
  c.layers = static_cast<std::uint32_t>(cfg.count("model.layers"));
  c.hidden = static_cast<std::uint32_t>(cfg.count("model.hidden"));
  c.heads = static_cast<std::uint32_t>(cfg.count("model.heads"));
  c.ffn = static_cast<std::uint32_t>(cfg.count("model.ffn"));
  c.max_seq = static_cast<std::uint32_t>(cfg.count("model.max_seq"));
  c.norm_eps = static_cast<float>(cfg.real("model.norm_eps"));
  c.vocab = static_cast<std::uint32_t>(tok.size());
  c.validate();
  return c;
}

inline TrainConfig train_config(const Config& cfg) {
  TrainConfig t;
  t.steps = cfg.count("train.steps");
  t.batch = cfg.count("train.batch");
  t.lr = cfg.real("train.lr");
  t.warmup = cfg.count("train.warmup");
  t.min_lr_fraction = cfg.real("train.min_lr_fraction");
  t.weight_decay = cfg.real("train.weight_decay");
  t.clip = cfg.real("train.clip");
  t.full_sequence = cfg.flag("train.full_sequence");
  t.templates.clear();
  for (const auto& s : cfg.list("train.templates")) {
    const auto id = parse_template(s);
    if (id == TemplateId::kFirstWord) throw ConfigError("train.templates: use control_fraction for the first-word task");
    t.templates.push_back(id);
  }
  t.shots.clear();
  for (auto k : cfg.ints("train.shots")) {
    if (k < 0 || k > static_cast<std::int64_t>(kMaxShots)) throw ConfigError("train.shots: out of range");
    t.shots.push_back(static_cast<int>(k));
  }
  t.control_fraction = cfg.real("train.control_fraction");
  if (t.batch == 0) throw ConfigError("train.batch must be positive");
  return t;
}

inline PromptTemplate eval_template(const Config& cfg) {
  PromptTemplate t;
  t.id = parse_template(cfg.str("eval.template"));
  const auto k = cfg.count("eval.shots");
  if (k > static_cast<std::uint64_t>(kMaxShots)) throw ConfigError("eval.shots: out of range");
  t.k = static_cast<int>(k);
  return t;
}

struct CorpusSplit {
  std::vector<Vignette> train, heldout;
};

// Tail fraction of the corpus is held out.
inline CorpusSplit split_corpus(const std::vector<Vignette>& corpus, double holdout) {
  if (!(holdout > 0.0 && holdout < 1.0)) throw ConfigError("corpus.holdout must be in (0, 1)");
  const auto n_hold = static_cast<std::size_t>(std::llround(holdout * static_cast<double>(corpus.size())));
  if (n_hold == 0 || n_hold >= corpus.size()) throw DataError("corpus too small for the requested holdout");
  CorpusSplit s;
  s.train.assign(corpus.begin(), corpus.end() - static_cast<std::ptrdiff_t>(n_hold));
  s.heldout.assign(corpus.end() - static_cast<std::ptrdiff_t>(n_hold), corpus.end());
  return s;
}

inline std::vector<Vignette> analysis_subset(const std::vector<Vignette>& heldout, std::size_t samples) {
  if (samples == 0 || samples >= heldout.size()) return heldout;
  return {heldout.begin(), heldout.begin() + static_cast<std::ptrdiff_t>(samples)};
}

}  // namespace emoprobe
