#pragma once

// Non-causal analyses: correct-sample filtering, confusion matrices,
// attention aggregation, appraisal/emotion similarity, group comparisons.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "emoprobe/corpus.hpp"
#include "emoprobe/errors.hpp"
#include "emoprobe/linalg.hpp"
#include "emoprobe/model.hpp"
#include "emoprobe/probes.hpp"
#include "emoprobe/trace.hpp"

namespace emoprobe {

struct LabeledPrompt {
  TokenSeq tokens;
  int label = 0;  // index into the task's label token list
  std::vector<float> appraisals;
  std::size_t index = 0;  // position in the source corpus
};

// Label tokens for a template: emotion words, or first words for the control task.
inline std::vector<TokenId> task_label_tokens(const PromptTemplate& t, const Tokenizer& tok) {
  return t.is_control() ? first_word_label_tokens(tok) : emotion_label_tokens(tok);
}

inline std::vector<LabeledPrompt> build_prompts(const std::vector<Vignette>& corpus, const PromptTemplate& t,
                                                const Tokenizer& tok) {
  std::vector<LabeledPrompt> out;
  out.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& v = corpus[i];
    LabeledPrompt p;
    p.tokens = build_prompt(t, v, tok);
    p.label = static_cast<int>(answer_index(t, v));
    for (const auto& name : default_appraisals()) p.appraisals.push_back(static_cast<float>(v.appraisals.at(name)));
    p.index = i;
    out.push_back(std::move(p));
  }
  return out;
}

// Runs fn(i) for i in [0, n) over up to `jobs` threads; results must be
// written to per-index slots so the outcome is independent of scheduling.
template <class F>
void parallel_for(std::size_t n, unsigned jobs, F&& fn) {
  const unsigned workers = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(n)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  for (auto& t : pool) t.join();
}

struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::size_t> counts;  // row = true label, column = prediction

  std::size_t at(std::size_t truth, std::size_t pred) const { return counts[truth * classes + pred]; }

  std::vector<double> row_normalized() const {
    std::vector<double> out(counts.size(), 0.0);
    for (std::size_t r = 0; r < classes; ++r) {
      std::size_t total = 0;
      for (std::size_t c = 0; c < classes; ++c) total += at(r, c);
      if (total == 0) continue;
      for (std::size_t c = 0; c < classes; ++c)
        out[r * classes + c] = static_cast<double>(at(r, c)) / static_cast<double>(total);
    }
    return out;
  }

  std::string to_csv(const std::vector<std::string>& names, bool normalized) const {
    std::ostringstream os;
    os.precision(10);
    const auto norm = row_normalized();
    os << "true\\pred";
    for (std::size_t c = 0; c < classes; ++c) os << ',' << names.at(c);
    os << '\n';
    for (std::size_t r = 0; r < classes; ++r) {
      os << names.at(r);
      for (std::size_t c = 0; c < classes; ++c) {
        os << ',';
        if (normalized)
          os << norm[r * classes + c];
        else
          os << at(r, c);
      }
      os << '\n';
    }
    return os.str();
  }
};

struct CorrectPool {
  std::vector<LabeledPrompt> correct;
  std::vector<int> predictions;   // per input prompt
  std::vector<bool> mask;         // per input prompt
  double accuracy = 0.0;
  std::vector<std::size_t> per_class_total, per_class_correct;
  ConfusionMatrix confusion;
};

inline CorrectPool filter_correct(const Weights& w, const std::vector<LabeledPrompt>& prompts,
                                  const std::vector<TokenId>& labels, unsigned jobs = 1) {
  const std::size_t C = labels.size();
  CorrectPool pool;
  pool.predictions.assign(prompts.size(), 0);
  parallel_for(prompts.size(), jobs, [&](std::size_t i) {
    const auto r = forward(w, prompts[i].tokens, {.capture_window = 1, .capture_attention = false});
    pool.predictions[i] = static_cast<int>(closed_vocab_predict(r.logits, labels));
  });
  pool.mask.assign(prompts.size(), false);
  pool.per_class_total.assign(C, 0);
  pool.per_class_correct.assign(C, 0);
  pool.confusion.classes = C;
  pool.confusion.counts.assign(C * C, 0);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto truth = static_cast<std::size_t>(prompts[i].label);
    const auto pred = static_cast<std::size_t>(pool.predictions[i]);
    if (truth >= C) throw DataError("filter_correct: label outside the label set");
    ++pool.per_class_total[truth];
    ++pool.confusion.counts[truth * C + pred];
    if (truth == pred) {
      pool.mask[i] = true;
      ++pool.per_class_correct[truth];
      pool.correct.push_back(prompts[i]);
    }
  }
  pool.accuracy = prompts.empty() ? 0.0 : static_cast<double>(pool.correct.size()) / static_cast<double>(prompts.size());
  return pool;
}

// Forward every prompt and keep its activations as a trace sample.
inline std::vector<TraceSample> capture_samples(const Weights& w, const std::vector<LabeledPrompt>& prompts,
                                                const ForwardOptions& opt = {}, unsigned jobs = 1) {
  std::vector<TraceSample> out(prompts.size());
  parallel_for(prompts.size(), jobs, [&](std::size_t i) {
    auto r = forward(w, prompts[i].tokens, opt);
    out[i].label = static_cast<EmotionId>(prompts[i].label);
    out[i].appraisals = prompts[i].appraisals;
    out[i].record = std::move(r.record);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Attention

struct AttentionEntry {
  std::size_t index = 0;  // token index, sequences aligned at their last token
  std::string text;
  double weight = 0.0;
};

struct AttentionSummary {
  std::vector<std::vector<AttentionEntry>> layers;  // [layer-1] ranked entries

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "layer,rank,index,token,weight\n";
    for (std::size_t l = 0; l < layers.size(); ++l)
      for (std::size_t r = 0; r < layers[l].size(); ++r)
        os << l + 1 << ',' << r + 1 << ',' << layers[l][r].index << ',' << layers[l][r].text << ','
           << layers[l][r].weight << '\n';
    return os.str();
  }
};

// Per layer, sums the last-token attention rows over heads and samples and
// ranks source tokens by total mass. Records of different lengths are aligned
// at their final token; indices are reported in the frame of the longest one.
inline AttentionSummary aggregate_attention(const std::vector<const ActivationRecord*>& records, std::size_t k = 3,
                                            const Tokenizer* tok = nullptr) {
  if (records.empty()) throw DataError("aggregate_attention: no records");
  std::size_t max_len = 0;
  const std::uint32_t L = records.front()->layers;
  for (const auto* r : records) {
    if (!r->has_attention) throw DataError("aggregate_attention: attention was not captured");
    if (r->layers != L) throw ShapeError("aggregate_attention: records disagree on layer count");
    max_len = std::max<std::size_t>(max_len, r->seq_len);
  }
  AttentionSummary s;
  s.layers.resize(L);
  for (std::uint32_t l = 1; l <= L; ++l) {
    std::vector<double> mass(max_len, 0.0);
    std::vector<std::optional<TokenId>> token_at(max_len);
    for (const auto* r : records) {
      const std::size_t shift = max_len - r->seq_len;
      for (std::uint32_t h = 0; h < r->heads; ++h) {
        const auto row = r->attention_row(l, h);
        for (std::size_t p = 0; p < row.size(); ++p) mass[shift + p] += row[p];
      }
      for (std::size_t p = 0; p < r->seq_len && p < r->tokens.size(); ++p)
        if (!token_at[shift + p]) token_at[shift + p] = r->tokens[p];
    }
    std::vector<std::size_t> order;
    for (std::size_t p = 0; p < max_len; ++p)
      if (mass[p] > 0.0) order.push_back(p);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mass[a] > mass[b]; });
    if (order.size() > k) order.resize(k);
    for (std::size_t p : order) {
      AttentionEntry e;
      e.index = p;
      e.weight = mass[p];
      if (tok && token_at[p]) e.text = tok->word(*token_at[p]);
      s.layers[l - 1].push_back(std::move(e));
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Similarity between appraisal and emotion directions

inline double appraisal_emotion_similarity(const RegProbe& a, const ClassProbe& c, std::size_t emotion) {
  if (a.provenance != c.provenance) throw PreconditionError("similarity: probes come from different sites/layers");
  return cosine_similarity(a.v, c.direction(emotion));
}

struct SimilarityPair {
  std::string appraisal;
  std::size_t emotion = 0;
};

struct SimilarityTrajectory {
  std::vector<std::uint32_t> layers;
  std::vector<SimilarityPair> pairs;
  std::vector<std::vector<double>> values;  // [layer][pair]

  double at(std::uint32_t layer, const std::string& appraisal, std::size_t emotion) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i] != layer) continue;
      for (std::size_t j = 0; j < pairs.size(); ++j)
        if (pairs[j].appraisal == appraisal && pairs[j].emotion == emotion) return values[i][j];
    }
    throw DataError("similarity: no value for requested layer/pair");
  }

  std::string to_csv(const std::vector<std::string>& emotion_names) const {
    std::ostringstream os;
    os.precision(10);
    os << "layer,appraisal,emotion,similarity\n";
    for (std::size_t i = 0; i < layers.size(); ++i)
      for (std::size_t j = 0; j < pairs.size(); ++j)
        os << layers[i] << ',' << pairs[j].appraisal << ',' << emotion_names.at(pairs[j].emotion) << ','
           << values[i][j] << '\n';
    return os.str();
  }
};

inline SimilarityTrajectory similarity_trajectory(const ProbeBundle& bundle, Site site, std::int32_t token,
                                                  const std::vector<std::uint32_t>& layers,
                                                  const std::vector<SimilarityPair>& pairs) {
  SimilarityTrajectory t;
  t.layers = layers;
  t.pairs = pairs;
  for (auto l : layers) {
    const Provenance prov{site, l, token};
    const auto& cls = bundle.classifier(prov);
    std::vector<double> row;
    for (const auto& p : pairs) row.push_back(appraisal_emotion_similarity(bundle.regressor(prov, p.appraisal), cls, p.emotion));
    t.values.push_back(std::move(row));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Correct vs miss comparison

struct GroupStats {
  std::size_t n = 0;
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation
};

inline GroupStats group_stats(const std::vector<double>& v) {
  GroupStats g;
  g.n = v.size();
  if (v.empty()) return g;
  for (double x : v) g.mean += x;
  g.mean /= static_cast<double>(g.n);
  if (g.n > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - g.mean) * (x - g.mean);
    g.sd = std::sqrt(ss / static_cast<double>(g.n - 1));
  }
  return g;
}

// Welch's t for unequal variances; both groups need at least 2 samples.
inline double welch_t(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) throw DataError("welch_t: each group needs at least 2 samples");
  const auto ga = group_stats(a), gb = group_stats(b);
  const double diff = ga.mean - gb.mean;
  const double se = std::sqrt(ga.sd * ga.sd / static_cast<double>(ga.n) + gb.sd * gb.sd / static_cast<double>(gb.n));
  if (se == 0.0) return diff == 0.0 ? 0.0 : std::copysign(INFINITY, diff);
  return diff / se;
}

inline constexpr std::size_t kMinGroupSize = 5;

struct GroupComparisonCell {
  std::size_t emotion = 0;
  std::string appraisal;
  GroupStats correct, miss;
  std::optional<double> t;  // empty when suppressed
  std::string note;
};

// Compares probe-predicted appraisal scores of correctly and incorrectly
// classified samples, per (true emotion, appraisal).
inline std::vector<GroupComparisonCell> group_appraisal_comparison(const std::vector<RegProbe>& probes,
                                                                   const Matrix& acts,
                                                                   const std::vector<int>& labels,
                                                                   const std::vector<bool>& correct,
                                                                   std::size_t classes) {
  if (acts.rows() != labels.size() || labels.size() != correct.size())
    throw ShapeError("group_appraisal_comparison: input sizes disagree");
  std::vector<GroupComparisonCell> out;
  for (std::size_t e = 0; e < classes; ++e)
    for (const auto& p : probes) {
      std::vector<double> hit, miss;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != static_cast<int>(e)) continue;
        (correct[i] ? hit : miss).push_back(p.predict(acts.row(i)));
      }
      GroupComparisonCell c;
      c.emotion = e;
      c.appraisal = p.appraisal;
      c.correct = group_stats(hit);
      c.miss = group_stats(miss);
      if (hit.size() < kMinGroupSize || miss.size() < kMinGroupSize)
        c.note = "suppressed: group smaller than " + std::to_string(kMinGroupSize);
      else
        c.t = welch_t(hit, miss);
      out.push_back(std::move(c));
    }
  return out;
}

inline std::string group_comparison_csv(const std::vector<GroupComparisonCell>& cells,
                                        const std::vector<std::string>& emotion_names) {
  std::ostringstream os;
  os.precision(10);
  os << "emotion,appraisal,n_correct,mean_correct,sd_correct,n_miss,mean_miss,sd_miss,t,note\n";
  for (const auto& c : cells) {
    os << emotion_names.at(c.emotion) << ',' << c.appraisal << ',' << c.correct.n << ',' << c.correct.mean << ','
       << c.correct.sd << ',' << c.miss.n << ',' << c.miss.mean << ',' << c.miss.sd << ',';
    if (c.t) os << *c.t;
    os << ',' << c.note << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Label distributions

inline std::vector<double> label_distribution(const std::vector<int>& labels, std::size_t classes) {
  std::vector<double> p(classes, 0.0);
  if (labels.empty()) return p;
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes) throw DataError("label_distribution: label out of range");
    p[l] += 1.0;
  }
  for (auto& v : p) v /= static_cast<double>(labels.size());
  return p;
}

inline double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw ShapeError("total_variation: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

struct DistributionReport {
  std::vector<double> before, after;
  double tv = 0.0;
};

inline DistributionReport distribution_report(const std::vector<int>& before, const std::vector<int>& after,
                                              std::size_t classes) {
  if (before.size() != after.size()) throw ShapeError("distribution_report: label lists differ in length");
  DistributionReport r;
  r.before = label_distribution(before, classes);
  r.after = label_distribution(after, classes);
  r.tv = total_variation(r.before, r.after);
  return r;
}

}  // namespace emoprobe
