#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "emoprobe/model.hpp"
#include "oracles.hpp"

using namespace emoprobe;
using namespace emoprobe::oracle;

namespace {

ModelConfig tiny_config(std::uint32_t layers = 2, std::uint32_t d = 16) {
  ModelConfig c;
  c.layers = layers;
  c.hidden = d;
  c.heads = 2;
  c.ffn = 24;
  c.vocab = 11;
  c.max_seq = 12;
  return c;
}

double max_diff(const std::vector<float>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

TokenSeq seq(std::initializer_list<TokenId> t) { return TokenSeq(t); }

}  // namespace

TEST(Forward, MatchesStraightLineOracle) {
  const auto c = tiny_config();
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto w = random_weights(c, seed);
    for (const auto& tokens : {seq({3}), seq({1, 4, 1, 5, 9, 2, 6}), seq({0, 10, 10, 7, 2, 2, 8, 1, 3, 5, 4, 6})}) {
      const auto r = forward(w, tokens);
      EXPECT_LE(max_diff(r.logits, oracle_logits(w, tokens)), 1e-4);
    }
  }
}

TEST(Forward, ZeroEditOnAttentionMatchesMaskedOracle) {
  const auto c = tiny_config();
  const auto w = random_weights(c, 4);
  const auto tokens = seq({2, 7, 1, 8, 2, 8});
  EditPlan plan;
  plan.edits.push_back({Site::kMhsa, {1, 2}, {-1}, EditAction::kZero, {}, 0});
  const auto r = forward_with_edits(w, tokens, plan);
  EXPECT_LE(max_diff(r.logits, oracle_logits(w, tokens, true)), 1e-4);
  EXPECT_GT(max_diff(r.logits, oracle_logits(w, tokens, false)), 1e-3);
}

TEST(Forward, ZeroBlocksLeaveEmbeddingPlusPosition) {
  auto c = tiny_config(3);
  Weights w = random_weights(c, 5);
  for (auto& l : w.layers) {
    std::fill(l.wo.begin(), l.wo.end(), 0.0f);
    std::fill(l.w_down.begin(), l.w_down.end(), 0.0f);
  }
  const auto tokens = seq({1, 2, 3, 4});
  const auto r = forward(w, tokens, {.capture_window = 4});
  const std::size_t n = tokens.size(), d = c.hidden;
  for (std::size_t t = 0; t < n; ++t) {
    const auto h = r.record.at(Site::kHidden, c.layers, static_cast<std::int64_t>(t));
    for (std::size_t i = 0; i < d; ++i)
      EXPECT_EQ(h[i], w.tok_emb[tokens[t] * d + i] + w.pos_emb[(c.max_seq - n + t) * d + i]);
  }
}

TEST(Forward, ResidualIdentityAtEveryCapture) {
  const auto c = tiny_config(3);
  const auto w = random_weights(c, 6);
  const auto r = forward(w, seq({5, 3, 9, 9, 0, 1, 2}), {.capture_all = true});
  const auto& rec = r.record;
  for (std::uint32_t l = 1; l <= c.layers; ++l)
    for (auto pos : rec.positions) {
      const auto hp = rec.at(Site::kHidden, l - 1, pos), h = rec.at(Site::kHidden, l, pos);
      const auto a = rec.at(Site::kMhsa, l, pos), m = rec.at(Site::kFfn, l, pos);
      double num = 0.0, den = 0.0;
      for (std::size_t i = 0; i < c.hidden; ++i) {
        num += std::pow(h[i] - hp[i] - a[i] - m[i], 2);
        den += std::pow(h[i], 2);
      }
      EXPECT_LE(std::sqrt(num / den), 1e-5);
    }
}

TEST(Forward, AttentionRowsAreDistributions) {
  const auto c = tiny_config();
  const auto w = random_weights(c, 7);
  const auto r = forward(w, seq({1, 2, 3, 4, 5}));
  for (std::uint32_t l = 1; l <= c.layers; ++l)
    for (std::uint32_t h = 0; h < c.heads; ++h) {
      double s = 0.0;
      for (float p : r.record.attention_row(l, h)) {
        EXPECT_GE(p, 0.0f);
        s += p;
      }
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
}

TEST(Forward, Causality) {
  const auto c = tiny_config();
  const auto w = random_weights(c, 8);
  const auto full = seq({4, 4, 2, 6, 1, 0, 3});
  auto changed = full;
  changed[5] = 9;
  const auto ra = forward(w, full, {.capture_all = true}), rb = forward(w, changed, {.capture_all = true});
  for (std::int64_t t = 0; t < 5; ++t)
    for (std::uint32_t l = 0; l <= c.layers; ++l) {
      const auto a = ra.record.at(Site::kHidden, l, t), b = rb.record.at(Site::kHidden, l, t);
      for (std::size_t i = 0; i < c.hidden; ++i) EXPECT_EQ(a[i], b[i]);
    }
}

TEST(Forward, Errors) {
  const auto c = tiny_config();
  const auto w = random_weights(c, 9);
  EXPECT_THROW(forward(w, {}), LengthError);
  EXPECT_THROW(forward(w, TokenSeq(13, 1)), LengthError);
  EXPECT_THROW(forward(w, seq({1, 11})), VocabularyError);
  const auto r = forward(w, seq({1, 2}));
  EXPECT_THROW(r.record.at(Site::kHidden, 0, -3), DataError);
  EXPECT_THROW(r.record.at(Site::kMhsa, 0, -1), DataError);
}

TEST(Edits, EmptyPlanIsBitwiseForward) {
  const auto w = random_weights(tiny_config(), 10);
  const auto tokens = seq({3, 1, 4});
  EXPECT_EQ(forward_with_edits(w, tokens, {}).logits, forward(w, tokens).logits);
  CleanRun run(w, tokens);
  EXPECT_EQ(run.rerun({}).logits, forward(w, tokens).logits);
}

TEST(Edits, CleanRunRerunMatchesFullRecompute) {
  const auto c = tiny_config(3);
  const auto w = random_weights(c, 11);
  const auto tokens = seq({2, 4, 6, 8, 10, 1});
  CleanRun run(w, tokens);
  Rng rng(2);
  std::vector<float> v(c.hidden);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  for (auto action : {EditAction::kReplace, EditAction::kAdd, EditAction::kZero, EditAction::kRandomNormMatched}) {
    EditPlan plan;
    plan.edits.push_back({Site::kHidden, {1, 2}, {-1}, action, v, 5});
    plan.edits.push_back({Site::kFfn, {3}, {-1}, action, v, 6});
    const auto a = run.rerun(plan).logits, b = forward_with_edits(w, tokens, plan).logits;
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5);
  }
}

TEST(Edits, FinalLayerSubstitutionCopiesSourcePrediction) {
  const auto c = tiny_config();
  const auto w = random_weights(c, 12);
  const auto src = forward(w, seq({1, 1, 2, 3, 5})), dst = forward(w, seq({8, 7, 6}));
  const auto h = src.record.at(Site::kHidden, c.layers, -1);
  EditPlan plan;
  plan.edits.push_back({Site::kHidden, {c.layers}, {-1}, EditAction::kReplace, {h.begin(), h.end()}, 0});
  const auto patched = forward_with_edits(w, seq({8, 7, 6}), plan);
  EXPECT_EQ(patched.logits, src.logits);
  EXPECT_NE(dst.logits, src.logits);
}

TEST(Edits, RandomNormMatchedPreservesNorm) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<float> x(64);
    for (auto& v : x) v = static_cast<float>(3.0 * rng.normal());
    double before = 0.0, after = 0.0;
    for (float v : x) before += double(v) * v;
    random_norm_matched(x, 100 + trial);
    for (float v : x) after += double(v) * v;
    EXPECT_NEAR(std::sqrt(after) / std::sqrt(before), 1.0, 1e-6);
  }
  std::vector<float> z(8, 0.0f);
  random_norm_matched(z, 1);
  for (float v : z) EXPECT_EQ(v, 0.0f);
}

TEST(Edits, InvalidPlansThrow) {
  const auto c = tiny_config();
  const auto w = random_weights(c, 13);
  const auto tokens = seq({1, 2, 3});
  auto run = [&](Edit e) {
    EditPlan p;
    p.edits.push_back(std::move(e));
    return forward_with_edits(w, tokens, p);
  };
  EXPECT_THROW(run({Site::kMhsa, {0}, {-1}, EditAction::kZero, {}, 0}), PlanError);
  EXPECT_THROW(run({Site::kHidden, {3}, {-1}, EditAction::kZero, {}, 0}), PlanError);
  EXPECT_THROW(run({Site::kHidden, {1}, {-4}, EditAction::kZero, {}, 0}), PlanError);
  EXPECT_THROW(run({Site::kHidden, {1}, {-1}, EditAction::kReplace, std::vector<float>(3), 0}), PlanError);
  EXPECT_THROW(run({Site::kAttention, {1}, {-1}, EditAction::kZero, {}, 0}), PlanError);
  EXPECT_NO_THROW(run({Site::kHidden, {0}, {0}, EditAction::kZero, {}, 0}));
}

TEST(Edits, AppliedInDeclaredOrder) {
  const auto c = tiny_config();
  const auto w = random_weights(c, 14);
  const auto tokens = seq({4, 5});
  std::vector<float> one(c.hidden, 1.0f);
  EditPlan zero_then_add, add_then_zero;
  zero_then_add.edits = {{Site::kHidden, {1}, {-1}, EditAction::kZero, {}, 0},
                         {Site::kHidden, {1}, {-1}, EditAction::kAdd, one, 0}};
  add_then_zero.edits = {{Site::kHidden, {1}, {-1}, EditAction::kAdd, one, 0},
                         {Site::kHidden, {1}, {-1}, EditAction::kZero, {}, 0}};
  const auto a = forward_with_edits(w, tokens, zero_then_add), b = forward_with_edits(w, tokens, add_then_zero);
  for (std::size_t i = 0; i < c.hidden; ++i) {
    EXPECT_EQ(a.record.at(Site::kHidden, 1, -1)[i], 1.0f);
    EXPECT_EQ(b.record.at(Site::kHidden, 1, -1)[i], 0.0f);
  }
}

TEST(Predict, ClosedVocabulary) {
  std::vector<float> logits{1.7f, 0.2f, 9.9f};
  const std::vector<TokenId> labels{0, 1};
  EXPECT_EQ(closed_vocab_predict(logits, labels), 0u);
  EXPECT_EQ(closed_vocab_predict(logits, std::vector<TokenId>{1}), 0u);
  std::vector<float> tie{0.5f, 3.0f, 3.0f};
  EXPECT_EQ(closed_vocab_predict(tie, std::vector<TokenId>{2, 1}), 1u);  // token 1 wins the tie
  EXPECT_THROW(closed_vocab_predict(logits, std::vector<TokenId>{}), PreconditionError);
  EXPECT_THROW(closed_vocab_predict(logits, std::vector<TokenId>{3}), PreconditionError);
}

TEST(Weights, RoundTripAndErrors) {
  const auto c = tiny_config();
  const auto w = random_weights(c, 15);
  const auto dir = std::filesystem::temp_directory_path();
  const auto path = (dir / "emoprobe_w.emwt").string();
  save_weights(w, path, 77);
  const auto back = load_weights_with_binding(path);
  EXPECT_TRUE(back.weights == w);
  EXPECT_EQ(back.vocab_fingerprint, 77u);

  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  const auto bad = (dir / "emoprobe_w_bad.emwt").string();
  {
    std::ofstream out(bad, std::ios::binary);
    out << bytes.substr(0, bytes.size() - 10);
  }
  EXPECT_THROW(load_weights(bad), FormatError);
  {
    auto mutated = bytes;
    mutated[0] = 'X';
    std::ofstream out(bad, std::ios::binary);
    out << mutated;
  }
  EXPECT_THROW(load_weights(bad), FormatError);
  {
    std::ofstream out(bad, std::ios::binary);
    out << bytes << "extra";
  }
  EXPECT_THROW(load_weights(bad), FormatError);
  {
    auto mutated = bytes;
    mutated[8] = 3;  // header claims 3 layers, file holds 2
    std::ofstream out(bad, std::ios::binary);
    out << mutated;
  }
  EXPECT_THROW(load_weights(bad), FormatError);
  std::filesystem::remove(path);
  std::filesystem::remove(bad);
}

TEST(Weights, InitIsDeterministic) {
  const auto c = tiny_config();
  EXPECT_TRUE(init_weights(c, 3) == init_weights(c, 3));
  EXPECT_FALSE(init_weights(c, 3) == init_weights(c, 4));
}

TEST(Config, Validation) {
  auto c = tiny_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), PreconditionError);
  c = tiny_config();
  c.layers = 0;
  EXPECT_THROW(c.validate(), PreconditionError);
}
