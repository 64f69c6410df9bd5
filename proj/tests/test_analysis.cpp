#include <gtest/gtest.h>

#include <cmath>

#include "emoprobe/analysis.hpp"

using namespace emoprobe;

namespace {

ActivationRecord attention_record(std::vector<float> row, std::vector<TokenId> tokens) {
  ActivationRecord r;
  r.layers = 1;
  r.heads = 1;
  r.seq_len = static_cast<std::uint32_t>(row.size());
  r.tokens = std::move(tokens);
  r.attention = std::move(row);
  r.has_attention = true;
  return r;
}

}  // namespace

TEST(Welch, MatchesHandFormula) {
  const std::vector<double> a{1.0, 2.0, 3.5, 4.0}, b{2.0, 4.0, 6.0, 8.0, 10.5};
  // Two-pass means and unbiased variances written out directly.
  const double ma = (1.0 + 2.0 + 3.5 + 4.0) / 4.0, mb = (2.0 + 4.0 + 6.0 + 8.0 + 10.5) / 5.0;
  double va = 0.0, vb = 0.0;
  for (double x : a) va += (x - ma) * (x - ma) / 3.0;
  for (double x : b) vb += (x - mb) * (x - mb) / 4.0;
  const double want = (ma - mb) / std::sqrt(va / 4.0 + vb / 5.0);
  EXPECT_NEAR(welch_t(a, b), want, 1e-10);
  EXPECT_NEAR(welch_t(b, a), -want, 1e-10);
}

TEST(Welch, DegenerateGroups) {
  EXPECT_THROW(welch_t({1.0}, {1.0, 2.0}), DataError);
  EXPECT_EQ(welch_t({1.0, 1.0}, {1.0, 1.0}), 0.0);
  EXPECT_EQ(welch_t({2.0, 2.0}, {1.0, 1.0}), INFINITY);
}

TEST(GroupComparison, SmallGroupsAreSuppressed) {
  RegProbe p;
  p.v = Vector{1.0};
  p.appraisal = "pleasantness";
  Matrix acts(12, 1);
  std::vector<int> labels(12, 0);
  std::vector<bool> correct(12, true);
  for (std::size_t i = 0; i < 12; ++i) acts(i, 0) = static_cast<double>(i);
  for (std::size_t i = 0; i < 4; ++i) correct[i] = false;
  const auto cells = group_appraisal_comparison({p}, acts, labels, correct, 2);
  ASSERT_EQ(cells.size(), 2u);
  EXPECT_FALSE(cells[0].t.has_value());
  EXPECT_EQ(cells[0].correct.n, 8u);
  EXPECT_EQ(cells[0].miss.n, 4u);
  EXPECT_DOUBLE_EQ(cells[0].miss.mean, 1.5);
  EXPECT_NE(cells[0].note.find("suppressed"), std::string::npos);

  correct[4] = false;
  const auto enough = group_appraisal_comparison({p}, acts, labels, correct, 1);
  ASSERT_TRUE(enough[0].t.has_value());
  std::vector<double> hit, miss;
  for (std::size_t i = 0; i < 12; ++i) (correct[i] ? hit : miss).push_back(static_cast<double>(i));
  EXPECT_DOUBLE_EQ(*enough[0].t, welch_t(hit, miss));
  EXPECT_GT(*enough[0].t, 0.0);
}

TEST(Distribution, TotalVariation) {
  EXPECT_DOUBLE_EQ(total_variation({1, 0}, {0, 1}), 1.0);
  EXPECT_DOUBLE_EQ(total_variation({0.5, 0.5}, {0.5, 0.5}), 0.0);
  EXPECT_DOUBLE_EQ(total_variation({0.5, 0.25, 0.25}, {0.25, 0.25, 0.5}), 0.25);
  EXPECT_THROW(total_variation({1}, {0.5, 0.5}), ShapeError);
}

TEST(Distribution, Report) {
  const auto r = distribution_report({0, 0, 1, 2}, {0, 1, 1, 1}, 3);
  EXPECT_EQ(r.before, (std::vector<double>{0.5, 0.25, 0.25}));
  EXPECT_EQ(r.after, (std::vector<double>{0.25, 0.75, 0.0}));
  EXPECT_DOUBLE_EQ(r.tv, 0.5);
  EXPECT_THROW(label_distribution({3}, 3), DataError);
}

TEST(Attention, EndAlignedAndTiesKeepEarlierIndex) {
  const auto a = attention_record({0.5f, 0.25f, 0.25f}, {4, 5, 6});
  const auto b = attention_record({0.5f, 0.5f}, {7, 8});
  const auto s = aggregate_attention({&a, &b}, 3);
  ASSERT_EQ(s.layers.size(), 1u);
  const auto& top = s.layers[0];
  ASSERT_EQ(top.size(), 3u);
  EXPECT_EQ(top[0].index, 1u);
  EXPECT_EQ(top[1].index, 2u);
  EXPECT_EQ(top[2].index, 0u);
  EXPECT_DOUBLE_EQ(top[0].weight, 0.75);
  EXPECT_DOUBLE_EQ(top[2].weight, 0.5);
  EXPECT_EQ(aggregate_attention({&a, &b}, 1).layers[0].size(), 1u);
}

TEST(Attention, RequiresCapturedAttention) {
  ActivationRecord r;
  r.layers = 1;
  EXPECT_THROW(aggregate_attention({&r}), DataError);
  EXPECT_THROW(aggregate_attention({}), DataError);
}

TEST(Attention, TokenTextFromTokenizer) {
  const auto tok = default_tokenizer();
  const auto a = attention_record({0.9f, 0.1f}, {tok.id("joy"), tok.id("Answer:")});
  const auto s = aggregate_attention({&a}, 2, &tok);
  EXPECT_EQ(s.layers[0][0].text, "joy");
  EXPECT_EQ(s.to_csv(), "layer,rank,index,token,weight\n1,1,0,joy,0.8999999762\n1,2,1,Answer:,0.1000000015\n");
}

TEST(Similarity, CosineOfProbeDirections) {
  RegProbe a;
  a.v = Vector{1.0, 0.0, 0.0};
  a.provenance = {Site::kHidden, 2, -1};
  ClassProbe c;
  c.classes = 2;
  c.W = Matrix{{1.0, -1.0}, {1.0, 1.0}, {0.0, 0.0}};
  c.b = {0.0, 0.0};
  c.provenance = a.provenance;
  const double want0 = dot(a.v, c.direction(0)) / (norm(a.v) * norm(c.direction(0)));
  EXPECT_NEAR(appraisal_emotion_similarity(a, c, 0), want0, 1e-12);
  EXPECT_NEAR(appraisal_emotion_similarity(a, c, 0), 1.0 / std::sqrt(2.0), 1e-12);
  c.provenance.layer = 3;
  EXPECT_THROW(appraisal_emotion_similarity(a, c, 0), PreconditionError);
}

TEST(FilterCorrect, BookkeepingIsConsistent) {
  const auto tok = default_tokenizer();
  ModelConfig c;
  c.layers = 2;
  c.hidden = 16;
  c.heads = 2;
  c.ffn = 24;
  c.vocab = static_cast<std::uint32_t>(tok.size());
  const auto w = init_weights(c, 3);
  const auto prompts = build_prompts(generate(3, 60), {TemplateId::kBare, 0}, tok);
  const auto pool = filter_correct(w, prompts, emotion_label_tokens(tok));
  std::size_t total = 0, correct = 0;
  for (std::size_t e = 0; e < 7; ++e) {
    std::size_t row = 0;
    for (std::size_t p = 0; p < 7; ++p) row += pool.confusion.at(e, p);
    EXPECT_EQ(row, pool.per_class_total[e]);
    EXPECT_EQ(pool.confusion.at(e, e), pool.per_class_correct[e]);
    total += row;
    correct += pool.per_class_correct[e];
  }
  EXPECT_EQ(total, prompts.size());
  EXPECT_EQ(correct, pool.correct.size());
  EXPECT_DOUBLE_EQ(pool.accuracy, static_cast<double>(correct) / 60.0);
  for (std::size_t i = 0; i < prompts.size(); ++i) EXPECT_EQ(pool.mask[i], pool.predictions[i] == prompts[i].label);
}
