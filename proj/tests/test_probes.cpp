#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "emoprobe/probes.hpp"
#include "oracles.hpp"

using namespace emoprobe;
using namespace emoprobe::oracle;

namespace {

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Matrix m(r, c);
  for (auto& v : m.data()) v = scale * rng.normal();
  return m;
}

// Gaussian blobs around class means; noise controls overlap.
void blobs(Rng& rng, std::size_t n, std::size_t d, std::size_t classes, double noise, Matrix& x, std::vector<int>& y) {
  const Matrix centers = random_matrix(rng, classes, d, 2.0);
  x = Matrix(n, d);
  y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<int>(i % classes);
    for (std::size_t j = 0; j < d; ++j) x(i, j) = centers(y[i], j) + noise * rng.normal();
  }
}

ActivationRecord synthetic_record(std::uint32_t L, std::uint32_t d, const std::vector<double>& signal, Rng& rng,
                                  double noise) {
  ActivationRecord r;
  r.layers = L;
  r.hidden_size = d;
  r.seq_len = 6;
  r.positions = {5};
  r.mhsa.assign(L * d, 0.0f);
  r.ffn.assign(L * d, 0.0f);
  r.hidden.assign((L + 1) * d, 0.0f);
  for (std::uint32_t l = 0; l <= L; ++l)
    for (std::uint32_t j = 0; j < d; ++j) {
      // Signal strength grows with depth; layer 0 carries none.
      const double s = j < signal.size() ? signal[j] * l / static_cast<double>(L) : 0.0;
      r.hidden[l * d + j] = static_cast<float>(s + noise * rng.normal());
      if (l >= 1) {
        r.mhsa[(l - 1) * d + j] = static_cast<float>(noise * rng.normal());
        r.ffn[(l - 1) * d + j] = static_cast<float>(s + noise * rng.normal());
      }
    }
  return r;
}

std::vector<TraceSample> synthetic_samples(std::size_t n, std::uint32_t L, std::uint32_t d, std::uint64_t seed) {
  Rng rng(seed);
  const Matrix centers = random_matrix(rng, 7, d, 1.5);
  std::vector<TraceSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    TraceSample s;
    s.label = static_cast<EmotionId>(i % 7);
    std::vector<double> sig(d);
    for (std::uint32_t j = 0; j < d; ++j) sig[j] = centers(s.label, j);
    s.record = synthetic_record(L, d, sig, rng, 0.5);
    s.appraisals = {static_cast<float>(sig[0] * 2.0 + 0.1 * rng.normal()), static_cast<float>(rng.normal())};
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<double> values(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace

TEST(EmotionProbe, SeparablePairTrainsPerfectly) {
  const Matrix x{{1, 0}, {0, 1}};
  const std::vector<int> y{0, 1};
  const auto p = fit_emotion_probe_fixed(x, y, 2, 0.0);
  EXPECT_EQ(p.predict(x), y);
  EXPECT_EQ(eval_accuracy(p, x, y).value, 1.0);
}

TEST(EmotionProbe, SingleClassIsDegenerate) {
  const Matrix x{{1, 0}, {0, 1}};
  EXPECT_THROW(fit_emotion_probe_fixed(x, {1, 1}, 2, 0.0), DegenerateError);
  EXPECT_THROW(fit_emotion_probe_fixed(x, {0, 1}, 1, 0.0), DegenerateError);
  EXPECT_THROW(fit_emotion_probe_fixed(x, {0, 2}, 2, 0.0), DataError);
}

TEST(EmotionProbe, PermutationNullIsNearChance) {
  Rng rng(17);
  const Matrix x = random_matrix(rng, 200, 10);
  std::vector<int> y(200);
  for (std::size_t i = 0; i < 200; ++i) y[i] = static_cast<int>(i % 7);
  rng.shuffle(y);
  const auto split = shared_split(200, 3);
  const auto p = fit_emotion_probe(detail::select_rows(x, split.train), detail::select(y, split.train), 7);
  const double acc = eval_accuracy(p, detail::select_rows(x, split.test), detail::select(y, split.test)).value;
  EXPECT_GE(acc, 0.04);
  EXPECT_LE(acc, 0.25);
}

TEST(EmotionProbe, HeavyPenaltyCollapsesToMajority) {
  Rng rng(2);
  Matrix x;
  std::vector<int> y;
  blobs(rng, 90, 4, 3, 1.0, x, y);
  for (std::size_t i = 0; i < 30; ++i) y[i] = 2;  // class 2 is the majority
  const auto p = fit_emotion_probe_fixed(x, y, 3, 1e8);
  double wn = 0.0;
  for (double v : p.W.data()) wn += v * v;
  EXPECT_LT(std::sqrt(wn), 1e-6);
  for (int pred : p.predict(x)) EXPECT_EQ(pred, 2);
}

TEST(EmotionProbe, ArgmaxInvariantUnderInputScaling) {
  Rng rng(3);
  Matrix x;
  std::vector<int> y;
  blobs(rng, 140, 5, 7, 1.5, x, y);
  const auto base = fit_emotion_probe_fixed(x, y, 7, 1e-2).predict(x);
  for (double c : {0.5, 3.0}) {
    Matrix xc = x;
    for (auto& v : xc.data()) v *= c;
    EXPECT_EQ(fit_emotion_probe_fixed(xc, y, 7, 1e-2).predict(xc), base) << c;
  }
}

TEST(EmotionProbe, RawSpaceMatchesStandardizedSpace) {
  Rng rng(4);
  Matrix x;
  std::vector<int> y;
  blobs(rng, 70, 3, 7, 1.0, x, y);
  for (std::size_t i = 0; i < x.rows(); ++i) x(i, 1) = 100.0 + 50.0 * x(i, 1);
  const auto p = fit_emotion_probe_fixed(x, y, 7, 1e-2);
  const Matrix xs = p.standardizer.apply(x);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto raw = p.logits(x.row(i));
    for (std::size_t c = 0; c < 7; ++c) {
      // Standardized-space logits rebuilt from the raw parameters.
      double z = p.b[c];
      for (std::size_t j = 0; j < 3; ++j) z += p.W(j, c) * x(i, j);
      double zs = p.b[c];
      for (std::size_t j = 0; j < 3; ++j) zs += p.W(j, c) * p.standardizer.scale[j] * xs(i, j) + p.W(j, c) * p.standardizer.mean[j];
      EXPECT_NEAR(raw[c], z, 1e-9);
      EXPECT_NEAR(raw[c], zs, 1e-7);
    }
  }
}

TEST(EmotionProbe, LambdaSelectionIsDeterministicAndOnGrid) {
  Rng rng(5);
  Matrix x;
  std::vector<int> y;
  blobs(rng, 70, 4, 7, 2.0, x, y);
  const double a = select_lambda(x, y, 7, 9), b = select_lambda(x, y, 7, 9);
  EXPECT_EQ(a, b);
  const auto& grid = default_lambda_grid();
  EXPECT_NE(std::find(grid.begin(), grid.end(), a), grid.end());
}

TEST(EvalAccuracy, ConstantPredictorOnBalancedSet) {
  ClassProbe p;
  p.classes = 7;
  p.W = Matrix(2, 7);
  p.b = {1, 0, 0, 0, 0, 0, 0};
  Matrix x(70, 2);
  std::vector<int> y(70);
  for (int i = 0; i < 70; ++i) y[i] = i % 7;
  const auto e = eval_accuracy(p, x, y, 4);
  EXPECT_NEAR(e.value, 1.0 / 7.0, 1e-12);
  EXPECT_LE(e.ci_low, e.value);
  EXPECT_GE(e.ci_high, e.value);
  EXPECT_LT(e.ci_low, e.ci_high);
  const auto again = eval_accuracy(p, x, y, 4);
  EXPECT_EQ(again.ci_low, e.ci_low);
  EXPECT_EQ(again.ci_high, e.ci_high);
  EXPECT_THROW(eval_accuracy(p, Matrix(0, 2), {}), PreconditionError);
}

TEST(AppraisalProbe, ExactFit) {
  const auto p = fit_appraisal_probe(Matrix{{1}, {2}}, {1, 2}, 0.0);
  EXPECT_NEAR(p.v[0], 1.0, 1e-12);
  EXPECT_NEAR(p.b, 0.0, 1e-12);
}

TEST(AppraisalProbe, HandEvaluatedRidge) {
  const auto p = fit_appraisal_probe(Matrix{{1}, {-1}}, {1, -1}, 1.0);
  EXPECT_NEAR(p.v[0], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(p.b, 0.0, 1e-12);
}

TEST(AppraisalProbe, MatchesGradientDescentOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    const std::size_t n = 30, d = 5;
    const Matrix x = random_matrix(rng, n, d);
    std::vector<double> y(n);
    for (auto& v : y) v = 3.0 + rng.normal();
    const double lambda = 0.1 + rng.uniform() * 2.0;
    const auto p = fit_appraisal_probe(x, y, lambda);
    const auto [v, b] = ridge_gd(x, y, lambda);
    double worst = std::abs(p.b - b);
    for (std::size_t j = 0; j < d; ++j) worst = std::max(worst, std::abs(p.v[j] - v[j]));
    EXPECT_LE(worst, 1e-4) << "seed " << seed;
  }
}

TEST(AppraisalProbe, Errors) {
  EXPECT_THROW(fit_appraisal_probe(Matrix{{1}}, {1}, 0.0), DataError);
  EXPECT_THROW(fit_appraisal_probe(Matrix{{1}, {2}}, {1, NAN}, 0.0), Error);
  EXPECT_THROW(fit_appraisal_probe(Matrix{{1}, {2}}, {1}, 0.0), ShapeError);
}

TEST(R2, Definition) {
  EXPECT_NEAR(r2_score({1, 2, 3}, {1, 2, 3}), 1.0, 1e-15);
  EXPECT_NEAR(r2_score({2, 2, 2}, {1, 2, 3}), 0.0, 1e-15);
  EXPECT_LT(r2_score({3, 2, 1}, {1, 2, 3}), 0.0);
  EXPECT_THROW(r2_score({1, 1}, {2, 2}), DegenerateError);
}

TEST(MlpProbe, SolvesXorWhereLinearCannot) {
  Rng rng(6);
  Matrix x(200, 2);
  std::vector<int> y(200);
  for (std::size_t i = 0; i < 200; ++i) {
    const double a = (i & 1) ? 1.0 : -1.0, b = (i & 2) ? 1.0 : -1.0;
    x(i, 0) = a + 0.1 * rng.normal();
    x(i, 1) = b + 0.1 * rng.normal();
    y[i] = a * b > 0 ? 1 : 0;
  }
  const auto mlp = fit_mlp_probe(x, y, 2, 1);
  EXPECT_EQ(accuracy_of(mlp.predict(x), y), 1.0);
  const auto lin = fit_emotion_probe_fixed(x, y, 2, 0.0);
  EXPECT_LE(accuracy_of(lin.predict(x), y), 0.75);
}

TEST(MlpProbe, AtLeastLinearOnSeparableData) {
  Rng rng(7);
  Matrix x;
  std::vector<int> y;
  blobs(rng, 140, 6, 7, 0.3, x, y);
  const auto mlp = fit_mlp_probe(x, y, 7, 2);
  const auto lin = fit_emotion_probe_fixed(x, y, 7, 0.0);
  EXPECT_GE(accuracy_of(mlp.predict(x), y), accuracy_of(lin.predict(x), y));
}

TEST(MlpProbe, SameSeedSameWeights) {
  Rng rng(8);
  Matrix x;
  std::vector<int> y;
  blobs(rng, 50, 3, 5, 1.0, x, y);
  MlpSettings s;
  s.epochs = 20;
  const auto a = fit_mlp_probe(x, y, 5, 3, s), b = fit_mlp_probe(x, y, 5, 3, s);
  EXPECT_EQ(values(a.W1.data()), values(b.W1.data()));
  EXPECT_EQ(values(a.W2.data()), values(b.W2.data()));
  EXPECT_EQ(a.b1, b.b1);
}

TEST(ProbeSweep, LabelTokenEmbeddingsAreFullyDecodable) {
  // Inputs are the label tokens' own embedding rows.
  ModelConfig c;
  c.layers = 1;
  c.hidden = 16;
  c.heads = 2;
  c.ffn = 8;
  c.vocab = 20;
  const auto w = init_weights(c, 1);
  Matrix x(140, 16);
  std::vector<int> y(140);
  for (std::size_t i = 0; i < 140; ++i) {
    y[i] = static_cast<int>(i % 7);
    for (std::size_t j = 0; j < 16; ++j) x(i, j) = w.tok_emb[y[i] * 16 + j];
  }
  const auto split = shared_split(140, 1);
  const auto p = fit_emotion_probe(detail::select_rows(x, split.train), detail::select(y, split.train), 7, 1e-2);
  EXPECT_EQ(eval_accuracy(p, detail::select_rows(x, split.test), detail::select(y, split.test)).value, 1.0);
}

TEST(ProbeSweep, GridShapeBoundsAndDeterminism) {
  const auto samples = synthetic_samples(280, 4, 6, 1);
  SweepSettings s;
  s.sites = {Site::kMhsa, Site::kFfn, Site::kHidden};
  s.seed = 5;
  s.bootstrap = 200;
  const auto g = probe_sweep(samples, s);
  EXPECT_EQ(g.cells.size(), 4u + 4u + 5u);
  for (const auto& c : g.cells) {
    EXPECT_GE(c.value, 0.0);
    EXPECT_LE(c.value, 1.0);
    EXPECT_EQ(c.n, 56u);
  }
  EXPECT_EQ(probe_sweep(samples, s).to_csv(), g.to_csv());
  const double first = g.find(Site::kHidden, 0, -1)->value, last = g.find(Site::kHidden, 4, -1)->value;
  EXPECT_GE(last, first + 0.2);
  EXPECT_LT(g.find(Site::kMhsa, 4, -1)->value, 0.35);
}

TEST(ProbeSweep, ParallelMatchesSerial) {
  const auto samples = synthetic_samples(140, 3, 5, 2);
  SweepSettings s;
  s.bootstrap = 100;
  const auto serial = probe_sweep(samples, s);
  s.jobs = 3;
  EXPECT_EQ(probe_sweep(samples, s).to_csv(), serial.to_csv());
}

TEST(ProbeSweep, UndersizedCellsAreSkippedWithWarning) {
  const auto samples = synthetic_samples(40, 2, 4, 3);
  const auto g = probe_sweep(samples, {});
  EXPECT_TRUE(g.cells.empty());
  EXPECT_EQ(g.warnings.size(), 3u);
}

TEST(ProbeSweep, AppraisalGridAndBundleRoundTrip) {
  const auto samples = synthetic_samples(210, 2, 5, 4);
  SweepSettings s;
  s.kind = ProbeKind::kAppraisal;
  s.appraisal_names = {"first", "noise"};
  s.keep_probes = true;
  ProbeBundle bundle;
  bundle.model_name = "synthetic";
  bundle.labels = default_emotions();
  const auto g = probe_sweep(samples, s, &bundle);
  EXPECT_GT(g.find(Site::kHidden, 2, -1, "r2:first")->value, 0.5);
  EXPECT_LT(g.find(Site::kHidden, 2, -1, "r2:noise")->value, 0.2);

  s.kind = ProbeKind::kLinear;
  probe_sweep(samples, s, &bundle);
  EXPECT_EQ(bundle.classifiers.size(), 3u);
  EXPECT_EQ(bundle.regressors.size(), 6u);
  const auto path = (std::filesystem::temp_directory_path() / "emoprobe_bundle.empb").string();
  save_bundle(bundle, path);
  const auto back = load_bundle(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.model_name, "synthetic");
  EXPECT_EQ(back.labels, bundle.labels);
  const Provenance prov{Site::kHidden, 2, -1};
  EXPECT_EQ(values(back.classifier(prov).W.data()), values(bundle.classifier(prov).W.data()));
  EXPECT_EQ(back.classifier(prov).b, bundle.classifier(prov).b);
  EXPECT_EQ(back.regressor(prov, "first").v.span()[0], bundle.regressor(prov, "first").v.span()[0]);
  EXPECT_EQ(back.regressor(prov, "first").b, bundle.regressor(prov, "first").b);
  EXPECT_THROW(back.classifier({Site::kMhsa, 1, -1}), DataError);
}

TEST(ProbeGrid, CsvRoundTrip) {
  ProbeGrid g;
  g.cells.push_back({Site::kFfn, 3, -2, "accuracy", 0.75, 40, 0.6, 0.875});
  g.cells.push_back({Site::kHidden, 0, -1, "r2:pleasantness", -0.125, 40, -0.125, -0.125});
  const auto back = parse_grid_csv(g.to_csv());
  ASSERT_EQ(back.cells.size(), 2u);
  EXPECT_EQ(back.to_csv(), g.to_csv());
  EXPECT_EQ(g.to_csv().substr(0, g.to_csv().find('\n')), "site,layer,token,metric,value,n,ci_low,ci_high");
  EXPECT_THROW(parse_grid_csv("nope\n"), DataError);
}

TEST(ProbeGrid, SaturationLayer) {
  ProbeGrid g;
  const double acc[] = {0.2, 0.4, 0.8, 0.9, 0.91, 0.92};
  for (std::uint32_t l = 0; l < 6; ++l) g.cells.push_back({Site::kHidden, l, -1, "accuracy", acc[l], 10, 0, 0});
  EXPECT_EQ(saturation_layer(g, Site::kHidden), 3u);
  EXPECT_EQ(best_layer(g, Site::kHidden), 5u);
  EXPECT_THROW(saturation_layer(g, Site::kFfn), DataError);
}

TEST(SharedSplit, DisjointCoveringAndSeeded) {
  const auto a = shared_split(101, 4), b = shared_split(101, 4);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.train.size(), 81u);
  std::vector<int> seen(101, 0);
  for (auto i : a.train) ++seen[i];
  for (auto i : a.test) ++seen[i];
  for (int s : seen) EXPECT_EQ(s, 1);
  EXPECT_NE(shared_split(101, 5).train, a.train);
}
