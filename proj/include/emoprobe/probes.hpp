#pragma once

// Linear and one-hidden-layer probes over frozen activations, and grids of
// probes over (site, layer, token).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "emoprobe/errors.hpp"
#include "emoprobe/linalg.hpp"
#include "emoprobe/model.hpp"
#include "emoprobe/trace.hpp"

namespace emoprobe {

struct Provenance {
  Site site = Site::kHidden;
  std::uint32_t layer = 0;
  std::int32_t token = -1;  // negative counts from the end

  friend bool operator==(const Provenance&, const Provenance&) = default;
  friend auto operator<=>(const Provenance&, const Provenance&) = default;
};

// Per-dimension z-score fitted on a training split.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  static Standardizer fit(const Matrix& x) {
    Standardizer s;
    const std::size_t n = x.rows(), d = x.cols();
    s.mean.assign(d, 0.0);
    s.scale.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) s.mean[j] += x(i, j);
    for (auto& m : s.mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double c = x(i, j) - s.mean[j];
        s.scale[j] += c * c;
      }
    for (auto& v : s.scale) {
      v = std::sqrt(v / static_cast<double>(n));
      if (v < 1e-12) v = 1.0;  // constant dimension
    }
    return s;
  }

  static Standardizer identity(std::size_t d) { return {std::vector<double>(d, 0.0), std::vector<double>(d, 1.0)}; }

  Matrix apply(const Matrix& x) const {
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = (x(i, j) - mean[j]) / scale[j];
    return out;
  }
};

namespace detail {

inline void check_class_inputs(const Matrix& x, const std::vector<int>& y, std::size_t classes) {
  if (x.rows() != y.size()) throw ShapeError("probe: sample/label count mismatch");
  if (x.rows() == 0 || x.cols() == 0) throw DataError("probe: empty input");
  if (classes < 2) throw DegenerateError("probe: need at least 2 classes");
  std::set<int> seen;
  for (int label : y) {
    if (label < 0 || static_cast<std::size_t>(label) >= classes) throw DataError("probe: label out of range");
    seen.insert(label);
  }
  if (seen.size() < 2) throw DegenerateError("probe: all samples carry a single label");
}

inline std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace detail

struct ClassProbe {
  // Raw-space parameters: logits = Wᵀx + b with W d×C.
  Matrix W;
  std::vector<double> b;
  std::size_t classes = 0;
  double lambda = 0.0;
  Provenance provenance;
  Standardizer standardizer;
  std::size_t iterations = 0;

  std::size_t dim() const { return W.rows(); }

  std::vector<double> logits(std::span<const double> x) const {
    if (x.size() != W.rows()) throw ShapeError("ClassProbe: input dimension mismatch");
    std::vector<double> z(b);
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double xj = x[j];
      const auto row = W.row(j);
      for (std::size_t c = 0; c < classes; ++c) z[c] += row[c] * xj;
    }
    return z;
  }

  int predict(std::span<const double> x) const { return static_cast<int>(detail::argmax_row(logits(x))); }

  std::vector<int> predict(const Matrix& x) const {
    std::vector<int> out(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) out[i] = predict(x.row(i));
    return out;
  }

  // Classifier direction for one class, in raw activation space.
  Vector direction(std::size_t e) const {
    if (e >= classes) throw PreconditionError("ClassProbe: class index out of range");
    return W.column(e);
  }
};

struct LogisticSettings {
  double tolerance = 1e-6;
  std::size_t max_iterations = 2000;
};

namespace detail {

// Multinomial logistic regression on already-standardized inputs. Parameters
// are stored class-major (C×d) during fitting.
struct SoftmaxFit {
  std::vector<double> w;  // C×d
  std::vector<double> b;  // C
  std::size_t iterations = 0;
};

inline SoftmaxFit fit_softmax(const Matrix& x, const std::vector<int>& y, std::size_t C, double lambda,
                              const LogisticSettings& s) {
  const std::size_t n = x.rows(), d = x.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  SoftmaxFit fit{std::vector<double>(C * d, 0.0), std::vector<double>(C, 0.0), 0};
  std::vector<double> z(n * C), gw(C * d), gb(C), tw(C * d), tb(C);

  auto objective = [&](const std::vector<double>& w, const std::vector<double>& bias, bool grad) {
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto xi = x.row(i);
      double* zi = z.data() + i * C;
      for (std::size_t c = 0; c < C; ++c) {
        const double* wc = w.data() + c * d;
        double acc = bias[c];
        for (std::size_t j = 0; j < d; ++j) acc += wc[j] * xi[j];
        zi[c] = acc;
      }
      const double mx = *std::max_element(zi, zi + C);
      double sum = 0.0;
      for (std::size_t c = 0; c < C; ++c) sum += std::exp(zi[c] - mx);
      const double lse = mx + std::log(sum);
      loss += lse - zi[y[i]];
      if (grad)
        for (std::size_t c = 0; c < C; ++c) zi[c] = std::exp(zi[c] - lse);
    }
    double reg = 0.0;
    for (double v : w) reg += v * v;
    if (grad) {
      std::fill(gb.begin(), gb.end(), 0.0);
      for (std::size_t k = 0; k < C * d; ++k) gw[k] = lambda * w[k];
      for (std::size_t i = 0; i < n; ++i) {
        const auto xi = x.row(i);
        double* pi = z.data() + i * C;
        pi[y[i]] -= 1.0;
        for (std::size_t c = 0; c < C; ++c) {
          const double r = pi[c] * inv_n;
          gb[c] += r;
          double* gc = gw.data() + c * d;
          for (std::size_t j = 0; j < d; ++j) gc[j] += r * xi[j];
        }
      }
    }
    return loss * inv_n + 0.5 * lambda * reg;
  };

  double f = objective(fit.w, fit.b, true);
  double step = 1.0;
  for (std::size_t it = 0; it < s.max_iterations; ++it) {
    double g2 = 0.0;
    for (double v : gw) g2 += v * v;
    for (double v : gb) g2 += v * v;
    if (std::sqrt(g2) <= s.tolerance) break;
    fit.iterations = it + 1;
    step = std::min(step * 2.0, 1e6);
    double f_new = 0.0;
    for (;;) {
      for (std::size_t k = 0; k < C * d; ++k) tw[k] = fit.w[k] - step * gw[k];
      for (std::size_t c = 0; c < C; ++c) tb[c] = fit.b[c] - step * gb[c];
      f_new = objective(tw, tb, false);
      if (f_new <= f - 0.5 * step * g2 || step < 1e-20) break;
      step *= 0.5;
    }
    if (!(f_new <= f)) break;  // no further progress possible at machine precision
    fit.w.swap(tw);
    fit.b.swap(tb);
    f = objective(fit.w, fit.b, true);
  }
  return fit;
}

inline ClassProbe to_raw_probe(const SoftmaxFit& fit, const Standardizer& st, std::size_t C, std::size_t d) {
  ClassProbe p;
  p.classes = C;
  p.W = Matrix(d, C);
  p.b = fit.b;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t j = 0; j < d; ++j) {
      const double w = fit.w[c * d + j] / st.scale[j];
      p.W(j, c) = w;
      p.b[c] -= w * st.mean[j];
    }
  p.standardizer = st;
  p.iterations = fit.iterations;
  return p;
}

inline Matrix select_rows(const Matrix& x, const std::vector<std::size_t>& idx) {
  Matrix out(idx.size(), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(x.row(idx[i]).begin(), x.cols(), out.row(i).begin());
  return out;
}

template <class T>
std::vector<T> select(const std::vector<T>& v, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

}  // namespace detail

inline const std::vector<double>& default_lambda_grid() {
  static const std::vector<double> grid{0.0, 1e-3, 1e-2, 1e-1, 1.0};
  return grid;
}

inline double accuracy_of(const std::vector<int>& pred, const std::vector<int>& y) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < y.size(); ++i) ok += pred[i] == y[i];
  return y.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(y.size());
}

// Fit with a fixed penalty. Inputs are standardized on x when `standardize`.
inline ClassProbe fit_emotion_probe_fixed(const Matrix& x, const std::vector<int>& y, std::size_t classes,
                                          double lambda, bool standardize = true,
                                          const LogisticSettings& settings = {}) {
  detail::check_class_inputs(x, y, classes);
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw PreconditionError("probe: lambda must be finite and >= 0");
  const Standardizer st = standardize ? Standardizer::fit(x) : Standardizer::identity(x.cols());
  const Matrix xs = standardize ? st.apply(x) : x;
  auto fit = detail::fit_softmax(xs, y, classes, lambda, settings);
  auto probe = detail::to_raw_probe(fit, st, classes, x.cols());
  probe.lambda = lambda;
  return probe;
}

// 5-fold cross-validated choice of lambda; ties prefer the larger penalty.
inline double select_lambda(const Matrix& x, const std::vector<int>& y, std::size_t classes, std::uint64_t seed,
                            const std::vector<double>& grid = default_lambda_grid(), std::size_t folds = 5,
                            const LogisticSettings& settings = {}) {
  if (grid.empty()) throw PreconditionError("select_lambda: empty grid");
  const std::size_t n = x.rows();
  if (n < folds) throw DataError("select_lambda: fewer samples than folds");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  double best = grid.front(), best_acc = -1.0;
  for (double lambda : grid) {
    double total = 0.0;
    std::size_t used = 0;
    for (std::size_t f = 0; f < folds; ++f) {
      std::vector<std::size_t> tr, te;
      for (std::size_t i = 0; i < n; ++i) (i % folds == f ? te : tr).push_back(order[i]);
      const auto ytr = detail::select(y, tr);
      if (std::set<int>(ytr.begin(), ytr.end()).size() < 2) continue;
      const auto p = fit_emotion_probe_fixed(detail::select_rows(x, tr), ytr, classes, lambda, true, settings);
      total += accuracy_of(p.predict(detail::select_rows(x, te)), detail::select(y, te));
      ++used;
    }
    const double acc = used ? total / static_cast<double>(used) : 0.0;
    if (acc >= best_acc) {
      best_acc = acc;
      best = lambda;
    }
  }
  return best;
}

// Multinomial logistic probe. Without a lambda, one is chosen by 5-fold CV.
inline ClassProbe fit_emotion_probe(const Matrix& x, const std::vector<int>& y, std::size_t classes,
                                    std::optional<double> lambda = std::nullopt, std::uint64_t seed = 0) {
  detail::check_class_inputs(x, y, classes);
  const double l = lambda ? *lambda : select_lambda(x, y, classes, seed);
  return fit_emotion_probe_fixed(x, y, classes, l);
}

struct Estimate {
  double value = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t n = 0;
};

// Percentile bootstrap over per-sample scores.
inline Estimate bootstrap_mean(const std::vector<double>& scores, std::uint64_t seed, std::size_t resamples = 1000) {
  if (scores.empty()) throw PreconditionError("bootstrap: empty sample");
  const std::size_t n = scores.size();
  double mean = 0.0;
  for (double s : scores) mean += s;
  mean /= static_cast<double>(n);
  Rng rng(seed);
  std::vector<double> stats(resamples);
  for (auto& st : stats) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += scores[rng.below(n)];
    st = acc / static_cast<double>(n);
  }
  std::sort(stats.begin(), stats.end());
  Estimate e{mean, mean, mean, n};
  if (resamples > 0) {
    const auto lo = static_cast<std::size_t>(std::floor(0.025 * static_cast<double>(resamples)));
    const auto hi = static_cast<std::size_t>(std::ceil(0.975 * static_cast<double>(resamples))) - 1;
    e.ci_low = stats[std::min(lo, resamples - 1)];
    e.ci_high = stats[std::min(hi, resamples - 1)];
  }
  return e;
}

inline Estimate eval_accuracy(const ClassProbe& p, const Matrix& x, const std::vector<int>& y, std::uint64_t seed = 0,
                              std::size_t resamples = 1000) {
  if (x.rows() == 0) throw PreconditionError("eval_accuracy: empty held-out set");
  if (x.rows() != y.size()) throw ShapeError("eval_accuracy: sample/label count mismatch");
  const auto pred = p.predict(x);
  std::vector<double> hit(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) hit[i] = pred[i] == y[i] ? 1.0 : 0.0;
  return bootstrap_mean(hit, seed, resamples);
}

struct RegProbe {
  Vector v;
  double b = 0.0;
  std::string appraisal;
  double lambda = 0.0;
  Provenance provenance;

  double predict(std::span<const double> x) const {
    if (x.size() != v.size()) throw ShapeError("RegProbe: input dimension mismatch");
    return b + dot(v.span(), x);
  }
  std::vector<double> predict(const Matrix& x) const {
    std::vector<double> out(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) out[i] = predict(x.row(i));
    return out;
  }
};

// Ridge on centered (optionally standardized) data; returns raw-space v and b.
inline RegProbe fit_appraisal_probe(const Matrix& x, const std::vector<double>& y, double lambda,
                                    bool standardize = false) {
  const std::size_t n = x.rows(), d = x.cols();
  if (n != y.size()) throw ShapeError("fit_appraisal_probe: sample/target count mismatch");
  if (n < 2) throw DataError("fit_appraisal_probe: need at least 2 samples to center");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw PreconditionError("fit_appraisal_probe: lambda must be >= 0");
  detail::require_finite(y, "appraisal scores");
  Standardizer st = Standardizer::fit(x);
  if (!standardize) std::fill(st.scale.begin(), st.scale.end(), 1.0);
  const Matrix xs = st.apply(x);
  double ymean = 0.0;
  for (double v : y) ymean += v;
  ymean /= static_cast<double>(n);

  Matrix gram(d, d), rhs(d, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const auto xi = xs.row(i);
    const double yi = y[i] - ymean;
    for (std::size_t a = 0; a < d; ++a) {
      rhs(a, 0) += xi[a] * yi;
      const double xa = xi[a];
      auto g = gram.row(a);
      for (std::size_t c = a; c < d; ++c) g[c] += xa * xi[c];
    }
  }
  for (std::size_t a = 0; a < d; ++a) {
    gram(a, a) += lambda;
    for (std::size_t c = 0; c < a; ++c) gram(a, c) = gram(c, a);
  }
  const Matrix sol = solve_spd(gram, rhs);
  RegProbe p;
  p.v = Vector(d);
  p.b = ymean;
  for (std::size_t j = 0; j < d; ++j) {
    p.v[j] = sol(j, 0) / st.scale[j];
    p.b -= p.v[j] * st.mean[j];
  }
  p.lambda = lambda;
  return p;
}

inline double r2_score(const std::vector<double>& pred, const std::vector<double>& y) {
  if (pred.size() != y.size() || y.empty()) throw ShapeError("r2: size mismatch");
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(y.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ss_res += (y[i] - pred[i]) * (y[i] - pred[i]);
    ss_tot += (y[i] - mean) * (y[i] - mean);
  }
  if (ss_tot <= 0.0) throw DegenerateError("r2: held-out targets have zero variance");
  return 1.0 - ss_res / ss_tot;
}

inline double eval_r2(const RegProbe& p, const Matrix& x, const std::vector<double>& y) {
  return r2_score(p.predict(x), y);
}

struct MlpSettings {
  std::size_t hidden = 64;
  std::size_t epochs = 500;
  std::size_t batch = 64;
  double lr = 1e-2;
};

struct MlpProbe {
  std::size_t hidden = 0;
  std::size_t classes = 0;
  Matrix W1;  // hidden×d, on standardized inputs
  std::vector<double> b1;
  Matrix W2;  // C×hidden
  std::vector<double> b2;
  Standardizer standardizer;
  Provenance provenance;

  std::vector<double> logits(std::span<const double> x) const {
    const std::size_t d = W1.cols();
    if (x.size() != d) throw ShapeError("MlpProbe: input dimension mismatch");
    std::vector<double> xs(d), h(hidden), z(b2);
    for (std::size_t j = 0; j < d; ++j) xs[j] = (x[j] - standardizer.mean[j]) / standardizer.scale[j];
    for (std::size_t u = 0; u < hidden; ++u) h[u] = silu(b1[u] + dot(W1.row(u), xs));
    for (std::size_t c = 0; c < classes; ++c) z[c] += dot(W2.row(c), h);
    return z;
  }
  int predict(std::span<const double> x) const { return static_cast<int>(detail::argmax_row(logits(x))); }
  std::vector<int> predict(const Matrix& x) const {
    std::vector<int> out(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) out[i] = predict(x.row(i));
    return out;
  }
};

inline MlpProbe fit_mlp_probe(const Matrix& x, const std::vector<int>& y, std::size_t classes, std::uint64_t seed,
                              const MlpSettings& s = {}) {
  detail::check_class_inputs(x, y, classes);
  const std::size_t n = x.rows(), d = x.cols(), H = s.hidden, C = classes;
  MlpProbe p;
  p.hidden = H;
  p.classes = C;
  p.standardizer = Standardizer::fit(x);
  const Matrix xs = p.standardizer.apply(x);
  Rng rng(seed);
  p.W1 = Matrix(H, d);
  p.W2 = Matrix(C, H);
  for (auto& v : p.W1.data()) v = rng.normal() / std::sqrt(static_cast<double>(d));
  for (auto& v : p.W2.data()) v = rng.normal() / std::sqrt(static_cast<double>(H));
  p.b1.assign(H, 0.0);
  p.b2.assign(C, 0.0);

  // Adam state over the flattened parameter list [W1, b1, W2, b2].
  std::vector<double*> params;
  for (auto& v : p.W1.data()) params.push_back(&v);
  for (auto& v : p.b1) params.push_back(&v);
  for (auto& v : p.W2.data()) params.push_back(&v);
  for (auto& v : p.b2) params.push_back(&v);
  const std::size_t P = params.size();
  std::vector<double> grad(P), m(P, 0.0), vv(P, 0.0);
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t t = 0;

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::vector<double> pre(H), h(H), z(C), dh(H);
  const std::size_t batch = std::max<std::size_t>(1, std::min(s.batch, n));
  for (std::size_t epoch = 0; epoch < s.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t end = std::min(n, start + batch);
      std::fill(grad.begin(), grad.end(), 0.0);
      double* gW1 = grad.data();
      double* gb1 = gW1 + H * d;
      double* gW2 = gb1 + H;
      double* gb2 = gW2 + C * H;
      const double scale = 1.0 / static_cast<double>(end - start);
      for (std::size_t bi = start; bi < end; ++bi) {
        const std::size_t i = order[bi];
        const auto xi = xs.row(i);
        for (std::size_t u = 0; u < H; ++u) {
          pre[u] = p.b1[u] + dot(p.W1.row(u), xi);
          h[u] = silu(pre[u]);
        }
        for (std::size_t c = 0; c < C; ++c) z[c] = p.b2[c] + dot(p.W2.row(c), h);
        const double mx = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        for (auto& v : z) sum += (v = std::exp(v - mx));
        for (auto& v : z) v /= sum;
        z[y[i]] -= 1.0;
        std::fill(dh.begin(), dh.end(), 0.0);
        for (std::size_t c = 0; c < C; ++c) {
          const double r = z[c] * scale;
          gb2[c] += r;
          const auto w2 = p.W2.row(c);
          for (std::size_t u = 0; u < H; ++u) {
            gW2[c * H + u] += r * h[u];
            dh[u] += r * w2[u];
          }
        }
        for (std::size_t u = 0; u < H; ++u) {
          const double sg = 1.0 / (1.0 + std::exp(-pre[u]));
          const double g = dh[u] * sg * (1.0 + pre[u] * (1.0 - sg));
          gb1[u] += g;
          double* row = gW1 + u * d;
          for (std::size_t j = 0; j < d; ++j) row[j] += g * xi[j];
        }
      }
      ++t;
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
      for (std::size_t k = 0; k < P; ++k) {
        m[k] = beta1 * m[k] + (1 - beta1) * grad[k];
        vv[k] = beta2 * vv[k] + (1 - beta2) * grad[k] * grad[k];
        *params[k] -= s.lr * (m[k] / c1) / (std::sqrt(vv[k] / c2) + eps);
      }
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Grids

enum class ProbeKind { kLinear, kMlp, kAppraisal };

struct GridCell {
  Site site = Site::kHidden;
  std::uint32_t layer = 0;
  std::int32_t token = -1;
  std::string metric;  // "accuracy" or "r2:<appraisal>"
  double value = 0.0;
  std::size_t n = 0;   // held-out samples
  double ci_low = 0.0;
  double ci_high = 0.0;
};

struct ProbeGrid {
  std::vector<GridCell> cells;
  std::vector<std::string> warnings;

  const GridCell* find(Site site, std::uint32_t layer, std::int32_t token, const std::string& metric = "accuracy") const {
    for (const auto& c : cells)
      if (c.site == site && c.layer == layer && c.token == token && c.metric == metric) return &c;
    return nullptr;
  }

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "site,layer,token,metric,value,n,ci_low,ci_high\n";
    for (const auto& c : cells)
      os << site_name(c.site) << ',' << c.layer << ',' << c.token << ',' << c.metric << ',' << c.value << ','
         << c.n << ',' << c.ci_low << ',' << c.ci_high << '\n';
    return os.str();
  }
};

inline ProbeGrid parse_grid_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("site,layer,token,metric,value", 0) != 0)
    throw DataError("probe grid CSV: missing header");
  ProbeGrid g;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(item);
    if (f.size() != 8) throw DataError("probe grid CSV: line " + std::to_string(lineno) + " has wrong field count");
    try {
      GridCell c;
      c.site = parse_site(f[0]);
      c.layer = static_cast<std::uint32_t>(std::stoul(f[1]));
      c.token = std::stoi(f[2]);
      c.metric = f[3];
      c.value = std::stod(f[4]);
      c.n = std::stoul(f[5]);
      c.ci_low = std::stod(f[6]);
      c.ci_high = std::stod(f[7]);
      g.cells.push_back(c);
    } catch (const std::logic_error&) {
      throw DataError("probe grid CSV: malformed line " + std::to_string(lineno));
    }
  }
  return g;
}

// Samples as seen by probes: trace samples carry everything needed.
inline Matrix gather(const std::vector<TraceSample>& samples, const std::vector<std::size_t>& idx, Site site,
                     std::uint32_t layer, std::int32_t token) {
  if (idx.empty()) return {};
  const std::size_t d = samples[idx.front()].record.hidden_size;
  Matrix x(idx.size(), d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto v = samples[idx[i]].record.at(site, layer, token);
    if (v.size() != d) throw ShapeError("gather: inconsistent hidden size");
    for (std::size_t j = 0; j < d; ++j) x(i, j) = v[j];
  }
  return x;
}

struct Split {
  std::vector<std::size_t> train, test;
};

// Seeded 80/20 split shared by every cell of a sweep.
inline Split shared_split(std::size_t n, std::uint64_t seed, double train_fraction = 0.8) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  Split s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

struct SweepSettings {
  std::vector<Site> sites{Site::kHidden};
  std::vector<std::uint32_t> layers;   // empty: every layer valid for the site
  std::vector<std::int32_t> tokens{-1};
  ProbeKind kind = ProbeKind::kLinear;
  std::size_t classes = 7;
  std::optional<double> lambda = 1e-2;  // nullopt: 5-fold CV per cell
  double ridge_lambda = 1.0;
  std::vector<std::size_t> appraisals;  // indices into sample appraisal vectors; empty = all
  std::vector<std::string> appraisal_names;
  std::uint64_t seed = 0;
  std::size_t bootstrap = 1000;
  unsigned jobs = 1;
  bool keep_probes = false;
};

// Probes fitted by a sweep, keyed by provenance.
struct ProbeBundle {
  std::string model_name;
  std::uint64_t seed = 0;
  std::vector<std::string> labels;
  std::map<Provenance, ClassProbe> classifiers;
  std::map<std::pair<Provenance, std::string>, RegProbe> regressors;

  const ClassProbe& classifier(const Provenance& p) const {
    auto it = classifiers.find(p);
    if (it == classifiers.end())
      throw DataError(std::string("no emotion probe for ") + site_name(p.site) + " layer " + std::to_string(p.layer));
    return it->second;
  }
  const RegProbe& regressor(const Provenance& p, const std::string& appraisal) const {
    auto it = regressors.find({p, appraisal});
    if (it == regressors.end())
      throw DataError("no appraisal probe for '" + appraisal + "' at " + site_name(p.site) + " layer " +
                      std::to_string(p.layer));
    return it->second;
  }
};

inline std::vector<std::uint32_t> site_layers(Site site, std::uint32_t L) {
  std::vector<std::uint32_t> out;
  for (std::uint32_t l = (site == Site::kHidden ? 0 : 1); l <= L; ++l) out.push_back(l);
  return out;
}

inline ProbeGrid probe_sweep(const std::vector<TraceSample>& samples, const SweepSettings& s,
                             ProbeBundle* bundle = nullptr) {
  if (samples.empty()) throw DataError("probe_sweep: no samples");
  const std::uint32_t L = samples.front().record.layers;
  const Split split = shared_split(samples.size(), s.seed);
  std::vector<int> labels(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) labels[i] = samples[i].label;
  const auto ytr = detail::select(labels, split.train), yte = detail::select(labels, split.test);

  std::vector<std::size_t> appraisals = s.appraisals;
  if (s.kind == ProbeKind::kAppraisal && appraisals.empty())
    for (std::size_t a = 0; a < samples.front().appraisals.size(); ++a) appraisals.push_back(a);
  auto appraisal_name = [&](std::size_t a) {
    return a < s.appraisal_names.size() ? s.appraisal_names[a] : "a" + std::to_string(a);
  };

  struct Job {
    Provenance prov;
  };
  std::vector<Job> jobs;
  ProbeGrid grid;
  const std::size_t need = s.kind == ProbeKind::kAppraisal ? 10 : 10 * s.classes;
  for (Site site : s.sites) {
    if (site == Site::kAttention) throw PreconditionError("probe_sweep: attention is not a vector site");
    const auto layers = s.layers.empty() ? site_layers(site, L) : s.layers;
    for (std::uint32_t layer : layers) {
      if (layer > L || (site != Site::kHidden && layer == 0)) continue;
      for (std::int32_t token : s.tokens) {
        if (split.train.size() < need || split.test.empty()) {
          grid.warnings.push_back(std::string("skipped ") + site_name(site) + " layer " + std::to_string(layer) +
                                  " token " + std::to_string(token) + ": " + std::to_string(samples.size()) +
                                  " samples, need " + std::to_string(need) + " for training");
          continue;
        }
        jobs.push_back({{site, layer, token}});
      }
    }
  }

  struct Result {
    std::vector<GridCell> cells;
    std::optional<ClassProbe> probe;
    std::vector<RegProbe> regs;
    std::string warning;
  };
  std::vector<Result> results(jobs.size());
  auto run = [&](std::size_t j) {
    const Provenance prov = jobs[j].prov;
    Result& r = results[j];
    try {
      const Matrix xtr = gather(samples, split.train, prov.site, prov.layer, prov.token);
      const Matrix xte = gather(samples, split.test, prov.site, prov.layer, prov.token);
      const std::uint64_t cell_seed =
          derive_seed(s.seed, (static_cast<std::uint64_t>(prov.site) << 40) ^ (std::uint64_t{prov.layer} << 16) ^
                                  static_cast<std::uint32_t>(prov.token));
      GridCell base{prov.site, prov.layer, prov.token, "accuracy", 0, split.test.size(), 0, 0};
      if (s.kind == ProbeKind::kAppraisal) {
        for (std::size_t a : appraisals) {
          std::vector<double> y_tr, y_te;
          for (auto i : split.train) y_tr.push_back(samples[i].appraisals.at(a));
          for (auto i : split.test) y_te.push_back(samples[i].appraisals.at(a));
          auto p = fit_appraisal_probe(xtr, y_tr, s.ridge_lambda, true);
          p.appraisal = appraisal_name(a);
          p.provenance = prov;
          GridCell c = base;
          c.metric = "r2:" + p.appraisal;
          c.value = c.ci_low = c.ci_high = eval_r2(p, xte, y_te);
          r.cells.push_back(c);
          if (s.keep_probes) r.regs.push_back(std::move(p));
        }
        return;
      }
      std::vector<int> pred;
      if (s.kind == ProbeKind::kLinear) {
        auto p = fit_emotion_probe(xtr, ytr, s.classes, s.lambda, cell_seed);
        p.provenance = prov;
        pred = p.predict(xte);
        if (s.keep_probes) r.probe = std::move(p);
      } else {
        auto p = fit_mlp_probe(xtr, ytr, s.classes, cell_seed);
        p.provenance = prov;
        pred = p.predict(xte);
      }
      std::vector<double> hit(yte.size());
      for (std::size_t i = 0; i < yte.size(); ++i) hit[i] = pred[i] == yte[i] ? 1.0 : 0.0;
      const auto est = bootstrap_mean(hit, derive_seed(cell_seed, 1), s.bootstrap);
      base.value = est.value;
      base.ci_low = est.ci_low;
      base.ci_high = est.ci_high;
      r.cells.push_back(base);
    } catch (const DegenerateError& e) {
      r.warning = std::string("skipped ") + site_name(prov.site) + " layer " + std::to_string(prov.layer) + ": " +
                  e.what();
    }
  };

  const unsigned workers = std::max(1u, std::min<unsigned>(s.jobs, static_cast<unsigned>(jobs.size())));
  if (workers <= 1) {
    for (std::size_t j = 0; j < jobs.size(); ++j) run(j);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t j = w; j < jobs.size(); j += workers) run(j);
      });
    for (auto& t : pool) t.join();
  }

  for (auto& r : results) {
    for (auto& c : r.cells) grid.cells.push_back(c);
    if (!r.warning.empty()) grid.warnings.push_back(r.warning);
    if (bundle) {
      if (r.probe) bundle->classifiers[r.probe->provenance] = std::move(*r.probe);
      for (auto& p : r.regs) bundle->regressors[{p.provenance, p.appraisal}] = std::move(p);
    }
  }
  if (bundle) bundle->seed = s.seed;
  return grid;
}

// Layer with the best accuracy for (site, token); ties prefer the earlier layer.
inline std::uint32_t best_layer(const ProbeGrid& g, Site site, std::int32_t token = -1) {
  const GridCell* best = nullptr;
  for (const auto& c : g.cells)
    if (c.site == site && c.token == token && c.metric == "accuracy" && (!best || c.value > best->value)) best = &c;
  if (!best) throw DataError("best_layer: no accuracy cells for site");
  return best->layer;
}

// Earliest layer whose accuracy is within `margin` of the final layer's.
inline std::uint32_t saturation_layer(const ProbeGrid& g, Site site, std::int32_t token = -1, double margin = 0.03) {
  std::map<std::uint32_t, double> acc;
  for (const auto& c : g.cells)
    if (c.site == site && c.token == token && c.metric == "accuracy") acc[c.layer] = c.value;
  if (acc.empty()) throw DataError("saturation_layer: no accuracy cells for site");
  const double final_acc = acc.rbegin()->second;
  for (const auto& [layer, value] : acc)
    if (value >= final_acc - margin) return layer;
  return acc.rbegin()->first;
}

// ---------------------------------------------------------------------------
// Probe bundle file (.empb), little-endian:
//   "EMPB", u32 version, provenance header (u32-length model name, u64 seed,
//   label table), u32 classifier count, u32 regressor count, then each probe:
//   classifier: u8 site, u32 layer, i32 token, u32 d, u32 C, f64 lambda,
//               f64 W[d][C], f64 b[C], f64 mean[d], f64 scale[d]
//   regressor:  u8 site, u32 layer, i32 token, u32-length appraisal name,
//               u32 d, f64 lambda, f64 v[d], f64 b

inline constexpr std::uint32_t kBundleVersion = 1;

inline void save_bundle(const ProbeBundle& bundle, const std::string& path) {
  detail::ByteWriter w;
  for (char c : std::string("EMPB")) w.put<char>(c);
  w.put<std::uint32_t>(kBundleVersion);
  w.put_string(bundle.model_name);
  w.put<std::uint64_t>(bundle.seed);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(bundle.labels.size()));
  for (const auto& l : bundle.labels) w.put_string(l);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(bundle.classifiers.size()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(bundle.regressors.size()));
  auto put_prov = [&](const Provenance& p) {
    w.put<std::uint8_t>(static_cast<std::uint8_t>(p.site));
    w.put<std::uint32_t>(p.layer);
    w.put<std::int32_t>(p.token);
  };
  for (const auto& [prov, p] : bundle.classifiers) {
    put_prov(prov);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.dim()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.classes));
    w.put<double>(p.lambda);
    for (double v : p.W.data()) w.put<double>(v);
    for (double v : p.b) w.put<double>(v);
    for (double v : p.standardizer.mean) w.put<double>(v);
    for (double v : p.standardizer.scale) w.put<double>(v);
  }
  for (const auto& [key, p] : bundle.regressors) {
    put_prov(key.first);
    w.put_string(key.second);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.v.size()));
    w.put<double>(p.lambda);
    for (double v : p.v) w.put<double>(v);
    w.put<double>(p.b);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.size()));
}

inline ProbeBundle load_bundle(const std::string& path) {
  const auto buf = read_file_bytes(path);
  if (buf.size() < 8 || std::memcmp(buf.data(), "EMPB", 4) != 0) throw FormatError("probe bundle: bad magic");
  detail::ByteReader r(buf, 4, buf.size());
  if (r.get<std::uint32_t>("version") != kBundleVersion) throw FormatError("probe bundle: unsupported version");
  ProbeBundle b;
  b.model_name = r.get_string("model name");
  b.seed = r.get<std::uint64_t>("seed");
  const auto n_labels = r.get<std::uint32_t>("label count");
  for (std::uint32_t i = 0; i < n_labels; ++i) b.labels.push_back(r.get_string("label"));
  const auto n_cls = r.get<std::uint32_t>("classifier count");
  const auto n_reg = r.get<std::uint32_t>("regressor count");
  auto get_prov = [&] {
    Provenance p;
    const auto site = r.get<std::uint8_t>("site");
    if (site > 2) throw FormatError("probe bundle: bad site");
    p.site = static_cast<Site>(site);
    p.layer = r.get<std::uint32_t>("layer");
    p.token = r.get<std::int32_t>("token");
    return p;
  };
  auto get_doubles = [&](std::size_t n, const char* what) {
    if (n > buf.size()) throw FormatError(std::string("probe bundle: implausible size for ") + what);
    std::vector<double> v(n);
    for (auto& x : v) {
      x = r.get<double>(what);
      if (!std::isfinite(x)) throw FormatError(std::string("probe bundle: non-finite ") + what);
    }
    return v;
  };
  for (std::uint32_t i = 0; i < n_cls; ++i) {
    ClassProbe p;
    p.provenance = get_prov();
    const auto d = r.get<std::uint32_t>("dim");
    p.classes = r.get<std::uint32_t>("classes");
    p.lambda = r.get<double>("lambda");
    p.W = Matrix(d, p.classes, get_doubles(std::size_t{d} * p.classes, "W"));
    p.b = get_doubles(p.classes, "b");
    p.standardizer.mean = get_doubles(d, "mean");
    p.standardizer.scale = get_doubles(d, "scale");
    b.classifiers[p.provenance] = std::move(p);
  }
  for (std::uint32_t i = 0; i < n_reg; ++i) {
    RegProbe p;
    p.provenance = get_prov();
    p.appraisal = r.get_string("appraisal");
    const auto d = r.get<std::uint32_t>("dim");
    p.lambda = r.get<double>("lambda");
    p.v = Vector(get_doubles(d, "v"));
    p.b = r.get<double>("b");
    b.regressors[{p.provenance, p.appraisal}] = std::move(p);
  }
  if (r.pos() != buf.size()) throw FormatError("probe bundle: trailing bytes");
  return b;
}

}  // namespace emoprobe
