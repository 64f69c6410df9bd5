#pragma once

// Toy decoder-only transformer: learned absolute positions, pre-norm RMSNorm,
// causal multi-head attention, SiLU-gated FFN, unembedding tied to the token
// embedding. Per layer l and token t:
//
//   a = MHSA(rmsnorm(h_prev))_t
//   m = FFN(rmsnorm(h_prev + a))_t
//   h = h_prev + a + m
//
// a and m are captured (and edited) as the residual contributions, so the
// additive identity holds exactly on every record.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "emoprobe/corpus.hpp"
#include "emoprobe/errors.hpp"
#include "emoprobe/linalg.hpp"

namespace emoprobe {

enum class Site : std::uint8_t { kMhsa = 0, kFfn = 1, kHidden = 2, kAttention = 3 };

inline const char* site_name(Site s) {
  switch (s) {
    case Site::kMhsa: return "mhsa";
    case Site::kFfn: return "ffn";
    case Site::kHidden: return "hidden";
    case Site::kAttention: return "attention";
  }
  return "?";
}

inline Site parse_site(const std::string& s) {
  if (s == "mhsa" || s == "a") return Site::kMhsa;
  if (s == "ffn" || s == "m") return Site::kFfn;
  if (s == "hidden" || s == "h") return Site::kHidden;
  if (s == "attention") return Site::kAttention;
  throw PreconditionError("unknown site '" + s + "'");
}

struct ModelConfig {
  std::uint32_t layers = 8;
  std::uint32_t hidden = 128;
  std::uint32_t heads = 4;
  std::uint32_t ffn = 512;
  std::uint32_t vocab = 0;
  std::uint32_t max_seq = 96;
  float norm_eps = 1e-5f;

  std::uint32_t head_dim() const { return hidden / heads; }

  void validate() const {
    if (layers < 1) throw PreconditionError("config: layers must be >= 1");
    if (hidden == 0 || heads == 0 || hidden % heads != 0)
      throw PreconditionError("config: hidden size must be a positive multiple of heads");
    if (ffn == 0 || vocab == 0 || max_seq == 0) throw PreconditionError("config: zero-sized dimension");
    if (!(norm_eps > 0.0f)) throw PreconditionError("config: norm_eps must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Matrices are row-major with shape (out, in): y = W x.
template <class T>
struct BasicLayerWeights {
  std::vector<T> attn_gain, wq, wk, wv, wo;
  std::vector<T> ffn_gain, w_gate, w_up, w_down;
};

template <class T>
struct BasicWeights {
  ModelConfig config;
  std::vector<T> tok_emb;  // vocab x d
  std::vector<T> pos_emb;  // max_seq x d
  std::vector<BasicLayerWeights<T>> layers;
  std::vector<T> final_gain;

  static BasicWeights zeros(const ModelConfig& c) {
    c.validate();
    BasicWeights w;
    w.config = c;
    const std::size_t d = c.hidden, f = c.ffn;
    w.tok_emb.assign(std::size_t{c.vocab} * d, T(0));
    w.pos_emb.assign(std::size_t{c.max_seq} * d, T(0));
    w.layers.resize(c.layers);
    for (auto& l : w.layers) {
      l.attn_gain.assign(d, T(0));
      l.wq.assign(d * d, T(0));
      l.wk.assign(d * d, T(0));
      l.wv.assign(d * d, T(0));
      l.wo.assign(d * d, T(0));
      l.ffn_gain.assign(d, T(0));
      l.w_gate.assign(f * d, T(0));
      l.w_up.assign(f * d, T(0));
      l.w_down.assign(d * f, T(0));
    }
    w.final_gain.assign(d, T(0));
    return w;
  }

  // Canonical tensor order; shared by the weight file, the optimizer and tests.
  template <class F>
  void for_each_tensor(F&& f) {
    f("tok_emb", tok_emb);
    f("pos_emb", pos_emb);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto& l = layers[i];
      const std::string p = "layer" + std::to_string(i + 1) + ".";
      f(p + "attn_gain", l.attn_gain);
      f(p + "wq", l.wq);
      f(p + "wk", l.wk);
      f(p + "wv", l.wv);
      f(p + "wo", l.wo);
      f(p + "ffn_gain", l.ffn_gain);
      f(p + "w_gate", l.w_gate);
      f(p + "w_up", l.w_up);
      f(p + "w_down", l.w_down);
    }
    f("final_gain", final_gain);
  }

  template <class F>
  void for_each_tensor(F&& f) const {
    const_cast<BasicWeights*>(this)->for_each_tensor(
        [&](const std::string& name, std::vector<T>& t) { f(name, static_cast<const std::vector<T>&>(t)); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_tensor([&](const std::string&, const std::vector<T>& t) { n += t.size(); });
    return n;
  }

  template <class U>
  BasicWeights<U> cast() const {
    BasicWeights<U> out = BasicWeights<U>::zeros(config);
    std::vector<const std::vector<T>*> src;
    for_each_tensor([&](const std::string&, const std::vector<T>& t) { src.push_back(&t); });
    std::size_t i = 0;
    out.for_each_tensor([&](const std::string&, std::vector<U>& t) {
      for (std::size_t j = 0; j < t.size(); ++j) t[j] = static_cast<U>((*src[i])[j]);
      ++i;
    });
    return out;
  }

  friend bool operator==(const BasicWeights& a, const BasicWeights& b) {
    if (!(a.config == b.config)) return false;
    std::vector<const std::vector<T>*> ta;
    a.for_each_tensor([&](const std::string&, const std::vector<T>& t) { ta.push_back(&t); });
    std::size_t i = 0;
    bool eq = true;
    b.for_each_tensor([&](const std::string&, const std::vector<T>& t) {
      eq = eq && std::memcmp(ta[i]->data(), t.data(), t.size() * sizeof(T)) == 0 && ta[i]->size() == t.size();
      ++i;
    });
    return eq;
  }
};

using Weights = BasicWeights<float>;

// N(0, 0.02) matrices, residual output projections scaled by 1/sqrt(2L), unit gains.
inline Weights init_weights(const ModelConfig& c, std::uint64_t seed) {
  Weights w = Weights::zeros(c);
  Rng rng(seed);
  const double std_base = 1.0 / std::sqrt(static_cast<double>(c.hidden));
  const double std_out = std_base / std::sqrt(2.0 * c.layers);
  w.for_each_tensor([&](const std::string& name, std::vector<float>& t) {
    const bool gain = name.ends_with("gain");
    const bool out_proj = name.ends_with(".wo") || name.ends_with(".w_down");
    for (auto& x : t) x = gain ? 1.0f : static_cast<float>((out_proj ? std_out : std_base) * rng.normal());
  });
  return w;
}

// ---------------------------------------------------------------------------
// Dense kernels. omp simd reductions keep the summation order fixed per build.

namespace kernel {

template <class T>
inline T dot_row(const T* x, const T* y, std::size_t k) {
  T acc = T(0);
#pragma omp simd reduction(+ : acc)
  for (std::size_t p = 0; p < k; ++p) acc += x[p] * y[p];
  return acc;
}

// C(n x m) = A(n x k) · B(m x k)ᵀ, in 4x4 register tiles. Each output is a
// single simd reduction over k, so a given (i, j) always sums the same way.
template <class T>
inline void matmul_nt(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  const std::size_t n4 = n - n % 4, m4 = m - m % 4;
  std::size_t i = 0;
  for (; i < n4; i += 4) {
    const T *a0 = a + i * k, *a1 = a0 + k, *a2 = a1 + k, *a3 = a2 + k;
    std::size_t j = 0;
    for (; j < m4; j += 4) {
      const T *b0 = b + j * k, *b1 = b0 + k, *b2 = b1 + k, *b3 = b2 + k;
      T c00 = 0, c01 = 0, c02 = 0, c03 = 0, c10 = 0, c11 = 0, c12 = 0, c13 = 0;
      T c20 = 0, c21 = 0, c22 = 0, c23 = 0, c30 = 0, c31 = 0, c32 = 0, c33 = 0;
#pragma omp simd reduction(+ : c00, c01, c02, c03, c10, c11, c12, c13, c20, c21, c22, c23, c30, c31, c32, c33)
      for (std::size_t p = 0; p < k; ++p) {
        c00 += a0[p] * b0[p]; c01 += a0[p] * b1[p]; c02 += a0[p] * b2[p]; c03 += a0[p] * b3[p];
        c10 += a1[p] * b0[p]; c11 += a1[p] * b1[p]; c12 += a1[p] * b2[p]; c13 += a1[p] * b3[p];
        c20 += a2[p] * b0[p]; c21 += a2[p] * b1[p]; c22 += a2[p] * b2[p]; c23 += a2[p] * b3[p];
        c30 += a3[p] * b0[p]; c31 += a3[p] * b1[p]; c32 += a3[p] * b2[p]; c33 += a3[p] * b3[p];
      }
      T* ci = c + i * m + j;
      ci[0] = c00; ci[1] = c01; ci[2] = c02; ci[3] = c03; ci += m;
      ci[0] = c10; ci[1] = c11; ci[2] = c12; ci[3] = c13; ci += m;
      ci[0] = c20; ci[1] = c21; ci[2] = c22; ci[3] = c23; ci += m;
      ci[0] = c30; ci[1] = c31; ci[2] = c32; ci[3] = c33;
    }
    for (; j < m; ++j)
      for (std::size_t r = 0; r < 4; ++r) c[(i + r) * m + j] = dot_row(a + (i + r) * k, b + j * k, k);
  }
  for (; i < n; ++i) {
    const T* ai = a + i * k;
    std::size_t j = 0;
    for (; j < m4; j += 4) {
      const T *b0 = b + j * k, *b1 = b0 + k, *b2 = b1 + k, *b3 = b2 + k;
      T c0 = 0, c1 = 0, c2 = 0, c3 = 0;
#pragma omp simd reduction(+ : c0, c1, c2, c3)
      for (std::size_t p = 0; p < k; ++p) {
        c0 += ai[p] * b0[p]; c1 += ai[p] * b1[p]; c2 += ai[p] * b2[p]; c3 += ai[p] * b3[p];
      }
      T* ci = c + i * m + j;
      ci[0] = c0; ci[1] = c1; ci[2] = c2; ci[3] = c3;
    }
    for (; j < m; ++j) c[i * m + j] = dot_row(ai, b + j * k, k);
  }
}

// C(n x m) += A(n x k) · B(k x m)
template <class T>
inline void matmul_nn_acc(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    T* ci = c + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      if (aip == T(0)) continue;
      const T* bp = b + p * m;
#pragma omp simd
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C(n x m) += A(k x n)ᵀ · B(k x m)
template <class T>
inline void matmul_tn_acc(const T* a, const T* b, T* c, std::size_t k, std::size_t n, std::size_t m) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* ap = a + p * n;
    const T* bp = b + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const T api = ap[i];
      if (api == T(0)) continue;
      T* ci = c + i * m;
#pragma omp simd
      for (std::size_t j = 0; j < m; ++j) ci[j] += api * bp[j];
    }
  }
}

// y = g ⊙ x / sqrt(mean(x²) + eps); returns the inverse RMS.
template <class T>
inline T rmsnorm_row(const T* x, const T* g, T* y, std::size_t d, T eps) {
  T ms = T(0);
#pragma omp simd reduction(+ : ms)
  for (std::size_t i = 0; i < d; ++i) ms += x[i] * x[i];
  const T inv = T(1) / std::sqrt(ms / static_cast<T>(d) + eps);
  for (std::size_t i = 0; i < d; ++i) y[i] = g[i] * x[i] * inv;
  return inv;
}

template <class T>
inline T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Activation capture

// Layer index conventions: hidden spans 0..L (0 = embedding + position);
// mhsa, ffn and attention span 1..L.
struct ActivationRecord {
  std::uint32_t layers = 0;
  std::uint32_t hidden_size = 0;
  std::uint32_t heads = 0;
  std::uint32_t seq_len = 0;
  TokenSeq tokens;
  std::vector<std::uint32_t> positions;  // captured absolute positions, ascending
  std::vector<float> mhsa;               // [layer-1][capture][d]
  std::vector<float> ffn;                // [layer-1][capture][d]
  std::vector<float> hidden;             // [layer][capture][d]
  std::vector<float> attention;          // [layer-1][head][seq_len], last-token rows
  bool has_attention = false;

  std::size_t capture_count() const { return positions.size(); }

  std::size_t capture_index(std::int64_t position) const {
    const std::int64_t pos = position < 0 ? static_cast<std::int64_t>(seq_len) + position : position;
    auto it = std::find(positions.begin(), positions.end(), static_cast<std::uint32_t>(pos));
    if (pos < 0 || it == positions.end())
      throw DataError("token position " + std::to_string(position) + " was not captured");
    return static_cast<std::size_t>(it - positions.begin());
  }

  // Activation at (site, layer, position); negative positions count from the end.
  std::span<const float> at(Site site, std::uint32_t layer, std::int64_t position) const {
    const std::size_t ci = capture_index(position);
    const std::size_t d = hidden_size, k = positions.size();
    switch (site) {
      case Site::kMhsa:
      case Site::kFfn: {
        if (layer < 1 || layer > layers) throw DataError("layer out of range for site");
        const auto& buf = site == Site::kMhsa ? mhsa : ffn;
        if (buf.size() < std::size_t{layers} * k * d) throw DataError(std::string(site_name(site)) + " was not captured");
        return {buf.data() + ((layer - 1) * k + ci) * d, d};
      }
      case Site::kHidden:
        if (layer > layers) throw DataError("layer out of range for hidden site");
        if (hidden.size() < std::size_t{layers + 1} * k * d) throw DataError("hidden was not captured");
        return {hidden.data() + (layer * k + ci) * d, d};
      case Site::kAttention: break;
    }
    throw DataError("attention is not a vector site; use attention_row");
  }

  std::span<const float> attention_row(std::uint32_t layer, std::uint32_t head) const {
    if (!has_attention) throw DataError("attention was not captured");
    if (layer < 1 || layer > layers || head >= heads) throw DataError("attention index out of range");
    return {attention.data() + ((layer - 1) * heads + head) * seq_len, seq_len};
  }

  Vector vector_at(Site site, std::uint32_t layer, std::int64_t position) const {
    const auto s = at(site, layer, position);
    return Vector(std::vector<double>(s.begin(), s.end()));
  }
};

// ---------------------------------------------------------------------------
// Edit plans

enum class EditAction { kReplace, kAdd, kZero, kRandomNormMatched };

struct Edit {
  Site site = Site::kHidden;
  std::vector<std::uint32_t> layers;
  std::vector<std::int64_t> tokens{-1};  // negative = from the end
  EditAction action = EditAction::kZero;
  std::vector<float> vector;             // replace / add payload
  std::uint64_t seed = 0;                // random_norm_matched
};

struct EditPlan {
  std::vector<Edit> edits;
  bool empty() const { return edits.empty(); }

  void validate(const ModelConfig& c, std::size_t seq_len) const {
    for (std::size_t i = 0; i < edits.size(); ++i) {
      const auto& e = edits[i];
      const std::string where = "edit " + std::to_string(i) + ": ";
      if (e.site == Site::kAttention) throw PlanError(where + "attention weights are not editable");
      const std::uint32_t lo = e.site == Site::kHidden ? 0 : 1;
      for (auto l : e.layers)
        if (l < lo || l > c.layers)
          throw PlanError(where + "layer " + std::to_string(l) + " invalid for site " + site_name(e.site));
      for (auto t : e.tokens) {
        const auto pos = t < 0 ? static_cast<std::int64_t>(seq_len) + t : t;
        if (pos < 0 || pos >= static_cast<std::int64_t>(seq_len))
          throw PlanError(where + "token " + std::to_string(t) + " outside sequence");
      }
      if ((e.action == EditAction::kReplace || e.action == EditAction::kAdd) && e.vector.size() != c.hidden)
        throw PlanError(where + "vector dimension " + std::to_string(e.vector.size()) + " != " +
                        std::to_string(c.hidden));
      for (float x : e.vector)
        if (!std::isfinite(x)) throw PlanError(where + "non-finite vector entry");
    }
  }

  // True when every edit touches only the final position.
  bool last_token_only(std::size_t seq_len) const {
    for (const auto& e : edits)
      for (auto t : e.tokens) {
        const auto pos = t < 0 ? static_cast<std::int64_t>(seq_len) + t : t;
        if (pos != static_cast<std::int64_t>(seq_len) - 1) return false;
      }
    return true;
  }
};

// Norm-matched Gaussian replacement: (‖x‖/‖r‖)·r. A zero input stays zero.
inline void random_norm_matched(std::span<float> x, std::uint64_t seed) {
  Rng rng(seed);
  const Vector r = gaussian_vector(rng, x.size());
  double nx = 0.0;
  for (float v : x) nx += static_cast<double>(v) * v;
  nx = std::sqrt(nx);
  const double scale = nx / norm(r);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(scale * r[i]);
}

namespace detail {

inline void apply_edits(const EditPlan* plan, Site site, std::uint32_t layer, std::size_t pos,
                        std::size_t seq_len, std::span<float> x) {
  if (!plan) return;
  for (const auto& e : plan->edits) {
    if (e.site != site) continue;
    if (std::find(e.layers.begin(), e.layers.end(), layer) == e.layers.end()) continue;
    bool hit = false;
    for (auto t : e.tokens) {
      const auto p = t < 0 ? static_cast<std::int64_t>(seq_len) + t : t;
      hit = hit || p == static_cast<std::int64_t>(pos);
    }
    if (!hit) continue;
    switch (e.action) {
      case EditAction::kReplace: std::copy(e.vector.begin(), e.vector.end(), x.begin()); break;
      case EditAction::kAdd:
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += e.vector[i];
        break;
      case EditAction::kZero: std::fill(x.begin(), x.end(), 0.0f); break;
      case EditAction::kRandomNormMatched:
        random_norm_matched(x, derive_seed(e.seed, std::uint64_t{layer} * 1000003ULL + pos));
        break;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward pass

struct ForwardOptions {
  std::size_t capture_window = 5;  // last k tokens
  bool capture_all = false;        // every position instead of the window
  bool capture_attention = true;
};

struct ForwardResult {
  std::vector<float> logits;  // vocabulary logits at the last token
  ActivationRecord record;
};

// Per-layer keys/values plus the final-layer inputs of a clean run; lets edits
// confined to the last token re-run only that position.
struct KvCache {
  std::vector<std::vector<float>> keys, values;  // [layer][pos][d]
  std::vector<float> hidden0;                    // embedding rows [pos][d]
};

namespace detail {

inline void check_tokens(const ModelConfig& c, const TokenSeq& tokens) {
  if (tokens.empty()) throw LengthError("forward: empty token sequence");
  if (tokens.size() > c.max_seq)
    throw LengthError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max " +
                      std::to_string(c.max_seq));
  for (auto t : tokens)
    if (t >= c.vocab) throw VocabularyError("forward: token id " + std::to_string(t) + " >= vocab");
}

// Runs positions [start, n). `cache` must hold keys/values for [0, start) and
// is extended to n when `extend_cache` is set.
inline ForwardResult run(const Weights& w, const TokenSeq& tokens, const ForwardOptions& opt,
                         const EditPlan* plan, KvCache& cache, std::size_t start, bool extend_cache) {
  const auto& c = w.config;
  check_tokens(c, tokens);
  if (plan) plan->validate(c, tokens.size());
  const std::size_t n = tokens.size(), d = c.hidden, f = c.ffn, L = c.layers, H = c.heads, dh = c.head_dim();
  const std::size_t rows = n - start;
  const float eps = c.norm_eps;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  ForwardResult out;
  auto& rec = out.record;
  rec.layers = c.layers;
  rec.hidden_size = c.hidden;
  rec.heads = c.heads;
  rec.seq_len = static_cast<std::uint32_t>(n);
  rec.tokens = tokens;
  const std::size_t first_cap = opt.capture_all ? 0 : (n > opt.capture_window ? n - opt.capture_window : 0);
  for (std::size_t p = std::max(first_cap, start); p < n; ++p) rec.positions.push_back(static_cast<std::uint32_t>(p));
  const std::size_t k = rec.positions.size();
  rec.mhsa.assign(L * k * d, 0.0f);
  rec.ffn.assign(L * k * d, 0.0f);
  rec.hidden.assign((L + 1) * k * d, 0.0f);
  rec.has_attention = opt.capture_attention;
  if (opt.capture_attention) rec.attention.assign(L * H * n, 0.0f);

  auto capture = [&](std::vector<float>& buf, std::size_t layer_slot, std::size_t pos, const float* src) {
    if (pos < rec.positions.front()) return;
    const std::size_t ci = pos - rec.positions.front();
    std::copy(src, src + d, buf.begin() + (layer_slot * k + ci) * d);
  };

  if (cache.keys.size() != L) {
    cache.keys.assign(L, {});
    cache.values.assign(L, {});
  }

  std::vector<float> h(rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t p = start + r;
    const float* te = w.tok_emb.data() + std::size_t{tokens[p]} * d;
    const float* pe = w.pos_emb.data() + (w.config.max_seq - n + p) * d;
    for (std::size_t i = 0; i < d; ++i) h[r * d + i] = te[i] + pe[i];
    apply_edits(plan, Site::kHidden, 0, p, n, {h.data() + r * d, d});
    if (k) capture(rec.hidden, 0, p, h.data() + r * d);
  }

  std::vector<float> x(rows * d), q(rows * d), kk(rows * d), vv(rows * d), o(rows * d), a(rows * d);
  std::vector<float> g(rows * f), u(rows * f), mm(rows * d), scores(n);
  for (std::size_t l = 0; l < L; ++l) {
    const auto& lw = w.layers[l];
    for (std::size_t r = 0; r < rows; ++r) kernel::rmsnorm_row(&h[r * d], lw.attn_gain.data(), &x[r * d], d, eps);
    kernel::matmul_nt(x.data(), lw.wq.data(), q.data(), rows, d, d);
    kernel::matmul_nt(x.data(), lw.wk.data(), kk.data(), rows, d, d);
    kernel::matmul_nt(x.data(), lw.wv.data(), vv.data(), rows, d, d);

    auto& kc = cache.keys[l];
    auto& vc = cache.values[l];
    std::vector<float> keys_all, values_all;
    const float* kp;
    const float* vp;
    if (extend_cache || start > 0) {
      kc.resize(start * d);
      vc.resize(start * d);
      kc.insert(kc.end(), kk.begin(), kk.end());
      vc.insert(vc.end(), vv.begin(), vv.end());
      kp = kc.data();
      vp = vc.data();
    } else {
      kp = kk.data();
      vp = vv.data();
    }

    std::fill(o.begin(), o.end(), 0.0f);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t t = start + r;
      for (std::size_t hd = 0; hd < H; ++hd) {
        const float* qr = &q[r * d + hd * dh];
        float mx = -INFINITY;
        for (std::size_t s = 0; s <= t; ++s) {
          const float* ks = kp + s * d + hd * dh;
          float acc = 0.0f;
#pragma omp simd reduction(+ : acc)
          for (std::size_t i = 0; i < dh; ++i) acc += qr[i] * ks[i];
          scores[s] = acc * scale;
          mx = std::max(mx, scores[s]);
        }
        float total = 0.0f;
        for (std::size_t s = 0; s <= t; ++s) {
          scores[s] = std::exp(scores[s] - mx);
          total += scores[s];
        }
        const float inv = 1.0f / total;
        float* orow = &o[r * d + hd * dh];
        for (std::size_t s = 0; s <= t; ++s) {
          const float pw = scores[s] * inv;
          const float* vs = vp + s * d + hd * dh;
          for (std::size_t i = 0; i < dh; ++i) orow[i] += pw * vs[i];
          if (opt.capture_attention && t == n - 1) rec.attention[(l * H + hd) * n + s] = pw;
        }
      }
    }
    kernel::matmul_nt(o.data(), lw.wo.data(), a.data(), rows, d, d);

    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t p = start + r;
      apply_edits(plan, Site::kMhsa, static_cast<std::uint32_t>(l + 1), p, n, {&a[r * d], d});
      if (k) capture(rec.mhsa, l, p, &a[r * d]);
      for (std::size_t i = 0; i < d; ++i) h[r * d + i] += a[r * d + i];
      kernel::rmsnorm_row(&h[r * d], lw.ffn_gain.data(), &x[r * d], d, eps);
    }
    kernel::matmul_nt(x.data(), lw.w_gate.data(), g.data(), rows, d, f);
    kernel::matmul_nt(x.data(), lw.w_up.data(), u.data(), rows, d, f);
    for (std::size_t i = 0; i < rows * f; ++i) g[i] = g[i] * kernel::sigmoid(g[i]) * u[i];
    kernel::matmul_nt(g.data(), lw.w_down.data(), mm.data(), rows, f, d);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t p = start + r;
      apply_edits(plan, Site::kFfn, static_cast<std::uint32_t>(l + 1), p, n, {&mm[r * d], d});
      if (k) capture(rec.ffn, l, p, &mm[r * d]);
      for (std::size_t i = 0; i < d; ++i) h[r * d + i] += mm[r * d + i];
      apply_edits(plan, Site::kHidden, static_cast<std::uint32_t>(l + 1), p, n, {&h[r * d], d});
      if (k) capture(rec.hidden, l + 1, p, &h[r * d]);
    }
  }

  std::vector<float> y(d);
  kernel::rmsnorm_row(&h[(rows - 1) * d], w.final_gain.data(), y.data(), d, eps);
  out.logits.resize(c.vocab);
  kernel::matmul_nt(y.data(), w.tok_emb.data(), out.logits.data(), 1, d, c.vocab);
  return out;
}

}  // namespace detail

inline ForwardResult forward(const Weights& w, const TokenSeq& tokens, const ForwardOptions& opt = {}) {
  KvCache scratch;
  return detail::run(w, tokens, opt, nullptr, scratch, 0, false);
}

inline ForwardResult forward_with_edits(const Weights& w, const TokenSeq& tokens, const EditPlan& plan,
                                        const ForwardOptions& opt = {}) {
  KvCache scratch;
  return detail::run(w, tokens, opt, plan.empty() ? nullptr : &plan, scratch, 0, false);
}

// A clean run whose cache allows cheap re-evaluation under last-token edits.
// Rerunning is equivalent to forward_with_edits on the same tokens.
class CleanRun {
 public:
  CleanRun(const Weights& w, TokenSeq tokens, const ForwardOptions& opt = {})
      : weights_(&w), tokens_(std::move(tokens)), options_(opt) {
    result_ = detail::run(w, tokens_, opt, nullptr, cache_, 0, true);
  }

  const ForwardResult& result() const { return result_; }
  const TokenSeq& tokens() const { return tokens_; }

  ForwardResult rerun(const EditPlan& plan) const {
    if (plan.empty()) return result_;
    if (!plan.last_token_only(tokens_.size())) return forward_with_edits(*weights_, tokens_, plan, options_);
    KvCache cache = cache_;
    ForwardOptions opt = options_;
    opt.capture_attention = false;
    return detail::run(*weights_, tokens_, opt, &plan, cache, tokens_.size() - 1, false);
  }

 private:
  const Weights* weights_;
  TokenSeq tokens_;
  ForwardOptions options_;
  KvCache cache_;
  ForwardResult result_;
};

// Argmax over the label token set; ties go to the lowest token id. Returns the
// index into `labels`.
inline std::size_t closed_vocab_predict(std::span<const float> logits, std::span<const TokenId> labels) {
  if (labels.empty()) throw PreconditionError("closed_vocab_predict: empty label set");
  std::size_t best = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= logits.size()) throw PreconditionError("closed_vocab_predict: label id outside vocabulary");
    const float li = logits[labels[i]], lb = logits[labels[best]];
    if (li > lb || (li == lb && labels[i] < labels[best])) best = i;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Weight files: "EMWT", u32 version, config header, then f32 tensors in
// for_each_tensor order, all little-endian.

inline constexpr std::uint32_t kWeightsVersion = 1;

namespace detail {

template <class T>
inline void put(std::ostream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
inline T get(std::istream& in, const char* what) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T)))
    throw FormatError(std::string("truncated file while reading ") + what);
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace detail

inline void save_weights(const Weights& w, const std::string& path, std::uint64_t vocab_fingerprint = 0) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out.write("EMWT", 4);
  detail::put<std::uint32_t>(out, kWeightsVersion);
  const auto& c = w.config;
  for (std::uint32_t v : {c.layers, c.hidden, c.heads, c.ffn, c.vocab, c.max_seq}) detail::put(out, v);
  detail::put(out, c.norm_eps);
  detail::put(out, vocab_fingerprint);
  w.for_each_tensor([&](const std::string&, const std::vector<float>& t) {
    detail::put<std::uint64_t>(out, t.size());
    for (float x : t) detail::put(out, x);
  });
  if (!out) throw FormatError("write failed for '" + path + "'");
}

struct LoadedWeights {
  Weights weights;
  std::uint64_t vocab_fingerprint = 0;
};

inline LoadedWeights load_weights_with_binding(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open weights '" + path + "'");
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "EMWT", 4) != 0) throw FormatError("weights: bad magic");
  const auto version = detail::get<std::uint32_t>(in, "version");
  if (version != kWeightsVersion) throw FormatError("weights: unsupported version " + std::to_string(version));
  ModelConfig c;
  c.layers = detail::get<std::uint32_t>(in, "layers");
  c.hidden = detail::get<std::uint32_t>(in, "hidden");
  c.heads = detail::get<std::uint32_t>(in, "heads");
  c.ffn = detail::get<std::uint32_t>(in, "ffn");
  c.vocab = detail::get<std::uint32_t>(in, "vocab");
  c.max_seq = detail::get<std::uint32_t>(in, "max_seq");
  c.norm_eps = detail::get<float>(in, "norm_eps");
  try {
    c.validate();
  } catch (const PreconditionError& e) {
    throw FormatError(std::string("weights: invalid config header: ") + e.what());
  }
  if (c.layers > 4096 || c.hidden > 65536 || c.ffn > 1u << 20 || c.vocab > 1u << 24 || c.max_seq > 1u << 20)
    throw FormatError("weights: implausible config header");
  LoadedWeights lw;
  lw.vocab_fingerprint = detail::get<std::uint64_t>(in, "vocab fingerprint");
  lw.weights = Weights::zeros(c);
  lw.weights.for_each_tensor([&](const std::string& name, std::vector<float>& t) {
    const auto count = detail::get<std::uint64_t>(in, name.c_str());
    if (count != t.size())
      throw FormatError("weights: tensor " + name + " has " + std::to_string(count) + " values, config implies " +
                        std::to_string(t.size()));
    for (auto& x : t) {
      x = detail::get<float>(in, name.c_str());
      if (!std::isfinite(x)) throw FormatError("weights: non-finite value in " + name);
    }
  });
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("weights: trailing bytes after last tensor");
  return lw;
}

inline Weights load_weights(const std::string& path) { return load_weights_with_binding(path).weights; }

}  // namespace emoprobe
