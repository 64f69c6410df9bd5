#pragma once

// Next-token training of the toy model with a hand-written backward pass and
// Adam. Loss is taken at the answer position by default.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "emoprobe/corpus.hpp"
#include "emoprobe/errors.hpp"
#include "emoprobe/linalg.hpp"
#include "emoprobe/model.hpp"

namespace emoprobe {

struct TrainExample {
  TokenSeq tokens;  // prompt ending at the answer slot
  TokenId target;   // expected next token
};

namespace detail {

template <class T>
struct LayerTape {
  std::vector<T> h_in, inv1, x1, q, k, v, probs, o, h_mid, inv2, x2, g, u, z;
};

template <class T>
inline void rmsnorm_backward_row(const T* x, const T* gain, T inv, const T* dy, T* dx_acc, T* dgain_acc,
                                 std::size_t d) {
  T dot = T(0);
  for (std::size_t i = 0; i < d; ++i) dot += dy[i] * gain[i] * x[i];
  const T coef = inv * inv * inv * dot / static_cast<T>(d);
  for (std::size_t i = 0; i < d; ++i) {
    dx_acc[i] += inv * gain[i] * dy[i] - coef * x[i];
    dgain_acc[i] += dy[i] * x[i] * inv;
  }
}

}  // namespace detail

// Mean cross-entropy over the loss positions. When `grad` is given,
// `grad_scale` × dLoss/dθ is accumulated into it.
template <class T>
T loss_and_grad(const BasicWeights<T>& w, const TrainExample& ex, bool full_sequence,
                BasicWeights<T>* grad = nullptr, T grad_scale = T(1)) {
  const auto& c = w.config;
  detail::check_tokens(c, ex.tokens);
  if (ex.target >= c.vocab) throw VocabularyError("training target outside vocabulary");
  const auto& tok = ex.tokens;
  const std::size_t n = tok.size(), d = c.hidden, f = c.ffn, L = c.layers, H = c.heads, hdim = c.head_dim();
  const T eps = static_cast<T>(c.norm_eps);
  const T scale = T(1) / std::sqrt(static_cast<T>(hdim));

  std::vector<T> h(n * d);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = 0; i < d; ++i) h[t * d + i] = w.tok_emb[tok[t] * d + i] + w.pos_emb[(c.max_seq - n + t) * d + i];

  std::vector<detail::LayerTape<T>> tape(L);
  for (std::size_t l = 0; l < L; ++l) {
    const auto& lw = w.layers[l];
    auto& tp = tape[l];
    tp.h_in = h;
    tp.inv1.resize(n);
    tp.x1.resize(n * d);
    for (std::size_t t = 0; t < n; ++t)
      tp.inv1[t] = kernel::rmsnorm_row(&h[t * d], lw.attn_gain.data(), &tp.x1[t * d], d, eps);
    tp.q.resize(n * d);
    tp.k.resize(n * d);
    tp.v.resize(n * d);
    kernel::matmul_nt(tp.x1.data(), lw.wq.data(), tp.q.data(), n, d, d);
    kernel::matmul_nt(tp.x1.data(), lw.wk.data(), tp.k.data(), n, d, d);
    kernel::matmul_nt(tp.x1.data(), lw.wv.data(), tp.v.data(), n, d, d);
    tp.probs.assign(H * n * n, T(0));
    tp.o.assign(n * d, T(0));
    for (std::size_t hd = 0; hd < H; ++hd) {
      for (std::size_t t = 0; t < n; ++t) {
        T* prow = &tp.probs[(hd * n + t) * n];
        T mx = -INFINITY;
        for (std::size_t s = 0; s <= t; ++s) {
          T acc = T(0);
          for (std::size_t i = 0; i < hdim; ++i) acc += tp.q[t * d + hd * hdim + i] * tp.k[s * d + hd * hdim + i];
          prow[s] = acc * scale;
          mx = std::max(mx, prow[s]);
        }
        T total = T(0);
        for (std::size_t s = 0; s <= t; ++s) {
          prow[s] = std::exp(prow[s] - mx);
          total += prow[s];
        }
        for (std::size_t s = 0; s <= t; ++s) {
          prow[s] /= total;
          for (std::size_t i = 0; i < hdim; ++i) tp.o[t * d + hd * hdim + i] += prow[s] * tp.v[s * d + hd * hdim + i];
        }
      }
    }
    std::vector<T> a(n * d);
    kernel::matmul_nt(tp.o.data(), lw.wo.data(), a.data(), n, d, d);
    for (std::size_t i = 0; i < n * d; ++i) h[i] += a[i];
    tp.h_mid = h;
    tp.inv2.resize(n);
    tp.x2.resize(n * d);
    for (std::size_t t = 0; t < n; ++t)
      tp.inv2[t] = kernel::rmsnorm_row(&h[t * d], lw.ffn_gain.data(), &tp.x2[t * d], d, eps);
    tp.g.resize(n * f);
    tp.u.resize(n * f);
    tp.z.resize(n * f);
    kernel::matmul_nt(tp.x2.data(), lw.w_gate.data(), tp.g.data(), n, d, f);
    kernel::matmul_nt(tp.x2.data(), lw.w_up.data(), tp.u.data(), n, d, f);
    for (std::size_t i = 0; i < n * f; ++i) tp.z[i] = tp.g[i] * kernel::sigmoid(tp.g[i]) * tp.u[i];
    std::vector<T> m(n * d);
    kernel::matmul_nt(tp.z.data(), lw.w_down.data(), m.data(), n, f, d);
    for (std::size_t i = 0; i < n * d; ++i) h[i] += m[i];
  }

  std::vector<std::size_t> positions;
  if (full_sequence)
    for (std::size_t t = 0; t < n; ++t) positions.push_back(t);
  else
    positions.push_back(n - 1);
  const T inv_count = T(1) / static_cast<T>(positions.size());

  T loss = T(0);
  std::vector<T> dh(grad ? n * d : 0, T(0));
  std::vector<T> y(d), logits(c.vocab), dy(d);
  for (auto p : positions) {
    const TokenId target = p + 1 < n ? tok[p + 1] : ex.target;
    const T inv3 = kernel::rmsnorm_row(&h[p * d], w.final_gain.data(), y.data(), d, eps);
    kernel::matmul_nt(y.data(), w.tok_emb.data(), logits.data(), 1, d, c.vocab);
    T mx = -INFINITY;
    for (auto v : logits) mx = std::max(mx, v);
    T total = T(0);
    for (auto& v : logits) {
      v = std::exp(v - mx);
      total += v;
    }
    loss += -std::log(logits[target] / total) * inv_count;
    if (!grad) continue;
    for (auto& v : logits) v /= total;
    logits[target] -= T(1);
    const T s = grad_scale * inv_count;
    for (auto& v : logits) v *= s;
    // tied unembedding
    kernel::matmul_tn_acc(logits.data(), y.data(), grad->tok_emb.data(), 1, c.vocab, d);
    std::fill(dy.begin(), dy.end(), T(0));
    kernel::matmul_nn_acc(logits.data(), w.tok_emb.data(), dy.data(), 1, c.vocab, d);
    detail::rmsnorm_backward_row(&h[p * d], w.final_gain.data(), inv3, dy.data(), &dh[p * d],
                                 grad->final_gain.data(), d);
  }
  if (!std::isfinite(loss)) throw TrainingError("non-finite loss");
  if (!grad) return loss;

  std::vector<T> dz(n * f), dgv(n * f), duv(n * f), dx(n * d), dO(n * d), dq(n * d), dk(n * d), dv(n * d), dp(n);
  for (std::size_t l = L; l-- > 0;) {
    const auto& lw = w.layers[l];
    auto& gl = grad->layers[l];
    const auto& tp = tape[l];
    // FFN: dh is d(h_out); it flows to m and (identity) to h_mid.
    std::fill(dz.begin(), dz.end(), T(0));
    kernel::matmul_nn_acc(dh.data(), lw.w_down.data(), dz.data(), n, d, f);
    kernel::matmul_tn_acc(dh.data(), tp.z.data(), gl.w_down.data(), n, d, f);
    for (std::size_t i = 0; i < n * f; ++i) {
      const T sg = kernel::sigmoid(tp.g[i]);
      const T silu = tp.g[i] * sg;
      dgv[i] = dz[i] * tp.u[i] * sg * (T(1) + tp.g[i] * (T(1) - sg));
      duv[i] = dz[i] * silu;
    }
    std::fill(dx.begin(), dx.end(), T(0));
    kernel::matmul_nn_acc(dgv.data(), lw.w_gate.data(), dx.data(), n, f, d);
    kernel::matmul_nn_acc(duv.data(), lw.w_up.data(), dx.data(), n, f, d);
    kernel::matmul_tn_acc(dgv.data(), tp.x2.data(), gl.w_gate.data(), n, f, d);
    kernel::matmul_tn_acc(duv.data(), tp.x2.data(), gl.w_up.data(), n, f, d);
    for (std::size_t t = 0; t < n; ++t)
      detail::rmsnorm_backward_row(&tp.h_mid[t * d], lw.ffn_gain.data(), tp.inv2[t], &dx[t * d], &dh[t * d],
                                   gl.ffn_gain.data(), d);

    // Attention: dh is now d(h_mid); it flows to a and to h_in.
    std::fill(dO.begin(), dO.end(), T(0));
    kernel::matmul_nn_acc(dh.data(), lw.wo.data(), dO.data(), n, d, d);
    kernel::matmul_tn_acc(dh.data(), tp.o.data(), gl.wo.data(), n, d, d);
    std::fill(dq.begin(), dq.end(), T(0));
    std::fill(dk.begin(), dk.end(), T(0));
    std::fill(dv.begin(), dv.end(), T(0));
    for (std::size_t hd = 0; hd < H; ++hd) {
      const std::size_t off = hd * hdim;
      for (std::size_t t = 0; t < n; ++t) {
        const T* prow = &tp.probs[(hd * n + t) * n];
        const T* dot = &dO[t * d + off];
        T weighted = T(0);
        for (std::size_t s = 0; s <= t; ++s) {
          T acc = T(0);
          for (std::size_t i = 0; i < hdim; ++i) acc += dot[i] * tp.v[s * d + off + i];
          dp[s] = acc;
          weighted += prow[s] * acc;
          for (std::size_t i = 0; i < hdim; ++i) dv[s * d + off + i] += prow[s] * dot[i];
        }
        for (std::size_t s = 0; s <= t; ++s) {
          const T ds = prow[s] * (dp[s] - weighted) * scale;
          if (ds == T(0)) continue;
          for (std::size_t i = 0; i < hdim; ++i) {
            dq[t * d + off + i] += ds * tp.k[s * d + off + i];
            dk[s * d + off + i] += ds * tp.q[t * d + off + i];
          }
        }
      }
    }
    std::fill(dx.begin(), dx.end(), T(0));
    kernel::matmul_nn_acc(dq.data(), lw.wq.data(), dx.data(), n, d, d);
    kernel::matmul_nn_acc(dk.data(), lw.wk.data(), dx.data(), n, d, d);
    kernel::matmul_nn_acc(dv.data(), lw.wv.data(), dx.data(), n, d, d);
    kernel::matmul_tn_acc(dq.data(), tp.x1.data(), gl.wq.data(), n, d, d);
    kernel::matmul_tn_acc(dk.data(), tp.x1.data(), gl.wk.data(), n, d, d);
    kernel::matmul_tn_acc(dv.data(), tp.x1.data(), gl.wv.data(), n, d, d);
    for (std::size_t t = 0; t < n; ++t)
      detail::rmsnorm_backward_row(&tp.h_in[t * d], lw.attn_gain.data(), tp.inv1[t], &dx[t * d], &dh[t * d],
                                   gl.attn_gain.data(), d);
  }
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = 0; i < d; ++i) {
      grad->tok_emb[tok[t] * d + i] += dh[t * d + i];
      grad->pos_emb[(c.max_seq - n + t) * d + i] += dh[t * d + i];
    }
  return loss;
}

// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t steps = 1200;
  std::size_t batch = 16;
  double lr = 3e-3;
  std::size_t warmup = 60;
  double min_lr_fraction = 0.1;  // cosine floor
  double weight_decay = 0.0;
  double clip = 1.0;
  double beta1 = 0.9, beta2 = 0.98, adam_eps = 1e-8;
  bool full_sequence = false;
  // Prompt mixture: an example uses a uniformly chosen emotion template and
  // shot count, or the first-word task with probability control_fraction.
  std::vector<TemplateId> templates{TemplateId::kInferred, TemplateId::kListed, TemplateId::kBare,
                                    TemplateId::kGuess};
  std::vector<int> shots{0, 2, 4};
  double control_fraction = 0.25;
};

struct TrainReport {
  std::vector<double> loss_curve;  // mean batch loss per step
};

inline TrainExample make_example(const PromptTemplate& t, const Vignette& v, const Tokenizer& tok) {
  TrainExample ex;
  ex.tokens = build_prompt(t, v, tok);
  ex.target = t.is_control() ? tok.id(first_word(v.text)) : tok.id(default_emotions().at(v.emotion));
  return ex;
}

class Adam {
 public:
  Adam(const Weights& shape, const TrainConfig& cfg) : cfg_(cfg) {
    shape.for_each_tensor([&](const std::string&, const std::vector<float>& t) {
      m_.emplace_back(t.size(), 0.0f);
      v_.emplace_back(t.size(), 0.0f);
    });
  }

  void step(Weights& w, const Weights& g, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    std::vector<const std::vector<float>*> grads;
    g.for_each_tensor([&](const std::string&, const std::vector<float>& t) { grads.push_back(&t); });
    std::size_t idx = 0;
    w.for_each_tensor([&](const std::string& name, std::vector<float>& p) {
      const auto& gr = *grads[idx];
      auto& m = m_[idx];
      auto& v = v_[idx];
      const bool decay = cfg_.weight_decay > 0.0 && !name.ends_with("gain");
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = b1 * m[i] + (1.0f - b1) * gr[i];
        v[i] = b2 * v[i] + (1.0f - b2) * gr[i] * gr[i];
        const double mh = m[i] / bc1, vh = v[i] / bc2;
        double upd = mh / (std::sqrt(vh) + cfg_.adam_eps);
        if (decay) upd += cfg_.weight_decay * p[i];
        p[i] -= static_cast<float>(lr * upd);
      }
      ++idx;
    });
  }

 private:
  TrainConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  std::uint64_t t_ = 0;
};

inline double learning_rate(const TrainConfig& cfg, std::size_t step) {
  if (step < cfg.warmup) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup);
  const double span = static_cast<double>(std::max<std::size_t>(1, cfg.steps - cfg.warmup));
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup) / span);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return cfg.lr * (cfg.min_lr_fraction + (1.0 - cfg.min_lr_fraction) * cosine);
}

using StepCallback = std::function<void(std::size_t step, double loss)>;

// Deterministic given (config, corpus, seed). Zero steps returns the initialization.
inline Weights train(const ModelConfig& config, const std::vector<Vignette>& corpus, const Tokenizer& tok,
                     const TrainConfig& cfg, std::uint64_t seed, TrainReport* report = nullptr,
                     const StepCallback& on_step = {}) {
  if (corpus.empty()) throw PreconditionError("train: empty corpus");
  if (config.vocab != tok.size()) throw PreconditionError("train: config vocab size does not match tokenizer");
  if (cfg.templates.empty() || cfg.shots.empty()) throw PreconditionError("train: empty prompt mixture");
  Weights w = init_weights(config, derive_seed(seed, 0));
  if (cfg.steps == 0) return w;
  Rng rng(derive_seed(seed, 1));
  Adam opt(w, cfg);
  Weights grad = Weights::zeros(config);
  const float inv_batch = 1.0f / static_cast<float>(cfg.batch);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    grad.for_each_tensor([](const std::string&, std::vector<float>& t) { std::fill(t.begin(), t.end(), 0.0f); });
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const auto& v = corpus[rng.below(corpus.size())];
      PromptTemplate t;
      if (rng.uniform() < cfg.control_fraction) {
        t.id = TemplateId::kFirstWord;
      } else {
        t.id = cfg.templates[rng.below(cfg.templates.size())];
      }
      t.k = cfg.shots[rng.below(cfg.shots.size())];
      const auto ex = make_example(t, v, tok);
      float loss;
      try {
        loss = loss_and_grad<float>(w, ex, cfg.full_sequence, &grad, inv_batch);
      } catch (const TrainingError&) {
        throw TrainingError("training diverged (non-finite loss) at step " + std::to_string(step));
      }
      batch_loss += loss;
    }
    batch_loss /= static_cast<double>(cfg.batch);
    if (!std::isfinite(batch_loss))
      throw TrainingError("training diverged (non-finite loss) at step " + std::to_string(step));
    if (cfg.clip > 0.0) {
      double sq = 0.0;
      grad.for_each_tensor([&](const std::string&, const std::vector<float>& t) {
        for (float x : t) sq += static_cast<double>(x) * x;
      });
      const double gn = std::sqrt(sq);
      if (!std::isfinite(gn))
        throw TrainingError("training diverged (non-finite gradient) at step " + std::to_string(step));
      if (gn > cfg.clip) {
        const float s = static_cast<float>(cfg.clip / gn);
        grad.for_each_tensor([&](const std::string&, std::vector<float>& t) {
          for (auto& x : t) x *= s;
        });
      }
    }
    opt.step(w, grad, learning_rate(cfg, step));
    if (report) report->loss_curve.push_back(batch_loss);
    if (on_step) on_step(step, batch_loss);
  }
  return w;
}

}  // namespace emoprobe
