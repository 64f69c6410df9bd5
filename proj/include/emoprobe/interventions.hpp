#pragma once

// Causal interventions on the toy model: activation patching, knockouts,
// appraisal steering with unique/net effect vectors, direct emotion promotion.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "emoprobe/analysis.hpp"
#include "emoprobe/errors.hpp"
#include "emoprobe/linalg.hpp"
#include "emoprobe/model.hpp"
#include "emoprobe/probes.hpp"

namespace emoprobe {

struct PatchSpec {
  Site site = Site::kHidden;
  std::uint32_t center = 0;
  std::uint32_t span = 1;
  std::vector<std::int64_t> tokens{-1};

  // Layers of the window, clipped to the valid range for the site.
  std::vector<std::uint32_t> window(std::uint32_t L) const {
    if (span == 0 || span % 2 == 0) throw PreconditionError("patch span must be odd");
    const std::int64_t lo = site == Site::kHidden ? 0 : 1;
    const std::int64_t half = span / 2;
    std::vector<std::uint32_t> out;
    for (std::int64_t l = static_cast<std::int64_t>(center) - half; l <= static_cast<std::int64_t>(center) + half; ++l)
      if (l >= lo && l <= static_cast<std::int64_t>(L)) out.push_back(static_cast<std::uint32_t>(l));
    return out;
  }
};

inline EditPlan patch_plan(const ActivationRecord& source, const PatchSpec& spec) {
  EditPlan plan;
  for (auto l : spec.window(source.layers))
    for (auto t : spec.tokens) {
      const auto v = source.at(spec.site, l, t);
      plan.edits.push_back({spec.site, {l}, {t}, EditAction::kReplace, std::vector<float>(v.begin(), v.end()), 0});
    }
  return plan;
}

struct InterventionEntry {
  int baseline = 0;  // clean prediction
  int post = 0;      // prediction after the edit
};

struct PatchEntry {
  int source_label = 0;
  int target_label = 0;
  int post = 0;
  bool success() const { return post == source_label; }
};

// Patch the source record's activations into the target run. Labels are
// indices into `labels`.
inline PatchEntry patch(const ActivationRecord& source, int source_label, const CleanRun& target, int target_label,
                        const PatchSpec& spec, const std::vector<TokenId>& labels) {
  if (source_label == target_label) throw PairingError("patch: source and target share a label");
  if (source.hidden_size != target.result().record.hidden_size && target.result().record.hidden_size != 0)
    throw ShapeError("patch: source and target hidden sizes differ");
  const auto r = target.rerun(patch_plan(source, spec));
  return {source_label, target_label, static_cast<int>(closed_vocab_predict(r.logits, labels))};
}

// Three-way patch outcome rates for one cell.
struct OutcomeRow {
  Site site = Site::kHidden;
  std::uint32_t layer = 0;
  std::uint32_t span = 1;
  double beta = 0.0;
  std::string spec = "patch";
  double success = 0.0, unchanged = 0.0, other = 0.0;
  std::size_t n = 0;
};

inline std::string outcome_csv(const std::vector<OutcomeRow>& rows) {
  std::ostringstream os;
  os.precision(10);
  os << "site,layer,span,beta,spec,success,unchanged,other,n\n";
  for (const auto& r : rows)
    os << site_name(r.site) << ',' << r.layer << ',' << r.span << ',' << r.beta << ',' << r.spec << ',' << r.success
       << ',' << r.unchanged << ',' << r.other << ',' << r.n << '\n';
  return os.str();
}

inline nlohmann::ordered_json outcome_json(const std::vector<OutcomeRow>& rows) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : rows)
    arr.push_back({{"site", site_name(r.site)},
                   {"layer", r.layer},
                   {"span", r.span},
                   {"beta", r.beta},
                   {"spec", r.spec},
                   {"success", r.success},
                   {"unchanged", r.unchanged},
                   {"other", r.other},
                   {"n", r.n}});
  return arr;
}

struct PatchSweepSettings {
  std::vector<Site> sites{Site::kHidden};
  std::vector<std::uint32_t> centers;  // empty: every layer valid for the site
  std::vector<std::uint32_t> spans{1};
  std::vector<std::int64_t> tokens{-1};
  std::size_t pairs = 200;
  std::uint64_t seed = 0;
  unsigned jobs = 1;
};

// Seeded (source, target) index pairs with different labels.
inline std::vector<std::pair<std::size_t, std::size_t>> sample_pairs(const std::vector<LabeledPrompt>& pool,
                                                                     std::size_t count, std::uint64_t seed) {
  std::set<int> labels;
  for (const auto& p : pool) labels.insert(p.label);
  if (pool.size() < 2 || labels.size() < 2) throw DataError("patching needs correct samples from at least 2 labels");
  Rng rng(seed);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  while (out.size() < count) {
    const auto s = rng.below(pool.size()), t = rng.below(pool.size());
    if (pool[s].label != pool[t].label) out.emplace_back(s, t);
  }
  return out;
}

inline std::vector<OutcomeRow> patch_sweep(const Weights& w, const std::vector<LabeledPrompt>& pool,
                                           const std::vector<TokenId>& labels, const PatchSweepSettings& s) {
  if (s.pairs < 1) throw PreconditionError("patch_sweep: need at least one pair per cell");
  const auto pairs = sample_pairs(pool, s.pairs, s.seed);
  std::int64_t deepest = 1;
  for (auto t : s.tokens) deepest = std::max(deepest, -t);
  const ForwardOptions opt{.capture_window = static_cast<std::size_t>(deepest), .capture_attention = false};

  std::vector<std::size_t> used;
  for (const auto& [a, b] : pairs) {
    used.push_back(a);
    used.push_back(b);
  }
  std::sort(used.begin(), used.end());
  used.erase(std::unique(used.begin(), used.end()), used.end());
  std::map<std::size_t, std::size_t> slot;
  for (std::size_t i = 0; i < used.size(); ++i) slot[used[i]] = i;
  std::vector<std::unique_ptr<CleanRun>> runs(used.size());
  parallel_for(used.size(), s.jobs, [&](std::size_t i) {
    runs[i] = std::make_unique<CleanRun>(w, pool[used[i]].tokens, opt);
  });

  const std::uint32_t L = w.config.layers;
  struct Cell {
    Site site;
    std::uint32_t center, span;
  };
  std::vector<Cell> cells;
  for (Site site : s.sites) {
    if (site == Site::kAttention) throw PreconditionError("patch_sweep: attention weights are not patchable");
    const auto centers = s.centers.empty() ? site_layers(site, L) : s.centers;
    for (auto span : s.spans)
      for (auto c : centers) cells.push_back({site, c, span});
  }
  std::vector<OutcomeRow> rows(cells.size());
  parallel_for(cells.size(), s.jobs, [&](std::size_t ci) {
    const auto& c = cells[ci];
    const PatchSpec spec{c.site, c.center, c.span, s.tokens};
    std::size_t success = 0, unchanged = 0, other = 0;
    for (const auto& [src, tgt] : pairs) {
      const auto& source = runs[slot.at(src)]->result().record;
      const auto e = patch(source, pool[src].label, *runs[slot.at(tgt)], pool[tgt].label, spec, labels);
      if (e.success())
        ++success;
      else if (e.post == e.target_label)
        ++unchanged;
      else
        ++other;
    }
    const double n = static_cast<double>(pairs.size());
    OutcomeRow r{c.site, c.center, c.span, 0.0, "patch", success / n, unchanged / n, 0.0, pairs.size()};
    r.other = static_cast<double>(other) / n;
    rows[ci] = r;
  });
  return rows;
}

// ---------------------------------------------------------------------------
// Knockouts

enum class KnockoutMode { kZero, kRandom };

inline EditPlan knockout_plan(const std::vector<Site>& sites, const std::vector<std::uint32_t>& layers,
                              const std::vector<std::int64_t>& tokens, KnockoutMode mode, std::uint64_t seed) {
  EditPlan plan;
  for (Site site : sites) {
    std::vector<std::uint32_t> ls;
    for (auto l : layers)
      if (site == Site::kHidden || l >= 1) ls.push_back(l);
    if (ls.empty()) continue;
    plan.edits.push_back({site, ls, tokens, mode == KnockoutMode::kZero ? EditAction::kZero : EditAction::kRandomNormMatched,
                          {}, derive_seed(seed, static_cast<std::uint64_t>(site))});
  }
  return plan;
}

// Accuracy, against each sample's clean prediction, after knocking out the
// given sites in the layer window.
inline double knockout(const Weights& w, const std::vector<LabeledPrompt>& pool, const std::vector<TokenId>& labels,
                       const std::vector<Site>& sites, const std::vector<std::uint32_t>& layers,
                       KnockoutMode mode, std::uint64_t seed, const std::vector<std::int64_t>& tokens = {-1},
                       unsigned jobs = 1) {
  if (pool.empty()) throw DataError("knockout: empty pool");
  std::vector<int> kept(pool.size(), 0);
  parallel_for(pool.size(), jobs, [&](std::size_t i) {
    const CleanRun run(w, pool[i].tokens, {.capture_window = 1, .capture_attention = false});
    const auto clean = closed_vocab_predict(run.result().logits, labels);
    const auto plan = knockout_plan(sites, layers, tokens, mode, derive_seed(seed, i));
    plan.validate(w.config, pool[i].tokens.size());
    kept[i] = closed_vocab_predict(run.rerun(plan).logits, labels) == clean;
  });
  double ok = 0.0;
  for (int k : kept) ok += k;
  return ok / static_cast<double>(pool.size());
}

// ---------------------------------------------------------------------------
// Effect vectors

namespace detail {

inline void check_in_span(const Vector& residual, const Vector& v, const std::string& what) {
  if (!(norm(residual) > 1e-8 * norm(v)))
    throw DegenerateError(what + " lies in the span of the conditioning set");
}

// (I - P) x, refined with a second pass to keep the residual orthogonal.
inline Vector project_out_refined(const Matrix& others, const Vector& x) {
  if (others.cols() == 0) return x;
  return project_out(others, project_out(others, x));
}

}  // namespace detail

inline Vector unique_effect_vector(const Vector& v_a, const Matrix& others) {
  if (others.cols() > 0 && others.rows() != v_a.size()) throw ShapeError("unique_effect_vector: dimension mismatch");
  Vector z = detail::project_out_refined(others, v_a);
  detail::check_in_span(z, v_a, "concept vector");
  return z;
}

struct SignedConcept {
  std::string name;
  int gamma = 1;  // +1 promote, -1 demote
};

// Named concept directions at one (site, layer, token).
using ConceptVectors = std::map<std::string, Vector>;

inline Matrix concept_columns(const ConceptVectors& vectors, const std::vector<std::string>& names) {
  std::vector<Vector> cols;
  for (const auto& n : names) {
    auto it = vectors.find(n);
    if (it == vectors.end()) throw DataError("no concept vector named '" + n + "'");
    cols.push_back(it->second);
  }
  if (cols.empty()) return {};
  return Matrix::from_columns(cols);
}

inline Vector net_effect_vector(const std::vector<SignedConcept>& A, const std::vector<std::string>& B,
                                const ConceptVectors& vectors) {
  if (A.empty()) throw PreconditionError("net_effect_vector: modify-set is empty");
  for (const auto& a : A) {
    if (a.gamma != 1 && a.gamma != -1) throw PreconditionError("net_effect_vector: gamma must be +1 or -1");
    if (std::find(B.begin(), B.end(), a.name) != B.end())
      throw PreconditionError("net_effect_vector: '" + a.name + "' is in both the modify and keep sets");
  }
  auto get = [&](const std::string& n) -> const Vector& {
    auto it = vectors.find(n);
    if (it == vectors.end()) throw DataError("no concept vector named '" + n + "'");
    return it->second;
  };
  Vector sum = static_cast<double>(A.front().gamma) * get(A.front().name);
  for (std::size_t i = 1; i < A.size(); ++i) sum = sum + static_cast<double>(A[i].gamma) * get(A[i].name);
  const Matrix kept = concept_columns(vectors, B);
  Vector z = detail::project_out_refined(kept, sum);
  detail::check_in_span(z, sum, "combined concept vector");
  return z;
}

// Appraisal directions (raw space) from a probe bundle at one cell.
inline ConceptVectors appraisal_vectors(const ProbeBundle& bundle, const Provenance& prov,
                                        const std::vector<std::string>& names = default_appraisals()) {
  ConceptVectors out;
  for (const auto& n : names) out[n] = bundle.regressor(prov, n).v;
  return out;
}

inline std::vector<std::string> all_except(const std::vector<std::string>& names, const std::vector<SignedConcept>& A) {
  std::vector<std::string> out;
  for (const auto& n : names)
    if (std::none_of(A.begin(), A.end(), [&](const SignedConcept& a) { return a.name == n; })) out.push_back(n);
  return out;
}

// ---------------------------------------------------------------------------
// Steering

struct SteeringSpec {
  std::vector<SignedConcept> modify;
  std::vector<std::string> keep;
  double beta = 0.0;
  Site site = Site::kHidden;
  std::vector<std::uint32_t> layers;
  std::vector<std::int64_t> tokens{-1};
};

inline Vector unit(const Vector& z) {
  const double n = norm(z);
  if (!(n > 0.0)) throw DegenerateError("steering direction has zero norm");
  return (1.0 / n) * z;
}

// x ← x + β·u at every (layer, token), with a per-layer unit direction.
inline EditPlan additive_plan(Site site, const std::map<std::uint32_t, Vector>& directions, double beta,
                              const std::vector<std::int64_t>& tokens) {
  EditPlan plan;
  if (beta == 0.0) return plan;
  if (!std::isfinite(beta)) throw PreconditionError("steering: beta must be finite");
  for (const auto& [layer, u] : directions) {
    std::vector<float> add(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) add[i] = static_cast<float>(beta * u[i]);
    plan.edits.push_back({site, {layer}, tokens, EditAction::kAdd, std::move(add), 0});
  }
  return plan;
}

// Unit net-effect direction per layer of the spec.
inline std::map<std::uint32_t, Vector> steering_directions(const SteeringSpec& spec, const ProbeBundle& bundle,
                                                           std::int32_t probe_token = -1) {
  std::map<std::uint32_t, Vector> out;
  for (auto l : spec.layers) {
    const auto vecs = appraisal_vectors(bundle, {spec.site, l, probe_token});
    out[l] = unit(net_effect_vector(spec.modify, spec.keep, vecs));
  }
  return out;
}

inline InterventionEntry steer(const CleanRun& run, const SteeringSpec& spec,
                               const std::map<std::uint32_t, Vector>& directions, const std::vector<TokenId>& labels) {
  const int base = static_cast<int>(closed_vocab_predict(run.result().logits, labels));
  const auto r = run.rerun(additive_plan(spec.site, directions, spec.beta, spec.tokens));
  return {base, static_cast<int>(closed_vocab_predict(r.logits, labels))};
}

inline InterventionEntry promote_emotion(const CleanRun& run, std::size_t emotion, double beta, Site site,
                                         const std::vector<std::uint32_t>& layers, const ProbeBundle& bundle,
                                         const std::vector<TokenId>& labels, std::int32_t probe_token = -1,
                                         const std::vector<std::int64_t>& tokens = {-1}) {
  std::map<std::uint32_t, Vector> dirs;
  for (auto l : layers) dirs[l] = unit(bundle.classifier({site, l, probe_token}).direction(emotion));
  const int base = static_cast<int>(closed_vocab_predict(run.result().logits, labels));
  const auto r = run.rerun(additive_plan(site, dirs, beta, tokens));
  return {base, static_cast<int>(closed_vocab_predict(r.logits, labels))};
}

// s⁺ − s⁻: share of non-e baselines flipped to e minus share of e baselines lost.
inline double promotion_success_score(const std::vector<InterventionEntry>& outcome, int e) {
  if (outcome.empty()) throw PreconditionError("promotion_success_score: empty outcome");
  std::size_t others = 0, gained = 0, own = 0, lost = 0;
  for (const auto& o : outcome) {
    if (o.baseline == e) {
      ++own;
      lost += o.post != e;
    } else {
      ++others;
      gained += o.post == e;
    }
  }
  const double sp = others ? static_cast<double>(gained) / static_cast<double>(others) : 0.0;
  const double sm = own ? static_cast<double>(lost) / static_cast<double>(own) : 0.0;
  return sp - sm;
}

struct DistributionRow {
  Site site = Site::kHidden;
  std::uint32_t layer = 0;
  double beta = 0.0;
  std::string spec;
  std::vector<double> shares;
  std::size_t n = 0;
};

inline std::string distribution_csv(const std::vector<DistributionRow>& rows, const std::vector<std::string>& names) {
  std::ostringstream os;
  os.precision(10);
  os << "site,layer,beta,spec";
  for (const auto& n : names) os << ',' << n;
  os << ",n\n";
  for (const auto& r : rows) {
    os << site_name(r.site) << ',' << r.layer << ',' << r.beta << ',' << r.spec;
    for (double s : r.shares) os << ',' << s;
    os << ',' << r.n << '\n';
  }
  return os.str();
}

// A named family of per-layer unit directions (appraisal spec, emotion, random).
struct DirectionSet {
  std::string name;
  std::map<std::uint32_t, Vector> directions;
};

// Label distribution after adding β·u at each layer separately, for every β
// (β = 0 gives the baseline).
inline std::vector<DistributionRow> steer_sweep(const Weights& w, const std::vector<LabeledPrompt>& pool,
                                                const std::vector<TokenId>& labels, Site site,
                                                const std::vector<DirectionSet>& sets, const std::vector<double>& betas,
                                                const std::vector<std::int64_t>& tokens = {-1}, unsigned jobs = 1,
                                                std::vector<std::vector<InterventionEntry>>* entries = nullptr) {
  if (pool.empty()) throw DataError("steer_sweep: empty pool");
  std::vector<std::unique_ptr<CleanRun>> runs(pool.size());
  parallel_for(pool.size(), jobs, [&](std::size_t i) {
    runs[i] = std::make_unique<CleanRun>(w, pool[i].tokens, ForwardOptions{.capture_window = 1, .capture_attention = false});
  });
  struct Cell {
    const DirectionSet* set;
    std::uint32_t layer;
    double beta;
  };
  std::vector<Cell> cells;
  for (const auto& set : sets)
    for (const auto& [layer, u] : set.directions)
      for (double b : betas) cells.push_back({&set, layer, b});
  std::vector<DistributionRow> rows(cells.size());
  std::vector<std::vector<InterventionEntry>> all(cells.size());
  parallel_for(cells.size(), jobs, [&](std::size_t ci) {
    const auto& c = cells[ci];
    std::map<std::uint32_t, Vector> one{{c.layer, c.set->directions.at(c.layer)}};
    std::vector<int> post(pool.size());
    all[ci].resize(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
      const int base = static_cast<int>(closed_vocab_predict(runs[i]->result().logits, labels));
      const auto r = runs[i]->rerun(additive_plan(site, one, c.beta, tokens));
      post[i] = static_cast<int>(closed_vocab_predict(r.logits, labels));
      all[ci][i] = {base, post[i]};
    }
    rows[ci] = {site, c.layer, c.beta, c.set->name, label_distribution(post, labels.size()), pool.size()};
  });
  if (entries) *entries = std::move(all);
  return rows;
}

// Unit Gaussian directions, one per layer, for the random-direction control.
inline DirectionSet random_directions(std::uint64_t seed, const std::vector<std::uint32_t>& layers, std::size_t d) {
  DirectionSet s{"random", {}};
  for (auto l : layers) {
    Rng rng(derive_seed(seed, l));
    s.directions[l] = unit(gaussian_vector(rng, d));
  }
  return s;
}

inline std::vector<DistributionRow> random_direction_control(std::uint64_t seed, const std::vector<double>& betas,
                                                             const std::vector<std::uint32_t>& layers, const Weights& w,
                                                             const std::vector<LabeledPrompt>& pool,
                                                             const std::vector<TokenId>& labels,
                                                             Site site = Site::kHidden, unsigned jobs = 1) {
  return steer_sweep(w, pool, labels, site, {random_directions(seed, layers, w.config.hidden)}, betas, {-1}, jobs);
}

inline const std::vector<double>& default_beta_grid() {
  static const std::vector<double> grid{400.0, 800.0, 1600.0};
  return grid;
}

}  // namespace emoprobe
