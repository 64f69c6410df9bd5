// emoprobe command-line harness.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "emoprobe/analysis.hpp"
#include "emoprobe/config.hpp"
#include "emoprobe/corpus.hpp"
#include "emoprobe/interventions.hpp"
#include "emoprobe/model.hpp"
#include "emoprobe/pipeline.hpp"
#include "emoprobe/probes.hpp"
#include "emoprobe/svg.hpp"
#include "emoprobe/trace.hpp"
#include "emoprobe/train.hpp"

namespace fs = std::filesystem;
using namespace emoprobe;

namespace {

struct Usage : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Context {
  Config cfg;
  fs::path out;
  unsigned jobs = 1;
  std::string command;
};

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw DataError("cannot write '" + p.string() + "'");
  f << text;
  if (!f) throw DataError("write failed for '" + p.string() + "'");
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw DataError("cannot read '" + p.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_snapshot(const Context& ctx) {
  fs::create_directories(ctx.out);
  write_text(ctx.out / "resolved_config.toml", "# emoprobe " + std::string(kToolVersion) + "\n" + ctx.cfg.resolved());
  write_text(ctx.out / "VERSION", std::string(kToolVersion) + "\n");
}

fs::path require(const Context& ctx, const std::string& file, const std::string& producer) {
  const fs::path p = ctx.out / file;
  if (!fs::exists(p))
    throw DependencyError("missing " + p.string() + "; run `emoprobe " + producer + "` first");
  return p;
}

std::vector<Vignette> load_corpus(const Context& ctx) { return read_jsonl(require(ctx, "corpus.jsonl", "gen-corpus").string()); }

Weights load_model(const Context& ctx, const Tokenizer& tok) {
  auto loaded = load_weights_with_binding(require(ctx, "weights.emwt", "train").string());
  if (loaded.vocab_fingerprint != 0 && loaded.vocab_fingerprint != tok.fingerprint())
    throw FormatError("weights were trained with a different vocabulary");
  if (!(loaded.weights.config == model_config(ctx.cfg, tok)))
    throw ConfigError("weights do not match the [model] section of the config");
  return std::move(loaded.weights);
}

std::vector<std::uint32_t> parse_layers(const Config& cfg, const std::string& key) {
  std::vector<std::uint32_t> out;
  if (cfg.str(key) == "all") return out;
  for (auto v : cfg.ints(key)) {
    if (v < 0) throw ConfigError(key + ": layers must be non-negative");
    out.push_back(static_cast<std::uint32_t>(v));
  }
  return out;
}

std::vector<Site> parse_sites(const Config& cfg, const std::string& key) {
  std::vector<Site> out;
  for (const auto& s : cfg.list(key)) {
    try {
      out.push_back(parse_site(s));
    } catch (const Error& e) {
      throw ConfigError(key + ": " + e.what());
    }
  }
  return out;
}

// Held-out prompts under the eval template and their correctly classified pool.
struct AnalysisSet {
  PromptTemplate tmpl;
  std::vector<TokenId> labels;
  std::vector<LabeledPrompt> prompts;
  CorrectPool pool;
};

AnalysisSet analysis_set(const Context& ctx, const Weights& w, const Tokenizer& tok, const std::vector<Vignette>& corpus) {
  AnalysisSet a;
  a.tmpl = eval_template(ctx.cfg);
  a.labels = task_label_tokens(a.tmpl, tok);
  const auto split = split_corpus(corpus, ctx.cfg.real("corpus.holdout"));
  a.prompts = build_prompts(analysis_subset(split.heldout, ctx.cfg.count("eval.samples")), a.tmpl, tok);
  a.pool = filter_correct(w, a.prompts, a.labels, ctx.jobs);
  return a;
}

std::vector<std::string> label_names(const PromptTemplate& t) {
  return t.is_control() ? default_lexicon().openers : default_emotions();
}

// Probe-saturation layer from probe_grid.csv, or the configured steer.layer.
std::uint32_t steering_layer(const Context& ctx, Site site) {
  if (ctx.cfg.str("steer.layer") != "auto") return static_cast<std::uint32_t>(ctx.cfg.count("steer.layer"));
  const auto grid = parse_grid_csv(read_text(require(ctx, "probe_grid.csv", "probe")));
  return saturation_layer(grid, site);
}

// ---------------------------------------------------------------------------

void cmd_gen_corpus(const Context& ctx) {
  const auto corpus = generate(ctx.cfg.count("corpus.seed"), ctx.cfg.count("corpus.size"));
  write_jsonl((ctx.out / "corpus.jsonl").string(), corpus);
  const auto hist = class_histogram(corpus, default_emotions().size());
  std::cout << "wrote " << corpus.size() << " vignettes to " << (ctx.out / "corpus.jsonl").string() << "\n";
  for (std::size_t e = 0; e < hist.size(); ++e) std::cout << "  " << default_emotions()[e] << ": " << hist[e] << "\n";
}

void cmd_train(const Context& ctx) {
  const auto tok = default_tokenizer();
  const auto corpus = load_corpus(ctx);
  const auto split = split_corpus(corpus, ctx.cfg.real("corpus.holdout"));
  const auto mc = model_config(ctx.cfg, tok);
  const auto tc = train_config(ctx.cfg);
  TrainReport report;
  const auto t0 = std::chrono::steady_clock::now();
  const auto w = train(mc, split.train, tok, tc, ctx.cfg.count("train.seed"), &report, [&](std::size_t step, double loss) {
    if (step % 100 == 0) std::cerr << "step " << step << " loss " << loss << "\n";
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_weights(w, (ctx.out / "weights.emwt").string(), tok.fingerprint());
  std::ostringstream curve;
  curve.precision(10);
  curve << "step,loss\n";
  for (std::size_t i = 0; i < report.loss_curve.size(); ++i) curve << i << ',' << report.loss_curve[i] << '\n';
  write_text(ctx.out / "train_loss.csv", curve.str());

  const auto a = analysis_set(ctx, w, tok, corpus);
  const auto names = label_names(a.tmpl);
  write_text(ctx.out / "confusion.csv", a.pool.confusion.to_csv(names, false));
  write_text(ctx.out / "confusion_normalized.csv", a.pool.confusion.to_csv(names, true));
  nlohmann::ordered_json j{{"heldout_accuracy", a.pool.accuracy},
                           {"samples", a.prompts.size()},
                           {"template", template_name(a.tmpl.id)},
                           {"shots", a.tmpl.k},
                           {"train_seconds", secs}};
  write_text(ctx.out / "train_summary.json", j.dump(2) + "\n");
  std::cout << "held-out accuracy " << a.pool.accuracy << " on " << a.prompts.size() << " prompts\n";
}

void cmd_capture(const Context& ctx) {
  const auto tok = default_tokenizer();
  const auto w = load_model(ctx, tok);
  const auto corpus = load_corpus(ctx);
  const auto a = analysis_set(ctx, w, tok, corpus);
  Trace t;
  t.meta.model_name = "emoprobe-toy";
  t.meta.layers = w.config.layers;
  t.meta.hidden = w.config.hidden;
  t.meta.heads = w.config.heads;
  t.meta.tokens = 5;
  t.meta.site_mask = kSiteMhsa | kSiteFfn | kSiteHidden | kSiteAttention;
  t.meta.labels = label_names(a.tmpl);
  t.meta.appraisal_names = default_appraisals();
  t.samples = capture_samples(w, a.prompts, {.capture_window = 5, .capture_attention = true}, ctx.jobs);
  write_trace(t, (ctx.out / "capture.emtr").string());
  std::cout << "wrote " << t.samples.size() << " samples to " << (ctx.out / "capture.emtr").string() << "\n";
}

void cmd_probe(const Context& ctx) {
  std::vector<TraceSample> samples;
  std::vector<std::string> labels, appraisals;
  std::string model_name = "emoprobe-toy";
  const std::string trace_path = ctx.cfg.str("probe.trace");
  if (!trace_path.empty()) {
    auto t = read_trace(trace_path);
    samples = std::move(t.samples);
    labels = t.meta.labels;
    appraisals = t.meta.appraisal_names;
    model_name = t.meta.model_name;
  } else {
    const auto tok = default_tokenizer();
    const auto w = load_model(ctx, tok);
    const auto corpus = load_corpus(ctx);
    const auto tmpl = eval_template(ctx.cfg);
    const auto split = split_corpus(corpus, ctx.cfg.real("corpus.holdout"));
    const auto prompts = build_prompts(analysis_subset(split.heldout, ctx.cfg.count("eval.samples")), tmpl, tok);
    std::int64_t deepest = 1;
    for (auto t : ctx.cfg.ints("probe.tokens")) deepest = std::max(deepest, -t);
    samples = capture_samples(w, prompts, {.capture_window = static_cast<std::size_t>(deepest), .capture_attention = false},
                              ctx.jobs);
    labels = label_names(tmpl);
    appraisals = default_appraisals();
  }
  SweepSettings s;
  s.sites = parse_sites(ctx.cfg, "probe.sites");
  s.layers = parse_layers(ctx.cfg, "probe.layers");
  s.tokens.clear();
  for (auto t : ctx.cfg.ints("probe.tokens")) s.tokens.push_back(static_cast<std::int32_t>(t));
  const auto kind = ctx.cfg.str("probe.kind");
  if (kind == "linear")
    s.kind = ProbeKind::kLinear;
  else if (kind == "mlp")
    s.kind = ProbeKind::kMlp;
  else
    throw ConfigError("probe.kind must be linear or mlp");
  s.classes = labels.size();
  if (ctx.cfg.str("probe.lambda") == "cv")
    s.lambda.reset();
  else
    s.lambda = ctx.cfg.real("probe.lambda");
  s.ridge_lambda = ctx.cfg.real("probe.ridge_lambda");
  s.seed = ctx.cfg.count("probe.seed");
  s.bootstrap = ctx.cfg.count("probe.bootstrap");
  s.jobs = ctx.jobs;
  s.keep_probes = true;
  s.appraisal_names = appraisals;

  ProbeBundle bundle;
  bundle.model_name = model_name;
  bundle.labels = labels;
  auto grid = probe_sweep(samples, s, &bundle);
  SweepSettings r = s;
  r.kind = ProbeKind::kAppraisal;
  const auto rgrid = probe_sweep(samples, r, &bundle);
  grid.cells.insert(grid.cells.end(), rgrid.cells.begin(), rgrid.cells.end());
  grid.warnings.insert(grid.warnings.end(), rgrid.warnings.begin(), rgrid.warnings.end());
  write_text(ctx.out / "probe_grid.csv", grid.to_csv());
  save_bundle(bundle, (ctx.out / "probes.empb").string());
  nlohmann::ordered_json j{{"samples", samples.size()}, {"warnings", grid.warnings}};
  write_text(ctx.out / "probe_summary.json", j.dump(2) + "\n");
  for (const auto& wmsg : grid.warnings) std::cerr << "warning: " << wmsg << "\n";
  std::cout << "wrote " << grid.cells.size() << " grid cells to " << (ctx.out / "probe_grid.csv").string() << "\n";
}

void cmd_patch(const Context& ctx) {
  const auto tok = default_tokenizer();
  const auto w = load_model(ctx, tok);
  const auto a = analysis_set(ctx, w, tok, load_corpus(ctx));
  PatchSweepSettings s;
  s.sites = parse_sites(ctx.cfg, "patch.sites");
  s.spans.clear();
  for (auto v : ctx.cfg.ints("patch.spans")) {
    if (v < 1 || v % 2 == 0) throw ConfigError("patch.spans must be odd and positive");
    s.spans.push_back(static_cast<std::uint32_t>(v));
  }
  s.pairs = ctx.cfg.count("patch.pairs");
  s.seed = ctx.cfg.count("patch.seed");
  s.jobs = ctx.jobs;
  const auto rows = patch_sweep(w, a.pool.correct, a.labels, s);
  write_text(ctx.out / "patch.csv", outcome_csv(rows));
  write_text(ctx.out / "patch.json", outcome_json(rows).dump(2) + "\n");
  std::cout << "wrote " << rows.size() << " patch cells\n";
}

void cmd_knockout(const Context& ctx) {
  const auto tok = default_tokenizer();
  const auto w = load_model(ctx, tok);
  const auto a = analysis_set(ctx, w, tok, load_corpus(ctx));
  const auto span = static_cast<std::uint32_t>(ctx.cfg.count("knockout.span"));
  std::ostringstream os;
  os.precision(10);
  os << "sites,layer,span,mode,accuracy,n\n";
  const std::vector<std::pair<std::string, std::vector<Site>>> groups{
      {"mhsa", {Site::kMhsa}}, {"ffn", {Site::kFfn}}, {"mhsa+ffn", {Site::kMhsa, Site::kFfn}}};
  for (const auto& mode_name : ctx.cfg.list("knockout.modes")) {
    KnockoutMode mode;
    if (mode_name == "zero")
      mode = KnockoutMode::kZero;
    else if (mode_name == "random")
      mode = KnockoutMode::kRandom;
    else
      throw ConfigError("knockout.modes: expected zero or random");
    for (const auto& [name, sites] : groups)
      for (std::uint32_t c = 1; c <= w.config.layers; ++c) {
        const auto window = PatchSpec{Site::kMhsa, c, span, {-1}}.window(w.config.layers);
        const double acc =
            knockout(w, a.pool.correct, a.labels, sites, window, mode, ctx.cfg.count("knockout.seed"), {-1}, ctx.jobs);
        os << name << ',' << c << ',' << span << ',' << mode_name << ',' << acc << ',' << a.pool.correct.size() << '\n';
      }
  }
  write_text(ctx.out / "knockout.csv", os.str());
  std::cout << "wrote knockout.csv\n";
}

void cmd_steer(const Context& ctx) {
  const auto tok = default_tokenizer();
  const auto w = load_model(ctx, tok);
  const auto bundle = load_bundle(require(ctx, "probes.empb", "probe").string());
  const auto a = analysis_set(ctx, w, tok, load_corpus(ctx));
  const Site site = parse_site(ctx.cfg.str("steer.site"));
  const auto layer = steering_layer(ctx, site);
  std::vector<double> betas{0.0};
  for (double b : ctx.cfg.reals("steer.betas")) betas.push_back(b);
  std::vector<DirectionSet> sets;
  for (const auto& name : default_appraisals())
    for (int gamma : {+1, -1}) {
      SteeringSpec spec;
      spec.modify = {{name, gamma}};
      spec.keep = all_except(default_appraisals(), spec.modify);
      spec.site = site;
      spec.layers = {layer};
      sets.push_back({(gamma > 0 ? "+" : "-") + name, steering_directions(spec, bundle)});
    }
  sets.push_back(random_directions(ctx.cfg.count("steer.seed"), {layer}, w.config.hidden));
  const auto rows = steer_sweep(w, a.pool.correct, a.labels, site, sets, betas, {-1}, ctx.jobs);
  write_text(ctx.out / "steer.csv", distribution_csv(rows, label_names(a.tmpl)));
  std::cout << "wrote steer.csv (layer " << layer << ")\n";
}

void cmd_promote(const Context& ctx) {
  const auto tok = default_tokenizer();
  const auto w = load_model(ctx, tok);
  const auto bundle = load_bundle(require(ctx, "probes.empb", "probe").string());
  const auto a = analysis_set(ctx, w, tok, load_corpus(ctx));
  const Site site = parse_site(ctx.cfg.str("steer.site"));
  std::vector<double> betas{0.0};
  for (double b : ctx.cfg.reals("steer.betas")) betas.push_back(b);
  const auto names = label_names(a.tmpl);
  std::vector<DirectionSet> sets;
  for (std::size_t e = 0; e < names.size(); ++e) {
    DirectionSet s{names[e], {}};
    for (auto l : site_layers(site, w.config.layers))
      if (bundle.classifiers.count({site, l, -1})) s.directions[l] = unit(bundle.classifier({site, l, -1}).direction(e));
    sets.push_back(std::move(s));
  }
  std::vector<std::vector<InterventionEntry>> entries;
  const auto rows = steer_sweep(w, a.pool.correct, a.labels, site, sets, betas, {-1}, ctx.jobs, &entries);
  std::ostringstream os;
  os.precision(10);
  os << "site,layer,beta,emotion,score,n\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto e = std::find(names.begin(), names.end(), rows[i].spec) - names.begin();
    os << site_name(site) << ',' << rows[i].layer << ',' << rows[i].beta << ',' << rows[i].spec << ','
       << promotion_success_score(entries[i], static_cast<int>(e)) << ',' << rows[i].n << '\n';
  }
  write_text(ctx.out / "promote.csv", os.str());
  std::cout << "wrote promote.csv\n";
}

void cmd_attention(const Context& ctx) {
  const auto tok = default_tokenizer();
  const auto w = load_model(ctx, tok);
  const auto a = analysis_set(ctx, w, tok, load_corpus(ctx));
  const auto n = std::min<std::size_t>(ctx.cfg.count("attention.samples"), a.pool.correct.size());
  std::vector<LabeledPrompt> subset(a.pool.correct.begin(), a.pool.correct.begin() + static_cast<std::ptrdiff_t>(n));
  const auto samples = capture_samples(w, subset, {.capture_window = 1, .capture_attention = true}, ctx.jobs);
  std::vector<const ActivationRecord*> recs;
  for (const auto& s : samples) recs.push_back(&s.record);
  const auto summary = aggregate_attention(recs, ctx.cfg.count("attention.top_k"), &tok);
  write_text(ctx.out / "attention.csv", summary.to_csv());
  std::cout << "wrote attention.csv\n";
}

void cmd_similarity(const Context& ctx) {
  const auto bundle = load_bundle(require(ctx, "probes.empb", "probe").string());
  const Site site = parse_site(ctx.cfg.str("steer.site"));
  std::vector<std::uint32_t> layers;
  for (const auto& [prov, p] : bundle.classifiers)
    if (prov.site == site && prov.token == -1) layers.push_back(prov.layer);
  if (layers.empty()) throw DataError("probe bundle has no emotion probes for the site");
  std::vector<SimilarityPair> pairs;
  std::vector<std::string> appraisals;
  for (const auto& [key, p] : bundle.regressors)
    if (std::find(appraisals.begin(), appraisals.end(), key.second) == appraisals.end()) appraisals.push_back(key.second);
  for (const auto& ap : appraisals)
    for (std::size_t e = 0; e < bundle.labels.size(); ++e) pairs.push_back({ap, e});
  const auto traj = similarity_trajectory(bundle, site, -1, layers, pairs);
  write_text(ctx.out / "similarity.csv", traj.to_csv(bundle.labels));
  std::cout << "wrote similarity.csv\n";
}

void cmd_compare_groups(const Context& ctx) {
  const auto tok = default_tokenizer();
  const auto w = load_model(ctx, tok);
  const auto bundle = load_bundle(require(ctx, "probes.empb", "probe").string());
  const auto a = analysis_set(ctx, w, tok, load_corpus(ctx));
  const Site site = parse_site(ctx.cfg.str("steer.site"));
  const auto layer = steering_layer(ctx, site);
  std::vector<RegProbe> probes;
  for (const auto& name : default_appraisals()) probes.push_back(bundle.regressor({site, layer, -1}, name));
  const auto samples = capture_samples(w, a.prompts, {.capture_window = 1, .capture_attention = false}, ctx.jobs);
  std::vector<std::size_t> all(samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const Matrix x = gather(samples, all, site, layer, -1);
  std::vector<int> labels;
  for (const auto& p : a.prompts) labels.push_back(p.label);
  const auto cells = group_appraisal_comparison(probes, x, labels, a.pool.mask, a.labels.size());
  write_text(ctx.out / "groups.csv", group_comparison_csv(cells, label_names(a.tmpl)));
  std::cout << "wrote groups.csv (layer " << layer << ")\n";
}

// CSV rows as string fields; throws when the file has no data rows.
std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
  std::istringstream in(read_text(p));
  std::string line;
  std::vector<std::vector<std::string>> rows;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    rows.push_back(split_list(line));
  }
  if (rows.empty()) throw DataError(p.string() + " has no data rows");
  return rows;
}

void cmd_report(const Context& ctx) {
  std::vector<std::pair<fs::path, std::string>> pending;  // rendered before anything is written
  bool any = false;
  if (fs::exists(ctx.out / "probe_grid.csv")) {
    any = true;
    const auto grid = parse_grid_csv(read_text(ctx.out / "probe_grid.csv"));
    if (grid.cells.empty()) throw DataError("probe_grid.csv has no data rows");
    std::vector<std::string> sites;
    std::uint32_t max_layer = 0;
    for (const auto& c : grid.cells)
      if (c.metric == "accuracy" && c.token == -1) {
        if (std::find(sites.begin(), sites.end(), site_name(c.site)) == sites.end()) sites.push_back(site_name(c.site));
        max_layer = std::max(max_layer, c.layer);
      }
    Heatmap h;
    h.title = "Emotion probe accuracy (last token)";
    h.rows = sites;
    for (std::uint32_t l = 0; l <= max_layer; ++l) h.cols.push_back(std::to_string(l));
    h.values.assign(sites.size(), std::vector<double>(max_layer + 1, NAN));
    for (const auto& c : grid.cells)
      if (c.metric == "accuracy" && c.token == -1) {
        const auto r = std::find(sites.begin(), sites.end(), site_name(c.site)) - sites.begin();
        h.values[r][c.layer] = c.value;
      }
    pending.emplace_back(ctx.out / "probe_grid.svg", render_heatmap(h));
  }
  if (fs::exists(ctx.out / "patch.csv")) {
    any = true;
    const auto rows = csv_rows(ctx.out / "patch.csv");
    std::vector<std::string> keys;
    std::uint32_t max_layer = 0;
    for (const auto& r : rows) {
      const auto key = r.at(0) + " span " + r.at(2);
      if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(key);
      max_layer = std::max<std::uint32_t>(max_layer, static_cast<std::uint32_t>(std::stoul(r.at(1))));
    }
    Heatmap h;
    h.title = "Patching success rate";
    h.rows = keys;
    for (std::uint32_t l = 0; l <= max_layer; ++l) h.cols.push_back(std::to_string(l));
    h.values.assign(keys.size(), std::vector<double>(max_layer + 1, NAN));
    for (const auto& r : rows) {
      const auto i = std::find(keys.begin(), keys.end(), r.at(0) + " span " + r.at(2)) - keys.begin();
      h.values[i][std::stoul(r.at(1))] = std::stod(r.at(5));
    }
    pending.emplace_back(ctx.out / "patch.svg", render_heatmap(h));
  }
  if (fs::exists(ctx.out / "steer.csv")) {
    any = true;
    std::istringstream in(read_text(ctx.out / "steer.csv"));
    std::string header;
    std::getline(in, header);
    const auto cols = split_list(header);
    const auto rows = csv_rows(ctx.out / "steer.csv");
    Heatmap h;
    h.title = "Emotion distribution under steering";
    h.cols.assign(cols.begin() + 4, cols.end() - 1);
    for (const auto& r : rows) {
      h.rows.push_back(r.at(4 - 1) + " b=" + r.at(2));
      std::vector<double> v;
      for (std::size_t c = 4; c + 1 < r.size(); ++c) v.push_back(std::stod(r[c]));
      h.values.push_back(v);
    }
    pending.emplace_back(ctx.out / "steer.svg", render_heatmap(h));
  }
  if (!any) throw DependencyError("nothing to report; run `emoprobe probe`, `patch` or `steer` first");
  for (const auto& [p, svg] : pending) {
    write_text(p, svg);
    std::cout << "wrote " << p.string() << "\n";
  }
}

int cmd_validate(const std::string& path) {
  const auto rep = validate_trace(path);
  std::cout << rep.to_string();
  if (!rep.valid && rep.error_offset) std::cout << "error offset: " << *rep.error_offset << "\n";
  return rep.valid ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"emoprobe: probing, patching and steering emotion processing in a toy transformer"};
  app.require_subcommand(1);
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  unsigned jobs = 0;
  app.add_option("-c,--config", config_path, "experiment config file");
  app.add_option("-o,--out", out_dir, "output directory (default $EMOPROBE_OUT or ./emoprobe-out)");
  app.add_option("--seed", seed, "override every seed in the config");
  app.add_option("-j,--jobs", jobs, "worker threads (default from config)");
  app.set_version_flag("--version", kToolVersion);

  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-corpus", "generate the synthetic appraisal corpus"},
      {"train", "train the toy model and report held-out accuracy"},
      {"capture", "write held-out activations as a trace file"},
      {"probe", "fit probe grids over sites x layers x tokens"},
      {"patch", "activation patching sweep"},
      {"knockout", "zero/random knockout sweep"},
      {"steer", "appraisal steering with unique effect vectors"},
      {"promote", "direct emotion promotion sweep"},
      {"attention", "top attended tokens per layer"},
      {"similarity", "appraisal/emotion cosine similarity per layer"},
      {"compare-groups", "probe appraisal scores of correct vs missed samples"},
      {"report", "render CSV outputs as SVG heatmaps"},
  };
  for (const auto& [name, help] : commands) app.add_subcommand(name, help);
  std::string trace_path;
  auto* validate = app.add_subcommand("validate-trace", "check a trace file and print its presence matrix");
  validate->add_option("trace", trace_path, "trace file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (validate->parsed()) return cmd_validate(trace_path);
    Context ctx;
    ctx.cfg = config_path.empty() ? Config{} : Config::load(config_path);
    if (seed) ctx.cfg.override_seeds(*seed);
    if (out_dir.empty()) {
      const char* env = std::getenv("EMOPROBE_OUT");
      out_dir = env && *env ? env : "emoprobe-out";
    }
    ctx.out = out_dir;
    ctx.jobs = jobs ? jobs : static_cast<unsigned>(ctx.cfg.count("run.jobs"));
    ctx.command = app.get_subcommands().front()->get_name();
    write_snapshot(ctx);
    const std::string& c = ctx.command;
    if (c == "gen-corpus") cmd_gen_corpus(ctx);
    else if (c == "train") cmd_train(ctx);
    else if (c == "capture") cmd_capture(ctx);
    else if (c == "probe") cmd_probe(ctx);
    else if (c == "patch") cmd_patch(ctx);
    else if (c == "knockout") cmd_knockout(ctx);
    else if (c == "steer") cmd_steer(ctx);
    else if (c == "promote") cmd_promote(ctx);
    else if (c == "attention") cmd_attention(ctx);
    else if (c == "similarity") cmd_similarity(ctx);
    else if (c == "compare-groups") cmd_compare_groups(ctx);
    else if (c == "report") cmd_report(ctx);
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
