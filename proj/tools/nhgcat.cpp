#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "nhgcat/config.hpp"
#include "nhgcat/errors.hpp"
#include "nhgcat/interpret.hpp"

namespace fs = std::filesystem;
using namespace nhgcat;
using nlohmann::json;

namespace {

// One line of space-separated key=value pairs; values with spaces are quoted.
class Log {
 public:
  explicit Log(std::string_view event) { line_ << "event=" << event; }
  template <typename T>
  Log& operator()(std::string_view key, const T& value) {
    std::ostringstream v;
    v.precision(10);
    v << value;
    std::string s = v.str();
    if (s.find(' ') != std::string::npos) s = '"' + s + '"';
    line_ << ' ' << key << '=' << s;
    return *this;
  }
  Log& operator()(std::string_view key, const std::optional<double>& value) {
    return value ? (*this)(key, *value) : (*this)(key, "NA");
  }
  ~Log() { std::cout << line_.str() << std::endl; }

 private:
  std::ostringstream line_;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError(path.string() + ": cannot open");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct ExperimentFlags {
  std::string preset = "desk";
  std::optional<std::string> config;
  std::optional<std::string> variant;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, batch, patience;
  std::optional<double> lr;

  void attach(CLI::App* cmd) {
    cmd->add_option("--preset", preset, "model and training preset: desk or full")
        ->check(CLI::IsMember({"desk", "full"}))
        ->capture_default_str();
    cmd->add_option("--config", config, "JSON config file applied over the preset (flags win)");
    cmd->add_option("--variant", variant,
                    "full | standard-attention | deterministic-causal | variational-no-causal (default full)");
    cmd->add_option("--seed", seed, "seed for initialisation, splits and training streams (default 7)");
    cmd->add_option("--epochs", epochs, "maximum epochs (default 50 desk, 300 full)");
    cmd->add_option("--batch", batch, "batch size (default 8 desk, 32 full)");
    cmd->add_option("--patience", patience, "early-stopping patience in epochs (default 20)");
    cmd->add_option("--lr", lr, "learning rate (default 1e-3)");
  }

  // Preset, then config file, then flags.
  Experiment resolve(const Cohort& cohort) const {
    Experiment e = preset_experiment(preset, cohort.regions(), cohort.timepoints());
    if (config) e = merge_experiment(e, read_file(*config), *config);
    if (variant) e.model.variant = parse_variant(*variant);
    if (seed) e.seed = *seed;
    if (epochs) e.train.max_epochs = *epochs;
    if (batch) e.train.batch = *batch;
    if (patience) e.train.patience = *patience;
    if (lr) e.train.adam.lr = *lr;
    validate(e.train);
    if (e.model.rg.timepoints != cohort.timepoints() || e.model.rg.static_width != static_width(cohort.regions()))
      throw UsageError("config geometry (timepoints " + std::to_string(e.model.rg.timepoints) +
                       ") does not match the cohort (" + std::to_string(cohort.timepoints()) + ")");
    return e;
  }
};

void log_split(const SplitOutcome& s) {
  const auto& m = s.metrics;
  Log("split")("id", s.split.id)("n", m.n)("AUC", m.auc)("ACC", m.acc)("SEN", m.sen)("SPE", m.spe)("F1", m.f1)(
      "AP", m.ap)("best_epoch", s.fit.best_epoch)("epochs", s.fit.history.size());
}

void log_summary(const CvResult& r) {
  const auto& s = r.summary;
  Log("summary")("protocol", r.protocol)("mean_AUC", s.mean.auc)("sd_AUC", s.sd.auc)("mean_ACC", s.mean.acc)(
      "sd_ACC", s.sd.acc)("weighted_ACC", s.weighted.acc)("weighted_AUC", s.weighted.auc);
}

int run_cv_command(const std::string& protocol, const std::string& cohort_dir, std::size_t folds,
                   const ExperimentFlags& flags, std::size_t jobs, const std::string& out) {
  const Cohort cohort = load_cohort(cohort_dir);
  const Experiment e = flags.resolve(cohort);
  const auto features = extract_all(cohort, e.features);
  std::vector<Split> splits =
      protocol == "loso" ? site_splits(cohort.sites()) : stratified_kfold(cohort.labels(), folds, e.seed);
  Log("start")("protocol", protocol)("subjects", features.size())("splits", splits.size())("jobs", jobs)(
      "variant", variant_name(e.model.variant))("seed", e.seed);
  const CvResult r = run_cv(cohort.atlas, features, std::move(splits), e, protocol, jobs);
  for (const auto& s : r.splits) log_split(s);
  log_summary(r);
  write_cv(out, r, e, features);
  Log("written")("dir", out);
  return 0;
}

std::optional<double> stored(const json& j, const char* key) {
  if (!j.contains(key)) return std::nullopt;
  return j[key].get<double>();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph-based depression classifier: synthesis, training, evaluation and interpretation"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic cohort directory");
  std::string synth_preset = "desk", synth_out;
  double delta = 0.6;
  std::uint64_t synth_seed = 1;
  std::optional<std::size_t> sites, per_site;
  std::optional<double> noise;
  synth->add_option("--preset", synth_preset, "geometry: desk (16 regions, 120 volumes) or full (116, 180)")
      ->check(CLI::IsMember({"desk", "full"}))
      ->capture_default_str();
  synth->add_option("--delta", delta, "planted class difference")->capture_default_str();
  synth->add_option("--seed", synth_seed, "generator seed")->capture_default_str();
  synth->add_option("--sites", sites, "number of sites (default 4)");
  synth->add_option("--per-site", per_site, "subjects per site (default 60)");
  synth->add_option("--noise", noise, "white-noise standard deviation (default 0.5)");
  synth->add_option("--out", synth_out, "output directory")->required();

  // train / loso
  auto* train = app.add_subcommand("train", "stratified k-fold cross-validation");
  std::string train_cohort, train_out = "runs";
  std::size_t folds = 5, jobs = 1;
  ExperimentFlags train_flags;
  train->add_option("--cohort", train_cohort, "cohort directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--folds", folds, "number of folds")->capture_default_str();
  train->add_option("--jobs", jobs, "folds trained concurrently")->capture_default_str();
  train->add_option("--out", train_out, "output root for run directories")->capture_default_str();
  train_flags.attach(train);

  auto* loso = app.add_subcommand("loso", "leave-one-site-out cross-validation");
  std::string loso_cohort, loso_out = "runs-loso";
  ExperimentFlags loso_flags;
  loso->add_option("--cohort", loso_cohort, "cohort directory")->required()->check(CLI::ExistingDirectory);
  loso->add_option("--jobs", jobs, "sites trained concurrently")->capture_default_str();
  loso->add_option("--out", loso_out, "output root for run directories")->capture_default_str();
  loso_flags.attach(loso);

  // eval
  auto* eval = app.add_subcommand("eval", "score a run directory's checkpoint on a cohort");
  std::string eval_run, eval_cohort;
  bool eval_all = false;
  eval->add_option("--run", eval_run, "run directory (contains checkpoint.bin)")->required()->check(
      CLI::ExistingDirectory);
  eval->add_option("--cohort", eval_cohort, "cohort directory")->required()->check(CLI::ExistingDirectory);
  eval->add_flag("--all", eval_all, "score every subject instead of the run's test split");

  // interpret
  auto* interp = app.add_subcommand("interpret", "post-hoc analyses of trained runs");
  std::string mode, interp_cohort, interp_runs, interp_out = "interpret";
  interp->add_option("--mode", mode, "freq | hier | attn")->required()->check(CLI::IsMember({"freq", "hier", "attn"}));
  interp->add_option("--cohort", interp_cohort, "cohort directory")->required()->check(CLI::ExistingDirectory);
  interp->add_option("--runs", interp_runs, "output root of a train or loso command")->required()->check(
      CLI::ExistingDirectory);
  interp->add_option("--out", interp_out, "output directory")->capture_default_str();

  // gradcheck
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the full training loss");
  std::string grad_preset = "desk";
  std::size_t grad_batch = 4, coords = 4;
  std::uint64_t grad_seed = 1;
  double tolerance = 1e-4;
  grad->add_option("--preset", grad_preset, "desk or full")->check(CLI::IsMember({"desk", "full"}))->capture_default_str();
  grad->add_option("--batch", grad_batch, "subjects in the checked batch")->capture_default_str();
  grad->add_option("--coords", coords, "coordinates checked per parameter tensor")->capture_default_str();
  grad->add_option("--seed", grad_seed, "seed for data, initialisation and sampled coordinates")->capture_default_str();
  grad->add_option("--tolerance", tolerance, "maximum relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error kind=usage message=\"" << e.what() << "\"" << std::endl;
    return 1;
  }

  try {
    if (*synth) {
      SynthSpec spec = synth_preset == "full" ? full_synth(delta, synth_seed) : desk_synth(delta, synth_seed);
      if (sites || per_site)
        spec.site_sizes.assign(sites.value_or(spec.site_sizes.size()), per_site.value_or(spec.site_sizes.front()));
      if (noise) spec.noise = *noise;
      const Cohort c = generate_cohort(spec);
      save_cohort(c, synth_out);
      Log("synth")("dir", synth_out)("subjects", c.subjects.size())("regions", c.regions())("timepoints",
                                                                                          c.timepoints())("delta", delta);
      return 0;
    }
    if (*train) return run_cv_command("kfold", train_cohort, folds, train_flags, jobs, train_out);
    if (*loso) return run_cv_command("loso", loso_cohort, 0, loso_flags, jobs, loso_out);

    if (*eval) {
      const Cohort cohort = load_cohort(eval_cohort);
      const auto features = extract_all(cohort, read_run_experiment(eval_run).features);
      const LoadedRun run = load_run(eval_run, cohort.atlas, features);
      std::vector<std::size_t> idx = run.outcome.split.test;
      if (eval_all) {
        idx.resize(features.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      }
      const Model model = trained_model(run.experiment, cohort.atlas, run.outcome);
      const auto pred = predict(model, features, idx, run.outcome.templates, run.outcome.fit.best_tau);
      const SplitMetrics m = score(pred.probability, pred.labels);
      Log log("eval");
      log("id", run.outcome.split.id)("n", m.n)("AUC", m.auc)("ACC", m.acc)("SEN", m.sen)("SPE", m.spe)("F1", m.f1)(
          "AP", m.ap);
      const fs::path stored_path = fs::path(eval_run) / "metrics.json";
      if (!eval_all && fs::exists(stored_path)) {
        const json s = json::parse(read_file(stored_path));
        double diff = 0.0;
        for (auto [key, value] : {std::pair{"AUC", m.auc}, {"ACC", m.acc}, {"SEN", m.sen}, {"SPE", m.spe},
                                  {"F1", m.f1}, {"AP", m.ap}}) {
          const auto ref = stored(s, key);
          if (ref.has_value() != value.has_value()) diff = std::numeric_limits<double>::infinity();
          else if (ref) diff = std::max(diff, std::abs(*ref - *value));
        }
        log("stored_max_abs_diff", diff)("reproduced", diff <= 1e-10 ? 1 : 0);
      }
      return 0;
    }

    if (*interp) {
      const Cohort cohort = load_cohort(interp_cohort);
      const fs::path root = interp_runs;
      // Extraction settings are shared by all runs of one command.
      const json first = json::parse(read_file(root / "metrics.json"));
      const Experiment shared =
          read_run_experiment(root / first.at("per_split").at(0).at("id").get<std::string>());
      const auto features = extract_all(cohort, shared.features);
      const auto runs = load_runs(root, cohort.atlas, features);
      fs::create_directories(interp_out);
      const fs::path out = interp_out;

      if (mode == "freq") {
        CvResult cv;
        cv.protocol = runs.front().protocol;
        for (const auto& r : runs) cv.splits.push_back(r.outcome);
        const FrequencyAblation fa = frequency_ablation(cv, shared, cohort);
        for (std::size_t i = 0; i < fa.splits.size(); ++i)
          Log("band")("id", fa.splits[i])("auc_low", fa.auc_low[i])("auc_high", fa.auc_high[i]);
        if (fa.tested)
          Log("paired_t")("t", fa.test.t)("p", fa.test.p)("df", fa.test.df)("mean_difference", fa.test.mean_difference)(
              "degenerate", fa.test.degenerate ? 1 : 0);
        write_frequency_ablation(out / "freq_ablation.json", fa);
        Log("written")("file", (out / "freq_ablation.json").string());
        return 0;
      }

      std::vector<SubjectTrace> traces;
      std::vector<int> labels;
      for (const auto& r : runs) {
        const Model model = trained_model(r.experiment, cohort.atlas, r.outcome);
        auto t = collect_traces(model, features, r.outcome.split.test, r.outcome.templates, r.outcome.fit.best_tau);
        for (std::size_t i = 0; i < t.size(); ++i) {
          traces.push_back(std::move(t[i]));
          labels.push_back(features[r.outcome.split.test[i]].label);
        }
      }
      if (mode == "hier") {
        const auto stats = hierarchy_stats(traces, labels, cohort.atlas);
        write_hierarchy_stats(out / "hierarchy_stats.csv", stats);
        write_masks(out / "masks.csv", traces, labels, cohort.atlas);
        std::size_t significant = 0;
        for (const auto& s : stats) significant += s.level == 1 && s.p < 0.05;
        Log("hierarchy")("regions", cohort.regions())("subjects", traces.size())("significant_regions", significant);
        Log("written")("file", (out / "hierarchy_stats.csv").string());
      } else {
        const auto report = attention_report(traces, labels);
        write_attention_edges(out / "attention_edges.csv", report);
        write_chord(out / "chord.json", report);
        Log("attention")("subjects", traces.size())("edges", report.edges.size());
        Log("written")("file", (out / "attention_edges.csv").string());
      }
      return 0;
    }

    if (*grad) {
      SynthSpec spec = grad_preset == "full" ? full_synth(0.6, grad_seed) : desk_synth(0.6, grad_seed);
      const std::size_t half = std::max<std::size_t>(4, (grad_batch + 1) / 2);
      spec.site_sizes = {half, half};
      const Cohort c = generate_cohort(spec);
      auto features = extract_all(c, grad_preset == "full" ? full_features() : desk_features());
      std::vector<std::size_t> all(features.size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      const GroupTemplates templates = group_templates(features, all);
      features.resize(std::min(grad_batch, features.size()));
      Model model = make_model(preset_model(grad_preset, c.regions(), c.timepoints()), c.atlas, grad_seed);
      const GradientReport r = composite_gradcheck(model, features, templates, coords, 1e-5, grad_seed);
      for (const auto& [group, err] : r.groups) Log("group")("name", group)("max_rel_error", err);
      const bool pass = r.max_rel_error < tolerance;
      Log("gradcheck")("params", r.checks.size())("max_rel_error", r.max_rel_error)("worst", r.worst)(
          "kink_retries", r.kink_retries)("tolerance", tolerance)("pass", pass ? 1 : 0);
      return pass ? 0 : 3;
    }
  } catch (const Error& e) {
    static constexpr const char* kinds[] = {"", "usage", "data", "numerical"};
    std::cerr << "error kind=" << kinds[e.exit_code()] << " message=\"" << e.what() << "\"" << std::endl;
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error kind=data message=\"" << e.what() << "\"" << std::endl;
    return 2;
  }
  return 0;
}
