#include "nhgcat/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <set>
#include <thread>

#include <nlohmann/json.hpp>

#include "nhgcat/config.hpp"
#include "nhgcat/errors.hpp"

namespace nhgcat {

using nlohmann::json;

std::vector<Split> stratified_kfold(std::span<const int> labels, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw UsageError("stratified_kfold: k must be >= 2");
  std::vector<Split> folds(k);
  for (std::size_t f = 0; f < k; ++f) folds[f].id = "fold" + std::to_string(f);
  std::size_t dealt = 0;
  for (int cls = 0; cls < 2; ++cls) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) members.push_back(i);
    if (members.size() < k)
      throw DataError("stratified_kfold: class " + std::to_string(cls) + " has " + std::to_string(members.size()) +
                      " subjects, fewer than k = " + std::to_string(k));
    RngStream rng(seed, "kfold/" + std::to_string(cls));
    for (std::size_t i = members.size(); i > 1; --i) std::swap(members[i - 1], members[rng.index(i)]);
    // Continue the deal where the previous class stopped so fold sizes stay within one.
    for (std::size_t j = 0; j < members.size(); ++j) folds[(dealt + j) % k].test.push_back(members[j]);
    dealt += members.size();
  }
  for (auto& f : folds) {
    std::sort(f.test.begin(), f.test.end());
    std::vector<bool> in_test(labels.size(), false);
    for (std::size_t i : f.test) in_test[i] = true;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (!in_test[i]) f.train.push_back(i);
  }
  return folds;
}

std::vector<Split> site_splits(std::span<const int> sites) {
  std::set<int> ids(sites.begin(), sites.end());
  if (ids.size() < 2) throw DataError("leave-one-site-out needs at least 2 sites, cohort has " + std::to_string(ids.size()));
  std::vector<Split> out;
  for (int site : ids) {
    Split s;
    s.id = "site" + std::to_string(site);
    for (std::size_t i = 0; i < sites.size(); ++i) (sites[i] == site ? s.test : s.train).push_back(i);
    out.push_back(std::move(s));
  }
  return out;
}

void audit_splits(std::span<const Split> splits, std::size_t n, bool covering) {
  std::vector<int> covered(n, 0);
  for (const auto& s : splits) {
    std::vector<int> role(n, 0);
    for (std::size_t i : s.train) {
      if (i >= n) throw DataError(s.id + ": training index " + std::to_string(i) + " out of range");
      role[i] |= 1;
    }
    for (std::size_t i : s.test) {
      if (i >= n) throw DataError(s.id + ": test index " + std::to_string(i) + " out of range");
      if (role[i] & 1) throw DataError(s.id + ": subject " + std::to_string(i) + " is in both train and test");
      if (role[i] & 2) throw DataError(s.id + ": subject " + std::to_string(i) + " repeated in test");
      role[i] |= 2;
      ++covered[i];
    }
  }
  if (!covering) return;
  for (std::size_t i = 0; i < n; ++i)
    if (covered[i] != 1)
      throw DataError("splits: subject " + std::to_string(i) + " is tested " + std::to_string(covered[i]) + " times");
}

SplitMetrics score(std::span<const double> probability, std::span<const int> labels) {
  SplitMetrics m;
  m.n = labels.size();
  const auto cm = confusion_metrics(probability, labels);
  m.acc = cm.acc;
  m.sen = cm.sen;
  m.spe = cm.spe;
  m.f1 = cm.f1;
  const auto pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (pos > 0 && pos < labels.size()) m.auc = roc_auc(probability, labels);
  if (pos > 0) m.ap = average_precision(probability, labels);
  return m;
}

namespace {

using Field = std::optional<double> SplitMetrics::*;
constexpr std::pair<const char*, Field> kFields[] = {
    {"ACC", &SplitMetrics::acc}, {"AUC", &SplitMetrics::auc}, {"SEN", &SplitMetrics::sen},
    {"SPE", &SplitMetrics::spe}, {"F1", &SplitMetrics::f1},   {"AP", &SplitMetrics::ap},
};

json metrics_json(const SplitMetrics& m) {
  json j = json::object();
  j["n"] = m.n;
  for (const auto& [name, field] : kFields)
    if (m.*field) j[name] = *(m.*field);
  return j;
}

}  // namespace

MetricSummary summarize(std::span<const SplitMetrics> rows) {
  MetricSummary s;
  for (const auto& [name, field] : kFields) {
    double sum = 0.0, wsum = 0.0, weight = 0.0;
    std::size_t count = 0;
    for (const auto& r : rows) {
      if (!(r.*field)) continue;
      sum += *(r.*field);
      wsum += static_cast<double>(r.n) * *(r.*field);
      weight += static_cast<double>(r.n);
      ++count;
    }
    if (count == 0) continue;
    const double mean = sum / static_cast<double>(count);
    s.mean.*field = mean;
    s.weighted.*field = wsum / weight;
    if (count > 1) {
      double ss = 0.0;
      for (const auto& r : rows)
        if (r.*field) ss += (*(r.*field) - mean) * (*(r.*field) - mean);
      s.sd.*field = std::sqrt(ss / static_cast<double>(count - 1));
    }
  }
  for (const auto& r : rows) s.weighted.n += r.n;
  s.mean.n = s.sd.n = s.weighted.n;
  return s;
}

SplitOutcome run_split(const CircuitAtlas& atlas, std::span<const SubjectFeatures> features, const Split& split,
                       const Experiment& experiment) {
  SplitOutcome out;
  out.split = split;
  split_validation(features, split.train, experiment.train.validation_fraction, experiment.seed, split.id,
                   out.inner_train, out.validation);
  out.templates = group_templates(features, split.train);
  Model model = make_model(experiment.model, atlas, experiment.seed);
  out.fit = fit(model, features, out.inner_train, out.validation, out.templates, experiment.train,
                RunIdentity{experiment.seed, split.id});
  out.test = predict(model, features, split.test, out.templates, out.fit.best_tau);
  out.metrics = score(out.test.probability, out.test.labels);
  return out;
}

Model trained_model(const Experiment& experiment, const CircuitAtlas& atlas, const SplitOutcome& outcome) {
  Model m = make_model(experiment.model, atlas, experiment.seed);
  m.params = outcome.fit.best;
  return m;
}

CvResult run_cv(const CircuitAtlas& atlas, std::span<const SubjectFeatures> features, std::vector<Split> splits,
                const Experiment& experiment, const std::string& protocol, std::size_t jobs) {
  if (features.empty()) throw DataError("cross-validation: empty cohort");
  audit_splits(splits, features.size(), true);
  CvResult result;
  result.protocol = protocol;
  result.splits.resize(splits.size());
  std::vector<std::exception_ptr> errors(splits.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < splits.size(); i = next++) {
      try {
        result.splits[i] = run_split(atlas, features, splits[i], experiment);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(jobs, 1, splits.size());
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<SplitMetrics> rows;
  for (const auto& s : result.splits) rows.push_back(s.metrics);
  result.summary = summarize(rows);
  return result;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError(path.string() + ": cannot open for writing");
  out << text;
}

void write_curve(const std::filesystem::path& path, const char* header, std::span<const CurvePoint> points) {
  std::ofstream out(path);
  out.precision(17);
  out << header << '\n';
  for (const auto& p : points) out << p.x << ',' << p.y << '\n';
}

std::vector<std::string> ids(std::span<const SubjectFeatures> f, std::span<const std::size_t> idx) {
  std::vector<std::string> out;
  for (std::size_t i : idx) out.push_back(f[i].id);
  return out;
}

}  // namespace

void write_cv(const std::filesystem::path& root, const CvResult& result, const Experiment& experiment,
              std::span<const SubjectFeatures> features) {
  std::filesystem::create_directories(root);
  json per_split = json::array();
  for (const auto& s : result.splits) {
    const auto dir = root / s.split.id;
    std::filesystem::create_directories(dir);
    json config = json::parse(experiment_json(experiment));
    config["run"] = {{"split", s.split.id}, {"protocol", result.protocol}, {"tau", s.fit.best_tau},
                     {"best_epoch", s.fit.best_epoch}};
    write_text(dir / "config.json", config.dump(2) + "\n");
    json split = {{"id", s.split.id},
                  {"train", ids(features, s.inner_train)},
                  {"validation", ids(features, s.validation)},
                  {"test", ids(features, s.split.test)}};
    write_text(dir / "split.json", split.dump(2) + "\n");
    write_history(dir / "history.csv", s.fit.history);
    save_checkpoint(dir / "checkpoint.bin", s.fit.best, s.templates);

    json m = metrics_json(s.metrics);
    m["id"] = s.split.id;
    m["protocol"] = result.protocol;
    m["best_epoch"] = s.fit.best_epoch;
    m["best_val_auc"] = s.fit.best_val_auc;
    write_text(dir / "metrics.json", m.dump(2) + "\n");
    per_split.push_back(m);

    std::ofstream pred(dir / "predictions.csv");
    pred.precision(17);
    pred << "id,label,probability\n";
    for (std::size_t r = 0; r < s.split.test.size(); ++r)
      pred << features[s.split.test[r]].id << ',' << s.test.labels[r] << ',' << s.test.probability[r] << '\n';

    const auto& p = s.test.probability;
    const auto& y = s.test.labels;
    const auto pos = std::count(y.begin(), y.end(), 1);
    if (pos > 0 && pos < static_cast<long>(y.size())) write_curve(dir / "roc.csv", "fpr,tpr", roc_curve(p, y));
    if (pos > 0) write_curve(dir / "pr.csv", "recall,precision", pr_curve(p, y));
    std::vector<double> thresholds;
    for (int t = 1; t < 20; ++t) thresholds.push_back(0.05 * t);
    std::ofstream dca(dir / "dca.csv");
    dca.precision(17);
    dca << "threshold,model,treat_all,treat_none\n";
    for (const auto& d : decision_curve(p, y, thresholds))
      dca << d.threshold << ',' << d.model << ',' << d.treat_all << ',' << d.treat_none << '\n';
  }
  json agg = {{"protocol", result.protocol},
              {"per_split", per_split},
              {"mean", metrics_json(result.summary.mean)},
              {"sd", metrics_json(result.summary.sd)},
              {"weighted_avg", metrics_json(result.summary.weighted)}};
  write_text(root / "metrics.json", agg.dump(2) + "\n");
}

namespace {

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string() + ": cannot open");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::vector<std::size_t> resolve(const json& ids, const std::map<std::string, std::size_t>& index,
                                 const std::filesystem::path& path) {
  std::vector<std::size_t> out;
  for (const auto& id : ids) {
    const auto it = index.find(id.get<std::string>());
    if (it == index.end()) throw DataError(path.string() + ": subject '" + id.get<std::string>() + "' not in cohort");
    out.push_back(it->second);
  }
  return out;
}

}  // namespace

Experiment read_run_experiment(const std::filesystem::path& dir) {
  json config = read_json(dir / "config.json");
  config.erase("run");
  return merge_experiment(Experiment{}, config.dump(), (dir / "config.json").string());
}

LoadedRun load_run(const std::filesystem::path& dir, const CircuitAtlas& atlas,
                   std::span<const SubjectFeatures> features) {
  LoadedRun r;
  json config = read_json(dir / "config.json");
  if (!config.contains("run")) throw DataError((dir / "config.json").string() + ": missing 'run' section");
  const json run = config["run"];
  config.erase("run");
  try {
    r.experiment = merge_experiment(Experiment{}, config.dump(), (dir / "config.json").string());
    r.protocol = run.at("protocol").get<std::string>();
    r.outcome.split.id = run.at("split").get<std::string>();
    r.outcome.fit.best_tau = run.at("tau").get<double>();
    r.outcome.fit.best_epoch = run.at("best_epoch").get<std::size_t>();
  } catch (const json::exception& e) {
    throw DataError((dir / "config.json").string() + ": " + e.what());
  }

  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < features.size(); ++i) index[features[i].id] = i;
  const auto split_path = dir / "split.json";
  const json split = read_json(split_path);
  try {
    r.outcome.inner_train = resolve(split.at("train"), index, split_path);
    r.outcome.validation = resolve(split.at("validation"), index, split_path);
    r.outcome.split.test = resolve(split.at("test"), index, split_path);
  } catch (const json::exception& e) {
    throw DataError(split_path.string() + ": " + e.what());
  }
  r.outcome.split.train = r.outcome.inner_train;
  r.outcome.split.train.insert(r.outcome.split.train.end(), r.outcome.validation.begin(), r.outcome.validation.end());
  std::sort(r.outcome.split.train.begin(), r.outcome.split.train.end());

  Model shape = make_model(r.experiment.model, atlas, r.experiment.seed);
  r.outcome.fit.best = shape.params;
  load_checkpoint(dir / "checkpoint.bin", r.outcome.fit.best, r.outcome.templates);
  return r;
}

std::vector<LoadedRun> load_runs(const std::filesystem::path& root, const CircuitAtlas& atlas,
                                 std::span<const SubjectFeatures> features) {
  const json agg = read_json(root / "metrics.json");
  std::vector<LoadedRun> out;
  try {
    for (const auto& s : agg.at("per_split")) out.push_back(load_run(root / s.at("id").get<std::string>(), atlas, features));
  } catch (const json::exception& e) {
    throw DataError((root / "metrics.json").string() + ": " + e.what());
  }
  if (out.empty()) throw DataError((root / "metrics.json").string() + ": no runs listed");
  return out;
}

}  // namespace nhgcat
