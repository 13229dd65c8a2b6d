#include "nhgcat/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "nhgcat/errors.hpp"

namespace nhgcat {

using nlohmann::json;

std::vector<SubjectTrace> collect_traces(const Model& model, std::span<const SubjectFeatures> features,
                                         std::span<const std::size_t> idx, const GroupTemplates& templates,
                                         double tau) {
  std::vector<SubjectTrace> out;
  for (std::size_t i : idx) {
    Tape tape;
    Binder bind(tape, model.params);
    const BatchItem item{&features[i], &features[i].graph};
    ForwardOptions opt;
    opt.tau = tau;
    opt.use_labels = false;
    opt.keep_traces = true;
    opt.stream = "trace";
    auto fwd = forward_batch(model, bind, std::span(&item, 1), templates, opt);
    out.push_back(std::move(fwd.traces.front()));
  }
  return out;
}

std::vector<SubjectFeatures> band_features(const Cohort& cohort, const FeatureConfig& config, Band band) {
  std::vector<SubjectFeatures> out;
  out.reserve(cohort.subjects.size());
  for (Subject s : cohort.subjects) {
    s.bold = bandpass_filter(s.bold, band.lo_hz, band.hi_hz, cohort.tr);
    out.push_back(extract_features(s, config, cohort.tr));
  }
  return out;
}

FrequencyAblation frequency_ablation(const CvResult& cv, const Experiment& experiment, const Cohort& cohort, Band low,
                                     Band high) {
  FrequencyAblation r;
  r.low = low;
  r.high = high;
  const auto low_features = band_features(cohort, experiment.features, low);
  const auto high_features = band_features(cohort, experiment.features, high);
  for (const auto& s : cv.splits) {
    const Model model = trained_model(experiment, cohort.atlas, s);
    const auto pl = predict(model, low_features, s.split.test, s.templates, s.fit.best_tau);
    const auto ph = predict(model, high_features, s.split.test, s.templates, s.fit.best_tau);
    r.splits.push_back(s.split.id);
    r.auc_low.push_back(roc_auc(pl.probability, pl.labels));
    r.auc_high.push_back(roc_auc(ph.probability, ph.labels));
  }
  if (r.splits.size() >= 2) {
    r.test = paired_t_test(r.auc_low, r.auc_high);
    r.tested = true;
  }
  return r;
}

std::vector<RegionLevelStat> hierarchy_stats(std::span<const SubjectTrace> traces, std::span<const int> labels,
                                             const CircuitAtlas& atlas) {
  if (traces.size() != labels.size()) throw UsageError("hierarchy_stats: traces and labels differ in length");
  const std::size_t n_mdd = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t n_hc = labels.size() - n_mdd;
  if (n_mdd == 0 || n_hc == 0) throw DataError("hierarchy_stats: both groups need at least one subject");
  const std::size_t depth = static_cast<std::size_t>(traces.front().masks[0].cols());
  if (depth < 2) throw UsageError("hierarchy_stats: needs at least 2 levels");

  // counts[region][group][level]
  std::vector<std::vector<double>> counts(atlas.regions(), std::vector<double>(2 * depth, 0.0));
  for (std::size_t s = 0; s < traces.size(); ++s) {
    for (Circuit c : kCircuits) {
      const Matrix& m = traces[s].masks[static_cast<std::size_t>(c)];
      const auto& members = atlas.members(c);
      if (static_cast<std::size_t>(m.rows()) != members.size() || static_cast<std::size_t>(m.cols()) != depth)
        throw DataError("hierarchy_stats: subject " + traces[s].id + " has a mask of the wrong shape");
      for (std::size_t r = 0; r < members.size(); ++r) {
        Eigen::Index level = 0;
        m.row(static_cast<Eigen::Index>(r)).maxCoeff(&level);
        counts[members[r]][(labels[s] == 1 ? 0 : depth) + static_cast<std::size_t>(level)] += 1.0;
      }
    }
  }

  std::vector<RegionLevelStat> out;
  double max_diff = 0.0;
  for (std::size_t region = 0; region < atlas.regions(); ++region) {
    const ChiSquare chi = chi_square_independence(counts[region], 2, depth);
    for (std::size_t l = 0; l < depth; ++l) {
      RegionLevelStat st;
      st.region = region;
      st.circuit = atlas.circuit_of(region);
      st.level = l + 1;
      st.count_mdd = static_cast<std::size_t>(counts[region][l]);
      st.count_hc = static_cast<std::size_t>(counts[region][depth + l]);
      st.p_mdd = counts[region][l] / static_cast<double>(n_mdd);
      st.p_hc = counts[region][depth + l] / static_cast<double>(n_hc);
      st.chi2 = chi.statistic;
      st.p = chi.p;
      max_diff = std::max(max_diff, std::abs(st.p_mdd - st.p_hc));
      out.push_back(st);
    }
  }
  for (auto& st : out) st.diff_norm = max_diff > 0.0 ? (st.p_mdd - st.p_hc) / max_diff : 0.0;
  return out;
}

AttentionReport attention_report(std::span<const SubjectTrace> traces, std::span<const int> labels) {
  if (traces.size() != labels.size()) throw UsageError("attention_report: traces and labels differ in length");
  const auto k = static_cast<Eigen::Index>(kCircuitCount);
  AttentionReport r;
  r.mean_hc = Matrix::Zero(k, k);
  r.mean_mdd = Matrix::Zero(k, k);
  std::size_t n_hc = 0, n_mdd = 0;
  for (std::size_t s = 0; s < traces.size(); ++s) {
    if (traces[s].attention.rows() != k || traces[s].attention.cols() != k)
      throw DataError("attention_report: subject " + traces[s].id + " has a malformed attention snapshot");
    if (labels[s] == 1) {
      r.mean_mdd += traces[s].attention;
      ++n_mdd;
    } else {
      r.mean_hc += traces[s].attention;
      ++n_hc;
    }
  }
  if (n_hc == 0 || n_mdd == 0) throw DataError("attention_report: both groups need at least one subject");
  r.mean_hc /= static_cast<double>(n_hc);
  r.mean_mdd /= static_cast<double>(n_mdd);

  double max_w = 0.0;
  for (int group : {0, 1}) {
    const Matrix& m = group == 1 ? r.mean_mdd : r.mean_hc;
    for (Eigen::Index src = 0; src < k; ++src) {
      std::vector<Eigen::Index> targets;
      for (Eigen::Index t = 0; t < k; ++t)
        if (t != src) targets.push_back(t);
      std::stable_sort(targets.begin(), targets.end(),
                       [&](Eigen::Index a, Eigen::Index b) { return m(src, a) > m(src, b); });
      for (std::size_t j = 0; j < 2; ++j) {
        AttentionEdge e;
        e.group = group;
        e.source = kCircuits[static_cast<std::size_t>(src)];
        e.target = kCircuits[static_cast<std::size_t>(targets[j])];
        e.raw = m(src, targets[j]);
        max_w = std::max(max_w, e.raw);
        r.edges.push_back(e);
      }
    }
  }
  for (auto& e : r.edges) e.norm = max_w > 0.0 ? e.raw / max_w : 0.0;
  return r;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError(path.string() + ": cannot open for writing");
  out.precision(17);
  return out;
}

const char* group_name(int g) { return g == 1 ? "MDD" : "HC"; }

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

void write_frequency_ablation(const std::filesystem::path& path, const FrequencyAblation& report) {
  json per_split = json::array();
  for (std::size_t i = 0; i < report.splits.size(); ++i)
    per_split.push_back({{"id", report.splits[i]}, {"auc_low", report.auc_low[i]}, {"auc_high", report.auc_high[i]}});
  json j = {{"low_band_hz", {report.low.lo_hz, report.low.hi_hz}},
            {"high_band_hz", {report.high.lo_hz, report.high.hi_hz}},
            {"per_split", per_split}};
  if (report.tested) {
    j["paired_t"] = {{"t", report.test.t},
                     {"p", report.test.p},
                     {"df", report.test.df},
                     {"mean_difference", report.test.mean_difference},
                     {"sd_difference", report.test.sd_difference},
                     {"degenerate", report.test.degenerate}};
  }
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}

void write_hierarchy_stats(const std::filesystem::path& path, std::span<const RegionLevelStat> stats) {
  auto out = open_out(path);
  out << "region,circuit,level,p_MDD,p_HC,diff_norm,chi2,p\n";
  for (const auto& s : stats)
    out << s.region << ',' << circuit_name(s.circuit) << ',' << s.level << ',' << s.p_mdd << ',' << s.p_hc << ','
        << s.diff_norm << ',' << s.chi2 << ',' << s.p << '\n';
}

void write_attention_edges(const std::filesystem::path& path, const AttentionReport& report) {
  auto out = open_out(path);
  out << "group,source,target,raw_weight,norm_weight\n";
  for (const auto& e : report.edges)
    out << group_name(e.group) << ',' << circuit_name(e.source) << ',' << circuit_name(e.target) << ',' << e.raw << ','
        << e.norm << '\n';
}

void write_chord(const std::filesystem::path& path, const AttentionReport& report) {
  json nodes = json::array();
  for (Circuit c : kCircuits) nodes.push_back(std::string(circuit_name(c)));
  json groups = json::object();
  for (int g : {0, 1}) {
    const Matrix& m = g == 1 ? report.mean_mdd : report.mean_hc;
    json kept = json::array(), pruned = json::array();
    std::vector<std::vector<bool>> retained(kCircuitCount, std::vector<bool>(kCircuitCount, false));
    for (const auto& e : report.edges) {
      if (e.group != g) continue;
      retained[static_cast<std::size_t>(e.source)][static_cast<std::size_t>(e.target)] = true;
      kept.push_back({{"source", circuit_name(e.source)}, {"target", circuit_name(e.target)}, {"weight", e.norm}});
    }
    for (std::size_t s = 0; s < kCircuitCount; ++s)
      for (std::size_t t = 0; t < kCircuitCount; ++t)
        if (s != t && !retained[s][t])
          pruned.push_back({{"source", circuit_name(kCircuits[s])},
                            {"target", circuit_name(kCircuits[t])},
                            {"raw_weight", m(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(t))}});
    groups[group_name(g)] = {{"mean_attention", matrix_json(m)}, {"edges", kept}, {"pruned", pruned}};
  }
  auto out = open_out(path);
  out << json{{"nodes", nodes}, {"groups", groups}}.dump(2) << '\n';
}

void write_masks(const std::filesystem::path& path, std::span<const SubjectTrace> traces, std::span<const int> labels,
                 const CircuitAtlas& atlas) {
  auto out = open_out(path);
  if (traces.empty()) return;
  const auto depth = traces.front().masks[0].cols();
  out << "region,circuit,subject,label";
  for (Eigen::Index l = 0; l < depth; ++l) out << ",M" << l + 1;
  out << '\n';
  for (std::size_t s = 0; s < traces.size(); ++s)
    for (Circuit c : kCircuits) {
      const auto& members = atlas.members(c);
      const Matrix& m = traces[s].masks[static_cast<std::size_t>(c)];
      for (std::size_t r = 0; r < members.size(); ++r) {
        out << members[r] << ',' << circuit_name(c) << ',' << traces[s].id << ',' << labels[s];
        for (Eigen::Index l = 0; l < depth; ++l) out << ',' << m(static_cast<Eigen::Index>(r), l);
        out << '\n';
      }
    }
}

}  // namespace nhgcat
