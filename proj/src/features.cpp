#include <algorithm>
#include <cmath>
#include <numeric>

#include "fft.hpp"
#include "nhgcat/data.hpp"
#include "nhgcat/errors.hpp"

namespace nhgcat {

Tensor to_tensor(Tape& tape, const Matrix& m) {
  return tape.constant({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                       std::vector<double>(m.data(), m.data() + m.size()));
}

Matrix pearson_fc(const Matrix& bold) {
  const Eigen::Index n = bold.rows();
  Matrix centered = bold.colwise() - bold.rowwise().mean();
  Eigen::VectorXd norms = centered.rowwise().norm();
  for (Eigen::Index i = 0; i < n; ++i) {
    // Relative cutoff: a row of identical values leaves only rounding residue.
    const double scale = std::max(1.0, bold.row(i).cwiseAbs().maxCoeff());
    if (!(norms[i] > 1e-12 * scale * std::sqrt(static_cast<double>(bold.cols()))))
      throw DataError("pearson_fc: region " + std::to_string(i) + " has zero variance");
    centered.row(i) /= norms[i];
  }
  Matrix fc = centered * centered.transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    fc(i, i) = 1.0;
    for (Eigen::Index j = 0; j < n; ++j) fc(i, j) = std::clamp(fc(i, j), -1.0, 1.0);
  }
  // Symmetrise exactly; the product is symmetric only up to rounding.
  Matrix sym = 0.5 * (fc + fc.transpose());
  return sym;
}

Matrix fisher_z(const Matrix& fc) {
  constexpr double kLimit = 1.0 - 1e-7;
  Matrix z(fc.rows(), fc.cols());
  for (Eigen::Index i = 0; i < fc.rows(); ++i)
    for (Eigen::Index j = 0; j < fc.cols(); ++j)
      z(i, j) = i == j ? 0.0 : std::atanh(std::clamp(fc(i, j), -kLimit, kLimit));
  return z;
}

namespace {

double bin_hz(std::size_t k, std::size_t n, double tr) { return static_cast<double>(k) / (static_cast<double>(n) * tr); }

void check_band(double lo, double hi, double tr) {
  if (!(tr > 0)) throw UsageError("repetition time must be positive");
  const double nyquist = 1.0 / (2.0 * tr);
  if (!(lo >= 0.0 && lo < hi)) throw UsageError("band must satisfy 0 <= lo < hi");
  if (hi > nyquist + 1e-12)
    throw UsageError("band upper edge " + std::to_string(hi) + " Hz exceeds Nyquist " + std::to_string(nyquist) +
                     " Hz");
}

}  // namespace

std::vector<double> band_power(const Matrix& bold, double lo_hz, double hi_hz, double tr) {
  check_band(lo_hz, hi_hz, tr);
  const std::size_t T = static_cast<std::size_t>(bold.cols());
  std::vector<double> out(static_cast<std::size_t>(bold.rows()));
  std::vector<double> row(T);
  for (Eigen::Index r = 0; r < bold.rows(); ++r) {
    const double m = bold.row(r).mean();
    for (std::size_t t = 0; t < T; ++t) row[t] = bold(r, static_cast<Eigen::Index>(t)) - m;
    auto bins = detail::rfft(row);
    double p = 0.0;
    for (std::size_t k = 1; k < bins.size(); ++k) {
      const double f = bin_hz(k, T, tr);
      if (f < lo_hz || f > hi_hz) continue;
      // The Nyquist bin of an even-length series has no mirror image.
      const double w = (T % 2 == 0 && k == T / 2) ? 1.0 : 2.0;
      p += w * std::norm(bins[k]);
    }
    out[static_cast<std::size_t>(r)] = p / (static_cast<double>(T) * static_cast<double>(T));
  }
  return out;
}

std::size_t window_count(std::size_t timepoints, std::size_t win, std::size_t stride) {
  if (stride == 0) throw UsageError("window stride must be at least 1");
  if (win == 0 || win > timepoints)
    throw UsageError("window length " + std::to_string(win) + " exceeds series length " + std::to_string(timepoints));
  return (timepoints - win) / stride + 1;
}

StaticFeatures sliding_window_features(const Matrix& bold, std::size_t win, std::size_t stride, double tr) {
  const std::size_t T = static_cast<std::size_t>(bold.cols());
  const std::size_t windows = window_count(T, win, stride);
  StaticFeatures f;
  f.fc_fisher = Matrix::Zero(bold.rows(), bold.rows());
  for (std::size_t w = 0; w < windows; ++w) {
    const Matrix seg = bold.middleCols(static_cast<Eigen::Index>(w * stride), static_cast<Eigen::Index>(win));
    f.fc_fisher += fisher_z(pearson_fc(seg));
  }
  f.fc_fisher /= static_cast<double>(windows);
  f.variance.resize(static_cast<std::size_t>(bold.rows()));
  for (Eigen::Index r = 0; r < bold.rows(); ++r) {
    const double m = bold.row(r).mean();
    f.variance[static_cast<std::size_t>(r)] = (bold.row(r).array() - m).square().sum() / static_cast<double>(T - 1);
  }
  f.low_freq_power = band_power(bold, 0.01, std::min(0.1, 1.0 / (2.0 * tr)), tr);
  return f;
}

Matrix bandpass_filter(const Matrix& bold, double lo_hz, double hi_hz, double tr) {
  check_band(lo_hz, hi_hz, tr);
  const std::size_t T = static_cast<std::size_t>(bold.cols());
  Matrix out(bold.rows(), bold.cols());
  std::vector<double> row(T);
  for (Eigen::Index r = 0; r < bold.rows(); ++r) {
    for (std::size_t t = 0; t < T; ++t) row[t] = bold(r, static_cast<Eigen::Index>(t));
    auto bins = detail::rfft(row);
    for (std::size_t k = 0; k < bins.size(); ++k) {
      const double f = bin_hz(k, T, tr);
      const bool keep = k == 0 ? lo_hz == 0.0 : (f >= lo_hz && f <= hi_hz);
      if (!keep) bins[k] = 0.0;
    }
    auto filtered = detail::irfft(bins, T);
    for (std::size_t t = 0; t < T; ++t) out(r, static_cast<Eigen::Index>(t)) = filtered[t];
  }
  return out;
}

std::vector<std::vector<std::size_t>> BrainGraph::adjacency() const {
  std::vector<std::vector<std::size_t>> adj(nodes);
  for (const auto& e : edges) adj[e.src].push_back(e.dst);
  return adj;
}

BrainGraph knn_graph(const Matrix& fc, std::size_t k, bool symmetrize) {
  if (fc.rows() != fc.cols()) throw ShapeError("knn_graph: connectivity matrix is not square");
  if (k == 0) throw UsageError("knn_graph: k must be at least 1");
  const std::size_t n = static_cast<std::size_t>(fc.rows());
  BrainGraph g;
  g.nodes = n;
  g.k = k;
  const std::size_t keep = std::min(k, n - 1);
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < n; ++i) {
    order.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) order.push_back(j);
    auto w = [&](std::size_t j) { return std::fabs(fc(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))); };
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w(a) > w(b); });
    for (std::size_t r = 0; r < keep; ++r)
      g.edges.push_back({i, order[r], fc(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(order[r]))});
  }
  if (symmetrize) {
    std::vector<std::vector<bool>> has(n, std::vector<bool>(n, false));
    for (const auto& e : g.edges) has[e.src][e.dst] = true;
    const std::size_t directed = g.edges.size();
    for (std::size_t e = 0; e < directed; ++e) {
      const Edge edge = g.edges[e];
      if (!has[edge.dst][edge.src]) {
        has[edge.dst][edge.src] = true;
        g.edges.push_back({edge.dst, edge.src, edge.weight});
      }
    }
    std::stable_sort(g.edges.begin(), g.edges.end(), [](const Edge& a, const Edge& b) { return a.src < b.src; });
  }
  return g;
}

FeatureConfig desk_features() { return {60, 30, 8, false}; }
FeatureConfig full_features() { return {90, 45, 40, false}; }

std::size_t static_width(std::size_t regions) { return regions + 5; }

SubjectFeatures extract_features(const Subject& s, const FeatureConfig& config, double tr) {
  validate_subject(s);
  const auto n = static_cast<std::size_t>(s.bold.rows());
  StaticFeatures st = sliding_window_features(s.bold, config.window, config.stride, tr);
  SubjectFeatures out;
  out.id = s.id;
  out.site = s.site;
  out.label = s.label;
  out.x_static.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(static_width(n)));
  out.x_static.leftCols(static_cast<Eigen::Index>(n)) = st.fc_fisher;
  for (std::size_t r = 0; r < n; ++r) {
    const auto i = static_cast<Eigen::Index>(r);
    const auto c = static_cast<Eigen::Index>(n);
    out.x_static(i, c) = std::log(st.variance[r] + 1e-12);
    out.x_static(i, c + 1) = std::log(st.low_freq_power[r] + 1e-12);
    out.x_static(i, c + 2) = s.age / 100.0;
    out.x_static(i, c + 3) = static_cast<double>(s.sex);
    out.x_static(i, c + 4) = s.education / 20.0;
  }
  out.x_temporal = s.bold.colwise() - s.bold.rowwise().mean();
  out.fc = std::move(st.fc_fisher);
  out.graph = knn_graph(out.fc, config.k, config.symmetrize);
  return out;
}

std::vector<SubjectFeatures> extract_all(const Cohort& cohort, const FeatureConfig& config) {
  std::vector<SubjectFeatures> out;
  out.reserve(cohort.subjects.size());
  for (const auto& s : cohort.subjects) out.push_back(extract_features(s, config, cohort.tr));
  return out;
}

GroupTemplates group_templates(std::span<const SubjectFeatures> features, std::span<const std::size_t> train) {
  if (features.empty()) throw DataError("group_templates: no subjects");
  const auto n = features[0].fc.rows();
  GroupTemplates t{Matrix::Zero(n, n), Matrix::Zero(n, n)};
  std::size_t counts[2] = {0, 0};
  for (std::size_t i : train) {
    const auto& f = features[i];
    (f.label == 1 ? t.mdd : t.hc) += f.fc;
    ++counts[f.label == 1 ? 1 : 0];
  }
  if (counts[0] == 0 || counts[1] == 0)
    throw DataError(std::string("group_templates: training split has no ") + (counts[1] == 0 ? "MDD" : "HC") +
                    " subjects");
  t.mdd /= static_cast<double>(counts[1]);
  t.hc /= static_cast<double>(counts[0]);
  return t;
}

}  // namespace nhgcat
