#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "nhgcat/tensor.hpp"

namespace nhgcat {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Tensor to_tensor(Tape& tape, const Matrix& m);

enum class Circuit { DMN = 0, SN, FPN, LN, RN };
inline constexpr std::size_t kCircuitCount = 5;
inline constexpr std::array<Circuit, kCircuitCount> kCircuits{Circuit::DMN, Circuit::SN, Circuit::FPN, Circuit::LN,
                                                              Circuit::RN};

std::string_view circuit_name(Circuit c);
Circuit parse_circuit(std::string_view name);  // throws DataError

class CircuitAtlas {
 public:
  CircuitAtlas() = default;
  // Validates: every circuit has at least two regions.
  explicit CircuitAtlas(std::vector<Circuit> region_circuit);

  // Contiguous even split; leftover regions go to the earliest circuits.
  static CircuitAtlas even_partition(std::size_t n_regions);
  static CircuitAtlas load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t regions() const { return region_circuit_.size(); }
  Circuit circuit_of(std::size_t region) const { return region_circuit_[region]; }
  const std::vector<std::size_t>& members(Circuit c) const { return members_[static_cast<std::size_t>(c)]; }

  bool operator==(const CircuitAtlas& other) const { return region_circuit_ == other.region_circuit_; }

 private:
  std::vector<Circuit> region_circuit_;
  std::array<std::vector<std::size_t>, kCircuitCount> members_;
};

struct Subject {
  std::string id;
  int site = 0;
  int label = 0;  // 0 = HC, 1 = MDD
  Matrix bold;    // regions x time points
  double age = 0.0;
  int sex = 0;
  double education = 0.0;
};

struct Cohort {
  std::vector<Subject> subjects;
  CircuitAtlas atlas;
  double tr = 2.0;

  std::size_t regions() const { return atlas.regions(); }
  std::size_t timepoints() const { return subjects.empty() ? 0 : static_cast<std::size_t>(subjects[0].bold.cols()); }
  std::vector<int> labels() const;
  std::vector<int> sites() const;
};

// Throws DataError when the subject breaks n >= 6, T >= 20 or has a flat row.
void validate_subject(const Subject& s);

// ---------------------------------------------------------------------------
// Synthetic cohort

struct SynthSpec {
  std::size_t regions = 16;
  std::size_t timepoints = 120;
  double tr = 2.0;
  std::vector<std::size_t> site_sizes{60, 60, 60, 60};
  double delta = 0.6;     // planted class difference
  double noise = 0.5;     // white-noise standard deviation
  double coupling = 0.2;  // baseline RN -> DMN latent coupling
  double global_signal = 0.3;
  double latent_lo_hz = 0.01;
  double latent_hi_hz = 0.08;
  std::uint64_t seed = 1;
};

SynthSpec desk_synth(double delta, std::uint64_t seed);
SynthSpec full_synth(double delta, std::uint64_t seed);

Cohort generate_cohort(const SynthSpec& spec);

// Cohort directory: cohort.json, atlas.txt, meta.json and series/<id>.csv.
void save_cohort(const Cohort& cohort, const std::filesystem::path& dir);
Cohort load_cohort(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Connectivity features

Matrix pearson_fc(const Matrix& bold);
Matrix fisher_z(const Matrix& fc);

struct StaticFeatures {
  Matrix fc_fisher;
  std::vector<double> variance;
  std::vector<double> low_freq_power;
};

// Band power of a mean-removed series: (2 / T^2) * sum over positive bins in
// [lo, hi] of |X_k|^2, i.e. the share of the sample variance in that band.
std::vector<double> band_power(const Matrix& bold, double lo_hz, double hi_hz, double tr);

std::size_t window_count(std::size_t timepoints, std::size_t win, std::size_t stride);
StaticFeatures sliding_window_features(const Matrix& bold, std::size_t win, std::size_t stride, double tr);

// Ideal rectangular band-pass in the DFT domain. Bins with frequency in
// [lo, hi] survive; the 0 Hz bin only when lo == 0.
Matrix bandpass_filter(const Matrix& bold, double lo_hz, double hi_hz, double tr);

struct Edge {
  std::size_t src = 0;
  std::size_t dst = 0;
  double weight = 0.0;
};

struct BrainGraph {
  std::size_t nodes = 0;
  std::size_t k = 0;
  std::vector<Edge> edges;  // grouped by src, strongest first

  // Out-neighbours of every node.
  std::vector<std::vector<std::size_t>> adjacency() const;
};

// Row-wise top-k by |weight|, self excluded, ties to the lower index.
BrainGraph knn_graph(const Matrix& fc, std::size_t k, bool symmetrize = false);

struct GroupTemplates {
  Matrix mdd;
  Matrix hc;

  const Matrix& for_label(int label) const { return label == 1 ? mdd : hc; }
};

// ---------------------------------------------------------------------------
// Model inputs

struct FeatureConfig {
  std::size_t window = 60;
  std::size_t stride = 30;
  std::size_t k = 8;
  bool symmetrize = false;
};

FeatureConfig desk_features();
FeatureConfig full_features();

struct SubjectFeatures {
  std::string id;
  int site = 0;
  int label = 0;
  Matrix x_static;    // n x (n + 5): FC row, log variance, log band power, demographics
  Matrix x_temporal;  // n x T, row-demeaned BOLD
  Matrix fc;          // subject Fisher-z FC (A1)
  BrainGraph graph;
};

std::size_t static_width(std::size_t regions);

SubjectFeatures extract_features(const Subject& s, const FeatureConfig& config, double tr);
std::vector<SubjectFeatures> extract_all(const Cohort& cohort, const FeatureConfig& config);

// Mean Fisher-z FC per label over `train` only. Throws DataError when a label
// is missing from the training set.
GroupTemplates group_templates(std::span<const SubjectFeatures> features, std::span<const std::size_t> train);

}  // namespace nhgcat
