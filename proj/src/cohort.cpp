#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fft.hpp"
#include "nhgcat/data.hpp"
#include "nhgcat/errors.hpp"
#include "nhgcat/rng.hpp"

namespace nhgcat {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view circuit_name(Circuit c) {
  static constexpr std::string_view names[] = {"DMN", "SN", "FPN", "LN", "RN"};
  return names[static_cast<std::size_t>(c)];
}

Circuit parse_circuit(std::string_view name) {
  for (Circuit c : kCircuits)
    if (circuit_name(c) == name) return c;
  throw DataError("unknown circuit '" + std::string(name) + "' (expected DMN, SN, FPN, LN or RN)");
}

CircuitAtlas::CircuitAtlas(std::vector<Circuit> region_circuit) : region_circuit_(std::move(region_circuit)) {
  for (std::size_t r = 0; r < region_circuit_.size(); ++r)
    members_[static_cast<std::size_t>(region_circuit_[r])].push_back(r);
  for (Circuit c : kCircuits)
    if (members(c).size() < 2)
      throw DataError("atlas: circuit " + std::string(circuit_name(c)) + " has " + std::to_string(members(c).size()) +
                      " regions, need at least 2");
}

CircuitAtlas CircuitAtlas::even_partition(std::size_t n_regions) {
  if (n_regions < 2 * kCircuitCount)
    throw UsageError("atlas: " + std::to_string(n_regions) + " regions cannot give every circuit two regions");
  std::vector<Circuit> map;
  const std::size_t base = n_regions / kCircuitCount, extra = n_regions % kCircuitCount;
  for (std::size_t c = 0; c < kCircuitCount; ++c)
    map.insert(map.end(), base + (c < extra ? 1 : 0), kCircuits[c]);
  return CircuitAtlas(std::move(map));
}

CircuitAtlas CircuitAtlas::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open atlas file " + path.string());
  std::vector<std::pair<std::size_t, Circuit>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.find(',');
    std::size_t idx = 0;
    const char* end = line.data() + (comma == std::string::npos ? 0 : comma);
    auto [ptr, ec] = std::from_chars(line.data(), end, idx);
    if (comma == std::string::npos || ec != std::errc() || ptr != end)
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected region_index,circuit_name");
    try {
      rows.emplace_back(idx, parse_circuit(line.substr(comma + 1)));
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  std::vector<Circuit> map(rows.size());
  std::vector<bool> seen(rows.size(), false);
  for (auto [idx, c] : rows) {
    if (idx >= rows.size() || seen[idx])
      throw DataError(path.string() + ": region indices must cover 0.." + std::to_string(rows.size() - 1) +
                      " exactly once (bad index " + std::to_string(idx) + ")");
    seen[idx] = true;
    map[idx] = c;
  }
  return CircuitAtlas(std::move(map));
}

void CircuitAtlas::save(const fs::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write atlas file " + path.string());
  for (std::size_t r = 0; r < region_circuit_.size(); ++r) out << r << ',' << circuit_name(region_circuit_[r]) << '\n';
}

std::vector<int> Cohort::labels() const {
  std::vector<int> out;
  for (const auto& s : subjects) out.push_back(s.label);
  return out;
}

std::vector<int> Cohort::sites() const {
  std::vector<int> out;
  for (const auto& s : subjects) out.push_back(s.site);
  return out;
}

void validate_subject(const Subject& s) {
  if (s.bold.rows() < 6 || s.bold.cols() < 20)
    throw DataError("subject " + s.id + ": series is " + std::to_string(s.bold.rows()) + "x" +
                    std::to_string(s.bold.cols()) + ", need at least 6 regions and 20 time points");
  if (s.label != 0 && s.label != 1) throw DataError("subject " + s.id + ": label must be 0 or 1");
  for (Eigen::Index r = 0; r < s.bold.rows(); ++r) {
    if (!s.bold.row(r).allFinite()) throw DataError("subject " + s.id + ": region " + std::to_string(r) + " has non-finite values");
    if (s.bold.row(r).maxCoeff() == s.bold.row(r).minCoeff())
      throw DataError("subject " + s.id + ": region " + std::to_string(r) + " has zero variance");
  }
}

// ---------------------------------------------------------------------------

SynthSpec desk_synth(double delta, std::uint64_t seed) {
  SynthSpec s;
  s.delta = delta;
  s.seed = seed;
  return s;
}

SynthSpec full_synth(double delta, std::uint64_t seed) {
  SynthSpec s;
  s.regions = 116;
  s.timepoints = 180;
  s.delta = delta;
  s.seed = seed;
  return s;
}

namespace {

// Unit-variance noise restricted to [lo, hi] Hz.
std::vector<double> band_limited(RngStream& rng, std::size_t T, double tr, double lo, double hi) {
  std::vector<double> x(T);
  for (auto& v : x) v = rng.normal();
  auto bins = detail::rfft(x);
  for (std::size_t k = 0; k < bins.size(); ++k) {
    const double f = static_cast<double>(k) / (static_cast<double>(T) * tr);
    if (k == 0 || f < lo || f > hi) bins[k] = 0.0;
  }
  x = detail::irfft(bins, T);
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double sd = std::sqrt(ss / static_cast<double>(T));
  for (auto& v : x) v /= sd;
  return x;
}

std::string subject_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sub-%04zu", index + 1);
  return buf;
}

}  // namespace

Cohort generate_cohort(const SynthSpec& spec) {
  if (!(spec.delta >= 0.0)) throw UsageError("synth: delta must be >= 0");
  if (spec.site_sizes.empty()) throw UsageError("synth: at least one site is required");
  for (std::size_t m : spec.site_sizes)
    if (m < 4) throw UsageError("synth: every site needs at least 4 subjects");
  if (spec.timepoints < 20) throw UsageError("synth: need at least 20 time points");
  if (!(spec.noise > 0.0)) throw UsageError("synth: noise level must be positive");
  const double nyquist = 1.0 / (2.0 * spec.tr);
  if (!(spec.latent_hi_hz <= nyquist)) throw UsageError("synth: latent band exceeds Nyquist");

  Cohort cohort;
  cohort.atlas = CircuitAtlas::even_partition(spec.regions);
  cohort.tr = spec.tr;
  const std::size_t n = spec.regions, T = spec.timepoints;
  std::size_t next = 0;
  for (std::size_t site = 0; site < spec.site_sizes.size(); ++site) {
    RngStream site_rng(spec.seed, "site/" + std::to_string(site));
    const double gain = 0.85 + 0.3 * site_rng.uniform();
    std::vector<double> offset(n);
    for (auto& o : offset) o = 100.0 + 10.0 * site_rng.normal();
    const std::size_t m = spec.site_sizes[site];
    std::vector<int> labels(m, 0);
    for (std::size_t i = 0; i < m / 2; ++i) labels[i] = 1;
    for (std::size_t i = m; i > 1; --i) std::swap(labels[i - 1], labels[site_rng.index(i)]);

    for (std::size_t i = 0; i < m; ++i) {
      Subject s;
      s.id = subject_id(next++);
      s.site = static_cast<int>(site);
      s.label = labels[i];
      RngStream rng(spec.seed, "subject/" + s.id);
      RngStream demo = rng.derive("demographics");
      s.age = 18.0 + 47.0 * demo.uniform();
      s.sex = demo.uniform() < 0.5 ? 0 : 1;
      s.education = 6.0 + 14.0 * demo.uniform();

      RngStream lat = rng.derive("latent");
      std::vector<std::vector<double>> latent;
      for (std::size_t c = 0; c < kCircuitCount; ++c)
        latent.push_back(band_limited(lat, T, spec.tr, spec.latent_lo_hz, spec.latent_hi_hz));
      const auto global = band_limited(lat, T, spec.tr, spec.latent_lo_hz, spec.latent_hi_hz);
      const double effect = s.label == 1 ? spec.delta : 0.0;
      auto& dmn = latent[static_cast<std::size_t>(Circuit::DMN)];
      const auto& rn = latent[static_cast<std::size_t>(Circuit::RN)];
      for (std::size_t t = 0; t < T; ++t) dmn[t] = (1.0 + effect) * (dmn[t] + (spec.coupling + effect) * rn[t]);

      RngStream load = rng.derive("loading");
      RngStream noise = rng.derive("noise");
      s.bold.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(T));
      for (std::size_t r = 0; r < n; ++r) {
        const auto& src = latent[static_cast<std::size_t>(cohort.atlas.circuit_of(r))];
        const double loading = 0.6 + 0.4 * load.uniform();
        for (std::size_t t = 0; t < T; ++t) {
          const double v = loading * src[t] + spec.global_signal * global[t] + spec.noise * noise.normal();
          s.bold(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(t)) = gain * v + offset[r];
        }
      }
      cohort.subjects.push_back(std::move(s));
    }
  }
  return cohort;
}

// ---------------------------------------------------------------------------
// Cohort directory I/O

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_series(const Matrix& m, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write series file " + path.string());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (c) out << ',';
      out << format_double(m(r, c));
    }
    out << '\n';
  }
}

Matrix read_series(const fs::path& path, const std::string& id, std::size_t rows, std::size_t cols) {
  std::ifstream in(path);
  if (!in) throw DataError("subject " + id + ": missing series file " + path.string());
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  std::string line;
  std::size_t r = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(r + 1) + " (subject " + id + ")";
    if (r >= rows) throw DataError(where + ": more than " + std::to_string(rows) + " region rows");
    std::size_t c = 0;
    const char* p = line.data();
    const char* end = line.data() + line.size();
    while (p < end) {
      double v = 0.0;
      auto [next, ec] = std::from_chars(p, end, v);
      if (ec != std::errc()) throw DataError(where + ": malformed number at column " + std::to_string(c + 1));
      if (c < cols) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v;
      ++c;
      p = next;
      if (p < end) {
        if (*p != ',') throw DataError(where + ": expected ',' after column " + std::to_string(c));
        ++p;
      }
    }
    if (c != cols)
      throw DataError(where + ": expected " + std::to_string(cols) + " time points, found " + std::to_string(c));
    ++r;
  }
  if (r != rows)
    throw DataError(path.string() + " (subject " + id + "): expected " + std::to_string(rows) + " region rows, found " +
                    std::to_string(r));
  return m;
}

template <typename T>
T field(const json& entry, const char* key, std::size_t index) {
  if (!entry.contains(key))
    throw DataError("cohort.json: entry " + std::to_string(index) + " is missing '" + key + "'");
  try {
    return entry.at(key).get<T>();
  } catch (const json::exception&) {
    throw DataError("cohort.json: entry " + std::to_string(index) + " has a malformed '" + key + "'");
  }
}

}  // namespace

void save_cohort(const Cohort& cohort, const fs::path& dir) {
  fs::create_directories(dir / "series");
  json manifest = json::array();
  for (const auto& s : cohort.subjects) {
    const std::string rel = "series/" + s.id + ".csv";
    manifest.push_back({{"id", s.id},
                        {"site", s.site},
                        {"label", s.label},
                        {"age", s.age},
                        {"sex", s.sex},
                        {"education", s.education},
                        {"series_path", rel}});
    write_series(s.bold, dir / rel);
  }
  std::ofstream(dir / "cohort.json", std::ios::binary) << manifest.dump(2) << '\n';
  json meta = {{"tr", cohort.tr}, {"regions", cohort.regions()}, {"timepoints", cohort.timepoints()}};
  std::ofstream(dir / "meta.json", std::ios::binary) << meta.dump(2) << '\n';
  cohort.atlas.save(dir / "atlas.txt");
}

Cohort load_cohort(const fs::path& dir) {
  const fs::path manifest_path = dir / "cohort.json";
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot open cohort manifest " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  }
  if (!manifest.is_array()) throw DataError(manifest_path.string() + ": manifest must be a JSON array");
  if (manifest.empty()) throw DataError(manifest_path.string() + ": manifest lists no subjects");

  Cohort cohort;
  std::size_t T = 0;
  std::size_t n = 0;
  if (std::ifstream meta_in(dir / "meta.json"); meta_in) {
    try {
      json meta = json::parse(meta_in);
      cohort.tr = meta.value("tr", 2.0);
      T = meta.value("timepoints", std::size_t{0});
      n = meta.value("regions", std::size_t{0});
    } catch (const json::exception& e) {
      throw DataError((dir / "meta.json").string() + ": " + e.what());
    }
  }
  if (fs::exists(dir / "atlas.txt")) {
    cohort.atlas = CircuitAtlas::load(dir / "atlas.txt");
    if (n != 0 && n != cohort.atlas.regions())
      throw DataError("atlas.txt lists " + std::to_string(cohort.atlas.regions()) + " regions, meta.json says " +
                      std::to_string(n));
    n = cohort.atlas.regions();
  }

  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const json& e = manifest[i];
    if (!e.is_object()) throw DataError("cohort.json: entry " + std::to_string(i) + " is not an object");
    Subject s;
    s.id = field<std::string>(e, "id", i);
    s.site = field<int>(e, "site", i);
    s.label = field<int>(e, "label", i);
    s.age = field<double>(e, "age", i);
    s.sex = field<int>(e, "sex", i);
    s.education = field<double>(e, "education", i);
    const fs::path series = dir / field<std::string>(e, "series_path", i);
    if (n == 0 || T == 0) {
      // Without metadata, the first series file fixes the dimensions.
      std::ifstream probe(series);
      if (!probe) throw DataError("subject " + s.id + ": missing series file " + series.string());
      std::string line;
      std::size_t rows = 0, cols = 0;
      while (std::getline(probe, line))
        if (!line.empty()) {
          if (rows++ == 0) cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
        }
      if (n == 0) n = rows;
      if (T == 0) T = cols;
    }
    s.bold = read_series(series, s.id, n, T);
    validate_subject(s);
    cohort.subjects.push_back(std::move(s));
  }
  if (cohort.atlas.regions() == 0) cohort.atlas = CircuitAtlas::even_partition(n);
  return cohort;
}

}  // namespace nhgcat
