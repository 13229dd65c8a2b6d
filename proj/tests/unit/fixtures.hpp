#pragma once

#include <vector>

#include "nhgcat/data.hpp"
#include "nhgcat/model.hpp"
#include "nhgcat/rng.hpp"

namespace nhgcat::testing {

struct SmallCohort {
  Cohort cohort;
  std::vector<SubjectFeatures> features;
  GroupTemplates templates;
};

inline SmallCohort small_cohort(std::uint64_t seed, std::size_t per_site = 4, double delta = 0.6) {
  SmallCohort s;
  SynthSpec spec = desk_synth(delta, seed);
  spec.site_sizes = {per_site, per_site};
  s.cohort = generate_cohort(spec);
  s.features = extract_all(s.cohort, desk_features());
  std::vector<std::size_t> all(s.features.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  s.templates = group_templates(s.features, all);
  return s;
}

inline std::vector<BatchItem> batch_of(const std::vector<SubjectFeatures>& f, std::size_t count) {
  std::vector<BatchItem> b;
  for (std::size_t i = 0; i < count && i < f.size(); ++i) b.push_back({&f[i], &f[i].graph});
  return b;
}

// Overwrites every parameter with Uniform(-scale, scale).
inline void randomize(ParamStore& params, double scale, std::uint64_t seed) {
  for (auto& p : params) {
    RngStream rng(seed, "randomize/" + p.name);
    for (auto& v : p.value) v = scale * (2.0 * rng.uniform() - 1.0);
  }
}

inline Tensor weighted_sum(Tape& tape, const Tensor& t, std::uint64_t seed) {
  RngStream rng(seed, "weights");
  std::vector<double> w(t.size());
  for (auto& v : w) v = rng.normal();
  return sum(mul(t, tape.constant(t.shape(), std::move(w))));
}

}  // namespace nhgcat::testing
