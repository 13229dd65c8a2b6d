#include "nhgcat/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include "nhgcat/errors.hpp"
#include "nhgcat/metrics.hpp"

namespace nhgcat {

TrainConfig desk_training() { return TrainConfig{}; }

TrainConfig full_training() {
  TrainConfig c;
  c.batch = 32;
  c.max_epochs = 300;
  return c;
}

void validate(const TrainConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw UsageError("invalid training config: " + what);
  };
  require(c.adam.lr >= 0.0, "lr must be >= 0");
  require(c.adam.weight_decay >= 0.0, "weight_decay must be >= 0");
  require(c.batch >= 1, "batch must be >= 1");
  require(c.max_epochs >= 1, "max_epochs must be >= 1");
  require(c.patience >= 1, "patience must be >= 1");
  require(c.kl_max >= 0.0, "kl_max must be >= 0");
  require(c.vlca_weight >= 0.0, "vlca_weight must be >= 0");
  require(c.mse_start >= 0.0 && c.mse_end >= 0.0, "mse weights must be >= 0");
  require(c.tau_start > 0.0 && c.tau_end > 0.0, "tau must be > 0");
  require(c.edge_dropout >= 0.0 && c.edge_dropout < 1.0, "edge_dropout must lie in [0, 1)");
  require(c.max_grad_norm > 0.0, "max_grad_norm must be > 0");
  require(c.validation_fraction > 0.0 && c.validation_fraction < 1.0, "validation_fraction must lie in (0, 1)");
}

Schedule schedules(std::size_t epoch, const TrainConfig& c) {
  const double e = static_cast<double>(epoch);
  const double progress = e / static_cast<double>(c.max_epochs);
  Schedule s;
  s.kl = c.kl_warmup == 0 ? c.kl_max : c.kl_max * std::min(1.0, e / static_cast<double>(c.kl_warmup));
  s.mse = c.mse_start + (c.mse_end - c.mse_start) * (1.0 - std::cos(std::numbers::pi * progress)) / 2.0;
  s.tau = c.tau_start * std::pow(c.tau_end / c.tau_start, progress);
  return s;
}

BrainGraph edge_dropout(const BrainGraph& graph, double p, RngStream& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw UsageError("edge_dropout: p must lie in [0, 1)");
  if (p == 0.0) return graph;
  BrainGraph out;
  out.nodes = graph.nodes;
  out.k = graph.k;
  for (const Edge& e : graph.edges)
    if (rng.uniform() >= p) out.edges.push_back(e);
  return out;
}

namespace {

std::string epoch_label(const RunIdentity& id, std::size_t epoch) {
  return id.label + "/epoch" + std::to_string(epoch);
}

void accumulate(LossBreakdown& sum, const LossBreakdown& b, double w) {
  sum.cls += w * b.cls;
  sum.kl += w * b.kl;
  sum.vlca += w * b.vlca;
  sum.mse += w * b.mse;
  sum.w_kl += w * b.w_kl;
  sum.w_vlca += w * b.w_vlca;
  sum.w_mse += w * b.w_mse;
  sum.total += w * b.total;
}

}  // namespace

EpochRecord train_epoch(Model& model, OptimizerState& optimizer, std::span<const SubjectFeatures> features,
                        std::span<const std::size_t> train, const GroupTemplates& templates,
                        const TrainConfig& config, std::size_t epoch, const RunIdentity& id) {
  if (train.empty()) throw UsageError("train_epoch: empty training split");
  const Schedule sched = schedules(epoch, config);
  const std::string label = epoch_label(id, epoch);

  std::vector<std::size_t> order(train.begin(), train.end());
  RngStream shuffle(id.seed, label + "/shuffle");
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);

  EpochRecord rec;
  rec.epoch = epoch;
  rec.tau = sched.tau;
  const LossWeights weights{sched.kl, config.vlca_weight, sched.mse};
  for (std::size_t start = 0; start < order.size(); start += config.batch) {
    const std::size_t stop = std::min(order.size(), start + config.batch);
    std::vector<BrainGraph> graphs;
    graphs.reserve(stop - start);
    for (std::size_t i = start; i < stop; ++i) {
      const SubjectFeatures& s = features[order[i]];
      RngStream rng(id.seed, label + "/edges/" + s.id);
      graphs.push_back(edge_dropout(s.graph, config.edge_dropout, rng));
    }
    std::vector<BatchItem> batch;
    for (std::size_t i = start; i < stop; ++i) batch.push_back({&features[order[i]], &graphs[i - start]});

    Tape tape;
    Binder bind(tape, model.params);
    ForwardOptions opt;
    opt.training = true;
    opt.tau = sched.tau;
    opt.seed = id.seed;
    opt.stream = label;
    TotalLoss loss;
    try {
      const BatchForward fwd = forward_batch(model, bind, batch, templates, opt);
      loss = total_loss(fwd.terms, weights, config.balance_ratio);
      tape.backward(loss.total);
      model.params.zero_grad();
      bind.accumulate_grads(model.params);
      optimizer_step(model.params, optimizer, config.max_grad_norm);
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + " (" + id.label + " epoch " + std::to_string(epoch) +
                           " batch " + std::to_string(start / config.batch) + ")");
    }
    accumulate(rec.loss, loss.parts, static_cast<double>(stop - start));
  }
  LossBreakdown mean;
  accumulate(mean, rec.loss, 1.0 / static_cast<double>(order.size()));
  rec.loss = mean;
  return rec;
}

Prediction predict(const Model& model, std::span<const SubjectFeatures> features, std::span<const std::size_t> idx,
                   const GroupTemplates& templates, double tau) {
  constexpr std::size_t kChunk = 16;
  Prediction out;
  double nll = 0.0;
  for (std::size_t start = 0; start < idx.size(); start += kChunk) {
    std::vector<BatchItem> batch;
    for (std::size_t i = start; i < std::min(idx.size(), start + kChunk); ++i)
      batch.push_back({&features[idx[i]], &features[idx[i]].graph});
    Tape tape;
    Binder bind(tape, model.params);
    ForwardOptions opt;
    opt.training = false;
    opt.tau = tau;
    opt.use_labels = false;
    opt.stream = "predict";
    const BatchForward fwd = forward_batch(model, bind, batch, templates, opt);
    for (std::size_t r = 0; r < batch.size(); ++r) {
      const int y = batch[r].subject->label;
      const double a = fwd.logits.at(r, 0), b = fwd.logits.at(r, 1);
      const double m = std::max(a, b);
      const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
      nll += lse - (y == 1 ? b : a);
      out.probability.push_back(1.0 / (1.0 + std::exp(a - b)));
      out.labels.push_back(y);
    }
  }
  if (!idx.empty()) out.loss = nll / static_cast<double>(idx.size());
  return out;
}

FitResult fit(Model& model, std::span<const SubjectFeatures> features, std::span<const std::size_t> train,
              std::span<const std::size_t> validation, const GroupTemplates& templates, const TrainConfig& config,
              const RunIdentity& id) {
  validate(config);
  if (train.empty()) throw UsageError("fit: empty training split");
  if (validation.empty()) throw UsageError("fit: empty validation split");
  OptimizerState optimizer = make_optimizer(model.params, config.adam);
  FitResult result;
  result.best = model.params;
  double best_auc = -std::numeric_limits<double>::infinity();
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    EpochRecord rec = train_epoch(model, optimizer, features, train, templates, config, epoch, id);
    const Prediction val = predict(model, features, validation, templates, rec.tau);
    rec.val_auc = roc_auc(val.probability, val.labels);
    rec.val_loss = val.loss;
    rec.improved = rec.val_auc > best_auc || (rec.val_auc == best_auc && rec.val_loss < best_loss);
    if (rec.improved) {
      best_auc = rec.val_auc;
      best_loss = rec.val_loss;
      result.best = model.params;
      result.best_epoch = epoch;
      result.best_tau = rec.tau;
      stale = 0;
    } else {
      ++stale;
    }
    result.history.push_back(rec);
    if (stale >= config.patience) break;
  }
  result.best_val_auc = best_auc;
  model.params = result.best;
  return result;
}

void split_validation(std::span<const SubjectFeatures> features, std::span<const std::size_t> indices,
                      double fraction, std::uint64_t seed, const std::string& label, std::vector<std::size_t>& train,
                      std::vector<std::size_t>& validation) {
  train.clear();
  validation.clear();
  for (int cls = 0; cls < 2; ++cls) {
    std::vector<std::size_t> members;
    for (std::size_t i : indices)
      if (features[i].label == cls) members.push_back(i);
    if (members.size() < 2)
      throw DataError("validation split: class " + std::to_string(cls) + " has fewer than 2 training subjects");
    RngStream rng(seed, label + "/validation/" + std::to_string(cls));
    for (std::size_t i = members.size(); i > 1; --i) std::swap(members[i - 1], members[rng.index(i)]);
    const auto held = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(fraction * static_cast<double>(members.size()))), 1,
        members.size() - 1);
    validation.insert(validation.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(held));
    train.insert(train.end(), members.begin() + static_cast<std::ptrdiff_t>(held), members.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(validation.begin(), validation.end());
}

namespace {

constexpr char kMagic[8] = {'N', 'H', 'G', 'C', 'A', 'T', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

void put_double(std::ostream& out, double v) { put(out, std::bit_cast<std::uint64_t>(v)); }

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = in.get();
    if (c == EOF) throw DataError(path.string() + ": truncated checkpoint");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<T>(v);
}

void put_entry(std::ostream& out, const std::string& name, const Shape& shape, std::span<const double> values) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t e : shape) put<std::uint64_t>(out, e);
  for (double v : values) put_double(out, v);
}

Matrix matrix_from(const Shape& shape, const std::vector<double>& values) {
  Matrix m(static_cast<Eigen::Index>(shape[0]), static_cast<Eigen::Index>(shape[1]));
  std::copy(values.begin(), values.end(), m.data());
  return m;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, const GroupTemplates& templates) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path.string() + ": cannot open for writing");
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, params.size() + 2);
  for (const auto& p : params) put_entry(out, p.name, p.shape, p.value);
  auto put_matrix = [&](const std::string& name, const Matrix& m) {
    put_entry(out, name, {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
              std::span<const double>(m.data(), static_cast<std::size_t>(m.size())));
  };
  put_matrix("template/mdd", templates.mdd);
  put_matrix("template/hc", templates.hc);
  if (!out) throw DataError(path.string() + ": write failed");
}

void load_checkpoint(const std::filesystem::path& path, ParamStore& params, GroupTemplates& templates) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string() + ": cannot open checkpoint");
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || !std::equal(std::begin(magic), std::end(magic), std::begin(kMagic)))
    throw DataError(path.string() + ": not a checkpoint (bad magic)");
  const auto version = get<std::uint32_t>(in, path);
  if (version != kVersion) throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  const auto count = get<std::uint64_t>(in, path);
  std::vector<bool> seen(params.size(), false);
  bool have_mdd = false, have_hc = false;
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto len = get<std::uint32_t>(in, path);
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto rank = get<std::uint32_t>(in, path);
    if (rank > 8) throw DataError(path.string() + ": entry '" + name + "' has implausible rank");
    Shape shape(rank);
    for (auto& e : shape) e = get<std::uint64_t>(in, path);
    std::vector<double> values(numel(shape));
    for (auto& v : values) v = std::bit_cast<double>(get<std::uint64_t>(in, path));
    if (name == "template/mdd" || name == "template/hc") {
      if (rank != 2) throw DataError(path.string() + ": template entry must be 2-D");
      (name == "template/mdd" ? templates.mdd : templates.hc) = matrix_from(shape, values);
      (name == "template/mdd" ? have_mdd : have_hc) = true;
      continue;
    }
    if (!params.contains(name)) throw DataError(path.string() + ": unknown parameter '" + name + "'");
    const ParamId id = params.find(name);
    if (params[id].shape != shape)
      throw DataError(path.string() + ": parameter '" + name + "' has shape " + to_string(shape) + ", model expects " +
                      to_string(params[id].shape));
    params[id].value = std::move(values);
    seen[id] = true;
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (!seen[i]) throw DataError(path.string() + ": missing parameter '" + params[i].name + "'");
  if (!have_mdd || !have_hc) throw DataError(path.string() + ": missing group templates");
}

GradientReport composite_gradcheck(Model& model, std::span<const SubjectFeatures> batch,
                                   const GroupTemplates& templates, std::size_t coords_per_param, double step,
                                   std::uint64_t seed) {
  std::vector<BatchItem> items;
  for (const auto& s : batch) items.push_back({&s, &s.graph});
  ForwardOptions opt;
  opt.training = true;
  opt.tau = 0.7;
  opt.seed = seed;
  opt.stream = "gradcheck";
  const LossWeights weights{0.1, 1.0, 0.5};
  auto loss = [&](Tape&, Binder& bind) {
    const BatchForward fwd = forward_batch(model, bind, items, templates, opt);
    return total_loss(fwd.terms, weights).total;
  };
  GradientReport r;
  r.checks = check_param_gradients(loss, model.params, coords_per_param, step, seed);
  for (const auto& c : r.checks) {
    r.kink_retries += c.result.kink_retries;
    const std::string group = c.name.substr(0, c.name.find('/'));
    auto it = std::find_if(r.groups.begin(), r.groups.end(), [&](const auto& g) { return g.first == group; });
    if (it == r.groups.end()) r.groups.emplace_back(group, c.result.max_rel_error);
    else it->second = std::max(it->second, c.result.max_rel_error);
    if (c.result.max_rel_error >= r.max_rel_error) {
      r.max_rel_error = c.result.max_rel_error;
      r.worst = c.name;
    }
  }
  return r;
}

void write_history(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path);
  if (!out) throw DataError(path.string() + ": cannot open for writing");
  out << "epoch,total,cls,kl,vlca,mse,w_kl,w_vlca,w_mse,tau,val_auc,val_loss,improved\n";
  out.precision(17);
  for (const auto& r : history) {
    const auto& l = r.loss;
    out << r.epoch << ',' << l.total << ',' << l.cls << ',' << l.kl << ',' << l.vlca << ',' << l.mse << ','
        << l.w_kl << ',' << l.w_vlca << ',' << l.w_mse << ',' << r.tau << ',' << r.val_auc << ',' << r.val_loss
        << ',' << (r.improved ? 1 : 0) << '\n';
  }
}

}  // namespace nhgcat
