#include "tpn/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

#include "binio.hpp"
#include "tpn/errors.hpp"
#include "tpn/lu.hpp"
#include "tpn/propagation.hpp"

namespace tpn {

AdamState AdamState::for_parameters(std::span<Parameter* const> params) {
  AdamState s;
  for (const auto* p : params) {
    s.m.emplace_back(p->value.numel(), 0.0);
    s.v.emplace_back(p->value.numel(), 0.0);
  }
  return s;
}

void adam_step(std::span<Parameter* const> params, AdamState& state, double lr) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw DimensionError("adam_step: optimizer holds " + std::to_string(state.m.size()) + " buffers for " +
                         std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (state.m[i].size() != params[i]->value.numel() || state.v[i].size() != params[i]->value.numel())
      throw DimensionError("adam_step: moment buffer for '" + params[i]->name + "' does not match " +
                           shape_str(params[i]->value.shape()));

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(AdamState::kBeta1, t);
  const double c2 = 1.0 - std::pow(AdamState::kBeta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& value = params[i]->value;
    auto theta = value.mutable_data();
    const auto g = value.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      m[j] = AdamState::kBeta1 * m[j] + (1.0 - AdamState::kBeta1) * gj;
      v[j] = AdamState::kBeta2 * v[j] + (1.0 - AdamState::kBeta2) * gj * gj;
      theta[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + AdamState::kEps);
    }
    value.zero_grad();
  }
}

double lr_at(std::size_t episode, double lr0, std::size_t halve_every) {
  if (halve_every == 0) return lr0;
  return lr0 * std::pow(0.5, static_cast<double>(episode / halve_every));
}

// ---- checkpoint -----------------------------------------------------------

Checkpoint::Checkpoint(const TrainConfig& cfg) : config(cfg), model(cfg.net, cfg.seed) {
  config.validate();
  adam = AdamState::for_parameters(model.parameters());
}

Checkpoint::Checkpoint(const Checkpoint& other)
    : config(other.config), model(other.model.clone()), adam(other.adam), episodes_seen(other.episodes_seen) {}

Checkpoint& Checkpoint::operator=(const Checkpoint& other) {
  if (this != &other) *this = Checkpoint(other);
  return *this;
}

namespace {

constexpr char kCheckpointMagic[4] = {'T', 'P', 'N', 'C'};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  binio::Writer w;
  w.raw(std::string_view(kCheckpointMagic, 4));
  w.u16(kCheckpointVersion);
  w.u16(0);
  const auto fp = ckpt.config.fingerprint();
  w.raw(fp);
  const std::string text = ckpt.config.to_text();
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.raw(text);
  w.u64(ckpt.episodes_seen);
  w.u64(ckpt.adam.step);

  const auto params = ckpt.model.parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    w.u16(static_cast<std::uint16_t>(p->name.size()));
    w.raw(p->name);
    w.u8(static_cast<std::uint8_t>(p->group));
    w.u8(static_cast<std::uint8_t>(p->value.rank()));
    for (auto d : p->value.shape()) w.u32(static_cast<std::uint32_t>(d));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (double x : params[i]->value.data()) w.f64(x);
    for (double x : ckpt.adam.m[i]) w.f64(x);
    for (double x : ckpt.adam.v[i]) w.f64(x);
  }
  w.crc32_trailer();
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  binio::Reader r(bytes, "checkpoint");
  if (r.str(4) != std::string_view(kCheckpointMagic, 4)) r.fail("bad magic (expected TPNC)", 0);
  if (const auto version = r.u16(); version != kCheckpointVersion)
    r.fail("unsupported version " + std::to_string(version), 4);
  if (const auto flags = r.u16(); flags != 0) r.fail("unknown flags " + std::to_string(flags), 6);
  std::array<std::uint8_t, 32> fp{};
  for (auto& b : fp) b = r.u8();
  const std::size_t text_at = r.offset();
  const std::string text = r.str(r.u32());

  TrainConfig cfg;
  try {
    cfg = TrainConfig::from_text(text);
    cfg.validate();
  } catch (const ConfigError& e) {
    r.fail(std::string("embedded config is invalid: ") + e.what(), text_at);
  }
  if (cfg.fingerprint() != fp) r.fail("config fingerprint mismatch", 8);

  Checkpoint ckpt(cfg);
  ckpt.episodes_seen = r.u64();
  ckpt.adam.step = r.u64();
  auto params = ckpt.model.parameters();
  const std::size_t table_at = r.offset();
  if (r.u32() != params.size())
    r.fail("parameter table has the wrong length for a " + to_string(cfg.net.variant) + " model", table_at);
  for (auto* p : params) {
    const std::size_t entry_at = r.offset();
    const std::string name = r.str(r.u16());
    const auto group = static_cast<ParamGroup>(r.u8());
    Shape shape(r.u8());
    for (auto& d : shape) d = r.u32();
    if (name != p->name || group != p->group || shape != p->value.shape())
      r.fail("parameter entry '" + name + "' " + shape_str(shape) + " does not match expected '" + p->name +
                 "' " + shape_str(p->value.shape()),
             entry_at);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (auto& x : params[i]->value.mutable_data()) x = r.f64();
    for (auto& x : ckpt.adam.m[i]) x = r.f64();
    for (auto& x : ckpt.adam.v[i]) x = r.f64();
  }
  r.expect_crc32_trailer();
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  binio::write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(binio::read_file(path)); }

void describe_checkpoint(const Checkpoint& ckpt, std::ostream& out) {
  const auto fp = ckpt.config.fingerprint();
  out << "format: TPNC v" << kCheckpointVersion << "\n"
      << "fingerprint: " << hex(fp) << "\n"
      << "episodes_seen: " << ckpt.episodes_seen << "\n"
      << "adam_step: " << ckpt.adam.step << "\n"
      << "parameters: " << ckpt.model.parameter_count() << "\n";
  for (const auto* p : ckpt.model.parameters())
    out << "  " << p->name << " " << shape_str(p->value.shape()) << " "
        << (p->group == ParamGroup::kEmbedding ? "embedding" : "sigma") << "\n";
  out << "config:\n" << ckpt.config.to_text();
}

// ---- training loop --------------------------------------------------------

MetricsSink csv_metrics_sink(std::ostream& out, bool write_header) {
  if (write_header) out << "episode,loss,lr,query_acc\n";
  return [&out](const EpisodeRecord& r) {
    char line[128];
    std::snprintf(line, sizeof(line), "%zu,%.9g,%.9g,%.6f\n", r.episode, r.loss, r.lr, r.query_acc);
    out << line;
  };
}

namespace {

[[noreturn]] void numerical_failure(const TrainConfig& cfg, std::size_t episode, const Inference* inf,
                                    const std::string& cause) {
  std::ostringstream msg;
  msg << cause << " at episode " << episode << " (seed " << cfg.seed << ", sampling substream " << episode << ")";
  if (inf != nullptr) {
    const auto s = inf->embedded.sigmas.data();
    const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
    msg << "; sigma range [" << *lo << ", " << *hi << "]";
    const std::size_t n = inf->graph.n;
    std::vector<double> system(n * n);
    const auto sn = inf->graph.normalized.data();
    for (std::size_t i = 0; i < n * n; ++i) system[i] = (i % (n + 1) == 0 ? 1.0 : 0.0) - cfg.alpha * sn[i];
    msg << "; cond1(I - alpha S) ~ " << condition_number_l1(system, n);
  }
  throw NumericalError(msg.str());
}

}  // namespace

EpisodeRecord train_episode(Checkpoint& ckpt, const Dataset& ds, std::size_t episode) {
  const auto& cfg = ckpt.config;
  Rng rng(cfg.seed, Stream::kSampling, episode);
  const Episode ep = sample_episode(ds, cfg.n_way, cfg.k_train, cfg.queries, rng);
  const Tensor batch = episode_batch(ds, ep);
  const auto labels = LabelMatrix::build(ep.support_labels, ep.query_labels, cfg.n_way);

  auto& tape = Tape::current();
  tape.reset();
  Inference inf;
  Tensor loss;
  try {
    inf = infer(ckpt.model, batch, labels, cfg.k_graph, cfg.alpha);
    loss = episode_loss(inf.result, labels, cfg.loss_scope);
  } catch (const SingularMatrixError& e) {
    tape.reset();
    numerical_failure(cfg, episode, inf.graph.n ? &inf : nullptr, e.what());
  }
  if (!std::isfinite(loss.item())) {
    tape.reset();
    numerical_failure(cfg, episode, &inf, "non-finite loss " + std::to_string(loss.item()));
  }
  backward(loss);
  tape.reset();

  EpisodeRecord rec;
  rec.episode = episode;
  rec.loss = loss.item();
  rec.lr = lr_at(episode, cfg.lr0, cfg.halve_every);
  adam_step(ckpt.model.parameters(), ckpt.adam, rec.lr);

  std::size_t correct = 0;
  const std::size_t s = ep.support.size();
  for (std::size_t q = 0; q < ep.query.size(); ++q) correct += inf.result.preds[s + q] == ep.query_labels[q];
  rec.query_acc = static_cast<double>(correct) / static_cast<double>(ep.query.size());
  ckpt.episodes_seen = episode + 1;
  return rec;
}

void train_until_done(Checkpoint& ckpt, const Dataset& ds, const TrainHooks& hooks) {
  const std::size_t every = ckpt.config.checkpoint_every;
  while (ckpt.episodes_seen < ckpt.config.max_episodes) {
    const auto rec = train_episode(ckpt, ds, ckpt.episodes_seen);
    if (hooks.metrics) hooks.metrics(rec);
    if (every > 0 && ckpt.episodes_seen % every == 0 && !hooks.checkpoint_path.empty())
      save_checkpoint(ckpt, hooks.checkpoint_path);
    if (hooks.periodic && hooks.periodic_every > 0 && ckpt.episodes_seen % hooks.periodic_every == 0)
      hooks.periodic(ckpt);
  }
  if (!hooks.checkpoint_path.empty()) save_checkpoint(ckpt, hooks.checkpoint_path);
}

Checkpoint train(const Dataset& ds, const TrainConfig& cfg, const TrainHooks& hooks) {
  Checkpoint ckpt(cfg);
  train_until_done(ckpt, ds, hooks);
  return ckpt;
}

// ---- gradient check -------------------------------------------------------

GradcheckReport gradcheck_model(TpnModel& model, const TrainConfig& cfg, const Dataset& ds,
                                const GradcheckOptions& opt) {
  Rng rng(cfg.seed, Stream::kSampling, 0);
  const Episode ep = sample_episode(ds, cfg.n_way, cfg.k_train, cfg.queries, rng);
  const Tensor batch = episode_batch(ds, ep);
  const auto labels = LabelMatrix::build(ep.support_labels, ep.query_labels, cfg.n_way);
  const auto loss_fn = [&] {
    const auto inf = infer(model, batch, labels, cfg.k_graph, cfg.alpha);
    return episode_loss(inf.result, labels, cfg.loss_scope);
  };

  auto params = model.parameters();
  auto& tape = Tape::current();
  tape.reset();
  for (auto* p : params) p->value.zero_grad();
  backward(loss_fn());
  tape.reset();

  GradcheckReport report;
  report.ok = true;
  report.parameter_count = model.parameter_count();
  for (auto* p : params) {
    ParamCheck pc;
    pc.name = p->name;
    pc.group = p->group;
    pc.ok = true;
    std::vector<double> analytic(p->value.numel(), 0.0);
    if (p->value.has_grad()) std::copy(p->value.grad().begin(), p->value.grad().end(), analytic.begin());
    auto values = p->value.mutable_data();
    double max_numeric = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      double plus, minus;
      {
        NoGradGuard guard;
        values[i] = saved + opt.h;
        plus = loss_fn().item();
        values[i] = saved - opt.h;
        minus = loss_fn().item();
      }
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * opt.h);
      const double abs_err = std::abs(numeric - analytic[i]);
      const double denom = std::max(std::abs(numeric), std::abs(analytic[i]));
      const double rel_err = denom > 0.0 ? abs_err / denom : 0.0;
      pc.max_abs_error = std::max(pc.max_abs_error, abs_err);
      if (denom > opt.zero_tol) pc.max_rel_error = std::max(pc.max_rel_error, rel_err);
      pc.max_analytic = std::max(pc.max_analytic, std::abs(analytic[i]));
      max_numeric = std::max(max_numeric, std::abs(numeric));
      if (abs_err > opt.abs_tol && rel_err > opt.rel_tol) pc.ok = false;
    }
    p->value.zero_grad();
    pc.vanishing = pc.max_analytic < opt.zero_tol && max_numeric < opt.zero_tol;
    auto& group_max = pc.group == ParamGroup::kEmbedding ? report.max_rel_embedding : report.max_rel_sigma;
    group_max = std::max(group_max, pc.max_rel_error);
    report.ok = report.ok && pc.ok;
    report.params.push_back(std::move(pc));
  }
  return report;
}

GradcheckReport gradcheck(const TrainConfig& cfg, const Dataset* ds, const GradcheckOptions& opt) {
  cfg.validate();
  Dataset fallback;
  if (ds == nullptr) {
    if (cfg.net.input_shape.size() != 1)
      throw ConfigError("gradcheck without a dataset needs a flat input_shape for synthetic data");
    SyntheticSpec spec;
    spec.kind = SyntheticKind::kGaussianBlobs;
    spec.classes = std::max<std::size_t>(cfg.n_way, 2);
    spec.per_class = 20;
    spec.dim = cfg.net.input_shape[0];
    spec.seed = cfg.seed;
    spec.train_fraction = 1.0;
    spec.val_fraction = 0.0;
    fallback = gen_synthetic(spec);
    ds = &fallback;
  }
  TpnModel model(cfg.net, cfg.seed);
  return gradcheck_model(model, cfg, *ds, opt);
}

}  // namespace tpn
