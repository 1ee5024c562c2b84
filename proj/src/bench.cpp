#include "tpn/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "tpn/errors.hpp"
#include "tpn/graph.hpp"
#include "tpn/propagation.hpp"

namespace tpn {

double mean_of(std::span<const double> values) {
  if (values.empty()) return 0.0;
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

double ci95_half_width(std::span<const double> accuracies) {
  if (accuracies.empty()) return 0.0;
  const double m = mean_of(accuracies);
  double ss = 0.0;
  for (double a : accuracies) ss += (a - m) * (a - m);
  const double n = static_cast<double>(accuracies.size());
  return 1.96 * std::sqrt(ss / n) / std::sqrt(n);
}

EvalReport summarize(std::string tag, std::size_t n_way, std::size_t k_shot, std::size_t queries,
                     std::vector<double> accuracies, double seconds) {
  EvalReport r;
  r.tag = std::move(tag);
  r.n_way = n_way;
  r.k_shot = k_shot;
  r.queries = queries;
  r.episodes = accuracies.size();
  r.mean_acc = mean_of(accuracies);
  r.ci95 = ci95_half_width(accuracies);
  r.accuracies = std::move(accuracies);
  r.seconds = seconds;
  return r;
}

void EvalOptions::validate() const {
  if (n_way < 2) throw ConfigError("n_way must be at least 2");
  if (k_shot < 1) throw ConfigError("k_shot must be positive");
  if (queries < n_way || queries % n_way != 0) throw ConfigError("query count must be a positive multiple of n_way");
  if (episodes < 1) throw ConfigError("episode count must be positive");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  if (k_graph < 1) throw ConfigError("k_graph must be positive");
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void check_model_input(const TpnModel* model, const Dataset& ds) {
  if (model != nullptr && model->config().input_shape != ds.example_shape)
    throw ConfigError("model expects examples of shape " + shape_str(model->config().input_shape) +
                      " but the dataset holds " + shape_str(ds.example_shape));
}

double query_accuracy(std::span<const int> preds, std::size_t offset, std::span<const int> truth) {
  std::size_t correct = 0;
  for (std::size_t q = 0; q < truth.size(); ++q) correct += preds[offset + q] == truth[q];
  return static_cast<double>(correct) / static_cast<double>(truth.size());
}

// Flat per-example features: the model embedding, or the raw inputs.
Tensor episode_features(const TpnModel* model, const Tensor& batch) {
  if (model != nullptr) return model->features(batch);
  return reshape(batch, {batch.dim(0), batch.numel() / batch.dim(0)});
}

}  // namespace

Episode eval_episode(const Dataset& ds, const EvalOptions& opt, std::size_t e) {
  Rng rng(opt.seed, Stream::kEval, e);
  return sample_episode(ds, opt.n_way, opt.k_shot, opt.queries, rng);
}

EvalReport eval(const TpnModel& model, const Dataset& ds, const EvalOptions& opt, const std::string& tag) {
  opt.validate();
  check_model_input(&model, ds);
  const auto start = Clock::now();
  NoGradGuard no_grad;
  std::vector<double> accs;
  accs.reserve(opt.episodes);
  for (std::size_t e = 0; e < opt.episodes; ++e) {
    const Episode ep = eval_episode(ds, opt, e);
    const auto labels = LabelMatrix::build(ep.support_labels, ep.query_labels, opt.n_way);
    const auto inf = infer(model, episode_batch(ds, ep), labels, opt.k_graph, opt.alpha);
    accs.push_back(query_accuracy(inf.result.preds, ep.support.size(), ep.query_labels));
  }
  return summarize(tag, opt.n_way, opt.k_shot, opt.queries, std::move(accs), seconds_since(start));
}

std::string to_string(BaselineKind kind) {
  return kind == BaselineKind::kFixedSigmaLp ? "fixed_sigma_lp" : "prototype";
}

BaselineKind parse_baseline(const std::string& name) {
  if (name == "fixed_sigma_lp") return BaselineKind::kFixedSigmaLp;
  if (name == "prototype") return BaselineKind::kPrototype;
  throw ConfigError("unknown baseline '" + name + "' (expected fixed_sigma_lp or prototype)");
}

double median_pairwise_distance(const TpnModel* model, const Dataset& ds, const EvalOptions& opt,
                                std::size_t sample_episodes) {
  opt.validate();
  NoGradGuard no_grad;
  std::vector<double> dists;
  for (std::size_t e = 0; e < std::min(sample_episodes, opt.episodes); ++e) {
    const Episode ep = eval_episode(ds, opt, e);
    const Tensor f = episode_features(model, episode_batch(ds, ep));
    const auto d2 = pairwise_sqdist(f);
    const std::size_t n = f.dim(0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) dists.push_back(std::sqrt(std::max(0.0, d2.at(i, j))));
  }
  if (dists.empty()) throw ConfigError("median distance heuristic has no pairs");
  auto mid = dists.begin() + static_cast<std::ptrdiff_t>(dists.size() / 2);
  std::nth_element(dists.begin(), mid, dists.end());
  double med = *mid;
  if (dists.size() % 2 == 0) med = 0.5 * (med + *std::max_element(dists.begin(), mid));
  return med;
}

BaselineResult eval_baseline(BaselineKind kind, const TpnModel* model, const Dataset& ds, const BaselineOptions& opt) {
  const auto& eo = opt.eval;
  eo.validate();
  check_model_input(model, ds);
  const auto start = Clock::now();

  BaselineResult out;
  double sigma = 0.0;
  if (kind == BaselineKind::kFixedSigmaLp) {
    sigma = opt.sigma ? *opt.sigma : median_pairwise_distance(model, ds, eo);
    if (!(sigma > 0.0) || !std::isfinite(sigma))
      throw NumericalError("fixed length scale must be positive and finite, got " + std::to_string(sigma));
    out.sigma_used = sigma;
  }

  NoGradGuard no_grad;
  std::vector<double> accs;
  accs.reserve(eo.episodes);
  for (std::size_t e = 0; e < eo.episodes; ++e) {
    const Episode ep = eval_episode(ds, eo, e);
    const Tensor f = episode_features(model, episode_batch(ds, ep));
    const std::size_t n = f.dim(0), d = f.dim(1), s = ep.support.size();
    if (kind == BaselineKind::kFixedSigmaLp) {
      const auto labels = LabelMatrix::build(ep.support_labels, ep.query_labels, eo.n_way);
      const auto graph = build_graph(f, Tensor::full({n}, sigma), eo.k_graph);
      const auto res = propagate_closed(graph.normalized, labels.y, eo.alpha);
      accs.push_back(query_accuracy(res.preds, s, ep.query_labels));
      continue;
    }
    // nearest class mean, squared Euclidean, lowest class on ties
    std::vector<double> protos(eo.n_way * d, 0.0);
    std::vector<double> counts(eo.n_way, 0.0);
    const auto fv = f.data();
    for (std::size_t i = 0; i < s; ++i) {
      const auto c = static_cast<std::size_t>(ep.support_labels[i]);
      for (std::size_t j = 0; j < d; ++j) protos[c * d + j] += fv[i * d + j];
      counts[c] += 1.0;
    }
    for (std::size_t c = 0; c < eo.n_way; ++c)
      for (std::size_t j = 0; j < d; ++j) protos[c * d + j] /= counts[c];
    std::vector<int> preds(n, 0);
    for (std::size_t i = s; i < n; ++i) {
      double best = INFINITY;
      for (std::size_t c = 0; c < eo.n_way; ++c) {
        double dist = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double diff = fv[i * d + j] - protos[c * d + j];
          dist += diff * diff;
        }
        if (dist < best) {
          best = dist;
          preds[i] = static_cast<int>(c);
        }
      }
    }
    accs.push_back(query_accuracy(preds, s, ep.query_labels));
  }
  out.report = summarize(to_string(kind), eo.n_way, eo.k_shot, eo.queries, std::move(accs), seconds_since(start));
  return out;
}

EvalReport semi_eval(const TpnModel& model, const Dataset& ds, const SemiOptions& opt, const std::string& tag) {
  const auto& eo = opt.eval;
  eo.validate();
  check_model_input(&model, ds);
  if (opt.splits < 1) throw ConfigError("semi-supervised evaluation needs at least one split");
  const auto start = Clock::now();
  NoGradGuard no_grad;

  std::vector<double> accs;
  std::vector<double> split_means;
  for (std::size_t sp = 0; sp < opt.splits; ++sp) {
    const std::uint64_t split_seed = mix64(eo.seed ^ mix64(sp + 1));
    const auto part = make_partition(ds, opt.labeled_ratio, split_seed);
    std::vector<double> split_accs;
    for (std::size_t e = 0; e < eo.episodes; ++e) {
      Rng rng(split_seed, Stream::kEval, e);
      const auto se = sample_semi_episode(ds, part, eo.n_way, eo.k_shot, eo.queries, opt.pool_size,
                                          opt.distractor_classes, rng);
      const auto& ep = se.episode;
      const Tensor support = gather(ds, ep.support);
      const Tensor pool = se.unlabeled.empty() ? Tensor() : gather(ds, se.unlabeled);
      const Tensor queries = gather(ds, ep.query);
      const std::size_t row = shape_numel(ds.example_shape);
      std::size_t correct = 0;
      for (std::size_t q = 0; q < ep.query.size(); ++q) {
        Shape one{1};
        one.insert(one.end(), ds.example_shape.begin(), ds.example_shape.end());
        const auto qv = queries.data().subspan(q * row, row);
        const Tensor point = Tensor::from(one, std::vector<double>(qv.begin(), qv.end()));
        const int pred = classify_semi(model, support, ep.support_labels, eo.n_way, pool, point, eo.k_graph, eo.alpha);
        correct += pred == ep.query_labels[q];
      }
      split_accs.push_back(static_cast<double>(correct) / static_cast<double>(ep.query.size()));
    }
    split_means.push_back(mean_of(split_accs));
    accs.insert(accs.end(), split_accs.begin(), split_accs.end());
  }
  auto report = summarize(tag, eo.n_way, eo.k_shot, eo.queries, std::move(accs), seconds_since(start));
  double se = 0.0;
  if (split_means.size() > 1) {
    const double m = mean_of(split_means);
    double ss = 0.0;
    for (double v : split_means) ss += (v - m) * (v - m);
    const double k = static_cast<double>(split_means.size());
    se = std::sqrt(ss / (k - 1.0)) / std::sqrt(k);
  }
  report.std_error = se;
  return report;
}

// ---- reports --------------------------------------------------------------

void write_config_echo(std::ostream& out, const std::vector<std::pair<std::string, std::string>>& entries) {
  for (const auto& [k, v] : entries) out << "# " << k << " = " << v << "\n";
}

std::string report_row(const EvalReport& r, const ReportOptions& opt) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%zu,%zu,%zu,%zu,%.6f,%.6f,", r.tag.c_str(), r.n_way, r.k_shot, r.queries,
                r.episodes, r.mean_acc, r.ci95);
  std::string row = buf;
  if (opt.timing) {
    std::snprintf(buf, sizeof(buf), "%.3f", r.seconds);
    row += buf;
  }
  return row;
}

void write_report(std::ostream& out, std::span<const EvalReport> reports, const ReportOptions& opt,
                  bool with_stderr) {
  out << kReportHeader << (with_stderr ? ",stderr" : "") << "\n";
  for (const auto& r : reports) {
    out << report_row(r, opt);
    if (with_stderr) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), ",%.6f", r.std_error.value_or(0.0));
      out << buf;
    }
    out << "\n";
  }
}

std::string to_string(SweepParam p) {
  switch (p) {
    case SweepParam::kQuery: return "query";
    case SweepParam::kAlpha: return "alpha";
    case SweepParam::kGraphK: return "k_graph";
    case SweepParam::kTrainShot: return "train_shot";
  }
  return "query";
}

SweepParam parse_sweep_param(const std::string& name) {
  if (name == "query") return SweepParam::kQuery;
  if (name == "alpha") return SweepParam::kAlpha;
  if (name == "k_graph") return SweepParam::kGraphK;
  if (name == "train_shot") return SweepParam::kTrainShot;
  throw ConfigError("unknown sweep parameter '" + name + "' (valid: query, alpha, k_graph, train_shot)");
}

bool sweep_is_test_time(SweepParam p) { return p == SweepParam::kAlpha || p == SweepParam::kGraphK; }

namespace {

std::size_t as_count(double v, const std::string& what) {
  if (!(v >= 1.0) || v != std::floor(v)) throw ConfigError(what + " values must be positive integers");
  return static_cast<std::size_t>(v);
}

std::string value_text(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

}  // namespace

std::vector<SweepRow> sweep(const SweepRequest& request, const Dataset& train_ds, const Dataset& test_ds,
                            const TpnModel* trained) {
  if (request.values.empty()) throw ConfigError("sweep needs at least one value");
  const bool test_time = sweep_is_test_time(request.param);
  if (test_time && trained == nullptr)
    throw ConfigError("sweeping " + to_string(request.param) + " needs a trained checkpoint");

  std::vector<SweepRow> rows;
  for (double v : request.values) {
    EvalOptions eo = request.eval;
    TrainConfig cfg = request.base;
    switch (request.param) {
      case SweepParam::kQuery:
        eo.queries = as_count(v, "query") * eo.n_way;
        cfg.queries = as_count(v, "query") * cfg.n_way;
        break;
      case SweepParam::kAlpha:
        eo.alpha = v;
        break;
      case SweepParam::kGraphK:
        eo.k_graph = as_count(v, "k_graph");
        break;
      case SweepParam::kTrainShot:
        cfg.k_train = as_count(v, "train_shot");
        break;
    }
    SweepRow row{to_string(request.param), value_text(v), {}};
    if (test_time) {
      row.report = eval(*trained, test_ds, eo);
    } else {
      const auto ckpt = train(train_ds, cfg);
      row.report = eval(ckpt.model, test_ds, eo);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_sweep(std::ostream& out, std::span<const SweepRow> rows, const ReportOptions& opt) {
  out << "param,value," << kReportHeader << "\n";
  for (const auto& r : rows) out << r.param << "," << r.value << "," << report_row(r.report, opt) << "\n";
}

}  // namespace tpn
