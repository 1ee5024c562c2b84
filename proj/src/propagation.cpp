#include "tpn/propagation.hpp"

#include <algorithm>
#include <cmath>

#include "tpn/errors.hpp"

namespace tpn {

LabelMatrix LabelMatrix::build(std::span<const int> support_labels, std::span<const int> other_labels,
                               std::size_t n_way) {
  if (n_way == 0) throw ConfigError("label matrix needs at least one class");
  LabelMatrix lm;
  lm.n_way = n_way;
  const std::size_t n = support_labels.size() + other_labels.size();
  std::vector<double> y(n * n_way, 0.0);
  for (std::size_t i = 0; i < support_labels.size(); ++i) {
    const int c = support_labels[i];
    if (c < 0 || static_cast<std::size_t>(c) >= n_way)
      throw ConfigError("support label " + std::to_string(c) + " outside [0," + std::to_string(n_way) + ")");
    y[i * n_way + static_cast<std::size_t>(c)] = 1.0;
    lm.support_mask.push_back(1);
    lm.true_labels.push_back(c);
  }
  for (int c : other_labels) {
    lm.support_mask.push_back(0);
    lm.true_labels.push_back(c);
  }
  lm.y = Tensor::from({n, n_way}, std::move(y));
  return lm;
}

std::string to_string(LossScope scope) { return scope == LossScope::kUnion ? "union" : "query_only"; }

LossScope parse_loss_scope(const std::string& name) {
  if (name == "union") return LossScope::kUnion;
  if (name == "query_only") return LossScope::kQueryOnly;
  throw ConfigError("unknown loss scope '" + name + "' (expected union or query_only)");
}

namespace {

PropagationResult finalize(Tensor scores, double alpha) {
  PropagationResult r;
  r.alpha = alpha;
  const std::size_t n = scores.dim(0), c = scores.dim(1);
  r.probs.resize(n * c);
  r.preds.resize(n);
  const auto f = scores.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = f.data() + i * c;
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (row[j] > row[best]) best = j;
    r.preds[i] = static_cast<int>(best);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - row[best]);
    for (std::size_t j = 0; j < c; ++j) r.probs[i * c + j] = std::exp(row[j] - row[best]) / z;
  }
  r.scores = std::move(scores);
  return r;
}

void check_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1), got " + std::to_string(alpha));
}

}  // namespace

PropagationResult propagate_closed(const Tensor& s_norm, const Tensor& y, double alpha) {
  check_alpha(alpha);
  const std::size_t n = s_norm.dim(0);
  auto system = sub(Tensor::eye(n), scale(s_norm, alpha));
  return finalize(linsolve(system, y), alpha);
}

PropagationResult propagate_iterative(const Tensor& s_norm, const Tensor& y, double alpha, std::size_t t_max) {
  check_alpha(alpha);
  if (t_max < 1) throw ConfigError("propagate_iterative: t_max must be at least 1");
  const auto anchor = scale(y, 1.0 - alpha);
  Tensor f = y;
  for (std::size_t t = 0; t < t_max; ++t) f = add(scale(matmul(s_norm, f), alpha), anchor);
  return finalize(f, alpha);
}

Tensor episode_loss(const PropagationResult& result, const LabelMatrix& labels, LossScope scope) {
  if (labels.rows() != result.rows())
    throw DimensionError("episode_loss: " + std::to_string(labels.rows()) + " labels for " +
                         std::to_string(result.rows()) + " rows");
  std::vector<char> mask(labels.rows());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = scope == LossScope::kUnion || !labels.support_mask[i];
    if (mask[i] && labels.true_labels[i] < 0)
      throw ConfigError("episode_loss: row " + std::to_string(i) + " is in scope but has no ground-truth label");
  }
  return row_softmax_ce(result.scores, labels.true_labels, mask);
}

Inference infer(const TpnModel& model, const Tensor& batch, const LabelMatrix& labels, std::size_t k, double alpha) {
  Inference inf;
  inf.embedded = model.embed(batch);
  inf.graph = build_graph(inf.embedded.flat, inf.embedded.sigmas, k);
  inf.result = propagate_closed(inf.graph.normalized, labels.y, alpha);
  return inf;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  Shape tail;
  std::size_t rows = 0;
  std::vector<double> values;
  for (const auto& p : parts) {
    if (!p.defined()) continue;
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (rows == 0) {
      tail = t;
    } else if (t != tail) {
      throw DimensionError("concat_rows: " + shape_str(p.shape()) + " does not match trailing shape " + shape_str(tail));
    }
    rows += p.dim(0);
    values.insert(values.end(), p.data().begin(), p.data().end());
  }
  if (rows == 0) throw DimensionError("concat_rows: nothing to concatenate");
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return Tensor::from(std::move(shape), std::move(values));
}

int classify_semi(const TpnModel& model, const Tensor& support, std::span<const int> support_labels,
                  std::size_t n_way, const Tensor& unlabeled, const Tensor& query_point, std::size_t k,
                  double alpha) {
  if (query_point.dim(0) != 1) throw DimensionError("classify_semi: expects exactly one query example");
  const std::size_t pool = unlabeled.defined() ? unlabeled.dim(0) : 0;
  const Tensor parts[] = {support, unlabeled, query_point};
  const auto batch = concat_rows(parts);
  const std::vector<int> unknown(pool + 1, -1);
  const auto labels = LabelMatrix::build(support_labels, unknown, n_way);
  const auto inf = infer(model, batch, labels, k, alpha);
  return inf.result.preds.back();
}

}  // namespace tpn
