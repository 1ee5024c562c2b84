#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tpn/graph.hpp"
#include "tpn/networks.hpp"
#include "tpn/tensor.hpp"

namespace tpn {

inline constexpr double kDefaultAlpha = 0.99;

/// One-hot rows for the support examples, zero rows elsewhere, plus the
/// ground truth for every row (-1 where unknown).
struct LabelMatrix {
  Tensor y;                       // n x n_way, constant
  std::vector<char> support_mask;  // n
  std::vector<int> true_labels;    // n
  std::size_t n_way = 0;

  std::size_t rows() const { return support_mask.size(); }

  /// Rows ordered support first, then the remaining examples.
  static LabelMatrix build(std::span<const int> support_labels, std::span<const int> other_labels,
                           std::size_t n_way);
};

struct PropagationResult {
  Tensor scores;              // F, n x n_way
  std::vector<double> probs;  // row-wise softmax of F
  std::vector<int> preds;     // row argmax, lowest class on ties
  double alpha = kDefaultAlpha;

  std::size_t rows() const { return preds.size(); }
  std::size_t classes() const { return scores.dim(1); }
};

enum class LossScope { kUnion, kQueryOnly };

std::string to_string(LossScope scope);
LossScope parse_loss_scope(const std::string& name);

/// F* = (I - alpha S)^-1 Y through the differentiable solve.
PropagationResult propagate_closed(const Tensor& s_norm, const Tensor& y, double alpha);

/// F_{t+1} = alpha S F_t + (1 - alpha) Y from F_0 = Y, t_max steps.
PropagationResult propagate_iterative(const Tensor& s_norm, const Tensor& y, double alpha, std::size_t t_max);

/// Cross-entropy of the row-wise softmax of F over the selected rows
/// (all rows, or the non-support rows), summed.
Tensor episode_loss(const PropagationResult& result, const LabelMatrix& labels, LossScope scope = LossScope::kUnion);

/// Embeds `batch` (support rows first), builds the graph and propagates.
struct Inference {
  Embedded embedded;
  EpisodeGraph graph;
  PropagationResult result;
};
Inference infer(const TpnModel& model, const Tensor& batch, const LabelMatrix& labels,
                std::size_t k = kDefaultGraphK, double alpha = kDefaultAlpha);

/// Semi-supervised classification of one example: propagates over
/// support + unlabeled + {query} and returns the query row's argmax.
/// Each example tensor holds a batch (rows are examples).
int classify_semi(const TpnModel& model, const Tensor& support, std::span<const int> support_labels,
                  std::size_t n_way, const Tensor& unlabeled, const Tensor& query_point,
                  std::size_t k = kDefaultGraphK, double alpha = kDefaultAlpha);

/// Stacks example batches along the first axis (constant tensors only).
Tensor concat_rows(std::span<const Tensor> parts);

}  // namespace tpn
