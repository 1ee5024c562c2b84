#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "tpn/rng.hpp"
#include "tpn/tensor.hpp"

namespace tpn {

enum class EmbeddingVariant { kMlp, kConv4 };

std::string to_string(EmbeddingVariant v);
EmbeddingVariant parse_variant(const std::string& name);

struct NetworkConfig {
  EmbeddingVariant variant = EmbeddingVariant::kMlp;
  Shape input_shape;          // per example: {d} for MLP, {C, H, W} for conv-4
  std::size_t embed_dim = 16;  // MLP output width
  std::size_t hidden = 64;     // MLP hidden width
  std::size_t filters = 64;    // conv-4 filters per block
};

enum class ParamGroup { kEmbedding, kSigma };

struct Parameter {
  std::string name;
  ParamGroup group;
  Tensor value;
};

/// f_phi: four conv blocks (3x3 conv, batchnorm, relu, 2x2 max-pool), or the
/// MLP d -> hidden -> hidden -> embed_dim used for low-dimensional data.
class EmbeddingNet {
 public:
  EmbeddingNet(const NetworkConfig& cfg, Rng& rng);

  /// `batch` is B x input_shape. Batchnorm statistics come from this batch,
  /// so pass support and query together.
  Tensor forward(const Tensor& batch) const;

  /// Per-example output shape: {64, h, w} for conv-4, {embed_dim} for MLP.
  Shape feature_shape() const { return feature_shape_; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

 private:
  NetworkConfig cfg_;
  Shape feature_shape_;
  std::vector<Parameter> params_;
};

/// g_phi: per-example length scale sigma_i = softplus(raw_i) + 0.01.
///   conv pairing: two conv blocks (64 and 1 filters) then FC 8 -> FC 1.
///   MLP pairing:  embed_dim -> 8 -> relu -> 1.
class SigmaNet {
 public:
  static constexpr double kSigmaFloor = 0.01;
  static constexpr double kInitialRaw = 1.0;

  SigmaNet(const NetworkConfig& cfg, const Shape& feature_shape, Rng& rng);

  /// Returns a length-B tensor of strictly positive scales.
  Tensor forward(const Tensor& features) const;

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

 private:
  NetworkConfig cfg_;
  Shape feature_shape_;
  std::vector<Parameter> params_;
};

struct Embedded {
  Tensor feature_map;  // B x feature_shape
  Tensor flat;         // B x prod(feature_shape)
  Tensor sigmas;       // B
};

/// Embedding and length-scale networks trained jointly.
class TpnModel {
 public:
  TpnModel(const NetworkConfig& cfg, std::uint64_t seed);

  const NetworkConfig& config() const { return cfg_; }

  Embedded embed(const Tensor& batch) const;
  /// Embedding only, flattened to B x d.
  Tensor features(const Tensor& batch) const;

  /// Embedding parameters followed by sigma-net parameters, in a fixed order.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t parameter_count() const;

  /// Deep copy with no gradient state.
  TpnModel clone() const;

 private:
  NetworkConfig cfg_;
  EmbeddingNet embedding_;
  SigmaNet sigma_;
};

}  // namespace tpn
