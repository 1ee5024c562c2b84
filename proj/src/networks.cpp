#include "tpn/networks.hpp"

#include <cmath>

#include "tpn/errors.hpp"

namespace tpn {

std::string to_string(EmbeddingVariant v) { return v == EmbeddingVariant::kMlp ? "mlp" : "conv4"; }

EmbeddingVariant parse_variant(const std::string& name) {
  if (name == "mlp") return EmbeddingVariant::kMlp;
  if (name == "conv4") return EmbeddingVariant::kConv4;
  throw ConfigError("unknown embedding variant '" + name + "' (expected mlp or conv4)");
}

namespace {

constexpr std::size_t kConvBlocks = 4;
constexpr std::size_t kSigmaHidden = 8;

// He-style uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng, double gain = 1.0) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor zeros_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }
Tensor ones_param(Shape shape) { return Tensor::full(std::move(shape), 1.0, true); }

void add_conv_block(std::vector<Parameter>& params, const std::string& prefix, ParamGroup group,
                    std::size_t in_ch, std::size_t out_ch, Rng& rng) {
  params.push_back({prefix + ".conv.w", group, he_uniform({out_ch, in_ch, 3, 3}, in_ch * 9, rng)});
  params.push_back({prefix + ".conv.b", group, zeros_param({out_ch})});
  params.push_back({prefix + ".bn.gamma", group, ones_param({out_ch})});
  params.push_back({prefix + ".bn.beta", group, zeros_param({out_ch})});
}

void add_linear(std::vector<Parameter>& params, const std::string& prefix, ParamGroup group, std::size_t in,
                std::size_t out, Rng& rng) {
  params.push_back({prefix + ".w", group, he_uniform({in, out}, in, rng)});
  params.push_back({prefix + ".b", group, zeros_param({out})});
}

// conv -> batchnorm -> relu -> maxpool, parameters starting at params[i]
Tensor conv_block(const Tensor& x, const std::vector<Parameter>& params, std::size_t i) {
  auto h = conv2d(x, params[i].value, params[i + 1].value);
  h = batchnorm(h, params[i + 2].value, params[i + 3].value);
  return maxpool2d(relu(h));
}

Tensor flatten(const Tensor& x) {
  const std::size_t b = x.dim(0);
  return x.rank() == 2 ? x : reshape(x, {b, x.numel() / b});
}

void require_batch_shape(const Tensor& batch, const Shape& per_example, const char* what) {
  if (batch.rank() != per_example.size() + 1)
    throw DimensionError(std::string(what) + ": expected batch of " + shape_str(per_example) + ", got " +
                         shape_str(batch.shape()));
  for (std::size_t i = 0; i < per_example.size(); ++i)
    if (batch.dim(i + 1) != per_example[i])
      throw DimensionError(std::string(what) + ": expected batch of " + shape_str(per_example) + ", got " +
                           shape_str(batch.shape()));
}

}  // namespace

EmbeddingNet::EmbeddingNet(const NetworkConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.input_shape.empty()) throw ConfigError("embedding input shape is empty");
  if (cfg.variant == EmbeddingVariant::kConv4) {
    if (cfg.input_shape.size() != 3)
      throw DimensionError("conv4 embedding needs C x H x W inputs, got " + shape_str(cfg.input_shape));
    std::size_t ch = cfg.input_shape[0], h = cfg.input_shape[1], w = cfg.input_shape[2];
    for (std::size_t b = 0; b < kConvBlocks; ++b) {
      if (h < 2 || w < 2)
        throw DimensionError("conv4 embedding: input " + shape_str(cfg.input_shape) + " too small for 4 pools");
      add_conv_block(params_, "embed.block" + std::to_string(b), ParamGroup::kEmbedding, ch, cfg.filters, rng);
      ch = cfg.filters;
      h /= 2;
      w /= 2;
    }
    feature_shape_ = {cfg.filters, h, w};
  } else {
    const std::size_t in = shape_numel(cfg.input_shape);
    add_linear(params_, "embed.fc0", ParamGroup::kEmbedding, in, cfg.hidden, rng);
    add_linear(params_, "embed.fc1", ParamGroup::kEmbedding, cfg.hidden, cfg.hidden, rng);
    add_linear(params_, "embed.fc2", ParamGroup::kEmbedding, cfg.hidden, cfg.embed_dim, rng);
    feature_shape_ = {cfg.embed_dim};
  }
}

Tensor EmbeddingNet::forward(const Tensor& batch) const {
  require_batch_shape(batch, cfg_.input_shape, "embed");
  if (cfg_.variant == EmbeddingVariant::kConv4) {
    Tensor h = batch;
    for (std::size_t b = 0; b < kConvBlocks; ++b) h = conv_block(h, params_, 4 * b);
    return h;
  }
  Tensor h = flatten(batch);
  h = relu(linear(h, params_[0].value, params_[1].value));
  h = relu(linear(h, params_[2].value, params_[3].value));
  return linear(h, params_[4].value, params_[5].value);
}

SigmaNet::SigmaNet(const NetworkConfig& cfg, const Shape& feature_shape, Rng& rng)
    : cfg_(cfg), feature_shape_(feature_shape) {
  std::size_t fc_in = 0;
  if (cfg.variant == EmbeddingVariant::kConv4) {
    std::size_t h = feature_shape[1], w = feature_shape[2];
    if (h < 4 || w < 4)
      throw DimensionError("sigma network needs feature maps of at least 4x4, got " + shape_str(feature_shape));
    add_conv_block(params_, "sigma.block0", ParamGroup::kSigma, feature_shape[0], cfg.filters, rng);
    add_conv_block(params_, "sigma.block1", ParamGroup::kSigma, cfg.filters, 1, rng);
    h = (h / 2) / 2;
    w = (w / 2) / 2;
    fc_in = h * w;
  } else {
    fc_in = feature_shape[0];
  }
  add_linear(params_, "sigma.fc0", ParamGroup::kSigma, fc_in, kSigmaHidden, rng);
  // Near-zero output weights plus a bias of kInitialRaw start every sigma at
  // about softplus(1) + 0.01 = 1.32.
  params_.push_back({"sigma.fc1.w", ParamGroup::kSigma, he_uniform({kSigmaHidden, 1}, kSigmaHidden, rng, 0.01)});
  params_.push_back({"sigma.fc1.b", ParamGroup::kSigma, Tensor::full({1}, kInitialRaw, true)});
}

Tensor SigmaNet::forward(const Tensor& features) const {
  require_batch_shape(features, feature_shape_, "sigma");
  const std::size_t b = features.dim(0);
  Tensor h = features;
  std::size_t next = 0;
  if (cfg_.variant == EmbeddingVariant::kConv4) {
    h = conv_block(h, params_, 0);
    h = conv_block(h, params_, 4);
    next = 8;
  }
  h = flatten(h);
  h = relu(linear(h, params_[next].value, params_[next + 1].value));
  h = linear(h, params_[next + 2].value, params_[next + 3].value);
  return reshape(add_scalar(softplus(h), kSigmaFloor), {b});
}

TpnModel::TpnModel(const NetworkConfig& cfg, std::uint64_t seed)
    : cfg_(cfg),
      embedding_([&] {
        Rng rng(seed, Stream::kInit, 0);
        return EmbeddingNet(cfg, rng);
      }()),
      sigma_([&] {
        Rng rng(seed, Stream::kInit, 1);
        return SigmaNet(cfg, embedding_.feature_shape(), rng);
      }()) {}

Embedded TpnModel::embed(const Tensor& batch) const {
  Embedded out;
  out.feature_map = embedding_.forward(batch);
  out.flat = flatten(out.feature_map);
  out.sigmas = sigma_.forward(out.feature_map);
  return out;
}

Tensor TpnModel::features(const Tensor& batch) const { return flatten(embedding_.forward(batch)); }

std::vector<Parameter*> TpnModel::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : embedding_.parameters()) out.push_back(&p);
  for (auto& p : sigma_.parameters()) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> TpnModel::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& p : embedding_.parameters()) out.push_back(&p);
  for (const auto& p : sigma_.parameters()) out.push_back(&p);
  return out;
}

std::size_t TpnModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->value.numel();
  return n;
}

TpnModel TpnModel::clone() const {
  TpnModel copy = *this;
  for (auto* p : copy.parameters()) p->value = p->value.clone();
  return copy;
}

}  // namespace tpn
