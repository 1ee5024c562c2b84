#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "tpn/config.hpp"
#include "tpn/episodes.hpp"
#include "tpn/networks.hpp"

namespace tpn {

struct AdamState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  std::vector<std::vector<double>> m;  // one buffer per parameter
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;

  /// Zeroed moments shaped like `params`.
  static AdamState for_parameters(std::span<Parameter* const> params);
};

/// Bias-corrected Adam update in place, then clears the gradients.
/// A parameter with no accumulated gradient is treated as a zero gradient.
void adam_step(std::span<Parameter* const> params, AdamState& state, double lr);

/// lr0 * 0.5^floor(episode / halve_every); constant when halve_every == 0.
double lr_at(std::size_t episode, double lr0, std::size_t halve_every);

struct Checkpoint {
  TrainConfig config;
  TpnModel model;
  AdamState adam;
  std::uint64_t episodes_seen = 0;

  /// Fresh parameters and optimizer state for `cfg`.
  explicit Checkpoint(const TrainConfig& cfg);

  // Copies clone the parameter tensors instead of sharing them.
  Checkpoint(const Checkpoint& other);
  Checkpoint& operator=(const Checkpoint& other);
  Checkpoint(Checkpoint&&) = default;
  Checkpoint& operator=(Checkpoint&&) = default;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError on corruption or a fingerprint that does not match the
/// embedded configuration.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Human-readable name table: one line per parameter with its shape.
void describe_checkpoint(const Checkpoint& ckpt, std::ostream& out);

struct EpisodeRecord {
  std::size_t episode = 0;
  double loss = 0.0;
  double lr = 0.0;
  double query_acc = 0.0;
};

using MetricsSink = std::function<void(const EpisodeRecord&)>;

/// Appends `episode,loss,lr,query_acc` lines, optionally after a header.
MetricsSink csv_metrics_sink(std::ostream& out, bool write_header = true);

struct TrainHooks {
  MetricsSink metrics;
  /// Where periodic and final checkpoints go; empty disables writing.
  std::filesystem::path checkpoint_path;
  /// Called with the checkpoint every `every` episodes (0 disables).
  std::function<void(const Checkpoint&)> periodic;
  std::size_t periodic_every = 0;
};

/// One episode's training step. Exposed for diagnostics and tests.
EpisodeRecord train_episode(Checkpoint& ckpt, const Dataset& ds, std::size_t episode);

/// Runs episodes from ckpt.episodes_seen up to ckpt.config.max_episodes.
/// Episode e draws from the sampling stream substream e, so a resumed run
/// replays the same sequence as an uninterrupted one.
void train_until_done(Checkpoint& ckpt, const Dataset& ds, const TrainHooks& hooks = {});

/// Initializes from `cfg` and trains to cfg.max_episodes.
Checkpoint train(const Dataset& ds, const TrainConfig& cfg, const TrainHooks& hooks = {});

struct ParamCheck {
  std::string name;
  ParamGroup group = ParamGroup::kEmbedding;
  double max_rel_error = 0.0;  // over entries with a gradient above zero_tol
  double max_abs_error = 0.0;
  double max_analytic = 0.0;
  bool vanishing = false;  // both gradients are numerically zero
  bool ok = false;
};

struct GradcheckReport {
  std::vector<ParamCheck> params;
  double max_rel_embedding = 0.0;
  double max_rel_sigma = 0.0;
  std::size_t parameter_count = 0;
  bool ok = false;
};

/// An entry passes when it is within rel_tol relative OR abs_tol absolute.
struct GradcheckOptions {
  double h = 1e-5;
  double rel_tol = 1e-4;
  double abs_tol = 1e-6;
  /// Gradients below this in both analytic and numeric form count as vanishing.
  double zero_tol = 1e-10;
};

/// Compares every parameter's analytic gradient on one tiny episode against
/// central differences. `ds` supplies the episode; the default is a small
/// gaussian-blobs set matching cfg.net.input_shape.
GradcheckReport gradcheck(const TrainConfig& cfg, const Dataset* ds = nullptr, const GradcheckOptions& opt = {});
/// Same, for an existing model (lets callers zero layers first).
GradcheckReport gradcheck_model(TpnModel& model, const TrainConfig& cfg, const Dataset& ds,
                                const GradcheckOptions& opt = {});

}  // namespace tpn
