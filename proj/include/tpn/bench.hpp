#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tpn/config.hpp"
#include "tpn/episodes.hpp"
#include "tpn/networks.hpp"
#include "tpn/training.hpp"

namespace tpn {

struct EvalReport {
  std::string tag;
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::size_t queries = 0;  // per episode, all classes
  std::size_t episodes = 0;
  double mean_acc = 0.0;
  double ci95 = 0.0;
  std::vector<double> accuracies;  // one per episode
  double seconds = 0.0;
  std::optional<double> std_error;  // semi-supervised runs only
};

/// 1.96 * population stddev / sqrt(E).
double ci95_half_width(std::span<const double> accuracies);
double mean_of(std::span<const double> values);

/// Fills mean_acc and ci95 from the accuracies.
EvalReport summarize(std::string tag, std::size_t n_way, std::size_t k_shot, std::size_t queries,
                     std::vector<double> accuracies, double seconds);

struct EvalOptions {
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t queries = 75;
  std::size_t episodes = 600;
  std::uint64_t seed = 0;
  std::size_t k_graph = kDefaultGraphK;
  double alpha = kDefaultAlpha;

  void validate() const;
};

/// Episode e of an evaluation draws from Rng(seed, kEval, e).
Episode eval_episode(const Dataset& ds, const EvalOptions& opt, std::size_t e);

/// Transductive evaluation with closed-form propagation; accuracy over the
/// query rows of each episode.
EvalReport eval(const TpnModel& model, const Dataset& ds, const EvalOptions& opt, const std::string& tag = "tpn");

enum class BaselineKind { kFixedSigmaLp, kPrototype };

std::string to_string(BaselineKind kind);
BaselineKind parse_baseline(const std::string& name);

struct BaselineOptions {
  EvalOptions eval;
  /// Fixed length scale; unset means the median pairwise distance heuristic.
  std::optional<double> sigma;
};

struct BaselineResult {
  EvalReport report;
  std::optional<double> sigma_used;  // fixed_sigma_lp only
};

/// Median Euclidean distance between distinct points of the same episode,
/// pooled over the first few evaluation episodes.
double median_pairwise_distance(const TpnModel* model, const Dataset& ds, const EvalOptions& opt,
                                std::size_t sample_episodes = 10);

/// Baselines in the embedding of `model`, or in raw input space when null.
BaselineResult eval_baseline(BaselineKind kind, const TpnModel* model, const Dataset& ds, const BaselineOptions& opt);

struct SemiOptions {
  EvalOptions eval;
  double labeled_ratio = 0.4;
  std::size_t pool_size = 0;           // M unlabeled examples per episode
  std::size_t distractor_classes = 0;  // 0 draws the pool from episode classes
  std::size_t splits = 10;
};

/// Classifies each query on its own graph (support + pool + that query),
/// averaged over `splits` labeled/unlabeled partitions. std_error is the
/// standard error of the per-split means.
EvalReport semi_eval(const TpnModel& model, const Dataset& ds, const SemiOptions& opt, const std::string& tag = "tpn-semi");

// ---- reports --------------------------------------------------------------

struct ReportOptions {
  /// Wall time varies between runs; leaving it out keeps reports byte-stable.
  bool timing = false;
};

inline constexpr const char* kReportHeader = "tag,n_way,k_shot,query,episodes,mean_acc,ci95,seconds";

/// `# key = value` lines for the resolved configuration.
void write_config_echo(std::ostream& out, const std::vector<std::pair<std::string, std::string>>& entries);
/// One CSV row (no newline handling beyond the trailing '\n').
std::string report_row(const EvalReport& r, const ReportOptions& opt);
void write_report(std::ostream& out, std::span<const EvalReport> reports, const ReportOptions& opt,
                  bool with_stderr = false);

// ---- sweeps ---------------------------------------------------------------

enum class SweepParam { kQuery, kAlpha, kGraphK, kTrainShot };

std::string to_string(SweepParam p);
SweepParam parse_sweep_param(const std::string& name);
/// True for parameters that only change evaluation.
bool sweep_is_test_time(SweepParam p);

struct SweepRow {
  std::string param;
  std::string value;
  EvalReport report;
};

struct SweepRequest {
  SweepParam param = SweepParam::kQuery;
  std::vector<double> values;
  TrainConfig base;
  EvalOptions eval;
};

/// Training-time parameters retrain from `request.base` per value; test-time
/// parameters reuse `trained` (which must then be set). Query values are per
/// class, so T = value * n_way for both training and evaluation.
std::vector<SweepRow> sweep(const SweepRequest& request, const Dataset& train_ds, const Dataset& test_ds,
                            const TpnModel* trained = nullptr);

void write_sweep(std::ostream& out, std::span<const SweepRow> rows, const ReportOptions& opt);

}  // namespace tpn
