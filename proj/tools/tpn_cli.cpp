// tpn: train, evaluate and inspect transductive propagation models.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "tpn/bench.hpp"
#include "tpn/config.hpp"
#include "tpn/episodes.hpp"
#include "tpn/errors.hpp"
#include "tpn/training.hpp"

namespace {

using namespace tpn;

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct EvalFlags {
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t query = 15;  // per class
  std::size_t episodes = 600;
  std::uint64_t seed = 0;
  std::size_t k_graph = kDefaultGraphK;
  double alpha = kDefaultAlpha;
  std::string split = "test";

  EvalOptions options() const {
    EvalOptions o;
    o.n_way = n_way;
    o.k_shot = k_shot;
    o.queries = query * n_way;
    o.episodes = episodes;
    o.seed = seed;
    o.k_graph = k_graph;
    o.alpha = alpha;
    return o;
  }

  std::vector<std::pair<std::string, std::string>> echo() const {
    return {{"n_way", std::to_string(n_way)},     {"k_shot", std::to_string(k_shot)},
            {"query", std::to_string(query)},     {"episodes", std::to_string(episodes)},
            {"seed", std::to_string(seed)},       {"k_graph", std::to_string(k_graph)},
            {"alpha", format_double(alpha)},                   {"split", split}};
  }
};

void add_eval_flags(CLI::App* cmd, EvalFlags& f) {
  cmd->add_option("--n-way", f.n_way, "classes per episode")->capture_default_str();
  cmd->add_option("--k-shot", f.k_shot, "support examples per class")->capture_default_str();
  cmd->add_option("--query", f.query, "query examples per class")->capture_default_str();
  cmd->add_option("--episodes", f.episodes, "evaluation episodes")->capture_default_str();
  cmd->add_option("--seed", f.seed, "evaluation seed")->capture_default_str();
  cmd->add_option("--k-graph", f.k_graph, "neighbors kept per node")->capture_default_str();
  cmd->add_option("--alpha", f.alpha, "propagation alpha")->capture_default_str();
  cmd->add_option("--split", f.split, "dataset split to evaluate on")
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();
}

struct ReportSink {
  std::string path;
  bool timing = false;

  void add_flags(CLI::App* cmd) {
    cmd->add_option("--out", path, "report CSV path (stdout when omitted)");
    cmd->add_flag("--timing", timing, "fill the seconds column with wall time");
  }

  template <class Fn>
  void write(Fn&& fn) const {
    if (path.empty()) {
      fn(std::cout);
      return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    fn(out);
  }
};

Dataset load_split(const std::string& path, const std::string& split) {
  return load_fsds(path).subset(parse_split(split));
}

// File values first, then command-line overrides, in that order.
TrainConfig resolve_config(const std::string& config_path, const std::map<std::string, std::string>& overrides,
                           const std::vector<std::string>& sets) {
  TrainConfig cfg;
  if (!config_path.empty()) cfg.apply(KeyValueConfig::load(config_path));
  for (const auto& [k, v] : overrides) cfg.set(k, v);
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

// An unset input_shape takes the dataset's example shape.
void fill_input_shape(TrainConfig& cfg, const Dataset& ds) {
  if (cfg.net.input_shape.empty()) cfg.net.input_shape = ds.example_shape;
}

// One --<key> option per training config key.
void add_config_flags(CLI::App* cmd, std::map<std::string, std::string>& overrides) {
  for (const auto& key : TrainConfig::keys()) {
    std::string flag = "--" + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    cmd->add_option_function<std::string>(
        flag, [&overrides, key](const std::string& v) { overrides[key] = v; }, "training config '" + key + "'");
  }
}

std::vector<std::pair<std::string, std::string>> config_echo(const TrainConfig& cfg) {
  return KeyValueConfig::parse(cfg.to_text()).entries();
}

int run(int argc, char** argv) {
  CLI::App app{"Transductive propagation networks for few-shot classification"};
  app.require_subcommand(1);

  // ---- train
  auto* train_cmd = app.add_subcommand("train", "meta-train a model on the train split");
  std::string train_config, train_data, train_out, train_metrics, train_resume;
  std::map<std::string, std::string> train_overrides;
  std::vector<std::string> train_sets;
  train_cmd->add_option("--config", train_config, "key = value config file");
  train_cmd->add_option("--data", train_data, "FSDS dataset")->required();
  train_cmd->add_option("--out", train_out, "checkpoint path")->required();
  train_cmd->add_option("--metrics", train_metrics, "per-episode metrics CSV");
  train_cmd->add_option("--resume", train_resume, "continue from this checkpoint");
  train_cmd->add_option("--set", train_sets, "extra key=value overrides");
  add_config_flags(train_cmd, train_overrides);

  // ---- eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint over random episodes");
  std::string eval_ckpt, eval_data;
  EvalFlags eval_flags;
  ReportSink eval_sink;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "trained checkpoint")->required();
  eval_cmd->add_option("--data", eval_data, "FSDS dataset")->required();
  add_eval_flags(eval_cmd, eval_flags);
  eval_sink.add_flags(eval_cmd);

  // ---- eval-baseline
  auto* base_cmd = app.add_subcommand("eval-baseline", "fixed-sigma label propagation or nearest prototype");
  std::string base_kind, base_ckpt, base_data;
  std::optional<double> base_sigma;
  EvalFlags base_flags;
  ReportSink base_sink;
  base_cmd->add_option("--kind", base_kind, "fixed_sigma_lp or prototype")
      ->required()
      ->check(CLI::IsMember({"fixed_sigma_lp", "prototype"}));
  base_cmd->add_option("--checkpoint", base_ckpt, "embed with this model (raw inputs when omitted)");
  base_cmd->add_option("--data", base_data, "FSDS dataset")->required();
  base_cmd->add_option("--sigma", base_sigma, "fixed length scale (median pairwise distance when omitted)");
  add_eval_flags(base_cmd, base_flags);
  base_sink.add_flags(base_cmd);

  // ---- semi-eval
  auto* semi_cmd = app.add_subcommand("semi-eval", "semi-supervised evaluation with unlabeled pools");
  std::string semi_ckpt, semi_data;
  EvalFlags semi_flags;
  ReportSink semi_sink;
  double semi_ratio = 0.4;
  std::size_t semi_pool = 0, semi_distractors = 0, semi_splits = 10;
  semi_cmd->add_option("--checkpoint", semi_ckpt, "trained checkpoint")->required();
  semi_cmd->add_option("--data", semi_data, "FSDS dataset")->required();
  semi_cmd->add_option("--labeled-ratio", semi_ratio, "labeled fraction per class")->capture_default_str();
  semi_cmd->add_option("--pool", semi_pool, "unlabeled examples per episode (M)")->capture_default_str();
  semi_cmd->add_option("--distractors", semi_distractors, "classes the pool is drawn from instead")
      ->capture_default_str();
  semi_cmd->add_option("--splits", semi_splits, "labeled/unlabeled partitions")->capture_default_str();
  add_eval_flags(semi_cmd, semi_flags);
  semi_sink.add_flags(semi_cmd);

  // ---- sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "one row per parameter value");
  std::string sweep_param, sweep_config, sweep_ckpt, sweep_data;
  std::vector<double> sweep_values;
  std::vector<std::string> sweep_sets;
  EvalFlags sweep_flags;
  ReportSink sweep_sink;
  sweep_cmd->add_option("--param", sweep_param, "query, alpha, k_graph or train_shot")->required();
  sweep_cmd->add_option("--values", sweep_values, "comma-separated values")->required()->delimiter(',');
  sweep_cmd->add_option("--config", sweep_config, "base training config");
  sweep_cmd->add_option("--checkpoint", sweep_ckpt, "trained model for test-time parameters");
  sweep_cmd->add_option("--data", sweep_data, "FSDS dataset")->required();
  sweep_cmd->add_option("--set", sweep_sets, "training config key=value overrides");
  add_eval_flags(sweep_cmd, sweep_flags);
  sweep_sink.add_flags(sweep_cmd);

  // ---- gradcheck
  auto* gc_cmd = app.add_subcommand("gradcheck", "compare autodiff gradients with finite differences");
  std::string gc_config;
  std::map<std::string, std::string> gc_overrides;
  std::vector<std::string> gc_sets;
  gc_cmd->add_option("--config", gc_config, "config file (defaults to a tiny 2-way MLP episode)");
  gc_cmd->add_option("--set", gc_sets, "extra key=value overrides");
  add_config_flags(gc_cmd, gc_overrides);

  // ---- gen-data
  auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic FSDS dataset");
  SyntheticSpec gen_spec;
  std::string gen_kind = "concentric-rings", gen_out;
  gen_cmd->add_option("--kind", gen_kind, "gaussian-blobs, concentric-rings or noisy-arcs")->capture_default_str();
  gen_cmd->add_option("--classes", gen_spec.classes)->capture_default_str();
  gen_cmd->add_option("--per-class", gen_spec.per_class)->capture_default_str();
  gen_cmd->add_option("--dim", gen_spec.dim)->capture_default_str();
  gen_cmd->add_option("--noise", gen_spec.noise)->capture_default_str();
  gen_cmd->add_option("--seed", gen_spec.seed)->capture_default_str();
  gen_cmd->add_option("--train-fraction", gen_spec.train_fraction)->capture_default_str();
  gen_cmd->add_option("--val-fraction", gen_spec.val_fraction)->capture_default_str();
  gen_cmd->add_option("--out", gen_out, "FSDS path; the .split manifest goes alongside")->required();

  // ---- inspect-checkpoint
  auto* insp_cmd = app.add_subcommand("inspect-checkpoint", "print the parameter table and config");
  std::string insp_path;
  insp_cmd->add_option("checkpoint", insp_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  if (train_cmd->parsed()) {
    const auto ds = load_split(train_data, "train");
    std::optional<Checkpoint> ckpt;
    TrainConfig cfg = resolve_config(train_config, train_overrides, train_sets);
    fill_input_shape(cfg, ds);
    if (!train_resume.empty()) {
      ckpt.emplace(load_checkpoint(train_resume));
      if (ckpt->config.fingerprint() != cfg.fingerprint())
        throw ConfigError("resume checkpoint was trained with a different configuration");
      ckpt->config.max_episodes = cfg.max_episodes;
      ckpt->config.checkpoint_every = cfg.checkpoint_every;
    } else {
      ckpt.emplace(cfg);
    }
    std::ofstream metrics;
    TrainHooks hooks;
    hooks.checkpoint_path = train_out;
    if (!train_metrics.empty()) {
      const bool append = !train_resume.empty() && std::filesystem::exists(train_metrics);
      metrics.open(train_metrics, append ? std::ios::app : std::ios::trunc);
      if (!metrics) throw std::runtime_error("cannot write " + train_metrics);
      hooks.metrics = csv_metrics_sink(metrics, !append);
    }
    train_until_done(*ckpt, ds, hooks);
    std::cerr << "trained " << ckpt->episodes_seen << " episodes; checkpoint " << train_out << "\n";
    return kOk;
  }

  if (eval_cmd->parsed()) {
    const auto ckpt = load_checkpoint(eval_ckpt);
    const auto ds = load_split(eval_data, eval_flags.split);
    const auto report = eval(ckpt.model, ds, eval_flags.options());
    eval_sink.write([&](std::ostream& out) {
      auto echo = eval_flags.echo();
      echo.emplace_back("checkpoint", hex(ckpt.config.fingerprint()));
      write_config_echo(out, echo);
      write_report(out, std::span(&report, 1), {eval_sink.timing});
    });
    return kOk;
  }

  if (base_cmd->parsed()) {
    std::optional<Checkpoint> ckpt;
    if (!base_ckpt.empty()) ckpt.emplace(load_checkpoint(base_ckpt));
    const auto ds = load_split(base_data, base_flags.split);
    BaselineOptions bo;
    bo.eval = base_flags.options();
    bo.sigma = base_sigma;
    const auto res = eval_baseline(parse_baseline(base_kind), ckpt ? &ckpt->model : nullptr, ds, bo);
    if (res.sigma_used)
      std::cerr << "fixed sigma " << *res.sigma_used << (base_sigma ? " (given)" : " (median pairwise distance)")
                << "\n";
    base_sink.write([&](std::ostream& out) {
      auto echo = base_flags.echo();
      echo.emplace_back("baseline", base_kind);
      echo.emplace_back("space", ckpt ? "embedding " + hex(ckpt->config.fingerprint()) : std::string("raw"));
      if (res.sigma_used) echo.emplace_back("sigma", format_double(*res.sigma_used));
      write_config_echo(out, echo);
      write_report(out, std::span(&res.report, 1), {base_sink.timing});
    });
    return kOk;
  }

  if (semi_cmd->parsed()) {
    const auto ckpt = load_checkpoint(semi_ckpt);
    const auto ds = load_split(semi_data, semi_flags.split);
    SemiOptions so;
    so.eval = semi_flags.options();
    so.labeled_ratio = semi_ratio;
    so.pool_size = semi_pool;
    so.distractor_classes = semi_distractors;
    so.splits = semi_splits;
    const auto report = semi_eval(ckpt.model, ds, so);
    semi_sink.write([&](std::ostream& out) {
      auto echo = semi_flags.echo();
      echo.emplace_back("labeled_ratio", format_double(semi_ratio));
      echo.emplace_back("pool", std::to_string(semi_pool));
      echo.emplace_back("distractors", std::to_string(semi_distractors));
      echo.emplace_back("splits", std::to_string(semi_splits));
      echo.emplace_back("checkpoint", hex(ckpt.config.fingerprint()));
      write_config_echo(out, echo);
      write_report(out, std::span(&report, 1), {semi_sink.timing}, true);
    });
    return kOk;
  }

  if (sweep_cmd->parsed()) {
    SweepRequest req;
    req.param = parse_sweep_param(sweep_param);
    req.values = sweep_values;
    req.eval = sweep_flags.options();
    std::optional<Checkpoint> ckpt;
    if (!sweep_ckpt.empty()) ckpt.emplace(load_checkpoint(sweep_ckpt));
    req.base = ckpt && sweep_config.empty() ? ckpt->config : TrainConfig{};
    if (!sweep_config.empty()) req.base.apply(KeyValueConfig::load(sweep_config));
    for (const auto& kv : sweep_sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      req.base.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    const auto full = load_fsds(sweep_data);
    const auto train_ds = full.subset(Split::kTrain);
    const auto test_ds = full.subset(parse_split(sweep_flags.split));
    fill_input_shape(req.base, train_ds);
    if (!sweep_is_test_time(req.param)) req.base.validate();
    const auto rows = sweep(req, train_ds, test_ds, ckpt ? &ckpt->model : nullptr);
    sweep_sink.write([&](std::ostream& out) {
      auto echo = sweep_flags.echo();
      echo.emplace_back("sweep", sweep_param);
      if (!sweep_is_test_time(req.param))
        for (auto& e : config_echo(req.base)) echo.emplace_back("train." + e.first, e.second);
      else
        echo.emplace_back("checkpoint", hex(ckpt->config.fingerprint()));
      write_config_echo(out, echo);
      write_sweep(out, rows, {sweep_sink.timing});
    });
    return kOk;
  }

  if (gc_cmd->parsed()) {
    TrainConfig cfg;
    cfg.n_way = 2;
    cfg.k_train = 1;
    cfg.queries = 2;
    cfg.net.input_shape = {2};
    cfg.net.hidden = 16;
    cfg.net.embed_dim = 8;
    if (!gc_config.empty()) cfg.apply(KeyValueConfig::load(gc_config));
    for (const auto& [k, v] : gc_overrides) cfg.set(k, v);
    for (const auto& kv : gc_sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    const auto report = gradcheck(cfg);
    std::cout << "parameters: " << report.parameter_count << "\n"
              << "name,group,max_rel_error,max_abs_error,max_abs_grad,status\n";
    for (const auto& p : report.params) {
      char line[256];
      std::snprintf(line, sizeof(line), "%s,%s,%.3e,%.3e,%.3e,%s\n", p.name.c_str(),
                    p.group == ParamGroup::kEmbedding ? "embedding" : "sigma", p.max_rel_error, p.max_abs_error,
                    p.max_analytic, !p.ok ? "FAIL" : (p.vanishing ? "ok (vanishing)" : "ok"));
      std::cout << line;
    }
    std::printf("group embedding max_rel %.3e\ngroup sigma max_rel %.3e\n%s\n", report.max_rel_embedding,
                report.max_rel_sigma, report.ok ? "PASS" : "FAIL");
    return report.ok ? kOk : kNumerical;
  }

  if (gen_cmd->parsed()) {
    gen_spec.kind = parse_synthetic_kind(gen_kind);
    const auto ds = gen_synthetic(gen_spec);
    save_fsds(ds, gen_out);
    std::cerr << "wrote " << ds.classes.size() << " classes x " << gen_spec.per_class << " to " << gen_out << "\n";
    return kOk;
  }

  if (insp_cmd->parsed()) {
    describe_checkpoint(load_checkpoint(insp_path), std::cout);
    return kOk;
  }
  return kUsage;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const DimensionError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const SingularMatrixError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
}
