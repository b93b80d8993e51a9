#include "metricforge/cli.hpp"

#include "metricforge/evaluation.hpp"
#include "metricforge/synthetic.hpp"
#include "metricforge/tensor_io.hpp"
#include "metricforge/training.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <future>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

namespace metricforge::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

class Config {
 public:
  Config(json j, fs::path dir, std::string where)
      : j_(std::move(j)), dir_(std::move(dir)), where_(std::move(where)) {
    if (!j_.is_object()) throw Error(Errc::InvalidConfig, where_ + " must be a JSON object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  T get(const std::string& key, T fallback) {
    used_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return fallback;
    return convert<T>(*it, key);
  }

  template <typename T>
  T require(const std::string& key) {
    used_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) throw Error(Errc::InvalidConfig, where_ + " lacks '" + key + "'");
    return convert<T>(*it, key);
  }

  /// Resolves a path relative to the config file and checks that it exists.
  fs::path input_path(const std::string& key) {
    const fs::path p = resolve(require<std::string>(key));
    if (!fs::exists(p)) throw Error(Errc::InvalidArgument, "missing input file: " + p.string());
    return p;
  }

  std::optional<fs::path> optional_input_path(const std::string& key) {
    if (!has(key) || j_.at(key).is_null()) {
      used_.insert(key);
      return std::nullopt;
    }
    return input_path(key);
  }

  fs::path resolve(const fs::path& p) const { return p.is_relative() ? dir_ / p : p; }

  std::optional<Config> child(const std::string& key) {
    used_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return std::nullopt;
    return Config(*it, dir_, where_ + "." + key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) throw Error(Errc::InvalidConfig, where_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  template <typename T>
  T convert(const json& v, const std::string& key) const {
    try {
      return v.get<T>();
    } catch (const json::exception&) {
      throw Error(Errc::InvalidConfig, where_ + ": '" + key + "' has the wrong type");
    }
  }

  json j_;
  fs::path dir_;
  std::string where_;
  std::set<std::string> used_;
};

struct Invocation {
  std::string command;
  json config = json::object();
  fs::path config_dir = fs::current_path();
  fs::path out_root = "runs";
};

std::string utc_stamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

std::string hex32(std::uint32_t v) {
  std::ostringstream ss;
  ss << std::hex << std::setw(8) << std::setfill('0') << v;
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) { write_file_bytes(p, text); }

void write_json(const fs::path& p, const ordered_json& j) { write_text(p, j.dump(2) + "\n"); }

void write_run_record(const fs::path& run, const Invocation& inv) {
  ordered_json j;
  j["command"] = inv.command;
  j["config_hash"] = hex32(crc32(inv.config.dump()));
  j["config"] = inv.config;
  write_json(run / "run.json", j);
}

HyperParams preset(const std::string& name) {
  if (name == "desk") return HyperParams::desk();
  if (name == "agiqa3k") return HyperParams::agiqa3k();
  if (name == "aigciqa2023") return HyperParams::aigciqa2023();
  throw Error(Errc::InvalidConfig, "unknown preset '" + name + "'");
}

struct TrainSettings {
  HyperParams hp;
  TrainOptions options;
};

/// Reads the training keys shared by train and seeds-sweep.
TrainSettings read_train_settings(Config& c) {
  TrainSettings s;
  s.hp = preset(c.get<std::string>("preset", "desk"));
  if (auto h = c.child("hyperparams")) {
    s.hp.epochs = h->get("epochs", s.hp.epochs);
    s.hp.batch_size = h->get("batch_size", s.hp.batch_size);
    s.hp.learning_rate = h->get("learning_rate", s.hp.learning_rate);
    s.hp.adam_beta1 = h->get("adam_beta1", s.hp.adam_beta1);
    s.hp.adam_beta2 = h->get("adam_beta2", s.hp.adam_beta2);
    s.hp.adam_eps = h->get("adam_eps", s.hp.adam_eps);
    h->finish();
  }
  validate(s.hp);
  s.options.weighting = parse_weighting(c.get<std::string>("weighting", "static"));
  s.options.freeze_encoder = c.get("freeze_encoder", false);
  s.options.model_metrics = c.get<std::vector<std::string>>("model_metrics", {});
  s.options.selection.active_metrics = c.get<std::vector<std::string>>("active_metrics", {});
  if (auto m = c.child("model")) {
    ModelShape& shape = s.options.shape;
    shape.width = m->get("width", shape.width);
    shape.seq_len = m->get("seq_len", shape.seq_len);
    shape.heads = m->get("heads", shape.heads);
    shape.layers = m->get("layers", shape.layers);
    shape.ffn_width = m->get("ffn_width", shape.ffn_width);
    shape.key_width = m->get("key_width", shape.key_width);
    shape.value_width = m->get("value_width", shape.value_width);
    m->finish();
  }
  const auto text = c.get<std::string>("text_prompt", "");
  const auto tmpl = c.get<std::string>("prompt_template", "");
  if (!text.empty() && !tmpl.empty()) {
    throw Error(Errc::InvalidConfig, "set at most one of 'text_prompt' and 'prompt_template'");
  }
  if (!text.empty()) s.options.text_prompt = text;
  if (!tmpl.empty()) s.options.text_prompt = PromptRegistry::builtin().find(tmpl).text;
  return s;
}

/// Fills the default selection and checks everything fit would reject.
void check_training_inputs(TrainSettings& s, const Manifest& train) {
  const auto& metrics = s.options.model_metrics.empty() ? train.metric_names : s.options.model_metrics;
  for (const auto& name : metrics) {
    if (!train.metric_index(name)) throw Error(Errc::MetricNameMismatch, "manifest has no metric '" + name + "'");
  }
  if (s.options.selection.active_metrics.empty()) s.options.selection.active_metrics = metrics;
  HyperParams dry = s.hp;
  dry.epochs = 0;
  TrainOptions opts = s.options;
  opts.on_epoch = nullptr;
  (void)fit(train, dry, opts);
}

void replace_dir(const fs::path& tmp, const fs::path& dst) {
  std::error_code ec;
  fs::remove_all(dst, ec);
  fs::rename(tmp, dst, ec);
  if (ec) throw Error(Errc::IoFailure, "cannot move " + tmp.string() + " to " + dst.string());
}

void save_checkpoint_atomic(const Checkpoint& c, const fs::path& dir) {
  fs::path tmp = dir;
  tmp += ".tmp";
  std::error_code ec;
  fs::remove_all(tmp, ec);
  save_checkpoint(c, tmp);
  replace_dir(tmp, dir);
}

int classify(Errc code);

int cmd_split(Invocation& inv, std::ostream& out) {
  Config c(inv.config, inv.config_dir, "config");
  const fs::path manifest_path = c.input_path("manifest");
  SplitSpec spec;
  spec.train_fraction = c.get("train_fraction", spec.train_fraction);
  spec.seed = c.get("seed", spec.seed);
  c.finish();
  const Manifest m = load_manifest(manifest_path);
  const SplitResult split = content_isolated_split(m, spec);

  const fs::path run = make_run_dir(inv.out_root, inv.command, inv.config);
  write_run_record(run, inv);
  save_manifest(split.train, run / "train.jsonl");
  save_manifest(split.test, run / "test.jsonl");
  write_json(run / "split_report.json", split_report(split, spec));
  out << run.string() << '\n';
  return kExitOk;
}

int cmd_train(Invocation& inv, std::ostream& out, std::ostream& err) {
  Config c(inv.config, inv.config_dir, "config");
  const fs::path manifest_path = c.input_path("manifest");
  const auto init_path = c.optional_input_path("init_checkpoint");
  TrainSettings s = read_train_settings(c);
  s.hp.seed = c.get("seed", s.hp.seed);
  c.finish();

  const Manifest train = normalize_scores(load_manifest(manifest_path));
  std::optional<Checkpoint> init;
  if (init_path) {
    init = load_checkpoint(*init_path);
    if (!s.options.model_metrics.empty() && s.options.model_metrics != init->model.metric_names) {
      throw Error(Errc::MetricNameMismatch, "model_metrics differ from the initial checkpoint");
    }
    if (s.options.selection.active_metrics.empty()) {
      s.options.selection.active_metrics = init->model.metric_names;
    }
    (void)resolve_selection(s.options.selection, init->model.metric_names);
    for (const auto& name : init->model.metric_names) {
      if (!train.metric_index(name)) throw Error(Errc::MetricNameMismatch, "manifest has no metric '" + name + "'");
    }
  } else {
    check_training_inputs(s, train);
  }

  const fs::path run = make_run_dir(inv.out_root, inv.command, inv.config);
  write_run_record(run, inv);
  const fs::path ckpt_dir = run / "checkpoint";
  s.options.on_epoch = [&](const Checkpoint& ck) {
    save_checkpoint_atomic(ck, ckpt_dir);
    write_text(run / "history.csv", history_csv(ck));
  };
  out << run.string() << '\n';
  try {
    const Checkpoint result =
        init ? second_training(*init, train, s.hp, s.options) : fit(train, s.hp, s.options);
    save_checkpoint_atomic(result, ckpt_dir);
    write_text(run / "history.csv", history_csv(result));
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    if (fs::exists(ckpt_dir)) err << "last good checkpoint kept at " << ckpt_dir.string() << '\n';
    return classify(e.code());
  }
  return kExitOk;
}

void write_eval_outputs(const fs::path& dir, const EvalReport& report) {
  write_json(dir / "report.json", to_json(report));
  write_text(dir / "report.csv", to_csv(report));
  write_text(dir / "scores.csv", scores_csv(report));
}

int cmd_eval(Invocation& inv, std::ostream& out) {
  Config c(inv.config, inv.config_dir, "config");
  const fs::path ckpt_path = c.input_path("checkpoint");
  const fs::path manifest_path = c.input_path("manifest");
  EvalOptions options;
  options.split_name = c.get("split_name", options.split_name);
  c.finish();
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Manifest test = load_manifest(manifest_path);
  const EvalReport report = evaluate_split(ckpt, test, options);

  const fs::path run = make_run_dir(inv.out_root, inv.command, inv.config);
  write_run_record(run, inv);
  write_eval_outputs(run, report);
  out << run.string() << '\n';
  return kExitOk;
}

struct SeedOutcome {
  std::uint64_t seed = 0;
  EvalReport report;
};

SeedOutcome run_seed(const Manifest& m, double fraction, TrainSettings s, std::uint64_t seed,
                     const fs::path& dir) {
  const SplitSpec spec{fraction, seed};
  const SplitResult split = content_isolated_split(m, spec);
  s.hp.seed = seed;
  const Checkpoint ckpt = fit(normalize_scores(split.train), s.hp, s.options);
  EvalReport report = evaluate_split(ckpt, split.test);

  fs::create_directories(dir);
  save_manifest(split.train, dir / "train.jsonl");
  save_manifest(split.test, dir / "test.jsonl");
  write_json(dir / "split_report.json", split_report(split, spec));
  save_checkpoint(ckpt, dir / "checkpoint");
  write_text(dir / "history.csv", history_csv(ckpt));
  write_eval_outputs(dir, report);
  return {seed, std::move(report)};
}

ordered_json optional_number(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(); }

int cmd_seeds_sweep(Invocation& inv, std::ostream& out) {
  Config c(inv.config, inv.config_dir, "config");
  const fs::path manifest_path = c.input_path("manifest");
  const auto seeds = c.get<std::vector<std::uint64_t>>("seeds", {42, 100, 200});
  const double fraction = c.get("train_fraction", 0.8);
  TrainSettings s = read_train_settings(c);
  c.finish();
  if (seeds.empty()) throw Error(Errc::InvalidConfig, "'seeds' is empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw Error(Errc::InvalidConfig, "'seeds' has duplicates");
  }

  const Manifest m = load_manifest(manifest_path);
  for (std::uint64_t seed : seeds) {
    TrainSettings probe = s;
    probe.hp.seed = seed;
    check_training_inputs(probe, normalize_scores(content_isolated_split(m, {fraction, seed}).train));
    if (seed == seeds.front()) s.options.selection = probe.options.selection;
  }

  const fs::path run = make_run_dir(inv.out_root, inv.command, inv.config);
  write_run_record(run, inv);
  std::vector<SeedOutcome> outcomes;
  auto seed_dir = [&](std::uint64_t seed) { return run / ("seed-" + std::to_string(seed)); };
  if (deterministic_mode() || seeds.size() == 1) {
    for (std::uint64_t seed : seeds) outcomes.push_back(run_seed(m, fraction, s, seed, seed_dir(seed)));
  } else {
    std::vector<std::future<SeedOutcome>> jobs;
    for (std::uint64_t seed : seeds) {
      jobs.push_back(std::async(std::launch::async, run_seed, std::cref(m), fraction, s, seed, seed_dir(seed)));
    }
    for (auto& j : jobs) outcomes.push_back(j.get());
  }

  const auto& names = outcomes.front().report.metrics;
  std::ostringstream csv;
  csv.precision(17);
  csv << "seed";
  for (const auto& mc : names) csv << ",plcc_" << mc.metric << ",srcc_" << mc.metric;
  csv << '\n';
  ordered_json rows = ordered_json::array();
  for (const auto& o : outcomes) {
    csv << o.seed;
    ordered_json row;
    row["seed"] = o.seed;
    ordered_json metrics = ordered_json::array();
    for (const auto& mc : o.report.metrics) {
      csv << ',' << (mc.plcc ? std::to_string(*mc.plcc) : "") << ',' << (mc.srcc ? std::to_string(*mc.srcc) : "");
      metrics.push_back({{"metric", mc.metric},
                         {"plcc", optional_number(mc.plcc)},
                         {"srcc", optional_number(mc.srcc)},
                         {"status", mc.status}});
    }
    csv << '\n';
    row["metrics"] = std::move(metrics);
    rows.push_back(std::move(row));
  }
  ordered_json spread;
  for (std::size_t k = 0; k < names.size(); ++k) {
    std::optional<double> lo, hi;
    bool defined = true;
    for (const auto& o : outcomes) {
      const auto& v = o.report.metrics[k].plcc;
      if (!v) {
        defined = false;
        break;
      }
      lo = lo ? std::min(*lo, *v) : *v;
      hi = hi ? std::max(*hi, *v) : *v;
    }
    spread[names[k].metric] = defined ? ordered_json(*hi - *lo) : ordered_json();
  }
  ordered_json summary;
  summary["seeds"] = seeds;
  summary["rows"] = std::move(rows);
  summary["plcc_spread"] = std::move(spread);
  write_json(run / "sweep.json", summary);
  write_text(run / "sweep.csv", csv.str());
  out << run.string() << '\n';
  return kExitOk;
}

int cmd_submetric(Invocation& inv, std::ostream& out) {
  Config c(inv.config, inv.config_dir, "config");
  const PromptRegistry& registry = PromptRegistry::builtin();
  SubmetricReport report;
  if (auto scores = c.child("scores")) {
    if (c.has("checkpoint") || c.has("manifest")) {
      throw Error(Errc::InvalidConfig, "'scores' excludes 'checkpoint' and 'manifest'");
    }
    const double base = scores->require<double>("base");
    std::vector<std::pair<std::string, double>> children;
    for (const json& child : scores->require<json>("children")) {
      Config cc(child, inv.config_dir, "config.scores.children[]");
      children.emplace_back(cc.require<std::string>("name"), cc.require<double>("score"));
      cc.finish();
    }
    scores->finish();
    c.finish();
    report = submetric_ratios(base, children);
  } else {
    const fs::path ckpt_path = c.input_path("checkpoint");
    const fs::path manifest_path = c.input_path("manifest");
    const PromptTemplate base = registry.find(c.get<std::string>("base_prompt", kBasePromptName));
    std::vector<ChildMetric> children;
    if (c.has("children")) {
      for (const auto& name : c.get<std::vector<std::string>>("children", {})) {
        (void)registry.find(name);
        const auto& defaults = default_child_metrics();
        auto it = std::find_if(defaults.begin(), defaults.end(),
                               [&](const ChildMetric& d) { return d.template_name == name; });
        children.push_back({it != defaults.end() ? it->display_name : name, name});
      }
    } else {
      children = default_child_metrics();
    }
    const auto metric_name = c.get<std::string>("metric", "");
    c.finish();
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const Manifest images = load_manifest(manifest_path);
    Index metric = 0;
    if (!metric_name.empty()) {
      const auto& names = ckpt.model.metric_names;
      auto it = std::find(names.begin(), names.end(), metric_name);
      if (it == names.end()) throw Error(Errc::MetricNameMismatch, "model has no metric '" + metric_name + "'");
      metric = static_cast<Index>(it - names.begin());
    }
    report = measure_submetrics(ckpt.model, images, base, children, metric, registry);
  }

  const fs::path run = make_run_dir(inv.out_root, inv.command, inv.config);
  write_run_record(run, inv);
  write_json(run / "submetric.json", to_json(report));
  write_text(run / "submetric.csv", to_csv(report));
  out << run.string() << '\n';
  return kExitOk;
}

int cmd_synth(Invocation& inv, std::ostream& out) {
  Config c(inv.config, inv.config_dir, "config");
  SyntheticSpec spec;
  spec.groups = c.get("groups", spec.groups);
  spec.per_group = c.get("per_group", spec.per_group);
  spec.input_width = c.get("input_width", spec.input_width);
  spec.image_tokens = c.get("image_tokens", spec.image_tokens);
  spec.prompt_words = c.get("prompt_words", spec.prompt_words);
  spec.token_noise = c.get("token_noise", spec.token_noise);
  spec.seed = c.get("seed", spec.seed);
  c.finish();
  const Manifest m = synthetic_manifest(spec);
  const fs::path run = make_run_dir(inv.out_root, inv.command, inv.config);
  write_run_record(run, inv);
  save_manifest(m, run / "manifest.jsonl");
  out << run.string() << '\n';
  return kExitOk;
}

int dispatch(Invocation& inv, std::ostream& out, std::ostream& err) {
  if (inv.command == "split") return cmd_split(inv, out);
  if (inv.command == "train") return cmd_train(inv, out, err);
  if (inv.command == "eval") return cmd_eval(inv, out);
  if (inv.command == "seeds-sweep") return cmd_seeds_sweep(inv, out);
  if (inv.command == "submetric") return cmd_submetric(inv, out);
  return cmd_synth(inv, out);
}

int classify(Errc code) {
  switch (code) {
    case Errc::TrainingDiverged:
    case Errc::IoFailure:
    case Errc::DegenerateDenominator:
    case Errc::NonPositiveLoss:
      return kExitRuntime;
    default:
      return kExitValidation;
  }
}

}  // namespace

bool deterministic_mode() {
  const char* v = std::getenv("METRICFORGE_DETERMINISTIC");
  return v && std::string_view(v) == "1";
}

fs::path make_run_dir(const fs::path& root, const std::string& command, const json& config) {
  const std::string base = command + "-" + hex32(crc32(config.dump())) + "-" + utc_stamp();
  fs::path dir = root / base;
  for (int i = 2; fs::exists(dir); ++i) dir = root / (base + "-" + std::to_string(i));
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(Errc::IoFailure, "cannot create run directory " + dir.string() + ": " + ec.message());
  return dir;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"metricforge: multi-metric quality assessment runs"};
  app.require_subcommand(1);
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"split", "content-isolated train/test split"},
      {"train", "train or retrain a model"},
      {"eval", "PLCC/SRCC report on a manifest"},
      {"seeds-sweep", "split, train and evaluate once per seed"},
      {"submetric", "child-metric counting ratios"},
      {"synth", "write a synthetic three-metric manifest"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON run config");
    sub->add_option("--out", out_dir, "root directory for run directories");
    sub->add_option("--seed", seed, "seed override");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitValidation;
  }

  Invocation inv;
  inv.command = app.get_subcommands().front()->get_name();
  try {
    if (!config_path.empty()) {
      const fs::path p = fs::absolute(config_path);
      if (!fs::exists(p)) throw Error(Errc::InvalidArgument, "missing input file: " + p.string());
      try {
        inv.config = json::parse(read_file_bytes(p));
      } catch (const json::parse_error& e) {
        throw Error(Errc::InvalidConfig, p.string() + " is not valid JSON: " + e.what());
      }
      inv.config_dir = p.parent_path();
    } else if (inv.command != "synth") {
      throw Error(Errc::InvalidConfig, inv.command + " needs --config");
    }
    if (!inv.config.is_object()) throw Error(Errc::InvalidConfig, "config must be a JSON object");
    if (auto it = inv.config.find("out"); it != inv.config.end()) {
      if (!it->is_string()) throw Error(Errc::InvalidConfig, "'out' must be a string");
      const fs::path o = it->get<std::string>();
      inv.out_root = o.is_relative() ? inv.config_dir / o : o;
      inv.config.erase(it);
    }
    if (!out_dir.empty()) inv.out_root = out_dir;
    if (seed) {
      if (inv.command == "seeds-sweep") {
        inv.config["seeds"] = std::vector<std::uint64_t>{*seed};
      } else {
        inv.config["seed"] = *seed;
      }
    }
    return dispatch(inv, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return classify(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace metricforge::cli
