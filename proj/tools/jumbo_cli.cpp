// jumbo: train, evaluate, cost planning, time-series sweeps and synthetic data.
//
// Every run parameter is a key. Keys come from built-in defaults, then an
// optional key=value file (--config), then flags; the merged set is echoed
// to <run>/config.resolved, which --config accepts back unchanged.
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "jumbo/checkpoint.hpp"
#include "jumbo/cost_model.hpp"
#include "jumbo/data.hpp"
#include "jumbo/efficiency.hpp"
#include "jumbo/timeseries.hpp"
#include "jumbo/training.hpp"

namespace fs = std::filesystem;
using namespace jumbo;

namespace {

enum Exit { ok = 0, usage = 2, data = 3, numeric = 4 };

// Shortest form that reads back as the same double; other text unchanged.
std::string short_number(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || *end != '\0' || s.find_first_of(".eE") == std::string::npos) return s;
  for (int prec = 1; prec <= 17; ++prec) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  return s;
}

struct Key {
  std::string name, def, help;
};

class Settings {
 public:
  explicit Settings(std::vector<Key> keys) : keys_(std::move(keys)) {
    for (const auto& k : keys_) values_[k.name] = k.def;
  }

  void bind(CLI::App* app) {
    app->add_option("--config", config_path_, "key=value file; flags override its values");
    for (const auto& k : keys_) {
      std::string names = "--" + k.name;
      std::string dashed = k.name;
      std::replace(dashed.begin(), dashed.end(), '_', '-');
      if (dashed != k.name) names += ",--" + dashed;
      opts_[k.name] = app->add_option(names, flags_[k.name], k.help)->default_str(short_number(k.def));
    }
  }

  void load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    for (const auto& [k, v] : parse_key_values(ss.str(), path)) {
      if (!values_.count(k)) throw ConfigError(path + ": unknown key '" + k + "'");
      values_[k] = v;
    }
  }

  void resolve() {
    if (!config_path_.empty()) load_file(config_path_);
    for (const auto& [k, opt] : opts_) {
      if (opt->count()) values_[k] = flags_[k];
    }
  }

  const std::string& str(const std::string& k) const { return values_.at(k); }
  std::uint64_t uint(const std::string& k) const { return detail::parse_uint(k, str(k)); }
  double num(const std::string& k) const { return detail::parse_double(k, str(k)); }
  bool flag(const std::string& k) const { return detail::parse_bool(k, str(k)); }

  std::string echo() const {
    std::string s;
    for (const auto& k : keys_) s += k.name + "=" + values_.at(k.name) + "\n";
    return s;
  }

 private:
  std::vector<Key> keys_;
  std::map<std::string, std::string> values_, flags_;
  std::map<std::string, CLI::Option*> opts_;
  std::string config_path_;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string x; std::getline(ss, x, ',');) {
    if (!x.empty()) out.push_back(x);
  }
  return out;
}

// Writes to stdout and, once opened, to <run>/log.txt.
class Log {
 public:
  void open(const fs::path& p) {
    file_.open(p);
    if (!file_) throw IoError("cannot write " + p.string());
  }
  void line(const std::string& s) {
    std::cout << s << '\n' << std::flush;
    if (file_.is_open()) file_ << s << '\n' << std::flush;
  }

 private:
  std::ofstream file_;
};

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p);
  os << s;
  if (!os) throw IoError("cannot write " + p.string());
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------
// Image training and evaluation

std::vector<Key> image_keys() {
  std::vector<Key> k{
      {"run", "", "run directory (created)"},
      {"data", "", "dataset directory with train/ val/ test/ splits (PPM + labels.csv)"},
      {"num_classes", "0", "classes in --data; 0 reads manifest.json"},
      {"synthetic", "", "generate the dataset in memory instead: image-classes"},
      {"synth_classes", "10", "synthetic classes"},
      {"synth_train", "1000", "synthetic training images"},
      {"synth_val", "200", "synthetic validation images"},
      {"synth_test", "200", "synthetic test images"},
      {"synth_size", "16", "synthetic image height and width"},
      {"synth_separation", "4", "synthetic class separation (noise std = 1/separation; inf for none)"},
      {"synth_seed", "0", "synthetic data seed"},
      {"eval_split", "train", "split reported in metrics rows: train, val or test"},
      {"variant", "jumbo", "plain, registers or jumbo"},
      {"depth", "6", "layers"},
      {"width", "64", "token width D"},
      {"heads", "4", "attention heads"},
      {"jumbo", "4", "Jumbo multiplier J"},
      {"registers", "0", "register tokens R"},
      {"patch", "4", "square patch size"},
      {"ffn_mult", "4", "patch FFN hidden multiplier"},
      {"jumbo_ffn_mult", "4", "Jumbo FFN hidden multiplier"},
      {"keep_last_patch_ffn", "false", "keep the final layer's patch FFN in the jumbo variant"},
      {"tie", "false", "share one Jumbo FFN across layers"},
      {"lora_rank", "0", "per-layer LoRA rank on the tied Jumbo FFN (0 = none)"},
      {"lora_target", "fc1", "LoRA target: fc1, fc2 or both"},
      {"init_seed", "0", "weight initialization seed"},
  };
  const std::map<std::string, std::string> plan_help{
      {"steps", "optimizer steps"},
      {"batch_size", "images per step"},
      {"peak_lr", "learning rate after warmup"},
      {"final_lr", "cosine floor"},
      {"warmup_fraction", "linear warmup share of steps"},
      {"weight_decay", "AdamW decoupled weight decay"},
      {"clip_grad_norm", "global gradient-norm clip (0 = off)"},
      {"mixup_alpha", "mixup Beta parameter (0 = off)"},
      {"cutmix_alpha", "cutmix Beta parameter (0 = off)"},
      {"token_drop", "drop patch tokens on a schedule"},
      {"drop_start", "drop rate at step 0"},
      {"drop_end", "drop rate at the last step"},
      {"distill", "teacher checkpoint; trains on its logits instead of labels"},
      {"distill_temperature", "softmax temperature for distillation"},
      {"flip", "random horizontal flips"},
      {"seed", "shuffling, augmentation and drop seed"},
      {"eval_interval", "steps between metrics rows"},
      {"stop_at_accuracy", "stop once an eval reaches this accuracy (0 = never)"},
  };
  for (const auto& [name, value] : plan_fields(TrainPlan{})) {
    const auto h = plan_help.find(name);
    k.push_back({name, value, h == plan_help.end() ? "training plan" : h->second});
  }
  return k;
}

struct ImageData {
  ImageDataset train, val, test;
};

ImageData load_images(const Settings& s) {
  const auto synth = s.str("synthetic");
  if (!synth.empty()) {
    if (synth != "image-classes") throw ConfigError("synthetic: expected image-classes, got '" + synth + "'");
    SyntheticImageSpec sp;
    sp.classes = s.uint("synth_classes");
    sp.train = s.uint("synth_train");
    sp.val = s.uint("synth_val");
    sp.test = s.uint("synth_test");
    sp.height = sp.width = s.uint("synth_size");
    sp.separation = s.num("synth_separation");
    sp.seed = s.uint("synth_seed");
    auto d = synthesize_images(sp);
    return {std::move(d.train), std::move(d.val), std::move(d.test)};
  }
  if (s.str("data").empty()) throw ConfigError("either data or synthetic must be set");
  const fs::path dir = s.str("data");
  std::size_t classes = s.uint("num_classes");
  if (classes == 0) classes = manifest_classes(dir);
  ImageData d;
  d.train = load_image_split(dir / "train", classes);
  if (fs::exists(dir / "val")) d.val = load_image_split(dir / "val", classes);
  if (fs::exists(dir / "test")) d.test = load_image_split(dir / "test", classes);
  return d;
}

const ImageDataset& pick_split(const ImageData& d, const std::string& name) {
  const ImageDataset* p = name == "train" ? &d.train : name == "val" ? &d.val : name == "test" ? &d.test : nullptr;
  if (!p) throw ConfigError("eval_split: expected train, val or test, got '" + name + "'");
  if (p->size() == 0) throw DataError("split '" + name + "' is empty");
  return *p;
}

ModelConfig model_config(const Settings& s, const ImageDataset& d) {
  ModelConfig c;
  c.variant = parse_variant(s.str("variant"));
  c.depth = s.uint("depth");
  c.width = s.uint("width");
  c.heads = s.uint("heads");
  c.jumbo_multiplier = c.is_jumbo() ? s.uint("jumbo") : 0;
  c.register_count = c.variant == Variant::registers ? s.uint("registers") : 0;
  c.patch_y = c.patch_x = s.uint("patch");
  c.patch_ffn_multiplier = s.uint("ffn_mult");
  c.jumbo_ffn_multiplier = s.uint("jumbo_ffn_mult");
  c.discard_last_patch_ffn = c.is_jumbo() && !s.flag("keep_last_patch_ffn");
  c.image_y = d.height;
  c.image_x = d.width;
  c.in_channels = d.channels;
  c.num_classes = d.num_classes;
  c.validate();
  return c;
}

TrainPlan plan_from(const Settings& s) {
  TrainPlan p;
  for (const auto& [name, value] : plan_fields(p)) set_plan_field(p, name, s.str(name));
  p.validate();
  return p;
}

int cmd_train(const Settings& s, Log& log) {
  if (s.str("run").empty()) throw ConfigError("run: a run directory is required");
  const fs::path run = s.str("run");
  fs::create_directories(run);
  write_text(run / "config.resolved", s.echo());
  log.open(run / "log.txt");

  const auto plan = plan_from(s);
  const auto d = load_images(s);
  const auto& ev = pick_split(d, s.str("eval_split"));
  auto cfg = model_config(s, d.train);
  auto model = Model<float>::init(cfg, s.uint("init_seed"));
  if (s.flag("tie")) model = tie_jumbo_ffn(model);
  if (s.uint("lora_rank") > 0) {
    model = add_lora(model, s.uint("lora_rank"), parse_lora_target(s.str("lora_target")), s.uint("init_seed") + 1);
  }
  std::optional<Model<float>> teacher;
  if (!plan.distill.empty()) teacher = load_checkpoint<float>(plan.distill);

  log.line("train: " + to_string(cfg.variant) + " params=" + std::to_string(model.num_params()) + " train=" +
           std::to_string(d.train.size()) + " eval_split=" + s.str("eval_split"));
  std::ofstream metrics(run / "metrics.csv");
  if (!metrics) throw IoError("cannot write " + (run / "metrics.csv").string());
  const auto res = train(model, d.train, &ev, plan, &metrics, teacher ? &*teacher : nullptr);
  for (const auto& r : res.rows) log.line(format_metrics_row(r).substr(0, format_metrics_row(r).size() - 1));

  save_checkpoint(model, (run / "ckpt.final").string(),
                  {{"steps_done", res.steps_done}, {"final_eval_acc", res.final_eval_acc}, {"aborted", res.aborted}});
  if (res.aborted) {
    log.line("error: training stopped on a numeric failure at " + res.diagnostic);
    log.line("checkpoint holds the weights of the last completed step");
    return Exit::numeric;
  }
  log.line("final_eval_acc=" + fmt("%.6f", res.final_eval_acc) + " steps=" + std::to_string(res.steps_done));
  return Exit::ok;
}

int cmd_eval(const std::string& run_dir, const std::string& checkpoint, const std::string& split, Log& log) {
  // The run's own data settings, so evaluation sees the same images.
  const fs::path run = run_dir;
  Settings s(image_keys());
  s.load_file((run / "config.resolved").string());
  const auto d = load_images(s);
  const auto& ev = pick_split(d, split.empty() ? s.str("eval_split") : split);
  const auto model = load_checkpoint<float>(checkpoint.empty() ? (run / "ckpt.final").string() : checkpoint);
  const double acc = accuracy(model, ev);
  log.line("accuracy=" + fmt("%.6f", acc) + " split=" + (split.empty() ? s.str("eval_split") : split) + " n=" +
           std::to_string(ev.size()));
  return Exit::ok;
}

// ---------------------------------------------------------------------------
// Cost planning

std::vector<cost::Count> parse_counts(const std::string& what, const std::string& list) {
  std::vector<cost::Count> out;
  for (const auto& x : split_list(list)) out.push_back(detail::parse_uint(what, x));
  if (out.empty()) throw ConfigError(what + ": empty list");
  return out;
}

struct FlopsArgs {
  std::vector<std::size_t> match;
  std::string widths = "192", variants = "plain,registers,jumbo", out;
  std::size_t n_min = 128, n_max = 1024, n_step = 32;
  std::size_t jumbo = 6, registers = 16, ffn_mult = 4, jumbo_ffn_mult = 4;
};

int cmd_flops(const FlopsArgs& a, Log& log) {
  if (!a.match.empty()) {
    if (a.match.size() != 3) throw ConfigError("--match-registers takes P D J");
    if (a.match[0] < 1 || a.match[1] < 1) throw ConfigError("--match-registers: P and D must be >= 1");
    const auto m = cost::match_registers(a.match[0], a.match[1], a.match[2]);
    log.line("R_real=" + fmt("%.6f", static_cast<double>(m.real)) + " R_int=" + std::to_string(m.rounded));
    return Exit::ok;
  }
  if (a.n_step == 0 || a.n_min == 0 || a.n_min > a.n_max) throw ConfigError("patch range: need 1 <= n_min <= n_max and step >= 1");
  std::vector<cost::Count> ns;
  for (std::size_t n = a.n_min; n <= a.n_max; n += a.n_step) ns.push_back(n);
  cost::CurveVariants v;
  v.plain = v.registers = v.jumbo = false;
  for (const auto& name : split_list(a.variants)) {
    if (name == "plain") v.plain = true;
    else if (name == "registers") v.registers = true;
    else if (name == "jumbo") v.jumbo = true;
    else throw ConfigError("variants: unknown variant '" + name + "'");
  }
  if (a.ffn_mult == 0 || a.jumbo_ffn_mult == 0) throw ConfigError("FFN multipliers must be >= 1");
  v.register_count = a.registers;
  v.jumbo_multiplier = a.jumbo;
  v.patch_ffn_multiplier = a.ffn_mult;
  v.jumbo_ffn_multiplier = a.jumbo_ffn_mult;
  const auto widths = parse_counts("widths", a.widths);
  for (auto w : widths) {
    if (w == 0) throw ConfigError("widths: must be >= 1");
  }
  const auto rows = cost::flop_curve(widths, ns, v);
  if (a.out.empty()) {
    cost::write_curve_csv(std::cout, rows);
  } else {
    std::ofstream os(a.out);
    if (!os) throw IoError("cannot write " + a.out);
    cost::write_curve_csv(os, rows);
    log.line("wrote " + std::to_string(rows.size()) + " rows to " + a.out);
  }
  return Exit::ok;
}

// ---------------------------------------------------------------------------
// Time series

std::vector<Key> ts_keys() {
  const ts::TSTrainPlan p;
  const ts::TSModelConfig m;
  using detail::format_double;
  return {
      {"run", "", "output directory for results.csv, ranks.csv and log.txt (optional)"},
      {"data", "", "comma-separated dataset directories (header.txt + <split>.tsv)"},
      {"synthetic", "", "generate one dataset in memory instead: series-classes"},
      {"synth_classes", "2", "synthetic classes"},
      {"synth_train", "400", "synthetic training records"},
      {"synth_val", "200", "synthetic validation records"},
      {"synth_test", "200", "synthetic test records"},
      {"synth_length", "64", "synthetic series length L"},
      {"synth_channels", "3", "synthetic channels M"},
      {"synth_frequency", "2", "cycles per series for class 1"},
      {"synth_separation", "2", "synthetic separation (noise std = 1/separation)"},
      {"synth_seed", "0", "synthetic data seed"},
      {"archs", "patchtst,registers,jumbo", "architectures to sweep"},
      {"lrs", "0.003,0.001,0.0003,0.0001", "learning-rate grid"},
      {"dropouts", "0,0.1,0.2", "dropout grid"},
      {"num_patches", std::to_string(m.num_patches), "patches per channel"},
      {"width", std::to_string(m.width), "token width D"},
      {"heads", std::to_string(m.heads), "attention heads"},
      {"depth", std::to_string(m.depth), "layers"},
      {"ffn_mult", std::to_string(m.ffn_multiplier), "patch FFN hidden multiplier"},
      {"jumbo", std::to_string(m.jumbo_multiplier), "Jumbo multiplier J (also sets the matched register count)"},
      {"jumbo_ffn_mult", std::to_string(m.jumbo_ffn_multiplier), "Jumbo FFN hidden multiplier"},
      {"epochs", std::to_string(p.epochs), "epochs per run"},
      {"batch_size", std::to_string(p.batch_size), "batch size"},
      {"final_lr", format_double(p.final_lr), "cosine floor"},
      {"warmup_fraction", format_double(p.warmup_fraction), "linear warmup share of steps"},
      {"weight_decay", format_double(p.weight_decay), "AdamW decoupled weight decay"},
      {"clip_grad_norm", format_double(p.clip_grad_norm), "global gradient-norm clip (0 = off)"},
      {"seed", "0", "base seed; each run hashes (dataset, lr, dropout, seed)"},
      {"split_seed", "0", "seed for halving a held-out split into validation and test"},
      {"impute", "false", "rank missing cells last instead of rejecting them"},
  };
}

std::vector<double> parse_doubles(const std::string& what, const std::string& list) {
  std::vector<double> out;
  for (const auto& x : split_list(list)) out.push_back(detail::parse_double(what, x));
  if (out.empty()) throw ConfigError(what + ": empty list");
  return out;
}

void emit_ranks(const std::vector<ts::SweepRun>& runs, bool impute, const fs::path& run, Log& log) {
  std::ostringstream warn;
  const auto summary = ts::summarize(runs, &warn);
  std::istringstream w(warn.str());
  for (std::string line; std::getline(w, line);) log.line(line);
  std::ostringstream table;
  ts::write_rank_table(table, ts::rank_summary(summary, impute));
  std::cout << table.str();
  if (!run.empty()) write_text(run / "ranks.csv", table.str());
}

int cmd_ts(const Settings& s, const std::string& rank_only, Log& log) {
  const fs::path run = s.str("run");
  if (!run.empty()) {
    fs::create_directories(run);
    write_text(run / "config.resolved", s.echo());
    log.open(run / "log.txt");
  }
  if (!rank_only.empty()) {
    std::vector<ts::SweepRun> runs;
    if (rank_only == "-") {
      runs = ts::read_results(std::cin, "stdin");
    } else {
      std::ifstream is(rank_only);
      if (!is) throw IoError("cannot open " + rank_only);
      runs = ts::read_results(is, rank_only);
    }
    if (runs.empty()) throw DataError("results file has no rows");
    emit_ranks(runs, s.flag("impute"), run, log);
    return Exit::ok;
  }

  std::vector<ts::TSData> sets;
  if (!s.str("synthetic").empty()) {
    if (s.str("synthetic") != "series-classes") throw ConfigError("synthetic: expected series-classes, got '" + s.str("synthetic") + "'");
    SyntheticSeriesSpec sp;
    sp.classes = s.uint("synth_classes");
    sp.train = s.uint("synth_train");
    sp.val = s.uint("synth_val");
    sp.test = s.uint("synth_test");
    sp.length = s.uint("synth_length");
    sp.channels = s.uint("synth_channels");
    sp.base_frequency = s.num("synth_frequency");
    sp.separation = s.num("synth_separation");
    sp.seed = s.uint("synth_seed");
    auto d = synthesize_series(sp);
    sets.push_back({"synthetic", std::move(d.train), std::move(d.val), std::move(d.test)});
  }
  for (const auto& dir : split_list(s.str("data"))) sets.push_back(ts::load_ts_dataset(dir, s.uint("split_seed")));
  if (sets.empty()) throw ConfigError("no datasets: set data or synthetic");

  std::vector<ts::Arch> archs;
  for (const auto& a : split_list(s.str("archs"))) archs.push_back(ts::parse_arch(a));
  if (archs.empty()) throw ConfigError("archs: empty list");
  const ts::SweepGrid grid{parse_doubles("lrs", s.str("lrs")), parse_doubles("dropouts", s.str("dropouts"))};
  ts::TSModelConfig m;
  m.num_patches = s.uint("num_patches");
  m.width = s.uint("width");
  m.heads = s.uint("heads");
  m.depth = s.uint("depth");
  m.ffn_multiplier = s.uint("ffn_mult");
  m.jumbo_multiplier = s.uint("jumbo");
  m.jumbo_ffn_multiplier = s.uint("jumbo_ffn_mult");
  ts::TSTrainPlan p;
  p.epochs = s.uint("epochs");
  p.batch_size = s.uint("batch_size");
  p.final_lr = s.num("final_lr");
  p.warmup_fraction = s.num("warmup_fraction");
  p.weight_decay = s.num("weight_decay");
  p.clip_grad_norm = s.num("clip_grad_norm");
  if (p.batch_size == 0) throw ConfigError("batch_size must be >= 1");

  std::ostringstream progress;
  const auto runs = ts::sweep<float>(sets, archs, grid, m, p, s.uint("seed"), &progress);
  std::istringstream pr(progress.str());
  for (std::string line; std::getline(pr, line);) log.line(line);
  std::ostringstream csv;
  ts::write_results(csv, runs);
  if (!run.empty()) write_text(run / "results.csv", csv.str());
  else std::cout << csv.str();
  emit_ranks(runs, s.flag("impute"), run, log);
  return Exit::ok;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthArgs {
  std::string task, out;
  std::size_t classes = 0, train = 0, val = 0, test = 0, height = 16, width = 16, length = 64, channels = 3;
  double frequency = 2.0, separation = 0;
  std::uint64_t seed = 0;
  bool set_train = false;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Jumbo token vision transformers: training, evaluation, cost planning and time-series sweeps"};
  app.require_subcommand(1);

  auto* train_cmd = app.add_subcommand("train", "train an image classifier into a run directory");
  Settings train_settings(image_keys());
  train_settings.bind(train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a run's checkpoint on one of its splits");
  std::string eval_run, eval_ckpt, eval_split;
  eval_cmd->add_option("--run", eval_run, "run directory written by train")->required();
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint path (default <run>/ckpt.final)");
  eval_cmd->add_option("--split", eval_split, "train, val or test (default: the run's eval_split)");

  auto* flops_cmd = app.add_subcommand("flops", "per-layer cost curve CSV or register matching");
  FlopsArgs fa;
  flops_cmd->add_option("--match-registers", fa.match, "print the register count matching P D J")->expected(3);
  flops_cmd->add_option("--widths", fa.widths, "comma-separated token widths")->capture_default_str();
  flops_cmd->add_option("--variants", fa.variants, "subset of plain,registers,jumbo")->capture_default_str();
  flops_cmd->add_option("--n-min", fa.n_min, "smallest patch count")->capture_default_str();
  flops_cmd->add_option("--n-max", fa.n_max, "largest patch count")->capture_default_str();
  flops_cmd->add_option("--n-step", fa.n_step, "patch count step")->capture_default_str();
  flops_cmd->add_option("--jumbo", fa.jumbo, "Jumbo multiplier J")->capture_default_str();
  flops_cmd->add_option("--registers", fa.registers, "register count R")->capture_default_str();
  flops_cmd->add_option("--ffn-mult", fa.ffn_mult, "patch FFN multiplier l")->capture_default_str();
  flops_cmd->add_option("--jumbo-ffn-mult", fa.jumbo_ffn_mult, "Jumbo FFN multiplier")->capture_default_str();
  flops_cmd->add_option("--out", fa.out, "CSV path (default stdout)");

  auto* ts_cmd = app.add_subcommand("ts", "time-series sweep over patchtst, registers and jumbo, with mean ranks");
  Settings ts_settings(ts_keys());
  ts_settings.bind(ts_cmd);
  std::string rank_only;
  ts_cmd->add_option("--rank-only", rank_only, "rank an existing results CSV ('-' for stdin) without training");

  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset to disk");
  SynthArgs sa;
  synth_cmd->add_option("--task", sa.task, "image-classes or series-classes")->required();
  synth_cmd->add_option("--out", sa.out, "output directory")->required();
  synth_cmd->add_option("--classes", sa.classes, "classes (default 10 images, 2 series)");
  synth_cmd->add_option("--train", sa.train, "training samples (default 1000 images, 400 series)");
  synth_cmd->add_option("--val", sa.val, "validation samples (default 200)");
  synth_cmd->add_option("--test", sa.test, "test samples (default 200)");
  synth_cmd->add_option("--height", sa.height, "image height")->capture_default_str();
  synth_cmd->add_option("--width", sa.width, "image width")->capture_default_str();
  synth_cmd->add_option("--length", sa.length, "series length L")->capture_default_str();
  synth_cmd->add_option("--channels", sa.channels, "series channels M")->capture_default_str();
  synth_cmd->add_option("--frequency", sa.frequency, "series cycles for class 1")->capture_default_str();
  synth_cmd->add_option("--separation", sa.separation, "class separation (default 4 images, 2 series)");
  synth_cmd->add_option("--seed", sa.seed, "seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? Exit::ok : Exit::usage;
  }

  Log log;
  try {
    if (*train_cmd) {
      train_settings.resolve();
      return cmd_train(train_settings, log);
    }
    if (*eval_cmd) return cmd_eval(eval_run, eval_ckpt, eval_split, log);
    if (*flops_cmd) return cmd_flops(fa, log);
    if (*ts_cmd) {
      ts_settings.resolve();
      return cmd_ts(ts_settings, rank_only, log);
    }
    if (*synth_cmd) {
      if (sa.task == "image-classes") {
        SyntheticImageSpec s;
        if (synth_cmd->count("--classes")) s.classes = sa.classes;
        if (synth_cmd->count("--train")) s.train = sa.train;
        if (synth_cmd->count("--val")) s.val = sa.val;
        if (synth_cmd->count("--test")) s.test = sa.test;
        if (synth_cmd->count("--separation")) s.separation = sa.separation;
        s.height = sa.height;
        s.width = sa.width;
        s.seed = sa.seed;
        write_synthetic_images(s, sa.out);
      } else if (sa.task == "series-classes") {
        SyntheticSeriesSpec s;
        if (synth_cmd->count("--classes")) s.classes = sa.classes;
        if (synth_cmd->count("--train")) s.train = sa.train;
        if (synth_cmd->count("--val")) s.val = sa.val;
        if (synth_cmd->count("--test")) s.test = sa.test;
        if (synth_cmd->count("--separation")) s.separation = sa.separation;
        s.length = sa.length;
        s.channels = sa.channels;
        s.base_frequency = sa.frequency;
        s.seed = sa.seed;
        write_synthetic_series(s, sa.out);
      } else {
        throw ConfigError("--task: expected image-classes or series-classes, got '" + sa.task + "'");
      }
      log.line("wrote " + sa.task + " dataset to " + sa.out);
      return Exit::ok;
    }
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return Exit::usage;
  } catch (const ContractError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return Exit::usage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return Exit::numeric;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return Exit::data;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return Exit::data;
  }
  return Exit::usage;
}
