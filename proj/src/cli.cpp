#include "actnet/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "actnet/checkpoint.hpp"
#include "actnet/config.hpp"
#include "actnet/data.hpp"
#include "actnet/metrics.hpp"
#include "actnet/model.hpp"
#include "actnet/trainer.hpp"

namespace actnet::cli {

namespace fs = std::filesystem;

namespace {

struct TrainArgs {
  std::string config_path;
  std::string data;
  std::string out;
  std::string metrics;
  std::string mode;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

void add_train_flags(CLI::App* cmd, TrainArgs& a) {
  cmd->add_option("--config", a.config_path, "key=value config file")->check(CLI::ExistingFile);
  cmd->add_option("--data", a.data, "dataset root (images/, masks/, manifest.tsv)")->required()->check(CLI::ExistingDirectory);
  cmd->add_option("--out", a.out, "output checkpoint")->required();
  cmd->add_option("--metrics", a.metrics, "per-iteration CSV (default: metrics.csv next to --out)");
  cmd->add_option("--seed", a.seed, "training seed; also seeds initialization");
  cmd->add_option("--set", a.sets, "override a config key, KEY=VALUE (repeatable)");
}

TrainConfig build_config(const TrainArgs& a) {
  TrainConfig c;
  if (!a.config_path.empty()) c = load_config(a.config_path, c);
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
    apply_setting(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (a.seed) {
    c.seed = *a.seed;
    c.init_seed = *a.seed;
  }
  if (!a.mode.empty()) c.mode = parse_mode(a.mode);
  return c;
}

RunOptions run_options(const TrainArgs& a, std::ostream& out) {
  RunOptions o;
  o.metrics_path = a.metrics.empty() ? fs::path(a.out).parent_path() / "metrics.csv" : fs::path(a.metrics);
  o.progress = [&out](const IterationLosses& r) {
    if (!r.val_dsc) return;
    char buf[160];
    std::snprintf(buf, sizeof buf, "iter %6lld  lr %.5f  loss %.5f  val_dsc %.4f\n",
                  static_cast<long long>(r.iteration + 1), r.lr, r.total, *r.val_dsc);
    out << buf << std::flush;
  };
  return o;
}

void report_done(const TrainResult& r, const std::string& path, std::ostream& out) {
  out << "wrote " << path;
  if (r.checkpoint.has_best)
    out << " (best val mean DSC " << r.checkpoint.best_val_dsc << " at iteration " << r.checkpoint.best_iteration << ")";
  out << "; config digest " << r.checkpoint.config_digest << "\n";
}

int cmd_synth(int count, int side, std::uint64_t seed, const std::string& dir, std::ostream& out) {
  generate_synthetic(count, side, seed, dir);
  out << "wrote " << count << " slices of " << side << "x" << side << " to " << dir << "\n";
  return kExitOk;
}

int cmd_pretrain(const TrainArgs& a, const std::string& spec, std::ostream& out) {
  TrainConfig c = build_config(a);
  if (!spec.empty()) {
    const ModelSpec s = parse_spec(spec);
    c.student_spec.num_encoder_layers = s.num_encoder_layers;
    c.student_spec.initial_channels = s.initial_channels;
  }
  if (a.mode.empty() && c.mode != TrainMode::FS) c.mode = TrainMode::MT;
  c.validate();
  const DatasetSplits data = load_dataset(a.data, c.student_spec.num_classes);
  const TrainResult r = pretrain_mean_teacher(data, c, run_options(a, out));
  save_checkpoint(a.out, r.checkpoint);
  report_done(r, a.out, out);
  return kExitOk;
}

int cmd_train_act(const TrainArgs& a, const std::string& teacher_path, const std::string& init_path,
                  bool from_scratch, std::ostream& out) {
  TrainConfig c = build_config(a);
  if (from_scratch) c.from_scratch = true;
  c.validate();
  std::optional<Checkpoint> teacher, init;
  if (!teacher_path.empty()) teacher = load_checkpoint(teacher_path);
  if (!init_path.empty()) init = load_checkpoint(init_path);
  const DatasetSplits data = load_dataset(a.data, c.student_spec.num_classes);
  const TrainResult r =
      train_act(data, c, teacher ? &*teacher : nullptr, init ? &*init : nullptr, run_options(a, out));
  save_checkpoint(a.out, r.checkpoint);
  report_done(r, a.out, out);
  return kExitOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& split_name,
             const std::string& report_path, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  UNet model = make_model(ckpt.selected());
  const DatasetSplits data = load_dataset(data_dir, model.spec().num_classes);
  const Split split = parse_split(split_name);
  const auto& samples = split == Split::Train ? data.train_labeled : split == Split::Val ? data.val : data.test;
  EvalReport report = evaluate(model, samples);
  report.config_digest = ckpt.config_digest;
  out << format_report_table(report, to_string(model.spec()));
  write_report_json(report_path, report);
  out << "wrote " << report_path << "\n";
  return kExitOk;
}

int cmd_complexity(const std::vector<std::string>& specs, int side, std::ostream& out) {
  struct Row {
    std::string name;
    ComplexityReport r;
  };
  std::vector<Row> rows;
  for (const auto& s : specs) {
    ModelSpec spec = parse_spec(s);
    spec.input_side = side;
    rows.push_back({to_string(spec), complexity(spec)});
  }
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-14s %12s %16s %12s\n", "Model", "Params (M)", "Model size (MB)", "FLOPs (G)");
  out << buf;
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof buf, "%-14s %12.2f %16.2f %12.2f\n", row.name.c_str(), row.r.param_count / 1e6,
                  static_cast<double>(row.r.model_size_bytes) / (1024.0 * 1024.0), row.r.flops / 1e9);
    out << buf;
  }
  out << "\nmodel,side,params,params_m,model_size_bytes,model_size_mb,flops,flops_g,conv_flops,norm_flops,activation_flops\n";
  for (const auto& row : rows) {
    const auto& r = row.r;
    std::snprintf(buf, sizeof buf, "\"%s\",%d,%lld,%.6f,%lld,%.6f,%lld,%.6f,%lld,%lld,%lld\n", row.name.c_str(), side,
                  static_cast<long long>(r.param_count), r.param_count / 1e6,
                  static_cast<long long>(r.model_size_bytes),
                  static_cast<double>(r.model_size_bytes) / (1024.0 * 1024.0), static_cast<long long>(r.flops),
                  r.flops / 1e9, static_cast<long long>(r.conv_flops), static_cast<long long>(r.norm_flops),
                  static_cast<long long>(r.activation_flops));
    out << buf;
  }
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Asymmetric co-teaching for label- and memory-efficient segmentation", "actnet"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "print help for every subcommand");
  std::uint64_t global_seed = 0;

  auto* synth = app.add_subcommand("synth-data", "generate a synthetic slice dataset");
  int count = 200, side = 64;
  std::uint64_t synth_seed = 0;
  std::string synth_out;
  synth->add_option("--count", count, "number of slices")->check(CLI::PositiveNumber)->capture_default_str();
  synth->add_option("--side", side, "image side in pixels, multiple of 8")->capture_default_str();
  synth->add_option("--seed", synth_seed, "generator seed")->capture_default_str();
  synth->add_option("--out", synth_out, "output directory")->required();

  auto* pretrain = app.add_subcommand("pretrain", "self-ensembling pretraining (mode MT or FS)");
  TrainArgs pre_args;
  std::string pre_spec;
  add_train_flags(pretrain, pre_args);
  pretrain->add_option("--spec", pre_spec, "model L,N1 (overrides student_spec)");
  pretrain->add_option("--mode", pre_args.mode, "MT (default) or FS")->check(CLI::IsMember({"MT", "FS"}));

  auto* act = app.add_subcommand("train-act", "joint training from a frozen teacher and an EMA co-teacher");
  TrainArgs act_args;
  std::string teacher_path, init_path;
  bool from_scratch = false;
  add_train_flags(act, act_args);
  act->add_option("--teacher", teacher_path, "teacher checkpoint (needed for KD and ACT)")->check(CLI::ExistingFile);
  act->add_option("--student-init", init_path, "pretrained student checkpoint")->check(CLI::ExistingFile);
  act->add_flag("--from-scratch", from_scratch, "initialize the student randomly instead of from --student-init");
  act->add_option("--mode", act_args.mode, "FS, MT, KD or ACT")->check(CLI::IsMember({"FS", "MT", "KD", "ACT"}));

  auto* eval = app.add_subcommand("eval", "per-class DSC of a checkpoint on a dataset split");
  std::string ckpt_path, eval_data, split = "test", report_path = "report.json";
  eval->add_option("--ckpt", ckpt_path, "checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data, "dataset root")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--split", split, "train (labeled), val or test")->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  eval->add_option("--report", report_path, "JSON report path")->capture_default_str();
  eval->add_option("--seed", global_seed, "accepted for uniformity; evaluation is deterministic");

  auto* cx = app.add_subcommand("complexity", "parameter count, model size and FLOPs");
  std::vector<std::string> specs;
  int cx_side = 256;
  cx->add_option("--spec", specs, "model L,N1 (repeatable)")->required();
  cx->add_option("--side", cx_side, "input side in pixels")->check(CLI::PositiveNumber)->capture_default_str();
  cx->add_option("--seed", global_seed, "accepted for uniformity; the count is analytic");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (args.empty()) {
      err << app.help();
    } else {
      err << "usage error: " << e.what() << "\n";
      err << "run with --help for usage\n";
    }
    return kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(count, side, synth_seed, synth_out, out);
    if (pretrain->parsed()) return cmd_pretrain(pre_args, pre_spec, out);
    if (act->parsed()) return cmd_train_act(act_args, teacher_path, init_path, from_scratch, out);
    if (eval->parsed()) return cmd_eval(ckpt_path, eval_data, split, report_path, out);
    if (cx->parsed()) return cmd_complexity(specs, cx_side, out);
  } catch (const DivergenceError& e) {
    err << "error: training diverged at iteration " << e.iteration() << ": " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace actnet::cli
