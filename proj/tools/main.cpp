// defeat_cli: dataset generation, training, distillation and analysis runs.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "defeat/checkpoint.hpp"
#include "defeat/data_synth.hpp"
#include "defeat/errors.hpp"
#include "defeat/eval_analysis.hpp"
#include "defeat/train_loop.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace defeat;

namespace {

enum ExitCode { kOk = 0, kInternal = 1, kUsage = 2, kIo = 3, kDiverged = 4, kMismatch = 5 };

// Splices `--config file.json` (flat object keyed by long flag names) into the
// argument list right after the subcommand names. Keys also given on the
// command line are skipped so explicit flags win.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config file " + path + " must hold a JSON object");

  auto given = [&](const std::string& flag) {
    for (const auto& a : args)
      if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
    return false;
  };
  auto scalar = [&](const std::string& key, const json& v) -> std::string {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number()) return v.dump();
    throw ConfigError("config key " + key + " must be a string, number, boolean or array");
  };
  std::vector<std::string> injected;
  for (const auto& [key, value] : j.items()) {
    const std::string flag = "--" + key;
    if (given(flag)) continue;
    if (value.is_boolean()) {
      injected.push_back(flag + "=" + (value.get<bool>() ? "true" : "false"));
    } else if (value.is_array()) {
      injected.push_back(flag);
      for (const auto& v : value) injected.push_back(scalar(key, v));
    } else {
      injected.push_back(flag);
      injected.push_back(scalar(key, value));
    }
  }
  std::size_t at = 0;
  while (at < args.size() && args[at].rfind("-", 0) != 0) ++at;
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(at), injected.begin(), injected.end());
  return args;
}

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  json config = json::object();
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs, outputs;

  void write(const fs::path& dir, double wall_seconds) const {
    json j;
    j["command"] = command;
    j["argv"] = argv;
    j["config"] = config;
    j["seed"] = seed;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    json sums = json::object();
    for (const auto& [name, path] : outputs)
      if (fs::is_regular_file(path)) sums[name] = sha256_file(path);
    j["checksums"] = sums;
    j["wall_time_s"] = wall_seconds;
    std::ofstream out(dir / "manifest.json");
    if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
    out << j.dump(2) << "\n";
  }
};

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

Dataset load_data(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir);
  return read_dataset(dir);
}

Detector load_model(const std::string& path) {
  if (!fs::is_regular_file(path)) throw IoError("checkpoint not found: " + path);
  return load_checkpoint(path);
}

std::vector<DetectionSample> head(const Dataset& d, int n) {
  const auto count = n > 0 ? std::min<std::size_t>(static_cast<std::size_t>(n), d.samples.size()) : d.samples.size();
  return {d.samples.begin(), d.samples.begin() + static_cast<std::ptrdiff_t>(count)};
}

// Flags shared by every command that trains.
struct TrainFlags {
  TrainConfig tc;
  std::string arch;
  std::string neck = "none", cls = "none", mask = "gt", source = "teacher", region = "all";
  bool backbone_uniform = false;
  bool fg_softmax = false;
  int log_every = 50;
  CLI::Option* decay_opt = nullptr;

  void add(CLI::App* app, const std::string& default_arch, bool distill_flags) {
    arch = default_arch;
    app->add_option("--arch", arch, "detector preset")->check(CLI::IsMember({"teacher", "student"}));
    app->add_option("--epochs", tc.epochs);
    app->add_option("--batch-size", tc.batch_size);
    app->add_option("--lr", tc.lr);
    app->add_option("--momentum", tc.momentum);
    app->add_option("--weight-decay", tc.weight_decay);
    decay_opt = app->add_option("--lr-decay-epochs", tc.lr_decay_epochs, "default: 2/3 and 11/12 of --epochs")
                    ->expected(0, -1);
    app->add_option("--lr-decay-factor", tc.lr_decay_factor);
    app->add_option("--warmup-iters", tc.warmup_iters);
    app->add_option("--warmup-ratio", tc.warmup_ratio);
    app->add_option("--seed", tc.seed);
    app->add_option("--train-proposals", tc.step.train_proposals);
    app->add_option("--distill-proposals", tc.step.distill_proposals);
    app->add_option("--log-every", log_every, "progress line interval in iterations, 0 disables");
    if (!distill_flags) return;
    auto& d = tc.distill;
    app->add_option("--distill-neck", neck)->check(CLI::IsMember({"none", "all", "decoupled"}));
    app->add_option("--distill-cls", cls)->check(CLI::IsMember({"none", "all", "decoupled"}));
    app->add_flag("--distill-backbone", d.backbone);
    app->add_flag("--backbone-uniform", backbone_uniform, "uniform instead of decoupled loss on the backbone");
    app->add_option("--mask", mask)->check(CLI::IsMember({"gt", "random", "all_one"}));
    app->add_option("--neck-region", region, "cells used by the uniform neck loss")
        ->check(CLI::IsMember({"all", "object", "background"}));
    app->add_option("--proposal-source", source)->check(CLI::IsMember({"teacher", "student"}));
    app->add_flag("--fg-softmax", fg_softmax, "softmax over foreground classes only in the proposal KL");
    app->add_option("--alpha-obj", d.alpha_obj);
    app->add_option("--alpha-bg", d.alpha_bg);
    app->add_option("--beta-obj", d.beta_obj);
    app->add_option("--beta-bg", d.beta_bg);
    app->add_option("--t-obj", d.t_obj);
    app->add_option("--t-bg", d.t_bg);
    app->add_option("--gamma", d.gamma);
    app->add_option("--lambda", d.lambda);
  }

  TrainConfig resolve() const {
    TrainConfig out = tc;
    if (decay_opt->count() == 0) {
      // Keep the 8/11-of-12 decay shape for any schedule length.
      out.lr_decay_epochs.clear();
      for (double frac : {8.0 / 12.0, 11.0 / 12.0}) {
        const int e = static_cast<int>(std::lround(frac * out.epochs));
        if (e > 0 && e < out.epochs && (out.lr_decay_epochs.empty() || e > out.lr_decay_epochs.back()))
          out.lr_decay_epochs.push_back(e);
      }
    }
    out.distill.neck = parse_neck_mode(neck);
    out.distill.cls = parse_cls_mode(cls);
    out.distill.mask = parse_mask_kind(mask);
    out.distill.region = parse_neck_region(region);
    out.distill.backbone_decoupled = !backbone_uniform;
    out.distill.softmax_includes_bg = !fg_softmax;
    out.step.proposal_source = source == "student" ? ProposalSource::student : ProposalSource::teacher;
    out.validate();
    return out;
  }

  DetectorConfig detector(int image_size) const {
    return arch == "teacher" ? teacher_preset(image_size) : student_preset(image_size);
  }

  ProgressFn progress() const {
    if (log_every <= 0) return {};
    const int every = log_every;
    return [every](int epoch, long iter, const TrainRecord& r) {
      if (iter % every != 0) return;
      std::fprintf(stderr, "epoch %d iter %ld lr %.5g cls %.4f reg %.4f rpn %.4f fea %.4f/%.4f kd %.4f/%.4f\n", epoch,
                   iter, r.lr, r.cls_gt, r.reg, r.rpn, r.fea_obj, r.fea_bg, r.cls_pos, r.cls_neg);
    };
  }
};

std::map<std::string, std::string> save_run(const fs::path& out, const TrainResult& result, const TrainConfig& tc,
                                            const DatasetSpec& spec) {
  make_dir(out);
  const json meta{{"train_config", tc}, {"dataset", spec}};
  save_checkpoint(result.model, out / "model.json", meta);
  result.log.write_csv(out / "train_log.csv");
  json side{{"columns", TrainLog::columns()},
            {"detector", result.model.config()},
            {"train_config", tc},
            {"dataset", spec},
            {"iterations", result.log.records.size()}};
  std::ofstream(out / "train_log.json") << side.dump(2) << "\n";
  return {{"checkpoint", (out / "model.json").string()},
          {"weights", (out / "model.bin").string()},
          {"train_log", (out / "train_log.csv").string()},
          {"train_log_meta", (out / "train_log.json").string()}};
}

}  // namespace

int main(int argc, char** argv) {
  const auto started = std::chrono::steady_clock::now();
  CLI::App app{"Decoupled-feature distillation on a miniature two-stage detector", "defeat_cli"};
  app.failure_message(CLI::FailureMessage::help);
  app.require_subcommand(1);
  std::string config_path;
  auto with_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON file of flag values (flat keys, command-line flags win)");
    return sub;
  };
  app.option_defaults()->always_capture_default();

  Manifest manifest;
  manifest.argv.assign(argv, argv + argc);
  std::function<void()> action;
  fs::path manifest_dir;

  // gen-data
  DatasetSpec spec;
  std::string data_out, background = "clutter";
  auto* gen = with_config(app.add_subcommand("gen-data", "render a synthetic shapes dataset"));
  gen->add_option("--num-images", spec.num_images);
  gen->add_option("--image-size", spec.image_size);
  gen->add_option("--classes", spec.num_classes);
  gen->add_option("--min-objects", spec.min_objects);
  gen->add_option("--max-objects", spec.max_objects);
  gen->add_option("--min-box-side", spec.min_box_side);
  gen->add_option("--max-box-side", spec.max_box_side);
  gen->add_option("--background", background)->check(CLI::IsMember({"plain", "clutter"}));
  gen->add_option("--seed", spec.seed);
  gen->add_option("--out", data_out, "output directory")->required();
  gen->callback([&] {
    action = [&] {
      spec.background = background == "plain" ? BackgroundMode::plain : BackgroundMode::clutter;
      spec.validate();
      make_dir(data_out);
      const auto path = write_dataset(generate_dataset(spec), spec, data_out);
      manifest.command = "gen-data";
      manifest.config = spec;
      manifest.seed = spec.seed;
      manifest.outputs["annotations"] = path.string();
      manifest_dir = data_out;
    };
  });

  // train / distill
  std::string data_dir, run_out, teacher_path;
  TrainFlags train_flags, distill_flags;
  auto* train = with_config(app.add_subcommand("train", "train a detector without distillation"));
  train->add_option("--data", data_dir, "training dataset directory")->required();
  train->add_option("--out", run_out, "run directory")->required();
  train_flags.add(train, "teacher", false);
  train->callback([&] {
    action = [&] {
      const auto tc = train_flags.resolve();
      const auto data = load_data(data_dir);
      const auto cfg = train_flags.detector(data.spec.image_size);
      const auto result = train_teacher(cfg, tc, data.samples, train_flags.progress());
      manifest.command = "train";
      manifest.config = {{"arch", train_flags.arch}, {"detector", cfg}, {"train", tc}};
      manifest.seed = tc.seed;
      manifest.inputs["data"] = data_dir;
      manifest.outputs = save_run(run_out, result, tc, data.spec);
      manifest_dir = run_out;
    };
  });

  auto* distill = with_config(app.add_subcommand("distill", "train a student against a teacher checkpoint"));
  distill->add_option("--data", data_dir, "training dataset directory")->required();
  distill->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
  distill->add_option("--out", run_out, "run directory")->required();
  distill_flags.add(distill, "student", true);
  distill->callback([&] {
    action = [&] {
      auto tc = distill_flags.resolve();
      tc.teacher_checkpoint = teacher_path;
      const auto data = load_data(data_dir);
      const Detector teacher = load_model(teacher_path);
      const auto cfg = distill_flags.detector(data.spec.image_size);
      const auto result = distill_student(cfg, tc, data.samples, teacher, distill_flags.progress());
      manifest.command = "distill";
      manifest.config = {{"arch", distill_flags.arch}, {"detector", result.model.config()}, {"train", tc}};
      manifest.seed = tc.seed;
      manifest.inputs = {{"data", data_dir}, {"teacher", teacher_path}};
      manifest.outputs = save_run(run_out, result, tc, data.spec);
      manifest_dir = run_out;
    };
  });

  // eval
  std::string model_path, report_out;
  InferenceSettings infer;
  double error_min_score = 0.3;
  int max_images = 0;
  auto add_eval_flags = [&](CLI::App* sub) {
    sub->add_option("--model", model_path, "checkpoint to evaluate")->required();
    sub->add_option("--data", data_dir, "evaluation dataset directory")->required();
    sub->add_option("--out", report_out, "report directory")->required();
    sub->add_option("--workers", infer.workers, "inference threads")->check(CLI::PositiveNumber);
    sub->add_option("--score-threshold", infer.score_threshold);
    sub->add_option("--max-detections", infer.max_detections);
    sub->add_option("--max-images", max_images, "use only the first N images (0 = all)");
  };
  auto finish_report = [&](const std::string& command, const ReportData& report) {
    make_dir(report_out);
    emit_report(report_out, report);
    manifest.command = command;
    manifest_dir = report_out;
    for (const char* name : {"map.csv", "errors.csv", "channel_distance.csv", "grad_norms.csv", "summary.json"})
      manifest.outputs[name] = (fs::path(report_out) / name).string();
  };

  auto* eval = with_config(app.add_subcommand("eval", "mAP and error breakdown of a checkpoint"));
  add_eval_flags(eval);
  eval->add_option("--error-min-score", error_min_score);
  eval->callback([&] {
    action = [&] {
      const auto data = load_data(data_dir);
      const Detector det = load_model(model_path);
      const auto samples = head(data, max_images);
      const auto summary = evaluate(det, samples, data.classes, infer, error_min_score);
      ReportData report;
      report.classes = data.classes;
      report.map50 = summary.map50;
      report.map_coco = summary.map_coco;
      report.errors = summary.errors;
      report.extra["detections"] = summary.num_detections;
      report.extra["images"] = samples.size();
      finish_report("eval", report);
      manifest.config = {{"score_threshold", infer.score_threshold}, {"error_min_score", error_min_score}};
      manifest.inputs = {{"model", model_path}, {"data", data_dir}};
      std::printf("mAP@0.5 %s  mAP@[.5:.95] %s\n", format_number(summary.map50.map).c_str(),
                  format_number(summary.map_coco.map).c_str());
    };
  });

  // analyze
  auto* analyze = app.add_subcommand("analyze", "diagnostic analyses");
  analyze->require_subcommand(1);

  auto* errors = with_config(analyze->add_subcommand("errors", "false-positive taxonomy"));
  add_eval_flags(errors);
  errors->add_option("--error-min-score", error_min_score);
  errors->callback([&] {
    action = [&] {
      const auto data = load_data(data_dir);
      const Detector det = load_model(model_path);
      const auto samples = head(data, max_images);
      const auto dets = run_detector(det, samples, infer);
      std::vector<ImageGroundTruth> gts;
      for (const auto& s : samples) gts.push_back(s.annotations);
      ReportData report;
      report.classes = data.classes;
      report.errors = categorize_errors(dets, gts, data.classes, error_min_score);
      report.extra["detections"] = report.errors->detections();
      finish_report("analyze errors", report);
      manifest.config = {{"error_min_score", error_min_score}};
      manifest.inputs = {{"model", model_path}, {"data", data_dir}};
    };
  });

  auto* distance = with_config(analyze->add_subcommand("distance", "per-channel teacher/student feature distance"));
  add_eval_flags(distance);
  distance->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
  distance->callback([&] {
    action = [&] {
      const auto data = load_data(data_dir);
      const Detector teacher = load_model(teacher_path);
      const Detector student = load_model(model_path);
      ChannelDistanceAverager acc;
      const auto samples = head(data, max_images > 0 ? max_images : 20);
      for (const auto& s : samples) accumulate_neck_distance(teacher, student, s, acc);
      ReportData report;
      report.classes = data.classes;
      report.distance = acc.result();
      report.extra["images"] = samples.size();
      finish_report("analyze distance", report);
      manifest.inputs = {{"model", model_path}, {"teacher", teacher_path}, {"data", data_dir}};
    };
  });

  auto* grad_norms = with_config(analyze->add_subcommand("grad-norms", "detection-loss gradient norms on object vs background"));
  add_eval_flags(grad_norms);
  grad_norms->callback([&] {
    action = [&] {
      const auto data = load_data(data_dir);
      const Detector det = load_model(model_path);
      const auto samples = head(data, max_images);
      // Average of per-image region means.
      GradNormResult total;
      long with_obj = 0, with_bg = 0;
      for (const auto& s : samples) {
        const auto r = feature_gradient_norms(det, s);
        if (r.cells_obj > 0) total.avg_obj += r.avg_obj, ++with_obj;
        if (r.cells_bg > 0) total.avg_bg += r.avg_bg, ++with_bg;
        total.cells_obj += r.cells_obj;
        total.cells_bg += r.cells_bg;
      }
      if (with_obj) total.avg_obj /= static_cast<double>(with_obj);
      if (with_bg) total.avg_bg /= static_cast<double>(with_bg);
      ReportData report;
      report.classes = data.classes;
      report.grad_norms = total;
      report.extra["images"] = samples.size();
      finish_report("analyze grad-norms", report);
      manifest.inputs = {{"model", model_path}, {"data", data_dir}};
    };
  });

  std::string val_dir, parameter;
  std::vector<double> values;
  std::vector<std::uint64_t> seeds{0};
  TrainFlags sweep_flags;
  auto* sweep = with_config(analyze->add_subcommand("sweep", "retrain the student over values of one distillation coefficient"));
  sweep->add_option("--data", data_dir, "training dataset directory")->required();
  sweep->add_option("--val", val_dir, "validation dataset directory")->required();
  sweep->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
  sweep->add_option("--out", report_out, "report directory")->required();
  sweep->add_option("--param", parameter, "coefficient name, e.g. alpha_bg")->required();
  sweep->add_option("--values", values)->required();
  sweep->add_option("--seeds", seeds);
  sweep_flags.add(sweep, "student", true);
  sweep->callback([&] {
    action = [&] {
      auto tc = sweep_flags.resolve();
      set_distill_param(tc.distill, parameter, values.front());  // rejects unknown names before training
      const auto train_data = load_data(data_dir);
      const auto val_data = load_data(val_dir);
      const Detector teacher = load_model(teacher_path);
      const auto cfg = sweep_flags.detector(train_data.spec.image_size);
      const auto rows =
          sweep_coefficient(cfg, tc, parameter, values, seeds, train_data.samples, val_data.samples, teacher);
      make_dir(report_out);
      const auto path = fs::path(report_out) / "sweep.csv";
      write_sweep_csv(path, parameter, rows);
      manifest.command = "analyze sweep";
      manifest.config = {{"parameter", parameter}, {"values", values}, {"seeds", seeds}, {"train", tc}};
      manifest.seed = tc.seed;
      manifest.inputs = {{"data", data_dir}, {"val", val_dir}, {"teacher", teacher_path}};
      manifest.outputs["sweep"] = path.string();
      manifest_dir = report_out;
    };
  });

  std::vector<std::string> args;
  try {
    args = expand_config(argc, argv);
  } catch (const IoError& e) {
    std::cerr << e.what() << "\n";
    return kIo;
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kUsage;
  }
  std::reverse(args.begin(), args.end());  // CLI11 consumes the vector from the back
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return e.get_exit_code() == 0 ? code : kUsage;
  }

  try {
    action();
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    manifest.write(manifest_dir, wall);
    return kOk;
  } catch (const TeacherStudentMismatch& e) {
    std::cerr << "teacher/student mismatch: " << e.what() << "\n";
    return kMismatch;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kDiverged;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const LoadError& e) {
    std::cerr << "load error: " << e.what() << "\n";
    return kIo;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
}
