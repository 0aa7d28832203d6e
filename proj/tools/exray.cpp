// exray: forge fixtures, scan models, aggregate reports.

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "exray/error.hpp"
#include "exray/forge.hpp"
#include "exray/scan.hpp"
#include "exray/tally.hpp"

namespace fs = std::filesystem;
using namespace exray;

namespace {

constexpr int kExitClean = 0;
constexpr int kExitError = 1;
constexpr int kExitTrojaned = 3;

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
    out << text;
    if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
  }
  fs::rename(tmp, path);
}

void write_f32(const fs::path& path, const Tensor& t) {
  std::string bytes(t.size() * sizeof(float), '\0');
  std::memcpy(bytes.data(), t.data(), bytes.size());
  write_file(path, bytes);
}

// Empty when parsing succeeded; otherwise the exit code after CLI11 printed help or the error.
std::optional<int> parse(CLI::App& app, int argc, char** argv) {
  try {
    app.parse(argc, argv);
    return std::nullopt;
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitClean : kExitError;
  }
}

std::size_t default_jobs() {
  if (const char* env = std::getenv("EXRAY_JOBS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw Error(ErrorCode::invalid_config, "EXRAY_JOBS must be a positive integer");
  }
  return 1;
}

int run_forge(int argc, char** argv) {
  CLI::App app{"Forge a fixture: dataset bundles, trained model and provenance.json", "exray forge"};
  app.set_config("--config", "", "TOML file with option values");
  std::string preset = "clean";
  std::uint64_t seed = 0;
  std::string out;
  std::optional<std::size_t> classes, train_per_class, eval_per_class, victim, target, max_epochs;
  std::optional<double> rate, adaptive_weight, lr, occlusion, jitter;
  app.add_option("--preset", preset, "clean, similar, patch-trojan, filter-trojan or adaptive")
      ->check(CLI::IsMember(std::vector<std::string>{"clean", "similar", "patch-trojan", "filter-trojan", "adaptive"}));
  app.add_option("--seed", seed, "base seed");
  app.add_option("--out", out, "output directory")->required();
  app.add_option("--classes", classes);
  app.add_option("--train-per-class", train_per_class);
  app.add_option("--eval-per-class", eval_per_class);
  app.add_option("--jitter", jitter, "geometric jitter in pixels");
  app.add_option("--victim", victim, "poison victim class");
  app.add_option("--target", target, "poison target class");
  app.add_option("--poison-rate", rate);
  app.add_option("--adaptive-weight", adaptive_weight, "feature-statistics loss weight");
  app.add_option("--max-epochs", max_epochs);
  app.add_option("--lr", lr);
  app.add_option("--occlusion", occlusion, "chance of a random 3x3 occlusion per training draw");
  if (const auto code = parse(app, argc, argv)) return *code;

  ForgeConfig cfg = forge_preset(preset, seed);
  if (classes) cfg.classes = *classes;
  if (train_per_class) cfg.train_per_class = *train_per_class;
  if (eval_per_class) cfg.eval_per_class = *eval_per_class;
  if (jitter) cfg.jitter = *jitter;
  if (max_epochs) cfg.train.max_epochs = *max_epochs;
  if (lr) cfg.train.lr = *lr;
  if (occlusion) cfg.train.occlusion = *occlusion;
  if (adaptive_weight) {
    if (!cfg.poison) throw Error(ErrorCode::invalid_config, "--adaptive-weight needs a poisoned preset");
    cfg.adaptive_weight = *adaptive_weight;
  }
  if (victim || target || rate) {
    if (!cfg.poison) throw Error(ErrorCode::invalid_config, "poison options need a poisoned preset");
    if (victim) cfg.poison->victim = *victim;
    if (target) cfg.poison->target = *target;
    if (rate) cfg.poison->rate = *rate;
  }
  const Fixture f = forge(cfg);
  write_fixture(f, out);
  const FixtureMetrics& m = f.model.metrics;
  std::printf("%-16s %s\n", "model", cfg.id.c_str());
  std::printf("%-16s %zu\n", "epochs", m.epochs);
  std::printf("%-16s %.4f\n", "accuracy", m.accuracy);
  if (m.asr) std::printf("%-16s %.4f\n", "asr", *m.asr);
  if (m.feature_gap) std::printf("%-16s %.6g\n", "feature_gap", *m.feature_gap);
  std::printf("%-16s %zu\n", "poisoned", f.data.poisoned.size());
  return kExitClean;
}

int run_scan(int argc, char** argv) {
  CLI::App app{"Scan one model: reverse triggers, judge each one, write a report", "exray scan"};
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "TOML file with option values");
  ScanOptions o;
  std::string model_dir, samples_dir, out, mode = "symmetric", layer = "second-last-conv", rule = "or";
  std::size_t jobs = default_jobs();
  app.add_option("--model", model_dir, "model bundle directory")->required();
  app.add_option("--samples", samples_dir, "dataset bundle directory")->required();
  app.add_option("--out", out, "report path")->required()->configurable(false);
  app.add_option("--mode", mode)->check(CLI::IsMember(std::vector<std::string>{
      "symmetric", "one-sided-v2t", "one-sided-t2v", "eq5-only", "eq6-only", "l2-baseline", "no-exray"}));
  app.add_option("--layer", layer, "middle, last-conv, second-last-conv or a layer index");
  app.add_option("--seed", o.seed);
  app.add_option("--jobs", jobs, "worker threads (default from EXRAY_JOBS)")->configurable(false);
  app.add_option("--max-trigger-px", o.trigger.max_trigger_px);
  app.add_option("--ssim-bound", o.trigger.ssim_bound);
  app.add_option("--asr-threshold", o.trigger.asr_threshold);
  app.add_option("--re-epochs", o.trigger.re_epochs);
  app.add_option("--re-lr", o.trigger.re_lr);
  app.add_option("--filter-epochs", o.trigger.filter_epochs);
  app.add_option("--give-up-epochs", o.trigger.give_up_epochs);
  app.add_option("--stall-epochs", o.trigger.stall_epochs);
  app.add_option("--scan-patch", o.trigger.scan_patch);
  app.add_option("--scan-filter", o.trigger.scan_filter);
  app.add_option("--alpha", o.diff.alpha);
  app.add_option("--w-large", o.diff.w_large);
  app.add_option("--w-small", o.diff.w_small);
  app.add_option("--diff-epochs", o.diff.epochs);
  app.add_option("--diff-lr", o.diff.lr);
  app.add_option("--beta", o.verdict.beta);
  app.add_option("--gamma", o.verdict.gamma);
  app.add_option("--decision-rule", rule)->check(CLI::IsMember(std::vector<std::string>{"or", "eq5_only", "eq6_only"}));
  app.add_option("--l2-threshold", o.verdict.l2_threshold);
  if (const auto code = parse(app, argc, argv)) return *code;

  o.mode = parse_scan_mode(mode);
  o.layer = parse_split_selector(layer);
  o.verdict.rule = parse_decision_rule(rule);
  o.jobs = jobs;
  const ModelGraph model = load_model(model_dir);
  const SampleSet samples = load_samples(samples_dir);
  ScanReport report = scan_model(model, samples, o);
  report.config_echo = app.config_to_str(true, false);

  const fs::path out_path(out);
  for (const TriggerVerdict& v : report.verdicts) {
    const TriggerCandidate& c = v.candidate;
    if (c.kind != TriggerKind::patch) continue;
    const std::string stem = out_path.stem().string() + "-pattern-" + std::to_string(c.victim) + "-" +
                             std::to_string(c.target) + ".f32";
    write_f32(out_path.parent_path() / stem, c.pattern);
  }
  write_file(out_path, report_json(report));
  std::size_t injected = 0;
  for (const TriggerVerdict& v : report.verdicts) injected += v.label == TriggerLabel::injected;
  std::printf("%s: %s (%zu candidates, %zu injected, %.1fs)\n", report.model_id.c_str(),
              std::string(model_label_name(report.model_label)).c_str(), report.verdicts.size(), injected,
              report.timings.total_s);
  return report.model_label == ModelLabel::trojaned ? kExitTrojaned : kExitClean;
}

int run_report(int argc, char** argv) {
  CLI::App app{"Aggregate scan reports against a ground-truth manifest", "exray report"};
  std::string manifest, csv;
  std::vector<std::string> reports;
  app.add_option("--manifest", manifest, "CSV with header model_id,label")->required();
  app.add_option("--csv", csv, "write the aggregate table here");
  app.add_option("reports", reports, "report JSON files")->required();
  if (const auto code = parse(app, argc, argv)) return *code;

  const GroundTruth truth = read_ground_truth(manifest);
  std::vector<ReportSummary> summaries;
  for (const std::string& p : reports) summaries.push_back(read_report_summary(p));
  const auto tallies = aggregate(summaries, truth);
  std::printf("%-14s %4s %4s %4s %4s %9s\n", "mode", "TP", "FP", "FN", "TN", "Acc");
  for (const auto& [mode, t] : tallies) {
    std::printf("%-14s %4zu %4zu %4zu %4zu %9.4f\n", mode.c_str(), t.tp, t.fp, t.fn, t.tn, t.accuracy());
  }
  if (!csv.empty()) write_file(csv, tally_csv(tallies));
  return kExitClean;
}

void usage() {
  std::cerr << "usage: exray <forge|scan|report> [options]\n"
               "       exray <command> --help\n";
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    usage();
    return kExitError;
  }
  const std::string command = argv[1];
  // The subcommand sees its own name as argv[0].
  const int sub_argc = argc - 1;
  char** sub_argv = argv + 1;
  try {
    if (command == "forge") return run_forge(sub_argc, sub_argv);
    if (command == "scan") return run_scan(sub_argc, sub_argv);
    if (command == "report") return run_report(sub_argc, sub_argv);
    if (command == "--help" || command == "-h") {
      usage();
      return kExitClean;
    }
    std::cerr << "exray: unknown command '" << command << "'\n";
    usage();
    return kExitError;
  } catch (const Error& e) {
    std::cerr << "exray " << command << ": " << error_code_name(e.code()) << ": " << e.what() << "\n";
    return kExitError;
  } catch (const std::exception& e) {
    std::cerr << "exray " << command << ": " << e.what() << "\n";
    return kExitError;
  }
}
