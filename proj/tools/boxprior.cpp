// boxprior: generate, pretrain, train, eval, register, chamfer, check.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "boxprior/checks.hpp"
#include "boxprior/config.hpp"
#include "boxprior/report.hpp"

namespace fs = std::filesystem;
using namespace boxprior;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> weights;
  std::optional<std::string> filter;
};

RunConfig resolve(const Flags& f) {
  RunConfig cfg = f.config.empty() ? RunConfig{} : load_config(f.config);
  auto set = [&cfg](const std::string& key, const std::string& text) {
    for (const auto& field : config_fields()) {
      if (field.key == key) return field.set(cfg, key, text);
    }
  };
  if (f.seed) cfg.seed = *f.seed;
  if (f.out) cfg.out = *f.out;
  if (f.weights) set("loss.weights", *f.weights);
  if (f.filter) cfg.check_filter = *f.filter;
  validate(cfg);
  cfg.train.loss.seed = cfg.seed;
  return cfg;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Mean of each component over the patches that contain the object;
/// geo_active counts the patches whose geometric term fired.
RunTrace aggregate(const std::vector<PatchRun>& runs) {
  RunTrace out;
  std::size_t n = 0;
  for (const auto& r : runs) {
    if (!r.has_object || r.trace.size() == 0) continue;
    if (n++ == 0) {
      out = r.trace;
      continue;
    }
    for (std::size_t i = 0; i < out.size() && i < r.trace.size(); ++i) {
      out.total[i] += r.trace.total[i];
      out.ori[i] += r.trace.ori[i];
      out.geo[i] += r.trace.geo[i];
      out.cons[i] += r.trace.cons[i];
      out.completeness[i] += r.trace.completeness[i];
      out.geo_active[i] += r.trace.geo_active[i];
    }
  }
  if (n > 1) {
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < out.size(); ++i) {
      out.total[i] *= inv;
      out.ori[i] *= inv;
      out.geo[i] *= inv;
      out.cons[i] *= inv;
      out.completeness[i] *= inv;
    }
  }
  return out;
}

int cmd_generate(const RunConfig& cfg, bool out_given) {
  const fs::path dir = out_given ? fs::path(cfg.out) : fs::path(cfg.data.dir);
  Rng rng = make_rng(cfg.seed);
  SynthOptions opts;
  opts.fill_template_cavity = cfg.data.fill_template_cavity;
  const SynthCase sc = synth_volume(cfg.data.kind, cfg.data.dims, cfg.data.noise_sigma, cfg.data.contrast, rng, opts);
  std::cout << save_synth_case(sc, cfg.data, cfg.seed, dir).dump(2) << '\n';
  return 0;
}

int cmd_pretrain(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = load_dataset(cfg.data);
  const fs::path out = cfg.out;
  fs::create_directories(out);
  const auto patches = pretrain_patches(ds.image, ds.box, cfg.train);
  json measured = json::array();
  for (std::size_t k = 0; k < patches.size(); ++k) {
    const PatchEmbedding& pe = patches[k];
    json entry = {{"patch", to_json(pe.spec)}, {"has_object", pe.head.has_value()}};
    if (pe.head) {
      const std::string tag = std::to_string(k);
      write_json(out / ("head_" + tag + ".json"), to_json(*pe.head));
      write_loss_csv(out / ("pretrain_" + tag + ".csv"), pe.pretrain_trace);
      entry["loss_first"] = pe.pretrain_trace.empty() ? json(nullptr) : json(pe.pretrain_trace.front());
      entry["loss_last"] = pe.pretrain_trace.empty() ? json(nullptr) : json(pe.pretrain_trace.back());
    }
    measured.push_back(std::move(entry));
  }
  const json report = make_report("pretrain", cfg, {{"patches", measured}}, seconds_since(t0));
  write_json(out / "pretrain_report.json", report);
  std::cout << report["measured"].dump(2) << '\n';
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = load_dataset(cfg.data);
  const fs::path out = cfg.out;
  fs::create_directories(out);
  const auto pre = pretrain_patches(ds.image, ds.box, cfg.train);
  const TrainOutcome result =
      train_volume(ds.image, ds.box, ds.templ, cfg.train, pre, ds.gt ? &*ds.gt : nullptr);
  save_volume(result.mask, out / "mask.json");
  save_volume(result.probs, out / "probs.json");
  write_trace_csv(out / "trace.csv", aggregate(result.patches));
  for (std::size_t k = 0; k < result.patches.size(); ++k) {
    if (result.patches[k].has_object) write_trace_csv(out / ("trace_" + std::to_string(k) + ".csv"), result.patches[k].trace);
  }
  const json report = make_report("train", cfg, train_measurements(result, pre), seconds_since(t0));
  write_json(out / "report.json", report);
  json summary = {{"report", (out / "report.json").string()}, {"metrics", report["measured"]["metrics"]}};
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int cmd_eval(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path out = cfg.out;
  const fs::path pred_path = cfg.eval_pred.empty() ? out / "mask.json" : fs::path(cfg.eval_pred);
  const fs::path gt_path = cfg.eval_gt.empty() ? dataset_paths(cfg.data).gt : fs::path(cfg.eval_gt);
  const VoxelGrid pred = load_volume(pred_path, FieldKind::Binary);
  const VoxelGrid gt = load_volume(gt_path, FieldKind::Binary);
  const MetricReport m = evaluate(pred, gt, gt.spacing(), cfg.eval_hd_mode);
  std::printf("%-6s %.6f\n", "dice", m.dice);
  if (m.hd95 >= 0.0) {
    std::printf("%-6s %.6f\n", "hd95", m.hd95);
  } else {
    std::printf("%-6s %s\n", "hd95", "undefined");
  }
  std::printf("%-6s %zu\n%-6s %zu\n%-6s %zu\n%-6s %zu\n", "tp", m.counts.tp, "fp", m.counts.fp, "fn", m.counts.fn,
              "tn", m.counts.tn);
  fs::create_directories(out);
  json measured = to_json(m);
  measured["pred"] = pred_path.string();
  measured["gt"] = gt_path.string();
  write_json(out / "metrics.json", make_report("eval", cfg, measured, seconds_since(t0)));
  return 0;
}

int cmd_register(const RunConfig& cfg) {
  const fs::path src = cfg.register_source.empty() ? dataset_paths(cfg.data).templ : fs::path(cfg.register_source);
  if (cfg.register_target.empty()) throw Error(ErrorCode::InvalidConfig, "register.target is required");
  const PointCloud source = load_cloud_csv(src);
  const PointCloud target = load_cloud_csv(cfg.register_target);
  Rng rng = make_rng(cfg.seed);
  const IcpResult r = icp_register(source, target, cfg.train.loss.icp, rng);
  const fs::path out = cfg.out;
  fs::create_directories(out);
  write_json(out / "transform.json", to_json(r.transform));
  const json summary = {{"transform", to_json(r.transform)},
                        {"iterations", r.iterations},
                        {"converged", r.converged},
                        {"final_objective", r.refine_objective.empty()
                                                ? (r.coarse_objective.empty() ? json(nullptr) : json(r.coarse_objective.back()))
                                                : json(r.refine_objective.back())}};
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int cmd_chamfer(const RunConfig& cfg) {
  if (cfg.chamfer_a.empty() || cfg.chamfer_b.empty()) throw Error(ErrorCode::InvalidConfig, "chamfer.a and chamfer.b are required");
  const PointCloud a = load_cloud_csv(cfg.chamfer_a);
  const PointCloud b = load_cloud_csv(cfg.chamfer_b);
  const ChamferResult r = chamfer(a, b, {cfg.train.loss.chamfer_squared});
  const json j = {{"chamfer", r.value}, {"forward", r.forward_term}, {"backward", r.backward_term}};
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_check(const RunConfig& cfg) {
  const auto results = run_checks(cfg.check_filter);
  if (results.empty()) throw Error(ErrorCode::InvalidArgument, "no check matches '" + cfg.check_filter + "'");
  std::size_t failed = 0;
  for (const auto& r : results) {
    std::cout << format_check(r) << '\n';
    failed += !r.passed;
  }
  std::cout << results.size() - failed << "/" << results.size() << " checks passed\n";
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Box- and template-supervised 3D segmentation toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags flags;
  app.add_option("--config", flags.config, "Key-value config file")->check(CLI::ExistingFile);
  app.add_option("--seed", flags.seed, "Seed for every random stream");
  app.add_option("--out", flags.out, "Output directory");
  app.add_option("--weights", flags.weights, "Loss weights ori,geo,cons");
  app.add_option("--filter", flags.filter, "Run only checks whose name contains NAME");

  app.add_subcommand("generate", "Write a synthetic volume, mask, box and template");
  app.add_subcommand("pretrain", "Fit the per-patch embedding heads");
  app.add_subcommand("train", "Optimize masks per patch and write the run report");
  app.add_subcommand("eval", "Dice and HD95 of a predicted mask");
  app.add_subcommand("register", "Rigidly align a source cloud to a target cloud");
  app.add_subcommand("chamfer", "Chamfer distance between two clouds");
  app.add_subcommand("check", "Run the oracle suite");

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const RunConfig cfg = resolve(flags);
    if (command == "generate") return cmd_generate(cfg, flags.out.has_value());
    if (command == "pretrain") return cmd_pretrain(cfg);
    if (command == "train") return cmd_train(cfg);
    if (command == "eval") return cmd_eval(cfg);
    if (command == "register") return cmd_register(cfg);
    if (command == "chamfer") return cmd_chamfer(cfg);
    if (command == "check") return cmd_check(cfg);
  } catch (const Error& e) {
    const json err = {{"error", {{"command", command}, {"code", to_string(e.code())}, {"detail", e.detail()}}}};
    std::cerr << err.dump() << '\n';
    return 2;
  } catch (const std::exception& e) {
    const json err = {{"error", {{"command", command}, {"code", "Internal"}, {"detail", e.what()}}}};
    std::cerr << err.dump() << '\n';
    return 2;
  }
  return 2;
}
