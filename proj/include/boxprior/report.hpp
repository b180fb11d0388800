#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "boxprior/config.hpp"
#include "boxprior/error.hpp"
#include "boxprior/metrics.hpp"
#include "boxprior/pipeline.hpp"
#include "boxprior/pointcloud.hpp"
#include "boxprior/registration.hpp"
#include "boxprior/trainer.hpp"
#include "boxprior/volume_io.hpp"

namespace boxprior {

using nlohmann::json;

inline json to_json(const Box3& b) {
  return {{"lo", {b.lo.z, b.lo.y, b.lo.x}}, {"hi", {b.hi.z, b.hi.y, b.hi.x}}};
}

inline Box3 box_from_json(const json& j) {
  try {
    const auto lo = j.at("lo").get<std::vector<int>>();
    const auto hi = j.at("hi").get<std::vector<int>>();
    if (lo.size() != 3 || hi.size() != 3) throw Error(ErrorCode::Io, "box corners must have 3 entries");
    return {{lo[0], lo[1], lo[2]}, {hi[0], hi[1], hi[2]}};
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Io, std::string("malformed box: ") + e.what());
  }
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Io, path.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct DatasetPaths {
  std::filesystem::path image, gt, box, templ;
};

inline DatasetPaths dataset_paths(const DataConfig& d) {
  const std::filesystem::path dir = d.dir;
  auto pick = [&dir](const std::string& explicit_path, const char* name) {
    return explicit_path.empty() ? dir / name : std::filesystem::path(explicit_path);
  };
  return {pick(d.image, "image.json"), pick(d.gt, "gt.json"), pick(d.box, "box.json"),
          pick(d.templ, "template.csv")};
}

struct Dataset {
  VoxelGrid image;
  std::optional<VoxelGrid> gt;
  Box3 box;
  PointCloud templ;
};

/// Image, box and template must exist; the ground truth is optional.
inline Dataset load_dataset(const DataConfig& d) {
  const DatasetPaths p = dataset_paths(d);
  for (const auto& path : {p.image, p.box, p.templ}) {
    if (!std::filesystem::exists(path)) throw Error(ErrorCode::Io, "missing dataset file " + path.string());
  }
  Dataset ds;
  ds.image = load_volume(p.image);
  if (std::filesystem::exists(p.gt)) ds.gt = load_volume(p.gt, FieldKind::Binary);
  ds.box = box_from_json(read_json(p.box));
  require_box_in(ds.box, ds.image.dims());
  ds.templ = load_cloud_csv(p.templ);
  if (ds.templ.empty()) throw Error(ErrorCode::EmptyCloud, p.templ.string() + " holds no points");
  return ds;
}

/// Writes the synthetic case under `dir`; returns the manifest.
inline json save_synth_case(const SynthCase& sc, const DataConfig& d, std::uint64_t seed,
                            const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_volume(sc.image, dir / "image.json");
  save_volume(sc.gt_mask, dir / "gt.json");
  write_json(dir / "box.json", to_json(sc.box));
  save_cloud_csv(sc.templ, dir / "template.csv");
  json manifest = {
      {"kind", to_string(d.kind)},
      {"dims", {d.dims.s, d.dims.h, d.dims.w}},
      {"seed", seed},
      {"noise_sigma", d.noise_sigma},
      {"contrast", d.contrast},
      {"fill_template_cavity", d.fill_template_cavity},
      {"shape",
       {{"center_xyz", sc.shape.center}, {"radius", sc.shape.radius}, {"inner_radius", sc.shape.inner_radius}}},
      {"box", to_json(sc.box)},
      {"template_pose", to_json(sc.template_pose)},
      {"template_points", sc.templ.size()},
      {"files",
       {(dir / "image.json").string(), (dir / "image.raw").string(), (dir / "gt.json").string(),
        (dir / "gt.raw").string(), (dir / "box.json").string(), (dir / "template.csv").string()}},
  };
  write_json(dir / "manifest.json", manifest);
  return manifest;
}

/// CSV with columns step,loss,ori,geo,cons,completeness,geo_active.
inline void write_trace_csv(const std::filesystem::path& path, const RunTrace& t) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << "step,loss,ori,geo,cons,completeness,geo_active\n";
  char buf[256];
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%d\n", i, t.total[i], t.ori[i], t.geo[i],
                  t.cons[i], t.completeness[i], t.geo_active[i]);
    out << buf;
  }
}

/// CSV with columns step,loss.
inline void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& loss) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < loss.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i, loss[i]);
    out << buf;
  }
}

inline json to_json(const RunTrace& t) {
  return {{"total", t.total}, {"ori", t.ori},         {"geo", t.geo},
          {"cons", t.cons},   {"completeness", t.completeness}, {"geo_active", t.geo_active}};
}

inline json to_json(const PatchSpec& p) {
  return {{"origin", {p.origin.z, p.origin.y, p.origin.x}}, {"dims", {p.dims.s, p.dims.h, p.dims.w}}};
}

/// Key -> canonical value text for every config entry.
inline json config_echo(const RunConfig& cfg) {
  json j = json::object();
  for (const auto& f : config_fields()) j[f.key] = f.get(cfg);
  return j;
}

/// Published numbers on clinical data, kept apart from anything measured
/// here and never compared against.
inline json reference_claims() {
  return {{"note", "published results on real CT/MR data with a full backbone; not reproduced at desk scale"},
          {"dsc_percent", {{"ours", {{"LiTS", 79.8}, {"KiTS", 80.2}, {"LPBA40", 65.4}}}, {"boxinst_KiTS", 48.4}}},
          {"ablation_dsc_percent",
           {{"full", 80.2}, {"without_internal_details", 76.3}, {"without_completeness_head", 79.1}}}};
}

/// Report skeleton: everything outside "timestamp" is a deterministic
/// function of the config and the inputs.
inline json make_report(const std::string& command, const RunConfig& cfg, json measured, double wall_seconds) {
  return {{"command", command},
          {"config", config_echo(cfg)},
          {"measured", std::move(measured)},
          {"reference", reference_claims()},
          {"timestamp", {{"utc", utc_timestamp()}, {"wall_seconds", wall_seconds}}}};
}

inline json train_measurements(const TrainOutcome& out, const std::vector<PatchEmbedding>& pre) {
  json patches = json::array();
  for (std::size_t i = 0; i < out.patches.size(); ++i) {
    const PatchRun& p = out.patches[i];
    json entry = {{"patch", to_json(p.spec)}, {"has_object", p.has_object}, {"trace", to_json(p.trace)}};
    if (i < pre.size() && !pre[i].pretrain_trace.empty()) {
      entry["pretrain_loss_first"] = pre[i].pretrain_trace.front();
      entry["pretrain_loss_last"] = pre[i].pretrain_trace.back();
    }
    patches.push_back(std::move(entry));
  }
  json m = {{"patches", std::move(patches)}};
  std::size_t fg = 0;
  for (double v : out.mask.values()) fg += v != 0.0;
  m["predicted_foreground_voxels"] = fg;
  m["metrics"] = out.metrics ? to_json(*out.metrics) : json(nullptr);
  return m;
}

}  // namespace boxprior
