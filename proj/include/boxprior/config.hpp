#pragma once

#include <charconv>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "boxprior/error.hpp"
#include "boxprior/metrics.hpp"
#include "boxprior/pipeline.hpp"
#include "boxprior/trainer.hpp"

namespace boxprior {

struct DataConfig {
  ShapeKind kind = ShapeKind::HollowSphere;
  Dims3 dims{48, 48, 48};
  double noise_sigma = 0.3;
  double contrast = 1.0;
  bool fill_template_cavity = false;
  /// Directory written by `generate`; the file entries below override
  /// individual members of it when nonempty.
  std::string dir = "data";
  std::string image;
  std::string gt;
  std::string box;
  std::string templ;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "out";
  DataConfig data;
  TrainSettings train;
  /// register: source (template) and target clouds; chamfer: clouds a and b.
  std::string register_source;
  std::string register_target;
  std::string chamfer_a;
  std::string chamfer_b;
  std::string eval_pred;
  std::string eval_gt;
  HdMode eval_hd_mode = HdMode::Pooled;
  std::string check_filter;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] inline void bad_value(const std::string& key, std::string_view text, const char* expected) {
  throw Error(ErrorCode::InvalidConfig, key + ": expected " + expected + ", got '" + trim(text) + "'");
}

template <typename T>
T parse_number(const std::string& key, std::string_view text, const char* expected) {
  const std::string t = trim(text);
  T v{};
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) bad_value(key, text, expected);
  return v;
}

// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::vector<std::string> split_commas(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(',', start);
    out.push_back(trim(text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + '"';
}

inline std::string unquote(const std::string& key, std::string_view text) {
  const std::string t = trim(text);
  if (t.size() < 2 || t.front() != '"' || t.back() != '"') bad_value(key, text, "a quoted string");
  std::string out;
  for (std::size_t i = 1; i + 1 < t.size(); ++i) {
    if (t[i] == '\\') {
      if (i + 2 >= t.size()) bad_value(key, text, "a quoted string");
      ++i;
    } else if (t[i] == '"') {
      bad_value(key, text, "a quoted string");
    }
    out += t[i];
  }
  return out;
}

// Text conversion per value type.
inline std::string to_text(int v) { return std::to_string(v); }
template <std::unsigned_integral T>
std::string to_text(T v) {
  return std::to_string(v);
}
inline std::string to_text(double v) { return format_double(v); }
inline std::string to_text(bool v) { return v ? "true" : "false"; }
inline std::string to_text(const std::string& v) { return quote(v); }
inline std::string to_text(const Dims3& d) {
  return std::to_string(d.s) + "," + std::to_string(d.h) + "," + std::to_string(d.w);
}
inline std::string to_text(const Index3& i) {
  return std::to_string(i.z) + "," + std::to_string(i.y) + "," + std::to_string(i.x);
}
inline std::string to_text(const LossWeights& w) {
  return format_double(w.ori) + "," + format_double(w.geo) + "," + format_double(w.cons);
}
inline std::string to_text(ShapeKind k) { return quote(to_string(k)); }
inline std::string to_text(Neighborhood n) { return n == Neighborhood::Six ? "6" : "26"; }
inline std::string to_text(HdMode m) { return quote(m == HdMode::Pooled ? "pooled" : "max_of_directed"); }

inline void from_text(const std::string& key, std::string_view t, int& v) { v = parse_number<int>(key, t, "an integer"); }
template <std::unsigned_integral T>
void from_text(const std::string& key, std::string_view t, T& v) {
  v = parse_number<T>(key, t, "a nonnegative integer");
}
inline void from_text(const std::string& key, std::string_view t, double& v) {
  v = parse_number<double>(key, t, "a real number");
  if (!std::isfinite(v)) bad_value(key, t, "a finite real number");
}
inline void from_text(const std::string& key, std::string_view t, bool& v) {
  const std::string s = trim(t);
  if (s == "true") v = true;
  else if (s == "false") v = false;
  else bad_value(key, t, "true or false");
}
inline void from_text(const std::string& key, std::string_view t, std::string& v) { v = unquote(key, t); }
inline void from_text(const std::string& key, std::string_view t, Dims3& d) {
  const auto parts = split_commas(t);
  if (parts.size() != 3) bad_value(key, t, "three integers a,b,c");
  d = {parse_number<int>(key, parts[0], "an integer"), parse_number<int>(key, parts[1], "an integer"),
       parse_number<int>(key, parts[2], "an integer")};
}
inline void from_text(const std::string& key, std::string_view t, Index3& i) {
  Dims3 d;
  from_text(key, t, d);
  i = {d.s, d.h, d.w};
}
inline void from_text(const std::string& key, std::string_view t, LossWeights& w) {
  const auto parts = split_commas(t);
  if (parts.size() != 3) bad_value(key, t, "three reals a,b,c");
  from_text(key, parts[0], w.ori);
  from_text(key, parts[1], w.geo);
  from_text(key, parts[2], w.cons);
}
inline void from_text(const std::string& key, std::string_view t, ShapeKind& k) {
  const std::string s = unquote(key, t);
  const auto parsed = shape_from_string(s);
  if (!parsed) bad_value(key, t, "one of sphere, hollow_sphere, two_lobes");
  k = *parsed;
}
inline void from_text(const std::string& key, std::string_view t, Neighborhood& n) {
  const std::string s = trim(t);
  if (s == "6") n = Neighborhood::Six;
  else if (s == "26") n = Neighborhood::TwentySix;
  else bad_value(key, t, "6 or 26");
}
inline void from_text(const std::string& key, std::string_view t, HdMode& m) {
  const std::string s = unquote(key, t);
  if (s == "pooled") m = HdMode::Pooled;
  else if (s == "max_of_directed") m = HdMode::MaxOfDirected;
  else bad_value(key, t, "pooled or max_of_directed");
}

struct ConfigField {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, std::string_view)> set;
};

template <typename Access>
ConfigField field(std::string key, Access access) {
  return {std::move(key),
          [access](const RunConfig& c) { return to_text(access(const_cast<RunConfig&>(c))); },
          [access](RunConfig& c, const std::string& k, std::string_view text) { from_text(k, text, access(c)); }};
}

}  // namespace detail

/// Every recognized key, in serialization order.
inline const std::vector<detail::ConfigField>& config_fields() {
  using detail::field;
  static const std::vector<detail::ConfigField> fields = {
      field("seed", [](RunConfig& c) -> auto& { return c.seed; }),
      field("out", [](RunConfig& c) -> auto& { return c.out; }),

      field("data.kind", [](RunConfig& c) -> auto& { return c.data.kind; }),
      field("data.dims", [](RunConfig& c) -> auto& { return c.data.dims; }),
      field("data.noise_sigma", [](RunConfig& c) -> auto& { return c.data.noise_sigma; }),
      field("data.contrast", [](RunConfig& c) -> auto& { return c.data.contrast; }),
      field("data.fill_template_cavity", [](RunConfig& c) -> auto& { return c.data.fill_template_cavity; }),
      field("data.dir", [](RunConfig& c) -> auto& { return c.data.dir; }),
      field("data.image", [](RunConfig& c) -> auto& { return c.data.image; }),
      field("data.gt", [](RunConfig& c) -> auto& { return c.data.gt; }),
      field("data.box", [](RunConfig& c) -> auto& { return c.data.box; }),
      field("data.template", [](RunConfig& c) -> auto& { return c.data.templ; }),

      field("loss.weights", [](RunConfig& c) -> auto& { return c.train.loss.weights; }),
      field("loss.gumbel_temperature", [](RunConfig& c) -> auto& { return c.train.loss.gumbel_temperature; }),
      field("loss.gumbel_hard", [](RunConfig& c) -> auto& { return c.train.loss.gumbel_hard; }),
      field("loss.gridding_threshold", [](RunConfig& c) -> auto& { return c.train.loss.gridding_threshold; }),
      field("loss.chamfer_squared", [](RunConfig& c) -> auto& { return c.train.loss.chamfer_squared; }),
      field("loss.geo_margin", [](RunConfig& c) -> auto& { return c.train.loss.geo_margin; }),
      field("loss.register_every", [](RunConfig& c) -> auto& { return c.train.loss.register_every; }),
      field("loss.tau_sim", [](RunConfig& c) -> auto& { return c.train.loss.tau_sim; }),
      field("loss.prob_floor", [](RunConfig& c) -> auto& { return c.train.loss.prob_floor; }),
      field("loss.completeness_gate", [](RunConfig& c) -> auto& { return c.train.loss.completeness_gate; }),
      field("loss.completeness_threshold", [](RunConfig& c) -> auto& { return c.train.loss.completeness_threshold; }),
      field("loss.border_margin", [](RunConfig& c) -> auto& { return c.train.loss.border_margin; }),
      field("loss.steps", [](RunConfig& c) -> auto& { return c.train.loss.steps; }),
      field("loss.lr", [](RunConfig& c) -> auto& { return c.train.loss.lr; }),

      field("icp.max_iterations", [](RunConfig& c) -> auto& { return c.train.loss.icp.max_iterations; }),
      field("icp.convergence_eps", [](RunConfig& c) -> auto& { return c.train.loss.icp.convergence_eps; }),
      field("icp.sample_fraction", [](RunConfig& c) -> auto& { return c.train.loss.icp.sample_fraction; }),
      field("icp.refine_iterations", [](RunConfig& c) -> auto& { return c.train.loss.icp.refine_iterations; }),

      field("pretrain.k", [](RunConfig& c) -> auto& { return c.train.pretrain.k; }),
      field("pretrain.tau_sim", [](RunConfig& c) -> auto& { return c.train.pretrain.tau_sim; }),
      field("pretrain.tau_temp", [](RunConfig& c) -> auto& { return c.train.pretrain.tau_temp; }),
      field("pretrain.coarse_steps", [](RunConfig& c) -> auto& { return c.train.pretrain.coarse_steps; }),
      field("pretrain.refine_steps", [](RunConfig& c) -> auto& { return c.train.pretrain.refine_steps; }),
      field("pretrain.lr", [](RunConfig& c) -> auto& { return c.train.pretrain.lr; }),
      field("pretrain.sample_size", [](RunConfig& c) -> auto& { return c.train.pretrain.sample_size; }),
      field("pretrain.hidden", [](RunConfig& c) -> auto& { return c.train.pretrain.hidden; }),
      field("pretrain.dim", [](RunConfig& c) -> auto& { return c.train.pretrain.dim; }),
      field("pretrain.invert_vote", [](RunConfig& c) -> auto& { return c.train.pretrain.invert_vote; }),

      field("train.patch", [](RunConfig& c) -> auto& { return c.train.patch; }),
      field("train.stride", [](RunConfig& c) -> auto& { return c.train.stride; }),
      field("train.neighborhood", [](RunConfig& c) -> auto& { return c.train.neighborhood; }),
      field("train.box_dilation", [](RunConfig& c) -> auto& { return c.train.box_dilation; }),
      field("train.mask_threshold", [](RunConfig& c) -> auto& { return c.train.mask_threshold; }),
      field("train.init_box_logit", [](RunConfig& c) -> auto& { return c.train.init_box_logit; }),
      field("train.init_background_logit", [](RunConfig& c) -> auto& { return c.train.init_background_logit; }),

      field("register.source", [](RunConfig& c) -> auto& { return c.register_source; }),
      field("register.target", [](RunConfig& c) -> auto& { return c.register_target; }),
      field("chamfer.a", [](RunConfig& c) -> auto& { return c.chamfer_a; }),
      field("chamfer.b", [](RunConfig& c) -> auto& { return c.chamfer_b; }),
      field("eval.pred", [](RunConfig& c) -> auto& { return c.eval_pred; }),
      field("eval.gt", [](RunConfig& c) -> auto& { return c.eval_gt; }),
      field("eval.hd_mode", [](RunConfig& c) -> auto& { return c.eval_hd_mode; }),
      field("check.filter", [](RunConfig& c) -> auto& { return c.check_filter; }),
  };
  return fields;
}

/// Semantic checks beyond per-key typing.
inline void validate(const RunConfig& c) {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::InvalidConfig, what); };
  validate(c.train.loss);
  const auto& d = c.data.dims;
  if (d.s < 16 || d.h < 16 || d.w < 16) fail("data.dims: every extent must be >= 16");
  if (c.data.noise_sigma < 0.0) fail("data.noise_sigma must be nonnegative");
  const auto& ip = c.train.loss.icp;
  if (ip.max_iterations <= 0) fail("icp.max_iterations must be positive");
  if (!(ip.convergence_eps > 0.0)) fail("icp.convergence_eps must be positive");
  if (!(ip.sample_fraction > 0.0 && ip.sample_fraction <= 1.0)) fail("icp.sample_fraction must be in (0,1]");
  if (ip.refine_iterations < 0) fail("icp.refine_iterations must be nonnegative");
  const auto& p = c.train.pretrain;
  if (p.k <= 0) fail("pretrain.k must be positive");
  if (!(p.tau_temp > 0.0)) fail("pretrain.tau_temp must be positive");
  if (p.coarse_steps < 0 || p.refine_steps < 0) fail("pretrain steps must be nonnegative");
  if (!(p.lr > 0.0)) fail("pretrain.lr must be positive");
  if (p.sample_size < 2) fail("pretrain.sample_size must be >= 2");
  if (p.hidden <= 0 || p.dim <= 0) fail("pretrain.hidden and pretrain.dim must be positive");
  const auto& t = c.train;
  if (t.patch.s < 0 || t.patch.h < 0 || t.patch.w < 0) fail("train.patch must be nonnegative");
  if (t.stride.z < 0 || t.stride.y < 0 || t.stride.x < 0) fail("train.stride must be nonnegative");
  if (t.box_dilation < 0) fail("train.box_dilation must be nonnegative");
  if (!(t.mask_threshold > 0.0 && t.mask_threshold < 1.0)) fail("train.mask_threshold must be in (0,1)");
}

/// Lines are `key = value` with `#` comments. A `[section]` line prefixes
/// the following keys with `section.`; keys may also be written dotted.
/// Unknown or repeated keys are rejected.
inline RunConfig parse_config(std::string_view text, const std::string& origin = "config") {
  std::map<std::string, const detail::ConfigField*> by_key;
  for (const auto& f : config_fields()) by_key.emplace(f.key, &f);

  RunConfig cfg;
  std::set<std::string> seen;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  int lineno = 0;
  auto where = [&] { return origin + ":" + std::to_string(lineno) + ": "; };
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = raw;
    bool in_string = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '\\' && in_string) {
        ++i;
      } else if (line[i] == '"') {
        in_string = !in_string;
      } else if (line[i] == '#' && !in_string) {
        line.resize(i);
        break;
      }
    }
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw Error(ErrorCode::InvalidConfig, where() + "malformed section header");
      section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::InvalidConfig, where() + "expected key = value");
    std::string key = detail::trim(std::string_view(line).substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    const auto it = by_key.find(key);
    if (it == by_key.end()) throw Error(ErrorCode::InvalidConfig, where() + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw Error(ErrorCode::InvalidConfig, where() + "repeated key '" + key + "'");
    try {
      it->second->set(cfg, key, std::string_view(line).substr(eq + 1));
    } catch (const Error& e) {
      throw Error(e.code(), where() + e.detail());
    }
  }
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.string());
}

/// Canonical text form: every key, grouped under section headers.
inline std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& f : config_fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = dot == std::string::npos ? "" : f.key.substr(0, dot);
    const std::string name = dot == std::string::npos ? f.key : f.key.substr(dot + 1);
    if (sec != section) {
      out += "\n[" + sec + "]\n";
      section = sec;
    }
    out += name + " = " + f.get(cfg) + "\n";
  }
  return out;
}

}  // namespace boxprior
