// Serialization plumbing shared by the benchmark runner and the CLI:
// method-config and run-record JSON forms, atomic text-file writes, and a
// small checksum for printing file fingerprints.

#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "ebmreg/checkpoint.hpp"
#include "ebmreg/datasets.hpp"
#include "ebmreg/errors.hpp"
#include "ebmreg/losses.hpp"
#include "ebmreg/trainer.hpp"

namespace ebmreg {

// ---- numbers ----

// Compact human-oriented rendering ("%g"): used for labels, never for values
// that must round-trip.
inline std::string format_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

// Inverse of format_g17 for values stored as strings (JSON numbers cannot
// carry inf/nan, so metric fields are stored in text form).
inline double parse_double_string(const std::string& s) {
  if (s.empty()) throw ConfigError("empty numeric string");
  const char* begin = s.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end != begin + s.size()) throw ConfigError("malformed numeric string: " + s);
  return v;
}

// ---- files ----

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  if (!in.good() && !in.eof()) throw ConfigError("read failed: " + path);
  return ss.str();
}

// Writes via a temporary file plus rename so readers never see partial content.
inline void write_text_file_atomic(const std::string& path, std::string_view content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot open for writing: " + tmp);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw ConfigError("write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw ConfigError("rename failed: " + tmp + " -> " + path + ": " + ec.message());
}

// FNV-1a 64-bit, for printable content fingerprints.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

// ---- method config <-> JSON ----

namespace detail {

inline void check_method_keys(const nlohmann::json& j, const std::string& name,
                              std::initializer_list<const char*> allowed) {
  for (const auto& item : j.items()) {
    const std::string& key = item.key();
    if (key == "method") continue;
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown key '" + key + "' for method " + name);
  }
}

template <class T>
T method_field(const nlohmann::json& j, const char* key, T fallback) {
  const auto it = j.find(key);
  if (it == j.end()) return fallback;
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json method_to_json(const MethodConfig& cfg) {
  nlohmann::json j;
  j["method"] = method_name(cfg);
  std::visit(
      [&j](const auto& c) {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, MlisConfig> || std::is_same_v<T, NceConfig>) {
          j["m_samples"] = c.m_samples;
        } else if constexpr (std::is_same_v<T, KldisConfig>) {
          j["m_samples"] = c.m_samples;
          j["sigma_t"] = c.sigma_t;
          j["self_normalize"] = c.self_normalize;
        } else if constexpr (std::is_same_v<T, MlMcmcConfig>) {
          j["m_samples"] = c.m_samples;
          j["steps"] = c.steps;
          j["alpha"] = c.alpha;
        } else if constexpr (std::is_same_v<T, DsmConfig>) {
          j["m_samples"] = c.m_samples;
          j["sigma"] = c.sigma;
        } else if constexpr (std::is_same_v<T, NcePlusConfig>) {
          j["m_samples"] = c.m_samples;
          j["beta"] = c.beta;
        }
        // SmConfig carries no tunables.
      },
      cfg);
  return j;
}

inline MethodConfig method_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("method config must be a JSON object");
  const auto it = j.find("method");
  if (it == j.end() || !it->is_string()) {
    throw ConfigError("method config needs a string 'method' field");
  }
  const std::string name = it->get<std::string>();
  MethodConfig cfg;
  if (name == "ml-is") {
    detail::check_method_keys(j, name, {"m_samples"});
    MlisConfig c;
    c.m_samples = detail::method_field<std::size_t>(j, "m_samples", c.m_samples);
    cfg = c;
  } else if (name == "kld-is") {
    detail::check_method_keys(j, name, {"m_samples", "sigma_t", "self_normalize"});
    KldisConfig c;
    c.m_samples = detail::method_field<std::size_t>(j, "m_samples", c.m_samples);
    c.sigma_t = detail::method_field<double>(j, "sigma_t", c.sigma_t);
    c.self_normalize = detail::method_field<bool>(j, "self_normalize", c.self_normalize);
    cfg = c;
  } else if (name == "ml-mcmc") {
    detail::check_method_keys(j, name, {"m_samples", "steps", "alpha"});
    MlMcmcConfig c;
    c.m_samples = detail::method_field<std::size_t>(j, "m_samples", c.m_samples);
    c.steps = detail::method_field<std::size_t>(j, "steps", c.steps);
    c.alpha = detail::method_field<double>(j, "alpha", c.alpha);
    cfg = c;
  } else if (name == "nce") {
    detail::check_method_keys(j, name, {"m_samples"});
    NceConfig c;
    c.m_samples = detail::method_field<std::size_t>(j, "m_samples", c.m_samples);
    cfg = c;
  } else if (name == "sm") {
    detail::check_method_keys(j, name, {});
    cfg = SmConfig{};
  } else if (name == "dsm") {
    detail::check_method_keys(j, name, {"m_samples", "sigma"});
    DsmConfig c;
    c.m_samples = detail::method_field<std::size_t>(j, "m_samples", c.m_samples);
    c.sigma = detail::method_field<double>(j, "sigma", c.sigma);
    cfg = c;
  } else if (name == "nce+") {
    detail::check_method_keys(j, name, {"m_samples", "beta"});
    NcePlusConfig c;
    c.m_samples = detail::method_field<std::size_t>(j, "m_samples", c.m_samples);
    c.beta = detail::method_field<double>(j, "beta", c.beta);
    cfg = c;
  } else {
    throw ConfigError("unknown method: " + name);
  }
  validate(cfg);
  return cfg;
}

// ---- run record <-> JSON ----

inline nlohmann::json run_record_to_json(const RunRecord& r) {
  nlohmann::json j;
  j["failed"] = r.failed;
  j["failure_reason"] = r.failure_reason;
  j["failed_epoch"] = r.failed_epoch;
  j["failed_batch"] = r.failed_batch;
  j["loss_curve"] = r.loss_curve;
  j["wall_seconds_per_epoch"] = r.wall_seconds_per_epoch;
  j["steps"] = r.steps;
  j["seed"] = r.seed;
  j["method"] = method_to_json(r.method);
  j["checkpoint"] = checkpoint_to_json(r.checkpoint);
  return j;
}

inline RunRecord run_record_from_json(const nlohmann::json& j) {
  RunRecord r;
  nlohmann::json method_json, checkpoint_json;
  try {
    r.failed = j.at("failed").get<bool>();
    r.failure_reason = j.at("failure_reason").get<std::string>();
    r.failed_epoch = j.at("failed_epoch").get<std::size_t>();
    r.failed_batch = j.at("failed_batch").get<std::size_t>();
    r.loss_curve = j.at("loss_curve").get<std::vector<double>>();
    r.wall_seconds_per_epoch = j.at("wall_seconds_per_epoch").get<std::vector<double>>();
    r.steps = j.at("steps").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    method_json = j.at("method");
    checkpoint_json = j.at("checkpoint");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run record: ") + e.what());
  }
  r.method = method_from_json(method_json);
  r.checkpoint = checkpoint_from_json(checkpoint_json);
  return r;
}

}  // namespace ebmreg
