#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ebmreg/model.hpp"

namespace ebmreg {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Model state on disk: a small JSON document (conventional suffix
// *.ebm.json). Doubles survive the round trip bitwise: serialization emits
// shortest-round-trip decimals and parsing restores the exact value.
struct Checkpoint {
  MlpSpec spec;
  std::vector<double> theta;
  nlohmann::json meta;  // free-form: method, config, seeds, history

  static constexpr int kVersion = 1;
  static constexpr const char* kFormat = "ebm-checkpoint";

  EbmModel to_model() const {
    EbmModel m(spec);
    if (theta.size() != m.param_count())
      throw CheckpointError("checkpoint theta length " + std::to_string(theta.size()) +
                            " does not match model parameter count " +
                            std::to_string(m.param_count()));
    std::copy(theta.begin(), theta.end(), m.theta().begin());
    return m;
  }

  static Checkpoint of_model(const EbmModel& m, nlohmann::json meta = {}) {
    Checkpoint c;
    c.spec = m.spec();
    c.theta.assign(m.theta().begin(), m.theta().end());
    c.meta = std::move(meta);
    return c;
  }
};

namespace detail {

inline const nlohmann::json& require_field(const nlohmann::json& j, const char* name,
                                           const std::string& path) {
  const auto it = j.find(name);
  if (it == j.end()) throw CheckpointError("missing field: " + path + name);
  return *it;
}

template <class T>
T field_as(const nlohmann::json& j, const char* name, const std::string& path) {
  try {
    return require_field(j, name, path).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("bad field " + path + name + ": " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const Checkpoint& c) {
  nlohmann::json j;
  j["format"] = Checkpoint::kFormat;
  j["version"] = Checkpoint::kVersion;
  j["model"] = {
      {"x_dims", c.spec.x_dims},
      {"y_dims", c.spec.y_dims},
      {"joint_dims", c.spec.joint_dims},
      {"nonlinearity", to_string(c.spec.nonlinearity)},
  };
  j["theta"] = c.theta;
  j["meta"] = c.meta.is_null() ? nlohmann::json::object() : c.meta;
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  using detail::field_as;
  const auto format = field_as<std::string>(j, "format", "");
  if (format != Checkpoint::kFormat)
    throw CheckpointError("not a model checkpoint (format='" + format + "')");
  const int version = field_as<int>(j, "version", "");
  if (version != Checkpoint::kVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const nlohmann::json& jm = detail::require_field(j, "model", "");
  Checkpoint c;
  c.spec.x_dims = field_as<std::vector<std::uint32_t>>(jm, "x_dims", "model.");
  c.spec.y_dims = field_as<std::vector<std::uint32_t>>(jm, "y_dims", "model.");
  c.spec.joint_dims = field_as<std::vector<std::uint32_t>>(jm, "joint_dims", "model.");
  try {
    c.spec.nonlinearity =
        nonlinearity_from_string(field_as<std::string>(jm, "nonlinearity", "model."));
  } catch (const ModelError& e) {
    throw CheckpointError(std::string("bad field model.nonlinearity: ") + e.what());
  }
  try {
    c.spec.validate();
  } catch (const ModelError& e) {
    throw CheckpointError(std::string("invalid model shape: ") + e.what());
  }
  c.theta = field_as<std::vector<double>>(j, "theta", "");
  if (c.theta.size() != c.spec.param_count())
    throw CheckpointError("theta length " + std::to_string(c.theta.size()) +
                          " does not match model shape (expected " +
                          std::to_string(c.spec.param_count()) + ")");
  const auto it = j.find("meta");
  c.meta = it == j.end() ? nlohmann::json::object() : *it;
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw CheckpointError("cannot open for writing: " + path);
  os << checkpoint_to_json(c).dump(2) << '\n';
  os.flush();
  if (!os) throw CheckpointError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw CheckpointError("cannot open: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path + ": malformed JSON (truncated or corrupt): " + e.what());
  }
  try {
    return checkpoint_from_json(j);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path + ": " + e.what());
  }
}

}  // namespace ebmreg
