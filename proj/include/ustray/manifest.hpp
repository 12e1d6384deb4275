#pragma once

// Run manifests: configuration, seeds, input and output payload hashes,
// per-stage timings and metrics. Timings live only here, never in data files,
// so reruns produce byte-identical artifacts.

#include <chrono>
#include <filesystem>
#include <string>

#include "ustray/io.hpp"

namespace ustray {

inline constexpr const char* version_string = "0.1.0";

class RunManifest {
 public:
  explicit RunManifest(std::string command) {
    doc_["format"] = "ustray-manifest";
    doc_["version"] = io::format_version;
    doc_["tool_version"] = version_string;
    doc_["command"] = std::move(command);
    doc_["config"] = io::json::object();
    doc_["inputs"] = io::json::array();
    doc_["outputs"] = io::json::array();
    doc_["timings_s"] = io::json::object();
    doc_["metrics"] = io::json::object();
  }

  io::json& config() { return doc_["config"]; }
  io::json& metrics() { return doc_["metrics"]; }
  const io::json& doc() const { return doc_; }

  /// FNV-1a of the serialised configuration.
  std::string config_hash() const {
    const std::string s = doc_["config"].dump();
    return io::hex64(io::fnv1a(s.data(), s.size()));
  }

  void add_input(const std::filesystem::path& header) { doc_["inputs"].push_back(describe(header)); }
  void add_output(const std::filesystem::path& header) { doc_["outputs"].push_back(describe(header)); }

  void timing(const std::string& stage, double seconds) { doc_["timings_s"][stage] = seconds; }

  void write(const std::filesystem::path& path) {
    doc_["config_fnv1a64"] = config_hash();
    io::atomic_write(path, doc_.dump(2) + "\n");
  }

 private:
  static io::json describe(const std::filesystem::path& header) {
    io::json j;
    j["path"] = header.string();
    try {
      const auto h = io::json::parse(io::read_file(header));
      if (h.contains("kind")) j["kind"] = h["kind"];
      if (h.contains("payload_fnv1a64")) j["payload_fnv1a64"] = h["payload_fnv1a64"];
    } catch (const std::exception&) {
      j["unreadable"] = true;
    }
    return j;
  }

  io::json doc_ = io::json::object();
};

/// Wall-clock stopwatch for manifest timings.
class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

}  // namespace ustray
