#pragma once

// File formats. Every artifact is a pair: NAME.json holds the header (JSON
// syntax) and NAME.bin the raw little-endian payload, a concatenation of named
// arrays whose dtype, count and byte offset are listed in the header.
// Writes go to a temporary file that is then renamed into place.

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "ustray/common.hpp"
#include "ustray/field.hpp"
#include "ustray/forward.hpp"
#include "ustray/linking.hpp"
#include "ustray/medium.hpp"
#include "ustray/tof.hpp"

namespace ustray::io {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

inline constexpr int format_version = 1;

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

/// Writes `bytes` to `path` via a temporary sibling and rename.
inline void atomic_write(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    os.flush();
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

namespace detail {

template <class T>
void append_le(std::string& out, const T* v, std::size_t n) {
  static_assert(std::is_trivially_copyable_v<T>);
  const std::size_t start = out.size();
  out.resize(start + n * sizeof(T));
  std::memcpy(out.data() + start, v, n * sizeof(T));
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    constexpr std::size_t w = sizeof(T) == sizeof(cplx) ? sizeof(double) : sizeof(T);
    for (std::size_t i = start; i < out.size(); i += w) std::reverse(out.begin() + i, out.begin() + i + w);
  }
}

template <class T>
std::vector<T> decode_le(const char* p, std::size_t n) {
  std::vector<T> out(n);
  std::memcpy(out.data(), p, n * sizeof(T));
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    constexpr std::size_t w = sizeof(T) == sizeof(cplx) ? sizeof(double) : sizeof(T);
    auto* b = reinterpret_cast<char*>(out.data());
    for (std::size_t i = 0; i < n * sizeof(T); i += w) std::reverse(b + i, b + i + w);
  }
  return out;
}

template <class T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, double>) return "f64";
  else if constexpr (std::is_same_v<T, cplx>) return "c128";
  else if constexpr (std::is_same_v<T, std::uint8_t>) return "u8";
  else if constexpr (std::is_same_v<T, std::uint32_t>) return "u32";
  else if constexpr (std::is_same_v<T, std::uint64_t>) return "u64";
  else static_assert(sizeof(T) == 0, "unsupported dtype");
}

inline std::size_t dtype_size(const std::string& d) {
  if (d == "f64" || d == "u64") return 8;
  if (d == "c128") return 16;
  if (d == "u8") return 1;
  if (d == "u32") return 4;
  return 0;
}

}  // namespace detail

/// Header plus named little-endian arrays.
class Bundle {
 public:
  json header = json::object();

  explicit Bundle(std::string kind = "") {
    header["format"] = "ustray";
    header["version"] = format_version;
    header["kind"] = std::move(kind);
  }

  template <class T>
  void put(const std::string& name, const std::vector<T>& v) {
    json meta;
    meta["name"] = name;
    meta["dtype"] = detail::dtype_name<T>();
    meta["count"] = v.size();
    meta["offset"] = payload_.size();
    detail::append_le(payload_, v.data(), v.size());
    arrays_.push_back(std::move(meta));
  }

  template <class T>
  std::vector<T> get(const std::string& name) const {
    const json& m = find(name);
    if (m["dtype"] != detail::dtype_name<T>())
      throw ParseError(where(name) + ": array '" + name + "' has dtype " + m["dtype"].get<std::string>() +
                       ", expected " + detail::dtype_name<T>());
    const auto off = m["offset"].get<std::size_t>();
    const auto cnt = m["count"].get<std::size_t>();
    return detail::decode_le<T>(payload_.data() + off, cnt);
  }

  bool has(const std::string& name) const {
    for (const auto& a : arrays_)
      if (a["name"] == name) return true;
    return false;
  }

  const std::string& payload() const { return payload_; }
  std::uint64_t payload_hash() const { return fnv1a(payload_.data(), payload_.size()); }

  /// Writes PATH (header) and the payload next to it with extension .bin.
  void write(const fs::path& path) const {
    fs::path bin = path;
    bin.replace_extension(".bin");
    json h = header;
    h["payload"] = bin.filename().string();
    h["payload_bytes"] = payload_.size();
    h["payload_fnv1a64"] = hex64(payload_hash());
    h["arrays"] = arrays_;
    atomic_write(bin, payload_);
    atomic_write(path, h.dump(2) + "\n");
  }

  static Bundle read(const fs::path& path, const std::string& expected_kind = "") {
    Bundle b;
    b.source_ = path.string();
    b.text_ = read_file(path);
    try {
      b.header = json::parse(b.text_);
    } catch (const json::parse_error& e) {
      std::ostringstream os;
      os << path.string() << ": malformed header at byte " << e.byte << ": " << e.what();
      throw ParseError(os.str());
    }
    if (!b.header.is_object()) throw ParseError(path.string() + ": header at byte 0 is not a JSON object");
    b.require_string("format");
    if (b.header["format"] != "ustray") throw ParseError(b.where("format") + ": not a ustray file");
    b.require_number("version");
    if (b.header["version"].get<int>() != format_version)
      throw ParseError(b.where("version") + ": unsupported format version");
    b.require_string("kind");
    if (!expected_kind.empty() && b.header["kind"] != expected_kind)
      throw ParseError(b.where("kind") + ": expected kind '" + expected_kind + "', found '" +
                       b.header["kind"].get<std::string>() + "'");
    b.require_string("payload");
    b.require_number("payload_bytes");
    if (!b.header.contains("arrays") || !b.header["arrays"].is_array())
      throw ParseError(b.where("arrays") + ": missing or non-array 'arrays'");
    fs::path bin = path.parent_path() / b.header["payload"].get<std::string>();
    b.payload_ = read_file(bin);
    const auto expect = b.header["payload_bytes"].get<std::size_t>();
    if (b.payload_.size() != expect) {
      std::ostringstream os;
      os << bin.string() << ": payload is " << b.payload_.size() << " bytes, header at byte "
         << b.offset_of("payload_bytes") << " declares " << expect;
      throw ParseError(os.str());
    }
    if (b.header.contains("payload_fnv1a64") && b.header["payload_fnv1a64"] != hex64(b.payload_hash()))
      throw ParseError(b.where("payload_fnv1a64") + ": payload checksum mismatch for " + bin.string());
    for (const auto& a : b.header["arrays"]) {
      if (!a.is_object() || !a.contains("name") || !a.contains("dtype") || !a.contains("count") || !a.contains("offset"))
        throw ParseError(b.where("arrays") + ": array entry needs name, dtype, count and offset");
      const std::size_t w = detail::dtype_size(a["dtype"].get<std::string>());
      if (w == 0) throw ParseError(b.where("dtype") + ": unknown dtype " + a["dtype"].dump());
      const auto off = a["offset"].get<std::size_t>(), cnt = a["count"].get<std::size_t>();
      if (off + cnt * w > b.payload_.size())
        throw ParseError(b.where(a["name"].get<std::string>()) + ": array '" + a["name"].get<std::string>() +
                         "' runs past the end of the payload");
      b.arrays_.push_back(a);
    }
    return b;
  }

  /// "file: byte N" for the first occurrence of a key in the header text.
  std::string where(const std::string& key) const {
    std::ostringstream os;
    os << (source_.empty() ? std::string("<memory>") : source_) << ": byte " << offset_of(key);
    return os.str();
  }

  std::size_t offset_of(const std::string& key) const {
    const auto pos = text_.find("\"" + key + "\"");
    return pos == std::string::npos ? 0 : pos;
  }

  void require_string(const std::string& key) const {
    if (!header.contains(key) || !header[key].is_string())
      throw ParseError(where(key) + ": missing or non-string field '" + key + "'");
  }
  void require_number(const std::string& key) const {
    if (!header.contains(key) || !header[key].is_number())
      throw ParseError(where(key) + ": missing or non-numeric field '" + key + "'");
  }
  void require_object(const std::string& key) const {
    if (!header.contains(key) || !header[key].is_object())
      throw ParseError(where(key) + ": missing or non-object field '" + key + "'");
  }

 private:
  const json& find(const std::string& name) const {
    for (const auto& a : arrays_)
      if (a["name"] == name) return a;
    throw ParseError(where("arrays") + ": no array named '" + name + "'");
  }

  std::vector<json> arrays_;
  std::string payload_;
  std::string source_;
  std::string text_;
};

// ---- pieces shared by several kinds ----

inline json grid_json(const Grid2D& g) {
  return {{"origin", {g.origin.x, g.origin.y}}, {"spacing", g.spacing}, {"shape", {g.n1, g.n2}}};
}

inline Grid2D grid_from(const Bundle& b, const json& j) {
  try {
    Grid2D g;
    g.origin = {j.at("origin").at(0).get<double>(), j.at("origin").at(1).get<double>()};
    g.spacing = j.at("spacing").get<double>();
    g.n1 = j.at("shape").at(0).get<std::size_t>();
    g.n2 = j.at("shape").at(1).get<std::size_t>();
    if (!(g.spacing > 0.0) || g.n1 < 5 || g.n2 < 5) throw ParseError("bad grid");
    return g;
  } catch (const std::exception& e) {
    throw ParseError(b.where("grid") + ": invalid grid description (" + e.what() + ")");
  }
}

inline void put_ring(Bundle& b, const TransducerRing& ring) {
  b.header["ring"] = {{"center", {ring.center.x, ring.center.y}},
                      {"radius", ring.radius},
                      {"n_emitters", ring.n_emitters()},
                      {"n_receivers", ring.n_receivers()}};
  std::vector<double> pos;
  for (const auto* list : {&ring.emitters, &ring.receivers})
    for (Vec2 p : *list) {
      pos.push_back(p.x);
      pos.push_back(p.y);
    }
  b.put("ring_positions", pos);
}

inline TransducerRing ring_from(const Bundle& b) {
  b.require_object("ring");
  const json& j = b.header["ring"];
  TransducerRing ring;
  try {
    ring.center = {j.at("center").at(0).get<double>(), j.at("center").at(1).get<double>()};
    ring.radius = j.at("radius").get<double>();
    const auto ne = j.at("n_emitters").get<std::size_t>(), nr = j.at("n_receivers").get<std::size_t>();
    const auto pos = b.get<double>("ring_positions");
    if (pos.size() != 2 * (ne + nr)) throw ParseError("position count does not match element counts");
    for (std::size_t i = 0; i < ne; ++i) ring.emitters.push_back({pos[2 * i], pos[2 * i + 1]});
    for (std::size_t i = 0; i < nr; ++i) ring.receivers.push_back({pos[2 * (ne + i)], pos[2 * (ne + i) + 1]});
    ring.validate();
  } catch (const std::exception& e) {
    throw ParseError(b.where("ring") + ": invalid ring (" + e.what() + ")");
  }
  return ring;
}

// ---- scalar field ----

inline void write_field(const fs::path& path, const ScalarField& f, const std::string& quantity,
                        const std::string& units, const json& extra = json::object()) {
  Bundle b("field");
  b.header["quantity"] = quantity;
  b.header["units"] = units;
  b.header["grid"] = grid_json(f.grid());
  for (const auto& [k, v] : extra.items()) b.header[k] = v;
  b.put("coefficients", std::vector<double>(f.coefficients().begin(), f.coefficients().end()));
  b.write(path);
}

inline ScalarField read_field(const fs::path& path) {
  const Bundle b = Bundle::read(path, "field");
  b.require_object("grid");
  const Grid2D g = grid_from(b, b.header["grid"]);
  auto c = b.get<double>("coefficients");
  if (c.size() != g.size()) throw ParseError(b.where("grid") + ": coefficient count does not match the grid shape");
  return ScalarField(g, std::move(c));
}

// ---- medium ----

/// Sound speed (m/s) and alpha0, stored in dB MHz^-y cm^-1 and converted on load.
inline void write_medium(const fs::path& path, const Medium& m, const json& extra = json::object()) {
  Bundle b("medium");
  b.header["grid"] = grid_json(m.grid());
  b.header["c0"] = m.c0();
  b.header["y"] = m.y();
  b.header["alpha0_units"] = "dB MHz^-y cm^-1";
  for (const auto& [k, v] : extra.items()) b.header[k] = v;
  b.put("sound_speed", std::vector<double>(m.sound_speed().coefficients().begin(), m.sound_speed().coefficients().end()));
  std::vector<double> a(m.alpha0().coefficients().begin(), m.alpha0().coefficients().end());
  for (double& v : a) v = alpha0_neper_to_db(v, m.y());
  b.put("alpha0_db", a);
  // Exact internal values too, so a round trip is lossless.
  b.put("alpha0_np", std::vector<double>(m.alpha0().coefficients().begin(), m.alpha0().coefficients().end()));
  b.write(path);
}

inline Medium read_medium(const fs::path& path, json* header = nullptr) {
  const Bundle b = Bundle::read(path, "medium");
  b.require_object("grid");
  b.require_number("c0");
  b.require_number("y");
  const Grid2D g = grid_from(b, b.header["grid"]);
  auto c = b.get<double>("sound_speed");
  std::vector<double> a = b.has("alpha0_np") ? b.get<double>("alpha0_np") : b.get<double>("alpha0_db");
  const double y = b.header["y"].get<double>();
  if (!b.has("alpha0_np"))
    for (double& v : a) v = alpha0_db_to_neper(v, y);
  if (c.size() != g.size() || a.size() != g.size())
    throw ParseError(b.where("grid") + ": medium arrays do not match the grid shape");
  if (header) *header = b.header;
  try {
    return Medium(ScalarField(g, std::move(c)), b.header["c0"].get<double>(), ScalarField(g, std::move(a)), y);
  } catch (const ConfigError& e) {
    throw ParseError(b.where("sound_speed") + ": " + e.what());
  }
}

// ---- spectra ----

inline void write_spectra(const fs::path& path, const SpectraSet& s, const json& extra = json::object()) {
  Bundle b("spectra");
  b.header["index_order"] = "frequency, receiver, emitter (emitter fastest)";
  b.header["n_frequencies"] = s.n_frequencies();
  b.header["n_receivers"] = s.n_receivers;
  b.header["n_emitters"] = s.n_emitters;
  if (!s.frequencies.empty()) {
    b.header["f_min_hz"] = s.frequencies.front() / (2 * pi);
    b.header["f_max_hz"] = s.frequencies.back() / (2 * pi);
  }
  for (const auto& [k, v] : extra.items()) b.header[k] = v;
  put_ring(b, s.ring);
  b.put("frequencies_rad_s", s.frequencies);
  b.put("values", s.values);
  b.put("present", s.present);
  b.write(path);
}

inline SpectraSet read_spectra(const fs::path& path, json* header = nullptr) {
  const Bundle b = Bundle::read(path, "spectra");
  b.require_number("n_frequencies");
  b.require_number("n_receivers");
  b.require_number("n_emitters");
  SpectraSet s(b.get<double>("frequencies_rad_s"), ring_from(b));
  if (s.n_frequencies() != b.header["n_frequencies"].get<std::size_t>())
    throw ParseError(b.where("n_frequencies") + ": frequency count mismatch");
  if (s.n_receivers != b.header["n_receivers"].get<std::size_t>() ||
      s.n_emitters != b.header["n_emitters"].get<std::size_t>())
    throw ParseError(b.where("n_receivers") + ": element counts do not match the ring");
  auto v = b.get<cplx>("values");
  auto p = b.get<std::uint8_t>("present");
  if (v.size() != s.values.size() || p.size() != s.present.size())
    throw ParseError(b.where("arrays") + ": spectra arrays do not match the declared shape");
  s.values = std::move(v);
  s.present = std::move(p);
  if (header) *header = b.header;
  return s;
}

// ---- time series ----

inline void write_time_series(const fs::path& path, const TimeSeriesSet& t, const json& extra = json::object()) {
  Bundle b("time_series");
  b.header["index_order"] = "time, receiver, emitter (emitter fastest)";
  b.header["n_samples"] = t.n_samples;
  b.header["n_receivers"] = t.n_receivers;
  b.header["n_emitters"] = t.n_emitters;
  b.header["dt"] = t.dt;
  b.header["t0"] = t.t0;
  for (const auto& [k, v] : extra.items()) b.header[k] = v;
  b.put("samples", t.samples);
  b.write(path);
}

inline TimeSeriesSet read_time_series(const fs::path& path) {
  const Bundle b = Bundle::read(path, "time_series");
  for (const char* k : {"n_samples", "n_receivers", "n_emitters", "dt", "t0"}) b.require_number(k);
  TimeSeriesSet t(b.header["n_samples"].get<std::size_t>(), b.header["n_receivers"].get<std::size_t>(),
                  b.header["n_emitters"].get<std::size_t>(), b.header["dt"].get<double>(), b.header["t0"].get<double>());
  auto s = b.get<double>("samples");
  if (s.size() != t.samples.size()) throw ParseError(b.where("n_samples") + ": sample count does not match the shape");
  t.samples = std::move(s);
  if (!(t.dt > 0.0)) throw ParseError(b.where("dt") + ": dt must be positive");
  return t;
}

// ---- sinogram ----

inline void write_sinogram(const fs::path& path, const TofSinogram& s, const json& extra = json::object()) {
  Bundle b("tof_sinogram");
  b.header["index_order"] = "receiver, emitter (emitter fastest)";
  b.header["n_receivers"] = s.n_receivers;
  b.header["n_emitters"] = s.n_emitters;
  b.header["units"] = "s";
  for (const auto& [k, v] : extra.items()) b.header[k] = v;
  b.put("tof", s.tof);
  b.put("mask", s.mask);
  b.write(path);
}

inline TofSinogram read_sinogram(const fs::path& path) {
  const Bundle b = Bundle::read(path, "tof_sinogram");
  b.require_number("n_receivers");
  b.require_number("n_emitters");
  TofSinogram s(b.header["n_receivers"].get<std::size_t>(), b.header["n_emitters"].get<std::size_t>());
  auto t = b.get<double>("tof");
  auto m = b.get<std::uint8_t>("mask");
  if (t.size() != s.tof.size() || m.size() != s.mask.size())
    throw ParseError(b.where("n_receivers") + ": sinogram arrays do not match the shape");
  s.tof = std::move(t);
  s.mask = std::move(m);
  return s;
}

// ---- linked rays ----

/// Main rays, angles and link diagnostics. Auxiliary rays are not stored; a
/// loaded set serves as a warm start or for inspection.
inline void write_linked_rays(const fs::path& path, const LinkedRaySet& s) {
  Bundle b("linked_rays");
  b.header["n_emitters"] = s.n_emitters;
  b.header["n_receivers"] = s.n_receivers;
  b.header["omega"] = s.omega;
  b.header["delta_theta"] = s.delta_theta;
  b.header["index_order"] = "emitter, receiver (receiver fastest)";
  std::vector<std::uint64_t> offsets{0};
  std::vector<double> xs, ys, arc, meta;
  for (const auto& r : s.rays) {
    for (std::size_t m = 0; m < r.size(); ++m) {
      xs.push_back(r.points[m].x);
      ys.push_back(r.points[m].y);
      arc.push_back(r.arc_lengths[m]);
    }
    offsets.push_back(xs.size());
    meta.insert(meta.end(), {r.theta0, r.step, r.first_step, r.last_step});
  }
  std::vector<std::uint32_t> iters(s.iterations.begin(), s.iterations.end());
  b.put("angles", s.angles);
  b.put("link_residuals", s.link_residuals);
  b.put("valid", s.valid);
  b.put("iterations", iters);
  b.put("ray_offsets", offsets);
  b.put("ray_meta", meta);
  b.put("x", xs);
  b.put("y", ys);
  b.put("arc_lengths", arc);
  b.write(path);
}

inline LinkedRaySet read_linked_rays(const fs::path& path) {
  const Bundle b = Bundle::read(path, "linked_rays");
  for (const char* k : {"n_emitters", "n_receivers", "omega", "delta_theta"}) b.require_number(k);
  LinkedRaySet s;
  s.n_emitters = b.header["n_emitters"].get<std::size_t>();
  s.n_receivers = b.header["n_receivers"].get<std::size_t>();
  s.omega = b.header["omega"].get<double>();
  s.delta_theta = b.header["delta_theta"].get<double>();
  const std::size_t n = s.n_emitters * s.n_receivers;
  s.angles = b.get<double>("angles");
  s.link_residuals = b.get<double>("link_residuals");
  s.valid = b.get<std::uint8_t>("valid");
  auto it = b.get<std::uint32_t>("iterations");
  const auto off = b.get<std::uint64_t>("ray_offsets");
  const auto meta = b.get<double>("ray_meta");
  const auto xs = b.get<double>("x"), ys = b.get<double>("y"), arc = b.get<double>("arc_lengths");
  if (s.angles.size() != n || s.link_residuals.size() != n || s.valid.size() != n || it.size() != n ||
      off.size() != n + 1 || meta.size() != 4 * n || xs.size() != off.back() || ys.size() != xs.size() ||
      arc.size() != xs.size())
    throw ParseError(b.where("arrays") + ": linked-ray arrays are inconsistent with the element counts");
  s.iterations.assign(it.begin(), it.end());
  s.rays.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Ray& r = s.rays[i];
    r.theta0 = meta[4 * i];
    r.step = meta[4 * i + 1];
    r.first_step = meta[4 * i + 2];
    r.last_step = meta[4 * i + 3];
    for (std::uint64_t k = off[i]; k < off[i + 1]; ++k) {
      r.points.push_back({xs[k], ys[k]});
      r.arc_lengths.push_back(arc[k]);
    }
  }
  for (auto v : s.valid) s.failures += v ? 0 : 1;
  return s;
}

}  // namespace ustray::io
