// ust: command-line driver for the simulation, TOF and waveform stages.
//
// Commands pass a stage document (JSON) along a pipe: each command reads the
// stage path from its argument or from stdin, adds its artifacts and settings,
// writes WORKDIR/stage_<command>.json and prints that path on stdout. Logs go
// to stderr.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "ustray/io.hpp"
#include "ustray/manifest.hpp"
#include "ustray/pipeline.hpp"
#include "ustray/plot.hpp"

using namespace ustray;
namespace fs = std::filesystem;
using io::json;

namespace {

void log(const std::string& s) { std::cerr << s << "\n"; }

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  const auto e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

json vec_json(Vec2 v) { return json::array({v.x, v.y}); }

Grid2D grid_of(const json& j) {
  Grid2D g;
  g.origin = {j.at("origin").at(0).get<double>(), j.at("origin").at(1).get<double>()};
  g.spacing = j.at("spacing").get<double>();
  g.n1 = j.at("shape").at(0).get<std::size_t>();
  g.n2 = j.at("shape").at(1).get<std::size_t>();
  return g;
}

json inclusion_json(const EllipseInclusion& i) {
  return {{"center", vec_json(i.center)}, {"semi_axes", {i.semi_axis1, i.semi_axis2}}, {"rotation", i.rotation},
          {"sound_speed", i.sound_speed},  {"alpha0_db", i.alpha0_db}};
}

EllipseInclusion inclusion_of(const json& j) {
  EllipseInclusion i;
  i.center = {j.at("center").at(0).get<double>(), j.at("center").at(1).get<double>()};
  i.semi_axis1 = j.at("semi_axes").at(0).get<double>();
  i.semi_axis2 = j.at("semi_axes").at(1).get<double>();
  i.rotation = j.at("rotation").get<double>();
  i.sound_speed = j.at("sound_speed").get<double>();
  i.alpha0_db = j.at("alpha0_db").get<double>();
  return i;
}

double parse_snr(const std::string& s) {
  if (s == "inf" || s == "off" || s == "none") return std::numeric_limits<double>::infinity();
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("--snr: expected a number in dB or 'inf', got '" + s + "'");
  }
}

/// Accumulating pipeline document.
class Stage {
 public:
  json doc;

  static Stage create(const fs::path& dir) {
    Stage s;
    fs::create_directories(dir);
    s.doc["format"] = "ustray-stage";
    s.doc["version"] = io::format_version;
    s.doc["workdir"] = fs::absolute(dir).lexically_normal().string();
    s.doc["commands"] = json::array();
    s.doc["artifacts"] = json::object();
    return s;
  }

  /// From a path argument, or from the first non-empty line of stdin.
  static Stage load(std::string path) {
    if (path.empty()) {
      std::string line;
      while (path.empty() && std::getline(std::cin, line)) path = trim(line);
      if (path.empty()) throw ConfigError("no stage document given and none on stdin");
    }
    Stage s;
    const std::string text = io::read_file(path);
    try {
      s.doc = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(path + ": malformed stage document at byte " + std::to_string(e.byte) + ": " + e.what());
    }
    if (!s.doc.is_object() || s.doc.value("format", "") != "ustray-stage")
      throw ParseError(path + ": not a ustray stage document");
    return s;
  }

  fs::path dir() const { return doc.at("workdir").get<std::string>(); }
  bool has(const std::string& key) const { return doc["artifacts"].contains(key); }
  fs::path artifact(const std::string& key) const {
    if (!has(key)) throw ConfigError("stage has no '" + key + "' artifact; run the command that produces it first");
    return dir() / doc["artifacts"][key].get<std::string>();
  }
  fs::path put(const std::string& key, const std::string& file) {
    doc["artifacts"][key] = file;
    return dir() / file;
  }
  const json& section(const std::string& name) const {
    if (!doc.contains(name)) throw ConfigError("stage has no '" + name + "' settings; run `" + name + "` first");
    return doc[name];
  }

  TransducerRing ring() const {
    const json& r = section("phantom").at("ring");
    return TransducerRing::uniform({r.at("center").at(0).get<double>(), r.at("center").at(1).get<double>()},
                                   r.at("radius").get<double>(), r.at("n_emitters").get<std::size_t>(),
                                   r.at("n_receivers").get<std::size_t>());
  }

  /// Writes stage_<name>.json and prints its path.
  void save(const std::string& name) {
    doc["commands"].push_back(name);
    const fs::path p = dir() / ("stage_" + name + ".json");
    io::atomic_write(p, doc.dump(2) + "\n");
    std::cout << p.string() << std::endl;
  }
};

void write_json(const fs::path& p, const json& j) { io::atomic_write(p, j.dump(2) + "\n"); }

json batch_json(const BatchRecord& b) {
  json j = {{"index", b.index},
            {"f_low_hz", b.f_low_hz},
            {"f_high_hz", b.f_high_hz},
            {"objective_before", b.objective_before},
            {"objective_after", b.objective_after},
            {"cg_iterations", b.cg_iterations},
            {"curvature_lost", b.curvature_lost},
            {"halved", b.halved},
            {"objective_increased", b.objective_increased},
            {"link_iterations", b.link_iterations},
            {"link_failures", b.link_failures},
            {"gradient_norm", b.gradient_norm}};
  j["relative_error"] = std::isfinite(b.relative_error) ? json(b.relative_error) : json(nullptr);
  return j;
}

json tof_iteration_json(const TofIteration& t) {
  json j = {{"index", t.index},         {"bent", t.bent},         {"misfit_before", t.misfit_before},
            {"misfit_after", t.misfit_after}, {"accepted", t.accepted}, {"link_iterations", t.link_iterations},
            {"rows", t.rows}};
  j["relative_error"] = std::isfinite(t.relative_error) ? json(t.relative_error) : json(nullptr);
  return j;
}

double number_or_nan(const json& j) { return j.is_number() ? j.get<double>() : std::numeric_limits<double>::quiet_NaN(); }

// ---- phantom ----

struct PhantomOpts {
  std::string out = "ust_run";
  std::string preset = "ellipse";
  double y = desk::y;
  double c0 = desk::c_water;
  double disc_speed = 1575.0;
  double disc_radius = 0.008;
  double sim_spacing = 5e-4;
  std::size_t sim_n = 128;
  double recon_spacing = 1e-3;
  std::size_t recon_n = 64;
  double radius = desk::ring_radius;
  std::size_t emitters = desk::n_emitters;
  std::size_t receivers = desk::n_receivers;
};

void run_phantom(const PhantomOpts& o) {
  Stopwatch sw;
  std::vector<EllipseInclusion> inc;
  if (o.preset == "ellipse")
    inc = desk::ellipse_phantom();
  else if (o.preset == "disc")
    inc = desk::disc_phantom(o.disc_speed, o.disc_radius);
  else
    throw ConfigError("--preset must be ellipse or disc, got '" + o.preset + "'");
  const Grid2D sim = Grid2D::centered({0, 0}, o.sim_spacing, o.sim_n);
  const Grid2D rec = Grid2D::centered({0, 0}, o.recon_spacing, o.recon_n);
  const TransducerRing ring = TransducerRing::uniform({0, 0}, o.radius, o.emitters, o.receivers);
  for (const Grid2D* g : {&sim, &rec})
    if (!g->in_interior({o.radius, 0.0}) || !g->in_interior({-o.radius, 0.0}) || !g->in_interior({0.0, o.radius}) ||
        !g->in_interior({0.0, -o.radius}))
      throw ConfigError("phantom: the ring does not fit inside the grid interior");

  Stage st = Stage::create(o.out);
  RunManifest man("phantom");
  man.config() = {{"preset", o.preset}, {"y", o.y}, {"c0", o.c0}};
  const Medium fine = make_phantom(sim, o.c0, o.y, inc);
  const Medium coarse = make_phantom(rec, o.c0, o.y, inc);
  io::write_medium(st.put("truth", "truth.json"), fine, {{"role", "truth on the simulation grid"}});
  io::write_medium(st.put("truth_recon", "truth_recon.json"), coarse, {{"role", "truth on the reconstruction grid"}});
  json incs = json::array();
  for (const auto& i : inc) incs.push_back(inclusion_json(i));
  st.doc["phantom"] = {{"preset", o.preset},
                       {"y", o.y},
                       {"c0", o.c0},
                       {"inclusions", incs},
                       {"simulation_grid", io::grid_json(sim)},
                       {"reconstruction_grid", io::grid_json(rec)},
                       {"ring",
                        {{"center", vec_json(ring.center)},
                         {"radius", ring.radius},
                         {"n_emitters", ring.n_emitters()},
                         {"n_receivers", ring.n_receivers()}}}};
  man.add_output(st.artifact("truth"));
  man.add_output(st.artifact("truth_recon"));
  man.timing("phantom", sw.seconds());
  man.write(st.dir() / "phantom.manifest.json");
  st.save("phantom");
}

// ---- simulate ----

struct SimulateOpts {
  std::string stage;
  std::string snr = "40";
  std::uint64_t seed = 1;
  double fmin = 0.2e6, fmax = 1.5e6;
  std::size_t nfreq = 140;
  int window = 15;
  double step = 0.0;
  std::size_t relink_every = 5;
  bool no_traces = false;
  double trace_c_min = 1400.0;
};

void run_simulate(const SimulateOpts& o) {
  Stopwatch sw;
  Stage st = Stage::load(o.stage);
  const TransducerRing ring = st.ring();
  const Medium truth = io::read_medium(st.artifact("truth"));
  SimConfig sim;
  sim.snr_db = parse_snr(o.snr);
  sim.seed = o.seed;
  sim.window = o.window;
  sim.step = o.step;
  sim.relink_every = o.relink_every;
  sim.validate();
  const auto freqs = FrequencySchedule::linspace_hz(o.fmin, o.fmax, o.nfreq, 1).frequencies;
  const SourceSpectrum src = sim.pulse.source(freqs);
  const double step = sim.link(truth.grid()).step;

  RunManifest man("simulate");
  man.config() = {{"snr_db", sim.noise_enabled() ? json(sim.snr_db) : json(nullptr)},
                  {"seed", sim.seed},
                  {"f_min_hz", o.fmin},
                  {"f_max_hz", o.fmax},
                  {"n_frequencies", o.nfreq},
                  {"window", sim.window},
                  {"step", step},
                  {"relink_every", sim.relink_every},
                  {"traces", !o.no_traces}};
  man.add_input(st.artifact("truth"));

  const SpectraSet data = simulate_data(truth, ring, src, sim);
  const json extra = {{"snr_db", sim.noise_enabled() ? json(sim.snr_db) : json(nullptr)}, {"seed", sim.seed}};
  io::write_spectra(st.put("spectra", "spectra.json"), data, extra);
  const SpectraSet water =
      simulate_clean(Medium::homogeneous(truth.grid(), truth.c0(), truth.y()), ring, src, sim);
  io::write_spectra(st.put("water_spectra", "water_spectra.json"), water, {{"role", "noise-free water reference"}});
  man.timing("spectra", sw.seconds());
  man.add_output(st.artifact("spectra"));
  man.add_output(st.artifact("water_spectra"));

  if (!o.no_traces) {
    Stopwatch tw;
    const pipeline::Shots shots = pipeline::simulate_shots(truth, ring, sim, o.trace_c_min);
    io::write_time_series(st.put("water_series", "water_series.json"), shots.water, extra);
    io::write_time_series(st.put("phantom_series", "phantom_series.json"), shots.phantom, extra);
    man.add_output(st.artifact("water_series"));
    man.add_output(st.artifact("phantom_series"));
    man.timing("traces", tw.seconds());
  }
  st.doc["simulate"] = man.config();
  st.doc["simulate"]["grid"] = io::grid_json(truth.grid());
  st.doc["simulate"]["pulse"] = {{"f_center_hz", sim.pulse.f_center}, {"sigma_f_hz", sim.pulse.sigma_f}};
  man.write(st.dir() / "simulate.manifest.json");
  st.save("simulate");
}

TonePulse stage_pulse(const Stage& st) {
  TonePulse p;
  const json& s = st.section("simulate");
  if (s.contains("pulse")) {
    p.f_center = s["pulse"].at("f_center_hz").get<double>();
    p.sigma_f = s["pulse"].at("sigma_f_hz").get<double>();
  }
  return p;
}

// ---- pick ----

struct PickOpts {
  std::string stage;
  std::size_t decimate = 1;
  std::size_t smoothing = PickConfig{}.smoothing;
  double floor_fraction = PickConfig{}.floor_fraction;
};

void pick_into(Stage& st, const PickOpts& o, RunManifest& man) {
  PickConfig pc;
  pc.smoothing = o.smoothing;
  pc.floor_fraction = o.floor_fraction;
  if (o.decimate < 1) throw ConfigError("--decimate must be at least 1");
  const pipeline::Shots shots{io::read_time_series(st.artifact("water_series")),
                              io::read_time_series(st.artifact("phantom_series"))};
  man.add_input(st.artifact("water_series"));
  man.add_input(st.artifact("phantom_series"));
  const TofSinogram sino = pipeline::shot_sinogram(shots, pc, o.decimate);
  io::write_sinogram(st.put("sinogram", "sinogram.json"), sino, {{"decimate", o.decimate}});
  man.add_output(st.artifact("sinogram"));
  man.metrics()["masked_fraction"] = sino.masked_fraction();
  st.doc["pick"] = {{"decimate", o.decimate}, {"smoothing", o.smoothing}, {"floor_fraction", o.floor_fraction}};
  log("pick: " + std::to_string(100.0 * sino.masked_fraction()) + "% of traces masked");
}

void run_pick(const PickOpts& o) {
  Stopwatch sw;
  Stage st = Stage::load(o.stage);
  RunManifest man("pick");
  man.config() = {{"decimate", o.decimate}, {"smoothing", o.smoothing}, {"floor_fraction", o.floor_fraction}};
  pick_into(st, o, man);
  man.timing("pick", sw.seconds());
  man.write(st.dir() / "pick.manifest.json");
  st.save("pick");
}

// ---- tof ----

struct TofOpts {
  std::string stage;
  std::string iters = "straight:1,bent:3";
  int window = 7;
  unsigned cg = 20;
  std::size_t decimate = 1;
};

void run_tof(const TofOpts& o) {
  Stopwatch sw;
  Stage st = Stage::load(o.stage);
  RunManifest man("tof");
  TofConfig tc;
  tc.schedule = TofSchedule::parse(o.iters);
  tc.window = o.window;
  tc.cg_iterations = o.cg;
  tc.log = log;
  man.config() = {{"iters", tc.schedule.str()}, {"window", tc.window}, {"cg_iterations", tc.cg_iterations}};
  if (!st.has("sinogram")) {
    PickOpts po;
    po.decimate = o.decimate;
    pick_into(st, po, man);
  }
  const TofSinogram sino = io::read_sinogram(st.artifact("sinogram"));
  man.add_input(st.artifact("sinogram"));
  const Medium truth = io::read_medium(st.artifact("truth_recon"));
  tc.truth = truth;
  const TransducerRing ring = st.ring();
  const TofResult res = tof_invert(sino, ring, Medium::homogeneous(truth.grid(), truth.c0(), truth.y()), tc);
  io::write_medium(st.put("tof_model", "tof_model.json"), res.model, {{"role", "time-of-flight initial model"}});
  json hist = json::array();
  for (const auto& it : res.history) hist.push_back(tof_iteration_json(it));
  write_json(st.put("tof_history", "tof_history.json"), {{"iterations", hist}});
  man.add_output(st.artifact("tof_model"));
  const NodeMask mask = NodeMask::inside_ring(truth.grid(), ring);
  const double re = relative_error(res.model, truth, mask.nodes);
  man.metrics()["relative_error"] = re;
  st.doc["tof"] = man.config();
  st.doc["tof"]["relative_error"] = re;
  log("tof: RE " + std::to_string(re) + "%");
  man.timing("tof", sw.seconds());
  man.write(st.dir() / "tof.manifest.json");
  st.save("tof");
}

// ---- invert ----

struct InvertOpts {
  std::string stage;
  std::optional<double> fmin, fmax;
  std::size_t batch = 4;
  unsigned lmax = 10;
  int window = 7;
  int update_window = 7;
  std::string alpha = "true";
  bool reverse = false;
  bool allow_crime = false;
  double step = 0.0;
  std::string tag;
};

void run_invert(const InvertOpts& o) {
  Stopwatch sw;
  Stage st = Stage::load(o.stage);
  const SpectraSet data = io::read_spectra(st.artifact("spectra"));
  const Medium truth = io::read_medium(st.artifact("truth_recon"));
  Medium init = st.has("tof_model") ? io::read_medium(st.artifact("tof_model"))
                                    : Medium::homogeneous(truth.grid(), truth.c0(), truth.y());
  if (!st.has("tof_model")) log("invert: no TOF model in the stage, starting from water");
  const auto model = pipeline::parse_alpha(o.alpha);
  const json& incs = st.section("phantom").at("inclusions");
  init = init.with_alpha0(pipeline::starting_alpha(model, truth, inclusion_of(incs.at(0))));

  InversionConfig ic;
  ic.window = o.window;
  ic.update_window = o.update_window;
  ic.l_max = o.lmax;
  ic.link.step = o.step;
  ic.truth = truth;
  ic.log = log;

  // Inverse-crime guard.
  const json& sim = st.section("simulate");
  const pipeline::Discretisation sd{grid_of(sim.at("grid")), sim.at("step").get<double>(), sim.at("window").get<int>()};
  const pipeline::Discretisation rd{init.grid(), o.step > 0.0 ? o.step : init.grid().spacing, o.window};
  const auto same = pipeline::inverse_crime_matches(sd, rd);
  if (!same.empty()) {
    std::string list;
    for (const auto& s : same) list += (list.empty() ? "" : ", ") + s;
    if (!o.allow_crime)
      throw ConfigError("invert: simulation and reconstruction share the same " + list +
                        "; pass --allow-inverse-crime to run anyway");
    log("invert: warning, simulation and reconstruction share the same " + list);
  }

  const double lo = o.fmin.value_or(data.frequencies.front() / (2 * pi));
  const double hi = o.fmax.value_or(data.frequencies.back() / (2 * pi));
  std::vector<double> w;
  for (double f : data.frequencies)
    if (f >= 2 * pi * lo * (1 - 1e-9) && f <= 2 * pi * hi * (1 + 1e-9)) w.push_back(f);
  if (w.empty()) throw ConfigError("invert: no data frequencies inside [fmin, fmax]");
  FrequencySchedule sched(w, o.batch);
  sched.descending = o.reverse;
  const SourceSpectrum src = stage_pulse(st).source(data.frequencies);

  RunManifest man("invert");
  man.config() = {{"f_min_hz", w.front() / (2 * pi)},
                  {"f_max_hz", w.back() / (2 * pi)},
                  {"n_frequencies", w.size()},
                  {"batch", o.batch},
                  {"l_max", o.lmax},
                  {"window", o.window},
                  {"update_window", o.update_window},
                  {"alpha", pipeline::to_string(model)},
                  {"reverse", o.reverse},
                  {"step", rd.step},
                  {"link_tolerance", ic.link.tolerance},
                  {"allow_inverse_crime", o.allow_crime}};
  man.add_input(st.artifact("spectra"));
  if (st.has("tof_model")) man.add_input(st.artifact("tof_model"));

  const InversionResult res = invert(data, init, src, sched, ic);
  const std::string sfx = o.tag.empty() ? "" : "_" + o.tag;
  io::write_medium(st.put("image" + sfx, "image" + sfx + ".json"), res.model, {{"role", "waveform inversion image"}});
  if (!sfx.empty()) st.put("image", "image" + sfx + ".json");
  json hist = json::array();
  for (const auto& b : res.history) {
    hist.push_back(batch_json(b));
    man.timing("batch_" + std::to_string(b.index), b.seconds);
  }
  write_json(st.put("invert_history" + sfx, "invert_history" + sfx + ".json"), {{"batches", hist}});
  if (!sfx.empty()) st.put("invert_history", "invert_history" + sfx + ".json");
  man.add_output(st.artifact("image"));
  const double re = res.history.empty() ? std::numeric_limits<double>::quiet_NaN() : res.history.back().relative_error;
  man.metrics()["relative_error"] = re;
  st.doc["invert" + sfx] = man.config();
  st.doc["invert" + sfx]["relative_error"] = re;
  log("invert: final RE " + std::to_string(re) + "%");
  man.timing("invert", sw.seconds());
  man.write(st.dir() / ("invert" + sfx + ".manifest.json"));
  st.save("invert" + sfx);
}

// ---- metrics ----

struct MetricsOpts {
  std::string stage;
  std::string image;
  std::string truth;
  std::string out;
};

void run_metrics(const MetricsOpts& o) {
  std::optional<Stage> st;
  if (o.image.empty() || o.truth.empty()) st = Stage::load(o.stage);
  const fs::path image_path = o.image.empty() ? st->artifact("image") : fs::path(o.image);
  const fs::path truth_path = o.truth.empty() ? st->artifact("truth_recon") : fs::path(o.truth);
  const Medium image = io::read_medium(image_path), truth = io::read_medium(truth_path);
  // Inside the ring when the geometry is known, otherwise the grid interior.
  std::vector<std::size_t> nodes;
  if (st && st->doc.contains("phantom")) {
    nodes = NodeMask::inside_ring(truth.grid(), st->ring()).nodes;
  } else {
    for (std::size_t k = 0; k < truth.grid().size(); ++k)
      if (truth.grid().in_interior(truth.grid().node(k))) nodes.push_back(k);
  }
  json out = {{"image", image_path.string()}, {"truth", truth_path.string()}};
  out["relative_error"] = relative_error(image, truth, nodes);
  if (st && st->has("tof_model")) out["tof_relative_error"] = relative_error(io::read_medium(st->artifact("tof_model")), truth, nodes);
  const fs::path dir = fs::absolute(st ? st->dir() : (o.out.empty() ? image_path.parent_path() : fs::path(o.out)));
  if (st && st->has("invert_history")) {
    const json h = json::parse(io::read_file(st->artifact("invert_history")));
    std::vector<std::vector<double>> rows;
    for (const auto& b : h.at("batches"))
      rows.push_back({b.at("index").get<double>(), b.at("f_low_hz").get<double>(), b.at("f_high_hz").get<double>(),
                      b.at("objective_before").get<double>(), b.at("objective_after").get<double>(),
                      number_or_nan(b.at("relative_error")), b.at("cg_iterations").get<double>()});
    io::atomic_write(dir / "metrics_batches.csv",
                     plot::csv({"batch", "f_low_hz", "f_high_hz", "objective_before", "objective_after",
                                "relative_error", "cg_iterations"},
                               rows));
    out["batch_table"] = (dir / "metrics_batches.csv").string();
  }
  write_json(dir / "metrics.json", out);
  log("metrics: RE " + std::to_string(out["relative_error"].get<double>()) + "%");
  if (st) {
    st->put("metrics", "metrics.json");
    st->doc["metrics"] = out;
    st->save("metrics");
  } else {
    std::cout << (dir / "metrics.json").string() << std::endl;
  }
}

// ---- plot ----

struct PlotOpts {
  std::string what = "all";
  std::string stage;
  std::size_t scale = 4;
};

std::vector<double> row_major_pairs(const std::vector<double>& v, std::size_t offset, std::size_t np) {
  return {v.begin() + static_cast<long>(offset), v.begin() + static_cast<long>(offset + np)};
}

void plot_maps(const Stage& st, const PlotOpts& o, RunManifest& man) {
  const Medium truth = io::read_medium(st.artifact("truth_recon"));
  const auto [lo, hi] = plot::finite_range({truth.sound_speed().coefficients().begin(), truth.sound_speed().coefficients().end()});
  const Grid2D& g = truth.grid();
  std::vector<std::vector<double>> rows;
  std::vector<std::string> cols{"x", "y", "truth"};
  std::vector<std::vector<double>> maps{{truth.sound_speed().coefficients().begin(), truth.sound_speed().coefficients().end()}};
  for (const char* key : {"tof_model", "image"}) {
    if (!st.has(key)) continue;
    const Medium m = io::read_medium(st.artifact(key));
    maps.emplace_back(m.sound_speed().coefficients().begin(), m.sound_speed().coefficients().end());
    cols.emplace_back(key);
  }
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const fs::path p = st.dir() / ("map_" + cols[i + 2] + ".ppm");
    plot::field_image(maps[i], g.n1, g.n2, o.scale, lo, hi).write(p);
    log("plot: " + p.string());
  }
  for (std::size_t k = 0; k < g.size(); ++k) {
    std::vector<double> r{g.node(k).x, g.node(k).y};
    for (const auto& m : maps) r.push_back(m[k]);
    rows.push_back(std::move(r));
  }
  io::atomic_write(st.dir() / "maps.csv", plot::csv(cols, rows));
  man.metrics()["map_range"] = {lo, hi};
}

void plot_sinograms(const Stage& st, const PlotOpts& o, RunManifest& man) {
  std::vector<std::string> cols{"receiver", "emitter"};
  std::vector<std::vector<double>> data;
  std::size_t nr = 0, ne = 0;
  if (st.has("sinogram")) {
    const TofSinogram s = io::read_sinogram(st.artifact("sinogram"));
    nr = s.n_receivers;
    ne = s.n_emitters;
    std::vector<double> v(s.tof.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = s.mask[i] ? s.tof[i] : std::numeric_limits<double>::quiet_NaN();
    const auto [lo, hi] = plot::finite_range(v);
    plot::heatmap(v, nr, ne, o.scale, lo, hi).write(st.dir() / "sinogram_tof.ppm");
    cols.emplace_back("tof_s");
    data.push_back(std::move(v));
  }
  if (st.has("spectra") && st.has("water_spectra")) {
    const SpectraSet p = io::read_spectra(st.artifact("spectra"));
    const SpectraSet w = io::read_spectra(st.artifact("water_spectra"));
    nr = p.n_receivers;
    ne = p.n_emitters;
    const std::size_t np = nr * ne, nf = p.n_frequencies();
    const std::vector<double> ph = pipeline::phase_sinogram(p, w);
    const auto low = row_major_pairs(ph, 0, np), high = row_major_pairs(ph, (nf - 1) * np, np);
    const auto [lo, hi] = plot::finite_range(low);
    plot::heatmap(low, nr, ne, o.scale, lo, hi).write(st.dir() / "sinogram_phase_low.ppm");
    plot::heatmap(high, nr, ne, o.scale, lo, hi).write(st.dir() / "sinogram_phase_high.ppm");
    // Spread of (φ−φ0)/ω across frequencies, relative to its largest value.
    double spread = 0.0, scale = 0.0;
    for (std::size_t q = 0; q < np; ++q) {
      double a = std::numeric_limits<double>::infinity(), b = -a;
      for (std::size_t f = 0; f < nf; ++f) {
        const double v = ph[f * np + q];
        if (!std::isfinite(v)) continue;
        a = std::min(a, v);
        b = std::max(b, v);
        scale = std::max(scale, std::abs(v));
      }
      if (b >= a) spread = std::max(spread, b - a);
    }
    man.metrics()["phase_sinogram_spread_relative"] = scale > 0 ? spread / scale : 0.0;
    log("plot: phase sinogram spread across frequencies " + std::to_string(scale > 0 ? spread / scale : 0.0) +
        " of its peak");
    cols.emplace_back("phase_over_omega_low_s");
    cols.emplace_back("phase_over_omega_high_s");
    data.push_back(low);
    data.push_back(high);
  }
  if (data.empty()) throw ConfigError("plot sinogram: stage has neither a TOF sinogram nor spectra");
  std::vector<std::vector<double>> rows;
  for (std::size_t r = 0; r < nr; ++r)
    for (std::size_t e = 0; e < ne; ++e) {
      std::vector<double> row{static_cast<double>(r), static_cast<double>(e)};
      for (const auto& d : data) row.push_back(d[r * ne + e]);
      rows.push_back(std::move(row));
    }
  io::atomic_write(st.dir() / "sinograms.csv", plot::csv(cols, rows));
  log("plot: " + (st.dir() / "sinograms.csv").string());
}

void plot_convergence(const Stage& st, RunManifest& man) {
  std::vector<double> re, obj;
  if (st.has("tof_history")) {
    const json h = json::parse(io::read_file(st.artifact("tof_history")));
    for (const auto& it : h.at("iterations"))
      if (it.at("accepted").get<bool>()) re.push_back(number_or_nan(it.at("relative_error")));
  }
  const std::size_t n_tof = re.size();
  std::vector<std::vector<double>> rows;
  if (st.has("invert_history")) {
    const json h = json::parse(io::read_file(st.artifact("invert_history")));
    for (const auto& b : h.at("batches")) {
      re.push_back(number_or_nan(b.at("relative_error")));
      obj.push_back(b.at("objective_before").get<double>());
      rows.push_back({b.at("index").get<double>(), b.at("f_low_hz").get<double>(), b.at("objective_before").get<double>(),
                      b.at("objective_after").get<double>(), number_or_nan(b.at("relative_error"))});
    }
  }
  if (re.empty()) throw ConfigError("plot convergence: stage has no TOF or inversion history");
  plot::line_plot({re}).write(st.dir() / "convergence_re.ppm");
  if (!obj.empty()) plot::line_plot({obj}, 480, 320, true).write(st.dir() / "convergence_objective.ppm");
  io::atomic_write(st.dir() / "convergence.csv",
                   plot::csv({"batch", "f_low_hz", "objective_before", "objective_after", "relative_error"}, rows));
  man.metrics()["tof_iterations_plotted"] = n_tof;
  log("plot: " + (st.dir() / "convergence.csv").string());
}

void run_plot(const PlotOpts& o) {
  Stopwatch sw;
  Stage st = Stage::load(o.stage);
  RunManifest man("plot");
  man.config() = {{"what", o.what}, {"scale", o.scale}};
  const bool all = o.what == "all";
  if (!all && o.what != "map" && o.what != "sinogram" && o.what != "convergence")
    throw ConfigError("plot: expected map, sinogram, convergence or all, got '" + o.what + "'");
  if (all || o.what == "map") plot_maps(st, o, man);
  if (all || o.what == "sinogram") plot_sinograms(st, o, man);
  if (all || o.what == "convergence") {
    if (all && !st.has("tof_history") && !st.has("invert_history"))
      log("plot: no history to plot yet");
    else
      plot_convergence(st, man);
  }
  man.timing("plot", sw.seconds());
  man.write(st.dir() / "plot.manifest.json");
  st.save("plot");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ust: ray-based ultrasound tomography pipeline"};
  app.require_subcommand(1);
  unsigned threads = 0;
  app.add_option("--threads", threads, "worker threads, 0 = all cores")->capture_default_str();
  app.set_version_flag("--version", version_string);

  PhantomOpts ph;
  auto* c_ph = app.add_subcommand("phantom", "rasterise a preset phantom on the simulation and reconstruction grids");
  c_ph->add_option("--out", ph.out, "working directory for this pipeline")->capture_default_str();
  c_ph->add_option("--preset", ph.preset, "ellipse or disc")->capture_default_str();
  c_ph->add_option("--y", ph.y, "absorption power-law exponent")->capture_default_str();
  c_ph->add_option("--c0", ph.c0, "background sound speed (m/s)")->capture_default_str();
  c_ph->add_option("--disc-speed", ph.disc_speed, "disc preset sound speed (m/s)")->capture_default_str();
  c_ph->add_option("--disc-radius", ph.disc_radius, "disc preset radius (m)")->capture_default_str();
  c_ph->add_option("--sim-spacing", ph.sim_spacing, "simulation grid spacing (m)")->capture_default_str();
  c_ph->add_option("--sim-n", ph.sim_n, "simulation grid nodes per side")->capture_default_str();
  c_ph->add_option("--recon-spacing", ph.recon_spacing, "reconstruction grid spacing (m)")->capture_default_str();
  c_ph->add_option("--recon-n", ph.recon_n, "reconstruction grid nodes per side")->capture_default_str();
  c_ph->add_option("--radius", ph.radius, "ring radius (m)")->capture_default_str();
  c_ph->add_option("--emitters", ph.emitters, "number of emitters")->capture_default_str();
  c_ph->add_option("--receivers", ph.receivers, "number of receivers")->capture_default_str();

  SimulateOpts si;
  auto* c_si = app.add_subcommand("simulate", "synthesise spectra and shot traces on the simulation grid");
  c_si->add_option("stage", si.stage, "stage document (default: read its path from stdin)");
  c_si->add_option("--snr", si.snr, "noise level in dB of peak amplitude, or inf")->capture_default_str();
  c_si->add_option("--seed", si.seed, "noise seed")->capture_default_str();
  c_si->add_option("--fmin", si.fmin, "lowest frequency (Hz)")->capture_default_str();
  c_si->add_option("--fmax", si.fmax, "highest frequency (Hz)")->capture_default_str();
  c_si->add_option("--nfreq", si.nfreq, "number of frequencies")->capture_default_str();
  c_si->add_option("--window", si.window, "ray geometry smoothing in simulation-grid spacings")->capture_default_str();
  c_si->add_option("--step", si.step, "ray step (m), 0 = simulation grid spacing")->capture_default_str();
  c_si->add_option("--relink-every", si.relink_every, "frequencies sharing one linked geometry")->capture_default_str();
  c_si->add_option("--trace-c-min", si.trace_c_min, "slowest speed the trace window must cover (m/s)")
      ->capture_default_str();
  c_si->add_flag("--no-traces", si.no_traces, "skip time-trace synthesis");

  PickOpts pk;
  auto* c_pk = app.add_subcommand("pick", "pick first arrivals and form the TOF sinogram");
  c_pk->add_option("stage", pk.stage, "stage document (default: stdin)");
  c_pk->add_option("--decimate", pk.decimate, "keep every n-th trace sample before picking")->capture_default_str();
  c_pk->add_option("--smoothing", pk.smoothing, "moving-average width (odd samples)")->capture_default_str();
  c_pk->add_option("--floor", pk.floor_fraction, "energy floor as a fraction of peak energy")->capture_default_str();

  TofOpts to;
  auto* c_to = app.add_subcommand("tof", "bent-ray time-of-flight inversion for the initial model");
  c_to->add_option("stage", to.stage, "stage document (default: stdin)");
  c_to->add_option("--iters,--tof-iters", to.iters, "iteration schedule")->capture_default_str();
  c_to->add_option("--window", to.window, "averaging window of each update")->capture_default_str();
  c_to->add_option("--cg", to.cg, "CGLS iterations per update")->capture_default_str();
  c_to->add_option("--decimate", to.decimate, "decimation when picking is run here")->capture_default_str();

  InvertOpts iv;
  auto* c_iv = app.add_subcommand("invert", "frequency-stepped Gauss-Newton waveform inversion");
  c_iv->add_option("stage", iv.stage, "stage document (default: stdin)");
  c_iv->add_option("--fmin", iv.fmin, "lowest frequency used (Hz), default the data's lowest");
  c_iv->add_option("--fmax", iv.fmax, "highest frequency used (Hz), default the data's highest");
  c_iv->add_option("--batch", iv.batch, "frequencies per subproblem")->capture_default_str();
  c_iv->add_option("--lmax", iv.lmax, "CG iterations per subproblem")->capture_default_str();
  c_iv->add_option("--window", iv.window, "ray geometry smoothing window")->capture_default_str();
  c_iv->add_option("--update-window", iv.update_window, "averaging of each update, 1 = none")->capture_default_str();
  c_iv->add_option("--alpha", iv.alpha, "absorption map: true, homogeneous or zero")->capture_default_str();
  c_iv->add_option("--step", iv.step, "ray step (m), 0 = reconstruction grid spacing")->capture_default_str();
  c_iv->add_option("--tag", iv.tag, "suffix for output names, to keep several runs in one stage");
  c_iv->add_flag("--reverse", iv.reverse, "run batches from high to low frequency");
  c_iv->add_flag("--allow-inverse-crime", iv.allow_crime, "allow simulation and reconstruction settings to coincide");

  MetricsOpts me;
  auto* c_me = app.add_subcommand("metrics", "relative error and per-batch objective tables");
  c_me->add_option("stage", me.stage, "stage document (default: stdin unless --image and --truth are given)");
  c_me->add_option("--image", me.image, "image medium header (default: the stage's latest image)");
  c_me->add_option("--truth", me.truth, "truth medium header (default: the stage's reconstruction-grid truth)");
  c_me->add_option("--out", me.out, "output directory when no stage is used");

  PlotOpts pl;
  auto* c_pl = app.add_subcommand("plot", "PPM images and CSV tables");
  c_pl->add_option("what", pl.what, "map, sinogram, convergence or all")->capture_default_str();
  c_pl->add_option("stage", pl.stage, "stage document (default: stdin)");
  c_pl->add_option("--scale", pl.scale, "pixels per grid cell")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    set_num_threads(threads);
    if (*c_ph) run_phantom(ph);
    if (*c_si) run_simulate(si);
    if (*c_pk) run_pick(pk);
    if (*c_to) run_tof(to);
    if (*c_iv) run_invert(iv);
    if (*c_me) run_metrics(me);
    if (*c_pl) run_plot(pl);
  } catch (const ConfigError& e) {
    std::cerr << "ust: configuration error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "ust: parse error: " << e.what() << "\n";
    return 3;
  } catch (const LinkFailure& e) {
    std::cerr << "ust: link failure: " << e.what() << "\n";
    return 4;
  } catch (const NumericalError& e) {
    std::cerr << "ust: numerical error: " << e.what() << "\n";
    return 4;
  } catch (const DomainError& e) {
    std::cerr << "ust: domain error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "ust: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
