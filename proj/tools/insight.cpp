// insight: dataset generation, training, evaluation, gradient checks and
// ablation sweeps for the toy map detector.
//
// Exit codes: 0 success, 1 check failure or runtime error, 2 usage error,
// 3 checkpoint/config mismatch.

#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "insight/config.hpp"
#include "insight/detector.hpp"
#include "insight/grad_suite.hpp"
#include "insight/metrics.hpp"
#include "insight/synthgen.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace insight;

namespace {

constexpr const char* kToolVersion = "0.1.0";
constexpr const char* kDatasetFile = "dataset.jsonl";
constexpr const char* kManifestFile = "manifest.json";

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string read_text(const fs::path& p, const char* what) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw UsageError(std::string("cannot read ") + what + " '" + p.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::error_code ec;
  if (p.has_parent_path()) fs::create_directories(p.parent_path(), ec);
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw UsageError("cannot write '" + p.string() + "'");
  f << text;
  if (!f) throw Error("write failed: " + p.string());
}

void make_output_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw UsageError("cannot create output directory '" + dir.string() + "'" + (ec ? ": " + ec.message() : ""));
  }
  const fs::path probe = dir / ".write_probe";
  {
    std::ofstream f(probe);
    if (!f) throw UsageError("output directory '" + dir.string() + "' is not writable");
  }
  fs::remove(probe, ec);
}

/// A dataset argument may name the directory or its dataset.jsonl.
fs::path dataset_file(const fs::path& p) { return fs::is_directory(p) ? p / kDatasetFile : p; }

struct LoadedDataset {
  fs::path file;
  std::vector<SceneRecord> scenes;
  std::uint64_t fingerprint = 0;
};

LoadedDataset load_dataset(const fs::path& arg) {
  LoadedDataset d;
  d.file = dataset_file(arg);
  if (!fs::is_regular_file(d.file)) throw UsageError("dataset '" + d.file.string() + "' does not exist");
  d.scenes = read_dataset(d.file.string());
  d.fingerprint = fnv1a64(read_text(d.file, "dataset"));
  for (const auto& s : d.scenes) {
    d.fingerprint = fnv1a64(std::string_view(reinterpret_cast<const char*>(s.raster.data.data()),
                                             s.raster.data.size() * sizeof(float)),
                            d.fingerprint);
  }
  return d;
}

DetectorConfig load_config(const fs::path& p) {
  return DetectorConfig::from_key_values(parse_key_values(read_text(p, "config"), p.string()));
}

std::string iso_utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Shared manifest fields. `argv` plus the config snapshot are enough to
/// rerun the command.
struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config;
  std::uint64_t seed = 0;
  json inputs = json::object();
  json outputs = json::object();
  json extra = json::object();
  Clock::time_point start = Clock::now();
  std::string started = iso_utc_now();

  json to_json() const {
    json j{{"command", command},
           {"argv", argv},
           {"tool_version", kToolVersion},
           {"seed", seed},
           {"config", config},
           {"inputs", inputs},
           {"outputs", outputs},
           {"started_utc", started},
           {"wall_clock_seconds", seconds_since(start)}};
    for (const auto& [k, v] : extra.items()) j[k] = v;
    return j;
  }

  void write(const fs::path& p) const { write_text(p, to_json().dump(2) + "\n"); }
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// ------------------------------------------------------------------ gen-data

struct GenArgs {
  std::string out;
  int scenes = 100;
  std::uint64_t seed = 0;
  double resolution = 0.3;
};

int cmd_gen_data(const GenArgs& a, Manifest m) {
  if (a.scenes < 0) throw UsageError("--scenes must be >= 0");
  if (!(a.resolution > 0.0)) throw UsageError("--resolution must be positive");
  const fs::path out(a.out);
  make_output_dir(out);
  SceneConfig sc;
  sc.seed = a.seed;
  const auto scenes = generate_dataset(sc, a.scenes, a.resolution);
  const fs::path file = out / kDatasetFile;
  try {
    write_dataset(scenes, file.string());
  } catch (const UsageError&) {
    throw;
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  // An empty dataset still records the requested resolution.
  if (scenes.empty()) {
    write_text(file, json{{"format", kDatasetFormat}, {"version", kDatasetVersion}, {"resolution", a.resolution}}.dump() +
                         "\n");
  }
  m.seed = a.seed;
  m.config = "scenes = " + std::to_string(a.scenes) + "\nresolution = " + fmt(a.resolution, 6) +
             "\nseed = " + std::to_string(a.seed) + "\n";
  m.outputs = {{"dataset", file.string()}, {"rasters", (out / "rasters").string()}};
  m.extra = {{"scenes", a.scenes}};
  m.write(out / kManifestFile);
  std::cout << "wrote " << a.scenes << " scenes to " << file.string() << " in " << fmt(seconds_since(m.start), 2)
            << " s\n";
  return 0;
}

// ------------------------------------------------------------------ train

struct TrainArgs {
  std::string data, config, out;
  bool resume = false;
};

void print_epoch(const EpochRecord& e, int epochs) {
  std::cerr << "epoch " << e.epoch << "/" << epochs << "  loss " << fmt(e.loss) << "  mAP " << fmt(e.map)
            << "  TOPO " << fmt(e.topo) << std::endl;
}

int cmd_train(const TrainArgs& a, Manifest m) {
  const auto cfg = load_config(a.config);
  const auto data = load_dataset(a.data);
  const fs::path out(a.out);
  make_output_dir(out);
  TrainOptions opt{out, a.resume, 0, [&](const EpochRecord& e) { print_epoch(e, cfg.epochs); }};
  const auto r = train(data.scenes, cfg, opt);
  const json report = r.final_report.to_json();
  write_text(out / "report.json", report.dump(2) + "\n");
  m.seed = cfg.seed;
  m.config = cfg.canonical();
  m.inputs = {{"data", data.file.string()}, {"data_fingerprint", hex64(data.fingerprint)}, {"config", a.config}};
  m.outputs = {{"checkpoint", (out / kCheckpointFile).string()},
               {"log", (out / kLogFile).string()},
               {"config", (out / kConfigFile).string()},
               {"report", (out / "report.json").string()}};
  m.extra = {{"config_hash", hex64(cfg.hash())}};
  m.write(out / kManifestFile);
  std::cout << report.dump(2) << "\n";
  return 0;
}

// ------------------------------------------------------------------ eval

struct EvalArgs {
  std::string data, checkpoint, config, out;
  bool gt_as_pred = false;
};

int cmd_eval(const EvalArgs& a, Manifest m) {
  if (a.checkpoint.empty() && !a.gt_as_pred) throw UsageError("eval needs --checkpoint (or --gt-as-pred)");
  fs::path config_path = a.config;
  if (config_path.empty() && !a.checkpoint.empty()) config_path = fs::path(a.checkpoint).parent_path() / kConfigFile;
  DetectorConfig cfg;
  if (!config_path.empty()) cfg = load_config(config_path);
  const auto data = load_dataset(a.data);
  if (data.scenes.empty()) throw UsageError("dataset '" + data.file.string() + "' has no scenes");

  std::vector<SceneEval> scenes;
  scenes.reserve(data.scenes.size());
  if (a.gt_as_pred) {
    for (const auto& s : data.scenes) {
      SceneEval e{{}, s.instances};
      for (const auto& g : s.instances) e.preds.push_back({g, 1.0});
      scenes.push_back(std::move(e));
    }
  } else {
    const Detector d = load_detector(cfg, BevShape::of(data.scenes.front().raster, cfg.patch), a.checkpoint);
    for (const auto& s : data.scenes) scenes.push_back({scored_instances(predict(d, s.raster)), s.instances});
  }
  const json report = evaluate(scenes, cfg.metric_config()).to_json();

  fs::path out = a.out;
  if (out.empty()) out = a.checkpoint.empty() ? fs::path("eval.json") : fs::path(a.checkpoint).parent_path() / "eval.json";
  write_text(out, report.dump(2) + "\n");
  m.seed = cfg.seed;
  m.config = cfg.canonical();
  m.inputs = {{"data", data.file.string()}, {"data_fingerprint", hex64(data.fingerprint)}};
  if (!a.checkpoint.empty()) m.inputs["checkpoint"] = a.checkpoint;
  if (!config_path.empty()) m.inputs["config"] = config_path.string();
  m.outputs = {{"report", out.string()}};
  m.extra = {{"gt_as_pred", a.gt_as_pred}};
  fs::path manifest = out;
  manifest.replace_extension(".manifest.json");
  m.write(manifest);
  std::cout << report.dump(2) << "\n";
  return 0;
}

// ------------------------------------------------------------------ grad-check

struct GradArgs {
  std::string config, out;
};

GradSuiteOptions grad_options(const KeyValues& kv) {
  GradSuiteOptions o;
  for (const auto& key : kv.keys()) {
    const std::string& v = *kv.find(key);
    if (key == "rel_tol") o.rel_tol = parse_double(key, v);
    else if (key == "trials") o.trials = static_cast<int>(parse_int(key, v));
    else if (key == "seed") o.seed = static_cast<std::uint64_t>(parse_int(key, v));
    else if (key == "inject_bug") o.inject_bug = v;
    else throw UsageError("unknown grad-check key '" + key + "'; valid keys: rel_tol, trials, seed, inject_bug");
  }
  if (!(o.rel_tol > 0.0)) throw UsageError("rel_tol must be positive");
  return o;
}

int cmd_grad_check(const GradArgs& a, Manifest m) {
  KeyValues kv;
  if (!a.config.empty()) kv = parse_key_values(read_text(a.config, "config"), a.config);
  const auto opt = grad_options(kv);
  if (!a.out.empty()) make_output_dir(a.out);
  const auto rep = run_grad_suite(opt);

  std::printf("%-40s %6s %7s %12s  %s\n", "op", "trials", "coords", "max_rel_err", "status");
  for (const auto& e : rep.entries) {
    std::printf("%-40s %6d %7zu %12.3e  %s\n", e.op.c_str(), e.trials, e.coords, e.max_rel_err,
                e.pass ? "ok" : "FAIL");
  }
  std::printf("%s: %zu ops, tolerance %.1e, %.2f s\n", rep.pass() ? "PASS" : "FAIL", rep.entries.size(), opt.rel_tol,
              rep.seconds);
  std::fflush(stdout);

  m.seed = opt.seed;
  m.config = kv.canonical();
  m.extra = {{"pass", rep.pass()}};
  if (!a.out.empty()) {
    const fs::path out(a.out);
    write_text(out / "report.json", grad_suite_json(rep, opt.rel_tol).dump(2) + "\n");
    m.outputs = {{"report", (out / "report.json").string()}};
    m.write(out / kManifestFile);
  } else {
    std::cerr << m.to_json().dump() << "\n";
  }
  if (!rep.pass()) {
    for (const auto& op : rep.failing()) std::cerr << "gradient check failed: " << op << "\n";
    return 1;
  }
  return 0;
}

// ------------------------------------------------------------------ ablate

struct GridCell {
  std::string name;
  KeyValues overrides;
  DetectorConfig config;
};

struct Grid {
  KeyValues base;
  std::vector<GridCell> cells;
  std::string reference;
};

/// Grid files hold base config keys, one `cell.NAME = key=value; ...` line
/// per configuration and an optional `reference = NAME` for the delta column.
Grid parse_grid(const fs::path& p) {
  const auto kv = parse_key_values(read_text(p, "grid"), p.string());
  Grid g;
  for (const auto& key : kv.keys()) {
    const std::string& v = *kv.find(key);
    if (key.rfind("cell.", 0) == 0) {
      GridCell c{key.substr(5), {}, {}};
      if (c.name.empty() || c.name.find_first_of(",/ ") != std::string::npos) {
        throw UsageError("grid: invalid cell name '" + c.name + "'");
      }
      std::string text = v;
      std::replace(text.begin(), text.end(), ';', '\n');
      c.overrides = parse_key_values(text, "cell '" + c.name + "'");
      g.cells.push_back(std::move(c));
    } else if (key == "reference") {
      g.reference = v;
    } else {
      g.base.set(key, v);
    }
  }
  if (g.cells.empty()) throw UsageError("grid '" + p.string() + "' defines no cells");
  for (auto& c : g.cells) {
    KeyValues merged = g.base;
    for (const auto& k : c.overrides.keys()) {
      if (k == "seed") throw UsageError("cell '" + c.name + "': seeds come from --seeds, not the cell");
      merged.set(k, *c.overrides.find(k));
    }
    c.config = DetectorConfig::from_key_values(merged);
  }
  if (g.reference.empty()) {
    g.reference = g.cells.front().name;
    for (const auto& c : g.cells) {
      if (c.name == "hierarchical") g.reference = c.name;
    }
  }
  bool found = false;
  for (const auto& c : g.cells) found = found || c.name == g.reference;
  if (!found) throw UsageError("grid: reference cell '" + g.reference + "' is not defined");
  return g;
}

struct RunResult {
  double map = 0.0;
  double topo_f1 = 0.0;
  double seconds = 0.0;
  bool reused = false;
};

json run_identity(const DetectorConfig& cfg, std::uint64_t data_fp) {
  return {{"config_hash", hex64(cfg.hash())}, {"data_fingerprint", hex64(data_fp)}};
}

std::optional<json> read_json_if(const fs::path& p) {
  if (!fs::is_regular_file(p)) return std::nullopt;
  try {
    return json::parse(read_text(p, "json"));
  } catch (const json::exception&) {
    return std::nullopt;
  }
}

bool same_identity(const json& j, const json& id) {
  return j.value("config_hash", "") == id["config_hash"] && j.value("data_fingerprint", "") == id["data_fingerprint"];
}

/// Trains one (cell, seed) run in `dir`, or reuses a finished run with the
/// same config and data. Unfinished runs with the same identity resume.
RunResult run_cell(const DetectorConfig& cfg, const LoadedDataset& data, const fs::path& dir, const std::string& label) {
  const json id = run_identity(cfg, data.fingerprint);
  if (const auto done = read_json_if(dir / "result.json"); done && same_identity(*done, id)) {
    return {done->at("mAP").get<double>(), done->at("TOPO_f1").get<double>(), done->at("seconds").get<double>(), true};
  }
  bool resume = false;
  if (const auto started = read_json_if(dir / "run.json"); started && same_identity(*started, id)) {
    resume = fs::is_regular_file(dir / kCheckpointFile) && fs::is_regular_file(dir / kLogFile);
  }
  double prior = 0.0;
  if (resume) {
    prior = read_json_if(dir / "run.json")->value("seconds", 0.0);
  } else {
    fs::remove_all(dir);
    make_output_dir(dir);
  }
  const auto t0 = Clock::now();
  TrainOptions opt{dir, resume, 0, [&](const EpochRecord& e) {
                     json progress = id;
                     progress["seconds"] = prior + seconds_since(t0);
                     write_text(dir / "run.json", progress.dump() + "\n");
                     std::cerr << label << "  ";
                     print_epoch(e, cfg.epochs);
                   }};
  json progress = id;
  progress["seconds"] = prior;
  write_text(dir / "run.json", progress.dump() + "\n");
  const auto r = train(data.scenes, cfg, opt);
  RunResult res{r.final_report.map, r.final_report.topo.f1, prior + seconds_since(t0), false};
  json out = id;
  out["mAP"] = res.map;
  out["TOPO_f1"] = res.topo_f1;
  out["seconds"] = res.seconds;
  out["report"] = r.final_report.to_json();
  write_text(dir / "result.json", out.dump(2) + "\n");
  return res;
}

struct Stat {
  double mean = 0.0;
  double sd = 0.0;
};

Stat mean_sd(const std::vector<double>& xs) {
  Stat s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

/// Grouped bars of mean mAP and TOPO F1 (in points) with ±sd whiskers.
std::string render_chart(const std::vector<std::string>& names, const std::vector<Stat>& map,
                         const std::vector<Stat>& topo) {
  const double left = 60, top = 40, plot_h = 300, group_w = 110, bar_w = 36;
  const double width = left + group_w * static_cast<double>(names.size()) + 40;
  const double height = top + plot_h + 80;
  double vmax = 10.0;
  for (std::size_t i = 0; i < names.size(); ++i) {
    vmax = std::max({vmax, 100.0 * (map[i].mean + map[i].sd), 100.0 * (topo[i].mean + topo[i].sd)});
  }
  vmax = std::ceil(vmax / 10.0) * 10.0;
  auto y = [&](double v) { return top + plot_h * (1.0 - v / vmax); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << left << "\" y=\"20\" font-size=\"14\">Ablation: mean over seeds (points), whiskers = sd</text>\n";
  for (int t = 0; t <= 5; ++t) {
    const double v = vmax * t / 5.0;
    s << "<line x1=\"" << left << "\" x2=\"" << width - 30 << "\" y1=\"" << y(v) << "\" y2=\"" << y(v)
      << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"" << left - 8 << "\" y=\"" << y(v) + 4 << "\" text-anchor=\"end\">" << fmt(v, 0) << "</text>\n";
  }
  const char* colors[2] = {"#3b6ea8", "#d98b2b"};
  for (std::size_t i = 0; i < names.size(); ++i) {
    const double gx = left + group_w * static_cast<double>(i) + 15;
    const Stat* stats[2] = {&map[i], &topo[i]};
    for (int k = 0; k < 2; ++k) {
      const double x = gx + k * (bar_w + 4);
      const double m = 100.0 * stats[k]->mean, sd = 100.0 * stats[k]->sd;
      s << "<rect x=\"" << x << "\" y=\"" << y(m) << "\" width=\"" << bar_w << "\" height=\"" << y(0) - y(m)
        << "\" fill=\"" << colors[k] << "\"/>\n";
      const double cx = x + bar_w / 2;
      s << "<line x1=\"" << cx << "\" x2=\"" << cx << "\" y1=\"" << y(std::max(0.0, m - sd)) << "\" y2=\""
        << y(m + sd) << "\" stroke=\"black\"/>\n";
      s << "<text x=\"" << cx << "\" y=\"" << y(m + sd) - 4 << "\" text-anchor=\"middle\" font-size=\"10\">"
        << fmt(m, 1) << "</text>\n";
    }
    s << "<text x=\"" << gx + bar_w + 2 << "\" y=\"" << top + plot_h + 18 << "\" text-anchor=\"middle\">"
      << svg_escape(names[i]) << "</text>\n";
  }
  const double ly = top + plot_h + 50;
  for (int k = 0; k < 2; ++k) {
    const double lx = left + k * 120;
    s << "<rect x=\"" << lx << "\" y=\"" << ly - 10 << "\" width=\"12\" height=\"12\" fill=\"" << colors[k] << "\"/>\n";
    s << "<text x=\"" << lx + 18 << "\" y=\"" << ly << "\">" << (k == 0 ? "mAP" : "TOPO F1") << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

struct AblateArgs {
  std::string data, grid, out;
  int seeds = 3;
  int jobs = 1;
};

int cmd_ablate(const AblateArgs& a, Manifest m) {
  if (a.seeds < 1) throw UsageError("--seeds must be >= 1");
  if (a.jobs < 1) throw UsageError("--jobs must be >= 1");
  const Grid grid = parse_grid(a.grid);
  const auto data = load_dataset(a.data);
  const fs::path out(a.out);
  make_output_dir(out);

  struct Job {
    std::size_t cell;
    int k;
    DetectorConfig cfg;
    fs::path dir;
    std::string label;
  };
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < grid.cells.size(); ++c) {
    for (int k = 0; k < a.seeds; ++k) {
      DetectorConfig cfg = grid.cells[c].config;
      cfg.seed = grid.cells[c].config.seed + static_cast<std::uint64_t>(k);
      const std::string label = grid.cells[c].name + "/seed_" + std::to_string(cfg.seed);
      jobs.push_back({c, k, cfg, out / "runs" / grid.cells[c].name / ("seed_" + std::to_string(cfg.seed)), label});
    }
  }

  std::vector<RunResult> results(jobs.size());
  if (a.jobs == 1) {
    for (std::size_t j = 0; j < jobs.size(); ++j) results[j] = run_cell(jobs[j].cfg, data, jobs[j].dir, jobs[j].label);
  } else {
    // Each child trains one run single-threaded; results come back through result.json.
    std::size_t next = 0;
    int running = 0;
    bool failed = false;
    std::cout.flush();
    std::cerr.flush();
    while (next < jobs.size() || running > 0) {
      while (running < a.jobs && next < jobs.size() && !failed) {
        const Job& job = jobs[next++];
        const pid_t pid = fork();
        if (pid < 0) throw Error("fork failed");
        if (pid == 0) {
          int code = 0;
          try {
            run_cell(job.cfg, data, job.dir, job.label);
          } catch (const std::exception& e) {
            std::cerr << job.label << ": " << e.what() << "\n";
            code = 1;
          }
          std::cerr.flush();
          _exit(code);
        }
        ++running;
      }
      if (running == 0) break;
      int status = 0;
      if (wait(&status) > 0) {
        --running;
        failed = failed || !WIFEXITED(status) || WEXITSTATUS(status) != 0;
      }
    }
    if (failed) throw Error("one or more ablation runs failed");
    for (std::size_t j = 0; j < jobs.size(); ++j) {
      results[j] = run_cell(jobs[j].cfg, data, jobs[j].dir, jobs[j].label);
      results[j].reused = false;
    }
  }

  std::string csv = "config,seed,mAP,TOPO_f1\n";
  double total_seconds = 0.0;
  int reused = 0;
  std::vector<std::vector<double>> maps(grid.cells.size()), topos(grid.cells.size());
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    const auto& r = results[j];
    csv += grid.cells[jobs[j].cell].name + "," + std::to_string(jobs[j].cfg.seed) + "," +
           detail::format_double(r.map) + "," + detail::format_double(r.topo_f1) + "\n";
    maps[jobs[j].cell].push_back(r.map);
    topos[jobs[j].cell].push_back(r.topo_f1);
    total_seconds += r.seconds;
    reused += r.reused ? 1 : 0;
  }

  std::vector<std::string> names;
  std::vector<Stat> map_stats, topo_stats;
  std::size_t ref = 0;
  for (std::size_t c = 0; c < grid.cells.size(); ++c) {
    names.push_back(grid.cells[c].name);
    map_stats.push_back(mean_sd(maps[c]));
    topo_stats.push_back(mean_sd(topos[c]));
    if (grid.cells[c].name == grid.reference) ref = c;
  }

  json cells = json::array();
  std::ostringstream table;
  table << "| config | runs | mAP | TOPO F1 | ΔmAP vs " << grid.reference << " | ΔTOPO vs " << grid.reference << " |\n"
        << "|---|---|---|---|---|---|\n";
  for (std::size_t c = 0; c < names.size(); ++c) {
    const double dm = map_stats[c].mean - map_stats[ref].mean;
    const double dt = topo_stats[c].mean - topo_stats[ref].mean;
    cells.push_back({{"config", names[c]},
                     {"overrides", grid.cells[c].overrides.canonical()},
                     {"config_hash", hex64(grid.cells[c].config.hash())},
                     {"runs", maps[c].size()},
                     {"mAP_mean", map_stats[c].mean},
                     {"mAP_sd", map_stats[c].sd},
                     {"TOPO_f1_mean", topo_stats[c].mean},
                     {"TOPO_f1_sd", topo_stats[c].sd},
                     {"delta_mAP", dm},
                     {"delta_TOPO_f1", dt}});
    auto pts = [](double v) { return fmt(100.0 * v, 2); };
    auto signed_pts = [&](double v) { return (v >= 0 ? "+" : "") + pts(v); };
    table << "| " << names[c] << " | " << maps[c].size() << " | " << pts(map_stats[c].mean) << " ± "
          << pts(map_stats[c].sd) << " | " << pts(topo_stats[c].mean) << " ± " << pts(topo_stats[c].sd) << " | "
          << signed_pts(dm) << " | " << signed_pts(dt) << " |\n";
  }
  const json summary{{"reference", grid.reference},
                     {"seeds", a.seeds},
                     {"cells", cells},
                     {"train_seconds_total", total_seconds},
                     {"data_fingerprint", hex64(data.fingerprint)}};

  write_text(out / "results.csv", csv);
  write_text(out / "summary.json", summary.dump(2) + "\n");
  write_text(out / "summary.md", "Values in points (x100), mean ± sd over seeds.\n\n" + table.str());
  write_text(out / "chart.svg", render_chart(names, map_stats, topo_stats));

  m.config = read_text(a.grid, "grid");
  m.seed = grid.cells.front().config.seed;
  m.inputs = {{"data", data.file.string()}, {"data_fingerprint", hex64(data.fingerprint)}, {"grid", a.grid}};
  m.outputs = {{"csv", (out / "results.csv").string()},
               {"summary", (out / "summary.json").string()},
               {"table", (out / "summary.md").string()},
               {"chart", (out / "chart.svg").string()},
               {"runs", (out / "runs").string()}};
  m.extra = {{"runs", jobs.size()}, {"reused_runs", reused}, {"train_seconds_total", total_seconds}};
  m.write(out / kManifestFile);
  std::cout << table.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy vectorized-map detector: data, training, evaluation, gradient checks and ablations."};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  Manifest manifest;
  manifest.argv.assign(argv, argv + argc);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic BEV dataset");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--scenes", gen.scenes, "Number of scenes")->capture_default_str();
  g->add_option("--seed", gen.seed, "Dataset seed")->capture_default_str();
  g->add_option("--resolution", gen.resolution, "Raster cell size in metres")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the detector");
  t->add_option("--data", tr.data, "Dataset directory or dataset.jsonl")->required();
  t->add_option("--config", tr.config, "key = value config file")->required();
  t->add_option("--out", tr.out, "Run directory")->required();
  t->add_flag("--resume", tr.resume, "Continue from the run directory's checkpoint");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--data", ev.data, "Dataset directory or dataset.jsonl")->required();
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file");
  e->add_option("--config", ev.config, "Config file (default: config.cfg next to the checkpoint)");
  e->add_option("--out", ev.out, "Report path (default: eval.json next to the checkpoint)");
  e->add_flag("--gt-as-pred", ev.gt_as_pred, "Debug: score ground truth as predictions");

  GradArgs gr;
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of every differentiable module");
  gc->add_option("--config", gr.config, "key = value file: rel_tol, trials, seed, inject_bug");
  gc->add_option("--out", gr.out, "Directory for report.json and manifest.json");

  AblateArgs ab;
  auto* a = app.add_subcommand("ablate", "Train every grid cell for K seeds and compare");
  a->add_option("--data", ab.data, "Dataset directory or dataset.jsonl")->required();
  a->add_option("--grid", ab.grid, "Grid file")->required();
  a->add_option("--seeds", ab.seeds, "Seeds per cell")->capture_default_str();
  a->add_option("--out", ab.out, "Output directory")->required();
  a->add_option("--jobs", ab.jobs, "Parallel training processes")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (g->parsed()) {
      manifest.command = "gen-data";
      return cmd_gen_data(gen, manifest);
    }
    if (t->parsed()) {
      manifest.command = "train";
      return cmd_train(tr, manifest);
    }
    if (e->parsed()) {
      manifest.command = "eval";
      return cmd_eval(ev, manifest);
    }
    if (gc->parsed()) {
      manifest.command = "grad-check";
      return cmd_grad_check(gr, manifest);
    }
    if (a->parsed()) {
      manifest.command = "ablate";
      return cmd_ablate(ab, manifest);
    }
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const StateMismatchError& err) {
    std::cerr << "state mismatch: " << err.what() << "\n";
    return 3;
  } catch (const ParseError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const VersionError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 2;
}
