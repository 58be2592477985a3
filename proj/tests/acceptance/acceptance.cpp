// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.
//
//   acceptance --work-dir DIR --cli PATH [--skip-ablation]

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <json.hpp>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "insight/decoder.hpp"
#include "insight/geometry.hpp"
#include "insight/grad_suite.hpp"
#include "insight/metrics.hpp"
#include "insight/queries.hpp"
#include "insight/synthgen.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace insight;
using namespace insight::oracle;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Line {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... xs) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, xs...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// Runs a shell command, echoing its combined output to stderr; returns the exit code.
int sh(const std::string& cmd) {
  std::cerr << "$ " << cmd << "\n";
  FILE* p = popen((cmd + " 2>&1").c_str(), "r");
  if (!p) return -1;
  char buf[4096];
  std::size_t n = 0;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) std::cerr.write(buf, static_cast<std::streamsize>(n));
  const int status = pclose(p);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Tensor2 random_tensor(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Tensor2 t(r, c);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-scale, scale);
  return t;
}

// ------------------------------------------------------------------ criteria

Line mask_structure() {
  const auto t0 = Clock::now();
  const auto inst = instance_layout({2, 3, 1});
  const auto m = build_instance_mask(inst, 0.0, nullptr, false);
  bool exact = m.rows() == 6 && m.cols() == 6;
  for (int a = 0; exact && a < 6; ++a)
    for (int b = 0; b < 6; ++b) exact = exact && m(a, b) == ((a < 3) != (b < 3));
  const auto blocked = m.count();
  const auto allowed = m.size() - blocked;
  const double secs = seconds_since(t0);
  return {exact && blocked == 18 && allowed == 18 && secs < 1.0,
          fmt("%ld blocked, %ld allowed, pattern %s, %.2e s", static_cast<long>(blocked), static_cast<long>(allowed),
              exact ? "exact" : "differs", secs)};
}

Line sharing_signatures() {
  const QueryConfig cfg{2, 3, 8};
  Rng rng(1);
  const auto naive = sharing_signature(gen_naive(cfg, rng).set);
  const auto hier = sharing_signature(gen_hierarchical(cfg, rng).set);
  const auto hybrid = sharing_signature(gen_hybrid(cfg, rng).set);
  const bool ok = naive.total_pairs() == 0 && hier.inter_pairs == 3 && hybrid.intra_pairs == 6 &&
                  hybrid.inter_pairs == 0;
  return {ok, fmt("naive %d; hierarchical inter %d; hybrid intra %d, inter %d", naive.total_pairs(), hier.inter_pairs,
                  hybrid.intra_pairs, hybrid.inter_pairs)};
}

Line masked_locality() {
  Rng rng(2024);
  const int n_inst = 12, n_pts = 8, dim = 64, heads = 4;
  ParamStore s;
  const auto mha = make_mha(s, "inner", dim, heads, rng);
  const auto inst = instance_layout({n_inst, n_pts, 1});
  const auto mask = build_instance_mask(inst, 0.0, nullptr, false);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor2 x = random_tensor(rng, n_inst * n_pts, dim);
    MhaCache c;
    const Tensor2 y = mha_forward(s, mha, x, x, x, &mask, c);
    const int keep = rng.uniform_int(0, n_inst - 1);
    for (int r = 0; r < n_inst * n_pts; ++r)
      if (inst[static_cast<std::size_t>(r)] != keep) x.row(r) = random_tensor(rng, 1, dim, 1e3);
    const Tensor2 y2 = mha_forward(s, mha, x, x, x, &mask, c);
    worst = std::max(worst, (y.middleRows(keep * n_pts, n_pts) - y2.middleRows(keep * n_pts, n_pts)).cwiseAbs().maxCoeff());
  }
  return {worst <= 1e-12, fmt("max change %.3e over 100 trials (12x8 queries, d=64)", worst)};
}

Line gradient_suite() {
  GradSuiteOptions opt;
  opt.trials = 100;
  const auto rep = run_grad_suite(opt);
  double worst = 0.0;
  std::string worst_op;
  for (const auto& e : rep.entries) {
    if (e.max_rel_err >= worst) {
      worst = e.max_rel_err;
      worst_op = e.op;
    }
  }
  std::string failing;
  for (const auto& op : rep.failing()) failing += " " + op;
  return {rep.pass() && worst < 1e-4 && rep.seconds < 120.0,
          fmt("%zu ops, worst %.2e (%s), %.1f s%s%s", rep.entries.size(), worst, worst_op.c_str(), rep.seconds,
              failing.empty() ? "" : ", failing:", failing.c_str())};
}

std::multiset<std::pair<Point2, Point2>> segments(const VectorMapGraph& g) {
  std::multiset<std::pair<Point2, Point2>> s;
  for (auto [a, b] : g.edges) s.insert(std::minmax(g.vertices[a], g.vertices[b]));
  return s;
}

std::multiset<std::pair<Point2, Point2>> segments(const std::vector<Instance>& insts) {
  std::multiset<std::pair<Point2, Point2>> s;
  for (const auto& i : insts)
    for (std::size_t k = 1; k < i.points.size(); ++k) s.insert(std::minmax(i.points[k - 1], i.points[k]));
  return s;
}

Line decomposition_oracle() {
  Rng rng(77);
  int agree = 0, conserved = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto g = random_graph(rng, 40);
    const auto out = decompose(g);
    agree += as_oracle(out) == oracle_decompose(g);
    conserved += segments(out) == segments(g);
  }
  return {agree == 1000 && conserved == 1000, fmt("%d/1000 match oracle, %d/1000 conserve edges", agree, conserved)};
}

Instance random_line(Rng& rng, double extent) {
  const Point2 a{rng.uniform(-extent, extent), rng.uniform(-extent, extent)};
  const Point2 b{a.x + rng.uniform(-3, 3), a.y + rng.uniform(2, 5)};
  return {{a, b}, InstanceKind::polyline, ElementClass::divider};
}

Line metrics_oracles(const fs::path& gt_eval) {
  const MetricConfig cfg;
  Rng rng(3);
  int ap_agree = 0;
  for (int scene = 0; scene < 500; ++scene) {
    SceneEval s;
    const int n_gt = rng.uniform_int(1, 4), n_pred = rng.uniform_int(0, 5);
    for (int g = 0; g < n_gt; ++g) s.gts.push_back(random_line(rng, 2.0));
    for (int p = 0; p < n_pred; ++p) {
      Instance x = s.gts[static_cast<std::size_t>(rng.uniform_int(0, n_gt - 1))];
      for (auto& pt : x.points) pt = pt + Point2{rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)};
      s.preds.push_back({x, std::round(rng.uniform() * 4) / 4});
    }
    const double tau = cfg.taus[static_cast<std::size_t>(scene % 3)];
    std::vector<std::size_t> order(s.preds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return s.preds[a].confidence > s.preds[b].confidence; });
    std::vector<std::vector<double>> dist;
    for (auto i : order) {
      std::vector<double> row;
      const auto dp = densify(s.preds[i].instance.points, InstanceKind::polyline, cfg.chamfer_samples);
      for (const auto& g : s.gts) row.push_back(chamfer(dp, densify(g.points, InstanceKind::polyline, cfg.chamfer_samples)));
      dist.push_back(row);
    }
    const auto oracle = oracle_match(dist, s.gts.size(), tau);
    const std::vector<SceneEval> one{s};
    ap_agree += std::abs(*ap_at_tau(one, ElementClass::divider, tau, cfg) - oracle_ap(oracle.chosen_tp, s.gts.size())) <= 1e-12;
  }

  int chamfer_ok = 0;
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<Point2> p(static_cast<std::size_t>(rng.uniform_int(1, 30))), q(static_cast<std::size_t>(rng.uniform_int(1, 30)));
    for (auto& x : p) x = {rng.uniform(-10, 10), rng.uniform(-10, 10)};
    for (auto& x : q) x = {rng.uniform(-10, 10), rng.uniform(-10, 10)};
    chamfer_ok += chamfer(p, q) == chamfer(q, p) && chamfer(p, p) == 0.0;
  }

  double gt_map = -1.0, gt_topo = -1.0;
  if (fs::exists(gt_eval)) {
    const auto j = json::parse(slurp(gt_eval));
    gt_map = j["mAP"].get<double>();
    gt_topo = j["TOPO"]["f1"].get<double>();
  }
  return {ap_agree == 500 && chamfer_ok == 500 && gt_map == 1.0 && gt_topo == 1.0,
          fmt("AP oracle %d/500, chamfer %d/500, GT-as-pred mAP %.4f TOPO F1 %.4f", ap_agree, chamfer_ok, gt_map,
              gt_topo)};
}

struct CellStats {
  double map = 0.0;
  int runs = 0;
};

Line directional_ablation(const fs::path& work, const std::string& cli) {
  const auto data = work / "data";
  const auto out = work / "ablation";
  if (sh(cli + " gen-data --out " + data.string() + " --scenes 2200 --seed 7") != 0) return {false, "gen-data failed"};
  const std::string grid = std::string(INSIGHT_SOURCE_DIR) + "/configs/ablation.grid";
  if (sh(cli + " ablate --data " + data.string() + " --grid " + grid + " --seeds 3 --out " + out.string()) != 0)
    return {false, "ablate failed"};

  const auto summary = json::parse(slurp(out / "summary.json"));
  std::map<std::string, CellStats> cells;
  for (const auto& c : summary["cells"]) cells[c["config"].get<std::string>()] = {c["mAP_mean"].get<double>(), c["runs"].get<int>()};
  for (const char* name : {"hybrid", "hierarchical", "naive", "no_attn", "before_cross"})
    if (!cells.count(name) || cells[name].runs != 3) return {false, std::string("summary lacks 3 runs of '") + name + "'"};
  const double hy = cells["hybrid"].map, hi = cells["hierarchical"].map, na = cells["naive"].map,
               off = cells["no_attn"].map, bc = cells["before_cross"].map;
  const double train_s = summary["train_seconds_total"].get<double>();

  const bool order = hy >= hi && hi >= na - 0.005;
  const bool margin = hy - na >= 0.01;
  const bool attn = hy - off >= 0.01;
  const bool place = hy >= bc;
  const bool budget = train_s < 7200.0;
  std::string failed;
  if (!order) failed += " ordering";
  if (!margin) failed += " hybrid-naive";
  if (!attn) failed += " masked-no_attn";
  if (!place) failed += " after-before";
  if (!budget) failed += " budget";
  return {order && margin && attn && place && budget,
          fmt("mAP hybrid %.4f, hierarchical %.4f, naive %.4f, no_attn %.4f, before_cross %.4f; train %.0f s%s%s", hy,
              hi, na, off, bc, train_s, failed.empty() ? "" : "; failed:", failed.c_str())};
}

Line determinism(const fs::path& work, const std::string& cli, const fs::path& micro_cfg) {
  std::vector<std::string> mismatches;
  const auto d = work / "determinism";
  fs::remove_all(d);
  for (const char* run : {"a", "b"}) {
    const auto dir = d / run;
    if (sh(cli + " gen-data --out " + (dir / "data").string() + " --scenes 24 --seed 5") != 0) return {false, "gen-data failed"};
    if (sh(cli + " train --data " + (dir / "data").string() + " --config " + micro_cfg.string() + " --out " +
           (dir / "run").string()) != 0)
      return {false, "train failed"};
  }
  std::vector<fs::path> files = {"data/dataset.jsonl", "run/log.jsonl", "run/checkpoint.imck", "run/report.json"};
  for (const auto& e : fs::directory_iterator(d / "a" / "data" / "rasters")) files.push_back(fs::path("data/rasters") / e.path().filename());
  std::size_t bytes = 0;
  for (const auto& f : files) {
    const auto a = slurp(d / "a" / f), b = slurp(d / "b" / f);
    if (a.empty() || a != b) mismatches.push_back(f.string());
    bytes += a.size();
  }
  std::string detail = fmt("%zu files, %zu bytes compared", files.size(), bytes);
  for (const auto& m : mismatches) detail += "; differs: " + m;
  return {mismatches.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance gate"};
  std::string work_dir, cli;
  bool skip_ablation = false;
  app.add_option("--work-dir", work_dir, "scratch directory (ablation results are reused across runs)")->required();
  app.add_option("--cli", cli, "path to the insight executable")->required()->check(CLI::ExistingFile);
  app.add_flag("--skip-ablation", skip_ablation, "report the ablation line as FAIL without training");
  CLI11_PARSE(app, argc, argv);

  const fs::path work = work_dir;
  fs::create_directories(work);
  const fs::path micro_cfg = fs::path(INSIGHT_SOURCE_DIR) / "configs" / "micro.cfg";

  int failures = 0;
  const auto report = [&](const std::string& name, const std::function<Line()>& f) {
    Line l;
    const auto t0 = Clock::now();
    try {
      l = f();
    } catch (const std::exception& e) {
      l = {false, std::string("exception: ") + e.what()};
    }
    failures += !l.pass;
    std::cout << (l.pass ? "PASS " : "FAIL ") << name << ": " << l.detail << fmt(" [%.1f s]", seconds_since(t0))
              << std::endl;
  };

  report("mask structure", mask_structure);
  report("sharing signatures", sharing_signatures);
  report("masked-attention locality", masked_locality);
  report("gradient suite", gradient_suite);
  report("decomposition oracle", decomposition_oracle);
  report("determinism", [&] { return determinism(work, cli, micro_cfg); });
  report("metrics oracles", [&] {
    const auto gt = work / "determinism" / "gt_eval.json";
    sh(cli + " eval --data " + (work / "determinism" / "a" / "data").string() + " --gt-as-pred --out " + gt.string());
    return metrics_oracles(gt);
  });
  report("directional ablation", [&] {
    if (skip_ablation) return Line{false, "skipped (--skip-ablation)"};
    return directional_ablation(work, cli);
  });

  std::cout << (failures == 0 ? "ALL PASS" : fmt("%d FAILED", failures)) << std::endl;
  return failures == 0 ? 0 : 1;
}
