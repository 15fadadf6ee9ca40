// taskfuse: similarity-guided progressive decoder fusion toolkit.
//
// Subcommands: cka, group, pdf (run/resume), sweep, eval
// (consistency/attack/relimp). Exit codes: 0 ok, 1 usage error, 2
// data/format error, 3 numeric/degenerate error.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "taskfuse/eval.hpp"
#include "taskfuse/fusion_plan.hpp"
#include "taskfuse/npy.hpp"
#include "taskfuse/rng.hpp"
#include "taskfuse/toy_mtn.hpp"
#include "taskfuse/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace taskfuse;

namespace {

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t at = text.find(sep, pos);
    out.push_back(text.substr(pos, at == std::string::npos ? std::string::npos : at - pos));
    if (at == std::string::npos) break;
    pos = at + 1;
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  for (const auto& part : split(text, ',')) out.push_back(std::stoi(part));
  return out;
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  for (const auto& part : split(text, ',')) out.push_back(std::stod(part));
  return out;
}

FileFormat format_for(const fs::path& path) {
  const std::string ext = path.extension().string();
  if (ext == ".npy") return FileFormat::npy;
  if (ext == ".csv") return FileFormat::csv;
  fail(ErrorKind::usage, "cannot infer format from extension '" + ext + "' (want .npy or .csv)");
}

void print_matrix(const SimilarityMatrix& s) {
  std::printf("%6s", "");
  for (const auto& t : s.tasks) std::printf(" %8s", t.name.c_str());
  std::printf("\n");
  for (int i = 0; i < s.task_count(); ++i) {
    std::printf("%6s", s.tasks[i].name.c_str());
    for (int j = 0; j < s.task_count(); ++j) std::printf(" %8.4f", s.values(i, j));
    std::printf("\n");
  }
}

std::string render_groups(const Grouping& g) {
  std::string out;
  for (const auto& group : g.groups) {
    out += "[";
    for (std::size_t i = 0; i < group.members.size(); ++i)
      out += (i ? "," : "") + group.members[i].name;
    out += "] ";
  }
  return out;
}

Eigen::MatrixXd load_2d(const fs::path& path) {
  const npy::Array a = npy::load(path);
  if (a.shape.size() != 2)
    fail(ErrorKind::format, "expected a rank-2 npy file: " + path.string());
  Eigen::MatrixXd m(static_cast<Eigen::Index>(a.shape[0]), static_cast<Eigen::Index>(a.shape[1]));
  for (std::size_t r = 0; r < a.shape[0]; ++r)
    for (std::size_t c = 0; c < a.shape[1]; ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = a.data[r * a.shape[1] + c];
  return m;
}

// ---- cka ------------------------------------------------------------------

struct CkaArgs {
  std::vector<std::string> inputs;
  int stage = 1;
  std::string method = "cka";
  std::string pool = "spatial";
  std::string out_format = "json";
  std::string output;
};

int run_cka(const CkaArgs& args) {
  if (args.inputs.size() < 2)
    fail(ErrorKind::usage, "need at least 2 --inputs task=path entries");
  if (args.pool != "spatial" && args.pool != "channel")
    fail(ErrorKind::usage, "unknown pooling mode: " + args.pool);
  const PoolMode pool =
      args.pool == "channel" ? PoolMode::channel_mean_flatten : PoolMode::spatial_mean;
  const SimMethod method = sim_method_from_string(args.method);

  std::vector<ActivationMatrix> matrices;
  for (const auto& input : args.inputs) {
    const std::size_t eq = input.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == input.size())
      fail(ErrorKind::usage, "--inputs entries look like task=path, got '" + input + "'");
    const TaskId task{input.substr(0, eq)};
    const fs::path path = input.substr(eq + 1);
    matrices.push_back(
        load_activation_matrix(path, format_for(path), task, StageId{args.stage}, pool));
  }

  const ActivationBundle bundle = make_bundle(StageId{args.stage}, std::move(matrices));
  const SimilarityMatrix s = pairwise_similarity(bundle, method);

  std::string out = args.output;
  std::string payload;
  if (args.out_format == "json") {
    payload = similarity_to_json(s);
    if (out.empty()) out = "similarity.json";
  } else if (args.out_format == "csv") {
    payload = similarity_to_csv(s);
    if (out.empty()) out = "similarity.csv";
  } else if (args.out_format == "pgm") {
    payload = similarity_to_pgm(s);
    if (out.empty()) out = "similarity.pgm";
  } else {
    fail(ErrorKind::usage, "unknown output format: " + args.out_format);
  }

  atomic_write_file(out, payload);
  print_matrix(s);
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

// ---- group ----------------------------------------------------------------

struct GroupArgs {
  std::string matrix;
  double threshold = 0.5;
  std::string mode = "per_task";
  std::string output = "grouping.json";
};

int run_group(const GroupArgs& args) {
  if (args.threshold < 0.0 || args.threshold > 1.0)
    fail(ErrorKind::usage, "threshold must lie in [0,1]");
  const SimilarityMatrix s = load_similarity(args.matrix);
  GroupingConfig cfg;
  cfg.threshold = args.threshold;
  cfg.value_mode = value_mode_from_string(args.mode);
  const Grouping g = select_grouping(s, cfg);

  atomic_write_file(args.output, grouping_to_json(g, s.stage, cfg.threshold));
  std::printf("%s per_task=%.3f per_group=%.3f\n", render_groups(g).c_str(), g.value_per_task,
              g.value_per_group);
  std::printf("wrote %s\n", args.output.c_str());
  return 0;
}

// ---- pdf ------------------------------------------------------------------

struct PdfRunArgs {
  bool toy = false;
  bool external = false;
  std::string spec_path;
  std::string tasks;
  int stages = 2;
  double threshold = 0.5;
  std::string mode = "per_task";
  std::string method = "cka";
  std::string trunk_widths = "16";
  std::string stage_widths;
  int epochs = 200;
  int batch = 32;
  double lr = 0.05;
  std::string optimizer = "sgd_momentum";
  std::uint64_t seed = 1;
  std::string outdir = "pdf_out";
};

void write_bundle_dumps(const fs::path& dir, const std::vector<ActivationBundle>& bundles) {
  fs::create_directories(dir);
  for (const auto& bundle : bundles)
    for (const auto& entry : bundle.entries) {
      npy::Array a;
      a.shape = {static_cast<std::size_t>(entry.n()), static_cast<std::size_t>(entry.d())};
      a.data.resize(a.element_count());
      for (Eigen::Index r = 0; r < entry.n(); ++r)
        for (Eigen::Index c = 0; c < entry.d(); ++c)
          a.data[static_cast<std::size_t>(r * entry.d() + c)] = entry.data(r, c);
      npy::save(dir / manifest_filename(ManifestEntry{entry.task, bundle.stage.index}), a);
    }
}

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& manifest) {
  json j = json::array();
  for (const auto& e : manifest)
    j.push_back({{"task", e.task.name}, {"stage", e.stage}, {"file", manifest_filename(e)}});
  atomic_write_file(path, j.dump(2) + "\n");
}

int run_pdf_toy(const PdfRunArgs& args) {
  toy::PdfToyConfig cfg;
  cfg.spec = toy::spec_from_json(read_file(args.spec_path));
  cfg.num_stages = args.stages;
  cfg.widths.trunk = parse_int_list(args.trunk_widths);
  if (args.stage_widths.empty())
    cfg.widths.stage.assign(static_cast<std::size_t>(args.stages), 16);
  else
    cfg.widths.stage = parse_int_list(args.stage_widths);
  cfg.group_cfg.threshold = args.threshold;
  cfg.group_cfg.value_mode = value_mode_from_string(args.mode);
  cfg.train_cfg.epochs = args.epochs;
  cfg.train_cfg.batch_size = args.batch;
  cfg.train_cfg.learning_rate = args.lr;
  cfg.train_cfg.optimizer = toy::optimizer_from_string(args.optimizer);
  cfg.train_cfg.seed = args.seed;

  const fs::path outdir = args.outdir;
  fs::create_directories(outdir);

  toy::ToyPdfRunner runner(cfg);
  save_session(runner.session(), outdir / "session.json");
  while (!runner.done()) {
    const int stage = runner.session().current_stage;
    std::printf("stage %d: training and measuring...\n", stage);
    const auto bundles = runner.step();
    write_bundle_dumps(outdir / "activations", bundles);
    save_session(runner.session(), outdir / "session.json");
    std::printf("stage %d grouping: %s\n", stage,
                render_groups(runner.report().stages.back().grouping).c_str());
  }
  const toy::BranchedNet& net = runner.final_net();

  atomic_write_file(outdir / "final_tree.json", tree_to_json(runner.session().tree));
  atomic_write_file(outdir / "report.json", toy::report_to_json(runner.report()));
  atomic_write_file(outdir / "net.json",
                    toy::net_to_json(net, cfg.spec, hash_mix(cfg.train_cfg.seed, "data")));

  std::printf("seed %llu, final parameters %ld\n",
              static_cast<unsigned long long>(cfg.train_cfg.seed),
              runner.report().final_param_count);
  std::printf("final tree:\n");
  for (int c = 1; c <= runner.session().tree.num_stages; ++c)
    std::printf(
        "  stage %d: %s\n", c,
        render_groups(runner.session().tree.stage_groupings[static_cast<std::size_t>(c - 1)])
            .c_str());
  std::printf("wrote %s\n", (outdir / "report.json").string().c_str());
  return 0;
}

int run_pdf_external(const PdfRunArgs& args) {
  if (args.tasks.empty()) fail(ErrorKind::usage, "--external needs --tasks");
  std::vector<TaskId> tasks;
  for (const auto& name : split(args.tasks, ',')) tasks.push_back(TaskId{name});

  GroupingConfig cfg;
  cfg.threshold = args.threshold;
  cfg.value_mode = value_mode_from_string(args.mode);

  const PdfSession session =
      init_session(tasks, args.stages, cfg, sim_method_from_string(args.method));

  const fs::path outdir = args.outdir;
  fs::create_directories(outdir);
  save_session(session, outdir / "session.json");
  write_manifest(outdir / "manifest.json", session.manifest);

  std::printf("session initialized for %zu tasks, %d stages\n", tasks.size(), args.stages);
  std::printf("awaiting activation dumps:\n");
  for (const auto& e : session.manifest) std::printf("  %s\n", manifest_filename(e).c_str());
  std::printf("dump them from your trainer, then run:\n");
  std::printf("  taskfuse pdf resume --session %s --activations <dir>\n",
              (outdir / "session.json").string().c_str());
  return 0;
}

struct PdfResumeArgs {
  std::string session_path;
  std::string activations;
};

int run_pdf_resume(const PdfResumeArgs& args) {
  PdfSession session = load_session(args.session_path);
  if (session.status == SessionStatus::complete) {
    std::printf("session is already complete\n");
    return 0;
  }

  const fs::path dir = args.activations;
  std::vector<std::string> missing;
  for (const auto& e : session.manifest)
    if (!fs::exists(dir / manifest_filename(e))) missing.push_back(manifest_filename(e));
  if (!missing.empty()) {
    std::string names;
    for (const auto& m : missing) names += (names.empty() ? "" : ", ") + m;
    fail(ErrorKind::protocol, "missing activation dumps: " + names);
  }

  std::map<std::string, ActivationMatrix> loaded;
  for (const auto& e : session.manifest)
    loaded[e.task.name] = load_activation_matrix(dir / manifest_filename(e), FileFormat::npy,
                                                 e.task, StageId{e.stage});

  const int c = session.current_stage;
  const std::vector<Group> parents =
      c == 1 ? full_grouping(session.tree.tasks).groups
             : session.tree.stage_groupings[static_cast<std::size_t>(c - 2)].groups;
  std::vector<ActivationBundle> bundles;
  for (const auto& p : parents) {
    if (p.members.size() < 2) continue;
    std::vector<ActivationMatrix> slice;
    for (const auto& m : p.members) {
      const auto it = loaded.find(m.name);
      if (it == loaded.end()) continue;
      slice.push_back(it->second);
    }
    if (slice.size() >= 2) bundles.push_back(make_bundle(StageId{c}, std::move(slice)));
  }

  const PdfSession next = progressive_step(session, bundles);
  save_session(next, args.session_path);

  std::printf("stage %d grouping: %s\n", c, render_groups(next.history.back().grouping).c_str());
  if (next.status == SessionStatus::complete) {
    const fs::path tree_path = fs::path(args.session_path).parent_path() / "final_tree.json";
    atomic_write_file(tree_path, tree_to_json(next.tree));
    std::printf("session complete; wrote %s\n", tree_path.string().c_str());
  } else {
    const fs::path manifest_path = fs::path(args.session_path).parent_path() / "manifest.json";
    write_manifest(manifest_path, next.manifest);
    std::printf("retrain with the new grouping, then dump:\n");
    for (const auto& e : next.manifest) std::printf("  %s\n", manifest_filename(e).c_str());
  }
  return 0;
}

// ---- sweep ----------------------------------------------------------------

struct SweepArgs {
  std::string matrix_dir;
  std::string thresholds = "0.0..1.0";
  double step = 0.1;
  std::string mode = "offline";
  std::string output = "sweep.json";
};

int run_sweep(const SweepArgs& args) {
  if (args.mode != "offline" && args.mode != "progressive")
    fail(ErrorKind::usage, "sweep mode must be offline or progressive");

  // stage1.json, stage2.json, ... must be contiguous from 1.
  std::vector<SimilarityMatrix> matrices;
  for (int c = 1;; ++c) {
    const fs::path path = fs::path(args.matrix_dir) / ("stage" + std::to_string(c) + ".json");
    if (!fs::exists(path)) break;
    matrices.push_back(load_similarity(path));
  }
  if (matrices.empty()) fail(ErrorKind::protocol, "no stage1.json under " + args.matrix_dir);
  {
    const int next_stage = static_cast<int>(matrices.size()) + 1;
    for (const auto& entry : fs::directory_iterator(args.matrix_dir)) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("stage", 0) == 0 && name.size() > 10 &&
          name.substr(name.size() - 5) == ".json") {
        const int k = std::atoi(name.substr(5, name.size() - 10).c_str());
        if (k > static_cast<int>(matrices.size()))
          fail(ErrorKind::protocol, name + " present but stage" + std::to_string(next_stage) +
                                        ".json missing");
      }
    }
  }

  double lo = 0.0, hi = 1.0;
  const std::size_t dots = args.thresholds.find("..");
  if (dots == std::string::npos) {
    lo = hi = std::stod(args.thresholds);
  } else {
    lo = std::stod(args.thresholds.substr(0, dots));
    hi = std::stod(args.thresholds.substr(dots + 2));
  }
  if (lo < 0.0 || hi > 1.0 || lo > hi)
    fail(ErrorKind::usage, "thresholds must lie in [0,1] with lo <= hi");
  if (args.step <= 0.0) fail(ErrorKind::usage, "step must be positive");

  json rows = json::array();
  std::printf("%5s", "tau");
  for (std::size_t c = 1; c <= matrices.size(); ++c) std::printf("  stage %zu", c);
  std::printf("\n");

  for (double tau = lo; tau <= hi + 1e-9; tau += args.step) {
    GroupingConfig cfg;
    cfg.threshold = std::min(tau, 1.0);
    const FusionTree tree = offline_plan_from_matrices(matrices, cfg);
    json row;
    row["tau"] = cfg.threshold;
    row["stages"] = json::array();
    std::printf("%5.2f", cfg.threshold);
    for (int c = 1; c <= tree.num_stages; ++c) {
      const Grouping& g = tree.stage_groupings[static_cast<std::size_t>(c - 1)];
      row["stages"].push_back(json::parse(grouping_to_json(g, StageId{c}, cfg.threshold)));
      std::printf("  %s", render_groups(g).c_str());
    }
    std::printf("\n");
    rows.push_back(row);
  }

  json table;
  table["mode"] = args.mode;
  table["num_stages"] = matrices.size();
  table["rows"] = rows;
  atomic_write_file(args.output, table.dump(2) + "\n");
  std::printf("wrote %s\n", args.output.c_str());
  return 0;
}

// ---- eval -----------------------------------------------------------------

struct ConsistencyArgs {
  std::string seg, edge, depth, normals;
  std::string output = "eval_report.json";
};

int run_consistency(const ConsistencyArgs& args) {
  for (const auto* p : {&args.seg, &args.edge, &args.depth, &args.normals})
    if (!fs::exists(*p)) fail(ErrorKind::format, "missing input file: " + *p);

  const Eigen::MatrixXd seg_raw = load_2d(args.seg);
  Eigen::MatrixXi seg(seg_raw.rows(), seg_raw.cols());
  for (Eigen::Index r = 0; r < seg_raw.rows(); ++r)
    for (Eigen::Index c = 0; c < seg_raw.cols(); ++c)
      seg(r, c) = static_cast<int>(std::llround(seg_raw(r, c)));

  const Eigen::MatrixXd edge = load_2d(args.edge);
  const Eigen::MatrixXd depth = load_2d(args.depth);

  const npy::Array normals_raw = npy::load(args.normals);
  if (normals_raw.shape.size() != 4 || normals_raw.shape[0] != 1 || normals_raw.shape[1] != 3)
    fail(ErrorKind::format, "normals must have shape (1,3,H,W): " + args.normals);
  const std::size_t h = normals_raw.shape[2];
  const std::size_t w = normals_raw.shape[3];
  eval::NormalMap normals;
  normals.nx.resize(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w));
  normals.ny.resize(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w));
  normals.nz.resize(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w));
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const auto rr = static_cast<Eigen::Index>(r);
      const auto cc = static_cast<Eigen::Index>(c);
      normals.nx(rr, cc) = normals_raw.data[0 * h * w + r * w + c];
      normals.ny(rr, cc) = normals_raw.data[1 * h * w + r * w + c];
      normals.nz(rr, cc) = normals_raw.data[2 * h * w + r * w + c];
    }

  const double semantic = eval::semantic_consistency(seg, edge);
  const double geometric = eval::geometric_consistency(depth, normals);

  json report;
  report["consistency"] = {{"semantic", semantic}, {"geometric", geometric}};
  atomic_write_file(args.output, report.dump(2) + "\n");
  std::printf("semantic %.4f geometric %.4f\n", semantic, geometric);
  std::printf("wrote %s\n", args.output.c_str());
  return 0;
}

struct AttackArgs {
  std::string model;
  std::string eps = "0.25,0.5,1,4,8";
  double step = 1.0;
  std::string task;
  int max_samples = 256;
  std::uint64_t seed = 7;
  double lo = std::numeric_limits<double>::quiet_NaN();
  double hi = std::numeric_limits<double>::quiet_NaN();
  std::string output = "eval_report.json";
};

int run_attack(const AttackArgs& args) {
  const toy::LoadedNet loaded = toy::net_from_json(read_file(args.model));
  const toy::Dataset full = toy::gen_synthetic(loaded.spec, loaded.data_seed);

  const int b = std::min<int>(args.max_samples, static_cast<int>(full.size()));
  if (b < 1) fail(ErrorKind::usage, "max_samples must be positive");
  std::vector<int> rows(static_cast<std::size_t>(b));
  std::iota(rows.begin(), rows.end(), 0);
  const Eigen::MatrixXd x = full.x.topRows(b);

  std::vector<TaskId> loss_tasks;
  if (!args.task.empty()) loss_tasks.push_back(TaskId{args.task});

  const auto objective = [&](const Eigen::MatrixXd& candidate) {
    const toy::ForwardCache cache = toy::forward(loaded.net, candidate);
    const toy::BackwardResult result =
        toy::backward(loaded.net, cache, full, rows, true, loss_tasks);
    return eval::LossAndGrad{result.loss.total, result.input_grad};
  };

  const toy::ForwardCache clean_cache = toy::forward(loaded.net, x);
  const toy::LossReport clean = toy::compute_loss(loaded.net, clean_cache, full, rows, loss_tasks);

  const double lo = std::isnan(args.lo) ? x.minCoeff() : args.lo;
  const double hi = std::isnan(args.hi) ? x.maxCoeff() : args.hi;

  json report;
  report["seed"] = args.seed;
  report["model"] = args.model;
  report["samples"] = b;
  if (!args.task.empty()) report["task"] = args.task;
  report["clean"] = {{"loss", clean.total}};
  {
    json per_task;
    for (std::size_t t = 0; t < loaded.net.tree.tasks.size(); ++t)
      per_task[loaded.net.tree.tasks[t].name] = clean.per_task[t];
    report["clean"]["per_task"] = per_task;
  }

  std::map<double, double> attacked;
  json per_eps;
  for (double eps : parse_double_list(args.eps)) {
    const eval::AttackConfig cfg = eval::AttackConfig::for_epsilon(eps, args.step);
    const Eigen::MatrixXd adv = eval::pgd_attack(objective, x, cfg, eval::Bounds{lo, hi});
    const toy::ForwardCache cache = toy::forward(loaded.net, adv);
    const toy::LossReport loss = toy::compute_loss(loaded.net, cache, full, rows, loss_tasks);
    attacked[eps] = loss.total;
    char key[32];
    std::snprintf(key, sizeof key, "%g", eps);
    per_eps[key] = {{"loss", loss.total}, {"iterations", cfg.iterations}};
    std::printf("eps %-5g iters %-3d clean %.6f attacked %.6f\n", eps, cfg.iterations, clean.total,
                loss.total);
  }
  report["pgd"] = {{"step_size", args.step}, {"per_eps", per_eps}};

  const bool has_low = std::all_of(eval::kLowBand.begin(), eval::kLowBand.end(),
                                   [&](double e) { return attacked.count(e) > 0; });
  const bool has_high = std::all_of(eval::kHighBand.begin(), eval::kHighBand.end(),
                                    [&](double e) { return attacked.count(e) > 0; });
  if (has_low) report["pgd"]["low"] = eval::band_average(attacked, eval::kLowBand);
  if (has_high) report["pgd"]["high"] = eval::band_average(attacked, eval::kHighBand);

  json per_severity;
  for (int severity = 1; severity <= 5; ++severity) {
    const Eigen::MatrixXd noisy = eval::noise_corruption(x, severity, args.seed, lo, hi);
    const toy::ForwardCache cache = toy::forward(loaded.net, noisy);
    const toy::LossReport loss = toy::compute_loss(loaded.net, cache, full, rows, loss_tasks);
    per_severity[std::to_string(severity)] = loss.total;
  }
  report["noise"] = {{"per_severity", per_severity}, {"lo", lo}, {"hi", hi}};

  atomic_write_file(args.output, report.dump(2) + "\n");
  std::printf("wrote %s\n", args.output.c_str());
  return 0;
}

struct RelImpArgs {
  double s_net = 0.0, d_net = 0.0, s_base = 0.0, d_base = 0.0;
  std::string output;
};

int run_relimp(const RelImpArgs& args) {
  const double value = eval::rel_improvement(args.s_net, args.d_net, args.s_base, args.d_base);
  std::printf("rel_improvement %.4f\n", value);
  if (!args.output.empty()) {
    json report;
    report["rel_improvement"] = value;
    atomic_write_file(args.output, report.dump(2) + "\n");
    std::printf("wrote %s\n", args.output.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"similarity-guided progressive decoder fusion toolkit"};
  app.require_subcommand(1);

  CkaArgs cka_args;
  auto* cka = app.add_subcommand("cka", "pairwise similarity matrix from activation dumps");
  cka->add_option("--inputs", cka_args.inputs, "task=path entries (npy or csv)")->required();
  cka->add_option("--stage", cka_args.stage, "candidate stage index");
  cka->add_option("--method", cka_args.method, "cka or rsa");
  cka->add_option("--pool", cka_args.pool, "spatial or channel pooling for 4-D dumps");
  cka->add_option("--out", cka_args.out_format, "artifact format: json, csv or pgm");
  cka->add_option("-o,--output", cka_args.output, "artifact path");

  GroupArgs group_args;
  auto* group = app.add_subcommand("group", "select the best grouping from a similarity matrix");
  group->add_option("--matrix", group_args.matrix, "similarity matrix json")->required();
  group->add_option("--threshold", group_args.threshold, "split groups below this value");
  group->add_option("--mode", group_args.mode, "per_task or per_group");
  group->add_option("-o,--output", group_args.output, "grouping artifact path");

  PdfRunArgs run_args;
  PdfResumeArgs resume_args;
  auto* pdf = app.add_subcommand("pdf", "progressive fuse-retrain loop");
  pdf->require_subcommand(1);
  auto* pdf_run = pdf->add_subcommand("run", "start a run (--toy or --external)");
  pdf_run->add_flag("--toy", run_args.toy, "run against the built-in trainer");
  pdf_run->add_flag("--external", run_args.external, "drive an external trainer via dumps");
  pdf_run->add_option("--spec", run_args.spec_path, "synthetic task spec json (toy mode)");
  pdf_run->add_option("--tasks", run_args.tasks, "comma-separated task names (external mode)");
  pdf_run->add_option("--stages", run_args.stages, "number of candidate stages");
  pdf_run->add_option("--threshold", run_args.threshold, "grouping threshold");
  pdf_run->add_option("--mode", run_args.mode, "per_task or per_group");
  pdf_run->add_option("--method", run_args.method, "cka or rsa");
  pdf_run->add_option("--trunk-widths", run_args.trunk_widths, "comma-separated trunk widths");
  pdf_run->add_option("--stage-widths", run_args.stage_widths, "comma-separated stage widths");
  pdf_run->add_option("--epochs", run_args.epochs, "epochs per retrain round");
  pdf_run->add_option("--batch", run_args.batch, "batch size");
  pdf_run->add_option("--lr", run_args.lr, "learning rate");
  pdf_run->add_option("--optimizer", run_args.optimizer, "sgd, sgd_momentum or adam_like");
  pdf_run->add_option("--seed", run_args.seed, "run seed (data, init and shuffling)");
  pdf_run->add_option("-o,--outdir", run_args.outdir, "output directory");
  auto* pdf_resume = pdf->add_subcommand("resume", "consume dumps and advance one stage");
  pdf_resume->add_option("--session", resume_args.session_path, "session json")->required();
  pdf_resume->add_option("--activations", resume_args.activations, "directory of dumps")
      ->required();

  SweepArgs sweep_args;
  auto* sweep = app.add_subcommand("sweep", "grouping table across thresholds");
  sweep->add_option("--matrix-dir", sweep_args.matrix_dir,
                    "directory holding stage1.json, stage2.json, ...")
      ->required();
  sweep->add_option("--thresholds", sweep_args.thresholds, "range lo..hi or a single value");
  sweep->add_option("--step", sweep_args.step, "threshold step");
  sweep->add_option("--mode", sweep_args.mode, "offline or progressive (recorded in the table)");
  sweep->add_option("-o,--output", sweep_args.output, "table artifact path");

  ConsistencyArgs consistency_args;
  AttackArgs attack_args;
  RelImpArgs relimp_args;
  auto* ev = app.add_subcommand("eval", "evaluation kit");
  ev->require_subcommand(1);
  auto* consistency = ev->add_subcommand("consistency", "inter-task prediction consistency");
  consistency->add_option("--seg", consistency_args.seg, "segmentation labels, rank-2 npy")
      ->required();
  consistency->add_option("--edge", consistency_args.edge, "edge probabilities, rank-2 npy")
      ->required();
  consistency->add_option("--depth", consistency_args.depth, "depth map, rank-2 npy")->required();
  consistency->add_option("--normals", consistency_args.normals, "normals, (1,3,H,W) npy")
      ->required();
  consistency->add_option("-o,--output", consistency_args.output, "report path");
  auto* attack = ev->add_subcommand("attack", "PGD attack and noise corruption on a toy net");
  attack->add_option("--model", attack_args.model, "net json written by pdf run --toy")
      ->required();
  attack->add_option("--eps", attack_args.eps, "comma-separated epsilon list");
  attack->add_option("--step", attack_args.step, "attack step size in input units");
  attack->add_option("--task", attack_args.task, "attack objective task (default: all)");
  attack->add_option("--max-samples", attack_args.max_samples, "attack batch cap");
  attack->add_option("--seed", attack_args.seed, "noise corruption seed");
  attack->add_option("--lo", attack_args.lo, "input lower bound (default: data minimum)");
  attack->add_option("--hi", attack_args.hi, "input upper bound (default: data maximum)");
  attack->add_option("-o,--output", attack_args.output, "report path");
  auto* relimp = ev->add_subcommand("relimp", "relative improvement over a baseline");
  relimp->add_option("--s-net", relimp_args.s_net, "network higher-is-better metric")->required();
  relimp->add_option("--d-net", relimp_args.d_net, "network lower-is-better metric")->required();
  relimp->add_option("--s-base", relimp_args.s_base, "baseline higher-is-better metric")
      ->required();
  relimp->add_option("--d-base", relimp_args.d_base, "baseline lower-is-better metric")
      ->required();
  relimp->add_option("-o,--output", relimp_args.output, "report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (cka->parsed()) return run_cka(cka_args);
    if (group->parsed()) return run_group(group_args);
    if (pdf->parsed()) {
      if (pdf_run->parsed()) {
        if (run_args.toy == run_args.external)
          fail(ErrorKind::usage, "pick exactly one of --toy or --external");
        if (run_args.toy) {
          if (run_args.spec_path.empty()) fail(ErrorKind::usage, "--toy needs --spec");
          return run_pdf_toy(run_args);
        }
        return run_pdf_external(run_args);
      }
      if (pdf_resume->parsed()) return run_pdf_resume(resume_args);
    }
    if (sweep->parsed()) return run_sweep(sweep_args);
    if (ev->parsed()) {
      if (consistency->parsed()) return run_consistency(consistency_args);
      if (attack->parsed()) return run_attack(attack_args);
      if (relimp->parsed()) return run_relimp(relimp_args);
    }
    fail(ErrorKind::usage, "no subcommand given");
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
