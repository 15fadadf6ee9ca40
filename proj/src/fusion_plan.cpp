#include "taskfuse/fusion_plan.hpp"

#include <algorithm>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "taskfuse/util.hpp"

namespace taskfuse {

using nlohmann::json;

namespace {

constexpr const char* kSessionVersion = "1";

int index_of(const std::vector<TaskId>& tasks, const TaskId& t) {
  for (std::size_t i = 0; i < tasks.size(); ++i)
    if (tasks[i] == t) return static_cast<int>(i);
  return -1;
}

void validate_tasks(const std::vector<TaskId>& tasks) {
  std::set<TaskId> seen;
  for (const auto& t : tasks) {
    if (t.name.empty()) fail(ErrorKind::identity, "empty task name");
    if (!seen.insert(t).second) fail(ErrorKind::identity, "duplicate task id: " + t.name);
  }
}

bool is_partition(const Grouping& grouping, const std::vector<TaskId>& tasks) {
  std::set<TaskId> seen;
  std::size_t total = 0;
  for (const auto& g : grouping.groups) {
    if (g.members.empty()) return false;
    for (const auto& m : g.members) {
      if (index_of(tasks, m) < 0) return false;
      if (!seen.insert(m).second) return false;
      ++total;
    }
  }
  return total == tasks.size();
}

// Orders groups by first member position and members by task position.
void canonicalize_groups(Grouping& grouping, const std::vector<TaskId>& tasks) {
  for (auto& g : grouping.groups)
    std::sort(g.members.begin(), g.members.end(), [&](const TaskId& a, const TaskId& b) {
      return index_of(tasks, a) < index_of(tasks, b);
    });
  std::sort(grouping.groups.begin(), grouping.groups.end(),
            [&](const Group& a, const Group& b) {
              return index_of(tasks, a.members.front()) < index_of(tasks, b.members.front());
            });
}

// Merges per-parent results (selected groupings for multi-task parents,
// pass-through singletons) into one stage grouping.
Grouping assemble_stage(const std::vector<Group>& parents,
                        const std::map<int, Grouping>& selected,
                        const std::vector<TaskId>& tasks, ValueMode mode) {
  Grouping out;
  out.mode = mode;
  for (std::size_t p = 0; p < parents.size(); ++p) {
    const auto it = selected.find(static_cast<int>(p));
    if (it == selected.end()) {
      out.groups.push_back(Group{parents[p].members, 0.0});
    } else {
      for (const auto& g : it->second.groups) out.groups.push_back(g);
    }
  }
  canonicalize_groups(out, tasks);
  double group_sum = 0.0, task_sum = 0.0;
  for (const auto& g : out.groups) {
    group_sum += g.value;
    task_sum += g.value * static_cast<double>(g.members.size());
  }
  out.value_per_group =
      out.groups.empty() ? 0.0 : group_sum / static_cast<double>(out.groups.size());
  out.value_per_task = tasks.empty() ? 0.0 : task_sum / static_cast<double>(tasks.size());
  return out;
}

json grouping_to_json_obj(const Grouping& g) {
  json j;
  j["mode"] = to_string(g.mode);
  j["groups"] = json::array();
  for (const auto& group : g.groups) {
    json members = json::array();
    for (const auto& m : group.members) members.push_back(m.name);
    j["groups"].push_back({{"members", members}, {"value", group.value}});
  }
  j["value_per_group"] = g.value_per_group;
  j["value_per_task"] = g.value_per_task;
  return j;
}

Grouping grouping_from_json_obj(const json& j) {
  Grouping g;
  g.mode = value_mode_from_string(j.at("mode").get<std::string>());
  for (const auto& group : j.at("groups")) {
    Group out;
    for (const auto& m : group.at("members")) out.members.push_back(TaskId{m.get<std::string>()});
    out.value = group.at("value").get<double>();
    g.groups.push_back(std::move(out));
  }
  g.value_per_group = j.at("value_per_group").get<double>();
  g.value_per_task = j.at("value_per_task").get<double>();
  return g;
}

json matrix_to_json_obj(const SimilarityMatrix& s) {
  return json::parse(similarity_to_json(s));
}

SimilarityMatrix matrix_from_json_obj(const json& j) { return similarity_from_json(j.dump()); }

json tree_to_json_obj(const FusionTree& tree) {
  json j;
  j["tasks"] = json::array();
  for (const auto& t : tree.tasks) j["tasks"].push_back(t.name);
  j["num_stages"] = tree.num_stages;
  j["stage_groupings"] = json::array();
  for (const auto& g : tree.stage_groupings)
    j["stage_groupings"].push_back(grouping_to_json_obj(g));
  return j;
}

FusionTree tree_from_json_obj(const json& j) {
  FusionTree tree;
  for (const auto& t : j.at("tasks")) tree.tasks.push_back(TaskId{t.get<std::string>()});
  tree.num_stages = j.at("num_stages").get<int>();
  for (const auto& g : j.at("stage_groupings"))
    tree.stage_groupings.push_back(grouping_from_json_obj(g));
  return tree;
}

}  // namespace

Grouping full_grouping(const std::vector<TaskId>& tasks) {
  Grouping g;
  g.groups.push_back(Group{tasks, 0.0});
  return g;
}

Grouping singleton_grouping(const std::vector<TaskId>& tasks) {
  Grouping g;
  for (const auto& t : tasks) g.groups.push_back(Group{{t}, 0.0});
  return g;
}

FusionTree singleton_tree(const std::vector<TaskId>& tasks, int num_stages) {
  FusionTree tree;
  tree.tasks = tasks;
  tree.num_stages = num_stages;
  tree.stage_groupings.assign(static_cast<std::size_t>(num_stages), singleton_grouping(tasks));
  return tree;
}

bool refine_check(const FusionTree& tree) {
  if (tree.num_stages < 1 ||
      tree.stage_groupings.size() != static_cast<std::size_t>(tree.num_stages))
    return false;
  for (const auto& g : tree.stage_groupings)
    if (!is_partition(g, tree.tasks)) return false;

  for (int c = 1; c < tree.num_stages; ++c) {
    const Grouping& prev = tree.stage_groupings[static_cast<std::size_t>(c - 1)];
    for (const auto& g : tree.stage_groupings[static_cast<std::size_t>(c)].groups) {
      // The whole group must sit inside a single previous-stage group.
      const Group* home = nullptr;
      for (const auto& p : prev.groups)
        if (std::find(p.members.begin(), p.members.end(), g.members.front()) !=
            p.members.end()) {
          home = &p;
          break;
        }
      if (!home) return false;
      for (const auto& m : g.members)
        if (std::find(home->members.begin(), home->members.end(), m) == home->members.end())
          return false;
    }
  }
  return true;
}

std::string to_string(SessionStatus status) {
  switch (status) {
    case SessionStatus::awaiting_activations:
      return "awaiting_activations";
    case SessionStatus::grouped:
      return "grouped";
    case SessionStatus::complete:
      return "complete";
  }
  return "unknown";
}

SessionStatus session_status_from_string(const std::string& s) {
  if (s == "awaiting_activations") return SessionStatus::awaiting_activations;
  if (s == "grouped") return SessionStatus::grouped;
  if (s == "complete") return SessionStatus::complete;
  fail(ErrorKind::format, "unknown session status: " + s);
}

PdfSession init_session(const std::vector<TaskId>& tasks, int num_stages,
                        const GroupingConfig& config, SimMethod method) {
  if (tasks.size() < 2)
    fail(ErrorKind::size,
         "a session needs at least 2 tasks, got " + std::to_string(tasks.size()));
  if (num_stages < 1) fail(ErrorKind::size, "a session needs at least 1 candidate stage");
  validate_tasks(tasks);

  PdfSession session;
  session.tree = singleton_tree(tasks, num_stages);
  session.current_stage = 1;
  session.status = SessionStatus::awaiting_activations;
  session.config = config;
  session.method = method;
  for (const auto& t : tasks) session.manifest.push_back(ManifestEntry{t, 1});
  return session;
}

PdfSession progressive_step(const PdfSession& session,
                            const std::vector<ActivationBundle>& bundles) {
  if (session.status != SessionStatus::awaiting_activations)
    fail(ErrorKind::protocol, "session is not awaiting activations (status " +
                                  to_string(session.status) + ")");
  const int c = session.current_stage;
  const std::vector<TaskId>& tasks = session.tree.tasks;

  const std::vector<Group> parents =
      c == 1 ? full_grouping(tasks).groups
             : session.tree.stage_groupings[static_cast<std::size_t>(c - 2)].groups;

  // The provided bundles must carry exactly the manifest tasks at the
  // current stage.
  std::set<TaskId> expected;
  for (const auto& e : session.manifest) {
    if (e.stage != c)
      fail(ErrorKind::protocol, "manifest entry for stage " + std::to_string(e.stage) +
                                    " in a session at stage " + std::to_string(c));
    expected.insert(e.task);
  }
  std::set<TaskId> provided;
  for (const auto& b : bundles) {
    if (b.stage.index != c)
      fail(ErrorKind::protocol, "bundle for stage " + std::to_string(b.stage.index) +
                                    ", expected stage " + std::to_string(c));
    for (const auto& e : b.entries)
      if (!provided.insert(e.task).second)
        fail(ErrorKind::protocol, "task " + e.task.name + " appears in two bundles");
  }
  if (provided != expected) {
    std::string missing, extra;
    for (const auto& t : expected)
      if (!provided.count(t)) missing += (missing.empty() ? "" : ", ") + t.name;
    for (const auto& t : provided)
      if (!expected.count(t)) extra += (extra.empty() ? "" : ", ") + t.name;
    fail(ErrorKind::protocol, "bundles do not match the manifest" +
                                  (missing.empty() ? "" : "; missing: " + missing) +
                                  (extra.empty() ? "" : "; unexpected: " + extra));
  }

  // Match each multi-task parent with the bundle holding its member set,
  // measure it, and group within it. Singleton parents pass through.
  PdfSession next = session;
  StageRecord record;
  record.stage = c;
  std::map<int, Grouping> selected;
  for (std::size_t p = 0; p < parents.size(); ++p) {
    if (parents[p].members.size() < 2) continue;
    const std::set<TaskId> want(parents[p].members.begin(), parents[p].members.end());
    const ActivationBundle* match = nullptr;
    for (const auto& b : bundles) {
      const auto bt = b.tasks();
      if (std::set<TaskId>(bt.begin(), bt.end()) == want) {
        match = &b;
        break;
      }
    }
    if (!match) {
      std::string names;
      for (const auto& m : parents[p].members) names += (names.empty() ? "" : ",") + m.name;
      fail(ErrorKind::protocol, "no bundle covers parent group {" + names + "}");
    }
    SimilarityMatrix s = pairwise_similarity(*match, session.method);
    record.matrices.push_back(s);
    selected[static_cast<int>(p)] = select_grouping(s, session.config);
  }

  Grouping stage_grouping = assemble_stage(parents, selected, tasks, session.config.value_mode);
  next.tree.stage_groupings[static_cast<std::size_t>(c - 1)] = stage_grouping;
  record.grouping = stage_grouping;
  next.history.push_back(std::move(record));

  if (c == session.tree.num_stages || stage_grouping.all_singletons()) {
    next.status = SessionStatus::complete;
    next.current_stage = c;
    next.manifest.clear();
  } else {
    next.status = SessionStatus::awaiting_activations;
    next.current_stage = c + 1;
    next.manifest.clear();
    for (const auto& g : stage_grouping.groups)
      if (g.members.size() >= 2)
        for (const auto& m : g.members) next.manifest.push_back(ManifestEntry{m, c + 1});
  }
  return next;
}

FusionTree offline_plan_from_matrices(const std::vector<SimilarityMatrix>& stage_matrices,
                                      const GroupingConfig& cfg) {
  if (stage_matrices.empty()) fail(ErrorKind::protocol, "no stage matrices given");
  const std::vector<TaskId> tasks = stage_matrices.front().tasks;
  validate_tasks(tasks);
  const int num_stages = static_cast<int>(stage_matrices.size());

  FusionTree tree;
  tree.tasks = tasks;
  tree.num_stages = num_stages;

  std::vector<Group> parents = full_grouping(tasks).groups;
  for (int c = 1; c <= num_stages; ++c) {
    const SimilarityMatrix& s = stage_matrices[static_cast<std::size_t>(c - 1)];
    for (const auto& t : tasks)
      if (s.index_of(t) < 0)
        fail(ErrorKind::protocol,
             "stage " + std::to_string(c) + " matrix does not cover task " + t.name);
    std::map<int, Grouping> selected;
    for (std::size_t p = 0; p < parents.size(); ++p) {
      if (parents[p].members.size() < 2) continue;
      selected[static_cast<int>(p)] = select_grouping(restrict_to(s, parents[p].members), cfg);
    }
    Grouping stage_grouping = assemble_stage(parents, selected, tasks, cfg.value_mode);
    tree.stage_groupings.push_back(stage_grouping);
    parents = stage_grouping.groups;
  }
  return tree;
}

FusionTree offline_plan(const std::vector<ActivationBundle>& bundles,
                        const GroupingConfig& cfg, SimMethod method) {
  if (bundles.empty()) fail(ErrorKind::protocol, "no stage bundles given");
  std::vector<SimilarityMatrix> matrices;
  matrices.reserve(bundles.size());
  for (std::size_t c = 0; c < bundles.size(); ++c) {
    if (bundles[c].stage.index != static_cast<int>(c) + 1)
      fail(ErrorKind::protocol, "bundle " + std::to_string(c) + " is for stage " +
                                    std::to_string(bundles[c].stage.index) + ", expected " +
                                    std::to_string(c + 1));
    matrices.push_back(pairwise_similarity(bundles[c], method));
  }
  return offline_plan_from_matrices(matrices, cfg);
}

std::string session_to_json(const PdfSession& session) {
  json j;
  j["version"] = kSessionVersion;
  j["tasks"] = json::array();
  for (const auto& t : session.tree.tasks) j["tasks"].push_back(t.name);
  j["num_stages"] = session.tree.num_stages;
  j["current_stage"] = session.current_stage;
  j["status"] = to_string(session.status);
  j["manifest"] = json::array();
  for (const auto& e : session.manifest)
    j["manifest"].push_back({{"task", e.task.name}, {"stage", e.stage}});
  j["config"] = {{"threshold", session.config.threshold},
                 {"value_mode", to_string(session.config.value_mode)},
                 {"method", to_string(session.method)}};
  j["stage_groupings"] = json::array();
  for (const auto& g : session.tree.stage_groupings)
    j["stage_groupings"].push_back(grouping_to_json_obj(g));
  j["history"] = json::array();
  for (const auto& r : session.history) {
    json matrices = json::array();
    for (const auto& m : r.matrices) matrices.push_back(matrix_to_json_obj(m));
    j["history"].push_back({{"stage", r.stage},
                            {"matrices", matrices},
                            {"grouping", grouping_to_json_obj(r.grouping)}});
  }
  return j.dump(2) + "\n";
}

PdfSession session_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("bad session json: ") + e.what());
  }
  try {
    const std::string version = j.at("version").get<std::string>();
    if (version != kSessionVersion)
      fail(ErrorKind::version, "session schema version '" + version +
                                   "' is not supported (want '" + kSessionVersion + "')");
    PdfSession session;
    for (const auto& t : j.at("tasks")) session.tree.tasks.push_back(TaskId{t.get<std::string>()});
    session.tree.num_stages = j.at("num_stages").get<int>();
    session.current_stage = j.at("current_stage").get<int>();
    session.status = session_status_from_string(j.at("status").get<std::string>());
    for (const auto& e : j.at("manifest"))
      session.manifest.push_back(
          ManifestEntry{TaskId{e.at("task").get<std::string>()}, e.at("stage").get<int>()});
    const auto& cfg = j.at("config");
    session.config.threshold = cfg.at("threshold").get<double>();
    session.config.value_mode = value_mode_from_string(cfg.at("value_mode").get<std::string>());
    session.method = sim_method_from_string(cfg.at("method").get<std::string>());
    for (const auto& g : j.at("stage_groupings"))
      session.tree.stage_groupings.push_back(grouping_from_json_obj(g));
    for (const auto& r : j.at("history")) {
      StageRecord record;
      record.stage = r.at("stage").get<int>();
      for (const auto& m : r.at("matrices")) record.matrices.push_back(matrix_from_json_obj(m));
      record.grouping = grouping_from_json_obj(r.at("grouping"));
      session.history.push_back(std::move(record));
    }
    if (!refine_check(session.tree))
      fail(ErrorKind::topology, "session tree fails the refinement check");
    return session;
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("bad session json: ") + e.what());
  }
}

void save_session(const PdfSession& session, const std::filesystem::path& path) {
  atomic_write_file(path, session_to_json(session));
}

PdfSession load_session(const std::filesystem::path& path) {
  return session_from_json(read_file(path));
}

std::string tree_to_json(const FusionTree& tree) { return tree_to_json_obj(tree).dump(2) + "\n"; }

FusionTree tree_from_json(const std::string& text) {
  try {
    return tree_from_json_obj(json::parse(text));
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("bad tree json: ") + e.what());
  }
}

bool trees_equal(const FusionTree& a, const FusionTree& b) {
  if (a.tasks != b.tasks || a.num_stages != b.num_stages ||
      a.stage_groupings.size() != b.stage_groupings.size())
    return false;
  for (std::size_t c = 0; c < a.stage_groupings.size(); ++c) {
    const auto& ga = a.stage_groupings[c];
    const auto& gb = b.stage_groupings[c];
    if (ga.groups.size() != gb.groups.size()) return false;
    for (std::size_t g = 0; g < ga.groups.size(); ++g)
      if (ga.groups[g].members != gb.groups[g].members ||
          ga.groups[g].value != gb.groups[g].value)
        return false;
    if (ga.value_per_group != gb.value_per_group || ga.value_per_task != gb.value_per_task)
      return false;
  }
  return true;
}

bool sessions_equal(const PdfSession& a, const PdfSession& b) {
  if (!trees_equal(a.tree, b.tree)) return false;
  if (a.current_stage != b.current_stage || a.status != b.status) return false;
  if (a.manifest != b.manifest) return false;
  if (a.config.threshold != b.config.threshold ||
      a.config.value_mode != b.config.value_mode || a.method != b.method)
    return false;
  if (a.history.size() != b.history.size()) return false;
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    const auto& ra = a.history[i];
    const auto& rb = b.history[i];
    if (ra.stage != rb.stage || ra.matrices.size() != rb.matrices.size()) return false;
    for (std::size_t m = 0; m < ra.matrices.size(); ++m) {
      if (ra.matrices[m].tasks != rb.matrices[m].tasks) return false;
      if (ra.matrices[m].method != rb.matrices[m].method) return false;
      if (ra.matrices[m].stage != rb.matrices[m].stage) return false;
      if ((ra.matrices[m].values.array() != rb.matrices[m].values.array()).any()) return false;
    }
    if (ra.grouping.groups.size() != rb.grouping.groups.size()) return false;
    for (std::size_t g = 0; g < ra.grouping.groups.size(); ++g)
      if (ra.grouping.groups[g].members != rb.grouping.groups[g].members ||
          ra.grouping.groups[g].value != rb.grouping.groups[g].value)
        return false;
  }
  return true;
}

}  // namespace taskfuse
