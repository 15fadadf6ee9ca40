#include "taskfuse/grouping.hpp"

#include <algorithm>
#include <array>
#include <limits>

#include <nlohmann/json.hpp>

namespace taskfuse {

using nlohmann::json;

std::string to_string(ValueMode mode) {
  return mode == ValueMode::per_group ? "per_group" : "per_task";
}

ValueMode value_mode_from_string(const std::string& s) {
  if (s == "per_group") return ValueMode::per_group;
  if (s == "per_task") return ValueMode::per_task;
  fail(ErrorKind::usage, "unknown value mode: " + s);
}

std::size_t Grouping::task_count() const {
  std::size_t n = 0;
  for (const auto& g : groups) n += g.members.size();
  return n;
}

bool Grouping::all_singletons() const {
  return std::all_of(groups.begin(), groups.end(),
                     [](const Group& g) { return g.members.size() == 1; });
}

void for_each_partition(int t, const std::function<void(std::span<const int>)>& visit) {
  if (t < 1)
    fail(ErrorKind::usage, "partition enumeration needs at least 1 task");
  if (t > kPartitionCap)
    fail(ErrorKind::usage, "partition enumeration capped at " +
                               std::to_string(kPartitionCap) + " tasks, got " +
                               std::to_string(t));

  // Restricted growth strings in lexicographic order: a[0] = 0 and
  // a[i] <= max(a[0..i-1]) + 1.
  std::vector<int> code(static_cast<std::size_t>(t), 0);
  std::vector<int> prefix_max(static_cast<std::size_t>(t), 0);
  for (;;) {
    visit(std::span<const int>(code));
    int i = t - 1;
    while (i > 0 && code[i] > prefix_max[i - 1]) --i;
    if (i == 0) return;
    ++code[i];
    prefix_max[i] = std::max(prefix_max[i - 1], code[i]);
    for (int j = i + 1; j < t; ++j) {
      code[j] = 0;
      prefix_max[j] = prefix_max[j - 1];
    }
  }
}

std::vector<Partition> enumerate_partitions(const std::vector<TaskId>& tasks) {
  const int t = static_cast<int>(tasks.size());
  std::vector<Partition> out;
  for_each_partition(t, [&](std::span<const int> code) {
    int blocks = 0;
    for (int c : code) blocks = std::max(blocks, c + 1);
    Partition p(static_cast<std::size_t>(blocks));
    for (int i = 0; i < t; ++i) p[static_cast<std::size_t>(code[i])].push_back(tasks[i]);
    out.push_back(std::move(p));
  });
  return out;
}

double task_value(const TaskId& t, const Group& g, const SimilarityMatrix& s) {
  const int ti = s.index_of(t);
  if (ti < 0) fail(ErrorKind::membership, "task not in similarity matrix: " + t.name);
  bool member = false;
  double sum = 0.0;
  int peers = 0;
  for (const auto& other : g.members) {
    if (other == t) {
      member = true;
      continue;
    }
    const int oi = s.index_of(other);
    if (oi < 0) fail(ErrorKind::membership, "task not in similarity matrix: " + other.name);
    sum += s.values(ti, oi);
    ++peers;
  }
  if (!member) fail(ErrorKind::membership, "task " + t.name + " is not a member of the group");
  return peers == 0 ? 0.0 : sum / static_cast<double>(peers);
}

std::pair<double, double> grouping_value(const Grouping& grouping) {
  if (grouping.groups.empty()) return {0.0, 0.0};
  double group_sum = 0.0;
  double task_sum = 0.0;
  std::size_t tasks = 0;
  for (const auto& g : grouping.groups) {
    group_sum += g.value;
    task_sum += g.value * static_cast<double>(g.members.size());
    tasks += g.members.size();
  }
  return {group_sum / static_cast<double>(grouping.groups.size()),
          task_sum / static_cast<double>(tasks)};
}

namespace {

// Canonical order: members by task position, groups by first member.
void canonicalize(Grouping& grouping, const SimilarityMatrix& s) {
  for (auto& g : grouping.groups)
    std::sort(g.members.begin(), g.members.end(),
              [&](const TaskId& a, const TaskId& b) { return s.index_of(a) < s.index_of(b); });
  std::sort(grouping.groups.begin(), grouping.groups.end(),
            [&](const Group& a, const Group& b) {
              return s.index_of(a.members.front()) < s.index_of(b.members.front());
            });
}

void recompute_values(Grouping& grouping, const SimilarityMatrix& s) {
  for (auto& g : grouping.groups) {
    double sum = 0.0;
    for (const auto& m : g.members) sum += task_value(m, g, s);
    g.value = g.members.size() <= 1 ? 0.0 : sum / static_cast<double>(g.members.size());
  }
  const auto [per_group, per_task] = grouping_value(grouping);
  grouping.value_per_group = per_group;
  grouping.value_per_task = per_task;
}

}  // namespace

Grouping apply_threshold(const Grouping& grouping, const GroupingConfig& cfg,
                         const SimilarityMatrix& s) {
  Grouping out;
  out.mode = cfg.value_mode;
  for (const auto& g : grouping.groups) {
    if (g.members.size() >= 2 && g.value < cfg.threshold) {
      for (const auto& m : g.members) out.groups.push_back(Group{{m}, 0.0});
    } else {
      out.groups.push_back(g);
    }
  }
  canonicalize(out, s);
  recompute_values(out, s);
  return out;
}

Grouping select_grouping(const SimilarityMatrix& s, const GroupingConfig& cfg) {
  const int t = s.task_count();
  if (t < 1) fail(ErrorKind::usage, "similarity matrix has no tasks");
  if (t > kPartitionCap)
    fail(ErrorKind::usage, "grouping search capped at " + std::to_string(kPartitionCap) +
                               " tasks, got " + std::to_string(t));
  if (!s.values.allFinite())
    fail(ErrorKind::data, "similarity matrix has non-finite values");

  std::array<int, kPartitionCap> count{};
  std::array<double, kPartitionCap> value_sum{};

  double best_value = -std::numeric_limits<double>::infinity();
  int best_blocks = 0;
  std::vector<int> best_code;
  std::vector<std::vector<int>> best_blocks_list;

  auto blocks_of = [&](std::span<const int> code) {
    int blocks = 0;
    for (int c : code) blocks = std::max(blocks, c + 1);
    std::vector<std::vector<int>> out(static_cast<std::size_t>(blocks));
    for (int i = 0; i < t; ++i) out[static_cast<std::size_t>(code[i])].push_back(i);
    return out;
  };

  for_each_partition(t, [&](std::span<const int> code) {
    int blocks = 0;
    for (int i = 0; i < t; ++i) {
      const int b = code[i];
      blocks = std::max(blocks, b + 1);
    }
    count.fill(0);
    value_sum.fill(0.0);
    for (int i = 0; i < t; ++i) ++count[static_cast<std::size_t>(code[i])];

    // V_t per task, accumulated into its block.
    double per_task_sum = 0.0;
    for (int i = 0; i < t; ++i) {
      const int b = code[i];
      if (count[static_cast<std::size_t>(b)] <= 1) continue;
      double sum = 0.0;
      for (int j = 0; j < t; ++j)
        if (j != i && code[j] == b) sum += s.values(i, j);
      const double vt = sum / static_cast<double>(count[static_cast<std::size_t>(b)] - 1);
      value_sum[static_cast<std::size_t>(b)] += vt;
      per_task_sum += vt;
    }
    double per_group_sum = 0.0;
    for (int b = 0; b < blocks; ++b)
      if (count[static_cast<std::size_t>(b)] > 1)
        per_group_sum += value_sum[static_cast<std::size_t>(b)] /
                         static_cast<double>(count[static_cast<std::size_t>(b)]);

    const double value = cfg.value_mode == ValueMode::per_task
                             ? per_task_sum / static_cast<double>(t)
                             : per_group_sum / static_cast<double>(blocks);

    bool take = false;
    if (value > best_value) {
      take = true;
    } else if (value == best_value) {
      if (blocks < best_blocks) {
        take = true;
      } else if (blocks == best_blocks) {
        auto candidate = blocks_of(code);
        if (best_blocks_list.empty()) best_blocks_list = blocks_of(best_code);
        if (candidate < best_blocks_list) {
          best_blocks_list = std::move(candidate);
          best_code.assign(code.begin(), code.end());
          best_value = value;
          best_blocks = blocks;
        }
        return;
      }
    }
    if (take) {
      best_value = value;
      best_blocks = blocks;
      best_code.assign(code.begin(), code.end());
      best_blocks_list.clear();
    }
  });

  Grouping out;
  out.mode = cfg.value_mode;
  out.groups.resize(static_cast<std::size_t>(best_blocks));
  for (int i = 0; i < t; ++i)
    out.groups[static_cast<std::size_t>(best_code[i])].members.push_back(s.tasks[i]);
  canonicalize(out, s);
  recompute_values(out, s);
  return apply_threshold(out, cfg, s);
}

std::string grouping_to_json(const Grouping& g, StageId stage, double threshold) {
  json j;
  j["stage"] = stage.index;
  j["mode"] = to_string(g.mode);
  j["threshold"] = threshold;
  j["groups"] = json::array();
  for (const auto& group : g.groups) {
    json members = json::array();
    for (const auto& m : group.members) members.push_back(m.name);
    j["groups"].push_back({{"members", members}, {"value", group.value}});
  }
  j["value_per_group"] = g.value_per_group;
  j["value_per_task"] = g.value_per_task;
  return j.dump(2) + "\n";
}

}  // namespace taskfuse
