#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "taskfuse/similarity.hpp"

namespace taskfuse {

enum class ValueMode { per_group, per_task };

std::string to_string(ValueMode mode);
ValueMode value_mode_from_string(const std::string& s);

struct Group {
  std::vector<TaskId> members;  // ordered by task position in the matrix
  double value = 0.0;           // mean of members' task values; 0 for singletons
};

struct Grouping {
  std::vector<Group> groups;
  double value_per_group = 0.0;  // mean of group values
  double value_per_task = 0.0;   // mean of task values over all tasks
  ValueMode mode = ValueMode::per_task;

  std::size_t task_count() const;
  bool all_singletons() const;
};

struct GroupingConfig {
  double threshold = 0.5;  // multi-task groups below this split into singletons
  ValueMode value_mode = ValueMode::per_task;
  // Ties: fewer groups first, then lexicographic by sorted member lists.
};

// Hard cap on exhaustive set-partition search; Bell(12) = 4,213,597.
inline constexpr int kPartitionCap = 12;

// Visits every set partition of {0..t-1} exactly once, in lexicographic
// restricted-growth-string order. The span holds the block code of each
// element and is only valid during the call.
void for_each_partition(int t, const std::function<void(std::span<const int>)>& visit);

using Partition = std::vector<std::vector<TaskId>>;

// Materialized variant; meant for small task sets.
std::vector<Partition> enumerate_partitions(const std::vector<TaskId>& tasks);

// Mean similarity between t and the other members of g; 0 for singletons.
double task_value(const TaskId& t, const Group& g, const SimilarityMatrix& s);

// (mean over groups of V_G, mean over all tasks of V_t).
std::pair<double, double> grouping_value(const Grouping& grouping);

// Splits every multi-task group whose value is below cfg.threshold into
// singletons and recomputes all values against s.
Grouping apply_threshold(const Grouping& grouping, const GroupingConfig& cfg,
                         const SimilarityMatrix& s);

// Exhaustive search for the partition maximizing the configured aggregate,
// followed by threshold splitting. Deterministic for a given input.
Grouping select_grouping(const SimilarityMatrix& s, const GroupingConfig& cfg);

std::string grouping_to_json(const Grouping& g, StageId stage, double threshold);

}  // namespace taskfuse
