#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "taskfuse/grouping.hpp"

namespace taskfuse {

// Per-stage groupings forming a refinement chain. Stage 0 (the shared
// encoder) is implicit: one group holding every task. stage_groupings[c-1]
// is the grouping at candidate stage c.
struct FusionTree {
  std::vector<TaskId> tasks;
  int num_stages = 0;
  std::vector<Grouping> stage_groupings;
};

// All tasks in one group, value 0.
Grouping full_grouping(const std::vector<TaskId>& tasks);
// Every task in its own group.
Grouping singleton_grouping(const std::vector<TaskId>& tasks);

FusionTree singleton_tree(const std::vector<TaskId>& tasks, int num_stages);

// True iff every stage is a partition of the task set and every group is a
// subset of one group of the previous stage.
bool refine_check(const FusionTree& tree);

enum class SessionStatus { awaiting_activations, grouped, complete };

std::string to_string(SessionStatus status);
SessionStatus session_status_from_string(const std::string& s);

struct ManifestEntry {
  TaskId task;
  int stage = 0;
  bool operator==(const ManifestEntry&) const = default;
};

inline std::string manifest_filename(const ManifestEntry& e) {
  return e.task.name + "_stage" + std::to_string(e.stage) + ".npy";
}

// One completed stage: the matrices measured per multi-task parent group
// and the grouping that was fixed.
struct StageRecord {
  int stage = 0;
  std::vector<SimilarityMatrix> matrices;
  Grouping grouping;
};

// Resumable state of the progressive loop. The tree is fixed for stages
// below current_stage and provisional (all singletons) beyond it.
struct PdfSession {
  FusionTree tree;
  int current_stage = 1;
  SessionStatus status = SessionStatus::awaiting_activations;
  std::vector<ManifestEntry> manifest;
  GroupingConfig config;
  SimMethod method = SimMethod::cka_unbiased;
  std::vector<StageRecord> history;
};

PdfSession init_session(const std::vector<TaskId>& tasks, int num_stages,
                        const GroupingConfig& config,
                        SimMethod method = SimMethod::cka_unbiased);

// Parent groups whose stage-(current-1) group has at least two tasks must be
// covered by exactly one bundle each; the bundle's task set must equal the
// group. Fixes the current stage and either advances the manifest or
// completes the session.
PdfSession progressive_step(const PdfSession& session,
                            const std::vector<ActivationBundle>& bundles);

// Groups every stage from the similarities of the fully separate network,
// constrained to refine the previous stage. stage_matrices[c-1] must cover
// all tasks at stage c.
FusionTree offline_plan_from_matrices(const std::vector<SimilarityMatrix>& stage_matrices,
                                      const GroupingConfig& cfg);

FusionTree offline_plan(const std::vector<ActivationBundle>& bundles,
                        const GroupingConfig& cfg,
                        SimMethod method = SimMethod::cka_unbiased);

std::string session_to_json(const PdfSession& session);
PdfSession session_from_json(const std::string& text);

void save_session(const PdfSession& session, const std::filesystem::path& path);
PdfSession load_session(const std::filesystem::path& path);

std::string tree_to_json(const FusionTree& tree);
FusionTree tree_from_json(const std::string& text);

bool sessions_equal(const PdfSession& a, const PdfSession& b);
bool trees_equal(const FusionTree& a, const FusionTree& b);

}  // namespace taskfuse
