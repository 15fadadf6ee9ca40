#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "taskfuse/fusion_plan.hpp"

namespace taskfuse::toy {

enum class TaskKind { regression, classification };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& s);

struct SyntheticTask {
  TaskId id;
  TaskKind kind = TaskKind::regression;
  std::vector<int> factors;  // latent indices this task reads
  double noise_std = 0.0;    // regression only
  int num_classes = 0;       // classification only
  // Tasks sharing a readout seed (and factors) get identical targets.
  std::optional<std::uint64_t> readout_seed;
};

struct SyntheticTaskSpec {
  int num_samples = 256;
  int input_dim = 8;
  int latent_dim = 5;
  std::vector<SyntheticTask> tasks;

  std::vector<TaskId> task_ids() const;
};

struct TaskTargets {
  TaskId task;
  TaskKind kind = TaskKind::regression;
  Eigen::VectorXd y;        // regression targets
  std::vector<int> labels;  // classification targets
  int num_classes = 0;
};

struct Dataset {
  Eigen::MatrixXd x;  // N x input_dim
  std::vector<TaskTargets> targets;

  Eigen::Index size() const { return x.rows(); }
  const TaskTargets& target_for(const TaskId& task) const;
};

// Inputs are standard normal; the latent is tanh(W x) with orthonormal
// rows of W drawn once from the seed, so distinct latent coordinates are
// independent. Each task reads a fixed random linear readout of its
// factor subset (argmax over per-class readouts for classification).
Dataset gen_synthetic(const SyntheticTaskSpec& spec, std::uint64_t seed);

struct DenseLayer {
  Eigen::MatrixXd w;  // out x in
  Eigen::VectorXd b;
};

struct NetWidths {
  std::vector<int> trunk;  // shared encoder layer widths, may be empty
  std::vector<int> stage;  // one block width per candidate stage
};

enum class Optimizer { sgd, sgd_momentum, adam_like };

std::string to_string(Optimizer o);
Optimizer optimizer_from_string(const std::string& s);

struct TrainConfig {
  int epochs = 200;
  int batch_size = 32;
  double learning_rate = 0.05;
  std::uint64_t seed = 1;
  Optimizer optimizer = Optimizer::sgd_momentum;
};

// Branched net: shared trunk, one dense tanh block per group per stage,
// one linear head per task. Block topology mirrors a FusionTree.
struct BranchedNet {
  FusionTree tree;
  NetWidths widths;
  int input_dim = 0;
  std::vector<int> head_dims;  // aligned with tree.tasks

  std::vector<DenseLayer> trunk;
  std::vector<std::vector<DenseLayer>> blocks;  // [stage-1][group]
  std::vector<DenseLayer> heads;

  // group_of[stage-1][task index] -> group index at that stage
  std::vector<std::vector<int>> group_of;
  // parent_of[stage-1][group] -> group index at previous stage (-1 = trunk)
  std::vector<std::vector<int>> parent_of;

  long param_count() const;
  std::vector<DenseLayer*> layer_list();
  std::vector<const DenseLayer*> layer_list() const;
};

// Initialization is uniform +-sqrt(6/(fan_in+fan_out)), streamed per layer
// from a key that does not depend on the tree shape: the trunk and any
// (stage, member set) block get bit-identical weights across rebuilds.
BranchedNet build_net(const FusionTree& tree, const NetWidths& widths,
                      int input_dim, const std::vector<int>& head_dims,
                      std::uint64_t seed);

long param_count_for(const FusionTree& tree, const NetWidths& widths,
                     int input_dim, const std::vector<int>& head_dims);

std::vector<int> head_dims_for(const SyntheticTaskSpec& spec);

struct ForwardCache {
  Eigen::MatrixXd input;
  std::vector<Eigen::MatrixXd> trunk;                // post-tanh
  std::vector<std::vector<Eigen::MatrixXd>> blocks;  // post-tanh
  std::vector<Eigen::MatrixXd> heads;                // linear
};

ForwardCache forward(const BranchedNet& net, const Eigen::MatrixXd& x);

struct Gradients {
  std::vector<DenseLayer> trunk;
  std::vector<std::vector<DenseLayer>> blocks;
  std::vector<DenseLayer> heads;

  std::vector<DenseLayer*> layer_list();
};

struct LossReport {
  double total = 0.0;
  std::vector<double> per_task;
};

// Total loss is the unweighted sum of per-task losses: mean squared error
// for regression, softmax cross-entropy for classification. `rows` selects
// the dataset rows the cache was computed on. A non-empty `loss_tasks`
// restricts the total (and gradients) to those tasks, which is how a
// single-task attack objective is built; per-task losses are always
// reported for every task.
LossReport compute_loss(const BranchedNet& net, const ForwardCache& cache,
                        const Dataset& data, const std::vector<int>& rows,
                        const std::vector<TaskId>& loss_tasks = {});

struct BackwardResult {
  LossReport loss;
  Gradients grads;
  Eigen::MatrixXd input_grad;  // filled when requested
};

BackwardResult backward(const BranchedNet& net, const ForwardCache& cache,
                        const Dataset& data, const std::vector<int>& rows,
                        bool need_input_grad = false,
                        const std::vector<TaskId>& loss_tasks = {});

// Seeded-shuffle epoch loop; throws a divergence error naming the epoch
// and learning rate if the loss stops being finite.
std::vector<double> train(BranchedNet& net, const Dataset& data, const TrainConfig& cfg);

// Post-nonlinearity block outputs at the given stage over the whole
// dataset, in dataset order. Tasks sharing a block get equal matrices.
ActivationBundle extract_activations(const BranchedNet& net, const Dataset& data, int stage);

struct TrendEntry {
  int stage = 0;  // the stage the values were measured at (fusion stage + 1)
  std::vector<TaskId> members;
  double pre_fusion = 0.0;
  double post_fusion = 0.0;
};

struct StageReport {
  int stage = 0;
  std::vector<SimilarityMatrix> matrices;
  Grouping grouping;
  std::vector<double> loss_record;  // losses of the net the stage was measured on
  long param_count = 0;
};

struct PdfReport {
  std::uint64_t seed = 0;
  std::vector<StageReport> stages;
  std::vector<TrendEntry> trends;
  std::vector<double> final_loss_record;
  long final_param_count = 0;
};

struct PdfToyConfig {
  SyntheticTaskSpec spec;
  int num_stages = 2;
  NetWidths widths;
  GroupingConfig group_cfg;
  TrainConfig train_cfg;
};

// Drives a PdfSession against the built-in trainer one retrain round at a
// time, so callers can persist the session between rounds.
class ToyPdfRunner {
 public:
  ToyPdfRunner(const PdfToyConfig& cfg);
  ToyPdfRunner(const PdfToyConfig& cfg, const PdfSession& resume_from);

  const PdfSession& session() const { return session_; }
  const Dataset& data() const { return data_; }
  bool done() const { return session_.status == SessionStatus::complete; }

  // Trains the provisional net, measures the current stage, fixes its
  // grouping. Returns the bundles that were measured (for dump emission).
  std::vector<ActivationBundle> step();

  // Valid once done(): the net retrained on the final tree.
  const BranchedNet& final_net();
  const PdfReport& report() const { return report_; }

 private:
  BranchedNet train_for_tree(const FusionTree& tree, std::vector<double>* losses);

  PdfToyConfig cfg_;
  Dataset data_;
  PdfSession session_;
  PdfReport report_;
  std::vector<TrendEntry> pending_;
  BranchedNet final_net_;
  bool final_ready_ = false;
};

struct PdfToyResult {
  FusionTree tree;
  PdfReport report;
  BranchedNet net;
  Dataset data;
};

PdfToyResult run_pdf(const PdfToyConfig& cfg);

std::string report_to_json(const PdfReport& report);

std::string spec_to_json(const SyntheticTaskSpec& spec);
SyntheticTaskSpec spec_from_json(const std::string& text);

// Net bundle with everything needed to reload and re-evaluate: topology,
// parameters, the synthetic spec and the seeds.
std::string net_to_json(const BranchedNet& net, const SyntheticTaskSpec& spec,
                        std::uint64_t data_seed);
struct LoadedNet {
  BranchedNet net;
  SyntheticTaskSpec spec;
  std::uint64_t data_seed = 0;
};
LoadedNet net_from_json(const std::string& text);

}  // namespace taskfuse::toy
