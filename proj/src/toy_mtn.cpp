#include "taskfuse/toy_mtn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "taskfuse/rng.hpp"
#include "taskfuse/util.hpp"

namespace taskfuse::toy {

using nlohmann::json;

std::string to_string(TaskKind kind) {
  return kind == TaskKind::regression ? "regression" : "classification";
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "regression") return TaskKind::regression;
  if (s == "classification") return TaskKind::classification;
  fail(ErrorKind::usage, "unknown task kind: " + s);
}

std::string to_string(Optimizer o) {
  switch (o) {
    case Optimizer::sgd:
      return "sgd";
    case Optimizer::sgd_momentum:
      return "sgd_momentum";
    case Optimizer::adam_like:
      return "adam_like";
  }
  return "unknown";
}

Optimizer optimizer_from_string(const std::string& s) {
  if (s == "sgd") return Optimizer::sgd;
  if (s == "sgd_momentum") return Optimizer::sgd_momentum;
  if (s == "adam_like") return Optimizer::adam_like;
  fail(ErrorKind::usage, "unknown optimizer: " + s);
}

std::vector<TaskId> SyntheticTaskSpec::task_ids() const {
  std::vector<TaskId> out;
  out.reserve(tasks.size());
  for (const auto& t : tasks) out.push_back(t.id);
  return out;
}

const TaskTargets& Dataset::target_for(const TaskId& task) const {
  for (const auto& t : targets)
    if (t.task == task) return t;
  fail(ErrorKind::membership, "no targets for task " + task.name);
}

namespace {

void validate_spec(const SyntheticTaskSpec& spec) {
  if (spec.num_samples < 1) fail(ErrorKind::data, "num_samples must be positive");
  if (spec.input_dim < 1 || spec.latent_dim < 1)
    fail(ErrorKind::data, "input_dim and latent_dim must be positive");
  if (spec.latent_dim > spec.input_dim)
    fail(ErrorKind::data, "latent_dim must not exceed input_dim");
  if (spec.tasks.empty()) fail(ErrorKind::data, "spec has no tasks");
  std::set<TaskId> seen;
  for (const auto& t : spec.tasks) {
    if (t.id.name.empty()) fail(ErrorKind::identity, "empty task name");
    if (!seen.insert(t.id).second) fail(ErrorKind::identity, "duplicate task id: " + t.id.name);
    if (t.factors.empty()) fail(ErrorKind::data, "task " + t.id.name + " has an empty factor subset");
    for (int f : t.factors)
      if (f < 0 || f >= spec.latent_dim)
        fail(ErrorKind::data, "task " + t.id.name + " reads latent index " + std::to_string(f) +
                                  " outside [0," + std::to_string(spec.latent_dim) + ")");
    if (t.noise_std < 0) fail(ErrorKind::data, "negative noise_std for task " + t.id.name);
    if (t.kind == TaskKind::classification && t.num_classes < 2)
      fail(ErrorKind::data, "classification task " + t.id.name + " needs at least 2 classes");
  }
}

}  // namespace

Dataset gen_synthetic(const SyntheticTaskSpec& spec, std::uint64_t seed) {
  validate_spec(spec);
  const int n = spec.num_samples;

  Dataset data;
  data.x.resize(n, spec.input_dim);
  Rng rx(hash_mix(seed, "inputs"));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < spec.input_dim; ++j) data.x(i, j) = rx.normal();

  // Orthonormal rows keep the latent coordinates independent, so tasks on
  // disjoint factor subsets decorrelate.
  Rng rw(hash_mix(seed, "latent"));
  Eigen::MatrixXd gauss(spec.input_dim, spec.latent_dim);
  for (int i = 0; i < spec.input_dim; ++i)
    for (int j = 0; j < spec.latent_dim; ++j) gauss(i, j) = rw.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(gauss);
  const Eigen::MatrixXd q =
      qr.householderQ() * Eigen::MatrixXd::Identity(spec.input_dim, spec.latent_dim);
  const Eigen::MatrixXd z = ((data.x * q).array()).tanh();  // n x latent

  for (std::size_t k = 0; k < spec.tasks.size(); ++k) {
    const SyntheticTask& task = spec.tasks[k];
    const std::uint64_t readout_seed =
        task.readout_seed ? hash_mix(*task.readout_seed, "readout")
                          : hash_mix(hash_mix(seed, "readout"), static_cast<std::uint64_t>(k));
    Rng rt(readout_seed);
    const int m = static_cast<int>(task.factors.size());
    const double scale = 2.0 / std::sqrt(static_cast<double>(m));

    TaskTargets out;
    out.task = task.id;
    out.kind = task.kind;
    out.num_classes = task.num_classes;

    if (task.kind == TaskKind::regression) {
      Eigen::VectorXd readout(m);
      for (int f = 0; f < m; ++f) readout(f) = rt.normal() * scale;
      out.y.resize(n);
      for (int i = 0; i < n; ++i) {
        double v = 0.0;
        for (int f = 0; f < m; ++f) v += readout(f) * z(i, task.factors[f]);
        out.y(i) = v + task.noise_std * rt.normal();
      }
    } else {
      Eigen::MatrixXd readout(task.num_classes, m);
      for (int c = 0; c < task.num_classes; ++c)
        for (int f = 0; f < m; ++f) readout(c, f) = rt.normal() * scale;
      out.labels.resize(n);
      for (int i = 0; i < n; ++i) {
        int best = 0;
        double best_v = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < task.num_classes; ++c) {
          double v = 0.0;
          for (int f = 0; f < m; ++f) v += readout(c, f) * z(i, task.factors[f]);
          if (v > best_v) {
            best_v = v;
            best = c;
          }
        }
        out.labels[i] = best;
      }
    }
    data.targets.push_back(std::move(out));
  }
  return data;
}

std::vector<int> head_dims_for(const SyntheticTaskSpec& spec) {
  std::vector<int> dims;
  for (const auto& t : spec.tasks)
    dims.push_back(t.kind == TaskKind::regression ? 1 : t.num_classes);
  return dims;
}

long BranchedNet::param_count() const {
  long count = 0;
  for (const auto* l : layer_list()) count += l->w.size() + l->b.size();
  return count;
}

std::vector<DenseLayer*> BranchedNet::layer_list() {
  std::vector<DenseLayer*> out;
  for (auto& l : trunk) out.push_back(&l);
  for (auto& stage : blocks)
    for (auto& l : stage) out.push_back(&l);
  for (auto& l : heads) out.push_back(&l);
  return out;
}

std::vector<const DenseLayer*> BranchedNet::layer_list() const {
  std::vector<const DenseLayer*> out;
  for (const auto& l : trunk) out.push_back(&l);
  for (const auto& stage : blocks)
    for (const auto& l : stage) out.push_back(&l);
  for (const auto& l : heads) out.push_back(&l);
  return out;
}

std::vector<DenseLayer*> Gradients::layer_list() {
  std::vector<DenseLayer*> out;
  for (auto& l : trunk) out.push_back(&l);
  for (auto& stage : blocks)
    for (auto& l : stage) out.push_back(&l);
  for (auto& l : heads) out.push_back(&l);
  return out;
}

namespace {

void glorot_init(DenseLayer& layer, int in, int out, std::uint64_t key) {
  Rng rng(key);
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  layer.w.resize(out, in);
  for (int r = 0; r < out; ++r)
    for (int c = 0; c < in; ++c) layer.w(r, c) = rng.uniform(-limit, limit);
  layer.b = Eigen::VectorXd::Zero(out);
}

std::string block_key(int stage, const std::vector<TaskId>& members) {
  std::vector<std::string> names;
  names.reserve(members.size());
  for (const auto& m : members) names.push_back(m.name);
  std::sort(names.begin(), names.end());
  std::string key = "stage" + std::to_string(stage) + "/";
  for (std::size_t i = 0; i < names.size(); ++i) key += (i ? "," : "") + names[i];
  return key;
}

int task_index(const std::vector<TaskId>& tasks, const TaskId& t) {
  for (std::size_t i = 0; i < tasks.size(); ++i)
    if (tasks[i] == t) return static_cast<int>(i);
  fail(ErrorKind::membership, "task not in tree: " + t.name);
}

Eigen::MatrixXd dense_tanh(const Eigen::MatrixXd& in, const DenseLayer& l) {
  return (((in * l.w.transpose()).rowwise() + l.b.transpose()).array().tanh()).matrix();
}

Eigen::MatrixXd dense_linear(const Eigen::MatrixXd& in, const DenseLayer& l) {
  return (in * l.w.transpose()).rowwise() + l.b.transpose();
}

}  // namespace

BranchedNet build_net(const FusionTree& tree, const NetWidths& widths, int input_dim,
                      const std::vector<int>& head_dims, std::uint64_t seed) {
  if (!refine_check(tree)) fail(ErrorKind::topology, "tree fails the refinement check");
  if (static_cast<int>(widths.stage.size()) != tree.num_stages)
    fail(ErrorKind::shape, "need one stage width per candidate stage");
  for (int w : widths.trunk)
    if (w < 1) fail(ErrorKind::shape, "trunk widths must be positive");
  for (int w : widths.stage)
    if (w < 1) fail(ErrorKind::shape, "stage widths must be positive");
  if (head_dims.size() != tree.tasks.size())
    fail(ErrorKind::shape, "need one head dimension per task");
  if (input_dim < 1) fail(ErrorKind::shape, "input_dim must be positive");

  BranchedNet net;
  net.tree = tree;
  net.widths = widths;
  net.input_dim = input_dim;
  net.head_dims = head_dims;

  int prev = input_dim;
  for (std::size_t i = 0; i < widths.trunk.size(); ++i) {
    DenseLayer l;
    glorot_init(l, prev, widths.trunk[i], hash_mix(seed, "trunk/" + std::to_string(i)));
    net.trunk.push_back(std::move(l));
    prev = widths.trunk[i];
  }
  const int trunk_out = prev;

  const int num_tasks = static_cast<int>(tree.tasks.size());
  net.group_of.resize(static_cast<std::size_t>(tree.num_stages));
  net.parent_of.resize(static_cast<std::size_t>(tree.num_stages));
  net.blocks.resize(static_cast<std::size_t>(tree.num_stages));

  for (int c = 1; c <= tree.num_stages; ++c) {
    const auto& groups = tree.stage_groupings[static_cast<std::size_t>(c - 1)].groups;
    auto& group_of = net.group_of[static_cast<std::size_t>(c - 1)];
    auto& parent_of = net.parent_of[static_cast<std::size_t>(c - 1)];
    group_of.assign(static_cast<std::size_t>(num_tasks), -1);
    parent_of.assign(groups.size(), -1);

    const int in_dim = c == 1 ? trunk_out : widths.stage[static_cast<std::size_t>(c - 2)];
    const int out_dim = widths.stage[static_cast<std::size_t>(c - 1)];

    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      for (const auto& m : groups[gi].members)
        group_of[static_cast<std::size_t>(task_index(tree.tasks, m))] = static_cast<int>(gi);
      if (c > 1) {
        const auto& prev_group_of = net.group_of[static_cast<std::size_t>(c - 2)];
        parent_of[gi] = prev_group_of[static_cast<std::size_t>(
            task_index(tree.tasks, groups[gi].members.front()))];
      }
      DenseLayer l;
      glorot_init(l, in_dim, out_dim, hash_mix(seed, block_key(c, groups[gi].members)));
      net.blocks[static_cast<std::size_t>(c - 1)].push_back(std::move(l));
    }
  }

  const int head_in = widths.stage.back();
  for (int t = 0; t < num_tasks; ++t) {
    DenseLayer l;
    glorot_init(l, head_in, head_dims[static_cast<std::size_t>(t)],
                hash_mix(seed, "head/" + tree.tasks[static_cast<std::size_t>(t)].name));
    net.heads.push_back(std::move(l));
  }
  return net;
}

long param_count_for(const FusionTree& tree, const NetWidths& widths, int input_dim,
                     const std::vector<int>& head_dims) {
  long count = 0;
  int prev = input_dim;
  for (int w : widths.trunk) {
    count += static_cast<long>(w) * prev + w;
    prev = w;
  }
  for (int c = 1; c <= tree.num_stages; ++c) {
    const int in_dim = c == 1 ? prev : widths.stage[static_cast<std::size_t>(c - 2)];
    const int out_dim = widths.stage[static_cast<std::size_t>(c - 1)];
    const long groups =
        static_cast<long>(tree.stage_groupings[static_cast<std::size_t>(c - 1)].groups.size());
    count += groups * (static_cast<long>(out_dim) * in_dim + out_dim);
  }
  for (int d : head_dims) count += static_cast<long>(d) * widths.stage.back() + d;
  return count;
}

ForwardCache forward(const BranchedNet& net, const Eigen::MatrixXd& x) {
  if (x.cols() != net.input_dim)
    fail(ErrorKind::shape, "input has " + std::to_string(x.cols()) + " features, net expects " +
                               std::to_string(net.input_dim));
  ForwardCache cache;
  cache.input = x;
  const Eigen::MatrixXd* prev = &cache.input;
  for (const auto& l : net.trunk) {
    cache.trunk.push_back(dense_tanh(*prev, l));
    prev = &cache.trunk.back();
  }
  const Eigen::MatrixXd& trunk_out = net.trunk.empty() ? cache.input : cache.trunk.back();

  const int num_stages = net.tree.num_stages;
  cache.blocks.resize(static_cast<std::size_t>(num_stages));
  for (int c = 1; c <= num_stages; ++c) {
    const auto& stage_blocks = net.blocks[static_cast<std::size_t>(c - 1)];
    for (std::size_t g = 0; g < stage_blocks.size(); ++g) {
      const Eigen::MatrixXd& in =
          c == 1 ? trunk_out
                 : cache.blocks[static_cast<std::size_t>(c - 2)][static_cast<std::size_t>(
                       net.parent_of[static_cast<std::size_t>(c - 1)][g])];
      cache.blocks[static_cast<std::size_t>(c - 1)].push_back(dense_tanh(in, stage_blocks[g]));
    }
  }

  for (std::size_t t = 0; t < net.heads.size(); ++t) {
    const int g = net.group_of[static_cast<std::size_t>(num_stages - 1)][t];
    const Eigen::MatrixXd& in =
        cache.blocks[static_cast<std::size_t>(num_stages - 1)][static_cast<std::size_t>(g)];
    cache.heads.push_back(dense_linear(in, net.heads[t]));
  }
  return cache;
}

namespace {

struct HeadError {
  double loss = 0.0;
  Eigen::MatrixXd dpred;  // empty unless gradients requested
};

HeadError head_loss(const TaskTargets& target, const Eigen::MatrixXd& pred,
                    const std::vector<int>& rows, bool want_grad) {
  const int b = static_cast<int>(rows.size());
  HeadError out;
  if (target.kind == TaskKind::regression) {
    Eigen::MatrixXd err(b, pred.cols());
    for (int i = 0; i < b; ++i)
      for (Eigen::Index c = 0; c < pred.cols(); ++c)
        err(i, c) = pred(i, c) - target.y(rows[static_cast<std::size_t>(i)]);
    const double denom = static_cast<double>(b) * static_cast<double>(pred.cols());
    out.loss = err.squaredNorm() / denom;
    if (want_grad) out.dpred = (2.0 / denom) * err;
  } else {
    out.loss = 0.0;
    if (want_grad) out.dpred.setZero(b, pred.cols());
    for (int i = 0; i < b; ++i) {
      const Eigen::RowVectorXd logits = pred.row(i);
      const double mx = logits.maxCoeff();
      const Eigen::RowVectorXd ex = (logits.array() - mx).exp();
      const double total = ex.sum();
      const int label = target.labels[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])];
      out.loss += -std::log(ex(label) / total);
      if (want_grad) {
        out.dpred.row(i) = ex / total;
        out.dpred(i, label) -= 1.0;
      }
    }
    out.loss /= static_cast<double>(b);
    if (want_grad) out.dpred /= static_cast<double>(b);
  }
  return out;
}

bool task_included(const std::vector<TaskId>& filter, const TaskId& t) {
  return filter.empty() || std::find(filter.begin(), filter.end(), t) != filter.end();
}

}  // namespace

LossReport compute_loss(const BranchedNet& net, const ForwardCache& cache, const Dataset& data,
                        const std::vector<int>& rows, const std::vector<TaskId>& loss_tasks) {
  LossReport report;
  for (std::size_t t = 0; t < net.tree.tasks.size(); ++t) {
    const auto& target = data.target_for(net.tree.tasks[t]);
    const double loss = head_loss(target, cache.heads[t], rows, false).loss;
    report.per_task.push_back(loss);
    if (task_included(loss_tasks, net.tree.tasks[t])) report.total += loss;
  }
  return report;
}

BackwardResult backward(const BranchedNet& net, const ForwardCache& cache, const Dataset& data,
                        const std::vector<int>& rows, bool need_input_grad,
                        const std::vector<TaskId>& loss_tasks) {
  const int num_stages = net.tree.num_stages;
  const Eigen::Index b = cache.input.rows();

  BackwardResult result;
  result.grads.trunk.resize(net.trunk.size());
  result.grads.blocks.resize(net.blocks.size());
  result.grads.heads.resize(net.heads.size());

  // dL/d(block output), accumulated from heads and child blocks.
  std::vector<std::vector<Eigen::MatrixXd>> block_grad(static_cast<std::size_t>(num_stages));
  for (int c = 0; c < num_stages; ++c) {
    block_grad[static_cast<std::size_t>(c)].resize(net.blocks[static_cast<std::size_t>(c)].size());
    for (std::size_t g = 0; g < net.blocks[static_cast<std::size_t>(c)].size(); ++g)
      block_grad[static_cast<std::size_t>(c)][g] = Eigen::MatrixXd::Zero(
          b, net.blocks[static_cast<std::size_t>(c)][g].w.rows());
    result.grads.blocks[static_cast<std::size_t>(c)].resize(
        net.blocks[static_cast<std::size_t>(c)].size());
  }

  for (std::size_t t = 0; t < net.heads.size(); ++t) {
    const auto& target = data.target_for(net.tree.tasks[t]);
    const bool included = task_included(loss_tasks, net.tree.tasks[t]);
    HeadError he = head_loss(target, cache.heads[t], rows, included);
    result.loss.per_task.push_back(he.loss);
    if (!included) {
      result.grads.heads[t].w = Eigen::MatrixXd::Zero(net.heads[t].w.rows(), net.heads[t].w.cols());
      result.grads.heads[t].b = Eigen::VectorXd::Zero(net.heads[t].b.size());
      continue;
    }
    result.loss.total += he.loss;

    const int g = net.group_of[static_cast<std::size_t>(num_stages - 1)][t];
    const Eigen::MatrixXd& in =
        cache.blocks[static_cast<std::size_t>(num_stages - 1)][static_cast<std::size_t>(g)];
    result.grads.heads[t].w = he.dpred.transpose() * in;
    result.grads.heads[t].b = he.dpred.colwise().sum().transpose();
    block_grad[static_cast<std::size_t>(num_stages - 1)][static_cast<std::size_t>(g)] +=
        he.dpred * net.heads[t].w;
  }

  const Eigen::MatrixXd& trunk_out = net.trunk.empty() ? cache.input : cache.trunk.back();
  Eigen::MatrixXd trunk_grad =
      Eigen::MatrixXd::Zero(b, net.trunk.empty() ? net.input_dim : net.trunk.back().w.rows());

  for (int c = num_stages; c >= 1; --c) {
    const auto& stage_blocks = net.blocks[static_cast<std::size_t>(c - 1)];
    for (std::size_t g = 0; g < stage_blocks.size(); ++g) {
      const Eigen::MatrixXd& out = cache.blocks[static_cast<std::size_t>(c - 1)][g];
      const Eigen::MatrixXd& in =
          c == 1 ? trunk_out
                 : cache.blocks[static_cast<std::size_t>(c - 2)][static_cast<std::size_t>(
                       net.parent_of[static_cast<std::size_t>(c - 1)][g])];
      const Eigen::MatrixXd dpre =
          block_grad[static_cast<std::size_t>(c - 1)][g].cwiseProduct(
              (1.0 - out.array().square()).matrix());
      result.grads.blocks[static_cast<std::size_t>(c - 1)][g].w = dpre.transpose() * in;
      result.grads.blocks[static_cast<std::size_t>(c - 1)][g].b =
          dpre.colwise().sum().transpose();
      const Eigen::MatrixXd din = dpre * stage_blocks[g].w;
      if (c == 1) {
        trunk_grad += din;
      } else {
        block_grad[static_cast<std::size_t>(c - 2)][static_cast<std::size_t>(
            net.parent_of[static_cast<std::size_t>(c - 1)][g])] += din;
      }
    }
  }

  Eigen::MatrixXd grad = trunk_grad;
  for (int i = static_cast<int>(net.trunk.size()) - 1; i >= 0; --i) {
    const Eigen::MatrixXd& out = cache.trunk[static_cast<std::size_t>(i)];
    const Eigen::MatrixXd& in = i == 0 ? cache.input : cache.trunk[static_cast<std::size_t>(i - 1)];
    const Eigen::MatrixXd dpre = grad.cwiseProduct((1.0 - out.array().square()).matrix());
    result.grads.trunk[static_cast<std::size_t>(i)].w = dpre.transpose() * in;
    result.grads.trunk[static_cast<std::size_t>(i)].b = dpre.colwise().sum().transpose();
    grad = dpre * net.trunk[static_cast<std::size_t>(i)].w;
  }
  if (need_input_grad) result.input_grad = grad;
  return result;
}

std::vector<double> train(BranchedNet& net, const Dataset& data, const TrainConfig& cfg) {
  if (cfg.epochs < 1) fail(ErrorKind::usage, "epochs must be positive");
  if (cfg.batch_size < 1) fail(ErrorKind::usage, "batch_size must be positive");
  if (cfg.learning_rate < 0) fail(ErrorKind::usage, "learning_rate must not be negative");

  const int n = static_cast<int>(data.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(hash_mix(cfg.seed, "shuffle"));

  auto layers = net.layer_list();
  std::vector<DenseLayer> velocity(layers.size());
  std::vector<DenseLayer> moment1(layers.size()), moment2(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    velocity[i].w = Eigen::MatrixXd::Zero(layers[i]->w.rows(), layers[i]->w.cols());
    velocity[i].b = Eigen::VectorXd::Zero(layers[i]->b.size());
    moment1[i] = velocity[i];
    moment2[i] = velocity[i];
  }
  long adam_t = 0;

  std::vector<double> record;
  record.reserve(static_cast<std::size_t>(cfg.epochs));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    double loss_sum = 0.0;
    int batches = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int end = std::min(start + cfg.batch_size, n);
      std::vector<int> rows(order.begin() + start, order.begin() + end);
      Eigen::MatrixXd xb(end - start, data.x.cols());
      for (int i = 0; i < end - start; ++i) xb.row(i) = data.x.row(rows[static_cast<std::size_t>(i)]);

      const ForwardCache cache = forward(net, xb);
      BackwardResult res = backward(net, cache, data, rows);
      loss_sum += res.loss.total;
      ++batches;

      auto grads = res.grads.layer_list();
      const double lr = cfg.learning_rate;
      for (std::size_t i = 0; i < layers.size(); ++i) {
        switch (cfg.optimizer) {
          case Optimizer::sgd:
            layers[i]->w -= lr * grads[i]->w;
            layers[i]->b -= lr * grads[i]->b;
            break;
          case Optimizer::sgd_momentum:
            velocity[i].w = 0.9 * velocity[i].w + grads[i]->w;
            velocity[i].b = 0.9 * velocity[i].b + grads[i]->b;
            layers[i]->w -= lr * velocity[i].w;
            layers[i]->b -= lr * velocity[i].b;
            break;
          case Optimizer::adam_like: {
            if (i == 0) ++adam_t;
            constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
            moment1[i].w = b1 * moment1[i].w + (1 - b1) * grads[i]->w;
            moment1[i].b = b1 * moment1[i].b + (1 - b1) * grads[i]->b;
            moment2[i].w = b2 * moment2[i].w.array().matrix() +
                           (1 - b2) * grads[i]->w.array().square().matrix();
            moment2[i].b = b2 * moment2[i].b.array().matrix() +
                           (1 - b2) * grads[i]->b.array().square().matrix();
            const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam_t));
            const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam_t));
            layers[i]->w.array() -=
                lr * (moment1[i].w.array() / c1) / ((moment2[i].w.array() / c2).sqrt() + eps);
            layers[i]->b.array() -=
                lr * (moment1[i].b.array() / c1) / ((moment2[i].b.array() / c2).sqrt() + eps);
            break;
          }
        }
      }
    }
    record.push_back(loss_sum / static_cast<double>(batches));
    if (!std::isfinite(record.back()))
      fail(ErrorKind::divergence, "training diverged at epoch " + std::to_string(epoch) +
                                      " (lr=" + std::to_string(cfg.learning_rate) + ")");
  }
  return record;
}

ActivationBundle extract_activations(const BranchedNet& net, const Dataset& data, int stage) {
  if (stage < 1 || stage > net.tree.num_stages)
    fail(ErrorKind::range, "stage " + std::to_string(stage) + " outside [1," +
                               std::to_string(net.tree.num_stages) + "]");
  const ForwardCache cache = forward(net, data.x);
  std::vector<ActivationMatrix> matrices;
  for (std::size_t t = 0; t < net.tree.tasks.size(); ++t) {
    ActivationMatrix m;
    m.task = net.tree.tasks[t];
    m.stage = StageId{stage};
    m.data = cache.blocks[static_cast<std::size_t>(stage - 1)][static_cast<std::size_t>(
        net.group_of[static_cast<std::size_t>(stage - 1)][t])];
    matrices.push_back(std::move(m));
  }
  return make_bundle(StageId{stage}, std::move(matrices));
}

namespace {

bool topology_equal(const FusionTree& a, const FusionTree& b) {
  if (a.tasks != b.tasks || a.num_stages != b.num_stages) return false;
  for (int c = 0; c < a.num_stages; ++c) {
    const auto& ga = a.stage_groupings[static_cast<std::size_t>(c)].groups;
    const auto& gb = b.stage_groupings[static_cast<std::size_t>(c)].groups;
    if (ga.size() != gb.size()) return false;
    for (std::size_t g = 0; g < ga.size(); ++g)
      if (ga[g].members != gb[g].members) return false;
  }
  return true;
}

double mean_offdiag(const SimilarityMatrix& s) {
  const int t = s.task_count();
  double sum = 0.0;
  int count = 0;
  for (int i = 0; i < t; ++i)
    for (int j = i + 1; j < t; ++j) {
      sum += s.values(i, j);
      ++count;
    }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

double mean_pairwise_cka(const ActivationBundle& bundle, const std::vector<TaskId>& members) {
  double sum = 0.0;
  int count = 0;
  for (std::size_t i = 0; i < members.size(); ++i)
    for (std::size_t j = i + 1; j < members.size(); ++j) {
      sum += cka_unbiased(*bundle.find(members[i]), *bundle.find(members[j]));
      ++count;
    }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

}  // namespace

ToyPdfRunner::ToyPdfRunner(const PdfToyConfig& cfg) : cfg_(cfg) {
  data_ = gen_synthetic(cfg_.spec, hash_mix(cfg_.train_cfg.seed, "data"));
  session_ = init_session(cfg_.spec.task_ids(), cfg_.num_stages, cfg_.group_cfg);
  report_.seed = cfg_.train_cfg.seed;
}

ToyPdfRunner::ToyPdfRunner(const PdfToyConfig& cfg, const PdfSession& resume_from) : cfg_(cfg) {
  data_ = gen_synthetic(cfg_.spec, hash_mix(cfg_.train_cfg.seed, "data"));
  if (resume_from.tree.tasks != cfg_.spec.task_ids())
    fail(ErrorKind::protocol, "session tasks do not match the spec");
  if (resume_from.tree.num_stages != cfg_.num_stages)
    fail(ErrorKind::protocol, "session stage count does not match the configuration");
  session_ = resume_from;
  report_.seed = cfg_.train_cfg.seed;
}

BranchedNet ToyPdfRunner::train_for_tree(const FusionTree& tree, std::vector<double>* losses) {
  BranchedNet net = build_net(tree, cfg_.widths, cfg_.spec.input_dim, head_dims_for(cfg_.spec),
                              hash_mix(cfg_.train_cfg.seed, "net"));
  auto record = train(net, data_, cfg_.train_cfg);
  if (losses) *losses = std::move(record);
  return net;
}

std::vector<ActivationBundle> ToyPdfRunner::step() {
  if (done()) fail(ErrorKind::protocol, "session is already complete");

  std::vector<double> losses;
  BranchedNet net = train_for_tree(session_.tree, &losses);
  const int c = session_.current_stage;

  const ActivationBundle full = extract_activations(net, data_, c);
  const std::vector<Group> parents =
      c == 1 ? full_grouping(session_.tree.tasks).groups
             : session_.tree.stage_groupings[static_cast<std::size_t>(c - 2)].groups;

  std::vector<ActivationBundle> bundles;
  for (const auto& p : parents) {
    if (p.members.size() < 2) continue;
    std::vector<ActivationMatrix> slice;
    for (const auto& m : p.members) slice.push_back(*full.find(m));
    bundles.push_back(make_bundle(StageId{c}, std::move(slice)));
  }

  PdfSession next = progressive_step(session_, bundles);
  const StageRecord& fixed = next.history.back();

  // Trend resolution: entries recorded last round are measured against this
  // round's parent matrices.
  for (auto it = pending_.begin(); it != pending_.end();) {
    if (it->stage != c) {
      ++it;
      continue;
    }
    for (const auto& m : fixed.matrices)
      if (m.tasks == it->members) {
        TrendEntry entry = *it;
        entry.post_fusion = mean_offdiag(m);
        report_.trends.push_back(entry);
        break;
      }
    it = pending_.erase(it);
  }

  // Pre-fusion values for the groups just fixed, measured one stage deeper
  // on the not-yet-fused net.
  if (c + 1 <= session_.tree.num_stages) {
    const ActivationBundle deeper = extract_activations(net, data_, c + 1);
    for (const auto& g : fixed.grouping.groups) {
      if (g.members.size() < 2) continue;
      TrendEntry entry;
      entry.stage = c + 1;
      entry.members = g.members;
      entry.pre_fusion = mean_pairwise_cka(deeper, g.members);
      pending_.push_back(std::move(entry));
    }
  }

  StageReport stage_report;
  stage_report.stage = c;
  stage_report.matrices = fixed.matrices;
  stage_report.grouping = fixed.grouping;
  stage_report.loss_record = losses;
  stage_report.param_count = net.param_count();
  report_.stages.push_back(std::move(stage_report));

  session_ = std::move(next);

  if (done()) {
    if (topology_equal(session_.tree, net.tree)) {
      final_net_ = std::move(net);
      report_.final_loss_record = report_.stages.back().loss_record;
    } else {
      final_net_ = train_for_tree(session_.tree, &report_.final_loss_record);
    }
    report_.final_param_count = final_net_.param_count();
    final_ready_ = true;
  }
  return bundles;
}

const BranchedNet& ToyPdfRunner::final_net() {
  if (!done()) fail(ErrorKind::protocol, "session is not complete yet");
  if (!final_ready_) {
    final_net_ = train_for_tree(session_.tree, &report_.final_loss_record);
    report_.final_param_count = final_net_.param_count();
    final_ready_ = true;
  }
  return final_net_;
}

PdfToyResult run_pdf(const PdfToyConfig& cfg) {
  ToyPdfRunner runner(cfg);
  while (!runner.done()) runner.step();
  PdfToyResult result;
  result.tree = runner.session().tree;
  result.net = runner.final_net();
  result.report = runner.report();
  result.data = runner.data();
  return result;
}

std::string report_to_json(const PdfReport& report) {
  json j;
  j["seed"] = report.seed;
  j["stages"] = json::array();
  for (const auto& s : report.stages) {
    json matrices = json::array();
    for (const auto& m : s.matrices) matrices.push_back(json::parse(similarity_to_json(m)));
    j["stages"].push_back({{"stage", s.stage},
                           {"matrices", matrices},
                           {"grouping", json::parse(grouping_to_json(s.grouping, StageId{s.stage},
                                                                     -1.0))},
                           {"loss_record", s.loss_record},
                           {"param_count", s.param_count}});
  }
  j["trends"] = json::array();
  for (const auto& t : report.trends) {
    json members = json::array();
    for (const auto& m : t.members) members.push_back(m.name);
    j["trends"].push_back({{"stage", t.stage},
                           {"members", members},
                           {"pre_fusion", t.pre_fusion},
                           {"post_fusion", t.post_fusion}});
  }
  j["final_loss_record"] = report.final_loss_record;
  j["final_param_count"] = report.final_param_count;
  return j.dump(2) + "\n";
}

std::string spec_to_json(const SyntheticTaskSpec& spec) {
  json j;
  j["num_samples"] = spec.num_samples;
  j["input_dim"] = spec.input_dim;
  j["latent_dim"] = spec.latent_dim;
  j["tasks"] = json::array();
  for (const auto& t : spec.tasks) {
    json task;
    task["name"] = t.id.name;
    task["kind"] = to_string(t.kind);
    task["factors"] = t.factors;
    task["noise_std"] = t.noise_std;
    if (t.kind == TaskKind::classification) task["num_classes"] = t.num_classes;
    if (t.readout_seed) task["readout_seed"] = *t.readout_seed;
    j["tasks"].push_back(task);
  }
  return j.dump(2) + "\n";
}

SyntheticTaskSpec spec_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("bad spec json: ") + e.what());
  }
  SyntheticTaskSpec spec;
  try {
    spec.num_samples = j.value("num_samples", spec.num_samples);
    spec.input_dim = j.value("input_dim", spec.input_dim);
    spec.latent_dim = j.value("latent_dim", spec.latent_dim);
    for (const auto& t : j.at("tasks")) {
      SyntheticTask task;
      task.id.name = t.at("name").get<std::string>();
      task.kind = task_kind_from_string(t.value("kind", std::string("regression")));
      task.factors = t.at("factors").get<std::vector<int>>();
      task.noise_std = t.value("noise_std", 0.0);
      task.num_classes = t.value("num_classes", 0);
      if (t.contains("readout_seed")) task.readout_seed = t.at("readout_seed").get<std::uint64_t>();
      spec.tasks.push_back(std::move(task));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("bad spec json: ") + e.what());
  }
  validate_spec(spec);
  return spec;
}

namespace {

json layer_to_json(const DenseLayer& l) {
  json w = json::array();
  for (Eigen::Index r = 0; r < l.w.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < l.w.cols(); ++c) row.push_back(l.w(r, c));
    w.push_back(row);
  }
  json b = json::array();
  for (Eigen::Index i = 0; i < l.b.size(); ++i) b.push_back(l.b(i));
  return {{"w", w}, {"b", b}};
}

DenseLayer layer_from_json(const json& j) {
  DenseLayer l;
  const auto& w = j.at("w");
  const auto rows = w.size();
  const auto cols = rows ? w[0].size() : 0;
  l.w.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) l.w(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = w[r][c].get<double>();
  const auto& b = j.at("b");
  l.b.resize(static_cast<Eigen::Index>(b.size()));
  for (std::size_t i = 0; i < b.size(); ++i) l.b(static_cast<Eigen::Index>(i)) = b[i].get<double>();
  return l;
}

}  // namespace

std::string net_to_json(const BranchedNet& net, const SyntheticTaskSpec& spec,
                        std::uint64_t data_seed) {
  json j;
  j["version"] = "1";
  j["input_dim"] = net.input_dim;
  j["widths"] = {{"trunk", net.widths.trunk}, {"stage", net.widths.stage}};
  j["head_dims"] = net.head_dims;
  j["tree"] = json::parse(tree_to_json(net.tree));
  j["spec"] = json::parse(spec_to_json(spec));
  j["data_seed"] = data_seed;

  json trunk = json::array();
  for (const auto& l : net.trunk) trunk.push_back(layer_to_json(l));
  json blocks = json::array();
  for (const auto& stage : net.blocks) {
    json row = json::array();
    for (const auto& l : stage) row.push_back(layer_to_json(l));
    blocks.push_back(row);
  }
  json heads = json::array();
  for (const auto& l : net.heads) heads.push_back(layer_to_json(l));
  j["params"] = {{"trunk", trunk}, {"blocks", blocks}, {"heads", heads}};
  return j.dump() + "\n";
}

LoadedNet net_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("bad net json: ") + e.what());
  }
  try {
    LoadedNet out;
    out.spec = spec_from_json(j.at("spec").dump());
    out.data_seed = j.at("data_seed").get<std::uint64_t>();

    FusionTree tree = tree_from_json(j.at("tree").dump());
    NetWidths widths;
    widths.trunk = j.at("widths").at("trunk").get<std::vector<int>>();
    widths.stage = j.at("widths").at("stage").get<std::vector<int>>();
    const auto head_dims = j.at("head_dims").get<std::vector<int>>();

    // Build with a throwaway seed to get shapes and topology maps, then
    // overwrite every parameter from the file.
    BranchedNet net = build_net(tree, widths, j.at("input_dim").get<int>(), head_dims, 0);
    const auto& params = j.at("params");
    const auto& trunk = params.at("trunk");
    for (std::size_t i = 0; i < net.trunk.size(); ++i) net.trunk[i] = layer_from_json(trunk[i]);
    const auto& blocks = params.at("blocks");
    for (std::size_t c = 0; c < net.blocks.size(); ++c)
      for (std::size_t g = 0; g < net.blocks[c].size(); ++g)
        net.blocks[c][g] = layer_from_json(blocks[c][g]);
    const auto& heads = params.at("heads");
    for (std::size_t t = 0; t < net.heads.size(); ++t) net.heads[t] = layer_from_json(heads[t]);
    out.net = std::move(net);
    return out;
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("bad net json: ") + e.what());
  }
}

}  // namespace taskfuse::toy
