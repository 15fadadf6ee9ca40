#pragma once

#include <Eigen/Dense>
#include <compare>
#include <filesystem>
#include <string>
#include <vector>

#include "taskfuse/error.hpp"

namespace taskfuse {

struct TaskId {
  std::string name;
  auto operator<=>(const TaskId&) const = default;
};

struct StageId {
  int index = 0;  // 0 is the last encoder stage
  auto operator<=>(const StageId&) const = default;
};

// (N, C, H, W) tensor as dumped by a trainer, row-major.
struct RawActivationTensor {
  std::size_t n = 0, c = 0, h = 0, w = 0;
  std::vector<double> data;
};

// One task's activations at one candidate stage, n samples by d features.
// Rows must follow the same ordered sample set across every matrix that
// ends up in one bundle.
struct ActivationMatrix {
  TaskId task;
  StageId stage;
  Eigen::MatrixXd data;

  Eigen::Index n() const { return data.rows(); }
  Eigen::Index d() const { return data.cols(); }
};

struct ActivationBundle {
  StageId stage;
  std::vector<ActivationMatrix> entries;  // preserves insertion order

  Eigen::Index n() const { return entries.empty() ? 0 : entries.front().n(); }
  const ActivationMatrix* find(const TaskId& task) const;
  std::vector<TaskId> tasks() const;
};

enum class PoolMode { spatial_mean, channel_mean_flatten };
enum class FileFormat { npy, csv };

// spatial_mean: N x C, mean over the H*W positions of each channel.
// channel_mean_flatten: N x (H*W), mean over channels at each position.
ActivationMatrix pool_spatial(const RawActivationTensor& t, PoolMode mode,
                              const TaskId& task = {}, StageId stage = {});

// Reads a 2-D or 4-D dump; a 4-D dump is pooled with `pool` before return.
// Values are validated finite and the sample count must be at least 4.
ActivationMatrix load_activation_matrix(const std::filesystem::path& path,
                                        FileFormat format,
                                        const TaskId& task = {}, StageId stage = {},
                                        PoolMode pool = PoolMode::spatial_mean);

ActivationBundle make_bundle(StageId stage, std::vector<ActivationMatrix> matrices);

}  // namespace taskfuse
