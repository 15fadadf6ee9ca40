#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>
#include <vector>

#include "taskfuse/activations.hpp"

namespace taskfuse {

// Linear-kernel Gram matrix K = X X^T over samples.
struct GramMatrix {
  Eigen::MatrixXd values;
  Eigen::Index n() const { return values.rows(); }
};

enum class SimMethod { cka_unbiased, rsa };

std::string to_string(SimMethod method);
SimMethod sim_method_from_string(const std::string& s);

// Symmetric T x T matrix of pairwise similarities at one stage. Each
// unordered pair is computed once and mirrored, so symmetry is exact.
struct SimilarityMatrix {
  StageId stage;
  std::vector<TaskId> tasks;
  SimMethod method = SimMethod::cka_unbiased;
  Eigen::MatrixXd values;

  int task_count() const { return static_cast<int>(tasks.size()); }
  int index_of(const TaskId& task) const;  // -1 when absent
};

GramMatrix gram_linear(const ActivationMatrix& x);

// Unbiased HSIC estimator over zero-diagonal Gram matrices:
//   (1/(n(n-3))) * [ tr(K~ L~) + (1'K~1)(1'L~1)/((n-1)(n-2)) - (2/(n-2)) 1'K~L~1 ]
double hsic1(const GramMatrix& k, const GramMatrix& l);

// hsic1(K,L) / sqrt(hsic1(K,K) * hsic1(L,L)) with linear Gram matrices.
// Negative values are passed through unclamped.
double cka_unbiased(const ActivationMatrix& x, const ActivationMatrix& y);

// Spearman correlation between the strict upper triangles of the two
// representation dissimilarity matrices (1 - Pearson over sample rows).
// Ties get average ranks.
double rsa(const ActivationMatrix& x, const ActivationMatrix& y);

SimilarityMatrix pairwise_similarity(const ActivationBundle& bundle, SimMethod method);

// Sub-matrix over the given tasks, preserving the given order.
SimilarityMatrix restrict_to(const SimilarityMatrix& s, const std::vector<TaskId>& subset);

std::string similarity_to_json(const SimilarityMatrix& s);
SimilarityMatrix similarity_from_json(const std::string& text);
SimilarityMatrix load_similarity(const std::filesystem::path& path);

std::string similarity_to_csv(const SimilarityMatrix& s);
// 8-bit PGM heatmap, v -> round(255 * clamp(v, 0, 1)).
std::string similarity_to_pgm(const SimilarityMatrix& s);

}  // namespace taskfuse
