#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>

#include "taskfuse/error.hpp"

namespace taskfuse::eval {

inline constexpr std::array<double, 3> kLowBand{0.25, 0.5, 1.0};
inline constexpr std::array<double, 2> kHighBand{4.0, 8.0};

// min(eps+4, ceil(1.25*eps)) iterations, floored to an integer count. The
// ceil term only takes part once it prescribes at least two steps; below
// that the eps+4 budget governs, giving {4,4,2,5,10} for the reported
// eps values {0.25, 0.5, 1, 4, 8}.
int pgd_iterations(double epsilon);

struct AttackConfig {
  double epsilon = 1.0;
  double step_size = 1.0;
  int iterations = 1;

  static AttackConfig for_epsilon(double epsilon, double step_size = 1.0);
};

struct Bounds {
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
};

struct LossAndGrad {
  double loss = 0.0;
  Eigen::MatrixXd grad;  // d loss / d x, same shape as x
};

using ModelFn = std::function<LossAndGrad(const Eigen::MatrixXd&)>;

// L-inf projected gradient ascent on the model loss, starting from the
// clean input (no random start). The result stays within epsilon of x and
// inside bounds.
Eigen::MatrixXd pgd_attack(const ModelFn& model, const Eigen::MatrixXd& x,
                           const AttackConfig& cfg, const Bounds& bounds = {});

// Additive Gaussian noise with std severity * 0.04 * (hi - lo), clipped to
// [lo, hi]. Element streams are keyed by (seed, flat index).
Eigen::MatrixXd noise_corruption(const Eigen::MatrixXd& x, int severity,
                                 std::uint64_t seed, double lo, double hi);

// A pixel is an edge iff any 4-neighbor carries a different label.
Eigen::MatrixXi seg_to_edges(const Eigen::MatrixXi& labels);

struct NormalMap {
  Eigen::MatrixXd nx, ny, nz;
};

// Height-field normals from central differences (one-sided at borders),
// n proportional to (-dz/dx, -dz/dy, 1), unit length.
NormalMap depth_to_normals(const Eigen::MatrixXd& depth);

// Pixel accuracy between edges derived from the segmentation and the edge
// prediction binarized at 0.5.
double semantic_consistency(const Eigen::MatrixXi& seg_pred,
                            const Eigen::MatrixXd& edge_pred);

// Mean per-pixel cosine similarity between normals derived from the depth
// prediction and the predicted normals.
double geometric_consistency(const Eigen::MatrixXd& depth_pred,
                             const NormalMap& normal_pred);

// 0.5 * ((s_net - s_base)/s_base - (d_net - d_base)/d_base) * 100; the
// second task's metric is lower-is-better, hence the subtraction.
double rel_improvement(double s_net, double d_net, double s_base, double d_base);

// Mean over the band members; every member must be present.
double band_average(const std::map<double, double>& values_per_eps,
                    std::span<const double> band);

}  // namespace taskfuse::eval
