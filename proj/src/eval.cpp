#include "taskfuse/eval.hpp"

#include <algorithm>
#include <cmath>

#include "taskfuse/rng.hpp"

namespace taskfuse::eval {

int pgd_iterations(double epsilon) {
  if (epsilon <= 0) fail(ErrorKind::usage, "epsilon must be positive");
  const double kurakin = std::ceil(1.25 * epsilon);
  const double budget = epsilon + 4.0;
  const double raw = kurakin >= 2.0 ? std::min(budget, kurakin) : budget;
  return std::max(1, static_cast<int>(std::floor(raw)));
}

AttackConfig AttackConfig::for_epsilon(double epsilon, double step_size) {
  if (epsilon <= 0) fail(ErrorKind::usage, "epsilon must be positive");
  if (step_size <= 0) fail(ErrorKind::usage, "step size must be positive");
  return AttackConfig{epsilon, step_size, pgd_iterations(epsilon)};
}

Eigen::MatrixXd pgd_attack(const ModelFn& model, const Eigen::MatrixXd& x,
                           const AttackConfig& cfg, const Bounds& bounds) {
  if (cfg.epsilon <= 0) fail(ErrorKind::usage, "epsilon must be positive");
  if (cfg.step_size <= 0) fail(ErrorKind::usage, "step size must be positive");
  if (cfg.iterations < 1) fail(ErrorKind::usage, "iterations must be at least 1");

  const Eigen::MatrixXd lo_ball = x.array() - cfg.epsilon;
  const Eigen::MatrixXd hi_ball = x.array() + cfg.epsilon;

  Eigen::MatrixXd adv = x;
  for (int it = 0; it < cfg.iterations; ++it) {
    const LossAndGrad lg = model(adv);
    if (lg.grad.rows() != x.rows() || lg.grad.cols() != x.cols())
      fail(ErrorKind::shape, "model gradient shape does not match the input");
    if (!lg.grad.allFinite()) fail(ErrorKind::numeric, "non-finite model gradient");

    const Eigen::MatrixXd step = lg.grad.unaryExpr(
        [](double g) { return g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0); });
    adv += cfg.step_size * step;
    adv = adv.cwiseMax(lo_ball).cwiseMin(hi_ball);
    adv = adv.cwiseMax(bounds.lo).cwiseMin(bounds.hi);
  }
  return adv;
}

Eigen::MatrixXd noise_corruption(const Eigen::MatrixXd& x, int severity, std::uint64_t seed,
                                 double lo, double hi) {
  if (severity < 1 || severity > 5)
    fail(ErrorKind::range, "severity must lie in 1..5, got " + std::to_string(severity));
  if (!(hi > lo)) fail(ErrorKind::usage, "bounds must satisfy lo < hi");

  const double sigma = static_cast<double>(severity) * 0.04 * (hi - lo);
  Eigen::MatrixXd out(x.rows(), x.cols());
  const std::uint64_t base = hash_mix(seed, "noise");
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const std::uint64_t flat =
          static_cast<std::uint64_t>(i) * static_cast<std::uint64_t>(x.cols()) +
          static_cast<std::uint64_t>(j);
      Rng rng(hash_mix(base, flat));
      out(i, j) = std::clamp(x(i, j) + sigma * rng.normal(), lo, hi);
    }
  }
  return out;
}

Eigen::MatrixXi seg_to_edges(const Eigen::MatrixXi& labels) {
  const Eigen::Index h = labels.rows();
  const Eigen::Index w = labels.cols();
  Eigen::MatrixXi edges = Eigen::MatrixXi::Zero(h, w);
  for (Eigen::Index r = 0; r < h; ++r)
    for (Eigen::Index c = 0; c < w; ++c) {
      const int v = labels(r, c);
      if ((r > 0 && labels(r - 1, c) != v) || (r + 1 < h && labels(r + 1, c) != v) ||
          (c > 0 && labels(r, c - 1) != v) || (c + 1 < w && labels(r, c + 1) != v))
        edges(r, c) = 1;
    }
  return edges;
}

NormalMap depth_to_normals(const Eigen::MatrixXd& depth) {
  if (!depth.allFinite()) fail(ErrorKind::data, "non-finite depth value");
  const Eigen::Index h = depth.rows();
  const Eigen::Index w = depth.cols();
  NormalMap out;
  out.nx.resize(h, w);
  out.ny.resize(h, w);
  out.nz.resize(h, w);
  for (Eigen::Index r = 0; r < h; ++r) {
    for (Eigen::Index c = 0; c < w; ++c) {
      double zx, zy;
      if (w == 1)
        zx = 0.0;
      else if (c == 0)
        zx = depth(r, 1) - depth(r, 0);
      else if (c == w - 1)
        zx = depth(r, w - 1) - depth(r, w - 2);
      else
        zx = 0.5 * (depth(r, c + 1) - depth(r, c - 1));
      if (h == 1)
        zy = 0.0;
      else if (r == 0)
        zy = depth(1, c) - depth(0, c);
      else if (r == h - 1)
        zy = depth(h - 1, c) - depth(h - 2, c);
      else
        zy = 0.5 * (depth(r + 1, c) - depth(r - 1, c));
      const double norm = std::sqrt(zx * zx + zy * zy + 1.0);
      out.nx(r, c) = -zx / norm;
      out.ny(r, c) = -zy / norm;
      out.nz(r, c) = 1.0 / norm;
    }
  }
  return out;
}

double semantic_consistency(const Eigen::MatrixXi& seg_pred, const Eigen::MatrixXd& edge_pred) {
  if (seg_pred.rows() != edge_pred.rows() || seg_pred.cols() != edge_pred.cols())
    fail(ErrorKind::shape, "segmentation and edge maps disagree on shape");
  const Eigen::MatrixXi edges = seg_to_edges(seg_pred);
  long match = 0;
  for (Eigen::Index r = 0; r < edges.rows(); ++r)
    for (Eigen::Index c = 0; c < edges.cols(); ++c) {
      const int predicted = edge_pred(r, c) >= 0.5 ? 1 : 0;
      if (predicted == edges(r, c)) ++match;
    }
  return static_cast<double>(match) / static_cast<double>(edges.size());
}

double geometric_consistency(const Eigen::MatrixXd& depth_pred, const NormalMap& normal_pred) {
  if (normal_pred.nx.rows() != depth_pred.rows() || normal_pred.nx.cols() != depth_pred.cols() ||
      normal_pred.ny.rows() != depth_pred.rows() || normal_pred.nz.rows() != depth_pred.rows())
    fail(ErrorKind::shape, "normal map shape does not match the depth map");
  const NormalMap derived = depth_to_normals(depth_pred);
  double sum = 0.0;
  for (Eigen::Index r = 0; r < depth_pred.rows(); ++r)
    for (Eigen::Index c = 0; c < depth_pred.cols(); ++c) {
      const double px = normal_pred.nx(r, c);
      const double py = normal_pred.ny(r, c);
      const double pz = normal_pred.nz(r, c);
      const double pn = std::sqrt(px * px + py * py + pz * pz);
      if (pn == 0.0)
        fail(ErrorKind::degenerate, "zero-vector normal at (" + std::to_string(r) + "," +
                                        std::to_string(c) + ")");
      const double dot = derived.nx(r, c) * px + derived.ny(r, c) * py + derived.nz(r, c) * pz;
      sum += dot / pn;  // derived normals are unit length
    }
  return sum / static_cast<double>(depth_pred.size());
}

double rel_improvement(double s_net, double d_net, double s_base, double d_base) {
  if (s_base == 0.0 || d_base == 0.0)
    fail(ErrorKind::division, "baseline metric is zero");
  return 0.5 * ((s_net - s_base) / s_base - (d_net - d_base) / d_base) * 100.0;
}

double band_average(const std::map<double, double>& values_per_eps,
                    std::span<const double> band) {
  double sum = 0.0;
  for (double eps : band) {
    const auto it = values_per_eps.find(eps);
    if (it == values_per_eps.end())
      fail(ErrorKind::coverage, "no value for epsilon " + std::to_string(eps));
    sum += it->second;
  }
  return sum / static_cast<double>(band.size());
}

}  // namespace taskfuse::eval
