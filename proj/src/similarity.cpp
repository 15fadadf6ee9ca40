#include "taskfuse/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "taskfuse/util.hpp"

namespace taskfuse {

using nlohmann::json;

std::string to_string(SimMethod method) {
  return method == SimMethod::cka_unbiased ? "cka_unbiased" : "rsa";
}

SimMethod sim_method_from_string(const std::string& s) {
  if (s == "cka_unbiased" || s == "cka") return SimMethod::cka_unbiased;
  if (s == "rsa") return SimMethod::rsa;
  fail(ErrorKind::usage, "unknown similarity method: " + s);
}

int SimilarityMatrix::index_of(const TaskId& task) const {
  for (std::size_t i = 0; i < tasks.size(); ++i)
    if (tasks[i] == task) return static_cast<int>(i);
  return -1;
}

GramMatrix gram_linear(const ActivationMatrix& x) {
  const Eigen::Index n = x.n();
  GramMatrix k;
  k.values.resize(n, n);
  // Upper triangle once, then mirror, so symmetry is exact.
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i; j < n; ++j) {
      const double dot = x.data.row(i).dot(x.data.row(j));
      k.values(i, j) = dot;
      k.values(j, i) = dot;
    }
  }
  return k;
}

double hsic1(const GramMatrix& k, const GramMatrix& l) {
  const Eigen::Index n = k.n();
  if (l.n() != n)
    fail(ErrorKind::alignment, "gram matrices disagree on sample count: " +
                                   std::to_string(n) + " vs " + std::to_string(l.n()));
  if (n < 4)
    fail(ErrorKind::size, "hsic1 needs at least 4 samples, got " + std::to_string(n));

  Eigen::MatrixXd kt = k.values;
  Eigen::MatrixXd lt = l.values;
  kt.diagonal().setZero();
  lt.diagonal().setZero();

  const double nd = static_cast<double>(n);
  const double trace_kl = kt.cwiseProduct(lt.transpose()).sum();
  const double sum_k = kt.sum();
  const double sum_l = lt.sum();
  // 1' K~ L~ 1 = (K~' 1) . (L~ 1)
  const Eigen::VectorXd k_col_sums = kt.colwise().sum().transpose();
  const Eigen::VectorXd l_row_sums = lt.rowwise().sum();
  const double cross = k_col_sums.dot(l_row_sums);

  return (trace_kl + sum_k * sum_l / ((nd - 1.0) * (nd - 2.0)) - 2.0 * cross / (nd - 2.0)) /
         (nd * (nd - 3.0));
}

double cka_unbiased(const ActivationMatrix& x, const ActivationMatrix& y) {
  if (x.n() != y.n())
    fail(ErrorKind::alignment, "sample count mismatch: " + x.task.name + " has " +
                                   std::to_string(x.n()) + ", " + y.task.name + " has " +
                                   std::to_string(y.n()));
  const GramMatrix k = gram_linear(x);
  const GramMatrix l = gram_linear(y);
  const double kk = hsic1(k, k);
  const double ll = hsic1(l, l);
  if (kk <= 0.0)
    fail(ErrorKind::degenerate,
         "degenerate activations for task " + x.task.name + " (self-HSIC not positive)");
  if (ll <= 0.0)
    fail(ErrorKind::degenerate,
         "degenerate activations for task " + y.task.name + " (self-HSIC not positive)");
  return hsic1(k, l) / std::sqrt(kk * ll);
}

namespace {

double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double ma = a.mean();
  const double mb = b.mean();
  const Eigen::ArrayXd da = a.array() - ma;
  const Eigen::ArrayXd db = b.array() - mb;
  const double cov = (da * db).sum();
  const double va = (da * da).sum();
  const double vb = (db * db).sum();
  return cov / std::sqrt(va * vb);
}

// Average ranks for ties.
std::vector<double> rank_average(const std::vector<double>& v) {
  const std::size_t m = v.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(m);
  std::size_t i = 0;
  while (i < m) {
    std::size_t j = i;
    while (j + 1 < m && v[order[j + 1]] == v[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t p = i; p <= j; ++p) ranks[order[p]] = rank;
    i = j + 1;
  }
  return ranks;
}

std::vector<double> rdm_upper(const ActivationMatrix& x) {
  const Eigen::Index n = x.n();
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd row = x.data.row(i);
    if ((row.array() - row.mean()).square().sum() == 0.0)
      fail(ErrorKind::degenerate,
           "zero-variance sample row " + std::to_string(i) + " for task " + x.task.name);
  }
  std::vector<double> upper;
  upper.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      upper.push_back(1.0 - pearson(x.data.row(i), x.data.row(j)));
  return upper;
}

}  // namespace

double rsa(const ActivationMatrix& x, const ActivationMatrix& y) {
  if (x.n() != y.n())
    fail(ErrorKind::alignment, "sample count mismatch: " + x.task.name + " has " +
                                   std::to_string(x.n()) + ", " + y.task.name + " has " +
                                   std::to_string(y.n()));
  if (x.n() < 3)
    fail(ErrorKind::size, "rsa needs at least 3 samples, got " + std::to_string(x.n()));

  const std::vector<double> ux = rdm_upper(x);
  const std::vector<double> uy = rdm_upper(y);
  const std::vector<double> rx = rank_average(ux);
  const std::vector<double> ry = rank_average(uy);

  Eigen::VectorXd a = Eigen::Map<const Eigen::VectorXd>(rx.data(), static_cast<Eigen::Index>(rx.size()));
  Eigen::VectorXd b = Eigen::Map<const Eigen::VectorXd>(ry.data(), static_cast<Eigen::Index>(ry.size()));
  return pearson(a, b);
}

SimilarityMatrix pairwise_similarity(const ActivationBundle& bundle, SimMethod method) {
  const int t = static_cast<int>(bundle.entries.size());
  if (t < 2) fail(ErrorKind::size, "pairwise similarity needs at least 2 tasks");

  SimilarityMatrix s;
  s.stage = bundle.stage;
  s.tasks = bundle.tasks();
  s.method = method;
  s.values = Eigen::MatrixXd::Zero(t, t);
  s.values.diagonal().setOnes();  // self-value of both metrics

  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < t; ++i)
    for (int j = i + 1; j < t; ++j) pairs.emplace_back(i, j);

  parallel_for(pairs.size(), [&](std::size_t p) {
    const auto [i, j] = pairs[p];
    try {
      const double v = method == SimMethod::cka_unbiased
                           ? cka_unbiased(bundle.entries[i], bundle.entries[j])
                           : rsa(bundle.entries[i], bundle.entries[j]);
      s.values(i, j) = v;
      s.values(j, i) = v;
    } catch (const Error& e) {
      fail(e.kind(), "pair (" + s.tasks[i].name + ", " + s.tasks[j].name + "): " + e.what());
    }
  });
  return s;
}

SimilarityMatrix restrict_to(const SimilarityMatrix& s, const std::vector<TaskId>& subset) {
  SimilarityMatrix out;
  out.stage = s.stage;
  out.method = s.method;
  out.tasks = subset;
  const int t = static_cast<int>(subset.size());
  out.values.resize(t, t);
  for (int i = 0; i < t; ++i) {
    const int si = s.index_of(subset[i]);
    if (si < 0) fail(ErrorKind::membership, "task not in matrix: " + subset[i].name);
    for (int j = 0; j < t; ++j) {
      const int sj = s.index_of(subset[j]);
      if (sj < 0) fail(ErrorKind::membership, "task not in matrix: " + subset[j].name);
      out.values(i, j) = s.values(si, sj);
    }
  }
  return out;
}

std::string similarity_to_json(const SimilarityMatrix& s) {
  json j;
  j["stage"] = s.stage.index;
  j["method"] = to_string(s.method);
  j["tasks"] = json::array();
  for (const auto& t : s.tasks) j["tasks"].push_back(t.name);
  j["values"] = json::array();
  for (Eigen::Index i = 0; i < s.values.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index c = 0; c < s.values.cols(); ++c) row.push_back(s.values(i, c));
    j["values"].push_back(row);
  }
  return j.dump(2) + "\n";
}

SimilarityMatrix similarity_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("bad similarity json: ") + e.what());
  }
  SimilarityMatrix s;
  try {
    s.stage.index = j.at("stage").get<int>();
    s.method = sim_method_from_string(j.at("method").get<std::string>());
    for (const auto& t : j.at("tasks")) s.tasks.push_back(TaskId{t.get<std::string>()});
    const auto& rows = j.at("values");
    const int t = static_cast<int>(s.tasks.size());
    if (static_cast<int>(rows.size()) != t)
      fail(ErrorKind::format, "similarity matrix row count does not match task count");
    s.values.resize(t, t);
    for (int i = 0; i < t; ++i) {
      if (static_cast<int>(rows[i].size()) != t)
        fail(ErrorKind::format, "similarity matrix is not square");
      for (int c = 0; c < t; ++c) s.values(i, c) = rows[i][c].get<double>();
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("bad similarity json: ") + e.what());
  }

  for (int i = 0; i < s.task_count(); ++i)
    for (int c = i + 1; c < s.task_count(); ++c)
      if (s.values(i, c) != s.values(c, i))
        fail(ErrorKind::data, "similarity matrix is not symmetric at (" +
                                  s.tasks[i].name + ", " + s.tasks[c].name + ")");
  if (!s.values.allFinite()) fail(ErrorKind::data, "non-finite similarity value");
  for (int i = 0; i < s.task_count(); ++i)
    for (int c = 0; c < s.task_count(); ++c)
      if (s.values(i, c) < -1.0 - 1e-9 || s.values(i, c) > 1.0 + 1e-9)
        fail(ErrorKind::data, "similarity value out of range at (" + s.tasks[i].name + ", " +
                                  s.tasks[c].name + ")");
  return s;
}

SimilarityMatrix load_similarity(const std::filesystem::path& path) {
  return similarity_from_json(read_file(path));
}

std::string similarity_to_csv(const SimilarityMatrix& s) {
  std::ostringstream out;
  out.precision(17);
  for (std::size_t i = 0; i < s.tasks.size(); ++i)
    out << s.tasks[i].name << (i + 1 < s.tasks.size() ? "," : "\n");
  for (Eigen::Index i = 0; i < s.values.rows(); ++i)
    for (Eigen::Index c = 0; c < s.values.cols(); ++c)
      out << s.values(i, c) << (c + 1 < s.values.cols() ? "," : "\n");
  return out.str();
}

std::string similarity_to_pgm(const SimilarityMatrix& s) {
  const int t = s.task_count();
  std::string out = "P5\n" + std::to_string(t) + " " + std::to_string(t) + "\n255\n";
  for (int i = 0; i < t; ++i)
    for (int c = 0; c < t; ++c) {
      const double v = std::clamp(s.values(i, c), 0.0, 1.0);
      out += static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * v)));
    }
  return out;
}

}  // namespace taskfuse
