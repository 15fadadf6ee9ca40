#include "taskfuse/activations.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <set>
#include <sstream>

#include "taskfuse/npy.hpp"
#include "taskfuse/util.hpp"

namespace taskfuse {
namespace {

void check_finite(const Eigen::MatrixXd& m, const std::string& where) {
  if (!m.allFinite()) fail(ErrorKind::data, "non-finite value in " + where);
}

Eigen::MatrixXd parse_csv(const std::string& text, const std::string& path) {
  std::vector<std::vector<double>> rows;
  std::istringstream lines(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    std::size_t pos = 0;
    while (true) {
      const std::size_t comma = line.find(',', pos);
      const std::string cell =
          line.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
      double value = 0.0;
      const char* begin = cell.data();
      const char* end = begin + cell.size();
      while (begin < end && (*begin == ' ' || *begin == '\t')) ++begin;
      while (end > begin && (end[-1] == ' ' || end[-1] == '\t')) --end;
      const auto result = std::from_chars(begin, end, value);
      if (result.ec != std::errc{} || result.ptr != end)
        fail(ErrorKind::format,
             "bad csv cell '" + cell + "' at line " + std::to_string(line_no) + ": " + path);
      row.push_back(value);
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (!rows.empty() && row.size() != rows.front().size())
      fail(ErrorKind::format, "ragged csv row at line " + std::to_string(line_no) + ": " + path);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) fail(ErrorKind::format, "empty csv file: " + path);

  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()),
                    static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return m;
}

}  // namespace

const ActivationMatrix* ActivationBundle::find(const TaskId& task) const {
  for (const auto& e : entries)
    if (e.task == task) return &e;
  return nullptr;
}

std::vector<TaskId> ActivationBundle::tasks() const {
  std::vector<TaskId> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(e.task);
  return out;
}

ActivationMatrix pool_spatial(const RawActivationTensor& t, PoolMode mode,
                              const TaskId& task, StageId stage) {
  if (t.n < 1) fail(ErrorKind::shape, "tensor has no samples");
  if (t.c == 0 || t.h * t.w == 0)
    fail(ErrorKind::shape, "tensor has empty channel or spatial extent");
  if (t.data.size() != t.n * t.c * t.h * t.w)
    fail(ErrorKind::shape, "tensor data length does not match shape");

  const std::size_t hw = t.h * t.w;
  ActivationMatrix out;
  out.task = task;
  out.stage = stage;

  if (mode == PoolMode::spatial_mean) {
    out.data.resize(static_cast<Eigen::Index>(t.n), static_cast<Eigen::Index>(t.c));
    for (std::size_t i = 0; i < t.n; ++i) {
      for (std::size_t c = 0; c < t.c; ++c) {
        const double* cell = t.data.data() + (i * t.c + c) * hw;
        double sum = 0.0;
        for (std::size_t p = 0; p < hw; ++p) sum += cell[p];
        out.data(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) =
            sum / static_cast<double>(hw);
      }
    }
  } else {
    out.data.resize(static_cast<Eigen::Index>(t.n), static_cast<Eigen::Index>(hw));
    for (std::size_t i = 0; i < t.n; ++i) {
      for (std::size_t p = 0; p < hw; ++p) {
        double sum = 0.0;
        for (std::size_t c = 0; c < t.c; ++c) sum += t.data[(i * t.c + c) * hw + p];
        out.data(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p)) =
            sum / static_cast<double>(t.c);
      }
    }
  }
  return out;
}

ActivationMatrix load_activation_matrix(const std::filesystem::path& path, FileFormat format,
                                        const TaskId& task, StageId stage, PoolMode pool) {
  ActivationMatrix out;
  out.task = task;
  out.stage = stage;

  if (format == FileFormat::csv) {
    out.data = parse_csv(read_file(path), path.string());
  } else {
    const npy::Array array = npy::load(path);
    if (array.shape.size() == 2) {
      out.data.resize(static_cast<Eigen::Index>(array.shape[0]),
                      static_cast<Eigen::Index>(array.shape[1]));
      for (std::size_t i = 0; i < array.shape[0]; ++i)
        for (std::size_t j = 0; j < array.shape[1]; ++j)
          out.data(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
              array.data[i * array.shape[1] + j];
    } else {
      RawActivationTensor t;
      t.n = array.shape[0];
      t.c = array.shape[1];
      t.h = array.shape[2];
      t.w = array.shape[3];
      t.data = array.data;
      out = pool_spatial(t, pool, task, stage);
    }
  }

  check_finite(out.data, path.string());
  if (out.n() < 4)
    fail(ErrorKind::size, "need at least 4 samples, got " + std::to_string(out.n()) + ": " +
                              path.string());
  return out;
}

ActivationBundle make_bundle(StageId stage, std::vector<ActivationMatrix> matrices) {
  if (matrices.size() < 2)
    fail(ErrorKind::size, "a bundle needs at least 2 matrices, got " +
                              std::to_string(matrices.size()));

  std::set<TaskId> seen;
  const Eigen::Index n = matrices.front().n();
  for (const auto& m : matrices) {
    if (!seen.insert(m.task).second)
      fail(ErrorKind::identity, "duplicate task in bundle: " + m.task.name);
    if (m.n() != n)
      fail(ErrorKind::alignment, "sample count mismatch in bundle: task " + m.task.name +
                                     " has " + std::to_string(m.n()) + " rows, expected " +
                                     std::to_string(n));
  }

  ActivationBundle bundle;
  bundle.stage = stage;
  bundle.entries = std::move(matrices);
  return bundle;
}

}  // namespace taskfuse
