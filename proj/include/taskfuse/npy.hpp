#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace taskfuse::npy {

// In-memory NPY payload. Only the subset this project exchanges is
// supported: version 1.0, C-order, dtype <f4 or <f8, rank 2 or 4.
struct Array {
  std::vector<std::size_t> shape;
  std::vector<double> data;  // row-major, converted to 64-bit on load

  std::size_t element_count() const {
    std::size_t n = 1;
    for (std::size_t s : shape) n *= s;
    return n;
  }
};

Array load(const std::filesystem::path& path);

// Always writes <f8.
void save(const std::filesystem::path& path, const Array& array);

}  // namespace taskfuse::npy
