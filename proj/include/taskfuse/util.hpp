#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <string>

namespace taskfuse {

// Parallelism cap from TASKFUSE_THREADS (unset or 0 means auto).
int thread_cap();

// Runs body(0..count-1) on up to thread_cap() workers. Results must be
// written to disjoint slots; the first exception is rethrown after join.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

// Write-temp-then-rename so readers never observe a partial file.
void atomic_write_file(const std::filesystem::path& path, const std::string& content);

std::string read_file(const std::filesystem::path& path);

}  // namespace taskfuse
