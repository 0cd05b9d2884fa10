#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace metaflow {

// Stable exit-code contract for the CLI.
enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,
  kExitNumeric = 3,
  kExitIo = 4,
};

class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class NumericError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class IoError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view s);

/// Counter-based uniform generator: sample i of a named stream is a pure
/// function of (seed, stream, i), so draws are reproducible regardless of
/// evaluation order or thread count.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::string_view stream);

  /// Uniform in [0, 1).
  double uniform(std::uint64_t counter) const;
  double uniform(std::uint64_t counter, double lo, double hi) const;

 private:
  std::uint64_t key_;
};

std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t seed = 0);

/// SHA-256 of a byte buffer, lowercase hex.
std::string sha256_hex(const void* data, std::size_t len);
std::string sha256_hex(std::string_view s);

/// Runs fn(0..n-1) on up to `workers` threads. Results must be written to
/// per-index slots by the caller; completion order is unspecified but all
/// jobs are done on return. workers <= 1 runs inline.
void parallel_for(std::size_t n, std::size_t workers,
                  const std::function<void(std::size_t)>& fn);

/// Worker cap: METAFLOW_THREADS env var if set, else hardware concurrency.
std::size_t default_workers();

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, std::string_view content);

}  // namespace metaflow
