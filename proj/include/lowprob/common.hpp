#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace lowprob {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kSchemaVersion = 1;

// Bad user input or configuration. Maps to CLI exit code 2.
struct input_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values, failed factorizations, degenerate weights. Exit code 3.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A pipeline stage failed. Exit code 4.
struct stage_error : std::runtime_error {
    stage_error(const std::string& stage, const std::string& what)
        : std::runtime_error(stage + ": " + what), stage_name(stage) {}
    std::string stage_name;
};

uint64_t fnv1a64(const void* data, size_t n);
uint64_t fnv1a64_file(const std::string& path);
std::string hash_hex(uint64_t h);

// Shortest decimal representation that round-trips the double exactly.
std::string format_double(double v);

// RFC 4180 field quoting (used for the diagnostics JSON column).
std::string csv_quote(const std::string& s);
std::string csv_unquote(const std::string& s);

// Splits [0, n) into fixed-size granules and runs fn(chunk_index, begin, end)
// for each. Granule boundaries depend only on n and granule, never on the
// thread count, so callers that merge per-chunk results in chunk order get
// identical output for any `threads`.
void parallel_chunks(int64_t n, int64_t granule, int threads,
                     const std::function<void(int64_t chunk, int64_t begin, int64_t end)>& fn);

// LOWPROB_THREADS env var if set, else 1.
int default_thread_count();

}  // namespace lowprob
