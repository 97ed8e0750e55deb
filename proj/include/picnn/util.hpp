#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>

namespace picnn {

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view text);
std::uint64_t file_hash(const std::filesystem::path& path);
std::string hex64(std::uint64_t value);

/// Child seed for one component of a run: splitmix64 over the root seed,
/// a hash of the component name and a counter.
std::uint64_t derive_seed(std::uint64_t root, std::string_view component, std::uint64_t counter = 0);

using Rng = std::mt19937_64;

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// OS after every step (glibc only; a no-op elsewhere).
void tune_allocator();

}  // namespace picnn
