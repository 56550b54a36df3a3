#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace flplas {

using Rng = std::mt19937_64;

// FNV-1a, used to fold strings into stream keys.
std::uint64_t hash_name(std::string_view name);

// Independent generator for a key tuple such as (seed, purpose, round,
// client). Equal keys always yield the same stream.
Rng make_stream(std::initializer_list<std::uint64_t> key);

// Purpose tags keep streams for different consumers apart.
namespace stream {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kPartition = 2;
inline constexpr std::uint64_t kSampling = 3;
inline constexpr std::uint64_t kShuffle = 4;
inline constexpr std::uint64_t kPoison = 5;
inline constexpr std::uint64_t kMalicious = 6;
inline constexpr std::uint64_t kFlameNoise = 7;
inline constexpr std::uint64_t kSynth = 8;
inline constexpr std::uint64_t kRoot = 9;
inline constexpr std::uint64_t kInject = 10;
}  // namespace stream

}  // namespace flplas
