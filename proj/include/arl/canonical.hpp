#pragma once

#include <cstdint>
#include <span>
#include <string>

#include <json.hpp>

namespace arl {

using Json = nlohmann::json;

// FNV-1a over an arbitrary byte sequence.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

// FNV-1a over token ids, each hashed as 4 little-endian bytes.
std::uint64_t hash_tokens(std::span<const std::uint32_t> tokens);

// Canonical form of an argument value: object keys sorted (nlohmann default),
// integer-valued reals collapsed to integers, strings left untouched.
Json canonicalize(const Json& v);

// Deterministic text rendering of a canonical value. Reals use 17 significant
// digits so distinct doubles never collide.
std::string canonical_dump(const Json& v);

}  // namespace arl
