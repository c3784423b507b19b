#include "arl/canonical.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

namespace arl {

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t hash_tokens(std::span<const std::uint32_t> tokens) {
  std::uint64_t h = 14695981039346656037ull;
  for (std::uint32_t t : tokens) {
    for (int shift = 0; shift < 32; shift += 8) {
      h ^= static_cast<std::uint8_t>((t >> shift) & 0xff);
      h *= 1099511628211ull;
    }
  }
  return h;
}

Json canonicalize(const Json& v) {
  if (v.is_object()) {
    Json out = Json::object();
    for (auto it = v.begin(); it != v.end(); ++it) out[it.key()] = canonicalize(it.value());
    return out;
  }
  if (v.is_array()) {
    Json out = Json::array();
    for (const auto& e : v) out.push_back(canonicalize(e));
    return out;
  }
  if (v.is_number_float()) {
    double d = v.get<double>();
    // Integer-valued reals unify with integers (1.0 == 1).
    if (std::isfinite(d) && std::floor(d) == d &&
        std::abs(d) <= 9007199254740992.0) {
      return Json(static_cast<std::int64_t>(d));
    }
    return v;
  }
  return v;
}

namespace {

void dump_rec(const Json& v, std::string& out) {
  switch (v.type()) {
    case Json::value_t::object: {
      out += '{';
      bool first = true;
      for (auto it = v.begin(); it != v.end(); ++it) {
        if (!first) out += ',';
        first = false;
        out += Json(it.key()).dump();
        out += ':';
        dump_rec(it.value(), out);
      }
      out += '}';
      break;
    }
    case Json::value_t::array: {
      out += '[';
      bool first = true;
      for (const auto& e : v) {
        if (!first) out += ',';
        first = false;
        dump_rec(e, out);
      }
      out += ']';
      break;
    }
    case Json::value_t::number_float: {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.17g", v.get<double>());
      out += buf;
      break;
    }
    default:
      out += v.dump();
  }
}

}  // namespace

std::string canonical_dump(const Json& v) {
  std::string out;
  dump_rec(canonicalize(v), out);
  return out;
}

}  // namespace arl
