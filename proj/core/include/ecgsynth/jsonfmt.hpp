#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ecgsynth {

// Hand-rolled JSON emission. Artifacts must be byte-identical across runs,
// so doubles are always printed with 17 significant digits (round-trip exact)
// instead of whatever the serialization library of the day produces.

/// Format a double with %.17g. "nan"/"inf" are rejected upstream.
std::string fmt_double(double v);

/// Escape a string for a JSON string literal (adds the quotes).
std::string json_quote(const std::string& s);

/// [1.5,2.0,...] with fixed-precision doubles.
std::string json_array(const std::vector<double>& values);

/// FNV-1a 64-bit over a byte string; used for config hashes.
std::uint64_t fnv1a64(const std::string& bytes);

/// Hash rendered as 16 lowercase hex chars.
std::string hash_hex(std::uint64_t h);

}  // namespace ecgsynth
