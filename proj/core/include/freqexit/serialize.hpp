#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include "freqexit/tensor.hpp"

namespace freqexit {

/// One named tensor inside a parameter container.
struct TensorEntry {
  std::string name;
  std::variant<TensorR, TensorC> tensor;

  bool operator==(const TensorEntry&) const = default;
};

/// Flat little-endian parameter container.
///
///   header : "FXT1" | version u32 | entry count u32
///   entry  : name length u32 | UTF-8 name | dtype u8 (0 real, 1 complex)
///            | rank u32 | extents u64[rank] | values f64[...]
///
/// Complex values are stored as interleaved (re, im) pairs. All integers and
/// doubles are little-endian regardless of host byte order.
namespace container {

inline constexpr char kMagic[4] = {'F', 'X', 'T', '1'};
inline constexpr std::uint32_t kVersion = 1;

void write(std::ostream& os, const std::vector<TensorEntry>& entries);
std::vector<TensorEntry> read(std::istream& is);

/// Writes to a temporary sibling and renames into place.
void save(const std::filesystem::path& path, const std::vector<TensorEntry>& entries);
std::vector<TensorEntry> load(const std::filesystem::path& path);

}  // namespace container

/// Writes `bytes` to `path` via a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

/// 64-bit FNV-1a over the bytes of a file; used for reproducibility checks.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace freqexit
