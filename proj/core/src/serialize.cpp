#include "freqexit/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace freqexit {
namespace {

template <typename U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_unsigned_v<U>);
  char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    buf[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  }
  os.write(buf, sizeof(U));
}

template <typename U>
U get_le(std::istream& is, const char* what) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) {
    throw ParseError(std::string("parameter container truncated while reading ") + what);
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

void put_f64(std::ostream& os, double d) { put_le(os, std::bit_cast<std::uint64_t>(d)); }
double get_f64(std::istream& is) { return std::bit_cast<double>(get_le<std::uint64_t>(is, "value")); }

constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 32;

}  // namespace

namespace container {

void write(std::ostream& os, const std::vector<TensorEntry>& entries) {
  os.write(kMagic, 4);
  put_le<std::uint32_t>(os, kVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    std::visit(
        [&](const auto& t) {
          using T = std::decay_t<decltype(t)>;
          constexpr bool is_complex = std::is_same_v<T, TensorC>;
          put_le<std::uint8_t>(os, is_complex ? 1 : 0);
          put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
          for (auto ext : t.shape()) put_le<std::uint64_t>(os, ext);
          for (const auto& v : t.data()) {
            if constexpr (is_complex) {
              put_f64(os, v.real());
              put_f64(os, v.imag());
            } else {
              put_f64(os, v);
            }
          }
        },
        e.tensor);
  }
  if (!os) throw Error("failed writing parameter container");
}

std::vector<TensorEntry> read(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw ParseError("not a parameter container (bad magic)");
  }
  const auto version = get_le<std::uint32_t>(is, "version");
  if (version != kVersion) {
    throw ParseError("unsupported parameter container version " + std::to_string(version));
  }
  const auto count = get_le<std::uint32_t>(is, "entry count");
  std::vector<TensorEntry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorEntry e;
    const auto len = get_le<std::uint32_t>(is, "name length");
    e.name.resize(len);
    if (len > 0 && !is.read(e.name.data(), len)) throw ParseError("truncated entry name");
    const auto dtype = get_le<std::uint8_t>(is, "dtype");
    if (dtype > 1) throw ParseError("entry '" + e.name + "': unknown dtype " + std::to_string(dtype));
    const auto rank = get_le<std::uint32_t>(is, "rank");
    Shape shape(rank);
    std::uint64_t n = 1;
    for (auto& ext : shape) {
      const auto v = get_le<std::uint64_t>(is, "extent");
      ext = static_cast<std::size_t>(v);
      n *= v;
      if (n > kMaxElements) throw ParseError("entry '" + e.name + "' is implausibly large");
    }
    if (dtype == 0) {
      std::vector<double> data(n);
      for (auto& v : data) v = get_f64(is);
      e.tensor = TensorR(std::move(shape), std::move(data));
    } else {
      std::vector<Complex> data(n);
      for (auto& v : data) {
        const double re = get_f64(is);
        const double im = get_f64(is);
        v = Complex(re, im);
      }
      e.tensor = TensorC(std::move(shape), std::move(data));
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

void save(const std::filesystem::path& path, const std::vector<TensorEntry>& entries) {
  std::ostringstream os(std::ios::binary);
  write(os, entries);
  write_file_atomic(path, os.str());
}

std::vector<TensorEntry> load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  try {
    return read(is);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace container

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace freqexit
