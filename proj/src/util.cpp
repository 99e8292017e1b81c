#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <string>

#include "depthlens/error.hpp"
#include "depthlens/hash.hpp"
#include "depthlens/parallel.hpp"

namespace depthlens {

std::size_t resolve_threads(std::optional<std::size_t> requested) {
  if (requested) return std::max<std::size_t>(*requested, 1);
  if (const char* env = std::getenv("DEPTHLENS_THREADS"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    const unsigned long long n = std::strtoull(env, &end, 10);
    if (end != nullptr && *end == '\0' && n > 0) return static_cast<std::size_t>(n);
    throw ConfigError("DEPTHLENS_THREADS must be a positive integer, got '" + std::string(env) + "'");
  }
  return 1;
}

void Fnv1a::update(std::span<const std::byte> bytes) {
  for (std::byte b : bytes) {
    state_ ^= static_cast<std::uint64_t>(b);
    state_ *= 0x100000001b3ULL;
  }
}

void Fnv1a::update(std::string_view text) {
  update(std::as_bytes(std::span<const char>(text.data(), text.size())));
}

std::string Fnv1a::hex() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(state_));
  return buf;
}

std::string hash_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for hashing");
  Fnv1a h;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h.update(std::string_view(buf, static_cast<std::size_t>(in.gcount())));
  }
  return h.hex();
}

std::string hash_bytes(std::string_view bytes) {
  Fnv1a h;
  h.update(bytes);
  return h.hex();
}

}  // namespace depthlens
