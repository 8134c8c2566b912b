#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "g32/layout.hpp"

namespace g32 {

struct Segment {
  uint32_t vaddr = 0;  // page-aligned
  uint32_t perms = 0;  // kPermR | kPermW | kPermX
  uint32_t memlen = 0;  // mapped extent; >= bytes.size(), zero-filled tail
  std::vector<uint8_t> bytes;

  bool operator==(const Segment&) const = default;
};

// A loadable guest program: the unit the assembler produces, the
// ".gimg" container stores, and the VM loader consumes.
struct Image {
  uint32_t entry = 0;
  std::vector<Segment> segments;
  std::vector<uint8_t> args;
  std::vector<std::string> env;  // NAME=VALUE
  std::string name = "app";     // module name; not serialized

  bool operator==(const Image& o) const {
    return entry == o.entry && segments == o.segments && args == o.args &&
           env == o.env;
  }
};

struct ImageError : std::runtime_error {
  enum class Kind {
    BadMagic,
    TruncatedFile,
    InvariantViolation,
  };
  Kind kind;
  ImageError(Kind k, const std::string& msg)
      : std::runtime_error(msg), kind(k) {}
};

// Throws ImageError{InvariantViolation} when segments overlap, the entry
// is not executable, or anything intersects the engine arena or the
// thread-frame region.
void validate_image(const Image& img);

// "GIMG" container, little-endian throughout:
//   magic "GIMG", u32 version=1, u32 entry, u32 nsegs,
//   nsegs * { u32 vaddr, u32 filelen, u32 memlen, u32 perms, u32 offset },
//   u32 argslen + bytes, u32 envcount + envcount * (u32 len + bytes),
//   segment byte payloads at their recorded offsets.
std::vector<uint8_t> write_image(const Image& img);
Image load_image(const std::vector<uint8_t>& bytes);

Image load_image_file(const std::string& path);
void write_image_file(const Image& img, const std::string& path);

}  // namespace g32
