#include "g32/image.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <fstream>

namespace g32 {

namespace {

constexpr uint32_t kMagic = 0x474D4947;  // "GIMG"
constexpr uint32_t kVersion = 1;

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(v & 0xFF);
  out.push_back((v >> 8) & 0xFF);
  out.push_back((v >> 16) & 0xFF);
  out.push_back((v >> 24) & 0xFF);
}

struct Reader {
  const std::vector<uint8_t>& buf;
  size_t pos = 0;

  uint32_t u32() {
    if (pos + 4 > buf.size()) {
      throw ImageError(ImageError::Kind::TruncatedFile,
                       "container truncated");
    }
    uint32_t v = buf[pos] | (buf[pos + 1] << 8) | (buf[pos + 2] << 16) |
                 (static_cast<uint32_t>(buf[pos + 3]) << 24);
    pos += 4;
    return v;
  }
  std::vector<uint8_t> bytes(size_t n) {
    if (pos + n > buf.size()) {
      throw ImageError(ImageError::Kind::TruncatedFile,
                       "container truncated");
    }
    std::vector<uint8_t> out(buf.begin() + pos, buf.begin() + pos + n);
    pos += n;
    return out;
  }
};

uint32_t pages_of(uint32_t memlen) {
  return (memlen + kPageSize - 1) / kPageSize;
}

}  // namespace

void validate_image(const Image& img) {
  auto fail = [](const std::string& msg) {
    throw ImageError(ImageError::Kind::InvariantViolation, msg);
  };
  if (img.segments.empty()) fail("image has no segments");

  struct Range {
    uint32_t lo, hi;  // page-granular byte range
  };
  std::vector<Range> ranges;
  for (const auto& s : img.segments) {
    if (s.vaddr % kPageSize != 0) {
      fail(fmt::format("segment at 0x{:08X} is not page-aligned", s.vaddr));
    }
    if (s.memlen == 0 || s.bytes.size() > s.memlen) {
      fail(fmt::format("segment at 0x{:08X} has bad lengths", s.vaddr));
    }
    uint64_t end = static_cast<uint64_t>(s.vaddr) +
                   static_cast<uint64_t>(pages_of(s.memlen)) * kPageSize;
    if (end > 0x100000000ULL) fail("segment wraps the address space");
    Range r{s.vaddr, static_cast<uint32_t>(end - 1)};
    if (r.lo < kArenaLimit && r.hi >= kArenaBase) {
      fail(fmt::format("segment at 0x{:08X} intersects the engine arena",
                       s.vaddr));
    }
    if (r.lo < kFrameLimit && r.hi >= kFrameBase) {
      fail(fmt::format("segment at 0x{:08X} intersects the thread frames",
                       s.vaddr));
    }
    for (const auto& other : ranges) {
      if (r.lo <= other.hi && other.lo <= r.hi) {
        fail(fmt::format("segments overlap at 0x{:08X}", r.lo));
      }
    }
    ranges.push_back(r);
  }

  bool entry_ok = false;
  for (const auto& s : img.segments) {
    if ((s.perms & kPermX) && img.entry >= s.vaddr &&
        img.entry < s.vaddr + s.memlen) {
      entry_ok = true;
    }
  }
  if (!entry_ok) fail("entry point is not inside an executable segment");
  if (img.entry % 4 != 0) fail("entry point is not 4-aligned");
}

std::vector<uint8_t> write_image(const Image& img) {
  validate_image(img);
  std::vector<uint8_t> out;
  put_u32(out, kMagic);
  put_u32(out, kVersion);
  put_u32(out, img.entry);
  put_u32(out, static_cast<uint32_t>(img.segments.size()));

  // Header + segment table + args + env, then payloads.
  size_t header_len = 16 + img.segments.size() * 20;
  size_t var_len = 4 + img.args.size() + 4;
  for (const auto& e : img.env) var_len += 4 + e.size();
  uint32_t offset = static_cast<uint32_t>(header_len + var_len);

  for (const auto& s : img.segments) {
    put_u32(out, s.vaddr);
    put_u32(out, static_cast<uint32_t>(s.bytes.size()));
    put_u32(out, s.memlen);
    put_u32(out, s.perms);
    put_u32(out, offset);
    offset += static_cast<uint32_t>(s.bytes.size());
  }
  put_u32(out, static_cast<uint32_t>(img.args.size()));
  out.insert(out.end(), img.args.begin(), img.args.end());
  put_u32(out, static_cast<uint32_t>(img.env.size()));
  for (const auto& e : img.env) {
    put_u32(out, static_cast<uint32_t>(e.size()));
    out.insert(out.end(), e.begin(), e.end());
  }
  for (const auto& s : img.segments) {
    out.insert(out.end(), s.bytes.begin(), s.bytes.end());
  }
  return out;
}

Image load_image(const std::vector<uint8_t>& bytes) {
  Reader r{bytes};
  if (r.u32() != kMagic) {
    throw ImageError(ImageError::Kind::BadMagic, "bad container magic");
  }
  if (r.u32() != kVersion) {
    throw ImageError(ImageError::Kind::BadMagic, "unsupported version");
  }
  Image img;
  img.entry = r.u32();
  uint32_t nsegs = r.u32();
  if (nsegs > 256) {
    throw ImageError(ImageError::Kind::TruncatedFile, "segment count");
  }
  struct SegHdr {
    uint32_t vaddr, filelen, memlen, perms, offset;
  };
  std::vector<SegHdr> hdrs;
  for (uint32_t i = 0; i < nsegs; ++i) {
    SegHdr h;
    h.vaddr = r.u32();
    h.filelen = r.u32();
    h.memlen = r.u32();
    h.perms = r.u32();
    h.offset = r.u32();
    hdrs.push_back(h);
  }
  uint32_t argslen = r.u32();
  img.args = r.bytes(argslen);
  uint32_t envcount = r.u32();
  if (envcount > 1024) {
    throw ImageError(ImageError::Kind::TruncatedFile, "env count");
  }
  for (uint32_t i = 0; i < envcount; ++i) {
    uint32_t len = r.u32();
    auto b = r.bytes(len);
    img.env.emplace_back(b.begin(), b.end());
  }
  for (const auto& h : hdrs) {
    if (static_cast<uint64_t>(h.offset) + h.filelen > bytes.size()) {
      throw ImageError(ImageError::Kind::TruncatedFile, "segment payload");
    }
    Segment s;
    s.vaddr = h.vaddr;
    s.perms = h.perms;
    s.memlen = h.memlen;
    s.bytes.assign(bytes.begin() + h.offset,
                   bytes.begin() + h.offset + h.filelen);
    img.segments.push_back(std::move(s));
  }
  validate_image(img);
  return img;
}

Image load_image_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ImageError(ImageError::Kind::TruncatedFile,
                     fmt::format("cannot open {}", path));
  }
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  Image img = load_image(bytes);
  auto slash = path.find_last_of('/');
  std::string stem = slash == std::string::npos ? path : path.substr(slash + 1);
  auto dot = stem.find_last_of('.');
  if (dot != std::string::npos) stem = stem.substr(0, dot);
  img.name = stem.empty() ? "app" : stem;
  return img;
}

void write_image_file(const Image& img, const std::string& path) {
  auto bytes = write_image(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw ImageError(ImageError::Kind::TruncatedFile,
                     fmt::format("cannot write {}", path));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

}  // namespace g32
