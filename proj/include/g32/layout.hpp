#pragma once

#include <cstdint>

namespace g32 {

// Guest address-space layout and machine limits shared across the
// assembler, loader, VM and engine.

inline constexpr uint32_t kPageSize = 4096;
inline constexpr uint32_t kPageShift = 12;

inline constexpr uint32_t kCodeBase = 0x00400000;
inline constexpr uint32_t kDataBase = 0x00600000;
inline constexpr uint32_t kLibBase = 0x00700000;

// First-fit allocation window for SYS_ALLOC.
inline constexpr uint32_t kAllocBase = 0x10000000;
inline constexpr uint32_t kAllocCeiling = 0x7F000000;

// Per-thread exception frame pages: 0x7F000000 + tid * 0x1000.
inline constexpr uint32_t kFrameBase = 0x7F000000;
inline constexpr uint32_t kFrameLimit = 0x7F100000;

// Thread stacks grow down from kStackTop - tid * kStackSpacing.
inline constexpr uint32_t kStackTop = 0x7FF00000;
inline constexpr uint32_t kStackSpacing = 0x40000;
inline constexpr uint32_t kStackPages = 16;

// Engine arena; the spill page sits at its base, translated blocks
// above it. Guest images and allocations must never intersect it.
inline constexpr uint32_t kArenaBase = 0xC0000000;
inline constexpr uint32_t kArenaLimit = 0xE0000000;
inline constexpr uint32_t kSpillPage = kArenaBase;
inline constexpr uint32_t kBlockArenaBase = kArenaBase + kPageSize;

inline constexpr uint32_t kMaxThreads = 16;
inline constexpr uint32_t kTlsSlots = 16;
inline constexpr uint32_t kEngineTlsSlot = 15;

// Toy OS commit quota consulted by SYS_ALLOC / SYS_TCREATE.
inline constexpr uint32_t kCommitQuotaPages = 512;

inline constexpr uint64_t kDefaultMaxCycles = 50'000'000;
inline constexpr uint32_t kDefaultMaxPages = 8192;

inline constexpr uint32_t page_of(uint32_t addr) { return addr >> kPageShift; }
inline constexpr uint32_t page_base(uint32_t addr) { return addr & ~(kPageSize - 1); }

// Permission bits as stored in images and reported by SYS_QUERY.
inline constexpr uint32_t kPermR = 1;
inline constexpr uint32_t kPermW = 2;
inline constexpr uint32_t kPermX = 4;

}  // namespace g32
