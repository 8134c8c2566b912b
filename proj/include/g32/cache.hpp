#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <unordered_map>
#include <vector>

#include "g32/isa.hpp"
#include "g32/layout.hpp"
#include "g32/plugin.hpp"

namespace g32::dbi {

enum class TermKind : uint8_t {
  Direct,       // JMP / CALL, static target
  Conditional,  // JZ/JNZ/JLT/JGE
  Indirect,     // JMPR / CALLR / RET
  Syscall,
  Rdlip,
  Detour,     // patched lib stub entry
  FaultStub,  // delivers ILLEGAL_OPCODE at the guest pc
  PageSplit,  // fallthrough at a page boundary or 64-instruction split
};

struct Terminal {
  TermKind kind = TermKind::PageSplit;
  isa::Instruction instr;  // original instruction (Direct..Rdlip, Detour)
  uint32_t target = 0;     // Direct target / Conditional taken / split next
  uint32_t fall = 0;       // Conditional fallthrough
};

struct Block;

// One callout site inside the arena. The callout's own cache address is
// the key; imm16 only carries the kind tag for disassembly.
struct Callout {
  enum class Kind : uint8_t { HookBefore, HookAfter, Exit };
  Kind kind = Kind::Exit;
  Block* block = nullptr;
  isa::Instruction guest_instr;        // subject instruction (guest addr)
  std::vector<uint64_t> before_hooks;  // InstrHookReg ids, fire order
  std::vector<uint64_t> after_hooks;   // for Exit: fired after semantics
};

struct Block {
  uint32_t guest_entry = 0;
  uint32_t cache_entry = 0;
  uint32_t byte_len = 0;
  uint32_t instr_count = 0;  // guest instructions covered
  uint32_t src_page = 0;
  Terminal term;
  // cache addr -> guest addr for every emitted word (copies, callouts)
  std::vector<std::pair<uint32_t, uint32_t>> addr_map;
  bool dead = false;

  // direct-exit linking
  uint32_t exit_encounters = 0;
  bool linked = false;
  uint32_t linked_target_cache = 0;
  std::vector<Block*> linked_in;  // predecessors linked into this block

  uint32_t guest_addr_of(uint32_t cache_addr) const;
};

// Translated-block bookkeeping: live blocks by guest entry, the
// cache->guest reverse map (tombstones included, so stale LASTIP values
// stay resolvable until a flush), the page invalidation index and the
// callout table.
class CodeCache {
 public:
  Block* lookup(uint32_t guest_entry);
  Block* insert(std::unique_ptr<Block> block);
  // Drops every live block reading from `page`; returns the count.
  uint32_t invalidate_page(uint32_t page,
                           std::vector<Block*>* dropped = nullptr);
  void flush();

  const Callout* callout_at(uint32_t cache_addr) const;
  Callout* callout_at(uint32_t cache_addr);
  void add_callout(uint32_t cache_addr, Callout c);

  // cache address -> guest address; identity outside the arena.
  uint32_t reverse_lookup(uint32_t addr, uint32_t fallback) const;
  const Block* containing_block(uint32_t cache_addr) const;
  Block* containing_live_block(uint32_t cache_addr);

  bool page_has_blocks(uint32_t page) const;

  uint32_t cursor = kBlockArenaBase;
  uint32_t pages_used() const {
    return (cursor - kBlockArenaBase + kPageSize - 1) / kPageSize;
  }
  uint64_t live_blocks() const { return live_.size(); }

 private:
  std::unordered_map<uint32_t, Block*> live_;
  std::map<uint32_t, std::unique_ptr<Block>> by_cache_;  // incl. tombstones
  std::unordered_map<uint32_t, std::vector<Block*>> page_index_;
  std::map<uint32_t, Callout> callouts_;

  void unlink_into(Block* victim);
};

}  // namespace g32::dbi
