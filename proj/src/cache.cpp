#include "g32/cache.hpp"

#include <algorithm>

namespace g32::dbi {

uint32_t Block::guest_addr_of(uint32_t cache_addr) const {
  auto it = std::lower_bound(
      addr_map.begin(), addr_map.end(), cache_addr,
      [](const std::pair<uint32_t, uint32_t>& e, uint32_t a) {
        return e.first < a;
      });
  if (it != addr_map.end() && it->first == cache_addr) return it->second;
  return guest_entry;  // stub padding maps to the owning block's entry
}

Block* CodeCache::lookup(uint32_t guest_entry) {
  auto it = live_.find(guest_entry);
  return it == live_.end() ? nullptr : it->second;
}

Block* CodeCache::insert(std::unique_ptr<Block> block) {
  Block* b = block.get();
  live_[b->guest_entry] = b;
  page_index_[b->src_page].push_back(b);
  by_cache_[b->cache_entry] = std::move(block);
  return b;
}

void CodeCache::unlink_into(Block* victim) {
  for (Block* pred : victim->linked_in) {
    if (pred->linked && pred->linked_target_cache == victim->cache_entry) {
      pred->linked = false;
      pred->linked_target_cache = 0;
    }
  }
  victim->linked_in.clear();
}

uint32_t CodeCache::invalidate_page(uint32_t page,
                                    std::vector<Block*>* dropped) {
  auto it = page_index_.find(page);
  if (it == page_index_.end()) return 0;
  uint32_t count = 0;
  for (Block* b : it->second) {
    if (b->dead) continue;
    b->dead = true;
    count++;
    unlink_into(b);
    live_.erase(b->guest_entry);
    // remove this block's callout sites
    auto c = callouts_.lower_bound(b->cache_entry);
    while (c != callouts_.end() && c->first < b->cache_entry + b->byte_len) {
      c = callouts_.erase(c);
    }
    if (dropped) dropped->push_back(b);
  }
  page_index_.erase(it);
  return count;
}

void CodeCache::flush() {
  live_.clear();
  by_cache_.clear();
  page_index_.clear();
  callouts_.clear();
  cursor = kBlockArenaBase;
}

const Callout* CodeCache::callout_at(uint32_t cache_addr) const {
  auto it = callouts_.find(cache_addr);
  return it == callouts_.end() ? nullptr : &it->second;
}

Callout* CodeCache::callout_at(uint32_t cache_addr) {
  auto it = callouts_.find(cache_addr);
  return it == callouts_.end() ? nullptr : &it->second;
}

void CodeCache::add_callout(uint32_t cache_addr, Callout c) {
  callouts_[cache_addr] = std::move(c);
}

const Block* CodeCache::containing_block(uint32_t cache_addr) const {
  auto it = by_cache_.upper_bound(cache_addr);
  if (it == by_cache_.begin()) return nullptr;
  --it;
  const Block* b = it->second.get();
  if (cache_addr >= b->cache_entry && cache_addr < b->cache_entry + b->byte_len) {
    return b;
  }
  return nullptr;
}

Block* CodeCache::containing_live_block(uint32_t cache_addr) {
  auto it = by_cache_.upper_bound(cache_addr);
  if (it == by_cache_.begin()) return nullptr;
  --it;
  Block* b = it->second.get();
  if (!b->dead && cache_addr >= b->cache_entry &&
      cache_addr < b->cache_entry + b->byte_len) {
    return b;
  }
  return nullptr;
}

uint32_t CodeCache::reverse_lookup(uint32_t addr, uint32_t fallback) const {
  if (addr < kArenaBase || addr >= kArenaLimit) return addr;
  const Block* b = containing_block(addr);
  if (!b) return fallback;
  return b->guest_addr_of(addr);
}

bool CodeCache::page_has_blocks(uint32_t page) const {
  auto it = page_index_.find(page);
  if (it == page_index_.end()) return false;
  for (const Block* b : it->second) {
    if (!b->dead) return true;
  }
  return false;
}

}  // namespace g32::dbi
