#include "g32/engine.hpp"

#include <fmt/format.h>

#include <algorithm>

namespace g32::dbi {

using isa::Instruction;
using isa::Op;
using isa::OpClass;
using plugin::ApiHookCtx;
using plugin::HookPhase;
using plugin::InstrHookCtx;

namespace {

bool in_arena(uint32_t addr) {
  return addr >= kArenaBase && addr < kArenaLimit;
}

uint16_t callout_tag(Callout::Kind k, TermKind t) {
  if (k == Callout::Kind::HookBefore) return 0x0001;
  if (k == Callout::Kind::HookAfter) return 0x0002;
  return static_cast<uint16_t>(0x0100 + static_cast<uint16_t>(t));
}

}  // namespace

Engine::Engine(Machine& m, const EngineConfig& cfg) : machine_(m), cfg_(cfg) {
  host_ = std::make_unique<plugin::PluginHost>(machine_, this);
}

Engine::~Engine() = default;

void Engine::abort_run(const std::string& reason) {
  if (!aborted_) {
    aborted_ = true;
    abort_ = {RunStatus::Kind::EngineAbort, reason};
  }
}

// --- setup ---------------------------------------------------------------

void Engine::install_artifacts() {
  machine_.map_pages(kSpillPage, 1, kPermR | kPermW, /*engine=*/true);
  regions_.log_handle_id = machine_.open_handle(4 /*LOG*/, /*engine=*/true);
  machine_.env().push_back({regions_.env_entry, /*engine=*/true});
  machine_.modules().push_back({regions_.pseudo_module, /*engine=*/true});
  int mt = machine_.claim_engine_thread();
  regions_.maintenance_tid = mt < 0 ? 0xFFFFFFFF : static_cast<uint32_t>(mt);
  original_args_ = machine_.args();
  std::vector<uint8_t> prefixed(regions_.args_prefix.begin(),
                                regions_.args_prefix.end());
  prefixed.insert(prefixed.end(), original_args_.begin(),
                  original_args_.end());
  machine_.args() = prefixed;
  machine_.set_ppid(regions_.launcher_ppid);
  machine_.external_sys_log = true;

  machine_.on_code_page_write = [this](uint32_t pg) {
    invalidate_guest_page(pg);
  };
  machine_.on_page_perms_changed = [this](uint32_t pg) {
    invalidate_guest_page(pg);
  };
  machine_.on_page_guarded = [this](uint32_t pg) {
    invalidate_guest_page(pg);
  };

  const Image* img = machine_.image();
  for (const auto& s : img->segments) {
    if (s.vaddr == kLibBase && (s.perms & kPermX)) {
      lib_range_ = {s.vaddr, s.vaddr + s.memlen};
    }
  }
}

void Engine::build_stack() {
  std::vector<std::unique_ptr<plugin::Plugin>> stack;
  for (const auto& name : cfg_.plugins) {
    stack.push_back(make_plugin(name, cfg_));
  }
  host_->on_hooks_changed = [this]() {
    if (cache_.live_blocks() > 0) flush_cache();
  };
  host_->register_stack(std::move(stack));
  if (!cfg_.trace_path.empty()) {
    host_->open_trace("trace", cfg_.trace_path);
  } else if (cfg_.trace_buffer) {
    host_->open_trace_buffer("trace", cfg_.trace_buffer);
  }
}

void Engine::prepare() {
  install_artifacts();
  build_stack();
}

void Engine::release_maintenance_slot() {
  if (maintenance_released_ || regions_.maintenance_tid == 0xFFFFFFFF) return;
  machine_.release_engine_thread(regions_.maintenance_tid);
  maintenance_released_ = true;
}

uint32_t Engine::maintenance_tid() const {
  return maintenance_released_ ? 0xFFFFFFFF : regions_.maintenance_tid;
}

uint32_t Engine::reverse_lookup(uint32_t addr) const {
  if (!in_arena(addr)) return addr;
  return cache_.reverse_lookup(addr, machine_.image()->entry);
}

// --- cache maintenance -----------------------------------------------------

uint32_t Engine::invalidate_guest_page(uint32_t page_idx) {
  std::vector<Block*> dropped;
  uint32_t n = cache_.invalidate_page(page_idx, &dropped);
  if (n > 0) {
    metrics_.invalidations += n;
    Page* p = machine_.page_at(page_idx << kPageShift);
    if (p) {
      p->code = false;
      if (p->wp) {
        p->wp = false;
        p->perms = p->guest_perms;
      }
    }
  }
  return n;
}

void Engine::request_cache_flush() { flush_cache(); }

void Engine::flush_cache() {
  uint32_t used = cache_.pages_used();
  // restore every write-protected source page
  for (uint32_t tid = 0; tid < kMaxThreads; ++tid) {
    ThreadState* t = machine_.thread(tid);
    if (t && !t->engine_owned && tctl_[tid].in_cache) {
      // parked threads sit at guest continuations; an in-cache thread can
      // only be the current one, which re-dispatches via the redirect
      t->pc = reverse_lookup(t->pc);
      tctl_[tid].in_cache = false;
    }
  }
  cache_.flush();
  if (used > 0) machine_.unmap_pages(kBlockArenaBase, used);
  // clear wp/code flags left behind
  for (const auto& s : machine_.image()->segments) {
    uint32_t npages = (s.memlen + kPageSize - 1) / kPageSize;
    for (uint32_t i = 0; i < npages; ++i) {
      Page* p = machine_.page_at(s.vaddr + i * kPageSize);
      if (p && (p->code || p->wp)) {
        p->code = false;
        if (p->wp) {
          p->wp = false;
          p->perms = p->guest_perms;
        }
      }
    }
  }
  metrics_.flushes++;
}

// --- translation -----------------------------------------------------------

void Engine::emit_word(uint32_t word) {
  uint32_t addr = cache_.cursor;
  if (machine_.page_at(addr) == nullptr) {
    machine_.map_pages(page_base(addr), 1, kPermR | kPermW | kPermX,
                       /*engine=*/true);
  }
  machine_.write_u32_engine(addr, word);
  cache_.cursor = addr + 4;
}

Block* Engine::translate_block(uint32_t at) {
  if (cache_.pages_used() > cfg_.flush_pages) flush_cache();

  std::vector<Instruction> body;
  Terminal term;
  bool have_term = false;
  uint32_t processed = 0;

  for (uint32_t idx = 0; idx < 64; ++idx) {
    uint32_t addr = at + idx * 4;
    if (page_of(addr) != page_of(at)) {
      term.kind = TermKind::PageSplit;
      term.target = addr;
      have_term = true;
      break;
    }
    uint32_t word = machine_.read_u32_unchecked(addr);
    isa::DecodeError derr;
    auto di = isa::decode(word, addr, &derr);
    if (!di) {
      processed++;
      if (idx == 0) {
        if (!host_->loaded("ExceptionHandler")) {
          abort_run(fmt::format(
              "undefined opcode 0x{:02X} at 0x{:08X} during translation",
              derr.byte, addr));
          return nullptr;
        }
        term.kind = TermKind::FaultStub;
        term.target = addr;
        have_term = true;
        break;
      }
      term.kind = TermKind::PageSplit;
      term.target = addr;
      have_term = true;
      break;
    }
    if (di->op == Op::Callout) {
      if (idx == 0 && detours_.count(addr)) {
        term.kind = TermKind::Detour;
        term.instr = detours_.at(addr).displaced;
        term.instr.addr = addr;
        term.target = addr;
        have_term = true;
        processed++;
        break;
      }
      if (idx == 0) {
        // reserved opcode in guest code faults at runtime
        term.kind = TermKind::FaultStub;
        term.target = addr;
        have_term = true;
        processed++;
        break;
      }
      term.kind = TermKind::PageSplit;
      term.target = addr;
      have_term = true;
      break;
    }
    OpClass cls = isa::classify(*di);
    processed++;
    if (cls == OpClass::Control || cls == OpClass::Syscall ||
        di->op == Op::Rdlip) {
      term.instr = *di;
      term.target = isa::branch_target(*di);
      term.fall = addr + 4;
      switch (di->op) {
        case Op::Jmp:
        case Op::Call:
          term.kind = TermKind::Direct;
          break;
        case Op::Jz:
        case Op::Jnz:
        case Op::Jlt:
        case Op::Jge:
          term.kind = TermKind::Conditional;
          break;
        case Op::Jmpr:
        case Op::Callr:
        case Op::Ret:
          term.kind = TermKind::Indirect;
          break;
        case Op::Sys:
          term.kind = TermKind::Syscall;
          break;
        default:
          term.kind = TermKind::Rdlip;
          break;
      }
      have_term = true;
      break;
    }
    body.push_back(*di);
  }
  if (!have_term) {
    term.kind = TermKind::PageSplit;
    term.target = at + 64 * 4;
  }

  machine_.cycles += static_cast<uint64_t>(kTranslateCyclesPerInstr) *
                     std::max<uint32_t>(processed, 1);

  auto block = std::make_unique<Block>();
  Block* b = block.get();
  b->guest_entry = at;
  b->cache_entry = cache_.cursor;
  b->src_page = page_of(at);
  b->term = term;
  b->instr_count = static_cast<uint32_t>(body.size()) +
                   ((term.kind != TermKind::PageSplit) ? 1 : 0);

  struct PendingCallout {
    uint32_t addr;
    Callout c;
  };
  std::vector<PendingCallout> pending;

  for (const Instruction& gi : body) {
    auto before = host_->instr_hooks_for(gi, HookPhase::Before);
    if (!before.empty()) {
      Callout c;
      c.kind = Callout::Kind::HookBefore;
      c.block = b;
      c.guest_instr = gi;
      for (const auto* reg : before) c.before_hooks.push_back(reg->id);
      b->addr_map.emplace_back(cache_.cursor, gi.addr);
      pending.push_back({cache_.cursor, std::move(c)});
      emit_word(*isa::encode(Instruction{
          Op::Callout, 0, 0, callout_tag(Callout::Kind::HookBefore, term.kind),
          0}));
    }
    b->addr_map.emplace_back(cache_.cursor, gi.addr);
    emit_word(*isa::encode(gi));
    auto after = host_->instr_hooks_for(gi, HookPhase::After);
    if (!after.empty()) {
      Callout c;
      c.kind = Callout::Kind::HookAfter;
      c.block = b;
      c.guest_instr = gi;
      for (const auto* reg : after) c.after_hooks.push_back(reg->id);
      b->addr_map.emplace_back(cache_.cursor, gi.addr);
      pending.push_back({cache_.cursor, std::move(c)});
      emit_word(*isa::encode(Instruction{
          Op::Callout, 0, 0, callout_tag(Callout::Kind::HookAfter, term.kind),
          0}));
    }
  }

  // terminal callout
  {
    Callout c;
    c.kind = Callout::Kind::Exit;
    c.block = b;
    uint32_t map_addr = at;
    if (term.kind == TermKind::Direct || term.kind == TermKind::Conditional ||
        term.kind == TermKind::Indirect || term.kind == TermKind::Syscall ||
        term.kind == TermKind::Rdlip || term.kind == TermKind::Detour) {
      c.guest_instr = term.instr;
      map_addr = term.instr.addr;
      for (const auto* reg :
           host_->instr_hooks_for(term.instr, HookPhase::Before)) {
        c.before_hooks.push_back(reg->id);
      }
      for (const auto* reg :
           host_->instr_hooks_for(term.instr, HookPhase::After)) {
        c.after_hooks.push_back(reg->id);
      }
    } else if (term.kind == TermKind::FaultStub) {
      map_addr = term.target;
    } else if (!body.empty()) {
      map_addr = body.back().addr;
    }
    b->addr_map.emplace_back(cache_.cursor, map_addr);
    pending.push_back({cache_.cursor, std::move(c)});
    emit_word(*isa::encode(
        Instruction{Op::Callout, 0, 0, callout_tag(Callout::Kind::Exit,
                                                   term.kind),
                    0}));
  }

  b->byte_len = cache_.cursor - b->cache_entry;

  Block* inserted = cache_.insert(std::move(block));
  for (auto& pc : pending) cache_.add_callout(pc.addr, std::move(pc.c));

  // SMC tracking: write-protect the source page while blocks live on it
  Page* p = machine_.page_at(at);
  if (p) {
    p->code = true;
    if (cfg_.track_smc && (p->guest_perms & kPermW)) {
      p->perms &= ~kPermW;
      p->wp = true;
    }
  }
  metrics_.blocks_translated++;
  return inserted;
}

// --- dispatch ----------------------------------------------------------------

StepOutcome Engine::arena_entry(uint32_t tid, uint32_t target) {
  if (machine_.hide_engine_data) {
    return handle_guest_fault(
        tid, machine_.make_record(tid, FaultCode::ExecUnmapped, target,
                                  target));
  }
  if (machine_.page_at(target) == nullptr) {
    return handle_guest_fault(
        tid, machine_.make_record(tid, FaultCode::ExecUnmapped, target,
                                  target));
  }
  // escape: the guest physically enters the cache without dispatch state
  ThreadState* t = machine_.thread(tid);
  t->pc = target & ~3u;
  tctl_[tid].in_cache = true;
  tctl_[tid].escaped = true;
  return {StepKind::Retired, {}};
}

StepOutcome Engine::dispatch_to(uint32_t tid, uint32_t target) {
  target &= ~3u;
  if (in_arena(target)) return arena_entry(tid, target);

  metrics_.dispatches++;
  machine_.cycles += kDispatchCycles;

  if (auto f = machine_.check_fetch(tid, target)) {
    return handle_guest_fault(tid, *f);
  }
  if (cfg_.api_hook_mode == ApiHookMode::Detour && lib_range_.second != 0 &&
      target >= lib_range_.first && target < lib_range_.second &&
      !detours_.count(target)) {
    patch_detour(target);
  }
  Block* b = cache_.lookup(target);
  if (b) {
    metrics_.cache_hits++;
  } else {
    b = translate_block(target);
    if (!b) return {StepKind::Yield, {}};  // abort latched
  }
  ThreadState* t = machine_.thread(tid);
  t->tls[kEngineTlsSlot] = target;  // naive context-transition backup
  t->pc = b->cache_entry;
  tctl_[tid].in_cache = true;
  tctl_[tid].escaped = false;
  return {StepKind::Retired, {}};
}

void Engine::schedule_continuation(uint32_t tid) {
  ThreadState* t = machine_.thread(tid);
  if (!t) return;
  if (in_arena(t->pc) && cache_.containing_live_block(t->pc)) {
    // engine-mediated context restore straight into a live block
    tctl_[tid].in_cache = true;
    tctl_[tid].escaped = false;
    return;
  }
  tctl_[tid].in_cache = false;
}

void Engine::patch_detour(uint32_t target) {
  uint32_t word = machine_.read_u32_unchecked(target);
  auto di = isa::decode(word, target);
  if (!di || di->op == Op::Callout) return;
  DetourRec rec;
  rec.displaced = *di;
  if (di->op == Op::MovRI && di->rd == 0) {
    rec.sys_no = static_cast<int>(di->imm);
  }
  detours_[target] = rec;
  machine_.write_u32_engine(
      target, *isa::encode(Instruction{Op::Callout, 0, 0, 0xDE70, 0}));
  invalidate_guest_page(page_of(target));
  metrics_.detour_patches++;
}

// --- faults -------------------------------------------------------------------

StepOutcome Engine::handle_guest_fault(uint32_t tid,
                                       const ExceptionRecord& raw) {
  ThreadState* t = machine_.thread(tid);
  // SMC: a guest store hit a write-protected code page
  if (raw.code == FaultCode::Write && t) {
    Page* p = machine_.page_at(raw.fault_addr);
    if (p && p->wp) {
      Block* cur = cache_.containing_live_block(t->pc);
      uint32_t gpc = cur ? cur->guest_addr_of(t->pc) : reverse_lookup(t->pc);
      invalidate_guest_page(page_of(raw.fault_addr));
      if (cur && cur->dead) {
        tctl_[tid].redirect_after_step = gpc + 4;
      }
      return {StepKind::Retired, {}};  // re-execute the store
    }
  }
  ExceptionRecord rec = raw;
  if (exception_transform_) rec = exception_transform_(raw);
  auto res = machine_.deliver_exception(tid, rec);
  if (res == Machine::DeliverResult::HandlerEntered) {
    schedule_continuation(tid);
    return {StepKind::Yield, {}};
  }
  return {StepKind::Exited, {}};
}

// --- callout handling -----------------------------------------------------------

void Engine::spill_context(uint32_t tid) {
  auto words = machine_.context_image(tid);
  for (size_t i = 0; i < words.size(); ++i) {
    machine_.write_u32_engine(regions_.spill_page + static_cast<uint32_t>(i) * 4,
                              words[i]);
  }
}

bool Engine::fire_before_instr_hooks(uint32_t tid, const Callout& desc,
                                     StepOutcome* out, uint32_t* consumed) {
  InstrHookCtx ctx{machine_, tid, desc.guest_instr, HookPhase::Before, false,
                   std::nullopt};
  for (uint64_t id : desc.before_hooks) {
    for (const auto* reg :
         host_->instr_hooks_for(desc.guest_instr, HookPhase::Before)) {
      if (reg->id == id) {
        host_->fire_instr_hook(*reg, ctx);
        break;
      }
    }
  }
  if (ctx.replacement) {
    Instruction repl = *ctx.replacement;
    ThreadState* t = machine_.thread(tid);
    repl.addr = t->pc + 4;  // lands after the copy
    uint64_t phys_before = machine_.cycles;
    StepOutcome ro = machine_.execute_injected(tid, repl);
    if (ro.kind == StepKind::Fault) {
      *out = handle_guest_fault(tid, ro.rec);
      return true;
    }
    // charge the original's cost, not the replacement's
    machine_.cycles = phys_before + isa::cost(desc.guest_instr);
    virtual_ += isa::cost(desc.guest_instr);
    *consumed = 8;
    *out = {StepKind::Retired, {}};
    return true;
  }
  if (ctx.skip) {
    machine_.cycles += isa::cost(desc.guest_instr);
    virtual_ += isa::cost(desc.guest_instr);
    *consumed = 8;
    *out = {StepKind::Retired, {}};
    return true;
  }
  return false;
}

void Engine::fire_after_instr_hooks(uint32_t tid, const Callout& desc) {
  InstrHookCtx ctx{machine_, tid, desc.guest_instr, HookPhase::After, false,
                   std::nullopt};
  for (uint64_t id : desc.after_hooks) {
    for (const auto* reg :
         host_->instr_hooks_for(desc.guest_instr, HookPhase::After)) {
      if (reg->id == id) {
        host_->fire_instr_hook(*reg, ctx);
        break;
      }
    }
  }
}

std::optional<ExceptionRecord> Engine::push_word(uint32_t tid, uint32_t value,
                                                 uint32_t guest_pc) {
  ThreadState* t = machine_.thread(tid);
  uint8_t buf[4] = {static_cast<uint8_t>(value),
                    static_cast<uint8_t>(value >> 8),
                    static_cast<uint8_t>(value >> 16),
                    static_cast<uint8_t>(value >> 24)};
  auto f = machine_.write_mem(tid, t->regs[7] - 4, 4, buf, Access::Guest);
  if (f) {
    f->pc = guest_pc;
    return f;
  }
  t->regs[7] -= 4;
  return std::nullopt;
}

StepOutcome Engine::on_callout(uint32_t tid, uint32_t addr) {
  metrics_.callouts_fired++;
  spill_context(tid);

  Callout* desc_ptr = cache_.callout_at(addr);
  if (!desc_ptr || tctl_[tid].escaped) {
    uint32_t gpc = reverse_lookup(addr);
    return handle_guest_fault(
        tid, machine_.make_record(tid, FaultCode::IllegalOpcode, gpc, gpc));
  }
  // invalidations inside hooks or syscalls can drop the block under us
  Callout desc = *desc_ptr;
  Block* block = desc.block;
  ThreadState* t = machine_.thread(tid);

  switch (desc.kind) {
    case Callout::Kind::HookBefore: {
      StepOutcome out;
      uint32_t consumed = 4;
      if (fire_before_instr_hooks(tid, desc, &out, &consumed)) {
        if (out.kind == StepKind::Retired) t->pc = addr + consumed;
        return out;
      }
      t->pc = addr + 4;  // fall into the copy
      return {StepKind::Retired, {}};
    }
    case Callout::Kind::HookAfter: {
      fire_after_instr_hooks(tid, desc);
      t->pc = addr + 4;
      return {StepKind::Retired, {}};
    }
    case Callout::Kind::Exit:
      break;
  }

  switch (block->term.kind) {
    case TermKind::Direct:
      return exit_direct(tid, block, desc);
    case TermKind::Conditional:
      return exit_conditional(tid, block, desc);
    case TermKind::Indirect:
      return exit_indirect(tid, desc);
    case TermKind::Syscall:
      return exit_syscall(tid, desc);
    case TermKind::Rdlip:
      return exit_rdlip(tid, desc);
    case TermKind::Detour:
      return exit_detour(tid, desc);
    case TermKind::FaultStub: {
      uint32_t gpc = block->term.target;
      return handle_guest_fault(
          tid,
          machine_.make_record(tid, FaultCode::IllegalOpcode, gpc, gpc));
    }
    case TermKind::PageSplit:
      return dispatch_to(tid, block->term.target);
  }
  return {StepKind::Retired, {}};
}

StepOutcome Engine::exit_direct(uint32_t tid, Block* block, Callout desc) {
  StepOutcome hooked;
  uint32_t consumed = 0;
  if (fire_before_instr_hooks(tid, desc, &hooked, &consumed)) {
    if (hooked.kind == StepKind::Retired) {
      // skipped branch: fall through
      fire_after_instr_hooks(tid, desc);
      return dispatch_to(tid, desc.guest_instr.addr + 4);
    }
    return hooked;
  }
  const Instruction& instr = desc.guest_instr;
  machine_.cycles += isa::cost(instr);
  virtual_ += isa::cost(instr);
  if (instr.op == Op::Call) {
    if (auto f = push_word(tid, instr.addr + 4, instr.addr)) {
      return handle_guest_fault(tid, *f);
    }
  }
  fire_after_instr_hooks(tid, desc);
  uint32_t target = block->term.target;
  if (block->linked) {
    ThreadState* t = machine_.thread(tid);
    t->pc = block->linked_target_cache;
    return {StepKind::Retired, {}};
  }
  block->exit_encounters++;
  StepOutcome out = dispatch_to(tid, target);
  if (cfg_.link_blocks && block->exit_encounters >= 2 && !block->dead &&
      out.kind == StepKind::Retired) {
    if (Block* succ = cache_.lookup(target)) {
      block->linked = true;
      block->linked_target_cache = succ->cache_entry;
      succ->linked_in.push_back(block);
    }
  }
  return out;
}

StepOutcome Engine::exit_conditional(uint32_t tid, Block* block,
                                     Callout desc) {
  StepOutcome hooked;
  uint32_t consumed = 0;
  if (fire_before_instr_hooks(tid, desc, &hooked, &consumed)) {
    if (hooked.kind == StepKind::Retired) {
      fire_after_instr_hooks(tid, desc);
      return dispatch_to(tid, desc.guest_instr.addr + 4);
    }
    return hooked;
  }
  const Instruction& instr = desc.guest_instr;
  machine_.cycles += isa::cost(instr);
  virtual_ += isa::cost(instr);
  ThreadState* t = machine_.thread(tid);
  bool taken = false;
  switch (instr.op) {
    case Op::Jz: taken = t->flags.z; break;
    case Op::Jnz: taken = !t->flags.z; break;
    case Op::Jlt: taken = t->flags.n != t->flags.v; break;
    case Op::Jge: taken = t->flags.n == t->flags.v; break;
    default: break;
  }
  fire_after_instr_hooks(tid, desc);
  return dispatch_to(tid, taken ? block->term.target : block->term.fall);
}

StepOutcome Engine::exit_indirect(uint32_t tid, Callout desc) {
  StepOutcome hooked;
  uint32_t consumed = 0;
  if (fire_before_instr_hooks(tid, desc, &hooked, &consumed)) {
    if (hooked.kind == StepKind::Retired) {
      fire_after_instr_hooks(tid, desc);
      return dispatch_to(tid, desc.guest_instr.addr + 4);
    }
    return hooked;
  }
  const Instruction& instr = desc.guest_instr;
  machine_.cycles += isa::cost(instr);
  virtual_ += isa::cost(instr);
  ThreadState* t = machine_.thread(tid);
  uint32_t target = 0;
  switch (instr.op) {
    case Op::Jmpr:
      target = t->regs[instr.rs];
      break;
    case Op::Callr: {
      if (auto f = push_word(tid, instr.addr + 4, instr.addr)) {
        return handle_guest_fault(tid, *f);
      }
      target = t->regs[instr.rs];
      break;
    }
    case Op::Ret: {
      uint8_t buf[4];
      if (auto f = machine_.read_mem(tid, t->regs[7], 4, buf, Access::Guest)) {
        f->pc = instr.addr;
        return handle_guest_fault(tid, *f);
      }
      t->regs[7] += 4;
      target = buf[0] | (buf[1] << 8) | (buf[2] << 16) |
               (static_cast<uint32_t>(buf[3]) << 24);
      break;
    }
    default:
      break;
  }
  fire_after_instr_hooks(tid, desc);
  return dispatch_to(tid, target & ~3u);
}

StepOutcome Engine::exit_syscall(uint32_t tid, Callout desc) {
  StepOutcome hooked;
  uint32_t consumed = 0;
  if (fire_before_instr_hooks(tid, desc, &hooked, &consumed)) {
    if (hooked.kind == StepKind::Retired) {
      fire_after_instr_hooks(tid, desc);
      return dispatch_to(tid, desc.guest_instr.addr + 4);
    }
    return hooked;
  }
  const uint32_t guest_pc = desc.guest_instr.addr;
  ThreadState* t = machine_.thread(tid);
  machine_.cycles += 10;
  virtual_ += 10;
  const uint32_t sys_no = t->regs[0];

  ApiHookCtx ctx{machine_, tid, sys_no, guest_pc,
                 {t->regs[0], t->regs[1], t->regs[2], t->regs[3]},
                 false, {}, true};
  ThreadCtl& tc = tctl_[tid];
  if (tc.api_prefired && tc.prefired_sys == sys_no) {
    ctx.skip = tc.prefired_skip;
    ctx.results = tc.prefired_results;
  } else {
    host_->fire_api_before(ctx);
  }
  tc.api_prefired = false;

  t->pc = guest_pc + 4;  // default continuation; RESUME overrides
  StepOutcome raw{StepKind::Retired, {}};
  bool executed = false;
  if (ctx.skip) {
    for (int i = 0; i < 4; ++i) t->regs[i] = ctx.results[i];
  } else {
    raw = machine_.syscall_raw(tid, guest_pc);
    executed = true;
  }
  if (raw.kind != StepKind::Fault) {
    machine_.log_syscall(tid, sys_no, virtual_);
  }
  ApiHookCtx after = ctx;
  after.executed = executed;
  after.results = {t->regs[0], t->regs[1], t->regs[2], t->regs[3]};
  host_->fire_api_after(after);
  fire_after_instr_hooks(tid, desc);

  switch (raw.kind) {
    case StepKind::Fault:
      return handle_guest_fault(tid, raw.rec);
    case StepKind::Exited:
      return raw;
    case StepKind::Yield:
    case StepKind::Blocked:
      schedule_continuation(tid);
      return raw;
    case StepKind::Retired:
      schedule_continuation(tid);
      return {StepKind::Retired, {}};
  }
  return {StepKind::Retired, {}};
}

StepOutcome Engine::exit_rdlip(uint32_t tid, Callout desc) {
  const Instruction& instr = desc.guest_instr;
  ThreadState* t = machine_.thread(tid);
  machine_.cycles += isa::cost(instr);
  virtual_ += isa::cost(instr);

  InstrHookCtx ctx{machine_, tid, instr, HookPhase::Before, false,
                   std::nullopt};
  for (uint64_t id : desc.before_hooks) {
    for (const auto* reg : host_->instr_hooks_for(instr, HookPhase::Before)) {
      if (reg->id == id) {
        host_->fire_instr_hook(*reg, ctx);
        break;
      }
    }
  }
  if (!ctx.skip) {
    t->regs[instr.rd] = t->lastip;  // raw: leaks cache addresses
  }
  fire_after_instr_hooks(tid, desc);
  return dispatch_to(tid, instr.addr + 4);
}

StepOutcome Engine::exit_detour(uint32_t tid, Callout desc) {
  const Instruction& displaced = desc.guest_instr;
  ThreadState* t = machine_.thread(tid);
  machine_.cycles += kDetourCycles;
  ThreadCtl& tc = tctl_[tid];

  auto it = detours_.find(displaced.addr);
  if (it != detours_.end() && it->second.sys_no >= 0) {
    ApiHookCtx ctx{machine_, tid, static_cast<uint32_t>(it->second.sys_no),
                   displaced.addr,
                   {t->regs[0], t->regs[1], t->regs[2], t->regs[3]},
                   false, {}, true};
    host_->fire_api_before(ctx);
    tc.api_prefired = true;
    tc.prefired_sys = static_cast<uint32_t>(it->second.sys_no);
    tc.prefired_skip = ctx.skip;
    tc.prefired_results = ctx.results;
  }

  // emulate the displaced instruction out of place; the naive detour
  // path does not maintain LASTIP
  uint32_t saved_lastip = t->lastip;
  Instruction inj = displaced;
  inj.addr = displaced.addr;  // retires to displaced.addr + 4
  StepOutcome ro = machine_.execute_injected(tid, inj);
  if (ro.kind == StepKind::Fault) {
    return handle_guest_fault(tid, ro.rec);
  }
  t->lastip = saved_lastip;
  virtual_ += machine_.last_step_cost;
  return dispatch_to(tid, displaced.addr + 4);
}

// --- the run loop ---------------------------------------------------------------

RunStatus Engine::quantum(uint32_t tid) {
  while (true) {
    if (aborted_) return abort_;
    if (machine_.cycles > limits_.max_cycles) {
      return {RunStatus::Kind::CycleLimit, "cycle limit exceeded"};
    }
    if (machine_.committed_total() > limits_.max_pages) {
      return {RunStatus::Kind::MemoryLimit, "memory limit exceeded"};
    }
    ThreadState* t = machine_.thread(tid);
    if (!t || t->status != ThreadStatus::Runnable) return {};

    StepOutcome out;
    if (!tctl_[tid].in_cache) {
      out = dispatch_to(tid, t->pc);
    } else {
      out = machine_.exec_step(tid, this);
      if (out.kind == StepKind::Retired) {
        virtual_ += machine_.last_step_cost;
        if (tctl_[tid].redirect_after_step) {
          t = machine_.thread(tid);
          t->pc = tctl_[tid].redirect_after_step;
          tctl_[tid].redirect_after_step = 0;
          tctl_[tid].in_cache = false;
        }
      } else if (out.kind == StepKind::Fault) {
        out = handle_guest_fault(tid, out.rec);
      }
    }
    switch (out.kind) {
      case StepKind::Retired:
        continue;
      case StepKind::Yield:
      case StepKind::Blocked:
      case StepKind::Exited:
        return {};
      case StepKind::Fault:
        return {};  // already delivered
    }
  }
}

RunStatus Engine::run(const RunLimits& limits) {
  limits_ = limits;
  RunStatus st = run_scheduler(
      machine_, [this](uint32_t tid) { return quantum(tid); });
  if (aborted_) return abort_;
  return st;
}

EngineMetrics Engine::metrics() const {
  EngineMetrics m = metrics_;
  m.real_cycles = machine_.cycles;
  m.virtual_cycles = virtual_;
  m.arena_pages = cache_.pages_used() + 1;  // block pages + spill
  return m;
}

EngineRunOutput run_instrumented(const Image& img, const EngineConfig& cfg,
                                 const RunLimits& limits,
                                 const RunHooks& hooks) {
  EngineRunOutput out;
  std::unique_ptr<Machine> m;
  try {
    m = std::make_unique<Machine>(img, limits);
  } catch (const std::exception& e) {
    out.status = {RunStatus::Kind::LoadError, e.what()};
    return out;
  }
  m->instr_log = hooks.instr_log;
  m->sys_log = hooks.sys_log;

  Engine engine(*m, cfg);
  try {
    engine.prepare();
  } catch (const std::exception& e) {
    out.status = {RunStatus::Kind::EngineAbort, e.what()};
    return out;
  }
  out.status = engine.run(limits);
  out.metrics = engine.metrics();
  out.trace = finalize_trace(*m, engine.virtual_cycles());
  return out;
}

}  // namespace g32::dbi
