#include "g32/machine.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cstring>

namespace g32 {

using isa::Instruction;
using isa::Op;
using isa::OpClass;

Page::Page() : bytes(std::make_unique<std::array<uint8_t, kPageSize>>()) {
  bytes->fill(0);
}

std::array<uint32_t, 15> ExceptionRecord::words() const {
  std::array<uint32_t, 15> w{};
  w[0] = static_cast<uint32_t>(code);
  w[1] = fault_addr;
  w[2] = pc;
  w[3] = flags;
  for (int i = 0; i < 8; ++i) w[4 + i] = regs[i];
  w[12] = lastip;
  w[13] = tid;
  w[14] = 0;
  return w;
}

ExceptionRecord ExceptionRecord::from_words(const std::array<uint32_t, 15>& w) {
  ExceptionRecord r;
  uint32_t c = w[0];
  r.code = (c >= 1 && c <= 8) ? static_cast<FaultCode>(c) : FaultCode::Raised;
  r.fault_addr = w[1];
  r.pc = w[2];
  r.flags = w[3];
  for (int i = 0; i < 8; ++i) r.regs[i] = w[4 + i];
  r.lastip = w[12];
  r.tid = w[13];
  return r;
}

uint64_t fnv1a64(const uint8_t* data, size_t len) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < len; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<uint8_t> ObservableTrace::bytes() const {
  std::vector<uint8_t> out(output.begin(), output.end());
  auto put = [&out](uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back((v >> (8 * i)) & 0xFF);
  };
  put(exit_code);
  for (uint32_t r : final_regs) put(r);
  put(static_cast<uint32_t>(cycles));
  put(static_cast<uint32_t>(cycles >> 32));
  return out;
}

std::string ObservableTrace::digest() const {
  auto b = bytes();
  return fmt::format("{:016x}", fnv1a64(b.data(), b.size()));
}

Machine::Machine(const Image& img, const RunLimits& lim)
    : limits(lim), image_(&img) {
  validate_image(img);
  for (const auto& s : img.segments) {
    uint32_t npages = (s.memlen + kPageSize - 1) / kPageSize;
    if (!map_pages(s.vaddr, npages, s.perms)) {
      throw LoadError(fmt::format("map conflict at 0x{:08X}", s.vaddr));
    }
    for (size_t i = 0; i < s.bytes.size(); ++i) {
      Page* p = page_at(s.vaddr + static_cast<uint32_t>(i));
      (*p->bytes)[(s.vaddr + i) % kPageSize] = s.bytes[i];
    }
  }
  args_ = img.args;
  for (const auto& e : img.env) env_.push_back({e, false});
  modules_.push_back({img.name, false});

  // thread 0
  ThreadState t;
  t.pc = img.entry;
  t.regs[7] = kStackTop;
  threads_[0] = t;
  if (!map_pages(kStackTop - kStackPages * kPageSize, kStackPages,
                 kPermR | kPermW) ||
      !map_pages(kFrameBase, 1, kPermR | kPermW)) {
    throw LoadError("stack/frame map conflict");
  }
}

bool Machine::map_pages(uint32_t addr, uint32_t npages, uint32_t perms,
                        bool engine_owned) {
  uint32_t first = page_of(addr);
  for (uint32_t i = 0; i < npages; ++i) {
    if (pages_.count(first + i)) return false;
  }
  for (uint32_t i = 0; i < npages; ++i) {
    Page& p = pages_[first + i];
    p.perms = perms;
    p.guest_perms = perms;
    p.engine = engine_owned;
  }
  committed_total_ += npages;
  peak_total_ = std::max(peak_total_, committed_total_);
  if (!engine_owned) {
    committed_guest_ += npages;
    peak_guest_ = std::max(peak_guest_, committed_guest_);
  }
  return true;
}

void Machine::unmap_pages(uint32_t addr, uint32_t npages) {
  uint32_t first = page_of(addr);
  for (uint32_t i = 0; i < npages; ++i) {
    auto it = pages_.find(first + i);
    if (it == pages_.end()) continue;
    committed_total_--;
    if (!it->second.engine) committed_guest_--;
    pages_.erase(it);
  }
}

Page* Machine::page_at(uint32_t addr) {
  auto it = pages_.find(page_of(addr));
  return it == pages_.end() ? nullptr : &it->second;
}

const Page* Machine::page_at(uint32_t addr) const {
  auto it = pages_.find(page_of(addr));
  return it == pages_.end() ? nullptr : &it->second;
}

ExceptionRecord Machine::make_record(uint32_t tid, FaultCode code,
                                     uint32_t fault_addr, uint32_t pc) const {
  ExceptionRecord rec;
  rec.code = code;
  rec.fault_addr = fault_addr;
  rec.pc = pc;
  rec.tid = tid;
  const ThreadState* t = thread(tid);
  if (t) {
    rec.flags = t->flags.pack();
    rec.regs = t->regs;
    rec.lastip = t->lastip;
  }
  return rec;
}

std::array<uint32_t, 15> Machine::context_image(uint32_t tid) const {
  ExceptionRecord rec;
  const ThreadState* t = thread(tid);
  rec.code = static_cast<FaultCode>(0);
  rec.fault_addr = 0;
  rec.tid = tid;
  if (t) {
    rec.pc = t->pc;
    rec.flags = t->flags.pack();
    rec.regs = t->regs;
    rec.lastip = t->lastip;
  }
  auto w = rec.words();
  w[0] = 0;
  return w;
}

std::optional<ExceptionRecord> Machine::access_check(uint32_t tid,
                                                     uint32_t addr,
                                                     uint32_t len,
                                                     bool is_write,
                                                     Access access) {
  if (len == 0) return std::nullopt;
  uint64_t last = static_cast<uint64_t>(addr) + len - 1;
  if (last > 0xFFFFFFFFULL) {
    return make_record(tid, is_write ? FaultCode::Write : FaultCode::Read,
                       addr, 0);
  }
  uint32_t first_pg = page_of(addr);
  uint32_t last_pg = page_of(static_cast<uint32_t>(last));
  FaultCode perm_fault = is_write ? FaultCode::Write : FaultCode::Read;
  uint32_t need = is_write ? kPermW : kPermR;

  for (uint32_t pg = first_pg; pg <= last_pg; ++pg) {
    uint32_t fa = std::max(addr, pg << kPageShift);
    auto it = pages_.find(pg);
    if (it == pages_.end()) return make_record(tid, perm_fault, fa, 0);
    Page& p = it->second;
    if (access == Access::Engine) continue;
    if (access == Access::Guest && hide_engine_data && p.engine) {
      return make_record(tid, perm_fault, fa, 0);
    }
    if (access == Access::Guest && p.guard && !p.engine) {
      p.guard = false;  // one-shot
      return make_record(tid, FaultCode::GuardHit, fa, 0);
    }
    uint32_t perms = access == Access::Kernel ? p.guest_perms : p.perms;
    if ((perms & need) == 0) return make_record(tid, perm_fault, fa, 0);
  }
  return std::nullopt;
}

std::optional<ExceptionRecord> Machine::read_mem(uint32_t tid, uint32_t addr,
                                                 uint32_t len, uint8_t* out,
                                                 Access access) {
  if (auto f = access_check(tid, addr, len, false, access)) return f;
  for (uint32_t i = 0; i < len; ++i) {
    const Page& p = pages_.at(page_of(addr + i));
    out[i] = (*p.bytes)[(addr + i) % kPageSize];
  }
  return std::nullopt;
}

std::optional<ExceptionRecord> Machine::write_mem(uint32_t tid, uint32_t addr,
                                                  uint32_t len,
                                                  const uint8_t* data,
                                                  Access access) {
  if (auto f = access_check(tid, addr, len, true, access)) return f;
  for (uint32_t i = 0; i < len; ++i) {
    Page& p = pages_.at(page_of(addr + i));
    (*p.bytes)[(addr + i) % kPageSize] = data[i];
  }
  if (access == Access::Kernel && on_code_page_write) {
    uint32_t first_pg = page_of(addr);
    uint32_t last_pg = page_of(addr + len - 1);
    for (uint32_t pg = first_pg; pg <= last_pg; ++pg) {
      auto it = pages_.find(pg);
      if (it != pages_.end() && it->second.code) on_code_page_write(pg);
    }
  }
  return std::nullopt;
}

std::optional<ExceptionRecord> Machine::check_fetch(uint32_t tid,
                                                    uint32_t addr,
                                                    bool consume_guard) {
  auto it = pages_.find(page_of(addr));
  if (it == pages_.end()) {
    return make_record(tid, FaultCode::ExecUnmapped, addr, addr);
  }
  Page& p = it->second;
  if (p.guard && !p.engine) {
    if (consume_guard) p.guard = false;
    return make_record(tid, FaultCode::GuardHit, addr, addr);
  }
  if ((p.perms & kPermX) == 0) {
    return make_record(tid, FaultCode::ExecNx, addr, addr);
  }
  return std::nullopt;
}

uint32_t Machine::read_u32_unchecked(uint32_t addr) const {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    const Page* p = page_at(addr + i);
    uint8_t b = p ? (*p->bytes)[(addr + i) % kPageSize] : 0;
    v |= static_cast<uint32_t>(b) << (8 * i);
  }
  return v;
}

void Machine::write_u32_engine(uint32_t addr, uint32_t value) {
  uint8_t b[4] = {static_cast<uint8_t>(value), static_cast<uint8_t>(value >> 8),
                  static_cast<uint8_t>(value >> 16),
                  static_cast<uint8_t>(value >> 24)};
  write_mem(0, addr, 4, b, Access::Engine);
}

RegionInfo Machine::query_region(uint32_t addr, PageView view) const {
  auto visible = [&](const Page& p) {
    return view == PageView::Raw || !p.engine;
  };
  auto perms_of = [&](const Page& p) {
    return view == PageView::Raw ? p.perms : p.guest_perms;
  };
  uint32_t pg = page_of(addr);
  auto it = pages_.find(pg);
  bool mapped = it != pages_.end() && visible(it->second);

  RegionInfo info;
  info.mapped = mapped;
  info.perms = mapped ? perms_of(it->second) : 0;

  if (mapped) {
    uint32_t lo = pg, hi = pg;
    auto down = it;
    while (down != pages_.begin()) {
      auto prev = std::prev(down);
      if (prev->first != lo - 1 || !visible(prev->second) ||
          perms_of(prev->second) != info.perms) {
        break;
      }
      lo = prev->first;
      down = prev;
    }
    auto up = std::next(it);
    while (up != pages_.end() && up->first == hi + 1 &&
           visible(up->second) && perms_of(up->second) == info.perms) {
      hi = up->first;
      ++up;
    }
    info.base = lo << kPageShift;
    info.size = (hi - lo + 1) * kPageSize;
    return info;
  }

  // unmapped: report the surrounding hole
  uint32_t lo = 0, hi = 0xFFFFF;
  for (auto down = pages_.lower_bound(pg); down != pages_.begin();) {
    --down;
    if (down->first < pg && visible(down->second)) {
      lo = down->first + 1;
      break;
    }
    if (down == pages_.begin()) break;
  }
  for (auto up = pages_.upper_bound(pg); up != pages_.end(); ++up) {
    if (visible(up->second)) {
      hi = up->first - 1;
      break;
    }
  }
  info.base = lo << kPageShift;
  uint64_t sz = (static_cast<uint64_t>(hi) - lo + 1) * kPageSize;
  info.size = static_cast<uint32_t>(std::min<uint64_t>(sz, 0xFFFFFFFFULL));
  return info;
}

// --- threads ---------------------------------------------------------

ThreadState* Machine::thread(uint32_t tid) {
  if (tid >= kMaxThreads || !threads_[tid]) return nullptr;
  return &*threads_[tid];
}

const ThreadState* Machine::thread(uint32_t tid) const {
  if (tid >= kMaxThreads || !threads_[tid]) return nullptr;
  return &*threads_[tid];
}

bool Machine::thread_exists(uint32_t tid) const {
  return tid < kMaxThreads && threads_[tid].has_value();
}

uint32_t Machine::thread_count() const {
  uint32_t n = 0;
  for (const auto& t : threads_) n += t.has_value();
  return n;
}

int Machine::create_thread(uint32_t entry, uint32_t arg) {
  int tid = -1;
  for (uint32_t i = 0; i < kMaxThreads; ++i) {
    if (!threads_[i]) {
      tid = static_cast<int>(i);
      break;
    }
  }
  if (tid < 0) return -1;
  uint32_t quota_needed = kStackPages + 1;
  if (quota_committed() + quota_needed > kCommitQuotaPages) return -1;

  uint32_t top = kStackTop - static_cast<uint32_t>(tid) * kStackSpacing;
  uint32_t frame = kFrameBase + static_cast<uint32_t>(tid) * kPageSize;
  // stack pages may already exist when a tid is reused
  bool need_stack = page_at(top - kPageSize) == nullptr;
  if (need_stack &&
      !map_pages(top - kStackPages * kPageSize, kStackPages, kPermR | kPermW)) {
    return -1;
  }
  if (page_at(frame) == nullptr && !map_pages(frame, 1, kPermR | kPermW)) {
    return -1;
  }
  ThreadState t;
  t.pc = entry & ~3u;
  t.regs[0] = arg;
  t.regs[7] = top;
  threads_[tid] = t;
  return tid;
}

int Machine::claim_engine_thread() {
  for (int i = kMaxThreads - 1; i >= 0; --i) {
    if (!threads_[i]) {
      ThreadState t;
      t.engine_owned = true;
      t.status = ThreadStatus::Blocked;
      t.blocked_on = 0xFFFFFFFF;
      t.pc = kSpillPage;
      threads_[i] = t;
      return i;
    }
  }
  return -1;
}

void Machine::release_engine_thread(uint32_t tid) {
  if (tid < kMaxThreads && threads_[tid] && threads_[tid]->engine_owned) {
    threads_[tid].reset();
  }
}

void Machine::wake_joiners(uint32_t tid, uint32_t code) {
  for (uint32_t i = 0; i < kMaxThreads; ++i) {
    if (threads_[i] && threads_[i]->status == ThreadStatus::Blocked &&
        !threads_[i]->engine_owned && threads_[i]->blocked_on == tid) {
      threads_[i]->status = ThreadStatus::Runnable;
      threads_[i]->regs[0] = code;
    }
  }
}

uint32_t Machine::open_handle(uint32_t kind, bool engine_owned) {
  Handle h;
  h.id = next_handle_id_++;
  h.kind = kind;
  h.engine_owned = engine_owned;
  handles_.push_back(h);
  return h.id;
}

void Machine::log_syscall(uint32_t tid, uint32_t no, uint64_t counter) {
  if (!sys_log) return;
  ThreadState* t = thread(tid);
  SysLogEntry e;
  e.tid = tid;
  e.no = no;
  e.counter = counter;
  if (t) e.results = {t->regs[0], t->regs[1], t->regs[2], t->regs[3]};
  sys_log->push_back(e);
}

// --- exception delivery ------------------------------------------------

Machine::DeliverResult Machine::deliver_exception(uint32_t tid,
                                                  const ExceptionRecord& rec) {
  ThreadState* t = thread(tid);
  if (!t) return DeliverResult::ThreadExited;
  if (t->handler != 0) {
    uint32_t frame = kFrameBase + tid * kPageSize;
    auto words = rec.words();
    for (size_t i = 0; i < words.size(); ++i) {
      write_u32_engine(frame + static_cast<uint32_t>(i) * 4, words[i]);
    }
    t->regs[1] = frame;
    t->pc = t->handler & ~3u;
    t->handler = 0;  // one-shot; handler must re-arm for nesting
    return DeliverResult::HandlerEntered;
  }
  t->status = ThreadStatus::Exited;
  t->exit_code = 128 + static_cast<uint32_t>(rec.code);
  wake_joiners(tid, t->exit_code);
  return DeliverResult::ThreadExited;
}

// --- the interpreter ----------------------------------------------------

namespace {

isa::Flags addsub_flags(uint32_t a, uint32_t b, uint32_t r, bool sub,
                        isa::Flags prev) {
  isa::Flags f = prev;
  f.z = r == 0;
  f.n = (r >> 31) != 0;
  if (sub) {
    f.c = a < b;  // borrow
    f.v = (((a ^ b) & (a ^ r)) >> 31) != 0;
  } else {
    f.c = r < a;
    f.v = (((a ^ r) & (b ^ r)) >> 31) != 0;
  }
  return f;
}

void zn_flags(isa::Flags& f, uint32_t r) {
  f.z = r == 0;
  f.n = (r >> 31) != 0;
}

}  // namespace

StepOutcome Machine::execute_injected(uint32_t tid,
                                      const isa::Instruction& instr) {
  last_step_cost = 0;
  return execute(tid, instr, nullptr);
}

StepOutcome Machine::exec_step(uint32_t tid, CalloutSink* sink) {
  last_step_cost = 0;
  ThreadState* t = thread(tid);
  if (!t || t->status != ThreadStatus::Runnable) {
    return {StepKind::Yield, {}};
  }
  uint32_t pc = t->pc;
  if (auto f = check_fetch(tid, pc)) {
    return {StepKind::Fault, *f};
  }
  uint32_t word = read_u32_unchecked(pc);
  isa::DecodeError derr;
  auto di = isa::decode(word, pc, &derr);
  if (!di) {
    return {StepKind::Fault, make_record(tid, FaultCode::IllegalOpcode, pc, pc)};
  }
  return execute(tid, *di, sink);
}

StepOutcome Machine::execute(uint32_t tid, const Instruction& i,
                             CalloutSink* sink) {
  ThreadState& t = *thread(tid);
  auto& r = t.regs;
  const uint32_t pc = i.addr;
  uint32_t next_pc = pc + 4;
  const int32_t simm = isa::sext16(i.imm);

  auto fault = [&](ExceptionRecord rec) {
    rec.pc = pc;
    return StepOutcome{StepKind::Fault, rec};
  };
  auto retire = [&]() {
    if (classify(i) == OpClass::Alu) t.lastip = pc;
    t.pc = next_pc;
    cycles += isa::cost(i);
    last_step_cost = isa::cost(i);
    if (instr_log) {
      (*instr_log) << fmt::format("{} {:08x} {} {}\n", tid, pc,
                                  isa::mnemonic(i.op), cycles);
    }
    return StepOutcome{StepKind::Retired, {}};
  };
  auto load = [&](uint32_t addr, uint32_t len,
                  uint32_t* out) -> std::optional<ExceptionRecord> {
    uint8_t buf[4] = {0, 0, 0, 0};
    if (auto f = read_mem(tid, addr, len, buf, Access::Guest)) return f;
    *out = buf[0] | (buf[1] << 8) | (buf[2] << 16) |
           (static_cast<uint32_t>(buf[3]) << 24);
    return std::nullopt;
  };
  auto store = [&](uint32_t addr, uint32_t len,
                   uint32_t v) -> std::optional<ExceptionRecord> {
    uint8_t buf[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8),
                      static_cast<uint8_t>(v >> 16),
                      static_cast<uint8_t>(v >> 24)};
    return write_mem(tid, addr, len, buf, Access::Guest);
  };

  switch (i.op) {
    case Op::Nop:
      return retire();
    case Op::MovRI:
      r[i.rd] = i.imm;
      return retire();
    case Op::MovHI:
      r[i.rd] = (r[i.rd] & 0xFFFF) | (static_cast<uint32_t>(i.imm) << 16);
      return retire();
    case Op::MovRR:
      r[i.rd] = r[i.rs];
      return retire();

    case Op::Add: {
      uint32_t res = r[i.rd] + r[i.rs];
      t.flags = addsub_flags(r[i.rd], r[i.rs], res, false, t.flags);
      r[i.rd] = res;
      return retire();
    }
    case Op::Addi: {
      uint32_t b = static_cast<uint32_t>(simm);
      uint32_t res = r[i.rd] + b;
      t.flags = addsub_flags(r[i.rd], b, res, false, t.flags);
      r[i.rd] = res;
      return retire();
    }
    case Op::Sub: {
      uint32_t res = r[i.rd] - r[i.rs];
      t.flags = addsub_flags(r[i.rd], r[i.rs], res, true, t.flags);
      r[i.rd] = res;
      return retire();
    }
    case Op::Cmp: {
      uint32_t res = r[i.rd] - r[i.rs];
      t.flags = addsub_flags(r[i.rd], r[i.rs], res, true, t.flags);
      return retire();
    }
    case Op::Cmpi: {
      uint32_t b = static_cast<uint32_t>(simm);
      uint32_t res = r[i.rd] - b;
      t.flags = addsub_flags(r[i.rd], b, res, true, t.flags);
      return retire();
    }
    case Op::Mul: {
      r[i.rd] = r[i.rd] * r[i.rs];
      zn_flags(t.flags, r[i.rd]);
      return retire();
    }
    case Op::Div: {
      if (r[i.rs] == 0) {
        return fault(make_record(tid, FaultCode::DivZero, 0, pc));
      }
      r[i.rd] = r[i.rd] / r[i.rs];
      zn_flags(t.flags, r[i.rd]);
      return retire();
    }
    case Op::And:
      r[i.rd] &= r[i.rs];
      zn_flags(t.flags, r[i.rd]);
      return retire();
    case Op::Or:
      r[i.rd] |= r[i.rs];
      zn_flags(t.flags, r[i.rd]);
      return retire();
    case Op::Xor:
      r[i.rd] ^= r[i.rs];
      zn_flags(t.flags, r[i.rd]);
      return retire();
    case Op::Shl:
      r[i.rd] <<= (i.imm & 31);
      zn_flags(t.flags, r[i.rd]);
      return retire();
    case Op::Shr:
      r[i.rd] >>= (i.imm & 31);
      zn_flags(t.flags, r[i.rd]);
      return retire();

    case Op::Ld: {
      uint32_t v;
      if (auto f = load(r[i.rs] + static_cast<uint32_t>(simm), 4, &v)) {
        return fault(*f);
      }
      r[i.rd] = v;
      return retire();
    }
    case Op::Ldb: {
      uint32_t v;
      if (auto f = load(r[i.rs] + static_cast<uint32_t>(simm), 1, &v)) {
        return fault(*f);
      }
      r[i.rd] = v & 0xFF;
      return retire();
    }
    case Op::St: {
      if (auto f = store(r[i.rd] + static_cast<uint32_t>(simm), 4, r[i.rs])) {
        return fault(*f);
      }
      return retire();
    }
    case Op::Stb: {
      if (auto f = store(r[i.rd] + static_cast<uint32_t>(simm), 1,
                         r[i.rs] & 0xFF)) {
        return fault(*f);
      }
      return retire();
    }

    case Op::Jmp:
      next_pc = isa::branch_target(i);
      return retire();
    case Op::Jz:
      if (t.flags.z) next_pc = isa::branch_target(i);
      return retire();
    case Op::Jnz:
      if (!t.flags.z) next_pc = isa::branch_target(i);
      return retire();
    case Op::Jlt:
      if (t.flags.n != t.flags.v) next_pc = isa::branch_target(i);
      return retire();
    case Op::Jge:
      if (t.flags.n == t.flags.v) next_pc = isa::branch_target(i);
      return retire();
    case Op::Jmpr:
      next_pc = r[i.rs] & ~3u;
      return retire();
    case Op::Call: {
      if (auto f = store(r[7] - 4, 4, pc + 4)) return fault(*f);
      r[7] -= 4;
      next_pc = isa::branch_target(i);
      return retire();
    }
    case Op::Callr: {
      if (auto f = store(r[7] - 4, 4, pc + 4)) return fault(*f);
      r[7] -= 4;
      next_pc = r[i.rs] & ~3u;
      return retire();
    }
    case Op::Ret: {
      uint32_t v;
      if (auto f = load(r[7], 4, &v)) return fault(*f);
      r[7] += 4;
      next_pc = v & ~3u;
      return retire();
    }
    case Op::Push: {
      if (auto f = store(r[7] - 4, 4, r[i.rs])) return fault(*f);
      r[7] -= 4;
      return retire();
    }
    case Op::Pop: {
      uint32_t v;
      if (auto f = load(r[7], 4, &v)) return fault(*f);
      r[7] += 4;
      r[i.rd] = v;
      return retire();
    }

    case Op::Rdlip:
      r[i.rd] = t.lastip;
      return retire();

    case Op::Sys: {
      const uint32_t sysno = r[0];
      cycles += isa::cost(i);
      last_step_cost = isa::cost(i);
      if (instr_log) {
        (*instr_log) << fmt::format("{} {:08x} SYS {}\n", tid, pc, cycles);
      }
      t.pc = pc + 4;  // default continuation; RESUME overrides
      StepOutcome out = syscall_raw(tid, pc);
      if (!external_sys_log && out.kind != StepKind::Fault) {
        log_syscall(tid, sysno, cycles);
      }
      return out;
    }

    case Op::Callout:
      if (sink) return sink->on_callout(tid, pc);
      return fault(make_record(tid, FaultCode::IllegalOpcode, pc, pc));
  }
  return fault(make_record(tid, FaultCode::IllegalOpcode, pc, pc));
}

// --- scheduler ---------------------------------------------------------

RunStatus run_scheduler(
    Machine& m, const std::function<RunStatus(uint32_t tid)>& quantum) {
  uint32_t cursor = 0;
  while (true) {
    ThreadState* t0 = m.thread(0);
    if (!t0) return {RunStatus::Kind::Deadlock, "thread 0 missing"};
    if (t0->status == ThreadStatus::Exited) return {};

    int next = -1;
    for (uint32_t off = 0; off < kMaxThreads; ++off) {
      uint32_t tid = (cursor + off) % kMaxThreads;
      ThreadState* t = m.thread(tid);
      if (t && !t->engine_owned && t->status == ThreadStatus::Runnable) {
        next = static_cast<int>(tid);
        break;
      }
    }
    if (next < 0) {
      bool all_exited = true;
      for (uint32_t tid = 0; tid < kMaxThreads; ++tid) {
        ThreadState* t = m.thread(tid);
        if (t && !t->engine_owned && t->status != ThreadStatus::Exited) {
          all_exited = false;
        }
      }
      if (all_exited) return {};
      return {RunStatus::Kind::Deadlock, "all live threads blocked"};
    }
    m.sched_tick_++;
    RunStatus st = quantum(static_cast<uint32_t>(next));
    if (!st.ok()) return st;
    cursor = (static_cast<uint32_t>(next) + 1) % kMaxThreads;
  }
}

ObservableTrace finalize_trace(const Machine& m, uint64_t trace_cycles) {
  ObservableTrace tr;
  tr.output = m.output;
  tr.cycles = trace_cycles;
  const ThreadState* t0 = m.thread(0);
  if (t0) {
    tr.exit_code = t0->exit_code;
    tr.final_regs = t0->regs;
  }
  return tr;
}

}  // namespace g32
