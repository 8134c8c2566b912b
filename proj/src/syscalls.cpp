#include "g32/machine.hpp"

namespace g32 {

namespace {

constexpr uint32_t kErr = 1;
constexpr uint32_t kInvalid = 0xFFFFFFFF;
constexpr uint32_t kWriteCap = 1u << 20;

}  // namespace

// Toy OS surface. Numbers and register conventions:
//   R0 = syscall number in, primary result out; args in R1..R3.
StepOutcome Machine::syscall_raw(uint32_t tid, uint32_t pc) {
  ThreadState& t = *thread(tid);
  auto& r = t.regs;
  const uint32_t no = r[0];

  switch (no) {
    case 1: {  // EXIT(code)
      t.status = ThreadStatus::Exited;
      t.exit_code = r[1];
      wake_joiners(tid, t.exit_code);
      return {StepKind::Exited, {}};
    }
    case 2: {  // WRITE(ptr, len)
      uint32_t len = r[2];
      if (len > kWriteCap) {
        r[0] = kErr;
        return {};
      }
      std::vector<uint8_t> buf(len);
      if (len && read_mem(tid, r[1], len, buf.data(), Access::Kernel)) {
        r[0] = kErr;
        return {};
      }
      output.append(buf.begin(), buf.end());
      r[0] = 0;
      return {};
    }
    case 3: {  // TIME
      r[0] = static_cast<uint32_t>(cycles);
      return {};
    }
    case 4: {  // ALLOC(npages, perms) -> base | 0
      uint32_t n = r[1];
      uint32_t perms = r[2] & 7;
      if (n == 0 || n > 4096 ||
          quota_committed() + n > kCommitQuotaPages) {
        r[0] = 0;
        return {};
      }
      const uint32_t start = page_of(kAllocBase);
      const uint32_t ceiling = page_of(kAllocCeiling);
      uint32_t cursor = start;
      uint32_t found = 0;
      auto it = pages_.lower_bound(start);
      while (true) {
        bool past = it == pages_.end() || it->first >= ceiling;
        uint32_t next_mapped = past ? ceiling : it->first;
        if (next_mapped >= cursor + n) {
          found = cursor;
          break;
        }
        if (past) break;
        cursor = std::max(cursor, it->first + 1);
        ++it;
      }
      if (!found) {
        r[0] = 0;
        return {};
      }
      map_pages(found << kPageShift, n, perms);
      alloc_regions_[found << kPageShift] = n;
      r[0] = found << kPageShift;
      return {};
    }
    case 5: {  // FREE(base)
      auto it = alloc_regions_.find(r[1]);
      if (it == alloc_regions_.end()) {
        r[0] = kErr;
        return {};
      }
      unmap_pages(it->first, it->second);
      alloc_regions_.erase(it);
      r[0] = 0;
      return {};
    }
    case 6: {  // PROTECT(addr, npages, perms)
      uint32_t first = page_of(r[1]);
      uint32_t n = r[2];
      uint32_t perms = r[3] & 7;
      if (n == 0 || n > 4096) {
        r[0] = kErr;
        return {};
      }
      for (uint32_t i = 0; i < n; ++i) {
        if (!pages_.count(first + i)) {
          r[0] = kErr;
          return {};
        }
      }
      for (uint32_t i = 0; i < n; ++i) {
        Page& p = pages_[first + i];
        p.perms = perms;
        p.guest_perms = perms;
        p.wp = false;
        if (on_page_perms_changed) on_page_perms_changed(first + i);
      }
      r[0] = 0;
      return {};
    }
    case 7: {  // QUERY(addr)
      RegionInfo info = query_region(r[1], PageView::Raw);
      r[0] = info.mapped ? 1 : 0;
      r[1] = info.perms;
      r[2] = info.base;
      r[3] = info.size;
      return {};
    }
    case 8: {  // GUARD(addr)
      Page* p = page_at(r[1]);
      if (!p) {
        r[0] = kErr;
        return {};
      }
      p->guard = true;
      if (on_page_guarded) on_page_guarded(page_of(r[1]));
      r[0] = 0;
      return {};
    }
    case 9: {  // SETEXCH(handler)
      t.handler = r[1];
      r[0] = 0;
      return {};
    }
    case 10: {  // RESUME(frame)
      std::array<uint32_t, 15> w{};
      uint8_t buf[60];
      if (read_mem(tid, r[1], 60, buf, Access::Kernel)) {
        r[0] = kErr;
        return {};
      }
      for (int i = 0; i < 15; ++i) {
        w[i] = buf[i * 4] | (buf[i * 4 + 1] << 8) | (buf[i * 4 + 2] << 16) |
               (static_cast<uint32_t>(buf[i * 4 + 3]) << 24);
      }
      ExceptionRecord rec = ExceptionRecord::from_words(w);
      t.regs = rec.regs;
      t.flags = isa::Flags::unpack(rec.flags);
      t.lastip = rec.lastip;
      t.pc = rec.pc & ~3u;
      return {};
    }
    case 11: {  // RAISE(code)
      uint32_t c = (r[1] >= 1 && r[1] <= 8) ? r[1] : 8;
      ExceptionRecord rec =
          make_record(tid, static_cast<FaultCode>(c), 0, pc);
      return {StepKind::Fault, rec};
    }
    case 12: {  // GETARGS(buf, cap)
      uint32_t len = static_cast<uint32_t>(args_.size());
      uint32_t n = std::min(len, r[2]);
      if (n && write_mem(tid, r[1], n, args_.data(), Access::Kernel)) {
        r[0] = kInvalid;
        return {};
      }
      r[0] = len;
      return {};
    }
    case 13: {  // ENUMENV(idx, buf, cap)
      if (r[1] >= env_.size()) {
        r[0] = kInvalid;
        return {};
      }
      const std::string& e = env_[r[1]].text;
      uint32_t n = std::min<uint32_t>(static_cast<uint32_t>(e.size()), r[3]);
      if (n && write_mem(tid, r[2], n,
                         reinterpret_cast<const uint8_t*>(e.data()),
                         Access::Kernel)) {
        r[0] = kInvalid;
        return {};
      }
      r[0] = static_cast<uint32_t>(e.size());
      return {};
    }
    case 14: {  // GETPPID
      r[0] = ppid_;
      return {};
    }
    case 15: {  // OPEN(kind)
      if (r[1] < 1 || r[1] > 4) {
        r[0] = kInvalid;
        return {};
      }
      r[0] = open_handle(r[1], false);
      return {};
    }
    case 16: {  // CLOSE(handle)
      for (auto it = handles_.begin(); it != handles_.end(); ++it) {
        if (it->id == r[1]) {
          handles_.erase(it);
          r[0] = 0;
          return {};
        }
      }
      r[0] = kErr;
      return {};
    }
    case 17: {  // ENUMHANDLES(idx)
      if (r[1] >= handles_.size()) {
        r[0] = kInvalid;
        return {};
      }
      r[0] = handles_[r[1]].id;
      r[1] = handles_[r[1]].kind;
      return {};
    }
    case 18: {  // TLSGET(slot)
      r[0] = r[1] < kTlsSlots ? t.tls[r[1]] : kInvalid;
      return {};
    }
    case 19: {  // TLSSET(slot, value)
      if (r[1] < kTlsSlots) {
        t.tls[r[1]] = r[2];
        r[0] = 0;
      } else {
        r[0] = kErr;
      }
      return {};
    }
    case 20: {  // MEMSTATS
      r[0] = committed_total_;
      r[1] = peak_total_;
      return {};
    }
    case 21: {  // TCREATE(entry, arg)
      int tid2 = create_thread(r[1], r[2]);
      r[0] = static_cast<uint32_t>(tid2);
      return {};
    }
    case 22:  // TYIELD
      r[0] = 0;
      return {StepKind::Yield, {}};
    case 23: {  // TJOIN(tid)
      uint32_t target = r[1];
      if (target == tid || target >= kMaxThreads || !threads_[target]) {
        r[0] = kInvalid;
        return {};
      }
      if (threads_[target]->status == ThreadStatus::Exited) {
        r[0] = threads_[target]->exit_code;
        return {};
      }
      t.status = ThreadStatus::Blocked;
      t.blocked_on = target;
      return {StepKind::Blocked, {}};
    }
    case 24: {  // TGETCTX(tid, buf)
      uint32_t target = r[1];
      if (target >= kMaxThreads || !threads_[target]) {
        r[0] = kErr;
        return {};
      }
      auto w = context_image(target);
      uint8_t buf[60];
      for (int i = 0; i < 15; ++i) {
        buf[i * 4] = w[i] & 0xFF;
        buf[i * 4 + 1] = (w[i] >> 8) & 0xFF;
        buf[i * 4 + 2] = (w[i] >> 16) & 0xFF;
        buf[i * 4 + 3] = (w[i] >> 24) & 0xFF;
      }
      if (write_mem(tid, r[2], 60, buf, Access::Kernel)) {
        r[0] = kErr;
        return {};
      }
      r[0] = 0;
      return {};
    }
    case 25: {  // ENUMMODS(idx, buf, cap)
      if (r[1] >= modules_.size()) {
        r[0] = kInvalid;
        return {};
      }
      const std::string& mname = modules_[r[1]].name;
      uint32_t n =
          std::min<uint32_t>(static_cast<uint32_t>(mname.size()), r[3]);
      if (n && write_mem(tid, r[2], n,
                         reinterpret_cast<const uint8_t*>(mname.data()),
                         Access::Kernel)) {
        r[0] = kInvalid;
        return {};
      }
      r[0] = static_cast<uint32_t>(mname.size());
      return {};
    }
    default:
      r[0] = kInvalid;  // ENOSYS
      return {};
  }
}

}  // namespace g32
