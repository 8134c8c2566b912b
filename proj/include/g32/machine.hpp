#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "g32/image.hpp"
#include "g32/isa.hpp"
#include "g32/layout.hpp"

namespace g32 {

enum class FaultCode : uint32_t {
  Read = 1,
  Write = 2,
  ExecNx = 3,
  ExecUnmapped = 4,
  GuardHit = 5,
  IllegalOpcode = 6,
  DivZero = 7,
  Raised = 8,
};

// Written to the faulting thread's frame page as 15 little-endian words:
// code, fault_addr, pc, flags, r0..r7, lastip, tid, reserved(0).
struct ExceptionRecord {
  FaultCode code = FaultCode::Raised;
  uint32_t fault_addr = 0;
  uint32_t pc = 0;
  uint32_t flags = 0;
  std::array<uint32_t, 8> regs{};
  uint32_t lastip = 0;
  uint32_t tid = 0;

  std::array<uint32_t, 15> words() const;
  static ExceptionRecord from_words(const std::array<uint32_t, 15>& w);
};

enum class ThreadStatus : uint8_t { Runnable, Blocked, Exited };

struct ThreadState {
  std::array<uint32_t, 8> regs{};
  uint32_t pc = 0;
  isa::Flags flags;
  uint32_t lastip = 0;
  std::array<uint32_t, kTlsSlots> tls{};
  ThreadStatus status = ThreadStatus::Runnable;
  uint32_t exit_code = 0;
  uint32_t blocked_on = 0;
  uint32_t handler = 0;   // SYS_SETEXCH target, one-shot
  bool engine_owned = false;  // engine maintenance context
};

struct Page {
  uint32_t perms = 0;        // physical permission bits
  uint32_t guest_perms = 0;  // what the guest believes (wp masking)
  bool guard = false;
  bool code = false;    // has live translated blocks (engine only)
  bool engine = false;  // engine arena / spill page
  bool wp = false;      // engine write-protected for SMC tracking
  std::unique_ptr<std::array<uint8_t, kPageSize>> bytes;

  Page();
};

struct Handle {
  uint32_t id = 0;
  uint32_t kind = 0;  // 1=FILE 2=EVENT 3=SECTION 4=LOG
  bool engine_owned = false;
};

struct EnvEntry {
  std::string text;  // NAME=VALUE
  bool engine_owned = false;
};

struct ModuleEntry {
  std::string name;
  bool engine_owned = false;
};

struct SysLogEntry {
  uint32_t tid = 0;
  uint32_t no = 0;
  uint64_t counter = 0;  // cycle counter observed at retirement
  std::array<uint32_t, 4> results{};
};

enum class StepKind : uint8_t {
  Retired,
  Yield,    // SYS_TYIELD
  Blocked,  // SYS_TJOIN on a live thread
  Exited,
  Fault,  // undelivered; caller decides delivery
};

struct StepOutcome {
  StepKind kind = StepKind::Retired;
  ExceptionRecord rec;
};

enum class Access : uint8_t {
  Guest,   // full semantics: perms, guards, engine-page hiding
  Kernel,  // syscall buffer traffic: perms, no guard trips
  Engine,  // engine internals: mapped pages only
};

// Host-side receiver for CALLOUT instructions; absent a sink they fault.
class CalloutSink {
 public:
  virtual ~CalloutSink() = default;
  virtual StepOutcome on_callout(uint32_t tid, uint32_t addr) = 0;
};

struct RunLimits {
  uint64_t max_cycles = kDefaultMaxCycles;
  uint32_t max_pages = kDefaultMaxPages;
};

struct ObservableTrace {
  std::string output;
  uint32_t exit_code = 0;
  std::array<uint32_t, 8> final_regs{};
  uint64_t cycles = 0;

  std::vector<uint8_t> bytes() const;
  std::string digest() const;  // fnv1a-64 of bytes(), hex
  bool operator==(const ObservableTrace&) const = default;
};

struct RunStatus {
  enum class Kind {
    Ok,
    CycleLimit,
    MemoryLimit,
    Deadlock,
    EngineAbort,
    LoadError,
  };
  Kind kind = Kind::Ok;
  std::string reason;

  bool ok() const { return kind == Kind::Ok; }
};

struct RegionInfo {
  bool mapped = false;
  uint32_t perms = 0;
  uint32_t base = 0;
  uint32_t size = 0;
};

enum class PageView : uint8_t {
  Raw,           // physical truth, engine pages included
  GuestVirtual,  // engine pages absent, wp masking undone
};

// The guest machine: paged memory, cooperative threads, the toy OS
// syscall surface and exception delivery. One instance per run; no
// shared state between instances.
class Machine {
 public:
  struct LoadError : std::runtime_error {
    using std::runtime_error::runtime_error;
  };

  Machine(const Image& img, const RunLimits& limits);

  // --- memory ------------------------------------------------------
  bool map_pages(uint32_t addr, uint32_t npages, uint32_t perms,
                 bool engine_owned = false);
  void unmap_pages(uint32_t addr, uint32_t npages);
  Page* page_at(uint32_t addr);
  const Page* page_at(uint32_t addr) const;

  std::optional<ExceptionRecord> read_mem(uint32_t tid, uint32_t addr,
                                          uint32_t len, uint8_t* out,
                                          Access access);
  std::optional<ExceptionRecord> write_mem(uint32_t tid, uint32_t addr,
                                           uint32_t len, const uint8_t* data,
                                           Access access);
  std::optional<ExceptionRecord> check_fetch(uint32_t tid, uint32_t addr,
                                             bool consume_guard = true);

  uint32_t read_u32_unchecked(uint32_t addr) const;
  void write_u32_engine(uint32_t addr, uint32_t value);

  RegionInfo query_region(uint32_t addr, PageView view) const;
  uint32_t committed_total() const { return committed_total_; }
  uint32_t peak_total() const { return peak_total_; }
  uint32_t committed_guest() const { return committed_guest_; }
  uint32_t peak_guest() const { return peak_guest_; }

  // --- execution -----------------------------------------------------
  StepOutcome exec_step(uint32_t tid, CalloutSink* sink);

  // Executes a synthesized instruction (hook replacements, displaced
  // detour instructions). pc advances to instr.addr + 4 on retirement.
  StepOutcome execute_injected(uint32_t tid, const isa::Instruction& instr);

  // Cost charged by the most recent retired step; 0 for callouts.
  uint32_t last_step_cost = 0;

  enum class DeliverResult { HandlerEntered, ThreadExited };
  DeliverResult deliver_exception(uint32_t tid, const ExceptionRecord& rec);

  ExceptionRecord make_record(uint32_t tid, FaultCode code,
                              uint32_t fault_addr, uint32_t pc) const;
  std::array<uint32_t, 15> context_image(uint32_t tid) const;

  // Raw syscall semantics (no virtualization). `pc` is the guest
  // address of the SYS instruction, used for RAISE records.
  StepOutcome syscall_raw(uint32_t tid, uint32_t pc);

  // --- threads -------------------------------------------------------
  ThreadState* thread(uint32_t tid);
  const ThreadState* thread(uint32_t tid) const;
  bool thread_exists(uint32_t tid) const;
  int create_thread(uint32_t entry, uint32_t arg);  // -1 on failure
  int claim_engine_thread();                        // -1 when full
  void release_engine_thread(uint32_t tid);
  void wake_joiners(uint32_t tid, uint32_t code);
  uint32_t thread_count() const;

  // --- environment -----------------------------------------------------
  std::vector<Handle>& handles() { return handles_; }
  const std::vector<Handle>& handles() const { return handles_; }
  uint32_t open_handle(uint32_t kind, bool engine_owned);
  std::vector<EnvEntry>& env() { return env_; }
  std::vector<ModuleEntry>& modules() { return modules_; }
  const std::vector<ModuleEntry>& modules() const { return modules_; }
  std::vector<uint8_t>& args() { return args_; }
  void set_ppid(uint32_t p) { ppid_ = p; }
  uint32_t ppid() const { return ppid_; }

  const std::map<uint32_t, uint32_t>& alloc_regions() const {
    return alloc_regions_;
  }

  // --- run state -------------------------------------------------------
  uint64_t cycles = 0;
  std::string output;
  RunLimits limits;

  // Shield policy switches (set by the engine before the guest runs).
  bool hide_engine_data = false;   // guest access to engine pages faults
  bool quota_guest_pages = false;  // commit quota ignores engine pages

  std::ostream* instr_log = nullptr;
  std::vector<SysLogEntry>* sys_log = nullptr;
  // When set, syscall_raw leaves logging to the caller (the engine logs
  // with its virtual counter).
  bool external_sys_log = false;

  // Invoked after a Kernel-access write lands on a page with live
  // translated blocks.
  std::function<void(uint32_t page_idx)> on_code_page_write;
  // Invoked after SYS_PROTECT changes a page; the engine re-applies
  // SMC write protection here.
  std::function<void(uint32_t page_idx)> on_page_perms_changed;
  // Invoked after SYS_GUARD arms a page.
  std::function<void(uint32_t page_idx)> on_page_guarded;

  const Image* image() const { return image_; }
  uint32_t tick_count() const { return sched_tick_; }
  uint32_t sched_tick_ = 0;

  void log_syscall(uint32_t tid, uint32_t no, uint64_t counter);

 private:
  const Image* image_;
  std::map<uint32_t, Page> pages_;
  std::array<std::optional<ThreadState>, kMaxThreads> threads_;
  std::vector<Handle> handles_;
  uint32_t next_handle_id_ = 1;
  std::vector<EnvEntry> env_;
  std::vector<ModuleEntry> modules_;
  std::vector<uint8_t> args_;
  uint32_t ppid_ = 1;
  std::map<uint32_t, uint32_t> alloc_regions_;  // base -> npages

  uint32_t committed_total_ = 0;
  uint32_t peak_total_ = 0;
  uint32_t committed_guest_ = 0;
  uint32_t peak_guest_ = 0;

  std::optional<ExceptionRecord> access_check(uint32_t tid, uint32_t addr,
                                              uint32_t len, bool is_write,
                                              Access access);
  StepOutcome execute(uint32_t tid, const isa::Instruction& i,
                      CalloutSink* sink);
  uint32_t quota_committed() const {
    return quota_guest_pages ? committed_guest_ : committed_total_;
  }

  friend class SyscallLayer;
};

// Deterministic cooperative round-robin; `quantum` runs one thread until
// yield/block/exit/fault and returns a status (Ok = keep scheduling).
RunStatus run_scheduler(Machine& m,
                        const std::function<RunStatus(uint32_t tid)>& quantum);

ObservableTrace finalize_trace(const Machine& m, uint64_t trace_cycles);

uint64_t fnv1a64(const uint8_t* data, size_t len);

}  // namespace g32
