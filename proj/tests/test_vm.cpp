#include "doctest.h"

#include <random>
#include <sstream>

#include "g32/assembler.hpp"
#include "g32/reference.hpp"

using namespace g32;

namespace {

RunOutput run_src(const std::string& src, RunLimits limits = {},
                  RunHooks hooks = {}) {
  Image img = assemble(src);
  return run_reference(img, limits, hooks);
}

// WRITE(msg) then EXIT(0), printing "CLEAN\n".
const char* kClean = R"(
.seg code
start:
    MOVri R0, 2
    LI    R1, msg
    MOVri R2, 6
    SYS
    MOVri R0, 1
    MOVri R1, 0
    SYS
.seg data
msg: .asciz "CLEAN\n"
.entry start
)";

}  // namespace

TEST_CASE("clean printer runs to completion") {
  auto out = run_src(kClean);
  REQUIRE(out.status.ok());
  CHECK(out.trace.output == "CLEAN\n");
  CHECK(out.trace.exit_code == 0);
}

TEST_CASE("load posts a single runnable thread with the documented frame") {
  Image img = assemble(kClean);
  Machine m(img, RunLimits{});
  REQUIRE(m.thread(0) != nullptr);
  CHECK(m.thread(0)->status == ThreadStatus::Runnable);
  CHECK(m.thread(0)->pc == img.entry);
  CHECK(m.thread(0)->regs[7] == kStackTop);
  CHECK(m.thread_count() == 1);
  CHECK(m.page_at(kFrameBase) != nullptr);
  CHECK(m.page_at(kStackTop - kPageSize) != nullptr);
}

TEST_CASE("identical images load to identical committed counts") {
  Image img = assemble(kClean);
  Machine a(img, RunLimits{});
  Machine b(img, RunLimits{});
  CHECK(a.committed_total() == b.committed_total());
  CHECK(a.committed_total() == a.committed_guest());
}

TEST_CASE("ADD updates flags, LASTIP and the cycle counter") {
  Image img = assemble(R"(
.seg code
start:
    MOVri R1, 2
    MOVri R2, 3
    ADD   R1, R2
    MOVri R0, 1
    MOVri R1, 0
    SYS
.entry start
)");
  Machine m(img, RunLimits{});
  CHECK(m.exec_step(0, nullptr).kind == StepKind::Retired);
  CHECK(m.exec_step(0, nullptr).kind == StepKind::Retired);
  uint64_t before = m.cycles;
  CHECK(m.exec_step(0, nullptr).kind == StepKind::Retired);
  CHECK(m.thread(0)->regs[1] == 5);
  CHECK(m.thread(0)->flags.z == false);
  CHECK(m.thread(0)->lastip == kCodeBase + 8);
  CHECK(m.cycles - before == 1);
}

TEST_CASE("DIV by zero faults with the instruction address") {
  Image img = assemble(R"(
.seg code
start:
    MOVri R1, 10
    MOVri R2, 0
    DIV   R1, R2
.entry start
)");
  Machine m(img, RunLimits{});
  m.exec_step(0, nullptr);
  m.exec_step(0, nullptr);
  auto out = m.exec_step(0, nullptr);
  REQUIRE(out.kind == StepKind::Fault);
  CHECK(out.rec.code == FaultCode::DivZero);
  CHECK(out.rec.pc == kCodeBase + 8);
}

TEST_CASE("fetch from unmapped memory faults") {
  Image img = assemble(R"(
.seg code
start:
    LI   R1, 0x00001000
    JMPR R1
.entry start
)");
  Machine m(img, RunLimits{});
  m.exec_step(0, nullptr);
  m.exec_step(0, nullptr);
  m.exec_step(0, nullptr);
  auto out = m.exec_step(0, nullptr);
  REQUIRE(out.kind == StepKind::Fault);
  CHECK(out.rec.code == FaultCode::ExecUnmapped);
  CHECK(out.rec.fault_addr == 0x00001000);
  CHECK(out.rec.pc == 0x00001000);
}

TEST_CASE("entry in a non-X segment faults on the first step") {
  Image img;
  Segment code;
  code.vaddr = kCodeBase;
  code.perms = kPermR | kPermX;
  code.bytes = {0x01, 0, 0, 0};
  code.memlen = 4;
  Segment data;
  data.vaddr = kDataBase;
  data.perms = kPermR | kPermW;
  data.bytes = {0x01, 0, 0, 0};
  data.memlen = 4;
  img.segments = {code, data};
  img.entry = kCodeBase;
  Machine m(img, RunLimits{});
  m.thread(0)->pc = kDataBase;  // simulate a jump into data
  auto out = m.exec_step(0, nullptr);
  REQUIRE(out.kind == StepKind::Fault);
  CHECK(out.rec.code == FaultCode::ExecNx);
}

TEST_CASE("back-to-back TIME calls differ by exactly the SYS cost") {
  Image img = assemble(kClean);
  Machine m(img, RunLimits{});
  auto& r = m.thread(0)->regs;
  m.cycles += 10;  // exec_step charges SYS before dispatching
  r[0] = 3;
  m.syscall_raw(0, 0);
  uint32_t t0 = r[0];
  m.cycles += 10;
  r[0] = 3;
  m.syscall_raw(0, 0);
  CHECK(r[0] - t0 == 10);
}

TEST_CASE("TIME around 1000 ADDs charges 1000 cycles plus glue") {
  // Two glue instructions (save t0, reload the syscall number) sit
  // between the samples, so the exact delta is 1000 + 10 + 2.
  auto out = run_src(R"(
.seg code
start:
    MOVri R0, 3
    SYS                 ; t0 in R0
    MOVrr R4, R0
.rept 1000
    ADD   R5, R6
.endr
    MOVri R0, 3
    SYS                 ; t1
    SUB   R0, R4
    MOVrr R1, R0        ; exit code = delta
    MOVri R0, 1
    SYS
.entry start
)");
  REQUIRE(out.status.ok());
  CHECK(out.trace.exit_code == 1012);
}

TEST_CASE("ALLOC then MEMSTATS shows baseline plus two") {
  Image img = assemble(kClean);
  Machine m(img, RunLimits{});
  uint32_t baseline = m.committed_total();
  auto& r = m.thread(0)->regs;
  r[0] = 4;  // ALLOC
  r[1] = 2;
  r[2] = kPermR | kPermW;
  m.syscall_raw(0, 0);
  uint32_t base = r[0];
  CHECK(base >= kAllocBase);
  r[0] = 20;  // MEMSTATS
  m.syscall_raw(0, 0);
  CHECK(r[0] == baseline + 2);
  CHECK(r[1] == baseline + 2);

  // FREE of an address never allocated is invalid
  r[0] = 5;
  r[1] = 0x12345000;
  m.syscall_raw(0, 0);
  CHECK(r[0] == 1);
  // FREE of the allocation returns the pages
  r[0] = 5;
  r[1] = base;
  m.syscall_raw(0, 0);
  CHECK(r[0] == 0);
  r[0] = 20;
  m.syscall_raw(0, 0);
  CHECK(r[0] == baseline);
  CHECK(r[1] == baseline + 2);  // peak remembers
}

TEST_CASE("guard pages fire exactly once per arming") {
  // Handler state must live in the saved frame: RESUME restores registers.
  auto out = run_src(R"(
.seg code
start:
    MOVri R0, 9          ; SETEXCH
    LI    R1, handler
    SYS
    MOVri R0, 8          ; GUARD(buf page)
    LI    R1, buf
    SYS
    LI    R3, buf
    MOVri R4, 77
    ST    [R3], R4       ; trips the guard once
    ST    [R3], R4       ; second store runs silently
    LD    R5, [R3]
    MOVrr R1, R5
    MOVri R0, 1
    SYS                  ; exit 77
handler:
    MOVrr R3, R1         ; frame
    LD    R2, [R3+40]    ; saved R6 = hit count
    ADDI  R2, 1
    ST    [R3+40], R2
    MOVri R0, 9          ; re-arm handler
    LI    R1, handler
    SYS
    MOVri R0, 10         ; RESUME(frame)
    MOVrr R1, R3
    SYS
.seg data
.align 4096
buf: .word 0
.entry start
)");
  REQUIRE(out.status.ok());
  CHECK(out.trace.exit_code == 77);
  CHECK(out.trace.final_regs[6] == 1);  // exactly one hit
}

TEST_CASE("exception delivery enters the handler with the frame address") {
  auto out = run_src(R"(
.seg code
start:
    MOVri R0, 9
    LI    R1, handler
    SYS
    MOVri R0, 11         ; RAISE(8)
    MOVri R1, 8
    SYS
handler:
    MOVri R0, 1          ; exit(R1 == frame address? R1 is frame)
    SYS
.entry start
)");
  REQUIRE(out.status.ok());
  CHECK(out.trace.exit_code == kFrameBase);
}

TEST_CASE("unhandled DIV_ZERO exits with 128+7") {
  auto out = run_src(R"(
.seg code
start:
    MOVri R1, 4
    MOVri R2, 0
    DIV   R1, R2
.entry start
)");
  REQUIRE(out.status.ok());
  CHECK(out.trace.exit_code == 135);
}

TEST_CASE("handler can rewrite the saved pc and RESUME past the fault") {
  auto out = run_src(R"(
.seg code
start:
    MOVri R0, 9
    LI    R1, handler
    SYS
    LI    R3, 0x00000100 ; unmapped
    LD    R4, [R3]       ; faults
    JMP   done
done:
    MOVrr R1, R5
    MOVri R0, 1
    SYS
handler:
    LD    R2, [R1+8]     ; saved pc
    ADDI  R2, 4          ; skip the LD
    ST    [R1+8], R2
    MOVri R5, 42
    ST    [R1+36], R5    ; saved R5 slot
    MOVri R0, 10         ; RESUME(frame)
    SYS
.entry start
)");
  REQUIRE(out.status.ok());
  CHECK(out.trace.exit_code == 42);
}

TEST_CASE("fib(20) prints 6765") {
  auto out = run_src(R"(
.seg code
start:
    MOVri R1, 0          ; a
    MOVri R2, 1          ; b
    MOVri R3, 20         ; n
loop:
    CMPI  R3, 0
    JZ    print
    MOVrr R4, R2
    ADD   R2, R1
    MOVrr R1, R4
    ADDI  R3, -1
    JMP   loop
print:
    ; decimal itoa of R1 into buf (backwards, newline already placed)
    LI    R5, bufend
    MOVri R6, 10
itoa:
    ADDI  R5, -1
    MOVrr R4, R1
    DIV   R4, R6         ; q
    MOVrr R2, R4
    MUL   R2, R6
    MOVrr R0, R1
    SUB   R0, R2         ; rem
    ADDI  R0, 48
    STB   [R5], R0
    MOVrr R1, R4
    CMPI  R1, 0
    JNZ   itoa
    LI    R2, bufend
    ADDI  R2, 1          ; include the newline
    SUB   R2, R5         ; len
    MOVrr R1, R5
    MOVri R0, 2
    SYS
    MOVri R0, 1
    MOVri R1, 0
    SYS
.seg data
buf: .space 15
bufend: .byte '\n'
.entry start
)");
  REQUIRE(out.status.ok());
  CHECK(out.trace.output == "6765\n");
  CHECK(out.trace.exit_code == 0);
}

TEST_CASE("self-modifying store is visible to reference execution") {
  auto out = run_src(R"(
.seg code
start:
    MOVri R0, 6          ; PROTECT(code page, 1, RWX)
    LI    R1, patchee
    MOVri R2, 1
    MOVri R3, 7
    SYS
    ; patch the MOVri imm from 7 to 42: word = 0x02 | rd=1<<4 <<8 | 42<<16
    LI    R4, 0x002A1202
    LI    R5, patchee
    ST    [R5], R4
patchee:
    MOVri R1, 7
    MOVri R0, 1
    SYS                  ; exit with R1
.entry start
)");
  REQUIRE(out.status.ok());
  CHECK(out.trace.exit_code == 42);
}

TEST_CASE("determinism: two runs yield identical traces") {
  auto a = run_src(kClean);
  auto b = run_src(kClean);
  CHECK(a.trace == b.trace);
  CHECK(a.trace.bytes() == b.trace.bytes());
}

TEST_CASE("cycle limit surfaces as a status, not a crash") {
  auto out = run_src(R"(
.seg code
start:
    JMP start
.entry start
)",
                     RunLimits{.max_cycles = 10000, .max_pages = 8192});
  CHECK(out.status.kind == RunStatus::Kind::CycleLimit);
}

TEST_CASE("threads: create, yield, join") {
  auto out = run_src(R"(
.seg code
start:
    MOVri R0, 21         ; TCREATE(worker, 5)
    LI    R1, worker
    MOVri R2, 5
    SYS
    MOVrr R4, R0         ; tid
    MOVri R0, 23         ; TJOIN(tid)
    MOVrr R1, R4
    SYS
    MOVrr R1, R0         ; exit code = worker result
    MOVri R0, 1
    SYS
worker:
    MOVrr R3, R0         ; arg
    MUL   R3, R3         ; arg^2
    MOVri R0, 1
    MOVrr R1, R3
    SYS
.entry start
)");
  REQUIRE(out.status.ok());
  CHECK(out.trace.exit_code == 25);
}

TEST_CASE("TGETCTX of a live sibling reports its parked context") {
  auto out = run_src(R"(
.seg code
start:
    MOVri R0, 21
    LI    R1, worker
    MOVri R2, 0
    SYS
    MOVrr R4, R0
    MOVri R0, 22         ; TYIELD so the worker runs and parks
    SYS
    MOVri R0, 24         ; TGETCTX(tid, buf)
    MOVrr R1, R4
    LI    R2, ctxbuf
    SYS
    LI    R3, ctxbuf
    LD    R1, [R3+8]     ; saved pc word
    MOVri R0, 1
    SYS
worker:
    MOVri R0, 22         ; TYIELD forever
    SYS
    JMP   worker
.seg data
.align 64
ctxbuf: .space 60
.entry start
)");
  REQUIRE(out.status.ok());
  // worker parked just past its SYS; pc must be a code segment address
  CHECK(out.trace.exit_code >= kCodeBase);
  CHECK(out.trace.exit_code < kCodeBase + 0x1000);
}

TEST_CASE("scheduler interleaving is deterministic and program-driven") {
  const char* src = R"(
.seg code
start:
    MOVri R0, 21
    LI    R1, wa
    MOVri R2, 0
    SYS
    MOVri R0, 21
    LI    R1, wb
    MOVri R2, 0
    SYS
    MOVri R0, 22
    SYS
    MOVri R0, 22
    SYS
    MOVri R0, 2
    LI    R1, seq
    MOVri R2, 8
    SYS
    MOVri R0, 1
    MOVri R1, 0
    SYS
wa:
    LI    R3, seq
    MOVri R4, 'a'
    STB   [R3], R4
    MOVri R0, 22
    SYS
    MOVri R0, 1
    MOVri R1, 0
    SYS
wb:
    LI    R3, seq
    MOVri R4, 'b'
    STB   [R3+1], R4
    MOVri R0, 1
    MOVri R1, 0
    SYS
.seg data
seq: .asciz "........"
.space 3
.entry start
)";
  auto a = run_src(src);
  auto b = run_src(src);
  REQUIRE(a.status.ok());
  CHECK(a.trace == b.trace);
  CHECK(a.trace.output.substr(0, 2) == "ab");
}

TEST_CASE("cycle accounting matches the instruction log") {
  std::ostringstream log;
  RunHooks hooks;
  hooks.instr_log = &log;
  auto out = run_src(kClean, RunLimits{}, hooks);
  REQUIRE(out.status.ok());
  // last log line carries the final counter
  std::string text = log.str();
  auto pos = text.find_last_of(' ');
  uint64_t last = std::stoull(text.substr(pos + 1));
  CHECK(last == out.trace.cycles);
}

TEST_CASE("syscall log records numbers and counters") {
  std::vector<SysLogEntry> slog;
  RunHooks hooks;
  hooks.sys_log = &slog;
  auto out = run_src(kClean, RunLimits{}, hooks);
  REQUIRE(out.status.ok());
  REQUIRE(slog.size() == 2);
  CHECK(slog[0].no == 2);
  CHECK(slog[1].no == 1);
  CHECK(slog[0].counter < slog[1].counter);
}

TEST_CASE("permission soundness under random programs") {
  // Random instruction soup on an X-only page; a shadow checker asserts
  // no write lands outside W pages and no fetch leaves X pages.
  std::mt19937 rng(99);
  for (int iter = 0; iter < 40; ++iter) {
    Image img;
    Segment code;
    code.vaddr = kCodeBase;
    code.perms = kPermR | kPermX;
    code.bytes.resize(1024);
    for (auto& b : code.bytes) b = rng() & 0xFF;
    code.memlen = 1024;
    Segment data;
    data.vaddr = kDataBase;
    data.perms = kPermR | kPermW;
    data.bytes.resize(64, 0xAB);
    data.memlen = 64;
    img.segments = {code, data};
    img.entry = kCodeBase;
    Machine m(img, RunLimits{});
    for (int steps = 0; steps < 300; ++steps) {
      uint32_t tid = 0;
      if (!m.thread(tid) || m.thread(tid)->status != ThreadStatus::Runnable) {
        break;
      }
      uint32_t pc = m.thread(tid)->pc;
      const Page* pg = m.page_at(pc);
      auto so = m.exec_step(tid, nullptr);
      if (so.kind == StepKind::Fault) {
        // shadow check: a retired fetch must have come from an X page
        m.deliver_exception(tid, so.rec);
        break;
      }
      if (so.kind != StepKind::Retired) break;
      CHECK((pg != nullptr && (pg->perms & kPermX) != 0));
    }
    // data bytes may change, code bytes must not (code page lacks W)
    for (size_t k = 0; k < code.bytes.size(); ++k) {
      const Page* pg = m.page_at(code.vaddr + static_cast<uint32_t>(k));
      REQUIRE(pg != nullptr);
      CHECK((*pg->bytes)[(code.vaddr + k) % kPageSize] == code.bytes[k]);
    }
  }
}
