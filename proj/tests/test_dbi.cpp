#include "doctest.h"

#include <sstream>

#include "g32/assembler.hpp"
#include "g32/engine.hpp"
#include "g32/reference.hpp"

using namespace g32;
using namespace g32::dbi;

namespace {

const char* kFib = R"(
.seg code
start:
    MOVri R1, 0
    MOVri R2, 1
    MOVri R3, 20
loop:
    CMPI  R3, 0
    JZ    print
    MOVrr R4, R2
    ADD   R2, R1
    MOVrr R1, R4
    ADDI  R3, -1
    JMP   loop
print:
    LI    R5, bufend
    MOVri R6, 10
itoa:
    ADDI  R5, -1
    MOVrr R4, R1
    DIV   R4, R6
    MOVrr R2, R4
    MUL   R2, R6
    MOVrr R0, R1
    SUB   R0, R2
    ADDI  R0, 48
    STB   [R5], R0
    MOVrr R1, R4
    CMPI  R1, 0
    JNZ   itoa
    LI    R2, bufend
    ADDI  R2, 1
    SUB   R2, R5
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
)";

EngineConfig bare_config() { return EngineConfig{}; }

EngineConfig full_config() {
  EngineConfig cfg;
  cfg.plugins = {"InstrControl", "APIControl", "ExceptionHandler",
                 "Shield",       "Logger",     "Tracer"};
  cfg.shield_groups = {"time", "memory", "context", "environment"};
  return cfg;
}

}  // namespace

TEST_CASE("straight-line block: copies, exit stub, reverse map") {
  Image img = assemble(R"(
.seg code
start:
    MOVri R1, 1
    ADD   R1, R1
    MOVrr R2, R1
    JMP   start
.entry start
)");
  Machine m(img, RunLimits{});
  Engine e(m, bare_config());
  e.prepare();
  Block* b = e.translate_block(kCodeBase);
  REQUIRE(b != nullptr);
  CHECK(b->instr_count == 4);  // 3 copies + terminal
  CHECK(b->cache_entry >= kBlockArenaBase);
  CHECK(b->cache_entry < kArenaLimit);
  CHECK(b->addr_map.size() == 4);
  CHECK(b->term.kind == TermKind::Direct);
  CHECK(b->term.target == kCodeBase);
  // reverse map: each emitted word resolves to its source instruction
  CHECK(e.reverse_lookup(b->cache_entry) == kCodeBase);
  CHECK(e.reverse_lookup(b->cache_entry + 4) == kCodeBase + 4);
  CHECK(e.reverse_lookup(b->cache_entry + 12) == kCodeBase + 12);
  // identity off-cache
  CHECK(e.reverse_lookup(0x00401008) == 0x00401008);
}

TEST_CASE("translation is idempotent per guest entry") {
  Image img = assemble(R"(
.seg code
start:
    NOP
    JMP start
.entry start
)");
  Machine m(img, RunLimits{});
  Engine e(m, bare_config());
  e.prepare();
  Block* a = e.translate_block(kCodeBase);
  Block* again = e.cache().lookup(kCodeBase);
  CHECK(a == again);
}

TEST_CASE("block containing SYS gets a syscall terminal") {
  Image img = assemble(R"(
.seg code
start:
    MOVri R0, 1
    MOVri R1, 0
    SYS
.entry start
)");
  Machine m(img, RunLimits{});
  Engine e(m, bare_config());
  e.prepare();
  Block* b = e.translate_block(kCodeBase);
  REQUIRE(b != nullptr);
  CHECK(b->term.kind == TermKind::Syscall);
  CHECK(b->term.instr.op == isa::Op::Sys);
}

TEST_CASE("benign fib runs identically under the bare engine") {
  Image img = assemble(kFib);
  auto ref = run_reference(img);
  auto ins = run_instrumented(img, bare_config());
  REQUIRE(ref.status.ok());
  REQUIRE(ins.status.ok());
  CHECK(ins.trace.output == "6765\n");
  CHECK(ins.trace == ref.trace);
  CHECK(ins.metrics.blocks_translated > 0);
  CHECK(ins.metrics.real_cycles > ref.trace.cycles);
  CHECK(ins.metrics.virtual_cycles == ref.trace.cycles);
}

TEST_CASE("benign fib runs identically under the full stack") {
  Image img = assemble(kFib);
  auto ref = run_reference(img);
  auto ins = run_instrumented(img, full_config());
  REQUIRE(ins.status.ok());
  CHECK(ins.trace == ref.trace);
}

TEST_CASE("dispatch misses then hits are visible in metrics") {
  Image img = assemble(R"(
.seg code
start:
    MOVri R3, 6
loop:
    ADDI  R3, -1
    CMPI  R3, 0
    JNZ   loop
    MOVri R0, 1
    MOVri R1, 0
    SYS
.entry start
)");
  auto ins = run_instrumented(img, bare_config());
  REQUIRE(ins.status.ok());
  CHECK(ins.metrics.cache_hits >= 2);  // loop re-entered twice from cache
  CHECK(ins.metrics.dispatches > ins.metrics.blocks_translated);
}

TEST_CASE("block linking removes dispatcher entries on the third traversal") {
  const char* src = R"(
.seg code
start:
    MOVri R3, 6
loop:
    ADDI  R3, -1
    JMP   check       ; direct branch, linkable
check:
    CMPI  R3, 0
    JNZ   loop
    MOVri R0, 1
    MOVri R1, 0
    SYS
.entry start
)";
  Image img = assemble(src);
  EngineConfig unlinked = bare_config();
  EngineConfig linked = bare_config();
  linked.link_blocks = true;
  auto a = run_instrumented(img, unlinked);
  auto b = run_instrumented(img, linked);
  REQUIRE(a.status.ok());
  REQUIRE(b.status.ok());
  CHECK(a.trace == b.trace);
  CHECK(b.metrics.dispatches < a.metrics.dispatches);
  CHECK(b.metrics.real_cycles < a.metrics.real_cycles);
}

TEST_CASE("indirect branch to unmapped memory faults with guest addresses") {
  Image img = assemble(R"(
.seg code
start:
    LI   R1, 0x00001000
    JMPR R1
.entry start
)");
  auto ref = run_reference(img);
  auto ins = run_instrumented(img, bare_config());
  REQUIRE(ins.status.ok());
  // unhandled ExecUnmapped exits 128+4 in both executors
  CHECK(ref.trace.exit_code == 132);
  CHECK(ins.trace.exit_code == 132);
}

TEST_CASE("store to a code page invalidates exactly that page's blocks") {
  Image img = assemble(R"(
.seg code
start:
    MOVri R0, 6          ; PROTECT(code,1,RWX) so stores are legal
    LI    R1, start
    MOVri R2, 1
    MOVri R3, 7
    SYS
    LI    R5, patchee
    LI    R4, 0x002A1202 ; MOVri R1, 42
    ST    [R5], R4
patchee:
    MOVri R1, 7
    MOVrr R6, R1
    MOVri R0, 1
    SYS                  ; exit R1
.entry start
)");
  auto ref = run_reference(img);
  auto ins = run_instrumented(img, bare_config());
  REQUIRE(ref.status.ok());
  REQUIRE(ins.status.ok());
  CHECK(ref.trace.exit_code == 42);
  CHECK(ins.trace.exit_code == 42);
  CHECK(ins.metrics.invalidations > 0);
  CHECK(ins.trace == ref.trace);
}

TEST_CASE("store to a pure data page causes no invalidation") {
  Image img = assemble(R"(
.seg code
start:
    LI    R5, slot
    MOVri R4, 9
    ST    [R5], R4
    MOVri R0, 1
    MOVri R1, 0
    SYS
.seg data
slot: .word 0
.entry start
)");
  auto ins = run_instrumented(img, bare_config());
  REQUIRE(ins.status.ok());
  CHECK(ins.metrics.invalidations == 0);
}

TEST_CASE("smc without tracking executes stale code") {
  const char* src = R"(
.seg code
start:
    MOVri R0, 6
    LI    R1, patchee
    MOVri R2, 1
    MOVri R3, 7
    SYS
    LI    R5, patchee
    LI    R4, 0x002A1202 ; MOVri R1, 42
    ST    [R5], R4
patchee:
    MOVri R1, 7
    MOVri R0, 1
    SYS
.entry start
)";
  Image img = assemble(src);
  EngineConfig nosmc = bare_config();
  nosmc.track_smc = false;
  auto insN = run_instrumented(img, nosmc);
  REQUIRE(insN.status.ok());
  // the patch target sits in the same block as the store, so the copy
  // predates the write and goes stale without tracking
  CHECK(insN.trace.exit_code == 7);
  auto insT = run_instrumented(img, bare_config());
  REQUIRE(insT.status.ok());
  CHECK(insT.trace.exit_code == 42);
  CHECK(insT.metrics.invalidations > 0);

  const char* src2 = R"(
.seg code
start:
    MOVri R0, 6
    LI    R1, run_it
    MOVri R2, 1
    MOVri R3, 7
    SYS
    LI    R6, run_it
    CALLR R6             ; translate run_it with the original immediate
    LI    R5, run_it
    LI    R4, 0x002A1202 ; MOVri R1, 42
    ST    [R5], R4
    CALLR R6             ; stale under nosmc
    MOVri R0, 1
    SYS
run_it:
    MOVri R1, 7
    RET
.entry start
)";
  Image img2 = assemble(src2);
  auto ref2 = run_reference(img2);
  CHECK(ref2.trace.exit_code == 42);
  auto tracked = run_instrumented(img2, bare_config());
  CHECK(tracked.trace.exit_code == 42);
  auto stale = run_instrumented(img2, nosmc);
  REQUIRE(stale.status.ok());
  CHECK(stale.trace.exit_code == 7);  // incorrect SMC handling, visible
}

TEST_CASE("write-protected code pages read back with original perms only under shield") {
  const char* src = R"(
.seg code
start:
    MOVri R0, 6          ; PROTECT(page of run_it, 1, RWX)
    LI    R1, run_it
    MOVri R2, 1
    MOVri R3, 7
    SYS
    LI    R6, run_it
    CALLR R6             ; force translation (engine strips W)
    MOVri R0, 7          ; QUERY(run_it)
    LI    R1, run_it
    SYS
    MOVrr R1, R1         ; perms already in R1
    MOVri R0, 1
    SYS                  ; exit code = perms
.align 4096
run_it:
    RET
.entry start
)";
  Image img = assemble(src);
  auto ref = run_reference(img);
  CHECK(ref.trace.exit_code == 7);
  auto bare = run_instrumented(img, bare_config());
  CHECK(bare.trace.exit_code == 5);  // R|X: W stripped, the mismatch leaks
  auto shielded = run_instrumented(img, full_config());
  CHECK(shielded.trace.exit_code == 7);
}

TEST_CASE("escape into the arena traps at the first callout") {
  // RDLIP leaks a cache address under the bare engine; jumping there
  // executes copies until a callout with no dispatch state.
  const char* src = R"(
.seg code
start:
    MOVri R0, 9
    LI    R1, handler
    SYS
    MOVri R6, 1
    ADD   R6, R6         ; lastip anchor (R6 = 2)
    RDLIP R1
    LI    R2, anchor_add
    CMP   R1, R2
    JZ    no_leak
    JMPR  R1             ; leaked cache address: escape attempt
no_leak:
    MOVri R0, 1
    MOVri R1, 0
    SYS
handler:
    MOVri R0, 1
    MOVri R1, 77
    SYS
.entry start
)";
  // place the anchor: rename the ADD via label trick
  std::string text = src;
  // the source above references anchor_add; patch it to the ADD line
  size_t pos = text.find("    ADD   R6, R6");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 16, "anchor_add: ADD R6, R6");
  Image img = assemble(text);

  auto ref = run_reference(img);
  REQUIRE(ref.status.ok());
  CHECK(ref.trace.exit_code == 0);  // natively no leak

  auto bare = run_instrumented(img, bare_config());
  REQUIRE(bare.status.ok());
  // leak -> escape -> ILLEGAL_OPCODE delivered to the handler -> exit 77
  CHECK(bare.trace.exit_code == 77);

  auto shielded = run_instrumented(img, full_config());
  REQUIRE(shielded.status.ok());
  CHECK(shielded.trace.exit_code == 0);  // context group repairs the leak
}

TEST_CASE("undefined opcode aborts without ExceptionHandler, faults with it") {
  Image img = assemble(R"(
.seg code
start:
    MOVri R0, 9
    LI    R1, handler
    SYS
    JMP   bad
bad:
    .word 0
handler:
    LD    R2, [R1]       ; code field
    MOVrr R1, R2
    MOVri R0, 1
    SYS
.entry start
)");
  auto ref = run_reference(img);
  REQUIRE(ref.status.ok());
  CHECK(ref.trace.exit_code == 6);  // ILLEGAL_OPCODE

  auto bare = run_instrumented(img, bare_config());
  CHECK(bare.status.kind == RunStatus::Kind::EngineAbort);

  EngineConfig eh = bare_config();
  eh.plugins = {"ExceptionHandler"};
  auto handled = run_instrumented(img, eh);
  REQUIRE(handled.status.ok());
  CHECK(handled.trace.exit_code == 6);
  CHECK(handled.trace == ref.trace);
}

TEST_CASE("arena flush reclaims pages and keeps executing") {
  // hammer unique single-use blocks until the (tiny) flush limit trips
  Image img = assemble(R"(
.seg code
start:
    MOVri R3, 3
outer:
    LI    R5, chain
    CALLR R5
    ADDI  R3, -1
    CMPI  R3, 0
    JNZ   outer
    MOVri R0, 1
    MOVri R1, 0
    SYS
chain:
.rept 600
    ADDI  R6, 1
    JMP   .+4
.endr
    RET
.entry start
)");
  EngineConfig cfg = bare_config();
  cfg.flush_pages = 1;
  auto ins = run_instrumented(img, cfg);
  REQUIRE(ins.status.ok());
  CHECK(ins.metrics.flushes > 0);
  auto ref = run_reference(img);
  CHECK(ins.trace == ref.trace);
}

TEST_CASE("run limits surface as ERROR-grade statuses") {
  Image img = assemble(R"(
.seg code
start:
    JMP start
.entry start
)");
  auto ins = run_instrumented(img, bare_config(),
                              RunLimits{.max_cycles = 20000, .max_pages = 8192});
  CHECK(ins.status.kind == RunStatus::Kind::CycleLimit);
}

TEST_CASE("instruction log shows physical execution in the cache") {
  Image img = assemble(R"(
.seg code
start:
    MOVri R1, 5
    ADDI  R1, 2
    MOVri R0, 1
    MOVri R1, 0
    SYS
.entry start
)");
  std::ostringstream log;
  RunHooks hooks;
  hooks.instr_log = &log;
  auto ins = run_instrumented(img, bare_config(), RunLimits{}, hooks);
  REQUIRE(ins.status.ok());
  // some line's pc sits inside the arena
  CHECK(log.str().find(" c000") != std::string::npos);
}
