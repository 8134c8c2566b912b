#pragma once

#include <array>
#include <set>
#include <string>

#include "g32/cache.hpp"
#include "g32/machine.hpp"
#include "g32/plugin.hpp"
#include "g32/reference.hpp"

namespace g32::dbi {

enum class ApiHookMode : uint8_t { Dbi, Detour };

struct EngineConfig {
  std::vector<std::string> plugins;  // canonical names, e.g. "Shield"
  std::set<std::string> shield_groups;
  bool link_blocks = false;
  ApiHookMode api_hook_mode = ApiHookMode::Dbi;
  bool track_smc = true;
  uint32_t flush_pages = 1024;  // full cache reset past this arena size
  std::string trace_path;       // tracer channel sink file, "" = none
  std::string* trace_buffer = nullptr;
};

struct EngineMetrics {
  uint64_t blocks_translated = 0;
  uint64_t callouts_fired = 0;
  uint64_t dispatches = 0;
  uint64_t cache_hits = 0;
  uint64_t invalidations = 0;
  uint64_t flushes = 0;
  uint64_t detour_patches = 0;
  uint64_t real_cycles = 0;
  uint64_t virtual_cycles = 0;
  uint32_t arena_pages = 0;
};

// Host-model cost constants: what instrumentation itself burns.
inline constexpr uint32_t kDispatchCycles = 5;
inline constexpr uint32_t kTranslateCyclesPerInstr = 16;
inline constexpr uint32_t kDetourCycles = 7;

// Code-cache DBI: translates guest basic blocks into the arena, runs
// guest execution through the cache, keeps the reverse map, invalidates
// on self-modifying writes, and hosts the plugin stack.
class Engine : public CalloutSink, public plugin::EngineServices {
 public:
  Engine(Machine& m, const EngineConfig& cfg);
  ~Engine() override;

  // Installs engine artifacts and the plugin stack. Throws
  // plugin::StackError on unresolvable stacks.
  void prepare();
  RunStatus run(const RunLimits& limits);

  // CalloutSink
  StepOutcome on_callout(uint32_t tid, uint32_t addr) override;

  // EngineServices
  Machine& machine() override { return machine_; }
  uint32_t reverse_lookup(uint32_t addr) const override;
  uint64_t virtual_cycles() const override { return virtual_; }
  const plugin::EngineRegions& regions() const override { return regions_; }
  void request_cache_flush() override;
  void set_exception_transform(
      std::function<ExceptionRecord(const ExceptionRecord&)> fn) override {
    exception_transform_ = std::move(fn);
  }
  void enable_engine_page_hiding() override {
    machine_.hide_engine_data = true;
  }
  void enable_guest_page_quota() override {
    machine_.quota_guest_pages = true;
  }
  void release_maintenance_slot() override;
  uint32_t maintenance_tid() const override;
  const std::vector<uint8_t>& original_args() const override {
    return original_args_;
  }

  EngineMetrics metrics() const;
  plugin::PluginHost& host() { return *host_; }
  CodeCache& cache() { return cache_; }

  Block* translate_block(uint32_t at);  // exposed for unit tests
  uint32_t invalidate_guest_page(uint32_t page_idx);

 private:
  struct ThreadCtl {
    bool in_cache = false;
    bool escaped = false;
    uint32_t redirect_after_step = 0;
    bool api_prefired = false;
    uint32_t prefired_sys = 0;
    bool prefired_skip = false;
    std::array<uint32_t, 4> prefired_results{};
  };

  struct DetourRec {
    isa::Instruction displaced;
    int sys_no = -1;  // displaced MOVri R0,n marks a syscall stub
  };

  void install_artifacts();
  void build_stack();
  RunStatus quantum(uint32_t tid);
  StepOutcome dispatch_to(uint32_t tid, uint32_t target);
  StepOutcome arena_entry(uint32_t tid, uint32_t target);
  void schedule_continuation(uint32_t tid);
  StepOutcome handle_guest_fault(uint32_t tid, const ExceptionRecord& raw);
  void flush_cache();
  void emit_word(uint32_t word);
  void spill_context(uint32_t tid);
  void patch_detour(uint32_t target);
  void abort_run(const std::string& reason);

  StepOutcome exit_direct(uint32_t tid, Block* block, Callout desc);
  StepOutcome exit_conditional(uint32_t tid, Block* block, Callout desc);
  StepOutcome exit_indirect(uint32_t tid, Callout desc);
  StepOutcome exit_syscall(uint32_t tid, Callout desc);
  StepOutcome exit_rdlip(uint32_t tid, Callout desc);
  StepOutcome exit_detour(uint32_t tid, Callout desc);
  bool fire_before_instr_hooks(uint32_t tid, const Callout& desc,
                               StepOutcome* out, uint32_t* consumed_len);
  void fire_after_instr_hooks(uint32_t tid, const Callout& desc);
  std::optional<ExceptionRecord> push_word(uint32_t tid, uint32_t value,
                                           uint32_t guest_pc);

  Machine& machine_;
  EngineConfig cfg_;
  CodeCache cache_;
  std::unique_ptr<plugin::PluginHost> host_;
  plugin::EngineRegions regions_;
  std::vector<uint8_t> original_args_;
  std::function<ExceptionRecord(const ExceptionRecord&)> exception_transform_;
  std::array<ThreadCtl, kMaxThreads> tctl_{};
  std::map<uint32_t, DetourRec> detours_;
  std::pair<uint32_t, uint32_t> lib_range_{0, 0};
  bool maintenance_released_ = false;
  RunStatus abort_;
  bool aborted_ = false;
  uint64_t virtual_ = 0;
  EngineMetrics metrics_;
  RunLimits limits_;
};

struct EngineRunOutput {
  ObservableTrace trace;
  EngineMetrics metrics;
  RunStatus status;
};

EngineRunOutput run_instrumented(const Image& img, const EngineConfig& cfg,
                                 const RunLimits& limits = {},
                                 const RunHooks& hooks = {});

// Builtin plugin factory: InstrControl, APIControl, ExceptionHandler,
// Logger, Tracer and Shield (which consumes cfg.shield_groups).
std::unique_ptr<plugin::Plugin> make_plugin(const std::string& name,
                                            const EngineConfig& cfg);

}  // namespace g32::dbi
