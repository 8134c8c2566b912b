#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "g32/isa.hpp"
#include "g32/machine.hpp"

namespace g32::plugin {

struct PluginDescriptor {
  std::string name;
  std::string version = "1.0";
  std::vector<std::string> exports;
  std::vector<std::string> depends;
  int priority = 0;  // lower fires first
};

struct StackError : std::runtime_error {
  enum class Kind {
    MissingDependency,
    DuplicateName,
    Cycle,
    InvalidSelector,
    NotLoaded,
    UnknownPlugin,
    SinkUnavailable,
  };
  Kind kind;
  StackError(Kind k, const std::string& msg)
      : std::runtime_error(msg), kind(k) {}
};

// Instruction selector: union of opcode set, class set and an anchored
// regular expression over the mnemonic. Matching is decided once, at
// translation time.
struct InstrSelector {
  std::set<isa::Op> opcodes;
  std::set<isa::OpClass> classes;
  std::optional<std::string> pattern;

  bool matches(const isa::Instruction& i) const;
  void compile();  // throws StackError{InvalidSelector}

  static InstrSelector for_opcode(isa::Op op) {
    InstrSelector s;
    s.opcodes.insert(op);
    return s;
  }
  static InstrSelector for_class(isa::OpClass c) {
    InstrSelector s;
    s.classes.insert(c);
    return s;
  }
  static InstrSelector all();

 private:
  std::shared_ptr<std::regex> compiled_;
};

enum class HookPhase : uint8_t { Before, After };

struct InstrHookCtx {
  Machine& machine;
  uint32_t tid;
  isa::Instruction instr;  // addr = guest address
  HookPhase phase = HookPhase::Before;

  bool skip = false;  // suppress the instruction (before phase)
  std::optional<isa::Instruction> replacement;
};
using InstrHookFn = std::function<void(InstrHookCtx&)>;

struct ApiHookCtx {
  Machine& machine;
  uint32_t tid;
  uint32_t sys_no = 0;
  uint32_t pc = 0;  // guest address of the SYS instruction
  std::array<uint32_t, 4> args{};

  // before phase: first skip wins; its results land in R0..R3
  bool skip = false;
  std::array<uint32_t, 4> results{};

  // after phase
  bool executed = true;
};
using ApiHookFn = std::function<void(ApiHookCtx&)>;

using ExportFn = std::function<uint32_t(const std::vector<uint32_t>&)>;

class PluginHost;

class Plugin {
 public:
  virtual ~Plugin() = default;
  virtual const PluginDescriptor& descriptor() const = 0;
  virtual void init(PluginHost& host) = 0;
};

struct EngineRegions {
  uint32_t arena_base = kArenaBase;
  uint32_t arena_limit = kArenaLimit;
  uint32_t spill_page = kSpillPage;
  uint32_t log_handle_id = 0;
  std::string env_entry = "DBI_SESSION=1";
  std::string pseudo_module = "engine.core";
  uint32_t tls_scratch_slot = kEngineTlsSlot;
  uint32_t maintenance_tid = 0xFFFFFFFF;
  uint32_t launcher_ppid = 999;
  std::string args_prefix = "dbi: ";
};

// What plugins may ask of the engine hosting them.
class EngineServices {
 public:
  virtual ~EngineServices() = default;
  virtual Machine& machine() = 0;
  virtual uint32_t reverse_lookup(uint32_t addr) const = 0;
  virtual uint64_t virtual_cycles() const = 0;
  virtual const EngineRegions& regions() const = 0;
  virtual void request_cache_flush() = 0;
  virtual void set_exception_transform(
      std::function<ExceptionRecord(const ExceptionRecord&)> fn) = 0;
  virtual void enable_engine_page_hiding() = 0;
  virtual void enable_guest_page_quota() = 0;
  // Moves the maintenance context off the guest thread table so TCREATE
  // sees the native limit; idempotent.
  virtual void release_maintenance_slot() = 0;
  virtual uint32_t maintenance_tid() const = 0;
  virtual const std::vector<uint8_t>& original_args() const = 0;
};

struct InstrHookReg {
  uint64_t id = 0;
  std::string plugin;
  int priority = 0;
  uint64_t seq = 0;
  InstrSelector selector;
  HookPhase phase = HookPhase::Before;
  InstrHookFn fn;
};

struct ApiHookReg {
  uint64_t id = 0;
  std::string plugin;
  int priority = 0;
  uint64_t seq = 0;
  uint32_t sys_no = 0;
  HookPhase phase = HookPhase::Before;
  ApiHookFn fn;
};

// Registration hub: plugin lifecycle, the proxied export registry, the
// instruction/API hook tables, and trace-log channels.
class PluginHost {
 public:
  PluginHost(Machine& m, EngineServices* engine);
  ~PluginHost();

  void register_stack(std::vector<std::unique_ptr<Plugin>> plugins);
  bool loaded(const std::string& name) const;
  const std::vector<std::string>& init_order() const { return init_order_; }

  // --- export proxying ("plugin.export" keys) -----------------------
  void register_export(const std::string& plugin, const std::string& name,
                       ExportFn fn);
  uint32_t call_export(const std::string& qualified,
                       const std::vector<uint32_t>& args) const;
  bool has_export(const std::string& qualified) const;

  // --- hooks ---------------------------------------------------------
  uint64_t register_instr_callback(const std::string& plugin,
                                   InstrSelector sel, HookPhase phase,
                                   InstrHookFn fn);
  uint64_t register_api_hook(const std::string& plugin, uint32_t sys_no,
                             HookPhase phase, ApiHookFn fn);

  std::vector<const InstrHookReg*> instr_hooks_for(const isa::Instruction& i,
                                                   HookPhase phase) const;
  bool has_instr_hooks() const { return !instr_hooks_.empty(); }

  // Runs before-hooks in priority order; the first skip wins but later
  // hooks still observe. Hook exceptions are logged and ignored.
  void fire_api_before(ApiHookCtx& ctx);
  void fire_api_after(ApiHookCtx& ctx);
  bool has_api_hooks(uint32_t sys_no) const;

  void fire_instr_hook(const InstrHookReg& reg, InstrHookCtx& ctx);

  // --- trace channels --------------------------------------------------
  void open_trace(const std::string& channel, const std::string& path);
  void open_trace_buffer(const std::string& channel, std::string* sink);
  bool channel_open(const std::string& channel) const;
  void log_event(const std::string& channel, const std::string& record);

  Machine& machine() { return machine_; }
  EngineServices* engine() { return engine_; }

  // Set by the engine: registrations after translation force a flush.
  std::function<void()> on_hooks_changed;

 private:
  struct Channel {
    std::unique_ptr<std::ostream> file;
    std::string* buffer = nullptr;
    uint64_t seq = 0;
  };

  void require(const std::string& plugin) const;
  int priority_of(const std::string& plugin) const;

  Machine& machine_;
  EngineServices* engine_;
  std::vector<std::unique_ptr<Plugin>> plugins_;
  std::map<std::string, PluginDescriptor> descriptors_;
  std::vector<std::string> init_order_;
  std::map<std::string, ExportFn> exports_;
  std::deque<InstrHookReg> instr_hooks_;
  std::deque<ApiHookReg> api_hooks_;
  std::map<std::string, Channel> channels_;
  uint64_t next_id_ = 1;
};

// Resolves plugin initialization order: topological by depends, ties by
// (priority, name). Exposed separately so tests can oracle it.
std::vector<std::string> resolve_init_order(
    const std::vector<PluginDescriptor>& descriptors);

}  // namespace g32::plugin
