#include <fmt/format.h>

#include "g32/engine.hpp"
#include "g32/shield.hpp"

namespace g32::dbi {

using plugin::ApiHookCtx;
using plugin::HookPhase;
using plugin::InstrHookCtx;
using plugin::InstrSelector;
using plugin::Plugin;
using plugin::PluginDescriptor;
using plugin::PluginHost;

namespace {

// InstrControl and APIControl own the hook registries inside the host;
// the plugin objects gate access and anchor Shield's dependencies.
class InstrControlPlugin : public Plugin {
 public:
  const PluginDescriptor& descriptor() const override {
    static PluginDescriptor d{"InstrControl", "1.0", {"register"}, {}, 0};
    return d;
  }
  void init(PluginHost&) override {}
};

class ApiControlPlugin : public Plugin {
 public:
  const PluginDescriptor& descriptor() const override {
    static PluginDescriptor d{"APIControl", "1.0", {"register"}, {}, 0};
    return d;
  }
  void init(PluginHost&) override {}
};

class ExceptionHandlerPlugin : public Plugin {
 public:
  const PluginDescriptor& descriptor() const override {
    static PluginDescriptor d{
        "ExceptionHandler", "1.0", {"translate"}, {}, 10};
    return d;
  }
  void init(PluginHost& host) override {
    // proxied context translation: cache address in, guest address out
    host.register_export("ExceptionHandler", "translate",
                         [&host](const std::vector<uint32_t>& args) {
                           if (args.empty()) return 0u;
                           auto* eng = host.engine();
                           return eng ? eng->reverse_lookup(args[0]) : args[0];
                         });
  }
};

class LoggerPlugin : public Plugin {
 public:
  const PluginDescriptor& descriptor() const override {
    static PluginDescriptor d{"Logger", "1.0", {"log"}, {}, 10};
    return d;
  }
  void init(PluginHost& host) override {
    host.register_export("Logger", "log",
                         [](const std::vector<uint32_t>&) { return 0u; });
  }
};

// Observe-only tracer: one line per retired guest instruction plus one
// per syscall, through the Logger channel "trace".
class TracerPlugin : public Plugin {
 public:
  const PluginDescriptor& descriptor() const override {
    static PluginDescriptor d{"Tracer",
                              "1.0",
                              {},
                              {"InstrControl", "APIControl", "Logger"},
                              90};
    return d;
  }
  void init(PluginHost& host) override {
    host.register_instr_callback(
        "Tracer", InstrSelector::all(), HookPhase::Before,
        [&host](InstrHookCtx& ctx) {
          host.log_event("trace",
                         fmt::format("{} {:08x} {}", ctx.tid, ctx.instr.addr,
                                     isa::format_instruction(ctx.instr)));
        });
    for (uint32_t no = 1; no <= 25; ++no) {
      host.register_api_hook(
          "Tracer", no, HookPhase::Before, [&host, no](ApiHookCtx& ctx) {
            host.log_event("trace", fmt::format("{} {:08x} SYS({})", ctx.tid,
                                                ctx.pc, no));
          });
    }
  }
};

}  // namespace

std::unique_ptr<Plugin> make_plugin(const std::string& name,
                                    const EngineConfig& cfg) {
  if (name == "InstrControl") return std::make_unique<InstrControlPlugin>();
  if (name == "APIControl") return std::make_unique<ApiControlPlugin>();
  if (name == "ExceptionHandler") {
    return std::make_unique<ExceptionHandlerPlugin>();
  }
  if (name == "Logger") return std::make_unique<LoggerPlugin>();
  if (name == "Tracer") return std::make_unique<TracerPlugin>();
  if (name == "Shield") return shield::make_shield(cfg.shield_groups);
  throw plugin::StackError(plugin::StackError::Kind::UnknownPlugin,
                           "unknown plugin " + name);
}

}  // namespace g32::dbi
