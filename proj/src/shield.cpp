#include "g32/shield.hpp"

#include <fmt/format.h>

#include "g32/engine.hpp"

namespace g32::shield {

using plugin::ApiHookCtx;
using plugin::EngineServices;
using plugin::HookPhase;
using plugin::InstrHookCtx;
using plugin::InstrSelector;
using plugin::Plugin;
using plugin::PluginDescriptor;
using plugin::PluginHost;

ShieldPolicy ShieldPolicy::from_groups(const std::set<std::string>& groups) {
  ShieldPolicy p;
  for (const auto& g : groups) {
    if (g == "time") {
      p.time = true;
    } else if (g == "memory") {
      p.memory = true;
    } else if (g == "context") {
      p.context = true;
    } else if (g == "environment") {
      p.environment = true;
    } else {
      throw plugin::StackError(plugin::StackError::Kind::InvalidSelector,
                               "unknown shield group " + g);
    }
  }
  return p;
}

namespace {

constexpr uint32_t kInvalid = 0xFFFFFFFF;

class ShieldPlugin : public Plugin {
 public:
  explicit ShieldPlugin(ShieldPolicy policy) : policy_(policy) {}

  const PluginDescriptor& descriptor() const override {
    static PluginDescriptor d{
        "Shield", "1.0", {"policy"}, {"APIControl", "InstrControl"}, 50};
    return d;
  }

  void init(PluginHost& host) override {
    services_ = host.engine();
    host.register_export("Shield", "policy",
                         [this](const std::vector<uint32_t>&) {
                           return (policy_.time ? 1u : 0) |
                                  (policy_.memory ? 2u : 0) |
                                  (policy_.context ? 4u : 0) |
                                  (policy_.environment ? 8u : 0);
                         });
    if (!services_) return;
    if (policy_.time) init_time(host);
    if (policy_.memory) init_memory(host);
    if (policy_.context) init_context(host);
    if (policy_.environment) init_environment(host);
  }

 private:
  ShieldPolicy policy_;
  EngineServices* services_ = nullptr;
  std::array<uint32_t, kMaxThreads> tls_shadow_{};

  bool in_arena(uint32_t addr) const {
    const auto& r = services_->regions();
    return addr >= r.arena_base && addr < r.arena_limit;
  }

  uint32_t rl(uint32_t addr) const { return services_->reverse_lookup(addr); }

  // kernel-style buffer write; mirrors the raw syscalls' error protocol
  bool write_buf(ApiHookCtx& ctx, uint32_t addr, const uint8_t* data,
                 uint32_t len) {
    if (len == 0) return true;
    return !ctx.machine
                .write_mem(ctx.tid, addr, len, data, Access::Kernel)
                .has_value();
  }

  uint32_t virtual_handle_id(uint32_t physical) const {
    uint32_t engine_below = 0;
    for (const auto& h : services_->machine().handles()) {
      if (h.engine_owned && h.id < physical) engine_below++;
    }
    return physical - engine_below;
  }

  // --- time ----------------------------------------------------------

  void init_time(PluginHost& host) {
    host.register_api_hook("Shield", 3, HookPhase::Before,
                           [this](ApiHookCtx& ctx) {
                             ctx.skip = true;
                             ctx.results = ctx.args;
                             ctx.results[0] = static_cast<uint32_t>(
                                 services_->virtual_cycles());
                           });
  }

  // --- memory ----------------------------------------------------------

  void init_memory(PluginHost& host) {
    services_->enable_engine_page_hiding();
    services_->enable_guest_page_quota();

    host.register_api_hook("Shield", 7, HookPhase::Before,  // QUERY
                           [this](ApiHookCtx& ctx) {
                             RegionInfo info = ctx.machine.query_region(
                                 ctx.args[1], PageView::GuestVirtual);
                             ctx.skip = true;
                             ctx.results = {info.mapped ? 1u : 0u, info.perms,
                                            info.base, info.size};
                           });
    host.register_api_hook("Shield", 20, HookPhase::Before,  // MEMSTATS
                           [this](ApiHookCtx& ctx) {
                             ctx.skip = true;
                             ctx.results = {ctx.machine.committed_guest(),
                                            ctx.machine.peak_guest(),
                                            ctx.args[2], ctx.args[3]};
                           });
    auto deny_arena = [this](uint32_t npages_arg) {
      return [this, npages_arg](ApiHookCtx& ctx) {
        uint32_t lo = ctx.args[1];
        uint32_t npages = npages_arg ? ctx.args[npages_arg] : 1;
        if (npages == 0 || npages > 0x100000) npages = 1;
        uint64_t hi =
            static_cast<uint64_t>(page_base(lo)) + npages * uint64_t{kPageSize};
        const auto& r = services_->regions();
        if (lo < r.arena_limit && hi > r.arena_base) {
          ctx.skip = true;  // identical to touching unmapped memory
          ctx.results = {1, ctx.args[1], ctx.args[2], ctx.args[3]};
        }
      };
    };
    host.register_api_hook("Shield", 5, HookPhase::Before, deny_arena(0));
    host.register_api_hook("Shield", 6, HookPhase::Before, deny_arena(2));
    host.register_api_hook("Shield", 8, HookPhase::Before, deny_arena(0));
  }

  // --- context ----------------------------------------------------------

  void init_context(PluginHost& host) {
    services_->set_exception_transform(
        [this](const ExceptionRecord& raw) {
          ExceptionRecord rec = raw;
          rec.pc = rl(rec.pc);
          rec.lastip = rl(rec.lastip);
          return rec;
        });
    host.register_instr_callback(
        "Shield", InstrSelector::for_opcode(isa::Op::Rdlip),
        HookPhase::Before, [this](InstrHookCtx& ctx) {
          ThreadState* t = ctx.machine.thread(ctx.tid);
          t->regs[ctx.instr.rd] = rl(t->lastip);
          ctx.skip = true;
        });
    host.register_api_hook(
        "Shield", 24, HookPhase::Before, [this](ApiHookCtx& ctx) {  // TGETCTX
          ctx.skip = true;
          ctx.results = ctx.args;
          uint32_t target = ctx.args[1];
          const ThreadState* t = ctx.machine.thread(target);
          if (!t || t->engine_owned) {
            ctx.results[0] = 1;  // as if the tid never existed
            return;
          }
          auto words = ctx.machine.context_image(target);
          words[2] = rl(words[2]);    // pc
          words[12] = rl(words[12]);  // lastip
          uint8_t buf[60];
          for (int i = 0; i < 15; ++i) {
            buf[i * 4] = words[i] & 0xFF;
            buf[i * 4 + 1] = (words[i] >> 8) & 0xFF;
            buf[i * 4 + 2] = (words[i] >> 16) & 0xFF;
            buf[i * 4 + 3] = (words[i] >> 24) & 0xFF;
          }
          ctx.results[0] = write_buf(ctx, ctx.args[2], buf, 60) ? 0 : 1;
        });
  }

  // --- environment ----------------------------------------------------------

  void init_environment(PluginHost& host) {
    host.register_api_hook(
        "Shield", 12, HookPhase::Before, [this](ApiHookCtx& ctx) {  // GETARGS
          const auto& args = services_->original_args();
          ctx.skip = true;
          ctx.results = ctx.args;
          uint32_t len = static_cast<uint32_t>(args.size());
          uint32_t n = std::min(len, ctx.args[2]);
          if (n && !write_buf(ctx, ctx.args[1], args.data(), n)) {
            ctx.results[0] = kInvalid;
            return;
          }
          ctx.results[0] = len;
        });
    host.register_api_hook(
        "Shield", 13, HookPhase::Before, [this](ApiHookCtx& ctx) {  // ENUMENV
          ctx.skip = true;
          ctx.results = ctx.args;
          uint32_t idx = ctx.args[1];
          uint32_t seen = 0;
          for (const auto& e : ctx.machine.env()) {
            if (e.engine_owned) continue;
            if (seen++ == idx) {
              uint32_t n = std::min<uint32_t>(
                  static_cast<uint32_t>(e.text.size()), ctx.args[3]);
              if (n && !write_buf(ctx, ctx.args[2],
                                  reinterpret_cast<const uint8_t*>(
                                      e.text.data()),
                                  n)) {
                ctx.results[0] = kInvalid;
                return;
              }
              ctx.results[0] = static_cast<uint32_t>(e.text.size());
              return;
            }
          }
          ctx.results[0] = kInvalid;
        });
    host.register_api_hook("Shield", 14, HookPhase::Before,  // GETPPID
                           [](ApiHookCtx& ctx) {
                             ctx.skip = true;
                             ctx.results = ctx.args;
                             ctx.results[0] = 1;
                           });
    host.register_api_hook(
        "Shield", 15, HookPhase::Before, [this](ApiHookCtx& ctx) {  // OPEN
          ctx.skip = true;
          ctx.results = ctx.args;
          if (ctx.args[1] < 1 || ctx.args[1] > 4) {
            ctx.results[0] = kInvalid;
            return;
          }
          uint32_t phys = ctx.machine.open_handle(ctx.args[1], false);
          ctx.results[0] = virtual_handle_id(phys);
        });
    host.register_api_hook(
        "Shield", 16, HookPhase::Before, [this](ApiHookCtx& ctx) {  // CLOSE
          ctx.skip = true;
          ctx.results = ctx.args;
          auto& handles = ctx.machine.handles();
          for (auto it = handles.begin(); it != handles.end(); ++it) {
            if (!it->engine_owned && virtual_handle_id(it->id) == ctx.args[1]) {
              handles.erase(it);
              ctx.results[0] = 0;
              return;
            }
          }
          ctx.results[0] = 1;
        });
    host.register_api_hook(
        "Shield", 17, HookPhase::Before,
        [this](ApiHookCtx& ctx) {  // ENUMHANDLES
          ctx.skip = true;
          ctx.results = ctx.args;
          uint32_t idx = ctx.args[1];
          uint32_t seen = 0;
          for (const auto& h : ctx.machine.handles()) {
            if (h.engine_owned) continue;
            if (seen++ == idx) {
              ctx.results[0] = virtual_handle_id(h.id);
              ctx.results[1] = h.kind;
              return;
            }
          }
          ctx.results[0] = kInvalid;
        });
    host.register_api_hook(
        "Shield", 18, HookPhase::Before, [this](ApiHookCtx& ctx) {  // TLSGET
          if (ctx.args[1] != kEngineTlsSlot) return;
          ctx.skip = true;
          ctx.results = ctx.args;
          ctx.results[0] = tls_shadow_[ctx.tid % kMaxThreads];
        });
    host.register_api_hook(
        "Shield", 19, HookPhase::Before, [this](ApiHookCtx& ctx) {  // TLSSET
          if (ctx.args[1] != kEngineTlsSlot) return;
          ctx.skip = true;
          ctx.results = ctx.args;
          tls_shadow_[ctx.tid % kMaxThreads] = ctx.args[2];
          ctx.results[0] = 0;
        });
    host.register_api_hook("Shield", 21, HookPhase::Before,  // TCREATE
                           [this](ApiHookCtx&) {
                             services_->release_maintenance_slot();
                           });
    host.register_api_hook(
        "Shield", 23, HookPhase::Before, [this](ApiHookCtx& ctx) {  // TJOIN
          if (ctx.args[1] == services_->maintenance_tid()) {
            ctx.skip = true;
            ctx.results = ctx.args;
            ctx.results[0] = kInvalid;
          }
        });
    host.register_api_hook(
        "Shield", 25, HookPhase::Before, [this](ApiHookCtx& ctx) {  // ENUMMODS
          ctx.skip = true;
          ctx.results = ctx.args;
          uint32_t idx = ctx.args[1];
          uint32_t seen = 0;
          for (const auto& m : ctx.machine.modules()) {
            if (m.engine_owned) continue;
            if (seen++ == idx) {
              uint32_t n = std::min<uint32_t>(
                  static_cast<uint32_t>(m.name.size()), ctx.args[3]);
              if (n && !write_buf(ctx, ctx.args[2],
                                  reinterpret_cast<const uint8_t*>(
                                      m.name.data()),
                                  n)) {
                ctx.results[0] = kInvalid;
                return;
              }
              ctx.results[0] = static_cast<uint32_t>(m.name.size());
              return;
            }
          }
          ctx.results[0] = kInvalid;
        });
  }
};

}  // namespace

std::unique_ptr<plugin::Plugin> make_shield(
    const std::set<std::string>& groups) {
  return std::make_unique<ShieldPlugin>(ShieldPolicy::from_groups(groups));
}

}  // namespace g32::shield
