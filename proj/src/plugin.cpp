#include "g32/plugin.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <fstream>

namespace g32::plugin {

bool InstrSelector::matches(const isa::Instruction& i) const {
  if (opcodes.count(i.op)) return true;
  if (classes.count(isa::classify(i))) return true;
  if (compiled_) {
    return std::regex_match(std::string(isa::mnemonic(i.op)), *compiled_);
  }
  return false;
}

void InstrSelector::compile() {
  if (!pattern) return;
  try {
    compiled_ = std::make_shared<std::regex>(*pattern);
  } catch (const std::regex_error& e) {
    throw StackError(StackError::Kind::InvalidSelector,
                     fmt::format("bad selector pattern '{}': {}", *pattern,
                                 e.what()));
  }
}

InstrSelector InstrSelector::all() {
  InstrSelector s;
  s.classes = {isa::OpClass::Alu,       isa::OpClass::Move,
               isa::OpClass::LoadStore, isa::OpClass::Control,
               isa::OpClass::Stack,     isa::OpClass::Syscall,
               isa::OpClass::Callout,   isa::OpClass::Nop};
  return s;
}

std::vector<std::string> resolve_init_order(
    const std::vector<PluginDescriptor>& descriptors) {
  std::map<std::string, const PluginDescriptor*> by_name;
  for (const auto& d : descriptors) {
    if (by_name.count(d.name)) {
      throw StackError(StackError::Kind::DuplicateName,
                       "duplicate plugin " + d.name);
    }
    by_name[d.name] = &d;
  }
  for (const auto& d : descriptors) {
    for (const auto& dep : d.depends) {
      if (!by_name.count(dep)) {
        throw StackError(StackError::Kind::MissingDependency,
                         fmt::format("plugin {} requires {}", d.name, dep));
      }
    }
  }
  std::map<std::string, int> pending;
  for (const auto& d : descriptors) {
    pending[d.name] = static_cast<int>(d.depends.size());
  }
  std::vector<std::string> order;
  while (order.size() < descriptors.size()) {
    // deterministic: among ready plugins take lowest (priority, name)
    const PluginDescriptor* next = nullptr;
    for (const auto& [name, remaining] : pending) {
      if (remaining != 0) continue;
      const PluginDescriptor* d = by_name.at(name);
      if (!next || std::tie(d->priority, d->name) <
                       std::tie(next->priority, next->name)) {
        next = d;
      }
    }
    if (!next) {
      throw StackError(StackError::Kind::Cycle, "plugin dependency cycle");
    }
    order.push_back(next->name);
    pending.erase(next->name);
    for (auto& [name, remaining] : pending) {
      const PluginDescriptor* d = by_name.at(name);
      if (std::find(d->depends.begin(), d->depends.end(), next->name) !=
          d->depends.end()) {
        remaining--;
      }
    }
  }
  return order;
}

PluginHost::PluginHost(Machine& m, EngineServices* engine)
    : machine_(m), engine_(engine) {}

PluginHost::~PluginHost() = default;

void PluginHost::register_stack(std::vector<std::unique_ptr<Plugin>> plugins) {
  std::vector<PluginDescriptor> descs;
  descs.reserve(plugins.size());
  for (const auto& p : plugins) descs.push_back(p->descriptor());
  init_order_ = resolve_init_order(descs);

  for (auto& p : plugins) {
    descriptors_[p->descriptor().name] = p->descriptor();
    plugins_.push_back(std::move(p));
  }
  std::map<std::string, Plugin*> by_name;
  for (auto& p : plugins_) by_name[p->descriptor().name] = p.get();
  for (const auto& name : init_order_) {
    by_name.at(name)->init(*this);
  }
}

bool PluginHost::loaded(const std::string& name) const {
  return descriptors_.count(name) != 0;
}

void PluginHost::require(const std::string& plugin) const {
  if (!loaded(plugin)) {
    throw StackError(StackError::Kind::NotLoaded,
                     plugin + " is not in the stack");
  }
}

int PluginHost::priority_of(const std::string& plugin) const {
  auto it = descriptors_.find(plugin);
  return it == descriptors_.end() ? 0 : it->second.priority;
}

void PluginHost::register_export(const std::string& plugin,
                                 const std::string& name, ExportFn fn) {
  exports_[plugin + "." + name] = std::move(fn);
}

uint32_t PluginHost::call_export(const std::string& qualified,
                                 const std::vector<uint32_t>& args) const {
  auto it = exports_.find(qualified);
  if (it == exports_.end()) {
    throw StackError(StackError::Kind::NotLoaded, "no export " + qualified);
  }
  return it->second(args);
}

bool PluginHost::has_export(const std::string& qualified) const {
  return exports_.count(qualified) != 0;
}

uint64_t PluginHost::register_instr_callback(const std::string& plugin,
                                             InstrSelector sel,
                                             HookPhase phase, InstrHookFn fn) {
  require("InstrControl");
  sel.compile();
  InstrHookReg reg;
  reg.id = next_id_++;
  reg.plugin = plugin;
  reg.priority = priority_of(plugin);
  reg.seq = reg.id;
  reg.selector = std::move(sel);
  reg.phase = phase;
  reg.fn = std::move(fn);
  instr_hooks_.push_back(std::move(reg));
  if (on_hooks_changed) on_hooks_changed();
  return instr_hooks_.back().id;
}

uint64_t PluginHost::register_api_hook(const std::string& plugin,
                                       uint32_t sys_no, HookPhase phase,
                                       ApiHookFn fn) {
  require("APIControl");
  ApiHookReg reg;
  reg.id = next_id_++;
  reg.plugin = plugin;
  reg.priority = priority_of(plugin);
  reg.seq = reg.id;
  reg.sys_no = sys_no;
  reg.phase = phase;
  reg.fn = std::move(fn);
  api_hooks_.push_back(std::move(reg));
  return api_hooks_.back().id;
}

std::vector<const InstrHookReg*> PluginHost::instr_hooks_for(
    const isa::Instruction& i, HookPhase phase) const {
  std::vector<const InstrHookReg*> out;
  for (const auto& reg : instr_hooks_) {
    if (reg.phase == phase && reg.selector.matches(i)) out.push_back(&reg);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const InstrHookReg* a, const InstrHookReg* b) {
                     return std::tie(a->priority, a->seq) <
                            std::tie(b->priority, b->seq);
                   });
  return out;
}

void PluginHost::fire_instr_hook(const InstrHookReg& reg, InstrHookCtx& ctx) {
  try {
    reg.fn(ctx);
  } catch (const std::exception& e) {
    // hook errors never abort a run
    log_event("host",
              fmt::format("instr hook error [{}]: {}", reg.plugin, e.what()));
    ctx.skip = false;
    ctx.replacement.reset();
  }
}

bool PluginHost::has_api_hooks(uint32_t sys_no) const {
  for (const auto& reg : api_hooks_) {
    if (reg.sys_no == sys_no) return true;
  }
  return false;
}

void PluginHost::fire_api_before(ApiHookCtx& ctx) {
  std::vector<const ApiHookReg*> regs;
  for (const auto& reg : api_hooks_) {
    if (reg.sys_no == ctx.sys_no && reg.phase == HookPhase::Before) {
      regs.push_back(&reg);
    }
  }
  std::stable_sort(regs.begin(), regs.end(),
                   [](const ApiHookReg* a, const ApiHookReg* b) {
                     return std::tie(a->priority, a->seq) <
                            std::tie(b->priority, b->seq);
                   });
  bool decided = ctx.skip;
  std::array<uint32_t, 4> winning = ctx.results;
  for (const ApiHookReg* reg : regs) {
    ApiHookCtx local = ctx;
    local.skip = false;
    local.results = ctx.args;
    try {
      reg->fn(local);
    } catch (const std::exception& e) {
      log_event("host",
                fmt::format("api hook error [{}]: {}", reg->plugin, e.what()));
      continue;
    }
    if (local.skip && !decided) {
      decided = true;
      winning = local.results;
    }
  }
  ctx.skip = decided;
  ctx.results = winning;
}

void PluginHost::fire_api_after(ApiHookCtx& ctx) {
  std::vector<const ApiHookReg*> regs;
  for (const auto& reg : api_hooks_) {
    if (reg.sys_no == ctx.sys_no && reg.phase == HookPhase::After) {
      regs.push_back(&reg);
    }
  }
  std::stable_sort(regs.begin(), regs.end(),
                   [](const ApiHookReg* a, const ApiHookReg* b) {
                     return std::tie(a->priority, a->seq) <
                            std::tie(b->priority, b->seq);
                   });
  for (const ApiHookReg* reg : regs) {
    try {
      reg->fn(ctx);
    } catch (const std::exception& e) {
      log_event("host",
                fmt::format("api hook error [{}]: {}", reg->plugin, e.what()));
    }
  }
}

void PluginHost::open_trace(const std::string& channel,
                            const std::string& path) {
  auto file = std::make_unique<std::ofstream>(path, std::ios::trunc);
  if (!file->good()) {
    throw StackError(StackError::Kind::SinkUnavailable,
                     "cannot open sink " + path);
  }
  Channel ch;
  ch.file = std::move(file);
  channels_[channel] = std::move(ch);
}

void PluginHost::open_trace_buffer(const std::string& channel,
                                   std::string* sink) {
  Channel ch;
  ch.buffer = sink;
  channels_[channel] = std::move(ch);
}

bool PluginHost::channel_open(const std::string& channel) const {
  return channels_.count(channel) != 0;
}

void PluginHost::log_event(const std::string& channel,
                           const std::string& record) {
  auto it = channels_.find(channel);
  if (it == channels_.end()) return;  // channel closed: zero bytes written
  Channel& ch = it->second;
  std::string line = fmt::format("{} {}\n", ch.seq++, record);
  if (ch.file) {
    (*ch.file) << line;
    ch.file->flush();
  }
  if (ch.buffer) ch.buffer->append(line);
}

}  // namespace g32::plugin
