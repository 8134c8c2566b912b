#include "g32/reference.hpp"

namespace g32 {

RunOutput run_reference(const Image& img, const RunLimits& limits,
                        const RunHooks& hooks) {
  RunOutput out;
  std::unique_ptr<Machine> m;
  try {
    m = std::make_unique<Machine>(img, limits);
  } catch (const std::exception& e) {
    out.status = {RunStatus::Kind::LoadError, e.what()};
    return out;
  }
  m->instr_log = hooks.instr_log;
  m->sys_log = hooks.sys_log;

  auto quantum = [&](uint32_t tid) -> RunStatus {
    while (true) {
      if (m->cycles > limits.max_cycles) {
        return {RunStatus::Kind::CycleLimit, "cycle limit exceeded"};
      }
      if (m->committed_total() > limits.max_pages) {
        return {RunStatus::Kind::MemoryLimit, "memory limit exceeded"};
      }
      StepOutcome so = m->exec_step(tid, nullptr);
      switch (so.kind) {
        case StepKind::Retired:
          continue;
        case StepKind::Yield:
        case StepKind::Blocked:
        case StepKind::Exited:
          return {};
        case StepKind::Fault:
          m->deliver_exception(tid, so.rec);
          return {};
      }
    }
  };

  out.status = run_scheduler(*m, quantum);
  out.trace = finalize_trace(*m, m->cycles);
  return out;
}

}  // namespace g32
