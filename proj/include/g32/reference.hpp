#pragma once

#include "g32/machine.hpp"

namespace g32 {

struct RunHooks {
  std::ostream* instr_log = nullptr;
  std::vector<SysLogEntry>* sys_log = nullptr;
};

struct RunOutput {
  ObservableTrace trace;
  RunStatus status;
};

// Native execution: the observational oracle every instrumented run is
// compared against.
RunOutput run_reference(const Image& img, const RunLimits& limits = {},
                        const RunHooks& hooks = {});

}  // namespace g32
