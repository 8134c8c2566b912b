#pragma once

#include <memory>
#include <set>
#include <string>

#include "g32/plugin.hpp"

namespace g32::shield {

// Policy groups, independently toggleable. All-off equals the bare
// engine exactly.
struct ShieldPolicy {
  bool time = false;
  bool memory = false;
  bool context = false;
  bool environment = false;

  static ShieldPolicy from_groups(const std::set<std::string>& groups);
  bool any() const { return time || memory || context || environment; }
};

// The transparency plugin: virtualizes clocks, memory queries, execution
// contexts and environment artifacts so every engine fingerprint reported
// through the syscall surface matches native execution.
std::unique_ptr<plugin::Plugin> make_shield(
    const std::set<std::string>& groups);

}  // namespace g32::shield
