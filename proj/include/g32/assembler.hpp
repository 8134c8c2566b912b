#pragma once

#include <stdexcept>
#include <string>

#include "g32/image.hpp"

namespace g32 {

struct AsmError : std::runtime_error {
  enum class Kind {
    Syntax,
    UndefinedLabel,
    DuplicateLabel,
    BranchOutOfRange,
    FieldRange,
    Alignment,
    MissingEntry,
    Layout,
  };
  Kind kind;
  int line;
  AsmError(Kind k, int line_no, const std::string& msg)
      : std::runtime_error(msg), kind(k), line(line_no) {}
};

// Two-pass assembler for the G32 dialect.
//
// Directives: .seg code|data|lib [@addr], .entry <label>, .word, .byte,
// .ascii, .asciz, .align, .space, .args "<s>", .env NAME=VALUE and a
// non-nesting .rept <n> / .endr repetition block.
//
// LI rd, <expr32> is a pseudo-instruction expanding to MOVri + MOVHI.
// Branch operands are target addresses; `.` is the current instruction
// address. lo(x)/hi(x) take the 16-bit halves of an expression.
Image assemble(const std::string& source, const std::string& name = "app");

Image assemble_file(const std::string& path);

}  // namespace g32
