#include "g32/assembler.hpp"

#include <fmt/format.h>

#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <vector>

#include "g32/isa.hpp"

namespace g32 {

using isa::Instruction;
using isa::Op;

namespace {

struct Line {
  int no = 0;
  std::string label;
  std::string op;  // mnemonic or directive (lower-cased for directives)
  std::vector<std::string> operands;
  std::string raw_tail;  // everything after the op, unsplit (.env, .args)
};

[[noreturn]] void fail(AsmError::Kind k, int line, const std::string& msg) {
  throw AsmError(k, line, fmt::format("line {}: {}", line, msg));
}

std::string strip(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Splits operands at commas that are outside quotes/brackets.
std::vector<std::string> split_operands(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  int depth = 0;
  bool quoted = false;
  for (size_t i = 0; i < s.size(); ++i) {
    char c = s[i];
    if (quoted) {
      cur += c;
      if (c == '\\' && i + 1 < s.size()) {
        cur += s[++i];
      } else if (c == '"') {
        quoted = false;
      }
      continue;
    }
    switch (c) {
      case '"': quoted = true; cur += c; break;
      case '[': case '(': depth++; cur += c; break;
      case ']': case ')': depth--; cur += c; break;
      case ',':
        if (depth == 0) {
          out.push_back(strip(cur));
          cur.clear();
        } else {
          cur += c;
        }
        break;
      default: cur += c; break;
    }
  }
  if (!strip(cur).empty()) out.push_back(strip(cur));
  return out;
}

std::vector<Line> parse_lines(const std::string& source) {
  std::vector<Line> lines;
  std::istringstream in(source);
  std::string raw;
  int no = 0;
  while (std::getline(in, raw)) {
    ++no;
    // ';' starts a comment unless inside a string literal
    std::string text;
    bool quoted = false;
    for (size_t i = 0; i < raw.size(); ++i) {
      char c = raw[i];
      if (quoted && c == '\\' && i + 1 < raw.size()) {
        text += c;
        text += raw[++i];
        continue;
      }
      if (c == '"') quoted = !quoted;
      if (c == ';' && !quoted) break;
      text += c;
    }
    text = strip(text);
    if (text.empty()) continue;

    Line line;
    line.no = no;
    // label?
    size_t colon = text.find(':');
    if (colon != std::string::npos) {
      std::string head = text.substr(0, colon);
      bool is_label = !head.empty() &&
                      head.find_first_of(" \t\"[(") == std::string::npos;
      if (is_label) {
        line.label = head;
        text = strip(text.substr(colon + 1));
      }
    }
    if (!text.empty()) {
      size_t sp = text.find_first_of(" \t");
      line.op = sp == std::string::npos ? text : text.substr(0, sp);
      std::string tail =
          sp == std::string::npos ? "" : strip(text.substr(sp + 1));
      line.raw_tail = tail;
      line.operands = split_operands(tail);
    }
    lines.push_back(std::move(line));
  }
  return lines;
}

std::string lower(std::string s) {
  for (auto& c : s) c = std::tolower(static_cast<unsigned char>(c));
  return s;
}
std::string upper(std::string s) {
  for (auto& c : s) c = std::toupper(static_cast<unsigned char>(c));
  return s;
}

std::vector<Line> expand_rept(const std::vector<Line>& in) {
  std::vector<Line> out;
  size_t i = 0;
  while (i < in.size()) {
    std::string op = lower(in[i].op);
    if (op == ".rept") {
      if (in[i].operands.size() != 1) {
        fail(AsmError::Kind::Syntax, in[i].no, ".rept expects a count");
      }
      long count = 0;
      try {
        count = std::stol(in[i].operands[0], nullptr, 0);
      } catch (...) {
        fail(AsmError::Kind::Syntax, in[i].no, "bad .rept count");
      }
      if (count < 0 || count > 1'000'000) {
        fail(AsmError::Kind::Syntax, in[i].no, "bad .rept count");
      }
      size_t j = i + 1;
      std::vector<Line> body;
      bool closed = false;
      for (; j < in.size(); ++j) {
        std::string o = lower(in[j].op);
        if (o == ".endr") {
          closed = true;
          break;
        }
        if (o == ".rept") {
          fail(AsmError::Kind::Syntax, in[j].no, ".rept does not nest");
        }
        if (!in[j].label.empty()) {
          fail(AsmError::Kind::Syntax, in[j].no,
               "labels inside .rept are not allowed");
        }
        body.push_back(in[j]);
      }
      if (!closed) fail(AsmError::Kind::Syntax, in[i].no, "missing .endr");
      for (long r = 0; r < count; ++r) {
        out.insert(out.end(), body.begin(), body.end());
      }
      i = j + 1;
    } else if (op == ".endr") {
      fail(AsmError::Kind::Syntax, in[i].no, ".endr without .rept");
    } else {
      out.push_back(in[i]);
      ++i;
    }
  }
  return out;
}

struct SegmentBuf {
  uint32_t base = 0;
  uint32_t perms = 0;
  std::vector<uint8_t> bytes;
};

class Assembler {
 public:
  Image run(const std::string& source, const std::string& name) {
    auto lines = expand_rept(parse_lines(source));
    pass(lines, /*emitting=*/false);
    // reset segment buffers but keep labels
    for (auto& [kind, seg] : segs_) seg.bytes.clear();
    cur_.clear();
    entry_label_.clear();
    args_.clear();
    env_.clear();
    pass(lines, /*emitting=*/true);

    if (entry_label_.empty()) {
      fail(AsmError::Kind::MissingEntry, 0, ".entry directive missing");
    }
    auto it = labels_.find(entry_label_);
    if (it == labels_.end()) {
      fail(AsmError::Kind::UndefinedLabel, 0,
           fmt::format("entry label '{}' undefined", entry_label_));
    }

    Image img;
    img.entry = it->second;
    img.name = name;
    img.args = args_;
    img.env = env_;
    for (const auto& kind : seg_order_) {
      const auto& seg = segs_.at(kind);
      if (seg.bytes.empty()) continue;
      Segment s;
      s.vaddr = seg.base;
      s.perms = seg.perms;
      s.bytes = seg.bytes;
      s.memlen = static_cast<uint32_t>(seg.bytes.size());
      img.segments.push_back(std::move(s));
    }
    try {
      validate_image(img);
    } catch (const ImageError& e) {
      fail(AsmError::Kind::Layout, 0, e.what());
    }
    return img;
  }

 private:
  std::map<std::string, SegmentBuf> segs_;
  std::vector<std::string> seg_order_;
  std::string cur_;
  std::map<std::string, uint32_t> labels_;
  std::string entry_label_;
  std::vector<uint8_t> args_;
  std::vector<std::string> env_;
  bool emitting_ = false;

  SegmentBuf& seg(int line) {
    if (cur_.empty()) select_segment("code", std::nullopt, line);
    return segs_[cur_];
  }

  uint32_t here(int line) {
    auto& s = seg(line);
    return s.base + static_cast<uint32_t>(s.bytes.size());
  }

  void select_segment(const std::string& kind, std::optional<uint32_t> at,
                      int line) {
    if (kind != "code" && kind != "data" && kind != "lib") {
      fail(AsmError::Kind::Syntax, line, "unknown segment kind " + kind);
    }
    if (!segs_.count(kind)) {
      SegmentBuf s;
      s.base = at.value_or(kind == "code"   ? kCodeBase
                           : kind == "data" ? kDataBase
                                            : kLibBase);
      s.perms = kind == "data" ? (kPermR | kPermW) : (kPermR | kPermX);
      if (s.base % kPageSize != 0) {
        fail(AsmError::Kind::Alignment, line, "segment base not page-aligned");
      }
      segs_[kind] = s;
      seg_order_.push_back(kind);
    } else if (at && segs_[kind].base != *at) {
      fail(AsmError::Kind::Syntax, line, "segment rebased");
    }
    cur_ = kind;
  }

  void define_label(const std::string& name, int line) {
    uint32_t addr = here(line);
    if (!emitting_) {
      if (labels_.count(name)) {
        fail(AsmError::Kind::DuplicateLabel, line, "duplicate label " + name);
      }
      labels_[name] = addr;
    }
  }

  // --- expressions -------------------------------------------------

  std::optional<int64_t> parse_number(const std::string& t) {
    if (t.empty()) return std::nullopt;
    if (t.size() >= 3 && t.front() == '\'' && t.back() == '\'') {
      std::string inner = t.substr(1, t.size() - 2);
      if (inner == "\\n") return '\n';
      if (inner == "\\0") return 0;
      if (inner == "\\t") return '\t';
      if (inner == "\\\\") return '\\';
      if (inner.size() == 1) return inner[0];
      return std::nullopt;
    }
    size_t pos = 0;
    try {
      int64_t v = std::stoll(t, &pos, 0);
      if (pos != t.size()) return std::nullopt;
      return v;
    } catch (...) {
      return std::nullopt;
    }
  }

  int64_t eval(const std::string& expr, int line) {
    std::string t = strip(expr);
    if (t.empty()) fail(AsmError::Kind::Syntax, line, "empty expression");
    std::string low = lower(t);
    if ((low.rfind("lo(", 0) == 0 || low.rfind("hi(", 0) == 0) &&
        t.back() == ')') {
      int64_t inner = eval(t.substr(3, t.size() - 4), line);
      uint32_t v = static_cast<uint32_t>(inner);
      return low[0] == 'l' ? (v & 0xFFFF) : (v >> 16);
    }
    // split on top-level +/- (left to right), skipping a leading sign
    int depth = 0;
    for (size_t i = t.size(); i-- > 1;) {
      char c = t[i];
      if (c == '(') depth++;
      if (c == ')') depth--;
      if (depth == 0 && (c == '+' || c == '-')) {
        // don't split exponent-like or unary contexts: previous char must
        // be alnum, ')' or '.'
        char prev = t[i - 1];
        if (std::isalnum(static_cast<unsigned char>(prev)) || prev == ')' ||
            prev == '.' || prev == '_') {
          int64_t lhs = eval(t.substr(0, i), line);
          int64_t rhs = eval(t.substr(i + 1), line);
          return c == '+' ? lhs + rhs : lhs - rhs;
        }
      }
    }
    if (t == ".") return here(line);
    if (auto num = parse_number(t)) return *num;
    // label
    auto it = labels_.find(t);
    if (it == labels_.end()) {
      if (!emitting_) return 0;
      fail(AsmError::Kind::UndefinedLabel, line, "undefined label " + t);
    }
    return it->second;
  }

  // --- emission ----------------------------------------------------

  void emit_bytes(const uint8_t* p, size_t n, int line) {
    auto& s = seg(line);
    s.bytes.insert(s.bytes.end(), p, p + n);
    if (s.bytes.size() > 64u * 1024 * 1024) {
      fail(AsmError::Kind::Layout, line, "segment too large");
    }
  }

  void emit_word(uint32_t w, int line) {
    uint8_t b[4] = {static_cast<uint8_t>(w), static_cast<uint8_t>(w >> 8),
                    static_cast<uint8_t>(w >> 16),
                    static_cast<uint8_t>(w >> 24)};
    emit_bytes(b, 4, line);
  }

  void emit_instr(Op op, uint8_t rd, uint8_t rs, uint16_t imm, int line) {
    if (here(line) % 4 != 0) {
      fail(AsmError::Kind::Alignment, line,
           "instruction not 4-aligned (use .align 4)");
    }
    Instruction i{op, rd, rs, imm, here(line)};
    isa::EncodeError err;
    auto w = isa::encode(i, &err);
    if (!w) fail(AsmError::Kind::FieldRange, line, "field overflow");
    emit_word(*w, line);
  }

  uint8_t parse_reg(const std::string& t, int line) {
    std::string u = upper(strip(t));
    if (u.size() == 2 && u[0] == 'R' && u[1] >= '0' && u[1] <= '7') {
      return u[1] - '0';
    }
    fail(AsmError::Kind::Syntax, line, "expected register, got " + t);
  }

  uint16_t imm16u(const std::string& t, int line) {
    int64_t v = eval(t, line);
    if (emitting_ && (v < 0 || v > 0xFFFF)) {
      fail(AsmError::Kind::FieldRange, line,
           fmt::format("immediate {} out of unsigned 16-bit range", v));
    }
    return static_cast<uint16_t>(v);
  }

  uint16_t imm16s(const std::string& t, int line) {
    int64_t v = eval(t, line);
    if (emitting_ && (v < -32768 || v > 0xFFFF)) {
      fail(AsmError::Kind::FieldRange, line,
           fmt::format("immediate {} out of 16-bit range", v));
    }
    return static_cast<uint16_t>(v);
  }

  // [Rn], [Rn+off], [Rn-off]
  std::pair<uint8_t, uint16_t> parse_mem(const std::string& t, int line) {
    std::string s = strip(t);
    if (s.size() < 3 || s.front() != '[' || s.back() != ']') {
      fail(AsmError::Kind::Syntax, line, "expected [Rn+imm], got " + t);
    }
    std::string inner = strip(s.substr(1, s.size() - 2));
    size_t i = inner.find_first_of("+-");
    std::string reg = i == std::string::npos ? inner : inner.substr(0, i);
    uint16_t off = 0;
    if (i != std::string::npos) {
      off = imm16s(inner.substr(i), line);
    }
    return {parse_reg(reg, line), off};
  }

  uint16_t branch_disp(const std::string& t, int line) {
    int64_t target = eval(t, line);
    if (!emitting_) return 0;
    uint32_t pc = here(line);
    if (target % 4 != 0) {
      fail(AsmError::Kind::Alignment, line, "branch target not 4-aligned");
    }
    int64_t disp = (target - (static_cast<int64_t>(pc) + 4)) / 4;
    if (disp < -32768 || disp > 32767) {
      fail(AsmError::Kind::BranchOutOfRange, line,
           fmt::format("branch displacement {} out of range", disp));
    }
    return static_cast<uint16_t>(disp);
  }

  void need(const Line& l, size_t n) {
    if (l.operands.size() != n) {
      fail(AsmError::Kind::Syntax, l.no,
           fmt::format("{} expects {} operand(s)", l.op, n));
    }
  }

  std::vector<uint8_t> parse_string(const std::string& t, int line) {
    std::string s = strip(t);
    if (s.size() < 2 || s.front() != '"' || s.back() != '"') {
      fail(AsmError::Kind::Syntax, line, "expected string literal");
    }
    std::vector<uint8_t> out;
    for (size_t i = 1; i + 1 < s.size(); ++i) {
      char c = s[i];
      if (c == '\\' && i + 2 < s.size() + 1) {
        char e = s[++i];
        switch (e) {
          case 'n': out.push_back('\n'); break;
          case 't': out.push_back('\t'); break;
          case '0': out.push_back(0); break;
          case '\\': out.push_back('\\'); break;
          case '"': out.push_back('"'); break;
          default:
            fail(AsmError::Kind::Syntax, line, "bad escape in string");
        }
      } else {
        out.push_back(static_cast<uint8_t>(c));
      }
    }
    return out;
  }

  void directive(const Line& l) {
    std::string d = lower(l.op);
    if (d == ".seg") {
      if (l.operands.empty() || l.operands.size() > 2) {
        fail(AsmError::Kind::Syntax, l.no, ".seg kind [@addr]");
      }
      std::optional<uint32_t> at;
      if (l.operands.size() == 2) {
        std::string a = strip(l.operands[1]);
        if (a.empty() || a[0] != '@') {
          fail(AsmError::Kind::Syntax, l.no, "expected @addr");
        }
        at = static_cast<uint32_t>(eval(a.substr(1), l.no));
      } else {
        // also allow ".seg code @0x..." without comma
        std::string k = strip(l.operands[0]);
        size_t sp = k.find_first_of(" \t");
        if (sp != std::string::npos) {
          std::string rest = strip(k.substr(sp));
          k = k.substr(0, sp);
          if (!rest.empty() && rest[0] == '@') {
            at = static_cast<uint32_t>(eval(rest.substr(1), l.no));
          }
          select_segment(lower(k), at, l.no);
          return;
        }
      }
      select_segment(lower(strip(l.operands[0])), at, l.no);
    } else if (d == ".entry") {
      need(l, 1);
      entry_label_ = strip(l.operands[0]);
    } else if (d == ".word") {
      if (l.operands.empty()) fail(AsmError::Kind::Syntax, l.no, ".word needs values");
      for (const auto& o : l.operands) {
        emit_word(static_cast<uint32_t>(eval(o, l.no)), l.no);
      }
    } else if (d == ".byte") {
      for (const auto& o : l.operands) {
        int64_t v = eval(o, l.no);
        if (emitting_ && (v < -128 || v > 255)) {
          fail(AsmError::Kind::FieldRange, l.no, "byte out of range");
        }
        uint8_t b = static_cast<uint8_t>(v);
        emit_bytes(&b, 1, l.no);
      }
    } else if (d == ".ascii" || d == ".asciz") {
      need(l, 1);
      auto bytes = parse_string(l.operands[0], l.no);
      if (d == ".asciz") bytes.push_back(0);
      if (!bytes.empty()) emit_bytes(bytes.data(), bytes.size(), l.no);
    } else if (d == ".align") {
      need(l, 1);
      int64_t a = eval(l.operands[0], l.no);
      if (a <= 0 || (a & (a - 1)) != 0 || a > 65536) {
        fail(AsmError::Kind::Alignment, l.no, "bad alignment");
      }
      while (here(l.no) % a != 0) {
        uint8_t z = 0;
        emit_bytes(&z, 1, l.no);
      }
    } else if (d == ".space") {
      need(l, 1);
      int64_t n = eval(l.operands[0], l.no);
      if (n < 0 || n > 16 * 1024 * 1024) {
        fail(AsmError::Kind::Syntax, l.no, "bad .space size");
      }
      std::vector<uint8_t> z(static_cast<size_t>(n), 0);
      if (n) emit_bytes(z.data(), z.size(), l.no);
    } else if (d == ".args") {
      need(l, 1);
      args_ = parse_string(l.operands[0], l.no);
    } else if (d == ".env") {
      std::string e = strip(l.raw_tail);
      if (e.find('=') == std::string::npos) {
        fail(AsmError::Kind::Syntax, l.no, ".env NAME=VALUE");
      }
      env_.push_back(e);
    } else {
      fail(AsmError::Kind::Syntax, l.no, "unknown directive " + l.op);
    }
  }

  void instruction(const Line& l) {
    std::string m = upper(l.op);
    auto& ops = l.operands;
    const int no = l.no;

    if (m == "NOP") { need(l, 0); emit_instr(Op::Nop, 0, 0, 0, no); return; }
    if (m == "RET") { need(l, 0); emit_instr(Op::Ret, 0, 0, 0, no); return; }
    if (m == "SYS") { need(l, 0); emit_instr(Op::Sys, 0, 0, 0, no); return; }

    if (m == "LI") {
      need(l, 2);
      uint8_t rd = parse_reg(ops[0], no);
      uint32_t v = static_cast<uint32_t>(eval(ops[1], no));
      emit_instr(Op::MovRI, rd, 0, static_cast<uint16_t>(v & 0xFFFF), no);
      emit_instr(Op::MovHI, rd, 0, static_cast<uint16_t>(v >> 16), no);
      return;
    }
    if (m == "MOVRI") {
      need(l, 2);
      emit_instr(Op::MovRI, parse_reg(ops[0], no), 0, imm16u(ops[1], no), no);
      return;
    }
    if (m == "MOVHI") {
      need(l, 2);
      emit_instr(Op::MovHI, parse_reg(ops[0], no), 0, imm16u(ops[1], no), no);
      return;
    }
    if (m == "MOVRR") {
      need(l, 2);
      emit_instr(Op::MovRR, parse_reg(ops[0], no), parse_reg(ops[1], no), 0, no);
      return;
    }

    static const std::map<std::string, Op> rr = {
        {"ADD", Op::Add}, {"SUB", Op::Sub}, {"MUL", Op::Mul},
        {"DIV", Op::Div}, {"AND", Op::And}, {"OR", Op::Or},
        {"XOR", Op::Xor}, {"CMP", Op::Cmp},
    };
    if (auto it = rr.find(m); it != rr.end()) {
      need(l, 2);
      emit_instr(it->second, parse_reg(ops[0], no), parse_reg(ops[1], no), 0, no);
      return;
    }

    if (m == "SHL" || m == "SHR") {
      need(l, 2);
      emit_instr(m == "SHL" ? Op::Shl : Op::Shr, parse_reg(ops[0], no), 0,
                 imm16u(ops[1], no), no);
      return;
    }
    if (m == "ADDI" || m == "CMPI") {
      need(l, 2);
      emit_instr(m == "ADDI" ? Op::Addi : Op::Cmpi, parse_reg(ops[0], no), 0,
                 imm16s(ops[1], no), no);
      return;
    }
    if (m == "LD" || m == "LDB") {
      need(l, 2);
      auto [rs, off] = parse_mem(ops[1], no);
      emit_instr(m == "LD" ? Op::Ld : Op::Ldb, parse_reg(ops[0], no), rs, off, no);
      return;
    }
    if (m == "ST" || m == "STB") {
      need(l, 2);
      auto [rd, off] = parse_mem(ops[0], no);
      emit_instr(m == "ST" ? Op::St : Op::Stb, rd, parse_reg(ops[1], no), off, no);
      return;
    }

    static const std::map<std::string, Op> branches = {
        {"JMP", Op::Jmp}, {"JZ", Op::Jz},   {"JNZ", Op::Jnz},
        {"JLT", Op::Jlt}, {"JGE", Op::Jge}, {"CALL", Op::Call},
    };
    if (auto it = branches.find(m); it != branches.end()) {
      need(l, 1);
      emit_instr(it->second, 0, 0, branch_disp(ops[0], no), no);
      return;
    }
    if (m == "JMPR" || m == "CALLR") {
      need(l, 1);
      emit_instr(m == "JMPR" ? Op::Jmpr : Op::Callr, 0, parse_reg(ops[0], no),
                 0, no);
      return;
    }
    if (m == "RDLIP" || m == "POP") {
      need(l, 1);
      emit_instr(m == "RDLIP" ? Op::Rdlip : Op::Pop, parse_reg(ops[0], no), 0,
                 0, no);
      return;
    }
    if (m == "PUSH") {
      need(l, 1);
      emit_instr(Op::Push, 0, parse_reg(ops[0], no), 0, no);
      return;
    }
    if (m == "CALLOUT") {
      need(l, 1);
      emit_instr(Op::Callout, 0, 0, imm16u(ops[0], no), no);
      return;
    }
    fail(AsmError::Kind::Syntax, no, "unknown mnemonic " + l.op);
  }

  void pass(const std::vector<Line>& lines, bool emitting) {
    emitting_ = emitting;
    for (const auto& l : lines) {
      if (!l.label.empty()) define_label(l.label, l.no);
      if (l.op.empty()) continue;
      if (l.op[0] == '.') {
        directive(l);
      } else {
        instruction(l);
      }
    }
  }
};

}  // namespace

Image assemble(const std::string& source, const std::string& name) {
  Assembler a;
  return a.run(source, name);
}

Image assemble_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw AsmError(AsmError::Kind::Syntax, 0,
                   fmt::format("cannot open {}", path));
  }
  std::stringstream buf;
  buf << in.rdbuf();
  auto slash = path.find_last_of('/');
  std::string stem = slash == std::string::npos ? path : path.substr(slash + 1);
  auto dot = stem.find_last_of('.');
  if (dot != std::string::npos) stem = stem.substr(0, dot);
  return assemble(buf.str(), stem.empty() ? "app" : stem);
}

}  // namespace g32
