#include "g32/isa.hpp"

#include <fmt/format.h>

namespace g32::isa {

namespace {

struct OpInfo {
  Op op;
  std::string_view name;
  OpClass cls;
};

constexpr OpInfo kOpTable[] = {
    {Op::Nop, "NOP", OpClass::Nop},
    {Op::MovRI, "MOVri", OpClass::Move},
    {Op::MovHI, "MOVHI", OpClass::Move},
    {Op::MovRR, "MOVrr", OpClass::Move},
    {Op::Add, "ADD", OpClass::Alu},
    {Op::Sub, "SUB", OpClass::Alu},
    {Op::Mul, "MUL", OpClass::Alu},
    {Op::Div, "DIV", OpClass::Alu},
    {Op::And, "AND", OpClass::Alu},
    {Op::Or, "OR", OpClass::Alu},
    {Op::Xor, "XOR", OpClass::Alu},
    {Op::Shl, "SHL", OpClass::Alu},
    {Op::Shr, "SHR", OpClass::Alu},
    {Op::Addi, "ADDI", OpClass::Alu},
    {Op::Ld, "LD", OpClass::LoadStore},
    {Op::St, "ST", OpClass::LoadStore},
    {Op::Ldb, "LDB", OpClass::LoadStore},
    {Op::Stb, "STB", OpClass::LoadStore},
    {Op::Jmp, "JMP", OpClass::Control},
    {Op::Jz, "JZ", OpClass::Control},
    {Op::Jnz, "JNZ", OpClass::Control},
    {Op::Jlt, "JLT", OpClass::Control},
    {Op::Jge, "JGE", OpClass::Control},
    {Op::Jmpr, "JMPR", OpClass::Control},
    {Op::Call, "CALL", OpClass::Control},
    {Op::Callr, "CALLR", OpClass::Control},
    {Op::Ret, "RET", OpClass::Control},
    {Op::Cmp, "CMP", OpClass::Alu},
    {Op::Cmpi, "CMPI", OpClass::Alu},
    {Op::Rdlip, "RDLIP", OpClass::Move},
    {Op::Sys, "SYS", OpClass::Syscall},
    {Op::Push, "PUSH", OpClass::Stack},
    {Op::Pop, "POP", OpClass::Stack},
    {Op::Callout, "CALLOUT", OpClass::Callout},
};

const OpInfo* lookup(uint8_t byte) {
  for (const auto& e : kOpTable) {
    if (static_cast<uint8_t>(e.op) == byte) return &e;
  }
  return nullptr;
}

}  // namespace

bool opcode_defined(uint8_t byte) { return lookup(byte) != nullptr; }

std::optional<Instruction> decode(uint32_t word, uint32_t addr,
                                  DecodeError* err) {
  const uint8_t opb = word & 0xFF;
  const OpInfo* info = lookup(opb);
  if (!info) {
    if (err) *err = {DecodeError::Kind::UndefinedOpcode, opb};
    return std::nullopt;
  }
  const uint8_t regs = (word >> 8) & 0xFF;
  if ((regs & 0x88) != 0) {
    if (err) *err = {DecodeError::Kind::BadRegister, regs};
    return std::nullopt;
  }
  Instruction i;
  i.op = info->op;
  i.rd = regs >> 4;
  i.rs = regs & 0x0F;
  i.imm = static_cast<uint16_t>(word >> 16);
  i.addr = addr;
  return i;
}

std::optional<uint32_t> encode(const Instruction& instr, EncodeError* err) {
  if (instr.rd > 7 || instr.rs > 7) {
    if (err) *err = {EncodeError::Kind::FieldOverflow};
    return std::nullopt;
  }
  uint32_t w = static_cast<uint8_t>(instr.op);
  w |= static_cast<uint32_t>((instr.rd << 4) | instr.rs) << 8;
  w |= static_cast<uint32_t>(instr.imm) << 16;
  return w;
}

OpClass classify(Op op) {
  const OpInfo* info = lookup(static_cast<uint8_t>(op));
  return info ? info->cls : OpClass::Nop;
}

uint32_t cost_of_class(OpClass c) {
  switch (c) {
    case OpClass::Alu:
    case OpClass::Move:
    case OpClass::Nop:
    case OpClass::Stack:
      return 1;
    case OpClass::LoadStore:
    case OpClass::Control:
      return 2;
    case OpClass::Syscall:
      return 10;
    case OpClass::Callout:
      return 0;
  }
  return 1;
}

std::string_view mnemonic(Op op) {
  const OpInfo* info = lookup(static_cast<uint8_t>(op));
  return info ? info->name : "???";
}

std::string_view class_name(OpClass c) {
  switch (c) {
    case OpClass::Alu: return "alu";
    case OpClass::Move: return "move";
    case OpClass::LoadStore: return "load_store";
    case OpClass::Control: return "control";
    case OpClass::Stack: return "stack";
    case OpClass::Syscall: return "syscall";
    case OpClass::Callout: return "callout";
    case OpClass::Nop: return "nop";
  }
  return "?";
}

std::string format_instruction(const Instruction& i) {
  const auto m = mnemonic(i.op);
  switch (i.op) {
    case Op::Nop:
    case Op::Ret:
    case Op::Sys:
      return std::string(m);
    case Op::MovRI:
    case Op::MovHI:
      return fmt::format("{} R{}, 0x{:X}", m, i.rd, i.imm);
    case Op::MovRR:
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div:
    case Op::And:
    case Op::Or:
    case Op::Xor:
    case Op::Cmp:
      return fmt::format("{} R{}, R{}", m, i.rd, i.rs);
    case Op::Shl:
    case Op::Shr:
      return fmt::format("{} R{}, {}", m, i.rd, i.imm);
    case Op::Addi:
    case Op::Cmpi:
      return fmt::format("{} R{}, {}", m, i.rd, sext16(i.imm));
    case Op::Ld:
    case Op::Ldb:
      return fmt::format("{} R{}, [R{}{:+}]", m, i.rd, i.rs, sext16(i.imm));
    case Op::St:
    case Op::Stb:
      return fmt::format("{} [R{}{:+}], R{}", m, i.rd, sext16(i.imm), i.rs);
    case Op::Jmp:
    case Op::Jz:
    case Op::Jnz:
    case Op::Jlt:
    case Op::Jge:
    case Op::Call:
      return fmt::format("{} 0x{:08X}", m, branch_target(i));
    case Op::Jmpr:
    case Op::Callr:
      return fmt::format("{} R{}", m, i.rs);
    case Op::Rdlip:
    case Op::Pop:
      return fmt::format("{} R{}", m, i.rd);
    case Op::Push:
      return fmt::format("{} R{}", m, i.rs);
    case Op::Callout:
      return fmt::format("CALLOUT 0x{:04X}", i.imm);
  }
  return std::string(m);
}

}  // namespace g32::isa
