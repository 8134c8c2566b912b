#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace g32::isa {

// G32: fixed 4-byte little-endian instructions.
//   byte0 = opcode, byte1 = (rd << 4) | rs, bytes 2-3 = imm16.
// Register fields are 3 bits wide; the top bit of each nibble is
// reserved and must be zero.
enum class Op : uint8_t {
  Nop = 0x01,
  MovRI = 0x02,  // rd = zext(imm)
  MovHI = 0x03,  // rd = (rd & 0xFFFF) | imm << 16
  MovRR = 0x04,  // rd = rs
  Add = 0x05,
  Sub = 0x06,
  Mul = 0x07,
  Div = 0x08,  // unsigned; rs == 0 faults DIV_ZERO
  And = 0x09,
  Or = 0x0A,
  Xor = 0x0B,
  Shl = 0x0C,  // rd <<= imm & 31
  Shr = 0x0D,  // logical
  Addi = 0x0E,  // rd += sext(imm)
  Ld = 0x10,   // rd = [rs + sext(imm)]
  St = 0x11,   // [rd + sext(imm)] = rs
  Ldb = 0x12,  // zero-extending byte load
  Stb = 0x13,
  Jmp = 0x20,  // pc = pc + 4 + sext(imm)*4
  Jz = 0x21,
  Jnz = 0x22,
  Jlt = 0x23,  // N != V
  Jge = 0x24,  // N == V
  Jmpr = 0x25,  // pc = rs & ~3
  Call = 0x26,  // push pc+4, pc-relative target
  Callr = 0x27,
  Ret = 0x28,
  Cmp = 0x30,
  Cmpi = 0x31,
  Rdlip = 0x32,  // rd = LASTIP
  Sys = 0x40,
  Push = 0x50,
  Pop = 0x51,
  Callout = 0xF0,  // engine-reserved, id = imm16
};

enum class OpClass : uint8_t {
  Alu,
  Move,
  LoadStore,
  Control,
  Stack,
  Syscall,
  Callout,
  Nop,
};

struct Instruction {
  Op op = Op::Nop;
  uint8_t rd = 0;
  uint8_t rs = 0;
  uint16_t imm = 0;
  uint32_t addr = 0;

  bool operator==(const Instruction&) const = default;
};

struct DecodeError {
  enum class Kind { UndefinedOpcode, BadRegister } kind = Kind::UndefinedOpcode;
  uint8_t byte = 0;  // offending opcode byte (or reg byte)
};

struct EncodeError {
  enum class Kind { FieldOverflow } kind = Kind::FieldOverflow;
};

bool opcode_defined(uint8_t byte);

// Fails on undefined opcode bytes and on reserved register bits, so
// decode succeeds exactly on the words encode can produce.
std::optional<Instruction> decode(uint32_t word, uint32_t addr,
                                  DecodeError* err = nullptr);

std::optional<uint32_t> encode(const Instruction& instr,
                               EncodeError* err = nullptr);

OpClass classify(Op op);
inline OpClass classify(const Instruction& i) { return classify(i.op); }

// Deterministic cycle model: alu/move/nop/stack 1, load_store 2,
// control 2 (taken or not), syscall 10, callout 0.
uint32_t cost_of_class(OpClass c);
inline uint32_t cost(const Instruction& i) { return cost_of_class(classify(i)); }

std::string_view mnemonic(Op op);
std::string_view class_name(OpClass c);

// Disassembly, e.g. "ADD R1, R2" or "LD R3, [R4+8]".
std::string format_instruction(const Instruction& i);

inline int32_t sext16(uint16_t v) { return static_cast<int16_t>(v); }

// Branch target of a pc-relative control instruction.
inline uint32_t branch_target(const Instruction& i) {
  return i.addr + 4 + static_cast<uint32_t>(sext16(i.imm)) * 4;
}

// Z,N,C,V. ADD/SUB/ADDI/CMP/CMPI set all four; MUL/DIV and the logic
// ops set Z,N only; everything else leaves flags alone.
struct Flags {
  bool z = false, n = false, c = false, v = false;

  uint32_t pack() const {
    return (z ? 1u : 0) | (n ? 2u : 0) | (c ? 4u : 0) | (v ? 8u : 0);
  }
  static Flags unpack(uint32_t w) {
    return Flags{(w & 1) != 0, (w & 2) != 0, (w & 4) != 0, (w & 8) != 0};
  }
  bool operator==(const Flags&) const = default;
};

}  // namespace g32::isa
