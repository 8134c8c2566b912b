#include "doctest.h"

#include <map>
#include <vector>

#include "g32/isa.hpp"

using namespace g32::isa;

namespace {

const std::vector<Op> kAllOps = {
    Op::Nop,  Op::MovRI, Op::MovHI, Op::MovRR, Op::Add,   Op::Sub,
    Op::Mul,  Op::Div,   Op::And,   Op::Or,    Op::Xor,   Op::Shl,
    Op::Shr,  Op::Addi,  Op::Ld,    Op::St,    Op::Ldb,   Op::Stb,
    Op::Jmp,  Op::Jz,    Op::Jnz,   Op::Jlt,   Op::Jge,   Op::Jmpr,
    Op::Call, Op::Callr, Op::Ret,   Op::Cmp,   Op::Cmpi,  Op::Rdlip,
    Op::Sys,  Op::Push,  Op::Pop,   Op::Callout,
};

uint32_t word_of(uint8_t b0, uint8_t b1, uint8_t b2, uint8_t b3) {
  return b0 | (b1 << 8) | (b2 << 16) | (b3 << 24);
}

}  // namespace

TEST_CASE("decode known words") {
  auto nop = decode(word_of(0x01, 0x00, 0x00, 0x00), 0x400000);
  REQUIRE(nop.has_value());
  CHECK(nop->op == Op::Nop);
  CHECK(nop->addr == 0x400000);

  // ADD R1, R2
  auto add = decode(word_of(0x05, 0x12, 0x00, 0x00), 0x400004);
  REQUIRE(add.has_value());
  CHECK(add->op == Op::Add);
  CHECK(add->rd == 1);
  CHECK(add->rs == 2);
}

TEST_CASE("zeroed memory does not decode") {
  DecodeError err;
  auto r = decode(0, 0x400000, &err);
  CHECK(!r.has_value());
  CHECK(err.kind == DecodeError::Kind::UndefinedOpcode);
  CHECK(err.byte == 0x00);
}

TEST_CASE("reserved register bits do not decode") {
  DecodeError err;
  auto r = decode(word_of(0x05, 0x82, 0x00, 0x00), 0, &err);
  CHECK(!r.has_value());
  CHECK(err.kind == DecodeError::Kind::BadRegister);
  CHECK(decode(word_of(0x05, 0x18, 0x00, 0x00), 0, &err) == std::nullopt);
}

TEST_CASE("encode known instructions") {
  Instruction nop{Op::Nop, 0, 0, 0, 0};
  CHECK(encode(nop) == word_of(0x01, 0x00, 0x00, 0x00));
  Instruction add{Op::Add, 1, 2, 0, 0};
  CHECK(encode(add) == word_of(0x05, 0x12, 0x00, 0x00));
}

TEST_CASE("encode rejects out-of-range register fields") {
  Instruction bad{Op::Add, 8, 0, 0, 0};
  EncodeError err;
  CHECK(encode(bad, &err) == std::nullopt);
  CHECK(err.kind == EncodeError::Kind::FieldOverflow);
}

TEST_CASE("exhaustive encode/decode round trip") {
  const uint16_t imms[] = {0, 1, 0x7FFF, 0xFFFF};
  for (Op op : kAllOps) {
    for (uint8_t rd = 0; rd < 8; ++rd) {
      for (uint8_t rs = 0; rs < 8; ++rs) {
        for (uint16_t imm : imms) {
          Instruction i{op, rd, rs, imm, 0x00400000};
          auto w = encode(i);
          REQUIRE(w.has_value());
          auto back = decode(*w, 0x00400000);
          REQUIRE(back.has_value());
          CHECK(*back == i);
        }
      }
    }
  }
}

TEST_CASE("decode succeeds exactly on words encode produces") {
  // Over all opcode bytes and reg bytes: decode(w) ok iff re-encode gives w.
  for (uint32_t opb = 0; opb < 256; ++opb) {
    for (uint32_t regs = 0; regs < 256; regs += 7) {
      uint32_t w = word_of(opb, regs, 0x34, 0x12);
      auto d = decode(w, 0);
      if (d) {
        CHECK(encode(*d) == w);
      } else {
        CHECK((!opcode_defined(opb) || (regs & 0x88) != 0));
      }
    }
  }
}

TEST_CASE("no two opcode bytes share a mnemonic") {
  std::map<std::string_view, int> seen;
  for (uint32_t b = 0; b < 256; ++b) {
    if (opcode_defined(b)) seen[mnemonic(static_cast<Op>(b))]++;
  }
  CHECK(seen.size() == kAllOps.size());
  for (const auto& [name, count] : seen) {
    CAPTURE(name);
    CHECK(count == 1);
  }
}

TEST_CASE("classification is total and matches the table") {
  CHECK(classify(Op::Add) == OpClass::Alu);
  CHECK(classify(Op::Ret) == OpClass::Control);
  CHECK(classify(Op::Callout) == OpClass::Callout);
  CHECK(classify(Op::Rdlip) == OpClass::Move);
  for (Op op : {Op::Jmp, Op::Jz, Op::Jnz, Op::Jlt, Op::Jge, Op::Jmpr, Op::Call,
                Op::Callr, Op::Ret}) {
    CHECK(classify(op) == OpClass::Control);
  }
  CHECK(classify(Op::Sys) == OpClass::Syscall);
}

TEST_CASE("cost matches class cost for every opcode") {
  CHECK(cost(Instruction{Op::Nop, 0, 0, 0, 0}) == 1);
  CHECK(cost(Instruction{Op::Ld, 0, 0, 0, 0}) == 2);
  CHECK(cost(Instruction{Op::Sys, 0, 0, 0, 0}) == 10);
  for (Op op : kAllOps) {
    Instruction i{op, 0, 0, 0, 0};
    CHECK(cost(i) == cost_of_class(classify(i)));
    if (classify(op) != OpClass::Callout) CHECK(cost(i) > 0);
  }
  CHECK(cost(Instruction{Op::Callout, 0, 0, 0, 0}) == 0);
}

TEST_CASE("branch target arithmetic") {
  // disp is in instruction words relative to pc+4
  Instruction j{Op::Jmp, 0, 0, static_cast<uint16_t>(-2 & 0xFFFF), 0x400010};
  CHECK(branch_target(j) == 0x40000C);
  Instruction f{Op::Jz, 0, 0, 3, 0x400000};
  CHECK(branch_target(f) == 0x400010);
}

TEST_CASE("flags pack round trip") {
  Flags f{true, false, true, true};
  CHECK(Flags::unpack(f.pack()) == f);
  CHECK(Flags::unpack(0) == Flags{});
}
