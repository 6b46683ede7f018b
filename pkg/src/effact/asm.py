"""Machine-code containers: assembly text, 128-bit binary words, images.

The textual assembly (.easm) is the normative format and shares the IR
grammar; binary (.ebin) packs each instruction into one 128-bit word and
round-trips losslessly.  Memory images (.emem) are a JSON manifest plus raw
little-endian 64-bit coefficient words.  Exact layouts are documented in
docs/formats.md.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .ir import (
    Addr,
    ConstDef,
    CRef,
    Imm,
    Instr,
    IrError,
    MemoryImage,
    Program,
    Vreg,
    parse_ir,
    print_program,
)
from .poly import ResiduePoly, make_poly
from .rns import REPR_NAMES, make_modulus

MACHINE_OPS = {"mmul", "mmad", "mac", "ntt", "intt", "auto", "load", "store"}

_OPCODES = {"mmul": 1, "mmad": 2, "mac": 3, "ntt": 4, "intt": 5, "auto": 6,
            "load": 7, "store": 8}
_OPNAMES = {v: k for k, v in _OPCODES.items()}

# operand field: 24 bits = 3-bit tag + 21-bit payload
_T_NONE, _T_REG, _T_ADDR, _T_CONST, _T_IMM, _T_FIFO = 0, 1, 2, 3, 4, 5

_EXE_MAGIC = b"EEXE0001"
_MEM_MAGIC = b"EMEM0001"


def check_machine_form(prog: Program):
    for i in prog.instrs:
        if i.op not in MACHINE_OPS:
            raise IrError(f"opcode '{i.op}' is not machine-level", i.line)
        for o in list(i.dests) + list(i.srcs):
            if isinstance(o, Vreg) and str(o).startswith("%"):
                raise IrError(f"virtual register {o} survives in machine "
                              "code", i.line)
            if isinstance(o, Addr) and not o.concrete:
                raise IrError(f"non-constant address {o} in machine code",
                              i.line)


def assemble_text(prog: Program) -> str:
    check_machine_form(prog)
    return print_program(prog)


def _pack_name(name: str) -> bytes:
    b = name.encode()
    if len(b) > 15:
        raise IrError(f"name '{name}' too long for binary encoding")
    return b.ljust(16, b"\0")


def _unpack_name(b: bytes) -> str:
    return b.rstrip(b"\0").decode()


def _encode_operand(o, symidx, constidx) -> int:
    if o is None:
        return _T_NONE << 21
    if isinstance(o, Vreg):
        name = str(o)
        if name.startswith("f"):
            return (_T_FIFO << 21) | int(name[1:])
        return (_T_REG << 21) | int(name[1:])
    if isinstance(o, Addr):
        if o.sym not in symidx or not 0 <= o.base < (1 << 15):
            raise IrError(f"address {o} not encodable")
        return (_T_ADDR << 21) | (symidx[o.sym] << 15) | o.base
    if isinstance(o, CRef):
        return (_T_CONST << 21) | constidx[o.name]
    if isinstance(o, Imm):
        if not 0 <= o.val < (1 << 21):
            raise IrError(f"immediate {o.val} out of encodable range")
        return (_T_IMM << 21) | o.val
    raise IrError(f"operand {o} not encodable")


def _decode_operand(word: int, consts, syms):
    tag, payload = word >> 21, word & ((1 << 21) - 1)
    if tag == _T_NONE:
        return None
    if tag == _T_REG:
        return Vreg(f"r{payload}")
    if tag == _T_FIFO:
        return Vreg(f"f{payload}")
    if tag == _T_ADDR:
        return Addr(syms[payload >> 15], payload & ((1 << 15) - 1))
    if tag == _T_CONST:
        return CRef(consts[payload])
    if tag == _T_IMM:
        return Imm(payload)
    raise IrError(f"bad operand tag {tag}")


def assemble_binary(prog: Program) -> bytes:
    check_machine_form(prog)
    mods = list(prog.moduli)
    consts = list(prog.consts)
    syms = list(prog.dram)
    modidx = {name: k for k, name in enumerate(mods)}
    symidx = {name: k for k, name in enumerate(syms)}
    constidx = {name: k for k, name in enumerate(consts)}

    out = bytearray()
    out += _EXE_MAGIC
    out += struct.pack("<IIIIII", prog.n, len(mods), len(consts), len(syms),
                       len(prog.instrs), 0)
    for name in mods:
        m = prog.moduli[name]
        out += _pack_name(name) + struct.pack("<QII", m.q, m.r_bits, 0)
    for name in consts:
        c = prog.consts[name]
        out += _pack_name(name) + struct.pack(
            "<IBB2xQ", modidx[c.mod], c.repr, 1 if c.absorb else 0, c.value)
    for name in syms:
        out += _pack_name(name) + struct.pack("<II", prog.dram[name], 0)
    for i in prog.instrs:
        flags = 1 if "defer" in i.flags else 0
        mod = modidx[i.mod] + 1 if i.mod else 0
        dest = i.dests[0] if i.dests else None
        srcs = list(i.srcs) + [None] * (3 - len(i.srcs))
        fields = [_encode_operand(dest, symidx, constidx)]
        fields += [_encode_operand(s, symidx, constidx) for s in srcs[:3]]
        packed = 0
        for f in fields:
            packed = (packed << 24) | f
        out += struct.pack("<BBBB", _OPCODES[i.op], flags, mod, 0)
        out += packed.to_bytes(12, "little")
    return bytes(out)


def disassemble_binary(blob: bytes) -> Program:
    if blob[:8] != _EXE_MAGIC:
        raise IrError("bad executable magic")
    n, nmods, nconsts, nsyms, ninstrs, _ = struct.unpack("<IIIIII",
                                                         blob[8:32])
    off = 32
    prog = Program(n=n, form="machine")
    mods = []
    for _ in range(nmods):
        name = _unpack_name(blob[off:off + 16])
        q, r_bits, _pad = struct.unpack("<QII", blob[off + 16:off + 32])
        prog.moduli[name] = make_modulus(q, n, r_bits)
        mods.append(name)
        off += 32
    consts = []
    for _ in range(nconsts):
        name = _unpack_name(blob[off:off + 16])
        mi, rep, absorb, value = struct.unpack("<IBB2xQ",
                                               blob[off + 16:off + 32])
        prog.consts[name] = ConstDef(name, mods[mi], value, rep,
                                     bool(absorb))
        consts.append(name)
        off += 32
    syms = []
    for _ in range(nsyms):
        name = _unpack_name(blob[off:off + 16])
        count, _pad = struct.unpack("<II", blob[off + 16:off + 24])
        prog.dram[name] = count
        syms.append(name)
        off += 24
    for _ in range(ninstrs):
        opc, flags, mod, _pad = struct.unpack("<BBBB", blob[off:off + 4])
        packed = int.from_bytes(blob[off + 4:off + 16], "little")
        off += 16
        fields = []
        for k in range(4):
            fields.append((packed >> (24 * (3 - k))) & ((1 << 24) - 1))
        dest = _decode_operand(fields[0], consts, syms)
        srcs = tuple(o for o in (_decode_operand(f, consts, syms)
                                 for f in fields[1:]) if o is not None)
        op = _OPNAMES[opc]
        prog.instrs.append(Instr(
            op,
            (dest,) if dest is not None else (),
            srcs,
            mods[mod - 1] if mod else None,
            frozenset(["defer"]) if flags & 1 else frozenset()))
    return prog


# ---------------------------------------------------------------------------
# memory image files

def save_image(img: MemoryImage, prog_n: int) -> bytes:
    symbols = []
    words = bytearray()
    for sym, slots in img.dram.items():
        meta = []
        for slot in slots:
            if slot is None:
                meta.append(None)
            else:
                meta.append({
                    "q": slot.modulus.q,
                    "r_bits": slot.modulus.r_bits,
                    "domain": slot.domain,
                    "order": slot.order,
                    "repr": REPR_NAMES[slot.repr],
                    "deferred": bool(slot.scale_deferred),
                })
                words += slot.coeffs.astype("<u8").tobytes()
        symbols.append({"name": sym, "count": len(slots), "slots": meta})
    manifest = json.dumps({"n": prog_n, "symbols": symbols}).encode()
    return (_MEM_MAGIC + struct.pack("<I", len(manifest)) + manifest +
            bytes(words))


def load_image(blob: bytes) -> MemoryImage:
    if blob[:8] != _MEM_MAGIC:
        raise IrError("bad memory-image magic")
    (mlen,) = struct.unpack("<I", blob[8:12])
    manifest = json.loads(blob[12:12 + mlen])
    n = manifest["n"]
    off = 12 + mlen
    dram = {}
    mod_cache = {}
    from .rns import REPR_BY_NAME
    for sym in manifest["symbols"]:
        slots = []
        for meta in sym["slots"]:
            if meta is None:
                slots.append(None)
                continue
            key = (meta["q"], meta["r_bits"])
            if key not in mod_cache:
                mod_cache[key] = make_modulus(meta["q"], n, meta["r_bits"])
            coeffs = np.frombuffer(blob[off:off + 8 * n], dtype="<u8")
            off += 8 * n
            slots.append(make_poly(
                mod_cache[key], coeffs, meta["domain"], meta["order"],
                REPR_BY_NAME[meta["repr"]],
                scale_deferred=meta["deferred"]))
        dram[sym["name"]] = slots
    return MemoryImage(dram)
