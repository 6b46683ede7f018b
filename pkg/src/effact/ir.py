"""Vector ISA, textual IR, parser, printer, and the golden executor.

The IR is SSA text, one instruction per line.  A header declares the ring
degree, moduli, DRAM symbols, and a constant pool; the body uses virtual
registers (%name), scalar registers ($name), constant-pool references
(!name), and DRAM addresses (@sym[affine-expr]).

Vector opcodes: mmul, mmad, mac, ntt, intt (.defer), auto, load, store,
copy, and the high-level bconv (compiled away by lowering).  The scalar
subset is sli / sadd / smul, counted loops (loop/endloop), and skipz.

The golden executor runs programs of any form (virtual or physical
registers) against a memory image of residue polynomials, delegating every
vector opcode to the kernels so metadata contracts are enforced for free.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .poly import (
    ResiduePoly,
    Word,
    automorphism_ntt,
    mac_fused,
    ntt_fwd,
    ntt_inv,
    vec_madd,
    vec_mmul,
    _reinterpret_nm,
)
from .rns import REPR_BY_NAME, REPR_NAMES, Modulus, make_modulus


class IrError(ValueError):
    """Parse or validation failure, with line information."""

    def __init__(self, msg, line=None):
        super().__init__(f"line {line}: {msg}" if line else msg)
        self.line = line


class ExecError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# operands

@dataclass(frozen=True)
class Vreg:
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class SRef:
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class CRef:
    name: str

    def __str__(self):
        return "!" + self.name


@dataclass(frozen=True)
class Imm:
    val: int

    def __str__(self):
        return str(self.val)


@dataclass(frozen=True)
class Addr:
    """@sym[base + sum(coeff * scalar)]"""

    sym: str
    base: int = 0
    terms: tuple[tuple[str, int], ...] = ()

    def __str__(self):
        parts = []
        if self.base or not self.terms:
            parts.append(str(self.base))
        for name, coeff in self.terms:
            parts.append(name if coeff == 1 else f"{coeff}*{name}")
        return f"@{self.sym}[{'+'.join(parts)}]"

    def resolve(self, scalars) -> int:
        idx = self.base
        for name, coeff in self.terms:
            if name not in scalars:
                raise ExecError(f"undefined scalar {name} in address")
            idx += coeff * scalars[name]
        return idx

    @property
    def concrete(self) -> bool:
        return not self.terms


@dataclass(frozen=True)
class ConstDef:
    name: str
    mod: str
    value: int
    repr: int
    absorb: bool = False


VECTOR_OPS = {"mmul", "mmad", "mac", "ntt", "intt", "auto", "load", "store",
              "copy", "bconv"}
SCALAR_OPS = {"sli", "sadd", "smul", "loop", "endloop", "skipz"}
# pure vector ops are PRE/peephole candidates; loads/stores are not
PURE_OPS = {"mmul", "mmad", "mac", "ntt", "intt", "auto", "copy"}


@dataclass
class Instr:
    op: str
    dests: tuple = ()
    srcs: tuple = ()
    mod: str | None = None
    flags: frozenset = frozenset()
    meta: dict = field(default_factory=dict)
    line: int = 0

    def with_(self, **kw) -> "Instr":
        new = replace(self, **kw)
        new.meta = dict(self.meta)
        new.meta.update(kw.get("meta", {}))
        return new

    def __str__(self):
        return print_instr(self)


@dataclass
class Program:
    n: int
    moduli: dict[str, Modulus] = field(default_factory=dict)
    consts: dict[str, ConstDef] = field(default_factory=dict)
    dram: dict[str, int] = field(default_factory=dict)
    bases: dict[str, tuple[str, ...]] = field(default_factory=dict)
    instrs: list[Instr] = field(default_factory=list)
    form: str = "ssa-ir"
    fifo_regs: set[str] = field(default_factory=set)
    notes: dict = field(default_factory=dict)

    def clone(self) -> "Program":
        p = Program(self.n, dict(self.moduli), dict(self.consts),
                    dict(self.dram), dict(self.bases),
                    [i.with_() for i in self.instrs], self.form,
                    set(self.fifo_regs), dict(self.notes))
        return p

    def opcount(self) -> dict[str, int]:
        out = {}
        for i in self.instrs:
            out[i.op] = out.get(i.op, 0) + 1
        return out


# ---------------------------------------------------------------------------
# parser

def _parse_affine(text: str, line: int) -> tuple[int, tuple]:
    base, terms = 0, []
    for part in text.replace("-", "+-").split("+"):
        part = part.strip()
        if not part:
            continue
        neg = part.startswith("-")
        if neg:
            part = part[1:].strip()
        sign = -1 if neg else 1
        if "*" in part:
            lhs, rhs = (t.strip() for t in part.split("*", 1))
            if lhs.startswith("$"):
                lhs, rhs = rhs, lhs
            if not rhs.startswith("$") or not lhs.lstrip("-").isdigit():
                raise IrError(f"bad address term '{part}'", line)
            terms.append((rhs, sign * int(lhs)))
        elif part.startswith("$"):
            terms.append((part, sign))
        else:
            if not part.isdigit():
                raise IrError(f"bad address term '{part}'", line)
            base += sign * int(part)
    return base, tuple(terms)


def _parse_operand(tok: str, line: int):
    tok = tok.strip()
    if tok.startswith("%") or (tok[:1] in ("r", "f") and tok[1:].isdigit()):
        return Vreg(tok)
    if tok.startswith("$"):
        return SRef(tok)
    if tok.startswith("!"):
        return CRef(tok[1:])
    if tok.startswith("@"):
        if "[" not in tok or not tok.endswith("]"):
            raise IrError(f"malformed address '{tok}'", line)
        sym, expr = tok[1:-1].split("[", 1)
        base, terms = _parse_affine(expr, line)
        return Addr(sym, base, terms)
    if tok.lstrip("-").isdigit():
        return Imm(int(tok))
    raise IrError(f"unrecognized operand '{tok}'", line)


def _split_ops(rest: str) -> list[str]:
    return [t.strip() for t in rest.split(",") if t.strip()]


def parse_ir(text: str) -> Program:
    prog = Program(n=0)
    defined: set[str] = set()
    loop_stack: list[int] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("."):
            _parse_directive(prog, line, lineno)
            continue
        if prog.n == 0:
            raise IrError("instructions before .n directive", lineno)
        instr = _parse_instr(prog, line, lineno)
        # SSA and scoping checks
        if instr.op == "loop":
            loop_stack.append(lineno)
        elif instr.op == "endloop":
            if not loop_stack:
                raise IrError("endloop without loop", lineno)
            loop_stack.pop()
        for d in instr.dests:
            name = str(d)
            if name.startswith("%") or name.startswith("$"):
                if name.startswith("%") and name in defined:
                    raise IrError(f"redefinition of {name}", lineno)
                defined.add(name)
        for s in instr.srcs:
            if isinstance(s, Vreg) and str(s).startswith("%") \
                    and str(s) not in defined:
                raise IrError(f"use of undefined register {s}", lineno)
            if isinstance(s, SRef) and str(s) not in defined:
                raise IrError(f"use of undefined scalar {s}", lineno)
        prog.instrs.append(instr)
    if loop_stack:
        raise IrError("unterminated loop", loop_stack[-1])
    return prog


def _parse_directive(prog: Program, line: str, lineno: int):
    parts = line.split()
    if parts[0] == ".n":
        prog.n = int(parts[1])
    elif parts[0] == ".mod":
        if prog.n == 0:
            raise IrError(".mod before .n", lineno)
        name, q = parts[1], int(parts[2])
        r_bits = int(parts[3]) if len(parts) > 3 else None
        prog.moduli[name] = make_modulus(q, prog.n, r_bits)
    elif parts[0] == ".basis":
        prog.bases[parts[1]] = tuple(parts[2:])
    elif parts[0] == ".dram":
        prog.dram[parts[1]] = int(parts[2])
    elif parts[0] == ".const":
        # .const name mod value repr [absorb]
        name, mod, value, rep = parts[1], parts[2], int(parts[3]), parts[4]
        if mod not in prog.moduli:
            raise IrError(f"unknown modulus '{mod}'", lineno)
        if rep not in REPR_BY_NAME:
            raise IrError(f"unknown representation '{rep}'", lineno)
        absorb = len(parts) > 5 and parts[5] == "absorb"
        prog.consts[name] = ConstDef(name, mod, value, REPR_BY_NAME[rep],
                                     absorb)
    else:
        raise IrError(f"unknown directive {parts[0]}", lineno)


def _require_mod(prog, name, lineno):
    if name not in prog.moduli:
        raise IrError(f"unknown modulus '{name}'", lineno)
    return name


def _parse_instr(prog: Program, line: str, lineno: int) -> Instr:
    dests: tuple = ()
    body = line
    if "=" in line:
        lhs, body = (t.strip() for t in line.split("=", 1))
        dests = tuple(_parse_operand(t, lineno) for t in lhs.split())
    toks = body.split(None, 1)
    opname = toks[0]
    rest = toks[1] if len(toks) > 1 else ""
    op, _, flag = opname.partition(".")
    flags = frozenset([flag]) if flag else frozenset()
    if op not in VECTOR_OPS | SCALAR_OPS:
        raise IrError(f"unknown opcode '{opname}'", lineno)
    if flag and (op, flag) != ("intt", "defer"):
        raise IrError(f"unknown opcode suffix '.{flag}'", lineno)

    if op == "bconv":
        if "->" not in rest or ":" not in rest:
            raise IrError("bconv needs ': src-mods -> dst-mods'", lineno)
        args, basis = rest.split(":", 1)
        srcm, dstm = (t.split() for t in basis.split("->", 1))
        srcs = tuple(_parse_operand(t, lineno) for t in args.split())
        for m in srcm + dstm:
            _require_mod(prog, m, lineno)
        if len(srcs) != len(srcm) or len(dests) != len(dstm):
            raise IrError("bconv operand/basis arity mismatch", lineno)
        return Instr(op, dests, srcs, None, flags,
                     {"src_mods": tuple(srcm), "dst_mods": tuple(dstm)},
                     lineno)

    mod = None
    toks2 = _split_ops(rest)
    if op in ("mmul", "mmad", "mac", "ntt", "intt", "auto"):
        # the last comma-separated token is the modulus name
        if len(toks2) < 2:
            raise IrError(f"{op} needs a modulus", lineno)
        mod = _require_mod(prog, toks2[-1], lineno)
        toks2 = toks2[:-1]
    ops = [_parse_operand(t, lineno) for t in toks2]
    arity = {"mmul": 2, "mmad": 2, "mac": 3, "ntt": 1, "intt": 1, "auto": 2,
             "load": 1, "store": 2, "copy": 1, "sli": 1, "sadd": 2,
             "smul": 2, "loop": 2, "endloop": 0, "skipz": 2}[op]
    ndests = {"store": 0, "endloop": 0, "skipz": 0, "loop": 1}.get(op, 1)
    if len(ops) != arity or len(dests) != ndests:
        raise IrError(f"{op} expects {arity} operands", lineno)
    if op == "auto" and not isinstance(ops[1], Imm):
        raise IrError("auto step must be an immediate", lineno)
    if op == "load" and not isinstance(ops[0], Addr):
        raise IrError("load source must be an address", lineno)
    if op == "store" and not isinstance(ops[1], Addr):
        raise IrError("store target must be an address", lineno)
    for o in ops:
        if isinstance(o, Addr) and o.sym not in prog.dram:
            raise IrError(f"unknown symbol '@{o.sym}'", lineno)
        if isinstance(o, CRef) and o.name not in prog.consts:
            raise IrError(f"unknown constant '!{o.name}'", lineno)
    if op == "loop":
        # loop $i, count: the induction variable is the destination
        dests = dests or ()
        if len(dests) != 1 or not isinstance(dests[0], SRef):
            raise IrError("loop needs a scalar induction variable", lineno)
    return Instr(op, dests, tuple(ops), mod, flags, {}, lineno)


# ---------------------------------------------------------------------------
# printer

def print_instr(i: Instr) -> str:
    opname = i.op + ("." + next(iter(i.flags)) if i.flags else "")
    if i.op == "bconv":
        lhs = " ".join(str(d) for d in i.dests)
        args = " ".join(str(s) for s in i.srcs)
        return (f"{lhs} = bconv {args} : {' '.join(i.meta['src_mods'])} -> "
                f"{' '.join(i.meta['dst_mods'])}")
    parts = [str(s) for s in i.srcs]
    if i.mod:
        parts.append(i.mod)
    rhs = f"{opname} {', '.join(parts)}" if parts else opname
    if i.dests:
        return f"{' '.join(str(d) for d in i.dests)} = {rhs}"
    return rhs


def print_program(p: Program) -> str:
    lines = [f".n {p.n}"]
    for name, m in p.moduli.items():
        lines.append(f".mod {name} {m.q} {m.r_bits}")
    for name, mods in p.bases.items():
        lines.append(f".basis {name} {' '.join(mods)}")
    for sym, count in p.dram.items():
        lines.append(f".dram {sym} {count}")
    for c in p.consts.values():
        suffix = " absorb" if c.absorb else ""
        lines.append(f".const {c.name} {c.mod} {c.value} "
                     f"{REPR_NAMES[c.repr]}{suffix}")
    lines += [print_instr(i) for i in p.instrs]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# memory image

@dataclass
class MemoryImage:
    """DRAM symbol space of residue polynomials; slots hold one limb each."""

    dram: dict[str, list]

    def clone(self) -> "MemoryImage":
        return MemoryImage({k: list(v) for k, v in self.dram.items()})

    def fetch(self, sym: str, idx: int) -> ResiduePoly:
        if sym not in self.dram:
            raise ExecError(f"unknown symbol @{sym}")
        space = self.dram[sym]
        if not 0 <= idx < len(space):
            raise ExecError(f"@{sym}[{idx}] out of range (size {len(space)})")
        v = space[idx]
        if v is None:
            raise ExecError(f"@{sym}[{idx}] read before write")
        return v

    def put(self, sym: str, idx: int, value: ResiduePoly):
        if sym not in self.dram:
            raise ExecError(f"unknown symbol @{sym}")
        space = self.dram[sym]
        if not 0 <= idx < len(space):
            raise ExecError(f"@{sym}[{idx}] out of range (size {len(space)})")
        space[idx] = value


def blank_image(prog: Program) -> MemoryImage:
    return MemoryImage({sym: [None] * count
                        for sym, count in prog.dram.items()})


# ---------------------------------------------------------------------------
# golden executor

def _const_word(prog: Program, ref: CRef) -> tuple[Word, bool, str]:
    c = prog.consts[ref.name]
    return Word(c.value, c.repr), c.absorb, c.mod


def _operand_value(prog, env, scalars, img, o):
    if isinstance(o, Vreg):
        if str(o) not in env:
            raise ExecError(f"register {o} read before write")
        return env[str(o)]
    if isinstance(o, Addr):
        return img.fetch(o.sym, o.resolve(scalars))
    raise ExecError(f"cannot evaluate operand {o}")


def _fit_modulus(poly: ResiduePoly, m: Modulus, op: str) -> ResiduePoly:
    if poly.modulus.q == m.q:
        return poly
    if op == "mmul" or op == "mac":
        # canonical integers move freely between moduli
        return _reinterpret_nm(poly, m)
    raise ExecError(f"{op}: operand modulus {poly.modulus.q} != {m.q}")


def execute_program(prog: Program, img: MemoryImage,
                    trace: list | None = None) -> MemoryImage:
    """Run a program against a copy of the image and return the result."""
    img = img.clone()
    for sym, count in prog.dram.items():
        if sym not in img.dram:
            img.dram[sym] = [None] * count
    env: dict = {}
    scalars: dict[str, int] = {}
    instrs = prog.instrs
    # match loop bounds
    ends = {}
    stack = []
    for idx, i in enumerate(instrs):
        if i.op == "loop":
            stack.append(idx)
        elif i.op == "endloop":
            ends[stack.pop()] = idx

    def sval(o):
        if isinstance(o, Imm):
            return o.val
        if isinstance(o, SRef):
            if str(o) not in scalars:
                raise ExecError(f"scalar {o} read before write")
            return scalars[str(o)]
        raise ExecError(f"expected scalar operand, got {o}")

    def run(lo: int, hi: int):
        pc = lo
        while pc < hi:
            i = instrs[pc]
            if trace is not None:
                trace.append(i)
            if i.op == "loop":
                var = str(i.dests[0])
                count = sval(i.srcs[1]) if len(i.srcs) > 1 else sval(i.srcs[0])
                start = sval(i.srcs[0]) if len(i.srcs) > 1 else 0
                for it in range(count):
                    scalars[var] = start + it
                    run(pc + 1, ends[pc])
                pc = ends[pc] + 1
                continue
            if i.op == "endloop":
                pc += 1
                continue
            if i.op == "skipz":
                if sval(i.srcs[0]) == 0:
                    pc += 1 + sval(i.srcs[1])
                else:
                    pc += 1
                continue
            _step(prog, i, env, scalars, img)
            pc += 1

    run(0, len(instrs))
    return img


def _step(prog: Program, i: Instr, env, scalars, img: MemoryImage):
    def val(o):
        return _operand_value(prog, env, scalars, img, o)

    def setd(v):
        d = i.dests[0]
        if isinstance(d, Addr):
            # streaming sink: result flows straight to DRAM
            img.put(d.sym, d.resolve(scalars), v)
        else:
            env[str(d)] = v

    op = i.op
    if op in ("sli", "sadd", "smul"):
        def s(o):
            return o.val if isinstance(o, Imm) else scalars[str(o)]
        if op == "sli":
            scalars[str(i.dests[0])] = s(i.srcs[0])
        elif op == "sadd":
            scalars[str(i.dests[0])] = s(i.srcs[0]) + s(i.srcs[1])
        else:
            scalars[str(i.dests[0])] = s(i.srcs[0]) * s(i.srcs[1])
        return
    if op == "load":
        a = i.srcs[0]
        setd(img.fetch(a.sym, a.resolve(scalars)))
        return
    if op == "store":
        a = i.srcs[1]
        img.put(a.sym, a.resolve(scalars), val(i.srcs[0]))
        return
    if op == "copy":
        setd(val(i.srcs[0]))
        return
    m = prog.moduli[i.mod] if i.mod else None
    if op == "ntt":
        setd(ntt_fwd(val(i.srcs[0])))
        return
    if op == "intt":
        setd(ntt_inv(val(i.srcs[0]), defer_scale="defer" in i.flags))
        return
    if op == "auto":
        setd(automorphism_ntt(val(i.srcs[0]), i.srcs[1].val))
        return
    if op in ("mmul", "mmad", "mac"):
        bsrc = i.srcs[-1]
        if isinstance(bsrc, CRef):
            b, absorb, cmod = _const_word(prog, bsrc)
            if cmod != i.mod:
                raise ExecError(f"constant !{bsrc.name} is for modulus "
                                f"{cmod}, not {i.mod}")
        else:
            b, absorb = val(bsrc), False
            if isinstance(b, ResiduePoly):
                b = _fit_modulus(b, m, op)
        if op == "mmul":
            a = _fit_modulus(val(i.srcs[0]), m, op)
            setd(vec_mmul(a, b, absorb_deferred=absorb))
        elif op == "mmad":
            setd(vec_madd(val(i.srcs[0]), b))
        else:
            acc = val(i.srcs[0])
            x = _fit_modulus(val(i.srcs[1]), m, op)
            setd(mac_fused(acc, x, b))
        return
    if op == "bconv":
        _exec_bconv(prog, i, env, scalars, img)
        return
    raise ExecError(f"opcode {op} has no executor semantics")


def _exec_bconv(prog, i, env, scalars, img):
    # reference semantics for the high-level op (pre-lowering programs):
    # identical to the lowered micro-op sequence by Montgomery associativity
    from .poly import (RnsPoly, _bconv_stage2, bconv_merged,
                       make_bconv_tables, vec_mmul)
    from .rns import NM, SM, RnsBasis
    src = RnsBasis(tuple(prog.moduli[m] for m in i.meta["src_mods"]))
    dst = RnsBasis(tuple(prog.moduli[m] for m in i.meta["dst_mods"]))
    limbs = tuple(_operand_value(prog, env, scalars, img, s) for s in i.srcs)
    tables = make_bconv_tables(src, dst)
    if any(p.repr != SM for p in limbs):
        raise ExecError("bconv expects single-Montgomery source limbs")
    if limbs[0].scale_deferred:
        out = bconv_merged(RnsPoly(src, limbs), tables).limbs
    else:
        # finished-iNTT inputs: plain qhat-inverse constants instead of the
        # merged (qhat_inv / N) ones
        tj = [vec_mmul(limbs[j],
                       Word((tables.stage1_merged[j] * m.n) % m.q, NM))
              for j, m in enumerate(src)]
        out = _bconv_stage2(tj, tables)
    for d, limb in zip(i.dests, out):
        env[str(d)] = limb
