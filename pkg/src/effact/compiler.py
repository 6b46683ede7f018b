"""IR-to-machine compiler: lowering, optimization passes, scheduling,
SRAM allocation, and streaming-merge.

Pipeline (see compile()):

    parse -> unroll -> lower -> propagate -> pre -> peephole_merge
          -> schedule -> merge_streaming -> alloc_sram -> spill re-merge

Every pass consumes and produces a Program and is semantics-preserving
under the golden executor; copy removal before allocation is mandatory
because the machine instruction set has no register-move opcode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .ir import (
    Addr,
    CRef,
    ConstDef,
    Imm,
    Instr,
    IrError,
    Program,
    SRef,
    Vreg,
    parse_ir,
)
from .poly import make_bconv_tables
from .rns import DM, NM, SM, ReprError, RnsBasis, compose_repr, mont_mul, sm_encode

# ops executed on vector function units (streaming-merge candidates)
FU_OPS = {"mmul", "mmad", "mac", "ntt", "intt", "auto"}

_FU_CLASS = {"ntt": "ntt", "intt": "ntt", "mmul": "mmul", "mac": "mmul",
             "mmad": "madd", "auto": "auto",
             "load": "dram", "store": "dram", "copy": "madd"}


# ---------------------------------------------------------------------------
# hardware description

@dataclass(frozen=True)
class HardwareDescription:
    lanes: int = 128
    slots: int = 64               # SRAM capacity, in residue polynomials
    banks: int = 8
    dram_bw: int = 64             # bytes per cycle
    fu: tuple = (("ntt", 2), ("mmul", 4), ("madd", 4), ("auto", 1))
    ntt_pipelines: int = 4
    fifo_depth: int = 8
    streaming: bool = True
    lat_override: tuple = ()      # ((opname, cycles), ...)

    def __post_init__(self):
        counts = dict(self.fu)
        if self.slots < 2:
            raise ValueError("need at least 2 SRAM slots")
        for name in ("lanes", "banks", "dram_bw", "ntt_pipelines",
                     "fifo_depth"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for k in ("ntt", "mmul", "madd", "auto"):
            if counts.get(k, 0) <= 0:
                raise ValueError(f"need at least one {k} unit")

    def fu_count(self, cls: str) -> int:
        return dict(self.fu).get(cls, 1)

    def lat(self, op: str, n: int) -> int:
        over = dict(self.lat_override)
        if op in over:
            return over[op]
        base = max(1, -(-n // self.lanes))
        if op in ("ntt", "intt"):
            stages = max(1, int(math.log2(n)))
            return max(1, base * stages // self.ntt_pipelines)
        if op in ("load", "store"):
            return 100 + max(1, 8 * n // self.dram_bw)
        return base


def parse_hw(text: str) -> HardwareDescription:
    """key = value description; fu.<class> and lat.<op> set table entries."""
    kw: dict = {}
    fu = dict(HardwareDescription.fu)
    lat = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"hw line {lineno}: expected key = value")
        key, val = (t.strip() for t in line.split("=", 1))
        if key == "streaming":
            kw[key] = val.lower() in ("1", "true", "yes", "on")
        elif key.startswith("fu."):
            fu[key[3:]] = int(val)
        elif key.startswith("lat."):
            lat[key[4:]] = int(val)
        elif key in ("lanes", "slots", "banks", "dram_bw", "ntt_pipelines",
                     "fifo_depth"):
            kw[key] = int(val)
        else:
            raise ValueError(f"hw line {lineno}: unknown key '{key}'")
    return HardwareDescription(fu=tuple(fu.items()),
                               lat_override=tuple(lat.items()), **kw)


# ---------------------------------------------------------------------------
# small helpers

def _resolve_addr(a: Addr, scalars) -> Addr:
    return a if a.concrete else Addr(a.sym, a.resolve(scalars))


def _use_counts(p: Program) -> dict[str, int]:
    uses: dict[str, int] = {}
    for i in p.instrs:
        for s in i.srcs:
            if isinstance(s, Vreg):
                uses[str(s)] = uses.get(str(s), 0) + 1
    return uses


def _def_index(p: Program) -> dict[str, int]:
    defs = {}
    for idx, i in enumerate(p.instrs):
        for d in i.dests:
            if isinstance(d, Vreg):
                defs[str(d)] = idx
    return defs


def _sub_srcs(i: Instr, table: dict) -> Instr:
    srcs = tuple(table.get(str(s), s) if isinstance(s, Vreg) else s
                 for s in i.srcs)
    return i.with_(srcs=srcs) if srcs != i.srcs else i


def _intern_const(p: Program, hint: str, mod: str, value: int, rep: int,
                  absorb: bool, interned: dict) -> CRef:
    key = (mod, value, rep, absorb)
    if key in interned:
        return CRef(interned[key])
    name, k = hint, 0
    while name in p.consts:
        k += 1
        name = f"{hint}{k}"
    p.consts[name] = ConstDef(name, mod, value, rep, absorb)
    interned[key] = name
    return CRef(name)


# ---------------------------------------------------------------------------
# unrolling: resolve loops, scalar arithmetic, and address expressions

def unroll(p: Program) -> Program:
    out = p.clone()
    out.instrs = []
    scalars: dict[str, int] = {}
    renames: dict[str, str] = {}
    counter = [0]
    instrs = p.instrs
    ends, stack = {}, []
    for idx, i in enumerate(instrs):
        if i.op == "loop":
            stack.append(idx)
        elif i.op == "endloop":
            ends[stack.pop()] = idx

    def sval(o):
        if isinstance(o, Imm):
            return o.val
        if isinstance(o, SRef) and str(o) in scalars:
            return scalars[str(o)]
        raise IrError(f"scalar {o} is not statically known", getattr(o, "line", 0))

    def emit(i: Instr):
        srcs = []
        for s in i.srcs:
            if isinstance(s, Vreg):
                srcs.append(Vreg(renames.get(str(s), str(s))))
            elif isinstance(s, Addr):
                srcs.append(_resolve_addr(s, scalars))
            else:
                srcs.append(s)
        dests = []
        for d in i.dests:
            if isinstance(d, Vreg):
                counter[0] += 1
                fresh = f"{d}.{counter[0]}"
                renames[str(d)] = fresh
                dests.append(Vreg(fresh))
            elif isinstance(d, Addr):
                dests.append(_resolve_addr(d, scalars))
            else:
                dests.append(d)
        out.instrs.append(i.with_(srcs=tuple(srcs), dests=tuple(dests)))

    def run(lo, hi):
        pc = lo
        while pc < hi:
            i = instrs[pc]
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
                pc += 1 + (sval(i.srcs[1]) if sval(i.srcs[0]) == 0 else 0)
                continue
            if i.op == "sli":
                scalars[str(i.dests[0])] = sval(i.srcs[0])
            elif i.op == "sadd":
                scalars[str(i.dests[0])] = sval(i.srcs[0]) + sval(i.srcs[1])
            elif i.op == "smul":
                scalars[str(i.dests[0])] = sval(i.srcs[0]) * sval(i.srcs[1])
            else:
                emit(i)
            pc += 1

    run(0, len(instrs))
    return out


# ---------------------------------------------------------------------------
# lowering to the machine opcode set

def lower(p: Program, hw: HardwareDescription | None = None) -> Program:
    out = p.clone()
    out.instrs = []
    interned: dict = {}
    # registers carrying a scale-deferred inverse-NTT result (through copies)
    deferred: set[str] = set()
    bconv_site = 0
    tmp = [0]

    def fresh(tag):
        tmp[0] += 1
        return Vreg(f"%{tag}~{tmp[0]}")

    for i in p.instrs:
        if i.op in ("sli", "sadd", "smul", "loop", "endloop", "skipz"):
            raise IrError("scalar control flow must be unrolled before "
                          "lowering", i.line)
        if i.op == "copy":
            if isinstance(i.srcs[0], Vreg) and str(i.srcs[0]) in deferred:
                deferred.add(str(i.dests[0]))
            out.instrs.append(i.with_())
            continue
        if i.op == "intt":
            if "defer" in i.flags:
                deferred.add(str(i.dests[0]))
                out.instrs.append(i.with_())
                continue
            # split into a deferred transform plus one constant multiply so
            # the 1/N factor becomes visible to the merge peephole
            m = p.moduli[i.mod]
            ninv = _intern_const(out, f"__ninv_{i.mod}", i.mod,
                                 sm_encode(m.n_inv, m), SM, True, interned)
            t = fresh("it")
            out.instrs.append(i.with_(dests=(t,),
                                      flags=frozenset(["defer"])))
            out.instrs.append(Instr("mmul", i.dests, (t, ninv), i.mod,
                                    line=i.line))
            continue
        if i.op == "bconv":
            bconv_site += 1
            src_mods = i.meta["src_mods"]
            dst_mods = i.meta["dst_mods"]
            src = RnsBasis(tuple(p.moduli[m] for m in src_mods))
            dst = RnsBasis(tuple(p.moduli[m] for m in dst_mods))
            tables = make_bconv_tables(src, dst)
            is_def = all(isinstance(s, Vreg) and str(s) in deferred
                         for s in i.srcs)
            tj = []
            for j, (s, mname) in enumerate(zip(i.srcs, src_mods)):
                m = src[j]
                if is_def:
                    c = _intern_const(out, f"__bc{bconv_site}s1_{j}", mname,
                                      tables.stage1_merged[j], NM, True,
                                      interned)
                else:
                    plain = (tables.stage1_merged[j] * m.n) % m.q
                    c = _intern_const(out, f"__bc{bconv_site}s1_{j}", mname,
                                      plain, NM, False, interned)
                t = fresh("t")
                out.instrs.append(Instr("mmul", (t,), (s, c), mname,
                                        meta={"bc": True}, line=i.line))
                tj.append(t)
            for k, (d, mname) in enumerate(zip(i.dests, dst_mods)):
                acc = None
                for j in range(len(src)):
                    c = _intern_const(out, f"__bc{bconv_site}s2_{j}_{k}",
                                      mname, tables.stage2[j][k], DM, False,
                                      interned)
                    last = j == len(src) - 1
                    term = d if last and acc is None else fresh("bt")
                    out.instrs.append(Instr("mmul", (term,), (tj[j], c),
                                            mname, meta={"bc": True},
                                            line=i.line))
                    if acc is None:
                        acc = term
                    else:
                        nxt = d if last else fresh("ba")
                        out.instrs.append(Instr("mmad", (nxt,), (acc, term),
                                                mname, meta={"bc": True},
                                                line=i.line))
                        acc = nxt
            continue
        out.instrs.append(i.with_())
    return out


# ---------------------------------------------------------------------------
# copy and constant propagation

def propagate(p: Program) -> Program:
    out = p.clone()
    table: dict[str, object] = {}
    instrs = []
    for i in out.instrs:
        i = _sub_srcs(i, table)
        if i.op == "copy" and i.dests and isinstance(i.dests[0], Vreg):
            src = i.srcs[0]
            table[str(i.dests[0])] = table.get(str(src), src) \
                if isinstance(src, Vreg) else src
            continue
        instrs.append(i)
    out.instrs = instrs
    return out


# ---------------------------------------------------------------------------
# partial redundancy elimination (value numbering + pure-op DCE)

def _operand_key(o, vn):
    if isinstance(o, Vreg):
        return ("v", vn.get(str(o), str(o)))
    if isinstance(o, CRef):
        return ("c", o.name)
    if isinstance(o, Imm):
        return ("i", o.val)
    return ("x", str(o))


def pre(p: Program) -> Program:
    from .ir import PURE_OPS, SCALAR_OPS
    if any(i.op in SCALAR_OPS for i in p.instrs):
        return p.clone()    # only straight-line code is analyzed
    out = p.clone()
    seen: dict = {}
    vn: dict[str, str] = {}
    repl: dict[str, Vreg] = {}
    instrs = []
    for i in out.instrs:
        i = _sub_srcs(i, repl)
        pure = (i.op in PURE_OPS and len(i.dests) == 1
                and isinstance(i.dests[0], Vreg)
                and not any(isinstance(s, Addr) for s in i.srcs))
        if not pure:
            instrs.append(i)
            continue
        key = (i.op, tuple(sorted(i.flags)), i.mod,
               tuple(_operand_key(s, vn) for s in i.srcs))
        dest = str(i.dests[0])
        if key in seen:
            prior = seen[key]
            vn[dest] = prior
            repl[dest] = Vreg(prior)
            continue
        seen[key] = dest
        vn[dest] = dest
        instrs.append(i)
    # dead-code elimination over pure ops
    live = set()
    for i in instrs:
        for s in i.srcs:
            if isinstance(s, Vreg):
                live.add(str(s))
    kept = []
    for i in reversed(instrs):
        if (i.op in PURE_OPS and i.dests and isinstance(i.dests[0], Vreg)
                and str(i.dests[0]) not in live):
            continue
        kept.append(i)
        for s in i.srcs:
            if isinstance(s, Vreg):
                live.add(str(s))
    out.instrs = list(reversed(kept))
    return out


# ---------------------------------------------------------------------------
# computation-merge peephole

def _try_fold_consts(p: Program, prod: Instr, cons: Instr, interned) \
        -> Instr | None:
    """mmul(mmul(x, !c1), !c2), same modulus -> mmul(x, !c1*c2*R^-1)."""
    if prod.mod != cons.mod:
        return None
    c1 = p.consts[prod.srcs[1].name]
    c2 = p.consts[cons.srcs[1].name]
    try:
        rep = compose_repr(c1.repr, c2.repr)
    except ReprError:
        return None
    m = p.moduli[prod.mod]
    folded = mont_mul(c1.value, c2.value, m)
    c = _intern_const(p, f"__mrg_{prod.srcs[1].name}_{cons.srcs[1].name}",
                      prod.mod, folded, rep, c1.absorb or c2.absorb, interned)
    meta = {"bc": True} if prod.meta.get("bc") or cons.meta.get("bc") else {}
    return cons.with_(srcs=(prod.srcs[0], c), meta=meta)


def peephole_merge(p: Program) -> Program:
    out = p.clone()
    interned = {(c.mod, c.value, c.repr, c.absorb): c.name
                for c in out.consts.values()}
    changed = True
    while changed:
        changed = False
        uses = _use_counts(out)
        defs = {}
        for idx, i in enumerate(out.instrs):
            for d in i.dests:
                if isinstance(d, Vreg):
                    defs[str(d)] = idx
        kill = set()
        instrs = out.instrs
        for idx, i in enumerate(instrs):
            if idx in kill:
                continue
            # fold chained constant multiplies
            if (i.op == "mmul" and isinstance(i.srcs[1], CRef)
                    and isinstance(i.srcs[0], Vreg)
                    and uses.get(str(i.srcs[0])) == 1):
                j = defs.get(str(i.srcs[0]))
                prod = instrs[j] if j is not None else None
                if (prod is not None and j not in kill and prod.op == "mmul"
                        and isinstance(prod.srcs[1], CRef)
                        and isinstance(prod.srcs[0], (Vreg, Addr))):
                    folded = _try_fold_consts(out, prod, i, interned)
                    if folded is not None:
                        instrs[idx] = folded
                        kill.add(j)
                        changed = True
                        continue
            # fuse a single-use multiply feeding an accumulate into a MAC
            if i.op == "mmad":
                for pos in (1, 0):
                    s = i.srcs[pos]
                    if not (isinstance(s, Vreg) and uses.get(str(s)) == 1):
                        continue
                    j = defs.get(str(s))
                    prod = instrs[j] if j is not None else None
                    if (prod is None or j in kill or prod.op != "mmul"
                            or prod.mod != i.mod
                            or not isinstance(prod.srcs[0], (Vreg, Addr))):
                        continue
                    b = prod.srcs[1]
                    if isinstance(b, CRef) and out.consts[b.name].absorb:
                        continue
                    acc = i.srcs[1 - pos]
                    meta = {"bc": True} if (prod.meta.get("bc")
                                            or i.meta.get("bc")) else {}
                    instrs[idx] = i.with_(op="mac", meta=meta,
                                          srcs=(acc, prod.srcs[0], b))
                    kill.add(j)
                    changed = True
                    break
        if kill:
            out.instrs = [ins for k, ins in enumerate(instrs)
                          if k not in kill]
    return out


# ---------------------------------------------------------------------------
# dependence graph + list scheduling

def _mem_accesses(i: Instr):
    reads, writes = [], []
    if i.op == "load":
        reads.append(i.srcs[0])
    elif i.op == "store":
        writes.append(i.srcs[1])
        if isinstance(i.srcs[0], Addr):
            reads.append(i.srcs[0])
    else:
        for s in i.srcs:
            if isinstance(s, Addr):
                reads.append(s)
    for d in i.dests:
        if isinstance(d, Addr):
            writes.append(d)
    return reads, writes


def _addr_key(a: Addr):
    # unknown (non-constant) addresses conservatively alias everything
    return (a.sym, a.base) if a.concrete else None


def build_deps(p: Program) -> list[set[int]]:
    """preds[k] = indices that must complete before instruction k."""
    preds: list[set[int]] = [set() for _ in p.instrs]
    last_def: dict[str, int] = {}
    last_write: dict = {}
    readers: dict = {}
    wild_writes: list[int] = []
    wild_reads: list[int] = []
    for idx, i in enumerate(p.instrs):
        for s in i.srcs:
            if isinstance(s, Vreg) and str(s) in last_def:
                preds[idx].add(last_def[str(s)])
        reads, writes = _mem_accesses(i)
        for a in reads:
            key = _addr_key(a)
            if key is None:
                preds[idx].update(wild_writes)
                preds[idx].update(last_write.values())
                wild_reads.append(idx)
            else:
                if key in last_write:
                    preds[idx].add(last_write[key])
                preds[idx].update(wild_writes)
                readers.setdefault(key, []).append(idx)
        for a in writes:
            key = _addr_key(a)
            if key is None:
                for vals in readers.values():
                    preds[idx].update(vals)
                preds[idx].update(last_write.values())
                preds[idx].update(wild_reads)
                wild_writes.append(idx)
            else:
                if key in last_write:
                    preds[idx].add(last_write[key])
                for r in readers.pop(key, []):
                    preds[idx].add(r)
                preds[idx].update(wild_reads)
                last_write[key] = idx
        for d in i.dests:
            if isinstance(d, Vreg):
                last_def[str(d)] = idx
        preds[idx].discard(idx)
    return preds


def critical_path(p: Program, hw: HardwareDescription) -> int:
    preds = build_deps(p)
    finish = [0] * len(p.instrs)
    for idx, i in enumerate(p.instrs):
        start = max((finish[j] for j in preds[idx]), default=0)
        finish[idx] = start + hw.lat(i.op, p.n)
    return max(finish, default=0)


def schedule(p: Program, hw: HardwareDescription) -> Program:
    from .ir import SCALAR_OPS
    if any(i.op in SCALAR_OPS for i in p.instrs):
        raise IrError("cannot schedule programs with scalar control flow")
    out = p.clone()
    n_instr = len(out.instrs)
    preds = build_deps(out)
    succs: list[list[int]] = [[] for _ in range(n_instr)]
    for idx, ps in enumerate(preds):
        for j in ps:
            succs[j].append(idx)
    lat = [hw.lat(i.op, out.n) for i in out.instrs]
    # priority: longest latency-weighted path to any exit
    prio = [0] * n_instr
    for idx in range(n_instr - 1, -1, -1):
        prio[idx] = lat[idx] + max((prio[s] for s in succs[idx]), default=0)

    remaining = [len(ps) for ps in preds]
    ready_at = [0] * n_instr        # max finish time of predecessors
    ready = [idx for idx in range(n_instr) if remaining[idx] == 0]
    fu_free: dict[str, list[int]] = {}
    order, cycles = [], {}
    while ready:
        ready.sort(key=lambda k: (-prio[k], k))
        idx = ready.pop(0)
        i = out.instrs[idx]
        cls = _FU_CLASS.get(i.op, "madd")
        pool = fu_free.setdefault(
            cls, [0] * (1 if cls == "dram" else hw.fu_count(cls)))
        u = min(range(len(pool)), key=lambda k: pool[k])
        start = max(ready_at[idx], pool[u])
        pool[u] = start + lat[idx]
        cycles[idx] = start
        order.append(idx)
        for s in succs[idx]:
            ready_at[s] = max(ready_at[s], start + lat[idx])
            remaining[s] -= 1
            if remaining[s] == 0:
                ready.append(s)
    if len(order) != n_instr:
        raise IrError("cyclic dependence in program")
    order.sort(key=lambda k: (cycles[k], k))
    out.instrs = [out.instrs[k].with_(meta={"cycle": cycles[k]})
                  for k in order]
    cp = critical_path(out, hw)
    makespan = max((cycles[k] + lat[k] for k in range(n_instr)), default=0)
    assert makespan >= cp
    out.notes["critical_path"] = cp
    out.notes["makespan"] = makespan
    out.form = "scheduled"
    return out


# ---------------------------------------------------------------------------
# streaming merges (pre-allocation, SSA level)

def merge_streaming(p: Program, hw: HardwareDescription) -> Program:
    out = p.clone()
    instrs = out.instrs
    uses = _use_counts(out)
    defs = _def_index(out)
    consumers: dict[str, list[int]] = {}
    for idx, i in enumerate(instrs):
        for s in i.srcs:
            if isinstance(s, Vreg):
                consumers.setdefault(str(s), []).append(idx)

    def cell_written_between(key, lo, hi):
        for k in range(lo + 1, hi):
            _, writes = _mem_accesses(instrs[k])
            for a in writes:
                if _addr_key(a) in (key, None):
                    return True
        return False

    def cell_touched_between(key, lo, hi):
        for k in range(lo + 1, hi):
            reads, writes = _mem_accesses(instrs[k])
            for a in reads + writes:
                if _addr_key(a) in (key, None):
                    return True
        return False

    kill = set()
    # sink merge: single-use FU result stored once goes straight to DRAM
    for idx, i in enumerate(instrs):
        if i.op != "store" or not isinstance(i.srcs[0], Vreg):
            continue
        v = str(i.srcs[0])
        j = defs.get(v)
        if (j is None or uses.get(v) != 1 or instrs[j].op not in FU_OPS
                or j in kill or not isinstance(i.srcs[1], Addr)):
            continue
        key = _addr_key(i.srcs[1])
        if key is None or cell_touched_between(key, j, idx):
            continue
        instrs[j] = instrs[j].with_(dests=(i.srcs[1],))
        kill.add(idx)
    # source merge: single-consumer loads feed their FU directly
    for idx, i in enumerate(instrs):
        if i.op != "load" or idx in kill:
            continue
        v = str(i.dests[0]) if isinstance(i.dests[0], Vreg) else None
        if v is None or uses.get(v) != 1:
            continue
        (cidx,) = consumers[v]
        c = instrs[cidx]
        if c.op not in FU_OPS or cidx in kill:
            continue
        key = _addr_key(i.srcs[0])
        if key is None or cell_written_between(key, idx, cidx):
            continue
        instrs[cidx] = _sub_srcs(c, {v: i.srcs[0]})
        kill.add(idx)
    # FU-to-FU forwarding through a bounded set of fifo channels
    free_fifo = list(range(hw.fifo_depth))
    release: list[tuple[int, int]] = []   # (consumer index, fifo id)
    for idx, i in enumerate(instrs):
        if idx in kill:
            continue
        while release and release[0][0] <= idx:
            free_fifo.append(release.pop(0)[1])
            free_fifo.sort()
        if i.op not in FU_OPS or not i.dests \
                or not isinstance(i.dests[0], Vreg):
            continue
        v = str(i.dests[0])
        if uses.get(v) != 1 or not v.startswith("%"):
            continue
        (cidx,) = consumers[v]
        c = instrs[cidx]
        if c.op not in FU_OPS or cidx in kill or not free_fifo:
            continue
        fid = free_fifo.pop(0)
        reg = Vreg(f"f{fid}")
        instrs[idx] = instrs[idx].with_(dests=(reg,))
        instrs[cidx] = _sub_srcs(instrs[cidx], {v: reg})
        out.fifo_regs.add(str(reg))
        release.append((cidx, fid))
        release.sort()
    out.instrs = [ins for k, ins in enumerate(instrs) if k not in kill]
    return out


# ---------------------------------------------------------------------------
# linear-scan SRAM allocation

def max_liveness(p: Program) -> int:
    """Fewest SRAM slots that admit a spill-free allocation.

    Mirrors the allocator: sources dying at an instruction release their
    slots before the destination is placed.
    """
    uses_at: dict[str, int] = {}
    for idx, i in enumerate(p.instrs):
        for s in i.srcs:
            if isinstance(s, Vreg) and str(s).startswith("%"):
                uses_at[str(s)] = idx
    live, peak = set(), 0
    for idx, i in enumerate(p.instrs):
        peak = max(peak, len(live))
        live -= {v for v, last in uses_at.items() if last == idx}
        dests = {str(d) for d in i.dests
                 if isinstance(d, Vreg) and str(d).startswith("%")}
        live |= dests
        peak = max(peak, len(live))
        live -= {d for d in dests if d not in uses_at}
    return peak


def alloc_sram(p: Program, hw: HardwareDescription,
               slots: int | None = None) -> Program:
    slots = hw.slots if slots is None else slots
    if slots < 2:
        raise IrError("need at least 2 SRAM slots")
    out = p.clone()
    instrs = out.instrs
    # future use positions per virtual register, in scheduled order
    use_pos: dict[str, list[int]] = {}
    for idx, i in enumerate(instrs):
        for s in i.srcs:
            if isinstance(s, Vreg) and str(s).startswith("%"):
                use_pos.setdefault(str(s), []).append(idx)

    reg_of: dict[str, int] = {}      # live vreg -> slot
    holder: dict[int, str] = {}      # slot -> vreg
    free = list(range(slots))
    spill_slot: dict[str, int] = {}
    in_spill = set()
    spills = [0]
    emitted: list[Instr] = []

    def next_use(v, after):
        for u in use_pos.get(v, ()):
            if u >= after:
                return u
        return None

    def take_slot(idx, pinned):
        if free:
            return free.pop(0)
        victims = [v for v in reg_of if v not in pinned
                   and next_use(v, idx) is not None]
        if not victims:
            # values with no later use: drop silently
            dead = [v for v in reg_of if v not in pinned]
            if not dead:
                raise IrError(f"register pressure exceeds {slots} SRAM "
                              "slots at one instruction")
            victim = dead[0]
        else:
            victim = max(victims, key=lambda v: (next_use(v, idx), v))
        slot = reg_of.pop(victim)
        del holder[slot]
        if victim not in in_spill and next_use(victim, idx) is not None:
            if victim not in spill_slot:
                spill_slot[victim] = len(spill_slot)
            emitted.append(Instr("store", (), (Vreg(f"r{slot}"),
                                 Addr("__spill", spill_slot[victim]))))
            in_spill.add(victim)
            spills[0] += 1
        return slot

    def phys(v):
        return Vreg(f"r{reg_of[v]}")

    for idx, i in enumerate(instrs):
        pinned = set()
        # reload spilled sources
        for s in i.srcs:
            if not (isinstance(s, Vreg) and str(s).startswith("%")):
                continue
            v = str(s)
            if v not in reg_of:
                if v not in in_spill:
                    raise IrError(f"register {v} used before definition")
                slot = take_slot(idx, pinned)
                reg_of[v] = slot
                holder[slot] = v
                emitted.append(Instr("load", (Vreg(f"r{slot}"),),
                                     (Addr("__spill", spill_slot[v]),)))
                spills[0] += 1
            pinned.add(v)
        new_srcs = tuple(phys(str(s))
                         if isinstance(s, Vreg) and str(s).startswith("%")
                         else s for s in i.srcs)
        # expire sources whose last use is here
        for s in i.srcs:
            if isinstance(s, Vreg) and str(s).startswith("%"):
                v = str(s)
                if next_use(v, idx + 1) is None and v in reg_of:
                    free.append(reg_of[v])
                    free.sort()
                    del holder[reg_of[v]]
                    del reg_of[v]
        new_dests = []
        for d in i.dests:
            if isinstance(d, Vreg) and str(d).startswith("%"):
                v = str(d)
                slot = take_slot(idx, pinned)
                reg_of[v] = slot
                holder[slot] = v
                new_dests.append(Vreg(f"r{slot}"))
            else:
                new_dests.append(d)
        emitted.append(i.with_(srcs=new_srcs, dests=tuple(new_dests)))
        # a result with no consumers frees its slot immediately
        for d in i.dests:
            if isinstance(d, Vreg) and str(d).startswith("%"):
                v = str(d)
                if next_use(v, idx + 1) is None:
                    free.append(reg_of[v])
                    free.sort()
                    del holder[reg_of[v]]
                    del reg_of[v]
    out.instrs = emitted
    if spill_slot:
        out.dram["__spill"] = len(spill_slot)
    out.notes["spills"] = spills[0]
    out.notes["max_live"] = max_liveness(p)
    out.form = "allocated"
    return out


# ---------------------------------------------------------------------------
# post-allocation spill re-merge (streaming the spill traffic)

def merge_spill_traffic(p: Program) -> Program:
    out = p.clone()
    instrs = out.instrs

    def reads_reg(i, r):
        return any(isinstance(s, Vreg) and str(s) == r for s in i.srcs)

    def writes_reg(i, r):
        return any(isinstance(d, Vreg) and str(d) == r for d in i.dests)

    kill = set()
    for idx, i in enumerate(instrs):
        if i.op == "load" and isinstance(i.dests[0], Vreg) \
                and i.srcs[0].sym == "__spill":
            r = str(i.dests[0])
            consumer = None
            ok = True
            for k in range(idx + 1, len(instrs)):
                if reads_reg(instrs[k], r):
                    if consumer is not None:
                        ok = False
                        break
                    consumer = k
                if writes_reg(instrs[k], r):
                    break
            if ok and consumer is not None and consumer not in kill \
                    and instrs[consumer].op in FU_OPS:
                instrs[consumer] = _sub_srcs(instrs[consumer],
                                             {r: i.srcs[0]})
                kill.add(idx)
        elif i.op == "store" and isinstance(i.srcs[0], Vreg) \
                and i.srcs[1].sym == "__spill":
            r = str(i.srcs[0])
            producer = None
            for k in range(idx - 1, -1, -1):
                if writes_reg(instrs[k], r):
                    producer = k
                    break
                if reads_reg(instrs[k], r):
                    producer = None
                    break
            if producer is None or producer in kill \
                    or instrs[producer].op not in FU_OPS:
                continue
            # the register must not be read again before its next write
            used_later = False
            for k in range(idx + 1, len(instrs)):
                if reads_reg(instrs[k], r):
                    used_later = True
                    break
                if writes_reg(instrs[k], r):
                    break
            if used_later:
                continue
            # no other read of the register between producer and store
            if any(reads_reg(instrs[k], r) for k in range(producer + 1, idx)):
                continue
            instrs[producer] = instrs[producer].with_(dests=(i.srcs[1],))
            kill.add(idx)
    out.instrs = [ins for k, ins in enumerate(instrs) if k not in kill]
    return out


# ---------------------------------------------------------------------------
# driver

def compile_program(src, hw: HardwareDescription | None = None, *,
                    do_propagate: bool = True, do_pre: bool = True,
                    do_merge: bool = True, streaming: bool | None = None,
                    slots: int | None = None) -> Program:
    hw = hw or HardwareDescription()
    stream = hw.streaming if streaming is None else streaming
    p = parse_ir(src) if isinstance(src, str) else src
    p = unroll(p)
    p = lower(p, hw)
    if do_propagate:
        p = propagate(p)
    if do_pre:
        p = pre(p)
    if do_merge:
        p = peephole_merge(p)
    # machine code has no register move, so copies always die here
    p = propagate(p)
    p = schedule(p, hw)
    if stream:
        p = merge_streaming(p, hw)
    p = alloc_sram(p, hw, slots)
    if stream:
        p = merge_spill_traffic(p)
    p.notes["streaming"] = stream
    p.form = "machine"
    return p
