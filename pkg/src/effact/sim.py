"""Deterministic performance model of the accelerator.

Scoreboard-style simulation over machine programs: per-class function
units (with MAC routable to either the multiplier array or the NTT
datapath), a bandwidth-limited DRAM channel with a fixed base latency,
SRAM bank-conflict serialization, and element-granularity streaming where
merged operands flow between DRAM and function units without parking in
SRAM.  Reports cycles, busy counts, utilizations, and DRAM traffic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .compiler import (
    FU_OPS,
    HardwareDescription,
    _addr_key,
    _mem_accesses,
    compile_program,
    critical_path,
)
from .ir import Addr, Instr, Program, Vreg

_WORD_BYTES = 8


@dataclass
class SimReport:
    cycles: int
    fu_busy: dict[str, int]
    fu_count: dict[str, int]
    dram_load_bytes: int
    dram_store_bytes: int
    dram_stream_bytes: int
    bank_conflicts: int
    fifo_peak: int
    critical_path: int
    instructions: int
    trace: list = field(default_factory=list)

    @property
    def dram_bytes(self) -> int:
        return (self.dram_load_bytes + self.dram_store_bytes
                + self.dram_stream_bytes)

    def utilization(self, cls: str) -> float:
        if self.cycles == 0:
            return 0.0
        return self.fu_busy[cls] / (self.cycles * self.fu_count[cls])

    @property
    def fu_utilization(self) -> float:
        """Aggregate compute-unit utilization (DRAM excluded)."""
        busy = sum(v for k, v in self.fu_busy.items() if k != "dram")
        cap = self.cycles * sum(v for k, v in self.fu_count.items()
                                if k != "dram")
        return busy / cap if cap else 0.0

    @property
    def dram_utilization(self) -> float:
        return self.fu_busy["dram"] / self.cycles if self.cycles else 0.0

    def to_dict(self) -> dict:
        return {
            "cycles": self.cycles,
            "critical_path": self.critical_path,
            "instructions": self.instructions,
            "fu_busy": dict(self.fu_busy),
            "fu_count": dict(self.fu_count),
            "fu_utilization": round(self.fu_utilization, 6),
            "dram_utilization": round(self.dram_utilization, 6),
            "dram_bytes": self.dram_bytes,
            "dram_load_bytes": self.dram_load_bytes,
            "dram_store_bytes": self.dram_store_bytes,
            "dram_stream_bytes": self.dram_stream_bytes,
            "bank_conflicts": self.bank_conflicts,
            "fifo_peak": self.fifo_peak,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _fu_class(op: str, mac_unit: str) -> str:
    table = {"ntt": "ntt", "intt": "ntt", "mmul": "mmul", "mmad": "madd",
             "auto": "auto", "load": "dram", "store": "dram",
             "mac": mac_unit}
    return table[op]


_DRAM_BASE = 100


def _sim_deps(p: Program) -> list[set[int]]:
    """Timing-order predecessors: register RAW/WAR/WAW plus memory order."""
    preds: list[set[int]] = [set() for _ in p.instrs]
    last_def: dict[str, int] = {}
    readers_of: dict[str, list[int]] = {}
    last_write: dict = {}
    mem_readers: dict = {}
    for idx, i in enumerate(p.instrs):
        for s in i.srcs:
            if isinstance(s, Vreg):
                r = str(s)
                if r in last_def:
                    preds[idx].add(last_def[r])
                readers_of.setdefault(r, []).append(idx)
        reads, writes = _mem_accesses(i)
        for a in reads:
            key = _addr_key(a)
            if key in last_write:
                preds[idx].add(last_write[key])
            mem_readers.setdefault(key, []).append(idx)
        for a in writes:
            key = _addr_key(a)
            if key in last_write:
                preds[idx].add(last_write[key])
            preds[idx].update(mem_readers.pop(key, ()))
            last_write[key] = idx
        for d in i.dests:
            if isinstance(d, Vreg):
                r = str(d)
                if r in last_def:
                    preds[idx].add(last_def[r])
                preds[idx].update(readers_of.pop(r, ()))
                last_def[r] = idx
        preds[idx].discard(idx)
    return preds


def _check_resources(p: Program, hw: HardwareDescription):
    for i in p.instrs:
        for o in list(i.srcs) + list(i.dests):
            if isinstance(o, Vreg):
                name = str(o)
                if name.startswith("r") and int(name[1:]) >= hw.slots:
                    raise ValueError(f"register {name} exceeds the "
                                     f"{hw.slots}-slot SRAM")
                if name.startswith("f") and int(name[1:]) >= hw.fifo_depth:
                    raise ValueError(f"fifo channel {name} exceeds depth "
                                     f"{hw.fifo_depth}")


def simulate(p: Program, hw: HardwareDescription,
             mac_unit: str = "mmul", want_trace: bool = False) -> SimReport:
    if mac_unit not in ("mmul", "ntt"):
        raise ValueError("mac_unit must be 'mmul' or 'ntt'")
    _check_resources(p, hw)
    n = p.n
    xfer = max(1, -(-_WORD_BYTES * n // hw.dram_bw))
    preds = _sim_deps(p)

    pools: dict[str, list[int]] = {
        cls: [0] * hw.fu_count(cls) for cls in ("ntt", "mmul", "madd", "auto")
    }
    busy = {cls: 0 for cls in pools}
    busy["dram"] = 0
    channel_free = 0
    complete = [0] * len(p.instrs)
    load_b = store_b = stream_b = 0
    conflicts_total = 0
    fifo_events: list[tuple[int, int]] = []   # (cycle, +1/-1)
    trace = []

    def dram_slot(req: int) -> int:
        nonlocal channel_free
        start = max(req, channel_free)
        channel_free = start + xfer
        busy["dram"] += xfer
        return start

    for idx, i in enumerate(p.instrs):
        ready = max((complete[j] for j in preds[idx]), default=0)
        if i.op == "load":
            s = dram_slot(ready)
            complete[idx] = s + _DRAM_BASE + xfer
            load_b += _WORD_BYTES * n
        elif i.op == "store":
            s = dram_slot(ready)
            complete[idx] = s + _DRAM_BASE + xfer
            store_b += _WORD_BYTES * n
        else:
            cls = _fu_class(i.op, mac_unit)
            lat_op = "mmul" if i.op == "mac" else i.op
            lat = hw.lat(lat_op, n)
            pool = pools[cls]
            u = min(range(len(pool)), key=lambda k: pool[k])
            start = max(ready, pool[u])
            # streaming sources: the unit starts once first elements arrive
            for a in i.srcs:
                if isinstance(a, Addr):
                    s0 = dram_slot(ready)
                    stream_b += _WORD_BYTES * n
                    start = max(start, s0 + _DRAM_BASE)
            # SRAM bank conflicts serialize same-cycle accesses to
            # distinct slots that share a bank
            slots_used = {int(str(o)[1:])
                          for o in list(i.srcs) + list(i.dests)
                          if isinstance(o, Vreg) and str(o).startswith("r")}
            banks = [s % hw.banks for s in slots_used]
            conf = len(banks) - len(set(banks))
            conflicts_total += conf
            end = start + lat + conf
            pool[u] = end
            busy[cls] += lat + conf
            complete[idx] = end
            # streaming sinks: results drain to DRAM as they are produced
            for d in i.dests:
                if isinstance(d, Addr):
                    s0 = dram_slot(start)
                    stream_b += _WORD_BYTES * n
                    complete[idx] = max(end, s0 + _DRAM_BASE + xfer)
            for d in i.dests:
                if isinstance(d, Vreg) and str(d).startswith("f"):
                    fifo_events.append((complete[idx], 1))
            for s_ in i.srcs:
                if isinstance(s_, Vreg) and str(s_).startswith("f"):
                    fifo_events.append((start, -1))
        if want_trace:
            trace.append({"index": idx, "op": i.op,
                          "complete": complete[idx]})

    cycles = max(complete, default=0)
    fifo_peak = 0
    occ = 0
    for _, delta in sorted(fifo_events, key=lambda e: (e[0], -e[1])):
        occ += delta
        fifo_peak = max(fifo_peak, occ)
    cp = critical_path(p, hw)
    fu_count = {cls: hw.fu_count(cls) for cls in pools}
    fu_count["dram"] = 1
    rep = SimReport(cycles, busy, fu_count, load_b, store_b, stream_b,
                    conflicts_total, fifo_peak, cp, len(p.instrs), trace)
    assert rep.cycles >= rep.critical_path
    assert rep.cycles * hw.dram_bw >= rep.dram_bytes
    return rep


# ---------------------------------------------------------------------------
# experiment drivers

def sweep_sram(src, hw: HardwareDescription, slot_counts,
               mac_unit: str = "mmul") -> list[SimReport]:
    """Recompile and simulate the same IR across SRAM sizes."""
    reports = []
    for slots in slot_counts:
        shw = replace(hw, slots=slots)
        mc = compile_program(src, shw)
        reports.append(simulate(mc, shw, mac_unit))
    return reports


def compare_streaming(src, hw: HardwareDescription,
                      mac_unit: str = "mmul") -> dict:
    """Simulate the same IR compiled with and without streaming merges."""
    on = simulate(compile_program(src, hw, streaming=True), hw, mac_unit)
    off = simulate(compile_program(src, hw, streaming=False), hw, mac_unit)
    return {
        "streaming": on,
        "baseline": off,
        "dram_bytes_saved": off.dram_bytes - on.dram_bytes,
        "dram_bytes_ratio": (on.dram_bytes / off.dram_bytes
                             if off.dram_bytes else 1.0),
        "cycles_saved": off.cycles - on.cycles,
        "cycles_ratio": on.cycles / off.cycles if off.cycles else 1.0,
    }
