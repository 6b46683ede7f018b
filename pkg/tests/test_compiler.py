import random

import pytest

from effact.asm import check_machine_form
from effact.compiler import (
    HardwareDescription,
    alloc_sram,
    build_deps,
    compile_program,
    critical_path,
    lower,
    max_liveness,
    merge_streaming,
    parse_hw,
    peephole_merge,
    pre,
    propagate,
    schedule,
    unroll,
)
from effact.ir import Addr, IrError, Vreg, blank_image, execute_program, parse_ir
from effact.poly import SM, make_poly, ntt_fwd
from effact.rns import make_modulus, make_modulus_chain, sm_encode

N = 16
HW = HardwareDescription(slots=8, fifo_depth=4)


def header(nmods=2, nx=8, ny=8):
    qs = [97, 193, 257, 449][:nmods]
    return (f".n {N}\n" + "".join(f".mod q{i} {q}\n" for i, q in enumerate(qs))
            + f".dram x {nx}\n.dram y {ny}\n")


def seeded_image(prog, rng, sym="x", count=None, mod=None, *, ntt=True):
    img = blank_image(prog)
    m = mod or make_modulus(97, N)
    count = count if count is not None else len(img.dram[sym])
    for k in range(count):
        p = make_poly(m, [rng.randrange(m.q) for _ in range(N)], repr=SM)
        img.dram[sym][k] = ntt_fwd(p) if ntt else p
    return img


def outputs(prog, img, sym="y"):
    res = execute_program(prog, img)
    return [None if v is None else v.to_ints() for v in res.dram[sym]]


def random_program(rng, nmods=2, size=24):
    """Straight-line vector program over NTT-domain SM inputs."""
    qs = ["q0", "q1"][:nmods]
    lines = []
    regs = {q: [] for q in qs}
    consts = []
    for q in qs:
        consts.append(f".const c{q} {q} {{val_{q}}} sm\n")
    for k in range(4):
        q = qs[k % len(qs)]
        lines.append(f"%l{k} = load @x[{k + (0 if q == 'q0' else 4)}]\n")
        regs[q].append(f"%l{k}")
    for k in range(size):
        q = rng.choice(qs)
        pool = regs[q]
        op = rng.choice(["mmul", "mmad", "mmul", "mac", "auto", "roundtrip",
                         "copy", "cmul"])
        d = f"%v{k}"
        if op == "mmul":
            a, b = rng.choice(pool), rng.choice(pool)
            lines.append(f"{d} = mmul {a}, {b}, {q}\n")
        elif op == "mmad":
            a, b = rng.choice(pool), rng.choice(pool)
            lines.append(f"{d} = mmad {a}, {b}, {q}\n")
        elif op == "mac":
            a, b, c = (rng.choice(pool) for _ in range(3))
            lines.append(f"{d} = mac {a}, {b}, {b}, {q}\n")
        elif op == "auto":
            lines.append(f"{d} = auto {rng.choice(pool)}, "
                         f"{rng.randrange(1, 4)}, {q}\n")
        elif op == "roundtrip":
            lines.append(f"%t{k} = intt {rng.choice(pool)}, {q}\n")
            lines.append(f"{d} = ntt %t{k}, {q}\n")
        elif op == "copy":
            lines.append(f"{d} = copy {rng.choice(pool)}\n")
        else:
            lines.append(f"{d} = mmul {rng.choice(pool)}, !c{q}, {q}\n")
        pool.append(d)
    for j, q in enumerate(qs):
        lines.append(f"store {regs[q][-1]}, @y[{j}]\n")
    text = header(nmods) + "".join(consts) + "".join(lines)
    qvals = {"q0": 97, "q1": 193}
    for q in qs:
        m = make_modulus(qvals[q], N)
        text = text.replace(f"{{val_{q}}}", str(sm_encode(rng.randrange(1, m.q), m)))
    return parse_ir(text)


def random_image(prog, rng):
    img = blank_image(prog)
    for k, q in enumerate((97, 193)):
        m = make_modulus(q, N)
        for j in range(4):
            p = make_poly(m, [rng.randrange(q) for _ in range(N)], repr=SM)
            img.dram["x"][4 * k + j] = ntt_fwd(p)
    return img


# ---------------------------------------------------------------------------
# hardware description

def test_hw_validation_and_parsing():
    with pytest.raises(ValueError):
        HardwareDescription(slots=1)
    with pytest.raises(ValueError):
        HardwareDescription(lanes=0)
    with pytest.raises(ValueError):
        HardwareDescription(fu=(("ntt", 0), ("mmul", 1), ("madd", 1),
                                ("auto", 1)))
    hw = parse_hw("lanes = 64\nslots = 32\n# comment\nfu.ntt = 3\n"
                  "lat.mmul = 7\nstreaming = false\n")
    assert hw.lanes == 64 and hw.slots == 32
    assert hw.fu_count("ntt") == 3
    assert hw.lat("mmul", 4096) == 7
    assert not hw.streaming
    with pytest.raises(ValueError):
        parse_hw("bogus = 3\n")


def test_hw_latency_defaults():
    hw = HardwareDescription(lanes=128, ntt_pipelines=4)
    assert hw.lat("mmul", 4096) == 32
    assert hw.lat("ntt", 4096) == 32 * 12 // 4
    assert hw.lat("load", 4096) == 100 + 4096 * 8 // hw.dram_bw


# ---------------------------------------------------------------------------
# unroll

def test_unroll_loop_and_scalars():
    text = header() + ("$b = sli 2\n$i = loop 0, 3\n$k = smul $i, 2\n"
                       "$a = sadd $k, $b\n%v = load @x[$a]\n"
                       "store %v, @y[$i]\nendloop\n")
    p = unroll(parse_ir(text))
    assert all(i.op in ("load", "store") for i in p.instrs)
    loads = [i for i in p.instrs if i.op == "load"]
    assert [i.srcs[0].base for i in loads] == [2, 4, 6]
    assert all(i.srcs[0].concrete for i in loads)


def test_unroll_skipz_and_semantics():
    rng = random.Random(0)
    text = header() + ("$i = loop 0, 4\n%v = load @x[$i]\n"
                       "$p = sadd $i, -2\nskipz $p, 1\n"
                       "store %v, @y[$i]\nendloop\n")
    p = parse_ir(text)
    u = unroll(p)
    img = seeded_image(p, rng)
    assert outputs(p, img) == outputs(u, img)
    # iteration 2 has $p == 0, so its store is skipped
    assert outputs(u, img)[2] is None


# ---------------------------------------------------------------------------
# lowering

def test_lower_identity_and_ntt():
    p = parse_ir(header() + "%a = load @x[0]\nstore %a, @y[0]\n")
    assert lower(p).opcount() == p.opcount()
    p2 = parse_ir(header() + "%a = load @x[0]\n%b = intt %a, q0\n"
                  "%c = ntt %b, q0\nstore %c, @y[0]\n")
    low = lower(p2)
    assert low.opcount()["ntt"] == 1
    # plain intt splits into the deferred transform plus one constant multiply
    assert low.opcount()["intt"] == 1 and low.opcount()["mmul"] == 1
    rng = random.Random(1)
    img = seeded_image(p2, rng)
    assert outputs(p2, img) == outputs(low, img)


def test_lower_bconv_counts():
    n = 16
    cm = make_modulus_chain(n, 2, 20)
    bm = make_modulus_chain(n, 1, 21)
    text = (f".n {n}\n.mod q0 {cm[0].q}\n.mod q1 {cm[1].q}\n"
            f".mod p0 {bm[0].q}\n.dram x 4\n.dram y 4\n"
            "%a = load @x[0]\n%b = load @x[1]\n"
            "%fa = intt.defer %a, q0\n%fb = intt.defer %b, q1\n"
            "%o = bconv %fa %fb : q0 q1 -> p0\n"
            "%s = ntt %o, p0\nstore %s, @y[0]\n")
    p = parse_ir(text)
    low = lower(p)
    # |src|=2, |dst|=1: two stage-1 MMUL, two stage-2 MMUL, one accumulate
    assert low.opcount()["mmul"] == 4 and low.opcount()["mmad"] == 1
    assert "bconv" not in low.opcount()
    rng = random.Random(2)
    img = blank_image(p)
    for k, m in enumerate(cm):
        limb = make_poly(m, [rng.randrange(m.q) for _ in range(n)], repr=SM)
        img.dram["x"][k] = ntt_fwd(limb)
    assert outputs(p, img) == outputs(low, img)


def test_lower_bconv_plain_inputs():
    n = 16
    cm = make_modulus_chain(n, 2, 20)
    bm = make_modulus_chain(n, 1, 21)
    text = (f".n {n}\n.mod q0 {cm[0].q}\n.mod q1 {cm[1].q}\n"
            f".mod p0 {bm[0].q}\n.dram x 4\n.dram y 4\n"
            "%a = load @x[0]\n%b = load @x[1]\n"
            "%fa = intt %a, q0\n%fb = intt %b, q1\n"
            "%o = bconv %fa %fb : q0 q1 -> p0\n"
            "%s = ntt %o, p0\nstore %s, @y[0]\n")
    p = parse_ir(text)
    low = lower(p)
    rng = random.Random(3)
    img = blank_image(p)
    for k, m in enumerate(cm):
        limb = make_poly(m, [rng.randrange(m.q) for _ in range(n)], repr=SM)
        img.dram["x"][k] = ntt_fwd(limb)
    assert outputs(p, img) == outputs(low, img)
    # merging the 1/N multiply into stage 1 saves one instruction per limb
    # (-2), and a stage-2 multiply-accumulate pair fuses into a MAC (-1)
    merged = peephole_merge(pre(propagate(low)))
    assert sum(merged.opcount().values()) == sum(low.opcount().values()) - 3
    assert merged.opcount()["mmul"] == low.opcount()["mmul"] - 3
    assert merged.opcount()["mac"] == 1
    assert outputs(merged, img) == outputs(low, img)


def test_lower_rejects_scalar_flow():
    p = parse_ir(header() + "$i = loop 0, 2\nendloop\n")
    with pytest.raises(IrError, match="unrolled"):
        lower(p)


# ---------------------------------------------------------------------------
# propagate / pre / peephole

def test_propagate_copy_chain():
    text = header() + ("%a = load @x[0]\n%b = copy %a\n%c = copy %b\n"
                       "%d = copy %c\nstore %d, @y[0]\n")
    p = parse_ir(text)
    out = propagate(p)
    assert "copy" not in out.opcount()
    assert str(out.instrs[-1].srcs[0]) == "%a"
    rng = random.Random(4)
    img = seeded_image(p, rng)
    assert outputs(p, img) == outputs(out, img)


def test_pre_removes_full_redundancy():
    text = header() + ("%a = load @x[0]\n%b = load @x[1]\n"
                       "%p = mmul %a, %b, q0\n%q = mmul %a, %b, q0\n"
                       "%r = mmad %p, %q, q0\nstore %r, @y[0]\n")
    p = parse_ir(text)
    out = pre(p)
    assert out.opcount()["mmul"] == 1
    rng = random.Random(5)
    img = seeded_image(p, rng)
    assert outputs(p, img) == outputs(out, img)


def test_pre_leaves_memory_dependences():
    text = header() + ("%a = load @x[0]\nstore %a, @x[1]\n"
                       "%b = load @x[1]\nstore %b, @y[0]\n")
    p = parse_ir(text)
    assert [str(i) for i in pre(p).instrs] == [str(i) for i in p.instrs]


def test_pre_dce():
    text = header() + ("%a = load @x[0]\n%dead = mmul %a, %a, q0\n"
                       "store %a, @y[0]\n")
    out = pre(parse_ir(text))
    assert "mmul" not in out.opcount()


def test_peephole_mac_fusion():
    text = header() + ("%a = load @x[0]\n%b = load @x[1]\n%c = load @x[2]\n"
                       "%p = mmul %b, %c, q0\n%s = mmad %a, %p, q0\n"
                       "store %s, @y[0]\n")
    p = parse_ir(text)
    out = peephole_merge(p)
    assert out.opcount()["mac"] == 1 and "mmul" not in out.opcount()
    rng = random.Random(6)
    img = seeded_image(p, rng)
    assert outputs(p, img) == outputs(out, img)


def test_peephole_keeps_multi_use_mmul():
    text = header() + ("%a = load @x[0]\n%b = load @x[1]\n"
                       "%p = mmul %a, %b, q0\n%s = mmad %a, %p, q0\n"
                       "store %p, @y[1]\nstore %s, @y[0]\n")
    out = peephole_merge(parse_ir(text))
    assert "mac" not in out.opcount()


def test_peephole_folds_const_chain():
    m = make_modulus(97, N)
    c1, c2 = sm_encode(5, m), sm_encode(7, m)
    text = header() + (f".const a q0 {c1} sm\n.const b q0 {c2} sm\n"
                       "%x = load @x[0]\n%u = mmul %x, !a, q0\n"
                       "%v = mmul %u, !b, q0\nstore %v, @y[0]\n")
    p = parse_ir(text)
    out = peephole_merge(p)
    assert out.opcount()["mmul"] == 1
    rng = random.Random(7)
    img = seeded_image(p, rng)
    assert outputs(p, img) == outputs(out, img)


# ---------------------------------------------------------------------------
# scheduling

def test_schedule_preserves_chains_and_bounds():
    rng = random.Random(8)
    for trial in range(10):
        p = random_program(rng)
        u = propagate(unroll(p))
        s = schedule(u, HW)
        img = random_image(p, rng)
        assert outputs(u, img) == outputs(s, img)
        assert s.notes["makespan"] >= s.notes["critical_path"]
        serial = sum(HW.lat(i.op, p.n) for i in u.instrs)
        assert s.notes["makespan"] <= serial
        # issue cycles respect dependences
        deps = build_deps(s)
        for idx, ps in enumerate(deps):
            for j in ps:
                assert s.instrs[j].meta["cycle"] \
                    + HW.lat(s.instrs[j].op, p.n) \
                    <= s.instrs[idx].meta["cycle"]


def test_schedule_overlaps_independent_work():
    text = header() + ("%a = load @x[0]\n%b = load @x[1]\n"
                       "%u = intt %a, q0\n%v = intt %b, q0\n"
                       "store %u, @y[0]\nstore %v, @y[1]\n")
    p = propagate(lower(unroll(parse_ir(text))))
    lat = (("load", 1), ("store", 1), ("intt", 10), ("mmul", 1))

    def intt_cycles(nunits):
        hw = HardwareDescription(slots=8, lat_override=lat,
                                 fu=(("ntt", nunits), ("mmul", 2),
                                     ("madd", 2), ("auto", 1)))
        s = schedule(p, hw)
        return sorted(i.meta["cycle"] for i in s.instrs if i.op == "intt")

    two = intt_cycles(2)
    assert two[1] < two[0] + 10       # windows overlap on two units
    one = intt_cycles(1)
    assert one[1] >= one[0] + 10      # strictly serialized on one unit


def test_critical_path_chain():
    text = header() + ("%a = load @x[0]\n%b = mmul %a, %a, q0\n"
                       "%c = mmul %b, %b, q0\nstore %c, @y[0]\n")
    p = parse_ir(text)
    lat = HW.lat("load", N) + 2 * HW.lat("mmul", N) + HW.lat("store", N)
    assert critical_path(p, HW) == lat


# ---------------------------------------------------------------------------
# allocation

def alloc_pipeline(p, slots):
    return alloc_sram(schedule(propagate(unroll(p)), HW), HW, slots)


def test_alloc_exact_fit_no_spills():
    rng = random.Random(9)
    p = random_program(rng)
    u = schedule(propagate(unroll(p)), HW)
    need = max_liveness(u)
    a = alloc_sram(u, HW, need)
    assert a.notes["spills"] == 0
    assert "__spill" not in a.dram
    check_machine_form(a)
    img = random_image(p, rng)
    assert outputs(u, img) == outputs(a, img)


def test_alloc_spills_under_pressure():
    rng = random.Random(10)
    for trial in range(5):
        p = random_program(rng)
        u = schedule(propagate(unroll(p)), HW)
        need = max_liveness(u)
        slots = max(4, need - 1)
        if slots >= need:
            continue
        a = alloc_sram(u, HW, slots)
        assert a.notes["spills"] > 0
        img = random_image(p, rng)
        assert outputs(u, img) == outputs(a, img)
        # no instruction uses more than `slots` distinct physical registers
        for i in a.instrs:
            regs = {str(o) for o in list(i.srcs) + list(i.dests)
                    if isinstance(o, Vreg) and str(o).startswith("r")}
            assert len(regs) <= slots


def test_alloc_disjoint_lifetimes_share_slot():
    text = header() + ("%a = load @x[0]\nstore %a, @y[0]\n"
                       "%b = load @x[1]\nstore %b, @y[1]\n")
    p = parse_ir(text)
    a = alloc_sram(p, HW, 8)
    regs = {str(i.dests[0]) for i in a.instrs if i.op == "load"}
    assert regs == {"r0"}


def test_alloc_rejects_tiny_sram():
    p = parse_ir(header() + "%a = load @x[0]\nstore %a, @y[0]\n")
    with pytest.raises(IrError):
        alloc_sram(p, HW, 1)


# ---------------------------------------------------------------------------
# streaming merges

def test_streaming_single_consumer_load():
    text = header() + ("%a = load @x[0]\n%b = ntt %a, q0\n"
                       "store %b, @y[0]\n")
    p = parse_ir(text)
    out = merge_streaming(p, HW)
    assert "load" not in out.opcount() and "store" not in out.opcount()
    ntt = [i for i in out.instrs if i.op == "ntt"][0]
    assert isinstance(ntt.srcs[0], Addr) and isinstance(ntt.dests[0], Addr)
    rng = random.Random(11)
    img = seeded_image(p, rng, ntt=False)
    assert outputs(p, img) == outputs(out, img)


def test_streaming_respects_multi_consumer():
    text = header() + ("%a = load @x[0]\n%b = ntt %a, q0\n"
                       "%c = mmul %a, %a, q0\n"
                       "store %b, @y[0]\nstore %c, @y[1]\n")
    out = merge_streaming(parse_ir(text), HW)
    assert out.opcount()["load"] == 1


def test_streaming_respects_intervening_store():
    text = header() + ("%a = load @x[0]\n%z = load @x[1]\nstore %z, @x[0]\n"
                       "%b = ntt %a, q0\nstore %b, @y[0]\n")
    p = parse_ir(text)
    out = merge_streaming(p, HW)
    # @x[0] is overwritten between the load and its consumer: not merged
    loads = [i for i in out.instrs if i.op == "load"
             and i.srcs[0] == Addr("x", 0)]
    assert len(loads) == 1
    rng = random.Random(12)
    img = seeded_image(p, rng, count=2, ntt=False)
    assert outputs(p, img) == outputs(out, img)


def test_streaming_fifo_forwarding():
    text = header() + ("%a = load @x[0]\n"
                       "%u = mmul %a, %a, q0\n%v = mmad %u, %a, q0\n"
                       "store %v, @y[0]\n")
    p = parse_ir(text)
    out = merge_streaming(p, HW)
    # %u has a single consumer and is forwarded through a fifo channel
    assert any(str(o).startswith("f") for i in out.instrs
               for o in i.dests if isinstance(o, Vreg))
    assert "f0" in out.fifo_regs
    rng = random.Random(13)
    img = seeded_image(p, rng)
    assert outputs(p, img) == outputs(out, img)


def test_streaming_reduces_pressure_and_spills():
    rng = random.Random(14)
    lowered = []
    for trial in range(8):
        p = schedule(propagate(lower(unroll(random_program(rng)))), HW)
        merged = merge_streaming(p, HW)
        assert max_liveness(merged) <= max_liveness(p)
        lowered.append(max_liveness(merged) < max_liveness(p))
    assert any(lowered)


# ---------------------------------------------------------------------------
# full driver

def test_compile_end_to_end_matches_source():
    rng = random.Random(15)
    for trial in range(8):
        p = random_program(rng)
        img = random_image(p, rng)
        want = outputs(p, img)
        mc = compile_program(p, HW)
        check_machine_form(mc)
        assert outputs(mc, img) == want


def test_compile_toggles_preserve_semantics():
    rng = random.Random(16)
    for trial in range(4):
        p = random_program(rng)
        img = random_image(p, rng)
        want = outputs(p, img)
        for kw in ({"do_pre": False}, {"do_propagate": False},
                   {"do_merge": False}, {"streaming": False},
                   {"do_pre": False, "do_merge": False, "streaming": False}):
            mc = compile_program(p, HW, **kw)
            check_machine_form(mc)
            assert outputs(mc, img) == want


def test_compile_deterministic():
    rng = random.Random(17)
    p = random_program(rng)
    from effact.asm import assemble_binary
    a = assemble_binary(compile_program(p, HW))
    b = assemble_binary(compile_program(p, HW))
    assert a == b


def test_compile_streaming_fewer_spills_under_pressure():
    rng = random.Random(18)
    p = random_program(rng, size=40)
    u = schedule(propagate(peephole_merge(pre(propagate(
        lower(unroll(p)))))), HW)
    slots = max(2, max_liveness(u) // 2)
    plain = compile_program(p, HW, streaming=False, slots=slots)
    stream = compile_program(p, HW, streaming=True, slots=slots)
    assert stream.notes["spills"] < plain.notes["spills"]
    img = random_image(p, rng)
    assert outputs(plain, img) == outputs(stream, img)
