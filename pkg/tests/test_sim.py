import random

import pytest

from effact.compiler import HardwareDescription, compile_program
from effact.ir import blank_image, execute_program, parse_ir
from effact.poly import SM, make_poly, ntt_fwd
from effact.rns import make_modulus
from effact.sim import SimReport, compare_streaming, simulate, sweep_sram

N = 16
HW = HardwareDescription(slots=8, fifo_depth=4)


def header(nx=8, ny=8):
    return f".n {N}\n.mod q0 97\n.mod q1 193\n.dram x {nx}\n.dram y {ny}\n"


def machine(text, **kw):
    return compile_program(parse_ir(text), HW, **kw)


def test_single_ntt_latency():
    p = machine(header() + "%a = load @x[0]\n%b = ntt %a, q0\n"
                "store %b, @y[0]\n", streaming=False)
    rep = simulate(p, HW)
    lat = HW.lat("load", N) + HW.lat("ntt", N) + HW.lat("store", N)
    assert rep.cycles == lat
    assert rep.cycles == rep.critical_path


def test_serial_ntts_on_one_unit():
    hw = HardwareDescription(slots=8, fu=(("ntt", 1), ("mmul", 1),
                                          ("madd", 1), ("auto", 1)),
                             lat_override=(("ntt", 50), ("load", 1),
                                           ("store", 1)))
    text = header() + ("%a = load @x[0]\n%b = load @x[1]\n"
                       "%u = ntt %a, q0\n%v = ntt %b, q0\n"
                       "store %u, @y[0]\nstore %v, @y[1]\n")
    one = simulate(compile_program(parse_ir(text), hw, streaming=False), hw)
    hw2 = HardwareDescription(slots=8, fu=(("ntt", 2), ("mmul", 1),
                                           ("madd", 1), ("auto", 1)),
                              lat_override=hw.lat_override)
    two = simulate(compile_program(parse_ir(text), hw2, streaming=False),
                   hw2)
    assert one.fu_busy["ntt"] == two.fu_busy["ntt"] == 100
    # the second transform serializes on one unit and overlaps on two,
    # up to the skew from staggered DRAM arrivals
    assert one.cycles >= two.cycles + 40


def test_dram_byte_accounting():
    text = header() + ("%a = load @x[0]\n%b = load @x[1]\n"
                       "%c = mmul %a, %b, q0\n%d = mmad %a, %b, q0\n"
                       "store %c, @y[0]\nstore %d, @y[1]\n")
    rep = simulate(machine(text, streaming=False), HW)
    assert rep.dram_stream_bytes == 0
    assert rep.dram_load_bytes == 2 * N * 8
    assert rep.dram_store_bytes == 2 * N * 8
    assert rep.dram_bytes == 4 * N * 8


def test_streaming_bytes_counted_separately():
    text = header() + "%a = load @x[0]\n%b = ntt %a, q0\nstore %b, @y[0]\n"
    rep = simulate(machine(text, streaming=True), HW)
    assert rep.dram_load_bytes == 0 and rep.dram_store_bytes == 0
    assert rep.dram_stream_bytes == 2 * N * 8


def test_report_invariants_random_programs():
    from test_compiler import random_image, random_program
    rng = random.Random(0)
    for trial in range(6):
        p = random_program(rng)
        mc = compile_program(p, HW)
        rep = simulate(mc, HW)
        assert rep.cycles >= rep.critical_path
        assert rep.cycles * HW.dram_bw >= rep.dram_bytes
        for cls, busy in rep.fu_busy.items():
            assert 0.0 <= rep.utilization(cls) <= 1.0
            assert busy <= rep.cycles * rep.fu_count[cls]
        assert rep.dram_bytes % (N * 8) == 0


def test_determinism():
    from test_compiler import random_program
    rng = random.Random(1)
    p = random_program(rng)
    mc = compile_program(p, HW)
    a = simulate(mc, HW, want_trace=True)
    b = simulate(mc, HW, want_trace=True)
    assert a.to_json() == b.to_json()
    assert a.trace == b.trace


def test_mac_routing_changes_unit_not_results():
    text = header() + ("%a = load @x[0]\n%b = load @x[1]\n"
                       "%c = mac %a, %b, %b, q0\nstore %c, @y[0]\n")
    prog = parse_ir(text)
    mc = compile_program(prog, HW, streaming=False)
    on_mmul = simulate(mc, HW, mac_unit="mmul")
    on_ntt = simulate(mc, HW, mac_unit="ntt")
    assert on_mmul.fu_busy["mmul"] > 0 and on_mmul.fu_busy["ntt"] == 0
    assert on_ntt.fu_busy["ntt"] > 0 and on_ntt.fu_busy["mmul"] == 0
    with pytest.raises(ValueError):
        simulate(mc, HW, mac_unit="auto")


def test_resource_check():
    text = header() + "%a = load @x[0]\nstore %a, @y[0]\n"
    mc = compile_program(parse_ir(text), HW)
    tiny = HardwareDescription(slots=2, fifo_depth=2)
    # registers fit within two slots here, so shrink further via a program
    # that allocates into high registers
    from test_compiler import random_program
    rng = random.Random(2)
    big = compile_program(random_program(rng), HW)
    maxreg = max(int(str(o)[1:]) for i in big.instrs
                 for o in list(i.srcs) + list(i.dests)
                 if hasattr(o, "name") and str(o).startswith("r"))
    if maxreg >= 2:
        with pytest.raises(ValueError, match="SRAM"):
            simulate(big, tiny)
    assert simulate(mc, HW).cycles > 0


def test_bank_conflicts_counted():
    hw = HardwareDescription(slots=8, banks=1)
    text = header() + ("%a = load @x[0]\n%b = load @x[1]\n"
                       "%c = mmul %a, %b, q0\nstore %c, @y[0]\n")
    mc = compile_program(parse_ir(text), hw, streaming=False)
    rep = simulate(mc, hw)
    assert rep.bank_conflicts > 0
    wide = simulate(mc, HW)
    assert wide.bank_conflicts < rep.bank_conflicts or \
        wide.bank_conflicts == 0


def test_fifo_peak_tracked():
    text = header() + ("%a = load @x[0]\n"
                       "%u = mmul %a, %a, q0\n%v = mmad %u, %a, q0\n"
                       "store %v, @y[0]\n")
    mc = compile_program(parse_ir(text), HW, streaming=True)
    if mc.fifo_regs:
        rep = simulate(mc, HW)
        assert rep.fifo_peak >= 1


def test_sweep_monotone():
    from test_compiler import random_program
    rng = random.Random(3)
    p = random_program(rng, size=40)
    reports = sweep_sram(p, HW, [4, 8, 16, 32])
    cycles = [r.cycles for r in reports]
    assert cycles == sorted(cycles, reverse=True)
    utils = [r.fu_utilization for r in reports]
    assert all(b >= a - 1e-12 for a, b in zip(utils, utils[1:]))
    assert len(sweep_sram(p, HW, [16])) == 1


def test_compare_streaming():
    from test_compiler import random_image, random_program
    rng = random.Random(4)
    p = random_program(rng, size=40)
    pair = compare_streaming(p, HW)
    assert pair["cycles_saved"] >= 0
    img = random_image(p, rng)
    on = compile_program(p, HW, streaming=True)
    off = compile_program(p, HW, streaming=False)
    a = execute_program(on, img).dram["y"]
    b = execute_program(off, img).dram["y"]
    assert [x if x is None else x.to_ints() for x in a] == \
        [x if x is None else x.to_ints() for x in b]


def test_compare_streaming_no_candidates():
    # every value has at least two consumers: nothing can merge
    text = header() + ("%a = load @x[0]\n"
                       "%u = mmul %a, %a, q0\n%w = mmad %u, %u, q0\n"
                       "store %w, @y[0]\nstore %w, @y[1]\n"
                       "store %u, @y[2]\n")
    pair = compare_streaming(parse_ir(text), HW)
    assert pair["dram_bytes_saved"] == 0
    assert pair["streaming"].to_dict() == pair["baseline"].to_dict()
