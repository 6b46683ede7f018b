import numpy as np
import pytest

from effact import ckks
from effact.compiler import (
    HardwareDescription,
    compile_program,
    lower,
    peephole_merge,
    propagate,
    schedule,
    unroll,
)
from effact.ir import blank_image, execute_program, parse_ir
from effact.workloads import (
    WorkloadParams,
    ciphertext_into,
    ckks_params,
    gen_bootstrap_skeleton,
    gen_helr_iteration,
    gen_hoisted_rotations,
    gen_keyswitch,
    instruction_mix,
    keyswitch_image,
    mix_fractions,
    plaintexts_into,
    fullscale_params,
    _fill_keys,
)

WP = WorkloadParams(n=256, levels=3, dnum=2)


def keys():
    params = ckks_params(WP)
    return params, *ckks.keygen_small(params, seed=3, rot_steps=(1, 2))


def limbs_of(img, sym):
    return [v.to_ints() for v in img.dram[sym]]


def test_params_validation():
    with pytest.raises(ValueError):
        WorkloadParams(n=100)
    with pytest.raises(ValueError):
        WorkloadParams(levels=3, level=4)
    with pytest.raises(ValueError):
        WorkloadParams(levels=3, l_cts=2, l_evalmod=2)
    assert WorkloadParams(levels=4, dnum=2).alpha == 3
    assert fullscale_params().l_boot == 15
    with pytest.raises(ValueError):
        ckks_params(fullscale_params())


def test_keyswitch_matches_he_ops():
    params, sk, evk, _ = keys()
    ct = ckks.encrypt([0.25, -0.5, 0.125], params, sk, seed=11)
    d2 = ct.c1   # any NTT-domain component over the level basis
    ks0, ks1 = ckks.key_switch(d2, evk, params, WP.levels)

    src = parse_ir(gen_keyswitch(WP))
    machine = compile_program(gen_keyswitch(WP))
    img = keyswitch_image(src, WP, d2, evk)
    for prog in (src, machine):
        res = execute_program(prog, img.clone())
        assert limbs_of(res, "out0") == [l.to_ints() for l in ks0.limbs]
        assert limbs_of(res, "out1") == [l.to_ints() for l in ks1.limbs]


def test_keyswitch_structure():
    src = parse_ir(gen_keyswitch(WP))
    raises = [i for i in src.instrs
              if i.op == "bconv" and "p0" in i.meta["dst_mods"]]
    assert len(raises) == WP.dnum          # one raise pipeline per digit
    low = lower(unroll(parse_ir(gen_keyswitch(WP))))
    mix = instruction_mix(low)
    K = WP.levels + 1 + len(ckks_params(WP).pchain)
    # dnum raises of K transforms each, plus two mod-down components
    assert mix["NTT"] == (WP.dnum + 2) * K
    assert sum(mix.values()) == len(low.instrs)


def test_hoisted_rotations_share_decomposition():
    src = parse_ir(gen_hoisted_rotations(WP, steps=(1, 2)))
    raises = [i for i in src.instrs
              if i.op == "bconv" and "p0" in i.meta["dst_mods"]]
    # one decomposition total, not one per rotation step
    assert len(raises) == WP.dnum
    autos = [i for i in src.instrs if i.op == "auto"]
    assert len(autos) >= 2 * (WP.levels + 1)


def test_hoisted_rotations_match_rotation_oracle():
    params, sk, evk, rot_keys = keys()
    vals = [0.5, 0.25, -0.75, 0.125]
    ct = ckks.encrypt(vals, params, sk, seed=12)
    text = gen_hoisted_rotations(WP, steps=(1, 2))
    prog = parse_ir(text)
    img = ciphertext_into(blank_image(prog), ct)
    for s in (1, 2):
        _fill_keys(img, WP, rot_keys[s], f"rkb{s}_", f"rka{s}_")
    res = execute_program(compile_program(text), img)
    basis = params.basis(WP.levels)
    for s in (1, 2):
        got = ckks.Ciphertext(
            ckks.RnsPoly(basis, tuple(res.dram[f"rot{s}c0"])),
            ckks.RnsPoly(basis, tuple(res.dram[f"rot{s}c1"])),
            WP.levels, ct.scale)
        want = ckks.hrot(ct, s, rot_keys, params)
        dg = ckks.decrypt(got, sk, params)
        dw = ckks.decrypt(want, sk, params)
        assert np.allclose(dg, dw, atol=1e-4)
        assert np.allclose(dg[:len(vals)].real[:2], dw[:len(vals)].real[:2])


def test_helr_is_mac_dominated():
    text = gen_helr_iteration(WP, batch=6)
    low = lower(unroll(parse_ir(text)))
    plain_mults = instruction_mix(low)["MULT"]
    fused = peephole_merge(propagate(low))
    macs = sum(1 for i in fused.instrs if i.op == "mac")
    assert macs > 0.5 * plain_mults


def test_helr_compiles_and_executes():
    params, sk, evk, rot_keys = keys()
    text = gen_helr_iteration(WP, batch=3)
    src = parse_ir(text)
    ct = ckks.encrypt([0.1, 0.2], params, sk, seed=13)
    img = ciphertext_into(blank_image(src), ct)
    plaintexts_into(img, WP, rows=3)
    _fill_keys(img, WP, rot_keys[1], "rkb1_", "rka1_")
    ref = execute_program(src, img.clone())
    got = execute_program(compile_program(text), img.clone())
    assert limbs_of(got, "acc0") == limbs_of(ref, "acc0")
    assert limbs_of(got, "acc1") == limbs_of(ref, "acc1")


def test_mix_partition_and_pass_invariance():
    low = lower(unroll(parse_ir(gen_keyswitch(WP))))
    mix = instruction_mix(low)
    assert sum(mix.values()) == len(low.instrs)
    sched = schedule(low, HardwareDescription())
    assert instruction_mix(sched) == mix
    fr = mix_fractions(mix)
    assert abs(sum(fr.values()) - 1.0) < 1e-12
    # compilation may only add spill traffic, never compute
    machine = compile_program(gen_keyswitch(WP))
    mmix = instruction_mix(machine)
    for cat in ("NTT", "AUTO"):
        assert mmix[cat] == mix[cat]


def test_bootstrap_skeleton_desk_scale_executes():
    wp = WorkloadParams(n=256, levels=3, dnum=2,
                        l_cts=1, l_evalmod=1, l_stc=1)
    params, sk, evk, _ = keys()
    text = gen_bootstrap_skeleton(wp)
    src = parse_ir(text)
    ct = ckks.encrypt([0.3, -0.1], params, sk, seed=14)
    img = ciphertext_into(blank_image(src), ct)
    plaintexts_into(img, wp)
    _fill_keys(img, wp, evk, "ekb", "eka")
    res = execute_program(src, img)
    lvl_end = wp.levels - wp.l_boot
    for k in range(lvl_end + 1):
        assert res.dram["ct0"][k] is not None
        assert res.dram["ct1"][k] is not None


def test_bootstrap_mix_full_scale():
    wp = fullscale_params()
    low = lower(unroll(parse_ir(gen_bootstrap_skeleton(wp))))
    fr = mix_fractions(instruction_mix(low))
    ma = fr["MULT"] + fr["ADD"] + fr["BC_MULT"] + fr["BC_ADD"]
    assert 0.859 <= ma <= 0.959
    assert 0.035 <= fr["NTT"] <= 0.095
    bc_share = fr["BC_MULT"] / (fr["MULT"] + fr["BC_MULT"])
    assert abs(bc_share - 0.527) <= 0.05


def test_generator_argument_errors():
    with pytest.raises(ValueError):
        gen_hoisted_rotations(WP, steps=())
    with pytest.raises(ValueError):
        gen_bootstrap_skeleton(WP)   # no level budget
