import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from catscope import measurement as ms
from catscope.darkmatter import SearchPoint, coherence_time
from catscope.errors import ConfigError, InvalidMode, PrepFailed
from catscope.fock import (
    CatSpec,
    cat_state,
    displacement_operator,
    population_fidelity,
    required_dim,
    transition_probability,
)


def noiseless_device(**overrides):
    base = dict(
        T1c=math.inf,
        T1q=math.inf,
        T2q=math.inf,
        n_c=0.0,
        n_q=0.0,
        readout_Fge=0.0,
        readout_Fge_inv=0.0,
        p_d=0.0,
        p_leak=0.0,
    )
    base.update(overrides)
    return ms.DeviceParams(**base)


def test_device_defaults():
    d = ms.DeviceParams()
    assert d.chi == pytest.approx(2 * math.pi * 0.6e6)
    assert d.T1c == 4.6e-3
    assert d.t_m == 1.9e-6
    assert d.p_d == 0.013
    assert d.p_leak == 0.002


def test_device_validation():
    with pytest.raises(ConfigError):
        ms.DeviceParams(t_m=0.0)
    with pytest.raises(ConfigError):
        ms.DeviceParams(p_d=1.5)
    with pytest.raises(ConfigError):
        ms.DeviceParams(chi=0.0)
    with pytest.raises(ConfigError):
        ms.DeviceParams(n_q=-0.1)


def test_trial_config_validation():
    with pytest.raises(ConfigError):
        ms.TrialConfig(
            init=CatSpec(2.0),
            injected_beta=0.1,
            dm=ms.DMInjection(1e-15, SearchPoint(m_dm=1e10), 1e-4),
        )
    with pytest.raises(ConfigError):
        ms.TrialConfig(repeats=0)
    with pytest.raises(ConfigError):
        ms.TrialConfig(init=CatSpec(2.0, m=2))
    assert ms.TrialConfig(init=CatSpec(2.0)).mode == "compass"
    assert ms.TrialConfig().mode == "vacuum"


def test_readout_record_validation():
    with pytest.raises(ConfigError):
        ms.ReadoutRecord("GEX")
    r = ms.ReadoutRecord("GEL", trial_id=3)
    assert r.leaked
    assert not ms.ReadoutRecord("GE").leaked


def test_transition_rows_sum_to_one():
    d = ms.DeviceParams()
    for mode, size in (("compass", 8), ("vacuum", 4)):
        t = ms.build_transition_matrix(d, alpha_sq=12.0, mode=mode)
        assert t.shape == (size, size)
        assert np.all(t >= 0.0)
        assert_allclose(t.sum(axis=1), np.ones(size), atol=1e-12)


def test_invalid_mode():
    with pytest.raises(InvalidMode):
        ms.build_transition_matrix(ms.DeviceParams(), mode="squeezed")
    with pytest.raises(InvalidMode):
        ms.build_emission_matrix(ms.DeviceParams(), mode="squeezed")
    with pytest.raises(ConfigError):
        ms.build_transition_matrix(ms.DeviceParams(), alpha_sq=0.0, mode="compass")


def test_compass_loss_probability_value():
    # single-photon loss per check at twelve photons: 1 - exp(-12 t_m / T1c)
    t = ms.build_transition_matrix(ms.DeviceParams(), alpha_sq=12.0, mode="compass")
    p_down = t[0, 6] + t[0, 7]  # sector 0 -> 3, either qubit outcome
    assert p_down == pytest.approx(4.944e-3, rel=1e-3)


def test_qubit_factor_values():
    p_gg, p_ge, p_eg, p_ee = ms._qubit_factors(ms.DeviceParams())
    assert p_eg == pytest.approx(0.0142636, rel=1e-3)
    assert p_ge == pytest.approx(3.6237e-3, rel=1e-3)
    assert p_gg + p_ge == pytest.approx(1.0, abs=1e-15)
    assert p_ee + p_eg == pytest.approx(1.0, abs=1e-15)


def test_compass_matrix_structure():
    d = ms.DeviceParams()
    t = ms.build_transition_matrix(d, alpha_sq=8.0, mode="compass")
    p_gg, p_ge, p_eg, p_ee = ms._qubit_factors(d)
    for i in range(8):
        # even destination sectors split as a fair coin
        assert t[i, 0] == pytest.approx(t[i, 1], abs=1e-15)
        assert t[i, 4] == pytest.approx(t[i, 5], abs=1e-15)
    # no two-sector hops: phi_0 cannot reach phi_2 in one step
    assert t[0, 4] == 0.0 and t[1, 5] == 0.0
    # destination sector 1 flips the qubit ideally, sector 3 holds it
    p01 = t[0, 2] + t[0, 3]
    p03 = t[0, 6] + t[0, 7]
    assert t[0, 3] == pytest.approx(p01 * p_gg, rel=1e-12)
    assert t[0, 2] == pytest.approx(p01 * p_ge, rel=1e-12)
    assert t[0, 6] == pytest.approx(p03 * p_gg, rel=1e-12)
    assert t[1, 6] == pytest.approx(p03 * p_eg, rel=1e-12)
    assert t[1, 7] == pytest.approx(p03 * p_ee, rel=1e-12)


def test_vacuum_matrix_structure():
    d = ms.DeviceParams()
    t = ms.build_transition_matrix(d, mode="vacuum")
    p_gg, p_ge, p_eg, p_ee = ms._qubit_factors(d)
    p10 = 1.0 - math.exp(-d.t_m / d.T1c)
    p01 = d.n_c * p10
    # photon 0 keeps the qubit, photon 1 flips it
    assert t[0, 0] == pytest.approx((1 - p01) * p_gg, rel=1e-12)
    assert t[0, 3] == pytest.approx(p01 * p_gg, rel=1e-12)
    assert t[2, 0] == pytest.approx(p10 * p_gg, rel=1e-12)
    assert t[3, 1] == pytest.approx(p10 * p_ee, rel=1e-12)
    assert t[2, 3] == pytest.approx((1 - p10) * p_gg, rel=1e-12)


def test_short_interval_freezes_cavity():
    d = ms.DeviceParams(t_m=1e-30)
    t = ms.build_transition_matrix(d, alpha_sq=12.0, mode="compass")
    sector = t.reshape(4, 2, 4, 2).sum(axis=3)  # marginal over qubit outcome
    for q in range(2):
        assert_allclose(sector[:, q, :], np.eye(4), atol=1e-12)
    # with dephasing removed as well, the odd-sector kernels are deterministic
    d2 = ms.DeviceParams(t_m=1e-30, T2q=math.inf, n_q=0.0)
    t2 = ms.build_transition_matrix(d2, alpha_sq=12.0, mode="compass")
    assert t2[6, 6] == pytest.approx(1.0, abs=1e-12)  # phi_3 g stays put


def test_no_heating_closes_upward_hops():
    d = ms.DeviceParams(n_c=0.0)
    t = ms.build_transition_matrix(d, alpha_sq=6.0, mode="compass")
    for j in range(4):
        up = (j + 1) % 4
        assert t[2 * j, 2 * up] == 0.0
        assert t[2 * j, 2 * up + 1] == 0.0


def test_emission_matrices():
    d = ms.DeviceParams()
    e = ms.build_emission_matrix(d, mode="compass")
    assert e.shape == (8, 2)
    assert_allclose(e.sum(axis=1), np.ones(8), atol=1e-12)
    assert_allclose(e[0], [0.99, 0.01])
    assert_allclose(e[1], [0.01, 0.99])
    ev = ms.build_emission_matrix(d, mode="vacuum")
    assert ev.shape == (4, 2)
    assert_allclose(ev, 0.5 * e[:4], atol=1e-15)
    perfect = ms.build_emission_matrix(
        ms.DeviceParams(readout_Fge=0.0, readout_Fge_inv=0.0), mode="compass"
    )
    assert_allclose(perfect[::2], np.tile([1.0, 0.0], (4, 1)))
    assert_allclose(perfect[1::2], np.tile([0.0, 1.0], (4, 1)))


def test_noiseless_patterns():
    d = noiseless_device()
    alt = ms.simulate_record(
        ms.TrialConfig(init=CatSpec(math.sqrt(12), j=1), repeats=20, rng_seed=7), d
    )
    assert alt.symbols == "GE" * 10
    const = ms.simulate_record(
        ms.TrialConfig(init=CatSpec(math.sqrt(12), j=3), repeats=20, rng_seed=7), d
    )
    assert const.symbols == "G" * 20
    # vacuum probe with a large displacement sits in photon 1: alternating
    vac = ms.simulate_record(
        ms.TrialConfig(injected_beta=10.0, repeats=12, rng_seed=7), d
    )
    assert vac.symbols == "GE" * 6
    empty = ms.simulate_record(ms.TrialConfig(repeats=12, rng_seed=7), d)
    assert empty.symbols == "G" * 12


def test_fair_coin_flip_rate():
    d = noiseless_device()
    n_steps = 100_001
    rec = ms.simulate_record(
        ms.TrialConfig(init=CatSpec(math.sqrt(12), j=0), repeats=n_steps, rng_seed=11),
        d,
    )
    s = np.frombuffer(rec.symbols.encode(), dtype=np.uint8)
    flips = float(np.mean(s[1:] != s[:-1]))
    sigma = math.sqrt(0.25 / (n_steps - 1))
    assert abs(flips - 0.5) < 5 * sigma


def test_demolition_scrambles_sectors():
    d = noiseless_device(p_d=1.0)
    rec = ms.simulate_record(
        ms.TrialConfig(init=CatSpec(math.sqrt(12), j=3), repeats=200, rng_seed=3), d
    )
    assert set(rec.truth["sectors"]) == {0, 1, 2, 3}


def test_mimic_injection_matches_overlap():
    alpha, beta = 2.0, 0.1
    dim = required_dim(alpha + beta)
    target = cat_state(CatSpec(alpha, j=1), dim)
    start = cat_state(CatSpec(alpha, j=0), dim)
    p_ref = transition_probability(target, displacement_operator(beta, dim), start)

    cfg = ms.TrialConfig(
        init=CatSpec(alpha), injected_beta=beta, repeats=2, rng_seed=19
    )
    res = ms.run_campaign(20_000, cfg, noiseless_device())
    frac = res.truth_summary["init_sector_counts"][1] / 20_000
    sigma = math.sqrt(p_ref * (1 - p_ref) / 20_000)
    assert abs(frac - p_ref) < 3 * sigma


def test_dm_injection_truth_fraction():
    point = SearchPoint(m_dm=2 * math.pi * 6.442e9)
    tau = coherence_time(point)
    inj = ms.DMInjection(epsilon=3e-16, point=point, integration_time=tau)
    cfg = ms.TrialConfig(
        init=CatSpec(math.sqrt(12)), dm=inj, repeats=2, rng_seed=23
    )
    p = ms._dm_probability(inj, 12.0)
    assert 1e-3 < p < 0.1
    res = ms.run_campaign(10_000, cfg, noiseless_device())
    frac = res.truth_summary["n_injected"] / 10_000
    sigma = math.sqrt(p * (1 - p) / 10_000)
    assert abs(frac - p) < 3 * sigma


def test_leak_fraction():
    cfg = ms.TrialConfig(init=CatSpec(math.sqrt(4)), repeats=20, rng_seed=5)
    res = ms.run_campaign(10_000, cfg, ms.DeviceParams())
    p = 1.0 - (1.0 - 0.002) ** 20
    frac = res.truth_summary["n_leaked_records"] / 10_000
    sigma = math.sqrt(p * (1 - p) / 10_000)
    assert abs(frac - p) < 3 * sigma


def test_campaign_determinism():
    cfg = ms.TrialConfig(init=CatSpec(2.0), injected_beta=0.05, repeats=8, rng_seed=42)
    d = ms.DeviceParams()
    a = ms.run_campaign(200, cfg, d)
    b = ms.run_campaign(200, cfg, d)
    assert [r.symbols for r in a.records] == [r.symbols for r in b.records]
    c = ms.run_campaign(200, cfg, d, workers=2)
    assert [r.symbols for r in a.records] == [r.symbols for r in c.records]
    assert [r.trial_id for r in c.records] == list(range(200))
    assert a.truth_summary == c.truth_summary


def test_jsonl_roundtrip():
    cfg = ms.TrialConfig(init=CatSpec(2.0), repeats=6, rng_seed=1)
    recs = ms.run_campaign(25, cfg, ms.DeviceParams()).records
    text = ms.records_to_jsonl(recs)
    back = ms.records_from_jsonl(text)
    assert [r.symbols for r in back] == [r.symbols for r in recs]
    assert [r.trial_id for r in back] == [r.trial_id for r in recs]
    assert back[0].truth == recs[0].truth
    bare = ms.records_from_jsonl(ms.records_to_jsonl(recs, include_truth=False))
    assert bare[0].truth is None


def test_prepare_ideal_lands_on_cat():
    rng = np.random.default_rng(0)
    d = noiseless_device()
    alpha = math.sqrt(10)
    ideal = cat_state(CatSpec(alpha), required_dim(alpha))
    got = None
    for _ in range(200):
        state, ok = ms.prepare_compass(alpha, d, rng)
        if ok:
            got = state
            break
    assert got is not None
    overlap = abs(np.vdot(ideal.amps, got.amps)) ** 2
    assert overlap > 1.0 - 1e-6


def test_prepare_vacuum_always_succeeds():
    rng = np.random.default_rng(1)
    d = noiseless_device()
    for _ in range(100):
        state, ok = ms.prepare_compass(0.0, d, rng)
        assert ok
        assert abs(state.amps[0]) ** 2 > 1.0 - 1e-9


def test_prepare_postselection_misses_happen():
    rng = np.random.default_rng(2)
    d = noiseless_device()
    flags = [ms.prepare_compass(math.sqrt(10), d, rng)[1] for _ in range(100)]
    assert any(flags) and not all(flags)


def test_prepare_leak_raises():
    rng = np.random.default_rng(3)
    with pytest.raises(PrepFailed):
        ms.prepare_compass(2.0, noiseless_device(p_leak=1.0), rng)


def test_prepare_noisy_population_fidelity():
    rng = np.random.default_rng(4)
    d = ms.DeviceParams()
    alpha = math.sqrt(12)
    ideal = cat_state(CatSpec(alpha), required_dim(alpha))
    pops = []
    attempts = 0
    while len(pops) < 150 and attempts < 3000:
        attempts += 1
        try:
            state, ok = ms.prepare_compass(alpha, d, rng)
        except PrepFailed:
            continue
        if ok:
            pops.append(state.populations())
    assert len(pops) >= 150
    mean_pops = np.mean(pops, axis=0)
    fid = population_fidelity(mean_pops, ideal.populations())
    assert 0.88 <= fid < 1.0


def test_mimic_populations_cached_and_normalized():
    pops = ms._mimic_sector_populations(2.0, 4, 0, 0.1)
    assert len(pops) == 4
    assert sum(pops) == pytest.approx(1.0, abs=1e-12)
    assert pops[0] > 0.9
    again = ms._mimic_sector_populations(2.0, 4, 0, 0.1)
    assert pops == again
