"""Acceptance criteria 1-15. Each test prints one line `criterion N: PASS|FAIL detail`.

Heavy runs are marked slow; `pytest -m "not slow"` skips them.
"""
import time

import numpy as np
import pytest

from magstrich import cli
from magstrich.cli import ExperimentConfig, fit_slope, main
from magstrich.grid import make_grid, weight
from magstrich.potentials import make_gaussian_model, zero_model


@pytest.fixture
def report(capsys):
    def _report(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok
    return _report


def config(**kw):
    cfg = ExperimentConfig()
    for k, v in kw.items():
        setattr(cfg, k, v)
    cfg.validate("acceptance")
    return cfg


FREE = dict(amplitude_A=0.0, amplitude_V=0.0)
COUPLED = dict(amplitude_A=1.0, amplitude_V=1.0, width=0.5, coupling=0.5, divergence_free=True)


def test_criterion_01_free_resolvent_decay(report):
    cfg = config(n=32, box_half_width=4.0, lambda_list=[4.0, 8.0, 16.0, 32.0], alpha_list=[0.0],
                 **FREE)
    out = cli.cmd_resolvent_scan(cfg)
    s = out.meta["fit_slopes"]["alpha=0"]
    ok = -1.15 <= s <= -0.85
    assert report(1, ok, f"slope {s:.4f} in [-1.15, -0.85]")


def test_criterion_02_half_derivative_uniformity(report):
    cfg = config(n=32, box_half_width=4.0, lambda_list=[4.0, 8.0, 16.0, 32.0],
                 alpha_list=[0.5, 1.0], **FREE)
    out = cli.cmd_resolvent_scan(cfg)
    spread = out.meta["spread"]["alpha=0.5"]
    s1 = out.meta["fit_slopes"]["alpha=1"]
    ok = spread <= 2.5 and 0.7 <= s1 <= 1.3
    assert report(2, ok, f"alpha=1/2 max/min {spread:.4f} <= 2.5, alpha=1 slope {s1:.4f} in [0.7, 1.3]")


@pytest.mark.slow
def test_criterion_03_perturbed_flatness(report):
    cfg = config(n=64, box_half_width=4.0, lambda_list=[1.0, 2.0, 4.0, 8.0, 16.0],
                 alpha_list=[0.0, 0.5], **COUPLED)
    out = cli.cmd_limap_scan(cfg)
    sp = out.meta["spread"]
    zm = out.meta["zero_mode"]
    ok = sp["alpha=0"] <= 3 and sp["alpha=0.5"] <= 3 and zm >= 0.2
    assert report(3, ok, f"normalized max/min {sp} <= 3, zero mode {zm:.4f} >= 0.2")


def test_criterion_04_multiplier_cases(report):
    cfg = config(delta=[0.25, 0.5], epsilon=1e-3, n_samples=200)
    out = cli.cmd_multiplier_check(cfg)
    ok = len(out.checks) > 0 and all(c[1] for c in out.checks)
    ratios = {(r["delta"], r["case"]): round(r["max_ratio"], 3) for r in out.rows if r["samples"]}
    slopes = {(r["delta"], r["case"]): round(r["slope"], 3) for r in out.rows
              if r["samples"] and r["case"] in (2, 3, 4)}
    assert report(4, ok, f"max ratios {ratios} <= 50, slopes {slopes} within -2 +/- 0.4")


def test_criterion_05_pv_shell_bound(report):
    cfg = config(lambda_list=[8.0], n_samples=50)
    out = cli.cmd_pv_check(cfg)
    worst = out.meta["worst_ratio"]
    ok = len(out.rows) == 50 and worst <= 20
    assert report(5, ok, f"worst ratio {worst:.4f} <= 20 over {len(out.rows)} samples")


@pytest.mark.slow
def test_criterion_06_two_cone_decay(report):
    cfg = config(n=32, box_half_width=4.0, lambda_list=[8.0, 16.0, 32.0], delta=[0.5],
                 amplitude_A=1.0, amplitude_V=0.0, width=0.5, coupling=0.5)
    out = cli.cmd_cone_decay(cfg)
    s = out.meta["fit_slopes"]["delta=0.5"]
    ok = s is not None and -1.3 <= s <= -0.7
    vals = [round(r["value"], 6) for r in out.rows]
    assert report(6, ok, f"values {vals}, slope {s:.4f} in [-1.3, -0.7]")


@pytest.mark.slow
def test_criterion_07_power_trend(report):
    from magstrich.cones import power_norm_scan
    g = make_grid(64, 4.0)
    m = make_gaussian_model(1.0, 1.0, 0.5, g, True, coupling=0.5)
    at16 = [power_norm_scan(m, mo, [16.0], main_term=False)[0]["norm"] for mo in (1, 2, 4)]
    lams = [8.0, 16.0, 32.0]
    first = [r["norm"] for r in power_norm_scan(m, 1, lams, main_term=False)]
    s = fit_slope(lams, first)
    ok = at16[0] > at16[1] > at16[2] and s > -0.3
    assert report(7, ok, f"lambda=16 norms m=1,2,4 {np.round(at16, 6).tolist()}, "
                         f"m=1 slope {s:.4f} > -0.3")


def test_criterion_08_propagator_exactness(report):
    from magstrich.evolution import free_gaussian, propagate
    g = make_grid(64, 20.0)
    psi0 = free_gaussian(g, 2.0, 0.0)
    run = propagate(zero_model(g), psi0, 1e-3, 2000, stride=100)
    err = max(float(np.max(np.abs(s - free_gaussian(g, 2.0, t))))
              for t, s in zip(run.times, run.snapshots))
    ok = err <= 1e-8 and run.total_drift <= 1e-8 and abs(run.horizon - 2.0) < 1e-12
    assert report(8, ok, f"max error {err:.3g} <= 1e-8, total drift {run.total_drift:.3g} <= 1e-8")


def test_criterion_09_strichartz_suite(report):
    from magstrich.evolution import AdmissibilityError, AdmissiblePair
    cfg = config(n=64, box_half_width=12.0, widths=[0.5, 1.0, 2.0], n_steps=100, q=4.0, p=3.0,
                 **FREE)
    out = cli.cmd_strichartz(cfg)
    e2 = max(abs(r["energy_norm"] - 1.0) for r in out.rows)
    var = out.meta["variation"]
    finite = all(np.isfinite(r["value"]) for r in out.rows)
    with pytest.raises(AdmissibilityError):
        AdmissiblePair(2.0, 6.0)
    ok = e2 <= 1e-10 and finite and var <= 1.2
    assert report(9, ok, f"(inf,2) error {e2:.3g} <= 1e-10, (4,3) variation {var:.6f} <= 1.2, "
                         "q=2 rejected")


@pytest.mark.slow
def test_criterion_10_smoothing_horizon(report):
    cfg = config(n=64, box_half_width=12.0, dt=0.01, n_steps=150, boost=3.0, sigma_weight=4.5,
                 **COUPLED)
    out = cli.cmd_smoothing(cfg)
    ch = out.meta["change"]
    ok = set(ch) == {"free", "model"} and max(ch.values()) <= 0.05
    assert report(10, ok, f"horizon-doubling change {ch} <= 5%")


def test_criterion_11_kato_equivalence(report):
    from magstrich.evolution import band_probes, kato_constant
    g = make_grid(32, 10.0)
    m = zero_model(g)
    w = weight(g, -4.5)
    probes = band_probes(g, 3, 0.5, 3.0, 2.5, seed=0)
    t = kato_constant(m, lambda u: w * u, (-np.inf, np.inf), via="TimeDomain", probes=probes,
                      horizon=3.0, dt=0.01)
    r = kato_constant(m, lambda u: w * u, (-np.inf, np.inf), via="ResolventDomain",
                      probes=probes, n_nodes=16)
    rel = abs(t.value - r.value) / r.value
    ok = rel <= 0.3
    assert report(11, ok, f"time {t.value:.6g} vs resolvent {r.value:.6g}, rel diff {rel:.4f} <= 0.3")


@pytest.mark.slow
def test_criterion_12_katoth_budget(report):
    cfg = config(n=32, box_half_width=6.0, amplitude_A=1.0, amplitude_V=1.0, width=0.8,
                 coupling=0.5, q=4.0, p=3.0, dt=0.01, n_steps=100)
    out = cli.cmd_katoth_budget(cfg)
    row = out.rows[0]
    ok = row["ratio"] <= 1.5
    assert report(12, ok, f"lhs/budget {row['ratio']:.4f} <= 1.5 "
                          f"(lhs/(J C_H0 C_B C_A) = {row['literal_ratio']:.4f})")


def test_criterion_13_virial(report):
    cfg = config(n=32, box_half_width=4.0, amplitude_A=1.0, amplitude_V=-30.0, width=0.8,
                 coupling=0.5, n_samples=20)
    out = cli.cmd_virial(cfg)
    free = max(r["rel_error"] for r in out.rows if r["kind"] == "free")
    bound = [r["rel_error"] for r in out.rows if r["kind"] == "bound"]
    ok = sum(r["kind"] == "free" for r in out.rows) == 20 and free <= 1e-6 \
        and len(bound) == 1 and bound[0] <= 1e-4
    assert report(13, ok, f"free worst {free:.3g} <= 1e-6, bound-state defect "
                          f"{bound[0] if bound else float('nan'):.3g} <= 1e-4")


@pytest.mark.slow
def test_criterion_14_embedded_scan(report):
    from magstrich.evolution import bound_states
    from magstrich.spectral_diag import embedded_eigenvalue_scan
    t0 = time.time()
    cfg = config(n=32, box_half_width=6.0, amplitude_A=1.0, amplitude_V=1.0, width=0.8,
                 coupling=0.5, energy_window=[0.5, 2.0], n_probes=4)
    out = cli.cmd_embedded_scan(cfg)
    n_pos = out.meta["n_passing"]
    g = make_grid(32, 4.0)
    ctrl = make_gaussian_model(1.0, -30.0, 0.8, g, True, coupling=0.5)
    E = float(bound_states(ctrl, n_max=1).energies[0])
    rep = embedded_eigenvalue_scan(ctrl, (E - 1.0, E + 1.0), n_probes=2, require_positive=False)
    found = [c.energy for c in rep.passing if abs(c.energy - E) < 1e-6]
    elapsed = time.time() - t0
    ok = n_pos == 0 and len(found) > 0 and elapsed <= 1800
    assert report(14, ok, f"{n_pos} candidates in (0.5, 2.0); control state E={E:.6f} "
                          f"found {len(found) > 0}; {elapsed:.0f} s")


@pytest.mark.parametrize("cmd", ["pv-check", "strichartz", "chain-budget"])
def test_criterion_15_determinism(report, tmp_path, capsys, cmd):
    args = {"pv-check": ["--lambda-list", "4,8", "--set", "n_samples=5"],
            "strichartz": ["--set", "n=16", "--set", "n_steps=40", "--set", "widths=1", "--set", "amplitude_A=0",
                           "--set", "amplitude_V=0", "--set", "box_half_width=6"],
            "chain-budget": ["--set", "m_max=8"]}[cmd]
    codes = [main([cmd, *args, "--seed", "3", "--out", str(tmp_path / d)]) for d in "ab"]
    capsys.readouterr()
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
               for f in (f"{cmd}.csv", f"{cmd}.meta.json"))
    ok = codes == [0, 0] and same
    assert report(15, ok, f"{cmd}: exit codes {codes}, byte-identical {same}")
