"""Command-line front end.

    magstrich <subcommand> [--config run.ini] [--out DIR] [--seed N] [--workers N] ...

Every subcommand writes ``<kind>.csv`` (tidy rows, sorted) and
``<kind>.meta.json`` (fit slopes, checks, config hash) to the output
directory and prints one summary line.  Exit status: 0 when every checked
bound holds, 2 when a bound is violated (files are still written), 1 on
errors.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger("magstrich")

SUBCOMMANDS = ("resolvent-scan", "limap-scan", "multiplier-check", "pv-check", "cone-decay",
               "chain-budget", "power-scan", "zero-mode", "strichartz", "smoothing",
               "katoth-budget", "virial", "embedded-scan")

COLUMNS = {
    "resolvent-scan": ["alpha", "lambda", "n", "value", "normalized", "iterations", "residual",
                       "status"],
    "limap-scan": ["alpha", "lambda", "n", "value", "normalized", "iterations", "residual",
                   "status"],
    "multiplier-check": ["delta", "case", "samples", "max_ratio", "slope", "bound", "epsilon"],
    "pv-check": ["lambda", "sample", "abs_value", "l1", "holder", "ratio"],
    "cone-decay": ["delta", "lambda", "n", "value", "iterations", "residual", "status"],
    "chain-budget": ["m", "delta", "rho", "far", "gen", "total", "log_total"],
    "power-scan": ["m", "lambda", "n", "value", "main_value", "iterations", "residual", "status"],
    "zero-mode": ["sigma", "value", "iterations", "residual", "converged"],
    "strichartz": ["width", "q", "p", "horizon", "value", "energy_norm", "total_drift"],
    "smoothing": ["flow", "horizon", "value", "tail"],
    "katoth-budget": ["q", "p", "lhs", "c_h0", "c_b", "c_a", "J", "budget", "ratio",
                      "literal_budget", "literal_ratio"],
    "virial": ["kind", "sample", "energy", "rel_error"],
    "embedded-scan": ["probe", "E", "residual", "virial_defect", "outside_fraction", "verdict"],
}


class ConfigError(ValueError):
    pass


def _floats(s) -> list:
    if isinstance(s, (list, tuple)):
        return [float(x) for x in s]
    return [float(x) for x in str(s).replace(",", " ").split()]


def _ints(s) -> list:
    return [int(x) for x in _floats(s)]


@dataclass
class ExperimentConfig:
    # [grid]
    n: int = 32
    box_half_width: float = 4.0
    # [model]
    amplitude_A: float = 1.0
    amplitude_V: float = 1.0
    width: float = 0.5
    divergence_free: bool = True
    coupling: float = 0.5
    # [sweep]
    lambda_list: list = field(default_factory=lambda: [4.0, 8.0, 16.0, 32.0])
    alpha_list: list = field(default_factory=lambda: [0.0, 0.5])
    delta: list = field(default_factory=lambda: [0.5])
    m_order: list = field(default_factory=lambda: [1, 2, 4])
    q: float = 4.0
    p: float = 3.0
    sigma_weight: float = 4.5
    k_ratio: float = 1.5
    widths: list = field(default_factory=lambda: [0.5, 1.0, 2.0])
    n_samples: int = 20
    dt: float = 0.01
    n_steps: int = 100
    boost: float = 3.0
    energy_window: list = field(default_factory=lambda: [0.5, 2.0])
    n_probes: int = 4
    m_max: int = 40
    # [tolerances]
    norm_tol: float = 1e-3
    max_iter: int = 40
    solve_tol: float = 1e-7
    epsilon: float = 1e-3
    xi_max: float = 100.0
    zero_mode_gate: float = 0.2
    # [output]
    out: str = "results"
    # [run]
    seed: int = 0
    workers: int = 1

    SECTIONS = {
        "grid": ("n", "box_half_width"),
        "model": ("amplitude_A", "amplitude_V", "width", "divergence_free", "coupling"),
        "sweep": ("lambda_list", "alpha_list", "delta", "m_order", "q", "p", "sigma_weight",
                  "k_ratio", "widths", "n_samples", "dt", "n_steps", "boost", "energy_window",
                  "n_probes", "m_max"),
        "tolerances": ("norm_tol", "max_iter", "solve_tol", "epsilon", "xi_max",
                       "zero_mode_gate"),
        "output": ("out",),
        "run": ("seed", "workers"),
    }
    # excluded from the hash: they do not change results
    UNHASHED = ("out", "workers")

    def set(self, key: str, raw):
        if not hasattr(self, key):
            raise ConfigError(f"unknown key {key!r}")
        cur = getattr(self, key)
        try:
            if isinstance(cur, bool):
                val = raw if isinstance(raw, bool) else str(raw).strip().lower() in (
                    "1", "true", "yes", "on")
            elif key == "m_order":
                val = _ints(raw)
            elif isinstance(cur, list):
                val = _floats(raw)
            elif isinstance(cur, int):
                val = int(raw)
            elif isinstance(cur, float):
                val = float(raw)
            else:
                val = str(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        setattr(self, key, val)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        cfg = cls()
        for sec in cp.sections():
            if sec not in cls.SECTIONS:
                raise ConfigError(f"unknown section [{sec}]")
            for key, raw in cp.items(sec):
                if key not in cls.SECTIONS[sec]:
                    raise ConfigError(f"unknown key {key!r} in [{sec}]")
                cfg.set(key, raw)
        return cfg

    def validate(self, name: str):
        if self.n < 8 or self.n & (self.n - 1):
            raise ConfigError("grid n must be a power of two >= 8")
        if not self.box_half_width > 0:
            raise ConfigError("box_half_width must be positive")
        needs = {"resolvent-scan": ("lambda_list", "alpha_list"),
                 "limap-scan": ("lambda_list", "alpha_list"),
                 "multiplier-check": ("delta",), "pv-check": ("lambda_list",),
                 "cone-decay": ("lambda_list", "delta"),
                 "power-scan": ("lambda_list", "m_order"), "strichartz": ("widths",)}
        for key in needs.get(name, ()):
            if not getattr(self, key):
                raise ConfigError(f"sweep {key} is empty")
        if name != "chain-budget" and not self.sigma_weight > 4:
            raise ConfigError("sigma_weight must exceed 4")
        if any(not 0 <= a <= 1 for a in self.alpha_list):
            raise ConfigError("alpha values must lie in [0, 1]")
        if any(lam <= 0 for lam in self.lambda_list):
            raise ConfigError("lambda values must be positive")
        if len(self.energy_window) != 2 or self.energy_window[0] >= self.energy_window[1]:
            raise ConfigError("energy_window needs two increasing values")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in self.UNHASHED}
        s = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(s.encode("utf-8")).hexdigest()


# ------------------------------------------------------------ helpers

def _grid(cfg):
    from .grid import make_grid
    return make_grid(cfg.n, cfg.box_half_width)


def _model(cfg, grid=None):
    from .potentials import make_gaussian_model
    return make_gaussian_model(cfg.amplitude_A, cfg.amplitude_V, cfg.width,
                               grid if grid is not None else _grid(cfg),
                               cfg.divergence_free, coupling=cfg.coupling,
                               decay_sigma=cfg.sigma_weight)


def fit_slope(x, y):
    """Log-log least-squares slope; None when fewer than two usable points."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = np.isfinite(x) & np.isfinite(y) & (x > 0) & (y > 0)
    if ok.sum() < 2:
        return None
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def _sort_key(row, cols):
    key = []
    for c in cols:
        v = row.get(c)
        if isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool):
            key.append((0, float(v), ""))
        else:
            key.append((1, 0.0, _fmt(v)))
    return key


def emit_plot_data(rows, kind: str, out_dir, config_hash: str = "", meta: dict | None = None):
    """Write ``<kind>.csv`` and ``<kind>.meta.json``; returns both paths.

    Rows are sorted on the documented columns so that the result does not
    depend on worker scheduling.  An empty result gives a header-only CSV.
    """
    cols = COLUMNS.get(kind) or sorted({k for r in rows for k in r})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = sorted(rows, key=lambda r: _sort_key(r, cols))
    csv_path = out / f"{kind}.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_hash: {config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])
    meta = dict(meta or {})
    meta.update(kind=kind, config_hash=config_hash, columns=cols, n_rows=len(rows))
    meta_path = out / f"{kind}.meta.json"
    with open(meta_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_clean(meta), fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")
    return csv_path, meta_path


def _pool_map(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items))


@dataclass
class Outcome:
    rows: list
    meta: dict
    checks: list        # (name, ok, detail)
    summary: str


def _check(name, ok, detail) -> tuple:
    return (name, bool(ok), detail)


# ------------------------------------------------------------ workers

def _resolvent_task(args):
    cfg, lam, alpha, with_model = args
    from .bs_ops import limap_scan
    m = _model(cfg) if with_model else None
    r = limap_scan(m, [lam], alpha, cfg.sigma_weight, cfg.norm_tol, cfg.box_half_width,
                   cfg.k_ratio, cfg.max_iter, cfg.solve_tol, cfg.seed)[0]
    return {"alpha": alpha, "lambda": lam, "n": r["n"], "value": r["raw_norm"],
            "normalized": r["normalized_norm"], "iterations": r["iterations"],
            "residual": r["residual"], "status": r["status"]}


def _pv_task(args):
    cfg, lam, i = args
    from .cones import pv_shell_integral, random_shell_function, shell_bound_terms
    ss = np.random.SeedSequence([cfg.seed, i])
    phi = random_shell_function(np.random.default_rng(ss), lam)
    v = pv_shell_integral(phi, lam)
    l1, hold = shell_bound_terms(phi, lam)
    return {"lambda": lam, "sample": i, "abs_value": abs(v), "l1": l1, "holder": hold,
            "ratio": abs(v) / (l1 + hold)}


def _cone_task(args):
    cfg, lam, delta = args
    from .cones import antipodal_caps, clear_cone_cache, two_cone_composition_norm
    from .resolvent import clear_kernel_cache, grid_for_lambda
    base = _grid(cfg)
    g = grid_for_lambda(lam, cfg.box_half_width, cfg.k_ratio, h_max=base.spacing)
    m = _model(cfg, g)
    c1, c2 = antipodal_caps(delta)
    row = {"delta": delta, "lambda": lam, "n": g.n}
    try:
        e = two_cone_composition_norm(m, c1, c2, lam, tol=cfg.norm_tol, max_iter=cfg.max_iter)
        row.update(value=e.value, iterations=e.iterations, residual=e.residual, status="ok")
    except Exception as exc:
        row.update(value=float("nan"), iterations=0, residual=float("nan"),
                   status=f"error: {exc}")
    clear_cone_cache()
    clear_kernel_cache()
    return row


def _power_task(args):
    cfg, lam, mo = args
    from .cones import power_norm_scan
    r = power_norm_scan(_model(cfg), mo, [lam], cfg.sigma_weight, cfg.norm_tol,
                        cfg.box_half_width, cfg.k_ratio, cfg.max_iter, main_term=False,
                        seed=cfg.seed)[0]
    return {"m": mo, "lambda": lam, "n": r["n"], "value": r["norm"],
            "main_value": r["main_norm"], "iterations": r["iterations"],
            "residual": r["residual"], "status": r["status"]}


def _strichartz_task(args):
    cfg, s = args
    from .evolution import AdmissiblePair, free_gaussian, propagate, strichartz_norm
    from .grid import l2_norm
    g = _grid(cfg)
    m = _model(cfg, g)
    f = free_gaussian(g, s, 0.0)
    f = f / l2_norm(f, g)
    T = s * s
    run = propagate(m, f, T / cfg.n_steps, cfg.n_steps)
    return {"width": s, "q": cfg.q, "p": cfg.p, "horizon": run.horizon,
            "value": strichartz_norm(run, AdmissiblePair(cfg.q, cfg.p)),
            "energy_norm": strichartz_norm(run, AdmissiblePair(np.inf, 2.0)),
            "total_drift": run.total_drift}


def _smoothing_task(args):
    cfg, flow = args
    from .evolution import free_gaussian, propagate, smoothing_norm
    from .grid import l2_norm
    from .potentials import zero_model
    g = _grid(cfg)
    m = zero_model(g) if flow == "free" else _model(cfg, g)
    f = free_gaussian(g, 1.0, 0.0) * np.exp(1j * cfg.boost * g.coords()[0])
    f = f / l2_norm(f, g)
    run = propagate(m, f, cfg.dt, cfg.n_steps)
    rows = []
    for T in (0.5 * run.horizon, run.horizon):
        r = smoothing_norm(run, cfg.sigma_weight, T)
        rows.append({"flow": flow, "horizon": r.horizon, "value": r.value, "tail": r.tail})
    return rows


# ------------------------------------------------------------ subcommands

def _scan_flatness(rows, cfg, normalized_key):
    meta, checks = {"fit_slopes": {}}, []
    for a in sorted({r["alpha"] for r in rows}):
        sub = [r for r in rows if r["alpha"] == a]
        lam = [r["lambda"] for r in sub]
        meta["fit_slopes"][f"alpha={a:g}"] = fit_slope(lam, [r["value"] for r in sub])
        vals = np.array([r[normalized_key] for r in sub], float)
        if len(sub) >= 2 and np.all(np.isfinite(vals)) and vals.min() > 0:
            meta.setdefault("spread", {})[f"alpha={a:g}"] = float(vals.max() / vals.min())
    return meta, checks


def cmd_resolvent_scan(cfg) -> Outcome:
    items = [(cfg, lam, a, False) for a in cfg.alpha_list for lam in cfg.lambda_list]
    rows = _pool_map(_resolvent_task, items, cfg.workers)
    meta, checks = _scan_flatness(rows, cfg, "value")
    for key, slope in meta["fit_slopes"].items():
        a = float(key.split("=")[1])
        if slope is None:
            continue
        if a == 0:
            checks.append(_check("alpha=0 slope in [-1.15,-0.85]", -1.15 <= slope <= -0.85, slope))
        elif a == 1:
            checks.append(_check("alpha=1 slope in [0.7,1.3]", 0.7 <= slope <= 1.3, slope))
    if "spread" in meta and "alpha=0.5" in meta["spread"]:
        sp = meta["spread"]["alpha=0.5"]
        checks.append(_check("alpha=1/2 max/min <= 2.5", sp <= 2.5, sp))
    return Outcome(rows, meta, checks, f"slopes {meta['fit_slopes']}")


def cmd_limap_scan(cfg) -> Outcome:
    from .bs_ops import zero_mode_check
    m = _model(cfg)
    items = [(cfg, lam, a, True) for a in cfg.alpha_list for lam in cfg.lambda_list]
    rows = _pool_map(_resolvent_task, items, cfg.workers)
    meta, checks = _scan_flatness(rows, cfg, "normalized")
    for key, sp in meta.get("spread", {}).items():
        if float(key.split("=")[1]) <= 0.5:
            checks.append(_check(f"{key} normalized max/min <= 3", sp <= 3.0, sp))
    if not m.is_zero:
        zm = zero_mode_check(m, sigma=cfg.sigma_weight, seed=cfg.seed).value
        meta["zero_mode"] = zm
        checks.append(_check("zero-mode gate", zm >= cfg.zero_mode_gate, zm))
    return Outcome(rows, meta, checks, f"spread {meta.get('spread', {})}")


def cmd_multiplier_check(cfg) -> Outcome:
    from .cones import make_cap_partition, multiplier_case_check
    rows, checks = [], []
    for d in cfg.delta:
        cap = make_cap_partition(d).caps[0]
        for r in multiplier_case_check(cap, d, cfg.epsilon, cfg.n_samples, cfg.seed, cfg.xi_max):
            rows.append(r)
            if r["samples"] == 0:
                continue
            checks.append(_check(f"delta={d:g} case {r['case']} ratio <= 50",
                                 r["max_ratio"] <= 50.0, r["max_ratio"]))
            if r["case"] in (2, 3, 4):
                checks.append(_check(f"delta={d:g} case {r['case']} slope -2 +/- 0.4",
                                     abs(r["slope"] + 2.0) <= 0.4, r["slope"]))
    worst = max((r["max_ratio"] for r in rows if r["samples"]), default=float("nan"))
    return Outcome(rows, {}, checks, f"worst case ratio {worst:.3g}")


def cmd_pv_check(cfg) -> Outcome:
    items = [(cfg, lam, i) for lam in cfg.lambda_list for i in range(cfg.n_samples)]
    rows = _pool_map(_pv_task, items, cfg.workers)
    worst = max((r["ratio"] for r in rows), default=float("nan"))
    checks = [_check("shell ratio <= 20", worst <= 20.0, worst)] if rows else []
    return Outcome(rows, {"worst_ratio": worst}, checks, f"worst ratio {worst:.3g}")


def cmd_cone_decay(cfg) -> Outcome:
    items = [(cfg, lam, d) for d in cfg.delta for lam in cfg.lambda_list]
    rows = _pool_map(_cone_task, items, cfg.workers)
    meta, checks = {"fit_slopes": {}}, []
    for d in cfg.delta:
        sub = [r for r in rows if r["delta"] == d]
        s = fit_slope([r["lambda"] for r in sub], [r["value"] for r in sub])
        meta["fit_slopes"][f"delta={d:g}"] = s
        if s is not None:
            checks.append(_check(f"delta={d:g} slope in [-1.3,-0.7]", -1.3 <= s <= -0.7, s))
    return Outcome(rows, meta, checks, f"slopes {meta['fit_slopes']}")


def cmd_chain_budget(cfg) -> Outcome:
    from .cones import chain_budget_report, log_total
    d = cfg.delta[0] if cfg.delta else None
    rule = (lambda m: 1.0 / (10.0 * m)) if d is None or d <= 0 else d
    rep = chain_budget_report(rule, cfg.m_max)
    rows = []
    for r in rep["rows"]:
        r = dict(r)
        r["log_total"] = log_total(r["m"], r["delta"], rep["c6"])
        rows.append(r)
    meta = {k: v for k, v in rep.items() if k != "rows"}
    return Outcome(rows, meta, [], f"first m below target: {rep['first_m_below_target']}")


def cmd_power_scan(cfg) -> Outcome:
    items = [(cfg, lam, mo) for mo in cfg.m_order for lam in cfg.lambda_list]
    rows = _pool_map(_power_task, items, cfg.workers)
    meta, checks = {"fit_slopes": {}}, []
    for mo in sorted(set(cfg.m_order)):
        sub = [r for r in rows if r["m"] == mo]
        meta["fit_slopes"][f"m={mo}"] = fit_slope([r["lambda"] for r in sub],
                                                  [r["value"] for r in sub])
    orders = sorted(set(cfg.m_order))
    if len(orders) >= 2:
        for lam in sorted(set(cfg.lambda_list)):
            vals = [next(r["value"] for r in rows if r["m"] == mo and r["lambda"] == lam)
                    for mo in orders]
            checks.append(_check(f"lambda={lam:g} decreasing in m",
                                 all(b < a for a, b in zip(vals, vals[1:])), vals))
    s1 = meta["fit_slopes"].get(f"m={orders[0]}")
    if orders[0] == 1 and s1 is not None:
        checks.append(_check("m=1 slope > -0.3", s1 > -0.3, s1))
    return Outcome(rows, meta, checks, f"slopes {meta['fit_slopes']}")


def cmd_zero_mode(cfg) -> Outcome:
    from .bs_ops import zero_mode_check
    e = zero_mode_check(_model(cfg), sigma=cfg.sigma_weight, max_iter=cfg.max_iter,
                        seed=cfg.seed)
    row = {"sigma": cfg.sigma_weight, "value": e.value, "iterations": e.iterations,
           "residual": e.residual, "converged": e.converged}
    ok = e.value >= cfg.zero_mode_gate
    return Outcome([row], {}, [_check("zero-mode gate", ok, e.value)],
                   f"smallest singular value {e.value:.4g}")


def cmd_strichartz(cfg) -> Outcome:
    from .evolution import AdmissiblePair
    AdmissiblePair(cfg.q, cfg.p)       # rejects the endpoint before any work
    rows = _pool_map(_strichartz_task, [(cfg, s) for s in cfg.widths], cfg.workers)
    vals = np.array([r["value"] for r in rows])
    var = float(vals.max() / vals.min())
    e2 = max(abs(r["energy_norm"] - 1.0) for r in rows)
    checks = [_check("(inf,2) norm = ||f|| to 1e-10", e2 <= 1e-10, e2),
              _check("dilation variation <= 20%", var <= 1.2, var)]
    return Outcome(rows, {"variation": var}, checks, f"variation {var:.6f}")


def cmd_smoothing(cfg) -> Outcome:
    flows = ["free"] if _model(cfg).is_zero else ["free", "model"]
    rows = [r for rs in _pool_map(_smoothing_task, [(cfg, f) for f in flows], cfg.workers)
            for r in rs]
    meta, checks = {"change": {}}, []
    for f in flows:
        a, b = sorted((r for r in rows if r["flow"] == f), key=lambda r: r["horizon"])
        ch = abs(b["value"] / a["value"] - 1.0)
        meta["change"][f] = ch
        checks.append(_check(f"{f} horizon doubling change <= 5%", ch <= 0.05, ch))
    return Outcome(rows, meta, checks, f"change {meta['change']}")


def cmd_katoth_budget(cfg) -> Outcome:
    from .evolution import strichartz_budget_check
    rep = strichartz_budget_check(_model(cfg), (cfg.q, cfg.p), n_probes=2, seed=cfg.seed,
                                  horizon=cfg.n_steps * cfg.dt, dt=cfg.dt,
                                  sigma_weight=cfg.sigma_weight)
    d = rep.to_dict()
    row = {k: d[k] for k in COLUMNS["katoth-budget"] if k in d}
    row.update(q=float(rep.pair[0]), p=float(rep.pair[1]))
    return Outcome([row], {"window": list(rep.window)},
                   [_check("lhs <= 1.5 budget", rep.ratio <= 1.5, rep.ratio)],
                   f"ratio {rep.ratio:.4g} (literal {rep.literal_ratio:.4g})")


def cmd_virial(cfg) -> Outcome:
    from .evolution import bound_states
    from .grid import random_field
    from .potentials import zero_model
    from .spectral_diag import grad_norm2, hk2_rhs, virial_bracket
    g = _grid(cfg)
    z = zero_model(g)
    rng = np.random.default_rng(cfg.seed)
    band = min(3.0, 0.5 * g.frequency_cutoff)
    rows = []
    for i in range(cfg.n_samples):
        psi = random_field(g, rng, band, g.box_half_width / 4)
        gn = grad_norm2(psi, g)
        rows.append({"kind": "free", "sample": i, "energy": gn,
                     "rel_error": abs(virial_bracket(z, psi) - 2 * gn) / (2 * gn)})
    checks = []
    free_worst = max((r["rel_error"] for r in rows), default=0.0)
    checks.append(_check("free virial <= 1e-6", free_worst <= 1e-6, free_worst))
    m = _model(cfg, g)
    if not m.is_zero:
        bs = bound_states(m, n_max=1)
        for i, (E, psi) in enumerate(zip(bs.energies, bs.states)):
            d = abs(virial_bracket(m, psi) - hk2_rhs(m, psi, E).real) / (2 * abs(E))
            rows.append({"kind": "bound", "sample": i, "energy": float(E), "rel_error": d})
            checks.append(_check("bound-state identity <= 1e-4", d <= 1e-4, d))
    return Outcome(rows, {}, checks, f"free worst {free_worst:.3g}")


def cmd_embedded_scan(cfg) -> Outcome:
    from .spectral_diag import embedded_eigenvalue_scan
    lo, hi = cfg.energy_window
    rep = embedded_eigenvalue_scan(_model(cfg), (lo, hi), n_probes=cfg.n_probes, seed=cfg.seed,
                                   require_positive=lo > 0)
    rows = []
    for i, c in enumerate(rep.probes):
        d = c.to_dict()
        rows.append({"probe": i, "E": d["E"], "residual": d["residual"],
                     "virial_defect": d["virial_defect"],
                     "outside_fraction": d["outside_fraction"], "verdict": d["verdict"]})
    n = len(rep.passing)
    meta = {"window": [lo, hi], "n_passing": n, "failures": rep.failures}
    checks = [_check("no embedded candidates", n == 0, n)] if lo > 0 else []
    return Outcome(rows, meta, checks, f"{n} passing candidate(s) in ({lo:g}, {hi:g})")


COMMANDS = {
    "resolvent-scan": cmd_resolvent_scan, "limap-scan": cmd_limap_scan,
    "multiplier-check": cmd_multiplier_check, "pv-check": cmd_pv_check,
    "cone-decay": cmd_cone_decay, "chain-budget": cmd_chain_budget,
    "power-scan": cmd_power_scan, "zero-mode": cmd_zero_mode, "strichartz": cmd_strichartz,
    "smoothing": cmd_smoothing, "katoth-budget": cmd_katoth_budget, "virial": cmd_virial,
    "embedded-scan": cmd_embedded_scan,
}


def run_subcommand(name: str, cfg: ExperimentConfig) -> int:
    """Run one harness, write its files and return the exit status."""
    if name not in COMMANDS:
        raise ConfigError(f"unknown subcommand {name!r}")
    cfg.validate(name)
    from .grid import set_fft_workers
    set_fft_workers(1)
    res = COMMANDS[name](cfg)
    bad = [r for r in res.rows if str(r.get("status", "ok")).startswith("error")]
    if bad:
        # rows that could not be computed never count as a pass
        res.checks.append(_check("all rows computed", False, len(bad)))
    failed = [c for c in res.checks if not c[1]]
    meta = dict(res.meta)
    meta["checks"] = [{"name": c[0], "ok": c[1], "value": c[2]} for c in res.checks]
    meta["status"] = "violation" if failed else "ok"
    meta["config"] = {k: v for k, v in cfg.to_dict().items() if k not in cfg.UNHASHED}
    emit_plot_data(res.rows, name, cfg.out, cfg.hash(), meta)
    tag = "VIOLATION" if failed else "ok"
    extra = "; failed: " + ", ".join(c[0] for c in failed) if failed else ""
    print(f"{name}: {tag}: {res.summary}{extra}")
    return 2 if failed else 0


# ------------------------------------------------------------ argparse

OVERRIDES = (("--lambda-list", "lambda_list"), ("--delta", "delta"), ("--m-order", "m_order"),
             ("--alpha", "alpha_list"), ("--q", "q"), ("--p", "p"), ("--sigma", "sigma_weight"),
             ("--out", "out"), ("--seed", "seed"), ("--workers", "workers"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="magstrich", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", metavar="PATH")
        for flag, _ in OVERRIDES:
            sp.add_argument(flag)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:   # argparse reports usage errors with status 2
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
        for flag, key in OVERRIDES:
            val = getattr(args, flag.lstrip("-").replace("-", "_"))
            if val is not None:
                cfg.set(key, val)
        for kv in args.set:
            key, _, val = kv.partition("=")
            cfg.set(key.strip(), val)
        return run_subcommand(args.command, cfg)
    except Exception as exc:
        print(f"{args.command}: error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
