"""Campaign orchestration: configs, deterministic run directories, and the
work behind each CLI command.

A run is fully specified by one hierarchical config: built-in defaults
overlaid with an optional YAML file and then with CLI flags.  Every random
draw derives from master_seed through a labeled SeedSequence path, so two
runs of the same command from the same config produce byte-identical
artifacts.  Outputs are staged under quarantine/<run-id> and promoted to
results/<run-id> only once every file is written; the run id hashes the
canonical config text together with the command name, so different commands
from one config land in sibling directories.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import platform
import shutil
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .darkmatter import (
    OMEGA_M_OFFSET,
    HaloParams,
    SearchPoint,
    coherence_time,
    g_curve_to_csv,
    g_of_t,
    lineshape_to_csv,
)
from .errors import (
    ConfigError,
    MissingArtifact,
    MissingCalibration,
)
from .fits import (
    CalibrationCurve,
    ExclusionPoint,
    FrequencyBin,
    SearchSeries,
    background_subtract,
    calibrate_detector,
    enhancement_factor,
    epsilon_limit,
    exclusion_to_csv,
    fit_result_to_json,
    search_fit,
    sweep_to_csv,
    threshold_sweep,
)
from .fock import (
    CatSpec,
    PhaseGrid,
    cat_state,
    required_dim,
    wigner,
    wigner_to_csv,
)
from .hmm import batch_posteriors, build_model, postselect
from .lindblad import transition_curves_to_csv
from .measurement import (
    DeviceParams,
    DMInjection,
    TrialConfig,
    records_to_jsonl,
    run_campaign,
)

COMMANDS = ("calibrate", "search", "tune-scan", "figures", "simulate-record")

DEFAULT_CONFIG = {
    "master_seed": 20260818,
    "device": {
        "omega_c": 2.0 * math.pi * 6.442e9,
        "chi": 2.0 * math.pi * 0.6e6,
        "T1c": 4.6e-3,
        "T1q": 175.3e-6,
        "T2q": 119.4e-6,
        "n_c": 1e-4,
        "n_q": 0.013,
        "t_m": 1.9e-6,
        "readout_Fge": 0.01,
        "readout_Fge_inv": 0.01,
        "p_d": 0.013,
        "p_leak": 0.002,
    },
    "halo": {"rho_dm": 0.4, "v_vir": 220.0, "v_g": 232.0},
    "point": {"m_dm": 2.0 * math.pi * 6.442e9, "omega_c": None, "v_eff": 4.45},
    "probes": [
        {"kind": "vacuum"},
        {"kind": "compass", "alpha_sq": 12.0},
    ],
    "repeats": 20,
    "thresholds": {"compass": 84.0, "vacuum": 1e5},
    "calibration": {
        "trials": 1500,
        "betas": [0.0, 0.05, 0.1, 0.15, 0.2],
        "self_calibrate": True,
        "path": None,
    },
    "search": {
        "trials": 1200,
        "tau_grid": [float(t) for t in np.geomspace(2e-5, 1.4e-4, 6)],
        "inject_epsilon": None,
    },
    "scan": {
        "trials": 800,
        "bins": 16,
        "spacing_hz": 6.0e3,
        "t1c": 4.6e-3,
        "alpha_sq": 12.0,
        "inject_epsilon": None,
        "inject_bin": None,
    },
    "records": {
        "trials": 64,
        "probe": {"kind": "compass", "alpha_sq": 4.0},
        "injected_beta": 0.0,
    },
}


# ---------------------------------------------------------------------------
# config handling


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        cur = base[key]
        if isinstance(cur, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(cur, val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None) -> dict:
    """Defaults overlaid with a YAML file; unknown keys are rejected."""
    cfg = default_config()
    if path is None:
        return cfg
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        loaded = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {p} is not valid YAML: {exc}") from None
    if loaded is None:
        return cfg
    if not isinstance(loaded, dict):
        raise ConfigError(f"config file {p} must hold a mapping at the top level")
    return _merge(cfg, loaded)


def apply_overrides(
    cfg: dict,
    seed=None,
    threshold=None,
    trials=None,
    bins=None,
    tau_max=None,
) -> dict:
    """Fold CLI flags into a loaded config; flags win over the file."""
    out = copy.deepcopy(cfg)
    if seed is not None:
        out["master_seed"] = int(seed)
    if threshold is not None:
        out["thresholds"]["compass"] = float(threshold)
    if trials is not None:
        for section in ("calibration", "search", "scan", "records"):
            out[section]["trials"] = int(trials)
    if bins is not None:
        out["scan"]["bins"] = int(bins)
    if tau_max is not None:
        kept = [t for t in out["search"]["tau_grid"] if t <= float(tau_max)]
        if not kept:
            raise ConfigError(f"tau-max {tau_max!r} leaves no search times")
        out["search"]["tau_grid"] = kept
    return out


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _check_probe(p, where: str) -> None:
    _require(isinstance(p, dict), f"{where} must be a mapping")
    kind = p.get("kind")
    _require(
        kind in ("vacuum", "compass"),
        f"{where}.kind must be 'vacuum' or 'compass', got {kind!r}",
    )
    extra = set(p) - {"kind", "alpha_sq"}
    _require(not extra, f"{where} has unknown keys {sorted(extra)}")
    if kind == "compass":
        a2 = p.get("alpha_sq")
        _require(
            _is_num(a2) and a2 > 0,
            f"{where}.alpha_sq must be > 0 for compass probes, got {a2!r}",
        )


def build_device(cfg: dict) -> DeviceParams:
    try:
        return DeviceParams(**cfg["device"])
    except TypeError as exc:
        raise ConfigError(f"config section 'device': {exc}") from None


def build_halo(cfg: dict) -> HaloParams:
    try:
        return HaloParams(**cfg["halo"])
    except TypeError as exc:
        raise ConfigError(f"config section 'halo': {exc}") from None


def build_point(cfg: dict) -> SearchPoint:
    d = cfg["point"]
    try:
        return SearchPoint(m_dm=d["m_dm"], omega_c=d["omega_c"], v_eff=d["v_eff"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"config section 'point': {exc}") from None


def validate_config(cfg: dict) -> None:
    """Raise ConfigError on a bad config; warn when the search schedule
    reaches beyond the DM coherence time (allowed, but worth flagging)."""
    seed = cfg.get("master_seed")
    _require(
        isinstance(seed, int) and not isinstance(seed, bool) and seed >= 0,
        f"master_seed must be a non-negative integer, got {seed!r}",
    )
    device = build_device(cfg)
    halo = build_halo(cfg)
    point = build_point(cfg)
    probes = cfg["probes"]
    _require(isinstance(probes, list) and probes, "probes must be a non-empty list")
    for i, p in enumerate(probes):
        _check_probe(p, f"probes[{i}]")
    labels = [_probe_parts(p)[2] for p in probes]
    _require(len(set(labels)) == len(labels), "probes must be distinct")
    _require(
        isinstance(cfg["repeats"], int) and cfg["repeats"] >= 1,
        f"repeats must be an integer >= 1, got {cfg['repeats']!r}",
    )
    for mode in ("compass", "vacuum"):
        t = cfg["thresholds"][mode]
        _require(_is_num(t) and t > 0, f"thresholds.{mode} must be > 0, got {t!r}")
    cal = cfg["calibration"]
    _require(
        isinstance(cal["trials"], int) and cal["trials"] >= 1,
        f"calibration.trials must be an integer >= 1, got {cal['trials']!r}",
    )
    betas = cal["betas"]
    _require(isinstance(betas, list) and betas, "calibration.betas must be non-empty")
    _require(
        all(_is_num(b) and b >= 0 for b in betas),
        "calibration.betas must all be >= 0",
    )
    _require(
        len({float(b) for b in betas}) >= 3,
        "calibration.betas needs at least 3 distinct values",
    )
    _require(
        isinstance(cal["self_calibrate"], bool),
        f"calibration.self_calibrate must be true or false, got {cal['self_calibrate']!r}",
    )
    _require(
        cal["path"] is None or isinstance(cal["path"], str),
        f"calibration.path must be a string or null, got {cal['path']!r}",
    )
    sr = cfg["search"]
    _require(
        isinstance(sr["trials"], int) and sr["trials"] >= 1,
        f"search.trials must be an integer >= 1, got {sr['trials']!r}",
    )
    taus = sr["tau_grid"]
    _require(isinstance(taus, list) and taus, "search.tau_grid must be non-empty")
    _require(all(_is_num(t) and t > 0 for t in taus), "search.tau_grid must be > 0")
    eps = sr["inject_epsilon"]
    _require(
        eps is None or (_is_num(eps) and eps >= 0),
        f"search.inject_epsilon must be >= 0 or null, got {eps!r}",
    )
    sc = cfg["scan"]
    _require(
        isinstance(sc["trials"], int) and sc["trials"] >= 1,
        f"scan.trials must be an integer >= 1, got {sc['trials']!r}",
    )
    _require(
        isinstance(sc["bins"], int) and sc["bins"] >= 2,
        f"scan.bins must be an integer >= 2, got {sc['bins']!r}",
    )
    _require(
        _is_num(sc["spacing_hz"]) and sc["spacing_hz"] > 0,
        f"scan.spacing_hz must be > 0, got {sc['spacing_hz']!r}",
    )
    _require(
        _is_num(sc["t1c"]) and sc["t1c"] > 0,
        f"scan.t1c must be > 0, got {sc['t1c']!r}",
    )
    _require(
        _is_num(sc["alpha_sq"]) and sc["alpha_sq"] > 0,
        f"scan.alpha_sq must be > 0, got {sc['alpha_sq']!r}",
    )
    seps = sc["inject_epsilon"]
    _require(
        seps is None or (_is_num(seps) and seps >= 0),
        f"scan.inject_epsilon must be >= 0 or null, got {seps!r}",
    )
    jbin = sc["inject_bin"]
    _require(
        jbin is None or (isinstance(jbin, int) and 0 <= jbin < sc["bins"]),
        f"scan.inject_bin must be a bin index below scan.bins, got {jbin!r}",
    )
    rc = cfg["records"]
    _require(
        isinstance(rc["trials"], int) and rc["trials"] >= 1,
        f"records.trials must be an integer >= 1, got {rc['trials']!r}",
    )
    _check_probe(rc["probe"], "records.probe")
    _require(
        _is_num(rc["injected_beta"]) and rc["injected_beta"] >= 0,
        f"records.injected_beta must be >= 0, got {rc['injected_beta']!r}",
    )
    del device
    tau_dm = coherence_time(point, halo)
    worst = max(float(t) for t in taus)
    if worst >= tau_dm:
        warnings.warn(
            f"search times reach {worst:.3g} s, at or beyond the DM "
            f"coherence time {tau_dm:.3g} s; the signal shape saturates there"
        )


def canonical_config_text(cfg: dict) -> str:
    """Stable textual form of a config: sorted keys, plain scalars."""
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def config_sha256(cfg: dict) -> str:
    return hashlib.sha256(canonical_config_text(cfg).encode("utf-8")).hexdigest()


def run_id(cfg: dict, command: str) -> str:
    """Directory name for one (config, command) pair."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    text = canonical_config_text(cfg) + f"command: {command}\n"
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


_STAGE_IDS = {"calibrate": 1, "search": 2, "tune": 3, "figures": 4, "records": 5}


def derive_seed(master: int, stage: str, *indices) -> int:
    """Labeled child seed.  Each (stage, indices) path owns its own stream,
    so enlarging one campaign never shifts the draws of another."""
    try:
        sid = _STAGE_IDS[stage]
    except KeyError:
        raise ConfigError(f"unknown seed stage {stage!r}") from None
    ss = np.random.SeedSequence([int(master), sid, *[int(i) for i in indices]])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


# ---------------------------------------------------------------------------
# run directories


def module_versions() -> dict:
    return {
        "catscope": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


@dataclass(frozen=True)
class RunManifest:
    """What produced a run directory: the command, the config hash, the seed,
    library versions, and a name -> sha256 registry of the artifacts.

    wall_clock_s is carried for reporting but left out of the JSON: reruns
    of the same config must be byte-identical, so timing goes to the log
    sidecar instead.
    """

    command: str
    run_id: str
    config_sha256: str
    master_seed: int
    versions: dict
    files: dict
    wall_clock_s: float = 0.0

    def to_json(self) -> str:
        body = {
            "command": self.command,
            "run_id": self.run_id,
            "config_sha256": self.config_sha256,
            "master_seed": self.master_seed,
            "versions": dict(self.versions),
            "files": dict(self.files),
        }
        return json.dumps(body, sort_keys=True, indent=2) + "\n"


class RunWriter:
    """Stage artifacts in quarantine/<run-id>, promote on success.

    A failure mid-run leaves the quarantine directory behind for inspection
    and never touches results/; promote replaces any previous result
    directory atomically (rename within the same tree)."""

    def __init__(self, out_root, run_id: str):
        self.out_root = Path(out_root)
        self.run_id = run_id
        self.stage_dir = self.out_root / "quarantine" / run_id
        self.final_dir = self.out_root / "results" / run_id
        self.hashes: dict[str, str] = {}
        if self.stage_dir.exists():
            shutil.rmtree(self.stage_dir)
        self.stage_dir.mkdir(parents=True)

    def write(self, name: str, text: str) -> None:
        if "/" in name or name.startswith("."):
            raise ConfigError(f"bad artifact name {name!r}")
        data = text.encode("utf-8")
        (self.stage_dir / name).write_bytes(data)
        self.hashes[name] = hashlib.sha256(data).hexdigest()

    def promote(self) -> Path:
        self.final_dir.parent.mkdir(parents=True, exist_ok=True)
        if self.final_dir.exists():
            shutil.rmtree(self.final_dir)
        self.stage_dir.replace(self.final_dir)
        return self.final_dir


# ---------------------------------------------------------------------------
# shared pieces


def _probe_parts(p: dict):
    """(init state, hmm mode, label, alpha_sq) for one probe entry."""
    if p["kind"] == "vacuum":
        return None, "vacuum", "vacuum", 1.0
    a2 = float(p["alpha_sq"])
    return CatSpec(alpha=math.sqrt(a2)), "compass", f"a{a2:g}", a2


def _count_positives(model, threshold: float, campaign):
    """(k_pos, n_kept, n_dropped) after post-selection and classification."""
    kept, dropped = postselect(campaign.records)
    if not kept:
        return 0, 0, dropped
    _, lam = batch_posteriors(model, kept)
    return int(np.sum(lam > threshold)), len(kept), dropped


# ---------------------------------------------------------------------------
# commands


def run_calibrate(cfg: dict, workers=None):
    """Mimic-displacement response curves, eta/delta fits per probe, and the
    cat enhancement against the vacuum probe.

    calibration.betas are vacuum-scale drives; the applied displacement is
    beta / alpha per probe, which holds the injected flip probability
    alpha_sq * |beta_applied|^2 fixed across probes.  Every probe then sees
    the same response range, inside the linear regime of the fit model."""
    device = build_device(cfg)
    master = cfg["master_seed"]
    repeats = cfg["repeats"]
    trials = cfg["calibration"]["trials"]
    betas = [float(b) for b in cfg["calibration"]["betas"]]
    rows = []
    curve_lines = ["probe,mode,alpha_sq,beta,n_inj,k_pos,n_kept,n_dropped"]
    for pi, probe in enumerate(cfg["probes"]):
        init, mode, label, a2 = _probe_parts(probe)
        model = build_model(device, alpha_sq=a2, mode=mode)
        thr = float(cfg["thresholds"][mode])
        pts = []
        for bi, beta in enumerate(betas):
            seed = derive_seed(master, "calibrate", pi, bi)
            applied = beta / math.sqrt(a2)
            tc = TrialConfig(
                init=init,
                injected_beta=applied if beta > 0 else None,
                repeats=repeats,
                rng_seed=seed,
            )
            camp = run_campaign(trials, tc, device, workers=workers)
            k, n_kept, n_drop = _count_positives(model, thr, camp)
            n_inj = applied * applied
            pts.append((n_inj, k, n_kept))
            curve_lines.append(
                f"{label},{mode},{a2!r},{applied!r},{n_inj!r},{k},{n_kept},{n_drop}"
            )
        fit = calibrate_detector(CalibrationCurve(tuple(pts), alpha_sq=a2))
        rows.append(
            {
                "label": label,
                "mode": mode,
                "alpha_sq": a2,
                "eta": fit.params["eta"],
                "eta_err": fit.stderr("eta"),
                "delta": fit.params["delta"],
                "delta_err": fit.stderr("delta"),
                "log_likelihood": fit.log_likelihood,
            }
        )
    eta0 = next((r["eta"] for r in rows if r["mode"] == "vacuum"), None)
    enh = {}
    for r in rows:
        if r["mode"] == "compass" and eta0 is not None and eta0 > 0.0:
            enh[r["label"]] = enhancement_factor(r["eta"], r["alpha_sq"], eta0)
    report = {"probes": rows, "enhancement": enh}
    files = {
        "calibration.json": json.dumps(report, sort_keys=True, indent=2) + "\n",
        "calibration.csv": "\n".join(curve_lines) + "\n",
    }
    summary = [
        f"{r['label']}: eta = {r['eta']:.4f} +- {r['eta_err']:.4f}, "
        f"delta = {r['delta']:.2e}"
        for r in rows
    ]
    summary += [f"enhancement {k}: {v:.2f}" for k, v in sorted(enh.items())]
    return files, summary


def _load_calibration(cfg: dict, workers=None):
    """eta per probe label.  calibration.path wins; otherwise self-calibrate
    (reusing the calibrate seeds, so the artifacts match a standalone run);
    otherwise there is nothing to analyze against."""
    cal = cfg["calibration"]
    if cal["path"] is not None:
        p = Path(cal["path"])
        if not p.exists():
            raise MissingCalibration(f"calibration file not found: {p}")
        try:
            report = json.loads(p.read_text())
            etas = {r["label"]: float(r["eta"]) for r in report["probes"]}
        except (KeyError, TypeError, ValueError) as exc:
            raise MissingCalibration(
                f"calibration file {p} is malformed: {exc}"
            ) from None
        return etas, {}
    if cal["self_calibrate"]:
        files, _ = run_calibrate(cfg, workers=workers)
        report = json.loads(files["calibration.json"])
        etas = {r["label"]: float(r["eta"]) for r in report["probes"]}
        return etas, files
    raise MissingCalibration(
        "no calibration available: set calibration.path or calibration.self_calibrate"
    )


def run_search(cfg: dict, workers=None):
    """Integration-time scan per probe, the pooled signal fit, and the
    kinetic-mixing exclusion point at the configured mass."""
    device = build_device(cfg)
    halo = build_halo(cfg)
    point = build_point(cfg)
    master = cfg["master_seed"]
    repeats = cfg["repeats"]
    sr = cfg["search"]
    taus = [float(t) for t in sr["tau_grid"]]
    eps = sr["inject_epsilon"]
    etas_by_label, files = _load_calibration(cfg, workers=workers)
    series = []
    etas = []
    rate_lines = ["probe,alpha_sq,tau,k_pos,n_kept,n_dropped,eta"]
    record_chunks = []
    for pi, probe in enumerate(cfg["probes"]):
        init, mode, label, a2 = _probe_parts(probe)
        if label not in etas_by_label:
            raise MissingCalibration(f"calibration has no entry for probe {label!r}")
        eta = etas_by_label[label]
        model = build_model(device, alpha_sq=a2, mode=mode)
        thr = float(cfg["thresholds"][mode])
        ks, ns = [], []
        for ti, tau in enumerate(taus):
            seed = derive_seed(master, "search", pi, ti)
            dm = DMInjection(float(eps), point, tau, halo) if eps else None
            tc = TrialConfig(init=init, dm=dm, repeats=repeats, rng_seed=seed)
            camp = run_campaign(sr["trials"], tc, device, workers=workers)
            k, n_kept, n_drop = _count_positives(model, thr, camp)
            ks.append(k)
            ns.append(n_kept)
            rate_lines.append(
                f"{label},{a2!r},{tau!r},{k},{n_kept},{n_drop},{eta!r}"
            )
            record_chunks.append(records_to_jsonl(camp.records))
        series.append(SearchSeries(a2, tuple(taus), tuple(ks), tuple(ns)))
        etas.append(eta)
    tau_dm = coherence_time(point, halo)
    fit = search_fit(
        series, lambda t: g_of_t(t, point, halo), tuple(etas), tau_warn=tau_dm
    )
    a0 = fit.params["a0"]
    sig = fit.stderr("a0")
    lim = epsilon_limit(a0, sig, point, halo)
    files = dict(files)
    files["rates.csv"] = "\n".join(rate_lines) + "\n"
    files["fit.json"] = fit_result_to_json(fit)
    files["limits.csv"] = exclusion_to_csv([lim])
    files["records.jsonl"] = "".join(record_chunks)
    flag = " (boundary)" if fit.boundary_hit else ""
    summary = [
        f"a0 = {a0:.4g} +- {sig:.4g} 1/s^2{flag}",
        f"eps90 = {lim.eps90:.4g} at m/2pi = {point.m_dm / (2 * math.pi):.6g} Hz",
    ]
    return files, summary


def run_tune_scan(cfg: dict, workers=None):
    """Frequency-bin scan: one campaign per cavity tuning, background
    subtraction across bins, and a per-bin limit at each bin's own resonant
    mass."""
    device = build_device(cfg)
    halo = build_halo(cfg)
    point = build_point(cfg)
    master = cfg["master_seed"]
    repeats = cfg["repeats"]
    sc = cfg["scan"]
    n_bins = sc["bins"]
    spacing = 2.0 * math.pi * float(sc["spacing_hz"])
    t1c = float(sc["t1c"])
    a2 = float(sc["alpha_sq"])
    etas_by_label, files = _load_calibration(cfg, workers=workers)
    label = f"a{a2:g}"
    if label not in etas_by_label:
        raise MissingCalibration(
            f"calibration has no entry for probe {label!r}; add it to probes"
        )
    eta = etas_by_label[label]
    if not eta > 0.0:
        raise MissingCalibration(
            f"calibrated efficiency for {label!r} is {eta!r}; "
            "rerun calibration with more trials"
        )
    # the calibration slope is an efficiency estimate and can overshoot 1
    # at small trial counts; project it back to the physical boundary
    eta = min(eta, 1.0)
    init = CatSpec(alpha=math.sqrt(a2))
    model = build_model(device, alpha_sq=a2, mode="compass")
    thr = float(cfg["thresholds"]["compass"])
    center = point.effective_omega_c()
    omegas = [center + (i - (n_bins - 1) / 2.0) * spacing for i in range(n_bins)]
    eps = sc["inject_epsilon"]
    jbin = sc["inject_bin"]
    m_inj = None
    if eps and jbin is not None:
        m_inj = omegas[jbin] / (1.0 + OMEGA_M_OFFSET)
    bins = []
    counts = []
    for i, om in enumerate(omegas):
        seed = derive_seed(master, "tune", i)
        dm = None
        if m_inj is not None:
            pt = SearchPoint(m_dm=m_inj, omega_c=om, v_eff=point.v_eff)
            dm = DMInjection(float(eps), pt, t1c, halo)
        tc = TrialConfig(init=init, dm=dm, repeats=repeats, rng_seed=seed)
        camp = run_campaign(sc["trials"], tc, device, workers=workers)
        k, n_kept, n_drop = _count_positives(model, thr, camp)
        bins.append(FrequencyBin(om, k, n_kept, eta, t1c))
        counts.append((i, om, k, n_kept, n_drop))
    res = background_subtract(bins, point, halo, per_bin_mass=True)
    lines = [
        "bin,omega_hz,m_dm_hz,k_pos,n_kept,n_dropped,eta,delta_raw,"
        "n_norm,p_i,sigma_p,eps90"
    ]
    limits = []
    for (i, om, k, n_kept, n_drop), bl in zip(counts, res.bins):
        m_i = om / (1.0 + OMEGA_M_OFFSET)
        raw = k / n_kept if n_kept else 0.0
        lines.append(
            ",".join(
                [
                    str(i),
                    repr(om / (2.0 * math.pi)),
                    repr(m_i / (2.0 * math.pi)),
                    str(k),
                    str(n_kept),
                    str(n_drop),
                    repr(eta),
                    repr(raw),
                    repr(bl.n_norm),
                    repr(bl.p_i),
                    repr(bl.sigma_p),
                    repr(bl.eps90),
                ]
            )
        )
        limits.append(ExclusionPoint(m_i, bl.eps90, 0.0, bl.eps90))
    files = dict(files)
    files["bins.csv"] = "\n".join(lines) + "\n"
    files["limits.csv"] = exclusion_to_csv(limits)
    med = float(np.median([b.eps90 for b in res.bins]))
    summary = [
        f"{n_bins} bins, eta_fit = {res.eta_fit:g}, median eps90 = {med:.3g}"
    ]
    if m_inj is not None:
        summary.append(f"injected epsilon = {float(eps):g} at bin {jbin}")
    return files, summary


def run_simulate_record(cfg: dict, workers=None):
    """Raw readout records for one probe, truth annotations included."""
    device = build_device(cfg)
    rc = cfg["records"]
    init, mode, label, a2 = _probe_parts(rc["probe"])
    beta = float(rc["injected_beta"])
    seed = derive_seed(cfg["master_seed"], "records", 0)
    tc = TrialConfig(
        init=init,
        injected_beta=beta if beta > 0 else None,
        repeats=cfg["repeats"],
        rng_seed=seed,
    )
    camp = run_campaign(rc["trials"], tc, device, workers=workers)
    _, dropped = postselect(camp.records)
    files = {"records.jsonl": records_to_jsonl(camp.records)}
    summary = [f"{rc['trials']} records ({label}), {dropped} with leakage"]
    return files, summary


# ---------------------------------------------------------------------------
# figures

_CONFIG_FIGURES = (
    "cat-wigner",
    "transition-curves",
    "sensitivity-growth",
    "lineshape",
    "readout-roc",
)
_ARTIFACT_FIGURES = {
    "calibration-curve": ("calibrate", "calibration.csv"),
    "enhancement": ("calibrate", "calibration.json"),
    "search-rates": ("search", "rates.csv"),
    "exclusion": ("search", "limits.csv"),
    "scan-bins": ("tune-scan", "bins.csv"),
    "scan-limits": ("tune-scan", "limits.csv"),
}
FIGURE_IDS = _CONFIG_FIGURES + tuple(sorted(_ARTIFACT_FIGURES))


def _compass_alpha_sq(cfg: dict) -> float:
    vals = [float(p["alpha_sq"]) for p in cfg["probes"] if p["kind"] == "compass"]
    return max(vals) if vals else 4.0


def _render_figure(fid: str, cfg: dict, out_root) -> str:
    device = build_device(cfg)
    halo = build_halo(cfg)
    point = build_point(cfg)
    if fid in _ARTIFACT_FIGURES:
        command, fname = _ARTIFACT_FIGURES[fid]
        src = Path(out_root) / "results" / run_id(cfg, command) / fname
        if not src.exists():
            raise MissingArtifact(
                f"figure {fid!r} needs {fname} from a prior '{command}' run "
                f"with this config; expected it at {src}"
            )
        if fid == "enhancement":
            report = json.loads(src.read_text())
            by_label = report.get("enhancement", {})
            lines = ["probe,alpha_sq,eta,enhancement"]
            for row in report["probes"]:
                value = by_label.get(row["label"])
                if value is None and row["mode"] == "vacuum":
                    value = 1.0  # the reference probe, by construction
                if value is None:
                    continue
                lines.append(
                    f"{row['label']},{row['alpha_sq']!r},{row['eta']!r},"
                    f"{value!r}"
                )
            return "\n".join(lines) + "\n"
        return src.read_text()
    if fid == "cat-wigner":
        spec = CatSpec(alpha=math.sqrt(_compass_alpha_sq(cfg)))
        ext = abs(spec.alpha) + 2.0
        grid = PhaseGrid(-ext, ext, 61, -ext, ext, 61)
        dim = required_dim(abs(spec.alpha) + math.sqrt(2.0) * ext + 1.0)
        return wigner_to_csv(grid, wigner(cat_state(spec, dim), grid))
    if fid == "transition-curves":
        alpha = math.sqrt(_compass_alpha_sq(cfg))
        times = np.linspace(0.0, 0.25 * device.T1c, 51)
        return transition_curves_to_csv(4, alpha, 1.0 / device.T1c, times)
    if fid == "sensitivity-growth":
        tau_dm = coherence_time(point, halo)
        times = np.geomspace(tau_dm / 100.0, 20.0 * tau_dm, 81)
        return g_curve_to_csv(times, point, halo)
    if fid == "lineshape":
        omegas = point.m_dm * (1.0 + np.linspace(0.0, 5e-6, 241))
        return lineshape_to_csv(omegas, point, halo)
    if fid == "readout-roc":
        a2 = _compass_alpha_sq(cfg)
        init = CatSpec(alpha=math.sqrt(a2))
        model = build_model(device, alpha_sq=a2, mode="compass")
        seed = derive_seed(cfg["master_seed"], "figures", 0)
        tc = TrialConfig(
            init=init, injected_beta=0.15, repeats=cfg["repeats"], rng_seed=seed
        )
        camp = run_campaign(800, tc, device)
        rows = threshold_sweep(camp, model, np.geomspace(1e-2, 1e6, 33))
        return sweep_to_csv(rows)
    raise ConfigError(f"unknown figure {fid!r}")


def run_figures(cfg: dict, which=None, out_root=".", workers=None):
    """CSV tables behind the plots.  Figures needing campaign artifacts read
    the matching run directory under out_root and fail with MissingArtifact
    when the producing command has not run with this config."""
    if not which:
        ids = list(_CONFIG_FIGURES)
    elif list(which) == ["all"]:
        ids = list(FIGURE_IDS)
    else:
        ids = list(which)
        for fid in ids:
            if fid not in FIGURE_IDS:
                raise ConfigError(
                    f"unknown figure {fid!r}; valid ids: "
                    f"{', '.join(FIGURE_IDS)}, or 'all'"
                )
    files = {}
    for fid in ids:
        files[f"{fid}.csv"] = _render_figure(fid, cfg, out_root)
    return files, [f"{len(files)} figure tables: {', '.join(sorted(files))}"]


# ---------------------------------------------------------------------------
# dispatcher


def run_command(command: str, cfg: dict, out_root=".", workers=None, which=None):
    """Validate, run one command, stage and promote its artifacts.

    Returns (final run directory, human-readable summary lines)."""
    validate_config(cfg)
    if command == "calibrate":
        files, summary = run_calibrate(cfg, workers=workers)
    elif command == "search":
        files, summary = run_search(cfg, workers=workers)
    elif command == "tune-scan":
        files, summary = run_tune_scan(cfg, workers=workers)
    elif command == "figures":
        files, summary = run_figures(cfg, which=which, out_root=out_root)
    elif command == "simulate-record":
        files, summary = run_simulate_record(cfg, workers=workers)
    else:
        raise ConfigError(f"unknown command {command!r}")
    rid = run_id(cfg, command)
    writer = RunWriter(out_root, rid)
    for name in sorted(files):
        writer.write(name, files[name])
    manifest = RunManifest(
        command=command,
        run_id=rid,
        config_sha256=config_sha256(cfg),
        master_seed=cfg["master_seed"],
        versions=module_versions(),
        files=dict(sorted(writer.hashes.items())),
    )
    writer.write("manifest.json", manifest.to_json())
    final = writer.promote()
    return final, summary
