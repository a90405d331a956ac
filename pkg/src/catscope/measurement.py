"""Monte-Carlo generator of repeated parity-measurement records.

Hidden-state model: the joint chain (cavity sector, qubit level) advances
once per parity interval t_m.  In compass mode the cavity lives on the four
modular photon sectors; a check step ideally flips the qubit when the
sector is 1, leaves it alone when the sector is 3, and tosses a fair coin
when the sector is even.  In vacuum mode the cavity is the two lowest Fock
levels and the check is a plain parity measurement: photon 1 flips the
qubit, photon 0 does not.  Each step ends with a readout that reports G or
E, or leaks out of the readable subspace (symbol L) with probability
p_leak; records containing L are meant to be dropped downstream.

simulate_record draws hidden paths from the transition matrix augmented
with a per-step demolition channel (the sector is scrambled uniformly with
probability p_d).  build_transition_matrix returns the pure, un-augmented
matrix, which is what the inference side assumes; the mismatch is
deliberate and mirrors how the demolition probability is calibrated
separately from the sector-transition rates.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .darkmatter import HaloParams, SearchPoint, excitation_probability
from .errors import ConfigError, InvalidMode, PrepFailed
from .fock import (
    CatSpec,
    StateVector,
    _displace_vector,
    cat_state,
    coherent_state,
    required_dim,
)

SYMBOL_GROUND = "G"
SYMBOL_EXCITED = "E"
SYMBOL_LEAK = "L"
_SYMBOLS = frozenset((SYMBOL_GROUND, SYMBOL_EXCITED, SYMBOL_LEAK))

_MODES = ("compass", "vacuum")


@dataclass(frozen=True)
class DeviceParams:
    """Calibrated device numbers shared by simulation and inference.

    readout_Fge is the probability that an excited qubit is reported G,
    readout_Fge_inv that a ground qubit is reported E.  p_d is the
    per-check demolition probability, p_leak the per-readout leakage
    probability.  Times are seconds, frequencies rad/s.
    """

    omega_c: float = 2 * math.pi * 6.442e9
    chi: float = 2 * math.pi * 0.6e6
    T1c: float = 4.6e-3
    T1q: float = 175.3e-6
    T2q: float = 119.4e-6
    n_c: float = 1e-4
    n_q: float = 0.013
    t_m: float = 1.9e-6
    readout_Fge: float = 0.01
    readout_Fge_inv: float = 0.01
    p_d: float = 0.013
    p_leak: float = 0.002

    def __post_init__(self):
        for name in ("omega_c", "chi"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0.0):
                raise ConfigError(f"{name} must be finite and > 0, got {v!r}")
        for name in ("T1c", "T1q", "T2q", "t_m"):
            v = getattr(self, name)
            if not v > 0.0:
                raise ConfigError(f"{name} must be > 0, got {v!r}")
        if not np.isfinite(self.t_m):
            raise ConfigError(f"t_m must be finite, got {self.t_m!r}")
        for name in ("n_c", "n_q", "readout_Fge", "readout_Fge_inv", "p_d", "p_leak"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v!r}")


@dataclass(frozen=True)
class DMInjection:
    """Per-trial signal hypothesis: kinetic mixing epsilon, the search
    point being probed, and the integration time before the checks start."""

    epsilon: float
    point: SearchPoint
    integration_time: float
    halo: HaloParams = HaloParams()

    def __post_init__(self):
        if self.epsilon < 0.0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon!r}")
        if not self.integration_time > 0.0:
            raise ConfigError(
                f"integration_time must be > 0, got {self.integration_time!r}"
            )


@dataclass(frozen=True)
class TrialConfig:
    """One trial template.  init is the compass probe (None = vacuum probe);
    at most one of injected_beta (mimic displacement) and dm may be set.
    repeats is the number of readout symbols per record."""

    init: CatSpec | None = None
    injected_beta: complex | None = None
    dm: DMInjection | None = None
    repeats: int = 20
    rng_seed: int = 0

    def __post_init__(self):
        if self.injected_beta is not None and self.dm is not None:
            raise ConfigError("set injected_beta or dm, not both")
        if self.init is not None and self.init.m != 4:
            raise ConfigError("the record model covers four-component probes only")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats!r}")
        if not 0 <= self.rng_seed < 2**64:
            raise ConfigError("rng_seed must fit in 64 bits")

    @property
    def mode(self) -> str:
        return "compass" if self.init is not None else "vacuum"


@dataclass(frozen=True)
class ReadoutRecord:
    """Symbol string over {G, E, L} plus the trial id and, for simulated
    data, the hidden-path annotation."""

    symbols: str
    trial_id: int = 0
    truth: dict | None = None

    def __post_init__(self):
        if not self.symbols:
            raise ConfigError("empty symbol string")
        bad = set(self.symbols) - _SYMBOLS
        if bad:
            raise ConfigError(f"unknown symbols {sorted(bad)!r}")

    @property
    def leaked(self) -> bool:
        return SYMBOL_LEAK in self.symbols


# ---------------------------------------------------------------------------
# stochastic matrices


def _qubit_factors(device: DeviceParams) -> tuple[float, float, float, float]:
    """(P_gg, P_ge, P_eg, P_ee) per check step: decay/excitation over t_m
    plus dephasing over the check delay t_p = pi/(2 chi)."""
    p_down = 1.0 - math.exp(-device.t_m / device.T1q)
    p_up = device.n_q * p_down
    t_p = math.pi / (2.0 * device.chi)
    p_phi = 1.0 - math.exp(-t_p / device.T2q)
    p_ge = p_up + p_phi
    p_eg = p_down + p_phi
    if p_ge > 1.0 or p_eg > 1.0:
        raise ConfigError("qubit error factors exceed 1; check T1q/T2q vs t_m")
    return 1.0 - p_ge, p_ge, p_eg, 1.0 - p_eg


def _cavity_matrix(device: DeviceParams, alpha_sq: float, mode: str) -> np.ndarray:
    """Sector-level transition matrix for one parity interval."""
    if mode == "compass":
        p_down = 1.0 - math.exp(-alpha_sq * device.t_m / device.T1c)
        p_up = device.n_c * p_down
        cav = np.zeros((4, 4))
        for j in range(4):
            cav[j, (j - 1) % 4] += p_down
            cav[j, (j + 1) % 4] += p_up
            cav[j, j] += 1.0 - p_down - p_up
        return cav
    # vacuum: single-photon loss and thermal repopulation
    p10 = 1.0 - math.exp(-device.t_m / device.T1c)
    p01 = device.n_c * p10
    return np.array([[1.0 - p01, p01], [p10, 1.0 - p10]])


def _qubit_kernel(kind: str, factors: tuple[float, float, float, float]) -> np.ndarray:
    """2x2 row-stochastic qubit update given the destination sector's check
    behaviour: 'coin', 'flip' (ideal outcome toggles) or 'stay'."""
    p_gg, p_ge, p_eg, p_ee = factors
    if kind == "coin":
        return np.full((2, 2), 0.5)
    if kind == "flip":
        return np.array([[p_ge, p_gg], [p_ee, p_eg]])
    return np.array([[p_gg, p_ge], [p_eg, p_ee]])


def _sector_kinds(mode: str) -> tuple[str, ...]:
    if mode == "compass":
        return ("coin", "flip", "coin", "stay")
    return ("stay", "flip")


def _check_mode(mode: str) -> None:
    if mode not in _MODES:
        raise InvalidMode(f"mode must be one of {_MODES}, got {mode!r}")


def build_transition_matrix(
    device: DeviceParams, alpha_sq: float = 1.0, mode: str = "compass"
) -> np.ndarray:
    """Joint (sector, qubit) transition matrix for one parity interval.

    Compass mode: 8x8 over (phi_0 g, phi_0 e, ..., phi_3 e) with sector
    hops P_{j,j-1} = 1 - exp(-|alpha|^2 t_m / T1c) and
    P_{j,j+1} = n_c * P_{j,j-1}.  Vacuum mode: 4x4 over (0g, 0e, 1g, 1e)
    with the same structure at single-photon rates.  The qubit factor is
    chosen by the destination sector: ideal flip for sector 1 (photon 1),
    ideal hold for sector 3 (photon 0), fair coin for even sectors.
    """
    _check_mode(mode)
    if mode == "compass" and not alpha_sq > 0.0:
        raise ConfigError(f"alpha_sq must be > 0 in compass mode, got {alpha_sq!r}")
    cav = _cavity_matrix(device, alpha_sq, mode)
    kinds = _sector_kinds(mode)
    factors = _qubit_factors(device)
    kernels = [_qubit_kernel(k, factors) for k in kinds]
    n = cav.shape[0]
    out = np.zeros((2 * n, 2 * n))
    for j in range(n):
        for lsec in range(n):
            out[2 * j : 2 * j + 2, 2 * lsec : 2 * lsec + 2] = (
                cav[j, lsec] * kernels[lsec]
            )
    return out


def build_emission_matrix(device: DeviceParams, mode: str = "compass") -> np.ndarray:
    """Readout matrix, hidden states x (G, E).

    Rows alternate ground/excited readout fidelities.  The vacuum-mode
    matrix keeps the conventional overall factor 1/2 (its rows sum to 1/2,
    not 1); posterior computations only ever use the rows up to a common
    scale, so the factor is cosmetic but preserved for comparability.
    """
    _check_mode(mode)
    g_row = (1.0 - device.readout_Fge_inv, device.readout_Fge_inv)
    e_row = (device.readout_Fge, 1.0 - device.readout_Fge)
    if mode == "compass":
        return np.array([g_row, e_row] * 4)
    return 0.5 * np.array([g_row, e_row, g_row, e_row])


# ---------------------------------------------------------------------------
# signal injection


@lru_cache(maxsize=64)
def _dm_probability(dm: DMInjection, alpha_sq: float) -> float:
    """excitation_probability with the lineshape quadrature cached per
    (injection, probe) pair, so per-record calls stay cheap."""
    return excitation_probability(
        dm.epsilon, dm.point, dm.halo, dm.integration_time, alpha_sq=alpha_sq
    )


@lru_cache(maxsize=128)
def _mimic_sector_populations(
    alpha: complex, m: int, j: int, beta: complex
) -> tuple[float, ...]:
    """Sector distribution after a mimic displacement.

    The l != j entries are the cat-basis overlaps |<phi_l| D(beta) |phi_j>|^2;
    the part of the displaced state that leaves the cat-code space (mass of
    order |beta|^2 times the photon-number spread) is folded back into the
    starting sector.  This keeps the hidden-sector flip probability equal to
    the plain two-state transition probability the analysis calibrates
    against, rather than the somewhat larger bare modular mass.
    """
    dim = required_dim(abs(alpha) + abs(beta))
    psi = cat_state(CatSpec(alpha, m, j), dim).amps
    disp = _displace_vector(complex(beta), psi)
    probs = np.zeros(m)
    for lsec in range(m):
        if lsec == j:
            continue
        target = cat_state(CatSpec(alpha, m, lsec), dim).amps
        probs[lsec] = abs(np.vdot(target, disp)) ** 2
    probs[j] = 1.0 - probs.sum()
    return tuple(probs)


def _initial_sector_probs(cfg: TrialConfig) -> np.ndarray:
    """Distribution of the hidden sector at the first readout slot."""
    if cfg.mode == "compass":
        j0 = cfg.init.j
        if cfg.injected_beta is not None:
            return np.array(
                _mimic_sector_populations(
                    complex(cfg.init.alpha), cfg.init.m, j0, complex(cfg.injected_beta)
                )
            )
        probs = np.zeros(4)
        if cfg.dm is not None:
            p = _dm_probability(cfg.dm, abs(cfg.init.alpha) ** 2)
            probs[j0] = 1.0 - p
            probs[(j0 + 1) % 4] = p
        else:
            probs[j0] = 1.0
        return probs
    # vacuum probe: two levels
    if cfg.injected_beta is not None:
        p1 = 1.0 - math.exp(-abs(cfg.injected_beta) ** 2)
    elif cfg.dm is not None:
        p1 = _dm_probability(cfg.dm, 1.0)
    else:
        p1 = 0.0
    return np.array([1.0 - p1, p1])


# ---------------------------------------------------------------------------
# record simulation


def _pick(cum: np.ndarray, u: float) -> int:
    idx = int(np.searchsorted(cum, u, side="right"))
    return min(idx, cum.size - 1)


def simulate_record(
    cfg: TrialConfig, device: DeviceParams, trial_id: int = 0
) -> ReadoutRecord:
    """Draw one record: hidden (sector, qubit) path plus readout symbols.

    The per-trial stream is seeded as SeedSequence([cfg.rng_seed, trial_id])
    so campaigns are reproducible under any parallel schedule.  The sector
    chain uses the demolition-augmented kernel (uniform scramble with
    probability p_d per step); the first symbol is emitted from the
    post-preparation state (qubit g) before any transition.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, trial_id]))
    mode = cfg.mode
    alpha_sq = abs(cfg.init.alpha) ** 2 if cfg.init is not None else 1.0

    probs = _initial_sector_probs(cfg)
    n_sec = probs.size
    sector = _pick(np.cumsum(probs), rng.random())
    base = cfg.init.j if mode == "compass" else 0
    injected = sector != base
    qubit = 0  # post-selected ground state after preparation

    cav = _cavity_matrix(device, alpha_sq, mode)
    if device.p_d > 0.0:
        cav = (1.0 - device.p_d) * cav + device.p_d / n_sec
    cav_cum = np.cumsum(cav, axis=1)
    factors = _qubit_factors(device)
    kernels = [_qubit_kernel(k, factors) for k in _sector_kinds(mode)]
    to_g = [kern[:, 0] for kern in kernels]  # P(qubit' = g | qubit, dest sector)

    p_read_g = (1.0 - device.readout_Fge_inv, device.readout_Fge)

    u = rng.random((cfg.repeats, 4))  # columns: sector, qubit, leak, symbol
    symbols = []
    sectors = [sector]
    qubits = [qubit]
    for k in range(cfg.repeats):
        if k > 0:
            sector = _pick(cav_cum[sector], u[k, 0])
            qubit = 0 if u[k, 1] < to_g[sector][qubit] else 1
            sectors.append(sector)
            qubits.append(qubit)
        if u[k, 2] < device.p_leak:
            symbols.append(SYMBOL_LEAK)
        else:
            symbols.append(
                SYMBOL_GROUND if u[k, 3] < p_read_g[qubit] else SYMBOL_EXCITED
            )

    truth = {
        "mode": mode,
        "init_sector": int(sectors[0]),
        "injected": bool(injected),
        "sectors": [int(s) for s in sectors],
        "qubits": "".join("ge"[q] for q in qubits),
    }
    return ReadoutRecord("".join(symbols), trial_id=trial_id, truth=truth)


def _simulate_chunk(
    cfg: TrialConfig, device: DeviceParams, ids: list[int]
) -> list[ReadoutRecord]:
    return [simulate_record(cfg, device, trial_id=i) for i in ids]


@dataclass(frozen=True)
class CampaignResult:
    records: tuple[ReadoutRecord, ...]
    truth_summary: dict


def run_campaign(
    n_trials: int,
    cfg: TrialConfig,
    device: DeviceParams,
    workers: int | None = None,
) -> CampaignResult:
    """Simulate n_trials independent records from one trial template.

    Trial k is seeded by SeedSequence([cfg.rng_seed, k]); the result is
    byte-identical for any workers setting.  The truth summary aggregates
    the hidden-path annotations for oracle checks.
    """
    if n_trials < 1:
        raise ConfigError(f"n_trials must be >= 1, got {n_trials!r}")
    ids = list(range(n_trials))
    if workers is not None and workers > 1:
        chunks = [ids[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(
                pool.map(_simulate_chunk, [cfg] * len(chunks), [device] * len(chunks), chunks)
            )
        records = [r for part in parts for r in part]
        records.sort(key=lambda r: r.trial_id)
    else:
        records = _simulate_chunk(cfg, device, ids)

    n_sec = 4 if cfg.mode == "compass" else 2
    counts = [0] * n_sec
    n_injected = 0
    n_leaked = 0
    for r in records:
        counts[r.truth["init_sector"]] += 1
        n_injected += r.truth["injected"]
        n_leaked += r.leaked
    summary = {
        "n_trials": n_trials,
        "mode": cfg.mode,
        "repeats": cfg.repeats,
        "n_injected": int(n_injected),
        "n_leaked_records": int(n_leaked),
        "init_sector_counts": counts,
    }
    return CampaignResult(tuple(records), summary)


# ---------------------------------------------------------------------------
# compass-state preparation (trajectory level)


def _decay_interval(
    psi: np.ndarray, device: DeviceParams, dt: float, rng, n: np.ndarray
) -> np.ndarray:
    """Quantum-jump step over dt for cavity loss (rate 1/T1c) and thermal
    excitation (rate n_c/T1c).  At most one jump per interval, placed
    uniformly; fine for dt << T1c / <n>."""
    kap = 1.0 / device.T1c
    kup = kap * device.n_c
    decay_exp = 0.5 * (kap * n + kup * (n + 1.0))
    no_jump = np.exp(-decay_exp * dt) * psi
    p_nj = float(np.vdot(no_jump, no_jump).real)
    if rng.random() < p_nj:
        return no_jump / math.sqrt(p_nj)
    tau = rng.random() * dt
    mid = np.exp(-decay_exp * tau) * psi
    w = np.abs(mid) ** 2
    r_down = kap * float(np.sum(n * w))
    r_up = kup * float(np.sum((n + 1.0) * w))
    if rng.random() < r_down / (r_down + r_up):
        jumped = np.append(np.sqrt(n[1:]) * mid[1:], 0.0)  # annihilation
    else:
        jumped = np.concatenate(([0.0], np.sqrt(n[1:]) * mid[:-1]))  # creation
    out = np.exp(-decay_exp * (dt - tau)) * jumped
    return out / np.linalg.norm(out)


def _ramsey_step(
    psi: np.ndarray, theta: float, device: DeviceParams, rng, n: np.ndarray
) -> tuple[np.ndarray, str]:
    """One check at modular angle theta: collapse the cavity with the
    branch operator (1 +- e^{i n theta})/2 and report the qubit readout.

    The ground branch equals sine_filter(theta) up to the frame phase
    e^{i n theta / 2}.  A dephasing event during the delay (probability
    1 - exp(-theta/(chi T2q))) swaps which branch the physical qubit
    outcome corresponds to; readout misreports flip the report only.
    Raises PrepFailed when the readout leaks.
    """
    phase = np.exp(1j * n * theta)
    k_g = 0.5 * (1.0 + phase)
    k_e = 0.5 * (1.0 - phase)
    w_g = float(np.linalg.norm(k_g * psi) ** 2)
    branch_g = rng.random() < w_g
    psi = (k_g if branch_g else k_e) * psi
    psi = psi / np.linalg.norm(psi)

    t_delay = theta / device.chi
    dephased = rng.random() < 1.0 - math.exp(-t_delay / device.T2q)
    outcome_g = branch_g ^ dephased
    if rng.random() < device.p_leak:
        raise PrepFailed("readout left the qubit subspace during preparation")
    flip_p = device.readout_Fge_inv if outcome_g else device.readout_Fge
    if rng.random() < flip_p:
        outcome_g = not outcome_g
    return psi, ("g" if outcome_g else "e")


def prepare_compass(
    alpha: complex, device: DeviceParams, rng, dim: int | None = None
) -> tuple[StateVector, bool]:
    """Simulate compass preparation from |alpha>: a parity filter
    (theta = pi), a modular filter (theta = pi/2), then three parity
    verification checks, post-selected on every readout reporting g.

    Returns (state, success); success is False as soon as a readout
    reports e (caller retries).  Raises PrepFailed on a leaked readout.
    On an error-free device the success branch lands exactly on the
    four-component cat with modular index 0.
    """
    alpha = complex(alpha)
    if dim is None:
        dim = required_dim(abs(alpha))
    n = np.arange(dim, dtype=float)
    psi = coherent_state(alpha, dim).amps.copy()
    for theta in (math.pi, math.pi / 2.0, math.pi, math.pi, math.pi):
        psi = _decay_interval(psi, device, device.t_m / 2.0, rng, n)
        psi, reported = _ramsey_step(psi, theta, device, rng, n)
        psi = _decay_interval(psi, device, device.t_m / 2.0, rng, n)
        if reported != "g":
            return StateVector(dim, psi / np.linalg.norm(psi)), False
    return StateVector(dim, psi / np.linalg.norm(psi)), True


# ---------------------------------------------------------------------------
# serialization


def records_to_jsonl(records, include_truth: bool = True) -> str:
    """One JSON object per line: {trial_id, symbols, truth?}."""
    lines = []
    for r in records:
        obj = {"trial_id": r.trial_id, "symbols": r.symbols}
        if include_truth and r.truth is not None:
            obj["truth"] = r.truth
        lines.append(json.dumps(obj, sort_keys=True))
    return "\n".join(lines) + "\n"


def records_from_jsonl(text: str) -> list[ReadoutRecord]:
    records = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        obj = json.loads(line)
        records.append(
            ReadoutRecord(
                symbols=obj["symbols"],
                trial_id=int(obj.get("trial_id", 0)),
                truth=obj.get("truth"),
            )
        )
    return records
