"""Simulated calibration rig: stage stepping, Kelvin feedback, adaptive V_AC, drift and noise.

Time is kept in minutes (drift rates are quoted per minute); lengths and
voltages are SI.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .constants import C_LIGHT, EPS0, HBAR
from .electrostatics import ForceModel, Geometry, alpha_theoretical

__all__ = [
    "ContactError",
    "DriftModel",
    "NoiseModel",
    "ContactPotentialModel",
    "LoopGainModel",
    "StageSchedule",
    "RigConfig",
    "RunRecord",
    "RunDataset",
    "Campaign",
    "contact_potential",
    "kelvin_settle",
    "schedule_vac",
    "near_contact_contaminant",
    "near_contact_softening",
    "execute_run",
    "execute_campaign",
    "execute_hold",
    "run_rng",
]

# 1050 minutes / 184 runs
RUN_MINUTES = 1050.0 / 184.0
REFERENCE_SEPARATION = 1e-6


class ContactError(RuntimeError):
    """The plate would touch (or snap onto) the sphere."""

    def __init__(self, run_id: int, step: int, message: str):
        super().__init__(f"run {run_id}, step {step}: {message}")
        self.run_id = run_id
        self.step = step


@dataclass
class DriftModel:
    d0_rate: float = 40e-12  # m/min
    kappa_rate: float = 1e-5  # fraction/min
    vdc_step_bound: float = 40e-6  # V/run, bound of the per-run random-walk step

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.d0_rate, self.kappa_rate, self.vdc_step_bound)):
            raise ValueError("drift rates must be finite")
        if self.vdc_step_bound < 0:
            raise ValueError("vdc_step_bound must be >= 0")


@dataclass
class NoiseModel:
    """Relative Gaussian noise on S_2w, and point-to-point scatter of the
    compensated potential (V) that the Kelvin loop tracks."""

    s2w_rel: float = 0.0056
    vdc_jitter: float = 0.6e-3

    def __post_init__(self):
        if self.s2w_rel < 0 or self.vdc_jitter < 0:
            raise ValueError("noise levels must be >= 0")


@dataclass
class ContactPotentialModel:
    """Compensating voltage ``V_DC = a log(d/nm) + b``; ``V0 = -V_DC``."""

    a: float = -4.4e-3
    b: float = 4.3e-3
    log_base: float = 10.0

    def __post_init__(self):
        if self.log_base <= 1:
            raise ValueError("log_base must be > 1")


@dataclass
class LoopGainModel:
    """Power-law loop gain through (d_far, g_far) and (d_near, g_near)."""

    g_far: float = 1e3
    g_near: float = 1e4
    d_far: float = 2e-6
    d_near: float = 100e-9

    def __post_init__(self):
        if self.g_far < 1 or self.g_near < 1:
            raise ValueError("loop gains must be >= 1")
        if not (0 < self.d_near < self.d_far):
            raise ValueError("need 0 < d_near < d_far")

    def __call__(self, d: float) -> float:
        q = math.log(self.g_near / self.g_far) / math.log(self.d_far / self.d_near)
        return max(1.0, self.g_far * (self.d_far / d) ** q)


@dataclass
class StageSchedule:
    """Piezo extensions, either explicit or generated from nominal separations.

    Default: 50 geometric points from 2 um down to 64 nm, so the 41 farthest
    points are exactly those at or above 120 nm.
    """

    d_far: float = 2e-6
    d_near: float = 64e-9
    n_points: int = 50
    spacing: str = "geometric"
    extensions: list[float] | None = None

    def __post_init__(self):
        if self.spacing not in ("geometric", "linear", "inverse"):
            raise ValueError(f"unknown spacing {self.spacing!r}")
        if self.extensions is None and not (0 < self.d_near < self.d_far and self.n_points >= 2):
            raise ValueError("need 0 < d_near < d_far and n_points >= 2")

    def separations(self) -> np.ndarray:
        if self.spacing == "geometric":
            return np.geomspace(self.d_far, self.d_near, self.n_points)
        if self.spacing == "linear":
            return np.linspace(self.d_far, self.d_near, self.n_points)
        return 1.0 / np.linspace(1.0 / self.d_far, 1.0 / self.d_near, self.n_points)

    def stage_extensions(self, d0: float) -> np.ndarray:
        if self.extensions is not None:
            return np.asarray(self.extensions, dtype=float)
        return d0 - self.separations()


@dataclass
class RigConfig:
    radius: float = 100e-6
    k: float = 0.9
    gamma: float = 1.0e7
    f0: float = 1650.0
    drive_frequency: float = 72.2
    p_true: float = 1.0
    force_model: ForceModel = field(default_factory=ForceModel)
    d0: float = 2.2e-6
    schedule: StageSchedule = field(default_factory=StageSchedule)
    # 0.3 nm peak-to-peak at gamma = 1e7 V/m
    s2w_setpoint: float = 3.0e-3
    vac_initial: float = 0.45
    vac_min: float = 0.02
    vac_max: float = 1.0
    contact_potential: ContactPotentialModel = field(default_factory=ContactPotentialModel)
    loop_gain: LoopGainModel = field(default_factory=LoopGainModel)
    noise: NoiseModel = field(default_factory=NoiseModel)
    drift: DriftModel = field(default_factory=DriftModel)
    contaminant: bool = False
    run_minutes: float = RUN_MINUTES
    seed: int = 271828

    def __post_init__(self):
        for name in ("radius", "k", "gamma", "f0", "drive_frequency", "d0", "s2w_setpoint", "run_minutes"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 < self.vac_min <= self.vac_initial <= self.vac_max):
            raise ValueError("need 0 < vac_min <= vac_initial <= vac_max")
        if self.force_model.variant == "exact" and self.p_true != 1.0:
            raise ValueError("the exact force model has no free exponent; use p_true = 1")
        if not (0 <= self.seed < 2**64):
            raise ValueError("seed must be a 64-bit unsigned integer")
        ext = self.schedule.stage_extensions(self.d0)
        if ext.max() >= self.d0:
            raise ValueError("d0 must exceed the largest stage extension")
        if ext.min() < 0:
            raise ValueError("stage extensions must be >= 0 (is d0 below the farthest separation?)")
        if self.drive_frequency * 10 > self.f0:
            raise ValueError("drive frequency is not quasi-static")

    @property
    def kappa_pfa(self) -> float:
        """gamma eps0 pi R / k, the p = 1 prefactor of alpha (V m / V^2)."""
        return self.gamma * EPS0 * math.pi * self.radius / self.k

    def stage_extensions(self) -> np.ndarray:
        return self.schedule.stage_extensions(self.d0)

    def d0_at(self, t_min: float) -> float:
        return self.d0 + self.drift.d0_rate * t_min

    def kappa_scale_at(self, t_min: float) -> float:
        return 1.0 + self.drift.kappa_rate * t_min

    def alpha_true(self, d: float, t_min: float = 0.0) -> float:
        """Noise-free alpha at true separation ``d`` (no contaminant)."""
        if self.force_model.variant == "exact":
            base = alpha_theoretical(Geometry(self.radius, d), self.k, self.gamma, self.force_model)
        else:
            base = self.kappa_pfa / REFERENCE_SEPARATION * (REFERENCE_SEPARATION / d) ** self.p_true
        return base * self.kappa_scale_at(t_min)


@dataclass(frozen=True)
class RunRecord:
    run_id: int
    step: int
    t_min: float
    d_pz: float
    v_ac: float
    s_2w: float
    v_dc: float
    loop_gain: float
    # simulation truth, never serialized
    separation: float = math.nan
    v0: float = math.nan

    @property
    def alpha(self) -> float:
        return self.s_2w / self.v_ac**2


@dataclass
class RunDataset:
    run_id: int
    records: list[RunRecord]
    vac_flags: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def d_pz(self) -> np.ndarray:
        return self.column("d_pz")

    @property
    def alpha(self) -> np.ndarray:
        return self.column("alpha")

    @property
    def v_dc(self) -> np.ndarray:
        return self.column("v_dc")

    @property
    def t_min(self) -> np.ndarray:
        return self.column("t_min")


@dataclass
class Campaign:
    runs: list[RunDataset]
    t_start: np.ndarray
    d0_true: np.ndarray
    kappa_true: np.ndarray
    vdc_offset: np.ndarray

    @property
    def records(self) -> list[RunRecord]:
        return [r for run in self.runs for r in run.records]

    @property
    def total_minutes(self) -> float:
        last = self.runs[-1].records[-1].t_min if self.runs and self.runs[-1].records else 0.0
        return float(last)


def run_rng(seed: int, run_id: int) -> np.random.Generator:
    """Independent stream per (seed, run id), so runs replay in any order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(run_id)]))


def contact_potential(d: float, model: ContactPotentialModel | None = None) -> float:
    """Contact offset V0 at separation ``d`` (m); its compensation is ``a log(d/nm) + b``."""
    if not d > 0:
        raise ValueError(f"separation must be positive, got {d}")
    m = model or ContactPotentialModel()
    return -(m.a * math.log(d * 1e9, m.log_base) + m.b)


def kelvin_settle(v0: float, gain: float) -> tuple[float, float]:
    """Settled feedback output and the residual ``V0 + V_DC = V0/(G+1)``."""
    if not (math.isfinite(v0) and math.isfinite(gain)):
        raise ValueError("v0 and gain must be finite")
    if gain < 1:
        raise ValueError("loop gain must be >= 1")
    v_dc = -gain / (gain + 1.0) * v0
    return v_dc, v0 / (gain + 1.0)


def schedule_vac(
    d_pz_hist,
    alpha_hist,
    next_d_pz: float,
    setpoint: float,
    bounds: tuple[float, float],
    initial: float,
) -> tuple[float, bool]:
    """Choose V_AC for the next position so that S_2w lands on ``setpoint``.

    1/alpha is linear in the stage extension, so it is extrapolated from a
    relative-weighted straight-line fit over the run so far. Returns
    ``(v_ac, flagged)``; ``flagged`` means the extrapolation predicted
    alpha <= 0 and the lower bound was used.
    """
    lo, hi = bounds
    x = np.asarray(d_pz_hist, dtype=float)
    alpha = np.asarray(alpha_hist, dtype=float)
    if x.size < 2:
        return initial, False
    y = 1.0 / alpha
    w = alpha**2
    sw, sx, sy = w.sum(), (w * x).sum(), (w * y).sum()
    sxx, sxy = (w * x * x).sum(), (w * x * y).sum()
    det = sw * sxx - sx * sx
    if det <= 0:
        y_next = float(np.average(y, weights=w))
    else:
        slope = (sw * sxy - sx * sy) / det
        intercept = (sy - slope * sx) / sw
        y_next = intercept + slope * next_d_pz
    if not y_next > 0:
        return lo, True
    return float(np.clip(math.sqrt(setpoint * y_next), lo, hi)), False


def near_contact_contaminant(d: float, radius: float, k: float) -> float:
    """Cantilever deflection (m) from the ideal-metal Casimir attraction ``pi^3 hbar c R / (360 d^3)``."""
    return math.pi**3 * HBAR * C_LIGHT * radius / (360.0 * d**3) / k


def near_contact_softening(d: float, radius: float, k: float) -> float:
    """Gain of the quasi-static response, ``k / (k - dF/dd)``, from the same attraction."""
    stiffness = 3.0 * near_contact_contaminant(d, radius, k) * k / d
    return k / (k - stiffness)


def _contaminated_separation(d_nominal: float, radius: float, k: float) -> float | None:
    """Solve ``d = d_nominal - deflection(d)``; None past the snap-in point."""
    c = math.pi**3 * HBAR * C_LIGHT * radius / (360.0 * k)
    d_snap = (3.0 * c) ** 0.25
    if d_nominal <= d_snap:
        return None

    def f(d):
        return d + c / d**3 - d_nominal

    if f(d_snap) > 0:
        return None
    return brentq(f, d_snap, d_nominal, xtol=1e-18, rtol=1e-15)


def execute_run(
    cfg: RigConfig,
    run_id: int = 0,
    t_start: float = 0.0,
    vdc_offset: float = 0.0,
    rng: np.random.Generator | None = None,
) -> RunDataset:
    """One approach: step the stage, settle the loop, schedule V_AC, measure S_2w."""
    rng = rng if rng is not None else run_rng(cfg.seed, run_id)
    extensions = cfg.stage_extensions()
    dwell = cfg.run_minutes / len(extensions)
    records: list[RunRecord] = []
    flags: list[int] = []
    hist_x: list[float] = []
    hist_a: list[float] = []
    for step, d_pz in enumerate(extensions):
        t = t_start + step * dwell
        d = cfg.d0_at(t) - d_pz
        if not d > 0:
            raise ContactError(run_id, step, f"separation {d:.3e} m <= 0")
        gain_extra = 1.0
        if cfg.contaminant:
            d_c = _contaminated_separation(d, cfg.radius, cfg.k)
            if d_c is None:
                raise ContactError(run_id, step, f"snap-in at nominal separation {d:.3e} m")
            d = d_c
            gain_extra = near_contact_softening(d, cfg.radius, cfg.k)

        jitter, noise = rng.standard_normal(2)
        v0 = contact_potential(d, cfg.contact_potential) + vdc_offset + cfg.noise.vdc_jitter * jitter
        gain = cfg.loop_gain(d)
        v_dc, _ = kelvin_settle(v0, gain)

        v_ac, flagged = schedule_vac(
            hist_x, hist_a, d_pz, cfg.s2w_setpoint, (cfg.vac_min, cfg.vac_max), cfg.vac_initial
        )
        if flagged:
            flags.append(step)
        s_true = cfg.alpha_true(d, t) * gain_extra * v_ac**2
        s_meas = max(0.0, s_true * (1.0 + cfg.noise.s2w_rel * noise))
        rec = RunRecord(
            run_id=run_id,
            step=step,
            t_min=t,
            d_pz=float(d_pz),
            v_ac=v_ac,
            s_2w=s_meas,
            v_dc=v_dc,
            loop_gain=gain,
            separation=d,
            v0=v0,
        )
        records.append(rec)
        hist_x.append(rec.d_pz)
        hist_a.append(rec.alpha)
    return RunDataset(run_id=run_id, records=records, vac_flags=flags)


def execute_campaign(cfg: RigConfig, n_runs: int) -> Campaign:
    """Sequential runs against linearly drifting d0 and kappa.

    The compensation voltage wanders between runs as a random walk whose
    steps are uniform within the configured per-run bound.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    runs = []
    t_start = np.arange(n_runs) * cfg.run_minutes
    offsets = np.zeros(n_runs)
    offset = 0.0
    for run_id in range(n_runs):
        rng = run_rng(cfg.seed, run_id)
        step = rng.uniform(-1.0, 1.0) * cfg.drift.vdc_step_bound
        if run_id > 0:
            offset += step
        offsets[run_id] = offset
        runs.append(execute_run(cfg, run_id, float(t_start[run_id]), offset, rng))
    return Campaign(
        runs=runs,
        t_start=t_start,
        d0_true=np.array([cfg.d0_at(t) for t in t_start]),
        kappa_true=np.array([cfg.kappa_pfa * cfg.kappa_scale_at(t) for t in t_start]),
        vdc_offset=offsets,
    )


def execute_hold(
    cfg: RigConfig,
    separation: float = 150e-9,
    minutes: float = 120.0,
    interval_s: float = 5.0,
) -> RunDataset:
    """Repeated measurements at one stage extension (the error-budget protocol).

    The stage is parked so the separation at t = 0 is ``separation``; V_AC is
    set once for the setpoint and held. Drift keeps acting during the hold.
    """
    if minutes <= 0 or interval_s <= 0:
        raise ValueError("minutes and interval_s must be positive")
    n = int(round(minutes * 60.0 / interval_s))
    if n < 1:
        raise ValueError("hold too short for a single sample")
    d_pz = cfg.d0 - separation
    if not 0 <= d_pz < cfg.d0:
        raise ValueError("separation must lie in (0, d0]")
    rng = run_rng(cfg.seed, 0)
    v_ac = float(np.clip(math.sqrt(cfg.s2w_setpoint / cfg.alpha_true(separation)), cfg.vac_min, cfg.vac_max))
    records = []
    for i in range(n):
        t = i * interval_s / 60.0
        d = cfg.d0_at(t) - d_pz
        if not d > 0:
            raise ContactError(0, i, f"separation {d:.3e} m <= 0")
        jitter, noise = rng.standard_normal(2)
        v0 = contact_potential(d, cfg.contact_potential) + cfg.noise.vdc_jitter * jitter
        gain = cfg.loop_gain(d)
        v_dc, _ = kelvin_settle(v0, gain)
        s_true = cfg.alpha_true(d, t) * v_ac**2
        records.append(
            RunRecord(
                run_id=0,
                step=i,
                t_min=t,
                d_pz=d_pz,
                v_ac=v_ac,
                s_2w=max(0.0, s_true * (1.0 + cfg.noise.s2w_rel * noise)),
                v_dc=v_dc,
                loop_gain=gain,
                separation=d,
                v0=v0,
            )
        )
    return RunDataset(run_id=0, records=records)
