"""Statistical pipeline: error budget, masked power-law fits, PFA residuals, V_DC(d).

All fits weight points by a constant relative error ``sigma_rel``: the
uncertainty on alpha_i is ``sigma_rel * alpha_i`` and, equivalently, the
uncertainty on 1/alpha_i is ``sigma_rel / alpha_i``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .electrostatics import DEFAULT_SERIES_TOL, ForceModel, Geometry, alpha_theoretical

__all__ = [
    "FitError",
    "MaskError",
    "Mask",
    "FitResult",
    "ErrorEstimate",
    "LogVoltageFit",
    "CampaignSummary",
    "PfaResiduals",
    "apply_mask",
    "resolve_mask",
    "fit_linear_inverse",
    "fit_power_law",
    "estimate_relative_error",
    "expected_pfa_residuals",
    "fit_log_voltage",
    "campaign_statistics",
    "vdc_uncertainty_by_step",
]

DEFAULT_SIGMA_REL = 0.0056
MAX_ITER = 200


class FitError(RuntimeError):
    """A fit failed: empty/degenerate data, non-convergence or unphysical result."""


class MaskError(FitError):
    """A mask leaves too few points for the requested fit."""


# --------------------------------------------------------------------- masks


@dataclass(frozen=True)
class Mask:
    """Which points of a run enter a fit.

    kind is one of ``all``, ``keep_farthest`` (value: number of points kept),
    ``exclude_below`` (value: minimum separation in meters) or ``indices``
    (value: tuple of kept indices).
    """

    kind: str = "all"
    value: object = None

    def __post_init__(self):
        if self.kind not in ("all", "keep_farthest", "exclude_below", "indices"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if self.kind == "keep_farthest" and not (isinstance(self.value, int) and self.value >= 1):
            raise ValueError("keep_farthest needs a positive integer")
        if self.kind == "exclude_below" and not (isinstance(self.value, (int, float)) and self.value > 0):
            raise ValueError("exclude_below needs a positive separation")
        if self.kind == "indices":
            object.__setattr__(self, "value", tuple(int(i) for i in self.value))

    @classmethod
    def parse(cls, text: str) -> "Mask":
        """``all``, ``farthest:41``, ``below:120nm`` (or meters) or ``indices:0,1,5``."""
        text = text.strip()
        if text == "all":
            return cls()
        kind, _, arg = text.partition(":")
        if kind == "farthest":
            return cls("keep_farthest", int(arg))
        if kind == "below":
            arg = arg.strip()
            scale = 1.0
            for suffix, s in (("nm", 1e-9), ("um", 1e-6), ("m", 1.0)):
                if arg.endswith(suffix):
                    arg, scale = arg[: -len(suffix)], s
                    break
            return cls("exclude_below", float(arg) * scale)
        if kind == "indices":
            return cls("indices", tuple(int(i) for i in arg.split(",") if i.strip()))
        raise ValueError(f"cannot parse mask rule {text!r}")

    def describe(self) -> str:
        if self.kind == "all":
            return "all"
        if self.kind == "keep_farthest":
            return f"farthest:{self.value}"
        if self.kind == "exclude_below":
            return f"below:{self.value * 1e9:g}nm"
        return "indices:" + ",".join(str(i) for i in self.value)


def apply_mask(d_pz, mask: Mask, d0: float | None = None) -> np.ndarray:
    """Boolean keep-array over the points, in their original order.

    ``keep_farthest`` keeps the points with the smallest stage extension
    (largest separation). ``exclude_below`` needs ``d0`` to turn extensions into
    separations ``d0 - d_pz``.
    """
    d_pz = np.asarray(d_pz, dtype=float)
    n = d_pz.size
    keep = np.zeros(n, dtype=bool)
    if mask.kind == "all":
        keep[:] = True
    elif mask.kind == "keep_farthest":
        order = np.argsort(d_pz, kind="stable")
        keep[order[: min(mask.value, n)]] = True
    elif mask.kind == "exclude_below":
        if d0 is None:
            raise ValueError("exclude_below needs d0; use resolve_mask")
        keep = (d0 - d_pz) >= mask.value
    else:
        idx = np.asarray(mask.value, dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ValueError("mask index out of range")
        keep[idx] = True
    if not keep.any():
        raise MaskError(f"mask {mask.describe()} leaves no points")
    return keep


def resolve_mask(d_pz, alpha, mask: Mask, sigma_rel: float = DEFAULT_SIGMA_REL, max_iter: int = 10) -> np.ndarray:
    """Like :func:`apply_mask`, locating d0 with provisional p = 1 fits when needed.

    For ``exclude_below`` the provisional fit starts from all points and is
    redone on the surviving subset until the subset stops changing.
    """
    if mask.kind != "exclude_below":
        return apply_mask(d_pz, mask)
    keep = np.ones(np.asarray(d_pz).size, dtype=bool)
    for _ in range(max_iter):
        prov = fit_linear_inverse(d_pz, alpha, sigma_rel, keep=keep)
        new = apply_mask(d_pz, mask, prov.d0)
        if np.array_equal(new, keep):
            break
        keep = new
    return keep


# ---------------------------------------------------------------------- fits


@dataclass
class FitResult:
    kappa: float
    d0: float
    p: float
    p_free: bool
    kappa_err: float
    d0_err: float
    p_err: float
    chi2: float
    dof: int
    residuals: np.ndarray  # alpha / model - 1 on the points used
    keep: np.ndarray
    covariance: np.ndarray
    method: str
    mask: str = "all"
    iterations: int = 0

    @property
    def reduced_chi2(self) -> float:
        return self.chi2 / self.dof

    @property
    def n_used(self) -> int:
        return int(self.keep.sum())

    @property
    def n_excluded(self) -> int:
        return int(self.keep.size - self.keep.sum())


def _prepare(d_pz, alpha, sigma_rel, keep, n_params):
    x = np.asarray(d_pz, dtype=float)
    a = np.asarray(alpha, dtype=float)
    if x.shape != a.shape or x.ndim != 1:
        raise ValueError("d_pz and alpha must be 1-d arrays of equal length")
    if not sigma_rel > 0:
        raise ValueError("sigma_rel must be positive")
    keep = np.ones(x.size, dtype=bool) if keep is None else np.asarray(keep, dtype=bool)
    if keep.shape != x.shape:
        raise ValueError("keep must match the data length")
    if keep.sum() < n_params + 1:
        raise MaskError(f"need at least {n_params + 1} points, have {int(keep.sum())}")
    if np.any(~np.isfinite(a[keep])) or np.any(a[keep] <= 0):
        raise FitError("alpha must be finite and positive on the fitted points")
    return x, a, keep


def fit_linear_inverse(
    d_pz,
    alpha,
    sigma_rel: float = DEFAULT_SIGMA_REL,
    keep=None,
    mask: str = "all",
) -> FitResult:
    """Closed-form weighted straight line ``1/alpha = (d0 - d_pz)/kappa`` (p = 1)."""
    x, a, keep = _prepare(d_pz, alpha, sigma_rel, keep, 2)
    xs, ys = x[keep], 1.0 / a[keep]
    # conditioning: center/scale the abscissa, scale the ordinate
    xc, xsc = xs.mean(), np.ptp(xs)
    if not xsc > 0:
        raise FitError("singular design: all stage extensions are equal")
    ysc = np.median(ys)
    u = (xs - xc) / xsc
    v = ys / ysc
    w = 1.0 / (sigma_rel * v) ** 2
    sw, su, sv = w.sum(), (w * u).sum(), (w * v).sum()
    suu, suv = (w * u * u).sum(), (w * u * v).sum()
    det = sw * suu - su * su
    if not det > 1e-300 * sw * suu:
        raise FitError("singular design")
    slope = (sw * suv - su * sv) / det
    inter = (suu * sv - su * suv) / det
    cov_uv = np.array([[suu, -su], [-su, sw]]) / det  # for (inter, slope)

    # back to v = A + B * x (scaled ordinate, physical abscissa)
    B = slope / xsc
    A = inter - B * xc
    if not B < 0:
        raise FitError("fitted 1/alpha does not decrease with extension (kappa <= 0)")
    kappa = -1.0 / (B * ysc)
    d0 = -A / B
    if d0 <= xs.max():
        raise FitError("fitted d0 does not exceed the largest extension")

    # jacobian (inter, slope) -> (kappa, d0)
    dB = np.array([0.0, 1.0 / xsc])
    dA = np.array([1.0, -xc / xsc])
    dk = dB / (B * B * ysc)
    dd0 = -dA / B + A * dB / (B * B)
    jac = np.vstack([dk, dd0])
    cov = jac @ cov_uv @ jac.T

    vhat = A + B * xs
    chi2 = float((w * (v - vhat) ** 2).sum())
    return FitResult(
        kappa=kappa,
        d0=d0,
        p=1.0,
        p_free=False,
        kappa_err=math.sqrt(cov[0, 0]),
        d0_err=math.sqrt(cov[1, 1]),
        p_err=math.nan,
        chi2=chi2,
        dof=int(xs.size - 2),
        residuals=vhat / v - 1.0,
        keep=keep,
        covariance=cov,
        method="linear_inverse",
        mask=mask,
    )


def _levenberg_marquardt(resid_jac, theta0, valid, max_iter=MAX_ITER):
    """Minimize ``sum(r**2)`` for ``r, J = resid_jac(theta)``.

    Stops when the largest relative parameter step is below 1e-10 or the
    chi-square decrease is below 1e-12 (relative); rejected steps raise the
    damping. ``valid(theta)`` rejects steps into unphysical territory.
    """
    theta = np.array(theta0, dtype=float)
    r, J = resid_jac(theta)
    chi2 = float(r @ r)
    lam = 1e-3
    for it in range(1, max_iter + 1):
        g = J.T @ r
        H = J.T @ J
        while True:
            step = np.linalg.solve(H + lam * np.diag(np.diag(H)), -g)
            cand = theta + step
            if valid(cand):
                r_new, J_new = resid_jac(cand)
                chi2_new = float(r_new @ r_new)
                if chi2_new <= chi2:
                    break
            lam *= 10.0
            if lam > 1e20:
                # no descent direction left: at the minimum to working precision
                return theta, r, J, it
        rel_step = np.max(np.abs(step) / np.maximum(np.abs(cand), 1e-300))
        decrease = chi2 - chi2_new
        theta, r, J, chi2 = cand, r_new, J_new, chi2_new
        lam = max(lam / 10.0, 1e-12)
        if rel_step < 1e-10 or decrease < 1e-12 * chi2 or chi2 < 1e-28:
            return theta, r, J, it
    raise FitError(f"no convergence after {max_iter} iterations")


def fit_power_law(
    d_pz,
    alpha,
    sigma_rel: float = DEFAULT_SIGMA_REL,
    p: float | None = None,
    keep=None,
    mask: str = "all",
) -> FitResult:
    """Chi-square fit of ``alpha = kappa / (d0 - d_pz)**p``.

    ``p=None`` leaves the exponent free; otherwise it is held at the given
    value. Starts from the closed-form p = 1 solution. Parameter errors come
    from the inverse curvature of chi-square at the minimum (not rescaled by
    the reduced chi-square).
    """
    n_params = 3 if p is None else 2
    x, a, keep = _prepare(d_pz, alpha, sigma_rel, keep, n_params)
    xs, al = x[keep], a[keep]
    start = fit_linear_inverse(x, a, sigma_rel, keep=keep)

    # fit in scaled units: lengths in s, alpha in a_s
    s = float(np.max(np.abs(xs))) or 1.0
    a_s = float(np.median(al))
    u = xs / s
    y = al / a_s
    D0 = start.d0 / s
    K0 = start.kappa / (a_s * s)  # kappa at p = 1 in scaled units

    def model_terms(K, D, pp):
        gap = D - u
        lg = np.log(gap)
        m = K * np.exp(-pp * lg)
        return m, gap, lg

    if p is None:
        def resid_jac(th):
            K, D, pp = th
            m, gap, lg = model_terms(K, D, pp)
            r = (y - m) / (sigma_rel * y)
            J = -np.column_stack([m / K, -pp * m / gap, -m * lg]) / (sigma_rel * y)[:, None]
            return r, J

        theta0 = [K0, D0, 1.0]
    else:
        pfix = float(p)

        def resid_jac(th):
            K, D = th
            m, gap, _ = model_terms(K, D, pfix)
            r = (y - m) / (sigma_rel * y)
            J = -np.column_stack([m / K, -pfix * m / gap]) / (sigma_rel * y)[:, None]
            return r, J

        # rescale K so the start sits on the data at the geometric middle
        gap0 = D0 - u
        K0 = float(np.exp(np.mean(np.log(y) + pfix * np.log(gap0))))
        theta0 = [K0, D0]

    umax = u.max()

    def valid(th):
        return th[1] > umax and th[0] > 0 and np.all(np.isfinite(th))

    theta, r, J, iters = _levenberg_marquardt(resid_jac, theta0, valid)
    if not theta[1] > umax:
        raise FitError("fitted d0 does not exceed the largest extension")
    try:
        cov_s = np.linalg.inv(J.T @ J)
    except np.linalg.LinAlgError as exc:
        raise FitError("singular curvature matrix at the minimum") from exc

    pp = theta[2] if p is None else float(p)
    K, D = theta[0], theta[1]
    kappa = K * a_s * s**pp
    d0 = D * s
    if p is None:
        T = np.array(
            [
                [a_s * s**pp, 0.0, kappa * math.log(s)],
                [0.0, s, 0.0],
                [0.0, 0.0, 1.0],
            ]
        )
    else:
        T = np.diag([a_s * s**pp, s])
    cov = T @ cov_s @ T.T

    m, _, _ = model_terms(K, D, pp)
    return FitResult(
        kappa=kappa,
        d0=d0,
        p=pp,
        p_free=p is None,
        kappa_err=math.sqrt(cov[0, 0]),
        d0_err=math.sqrt(cov[1, 1]),
        p_err=math.sqrt(cov[2, 2]) if p is None else math.nan,
        chi2=float(r @ r),
        dof=int(xs.size - n_params),
        residuals=y / m - 1.0,
        keep=keep,
        covariance=cov,
        method="power_law",
        mask=mask,
        iterations=iters,
    )


# -------------------------------------------------------------- error budget


@dataclass
class ErrorEstimate:
    sigma_rel: float
    sample_std: float
    window: int
    deviations: np.ndarray
    counts: np.ndarray
    edges: np.ndarray
    gauss_amplitude: float
    gauss_mean: float
    normality_pvalue: float
    smoothing: str = "centered moving average"


def _gauss(x, amp, mu, sig):
    return amp * np.exp(-0.5 * ((x - mu) / sig) ** 2)


def estimate_relative_error(
    series,
    window_fraction: float = 0.05,
    min_window: int = 5,
    bins: int | None = None,
) -> ErrorEstimate:
    """Relative scatter of alpha measured repeatedly at one position.

    The series is smoothed with a centered moving average (window: 5% of the
    length, at least 5, forced odd; edges without a full window are dropped),
    and a Gaussian is fitted to the histogram of ``(x - smooth)/smooth``. The
    fitted width is the reported ``sigma_rel``.
    """
    x = np.asarray(series, dtype=float)
    if x.size < 100:
        raise ValueError(f"need at least 100 samples, have {x.size}")
    w = max(min_window, int(round(window_fraction * x.size)))
    if w % 2 == 0:
        w += 1
    if w >= x.size:
        raise ValueError("smoothing window covers the whole series")
    smooth = np.convolve(x, np.ones(w) / w, mode="valid")
    half = w // 2
    core = x[half : x.size - half]
    dev = (core - smooth) / smooth
    sample_std = float(np.std(dev, ddof=1))
    nb = bins or max(10, int(round(math.sqrt(dev.size))))

    if sample_std < 1e-15:
        counts, edges = np.histogram(dev, bins=nb)
        return ErrorEstimate(0.0, sample_std, w, dev, counts, edges, float(dev.size), 0.0, math.nan)

    mu0 = float(dev.mean())
    counts, edges = np.histogram(dev, bins=nb, range=(mu0 - 5 * sample_std, mu0 + 5 * sample_std))
    centers = 0.5 * (edges[1:] + edges[:-1])
    (amp, mu, sig), _ = optimize.curve_fit(
        _gauss, centers, counts, p0=[counts.max(), mu0, sample_std],
        sigma=np.sqrt(np.maximum(counts, 1.0)),
    )
    pval = float(stats.normaltest(dev).pvalue) if dev.size >= 20 else math.nan
    return ErrorEstimate(
        sigma_rel=abs(float(sig)),
        sample_std=sample_std,
        window=w,
        deviations=dev,
        counts=counts,
        edges=edges,
        gauss_amplitude=float(amp),
        gauss_mean=float(mu),
        normality_pvalue=pval,
    )


# ----------------------------------------------------------- PFA residuals


@dataclass
class PfaResiduals:
    separation: np.ndarray
    residual: np.ndarray
    fit: FitResult

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.residual)))


def expected_pfa_residuals(
    radius: float,
    separations,
    tol: float = DEFAULT_SERIES_TOL,
    model: str = "exact",
) -> PfaResiduals:
    """Residuals left when noiseless alpha(d) is fitted with the p = 1 straight line.

    alpha comes from the exact sphere-plane series (``model="exact"``) or the
    proximity-force law itself (``model="pfa"``, giving zero residuals). Both
    kappa and d0 float. Residuals are ``alpha / fit - 1``.
    """
    d = np.asarray(separations, dtype=float)
    if d.ndim != 1 or d.size < 3 or np.any(d <= 0):
        raise ValueError("need at least 3 positive separations")
    fm = ForceModel(model, tol)
    alpha = np.array([alpha_theoretical(Geometry(radius, di), 1.0, 1.0, fm) for di in d])
    d_pz = d.max() - d
    fit = fit_linear_inverse(d_pz, alpha, DEFAULT_SIGMA_REL)
    return PfaResiduals(separation=d, residual=fit.residuals, fit=fit)


# ------------------------------------------------------------------ V_DC(d)


@dataclass
class LogVoltageFit:
    a: float
    b: float
    a_err: float
    b_err: float
    chi2: float
    dof: int
    log_base: float

    @property
    def reduced_chi2(self) -> float:
        return self.chi2 / self.dof


def fit_log_voltage(d, v_dc, sigma, log_base: float = 10.0) -> LogVoltageFit:
    """Weighted straight line ``V_DC = a log(d/nm) + b``; ``d`` in meters."""
    d = np.asarray(d, dtype=float)
    v = np.asarray(v_dc, dtype=float)
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), v.shape)
    if d.shape != v.shape or d.size < 3:
        raise ValueError("need at least 3 (d, V_DC) pairs of equal length")
    if np.any(d <= 0):
        raise ValueError("separations must be positive")
    if np.any(~(sig > 0)):
        raise ValueError("uncertainties must be positive")
    x = np.log(d * 1e9) / math.log(log_base)
    w = 1.0 / sig**2
    sw, sx, sv = w.sum(), (w * x).sum(), (w * v).sum()
    sxx, sxv = (w * x * x).sum(), (w * x * v).sum()
    det = sw * sxx - sx * sx
    if not det > 1e-12 * sw * sxx:
        raise FitError("singular design: all separations equal")
    a = (sw * sxv - sx * sv) / det
    b = (sxx * sv - sx * sxv) / det
    chi2 = float((w * (v - a * x - b) ** 2).sum())
    return LogVoltageFit(
        a=float(a),
        b=float(b),
        a_err=math.sqrt(sw / det),
        b_err=math.sqrt(sxx / det),
        chi2=chi2,
        dof=int(d.size - 2),
        log_base=log_base,
    )


def vdc_uncertainty_by_step(v_dc_runs) -> np.ndarray:
    """Spread (sample std) of V_DC across runs at each step index.

    ``v_dc_runs`` is a 2-d array, runs x steps; runs of unequal length are
    not supported.
    """
    arr = np.asarray(v_dc_runs, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValueError("need a runs x steps array with at least 2 runs")
    return arr.std(axis=0, ddof=1)


# ---------------------------------------------------------------- campaigns


@dataclass
class CampaignSummary:
    mean_reduced_chi2: float
    std_reduced_chi2: float
    n_runs: int
    outliers: list[int]
    times: np.ndarray
    d0: np.ndarray
    kappa: np.ndarray
    d0_rate: float  # m/min
    kappa_rate: float  # fraction/min
    outlier_sigma: float = 5.0
    extra: dict = field(default_factory=dict)

    @property
    def d0_total_drift(self) -> float:
        return self.d0_rate * float(self.times.max() - self.times.min())


def campaign_statistics(fits, times=None, outlier_sigma: float = 5.0) -> CampaignSummary:
    """Reduced chi-square distribution and drift trajectories over a campaign.

    Runs above ``mean + outlier_sigma * std`` are flagged and the statistics
    recomputed on the rest, repeating until no further run is flagged.
    Drift rates are straight-line slopes of d0(t) and kappa(t); the kappa rate
    is relative to the fitted kappa at t = 0.
    """
    fits = list(fits)
    if len(fits) < 2:
        raise ValueError("need at least 2 runs")
    chi = np.array([f.reduced_chi2 for f in fits])
    t = np.arange(len(fits), dtype=float) if times is None else np.asarray(times, dtype=float)
    good = np.ones(chi.size, dtype=bool)
    while True:
        mu, sd = chi[good].mean(), chi[good].std(ddof=1)
        new = good & ~(chi > mu + outlier_sigma * sd)
        if new.sum() == good.sum() or new.sum() < 2:
            break
        good = new
    mu, sd = float(chi[good].mean()), float(chi[good].std(ddof=1))

    d0 = np.array([f.d0 for f in fits])
    kappa = np.array([f.kappa for f in fits])
    d0_slope = float(np.polyfit(t, d0, 1)[0])
    k_slope, k_inter = np.polyfit(t, kappa, 1)
    return CampaignSummary(
        mean_reduced_chi2=mu,
        std_reduced_chi2=sd,
        n_runs=int(good.sum()),
        outliers=[int(i) for i in np.flatnonzero(~good)],
        times=t,
        d0=d0,
        kappa=kappa,
        d0_rate=d0_slope,
        kappa_rate=float(k_slope / k_inter),
        outlier_sigma=outlier_sigma,
    )
