"""CDF of Hermitian quadratic forms of standard complex Gaussian vectors.

Evaluates Pr(||x - z||^2_M <= tau) for x ~ CN(0, I) through the contour
integral of the moment generating function,

    (1/2pi) int  e^{tau s} / s * e^{-c(s)} / det(I + s M)  d omega,
    s = beta + i omega,   c(s) = sum_m |z_m|^2 s lam_m / (1 + s lam_m),

taken over a vertical line with I + beta M positive definite.  The value is
independent of the admissible offset beta; numerically the offset is placed at
the minimizer of the integrand magnitude on the real axis (the magnitude along
the contour peaks at omega = 0, so this choice minimizes cancellation).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .model import (
    BeamformerMatrix,
    PowerAllocation,
    QoSSpec,
    QuadraticOutageForm,
    ScenarioInstance,
    complex_normal,
    psd_sqrt,
)

__all__ = [
    "GaussianQuadratic",
    "EigenSpectrum",
    "ProbabilityEstimate",
    "EvalMethod",
    "ToleranceNotMet",
    "decompose",
    "cdf_quadrature",
    "outage_probability",
    "mc_probability",
]


class ToleranceNotMet(Exception):
    """Quadrature could not certify the requested tolerance.

    Carries the best available ``estimate`` (a ProbabilityEstimate with its
    achieved error bound).
    """

    def __init__(self, message: str, estimate: "ProbabilityEstimate"):
        super().__init__(message)
        self.estimate = estimate


class EvalMethod(enum.Enum):
    QUADRATURE = "quadrature"
    RESIDUE = "residue"
    MONTE_CARLO = "monte_carlo"


@dataclass(frozen=True)
class GaussianQuadratic:
    """The triple (M, z, tau) defining Pr(||x - z||^2_M <= tau)."""

    M: np.ndarray
    z: np.ndarray
    tau: float

    def __post_init__(self):
        m = np.asarray(self.M, dtype=complex)
        z = np.asarray(self.z, dtype=complex)
        object.__setattr__(self, "M", m)
        object.__setattr__(self, "z", z)
        scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
        if np.max(np.abs(m - m.conj().T)) > 1e-12 * scale:
            raise ValueError("M must be Hermitian")


@dataclass(frozen=True)
class EigenSpectrum:
    """Eigen-data of M plus a default admissible contour offset."""

    eigenvalues: np.ndarray
    z_tilde: np.ndarray
    beta: float


@dataclass(frozen=True)
class ProbabilityEstimate:
    value: float
    abs_error_bound: float
    method: EvalMethod
    raw_value: float = None

    def __post_init__(self):
        if self.raw_value is None:
            object.__setattr__(self, "raw_value", self.value)
        object.__setattr__(self, "value", float(min(1.0, max(0.0, self.value))))


def decompose(form: GaussianQuadratic) -> EigenSpectrum:
    """Eigendecomposition with eigenvalues sorted descending; the stored beta
    is an admissible default (1 for PSD M, else half the distance to the
    pole at 1/|lam_min|)."""
    lam, vecs = np.linalg.eigh(form.M)
    order = np.argsort(lam)[::-1]
    lam = lam[order]
    vecs = vecs[:, order]
    z_tilde = vecs.conj().T @ form.z
    lam_min = float(lam.min()) if lam.size else 0.0
    beta = 1.0 if lam_min >= 0 else 0.5 / abs(lam_min)
    return EigenSpectrum(eigenvalues=lam, z_tilde=z_tilde, beta=beta)


# ---------------------------------------------------------------------------
# contour placement


def _log_mag(beta, lam, zt2, tau):
    """log of the integrand magnitude on the real axis (omega = 0)."""
    total = tau * beta - math.log(beta)
    for l, z in zip(lam, zt2):
        bl = beta * l
        total -= z * bl / (1.0 + bl) + math.log1p(bl)
    return total


def _dlog_mag(beta, lam, zt2, tau):
    total = tau - 1.0 / beta
    for l, z in zip(lam, zt2):
        bl1 = 1.0 + beta * l
        total -= z * l / (bl1 * bl1) + l / bl1
    return total


def _d2log_mag(beta, lam, zt2, tau):
    total = 1.0 / (beta * beta)
    for l, z in zip(lam, zt2):
        bl1 = 1.0 + beta * l
        l2 = l * l
        total += 2.0 * z * l2 / (bl1 ** 3) + l2 / (bl1 * bl1)
    return total


def _pick_beta(lam, zt2, tau):
    """Minimizer of the (strictly convex) log magnitude over admissible
    offsets, via safeguarded Newton on its derivative.

    The derivative tends to -inf as beta -> 0+.  For indefinite M it tends to
    +inf at the pole 1/|lam_min|; for PSD M (reached only with tau > 0) it
    tends to tau > 0, so an upper bracket always exists.  A loose relative
    tolerance suffices: the integral is beta-independent and conditioning
    degrades only slowly away from the exact minimum.
    """
    lam_min = float(lam.min())
    lam_l = [float(v) for v in lam]
    zt2_l = [float(v) for v in zt2]
    if lam_min < 0:
        hi = (1.0 - 1e-9) / abs(lam_min)
        if _dlog_mag(hi, lam_l, zt2_l, tau) <= 0:
            return hi
    else:
        hi = 1.0 / max(float(np.abs(lam).max()), 1e-300)
        for _ in range(600):
            if _dlog_mag(hi, lam_l, zt2_l, tau) > 0:
                break
            hi *= 2.0
        else:
            return hi
    lo = hi * 1e-16
    for _ in range(600):
        if _dlog_mag(lo, lam_l, zt2_l, tau) < 0:
            break
        lo *= 0.25
    else:
        return lo
    x = math.sqrt(lo * hi)
    for _ in range(200):
        d = _dlog_mag(x, lam_l, zt2_l, tau)
        if d > 0:
            hi = x
        else:
            lo = x
        x_new = x - d / _d2log_mag(x, lam_l, zt2_l, tau)
        if not (lo < x_new < hi):
            x_new = math.sqrt(lo * hi)
        if abs(x_new - x) <= 1e-3 * max(x, x_new):
            return float(x_new)
        x = x_new
    return float(x)


# ---------------------------------------------------------------------------
# batched Gauss-Kronrod panels

_GK_X = np.array([
    -0.991455371120813, -0.949107912342759, -0.864864423359769,
    -0.741531185599394, -0.586087235467691, -0.405845151377397,
    -0.207784955007898, 0.0, 0.207784955007898, 0.405845151377397,
    0.586087235467691, 0.741531185599394, 0.864864423359769,
    0.949107912342759, 0.991455371120813,
])
_GK_WK = np.array([
    0.022935322010529, 0.063092092629979, 0.104790010322250,
    0.140653259715525, 0.169004726639267, 0.190350578064785,
    0.204432940075298, 0.209482141084728, 0.204432940075298,
    0.190350578064785, 0.169004726639267, 0.140653259715525,
    0.104790010322250, 0.063092092629979, 0.022935322010529,
])
_GK_WG = np.zeros(15)
_GK_WG[1::2] = [0.129484966168870, 0.279705391489277, 0.381830050505119,
                0.417959183673469, 0.381830050505119, 0.279705391489277,
                0.129484966168870]


def _panel_rule(f, a, b):
    """Vectorized 15-point Kronrod / 7-point Gauss rule on panels.

    ``a``, ``b`` are arrays of panel endpoints; returns (K15, |K15-G7|,
    integral of |f|) per panel.
    """
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)
    nodes = mid[:, None] + half[:, None] * _GK_X[None, :]
    vals = f(nodes.ravel()).reshape(nodes.shape)
    k15 = half * (vals @ _GK_WK)
    g7 = half * (vals @ _GK_WG)
    resabs = half * (np.abs(vals) @ _GK_WK)
    return k15, np.abs(k15 - g7), resabs


def _integrate_adaptive(f, edges, target, max_segments=16384, max_rounds=48):
    """Globally adaptive panel integration of f over consecutive ``edges``.

    Returns (value, error_bound, resabs, converged).
    """
    a = edges[:-1].copy()
    b = edges[1:].copy()
    k15, err, resabs = _panel_rule(f, a, b)
    for _ in range(max_rounds):
        total_err = float(err.sum())
        floor = 50 * np.finfo(float).eps * float(resabs.sum())
        if total_err <= max(target, floor):
            break
        if a.size >= max_segments:
            break
        share = max(target, floor) / (2.0 * a.size)
        split = err > share
        if not split.any():
            break
        keep = ~split
        mids = 0.5 * (a[split] + b[split])
        new_a = np.concatenate([a[keep], a[split], mids])
        new_b = np.concatenate([b[keep], mids, b[split]])
        kk, ee, rr = _panel_rule(f, np.concatenate([a[split], mids]),
                                 np.concatenate([mids, b[split]]))
        k15 = np.concatenate([k15[keep], kk])
        err = np.concatenate([err[keep], ee])
        resabs = np.concatenate([resabs[keep], rr])
        a, b = new_a, new_b
    total_err = float(err.sum())
    floor = 50 * np.finfo(float).eps * float(resabs.sum())
    bound = max(total_err, floor)
    return float(k15.sum()), bound, float(resabs.sum()), total_err <= max(target, floor)


def _chernoff_log(lam, zt2, tau):
    """log of the Chernoff bound on Pr(Y <= tau), Y the quadratic form with
    eigenvalues lam and noncentrality |z_m|^2.

    Minimizes h(beta) = tau*beta - c(beta) - sum log(1+beta*lam) over the
    admissible beta > 0; h(0) = 0, so the bound never exceeds 1, and any
    admissible beta yields a valid bound, so a loose minimization suffices.
    The right tail follows from the same helper with (lam, tau) negated.
    """
    lam_l = [float(v) for v in lam]
    zt2_l = [float(v) for v in zt2]

    def h(b):
        total = tau * b
        for l, z in zip(lam_l, zt2_l):
            bl = b * l
            total -= z * bl / (1.0 + bl) + math.log1p(bl)
        return total

    def dh(b):
        total = tau
        for l, z in zip(lam_l, zt2_l):
            bl1 = 1.0 + b * l
            total -= z * l / (bl1 * bl1) + l / bl1
        return total

    if dh(0.0) >= 0:
        return 0.0
    lam_min = min(lam_l)
    if lam_min < 0:
        hi = (1.0 - 1e-9) / abs(lam_min)
        if dh(hi) <= 0:
            return h(hi)
    else:
        hi = 1.0 / max(max(abs(v) for v in lam_l), 1e-300)
        for _ in range(600):
            if dh(hi) > 0:
                break
            hi *= 2.0
        else:
            return h(hi)
    lo = 0.0
    x = hi / 2.0
    for _ in range(200):
        d = dh(x)
        if d > 0:
            hi = x
        else:
            lo = x
        x_new = 0.5 * (lo + hi)
        if hi - lo <= 1e-2 * hi:
            return h(x_new)
        x = x_new
    return h(x)


def _re_c(omega, beta, lam, zt2):
    """Real part of c(beta + i omega); monotone nondecreasing in |omega|."""
    bl1 = 1.0 + beta * lam
    denom = bl1 ** 2 + (omega * lam) ** 2
    return np.sum(zt2 * (1.0 - bl1 / denom))


def _vertical_cut(beta, lam, zt2, tau, g0, target, sigma):
    """Truncation point for a purely vertical contour: beyond it

        |f(omega)| <= exp(tau*beta - Re c(Omega) - g0) / (omega^(r+1) prod|lam|)

    integrates below ``target``.  Uses monotonicity of Re c in omega."""
    r = lam.size
    log_prod = np.sum(np.log(np.abs(lam)))
    omega = 8.0 * sigma
    for _ in range(400):
        log_amp = tau * beta - _re_c(omega, beta, lam, zt2) - g0 - log_prod
        log_tail = log_amp - np.log(r) - r * np.log(omega)
        if log_tail <= np.log(target):
            return omega
        omega *= 2.0
    return omega


def cdf_quadrature(spectrum: EigenSpectrum, tau: float, tol: float = 1e-8,
                   beta: float = None, strict: bool = True) -> ProbabilityEstimate:
    """Adaptive quadrature of the contour integral to absolute tolerance tol.

    Exploits conjugate symmetry to integrate (1/pi) int_0^inf Re F(beta+iw) dw.
    When ``beta`` is None the offset is placed at the magnitude-minimizing
    admissible point.  Raises ToleranceNotMet (carrying the estimate) when the
    budget cannot certify tol and ``strict`` is set.
    """
    lam_all = np.asarray(spectrum.eigenvalues, dtype=float)
    zt2_all = np.abs(np.asarray(spectrum.z_tilde)) ** 2
    tau = float(tau)

    thresh = 1e-12 * max(1.0, float(np.max(np.abs(lam_all), initial=0.0)))
    keep = (np.abs(lam_all) > thresh) | (zt2_all * np.abs(lam_all) > thresh)
    lam = lam_all[keep]
    zt2 = zt2_all[keep]

    def _exact(value):
        return ProbabilityEstimate(value=value, abs_error_bound=0.0,
                                   method=EvalMethod.QUADRATURE)

    if lam.size == 0:
        return _exact(1.0 if tau >= 0 else 0.0)
    if lam.min() >= 0 and tau <= 0:
        return _exact(0.0)
    if lam.max() <= 0 and tau >= 0:
        return _exact(1.0)

    # Chernoff bounds on both tails: they certify deep-tail values directly
    # and guarantee the remaining quadrature cases sit within a few standard
    # deviations of the bulk, where the contour integrand is mildly behaved.
    log_left = _chernoff_log(lam, zt2, tau)
    if log_left <= np.log(tol / 4.0):
        return ProbabilityEstimate(value=0.0, abs_error_bound=float(np.exp(log_left)),
                                   method=EvalMethod.QUADRATURE, raw_value=0.0)
    log_right = _chernoff_log(-lam, zt2, -tau)
    if log_right <= np.log(tol / 4.0):
        return ProbabilityEstimate(value=1.0, abs_error_bound=float(np.exp(log_right)),
                                   method=EvalMethod.QUADRATURE, raw_value=1.0)

    if beta is None:
        beta = _pick_beta(lam, zt2, tau)
    else:
        if beta <= 0 or np.any(1.0 + beta * lam <= 0):
            raise ValueError("contour offset must keep I + beta*M positive definite")
    g0 = _log_mag(beta, lam, zt2, tau)

    def log_f(s):
        sl = s[:, None] * lam[None, :]
        return (tau * s - np.sum(zt2 * sl / (1.0 + sl), axis=1)
                - np.sum(np.log(1.0 + sl), axis=1) - np.log(s))

    def vertical_integrand(omega):
        return np.exp(log_f(beta + 1j * omega) - g0).real

    scale = np.exp(g0) / np.pi
    tail_target = (tol / 10.0) / scale
    quad_target = (tol / 2.0) / scale
    sigma = 1.0 / np.sqrt(_d2log_mag(beta, lam, zt2, tau))

    # A 45-degree ray into the upper half-plane (poles are all real, so the
    # integrand is analytic there) turns the oscillatory tail into one that
    # decays like exp(-|tau| t).  Along the ray from beta + i*Omega the c-term
    # can add at most sum_m |z_m|^2 / (|lam_m| Omega) to the log magnitude, so
    # the ray is well conditioned only when that growth is small; otherwise
    # the saturation of Re c makes the plain vertical cut cheap instead.
    use_ray = False
    ray_skip_tail = None
    if tau != 0.0:
        omega_sw = 16.0 * sigma
        corner = beta + 1j * omega_sw
        corner_logmag = float(np.real(log_f(np.array([corner]))[0])) - g0
        ray_growth = float(np.sum(zt2 / (np.abs(lam) * omega_sw)))
        amp_log = corner_logmag + ray_growth
        # tail of the ray bound integrated from t: sqrt(2) e^{amp_log-|tau|t}/|tau|
        full_ray_tail_log = amp_log + 0.5 * np.log(2.0) - np.log(abs(tau))
        if full_ray_tail_log <= np.log(tail_target):
            ray_skip_tail = np.exp(full_ray_tail_log)
        elif amp_log <= 5.0:
            use_ray = True

    if tau != 0.0 and ray_skip_tail is not None:
        # everything beyond the switch point is below the tail budget already
        raw_sum, err_sum, _resabs, converged = _integrate_adaptive(
            vertical_integrand,
            omega_sw * np.array([0.0, 1 / 32, 1 / 16, 1 / 8, 1 / 4, 1 / 2, 1.0]),
            quad_target)
        tail_bound = scale * ray_skip_tail
    elif use_ray:
        raw_v, err_v, _res_v, conv_v = _integrate_adaptive(
            vertical_integrand,
            omega_sw * np.array([0.0, 1 / 32, 1 / 16, 1 / 8, 1 / 4, 1 / 2, 1.0]),
            quad_target / 2.0)
        d = -np.sign(tau) + 1j

        def ray_integrand(t):
            s = corner + t * d
            return (-1j * d * np.exp(log_f(s) - g0)).real

        t_max = max((amp_log + 0.5 * np.log(2.0) - np.log(abs(tau))
                     - np.log(tail_target / 2.0)) / abs(tau), 4.0 / abs(tau))
        edges = [0.0, min(t_max, 0.25 / abs(tau))]
        while edges[-1] < t_max:
            edges.append(min(2.0 * edges[-1], t_max))
        raw_r, err_r, _res_r, conv_r = _integrate_adaptive(
            ray_integrand, np.asarray(edges), quad_target / 2.0)
        raw_sum = raw_v + raw_r
        err_sum = err_v + err_r
        converged = conv_v and conv_r
        tail_bound = tol / 10.0
    else:
        # vertical contour with geometric panels out to the analytic
        # polynomial tail bound (Re c monotone in omega)
        omega_max = _vertical_cut(beta, lam, zt2, tau, g0, tail_target, sigma)
        edges = [0.0, 0.5 * sigma]
        while edges[-1] < omega_max:
            edges.append(min(2.0 * edges[-1], omega_max))
        raw_sum, err_sum, _resabs, converged = _integrate_adaptive(
            vertical_integrand, np.asarray(edges), quad_target)
        tail_bound = tol / 10.0

    raw = scale * raw_sum
    bound = scale * err_sum + tail_bound
    estimate = ProbabilityEstimate(value=raw, abs_error_bound=bound,
                                   method=EvalMethod.QUADRATURE, raw_value=raw)
    if strict and (not converged or bound > tol):
        raise ToleranceNotMet(
            f"quadrature certified only {bound:.3e} > tol {tol:.3e}", estimate)
    return estimate


def outage_probability(form: QuadraticOutageForm, tol: float = 1e-8,
                       strict: bool = True) -> ProbabilityEstimate:
    """Probability that the SINR target is met, Pr(SINR_k >= gamma_k),
    evaluated as the CDF of the recentred quadratic form at tau."""
    gq = GaussianQuadratic(M=-form.Q, z=form.a, tau=form.tau)
    return cdf_quadrature(decompose(gq), form.tau, tol=tol, strict=strict)


def mc_probability(instance: ScenarioInstance, beamformer: BeamformerMatrix,
                   allocation: PowerAllocation, qos: QoSSpec, k: int,
                   n_samples: int, rng_seed) -> ProbabilityEstimate:
    """Monte Carlo estimate of Pr(SINR_k >= gamma_k) over the estimation
    error, with the true channel reconstructed as h_k^H = est_k^H - e_k^H.

    Returns the hit frequency with its binomial standard error.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = np.random.default_rng(rng_seed) if not isinstance(
        rng_seed, np.random.Generator) else rng_seed
    chalf = psd_sqrt(instance.error_cov[k])
    est_row = instance.est_channels[k]
    b = beamformer.columns
    p = allocation.powers
    gamma_k = float(qos.gamma[k])
    sigma_k2 = float(instance.noise_var[k])

    hits = 0
    remaining = int(n_samples)
    chunk = 262_144
    while remaining > 0:
        n = min(chunk, remaining)
        delta = complex_normal(rng, n, instance.n_tx)
        err_rows_h = (delta @ chalf.T).conj()  # rows e_k^H
        rows = est_row[None, :] - err_rows_h
        g2 = np.abs(rows @ b) ** 2
        signal = g2[:, k] * p[k]
        interference = g2 @ p - signal
        hits += int(np.count_nonzero(signal >= gamma_k * (interference + sigma_k2)))
        remaining -= n
    freq = hits / n_samples
    se = float(np.sqrt(freq * (1.0 - freq) / n_samples))
    return ProbabilityEstimate(value=freq, abs_error_bound=se,
                               method=EvalMethod.MONTE_CARLO)
