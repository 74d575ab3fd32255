"""Downlink system model: channels, estimates, beamformers, SINR, and the
quadratic-form view of the per-user outage constraint."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

HERMITIAN_TOL = 1e-12
ZF_TOL = 1e-9


class SingularChannel(Exception):
    """Estimated channel Gram matrix is numerically singular."""


class SingularSystem(Exception):
    """The nominal power-balance linear system is numerically singular."""


class Diverged(Exception):
    """A fixed-point iteration failed to converge within its sweep budget."""


def db_to_linear(x_db):
    return 10.0 ** (np.asarray(x_db, dtype=float) / 10.0)


def complex_normal(rng: np.random.Generator, *shape) -> np.ndarray:
    """Standard circular complex Gaussian samples, CN(0, 1) per entry."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class QoSSpec:
    """Per-user SINR targets (linear) and outage tolerances."""

    gamma: np.ndarray
    epsilon: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gamma", np.atleast_1d(np.asarray(self.gamma, dtype=float)))
        object.__setattr__(self, "epsilon", np.atleast_1d(np.asarray(self.epsilon, dtype=float)))
        if self.gamma.shape != self.epsilon.shape:
            raise ValueError("gamma and epsilon must have matching shapes")
        if not np.all(self.gamma > 0):
            raise ValueError("SINR targets must be positive")
        if not np.all((self.epsilon > 0) & (self.epsilon < 1)):
            raise ValueError("outage tolerances must lie in (0, 1)")

    @classmethod
    def from_db(cls, gamma_db, epsilon, n_users: int) -> "QoSSpec":
        gamma = np.full(n_users, db_to_linear(gamma_db), dtype=float)
        eps = np.full(n_users, float(epsilon))
        return cls(gamma=gamma, epsilon=eps)

    @property
    def n_users(self) -> int:
        return self.gamma.size


@dataclass(frozen=True)
class ScenarioInstance:
    """One simulated draw: true channels, estimates, error covariances, noise.

    Row k of ``true_channels`` / ``est_channels`` is the conjugated channel
    vector h_k^H / its estimate.  ``error_cov[k]`` is the Hermitian PSD
    covariance of the estimation error for user k.
    """

    true_channels: np.ndarray
    est_channels: np.ndarray
    error_cov: np.ndarray
    noise_var: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.true_channels, dtype=complex)
        hh = np.asarray(self.est_channels, dtype=complex)
        cov = np.asarray(self.error_cov, dtype=complex)
        nv = np.atleast_1d(np.asarray(self.noise_var, dtype=float))
        object.__setattr__(self, "true_channels", h)
        object.__setattr__(self, "est_channels", hh)
        object.__setattr__(self, "error_cov", cov)
        object.__setattr__(self, "noise_var", nv)
        k, nt = h.shape
        if hh.shape != (k, nt):
            raise ValueError("true and estimated channels must share a shape")
        if cov.shape != (k, nt, nt):
            raise ValueError(f"error_cov must have shape ({k}, {nt}, {nt})")
        if nv.shape != (k,):
            raise ValueError("noise_var must have one entry per user")
        if not np.all(nv > 0):
            raise ValueError("noise variances must be positive")
        scale = max(1.0, float(np.max(np.abs(cov)))) if cov.size else 1.0
        for ck in cov:
            if np.max(np.abs(ck - ck.conj().T)) > HERMITIAN_TOL * scale:
                raise ValueError("error covariance is not Hermitian")
            if np.min(np.linalg.eigvalsh(ck)) < -1e-12 * scale:
                raise ValueError("error covariance has a significantly negative eigenvalue")

    @property
    def n_users(self) -> int:
        return self.true_channels.shape[0]

    @property
    def n_tx(self) -> int:
        return self.true_channels.shape[1]


class BeamformerKind(enum.Enum):
    ZF = "zf"
    RCI = "rci"
    PCSI = "pcsi"
    CUSTOM = "custom"


@dataclass(frozen=True)
class BeamformerMatrix:
    """Fixed (unnormalized) transmit directions, one column per user."""

    columns: np.ndarray
    kind: BeamformerKind = BeamformerKind.CUSTOM

    def __post_init__(self):
        b = np.asarray(self.columns, dtype=complex)
        object.__setattr__(self, "columns", b)
        if b.ndim != 2:
            raise ValueError("beamformer matrix must be two-dimensional")
        norms = np.linalg.norm(b, axis=0)
        if np.any(norms == 0):
            raise ValueError("beamformer columns must be nonzero")

    @property
    def n_users(self) -> int:
        return self.columns.shape[1]

    def column(self, k: int) -> np.ndarray:
        return self.columns[:, k]


@dataclass(frozen=True)
class PowerAllocation:
    """Nonnegative per-user transmit powers for fixed directions."""

    powers: np.ndarray

    def __post_init__(self):
        p = np.atleast_1d(np.asarray(self.powers, dtype=float))
        object.__setattr__(self, "powers", p)
        if np.any(p < 0):
            raise ValueError("powers must be nonnegative")
        if not np.all(np.isfinite(p)):
            raise ValueError("powers must be finite")

    def total_power(self, beamformer: BeamformerMatrix) -> float:
        norms2 = np.sum(np.abs(beamformer.columns) ** 2, axis=0)
        return float(np.dot(self.powers, norms2))


@dataclass(frozen=True)
class QuadraticOutageForm:
    """Per-user outage constraint expressed through a Hermitian quadratic form
    of a standard complex Gaussian vector.

    The SINR margin for user k, as a function of the normalized estimation
    error delta ~ CN(0, I), is  delta^H Q delta + 2 Re(delta^H r) + v;  the
    outage probability is the chance this margin is negative.  ``a`` and
    ``tau`` recentre the margin so that it reads  ||delta - a||^2_{(-Q)} <= tau.
    """

    Q: np.ndarray
    r: np.ndarray
    v: float
    a: np.ndarray
    tau: float


def generate_rayleigh_channels(n_tx: int, n_users: int, rng_seed) -> np.ndarray:
    """i.i.d. Rayleigh-fading channel rows, CN(0, 1) entries."""
    if n_tx < 1 or n_users < 1:
        raise ValueError("n_tx and n_users must be at least 1")
    rng = _as_rng(rng_seed)
    return complex_normal(rng, n_users, n_tx)


def uplink_error_variance(sigma2_bs: float, l_ut: int, p_ut: float) -> float:
    """Estimation error variance from orthogonal uplink training."""
    if sigma2_bs <= 0 or l_ut < 1 or p_ut <= 0:
        raise ValueError("invalid uplink training parameters")
    return sigma2_bs / (sigma2_bs + l_ut * p_ut)


def simulate_uplink_estimate(true_channels: np.ndarray, sigma2_bs: float,
                             l_ut: int, p_ut: float, rng_seed):
    """Additive Gaussian channel estimates from uplink training.

    Returns (est_channels, error_cov) with est = true + error, the error drawn
    i.i.d. CN(0, sigma_e^2 I) per user, and error_cov[k] = sigma_e^2 I.
    """
    rng = _as_rng(rng_seed)
    h = np.asarray(true_channels, dtype=complex)
    k, nt = h.shape
    sigma_e2 = uplink_error_variance(sigma2_bs, l_ut, p_ut)
    est = h + np.sqrt(sigma_e2) * complex_normal(rng, k, nt)
    cov = np.broadcast_to(sigma_e2 * np.eye(nt), (k, nt, nt)).copy()
    return est, cov


def build_zf(est_channels: np.ndarray) -> BeamformerMatrix:
    """Zero-forcing directions for the estimated channels: B = H^H (H H^H)^-1."""
    hh = np.asarray(est_channels, dtype=complex)
    gram = hh @ hh.conj().T
    if np.linalg.cond(gram) > 1e12:
        raise SingularChannel("estimated channel Gram matrix is ill conditioned")
    cols = hh.conj().T @ np.linalg.inv(gram)
    return BeamformerMatrix(columns=cols, kind=BeamformerKind.ZF)


def build_rci(est_channels: np.ndarray, alpha: float) -> BeamformerMatrix:
    """Regularized channel inversion directions: B = H^H (H H^H + alpha I)^-1."""
    if alpha < 0:
        raise ValueError("regularization must be nonnegative")
    hh = np.asarray(est_channels, dtype=complex)
    k = hh.shape[0]
    gram = hh @ hh.conj().T + alpha * np.eye(k)
    if alpha == 0 and np.linalg.cond(gram) > 1e12:
        raise SingularChannel("estimated channel Gram matrix is ill conditioned")
    cols = hh.conj().T @ np.linalg.inv(gram)
    kind = BeamformerKind.ZF if alpha == 0 else BeamformerKind.RCI
    return BeamformerMatrix(columns=cols, kind=kind)


def build_pcsi_directions(est_channels: np.ndarray, qos: QoSSpec,
                          noise_var, max_sweeps: int = 10_000,
                          rel_tol: float = 1e-10) -> BeamformerMatrix:
    """Optimal fixed directions when the estimates are treated as exact.

    Solves the classical power-minimization beamforming problem through its
    virtual-uplink fixed point: iterate
        q_k <- gamma_k / ((1 + gamma_k) h_k^H R(q)^-1 h_k),
        R(q) = sigma_k^2 I + sum_j q_j h_j h_j^H,
    then take direction k as the normalized vector R(q)^-1 h_k.  Requires the
    uplink problem to be feasible; raises Diverged otherwise.
    """
    hh = np.asarray(est_channels, dtype=complex)
    k, nt = hh.shape
    nv = np.broadcast_to(np.asarray(noise_var, dtype=float), (k,))
    gamma = qos.gamma
    ratio = gamma / (1.0 + gamma)

    def mmse_gains(q):
        accum = (hh.conj().T * q) @ hh
        gains = np.empty(k)
        vecs = np.empty((nt, k), dtype=complex)
        for i in range(k):
            vecs[:, i] = np.linalg.solve(nv[i] * np.eye(nt) + accum, hh[i].conj())
            gains[i] = np.real(hh[i] @ vecs[:, i])
        return gains, vecs

    q = np.ones(k)
    for _ in range(max_sweeps):
        gains, _ = mmse_gains(q)
        q_new = ratio / gains
        if not np.all(np.isfinite(q_new)) or np.any(q_new <= 0):
            raise Diverged("virtual uplink iteration produced invalid powers")
        if np.max(np.abs(q_new - q) / np.maximum(q_new, 1e-300)) < rel_tol:
            q = q_new
            break
        q = q_new
    else:
        raise Diverged("virtual uplink iteration did not converge")
    _, cols = mmse_gains(q)
    cols = cols / np.linalg.norm(cols, axis=0, keepdims=True)
    return BeamformerMatrix(columns=cols, kind=BeamformerKind.PCSI)


def sinr(channel_row: np.ndarray, beamformer: BeamformerMatrix,
         allocation: PowerAllocation, sigma_k2: float, k: int) -> float:
    """SINR of user k for a given channel row (conjugated channel vector)."""
    g2 = np.abs(np.asarray(channel_row) @ beamformer.columns) ** 2
    p = allocation.powers
    signal = g2[k] * p[k]
    interference = float(np.dot(g2, p) - signal)
    return float(signal / (interference + sigma_k2))


def psd_sqrt(c: np.ndarray) -> np.ndarray:
    """Principal Hermitian PSD square root, negative eigenvalues clamped to 0."""
    w, v = np.linalg.eigh(np.asarray(c, dtype=complex))
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.conj().T


def psd_inv_sqrt(c: np.ndarray) -> np.ndarray:
    """Pseudo-inverse square root; eigenvalues below 1e-12 * lambda_max are
    treated as zero."""
    w, v = np.linalg.eigh(np.asarray(c, dtype=complex))
    w = np.clip(w, 0.0, None)
    cutoff = 1e-12 * max(float(w.max(initial=0.0)), 0.0)
    inv = np.where(w > cutoff, 1.0 / np.sqrt(np.where(w > cutoff, w, 1.0)), 0.0)
    return (v * inv) @ v.conj().T


def _signal_interference_matrix(beamformer: BeamformerMatrix,
                                allocation: PowerAllocation,
                                gamma_k: float, k: int) -> np.ndarray:
    """(p_k / gamma_k) b_k b_k^H  -  sum_{j != k} p_j b_j b_j^H."""
    b = beamformer.columns
    p = allocation.powers
    bk = b[:, k]
    a = (p[k] / gamma_k) * np.outer(bk, bk.conj())
    mask = np.ones(p.size, dtype=bool)
    mask[k] = False
    bbar = b[:, mask]
    return a - (bbar * p[mask]) @ bbar.conj().T


def build_outage_form(instance: ScenarioInstance, beamformer: BeamformerMatrix,
                      allocation: PowerAllocation, qos: QoSSpec,
                      k: int) -> QuadraticOutageForm:
    """Quadratic-form data for user k's outage constraint at the given powers."""
    c = instance.error_cov[k]
    chalf = psd_sqrt(c)
    cinvhalf = psd_inv_sqrt(c)
    hk = instance.est_channels[k].conj()
    a_mat = _signal_interference_matrix(beamformer, allocation, qos.gamma[k], k)
    q = chalf @ a_mat @ chalf
    q = 0.5 * (q + q.conj().T)
    r = chalf @ (a_mat @ hk)
    v = float(np.real(hk.conj() @ a_mat @ hk)) - float(instance.noise_var[k])
    a = -cinvhalf @ hk
    tau = v - float(np.real(a.conj() @ q @ a))
    return QuadraticOutageForm(Q=q, r=r, v=v, a=a, tau=tau)


def init_powers_pcsi(est_channels: np.ndarray, beamformer: BeamformerMatrix,
                     qos: QoSSpec, noise_var):
    """Powers that meet the SINR targets exactly if the estimates were the
    truth.

    Solves the K x K balance system with diagonal |h_k^H b_k|^2 / gamma_k and
    off-diagonal -|h_k^H b_i|^2 against the noise vector.  Falls back to the
    decoupled values gamma_k sigma_k^2 when the solve fails or yields a
    nonpositive power.  Returns (allocation, used_fallback).
    """
    hh = np.asarray(est_channels, dtype=complex)
    k = hh.shape[0]
    nv = np.broadcast_to(np.asarray(noise_var, dtype=float), (k,))
    g2 = np.abs(hh @ beamformer.columns) ** 2
    mat = -g2.copy()
    np.fill_diagonal(mat, g2.diagonal() / qos.gamma)
    fallback = qos.gamma * nv
    try:
        if np.linalg.cond(mat) > 1e12:
            raise SingularSystem("power balance system is ill conditioned")
        p = np.linalg.solve(mat, nv)
    except (np.linalg.LinAlgError, SingularSystem):
        return PowerAllocation(powers=fallback), True
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        return PowerAllocation(powers=fallback), True
    return PowerAllocation(powers=p), False
