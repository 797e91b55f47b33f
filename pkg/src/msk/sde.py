"""Time integrators for the second-order system and its limits.

The momentum equation is stiff (relaxation rate ~ lam/mu), so the
second-order integrator freezes coefficients per step and applies the exact
Ornstein-Uhlenbeck update: the matrix exponential is a damped rotation, and
the Gaussian triple (momentum noise, Brownian increment, integrated
momentum) is sampled from its exact joint law for the frozen coefficients.
When the grid step exceeds the relaxation scale the integrator subdivides
internally (Brownian-bridge splitting of the increments), because the
frozen-coefficient cancellation between momentum noise and its position
feedback degrades once coefficients drift within one relaxation time.

The limit equation uses Euler-Maruyama with a step bound dt <= eps/10 so
the fast rotation stays resolved.

Noise is organized as one counter-based stream per (seed, path index,
lane): lane 0 carries the base Brownian increments, lane k the level-k
bridge midpoints, and dedicated lanes the integrator-internal Gaussians.
Ensembles therefore reproduce bitwise regardless of how paths are
scheduled, and all reductions run in ascending path order.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import fields as _f
from .rng import philox_stream

__all__ = [
    "TimeGrid",
    "NoisePath",
    "SamplePath",
    "SecondOrderState",
    "MuSupError",
    "simulate_second_order",
    "simulate_limit",
    "simulate_constant_field_limit",
    "coupled_sup_error",
    "hamiltonian_flow",
    "run_limit_ensemble",
]

_LANE_AUX = 1_000_000      # conditional OU Gaussians
_LANE_SUBSTEP = 2_000_000  # bridge normals for internal substepping
_SUBSTEP_TARGET = 0.1      # internal substep aims at dt_sub <= mu * this
_BLOCK = 256               # steps per RNG block in the second-order engine

FRAME_MAGIC = b"MSK1"


_stream = philox_stream


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid covering [0, t_end] with n_steps = ceil(t_end/dt) steps."""

    t_end: float
    dt: float

    def __post_init__(self):
        if not (self.t_end > 0 and self.dt > 0):
            raise ValueError("t_end and dt must be positive")

    @property
    def n_steps(self) -> int:
        return int(np.ceil(self.t_end / self.dt - 1e-12))

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


@dataclass(frozen=True)
class SecondOrderState:
    q: np.ndarray
    p: np.ndarray


@dataclass(frozen=True)
class NoisePath:
    """One Brownian path on a uniform grid, reproducible from (seed, path_index).

    The path values are the primary data; ``refine`` halves the step by
    inserting bridge midpoints (drawn from the next stream lane) while
    copying the existing values verbatim, so coarse-time partial sums are
    bitwise unchanged and coarse and fine integrations share one Brownian
    motion.
    """

    seed: int
    path_index: int
    dt: float
    values: np.ndarray       # (n_steps + 1, 2), values[0] = 0
    increments: np.ndarray   # (n_steps, 2), diffs of values
    level: int = 0

    @classmethod
    def generate(cls, seed: int, n_steps: int, dt: float,
                 path_index: int = 0) -> "NoisePath":
        rng = _stream(seed, path_index, 0)
        inc = rng.standard_normal((n_steps, 2)) * np.sqrt(dt)
        vals = np.zeros((n_steps + 1, 2))
        np.cumsum(inc, axis=0, out=vals[1:])
        return cls(seed=seed, path_index=path_index, dt=float(dt),
                   values=vals, increments=inc, level=0)

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    def refine(self) -> "NoisePath":
        level = self.level + 1
        rng = _stream(self.seed, self.path_index, level)
        n = self.n_steps
        mid = rng.standard_normal((n, 2)) * np.sqrt(self.dt / 4.0)
        vals = np.empty((2 * n + 1, 2))
        vals[0::2] = self.values
        vals[1::2] = 0.5 * (self.values[:-1] + self.values[1:]) + mid
        return NoisePath(seed=self.seed, path_index=self.path_index,
                         dt=self.dt / 2.0, values=vals,
                         increments=np.diff(vals, axis=0), level=level)

    def brownian(self) -> np.ndarray:
        """Path values at grid times, starting from the origin."""
        return self.values.copy()


@dataclass
class SamplePath:
    """Trajectory on a fixed grid; positions (n+1, 2), optional velocities."""

    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray | None = None

    def __post_init__(self):
        if len(self.times) != len(self.positions):
            raise ValueError("times and positions must have equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def write_jsonl(self, stream, stride: int = 1) -> None:
        for i in range(0, len(self.times), stride):
            rec = {"t": float(self.times[i]),
                   "q": [float(self.positions[i, 0]), float(self.positions[i, 1])]}
            if self.velocities is not None:
                rec["p"] = [float(self.velocities[i, 0]), float(self.velocities[i, 1])]
            stream.write(json.dumps(rec) + "\n")

    def write_frame(self, stream, stride: int = 1) -> None:
        """Compact binary frame: magic, record/column counts, float64 rows."""
        idx = np.arange(0, len(self.times), stride)
        cols = [self.times[idx], self.positions[idx, 0], self.positions[idx, 1]]
        if self.velocities is not None:
            cols += [self.velocities[idx, 0], self.velocities[idx, 1]]
        data = np.column_stack(cols).astype("<f8")
        stream.write(FRAME_MAGIC)
        stream.write(struct.pack("<II", data.shape[0], data.shape[1]))
        stream.write(data.tobytes())

    @staticmethod
    def read_frame(stream) -> "SamplePath":
        magic = stream.read(4)
        if magic != FRAME_MAGIC:
            raise ValueError(f"bad frame magic {magic!r}")
        n, m = struct.unpack("<II", stream.read(8))
        data = np.frombuffer(stream.read(8 * n * m), dtype="<f8").reshape(n, m)
        vel = data[:, 3:5].copy() if m >= 5 else None
        return SamplePath(times=data[:, 0].copy(),
                          positions=data[:, 1:3].copy(), velocities=vel)


class MuSupError(NamedTuple):
    mu: float
    mean: float
    stderr: float


# ---------------------------------------------------------------------------
# batched integrator cores; states are (n_paths, 2) arrays
# ---------------------------------------------------------------------------

def _linv_apply(lam, eps, v):
    """Friction inverse times a vector, valid for eps >= 0 since lam > 0."""
    den = lam * lam + eps * eps
    out = np.empty_like(v)
    out[..., 0] = (eps * v[..., 0] - lam * v[..., 1]) / den
    out[..., 1] = (lam * v[..., 0] + eps * v[..., 1]) / den
    return out


def _ou_step(field, mu, eps, q, p, dt, dw, xi):
    """One exact-OU step with coefficients frozen at q."""
    lam = field.lam(q)
    bvec = field.b(q)
    sig = field.sigma(q)
    b0, b1, b2 = _f._beta_moments(sig @ np.swapaxes(sig, -1, -2))

    pstar = _linv_apply(lam, eps, bvec)
    theta = lam * dt / mu
    damp = np.exp(-eps * dt / mu)
    c, s = damp * np.cos(theta), damp * np.sin(theta)
    dp = p - pstar
    e_dp = np.stack([c * dp[..., 0] - s * dp[..., 1],
                     s * dp[..., 0] + c * dp[..., 1]], axis=-1)

    # Covariance of the momentum noise from the damped rotation integrals;
    # a = 0 (eps = 0) is the undamped case.
    a = 2.0 * eps / mu
    bb = 2.0 * lam / mu
    i0 = -np.expm1(-a * dt) / a if a > 0 else np.full_like(lam, dt)
    den2 = a * a + bb * bb
    e_ad = np.exp(-a * dt)
    cb, sb = np.cos(bb * dt), np.sin(bb * dt)
    ic = (a + e_ad * (bb * sb - a * cb)) / den2
    is_ = (bb - e_ad * (bb * cb + a * sb)) / den2
    mu2 = mu * mu
    c11 = (2 * b0 * i0 + 2 * b1 * ic - 2 * b2 * is_) / mu2
    c12 = (2 * b1 * is_ + 2 * b2 * ic) / mu2
    c22 = (2 * b0 * i0 - 2 * b1 * ic + 2 * b2 * is_) / mu2

    # K = Linv (I - E) sigma / dt: conditional mean of the momentum noise
    # given the Brownian increment.
    one_c = 1.0 - c
    den = lam * lam + eps * eps
    t11 = (eps * one_c + lam * s) / den
    t12 = (eps * s - lam * one_c) / den
    t21 = (lam * one_c - eps * s) / den
    t22 = (lam * s + eps * one_c) / den
    k11 = (t11 * sig[..., 0, 0] + t12 * sig[..., 1, 0]) / dt
    k12 = (t11 * sig[..., 0, 1] + t12 * sig[..., 1, 1]) / dt
    k21 = (t21 * sig[..., 0, 0] + t22 * sig[..., 1, 0]) / dt
    k22 = (t21 * sig[..., 0, 1] + t22 * sig[..., 1, 1]) / dt

    cc11 = np.maximum(c11 - dt * (k11 * k11 + k12 * k12), 0.0)
    cc12 = c12 - dt * (k11 * k21 + k12 * k22)
    cc22 = c22 - dt * (k21 * k21 + k22 * k22)
    l11 = np.sqrt(cc11)
    with np.errstate(divide="ignore", invalid="ignore"):
        l21 = np.where(l11 > 0, cc12 / np.where(l11 > 0, l11, 1.0), 0.0)
    l22 = np.sqrt(np.maximum(cc22 - l21 * l21, 0.0))

    n1 = k11 * dw[..., 0] + k12 * dw[..., 1] + l11 * xi[..., 0]
    n2 = k21 * dw[..., 0] + k22 * dw[..., 1] + l21 * xi[..., 0] + l22 * xi[..., 1]
    noise_p = np.stack([n1, n2], axis=-1)

    p_new = pstar + e_dp + noise_p
    sig_dw = np.einsum("...ij,...j->...i", sig, dw)
    q_new = (q + pstar * dt + mu * _linv_apply(lam, eps, dp - e_dp)
             + _linv_apply(lam, eps, sig_dw) - mu * _linv_apply(lam, eps, noise_p))
    return q_new, p_new


def _limit_drift_diffusion(field, q, eps):
    """Drift and diffusion of the limit equation, fused for the step loop.

    Assembled from the slow/fast pieces (fast term + mean block + eps
    block); the sum telescopes back to friction_inverse @ b + the
    noise-induced drift.
    """
    lam = field.lam(q)
    g = field.grad_lam(q)
    bvec = field.b(q)
    sig = field.sigma(q)
    b0, b1, b2 = _f._beta_moments(sig @ np.swapaxes(sig, -1, -2))
    drift = _linv_apply(lam, eps, bvec)
    fast = b0 / (eps * lam * lam)
    drift[..., 0] += fast * g[..., 1]
    drift[..., 1] -= fast * g[..., 0]
    m_mat = _f._m_matrix(lam, b0, b1, b2)
    r_mat = _f._remainder_matrix(lam, b0, b1, b2, eps)
    drift += np.einsum("...ij,...j->...i", r_mat - m_mat, g)
    den = (lam * lam + eps * eps)[..., None, None]
    lam_inv = np.empty(np.shape(lam) + (2, 2))
    lam_inv[..., 0, 0] = eps
    lam_inv[..., 0, 1] = -lam
    lam_inv[..., 1, 0] = lam
    lam_inv[..., 1, 1] = eps
    diff = (lam_inv / den) @ sig
    return drift, diff


def _limit_step(field, eps, q, dt, dw):
    drift, diff = _limit_drift_diffusion(field, q, eps)
    return q + drift * dt + np.einsum("...ij,...j->...i", diff, dw)


def _substeps_for(mu: float, dt: float) -> int:
    return max(1, int(np.ceil(dt / (mu * _SUBSTEP_TARGET) - 1e-9)))


def _second_order_engine(field, mu, eps, q, p, dt, n_steps, dw, seed,
                         path_indices, level, on_step):
    """Advance (q, p) ensembles n_steps; calls on_step(k, q, p) after each.

    ``dw`` holds grid-level increments (n_paths, n_steps, 2); sub-increments
    and auxiliary Gaussians are drawn blockwise from per-path streams so the
    results do not depend on ensemble layout.
    """
    n_paths = q.shape[0]
    m = _substeps_for(mu, dt)
    dt_sub = dt / m
    aux = [_stream(seed, idx, _LANE_AUX + level) for idx in path_indices]
    sub = ([_stream(seed, idx, _LANE_SUBSTEP + level) for idx in path_indices]
           if m > 1 else None)
    for start in range(0, n_steps, _BLOCK):
        stop = min(start + _BLOCK, n_steps)
        nb = stop - start
        xi = np.empty((n_paths, nb * m, 2))
        for i, gen in enumerate(aux):
            xi[i] = gen.standard_normal((nb * m, 2))
        if m > 1:
            eta = np.empty((n_paths, nb, m, 2))
            for i, gen in enumerate(sub):
                eta[i] = gen.standard_normal((nb, m, 2))
            eta *= np.sqrt(dt_sub)
            delta = dw[:, start:stop, None, :] / m + eta - eta.mean(axis=2, keepdims=True)
            # pin the sums exactly to the grid increments
            delta[:, :, m - 1, :] = dw[:, start:stop, :] - delta[:, :, :m - 1, :].sum(axis=2)
        else:
            delta = dw[:, start:stop, None, :]
        for j in range(nb):
            for s_idx in range(m):
                q, p = _ou_step(field, mu, eps, q, p, dt_sub,
                                delta[:, j, s_idx], xi[:, j * m + s_idx])
            on_step(start + j, q, p)
    return q, p


# ---------------------------------------------------------------------------
# public single-path operations
# ---------------------------------------------------------------------------

def simulate_second_order(field: _f.FieldModel, mu: float, eps: float,
                          init: SecondOrderState, grid: TimeGrid,
                          noise: NoisePath) -> SamplePath:
    """Integrate the second-order system with the frozen-coefficient OU scheme."""
    if not mu > 0:
        raise ValueError(f"mu must be > 0, got {mu}")
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    if grid.dt > mu:
        warnings.warn("dt exceeds mu; accuracy (not stability) of the "
                      "frozen-coefficient scheme degrades", stacklevel=2)
    n = grid.n_steps
    if noise.n_steps < n:
        raise ValueError("noise path shorter than the time grid")
    qs = np.empty((n + 1, 2))
    ps = np.empty((n + 1, 2))
    qs[0] = np.asarray(init.q, dtype=float)
    ps[0] = np.asarray(init.p, dtype=float)

    def record(k, q, p):
        qs[k + 1] = q[0]
        ps[k + 1] = p[0]

    _second_order_engine(field, mu, eps, qs[0][None, :].copy(), ps[0][None, :].copy(),
                         grid.dt, n, noise.increments[None, :n], noise.seed,
                         [noise.path_index], noise.level, record)
    return SamplePath(times=grid.times(), positions=qs, velocities=ps)


def simulate_limit(field: _f.FieldModel, eps: float, q0: np.ndarray,
                   grid: TimeGrid, noise: NoisePath) -> SamplePath:
    """Euler-Maruyama path of the limit equation in its slow/fast form."""
    _f._require_positive_eps(eps)
    if grid.dt > eps / 10.0 + 1e-15:
        raise ValueError(
            f"dt={grid.dt} too coarse for eps={eps}: need dt <= eps/10 to "
            "resolve the fast rotation")
    n = grid.n_steps
    if noise.n_steps < n:
        raise ValueError("noise path shorter than the time grid")
    q = np.asarray(q0, dtype=float)[None, :].copy()
    qs = np.empty((n + 1, 2))
    qs[0] = q[0]
    for k in range(n):
        q = _limit_step(field, eps, q, grid.dt, noise.increments[k][None, :])
        qs[k + 1] = q[0]
    return SamplePath(times=grid.times(), positions=qs)


def _constant_intensity(field: _f.FieldModel, q0: np.ndarray) -> float:
    probe = np.concatenate([np.asarray(q0, dtype=float)[None, :],
                            np.random.default_rng(9).uniform(-3, 3, (32, 2))])
    vals = field.lam(probe)
    bar = float(vals.mean())
    if np.abs(vals - bar).max() > 1e-10 * max(1.0, abs(bar)):
        raise ValueError("field intensity is not constant")
    return bar


def simulate_constant_field_limit(field: _f.FieldModel, q0: np.ndarray,
                                  grid: TimeGrid, noise: NoisePath) -> SamplePath:
    """EM path of the eps -> 0 constant-intensity limit equation.

    The drift is -(1/lam)*A*b and the diffusion -(1/lam)*A*sigma, the
    entrywise limit of the friction-inverse blocks.
    """
    lam_bar = _constant_intensity(field, q0)
    n = grid.n_steps
    if noise.n_steps < n:
        raise ValueError("noise path shorter than the time grid")
    a_mat = _f.ROTATION_GENERATOR
    q = np.asarray(q0, dtype=float).copy()
    qs = np.empty((n + 1, 2))
    qs[0] = q
    for k in range(n):
        drift = -(a_mat @ field.b(q)) / lam_bar
        diff = -(a_mat @ field.sigma(q)) / lam_bar
        q = q + drift * grid.dt + diff @ noise.increments[k]
        qs[k + 1] = q
    return SamplePath(times=grid.times(), positions=qs)


def hamiltonian_flow(field: _f.FieldModel, x0: np.ndarray, t_end: float,
                     dt: float) -> SamplePath:
    """RK4 integration of the deterministic fast flow along level sets."""
    if not dt > 0:
        raise ValueError("dt must be positive")

    def rhs(x):
        g = field.grad_lam(x)
        sig = field.sigma(x)
        b0, _, _ = _f._beta_moments(sig @ np.swapaxes(sig, -1, -2))
        lam = field.lam(x)
        coef = b0 / (lam * lam)
        return np.stack([coef * g[..., 1], -coef * g[..., 0]], axis=-1)

    n = int(np.ceil(t_end / dt - 1e-12))
    xs = np.empty((n + 1, 2))
    xs[0] = np.asarray(x0, dtype=float)
    x = xs[0]
    for k in range(n):
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * dt * k1)
        k3 = rhs(x + 0.5 * dt * k2)
        k4 = rhs(x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        xs[k + 1] = x
    return SamplePath(times=np.arange(n + 1) * dt, positions=xs)


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

def _ensemble_increments(seed: int, n_paths: int, n_steps: int, dt: float):
    dw = np.empty((n_paths, n_steps, 2))
    for i in range(n_paths):
        dw[i] = _stream(seed, i, 0).standard_normal((n_steps, 2))
    dw *= np.sqrt(dt)
    return dw


def run_limit_ensemble(field: _f.FieldModel, eps: float, q0: np.ndarray,
                       grid: TimeGrid, seed: int, n_paths: int, *,
                       record_at: Sequence[int] | None = None,
                       observer: Callable[[int, float, np.ndarray], None] | None = None,
                       block: int = 4096) -> np.ndarray:
    """EM ensemble of the limit equation with per-path noise streams.

    Returns the states at the recorded step indices, shape
    (len(record_at), n_paths, 2); ``record_at`` defaults to the final step.
    ``observer(step, time, states)`` is called after every step for online
    statistics.  Increments are drawn blockwise, so memory stays bounded for
    long horizons.
    """
    _f._require_positive_eps(eps)
    if grid.dt > eps / 10.0 + 1e-15:
        raise ValueError(f"dt={grid.dt} too coarse for eps={eps}")
    n = grid.n_steps
    record = sorted(set(int(r) for r in (record_at if record_at is not None else [n])))
    if record and (record[0] < 1 or record[-1] > n):
        raise ValueError("record_at indices must lie in [1, n_steps]")
    q0 = np.asarray(q0, dtype=float)
    q = np.broadcast_to(q0, (n_paths, 2)).copy() if q0.ndim == 1 else q0.copy()
    gens = [_stream(seed, i, 0) for i in range(n_paths)]
    sqdt = np.sqrt(grid.dt)
    out = np.empty((len(record), n_paths, 2))
    rec_map = {step: j for j, step in enumerate(record)}
    for start in range(0, n, block):
        stop = min(start + block, n)
        dw = np.empty((n_paths, stop - start, 2))
        for i, gen in enumerate(gens):
            dw[i] = gen.standard_normal((stop - start, 2))
        dw *= sqdt
        for k in range(start, stop):
            q = _limit_step(field, eps, q, grid.dt, dw[:, k - start])
            if observer is not None:
                observer(k + 1, (k + 1) * grid.dt, q)
            j = rec_map.get(k + 1)
            if j is not None:
                out[j] = q
    return out


def coupled_sup_error(field: _f.FieldModel, mu_list: Sequence[float], eps: float,
                      init: SecondOrderState, grid: TimeGrid, n_paths: int,
                      seed: int) -> list[MuSupError]:
    """Monte Carlo estimate of E sup_t |q_mu(t) - q_eps(t)| per mass value.

    Each path drives the second-order system and the limit equation with the
    same Brownian increments; the sup runs over the shared grid times (a
    lower bound for the continuous sup).  Paths are reduced in ascending
    index order, so results do not depend on scheduling.
    """
    _f._require_positive_eps(eps)
    if any(m <= 0 for m in mu_list):
        raise ValueError("all mu must be positive")
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    n = grid.n_steps
    dw = _ensemble_increments(seed, n_paths, n, grid.dt)

    # Limit trajectory is mu-independent: integrate once, keep all times.
    q_lim = np.empty((n + 1, n_paths, 2))
    q = np.broadcast_to(np.asarray(init.q, dtype=float), (n_paths, 2)).copy()
    q_lim[0] = q
    for k in range(n):
        q = _limit_step(field, eps, q, grid.dt, dw[:, k])
        q_lim[k + 1] = q

    out = []
    for mu in mu_list:
        q = np.broadcast_to(np.asarray(init.q, dtype=float), (n_paths, 2)).copy()
        p = np.broadcast_to(np.asarray(init.p, dtype=float), (n_paths, 2)).copy()
        sup = np.linalg.norm(q - q_lim[0], axis=1)

        def track(k, qq, pp):
            err = np.linalg.norm(qq - q_lim[k + 1], axis=1)
            np.maximum(sup, err, out=sup)

        _second_order_engine(field, mu, eps, q, p, grid.dt, n, dw, seed,
                             list(range(n_paths)), 0, track)
        mean = float(sup.mean())
        stderr = float(sup.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
        out.append(MuSupError(mu=float(mu), mean=mean, stderr=stderr))
    return out
