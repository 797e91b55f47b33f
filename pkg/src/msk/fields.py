"""Problem definitions and closed-form coefficients of the magnetic Langevin system.

A field model bundles the drift b, the noise matrix sigma and the magnetic
intensity lambda (with analytic first and second derivatives).  Everything in
this module is a pure function of the model and broadcasts over leading axes:
points are arrays of shape (..., 2), scalars come back as (...), vectors as
(..., 2) and matrices as (..., 2, 2).

The friction matrix is ``lam(q) * A + eps * I`` with the quarter-turn matrix
``A = [[0, 1], [-1, 0]]``.  All 2x2 algebra is done in closed form; the
determinant ``lam**2 + eps**2`` is always positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from typing import Callable

import numpy as np

__all__ = [
    "ROTATION_GENERATOR",
    "FieldModel",
    "NoiseDecomposition",
    "DriftDecomposition",
    "LimitSdeCoefficients",
    "PlaneFunction",
    "GeneratorAction",
    "get_field",
    "field_names",
    "field_from_config",
    "make_polynomial_field",
    "noise_moments",
    "friction_matrix",
    "friction_inverse",
    "h_epsilon",
    "lyapunov_solution",
    "lyapunov_quadrature",
    "noise_induced_drift_direct",
    "drift_decomposition",
    "limit_coefficients",
    "apply_generators",
    "lambda_function",
]

# Generator of clockwise quarter turns; exp(-lam*A*r) is the rotation by lam*r.
ROTATION_GENERATOR = np.array([[0.0, 1.0], [-1.0, 0.0]])

_IDENTITY = np.eye(2)


def _require_positive_eps(eps: float) -> float:
    eps = float(eps)
    if not eps > 0.0:
        raise ValueError(f"eps must be > 0 for the regularized coefficients, got {eps}")
    return eps


def _perp(v: np.ndarray) -> np.ndarray:
    """(d2, -d1) convention for the skew gradient."""
    out = np.empty_like(v)
    out[..., 0] = v[..., 1]
    out[..., 1] = -v[..., 0]
    return out


def rotation(theta: np.ndarray) -> np.ndarray:
    """Matrix exp(-lam*A*r) evaluated at theta = lam*r, shape (..., 2, 2)."""
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    out = np.empty(theta.shape + (2, 2))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    return out


@dataclass(frozen=True)
class FieldModel:
    """Drift, noise and intensity defining one problem instance.

    All callables accept points of shape (..., 2).  ``lam`` must stay above
    the strictly positive bound ``lam0`` everywhere the model is evaluated,
    and ``grad_lam`` / ``hess_lam`` are the analytic derivatives of ``lam``.
    Instances are immutable and safe to share across workers.
    """

    name: str
    lam: Callable[[np.ndarray], np.ndarray]
    grad_lam: Callable[[np.ndarray], np.ndarray]
    hess_lam: Callable[[np.ndarray], np.ndarray]
    b: Callable[[np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    lam0: float
    critical_points: tuple = ()

    def sigma_squared(self, q: np.ndarray) -> np.ndarray:
        """sigma @ sigma* at q, shape (..., 2, 2)."""
        s = self.sigma(q)
        return s @ np.swapaxes(s, -1, -2)

    def check_consistency(self, points: np.ndarray, h: float = 1e-5,
                          beta_min: float = 1e-12) -> None:
        """Validate the model invariants on a batch of sample points.

        Checks the lower bound on lam, the non-degeneracy of beta0 and the
        agreement of the analytic derivatives with central differences of lam
        to O(h**2).  Raises ValueError on the first violation.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        lam = self.lam(pts)
        if np.any(lam < self.lam0 - 1e-12):
            raise ValueError(f"lam dips below lam0={self.lam0} on the sample")
        b0, _, _ = _beta_moments(self.sigma_squared(pts))
        if np.any(b0 < beta_min):
            raise ValueError("beta0 is degenerate on the sample")
        ex = np.array([h, 0.0])
        ey = np.array([0.0, h])
        fd_grad = np.stack([
            (self.lam(pts + ex) - self.lam(pts - ex)) / (2 * h),
            (self.lam(pts + ey) - self.lam(pts - ey)) / (2 * h),
        ], axis=-1)
        if not np.allclose(fd_grad, self.grad_lam(pts), atol=50 * h * h, rtol=1e-4):
            raise ValueError("grad_lam disagrees with finite differences")
        g = self.grad_lam
        fd_hess = np.stack([
            np.stack([(g(pts + ex)[..., 0] - g(pts - ex)[..., 0]) / (2 * h),
                      (g(pts + ey)[..., 0] - g(pts - ey)[..., 0]) / (2 * h)], axis=-1),
            np.stack([(g(pts + ex)[..., 1] - g(pts - ex)[..., 1]) / (2 * h),
                      (g(pts + ey)[..., 1] - g(pts - ey)[..., 1]) / (2 * h)], axis=-1),
        ], axis=-2)
        if not np.allclose(fd_hess, self.hess_lam(pts), atol=50 * h * h, rtol=1e-4):
            raise ValueError("hess_lam disagrees with finite differences")


@dataclass(frozen=True)
class NoiseDecomposition:
    """Rotational moments of sigma*sigma*: beta0 isotropic, beta1/beta2 anisotropic."""

    beta0: float
    beta1: float
    beta2: float


@dataclass(frozen=True)
class DriftDecomposition:
    """Noise-induced drift split into its 1/eps, O(1) and O(eps) pieces."""

    leading: np.ndarray
    m_term: np.ndarray
    r_term: np.ndarray
    total: np.ndarray


@dataclass(frozen=True)
class LimitSdeCoefficients:
    """Coefficient blocks of the slow/fast form of the limit equation.

    Drift = (1/eps) * fast term + B + eps * B_eps, diffusion = Sigma + eps *
    Sigma_eps, with Sigma + eps*Sigma_eps equal to the friction inverse times
    sigma exactly.
    """

    B: np.ndarray
    Sigma: np.ndarray
    B_eps: np.ndarray
    Sigma_eps: np.ndarray


@dataclass(frozen=True)
class PlaneFunction:
    """Scalar test function on the plane with analytic gradient and Hessian."""

    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class GeneratorAction:
    """Values of the slow generator pair and their eps-order corrections."""

    g: np.ndarray
    a: np.ndarray
    g_eps: np.ndarray
    a_eps: np.ndarray


# ---------------------------------------------------------------------------
# built-in field registry
# ---------------------------------------------------------------------------

def _const_matrix(m: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    m = np.asarray(m, dtype=float)

    def f(q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        return np.broadcast_to(m, q.shape[:-1] + (2, 2)).copy()

    return f


def _zero_vector(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.zeros(q.shape)


def make_polynomial_field(name: str, lam_terms, sigma=None, b_terms=None,
                          lam0: float | None = None,
                          critical_points=()) -> FieldModel:
    """Build a model whose intensity is the polynomial sum c * x**i * y**j.

    ``lam_terms`` is an iterable of (i, j, c) triples.  ``sigma`` is a constant
    2x2 matrix (identity when omitted).  ``b_terms`` gives one term list per
    drift component, or None for zero drift.  ``lam0`` defaults to a grid
    estimate of the minimum over [-10, 10]^2, clipped away from zero.
    """
    terms = [(int(i), int(j), float(c)) for i, j, c in lam_terms]

    def _poly(ts):
        def f(q: np.ndarray) -> np.ndarray:
            q = np.asarray(q, dtype=float)
            x, y = q[..., 0], q[..., 1]
            out = np.zeros(q.shape[:-1])
            for i, j, c in ts:
                out += c * x ** i * y ** j
            return out

        return f

    def _dx(ts):
        return [(i - 1, j, c * i) for i, j, c in ts if i > 0]

    def _dy(ts):
        return [(i, j - 1, c * j) for i, j, c in ts if j > 0]

    px, py = _poly(_dx(terms)), _poly(_dy(terms))
    pxx, pxy, pyy = _poly(_dx(_dx(terms))), _poly(_dy(_dx(terms))), _poly(_dy(_dy(terms)))
    lam = _poly(terms)

    def grad(q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        return np.stack([px(q), py(q)], axis=-1)

    def hess(q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        h11, h12, h22 = pxx(q), pxy(q), pyy(q)
        out = np.empty(q.shape[:-1] + (2, 2))
        out[..., 0, 0] = h11
        out[..., 0, 1] = h12
        out[..., 1, 0] = h12
        out[..., 1, 1] = h22
        return out

    if b_terms is None:
        bfun = _zero_vector
    else:
        b1, b2 = (_poly([(int(i), int(j), float(c)) for i, j, c in comp])
                  for comp in b_terms)

        def bfun(q: np.ndarray) -> np.ndarray:
            q = np.asarray(q, dtype=float)
            return np.stack([b1(q), b2(q)], axis=-1)

    sig = _IDENTITY if sigma is None else np.asarray(sigma, dtype=float)
    if lam0 is None:
        xs = np.linspace(-10, 10, 201)
        gx, gy = np.meshgrid(xs, xs)
        lam0 = max(float(lam(np.stack([gx, gy], axis=-1)).min()), 1e-12)
    return FieldModel(name=name, lam=lam, grad_lam=grad, hess_lam=hess, b=bfun,
                      sigma=_const_matrix(sig), lam0=float(lam0),
                      critical_points=tuple(critical_points))


_RADIAL_TERMS = [(0, 0, 1.0), (2, 0, 1.0), (0, 2, 1.0)]
_DOUBLEWELL_TERMS = [(4, 0, 1.0), (2, 0, -2.0), (1, 0, 0.2), (0, 2, 1.0), (0, 0, 2.0)]


def _registry() -> dict[str, Callable[[], FieldModel]]:
    return {
        "radial1": lambda: make_polynomial_field(
            "radial1", _RADIAL_TERMS, lam0=1.0,
            critical_points=((np.zeros(2), "minimum"),)),
        "radial-drift": lambda: make_polynomial_field(
            "radial-drift", _RADIAL_TERMS,
            b_terms=[[(1, 0, -1.0)], [(0, 1, -1.0)]], lam0=1.0,
            critical_points=((np.zeros(2), "minimum"),)),
        "doublewell": lambda: make_polynomial_field(
            "doublewell", _DOUBLEWELL_TERMS, lam0=0.75),
    }


def field_names() -> list[str]:
    return sorted(_registry())


def get_field(name: str) -> FieldModel:
    """Look up a built-in model by name."""
    reg = _registry()
    if name not in reg:
        raise KeyError(f"unknown field {name!r}; available: {', '.join(sorted(reg))}")
    return reg[name]()


def field_from_config(cfg) -> FieldModel:
    """Resolve a field from a config value: a registry name or a mapping.

    A mapping must carry ``lambda_terms`` (list of [i, j, c]); optional keys
    are ``name``, ``sigma`` (2x2), ``b_terms`` (two term lists) and ``lam0``.
    """
    if isinstance(cfg, str):
        return get_field(cfg)
    if not isinstance(cfg, dict):
        raise ValueError("field config must be a name or a mapping")
    if "lambda_terms" not in cfg:
        raise ValueError("custom field config needs 'lambda_terms'")
    return make_polynomial_field(
        str(cfg.get("name", "custom")),
        cfg["lambda_terms"],
        sigma=cfg.get("sigma"),
        b_terms=cfg.get("b_terms"),
        lam0=cfg.get("lam0"),
    )


# ---------------------------------------------------------------------------
# closed-form coefficients
# ---------------------------------------------------------------------------

def _beta_moments(ssq: np.ndarray):
    a1 = ssq[..., 0, 0]
    a2 = ssq[..., 1, 1]
    a0 = ssq[..., 0, 1]
    return (a1 + a2) / 4.0, (a1 - a2) / 4.0, a0 / 2.0


def noise_moments(field: FieldModel, q: np.ndarray) -> NoiseDecomposition:
    """Rotational moments of sigma*sigma* at q."""
    b0, b1, b2 = _beta_moments(field.sigma_squared(np.asarray(q, dtype=float)))
    return NoiseDecomposition(beta0=b0, beta1=b1, beta2=b2)


def friction_matrix(field: FieldModel, q: np.ndarray, eps: float) -> np.ndarray:
    """lam*A + eps*I; eps = 0 gives the unregularized matrix."""
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    lam = field.lam(np.asarray(q, dtype=float))
    out = np.empty(np.shape(lam) + (2, 2))
    out[..., 0, 0] = eps
    out[..., 0, 1] = lam
    out[..., 1, 0] = -lam
    out[..., 1, 1] = eps
    return out


def _inverse_entries(lam: np.ndarray, eps: float) -> np.ndarray:
    den = lam * lam + eps * eps
    out = np.empty(np.shape(lam) + (2, 2))
    out[..., 0, 0] = eps / den
    out[..., 0, 1] = -lam / den
    out[..., 1, 0] = lam / den
    out[..., 1, 1] = eps / den
    return out


def friction_inverse(field: FieldModel, q: np.ndarray, eps: float) -> np.ndarray:
    """Inverse of the regularized friction matrix (eps > 0 only)."""
    _require_positive_eps(eps)
    return _inverse_entries(field.lam(np.asarray(q, dtype=float)), eps)


def h_epsilon(field: FieldModel, q: np.ndarray, eps: float) -> np.ndarray:
    """First-order block of the friction inverse in eps.

    Defined so that ``friction_inverse = -(1/lam)*A + eps*h_epsilon`` holds as
    an exact matrix identity, which gives ``(I + (eps/lam)*A) / (lam^2+eps^2)``.
    Bounded uniformly in eps at fixed q.
    """
    _require_positive_eps(eps)
    lam = field.lam(np.asarray(q, dtype=float))
    den = lam * lam + eps * eps
    out = np.empty(np.shape(lam) + (2, 2))
    out[..., 0, 0] = 1.0 / den
    out[..., 0, 1] = eps / (lam * den)
    out[..., 1, 0] = -eps / (lam * den)
    out[..., 1, 1] = 1.0 / den
    return out


def _lyapunov_entries(lam, b0, b1, b2, eps):
    den = lam * lam + eps * eps
    j11 = b0 / eps + b1 * eps / den - b2 * lam / den
    j22 = b0 / eps - b1 * eps / den + b2 * lam / den
    j12 = b1 * lam / den + b2 * eps / den
    return j11, j12, j22


def lyapunov_solution(field: FieldModel, q: np.ndarray, eps: float) -> np.ndarray:
    """Closed-form solution J of J*F* + F*J = sigma*sigma* for the friction F."""
    _require_positive_eps(eps)
    q = np.asarray(q, dtype=float)
    lam = field.lam(q)
    b0, b1, b2 = _beta_moments(field.sigma_squared(q))
    j11, j12, j22 = _lyapunov_entries(lam, b0, b1, b2, eps)
    out = np.empty(np.shape(lam) + (2, 2))
    out[..., 0, 0] = j11
    out[..., 0, 1] = j12
    out[..., 1, 0] = j12
    out[..., 1, 1] = j22
    return out


def lyapunov_quadrature(field: FieldModel, q: np.ndarray, eps: float,
                        tol: float = 1e-8) -> np.ndarray:
    """Independent quadrature of the damped rotating integral for J.

    Integrates exp(-2*eps*r) * Rot(lam*r) sigma*sigma* Rot(lam*r)^T over
    [0, R] with R chosen so the discarded tail is below tol * 1e-3, using
    adaptive Simpson refinement to absolute tolerance tol.  Only valid for a
    single point q.
    """
    _require_positive_eps(eps)
    tol = float(tol)
    if tol <= 0:
        raise ValueError(f"tol must be > 0, got {tol}")
    q = np.asarray(q, dtype=float)
    if q.shape != (2,):
        raise ValueError("lyapunov_quadrature expects a single point")
    lam = float(field.lam(q))
    ssq = field.sigma_squared(q)

    def integrand(r: np.ndarray) -> np.ndarray:
        rot = rotation(lam * np.asarray(r, dtype=float))
        damped = np.exp(-2.0 * eps * np.asarray(r, dtype=float))
        prod = rot @ ssq @ np.swapaxes(rot, -1, -2)
        return damped[..., None, None] * prod

    r_max = np.log(1e3 / tol) / (2.0 * eps)
    # One panel per half rotation keeps Simpson honest on the oscillation.
    n_panels = max(16, int(np.ceil(r_max * lam / np.pi)))
    edges = np.linspace(0.0, r_max, n_panels + 1)
    total = np.zeros((2, 2))
    budget = tol / n_panels
    for a, b in zip(edges[:-1], edges[1:]):
        total += _adaptive_simpson(integrand, a, b, budget)
    return total


def _adaptive_simpson(f, a, b, tol, depth=24):
    m = 0.5 * (a + b)
    fa, fm, fb = f(a), f(m), f(b)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    return _simpson_refine(f, a, b, fa, fm, fb, whole, tol, depth)


def _simpson_refine(f, a, b, fa, fm, fb, whole, tol, depth):
    m = 0.5 * (a + b)
    lm, rm = 0.5 * (a + m), 0.5 * (m + b)
    flm, frm = f(lm), f(rm)
    left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
    right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
    err = left + right - whole
    if depth <= 0 or np.max(np.abs(err)) < 15.0 * tol:
        return left + right + err / 15.0
    return (_simpson_refine(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + _simpson_refine(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1))


def noise_induced_drift_direct(field: FieldModel, q: np.ndarray, eps: float) -> np.ndarray:
    """Noise-induced drift as the double sum over entry derivatives of the inverse.

    Uses the analytic derivatives of the friction-inverse entries together
    with the closed-form Lyapunov solution; no decomposition involved.
    """
    _require_positive_eps(eps)
    q = np.asarray(q, dtype=float)
    lam = field.lam(q)
    g = field.grad_lam(q)
    b0, b1, b2 = _beta_moments(field.sigma_squared(q))
    j11, j12, j22 = _lyapunov_entries(lam, b0, b1, b2, eps)
    den = lam * lam + eps * eps
    c_diag = -2.0 * eps * lam / den ** 2        # d(inv_11)/dlam = d(inv_22)/dlam
    c_off = (lam * lam - eps * eps) / den ** 2  # d(inv_12)/dlam = -d(inv_21)/dlam
    g1, g2 = g[..., 0], g[..., 1]
    row1 = j11 * g1 + j12 * g2
    row2 = j12 * g1 + j22 * g2
    out = np.empty(np.shape(lam) + (2,))
    out[..., 0] = c_diag * row1 + c_off * row2
    out[..., 1] = -c_off * row1 + c_diag * row2
    return out


def _remainder_matrix(lam, b0, b1, b2, eps):
    """The eps-vanishing block of the drift decomposition.

    The bracketed differences are expanded so the common eps**2 factor is
    explicit; the naive forms lose all significant digits below eps ~ 1e-4.
    """
    lam2 = lam * lam
    lam3 = lam2 * lam
    e2 = eps * eps
    den = lam2 + e2
    den2 = den * den
    den3 = den2 * den
    d1 = e2 * (2.0 * lam2 + e2) / (lam3 * den2)
    d2 = e2 * (4.0 * lam2 * lam2 + 3.0 * e2 * lam2 + e2 * e2) / (lam3 * den3)
    d3 = e2 * (3.0 * lam2 + e2) / (lam2 * den2)
    g1e = (b1 * lam + b2 * eps) / den
    g2e = (b1 * eps - b2 * lam) / den
    w = 2.0 * eps * lam / den2
    p3 = eps * (lam2 - e2) / den3
    r11 = -w * g2e + b2 * p3 + 2.0 * b0 * d1 - b1 * d2
    r12 = -w * g1e - b1 * p3 - (b0 / eps) * d3 - b2 * d2
    r21 = -w * g1e - b1 * p3 + (b0 / eps) * d3 - b2 * d2
    r22 = w * g2e - b2 * p3 + 2.0 * b0 * d1 + b1 * d2
    out = np.empty(np.shape(lam) + (2, 2))
    out[..., 0, 0] = r11
    out[..., 0, 1] = r12
    out[..., 1, 0] = r21
    out[..., 1, 1] = r22
    return out


def _m_matrix(lam, b0, b1, b2):
    lam3 = lam ** 3
    out = np.empty(np.shape(lam) + (2, 2))
    out[..., 0, 0] = (2.0 * b0 - b1) / lam3
    out[..., 0, 1] = -b2 / lam3
    out[..., 1, 0] = -b2 / lam3
    out[..., 1, 1] = (2.0 * b0 + b1) / lam3
    return out


def drift_decomposition(field: FieldModel, q: np.ndarray, eps: float) -> DriftDecomposition:
    """Noise-induced drift split as fast/(eps) + mean + eps-vanishing remainder."""
    _require_positive_eps(eps)
    q = np.asarray(q, dtype=float)
    lam = field.lam(q)
    g = field.grad_lam(q)
    b0, b1, b2 = _beta_moments(field.sigma_squared(q))
    leading = (b0 / (eps * lam * lam))[..., None] * _perp(g)
    m_term = -np.einsum("...ij,...j->...i", _m_matrix(lam, b0, b1, b2), g)
    r_term = np.einsum("...ij,...j->...i", _remainder_matrix(lam, b0, b1, b2, eps), g)
    return DriftDecomposition(leading=leading, m_term=m_term, r_term=r_term,
                              total=leading + m_term + r_term)


def remainder_matrix(field: FieldModel, q: np.ndarray, eps: float) -> np.ndarray:
    """The remainder block alone; (1/eps) * its norm stays bounded as eps -> 0."""
    _require_positive_eps(eps)
    q = np.asarray(q, dtype=float)
    lam = field.lam(q)
    b0, b1, b2 = _beta_moments(field.sigma_squared(q))
    return _remainder_matrix(lam, b0, b1, b2, eps)


def limit_coefficients(field: FieldModel, q: np.ndarray, eps: float) -> LimitSdeCoefficients:
    """Coefficient blocks of the slow/fast rewriting of the limit equation.

    Satisfies the reconstruction identities
    ``friction_inverse @ b + drift = (1/eps)*fast + B + eps*B_eps`` and
    ``Sigma + eps*Sigma_eps = friction_inverse @ sigma`` exactly.
    """
    _require_positive_eps(eps)
    q = np.asarray(q, dtype=float)
    lam = field.lam(q)
    g = field.grad_lam(q)
    bvec = field.b(q)
    sig = field.sigma(q)
    b0, b1, b2 = _beta_moments(sig @ np.swapaxes(sig, -1, -2))

    a_b = np.stack([bvec[..., 1], -bvec[..., 0]], axis=-1)  # A @ b
    big_b = -a_b / lam[..., None] - np.einsum(
        "...ij,...j->...i", _m_matrix(lam, b0, b1, b2), g)
    a_sig = np.stack([sig[..., 1, :], -sig[..., 0, :]], axis=-2)  # A @ sigma
    big_sigma = -a_sig / lam[..., None, None]

    h_eps = h_epsilon(field, q, eps)
    r_mat = _remainder_matrix(lam, b0, b1, b2, eps)
    b_eps = (np.einsum("...ij,...j->...i", h_eps, bvec)
             + np.einsum("...ij,...j->...i", r_mat, g) / eps)
    sigma_eps = h_eps @ sig
    return LimitSdeCoefficients(B=big_b, Sigma=big_sigma, B_eps=b_eps,
                                Sigma_eps=sigma_eps)


def lambda_function(field: FieldModel) -> PlaneFunction:
    """The intensity itself packaged as a test function."""
    return PlaneFunction(value=field.lam, grad=field.grad_lam, hess=field.hess_lam)


def apply_generators(field: FieldModel, q: np.ndarray, eps: float,
                     f: PlaneFunction) -> GeneratorAction:
    """Apply the slow generator pair and their eps-corrections to f at q."""
    _require_positive_eps(eps)
    q = np.asarray(q, dtype=float)
    coeffs = limit_coefficients(field, q, eps)
    df = f.grad(q)
    d2f = f.hess(q)
    sig, sig_e = coeffs.Sigma, coeffs.Sigma_eps
    sig_t = np.swapaxes(sig, -1, -2)
    sig_e_t = np.swapaxes(sig_e, -1, -2)

    diff = sig @ sig_t
    g_val = (0.5 * np.einsum("...ij,...ji->...", diff, d2f)
             + np.einsum("...i,...i->...", df, coeffs.B))
    a_val = np.einsum("...ij,...j->...i", sig_t, df)

    diff_e = eps * (sig_e @ sig_e_t) + sig @ sig_e_t + sig_e @ sig_t
    g_eps = (0.5 * np.einsum("...ij,...ji->...", diff_e, d2f)
             + np.einsum("...i,...i->...", df, coeffs.B_eps))
    a_eps = np.einsum("...ij,...j->...i", sig_e_t, df)
    return GeneratorAction(g=g_val, a=a_val, g_eps=g_eps, a_eps=a_eps)
