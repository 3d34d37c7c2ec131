"""Planar fast-slow Hamiltonian systems and the operators applied to H.

A :class:`HamiltonianSystem` bundles the Hamiltonian ``H``, the fast field
``g`` (orthogonal to ``grad H``), the order-one drift ``b`` and diffusion
``sigma``, and the vanishing perturbations ``b_eps``/``sigma_eps`` of the SDE

    dq = (1/eps) g(q) dt + (b + b_eps)(q) dt + (sigma + sigma_eps)(q) dW.

All callables are vectorised over a leading batch axis: points have shape
``(..., 2)``, vector fields return ``(..., 2)`` and matrix fields ``(..., 2, 2)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Field = Callable[[np.ndarray], np.ndarray]

_FD_STEP = np.finfo(float).eps ** (1.0 / 3.0)


class ModelError(Exception):
    """Base class for model construction and evaluation failures."""


class EvaluationError(ModelError):
    """A model callable produced non-finite values."""


class ModelValidationError(ModelError):
    """A model violates one of the structural hypotheses."""


class FlowStalled(ModelError):
    """Adaptive flow integration underflowed, typically at a critical point."""


def zero_vector(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return np.zeros(z.shape)


def zero_matrix(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return np.zeros(z.shape[:-1] + (2, 2))


def _zero_family(eps: float) -> Field:
    return zero_vector


def _zero_matrix_family(eps: float) -> Field:
    return zero_matrix


def fd_gradient(fun: Field, z: np.ndarray) -> np.ndarray:
    """Central-difference gradient of a scalar field, step ``eps**(1/3) * max(1, |z|)``."""
    z = np.asarray(z, dtype=float)
    h = _FD_STEP * np.maximum(1.0, np.linalg.norm(z, axis=-1))[..., None]
    out = np.empty(z.shape)
    for i in range(2):
        e = np.zeros(2)
        e[i] = 1.0
        out[..., i] = (fun(z + h * e) - fun(z - h * e)) / (2.0 * h[..., 0])
    return out


def fd_jacobian(fun: Field, z: np.ndarray) -> np.ndarray:
    """Central-difference Jacobian ``J[..., i, j] = d fun_i / d z_j`` of a vector field."""
    z = np.asarray(z, dtype=float)
    h = _FD_STEP * np.maximum(1.0, np.linalg.norm(z, axis=-1))[..., None]
    out = np.empty(z.shape[:-1] + (2, 2))
    for j in range(2):
        e = np.zeros(2)
        e[j] = 1.0
        out[..., :, j] = (fun(z + h * e) - fun(z - h * e)) / (2.0 * h)
    return out


@dataclass(frozen=True)
class HamiltonianSystem:
    """Immutable description of the perturbed fast Hamiltonian system.

    ``grad_h`` and ``hess_h`` may be omitted; they then fall back to central
    differences of ``hamiltonian`` (and of the gradient, for the Hessian).
    ``drift_eps`` and ``diffusion_eps`` map a value of eps to a field.
    """

    hamiltonian: Field
    fast_field: Field
    grad_h: Field | None = None
    hess_h: Field | None = None
    drift: Field = zero_vector
    diffusion: Field = zero_matrix
    drift_eps: Callable[[float], Field] = _zero_family
    diffusion_eps: Callable[[float], Field] = _zero_matrix_family
    epsilon: float = 0.1
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ModelError(f"epsilon must be positive, got {self.epsilon}")

    def with_epsilon(self, eps: float) -> "HamiltonianSystem":
        return dataclasses.replace(self, epsilon=float(eps))

    # -- pointwise fields -------------------------------------------------
    def H(self, z):
        return self.hamiltonian(np.asarray(z, dtype=float))

    def grad(self, z):
        z = np.asarray(z, dtype=float)
        if self.grad_h is not None:
            return self.grad_h(z)
        return fd_gradient(self.hamiltonian, z)

    def hess(self, z):
        z = np.asarray(z, dtype=float)
        if self.hess_h is not None:
            return self.hess_h(z)
        return fd_jacobian(self.grad, z)

    def g(self, z):
        return self.fast_field(np.asarray(z, dtype=float))

    def b(self, z):
        return self.drift(np.asarray(z, dtype=float))

    def sigma(self, z):
        return self.diffusion(np.asarray(z, dtype=float))

    def b_eps(self, z, eps: float | None = None):
        eps = self.epsilon if eps is None else eps
        return self.drift_eps(eps)(np.asarray(z, dtype=float))

    def sigma_eps(self, z, eps: float | None = None):
        eps = self.epsilon if eps is None else eps
        return self.diffusion_eps(eps)(np.asarray(z, dtype=float))

    def a(self, z):
        """Invariant-density ratio ``|g| / |grad H|`` (undefined at critical points)."""
        z = np.asarray(z, dtype=float)
        return np.linalg.norm(self.g(z), axis=-1) / np.linalg.norm(self.grad(z), axis=-1)

    def a_inv(self, z):
        z = np.asarray(z, dtype=float)
        return np.linalg.norm(self.grad(z), axis=-1) / np.linalg.norm(self.g(z), axis=-1)


@dataclass(frozen=True)
class OperatorValues:
    l0_h: float
    r0_h: np.ndarray
    l0e_h: float
    r0e_h: np.ndarray


def _check_finite(name: str, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise EvaluationError(f"non-finite values in {name}")
    return value


def operator_terms(sys: HamiltonianSystem, z: np.ndarray, eps: float | None = None):
    """Vectorised ``(L0 H, R0 H, L0eps H, R0eps H)`` at points ``z`` of shape ``(..., 2)``."""
    z = np.asarray(z, dtype=float)
    gh = _check_finite("grad_h", sys.grad(z))
    hh = _check_finite("hess_h", sys.hess(z))
    b = _check_finite("drift", sys.b(z))
    s = _check_finite("diffusion", sys.sigma(z))
    be = _check_finite("drift_eps", sys.b_eps(z, eps))
    se = _check_finite("diffusion_eps", sys.sigma_eps(z, eps))
    st = np.swapaxes(s, -1, -2)
    set_ = np.swapaxes(se, -1, -2)
    q = s @ st
    qe = s @ set_ + se @ st + se @ set_
    l0 = np.einsum("...i,...i->...", gh, b) + 0.5 * np.einsum("...ij,...ij->...", q, hh)
    r0 = np.einsum("...i,...ij->...j", gh, s)
    l0e = np.einsum("...i,...i->...", gh, be) + 0.5 * np.einsum("...ij,...ij->...", qe, hh)
    r0e = np.einsum("...i,...ij->...j", gh, se)
    return l0, r0, l0e, r0e


def evaluate_operators(sys: HamiltonianSystem, z, eps: float | None = None) -> OperatorValues:
    """Evaluate ``L0 H``, ``R0 H`` and their eps-perturbations at a single point.

    ``L0 H = grad H . b + 1/2 tr(sigma sigma^T Hess H)`` and ``R0 H = grad H^T sigma``;
    the eps-variants use ``b_eps`` and the mixed diffusion
    ``sigma sigma_eps^T + sigma_eps sigma^T + sigma_eps sigma_eps^T``.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (2,) or not np.all(np.isfinite(z)):
        raise EvaluationError(f"expected a finite point of shape (2,), got {z!r}")
    l0, r0, l0e, r0e = operator_terms(sys, z, eps)
    return OperatorValues(float(l0), np.asarray(r0, dtype=float), float(l0e), np.asarray(r0e, dtype=float))


def _rk4(f: Field, z: np.ndarray, h) -> np.ndarray:
    k1 = f(z)
    k2 = f(z + 0.5 * h * k1)
    k3 = f(z + 0.5 * h * k2)
    k4 = f(z + h * k3)
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(f: Field, z: np.ndarray, h) -> np.ndarray:
    """Single classical Runge-Kutta step, vectorised over leading axes of ``z``."""
    return _rk4(f, np.asarray(z, dtype=float), h)


def hamiltonian_flow_step(sys: HamiltonianSystem, z, dt: float, tol: float = 1e-12,
                          min_step: float = 1e-14) -> np.ndarray:
    """Advance ``dz/dt = g(z)`` by ``dt`` (eps = 1 clock) with step-doubling adaptive RK4.

    Raises :class:`FlowStalled` if the local step falls below ``min_step * dt``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    z = np.asarray(z, dtype=float).copy()
    t, h = 0.0, dt
    scale = 1.0 + np.linalg.norm(z)
    while t < dt:
        h = min(h, dt - t)
        full = _rk4(sys.g, z, h)
        half = _rk4(sys.g, _rk4(sys.g, z, 0.5 * h), 0.5 * h)
        err = np.linalg.norm(half - full) / 15.0
        if err <= tol * scale:
            z = half + (half - full) / 15.0
            t += h
            h *= min(4.0, 0.9 * (tol * scale / max(err, 1e-300)) ** 0.2)
        else:
            h *= max(0.1, 0.9 * (tol * scale / err) ** 0.2)
            if h < min_step * dt:
                raise FlowStalled(f"stalled at critical point near {z}")
    return z


def _disk_grid(radius: float, n: int) -> np.ndarray:
    x = np.linspace(-radius, radius, n)
    xx, yy = np.meshgrid(x, x, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=-1)
    return pts[np.linalg.norm(pts, axis=-1) <= radius * (1 + 1e-12)]


def perturbation_sup_norm(sys: HamiltonianSystem, eps_value: float, compact_radius: float,
                          n: int = 201) -> tuple[float, float]:
    """Grid estimate of ``sup |b_eps|`` and ``sup ||sigma_eps||_2`` over a disk."""
    if not compact_radius > 0:
        raise ValueError("compact_radius must be positive")
    pts = _disk_grid(compact_radius, n)
    be = _check_finite("drift_eps", sys.b_eps(pts, eps_value))
    se = _check_finite("diffusion_eps", sys.sigma_eps(pts, eps_value))
    return float(np.max(np.linalg.norm(be, axis=-1))), float(np.max(np.linalg.norm(se, ord=2, axis=(-2, -1))))


# -- validation ------------------------------------------------------------

def validate_orthogonality(sys: HamiltonianSystem, points: np.ndarray, tol: float = 1e-10) -> float:
    """Check ``|g . grad H| <= tol (1 + |g||grad H|)``; returns the worst normalised defect."""
    g = sys.g(points)
    gh = sys.grad(points)
    defect = np.abs(np.sum(g * gh, axis=-1)) / (1.0 + np.linalg.norm(g, axis=-1) * np.linalg.norm(gh, axis=-1))
    worst = float(np.max(defect))
    if worst > tol:
        k = int(np.argmax(defect))
        raise ModelValidationError(f"g is not orthogonal to grad H at {points[k]} (defect {worst:.3g})")
    return worst


def validate_decay(sys: HamiltonianSystem, eps_ladder, compact_radius: float = 2.0, n: int = 101):
    """Check that the perturbation sup-norms do not grow as eps descends the ladder."""
    ladder = sorted(eps_ladder, reverse=True)
    norms = [perturbation_sup_norm(sys, e, compact_radius, n) for e in ladder]
    for (e0, n0), (e1, n1) in zip(zip(ladder, norms), zip(ladder[1:], norms[1:])):
        if n1[0] > n0[0] * (1 + 1e-12) + 1e-15 or n1[1] > n0[1] * (1 + 1e-12) + 1e-15:
            raise ModelValidationError(f"perturbation grows from eps={e0} to eps={e1}: {n0} -> {n1}")
    return norms


def validate_growth(sys: HamiltonianSystem, radii=(5.0, 10.0, 20.0), n_angles: int = 64) -> float:
    """Estimate ``min |grad H(x)| / |x|`` on large circles (coercivity of the gradient).

    The growth condition is read as a bound on ``|grad H|``; see the README.
    """
    th = np.linspace(0, 2 * np.pi, n_angles, endpoint=False)
    ratios = []
    for r in radii:
        pts = r * np.stack([np.cos(th), np.sin(th)], axis=-1)
        ratios.append(np.min(np.linalg.norm(sys.grad(pts), axis=-1)) / r)
    c1 = float(min(ratios))
    if not c1 > 0:
        raise ModelValidationError("grad H does not grow at infinity")
    return c1


# -- built-in models -------------------------------------------------------

def _const_matrix(m: np.ndarray) -> Field:
    m = np.asarray(m, dtype=float)

    def field_(z):
        z = np.asarray(z, dtype=float)
        return np.broadcast_to(m, z.shape[:-1] + (2, 2)).copy()
    return field_


def _perturbations(eps_drift=(0.0, 0.0), eps_drift_linear: float = 0.0, eps_diffusion: float = 0.0):
    """Families ``b_eps = eps (c + k z)`` and ``sigma_eps = eps * s * I``."""
    c = np.asarray(eps_drift, dtype=float)
    k = float(eps_drift_linear)
    s = float(eps_diffusion)

    if not np.any(c) and k == 0.0:
        drift_eps = _zero_family
    else:
        def drift_eps(eps):
            def field_(z):
                z = np.asarray(z, dtype=float)
                return eps * (c + k * z)
            return field_

    if s == 0.0:
        diffusion_eps = _zero_matrix_family
    else:
        def diffusion_eps(eps):
            return _const_matrix(eps * s * np.eye(2))
    return drift_eps, diffusion_eps


def harmonic(noise: float = 1.0, center=(0.0, 0.0), rotational_drift: float = 0.0,
             epsilon: float = 0.1, **perturbation) -> HamiltonianSystem:
    """Harmonic oscillator ``H = |z - c|^2 / 2`` with ``g = (z2, -z1)`` about ``c``.

    ``rotational_drift`` adds ``b = k (z2, -z1)``, which is tangent to the level
    circles and leaves ``L0 H`` unchanged.
    """
    c = np.asarray(center, dtype=float)
    k = float(rotational_drift)

    def H(z):
        w = z - c
        return 0.5 * np.sum(w * w, axis=-1)

    def grad(z):
        return z - c

    def hess(z):
        return np.broadcast_to(np.eye(2), z.shape[:-1] + (2, 2)).copy()

    def g(z):
        w = z - c
        return np.stack([w[..., 1], -w[..., 0]], axis=-1)

    drift = zero_vector if k == 0.0 else (lambda z: k * g(z))
    drift_eps, diffusion_eps = _perturbations(**perturbation)
    return HamiltonianSystem(H, g, grad, hess, drift, _const_matrix(noise * np.eye(2)),
                             drift_eps, diffusion_eps, epsilon, "harmonic",
                             dict(noise=noise, center=tuple(c), rotational_drift=k, **perturbation))


def duffing(noise: float = 1.0, epsilon: float = 0.1, **perturbation) -> HamiltonianSystem:
    """Double-well Duffing oscillator ``H = z2^2/2 + z1^4/4 - z1^2/2``, ``g = (z2, z1 - z1^3)``."""

    def H(z):
        x, y = z[..., 0], z[..., 1]
        return 0.5 * y * y + 0.25 * x ** 4 - 0.5 * x * x

    def grad(z):
        x, y = z[..., 0], z[..., 1]
        return np.stack([x ** 3 - x, y], axis=-1)

    def hess(z):
        x = z[..., 0]
        out = np.zeros(z.shape[:-1] + (2, 2))
        out[..., 0, 0] = 3 * x * x - 1
        out[..., 1, 1] = 1.0
        return out

    def g(z):
        x, y = z[..., 0], z[..., 1]
        return np.stack([y, x - x ** 3], axis=-1)

    drift_eps, diffusion_eps = _perturbations(**perturbation)
    return HamiltonianSystem(H, g, grad, hess, zero_vector, _const_matrix(noise * np.eye(2)),
                             drift_eps, diffusion_eps, epsilon, "duffing", dict(noise=noise, **perturbation))


def modulated_harmonic(noise: float = 1.0, modulation: float = 0.5, shear: float = 0.3,
                       epsilon: float = 0.1, **perturbation) -> HamiltonianSystem:
    """Harmonic ``H`` with speed-modulated fast field ``g = (1 + m z1^2)(z2, -z1)``.

    The invariant density ``1/a = 1/(1 + m z1^2)`` is non-constant and the drift
    ``b = (s z2, 0)`` is not divergence-compensated, so ``L0* a^-1 != 0``. Used to
    exercise the compensating drift.
    """
    m = float(modulation)
    s = float(shear)

    def H(z):
        return 0.5 * np.sum(z * z, axis=-1)

    def grad(z):
        return np.array(z, dtype=float)

    def hess(z):
        return np.broadcast_to(np.eye(2), z.shape[:-1] + (2, 2)).copy()

    def g(z):
        speed = 1.0 + m * z[..., 0] ** 2
        return speed[..., None] * np.stack([z[..., 1], -z[..., 0]], axis=-1)

    def drift(z):
        return np.stack([s * z[..., 1], np.zeros(z.shape[:-1])], axis=-1)

    drift_eps, diffusion_eps = _perturbations(**perturbation)
    return HamiltonianSystem(H, g, grad, hess, drift, _const_matrix(noise * np.eye(2)),
                             drift_eps, diffusion_eps, epsilon, "modulated_harmonic",
                             dict(noise=noise, modulation=m, shear=s, **perturbation))


MODELS: dict[str, Callable[..., HamiltonianSystem]] = {
    "harmonic": harmonic,
    "duffing": duffing,
    "modulated_harmonic": modulated_harmonic,
}


def register_model(name: str, factory: Callable[..., HamiltonianSystem]) -> None:
    MODELS[name] = factory


def make_model(name: str, **params) -> HamiltonianSystem:
    try:
        factory = MODELS[name]
    except KeyError:
        raise ModelError(f"unknown model {name!r}; known: {sorted(MODELS)}") from None
    return factory(**params)
