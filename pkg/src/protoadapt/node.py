"""Continuous-time blocks: forward integration and adjoint-based gradients.

The vector field is a compact two-layer tanh map with time appended as an
extra input coordinate. Integration offers fixed-step RK4 and an embedded
Dormand-Prince 5(4) pair with per-step error control; step counts, rejected
steps, tolerances, and stiffness flags are reported for the run log.
Gradients come from backward co-integration of the state, the co-state, and
the accumulated parameter gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .util import ValidationError, check_finite, child_rng, require


class StepUnderflowError(RuntimeError):
    """Adaptive step size collapsed below the machine-relative floor."""


@dataclass
class VectorField:
    """f(z, t) = W2 tanh(W1 [z; t] + b1) + b2, bounded weights by construction."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def create(cls, m: int, hidden: int = 16, seed: int = 0, scale: float = 1.0) -> "VectorField":
        rng = child_rng(seed, "vector-field")
        return cls(
            w1=scale * rng.normal(size=(hidden, m + 1)) / np.sqrt(m + 1),
            b1=np.zeros(hidden),
            w2=scale * rng.normal(size=(m, hidden)) / np.sqrt(hidden),
            b2=np.zeros(m),
        )

    @property
    def m(self) -> int:
        return self.w2.shape[0]

    @property
    def n_params(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    def params_vector(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    def with_params(self, vec: np.ndarray) -> "VectorField":
        vec = np.asarray(vec, dtype=float)
        require(vec.size == self.n_params, "parameter vector has the wrong length")
        i = 0
        w1 = vec[i:i + self.w1.size].reshape(self.w1.shape); i += self.w1.size
        b1 = vec[i:i + self.b1.size]; i += self.b1.size
        w2 = vec[i:i + self.w2.size].reshape(self.w2.shape); i += self.w2.size
        b2 = vec[i:i + self.b2.size]
        return VectorField(w1=w1, b1=b1, w2=w2, b2=b2)

    def _hidden(self, z, t):
        zt = np.concatenate([z, [t]])
        return np.tanh(self.w1 @ zt + self.b1), zt

    def __call__(self, z: np.ndarray, t: float) -> np.ndarray:
        h, _ = self._hidden(z, t)
        return self.w2 @ h + self.b2

    def jac_state(self, z: np.ndarray, t: float) -> np.ndarray:
        h, _ = self._hidden(z, t)
        gain = (1.0 - h**2)[:, None] * self.w1[:, : self.m]
        return self.w2 @ gain

    def param_vjp(self, z: np.ndarray, t: float, a: np.ndarray) -> np.ndarray:
        """(df/dparams)^T a, flattened in params_vector order."""
        h, zt = self._hidden(z, t)
        gb2 = a
        gw2 = np.outer(a, h)
        u = (self.w2.T @ a) * (1.0 - h**2)
        gw1 = np.outer(u, zt)
        gb1 = u
        return np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])


@dataclass
class SolveConfig:
    method: str = "rk45"      # or "rk4"
    rtol: float = 1e-6
    atol: float = 1e-9
    max_step: float | None = None
    t0: float = 0.0
    t1: float = 1.0
    max_steps: int = 100_000

    def validate(self) -> None:
        require(self.method in ("rk4", "rk45"), "method must be rk4 or rk45")
        require(self.rtol > 0 and self.atol > 0, "tolerances must be positive")
        require(self.t0 < self.t1, "need t0 < t1")
        require(self.max_step is None or self.max_step > 0, "max_step must be positive")

    def as_log_dict(self) -> dict:
        return {"method": self.method, "rtol": self.rtol, "atol": self.atol,
                "max_step": self.max_step, "t0": self.t0, "t1": self.t1}


@dataclass
class IntegrationResult:
    z1: np.ndarray
    n_steps: int
    n_rejected: int
    stiff: bool
    config: SolveConfig


# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640,
                   -92097 / 339200, 187 / 2100, 1 / 40])


def _rk4_step(f, z, t, h):
    k1 = f(z, t)
    k2 = f(z + 0.5 * h * k1, t + 0.5 * h)
    k3 = f(z + 0.5 * h * k2, t + 0.5 * h)
    k4 = f(z + h * k3, t + h)
    return z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _integrate_rk4(f, z0, cfg):
    span = cfg.t1 - cfg.t0
    max_step = cfg.max_step if cfg.max_step is not None else span / 16.0
    n = max(1, int(np.ceil(span / max_step)))
    h = span / n
    z, t = z0.copy(), cfg.t0
    for _ in range(n):
        z = _rk4_step(f, z, t, h)
        t += h
    return z, n, 0, False


def _integrate_rk45(f, z0, cfg):
    span = cfg.t1 - cfg.t0
    max_step = cfg.max_step if cfg.max_step is not None else span
    t, z = cfg.t0, z0.copy()
    h = min(max_step, span / 10.0)
    n_steps = n_rejected = 0
    stiff = False
    reject_streak = 0
    while t < cfg.t1 - 1e-14 * max(1.0, abs(cfg.t1)):
        if n_steps + n_rejected > cfg.max_steps:
            raise StepUnderflowError("step budget exhausted; system looks stiff")
        floor = 16.0 * np.finfo(float).eps * max(abs(t), 1.0)
        if h < floor:
            raise StepUnderflowError(
                f"step size {h:.3e} collapsed below the machine floor at t={t:.6f}; "
                "stiffness diagnosis: persistent error-control rejections")
        h = min(h, cfg.t1 - t, max_step)
        ks = []
        for i in range(7):
            zi = z.copy()
            for j, a in enumerate(_DP_A[i]):
                zi += h * a * ks[j]
            ks.append(f(zi, t + _DP_C[i] * h))
        ks = np.asarray(ks)
        z5 = z + h * (_DP_B5 @ ks)
        z4 = z + h * (_DP_B4 @ ks)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(z), np.abs(z5))
        err = float(np.sqrt(np.mean(((z5 - z4) / scale) ** 2)))
        if err <= 1.0:
            t += h
            z = z5
            n_steps += 1
            reject_streak = 0
        else:
            n_rejected += 1
            reject_streak += 1
            if reject_streak >= 20:
                stiff = True
        factor = 0.9 * (err ** -0.2) if err > 0 else 5.0
        h *= min(5.0, max(0.2, factor))
        if h < span * 1e-7:
            stiff = True
    return z, n_steps, n_rejected, stiff


def integrate(field, z0, cfg: SolveConfig) -> IntegrationResult:
    """Numerical flow of dz/dt = f(z, t) from t0 to t1.

    Adaptive mode controls the local error against (rtol, atol) and reports
    accepted and rejected step counts; a persistent step-size collapse sets
    the stiffness flag, and underflow below the machine-relative floor
    aborts with a stiffness diagnosis.
    """
    cfg.validate()
    z0 = check_finite(z0, "initial state")
    f = field if callable(field) and not isinstance(field, VectorField) else field.__call__
    if cfg.method == "rk4":
        z1, n_steps, n_rej, stiff = _integrate_rk4(f, z0, cfg)
    else:
        z1, n_steps, n_rej, stiff = _integrate_rk45(f, z0, cfg)
    if not np.all(np.isfinite(z1)):
        raise ValidationError("integration produced non-finite state")
    return IntegrationResult(z1=z1, n_steps=n_steps, n_rejected=n_rej,
                             stiff=stiff, config=cfg)


@dataclass
class AdjointResult:
    grad_z0: np.ndarray
    grad_params: np.ndarray
    forward: IntegrationResult
    backward_steps: int


def adjoint_gradient(field: VectorField, z0, cfg: SolveConfig,
                     grad_z1, forward_result: IntegrationResult | None = None) -> AdjointResult:
    """Gradients of a terminal loss through the flow via the adjoint system.

    Co-integrates (z, a, g) backward in time: the state retraces the flow,
    the co-state follows da/dt = -(df/dz)^T a from a(t1) = dL/dz(t1), and g
    accumulates the parameter coupling. Returns dL/dz0 = a(t0) and dL/dparams.
    """
    grad_z1 = check_finite(grad_z1, "terminal loss gradient")
    fwd = forward_result if forward_result is not None else integrate(field, z0, cfg)
    m, n_p = field.m, field.n_params
    span = cfg.t1 - cfg.t0

    def backward_dynamics(aug, tau):
        z = aug[:m]
        a = aug[m:2 * m]
        t = cfg.t1 - tau
        dz = -field(z, t)
        da = field.jac_state(z, t).T @ a
        dg = field.param_vjp(z, t, a)
        return np.concatenate([dz, da, dg])

    aug0 = np.concatenate([fwd.z1, grad_z1, np.zeros(n_p)])
    bcfg = SolveConfig(method=cfg.method, rtol=cfg.rtol, atol=cfg.atol,
                       max_step=cfg.max_step, t0=0.0, t1=span,
                       max_steps=cfg.max_steps)
    try:
        back = integrate(backward_dynamics, aug0, bcfg)
    except (StepUnderflowError, ValidationError) as exc:
        raise RuntimeError(
            f"backward adjoint solve failed ({exc}); forward stats: "
            f"steps={fwd.n_steps}, rejected={fwd.n_rejected}, stiff={fwd.stiff}"
        ) from exc
    grad_z0 = back.z1[m:2 * m]
    grad_params = back.z1[2 * m:]
    if not (np.all(np.isfinite(grad_z0)) and np.all(np.isfinite(grad_params))):
        raise ValidationError("adjoint produced non-finite gradients")
    return AdjointResult(grad_z0=grad_z0, grad_params=grad_params,
                         forward=fwd, backward_steps=back.n_steps)
