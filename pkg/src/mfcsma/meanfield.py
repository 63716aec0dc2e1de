"""Mean-field transient dynamics of the per-class backoff-level distribution."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import envchain
from .model import NetworkSpec, check_mixture, rho_of

CLAMP_TOL = 1e-12


class IntegrationError(RuntimeError):
    pass


class _AverageCache:
    """Small LRU of (G, H, I) keyed by rho quantized to 1e-12."""

    def __init__(self, size: int = 64):
        self.size = size
        self._data: OrderedDict = OrderedDict()

    def get(self, spec: NetworkSpec, rho: np.ndarray):
        key = (spec, np.rint(rho * 1e12).astype(np.int64).tobytes())
        hit = self._data.get(key)
        if hit is not None:
            self._data.move_to_end(key)
            return hit
        val = envchain.averages(spec, rho)
        self._data[key] = val
        if len(self._data) > self.size:
            self._data.popitem(last=False)
        return val


_cache = _AverageCache()


def env_averages(spec: NetworkSpec, rho) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rho = np.asarray(rho, dtype=float)
    if not np.all(np.isfinite(rho)) or np.any(rho < 0):
        raise ValueError("attempt rates must be finite and >= 0")
    return _cache.get(spec, rho)


def mean_rates(mix, spec: NetworkSpec) -> tuple[np.ndarray, np.ndarray]:
    """Environment-averaged success and collision rates per (class, level)."""
    rho = rho_of(mix, spec)
    G, H, _ = env_averages(spec, rho)
    p = spec.probs[None, :]
    return p * G[:, None], p * H[:, None]


@lru_cache(maxsize=32)
def _jump_matrices(spec: NetworkSpec) -> tuple[np.ndarray, np.ndarray]:
    """Success and collision maps as matrices with the identity removed."""
    eye = np.eye(spec.n_levels)
    return spec.policy.success_matrix() - eye, spec.policy.collision_matrix() - eye


def ode_rhs(mix, spec: NetworkSpec) -> np.ndarray:
    q = np.asarray(mix, dtype=float)
    fs, fc = mean_rates(q, spec)
    S, C = _jump_matrices(spec)
    return (q * fs) @ S + (q * fc) @ C


def full_interference_rhs(q, p0: float) -> np.ndarray:
    """Single-class exponential-backoff dynamics with the busy channel
    conditioned out; the top level keeps the collisions it would push past
    the truncation."""
    q = np.asarray(q, dtype=float)
    if q.ndim != 1:
        raise ValueError("full_interference_rhs expects one class (a 1-D level vector)")
    n = np.arange(len(q))
    p = p0 * 2.0 ** -n
    rho = float(p @ q)
    silent = np.exp(-rho)
    out = -p * q
    out[0] += rho * silent
    out[1:] += p[:-1] * q[:-1] * (1.0 - silent)
    out[-1] += p[-1] * q[-1] * (1.0 - silent)
    return out


@dataclass
class Trajectory:
    t: np.ndarray
    Q: np.ndarray
    dt: float
    method: str
    max_drift: float
    clamped: int

    @property
    def final(self) -> np.ndarray:
        return self.Q[-1]

    def rho(self, spec: NetworkSpec) -> np.ndarray:
        return self.Q @ spec.probs


def _rk4_step(f, y, dt):
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(q0, spec: NetworkSpec, T: float, dt: float = 1.0, record_every: int = 1,
              rhs=None) -> Trajectory:
    """Fixed-step classical RK4 integration of the mean-field ODE.

    Entries that dip below zero by at most ``CLAMP_TOL`` are reset to zero and
    the class renormalized; anything more negative, or non-finite, raises
    :class:`IntegrationError`.
    """
    q = np.array(q0, dtype=float)
    problems = check_mixture(q, spec)
    if problems:
        raise ValueError("invalid initial mixture: " + "; ".join(problems))
    if T <= 0:
        raise ValueError("T must be > 0")
    if not 0 < dt <= 0.1 / spec.p0:
        raise ValueError(f"dt must lie in (0, 0.1/p0] = (0, {0.1 / spec.p0:g}]")
    f = rhs if rhs is not None else (lambda y: ode_rhs(y, spec))
    mu = spec.mu_array
    n_steps = int(np.ceil(T / dt - 1e-9))
    times, states = [0.0], [q.copy()]
    max_drift = 0.0
    clamped = 0
    for k in range(1, n_steps + 1):
        h = min(dt, T - (k - 1) * dt)
        q = _rk4_step(f, q, h)
        if not np.all(np.isfinite(q)):
            raise IntegrationError(f"non-finite state at t={k * dt:g}")
        max_drift = max(max_drift, float(np.max(np.abs(q.sum(axis=1) - mu))))
        neg = q < 0
        if neg.any():
            if q.min() < -CLAMP_TOL:
                raise IntegrationError(f"negative mass {q.min():.3e} at t={k * dt:g}")
            clamped += int(neg.sum())
            q[neg] = 0.0
            s = q.sum(axis=1)
            q *= np.where(s > 0, mu / np.where(s > 0, s, 1.0), 0.0)[:, None]
        if k % record_every == 0 or k == n_steps:
            times.append(min(k * dt, T))
            states.append(q.copy())
    return Trajectory(np.asarray(times), np.asarray(states), dt, "rk4", max_drift, clamped)


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
