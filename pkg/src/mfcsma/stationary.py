"""Stationary mean-field equilibrium and per-class throughputs."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import envchain
from .model import NetworkSpec


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace or []


class InfeasibleError(ValueError):
    """Geometric level distribution diverges (G_c <= H_c) or p0 >= ln 2."""


@dataclass
class FixedPointResult:
    rho: np.ndarray
    pi: envchain.EnvStationary
    G: np.ndarray
    H: np.ndarray
    I: np.ndarray
    Q: np.ndarray
    gamma: np.ndarray
    iterations: int
    residual: float
    converged: bool = True
    truncation_mass: float = 0.0
    untruncated_rho_gap: float = 0.0
    probe_max_diff: float | None = None
    trace: list = field(default_factory=list, repr=False)

    @property
    def gamma_per_user(self) -> np.ndarray:
        mu = self.Q.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(mu > 0, self.gamma / np.where(mu > 0, mu, 1.0), 0.0)

    def to_dict(self, L: float | None = None) -> dict:
        out = {
            "rho": self.rho.tolist(),
            "G": self.G.tolist(),
            "H": self.H.tolist(),
            "I": self.I.tolist(),
            "gamma": self.gamma.tolist(),
            "gamma_per_user": self.gamma_per_user.tolist(),
            "Q": self.Q.tolist(),
            "residual": self.residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "env_residual": self.pi.residual,
            "truncation_mass": self.truncation_mass,
            "untruncated_rho_gap": self.untruncated_rho_gap,
            "probe_max_diff": self.probe_max_diff,
        }
        if L is not None:
            out["packets_per_slot"] = (self.gamma / L).tolist()
        return out


def exp_backoff_geometric(G, H, I, spec: NetworkSpec):
    """Geometric level distribution of binary exponential backoff.

    Q_c^n = mu_c (G_c - H_c)/I_c (2 H_c/I_c)^n, with the mass of levels beyond
    ``n_max`` folded into the last level.  Returns ``(Q, rho)`` where ``rho`` is
    computed from the truncated ``Q``.
    """
    G, H, I = (np.asarray(x, dtype=float) for x in (G, H, I))
    mu = spec.mu_array
    n = np.arange(spec.n_levels)
    Q = np.zeros((spec.n_classes, spec.n_levels))
    for c in range(spec.n_classes):
        if mu[c] == 0:
            continue
        if not G[c] > H[c]:
            raise InfeasibleError(
                f"class {spec.classes[c]}: G={G[c]:.6g} <= H={H[c]:.6g}, "
                "geometric backoff distribution diverges"
            )
        r = 2.0 * H[c] / I[c]
        Q[c] = mu[c] * (1.0 - r) * r ** n
        Q[c, -1] = mu[c] * r ** spec.n_max
    return Q, Q @ spec.probs


def untruncated_rho(G, H, spec: NetworkSpec) -> np.ndarray:
    """rho_c = p0 mu_c (G_c - H_c)/G_c for the infinite level set."""
    G, H = np.asarray(G, dtype=float), np.asarray(H, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = spec.p0 * spec.mu_array * (G - H) / G
    return np.where(spec.mu_array > 0, out, 0.0)


def level_balance(G, H, I, spec: NetworkSpec):
    """Solve the level balance equations directly for any backoff policy.

    For each class the unknowns y_n = p_n Q_c^n are the stationary law of
    the jump chain that follows ``success_map`` with probability G/I and
    ``collision_map`` with probability H/I.
    """
    G, H, I = (np.asarray(x, dtype=float) for x in (G, H, I))
    pol = spec.policy
    S, Cm = pol.success_matrix(), pol.collision_matrix()
    p = spec.probs
    mu = spec.mu_array
    Q = np.zeros((spec.n_classes, spec.n_levels))
    for c in range(spec.n_classes):
        if mu[c] == 0:
            continue
        if I[c] <= 0:
            Q[c, 0] = mu[c]
            continue
        P = (G[c] * S + H[c] * Cm) / I[c]
        y = envchain.gth_stationary(P)
        q = y / p
        Q[c] = mu[c] * q / q.sum()
    return Q, Q @ p


def throughput(pi, rho, spec: NetworkSpec) -> np.ndarray:
    """Per-class time share of slots carrying a successful transmission."""
    p = pi.pi if isinstance(pi, envchain.EnvStationary) else np.asarray(pi, dtype=float)
    rho = np.asarray(rho, dtype=float)
    clear = envchain.clear_matrix(spec)
    prod = envchain.silence_products(spec, rho)
    return spec.L * rho * ((p[:, None] * clear) * prod).sum(axis=0)


def _root_residual(p0: float, r: float) -> float:
    return p0 * math.exp(r) + r - 2.0 * p0


def full_interference_root(p0: float) -> float:
    """Root of p0 e^r + r - 2 p0 on (0, ln 2) by bisection to full precision."""
    if not 0.0 < p0 < math.log(2.0):
        raise InfeasibleError(f"full-interference equilibrium needs 0 < p0 < ln 2, got p0={p0}")
    lo, hi = 0.0, math.log(2.0)
    while True:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if _root_residual(p0, mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return lo if abs(_root_residual(p0, lo)) <= abs(_root_residual(p0, hi)) else hi


def closed_form_full_interference(p0: float, n_max: int = 64):
    """Equilibrium of the single-class exponential backoff system.

    Returns ``(rho_st, Q_st)`` with Q_st^n = (2(1-e^{-rho}))^n rho e^{-rho}/p0;
    mass beyond ``n_max`` is folded into the last level.
    """
    r = full_interference_root(p0)
    ratio = 2.0 * (-math.expm1(-r))
    q0 = r * math.exp(-r) / p0
    n = np.arange(n_max + 1)
    Q = q0 * ratio ** n
    Q[-1] = q0 * ratio ** n_max / (1.0 - ratio)
    return r, Q


def _inner(spec: NetworkSpec, G, H, I, closed: bool):
    if closed:
        return exp_backoff_geometric(G, H, I, spec)
    return level_balance(G, H, I, spec)


def _iterate(spec, rho, tol, max_iter, damping, closed):
    trace = [rho.copy()]
    for k in range(1, max_iter + 1):
        K = envchain.build_kernel(rho, spec)
        pi = envchain.stationary_dist(K)
        G, H, I = envchain.ghi(pi, rho, spec)
        _, rho_hat = _inner(spec, G, H, I, closed)
        new = (1.0 - damping) * rho + damping * rho_hat
        step = float(np.max(np.abs(new - rho)))
        rho = new
        trace.append(rho.copy())
        if step < tol:
            return rho, k, trace, True
    return rho, max_iter, trace, False


def solve_fixed_point(spec: NetworkSpec, tol: float = 1e-13, max_iter: int = 5000,
                      damping: float = 0.5, probes: int = 5, seed: int = 0,
                      closed_form: bool | None = None) -> FixedPointResult:
    """Damped fixed-point iteration on the per-class attempt rates.

    Each sweep computes the environment law for the current rates, the
    averaged success/collision probabilities, and the level distribution they
    imply; the rates are then moved a fraction ``damping`` towards the rates
    of that distribution.  Raises :class:`ConvergenceError` if the step does
    not fall below ``tol`` within ``max_iter`` sweeps.
    """
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    if closed_form is None:
        closed_form = spec.policy.name == "exponential"
    mu = spec.mu_array
    rho0 = spec.p0 * mu / 2.0
    rho, iters, trace, ok = _iterate(spec, rho0, tol, max_iter, damping, closed_form)
    if not ok:
        raise ConvergenceError(
            f"fixed point not reached in {max_iter} iterations "
            f"(last step {np.max(np.abs(trace[-1] - trace[-2])):.3e})", trace)

    K = envchain.build_kernel(rho, spec)
    pi = envchain.stationary_dist(K)
    G, H, I = envchain.ghi(pi, rho, spec)
    Q, rho_hat = _inner(spec, G, H, I, closed_form)
    residual = float(np.max(np.abs(rho - rho_hat)))
    gamma = throughput(pi, rho, spec)

    trunc = float(Q[:, -1].sum()) if spec.n_max > 0 else 0.0
    gap = 0.0
    if closed_form:
        gap = float(np.max(np.abs(untruncated_rho(G, H, spec) - rho_hat)))

    probe_diff = None
    if probes:
        rng = np.random.default_rng(seed)
        probe_diff = 0.0
        for _ in range(probes):
            start = rng.uniform(0.0, 1.0, spec.n_classes) * spec.p0 * mu
            other, _, _, ok = _iterate(spec, start, tol, max_iter, damping, closed_form)
            if ok:
                probe_diff = max(probe_diff, float(np.max(np.abs(other - rho))))
            else:
                probe_diff = float("inf")

    return FixedPointResult(rho, pi, G, H, I, Q, gamma, iters, residual, True,
                            trunc, gap, probe_diff, trace)


def level_residuals(result: FixedPointResult, spec: NetworkSpec) -> np.ndarray:
    """Left-hand sides of the level balance equations at a solution."""
    p = spec.probs
    y = result.Q * p
    S, Cm = spec.policy.success_matrix(), spec.policy.collision_matrix()
    G, H = result.G[:, None], result.H[:, None]
    return G * (y @ S - y) + H * (y @ Cm - y)
