"""Environment Markov chain on per-class channel states {0,1,2}^C.

State 0 means the class is silent, 1 that exactly one class user is
transmitting successfully, 2 that class users are in a collision.  Given the
per-class attempt rates ``rho`` the chain moves, in one slot, by
(i) ending each ongoing activity with probability 1/L (success) or 1/Lc
(collision), and (ii) letting every class that is clear to send in the
current slot draw a Poisson(rho_c) number of attempts.  Clear-to-send is read
from the state at the start of the slot, so a class freed in this slot can
only be used from the next slot on.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components

from .model import NetworkSpec

DEFAULT_STATE_CAP = 3 ** 7
MODES = ("consistent", "verbatim")

_NO_DRAW = 3


class StateSpaceError(ValueError):
    """The environment state space exceeds the configured cap."""


@dataclass(frozen=True)
class EnvKernel:
    matrix: np.ndarray
    mode: str
    rho: np.ndarray
    states: np.ndarray

    @property
    def row_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=1)

    @property
    def row_sum_deviation(self) -> float:
        return float(np.max(np.abs(self.row_sums - 1.0)))


@dataclass(frozen=True)
class EnvStationary:
    pi: np.ndarray
    residual: float
    support: np.ndarray = field(repr=False)


def encode(z, n_classes: int) -> int:
    """Mixed-radix index of a state, first class most significant."""
    idx = 0
    for zc in z:
        idx = idx * 3 + int(zc)
    return idx


def all_states(n_classes: int) -> np.ndarray:
    return np.array(list(itertools.product(range(3), repeat=n_classes)), dtype=np.int8).reshape(
        -1, n_classes
    )


def clear_to_send(states: np.ndarray, A: np.ndarray) -> np.ndarray:
    """C_c(z) for every state (rows) and class (columns)."""
    busy = (states != 0).astype(int)
    return (busy @ A.T) == 0


def attempt_profile(rho_c: float) -> tuple[float, float, float]:
    """Probabilities of zero, one, and two-or-more Poisson(rho_c) attempts."""
    if rho_c < 0:
        raise ValueError(f"attempt rate must be >= 0, got {rho_c}")
    p0 = float(np.exp(-rho_c))
    p1 = rho_c * p0
    p2 = float(-np.expm1(-rho_c)) - p1
    return p0, p1, max(p2, 0.0)


def _profiles(rho: np.ndarray) -> np.ndarray:
    tab = np.ones((len(rho), 4))
    for c, r in enumerate(rho):
        tab[c, :3] = attempt_profile(float(r))
    return tab


class _Structure:
    """Per-spec precomputation shared by all kernels built for that spec."""

    def __init__(self, spec: NetworkSpec, cap: int):
        C = spec.n_classes
        if 3 ** C > cap:
            raise StateSpaceError(f"3^{C} = {3 ** C} environment states exceed cap {cap}")
        self.A = spec.A
        self.states = all_states(C)
        self.n_states = len(self.states)
        self.clear = clear_to_send(self.states, self.A)
        self.powers = 3 ** np.arange(C - 1, -1, -1)
        self.interferes = [
            [d for d in range(C) if d != c and self.A[c, d]] for c in range(C)
        ]
        self._build_outcomes(spec)

    def _build_outcomes(self, spec: NetworkSpec) -> None:
        C = spec.n_classes
        rows, cols, cats, exps = [], [], [], []
        for s, z in enumerate(self.states):
            options = []
            for c in range(C):
                if z[c] == 1:
                    options.append([("dep1", 0), ("stay1", 0)])
                elif z[c] == 2:
                    options.append([("dep2", 0), ("stay2", 0)])
                elif self.clear[s, c]:
                    options.append([("draw", 0), ("draw", 1), ("draw", 2)])
                else:
                    options.append([("idle", 0)])
            for combo in itertools.product(*options):
                attempts = [a if kind == "draw" else 0 for kind, a in combo]
                new = np.zeros(C, dtype=int)
                cat = np.full(C, _NO_DRAW, dtype=np.int8)
                e = [0, 0, 0, 0]
                for c, (kind, a) in enumerate(combo):
                    if kind == "stay1":
                        new[c] = 1
                        e[1] += 1
                    elif kind == "stay2":
                        new[c] = 2
                        e[3] += 1
                    elif kind == "dep1":
                        e[0] += 1
                    elif kind == "dep2":
                        e[2] += 1
                    elif kind == "draw":
                        cat[c] = a
                        if a:
                            other = any(attempts[d] for d in self.interferes[c])
                            new[c] = 1 if (a == 1 and not other) else 2
                rows.append(s)
                cols.append(int(new @ self.powers))
                cats.append(cat)
                exps.append(e)
        self.rows = np.asarray(rows)
        self.cols = np.asarray(cols)
        self.cats = np.asarray(cats, dtype=np.int8).reshape(-1, C)
        e = np.asarray(exps, dtype=float)
        qs, qc = 1.0 / spec.L, 1.0 / spec.Lc
        self.const = qs ** e[:, 0] * (1 - qs) ** e[:, 1] * qc ** e[:, 2] * (1 - qc) ** e[:, 3]
        self.flat = self.rows * self.n_states + self.cols
        self.masks = [self.A[c] == 1 for c in range(C)]


@lru_cache(maxsize=32)
def _structure(spec: NetworkSpec, cap: int = DEFAULT_STATE_CAP) -> _Structure:
    return _Structure(spec, cap)


def build_kernel(rho, spec: NetworkSpec, mode: str = "consistent",
                 cap: int = DEFAULT_STATE_CAP) -> EnvKernel:
    """Transition matrix of the environment for attempt rates ``rho``.

    ``consistent`` marginalizes the physical slot dynamics exactly.
    ``verbatim`` multiplies the component kernels literally (successes,
    collisions, departures, unchanged classes); it does not exclude jointly
    impossible moves, so its rows may sum to more than one.
    """
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (spec.n_classes,):
        raise ValueError(f"rho has shape {rho.shape}, expected ({spec.n_classes},)")
    if np.any(rho < 0) or not np.all(np.isfinite(rho)):
        raise ValueError("attempt rates must be finite and >= 0")
    if mode not in MODES:
        raise ValueError(f"unknown kernel mode {mode!r}; expected one of {MODES}")
    st = _structure(spec, cap)
    if mode == "consistent":
        prof = _profiles(rho)
        w = st.const.copy()
        for c in range(spec.n_classes):
            w *= prof[c, st.cats[:, c]]
        K = np.bincount(st.flat, weights=w, minlength=st.n_states ** 2)
        K = K.reshape(st.n_states, st.n_states)
    else:
        K = _verbatim_matrix(rho, spec, st)
    return EnvKernel(K, mode, rho.copy(), st.states)


def _verbatim_matrix(rho: np.ndarray, spec: NetworkSpec, st: _Structure) -> np.ndarray:
    C = spec.n_classes
    A = st.A
    e = np.exp(-rho)
    p1 = rho * e
    p2 = np.array([attempt_profile(float(r))[2] for r in rho])
    grow = -np.expm1(-rho)
    qs, qc = 1.0 / spec.L, 1.0 / spec.Lc
    K = np.zeros((st.n_states, st.n_states))
    for s, z in enumerate(st.states):
        cl = st.clear[s]
        for t, zp in enumerate(st.states):
            p = 1.0
            for c in range(C):
                a, b = z[c], zp[c]
                if a == 0 and b == 0:
                    p *= e[c] if cl[c] else 1.0
                elif a == 0 and b == 1:
                    p *= p1[c] if cl[c] else 0.0
                elif a == 1:
                    p *= qs if b == 0 else (1 - qs) if b == 1 else 0.0
                elif a == 2:
                    p *= qc if b == 0 else (1 - qc) if b == 2 else 0.0
                if p == 0.0:
                    break
            if p == 0.0:
                continue
            colliding = [c for c in range(C) if z[c] == 0 and zp[c] == 2]
            for comp in _components(colliding, A):
                if len(comp) == 1:
                    c = comp[0]
                    p *= p2[c] if cl[c] else 0.0
                else:
                    for c in comp:
                        p *= grow[c] if cl[c] else 0.0
            K[s, t] = p
    return K


def _components(nodes: list[int], A: np.ndarray) -> list[list[int]]:
    """Connected components of the (symmetrized) interference relation on ``nodes``."""
    left = set(nodes)
    comps = []
    while left:
        start = min(left)
        left.remove(start)
        comp, stack = [start], [start]
        while stack:
            x = stack.pop()
            for y in sorted(left):
                if A[x, y] or A[y, x]:
                    left.remove(y)
                    comp.append(y)
                    stack.append(y)
        comps.append(sorted(comp))
    return comps


@lru_cache(maxsize=256)
def _reachable(pattern: bytes, n: int, start: int) -> np.ndarray:
    adj = np.frombuffer(pattern, dtype=bool).reshape(n, n)
    order = breadth_first_order(csr_matrix(adj), start, directed=True,
                                return_predecessors=False)
    out = np.sort(order)
    out.setflags(write=False)
    return out


def stationary_dist(K: EnvKernel | np.ndarray, start: int = 0) -> EnvStationary:
    """Stationary law of the recurrent class reached from the all-idle state.

    The all-idle state is always reachable from anywhere (activities end with
    positive probability), so the set reachable from it is closed and
    irreducible; the balance equations are solved there by a direct dense
    solve with one equation replaced by the normalization.
    """
    M = K.matrix if isinstance(K, EnvKernel) else np.asarray(K, dtype=float)
    sums = M.sum(axis=1, keepdims=True)
    if np.any(np.abs(sums - 1.0) > 1e-10):
        M = M / np.where(sums > 0, sums, 1.0)
    n = M.shape[0]
    support = _reachable((M > 0).tobytes(), n, start)
    sub = M[np.ix_(support, support)]
    m = len(support)
    lhs = sub.T - np.eye(m)
    lhs[-1, :] = 1.0
    rhs = np.zeros(m)
    rhs[-1] = 1.0
    try:
        x = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"singular balance system: {exc}") from exc
    x = np.clip(x, 0.0, None)
    x /= x.sum()
    pi = np.zeros(n)
    pi[support] = x
    residual = float(np.abs(pi @ M - pi).sum())
    return EnvStationary(pi, residual, support)


def gth_stationary(P: np.ndarray, start: int = 0) -> np.ndarray:
    """Stationary law by Grassmann-Taksar-Heyman state reduction.

    Subtraction-free, so every component keeps full relative accuracy even
    when the law spans many orders of magnitude.  Restricted to the states
    reachable from ``start``.
    """
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    support = _reachable((P > 0).tobytes(), n, start)
    A = P[np.ix_(support, support)].copy()
    m = len(support)
    for k in range(m - 1, 0, -1):
        s = A[k, :k].sum()
        A[:k, k] /= s
        A[:k, :k] += np.outer(A[:k, k], A[k, :k])
    x = np.zeros(m)
    x[0] = 1.0
    for k in range(1, m):
        x[k] = x[:k] @ A[:k, k]
    out = np.zeros(n)
    out[support] = x / x.sum()
    return out


def ghi(pi: EnvStationary | np.ndarray, rho, spec: NetworkSpec):
    """Clear-and-success (G), clear-and-collision (H) and clear (I) probabilities."""
    p = pi.pi if isinstance(pi, EnvStationary) else np.asarray(pi, dtype=float)
    rho = np.asarray(rho, dtype=float)
    st = _structure(spec)
    if p.shape != (st.n_states,) or rho.shape != (spec.n_classes,):
        raise ValueError("pi / rho dimensions do not match the spec")
    prod = _silence_products(st, rho)
    weight = p[:, None] * st.clear
    G = (weight * prod).sum(axis=0)
    H = (weight * (1.0 - prod)).sum(axis=0)
    return G, H, G + H


def _silence_products(st: _Structure, rho: np.ndarray) -> np.ndarray:
    """prod_{d in V_c} (C_d(z)(e^{-rho_d} - 1) + 1) for every state and class."""
    factor = st.clear * np.expm1(-rho)[None, :] + 1.0
    out = np.ones((st.n_states, len(rho)))
    for c in range(len(rho)):
        out[:, c] = np.prod(factor[:, st.A[c] == 1], axis=1)
    return out


def averages(spec: NetworkSpec, rho: np.ndarray):
    """(G, H, I) at attempt rates ``rho`` (consistent kernel).

    Same result as ``ghi(stationary_dist(build_kernel(rho, spec)), rho, spec)``
    with fewer temporaries; the mean-field right-hand side calls this in its
    inner loop.
    """
    st = _structure(spec)
    n, C = st.n_states, len(rho)
    e = np.exp(-rho)
    prof = np.empty((C, 4))
    prof[:, 0] = e
    prof[:, 1] = rho * e
    prof[:, 2] = np.maximum(-np.expm1(-rho) - rho * e, 0.0)
    prof[:, 3] = 1.0
    w = st.const.copy()
    for c in range(C):
        w *= prof[c, st.cats[:, c]]
    M = np.bincount(st.flat, weights=w, minlength=n * n).reshape(n, n)
    support = _reachable((M > 0).tobytes(), n, 0)
    sub = M if len(support) == n else M[np.ix_(support, support)]
    lhs = sub.T - np.eye(len(support))
    lhs[-1, :] = 1.0
    rhs = np.zeros(len(support))
    rhs[-1] = 1.0
    x = np.clip(np.linalg.solve(lhs, rhs), 0.0, None)
    pi = np.zeros(n)
    pi[support] = x / x.sum()
    factor = st.clear * (e - 1.0)[None, :] + 1.0
    prod = np.empty((n, C))
    for c in range(C):
        prod[:, c] = factor[:, st.masks[c]].prod(axis=1)
    weight = pi[:, None] * st.clear
    G = (weight * prod).sum(axis=0)
    H = (weight * (1.0 - prod)).sum(axis=0)
    return G, H, G + H


def silence_products(spec: NetworkSpec, rho) -> np.ndarray:
    return _silence_products(_structure(spec), np.asarray(rho, dtype=float))


def clear_matrix(spec: NetworkSpec) -> np.ndarray:
    return _structure(spec).clear


@dataclass
class DominationReport:
    passed: bool
    recurrent: bool
    n_closed_classes: int
    n_kernels: int
    violation: tuple | None = None

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "dominating_kernel_positive_recurrent": self.recurrent,
            "n_closed_classes": self.n_closed_classes,
            "n_kernels_checked": self.n_kernels,
            "violation": self.violation,
        }


def dominating_kernel(spec: NetworkSpec) -> np.ndarray:
    """Every idle class becomes active at the next slot; activities end at 1/L, 1/Lc."""
    st = _structure(spec)
    qs, qc = 1.0 / spec.L, 1.0 / spec.Lc
    K = np.zeros((st.n_states, st.n_states))
    for s, z in enumerate(st.states):
        options = []
        for zc in z:
            if zc == 0:
                options.append([(1, 1.0)])
            elif zc == 1:
                options.append([(0, qs), (1, 1 - qs)])
            else:
                options.append([(0, qc), (2, 1 - qc)])
        for combo in itertools.product(*options):
            t = encode([v for v, _ in combo], spec.n_classes)
            K[s, t] += float(np.prod([w for _, w in combo]))
    return K


def domination_check(spec: NetworkSpec, n_grid: int = 5, rho_grid=None,
                     tol: float = 1e-12) -> DominationReport:
    """Check that the environment kernels are stochastically dominated by a
    positive-recurrent kernel, in the order "z <= z' iff every class busy in z
    is busy in z'"."""
    st = _structure(spec)
    Kdom = dominating_kernel(spec)
    n_comp, labels = connected_components(csr_matrix(Kdom > 0), directed=True,
                                          connection="strong")
    closed = 0
    for comp in range(n_comp):
        members = labels == comp
        leaves = (Kdom[members][:, ~members] > 0).any()
        closed += not leaves
    recurrent = closed == 1

    busy = (st.states != 0).astype(int)
    # upper[z1, z] = 1 iff busy(z) contains busy(z1)
    upper = ((busy[:, None, :] <= busy[None, :, :]).all(axis=2)).astype(float)
    dom_mass = Kdom @ upper.T
    if rho_grid is None:
        axis = np.linspace(0.0, spec.p0, n_grid)
        rho_grid = itertools.product(axis, repeat=spec.n_classes)
    count = 0
    for rho in rho_grid:
        count += 1
        K = build_kernel(np.asarray(rho, dtype=float), spec).matrix
        diff = K @ upper.T - dom_mass
        if np.any(diff > tol):
            s, z1 = np.unravel_index(np.argmax(diff), diff.shape)
            return DominationReport(
                False, recurrent, closed, count,
                (tuple(int(v) for v in st.states[s]), tuple(int(v) for v in st.states[z1]),
                 tuple(float(r) for r in rho)),
            )
    return DominationReport(recurrent, recurrent, closed, count)


def write_kernel_csv(kernel: EnvKernel, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in kernel.matrix:
            w.writerow([f"{x:.12g}" for x in row])


def write_stationary_csv(stat: EnvStationary, states: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "z", "pi"])
        for i, (z, p) in enumerate(zip(states, stat.pi)):
            w.writerow([i, "".join(str(int(v)) for v in z), f"{p:.12g}"])
