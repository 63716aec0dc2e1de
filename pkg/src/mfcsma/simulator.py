"""Exact slot-level simulation of N users running CSMA with random backoff.

Each idle user of a class that is clear to send attempts with probability
p/N per slot, where p is the probability of its current backoff level.
Rather than drawing one Bernoulli per user and slot, every user carries the
number of clear slots until its next attempt (a geometric variable, redrawn
whenever its level changes).  This has the same law as per-slot draws but
lets the simulation jump directly from one event to the next, so the cost
scales with the number of attempts and departures instead of N x slots.

Slot semantics (transition from slot k to k+1):

1. Each ongoing class activity ends with probability 1/L (success) or 1/Lc
   (collision); the durations are drawn geometrically when the activity
   starts.
2. Users of classes clear to send in slot k may attempt.  An attempter of
   class c succeeds iff it is the only attempter in c and no class in V_c
   has an attempter; otherwise every attempter of c collides.
3. Backoff levels are updated at the attempt (success map or collision map).
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import envchain
from .model import NetworkSpec

_NEVER = 2 ** 62


def class_counts(spec: NetworkSpec, N: int) -> np.ndarray:
    """Largest-remainder rounding of mu * N."""
    raw = spec.mu_array * N
    base = np.floor(raw).astype(int)
    rest = N - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:rest]] += 1
    return base


@dataclass
class SimReport:
    spec: NetworkSpec
    N: int
    seed: int
    T: float
    n_slots: int
    burnin_slots: int
    counted_slots: int
    class_sizes: np.ndarray
    z_occupancy: np.ndarray
    throughput: np.ndarray
    Q_hat: np.ndarray
    rho_hat: np.ndarray
    xz_occupancy: np.ndarray = field(repr=False)
    pair: tuple[int, int] = (0, 1)
    pair_table: np.ndarray | None = field(default=None, repr=False)
    attempts: np.ndarray | None = None
    successes: np.ndarray | None = None
    collisions: np.ndarray | None = None
    pair_joint_count: int = 0
    pair_joint_prob: float = 0.0
    multi_transition_slots: int = 0
    series: list = field(default_factory=list, repr=False)

    @property
    def throughput_per_user(self) -> np.ndarray:
        mu_hat = self.class_sizes / self.N
        return np.where(mu_hat > 0, self.throughput / np.where(mu_hat > 0, mu_hat, 1), 0.0)

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "seed": self.seed,
            "T": self.T,
            "n_slots": self.n_slots,
            "burnin_slots": self.burnin_slots,
            "counted_slots": self.counted_slots,
            "class_sizes": self.class_sizes.tolist(),
            "throughput": self.throughput.tolist(),
            "throughput_per_user": self.throughput_per_user.tolist(),
            "rho_hat": self.rho_hat.tolist(),
            "Q_hat": self.Q_hat.tolist(),
            "attempts": self.attempts.tolist(),
            "successes": self.successes.tolist(),
            "collisions": self.collisions.tolist(),
            "pair": list(self.pair),
            "pair_joint_count": self.pair_joint_count,
            "pair_joint_prob": self.pair_joint_prob,
            "multi_transition_slots": self.multi_transition_slots,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def strided_series(self, stride: int = 1):
        """Per-class channel state sampled every ``stride`` slots."""
        if not self.series:
            return []
        out = []
        j = 0
        for slot in range(0, self.n_slots, stride):
            while j + 1 < len(self.series) and self.series[j + 1][0] <= slot:
                j += 1
            out.append((slot, self.series[j][1]))
        return out


class Simulation:
    """Mutable state of one simulation run (users, channel, RNG, counters)."""

    def __init__(self, spec: NetworkSpec, N: int, seed: int = 0, *,
                 assignment: str = "deterministic", levels=None,
                 attempt_scale: float = 1.0, pair: tuple[int, int] = (0, 1),
                 pooled_pairs: int | None = None,
                 record_series: bool = False, check: bool = False):
        if N < 1:
            raise ValueError("N must be >= 1")
        self.spec = spec
        self.N = N
        self.seed = seed
        self.rng = np.random.Generator(np.random.Philox(seed))
        C = spec.n_classes
        if assignment == "deterministic":
            sizes = class_counts(spec, N)
            self.cls = np.repeat(np.arange(C), sizes)
        elif assignment == "iid":
            self.cls = self.rng.choice(C, size=N, p=spec.mu_array)
        else:
            raise ValueError(f"unknown class assignment {assignment!r}")
        self.class_sizes = np.bincount(self.cls, minlength=C)
        self.level = (np.zeros(N, dtype=int) if levels is None
                      else np.asarray(levels, dtype=int).copy())
        if self.level.shape != (N,) or self.level.min() < 0 or self.level.max() > spec.n_max:
            raise ValueError("levels must be N integers in [0, n_max]")
        self.probs = spec.probs
        self.attempt_scale = attempt_scale
        self.q = self.probs[self.level] * attempt_scale / N
        self.phase = np.zeros(N, dtype=np.int8)
        self.success_map = spec.policy.success_map
        self.collision_map = spec.policy.collision_map
        self.A = spec.A
        self.interferes = [[d for d in range(C) if d != c and self.A[c, d]] for c in range(C)]
        self.clear_table = envchain.clear_matrix(spec)
        self.powers = [3 ** (C - 1 - c) for c in range(C)]
        self.p_end = [0.0, 1.0 / spec.L, 1.0 / spec.Lc]

        self.k = 0
        self.z = [0] * C
        self.zi = 0
        self.kappa = [0] * C
        self.depart = [_NEVER] * C
        self.members: list[list[int]] = [[] for _ in range(C)]
        self.heaps: list[list[tuple[int, int]]] = [[] for _ in range(C)]
        self.counts = np.zeros((C, spec.n_levels))
        np.add.at(self.counts, (self.cls, self.level), 1.0)
        marks = self._geometric(self.q, 1.0 - self.rng.random(N))
        for i in range(N):
            self.heaps[self.cls[i]].append((int(marks[i]), i))
        for h in self.heaps:
            heapq.heapify(h)

        i, j = pair
        if N >= 2 and not (0 <= i < N and 0 <= j < N and i != j):
            raise ValueError("pair must name two distinct users")
        self.pair = (i, j) if N >= 2 else (0, 0)
        # the pair table pools disjoint pairs (0,1), (2,3), ...; users of the
        # same class are exchangeable so each pair has the tagged-pair law
        n_pool = N // 2 if pooled_pairs is None else min(pooled_pairs, N // 2)
        if n_pool >= 1:
            self.pool_a = np.arange(0, 2 * n_pool, 2)
            self.pool_b = self.pool_a + 1
        else:
            self.pool_a = self.pool_b = np.array([self.pair[0]])
        self.check = check
        self.record_series = record_series
        self.series = [(0, tuple(self.z))] if record_series else []
        self.reset_counters(0)

    @staticmethod
    def _geometric(q, u):
        """Number of trials to first success, by inversion; huge for tiny q."""
        q = np.asarray(q, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            x = np.floor(np.log(u) / np.log1p(-q)) + 1.0
        x = np.where(q > 0, x, float(_NEVER))
        return np.minimum(np.nan_to_num(x, nan=1.0, posinf=_NEVER), _NEVER).astype(np.int64)

    def _geom1(self, q: float) -> int:
        u = 1.0 - self.rng.random()
        if q <= 0.0:
            return _NEVER
        if q >= 1.0:
            return 1
        x = math.floor(math.log(u) / math.log1p(-q)) + 1
        return int(min(x, _NEVER))

    def reset_counters(self, burn_until: int) -> None:
        C, nl = self.spec.n_classes, self.spec.n_levels
        self.burn_until = burn_until
        self.counted = 0
        self.z_occ = np.zeros(3 ** C)
        self.level_occ = np.zeros((C, nl))
        self.xz_occ = np.zeros((C, nl, 3 ** C))
        self.pair_occ = np.zeros((nl, nl))
        self.attempts = np.zeros(C, dtype=np.int64)
        self.successes = np.zeros(C, dtype=np.int64)
        self.collisions = np.zeros(C, dtype=np.int64)
        self.pair_joint_count = 0
        self.pair_joint_mass = 0.0
        self.multi = 0
        self.transitions = 0

    # -- time accounting ---------------------------------------------------
    def _clear(self) -> list[bool]:
        return self.clear_table[self.zi]

    def _next_event(self) -> int:
        te = _NEVER
        clear = self._clear()
        for c, zc in enumerate(self.z):
            if zc:
                te = min(te, self.depart[c] - 1)
            elif clear[c] and self.heaps[c]:
                te = min(te, self.k + self.heaps[c][0][0] - self.kappa[c] - 1)
        return te

    def _accumulate(self, n: int) -> None:
        """Account for slots k .. k+n-1, all in the current state."""
        m = self.k + n - max(self.k, self.burn_until)
        if m <= 0:
            return
        self.counted += m
        self.transitions += m
        self.z_occ[self.zi] += m
        self.level_occ += m * self.counts
        self.xz_occ[:, :, self.zi] += m * self.counts
        np.add.at(self.pair_occ, (self.level[self.pool_a], self.level[self.pool_b]), m)
        i, j = self.pair
        clear = self._clear()
        if i != j and clear[self.cls[i]] and clear[self.cls[j]]:
            self.pair_joint_mass += m * self.q[i] * self.q[j]

    def _advance_quiet(self, n: int) -> None:
        clear = self._clear()
        for c in range(len(self.z)):
            if clear[c]:
                self.kappa[c] += n

    # -- event --------------------------------------------------------------
    def _transition(self) -> None:
        """Apply the events of the transition from slot k to k+1."""
        k = self.k
        C = len(self.z)
        clear = self._clear()
        attempters: list[list[int]] = [[] for _ in range(C)]
        for c in range(C):
            if clear[c]:
                h = self.heaps[c]
                while h and h[0][0] == self.kappa[c]:
                    attempters[c].append(heapq.heappop(h)[1])
                attempters[c].sort()
        new_z = list(self.z)
        for c in range(C):
            if self.z[c] and self.depart[c] == k + 1:
                new_z[c] = 0
                self.depart[c] = _NEVER
                for u in self.members[c]:
                    self.phase[u] = 0
                self.members[c] = []

        n_att = sum(len(a) for a in attempters)
        if n_att >= 2:
            self.multi += k >= self.burn_until
        i, j = self.pair
        if i != j:
            ci, cj = self.cls[i], self.cls[j]
            if i in attempters[ci] and j in attempters[cj] and k >= self.burn_until:
                self.pair_joint_count += 1

        for c in range(C):
            users = attempters[c]
            if not users:
                continue
            blocked = any(attempters[d] for d in self.interferes[c])
            success = len(users) == 1 and not blocked
            counted = k >= self.burn_until
            if counted:
                self.attempts[c] += len(users)
                if success:
                    self.successes[c] += 1
                else:
                    self.collisions[c] += 1
            to_map = self.success_map if success else self.collision_map
            for u in users:
                old = self.level[u]
                new = to_map[old]
                self.counts[c, old] -= 1.0
                self.counts[c, new] += 1.0
                self.level[u] = new
                self.q[u] = self.probs[new] * self.attempt_scale / self.N
                self.phase[u] = 1 if success else 2
                heapq.heappush(self.heaps[c], (self.kappa[c] + self._geom1(self.q[u]), u))
            state = 1 if success else 2
            new_z[c] = state
            self.members[c] = list(users)
            self.depart[c] = k + 1 + self._geom1(self.p_end[state])

        self.z = new_z
        self.zi = sum(zc * p for zc, p in zip(new_z, self.powers))
        self.k = k + 1
        if self.record_series:
            self.series.append((self.k, tuple(new_z)))
        if self.check:
            self.check_channel()

    def check_channel(self) -> None:
        for c, zc in enumerate(self.z):
            phases = [self.phase[u] for u in self.members[c]]
            if zc == 0:
                assert not phases, f"class {c} idle but has active users"
            elif zc == 1:
                assert phases == [1], f"class {c} in success with phases {phases}"
            else:
                assert phases and all(p == 2 for p in phases), f"class {c} collision {phases}"
        active = np.flatnonzero(self.phase)
        for u in active:
            assert self.z[self.cls[u]] == self.phase[u]

    # -- public API ---------------------------------------------------------
    def advance_to(self, end: int) -> None:
        while self.k < end:
            te = self._next_event()
            last = min(te, end - 1)
            n = last - self.k + 1
            self._accumulate(n)
            self._advance_quiet(n)
            if te <= end - 1:
                self.k = te
                self._transition()
            else:
                self.k = end

    def step(self) -> "Simulation":
        self.advance_to(self.k + 1)
        return self

    def report(self, T: float | None = None) -> SimReport:
        spec = self.spec
        tot = max(self.counted, 1)
        z_occ = self.z_occ / tot
        states = envchain.all_states(spec.n_classes)
        thr = np.array([z_occ[states[:, c] == 1].sum() for c in range(spec.n_classes)])
        Q_hat = self.level_occ / (tot * self.N)
        pair_tab = self.pair_occ / tot
        return SimReport(
            spec=spec, N=self.N, seed=self.seed,
            T=T if T is not None else self.k / self.N,
            n_slots=self.k, burnin_slots=self.burn_until, counted_slots=self.counted,
            class_sizes=self.class_sizes.copy(), z_occupancy=z_occ, throughput=thr,
            Q_hat=Q_hat, rho_hat=(Q_hat @ self.probs) * self.attempt_scale,
            xz_occupancy=self.xz_occ.copy(), pair=self.pair, pair_table=pair_tab,
            attempts=self.attempts.copy(), successes=self.successes.copy(),
            collisions=self.collisions.copy(), pair_joint_count=self.pair_joint_count,
            pair_joint_prob=self.pair_joint_mass / tot, multi_transition_slots=self.multi,
            series=list(self.series),
        )


def init(spec: NetworkSpec, N: int, seed: int = 0, **kwargs) -> Simulation:
    return Simulation(spec, N, seed, **kwargs)


def step(state: Simulation) -> Simulation:
    return state.step()


def run(state: Simulation, T: float, burnin: float = 0.2) -> SimReport:
    """Simulate ceil(T * N) slots from the current slot; the first ``burnin``
    fraction of them is excluded from every time average."""
    if T <= 0:
        raise ValueError("T must be > 0")
    if not 0.0 <= burnin < 1.0:
        raise ValueError("burnin must lie in [0, 1)")
    n_slots = int(math.ceil(T * state.N))
    start = state.k
    state.reset_counters(start + int(math.floor(burnin * n_slots)))
    state.advance_to(start + n_slots)
    return state.report(T)


def simulate(spec: NetworkSpec, N: int, T: float, seed: int = 0, burnin: float = 0.2,
             **kwargs) -> SimReport:
    return run(init(spec, N, seed, **kwargs), T, burnin)


def chaos_metric(report_or_table, pair=None) -> float:
    """Sum over level pairs of |P(a, b) - P(a) P(b)| for a tagged user pair."""
    tab = report_or_table.pair_table if isinstance(report_or_table, SimReport) else report_or_table
    tab = np.asarray(tab, dtype=float)
    tab = tab / tab.sum()
    return float(np.abs(tab - np.outer(tab.sum(axis=1), tab.sum(axis=0))).sum())


def pair_table_from_streams(a, b, n_levels: int) -> np.ndarray:
    tab = np.zeros((n_levels, n_levels))
    np.add.at(tab, (np.asarray(a), np.asarray(b)), 1.0)
    return tab / tab.sum()


@dataclass
class OccupationCheck:
    divergence: np.ndarray
    weights: np.ndarray
    pi: np.ndarray
    rho_hat: np.ndarray

    @property
    def weighted(self) -> float:
        w = self.weights / self.weights.sum()
        return float((np.nan_to_num(self.divergence) * w).sum())


def occupation_check(report: SimReport, spec: NetworkSpec | None = None) -> OccupationCheck:
    """L1 distance between the empirical law of z given a user's (class, level)
    and the stationary environment law at the empirical attempt rates."""
    spec = spec or report.spec
    K = envchain.build_kernel(report.rho_hat, spec)
    pi = envchain.stationary_dist(K).pi
    occ = report.xz_occupancy
    mass = occ.sum(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = occ / mass[:, :, None]
    div = np.abs(cond - pi[None, None, :]).sum(axis=2)
    div[mass == 0] = np.nan
    return OccupationCheck(div, mass, pi, report.rho_hat)
