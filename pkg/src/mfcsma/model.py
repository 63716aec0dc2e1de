"""Network description: user classes, interference graph and backoff policy.

Every other module consumes a validated :class:`NetworkSpec`.  Specs are
frozen and hashable so that per-spec precomputation can be cached.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

DEFAULT_N_MAX = 64
MU_SUM_TOL = 1e-12
MU_NORMALIZE_TOL = 1e-9

_TOP_KEYS = {"classes", "mu", "adjacency", "p0", "L", "Lc", "policy", "n_max"}
_REQUIRED_KEYS = {"classes", "mu", "adjacency", "p0", "L", "policy"}
_POLICY_KEYS = {"levels", "success_map", "collision_map"}


class SpecError(ValueError):
    """Raised when a network description cannot be parsed or is invalid."""

    def __init__(self, message: str, violations: Sequence[str] = ()):
        super().__init__(message)
        self.violations = list(violations)


@dataclass(frozen=True)
class BackoffPolicy:
    """Finite set of transmission probabilities and the success/collision maps.

    ``levels[n]`` is the probability used at backoff level ``n``;
    ``success_map[n]`` and ``collision_map[n]`` are the level indices reached
    after a success or a collision.
    """

    levels: tuple[float, ...]
    success_map: tuple[int, ...]
    collision_map: tuple[int, ...]
    name: str = "custom"

    @classmethod
    def exponential(cls, p0: float, n_max: int) -> "BackoffPolicy":
        levels = tuple(p0 * 2.0 ** -n for n in range(n_max + 1))
        success = (0,) * (n_max + 1)
        collision = tuple(min(n + 1, n_max) for n in range(n_max + 1))
        return cls(levels, success, collision, name="exponential")

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def probs(self) -> np.ndarray:
        return np.asarray(self.levels, dtype=float)

    def success_matrix(self) -> np.ndarray:
        m = np.zeros((self.n_levels, self.n_levels))
        m[np.arange(self.n_levels), self.success_map] = 1.0
        return m

    def collision_matrix(self) -> np.ndarray:
        m = np.zeros((self.n_levels, self.n_levels))
        m[np.arange(self.n_levels), self.collision_map] = 1.0
        return m


@dataclass(frozen=True)
class NetworkSpec:
    classes: tuple[str, ...]
    mu: tuple[float, ...]
    adjacency: tuple[tuple[int, ...], ...]
    p0: float
    L: float
    Lc: float
    policy: BackoffPolicy
    n_max: int = DEFAULT_N_MAX

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def n_levels(self) -> int:
        return self.n_max + 1

    @property
    def A(self) -> np.ndarray:
        return np.asarray(self.adjacency, dtype=int)

    @property
    def mu_array(self) -> np.ndarray:
        return np.asarray(self.mu, dtype=float)

    @property
    def probs(self) -> np.ndarray:
        return self.policy.probs

    def neighbours(self, c: int) -> list[int]:
        """V_c: classes whose activity blocks or collides with class ``c``."""
        return [d for d in range(self.n_classes) if self.adjacency[c][d]]

    def replace(self, **changes: Any) -> "NetworkSpec":
        """Copy with some fields changed; the exponential policy is rebuilt."""
        data = to_dict(self)
        data.update(changes)
        return from_dict(data)

    def with_mu(self, mu: Sequence[float]) -> "NetworkSpec":
        return self.replace(mu=list(mu))


def from_dict(doc: Mapping[str, Any]) -> NetworkSpec:
    """Build a spec from a parsed config document and validate it."""
    if not isinstance(doc, Mapping):
        raise SpecError("config document must be an object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise SpecError(f"unknown keys: {sorted(unknown)}")
    missing = _REQUIRED_KEYS - set(doc)
    if missing:
        raise SpecError(f"missing keys: {sorted(missing)}")

    try:
        classes = tuple(str(c) for c in doc["classes"])
        mu = [float(m) for m in doc["mu"]]
        adjacency = tuple(tuple(int(a) for a in row) for row in doc["adjacency"])
        p0 = float(doc["p0"])
        L = float(doc["L"])
        Lc = float(doc["Lc"]) if doc.get("Lc") is not None else L
    except (TypeError, ValueError) as exc:
        raise SpecError(f"malformed field: {exc}") from exc

    total = math.fsum(mu)
    if mu and all(m >= 0 for m in mu) and MU_SUM_TOL < abs(total - 1.0) <= MU_NORMALIZE_TOL:
        mu = [m / total for m in mu]

    policy_doc = doc["policy"]
    n_max_doc = doc.get("n_max")
    if policy_doc == "exponential":
        n_max = DEFAULT_N_MAX if n_max_doc is None else _as_int(n_max_doc, "n_max")
        if n_max < 0:
            raise SpecError("invalid spec", ["n_max: must be >= 0"])
        policy = BackoffPolicy.exponential(p0, n_max)
    elif isinstance(policy_doc, Mapping):
        extra = set(policy_doc) - _POLICY_KEYS
        if extra or set(policy_doc) != _POLICY_KEYS:
            raise SpecError(f"policy must have exactly the keys {sorted(_POLICY_KEYS)}")
        try:
            policy = BackoffPolicy(
                tuple(float(x) for x in policy_doc["levels"]),
                tuple(int(x) for x in policy_doc["success_map"]),
                tuple(int(x) for x in policy_doc["collision_map"]),
            )
        except (TypeError, ValueError) as exc:
            raise SpecError(f"malformed policy: {exc}") from exc
        n_max = policy.n_levels - 1
        if n_max_doc is not None and _as_int(n_max_doc, "n_max") != n_max:
            raise SpecError("invalid spec", ["n_max: must equal len(policy.levels) - 1"])
    else:
        raise SpecError('policy must be "exponential" or a levels/success_map/collision_map object')

    spec = NetworkSpec(classes, tuple(mu), adjacency, p0, L, Lc, policy, n_max)
    violations = validate_spec(spec)
    if violations:
        raise SpecError("invalid spec: " + "; ".join(violations), violations)
    return spec


def _as_int(value: Any, name: str) -> int:
    if isinstance(value, bool) or not float(value).is_integer():
        raise SpecError(f"{name} must be an integer")
    return int(value)


def load_spec(source: str | Path | Mapping[str, Any]) -> NetworkSpec:
    """Load a spec from a JSON file path, a JSON string or a parsed mapping."""
    if isinstance(source, Mapping):
        return from_dict(source)
    text = str(source)
    if not text.lstrip().startswith("{"):
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise SpecError(f"cannot read config: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"malformed JSON: {exc}") from exc
    return from_dict(doc)


def to_dict(spec: NetworkSpec) -> dict[str, Any]:
    if spec.policy.name == "exponential":
        policy: Any = "exponential"
    else:
        policy = {
            "levels": list(spec.policy.levels),
            "success_map": list(spec.policy.success_map),
            "collision_map": list(spec.policy.collision_map),
        }
    return {
        "classes": list(spec.classes),
        "mu": list(spec.mu),
        "adjacency": [list(row) for row in spec.adjacency],
        "p0": spec.p0,
        "L": spec.L,
        "Lc": spec.Lc,
        "policy": policy,
        "n_max": spec.n_max,
    }


def serialize(spec: NetworkSpec) -> str:
    return json.dumps(to_dict(spec), indent=2)


def validate_spec(spec: NetworkSpec) -> list[str]:
    """Return a list of human-readable invariant violations (empty if valid)."""
    out: list[str] = []
    C = len(spec.classes)
    if C < 1:
        out.append("classes: need at least one class")
    if len(set(spec.classes)) != C:
        out.append("classes: identifiers must be unique")
    if len(spec.mu) != C:
        out.append("mu: length must equal number of classes")
    elif any(not math.isfinite(m) or m < 0 for m in spec.mu):
        out.append("mu: entries must be >= 0")
    elif abs(math.fsum(spec.mu) - 1.0) > MU_SUM_TOL:
        out.append("mu: must sum to 1")

    A = spec.adjacency
    if len(A) != C or any(len(row) != C for row in A):
        out.append("adjacency: must be a square matrix matching classes")
    else:
        if any(a not in (0, 1) for row in A for a in row):
            out.append("adjacency: entries must be 0 or 1")
        if any(A[c][c] != 1 for c in range(C)):
            out.append("adjacency: A_cc must be 1")

    if not (0.0 < spec.p0 <= 1.0):
        out.append("p0: must lie in (0,1]")
    if not spec.L >= 1.0:
        out.append("L: must be >= 1")
    if not spec.Lc >= 1.0:
        out.append("Lc: must be >= 1")
    if spec.n_max < 0:
        out.append("n_max: must be >= 0")

    pol = spec.policy
    n = pol.n_levels
    if len(pol.success_map) != n or len(pol.collision_map) != n:
        out.append("policy: maps must have one entry per level")
        return out
    if n != spec.n_max + 1:
        out.append("policy: number of levels must be n_max + 1")
    if any(not (0.0 < p <= spec.p0) for p in pol.levels):
        out.append("policy: levels must lie in (0, p0]")
    if pol.levels and pol.levels[0] != spec.p0:
        out.append("policy: level 0 must equal p0")
    if any(pol.levels[i + 1] >= pol.levels[i] for i in range(n - 1)):
        out.append("policy: levels must be strictly decreasing")
    if any(not (0 <= s < n) for s in pol.success_map + pol.collision_map):
        out.append("policy: map targets must be valid level indices")
    else:
        if any(pol.levels[pol.success_map[i]] < pol.levels[i] for i in range(n)):
            out.append("policy: success_map must not decrease the probability")
        if any(pol.levels[pol.collision_map[i]] > pol.levels[i] for i in range(n)):
            out.append("policy: collision_map must not increase the probability")
    return out


def rho_of(mix: np.ndarray, spec: NetworkSpec) -> np.ndarray:
    """Per-class attempt rate rho_c = sum_n p_n Q_c^n."""
    q = np.asarray(mix, dtype=float)
    if q.shape != (spec.n_classes, spec.n_levels):
        raise ValueError(
            f"mixture shape {q.shape} does not match spec ({spec.n_classes}, {spec.n_levels})"
        )
    return q @ spec.probs


def point_mass_mixture(spec: NetworkSpec, level: int = 0) -> np.ndarray:
    """All of each class's mass at one backoff level."""
    q = np.zeros((spec.n_classes, spec.n_levels))
    q[:, level] = spec.mu_array
    return q


def check_mixture(mix: np.ndarray, spec: NetworkSpec, tol: float = 1e-9) -> list[str]:
    q = np.asarray(mix, dtype=float)
    if q.shape != (spec.n_classes, spec.n_levels):
        return [f"shape: expected {(spec.n_classes, spec.n_levels)}, got {q.shape}"]
    out = []
    if np.any(q < 0):
        out.append("entries must be >= 0")
    err = np.abs(q.sum(axis=1) - spec.mu_array)
    if np.any(err > tol):
        out.append(f"class sums differ from mu by up to {err.max():.3e}")
    return out


def chain_spec(mu: Sequence[float] = (1 / 3, 1 / 3, 1 / 3), p0: float = 1 / 16,
               L: float = 100.0, Lc: float | None = None, n_max: int = DEFAULT_N_MAX) -> NetworkSpec:
    """Three classes in a line: 1 and 3 hear 2 but not each other."""
    return from_dict({
        "classes": ["1", "2", "3"],
        "mu": list(mu),
        "adjacency": [[1, 1, 0], [1, 1, 1], [0, 1, 1]],
        "p0": p0, "L": L, "Lc": L if Lc is None else Lc,
        "policy": "exponential", "n_max": n_max,
    })


def single_class_spec(p0: float = 1 / 16, L: float = 100.0, Lc: float | None = None,
                      n_max: int = DEFAULT_N_MAX) -> NetworkSpec:
    return from_dict({
        "classes": ["1"], "mu": [1.0], "adjacency": [[1]],
        "p0": p0, "L": L, "Lc": L if Lc is None else Lc,
        "policy": "exponential", "n_max": n_max,
    })
