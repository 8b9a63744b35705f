"""Problem instances: coefficient tables, diversity law, constraint set, information pattern.

Every coefficient is a piecewise-constant table in time.  The two
diversity-dependent fields (``A`` and ``D``) carry a leading node axis, so
``A.values[j, l]`` is the drift matrix of diversity node ``j`` on time cell
``l``.  Lookups are left-continuous: on ``(times[l], times[l+1]]`` the value
is ``values[l]``, and at ``t = 0`` the first entry is used.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

EPS_R = 1e-8  # eigenvalue floor used for "R strictly positive"
WEIGHT_TOL = 1e-12

COEFFICIENT_NAMES = ("A", "B", "C", "D", "F", "F_tilde", "Q", "H", "R")
NODE_FIELDS = ("A", "D")


class ModelError(ValueError):
    """Raised on malformed instances or illegal lookups."""


# --------------------------------------------------------------------------
# diversity, constraint, information
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DiversityLaw:
    """Law of the diversity index, stored as labelled nodes with weights.

    ``kind`` is ``"dirac"``, ``"finite"`` or ``"continuum"``.  A continuum
    law is represented by a quadrature rule; the sampler draws node indices
    from the categorical law given by the quadrature weights, so the
    quadrature is exactly the law of the sampler.
    """

    kind: str
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.atleast_1d(np.asarray(self.nodes, dtype=float))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if self.kind not in ("dirac", "finite", "continuum"):
            raise ModelError(f"unknown diversity kind {self.kind!r}")
        if nodes.shape[0] != weights.shape[0]:
            raise ModelError("diversity nodes and weights differ in length")
        if self.kind == "dirac" and nodes.shape[0] != 1:
            raise ModelError("a Dirac law has exactly one node")
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def dirac(cls, label: float = 0.0) -> "DiversityLaw":
        return cls("dirac", [label], [1.0])

    @classmethod
    def finite(cls, nodes: Sequence, masses: Sequence[float]) -> "DiversityLaw":
        return cls("finite", nodes, masses)

    @classmethod
    def continuum(cls, nodes: Sequence, weights: Sequence[float]) -> "DiversityLaw":
        return cls("continuum", nodes, weights)

    @classmethod
    def uniform(cls, lo: float, hi: float, n_nodes: int) -> "DiversityLaw":
        """Uniform law on ``[lo, hi]`` binned into ``n_nodes`` equal cells (midpoint rule)."""
        edges = np.linspace(lo, hi, n_nodes + 1)
        mids = 0.5 * (edges[:-1] + edges[1:])
        return cls("continuum", mids, np.full(n_nodes, 1.0 / n_nodes))

    @property
    def n_nodes(self) -> int:
        return int(self.weights.shape[0])

    def node_index(self, theta) -> int:
        """Index of the node whose label equals ``theta``; error if ``theta`` is not a node."""
        theta = np.asarray(theta, dtype=float)
        for j in range(self.n_nodes):
            if np.shape(self.nodes[j]) == np.shape(theta) and np.allclose(
                self.nodes[j], theta, rtol=0.0, atol=1e-12
            ):
                return j
        raise ModelError(f"theta={theta.tolist()} not a node of the diversity law")

    def sample_from_uniforms(self, u: np.ndarray) -> np.ndarray:
        """Map uniforms in [0, 1) to node indices by inverse CDF."""
        cdf = np.cumsum(self.weights)
        idx = np.searchsorted(cdf, u * cdf[-1], side="right")
        return np.minimum(idx, self.n_nodes - 1).astype(np.int64)

    def proportional_counts(self, N: int) -> np.ndarray:
        """Largest-remainder rounding of ``N * weights`` to integer counts summing to N."""
        raw = N * self.weights
        counts = np.floor(raw).astype(np.int64)
        rem = N - int(counts.sum())
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:rem]] += 1
        return counts

    def proportional_types(self, N: int) -> np.ndarray:
        return np.repeat(np.arange(self.n_nodes), self.proportional_counts(N))

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind}
        if self.kind == "dirac":
            d["node"] = self.nodes[0].tolist()
        else:
            d["nodes"] = self.nodes.tolist()
            d["masses" if self.kind == "finite" else "weights"] = self.weights.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DiversityLaw":
        kind = d.get("kind")
        if kind == "dirac":
            return cls.dirac(d.get("node", 0.0))
        if kind == "finite":
            return cls.finite(d["nodes"], d["masses"])
        if kind == "continuum":
            return cls.continuum(d["nodes"], d["weights"])
        raise ModelError(f"unknown diversity kind {kind!r}")


@dataclass(frozen=True)
class ConstraintSpec:
    """Closed convex control set: whole space, nonnegative orthant or a box."""

    kind: str = "full"
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("full", "orthant", "box"):
            raise ModelError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "box":
            if self.lo is None or self.hi is None:
                raise ModelError("box constraint needs lo and hi")
            object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float).ravel())
            object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float).ravel())

    @classmethod
    def full(cls) -> "ConstraintSpec":
        return cls("full")

    @classmethod
    def orthant(cls) -> "ConstraintSpec":
        return cls("orthant")

    @classmethod
    def box(cls, lo, hi) -> "ConstraintSpec":
        return cls("box", lo, hi)

    def bounds(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "full":
            return np.full(m, -np.inf), np.full(m, np.inf)
        if self.kind == "orthant":
            return np.zeros(m), np.full(m, np.inf)
        return self.lo.copy(), self.hi.copy()

    def contains(self, v, atol: float = 0.0) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        lo, hi = self.bounds(v.shape[-1])
        return np.all((v >= lo - atol) & (v <= hi + atol), axis=-1)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind}
        if self.kind == "box":
            d["lo"] = self.lo.tolist()
            d["hi"] = self.hi.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConstraintSpec":
        kind = d.get("kind", "full")
        if kind == "box":
            return cls.box(d["lo"], d["hi"])
        return cls(kind)


@dataclass(frozen=True)
class InfoPattern:
    """Open-loop information available to an agent: full, none, or delayed by ``delay``."""

    kind: str = "full"
    delay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("full", "trivial", "delayed"):
            raise ModelError(f"unknown information kind {self.kind!r}")

    @classmethod
    def full(cls) -> "InfoPattern":
        return cls("full")

    @classmethod
    def trivial(cls) -> "InfoPattern":
        return cls("trivial")

    @classmethod
    def delayed(cls, delay: float) -> "InfoPattern":
        return cls("delayed", float(delay))

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind}
        if self.kind == "delayed":
            d["delay"] = self.delay
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InfoPattern":
        kind = d.get("kind", "full")
        if kind == "delayed":
            return cls.delayed(d["delay"])
        return cls(kind)


# --------------------------------------------------------------------------
# coefficient tables
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CoefficientTable:
    """Piecewise-constant table; ``values`` has the time axis first (or second for node fields)."""

    times: np.ndarray
    values: np.ndarray
    node_axis: bool = False

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        values = np.asarray(self.values, dtype=float)
        taxis = 1 if self.node_axis else 0
        if values.ndim != 3 + int(self.node_axis):
            raise ModelError("coefficient values must be a stack of matrices")
        if values.shape[taxis] != times.shape[0]:
            raise ModelError("coefficient times and values differ in length")
        if times[0] != 0.0 or np.any(np.diff(times) <= 0):
            raise ModelError("coefficient times must start at 0 and increase strictly")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value, node_axis: bool = False) -> "CoefficientTable":
        v = np.asarray(value, dtype=float)
        if node_axis:
            return cls([0.0], v[:, None, :, :], True)
        return cls([0.0], v[None, :, :], False)

    def cell_index(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.maximum(np.searchsorted(self.times, t, side="left") - 1, 0)

    def at(self, t, node: int | None = None) -> np.ndarray:
        j = self.cell_index(t)
        if self.node_axis:
            if node is None:
                return self.values[:, j]
            return self.values[node, j]
        return self.values[j]

    def matrices(self) -> np.ndarray:
        """All stored matrices flattened to ``(-1, rows, cols)``."""
        return self.values.reshape(-1, *self.values.shape[-2:])

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "values": self.values.tolist()}


def _as_matrix(x, rows: int, cols: int) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        if rows == cols:
            return a * np.eye(rows)
        return np.full((rows, cols), float(a))
    return a.reshape(rows, cols)


_SHAPES = {"A": "nn", "B": "nm", "C": "nn", "D": "nm", "F": "nn", "F_tilde": "nn", "Q": "nn", "H": "nn", "R": "mm"}


def _table_from_doc(name: str, c, n: int, m: int, nodes: int) -> "CoefficientTable":
    """Coefficient table from a document entry: ``{"times", "values"}`` or a constant.

    A constant is a scalar (multiple of the identity for square fields) or a
    matrix; node fields also accept one matrix per node.
    """
    node_axis = name in NODE_FIELDS
    if isinstance(c, dict):
        return CoefficientTable(c["times"], c["values"], node_axis=node_axis)
    dims = {"n": n, "m": m}
    rows, cols = (dims[ch] for ch in _SHAPES[name])
    arr = np.asarray(c, dtype=float)
    try:
        if node_axis:
            if arr.ndim == 3 or (arr.ndim == 1 and arr.shape[0] == nodes and nodes > 1 and rows * cols == 1):
                mats = np.stack([_as_matrix(a, rows, cols) for a in arr])
            else:
                mats = np.stack([_as_matrix(arr, rows, cols)] * nodes)
            return CoefficientTable.constant(mats, node_axis=True)
        return CoefficientTable.constant(_as_matrix(arr, rows, cols))
    except ValueError as exc:
        raise ModelError(f"coefficient {name}: {exc}") from None


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """Full problem instance.  Immutable once built."""

    n: int
    m: int
    T: float
    xi: np.ndarray
    coefficients: dict
    diversity: DiversityLaw = field(default_factory=DiversityLaw.dirac)
    constraint: ConstraintSpec = field(default_factory=ConstraintSpec.full)
    info: InfoPattern = field(default_factory=InfoPattern.full)
    grid_steps: int = 100

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float).ravel()
        xi.setflags(write=False)
        object.__setattr__(self, "xi", xi)
        missing = [c for c in COEFFICIENT_NAMES if c not in self.coefficients]
        if missing:
            raise ModelError(f"missing coefficients: {missing}")

    # convenience -----------------------------------------------------------
    @classmethod
    def constant(
        cls,
        n: int = 1,
        m: int = 1,
        T: float = 1.0,
        xi=1.0,
        *,
        A=0.0,
        B=0.0,
        C=0.0,
        D=0.0,
        F=0.0,
        F_tilde=0.0,
        Q=0.0,
        H=0.0,
        R=1.0,
        diversity: DiversityLaw | None = None,
        constraint: ConstraintSpec | None = None,
        info: InfoPattern | None = None,
        grid_steps: int = 100,
    ) -> "ModelSpec":
        """Build a time-constant instance.

        ``A`` and ``D`` may be a single matrix (shared by all nodes) or a
        sequence with one entry per diversity node.  Scalars are promoted to
        multiples of the identity (square) or constant-filled matrices.
        """
        diversity = diversity or DiversityLaw.dirac()
        K = diversity.n_nodes

        def per_node(x, rows, cols):
            arr = np.asarray(x, dtype=float)
            if arr.ndim >= 1 and arr.shape[0] == K and (arr.ndim == 3 or (arr.ndim == 1 and K > 1)):
                return np.stack([_as_matrix(a, rows, cols) for a in arr])
            return np.stack([_as_matrix(arr, rows, cols)] * K)

        coefs = {
            "A": CoefficientTable.constant(per_node(A, n, n), node_axis=True),
            "D": CoefficientTable.constant(per_node(D, n, m), node_axis=True),
            "B": CoefficientTable.constant(_as_matrix(B, n, m)),
            "C": CoefficientTable.constant(_as_matrix(C, n, n)),
            "F": CoefficientTable.constant(_as_matrix(F, n, n)),
            "F_tilde": CoefficientTable.constant(_as_matrix(F_tilde, n, n)),
            "Q": CoefficientTable.constant(_as_matrix(Q, n, n)),
            "H": CoefficientTable.constant(_as_matrix(H, n, n)),
            "R": CoefficientTable.constant(_as_matrix(R, m, m)),
        }
        xi = np.broadcast_to(np.asarray(xi, dtype=float), (n,)).copy()
        return cls(
            n,
            m,
            float(T),
            xi,
            coefs,
            diversity,
            constraint or ConstraintSpec.full(),
            info or InfoPattern.full(),
            grid_steps,
        )

    def replace(self, **changes) -> "ModelSpec":
        """Copy with some fields or coefficient tables replaced (coefficients given as arrays)."""
        coefs = dict(self.coefficients)
        fields_ = {
            "n": self.n,
            "m": self.m,
            "T": self.T,
            "xi": self.xi,
            "diversity": self.diversity,
            "constraint": self.constraint,
            "info": self.info,
            "grid_steps": self.grid_steps,
        }
        for key, val in changes.items():
            if key in COEFFICIENT_NAMES:
                if isinstance(val, CoefficientTable):
                    coefs[key] = val
                elif key in NODE_FIELDS:
                    arr = np.asarray(val, dtype=float)
                    if arr.ndim == 2:
                        arr = np.stack([arr] * self.diversity.n_nodes)
                    coefs[key] = CoefficientTable.constant(arr, node_axis=True)
                else:
                    rows, cols = self.coefficients[key].values.shape[-2:]
                    coefs[key] = CoefficientTable.constant(_as_matrix(val, rows, cols))
            elif key in fields_:
                fields_[key] = val
            else:
                raise ModelError(f"unknown field {key!r}")
        return ModelSpec(coefficients=coefs, **fields_)

    # serialization -----------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "T": self.T,
            "xi": self.xi.tolist(),
            "grid_steps": self.grid_steps,
            "coefficients": {k: self.coefficients[k].to_dict() for k in COEFFICIENT_NAMES},
            "diversity": self.diversity.to_dict(),
            "constraint": self.constraint.to_dict(),
            "info": self.info.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            n, m = int(d["n"]), int(d["m"])
            law = DiversityLaw.from_dict(d.get("diversity", {"kind": "dirac"}))
            doc = d["coefficients"]
            coefs = {}
            for name in COEFFICIENT_NAMES:
                key = name if name in doc else ("Ft" if name == "F_tilde" else name)
                if key not in doc and name != "R":
                    c = 0.0
                else:
                    c = doc[key]
                coefs[name] = _table_from_doc(name, c, n, m, law.n_nodes)
            return cls(
                n,
                m,
                float(d["T"]),
                np.asarray(d["xi"], dtype=float),
                coefs,
                law,
                ConstraintSpec.from_dict(d.get("constraint", {"kind": "full"})),
                InfoPattern.from_dict(d.get("info", {"kind": "full"})),
                int(d.get("grid_steps", 100)),
            )
        except KeyError as exc:
            raise ModelError(f"model document missing key {exc}") from None


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    time: float | None = None
    node: int | None = None

    def __str__(self) -> str:
        where = []
        if self.time is not None:
            where.append(f"t={self.time:g}")
        if self.node is not None:
            where.append(f"node={self.node}")
        return self.message + (f" ({', '.join(where)})" if where else "")


def coefficient_at(spec: ModelSpec, which: str, theta, t: float) -> np.ndarray:
    """Tabulated coefficient ``which`` at diversity label ``theta`` and time ``t``.

    ``theta`` is ignored for fields that do not depend on the diversity index.
    """
    if which not in COEFFICIENT_NAMES:
        raise ModelError(f"unknown coefficient {which!r}")
    if not (0.0 <= t <= spec.T):
        raise ModelError(f"t={t} outside [0, {spec.T}]")
    table = spec.coefficients[which]
    if which in NODE_FIELDS:
        return table.at(t, spec.diversity.node_index(theta))
    return table.at(t)


def validate(spec: ModelSpec) -> list[Violation]:
    """Every violated standing assumption on the tabulated data; empty when valid."""
    out: list[Violation] = []
    n, m = spec.n, spec.m
    shapes = {
        "A": (n, n),
        "B": (n, m),
        "C": (n, n),
        "D": (n, m),
        "F": (n, n),
        "F_tilde": (n, n),
        "Q": (n, n),
        "H": (n, n),
        "R": (m, m),
    }
    if n < 1 or m < 1:
        out.append(Violation("dims", f"dimensions must be positive (n={n}, m={m})"))
    if not (np.isfinite(spec.T) and spec.T > 0):
        out.append(Violation("horizon", f"horizon must be positive, got {spec.T}"))
    if spec.xi.shape != (n,) or not np.all(np.isfinite(spec.xi)):
        out.append(Violation("xi", "initial state must be a finite vector of length n"))
    if spec.grid_steps < 1:
        out.append(Violation("grid", "grid_steps must be positive"))

    K = spec.diversity.n_nodes
    shape_ok = True
    for name, shp in shapes.items():
        tab = spec.coefficients[name]
        if tab.values.shape[-2:] != shp:
            out.append(Violation("shape", f"{name} has shape {tab.values.shape[-2:]}, expected {shp}"))
            shape_ok = False
        if name in NODE_FIELDS and tab.values.shape[0] != K:
            out.append(Violation("shape", f"{name} has {tab.values.shape[0]} node slices, law has {K} nodes"))
            shape_ok = False
        if not np.all(np.isfinite(tab.values)):
            out.append(Violation("bounded", f"{name} has non-finite entries"))
        if tab.times[-1] > spec.T:
            out.append(Violation("times", f"{name} has breakpoints beyond T"))

    if shape_ok:
        tq = spec.coefficients["Q"]
        for j, t in enumerate(tq.times):
            q = tq.values[j]
            if not np.allclose(q, q.T, atol=1e-12):
                out.append(Violation("Q_sym", "Q not symmetric", t))
            elif np.all(np.isfinite(q)) and np.linalg.eigvalsh(q).min() < -1e-12:
                out.append(Violation("Q_psd", "Q not positive semidefinite", t))
        th = spec.coefficients["H"]
        for j, t in enumerate(th.times):
            if not np.allclose(th.values[j], th.values[j].T, atol=1e-12):
                out.append(Violation("H_sym", "H not symmetric", t))
        tr = spec.coefficients["R"]
        for j, t in enumerate(tr.times):
            r = tr.values[j]
            if not np.allclose(r, r.T, atol=1e-12):
                out.append(Violation("R_sym", "R not symmetric", t))
            elif not np.all(np.isfinite(r)) or np.linalg.eigvalsh(r).min() < EPS_R:
                out.append(Violation("R_pd", "R not >> 0 (smallest eigenvalue below 1e-8)", t))

    w = spec.diversity.weights
    if np.any(w < 0):
        out.append(Violation("weights", "diversity masses must be nonnegative"))
    if abs(w.sum() - 1.0) > WEIGHT_TOL:
        out.append(Violation("weights", f"masses sum to {w.sum():.12g}, not 1"))

    c = spec.constraint
    if c.kind == "box":
        if c.lo.shape != (m,) or c.hi.shape != (m,):
            out.append(Violation("box", "box bounds must have length m"))
        elif np.any(c.lo > c.hi):
            out.append(Violation("box", "box lower bound exceeds upper bound"))
    if spec.info.kind == "delayed" and not (0.0 <= spec.info.delay <= spec.T):
        out.append(Violation("delay", f"delay {spec.info.delay} outside [0, T]"))
    return out


def require_valid(spec: ModelSpec) -> None:
    bad = validate(spec)
    if bad:
        raise ModelError("; ".join(str(v) for v in bad))


# --------------------------------------------------------------------------
# grid tabulation used by the solvers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CellCoefficients:
    """Coefficients sampled once per time cell of a grid (value on the open cell)."""

    A: np.ndarray  # (K, nodes, n, n)
    D: np.ndarray  # (K, nodes, n, m)
    B: np.ndarray  # (K, n, m)
    C: np.ndarray
    F: np.ndarray
    F_tilde: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    R: np.ndarray  # (K, m, m)
    R_inv: np.ndarray
    M: np.ndarray  # QH + HQ - HQH
    weights: np.ndarray  # diversity weights

    @property
    def steps(self) -> int:
        return self.B.shape[0]


def tabulate(spec: ModelSpec, times: np.ndarray) -> CellCoefficients:
    """Sample every coefficient at the midpoints of the cells delimited by ``times``."""
    mids = 0.5 * (times[:-1] + times[1:])
    co = spec.coefficients
    vals = {}
    for name in COEFFICIENT_NAMES:
        tab = co[name]
        j = tab.cell_index(mids)
        vals[name] = np.ascontiguousarray(np.moveaxis(tab.values[:, j], 1, 0) if tab.node_axis else tab.values[j])
    Q, H = vals["Q"], vals["H"]
    M = Q @ H + H @ Q - H @ Q @ H
    return CellCoefficients(
        A=vals["A"],
        D=vals["D"],
        B=vals["B"],
        C=vals["C"],
        F=vals["F"],
        F_tilde=vals["F_tilde"],
        Q=Q,
        H=H,
        R=vals["R"],
        R_inv=np.linalg.inv(vals["R"]),
        M=M,
        weights=spec.diversity.weights.copy(),
    )
