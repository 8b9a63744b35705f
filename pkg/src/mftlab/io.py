"""Experiment configuration and artifact writers.

CSV files use '.' decimals, '\\n' line endings, a header row and 17
significant digits so reruns can be compared byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelError, ModelSpec

EXPERIMENTS = (
    "solve-cc",
    "check-wellposedness",
    "population-sweep",
    "equivalence",
    "gap-vs-n",
    "diagnostics",
)
SWEEP_EXPERIMENTS = ("population-sweep", "gap-vs-n", "diagnostics")


class ConfigError(ValueError):
    """Malformed experiment configuration (not a model violation)."""


@dataclass
class ExperimentConfig:
    experiment: str
    model: dict
    T: float
    steps: int
    paths: int = 20000
    replications: int = 64
    seed: int = 0
    tol: float = 1e-8
    max_iter: int = 50
    damping: float = 1.0
    sweep: list = field(default_factory=list)
    output_dir: str = "out"
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {', '.join(EXPERIMENTS)}")
        if not (self.tol > 0):
            raise ConfigError("solver.tol must be positive")
        if self.max_iter < 1:
            raise ConfigError("solver.max_iter must be at least 1")
        if not (0.0 < self.damping <= 1.0):
            raise ConfigError("solver.damping must lie in (0, 1]")
        if self.steps < 1 or not (self.T > 0):
            raise ConfigError("grid needs T > 0 and steps >= 1")
        if self.paths < 2 or self.replications < 2:
            raise ConfigError("monte_carlo.paths and monte_carlo.replications must be at least 2")
        if any(int(N) < 1 for N in self.sweep):
            raise ConfigError("sweep entries must be positive integers")
        if self.experiment in SWEEP_EXPERIMENTS and not self.sweep:
            raise ConfigError(f"experiment {self.experiment!r} needs a non-empty sweep")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        for key in ("experiment", "model", "grid"):
            if key not in d:
                raise ConfigError(f"config missing {key!r}")
        known = {"experiment", "model", "grid", "monte_carlo", "solver", "sweep", "output_dir", "options"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(extra))}")
        grid = d["grid"]
        mc = d.get("monte_carlo", {})
        sv = d.get("solver", {})
        try:
            return cls(
                experiment=str(d["experiment"]),
                model=dict(d["model"]),
                T=float(grid["T"]),
                steps=int(grid["steps"]),
                paths=int(mc.get("paths", 20000)),
                replications=int(mc.get("replications", 64)),
                seed=int(mc.get("seed", 0)),
                tol=float(sv.get("tol", 1e-8)),
                max_iter=int(sv.get("max_iter", 50)),
                damping=float(sv.get("damping", 1.0)),
                sweep=[int(N) for N in d.get("sweep", [])],
                output_dir=str(d.get("output_dir", "out")),
                options=dict(d.get("options", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad config value: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "model": self.model,
            "grid": {"T": self.T, "steps": self.steps},
            "monte_carlo": {"paths": self.paths, "replications": self.replications, "seed": self.seed},
            "solver": {"tol": self.tol, "max_iter": self.max_iter, "damping": self.damping},
            "sweep": list(self.sweep),
            "output_dir": self.output_dir,
            "options": self.options,
        }

    def model_spec(self) -> ModelSpec:
        """Model with the horizon taken from the grid section."""
        doc = dict(self.model)
        doc.setdefault("T", self.T)
        doc.setdefault("grid_steps", self.steps)
        spec = ModelSpec.from_dict(doc)
        if abs(spec.T - self.T) > 1e-12:
            raise ModelError(f"model horizon {spec.T} differs from grid horizon {self.T}")
        return spec


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}") from None
    return ExperimentConfig.from_dict(doc)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def run_id(cfg: ExperimentConfig) -> str:
    """SHA-1 of the canonical config echo (output directory excluded)."""
    doc = cfg.to_dict()
    doc.pop("output_dir", None)
    return hashlib.sha1(canonical_json(doc).encode()).hexdigest()


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    x = float(v)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def write_csv(path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_curves(path, columns: dict) -> None:
    """``columns`` maps names to 1-D arrays of equal length (vector curves are split per coordinate)."""
    header, cols = [], []
    for name, arr in columns.items():
        a = np.asarray(arr, dtype=float)
        if a.ndim == 1:
            header.append(name)
            cols.append(a)
        else:
            for j in range(a.shape[1]):
                header.append(f"{name}_{j}")
                cols.append(a[:, j])
    write_csv(path, header, zip(*cols))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        f = float(x)
        return f if math.isfinite(f) else str(f)
    return x


def write_json(path, obj) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
