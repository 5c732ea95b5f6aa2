"""Observable data, model configuration and posterior output types.

An aggregate dataset holds one row per assignment unit (practice, school...)
with its mean outcome ``y``, treatment flag ``z``, size ``w`` (number of
individuals), covariates ``x`` and propensity score ``pi``.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd

__all__ = [
    "AggregateUnit",
    "AggregateDataset",
    "DatasetError",
    "ModelKind",
    "FitConfig",
    "PosteriorDraws",
    "load_dataset",
    "write_dataset",
    "summarize_dataset",
    "weighted_sd",
]


class DatasetError(ValueError):
    """Raised when input data violate the dataset invariants."""


class ModelKind(str, enum.Enum):
    BCF = "bcf"
    ABCF = "abcf"
    IBCF = "ibcf"

    @classmethod
    def parse(cls, value: "ModelKind | str") -> "ModelKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown model kind {value!r}; expected bcf, abcf or ibcf") from None

    @property
    def free_parameters(self) -> tuple[str, ...]:
        if self is ModelKind.BCF:
            return ("sigma_eps2",)
        if self is ModelKind.ABCF:
            return ("sigma_eps2", "sigma_u")
        return ("sigma_eps2", "sigma_u", "sigma_v", "rho")


@dataclass(frozen=True)
class AggregateUnit:
    unit_id: Any
    y: float
    z: int
    w: float
    x: tuple[float, ...]
    pi: float


def _check_row(row: int, y, z, w, x, pi) -> None:
    if not all(math.isfinite(v) for v in (y, z, w, pi, *x)):
        raise DatasetError(f"row {row}: non-finite value")
    if z not in (0, 1):
        raise DatasetError(f"row {row}: z={z} outside {{0, 1}}")
    if not w >= 1:
        raise DatasetError(f"row {row}: w={w} < 1")
    if not 0.0 < pi < 1.0:
        raise DatasetError(f"row {row}: pi={pi} outside (0, 1)")


@dataclass(frozen=True, eq=False)
class AggregateDataset:
    """Column-oriented, validated container of aggregate units.

    Arrays are copied and made read-only on construction. Row numbers in
    error messages are 1-based data rows (the header is not counted).
    """

    y: np.ndarray
    z: np.ndarray
    w: np.ndarray
    X: np.ndarray
    pi: np.ndarray
    unit_ids: tuple = ()
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        y = np.array(self.y, dtype=float).ravel()
        n = y.shape[0]
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(n, -1)
        z_raw = np.asarray(self.z, dtype=float).ravel()
        w = np.array(self.w, dtype=float).ravel()
        pi = np.array(self.pi, dtype=float).ravel()
        if not (X.shape[0] == z_raw.shape[0] == w.shape[0] == pi.shape[0] == n):
            raise DatasetError("columns have inconsistent lengths")
        if n == 0:
            raise DatasetError("dataset has no rows")
        for j in range(n):
            _check_row(j + 1, y[j], z_raw[j], w[j], X[j], pi[j])
        z = z_raw.astype(np.int8)
        if not (z == 1).any() or not (z == 0).any():
            raise DatasetError("need at least one treated and one control unit")
        ids = tuple(self.unit_ids) if len(self.unit_ids) else tuple(range(1, n + 1))
        if len(ids) != n:
            raise DatasetError("unit_ids length does not match data")
        names = tuple(self.covariate_names) or tuple(f"x{k + 1}" for k in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DatasetError("covariate_names length does not match X")
        for arr in (y, z, w, X, pi):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "unit_ids", ids)
        object.__setattr__(self, "covariate_names", names)

    @classmethod
    def from_units(cls, units: Sequence[AggregateUnit]) -> "AggregateDataset":
        if not units:
            raise DatasetError("dataset has no rows")
        p = len(units[0].x)
        for i, u in enumerate(units):
            if len(u.x) != p:
                raise DatasetError(f"row {i + 1}: covariate dimension {len(u.x)} != {p}")
        return cls(
            y=[u.y for u in units],
            z=[u.z for u in units],
            w=[u.w for u in units],
            X=np.array([u.x for u in units], dtype=float).reshape(len(units), p),
            pi=[u.pi for u in units],
            unit_ids=tuple(u.unit_id for u in units),
        )

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def units(self) -> list[AggregateUnit]:
        return [
            AggregateUnit(uid, float(self.y[j]), int(self.z[j]), float(self.w[j]),
                          tuple(float(v) for v in self.X[j]), float(self.pi[j]))
            for j, uid in enumerate(self.unit_ids)
        ]

    @property
    def treated(self) -> np.ndarray:
        return np.flatnonzero(self.z == 1)

    def equals(self, other: "AggregateDataset") -> bool:
        return (
            self.unit_ids == other.unit_ids
            and self.covariate_names == other.covariate_names
            and all(np.array_equal(a, b) for a, b in (
                (self.y, other.y), (self.z, other.z), (self.w, other.w),
                (self.X, other.X), (self.pi, other.pi)))
        )

    def check_sizes_vary(self) -> bool:
        """Warn when every unit has the same size.

        With constant sizes the split of residual variance between the unit
        effect and individual error is identified by the prior alone.
        """
        if np.all(self.w == self.w[0]):
            warnings.warn(
                "all unit sizes are identical; variance components are not identified by the data",
                stacklevel=2,
            )
            return False
        return True


DEFAULT_SCHEMA = {"unit_id": "unit_id", "y": "y", "z": "z", "w": "w", "pi": "pi"}


def _resolve_schema(schema: Mapping[str, Any] | None, columns: Sequence[str]) -> tuple[dict, list[str]]:
    s = dict(DEFAULT_SCHEMA)
    if schema:
        s.update({k: v for k, v in schema.items() if k != "x"})
    if schema and "x" in schema:
        xcols = list(schema["x"])
    else:
        xcols = sorted((c for c in columns if c.startswith("x") and c[1:].isdigit()), key=lambda c: int(c[1:]))
    return s, xcols


def load_dataset(path: str | Path, schema: Mapping[str, Any] | None = None) -> AggregateDataset:
    """Read a CSV file with a header row into an :class:`AggregateDataset`.

    ``schema`` maps the logical names ``unit_id, y, z, w, pi`` to column
    names and ``x`` to a list of covariate columns. Without an ``x`` entry
    every column named ``x<k>`` is used, ordered by ``k``.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file")
    id_col = (schema or {}).get("unit_id", "unit_id")
    df = pd.read_csv(path, float_precision="round_trip", dtype={id_col: str})
    s, xcols = _resolve_schema(schema, list(df.columns))
    missing = [s[k] for k in ("y", "z", "w", "pi") if s[k] not in df.columns]
    missing += [c for c in xcols if c not in df.columns]
    if missing:
        raise DatasetError(f"{path}: missing column(s) {', '.join(missing)}")
    if not xcols:
        raise DatasetError(f"{path}: no covariate columns")
    cols = {}
    for key in ("y", "z", "w", "pi"):
        cols[key] = _numeric(df[s[key]], s[key])
    X = np.column_stack([_numeric(df[c], c) for c in xcols])
    ids = tuple(_parse_id(v) for v in df[s["unit_id"]].tolist()) if s["unit_id"] in df.columns else ()
    for j in range(len(df)):
        _check_row(j + 1, cols["y"][j], cols["z"][j], cols["w"][j], X[j], cols["pi"][j])
    return AggregateDataset(y=cols["y"], z=cols["z"], w=cols["w"], X=X, pi=cols["pi"],
                            unit_ids=ids, covariate_names=tuple(xcols))


def _parse_id(v):
    # integer-looking ids come back as ints so that write/load round-trips
    if isinstance(v, str) and v.isdigit() and str(int(v)) == v:
        return int(v)
    return v


def _numeric(col: pd.Series, name: str) -> np.ndarray:
    values = pd.to_numeric(col, errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise DatasetError(f"row {bad[0] + 1}: non-finite value in column {name}")
    return values


def write_dataset(d: AggregateDataset, path: str | Path) -> None:
    """Write ``d`` as CSV with the default column names (round-trips exactly)."""
    df = pd.DataFrame({"unit_id": list(d.unit_ids), "y": d.y, "z": d.z.astype(int), "w": d.w, "pi": d.pi})
    for k, name in enumerate(d.covariate_names):
        df[name] = d.X[:, k]
    df.to_csv(path, index=False, float_format="%.17g")


def weighted_sd(y, w) -> float:
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    mean = np.sum(w * y) / np.sum(w)
    return float(np.sqrt(np.sum(w * (y - mean) ** 2) / np.sum(w)))


def weighted_mean(y, w) -> float:
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    return float(np.sum(w * y) / np.sum(w))


def summarize_dataset(d: AggregateDataset) -> dict:
    q = np.quantile(d.w, [0.0, 0.25, 0.5, 0.75, 1.0])
    return {
        "n": d.n,
        "p": d.p,
        "n_treated": int(d.z.sum()),
        "w_min": q[0], "w_q25": q[1], "w_median": q[2], "w_q75": q[3], "w_max": q[4],
        "w_mean": float(d.w.mean()),
        "y_weighted_mean": weighted_mean(d.y, d.w),
        "y_weighted_sd": weighted_sd(d.y, d.w),
    }


@dataclass
class FitConfig:
    """Settings for one MCMC fit.

    ``fixed`` pins variance parameters (``sigma_eps2``, ``sigma_u``,
    ``sigma_v``, ``rho``) at values in natural units; pinned parameters are
    not updated. ``psi`` is the superpopulation ATE scale used by the
    structured ``sigma_v`` prior (natural units).
    """

    model_kind: ModelKind = ModelKind.ABCF
    n_burn: int = 1000
    n_draw: int = 1000
    n_trees_mu: int = 200
    n_trees_tau: int = 50
    sigma_u_prior_scale_multiplier: float = 1.0
    sigma_u_prior_scale: float | None = None
    psi: float = 25.0
    seed: int = 0
    thinning: int = 1
    alpha_mu: float = 0.95
    beta_mu: float = 2.0
    alpha_tau: float = 0.25
    beta_tau: float = 3.0
    n_cutpoints: int = 100
    nu: float = 3.0
    q: float = 0.90
    adapt: bool = True
    adapt_every: int = 100
    target_accept: float = 0.44
    initial_proposal_sd: dict = field(default_factory=dict)
    fixed: dict = field(default_factory=dict)
    w_as_covariate: bool = False

    def __post_init__(self):
        self.model_kind = ModelKind.parse(self.model_kind)
        if self.n_burn <= 0 or self.n_draw <= 0:
            raise ValueError("n_burn and n_draw must be positive")
        if self.thinning < 1:
            raise ValueError("thinning must be a positive integer")
        if self.n_trees_mu < 1 or self.n_trees_tau < 1:
            raise ValueError("tree counts must be positive")
        if self.model_kind is ModelKind.IBCF and not self.psi > 0:
            raise ValueError("psi must be positive for ibcf")
        if not self.sigma_u_prior_scale_multiplier > 0:
            raise ValueError("sigma_u_prior_scale_multiplier must be positive")
        unknown = set(self.fixed) - {"sigma_eps2", "sigma_u", "sigma_v", "rho"}
        if unknown:
            raise ValueError(f"cannot pin unknown parameter(s) {sorted(unknown)}")

    @property
    def n_kept(self) -> int:
        return self.n_draw // self.thinning


@dataclass
class PosteriorDraws:
    """Retained MCMC draws in natural units.

    Per-unit arrays have shape ``(n_kept, n)``; scalar traces ``(n_kept,)``.
    ``mu`` is the control-arm prognostic value and ``tau`` the treatment
    effect of each unit. ``v`` is ``None`` unless the fit is iBCF.
    """

    kind: ModelKind
    mu: np.ndarray
    tau: np.ndarray
    sigma_eps: np.ndarray
    sigma_u: np.ndarray
    sigma_v: np.ndarray
    rho: np.ndarray
    u: np.ndarray
    v: np.ndarray | None = None
    acceptance: dict = field(default_factory=dict)
    proposal_sd: dict = field(default_factory=dict)
    unit_ids: tuple = ()

    @property
    def n_kept(self) -> int:
        return self.tau.shape[0]

    @property
    def n(self) -> int:
        return self.tau.shape[1]

    def fitted(self, z) -> np.ndarray:
        """Per-draw conditional mean ``mu + z * tau``."""
        return self.mu + np.asarray(z)[None, :] * self.tau
