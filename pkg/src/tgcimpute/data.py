"""Data containers and reshaping for multivariate time-series imputation.

A dataset is a three-order tensor of shape (samples, time steps, features)
with an aligned boolean mask (``True`` = observed).  All estimation happens
on a 2-D unfolding of that tensor: either one row per sample with ``T * F``
columns (the default), or one row per (sample, step) with ``F`` columns.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import BoundsError, ConflictError, ContractError, ParseError, ShapeError

__all__ = [
    "ColumnKind",
    "ColumnSpec",
    "Layout",
    "MtsTensor",
    "StandardizationParams",
    "UnfoldedMatrix",
    "destandardize",
    "load_csv_long",
    "mask_mcar",
    "read_holdout_csv",
    "refold",
    "standardize",
    "unfold",
    "unfold_timewise",
    "write_csv_long",
    "write_holdout_csv",
]


class Layout(Enum):
    """Orientation of the 2-D working matrix."""

    PATIENT_ROWS = "patient"   # N rows, T*F columns
    TIME_ROWS = "timewise"     # N*T rows, F columns


class ColumnKind(Enum):
    CONTINUOUS = "continuous"
    ORDINAL = "ordinal"


@dataclass(frozen=True)
class ColumnSpec:
    """Declared type of one feature.

    ``ordinal_levels`` must list every level the feature can take, strictly
    increasing.  Continuous features leave it ``None``.
    """

    feature_name: str
    kind: ColumnKind = ColumnKind.CONTINUOUS
    ordinal_levels: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind is ColumnKind.ORDINAL:
            levels = self.ordinal_levels
            if not levels:
                raise ContractError(
                    f"ordinal feature {self.feature_name!r} needs a non-empty level list"
                )
            if any(b <= a for a, b in zip(levels, levels[1:])):
                raise ContractError(
                    f"ordinal levels for {self.feature_name!r} must be strictly increasing"
                )
        elif self.ordinal_levels is not None:
            raise ContractError(
                f"continuous feature {self.feature_name!r} must not declare levels"
            )


def _frozen(a, dtype=None) -> np.ndarray:
    """Private read-only copy; keeps the containers immutable without
    freezing caller-owned arrays in place."""
    arr = np.array(a, dtype=dtype, order="C", copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class MtsTensor:
    """N x T x F value tensor plus observed-mask; immutable after construction.

    ``values`` may hold anything (NaN included) at unobserved positions; no
    operation in this package reads those entries.
    """

    values: np.ndarray
    mask: np.ndarray
    feature_names: tuple[str, ...]
    sample_ids: tuple[str, ...] = ()

    def __post_init__(self):
        values = _frozen(self.values, dtype=np.float64)
        mask = _frozen(self.mask, dtype=bool)
        if values.ndim != 3:
            raise ShapeError(f"values must be 3-D, got ndim={values.ndim}")
        if values.shape != mask.shape:
            raise ShapeError(f"values {values.shape} and mask {mask.shape} differ")
        n, t, f = values.shape
        if min(n, t, f) < 1:
            raise ShapeError(f"all tensor dimensions must be >= 1, got {values.shape}")
        if len(self.feature_names) != f:
            raise ShapeError(
                f"{len(self.feature_names)} feature names for {f} features"
            )
        sample_ids = self.sample_ids or tuple(str(i) for i in range(n))
        if len(sample_ids) != n:
            raise ShapeError(f"{len(sample_ids)} sample ids for {n} samples")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "sample_ids", sample_ids)

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def n_features(self) -> int:
        return self.values.shape[2]

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class UnfoldedMatrix:
    """2-D working view of a tensor, with enough bookkeeping to refold it.

    ``column_index`` maps column j to a (time, feature) pair.  Under
    ``PATIENT_ROWS`` the pair is exact: j = f * T + t, time fastest within a
    feature.  Under ``TIME_ROWS`` each column is one feature across all rows,
    so the time slot is ``None``.
    """

    values: np.ndarray
    mask: np.ndarray
    layout: Layout
    column_index: tuple[tuple[int | None, int], ...]
    source_shape: tuple[int, int, int]
    feature_names: tuple[str, ...]
    sample_ids: tuple[str, ...] = ()

    def __post_init__(self):
        values = _frozen(self.values, dtype=np.float64)
        mask = _frozen(self.mask, dtype=bool)
        if values.shape != mask.shape or values.ndim != 2:
            raise ShapeError("values and mask must be equal-shape 2-D arrays")
        if len(self.column_index) != values.shape[1]:
            raise ShapeError("column_index length must equal the column count")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    def feature_of_column(self, j: int) -> int:
        return self.column_index[j][1]

    def replace_values(self, values, mask=None) -> "UnfoldedMatrix":
        """New matrix with the same geometry and different cell contents."""
        return UnfoldedMatrix(
            values=values,
            mask=self.mask if mask is None else mask,
            layout=self.layout,
            column_index=self.column_index,
            source_shape=self.source_shape,
            feature_names=self.feature_names,
            sample_ids=self.sample_ids,
        )


@dataclass(frozen=True)
class StandardizationParams:
    """Per-feature location/scale learned from training observations.

    Constant features (zero spread) and ordinal features are flagged and left
    unscaled; ``mean=0, sd=1`` is stored so the transform is the identity.
    """

    feature_names: tuple[str, ...]
    mean: np.ndarray
    sd: np.ndarray
    constant: np.ndarray = field(default=None)  # type: ignore[assignment]
    skipped: np.ndarray = field(default=None)   # type: ignore[assignment]

    def __post_init__(self):
        f = len(self.feature_names)
        mean = np.asarray(self.mean, dtype=np.float64)
        sd = np.asarray(self.sd, dtype=np.float64)
        constant = (
            np.zeros(f, dtype=bool) if self.constant is None else np.asarray(self.constant, bool)
        )
        skipped = (
            np.zeros(f, dtype=bool) if self.skipped is None else np.asarray(self.skipped, bool)
        )
        if not (mean.shape == sd.shape == constant.shape == skipped.shape == (f,)):
            raise ShapeError("standardization arrays must all have one entry per feature")
        if np.any(sd <= 0):
            raise ContractError("standard deviations must be positive (flag, don't zero)")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "sd", _frozen(sd))
        object.__setattr__(self, "constant", _frozen(constant))
        object.__setattr__(self, "skipped", _frozen(skipped))

    def transform_value(self, value: float, feature: int) -> float:
        return (value - self.mean[feature]) / self.sd[feature]

    def inverse_value(self, value: float, feature: int) -> float:
        return value * self.sd[feature] + self.mean[feature]

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "feature_names": list(self.feature_names),
            "mean": self.mean.tolist(),
            "sd": self.sd.tolist(),
            "constant": self.constant.astype(int).tolist(),
            "skipped": self.skipped.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationParams":
        return cls(
            feature_names=tuple(d["feature_names"]),
            mean=np.asarray(d["mean"], float),
            sd=np.asarray(d["sd"], float),
            constant=np.asarray(d["constant"], bool),
            skipped=np.asarray(d["skipped"], bool),
        )


# ---------------------------------------------------------------------------
# CSV ingestion (long format: sample_id,time_index,<feature...>)
# ---------------------------------------------------------------------------

def load_csv_long(path, specs=None, n_steps: int | None = None) -> MtsTensor:
    """Read a long-format CSV into a tensor.

    The header must be ``sample_id,time_index,<feature_1>,...``; an empty
    field is a missing cell.  Samples are ordered by first appearance and the
    number of steps is ``n_steps`` when given, otherwise the largest
    time_index + 1.  Rows absent from the file are fully missing cells.

    Raises
    ------
    ParseError
        Malformed header/row (the message names the line number) or no data.
    BoundsError
        time_index negative or >= the declared number of steps.
    ConflictError
        Two rows address the same (sample_id, time_index).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: no samples (empty file)") from None
        if len(header) < 3 or header[0] != "sample_id" or header[1] != "time_index":
            raise ParseError(
                f"{path}: line 1: header must start with 'sample_id,time_index' "
                "and declare at least one feature"
            )
        feature_names = tuple(name.strip() for name in header[2:])
        if len(set(feature_names)) != len(feature_names):
            raise ParseError(f"{path}: line 1: duplicate feature names in header")

        records: dict[tuple[str, int], list[float | None]] = {}
        sample_order: list[str] = []
        seen_samples: set[str] = set()
        max_t = -1
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}"
                )
            sample_id = row[0]
            try:
                t = int(row[1])
            except ValueError:
                raise ParseError(
                    f"{path}: line {lineno}: time_index {row[1]!r} is not an integer"
                ) from None
            if t < 0 or (n_steps is not None and t >= n_steps):
                bound = n_steps if n_steps is not None else "inf"
                raise BoundsError(
                    f"{path}: line {lineno}: time_index {t} outside [0, {bound})"
                )
            key = (sample_id, t)
            if key in records:
                raise ConflictError(
                    f"{path}: line {lineno}: duplicate cell for sample "
                    f"{sample_id!r} at time {t}"
                )
            cells: list[float | None] = []
            for name, raw in zip(feature_names, row[2:]):
                raw = raw.strip()
                if raw == "":
                    cells.append(None)
                    continue
                try:
                    cells.append(float(raw))
                except ValueError:
                    raise ParseError(
                        f"{path}: line {lineno}: value {raw!r} for feature "
                        f"{name!r} is not numeric"
                    ) from None
            records[key] = cells
            if sample_id not in seen_samples:
                seen_samples.add(sample_id)
                sample_order.append(sample_id)
            max_t = max(max_t, t)

    if not sample_order:
        raise ParseError(f"{path}: no samples")
    _check_specs_against_features(specs, feature_names)

    n, t_total, f = len(sample_order), (n_steps or max_t + 1), len(feature_names)
    values = np.full((n, t_total, f), np.nan)
    mask = np.zeros((n, t_total, f), dtype=bool)
    row_of = {sid: i for i, sid in enumerate(sample_order)}
    for (sid, t), cells in records.items():
        i = row_of[sid]
        for j, cell in enumerate(cells):
            if cell is not None:
                values[i, t, j] = cell
                mask[i, t, j] = True
    return MtsTensor(values, mask, feature_names, tuple(sample_order))


def _check_specs_against_features(specs, feature_names):
    if not specs:
        return
    known = set(feature_names)
    for spec in specs:
        if spec.feature_name not in known:
            raise ContractError(
                f"declared feature {spec.feature_name!r} not present in data"
            )


def write_csv_long(tensor: MtsTensor, path) -> None:
    """Write a tensor back to the long CSV format (one row per sample/step)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "time_index", *tensor.feature_names])
        for i, sid in enumerate(tensor.sample_ids):
            for t in range(tensor.n_steps):
                cells = [
                    repr(float(tensor.values[i, t, j])) if tensor.mask[i, t, j] else ""
                    for j in range(tensor.n_features)
                ]
                writer.writerow([sid, t, *cells])


# ---------------------------------------------------------------------------
# Unfolding / refolding
# ---------------------------------------------------------------------------

def unfold(x: MtsTensor) -> UnfoldedMatrix:
    """Flatten each sample's T x F slice into one row of length T * F.

    Column j holds (t, f) = (j % T, j // T): the vectorization is
    column-major over the slice, so each feature's full time course occupies
    a contiguous block of columns.
    """
    n, t, f = x.values.shape
    # (N, T, F) -> (N, F, T) -> (N, F*T); column j = f * T + t
    values = np.ascontiguousarray(x.values.transpose(0, 2, 1).reshape(n, f * t))
    mask = np.ascontiguousarray(x.mask.transpose(0, 2, 1).reshape(n, f * t))
    column_index = tuple((j % t, j // t) for j in range(f * t))
    return UnfoldedMatrix(
        values=values,
        mask=mask,
        layout=Layout.PATIENT_ROWS,
        column_index=column_index,
        source_shape=(n, t, f),
        feature_names=x.feature_names,
        sample_ids=x.sample_ids,
    )


def unfold_timewise(x: MtsTensor) -> UnfoldedMatrix:
    """Stack all (sample, step) slices: an (N*T) x F matrix, row = i * T + t."""
    n, t, f = x.values.shape
    values = np.ascontiguousarray(x.values.reshape(n * t, f))
    mask = np.ascontiguousarray(x.mask.reshape(n * t, f))
    column_index = tuple((None, j) for j in range(f))
    return UnfoldedMatrix(
        values=values,
        mask=mask,
        layout=Layout.TIME_ROWS,
        column_index=column_index,
        source_shape=(n, t, f),
        feature_names=x.feature_names,
        sample_ids=x.sample_ids,
    )


def unfold_as(x: MtsTensor, layout: Layout) -> UnfoldedMatrix:
    if layout is Layout.PATIENT_ROWS:
        return unfold(x)
    return unfold_timewise(x)


def refold(v: UnfoldedMatrix) -> MtsTensor:
    """Exact inverse of :func:`unfold` / :func:`unfold_timewise`."""
    n, t, f = v.source_shape
    if v.layout is Layout.PATIENT_ROWS:
        values = v.values.reshape(n, f, t).transpose(0, 2, 1)
        mask = v.mask.reshape(n, f, t).transpose(0, 2, 1)
    else:
        values = v.values.reshape(n, t, f)
        mask = v.mask.reshape(n, t, f)
    return MtsTensor(values.copy(), mask.copy(), v.feature_names, v.sample_ids)


# ---------------------------------------------------------------------------
# Evaluation masking
# ---------------------------------------------------------------------------

def mask_mcar(v: UnfoldedMatrix, rate: float, seed):
    """Hide ``round(rate * n_observed)`` observed cells, uniformly at random.

    Returns the masked matrix and the held-out list of ``(row, col, value)``
    triples.  ``seed`` may be an int or a ``numpy.random.Generator``; results
    are deterministic for a fixed int seed.  Already-missing cells are never
    selected.
    """
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"masking rate must lie in [0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    obs_rows, obs_cols = np.nonzero(v.mask)
    n_obs = obs_rows.size
    k = round(rate * n_obs)
    if k == 0:
        return v, []
    pick = rng.choice(n_obs, size=k, replace=False)
    pick.sort()  # stable, order-independent record of the held-out set
    rows, cols = obs_rows[pick], obs_cols[pick]
    new_mask = v.mask.copy()
    new_mask[rows, cols] = False
    held_out = [
        (int(r), int(c), float(v.values[r, c])) for r, c in zip(rows, cols)
    ]
    return v.replace_values(v.values, mask=new_mask), held_out


def write_holdout_csv(path, held_out) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "value"])
        for r, c, value in held_out:
            writer.writerow([r, c, repr(float(value))])


def read_holdout_csv(path):
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["row", "col", "value"]:
            raise ParseError(f"{path}: line 1: expected header 'row,col,value'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out.append((int(row[0]), int(row[1]), float(row[2])))
            except (ValueError, IndexError):
                raise ParseError(f"{path}: line {lineno}: malformed record") from None
    return out


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------

def fit_standardization(v: UnfoldedMatrix, specs=None) -> StandardizationParams:
    """Per-feature mean/sd (population convention) from observed cells.

    All columns belonging to one feature are pooled.  Ordinal features are
    skipped (identity scaling) so their level values survive the round trip;
    constant features are flagged and left unscaled with a warning.
    """
    f = len(v.feature_names)
    ordinal = np.zeros(f, dtype=bool)
    if specs:
        by_name = {s.feature_name: s for s in specs}
        for idx, name in enumerate(v.feature_names):
            spec = by_name.get(name)
            if spec is not None and spec.kind is ColumnKind.ORDINAL:
                ordinal[idx] = True

    col_feature = np.array([pair[1] for pair in v.column_index])
    mean = np.zeros(f)
    sd = np.ones(f)
    constant = np.zeros(f, dtype=bool)
    for feat in range(f):
        if ordinal[feat]:
            continue
        cols = np.nonzero(col_feature == feat)[0]
        block = v.values[:, cols]
        obs = v.mask[:, cols]
        pooled = block[obs]
        if pooled.size == 0:
            continue  # never-observed feature: identity scaling, flagged downstream
        m = float(pooled.mean())
        s = float(pooled.std())  # population sd
        if s == 0.0:
            constant[feat] = True
            warnings.warn(
                f"feature {v.feature_names[feat]!r} is constant on the training "
                "observations; left unscaled",
                stacklevel=2,
            )
            continue
        mean[feat] = m
        sd[feat] = s
    return StandardizationParams(
        feature_names=v.feature_names,
        mean=mean,
        sd=sd,
        constant=constant,
        skipped=ordinal,
    )


def standardize(v: UnfoldedMatrix, params: StandardizationParams | None = None, specs=None):
    """Z-score observed cells per feature; returns (matrix, params).

    With ``params`` supplied the stored statistics are applied unchanged
    (the fit/serve split); otherwise they are computed from ``v``.
    Unobserved cells are not touched.
    """
    if params is None:
        params = fit_standardization(v, specs=specs)
    elif tuple(params.feature_names) != tuple(v.feature_names):
        raise ContractError("standardization params were fit on different features")
    col_feature = np.array([pair[1] for pair in v.column_index])
    mean_by_col = params.mean[col_feature]
    sd_by_col = params.sd[col_feature]
    values = v.values.copy()
    scaled = (values - mean_by_col[None, :]) / sd_by_col[None, :]
    values[v.mask] = scaled[v.mask]
    return v.replace_values(values), params


def destandardize(v: UnfoldedMatrix, params: StandardizationParams) -> UnfoldedMatrix:
    """Invert :func:`standardize` on the observed cells."""
    col_feature = np.array([pair[1] for pair in v.column_index])
    mean_by_col = params.mean[col_feature]
    sd_by_col = params.sd[col_feature]
    values = v.values.copy()
    raw = values * sd_by_col[None, :] + mean_by_col[None, :]
    values[v.mask] = raw[v.mask]
    return v.replace_values(values)
