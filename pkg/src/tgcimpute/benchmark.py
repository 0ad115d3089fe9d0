"""Evaluation harness: masking protocol, metrics, baselines, synthetic oracle.

The protocol splits samples 80/20, fits every method on the training split,
hides a fraction of the test split's observed cells, imputes, and scores the
hidden cells.  Metrics are computed on the standardized scale (training
statistics) so results are comparable across features; pass
``metrics_space="raw"`` for unscaled errors.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .data import (
    ColumnKind,
    ColumnSpec,
    Layout,
    MtsTensor,
    fit_standardization,
    mask_mcar,
    refold,
    unfold,
)
from .emfit import EmConfig
from .errors import ConfigError, ContractError, TgcImputeError
from .marginals import std_normal_quantile
from .model import fit as fit_model
from .model import impute as impute_with_model

__all__ = [
    "BenchmarkReport",
    "Metrics",
    "SyntheticSpec",
    "TGC_REFERENCE_RESULTS",
    "baseline_locf",
    "baseline_mean",
    "compare_to_reference",
    "compute_metrics",
    "generate_synthetic",
    "latent_correlation",
    "run_benchmark",
]

# Published results of this method on the three public clinical benchmarks
# (average over 20%-80% test-set removal).  Stored for comparison reporting
# only; desk-scale runs are not expected to reproduce them.
TGC_REFERENCE_RESULTS = {
    "mimic": {"mae": 0.377, "mre": 0.497, "rmse": 0.610},
    "physionet2012": {"mae": 0.309, "mre": 0.437, "rmse": 0.639},
    "physionet2019": {"mae": 0.389, "mre": 0.521, "rmse": 0.638},
}

KNOWN_METHODS = ("tgc", "tgc_u", "locf", "mean")


@dataclass(frozen=True)
class Metrics:
    """Error summary over a set of held-out cells.

    ``mre`` uses the aggregate convention sum|err| / sum|truth| and is None
    when the truth values sum to zero in absolute value.
    """

    mae: float
    mre: float | None
    rmse: float
    n_evaluated: int


def compute_metrics(predicted, truth) -> Metrics:
    p = np.asarray(predicted, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ContractError(f"length mismatch: {p.size} predictions, {t.size} truths")
    if p.size == 0:
        raise ContractError("cannot score an empty held-out set")
    err = np.abs(p - t)
    denom = float(np.abs(t).sum())
    return Metrics(
        mae=float(err.mean()),
        mre=float(err.sum() / denom) if denom > 0 else None,
        rmse=float(np.sqrt(np.mean((p - t) ** 2))),
        n_evaluated=p.size,
    )


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def _observed_feature_means(x: MtsTensor) -> np.ndarray:
    means = np.zeros(x.n_features)
    for f in range(x.n_features):
        col = x.values[:, :, f][x.mask[:, :, f]]
        if col.size:
            means[f] = float(col.mean())
    return means


def baseline_locf(x: MtsTensor, fallback_means=None) -> MtsTensor:
    """Last observation carried forward along time, per (sample, feature).

    Leading gaps are backward-filled from the next observation; series with
    no observations at all take the feature mean (``fallback_means``, or the
    tensor's own observed means when omitted).
    """
    n, t, f = x.values.shape
    means = (
        np.asarray(fallback_means, dtype=np.float64)
        if fallback_means is not None
        else _observed_feature_means(x)
    )
    if means.shape != (f,):
        raise ContractError("fallback_means must have one entry per feature")
    # rows = (sample, feature) pairs, columns = time
    series = x.values.transpose(0, 2, 1).reshape(n * f, t)
    obs = x.mask.transpose(0, 2, 1).reshape(n * f, t)
    steps = np.arange(t)
    last_seen = np.maximum.accumulate(np.where(obs, steps, -1), axis=1)
    next_seen = np.minimum.accumulate(np.where(obs, steps, t)[:, ::-1], axis=1)[:, ::-1]
    take = np.where(last_seen >= 0, last_seen, np.minimum(next_seen, t - 1))
    filled = np.take_along_axis(series, take, axis=1)
    empty = ~obs.any(axis=1)
    filled[empty] = np.repeat(means[None, :], n, axis=0).reshape(n * f)[empty, None]
    values = filled.reshape(n, f, t).transpose(0, 2, 1)
    return MtsTensor(
        values, np.ones_like(x.mask), x.feature_names, x.sample_ids
    )


def baseline_mean(x: MtsTensor, fallback_means=None) -> MtsTensor:
    """Fill every missing cell with its feature's mean."""
    means = (
        np.asarray(fallback_means, dtype=np.float64)
        if fallback_means is not None
        else _observed_feature_means(x)
    )
    if means.shape != (x.n_features,):
        raise ContractError("fallback_means must have one entry per feature")
    values = x.values.copy()
    fill = np.broadcast_to(means, x.values.shape)
    values[~x.mask] = fill[~x.mask]
    return MtsTensor(values, np.ones_like(x.mask), x.feature_names, x.sample_ids)


# ---------------------------------------------------------------------------
# Synthetic generator (the correctness oracle)
# ---------------------------------------------------------------------------

_STRUCTURES = ("ar1", "block", "identity")
_FAMILIES = ("gaussian", "lognormal", "ordinal")


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a copula-distributed tensor with known latent correlation.

    ``marginal_families`` is one family name applied to every feature or a
    tuple with one entry per feature.  The latent correlation lives on the
    unfolded (patient-rows) column order, so under ``ar1`` adjacent time
    steps of one feature are the most strongly coupled.
    """

    n_samples: int
    n_steps: int
    n_features: int
    structure: str = "ar1"
    rho: float = 0.8
    block_size: int = 2
    marginal_families: tuple[str, ...] | str = "gaussian"
    ordinal_levels: int = 5
    missing_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.n_samples, self.n_steps, self.n_features) < 1:
            raise ConfigError("synthetic dimensions must all be >= 1")
        if self.structure not in _STRUCTURES:
            raise ConfigError(f"structure must be one of {_STRUCTURES}")
        if self.structure != "identity" and not -1.0 < self.rho < 1.0:
            raise ConfigError("rho must lie strictly inside (-1, 1)")
        if not 0.0 <= self.missing_rate <= 1.0:
            raise ConfigError("missing_rate must lie in [0, 1]")
        if self.ordinal_levels < 2:
            raise ConfigError("ordinal features need at least two levels")
        for family in self.families():
            if family not in _FAMILIES:
                raise ConfigError(f"unknown marginal family {family!r}")

    def families(self) -> tuple[str, ...]:
        fams = self.marginal_families
        if isinstance(fams, str):
            return (fams,) * self.n_features
        if len(fams) != self.n_features:
            raise ConfigError("need one marginal family per feature")
        return tuple(fams)

    def feature_names(self) -> tuple[str, ...]:
        return tuple(f"f{j}" for j in range(self.n_features))

    def column_specs(self) -> list[ColumnSpec]:
        levels = tuple(float(k) for k in range(1, self.ordinal_levels + 1))
        return [
            ColumnSpec(name, ColumnKind.ORDINAL, levels)
            if family == "ordinal"
            else ColumnSpec(name)
            for name, family in zip(self.feature_names(), self.families())
        ]


def latent_correlation(spec: SyntheticSpec) -> np.ndarray:
    """The true latent correlation matrix the generator draws from."""
    m = spec.n_steps * spec.n_features
    if spec.structure == "identity":
        return np.eye(m)
    if spec.structure == "ar1":
        idx = np.arange(m)
        return spec.rho ** np.abs(np.subtract.outer(idx, idx))
    sigma = np.eye(m)
    for start in range(0, m, spec.block_size):
        stop = min(start + spec.block_size, m)
        sigma[start:stop, start:stop] = spec.rho
    np.fill_diagonal(sigma, 1.0)
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise ConfigError(
            f"block structure with size {spec.block_size} and rho {spec.rho} "
            "is not positive definite"
        ) from None
    return sigma


def generate_synthetic(spec: SyntheticSpec):
    """Draw a tensor from the copula model with known latent correlation.

    Returns ``(observed, ground_truth, sigma_true)``; ``observed`` equals the
    ground truth with ``missing_rate`` of its cells hidden (MCAR, exact
    count).  Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(spec.seed)
    sigma = latent_correlation(spec)
    m = sigma.shape[0]
    chol = np.linalg.cholesky(sigma)
    z = rng.standard_normal((spec.n_samples, m)) @ chol.T

    families = spec.families()
    values = np.empty_like(z)
    thresholds = (
        std_normal_quantile(np.arange(1, spec.ordinal_levels) / spec.ordinal_levels)
        if "ordinal" in families
        else None
    )
    for j in range(m):
        family = families[j // spec.n_steps]  # column j = feature j // T
        col = z[:, j]
        if family == "gaussian":
            values[:, j] = col
        elif family == "lognormal":
            values[:, j] = np.exp(col)
        else:
            values[:, j] = 1.0 + (col[:, None] > thresholds[None, :]).sum(axis=1)

    # invert the patient-rows unfolding: column j = (feature j // T, step j % T)
    tensor_values = values.reshape(spec.n_samples, spec.n_features, spec.n_steps)
    tensor_values = tensor_values.transpose(0, 2, 1)
    truth = MtsTensor(
        tensor_values,
        np.ones(tensor_values.shape, dtype=bool),
        spec.feature_names(),
    )
    if spec.missing_rate == 0.0:
        return truth, truth, sigma
    masked_matrix, _ = mask_mcar(unfold(truth), spec.missing_rate, rng)
    return refold(masked_matrix), truth, sigma


# ---------------------------------------------------------------------------
# The benchmark protocol
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkReport:
    """Aggregated metrics per method/rate cell plus run metadata."""

    cells: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @staticmethod
    def cell_key(method: str, rate: float) -> str:
        return f"{method}/{rate:g}"

    def cell(self, method: str, rate: float) -> dict:
        return self.cells[self.cell_key(method, rate)]

    def to_json(self) -> str:
        return json.dumps(
            {"schema_version": 1, "cells": self.cells, "metadata": self.metadata},
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "BenchmarkReport":
        doc = json.loads(text)
        if doc.get("schema_version") != 1:
            raise ContractError(f"unsupported report schema {doc.get('schema_version')!r}")
        return cls(cells=doc["cells"], metadata=doc["metadata"])

    def to_csv(self, path) -> None:
        import csv

        fields = ["method", "rate", "status", "mae", "std_mae", "mre", "std_mre",
                  "rmse", "std_rmse", "n_evaluated"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for key in sorted(self.cells):
                method, rate = key.rsplit("/", 1)
                row = {"method": method, "rate": rate}
                row.update({k: self.cells[key].get(k) for k in fields[2:]})
                writer.writerow(row)

    def summary_lines(self) -> list[str]:
        lines = [f"{'method':>8} {'rate':>5} {'MAE':>9} {'MRE':>9} {'RMSE':>9}  n"]
        for key in sorted(self.cells):
            method, rate = key.rsplit("/", 1)
            cell = self.cells[key]
            if cell["status"] != "ok":
                lines.append(f"{method:>8} {rate:>5} {cell['status']}")
                continue
            mre = f"{cell['mre']:9.4f}" if cell["mre"] is not None else "      n/a"
            lines.append(
                f"{method:>8} {rate:>5} {cell['mae']:9.4f} {mre} "
                f"{cell['rmse']:9.4f}  {cell['n_evaluated']}"
            )
        return lines


def _subset(x: MtsTensor, idx: np.ndarray) -> MtsTensor:
    return MtsTensor(
        x.values[idx],
        x.mask[idx],
        x.feature_names,
        tuple(x.sample_ids[i] for i in idx),
    )


def _fingerprint(x: MtsTensor) -> str:
    digest = hashlib.sha256()
    digest.update(np.where(x.mask, x.values, 0.0).tobytes())
    digest.update(x.mask.tobytes())
    digest.update(",".join(x.feature_names).encode())
    return digest.hexdigest()


def _aggregate(per_rep: list[Metrics]) -> dict:
    def stats(values):
        arr = np.array([v for v in values if v is not None], dtype=np.float64)
        if arr.size == 0:
            return None, None
        return float(arr.mean()), float(arr.std())

    mae, std_mae = stats([m.mae for m in per_rep])
    mre, std_mre = stats([m.mre for m in per_rep])
    rmse, std_rmse = stats([m.rmse for m in per_rep])
    return {
        "status": "ok",
        "mae": mae,
        "std_mae": std_mae,
        "mre": mre,
        "std_mre": std_mre,
        "rmse": rmse,
        "std_rmse": std_rmse,
        "n_evaluated": int(sum(m.n_evaluated for m in per_rep)),
    }


def run_benchmark(
    data,
    methods=("tgc", "locf", "mean"),
    rates=(0.2, 0.4, 0.6, 0.8),
    reps: int = 3,
    base_seed: int = 0,
    em_config: EmConfig | None = None,
    specs=None,
    metrics_space: str = "standardized",
) -> BenchmarkReport:
    """Run the full masking protocol and return the aggregated report.

    ``data`` is a tensor or a :class:`SyntheticSpec` (generated on the fly;
    its declared ordinal features are used automatically).  Samples are
    split 80/20 with a seeded shuffle; every method is fit on the training
    split once; for each rate and repetition the test split's observed cells
    are masked with seed ``base_seed + rep`` and the held-out cells are
    scored.  A method failure marks its cells as failed and the run
    continues.
    """
    if not methods:
        raise ContractError("need at least one method")
    for method in methods:
        if method not in KNOWN_METHODS:
            raise ConfigError(f"unknown method {method!r}; known: {KNOWN_METHODS}")
    rates = tuple(float(r) for r in rates)
    if any(not 0.0 < r < 1.0 for r in rates) or not rates:
        raise ContractError("rates must be a nonempty subset of (0, 1)")
    if reps < 1:
        raise ContractError("reps must be >= 1")
    if metrics_space not in ("standardized", "raw"):
        raise ConfigError("metrics_space must be 'standardized' or 'raw'")

    if isinstance(data, SyntheticSpec):
        if specs is None:
            specs = data.column_specs()
        x, _, _ = generate_synthetic(data)
    else:
        x = data
    if x.n_samples < 2:
        raise ContractError("need at least two samples to split train/test")
    em_config = em_config or EmConfig()

    rng = np.random.default_rng(base_seed)
    perm = rng.permutation(x.n_samples)
    n_train = min(max(int(round(0.8 * x.n_samples)), 1), x.n_samples - 1)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    x_train = _subset(x, train_idx)
    x_test = _subset(x, test_idx)

    v_train = unfold(x_train)
    metric_params = fit_standardization(v_train, specs=specs)
    train_means = _observed_feature_means(x_train)

    fitted: dict[str, object] = {}
    fit_errors: dict[str, str] = {}
    for method in methods:
        try:
            if method == "tgc":
                fitted[method] = fit_model(
                    x_train, specs=specs, config=em_config, layout=Layout.PATIENT_ROWS
                )
            elif method == "tgc_u":
                fitted[method] = fit_model(
                    x_train, specs=specs, config=em_config, layout=Layout.TIME_ROWS
                )
            else:
                fitted[method] = train_means
        except TgcImputeError as exc:
            fit_errors[method] = f"fit failed: {exc}"

    col_feature = np.array([pair[1] for pair in unfold(x_test).column_index])
    results: dict[str, dict[float, list[Metrics]]] = {
        m: {r: [] for r in rates} for m in methods
    }
    failures: dict[tuple[str, float], str] = {}
    for rate in rates:
        for rep in range(reps):
            v_test = unfold(x_test)
            masked_matrix, held_out = mask_mcar(v_test, rate, base_seed + rep)
            if not held_out:
                for method in methods:
                    failures.setdefault((method, rate), "no held-out cells")
                continue
            x_masked = refold(masked_matrix)
            rows = np.array([h[0] for h in held_out])
            cols = np.array([h[1] for h in held_out])
            truth = np.array([h[2] for h in held_out])
            feats = col_feature[cols]
            if metrics_space == "standardized":
                truth_scored = (truth - metric_params.mean[feats]) / metric_params.sd[feats]
            else:
                truth_scored = truth
            for method in methods:
                if method in fit_errors:
                    failures[(method, rate)] = fit_errors[method]
                    continue
                try:
                    if method in ("tgc", "tgc_u"):
                        completed = impute_with_model(fitted[method], x_masked).completed
                    elif method == "locf":
                        completed = baseline_locf(x_masked, fitted[method])
                    else:
                        completed = baseline_mean(x_masked, fitted[method])
                    predicted = unfold(completed).values[rows, cols]
                    if metrics_space == "standardized":
                        predicted = (predicted - metric_params.mean[feats]) / metric_params.sd[feats]
                    results[method][rate].append(compute_metrics(predicted, truth_scored))
                except TgcImputeError as exc:
                    failures[(method, rate)] = str(exc)

    report = BenchmarkReport()
    for method in methods:
        for rate in rates:
            key = BenchmarkReport.cell_key(method, rate)
            per_rep = results[method][rate]
            if (method, rate) in failures or len(per_rep) < reps:
                report.cells[key] = {
                    "status": f"failed: {failures.get((method, rate), 'incomplete repetitions')}",
                    "mae": None, "std_mae": None, "mre": None, "std_mre": None,
                    "rmse": None, "std_rmse": None,
                    "n_evaluated": int(sum(m.n_evaluated for m in per_rep)),
                }
            else:
                report.cells[key] = _aggregate(per_rep)
    report.metadata = {
        "schema_version": 1,
        "base_seed": base_seed,
        "rep_seeds": [base_seed + rep for rep in range(reps)],
        "rates": list(rates),
        "reps": reps,
        "methods": list(methods),
        "metrics_space": metrics_space,
        "em_config": {
            "max_iters": em_config.max_iters,
            "rel_tol": em_config.rel_tol,
            "ridge": em_config.ridge,
            "scale": em_config.scale,
            "plugin_moment": em_config.plugin_moment,
            "group_patterns": em_config.group_patterns,
            "backend": em_config.backend,
        },
        "dataset_fingerprint": _fingerprint(x),
        "n_samples": x.n_samples,
        "n_train": int(n_train),
        "n_test": int(x.n_samples - n_train),
        "synthetic_spec": _spec_dict(data) if isinstance(data, SyntheticSpec) else None,
    }
    return report


def _spec_dict(spec: SyntheticSpec) -> dict:
    return {
        "n_samples": spec.n_samples,
        "n_steps": spec.n_steps,
        "n_features": spec.n_features,
        "structure": spec.structure,
        "rho": spec.rho,
        "block_size": spec.block_size,
        "marginal_families": list(spec.families()),
        "ordinal_levels": spec.ordinal_levels,
        "missing_rate": spec.missing_rate,
        "seed": spec.seed,
    }


def compare_to_reference(report: BenchmarkReport, reference: str) -> dict:
    """Deviation of the report's TGC results from a published reference row.

    Averages the TGC cells over the report's rates and subtracts the stored
    reference numbers.  Purely informational: nothing is asserted.
    """
    name = reference.lower()
    if name not in TGC_REFERENCE_RESULTS:
        raise ConfigError(
            f"unknown reference {reference!r}; known: {sorted(TGC_REFERENCE_RESULTS)}"
        )
    ref = TGC_REFERENCE_RESULTS[name]
    tgc_cells = [
        cell
        for key, cell in report.cells.items()
        if key.startswith("tgc/") and cell["status"] == "ok"
    ]
    if not tgc_cells:
        raise ContractError("report has no successful 'tgc' cells to compare")
    observed = {
        metric: float(np.mean([c[metric] for c in tgc_cells]))
        for metric in ("mae", "mre", "rmse")
        if all(c[metric] is not None for c in tgc_cells)
    }
    return {
        "reference": name,
        "expected": dict(ref),
        "observed": observed,
        "delta": {k: observed[k] - ref[k] for k in observed if k in ref},
    }
