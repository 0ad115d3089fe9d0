"""End-to-end pipeline: fit the copula model on a tensor, impute tensors.

Fitting standardizes per feature, unfolds, fits per-column marginals,
transforms to the latent normal scale, and runs the EM correlation fit.
Imputation reuses the training marginals and correlation unchanged: missing
cells are filled with the inverse transform of their latent conditional
mean, then destandardized.  Observed cells pass through bit-identically.
"""

from __future__ import annotations

import json
import warnings
import zipfile
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import numpy as np

from .data import (
    Layout,
    MtsTensor,
    StandardizationParams,
    refold,
    standardize,
    unfold_as,
)
from .emfit import CorrelationModel, EmConfig, FitDiagnostics, fill_latent, fit_em
from .errors import ContractError, TgcImputeError
from .marginals import MarginalSet, fit_marginal_set, from_latent, to_latent

__all__ = [
    "ImputationResult",
    "TgcModel",
    "fit",
    "fit_impute",
    "impute",
    "load_model",
    "save_model",
]

BUNDLE_FORMAT_VERSION = 1

# Heuristic only: a feature this discrete is *suggested* as ordinal, never
# silently reclassified (the inverse-map semantics differ).
ORDINAL_SUGGESTION_MAX_LEVELS = 20


@dataclass(frozen=True)
class TgcModel:
    """Everything needed to impute: marginals, correlation, scaling, layout."""

    marginals: MarginalSet
    correlation: CorrelationModel
    standardization: StandardizationParams
    layout: Layout
    n_steps: int
    n_features: int
    feature_names: tuple[str, ...]
    diagnostics: FitDiagnostics
    config: EmConfig

    def __post_init__(self):
        if self.marginals.n_columns != self.correlation.m:
            raise ContractError(
                f"marginal count {self.marginals.n_columns} != correlation "
                f"dimension {self.correlation.m}"
            )
        object.__setattr__(self, "feature_names", tuple(self.feature_names))


@dataclass(frozen=True)
class ImputationResult:
    completed: MtsTensor
    filled_positions: tuple[tuple[int, int, int], ...]
    diagnostics: FitDiagnostics


@contextmanager
def _stage(name: str):
    """Prefix pipeline errors with the stage that raised them."""
    try:
        yield
    except TgcImputeError as exc:
        exc.args = (f"{name}: {exc.args[0] if exc.args else exc}",)
        raise


def _suggest_ordinals(x: MtsTensor, specs) -> None:
    declared = {s.feature_name for s in specs} if specs else set()
    for f, name in enumerate(x.feature_names):
        if name in declared:
            continue
        col = x.values[:, :, f][x.mask[:, :, f]]
        if col.size == 0:
            continue
        distinct = np.unique(col)
        if distinct.size <= ORDINAL_SUGGESTION_MAX_LEVELS and np.all(
            distinct == np.round(distinct)
        ):
            warnings.warn(
                f"feature {name!r} takes {distinct.size} integer values; "
                "declare it ordinal if its levels are ranks rather than "
                "measurements (it is being treated as continuous)",
                stacklevel=3,
            )


def fit(
    x: MtsTensor,
    specs=None,
    config: EmConfig | None = None,
    layout: Layout = Layout.PATIENT_ROWS,
) -> TgcModel:
    """Fit the copula imputation model on a (partially observed) tensor.

    Parameters
    ----------
    x : MtsTensor
        Training data; unobserved cells are never read.
    specs : list of ColumnSpec, optional
        Feature-type declarations (ordinal levels in particular).
    config : EmConfig, optional
        EM settings; defaults are sensible for clinical-scale missingness.
    layout : Layout
        ``PATIENT_ROWS`` couples all time steps and features in one
        correlation matrix; ``TIME_ROWS`` is the per-step variant kept for
        ablation.
    """
    config = config or EmConfig()
    if x.n_observed == 0:
        raise ContractError("cannot fit on a tensor with no observed cells")
    _suggest_ordinals(x, specs)
    with _stage("standardize"):
        v = unfold_as(x, layout)
        v_std, params = standardize(v, specs=specs)
    with _stage("marginals"):
        marginals = fit_marginal_set(v_std, specs)
        z = to_latent(v_std, marginals)
    with _stage("em"):
        correlation, diagnostics = fit_em(z, v_std.mask, config)
    return TgcModel(
        marginals=marginals,
        correlation=correlation,
        standardization=params,
        layout=layout,
        n_steps=x.n_steps,
        n_features=x.n_features,
        feature_names=x.feature_names,
        diagnostics=diagnostics,
        config=config,
    )


def impute(model: TgcModel, x: MtsTensor) -> ImputationResult:
    """Fill every missing cell of ``x`` using the fitted model.

    The training marginals, correlation, and scaling are applied as-is (no
    re-estimation on ``x``).  Filled continuous values stay inside the
    training range of their feature; filled ordinal values are declared
    levels.  Observed cells are preserved bit-exactly.

    Each fill is the *latent* conditional mean pushed through the inverse
    marginal transform, not the conditional mean in data space; because the
    inverse is nonlinear the two differ, and under weak correlation the fill
    shrinks toward the marginal median rather than the marginal mean.
    """
    if x.n_steps != model.n_steps or x.n_features != model.n_features:
        raise ContractError(
            f"tensor shape (T={x.n_steps}, F={x.n_features}) does not match "
            f"the model (T={model.n_steps}, F={model.n_features})"
        )
    if tuple(x.feature_names) != model.feature_names:
        missing = set(model.feature_names) - set(x.feature_names)
        extra = set(x.feature_names) - set(model.feature_names)
        raise ContractError(
            f"feature names differ from the model's: missing {sorted(missing)}, "
            f"unexpected {sorted(extra)}"
        )
    v = unfold_as(x, model.layout)
    v_std, _ = standardize(v, params=model.standardization)
    z = to_latent(v_std, model.marginals)
    z_filled = fill_latent(
        z,
        v_std.mask,
        model.correlation,
        group_patterns=model.config.group_patterns,
        backend=model.config.backend,
    )
    missing = ~v_std.mask
    fills_std = from_latent(z_filled, model.marginals, cells_mask=missing)

    col_feature = np.array([pair[1] for pair in v.column_index])
    sd_by_col = model.standardization.sd[col_feature]
    mean_by_col = model.standardization.mean[col_feature]
    completed_values = v.values.copy()
    fills_raw = fills_std * sd_by_col[None, :] + mean_by_col[None, :]
    completed_values[missing] = fills_raw[missing]

    completed_matrix = v.replace_values(
        completed_values, mask=np.ones_like(v.mask, dtype=bool)
    )
    completed = refold(completed_matrix)
    filled_positions = tuple(
        (int(i), int(t), int(f)) for i, t, f in zip(*np.nonzero(~x.mask))
    )
    return ImputationResult(
        completed=completed,
        filled_positions=filled_positions,
        diagnostics=model.diagnostics,
    )


def fit_impute(x, specs=None, config=None, layout=Layout.PATIENT_ROWS):
    """Fit on ``x`` and impute the same tensor; identical to doing it in two calls."""
    model = fit(x, specs=specs, config=config, layout=layout)
    return model, impute(model, x)


# ---------------------------------------------------------------------------
# Model bundle (single zip archive)
# ---------------------------------------------------------------------------

def _em_config_to_dict(config: EmConfig) -> dict:
    return asdict(config)


def _em_config_from_dict(d: dict) -> EmConfig:
    return EmConfig(**d)


def save_model(model: TgcModel, path, run_config: dict | None = None) -> None:
    """Write the model as a zip bundle: manifest + the three components.

    ``run_config`` (for example the CLI's resolved flags) is embedded so a
    bundle documents the run that produced it.
    """
    from . import __version__

    manifest = {
        "format_version": BUNDLE_FORMAT_VERSION,
        "package_version": __version__,
        "layout": model.layout.value,
        "n_steps": model.n_steps,
        "n_features": model.n_features,
        "feature_names": list(model.feature_names),
        "em_config": _em_config_to_dict(model.config),
    }
    if run_config is not None:
        manifest["run_config"] = run_config
    entries = {
        "manifest.json": json.dumps(manifest, indent=2, sort_keys=True),
        "marginals.json": model.marginals.to_json(),
        "correlation.json": json.dumps(model.correlation.to_dict()),
        "standardization.json": json.dumps(model.standardization.to_dict()),
        "diagnostics.json": json.dumps(model.diagnostics.to_dict()),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, payload in entries.items():
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, payload)


def load_model(path) -> TgcModel:
    """Reconstruct a model from a bundle written by :func:`save_model`."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format_version") != BUNDLE_FORMAT_VERSION:
            raise ContractError(
                f"unsupported bundle format {manifest.get('format_version')!r}"
            )
        marginals = MarginalSet.from_json(zf.read("marginals.json").decode())
        correlation = CorrelationModel.from_dict(
            json.loads(zf.read("correlation.json"))
        )
        standardization = StandardizationParams.from_dict(
            json.loads(zf.read("standardization.json"))
        )
        diagnostics = FitDiagnostics.from_dict(json.loads(zf.read("diagnostics.json")))
    return TgcModel(
        marginals=marginals,
        correlation=correlation,
        standardization=standardization,
        layout=Layout(manifest["layout"]),
        n_steps=manifest["n_steps"],
        n_features=manifest["n_features"],
        feature_names=tuple(manifest["feature_names"]),
        diagnostics=diagnostics,
        config=_em_config_from_dict(manifest["em_config"]),
    )
