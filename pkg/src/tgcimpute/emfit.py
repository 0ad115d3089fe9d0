"""Latent correlation estimation from incompletely observed rows.

The model is a zero-mean multivariate normal over the latent matrix whose
rows are partially observed.  Fitting alternates conditional-moment filling
(E-step), second-moment averaging (M-step), and rescaling to unit diagonal,
starting from the zero-filled sample covariance.  Rows sharing a missing
pattern share one factorization of the observed block; the per-row reduction
order is fixed, so results are bit-reproducible and independent of grouping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError, NumericalError, ShapeError
from .kernels import get_backend

__all__ = [
    "CorrelationModel",
    "EmConfig",
    "FitDiagnostics",
    "SecondMoments",
    "conditional_dist",
    "e_step",
    "fill_latent",
    "fit_em",
    "init_sigma",
    "m_step",
    "observed_loglik",
    "scale_to_correlation",
]

# Jitter escalation for observed-block factorizations that fail outright.
SOLVE_JITTERS = (0.0, 1e-8, 1e-6, 1e-4)


@dataclass(frozen=True)
class EmConfig:
    """Knobs for :func:`fit_em`.

    ``scale=False`` skips the unit-diagonal projection (used to verify the
    raw EM likelihood ascent); ``plugin_moment=True`` drops the conditional
    covariance from the M-step, reproducing a plug-in update that treats
    filled values as exact.  ``group_patterns=False`` recomputes the
    factorization for every row instead of once per missing pattern; results
    are bit-identical either way.
    """

    max_iters: int = 50
    rel_tol: float = 1e-3
    ridge: float = 1e-6
    scale: bool = True
    plugin_moment: bool = False
    group_patterns: bool = True
    backend: str | None = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise ContractError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ContractError("rel_tol must be > 0")
        if self.ridge < 0:
            raise ContractError("ridge must be >= 0")


@dataclass(frozen=True)
class CorrelationModel:
    """Symmetric latent correlation matrix (unit diagonal after scaling)."""

    sigma: np.ndarray

    def __post_init__(self):
        sigma = np.array(self.sigma, dtype=np.float64, order="C", copy=True)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise ShapeError(f"sigma must be square, got {sigma.shape}")
        if not np.all(np.isfinite(sigma)):
            raise NumericalError("sigma contains non-finite entries")
        sigma.flags.writeable = False
        object.__setattr__(self, "sigma", sigma)

    @property
    def m(self) -> int:
        return self.sigma.shape[0]

    def check_valid(self, sym_tol=1e-12, diag_tol=1e-12, eig_floor=-1e-8) -> None:
        """Assert the correlation-matrix invariants; raises ContractError."""
        s = self.sigma
        sym = float(np.abs(s - s.T).max()) if s.size else 0.0
        if sym > sym_tol:
            raise ContractError(f"asymmetry {sym:g} exceeds {sym_tol:g}")
        diag = float(np.abs(np.diag(s) - 1.0).max()) if s.size else 0.0
        if diag > diag_tol:
            raise ContractError(f"diagonal deviates from 1 by {diag:g}")
        off = s[~np.eye(self.m, dtype=bool)]
        if off.size and (off.min() < -1.0 - 1e-12 or off.max() > 1.0 + 1e-12):
            raise ContractError("off-diagonal entries escape [-1, 1]")
        eig_min = float(np.linalg.eigvalsh(s).min())
        if eig_min < eig_floor:
            raise ContractError(f"smallest eigenvalue {eig_min:g} below {eig_floor:g}")

    def to_dict(self) -> dict:
        return {"version": 1, "m": self.m, "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CorrelationModel":
        if d.get("version") != 1:
            raise ContractError(f"unsupported correlation version {d.get('version')!r}")
        sigma = np.asarray(d["sigma"], dtype=np.float64)
        if sigma.shape != (d["m"], d["m"]):
            raise ShapeError("declared dimension does not match the stored matrix")
        return cls(sigma)


@dataclass(frozen=True)
class SecondMoments:
    """Sum over rows of expected second moments, plus the row count.

    Contributions are accumulated in row order rather than kept per row, so
    memory stays M x M; call :func:`e_step` on a single-row matrix to inspect
    one row's contribution.
    """

    total: np.ndarray
    n_rows: int


@dataclass
class FitDiagnostics:
    """Per-iteration EM traces and convergence bookkeeping."""

    loglik_trace: list[float] = field(default_factory=list)
    sigma_delta_trace: list[float] = field(default_factory=list)
    iterations_run: int = 0
    converged: bool = False
    fallback_columns: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "loglik_trace": list(self.loglik_trace),
            "sigma_delta_trace": list(self.sigma_delta_trace),
            "iterations_run": self.iterations_run,
            "converged": self.converged,
            "fallback_columns": list(self.fallback_columns),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitDiagnostics":
        return cls(
            loglik_trace=list(d["loglik_trace"]),
            sigma_delta_trace=list(d["sigma_delta_trace"]),
            iterations_run=int(d["iterations_run"]),
            converged=bool(d["converged"]),
            fallback_columns=tuple(d["fallback_columns"]),
        )


# ---------------------------------------------------------------------------
# Per-pattern conditional pieces
# ---------------------------------------------------------------------------

@dataclass
class _PatternParts:
    obs: np.ndarray          # observed column indices, ascending
    mis: np.ndarray          # missing column indices, ascending
    w: np.ndarray            # Sigma_oo^{-1} Sigma_om, shape (k_o, k_m)
    cov: np.ndarray          # conditional covariance of the missing block
    chol: np.ndarray         # lower factor of (possibly jittered) Sigma_oo
    logdet: float
    jitter: float


def _chol_with_jitter(a: np.ndarray, backend, context: str = ""):
    for jitter in SOLVE_JITTERS:
        candidate = a if jitter == 0.0 else a + jitter * np.eye(a.shape[0])
        chol = backend.chol_lower(candidate)
        if chol is not None:
            return chol, jitter
    raise NumericalError(
        "observed-block factorization failed"
        f"{context}: block size {a.shape[0]}, min diagonal "
        f"{float(a.diagonal().min()) if a.size else float('nan'):g}, "
        f"jitter escalation exhausted at {SOLVE_JITTERS[-1]:g}"
    )


def _parts_for(sigma: np.ndarray, obs: np.ndarray, mis: np.ndarray, backend,
               context: str = "", want_conditional: bool = True) -> _PatternParts:
    soo = np.ascontiguousarray(sigma[np.ix_(obs, obs)])
    chol, jitter = _chol_with_jitter(soo, backend, context)
    logdet = 2.0 * float(np.log(chol.diagonal()).sum()) if obs.size else 0.0
    if want_conditional:
        som = np.ascontiguousarray(sigma[np.ix_(obs, mis)])
        w = np.ascontiguousarray(backend.solve_cholesky(chol, som))
        cov = sigma[np.ix_(mis, mis)] - som.T @ w
        cov = np.ascontiguousarray((cov + cov.T) / 2.0)  # bit-exact symmetry
    else:
        w = np.empty((obs.size, 0))
        cov = np.empty((0, 0))
    return _PatternParts(obs, mis, w, cov, chol, logdet, jitter)


def _group_rows(mask: np.ndarray, group_patterns: bool):
    """Row -> pattern id plus the list of pattern masks.

    With grouping disabled each row is its own pattern, which forces the
    factorizations to be recomputed per row; the row-order reduction makes
    the two modes bit-identical.
    """
    n = mask.shape[0]
    if not group_patterns:
        return np.arange(n, dtype=np.intp), [mask[i] for i in range(n)]
    uniq, inverse = np.unique(mask, axis=0, return_inverse=True)
    return np.ascontiguousarray(inverse.reshape(-1), dtype=np.intp), list(uniq)


def _pattern_parts_list(sigma, row_pattern, pattern_masks, backend,
                        want_conditional=True):
    parts = []
    for pid, pattern in enumerate(pattern_masks):
        obs = np.ascontiguousarray(np.nonzero(pattern)[0], dtype=np.intp)
        mis = np.ascontiguousarray(np.nonzero(~pattern)[0], dtype=np.intp)
        try:
            parts.append(
                _parts_for(sigma, obs, mis, backend, want_conditional=want_conditional)
            )
        except NumericalError as exc:
            first_row = int(np.nonzero(row_pattern == pid)[0][0])
            raise NumericalError(f"{exc} (first affected row {first_row})") from exc
    return parts


def _validate_latent(z, mask):
    z = np.ascontiguousarray(z, dtype=np.float64)
    mask = np.ascontiguousarray(mask, dtype=bool)
    if z.ndim != 2 or z.shape != mask.shape:
        raise ShapeError("latent matrix and mask must be equal-shape 2-D arrays")
    if z.shape[1] == 0:
        raise DomainError("latent matrix must have at least one column")
    if z.shape[0] == 0:
        raise ContractError("latent matrix must have at least one row")
    if not np.all(np.isfinite(z[mask])):
        raise ContractError("observed latent entries must be finite")
    return z, mask


def _sigma_array(sigma) -> np.ndarray:
    arr = sigma.sigma if isinstance(sigma, CorrelationModel) else np.asarray(sigma, float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ShapeError("sigma must be a square matrix")
    return arr


# ---------------------------------------------------------------------------
# The operations
# ---------------------------------------------------------------------------

def scale_to_correlation(sigma_raw) -> CorrelationModel:
    """Rescale a covariance to unit diagonal: D^{-1/2} S D^{-1/2}."""
    a = _sigma_array(sigma_raw)
    diag = np.diag(a)
    if np.any(diag <= 0):
        raise NumericalError(
            f"cannot scale: nonpositive diagonal entry {float(diag.min()):g}"
        )
    d = np.sqrt(diag)
    out = a / np.outer(d, d)
    np.fill_diagonal(out, 1.0)
    return CorrelationModel(out)


def init_sigma(z, mask, ridge: float = 0.0) -> CorrelationModel:
    """Zero-fill missing latents and scale the resulting sample covariance.

    Columns with no observations are pinned to identity rows (unit variance,
    zero correlation) so they ride through the EM untouched.
    """
    z, mask = _validate_latent(z, mask)
    n = z.shape[0]
    z0 = np.where(mask, z, 0.0)
    sraw = (z0.T @ z0) / n
    if ridge:
        sraw = sraw + ridge * np.eye(z.shape[1])
    never_observed = ~mask.any(axis=0)
    for j in np.nonzero(never_observed)[0]:
        sraw[j, j] = 1.0
    return scale_to_correlation(sraw)


def conditional_dist(sigma, obs_idx, mis_idx, z_obs, backend=None):
    """Conditional mean and covariance of the missing coordinates.

    mean = S_mo S_oo^{-1} z_obs and cov = S_mm - S_mo S_oo^{-1} S_om, with
    the observed block solved through a (jitter-escalated) Cholesky
    factorization.  An empty observed set yields the unconditional moments.
    """
    backend = get_backend(backend)
    sig = _sigma_array(sigma)
    obs = np.ascontiguousarray(np.asarray(obs_idx, dtype=np.intp).reshape(-1))
    mis = np.ascontiguousarray(np.asarray(mis_idx, dtype=np.intp).reshape(-1))
    if np.intersect1d(obs, mis).size:
        raise ContractError("observed and missing index sets must be disjoint")
    if np.unique(obs).size != obs.size or np.unique(mis).size != mis.size:
        raise ContractError("index sets must not contain duplicates")
    z_obs = np.asarray(z_obs, dtype=np.float64).reshape(-1)
    if z_obs.shape != obs.shape:
        raise ShapeError("z_obs length must match the observed index set")
    if not np.all(np.isfinite(z_obs)):
        raise ContractError("observed values must be finite")
    parts = _parts_for(sig, obs, mis, backend)
    mean = parts.w.T @ z_obs if obs.size else np.zeros(mis.size)
    return mean, parts.cov


def e_step(z, mask, sigma, *, plugin_moment=False, group_patterns=True, backend=None):
    """One conditional-expectation pass over all rows.

    Returns the mean-filled latent matrix and the accumulated expected
    second moments: observed blocks contribute their outer products, missing
    blocks contribute mean outer products plus the conditional covariance
    (omitted when ``plugin_moment`` is set).
    """
    backend = get_backend(backend)
    z, mask = _validate_latent(z, mask)
    sig = _sigma_array(sigma)
    if sig.shape[0] != z.shape[1]:
        raise ShapeError("sigma dimension must match the latent column count")
    row_pattern, pattern_masks = _group_rows(mask, group_patterns)
    parts = _pattern_parts_list(sig, row_pattern, pattern_masks, backend)
    zf, total = backend.estep_rows(
        z,
        row_pattern,
        [p.obs for p in parts],
        [p.mis for p in parts],
        [p.w for p in parts],
        [p.cov for p in parts],
        not plugin_moment,
    )
    return zf, SecondMoments(total=total, n_rows=z.shape[0])


def m_step(moments: SecondMoments, ridge: float = 1e-6) -> np.ndarray:
    """Average the accumulated second moments into a pre-scale covariance."""
    if moments.n_rows < 1:
        raise ContractError("m_step needs at least one contributing row")
    sraw = moments.total / moments.n_rows
    if ridge:
        sraw = sraw + ridge * np.eye(sraw.shape[0])
    return sraw


def observed_loglik(z, mask, sigma, *, group_patterns=True, backend=None) -> float:
    """Average per-row Gaussian log density over each row's observed block.

    Rows with no observed cells contribute zero.
    """
    backend = get_backend(backend)
    z, mask = _validate_latent(z, mask)
    sig = _sigma_array(sigma)
    row_pattern, pattern_masks = _group_rows(mask, group_patterns)
    parts = _pattern_parts_list(
        sig, row_pattern, pattern_masks, backend, want_conditional=False
    )
    total = backend.loglik_rows(
        z,
        row_pattern,
        [p.obs for p in parts],
        [p.chol for p in parts],
        np.array([p.logdet for p in parts]),
    )
    return float(total) / z.shape[0]


def fill_latent(z, mask, sigma, *, group_patterns=True, backend=None) -> np.ndarray:
    """Replace missing latent coordinates by their conditional means."""
    backend = get_backend(backend)
    z, mask = _validate_latent(z, mask)
    sig = _sigma_array(sigma)
    row_pattern, pattern_masks = _group_rows(mask, group_patterns)
    parts = _pattern_parts_list(sig, row_pattern, pattern_masks, backend)
    return backend.fill_rows(
        z,
        row_pattern,
        [p.obs for p in parts],
        [p.mis for p in parts],
        [p.w for p in parts],
    )


def _pin_identity_rows(sraw: np.ndarray, columns) -> None:
    for j in columns:
        sraw[j, :] = 0.0
        sraw[:, j] = 0.0
        sraw[j, j] = 1.0


def fit_em(z, mask, config: EmConfig | None = None):
    """Estimate the latent correlation by EM.

    Iterates e_step -> m_step -> scale_to_correlation from the zero-filled
    initializer until the relative Frobenius change of the matrix drops
    below ``rel_tol`` or ``max_iters`` is reached.  The observed-data average
    log likelihood is recorded after every iteration.

    Returns
    -------
    (CorrelationModel, FitDiagnostics)
        With ``config.scale=False`` the returned matrix is the raw EM
        covariance (test-only mode for ascent verification).
    """
    config = config or EmConfig()
    backend = get_backend(config.backend)
    z, mask = _validate_latent(z, mask)
    fallback_columns = tuple(int(j) for j in np.nonzero(~mask.any(axis=0))[0])

    sigma = init_sigma(z, mask, ridge=config.ridge)
    diagnostics = FitDiagnostics(fallback_columns=fallback_columns)
    for iteration in range(1, config.max_iters + 1):
        try:
            _, moments = e_step(
                z,
                mask,
                sigma,
                plugin_moment=config.plugin_moment,
                group_patterns=config.group_patterns,
                backend=backend,
            )
            sraw = m_step(moments, ridge=config.ridge)
            _pin_identity_rows(sraw, fallback_columns)
            new_sigma = (
                scale_to_correlation(sraw) if config.scale else CorrelationModel(sraw)
            )
        except NumericalError as exc:
            raise NumericalError(f"EM iteration {iteration}: {exc}") from exc
        denom = max(float(np.linalg.norm(sigma.sigma)), np.finfo(float).tiny)
        delta = float(np.linalg.norm(new_sigma.sigma - sigma.sigma)) / denom
        sigma = new_sigma
        diagnostics.sigma_delta_trace.append(delta)
        diagnostics.loglik_trace.append(
            observed_loglik(
                z, mask, sigma, group_patterns=config.group_patterns, backend=backend
            )
        )
        diagnostics.iterations_run = iteration
        if delta < config.rel_tol:
            diagnostics.converged = True
            break
    return sigma, diagnostics
