"""Command-line front end: fit, impute, benchmark, synth.

Every flag can also be supplied through ``--config FILE`` (a flat JSON
object keyed by flag name, hyphens or underscores); explicit flags win.
The resolved configuration is embedded in every output artifact so a run
can be replayed from its own outputs.

Exit codes: 0 success, 1 internal/numerical failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import sys
from contextlib import contextmanager

from .benchmark import (
    SyntheticSpec,
    compare_to_reference,
    generate_synthetic,
    run_benchmark,
)
from .data import ColumnKind, ColumnSpec, Layout, load_csv_long, write_csv_long
from .emfit import EmConfig
from .errors import (
    BoundsError,
    ConfigError,
    ConflictError,
    ContractError,
    DomainError,
    FitError,
    NumericalError,
    ParseError,
    ShapeError,
    TgcImputeError,
)
from .kernels import available_backends, default_backend_name
from .model import fit, impute, load_model, save_model

USAGE_ERRORS = (
    ParseError,
    BoundsError,
    ConflictError,
    ConfigError,
    ContractError,
    DomainError,
    FitError,
    ShapeError,
    FileNotFoundError,
    IsADirectoryError,
)


def _log(message: str) -> None:
    print(message, file=sys.stderr)


@contextmanager
def _thread_limit(n):
    """Cap the linear-algebra thread pool for the duration of a run."""
    if n is None:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        _log("threadpoolctl not installed; --threads ignored")
        yield
        return
    with threadpool_limits(limits=int(n)):
        yield


# ---------------------------------------------------------------------------
# Config resolution: flags > config file > defaults
# ---------------------------------------------------------------------------

def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: config file is not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: config file must hold a flat JSON object")
    return {str(k).replace("-", "_"): v for k, v in doc.items()}


class _Resolver:
    """Layer parsed flags over the config file and record the result."""

    def __init__(self, args: argparse.Namespace):
        self.args = vars(args)
        self.file = _load_config_file(self.args.get("config"))
        self.resolved: dict = {}

    def get(self, key: str, default=None, cast=None, required=False):
        value = self.args.get(key)
        if value is None:
            value = self.file.get(key, default)
        if value is None and required:
            raise ConfigError(f"missing required option --{key.replace('_', '-')}")
        if value is not None and cast is not None:
            try:
                value = cast(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for --{key.replace('_', '-')}: {exc}") from None
        self.resolved[key] = value
        return value


def _parse_rates(raw) -> tuple[float, ...]:
    if isinstance(raw, (list, tuple)):
        return tuple(float(r) for r in raw)
    return tuple(float(part) for part in str(raw).split(",") if part.strip())


def _parse_methods(raw) -> tuple[str, ...]:
    if isinstance(raw, (list, tuple)):
        return tuple(str(m) for m in raw)
    return tuple(part.strip() for part in str(raw).split(",") if part.strip())


def _parse_ordinal(raw) -> list[ColumnSpec]:
    """``name:K,...`` declares each named feature ordinal with levels 1..K."""
    if not raw:
        return []
    specs = []
    for part in str(raw).split(","):
        part = part.strip()
        if not part:
            continue
        name, _, k = part.partition(":")
        if not name or not k:
            raise ConfigError(f"--ordinal entries look like name:K, got {part!r}")
        try:
            levels = int(k)
        except ValueError:
            raise ConfigError(f"--ordinal level count {k!r} is not an integer") from None
        if levels < 2:
            raise ConfigError(f"--ordinal {name}: need at least 2 levels")
        specs.append(
            ColumnSpec(name, ColumnKind.ORDINAL, tuple(float(v) for v in range(1, levels + 1)))
        )
    return specs


def _em_config(res: _Resolver) -> EmConfig:
    return EmConfig(
        max_iters=res.get("max_iter", 50, int),
        rel_tol=res.get("tol", 1e-3, float),
        ridge=res.get("ridge", 1e-6, float),
        backend=res.get("backend", None, str),
    )


def _layout(res: _Resolver) -> Layout:
    name = res.get("layout", "patient", str)
    try:
        return Layout(name)
    except ValueError:
        raise ConfigError(
            f"--layout must be 'patient' or 'timewise', got {name!r}"
        ) from None


def _synthetic_spec(res: _Resolver) -> SyntheticSpec:
    families = _parse_methods(res.get("marginals", "gaussian"))
    return SyntheticSpec(
        n_samples=res.get("n_samples", None, int, required=True),
        n_steps=res.get("n_steps", None, int, required=True),
        n_features=res.get("n_features", None, int, required=True),
        structure=res.get("structure", "ar1", str),
        rho=res.get("rho", 0.8, float),
        block_size=res.get("block_size", 2, int),
        marginal_families=families if len(families) > 1 else families[0],
        ordinal_levels=res.get("ordinal_levels", 5, int),
        missing_rate=res.get("missing_rate", 0.0, float),
        seed=res.get("seed", 0, int),
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    res = _Resolver(args)
    input_path = res.get("input", required=True)
    model_path = res.get("model", required=True)
    diagnostics_path = res.get("diagnostics")
    specs = _parse_ordinal(res.get("ordinal"))
    config = _em_config(res)
    layout = _layout(res)
    threads = res.get("threads", None, int)
    res.get("seed", 0, int)  # recorded for replay; fitting is deterministic

    x = load_csv_long(input_path, specs)
    with _thread_limit(threads):
        model = fit(x, specs=specs, config=config, layout=layout)
    save_model(model, model_path, run_config=res.resolved)
    if diagnostics_path:
        doc = model.diagnostics.to_dict()
        doc["resolved_config"] = res.resolved
        with open(diagnostics_path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
    _log(
        f"fit: {x.n_samples} samples, {x.n_steps} steps, {x.n_features} features; "
        f"EM ran {model.diagnostics.iterations_run} iterations "
        f"(converged={model.diagnostics.converged}); model -> {model_path}"
    )
    return 0


def cmd_impute(args) -> int:
    res = _Resolver(args)
    model_path = res.get("model", required=True)
    input_path = res.get("input", required=True)
    output_path = res.get("output", required=True)
    threads = res.get("threads", None, int)

    model = load_model(model_path)
    x = load_csv_long(input_path, n_steps=model.n_steps)
    with _thread_limit(threads):
        result = impute(model, x)
    write_csv_long(result.completed, output_path)
    with open(str(output_path) + ".run.json", "w", encoding="utf-8") as fh:
        json.dump({"resolved_config": res.resolved}, fh, indent=2, sort_keys=True)
    _log(f"impute: filled {len(result.filled_positions)} cells -> {output_path}")
    return 0


def cmd_benchmark(args) -> int:
    res = _Resolver(args)
    methods = _parse_methods(res.get("methods", "tgc,locf,mean"))
    rates = _parse_rates(res.get("rates", "0.2,0.4,0.6,0.8"))
    reps = res.get("reps", 3, int)
    seed = res.get("seed", 0, int)
    config = _em_config(res)
    threads = res.get("threads", None, int)
    output_path = res.get("output")
    csv_path = res.get("csv")
    reference = res.get("reference")
    metrics_space = res.get("metrics_space", "standardized", str)
    synthetic = bool(res.get("synthetic", False))
    specs = _parse_ordinal(res.get("ordinal"))

    if synthetic:
        data = _synthetic_spec(res)
        if not specs:
            specs = None  # use the generator's own declarations
    else:
        input_path = res.get("input", required=True)
        data = load_csv_long(input_path, specs)

    with _thread_limit(threads):
        report = run_benchmark(
            data,
            methods=methods,
            rates=rates,
            reps=reps,
            base_seed=seed,
            em_config=config,
            specs=specs,
            metrics_space=metrics_space,
        )
    # where the report is written has no bearing on its content; keeping the
    # output paths out preserves byte-identical replay for a fixed seed
    report.metadata["resolved_config"] = {
        k: v for k, v in res.resolved.items() if k not in ("output", "csv")
    }
    if reference:
        report.metadata["reference_comparison"] = compare_to_reference(report, reference)
    for line in report.summary_lines():
        print(line)
    if reference:
        print(f"deviation from reference {reference!r}: "
              + json.dumps(report.metadata["reference_comparison"]["delta"]))
    if output_path:
        with open(output_path, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
        _log(f"benchmark report -> {output_path}")
    if csv_path:
        report.to_csv(csv_path)
        _log(f"benchmark CSV -> {csv_path}")
    return 0


def cmd_synth(args) -> int:
    res = _Resolver(args)
    prefix = res.get("output_prefix", required=True)
    spec = _synthetic_spec(res)
    observed, truth, sigma = generate_synthetic(spec)
    data_path = f"{prefix}.data.csv"
    truth_path = f"{prefix}.truth.csv"
    sigma_path = f"{prefix}.sigma.json"
    write_csv_long(observed, data_path)
    write_csv_long(truth, truth_path)
    with open(sigma_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "version": 1,
                "m": sigma.shape[0],
                "sigma": sigma.tolist(),
                "resolved_config": res.resolved,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
    _log(f"synth: wrote {data_path}, {truth_path}, {sigma_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(sp):
    sp.add_argument("--config", help="flat JSON file of flag defaults")
    sp.add_argument("--threads", type=int, help="linear-algebra thread cap")
    sp.add_argument("--seed", type=int, help="base RNG seed")
    sp.add_argument(
        "--backend",
        choices=available_backends(),
        help=f"kernel backend (default: {default_backend_name()})",
    )


def _add_em(sp):
    sp.add_argument("--max-iter", dest="max_iter", type=int, help="EM iteration cap")
    sp.add_argument("--tol", type=float, help="relative Frobenius stop threshold")
    sp.add_argument("--ridge", type=float, help="diagonal regularizer per M-step")


def _add_synth_spec(sp):
    sp.add_argument("--n-samples", dest="n_samples", type=int)
    sp.add_argument("--n-steps", dest="n_steps", type=int)
    sp.add_argument("--n-features", dest="n_features", type=int)
    sp.add_argument("--structure", choices=("ar1", "block", "identity"))
    sp.add_argument("--rho", type=float)
    sp.add_argument("--block-size", dest="block_size", type=int)
    sp.add_argument(
        "--marginals",
        help="marginal family per feature (comma list) or one family for all",
    )
    sp.add_argument("--ordinal-levels", dest="ordinal_levels", type=int)
    sp.add_argument("--missing-rate", dest="missing_rate", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tgcimpute",
        description="Gaussian-copula imputation for multivariate time series",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a model on a long-format CSV")
    p_fit.add_argument("--input", help="training CSV (sample_id,time_index,features...)")
    p_fit.add_argument("--model", help="output model bundle path")
    p_fit.add_argument("--diagnostics", help="optional EM diagnostics JSON path")
    p_fit.add_argument("--layout", choices=("patient", "timewise"))
    p_fit.add_argument("--ordinal", help="ordinal declarations, e.g. gcs:15,vent:2")
    _add_em(p_fit)
    _add_common(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_imp = sub.add_parser("impute", help="complete a CSV using a fitted model")
    p_imp.add_argument("--model", help="model bundle from 'fit'")
    p_imp.add_argument("--input", help="CSV to complete")
    p_imp.add_argument("--output", help="completed CSV path")
    _add_common(p_imp)
    p_imp.set_defaults(func=cmd_impute)

    p_bench = sub.add_parser("benchmark", help="run the masking protocol")
    p_bench.add_argument("--input", help="dataset CSV (omit with --synthetic)")
    p_bench.add_argument("--synthetic", action="store_true", default=None,
                         help="benchmark on generated data instead of a CSV")
    p_bench.add_argument("--methods", help="comma list from tgc,tgc_u,locf,mean")
    p_bench.add_argument("--rates", help="comma list of masking fractions in (0,1)")
    p_bench.add_argument("--reps", type=int, help="repetitions per cell")
    p_bench.add_argument("--output", help="report JSON path")
    p_bench.add_argument("--csv", help="flattened report CSV path")
    p_bench.add_argument("--reference",
                         help="compare against a stored reference row "
                              "(mimic, physionet2012, physionet2019)")
    p_bench.add_argument("--metrics-space", dest="metrics_space",
                         choices=("standardized", "raw"))
    p_bench.add_argument("--ordinal", help="ordinal declarations, e.g. gcs:15")
    p_bench.add_argument("--layout", choices=("patient", "timewise"))
    _add_em(p_bench)
    _add_synth_spec(p_bench)
    _add_common(p_bench)
    p_bench.set_defaults(func=cmd_benchmark)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--output-prefix", dest="output_prefix",
                         help="writes PREFIX.data.csv, PREFIX.truth.csv, PREFIX.sigma.json")
    _add_synth_spec(p_synth)
    _add_common(p_synth)
    p_synth.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        _log(f"error: {exc}")
        return 2
    except NumericalError as exc:
        _log(f"numerical failure: {exc}")
        return 1
    except TgcImputeError as exc:
        _log(f"internal failure: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
