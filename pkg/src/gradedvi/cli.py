"""Command-line front door: simulate datasets, fit estimators, evaluate
recovery, compute heldout likelihood, and run scree analyses.

All commands are driven by JSON config files whose flat keys are mirrored as
flags (flags win).  Every output directory gets a manifest recording the
config hash, seeds, input digests and artifact paths.  Exit codes: 0 success,
2 input/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .align import align_correlations, align_to_reference
from .estimators import heldout_loglik
from .fitting import ConfigError, FitConfig, FitResult, fit, split_holdout
from .grm import GrmParams, GrmValues, ResponseMatrix
from .nets import BlackBoxEncoder, Discriminator, GaussianEncoder
from .optim import NumericalError
from .simlab import (
    DesignError,
    SimDesign,
    intercept_stack,
    mse_bias,
    read_responses_csv,
    read_truth_json,
    simulate,
    write_responses_csv,
    write_truth_json,
)

SCHEMA_VERSION = 1
EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _dump_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def write_manifest(out_dir: Path, command: str, config_doc: dict,
                   seeds: dict, inputs: list[Path], artifacts: list[Path],
                   wall_time: float) -> Path:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config_hash": _sha256_text(json.dumps(config_doc, sort_keys=True)),
        "config": config_doc,
        "seeds": seeds,
        "input_digests": {str(p): _sha256_file(Path(p)) for p in inputs},
        "artifacts": [str(p) for p in artifacts],
        "wall_time_seconds": wall_time,
    }
    path = out_dir / "manifest.json"
    _dump_json(path, doc)
    return path


def load_fit_bundle(path: Path):
    """FitResult JSON -> (params, encoder, disc, config)."""
    with open(path) as fh:
        doc = json.load(fh)
    params = GrmParams.from_dict(doc["params"])
    enc_doc = doc["networks"]["encoder"]
    if enc_doc["kind"] == "gaussian":
        encoder = GaussianEncoder.from_dict(enc_doc)
    else:
        encoder = BlackBoxEncoder.from_dict(enc_doc)
    disc_doc = doc["networks"]["discriminator"]
    disc = Discriminator.from_dict(disc_doc) if disc_doc is not None else None
    config = FitConfig.from_dict(doc["config"])
    return params, encoder, disc, config, doc


# ---------------------------------------------------------------------------
# simulate


def _simulate_one(args):
    design_doc, rep, out_dir = args
    design = SimDesign.from_dict(design_doc)
    design.seed = design.seed + rep
    truth = simulate(design)
    resp_path = Path(out_dir) / f"responses_rep{rep:03d}.csv"
    truth_path = Path(out_dir) / f"truth_rep{rep:03d}.json"
    write_responses_csv(resp_path, truth.responses)
    write_truth_json(truth_path, truth)
    return [str(resp_path), str(truth_path)]


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    try:
        with open(args.design) as fh:
            doc = json.load(fh)
        n_reps = int(doc.pop("n_replications", 1))
        design = SimDesign.from_dict(doc)
        design.validate()
    except (OSError, json.JSONDecodeError, DesignError, TypeError, ValueError) as err:
        print(f"error: invalid design: {err}", file=sys.stderr)
        return EXIT_INPUT
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(doc | {"seed": design.seed}, rep, str(out_dir)) for rep in range(n_reps)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            produced = list(pool.map(_simulate_one, jobs))
    else:
        produced = [_simulate_one(j) for j in jobs]
    artifacts = [p for pair in produced for p in pair]
    write_manifest(out_dir, "simulate", doc | {"n_replications": n_reps},
                   {"master": design.seed}, [Path(args.design)],
                   [Path(p) for p in artifacts], time.perf_counter() - t0)
    print(f"wrote {n_reps} replication(s) to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit


def _load_config_with_overrides(args) -> FitConfig:
    doc = {}
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
    for field_name in FitConfig.__dataclass_fields__:
        value = getattr(args, field_name, None)
        if value is not None:
            doc[field_name] = value
    config = FitConfig.from_dict(doc)
    config.validate()
    return config


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """Mirror every flat FitConfig key as an optional override flag."""
    int_fields = {"n_factors", "R", "S", "batch_size", "clr_step_size", "window",
                  "patience", "max_iterations", "noise_dim", "seed", "r_eval"}
    float_fields = {"base_lr", "disc_base_lr", "max_lr_factor", "min_delta",
                    "weight_decay", "beta1", "beta2", "eps_stab", "holdout_fraction"}
    bool_fields = {"dreg", "adaptive_contrast", "loading_positivity"}
    list_fields = {"encoder_hidden", "disc_hidden"}
    for name in FitConfig.__dataclass_fields__:
        flag = "--" + name.replace("_", "-")
        if name in int_fields:
            parser.add_argument(flag, type=int, default=None)
        elif name in float_fields:
            parser.add_argument(flag, type=float, default=None)
        elif name in bool_fields:
            parser.add_argument(flag, type=lambda s: s.lower() in ("1", "true", "yes"),
                                default=None, metavar="BOOL")
        elif name in list_fields:
            parser.add_argument(flag, type=lambda s: [int(v) for v in s.split(",")],
                                default=None, metavar="N,N,...")
        else:
            parser.add_argument(flag, type=str, default=None)


def run_fit(responses_path: Path, config: FitConfig, out_dir: Path,
            command: str = "fit") -> tuple[Path, FitResult]:
    responses = read_responses_csv(responses_path)
    result = fit(responses, config)
    out_dir.mkdir(parents=True, exist_ok=True)
    fit_path = out_dir / "fit.json"
    _dump_json(fit_path, result.to_json_dict())
    diag_path = out_dir / "diagnostics.csv"
    with open(diag_path, "w") as fh:
        fh.write("iteration,batch_iw_elbo,disc_loss,lr_encoder,lr_disc\n")
        tr = result.trace
        for k in range(len(tr["iteration"])):
            fh.write(f'{tr["iteration"][k]},{tr["batch_iw_elbo"][k]!r},'
                     f'{tr["disc_loss"][k]!r},{tr["lr_encoder"][k]!r},{tr["lr_disc"][k]!r}\n')
    write_manifest(out_dir, command, config.to_dict(),
                   {"master": config.seed,
                    "substreams": ["grm-init", "net-init", "noise", "batches", "holdout"]},
                   [responses_path], [fit_path, diag_path], result.wall_time)
    return fit_path, result


def cmd_fit(args) -> int:
    try:
        config = _load_config_with_overrides(args)
        responses_path = Path(args.responses)
        if not responses_path.exists():
            raise OSError(f"no such file: {responses_path}")
    except (OSError, json.JSONDecodeError, ConfigError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    try:
        fit_path, result = run_fit(responses_path, config, Path(args.out))
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as err:
        print(f"error: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"{config.estimator}: {result.status} after {result.iterations} iterations "
          f"({result.wall_time:.1f}s); wrote {fit_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _fit_values(doc: dict) -> GrmValues:
    params = GrmParams.from_dict(doc["params"])
    return params.values()


def cmd_eval(args) -> int:
    fits_dir = Path(args.fits)
    truth_dir = Path(args.truths)
    fit_files = sorted(fits_dir.glob("**/fit*.json"))
    truth_files = sorted(truth_dir.glob("**/truth*.json"))
    if not fit_files or len(fit_files) != len(truth_files):
        print(f"error: cannot pair {len(fit_files)} fit file(s) with "
              f"{len(truth_files)} truth file(s)", file=sys.stderr)
        return EXIT_INPUT
    estimates = []
    truth_values = None
    exploratory = False
    for fit_path, truth_path in zip(fit_files, truth_files):
        try:
            with open(fit_path) as fh:
                doc = json.load(fh)
            values = _fit_values(doc)
            t_values, _ = read_truth_json(truth_path)
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as err:
            print(f"error: {fit_path}: {err}", file=sys.stderr)
            return EXIT_INPUT
        if truth_values is None:
            truth_values = t_values
        if values.loadings.shape != truth_values.loadings.shape:
            print(f"error: shape mismatch: fit {values.loadings.shape} vs "
                  f"truth {truth_values.loadings.shape}", file=sys.stderr)
            return EXIT_INPUT
        exploratory = doc["config"].get("loading_structure", "exploratory") == "exploratory"
        if exploratory and values.n_factors >= 2:
            rep = align_to_reference(values.loadings, truth_values.loadings,
                                     rotate=True, seed=doc["config"].get("seed", 0))
            corr = align_correlations(values.factor_corr, rep.amap)
            values = GrmValues(loadings=rep.aligned_loadings,
                               intercepts=values.intercepts, factor_corr=corr)
        estimates.append(values)
    report = mse_bias(estimates, truth_values)
    out_doc = {"schema_version": SCHEMA_VERSION,
               "n_replications": len(estimates),
               "aligned": exploratory,
               "blocks": {k: v.to_dict() for k, v in report.items()}}
    _dump_json(Path(args.out), out_doc)
    print(f"{'block':<14}{'MSE':>12}{'bias':>12}")
    for name, block in report.items():
        print(f"{name:<14}{block.mse:>12.5f}{block.bias:>12.5f}")
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# heldout


def cmd_heldout(args) -> int:
    try:
        params, encoder, disc, config, doc = load_fit_bundle(Path(args.fit))
        responses = read_responses_csv(Path(args.responses))
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    if args.ids:
        try:
            ids = np.asarray(
                [int(line) for line in Path(args.ids).read_text().split()], dtype=np.int64)
        except (OSError, ValueError) as err:
            print(f"error: bad ids file: {err}", file=sys.stderr)
            return EXIT_INPUT
    else:
        fraction = args.fraction if args.fraction is not None else config.holdout_fraction
        if not 0.0 < fraction < 1.0:
            print(f"error: fraction must be in (0, 1), got {fraction}", file=sys.stderr)
            return EXIT_INPUT
        _, ids = split_holdout(responses.n_respondents, fraction, config.seed)
    r_eval = args.r_eval if args.r_eval is not None else config.r_eval
    from .rngutil import substream
    rng = substream(config.seed, "heldout-eval")
    report = heldout_loglik(responses.subset(ids), params, encoder, rng,
                            R_eval=r_eval, disc=disc,
                            adaptive_contrast=bool(config.estimator == "IWAVB"
                                                   or (config.estimator == "AVB"
                                                       and config.adaptive_contrast)))
    out_doc = {"schema_version": SCHEMA_VERSION,
               "estimator": config.estimator,
               "n_holdout": report.n_respondents,
               "holdout_ids": ids.tolist(),
               "r_eval": report.r_eval,
               "total_loglik": report.total,
               "per_respondent_mean": report.per_respondent_mean,
               "surrogate_density": report.surrogate_density,
               "high_variance": report.r_eval < 64}
    if args.out:
        _dump_json(Path(args.out), out_doc)
    flag = " [density surrogate]" if report.surrogate_density else ""
    hv = " [high-variance: tiny R_eval]" if out_doc["high_variance"] else ""
    print(f"heldout |Omega|={report.n_respondents} R={report.r_eval}: "
          f"total={report.total:.2f} mean/respondent={report.per_respondent_mean:.4f}{flag}{hv}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# scree


def _scree_one(packed):
    responses_path, config_doc, p, out_dir = packed
    config = FitConfig.from_dict(config_doc | {"n_factors": p})
    responses = read_responses_csv(Path(responses_path))
    train_idx, hold_idx = split_holdout(responses.n_respondents,
                                        config.holdout_fraction, config.seed)
    result = fit(responses.subset(train_idx), config)
    from .rngutil import substream
    rng = substream(config.seed, "heldout-eval")
    report = heldout_loglik(
        responses.subset(hold_idx), result.params, result.encoder, rng,
        R_eval=config.r_eval, disc=result.disc,
        adaptive_contrast=result.config.estimator_config().adaptive_contrast
        if result.disc is not None else False)
    fit_dir = Path(out_dir) / f"P{p}"
    fit_dir.mkdir(parents=True, exist_ok=True)
    _dump_json(fit_dir / "fit.json", result.to_json_dict())
    return p, report.total


def cmd_scree(args) -> int:
    try:
        p_list = [int(v) for v in args.factors.split(",") if v]
        if not p_list:
            raise ValueError("empty factor list")
        with open(args.config) as fh:
            config_doc = json.load(fh)
        FitConfig.from_dict(dict(config_doc)).validate()
        if not Path(args.responses).exists():
            raise OSError(f"no such file: {args.responses}")
    except (OSError, json.JSONDecodeError, ConfigError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    jobs = [(args.responses, config_doc, p, str(out_dir)) for p in p_list]
    rows = []
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = {pool.submit(_scree_one, j): j[2] for j in jobs}
            for fut, p in futures.items():
                try:
                    rows.append(fut.result())
                except Exception as err:  # continue other P values
                    print(f"warning: P={p} failed: {err}", file=sys.stderr)
    else:
        for j in jobs:
            try:
                rows.append(_scree_one(j))
            except Exception as err:
                print(f"warning: P={j[2]} failed: {err}", file=sys.stderr)
    rows.sort()
    csv_path = out_dir / "scree.csv"
    with open(csv_path, "w") as fh:
        fh.write("P,heldout_loglik\n")
        for p, ll in rows:
            fh.write(f"{p},{ll!r}\n")
    write_manifest(out_dir, "scree", {"config": config_doc, "factors": p_list},
                   {"master": config_doc.get("seed", 0)},
                   [Path(args.responses), Path(args.config)],
                   [csv_path], time.perf_counter() - t0)
    print(f"wrote {csv_path} ({len(rows)}/{len(p_list)} fits succeeded)")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gradedvi",
        description="Amortized variational estimation for graded response models")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate datasets from a design JSON")
    p_sim.add_argument("--design", required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--jobs", type=int, default=1)
    p_sim.set_defaults(func=cmd_simulate)

    p_fit = sub.add_parser("fit", help="fit one estimator to a responses CSV")
    p_fit.add_argument("--config", default=None)
    p_fit.add_argument("--responses", required=True)
    p_fit.add_argument("--out", required=True)
    _add_config_flags(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_eval = sub.add_parser("eval", help="recovery metrics for fits vs truths")
    p_eval.add_argument("--fits", required=True)
    p_eval.add_argument("--truths", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_held = sub.add_parser("heldout", help="importance-sampled heldout log-likelihood")
    p_held.add_argument("--fit", required=True)
    p_held.add_argument("--responses", required=True)
    p_held.add_argument("--fraction", type=float, default=None)
    p_held.add_argument("--ids", default=None)
    p_held.add_argument("--r-eval", dest="r_eval", type=int, default=None)
    p_held.add_argument("--out", default=None)
    p_held.set_defaults(func=cmd_heldout)

    p_scree = sub.add_parser("scree", help="heldout log-likelihood across factor counts")
    p_scree.add_argument("--responses", required=True)
    p_scree.add_argument("--config", required=True)
    p_scree.add_argument("--factors", required=True, help="comma-separated P values")
    p_scree.add_argument("--out", required=True)
    p_scree.add_argument("--jobs", type=int, default=1)
    p_scree.set_defaults(func=cmd_scree)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
