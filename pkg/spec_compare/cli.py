"""
Command-line front end.

    python -m spec_compare compare    --emb-a a.csv --emb-b b.csv --out report.json
    python -m spec_compare diff       --emb-a a.csv --emb-b b.csv
    python -m spec_compare align-demo --inputs x.csv --reference f.csv --out trajectory.csv
    python -m spec_compare diagnose   theorem1 --emb-a a.csv --emb-b b.csv

stdout carries results only; logs go to stderr.
Exit codes: 0 ok, 2 invalid input, 3 numerical failure, 4 alignment
divergence, 5 failed certificate.
"""

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import colorlog
import numpy as np
import pandas as pd

from spec_compare.config import AlignConfig, SpecConfig, load_config_file, log_level_from_env
from spec_compare.diagnostics import (
    corollary1_check,
    label_agreement,
    rff_residual,
    theorem1_certificate,
    validate_clusters,
)
from spec_compare.diff_align import align_descent, spec_diff, write_trajectory
from spec_compare.errors import AlignDivergenceError, NumericalError, StageError, ValidationError
from spec_compare.io_model import (
    load_embedding_set,
    load_labels,
    pair,
    read_matrix_binary,
    render_report,
    report_payload,
    write_report,
)
from spec_compare.kernels import exact_gaussian_kernel_matrix, kernel_matrix
from spec_compare.spec_core import load_pair, resolve_feature_maps, run_spec_paired

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_DIVERGENCE = 4
EXIT_CERTIFICATE = 5

SPEC_FIELDS = {f.name for f in fields(SpecConfig)}
ALIGN_FIELDS = {f.name for f in fields(AlignConfig)}


def setup_logging(verbose: bool = False) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(colorlog.ColoredFormatter(
        "%(log_color)s%(levelname)-8s%(reset)s %(name)s: %(message)s",
        log_colors={"DEBUG": "cyan", "INFO": "green", "WARNING": "yellow", "ERROR": "red", "CRITICAL": "red,bg_white"},
    ))
    root = logging.getLogger("spec_compare")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else log_level_from_env())
    root.propagate = False


def exit_code_for(error: BaseException) -> int:
    cause = error.cause if isinstance(error, StageError) else error
    if isinstance(cause, AlignDivergenceError):
        return EXIT_DIVERGENCE
    if isinstance(cause, (ValidationError, OSError)):
        return EXIT_VALIDATION
    if isinstance(cause, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_ERROR


def _fail(error: BaseException, args) -> int:
    logger.error(f"ERROR: {error}")
    if getattr(args, "verbose", False):
        logger.exception("traceback")
    return exit_code_for(error)


def _flags(args, names) -> Dict[str, Any]:
    return {k: v for k, v in vars(args).items() if k in names and v is not None}


def _spec_config(args) -> SpecConfig:
    return SpecConfig.resolve(_flags(args, SPEC_FIELDS), getattr(args, "config", None))


def _emit(payload: Dict[str, Any], out: Optional[str]) -> None:
    text = json.dumps(payload, indent=2)
    if out:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n", encoding="utf-8")
        logger.info(f"✓ Saved {path}")
    else:
        print(text)


# --------------------------------------------------------------------------
# Handlers
# --------------------------------------------------------------------------

def cmd_compare(args) -> int:
    """
    Full SPEC run plus optional label agreement and k-means validation.

    Expected args: emb_a, emb_b, kernel_a/b, sigma_a/b, rff_dim, top_k, top_r,
    seed, out, format, chunk_size, strategy, labels, config
    """
    try:
        config = _spec_config(args)
        paired = load_pair(config)
        result = run_spec_paired(paired, config)

        if config.labels:
            labels = load_labels(config.labels, ids=paired.ids)
            result.diagnostics["labels"] = label_agreement(result, labels)
        if config.validate_runs > 0:
            if result.side("A"):
                validation = validate_clusters(result, paired, k=config.validate_k, runs=config.validate_runs,
                                               seed=config.seed, progress=config.progress)
                result.diagnostics["validation"] = validation.to_dict()
            else:
                logger.warning("SKIPPING: cluster validation, no side-A clusters")

        if config.out:
            write_report(result, config.out, fmt=config.format)
        else:
            sys.stdout.write(render_report(report_payload(result), config.format))
        return EXIT_OK
    except Exception as e:
        return _fail(e, args)


def cmd_diff(args) -> int:
    """Print SPEC-diff as a single decimal (or the full result with --json)."""
    try:
        config = _spec_config(args)
        paired = load_pair(config)
        map1, map2, _ = resolve_feature_maps(paired, config)
        result = spec_diff(paired, map1, map2, chunk_size=config.chunk_size, seed=config.seed)
        if result.degenerate:
            logger.warning(f"top eigenvalue is degenerate (|lambda_2|={result.second:.6g}), gradient undefined")
        if args.json:
            print(json.dumps(result.to_dict(), indent=2))
        else:
            print(f"{result.rho:.12f}")
        return EXIT_OK
    except Exception as e:
        return _fail(e, args)


def _load_matrix(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"matrix file not found: {path}")
    if path.suffix.lower() == ".csv":
        return pd.read_csv(path, header=None).to_numpy(dtype=np.float64)
    return read_matrix_binary(path)


def cmd_align_demo(args) -> int:
    """
    Gradient descent of a linear embedding W x towards reference features.

    Expected args: inputs, reference, out (trajectory CSV), beta, step, steps,
    seed, init_weights, early_stop_ratio, batch_size, weight_decay, config
    """
    state = None
    try:
        values = {}
        if args.config:
            values.update({k: v for k, v in load_config_file(args.config).items() if k in ALIGN_FIELDS})
        values.update(_flags(args, ALIGN_FIELDS))
        if args.steps is not None:
            values["iterations"] = args.steps
        config = AlignConfig.from_dict(values)

        inputs = load_embedding_set(args.inputs, header=args.header or "auto")
        reference = load_embedding_set(args.reference, header=args.header or "auto")
        paired = pair(inputs, reference)
        W0 = _load_matrix(args.init_weights) if args.init_weights else None

        try:
            state = align_descent(paired.a.data, paired.b.data, config, W0=W0)
        except AlignDivergenceError as e:
            state = e.state
            raise
        finally:
            if state is not None:
                write_trajectory(state, args.out)

        print(f"{state.spec_diff:.12f}")
        return EXIT_OK
    except Exception as e:
        return _fail(e, args)


def _kernels_for_certificate(paired, config: SpecConfig):
    if paired.n > config.direct_cap:
        raise ValidationError(f"n={paired.n} exceeds the direct-path cap of {config.direct_cap}")
    map1, map2, _ = resolve_feature_maps(paired, config)
    kernels = []
    for fmap, emb in ((map1, paired.a), (map2, paired.b)):
        if fmap.spec.kind == "gaussian_rff":
            kernels.append(exact_gaussian_kernel_matrix(emb.data, fmap.spec.sigma))
        else:
            kernels.append(kernel_matrix(emb, fmap))
    return kernels


def _index_set(args, paired, config: SpecConfig) -> List[int]:
    if args.index_set:
        path = Path(args.index_set)
        if not path.exists():
            raise ValidationError(f"index set file not found: {path}")
        return [int(line) for line in path.read_text(encoding="utf-8").split()]
    result = run_spec_paired(paired, config)
    top = [c for c in result.side("A") if c.rank == 1]
    if not top:
        raise ValidationError("no side-A cluster to certify; pass --index-set")
    return list(top[0].indices)


def cmd_diagnose(args) -> int:
    """
    Certificates and validation, as one JSON report.

    Expected args: kind in {theorem1, corollary1, rff-residual, validate} plus
    the compare flags; theorem1/corollary1 take --index-set (default: top
    side-A cluster), rff-residual takes --delta.
    """
    try:
        config = _spec_config(args)
        paired = load_pair(config)
        failed = False

        if args.kind in ("theorem1", "corollary1"):
            K1, K2 = _kernels_for_certificate(paired, config)
            index_set = _index_set(args, paired, config)
            if args.kind == "theorem1":
                report = theorem1_certificate(K1, K2, index_set)
                failed = not report.satisfied
            else:
                report = corollary1_check(K1, K2, index_set, eigen_index=args.eigen_index)
                failed = report.applicable and not report.satisfied
        elif args.kind == "rff-residual":
            rbf = replace(config, kernel_a="gaussian_rff", kernel_b="gaussian_rff")
            map1, map2, _ = resolve_feature_maps(paired, rbf)
            report = rff_residual(paired, map1.spec.sigma, map2.spec.sigma, m=config.rff_dim, delta=args.delta,
                                  seed=config.seed, cap=config.direct_cap)
        else:
            result = run_spec_paired(paired, config)
            runs = config.validate_runs or 50
            report = validate_clusters(result, paired, k=config.validate_k, runs=runs, seed=config.seed,
                                       progress=config.progress)

        _emit({"kind": args.kind, "report": report.to_dict(), "config": config.to_dict()}, config.out)
        if failed:
            logger.error(f"{args.kind} certificate failed: this indicates an implementation bug")
            return EXIT_CERTIFICATE
        return EXIT_OK
    except Exception as e:
        return _fail(e, args)


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _common_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", help="JSON or TOML file with flag defaults")
    parent.add_argument("--seed", type=int)
    parent.add_argument("--header", choices=["auto", "yes", "no"], help="CSV header row (default: auto-detect)")
    parent.add_argument("--verbose", action="store_true", help="debug logging and tracebacks")
    return parent


def _data_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--emb-a", dest="emb_a")
    parent.add_argument("--emb-b", dest="emb_b")
    parent.add_argument("--kernel-a", dest="kernel_a", choices=["linear", "cosine", "gaussian_rff"])
    parent.add_argument("--kernel-b", dest="kernel_b", choices=["linear", "cosine", "gaussian_rff"])
    parent.add_argument("--sigma-a", dest="sigma_a", type=float)
    parent.add_argument("--sigma-b", dest="sigma_b", type=float)
    parent.add_argument("--rff-dim", dest="rff_dim", type=int)
    parent.add_argument("--chunk-size", dest="chunk_size", type=int)
    parent.add_argument("--strategy", choices=["symmetric_reduction", "general"])
    parent.add_argument("--top-k", dest="top_k", type=int)
    parent.add_argument("--top-r", dest="top_r", type=int)
    parent.add_argument("--bandwidth-target", dest="bandwidth_target", type=float,
                        help="select missing Gaussian bandwidths so C_psi has this top eigenvalue")
    parent.add_argument("--bandwidth-tol", dest="bandwidth_tol", type=float)
    parent.add_argument("--direct-cap", dest="direct_cap", type=int)
    parent.add_argument("--validate-runs", dest="validate_runs", type=int)
    parent.add_argument("--validate-k", dest="validate_k", type=int)
    parent.add_argument("--out")
    parent.add_argument("--progress", action="store_true", default=None)
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spec_compare", description="Spectral pairwise embedding comparison")
    sub = parser.add_subparsers(dest="command", required=True)
    common, data = _common_parent(), _data_parent()

    compare = sub.add_parser("compare", parents=[common, data], help="cluster differences between two embeddings")
    compare.add_argument("--format", choices=["json", "markdown"])
    compare.add_argument("--labels", help="label file for AMI/NMI agreement")
    compare.set_defaults(handler=cmd_compare)

    diff = sub.add_parser("diff", parents=[common, data], help="SPEC-diff pseudo-distance")
    diff.add_argument("--json", action="store_true")
    diff.set_defaults(handler=cmd_diff)

    align = sub.add_parser("align-demo", parents=[common], help="align a linear embedding to a reference")
    align.add_argument("--inputs", required=True, help="raw input matrix (embedding file)")
    align.add_argument("--reference", required=True, help="reference feature matrix (embedding file)")
    align.add_argument("--out", required=True, help="trajectory CSV")
    align.add_argument("--beta", type=float)
    align.add_argument("--step", type=float)
    align.add_argument("--steps", type=int)
    align.add_argument("--init-weights", dest="init_weights", help="initial W (CSV or SPECEMB1)")
    align.add_argument("--init-scale", dest="init_scale", type=float)
    align.add_argument("--early-stop-ratio", dest="early_stop_ratio", type=float)
    align.add_argument("--batch-size", dest="batch_size", type=int)
    align.add_argument("--weight-decay", dest="weight_decay", type=float)
    align.set_defaults(handler=cmd_align_demo)

    diagnose = sub.add_parser("diagnose", parents=[common, data], help="certificates and cluster validation")
    diagnose.add_argument("kind", choices=["theorem1", "corollary1", "rff-residual", "validate"])
    diagnose.add_argument("--index-set", dest="index_set", help="file of sample indices (default: top side-A cluster)")
    diagnose.add_argument("--eigen-index", dest="eigen_index", type=int, default=0)
    diagnose.add_argument("--delta", type=float, default=0.05)
    diagnose.set_defaults(handler=cmd_diagnose)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    return args.handler(args)
