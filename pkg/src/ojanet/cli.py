"""Command-line entry point: ``ojanet {train,encode,reconstruct,eval}``.

Every subcommand prints one JSON object on stdout; progress goes to stderr.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import DimensionError, OjaNetError, TrainConfig
from .data import (
    ParseError,
    format_number,
    generate_synth,
    load_csv,
    load_idx,
    load_model,
    normalize,
    save_model,
)
from .deep import decompose_batch, reconstruct_codes, train_deep
from .grad import gradcheck, refine_joint
from .metrics import (
    cluster_purity,
    energy_per_level,
    reconstruction_error,
    residual_shares_by_level,
    summary_json,
    write_energy_csv,
    write_epoch_csv,
)

log = logging.getLogger("ojanet")

RULE_NAMES = {"batch": "batch_pca", "lambda1": "online_lambda1", "lambda2": "online_lambda2", "oja": "online_oja"}


class UsageError(Exception):
    pass


def _add_input(p: argparse.ArgumentParser, required: bool = True) -> None:
    src = p.add_mutually_exclusive_group(required=required)
    src.add_argument("--data", type=Path, help="CSV or IDX image file")
    src.add_argument("--synth", help="synthetic data, e.g. lines:n=1000,dim=8,lines=4 or sphere:n=500,dim=3")
    p.add_argument("--format", choices=("auto", "csv", "idx"), default="auto", help="input format for --data")
    p.add_argument("--skip-header", action="store_true", help="skip the first CSV line")
    p.add_argument("--normalize", choices=("none", "unit_norm", "center"), default="none")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ojanet", description="Deep residual Oja network toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="learn a model and write it to --out")
    _add_input(t)
    width = t.add_mutually_exclusive_group(required=True)
    width.add_argument("--k", type=int, help="atoms per layer")
    width.add_argument("--increase-factor", type=float, help="atoms per layer = round(F * D)")
    t.add_argument("--depth", type=int, default=1)
    t.add_argument("--rule", choices=sorted(RULE_NAMES), default="batch")
    t.add_argument("--gamma", type=float, help="Oja learning rate (rule oja only, default 0.01)")
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--tol", type=float, default=1e-10, help="stop when the relative loss change drops below this")
    t.add_argument("--refine-epochs", type=int, default=0, help="joint gradient refinement after greedy training")
    t.add_argument("--refine-lr", type=float, default=0.1)
    t.add_argument("--out", type=Path, required=True, help="model file to write")
    t.add_argument("--metrics", type=Path, help="per-epoch loss CSV")

    e = sub.add_parser("encode", help="write per-layer (index, coefficient) codes as CSV")
    e.add_argument("--model", type=Path, required=True)
    _add_input(e)
    e.add_argument("--out", type=Path, required=True)

    r = sub.add_parser("reconstruct", help="rebuild vectors from codes")
    r.add_argument("--model", type=Path, required=True)
    r.add_argument("--codes", type=Path, required=True)
    r.add_argument("--out", type=Path, required=True)

    v = sub.add_parser("eval", help="reconstruction error and energy per level")
    v.add_argument("--model", type=Path, required=True)
    _add_input(v)
    v.add_argument("--energy", type=Path, help="energy-per-level CSV")
    v.add_argument("--gradcheck", action="store_true", help="compare gradients with finite differences")
    v.add_argument("--gradcheck-samples", type=int, default=10)
    return parser


def _load_input(args, allow_empty: bool = False):
    labels = None
    if args.synth is not None:
        try:
            X, meta, labels = generate_synth(args.synth, args.seed)
        except ValueError as e:
            raise UsageError(f"--synth: {e}") from None
    else:
        fmt = args.format
        if fmt == "auto":
            fmt = "csv" if args.data.suffix.lower() in (".csv", ".txt") else "idx"
        if fmt == "idx":
            X, meta = load_idx(args.data)
        else:
            X, meta = load_csv(args.data, skip_header=args.skip_header, allow_empty=allow_empty)
    if X.size:
        X = normalize(X, args.normalize)
    return X, labels


def cmd_train(args) -> dict:
    if args.gamma is not None and args.rule != "oja":
        raise UsageError("--gamma only applies to --rule oja")
    for name in ("depth", "epochs"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name} must be >= 1")
    if args.k is not None and args.k < 1:
        raise UsageError("--k must be >= 1")
    if not args.tol > 0:
        raise UsageError("--tol must be > 0")
    if args.refine_epochs < 0:
        raise UsageError("--refine-epochs must be >= 0")
    if args.seed < 0:
        raise UsageError("--seed must be >= 0")
    X, labels = _load_input(args)
    config = TrainConfig(
        k_per_layer=args.k if args.k is not None else 1,
        increase_factor=args.increase_factor,
        depth=args.depth,
        rule=RULE_NAMES[args.rule],
        learning_rate=args.gamma if args.gamma is not None else 0.01,
        max_epochs=args.epochs,
        tol_rel_loss=args.tol,
        seed=args.seed,
    )
    log.info("training on %d x %d samples, K=%d, depth=%d, rule=%s",
             X.shape[0], X.shape[1], config.effective_k(X.shape[1]), config.depth, config.rule)
    model, report = train_deep(X, config)
    out = {}
    if args.refine_epochs:
        model, refine_losses = refine_joint(X, model, args.refine_lr, args.refine_epochs)
        out["refine_losses"] = refine_losses
    save_model(model, args.out)
    if args.metrics:
        write_epoch_csv(args.metrics, report)
    err = reconstruction_error(X, model)
    out.update(
        command="train",
        model=str(args.out),
        n_samples=X.shape[0],
        dim=X.shape[1],
        depth=model.depth,
        k_per_layer=model.k_per_layer,
        rule=config.rule,
        epochs=report.epochs,
        converged=report.converged,
        untrained_layers=report.untrained_layers,
        final_loss=err.mean,
        level_energy=report.level_energy,
        events=dict(sorted(report.events.items())),
    )
    if labels is not None:
        out["cluster_purity"] = cluster_purity(decompose_batch(X, model).indices[:, 0], labels)
    return out


def _check_dim(X: np.ndarray, dim: int) -> None:
    if X.size and X.shape[1] != dim:
        raise DimensionError(f"data has {X.shape[1]} columns but the model has dim {dim}")


def cmd_encode(args) -> dict:
    model = load_model(args.model)
    X, _ = _load_input(args, allow_empty=True)
    _check_dim(X, model.dim)
    with open(args.out, "w", newline="") as f:
        if X.size:
            b = decompose_batch(X, model)
            for idx, coef in zip(b.indices, b.coefficients):
                f.write(",".join(f"{int(k)},{format_number(c)}" for k, c in zip(idx, coef)) + "\n")
    return {"command": "encode", "n_samples": int(X.shape[0]), "depth": model.depth, "out": str(args.out)}


def read_codes(path, model) -> tuple[np.ndarray, np.ndarray]:
    L = model.depth
    indices, coefs = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 2 * L:
            raise ParseError(f"codes row {lineno}: {len(fields)} fields, expected {2 * L}")
        row_i, row_c = [], []
        for l in range(L):
            tok_k, tok_c = fields[2 * l].strip(), fields[2 * l + 1]
            try:
                k = int(tok_k)
                c = float(tok_c)
            except ValueError:
                raise ParseError(f"codes row {lineno}, layer {l + 1}: bad code {tok_k!r},{tok_c.strip()!r}") from None
            if not 0 <= k < model.layers[l].count:
                raise ParseError(f"codes row {lineno}, layer {l + 1}: atom index {k} out of range")
            row_i.append(k)
            row_c.append(c)
        indices.append(row_i)
        coefs.append(row_c)
    return np.array(indices, dtype=np.intp).reshape(-1, L), np.array(coefs, dtype=np.float64).reshape(-1, L)


def cmd_reconstruct(args) -> dict:
    model = load_model(args.model)
    indices, coefs = read_codes(args.codes, model)
    T = reconstruct_codes(indices, coefs, model)
    with open(args.out, "w", newline="") as f:
        for row in T:
            f.write(",".join(format_number(v) for v in row) + "\n")
    return {"command": "reconstruct", "n_samples": int(T.shape[0]), "out": str(args.out)}


def cmd_eval(args) -> dict:
    model = load_model(args.model)
    X, labels = _load_input(args)
    _check_dim(X, model.dim)
    err = reconstruction_error(X, model)
    shares = energy_per_level(X, model)
    residuals = residual_shares_by_level(X, model)
    if args.energy:
        write_energy_csv(args.energy, shares, residuals)
    out = {
        "command": "eval",
        "n_samples": X.shape[0],
        "reconstruction_error": err.to_dict(),
        "energy_per_level": shares,
        "residual_share": float(residuals[-1]),
    }
    if labels is not None:
        out["cluster_purity"] = cluster_purity(decompose_batch(X, model).indices[:, 0], labels)
    if args.gradcheck:
        n = min(args.gradcheck_samples, X.shape[0])
        errs = [gradcheck(x, model) for x in X[:n] if np.any(x)]
        out["gradcheck_max_rel_err"] = max(errs, default=0.0)
        out["gradcheck_samples"] = len(errs)
    return out


COMMANDS = {"train": cmd_train, "encode": cmd_encode, "reconstruct": cmd_reconstruct, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"ojanet {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (OjaNetError, ValueError, OSError) as e:
        print(f"ojanet {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    print(summary_json(**result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
