"""Command-line interface.

    catlgp simulate   -> dataset CSV + ground-truth sidecar
    catlgp fit        -> model.json, trace.jsonl
    catlgp select-dim -> per-Q ELBO table
    catlgp embed      -> embeddings CSV
    catlgp density    -> density grid CSV
    catlgp error      -> train error JSON
    catlgp plot       -> SVG

Every command also writes a JSON run manifest. Outputs are staged in memory
and only written, each atomically, once the command has succeeded.

Exit codes: 0 success, 2 bad input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data_io import (
    DEFAULT_MISSING,
    atomic_write,
    dataset_to_csv,
    density_csv,
    embeddings_csv,
    fmt,
    generate_table1_like,
    generic_schema,
    latent_density,
    load_csv,
    load_model,
    model_to_json,
    read_density,
    read_embeddings,
    trace_jsonl,
)
from .errors import CatLGPError, InputError, InvalidFlag, NumericalError
from .model import ModelConfig, default_truth_kernels, forward_simulate, make_two_cluster_inputs
from .plotting import density_svg, scatter_svg
from .training import (
    effective_dims,
    error_from_probs,
    evaluate_elbo,
    fit_with_restarts,
    majority_baseline_error,
    predictive_probs,
    select_latent_dim,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3

log = logging.getLogger("catlgp")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _positive_int(s):
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{s!r} is not an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(s):
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _int_list(s):
    try:
        out = [int(t) for t in s.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {s!r}") from None
    if not out or any(v < 1 for v in out):
        raise argparse.ArgumentTypeError("need at least one positive integer")
    return out


def _dims(s):
    try:
        out = tuple(int(t) for t in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected i,j, got {s!r}") from None
    if len(out) != 2:
        raise argparse.ArgumentTypeError(f"expected two dimension indices, got {s!r}")
    return out


def _add_fit_flags(p):
    p.add_argument("--data", required=True, help="categorical CSV with a header row")
    p.add_argument("--missing-token", action="append", default=None,
                   help="cell value meaning 'missing' (repeatable; default: empty cell and NA)")
    p.add_argument("--m", type=_positive_int, default=ModelConfig.n_inducing, help="inducing points")
    p.add_argument("--iters", type=_nonneg_int, default=ModelConfig.max_iters, help="iteration budget")
    p.add_argument("--mc-train", type=_positive_int, default=ModelConfig.mc_samples_train,
                   help="MC samples per training step")
    p.add_argument("--mc-eval", type=_positive_int, default=ModelConfig.mc_samples_eval,
                   help="MC samples for reported ELBOs and predictions")
    p.add_argument("--step-size", type=float, default=ModelConfig.step_size, help="Adam step size")
    p.add_argument("--tol", type=float, default=ModelConfig.tol,
                   help="relative change of the windowed ELBO that stops training (0 disables)")
    p.add_argument("--warmup", type=_nonneg_int, default=ModelConfig.warmup_iters,
                   help="initial iterations with q(X) held fixed")
    p.add_argument("--prior-var", type=float, default=ModelConfig.prior_var_x,
                   help="prior variance of the latent inputs")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--restarts", type=_positive_int, default=1, help="independent fits; best ELBO kept")
    p.add_argument("--freeze-z", action="store_true", help="keep inducing inputs at their initial values")
    p.add_argument("--out-dir", required=True, help="output directory")


def build_parser():
    fmt_cls = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="catlgp", description="Categorical latent Gaussian process toolkit.",
                     formatter_class=fmt_cls)
    parser.add_argument("--version", action="version", version=f"catlgp {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic dataset", formatter_class=fmt_cls)
    p.add_argument("--n", type=int, default=100, help="observations")
    p.add_argument("--d", type=int, default=10, help="variables (two-gaussian only)")
    p.add_argument("--k", type=int, default=2, help="categories per variable (two-gaussian only)")
    p.add_argument("--clusters", choices=("two-gaussian", "table1"), default="two-gaussian",
                   help="latent structure / schema")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", required=True, help="dataset CSV path; sidecar goes to <stem>.truth.csv")

    p = sub.add_parser("fit", help="fit a model", formatter_class=fmt_cls)
    p.add_argument("--q", type=_positive_int, default=ModelConfig.latent_dim, help="latent dimension")
    _add_fit_flags(p)

    p = sub.add_parser("select-dim", help="compare maximized ELBOs over latent dimensions",
                       formatter_class=fmt_cls)
    p.add_argument("--q-candidates", type=_int_list, required=True, help="comma list, e.g. 1,2,5")
    p.add_argument("--threshold", type=float, default=0.05, help="ARD ratio for effective dimensions")
    _add_fit_flags(p)

    p = sub.add_parser("embed", help="export latent means/variances", formatter_class=fmt_cls)
    p.add_argument("--model", required=True, help="model.json from fit")
    p.add_argument("--labels", help="CSV holding per-observation labels (row-aligned)")
    p.add_argument("--label-column", default="cluster", help="column of --labels to use")
    p.add_argument("--out", required=True, help="embeddings CSV path")

    p = sub.add_parser("density", help="latent density grid", formatter_class=fmt_cls)
    p.add_argument("--model", required=True, help="model.json from fit")
    p.add_argument("--dims", type=_dims, default=(0, 1), help="two latent dimensions i,j")
    p.add_argument("--resolution", type=_positive_int, default=100, help="cells per axis")
    p.add_argument("--out", required=True, help="density CSV path")

    p = sub.add_parser("error", help="train error vs the majority-rule baseline", formatter_class=fmt_cls)
    p.add_argument("--model", required=True, help="model.json from fit")
    p.add_argument("--data", required=True, help="the CSV the model was fitted on")
    p.add_argument("--missing-token", action="append", default=None, help="missing cell value")
    p.add_argument("--mc-eval", type=_positive_int, default=None, help="MC samples (default: model's)")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", required=True, help="JSON result path")

    p = sub.add_parser("plot", help="SVG scatter or density figure", formatter_class=fmt_cls)
    p.add_argument("--embeddings", help="embeddings CSV (scatter)")
    p.add_argument("--density", help="density CSV (heat map; drawn under points if both given)")
    p.add_argument("--label-column", default=None, help="embeddings column used for colours")
    p.add_argument("--dims", type=_dims, default=(0, 1), help="embedding dimensions i,j")
    p.add_argument("--title", default=None, help="figure title")
    p.add_argument("--out", required=True, help="SVG path")
    return parser


# --------------------------------------------------------------------------


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _commit(outputs: dict, manifest_path: Path, command: str, args, inputs: list, started: float, extra=None):
    """Write staged outputs, then the manifest describing them."""
    checksums = {}
    for path, text in outputs.items():
        payload = text.encode("utf-8") if isinstance(text, str) else text
        atomic_write(path, payload)
        checksums[str(path)] = _sha256(payload)
    manifest = {
        "catlgp_version": __version__,
        "command": command,
        "config": {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)},
        "seed": getattr(args, "seed", None),
        "inputs": [str(p) for p in inputs],
        "outputs": checksums,
        "duration_s": round(time.perf_counter() - started, 3),
    }
    if extra:
        manifest.update(extra)
    atomic_write(manifest_path, json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _missing(args):
    return tuple(args.missing_token) if args.missing_token else DEFAULT_MISSING


def _config_from_args(args, q):
    return ModelConfig(
        latent_dim=q, n_inducing=args.m, prior_var_x=args.prior_var, mc_samples_train=args.mc_train,
        mc_samples_eval=args.mc_eval, step_size=args.step_size, max_iters=args.iters, tol=args.tol,
        freeze_inducing=args.freeze_z, warmup_iters=args.warmup, rng_seed=args.seed,
    )


def cmd_simulate(args, started):
    if args.n < 1:
        raise InvalidFlag(f"--n must be >= 1, got {args.n}")
    rng = np.random.default_rng(args.seed)
    if args.clusters == "table1":
        schema, data, X, labels = generate_table1_like(args.n, rng, return_truth=True)
    else:
        if args.d < 1:
            raise InvalidFlag(f"--d must be >= 1, got {args.d}")
        if args.k < 2:
            raise InvalidFlag(f"--k must be >= 2, got {args.k}")
        X, labels = make_two_cluster_inputs(args.n, rng, return_labels=True)
        _, data = forward_simulate(X, default_truth_kernels(args.d), [args.k] * args.d, rng)
        schema = generic_schema(data.cardinalities)
    out = Path(args.out)
    sidecar = out.with_name(out.stem + ".truth.csv")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id"] + [f"x_{j + 1}" for j in range(X.shape[1])] + ["cluster"])
    for i in range(X.shape[0]):
        w.writerow([i] + [fmt(v) for v in X[i]] + [int(labels[i])])
    _commit({out: dataset_to_csv(schema, data), sidecar: buf.getvalue()},
            out.with_name(out.name + ".manifest.json"), "simulate", args, [], started)
    print(f"wrote {out} ({data.n_obs} x {data.n_vars}) and {sidecar}")


def cmd_fit(args, started):
    _, data = load_csv(args.data, _missing(args))
    config = _config_from_args(args, args.q)
    model, est = fit_with_restarts(data, config, args.restarts, np.random.default_rng(args.seed))
    out_dir = Path(args.out_dir)
    summary = {
        "elbo": est.value, "kl_x": est.kl_x, "kl_u": est.kl_u, "exp_loglik": est.exp_loglik,
        "mc_std_error": est.mc_std_error, "n_samples": est.n_samples,
        "iterations": len(model.trace), "converged": model.trace.converged,
        "effective_dims": effective_dims(model),
    }
    _commit({out_dir / "model.json": model_to_json(model), out_dir / "trace.jsonl": trace_jsonl(model.trace)},
            out_dir / "manifest.json", "fit", args, [args.data], started, {"result": summary})
    print(f"ELBO {est.value:.4f} +- {est.mc_std_error:.4f} after {len(model.trace)} iterations; "
          f"effective dims {summary['effective_dims']}")


def cmd_select_dim(args, started):
    _, data = load_csv(args.data, _missing(args))
    config = _config_from_args(args, args.q_candidates[0])
    res = select_latent_dim(data, args.q_candidates, config, np.random.default_rng(args.seed), args.threshold)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Q", "elbo", "mc_std_error", "effective_dims"])
    for row in res.table:
        w.writerow([row["q"], fmt(row["elbo"]), fmt(row["mc_std_error"]),
                    ";".join(str(q) for q in row["effective_dims"])])
    rec = f"recommended Q = {res.best_q}"
    buf.write(f"# {rec}\n")
    out_dir = Path(args.out_dir)
    best_index = next(i for i, r in enumerate(res.table) if r["q"] == res.best_q and not r["error"])
    outputs = {out_dir / "select_dim.csv": buf.getvalue(),
               out_dir / "best_model.json": model_to_json(res.models[best_index])}
    failures = {str(r["q"]): r["error"] for r in res.table if r["error"]}
    _commit(outputs, out_dir / "manifest.json", "select-dim", args, [args.data], started,
            {"result": {"recommended_q": res.best_q, "failures": failures}})
    print(rec)


def _read_label_column(path, column, n):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as err:
        raise InputError(f"cannot read {path}: {err}") from err
    if rows and column not in rows[0]:
        raise InputError(f"{path} has no column {column!r}")
    if len(rows) != n:
        raise InputError(f"{path} has {len(rows)} rows, model has {n} observations")
    return [r[column] for r in rows]


def cmd_embed(args, started):
    model = load_model(args.model)
    labels = None
    inputs = [args.model]
    if args.labels:
        labels = _read_label_column(args.labels, args.label_column, model.posterior.n_obs)
        inputs.append(args.labels)
    out = Path(args.out)
    _commit({out: embeddings_csv(model, labels, label_name=args.label_column)}, out.with_name(out.name + ".manifest.json"),
            "embed", args, inputs, started)
    print(f"wrote {out}")


def cmd_density(args, started):
    model = load_model(args.model)
    grid = latent_density(model, args.dims, args.resolution)
    out = Path(args.out)
    _commit({out: density_csv(grid)}, out.with_name(out.name + ".manifest.json"), "density", args,
            [args.model], started, {"result": {"integral": grid.integral()}})
    print(f"wrote {out} (integral {grid.integral():.4f})")


def cmd_error(args, started):
    model = load_model(args.model)
    _, data = load_csv(args.data, _missing(args))
    probs = predictive_probs(model, data, np.random.default_rng(args.seed), args.mc_eval)
    err = error_from_probs(probs, data)
    base = majority_baseline_error(data)
    result = {"train_error": err, "majority_baseline_error": base}
    out = Path(args.out)
    _commit({out: json.dumps(result, sort_keys=True) + "\n"}, out.with_name(out.name + ".manifest.json"),
            "error", args, [args.model, args.data], started)
    print(f"train error {err} (majority baseline {base})")


def cmd_plot(args, started):
    if not args.embeddings and not args.density:
        raise InvalidFlag("give --embeddings and/or --density")
    grid = read_density(args.density) if args.density else None
    inputs = [p for p in (args.embeddings, args.density) if p]
    if args.embeddings:
        emb = read_embeddings(args.embeddings, args.label_column or "label")
        q = emb.means.shape[1]
        i, j = args.dims
        if not 0 <= i < q or not (0 <= j < q or q == 1):
            raise InvalidFlag(f"--dims {i},{j} out of range for {q}-dimensional embeddings")
        ys = emb.means[:, j] if q > 1 else np.zeros(len(emb.ids))
        labels = emb.labels if args.label_column else None
        if args.label_column and labels is None:
            raise InvalidFlag(f"embeddings have no column {args.label_column!r}")
        svg = scatter_svg(np.column_stack([emb.means[:, i], ys]), labels,
                          args.title or "Latent space",
                          (f"latent {i + 1}", f"latent {j + 1}" if q > 1 else ""), background=grid)
    else:
        svg = density_svg(grid, args.title or "Density over the latent points")
    out = Path(args.out)
    _commit({out: svg}, out.with_name(out.name + ".manifest.json"), "plot", args, inputs, started)
    print(f"wrote {out}")


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "select-dim": cmd_select_dim,
    "embed": cmd_embed,
    "density": cmd_density,
    "error": cmd_error,
    "plot": cmd_plot,
}


def _configure_threads():
    raw = os.environ.get("CATLGP_THREADS")
    try:
        n = int(raw) if raw else 1
    except ValueError:
        raise InvalidFlag(f"CATLGP_THREADS must be an integer, got {raw!r}") from None
    torch.set_num_threads(max(n, 1))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        _configure_threads()
        COMMANDS[args.command](args, started)
    except NumericalError as err:
        print(f"catlgp {args.command}: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CatLGPError as err:
        print(f"catlgp {args.command}: error: {err}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
