"""Command-line entry point: ``saten {compress,verify,finetune,synth,report}``.

Exit codes: 0 success, 1 validation failure, 2 I/O or format error,
3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import bundle as bundle_io
from .config import load_config
from .errors import ConfigError, DataError, FormatError, SatenError
from .layer import (
    ROW,
    SatenLayer,
    compress,
    cost_report,
    forward,
    regression_loss,
    regression_step,
)
from .report import aggregate, format_table
from .sparsity import count_token_frequencies, read_token_stream
from .synth import synth_matrix
from .tensor_core import frobenius_norm

log = logging.getLogger("saten")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_CONFIG = 0, 1, 2, 3
VERIFY_TOL = 1e-5


def _threads() -> int:
    value = os.environ.get("SATEN_THREADS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            log.warning("ignoring invalid SATEN_THREADS=%r", value)
    return os.cpu_count() or 1


def _rel(a, b) -> float:
    nb = frobenius_norm(b)
    return frobenius_norm(a - b) / nb if nb else frobenius_norm(a)


def _layer_row(name: str, layer: SatenLayer, report) -> dict:
    row = {
        "shape": list(layer.shape),
        "pattern": layer.pattern,
        "epsilon": layer.epsilon,
        "fold_plan": [list(layer.fold_plan.input_factors), list(layer.fold_plan.output_factors)],
        "ranks": list(layer.tt.ranks),
        "residual_format": layer.residual.format,
    }
    row.update(report.to_dict())
    return row


def cmd_compress(args) -> int:
    config = load_config(args.config)
    source, _ = bundle_io.read_bundle(args.input)
    if source.layers:
        raise ConfigError(f"{args.input} already contains compressed layers")

    tokens = None
    if args.tokens:
        tokens = read_token_stream(args.tokens, binary=args.tokens_binary)

    warnings = []
    jobs = {}
    for name, tensor in source.tensors.items():
        entry = config.lookup(name)
        if entry is None:
            continue
        if tensor.ndim != 2:
            warnings.append(f"{name}: matched {entry.match!r} but is not a matrix; copied")
            continue
        if entry.pattern == ROW and tokens is None:
            raise ConfigError(f"{name}: row pattern needs --tokens")
        jobs[name] = entry
    for entry in config.layers:
        if not any(entry.matches(name) for name in source.tensors):
            warnings.append(f"config entry {entry.match!r} matched no tensor")

    def run(name):
        entry = jobs[name]
        w = source.tensors[name]
        freq = None
        if entry.pattern == ROW:
            freq = count_token_frequencies(tokens, w.shape[0])
        layer = compress(w, entry.epsilon, entry.pattern, entry.budget, freq, entry.k, entry.d)
        w_tt = layer.tt_matrix()
        errors = {
            "tt_rel_error": _rel(w_tt, w),
            "rel_error": _rel(w_tt + layer.residual.to_dense(), w),
        }
        return layer, errors

    names = sorted(jobs)
    with ThreadPoolExecutor(max_workers=min(_threads(), max(1, len(names)))) as pool:
        results = dict(zip(names, pool.map(run, names)))

    entries = {}
    rows = {}
    reports = {}
    for name, tensor in source.tensors.items():
        if name in results:
            layer, errors = results[name]
            entries[name] = layer
            reports[name] = cost_report(layer)
            rows[name] = _layer_row(name, layer, reports[name]) | errors
            log.info("%s: %s, P=%d", name, layer.fold_plan, reports[name].params_total)
        else:
            entries[name] = tensor
    bundle_io.save_model(args.output, entries, meta=source.meta or None)

    totals = aggregate(reports)
    copied = sum(t.size for n, t in source.tensors.items() if n not in results)
    model_dense = sum(t.size for t in source.tensors.values())
    model_params = copied + totals["params_total"]
    totals["model_compression_ratio"] = model_dense / model_params if model_params else None
    doc = {"schema": 1, "layers": rows, "totals": totals, "warnings": warnings}
    for w in warnings:
        log.warning(w)
    if args.report:
        Path(args.report).write_text(json.dumps(doc, indent=1) + "\n")
    return EXIT_OK


def _check_layer(layer: SatenLayer, w: np.ndarray, samples: int, rng) -> tuple[list, tuple]:
    w_tt = layer.tt_matrix()
    w_hat = w_tt + layer.residual.to_dense()
    tt_err = _rel(w_tt, w)
    err = _rel(w_hat, w)
    dev = 0.0
    for _ in range(samples):
        x = rng.standard_normal(layer.shape[0])
        ref = w_hat.T @ x
        gap = np.linalg.norm(forward(layer, x) - ref) / max(np.linalg.norm(ref), 1e-300)
        dev = max(dev, float(gap)) if np.isfinite(gap) else float("nan")
    reasons = []
    # written as "not <=" so that NaN fails
    if not tt_err <= layer.epsilon + VERIFY_TOL:
        reasons.append(f"TT error {tt_err:.3g} exceeds epsilon {layer.epsilon}")
    if not err <= tt_err + VERIFY_TOL:
        reasons.append("residual increases the error")
    if not dev <= VERIFY_TOL:
        reasons.append(f"forward deviation {dev:.3g}")
    return reasons, (tt_err, err, dev)


def cmd_verify(args) -> int:
    original = bundle_io.load_bundle(args.original)
    compressed, checks = bundle_io.read_bundle(args.compressed, verify_checksums=False)
    owned = {t for t in compressed.tensors for l in compressed.layers if t.startswith(f"{l}/")}
    copied = [t for t in compressed.tensors if t not in owned]

    problems = []
    for name in sorted(compressed.layers):
        if name not in original:
            problems.append(f"- {name}: compressed layer missing from original")
        elif list(original[name].shape) != compressed.layers[name].get("shape"):
            problems.append(
                f"! {name}: original shape {list(original[name].shape)} "
                f"vs compressed {compressed.layers[name].get('shape')}"
            )
    for name in sorted(set(original) - set(compressed.layers) - set(copied)):
        problems.append(f"+ {name}: present in original only")
    if problems:
        print("layer mismatch between bundles:")
        print("\n".join(problems))
        return EXIT_INVALID

    rng = np.random.default_rng(args.seed)
    failures = 0
    print(f"{'layer':<32} {'tt_err':>10} {'err':>10} {'eps':>6} {'fwd_dev':>10}  status")
    for name, meta in compressed.layers.items():
        group = {t: compressed.tensors[t] for t in owned if t.startswith(f"{name}/")}
        reasons = []
        if not all(checks[t] for t in group):
            reasons.append("checksum mismatch")
        stats = (float("nan"),) * 3
        try:
            layer = bundle_io.layer_from_tensors(name, meta, group)
            more, stats = _check_layer(layer, original[name], args.samples, rng)
            reasons += more
            eps = layer.epsilon
        except FormatError as exc:
            reasons.append(str(exc))
            eps = float("nan")
        status = "ok" if not reasons else "FAIL: " + "; ".join(reasons)
        failures += bool(reasons)
        tt_err, err, dev = stats
        print(f"{name:<32} {tt_err:>10.3e} {err:>10.3e} {eps:>6.3g} {dev:>10.3e}  {status}")
    for name in copied:
        if name in original and not (checks[name] and np.array_equal(
            compressed.tensors[name], original[name].astype(np.float32).astype(np.float64)
        )):
            failures += 1
            print(f"{name:<32} copied tensor differs from original  FAIL")
    print(f"{len(compressed.layers)} layers checked, {failures} failed")
    return EXIT_INVALID if failures else EXIT_OK


def _load_pairs(data, layer_names):
    pairs = {}
    for name in layer_names:
        if f"{name}/x" in data and f"{name}/y" in data:
            pairs[name] = (data[f"{name}/x"], data[f"{name}/y"])
    if not pairs and "x" in data and "y" in data and len(layer_names) == 1:
        pairs[layer_names[0]] = (data["x"], data["y"])
    if not pairs:
        raise DataError("data bundle has no (x, y) pairs for any compressed layer")
    for name, (x, y) in pairs.items():
        if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
            raise DataError(f"{name}: x and y must be (samples, dim) with equal sample counts")
    return pairs


def cmd_finetune(args) -> int:
    source, _ = bundle_io.read_bundle(args.compressed)
    dense, layers = bundle_io.split_model(source)
    pairs = _load_pairs(bundle_io.load_bundle(args.data), sorted(layers))
    rng = np.random.default_rng(args.seed)
    for name, (x, y) in pairs.items():
        layer = layers[name]
        loss = regression_loss(layer, x, y)
        print(f"{name} step 0 loss {loss:.6e}")
        for step in range(1, args.steps + 1):
            if args.batch_size and args.batch_size < len(x):
                pick = rng.choice(len(x), size=args.batch_size, replace=False)
                layer = regression_step(layer, x[pick], y[pick], args.lr)
            else:
                layer = regression_step(layer, x, y, args.lr)
            loss = regression_loss(layer, x, y)
            if not np.isfinite(loss):
                print(f"{name}: loss became {loss} at step {step}; learning rate {args.lr} is too high",
                      file=sys.stderr)
                return EXIT_INVALID
            print(f"{name} step {step} loss {loss:.6e}")
        layers[name] = layer
    entries = {n: layers.get(n, source.tensors.get(n)) for n in _entry_order(source)}
    bundle_io.save_model(args.output or args.compressed, entries, meta=source.meta or None)
    return EXIT_OK


def _entry_order(source) -> list[str]:
    # layer names take the position of their first tensor
    order = []
    for name in source.tensors:
        owner = next((l for l in source.layers if name.startswith(f"{l}/")), name)
        if owner not in order:
            order.append(owner)
    return order


def cmd_synth(args) -> int:
    w = synth_matrix(args.rows, args.cols, args.rank, args.spikes, args.noise, args.seed)
    bundle_io.save_bundle({args.name: w}, args.output)
    return EXIT_OK


def cmd_report(args) -> int:
    source, _ = bundle_io.read_bundle(args.compressed)
    _, layers = bundle_io.split_model(source)
    reports = {name: cost_report(layer) for name, layer in layers.items()}
    rows = {name: _layer_row(name, layers[name], r) for name, r in reports.items()}
    totals = aggregate(reports)
    if args.format == "json":
        print(json.dumps({"schema": 1, "layers": rows, "totals": totals}, indent=1))
    else:
        print(format_table(rows, totals))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saten", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="compress matching layers of a bundle")
    p.add_argument("--input", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--tokens", help="token id stream for row-sparsity layers")
    p.add_argument("--tokens-binary", action="store_true",
                   help="token file is raw little-endian uint32 instead of text")
    p.add_argument("--output", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("verify", help="check a compressed bundle against its original")
    p.add_argument("--original", required=True)
    p.add_argument("--compressed", required=True)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("finetune", help="SGD on (x, y) regression pairs in compressed form")
    p.add_argument("--compressed", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=0, help="0 means full batch")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", help="defaults to overwriting --compressed")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("synth", help="generate W = AB + S + noise*Z")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--spikes", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="weight")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="cost report of a compressed bundle")
    p.add_argument("--compressed", required=True)
    p.add_argument("--format", choices=("json", "table"), default="table")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SatenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
