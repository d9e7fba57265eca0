"""Command-line entry point: ``srnnkit {impulse,cost,gradcheck,train,eval}``.

Exit codes: 0 success, 1 check or accuracy failure, 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .cost import ModelFileError, cost_report, read_model, resolve_model_path
from .harness import (
    DivergenceError,
    ModelConfig,
    TrainConfig,
    evaluate,
    load_cifar,
    make_synthetic_dataset,
    train,
)
from .layers import impulse_response
from .paramfile import ParamFileError, load_params, load_single, save_params
from .params import RnnCellParams, SrnnParams
from .rnn2d import DsRnnParams, Rnn2dCellParams
from .tensor import TensorFormatError

log = logging.getLogger("srnnkit")

IMPULSE_LAYERS = {
    "rnn_rows": "rnn_rows",
    "srnn": "srnn",
    "ws_birnn": "ws_birnn_rows",
    "sws_birnn": "sws_birnn",
    "rnn2d": "rnn2d",
    "ds_rnn": "ds_rnn",
}
DEFAULT_IMPULSE_LAYERS = ("rnn_rows", "srnn", "ws_birnn", "sws_birnn")
DEFAULT_IMPULSES = ((3, 4), (7, 12))


class UsageError(Exception):
    pass


def preset_params(layer: str, preset: str):
    """Single-channel hand-checkable parameters: ``decay0.5`` or ``identity``."""
    if preset not in ("decay0.5", "identity"):
        raise UsageError(f"unknown scalar preset {preset!r}")
    decay = 0.5 if preset == "decay0.5" else 0.0
    cell = RnnCellParams.scalar(1.0, decay)
    if layer in ("rnn_rows", "ws_birnn"):
        return cell
    if layer in ("srnn", "sws_birnn"):
        return SrnnParams(cell, cell)
    if layer == "rnn2d":
        z = np.zeros((1, 1))
        return Rnn2dCellParams(np.ones((1, 1)), z + decay, z + decay, z, np.zeros(1), "identity")
    if layer == "ds_rnn":
        return DsRnnParams(np.ones(1), np.full(1, decay), np.full(1, decay), np.zeros(1), np.ones((1, 1)), "identity")
    raise UsageError(f"unknown layer {layer!r}")


_PARAM_TYPES = {
    "rnn_rows": RnnCellParams,
    "ws_birnn": RnnCellParams,
    "srnn": SrnnParams,
    "sws_birnn": SrnnParams,
    "rnn2d": Rnn2dCellParams,
    "ds_rnn": DsRnnParams,
}


def _parse_at(text: str) -> tuple[int, int]:
    try:
        j, k = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'row,col', got {text!r}") from None
    return j, k


def write_pgm(path, values: np.ndarray) -> tuple[float, float]:
    """Min-max normalize a 2-d map to 8-bit P5 PGM; returns ``(min, max)``."""
    lo, hi = float(values.min()), float(values.max())
    scaled = np.zeros_like(values) if hi == lo else (values - lo) / (hi - lo) * 255.0
    pixels = np.rint(scaled).astype(np.uint8)
    h, w = values.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())
    return lo, hi


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode())
        pos = end
    if tokens[0] != "P5":
        raise ValueError(f"not a P5 PGM: magic {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError("only 8-bit PGM is supported")
    data = raw[pos + 1 :]
    if len(data) != w * h:
        raise ValueError(f"PGM payload has {len(data)} bytes, expected {w * h}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def cmd_impulse(args) -> int:
    layers = args.layer or list(DEFAULT_IMPULSE_LAYERS)
    positions = args.at or list(DEFAULT_IMPULSES)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for j, k in positions:
        if not (1 <= j <= args.height and 1 <= k <= args.width):
            raise UsageError(f"impulse at {j},{k} lies outside the {args.height}x{args.width} canvas (1-based)")
    zero_based = [(j - 1, k - 1) for j, k in positions]
    for layer in layers:
        if args.params_file:
            params = load_single(args.params_file)
            if not isinstance(params, _PARAM_TYPES[layer]):
                raise UsageError(f"{args.params_file} holds {type(params).__name__}, {layer} needs {_PARAM_TYPES[layer].__name__}")
        else:
            params = preset_params(layer, args.scalar_preset)
        response = impulse_response(IMPULSE_LAYERS[layer], params, args.height, args.width, zero_based, args.channel)
        values = response.data[:, :, 0].astype(np.float64)
        (out_dir / f"{layer}.csv").write_text("".join(",".join(repr(float(v)) for v in row) + "\n" for row in values))
        lo, hi = write_pgm(out_dir / f"{layer}.pgm", values)
        (out_dir / f"{layer}.pgm.txt").write_text(
            f"min={lo!r}\nmax={hi!r}\npixel = round(255 * (value - min) / (max - min))\n"
        )
        print(f"{layer}: {args.height}x{args.width} min={lo!r} max={hi!r} -> {out_dir / (layer + '.pgm')}")
    return 0


def _parse_compare(text: str | None) -> tuple[str, str]:
    if not text:
        return ("conv", "rnn")
    try:
        kv = dict(item.split("=", 1) for item in text.split(","))
        pair = (kv["from"], kv["to"])
    except (ValueError, KeyError):
        raise UsageError(f"--compare expects 'from=KIND,to=KIND', got {text!r}") from None
    for kind in pair:
        if kind not in ("conv", "rnn"):
            raise UsageError(f"--compare kinds must be conv or rnn, got {kind!r}")
    return pair


def cmd_cost(args) -> int:
    report = cost_report(read_model(args.model), _parse_compare(args.compare), args.bytes_per_element)
    sys.stdout.write(report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 0


def _parse_shape(text: str) -> tuple[int, ...]:
    try:
        shape = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected H,W,C_in,C_mid,C_out, got {text!r}") from None
    if len(shape) != 5 or min(shape) < 1:
        raise argparse.ArgumentTypeError("shape needs five positive integers H,W,C_in,C_mid,C_out")
    return shape


def cmd_gradcheck(args) -> int:
    kinds = gc.KINDS if args.layer == "all" else (args.layer,)
    lines, failed = [], []
    for kind in kinds:
        rng = np.random.default_rng(args.seed)
        for i in range(args.instances):
            params, x = gc.random_instance(kind, rng, args.activation, args.shape if i == 0 else None)
            result = gc.check_gradients(kind, params, x, rng, args.step)
            lines += [f"[{i}] {line}" for line in result.lines()]
            if not result.max_error < args.tol:
                failed.append((i, result))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    for i, r in failed:
        print(
            f"FAIL {r.kind}[{i}]: max relative error {r.max_error!r} >= tol {args.tol!r} at "
            f"{r.worst_group}{list(r.worst_index)} (analytic {r.worst_analytic!r}, numeric {r.worst_numeric!r})"
        )
    return 1 if failed else 0


def _resolve_cfg(path) -> Path:
    return resolve_model_path(path)


def _load_data(args):
    if args.data == "synthetic":
        return make_synthetic_dataset(args.n, args.data_seed)
    if not args.data_path:
        raise UsageError(f"--data {args.data} needs --data-path")
    data = []
    for path in args.data_path:
        data += load_cifar(path, args.data, args.limit)
    return data[: args.limit] if args.limit else data


def cmd_train(args) -> int:
    model = ModelConfig.from_file(_resolve_cfg(args.model))
    cfg = TrainConfig.from_file(_resolve_cfg(args.config)) if args.config else TrainConfig()
    data = _load_data(args)
    result = train(model, data, cfg)
    if args.save_init:
        save_params(args.save_init, result.initial_params)
    if args.out:
        save_params(args.out, result.params)
    csv_text = result.metrics_csv()
    if args.metrics:
        Path(args.metrics).write_text(csv_text)
    sys.stdout.write(csv_text)
    final = result.history[-1].accuracy if result.history else float("nan")
    if args.min_accuracy is not None and not final >= args.min_accuracy:
        print(f"FAIL: final held-out accuracy {final!r} < {args.min_accuracy!r}")
        return 1
    return 0


def cmd_eval(args) -> int:
    model = ModelConfig.from_file(_resolve_cfg(args.model))
    dtype = np.float32 if args.precision == "single" else np.float64
    if args.params:
        params = load_params(args.params, dtype)
    else:
        params = model.init_params(np.random.default_rng(args.seed), dtype)
    if len(params) != len(model.layers):
        raise UsageError(f"{args.params} has {len(params)} blocks but the model has {len(model.layers)} layers")
    data = _load_data(args)
    acc, confusion = evaluate(model, params, data)
    lines = [f"accuracy={acc!r}", "confusion (rows=true, cols=predicted):"]
    lines += [" ".join(str(v) for v in row) for row in confusion]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.metrics:
        Path(args.metrics).write_text(f"accuracy\n{acc!r}\n")
    if args.min_accuracy is not None and not acc >= args.min_accuracy:
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srnnkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("impulse", help="impulse-response maps as PGM + CSV")
    p.add_argument("--layer", action="append", choices=sorted(IMPULSE_LAYERS))
    src = p.add_mutually_exclusive_group()
    src.add_argument("--params-file")
    src.add_argument("--scalar-preset", default="decay0.5", choices=["decay0.5", "identity"])
    p.add_argument("--height", type=int, default=9)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--at", action="append", type=_parse_at, help="1-based row,col; repeatable")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_impulse)

    p = sub.add_parser("cost", help="parameter / MAC report for a model description")
    p.add_argument("--model", required=True)
    p.add_argument("--csv")
    p.add_argument("--compare", help="from=conv,to=rnn")
    p.add_argument("--bytes-per-element", type=int, default=4)
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--layer", default="all", choices=("all",) + gc.KINDS)
    p.add_argument("--shape", type=_parse_shape, default=(5, 6, 3, 4, 2))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--instances", type=int, default=1)
    p.add_argument("--activation", choices=("tanh", "identity"), default="tanh")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    for name, func in (("train", cmd_train), ("eval", cmd_eval)):
        p = sub.add_parser(name)
        p.add_argument("--model", required=True, help="key=value model config")
        p.add_argument("--data", choices=("synthetic", "cifar10", "cifar100"), default="synthetic")
        p.add_argument("--data-path", action="append")
        p.add_argument("--n", type=int, default=2000, help="synthetic dataset size")
        p.add_argument("--data-seed", type=int, default=1)
        p.add_argument("--limit", type=int)
        p.add_argument("--metrics")
        p.add_argument("--min-accuracy", type=float)
        if name == "train":
            p.add_argument("--config")
            p.add_argument("--out")
            p.add_argument("--save-init")
        else:
            p.add_argument("--params")
            p.add_argument("--seed", type=int, default=1)
            p.add_argument("--precision", choices=("single", "double"), default="single")
        p.set_defaults(func=func)
    return parser


def _thread_limit():
    raw = os.environ.get("SRNNKIT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SRNNKIT_THREADS must be an integer, got {raw!r}") from None
    if n <= 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, ModelFileError, ParamFileError, TensorFormatError, FileNotFoundError) as exc:
        print(f"srnnkit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"srnnkit {args.command}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"srnnkit {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
