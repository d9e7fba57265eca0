"""Parameter and MAC accounting for separable RNN and Conv2D layers.

Closed-form counts use exact integer arithmetic and ratios are returned as
:class:`fractions.Fraction`. :func:`count_macs_empirical` is an independent
check: it runs the real forward pass under a :class:`~srnnkit._arith.MacCounter`.

MAC convention: one MAC per scalar multiply plus one per bias element applied.
Activations and the elementwise sum merging the two directions of a
weight-shared bidirectional scan are not counted.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

from ._arith import MacCounter
from .harness import ConvParams
from .layers import get_layer
from .params import SrnnParams


@dataclass(frozen=True)
class RnnLayerSpec:
    c_in: int
    c_mid: int
    c_out: int
    bidirectional: bool = False
    height: int = 1
    width: int = 1

    def __post_init__(self):
        if min(self.c_in, self.c_mid, self.c_out, self.height, self.width) < 1:
            raise ValueError(f"all counts must be >= 1: {self}")


@dataclass(frozen=True)
class Conv2dSpec:
    c_in: int
    c_out: int
    k: int
    has_bias: bool = True
    height: int = 1
    width: int = 1
    stride: int = 1

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.k, self.height, self.width, self.stride) < 1:
            raise ValueError(f"all counts must be >= 1: {self}")

    @property
    def out_height(self) -> int:
        return -(-self.height // self.stride)

    @property
    def out_width(self) -> int:
        return -(-self.width // self.stride)


@dataclass(frozen=True)
class LayerCost:
    parameters: int
    macs: int

    def __add__(self, other: LayerCost) -> LayerCost:
        return LayerCost(self.parameters + other.parameters, self.macs + other.macs)

    def __sub__(self, other: LayerCost) -> LayerCost:
        return LayerCost(self.parameters - other.parameters, self.macs - other.macs)

    def __mul__(self, n: int) -> LayerCost:
        return LayerCost(self.parameters * n, self.macs * n)


def _cell_terms(c_in: int, c_out: int) -> int:
    # W_ih, W_hh and the two separate bias vectors
    return c_in * c_out + c_out * c_out + 2 * c_out


def srnn_param_count(spec: RnnLayerSpec) -> int:
    """Same for SRNN and SWS-BiRNN: both directions share one set of weights."""
    return _cell_terms(spec.c_in, spec.c_mid) + _cell_terms(spec.c_mid, spec.c_out)


def conv2d_param_count(spec: Conv2dSpec) -> int:
    return spec.c_in * spec.c_out * spec.k**2 + (spec.c_out if spec.has_bias else 0)


def srnn_mac_count(spec: RnnLayerSpec) -> int:
    per_pixel = srnn_param_count(spec)
    macs = per_pixel * spec.height * spec.width
    return 2 * macs if spec.bidirectional else macs


def conv2d_mac_count(spec: Conv2dSpec) -> int:
    """Per output position: ``k^2 C_in C_out`` multiplies plus ``C_out`` bias adds."""
    per_pixel = spec.c_in * spec.c_out * spec.k**2 + (spec.c_out if spec.has_bias else 0)
    return per_pixel * spec.out_height * spec.out_width


def layer_cost(spec) -> LayerCost:
    if isinstance(spec, RnnLayerSpec):
        return LayerCost(srnn_param_count(spec), srnn_mac_count(spec))
    return LayerCost(conv2d_param_count(spec), conv2d_mac_count(spec))


def param_ratio_asymptotic(k: int) -> Fraction:
    """Large-C limit of SWS-BiRNN / Conv2D parameters with equal channel widths."""
    if k < 1:
        raise ValueError("kernel size must be >= 1")
    return Fraction(4, k * k)


def mac_ratio(c: int, k: int) -> Fraction:
    """SRNN / Conv2D MACs with ``C_in = C_mid = C_out = c``: ``(4c + 4) / (k^2 c + 1)``."""
    if c < 1 or k < 1:
        raise ValueError("c and k must be >= 1")
    return Fraction(4 * c + 4, k * k * c + 1)


def solve_symmetric_width(c_in: int, parameters: int) -> int | None:
    """Find ``C`` with ``srnn_param_count(c_in, C, C) == parameters``, or ``None``."""
    c = 1
    while True:
        n = srnn_param_count(RnnLayerSpec(c_in, c, c))
        if n == parameters:
            return c
        if n > parameters:
            return None
        c += 1


# -- empirical counting --------------------------------------------------------

def count_macs_empirical(kind: str, params, input_shape, seed: int = 0) -> int:
    """Run the real forward on a random input of ``input_shape`` and count MACs."""
    x = np.random.default_rng(seed).standard_normal(input_shape)
    layer = get_layer(kind)
    with MacCounter() as counter:
        layer.forward(params, x)
    return counter.total


def count_spec_empirical(spec, seed: int = 0) -> int:
    """Build random parameters for ``spec`` and count its forward pass."""
    rng = np.random.default_rng(seed)
    if isinstance(spec, RnnLayerSpec):
        params = SrnnParams.init(spec.c_in, spec.c_mid, spec.c_out, rng)
        kind = "sws_birnn" if spec.bidirectional else "srnn"
    else:
        params = ConvParams.init(spec.c_in, spec.c_out, spec.k, rng, spec.stride, bias=spec.has_bias)
        kind = "conv2d"
    return count_macs_empirical(kind, params, (spec.height, spec.width, spec.c_in), seed)


# -- model description files ------------------------------------------------

class ModelFileError(ValueError):
    pass


@dataclass
class ModelLayer:
    index: int
    source: int
    kind: str  # "conv" or "rnn"
    spec: object  # RnnLayerSpec / Conv2dSpec for one repetition at the input size
    repeat: int
    input_shape: tuple[int, int, int]
    output_shape: tuple[int, int, int]
    line: int

    @property
    def label(self) -> str:
        if self.kind == "conv":
            k, s = self.spec.k, self.spec.stride
            return f"Conv2D {k}x{k} s{s}" + ("" if self.spec.has_bias else " nobias")
        return "SWS-BiRNN" if self.spec.bidirectional else "SRNN"

    def cost(self) -> LayerCost:
        total = LayerCost(0, 0)
        for spec in self.repetitions():
            total = total + layer_cost(spec)
        return total

    def repetitions(self) -> list:
        specs = [self.spec]
        for _ in range(self.repeat - 1):
            prev = specs[-1]
            if self.kind == "conv":
                specs.append(
                    Conv2dSpec(prev.c_out, prev.c_out, prev.k, prev.has_bias, prev.out_height, prev.out_width, prev.stride)
                )
            else:
                specs.append(RnnLayerSpec(prev.c_out, prev.c_mid, prev.c_out, prev.bidirectional, prev.height, prev.width))
        return specs


@dataclass
class ModelDescription:
    inputs: list[tuple[int, int, int]] = field(default_factory=list)
    layers: list[ModelLayer] = field(default_factory=list)
    alternatives: dict[int, ModelLayer] = field(default_factory=dict)

    def producer_shape(self, source: int, line: int) -> tuple[int, int, int]:
        if source < 0:
            if -source > len(self.inputs):
                raise ModelFileError(f"line {line}: from={source} refers to undeclared input #{-source}")
            return self.inputs[-source - 1]
        for layer in self.layers:
            if layer.index == source:
                return layer.output_shape
        raise ModelFileError(f"line {line}: dangling from={source}, no earlier row has that index")


_TOKEN = re.compile(r"^(n|in)=(.+)$")


def _parse_layer(tokens: list[str], lineno: int, index: int, source: int, model: ModelDescription) -> ModelLayer:
    kind, args = tokens[0], tokens[1:]
    repeat, declared = 1, None
    plain = []
    for tok in args:
        m = _TOKEN.match(tok)
        if m and m.group(1) == "n":
            repeat = int(m.group(2))
        elif m and m.group(1) == "in":
            declared = tuple(int(v) for v in m.group(2).lower().split("x"))
        else:
            plain.append(tok)
    shape = model.producer_shape(source, lineno)
    if declared is not None and declared != shape:
        raise ModelFileError(
            f"line {lineno}: row {index} declares input {'x'.join(map(str, declared))} "
            f"but its producer yields {'x'.join(map(str, shape))}"
        )
    h, w, c = shape
    try:
        if kind == "conv":
            if len(plain) not in (4, 5):
                raise ValueError("expected: conv C_in C_out k s [bias|nobias]")
            c_in, c_out, k, s = (int(v) for v in plain[:4])
            flag = plain[4] if len(plain) == 5 else "bias"
            if flag not in ("bias", "nobias"):
                raise ValueError(f"bias flag must be 'bias' or 'nobias', got {flag!r}")
            spec = Conv2dSpec(c_in, c_out, k, flag == "bias", h, w, s)
        elif kind == "rnn":
            if len(plain) != 4:
                raise ValueError("expected: rnn C_in C_mid C_out bidir")
            c_in, c_mid, c_out, bidir = (int(v) for v in plain)
            spec = RnnLayerSpec(c_in, c_mid, c_out, bool(bidir), h, w)
        else:
            raise ModelFileError(f"line {lineno}: unknown layer kind {kind!r} in row {index}")
    except ModelFileError:
        raise
    except ValueError as exc:
        raise ModelFileError(f"line {lineno}: row {index}: {exc}") from None
    if spec.c_in != c:
        raise ModelFileError(
            f"line {lineno}: row {index} declares C_in={spec.c_in} but its producer yields {c} channels"
        )
    if repeat > 1 and spec.c_out != spec.c_in:
        raise ModelFileError(f"line {lineno}: row {index} repeats n={repeat} times but C_in != C_out")
    layer = ModelLayer(index, source, kind, spec, repeat, shape, shape, lineno)
    last = layer.repetitions()[-1]
    if kind == "conv":
        layer.output_shape = (last.out_height, last.out_width, last.c_out)
    else:
        layer.output_shape = (h, w, last.c_out)
    return layer


def parse_model(text: str) -> ModelDescription:
    """Parse a model description.

    Lines::

        input H W C                     # the i-th input line is referenced as from=-i
        index from conv C_in C_out k s [bias|nobias] [n=N] [in=HxWxC]
        index from rnn C_in C_mid C_out bidir [n=N] [in=HxWxC]
        alt index <layer ...>           # alternative implementation of row ``index``
    """
    model = ModelDescription()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split("#", 1)[0].split()
        if not tokens:
            continue
        head = tokens[0]
        try:
            if head == "input":
                if len(tokens) != 4:
                    raise ModelFileError(f"line {lineno}: expected 'input H W C'")
                model.inputs.append(tuple(int(v) for v in tokens[1:]))
            elif head == "alt":
                index = int(tokens[1])
                main = next((l for l in model.layers if l.index == index), None)
                if main is None:
                    raise ModelFileError(f"line {lineno}: alt refers to unknown row {index}")
                alt = _parse_layer(tokens[2:], lineno, index, main.source, model)
                if alt.output_shape[:2] != main.output_shape[:2]:
                    raise ModelFileError(f"line {lineno}: alternative for row {index} changes the spatial size")
                model.alternatives[index] = alt
            else:
                index, source = int(tokens[0]), int(tokens[1])
                if len(tokens) < 3:
                    raise ModelFileError(f"line {lineno}: missing layer kind")
                if any(l.index == index for l in model.layers):
                    raise ModelFileError(f"line {lineno}: duplicate row index {index}")
                model.layers.append(_parse_layer(tokens[2:], lineno, index, source, model))
        except ModelFileError:
            raise
        except ValueError as exc:
            raise ModelFileError(f"line {lineno}: {exc}") from None
    if not model.inputs:
        raise ModelFileError("line 1: missing 'input H W C' header")
    return model


def read_model(path) -> ModelDescription:
    return parse_model(resolve_model_path(path).read_text())


def resolve_model_path(path) -> Path:
    """Return ``path`` if it exists, else the bundled fixture of that name."""
    p = Path(path)
    if p.exists():
        return p
    bundled = resources.files("srnnkit") / "data" / p.name
    if bundled.is_file():
        return Path(str(bundled))
    raise FileNotFoundError(f"model file {path} not found")


# -- report ---------------------------------------------------------------------

@dataclass
class Substitution:
    index: int
    original: ModelLayer
    replacement: ModelLayer

    @property
    def delta(self) -> LayerCost:
        return self.replacement.cost() - self.original.cost()


@dataclass
class CostReport:
    model: ModelDescription
    substitutions: list[Substitution]
    arena_bytes: int
    bytes_per_element: int

    @property
    def total(self) -> LayerCost:
        t = LayerCost(0, 0)
        for layer in self.model.layers:
            t = t + layer.cost()
        return t

    def rows(self) -> list[dict]:
        out = []
        for layer in self.model.layers:
            c = layer.cost()
            out.append(
                {
                    "index": layer.index,
                    "from": layer.source,
                    "n": layer.repeat,
                    "input": "x".join(map(str, layer.input_shape)),
                    "layer": layer.label,
                    "params": c.parameters,
                    "macs": c.macs,
                }
            )
        return out

    def to_text(self) -> str:
        headers = ["index", "from", "n", "input", "layer", "params", "macs"]
        table = [[str(r[h]) for h in headers] for r in self.rows()]
        t = self.total
        table.append(["total", "", "", "", "", str(t.parameters), str(t.macs)])
        widths = [max(len(h), *(len(row[i]) for row in table)) for i, h in enumerate(headers)]

        def line(cells):
            return "  ".join(c.rjust(w) if i in (0, 1, 2, 5, 6) else c.ljust(w) for i, (c, w) in enumerate(zip(cells, widths))).rstrip()

        out = [line(headers), line(["-" * w for w in widths])]
        out += [line(row) for row in table]
        if self.substitutions:
            out += ["", "substitutions (replacement - original):"]
            for s in self.substitutions:
                a, b, d = s.original.cost(), s.replacement.cost(), s.delta
                out.append(
                    f"  row {s.index}: {s.original.label} x{s.original.repeat} "
                    f"params={a.parameters} macs={a.macs}  ->  {s.replacement.label} x{s.replacement.repeat} "
                    f"params={b.parameters} macs={b.macs}  delta params={d.parameters:+d} macs={d.macs:+d}"
                )
        out += [
            "",
            f"tensor arena estimate (sequential execution, {self.bytes_per_element} B/element): {self.arena_bytes} bytes",
            f"MAC convention: {MacCounter.convention}",
        ]
        return "\n".join(out) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "from", "n", "input", "layer", "params", "macs"])
        for r in self.rows():
            w.writerow(r.values())
        t = self.total
        w.writerow(["total", "", "", "", "", t.parameters, t.macs])
        for s in self.substitutions:
            d = s.delta
            w.writerow(
                [
                    f"delta:{s.index}",
                    s.original.source,
                    f"{s.original.repeat}->{s.replacement.repeat}",
                    "x".join(map(str, s.original.input_shape)),
                    f"{s.original.label} -> {s.replacement.label}",
                    d.parameters,
                    d.macs,
                ]
            )
        return buf.getvalue()


def arena_estimate(model: ModelDescription, bytes_per_element: int = 4) -> int:
    """Peak bytes of live activations when rows run one after another in file order.

    A tensor stays live from its production until its last consumer has run;
    tensors nobody consumes are model outputs and stay live to the end.
    RNN rows also hold their ``C_mid`` intermediate while executing.
    """
    size = lambda shape: shape[0] * shape[1] * shape[2]  # noqa: E731
    last_use: dict[tuple, int] = {}
    for pos, layer in enumerate(model.layers):
        key = ("in", -layer.source - 1) if layer.source < 0 else ("row", layer.source)
        last_use[key] = pos
    live = {("in", i): size(s) for i, s in enumerate(model.inputs)}
    peak = sum(live.values())
    for pos, layer in enumerate(model.layers):
        working = 0
        for spec in layer.repetitions():
            if isinstance(spec, RnnLayerSpec):
                working = max(working, spec.height * spec.width * spec.c_mid)
        out = size(layer.output_shape)
        peak = max(peak, sum(live.values()) + out + working)
        live[("row", layer.index)] = out
        for key, last in list(last_use.items()):
            if last == pos and key in live:
                del live[key]
    return peak * bytes_per_element


def cost_report(model: ModelDescription, compare: tuple[str, str] = ("conv", "rnn"), bytes_per_element: int = 4) -> CostReport:
    """Per-row cost table plus a delta for every declared alternative.

    ``compare = (from_kind, to_kind)`` orients each substitution so the delta
    is ``to - from``; pairs that do not match fall back to ``alt - main``.
    """
    subs = []
    for layer in model.layers:
        alt = model.alternatives.get(layer.index)
        if alt is None:
            continue
        if (layer.kind, alt.kind) == (compare[1], compare[0]):
            subs.append(Substitution(layer.index, alt, layer))
        else:
            subs.append(Substitution(layer.index, layer, alt))
    return CostReport(model, subs, arena_estimate(model, bytes_per_element), bytes_per_element)
