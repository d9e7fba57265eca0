"""Forward and backward passes for the separable recurrent layer family.

Every layer is a composition of one primitive, a left-to-right recurrent
scan over the second-to-last axis of an array shaped ``(..., L, C)``:

* ``rnn_seq``        one sequence ``(L, C)``
* ``rnn_rows``       every row of an image independently, shared weights
* ``ws_birnn_rows``  ``scan(x) + flip(scan(flip(x)))`` with one cell
* ``srnn``           row scan, transpose, column scan, transpose back
* ``sws_birnn``      the same separable composition of two ``ws_birnn_rows``

Because the scan broadcasts over leading axes, the training harness can push
``(N, H, W, C)`` batches through the exact same functions.

Hidden state starts at zero for every row and column scan.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from ._arith import add_bias, linear, linear_transpose, outer_sum
from .params import GradBundle, Params, RnnCellParams, SrnnParams, activate, activation_grad
from .tensor import ImageTensor, SeqTensor, ShapeError, flip_array, transpose_array


@dataclass(frozen=True)
class LayerKind:
    name: str
    forward: Callable[[Any, np.ndarray], tuple[np.ndarray, Any]]
    backward: Callable[[Any, Any, np.ndarray], tuple[np.ndarray, dict]]
    in_channels: Callable[[Any], int]
    ndim: int = 3


LAYER_KINDS: dict[str, LayerKind] = {}


def register_layer(kind: LayerKind) -> LayerKind:
    LAYER_KINDS[kind.name] = kind
    return kind


def get_layer(name: str) -> LayerKind:
    try:
        return LAYER_KINDS[name]
    except KeyError:
        raise ValueError(f"unknown layer kind {name!r}; known: {sorted(LAYER_KINDS)}") from None


@dataclass(frozen=True, eq=False)
class ForwardCache:
    """Everything a backward pass needs: input, output and per-stage intermediates."""

    kind: str
    params: Any
    input: np.ndarray
    output: np.ndarray
    state: Any

    def replay(self) -> np.ndarray:
        out, _ = get_layer(self.kind).forward(self.params, self.input)
        return out


def check_channels(expected: int, actual: int, where: str) -> None:
    if expected != actual:
        raise ShapeError(f"{where}: expected {expected} input channels, got {actual}")


def _working(x: np.ndarray, params: Params) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.result_type(x.dtype, params.dtype))


# -- the scan primitive ------------------------------------------------------

def scan_forward(cell: RnnCellParams, x: np.ndarray):
    check_channels(cell.in_channels, x.shape[-1], "rnn scan")
    x = _working(x, cell)
    dtype = x.dtype
    W_ih, W_hh = cell.W_ih.astype(dtype), cell.W_hh.astype(dtype)
    b_ih, b_hh = cell.b_ih.astype(dtype), cell.b_hh.astype(dtype)

    driven = add_bias(linear(x, W_ih), b_ih)
    z = np.empty_like(driven)
    h = np.empty_like(driven)
    prev = np.zeros(driven.shape[:-2] + driven.shape[-1:], dtype)
    for t in range(x.shape[-2]):
        zt = add_bias(driven[..., t, :] + linear(prev, W_hh), b_hh)
        z[..., t, :] = zt
        prev = h[..., t, :] = activate(zt, cell.activation)
    return h, (x, z, h)


def scan_backward(cell: RnnCellParams, state, dh: np.ndarray):
    x, z, h = state
    dtype = z.dtype
    W_ih, W_hh = cell.W_ih.astype(dtype), cell.W_hh.astype(dtype)
    c_out = W_ih.shape[0]

    dz = np.empty_like(z)
    carry = np.zeros(z.shape[:-2] + z.shape[-1:], dtype)
    for t in reversed(range(z.shape[-2])):
        dzt = (dh[..., t, :] + carry) * activation_grad(z[..., t, :], h[..., t, :], cell.activation)
        dz[..., t, :] = dzt
        carry = linear_transpose(dzt, W_hh)

    h_prev = np.zeros_like(h)
    h_prev[..., 1:, :] = h[..., :-1, :]
    db = dz.reshape(-1, c_out).sum(axis=0)
    grads = {"W_ih": outer_sum(dz, x), "W_hh": outer_sum(dz, h_prev), "b_ih": db, "b_hh": db.copy()}
    return linear_transpose(dz, W_ih), grads


# -- weight-shared bidirectional scan ---------------------------------------

def ws_forward(cell: RnnCellParams, x: np.ndarray):
    h_fwd, s_fwd = scan_forward(cell, x)
    h_bwd, s_bwd = scan_forward(cell, flip_array(x))
    return h_fwd + flip_array(h_bwd), (s_fwd, s_bwd)


def ws_backward(cell: RnnCellParams, state, dy: np.ndarray):
    s_fwd, s_bwd = state
    dx_fwd, g_fwd = scan_backward(cell, s_fwd, dy)
    dx_bwd, g_bwd = scan_backward(cell, s_bwd, flip_array(dy))
    return dx_fwd + flip_array(dx_bwd), {k: g_fwd[k] + g_bwd[k] for k in g_fwd}


# -- separable composition ----------------------------------------------------

def _separable(line_forward, line_backward):
    def forward(params: SrnnParams, x: np.ndarray):
        check_channels(params.in_channels, x.shape[-1], "row stage")
        a, s_row = line_forward(params.row, x)
        b, s_col = line_forward(params.col, transpose_array(a))
        return transpose_array(b), (s_row, s_col)

    def backward(params: SrnnParams, state, dy: np.ndarray):
        s_row, s_col = state
        da_t, g_col = line_backward(params.col, s_col, transpose_array(dy))
        dx, g_row = line_backward(params.row, s_row, transpose_array(da_t))
        grads = {f"row.{k}": v for k, v in g_row.items()}
        grads.update({f"col.{k}": v for k, v in g_col.items()})
        return dx, grads

    return forward, backward


srnn_forward, srnn_backward = _separable(scan_forward, scan_backward)
sws_forward, sws_backward = _separable(ws_forward, ws_backward)


def _cell_in(p):
    return p.in_channels


register_layer(LayerKind("rnn_seq", scan_forward, scan_backward, _cell_in, ndim=2))
register_layer(LayerKind("rnn_rows", scan_forward, scan_backward, _cell_in))
register_layer(LayerKind("ws_birnn_rows", ws_forward, ws_backward, _cell_in))
register_layer(LayerKind("srnn", srnn_forward, srnn_backward, _cell_in))
register_layer(LayerKind("sws_birnn", sws_forward, sws_backward, _cell_in))
register_layer(
    LayerKind(
        "identity",
        lambda p, x: (np.array(x, copy=True), None),
        lambda p, s, dy: (np.array(dy, copy=True), {}),
        lambda p: 0,
    )
)


# -- public API on tensors ---------------------------------------------------

def run_forward(kind: str, params, x) -> tuple[np.ndarray, ForwardCache]:
    """Run a registered layer on a raw array and return ``(output, cache)``."""
    layer = get_layer(kind)
    x = np.asarray(x)
    if x.ndim != layer.ndim:
        raise ShapeError(f"{kind} expects a {layer.ndim}-d input, got shape {x.shape}")
    out, state = layer.forward(params, x)
    return out, ForwardCache(kind, params, x, out, state)


def _image(x) -> np.ndarray:
    return x.data if isinstance(x, ImageTensor) else ImageTensor(x).data


def _run_image(kind, params, x):
    out, cache = run_forward(kind, params, _image(x))
    return ImageTensor(out), cache


def rnn_seq(cell: RnnCellParams, x: SeqTensor) -> tuple[SeqTensor, ForwardCache]:
    data = x.data if isinstance(x, SeqTensor) else SeqTensor(x).data
    out, cache = run_forward("rnn_seq", cell, data)
    return SeqTensor(out), cache


def rnn_rows(cell: RnnCellParams, x: ImageTensor) -> tuple[ImageTensor, ForwardCache]:
    """Scan every row left to right with one shared cell."""
    return _run_image("rnn_rows", cell, x)


def ws_birnn_rows(cell: RnnCellParams, x: ImageTensor) -> tuple[ImageTensor, ForwardCache]:
    """Forward row scan plus the mirrored backward row scan, same weights, summed."""
    return _run_image("ws_birnn_rows", cell, x)


def srnn(params: SrnnParams, x: ImageTensor) -> tuple[ImageTensor, ForwardCache]:
    return _run_image("srnn", params, x)


def sws_birnn(params: SrnnParams, x: ImageTensor) -> tuple[ImageTensor, ForwardCache]:
    return _run_image("sws_birnn", params, x)


def backward(kind: str, params, cache: ForwardCache, d_output) -> GradBundle:
    """Exact gradients of a scalar loss w.r.t. every parameter and the input.

    ``d_output`` is the loss gradient w.r.t. the layer output. Shared cells
    accumulate gradient over both scan directions and all rows/columns.
    """
    if cache.kind != kind:
        raise ValueError(f"cache was produced by {cache.kind!r}, not {kind!r}")
    if cache.params is not params:
        ours, theirs = params.named_arrays(), cache.params.named_arrays()
        if ours.keys() != theirs.keys() or any(not np.array_equal(ours[k], theirs[k]) for k in ours):
            raise ValueError("cache was produced with different parameters")
    d_output = np.asarray(d_output)
    if d_output.shape != cache.output.shape:
        raise ShapeError(f"d_output shape {d_output.shape} does not match output shape {cache.output.shape}")
    d_output = d_output.astype(cache.output.dtype, copy=False)
    dx, grads = get_layer(kind).backward(params, cache.state, d_output)
    return GradBundle(grads, dx)


def finite_diff_grads(kind: str, params, x, loss: Callable[[np.ndarray], float], step: float = 1e-5) -> GradBundle:
    """Central-difference gradients of ``loss(forward(x))``, one coordinate at a time.

    Independent of :func:`backward`: only full forward passes are used.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    layer = get_layer(kind)
    x = np.array(np.asarray(x), dtype=np.float64)
    named = {k: np.array(v, dtype=np.float64) for k, v in params.named_arrays().items()} if params is not None else {}
    if params is not None and params.dtype != np.float64:
        raise TypeError("finite differences require double-precision parameters")

    def evaluate(p, inp):
        value = float(loss(layer.forward(p, inp)[0]))
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss while probing {kind}")
        return value

    def probe(array, rebuild):
        grad = np.zeros_like(array)
        for idx in np.ndindex(array.shape):
            orig = array[idx]
            array[idx] = orig + step
            plus = evaluate(*rebuild(array))
            array[idx] = orig - step
            minus = evaluate(*rebuild(array))
            array[idx] = orig
            grad[idx] = (plus - minus) / (2 * step)
        return grad

    grads = {}
    for name, arr in named.items():
        grads[name] = probe(arr, lambda a, name=name: (params.with_arrays({name: a.copy()}), x))
    d_input = probe(x, lambda a: (params, a.copy()))
    return GradBundle(grads, d_input)


def impulse_response(
    kind: str,
    params,
    height: int,
    width: int,
    positions,
    channel: int = 0,
    in_channels: int | None = None,
) -> ImageTensor:
    """Run a layer on a zero canvas with unit impulses at ``positions``.

    Positions are 0-based ``(row, col)`` pairs (a single pair is accepted).
    Multi-channel outputs are reduced to one channel by the L2 norm.
    """
    if in_channels is None:
        in_channels = get_layer(kind).in_channels(params) or 1
    if len(positions) == 2 and np.isscalar(positions[0]):
        positions = [positions]
    dtype = params.dtype if params is not None else np.float64
    x = np.zeros((height, width, in_channels), dtype=dtype)
    if not 0 <= channel < in_channels:
        raise ValueError(f"impulse channel {channel} out of range for {in_channels} channels")
    for j, k in positions:
        if not (0 <= j < height and 0 <= k < width):
            raise ValueError(f"impulse at ({j}, {k}) lies outside the {height}x{width} canvas")
        x[j, k, channel] = 1
    out, _ = run_forward(kind, params, x)
    if out.shape[-1] > 1:
        out = np.sqrt(np.sum(out * out, axis=-1, keepdims=True))
    return ImageTensor(out)
