"""Full 2D recurrence and its depthwise-separable variant.

Both layers evaluate a raster-order recurrence (rows top to bottom, columns
left to right) where the state at ``(j, k)`` sees its left, upper and
(optionally) upper-left neighbours. Out-of-range neighbours are zero.

``rnn2d``  mixes neighbour states through full ``C_out x C_out`` matrices and
uses a single bias.

``ds_rnn`` runs the recurrence independently per channel (elementwise
weights) and then projects with a ``C_out x C_in`` pointwise matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._arith import add_bias, linear, linear_transpose, multiply, outer_sum
from .layers import LayerKind, _run_image, _working, check_channels, register_layer
from .params import Params, activate, activation_grad, ACTIVATIONS
from .tensor import ImageTensor, ShapeError


@dataclass(frozen=True, eq=False)
class Rnn2dCellParams(Params):
    W_ih: np.ndarray
    W_hk: np.ndarray  # left neighbour h[j, k-1]
    W_hj: np.ndarray  # upper neighbour h[j-1, k]
    W_jk: np.ndarray  # diagonal neighbour h[j-1, k-1]
    b: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        self.freeze_fields()
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        c_out = self.W_ih.shape[0]
        for name in ("W_hk", "W_hj", "W_jk"):
            if getattr(self, name).shape != (c_out, c_out):
                raise ShapeError(f"{name} must be {(c_out, c_out)}, got {getattr(self, name).shape}")
        if self.b.shape != (c_out,):
            raise ShapeError(f"b must be ({c_out},), got {self.b.shape}")

    @property
    def in_channels(self) -> int:
        return self.W_ih.shape[1]

    @property
    def out_channels(self) -> int:
        return self.W_ih.shape[0]

    @classmethod
    def init(cls, c_in, c_out, rng, activation="tanh", dtype=np.float64):
        a, r = 1 / np.sqrt(c_in), 1 / np.sqrt(3 * c_out)
        return cls(
            rng.uniform(-a, a, (c_out, c_in)).astype(dtype),
            *(rng.uniform(-r, r, (c_out, c_out)).astype(dtype) for _ in range(3)),
            np.zeros(c_out, dtype),
            activation=activation,
        )


@dataclass(frozen=True, eq=False)
class DsRnnParams(Params):
    """Per-channel recurrence weights plus a pointwise ``(C_out, C_in)`` projection.

    ``W_c`` (diagonal neighbour) is ``None`` unless the diagonal term is enabled.
    """

    W_ih: np.ndarray
    W_a: np.ndarray  # left neighbour
    W_b: np.ndarray  # upper neighbour
    b: np.ndarray
    pointwise: np.ndarray
    activation: str = "tanh"
    W_c: np.ndarray | None = None

    def __post_init__(self):
        self.freeze_fields()
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        c = self.W_ih.shape
        if len(c) != 1:
            raise ShapeError(f"W_ih must be a vector, got shape {c}")
        for name in ("W_a", "W_b", "b", "W_c"):
            v = getattr(self, name)
            if v is not None and v.shape != c:
                raise ShapeError(f"{name} must have shape {c}, got {v.shape}")
        if self.pointwise.ndim != 2 or self.pointwise.shape[1] != c[0]:
            raise ShapeError(f"pointwise must be (C_out, {c[0]}), got {self.pointwise.shape}")

    @property
    def diagonal(self) -> bool:
        return self.W_c is not None

    @property
    def in_channels(self) -> int:
        return self.W_ih.shape[0]

    @property
    def out_channels(self) -> int:
        return self.pointwise.shape[0]

    @classmethod
    def init(cls, c_in, c_out, rng, activation="tanh", diagonal=False, dtype=np.float64):
        u = lambda lo, hi: rng.uniform(lo, hi, c_in).astype(dtype)  # noqa: E731
        p = 1 / np.sqrt(c_in)
        return cls(
            u(0.5, 1.0),
            u(-0.5, 0.5),
            u(-0.5, 0.5),
            np.zeros(c_in, dtype),
            rng.uniform(-p, p, (c_out, c_in)).astype(dtype),
            activation,
            u(-0.5, 0.5) if diagonal else None,
        )


# Neighbour-state views. ``left[..., j, k]`` holds h[j, k-1], and so on.

def _left(h):
    out = np.zeros_like(h)
    out[..., :, 1:, :] = h[..., :, :-1, :]
    return out


def _up(h):
    out = np.zeros_like(h)
    out[..., 1:, :, :] = h[..., :-1, :, :]
    return out


def _diag(h):
    out = np.zeros_like(h)
    out[..., 1:, 1:, :] = h[..., :-1, :-1, :]
    return out


class _Mixing:
    """How neighbour weights act: full matrices (rnn2d) or per-channel vectors (ds_rnn)."""

    def __init__(self, elementwise: bool):
        self.elementwise = elementwise

    def apply(self, v, w):
        return multiply(v, w) if self.elementwise else linear(v, w)

    def transpose(self, g, w):
        return g * w if self.elementwise else linear_transpose(g, w)

    def weight_grad(self, g, v):
        if self.elementwise:
            return (g * v).reshape(-1, g.shape[-1]).sum(axis=0)
        return outer_sum(g, v)


def _grid_forward(x, w_in, w_left, w_up, w_diag, b, activation, mix: _Mixing):
    driven = mix.apply(x, w_in)
    height, width = x.shape[-3], x.shape[-2]
    z = np.empty_like(driven)
    h = np.empty_like(driven)
    prev_row = np.zeros(driven.shape[:-3] + driven.shape[-2:], driven.dtype)
    for j in range(height):
        base = driven[..., j, :, :] + mix.apply(prev_row, w_up)
        if w_diag is not None:
            shifted = np.zeros_like(prev_row)
            shifted[..., 1:, :] = prev_row[..., :-1, :]
            base = base + mix.apply(shifted, w_diag)
        left = np.zeros(driven.shape[:-3] + driven.shape[-1:], driven.dtype)
        for k in range(width):
            zt = add_bias(base[..., k, :] + mix.apply(left, w_left), b)
            z[..., j, k, :] = zt
            left = h[..., j, k, :] = activate(zt, activation)
        prev_row = h[..., j, :, :]
    return h, z


def _grid_backward(x, z, h, dh, w_in, w_left, w_up, w_diag, activation, mix: _Mixing):
    height, width = z.shape[-3], z.shape[-2]
    dz = np.empty_like(z)
    below = None
    for j in reversed(range(height)):
        if below is None:
            from_below = np.zeros(z.shape[:-3] + z.shape[-2:], z.dtype)
        else:
            from_below = mix.transpose(below, w_up)
            if w_diag is not None:
                shifted = np.zeros_like(below)
                shifted[..., :-1, :] = below[..., 1:, :]
                from_below = from_below + mix.transpose(shifted, w_diag)
        carry = np.zeros(z.shape[:-3] + z.shape[-1:], z.dtype)
        for k in reversed(range(width)):
            g = dh[..., j, k, :] + from_below[..., k, :] + carry
            dzt = g * activation_grad(z[..., j, k, :], h[..., j, k, :], activation)
            dz[..., j, k, :] = dzt
            carry = mix.transpose(dzt, w_left)
        below = dz[..., j, :, :]
    grads = {
        "in": mix.weight_grad(dz, x),
        "left": mix.weight_grad(dz, _left(h)),
        "up": mix.weight_grad(dz, _up(h)),
        "b": dz.reshape(-1, dz.shape[-1]).sum(axis=0),
    }
    if w_diag is not None:
        grads["diag"] = mix.weight_grad(dz, _diag(h))
    return mix.transpose(dz, w_in), grads


_FULL = _Mixing(elementwise=False)
_DEPTHWISE = _Mixing(elementwise=True)


def rnn2d_forward(cell: Rnn2dCellParams, x: np.ndarray):
    check_channels(cell.in_channels, x.shape[-1], "rnn2d")
    x = _working(x, cell)
    w = [a.astype(x.dtype) for a in (cell.W_ih, cell.W_hk, cell.W_hj, cell.W_jk, cell.b)]
    h, z = _grid_forward(x, *w, cell.activation, _FULL)
    return h, (x, z, h)


def rnn2d_backward(cell: Rnn2dCellParams, state, dy: np.ndarray):
    x, z, h = state
    w = [a.astype(z.dtype) for a in (cell.W_ih, cell.W_hk, cell.W_hj, cell.W_jk)]
    dx, g = _grid_backward(x, z, h, dy, *w, cell.activation, _FULL)
    return dx, {"W_ih": g["in"], "W_hk": g["left"], "W_hj": g["up"], "W_jk": g["diag"], "b": g["b"]}


def ds_rnn_forward(p: DsRnnParams, x: np.ndarray):
    check_channels(p.in_channels, x.shape[-1], "ds_rnn")
    x = _working(x, p)
    cast = lambda a: None if a is None else a.astype(x.dtype)  # noqa: E731
    h, z = _grid_forward(
        x, cast(p.W_ih), cast(p.W_a), cast(p.W_b), cast(p.W_c), cast(p.b), p.activation, _DEPTHWISE
    )
    return linear(h, cast(p.pointwise)), (x, z, h)


def ds_rnn_backward(p: DsRnnParams, state, dy: np.ndarray):
    x, z, h = state
    cast = lambda a: None if a is None else a.astype(z.dtype)  # noqa: E731
    pw = cast(p.pointwise)
    dh = linear_transpose(dy, pw)
    dx, g = _grid_backward(x, z, h, dh, cast(p.W_ih), cast(p.W_a), cast(p.W_b), cast(p.W_c), p.activation, _DEPTHWISE)
    grads = {
        "W_ih": g["in"],
        "W_a": g["left"],
        "W_b": g["up"],
        "b": g["b"],
        "pointwise": outer_sum(dy, h),
    }
    if p.W_c is not None:
        grads["W_c"] = g["diag"]
    return dx, grads


register_layer(LayerKind("rnn2d", rnn2d_forward, rnn2d_backward, lambda p: p.in_channels))
register_layer(LayerKind("ds_rnn", ds_rnn_forward, ds_rnn_backward, lambda p: p.in_channels))


def rnn2d(cell: Rnn2dCellParams, x: ImageTensor):
    return _run_image("rnn2d", cell, x)


def ds_rnn(params: DsRnnParams, x: ImageTensor):
    return _run_image("ds_rnn", params, x)
