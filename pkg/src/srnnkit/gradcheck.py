"""Analytic-vs-finite-difference gradient comparison for every layer kind."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rnn2d as _rnn2d  # noqa: F401  (registers rnn2d / ds_rnn)
from .harness import (
    ConvParams,
    FcParams,
    conv2d_backward,
    conv2d_forward,
    fc_backward,
    fc_forward,
    global_avg_pool,
    global_avg_pool_backward,
)
from .layers import LayerKind, backward, finite_diff_grads, register_layer, run_forward, sws_backward, sws_forward
from .params import Params, RnnCellParams, SrnnParams
from .rnn2d import DsRnnParams, Rnn2dCellParams

# Denominator floor for relative error: coordinates whose gradient is ~0 are
# judged on absolute error instead (finite-difference noise is ~1e-10 here).
REL_FLOOR = 1e-4

KINDS = ("rnn_seq", "rnn_rows", "srnn", "ws_birnn_rows", "sws_birnn", "rnn2d", "ds_rnn", "conv2d", "fc", "crnn")


@dataclass(frozen=True, eq=False)
class CrnnParams(Params):
    """conv -> SWS-BiRNN -> global average pool -> fully connected."""

    conv: ConvParams
    rnn: SrnnParams
    fc: FcParams

    @property
    def in_channels(self) -> int:
        return self.conv.in_channels


def _crnn_forward(p: CrnnParams, x):
    a, s_conv = conv2d_forward(p.conv, x)
    b, s_rnn = sws_forward(p.rnn, a)
    pooled = global_avg_pool(b)
    logits, s_fc = fc_forward(p.fc, pooled)
    return logits, (s_conv, s_rnn, b.shape, s_fc)


def _crnn_backward(p: CrnnParams, state, dy):
    s_conv, s_rnn, b_shape, s_fc = state
    d_pooled, g_fc = fc_backward(p.fc, s_fc, dy)
    d_b = global_avg_pool_backward(b_shape, d_pooled)
    d_a, g_rnn = sws_backward(p.rnn, s_rnn, d_b)
    dx, g_conv = conv2d_backward(p.conv, s_conv, d_a)
    grads = {f"conv.{k}": v for k, v in g_conv.items()}
    grads.update({f"rnn.{k}": v for k, v in g_rnn.items()})
    grads.update({f"fc.{k}": v for k, v in g_fc.items()})
    return dx, grads


register_layer(LayerKind("crnn", _crnn_forward, _crnn_backward, lambda p: p.in_channels))


def _jitter(params, rng, scale=0.3):
    """Perturb every array so biases and weights are generic (non-zero, asymmetric)."""
    return params.with_arrays(
        {k: v + rng.normal(0.0, scale, v.shape) * (0.5 if k.endswith("W_hh") else 1.0) for k, v in params.named_arrays().items()}
    )


def random_instance(kind: str, rng: np.random.Generator, activation: str | None = None, shape=None):
    """Random double-precision ``(params, x)`` for ``kind``.

    ``shape`` is ``(H, W, C_in, C_mid, C_out)``; unspecified sizes are drawn
    with H, W <= 8 and channels <= 6.
    """
    if shape is None:
        h, w = (int(v) for v in rng.integers(1, 9, 2))
        c_in, c_mid, c_out = (int(v) for v in rng.integers(1, 7, 3))
    else:
        h, w, c_in, c_mid, c_out = shape
    act = activation or ("tanh" if rng.random() < 0.5 else "identity")

    if kind in ("rnn_seq", "rnn_rows", "ws_birnn_rows"):
        params = _jitter(RnnCellParams.init(c_in, c_out, rng, act), rng)
    elif kind in ("srnn", "sws_birnn"):
        params = _jitter(SrnnParams.init(c_in, c_mid, c_out, rng, act), rng)
    elif kind == "rnn2d":
        params = _jitter(Rnn2dCellParams.init(c_in, c_out, rng, act), rng, 0.2)
    elif kind == "ds_rnn":
        params = _jitter(DsRnnParams.init(c_in, c_out, rng, act, diagonal=bool(rng.random() < 0.5)), rng, 0.2)
    elif kind == "conv2d":
        k = int(rng.choice([1, 3, 5]))
        params = _jitter(
            ConvParams.init(c_in, c_out, k, rng, stride=int(rng.integers(1, 3)), activation=act, bias=bool(rng.random() < 0.7)),
            rng,
            0.1,
        )
    elif kind == "fc":
        params = _jitter(FcParams.init(c_in, c_out, rng), rng)
        return params, rng.normal(size=(c_in,))
    elif kind == "crnn":
        conv = _jitter(ConvParams.init(c_in, c_mid, 3, rng, activation="tanh"), rng, 0.1)
        rnn = _jitter(SrnnParams.init(c_mid, c_mid, c_out, rng, "tanh"), rng)
        fc = _jitter(FcParams.init(c_out, max(2, c_out), rng), rng)
        params = CrnnParams(conv, rnn, fc)
    else:
        raise ValueError(f"no random instance generator for {kind!r}")
    x = rng.normal(size=(w, c_in) if kind == "rnn_seq" else (h, w, c_in))
    return params, x


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), REL_FLOOR)


@dataclass
class GradCheckResult:
    kind: str
    errors: dict[str, float]
    worst_group: str
    worst_index: tuple
    worst_analytic: float
    worst_numeric: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    def lines(self) -> list[str]:
        out = [f"{self.kind} {group} max_rel_err={err!r}" for group, err in self.errors.items()]
        out.append(
            f"{self.kind} worst {self.worst_group}{list(self.worst_index)} "
            f"analytic={self.worst_analytic!r} numeric={self.worst_numeric!r}"
        )
        return out


def check_gradients(kind: str, params, x, rng: np.random.Generator, step: float = 1e-5) -> GradCheckResult:
    """Compare :func:`backward` against central differences of ``sum(out * R)``.

    ``R`` is a random projection drawn from ``rng``; for ``crnn`` the loss is
    softmax cross-entropy against a random label instead.
    """
    out, cache = run_forward(kind, params, x)
    if kind == "crnn":
        label = int(rng.integers(0, out.shape[-1]))

        def loss(o):
            s = o - o.max()
            return float(np.log(np.exp(s).sum()) - s[label])

        s = out - out.max()
        d_out = np.exp(s) / np.exp(s).sum()
        d_out[label] -= 1
    else:
        proj = rng.normal(size=out.shape)

        def loss(o):
            return float(np.sum(o * proj))

        d_out = proj
    analytic = backward(kind, params, cache, d_out).all_arrays()
    numeric = finite_diff_grads(kind, params, x, loss, step).all_arrays()
    errors, worst = {}, None
    for group, a in analytic.items():
        rel = relative_error(a, numeric[group])
        errors[group] = float(rel.max()) if rel.size else 0.0
        if rel.size:
            idx = np.unravel_index(int(np.argmax(rel)), rel.shape)
            if worst is None or rel[idx] > worst[0]:
                worst = (float(rel[idx]), group, tuple(int(i) for i in idx), float(a[idx]), float(numeric[group][idx]))
    _, group, idx, a_val, n_val = worst
    return GradCheckResult(kind, errors, group, idx, a_val, n_val)


def min_abs_preactivation(cache_state) -> float:
    """Smallest |pre-activation| anywhere in a (possibly nested) cache state."""
    best = np.inf
    stack = [cache_state]
    while stack:
        item = stack.pop()
        if isinstance(item, tuple):
            if len(item) == 3 and all(isinstance(v, np.ndarray) for v in item):
                best = min(best, float(np.min(np.abs(item[1]))))
            else:
                stack.extend(item)
    return best
