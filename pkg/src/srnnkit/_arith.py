"""Arithmetic primitives shared by every layer, with optional MAC instrumentation.

All matrix products and bias additions in the layer code go through
:func:`linear` and :func:`add_bias`, so a :class:`MacCounter` activated with
``with MacCounter() as c:`` sees every scalar multiply and bias application a
forward pass performs. Activations and elementwise merges are not counted.
"""

from __future__ import annotations

import contextvars
import math

import numpy as np

_active: contextvars.ContextVar["MacCounter | None"] = contextvars.ContextVar("mac_counter", default=None)


class MacCounter:
    """Counts multiplies and bias-element applications during a forward pass.

    Convention: every scalar multiply counts as one MAC and every bias-vector
    element added counts as one MAC. Activation functions and the elementwise
    sum that merges two scan directions are free.
    """

    convention = "1 MAC per scalar multiply + 1 MAC per bias element applied; activations and merges free"

    def __init__(self):
        self.multiplies = 0
        self.bias_adds = 0
        self._token = None

    @property
    def total(self) -> int:
        return self.multiplies + self.bias_adds

    def __enter__(self):
        self._token = _active.set(self)
        return self

    def __exit__(self, *exc):
        _active.reset(self._token)
        return False


def linear(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """``x @ weight.T`` over the last axis; ``weight`` is ``(out, in)``.

    einsum keeps each output row's reduction order independent of the leading
    shape (BLAS matmul does not), so a batched call is bitwise equal to the
    per-row calls.
    """
    counter = _active.get()
    if counter is not None:
        counter.multiplies += math.prod(x.shape[:-1]) * weight.shape[0] * weight.shape[1]
    return np.einsum("...i,oi->...o", x, weight)


def multiply(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Elementwise product against a per-channel weight vector."""
    counter = _active.get()
    if counter is not None:
        counter.multiplies += x.size
    return x * weight


def add_bias(z: np.ndarray, bias: np.ndarray) -> np.ndarray:
    counter = _active.get()
    if counter is not None:
        counter.bias_adds += z.size
    return z + bias


def linear_transpose(g: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """``g @ weight``: pulls an output-side gradient back through :func:`linear`."""
    return np.einsum("...o,oi->...i", g, weight)


def outer_sum(g: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sum of outer products ``g_n v_n^T`` over every leading position."""
    return np.einsum("no,ni->oi", g.reshape(-1, g.shape[-1]), v.reshape(-1, v.shape[-1]))
