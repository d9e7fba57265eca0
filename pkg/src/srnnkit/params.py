"""Immutable parameter containers and the gradient bundle that mirrors them."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

ACTIVATIONS = ("tanh", "identity", "relu")


def activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(z)
    if activation == "identity":
        return z.copy()
    if activation == "relu":
        return np.maximum(z, 0)
    raise ValueError(f"unknown activation {activation!r}")


def activation_grad(z: np.ndarray, h: np.ndarray, activation: str) -> np.ndarray:
    """Derivative of the activation at pre-activation ``z`` (``h`` is its output)."""
    if activation == "tanh":
        return 1 - h * h
    if activation == "identity":
        return np.ones_like(z)
    if activation == "relu":
        return (z > 0).astype(z.dtype)
    raise ValueError(f"unknown activation {activation!r}")


def _freeze(a, dtype=None) -> np.ndarray:
    a = np.array(a, dtype=dtype if dtype is not None else np.result_type(np.asarray(a).dtype, np.float32), copy=True)
    if not np.all(np.isfinite(a)):
        raise ValueError("parameter array contains non-finite values")
    a.flags.writeable = False
    return a


class Params:
    """Mixin for frozen dataclasses whose fields are arrays or nested Params.

    ``named_arrays`` flattens to ``{"row.W_ih": ...}`` style keys and
    ``with_arrays`` rebuilds a copy with some of them replaced.
    """

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Params):
                out.update({f"{f.name}.{k}": a for k, a in v.named_arrays().items()})
            elif isinstance(v, np.ndarray):
                out[f.name] = v
        return out

    def with_arrays(self, arrays: dict[str, np.ndarray]):
        own, nested = {}, {}
        for key, value in arrays.items():
            head, _, rest = key.partition(".")
            if rest:
                nested.setdefault(head, {})[rest] = value
            else:
                own[head] = value
        for head, sub in nested.items():
            own[head] = getattr(self, head).with_arrays(sub)
        unknown = set(own) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise KeyError(f"unknown parameter(s) {sorted(unknown)}")
        return dataclasses.replace(self, **own)

    def astype(self, dtype):
        return self.with_arrays({k: np.asarray(v, dtype=dtype) for k, v in self.named_arrays().items()})

    @property
    def dtype(self):
        return np.result_type(*self.named_arrays().values())

    def count(self) -> int:
        return sum(a.size for a in self.named_arrays().values())

    def freeze_fields(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (np.ndarray, list, tuple)):
                object.__setattr__(self, f.name, _freeze(v))


@dataclass(frozen=True, eq=False)
class RnnCellParams(Params):
    """Weights of one recurrent cell ``h_t = act(W_ih x_t + b_ih + W_hh h_{t-1} + b_hh)``.

    The two biases are kept separate, as in PyTorch's ``nn.RNN``.
    """

    W_ih: np.ndarray
    W_hh: np.ndarray
    b_ih: np.ndarray
    b_hh: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        self.freeze_fields()
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        c_out, c_in = self.W_ih.shape if self.W_ih.ndim == 2 else (None, None)
        if c_out is None:
            raise ShapeError(f"W_ih must be 2-d, got shape {self.W_ih.shape}")
        if self.W_hh.shape != (c_out, c_out):
            raise ShapeError(f"W_hh must be {(c_out, c_out)}, got {self.W_hh.shape}")
        for name in ("b_ih", "b_hh"):
            if getattr(self, name).shape != (c_out,):
                raise ShapeError(f"{name} must be ({c_out},), got {getattr(self, name).shape}")

    @property
    def in_channels(self) -> int:
        return self.W_ih.shape[1]

    @property
    def out_channels(self) -> int:
        return self.W_ih.shape[0]

    @classmethod
    def init(cls, c_in: int, c_out: int, rng: np.random.Generator, activation="tanh", dtype=np.float64):
        """Uniform init in +-1/sqrt(C_in) for W_ih and +-1/sqrt(C_out) for W_hh; zero biases."""
        a, b = 1 / np.sqrt(c_in), 1 / np.sqrt(c_out)
        return cls(
            rng.uniform(-a, a, (c_out, c_in)).astype(dtype),
            rng.uniform(-b, b, (c_out, c_out)).astype(dtype),
            np.zeros(c_out, dtype),
            np.zeros(c_out, dtype),
            activation,
        )

    @classmethod
    def scalar(cls, w_ih: float, w_hh: float, b_ih: float = 0.0, b_hh: float = 0.0, activation="identity"):
        return cls(np.array([[w_ih]]), np.array([[w_hh]]), np.array([b_ih]), np.array([b_hh]), activation)


@dataclass(frozen=True, eq=False)
class SrnnParams(Params):
    """Row cell (C_in -> C_mid) followed by column cell (C_mid -> C_out)."""

    row: RnnCellParams
    col: RnnCellParams

    def __post_init__(self):
        if self.row.out_channels != self.col.in_channels:
            raise ShapeError(
                f"row cell emits {self.row.out_channels} channels but column cell expects {self.col.in_channels}"
            )

    @property
    def in_channels(self) -> int:
        return self.row.in_channels

    @property
    def mid_channels(self) -> int:
        return self.row.out_channels

    @property
    def out_channels(self) -> int:
        return self.col.out_channels

    @classmethod
    def init(cls, c_in, c_mid, c_out, rng, activation="tanh", dtype=np.float64):
        return cls(
            RnnCellParams.init(c_in, c_mid, rng, activation, dtype),
            RnnCellParams.init(c_mid, c_out, rng, activation, dtype),
        )


@dataclass
class GradBundle:
    """Gradients keyed like ``Params.named_arrays()`` plus the input gradient."""

    params: dict[str, np.ndarray]
    d_input: np.ndarray

    def __getitem__(self, key):
        return self.params[key]

    def all_arrays(self) -> dict[str, np.ndarray]:
        return {**self.params, "input": self.d_input}
