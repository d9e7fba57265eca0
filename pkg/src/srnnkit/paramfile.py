"""Plain-text parameter files.

A file is a sequence of blocks. Each block is a header line followed by the
block's arrays as whitespace-separated floats (row-major, in the order
listed)::

    RNNCELL C_in C_out act          W_ih W_hh b_ih b_hh
    SRNN                            (two RNNCELL blocks: row cell, column cell)
    RNN2D C_in C_out act            W_ih W_hk W_hj W_jk b
    DSRNN C_in C_out act diag       W_ih W_a W_b [W_c] b pointwise
    CONV C_in C_out k stride act bias   weight(C_out,k,k,C_in) [bias]
    FC C_in C_out                   weight bias
    GAP

Floats are written with ``repr`` so values round-trip exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .harness import ConvParams, FcParams
from .params import RnnCellParams, SrnnParams
from .rnn2d import DsRnnParams, Rnn2dCellParams


class ParamFileError(ValueError):
    pass


def _fmt(a: np.ndarray) -> str:
    a = np.asarray(a)
    rows = a.reshape(a.shape[0], -1) if a.ndim > 1 else a.reshape(1, -1)
    return "\n".join(" ".join(repr(float(v)) for v in row) for row in rows)


def _block(header: str, arrays) -> list[str]:
    return [header] + [_fmt(a) for a in arrays if a is not None]


def dump_params(p) -> str:
    lines = _dump(p)
    return "\n".join(lines) + "\n"


def _dump(p) -> list[str]:
    if p is None:
        return ["GAP"]
    if isinstance(p, RnnCellParams):
        return _block(f"RNNCELL {p.in_channels} {p.out_channels} {p.activation}", [p.W_ih, p.W_hh, p.b_ih, p.b_hh])
    if isinstance(p, SrnnParams):
        return ["SRNN"] + _dump(p.row) + _dump(p.col)
    if isinstance(p, Rnn2dCellParams):
        return _block(
            f"RNN2D {p.in_channels} {p.out_channels} {p.activation}", [p.W_ih, p.W_hk, p.W_hj, p.W_jk, p.b]
        )
    if isinstance(p, DsRnnParams):
        return _block(
            f"DSRNN {p.in_channels} {p.out_channels} {p.activation} {int(p.diagonal)}",
            [p.W_ih, p.W_a, p.W_b, p.W_c, p.b, p.pointwise],
        )
    if isinstance(p, ConvParams):
        return _block(
            f"CONV {p.in_channels} {p.out_channels} {p.kernel} {p.stride} {p.activation} {int(p.bias is not None)}",
            [p.weight, p.bias],
        )
    if isinstance(p, FcParams):
        return _block(f"FC {p.in_channels} {p.out_channels}", [p.weight, p.bias])
    raise TypeError(f"cannot serialize {type(p).__name__}")


def save_params(path, params) -> None:
    """Write one parameter object, or a list of them (``None`` entries become ``GAP``)."""
    items = params if isinstance(params, (list, tuple)) else [params]
    Path(path).write_text("".join(dump_params(p) for p in items))


class _Reader:
    def __init__(self, text: str, dtype):
        self.tokens = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0]
            self.tokens += [(tok, lineno) for tok in line.split()]
        self.pos = 0
        self.dtype = dtype

    def done(self) -> bool:
        return self.pos >= len(self.tokens)

    def word(self) -> tuple[str, int]:
        if self.done():
            last = self.tokens[-1][1] if self.tokens else 0
            raise ParamFileError(f"line {last}: unexpected end of file")
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def integer(self) -> int:
        tok, line = self.word()
        try:
            return int(tok)
        except ValueError:
            raise ParamFileError(f"line {line}: expected an integer, got {tok!r}") from None

    def array(self, *shape) -> np.ndarray:
        n = int(np.prod(shape))
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            tok, line = self.word()
            try:
                out[i] = float(tok)
            except ValueError:
                raise ParamFileError(f"line {line}: expected a number, got {tok!r}") from None
            if not np.isfinite(out[i]):
                raise ParamFileError(f"line {line}: non-finite value {tok!r}")
        return out.reshape(shape).astype(self.dtype)


def _read_block(r: _Reader):
    kind, line = r.word()
    try:
        if kind == "GAP":
            return None
        if kind == "RNNCELL":
            ci, co = r.integer(), r.integer()
            act = r.word()[0]
            return RnnCellParams(r.array(co, ci), r.array(co, co), r.array(co), r.array(co), act)
        if kind == "SRNN":
            row, col = _read_block(r), _read_block(r)
            if not (isinstance(row, RnnCellParams) and isinstance(col, RnnCellParams)):
                raise ParamFileError(f"line {line}: SRNN must contain two RNNCELL blocks")
            return SrnnParams(row, col)
        if kind == "RNN2D":
            ci, co = r.integer(), r.integer()
            act = r.word()[0]
            return Rnn2dCellParams(
                r.array(co, ci), r.array(co, co), r.array(co, co), r.array(co, co), r.array(co), act
            )
        if kind == "DSRNN":
            ci, co = r.integer(), r.integer()
            act = r.word()[0]
            diag = bool(r.integer())
            w_ih, w_a, w_b = r.array(ci), r.array(ci), r.array(ci)
            w_c = r.array(ci) if diag else None
            return DsRnnParams(w_ih, w_a, w_b, r.array(ci), r.array(co, ci), act, w_c)
        if kind == "CONV":
            ci, co, k, s = r.integer(), r.integer(), r.integer(), r.integer()
            act = r.word()[0]
            has_bias = bool(r.integer())
            weight = r.array(co, k, k, ci)
            return ConvParams(weight, r.array(co) if has_bias else None, s, act)
        if kind == "FC":
            ci, co = r.integer(), r.integer()
            return FcParams(r.array(co, ci), r.array(co))
    except ParamFileError:
        raise
    except ValueError as exc:
        raise ParamFileError(f"line {line}: invalid {kind} block: {exc}") from None
    raise ParamFileError(f"line {line}: unknown block type {kind!r}")


def loads_params(text: str, dtype=np.float64) -> list:
    r = _Reader(text, dtype)
    out = []
    while not r.done():
        out.append(_read_block(r))
    return out


def load_params(path, dtype=np.float64) -> list:
    return loads_params(Path(path).read_text(), dtype)


def load_single(path, dtype=np.float64):
    blocks = load_params(path, dtype)
    if len(blocks) != 1:
        raise ParamFileError(f"{path}: expected exactly one parameter block, found {len(blocks)}")
    return blocks[0]
