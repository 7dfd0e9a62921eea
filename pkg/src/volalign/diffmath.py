"""Dense float64 tensors with tape-based reverse-mode gradients.

Everything trainable in this package is expressed through the ops in this
module. Each op computes its value with numpy and, when a Tape is supplied,
records a backward rule. Column/overall means use exact (fsum) summation so
that mean-based pooling is bitwise invariant to row order.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, InputError

__all__ = [
    "Tensor",
    "Param",
    "Tape",
    "matmul",
    "vecmat",
    "transpose",
    "add",
    "sub",
    "scale",
    "relu",
    "softmax_rows",
    "logsumexp_rows",
    "l2_normalize_rows",
    "mean_rows",
    "mean_all",
    "take_rows",
    "take_diag",
    "concat_cols",
    "stack_rows",
    "dropout",
    "zero_grads",
    "grad_check",
    "GradCheckReport",
    "fnv1a64",
    "derive_seed",
    "make_rng",
]

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data) -> int:
    """64-bit FNV-1a hash of bytes or str; stable across runs and platforms."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _U64
    return h


def derive_seed(seed: int, label: str) -> int:
    """Derive an independent 64-bit sub-seed for a named subsystem."""
    return fnv1a64(f"{seed}:{label}")


def make_rng(seed: int, label: str = "") -> np.random.Generator:
    """Counter-based (Philox) generator; same (seed, label) gives the same stream."""
    key = derive_seed(seed, label) if label else seed
    return np.random.Generator(np.random.Philox(key))


def _fsum_cols(a: np.ndarray) -> np.ndarray:
    # Exactly rounded column sums: fsum is order-independent by construction.
    return np.array([math.fsum(col) for col in a.T.tolist()], dtype=np.float64)


class Tensor:
    """Dense row-major float64 array with a shape; the universal value type."""

    __slots__ = ("data",)

    def __init__(self, data):
        # asarray keeps 0-d scalars 0-d; ascontiguousarray would promote them to 1-d
        self.data = np.asarray(data, dtype=np.float64, order="C")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class Param:
    """A named tensor with an accumulated gradient and a trainable flag."""

    __slots__ = ("value", "grad", "trainable", "name")

    def __init__(self, value, trainable: bool = True, name: str = ""):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.grad = Tensor(np.zeros_like(self.value.data))
        self.trainable = trainable
        self.name = name

    def zero_grad(self) -> None:
        self.grad.data[...] = 0.0

    def __repr__(self) -> str:
        return f"Param({self.name or '?'}, shape={self.value.shape}, trainable={self.trainable})"


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


def _val(x) -> np.ndarray:
    return x.value.data if isinstance(x, Param) else x.data


class Tape:
    """Ordered record of applied ops; one backward pass per forward pass.

    Records are appended in execution order, which is already a topological
    order of the computation. backward() walks them in reverse, accumulating
    gradients into a per-tensor table and into Param.grad for leaves.
    """

    __slots__ = ("_records", "_spent")

    def __init__(self):
        self._records: list[tuple[Tensor, tuple, Callable]] = []
        self._spent = False

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        """Append one op: its output, its input refs, and its backward rule.

        The rule is called as backward(g, accum) where g is the gradient of
        the loss w.r.t. `out` and accum(obj, grad_array) routes per-input
        contributions.
        """
        self._records.append((out, inputs, backward))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        if self._spent:
            raise ContractError("tape already consumed; run a new forward pass")
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ContractError("backward requires a scalar loss tensor")
        self._spent = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

        def accum(obj, g: np.ndarray) -> None:
            if isinstance(obj, Param):
                obj.grad.data += g
            else:
                key = id(obj)
                if key in grads:
                    grads[key] += g
                else:
                    grads[key] = g.copy()

        for out, _inputs, rule in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue
            rule(g, accum)


# ---------------------------------------------------------------------------
# ops


def matmul(a, b, tape: Tape | None = None) -> Tensor:
    """Matrix product [m x k] @ [k x n] with the standard backward rules."""
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")
    out = Tensor(av @ bv)
    if tape is not None:
        def bwd(g, accum, av=av, bv=bv, a=a, b=b):
            accum(a, g @ bv.T)
            accum(b, av.T @ g)
        tape.record(out, (a, b), bwd)
    return out


def vecmat(v, m, tape: Tape | None = None) -> Tensor:
    """Row-vector times matrix: [k] @ [k x n] -> [n]."""
    vv, mv = _val(v), _val(m)
    if vv.ndim != 1 or mv.ndim != 2 or vv.shape[0] != mv.shape[0]:
        raise DimensionError(f"vecmat: incompatible shapes {vv.shape} @ {mv.shape}")
    out = Tensor(vv @ mv)
    if tape is not None:
        def bwd(g, accum, vv=vv, mv=mv, v=v, m=m):
            accum(v, mv @ g)
            accum(m, np.outer(vv, g))
        tape.record(out, (v, m), bwd)
    return out


def transpose(x, tape: Tape | None = None) -> Tensor:
    xv = _val(x)
    if xv.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {xv.shape}")
    out = Tensor(xv.T)
    if tape is not None:
        def bwd(g, accum, x=x):
            accum(x, np.ascontiguousarray(g.T))
        tape.record(out, (x,), bwd)
    return out


def add(a, b, tape: Tape | None = None) -> Tensor:
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise DimensionError(f"add: shape mismatch {av.shape} vs {bv.shape}")
    out = Tensor(av + bv)
    if tape is not None:
        def bwd(g, accum, a=a, b=b):
            accum(a, g)
            accum(b, g)
        tape.record(out, (a, b), bwd)
    return out


def sub(a, b, tape: Tape | None = None) -> Tensor:
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise DimensionError(f"sub: shape mismatch {av.shape} vs {bv.shape}")
    out = Tensor(av - bv)
    if tape is not None:
        def bwd(g, accum, a=a, b=b):
            accum(a, g)
            accum(b, -g)
        tape.record(out, (a, b), bwd)
    return out


def scale(x, c: float, tape: Tape | None = None) -> Tensor:
    xv = _val(x)
    c = float(c)
    out = Tensor(xv * c)
    if tape is not None:
        def bwd(g, accum, x=x, c=c):
            accum(x, g * c)
        tape.record(out, (x,), bwd)
    return out


def relu(x, tape: Tape | None = None) -> Tensor:
    xv = _val(x)
    out = Tensor(np.maximum(xv, 0.0))
    if tape is not None:
        mask = xv > 0.0
        def bwd(g, accum, x=x, mask=mask):
            accum(x, g * mask)
        tape.record(out, (x,), bwd)
    return out


def softmax_rows(x, tape: Tape | None = None) -> Tensor:
    """Row-wise softmax with per-row max subtraction; rows sum to 1."""
    xv = _val(x)
    if xv.ndim != 2:
        raise DimensionError(f"softmax_rows: expected a matrix, got shape {xv.shape}")
    shifted = xv - xv.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor(s)
    if tape is not None:
        def bwd(g, accum, x=x, s=s):
            dot = (g * s).sum(axis=1, keepdims=True)
            accum(x, (g - dot) * s)
        tape.record(out, (x,), bwd)
    return out


def logsumexp_rows(x, tape: Tape | None = None) -> Tensor:
    """Stable log(sum(exp(row))) per row -> [m]; exact inner summation."""
    xv = _val(x)
    if xv.ndim != 2:
        raise DimensionError(f"logsumexp_rows: expected a matrix, got shape {xv.shape}")
    m = xv.max(axis=1, keepdims=True)
    e = np.exp(xv - m)
    sums = np.array([math.fsum(row) for row in e.tolist()], dtype=np.float64)
    out = Tensor(m[:, 0] + np.log(sums))
    if tape is not None:
        soft = e / sums[:, None]
        def bwd(g, accum, x=x, soft=soft):
            accum(x, soft * g[:, None])
        tape.record(out, (x,), bwd)
    return out


def l2_normalize_rows(x, eps: float = 1e-12, tape: Tape | None = None) -> Tensor:
    """Scale each row to unit Euclidean norm; rows with norm < eps pass through."""
    xv = _val(x)
    if xv.ndim != 2:
        raise DimensionError(f"l2_normalize_rows: expected a matrix, got shape {xv.shape}")
    norms = np.sqrt((xv * xv).sum(axis=1))
    safe = norms >= eps
    div = np.where(safe, norms, 1.0)
    y = xv / div[:, None]
    out = Tensor(y)
    if tape is not None:
        def bwd(g, accum, x=x, y=y, div=div, safe=safe):
            dot = (g * y).sum(axis=1, keepdims=True)
            gx = (g - dot * y) / div[:, None]
            gx = np.where(safe[:, None], gx, g)
            accum(x, gx)
        tape.record(out, (x,), bwd)
    return out


def mean_rows(x, tape: Tape | None = None) -> Tensor:
    """Column-wise mean [m x d] -> [d], exactly rounded (row-order invariant)."""
    xv = _val(x)
    if xv.ndim != 2 or xv.shape[0] < 1:
        raise DimensionError(f"mean_rows: expected a non-empty matrix, got shape {xv.shape}")
    m = xv.shape[0]
    out = Tensor(_fsum_cols(xv) / m)
    if tape is not None:
        def bwd(g, accum, x=x, m=m, rows=xv.shape[0]):
            accum(x, np.tile(g / m, (rows, 1)))
        tape.record(out, (x,), bwd)
    return out


def mean_all(x, tape: Tape | None = None) -> Tensor:
    """Mean of every element -> scalar, exactly rounded."""
    xv = _val(x)
    n = xv.size
    if n == 0:
        raise DimensionError("mean_all: empty tensor")
    out = Tensor(math.fsum(xv.ravel().tolist()) / n)
    if tape is not None:
        def bwd(g, accum, x=x, n=n, shape=xv.shape):
            accum(x, np.full(shape, g.item() / n))
        tape.record(out, (x,), bwd)
    return out


def take_rows(x, n: int, tape: Tape | None = None) -> Tensor:
    """First n rows of a matrix."""
    xv = _val(x)
    if xv.ndim != 2:
        raise DimensionError(f"take_rows: expected a matrix, got shape {xv.shape}")
    if not 1 <= n <= xv.shape[0]:
        raise InputError(f"take_rows: n={n} outside [1, {xv.shape[0]}]")
    out = Tensor(xv[:n].copy())
    if tape is not None:
        def bwd(g, accum, x=x, n=n, shape=xv.shape):
            full = np.zeros(shape)
            full[:n] = g
            accum(x, full)
        tape.record(out, (x,), bwd)
    return out


def take_diag(x, tape: Tape | None = None) -> Tensor:
    """Diagonal of a square matrix -> [n]."""
    xv = _val(x)
    if xv.ndim != 2 or xv.shape[0] != xv.shape[1]:
        raise DimensionError(f"take_diag: expected a square matrix, got shape {xv.shape}")
    out = Tensor(np.diagonal(xv).copy())
    if tape is not None:
        def bwd(g, accum, x=x, n=xv.shape[0]):
            full = np.zeros((n, n))
            np.fill_diagonal(full, g)
            accum(x, full)
        tape.record(out, (x,), bwd)
    return out


def concat_cols(parts: Sequence, tape: Tape | None = None) -> Tensor:
    """Concatenate matrices with equal row counts along columns."""
    vals = [_val(p) for p in parts]
    if not vals:
        raise InputError("concat_cols: no inputs")
    rows = vals[0].shape[0]
    for v in vals:
        if v.ndim != 2 or v.shape[0] != rows:
            raise DimensionError(f"concat_cols: row counts differ: {[v.shape for v in vals]}")
    out = Tensor(np.concatenate(vals, axis=1))
    if tape is not None:
        widths = [v.shape[1] for v in vals]
        def bwd(g, accum, parts=tuple(parts), widths=widths):
            ofs = 0
            for p, w in zip(parts, widths):
                accum(p, np.ascontiguousarray(g[:, ofs:ofs + w]))
                ofs += w
        tape.record(out, tuple(parts), bwd)
    return out


def stack_rows(vectors: Sequence, tape: Tape | None = None) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix, one per row."""
    vals = [_val(v) for v in vectors]
    if not vals:
        raise InputError("stack_rows: no inputs")
    d = vals[0].shape[0]
    for v in vals:
        if v.ndim != 1 or v.shape[0] != d:
            raise DimensionError(f"stack_rows: lengths differ: {[v.shape for v in vals]}")
    out = Tensor(np.stack(vals, axis=0))
    if tape is not None:
        def bwd(g, accum, vectors=tuple(vectors)):
            for i, v in enumerate(vectors):
                accum(v, g[i].copy())
        tape.record(out, tuple(vectors), bwd)
    return out


def dropout(x, rate: float, train_mode: bool, rng: np.random.Generator | None = None,
            tape: Tape | None = None) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale survivors by 1/(1-rate).

    Identity in eval mode and at rate 0; the mask comes from the supplied
    generator so training stays reproducible.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not train_mode or rate == 0.0:
        return x if isinstance(x, Tensor) else Tensor(_val(x))
    if rng is None:
        raise ConfigurationError("dropout in train mode requires a random generator")
    xv = _val(x)
    keep = rng.random(xv.shape) >= rate
    factor = 1.0 / (1.0 - rate)
    out = Tensor(xv * keep * factor)
    if tape is not None:
        def bwd(g, accum, x=x, keep=keep, factor=factor):
            accum(x, g * keep * factor)
        tape.record(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# gradient oracle


class GradCheckReport:
    """Per-parameter max relative error of analytic vs central-difference gradients."""

    def __init__(self, per_param: list[tuple[str, float]], tol: float):
        self.per_param = per_param
        self.tol = tol

    @property
    def max_rel_err(self) -> float:
        return max((e for _, e in self.per_param), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def __repr__(self) -> str:
        lines = [f"grad_check tol={self.tol:g} max={self.max_rel_err:.3e} "
                 f"{'PASS' if self.passed else 'FAIL'}"]
        for name, err in self.per_param:
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def grad_check(f: Callable[[Tape | None], Tensor], params: Sequence[Param],
               h: float = 1e-5, tol: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of a scalar function against central differences.

    `f(tape)` must rebuild the forward pass from the current parameter values
    and be deterministic (fix any dropout seed inside). Relative error per
    entry is |a - n| / max(1, |a|, |n|); the check passes when the maximum
    over all entries of all params is <= tol.
    """
    zero_grads(params)
    tape = Tape()
    loss = f(tape)
    tape.backward(loss)
    analytic = [p.grad.data.copy() for p in params]

    per_param: list[tuple[str, float]] = []
    for i, (p, a) in enumerate(zip(params, analytic)):
        flat = p.value.data.reshape(-1)
        aflat = a.reshape(-1)
        worst = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f(None).item()
            flat[j] = orig - h
            fm = f(None).item()
            flat[j] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(aflat[j] - num) / max(1.0, abs(aflat[j]), abs(num))
            if err > worst:
                worst = err
        per_param.append((p.name or f"param{i}", worst))

    zero_grads(params)
    return GradCheckReport(per_param, tol)
