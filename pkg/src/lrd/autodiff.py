"""Tape-based reverse-mode differentiation over numpy arrays.

Only the handful of primitives the detector, compressor and decoder need are
provided. Every op records a closure on the tape that pushes the output
gradient back into its inputs; ``Tape.backward`` replays them in reverse.

Parameters live in float32; reductions accumulate in float64. Passing float64
arrays in (as the gradient checker does) keeps the whole graph in float64.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .core import ContractError


class Var:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Var(shape={self.data.shape}, name={self.name!r})"


def _acc(v: Var, g) -> None:
    if not v.requires_grad:
        return
    if v.grad is None:
        v.grad = np.array(g, dtype=v.data.dtype, copy=True)
    else:
        v.grad += g


class ParamSet(dict):
    """Named float arrays. Plain dict semantics plus a few conveniences."""

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.items()})

    def scaled(self, s: float) -> "ParamSet":
        return ParamSet({k: (v * s).astype(v.dtype) for k, v in self.items()})

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self.items()})

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({k: v.astype(dtype) for k, v in self.items()})

    def n_params(self) -> int:
        return int(sum(v.size for v in self.values()))

    def subset(self, prefix: str) -> "ParamSet":
        return ParamSet({k: v for k, v in self.items() if k.startswith(prefix)})


class Tape:
    """Ordered record of primitive ops. One tape per forward pass."""

    def __init__(self):
        self.ops: list[tuple[Var, Callable[[], None]]] = []

    def __len__(self):
        return len(self.ops)

    def _rec(self, out: Var, fn: Callable[[], None]) -> Var:
        out.requires_grad = True
        self.ops.append((out, fn))
        return out

    def _track(self, *xs: Var) -> bool:
        return any(x.requires_grad for x in xs)

    # -- leaves ---------------------------------------------------------
    def bind(self, params: ParamSet, names: Iterable[str] | None = None) -> dict[str, Var]:
        names = params.keys() if names is None else names
        return {k: Var(params[k], requires_grad=True, name=k) for k in names}

    @staticmethod
    def const(x) -> Var:
        return Var(np.asarray(x))

    # -- elementwise ----------------------------------------------------
    def add(self, a: Var, b: Var) -> Var:
        if a.shape != b.shape:
            raise ContractError(f"add shape mismatch {a.shape} vs {b.shape}")
        out = Var(a.data + b.data)
        if not self._track(a, b):
            return out

        def bw():
            _acc(a, out.grad)
            _acc(b, out.grad)

        return self._rec(out, bw)

    def sub(self, a: Var, b: Var) -> Var:
        if a.shape != b.shape:
            raise ContractError(f"sub shape mismatch {a.shape} vs {b.shape}")
        out = Var(a.data - b.data)
        if not self._track(a, b):
            return out

        def bw():
            _acc(a, out.grad)
            _acc(b, -out.grad)

        return self._rec(out, bw)

    def scale(self, a: Var, s: float) -> Var:
        out = Var(a.data * s)
        if not self._track(a):
            return out
        return self._rec(out, lambda: _acc(a, out.grad * s))

    def mul(self, a: Var, b: Var) -> Var:
        if a.shape != b.shape:
            raise ContractError(f"mul shape mismatch {a.shape} vs {b.shape}")
        out = Var(a.data * b.data)
        if not self._track(a, b):
            return out

        def bw():
            _acc(a, out.grad * b.data)
            _acc(b, out.grad * a.data)

        return self._rec(out, bw)

    def relu(self, x: Var) -> Var:
        mask = x.data > 0
        out = Var(np.where(mask, x.data, 0).astype(x.data.dtype))
        if not self._track(x):
            return out
        return self._rec(out, lambda: _acc(x, out.grad * mask))

    def add_scalar(self, x: Var, c: float) -> Var:
        out = Var(x.data + np.asarray(c, dtype=x.data.dtype))
        if not self._track(x):
            return out
        return self._rec(out, lambda: _acc(x, out.grad))

    # -- shape ----------------------------------------------------------
    def reshape(self, x: Var, shape) -> Var:
        out = Var(x.data.reshape(shape))
        if not self._track(x):
            return out
        return self._rec(out, lambda: _acc(x, out.grad.reshape(x.shape)))

    def transpose(self, x: Var, axes) -> Var:
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out = Var(np.ascontiguousarray(x.data.transpose(axes)))
        if not self._track(x):
            return out
        return self._rec(out, lambda: _acc(x, out.grad.transpose(inv)))

    def slice_cols(self, x: Var, lo: int, hi: int) -> Var:
        """Columns lo:hi of a 2-D Var."""
        out = Var(np.ascontiguousarray(x.data[:, lo:hi]))
        if not self._track(x):
            return out

        def bw():
            g = np.zeros_like(x.data)
            g[:, lo:hi] = out.grad
            _acc(x, g)

        return self._rec(out, bw)

    def index(self, x: Var, idx) -> Var:
        """Gather along axis 0 with an integer array."""
        idx = np.asarray(idx)
        out = Var(x.data[idx])
        if not self._track(x):
            return out

        def bw():
            g = np.zeros_like(x.data)
            np.add.at(g, idx, out.grad)
            _acc(x, g)

        return self._rec(out, bw)

    def concat(self, xs: list[Var], axis: int = 0) -> Var:
        out = Var(np.concatenate([x.data for x in xs], axis=axis))
        if not self._track(*xs):
            return out
        bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

        def bw():
            for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(lo, hi)
                _acc(x, out.grad[tuple(sl)])

        return self._rec(out, bw)

    # -- layers ---------------------------------------------------------
    def linear(self, x: Var, w: Var, b: Var | None = None) -> Var:
        """x (N, Din) @ w (Din, Dout) + b (Dout,)."""
        if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ContractError(f"linear shape mismatch x{x.shape} w{w.shape}")
        if b is not None and b.shape != (w.shape[1],):
            raise ContractError(f"linear bias shape {b.shape} != ({w.shape[1]},)")
        y = x.data @ w.data
        if b is not None:
            y = y + b.data
        out = Var(y)
        if not self._track(x, w, *(b,) if b is not None else ()):
            return out

        def bw():
            g = out.grad
            _acc(x, g @ w.data.T)
            _acc(w, x.data.T @ g)
            if b is not None:
                _acc(b, g.sum(axis=0, dtype=np.float64).astype(b.data.dtype))

        return self._rec(out, bw)

    def conv2d(self, x: Var, k: Var, b: Var | None = None, stride: int = 1, pad: int = 0) -> Var:
        """NCHW convolution (cross-correlation) via im2col."""
        if x.data.ndim != 4 or k.data.ndim != 4 or x.shape[1] != k.shape[1]:
            raise ContractError(f"conv2d shape mismatch x{x.shape} k{k.shape}")
        N, C, H, W = x.shape
        O, _, kh, kw = k.shape
        Ho = (H + 2 * pad - kh) // stride + 1
        Wo = (W + 2 * pad - kw) // stride + 1
        if Ho < 1 or Wo < 1:
            raise ContractError("conv2d output would be empty")
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        s0, s1, s2, s3 = xp.strides
        patches = np.lib.stride_tricks.as_strided(
            xp, (N, Ho, Wo, C, kh, kw), (s0, s2 * stride, s3 * stride, s1, s2, s3), writeable=False
        )
        cols = patches.reshape(N * Ho * Wo, C * kh * kw)
        kmat = k.data.reshape(O, -1)
        y = cols @ kmat.T
        if b is not None:
            y = y + b.data
        out = Var(np.ascontiguousarray(y.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)))
        if not self._track(x, k, *(b,) if b is not None else ()):
            return out

        def bw():
            g = out.grad.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, O)
            _acc(k, (g.T @ cols).reshape(k.shape))
            if b is not None:
                _acc(b, g.sum(axis=0, dtype=np.float64).astype(b.data.dtype))
            if x.requires_grad:
                dcols = (g @ kmat).reshape(N, Ho, Wo, C, kh, kw)
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                            :, :, :, :, i, j
                        ].transpose(0, 3, 1, 2)
                _acc(x, dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp)

        return self._rec(out, bw)

    def avgpool(self, x: Var, factor: int) -> Var:
        """Non-overlapping mean pool over the last two axes."""
        *lead, H, W = x.shape
        if H % factor or W % factor:
            raise ContractError(f"avgpool factor {factor} does not divide {H}x{W}")
        f = factor
        y = x.data.reshape(*lead, H // f, f, W // f, f).mean(axis=(-3, -1), dtype=np.float64)
        out = Var(y.astype(x.data.dtype))
        if not self._track(x):
            return out

        def bw():
            g = out.grad / (f * f)
            g = np.repeat(np.repeat(g, f, axis=-2), f, axis=-1)
            _acc(x, g)

        return self._rec(out, bw)

    def upsample(self, x: Var, factor: int) -> Var:
        """Nearest-neighbour upsampling over the last two axes."""
        f = factor
        out = Var(np.repeat(np.repeat(x.data, f, axis=-2), f, axis=-1))
        if not self._track(x):
            return out

        def bw():
            *lead, H, W = out.grad.shape
            _acc(x, out.grad.reshape(*lead, H // f, f, W // f, f).sum(axis=(-3, -1)))

        return self._rec(out, bw)

    def film(self, x: Var, gamma: Var, beta: Var) -> Var:
        """Per-channel gamma * x + beta.

        x is (N, C, ...) and gamma/beta are (C,) or (N, C).
        """
        C = x.shape[1]
        if gamma.shape[-1] != C or beta.shape[-1] != C or gamma.data.ndim > 2 or beta.data.ndim > 2:
            raise ContractError(f"film shapes x{x.shape} gamma{gamma.shape} beta{beta.shape}")
        extra = (1,) * (x.data.ndim - 2)

        def view(p):
            return p.reshape((1, C) + extra) if p.ndim == 1 else p.reshape(p.shape + extra)

        gv, bv = view(gamma.data), view(beta.data)
        out = Var(gv * x.data + bv)
        if not self._track(x, gamma, beta):
            return out
        red = tuple(range(2, x.data.ndim))

        def bw():
            g = out.grad
            _acc(x, g * gv)
            dg = (g * x.data).sum(axis=red, dtype=np.float64) if red else (g * x.data)
            db = g.sum(axis=red, dtype=np.float64) if red else g
            if gamma.data.ndim == 1:
                dg, db = dg.sum(axis=0), db.sum(axis=0)
            _acc(gamma, dg.astype(gamma.data.dtype))
            _acc(beta, np.asarray(db).astype(beta.data.dtype))

        return self._rec(out, bw)

    # -- reductions and losses -----------------------------------------
    def sum(self, x: Var) -> Var:
        out = Var(np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype))
        if not self._track(x):
            return out
        return self._rec(out, lambda: _acc(x, np.broadcast_to(out.grad, x.shape)))

    def mean(self, x: Var) -> Var:
        n = x.data.size
        out = Var(np.asarray(x.data.mean(dtype=np.float64), dtype=x.data.dtype))
        if not self._track(x):
            return out
        return self._rec(out, lambda: _acc(x, np.broadcast_to(out.grad / n, x.shape)))

    def sumsq(self, x: Var) -> Var:
        out = Var(np.asarray(np.sum(np.square(x.data, dtype=np.float64)), dtype=x.data.dtype))
        if not self._track(x):
            return out
        return self._rec(out, lambda: _acc(x, 2.0 * out.grad * x.data))

    def mse(self, a: Var, b: Var) -> Var:
        """Mean squared difference; gradient flows into both sides."""
        if a.shape != b.shape:
            raise ContractError(f"mse shape mismatch {a.shape} vs {b.shape}")
        d = a.data.astype(np.float64) - b.data
        n = d.size
        out = Var(np.asarray(np.mean(d * d), dtype=a.data.dtype))
        if not self._track(a, b):
            return out

        def bw():
            g = (2.0 * out.grad / n) * d
            _acc(a, g.astype(a.data.dtype))
            _acc(b, (-g).astype(b.data.dtype))

        return self._rec(out, bw)

    def softmax_ce(self, logits: Var, target, weight=None) -> Var:
        """Summed cross-entropy of rows of ``logits`` (M, K).

        ``target`` is either integer class ids (M,) or soft distributions
        (M, K). ``weight`` optionally scales each row.
        """
        z = logits.data.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        target = np.asarray(target)
        if target.ndim == 1:
            t = np.zeros_like(logp)
            t[np.arange(len(target)), target] = 1.0
        else:
            t = target.astype(np.float64)
        w = np.ones(len(z)) if weight is None else np.asarray(weight, dtype=np.float64)
        out = Var(np.asarray(-(w[:, None] * t * logp).sum(), dtype=logits.data.dtype))
        if not self._track(logits):
            return out

        def bw():
            p = np.exp(logp)
            g = w[:, None] * (p * t.sum(axis=1, keepdims=True) - t)
            _acc(logits, (out.grad * g).astype(logits.data.dtype))

        return self._rec(out, bw)

    def smooth_l1(self, pred: Var, target, weight=None, beta: float = 1.0) -> Var:
        """Summed Huber-style loss against a constant target."""
        d = pred.data.astype(np.float64) - np.asarray(target, dtype=np.float64)
        ad = np.abs(d)
        quad = ad < beta
        val = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
        w = np.ones_like(d) if weight is None else np.broadcast_to(np.asarray(weight, dtype=np.float64), d.shape)
        out = Var(np.asarray((w * val).sum(), dtype=pred.data.dtype))
        if not self._track(pred):
            return out

        def bw():
            g = np.where(quad, d / beta, np.sign(d)) * w
            _acc(pred, (out.grad * g).astype(pred.data.dtype))

        return self._rec(out, bw)

    def weighted_sum(self, terms: list[tuple[float, Var]]) -> Var:
        """Scalar sum_i c_i * v_i over scalar Vars."""
        total = np.float64(0.0)
        for c, v in terms:
            total += c * np.float64(v.data)
        dtype = terms[0][1].data.dtype if terms else np.float32
        out = Var(np.asarray(total, dtype=dtype))
        # zero-weight terms contribute nothing, so skip them outright
        live = [(c, v) for c, v in terms if v.requires_grad and c != 0.0]
        if not live:
            return out

        def bw():
            for c, v in live:
                _acc(v, out.grad * c)

        return self._rec(out, bw)

    # -- driver ---------------------------------------------------------
    def backward(self, loss: Var) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self.ops):
            if out.grad is not None:
                fn()


def backward(loss: Var, tape: Tape, params: dict[str, Var]) -> ParamSet:
    """Run reverse mode and collect one gradient per bound parameter.

    Parameters the loss does not reach get zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.ops and not loss.requires_grad:
        return ParamSet({k: np.zeros_like(v.data) for k, v in params.items()})
    tape.backward(loss)
    return ParamSet({k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in params.items()})


# -- initialisation -------------------------------------------------------
def he_uniform(rng: np.random.Generator, shape, fan_in: int, scale: float = 1.0) -> np.ndarray:
    lim = scale * np.sqrt(6.0 / fan_in)
    return rng.uniform(-lim, lim, size=shape).astype(np.float32)


# -- optimizer ------------------------------------------------------------
@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: ParamSet, grads: ParamSet, lr_scale: dict[str, float] | None = None) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for k, g in grads.items():
            if k not in params:
                continue
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            v = self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            lr = self.lr * (lr_scale.get(k.split("/", 1)[0], 1.0) if lr_scale else 1.0)
            params[k] -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


# -- gradient checking -----------------------------------------------------
@dataclass
class GradReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def ok(self) -> bool:
        return self.max_error <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference normalised by the larger of the two gradients' scale."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if denom < 1e-12:
        return float(np.abs(a - n).max(initial=0.0))
    return float(np.abs(a - n).max() / denom)


def numeric_grad(f: Callable[[ParamSet], float], params: ParamSet, name: str, idx=None, h: float = 1e-3) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``params[name]`` (optionally a subset of flat indices)."""
    p = params[name]
    flat = p.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f(params)
        flat[i] = old - h
        fm = f(params)
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out, dtype=np.float64)


def grad_check(
    loss_fn: Callable[[Tape, dict[str, Var]], Var],
    params: ParamSet,
    tolerance: float = 1e-3,
    h: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradReport:
    """Compare analytic and central-difference gradients in float64.

    ``loss_fn(tape, bound)`` builds the scalar loss on the tape from bound
    parameter Vars. With ``max_coords`` only that many randomly chosen
    coordinates per tensor are probed.
    """
    if tolerance <= 0:
        raise ContractError("tolerance must be positive")
    p64 = params.astype(np.float64)
    tape = Tape()
    bound = tape.bind(p64)
    analytic = backward(loss_fn(tape, bound), tape, bound)

    def f(ps):
        t = Tape()
        return float(loss_fn(t, {k: Var(v) for k, v in ps.items()}).data)

    rng = np.random.default_rng(seed)
    errors = {}
    for name, arr in p64.items():
        if max_coords is not None and arr.size > max_coords:
            idx = np.sort(rng.choice(arr.size, size=max_coords, replace=False))
        else:
            idx = np.arange(arr.size)
        num = numeric_grad(f, p64, name, idx, h)
        errors[name] = relative_error(analytic[name].reshape(-1)[idx], num)
    return GradReport(errors, tolerance)


# -- checkpoint container ----------------------------------------------------
def save_params(params: ParamSet, fh) -> None:
    """Write the named-tensor container: per tensor name, rank, dims, f32 values."""
    fh.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
        nb = name.encode("utf-8")
        fh.write(struct.pack("<H", len(nb)))
        fh.write(nb)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_params(fh) -> ParamSet:
    def read(n):
        b = fh.read(n)
        if len(b) != n:
            raise EOFError("truncated parameter container")
        return b

    (count,) = struct.unpack("<I", read(4))
    out = ParamSet()
    for _ in range(count):
        (ln,) = struct.unpack("<H", read(2))
        name = read(ln).decode("utf-8")
        (rank,) = struct.unpack("<B", read(1))
        dims = struct.unpack(f"<{rank}I", read(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(read(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    return out


def params_to_bytes(params: ParamSet) -> bytes:
    buf = io.BytesIO()
    save_params(params, buf)
    return buf.getvalue()


def params_from_bytes(data: bytes) -> ParamSet:
    return load_params(io.BytesIO(data))
