"""Minimal dense tensor with reverse-mode differentiation.

Only the layer set the residual autoencoder needs is provided: conv2d, relu,
batchnorm2d, upsample_nearest2x, add and mse_loss. Each op records a closure
that maps the upstream gradient to the gradients of its inputs; ``backward``
walks the recorded graph in reverse topological order.

Arrays are NCHW, row-major, width fastest. Ops keep the dtype of their inputs,
so the same code runs in float32 for training and float64 inside
:func:`grad_check`.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by an optimizer step when a gradient holds NaN or Inf."""

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense array plus an optional gradient buffer and graph links."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None:
            arr = data
            if arr.dtype.kind != "f":
                arr = arr.astype(DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype or DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Interior gradients and closures are released once consumed, so a graph
        can only be back-propagated once.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not (p.requires_grad or p._backward is not None):
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._backward = None
            node._parents = ()


class Parameter(Tensor):
    """Trainable tensor; carries its name and per-parameter optimizer state."""

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data,
                         requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class RngState:
    """Seeded counter-based generator (Philox).

    ``child(*keys)`` derives an independent stream from the seed and integer
    keys alone, so per-frame or per-epoch draws do not depend on call order.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed)))

    def child(self, *keys: int) -> "RngState":
        r = RngState.__new__(RngState)
        r.seed = self.seed
        ss = np.random.SeedSequence([self.seed, *[int(k) & 0xFFFFFFFF for k in keys]])
        r.generator = np.random.Generator(np.random.Philox(ss))
        return r

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _needs(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _pad_nhwc(xh: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return np.ascontiguousarray(xh)
    b, h, w, c = xh.shape
    xp = np.zeros((b, h + 2 * padding, w + 2 * padding, c), dtype=xh.dtype)
    xp[:, padding : padding + h, padding : padding + w, :] = xh
    return xp


# feature maps at or below this many pixels use one im2col GEMM instead of per-tap GEMMs
_SMALL_MAP = 256


def _taps(k: int):
    return [(ky, kx) for ky in range(k) for kx in range(k)]


def _block_rows(c: int, o: int) -> int:
    return max(256, 1 << int(np.log2(max(1, 65536 // (c + o)))))


def _tap_accumulate(src: np.ndarray, wt: np.ndarray, offsets, rows: int, out: np.ndarray,
                    bias: np.ndarray | None = None) -> None:
    # out[r] = sum_t src[r + offsets[t]] @ wt[t] for r < rows, in cache-sized row blocks
    c, o = wt.shape[1:]
    block = _block_rows(c, o)
    tmp = np.empty((min(block, rows), o), dtype=out.dtype)
    for s0 in range(0, rows, block):
        s1 = min(rows, s0 + block)
        acc = out[s0:s1]
        part = tmp[: s1 - s0]
        np.matmul(src[s0 + offsets[0] : s1 + offsets[0]], wt[0], out=acc)
        for t in range(1, len(offsets)):
            np.matmul(src[s0 + offsets[t] : s1 + offsets[t]], wt[t], out=part)
            acc += part
        if bias is not None:
            acc += bias


def _conv_flat(xp: np.ndarray, wt: np.ndarray, k: int, ho: int, wo: int,
               bias: np.ndarray | None = None) -> np.ndarray:
    # Stride-1 path: on the row-flattened padded image, tap (ky, kx) of every
    # output pixel is a fixed row offset, so each tap is one contiguous GEMM.
    b, hp, wp, c = xp.shape
    o = wt.shape[2]
    n = b * hp * wp
    span = n - ((k - 1) * wp + (k - 1))
    full = np.empty((n, o), dtype=np.result_type(xp, wt))
    _tap_accumulate(xp.reshape(n, c), wt, [ky * wp + kx for ky, kx in _taps(k)], span, full, bias)
    out = full.reshape(b, hp, wp, o)[:, :ho, :wo, :]
    # without a graph the strided view is only read or padded again, so skip the copy
    return np.ascontiguousarray(out) if _grad_enabled else out


def _conv_flat_backward(xp, wt, k, ho, wo, g, want_x, want_w):
    b, hp, wp, c = xp.shape
    o = wt.shape[2]
    n = b * hp * wp
    reach = (k - 1) * wp + (k - 1)
    # gradient rows placed after `reach` zero rows so the input gradient becomes a
    # gather: gx[r] = sum_t g[r - off_t] @ wt[t].T
    gpad = np.zeros((reach + n, o), dtype=g.dtype)
    gpad[reach:].reshape(b, hp, wp, o)[:, :ho, :wo, :] = g
    offsets = [ky * wp + kx for ky, kx in _taps(k)]
    gw = gxp = None
    if want_w:
        flat = xp.reshape(n, c)
        gf = gpad[reach:]
        span = n - reach
        gw = np.zeros(wt.shape, dtype=np.result_type(xp, g))
        block = _block_rows(c, o)
        for s0 in range(0, span, block):
            s1 = min(span, s0 + block)
            gblk = gf[s0:s1]
            for t, off in enumerate(offsets):
                gw[t] += flat[s0 + off : s1 + off].T @ gblk
    if want_x:
        wtt = np.ascontiguousarray(wt.transpose(0, 2, 1))
        gflat = np.empty((n, c), dtype=np.result_type(g, wt))
        _tap_accumulate(gpad, wtt, [reach - off for off in offsets], n, gflat)
        gxp = gflat.reshape(b, hp, wp, c)
    return gxp, gw


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # columns ordered (ky, kx, C) to match the tap-major weight layout
    b, _, _, c = xp.shape
    cols = np.empty((b, ho, wo, k * k, c), dtype=xp.dtype)
    for t, (ky, kx) in enumerate(_taps(k)):
        cols[:, :, :, t, :] = xp[:, ky : ky + stride * (ho - 1) + 1 : stride,
                                 kx : kx + stride * (wo - 1) + 1 : stride, :]
    return cols.reshape(b * ho * wo, k * k * c)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B,C,H,W) with ``weight`` (O,C,K,K), zero padded.

    The returned array is logically (B,O,H',W') but stored channels-last; every
    other op here is layout-agnostic, and the next conv reads it without a copy.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D (B,C,H,W), got rank {x.data.ndim}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D (O,C,K,K), got rank {weight.data.ndim}")
    b, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if cw != c:
        raise ShapeError(f"conv2d channels mismatch: input has C={c}, weight expects C={cw}")
    if kh != kw:
        raise ShapeError(f"conv2d kernel must be square, got height {kh} and width {kw}")
    k = kh
    if k % 2 == 0:
        raise ShapeError(f"conv2d kernel size K must be odd, got {k}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias must have shape ({o},), got {bias.shape}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1:
        raise ShapeError(f"conv2d output height would be {ho}: input height {h} too small")
    if wo < 1:
        raise ShapeError(f"conv2d output width would be {wo}: input width {w} too small")

    xp = _pad_nhwc(x.data.transpose(0, 2, 3, 1), padding)
    wt = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0)).reshape(k * k, c, o)
    flat_path = stride == 1 and ho * wo > _SMALL_MAP
    if flat_path:
        y = _conv_flat(xp, wt, k, ho, wo, None if bias is None else bias.data)
    else:
        cols = _im2col(xp, k, stride, ho, wo)
        y = (cols @ wt.reshape(k * k * c, o)).reshape(b, ho, wo, o)
        if bias is not None:
            y += bias.data
    out = y.transpose(0, 3, 1, 2)

    def backward(g: np.ndarray):
        gh = g.transpose(0, 2, 3, 1)
        gb = _channel_sum(g) if bias is not None and _needs(bias) else None
        want_x, want_w = _needs(x), _needs(weight)
        gwt = gxp = None
        if flat_path:
            gxp, gwt = _conv_flat_backward(xp, wt, k, ho, wo, gh, want_x, want_w)
        else:
            cols_ = _im2col(xp, k, stride, ho, wo)
            g2 = np.ascontiguousarray(gh).reshape(b * ho * wo, o)
            if want_w:
                gwt = (cols_.T @ g2).reshape(k * k, c, o)
            if want_x:
                gcols = (g2 @ wt.reshape(k * k * c, o).T).reshape(b, ho, wo, k * k, c)
                gxp = np.zeros(xp.shape, dtype=gcols.dtype)
                for t, (ky, kx) in enumerate(_taps(k)):
                    gxp[:, ky : ky + stride * (ho - 1) + 1 : stride,
                        kx : kx + stride * (wo - 1) + 1 : stride, :] += gcols[:, :, :, t, :]
        gx = gw = None
        if gxp is not None:
            gx = gxp[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2)
        if gwt is not None:
            gw = gwt.reshape(k, k, c, o).transpose(3, 2, 0, 1)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * mask,)

    return _make(out, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")

    def backward(g):
        return g, g

    return _make(a.data + b.data, (a, b), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"upsample input must be 4-D, got rank {x.data.ndim}")
    b, c, h, w = x.shape
    xh = x.data.transpose(0, 2, 3, 1)
    out = np.broadcast_to(xh[:, :, None, :, None, :], (b, h, 2, w, 2, c)).reshape(b, 2 * h, 2 * w, c)
    out = out.transpose(0, 3, 1, 2)

    def backward(g):
        gh = g.transpose(0, 2, 3, 1)
        r = gh.reshape(b, h, 2, w, 2, c)
        rows = r[:, :, 0] + r[:, :, 1]
        return ((rows[:, :, :, 0] + rows[:, :, :, 1]).transpose(0, 3, 1, 2),)

    return _make(out, (x,), backward)


def mse_loss(reconstruction: Tensor, target) -> Tensor:
    """Mean of squared differences over every element."""
    target = _as_tensor(target)
    if reconstruction.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {reconstruction.shape} vs {target.shape}")
    diff = reconstruction.data - target.data
    n = diff.size
    loss = np.asarray(np.mean(np.square(diff, dtype=np.float64)), dtype=reconstruction.dtype)

    def backward(g):
        gr = diff * (2.0 * g / n)
        return gr.astype(diff.dtype, copy=False), -gr.astype(diff.dtype, copy=False)

    return _make(loss, (reconstruction, target), backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """sum(x * weights) as a scalar; used to reduce op outputs for gradient checks."""
    if x.shape != weights.shape:
        raise ShapeError(f"weighted_sum shape mismatch: {x.shape} vs {weights.shape}")
    out = np.asarray(np.sum(x.data * weights), dtype=x.dtype)

    def backward(g):
        return (weights * g,)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# batch norm


def _channel_sum(a: np.ndarray) -> np.ndarray:
    """Per-channel sum over (B, H, W); a BLAS matrix-vector product for channels-last data."""
    ah = a.transpose(0, 2, 3, 1)
    if ah.flags.c_contiguous:
        flat = ah.reshape(-1, ah.shape[-1])
        return np.ones(len(flat), dtype=a.dtype) @ flat
    return a.sum(axis=(0, 2, 3))


@dataclass
class RunningStats:
    """Per-channel running mean/variance; ``tracked`` counts train-mode updates."""

    mean: np.ndarray
    var: np.ndarray
    tracked: int = 0

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, DTYPE), np.ones(channels, DTYPE), 0)

    @property
    def initialized(self) -> bool:
        return self.tracked > 0


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, training: bool,
                stats: RunningStats | None = None, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    Train mode normalizes with the biased batch variance and folds the batch
    statistics into ``stats`` (unbiased variance, as an exponential moving
    average). Infer mode uses ``stats`` only.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d input must be 4-D, got rank {x.data.ndim}")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    dt = x.dtype
    gd = gamma.data.reshape(1, c, 1, 1)
    bd = beta.data.reshape(1, c, 1, 1)

    if training:
        n = b * h * w
        if n < 2:
            raise ShapeError(f"batchnorm2d train mode needs B*H*W >= 2 per channel, got {n}")
        mean = (_channel_sum(x.data) / n).reshape(1, c, 1, 1)
        xc = x.data - mean
        var = (_channel_sum(xc * xc) / n).reshape(1, c, 1, 1)
        inv = (1.0 / np.sqrt(var + eps)).astype(dt, copy=False)
        xhat = xc * inv
        out = xhat * gd + bd
        if stats is not None:
            unbiased = var.reshape(c).astype(np.float64) * (n / (n - 1))
            stats.mean = ((1 - momentum) * stats.mean + momentum * mean.reshape(c)).astype(DTYPE)
            stats.var = ((1 - momentum) * stats.var + momentum * unbiased).astype(DTYPE)
            stats.tracked += 1

        def backward(g):
            gg = _channel_sum(g * xhat)
            gbeta = _channel_sum(g)
            gx = None
            if _needs(x):
                # sum(g * gamma) = gamma * gbeta and sum(g * gamma * xhat) = gamma * gg
                gx = (gd * inv / n) * (n * g - gbeta.reshape(1, c, 1, 1) - xhat * gg.reshape(1, c, 1, 1))
            return gx, gg, gbeta

        return _make(out, (x, gamma, beta), backward)

    if stats is None or not stats.initialized:
        raise RuntimeError("batchnorm2d infer mode needs initialized running statistics")
    mean = stats.mean.reshape(1, c, 1, 1).astype(dt, copy=False)
    inv = (1.0 / np.sqrt(stats.var.astype(np.float64) + eps)).astype(dt).reshape(1, c, 1, 1)
    scale = gd * inv
    out = x.data * scale
    out += bd - mean * scale

    def backward_infer(g):
        xhat = (x.data - mean) * inv
        return g * scale, _channel_sum(g * xhat), _channel_sum(g)

    return _make(out, (x, gamma, beta), backward_infer)


# ---------------------------------------------------------------------------
# optimizers


def _check_finite(params: Sequence[Parameter]) -> None:
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(p.name)


def adam_step(params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place; gradients are cleared afterwards.

    Every gradient is checked before any parameter moves, so a rejected step
    leaves the whole model untouched.
    """
    params = list(params)
    _check_finite(params)
    for p in params:
        if p.grad is None:
            continue
        g = p.grad.astype(p.data.dtype, copy=False)
        p.step += 1
        p.m *= beta1
        p.m += (1 - beta1) * g
        p.v *= beta2
        p.v += (1 - beta2) * np.square(g)
        c1 = 1.0 - beta1 ** p.step
        c2 = 1.0 - beta2 ** p.step
        step_size = lr / c1
        denom = np.sqrt(p.v / c2) + eps
        p.data -= (step_size * p.m / denom).astype(p.data.dtype, copy=False)
        p.grad = None


def sgd_step(params: Iterable[Parameter], lr: float = 1e-3) -> None:
    params = list(params)
    _check_finite(params)
    for p in params:
        if p.grad is not None:
            p.data -= (lr * p.grad).astype(p.data.dtype, copy=False)
            p.grad = None


# ---------------------------------------------------------------------------
# gradient checking


def kaiming_uniform(rng: RngState, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all elements."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def grad_check(fn: Callable[..., Tensor], probes: Sequence[np.ndarray], eps: float = 1e-3,
               seed: int = 0, indices: Sequence[np.ndarray | None] | None = None,
               floor: float = 1e-8) -> float:
    """Compare reverse-mode gradients of ``fn`` with central differences.

    ``fn`` receives one float64 Tensor per probe and returns a Tensor; a
    non-scalar result is reduced with fixed random weights. ``indices`` may
    restrict the finite-difference sweep to a subset of flat positions per
    probe (None means all). Returns the maximum relative error.
    """
    # salted so the projection never coincides with probes drawn from the same seed
    rng = np.random.default_rng((seed, 0x9E3779B9))
    arrays = [np.array(p, dtype=np.float64) for p in probes]
    weights: np.ndarray | None = None

    def scalar(tensors) -> Tensor:
        nonlocal weights
        out = fn(*tensors)
        if out.data.size == 1:
            return out
        if weights is None:
            weights = rng.standard_normal(out.shape)
        return weighted_sum(out, weights)

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    scalar(tensors).backward()
    worst = 0.0
    with no_grad():
        for i, (arr, t) in enumerate(zip(arrays, tensors)):
            analytic = t.grad if t.grad is not None else np.zeros_like(arr)
            flat = arr.reshape(-1)
            idx = None if indices is None else indices[i]
            positions = range(flat.size) if idx is None else idx
            num, ana = [], []
            for j in positions:
                orig = flat[j]
                flat[j] = orig + eps
                fp = scalar([Tensor(a) for a in arrays]).item()
                flat[j] = orig - eps
                fm = scalar([Tensor(a) for a in arrays]).item()
                flat[j] = orig
                num.append((fp - fm) / (2 * eps))
                ana.append(analytic.reshape(-1)[j])
            worst = max(worst, relative_error(np.array(ana), np.array(num), floor))
    return worst
