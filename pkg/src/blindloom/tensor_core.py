"""Minimal differentiable tensor engine.

Only the layer vocabulary the denoiser, the DAE and the flow refiner need:
stride-1 "same" 2-D convolution, ReLU, residual addition (a plain add, done
by callers), masked L1 / MSE losses with analytic gradients, Adam updates,
and a finite-difference gradient checker.

Tensors are plain numpy arrays indexed (batch, channel, row, col).
Convolutions run channels-last internally (one big GEMM per layer), which
is much faster on a single core; the public interface stays NCHW.
Accumulation order inside a convolution is fixed, so results are
reproducible run to run for a given seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC_CHECKPOINT = b"BLTC1"


class ShapeError(ValueError):
    """Raised when tensor shapes are not congruent with an operation."""


class NonFiniteGradientError(FloatingPointError):
    """Raised when a gradient tensor contains NaN or Inf."""

    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter '{name}'")
        self.name = name


def _require_shape(name, arr, expected):
    if arr.shape != expected:
        raise ShapeError(f"{name}: expected shape {expected}, got {arr.shape}")


def _as_tensor4(name, arr):
    arr = np.asarray(arr)
    if arr.ndim != 4:
        raise ShapeError(f"{name}: expected a 4-d tensor, got ndim={arr.ndim}")
    return arr


# ---------------------------------------------------------------------------
# convolution


def _im2col_nhwc(x, kh, kw):
    """Patch matrix of a zero-padded NHWC tensor: (B*H*W, kh*kw*C)."""
    b, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    out = np.empty((b, h, w, kh, kw, c), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            out[:, :, :, dy, dx, :] = xp[:, dy:dy + h, dx:dx + w, :]
    return out.reshape(b * h * w, kh * kw * c)


def _conv_fwd_nhwc(x, weight, bias):
    """x: (B,H,W,Cin); weight: (Cout,Cin,kh,kw); bias: Cout values or None."""
    b, h, w, cin = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin_w != cin:
        raise ShapeError(
            f"conv2d: kernel expects {cin_w} input channels, input has {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    wmat = weight.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)
    y = _im2col_nhwc(x, kh, kw) @ wmat.astype(x.dtype, copy=False)
    y = y.reshape(b, h, w, cout)
    if bias is not None:
        y += np.reshape(bias, (1, 1, 1, cout))
    return y


def _conv_bwd_nhwc(x, weight, grad_y):
    """Gradients of _conv_fwd_nhwc. Returns (grad_x, grad_w, grad_b)."""
    b, h, w, cin = x.shape
    cout, _, kh, kw = weight.shape
    gmat = grad_y.reshape(b * h * w, cout)
    grad_b = gmat.sum(axis=0)
    # weight gradient: correlate input patches with the output gradient
    patches = _im2col_nhwc(x, kh, kw)
    gw = patches.T @ gmat                       # (kh*kw*cin, cout)
    grad_w = gw.reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)
    # input gradient: convolve grad_y with the flipped, transposed kernel
    w_t = weight.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
    grad_x = _conv_fwd_nhwc(grad_y, np.ascontiguousarray(w_t), None)
    return grad_x, grad_w, grad_b


def conv2d(x, weight, bias=None):
    """Stride-1 "same" zero-padded 2-D convolution (cross-correlation).

    x: (B, Cin, H, W); weight: (Cout, Cin, kh, kw) with odd kh, kw;
    bias: (Cout,) or None.  Linear in both x and weight.
    """
    x = _as_tensor4("conv2d input", x)
    weight = _as_tensor4("conv2d kernel", weight)
    xl = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    y = _conv_fwd_nhwc(xl, weight, bias)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_backward(x, weight, grad_out):
    """Gradients of conv2d w.r.t. (input, weight, bias) given d(loss)/d(out)."""
    x = _as_tensor4("conv2d input", x)
    grad_out = _as_tensor4("conv2d grad", grad_out)
    xl = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    gl = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1))
    gx, gw, gb = _conv_bwd_nhwc(xl, weight, gl)
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), gw, gb


def relu(x):
    return np.maximum(x, 0)


def relu_backward(y, grad_y):
    """Backward of relu given its *output* y (kink subgradient = 0)."""
    return grad_y * (y > 0)


# ---------------------------------------------------------------------------
# losses


def masked_l1(prediction, target, weight):
    """Weighted L1 loss and its gradient w.r.t. the prediction.

    loss = mean(|prediction*weight - target*weight|) over all elements;
    pixels with weight 0 contribute exactly zero loss and zero gradient.
    Returns (loss, grad).
    """
    prediction = np.asarray(prediction)
    if prediction.shape != np.shape(target) or prediction.shape != np.shape(weight):
        raise ShapeError(
            f"masked_l1: shapes differ: prediction {prediction.shape}, "
            f"target {np.shape(target)}, weight {np.shape(weight)}")
    diff = weight * (prediction - target)
    loss = float(np.mean(np.abs(diff)))
    grad = weight * np.sign(diff) / diff.size
    return loss, grad


def mse_loss(prediction, target):
    """Mean squared error and its gradient w.r.t. the prediction."""
    prediction = np.asarray(prediction)
    if prediction.shape != np.shape(target):
        raise ShapeError(
            f"mse_loss: shapes differ: {prediction.shape} vs {np.shape(target)}")
    diff = prediction - target
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    return loss, grad


# ---------------------------------------------------------------------------
# parameters and optimizer


@dataclass
class ParamSet:
    """Named parameter tensors plus per-parameter Adam state."""

    params: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def add(self, name, value):
        value = np.asarray(value)
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def names(self):
        return sorted(self.params)

    def astype(self, dtype):
        out = ParamSet(step=self.step)
        for k in self.params:
            out.params[k] = self.params[k].astype(dtype)
            out.m[k] = self.m[k].astype(dtype)
            out.v[k] = self.v[k].astype(dtype)
        return out

    def copy(self):
        return ParamSet(
            params={k: p.copy() for k, p in self.params.items()},
            m={k: p.copy() for k, p in self.m.items()},
            v={k: p.copy() for k, p in self.v.items()},
            step=self.step,
        )

    def n_elements(self):
        return sum(p.size for p in self.params.values())


def adam_step(ps, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction. Mutates and returns ps."""
    for name in ps.params:
        if name not in grads:
            raise KeyError(f"adam_step: missing gradient for '{name}'")
        g = grads[name]
        if g.shape != ps.params[name].shape:
            raise ShapeError(
                f"adam_step: gradient for '{name}' has shape {g.shape}, "
                f"parameter has {ps.params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    ps.step += 1
    t = ps.step
    for name, p in ps.params.items():
        g = grads[name]
        ps.m[name] = beta1 * ps.m[name] + (1 - beta1) * g
        ps.v[name] = beta2 * ps.v[name] + (1 - beta2) * (g * g)
        m_hat = ps.m[name] / (1 - beta1 ** t)
        v_hat = ps.v[name] / (1 - beta2 ** t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
    return ps


# ---------------------------------------------------------------------------
# conv stacks (shared by denoiser, DAE and tests)


class ConvStack:
    """A chain of same-padded conv layers with ReLU between (not after) them.

    Layer i uses parameters "<prefix><i>.w" / "<prefix><i>.b" from a ParamSet.
    Activations stay channels-last across the stack so each layer is a single
    GEMM on contiguous data.
    """

    def __init__(self, params: ParamSet, n_layers, prefix="conv"):
        self.params = params
        self.names = [(f"{prefix}{i}.w", f"{prefix}{i}.b") for i in range(n_layers)]
        for wn, bn in self.names:
            if wn not in params.params or bn not in params.params:
                raise KeyError(f"ConvStack: parameter '{wn}'/'{bn}' missing")

    @staticmethod
    def init_params(layer_channels, kernel=3, rng=None, dtype=np.float32,
                    prefix="conv", zero_last=True):
        """He-initialised ParamSet for channel sizes [c0, c1, ..., cn].

        zero_last zeroes the final layer so a fresh residual network starts
        as the identity.
        """
        rng = rng or np.random.default_rng(0)
        ps = ParamSet()
        n = len(layer_channels) - 1
        for i in range(n):
            cin, cout = layer_channels[i], layer_channels[i + 1]
            std = np.sqrt(2.0 / (cin * kernel * kernel))
            w = rng.normal(0.0, std, size=(cout, cin, kernel, kernel))
            if zero_last and i == n - 1:
                w = np.zeros_like(w)
            ps.add(f"{prefix}{i}.w", w.astype(dtype))
            # biases kept 4-d so the checkpoint container round-trips shapes
            ps.add(f"{prefix}{i}.b", np.zeros((1, cout, 1, 1), dtype=dtype))
        return ps

    def forward(self, x):
        """x: (B, Cin, H, W). Returns (y, cache) with y: (B, Cout, H, W)."""
        a = np.ascontiguousarray(np.asarray(x).transpose(0, 2, 3, 1))
        cache = []
        last = len(self.names) - 1
        for i, (wn, bn) in enumerate(self.names):
            w = self.params.params[wn]
            b = self.params.params[bn]
            y = _conv_fwd_nhwc(a, w, b)
            if i < last:
                y = np.maximum(y, 0)
            cache.append((a, y if i < last else None))
            a = y
        return np.ascontiguousarray(a.transpose(0, 3, 1, 2)), cache

    def backward(self, cache, grad_y):
        """Gradients for every stack parameter plus the stack input.

        grad_y: (B, Cout, H, W) gradient at the stack output.
        Returns (grads dict, grad_x in NCHW).
        """
        g = np.ascontiguousarray(np.asarray(grad_y).transpose(0, 2, 3, 1))
        grads = {}
        for i in range(len(self.names) - 1, -1, -1):
            wn, bn = self.names[i]
            a, post = cache[i]
            if post is not None:
                g = g * (post > 0)
            g, gw, gb = _conv_bwd_nhwc(a, self.params.params[wn], g)
            grads[wn] = gw
            grads[bn] = gb.reshape(self.params.params[bn].shape)
        return grads, np.ascontiguousarray(g.transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(ps, loss_and_grads, n_samples=120, h=1e-4, rng=None):
    """Compare analytic gradients to central differences.

    loss_and_grads(ps) must deterministically return (loss, grads-dict).
    Checks a random subsample of at least min(n_samples, total) parameter
    coordinates and returns the max relative error, with the numerical
    gradient as reference.  Coordinates where both gradients are < 1e-7
    in magnitude carry no information and are skipped.
    """
    rng = rng or np.random.default_rng(0)
    _, grads = loss_and_grads(ps)
    coords = []
    for name in ps.names():
        for flat in range(ps.params[name].size):
            coords.append((name, flat))
    if len(coords) > n_samples:
        idx = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[i] for i in idx]
    worst = 0.0
    for name, flat in coords:
        p = ps.params[name].ravel()
        orig = p[flat]
        p[flat] = orig + h
        up, _ = loss_and_grads(ps)
        p[flat] = orig - h
        down, _ = loss_and_grads(ps)
        p[flat] = orig
        numeric = (up - down) / (2 * h)
        analytic = float(grads[name].ravel()[flat])
        if max(abs(numeric), abs(analytic)) < 1e-7:
            continue
        worst = max(worst, abs(analytic - numeric) / max(abs(numeric), 1e-12))
    return worst


# ---------------------------------------------------------------------------
# checkpoint container ("BLTC1")


def save_checkpoint(path, ps):
    """Write parameters as little-endian float32, sorted by name.

    Layout per parameter: u32 name length, name bytes (utf-8), four u32
    extents, then the raw float32 payload.  Tensors with fewer than four
    axes are stored with leading extents of 1.
    """
    with open(path, "wb") as fh:
        fh.write(MAGIC_CHECKPOINT)
        for name in sorted(ps.params):
            arr = np.asarray(ps.params[name], dtype="<f4")
            ext = (1,) * (4 - arr.ndim) + arr.shape
            if len(ext) != 4:
                raise ShapeError(f"checkpoint: '{name}' has more than 4 axes")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<4I", *ext))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read a "BLTC1" file back into a fresh ParamSet (moments zeroed).

    The container normalises every tensor to four axes, so parameters come
    back with the extents they were written with (leading 1s included).
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != MAGIC_CHECKPOINT:
        raise ValueError(f"{path}: bad magic {blob[:5]!r}, expected BLTC1")
    ps = ParamSet()
    off = 5
    while off < len(blob):
        if off + 4 > len(blob):
            raise ValueError(f"{path}: truncated name length at byte {off}")
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + nlen + 16 > len(blob):
            raise ValueError(f"{path}: truncated header at byte {off}")
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        ext = struct.unpack_from("<4I", blob, off)
        off += 16
        count = int(np.prod(ext))
        nbytes = count * 4
        if off + nbytes > len(blob):
            raise ValueError(f"{path}: truncated payload for '{name}'")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += nbytes
        ps.add(name, arr.reshape(tuple(int(e) for e in ext)).copy())
    return ps
