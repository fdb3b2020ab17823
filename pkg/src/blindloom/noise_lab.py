"""Synthetic test noises with clipping and rounding.

Five variants: awgn (additive white Gaussian), mg (multiplicative
Gaussian), cg (correlated Gaussian: a white noise field blurred by a
3x3 box filter before addition), ir (impulse random: pixels replaced
by uniform values), jpeg (AWGN followed by block-DCT quantization).
Every variant ends with clip to [0, 255] and round to integers.

Randomness is counter-based and per frame: frame t of a model seeded s
uses the Philox generator keyed (s, t), with normals drawn by NumPy's
Generator. Identical (model, seed, input) therefore reproduce output
bit for bit, and frames can be processed in any order or in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .frame_io import FrameSequence

KINDS = ("awgn", "mg", "cg", "ir", "jpeg")

# ITU T.81 Annex K luminance quantization table
LUMA_QUANT = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


@dataclass
class NoiseModel:
    kind: str
    sigma: float = 20.0        # awgn / cg / jpeg noise strength
    sigma_m: float = 0.3       # mg multiplier std
    prob: float = 0.1          # ir replacement probability
    low: float = 0.0           # ir replacement range
    high: float = 255.0
    quality: int = 60          # jpeg quality
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown noise kind '{self.kind}' (use {KINDS})")
        if self.kind in ("awgn", "cg", "jpeg") and self.sigma <= 0:
            raise ValueError(f"{self.kind}: sigma must be > 0, got {self.sigma}")
        if self.kind == "mg" and self.sigma_m <= 0:
            raise ValueError(f"mg: sigma_m must be > 0, got {self.sigma_m}")
        if self.kind == "ir" and not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"ir: prob must be in [0,1], got {self.prob}")
        if self.kind == "jpeg" and not 1 <= self.quality <= 100:
            raise ValueError(f"jpeg: quality must be in [1,100], got {self.quality}")


def parse_noise_spec(text, seed=0):
    """Parse the CLI mini-language name:param[:param].

    awgn:SIGMA | mg:SIGMA_M | cg:SIGMA | ir:PROB | jpeg:SIGMA[:QUALITY]
    """
    parts = text.strip().split(":")
    kind = parts[0].lower()
    args = [float(p) for p in parts[1:]]
    if kind == "awgn":
        return NoiseModel("awgn", sigma=args[0] if args else 20.0, seed=seed)
    if kind == "mg":
        return NoiseModel("mg", sigma_m=args[0] if args else 0.3, seed=seed)
    if kind == "cg":
        return NoiseModel("cg", sigma=args[0] if args else 25.0, seed=seed)
    if kind == "ir":
        return NoiseModel("ir", prob=args[0] if args else 0.1, seed=seed)
    if kind == "jpeg":
        sigma = args[0] if args else 25.0
        quality = int(args[1]) if len(args) > 1 else 60
        return NoiseModel("jpeg", sigma=sigma, quality=quality, seed=seed)
    raise ValueError(f"unknown noise spec '{text}'")


def _frame_rng(seed, frame_index):
    key = np.array([np.uint64(seed & (2**64 - 1)), np.uint64(frame_index)])
    return np.random.Generator(np.random.Philox(key=key))


def scaled_quant_table(quality):
    """Annex-K luminance table under the libjpeg quality convention."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must be in [1,100], got {quality}")
    if quality < 50:
        scale = 5000.0 / quality
    else:
        scale = 200.0 - 2.0 * quality
    table = np.floor((LUMA_QUANT * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


def _dct_matrix():
    n = np.arange(8)
    d = np.cos(np.pi * (2 * n[None, :] + 1) * n[:, None] / 16.0)
    d[0, :] *= np.sqrt(1.0 / 8.0)
    d[1:, :] *= np.sqrt(2.0 / 8.0)
    return d


_DCT8 = _dct_matrix()


def jpeg_degrade(frame, quality):
    """Distortion of baseline JPEG, per channel, without the byte stream.

    8x8 orthonormal block DCT, quantize/dequantize against the scaled
    luminance table, inverse DCT, clip.  No entropy coding or chroma
    subsampling; edges are replicated up to a multiple of 8 and cropped
    back.  Deterministic.
    """
    frame = np.asarray(frame, dtype=np.float64)
    table = scaled_quant_table(quality)
    channels, height, width = frame.shape
    ph = (-height) % 8
    pw = (-width) % 8
    padded = np.pad(frame, ((0, 0), (0, ph), (0, pw)), mode="edge")
    hh, ww = padded.shape[1:]
    blocks = padded.reshape(channels, hh // 8, 8, ww // 8, 8)
    blocks = blocks.transpose(0, 1, 3, 2, 4) - 128.0
    coef = np.einsum("ij,cbljk,kn->cblin", _DCT8, blocks, _DCT8.T)
    q = np.sign(coef) * np.floor(np.abs(coef) / table + 0.5) * table
    rec = np.einsum("ji,cbljk,nk->cblin", _DCT8, q, _DCT8.T) + 128.0
    out = rec.transpose(0, 1, 3, 2, 4).reshape(channels, hh, ww)
    return np.clip(out[:, :height, :width], 0.0, 255.0)


def _noisy_frame(model, frame, rng):
    if model.kind == "awgn":
        return frame + model.sigma * rng.standard_normal(frame.shape)
    if model.kind == "mg":
        return frame * rng.normal(1.0, model.sigma_m, frame.shape)
    if model.kind == "cg":
        field = model.sigma * rng.standard_normal(frame.shape)
        blurred = uniform_filter(field, size=(1, 3, 3), mode="constant")
        return frame + blurred
    if model.kind == "ir":
        replace = rng.random(frame.shape) < model.prob
        values = rng.uniform(model.low, model.high, frame.shape)
        return np.where(replace, values, frame)
    if model.kind == "jpeg":
        noisy = frame + model.sigma * rng.standard_normal(frame.shape)
        return jpeg_degrade(np.clip(noisy, 0.0, 255.0), model.quality)
    raise ValueError(model.kind)


def apply_noise(model: NoiseModel, clean: FrameSequence) -> FrameSequence:
    """Corrupt a clean sequence; output values are integers in [0, 255]."""
    out = np.empty_like(clean.frames)
    for t in range(len(clean)):
        rng = _frame_rng(model.seed, t)
        noisy = _noisy_frame(model, clean.frame(t), rng)
        out[t] = np.floor(np.clip(noisy, 0.0, 255.0) + 0.5)
    return FrameSequence(out, clean.frame_rate)
