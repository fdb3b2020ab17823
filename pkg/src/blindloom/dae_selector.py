"""Denoising-autoencoder gate for model selection.

A small conv autoencoder trained to undo weak AWGN reconstructs inputs
near the clean-image manifold almost perfectly, so its reconstruction
error is a cleanliness probe.  After fine-tuning, the fine-tuned model
is kept only if it lowered the probe error on the denoised video by
more than half; otherwise the test noise already matched the
pretraining noise and the initial model wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc


@dataclass
class DaeModel:
    params: tc.ParamSet
    frame_channels: int = 1
    sigma_dae: float = 5.0

    def __post_init__(self):
        self.stack = tc.ConvStack(self.params, 3)


def new_dae(frame_channels=1, hidden=16, sigma_dae=5.0, seed=0):
    """Three-layer conv autoencoder (no residual shortcut)."""
    chans = [frame_channels, hidden, hidden, frame_channels]
    params = tc.ConvStack.init_params(
        chans, rng=np.random.default_rng(seed), zero_last=False)
    return DaeModel(params, frame_channels, sigma_dae)


def dae_apply(dae, frame):
    """Reconstruct one frame ([0, 255] in, [0, 255] out, clipped)."""
    frame = np.asarray(frame, dtype=np.float64)
    x = (frame[None] / 255.0).astype(np.float32)
    y, _ = dae.stack.forward(x)
    return np.clip(y[0].astype(np.float64) * 255.0, 0.0, 255.0)


def train_dae(corpus, sigma_dae=5.0, steps=300, lr=1e-3, batch_size=8,
              crop_size=48, seed=0, frame_channels=1):
    """Train the autoencoder to undo AWGN(sigma_dae) with an L2 loss."""
    if not corpus:
        raise ValueError("train_dae: empty corpus")
    dae = new_dae(frame_channels, sigma_dae=sigma_dae, seed=seed)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        inputs, targets = [], []
        for _ in range(batch_size):
            img = corpus[int(rng.integers(0, len(corpus)))]
            c, h, w = img.shape
            size = min(crop_size, h, w)
            top = int(rng.integers(0, h - size + 1))
            left = int(rng.integers(0, w - size + 1))
            patch = img[:, top:top + size, left:left + size]
            noisy = np.clip(patch + sigma_dae * rng.standard_normal(patch.shape),
                            0.0, 255.0)
            inputs.append(noisy)
            targets.append(patch)
        x = (np.stack(inputs) / 255.0).astype(np.float32)
        t = (np.stack(targets) / 255.0).astype(np.float32)
        pred, cache = dae.stack.forward(x)
        _, grad = tc.mse_loss(pred, t)
        grads, _ = dae.stack.backward(cache, grad)
        tc.adam_step(dae.params, grads, lr)
    return dae


def reconstruction_error(dae, seq):
    """Mean over frames of the per-pixel RMS difference |r(y) - y|.

    Computed on the [0, 1] scale; only the ratio of two such errors is
    ever consumed, so the scale choice is immaterial.
    """
    errs = []
    for t in range(len(seq)):
        y = seq.frame(t) / 255.0
        r = dae_apply(dae, seq.frame(t)) / 255.0
        errs.append(float(np.sqrt(np.mean((r - y) ** 2))))
    return float(np.mean(errs))


def select_model(dae, denoised_before, denoised_after, initial, finetuned):
    """Keep the fine-tuned model only on a >50% reconstruction-error drop.

    denoised_before/after: the initial and fine-tuned models' outputs on
    the noisy video.  Returns (chosen_model, report) where report carries
    e0, e1 and the decision; the boundary e1 == 0.5*e0 keeps the initial
    model (strict inequality).
    """
    if len(denoised_before) != len(denoised_after):
        raise ValueError(
            f"select_model: sequence lengths differ "
            f"({len(denoised_before)} vs {len(denoised_after)})")
    e0 = reconstruction_error(dae, denoised_before)
    e1 = reconstruction_error(dae, denoised_after)
    use_finetuned = e1 < 0.5 * e0
    report = {
        "error_before": e0,
        "error_after": e1,
        "choice": "finetuned" if use_finetuned else "initial",
    }
    return (finetuned if use_finetuned else initial), report
