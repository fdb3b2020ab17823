"""The multi-frame residual denoising network and its training loops.

Architecture: six same-padded 3x3 conv layers, 32 hidden channels, ReLU,
taking a temporal window of frames (channel-stacked, /255 scaled) and
predicting a residual that is added to the centre frame.  The final
layer starts at zero, so a fresh model is the identity on its centre
frame.  Weights are initialised by supervised pretraining on AWGN, then
adapted to a specific noisy video by the twin-sampler loop, where flows
are re-estimated with the current weights each mini-batch.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .frame_io import FrameSequence
from .twin_sampler import SamplerConfig, _FrameCache, assemble_batch, build_stack

HIDDEN_CHANNELS = 32
N_LAYERS = 6
META_NAME = "meta/arch"


class TrainingAbort(RuntimeError):
    """Raised when fine-tuning hits a non-finite loss."""

    def __init__(self, step, checkpoint):
        super().__init__(
            f"non-finite loss at mini-batch {step}; "
            f"diagnostic checkpoint written to {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class DenoiserModel:
    params: tc.ParamSet
    window: int = 5
    frame_channels: int = 1
    hidden: int = HIDDEN_CHANNELS
    layers: int = N_LAYERS
    loss_log: list = field(default_factory=list)

    def __post_init__(self):
        self.stack = tc.ConvStack(self.params, self.layers)

    @property
    def center(self):
        return self.window // 2

    def copy(self):
        return DenoiserModel(self.params.copy(), self.window,
                             self.frame_channels, self.hidden, self.layers,
                             list(self.loss_log))


def new_model(window=5, frame_channels=1, hidden=HIDDEN_CHANNELS,
              layers=N_LAYERS, seed=0, dtype=np.float32):
    """Fresh residual denoiser; acts as the identity on its centre frame."""
    chans = [window * frame_channels] + [hidden] * (layers - 1) + [frame_channels]
    params = tc.ConvStack.init_params(
        chans, rng=np.random.default_rng(seed), dtype=dtype)
    return DenoiserModel(params, window, frame_channels, hidden, layers)


def save_model(path, model):
    """Checkpoint the parameters plus an architecture record."""
    ps = model.params.copy()
    ps.add(META_NAME, np.array(
        [[[[model.window, model.frame_channels, model.hidden, model.layers]]]],
        dtype=np.float32))
    tc.save_checkpoint(path, ps)


def load_model(path):
    ps = tc.load_checkpoint(path)
    if META_NAME not in ps.params:
        raise ValueError(f"{path}: missing '{META_NAME}' record")
    window, frame_channels, hidden, layers = (
        int(v) for v in ps.params[META_NAME].ravel())
    del ps.params[META_NAME], ps.m[META_NAME], ps.v[META_NAME]
    return DenoiserModel(ps, window, frame_channels, hidden, layers)


def _center_slice(model, inputs):
    c = model.frame_channels
    lo = model.center * c
    return inputs[:, lo:lo + c]


def forward_train(model, inputs01):
    """Training-path forward on [0,1] inputs; no clipping (differentiable)."""
    body, cache = model.stack.forward(inputs01)
    return body + _center_slice(model, inputs01), cache


def denoise_stack(model, stack):
    """Denoise the centre frame of one temporal window.

    stack: (window, C, H, W) on [0, 255].  Output is clipped to [0, 255].
    """
    stack = np.asarray(stack)
    if stack.ndim != 4 or stack.shape[0] != model.window:
        raise tc.ShapeError(
            f"denoise_stack: expected ({model.window}, C, H, W) stack, "
            f"got {stack.shape}")
    w, c, h, wd = stack.shape
    x = (stack.reshape(1, w * c, h, wd) / 255.0).astype(np.float32)
    pred, _ = forward_train(model, x)
    return np.clip(pred[0].astype(np.float64) * 255.0, 0.0, 255.0)


def denoise_sequence(model, seq, chunk=8):
    """Per-frame denoising with edge-replicated windows; length-preserving."""
    stacks = []
    for t in range(len(seq)):
        s, _ = build_stack(seq, t, model.window)
        w, c, h, wd = s.shape
        stacks.append(s.reshape(w * c, h, wd))
    stacks = (np.stack(stacks) / 255.0).astype(np.float32)
    out = []
    for lo in range(0, len(seq), chunk):
        pred, _ = forward_train(model, stacks[lo:lo + chunk])
        out.append(np.clip(pred.astype(np.float64) * 255.0, 0.0, 255.0))
    return FrameSequence(np.concatenate(out), seq.frame_rate)


def train_step(model, inputs, targets, weights, lr):
    """One supervised step: masked L1 on /255-scaled tensors, one Adam update.

    inputs: (B, window*C, h, w); targets/weights: (B, C, h, w); all on the
    [0, 255] scale except weights, which are gamma values in [0, 1].
    Returns the scalar loss.
    """
    x = (np.asarray(inputs) / 255.0).astype(np.float32)
    t = (np.asarray(targets) / 255.0).astype(np.float32)
    g = np.asarray(weights).astype(np.float32)
    pred, cache = forward_train(model, x)
    loss, grad = tc.masked_l1(pred, t, g)
    grads, _ = model.stack.backward(cache, grad)
    tc.adam_step(model.params, grads, lr)
    return loss


def pretrain(model, corpus, sigma=20.0, steps=400, lr=1e-3, batch_size=8,
             crop_size=48, seed=0, checkpoint_path=None):
    """Supervised AWGN initialisation on a clean still-image corpus.

    Stacks are built from independently re-noised copies of one image
    (a static-video surrogate); targets are the clean crops.  Returns the
    model (mutated in place); writes a checkpoint when a path is given.
    """
    if not corpus:
        raise ValueError("pretrain: empty corpus")
    rng = np.random.default_rng(seed)
    for step in range(steps):
        inputs, targets = [], []
        for _ in range(batch_size):
            img = corpus[int(rng.integers(0, len(corpus)))]
            c, h, w = img.shape
            size = min(crop_size, h, w)
            top = int(rng.integers(0, h - size + 1))
            left = int(rng.integers(0, w - size + 1))
            patch = img[:, top:top + size, left:left + size]
            noisy = patch[None] + sigma * rng.standard_normal(
                (model.window,) + patch.shape)
            noisy = np.clip(noisy, 0.0, 255.0)
            inputs.append(noisy.reshape(model.window * c, size, size))
            targets.append(patch)
        loss = train_step(model, np.stack(inputs), np.stack(targets),
                          np.ones((batch_size, model.frame_channels,
                                   size, size)), lr)
        model.loss_log.append(loss)
    if checkpoint_path is not None:
        save_model(checkpoint_path, model)
    return model


def finetune(model, seq, cfg: SamplerConfig = None, n_batches=100, lr=2e-4,
             seed=0, flow_cache_every=1, checkpoint_dir=None):
    """Adapt the model to one noisy sequence with the configured sampler.

    Each mini-batch is assembled with the current weights (flows are
    re-estimated every flow_cache_every batches), scored with the
    weighted L1 loss and applied as one Adam update.  A non-finite loss
    aborts with a diagnostic checkpoint.
    """
    cfg = cfg or SamplerConfig()
    rng = np.random.default_rng(seed)
    denoise_fn = lambda stack: denoise_stack(model, stack)
    cache = None
    for step in range(n_batches):
        if step % max(1, flow_cache_every) == 0:
            cache = _FrameCache(seq, denoise_fn, cfg)
        batch = assemble_batch(seq, denoise_fn, cfg, rng, cache=cache)
        inputs, targets, weights = batch.to_tensors()
        loss = train_step(model, inputs, targets, weights, lr)
        model.loss_log.append(loss)
        if not np.isfinite(loss):
            out_dir = Path(checkpoint_dir or tempfile.gettempdir())
            ckpt = out_dir / "blindloom-diagnostic.bltc"
            save_model(ckpt, model)
            raise TrainingAbort(step, ckpt)
    return model
