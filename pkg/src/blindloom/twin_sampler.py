"""Source-disjoint training pairs and mini-batch assembly.

For every adjacent frame pair (i-1, i) the twin sampler warps each frame
onto the other and builds two training samples whose inputs and targets
draw from disjoint source frames, so a denoiser can never lower the loss
by copying its own input's noise.  The naive baseline (target is the
warped previous frame while the raw previous frame stays in the input)
is kept for ablations.

Every sample carries provenance: the source frame index of each input
slot and of the target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import correspondence as corr
from .flow_engine import estimate_flow, warp_inverse
from .frame_io import CropWindow, crop


@dataclass
class TwinPair:
    input_stack: np.ndarray          # (window, C, h, w)
    target: np.ndarray               # (C, h, w)
    weight: np.ndarray               # (h, w), gamma in [0, 1]
    input_sources: tuple             # source frame index per slot
    target_source: int

    def overlap(self):
        """Source frames present in both input and target."""
        return set(self.input_sources) & {self.target_source}


@dataclass
class SamplerConfig:
    window: int = 5
    batch_size: int = 32
    crop: int = 96
    occlusion: str = "consistency"       # consistency | divergence
    lighting: bool = True
    online_denoise: bool = True
    sampler: str = "twin"                # twin | naive
    divergence_threshold: float = 0.3
    corr: corr.CorrespondenceParams = field(
        default_factory=corr.CorrespondenceParams)
    flow_levels: int = 3
    flow_smoothness: float = 0.15
    max_crop_retries: int = 10
    masked_fraction_limit: float = 0.95

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.occlusion not in ("consistency", "divergence"):
            raise ValueError(f"unknown occlusion mode '{self.occlusion}'")
        if self.sampler not in ("twin", "naive"):
            raise ValueError(f"unknown sampler '{self.sampler}'")


@dataclass
class MiniBatch:
    pairs: list
    crop_size: int

    def __len__(self):
        return len(self.pairs)

    def to_tensors(self, dtype=np.float32):
        """Stack into (inputs, targets, weights) training tensors.

        inputs: (B, window*C, h, w); targets/weights: (B, C, h, w).
        The per-pixel gamma is broadcast across channels.
        """
        inputs, targets, weights = [], [], []
        for p in self.pairs:
            w_stack, c, h, w = p.input_stack.shape
            inputs.append(p.input_stack.reshape(w_stack * c, h, w))
            targets.append(p.target)
            weights.append(np.broadcast_to(p.weight, p.target.shape))
        return (np.stack(inputs).astype(dtype),
                np.stack(targets).astype(dtype),
                np.stack(weights).astype(dtype))


def stack_indices(n_frames, i, window):
    """Edge-replicated source indices of the temporal window around i."""
    half = window // 2
    return [min(max(j, 0), n_frames - 1) for j in range(i - half, i + half + 1)]


def build_stack(seq, i, window):
    idx = stack_indices(len(seq), i, window)
    return np.stack([seq.frame(j) for j in idx]), idx


def build_twin_pairs(seq, i, flow_f, flow_b, weight_cur, weight_prev,
                     window=5):
    """The two source-disjoint pairs for the frame pair (i-1, i).

    The warped frames are y_{(i-1)->i} = warp(y_{i-1}, flow_b) and
    y_{i->(i-1)} = warp(y_i, flow_f):

      pair for i-1: input = window at i-1 with frame i replaced by
                    y_{(i-1)->i}; target = y_{i->(i-1)}; weight_prev.
      pair for i:   input = window at i with frame i-1 replaced by
                    y_{i->(i-1)}; target = y_{(i-1)->i}; weight_cur.

    Edge-replicated slots that land on the excluded frame are replaced
    as well, so input and target sources stay disjoint at sequence ends.
    Both pairs reuse the single provided flow computation.
    """
    if not 1 <= i < len(seq):
        raise IndexError(f"pair index {i} out of range for {len(seq)} frames")
    y_prev = seq.frame(i - 1)
    y_cur = seq.frame(i)
    prev_to_cur, _ = warp_inverse(y_prev, flow_b)
    cur_to_prev, _ = warp_inverse(y_cur, flow_f)

    def make(center, excluded, replacement, replacement_source, target,
             target_source, weight):
        stack, idx = build_stack(seq, center, window)
        sources = list(idx)
        for slot, j in enumerate(idx):
            if j == excluded:
                stack[slot] = replacement
                sources[slot] = replacement_source
        return TwinPair(stack, target, weight, tuple(sources), target_source)

    pair_prev = make(i - 1, i, prev_to_cur, i - 1,
                     cur_to_prev, i, weight_prev)
    pair_cur = make(i, i - 1, cur_to_prev, i,
                    prev_to_cur, i - 1, weight_cur)
    return pair_prev, pair_cur


def build_naive_pair(seq, i, flow_b, weight, window=5):
    """Baseline sample: unmodified input window, warped-previous target.

    On static scenes the target equals an input slot, the dual-presence
    pathology the twin pairs are built to avoid.  Ablation use only.
    """
    if not 1 <= i < len(seq):
        raise IndexError(f"pair index {i} out of range for {len(seq)} frames")
    stack, idx = build_stack(seq, i, window)
    target, _ = warp_inverse(seq.frame(i - 1), flow_b)
    return TwinPair(stack, target, weight, tuple(idx), i - 1)


class _FrameCache:
    """Per-batch cache of denoised (or raw) frames and pair flows."""

    def __init__(self, seq, denoise_fn, cfg):
        self.seq = seq
        self.denoise_fn = denoise_fn
        self.cfg = cfg
        self.frames = {}
        self.flows = {}

    def frame_estimate(self, j):
        if j not in self.frames:
            stack, _ = build_stack(self.seq, j, self.cfg.window)
            if self.cfg.online_denoise:
                self.frames[j] = self.denoise_fn(stack)
            else:
                self.frames[j] = stack[self.cfg.window // 2]
        return self.frames[j]

    def pair_flows(self, i):
        if i not in self.flows:
            prev = self.frame_estimate(i - 1)
            cur = self.frame_estimate(i)
            kw = dict(levels=self.cfg.flow_levels,
                      smoothness=self.cfg.flow_smoothness)
            self.flows[i] = (estimate_flow(prev, cur, **kw),
                             estimate_flow(cur, prev, **kw))
        return self.flows[i]


def pair_weights(cache, i):
    """Occlusion, lighting and gamma for both directions of pair (i-1, i)."""
    cfg = cache.cfg
    flow_f, flow_b = cache.pair_flows(i)
    if cfg.occlusion == "consistency":
        occ_cur = corr.occlusion_consistency(flow_f, flow_b, cfg.corr)
        occ_prev = corr.occlusion_consistency(flow_b, flow_f, cfg.corr)
    else:
        occ_cur = corr.occlusion_divergence(flow_b, cfg.divergence_threshold)
        occ_prev = corr.occlusion_divergence(flow_f, cfg.divergence_threshold)
    # warps that sample outside the frame have no correspondence either
    _, oob_b = warp_inverse(cache.seq.frame(i - 1), flow_b)
    _, oob_f = warp_inverse(cache.seq.frame(i), flow_f)
    occ_cur = np.maximum(occ_cur, oob_b)
    occ_prev = np.maximum(occ_prev, oob_f)
    if cfg.lighting:
        xhat_cur = cache.frame_estimate(i)
        xhat_prev = cache.frame_estimate(i - 1)
        prime_cur, _ = warp_inverse(xhat_prev, flow_b)
        prime_prev, _ = warp_inverse(xhat_cur, flow_f)
        light_cur = corr.lighting_variation(
            xhat_cur / 255.0, prime_cur / 255.0, occ_cur, cfg.corr)
        light_prev = corr.lighting_variation(
            xhat_prev / 255.0, prime_prev / 255.0, occ_prev, cfg.corr)
    else:
        light_cur = np.zeros_like(occ_cur)
        light_prev = np.zeros_like(occ_prev)
    gamma_cur = corr.weight_map(occ_cur, light_cur, cfg.corr.alpha3)
    gamma_prev = corr.weight_map(occ_prev, light_prev, cfg.corr.alpha3)
    return gamma_cur, gamma_prev


def _crop_pair(pair, rng, cfg):
    h, w = pair.weight.shape
    size = min(cfg.crop, h, w)
    for _ in range(cfg.max_crop_retries + 1):
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        win = CropWindow(top, left, size)
        gamma = crop(pair.weight, win)
        if np.mean(gamma == 0) <= cfg.masked_fraction_limit:
            break
    return TwinPair(crop(pair.input_stack, win), crop(pair.target, win),
                    gamma, pair.input_sources, pair.target_source)


def assemble_batch(seq, denoise_fn, cfg: SamplerConfig, rng,
                   cache=None) -> MiniBatch:
    """Draw random frame pairs and build one training mini-batch.

    Per draw: pick i uniformly, compute flows on the current denoiser's
    outputs (online) or raw frames, derive the weight maps, build the
    configured sample kind, and crop each sample with its own window.
    Both twins of a draw enter the batch.  Flows and frame estimates are
    cached for the duration of the batch (the denoiser is fixed within
    it), and the random stream is split per draw so assembly order
    cannot change the result.  A caller may pass its own _FrameCache to
    stretch the flow cache across batches.
    """
    if len(seq) < cfg.window:
        raise ValueError(
            f"sequence of {len(seq)} frames is shorter than the "
            f"temporal window {cfg.window}")
    if cache is None:
        cache = _FrameCache(seq, denoise_fn, cfg)
    batch_seed = int(rng.integers(0, 2**63))
    pairs = []
    draw = 0
    while len(pairs) < cfg.batch_size:
        sub = np.random.Generator(np.random.Philox(
            key=np.array([np.uint64(batch_seed), np.uint64(draw)])))
        draw += 1
        i = int(sub.integers(1, len(seq)))
        flow_f, flow_b = cache.pair_flows(i)
        gamma_cur, gamma_prev = pair_weights(cache, i)
        if cfg.sampler == "twin":
            pair_prev, pair_cur = build_twin_pairs(
                seq, i, flow_f, flow_b, gamma_cur, gamma_prev, cfg.window)
            pairs.append(_crop_pair(pair_prev, sub, cfg))
            if len(pairs) < cfg.batch_size:
                pairs.append(_crop_pair(pair_cur, sub, cfg))
        else:
            naive = build_naive_pair(seq, i, flow_b, gamma_cur, cfg.window)
            pairs.append(_crop_pair(naive, sub, cfg))
    return MiniBatch(pairs, pairs[0].weight.shape[0])
