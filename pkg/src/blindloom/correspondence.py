"""Correspondence management between flow-aligned adjacent frames.

Produces the per-pixel quantities that decide how much a training pixel
may contribute: a binary occlusion mask (from forward/backward flow
consistency, or from flow divergence as the ablation baseline), a
non-negative lighting-variation map, and the final loss weight
gamma = (1 - occlusion) * exp(-alpha3 * lighting).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .flow_engine import warp_inverse
from .tensor_core import ShapeError


@dataclass
class CorrespondenceParams:
    """Thresholds and filter settings; defaults are the published values."""

    alpha1: float = 0.0064     # relative flow-consistency threshold
    alpha2: float = 1.4        # absolute flow-consistency threshold
    alpha3: float = 5.0        # lighting-variation sharpness
    eps: float = 1e-6
    box: int = 5               # lighting filter size

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0 or self.alpha3 < 0:
            raise ValueError("alpha1, alpha2, alpha3 must be non-negative")


def occlusion_consistency(flow_f, flow_b, params=None):
    """Occlusion of the current frame's pixels w.r.t. the previous frame.

    A pixel p is matched (not occluded) when the backward flow at p and
    the forward flow sampled at p's correspondent nearly cancel:

        |wb(p) + wf(p + wb(p))|^2 < alpha1 (|wb(p)|^2 + |wf(p+wb(p))|^2) + alpha2

    The forward flow is sampled bilinearly; lookups that leave the frame
    are occluded.  For the mirrored mask (previous frame w.r.t. current)
    call with the two flows exchanged.
    """
    params = params or CorrespondenceParams()
    flow_f = np.asarray(flow_f, dtype=np.float64)
    flow_b = np.asarray(flow_b, dtype=np.float64)
    if flow_f.shape != flow_b.shape:
        raise ShapeError(
            f"occlusion_consistency: flow shapes differ "
            f"{flow_f.shape} vs {flow_b.shape}")
    sampled, oob = warp_inverse(flow_f.transpose(2, 0, 1), flow_b)
    wf_at = sampled.transpose(1, 2, 0)
    lhs = np.sum((flow_b + wf_at) ** 2, axis=-1)
    rhs = (params.alpha1
           * (np.sum(flow_b ** 2, axis=-1) + np.sum(wf_at ** 2, axis=-1))
           + params.alpha2)
    occluded = (lhs >= rhs) | oob
    return occluded.astype(np.float64)


def occlusion_divergence(flow, threshold=0.3):
    """Baseline mask: occluded where the flow field contracts.

    Central-difference divergence du/dx + dv/dy; pixels with divergence
    below -threshold (flow sinks) are marked occluded.
    """
    flow = np.asarray(flow, dtype=np.float64)
    div = (np.gradient(flow[:, :, 0], axis=1)
           + np.gradient(flow[:, :, 1], axis=0))
    return (div < -threshold).astype(np.float64)


def clean_estimates(denoise_fn, stack_prev, stack_cur, flow_b, online=True):
    """Aligned clean-signal estimates of the current frame.

    Returns (xhat, xhat_prime): the denoised current frame and the
    denoised previous frame warped onto it.  With online disabled the
    raw noisy centre frames are used instead of denoiser outputs.
    """
    stack_prev = np.asarray(stack_prev, dtype=np.float64)
    stack_cur = np.asarray(stack_cur, dtype=np.float64)
    center = stack_cur.shape[0] // 2
    if online:
        xhat = denoise_fn(stack_cur)
        prev = denoise_fn(stack_prev)
    else:
        xhat = stack_cur[center]
        prev = stack_prev[center]
    xhat_prime, _ = warp_inverse(prev, flow_b)
    return xhat, xhat_prime


def lighting_variation(xhat, xhat_prime, occlusion, params=None):
    """Local mean intensity change between aligned clean estimates.

    Inputs on the [0, 1] scale, (H, W) or (C, H, W); channels are averaged
    to one map before filtering.  Occluded pixels are excluded from the
    local patches and the result normalises over the in-image, non-occluded
    support (zero padding outside the frame).
    """
    params = params or CorrespondenceParams()
    xhat = np.asarray(xhat, dtype=np.float64)
    xhat_prime = np.asarray(xhat_prime, dtype=np.float64)
    if xhat.shape != xhat_prime.shape:
        raise ShapeError(
            f"lighting_variation: estimate shapes differ "
            f"{xhat.shape} vs {xhat_prime.shape}")
    diff = xhat - xhat_prime
    if diff.ndim == 3:
        diff = diff.mean(axis=0)
    occlusion = np.asarray(occlusion, dtype=np.float64)
    if occlusion.shape != diff.shape:
        raise ShapeError(
            f"lighting_variation: occlusion shape {occlusion.shape} "
            f"does not match frames {diff.shape}")
    keep = 1.0 - occlusion
    num = np.abs(uniform_filter(diff * keep, size=params.box, mode="constant"))
    den = uniform_filter(keep, size=params.box, mode="constant") + params.eps
    return num / den


def weight_map(occlusion, lighting, alpha3=5.0):
    """Loss weight gamma = (1 - occlusion) * exp(-alpha3 * lighting)."""
    occlusion = np.asarray(occlusion, dtype=np.float64)
    lighting = np.asarray(lighting, dtype=np.float64)
    if occlusion.shape != lighting.shape:
        raise ShapeError(
            f"weight_map: shapes differ {occlusion.shape} vs {lighting.shape}")
    return (1.0 - occlusion) * np.exp(-alpha3 * lighting)
