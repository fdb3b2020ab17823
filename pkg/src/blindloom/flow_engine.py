"""Dense optical flow: estimation, inverse warping, and warping losses.

Flow fields are (H, W, 2) arrays of pixel displacements, component 0
horizontal (columns), component 1 vertical (rows).  The convention is
that flow(a, b) sampled at p points to p's corresponding location in b,
so warp(b, flow)(p) = b(p + flow(p)) aligns b onto a's grid.

The estimator is a pyramidal variational solver (brightness constancy
with quadratic smoothness, Jacobi relaxation, coarse-to-fine warping),
which is deterministic and needs no training data.  On homogeneous
frames the smoothness prior keeps the flow at its zero initialisation.
The warping-loss surfaces work on [0, 1] intensities; the estimator
accepts [0, 255] frames and rescales internally.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import map_coordinates

from .tensor_core import ShapeError

# Horn-Schunck neighbourhood weights for the flow average
_AVG_W = np.array([[1 / 12, 1 / 6, 1 / 12],
                   [1 / 6, 0.0, 1 / 6],
                   [1 / 12, 1 / 6, 1 / 12]])


def _as_gray01(frame):
    """(H,W) or (C,H,W) on [0,255] -> single-channel [0,1]."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3:
        frame = frame.mean(axis=0)
    return frame / 255.0


def warp_inverse(b, flow):
    """Bilinear sampling of b at p + flow(p).

    b: (H, W) or (C, H, W); flow: (H, W, 2).  Out-of-bounds sample
    coordinates are clamped to the edge and flagged in the returned
    boolean map (callers fold it into occlusion).
    Returns (warped, out_of_range_mask).
    """
    b = np.asarray(b, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    spatial = b.shape[-2:]
    if flow.shape != spatial + (2,):
        raise ShapeError(
            f"warp_inverse: flow shape {flow.shape} does not match frame {b.shape}")
    h, w = spatial
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    xs = xs + flow[:, :, 0]
    ys = ys + flow[:, :, 1]
    oob = (xs < 0) | (xs > w - 1) | (ys < 0) | (ys > h - 1)
    coords = np.stack([ys, xs])
    if b.ndim == 2:
        warped = map_coordinates(b, coords, order=1, mode="nearest")
    else:
        warped = np.stack([
            map_coordinates(ch, coords, order=1, mode="nearest") for ch in b])
    return warped, oob


def _avg_flow(x):
    """Weighted 8-neighbour average with edge replication."""
    xp = np.pad(x, 1, mode="edge")
    out = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            wgt = _AVG_W[dy, dx]
            if wgt:
                out += wgt * xp[dy:dy + x.shape[0], dx:dx + x.shape[1]]
    return out


def _downsample2(img):
    h, w = img.shape
    if h % 2:
        img = np.concatenate([img, img[-1:]], axis=0)
    if w % 2:
        img = np.concatenate([img, img[:, -1:]], axis=1)
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2]
                   + img[0::2, 1::2] + img[1::2, 1::2])


def _resize_bilinear(img, shape):
    h, w = img.shape
    nh, nw = shape
    ys = np.linspace(0, h - 1, nh)
    xs = np.linspace(0, w - 1, nw)
    grid = np.stack(np.meshgrid(ys, xs, indexing="ij"))
    return map_coordinates(img, grid, order=1, mode="nearest")


def _solve_increment(fx, fy, ft, alpha, n_iters, tol):
    """Jacobi relaxation of the linearised constancy + smoothness system."""
    du = np.zeros_like(fx)
    dv = np.zeros_like(fx)
    denom = alpha * alpha + fx * fx + fy * fy
    for _ in range(n_iters):
        du_bar = _avg_flow(du)
        dv_bar = _avg_flow(dv)
        t = (fx * du_bar + fy * dv_bar + ft) / denom
        du_new = du_bar - fx * t
        dv_new = dv_bar - fy * t
        delta = max(np.max(np.abs(du_new - du)), np.max(np.abs(dv_new - dv)))
        du, dv = du_new, dv_new
        if delta < tol:
            break
    return du, dv


def estimate_flow(a, b, levels=3, smoothness=0.15, n_warps=3, n_iters=120,
                  tol=1e-3):
    """Dense flow from a to b on a coarse-to-fine pyramid.

    a, b: frames of identical shape, [0, 255] intensities.
    Raises if the frames are too small for the requested pyramid depth.
    """
    ga, gb = _as_gray01(a), _as_gray01(b)
    if ga.shape != gb.shape:
        raise ShapeError(f"estimate_flow: shapes differ {ga.shape} vs {gb.shape}")
    h, w = ga.shape
    if min(h, w) // (2 ** (levels - 1)) < 8:
        raise ValueError(
            f"estimate_flow: {h}x{w} frames too small for {levels} pyramid levels")
    pyr_a, pyr_b = [ga], [gb]
    for _ in range(levels - 1):
        pyr_a.append(_downsample2(pyr_a[-1]))
        pyr_b.append(_downsample2(pyr_b[-1]))
    flow = np.zeros(pyr_a[-1].shape + (2,))
    for lev in range(levels - 1, -1, -1):
        la, lb = pyr_a[lev], pyr_b[lev]
        if flow.shape[:2] != la.shape:
            u = 2.0 * _resize_bilinear(flow[:, :, 0], la.shape)
            v = 2.0 * _resize_bilinear(flow[:, :, 1], la.shape)
            flow = np.stack([u, v], axis=-1)
        for _ in range(n_warps):
            bw, _ = warp_inverse(lb, flow)
            avg = 0.5 * (la + bw)
            fx = np.gradient(avg, axis=1)
            fy = np.gradient(avg, axis=0)
            ft = bw - la
            du, dv = _solve_increment(fx, fy, ft, smoothness, n_iters, tol)
            flow[:, :, 0] += du
            flow[:, :, 1] += dv
        lim = float(max(la.shape))
        np.clip(flow, -lim, lim, out=flow)
    return flow


def flow_pair(denoise_fn, stack_prev, stack_cur, online=True, **flow_kwargs):
    """Forward/backward flow between two adjacent frames.

    When online is set the flows are computed on the denoised frames
    denoise_fn(stack); otherwise on the raw centre frames of the stacks.
    Returns (flow_forward, flow_backward).
    """
    stack_prev = np.asarray(stack_prev, dtype=np.float64)
    stack_cur = np.asarray(stack_cur, dtype=np.float64)
    center = stack_prev.shape[0] // 2
    if online:
        prev = denoise_fn(stack_prev)
        cur = denoise_fn(stack_cur)
    else:
        prev = stack_prev[center]
        cur = stack_cur[center]
    forward = estimate_flow(prev, cur, **flow_kwargs)
    backward = estimate_flow(cur, prev, **flow_kwargs)
    return forward, backward


def endpoint_error(flow_est, flow_gt):
    """Mean Euclidean distance between flow vectors."""
    flow_est = np.asarray(flow_est, dtype=np.float64)
    if flow_est.shape != np.shape(flow_gt):
        raise ShapeError(
            f"endpoint_error: shapes differ {flow_est.shape} vs {np.shape(flow_gt)}")
    return float(np.mean(np.linalg.norm(flow_est - flow_gt, axis=-1)))


def hybrid_flow_loss(flow_est, gt_flow, gt_occlusion, a, b, lam):
    """Endpoint error plus a weighted photometric alignment penalty.

    a, b: frames on the [0, 1] intensity scale.  The photometric term is
    the squared difference between a and b warped by the estimated flow,
    restricted to non-occluded pixels of a and averaged over all elements.
    """
    epe = endpoint_error(flow_est, gt_flow)
    warped, _ = warp_inverse(np.asarray(a, dtype=np.float64), flow_est)
    diff = np.asarray(a, dtype=np.float64) - warped
    keep = 1.0 - np.asarray(gt_occlusion, dtype=np.float64)
    masked = keep * diff    # broadcasts over channels if present
    return epe + lam * float(np.mean(masked * masked))


def _bilinear_with_grad(b, flow):
    """Bilinear sample of b at p + flow plus the sample's coordinate gradient.

    Uses the exact derivative of the bilinear interpolant (clamped at the
    edges, where the derivative toward the outside is zero).
    Returns (warped, d/dx, d/dy), each shaped like b.
    """
    b = np.asarray(b, dtype=np.float64)
    squeeze = b.ndim == 2
    if squeeze:
        b = b[None]
    _, h, w = b.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    xs = np.clip(xs + flow[:, :, 0], 0.0, w - 1.0)
    ys = np.clip(ys + flow[:, :, 1], 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xs), w - 2).astype(int)
    y0 = np.minimum(np.floor(ys), h - 2).astype(int)
    fx = xs - x0
    fy = ys - y0
    p00 = b[:, y0, x0]
    p01 = b[:, y0, x0 + 1]
    p10 = b[:, y0 + 1, x0]
    p11 = b[:, y0 + 1, x0 + 1]
    top = p00 + (p01 - p00) * fx
    bot = p10 + (p11 - p10) * fx
    warped = top + (bot - top) * fy
    dx = (p01 - p00) * (1 - fy) + (p11 - p10) * fy
    dy = bot - top
    if squeeze:
        return warped[0], dx[0], dy[0]
    return warped, dx, dy


def refine_flow(flow_init, a, b, occlusion=None, steps=10, step_size=1.0,
                lam=0.06, lam_dev=0.1):
    """Descend the photometric warping objective directly over the flow.

    Minimises lam * mean((1-o) (a - warp(b, flow))^2)
            + lam_dev * mean((flow - flow_init)^2)
    by gradient descent with step halving, so the objective never
    increases.  a, b on the [0, 1] scale; steps=0 returns flow_init.
    """
    flow = np.array(flow_init, dtype=np.float64, copy=True)
    if steps <= 0:
        return flow
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    keep = (1.0 if occlusion is None
            else 1.0 - np.asarray(occlusion, dtype=np.float64))
    n_photo = a.size
    n_dev = flow.size

    def objective(fl):
        warped, _, _ = _bilinear_with_grad(b, fl)
        r = keep * (a - warped)
        dev = fl - flow_init
        return (lam * float(np.sum(r * r)) / n_photo
                + lam_dev * float(np.sum(dev * dev)) / n_dev)

    current = objective(flow)
    step = float(step_size)
    for _ in range(steps):
        warped, dx, dy = _bilinear_with_grad(b, flow)
        resid = keep * (a - warped)        # (C, H, W)
        gu = (-2.0 * lam / n_photo) * np.sum(resid * keep * dx, axis=0)
        gv = (-2.0 * lam / n_photo) * np.sum(resid * keep * dy, axis=0)
        grad = np.stack([gu, gv], axis=-1)
        grad += (2.0 * lam_dev / n_dev) * (flow - flow_init)
        accepted = False
        for _ in range(20):
            cand = flow - step * grad
            val = objective(cand)
            if val < current:
                flow, current = cand, val
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
    return flow
