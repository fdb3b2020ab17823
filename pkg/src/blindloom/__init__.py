"""blindloom: self-supervised multi-frame video denoising on a single video.

No ground truth is needed: training pairs are built from flow-aligned
adjacent frames with disjoint noise sources, weighted by occlusion and
lighting-variation maps, on top of a small from-scratch conv engine.
"""

__version__ = "0.1.0"
