"""
Sliding-window inference with overlap averaging and the dual-decoder ensemble.
"""

import itertools
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch

from .volumes import LabelMask, ProbabilityMap


@dataclass(frozen=True)
class WindowPlan:
    volume_shape: Tuple[int, int, int]
    window: Tuple[int, int, int]
    stride: Tuple[int, int, int]
    corners_per_axis: Tuple[Tuple[int, ...], ...]

    @property
    def corners(self):
        return list(itertools.product(*self.corners_per_axis))

    def __len__(self):
        return int(np.prod([len(c) for c in self.corners_per_axis]))

    def slices(self):
        for corner in self.corners:
            yield tuple(slice(c, c + w) for c, w in zip(corner, self.window))


def axis_corners(dim: int, win: int, stride: int):
    if win > dim:
        raise ValueError(f"window {win} larger than volume dim {dim}")
    if stride < 1:
        raise ValueError("stride must be at least 1")
    if stride > win:
        raise ValueError(f"stride {stride} exceeds window {win}; voxels would be skipped")
    corners = list(range(0, dim - win + 1, stride))
    if corners[-1] != dim - win:
        corners.append(dim - win)
    return tuple(corners)


def plan_windows(volume_shape, window, stride) -> WindowPlan:
    """Per-axis corners ``0, s, 2s, ...`` plus an end-aligned last window."""
    volume_shape = tuple(int(v) for v in volume_shape)
    window = tuple(int(w) for w in window)
    stride = tuple(int(s) for s in stride)
    if not len(volume_shape) == len(window) == len(stride) == 3:
        raise ValueError("volume shape, window and stride must all be 3D")
    corners = tuple(axis_corners(d, w, s) for d, w, s in zip(volume_shape, window, stride))
    return WindowPlan(volume_shape, window, stride, corners)


def cut_windows(plan: WindowPlan, array) -> np.ndarray:
    array = np.asarray(array)
    if array.shape != plan.volume_shape:
        raise ValueError(f"array shape {array.shape} != planned {plan.volume_shape}")
    return np.stack([array[s] for s in plan.slices()])


def coverage_count(plan: WindowPlan) -> np.ndarray:
    count = np.zeros(plan.volume_shape, dtype=np.int64)
    for s in plan.slices():
        count[s] += 1
    return count


def recompose(plan: WindowPlan, predictions) -> np.ndarray:
    """Average window predictions back onto the volume grid (float64)."""
    predictions = np.asarray(predictions)
    if predictions.shape != (len(plan),) + plan.window:
        raise ValueError(
            f"expected {len(plan)} predictions of shape {plan.window}, "
            f"got array of shape {predictions.shape}")
    total = np.zeros(plan.volume_shape, dtype=np.float64)
    count = np.zeros(plan.volume_shape, dtype=np.int64)
    for pred, s in zip(predictions, plan.slices()):
        total[s] += pred
        count[s] += 1
    return total / count


def predict_windows(model, volume, plan: WindowPlan, batch_size: int = 4):
    """Run `model` over every window; returns recomposed ``(P_A, P_B)`` arrays.

    `model` is any callable mapping a ``(B, 1, *window)`` tensor to a pair of
    tensors of the same shape, typically a DualDecoderNet in eval mode.
    """
    arr = np.asarray(getattr(volume, "data", volume), dtype=np.float32)
    windows = cut_windows(plan, arr)
    params = getattr(model, "parameters", None)
    dtype = next(params()).dtype if params is not None else torch.float32
    out_a, out_b = [], []
    with torch.no_grad():
        for i in range(0, len(windows), batch_size):
            x = torch.as_tensor(windows[i:i + batch_size][:, None], dtype=dtype)
            pa, pb = model(x)
            out_a.append(pa[:, 0].double().numpy())
            out_b.append(pb[:, 0].double().numpy())
    return recompose(plan, np.concatenate(out_a)), recompose(plan, np.concatenate(out_b))


def segment_volume(model, volume, plan: WindowPlan, threshold: float = 0.5,
                   batch_size: int = 4, return_decoders: bool = False):
    """Ensemble ``(P_A + P_B) / 2`` over a window plan, thresholded into a mask."""
    was_training = getattr(model, "training", False)
    if was_training:
        model.eval()
    try:
        pa, pb = predict_windows(model, volume, plan, batch_size)
    finally:
        if was_training:
            model.train()
    ens = 0.5 * (pa + pb)
    spacing = getattr(volume, "spacing", (1.0, 1.0, 1.0))
    prob = ProbabilityMap(ens, "ensemble")
    mask = LabelMask(ens > threshold, spacing)
    if return_decoders:
        return prob, mask, ProbabilityMap(pa, "decoder_A"), ProbabilityMap(pb, "decoder_B")
    return prob, mask
