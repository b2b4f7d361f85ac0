"""
Epistemic uncertainty: Monte Carlo dropout entropy and dual-decoder discrepancy.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .netarch import forward_with_dropout

METHODS = ("mc_dropout", "decoder_discrepancy")


@dataclass(frozen=True, eq=False)
class UncertaintyMap:
    data: np.ndarray
    method: str
    n_passes: Optional[int] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 3:
            raise ValueError("uncertainty map must be 3D")
        if np.any(data < 0):
            raise ValueError("uncertainty must be nonnegative")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def summary(self, threshold: float) -> dict:
        return {
            "mean": float(self.data.mean()),
            "max": float(self.data.max()),
            "fraction_above": float((self.data > threshold).mean()),
        }


def _xlogx(x):
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = x[pos] * np.log(x[pos])
    return out


def entropy_from_passes(passes, class_axis: Optional[int] = None) -> np.ndarray:
    """Voxelwise entropy (nats) of the mean prediction over stochastic passes.

    Args:
        passes: array with the pass index on axis 0.  Without `class_axis`
            each entry is a foreground probability and the background class is
            ``1 - p``.  With `class_axis` the entries are full class
            distributions along that axis (counted after removing axis 0).
    """
    passes = np.asarray(passes, dtype=np.float64)
    mu = passes.mean(axis=0)
    if class_axis is None:
        return -(_xlogx(mu) + _xlogx(1.0 - mu))
    return -_xlogx(mu).sum(axis=class_axis)


def pass_seeds(seed: int, n_passes: int):
    """Independent per-pass seeds derived from ``(seed, pass index)``."""
    return [int(np.random.SeedSequence([seed, n]).generate_state(1)[0]) for n in range(n_passes)]


def mc_dropout_uncertainty(net, volume, n_passes: int = 8, seed: int = 0,
                           output: str = "ensemble", predict=None) -> UncertaintyMap:
    """Entropy of the averaged prediction over `n_passes` dropout passes.

    Args:
        net: a dual-decoder network with ``dropout_rate > 0``.
        volume: 3D array (or Volume) whose shape the network accepts, unless
            `predict` is given.
        output: which prediction each pass contributes: "A", "B" or the
            "ensemble" mean of both.
        predict: optional ``predict(volume_array, dropout_seed) -> (P_A, P_B)``
            override, e.g. a sliding-window predictor for large volumes.
    """
    if n_passes < 2:
        raise ValueError("n_passes must be at least 2")
    if output not in ("A", "B", "ensemble"):
        raise ValueError(f"unknown output {output!r}")
    arr = np.asarray(getattr(volume, "data", volume), dtype=np.float32)
    if predict is None:
        dtype = next(net.parameters()).dtype

        def predict(a, s):
            x = torch.as_tensor(a, dtype=dtype)[None, None]
            with torch.no_grad():
                pa, pb = forward_with_dropout(net, x, s)
            return pa[0, 0].double().numpy(), pb[0, 0].double().numpy()

    passes = []
    for s in pass_seeds(seed, n_passes):
        pa, pb = predict(arr, s)
        pa, pb = np.asarray(pa, np.float64), np.asarray(pb, np.float64)
        passes.append({"A": pa, "B": pb}.get(output, 0.5 * (pa + pb)))
    return UncertaintyMap(entropy_from_passes(np.stack(passes)), "mc_dropout", n_passes)


def decoder_discrepancy(p_a, p_b) -> UncertaintyMap:
    a = np.asarray(getattr(p_a, "data", p_a), dtype=np.float64)
    b = np.asarray(getattr(p_b, "data", p_b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return UncertaintyMap(np.abs(a - b), "decoder_discrepancy")
