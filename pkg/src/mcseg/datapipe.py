"""
Data pipeline: preprocessing, random patches, in-plane augmentation,
2 labeled + 2 unlabeled batch composition, dataset splits and a seeded
synthetic volume generator standing in for real scans.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .volumes import LabelMask, Volume, check_pair, read_mask, read_volume, write_mask, write_volume

NORM_EPS = 1e-8
SPLIT_ROLES = ("labeled", "unlabeled", "validation")


# -- preprocessing -----------------------------------------------------------

def foreground_crop_box(mask, margin: int):
    """Bounding box of the foreground grown by `margin` per side, clamped to the grid."""
    m = np.asarray(getattr(mask, "data", mask)).astype(bool)
    if not m.any():
        raise ValueError("cannot crop around an empty mask")
    idx = np.argwhere(m)
    lo = np.maximum(idx.min(axis=0) - margin, 0)
    hi = np.minimum(idx.max(axis=0) + 1 + margin, m.shape)
    return tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))


def normalize_intensity(data) -> np.ndarray:
    """Zero mean, unit variance; a constant input becomes all zeros."""
    x = np.asarray(data, dtype=np.float64)
    std = x.std()
    if std < NORM_EPS:
        # the computed mean of a constant can be off by one ulp; return exact zeros
        return np.zeros(x.shape, np.float32)
    return ((x - x.mean()) / std).astype(np.float32)


def preprocess(v: Volume, y: LabelMask, margin: int = 25):
    """Crop to the (margin-grown) foreground box, then z-score the crop."""
    check_pair(v, y)
    box = foreground_crop_box(y, margin)
    return (Volume(normalize_intensity(v.data[box]), v.spacing),
            LabelMask(y.data[box], y.spacing))


# -- patches and augmentation ------------------------------------------------

@dataclass(frozen=True)
class PatchSpec:
    shape: Tuple[int, int, int] = (48, 48, 32)
    rot90_inplane: bool = True
    flips: bool = True

    def check_fits(self, volume_shape):
        if any(p > v for p, v in zip(self.shape, volume_shape)):
            raise ValueError(f"patch {self.shape} larger than volume {tuple(volume_shape)}")


def sample_patch(v, y, spec: PatchSpec, rng: np.random.Generator):
    """Uniformly placed patch; the label (if any) is cut at the same corner."""
    arr = np.asarray(getattr(v, "data", v))
    spec.check_fits(arr.shape)
    corner = [int(rng.integers(0, d - p + 1)) for d, p in zip(arr.shape, spec.shape)]
    box = tuple(slice(c, c + p) for c, p in zip(corner, spec.shape))
    lab = None if y is None else np.asarray(getattr(y, "data", y))[box]
    return arr[box], lab


@dataclass(frozen=True)
class Transform:
    """k quarter-turns in the (H, W) plane, then optional mirrors along H and W."""

    k: int = 0
    flip_h: bool = False
    flip_w: bool = False

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.rot90(x, self.k, axes=(0, 1))
        if self.flip_h:
            x = x[::-1]
        if self.flip_w:
            x = x[:, ::-1]
        return np.ascontiguousarray(x)

    def invert(self, x: np.ndarray) -> np.ndarray:
        if self.flip_w:
            x = x[:, ::-1]
        if self.flip_h:
            x = x[::-1]
        return np.ascontiguousarray(np.rot90(x, -self.k, axes=(0, 1)))


def draw_transform(spec: PatchSpec, rng: np.random.Generator) -> Transform:
    k = int(rng.integers(0, 4)) if spec.rot90_inplane else 0
    fh, fw = (bool(b) for b in rng.integers(0, 2, size=2)) if spec.flips else (False, False)
    return Transform(k, fh, fw)


def augment(patch, label, spec: PatchSpec, rng: np.random.Generator):
    t = draw_transform(spec, rng)
    return t.apply(patch), (None if label is None else t.apply(label))


# -- splits and batches ------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    labeled: Tuple[str, ...]
    unlabeled: Tuple[str, ...]
    validation: Tuple[str, ...]
    seed: int = 0

    def __post_init__(self):
        sets = [set(self.labeled), set(self.unlabeled), set(self.validation)]
        if any(a & b for i, a in enumerate(sets) for b in sets[i + 1:]):
            raise ValueError("split lists must be pairwise disjoint")

    def roles(self):
        for role in SPLIT_ROLES:
            for case in getattr(self, role):
                yield case, role


def make_split(train_ids: Sequence[str], validation_ids: Sequence[str],
               labeled_ratio: float, seed: int = 0) -> DatasetSplit:
    """Shuffle the training ids and mark ``round(ratio * n)`` (at least 1) as labeled."""
    if not 0 < labeled_ratio <= 1:
        raise ValueError("labeled_ratio must be in (0, 1]")
    ids = list(train_ids)
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_lab = max(1, int(round(labeled_ratio * len(ids))))
    return DatasetSplit(tuple(sorted(order[:n_lab])), tuple(sorted(order[n_lab:])),
                        tuple(validation_ids), seed)


def write_manifest(split: DatasetSplit, path):
    Path(path).write_text("".join(f"{case} {role}\n" for case, role in split.roles()))


def read_manifest(path, seed: int = 0) -> DatasetSplit:
    lists = {r: [] for r in SPLIT_ROLES}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in lists:
            raise ValueError(f"{path}:{lineno}: expected '<id> <role>', got {line!r}")
        lists[parts[1]].append(parts[0])
    return DatasetSplit(tuple(lists["labeled"]), tuple(lists["unlabeled"]),
                        tuple(lists["validation"]), seed)


class EpochSampler:
    """Draws indices without replacement, reshuffling once the pool is exhausted."""

    def __init__(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("cannot sample from an empty pool")
        self.n = n
        self.rng = rng
        self._queue: List[int] = []

    def take(self, k: int) -> List[int]:
        out = []
        while len(out) < k:
            if not self._queue:
                self._queue = list(self.rng.permutation(self.n))
            # avoid the same item twice in one draw when the pool allows it
            pick = self._queue.pop(0)
            if pick in out and self.n >= k:
                self._queue.append(pick)
                continue
            out.append(int(pick))
        return out


@dataclass
class Batch:
    images: np.ndarray       # (4, 1, *patch) float32
    labels: np.ndarray       # (4, 1, *patch) float32, zeros where unlabeled
    labeled: np.ndarray      # (4,) bool
    ids: Tuple[str, ...]


class BatchComposer:
    """Builds batches of `n_labeled` labeled plus `n_unlabeled` unlabeled patches.

    Pools hold preprocessed arrays: ``labeled_pool`` is a list of
    ``(id, volume, mask)`` and ``unlabeled_pool`` a list of ``(id, volume)``.
    """

    def __init__(self, labeled_pool, unlabeled_pool, spec: PatchSpec, seed: int = 0,
                 n_labeled: int = 2, n_unlabeled: int = 2):
        if not labeled_pool or not unlabeled_pool:
            raise ValueError("both the labeled and the unlabeled pool must be nonempty")
        self.labeled_pool = list(labeled_pool)
        self.unlabeled_pool = list(unlabeled_pool)
        self.spec = spec
        self.n_labeled = n_labeled
        self.n_unlabeled = n_unlabeled
        self.rng = np.random.default_rng(seed)
        self.lab_sampler = EpochSampler(len(self.labeled_pool), self.rng)
        self.unl_sampler = EpochSampler(len(self.unlabeled_pool), self.rng)

    def get_state(self):
        return {
            "rng": self.rng.bit_generator.state,
            "lab_queue": list(self.lab_sampler._queue),
            "unl_queue": list(self.unl_sampler._queue),
        }

    def set_state(self, state):
        self.rng.bit_generator.state = state["rng"]
        self.lab_sampler._queue = list(state["lab_queue"])
        self.unl_sampler._queue = list(state["unl_queue"])

    def next_batch(self) -> Batch:
        images, labels, ids = [], [], []
        for i in self.lab_sampler.take(self.n_labeled):
            cid, vol, mask = self.labeled_pool[i]
            p, l = sample_patch(vol, mask, self.spec, self.rng)
            p, l = augment(p, l, self.spec, self.rng)
            images.append(p)
            labels.append(l)
            ids.append(cid)
        for i in self.unl_sampler.take(self.n_unlabeled):
            cid, vol = self.unlabeled_pool[i]
            p, _ = sample_patch(vol, None, self.spec, self.rng)
            p, _ = augment(p, None, self.spec, self.rng)
            images.append(p)
            labels.append(np.zeros_like(p))
            ids.append(cid)
        sel = np.array([True] * self.n_labeled + [False] * self.n_unlabeled)
        return Batch(np.stack(images)[:, None].astype(np.float32),
                     np.stack(labels)[:, None].astype(np.float32), sel, tuple(ids))


def compose_batch(labeled_pool, unlabeled_pool, rng_state: int, spec: PatchSpec = PatchSpec()):
    """One-off batch of 2 labeled + 2 unlabeled patches (see BatchComposer for streams)."""
    return BatchComposer(labeled_pool, unlabeled_pool, spec, seed=rng_state).next_batch()


# -- synthetic data ----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Random lobed ellipsoids, blurred and corrupted by Gaussian noise.

    Radii are fractions of the smallest volume dimension.  `blur_sigma`,
    `noise_sigma` and `contrast` accept either a number or a ``(low, high)``
    range drawn per volume, which imitates scans from different acquisitions.
    `distractors` adds that many (range allowed) unlabeled bright blobs away
    from the target.  `bias_field` is the amplitude of a smooth additive
    intensity ramp with random direction.
    """

    shape: Tuple[int, int, int] = (64, 64, 64)
    count: int = 40
    radius_range: Tuple[float, float] = (0.2, 0.3)
    max_lobes: int = 3
    lobe_scale: Tuple[float, float] = (0.35, 0.6)
    blur_sigma: Union[float, Tuple[float, float]] = 1.5
    noise_sigma: Union[float, Tuple[float, float]] = 0.35
    contrast: Union[float, Tuple[float, float]] = 1.0
    distractors: Union[int, Tuple[int, int]] = 0
    distractor_radius: Tuple[float, float] = (0.06, 0.12)
    bias_field: float = 0.0
    seed: int = 0

    def validate(self):
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise ValueError("synthetic volumes need all dims >= 8")
        if self.count < 1:
            raise ValueError("count must be positive")
        if self.radius_range[0] * min(self.shape) < 2:
            raise ValueError("ellipsoid radius below 2 voxels")
        if self.max_lobes < 1:
            raise ValueError("max_lobes must be >= 1")
        if min(_as_range(self.blur_sigma)) < 0 or min(_as_range(self.noise_sigma)) < 0:
            raise ValueError("blur and noise sigmas must be nonnegative")


def _as_range(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def _draw(rng, v):
    lo, hi = _as_range(v)
    return lo if lo == hi else rng.uniform(lo, hi)


def _ellipsoid(grid, center, radii, rot):
    d = (grid - center) @ rot       # coordinates in the ellipsoid frame
    return ((d / radii) ** 2).sum(-1) <= 1.0


def synthetic_case(spec: SyntheticSpec, index: int):
    """Deterministic ``(Volume, LabelMask)`` for one index of the dataset."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, index])
    shape = np.array(spec.shape)
    grid = np.stack(np.meshgrid(*[np.arange(s) for s in shape], indexing="ij"), -1).astype(np.float64)
    smin = shape.min()
    radii = rng.uniform(*spec.radius_range, size=3) * smin
    margin = radii.max() * 1.2
    center = np.array([rng.uniform(min(margin, s / 2), max(s - margin, s / 2)) for s in shape])
    rot = Rotation.random(random_state=rng).as_matrix()
    mask = _ellipsoid(grid, center, radii, rot)
    for _ in range(int(rng.integers(1, spec.max_lobes + 1))):
        # lobe centred on the ellipsoid surface in a random direction
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        on_surface = center + rot @ (u * radii)
        lobe_r = rng.uniform(*spec.lobe_scale, size=3) * radii.min()
        mask |= _ellipsoid(grid, on_surface, lobe_r, Rotation.random(random_state=rng).as_matrix())
    contrast = _draw(rng, spec.contrast)
    bright = mask.astype(np.float64)
    lo, hi = _as_range(spec.distractors)
    n_distract = int(rng.integers(lo, hi + 1))
    keep_out = ndimage.binary_dilation(mask, iterations=3)
    placed = 0
    for _ in range(50 * n_distract):
        if placed == n_distract:
            break
        r = rng.uniform(*spec.distractor_radius) * smin
        c = rng.uniform(r, shape - r)
        blob = ((grid - c) ** 2).sum(-1) <= r * r
        if (blob & keep_out).any():
            continue
        bright[blob] = 1.0
        keep_out |= blob
        placed += 1
    image = bright * contrast
    if spec.bias_field > 0:
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        ramp = ((grid - shape / 2) @ direction) / (smin / 2)
        image = image + spec.bias_field * ramp
    blur = _draw(rng, spec.blur_sigma)
    if blur > 0:
        image = ndimage.gaussian_filter(image, blur)
    noise = _draw(rng, spec.noise_sigma)
    if noise > 0:
        image = image + rng.normal(0.0, noise, size=image.shape)
    return Volume(image.astype(np.float32)), LabelMask(mask)


# Desk-scale dataset used by the `desk` training preset and `synth-data`:
# smaller volumes than the SyntheticSpec default so a full ablation fits a
# CPU budget, and per-volume acquisition variability so that the few labeled
# cases do not cover every appearance the validation cases show.
DESK_SHAPE = (48, 48, 48)
DESK_VARIABILITY = {
    "noise_sigma": (0.1, 0.5),
    "contrast": (0.3, 1.5),
    "blur_sigma": (0.5, 3.0),
    "distractors": (0, 4),
    "bias_field": 0.5,
}


def desk_synthetic_spec(seed: int = 0, count: int = 40, shape=DESK_SHAPE) -> SyntheticSpec:
    return SyntheticSpec(shape=tuple(shape), count=count, seed=seed, **DESK_VARIABILITY)


def generate_synthetic(spec: SyntheticSpec):
    return [synthetic_case(spec, i) for i in range(spec.count)]


def case_id(index: int) -> str:
    return f"case{index:03d}"


def write_synthetic_dataset(spec: SyntheticSpec, out_dir, n_validation: int = 8,
                            labeled_ratio: float = 0.1, split_seed: Optional[int] = None):
    """Write every case as ``<id>_image.hdr`` / ``<id>_label.hdr`` plus ``split.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(spec.count):
        vol, mask = synthetic_case(spec, i)
        cid = case_id(i)
        write_volume(vol, out / f"{cid}_image.hdr")
        write_mask(mask, out / f"{cid}_label.hdr")
        ids.append(cid)
    if n_validation >= len(ids):
        raise ValueError("need at least one training case")
    n_train = len(ids) - n_validation
    split = make_split(ids[:n_train], ids[n_train:], labeled_ratio,
                       spec.seed if split_seed is None else split_seed)
    write_manifest(split, out / "split.txt")
    return split


def load_case(data_dir, cid: str, with_label: bool = True):
    d = Path(data_dir)
    vol = read_volume(d / f"{cid}_image.hdr")
    if not with_label:
        return vol, None
    mask = read_mask(d / f"{cid}_label.hdr")
    check_pair(vol, mask)
    return vol, mask
