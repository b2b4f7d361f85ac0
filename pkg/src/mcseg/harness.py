"""
Training harness: configuration and presets, the SGD schedule, one training
step, full experiments with periodic per-decoder validation, ablation
variants, checkpoint/resume and CSV logs.
"""

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
import yaml

from . import datapipe, inference, metrics
from .netarch import NetworkConfig, build_network, load_checkpoint, parameter_checksum, save_checkpoint
from .objectives import CONSISTENCY_MODES, RampUpSchedule, dice_loss, total_loss

log = logging.getLogger(__name__)

VARIANT_ARCH = {"V2": "transposed_conv", "V2d": "trilinear"}


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    data_dir: str = "data/synthetic"
    out_dir: str = "runs/default"
    iterations: int = 2000
    batch_size: int = 4
    labeled_per_batch: int = 2
    labeled_ratio: float = 0.1
    base_lr: float = 0.01
    lr_decay_factor: float = 0.1
    lr_decay_interval: int = 800
    momentum: float = 0.9
    weight_decay: float = 1e-4
    temperature: float = 0.1
    lambda_max: float = 0.1
    ramp_iterations: int = 2000
    dice_epsilon: float = 1e-5
    patch: dict = field(default_factory=lambda: {"shape": [32, 32, 24], "rot90_inplane": True,
                                                 "flips": True})
    network: dict = field(default_factory=lambda: {"levels": 3, "base_channels": 8})
    decoder_b: str = "trilinear"
    consistency: str = "CPL"
    seed: int = 0
    val_interval: int = 500
    eval_stride: List[int] = field(default_factory=lambda: [8, 8, 8])
    threshold: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.consistency not in CONSISTENCY_MODES:
            raise ValueError(f"consistency must be one of {CONSISTENCY_MODES}")
        if self.decoder_b not in VARIANT_ARCH.values():
            raise ValueError(f"decoder_b must be one of {tuple(VARIANT_ARCH.values())}")
        if not 0 < self.labeled_per_batch < self.batch_size:
            raise ValueError("need at least one labeled and one unlabeled patch per batch")
        if self.lr_decay_interval <= 0:
            raise ValueError("lr_decay_interval must be positive")
        self.network_config()  # raises on bad network keys

    def network_config(self) -> NetworkConfig:
        net = {k: v for k, v in self.network.items() if k not in ("decoder_a", "decoder_b")}
        return NetworkConfig(**net, decoder_a="transposed_conv", decoder_b=self.decoder_b)

    def patch_spec(self) -> datapipe.PatchSpec:
        p = dict(self.patch)
        return datapipe.PatchSpec(tuple(p.pop("shape")), **p)

    @property
    def ramp(self) -> RampUpSchedule:
        return RampUpSchedule(self.lambda_max, self.ramp_iterations)

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))


# The dataclass defaults are the desk preset: 48^3 synthetic volumes, a
# 3-level network with 8 base channels and 32x32x24 patches, sized so the
# whole ablation fits a single CPU core.
PRESETS = {
    "desk": {},
    "paper-la": {
        "iterations": 6000,
        "lr_decay_interval": 2500,
        "ramp_iterations": 6000,
        "patch": {"shape": [112, 112, 80], "rot90_inplane": True, "flips": True},
        "network": {"levels": 5, "base_channels": 16},
        "eval_stride": [18, 18, 4],
        "val_interval": 1000,
    },
}


def preset_config(name: str = "desk", **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    values = TrainConfig().to_dict()
    values.update(copy.deepcopy(PRESETS[name]))
    values.update(overrides)
    return TrainConfig(**values)


def load_config(path, preset: str = "desk") -> TrainConfig:
    """Preset defaults overlaid with the keys of a YAML config file."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return preset_config(preset, **data)


def save_config(cfg: TrainConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def ablation_variant(cfg: TrainConfig, variant) -> TrainConfig:
    """Configure one cell of the {V2, V2d} x {none, sPL, CPL} grid.

    `variant` is a pair like ``("V2d", "CPL")`` or a string like "V2d+CPL".
    """
    if isinstance(variant, str):
        arch, _, mode = variant.partition("+")
        mode = mode or "none"
    else:
        arch, mode = variant
    if arch not in VARIANT_ARCH or mode not in CONSISTENCY_MODES:
        raise ValueError(f"unknown variant {variant!r}")
    return replace(cfg, decoder_b=VARIANT_ARCH[arch], consistency=mode)


ABLATION_GRID = [(a, m) for a in ("V2", "V2d") for m in ("none", "sPL", "CPL")]


def lr_at(t: int, cfg: TrainConfig) -> float:
    return cfg.base_lr * cfg.lr_decay_factor ** (t // cfg.lr_decay_interval)


# -- state -------------------------------------------------------------------

@dataclass
class TrainState:
    net: torch.nn.Module
    optimizer: torch.optim.Optimizer
    iteration: int = 0
    best_dice: float = -1.0


def make_optimizer(net, cfg: TrainConfig):
    return torch.optim.SGD(net.parameters(), lr=cfg.base_lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def init_state(cfg: TrainConfig) -> TrainState:
    net = build_network(cfg.network_config(), seed=cfg.seed)
    return TrainState(net, make_optimizer(net, cfg))


def train_step(state: TrainState, batch: datapipe.Batch, cfg: TrainConfig):
    """One SGD step on a composed batch; returns ``(state, LossReport)``.

    With consistency "none" the unlabeled patches cannot influence the
    update, so only the labeled part of the batch is run through the network.
    """
    net = state.net
    net.train()
    images = torch.from_numpy(batch.images)
    labels = torch.from_numpy(batch.labels)
    selector = torch.from_numpy(np.asarray(batch.labeled, dtype=bool))
    if cfg.consistency == "none":
        images, labels = images[selector], labels[selector]
        selector = torch.ones(len(images), dtype=torch.bool)
    lr = lr_at(state.iteration, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    p_a, p_b = net(images.to(next(net.parameters()).dtype))
    loss, report = total_loss(p_a, p_b, labels.to(p_a.dtype), selector, state.iteration,
                              temperature=cfg.temperature, sched=cfg.ramp,
                              dice_epsilon=cfg.dice_epsilon, mode=cfg.consistency)
    if not all(math.isfinite(v) for v in (report.l_seg, report.l_c, report.total)):
        raise TrainingDivergedError(
            f"non-finite loss at iteration {state.iteration} "
            f"(l_seg={report.l_seg}, l_c={report.l_c}); batch ids: {list(batch.ids)}")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.iteration += 1
    return state, report


def supervised_step(state: TrainState, images, labels, cfg: TrainConfig):
    """Plain double-Dice SGD step on labeled patches only (reference for mode "none")."""
    net = state.net
    net.train()
    for group in state.optimizer.param_groups:
        group["lr"] = lr_at(state.iteration, cfg)
    x = torch.as_tensor(images)
    y = torch.as_tensor(labels)
    p_a, p_b = net(x)
    loss = dice_loss(p_a, y, cfg.dice_epsilon) + dice_loss(p_b, y, cfg.dice_epsilon)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.iteration += 1
    return state, float(loss.detach())


# -- logging -----------------------------------------------------------------

TRAIN_COLUMNS = ("iter", "l_seg", "l_c", "lambda", "lr")
EVAL_COLUMNS = ("iter", "output", "dice", "jaccard", "hd95", "asd", "undefined")
EVAL_OUTPUTS = ("decoder_A", "decoder_B", "ensemble")


@dataclass
class ExperimentLog:
    train_rows: List[tuple] = field(default_factory=list)
    eval_rows: List[tuple] = field(default_factory=list)

    def add_train(self, t, report, lr):
        self.train_rows.append((t, report.l_seg, report.l_c, report.lam, lr))

    def add_eval(self, t, summary: dict):
        for output in EVAL_OUTPUTS:
            s = summary[output]
            self.eval_rows.append((t, output, s["dice"], s["jaccard"], s["hd95"], s["asd"],
                                   s["undefined"]))

    def final_eval(self) -> dict:
        if not self.eval_rows:
            return {}
        last = self.eval_rows[-1][0]
        return {r[1]: dict(zip(EVAL_COLUMNS, r)) for r in self.eval_rows if r[0] == last}

    @staticmethod
    def _write(path, columns, rows):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(columns)
            for row in rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self._write(out / "train_log.csv", TRAIN_COLUMNS, self.train_rows)
        self._write(out / "eval_log.csv", EVAL_COLUMNS, self.eval_rows)

    @classmethod
    def read(cls, out_dir):
        out = Path(out_dir)
        lg = cls()
        with open(out / "train_log.csv") as fh:
            for r in csv.DictReader(fh):
                lg.train_rows.append((int(r["iter"]), float(r["l_seg"]), float(r["l_c"]),
                                      float(r["lambda"]), float(r["lr"])))
        with open(out / "eval_log.csv") as fh:
            for r in csv.DictReader(fh):
                lg.eval_rows.append((int(r["iter"]), r["output"], float(r["dice"]),
                                     float(r["jaccard"]), float(r["hd95"]), float(r["asd"]),
                                     int(r["undefined"])))
        return lg


# -- data and validation -----------------------------------------------------

def resplit(split: datapipe.DatasetSplit, labeled_ratio: float) -> datapipe.DatasetSplit:
    """Keep the manifest's split unless it disagrees with `labeled_ratio`."""
    train = sorted(split.labeled + split.unlabeled)
    if len(split.labeled) == max(1, int(round(labeled_ratio * len(train)))):
        return split
    log.info("re-splitting %d training cases at labeled ratio %s", len(train), labeled_ratio)
    return datapipe.make_split(train, split.validation, labeled_ratio, split.seed)


def load_dataset(cfg: TrainConfig):
    """Read the split manifest and intensity-normalize every referenced volume.

    Returns ``(split, labeled_pool, unlabeled_pool, validation_cases)``.
    """
    data_dir = Path(cfg.data_dir)
    manifest = data_dir / "split.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no split manifest at {manifest}")
    split = resplit(datapipe.read_manifest(manifest), cfg.labeled_ratio)
    if not split.labeled or not split.unlabeled:
        raise ValueError("split needs both labeled and unlabeled training cases")

    def norm(vol):
        return datapipe.normalize_intensity(vol.data)

    labeled = []
    for cid in split.labeled:
        vol, mask = datapipe.load_case(data_dir, cid)
        labeled.append((cid, norm(vol), mask.data.astype(np.float32)))
    unlabeled = [(cid, norm(datapipe.load_case(data_dir, cid, with_label=False)[0]))
                 for cid in split.unlabeled]
    validation = []
    for cid in split.validation:
        vol, mask = datapipe.load_case(data_dir, cid)
        validation.append((cid, norm(vol), mask.data))
    return split, labeled, unlabeled, validation


def validate(net, cases, cfg: TrainConfig) -> dict:
    """Mean metrics over validation cases for decoder A, decoder B and their ensemble.

    Surface distances of an empty prediction are undefined; they are left out
    of the means and counted in ``undefined``.
    """
    window = tuple(cfg.patch["shape"])
    per_output = {o: [] for o in EVAL_OUTPUTS}
    was_training = net.training
    net.eval()
    for _, vol, mask in cases:
        plan = inference.plan_windows(vol.shape, window, cfg.eval_stride)
        pa, pb = inference.predict_windows(net, vol, plan)
        for output, prob in zip(EVAL_OUTPUTS, (pa, pb, 0.5 * (pa + pb))):
            per_output[output].append(metrics.evaluate(prob > cfg.threshold, mask))
    if was_training:
        net.train()
    summary = {}
    for output, reports in per_output.items():
        hd = np.array([r.hd95 for r in reports])
        asd = np.array([r.asd for r in reports])
        ok = np.isfinite(hd)
        summary[output] = {
            "dice": float(np.mean([r.dice for r in reports])),
            "jaccard": float(np.mean([r.jaccard for r in reports])),
            "hd95": float(hd[ok].mean()) if ok.any() else float("nan"),
            "asd": float(asd[ok].mean()) if ok.any() else float("nan"),
            "undefined": int((~ok).sum()),
        }
    return summary


# -- experiments -------------------------------------------------------------

def _rng_state():
    return {"torch": torch.get_rng_state()}


def save_training_checkpoint(path, state: TrainState, cfg: TrainConfig, composer, log_: ExperimentLog):
    save_checkpoint(state.net, path,
                    optimizer=state.optimizer.state_dict(),
                    iteration=state.iteration,
                    best_dice=state.best_dice,
                    composer=composer.get_state(),
                    rng=_rng_state(),
                    train_config=cfg.to_dict(),
                    log={"train": list(log_.train_rows), "eval": list(log_.eval_rows)})


def run_experiment(cfg: TrainConfig, resume_from=None, progress: bool = False):
    """Train, validate every `val_interval` iterations and at the end, and persist.

    Writes ``train_log.csv``, ``eval_log.csv``, ``config.yaml``, ``final.pt``
    and ``best.pt`` (best ensemble Dice) into ``cfg.out_dir``.

    Returns:
        ``(ExperimentLog, TrainState)``
    """
    torch.use_deterministic_algorithms(True)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    _, labeled, unlabeled, validation = load_dataset(cfg)
    labeled_pool = [(cid, v, m) for cid, v, m in labeled]
    composer = datapipe.BatchComposer(labeled_pool, unlabeled, cfg.patch_spec(),
                                      seed=int(np.random.SeedSequence([cfg.seed, 1]).generate_state(1)[0]),
                                      n_labeled=cfg.labeled_per_batch,
                                      n_unlabeled=cfg.batch_size - cfg.labeled_per_batch)
    exp_log = ExperimentLog()
    if resume_from is not None:
        net, payload = load_checkpoint(resume_from)
        state = TrainState(net, make_optimizer(net, cfg), payload["iteration"], payload["best_dice"])
        state.optimizer.load_state_dict(payload["optimizer"])
        composer.set_state(payload["composer"])
        torch.set_rng_state(payload["rng"]["torch"])
        exp_log.train_rows = [tuple(r) for r in payload["log"]["train"]]
        exp_log.eval_rows = [tuple(r) for r in payload["log"]["eval"]]
    else:
        state = init_state(cfg)
        torch.manual_seed(cfg.seed)
    iterator = range(state.iteration, cfg.iterations)
    if progress:
        from tqdm import tqdm
        iterator = tqdm(iterator, initial=state.iteration, total=cfg.iterations)
    for _ in iterator:
        batch = composer.next_batch()
        t, lr = state.iteration, lr_at(state.iteration, cfg)
        state, report = train_step(state, batch, cfg)
        exp_log.add_train(t, report, lr)
        done = state.iteration
        if validation and (done % cfg.val_interval == 0 or done == cfg.iterations):
            summary = validate(state.net, validation, cfg)
            exp_log.add_eval(done, summary)
            log.info("iter %d ensemble dice %.2f (A %.2f, B %.2f)", done,
                     summary["ensemble"]["dice"], summary["decoder_A"]["dice"],
                     summary["decoder_B"]["dice"])
            if summary["ensemble"]["dice"] > state.best_dice:
                state.best_dice = summary["ensemble"]["dice"]
                save_checkpoint(state.net, out / "best.pt", iteration=done,
                                best_dice=state.best_dice, train_config=cfg.to_dict())
    save_training_checkpoint(out / "final.pt", state, cfg, composer, exp_log)
    exp_log.write(out)
    return exp_log, state


def final_checksum(out_dir) -> str:
    net, _ = load_checkpoint(Path(out_dir) / "final.pt")
    return parameter_checksum(net)
