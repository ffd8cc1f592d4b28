"""Mini-batch SGD with momentum and weight decay for :class:`MultiTaskNet`."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .data import Dataset, FactorSpec, pose_groups
from .network import LossResult, MultiTaskNet, TrunkConfig, save_checkpoint

logger = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    """Training hit a NaN/inf loss; ``losses`` holds the per-task breakdown."""

    def __init__(self, message: str, losses: dict):
        super().__init__(message)
        self.losses = losses


def _default_drops():
    return [[10, 0.1], [15, 0.1], [19, 0.1]]


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 0.01
    lr_drops: list = field(default_factory=_default_drops)  # [epoch, factor]: applies after that epoch
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    mode: str = "m"
    phi_s: float = 0.1
    side_tasks: list = field(default_factory=lambda: ["pose", "illum", "expr"])
    alphas: dict | None = None
    freeze: list = field(default_factory=list)  # parameter-name prefixes left untouched
    mu_grad_to_trunk: bool = True
    log_every: int = 100
    checkpoint_every_epoch: bool = False
    trunk: dict | None = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch normalisation)")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        self.lr_drops = [[int(e), float(f)] for e, f in self.lr_drops]
        for _, f in self.lr_drops:
            if not 0.0 < f <= 1.0:
                raise ValueError(f"learning-rate factors must lie in (0, 1], got {f}")

    def learning_rate(self, epoch: int) -> float:
        """Rate used during 1-based ``epoch``."""
        rate = self.lr
        for e, f in self.lr_drops:
            if epoch > e:
                rate *= f
        return rate

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class EpochLog:
    epoch: int
    lr: float
    losses: dict
    mu_s: list | None
    mu_m: list | None
    wall_time: float

    def row(self, side_tasks) -> dict:
        """Deterministic fields only; wall time is kept apart."""
        out = {"epoch": self.epoch, "lr": self.lr}
        for k, v in self.losses.items():
            out[f"loss_{k}"] = v
        for name, mu, keys in (("mu_s", self.mu_s, side_tasks), ("mu_m", self.mu_m, ("id", "group"))):
            if mu is not None:
                for k, v in zip(keys, mu):
                    out[f"{name}_{k}"] = v
        return out


def decays(name: str) -> bool:
    """Weight decay covers weight matrices and filters, not biases or BN scale/shift."""
    return not (name.endswith(".bias") or name.endswith(".gamma") or name.endswith(".beta"))


class SGD:
    """``v <- m v - lr (g + wd p)``; ``p <- p + v``."""

    def __init__(self, params: dict, momentum: float = 0.9, weight_decay: float = 5e-4,
                 freeze=()):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.frozen = {k for k in params if any(k.startswith(f) for f in freeze)}
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if name in self.frozen:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay and decays(name):
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v -= lr * g
            p.data += v


def compute_gradients(net: MultiTaskNet, images, labels) -> LossResult:
    ag.zero_grads(net.parameters())
    try:
        result = net.mtl_loss(images, labels, training=True)
    except ValueError as e:
        if "NaN" not in str(e):
            raise
        raise NonFiniteLossError(f"NaN during the forward pass: {e}", {}) from e
    total = float(result.total.data)
    if not math.isfinite(total):
        raise NonFiniteLossError(f"non-finite loss {total}; per-task losses: {result.breakdown}",
                                 result.breakdown)
    ag.backward(result.total)
    return result


def sgd_step(net: MultiTaskNet, images, labels, optimizer: SGD, lr: float) -> LossResult:
    result = compute_gradients(net, images, labels)
    optimizer.step(lr)
    return result


def identity_index(train: Dataset) -> dict[int, int]:
    return {ident: k for k, ident in enumerate(train.identities())}


def head_labels(ds: Dataset, id_map: dict[int, int]) -> np.ndarray:
    labels = ds.labels.copy()
    labels[:, 0] = [id_map[int(i)] for i in ds.y_d]
    return labels


def build_for(config: TrainConfig, spec: FactorSpec, num_identities: int) -> MultiTaskNet:
    trunk = TrunkConfig(**config.trunk) if config.trunk else TrunkConfig(image_size=spec.image_size)
    side_classes = {"pose": spec.num_poses, "illum": spec.illum_bins, "expr": spec.expr_bins}
    return MultiTaskNet(config.mode, num_identities, side_classes, pose_groups(spec.pose_bins),
                        trunk=trunk, side_tasks=config.side_tasks, phi_s=config.phi_s,
                        alphas=config.alphas, seed=config.seed,
                        mu_grad_to_trunk=config.mu_grad_to_trunk)


def _check_dataset(train: Dataset, spec: FactorSpec, config: TrainConfig) -> None:
    if len(train) < config.batch_size:
        raise ValueError(f"training set of {len(train)} images is smaller than one batch")
    if len(train.identities()) < 2:
        raise ValueError("training needs at least two identities")
    limits = (spec.num_poses, spec.illum_bins, spec.expr_bins)
    if config.mode != "s":
        for col, limit in zip((1, 2, 3), limits):
            vals = train.labels[:, col]
            if np.any(vals < 0) or np.any(vals >= limit):
                raise ValueError(f"mode {config.mode!r} needs label column {col} within [0, {limit})")
    if config.mode == "p" and len(set(pose_groups(spec.pose_bins).tolist())) < 2:
        raise ValueError("pose-directed mode needs pose bins spanning several pose groups")


def write_csv(path: Path, rows: list[dict]) -> None:
    """CSV with floats in round-trip (17 significant digit) form."""
    fields = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (format_float(v) if isinstance(v, float) else v) for k, v in r.items()})


def format_float(v: float) -> str:
    return format(v, ".17g")


def _write_epochs_csv(out: Path, logs: list[EpochLog], side_tasks) -> None:
    write_csv(out / "epochs.csv", [log.row(side_tasks) for log in logs])
    write_csv(out / "timing.csv", [{"epoch": log.epoch, "wall_time": log.wall_time} for log in logs])


def train(train_set: Dataset, config: TrainConfig, spec: FactorSpec, out_dir=None,
          net: MultiTaskNet | None = None, step_hook=None) -> tuple[MultiTaskNet, list[EpochLog]]:
    """Train a fresh network (or ``net``) and return it with one log per epoch.

    ``step_hook(step, result)`` is called after every update when given.
    """
    _check_dataset(train_set, spec, config)
    id_map = identity_index(train_set)
    labels = head_labels(train_set, id_map)
    if net is None:
        net = build_for(config, spec, len(id_map))
    optimizer = SGD(net.params, config.momentum, config.weight_decay, config.freeze)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 21]))
    out = Path(out_dir) if out_dir is not None else None
    extra = {"identity_map": {str(k): v for k, v in id_map.items()},
             "train_config": config.to_dict(), "spec": spec.to_dict()}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if config.checkpoint_every_epoch:
            save_checkpoint(net, out / "checkpoints" / "epoch_000", {**extra, "epoch": 0})
    n = len(train_set)
    nb = n // config.batch_size
    drop_epochs = {e for e, f in config.lr_drops if f < 1.0}
    logs: list[EpochLog] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        lr = config.learning_rate(epoch)
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        sums: dict[str, float] = {}
        mu_s_sum = mu_m_sum = None
        for b in range(nb):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            result = sgd_step(net, train_set.images[idx], labels[idx], optimizer, lr)
            step += 1
            for k, v in result.breakdown.items():
                sums[k] = sums.get(k, 0.0) + v
            sums["total"] = sums.get("total", 0.0) + float(result.total.data)
            if result.mu_s is not None:
                mu_s_sum = result.mu_s if mu_s_sum is None else mu_s_sum + result.mu_s
            if result.mu_m is not None:
                mu_m_sum = result.mu_m if mu_m_sum is None else mu_m_sum + result.mu_m
            if step_hook is not None:
                step_hook(step, result)
            if config.log_every and step % config.log_every == 0:
                logger.debug("epoch %d step %d loss %.5f", epoch, step, float(result.total.data))
        log = EpochLog(epoch, lr, {k: v / nb for k, v in sums.items()},
                       None if mu_s_sum is None else (mu_s_sum / nb).tolist(),
                       None if mu_m_sum is None else (mu_m_sum / nb).tolist(),
                       time.perf_counter() - t0)
        logs.append(log)
        logger.info("epoch %d lr %.2g losses %s mu_s %s mu_m %s", epoch, lr,
                    {k: round(v, 4) for k, v in log.losses.items()}, log.mu_s, log.mu_m)
        if out is not None:
            _write_epochs_csv(out, logs, net.side_tasks)
            if config.checkpoint_every_epoch or epoch in drop_epochs:
                save_checkpoint(net, out / "checkpoints" / f"epoch_{epoch:03d}",
                                {**extra, "epoch": epoch})
    if out is not None:
        save_checkpoint(net, out / "checkpoints" / "final", {**extra, "epoch": config.epochs})
    return net, logs


def validation_split(train_set: Dataset, spec: FactorSpec, num_val: int, seed: int):
    """Hold out ``num_val`` training identities: (fit set, val gallery, val probe)."""
    ids = train_set.identities()
    if not 1 <= num_val <= len(ids) - 2:
        raise ValueError(f"cannot hold out {num_val} of {len(ids)} training identities")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    val = set(int(i) for i in rng.choice(ids, size=num_val, replace=False))
    in_val = np.isin(train_set.y_d, list(val))
    fit = train_set.subset(~in_val)
    held = train_set.subset(in_val)
    is_gallery = ((held.y_p == spec.frontal_pose) & (held.y_l == 0) & (held.y_e == 0))
    return fit, held.subset(is_gallery), held.subset(~is_gallery)


def weight_search(candidates, train_set: Dataset, spec: FactorSpec, base: TrainConfig,
                  epochs: int | None = None, num_val: int | None = None,
                  runner=None) -> tuple[float, list[tuple[float, float]]]:
    """Brute-force search of the overall side-task weight on held-out identities.

    Trains one dynamic m-CNN per candidate for ``epochs`` (default half of
    ``base.epochs``) and returns the candidate with the best validation
    rank-1 (first one on ties) together with every ``(phi_s, score)``.
    """
    from .evaluation import rank1_identification

    candidates = [float(c) for c in candidates]
    if not candidates:
        raise ValueError("weight_search needs at least one candidate")
    if len(candidates) == 1:
        return candidates[0], [(candidates[0], float("nan"))]
    epochs = epochs or max(1, base.epochs // 2)
    num_val = num_val or max(1, round(0.2 * len(train_set.identities())))
    fit, gallery, probe = validation_split(train_set, spec, num_val, base.seed)
    scale = epochs / base.epochs
    drops = [[max(1, int(round(e * scale))), f] for e, f in base.lr_drops if e * scale < epochs]
    scores = []
    for phi in candidates:
        cfg = TrainConfig.from_dict({**base.to_dict(), "mode": "m", "alphas": None,
                                     "phi_s": phi, "epochs": epochs, "lr_drops": drops,
                                     "checkpoint_every_epoch": False})
        net, _ = (runner or train)(fit, cfg, spec)
        g = net.extract_templates(gallery.images)
        p = net.extract_templates(probe.images)
        res = rank1_identification(g, gallery.y_d, p, probe.y_d, routing="generic")
        scores.append((phi, res.rate))
        logger.info("phi_s %.3g: validation rank-1 %.4f", phi, res.rate)
    best = max(scores, key=lambda s: s[1])[0]
    return best, scores
