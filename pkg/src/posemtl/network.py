"""Single-task, multi-task and pose-directed multi-task networks.

All variants share one convolutional trunk producing a D-dimensional feature
``x`` per image. Heads are bias-free linear maps ``W^T x`` except for the
identity head, which keeps its bias. The dynamic-weight heads are softmax
layers over ``x`` whose outputs are averaged over the batch.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import GROUP_NAMES, Dataset
from .layers import (BatchNormLayer, ConvLayer, DropoutLayer, FcLayer, avg_pool2d,
                     cross_entropy, max_pool2d, softmax)

MODES = ("s", "m", "p")
SIDE_TASKS = ("pose", "illum", "expr")
NUM_GROUPS = 3
LABEL_INDEX = {"id": 0, "pose": 1, "illum": 2, "expr": 3}


@dataclass
class BlockSpec:
    channels: int
    convs: int = 2
    kernel: int = 3
    pool: str = "max"  # "max" | "avg" (2x2, stride 2) | "global_avg"


def _default_blocks():
    return [BlockSpec(16), BlockSpec(32), BlockSpec(64), BlockSpec(64, pool="global_avg")]


@dataclass
class TrunkConfig:
    blocks: list = field(default_factory=_default_blocks)
    image_size: int = 32
    in_channels: int = 1
    dropout: float = 0.4

    def __post_init__(self):
        self.blocks = [b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks]
        if not self.blocks:
            raise ValueError("trunk needs at least one block")
        if self.blocks[-1].pool != "global_avg":
            raise ValueError("the final block must end in global average pooling")
        size = self.image_size
        for b in self.blocks[:-1]:
            if b.pool not in ("max", "avg"):
                raise ValueError(f"unknown pool method {b.pool!r}")
            size //= 2
            if size < 1:
                raise ValueError("too many pooling blocks for the image size")

    @property
    def feature_dim(self) -> int:
        return self.blocks[-1].channels

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossResult:
    total: Tensor
    breakdown: dict          # task name -> batch-mean loss (float)
    mu_s: np.ndarray | None
    mu_m: np.ndarray | None
    phi_s: float
    phi_m: float
    alphas: dict | None


@dataclass
class FeatureTemplate:
    y_d: np.ndarray
    y_g: np.ndarray | None = None   # (3, D_d): left, frontal, right
    p: np.ndarray | None = None     # (3,)


@dataclass
class Templates:
    """Batched templates for a set of images."""

    y_d: np.ndarray
    y_g: np.ndarray | None = None   # (N, 3, D_d)
    p: np.ndarray | None = None     # (N, 3)
    pose_logits: np.ndarray | None = None
    side_logits: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y_d)

    def __getitem__(self, i: int) -> FeatureTemplate:
        return FeatureTemplate(self.y_d[i], None if self.y_g is None else self.y_g[i],
                               None if self.p is None else self.p[i])


def batch_split(x: Tensor, pose_labels, groups) -> list[Tensor]:
    """Route each row of ``x`` to its pose group; other groups get a zero row.

    Returns ``[X^left, X^frontal, X^right]``, each the shape of ``x``.
    """
    g = np.asarray(groups)[np.asarray(pose_labels, dtype=np.int64)]
    return [ag.mul(x, (g == k).astype(float)[:, None]) for k in range(NUM_GROUPS)]


def batch_mean(rows: Tensor) -> Tensor:
    """Mean over axis 0 taken about the first row: identical rows average to themselves exactly."""
    ref = rows[0:1]
    return ag.add(ag.reshape(ref, (-1,)), ag.mean(ag.add(rows, ag.neg(ref)), axis=0))


def standardize(images: np.ndarray) -> np.ndarray:
    return (images - 0.5) / 0.5


class MultiTaskNet:
    """Shared trunk plus task heads.

    ``mode`` selects the variant: ``"s"`` identity only, ``"m"`` identity plus
    ``side_tasks`` and a dynamic side-weight head, ``"p"`` additionally the
    three pose-group identity heads and the dynamic main-weight head. Passing
    ``alphas`` in mode ``"m"`` replaces the dynamic weights by fixed ones
    (``{"id": a_d, "pose": a_p, ...}``).
    """

    def __init__(self, mode: str, num_identities: int, side_classes: dict,
                 pose_groups, trunk: TrunkConfig | None = None, side_tasks=SIDE_TASKS,
                 phi_s: float = 0.1, alphas: dict | None = None, seed: int = 0,
                 mu_grad_to_trunk: bool = True):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.trunk = trunk or TrunkConfig()
        self.num_identities = int(num_identities)
        self.side_classes = {k: int(v) for k, v in side_classes.items()}
        self.side_tasks = tuple(side_tasks) if mode != "s" else ()
        if mode == "p":
            self.side_tasks = tuple(t for t in SIDE_TASKS if t in self.side_tasks or t == "pose")
        for t in self.side_tasks:
            if t not in SIDE_TASKS:
                raise ValueError(f"unknown side task {t!r}")
            if t not in self.side_classes:
                raise ValueError(f"side task {t!r} needs a class count")
        self.pose_groups = np.asarray(pose_groups, dtype=np.int64)
        self.phi_s = float(phi_s) if mode != "s" else 0.0
        self.phi_m = 1.0
        if alphas is not None and mode != "m":
            raise ValueError("fixed loss weights are only defined for mode 'm'")
        self.alphas = None if alphas is None else {k: float(v) for k, v in alphas.items()}
        self.seed = int(seed)
        self.mu_grad_to_trunk = mu_grad_to_trunk

        ss = np.random.SeedSequence([self.seed, 11])
        init_seq, drop_seq = ss.spawn(2)
        rng = np.random.default_rng(init_seq)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self.blocks = []
        cin = self.trunk.in_channels
        for bi, b in enumerate(self.trunk.blocks):
            layers = []
            for ci in range(b.convs):
                conv = ConvLayer.create(rng, cin, b.channels, b.kernel)
                bn = BatchNormLayer.create(b.channels)
                name = f"trunk.block{bi}.conv{ci}"
                self.params[f"{name}.weight"] = conv.weight
                self.params[f"{name}.bias"] = conv.bias
                self.params[f"{name}.bn.gamma"] = bn.gamma
                self.params[f"{name}.bn.beta"] = bn.beta
                self.buffers[f"{name}.bn.running_mean"] = bn.running_mean
                self.buffers[f"{name}.bn.running_var"] = bn.running_var
                layers.append((conv, bn))
                cin = b.channels
            self.blocks.append(layers)
        self.dropout = DropoutLayer(self.trunk.dropout,
                                    int(drop_seq.generate_state(1, dtype=np.uint32)[0]))

        self._plan = self.layer_plan()
        d = self.trunk.feature_dim
        self.heads: dict[str, FcLayer] = {}
        self._add_head("id", FcLayer.create(rng, d, self.num_identities, bias=True))
        for t in self.side_tasks:
            self._add_head(t, FcLayer.create(rng, d, self.side_classes[t], bias=False))
        if mode == "p":
            for g in GROUP_NAMES:
                self._add_head(f"group.{g}", FcLayer.create(rng, d, self.num_identities, bias=False))
        if self.dynamic_side:
            self._add_head("dyn.side", FcLayer.create(rng, d, len(self.side_tasks), zero=True))
        if mode == "p":
            self._add_head("dyn.main", FcLayer.create(rng, d, 2, zero=True))

    def _add_head(self, name: str, layer: FcLayer) -> None:
        self.heads[name] = layer
        self.params[f"head.{name}.weight"] = layer.weight
        if layer.bias is not None:
            self.params[f"head.{name}.bias"] = layer.bias

    @property
    def dynamic_side(self) -> bool:
        return self.mode in ("m", "p") and self.alphas is None and len(self.side_tasks) > 0

    @property
    def feature_dim(self) -> int:
        return self.trunk.feature_dim

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def head_weight(self, name: str) -> np.ndarray:
        return self.heads[name].weight.data

    def layer_plan(self) -> list[tuple[str, object]]:
        """Ordered (kind, layer) steps of the trunk; kinds are conv/bn/relu/pool names."""
        plan = []
        last = len(self.blocks) - 1
        for bi, (b, layers) in enumerate(zip(self.trunk.blocks, self.blocks)):
            for ci, (conv, bn) in enumerate(layers):
                plan += [("conv", conv), ("bn", bn)]
                if not (bi == last and ci == len(layers) - 1):
                    plan.append(("relu", None))
            plan.append((f"{b.pool}_pool", None))
        plan.append(("dropout", self.dropout))
        return plan

    # -- forward ------------------------------------------------------------

    def trunk_forward(self, images, training: bool) -> Tensor:
        """Shared features (N, D) for images (N, S, S) or (N, C, S, S) in [0, 1]."""
        imgs = np.asarray(images, dtype=np.float64)
        if imgs.ndim == 3:
            imgs = imgs[:, None]
        s = self.trunk.image_size
        if imgs.ndim != 4 or imgs.shape[1:] != (self.trunk.in_channels, s, s):
            raise ag.ShapeError(f"trunk expects images of shape (N, {self.trunk.in_channels}, {s}, {s}),"
                                f" got {imgs.shape}")
        h = Tensor(standardize(imgs))
        for kind, layer in self._plan:
            if kind == "conv":
                h = layer(h)
            elif kind == "bn":
                h = layer(h, training)
            elif kind == "relu":
                h = ag.relu(h)
            elif kind == "max_pool":
                h = max_pool2d(h, 2, 2)
            elif kind == "avg_pool":
                h = avg_pool2d(h, 2, 2)
            elif kind == "global_avg_pool":
                h = avg_pool2d(h, h.shape[2], h.shape[2]).reshape(h.shape[0], -1)
            elif kind == "dropout":
                h = layer(h, training)
        return h

    def _weight_input(self, x: Tensor) -> Tensor:
        return x if self.mu_grad_to_trunk else x.detach()

    def dynamic_side_weights(self, x: Tensor) -> Tensor:
        """Batch-averaged softmax over the side tasks: (mu_pose, mu_illum, mu_expr)."""
        if not self.dynamic_side:
            raise ValueError(f"mode {self.mode!r} has no dynamic side-task weights")
        return batch_mean(softmax(self.heads["dyn.side"](self._weight_input(x)), axis=1))

    def dynamic_main_weights(self, x: Tensor) -> Tensor:
        """Batch-averaged softmax (mu_generic, mu_group); pose-directed mode only."""
        if self.mode != "p":
            raise ValueError(f"mode {self.mode!r} has no dynamic main-task weights")
        return batch_mean(softmax(self.heads["dyn.main"](self._weight_input(x)), axis=1))

    def group_loss(self, x: Tensor, y_d, y_p) -> Tensor:
        """Pose-group identity loss over genuine group members, divided by the batch size."""
        y_d = np.asarray(y_d)
        member = self.pose_groups[np.asarray(y_p, dtype=np.int64)]
        parts = batch_split(x, y_p, self.pose_groups)
        total = None
        for k, (g, xg) in enumerate(zip(GROUP_NAMES, parts)):
            ce = cross_entropy(self.heads[f"group.{g}"](xg), y_d, reduction="none")
            term = ag.sum_(ag.mul(ce, (member == k).astype(float)))
            total = term if total is None else ag.add(total, term)
        return ag.mul(total, 1.0 / len(y_d))

    def check_labels(self, labels: np.ndarray) -> None:
        labels = np.asarray(labels)
        if labels.ndim != 2 or labels.shape[1] < 1:
            raise ValueError("labels must be an (N, 4) array (y_d, y_p, y_l, y_e)")
        need = [LABEL_INDEX[t] for t in self.side_tasks]
        if self.mode == "p":
            need.append(LABEL_INDEX["pose"])
        for col in need:
            if labels.shape[1] <= col or np.any(labels[:, col] < 0):
                raise ValueError(f"mode {self.mode!r} needs labels for column {col}")
        if np.any(labels[:, 0] >= self.num_identities) or np.any(labels[:, 0] < 0):
            raise ValueError("identity label outside the identity head")
        for t in self.side_tasks:
            col = labels[:, LABEL_INDEX[t]]
            if np.any(col >= self.side_classes[t]):
                raise ValueError(f"{t} label outside its head")

    def mtl_loss(self, images, labels, training: bool = True, x: Tensor | None = None) -> LossResult:
        """Combined loss of the configured variant.

        ``labels`` columns are (identity, pose, illumination, expression);
        identities must already be mapped to head indices. ``x`` may supply
        precomputed shared features instead of ``images``.
        """
        labels = np.asarray(labels, dtype=np.int64)
        self.check_labels(labels)
        if x is None:
            x = self.trunk_forward(images, training)
        y_d = labels[:, 0]
        l_id = cross_entropy(self.heads["id"](x), y_d)
        breakdown = {"id": l_id}
        for t in self.side_tasks:
            breakdown[t] = cross_entropy(self.heads[t](x), labels[:, LABEL_INDEX[t]])
        mu_s = mu_m = None

        if self.mode == "s":
            total = l_id
        elif self.alphas is not None:
            total = ag.mul(l_id, self.alphas.get("id", 1.0))
            for t in self.side_tasks:
                total = ag.add(total, ag.mul(breakdown[t], self.alphas.get(t, 0.0)))
        else:
            side = None
            if self.side_tasks:
                mu_s = self.dynamic_side_weights(x)
                for k, t in enumerate(self.side_tasks):
                    term = ag.mul(mu_s[k], breakdown[t])
                    side = term if side is None else ag.add(side, term)
                side = ag.mul(side, self.phi_s)
            if self.mode == "m":
                total = l_id if side is None else ag.add(l_id, side)
            else:
                l_g = self.group_loss(x, y_d, labels[:, 1])
                breakdown["group"] = l_g
                mu_m = self.dynamic_main_weights(x)
                main = ag.mul(ag.add(ag.mul(mu_m[0], l_id), ag.mul(mu_m[1], l_g)), self.phi_m)
                total = main if side is None else ag.add(main, side)
        return LossResult(
            total=total,
            breakdown={k: float(v.data) for k, v in breakdown.items()},
            mu_s=None if mu_s is None else mu_s.data.copy(),
            mu_m=None if mu_m is None else mu_m.data.copy(),
            phi_s=self.phi_s, phi_m=self.phi_m, alphas=self.alphas)

    # -- inference ----------------------------------------------------------

    def features(self, images, batch_size: int = 256) -> np.ndarray:
        """Shared features in evaluation mode."""
        images = np.asarray(images)
        out = [self.trunk_forward(images[i:i + batch_size], training=False).data
               for i in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.feature_dim))

    def templates_from_features(self, x: np.ndarray) -> Templates:
        xt = Tensor(x)
        y_d = self.heads["id"](xt).data
        side_logits = {t: self.heads[t](xt).data for t in self.side_tasks}
        p = y_g = None
        pose_logits = side_logits.get("pose")
        if pose_logits is not None:
            probs = softmax(Tensor(pose_logits), axis=1).data
            p = np.stack([probs[:, self.pose_groups == k].sum(axis=1)
                          for k in range(NUM_GROUPS)], axis=1)
        if self.mode == "p":
            y_g = np.stack([self.heads[f"group.{g}"](xt).data for g in GROUP_NAMES], axis=1)
        return Templates(y_d, y_g, p, pose_logits, side_logits)

    def extract_templates(self, images, batch_size: int = 256) -> Templates:
        return self.templates_from_features(self.features(images, batch_size))

    def extract_template(self, image) -> FeatureTemplate:
        image = np.asarray(image)
        return self.extract_templates(image[None])[0]

    # -- persistence --------------------------------------------------------

    def config(self) -> dict:
        return {
            "mode": self.mode,
            "trunk": self.trunk.to_dict(),
            "num_identities": self.num_identities,
            "side_classes": self.side_classes,
            "side_tasks": list(self.side_tasks),
            "pose_groups": self.pose_groups.tolist(),
            "phi_s": self.phi_s,
            "phi_m": self.phi_m,
            "alphas": self.alphas,
            "seed": self.seed,
            "mu_grad_to_trunk": self.mu_grad_to_trunk,
        }

    def state(self) -> OrderedDict:
        out = OrderedDict((k, v.data) for k, v in self.params.items())
        out.update(self.buffers)
        return out

    def load_state(self, state: dict) -> None:
        for k, v in self.params.items():
            v.data[...] = state[k]
        for k, v in self.buffers.items():
            v[...] = state[k]

    @classmethod
    def from_config(cls, cfg: dict) -> "MultiTaskNet":
        return cls(mode=cfg["mode"], num_identities=cfg["num_identities"],
                   side_classes=cfg["side_classes"], pose_groups=cfg["pose_groups"],
                   trunk=TrunkConfig(**cfg["trunk"]), side_tasks=cfg["side_tasks"] or SIDE_TASKS,
                   phi_s=cfg["phi_s"], alphas=cfg["alphas"], seed=cfg["seed"],
                   mu_grad_to_trunk=cfg.get("mu_grad_to_trunk", True))


def recombine_loss(breakdown: dict, mu_s, mu_m, phi_s: float, phi_m: float,
                   side_tasks, alphas: dict | None = None) -> float:
    """Total loss recomputed from a reported breakdown and weights."""
    if alphas is not None:
        return alphas.get("id", 1.0) * breakdown["id"] + sum(
            alphas.get(t, 0.0) * breakdown[t] for t in side_tasks)
    side = 0.0
    if mu_s is not None:
        side = phi_s * sum(m * breakdown[t] for m, t in zip(mu_s, side_tasks))
    if mu_m is None:
        return breakdown["id"] + side
    return phi_m * (mu_m[0] * breakdown["id"] + mu_m[1] * breakdown["group"]) + side


def build_net(mode: str, train: Dataset, num_poses: int, illum_bins: int, expr_bins: int,
              pose_groups, **kwargs) -> MultiTaskNet:
    side_classes = {"pose": num_poses, "illum": illum_bins, "expr": expr_bins}
    return MultiTaskNet(mode, len(train.identities()), side_classes, pose_groups, **kwargs)


# ---------------------------------------------------------------------------
# checkpoints: model.json + weights.bin (little-endian float64)


def save_checkpoint(net: MultiTaskNet, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = net.state()
    tensors = [{"name": k, "shape": list(v.shape),
                "kind": "buffer" if k in net.buffers else "param"} for k, v in state.items()]
    manifest = {"model": net.config(), "tensors": tensors, "dtype": "float64-le"}
    manifest.update(extra or {})
    flat = np.concatenate([np.ravel(v) for v in state.values()]).astype("<f8")
    flat.tofile(directory / "weights.bin")
    with open(directory / "model.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return directory


def read_checkpoint_state(directory) -> tuple[dict, OrderedDict]:
    directory = Path(directory)
    with open(directory / "model.json") as fh:
        manifest = json.load(fh)
    flat = np.fromfile(directory / "weights.bin", dtype="<f8")
    declared = sum(int(np.prod(t["shape"])) for t in manifest["tensors"])
    if declared != flat.size:
        raise ValueError(f"{directory}: weights.bin holds {flat.size} values, manifest declares {declared}")
    state = OrderedDict()
    offset = 0
    for t in manifest["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        state[t["name"]] = flat[offset:offset + n].reshape(t["shape"]).astype(np.float64)
        offset += n
    return manifest, state


def load_checkpoint(directory) -> tuple[MultiTaskNet, dict]:
    manifest, state = read_checkpoint_state(directory)
    net = MultiTaskNet.from_config(manifest["model"])
    net.load_state(state)
    return net, manifest
