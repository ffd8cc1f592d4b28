"""Procedural multi-factor face-like images.

Each identity is a fixed random arrangement of Gaussian blobs on an
elliptical face with jittered eyes and mouth. Pose (yaw) rotates and shears
the sampling grid, expression locally stretches the mouth region,
illumination multiplies a planar brightness gradient, and pixel noise is
added last. Rendering is a pure function of the spec and the four factor
indices.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

LEFT, FRONTAL, RIGHT = 0, 1, 2
GROUP_NAMES = ("left", "frontal", "right")
PROFILE_YAW = 45.0

# column order of the label table
LABEL_COLUMNS = ("y_d", "y_p", "y_l", "y_e")

_BLOBS = 10
_BLOB_AMP = 0.15
_ID_JITTER = 0.5          # scale of per-identity face geometry deviations
_ROT_PER_YAW = 0.9        # in-plane rotation, radians per radian of yaw
_SHEAR = 1.8              # horizontal shear at 90 degrees yaw
_ILLUM_GAIN = 1.4
_EXPR_STRETCH = 0.8
_EXPR_RADIUS = 0.3       # extent of the expression deformation
_MOUTH_DEPTH = 0.5
_MOUTH = (0.0, 0.42)


@dataclass
class FactorSpec:
    num_identities: int = 40
    pose_bins: list = field(default_factory=lambda: [-60.0, -45.0, -30.0, -15.0, 0.0,
                                                     15.0, 30.0, 45.0, 60.0])
    illum_bins: int = 4
    expr_bins: int = 2
    image_size: int = 32
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.pose_bins = [float(p) for p in self.pose_bins]
        if self.num_identities < 2:
            raise ValueError("num_identities must be at least 2")
        if not self.pose_bins:
            raise ValueError("pose_bins must be non-empty")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if self.illum_bins < 1 or self.expr_bins < 1:
            raise ValueError("illum_bins and expr_bins must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @property
    def num_poses(self) -> int:
        return len(self.pose_bins)

    @property
    def frontal_pose(self) -> int:
        return int(np.argmin(np.abs(self.pose_bins)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FactorSpec":
        return cls(**d)


@dataclass
class SyntheticSample:
    image: np.ndarray
    y_d: int
    y_p: int
    y_l: int
    y_e: int


@dataclass
class Dataset:
    """A split: images (N, S, S) in [0, 1] and labels (N, 4) as ``LABEL_COLUMNS``."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def y_d(self) -> np.ndarray:
        return self.labels[:, 0]

    @property
    def y_p(self) -> np.ndarray:
        return self.labels[:, 1]

    @property
    def y_l(self) -> np.ndarray:
        return self.labels[:, 2]

    @property
    def y_e(self) -> np.ndarray:
        return self.labels[:, 3]

    def subset(self, mask) -> "Dataset":
        return Dataset(self.images[mask], self.labels[mask])

    def identities(self) -> list[int]:
        return sorted(int(i) for i in np.unique(self.y_d))


def pose_group_of(yaw: float) -> int:
    """Left profile for yaw >= 45, right profile for yaw <= -45, frontal otherwise."""
    if yaw >= PROFILE_YAW:
        return LEFT
    if yaw <= -PROFILE_YAW:
        return RIGHT
    return FRONTAL


def pose_groups(pose_bins) -> np.ndarray:
    """Group index for every pose label."""
    return np.array([pose_group_of(y) for y in pose_bins], dtype=np.int64)


# ---------------------------------------------------------------------------
# rendering


@dataclass
class _Prototype:
    axes: tuple
    base: float
    eyes: np.ndarray       # (2, 4): cx, cy, sigma, depth
    mouth: np.ndarray      # cx, cy, sx, sy, depth
    blobs: np.ndarray      # (K, 4): cx, cy, sigma, amplitude


def _prototype(spec: FactorSpec, identity: int) -> _Prototype:
    rng = np.random.default_rng([spec.seed, 1, identity])
    j = _ID_JITTER
    axes = (0.66 + j * 0.08 * (rng.random() - 0.5), 0.82 + j * 0.08 * (rng.random() - 0.5))
    base = 0.55 + j * 0.1 * (rng.random() - 0.5)
    spread = 0.30 + j * 0.08 * (rng.random() - 0.5)
    eye_y = -0.22 + j * 0.08 * (rng.random() - 0.5)
    eye_s = 0.09 + j * 0.04 * (rng.random() - 0.5)
    eye_d = 0.30 + j * 0.1 * (rng.random() - 0.5)
    eyes = np.array([[-spread, eye_y, eye_s, eye_d], [spread, eye_y, eye_s, eye_d]])
    mouth = np.array([0.0, _MOUTH[1] + j * 0.08 * (rng.random() - 0.5),
                      0.20 + j * 0.08 * (rng.random() - 0.5), 0.065 + j * 0.03 * (rng.random() - 0.5),
                      _MOUTH_DEPTH + j * 0.1 * (rng.random() - 0.5)])
    radius = 0.75 * np.sqrt(rng.random(_BLOBS))
    theta = rng.uniform(0, 2 * np.pi, _BLOBS)
    blobs = np.column_stack([radius * np.cos(theta) * axes[0], radius * np.sin(theta) * axes[1],
                             rng.uniform(0.08, 0.2, _BLOBS), rng.uniform(-_BLOB_AMP, _BLOB_AMP, _BLOBS)])
    return _Prototype(axes, base, eyes, mouth, blobs)


def _gauss(x, y, cx, cy, sx, sy):
    return np.exp(-0.5 * (((x - cx) / sx) ** 2 + ((y - cy) / sy) ** 2))


def _evaluate(proto: _Prototype, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    a, b = proto.axes
    r = np.sqrt((x / a) ** 2 + (y / b) ** 2)
    mask = 1.0 / (1.0 + np.exp(-(1.0 - r) / 0.05))
    face = np.full_like(x, proto.base)
    for cx, cy, s, amp in proto.blobs:
        face += amp * _gauss(x, y, cx, cy, s, s)
    for cx, cy, s, depth in proto.eyes:
        face -= depth * _gauss(x, y, cx, cy, s, s)
    cx, cy, sx, sy, depth = proto.mouth
    face -= depth * _gauss(x, y, cx, cy, sx, sy)
    return 0.12 + mask * (face - 0.12)


def _grid(size: int):
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    return np.meshgrid(c, c)  # u: columns (x), v: rows (y, downwards)


def _unpose(u, v, yaw_deg: float):
    """Map output-pixel coordinates back to prototype coordinates."""
    phi = np.deg2rad(yaw_deg)
    rho = _ROT_PER_YAW * phi
    cr, sr = np.cos(rho), np.sin(rho)
    x = cr * u + sr * v
    y = -sr * u + cr * v
    x = x - _SHEAR * np.sin(phi) * y
    return x, y


def _unexpress(x, y, expr: int, expr_bins: int):
    if expr == 0:
        return x, y
    angle = 0.0 if expr_bins <= 2 else np.pi * (expr - 1) / (expr_bins - 1)
    dx, dy = np.cos(angle), np.sin(angle)
    rx, ry = x - _MOUTH[0], y - _MOUTH[1]
    w = np.exp(-0.5 * (rx ** 2 + ry ** 2) / _EXPR_RADIUS ** 2)
    along = rx * dx + ry * dy
    shrink = _EXPR_STRETCH * w / (1.0 + _EXPR_STRETCH * w)
    return x - shrink * along * dx, y - shrink * along * dy


def _illumination(u, v, illum: int, illum_bins: int) -> np.ndarray | float:
    if illum == 0:
        return 1.0
    angle = 2 * np.pi * (illum - 1) / max(1, illum_bins - 1)
    return 1.0 + _ILLUM_GAIN * 0.5 * (u * np.cos(angle) + v * np.sin(angle))


def _check_index(name: str, value: int, count: int) -> None:
    if not 0 <= value < count:
        raise ValueError(f"{name} index {value} outside [0, {count})")


def render(identity: int, pose: int, illum: int, expr: int, spec: FactorSpec,
           noise_key: int | None = None) -> SyntheticSample:
    """Render one image. ``noise_key`` reseeds only the pixel noise."""
    _check_index("identity", identity, spec.num_identities)
    _check_index("pose", pose, spec.num_poses)
    _check_index("illumination", illum, spec.illum_bins)
    _check_index("expression", expr, spec.expr_bins)
    proto = _prototype(spec, identity)
    u, v = _grid(spec.image_size)
    x, y = _unpose(u, v, spec.pose_bins[pose])
    x, y = _unexpress(x, y, expr, spec.expr_bins)
    img = _evaluate(proto, x, y) * _illumination(u, v, illum, spec.illum_bins)
    if spec.noise_std > 0:
        key = [spec.seed, 2, identity, pose, illum, expr]
        if noise_key is not None:
            key.append(int(noise_key))
        img = img + np.random.default_rng(key).normal(0.0, spec.noise_std, img.shape)
    return SyntheticSample(np.clip(img, 0.0, 1.0), identity, pose, illum, expr)


def enumerate_factors(spec: FactorSpec, identities) -> list[tuple[int, int, int, int]]:
    return [(i, p, l, e) for i in identities for p in range(spec.num_poses)
            for l in range(spec.illum_bins) for e in range(spec.expr_bins)]


def render_set(spec: FactorSpec, factors) -> Dataset:
    size = spec.image_size
    images = np.empty((len(factors), size, size))
    for k, f in enumerate(factors):
        images[k] = render(*f, spec).image
    labels = np.array(factors, dtype=np.int64).reshape(-1, 4)
    return Dataset(images, labels)


def split_identities(num_identities: int, train_frac: float) -> tuple[list[int], list[int]]:
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train fraction must lie in (0, 1), got {train_frac}")
    n_train = int(round(train_frac * num_identities))
    if n_train < 2 or num_identities - n_train < 1:
        raise ValueError(f"cannot split {num_identities} identities with fraction {train_frac}: "
                         "need at least 2 training and 1 test identity")
    ids = list(range(num_identities))
    return ids[:n_train], ids[n_train:]


def gallery_probe_factors(spec: FactorSpec, identities):
    """One frontal / neutral-illumination / neutral-expression image per identity as gallery."""
    g_pose = spec.frontal_pose
    gallery, probe = [], []
    for f in enumerate_factors(spec, identities):
        (gallery if f[1:] == (g_pose, 0, 0) else probe).append(f)
    return gallery, probe


def generate_splits(spec: FactorSpec, train_frac_identities: float = 0.6):
    """Render (train, gallery, probe) with disjoint train and test identities."""
    train_ids, test_ids = split_identities(spec.num_identities, train_frac_identities)
    gallery, probe = gallery_probe_factors(spec, test_ids)
    return (render_set(spec, enumerate_factors(spec, train_ids)),
            render_set(spec, gallery), render_set(spec, probe))


# ---------------------------------------------------------------------------
# on-disk format

SPLITS = ("train", "gallery", "probe")


def write_split(directory: Path, name: str, ds: Dataset) -> dict:
    directory = Path(directory)
    ds.images.astype("<f8").tofile(directory / f"{name}.bin")
    with open(directory / f"{name}_labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("index",) + LABEL_COLUMNS)
        for k, row in enumerate(ds.labels):
            w.writerow([k] + [int(v) for v in row])
    return {"count": len(ds), "images": f"{name}.bin", "labels": f"{name}_labels.csv",
            "identities": ds.identities()}


def write_dataset(directory, spec: FactorSpec, splits: dict[str, Dataset],
                  train_frac: float) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "spec": spec.to_dict(),
        "train_frac_identities": train_frac,
        "pose_groups": [GROUP_NAMES[g] for g in pose_groups(spec.pose_bins)],
        "image_shape": [spec.image_size, spec.image_size],
        "dtype": "float64-le",
        "splits": {name: write_split(directory, name, ds) for name, ds in splits.items()},
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return directory


def read_manifest(directory) -> dict:
    with open(Path(directory) / "manifest.json") as fh:
        return json.load(fh)


def read_split(directory, name: str) -> Dataset:
    directory = Path(directory)
    info = read_manifest(directory)["splits"][name]
    size = read_manifest(directory)["image_shape"]
    images = np.fromfile(directory / info["images"], dtype="<f8").reshape([-1] + size)
    with open(directory / info["labels"], newline="") as fh:
        rows = list(csv.DictReader(fh))
    labels = np.array([[int(r[c]) for c in LABEL_COLUMNS] for r in rows], dtype=np.int64)
    if len(labels) != len(images) or len(images) != info["count"]:
        raise ValueError(f"split {name!r}: image/label counts disagree")
    return Dataset(images.astype(np.float64), labels.reshape(-1, 4))


def read_dataset(directory) -> tuple[FactorSpec, dict[str, Dataset]]:
    manifest = read_manifest(directory)
    spec = FactorSpec.from_dict(manifest["spec"])
    return spec, {name: read_split(directory, name) for name in manifest["splits"]}
