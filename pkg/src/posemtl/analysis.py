"""Energy-based inspection of head weight matrices."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from math import comb

import numpy as np

from .data import Dataset
from .evaluation import cosine_distance_matrix, rank1_from_distances
from .network import MultiTaskNet, load_checkpoint, read_checkpoint_state

ENERGY_TASKS = ("id", "pose", "illum", "expr")
TOP_FRACTION = 0.2


@dataclass
class EnergyVector:
    values: np.ndarray
    task: str
    shape: tuple

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def std(self) -> float:
        return float(self.values.std())

    def sorted(self) -> np.ndarray:
        return np.sort(self.values)[::-1]

    def top(self, k: int) -> np.ndarray:
        """Indices of the ``k`` largest entries (stable: lower index first on ties)."""
        order = np.argsort(-self.values, kind="stable")
        return np.sort(order[:k])


def energy_vector(w, task: str = "") -> EnergyVector:
    """Row-wise sum of absolute weights; one entry per input feature dimension."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise ValueError(f"energy_vector needs a non-empty matrix, got shape {w.shape}")
    return EnergyVector(np.abs(w).sum(axis=1), task, w.shape)


def top_k_count(dim: int, fraction: float = TOP_FRACTION) -> int:
    return max(1, int(round(fraction * dim)))


def jaccard(a, b) -> float:
    a, b = set(np.asarray(a).tolist()), set(np.asarray(b).tolist())
    union = a | b
    return len(a & b) / len(union) if union else 1.0


def random_jaccard_expectation(dim: int, k: int) -> float:
    """E[|A&B| / |A|B|] for two independent uniform k-subsets of ``dim`` items."""
    total = 0.0
    for i in range(max(0, 2 * k - dim), k + 1):
        p = comb(k, i) * comb(dim - k, k - i) / comb(dim, k)
        total += p * i / (2 * k - i)
    return total


@dataclass
class EnergyReport:
    vectors: dict                       # task -> EnergyVector, plus "all"
    k: int
    top_sets: dict = field(default_factory=dict)
    overlap: np.ndarray | None = None   # |top_i & top_j|
    jaccard: np.ndarray | None = None
    wall_order: np.ndarray | None = None
    wall: np.ndarray | None = None      # |W^all| rows permuted by descending s^all
    mode: str = ""

    @property
    def tasks(self) -> list[str]:
        return [t for t in self.vectors if t != "all"]

    def summary(self) -> dict:
        tasks = self.tasks
        return {
            "mode": self.mode,
            "dim": int(self.vectors["id"].values.size),
            "k": self.k,
            "tasks": tasks,
            "mean": {t: v.mean for t, v in self.vectors.items()},
            "std": {t: v.std for t, v in self.vectors.items()},
            "top_sets": {t: s.tolist() for t, s in self.top_sets.items()},
            "overlap": self.overlap.tolist(),
            "jaccard": self.jaccard.tolist(),
            "random_jaccard": random_jaccard_expectation(self.vectors["id"].values.size, self.k),
            "wall_order": self.wall_order.tolist(),
        }


def head_matrices(source) -> tuple[str, dict]:
    """(mode, {task: weight matrix}) from a net, a checkpoint directory, or a state dict."""
    if isinstance(source, MultiTaskNet):
        mode = source.mode
        mats = {t: source.head_weight(t) for t in ENERGY_TASKS if t in source.heads}
    else:
        manifest, state = read_checkpoint_state(source)
        mode = manifest["model"]["mode"]
        mats = {t: state[f"head.{t}.weight"] for t in ENERGY_TASKS if f"head.{t}.weight" in state}
    return mode, mats


def energy_report(source, fraction: float = TOP_FRACTION) -> EnergyReport:
    mode, mats = head_matrices(source)
    if mode == "s":
        warnings.warn("single-task checkpoint: energy report covers the identity head only",
                      stacklevel=2)
    vectors = {t: energy_vector(w, t) for t, w in mats.items()}
    w_all = np.concatenate([mats[t] for t in vectors], axis=1)
    vectors["all"] = energy_vector(w_all, "all")
    dim = w_all.shape[0]
    k = top_k_count(dim, fraction)
    tasks = [t for t in vectors if t != "all"]
    top_sets = {t: vectors[t].top(k) for t in tasks}
    n = len(tasks)
    overlap = np.zeros((n, n), dtype=np.int64)
    jac = np.zeros((n, n))
    for i, a in enumerate(tasks):
        for j, b in enumerate(tasks):
            overlap[i, j] = np.intersect1d(top_sets[a], top_sets[b]).size
            jac[i, j] = overlap[i, j] / (2 * k - overlap[i, j])
    order = np.argsort(-vectors["all"].values, kind="stable")
    return EnergyReport(vectors, k, top_sets, overlap, jac, order, np.abs(w_all)[order], mode)


def default_sweep_grid(dim: int, points: int = 10) -> list[int]:
    return sorted({int(round(v)) for v in np.linspace(dim / points, dim, points)})


def truncated_id_features(net: MultiTaskNet, x: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Identity-head outputs with weight rows outside ``keep`` zeroed."""
    w = net.head_weight("id").copy()
    mask = np.zeros(w.shape[0], dtype=bool)
    mask[keep] = True
    w[~mask] = 0.0
    b = net.heads["id"].bias
    return x @ w + (b.data if b is not None else 0.0)


def feature_dim_sweep(net: MultiTaskNet, gallery: Dataset, probe: Dataset, n_values=None,
                      gallery_labels=None, probe_labels=None):
    """Rank-1 using the ``n`` highest-energy identity dimensions.

    Returns rows ``(n, rate_raw, rate_truncated)``: the first uses shared
    features restricted to the selected dimensions, the second the identity
    head outputs computed with the other weight rows zeroed.
    """
    dim = net.feature_dim
    if n_values is None:
        n_values = default_sweep_grid(dim)
    for n in n_values:
        if n < 1 or n > dim:
            raise ValueError(f"sweep size {n} outside [1, {dim}]")
    gl = gallery.y_d if gallery_labels is None else gallery_labels
    pl = probe.y_d if probe_labels is None else probe_labels
    xg, xp = net.features(gallery.images), net.features(probe.images)
    s_d = energy_vector(net.head_weight("id"), "id")
    rows = []
    for n in n_values:
        keep = s_d.top(n)
        raw = rank1_from_distances(cosine_distance_matrix(xp[:, keep], xg[:, keep]), gl, pl).rate
        yg = truncated_id_features(net, xg, keep)
        yp = truncated_id_features(net, xp, keep)
        trunc = rank1_from_distances(cosine_distance_matrix(yp, yg), gl, pl).rate
        rows.append((int(n), raw, trunc))
    return rows


def energy_trajectory(checkpoints) -> list[dict]:
    """Per-checkpoint mean and std of every head's energy vector."""
    checkpoints = list(checkpoints)
    if len(checkpoints) < 2:
        raise ValueError("energy trajectory needs at least two checkpoints")
    rows, ref = [], None
    for i, ck in enumerate(checkpoints):
        manifest, _ = read_checkpoint_state(ck)
        arch = (manifest["model"]["mode"], manifest["model"]["trunk"],
                [(t["name"], t["shape"]) for t in manifest["tensors"]])
        if ref is None:
            ref = arch
        elif arch != ref:
            raise ValueError(f"checkpoint {ck} does not match the architecture of {checkpoints[0]}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            report = energy_report(ck)
        row = {"index": i, "epoch": manifest.get("epoch", i), "checkpoint": str(ck)}
        for t, v in report.vectors.items():
            row[f"{t}_mean"] = v.mean
            row[f"{t}_std"] = v.std
        rows.append(row)
    return rows


def load_net(source) -> MultiTaskNet:
    return source if isinstance(source, MultiTaskNet) else load_checkpoint(source)[0]
