"""Template matching and recognition metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import GROUP_NAMES
from .network import FeatureTemplate, MultiTaskNet, Templates

ROUTINGS = ("generic", "hard", "stochastic")
PROB_TOL = 1e-10


def cosine_distance(a, b) -> float:
    """``1 - cos(a, b)``, in [0, 2]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"cosine_distance: shapes {a.shape} and {b.shape} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine_distance: zero vector")
    return float(1.0 - np.dot(a, b) / (na * nb))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cosine distance of a zero vector")
    return x / norms


def cosine_distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 1.0 - _unit_rows(np.asarray(a, float)) @ _unit_rows(np.asarray(b, float)).T


def _check_probs(p) -> None:
    p = np.asarray(p)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > PROB_TOL):
        raise ValueError("group probabilities must be non-negative and sum to 1")


@dataclass
class MatchResult:
    distance: float
    generic: float
    routed: float


def stochastic_routing_distance(t1: FeatureTemplate, t2: FeatureTemplate) -> MatchResult:
    """Generic distance averaged with the probability-weighted pose-specific distances."""
    _check_probs(t1.p)
    _check_probs(t2.p)
    generic = cosine_distance(t1.y_d, t2.y_d)
    routed = 0.0
    for i in range(len(t1.p)):
        for j in range(len(t2.p)):
            routed += cosine_distance(t1.y_g[i], t2.y_g[j]) * t1.p[i] * t2.p[j]
    return MatchResult(0.5 * generic + 0.5 * routed, generic, routed)


def hard_routing_distance(t1: FeatureTemplate, t2: FeatureTemplate) -> MatchResult:
    """Like stochastic routing but using only each template's most probable group."""
    generic = cosine_distance(t1.y_d, t2.y_d)
    routed = cosine_distance(t1.y_g[int(np.argmax(t1.p))], t2.y_g[int(np.argmax(t2.p))])
    return MatchResult(0.5 * generic + 0.5 * routed, generic, routed)


def pair_distance(t1: FeatureTemplate, t2: FeatureTemplate, routing: str = "generic") -> MatchResult:
    if routing == "generic":
        d = cosine_distance(t1.y_d, t2.y_d)
        return MatchResult(d, d, 0.0)
    if routing == "stochastic":
        return stochastic_routing_distance(t1, t2)
    if routing == "hard":
        return hard_routing_distance(t1, t2)
    raise ValueError(f"unknown routing {routing!r}")


def one_hot_probs(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    out[np.arange(len(p)), np.argmax(p, axis=1)] = 1.0
    return out


def distance_components(a: Templates, b: Templates, routing: str = "generic"):
    """(distance, generic, routed) matrices of shape (len(a), len(b)).

    Vectorised counterpart of ``pair_distance``; ``routed`` is all zeros for
    generic matching.
    """
    if routing not in ROUTINGS:
        raise ValueError(f"unknown routing {routing!r}")
    generic = cosine_distance_matrix(a.y_d, b.y_d)
    if routing == "generic":
        return generic, generic, np.zeros_like(generic)
    if a.y_g is None or b.y_g is None or a.p is None or b.p is None:
        raise ValueError(f"{routing!r} routing needs pose-specific features and group probabilities")
    pa, pb = a.p, b.p
    if routing == "hard":
        pa, pb = one_hot_probs(pa), one_hot_probs(pb)
    else:
        _check_probs(pa)
        _check_probs(pb)
    ua, ub = _unit_rows(a.y_g), _unit_rows(b.y_g)
    routed = np.zeros_like(generic)
    for i in range(ua.shape[1]):
        for j in range(ub.shape[1]):
            w = pa[:, i, None] * pb[None, :, j]
            if np.any(w):
                routed += (1.0 - ua[:, i] @ ub[:, j].T) * w
    return 0.5 * generic + 0.5 * routed, generic, routed


def distance_matrix(a: Templates, b: Templates, routing: str = "generic") -> np.ndarray:
    return distance_components(a, b, routing)[0]


@dataclass
class IdentificationResult:
    rate: float
    per_group: dict = field(default_factory=dict)
    predictions: np.ndarray | None = None   # gallery index chosen per probe
    correct: np.ndarray | None = None


def rank1_from_distances(dist: np.ndarray, gallery_labels, probe_labels,
                         probe_groups=None) -> IdentificationResult:
    gallery_labels = np.asarray(gallery_labels)
    probe_labels = np.asarray(probe_labels)
    if dist.shape[1] == 0:
        raise ValueError("empty gallery")
    if len(np.unique(gallery_labels)) != len(gallery_labels):
        raise ValueError("gallery labels must be unique")
    best = np.argmin(dist, axis=1)  # first minimum: lowest gallery index wins ties
    correct = gallery_labels[best] == probe_labels
    per_group = {}
    if probe_groups is not None:
        probe_groups = np.asarray(probe_groups)
        for k, name in enumerate(GROUP_NAMES):
            sel = probe_groups == k
            per_group[name] = float(correct[sel].mean()) if sel.any() else float("nan")
        prof = probe_groups != GROUP_NAMES.index("frontal")
        per_group["profile"] = float(correct[prof].mean()) if prof.any() else float("nan")
    return IdentificationResult(float(correct.mean()) if len(correct) else float("nan"),
                                per_group, best, correct)


def rank1_identification(gallery: Templates, gallery_labels, probe: Templates, probe_labels,
                         routing: str = "generic", probe_groups=None) -> IdentificationResult:
    """Nearest-gallery identification rate, optionally broken down by probe pose group."""
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    dist = distance_matrix(probe, gallery, routing)
    return rank1_from_distances(dist, gallery_labels, probe_labels, probe_groups)


@dataclass
class VerificationResult:
    accuracy: float
    threshold: float
    eer: float
    auc: float


def _operating_points(distances: np.ndarray, same: np.ndarray):
    """FAR/TPR when accepting ``d <= t`` for t below all distances and at each distinct one."""
    order = np.argsort(distances, kind="mergesort")
    d = distances[order]
    s = same[order]
    n_same, n_diff = s.sum(), (~s).sum()
    last = np.r_[d[1:] != d[:-1], True]
    tp = np.cumsum(s)[last]
    fp = np.cumsum(~s)[last]
    tpr = np.r_[0.0, tp / n_same]
    far = np.r_[0.0, fp / n_diff]
    return d[last], far, tpr


def verification_metrics(distances, same) -> VerificationResult:
    """Best-threshold accuracy, equal error rate and ROC area for pair distances.

    A pair is accepted as "same" when its distance is at most the threshold.
    """
    distances = np.asarray(distances, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if distances.shape != same.shape or distances.ndim != 1:
        raise ValueError("distances and labels must be equal-length vectors")
    if same.all() or not same.any():
        raise ValueError("verification needs at least one pair of each class")
    uniq, far, tpr = _operating_points(distances, same)
    frr = 1.0 - tpr

    # candidate thresholds: below everything, every midpoint, above everything
    cands = np.r_[uniq[0] - 1.0, 0.5 * (uniq[1:] + uniq[:-1]), uniq[-1] + 1.0]
    n_same, n_diff = same.sum(), (~same).sum()
    acc = (tpr * n_same + (1.0 - far) * n_diff) / len(same)
    k = int(np.argmax(acc))
    accuracy, threshold = float(acc[k]), float(cands[k])

    diff = far - frr
    j = int(np.argmax(diff >= 0))  # first point where false accepts catch up with false rejects
    if j == 0:
        eer = float(far[0])
    else:
        lam = -diff[j - 1] / (diff[j] - diff[j - 1])
        eer = float(far[j - 1] + lam * (far[j] - far[j - 1]))

    trap = getattr(np, "trapezoid", None) or np.trapz
    auc = float(trap(tpr, far))
    return VerificationResult(accuracy, threshold, eer, auc)


def pairs_from_distance_matrix(dist: np.ndarray, probe_labels, gallery_labels):
    """Flatten a probe-by-gallery matrix into (distances, same-identity flags)."""
    same = np.asarray(probe_labels)[:, None] == np.asarray(gallery_labels)[None, :]
    return dist.ravel(), same.ravel()


def mirror(images: np.ndarray) -> np.ndarray:
    return np.asarray(images)[..., ::-1].copy()


def mirrored_distance(image1, image2, net: MultiTaskNet, routing: str = "generic") -> float:
    """Mean distance over the four pairings of two images and their horizontal flips."""
    imgs = np.stack([image1, mirror(image1), image2, mirror(image2)])
    t = net.extract_templates(imgs)
    return float(np.mean([pair_distance(t[a], t[b], routing).distance
                          for a in (0, 1) for b in (2, 3)]))


def mirrored_distance_matrix(net: MultiTaskNet, images_a, images_b, routing: str) -> np.ndarray:
    ta, tam = net.extract_templates(images_a), net.extract_templates(mirror(images_a))
    tb, tbm = net.extract_templates(images_b), net.extract_templates(mirror(images_b))
    return np.mean([distance_matrix(x, y, routing) for x in (ta, tam) for y in (tb, tbm)], axis=0)


def side_task_accuracy(logits: np.ndarray, labels) -> float:
    """Mean over classes of the per-class accuracy."""
    labels = np.asarray(labels)
    pred = np.argmax(logits, axis=1)
    accs = [float((pred[labels == c] == c).mean()) for c in np.unique(labels)]
    return float(np.mean(accs))
