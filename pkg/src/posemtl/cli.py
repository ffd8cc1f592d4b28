"""Command-line entry point: ``posemtl <subcommand> ...``."""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import analysis
from .data import FactorSpec, GROUP_NAMES, generate_splits, pose_groups, read_dataset, write_dataset
from .evaluation import (distance_components, mirror, pairs_from_distance_matrix,
                         rank1_from_distances, side_task_accuracy, verification_metrics)
from .network import SIDE_TASKS, load_checkpoint
from .trainer import TrainConfig, format_float, train, weight_search, write_csv

logger = logging.getLogger("posemtl")

CONFIG_NAME = "config.json"
MODEL_VARIANTS = ("s", "m-fixed", "m", "p")


class CliError(Exception):
    pass


def default_config() -> dict:
    return {
        "spec": FactorSpec().to_dict(),
        "train_frac_identities": 0.6,
        "train": TrainConfig().to_dict(),
        "eval": {"routing": None, "mirror": False},
        "seeds": [0],
        "models": list(MODEL_VARIANTS),
        "search": None,
    }


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CliError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise CliError(f"config {path} must hold a JSON object")
    return cfg


def _set(cfg: dict, dotted: str, value) -> None:
    *path, last = dotted.split(".")
    node = cfg
    for p in path:
        node = node.setdefault(p, {})
    node[last] = value


def resolve(args, flag_map: dict) -> dict:
    """Defaults, then ``--config``, then any explicitly given flags."""
    cfg = default_config()
    if args.config:
        cfg = merge(cfg, load_config_file(args.config))
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            _set(cfg, key, value)
    if args.seed is not None:
        _set(cfg, "spec.seed" if args.command == "generate-data" else "train.seed", args.seed)
        if args.command == "compare" and getattr(args, "seeds", None) is None:
            cfg["seeds"] = [args.seed]
    if args.out is not None:
        cfg["out"] = args.out
    return cfg


def write_config(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / CONFIG_NAME, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out(cfg: dict) -> Path:
    if not cfg.get("out"):
        raise CliError("an output directory is required (--out)")
    return Path(cfg["out"])


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# generate-data


def cmd_generate(cfg: dict) -> Path:
    out = _out(cfg)
    try:
        spec = FactorSpec.from_dict(cfg["spec"])
        splits = generate_splits(spec, cfg["train_frac_identities"])
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid factor spec: {e}") from e
    try:
        write_dataset(out, spec, dict(zip(("train", "gallery", "probe"), splits)),
                      cfg["train_frac_identities"])
        write_config(out, cfg)
    except OSError as e:
        raise CliError(f"cannot write dataset to {out}: {e}") from e
    logger.info("wrote %s", out)
    return out


# ---------------------------------------------------------------------------
# train


def _load_data(directory):
    if directory is None:
        raise CliError("a data directory is required (--data)")
    try:
        return read_dataset(directory)
    except (OSError, KeyError, ValueError) as e:
        raise CliError(f"cannot read dataset {directory}: {e}") from e


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid training config: {e}") from e


def cmd_train(cfg: dict) -> Path:
    out = _out(cfg)
    spec, splits = _load_data(cfg.get("data"))
    tc = train_config(cfg)
    cfg = copy.deepcopy(cfg)
    if cfg.get("search"):
        best, scores = weight_search(cfg["search"], splits["train"], spec, tc)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "weight_search.csv", [{"phi_s": float(p), "val_rank1": float(s)}
                                              for p, s in scores])
        tc = TrainConfig.from_dict({**tc.to_dict(), "phi_s": best})
        cfg["train"]["phi_s"] = best
        logger.info("selected phi_s = %g", best)
    write_config(out, cfg)
    train(splits["train"], tc, spec, out_dir=out)
    return out


# ---------------------------------------------------------------------------
# eval


def default_routing(mode: str) -> str:
    return "stochastic" if mode == "p" else "generic"


def probe_gallery_distances(net, gallery, probe, routing: str, use_mirror: bool):
    """(distance, generic, routed) probe-by-gallery matrices, mirror-averaged on request."""
    pt = net.extract_templates(probe.images)
    gt = net.extract_templates(gallery.images)
    if not use_mirror:
        return distance_components(pt, gt, routing), pt
    pm = net.extract_templates(mirror(probe.images))
    gm = net.extract_templates(mirror(gallery.images))
    parts = [distance_components(a, b, routing) for a in (pt, pm) for b in (gt, gm)]
    return tuple(np.mean([p[i] for p in parts], axis=0) for i in range(3)), pt


def evaluate(net, spec: FactorSpec, gallery, probe, routing: str, use_mirror: bool = False):
    """Metrics dict plus the per-pair distance rows."""
    (dist, generic, routed), pt = probe_gallery_distances(net, gallery, probe, routing, use_mirror)
    groups = pose_groups(spec.pose_bins)[probe.y_p]
    ident = rank1_from_distances(dist, gallery.y_d, probe.y_d, groups)
    d, same = pairs_from_distance_matrix(dist, probe.y_d, gallery.y_d)
    ver = verification_metrics(d, same)
    side = {}
    for task, col in zip(SIDE_TASKS, (probe.y_p, probe.y_l, probe.y_e)):
        if task in pt.side_logits:
            side[task] = side_task_accuracy(pt.side_logits[task], col)
    metrics = {
        "mode": net.mode,
        "routing": routing,
        "mirror": bool(use_mirror),
        "rank1": ident.rate,
        "rank1_groups": ident.per_group,
        "eer": ver.eer,
        "auc": ver.auc,
        "verification_accuracy": ver.accuracy,
        "threshold": ver.threshold,
        "side_accuracy": side,
        "num_gallery": len(gallery),
        "num_probe": len(probe),
    }
    rows = []
    for i in range(len(probe)):
        for j in range(len(gallery)):
            rows.append({"probe_index": i, "gallery_index": j,
                         "probe_label": int(probe.y_d[i]), "gallery_label": int(gallery.y_d[j]),
                         "probe_group": GROUP_NAMES[groups[i]],
                         "same": int(probe.y_d[i] == gallery.y_d[j]),
                         "distance": float(dist[i, j]), "generic": float(generic[i, j]),
                         "routed": float(routed[i, j])})
    return metrics, rows


def _load_net(path):
    if path is None:
        raise CliError("a checkpoint directory is required (--checkpoint)")
    try:
        return load_checkpoint(path)
    except (OSError, KeyError, ValueError) as e:
        raise CliError(f"cannot load checkpoint {path}: {e}") from e


def cmd_eval(cfg: dict) -> Path:
    out = _out(cfg)
    net, _ = _load_net(cfg.get("checkpoint"))
    spec, splits = _load_data(cfg.get("data"))
    routing = cfg["eval"].get("routing") or default_routing(net.mode)
    try:
        metrics, rows = evaluate(net, spec, splits["gallery"], splits["probe"], routing,
                                 cfg["eval"].get("mirror", False))
    except ValueError as e:
        raise CliError(str(e)) from e
    write_config(out, cfg)
    _write_json(out / "metrics.json", _round_trip(metrics))
    write_csv(out / "distances.csv", rows)
    logger.info("rank-1 %.4f  EER %.4f  AUC %.4f", metrics["rank1"], metrics["eer"], metrics["auc"])
    return out


def _round_trip(obj):
    """Floats as 17-significant-digit values (JSON already round-trips; NaN becomes null)."""
    if isinstance(obj, dict):
        return {k: _round_trip(v) for k, v in obj.items()}
    if isinstance(obj, float):
        return None if obj != obj else float(format_float(obj))
    return obj


# ---------------------------------------------------------------------------
# match


def read_image(path, size: int) -> np.ndarray:
    path = Path(path)
    try:
        if path.suffix == ".npy":
            img = np.load(path).astype(np.float64)
        else:
            from PIL import Image

            with Image.open(path) as im:
                im = im.convert("L")
                if im.size != (size, size):
                    im = im.resize((size, size), Image.BILINEAR)
                img = np.asarray(im, dtype=np.float64) / 255.0
    except Exception as e:  # Pillow raises several unrelated types
        raise CliError(f"cannot read image {path}: {e}") from e
    if img.shape != (size, size):
        raise CliError(f"image {path} has shape {img.shape}, expected {(size, size)}")
    return img


def cmd_match(cfg: dict) -> dict:
    net, _ = _load_net(cfg.get("checkpoint"))
    size = net.trunk.image_size
    images = [read_image(p, size) for p in cfg["images"]]
    routing = cfg["eval"].get("routing") or default_routing(net.mode)
    use_mirror = cfg["eval"].get("mirror", False)
    g = SimpleNamespace(images=images[1][None])
    p = SimpleNamespace(images=images[0][None])
    try:
        (dist, generic, routed), _ = probe_gallery_distances(net, g, p, routing, use_mirror)
    except ValueError as e:
        raise CliError(str(e)) from e
    t1, t2 = net.extract_template(images[0]), net.extract_template(images[1])
    result = {"distance": float(dist[0, 0]), "generic": float(generic[0, 0]),
              "routed": float(routed[0, 0]), "routing": routing,
              "p1": None if t1.p is None else t1.p.tolist(),
              "p2": None if t2.p is None else t2.p.tolist()}
    if cfg.get("metrics"):
        try:
            with open(cfg["metrics"]) as fh:
                threshold = json.load(fh)["threshold"]
        except (OSError, KeyError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read threshold from {cfg['metrics']}: {e}") from e
        result["threshold"] = threshold
        result["verdict"] = "same" if result["distance"] <= threshold else "different"
    print(json.dumps(result, indent=2))
    if cfg.get("out"):
        out = Path(cfg["out"])
        write_config(out, cfg)
        _write_json(out / "match.json", result)
    return result


# ---------------------------------------------------------------------------
# analyze


def _checkpoint_series(run_dir: Path) -> list[Path]:
    ck = run_dir / "checkpoints"
    return sorted(p for p in ck.glob("epoch_*") if (p / "model.json").exists())


def cmd_analyze(cfg: dict) -> Path:
    out = _out(cfg)
    source = cfg.get("checkpoint")
    run = Path(cfg["run"]) if cfg.get("run") else None
    if source is None and run is not None:
        source = run / "checkpoints" / "final"
    if source is None:
        raise CliError("analyze needs --checkpoint or --run")
    net, _ = _load_net(source)
    report = analysis.energy_report(net)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out, cfg)
    _write_json(out / "energy_report.json", _round_trip(report.summary()))

    tasks = list(report.vectors)
    dim = report.vectors["id"].values.size
    rows = [{"rank": r, **{f"{t}": float(report.vectors[t].sorted()[r]) for t in tasks},
             **{f"{t}_dim": int(np.argsort(-report.vectors[t].values, kind="stable")[r]) for t in tasks}}
            for r in range(dim)]
    write_csv(out / "energy_profiles.csv", rows)
    cols = [f"{t}_{j}" for t in report.tasks for j in range(net.head_weight(t).shape[1])]
    write_csv(out / "wall_heatmap.csv", [
        {"dim": int(report.wall_order[r]), **{c: float(v) for c, v in zip(cols, report.wall[r])}}
        for r in range(dim)])

    if cfg.get("data"):
        spec, splits = _load_data(cfg["data"])
        sweep = analysis.feature_dim_sweep(net, splits["gallery"], splits["probe"], cfg.get("n_values"))
        write_csv(out / "dim_sweep.csv", [{"n": n, "rank1_shared": a, "rank1_truncated_head": b}
                                          for n, a, b in sweep])
    series = cfg.get("checkpoints") or (_checkpoint_series(run) if run is not None else [])
    if len(series) >= 2:
        try:
            traj = analysis.energy_trajectory(series)
        except ValueError as e:
            raise CliError(str(e)) from e
        write_csv(out / "energy_trajectory.csv", traj)
    return out


# ---------------------------------------------------------------------------
# compare


def variant_config(base: TrainConfig, variant: str, seed: int) -> TrainConfig:
    d = {**base.to_dict(), "seed": seed, "alphas": None}
    if variant == "m-fixed":
        d["mode"] = "m"
        d["alphas"] = {"id": 1.0, **{t: base.phi_s / len(base.side_tasks) for t in base.side_tasks}}
    elif variant in ("s", "m", "p"):
        d["mode"] = variant
    else:
        raise CliError(f"unknown model variant {variant!r}; choose from {MODEL_VARIANTS}")
    return TrainConfig.from_dict(d)


def run_variant(data_dir, spec, splits, tc: TrainConfig, run_dir: Path, routing=None,
                use_mirror=False) -> dict:
    net, _ = train(splits["train"], tc, spec, out_dir=run_dir)
    metrics, rows = evaluate(net, spec, splits["gallery"], splits["probe"],
                             routing or default_routing(net.mode), use_mirror)
    _write_json(run_dir / "metrics.json", _round_trip(metrics))
    write_csv(run_dir / "distances.csv", rows)
    return metrics


COMPARE_CELLS = ("all", "left", "frontal", "right", "pose", "illum", "expr")


def metric_cells(metrics: dict) -> dict:
    cells = {"all": metrics["rank1"]}
    cells.update({g: metrics["rank1_groups"][g] for g in GROUP_NAMES})
    for t in SIDE_TASKS:
        cells[t] = metrics["side_accuracy"].get(t, float("nan"))
    return {k: float("nan") if v is None else float(v) for k, v in cells.items()}


def summarize(per_seed: dict) -> list[dict]:
    """One row per variant: median and spread (max - min) across seeds for each cell."""
    rows = []
    for variant, runs in per_seed.items():
        row = {"model": variant, "seeds": len(runs)}
        for c in COMPARE_CELLS:
            vals = np.array([r[c] for r in runs], dtype=np.float64)
            ok = vals[~np.isnan(vals)]
            row[f"{c}_median"] = float(np.median(ok)) if ok.size else float("nan")
            row[f"{c}_spread"] = float(ok.max() - ok.min()) if ok.size else float("nan")
        rows.append(row)
    return rows


def cmd_compare(cfg: dict) -> Path:
    out = _out(cfg)
    spec, splits = _load_data(cfg.get("data"))
    base = train_config(cfg)
    seeds = [int(s) for s in cfg["seeds"]]
    write_config(out, cfg)
    per_seed: dict[str, list[dict]] = {}
    run_rows = []
    for variant in cfg["models"]:
        for seed in seeds:
            tc = variant_config(base, variant, seed)
            run_dir = out / f"seed_{seed}" / variant
            m = run_variant(cfg.get("data"), spec, splits, tc, run_dir,
                            cfg["eval"].get("routing") if variant == "p" else None,
                            cfg["eval"].get("mirror", False))
            cells = metric_cells(m)
            per_seed.setdefault(variant, []).append(cells)
            run_rows.append({"model": variant, "seed": seed, **cells})
            logger.info("%s seed %d: rank-1 %.4f", variant, seed, cells["all"])
    write_csv(out / "runs.csv", run_rows)
    write_csv(out / "comparison.csv", summarize(per_seed))
    return out


# ---------------------------------------------------------------------------
# argument parsing


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; explicit flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--quiet", action="store_true")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=("s", "m", "p"))
    p.add_argument("--phi-s", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--checkpoint-every-epoch", action="store_true", default=None)


TRAIN_FLAGS = {"mode": "train.mode", "phi_s": "train.phi_s", "epochs": "train.epochs",
               "batch_size": "train.batch_size", "lr": "train.lr",
               "checkpoint_every_epoch": "train.checkpoint_every_epoch"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posemtl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="render a synthetic dataset")
    _common(g)
    g.add_argument("--identities", type=int)
    g.add_argument("--image-size", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--train-frac", type=float)

    t = sub.add_parser("train", help="train one network")
    _common(t)
    t.add_argument("--data")
    _train_flags(t)
    t.add_argument("--search", type=_float_list, help="comma-separated phi_s candidates")

    e = sub.add_parser("eval", help="identification and verification metrics")
    _common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--routing", choices=("generic", "stochastic", "hard"))
    e.add_argument("--mirror", action="store_true", default=None)

    m = sub.add_parser("match", help="distance between two images")
    _common(m)
    m.add_argument("images", nargs=2)
    m.add_argument("--checkpoint")
    m.add_argument("--routing", choices=("generic", "stochastic", "hard"))
    m.add_argument("--mirror", action="store_true", default=None)
    m.add_argument("--metrics", help="metrics.json whose threshold decides the verdict")

    a = sub.add_parser("analyze", help="energy analysis of head weights")
    _common(a)
    a.add_argument("--checkpoint")
    a.add_argument("--run", help="training output directory (uses its checkpoint series)")
    a.add_argument("--checkpoints", nargs="+")
    a.add_argument("--data", help="dataset for the feature-dimension sweep")
    a.add_argument("--n-values", type=_int_list)

    c = sub.add_parser("compare", help="train and evaluate model variants over seeds")
    _common(c)
    c.add_argument("--data")
    _train_flags(c)
    c.add_argument("--seeds", type=int, help="use seeds 0..N-1")
    c.add_argument("--seed-list", type=_int_list)
    c.add_argument("--models", type=lambda s: s.split(","))
    c.add_argument("--routing", choices=("generic", "stochastic", "hard"))
    c.add_argument("--mirror", action="store_true", default=None)
    return parser


FLAGS = {
    "generate-data": {"identities": "spec.num_identities", "image_size": "spec.image_size",
                      "noise": "spec.noise_std", "train_frac": "train_frac_identities"},
    "train": {"data": "data", "search": "search", **TRAIN_FLAGS},
    "eval": {"checkpoint": "checkpoint", "data": "data", "routing": "eval.routing",
             "mirror": "eval.mirror"},
    "match": {"images": "images", "checkpoint": "checkpoint", "routing": "eval.routing",
              "mirror": "eval.mirror", "metrics": "metrics"},
    "analyze": {"checkpoint": "checkpoint", "run": "run", "checkpoints": "checkpoints",
                "data": "data", "n_values": "n_values"},
    "compare": {"data": "data", "models": "models", "routing": "eval.routing",
                "mirror": "eval.mirror", **TRAIN_FLAGS},
}

COMMANDS = {"generate-data": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "match": cmd_match, "analyze": cmd_analyze, "compare": cmd_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args, FLAGS[args.command])
        if args.command == "compare":
            if args.seed_list is not None:
                cfg["seeds"] = args.seed_list
            elif args.seeds is not None:
                cfg["seeds"] = list(range(args.seeds))
        COMMANDS[args.command](cfg)
    except CliError as e:
        print(f"posemtl {args.command}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
