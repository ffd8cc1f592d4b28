import csv
import json

import numpy as np
import pytest

from posemtl import cli
from posemtl.data import enumerate_factors, read_dataset

TINY = {
    "spec": {"num_identities": 5, "pose_bins": [-60.0, 0.0, 60.0], "illum_bins": 2,
             "expr_bins": 1, "image_size": 16, "noise_std": 0.02, "seed": 0},
    "train_frac_identities": 0.6,
    "train": {"epochs": 1, "batch_size": 4, "lr": 0.01, "lr_drops": [],
              "trunk": {"blocks": [{"channels": 4, "convs": 1},
                                   {"channels": 6, "convs": 1, "pool": "global_avg"}],
                        "image_size": 16, "dropout": 0.0}},
}


def run(*argv):
    return cli.main(["--quiet" if a == "-q" else a for a in argv])


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    conf = root / "tiny.json"
    conf.write_text(json.dumps(TINY))
    data = root / "data"
    assert cli.main(["generate-data", "--config", str(conf), "--out", str(data), "--quiet"]) == 0
    run_dir = root / "run_m"
    assert cli.main(["train", "--config", str(conf), "--data", str(data), "--mode", "m",
                     "--checkpoint-every-epoch", "--epochs", "2", "--out", str(run_dir),
                     "--quiet"]) == 0
    ev = root / "eval_m"
    assert cli.main(["eval", "--checkpoint", str(run_dir / "checkpoints" / "final"),
                     "--data", str(data), "--out", str(ev), "--quiet"]) == 0
    return root, conf, data, run_dir, ev


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_default_spec_has_40_identities(tmp_path):
    cfg = cli.default_config()
    assert cfg["spec"]["num_identities"] == 40


def test_generate_counts(tmp_path):
    out = tmp_path / "d"
    assert cli.main(["generate-data", "--identities", "10", "--image-size", "16",
                     "--out", str(out), "--quiet"]) == 0
    spec, splits = read_dataset(out)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["spec"]["num_identities"] == 10
    per_id = spec.num_poses * spec.illum_bins * spec.expr_bins
    n_train = round(0.6 * 10)
    assert manifest["splits"]["train"]["count"] == n_train * per_id
    assert manifest["splits"]["gallery"]["count"] == 10 - n_train
    assert manifest["splits"]["probe"]["count"] == (10 - n_train) * (per_id - 1)
    assert len(splits["train"]) == len(enumerate_factors(spec, range(n_train)))
    # the label table holds one row per image
    assert len(read_rows(out / "train_labels.csv")) == n_train * per_id


def test_generate_deterministic(tmp_path, tiny):
    _, conf, data, _, _ = tiny
    again = tmp_path / "again"
    assert run("generate-data", "--config", str(conf), "--out", str(again), "-q") == 0
    for f in data.iterdir():
        if f.name == "config.json":     # records the output path
            continue
        assert (again / f.name).read_bytes() == f.read_bytes(), f.name


def test_train_outputs(tiny):
    _, _, _, run_dir, _ = tiny
    rows = read_rows(run_dir / "epochs.csv")
    assert len(rows) == 2
    cfg = json.loads((run_dir / "config.json").read_text())
    assert cfg["train"]["mode"] == "m" and cfg["train"]["epochs"] == 2
    assert (run_dir / "checkpoints" / "epoch_000" / "model.json").exists()


def test_eval_outputs_recompute(tiny):
    _, _, data, _, ev = tiny
    metrics = json.loads((ev / "metrics.json").read_text())
    rows = read_rows(ev / "distances.csv")
    spec, splits = read_dataset(data)
    assert len(rows) == len(splits["probe"]) * len(splits["gallery"])
    # per-group rank-1 recomputed from the stored distances
    n_g = len(splits["gallery"])
    dist = np.array([float(r["distance"]) for r in rows]).reshape(-1, n_g)
    g_lab = [int(r["gallery_label"]) for r in rows[:n_g]]
    p_lab = np.array([int(r["probe_label"]) for r in rows[::n_g]])
    groups = np.array([r["probe_group"] for r in rows[::n_g]])
    pred = np.array(g_lab)[np.argmin(dist, axis=1)]
    assert metrics["rank1"] == float(np.mean(pred == p_lab))
    for g in ("left", "frontal", "right"):
        sel = groups == g
        assert metrics["rank1_groups"][g] == float(np.mean(pred[sel] == p_lab[sel]))
    assert set(metrics) >= {"eer", "auc", "rank1_groups", "threshold"}


def test_eval_rerun_from_config_is_byte_identical(tmp_path, tiny):
    _, _, _, _, ev = tiny
    again = tmp_path / "again"
    assert run("eval", "--config", str(ev / "config.json"), "--out", str(again), "-q") == 0
    for name in ("metrics.json", "distances.csv"):
        assert (again / name).read_bytes() == (ev / name).read_bytes()


def test_train_rerun_from_config_is_byte_identical(tmp_path, tiny):
    _, _, _, run_dir, _ = tiny
    again = tmp_path / "again"
    assert run("train", "--config", str(run_dir / "config.json"), "--out", str(again), "-q") == 0
    assert (again / "epochs.csv").read_bytes() == (run_dir / "epochs.csv").read_bytes()
    assert ((again / "checkpoints" / "final" / "weights.bin").read_bytes()
            == (run_dir / "checkpoints" / "final" / "weights.bin").read_bytes())


def _save_probe_images(tmp_path, data, i, j):
    _, splits = read_dataset(data)
    a, b = tmp_path / "a.npy", tmp_path / "b.npy"
    np.save(a, splits["probe"].images[i])
    np.save(b, splits["gallery"].images[j])
    return a, b


def test_match_self_and_eval_agreement(tmp_path, tiny, capsys):
    _, _, data, run_dir, ev = tiny
    ck = str(run_dir / "checkpoints" / "final")
    a, b = _save_probe_images(tmp_path, data, 3, 1)
    capsys.readouterr()
    assert run("match", str(a), str(a), "--checkpoint", ck, "-q") == 0
    res = json.loads(capsys.readouterr().out)
    assert abs(res["distance"]) < 1e-12 and abs(res["generic"]) < 1e-12
    assert len(res["p1"]) == 3 and res["p1"] == res["p2"]

    assert run("match", str(a), str(b), "--checkpoint", ck, "--metrics",
               str(ev / "metrics.json"), "-q") == 0
    res = json.loads(capsys.readouterr().out)
    n_g = len(read_dataset(data)[1]["gallery"])
    row = read_rows(ev / "distances.csv")[3 * n_g + 1]
    # same code path; features of a 1-image batch may differ from a full batch in the last ulp
    assert abs(res["distance"] - float(row["distance"])) < 1e-12
    thr = json.loads((ev / "metrics.json").read_text())["threshold"]
    assert res["verdict"] == ("same" if res["distance"] <= thr else "different")
    # thresholds sit at midpoints between stored distances, so the stored value agrees
    assert res["verdict"] == ("same" if float(row["distance"]) <= thr else "different")


def test_match_unreadable_image(tmp_path, tiny, capsys):
    _, _, _, run_dir, _ = tiny
    bad = tmp_path / "bad.png"
    bad.write_text("not an image")
    code = run("match", str(bad), str(bad), "--checkpoint",
               str(run_dir / "checkpoints" / "final"), "-q")
    assert code != 0
    assert "cannot read image" in capsys.readouterr().err


def test_match_png(tmp_path, tiny, capsys):
    from PIL import Image

    _, _, _, run_dir, _ = tiny
    img = (np.random.default_rng(0).uniform(size=(20, 20)) * 255).astype(np.uint8)
    p = tmp_path / "x.png"
    Image.fromarray(img).save(p)
    capsys.readouterr()
    assert run("match", str(p), str(p), "--checkpoint",
               str(run_dir / "checkpoints" / "final"), "-q") == 0
    assert abs(json.loads(capsys.readouterr().out)["distance"]) < 1e-12


def test_analyze(tmp_path, tiny):
    _, _, data, run_dir, _ = tiny
    out = tmp_path / "an"
    assert run("analyze", "--run", str(run_dir), "--data", str(data), "--out", str(out), "-q") == 0
    for name in ("energy_report.json", "energy_profiles.csv", "wall_heatmap.csv",
                 "dim_sweep.csv", "energy_trajectory.csv"):
        assert (out / name).exists(), name
    rep = json.loads((out / "energy_report.json").read_text())
    assert rep["mode"] == "m" and rep["dim"] == 6
    assert len(read_rows(out / "energy_trajectory.csv")) == 3


def test_compare(tmp_path, tiny):
    _, conf, data, _, _ = tiny
    out = tmp_path / "cmp"
    assert run("compare", "--config", str(conf), "--data", str(data), "--models", "s,m,p",
               "--seeds", "2", "--out", str(out), "-q") == 0
    table = read_rows(out / "comparison.csv")
    assert [r["model"] for r in table] == ["s", "m", "p"]
    runs = read_rows(out / "runs.csv")
    assert len(runs) == 6
    for r in runs:
        metrics = json.loads((out / f"seed_{r['seed']}" / r["model"] / "metrics.json").read_text())
        dist = read_rows(out / f"seed_{r['seed']}" / r["model"] / "distances.csv")
        n_g = metrics["num_gallery"]
        d = np.array([float(x["distance"]) for x in dist]).reshape(-1, n_g)
        g_lab = np.array([int(x["gallery_label"]) for x in dist[:n_g]])
        p_lab = np.array([int(x["probe_label"]) for x in dist[::n_g]])
        groups = np.array([x["probe_group"] for x in dist[::n_g]])
        pred = g_lab[np.argmin(d, axis=1)]
        for g in ("left", "frontal", "right"):
            sel = groups == g
            assert float(r[g]) == float(np.mean(pred[sel] == p_lab[sel]))
    for row in table:
        vals = [float(r["all"]) for r in runs if r["model"] == row["model"]]
        assert float(row["all_median"]) == float(np.median(vals))
        assert float(row["all_spread"]) == max(vals) - min(vals)

    again = tmp_path / "cmp2"
    assert run("compare", "--config", str(out / "config.json"), "--out", str(again), "-q") == 0
    for name in ("runs.csv", "comparison.csv"):
        assert (again / name).read_bytes() == (out / name).read_bytes()


@pytest.mark.parametrize("argv, message", [
    (["eval", "--data", "/nonexistent", "--checkpoint", "/nonexistent", "--out", "X"], "checkpoint"),
    (["train", "--out", "X"], "data directory"),
    (["generate-data", "--identities", "1", "--out", "X"], "invalid factor spec"),
    (["generate-data", "--config", "/nonexistent.json", "--out", "X"], "cannot read config"),
    (["generate-data"], "output directory"),
])
def test_error_exits(tmp_path, capsys, argv, message):
    argv = [str(tmp_path / a) if a == "X" else a for a in argv]
    assert cli.main(argv + ["--quiet"]) == 2
    assert message in capsys.readouterr().err


def test_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["generate-data", "--identities", "3", "--image-size", "16",
                     "--out", str(blocker / "sub"), "--quiet"]) == 2


def test_flags_override_config(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"train": {"phi_s": 0.3, "epochs": 7}}))
    args = cli.build_parser().parse_args(["train", "--config", str(conf), "--phi-s", "0.2",
                                          "--seed", "5"])
    cfg = cli.resolve(args, cli.FLAGS["train"])
    assert cfg["train"]["phi_s"] == 0.2 and cfg["train"]["epochs"] == 7 and cfg["train"]["seed"] == 5
