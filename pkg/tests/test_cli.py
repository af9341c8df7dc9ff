import json
import warnings

import numpy as np
import pytest

from anysat.checkpoint import CheckpointError, load_checkpoint, parse_checkpoint, save_checkpoint, tree_hash
from anysat.cli import ResumeWarning, main
from anysat.config import ConfigError, parse_config
from anysat.data import TileDataset
from anysat.data.synth import directory_checksum
from anysat.data.tilefile import load_tile, store_tile
from anysat.metrics import compute_metrics

TINY_MODEL = {"E": 16, "heads": 2, "encoder_blocks": 1, "combiner_blocks": 1, "predictor_blocks": 1, "ltae_heads": 2, "ltae_dk": 4}
MODALITIES = [
    {"name": "ts", "R_m": 10.0, "T_range": [3, 5], "C_m": 4, "delta_m": 1},
    {"name": "img", "R_m": 2.5, "T_range": [1, 1], "C_m": 3, "delta_m": 2, "has_dates": False},
]


def config_doc(K=3, datasets=None, **top):
    datasets = datasets or [
        {"name": "toy", "S_d": 20.0, "modalities": ["ts", "img"], "B_d": 2, "P_d": [10.0], "num_tiles": 8,
         "synthetic": {"K": K, "field": "voronoi", "noise_std": 0.3}}
    ]
    doc = {"model": TINY_MODEL, "data": {"seed": 3, "modalities": MODALITIES, "datasets": datasets}, "task": {"epochs": 2}}
    doc.update(top)
    return doc


def write_cfg(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


# ---------------------------------------------------------------- config / checkpoint


def test_config_rejects_unknown_keys_and_hash_is_stable():
    doc = config_doc()
    assert parse_config(doc, env={}).content_hash() == parse_config(json.loads(json.dumps(doc)), env={}).content_hash()
    with pytest.raises(ConfigError, match="colour"):
        parse_config({**doc, "colour": "red"}, env={})
    bad = config_doc()
    bad["model"] = {**TINY_MODEL, "depth": 3}
    with pytest.raises(ConfigError):
        parse_config(bad, env={})


def test_seed_environment_override_changes_the_hash():
    doc = config_doc()
    base = parse_config(doc, env={})
    over = parse_config(doc, env={"ANYSAT_SEED": "11"})
    assert over.data.seed == 11 and over.content_hash() != base.content_hash()
    with pytest.raises(ConfigError):
        parse_config(doc, env={"ANYSAT_SEED": "eleven"})


@pytest.mark.parametrize("dtype,tol", [("f64", 0.0), ("f32", 1e-6)])
def test_checkpoint_round_trip(tmp_path, dtype, tol):
    rng = np.random.default_rng(0)
    arrays = {"encoder/w": rng.normal(size=(3, 4)), "scalar": np.array(2.5), "empty": np.zeros((0, 2))}
    save_checkpoint(tmp_path / "c.ck", arrays, {"kind": "x", "n": [1, 2]}, dtype)
    got, meta = load_checkpoint(tmp_path / "c.ck")
    assert meta == {"kind": "x", "n": [1, 2]} and list(got) == list(arrays)
    for k in arrays:
        assert got[k].shape == arrays[k].shape
        np.testing.assert_allclose(got[k], arrays[k], rtol=tol, atol=0)
    assert tree_hash(got, dtype) == tree_hash(arrays, dtype)


def test_checkpoint_rejects_bad_magic_and_truncation(tmp_path):
    save_checkpoint(tmp_path / "c.ck", {"a": np.ones(4)}, {})
    blob = (tmp_path / "c.ck").read_bytes()
    with pytest.raises(CheckpointError):
        parse_checkpoint(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointError):
        parse_checkpoint(blob[:-3])


# ---------------------------------------------------------------- end-to-end


def test_synth_data_is_reproducible(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", config_doc())
    assert main(["synth-data", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["synth-data", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    assert directory_checksum(tmp_path / "a") == directory_checksum(tmp_path / "b")


def test_three_modality_manifest(tmp_path, capsys):
    mods = MODALITIES + [{"name": "sar", "R_m": 10.0, "T_range": [2, 4], "C_m": 2, "delta_m": 1}]
    ds = [{"name": "tsai_like", "S_d": 60.0, "modalities": ["ts", "img", "sar"], "B_d": 2, "P_d": [10.0, 20.0, 30.0],
           "num_tiles": 2, "synthetic": {"K": 3}}]
    doc = config_doc(datasets=ds)
    doc["data"]["modalities"] = mods
    assert main(["synth-data", "--config", write_cfg(tmp_path / "c.json", doc), "--out", str(tmp_path / "d")]) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert [m["name"] for m in manifest["modalities"]] == ["ts", "img", "sar"]
    assert json.loads(capsys.readouterr().out)["modalities"] == ["ts", "img", "sar"]


def test_usage_and_config_errors_exit_2(tmp_path):
    bad = write_cfg(tmp_path / "bad.json", config_doc(K=1))
    assert main(["synth-data", "--config", bad, "--out", str(tmp_path / "x")]) == 2
    good = write_cfg(tmp_path / "c.json", config_doc())
    main(["synth-data", "--config", good, "--out", str(tmp_path / "d")])
    with pytest.raises(SystemExit) as exc:
        main(["pretrain", "--config", good, "--data", str(tmp_path / "d"), "--steps", "0", "--out", str(tmp_path / "p")])
    assert exc.value.code == 2


def test_missing_files_exit_4(tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "nope.ck"), "--data", str(tmp_path), "--metrics", str(tmp_path / "m")]) == 4
    cfg = write_cfg(tmp_path / "c.json", config_doc())
    assert main(["pretrain", "--config", cfg, "--data", str(tmp_path / "nodata"), "--steps", "1", "--out", str(tmp_path / "p")]) == 4


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds = [
        {"name": "alpha", "S_d": 20.0, "modalities": ["ts", "img"], "B_d": 2, "P_d": [10.0], "num_tiles": 10,
         "synthetic": {"K": 3, "field": "voronoi", "noise_std": 0.3}},
        {"name": "beta", "S_d": 20.0, "modalities": ["ts"], "B_d": 2, "P_d": [10.0], "num_tiles": 6,
         "synthetic": {"K": 3}},
    ]
    cfg = write_cfg(root / "c.json", config_doc(datasets=ds))
    assert main(["synth-data", "--config", cfg, "--out", str(root / "data")]) == 0
    data = [str(root / "data" / "alpha"), str(root / "data" / "beta")]
    assert main(["pretrain", "--config", cfg, "--data", *data, "--steps", "6", "--out", str(root / "pre.ck")]) == 0
    return root, cfg, data


def test_pretrain_trace_covers_both_datasets(workspace):
    root, _, _ = workspace
    rows = [json.loads(line) for line in (root / "pre.ck.trace.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == list(range(6))
    assert {r["dataset"] for r in rows} == {"alpha", "beta"}
    _, meta = load_checkpoint(root / "pre.ck")
    assert meta["kind"] == "pretrain" and meta["step"] == 6 and meta["datasets"] == ["alpha", "beta"]


def test_resume_appends_and_warns_on_hash_change(workspace, tmp_path):
    root, cfg, data = workspace
    trace = tmp_path / "t.jsonl"
    trace.write_text((root / "pre.ck.trace.jsonl").read_text())
    args = ["pretrain", "--data", *data, "--steps", "2", "--resume", str(root / "pre.ck"), "--trace", str(trace)]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert main(args + ["--config", cfg, "--out", str(tmp_path / "r.ck")]) == 0
    assert [json.loads(line)["step"] for line in trace.read_text().splitlines()] == list(range(8))

    changed = json.loads((root / "c.json").read_text())
    changed["ssl"] = {"tau": 0.2}
    other = write_cfg(tmp_path / "other.json", changed)
    with pytest.warns(ResumeWarning):
        assert main(args + ["--config", other, "--out", str(tmp_path / "r2.ck")]) == 0


@pytest.fixture(scope="module")
def probed(workspace):
    root, _, data = workspace
    out = root / "probe.ck"
    assert main(["adapt", "--mode", "probe", "--task", "segment", "--ckpt", str(root / "pre.ck"), "--data", data[0],
                 "--out", str(out)]) == 0
    return root, data[0], out


def test_probe_reuses_the_pretrained_backbone(probed):
    root, _, out = probed
    _, pre = load_checkpoint(root / "pre.ck")
    _, meta = load_checkpoint(out)
    assert meta["backbone_hash"] == pre["backbone_hash"] == meta["source_backbone_hash"]
    assert meta["pretrained"] and not set(meta["train_ids"]) & set(meta["test_ids"])


def test_eval_exports_predictions_that_reproduce_the_metrics(probed, tmp_path):
    root, data, ckpt = probed
    mpath, preds = tmp_path / "m.json", tmp_path / "preds"
    assert main(["eval", "--ckpt", str(ckpt), "--data", data, "--metrics", str(mpath), "--predictions", str(preds),
                 "--split", "all"]) == 0
    doc = json.loads(mpath.read_text())
    assert (tmp_path / "m.csv").read_text().startswith(f"# config_hash={doc['config_hash']}")
    ds = TileDataset(data)
    ids = doc["tile_ids"]
    pred = np.stack([load_tile(preds / f"pred_{i:05d}.anysat").labels.pixel for i in ids])
    target = np.stack([ds[i].labels.pixel for i in ids])
    again = compute_metrics(pred, target, "segment", doc["task"]["N"])
    for k in ("overall_accuracy", "miou", "weighted_f1", "macro_f1"):
        assert again[k] == pytest.approx(doc["metrics"][k], abs=1e-12)

    # a dataset whose labels are the model's own predictions scores perfectly
    copy = tmp_path / "copy"
    copy.mkdir()
    (copy / "manifest.json").write_text((ds.root / "manifest.json").read_text())
    for i, fname in enumerate(ds.files):
        tile = ds[i]
        tile.labels = load_tile(preds / f"pred_{i:05d}.anysat").labels
        store_tile(copy / fname, tile)
    m2 = tmp_path / "m2.json"
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(copy), "--metrics", str(m2), "--split", "all"]) == 0
    perfect = json.loads(m2.read_text())["metrics"]
    assert perfect["overall_accuracy"] == perfect["miou"] == perfect["macro_f1"] == 1.0


def test_eval_rejects_a_pretrain_checkpoint(workspace, tmp_path):
    root, _, data = workspace
    assert main(["eval", "--ckpt", str(root / "pre.ck"), "--data", data[0], "--metrics", str(tmp_path / "m.json")]) == 2
