import json

import pytest

from oclf import cli
from oclf.datasets import load_manifest
from oclf.fusion import read_predictions


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert cli.main(["--seed", "3", "synth", "--n", "8", "--n-val", "4", "--n-test", "4", "--side", "96", "--out", str(data)]) == 0
    assert cli.main(["--seed", "1", "train", "--manifest", str(data / "manifest.jsonl"), "--out", str(root / "run"), "--preset", "toy", "--epochs", "2"]) == 0
    return root


def test_synth_prints_and_is_reproducible(tmp_path, capsys):
    code, out, _ = run(capsys, "--seed", 7, "synth", "--n", 2, "--n-val", 1, "--n-test", 1, "--side", 48, "--out", tmp_path / "a")
    assert code == 0 and (tmp_path / "a" / "manifest.jsonl").is_file()
    assert "manifest:" in out and "occlusion_ratio[test]" in out
    code, again, _ = run(capsys, "--seed", 7, "synth", "--n", 2, "--n-val", 1, "--n-test", 1, "--side", 48, "--out", tmp_path / "b")
    fp = lambda text: [l for l in text.splitlines() if l.startswith("fingerprint")]  # noqa: E731
    assert fp(out) == fp(again)


def test_synth_unwritable(tmp_path, capsys):
    (tmp_path / "f").write_text("")
    code, _, err = run(capsys, "synth", "--n", 1, "--out", tmp_path / "f" / "x")
    assert code == 2 and "IOError" in err


def test_train_defaults_follow_training_recipe():
    args = cli.build_parser().parse_args(["train", "--manifest", "m", "--out", "o"])
    assert (args.lr, args.epochs, args.batch_size, args.momentum) == (0.002, 30, 15, 0.0)


def test_train_outputs(workspace):
    run_dir = workspace / "run"
    for name in ("whole.oclf", "patch.oclf", "concat.oclf", "run_manifest.json", "config.json"):
        assert (run_dir / name).is_file()
    for key in ("whole", "patch", "concat"):
        assert len((run_dir / f"history_{key}.csv").read_text().splitlines()) == 3
    meta = json.loads((run_dir / "run_manifest.json").read_text())
    assert meta["dataset_fingerprint"] == load_manifest(workspace / "data" / "manifest.jsonl").fingerprint


def test_train_same_seed_same_checkpoints(workspace, tmp_path):
    argv = ["--seed", "1", "train", "--manifest", str(workspace / "data" / "manifest.jsonl"), "--out", str(tmp_path / "r"), "--preset", "toy", "--epochs", "2"]
    assert cli.main(argv) == 0
    for name in ("whole.oclf", "patch.oclf", "concat.oclf", "history_whole.csv"):
        assert (tmp_path / "r" / name).read_bytes() == (workspace / "run" / name).read_bytes()


def test_train_degenerate_dataset(tmp_path, capsys):
    data = tmp_path / "d"
    assert cli.main(["synth", "--n", "2", "--n-val", "1", "--n-test", "1", "--side", "48", "--out", str(data)]) == 0
    lines = (data / "manifest.jsonl").read_text().splitlines()
    kept = [json.dumps({"manifest_version": 1, "root": "."})] + [l for l in lines[1:] if not ('"split":"train"' in l and '"label":"fake"' in l)]
    (data / "manifest.jsonl").write_text("\n".join(kept) + "\n")
    code, _, err = run(capsys, "train", "--manifest", data / "manifest.jsonl", "--out", tmp_path / "r", "--preset", "toy", "--epochs", "1")
    assert code == 3 and "DegenerateDataset" in err


def test_eval_outputs(workspace, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--manifest", workspace / "data" / "manifest.jsonl", "--ckpt", workspace / "run", "--out", tmp_path)
    assert code == 0
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert {"accuracy", "macro_precision", "macro_recall", "macro_f"} <= set(m["final"])
    assert {"whole_face", "concat", "patch_vote"} == set(m["paths"])
    assert 0.0 <= m["occlusion_ratio"] <= 1.0 and m["per_patch_accuracy"]
    for name in ("predictions.jsonl", "confusion.csv", "confusion.png", "config.json"):
        assert (tmp_path / name).is_file()
    assert len(read_predictions(tmp_path / "predictions.jsonl")) == 8


def test_eval_early_exit_matches_full(workspace, tmp_path):
    common = ["--manifest", str(workspace / "data" / "manifest.jsonl"), "--ckpt", str(workspace / "run")]
    assert cli.main(["eval", *common, "--out", str(tmp_path / "full")]) == 0
    assert cli.main(["eval", *common, "--out", str(tmp_path / "ee"), "--early-exit", "agreement"]) == 0
    full = read_predictions(tmp_path / "full" / "predictions.jsonl")
    ee = read_predictions(tmp_path / "ee" / "predictions.jsonl")
    for a, b in zip(full, ee):
        if a.label_of("concat") is a.label_of("patch_vote"):
            assert a.final is b.final
    assert [a.final for a in full] == [b.final for b in ee]


def test_eval_validated_mode(workspace, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--manifest", workspace / "data" / "manifest.jsonl", "--ckpt", workspace / "run", "--out", tmp_path, "--early-exit", "validated")
    assert code == 0 and "trusted path" in out


def test_eval_missing_checkpoint(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--manifest", workspace / "data" / "manifest.jsonl", "--ckpt", tmp_path / "none", "--out", tmp_path / "o")
    assert code == 4 and "checkpoint" in err


def test_eval_block_mode_records_16_votes(workspace, tmp_path):
    manifest = str(workspace / "data" / "manifest.jsonl")
    block = ["--patch-mode", "block", "--block", "64x64"]
    assert cli.main(["train", "--manifest", manifest, "--out", str(tmp_path / "r"), "--preset", "toy", "--epochs", "1", *block]) == 0
    assert cli.main(["eval", "--manifest", manifest, "--ckpt", str(tmp_path / "r"), "--out", str(tmp_path / "e"), *block]) == 0
    for r in read_predictions(tmp_path / "e" / "predictions.jsonl"):
        assert len(r.patch_votes) == 16


def test_sweep(workspace, tmp_path, capsys):
    wf = tmp_path / "w.json"
    wf.write_text(json.dumps([{}, {"default": 2}, {"mouth": 2}]))
    common = ["--manifest", workspace / "data" / "manifest.jsonl", "--ckpt", workspace / "run"]
    code, _, _ = run(capsys, "sweep", *common, "--weights-file", wf, "--out", tmp_path / "s")
    assert code == 0
    rows = json.loads((tmp_path / "s" / "sweep.json").read_text())
    assert (tmp_path / "s" / "sweep.csv").is_file() and (tmp_path / "s" / "sweep.png").is_file()
    drop = lambda r: {k: v for k, v in r.items() if k not in ("weights", "weight_map")}  # noqa: E731
    assert drop(rows[0]) == drop(rows[1])
    assert run(capsys, "eval", *common, "--out", tmp_path / "e")[0] == 0
    final = json.loads((tmp_path / "e" / "metrics.json").read_text())["final"]["accuracy"]
    assert rows[0]["final"] == pytest.approx(final, abs=0.005)


def test_sweep_bad_weights(workspace, tmp_path, capsys):
    wf = tmp_path / "w.json"
    wf.write_text(json.dumps([{"mouth": 0}]))
    code, _, err = run(capsys, "sweep", "--manifest", workspace / "data" / "manifest.jsonl", "--ckpt", workspace / "run", "--weights-file", wf, "--out", tmp_path / "s")
    assert code == 5


def test_report(workspace, tmp_path, capsys):
    h = workspace / "run" / "history_whole.csv"
    assert run(capsys, "report", h, "--out", tmp_path / "one.png")[0] == 0
    assert (tmp_path / "one.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    hs = [workspace / "run" / f"history_{k}.csv" for k in ("whole", "patch", "concat")]
    assert run(capsys, "report", *hs, "--out", tmp_path / "dir")[0] == 0
    assert (tmp_path / "dir" / "accuracy.png").is_file()
    (tmp_path / "empty.csv").write_text("")
    assert run(capsys, "report", tmp_path / "empty.csv", "--out", tmp_path / "x.png")[0] == 6


def test_predict_single_image(workspace, tmp_path, capsys):
    m = load_manifest(workspace / "data" / "manifest.jsonl")
    rec = m.split_records("test")[0]
    ann = tmp_path / "ann.json"
    ann.write_text(json.dumps({"landmarks": [list(p) for p in rec.landmarks], "face_box": list(rec.face_box)}))
    code, out, _ = run(capsys, "predict", "--ckpt", workspace / "run", "--image", m.root / rec.path, "--annotations", ann, "--out", tmp_path / "p.json")
    assert code == 0
    d = json.loads((tmp_path / "p.json").read_text())
    assert d["final"] in ("real", "fake") and len(d["patch_votes"]) == 7


def test_config_file_overrides_flags(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 1, "n_val": 1, "n_test": 1, "side": 48, "out": str(tmp_path / "o")}))
    code, out, _ = run(capsys, "--config", cfg, "synth", "--n", 50, "--out", tmp_path / "ignored")
    assert code == 0 and (tmp_path / "o" / "manifest.jsonl").is_file()
    assert len(load_manifest(tmp_path / "o" / "manifest.jsonl").records) == 6
