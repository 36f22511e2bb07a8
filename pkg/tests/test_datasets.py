import json

import numpy as np
import pytest
from PIL import Image

from oclf import datasets as ds
from oclf import metrics as mt
from oclf.errors import InvalidInput, ManifestInvalid, ManifestNotFound, SplitMissing
from oclf.labels import BinaryLabel


def write_fixture(root, layout, landmarks=True):
    """layout maps split -> (n_real, n_fake); images are 8x8 grey PNGs."""
    root.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"manifest_version": 1, "root": "."})]
    pts = [[float(i % 8), float(i // 9)] for i in range(68)]
    for split, (n_real, n_fake) in layout.items():
        for label, n in (("real", n_real), ("fake", n_fake)):
            for i in range(n):
                rel = f"{split}_{label}_{i}.png"
                Image.fromarray(np.full((8, 8, 3), i % 255, dtype=np.uint8)).save(root / rel)
                rec = {"path": rel, "label": label, "split": split}
                if landmarks:
                    rec["landmarks"] = pts
                lines.append(json.dumps(rec))
    path = root / "manifest.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_load_ten_records(tmp_path):
    m = ds.load_manifest(write_fixture(tmp_path, {"train": (5, 5)}))
    assert len(m.records) == 10
    assert m.splits() == {"train": 10}


def test_fingerprint_is_stable_and_round_trips(tmp_path):
    path = write_fixture(tmp_path / "a", {"train": (3, 3), "test": (2, 2)})
    a, b = ds.load_manifest(path), ds.load_manifest(path)
    assert a.fingerprint == b.fingerprint
    saved = ds.save_manifest(a, tmp_path / "a" / "copy.jsonl", root=".")
    assert ds.load_manifest(saved).fingerprint == a.fingerprint


def test_67_landmarks_rejected_with_line(tmp_path):
    path = write_fixture(tmp_path, {"train": (2, 2)})
    lines = path.read_text().splitlines()
    rec = json.loads(lines[3])
    rec["landmarks"] = rec["landmarks"][:67]
    lines[3] = json.dumps(rec)
    path.write_text("\n".join(lines))
    with pytest.raises(ManifestInvalid) as err:
        ds.load_manifest(path)
    assert err.value.line == 4
    assert "line 4" in str(err.value)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda r: {**r, "label": "maybe"},
        lambda r: {**r, "split": "holdout"},
        lambda r: {**r, "colour": "red"},
        lambda r: {**r, "face_box": [5, 5, 2, 9]},
        lambda r: {**r, "path": "missing.png"},
        lambda r: {k: v for k, v in r.items() if k != "label"},
    ],
)
def test_schema_violations(tmp_path, mutate):
    path = write_fixture(tmp_path, {"train": (2, 2)})
    lines = path.read_text().splitlines()
    lines[2] = json.dumps(mutate(json.loads(lines[2])))
    path.write_text("\n".join(lines))
    with pytest.raises(ManifestInvalid):
        ds.load_manifest(path)


def test_duplicate_path(tmp_path):
    path = write_fixture(tmp_path, {"train": (2, 2)})
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines + [lines[1]]))
    with pytest.raises(ManifestInvalid, match="duplicate"):
        ds.load_manifest(path)


def test_header_required(tmp_path):
    path = write_fixture(tmp_path, {"train": (1, 1)})
    path.write_text("\n".join(path.read_text().splitlines()[1:]))
    with pytest.raises(ManifestInvalid):
        ds.load_manifest(path)


def test_missing_manifest(tmp_path):
    with pytest.raises(ManifestNotFound):
        ds.load_manifest(tmp_path / "nope.jsonl")
    assert issubclass(ManifestNotFound, FileNotFoundError)


def test_fourth_dataset_shaped_splits(tmp_path):
    m = ds.load_manifest(write_fixture(tmp_path, {"train": (148, 139), "test": (100, 90)}, landmarks=False))
    train = ds.split_view(m, "train")
    assert len(train) == 287
    assert sum(s.label is BinaryLabel.REAL for s in train) == 148
    assert [s.id for s in train] == [r.path for r in m.records if r.split == "train"]
    with pytest.raises(SplitMissing):
        ds.split_view(m, "val")


def test_header_counts_checked(tmp_path):
    path = write_fixture(tmp_path, {"train": (2, 2)})
    lines = path.read_text().splitlines()
    lines[0] = json.dumps({"manifest_version": 1, "root": ".", "counts": {"train": 5}})
    path.write_text("\n".join(lines))
    with pytest.raises(ManifestInvalid):
        ds.load_manifest(path)


def test_mask_io(tmp_path):
    m = np.zeros((6, 5), dtype=np.uint8)
    m[1:3] = 1
    ds.write_mask(m, tmp_path / "m.png")
    assert np.array_equal(ds.read_mask(tmp_path / "m.png"), m)
    Image.fromarray(np.full((4, 4), 128, dtype=np.uint8)).save(tmp_path / "bad.png")
    with pytest.raises(InvalidInput):
        ds.read_mask(tmp_path / "bad.png")


def test_image_cache(tmp_path, monkeypatch):
    px = np.random.default_rng(0).integers(0, 256, (9, 7, 3), dtype=np.uint8)
    Image.fromarray(px).save(tmp_path / "x.png")
    monkeypatch.setenv("OCLF_CACHE_DIR", str(tmp_path / "cache"))
    assert np.array_equal(ds.read_image(tmp_path / "x.png"), px)
    assert len(list((tmp_path / "cache").glob("*.npy"))) == 1
    assert np.array_equal(ds.read_image(tmp_path / "x.png"), px)


# --- synthetic generator ----------------------------------------------------


def test_synth_without_occlusion(tmp_path):
    cfg = ds.SynthConfig(n_train=50, n_val=2, n_test=2, image_side=48, occlusion_probability=0.0, seed=7)
    m = ds.generate_synthetic(cfg, tmp_path)
    assert len(m.split_records("train")) == 100
    assert all(r.occlusion_mask is None for r in m.records)
    assert mt.occlusion_ratio(m, "train") == 0.0


def test_synth_is_deterministic(tmp_path):
    cfg = ds.SynthConfig(n_train=3, n_val=1, n_test=1, image_side=64, seed=11)
    a = ds.generate_synthetic(cfg, tmp_path / "a")
    b = ds.generate_synthetic(cfg, tmp_path / "b")
    assert a.fingerprint == b.fingerprint
    for r in a.records:
        assert (tmp_path / "a" / r.path).read_bytes() == (tmp_path / "b" / r.path).read_bytes()
    c = ds.generate_synthetic(ds.SynthConfig(n_train=3, n_val=1, n_test=1, image_side=64, seed=12), tmp_path / "c")
    assert c.fingerprint != a.fingerprint


def test_synth_reload_matches(synth_small):
    again = ds.load_manifest(synth_small.root / "manifest.jsonl")
    assert again.fingerprint == synth_small.fingerprint
    assert again.splits() == {"train": 20, "val": 10, "test": 10}


def test_synth_occlusion_rate_concentrates():
    cfg = ds.SynthConfig(image_side=48, occlusion_probability=0.3, seed=0)
    hits = sum(ds.synth_image(cfg, "train", lab, i)[3] is not None for lab in ds.LABELS for i in range(250))
    assert abs(hits / 500 - 0.3) <= 0.05


def test_synth_masks_consistent(synth_small):
    masked = [r for r in synth_small.records if r.occlusion_mask]
    assert masked
    for r in masked:
        m = ds.read_mask(synth_small.root / r.occlusion_mask)
        assert m.shape == ds.read_image(synth_small.root / r.path).shape[:2]
        assert m.any() and r.occluded


def test_synth_landmarks_support_patching(synth_small):
    from oclf.facepatch import detect_face, resize_to_canonical, semantic_patches

    for s in ds.split_view(synth_small, "val"):
        crop, _ = detect_face(s)
        assert len(semantic_patches(resize_to_canonical(crop, 256))) == 7


@pytest.mark.parametrize("kind", ["checkerboard", "ring-spectrum"])
def test_synth_highpass_separability(kind):
    cfg = ds.SynthConfig(image_side=96, artifact_kind=kind, occlusion_probability=0.3, seed=5)
    real = [ds.highpass_energy(ds.synth_image(cfg, "train", "real", i)[0]) for i in range(100)]
    fake = [ds.highpass_energy(ds.synth_image(cfg, "train", "fake", i)[0]) for i in range(100)]
    scores = np.array(real + fake)
    y = np.array([0] * 100 + [1] * 100)
    best = max(((scores > t) == y).mean() for t in np.unique(scores))
    assert best > 0.99


def test_synth_config_validation():
    with pytest.raises(InvalidInput):
        ds.SynthConfig(n_train=0)
    with pytest.raises(InvalidInput):
        ds.SynthConfig(occlusion_probability=1.5)
    with pytest.raises(InvalidInput):
        ds.SynthConfig(artifact_kind="stripes")


def test_synth_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IOError):
        ds.generate_synthetic(ds.SynthConfig(n_train=1, n_val=1, n_test=1, image_side=48), blocker / "sub")
