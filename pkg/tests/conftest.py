import numpy as np
import pytest

from oclf import datasets as ds
from oclf.facepatch import FaceLandmarks, ImageSample, OcclusionMask
from oclf.fusion import Models
from oclf.gramnet import HeadKind, build_gramnet, build_head, preset
from oclf.facepatch import PATCH_ORDER


def make_face(seed=0, side=128, label="real", mask=None, **kw):
    rng = np.random.default_rng(seed)
    img, pts, box, _ = ds.render_face(rng, side)
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return ImageSample(
        id=f"face{seed}",
        pixels=pixels,
        label=label,
        split="test",
        landmarks=FaceLandmarks(pts),
        occlusion=OcclusionMask(mask) if mask is not None else None,
        face_box=box,
        **kw,
    )


@pytest.fixture
def face():
    return make_face()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def untrained_models(seed=0):
    cfg = preset("toy")
    return Models(
        whole_model=build_gramnet(cfg, seed),
        whole_head=build_head(HeadKind.WHOLE_FACE, cfg.feature_dim, seed),
        patch_model=build_gramnet(cfg, seed + 1),
        patch_head=build_head(HeadKind.PER_PATCH, cfg.feature_dim, seed + 1),
        concat_head=build_head(
            HeadKind.CONCAT, cfg.feature_dim, seed + 2, part_keys=[p.value for p in PATCH_ORDER]
        ),
    )


@pytest.fixture
def toy_models():
    return untrained_models()


@pytest.fixture(scope="session")
def synth_small(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth_small")
    cfg = ds.SynthConfig(n_train=10, n_val=5, n_test=5, image_side=96, occlusion_probability=0.4, seed=3)
    return ds.generate_synthetic(cfg, out)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
