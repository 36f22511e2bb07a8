import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oclf import facepatch as fp
from oclf.errors import (
    DegenerateLandmarks,
    FaceNotFound,
    InvalidBlockGeometry,
    InvalidInput,
    InvalidLandmarks,
    MaskShapeMismatch,
    MissingAnnotation,
)
from oclf.facepatch import FaceLandmarks, ImageSample, OcclusionMask, PatchName

from conftest import make_face


def sample(px, **kw):
    return ImageSample(id="s", pixels=px, **kw)


def rand_image(rng, h, w):
    return rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)


# --- types ------------------------------------------------------------------


def test_patch_name_has_seven_members():
    assert len(PatchName) == 7
    assert fp.PATCH_ORDER[0] is PatchName.RIGHT_CHEEK


def test_image_sample_rejects_bad_values():
    with pytest.raises(InvalidInput):
        sample(np.full((4, 4, 3), 300))
    with pytest.raises(InvalidInput):
        sample(np.zeros((0, 4, 3), dtype=np.uint8))
    with pytest.raises(MaskShapeMismatch):
        sample(np.zeros((4, 4, 3), dtype=np.uint8), occlusion=OcclusionMask(np.zeros((4, 5))))


def test_landmarks_need_68_points():
    with pytest.raises(InvalidLandmarks):
        FaceLandmarks(np.zeros((67, 2)))


def test_mask_must_be_binary():
    with pytest.raises(InvalidInput):
        OcclusionMask(np.full((3, 3), 2))


# --- resize -----------------------------------------------------------------


def test_resize_1024_to_256(rng):
    out = fp.resize_to_canonical(sample(rand_image(rng, 1024, 1024)), 256)
    assert out.pixels.shape == (256, 256, 3)


def test_resize_identity(rng):
    px = rand_image(rng, 256, 256)
    out = fp.resize_to_canonical(sample(px), 256)
    assert np.array_equal(out.pixels, px)


def test_resize_rescales_landmarks_and_mask(rng):
    pts = np.full((68, 2), 10.0)
    pts[0] = (50, 100)
    mask = np.zeros((200, 100), dtype=np.uint8)
    mask[:100] = 1
    s = sample(rand_image(rng, 200, 100), landmarks=FaceLandmarks(pts), occlusion=OcclusionMask(mask), label="fake", split="val")
    out = fp.resize_to_canonical(s, 256)
    assert np.allclose(out.landmarks.points[0], (128, 128))
    assert out.occlusion.shape == (256, 256)
    assert out.occlusion.mask[:128].all() and not out.occlusion.mask[128:].any()
    assert out.label == s.label and out.split == "val"


@pytest.mark.parametrize("shape", [(37, 53, 20, 31), (64, 64, 256, 256), (100, 200, 64, 64), (5, 9, 17, 3)])
def test_bilinear_matches_half_pixel_reference(shape, rng):
    h, w, oh, ow = shape
    px = rand_image(rng, h, w)
    ref = F.interpolate(
        torch.from_numpy(px.astype(np.float64)).permute(2, 0, 1)[None],
        size=(oh, ow),
        mode="bilinear",
        align_corners=False,
        antialias=False,
    )[0].permute(1, 2, 0).numpy()
    got = fp.resize_pixels(px, oh, ow).astype(np.float64)
    # a correct rounding of the reference everywhere; exact .5 ties may go either way
    assert np.abs(got - ref).max() <= 0.5 + 1e-9


def test_resize_rejects_small_side(rng):
    with pytest.raises(InvalidInput):
        fp.resize_to_canonical(sample(rand_image(rng, 10, 10)), 4)


@settings(max_examples=25, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 40), st.integers(1, 40), st.just(3))), st.integers(8, 48))
def test_resize_is_deterministic(px, side):
    a = fp.resize_to_canonical(sample(px), side).pixels
    b = fp.resize_to_canonical(sample(px.copy()), side).pixels
    assert a.shape == (side, side, 3)
    assert np.array_equal(a, b)


# --- blocks -----------------------------------------------------------------


def coverage(patches, side):
    cover = np.zeros((side, side), dtype=int)
    for p in patches:
        x0, y0, x1, y1 = p.source_box
        cover[y0:y1, x0:x1] += 1
    return cover


@pytest.mark.parametrize("bh,bw,n", [(64, 64, 16), (64, 128, 8), (256, 256, 1), (128, 64, 8)])
def test_block_partition_exact(bh, bw, n, rng):
    s = sample(rand_image(rng, 256, 256))
    ps = fp.block_patches(s, bh, bw)
    assert len(ps) == n
    assert (coverage(ps, 256) == 1).all()
    assert ps.keys == [(r, c) for r in range(256 // bh) for c in range(256 // bw)]
    for p in ps:
        x0, y0, x1, y1 = p.source_box
        assert np.array_equal(p.pixels, s.pixels[y0:y1, x0:x1])


def test_whole_image_block_equals_input(rng):
    s = sample(rand_image(rng, 256, 256))
    (p,) = fp.block_patches(s, 256, 256)
    assert np.array_equal(p.pixels, s.pixels)


def test_block_geometry_errors(rng):
    s = sample(rand_image(rng, 256, 256))
    with pytest.raises(InvalidBlockGeometry):
        fp.block_patches(s, 60, 64)
    with pytest.raises(InvalidBlockGeometry):
        fp.block_patches(sample(rand_image(rng, 256, 128)), 64, 64)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([1, 2, 4, 8, 16]), st.sampled_from([1, 2, 4, 8, 16]))
def test_block_partition_property(nh, nw):
    side = 32
    s = sample(np.zeros((side, side, 3), dtype=np.uint8))
    ps = fp.block_patches(s, side // nh, side // nw)
    assert len(ps) == nh * nw
    assert (coverage(ps, side) == 1).all()


# --- semantic ---------------------------------------------------------------


def test_semantic_patches_on_fixture(face):
    crop, _ = fp.detect_face(face)
    canon = fp.resize_to_canonical(crop, 256)
    ps = fp.semantic_patches(canon, canon.landmarks)
    assert len(ps) == 7 and set(ps.keys) == set(PatchName)
    assert ps.keys == list(fp.PATCH_ORDER)
    for p in ps:
        x0, y0, x1, y1 = p.source_box
        assert 0 <= x0 < x1 <= 256 and 0 <= y0 < y1 <= 256
        assert p.pixels.shape == (64, 64, 3)
    boxes = {p.key: p.source_box for p in ps}
    pts = canon.landmarks.points

    def inside(box, idx):
        x0, y0, x1, y1 = box
        g = pts[list(idx)]
        return (g[:, 0] >= x0).all() and (g[:, 0] <= x1).all() and (g[:, 1] >= y0).all() and (g[:, 1] <= y1).all()

    assert inside(boxes[PatchName.RIGHT_EYE], range(36, 42))
    assert inside(boxes[PatchName.LEFT_EYE], range(42, 48))
    assert inside(boxes[PatchName.MOUTH], range(48, 68))
    assert inside(boxes[PatchName.NOSE], range(27, 36))
    # right eye sits on the image left, left eye on the image right
    assert boxes[PatchName.RIGHT_EYE][0] < boxes[PatchName.LEFT_EYE][0]
    assert boxes[PatchName.RIGHT_CHEEK][0] < boxes[PatchName.LEFT_CHEEK][0]
    # chin lies below the mouth centre
    assert boxes[PatchName.CHIN][3] >= boxes[PatchName.MOUTH][3]


def test_cheek_box_follows_jaw_nose_and_eye_mouth():
    pts = make_face().landmarks.points
    raw = fp.landmark_boxes(FaceLandmarks(pts))
    x0, y0, x1, y1 = raw[PatchName.RIGHT_CHEEK]
    assert x0 == pytest.approx(pts[1:6, 0].min())
    assert x1 == pytest.approx(pts[27:36, 0].min())
    assert y0 == pytest.approx(pts[36:42, 1].max())
    assert y1 == pytest.approx(pts[48:68, 1].min())
    lx0, _, lx1, _ = raw[PatchName.LEFT_CHEEK]
    assert lx0 == pytest.approx(pts[27:36, 0].max())
    assert lx1 == pytest.approx(pts[11:16, 0].max())


def test_semantic_degenerate_landmarks():
    s = sample(np.zeros((64, 64, 3), dtype=np.uint8))
    with pytest.raises(DegenerateLandmarks):
        fp.semantic_patches(s, FaceLandmarks(np.full((68, 2), 30.0)))


def test_semantic_landmarks_outside_image(face):
    pts = face.landmarks.points.copy()
    pts[0] = (-5, 10)
    with pytest.raises(InvalidLandmarks):
        fp.semantic_patches(face, FaceLandmarks(pts))


def test_semantic_missing_landmarks():
    with pytest.raises(MissingAnnotation):
        fp.semantic_patches(sample(np.zeros((8, 8, 3), dtype=np.uint8)))


def test_pad_range():
    with pytest.raises(InvalidInput):
        fp.semantic_boxes(make_face().landmarks, pad=0.6)


def test_padding_strictly_expands(face):
    b0 = fp.semantic_boxes(face.landmarks, pad=0.0)
    b1 = fp.semantic_boxes(face.landmarks, pad=0.15)
    for k in PatchName:
        a, b = b0[k], b1[k]
        assert b[0] < a[0] and b[1] < a[1] and b[2] > a[2] and b[3] > a[3]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.5))
def test_semantic_cardinality_property(seed, pad):
    s = make_face(seed=seed, side=96)
    ps = fp.semantic_patches(s, pad=pad, out_side=16)
    assert len(ps) == 7 and len(set(ps.keys)) == 7
    for p in ps:
        x0, y0, x1, y1 = p.source_box
        assert 0 <= x0 < x1 <= 96 and 0 <= y0 < y1 <= 96


# --- occlusion --------------------------------------------------------------


def test_occlusion_noop_and_full(rng):
    s = sample(rand_image(rng, 32, 32))
    assert np.array_equal(fp.apply_occlusion(s, OcclusionMask(np.zeros((32, 32)))).pixels, s.pixels)
    assert not fp.apply_occlusion(s, OcclusionMask(np.ones((32, 32)))).pixels.any()


def test_occlusion_rows_and_idempotence(rng):
    s = sample(rand_image(rng, 64, 64))
    m = np.zeros((64, 64), dtype=np.uint8)
    m[:32] = 1
    mask = OcclusionMask(m)
    once = fp.apply_occlusion(s, mask)
    assert not once.pixels[:32].any()
    assert np.array_equal(once.pixels[32:], s.pixels[32:])
    assert np.array_equal(fp.apply_occlusion(once, mask).pixels, once.pixels)


def test_occlusion_shape_mismatch(rng):
    with pytest.raises(MaskShapeMismatch):
        fp.apply_occlusion(sample(rand_image(rng, 8, 8)), OcclusionMask(np.zeros((8, 9))))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 24), st.integers(1, 24), st.integers(0, 2**32 - 1))
def test_occlusion_locality_and_idempotence(h, w, seed):
    r = np.random.default_rng(seed)
    s = sample(rand_image(r, h, w))
    m = OcclusionMask(r.integers(0, 2, size=(h, w)))
    once = fp.apply_occlusion(s, m)
    keep = m.mask == 0
    assert np.array_equal(once.pixels[keep], s.pixels[keep])
    assert not once.pixels[~keep].any()
    assert np.array_equal(fp.apply_occlusion(once, m).pixels, once.pixels)


def test_patch_occlusion_fraction():
    p = fp.Patch(key=(0, 0), pixels=np.zeros((64, 64, 3), dtype=np.uint8), source_box=(0, 0, 64, 64))
    assert fp.patch_occlusion_fraction(p, OcclusionMask(np.zeros((128, 128)))) == 0.0
    assert fp.patch_occlusion_fraction(p, OcclusionMask(np.ones((128, 128)))) == 1.0
    m = np.zeros((128, 128), dtype=np.uint8)
    m[:16, :64] = 1  # 1024 pixels inside the box
    m[100:, 100:] = 1  # outside the box
    assert fp.patch_occlusion_fraction(p, OcclusionMask(m)) == 0.25
    with pytest.raises(InvalidInput):
        fp.patch_occlusion_fraction(p, OcclusionMask(np.zeros((32, 32))))


# --- providers --------------------------------------------------------------


def test_manifest_provider_passes_annotations_through(face):
    crop, lm = fp.detect_face(face, "manifest")
    x0, y0, x1, y1 = face.face_box
    assert np.array_equal(crop.pixels, face.pixels[y0:y1, x0:x1])
    assert np.allclose(lm.points, np.clip(face.landmarks.points - (x0, y0), 0, (x1 - x0, y1 - y0)))


def test_manifest_provider_without_landmarks():
    with pytest.raises(MissingAnnotation):
        fp.detect_face(sample(np.zeros((8, 8, 3), dtype=np.uint8)))


def test_external_provider_stub(face):
    box = (10, 12, 100, 110)
    stub = lambda img: (box, face.landmarks)  # noqa: E731
    fp.register_face_provider("stub", stub)
    crop, _ = fp.detect_face(face, "stub")
    assert np.array_equal(crop.pixels, face.pixels[12:110, 10:100])
    with pytest.raises(FaceNotFound):
        fp.detect_face(face, lambda img: None)


def test_detect_face_crops_mask():
    m = np.zeros((128, 128), dtype=np.uint8)
    m[50:60, 50:60] = 1
    s = make_face(mask=m)
    crop, _ = fp.detect_face(s)
    x0, y0, x1, y1 = s.face_box
    assert np.array_equal(crop.occlusion.mask, m[y0:y1, x0:x1])
