"""Face preprocessing: canonical resize, semantic and block patches, occlusion zeroing.

Every function here is pure. Images are ``H x W x 3`` uint8 arrays; boxes are
``(x0, y0, x1, y1)`` with exclusive upper bounds, in pixel units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np

from .errors import (
    DegenerateLandmarks,
    FaceNotFound,
    InvalidBlockGeometry,
    InvalidInput,
    InvalidLandmarks,
    MaskShapeMismatch,
    MissingAnnotation,
)
from .labels import BinaryLabel

Box = Tuple[int, int, int, int]

N_LANDMARKS = 68
DEFAULT_PAD = 0.15
PATCH_SIDE = 64
CANONICAL_SIDE = 256


class PatchName(str, Enum):
    # member order is the canonical concatenation order
    RIGHT_CHEEK = "right_cheek"
    LEFT_CHEEK = "left_cheek"
    MOUTH = "mouth"
    NOSE = "nose"
    CHIN = "chin"
    RIGHT_EYE = "right_eye"
    LEFT_EYE = "left_eye"


PATCH_ORDER = tuple(PatchName)


class PatchMode(str, Enum):
    SEMANTIC = "semantic"
    BLOCK = "block"


@dataclass(frozen=True)
class FaceLandmarks:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (N_LANDMARKS, 2):
            raise InvalidLandmarks(f"expected {N_LANDMARKS} (x, y) points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidLandmarks("landmarks must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def scaled(self, sx: float, sy: float) -> "FaceLandmarks":
        return FaceLandmarks(self.points * np.array([sx, sy]))

    def shifted(self, dx: float, dy: float) -> "FaceLandmarks":
        return FaceLandmarks(self.points + np.array([dx, dy]))

    def group(self, indices) -> np.ndarray:
        return self.points[list(indices)]


@dataclass(frozen=True)
class OcclusionMask:
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise InvalidInput(f"occlusion mask must be 2-D, got shape {m.shape}")
        if m.size and not np.isin(m, (0, 1)).all():
            raise InvalidInput("occlusion mask values must be 0 or 1")
        m = m.astype(np.uint8)
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @property
    def shape(self):
        return self.mask.shape

    @property
    def any(self) -> bool:
        return bool(self.mask.any())


@dataclass(frozen=True)
class ImageSample:
    id: str
    pixels: np.ndarray
    label: Optional[BinaryLabel] = None
    split: Optional[str] = None
    landmarks: Optional[FaceLandmarks] = None
    occlusion: Optional[OcclusionMask] = None
    occluded_flag: Optional[bool] = None
    face_box: Optional[Box] = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise InvalidInput(f"image {self.id!r}: expected H x W x 3 pixels, got shape {px.shape}")
        if px.dtype != np.uint8:
            if np.issubdtype(px.dtype, np.floating) and not np.all(np.isfinite(px)):
                raise InvalidInput(f"image {self.id!r}: non-finite intensities")
            if px.min() < 0 or px.max() > 255:
                raise InvalidInput(f"image {self.id!r}: intensities outside [0, 255]")
            px = px.astype(np.uint8)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        if self.label is not None:
            object.__setattr__(self, "label", BinaryLabel.parse(self.label))
        if self.occlusion is not None and self.occlusion.shape != px.shape[:2]:
            raise MaskShapeMismatch(
                f"image {self.id!r}: mask {self.occlusion.shape} vs image {px.shape[:2]}"
            )

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def is_occluded(self) -> bool:
        if self.occlusion is not None and self.occlusion.any:
            return True
        return bool(self.occluded_flag)


@dataclass(frozen=True)
class Patch:
    key: Union[PatchName, Tuple[int, int]]
    pixels: np.ndarray
    source_box: Box


@dataclass(frozen=True)
class PatchSet:
    mode: PatchMode
    patches: Tuple[Patch, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)

    @property
    def keys(self):
        return [p.key for p in self.patches]


# --- resizing ---------------------------------------------------------------


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centres, no antialiasing (align_corners=False semantics)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_pixels(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an ``H x W x C`` array, returning uint8."""
    in_h, in_w = pixels.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return np.array(pixels, dtype=np.uint8, copy=True)
    y0, y1, wy = _bilinear_axis(in_h, out_h)
    x0, x1, wx = _bilinear_axis(in_w, out_w)
    img = pixels.astype(np.float64)
    wx = wx[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    out = top * (1 - wy[:, None, None]) + bot * wy[:, None, None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def resize_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize, so a binary mask stays binary."""
    in_h, in_w = mask.shape
    ys = np.minimum(((np.arange(out_h) + 0.5) * in_h / out_h).astype(np.int64), in_h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * in_w / out_w).astype(np.int64), in_w - 1)
    return mask[ys][:, xs]


def resize_to_canonical(image: ImageSample, side: int = CANONICAL_SIDE) -> ImageSample:
    if side < 8:
        raise InvalidInput(f"canonical side must be >= 8, got {side}")
    if image.pixels.size == 0:
        raise InvalidInput("empty image")
    sy, sx = side / image.height, side / image.width
    landmarks = image.landmarks.scaled(sx, sy) if image.landmarks is not None else None
    occlusion = None
    if image.occlusion is not None:
        occlusion = OcclusionMask(resize_mask(image.occlusion.mask, side, side))
    face_box = None
    if image.face_box is not None:
        x0, y0, x1, y1 = image.face_box
        face_box = (
            int(math.floor(x0 * sx)),
            int(math.floor(y0 * sy)),
            int(math.ceil(x1 * sx)),
            int(math.ceil(y1 * sy)),
        )
    return replace(
        image,
        pixels=resize_pixels(image.pixels, side, side),
        landmarks=landmarks,
        occlusion=occlusion,
        face_box=face_box,
    )


# --- patches ----------------------------------------------------------------


def block_patches(image: ImageSample, block_h: int, block_w: int, out_side: Optional[int] = None) -> PatchSet:
    """Tile a square canonical image into ``block_h x block_w`` blocks, row-major.

    ``out_side`` resizes every block to a square model input; by default the
    raw block pixels are kept.
    """
    h, w = image.height, image.width
    if h != w:
        raise InvalidBlockGeometry(f"image must be square, got {h}x{w}")
    if block_h < 1 or block_w < 1 or h % block_h or w % block_w:
        raise InvalidBlockGeometry(f"side {h} not divisible into {block_h}x{block_w} blocks")
    patches = []
    for r in range(h // block_h):
        for c in range(w // block_w):
            x0, y0 = c * block_w, r * block_h
            px = image.pixels[y0:y0 + block_h, x0:x0 + block_w]
            if out_side is not None:
                px = resize_pixels(px, out_side, out_side)
            else:
                px = px.copy()
            patches.append(Patch(key=(r, c), pixels=px, source_box=(x0, y0, x0 + block_w, y0 + block_h)))
    return PatchSet(PatchMode.BLOCK, tuple(patches))


# 68-point groups; "right" is the subject's right, which sits on the image left
RIGHT_EYE_IDX = range(36, 42)
LEFT_EYE_IDX = range(42, 48)
NOSE_IDX = range(27, 36)
MOUTH_IDX = range(48, 68)
CHIN_JAW_IDX = range(6, 11)
RIGHT_JAW_IDX = range(1, 6)
LEFT_JAW_IDX = range(11, 16)


def _bbox(pts: np.ndarray):
    return (pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())


def landmark_boxes(landmarks: FaceLandmarks) -> Dict[PatchName, Tuple[float, float, float, float]]:
    """Tight float boxes for the seven facial regions, before padding."""
    g = landmarks.group
    nose = _bbox(g(NOSE_IDX))
    mouth = _bbox(g(MOUTH_IDX))
    right_eye = _bbox(g(RIGHT_EYE_IDX))
    left_eye = _bbox(g(LEFT_EYE_IDX))
    mouth_pts = g(MOUTH_IDX)
    lowest_mouth = mouth_pts[np.argmax(mouth_pts[:, 1])][None, :]
    chin = _bbox(np.vstack([g(CHIN_JAW_IDX), lowest_mouth]))
    right_jaw = g(RIGHT_JAW_IDX)
    left_jaw = g(LEFT_JAW_IDX)
    right_cheek = (right_jaw[:, 0].min(), right_eye[3], nose[0], mouth[1])
    left_cheek = (nose[2], left_eye[3], left_jaw[:, 0].max(), mouth[1])
    return {
        PatchName.RIGHT_CHEEK: right_cheek,
        PatchName.LEFT_CHEEK: left_cheek,
        PatchName.MOUTH: mouth,
        PatchName.NOSE: nose,
        PatchName.CHIN: chin,
        PatchName.RIGHT_EYE: right_eye,
        PatchName.LEFT_EYE: left_eye,
    }


def semantic_boxes(landmarks: FaceLandmarks, pad: float = DEFAULT_PAD):
    """Padded float boxes per patch name, not yet clamped to the image."""
    if not 0.0 <= pad <= 0.5:
        raise InvalidInput(f"pad must be in [0, 0.5], got {pad}")
    out = {}
    for name, (x0, y0, x1, y1) in landmark_boxes(landmarks).items():
        bw, bh = x1 - x0, y1 - y0
        if bw <= 0 or bh <= 0:
            raise DegenerateLandmarks(f"{name.value}: zero-area landmark box")
        out[name] = (x0 - pad * bw, y0 - pad * bh, x1 + pad * bw, y1 + pad * bh)
    return out


def _clamp_box(box, width: int, height: int) -> Box:
    x0, y0, x1, y1 = box
    ix0 = min(max(int(math.floor(x0)), 0), width - 1)
    iy0 = min(max(int(math.floor(y0)), 0), height - 1)
    ix1 = max(min(int(math.ceil(x1)), width), ix0 + 1)
    iy1 = max(min(int(math.ceil(y1)), height), iy0 + 1)
    return ix0, iy0, ix1, iy1


def semantic_patches(
    image: ImageSample,
    landmarks: Optional[FaceLandmarks] = None,
    pad: float = DEFAULT_PAD,
    out_side: int = PATCH_SIDE,
) -> PatchSet:
    landmarks = landmarks if landmarks is not None else image.landmarks
    if landmarks is None:
        raise MissingAnnotation(f"image {image.id!r} has no landmarks")
    pts = landmarks.points
    if (pts[:, 0] < 0).any() or (pts[:, 1] < 0).any() or (pts[:, 0] > image.width).any() or (
        pts[:, 1] > image.height
    ).any():
        raise InvalidLandmarks(f"image {image.id!r}: landmarks outside {image.width}x{image.height}")
    patches = []
    for name, box in semantic_boxes(landmarks, pad).items():
        x0, y0, x1, y1 = _clamp_box(box, image.width, image.height)
        px = resize_pixels(image.pixels[y0:y1, x0:x1], out_side, out_side)
        patches.append(Patch(key=name, pixels=px, source_box=(x0, y0, x1, y1)))
    return PatchSet(PatchMode.SEMANTIC, tuple(patches))


# --- occlusion --------------------------------------------------------------


def apply_occlusion(image: ImageSample, mask: Optional[OcclusionMask] = None) -> ImageSample:
    """Zero every channel where the mask is 1; leave other pixels untouched."""
    mask = mask if mask is not None else image.occlusion
    if mask is None:
        return image
    if mask.shape != image.pixels.shape[:2]:
        raise MaskShapeMismatch(f"mask {mask.shape} vs image {image.pixels.shape[:2]}")
    px = image.pixels.copy()
    px[mask.mask.astype(bool)] = 0
    return replace(image, pixels=px, occlusion=mask)


def patch_occlusion_fraction(patch: Patch, mask: OcclusionMask) -> float:
    x0, y0, x1, y1 = patch.source_box
    h, w = mask.shape
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h or x1 <= x0 or y1 <= y0:
        raise InvalidInput(f"box {patch.source_box} outside mask {w}x{h}")
    region = mask.mask[y0:y1, x0:x1]
    return float(region.sum()) / region.size


# --- providers --------------------------------------------------------------

# A face provider maps an image to (face box, landmarks in image coordinates),
# or None when no face is found. An occlusion provider maps an image to a mask.
FaceProvider = Callable[[ImageSample], Optional[Tuple[Box, FaceLandmarks]]]
OcclusionProvider = Callable[[ImageSample], OcclusionMask]


def manifest_provider(image: ImageSample):
    if image.landmarks is None:
        raise MissingAnnotation(f"image {image.id!r} has no landmark annotation")
    box = image.face_box if image.face_box is not None else (0, 0, image.width, image.height)
    return tuple(int(v) for v in box), image.landmarks


FACE_PROVIDERS: Dict[str, FaceProvider] = {"manifest": manifest_provider}


def register_face_provider(name: str, provider: FaceProvider) -> None:
    FACE_PROVIDERS[name] = provider


def detect_face(image: ImageSample, provider: Union[str, FaceProvider] = "manifest"):
    """Crop the face found by ``provider``.

    Returns ``(crop, landmarks)``; the crop carries landmarks and occlusion mask
    re-expressed in crop coordinates.
    """
    if image.pixels.size == 0:
        raise InvalidInput("empty image")
    if isinstance(provider, str):
        try:
            provider = FACE_PROVIDERS[provider]
        except KeyError:
            raise InvalidInput(f"unknown face provider {provider!r}") from None
    found = provider(image)
    if found is None:
        raise FaceNotFound(f"no face in image {image.id!r}")
    box, landmarks = found
    x0, y0, x1, y1 = _clamp_box(box, image.width, image.height)
    if x1 - x0 < 1 or y1 - y0 < 1:
        raise FaceNotFound(f"empty face box {box} in image {image.id!r}")
    local = landmarks.shifted(-x0, -y0)
    pts = np.clip(local.points, [0, 0], [x1 - x0, y1 - y0])
    local = FaceLandmarks(pts)
    occlusion = None
    if image.occlusion is not None:
        occlusion = OcclusionMask(image.occlusion.mask[y0:y1, x0:x1])
    crop = replace(
        image,
        pixels=image.pixels[y0:y1, x0:x1].copy(),
        landmarks=local,
        occlusion=occlusion,
        face_box=None,
    )
    return crop, local


def patch_set(
    canonical: ImageSample,
    mode: PatchMode,
    block: Tuple[int, int] = (64, 64),
    pad: float = DEFAULT_PAD,
    out_side: int = PATCH_SIDE,
) -> PatchSet:
    if PatchMode(mode) is PatchMode.SEMANTIC:
        return semantic_patches(canonical, canonical.landmarks, pad=pad, out_side=out_side)
    return block_patches(canonical, block[0], block[1], out_side=out_side)
