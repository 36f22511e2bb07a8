"""JSON-lines dataset manifests, split views, and a synthetic face generator.

Manifest layout::

    {"manifest_version": 1, "root": "<dir>"}
    {"path": "train/real_0000.png", "label": "real", "split": "train", ...}
    ...

``root`` is resolved relative to the manifest file when it is not absolute.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import InvalidInput, ManifestInvalid, ManifestNotFound, SplitMissing
from .facepatch import FaceLandmarks, ImageSample, OcclusionMask
from .labels import BinaryLabel

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
LABELS = ("real", "fake")
_RECORD_KEYS = {"path", "label", "split", "landmarks", "occlusion_mask", "occluded", "face_box"}


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: str
    split: str
    landmarks: Optional[Tuple[Tuple[float, float], ...]] = None
    occlusion_mask: Optional[str] = None
    occluded: Optional[bool] = None
    face_box: Optional[Tuple[int, int, int, int]] = None

    def to_dict(self) -> dict:
        d = {"path": self.path, "label": self.label, "split": self.split}
        if self.landmarks is not None:
            d["landmarks"] = [list(p) for p in self.landmarks]
        if self.occlusion_mask is not None:
            d["occlusion_mask"] = self.occlusion_mask
        if self.occluded is not None:
            d["occluded"] = self.occluded
        if self.face_box is not None:
            d["face_box"] = list(self.face_box)
        return d

    @classmethod
    def from_dict(cls, d: dict, line: Optional[int] = None) -> "ManifestRecord":
        if not isinstance(d, dict):
            raise ManifestInvalid("record must be a JSON object", line)
        unknown = set(d) - _RECORD_KEYS
        if unknown:
            raise ManifestInvalid(f"unknown fields {sorted(unknown)}", line)
        for key in ("path", "label", "split"):
            if not isinstance(d.get(key), str) or not d[key]:
                raise ManifestInvalid(f"missing or non-string {key!r}", line)
        if d["label"] not in LABELS:
            raise ManifestInvalid(f"label must be one of {LABELS}, got {d['label']!r}", line)
        if d["split"] not in SPLITS:
            raise ManifestInvalid(f"split must be one of {SPLITS}, got {d['split']!r}", line)
        landmarks = d.get("landmarks")
        if landmarks is not None:
            try:
                pts = tuple((float(x), float(y)) for x, y in landmarks)
            except (TypeError, ValueError):
                raise ManifestInvalid("landmarks must be [x, y] pairs", line) from None
            if len(pts) != 68:
                raise ManifestInvalid(f"expected 68 landmark pairs, got {len(pts)}", line)
            landmarks = pts
        occluded = d.get("occluded")
        if occluded is not None and not isinstance(occluded, bool):
            raise ManifestInvalid("occluded must be a boolean", line)
        box = d.get("face_box")
        if box is not None:
            if not isinstance(box, list) or len(box) != 4:
                raise ManifestInvalid("face_box must be [x0, y0, x1, y1]", line)
            box = tuple(int(v) for v in box)
            if box[2] <= box[0] or box[3] <= box[1]:
                raise ManifestInvalid("face_box must have positive area", line)
        mask = d.get("occlusion_mask")
        if mask is not None and not isinstance(mask, str):
            raise ManifestInvalid("occlusion_mask must be a path string", line)
        return cls(d["path"], d["label"], d["split"], landmarks, mask, occluded, box)


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _cache_dir() -> Optional[Path]:
    d = os.environ.get("OCLF_CACHE_DIR")
    return Path(d) if d else None


def read_image(path) -> np.ndarray:
    """Decode PNG/JPEG to ``H x W x 3`` uint8, via ``$OCLF_CACHE_DIR`` when set."""
    path = Path(path)
    cache = _cache_dir()
    key = None
    if cache is not None:
        st = path.stat()
        key = hashlib.sha1(f"{path.resolve()}:{st.st_mtime_ns}:{st.st_size}".encode()).hexdigest()
        hit = cache / f"{key}.npy"
        if hit.exists():
            return np.load(hit)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    if key is not None:
        cache.mkdir(parents=True, exist_ok=True)
        np.save(cache / f"{key}.npy", arr)
    return arr


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    if not np.isin(arr, (0, 255)).all():
        raise InvalidInput(f"mask {path} must contain only 0 and 255")
    return (arr == 255).astype(np.uint8)


def write_mask(mask: np.ndarray, path) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


@dataclass
class DatasetManifest:
    root: Path
    records: List[ManifestRecord]
    version: int = MANIFEST_VERSION
    counts: Optional[Dict[str, int]] = None
    _mask_cache: Dict[str, bool] = field(default_factory=dict, repr=False, compare=False)

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(_canonical({"manifest_version": self.version}).encode())
        for r in self.records:
            h.update(b"\n")
            h.update(_canonical(r.to_dict()).encode())
        return h.hexdigest()

    def splits(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for r in self.records:
            out[r.split] = out.get(r.split, 0) + 1
        return out

    def split_records(self, split: str) -> List[ManifestRecord]:
        recs = [r for r in self.records if r.split == split]
        if not recs:
            raise SplitMissing(f"split {split!r} is absent or empty")
        return recs

    def record_is_occluded(self, rec: ManifestRecord) -> bool:
        if rec.occluded:
            return True
        if rec.occlusion_mask is None:
            return False
        if rec.occlusion_mask not in self._mask_cache:
            self._mask_cache[rec.occlusion_mask] = bool(read_mask(self.root / rec.occlusion_mask).any())
        return self._mask_cache[rec.occlusion_mask]

    def load_sample(self, rec: ManifestRecord) -> ImageSample:
        pixels = read_image(self.root / rec.path)
        mask = None
        if rec.occlusion_mask is not None:
            m = read_mask(self.root / rec.occlusion_mask)
            if m.shape != pixels.shape[:2]:
                raise ManifestInvalid(f"{rec.occlusion_mask}: mask {m.shape} vs image {pixels.shape[:2]}")
            mask = OcclusionMask(m)
        return ImageSample(
            id=rec.path,
            pixels=pixels,
            label=BinaryLabel(rec.label),
            split=rec.split,
            landmarks=FaceLandmarks(np.array(rec.landmarks)) if rec.landmarks is not None else None,
            occlusion=mask,
            occluded_flag=rec.occluded,
            face_box=rec.face_box,
        )


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestNotFound(f"manifest not found: {path}")
    lines = path.read_text().splitlines()
    if not lines:
        raise ManifestInvalid("empty manifest", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestInvalid(f"bad header: {exc}", 1) from None
    if not isinstance(header, dict) or "manifest_version" not in header:
        raise ManifestInvalid("first line must be a header with manifest_version", 1)
    if header["manifest_version"] != MANIFEST_VERSION:
        raise ManifestInvalid(f"unsupported manifest_version {header['manifest_version']}", 1)
    root = Path(header.get("root", "."))
    if not root.is_absolute():
        root = path.parent / root
    records, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestInvalid(f"bad JSON: {exc}", lineno) from None
        rec = ManifestRecord.from_dict(obj, lineno)
        if rec.path in seen:
            raise ManifestInvalid(f"duplicate path {rec.path!r}", lineno)
        seen.add(rec.path)
        if not (root / rec.path).is_file():
            raise ManifestInvalid(f"image not found: {rec.path}", lineno)
        if rec.occlusion_mask is not None and not (root / rec.occlusion_mask).is_file():
            raise ManifestInvalid(f"mask not found: {rec.occlusion_mask}", lineno)
        records.append(rec)
    manifest = DatasetManifest(root=root, records=records, counts=header.get("counts"))
    if manifest.counts:
        actual = manifest.splits()
        for split, n in manifest.counts.items():
            if actual.get(split, 0) != n:
                raise ManifestInvalid(f"header expects {n} {split} records, found {actual.get(split, 0)}", 1)
    return manifest


def save_manifest(manifest: DatasetManifest, path, root: Optional[str] = None) -> Path:
    path = Path(path)
    header = {"manifest_version": manifest.version, "root": root if root is not None else str(manifest.root)}
    if manifest.counts:
        header["counts"] = manifest.counts
    lines = [_canonical(header)] + [_canonical(r.to_dict()) for r in manifest.records]
    path.write_text("\n".join(lines) + "\n")
    return path


def split_view(manifest: DatasetManifest, split: str) -> List[ImageSample]:
    return [manifest.load_sample(r) for r in manifest.split_records(split)]


# --- synthetic data ---------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Counts are per class and split: defaults give 400 / 100 / 100 images."""

    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    image_side: int = 128
    artifact_kind: str = "checkerboard"
    artifact_strength: float = 10.0
    occlusion_probability: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise InvalidInput("per-class split counts must be >= 1")
        if not 0.0 <= self.occlusion_probability <= 1.0:
            raise InvalidInput("occlusion_probability must be in [0, 1]")
        if self.artifact_kind not in ("checkerboard", "ring-spectrum"):
            raise InvalidInput(f"unknown artifact_kind {self.artifact_kind!r}")
        if self.image_side < 48:
            raise InvalidInput("image_side must be >= 48")

    def counts(self) -> Dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}


def _ellipse(cx, cy, rx, ry, n, start=0.0):
    t = start + np.arange(n) * 2 * np.pi / n
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def schematic_landmarks(cx, cy, a, b) -> np.ndarray:
    """68 points for a schematic face centred at (cx, cy) with half-axes (a, b)."""
    pts = np.zeros((68, 2))
    t = np.linspace(np.pi - 0.15, 0.15, 17)
    pts[0:17] = np.stack([cx + a * np.cos(t), cy + b * np.sin(t)], axis=1)
    eye_dx, eye_y, eye_rx, eye_ry = 0.38 * a, cy - 0.25 * b, 0.18 * a, 0.08 * b
    for start, sign in ((17, -1), (22, 1)):
        xs = cx + sign * eye_dx + np.linspace(-1.1, 1.1, 5) * eye_rx * (-sign)
        ys = eye_y - 0.16 * b - 0.03 * b * np.cos(np.linspace(-1.2, 1.2, 5))
        pts[start:start + 5] = np.stack([xs, ys], axis=1)
    pts[27:31] = np.stack([np.full(4, cx), np.linspace(cy - 0.2 * b, cy + 0.12 * b, 4)], axis=1)
    pts[31:36] = np.stack([np.linspace(cx - 0.15 * a, cx + 0.15 * a, 5), np.full(5, cy + 0.18 * b)], axis=1)
    # eye order: outer corner, two top, inner corner, two bottom
    pts[36:42] = _ellipse(cx - eye_dx, eye_y, eye_rx, eye_ry, 6, start=np.pi)
    pts[42:48] = _ellipse(cx + eye_dx, eye_y, eye_rx, eye_ry, 6, start=np.pi)
    mouth_y, mouth_rx, mouth_ry = cy + 0.45 * b, 0.3 * a, 0.08 * b
    pts[48:60] = _ellipse(cx, mouth_y, mouth_rx, mouth_ry, 12, start=np.pi)
    pts[60:68] = _ellipse(cx, mouth_y, 0.7 * mouth_rx, 0.4 * mouth_ry, 8, start=np.pi)
    return pts


def _smooth_field(rng, side, amp):
    yy, xx = np.mgrid[0:side, 0:side] / side
    f = np.zeros((side, side))
    for _ in range(3):
        fx, fy = rng.uniform(0.3, 1.5, size=2)
        f += np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    return amp * f / 3


def _artifact(rng, side, kind, strength):
    yy, xx = np.mgrid[0:side, 0:side]
    if kind == "checkerboard":
        cell = 3
        ox, oy = rng.integers(0, cell, size=2)
        return strength * (2.0 * (((xx + ox) // cell + (yy + oy) // cell) % 2) - 1.0)
    k = 6
    freq = 1 / 3  # same period as the checkerboard cell
    out = np.zeros((side, side))
    for theta in rng.uniform(0, np.pi, size=k):
        out += np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + rng.uniform(0, 2 * np.pi))
    return strength * np.sqrt(2.0 / k) * out


def render_face(rng, side: int):
    """One smooth schematic face; returns (float image, landmarks, face box, layout)."""
    cx = side / 2 + rng.uniform(-0.04, 0.04) * side
    cy = side / 2 + rng.uniform(-0.04, 0.04) * side
    a = rng.uniform(0.30, 0.36) * side
    b = rng.uniform(0.38, 0.42) * side
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)

    img = np.empty((side, side, 3))
    bg = rng.uniform(40, 200, size=3)
    img[:] = bg
    img += _smooth_field(rng, side, 25)[..., None]
    skin = rng.uniform([150, 100, 80], [230, 180, 150])
    face = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    img[face] = skin + _smooth_field(rng, side, 12)[face][:, None]

    pts = schematic_landmarks(cx, cy, a, b)
    eye_dx, eye_y = 0.38 * a, cy - 0.25 * b
    for sx in (-1, 1):
        m = ((xx - cx - sx * eye_dx) / (0.18 * a)) ** 2 + ((yy - eye_y) / (0.08 * b)) ** 2 <= 1.0
        img[m] = rng.uniform(20, 70, size=3)
        brow = (np.abs(yy - (eye_y - 0.17 * b)) < 0.025 * b) & (np.abs(xx - cx - sx * eye_dx) < 0.2 * a)
        img[brow] = img[brow] * 0.4
    ridge = (np.abs(xx - cx) < 0.04 * a) & (yy > cy - 0.2 * b) & (yy < cy + 0.15 * b)
    img[ridge] = img[ridge] * 0.75
    nostril = (np.abs(xx - cx) < 0.15 * a) & (np.abs(yy - (cy + 0.18 * b)) < 0.02 * b)
    img[nostril] = img[nostril] * 0.55
    mouth = ((xx - cx) / (0.3 * a)) ** 2 + ((yy - (cy + 0.45 * b)) / (0.08 * b)) ** 2 <= 1.0
    img[mouth] = rng.uniform([140, 30, 40], [210, 80, 90])
    img = ndimage.gaussian_filter(img, sigma=(1.2, 1.2, 0))

    box = (
        int(max(0, np.floor(cx - 1.12 * a))),
        int(max(0, np.floor(cy - 1.1 * b))),
        int(min(side, np.ceil(cx + 1.12 * a))),
        int(min(side, np.ceil(cy + 1.06 * b))),
    )
    return img, pts, box, (cx, cy, a, b)


def _occluder(rng, side, layout):
    cx, cy, a, b = layout
    kind = rng.choice(["sunglasses", "mask", "hand"])
    if kind == "sunglasses":
        x0, x1 = cx - 0.62 * a, cx + 0.62 * a
        y0, y1 = cy - 0.36 * b, cy - 0.14 * b
    elif kind == "mask":
        x0, x1 = cx - 0.55 * a, cx + 0.55 * a
        y0, y1 = cy + 0.3 * b, cy + 0.85 * b
    else:
        w, h = rng.uniform(0.3, 0.6) * a, rng.uniform(0.3, 0.6) * b
        x0, y0 = rng.uniform(cx - a, cx + a - w), rng.uniform(cy - b, cy + b - h)
        x1, y1 = x0 + w, y0 + h
    mask = np.zeros((side, side), dtype=np.uint8)
    mask[int(max(0, y0)):int(min(side, y1)), int(max(0, x0)):int(min(side, x1))] = 1
    return mask


def synth_image(cfg: SynthConfig, split: str, label: str, index: int):
    """Deterministic (pixels, landmarks, face box, mask or None) for one synthetic image."""
    rng = np.random.default_rng([cfg.seed, SPLITS.index(split), LABELS.index(label), index])
    side = cfg.image_side
    img, pts, box, layout = render_face(rng, side)
    if label == "fake":
        img += _artifact(rng, side, cfg.artifact_kind, cfg.artifact_strength)[..., None]
    img += rng.normal(0, 1.0, size=img.shape)
    mask = None
    if rng.uniform() < cfg.occlusion_probability:
        mask = _occluder(rng, side, layout)
        img[mask.astype(bool)] = rng.uniform(0, 255, size=3)
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return pixels, pts, box, mask


def generate_synthetic(config: SynthConfig, out_dir) -> DatasetManifest:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for split in SPLITS:
            (out / split).mkdir(exist_ok=True)
    except OSError as exc:
        raise IOError(f"cannot write to {out}: {exc}") from exc
    records = []
    for split, n in config.counts().items():
        for label in LABELS:
            for i in range(n):
                pixels, pts, box, mask = synth_image(config, split, label, i)
                rel = f"{split}/{label}_{i:04d}.png"
                Image.fromarray(pixels).save(out / rel)
                mask_rel = None
                if mask is not None:
                    mask_rel = f"{split}/{label}_{i:04d}_mask.png"
                    write_mask(mask, out / mask_rel)
                records.append(
                    ManifestRecord(
                        path=rel,
                        label=label,
                        split=split,
                        landmarks=tuple((round(float(x), 3), round(float(y), 3)) for x, y in pts),
                        occlusion_mask=mask_rel,
                        occluded=mask is not None,
                        face_box=box,
                    )
                )
    manifest = DatasetManifest(root=out, records=records, counts={s: 2 * n for s, n in config.counts().items()})
    save_manifest(manifest, out / "manifest.jsonl", root=".")
    return manifest


def highpass_energy(pixels: np.ndarray) -> float:
    """Mean squared Laplacian response of the grey image."""
    grey = np.asarray(pixels, dtype=np.float64).mean(axis=2)
    return float(np.mean(ndimage.laplace(grey) ** 2))
