"""Texture-aware residual CNN with six Gram blocks, classifier heads, checkpoints."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    CheckpointCorrupt,
    ConfigError,
    DimensionError,
    InputShapeError,
    NumericalError,
    VersionError,
)
from .labels import BinaryLabel

GRAM_TAPS = ("stem", "stage1", "stage2", "stage3", "stage4", "pre_pool")
CONCAT_HIDDEN = 256
MAGIC = b"OCLF"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class GramNetConfig:
    input_side: int = 64
    base_channels: int = 64
    stage_blocks: Tuple[int, ...] = (2, 2, 2, 2)
    gram_taps: Tuple[str, ...] = GRAM_TAPS
    gram_channels: int = 32
    gram_out_dim: int = 32
    backbone_out_dim: int = 512

    @property
    def feature_dim(self) -> int:
        return self.backbone_out_dim + len(self.gram_taps) * self.gram_out_dim

    def validate(self) -> "GramNetConfig":
        if len(self.gram_taps) != 6 or len(set(self.gram_taps)) != 6:
            raise ConfigError(f"need exactly 6 distinct gram taps, got {self.gram_taps}")
        unknown = set(self.gram_taps) - set(GRAM_TAPS)
        if unknown:
            raise ConfigError(f"unknown gram taps {sorted(unknown)}; allowed {GRAM_TAPS}")
        if len(self.stage_blocks) != 4 or min(self.stage_blocks) < 1:
            raise ConfigError("stage_blocks must list 4 positive block counts")
        for name in ("input_side", "base_channels", "gram_channels", "gram_out_dim", "backbone_out_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.input_side < 16:
            raise ConfigError("input_side must be >= 16")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_blocks"] = list(self.stage_blocks)
        d["gram_taps"] = list(self.gram_taps)
        d["feature_dim"] = self.feature_dim
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "GramNetConfig":
        d = dict(d)
        fdim = d.pop("feature_dim", None)
        try:
            cfg = cls(
                **{**d, "stage_blocks": tuple(d["stage_blocks"]), "gram_taps": tuple(d["gram_taps"])}
            )
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"bad config: {exc}") from None
        if fdim is not None and fdim != cfg.feature_dim:
            raise ConfigError(f"feature_dim {fdim} inconsistent with config ({cfg.feature_dim})")
        return cfg.validate()


PRESETS = {
    "default": GramNetConfig(),
    # ~95k parameters, feature_dim 56; CPU-friendly
    "toy": GramNetConfig(
        base_channels=8,
        stage_blocks=(1, 1, 1, 1),
        gram_channels=8,
        gram_out_dim=4,
        backbone_out_dim=32,
    ),
}


def preset(name: str) -> GramNetConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# --- Gram matrix ------------------------------------------------------------


def gram_matrix(fmap) -> np.ndarray:
    """Normalised Gram matrix ``F F^T / (C H W)`` of a ``C x H x W`` feature map.

    Each entry is a correctly rounded sum (``math.fsum``) of exact-order-free
    products, so the result is bit-exactly symmetric and invariant to any
    permutation of spatial positions.
    """
    arr = fmap.detach().cpu().numpy() if isinstance(fmap, torch.Tensor) else np.asarray(fmap)
    arr = arr.astype(np.float64)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise InputShapeError(f"expected C x H x W feature map, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError("feature map contains non-finite values")
    c, h, w = arr.shape
    flat = arr.reshape(c, h * w)
    denom = float(c * h * w)
    g = np.empty((c, c), dtype=np.float64)
    for i in range(c):
        prods = flat[i] * flat[i:]
        for k, j in enumerate(range(i, c)):
            g[i, j] = g[j, i] = math.fsum(prods[k]) / denom
    return g


def batched_gram(x: torch.Tensor) -> torch.Tensor:
    """``B x C x H x W`` -> ``B x 1 x C x C`` normalised Gram maps (differentiable)."""
    b, c, h, w = x.shape
    f = x.reshape(b, c, h * w)
    g = torch.bmm(f, f.transpose(1, 2)) / (c * h * w)
    g = 0.5 * (g + g.transpose(1, 2))
    return g.unsqueeze(1)


# --- network ----------------------------------------------------------------


class GramBlock(nn.Module):
    """conv -> Gram -> two convs with BN/ReLU over the Gram map -> pool -> linear."""

    def __init__(self, in_channels: int, gram_channels: int, out_dim: int):
        super().__init__()
        self.conv_in = nn.Conv2d(in_channels, gram_channels, 3, padding=1, bias=False)
        self.convs = nn.Sequential(
            nn.Conv2d(1, gram_channels, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(gram_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(gram_channels, gram_channels, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(gram_channels),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.proj = nn.Linear(gram_channels, out_dim)

    def forward(self, x):
        g = batched_gram(self.conv_in(x))
        g = self.pool(self.convs(g)).flatten(1)
        return self.proj(g)


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        idt = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + idt)


class GramNet(nn.Module):
    """Residual backbone (ResNet18 layout at defaults) with Gram-block side taps.

    ``forward`` returns the penultimate feature vector: the globally pooled
    backbone output followed by the six Gram-block embeddings in tap order.
    """

    def __init__(self, config: GramNetConfig):
        super().__init__()
        config.validate()
        self.config = config
        base = config.base_channels
        widths = [base * 2**i for i in range(4)]
        self.stem = nn.Sequential(
            nn.Conv2d(3, base, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(base),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_ch = base
        for i, (width, n_blocks) in enumerate(zip(widths, config.stage_blocks)):
            stride = 1 if i == 0 else 2
            blocks = [BasicBlock(in_ch, width, stride)]
            blocks += [BasicBlock(width, width) for _ in range(n_blocks - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = width
        self.stages = nn.ModuleList(stages)
        self.neck = nn.Sequential(
            nn.Conv2d(in_ch, config.backbone_out_dim, 1, bias=False),
            nn.BatchNorm2d(config.backbone_out_dim),
            nn.ReLU(inplace=True),
        )
        tap_channels = {
            "stem": base,
            "stage1": widths[0],
            "stage2": widths[1],
            "stage3": widths[2],
            "stage4": widths[3],
            "pre_pool": config.backbone_out_dim,
        }
        self.gram_blocks = nn.ModuleDict(
            {
                tap: GramBlock(tap_channels[tap], config.gram_channels, config.gram_out_dim)
                for tap in config.gram_taps
            }
        )

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        taps = {}
        x = self.stem(x)
        taps["stem"] = x
        for i, stage in enumerate(self.stages):
            x = stage(x)
            taps[f"stage{i + 1}"] = x
        x = self.neck(x)
        taps["pre_pool"] = x
        pooled = x.mean(dim=(2, 3))
        grams = [self.gram_blocks[t](taps[t]) for t in self.config.gram_taps]
        return torch.cat([pooled] + grams, dim=1)


class HeadKind(str, Enum):
    WHOLE_FACE = "whole_face"
    PER_PATCH = "per_patch"
    CONCAT = "concat"


class ClassifierHead(nn.Module):
    """Two-class scorer over features. CONCAT heads have one hidden layer."""

    def __init__(self, kind, input_dim: int, part_keys: Optional[Sequence[str]] = None, hidden: int = CONCAT_HIDDEN):
        super().__init__()
        self.kind = HeadKind(kind)
        self.input_dim = int(input_dim)
        self.part_keys = tuple(part_keys) if part_keys is not None else None
        self.hidden = int(hidden)
        if self.kind is HeadKind.CONCAT:
            if not self.part_keys:
                raise ConfigError("CONCAT head needs its ordered part keys")
            if self.input_dim % len(self.part_keys):
                raise ConfigError("CONCAT input_dim must be a multiple of the part count")
            self.net = nn.Sequential(
                nn.Linear(self.input_dim, self.hidden), nn.ReLU(inplace=True), nn.Linear(self.hidden, 2)
            )
        else:
            self.net = nn.Linear(self.input_dim, 2)

    @property
    def part_dim(self) -> int:
        return self.input_dim // len(self.part_keys) if self.part_keys else self.input_dim

    def spec(self) -> dict:
        return {
            "kind": self.kind.value,
            "input_dim": self.input_dim,
            "part_keys": list(self.part_keys) if self.part_keys is not None else None,
            "hidden": self.hidden,
        }

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.net(feats)


def build_gramnet(config: GramNetConfig, seed: int = 0) -> GramNet:
    if not isinstance(config, GramNetConfig):
        raise ConfigError("config must be a GramNetConfig")
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = GramNet(config)
    return model.eval()


def build_head(kind, feature_dim: int, seed: int = 0, part_keys: Optional[Sequence[str]] = None) -> ClassifierHead:
    kind = HeadKind(kind)
    input_dim = feature_dim * len(part_keys) if kind is HeadKind.CONCAT else feature_dim
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        head = ClassifierHead(kind, input_dim, part_keys=part_keys)
    return head.eval()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --- inference --------------------------------------------------------------


def to_input(pixels) -> torch.Tensor:
    """uint8 ``H x W x 3`` (or ``N x H x W x 3``) -> float ``N x 3 x H x W`` in [-1, 1]."""
    arr = np.asarray(pixels)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise InputShapeError(f"expected (N x) H x W x 3 pixels, got shape {arr.shape}")
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    return (t.permute(0, 3, 1, 2) / 127.5 - 1.0).contiguous()


def _check_side(model: GramNet, x: torch.Tensor):
    side = model.config.input_side
    if x.shape[-2:] != (side, side):
        raise InputShapeError(f"model expects {side}x{side} inputs, got {tuple(x.shape[-2:])}")


@torch.no_grad()
def forward_features_batch(model: GramNet, images) -> np.ndarray:
    x = images if isinstance(images, torch.Tensor) else to_input(images)
    _check_side(model, x)
    was_training = model.training
    model.eval()
    try:
        feats = model(x)
    finally:
        model.train(was_training)
    if not torch.isfinite(feats).all():
        raise NumericalError("non-finite features")
    return feats.numpy()


def forward_features(model: GramNet, image) -> np.ndarray:
    return forward_features_batch(model, image)[0]


def prob_real_from_logits(logits) -> np.ndarray:
    t = torch.as_tensor(np.asarray(logits, dtype=np.float32))
    if t.ndim == 1:
        t = t[None]
    return torch.softmax(t, dim=1)[:, 1].numpy().astype(np.float64)


def label_from_prob(prob_real: float) -> BinaryLabel:
    # ties at exactly 0.5 resolve to REAL
    return BinaryLabel.REAL if prob_real >= 0.5 else BinaryLabel.FAKE


@torch.no_grad()
def head_probs(head: ClassifierHead, feats) -> np.ndarray:
    t = torch.as_tensor(np.asarray(feats, dtype=np.float32))
    if t.ndim == 1:
        t = t[None]
    if t.shape[1] != head.input_dim:
        raise DimensionError(f"head expects {head.input_dim} features, got {t.shape[1]}")
    was_training = head.training
    head.eval()
    try:
        logits = head(t)
    finally:
        head.train(was_training)
    return prob_real_from_logits(logits.numpy())


def classify_batch(model: GramNet, head: ClassifierHead, images):
    if head.kind is HeadKind.CONCAT:
        raise DimensionError("classify needs a WHOLE_FACE or PER_PATCH head; use classify_concat")
    if head.input_dim != model.feature_dim:
        raise DimensionError(f"head input {head.input_dim} != model features {model.feature_dim}")
    feats = forward_features_batch(model, images)
    probs = head_probs(head, feats)
    return [label_from_prob(p) for p in probs], probs, feats


def classify(model: GramNet, head: ClassifierHead, image) -> Tuple[BinaryLabel, float]:
    labels, probs, _ = classify_batch(model, head, image)
    return labels[0], float(probs[0])


def key_name(key) -> str:
    if isinstance(key, Enum):
        return key.value
    if isinstance(key, tuple):
        return f"{key[0]}x{key[1]}"
    return str(key)


def concat_features(head: ClassifierHead, features) -> np.ndarray:
    """Order-checked concatenation; ``features`` is a sequence of ``(key, vector)``."""
    if head.kind is not HeadKind.CONCAT:
        raise DimensionError("classify_concat needs a CONCAT head")
    items = list(features.items()) if isinstance(features, Mapping) else list(features)
    if len(items) != len(head.part_keys):
        raise DimensionError(f"expected {len(head.part_keys)} feature vectors, got {len(items)}")
    keys = tuple(key_name(k) for k, _ in items)
    if keys != head.part_keys:
        raise DimensionError(f"feature order {keys} does not match head order {head.part_keys}")
    vecs = [np.asarray(v, dtype=np.float32).ravel() for _, v in items]
    if any(v.size != head.part_dim for v in vecs):
        raise DimensionError(f"every feature vector must have length {head.part_dim}")
    return np.concatenate(vecs)


def classify_concat(head: ClassifierHead, features) -> Tuple[BinaryLabel, float]:
    prob = float(head_probs(head, concat_features(head, features))[0])
    return label_from_prob(prob), prob


# --- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint:
    model: Optional[GramNet]
    heads: Dict[str, ClassifierHead] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> Optional[GramNetConfig]:
        return self.model.config if self.model is not None else None

    def head(self, kind=None) -> ClassifierHead:
        if kind is None:
            return next(iter(self.heads.values()))
        kind = HeadKind(kind)
        for h in self.heads.values():
            if h.kind is kind:
                return h
        raise KeyError(kind)


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _state_items(model, heads):
    if model is not None:
        for k, v in model.state_dict().items():
            yield f"model.{k}", v
    for name in sorted(heads):
        for k, v in heads[name].state_dict().items():
            yield f"head.{name}.{k}", v


def checkpoint_bytes(model: Optional[GramNet], heads: Mapping[str, ClassifierHead], meta: Optional[dict] = None) -> bytes:
    tensors, chunks, offset = [], [], 0
    for name, t in _state_items(model, heads):
        arr = t.detach().cpu().contiguous().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        tensors.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = _canonical_json(
        {
            "config": model.config.to_dict() if model is not None else None,
            "heads": {name: heads[name].spec() for name in sorted(heads)},
            "tensors": tensors,
            "meta": meta or {},
        }
    )
    body = struct.pack("<I", len(header)) + header + b"".join(chunks)
    digest = hashlib.sha256(body).digest()
    return MAGIC + struct.pack("<I", FORMAT_VERSION) + body + digest


def save_checkpoint(path, model, heads, meta=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model, heads, meta))
    return path


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointCorrupt("not an OCLF checkpoint")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format {version} unsupported (expected {FORMAT_VERSION})")
    body, digest = blob[8:-32], blob[-32:]
    if len(blob) < 8 + 4 + 32 or hashlib.sha256(body).digest() != digest:
        raise CheckpointCorrupt("checkpoint checksum mismatch (truncated or corrupt)")
    (hlen,) = struct.unpack("<I", body[:4])
    try:
        header = json.loads(body[4:4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorrupt(f"bad checkpoint header: {exc}") from None
    payload = memoryview(body)[4 + hlen:]

    model = None
    if header["config"] is not None:
        model = GramNet(GramNetConfig.from_dict(header["config"]))
    heads = {
        name: ClassifierHead(s["kind"], s["input_dim"], part_keys=s["part_keys"], hidden=s["hidden"])
        for name, s in header["heads"].items()
    }
    states: Dict[str, dict] = {}
    for t in header["tensors"]:
        dtype = np.dtype(t["dtype"]).newbyteorder("<")
        n = int(np.prod(t["shape"], dtype=np.int64)) * dtype.itemsize
        raw = payload[t["offset"]:t["offset"] + n]
        if len(raw) != n:
            raise CheckpointCorrupt(f"tensor {t['name']} truncated")
        arr = np.frombuffer(raw, dtype=dtype).reshape(t["shape"]).astype(dtype.newbyteorder("="))
        owner, _, key = t["name"].partition(".")
        if owner == "head":
            hname, _, key = key.partition(".")
            owner = f"head.{hname}"
        states.setdefault(owner, {})[key] = torch.from_numpy(arr.copy())
    try:
        if model is not None:
            model.load_state_dict(states.get("model", {}), strict=True)
            model.eval()
        for name, head in heads.items():
            head.load_state_dict(states.get(f"head.{name}", {}), strict=True)
            head.eval()
    except RuntimeError as exc:
        raise CheckpointCorrupt(f"checkpoint tensors do not match architecture: {exc}") from None
    return Checkpoint(model=model, heads=heads, meta=header["meta"])


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def parameter_hash(*modules: Optional[nn.Module]) -> str:
    """SHA-256 over every parameter and buffer, in state_dict order."""
    h = hashlib.sha256()
    for m in modules:
        if m is None:
            continue
        for k, v in m.state_dict().items():
            h.update(k.encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
