"""Three-path decision: whole face, concatenated patch features, weighted patch vote."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import facepatch as fp
from .errors import ConfigError, InvalidInput, ModelNotLoaded, NoVoters
from .gramnet import (
    Checkpoint,
    ClassifierHead,
    GramNet,
    HeadKind,
    key_name,
    concat_features,
    forward_features_batch,
    head_probs,
    label_from_prob,
    load_checkpoint,
)
from .labels import BinaryLabel

REAL, FAKE = BinaryLabel.REAL, BinaryLabel.FAKE


class Path3(str, Enum):
    WHOLE_FACE = "whole_face"
    CONCAT = "concat"
    PATCH_VOTE = "patch_vote"


class EarlyExit(str, Enum):
    OFF = "off"
    AGREEMENT = "agreement"
    VALIDATED = "validated"


@dataclass(frozen=True)
class PatchWeights:
    """Integer vote weight per patch key name; unlisted patches weigh ``default``.

    A ``"default"`` entry in the mapping sets the default weight.
    """

    weights: Mapping[str, int] = field(default_factory=dict)
    default: int = 1

    def __post_init__(self):
        raw = dict(self.weights)
        default = raw.pop("default", self.default)
        clean = {}
        for k, w in list(raw.items()) + [("default", default)]:
            if isinstance(w, bool) or int(w) != w or int(w) < 1:
                raise ConfigError(f"weight for {key_name(k)!r} must be an integer >= 1, got {w!r}")
            clean[key_name(k)] = int(w)
        object.__setattr__(self, "default", clean.pop("default"))
        object.__setattr__(self, "weights", clean)

    def __getitem__(self, key) -> int:
        return self.weights.get(key_name(key), self.default)

    def scaled(self, k: int) -> "PatchWeights":
        return PatchWeights({n: w * k for n, w in self.weights.items()}, default=self.default * k)

    def to_dict(self, keys=None) -> Dict[str, int]:
        if keys is None:
            d = dict(self.weights)
            if self.default != 1:
                d["default"] = self.default
            return d
        return {key_name(k): self[k] for k in keys}

    def label(self) -> str:
        heavy = [f"{n}={w}" for n, w in sorted(self.weights.items()) if w != self.default]
        if self.default != 1:
            heavy.insert(0, f"default={self.default}")
        return "+".join(heavy) if heavy else "all-1"


def majority_vote(
    patch_labels: Mapping,
    weights: Optional[PatchWeights] = None,
    tie_fallback: BinaryLabel = REAL,
) -> Tuple[BinaryLabel, bool]:
    """Weighted hard vote. FAKE wins only with strictly more weight; ties go to ``tie_fallback``."""
    if not patch_labels:
        raise NoVoters("no patches to vote")
    weights = weights or PatchWeights()
    fake = real = 0
    for key, lab in patch_labels.items():
        if BinaryLabel.parse(lab) is FAKE:
            fake += weights[key]
        else:
            real += weights[key]
    if fake > real:
        return FAKE, False
    if real > fake:
        return REAL, False
    return BinaryLabel.parse(tie_fallback), True


def fuse_three(d1: BinaryLabel, d2: BinaryLabel, d3: BinaryLabel) -> BinaryLabel:
    n_real = sum(BinaryLabel.parse(d) is REAL for d in (d1, d2, d3))
    return REAL if n_real >= 2 else FAKE


@dataclass(frozen=True)
class PipelineConfig:
    patch_mode: fp.PatchMode = fp.PatchMode.SEMANTIC
    block: Tuple[int, int] = (64, 64)
    canonical_side: int = fp.CANONICAL_SIDE
    pad: float = fp.DEFAULT_PAD
    weights: PatchWeights = field(default_factory=PatchWeights)
    early_exit: EarlyExit = EarlyExit.OFF
    # validated mode: the patch path that scored 100% on validation
    trusted_path: Optional[Path3] = None
    exclude_occluded: bool = False
    exclude_occluded_above: float = 1.0
    concat_zero_occluded: bool = False
    face_provider: Union[str, object] = "manifest"
    occlusion_provider: Optional[object] = None

    def __post_init__(self):
        object.__setattr__(self, "patch_mode", fp.PatchMode(self.patch_mode))
        object.__setattr__(self, "early_exit", EarlyExit(self.early_exit))
        if self.trusted_path is not None:
            tp = Path3(self.trusted_path)
            if tp is Path3.WHOLE_FACE:
                raise ConfigError("trusted_path must be a patch-based path")
            object.__setattr__(self, "trusted_path", tp)
        if self.early_exit is EarlyExit.VALIDATED and self.trusted_path is None:
            raise ConfigError("validated early exit needs trusted_path")
        if not isinstance(self.weights, PatchWeights):
            object.__setattr__(self, "weights", PatchWeights(self.weights))
        object.__setattr__(self, "block", tuple(int(b) for b in self.block))

    def to_dict(self) -> dict:
        return {
            "patch_mode": self.patch_mode.value,
            "block": list(self.block),
            "canonical_side": self.canonical_side,
            "pad": self.pad,
            "weights": self.weights.to_dict(),
            "early_exit": self.early_exit.value,
            "trusted_path": self.trusted_path.value if self.trusted_path else None,
            "exclude_occluded": self.exclude_occluded,
            "exclude_occluded_above": self.exclude_occluded_above,
            "concat_zero_occluded": self.concat_zero_occluded,
        }


@dataclass
class Models:
    """The three trained components plus forward-pass counters."""

    whole_model: Optional[GramNet] = None
    whole_head: Optional[ClassifierHead] = None
    patch_model: Optional[GramNet] = None
    patch_head: Optional[ClassifierHead] = None
    concat_head: Optional[ClassifierHead] = None
    whole_face_calls: int = 0
    patch_calls: int = 0

    @classmethod
    def from_checkpoints(cls, whole: Checkpoint, patch: Checkpoint, concat: Checkpoint) -> "Models":
        return cls(
            whole_model=whole.model,
            whole_head=whole.head(HeadKind.WHOLE_FACE),
            patch_model=patch.model,
            patch_head=patch.head(HeadKind.PER_PATCH),
            concat_head=concat.head(HeadKind.CONCAT),
        )

    @classmethod
    def load(cls, directory) -> "Models":
        d = Path(directory)
        missing = [n for n in CHECKPOINT_FILES.values() if not (d / n).is_file()]
        if missing:
            raise ModelNotLoaded(f"missing checkpoint(s) in {d}: {', '.join(missing)}")
        return cls.from_checkpoints(*(load_checkpoint(d / CHECKPOINT_FILES[k]) for k in ("whole", "patch", "concat")))

    def require(self, *names):
        for n in names:
            if getattr(self, n) is None:
                raise ModelNotLoaded(f"{n} is not loaded")

    def whole_face(self, pixels) -> Tuple[BinaryLabel, float]:
        self.require("whole_model", "whole_head")
        self.whole_face_calls += 1
        feats = forward_features_batch(self.whole_model, pixels)
        p = float(head_probs(self.whole_head, feats)[0])
        return label_from_prob(p), p

    def patches(self, stack: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Features and per-patch P(real) for an ``N x h x w x 3`` patch stack."""
        self.require("patch_model", "patch_head")
        self.patch_calls += 1
        feats = forward_features_batch(self.patch_model, stack)
        return feats, head_probs(self.patch_head, feats)


CHECKPOINT_FILES = {"whole": "whole.oclf", "patch": "patch.oclf", "concat": "concat.oclf"}


@dataclass
class PathDecision:
    path: Path3
    label: BinaryLabel
    score: float
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"label": self.label.value, "score": round(float(self.score), 6)}
        d.update(self.detail)
        return d


@dataclass
class FusionResult:
    sample_id: str
    decisions: Dict[Path3, PathDecision]
    final: BinaryLabel
    early_exited: bool = False
    tie_broken: bool = False

    def label_of(self, path) -> Optional[BinaryLabel]:
        d = self.decisions.get(Path3(path))
        return d.label if d else None

    @property
    def patch_votes(self) -> Dict[str, BinaryLabel]:
        d = self.decisions.get(Path3.PATCH_VOTE)
        return {k: BinaryLabel(v) for k, v in d.detail["votes"].items()} if d else {}

    def to_dict(self) -> dict:
        vote = self.decisions.get(Path3.PATCH_VOTE)
        paths = {p.value: d.to_dict() for p, d in self.decisions.items() if p is not Path3.PATCH_VOTE}
        if vote:
            paths[Path3.PATCH_VOTE.value] = {"label": vote.label.value, "score": round(float(vote.score), 6)}
        return {
            "sample_id": self.sample_id,
            "paths": paths,
            "patch_votes": vote.detail["votes"] if vote else {},
            "weights": vote.detail["weights"] if vote else {},
            "final": self.final.value,
            "early_exited": self.early_exited,
            "tie_broken": self.tie_broken,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "FusionResult":
        decisions = {}
        for name, pd in d["paths"].items():
            path = Path3(name)
            detail = {}
            if path is Path3.PATCH_VOTE:
                detail = {"votes": dict(d["patch_votes"]), "weights": dict(d["weights"])}
            decisions[path] = PathDecision(path, BinaryLabel(pd["label"]), pd["score"], detail)
        return cls(d["sample_id"], decisions, BinaryLabel(d["final"]), d["early_exited"], d["tie_broken"])


# --- per-sample preparation --------------------------------------------------


@dataclass
class PreparedFace:
    canonical: fp.ImageSample
    face_pixels: np.ndarray
    patches: fp.PatchSet


def prepare_face(sample: fp.ImageSample, config: PipelineConfig, input_side: int = fp.PATCH_SIDE) -> PreparedFace:
    """Crop, zero occluded pixels, resize to canonical, and cut patches."""
    if config.occlusion_provider is not None and sample.occlusion is None:
        sample = replace(sample, occlusion=config.occlusion_provider(sample))
    crop, _ = fp.detect_face(sample, config.face_provider)
    if crop.occlusion is not None:
        crop = fp.apply_occlusion(crop, crop.occlusion)
    canonical = fp.resize_to_canonical(crop, config.canonical_side)
    if canonical.occlusion is not None:
        # bilinear resampling blends colour back in along the mask edge
        canonical = fp.apply_occlusion(canonical, canonical.occlusion)
    face_pixels = fp.resize_pixels(canonical.pixels, input_side, input_side)
    patches = fp.patch_set(canonical, config.patch_mode, config.block, config.pad, input_side)
    return PreparedFace(canonical, face_pixels, patches)


def _voters(prep: PreparedFace, config: PipelineConfig) -> List[bool]:
    mask = prep.canonical.occlusion
    if not config.exclude_occluded or mask is None:
        return [True] * len(prep.patches)
    return [fp.patch_occlusion_fraction(p, mask) < config.exclude_occluded_above for p in prep.patches]


def _fully_occluded(prep: PreparedFace) -> List[bool]:
    mask = prep.canonical.occlusion
    if mask is None:
        return [False] * len(prep.patches)
    return [fp.patch_occlusion_fraction(p, mask) >= 1.0 for p in prep.patches]


def _patch_paths(models: Models, prep: PreparedFace, config: PipelineConfig):
    models.require("patch_model", "patch_head", "concat_head")
    keys = prep.patches.keys
    stack = np.stack([p.pixels for p in prep.patches])
    feats, probs = models.patches(stack)

    concat_feats = feats
    if config.concat_zero_occluded:
        concat_feats = feats.copy()
        concat_feats[np.array(_fully_occluded(prep))] = 0.0
    vec = concat_features(models.concat_head, list(zip(keys, concat_feats)))
    p2 = float(head_probs(models.concat_head, vec)[0])
    concat = PathDecision(Path3.CONCAT, label_from_prob(p2), p2)

    voting = _voters(prep, config)
    if not any(voting):
        voting = [True] * len(keys)
    votes = {key_name(k): label_from_prob(p) for k, p, v in zip(keys, probs, voting) if v}
    excluded = [key_name(k) for k, v in zip(keys, voting) if not v]
    patch_probs = {key_name(k): round(float(p), 6) for k, p in zip(keys, probs)}
    return concat, votes, excluded, patch_probs


def _vote_decision(votes, excluded, patch_probs, config: PipelineConfig, fallback: BinaryLabel):
    label, tie = majority_vote(votes, config.weights, tie_fallback=fallback)
    fake_w = sum(config.weights[k] for k, v in votes.items() if v is FAKE)
    total = sum(config.weights[k] for k in votes)
    detail = {
        "votes": {k: v.value for k, v in votes.items()},
        "weights": {k: config.weights[k] for k in votes},
        "excluded": excluded,
        "patch_prob_real": patch_probs,
    }
    return PathDecision(Path3.PATCH_VOTE, label, 1.0 - fake_w / total, detail), tie


def run_pipeline(models: Models, sample: fp.ImageSample, config: PipelineConfig = PipelineConfig()) -> FusionResult:
    models.require("whole_model", "whole_head", "patch_model", "patch_head", "concat_head")
    prep = prepare_face(sample, config, models.patch_model.config.input_side)
    l1, p1 = models.whole_face(fp.resize_pixels(prep.canonical.pixels, *(models.whole_model.config.input_side,) * 2))
    whole = PathDecision(Path3.WHOLE_FACE, l1, p1)
    concat, votes, excluded, patch_probs = _patch_paths(models, prep, config)
    vote, tie = _vote_decision(votes, excluded, patch_probs, config, fallback=l1)
    final = fuse_three(whole.label, concat.label, vote.label)
    return FusionResult(
        sample.id,
        {Path3.WHOLE_FACE: whole, Path3.CONCAT: concat, Path3.PATCH_VOTE: vote},
        final,
        early_exited=False,
        tie_broken=tie,
    )


def run_pipeline_early_exit(
    models: Models, sample: fp.ImageSample, config: PipelineConfig = PipelineConfig(early_exit=EarlyExit.AGREEMENT)
) -> FusionResult:
    """Patch paths first; the whole-face model runs only when they cannot settle it.

    Agreement mode exits when the concat and vote paths agree. Validated mode
    exits with ``config.trusted_path``'s label. A tied vote always needs the
    whole-face label as its fallback, so it never exits early.
    """
    models.require("patch_model", "patch_head", "concat_head")
    mode = config.early_exit if config.early_exit is not EarlyExit.OFF else EarlyExit.AGREEMENT
    prep = prepare_face(sample, config, models.patch_model.config.input_side)
    concat, votes, excluded, patch_probs = _patch_paths(models, prep, config)
    pre_label, tie = majority_vote(votes, config.weights, tie_fallback=REAL)

    if not tie:
        vote, _ = _vote_decision(votes, excluded, patch_probs, config, fallback=REAL)
        exit_label = None
        if mode is EarlyExit.AGREEMENT and concat.label is vote.label:
            exit_label = vote.label
        elif mode is EarlyExit.VALIDATED:
            exit_label = concat.label if config.trusted_path is Path3.CONCAT else vote.label
        if exit_label is not None:
            return FusionResult(
                sample.id, {Path3.CONCAT: concat, Path3.PATCH_VOTE: vote}, exit_label, early_exited=True
            )

    models.require("whole_model", "whole_head")
    l1, p1 = models.whole_face(fp.resize_pixels(prep.canonical.pixels, *(models.whole_model.config.input_side,) * 2))
    whole = PathDecision(Path3.WHOLE_FACE, l1, p1)
    vote, tie = _vote_decision(votes, excluded, patch_probs, config, fallback=l1)
    return FusionResult(
        sample.id,
        {Path3.WHOLE_FACE: whole, Path3.CONCAT: concat, Path3.PATCH_VOTE: vote},
        fuse_three(whole.label, concat.label, vote.label),
        early_exited=False,
        tie_broken=tie,
    )


def predict(models: Models, samples: Sequence[fp.ImageSample], config: PipelineConfig = PipelineConfig()) -> List[FusionResult]:
    run = run_pipeline if config.early_exit is EarlyExit.OFF else run_pipeline_early_exit
    return [run(models, s, config) for s in samples]


def trusted_path_from_validation(results: Sequence[FusionResult], truth: Sequence[BinaryLabel]) -> Optional[Path3]:
    """The first patch path (concat, then vote) with 100% accuracy on validation, if any."""
    if len(results) != len(truth) or not results:
        raise InvalidInput("results and truth must be equal-length and nonempty")
    for path in (Path3.CONCAT, Path3.PATCH_VOTE):
        if all(r.label_of(path) is BinaryLabel.parse(t) for r, t in zip(results, truth)):
            return path
    return None


def write_predictions(results: Sequence[FusionResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in results:
            fh.write(r.to_json() + "\n")
    return path


def read_predictions(path) -> List[FusionResult]:
    with Path(path).open() as fh:
        return [FusionResult.from_dict(json.loads(line)) for line in fh if line.strip()]
