"""Mini-batch SGD training for the whole-face model, the shared patch model and the concat head."""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DegenerateDataset, DivergenceError, InvalidInput
from .facepatch import ImageSample
from .fusion import CHECKPOINT_FILES, PipelineConfig, PreparedFace, prepare_face
from .gramnet import (
    Checkpoint,
    ClassifierHead,
    GramNet,
    GramNetConfig,
    HeadKind,
    build_gramnet,
    build_head,
    forward_features_batch,
    key_name,
    parameter_hash,
    save_checkpoint,
    to_input,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.002
    epochs: int = 30
    batch_size: int = 15
    momentum: float = 0.0
    weight_decay: float = 0.0
    seed: int = 0
    class_weighted: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidInput("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidInput("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(optimizer="sgd", loss="cross_entropy")
        return d


@dataclass
class TrainHistory:
    train_loss: List[float] = field(default_factory=list)
    train_acc: List[float] = field(default_factory=list)
    val_acc: List[Optional[float]] = field(default_factory=list)
    best_epoch: int = 0
    # parameters that never received a nonzero gradient
    dead_params: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)

    def rows(self):
        for i in range(len(self)):
            yield i + 1, self.train_loss[i], self.train_acc[i], self.val_acc[i]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "train_acc", "val_acc"])
            for epoch, loss, tacc, vacc in self.rows():
                w.writerow([epoch, f"{loss:.6f}", f"{tacc:.4f}", "" if vacc is None else f"{vacc:.4f}"])
        return path

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        h = cls()
        with Path(path).open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"epoch", "train_acc", "val_acc"} <= set(reader.fieldnames):
                raise InvalidInput(f"{path}: not a training history CSV")
            for row in reader:
                try:
                    h.train_loss.append(float(row.get("train_loss") or "nan"))
                    h.train_acc.append(float(row["train_acc"]))
                    h.val_acc.append(float(row["val_acc"]) if row["val_acc"] else None)
                except (TypeError, ValueError):
                    raise InvalidInput(f"{path}: malformed row {row}") from None
        if not len(h):
            raise InvalidInput(f"{path}: empty history")
        return h


@dataclass
class LabeledArrays:
    """Model-ready inputs ``x`` (uint8 images or float features) with class indices ``y``."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise InvalidInput("x and y lengths differ")

    def __len__(self):
        return len(self.y)


class _Stack(nn.Module):
    def __init__(self, model: Optional[GramNet], head: ClassifierHead):
        super().__init__()
        self.model = model
        self.head = head

    def forward(self, x):
        return self.head(self.model(x) if self.model is not None else x)


def _batch_tensor(x: np.ndarray) -> torch.Tensor:
    if x.dtype == np.uint8:
        return to_input(x)
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


@torch.no_grad()
def mean_loss(net: nn.Module, data: LabeledArrays, batch: int = 256) -> float:
    was = net.training
    net.eval()
    total = 0.0
    for i in range(0, len(data), batch):
        logits = net(_batch_tensor(data.x[i:i + batch]))
        total += float(F.cross_entropy(logits, torch.from_numpy(data.y[i:i + batch]), reduction="sum"))
    net.train(was)
    return total / len(data)


def _accuracy(net, data: LabeledArrays) -> float:
    with torch.no_grad():
        was = net.training
        net.eval()
        probs = []
        for i in range(0, len(data), 256):
            probs.append(torch.softmax(net(_batch_tensor(data.x[i:i + 256])), 1)[:, 1].numpy())
        net.train(was)
    pred = (np.concatenate(probs) >= 0.5).astype(np.int64)
    return 100.0 * float((pred == data.y).mean())


@torch.no_grad()
def recalibrate_batchnorm(net: nn.Module, data: LabeledArrays, batch: int = 256) -> None:
    """Replace BatchNorm running statistics with exact averages over ``data``.

    With few optimisation steps per epoch the exponential running averages lag
    the weights badly; evaluation then sees stale statistics.
    """
    bns = [m for m in net.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not bns:
        return
    saved = [(m, m.momentum) for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None  # cumulative average
    was = net.training
    net.train()
    for i in range(0, len(data), batch):
        net(_batch_tensor(data.x[i:i + batch]))
    for m, mom in saved:
        m.momentum = mom
    net.train(was)


def _fit(net: _Stack, train: LabeledArrays, val: Optional[LabeledArrays], config: TrainConfig, params):
    classes = np.unique(train.y)
    if len(train) == 0 or len(classes) < 2:
        raise DegenerateDataset("training data must contain both classes")
    weight = None
    if config.class_weighted:
        counts = np.bincount(train.y, minlength=2).astype(np.float64)
        weight = torch.tensor(len(train.y) / (2 * counts), dtype=torch.float32)
    opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    names = {id(p): n for n, p in net.named_parameters()}
    grad_seen = {n: False for n, p in net.named_parameters() if p.requires_grad}
    history = TrainHistory()
    best_score, best_state = -1.0, None
    net.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        loss_sum, correct = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            x = _batch_tensor(train.x[idx])
            y = torch.from_numpy(train.y[idx])
            opt.zero_grad()
            logits = net(x)
            loss = F.cross_entropy(logits, y, weight=weight)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch + 1}")
            loss.backward()
            for p in params:
                if p.grad is not None and not grad_seen[names[id(p)]] and bool(p.grad.abs().sum() > 0):
                    grad_seen[names[id(p)]] = True
            opt.step()
            loss_sum += float(loss.detach()) * len(idx)
            correct += int((torch.softmax(logits.detach(), 1)[:, 1] >= 0.5).long().eq(y).sum())
        history.train_loss.append(loss_sum / len(train))
        history.train_acc.append(100.0 * correct / len(train))
        recalibrate_batchnorm(net, train)
        vacc = _accuracy(net, val) if val is not None and len(val) else None
        history.val_acc.append(vacc)
        score = vacc if vacc is not None else history.train_acc[-1]
        if score > best_score:
            best_score, history.best_epoch = score, epoch + 1
            best_state = copy.deepcopy(net.state_dict())
        log.info("epoch %d loss %.4f train %.2f val %s", epoch + 1, history.train_loss[-1], history.train_acc[-1], vacc)
    net.load_state_dict(best_state)
    net.eval()
    history.dead_params = [n for n, seen in grad_seen.items() if not seen]
    return history


# --- data preparation -------------------------------------------------------


def prepare_all(samples: Sequence[ImageSample], pipeline: PipelineConfig, input_side: int) -> List[PreparedFace]:
    return [prepare_face(s, pipeline, input_side) for s in samples]


def _labels(samples) -> np.ndarray:
    if any(s.label is None for s in samples):
        raise InvalidInput("training samples need labels")
    return np.array([s.label.index for s in samples], dtype=np.int64)


def face_arrays(samples, prepared: Sequence[PreparedFace]) -> LabeledArrays:
    return LabeledArrays(np.stack([p.face_pixels for p in prepared]), _labels(samples))


def patch_arrays(samples, prepared: Sequence[PreparedFace]) -> LabeledArrays:
    """Pool every patch of every face; each patch inherits its face's label."""
    xs, ys = [], []
    for s, p in zip(samples, prepared):
        for patch in p.patches:
            xs.append(patch.pixels)
            ys.append(s.label.index)
    return LabeledArrays(np.stack(xs), np.array(ys, dtype=np.int64))


def concat_arrays(patch_model: GramNet, samples, prepared: Sequence[PreparedFace]) -> Tuple[LabeledArrays, List[str]]:
    keys = [key_name(k) for k in prepared[0].patches.keys]
    n = len(keys)
    stack = np.stack([patch.pixels for p in prepared for patch in p.patches])
    feats = forward_features_batch(patch_model, stack) if len(stack) <= 512 else np.concatenate(
        [forward_features_batch(patch_model, stack[i:i + 512]) for i in range(0, len(stack), 512)]
    )
    return LabeledArrays(feats.reshape(len(prepared), n * feats.shape[1]), _labels(samples)), keys


def _as_arrays(data, pipeline, side, kind):
    if data is None or isinstance(data, LabeledArrays):
        return data
    samples = list(data)
    prepared = prepare_all(samples, pipeline, side)
    return face_arrays(samples, prepared) if kind == "face" else patch_arrays(samples, prepared)


# --- public training entry points ------------------------------------------


def _checkpoint(model, head, config: TrainConfig, history: TrainHistory, extra=None) -> Checkpoint:
    meta = {"rng_seed": config.seed, "train_config": config.to_dict(), "best_epoch": history.best_epoch}
    meta.update(extra or {})
    return Checkpoint(model=model, heads={head.kind.value: head}, meta=meta)


def train_classifier(
    model: GramNet,
    head: ClassifierHead,
    train,
    val=None,
    config: TrainConfig = TrainConfig(),
    pipeline: PipelineConfig = PipelineConfig(),
    fingerprint: Optional[str] = None,
):
    """Train ``model`` + ``head`` on whole faces (samples) or ready-made arrays."""
    if head.input_dim != model.feature_dim:
        raise InvalidInput(f"head input {head.input_dim} != model features {model.feature_dim}")
    side = model.config.input_side
    train = _as_arrays(train, pipeline, side, "face")
    val = _as_arrays(val, pipeline, side, "face")
    net = _Stack(model, head)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        history = _fit(net, train, val, config, list(net.parameters()))
    return _checkpoint(model, head, config, history, {"training_fingerprint": fingerprint}), history


def train_patch_model(
    model: GramNet,
    head: ClassifierHead,
    train,
    val=None,
    config: TrainConfig = TrainConfig(),
    pipeline: PipelineConfig = PipelineConfig(),
    fingerprint: Optional[str] = None,
):
    """One shared model over the pooled patches of all training faces."""
    side = model.config.input_side
    train = _as_arrays(train, pipeline, side, "patch")
    val = _as_arrays(val, pipeline, side, "patch")
    return train_classifier(model, head, train, val, config, pipeline, fingerprint)


def train_concat_head(
    patch_model: GramNet,
    head: ClassifierHead,
    train,
    val=None,
    config: TrainConfig = TrainConfig(),
    pipeline: PipelineConfig = PipelineConfig(),
    fingerprint: Optional[str] = None,
):
    """Train only ``head`` on frozen, concatenated patch features."""
    if head.kind is not HeadKind.CONCAT:
        raise InvalidInput("train_concat_head needs a CONCAT head")
    before = parameter_hash(patch_model)
    side = patch_model.config.input_side

    def feats(data):
        if data is None or isinstance(data, LabeledArrays):
            return data
        samples = list(data)
        arrays, keys = concat_arrays(patch_model, samples, prepare_all(samples, pipeline, side))
        if tuple(keys) != head.part_keys:
            raise InvalidInput(f"patch order {keys} does not match head {head.part_keys}")
        return arrays

    train, val = feats(train), feats(val)
    if train.x.shape[1] != head.input_dim:
        raise InvalidInput(f"head expects {head.input_dim} inputs, got {train.x.shape[1]}")
    net = _Stack(None, head)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        history = _fit(net, train, val, config, list(head.parameters()))
    if parameter_hash(patch_model) != before:
        raise RuntimeError("patch model parameters changed while training the concat head")
    ckpt = Checkpoint(
        model=None,
        heads={head.kind.value: head},
        meta={
            "rng_seed": config.seed,
            "train_config": config.to_dict(),
            "best_epoch": history.best_epoch,
            "training_fingerprint": fingerprint,
            "patch_model_hash": before,
        },
    )
    return ckpt, history


# --- full run ---------------------------------------------------------------


@dataclass
class TrainedRun:
    whole: Checkpoint
    patch: Checkpoint
    concat: Checkpoint
    histories: dict
    run_manifest: dict


def train_all(
    train_samples: Sequence[ImageSample],
    val_samples: Optional[Sequence[ImageSample]],
    model_config: GramNetConfig,
    config: TrainConfig = TrainConfig(),
    pipeline: PipelineConfig = PipelineConfig(),
    fingerprint: Optional[str] = None,
    out_dir=None,
) -> TrainedRun:
    """Whole-face model, then patch model, then concat head on the frozen patch model."""
    t0 = time.time()
    side = model_config.input_side
    train_samples = list(train_samples)
    val_samples = list(val_samples) if val_samples else None
    prep_train = prepare_all(train_samples, pipeline, side)
    prep_val = prepare_all(val_samples, pipeline, side) if val_samples else None
    fd = model_config.feature_dim

    whole_model = build_gramnet(model_config, config.seed)
    whole_head = build_head(HeadKind.WHOLE_FACE, fd, config.seed)
    whole, h_whole = train_classifier(
        whole_model,
        whole_head,
        face_arrays(train_samples, prep_train),
        face_arrays(val_samples, prep_val) if val_samples else None,
        config,
        pipeline,
        fingerprint,
    )

    patch_model = build_gramnet(model_config, config.seed + 1)
    patch_head = build_head(HeadKind.PER_PATCH, fd, config.seed + 1)
    patch, h_patch = train_patch_model(
        patch_model,
        patch_head,
        patch_arrays(train_samples, prep_train),
        patch_arrays(val_samples, prep_val) if val_samples else None,
        config,
        pipeline,
        fingerprint,
    )

    tr, keys = concat_arrays(patch.model, train_samples, prep_train)
    va = concat_arrays(patch.model, val_samples, prep_val)[0] if val_samples else None
    concat_head = build_head(HeadKind.CONCAT, fd, config.seed + 2, part_keys=keys)
    concat, h_concat = train_concat_head(patch.model, concat_head, tr, va, config, pipeline, fingerprint)

    histories = {"whole": h_whole, "patch": h_patch, "concat": h_concat}
    run_manifest = {
        "model_config": model_config.to_dict(),
        "train_config": config.to_dict(),
        "pipeline": pipeline.to_dict(),
        "seed": config.seed,
        "dataset_fingerprint": fingerprint,
        "n_train": len(train_samples),
        "n_val": len(val_samples) if val_samples else 0,
        "wall_clock_s": round(time.time() - t0, 3),
    }
    run = TrainedRun(whole, patch, concat, histories, run_manifest)
    if out_dir is not None:
        write_run(run, out_dir)
    return run


def write_run(run: TrainedRun, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for key, ckpt in (("whole", run.whole), ("patch", run.patch), ("concat", run.concat)):
        save_checkpoint(out / CHECKPOINT_FILES[key], ckpt.model, ckpt.heads, ckpt.meta)
        run.histories[key].to_csv(out / f"history_{key}.csv")
    (out / "run_manifest.json").write_text(json.dumps(run.run_manifest, indent=2, sort_keys=True) + "\n")
    return out
