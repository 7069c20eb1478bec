"""Detector training stages: source training, style fine-tuning, inference.

Both stages share one loop: AdamW over shuffled source batches minimizing
the mean grounding + localization objective, with source-validation mAP
computed after every epoch and the best-scoring weights kept (ties go to
the earlier epoch).  Fine-tuning differs only in the prompt and in the
per-batch-element injection of styles drawn from a fitted bank; with
injection disabled it reproduces source training step for step.
"""

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .datagen import DetectionDataset
from .errors import ConfigError, InvalidInputError, ParseError
from .evalkit import NMS_IOU, SCORE_THRESH, evaluate
from .groundnet import (
    GroundingModel,
    alignment,
    batched_objective,
    batched_regions,
    pairwise_iou,
    save_checkpoint,
)
from .prompts import Prompt, tokenize
from .styleengine import StyleBank

logger = logging.getLogger(__name__)

TUNING_MODES = ("full", "prompt_only")


@dataclass
class TrainConfig:
    """Optimization settings shared by source training and fine-tuning."""

    lr: float = 1e-4
    weight_decay: float = 0.05
    epochs: int = 12
    batch_size: int = 8
    tuning_mode: str = "full"
    hook_layers: tuple[int, ...] = (1,)
    seed: int = 0
    disable_style_injection: bool = False

    def validate(self) -> None:
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0 and weight_decay >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.tuning_mode not in TUNING_MODES:
            raise ConfigError(f"tuning_mode must be one of {TUNING_MODES}")
        if not self.hook_layers or len(set(self.hook_layers)) != len(
            self.hook_layers
        ):
            raise ConfigError("hook_layers must be non-empty and unique")

    def to_json(self) -> dict:
        return {
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "tuning_mode": self.tuning_mode,
            "hook_layers": list(self.hook_layers),
            "seed": self.seed,
            "disable_style_injection": self.disable_style_injection,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        try:
            cfg = cls(
                lr=float(obj.get("lr", 1e-4)),
                weight_decay=float(obj.get("weight_decay", 0.05)),
                epochs=int(obj.get("epochs", 12)),
                batch_size=int(obj.get("batch_size", 8)),
                tuning_mode=str(obj.get("tuning_mode", "full")),
                hook_layers=tuple(obj.get("hook_layers", [1])),
                seed=int(obj.get("seed", 0)),
                disable_style_injection=bool(
                    obj.get("disable_style_injection", False)
                ),
            )
        except (TypeError, ValueError) as exc:
            raise ParseError(f"malformed train config: {exc}") from exc
        cfg.validate()
        return cfg


@dataclass
class Checkpoint:
    """Result of one training stage; ``model`` carries the best weights."""

    model: GroundingModel
    epoch: int
    val_map50: float
    history: list[float] = field(default_factory=list)
    aborted: bool = False


class Detection(NamedTuple):
    box: tuple[float, float, float, float]
    class_id: int
    score: float


def _trainable_parameters(model: GroundingModel, mode: str):
    if mode == "prompt_only":
        return list(model.text_encoder.parameters())
    return list(model.parameters())


def _bank_tensors(
    model: GroundingModel, banks: list[StyleBank], cfg: TrainConfig
) -> dict[int, tuple[torch.Tensor, torch.Tensor]]:
    """Validate banks against model and config; stack styles per layer."""
    if not banks:
        raise InvalidInputError("at least one style bank is required")
    layers = [b.hook_layer for b in banks]
    if sorted(layers) != sorted(cfg.hook_layers):
        raise ConfigError(
            f"banks cover layers {sorted(layers)}, config wants "
            f"{sorted(cfg.hook_layers)}"
        )
    sizes = {len(b) for b in banks}
    if 0 in sizes:
        raise InvalidInputError("style bank is empty")
    if len(sizes) != 1:
        raise ConfigError(f"banks must be aligned; got sizes {sorted(sizes)}")
    out = {}
    for b in banks:
        if not (1 <= b.hook_layer <= model.config.num_levels):
            raise ConfigError(f"bank layer {b.hook_layer} outside model range")
        expected = model.config.level_channels[b.hook_layer - 1]
        mu, sigma = b.as_tensors()
        if mu.shape[1] != expected:
            raise ConfigError(
                f"bank layer {b.hook_layer} has {mu.shape[1]} channels, "
                f"model layer has {expected}"
            )
        out[b.hook_layer] = (
            mu.to(model.dtype).detach(),
            sigma.to(model.dtype).detach(),
        )
    return out


def _run_training(
    model: GroundingModel,
    train_ds: DetectionDataset,
    val_ds: DetectionDataset,
    prompt: Prompt,
    cfg: TrainConfig,
    banks: list[StyleBank] | None = None,
    out_dir=None,
    keep_all: bool = False,
    stage_tag: str = "",
) -> Checkpoint:
    cfg.validate()
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise InvalidInputError("train and val datasets must be non-empty")
    if len(prompt) != len(train_ds.classes):
        raise ConfigError(
            f"prompt has {len(prompt)} phrases for {len(train_ds.classes)} classes"
        )
    bank_tensors = None
    bank_size = 0
    if banks is not None:
        bank_tensors = _bank_tensors(model, banks, cfg)
        bank_size = len(banks[0])

    opt = torch.optim.AdamW(
        _trainable_parameters(model, cfg.tuning_mode),
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
    )
    perm_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    style_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    token_ids = tokenize(prompt, model.vocab)

    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    best_state = None
    best_map = -math.inf
    best_epoch = 0
    history: list[float] = []
    aborted = False

    for epoch in range(1, cfg.epochs + 1):
        order = perm_rng.permutation(len(train_ds))
        for start in range(0, len(order), cfg.batch_size):
            chunk = [int(i) for i in order[start : start + cfg.batch_size]]
            images = train_ds.image_batch(chunk)
            targets = [train_ds.targets(i) for i in chunk]
            styles = None
            if bank_tensors is not None and not cfg.disable_style_injection:
                idx = torch.from_numpy(
                    style_rng.integers(bank_size, size=len(chunk))
                )
                styles = {
                    layer: (mu[idx], sigma[idx])
                    for layer, (mu, sigma) in bank_tensors.items()
                }
            rows = model.text_encoder(token_ids)
            breakdowns = batched_objective(model, images, targets, rows, styles)
            loss = torch.stack([lb.total for lb in breakdowns]).mean()
            if not bool(torch.isfinite(loss)):
                logger.warning(
                    "non-finite loss at epoch %d; aborting with last good weights",
                    epoch,
                )
                aborted = True
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
        if aborted:
            break
        val_map = evaluate(model, val_ds, prompt).map50
        history.append(val_map)
        logger.info("epoch %d/%d: val map50=%.4f", epoch, cfg.epochs, val_map)
        if ckpt_dir is not None:
            save_checkpoint(
                ckpt_dir / f"epoch_{epoch:03d}.pt",
                model,
                meta={
                    "epoch": epoch,
                    "val_map50": val_map,
                    "stage": stage_tag,
                    "train_config": cfg.to_json(),
                },
            )
        if val_map > best_map:
            best_map = val_map
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

    if best_state is None:
        # aborted before the first full epoch: current weights are the last
        # consistent state (the bad update is never applied)
        best_state = copy.deepcopy(model.state_dict())
        best_map = evaluate(model, val_ds, prompt).map50
    model.load_state_dict(best_state)
    if ckpt_dir is not None and not keep_all:
        for p in sorted(ckpt_dir.glob("epoch_*.pt")):
            if p.name != f"epoch_{best_epoch:03d}.pt":
                p.unlink()
    return Checkpoint(
        model=model,
        epoch=best_epoch,
        val_map50=best_map,
        history=history,
        aborted=aborted,
    )


def train_source_aug(
    model: GroundingModel,
    train_ds: DetectionDataset,
    val_ds: DetectionDataset,
    prompt_s: Prompt,
    cfg: TrainConfig,
    out_dir=None,
    keep_all: bool = False,
) -> Checkpoint:
    """Train on source images with the source prompt, no style injection."""
    return _run_training(
        model, train_ds, val_ds, prompt_s, cfg, banks=None,
        out_dir=out_dir, keep_all=keep_all, stage_tag="source_aug",
    )


def finetune_with_pgst(
    model: GroundingModel,
    train_ds: DetectionDataset,
    val_ds: DetectionDataset,
    prompt_t: Prompt,
    banks: list[StyleBank] | StyleBank,
    cfg: TrainConfig,
    out_dir=None,
    keep_all: bool = False,
) -> Checkpoint:
    """Fine-tune on source images with the target prompt and injected styles.

    Each batch element independently draws one bank index (shared across
    hook layers, which therefore need aligned banks).  Styles are constants:
    no gradient flows into the bank.
    """
    if isinstance(banks, StyleBank):
        banks = [banks]
    return _run_training(
        model, train_ds, val_ds, prompt_t, cfg, banks=banks,
        out_dir=out_dir, keep_all=keep_all, stage_tag="pgst_finetune",
    )


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_thresh: float) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices, best first.

    Ties in score are broken toward the lower index.
    """
    if boxes.shape[0] == 0:
        return []
    order = torch.argsort(-scores, stable=True)
    iou_mat = pairwise_iou(boxes, boxes)
    keep: list[int] = []
    suppressed = torch.zeros(boxes.shape[0], dtype=torch.bool)
    for i in order.tolist():
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= iou_mat[i] > iou_thresh
        suppressed[i] = True
    return keep


def infer_batched(
    model: GroundingModel,
    images: torch.Tensor,
    prompt: Prompt,
    score_thresh: float = SCORE_THRESH,
    nms_iou: float = NMS_IOU,
) -> list[list[Detection]]:
    """Detections for a stacked (B, 3, H, W) batch, sorted by score."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise InvalidInputError("images must be (B, 3, H, W)")
    with torch.no_grad():
        regions = batched_regions(model, images)
        rows = model.text_encoder(tokenize(prompt, model.vocab))
        out = []
        for r in regions:
            scores = torch.sigmoid(alignment(r.features, rows))
            dets: list[Detection] = []
            w = r.boxes[:, 2] - r.boxes[:, 0]
            h = r.boxes[:, 3] - r.boxes[:, 1]
            valid = (w > 0) & (h > 0)
            for c in range(scores.shape[1]):
                mask = (scores[:, c] >= score_thresh) & valid
                if not bool(mask.any()):
                    continue
                idx = torch.nonzero(mask, as_tuple=False).squeeze(1)
                kept = nms(r.boxes[idx], scores[idx, c], nms_iou)
                for k in kept:
                    gi = int(idx[k])
                    dets.append(
                        Detection(
                            box=tuple(float(v) for v in r.boxes[gi]),
                            class_id=c,
                            score=float(scores[gi, c]),
                        )
                    )
            dets.sort(key=lambda d: (-d.score, d.class_id, d.box))
            out.append(dets)
    return out


def infer(
    model: GroundingModel,
    image: torch.Tensor,
    prompt: Prompt,
    score_thresh: float = SCORE_THRESH,
    nms_iou: float = NMS_IOU,
) -> list[Detection]:
    """Detections for one (3, H, W) image, sorted by descending score."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise InvalidInputError("image must be (3, H, W)")
    return infer_batched(
        model, image[None], prompt, score_thresh=score_thresh, nms_iou=nms_iou
    )[0]
