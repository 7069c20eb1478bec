"""Detection metrics, dataset evaluation, sweeps, and feature export.

AP follows the all-points interpolation convention: detections are matched
greedily in descending score order, each ground-truth box consumed at most
once (a detection takes the highest-IoU unmatched box), and AP is the area
under the precision envelope of the resulting PR curve.  mAP averages AP
over the classes that have at least one ground-truth instance.
"""

import copy
import csv
import hashlib
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .datagen import DetectionDataset
from .errors import ConfigError, InvalidInputError
from .featstats import batched_channel_stats
from .groundnet import GroundingModel, parameter_fingerprint
from .prompts import Prompt

logger = logging.getLogger(__name__)

SCORE_THRESH = 0.05
NMS_IOU = 0.5
EVAL_BATCH = 32
SWEEP_CSV_HEADER = ("iters", "map50", "domain", "seed")

Box = tuple[float, float, float, float]


def _check_box(b) -> Box:
    if len(b) != 4:
        raise InvalidInputError(f"box must have 4 coordinates, got {len(b)}")
    x1, y1, x2, y2 = (float(v) for v in b)
    if not (x2 > x1 and y2 > y1):
        raise InvalidInputError(f"degenerate box: {(x1, y1, x2, y2)}")
    return (x1, y1, x2, y2)


def iou(a, b) -> float:
    """Intersection over union of two [x1, y1, x2, y2] boxes."""
    a = _check_box(a)
    b = _check_box(b)
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def average_precision(preds, gts, iou_thresh: float = 0.5) -> float:
    """AP of one detection pool against one ground-truth pool.

    ``preds`` is a list of (box, score) sorted by descending score; ``gts``
    is a list of boxes.  Each prediction greedily takes the unmatched
    ground-truth box it overlaps best (degenerate predictions never match).
    Returns 0.0 when there is nothing to recall.
    """
    if not (0.0 < iou_thresh <= 1.0):
        raise ConfigError(f"iou_thresh out of range: {iou_thresh}")
    gts = [_check_box(g) for g in gts]
    if not gts:
        return 0.0
    order = sorted(range(len(preds)), key=lambda i: -float(preds[i][1]))
    g = np.asarray(gts, dtype=np.float64)
    g_area = (g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])
    matched = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(order), dtype=np.int64)
    for rank, i in enumerate(order):
        x1, y1, x2, y2 = (float(v) for v in preds[i][0])
        if x2 <= x1 or y2 <= y1:
            continue
        ix = np.minimum(g[:, 2], x2) - np.maximum(g[:, 0], x1)
        iy = np.minimum(g[:, 3], y2) - np.maximum(g[:, 1], y1)
        inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
        iou_v = inter / ((x2 - x1) * (y2 - y1) + g_area - inter)
        iou_v[matched] = -1.0
        j = int(np.argmax(iou_v))
        if iou_v[j] >= iou_thresh:
            matched[j] = True
            tp[rank] = 1

    if not len(order):
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(order) + 1)
    recall = ctp / len(gts)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev = 0.0
    for k in np.flatnonzero(tp):
        ap += (recall[k] - prev) * envelope[k]
        prev = recall[k]
    return float(ap)


@dataclass
class EvalReport:
    """Aggregated detection quality of one checkpoint on one dataset."""

    domain_tag: str
    map50: float
    per_class_ap: dict[str, float]
    num_images: int
    config_fingerprint: str
    tag: str = ""

    def to_json(self) -> dict:
        return {
            "domain_tag": self.domain_tag,
            "map50": self.map50,
            "per_class_ap": dict(self.per_class_ap),
            "num_images": self.num_images,
            "config_fingerprint": self.config_fingerprint,
            "tag": self.tag,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls(
            domain_tag=str(obj["domain_tag"]),
            map50=float(obj["map50"]),
            per_class_ap={str(k): float(v) for k, v in obj["per_class_ap"].items()},
            num_images=int(obj["num_images"]),
            config_fingerprint=str(obj["config_fingerprint"]),
            tag=str(obj.get("tag", "")),
        )


def _image_offset(i: int) -> float:
    # separates images in a shared coordinate plane so one flat matching
    # pass per class is exactly per-image matching with global ranking
    return 100000.0 * (i + 1)


def evaluate(
    model: GroundingModel,
    dataset: DetectionDataset,
    prompt: Prompt,
    score_thresh: float = SCORE_THRESH,
    nms_iou: float = NMS_IOU,
    tag: str = "",
) -> EvalReport:
    """Mean AP at IoU 0.5 of ``model`` with ``prompt`` over ``dataset``."""
    from .trainer import infer_batched  # late import; trainer uses this module

    if len(dataset) == 0:
        raise InvalidInputError("no images to evaluate")
    if len(prompt) != len(dataset.classes):
        raise ConfigError(
            f"prompt has {len(prompt)} phrases for {len(dataset.classes)} classes"
        )
    num_classes = len(dataset.classes)
    preds_by_class = {c: [] for c in range(num_classes)}
    gts_by_class = {c: [] for c in range(num_classes)}

    for start in range(0, len(dataset), EVAL_BATCH):
        idx = list(range(start, min(start + EVAL_BATCH, len(dataset))))
        detections = infer_batched(
            model, dataset.image_batch(idx), prompt,
            score_thresh=score_thresh, nms_iou=nms_iou,
        )
        for local, i in enumerate(idx):
            off = _image_offset(i)
            for det in detections[local]:
                x1, y1, x2, y2 = det.box
                preds_by_class[det.class_id].append(
                    ((x1 + off, y1, x2 + off, y2), det.score)
                )
            boxes, labels = dataset.targets(i)
            for b, lab in zip(boxes.tolist(), labels.tolist()):
                gts_by_class[int(lab)].append(
                    (b[0] + off, b[1], b[2] + off, b[3])
                )

    per_class_ap = {}
    for c in range(num_classes):
        if not gts_by_class[c]:
            continue  # classes without ground truth do not enter the mean
        preds = sorted(preds_by_class[c], key=lambda p: -p[1])
        per_class_ap[dataset.classes.names[c]] = average_precision(
            preds, gts_by_class[c], iou_thresh=0.5
        )
    map50 = (
        sum(per_class_ap.values()) / len(per_class_ap) if per_class_ap else 0.0
    )
    fp_src = json.dumps(
        {
            "model": parameter_fingerprint(model),
            "score_thresh": score_thresh,
            "nms_iou": nms_iou,
            "prompt": prompt.to_json(),
            "num_images": len(dataset),
        },
        sort_keys=True,
    )
    return EvalReport(
        domain_tag=dataset[0].domain_tag if len(dataset) else "",
        map50=map50,
        per_class_ap=per_class_ap,
        num_images=len(dataset),
        config_fingerprint=hashlib.sha256(fp_src.encode("utf-8")).hexdigest(),
        tag=tag,
    )


def sweep_iterations(
    base_model: GroundingModel,
    src_train: DetectionDataset,
    src_val: DetectionDataset,
    target_test: DetectionDataset,
    prompt_t: Prompt,
    iter_grid: list[int],
    fit_cfg,
    train_cfg,
    bank_indices: list[int] | None = None,
    csv_path=None,
) -> list[dict]:
    """One style-fit + finetune + eval cycle per grid point, shared seed.

    Rows come back in grid order as dicts with keys iters/map50/domain/seed.
    """
    from .styleengine import build_style_bank
    from .trainer import finetune_with_pgst

    if not iter_grid:
        raise ConfigError("iteration grid is empty")
    if list(iter_grid) != sorted(set(int(i) for i in iter_grid)):
        raise ConfigError(f"grid must be strictly ascending: {iter_grid}")
    if iter_grid[0] != 0:
        raise ConfigError("grid must include 0 as its first point")

    rows = []
    for iters in iter_grid:
        cfg_i = replace(fit_cfg, iterations=int(iters))
        bank = build_style_bank(
            base_model, src_train, prompt_t, cfg_i, indices=bank_indices
        )
        model_i = copy.deepcopy(base_model)
        ckpt = finetune_with_pgst(
            model_i, src_train, src_val, prompt_t, [bank], train_cfg
        )
        report = evaluate(ckpt.model, target_test, prompt_t)
        rows.append(
            {
                "iters": int(iters),
                "map50": report.map50,
                "domain": report.domain_tag,
                "seed": train_cfg.seed,
            }
        )
        logger.info("sweep iters=%d -> map50=%.4f", iters, report.map50)
    if csv_path is not None:
        write_sweep_csv(rows, csv_path)
    return rows


def write_sweep_csv(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_CSV_HEADER)
        for r in rows:
            writer.writerow([r["iters"], f"{r['map50']:.6f}", r["domain"], r["seed"]])


def export_features(
    model: GroundingModel,
    dataset: DetectionDataset,
    hook_layer: int,
    bank=None,
    csv_path=None,
) -> list[list]:
    """Per-image channel statistics of the hook layer, flattened to 2C.

    Without a bank: one row per image (styled=false).  With a bank: a second
    row per image holding the statistics after injecting the style fitted
    for that image (matched by image id, falling back to position).
    """
    if len(dataset) == 0:
        raise InvalidInputError("dataset is empty")
    if not (1 <= hook_layer <= model.config.num_levels):
        raise ConfigError(f"hook layer {hook_layer} outside model range")
    id_to_style = {}
    if bank is not None and len(bank):
        id_to_style = {iid: s for iid, s in zip(bank.image_ids, bank.styles)}

    rows = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(dataset), EVAL_BATCH):
            idx = list(range(start, min(start + EVAL_BATCH, len(dataset))))
            images = dataset.image_batch(idx).to(model.dtype)
            feats = model.image_encoder(images)
            mu, sigma = batched_channel_stats(feats[hook_layer - 1])
            for local, i in enumerate(idx):
                vec = torch.cat([mu[local], sigma[local]]).tolist()
                rows.append(
                    [dataset.sample_id(i), dataset[i].domain_tag, False, *vec]
                )
            if bank is not None and len(bank):
                styled_mu, styled_sigma = [], []
                for local, i in enumerate(idx):
                    s = id_to_style.get(
                        dataset.sample_id(i), bank.styles[i % len(bank)]
                    )
                    styled_mu.append(s.mu)
                    styled_sigma.append(s.sigma)
                styles = {
                    bank.hook_layer: (
                        torch.stack(styled_mu).to(model.dtype),
                        torch.stack(styled_sigma).to(model.dtype),
                    )
                }
                feats_s = model.image_encoder(images, styles)
                mu_s, sigma_s = batched_channel_stats(feats_s[hook_layer - 1])
                for local, i in enumerate(idx):
                    vec = torch.cat([mu_s[local], sigma_s[local]]).tolist()
                    rows.append(
                        [dataset.sample_id(i), dataset[i].domain_tag, True, *vec]
                    )

    if csv_path is not None:
        c = len(rows[0]) - 3 if rows else 0
        half = c // 2
        header = (
            ["image_id", "domain_tag", "styled"]
            + [f"mu_{j}" for j in range(half)]
            + [f"sigma_{j}" for j in range(half)]
        )
        path = Path(csv_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for r in rows:
                writer.writerow(
                    r[:2] + [str(bool(r[2])).lower()] + [f"{v:.8g}" for v in r[3:]]
                )
    return rows
