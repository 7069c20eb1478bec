"""Fitting target-domain channel statistics from prompts alone.

A style (per-channel mean and std at one encoder layer) is initialized from
a source image's own statistics and then optimized by momentum SGD to
minimize the grounding + localization objective computed with the TARGET
prompt and the source image's annotations.  The model is frozen throughout;
gradients flow through activations into the injected statistics only.

Weight decay is applied as a direct multiplicative shrinkage after the
gradient step, so it acts even when the learning rate is zero.
"""

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .datagen import DetectionDataset, DetectionSample
from .determinism import deterministic_mode
from .errors import (
    ConfigError,
    DivergedError,
    InvalidInputError,
    ParseError,
    ShapeError,
)
from .featstats import ChannelStyle, EPS_STYLE, batched_channel_stats
from .groundnet import GroundingModel, batched_objective
from .prompts import Prompt, tokenize

logger = logging.getLogger(__name__)

BANK_CHUNK = 16


@dataclass
class StyleFitConfig:
    """Optimization settings for style fitting."""

    iterations: int = 100
    lr: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    hook_layer: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.lr < 0 or not (0 <= self.momentum < 1) or self.weight_decay < 0:
            raise ConfigError("lr/momentum/weight_decay out of range")
        if self.hook_layer < 1:
            raise ConfigError("hook_layer must be >= 1")

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "hook_layer": self.hook_layer,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "StyleFitConfig":
        try:
            cfg = cls(
                iterations=int(obj["iterations"]),
                lr=float(obj["lr"]),
                momentum=float(obj["momentum"]),
                weight_decay=float(obj["weight_decay"]),
                hook_layer=int(obj["hook_layer"]),
                seed=int(obj.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed fit config: {exc}") from exc
        cfg.validate()
        return cfg


@contextmanager
def _frozen(model: GroundingModel):
    """Temporarily freeze parameters and switch to eval mode."""
    states = [(p, p.requires_grad) for p in model.parameters()]
    was_training = model.training
    for p, _ in states:
        p.requires_grad_(False)
    model.eval()
    try:
        yield
    finally:
        for p, rg in states:
            p.requires_grad_(rg)
        model.train(was_training)


class _StyleSGD:
    """Momentum SGD over style tensors with lr-independent weight decay.

    Per step: v <- momentum * v + grad; p <- (p - lr * v) * (1 - wd).
    """

    def __init__(self, params: list[torch.Tensor], cfg: StyleFitConfig):
        self.params = params
        self.lr = cfg.lr
        self.momentum = cfg.momentum
        self.shrink = 1.0 - cfg.weight_decay
        self.velocity = [torch.zeros_like(p) for p in params]

    @torch.no_grad()
    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is not None:
                v.mul_(self.momentum).add_(p.grad)
                p.add_(v, alpha=-self.lr)
            p.mul_(self.shrink)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def _fit_batch(
    model: GroundingModel,
    images: torch.Tensor,
    targets: list[tuple[torch.Tensor, torch.Tensor]],
    prompt: Prompt,
    cfg: StyleFitConfig,
    hook_layers: tuple[int, ...],
):
    """Optimize one style per (image, hook layer) jointly over a batch.

    Returns ({layer: (mu, sigma) tensors of shape (B, C)}, traces (B, it+1)).
    Per-image losses are summed, so each image's style follows exactly the
    trajectory it would follow alone (updates are elementwise).
    """
    for layer in hook_layers:
        if not (1 <= layer <= model.config.num_levels):
            raise ConfigError(f"hook layer {layer} outside model range")
    b = images.shape[0]
    with _frozen(model):
        with torch.no_grad():
            feats = model.image_encoder(images.to(model.dtype))
            params: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}
            for layer in hook_layers:
                mu0, sigma0 = batched_channel_stats(feats[layer - 1])
                params[layer] = (
                    mu0.clone().requires_grad_(True),
                    sigma0.clone().requires_grad_(True),
                )
            rows = model.text_encoder(tokenize(prompt, model.vocab))
        flat = [t for pair in params.values() for t in pair]
        opt = _StyleSGD(flat, cfg)

        traces = [[] for _ in range(b)]
        for k in range(cfg.iterations + 1):
            breakdowns = batched_objective(
                model, images, targets, rows, styles=params
            )
            totals = [lb.total for lb in breakdowns]
            for i, t in enumerate(totals):
                val = float(t.detach())
                if not math.isfinite(val):
                    raise DivergedError(
                        f"style objective non-finite at iteration {k}"
                        f" (batch element {i})",
                        iteration=k,
                    )
                traces[i].append(val)
            if k == cfg.iterations:
                break
            opt.zero_grad()
            torch.stack(totals).sum().backward()
            opt.step()
            with torch.no_grad():
                for layer in hook_layers:
                    params[layer][1].clamp_(min=EPS_STYLE)

    out = {
        layer: (mu.detach(), sigma.detach()) for layer, (mu, sigma) in params.items()
    }
    return out, traces


def fit_style(
    model: GroundingModel,
    sample: DetectionSample,
    prompt_t: Prompt,
    cfg: StyleFitConfig,
) -> tuple[ChannelStyle, list[float]]:
    """Fit one style for one source image against the target prompt.

    Returns the final style and the total-loss trace (index 0 is the loss
    at initialization; length is ``cfg.iterations + 1``).
    """
    cfg.validate()
    sample.validate()
    if sample.boxes.shape[0] == 0:
        raise InvalidInputError(f"sample {sample.id} has no ground-truth boxes")
    params, traces = _fit_batch(
        model,
        sample.image[None],
        [(sample.boxes, sample.labels)],
        prompt_t,
        cfg,
        (cfg.hook_layer,),
    )
    mu, sigma = params[cfg.hook_layer]
    return ChannelStyle(mu[0], sigma[0]), traces[0]


@dataclass
class StyleBank:
    """Fitted styles for a whole source dataset, in dataset order."""

    domain_tag: str
    hook_layer: int
    fit_config: StyleFitConfig
    styles: list[ChannelStyle]
    image_ids: list[str]

    def __post_init__(self):
        if len(self.styles) != len(self.image_ids):
            raise InvalidInputError("styles and image_ids must align")
        channels = {s.num_channels for s in self.styles}
        if len(channels) > 1:
            raise InvalidInputError(f"inconsistent channel counts: {channels}")

    def __len__(self) -> int:
        return len(self.styles)

    def as_tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Stacked (N, C) mu and sigma for fast sampling."""
        if not self.styles:
            raise InvalidInputError("style bank is empty")
        mu = torch.stack([s.mu for s in self.styles])
        sigma = torch.stack([s.sigma for s in self.styles])
        return mu, sigma


def build_style_banks(
    model: GroundingModel,
    dataset: DetectionDataset,
    prompt_t: Prompt,
    cfg: StyleFitConfig,
    hook_layers: tuple[int, ...] | None = None,
    indices: list[int] | None = None,
) -> dict[int, StyleBank]:
    """Fit styles for every dataset image at one or more hook layers.

    Images are processed in chunks sharing one batched forward pass per
    optimization step; in deterministic mode they are processed one at a
    time.  A diverging image is skipped (at every layer) and logged, never
    fatal.  Returns one bank per hook layer, all aligned image-for-image.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise InvalidInputError("dataset is empty")
    layers = tuple(hook_layers) if hook_layers else (cfg.hook_layer,)
    if len(set(layers)) != len(layers):
        raise ConfigError(f"duplicate hook layers: {layers}")
    if indices is None:
        indices = list(range(len(dataset)))
    chunk = 1 if deterministic_mode() else BANK_CHUNK

    per_layer: dict[int, list[ChannelStyle]] = {l: [] for l in layers}
    kept_ids: list[str] = []
    for start in range(0, len(indices), chunk):
        batch_idx = indices[start : start + chunk]
        images = dataset.image_batch(batch_idx)
        targets = [dataset.targets(i) for i in batch_idx]
        try:
            params, _ = _fit_batch(model, images, targets, prompt_t, cfg, layers)
            for j, ds_i in enumerate(batch_idx):
                for l in layers:
                    per_layer[l].append(
                        ChannelStyle(params[l][0][j].clone(), params[l][1][j].clone())
                    )
                kept_ids.append(dataset.sample_id(ds_i))
        except DivergedError:
            # retry images of this chunk individually, skipping the bad ones
            for ds_i in batch_idx:
                try:
                    params, _ = _fit_batch(
                        model,
                        dataset.image_batch([ds_i]),
                        [dataset.targets(ds_i)],
                        prompt_t,
                        cfg,
                        layers,
                    )
                except DivergedError as exc:
                    logger.warning(
                        "skipping image %s: diverged at iteration %d",
                        dataset.sample_id(ds_i),
                        exc.iteration,
                    )
                    continue
                for l in layers:
                    per_layer[l].append(
                        ChannelStyle(params[l][0][0].clone(), params[l][1][0].clone())
                    )
                kept_ids.append(dataset.sample_id(ds_i))

    return {
        l: StyleBank(
            domain_tag=prompt_t.domain_tag,
            hook_layer=l,
            fit_config=replace(cfg, hook_layer=l),
            styles=per_layer[l],
            image_ids=list(kept_ids),
        )
        for l in layers
    }


def build_style_bank(
    model: GroundingModel,
    dataset: DetectionDataset,
    prompt_t: Prompt,
    cfg: StyleFitConfig,
    indices: list[int] | None = None,
) -> StyleBank:
    """Single-layer convenience wrapper around :func:`build_style_banks`."""
    return build_style_banks(model, dataset, prompt_t, cfg, indices=indices)[
        cfg.hook_layer
    ]


def sample_style(bank: StyleBank, rng: np.random.Generator) -> ChannelStyle:
    """Uniformly sample one style from the bank (with replacement)."""
    if len(bank) == 0:
        raise InvalidInputError("style bank is empty")
    return bank.styles[int(rng.integers(len(bank)))]


def save_style_bank(bank: StyleBank, path) -> None:
    payload = {
        "domain_tag": bank.domain_tag,
        "hook_layer": bank.hook_layer,
        "fit_config": bank.fit_config.to_json(),
        "styles": [
            {**style.to_json(), "image_id": image_id}
            for style, image_id in zip(bank.styles, bank.image_ids)
        ],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_style_bank(path) -> StyleBank:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read style bank {path}: {exc}") from exc
    try:
        styles = [ChannelStyle.from_json(rec) for rec in payload["styles"]]
        image_ids = [str(rec["image_id"]) for rec in payload["styles"]]
        return StyleBank(
            domain_tag=str(payload["domain_tag"]),
            hook_layer=int(payload["hook_layer"]),
            fit_config=StyleFitConfig.from_json(payload["fit_config"]),
            styles=styles,
            image_ids=image_ids,
        )
    except (KeyError, TypeError, ValueError, InvalidInputError, ShapeError) as exc:
        raise ParseError(f"malformed style bank {path}: {exc}") from exc
