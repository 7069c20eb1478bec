"""Compact grounded detector: conv pyramid, phrase encoder, region head.

The image encoder is a stack of stride-2 convolutions (no normalization
layers, so injected channel statistics survive to the next layer).  The
text encoder embeds tokens, mean-pools each phrase, and projects.  A region
head on the deepest level emits per-anchor objectness, box deltas, and a
feature vector; region-phrase alignment is the plain dot product between
region features and phrase embeddings.

Losses follow the two-term grounding objective: smooth-L1 box regression on
regions that match a ground-truth box at IoU >= 0.5, plus binary cross
entropy between alignment logits and region-phrase match indicators.
"""

import hashlib
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InvalidInputError, ParseError, ShapeError
from .featstats import FeatureMap, batched_style_apply, ChannelStyle
from .prompts import Prompt, Vocabulary, tokenize, UNK_ID

CHECKPOINT_MAGIC = "PGSTCKPT1"
LEAKY_SLOPE = 0.1
MATCH_IOU = 0.5
DELTA_CLAMP = 4.0

AlignmentMatrix = torch.Tensor  # (num_regions, num_phrases) logits


@dataclass
class ModelConfig:
    """Architecture hyperparameters.  Defaults fit the 128px benchmark."""

    level_channels: tuple[int, ...] = (8, 16, 32, 32, 64)
    embed_dim: int = 64
    proposal_cap: int = 64
    anchor_sizes: tuple[float, ...] = (36.0, 48.0, 64.0, 84.0)
    style_hook_layer: int = 1

    def __post_init__(self):
        self.level_channels = tuple(int(c) for c in self.level_channels)
        self.anchor_sizes = tuple(float(s) for s in self.anchor_sizes)
        if not self.level_channels or any(c < 1 for c in self.level_channels):
            raise ConfigError("level_channels must be positive and non-empty")
        if self.embed_dim < 1 or self.proposal_cap < 1:
            raise ConfigError("embed_dim and proposal_cap must be >= 1")
        if not self.anchor_sizes or any(s <= 0 for s in self.anchor_sizes):
            raise ConfigError("anchor_sizes must be positive and non-empty")
        if not (1 <= self.style_hook_layer <= len(self.level_channels)):
            raise ConfigError(
                f"style_hook_layer must be in [1, {len(self.level_channels)}]"
            )

    @property
    def num_levels(self) -> int:
        return len(self.level_channels)

    @property
    def stride(self) -> int:
        return 2 ** self.num_levels

    def to_json(self) -> dict:
        return {
            "level_channels": list(self.level_channels),
            "embed_dim": self.embed_dim,
            "proposal_cap": self.proposal_cap,
            "anchor_sizes": list(self.anchor_sizes),
            "style_hook_layer": self.style_hook_layer,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        try:
            return cls(
                level_channels=tuple(obj["level_channels"]),
                embed_dim=int(obj["embed_dim"]),
                proposal_cap=int(obj["proposal_cap"]),
                anchor_sizes=tuple(obj["anchor_sizes"]),
                style_hook_layer=int(obj["style_hook_layer"]),
            )
        except (KeyError, TypeError, ValueError, ConfigError) as exc:
            raise ParseError(f"malformed model config: {exc}") from exc


@dataclass
class RegionSet:
    """Top-scoring candidate regions of one image, in selection order."""

    boxes: torch.Tensor       # (K, 4) decoded, clipped to the image
    deltas: torch.Tensor      # (K, 4) raw regression output
    anchors: torch.Tensor     # (K, 4) matching anchor boxes
    objectness: torch.Tensor  # (K,)
    features: torch.Tensor    # (K, embed_dim)
    image_size: tuple[int, int]  # (H, W)

    def __len__(self) -> int:
        return self.boxes.shape[0]


@dataclass
class PhraseEmbedding:
    """One row per prompt phrase, plus a phrase -> row lookup."""

    rows: torch.Tensor  # (num_phrases, embed_dim)
    phrase_index: dict[str, int]


@dataclass
class LossBreakdown:
    loc: torch.Tensor
    ground: torch.Tensor
    total: torch.Tensor = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.total is None:
            self.total = self.loc + self.ground


class _ImageEncoder(nn.Module):
    def __init__(self, level_channels: tuple[int, ...]):
        super().__init__()
        convs = []
        c_in = 3
        for c_out in level_channels:
            convs.append(nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1))
            c_in = c_out
        self.convs = nn.ModuleList(convs)

    def forward(self, x: torch.Tensor, styles=None) -> list[torch.Tensor]:
        """Run the pyramid; ``styles`` maps 1-based layer index to (mu, sigma)."""
        x = x * 2.0 - 1.0
        feats = []
        for i, conv in enumerate(self.convs):
            x = F.leaky_relu(conv(x), LEAKY_SLOPE)
            if styles and (i + 1) in styles:
                mu, sigma = styles[i + 1]
                x = batched_style_apply(x, mu, sigma)
            feats.append(x)
        return feats


class _TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, embed_dim: int):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, embed_dim)
        self.proj = nn.Linear(embed_dim, embed_dim)
        nn.init.normal_(self.embedding.weight, std=0.5)

    def forward(self, token_ids: list[list[int]]) -> torch.Tensor:
        dev = self.embedding.weight.device
        pooled = []
        for ids in token_ids:
            if not ids:
                ids = [UNK_ID]
            idx = torch.tensor(ids, dtype=torch.int64, device=dev)
            pooled.append(self.embedding(idx).mean(dim=0))
        return self.proj(torch.stack(pooled))


class _RegionHead(nn.Module):
    def __init__(self, c_in: int, num_anchor_sizes: int, embed_dim: int):
        super().__init__()
        self.num_anchor_sizes = num_anchor_sizes
        self.embed_dim = embed_dim
        self.conv = nn.Conv2d(
            c_in, num_anchor_sizes * (5 + embed_dim), kernel_size=3, padding=1
        )
        nn.init.zeros_(self.conv.bias)

    def forward(self, top: torch.Tensor):
        """(B, C, h, w) -> objectness (B, N), deltas (B, N, 4), feats (B, N, d).

        Anchor order is cell-major (row, then column), then anchor size.
        """
        b, _, h, w = top.shape
        a, d = self.num_anchor_sizes, self.embed_dim
        out = self.conv(top)  # (B, A*(5+d), h, w)
        out = out.reshape(b, a, 5 + d, h, w).permute(0, 3, 4, 1, 2)
        out = out.reshape(b, h * w * a, 5 + d)
        objectness = out[:, :, 0]
        deltas = out[:, :, 1:5]
        feats = out[:, :, 5:]
        return objectness, deltas, feats


class GroundingModel(nn.Module):
    """Detector surrogate pairing the conv pyramid with a phrase encoder."""

    def __init__(
        self,
        config: ModelConfig,
        vocab: Vocabulary,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.config = config
        self.vocab = vocab
        self.init_seed = seed
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.image_encoder = _ImageEncoder(config.level_channels)
            self.text_encoder = _TextEncoder(len(vocab), config.embed_dim)
            self.box_head = _RegionHead(
                config.level_channels[-1], len(config.anchor_sizes), config.embed_dim
            )
        self.to(dtype)
        self._anchor_cache: dict = {}

    @property
    def dtype(self) -> torch.dtype:
        return self.box_head.conv.weight.dtype

    def anchors_for(self, h: int, w: int) -> torch.Tensor:
        """Anchor boxes for a top-level grid of shape (h, w), shape (N, 4)."""
        key = (h, w, self.dtype)
        cached = self._anchor_cache.get(key)
        if cached is not None:
            return cached
        stride = self.config.stride
        sizes = torch.tensor(self.config.anchor_sizes, dtype=self.dtype)
        ys = (torch.arange(h, dtype=self.dtype) + 0.5) * stride
        xs = (torch.arange(w, dtype=self.dtype) + 0.5) * stride
        cy = ys.repeat_interleave(w).repeat_interleave(len(sizes))
        cx = xs.repeat(h).repeat_interleave(len(sizes))
        s = sizes.repeat(h * w)
        boxes = torch.stack(
            [cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2], dim=1
        )
        self._anchor_cache[key] = boxes
        return boxes


def parameter_fingerprint(module: nn.Module) -> str:
    """SHA-256 over all named parameters (name, shape, dtype, raw bytes)."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        h.update(name.encode("utf-8"))
        h.update(str(tuple(p.shape)).encode("utf-8"))
        h.update(str(p.dtype).encode("utf-8"))
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _style_dict(model, style, hook_layer):
    """Normalize the (style, hook_layer) pair into the encoder's dict form."""
    if style is None:
        return None, hook_layer
    hook = model.config.style_hook_layer if hook_layer is None else hook_layer
    if not (1 <= hook <= model.config.num_levels):
        raise ConfigError(f"hook layer {hook} outside [1, {model.config.num_levels}]")
    expected = model.config.level_channels[hook - 1]
    if style.num_channels != expected:
        raise ShapeError(
            f"style has {style.num_channels} channels, layer {hook} has {expected}"
        )
    mu = style.mu.to(model.dtype)
    sigma = style.sigma.to(model.dtype)
    return {hook: (mu, sigma)}, hook


def encode_image(
    model: GroundingModel,
    image: torch.Tensor,
    style: ChannelStyle | None = None,
    hook_layer: int | None = None,
) -> list[FeatureMap]:
    """Feature maps of all pyramid levels for one (3, H, W) image in [0, 1].

    When ``style`` is given, the hook layer's statistics are replaced before
    deeper layers run.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError("image must be (3, H, W)")
    if not bool(torch.isfinite(image).all()):
        raise InvalidInputError("image contains non-finite values")
    styles, _ = _style_dict(model, style, hook_layer)
    feats = model.image_encoder(image[None].to(model.dtype), styles)
    return [f[0] for f in feats]


def encode_prompt(model: GroundingModel, prompt: Prompt) -> PhraseEmbedding:
    """Embed every phrase of ``prompt`` with the model's text encoder."""
    ids = tokenize(prompt, model.vocab)
    rows = model.text_encoder(ids)
    index = {}
    for i, phrase in enumerate(prompt.phrases):
        index.setdefault(phrase, i)
    return PhraseEmbedding(rows=rows, phrase_index=index)


def _select_topk(objectness: torch.Tensor, cap: int) -> torch.Tensor:
    """Indices of the top-scoring anchors; ties broken by anchor index."""
    k = min(cap, objectness.shape[0])
    order = torch.argsort(-objectness, stable=True)
    return order[:k]


def decode_deltas(anchors: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """Faster-RCNN-style delta decoding, exp clamped to +-DELTA_CLAMP."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * torch.exp(deltas[:, 2].clamp(-DELTA_CLAMP, DELTA_CLAMP))
    h = ah * torch.exp(deltas[:, 3].clamp(-DELTA_CLAMP, DELTA_CLAMP))
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)


def encode_deltas(anchors: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    """Regression targets that decode ``anchors`` onto ``boxes``."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bx = boxes[:, 0] + bw / 2
    by = boxes[:, 1] + bh / 2
    return torch.stack(
        [(bx - ax) / aw, (by - ay) / ah, torch.log(bw / aw), torch.log(bh / ah)],
        dim=1,
    )


def _clip_boxes(boxes: torch.Tensor, h: int, w: int) -> torch.Tensor:
    x1 = boxes[:, 0].clamp(0, w)
    y1 = boxes[:, 1].clamp(0, h)
    x2 = boxes[:, 2].clamp(0, w)
    y2 = boxes[:, 3].clamp(0, h)
    return torch.stack([x1, y1, x2, y2], dim=1)


def _regions_from_head(
    model: GroundingModel,
    objectness: torch.Tensor,
    deltas: torch.Tensor,
    feats: torch.Tensor,
    grid_hw: tuple[int, int],
    image_size: tuple[int, int],
) -> RegionSet:
    """Assemble one image's RegionSet from flat head outputs."""
    anchors = model.anchors_for(*grid_hw)
    keep = _select_topk(objectness.detach(), model.config.proposal_cap)
    sel_anchors = anchors[keep]
    sel_deltas = deltas[keep]
    boxes = _clip_boxes(decode_deltas(sel_anchors, sel_deltas), *image_size)
    return RegionSet(
        boxes=boxes,
        deltas=sel_deltas,
        anchors=sel_anchors,
        objectness=objectness[keep],
        features=feats[keep],
        image_size=image_size,
    )


def propose_regions(
    model: GroundingModel,
    features: list[FeatureMap],
    image_size: tuple[int, int] | None = None,
) -> RegionSet:
    """Top-K regions from the deepest feature level of one image.

    ``image_size`` defaults to the grid extent (exact whenever the input
    side lengths are divisible by the pyramid stride).
    """
    if len(features) != model.config.num_levels:
        raise ShapeError(
            f"expected {model.config.num_levels} feature levels, got {len(features)}"
        )
    top = features[-1]
    if top.ndim != 3:
        raise ShapeError("feature maps must be (C, H, W)")
    h, w = top.shape[1], top.shape[2]
    if image_size is None:
        image_size = (h * model.config.stride, w * model.config.stride)
    obj, deltas, feats = model.box_head(top[None])
    return _regions_from_head(
        model, obj[0], deltas[0], feats[0], (h, w), image_size
    )


def alignment(region_features: torch.Tensor, phrase_rows: torch.Tensor) -> AlignmentMatrix:
    """Dot-product logits between region features and phrase embeddings."""
    if region_features.ndim != 2 or phrase_rows.ndim != 2:
        raise ShapeError("alignment expects 2-D feature matrices")
    if region_features.shape[1] != phrase_rows.shape[1]:
        raise ShapeError(
            f"embed dims differ: {region_features.shape[1]} vs {phrase_rows.shape[1]}"
        )
    return region_features @ phrase_rows.T


def pairwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """IoU matrix between box sets a (N, 4) and b (M, 4)."""
    if a.numel() == 0 or b.numel() == 0:
        return a.new_zeros((a.shape[0], b.shape[0]))
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, :, 0] * wh[:, :, 1]
    area_a = ((a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1]))[:, None]
    area_b = ((b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]))[None, :]
    union = area_a + area_b - inter
    return torch.where(union > 0, inter / union, torch.zeros_like(inter))


def alignment_targets(
    regions: RegionSet,
    gt_boxes: torch.Tensor,
    gt_labels: torch.Tensor,
    num_phrases: int,
    iou_thresh: float = MATCH_IOU,
) -> torch.Tensor:
    """(K, num_phrases) indicator matrix of region/phrase matches.

    Entry (r, c) is 1 when region r overlaps a ground-truth box of class c
    at IoU >= ``iou_thresh``.  Class labels index phrases positionally.
    """
    k = len(regions)
    out = regions.boxes.new_zeros((k, num_phrases))
    if gt_boxes.shape[0] == 0:
        return out
    if int(gt_labels.max()) >= num_phrases:
        raise InvalidInputError(
            f"label {int(gt_labels.max())} has no phrase (prompt has {num_phrases})"
        )
    iou = pairwise_iou(regions.boxes.detach(), gt_boxes)
    for c in range(num_phrases):
        cols = iou[:, gt_labels == c]
        if cols.shape[1]:
            out[:, c] = (cols.max(dim=1).values >= iou_thresh).to(out.dtype)
    return out


def grounding_loss(scores: AlignmentMatrix, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross entropy between alignment logits and indicators."""
    if scores.shape != targets.shape:
        raise ShapeError(f"scores {tuple(scores.shape)} vs targets {tuple(targets.shape)}")
    return F.binary_cross_entropy_with_logits(scores, targets.to(scores.dtype))


def localization_loss(regions: RegionSet, gt_boxes: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 between predicted deltas and matched-box targets.

    A region is positive when its decoded box overlaps some ground-truth
    box at IoU >= 0.5; matching is done on detached boxes.  Returns 0 when
    nothing matches.
    """
    zero = regions.deltas.sum() * 0.0  # keeps graph and dtype
    if gt_boxes.shape[0] == 0 or len(regions) == 0:
        return zero
    iou = pairwise_iou(regions.boxes.detach(), gt_boxes)
    best_iou, best_idx = iou.max(dim=1)
    pos = best_iou >= MATCH_IOU
    if not bool(pos.any()):
        return zero
    target = encode_deltas(regions.anchors[pos], gt_boxes[best_idx[pos]])
    return F.smooth_l1_loss(regions.deltas[pos], target.detach(), beta=1.0)


def style_objective(
    model: GroundingModel,
    image: torch.Tensor,
    gt_boxes: torch.Tensor,
    gt_labels: torch.Tensor,
    prompt: Prompt,
    style: ChannelStyle | None = None,
    hook_layer: int | None = None,
) -> LossBreakdown:
    """Localization + grounding loss of one image under an injected style."""
    gt_boxes = gt_boxes.to(model.dtype)
    feats = encode_image(model, image, style=style, hook_layer=hook_layer)
    regions = propose_regions(model, feats)
    phrases = encode_prompt(model, prompt)
    scores = alignment(regions.features, phrases.rows)
    targets = alignment_targets(regions, gt_boxes, gt_labels, len(prompt))
    return LossBreakdown(
        loc=localization_loss(regions, gt_boxes),
        ground=grounding_loss(scores, targets),
    )


def batched_regions(
    model: GroundingModel,
    images: torch.Tensor,
    styles: dict[int, tuple[torch.Tensor, torch.Tensor]] | None = None,
) -> list[RegionSet]:
    """RegionSets for a stacked (B, 3, H, W) batch.  Internal hot path."""
    feats = model.image_encoder(images.to(model.dtype), styles)
    top = feats[-1]
    h, w = top.shape[2], top.shape[3]
    image_size = (h * model.config.stride, w * model.config.stride)
    obj, deltas, fvec = model.box_head(top)
    return [
        _regions_from_head(model, obj[i], deltas[i], fvec[i], (h, w), image_size)
        for i in range(images.shape[0])
    ]


def batched_objective(
    model: GroundingModel,
    images: torch.Tensor,
    targets: list[tuple[torch.Tensor, torch.Tensor]],
    phrase_rows: torch.Tensor,
    styles: dict[int, tuple[torch.Tensor, torch.Tensor]] | None = None,
) -> list[LossBreakdown]:
    """Per-image loss breakdowns for a batch, sharing one encoder pass."""
    regions = batched_regions(model, images, styles)
    num_phrases = phrase_rows.shape[0]
    out = []
    for r, (boxes, labels) in zip(regions, targets):
        boxes = boxes.to(model.dtype)
        scores = alignment(r.features, phrase_rows)
        t = alignment_targets(r, boxes, labels, num_phrases)
        out.append(
            LossBreakdown(
                loc=localization_loss(r, boxes),
                ground=grounding_loss(scores, t),
            )
        )
    return out


def save_checkpoint(path, model: GroundingModel, meta: dict | None = None) -> None:
    """Serialize model weights, config, and vocabulary with a format tag."""
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "model_config": model.config.to_json(),
        "vocab_tokens": list(model.vocab.tokens),
        "dtype": str(model.dtype).removeprefix("torch."),
        "init_seed": model.init_seed,
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "meta": dict(meta or {}),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[GroundingModel, dict]:
    """Load a checkpoint; raises ParseError on wrong format or magic."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ParseError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise ParseError(f"{path} is not a recognized checkpoint")
    config = ModelConfig.from_json(payload["model_config"])
    vocab = Vocabulary(list(payload["vocab_tokens"]))
    dtype = getattr(torch, payload.get("dtype", "float32"))
    model = GroundingModel(
        config, vocab, seed=int(payload.get("init_seed", 0)), dtype=dtype
    )
    model.load_state_dict(payload["state_dict"])
    return model, dict(payload.get("meta", {}))
