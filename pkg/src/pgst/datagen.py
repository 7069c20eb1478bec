"""Synthetic driving-scene benchmark: scenes, domain shifts, dataset IO.

Scenes are 128x128 RGB canvases with 1-6 colored glyphs, one shape/color
pair per class, over a textured sky-to-road gradient.  Domain shifts are
photometric: fog (gray blend plus gaussian blur), darkness (brightness
scale), rain (bright streaks), and sensor noise.  Boxes are the tight glyph
bounding rectangles in [x1, y1, x2, y2] pixel coordinates.

Datasets live on disk as ``<root>/<domain>/<split>/images/*.png`` plus an
``annotations.json`` next to the images directory.
"""

import json
import logging
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, InvalidInputError, ParseError
from .prompts import ClassList, DRIVING_CLASSES

logger = logging.getLogger(__name__)

CANVAS_DEFAULT = 128
MIN_CANVAS = 64
GLYPH_SIZE_RANGE = (30.0, 78.0)
MAX_GLYPHS = 6
PLACEMENT_IOU_CAP = 0.2
FOG_COLOR = 0.78

# class name -> (shape, rgb)
GLYPH_STYLE = {
    "bus": ("tall_rect", (0.85, 0.12, 0.12)),
    "bike": ("circle", (0.15, 0.45, 0.90)),
    "car": ("square", (0.10, 0.70, 0.25)),
    "motor": ("triangle", (0.95, 0.60, 0.10)),
    "person": ("plus", (0.85, 0.20, 0.80)),
    "rider": ("diamond", (0.10, 0.75, 0.80)),
    "truck": ("wide_rect", (0.50, 0.33, 0.12)),
}
_FALLBACK_SHAPES = ("square", "circle", "triangle", "diamond", "plus")


@dataclass
class DetectionSample:
    """One image with its ground truth boxes and class labels."""

    image: torch.Tensor  # (3, H, W) float32 in [0, 1]
    boxes: torch.Tensor  # (N, 4) float32, [x1, y1, x2, y2]
    labels: torch.Tensor  # (N,) int64
    id: str
    domain_tag: str

    def validate(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise InvalidInputError(f"sample {self.id}: image must be (3, H, W)")
        h, w = self.image.shape[1], self.image.shape[2]
        if self.boxes.ndim != 2 or self.boxes.shape[1] != 4:
            raise InvalidInputError(f"sample {self.id}: boxes must be (N, 4)")
        if self.labels.shape != (self.boxes.shape[0],):
            raise InvalidInputError(f"sample {self.id}: labels/boxes mismatch")
        b = self.boxes
        if b.shape[0]:
            ok = (
                (b[:, 0] < b[:, 2]).all()
                and (b[:, 1] < b[:, 3]).all()
                and (b[:, 0] >= 0).all()
                and (b[:, 1] >= 0).all()
                and (b[:, 2] <= w).all()
                and (b[:, 3] <= h).all()
            )
            if not bool(ok):
                raise InvalidInputError(f"sample {self.id}: box out of bounds")


@dataclass(frozen=True)
class DomainSpec:
    """Photometric recipe for one domain.  Defaults are the identity."""

    tag: str
    brightness_scale: float = 1.0
    fog_blend: float = 0.0
    fog_blur_sigma: float = 0.0
    rain_density: float = 0.0
    noise_std: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if not self.tag:
            raise ConfigError("domain tag must be non-empty")
        if not (0.0 < self.brightness_scale <= 1.5):
            raise ConfigError(f"brightness_scale out of range: {self.brightness_scale}")
        for name in ("fog_blend", "rain_density"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} out of range: {v}")
        if self.fog_blur_sigma < 0 or self.noise_std < 0:
            raise ConfigError("fog_blur_sigma and noise_std must be >= 0")


DOMAIN_SPECS = {
    "daytime_sunny": DomainSpec(tag="daytime_sunny"),
    "daytime_foggy": DomainSpec(
        tag="daytime_foggy", fog_blend=0.55, fog_blur_sigma=2.0, noise_std=0.01
    ),
    "dusk_rainy": DomainSpec(
        tag="dusk_rainy", brightness_scale=0.60, rain_density=0.5, noise_std=0.02
    ),
    "night_rainy": DomainSpec(
        tag="night_rainy", brightness_scale=0.32, rain_density=0.6, noise_std=0.03
    ),
    "night_sunny": DomainSpec(
        tag="night_sunny", brightness_scale=0.35, noise_std=0.02
    ),
}


def _glyph_mask(shape: str, h: int, w: int) -> np.ndarray:
    v, u = np.mgrid[0:h, 0:w]
    u = (u + 0.5) / w
    v = (v + 0.5) / h
    if shape in ("square", "tall_rect", "wide_rect"):
        return np.ones((h, w), dtype=bool)
    if shape == "circle":
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    if shape == "triangle":
        return np.abs(u - 0.5) <= v / 2
    if shape == "plus":
        return (np.abs(u - 0.5) <= 0.17) | (np.abs(v - 0.5) <= 0.17)
    if shape == "diamond":
        return np.abs(u - 0.5) + np.abs(v - 0.5) <= 0.5
    raise ConfigError(f"unknown glyph shape: {shape}")


def _box_iou(a: tuple, b: tuple) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    top = np.array([0.55, 0.65, 0.75])
    bottom = np.array([0.70, 0.68, 0.62])
    t = np.linspace(0.0, 1.0, h)[:, None, None]
    img = (1 - t) * top[None, None, :] + t * bottom[None, None, :]
    img = np.broadcast_to(img, (h, w, 3)).copy()
    coarse = rng.normal(0.0, 1.0, size=(h // 16 + 1, w // 16 + 1))
    coarse = np.kron(coarse, np.ones((16, 16)))[:h, :w]
    img += 0.05 * coarse[:, :, None]
    img += rng.normal(0.0, 0.015, size=(h, w, 1))
    return img


def _glyph_geometry(cls_name: str, size: float) -> tuple[float, float]:
    shape = GLYPH_STYLE.get(cls_name, (None, None))[0]
    if shape == "tall_rect":
        return 0.62 * size, size
    if shape == "wide_rect":
        return size, 0.55 * size
    return size, size


def generate_scene(
    rng: np.random.Generator,
    sample_id: str,
    canvas: int = CANVAS_DEFAULT,
    classes: ClassList = DRIVING_CLASSES,
) -> DetectionSample:
    """Draw one clean (source-domain) scene with at least one glyph."""
    if canvas < MIN_CANVAS:
        raise InvalidInputError(f"canvas must be >= {MIN_CANVAS}, got {canvas}")
    h = w = canvas
    img = _background(rng, h, w)

    n_target = int(rng.integers(1, MAX_GLYPHS + 1))
    boxes: list[tuple] = []
    labels: list[int] = []
    attempts = 0
    while len(boxes) < n_target and attempts < 12 * MAX_GLYPHS:
        attempts += 1
        cls_idx = int(rng.integers(len(classes)))
        cls_name = classes.names[cls_idx]
        size = float(rng.uniform(*GLYPH_SIZE_RANGE))
        gw, gh = _glyph_geometry(cls_name, size)
        gw_i, gh_i = max(8, round(gw)), max(8, round(gh))
        if gw_i >= w or gh_i >= h:
            continue
        x1 = int(rng.integers(0, w - gw_i))
        y1 = int(rng.integers(0, h - gh_i))
        box = (float(x1), float(y1), float(x1 + gw_i), float(y1 + gh_i))
        if any(_box_iou(box, b) > PLACEMENT_IOU_CAP for b in boxes):
            continue
        shape, color = GLYPH_STYLE.get(
            cls_name,
            (_FALLBACK_SHAPES[cls_idx % len(_FALLBACK_SHAPES)], (0.6, 0.6, 0.6)),
        )
        mask = _glyph_mask(shape, gh_i, gw_i)
        tint = float(rng.uniform(0.85, 1.1))
        patch = img[y1 : y1 + gh_i, x1 : x1 + gw_i]
        patch[mask] = np.clip(np.array(color) * tint, 0.0, 1.0)
        boxes.append(box)
        labels.append(cls_idx)

    if not boxes:  # cannot happen at default sizes, but keep the guarantee
        boxes.append((8.0, 8.0, 40.0, 40.0))
        labels.append(0)
        img[8:40, 8:40] = GLYPH_STYLE[classes.names[0]][1]

    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    sample = DetectionSample(
        image=torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))),
        boxes=torch.tensor(boxes, dtype=torch.float32),
        labels=torch.tensor(labels, dtype=torch.int64),
        id=sample_id,
        domain_tag="daytime_sunny",
    )
    sample.validate()
    return sample


def _sample_rng(spec_seed: int, sample_id: str) -> np.random.Generator:
    tag = zlib.crc32(sample_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([spec_seed, tag]))


def apply_domain(sample: DetectionSample, spec: DomainSpec) -> DetectionSample:
    """Re-render a clean sample under a photometric domain recipe.

    Geometry (boxes, labels) is untouched.  The identity spec returns a
    bit-identical image.  Randomness is derived from the spec seed and the
    sample id, so the output does not depend on processing order.
    """
    spec.validate()
    sample.validate()
    img = sample.image.numpy().astype(np.float64, copy=True)
    rng = _sample_rng(spec.seed, sample.id)

    if spec.brightness_scale != 1.0:
        img *= spec.brightness_scale
    if spec.fog_blend > 0.0:
        img = (1.0 - spec.fog_blend) * img + spec.fog_blend * FOG_COLOR
        if spec.fog_blur_sigma > 0.0:
            img = gaussian_filter(
                img, sigma=(0.0, spec.fog_blur_sigma, spec.fog_blur_sigma),
                mode="nearest",
            )
    if spec.rain_density > 0.0:
        h, w = img.shape[1], img.shape[2]
        n_streaks = int(round(spec.rain_density * 60))
        for _ in range(n_streaks):
            x0 = rng.uniform(0, w)
            y0 = rng.uniform(0, h)
            length = rng.uniform(8, 22)
            steps = int(length)
            t = np.arange(steps)
            xs = np.clip(x0 + 0.35 * t, 0, w - 1).astype(int)
            ys = np.clip(y0 + t, 0, h - 1).astype(int)
            img[:, ys, xs] = np.clip(img[:, ys, xs] + 0.22, 0.0, 1.0)
    if spec.noise_std > 0.0:
        img += rng.normal(0.0, spec.noise_std, size=img.shape)

    img = np.clip(img, 0.0, 1.0)
    out = DetectionSample(
        image=torch.from_numpy(img.astype(np.float32)),
        boxes=sample.boxes.clone(),
        labels=sample.labels.clone(),
        id=sample.id,
        domain_tag=spec.tag,
    )
    out.validate()
    return out


class DetectionDataset:
    """In-memory dataset: ordered samples plus the class list.

    Images are stored quantized to uint8, matching what the PNG writer
    emits, and converted back to float on access; a dataset generated in
    memory is therefore identical to the same dataset after a disk round
    trip.
    """

    def __init__(self, samples: list[DetectionSample], classes: ClassList):
        self.classes = classes
        self._meta = []
        self._images_u8 = []
        for s in samples:
            s.validate()
            if int(s.labels.max() if s.labels.numel() else 0) >= len(classes):
                raise InvalidInputError(f"sample {s.id}: label out of range")
            self._images_u8.append(quantize_image(s.image))
            self._meta.append((s.boxes, s.labels, s.id, s.domain_tag))

    def __len__(self) -> int:
        return len(self._meta)

    def __getitem__(self, i: int) -> DetectionSample:
        boxes, labels, sid, tag = self._meta[i]
        image = self._images_u8[i].to(torch.float32) / 255.0
        return DetectionSample(
            image=image, boxes=boxes.clone(), labels=labels.clone(),
            id=sid, domain_tag=tag,
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def image_batch(self, indices) -> torch.Tensor:
        """Stacked float images for ``indices``, shape (B, 3, H, W)."""
        return torch.stack(
            [self._images_u8[i].to(torch.float32) / 255.0 for i in indices]
        )

    def targets(self, i: int) -> tuple[torch.Tensor, torch.Tensor]:
        boxes, labels, _, _ = self._meta[i]
        return boxes, labels

    def sample_id(self, i: int) -> str:
        return self._meta[i][2]


def quantize_image(image: torch.Tensor) -> torch.Tensor:
    """Round a float (3, H, W) image in [0, 1] to uint8."""
    arr = np.clip(np.round(image.numpy() * 255.0), 0, 255)
    return torch.from_numpy(arr.astype(np.uint8))


def write_dataset(dataset, out_dir) -> None:
    """Write PNG images plus annotations.json under ``out_dir``.

    ``dataset`` is any iterable of samples with a ``classes`` attribute.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for sample in dataset:
        arr = quantize_image(sample.image).numpy().transpose(1, 2, 0)
        Image.fromarray(arr, mode="RGB").save(img_dir / f"{sample.id}.png")
        records.append(
            {
                "id": sample.id,
                "file_name": f"{sample.id}.png",
                "domain_tag": sample.domain_tag,
                "height": int(sample.image.shape[1]),
                "width": int(sample.image.shape[2]),
                "boxes": [[float(v) for v in b] for b in sample.boxes],
                "labels": [int(v) for v in sample.labels],
            }
        )
    payload = {
        "categories": list(dataset.classes.names),
        "images": records,
    }
    with open(out_dir / "annotations.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_dataset(split_dir) -> DetectionDataset:
    """Load a dataset split written by :func:`write_dataset`.

    A missing annotations file yields an empty dataset.  A referenced image
    that does not exist, or a malformed record, raises ParseError naming
    the offending record.
    """
    split_dir = Path(split_dir)
    ann_path = split_dir / "annotations.json"
    if not ann_path.exists():
        logger.warning("no annotations at %s; treating split as empty", split_dir)
        return DetectionDataset([], DRIVING_CLASSES)
    try:
        with open(ann_path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        classes = ClassList(payload["categories"])
        image_records = payload["images"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed annotations at {ann_path}: {exc}") from exc

    samples = []
    for rec in image_records:
        rid = rec.get("id", "<missing id>")
        try:
            img_path = split_dir / "images" / rec["file_name"]
            if not img_path.exists():
                raise FileNotFoundError(img_path)
            with Image.open(img_path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            sample = DetectionSample(
                image=torch.from_numpy(arr.transpose(2, 0, 1).copy()),
                boxes=torch.tensor(
                    [[float(v) for v in b] for b in rec["boxes"]],
                    dtype=torch.float32,
                ).reshape(-1, 4),
                labels=torch.tensor(
                    [int(v) for v in rec["labels"]], dtype=torch.int64
                ),
                id=str(rec["id"]),
                domain_tag=str(rec.get("domain_tag", "")),
            )
            sample.validate()
        except (KeyError, TypeError, ValueError, FileNotFoundError,
                InvalidInputError, OSError) as exc:
            raise ParseError(f"bad dataset record {rid!r}: {exc}") from exc
        samples.append(sample)
    return DetectionDataset(samples, classes)


def dataset_split_dir(root, domain_tag: str, split: str) -> Path:
    return Path(root) / domain_tag / split


def make_benchmark(
    root,
    seed: int,
    n_train: int = 512,
    n_val: int = 128,
    n_test: int = 128,
    canvas: int = CANVAS_DEFAULT,
    classes: ClassList = DRIVING_CLASSES,
) -> None:
    """Generate and write the full five-domain benchmark under ``root``.

    Source domain gets train and val splits; each target domain gets a test
    split rendered from fresh scenes through its photometric recipe.
    """
    if min(n_train, n_val, n_test) < 1:
        raise InvalidInputError("split sizes must be >= 1")
    root = Path(root)

    def scenes(domain_idx: int, split_idx: int, count: int, prefix: str):
        out = []
        for i in range(count):
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, domain_idx, split_idx, i])
            )
            out.append(generate_scene(rng, f"{prefix}_{i:05d}", canvas, classes))
        return out

    src = DOMAIN_SPECS["daytime_sunny"]
    for split_idx, (split, count) in enumerate([("train", n_train), ("val", n_val)]):
        samples = scenes(0, split_idx, count, f"{src.tag}_{split}")
        ds = DetectionDataset(
            [apply_domain(s, replace_seed(src, seed)) for s in samples], classes
        )
        write_dataset(ds, dataset_split_dir(root, src.tag, split))
        logger.info("wrote %s/%s: %d images", src.tag, split, count)

    for d_idx, tag in enumerate(t for t in DOMAIN_SPECS if t != "daytime_sunny"):
        spec = replace_seed(DOMAIN_SPECS[tag], seed)
        samples = scenes(d_idx + 1, 2, n_test, f"{tag}_test")
        ds = DetectionDataset([apply_domain(s, spec) for s in samples], classes)
        write_dataset(ds, dataset_split_dir(root, tag, "test"))
        logger.info("wrote %s/test: %d images", tag, n_test)


def replace_seed(spec: DomainSpec, seed: int) -> DomainSpec:
    return replace(spec, seed=seed)


MAX_SIDE_DEFAULT = 1166


def resize_longest_side(
    sample: DetectionSample, max_side: int = MAX_SIDE_DEFAULT
) -> DetectionSample:
    """Downscale so the longest side is at most ``max_side``.

    A pass-through (the same object) for images already within the limit,
    which covers every synthetic canvas this package generates.  Boxes are
    scaled along with the image.
    """
    h, w = int(sample.image.shape[1]), int(sample.image.shape[2])
    longest = max(h, w)
    if longest <= max_side:
        return sample
    scale = max_side / longest
    new_h, new_w = max(1, round(h * scale)), max(1, round(w * scale))
    arr = (sample.image.numpy().transpose(1, 2, 0) * 255.0).clip(0, 255)
    im = Image.fromarray(arr.astype(np.uint8), mode="RGB")
    im = im.resize((new_w, new_h), Image.BILINEAR)
    resized = np.asarray(im, dtype=np.float32) / 255.0
    boxes = sample.boxes.clone()
    if boxes.shape[0]:
        boxes[:, [0, 2]] *= new_w / w
        boxes[:, [1, 3]] *= new_h / h
    out = DetectionSample(
        image=torch.from_numpy(resized.transpose(2, 0, 1).copy()),
        boxes=boxes,
        labels=sample.labels.clone(),
        id=sample.id,
        domain_tag=sample.domain_tag,
    )
    out.validate()
    return out
