"""Composite training data: cut a segmented object out of a photo, paste it
onto a painting, and stream seeded batches for training.

Masks are (H, W, 1) float arrays holding exactly 0.0 or 1.0 inside the
library; on disk they are 8-bit PNGs with 0/255. Pasted objects must cover
between 5% and 30% of the canvas; objects are only ever scaled DOWN toward
the nearest bound (upscaling photographic content is never done), otherwise
the sample is rejected.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

logger = logging.getLogger(__name__)

RATIO_MIN = 0.05
RATIO_MAX = 0.3

VALID_SPLITS = ("train", "test")


class CompositeRejected(ValueError):
    """Raised when an object cannot be pasted within the ratio bounds."""


@dataclass
class CompositeSample:
    composite: np.ndarray  # (H, W, 3) in [0, 1]
    background: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W, 1) binary
    meta: dict = field(default_factory=dict)


@dataclass
class ManifestRecord:
    photo: str
    mask: str
    painting: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    split: str = "train"
    seed: int = 0
    base_dir: Path | None = None

    def __post_init__(self):
        if self.split not in VALID_SPLITS:
            raise ValueError(f"split must be one of {VALID_SPLITS}, got {self.split!r}")

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        return p


# ---------------------------------------------------------------------------
# mask utilities
# ---------------------------------------------------------------------------


def _as_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = mask[:, :, None]
    if mask.ndim != 3 or mask.shape[2] != 1:
        raise ValueError(f"mask must be (H, W, 1), got shape {mask.shape}")
    return mask.astype(np.float64)


def foreground_ratio(mask: np.ndarray) -> float:
    """Fraction of pixels covered by the foreground, in [0, 1]."""
    mask = _as_mask(mask)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("mask must be binary (values 0 or 1)")
    return float(mask.sum() / mask[:, :, 0].size)


def binarize(mask: np.ndarray) -> np.ndarray:
    """Pool/resize tie-break rule used everywhere: >= 0.5 becomes foreground."""
    return (np.asarray(mask) >= 0.5).astype(np.float32)


def pool_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Average-pool a binary mask to (out_h, out_w) and re-binarize."""
    mask = _as_mask(mask)
    h, w = mask.shape[:2]
    if h % out_h != 0 or w % out_w != 0:
        raise ValueError(f"mask size {h}x{w} not divisible by target {out_h}x{out_w}")
    fh, fw = h // out_h, w // out_w
    pooled = mask[:, :, 0].reshape(out_h, fh, out_w, fw).mean(axis=(1, 3))
    return binarize(pooled)[:, :, None]


def downsample_mask(mask: np.ndarray, level: int) -> np.ndarray:
    """Mask at encoder level ``l``: average-pool by 2**(l-1), threshold 0.5."""
    if level not in (1, 2, 3, 4):
        raise ValueError(f"level must be in 1..4, got {level}")
    mask = _as_mask(mask)
    factor = 2 ** (level - 1)
    h, w = mask.shape[:2]
    if h % factor != 0 or w % factor != 0:
        raise ValueError(f"mask size {h}x{w} not divisible by 2**(level-1) = {factor}")
    return pool_mask(mask, h // factor, w // factor)


# ---------------------------------------------------------------------------
# resizing (shared geometry for images and masks)
# ---------------------------------------------------------------------------


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) float image."""
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
    t = t.permute(2, 0, 1).unsqueeze(0)
    t = F.interpolate(t, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return t.squeeze(0).permute(1, 2, 0).numpy()


def resize_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Same bilinear geometry as the images, then re-binarized at 0.5."""
    soft = resize_image(_as_mask(mask).astype(np.float32), out_h, out_w)
    return binarize(soft)


# ---------------------------------------------------------------------------
# composite construction
# ---------------------------------------------------------------------------


def _bbox(mask2d: np.ndarray):
    rows = np.any(mask2d, axis=1)
    cols = np.any(mask2d, axis=0)
    r0, r1 = np.where(rows)[0][[0, -1]]
    c0, c1 = np.where(cols)[0][[0, -1]]
    return int(r0), int(r1) + 1, int(c0), int(c1) + 1


def build_composite(
    photo: np.ndarray,
    instance_mask: np.ndarray,
    painting: np.ndarray,
    rng_seed: int,
    source_ids: dict | None = None,
) -> CompositeSample:
    """Cut the masked object out of ``photo`` and paste it onto ``painting``
    at a seeded uniform-random position.

    The pasted object must cover between RATIO_MIN and RATIO_MAX of the
    painting; oversized (or non-fitting) objects are scaled down toward the
    nearest attainable bound, undersized ones are rejected.
    """
    photo = np.asarray(photo, dtype=np.float32)
    painting = np.asarray(painting, dtype=np.float32)
    mask = _as_mask(instance_mask).astype(np.float32)
    if photo.ndim != 3 or photo.shape[2] != 3:
        raise ValueError(f"photo must be (H, W, 3), got {photo.shape}")
    if painting.ndim != 3 or painting.shape[2] != 3:
        raise ValueError(f"painting must be (H, W, 3), got {painting.shape}")
    if mask.shape[:2] != photo.shape[:2]:
        raise ValueError(f"mask size {mask.shape[:2]} does not match photo {photo.shape[:2]}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("instance mask must be binary")
    if mask.sum() == 0:
        raise CompositeRejected("instance mask is empty")

    hp, wp = painting.shape[:2]
    area = hp * wp
    r0, r1, c0, c1 = _bbox(mask[:, :, 0] > 0)
    crop = photo[r0:r1, c0:c1]
    crop_mask = mask[r0:r1, c0:c1]
    oh, ow = crop.shape[:2]

    # largest allowed scale: never upscale, and the bbox must fit the canvas
    s_hi = min(1.0, hp / oh, wp / ow)
    count0 = float(crop_mask.sum())
    ratio_hi = count0 * s_hi * s_hi / area
    if ratio_hi < RATIO_MIN:
        raise CompositeRejected(
            f"object covers {ratio_hi:.4f} of the canvas at its largest allowed "
            f"scale, below the minimum {RATIO_MIN}"
        )

    scale = s_hi if ratio_hi <= RATIO_MAX else s_hi * math.sqrt(RATIO_MAX / ratio_hi) * 0.995
    obj, obj_mask, ratio = None, None, None
    for _ in range(8):
        th, tw = max(1, round(oh * scale)), max(1, round(ow * scale))
        obj = resize_image(crop, th, tw) if (th, tw) != (oh, ow) else crop
        obj_mask = resize_mask(crop_mask, th, tw) if (th, tw) != (oh, ow) else crop_mask
        ratio = float(obj_mask.sum()) / area
        if RATIO_MIN <= ratio <= RATIO_MAX:
            break
        # re-binarization nudged the count out of range; steer back inside
        target = min(max(ratio, RATIO_MIN * 1.04), RATIO_MAX * 0.97)
        scale = min(s_hi, scale * math.sqrt(target / max(ratio, 1e-9)))
    else:
        raise CompositeRejected(
            f"could not reach a foreground ratio in [{RATIO_MIN}, {RATIO_MAX}] "
            f"(last attempt: {ratio:.4f})"
        )

    th, tw = obj.shape[:2]
    rng = np.random.default_rng(rng_seed)
    top = int(rng.integers(0, hp - th + 1))
    left = int(rng.integers(0, wp - tw + 1))

    composite = painting.copy()
    full_mask = np.zeros((hp, wp, 1), dtype=np.float32)
    region = obj_mask[:, :, 0] == 1.0
    composite[top : top + th, left : left + tw][region] = obj[region]
    full_mask[top : top + th, left : left + tw] = obj_mask

    meta = {
        "seed": int(rng_seed),
        "top": top,
        "left": left,
        "scale": float(scale),
        "object_hw": [th, tw],
    }
    if source_ids:
        meta.update(source_ids)
    return CompositeSample(
        composite=composite, background=painting.copy(), mask=full_mask, meta=meta
    )


# ---------------------------------------------------------------------------
# manifest I/O (line-delimited JSON; first line is a header)
# ---------------------------------------------------------------------------


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        fh.write(json.dumps({"split": manifest.split, "seed": manifest.seed}) + "\n")
        for rec in manifest.records:
            fh.write(
                json.dumps({"photo": rec.photo, "mask": rec.mask, "painting": rec.painting})
                + "\n"
            )


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"manifest {path} is empty")
    header = json.loads(lines[0])
    records = []
    for i, ln in enumerate(lines[1:], start=2):
        row = json.loads(ln)
        try:
            records.append(ManifestRecord(photo=row["photo"], mask=row["mask"], painting=row["painting"]))
        except KeyError as exc:
            raise ValueError(f"manifest {path} line {i}: missing field {exc}") from None
    return DatasetManifest(
        records=records,
        split=header.get("split", "train"),
        seed=int(header.get("seed", 0)),
        base_dir=path.parent,
    )


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_image(image: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="RGB").save(path, format="PNG")


def load_mask_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return (arr >= 128.0).astype(np.float32)[:, :, None]


def save_mask_image(mask: np.ndarray, path) -> None:
    m = _as_mask(mask)[:, :, 0]
    Image.fromarray((m >= 0.5).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# iteration
# ---------------------------------------------------------------------------


def _record_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def load_record(manifest: DatasetManifest, index: int, seed: int, image_size: int):
    """Build the composite for one manifest record, resized to the training
    size; deterministic given (record, seed)."""
    rec = manifest.records[index]
    photo = load_image(manifest.resolve(rec.photo))
    mask = load_mask_image(manifest.resolve(rec.mask))
    painting = load_image(manifest.resolve(rec.painting))
    sample = build_composite(
        photo,
        mask,
        painting,
        rng_seed=_record_seed(seed, index),
        source_ids={"photo": rec.photo, "mask": rec.mask, "painting": rec.painting},
    )
    if sample.composite.shape[0] != image_size or sample.composite.shape[1] != image_size:
        sample = CompositeSample(
            composite=resize_image(sample.composite, image_size, image_size),
            background=resize_image(sample.background, image_size, image_size),
            mask=resize_mask(sample.mask, image_size, image_size),
            meta=sample.meta,
        )
    return sample


def iterate(
    manifest: DatasetManifest,
    batch_size: int,
    seed: int,
    image_size: int = 256,
    num_epochs: int | None = None,
):
    """Yield lists of CompositeSample, resized to ``image_size``.

    Every epoch visits each manifest record exactly once in an order shuffled
    by (seed, epoch); sample construction depends only on (record, seed), so
    the samples themselves are identical across epochs. Unreadable or
    unusable records are skipped with a warning; an epoch in which nothing
    could be read is an error.
    """
    if not manifest.records:
        raise ValueError("manifest has no records")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    epoch = 0
    while num_epochs is None or epoch < num_epochs:
        order = np.random.default_rng([seed, epoch]).permutation(len(manifest.records))
        batch, yielded_any = [], False
        for index in order:
            try:
                sample = load_record(manifest, int(index), seed, image_size)
            except (OSError, CompositeRejected, ValueError) as exc:
                logger.warning("skipping record %d (%s): %s", index, manifest.records[index].photo, exc)
                continue
            batch.append(sample)
            if len(batch) == batch_size:
                yield batch
                yielded_any = True
                batch = []
        if batch:
            yield batch
            yielded_any = True
        if not yielded_any:
            raise RuntimeError("no readable records in manifest")
        epoch += 1


# ---------------------------------------------------------------------------
# synthetic corpus: procedural paintings and simple photo objects, so the
# pipeline can run end-to-end without any external dataset
# ---------------------------------------------------------------------------


def _paint_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    kind = rng.integers(0, 3)
    c1 = rng.uniform(0.1, 0.9, size=3)
    c2 = rng.uniform(0.1, 0.9, size=3)
    if kind == 0:  # angled stripes
        period = int(rng.integers(8, 33))
        theta = rng.uniform(0, np.pi)
        coord = xx * np.cos(theta) + yy * np.sin(theta)
        t = ((coord // (period / 2)) % 2)[:, :, None]
    elif kind == 1:  # checkerboard
        cell = int(rng.integers(8, 33))
        t = (((yy // cell) + (xx // cell)) % 2)[:, :, None]
    else:  # crossing waves
        p1, p2 = rng.integers(8, 33), rng.integers(8, 33)
        t = (0.5 + 0.5 * np.sin(2 * np.pi * xx / p1) * np.sin(2 * np.pi * yy / p2))[:, :, None]
    img = c1[None, None, :] * t + c2[None, None, :] * (1 - t)
    # mild brushy modulation so paintings are not perfectly flat
    img = img * (0.9 + 0.1 * np.sin(2 * np.pi * yy / rng.integers(40, 90))[:, :, None])
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _photo_with_object(rng: np.random.Generator, size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = np.stack(
        [
            0.3 + 0.4 * xx / size,
            0.3 + 0.4 * yy / size,
            np.full_like(xx, rng.uniform(0.2, 0.8)),
        ],
        axis=2,
    )
    shape = rng.integers(0, 2)
    cy, cx = size / 2 + rng.uniform(-0.1, 0.1) * size, size / 2 + rng.uniform(-0.1, 0.1) * size
    # target 8..20% of the frame so pasting keeps the ratio inside bounds
    frac = rng.uniform(0.08, 0.2)
    if shape == 0:  # ellipse
        ar = rng.uniform(0.6, 1.6)
        ry = math.sqrt(frac * size * size * ar / math.pi)
        rx = ry / ar
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    else:  # rectangle
        ar = rng.uniform(0.6, 1.6)
        hh = math.sqrt(frac * size * size * ar) / 2
        ww = hh / ar
        inside = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= ww)
    color = rng.uniform(0.0, 1.0, size=3)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + yy) / rng.integers(6, 20))
    obj = np.clip(color[None, None, :] * (0.7 + 0.3 * stripes[:, :, None]), 0, 1)
    photo = np.where(inside[:, :, None], obj, base).astype(np.float32)
    mask = inside.astype(np.float32)[:, :, None]
    return photo, mask


def generate_synthetic_sources(
    out_dir, num_photos: int, num_paintings: int, seed: int = 0, size: int = 256
):
    """Write a small procedural corpus: photos with object masks + paintings."""
    out_dir = Path(out_dir)
    photos_dir = out_dir / "photos"
    paintings_dir = out_dir / "paintings"
    photos_dir.mkdir(parents=True, exist_ok=True)
    paintings_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    photo_paths = []
    for i in range(num_photos):
        photo, mask = _photo_with_object(rng, size)
        p = photos_dir / f"photo_{i:04d}.png"
        save_image(photo, p)
        save_mask_image(mask, photos_dir / f"photo_{i:04d}_mask.png")
        photo_paths.append(p)
    painting_paths = []
    for i in range(num_paintings):
        p = paintings_dir / f"painting_{i:04d}.png"
        save_image(_paint_texture(rng, size), p)
        painting_paths.append(p)
    return photo_paths, painting_paths


def build_dataset(
    photos_dir,
    paintings_dir,
    out_dir,
    seed: int = 0,
    count: int | None = None,
    split: str = "train",
) -> Path:
    """Pair photos with paintings, drop un-pasteable pairs, write a manifest.

    Each record is validated by actually building its composite once; records
    whose object cannot satisfy the ratio bounds are skipped with a warning.
    Returns the manifest path (``<out_dir>/manifest.jsonl``).
    """
    photos_dir, paintings_dir, out_dir = Path(photos_dir), Path(paintings_dir), Path(out_dir)
    photos = sorted(p for p in photos_dir.glob("*.png") if not p.stem.endswith("_mask"))
    paintings = sorted(paintings_dir.glob("*.png"))
    if not photos:
        raise ValueError(f"no photos found in {photos_dir}")
    if not paintings:
        raise ValueError(f"no paintings found in {paintings_dir}")

    rng = np.random.default_rng(seed)
    records = []
    n = count if count is not None else len(photos)
    for i in range(n):
        photo = photos[i % len(photos)]
        mask = photo.with_name(photo.stem + "_mask.png")
        if not mask.exists():
            logger.warning("photo %s has no mask, skipping", photo.name)
            continue
        painting = paintings[int(rng.integers(0, len(paintings)))]
        try:
            build_composite(
                load_image(photo),
                load_mask_image(mask),
                load_image(painting),
                rng_seed=_record_seed(seed, len(records)),
            )
        except CompositeRejected as exc:
            logger.warning("skipping pair (%s, %s): %s", photo.name, painting.name, exc)
            continue
        records.append(
            ManifestRecord(photo=str(photo), mask=str(mask), painting=str(painting))
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(records=records, split=split, seed=seed)
    manifest_path = out_dir / "manifest.jsonl"
    save_manifest(manifest, manifest_path)
    logger.info("wrote %d records to %s", len(records), manifest_path)
    return manifest_path
