"""
Image-mask datasets: loading, procedural toy data, export of generated
pairs and evaluation crops.

On disk a dataset is ``root/images/<id>.png`` + ``root/masks/<id>.png``
(8-bit RGB images, single-channel masks with values {0, 255}).
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union
import logging

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch.nn import functional as F

from .storage import atomic_write_json, utc_timestamp

logger = logging.getLogger(__name__)

MASK_THRESHOLD = 0.5
IMAGE_SUFFIX = '.png'


class DatasetError(ValueError):
    """Raised for unreadable or inconsistent dataset files"""


@dataclass
class ImageMaskPair:
    """An image in [0, 1] of shape (C, H, W) and its binary mask (1, H, W)"""
    image: torch.Tensor
    mask: torch.Tensor
    id: str = ''

    def __post_init__(self):
        if self.image.dim() != 3 or self.mask.dim() != 3 or self.mask.shape[0] != 1:
            raise ValueError(
                f"Expected image (C, H, W) and mask (1, H, W), got {tuple(self.image.shape)} "
                f"and {tuple(self.mask.shape)}"
            )
        if self.image.shape[-2:] != self.mask.shape[-2:]:
            raise ValueError(
                f"Pair {self.id!r}: image {tuple(self.image.shape[-2:])} and mask "
                f"{tuple(self.mask.shape[-2:])} differ in size"
            )
        if not bool(((self.mask == 0) | (self.mask == 1)).all()):
            raise ValueError(f"Pair {self.id!r}: mask is not binary")

    @property
    def size(self) -> tuple[int, int]:
        return int(self.image.shape[-2]), int(self.image.shape[-1])

    def stacked(self) -> torch.Tensor:
        """(C+1, H, W) tensor with the mask as the last channel"""
        return torch.cat([self.image, self.mask.to(self.image.dtype)], dim=0)


@dataclass
class GeneratedBatch:
    """Raw sampler output: images in [0, 1] (N, C, H, W) and soft masks (N, 1, H, W)"""
    images: torch.Tensor
    masks: torch.Tensor
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = [f"{i:05d}" for i in range(self.images.shape[0])]
        if len(self.ids) != self.images.shape[0] or self.masks.shape[0] != self.images.shape[0]:
            raise ValueError("Generated images, masks and ids differ in length")

    def to_pairs(self, threshold: float = MASK_THRESHOLD) -> list[ImageMaskPair]:
        """Binarize masks with the >= threshold rule"""
        binary = (self.masks >= threshold).to(self.images.dtype)
        return [
            ImageMaskPair(image=self.images[i].clamp(0.0, 1.0), mask=binary[i], id=self.ids[i])
            for i in range(self.images.shape[0])
        ]


def resize_pair(pair: ImageMaskPair, size: Union[int, tuple[int, int]]) -> ImageMaskPair:
    """Bilinear (half-pixel centers) for the image, nearest for the mask"""
    if isinstance(size, int):
        size = (size, size)
    if tuple(size) == pair.size:
        return pair
    image = F.interpolate(pair.image[None], size=size, mode='bilinear', align_corners=False)[0]
    mask = F.interpolate(pair.mask[None], size=size, mode='nearest')[0]
    return ImageMaskPair(image=image.clamp(0.0, 1.0), mask=mask, id=pair.id)


def _read_png(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert(mode))
    except (UnidentifiedImageError, OSError) as e:
        raise DatasetError(f"Cannot read image file {path}: {e}") from e


def find_unmatched(root: Union[str, Path]) -> list[str]:
    """Relative paths of images without masks and masks without images"""
    root = Path(root)
    images = {p.stem: p for p in (root / 'images').glob(f'*{IMAGE_SUFFIX}')}
    masks = {p.stem: p for p in (root / 'masks').glob(f'*{IMAGE_SUFFIX}')}
    unmatched = [f"images/{images[k].name}" for k in sorted(images.keys() - masks.keys())]
    unmatched += [f"masks/{masks[k].name}" for k in sorted(masks.keys() - images.keys())]
    return unmatched


def load_dataset(root: Union[str, Path]) -> list[ImageMaskPair]:
    """Load every matched image/mask pair under ``root``"""
    root = Path(root)
    image_dir, mask_dir = root / 'images', root / 'masks'
    images = {p.stem: p for p in image_dir.glob(f'*{IMAGE_SUFFIX}')} if image_dir.is_dir() else {}
    masks = {p.stem: p for p in mask_dir.glob(f'*{IMAGE_SUFFIX}')} if mask_dir.is_dir() else {}

    if not images and not masks:
        logger.warning(f"Dataset at {root} is empty")
        return []

    unmatched = find_unmatched(root)
    if unmatched:
        logger.warning(f"Unmatched files in {root} excluded from the dataset: {', '.join(unmatched)}")

    pairs = []
    for stem in sorted(images.keys() & masks.keys()):
        image = _read_png(images[stem], 'RGB').astype(np.float32) / 255.0
        mask = _read_png(masks[stem], 'L')
        if image.shape[:2] != mask.shape:
            raise DatasetError(
                f"Pair {stem}: image {image.shape[:2]} and mask {mask.shape} differ in size"
            )
        pairs.append(ImageMaskPair(
            image=torch.from_numpy(image).permute(2, 0, 1).contiguous(),
            mask=torch.from_numpy((mask >= 128).astype(np.float32))[None],
            id=stem,
        ))

    logger.info(f"Loaded {len(pairs)} pairs from {root}")
    return pairs


def write_dataset(pairs: Iterable[ImageMaskPair], root: Union[str, Path]) -> list[str]:
    """Write pairs in the load_dataset layout; returns the written ids"""
    root = Path(root)
    try:
        (root / 'images').mkdir(parents=True, exist_ok=True)
        (root / 'masks').mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"Cannot create dataset directory {root}: {e}") from e

    ids = []
    for pair in pairs:
        image = (pair.image.detach().clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)
        mask = (pair.mask.detach()[0] * 255).to(torch.uint8)
        Image.fromarray(image.permute(1, 2, 0).cpu().numpy()).save(
            root / 'images' / f"{pair.id}{IMAGE_SUFFIX}"
        )
        Image.fromarray(mask.cpu().numpy()).save(root / 'masks' / f"{pair.id}{IMAGE_SUFFIX}")
        ids.append(pair.id)
    return ids


def export_generated(pairs: Union[GeneratedBatch, Sequence[ImageMaskPair]], out_dir: Union[str, Path],
                     threshold: float = MASK_THRESHOLD, metadata: Optional[dict] = None) -> dict:
    """
    Write generated pairs plus ``manifest.json``.

    Masks are binarized at ``threshold`` (>= is foreground) and images are
    quantized to 8 bits. The manifest is written last.
    """
    if isinstance(pairs, GeneratedBatch):
        pairs = pairs.to_pairs(threshold)
    out_dir = Path(out_dir)
    ids = write_dataset(pairs, out_dir)

    manifest = {
        'count': len(ids),
        'ids': ids,
        'threshold': threshold,
        'created_at': utc_timestamp(),
        **(metadata or {}),
    }
    atomic_write_json(out_dir / 'manifest.json', manifest)
    logger.info(f"Exported {len(ids)} pairs to {out_dir}")
    return manifest


def _smooth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-frequency textured soil/leaf background in roughly [0.1, 0.45]"""
    coarse = rng.uniform(0.0, 1.0, size=(1, 1, 4, 4))
    smooth = F.interpolate(torch.from_numpy(coarse), size=(size, size), mode='bicubic',
                           align_corners=False)[0, 0].numpy()
    smooth = np.clip(smooth, 0.0, 1.0)
    base = rng.uniform(0.15, 0.25, size=3)
    tint = np.array([0.10, 0.15, 0.05])
    grain = rng.normal(0.0, 0.02, size=(size, size, 1))
    return np.clip(base[None, None] + tint[None, None] * smooth[..., None] + grain, 0.1, 0.45)


def make_toy_dataset(n: int, size: int, seed: int) -> list[ImageMaskPair]:
    """
    Render ``n`` pairs of 3-12 bright ellipses ("heads") over a darker
    textured background; the mask is the exact ellipse support.
    """
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing='ij')

    pairs = []
    for index in range(n):
        image = _smooth_background(rng, size)
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(3, 13))):
            cx, cy = rng.uniform(0, size, size=2)
            a = max(1.0, rng.uniform(0.04, 0.10) * size)
            b = max(1.0, rng.uniform(0.04, 0.10) * size)
            theta = rng.uniform(0.0, np.pi)
            dx, dy = xs - cx, ys - cy
            u = dx * np.cos(theta) + dy * np.sin(theta)
            v = -dx * np.sin(theta) + dy * np.cos(theta)
            inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
            if not inside.any():
                continue
            color = np.array([rng.uniform(0.75, 0.95), rng.uniform(0.7, 0.9), rng.uniform(0.35, 0.55)])
            shade = 1.0 - 0.15 * np.clip((u / a) ** 2 + (v / b) ** 2, 0.0, 1.0)
            image[inside] = np.clip(color[None] * shade[inside][:, None], 0.6 * color, 1.0)
            mask |= inside

        pairs.append(ImageMaskPair(
            image=torch.from_numpy(image.astype(np.float32)).permute(2, 0, 1).contiguous(),
            mask=torch.from_numpy(mask.astype(np.float32))[None],
            id=f"toy_{index:05d}",
        ))
    return pairs


def prepare_eval_crops(pairs: Iterable[ImageMaskPair], crop: int, out_size: int) -> list[ImageMaskPair]:
    """Tile every source into non-overlapping crop x crop tiles resized to out_size"""
    crops = []
    for pair in pairs:
        height, width = pair.size
        if height % crop or width % crop:
            raise ValueError(f"Pair {pair.id!r} of size {height}x{width} is not divisible into {crop}x{crop} crops")
        for row in range(height // crop):
            for col in range(width // crop):
                window = (slice(None), slice(row * crop, (row + 1) * crop), slice(col * crop, (col + 1) * crop))
                tile = ImageMaskPair(image=pair.image[window], mask=pair.mask[window],
                                     id=f"{pair.id}_r{row}_c{col}")
                crops.append(resize_pair(tile, out_size))
    return crops
