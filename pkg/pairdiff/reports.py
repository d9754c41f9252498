"""Contact sheets and metric tables"""
from pathlib import Path
from typing import Iterable, Sequence, Union
import csv
import logging

import torch
from torchvision.utils import save_image

from .datasets import ImageMaskPair

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ('method', 'phase', 'dice', 'iou', 'mean_dice', 'mean_iou')
OVERLAY_COLOR = (1.0, 0.0, 0.0)


def overlay(pair: ImageMaskPair, alpha: float = 0.5) -> torch.Tensor:
    """Mask painted over the image in OVERLAY_COLOR"""
    color = torch.tensor(OVERLAY_COLOR, dtype=pair.image.dtype)[:, None, None]
    weight = alpha * pair.mask
    return pair.image * (1.0 - weight) + color * weight


def contact_sheet(pairs: Sequence[ImageMaskPair], path: Union[str, Path], max_pairs: int = 16) -> Path:
    """PNG grid with an image row, a mask row and an overlay row"""
    pairs = list(pairs)[:max_pairs]
    if not pairs:
        raise ValueError("No pairs to render")
    images = [p.image.clamp(0.0, 1.0) for p in pairs]
    masks = [p.mask.expand(3, -1, -1) for p in pairs]
    overlays = [overlay(p) for p in pairs]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_image(torch.stack(images + masks + overlays), path, nrow=len(pairs), padding=2, pad_value=1.0)
    logger.info(f"Wrote contact sheet of {len(pairs)} pairs to {path}")
    return path


def write_metrics_csv(rows: Iterable[dict], path: Union[str, Path], append: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_header = not (append and path.is_file())
    with open(path, 'a' if append else 'w', newline='') as handle:
        writer = csv.DictWriter(handle, fieldnames=METRIC_COLUMNS, extrasaction='ignore')
        if write_header:
            writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def read_metrics_csv(path: Union[str, Path]) -> list[dict]:
    with open(path, newline='') as handle:
        return list(csv.DictReader(handle))


def format_metrics_table(rows: Sequence[dict]) -> str:
    lines = [f"{'method':<36} {'phase':<20} {'dice':>8} {'iou':>8}"]
    for row in rows:
        lines.append(f"{row['method']:<36} {row['phase']:<20} {float(row['dice']):8.4f} {float(row['iou']):8.4f}")
    return '\n'.join(lines)
