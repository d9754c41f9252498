"""
Downstream segmentation: a small encoder-decoder trained on (generated)
image-mask pairs, fine-tuning, and Dice/IoU evaluation.
"""
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union
import copy
import logging

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F
from torch.utils.data import DataLoader, TensorDataset

from .datasets import DatasetError, ImageMaskPair, MASK_THRESHOLD
from .storage import atomic_write
from .training import CheckpointError, TrainingDivergedError

logger = logging.getLogger(__name__)

SEGMENTER_NAME = 'segmenter.bin'


@dataclass(frozen=True)
class SegConfig:
    encoder_widths: tuple = (16, 32, 64, 128)
    in_channels: int = 3
    lr: float = 0.01
    momentum: float = 0.0
    epochs: int = 50
    finetune_epochs: int = 10
    batch_size: int = 16
    dice_weight: float = 1.0
    bce_weight: float = 1.0
    smooth: float = 1.0
    threshold: float = MASK_THRESHOLD

    def __post_init__(self):
        object.__setattr__(self, 'encoder_widths', tuple(int(w) for w in self.encoder_widths))
        if not self.encoder_widths or min(self.encoder_widths) < 1:
            raise ValueError(f"encoder_widths must be positive, got {self.encoder_widths}")
        if self.epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")

    @property
    def decoder_widths(self) -> tuple:
        return tuple(reversed(self.encoder_widths))

    def to_dict(self) -> dict:
        values = asdict(self)
        values['encoder_widths'] = list(self.encoder_widths)
        return values


@dataclass
class SegMetrics:
    """Aggregate (summed confusion counts) and mean per-image scores"""
    dice: float
    iou: float
    mean_dice: float
    mean_iou: float
    per_image: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {'dice': self.dice, 'iou': self.iou, 'mean_dice': self.mean_dice, 'mean_iou': self.mean_iou,
                'headline': 'aggregate'}


class ConvStage(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )


class SegmentationNet(nn.Module):
    """Conv encoder with a mirrored decoder and skip concatenation; outputs logits"""

    def __init__(self, config: SegConfig):
        super().__init__()
        self.config = config
        widths = config.encoder_widths
        self.encoder = nn.ModuleList()
        channels_in = config.in_channels
        for width in widths:
            self.encoder.append(ConvStage(channels_in, width))
            channels_in = width

        self.upsamples = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for deeper, width in zip(config.decoder_widths, config.decoder_widths[1:]):
            self.upsamples.append(nn.ConvTranspose2d(deeper, width, kernel_size=2, stride=2))
            self.decoder.append(ConvStage(2 * width, width))
        self.head = nn.Conv2d(widths[0], 1, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        factor = 2 ** (len(self.encoder) - 1)
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ValueError(f"Input size {tuple(x.shape[-2:])} is not divisible by {factor}")
        skips = []
        for i, stage in enumerate(self.encoder):
            x = stage(x if i == 0 else F.max_pool2d(x, 2))
            skips.append(x)
        for upsample, stage, skip in zip(self.upsamples, self.decoder, reversed(skips[:-1])):
            x = stage(torch.cat([upsample(x), skip], dim=1))
        return self.head(x)


def _check_masks(pred: torch.Tensor, gt: torch.Tensor) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"Mask shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    for name, mask in (('pred', pred), ('gt', gt)):
        if not bool(((mask == 0) | (mask == 1)).all()):
            raise ValueError(f"{name} mask is not binary")


def confusion_counts(pred: torch.Tensor, gt: torch.Tensor) -> tuple[int, int, int]:
    """(true positives, false positives, false negatives)"""
    pred, gt = pred.bool(), gt.bool()
    return int((pred & gt).sum()), int((pred & ~gt).sum()), int((~pred & gt).sum())


def _dice_from_counts(tp: int, fp: int, fn: int) -> float:
    denominator = 2 * tp + fp + fn
    return 1.0 if denominator == 0 else 2 * tp / denominator


def _iou_from_counts(tp: int, fp: int, fn: int) -> float:
    union = tp + fp + fn
    return 1.0 if union == 0 else tp / union


def dice_score(pred: torch.Tensor, gt: torch.Tensor) -> float:
    """2|A and B| / (|A| + |B|); 1 when both masks are empty"""
    _check_masks(pred, gt)
    return _dice_from_counts(*confusion_counts(pred, gt))


def iou_score(pred: torch.Tensor, gt: torch.Tensor) -> float:
    """|A and B| / |A or B|; 1 when both masks are empty"""
    _check_masks(pred, gt)
    return _iou_from_counts(*confusion_counts(pred, gt))


def dice_loss(probs: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """1 - soft dice per image, averaged over the batch"""
    if probs.shape != target.shape:
        raise ValueError(f"Shapes differ: {tuple(probs.shape)} vs {tuple(target.shape)}")
    dims = tuple(range(1, probs.dim()))
    intersection = (probs * target).sum(dim=dims)
    total = probs.sum(dim=dims) + target.sum(dim=dims)
    return (1.0 - (2.0 * intersection + smooth) / (total + smooth)).mean()


def segmentation_loss(logits: torch.Tensor, target: torch.Tensor, cfg: SegConfig) -> torch.Tensor:
    dice = dice_loss(torch.sigmoid(logits), target, cfg.smooth)
    bce = F.binary_cross_entropy_with_logits(logits, target)
    return cfg.dice_weight * dice + cfg.bce_weight * bce


def _tensors(pairs: Sequence[ImageMaskPair]) -> tuple[torch.Tensor, torch.Tensor]:
    if not pairs:
        raise DatasetError("Segmentation dataset is empty")
    sizes = {pair.size for pair in pairs}
    if len(sizes) != 1:
        raise DatasetError(f"Segmentation pairs differ in size: {sorted(sizes)}")
    return torch.stack([p.image for p in pairs]), torch.stack([p.mask for p in pairs])


def _fit(model: SegmentationNet, pairs: Sequence[ImageMaskPair], cfg: SegConfig, epochs: int, seed: int,
         device) -> SegmentationNet:
    images, masks = _tensors(pairs)
    loader = DataLoader(TensorDataset(images, masks), batch_size=cfg.batch_size, shuffle=True,
                        generator=torch.Generator().manual_seed(seed))
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    model.to(device)

    for epoch in range(1, epochs + 1):
        model.train()
        losses = []
        for step, (x, y) in enumerate(loader):
            x, y = x.to(device), y.to(device)
            loss = segmentation_loss(model(x), y, cfg)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch, step, float(loss.detach()))
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        logger.debug(f"Segmenter epoch {epoch}/{epochs}: loss={np.mean(losses) if losses else float('nan'):.4f}")
    model.eval()
    return model


def train_segmenter(train_pairs: Sequence[ImageMaskPair], cfg: SegConfig, seed: int,
                    device='cpu') -> SegmentationNet:
    """Train from scratch with Dice + BCE under SGD"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SegmentationNet(cfg)
    logger.info(f"Training segmenter on {len(train_pairs)} pairs for {cfg.epochs} epochs")
    return _fit(model, train_pairs, cfg, cfg.epochs, seed, device)


def finetune(model: SegmentationNet, real_pairs: Sequence[ImageMaskPair], cfg: SegConfig, seed: int,
             epochs: Optional[int] = None, device='cpu') -> SegmentationNet:
    """Continue training a copy of ``model`` on ``real_pairs``"""
    epochs = cfg.finetune_epochs if epochs is None else epochs
    tuned = copy.deepcopy(model)
    if epochs == 0:
        return tuned
    logger.info(f"Fine-tuning segmenter on {len(real_pairs)} pairs for {epochs} epochs")
    return _fit(tuned, real_pairs, cfg, epochs, seed, device)


def metrics_from_predictions(probs: torch.Tensor, gts: torch.Tensor, threshold: float = MASK_THRESHOLD,
                             ids: Optional[Sequence[str]] = None) -> SegMetrics:
    """Binarize ``probs`` with the >= rule and score against ``gts`` (N, 1, H, W)"""
    if probs.shape[0] == 0:
        raise ValueError("Cannot evaluate an empty test set")
    preds = (probs >= threshold).to(gts.dtype)
    ids = list(ids) if ids is not None else [str(i) for i in range(preds.shape[0])]
    totals = np.zeros(3, dtype=np.int64)
    per_image = []
    for i in range(preds.shape[0]):
        _check_masks(preds[i], gts[i])
        counts = confusion_counts(preds[i], gts[i])
        totals += counts
        per_image.append({'id': ids[i], 'dice': _dice_from_counts(*counts), 'iou': _iou_from_counts(*counts)})
    return SegMetrics(
        dice=_dice_from_counts(*totals),
        iou=_iou_from_counts(*totals),
        mean_dice=float(np.mean([row['dice'] for row in per_image])),
        mean_iou=float(np.mean([row['iou'] for row in per_image])),
        per_image=per_image,
    )


def predict(model: SegmentationNet, images: torch.Tensor, batch_size: int = 32, device='cpu') -> torch.Tensor:
    model.eval().to(device)
    outputs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            outputs.append(torch.sigmoid(model(images[start:start + batch_size].to(device))).cpu())
    return torch.cat(outputs)


def evaluate(model: SegmentationNet, test_pairs: Sequence[ImageMaskPair], threshold: float = MASK_THRESHOLD,
             device='cpu') -> SegMetrics:
    if not test_pairs:
        raise ValueError("Cannot evaluate an empty test set")
    images, masks = _tensors(test_pairs)
    metrics = metrics_from_predictions(predict(model, images, device=device), masks, threshold,
                                       [p.id for p in test_pairs])
    logger.info(f"Evaluated {len(test_pairs)} pairs: dice={metrics.dice:.4f} iou={metrics.iou:.4f} "
                f"(mean per image {metrics.mean_dice:.4f}/{metrics.mean_iou:.4f})")
    return metrics


def save_segmenter(model: SegmentationNet, path: Union[str, Path]) -> Path:
    payload = {'seg_config': model.config.to_dict(), 'segmenter': model.state_dict()}
    return atomic_write(path, lambda handle: torch.save(payload, handle))


def load_segmenter(path: Union[str, Path]) -> SegmentationNet:
    path = Path(path)
    if path.is_dir():
        path = path / SEGMENTER_NAME
    if not path.is_file():
        raise CheckpointError(f"Segmenter weights not found: {path}")
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
        model = SegmentationNet(SegConfig(**payload['seg_config']))
        model.load_state_dict(payload['segmenter'])
    except (KeyError, TypeError, RuntimeError) as e:
        raise CheckpointError(f"Cannot load segmenter {path}: {e}") from e
    return model.eval()
