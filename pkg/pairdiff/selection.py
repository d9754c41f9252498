"""
Checkpoint scoring by the Jensen-Shannon divergence between training and
generated RGB distributions, and the weight-selection strategies.
"""
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union
import logging
import math

import numpy as np
import torch
from scipy.special import rel_entr

from .choices import SamplerMode, SelectionStrategy
from .generator import sample_pairs
from .training import CheckpointRecord, load_sampler, write_manifest

logger = logging.getLogger(__name__)

DEFAULT_BINS = 256
LN2 = math.log(2.0)


@dataclass
class RGBHistogram:
    """Per-channel probability vectors, shape (3, bins)"""
    bins: int
    per_channel: np.ndarray

    def __post_init__(self):
        self.per_channel = np.asarray(self.per_channel, dtype=np.float64)
        if self.per_channel.shape != (3, self.bins):
            raise ValueError(f"Expected per_channel of shape (3, {self.bins}), got {self.per_channel.shape}")
        if (self.per_channel < 0).any():
            raise ValueError("Histogram has negative entries")
        if not np.allclose(self.per_channel.sum(axis=1), 1.0, rtol=0.0, atol=1e-9):
            raise ValueError("Histogram channels do not sum to 1")


def rgb_histogram(images: Union[torch.Tensor, Iterable[torch.Tensor]], bins: int = DEFAULT_BINS) -> RGBHistogram:
    """
    Normalized histogram of every pixel of every image, per channel.

    Bin b covers [b/bins, (b+1)/bins); the last bin is closed.
    """
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    if isinstance(images, torch.Tensor):
        images = [images] if images.dim() == 3 else list(images)
    else:
        images = list(images)
    if not images:
        raise ValueError("Cannot build a histogram of an empty image set")

    counts = np.zeros((3, bins), dtype=np.float64)
    for image in images:
        values = image.detach().cpu().to(torch.float64).numpy()
        if values.shape[0] != 3:
            raise ValueError(f"Expected RGB images (3, H, W), got {values.shape}")
        if values.min() < 0.0 or values.max() > 1.0:
            raise ValueError("Image values must lie in [0, 1]")
        for channel in range(3):
            counts[channel] += np.histogram(values[channel], bins=bins, range=(0.0, 1.0))[0]
    return RGBHistogram(bins=bins, per_channel=counts / counts.sum(axis=1, keepdims=True))


def js_divergence(p: Sequence[float], q: Sequence[float]) -> float:
    """Jensen-Shannon divergence in nats, bounded by ln 2"""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"Distributions differ in length: {p.shape} vs {q.shape}")
    if (p < 0).any() or (q < 0).any():
        raise ValueError("Distributions must not have negative entries")
    if not (np.isclose(p.sum(), 1.0, atol=1e-6) and np.isclose(q.sum(), 1.0, atol=1e-6)):
        raise ValueError(f"Distributions must sum to 1, got {p.sum()} and {q.sum()}")
    m = 0.5 * (p + q)
    divergence = 0.5 * rel_entr(p, m).sum() + 0.5 * rel_entr(q, m).sum()
    return float(np.clip(divergence, 0.0, LN2))


def histogram_divergence(h1: RGBHistogram, h2: RGBHistogram) -> float:
    """Mean of the three per-channel divergences"""
    if h1.bins != h2.bins:
        raise ValueError(f"Histograms differ in bins: {h1.bins} vs {h2.bins}")
    return float(np.mean([js_divergence(h1.per_channel[c], h2.per_channel[c]) for c in range(3)]))


def score_checkpoint(record: CheckpointRecord, train_hist: RGBHistogram, n_samples: int = 64, *,
                     mode: str = SamplerMode.DDPM, steps: Optional[int] = None, seed: int = 0,
                     batch_size: int = 16, device='cpu') -> float:
    """
    Generate ``n_samples`` pairs from the checkpoint and store the mean JSD of
    their RGB histogram against ``train_hist`` in the checkpoint manifest.
    """
    generator, sched = load_sampler(record)
    generator = generator.to(device)
    T = generator.config.num_timesteps
    if steps is None:
        steps = T if mode == SamplerMode.DDPM else min(100, T)
    try:
        batch = sample_pairs(generator, n_samples, sched, mode, steps, seed, batch_size, device)
    except Exception as e:
        logger.error(f"Error generating samples for checkpoint {record.epoch}: {str(e)}")
        raise

    generated = rgb_histogram(batch.images, bins=train_hist.bins)
    record.mean_jsd = histogram_divergence(train_hist, generated)
    record.scoring = {
        'mode': str(mode),
        'steps': steps,
        'n_samples': n_samples,
        'seed': seed,
        'full_fidelity': mode == SamplerMode.DDPM and steps == T,
    }
    write_manifest(record)
    logger.info(f"Scored checkpoint epoch {record.epoch}: mean_jsd={record.mean_jsd:.5f} ({mode}/{steps})")
    return record.mean_jsd


def select_weights(records: Sequence[CheckpointRecord], strategy: str) -> CheckpointRecord:
    """argmin val_loss or mean_jsd, or the final epoch; ties go to the earliest epoch"""
    if not records:
        raise ValueError("No checkpoint records to select from")
    if strategy == SelectionStrategy.FINAL_EPOCH:
        return max(records, key=lambda r: r.epoch)

    metric = {
        SelectionStrategy.BEST_VAL_LOSS: 'val_loss',
        SelectionStrategy.MIN_MEAN_JSD: 'mean_jsd',
    }.get(strategy)
    if metric is None:
        raise ValueError(f"Unknown selection strategy {strategy!r}")
    missing = [r.epoch for r in records if getattr(r, metric) is None or math.isnan(getattr(r, metric))]
    if missing:
        raise ValueError(f"Strategy {strategy} needs {metric}, missing for epochs {missing}")
    return min(records, key=lambda r: (getattr(r, metric), r.epoch))


def format_selection_table(records: Sequence[CheckpointRecord], chosen: Optional[CheckpointRecord] = None) -> str:
    lines = [f"{'':1} {'epoch':>6} {'val_loss':>12} {'mean_jsd':>12}"]
    for record in sorted(records, key=lambda r: r.epoch):
        mark = '*' if chosen is not None and record.epoch == chosen.epoch else ' '
        jsd = f"{record.mean_jsd:12.6f}" if record.mean_jsd is not None else f"{'-':>12}"
        lines.append(f"{mark} {record.epoch:>6} {record.val_loss:12.6f} {jsd}")
    return '\n'.join(lines)
