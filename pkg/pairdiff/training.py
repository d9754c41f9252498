"""
Data pipeline, optimization loops and checkpointing for the paired generator
and the super-resolution model.

A run directory looks like::

    <run_dir>/train_log.csv
    <run_dir>/ckpt_<epoch>/weights.bin
    <run_dir>/ckpt_<epoch>/manifest.json
"""
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union
import csv
import logging
import math

import numpy as np
import torch
from torch.nn import functional as F
from torch.utils.data import DataLoader, Dataset

from .adversarial import (
    Discriminator,
    DiscriminatorSchedule,
    combine_generator_loss,
    discriminator_step,
    generator_adversarial_loss,
    sample_timesteps,
)
from .choices import PosteriorVariance
from .datasets import DatasetError, ImageMaskPair, resize_pair
from .diffusion import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    ddpm_reverse_step,
    forward_diffuse,
    make_linear_schedule,
    to_model_space,
)
from .generator import (
    PairedGenerator,
    PairedGeneratorConfig,
    build_generator,
    generator_from_payload,
    save_generator_payload,
)
from .storage import MANIFEST_NAME, atomic_write, atomic_write_json, read_json, utc_timestamp
from .superres import (
    SRConfig,
    SuperResolutionModel,
    build_sr_model,
    downsample_states,
    save_sr_payload,
    sr_model_from_payload,
)

logger = logging.getLogger(__name__)

WEIGHTS_NAME = 'weights.bin'
LOG_NAME = 'train_log.csv'
LOG_COLUMNS = ('epoch', 'train_mse', 'val_mse', 'loss_d', 'loss_g_adv')


class TrainingDivergedError(RuntimeError):
    """A loss became NaN or infinite"""

    def __init__(self, epoch: int, step: int, loss: float):
        self.epoch = epoch
        self.step = step
        self.loss = loss
        super().__init__(f"Loss diverged to {loss} at epoch {epoch}, step {step}")


class CheckpointError(RuntimeError):
    """A checkpoint is missing or cannot be read"""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 0.00021
    epochs: int = 1500
    T: int = 1000
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    adv_weight: float = 0.25
    use_discriminator: bool = False
    crop_size: int = 512
    train_size: int = 128
    split_ratio: float = 0.8
    seed: int = 0
    steps_per_epoch: Optional[int] = None
    checkpoint_fraction: float = 0.05
    grad_clip: Optional[float] = None
    posterior_variance: str = PosteriorVariance.BETA
    num_workers: int = 0

    def __post_init__(self):
        if not 0 < self.split_ratio < 1:
            raise ValueError(f"split_ratio must be in (0, 1), got {self.split_ratio}")
        if self.crop_size < self.train_size:
            raise ValueError(f"crop_size ({self.crop_size}) must be >= train_size ({self.train_size})")
        for name in ('batch_size', 'epochs', 'T', 'train_size'):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError(f"steps_per_epoch must be positive, got {self.steps_per_epoch}")
        if not 0 < self.checkpoint_fraction <= 1:
            raise ValueError(f"checkpoint_fraction must be in (0, 1], got {self.checkpoint_fraction}")
        if self.posterior_variance not in PosteriorVariance.values:
            raise ValueError(f"Unknown posterior variance {self.posterior_variance!r}")

    def steps_for(self, n_train: int) -> int:
        """Optimization steps per epoch for a training split of ``n_train`` pairs"""
        return self.steps_per_epoch or math.ceil(n_train / self.batch_size)

    def schedule(self):
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return {key: str(value) if isinstance(value, str) else value
                for key, value in asdict(self).items()}


@dataclass
class CheckpointRecord:
    """Checkpoint metadata; the manifest is readable without loading weights"""
    epoch: int
    weights_uri: str
    val_loss: float
    mean_jsd: Optional[float] = None
    config_hash: str = ''
    scoring: Optional[dict] = None
    created_at: str = ''
    # restored from weights.bin on resume, never written to the manifest
    rng_state: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    @property
    def directory(self) -> Path:
        return Path(self.weights_uri).parent

    def to_manifest(self) -> dict:
        return {
            'epoch': self.epoch,
            'weights_uri': self.weights_uri,
            'val_loss': self.val_loss,
            'mean_jsd': self.mean_jsd,
            'config_hash': self.config_hash,
            'scoring': self.scoring,
            'created_at': self.created_at,
        }

    @classmethod
    def from_manifest(cls, manifest: dict) -> 'CheckpointRecord':
        return cls(
            epoch=int(manifest['epoch']),
            weights_uri=str(manifest['weights_uri']),
            val_loss=float(manifest['val_loss']),
            mean_jsd=manifest.get('mean_jsd'),
            config_hash=manifest.get('config_hash', ''),
            scoring=manifest.get('scoring'),
            created_at=manifest.get('created_at', ''),
        )


def flip_pair(pair: ImageMaskPair, axis: str) -> ImageMaskPair:
    dims = {'horizontal': [2], 'vertical': [1]}[axis]
    return ImageMaskPair(image=pair.image.flip(dims), mask=pair.mask.flip(dims), id=pair.id)


def augment(pair: ImageMaskPair, rng: torch.Generator, crop_size: int, train_size: int) -> ImageMaskPair:
    """Random crop_size crop resized to train_size plus independent 50% h/v flips"""
    height, width = pair.size
    if height < crop_size or width < crop_size:
        raise ValueError(f"Pair {pair.id!r} of size {height}x{width} is smaller than crop {crop_size}")
    top = int(torch.randint(0, height - crop_size + 1, (1,), generator=rng))
    left = int(torch.randint(0, width - crop_size + 1, (1,), generator=rng))
    flips = torch.rand(2, generator=rng) < 0.5

    window = (slice(None), slice(top, top + crop_size), slice(left, left + crop_size))
    out = ImageMaskPair(image=pair.image[window], mask=pair.mask[window], id=pair.id)
    if flips[0]:
        out = flip_pair(out, 'horizontal')
    if flips[1]:
        out = flip_pair(out, 'vertical')
    return resize_pair(out, train_size)


def center_crop(pair: ImageMaskPair, crop_size: int) -> ImageMaskPair:
    height, width = pair.size
    crop_h, crop_w = min(crop_size, height), min(crop_size, width)
    top, left = (height - crop_h) // 2, (width - crop_w) // 2
    window = (slice(None), slice(top, top + crop_h), slice(left, left + crop_w))
    return ImageMaskPair(image=pair.image[window], mask=pair.mask[window], id=pair.id)


def split_dataset(dataset: Sequence[ImageMaskPair], ratio: float, seed: int):
    """Deterministic disjoint train/validation partition"""
    if not dataset:
        raise DatasetError("Cannot split an empty dataset")
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    n = len(dataset)
    n_train = min(n, max(1, round(n * ratio)))
    order = torch.randperm(n, generator=torch.Generator().manual_seed(seed)).tolist()
    return [dataset[i] for i in order[:n_train]], [dataset[i] for i in order[n_train:]]


def item_generator(seed: int, epoch: int, index: int) -> torch.Generator:
    """Per-item stream that does not depend on worker count or order"""
    state = np.random.SeedSequence([seed, epoch, index]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(state) & 0x7FFF_FFFF_FFFF_FFFF)


class PairDataset(Dataset):
    """
    ``length`` augmented samples per epoch drawn with replacement from
    ``pairs``; items are stacked model-space tensors (C+1, size, size).
    """

    def __init__(self, pairs: Sequence[ImageMaskPair], length: int, crop_size: int, size: int, seed: int):
        if not pairs:
            raise DatasetError("Training split is empty")
        self.pairs = list(pairs)
        self.length = length
        self.crop_size = crop_size
        self.size = size
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return self.length

    def __getitem__(self, index: int) -> torch.Tensor:
        rng = item_generator(self.seed, self.epoch, index)
        source = self.pairs[int(torch.randint(0, len(self.pairs), (1,), generator=rng))]
        return to_model_space(augment(source, rng, self.crop_size, self.size).stacked())


def validation_tensor(pairs: Sequence[ImageMaskPair], crop_size: int, size: int) -> Optional[torch.Tensor]:
    """Center crop then resize every validation pair; None when there are none"""
    if not pairs:
        return None
    return to_model_space(torch.stack([resize_pair(center_crop(p, crop_size), size).stacked() for p in pairs]))


def checkpoint_epochs(epochs: int, fraction: float) -> set[int]:
    """Every ``fraction`` of the run, plus the final epoch"""
    interval = max(1, round(epochs * fraction))
    return set(range(interval, epochs + 1, interval)) | {epochs}


def save_checkpoint(run_dir: Union[str, Path], epoch: int, payload: dict, val_loss: float,
                    config_hash: str = '') -> CheckpointRecord:
    """Write weights.bin, then manifest.json, each atomically"""
    ckpt_dir = Path(run_dir) / f"ckpt_{epoch}"
    weights = atomic_write(ckpt_dir / WEIGHTS_NAME, lambda handle: torch.save(payload, handle))
    record = CheckpointRecord(
        epoch=epoch,
        weights_uri=str(weights.resolve()),
        val_loss=float(val_loss),
        config_hash=config_hash,
        created_at=utc_timestamp(),
        rng_state=payload.get('rng_state'),
    )
    atomic_write_json(ckpt_dir / MANIFEST_NAME, record.to_manifest())
    logger.info(f"Saved checkpoint for epoch {epoch} to {ckpt_dir}")
    return record


def write_manifest(record: CheckpointRecord) -> None:
    atomic_write_json(record.directory / MANIFEST_NAME, record.to_manifest())


def load_checkpoint_records(run_dir: Union[str, Path]) -> list[CheckpointRecord]:
    """Records of every complete checkpoint under ``run_dir``, by epoch"""
    records = []
    for manifest_path in Path(run_dir).glob(f'ckpt_*/{MANIFEST_NAME}'):
        manifest = read_json(manifest_path)
        if manifest is None:
            continue
        try:
            record = CheckpointRecord.from_manifest(manifest)
        except (KeyError, TypeError, ValueError) as e:
            logger.warning(f"Skipping malformed manifest {manifest_path}: {e}")
            continue
        if not Path(record.weights_uri).is_file():
            logger.warning(f"Skipping checkpoint {manifest_path.parent}: weights missing")
            continue
        records.append(record)
    return sorted(records, key=lambda r: r.epoch)


def load_payload(source: Union[CheckpointRecord, str, Path]) -> dict:
    path = Path(source.weights_uri if isinstance(source, CheckpointRecord) else source)
    if path.is_dir():
        path = path / WEIGHTS_NAME
    if not path.is_file():
        raise CheckpointError(f"Checkpoint weights not found: {path}")
    try:
        return torch.load(path, map_location='cpu', weights_only=True)
    except Exception as e:
        logger.error(f"Error loading checkpoint {path}: {str(e)}")
        raise CheckpointError(f"Cannot load checkpoint {path}: {e}") from e


def load_generator(source: Union[CheckpointRecord, str, Path]) -> PairedGenerator:
    payload = load_payload(source)
    if 'generator' not in payload:
        raise CheckpointError(f"{source} holds no paired generator")
    return generator_from_payload(payload)


def load_sampler(source: Union[CheckpointRecord, str, Path]):
    """Generator plus the noise schedule it was trained with"""
    payload = load_payload(source)
    if 'generator' not in payload:
        raise CheckpointError(f"{source} holds no paired generator")
    generator = generator_from_payload(payload)
    schedule = payload.get('schedule') or {'T': generator.config.num_timesteps}
    return generator, make_linear_schedule(
        int(schedule['T']),
        float(schedule.get('beta_start', DEFAULT_BETA_START)),
        float(schedule.get('beta_end', DEFAULT_BETA_END)),
    )


def load_sr_model(source: Union[CheckpointRecord, str, Path]) -> SuperResolutionModel:
    payload = load_payload(source)
    if 'sr_model' not in payload:
        raise CheckpointError(f"{source} holds no super-resolution model")
    return sr_model_from_payload(payload)


def read_train_log(run_dir: Union[str, Path]) -> list[dict]:
    path = Path(run_dir) / LOG_NAME
    if not path.is_file():
        return []
    with open(path, newline='') as handle:
        return list(csv.DictReader(handle))


class TrainingLog:
    """Append-only CSV with one row per epoch"""

    def __init__(self, run_dir: Path, start_epoch: int):
        self.path = run_dir / LOG_NAME
        rows = [row for row in read_train_log(run_dir) if int(row['epoch']) < start_epoch]
        with open(self.path, 'w', newline='') as handle:
            writer = csv.DictWriter(handle, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)

    def append(self, row: dict) -> None:
        with open(self.path, 'a', newline='') as handle:
            csv.DictWriter(handle, fieldnames=LOG_COLUMNS).writerow(
                {key: '' if row.get(key) is None else row[key] for key in LOG_COLUMNS}
            )


class Trainer:
    """
    Shared epoch loop: data loading, NaN policy, validation, logging and
    checkpoint cadence. Subclasses supply the model-specific step.
    """
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer

    def __init__(self, train_cfg: TrainConfig, size: int, device: Union[str, torch.device] = 'cpu'):
        self.cfg = train_cfg
        self.size = size
        self.device = torch.device(device)
        self.rng = torch.Generator().manual_seed(train_cfg.seed)
        self.epoch = 0
        self.step_count = 0

    def training_step(self, batch: torch.Tensor) -> dict:
        raise NotImplementedError

    def validation_loss(self, states: torch.Tensor) -> float:
        raise NotImplementedError

    def model_payload(self) -> dict:
        raise NotImplementedError

    def restore_models(self, payload: dict) -> None:
        raise NotImplementedError

    def payload(self) -> dict:
        return {
            **self.model_payload(),
            'optimizer': self.optimizer.state_dict(),
            'rng_state': self.rng.get_state(),
            'epoch': self.epoch,
            'step_count': self.step_count,
        }

    def restore(self, record: CheckpointRecord) -> None:
        payload = load_payload(record)
        self.restore_models(payload)
        self.optimizer.load_state_dict(payload['optimizer'])
        self.rng.set_state(payload['rng_state'])
        self.epoch = int(payload['epoch'])
        self.step_count = int(payload.get('step_count', 0))
        logger.info(f"Resumed from epoch {self.epoch} ({record.weights_uri})")

    def optimize(self, loss: torch.Tensor) -> None:
        if not torch.isfinite(loss):
            raise TrainingDivergedError(self.epoch, self.step_count, float(loss.detach()))
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()

    def noise_like(self, x: torch.Tensor) -> torch.Tensor:
        return torch.randn(x.shape, generator=self.rng, dtype=x.dtype).to(self.device)

    def fit(self, train: Sequence[ImageMaskPair], val: Sequence[ImageMaskPair], run_dir: Path,
            config_hash: str = '', on_checkpoint: Optional[Callable[[CheckpointRecord], None]] = None,
            records: Optional[list[CheckpointRecord]] = None) -> list[CheckpointRecord]:
        cfg = self.cfg
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        records = list(records or [])

        steps = cfg.steps_for(len(train))
        dataset = PairDataset(train, steps * cfg.batch_size, cfg.crop_size, self.size, cfg.seed)
        loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=False,
                            num_workers=cfg.num_workers, drop_last=False)
        val_states = validation_tensor(val, cfg.crop_size, self.size)
        if val_states is None:
            logger.warning("Validation split is empty; validation loss falls back to training MSE")
        to_save = checkpoint_epochs(cfg.epochs, cfg.checkpoint_fraction)
        log = TrainingLog(run_dir, self.epoch + 1)
        logger.info(
            f"Training {type(self.model).__name__} for {cfg.epochs} epochs x {steps} steps "
            f"= {cfg.epochs * steps} optimization steps on {len(train)} pairs"
        )

        for epoch in range(self.epoch + 1, cfg.epochs + 1):
            self.epoch = epoch
            dataset.set_epoch(epoch)
            self.model.train()
            totals = {}
            for batch in loader:
                losses = self.training_step(batch.to(self.device))
                self.step_count += 1
                for key, value in losses.items():
                    totals.setdefault(key, []).append(value)
            means = {key: float(np.mean(values)) for key, values in totals.items()}

            self.model.eval()
            val_mse = self.validation_loss(val_states) if val_states is not None else means['train_mse']
            log.append({'epoch': epoch, 'val_mse': val_mse, **means})
            logger.info(
                f"Epoch {epoch}/{cfg.epochs}: train_mse={means['train_mse']:.5f} val_mse={val_mse:.5f}"
                + (f" loss_d={means['loss_d']:.4f} loss_g_adv={means['loss_g_adv']:.4f}"
                   if 'loss_d' in means else '')
            )

            if epoch in to_save:
                record = save_checkpoint(run_dir, epoch, self.payload(), val_mse, config_hash)
                records.append(record)
                if on_checkpoint is not None:
                    on_checkpoint(record)
        return records


class PairedTrainer(Trainer):
    """Noise-prediction MSE over both branches, optionally with the adversarial term"""

    def __init__(self, generator: PairedGenerator, train_cfg: TrainConfig,
                 disc_sched: Optional[DiscriminatorSchedule] = None, device='cpu'):
        super().__init__(train_cfg, generator.config.input_size, device)
        self.model = generator.to(self.device)
        self.sched = train_cfg.schedule()
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=train_cfg.lr)
        self.disc_sched = disc_sched or DiscriminatorSchedule(T=train_cfg.T)
        self.discriminator = None
        self.d_optimizer = None
        if train_cfg.use_discriminator:
            if self.disc_sched.T != train_cfg.T:
                raise ValueError(f"Discriminator schedule T ({self.disc_sched.T}) differs from T ({train_cfg.T})")
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(train_cfg.seed + 1)
                self.discriminator = Discriminator(generator.state_shape[0],
                                                   generator.config.input_size).to(self.device)
            self.d_optimizer = torch.optim.Adam(self.discriminator.parameters(), lr=train_cfg.lr)

    def sample_t(self, batch: int) -> torch.Tensor:
        if self.discriminator is not None:
            return sample_timesteps(batch, self.epoch, self.disc_sched, self.rng)
        return torch.randint(1, self.cfg.T + 1, (batch,), generator=self.rng)

    def generator_loss(self, x0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor) -> dict:
        """Loss terms for a fixed batch; randomness beyond t and noise comes from self.rng"""
        x_t = forward_diffuse(x0, t, noise, self.sched)
        eps = self.model.predict_state(x_t, t.to(self.device))
        mse = F.mse_loss(eps, noise)
        if self.discriminator is None:
            return {'loss': mse, 'mse': mse}

        # real x_{t-1} from the forward process (clean pair at t-1 = 0), fake from one reverse step
        t_prev = t - 1
        real = forward_diffuse(x0, t_prev.clamp(min=1), self.noise_like(x0), self.sched)
        at_zero = (t_prev == 0).to(self.device).reshape(-1, 1, 1, 1)
        real = torch.where(at_zero, x0, real)
        fake = ddpm_reverse_step(eps, x_t, t, self.noise_like(x0), self.sched,
                                 variance=self.cfg.posterior_variance)
        t_prev = t_prev.to(self.device)

        loss_d = discriminator_step(self.discriminator, self.d_optimizer, real, fake.detach(), t_prev)
        if not math.isfinite(loss_d):
            raise TrainingDivergedError(self.epoch, self.step_count, loss_d)
        adv = generator_adversarial_loss(self.discriminator, fake, t_prev)
        return {
            'loss': combine_generator_loss(mse, adv, self.cfg.adv_weight),
            'mse': mse,
            'adv': adv,
            'loss_d': loss_d,
        }

    def training_step(self, batch: torch.Tensor) -> dict:
        t = self.sample_t(batch.shape[0])
        noise = self.noise_like(batch)
        terms = self.generator_loss(batch, t, noise)
        self.optimize(terms['loss'])
        losses = {'train_mse': float(terms['mse'].detach())}
        if 'adv' in terms:
            losses['loss_d'] = terms['loss_d']
            losses['loss_g_adv'] = float(terms['adv'].detach())
        return losses

    def validation_loss(self, states: torch.Tensor) -> float:
        rng = torch.Generator().manual_seed(self.cfg.seed + 7919)
        states = states.to(self.device)
        t = torch.randint(1, self.cfg.T + 1, (states.shape[0],), generator=rng)
        noise = torch.randn(states.shape, generator=rng, dtype=states.dtype).to(self.device)
        with torch.no_grad():
            x_t = forward_diffuse(states, t, noise, self.sched)
            return float(F.mse_loss(self.model.predict_state(x_t, t.to(self.device)), noise))

    def model_payload(self) -> dict:
        payload = save_generator_payload(self.model)
        payload['schedule'] = {'T': self.cfg.T, 'beta_start': self.cfg.beta_start, 'beta_end': self.cfg.beta_end}
        if self.discriminator is not None:
            payload['discriminator'] = self.discriminator.state_dict()
            payload['d_optimizer'] = self.d_optimizer.state_dict()
        return payload

    def restore_models(self, payload: dict) -> None:
        self.model.load_state_dict(payload['generator'])
        if self.discriminator is not None:
            if 'discriminator' not in payload:
                raise CheckpointError("Checkpoint has no discriminator state to resume adversarial training")
            self.discriminator.load_state_dict(payload['discriminator'])
            self.d_optimizer.load_state_dict(payload['d_optimizer'])


class SuperResolutionTrainer(Trainer):
    """Noise MSE on the high-resolution state given its own downsampled pair"""

    def __init__(self, model: SuperResolutionModel, train_cfg: TrainConfig, device='cpu'):
        super().__init__(train_cfg, model.config.high_size, device)
        self.model = model.to(self.device)
        self.sched = model.config.schedule()
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=train_cfg.lr)

    def loss(self, x0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        config = self.model.config
        cond = downsample_states(x0, config.low_size, config.image_channels)
        if cond.shape[0] != x0.shape[0]:
            raise ValueError(f"Conditioning batch {cond.shape[0]} differs from ground truth {x0.shape[0]}")
        x_t = forward_diffuse(x0, t, noise, self.sched)
        return F.mse_loss(self.model(x_t, t.to(self.device), cond), noise)

    def training_step(self, batch: torch.Tensor) -> dict:
        t = torch.randint(1, self.sched.T + 1, (batch.shape[0],), generator=self.rng)
        loss = self.loss(batch, t, self.noise_like(batch))
        self.optimize(loss)
        return {'train_mse': float(loss.detach())}

    def validation_loss(self, states: torch.Tensor) -> float:
        rng = torch.Generator().manual_seed(self.cfg.seed + 7919)
        states = states.to(self.device)
        t = torch.randint(1, self.sched.T + 1, (states.shape[0],), generator=rng)
        noise = torch.randn(states.shape, generator=rng, dtype=states.dtype).to(self.device)
        with torch.no_grad():
            return float(self.loss(states, t, noise))

    def model_payload(self) -> dict:
        return save_sr_payload(self.model)

    def restore_models(self, payload: dict) -> None:
        self.model.load_state_dict(payload['sr_model'])


def _prepare(dataset: Sequence[ImageMaskPair], train_cfg: TrainConfig):
    if not dataset:
        raise DatasetError("Cannot train on an empty dataset")
    return split_dataset(list(dataset), train_cfg.split_ratio, train_cfg.seed)


def _resume(trainer: Trainer, run_dir: Path, resume_from: Optional[CheckpointRecord]) -> list[CheckpointRecord]:
    if resume_from is None:
        return []
    trainer.restore(resume_from)
    return [r for r in load_checkpoint_records(run_dir) if r.epoch <= resume_from.epoch]


def train_paired(dataset: Sequence[ImageMaskPair], gen_cfg: PairedGeneratorConfig, train_cfg: TrainConfig,
                 disc_sched: Optional[DiscriminatorSchedule] = None, *, run_dir: Union[str, Path],
                 resume_from: Optional[CheckpointRecord] = None, config_hash: str = '',
                 on_checkpoint: Optional[Callable[[CheckpointRecord], None]] = None,
                 device='cpu') -> list[CheckpointRecord]:
    """Train a paired generator and return its checkpoint records"""
    if gen_cfg.input_size != train_cfg.train_size:
        raise ValueError(f"Generator input_size ({gen_cfg.input_size}) differs from train_size ({train_cfg.train_size})")
    if gen_cfg.num_timesteps != train_cfg.T:
        raise ValueError(f"Generator num_timesteps ({gen_cfg.num_timesteps}) differs from T ({train_cfg.T})")
    train, val = _prepare(dataset, train_cfg)
    trainer = PairedTrainer(build_generator(gen_cfg, train_cfg.seed), train_cfg, disc_sched, device)
    run_dir = Path(run_dir)
    records = _resume(trainer, run_dir, resume_from)
    return trainer.fit(train, val, run_dir, config_hash, on_checkpoint, records)


def train_sr(dataset: Sequence[ImageMaskPair], sr_cfg: SRConfig, train_cfg: TrainConfig, *,
             run_dir: Union[str, Path], resume_from: Optional[CheckpointRecord] = None, config_hash: str = '',
             on_checkpoint: Optional[Callable[[CheckpointRecord], None]] = None,
             device='cpu') -> list[CheckpointRecord]:
    """Train the super-resolution model on high-resolution pairs"""
    if train_cfg.crop_size < sr_cfg.high_size:
        raise ValueError(f"crop_size ({train_cfg.crop_size}) must be >= high_size ({sr_cfg.high_size})")
    train, val = _prepare(dataset, train_cfg)
    trainer = SuperResolutionTrainer(build_sr_model(sr_cfg, train_cfg.seed), train_cfg, device)
    run_dir = Path(run_dir)
    records = _resume(trainer, run_dir, resume_from)
    return trainer.fit(train, val, run_dir, config_hash, on_checkpoint, records)
