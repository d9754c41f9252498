"""
Conditional diffusion model doubling the resolution of image-mask pairs.

The diffused state is the full (C+1)-channel high-resolution pair. The
low-resolution pair is resized to every level's spatial size and
concatenated to the features before each down-sampling and up-sampling
block; it is an input only and never predicted.
"""
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union
import logging
import time

import torch
from torch import nn
from torch.nn import functional as F

from .choices import SamplerMode, SkipFusion
from .datasets import ImageMaskPair, MASK_THRESHOLD, resize_pair
from .diffusion import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    from_model_space,
    make_linear_schedule,
    sample_loop,
    to_model_space,
)
from .generator import (
    BottleneckAttention,
    Bottleneck,
    DecoderLevel,
    EncoderLevel,
    TimeEmbedding,
    num_groups,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SRConfig:
    low_size: int = 16
    high_size: Optional[int] = None
    steps_train: int = 1000
    steps_infer: int = 100
    infer_mode: str = SamplerMode.DDIM
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    base_channels: int = 32
    depth: int = 2
    attention_heads: int = 4
    image_channels: int = 3

    def __post_init__(self):
        if self.high_size is None:
            object.__setattr__(self, 'high_size', 2 * self.low_size)
        if self.low_size < 1:
            raise ValueError(f"low_size must be positive, got {self.low_size}")
        if self.high_size != 2 * self.low_size:
            raise ValueError(f"high_size must be 2 * low_size ({2 * self.low_size}), got {self.high_size}")
        if self.infer_mode not in SamplerMode.values:
            raise ValueError(f"Unknown sampler mode {self.infer_mode!r}")
        if not 1 <= self.steps_infer <= self.steps_train:
            raise ValueError(f"steps_infer must be in [1, {self.steps_train}], got {self.steps_infer}")
        if self.high_size % (2 ** self.depth) != 0:
            raise ValueError(f"high_size {self.high_size} is not divisible by 2**depth = {2 ** self.depth}")

    @property
    def state_channels(self) -> int:
        return self.image_channels + 1

    @property
    def level_channels(self) -> list[int]:
        return [self.base_channels * 2 ** level for level in range(self.depth)]

    def schedule(self):
        return make_linear_schedule(self.steps_train, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return {key: str(value) if isinstance(value, str) else value
                for key, value in asdict(self).items()}


def upsample_pair(pair: ImageMaskPair, factor: int) -> ImageMaskPair:
    """Bilinear image, nearest-neighbour mask, both scaled by ``factor``"""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    height, width = pair.size
    return resize_pair(pair, (height * factor, width * factor))


def make_sr_condition(high_pair: ImageMaskPair, low_size: int) -> ImageMaskPair:
    """Antialiased bilinear downsample for the image, nearest for the mask"""
    image = F.interpolate(high_pair.image[None], size=(low_size, low_size), mode='bilinear',
                          align_corners=False, antialias=True)[0]
    mask = F.interpolate(high_pair.mask[None], size=(low_size, low_size), mode='nearest')[0]
    return ImageMaskPair(image=image.clamp(0.0, 1.0), mask=mask, id=high_pair.id)


def downsample_states(states: torch.Tensor, low_size: int, image_channels: int) -> torch.Tensor:
    """Batched make_sr_condition on stacked model-space states"""
    image = F.interpolate(states[:, :image_channels], size=(low_size, low_size), mode='bilinear',
                          align_corners=False, antialias=True)
    mask = F.interpolate(states[:, image_channels:], size=(low_size, low_size), mode='nearest')
    return torch.cat([image.clamp(-1.0, 1.0), mask], dim=1)


def resize_condition(cond: torch.Tensor, size: Sequence[int], image_channels: int) -> torch.Tensor:
    if tuple(cond.shape[-2:]) == tuple(size):
        return cond
    image = F.interpolate(cond[:, :image_channels], size=tuple(size), mode='bilinear', align_corners=False)
    mask = F.interpolate(cond[:, image_channels:], size=tuple(size), mode='nearest')
    return torch.cat([image, mask], dim=1)


class SuperResolutionModel(nn.Module):
    """U-Net over the high-resolution state, conditioned at every level"""

    def __init__(self, config: SRConfig):
        super().__init__()
        self.config = config
        levels = config.level_channels
        time_dim = config.base_channels * 4
        cond = config.state_channels
        mid = levels[-1]

        self.time_embedding = TimeEmbedding(config.base_channels, time_dim)
        self.stem = nn.Conv2d(config.state_channels, levels[0], kernel_size=3, padding=1)
        self.encoder = nn.ModuleList()
        channels_in = levels[0]
        for channels in levels:
            self.encoder.append(EncoderLevel(channels_in, channels, time_dim, cond_channels=cond))
            channels_in = channels
        self.bottleneck = Bottleneck(mid, mid, time_dim)
        self.bottleneck_attention = BottleneckAttention(mid, config.attention_heads, cross=False)
        self.decoder = nn.ModuleList()
        channels_in = mid
        for channels in reversed(levels):
            self.decoder.append(DecoderLevel(channels_in, channels, time_dim, SkipFusion.DIRECT,
                                             num_skips=1, cond_channels=cond))
            channels_in = channels
        self.head = nn.Sequential(
            nn.GroupNorm(num_groups(channels_in), channels_in),
            nn.SiLU(),
            nn.Conv2d(channels_in, config.state_channels, kernel_size=3, padding=1),
        )

    @property
    def state_shape(self) -> tuple[int, int, int]:
        return (self.config.state_channels, self.config.high_size, self.config.high_size)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        self._check_inputs(x_t, t, cond)
        channels = self.config.image_channels
        temb = self.time_embedding(t)

        h = self.stem(x_t)
        skips = []
        for level in self.encoder:
            skip, h = level(h, temb, resize_condition(cond, h.shape[-2:], channels))
            skips.append(skip)
        h = self.bottleneck.block_1(h, temb)
        h = self.bottleneck_attention(h)
        h = self.bottleneck.block_2(h, temb)
        for level, skip in zip(self.decoder, reversed(skips)):
            up = level.upsample(h)
            h = level(up, [skip], temb, resize_condition(cond, up.shape[-2:], channels))
        return self.head(h)

    def _check_inputs(self, x_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> None:
        if tuple(x_t.shape[1:]) != self.state_shape:
            raise ValueError(f"Expected state of shape (B, {self.state_shape}), got {tuple(x_t.shape)}")
        if cond.dim() != 4 or cond.shape[0] != x_t.shape[0] or cond.shape[1] != self.config.state_channels:
            raise ValueError(
                f"Conditioning {tuple(cond.shape)} does not match state {tuple(x_t.shape)}"
            )
        if t.dim() != 1 or t.shape[0] != x_t.shape[0]:
            raise ValueError(f"Expected one timestep per batch element, got shape {tuple(t.shape)}")
        if int(t.min()) < 1 or int(t.max()) > self.config.steps_train:
            raise ValueError(f"Timestep out of range [1, {self.config.steps_train}]")


def build_sr_model(config: SRConfig, seed: int) -> SuperResolutionModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SuperResolutionModel(config)
    n_params = sum(p.numel() for p in model.parameters())
    logger.info(f"Built super-resolution model {config.low_size}->{config.high_size} with {n_params} parameters")
    return model


def condition_tensor(lowres: Union[ImageMaskPair, Sequence[ImageMaskPair], torch.Tensor]) -> torch.Tensor:
    """Model-space (B, C+1, h, w) conditioning from pairs; tensors pass through"""
    if isinstance(lowres, torch.Tensor):
        return lowres
    if isinstance(lowres, ImageMaskPair):
        lowres = [lowres]
    if not lowres:
        raise ValueError("No low-resolution pairs given")
    return to_model_space(torch.stack([pair.stacked() for pair in lowres]))


def sr_forward(model: SuperResolutionModel, x_t_high: torch.Tensor, t: torch.Tensor,
               lowres_pair: Union[ImageMaskPair, Sequence[ImageMaskPair], torch.Tensor]) -> torch.Tensor:
    """Noise prediction on the high-resolution state given the low-resolution pair(s)"""
    cond = condition_tensor(lowres_pair).to(device=x_t_high.device, dtype=x_t_high.dtype)
    if cond.shape[0] == 1 and x_t_high.shape[0] > 1:
        cond = cond.expand(x_t_high.shape[0], -1, -1, -1)
    return model(x_t_high, t, cond)


class ConditionedPredictor:
    """Closes the SR model over a fixed conditioning batch for sample_loop"""

    def __init__(self, model: SuperResolutionModel, cond: torch.Tensor):
        self.model = model
        self.cond = cond

    @property
    def state_shape(self):
        return self.model.state_shape

    def parameters(self):
        return self.model.parameters()

    def predict_state(self, state: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return sr_forward(self.model, state, t, self.cond)


def _finish(states: torch.Tensor, image_channels: int, ids: Sequence[str]) -> list[ImageMaskPair]:
    values = from_model_space(states).cpu()
    return [
        ImageMaskPair(
            image=values[i, :image_channels],
            mask=(values[i, image_channels:] >= MASK_THRESHOLD).to(values.dtype),
            id=ids[i],
        )
        for i in range(values.shape[0])
    ]


def super_resolve(model: Optional[SuperResolutionModel],
                  lowres_pairs: Union[ImageMaskPair, Sequence[ImageMaskPair]], cfg: SRConfig, seed: int,
                  *, mode: Optional[str] = None, steps: Optional[int] = None, batch_size: int = 16,
                  device='cpu') -> Union[ImageMaskPair, list[ImageMaskPair]]:
    """
    Sample high-resolution pairs conditioned on ``lowres_pairs``.

    Images are clamped to [0, 1] and masks binarized at 0.5. A single pair
    in gives a single pair out. Chunk i of ``batch_size`` pairs uses seed
    ``seed + i``.
    """
    if model is None:
        raise ValueError("No trained super-resolution model given")
    single = isinstance(lowres_pairs, ImageMaskPair)
    pairs = [lowres_pairs] if single else list(lowres_pairs)
    if not pairs:
        return []
    for pair in pairs:
        if pair.size != (cfg.low_size, cfg.low_size):
            raise ValueError(f"Pair {pair.id!r} is {pair.size}, expected {cfg.low_size}x{cfg.low_size}")

    mode = mode or cfg.infer_mode
    if steps is None:
        steps = cfg.steps_train if mode == SamplerMode.DDPM else cfg.steps_infer
    sched = cfg.schedule()
    model.eval()
    dtype = next(model.parameters()).dtype

    results = []
    for i, start in enumerate(range(0, len(pairs), batch_size)):
        chunk = pairs[start:start + batch_size]
        cond = condition_tensor(chunk).to(device=device, dtype=dtype)
        states = sample_loop(ConditionedPredictor(model, cond), sched, mode, steps, seed + i,
                             len(chunk), device=device, dtype=dtype)
        results.extend(_finish(states, cfg.image_channels, [pair.id for pair in chunk]))
    return results[0] if single else results


@dataclass
class BenchmarkResult:
    mode: str
    steps: int
    seconds: float
    pairs: list

    @property
    def seconds_per_step(self) -> float:
        return self.seconds / self.steps


def benchmark_super_resolution(model: SuperResolutionModel, pairs: Sequence[ImageMaskPair], cfg: SRConfig,
                               step_counts: Sequence[int] = (1000, 500, 250, 100),
                               modes: Sequence[str] = (SamplerMode.DDPM, SamplerMode.DDIM),
                               seed: int = 0, device='cpu') -> list[BenchmarkResult]:
    """Wall-clock time and outputs per (mode, steps); ddpm only runs at steps == T"""
    results = []
    for mode in modes:
        for steps in step_counts:
            if steps > cfg.steps_train:
                logger.warning(f"Skipping {mode} at {steps} steps: exceeds T = {cfg.steps_train}")
                continue
            if mode == SamplerMode.DDPM and steps != cfg.steps_train:
                logger.info(f"Skipping ddpm at {steps} steps: ddpm visits all {cfg.steps_train} timesteps")
                continue
            started = time.perf_counter()
            outputs = super_resolve(model, list(pairs), cfg, seed, mode=mode, steps=steps,
                                    batch_size=max(1, len(pairs)), device=device)
            elapsed = time.perf_counter() - started
            logger.info(f"Super-resolved {len(pairs)} pairs with {mode}/{steps} in {elapsed:.2f}s")
            results.append(BenchmarkResult(mode=str(mode), steps=steps, seconds=elapsed, pairs=outputs))
    return results


def save_sr_payload(model: SuperResolutionModel) -> dict:
    return {'sr_config': model.config.to_dict(), 'sr_model': model.state_dict()}


def sr_model_from_payload(payload: dict) -> SuperResolutionModel:
    try:
        config = SRConfig(**payload['sr_config'])
    except (KeyError, TypeError) as e:
        raise ValueError(f"Payload carries no usable super-resolution config: {e}") from e
    model = SuperResolutionModel(config)
    model.load_state_dict(payload['sr_model'])
    return model.eval()
