"""
Time-conditioned discriminator, the t_max ramp, priority timestep sampling
and the adversarial losses.
"""
from dataclasses import asdict, dataclass
from typing import Optional
import logging
import math

import torch
from torch import nn
from torch.nn import functional as F

from .generator import TimeEmbedding, num_groups

logger = logging.getLogger(__name__)

ADVERSARIAL_WEIGHT = 0.25


@dataclass(frozen=True)
class DiscriminatorSchedule:
    """Parameters of t_max = min(T, sigma * (s / alpha) + i0), s counted in epochs"""
    T: int = 1000
    sigma: float = 20.0
    alpha_epochs: float = 10.0
    i0: int = 20
    priority_until_epoch: int = 500
    ramp: bool = True

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be positive, got {self.T}")
        if self.sigma <= 0 or self.alpha_epochs <= 0:
            raise ValueError(f"sigma and alpha_epochs must be positive, got {self.sigma}, {self.alpha_epochs}")
        if self.i0 < 1:
            raise ValueError(f"i0 must be >= 1, got {self.i0}")
        if self.priority_until_epoch < 0:
            raise ValueError(f"priority_until_epoch must be >= 0, got {self.priority_until_epoch}")

    def to_dict(self) -> dict:
        return asdict(self)


def t_max(s: float, sched: DiscriminatorSchedule) -> int:
    """Largest timestep available at epoch ``s``"""
    if s < 0:
        raise ValueError(f"s must be >= 0, got {s}")
    if not sched.ramp:
        return sched.T
    return int(min(sched.T, math.floor(sched.sigma * (s / sched.alpha_epochs) + sched.i0)))


def sample_timesteps(batch: int, epoch: int, sched: DiscriminatorSchedule,
                     rng: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    Draw timesteps in [1, t_max(epoch)].

    Before ``priority_until_epoch`` half the batch (rounded up) comes from the
    top quarter [ceil(0.75 t_max), t_max], the rest is uniform.
    """
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    upper = t_max(epoch, sched)
    if epoch >= sched.priority_until_epoch:
        return torch.randint(1, upper + 1, (batch,), generator=rng)

    n_priority = math.ceil(batch / 2)
    low = max(1, math.ceil(0.75 * upper))
    priority = torch.randint(low, upper + 1, (n_priority,), generator=rng)
    uniform = torch.randint(1, upper + 1, (batch - n_priority,), generator=rng)
    stacked = torch.cat([priority, uniform])
    return stacked[torch.randperm(batch, generator=rng)]


class Discriminator(nn.Module):
    """
    Strided conv stack down to 4x4 with the timestep embedding added per
    block, then global average pooling and a linear head.
    """

    def __init__(self, in_channels: int, input_size: int, base_channels: int = 32,
                 max_channels: int = 256):
        super().__init__()
        if input_size < 4 or input_size & (input_size - 1):
            raise ValueError(f"input_size must be a power of two >= 4, got {input_size}")
        time_dim = base_channels * 4
        self.time_embedding = TimeEmbedding(base_channels, time_dim)
        self.stem = nn.Conv2d(in_channels, base_channels, kernel_size=3, padding=1)

        self.blocks = nn.ModuleList()
        self.time_projs = nn.ModuleList()
        self.norms = nn.ModuleList()
        channels, size = base_channels, input_size
        while size > 4:
            out_channels = min(channels * 2, max_channels)
            self.blocks.append(nn.Conv2d(channels, out_channels, kernel_size=4, stride=2, padding=1))
            self.time_projs.append(nn.Linear(time_dim, out_channels))
            self.norms.append(nn.GroupNorm(num_groups(out_channels), out_channels))
            channels, size = out_channels, size // 2
        self.head = nn.Linear(channels, 1)

    def logits(self, pair: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        temb = F.silu(self.time_embedding(t))
        h = F.leaky_relu(self.stem(pair), 0.2)
        for block, proj, norm in zip(self.blocks, self.time_projs, self.norms):
            h = block(h) + proj(temb)[:, :, None, None]
            h = F.leaky_relu(norm(h), 0.2)
        return self.head(h.mean(dim=(2, 3))).squeeze(1)

    def forward(self, pair: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Probability that ``pair`` is real, strictly inside (0, 1)"""
        eps = torch.finfo(pair.dtype).eps
        return torch.sigmoid(self.logits(pair, t)).clamp(eps, 1.0 - eps)


def _check_batches(real: Optional[torch.Tensor], fake: torch.Tensor, t: torch.Tensor) -> None:
    if real is not None:
        if real.shape[0] == 0:
            raise ValueError("Real batch is empty")
        if real.shape != fake.shape:
            raise ValueError(f"Real and fake batches differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
    if fake.shape[0] == 0:
        raise ValueError("Fake batch is empty")
    if t.dim() != 1 or t.shape[0] != fake.shape[0]:
        raise ValueError(f"Timestep mismatch: {tuple(t.shape)} timesteps for {fake.shape[0]} pairs")


def discriminator_loss(disc: Discriminator, real_pair: torch.Tensor, fake_pair: torch.Tensor,
                       t: torch.Tensor) -> torch.Tensor:
    """BCE with real -> 1 and fake -> 0; fakes are detached from the generator"""
    _check_batches(real_pair, fake_pair, t)
    real_logits = disc.logits(real_pair, t)
    fake_logits = disc.logits(fake_pair.detach(), t)
    logits = torch.cat([real_logits, fake_logits])
    targets = torch.cat([torch.ones_like(real_logits), torch.zeros_like(fake_logits)])
    return F.binary_cross_entropy_with_logits(logits, targets)


def discriminator_step(disc: Discriminator, optimizer: torch.optim.Optimizer,
                       real_pair: torch.Tensor, fake_pair: torch.Tensor, t: torch.Tensor) -> float:
    """One optimizer update of the discriminator; returns loss_d"""
    optimizer.zero_grad(set_to_none=True)
    loss = discriminator_loss(disc, real_pair, fake_pair, t)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def generator_adversarial_loss(disc: Discriminator, fake_pair: torch.Tensor,
                               t: torch.Tensor) -> torch.Tensor:
    """Non-saturating loss: BCE of the frozen discriminator on fakes against 1"""
    _check_batches(None, fake_pair, t)
    flags = [p.requires_grad for p in disc.parameters()]
    disc.requires_grad_(False)
    try:
        logits = disc.logits(fake_pair, t)
    finally:
        for param, flag in zip(disc.parameters(), flags):
            param.requires_grad_(flag)
    return F.binary_cross_entropy_with_logits(logits, torch.ones_like(logits))


def combine_generator_loss(mse: torch.Tensor, adversarial: torch.Tensor,
                           weight: float = ADVERSARIAL_WEIGHT) -> torch.Tensor:
    return mse + weight * adversarial
