"""
Noise schedules, the forward corruption process and the DDPM/DDIM reverse
samplers. Nothing here knows about a particular network: samplers talk to
anything implementing ``NoisePredictor``.

Timesteps are 1-based externally (t in [1, T]) and zero-based in the
schedule arrays; alpha_bar at t = 0 is 1 by convention.
"""
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence, Union
import logging

import numpy as np
import torch

from .choices import PosteriorVariance, SamplerMode

logger = logging.getLogger(__name__)

Timestep = Union[int, torch.Tensor]

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


class NoisePredictor(Protocol):
    """Anything that predicts the noise of a diffusion state"""

    @property
    def state_shape(self) -> Sequence[int]:
        ...

    def predict_state(self, state: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        ...


@dataclass(frozen=True)
class NoiseSchedule:
    """beta_t, alpha_t and alpha_bar_t for T steps, stored in float64"""
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def alpha_bar_at(self, t: Timestep) -> torch.Tensor:
        """alpha_bar for t in [0, T] with alpha_bar_0 = 1"""
        padded = torch.cat([self.alpha_bars.new_ones(1), self.alpha_bars])
        if isinstance(t, torch.Tensor):
            return padded[t.long().cpu()]
        return padded[t]


def make_linear_schedule(T: int, beta_start: float = DEFAULT_BETA_START,
                         beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Linear beta schedule from beta_start to beta_end over T steps"""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not 0 < beta_start <= beta_end:
        raise ValueError(f"Expected 0 < beta_start <= beta_end, got {beta_start}, {beta_end}")
    if beta_end >= 1:
        raise ValueError(f"beta_end must be < 1, got {beta_end}")

    betas = torch.linspace(beta_start, beta_end, int(T), dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _check_timestep(t: Timestep, sched: NoiseSchedule, low: int = 1) -> None:
    if isinstance(t, torch.Tensor):
        if t.numel() == 0:
            raise ValueError("Empty timestep tensor")
        t_min, t_max = int(t.min()), int(t.max())
    else:
        t_min = t_max = int(t)
    if t_min < low or t_max > sched.T:
        raise ValueError(f"Timestep out of range [{low}, {sched.T}]: got [{t_min}, {t_max}]")


def _coefficient(values: torch.Tensor, t: Timestep, like: torch.Tensor) -> torch.Tensor:
    """Gather a per-timestep coefficient and broadcast it against ``like``"""
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        gathered = values[t.long().cpu()]
        shape = (gathered.shape[0],) + (1,) * (like.dim() - 1)
        return gathered.reshape(shape).to(device=like.device, dtype=like.dtype)
    return values[int(t)].to(device=like.device, dtype=like.dtype)


def _check_shapes(a: torch.Tensor, b: torch.Tensor, names: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"Shape mismatch between {names}: {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_diffuse_step(x_prev: torch.Tensor, t: Timestep, noise: torch.Tensor,
                         sched: NoiseSchedule) -> torch.Tensor:
    """One Markov step: sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps"""
    _check_shapes(x_prev, noise, "x_prev and noise")
    _check_timestep(t, sched)
    beta = _coefficient(sched.betas, _zero_based(t), x_prev)
    return torch.sqrt(1.0 - beta) * x_prev + torch.sqrt(beta) * noise


def forward_diffuse(x0: torch.Tensor, t: Timestep, noise: torch.Tensor,
                    sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form corruption: sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps"""
    _check_shapes(x0, noise, "x0 and noise")
    _check_timestep(t, sched)
    alpha_bar = _coefficient(sched.alpha_bars, _zero_based(t), x0)
    return torch.sqrt(alpha_bar) * x0 + torch.sqrt(1.0 - alpha_bar) * noise


def ddpm_reverse_step(eps_pred: torch.Tensor, x_t: torch.Tensor, t: Timestep,
                      fresh_noise: Optional[torch.Tensor], sched: NoiseSchedule,
                      variance: str = PosteriorVariance.BETA) -> torch.Tensor:
    """
    Ancestral DDPM step from x_t to x_{t-1}.

    No noise is added where t == 1, whatever ``fresh_noise`` holds.
    """
    _check_shapes(eps_pred, x_t, "eps_pred and x_t")
    _check_timestep(t, sched)
    idx = _zero_based(t)
    beta = _coefficient(sched.betas, idx, x_t)
    alpha = _coefficient(sched.alphas, idx, x_t)
    alpha_bar = _coefficient(sched.alpha_bars, idx, x_t)

    mean = (x_t - (beta / torch.sqrt(1.0 - alpha_bar)) * eps_pred) / torch.sqrt(alpha)
    if fresh_noise is None:
        return mean
    _check_shapes(fresh_noise, x_t, "fresh_noise and x_t")

    if variance == PosteriorVariance.BETA:
        sigma2 = beta
    elif variance == PosteriorVariance.POSTERIOR:
        prev_alpha_bar = _coefficient(_padded_alpha_bars(sched), idx, x_t)
        sigma2 = (1.0 - prev_alpha_bar) / (1.0 - alpha_bar) * beta
    else:
        raise ValueError(f"Unknown posterior variance {variance!r}")

    if isinstance(t, torch.Tensor) and t.dim() > 0:
        keep = (t > 1).to(device=x_t.device, dtype=x_t.dtype)
        keep = keep.reshape((-1,) + (1,) * (x_t.dim() - 1))
    else:
        keep = 1.0 if int(t) > 1 else 0.0
    return mean + keep * torch.sqrt(sigma2) * fresh_noise


def ddim_reverse_step(eps_pred: torch.Tensor, x_t: torch.Tensor, t: int, t_prev: int,
                      sched: NoiseSchedule) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM jump from t to t_prev"""
    _check_shapes(eps_pred, x_t, "eps_pred and x_t")
    _check_timestep(t, sched)
    if not 0 <= t_prev < t:
        raise ValueError(f"DDIM requires 0 <= t_prev < t, got t={t}, t_prev={t_prev}")

    alpha_bar = sched.alpha_bar_at(int(t)).to(device=x_t.device, dtype=x_t.dtype)
    prev_alpha_bar = sched.alpha_bar_at(int(t_prev)).to(device=x_t.device, dtype=x_t.dtype)
    x0_pred = (x_t - torch.sqrt(1.0 - alpha_bar) * eps_pred) / torch.sqrt(alpha_bar)
    return torch.sqrt(prev_alpha_bar) * x0_pred + torch.sqrt(1.0 - prev_alpha_bar) * eps_pred


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced descending timesteps, starting at T and ending at 1"""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if steps > T:
        raise ValueError(f"steps ({steps}) cannot exceed T ({T})")
    if steps == 1:
        return [int(T)]
    # spacing (T-1)/(steps-1) >= 1, so the floored points are distinct
    grid = 1 + (np.arange(steps, dtype=np.int64) * (T - 1)) // (steps - 1)
    return [int(v) for v in grid[::-1]]


def to_model_space(x: torch.Tensor) -> torch.Tensor:
    """[0, 1] -> [-1, 1]"""
    return x * 2.0 - 1.0


def from_model_space(x: torch.Tensor) -> torch.Tensor:
    """[-1, 1] -> [0, 1], clamped"""
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


def sample_loop(model: NoisePredictor, sched: NoiseSchedule, mode: str, steps: int, seed: int,
                batch: int, *, device: Union[str, torch.device] = 'cpu',
                dtype: Optional[torch.dtype] = None,
                variance: str = PosteriorVariance.BETA,
                callback: Optional[Callable[[int, torch.Tensor], None]] = None) -> torch.Tensor:
    """
    Run the reverse process from pure noise and return states in model space.

    All randomness comes from a generator seeded with ``seed``; ddim is fully
    deterministic after the initial draw.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if steps > sched.T:
        raise ValueError(f"steps ({steps}) cannot exceed T ({sched.T})")
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    if dtype is None:
        params = getattr(model, 'parameters', None)
        first = next(iter(params()), None) if callable(params) else None
        dtype = first.dtype if first is not None else torch.get_default_dtype()

    rng = torch.Generator(device='cpu').manual_seed(int(seed))
    shape = (batch,) + tuple(model.state_shape)
    x = torch.randn(shape, generator=rng, dtype=dtype).to(device)

    with torch.no_grad():
        if mode == SamplerMode.DDPM:
            if steps != sched.T:
                raise ValueError(f"ddpm sampling visits every timestep: steps must equal T ({sched.T})")
            for t in range(sched.T, 0, -1):
                t_batch = torch.full((batch,), t, dtype=torch.long, device=device)
                eps = model.predict_state(x, t_batch)
                noise = torch.randn(shape, generator=rng, dtype=dtype).to(device) if t > 1 else None
                x = ddpm_reverse_step(eps, x, t, noise, sched, variance=variance)
                if callback is not None:
                    callback(t, x)
        elif mode == SamplerMode.DDIM:
            timesteps = ddim_timesteps(sched.T, steps)
            for i, t in enumerate(timesteps):
                t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else 0
                t_batch = torch.full((batch,), t, dtype=torch.long, device=device)
                eps = model.predict_state(x, t_batch)
                x = ddim_reverse_step(eps, x, t, t_prev, sched)
                if callback is not None:
                    callback(t, x)
        else:
            raise ValueError(f"Unknown sampler mode {mode!r}")

    logger.debug(f"Sampled batch of {batch} with {mode} over {steps} steps (seed {seed})")
    return x


def _zero_based(t: Timestep) -> Timestep:
    if isinstance(t, torch.Tensor):
        return t.long() - 1
    return int(t) - 1


def _padded_alpha_bars(sched: NoiseSchedule) -> torch.Tensor:
    # indexed with zero-based t, this yields alpha_bar_{t-1}
    return torch.cat([sched.alpha_bars.new_ones(1), sched.alpha_bars[:-1]])
