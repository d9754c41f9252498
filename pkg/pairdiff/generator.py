"""
Dual-diffusion networks predicting the noise added to an image-mask pair.

Three variants share the same building blocks:

* ``concat`` - one U-Net over the channel-stacked pair.
* ``two_encoder`` - an image U-Net and a mask U-Net exchanging same-level
  features after every down- and up-sampling block, with self- and
  cross-attention in the bottleneck.
* ``shared_encoder`` - one encoder/bottleneck applied to image and mask
  independently, followed by two decoders exchanging same-level features.
"""
from dataclasses import asdict, dataclass
from typing import Optional, Sequence
import logging
import math

import torch
from torch import nn
from torch.nn import functional as F

from .choices import SkipFusion, Variant
from .datasets import GeneratedBatch
from .diffusion import from_model_space, sample_loop

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PairedGeneratorConfig:
    variant: str = Variant.TWO_ENCODER
    skip_fusion: str = SkipFusion.SCALE_U
    base_channels: int = 32
    depth: int = 3
    attention_heads: int = 4
    image_channels: int = 3
    mask_channels: int = 1
    input_size: int = 128
    num_timesteps: int = 1000

    def __post_init__(self):
        if self.variant not in Variant.values:
            raise ValueError(f"Unknown generator variant {self.variant!r}")
        if self.skip_fusion not in SkipFusion.values:
            raise ValueError(f"Unknown skip fusion {self.skip_fusion!r}")
        for name in ('base_channels', 'depth', 'attention_heads', 'image_channels',
                     'input_size', 'num_timesteps'):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.mask_channels != 1:
            raise ValueError(f"mask_channels must be 1, got {self.mask_channels}")
        if self.input_size % (2 ** self.depth) != 0:
            raise ValueError(
                f"input_size {self.input_size} is not divisible by 2**depth = {2 ** self.depth}"
            )

    @property
    def level_channels(self) -> list[int]:
        return [self.base_channels * 2 ** level for level in range(self.depth)]

    @property
    def time_dim(self) -> int:
        return self.base_channels * 4

    def to_dict(self) -> dict:
        return {key: str(value) if isinstance(value, str) else value
                for key, value in asdict(self).items()}


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)"""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64, device=t.device) / half
    )
    args = t.to(torch.float64)[:, None] * freqs[None]
    embedding = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        embedding = F.pad(embedding, (0, 1))
    return embedding


def num_groups(channels: int) -> int:
    """Group count for GroupNorm: at most 32 groups, dividing channels"""
    return math.gcd(channels, 32)


class TimeEmbedding(nn.Module):
    def __init__(self, channels: int, time_dim: int):
        super().__init__()
        self.channels = channels
        self.linear_1 = nn.Linear(channels, time_dim)
        self.linear_2 = nn.Linear(time_dim, time_dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        emb = timestep_embedding(t, self.channels).to(self.linear_1.weight.dtype)
        return self.linear_2(F.silu(self.linear_1(emb)))


class ResidualBlock(nn.Module):
    """GroupNorm/SiLU/conv block with the time embedding added in the middle"""

    def __init__(self, in_channels: int, out_channels: int, time_dim: int):
        super().__init__()
        self.norm_1 = nn.GroupNorm(num_groups(in_channels), in_channels)
        self.conv_1 = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm_2 = nn.GroupNorm(num_groups(out_channels), out_channels)
        self.conv_2 = nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1)
        if in_channels == out_channels:
            self.residual = nn.Identity()
        else:
            self.residual = nn.Conv2d(in_channels, out_channels, kernel_size=1)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv_1(F.silu(self.norm_1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv_2(F.silu(self.norm_2(h)))
        return h + self.residual(x)


class SkipFusionBlock(nn.Module):
    """
    Merge a backbone tensor with any number of skip tensors.

    direct: channel concatenation.
    zero_conv: every skip goes through a zero-initialized 1x1 convolution.
    scale_u: backbone scaled by (1 + s_b), skip i by (1 + s_i); all s start at 0.
    """

    def __init__(self, backbone_channels: int, skip_channels: Sequence[int], mode: str):
        super().__init__()
        if mode not in SkipFusion.values:
            raise ValueError(f"Unknown skip fusion {mode!r}")
        self.mode = mode
        self.backbone_channels = backbone_channels
        self.skip_channels = list(skip_channels)

        if mode == SkipFusion.ZERO_CONV:
            self.zero_convs = nn.ModuleList()
            for channels in self.skip_channels:
                conv = nn.Conv2d(channels, channels, kernel_size=1)
                nn.init.zeros_(conv.weight)
                nn.init.zeros_(conv.bias)
                self.zero_convs.append(conv)
        elif mode == SkipFusion.SCALE_U:
            self.backbone_scales = nn.Parameter(torch.zeros(backbone_channels))
            self.skip_scales = nn.ParameterList(
                [nn.Parameter(torch.zeros(channels)) for channels in self.skip_channels]
            )

    @property
    def out_channels(self) -> int:
        return self.backbone_channels + sum(self.skip_channels)

    def forward(self, backbone: torch.Tensor, skips: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(skips) != len(self.skip_channels):
            raise ValueError(f"Expected {len(self.skip_channels)} skips, got {len(skips)}")
        for skip in skips:
            if skip.shape[-2:] != backbone.shape[-2:]:
                raise ValueError(
                    f"Spatial mismatch: backbone {tuple(backbone.shape[-2:])}, skip {tuple(skip.shape[-2:])}"
                )

        if self.mode == SkipFusion.DIRECT:
            return torch.cat([backbone, *skips], dim=1)
        if self.mode == SkipFusion.ZERO_CONV:
            return torch.cat([backbone] + [conv(skip) for conv, skip in zip(self.zero_convs, skips)], dim=1)

        scaled = [backbone * (1.0 + self.backbone_scales)[None, :, None, None]]
        for scales, skip in zip(self.skip_scales, skips):
            scaled.append(skip * (1.0 + scales)[None, :, None, None])
        return torch.cat(scaled, dim=1)


def to_tokens(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C)"""
    return x.flatten(2).transpose(1, 2)


def from_tokens(tokens: torch.Tensor, height: int, width: int) -> torch.Tensor:
    return tokens.transpose(1, 2).reshape(tokens.shape[0], -1, height, width)


class AttentionBlock(nn.Module):
    """Pre-norm multi-head attention with a residual connection around it"""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads != 0:
            raise ValueError(f"{channels} channels cannot be split into {heads} heads")
        self.norm_q = nn.LayerNorm(channels)
        self.norm_kv = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        q = self.norm_q(query)
        kv = self.norm_kv(context)
        out, _ = self.attn(q, kv, kv, need_weights=False)
        return query + out

    def attention_weights(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        """Per-head attention weights, shape (B, heads, L_query, L_context)"""
        q = self.norm_q(query)
        kv = self.norm_kv(context)
        _, weights = self.attn(q, kv, kv, need_weights=True, average_attn_weights=False)
        return weights


class BottleneckAttention(nn.Module):
    """
    Self-attention over each branch, then (when ``cross``) cross-attention
    with queries from one branch and keys/values from the other. Weights are
    shared by both branches.
    """

    def __init__(self, channels: int, heads: int, cross: bool):
        super().__init__()
        self.self_attention = AttentionBlock(channels, heads)
        self.cross_attention = AttentionBlock(channels, heads) if cross else None

    def forward(self, x_l: torch.Tensor, y_l: Optional[torch.Tensor] = None):
        height, width = x_l.shape[-2:]
        x_tokens = to_tokens(x_l)
        x_tokens = self.self_attention(x_tokens, x_tokens)
        if y_l is None:
            return from_tokens(x_tokens, height, width)
        if y_l.shape != x_l.shape:
            raise ValueError(f"Bottleneck shapes differ: {tuple(x_l.shape)} vs {tuple(y_l.shape)}")

        y_tokens = to_tokens(y_l)
        y_tokens = self.self_attention(y_tokens, y_tokens)
        if self.cross_attention is not None:
            x_tokens, y_tokens = (
                self.cross_attention(x_tokens, y_tokens),
                self.cross_attention(y_tokens, x_tokens),
            )
        return from_tokens(x_tokens, height, width), from_tokens(y_tokens, height, width)


class EncoderLevel(nn.Module):
    def __init__(self, in_channels: int, channels: int, time_dim: int, cond_channels: int = 0):
        super().__init__()
        self.blocks = nn.ModuleList([
            ResidualBlock(in_channels + cond_channels, channels, time_dim),
            ResidualBlock(channels, channels, time_dim),
        ])
        self.downsample = nn.Conv2d(channels, channels, kernel_size=3, stride=2, padding=1)

    def forward(self, h: torch.Tensor, temb: torch.Tensor,
                cond: Optional[torch.Tensor] = None) -> tuple[torch.Tensor, torch.Tensor]:
        if cond is not None:
            h = torch.cat([h, cond], dim=1)
        for block in self.blocks:
            h = block(h, temb)
        return h, self.downsample(h)


class Encoder(nn.Module):
    def __init__(self, in_channels: int, level_channels: Sequence[int], time_dim: int,
                 cross_fusion: Optional[str] = None, cond_channels: int = 0):
        super().__init__()
        self.stem = nn.Conv2d(in_channels, level_channels[0], kernel_size=3, padding=1)
        self.levels = nn.ModuleList()
        cross = []
        channels_in = level_channels[0]
        for channels in level_channels:
            self.levels.append(EncoderLevel(channels_in, channels, time_dim, cond_channels))
            if cross_fusion is not None:
                fusion = SkipFusionBlock(channels, [channels], cross_fusion)
                cross.append(fusion)
                channels_in = fusion.out_channels
            else:
                channels_in = channels
        self.cross = nn.ModuleList(cross) if cross_fusion is not None else None
        self.out_channels = channels_in


class Bottleneck(nn.Module):
    def __init__(self, in_channels: int, channels: int, time_dim: int):
        super().__init__()
        self.block_1 = ResidualBlock(in_channels, channels, time_dim)
        self.block_2 = ResidualBlock(channels, channels, time_dim)


class DecoderLevel(nn.Module):
    def __init__(self, in_channels: int, channels: int, time_dim: int, fusion_mode: str,
                 num_skips: int, cond_channels: int = 0):
        super().__init__()
        self.upsample = nn.Sequential(
            nn.Upsample(scale_factor=2, mode='nearest'),
            nn.Conv2d(in_channels, channels, kernel_size=3, padding=1),
        )
        self.fusion = SkipFusionBlock(channels, [channels] * num_skips, fusion_mode)
        self.blocks = nn.ModuleList([
            ResidualBlock(self.fusion.out_channels + cond_channels, channels, time_dim),
            ResidualBlock(channels, channels, time_dim),
        ])

    def forward(self, up: torch.Tensor, skips: Sequence[torch.Tensor], temb: torch.Tensor,
                cond: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.fusion(up, skips)
        if cond is not None:
            h = torch.cat([h, cond], dim=1)
        for block in self.blocks:
            h = block(h, temb)
        return h


class Decoder(nn.Module):
    def __init__(self, in_channels: int, level_channels: Sequence[int], time_dim: int,
                 out_channels: int, fusion_mode: str, cross: bool, cond_channels: int = 0):
        super().__init__()
        self.levels = nn.ModuleList()
        channels_in = in_channels
        for channels in reversed(level_channels):
            self.levels.append(DecoderLevel(
                channels_in, channels, time_dim, fusion_mode,
                num_skips=2 if cross else 1, cond_channels=cond_channels,
            ))
            channels_in = channels
        self.head = nn.Sequential(
            nn.GroupNorm(num_groups(channels_in), channels_in),
            nn.SiLU(),
            nn.Conv2d(channels_in, out_channels, kernel_size=3, padding=1),
        )


class UNetBranch(nn.Module):
    """One full U-Net (encoder, bottleneck, decoder) of the TwoEncoder variant"""

    def __init__(self, in_channels: int, out_channels: int, config: PairedGeneratorConfig):
        super().__init__()
        levels = config.level_channels
        self.encoder = Encoder(in_channels, levels, config.time_dim, cross_fusion=config.skip_fusion)
        self.bottleneck = Bottleneck(self.encoder.out_channels, levels[-1], config.time_dim)
        self.decoder = Decoder(levels[-1], levels, config.time_dim, out_channels,
                               config.skip_fusion, cross=True)


class PairedGenerator(nn.Module):
    """Noise predictor for image-mask pairs"""

    def __init__(self, config: PairedGeneratorConfig):
        super().__init__()
        self.config = config
        self.cross_links_enabled = True

        levels = config.level_channels
        time_dim = config.time_dim
        image_channels = config.image_channels
        mid = levels[-1]

        self.time_embedding = TimeEmbedding(config.base_channels, time_dim)

        if config.variant == Variant.CONCAT:
            stacked = image_channels + config.mask_channels
            self.encoder = Encoder(stacked, levels, time_dim)
            self.bottleneck = Bottleneck(self.encoder.out_channels, mid, time_dim)
            self.bottleneck_attention = BottleneckAttention(mid, config.attention_heads, cross=False)
            self.decoder = Decoder(mid, levels, time_dim, stacked, SkipFusion.DIRECT, cross=False)
        elif config.variant == Variant.TWO_ENCODER:
            self.image_branch = UNetBranch(image_channels, image_channels, config)
            self.mask_branch = UNetBranch(config.mask_channels, config.mask_channels, config)
            self.bottleneck_attention = BottleneckAttention(mid, config.attention_heads, cross=True)
        else:
            # masks get a learned lift to the image channel count before the shared encoder
            self.mask_lift = nn.Conv2d(config.mask_channels, image_channels, kernel_size=1)
            self.encoder = Encoder(image_channels, levels, time_dim)
            self.bottleneck = Bottleneck(self.encoder.out_channels, mid, time_dim)
            self.bottleneck_attention = BottleneckAttention(mid, config.attention_heads, cross=True)
            self.image_decoder = Decoder(mid, levels, time_dim, image_channels,
                                         config.skip_fusion, cross=True)
            self.mask_decoder = Decoder(mid, levels, time_dim, config.mask_channels,
                                        config.skip_fusion, cross=True)

    @property
    def state_shape(self) -> tuple[int, int, int]:
        size = self.config.input_size
        return (self.config.image_channels + self.config.mask_channels, size, size)

    def forward(self, x_t: torch.Tensor, y_t: torch.Tensor,
                t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self._check_inputs(x_t, y_t, t)
        temb = self.time_embedding(t)
        variant = self.config.variant

        if variant == Variant.CONCAT:
            state = torch.cat([x_t, y_t], dim=1)
            hs, skips = self._encode([self.encoder], [state], temb, linked=False)
            h = self.bottleneck.block_1(hs[0], temb)
            h = self.bottleneck_attention(h)
            h = self.bottleneck.block_2(h, temb)
            out = self._decode([self.decoder], [h], skips, temb, linked=False)[0]
            return out[:, :self.config.image_channels], out[:, self.config.image_channels:]

        if variant == Variant.TWO_ENCODER:
            branches = [self.image_branch, self.mask_branch]
            hs, skips = self._encode([b.encoder for b in branches], [x_t, y_t], temb, linked=True)
            hx = self.image_branch.bottleneck.block_1(hs[0], temb)
            hy = self.mask_branch.bottleneck.block_1(hs[1], temb)
            hx, hy = self.bottleneck_attention(hx, hy)
            hx = self.image_branch.bottleneck.block_2(hx, temb)
            hy = self.mask_branch.bottleneck.block_2(hy, temb)
            eps_x, eps_y = self._decode([b.decoder for b in branches], [hx, hy], skips, temb, linked=True)
            return eps_x, eps_y

        # x and y pass independently through the shared encoder: x_l = E(x), y_l = E(y)
        hs, skips = self._encode([self.encoder, self.encoder], [x_t, self.mask_lift(y_t)],
                                 temb, linked=False)
        hx, hy = (self.bottleneck.block_1(h, temb) for h in hs)
        hx, hy = self.bottleneck_attention(hx, hy)
        mids = [self.bottleneck.block_2(hx, temb), self.bottleneck.block_2(hy, temb)]
        eps_x, eps_y = self._decode([self.image_decoder, self.mask_decoder], mids, skips, temb, linked=True)
        return eps_x, eps_y

    def predict_state(self, state: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Noise prediction on the stacked (C+1)-channel state"""
        channels = self.config.image_channels
        eps_x, eps_y = self(state[:, :channels], state[:, channels:], t)
        return torch.cat([eps_x, eps_y], dim=1)

    def _link(self, h: torch.Tensor) -> torch.Tensor:
        return h if self.cross_links_enabled else torch.zeros_like(h)

    def _encode(self, encoders, inputs, temb, linked: bool):
        hs = [encoder.stem(x) for encoder, x in zip(encoders, inputs)]
        skips = [[] for _ in encoders]
        for level in range(self.config.depth):
            downs = []
            for i, (encoder, h) in enumerate(zip(encoders, hs)):
                skip, down = encoder.levels[level](h, temb)
                skips[i].append(skip)
                downs.append(down)
            if linked:
                hs = [
                    encoders[0].cross[level](downs[0], [self._link(downs[1])]),
                    encoders[1].cross[level](downs[1], [self._link(downs[0])]),
                ]
            else:
                hs = downs
        return hs, skips

    def _decode(self, decoders, hs, skips, temb, linked: bool):
        depth = self.config.depth
        for j in range(depth):
            ups = [decoder.levels[j].upsample(h) for decoder, h in zip(decoders, hs)]
            new_hs = []
            for i, decoder in enumerate(decoders):
                level_skips = [skips[i][depth - 1 - j]]
                if linked:
                    level_skips.append(self._link(ups[1 - i]))
                new_hs.append(decoder.levels[j](ups[i], level_skips, temb))
            hs = new_hs
        return [decoder.head(h) for decoder, h in zip(decoders, hs)]

    def _check_inputs(self, x_t: torch.Tensor, y_t: torch.Tensor, t: torch.Tensor) -> None:
        if x_t.dim() != 4 or y_t.dim() != 4:
            raise ValueError(f"Expected 4D tensors, got {tuple(x_t.shape)} and {tuple(y_t.shape)}")
        if x_t.shape[-2:] != y_t.shape[-2:] or x_t.shape[0] != y_t.shape[0]:
            raise ValueError(f"Image and mask shapes differ: {tuple(x_t.shape)} vs {tuple(y_t.shape)}")
        if x_t.shape[1] != self.config.image_channels or y_t.shape[1] != self.config.mask_channels:
            raise ValueError(
                f"Expected {self.config.image_channels} image and {self.config.mask_channels} mask channels, "
                f"got {x_t.shape[1]} and {y_t.shape[1]}"
            )
        if t.dim() != 1 or t.shape[0] != x_t.shape[0]:
            raise ValueError(f"Expected one timestep per batch element, got shape {tuple(t.shape)}")
        if int(t.min()) < 1 or int(t.max()) > self.config.num_timesteps:
            raise ValueError(
                f"Timestep out of range [1, {self.config.num_timesteps}]: got [{int(t.min())}, {int(t.max())}]"
            )


def predict_noise(generator: PairedGenerator, x_t: torch.Tensor, y_t: torch.Tensor,
                  t) -> tuple[torch.Tensor, torch.Tensor]:
    """(eps_x, eps_y) for a batch; an int ``t`` applies to every element"""
    if not isinstance(t, torch.Tensor):
        t = torch.full((x_t.shape[0],), int(t), dtype=torch.long, device=x_t.device)
    return generator(x_t, y_t, t)


def fuse_skip(backbone: torch.Tensor, skips: Sequence[torch.Tensor], fusion: SkipFusionBlock) -> torch.Tensor:
    return fusion(backbone, skips)


def cross_attention(x_l: torch.Tensor, y_l: torch.Tensor,
                    attention: BottleneckAttention) -> tuple[torch.Tensor, torch.Tensor]:
    """Self- then cross-attention between two bottleneck feature maps"""
    if attention.cross_attention is None:
        raise ValueError("Attention block was built without cross-attention")
    return attention(x_l, y_l)


def build_generator(config: PairedGeneratorConfig, seed: int) -> PairedGenerator:
    """Build a generator with parameters initialized from ``seed`` only"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        generator = PairedGenerator(config)
    n_params = sum(p.numel() for p in generator.parameters())
    logger.info(f"Built {config.variant} generator ({config.skip_fusion}) with {n_params} parameters")
    return generator


def save_generator_payload(generator: PairedGenerator) -> dict:
    """Weights plus the config needed to rebuild the network"""
    return {
        'generator_config': generator.config.to_dict(),
        'generator': generator.state_dict(),
    }


def generator_from_payload(payload: dict) -> PairedGenerator:
    try:
        config = PairedGeneratorConfig(**payload['generator_config'])
    except (KeyError, TypeError) as e:
        raise ValueError(f"Payload carries no usable generator config: {e}") from e
    generator = PairedGenerator(config)
    generator.load_state_dict(payload['generator'])
    return generator.eval()


def sample_pairs(generator: PairedGenerator, n: int, sched, mode: str, steps: int, seed: int,
                 batch_size: int = 16, device='cpu', variance: Optional[str] = None) -> GeneratedBatch:
    """
    Generate ``n`` pairs in chunks of ``batch_size``; chunk i is seeded with
    ``seed + i``. Returns images in [0, 1] and soft masks in [0, 1].
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    kwargs = {'variance': variance} if variance else {}
    channels = generator.config.image_channels
    chunks = []
    generator.eval()
    for i, start in enumerate(range(0, n, batch_size)):
        batch = min(batch_size, n - start)
        states = sample_loop(generator, sched, mode, steps, seed + i, batch, device=device, **kwargs)
        chunks.append(from_model_space(states).cpu())
    states = torch.cat(chunks)
    logger.info(f"Generated {n} pairs with {mode} over {steps} steps (seed {seed})")
    return GeneratedBatch(images=states[:, :channels], masks=states[:, channels:])
