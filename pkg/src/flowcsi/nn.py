"""Differentiable building blocks for the vector-field and front-end nets.

Everything runs in float64 on CPU: desk-scale problem sizes make this
cheap, and double precision keeps finite-difference gradient checks and
bit-reproducibility meaningful.  The 1D U-Net operates on a (B, 2, N)
state (real/imag feature maps along the antenna axis), with the
feedback conditioning concatenated at the input and re-injected,
average-pooled, at every coarser resolution of the downsampling path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import DimensionMismatchError, FlowCsiError, InvalidConfigError

DTYPE = torch.float64


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 4
    base_width: int = 64
    n_down: int = 1           # residual blocks per downsampling stage
    n_up: int = 2             # residual blocks per upsampling stage
    cond_channels: int = 8
    in_channels: int = 2
    channel_mult: tuple | None = None   # default: width doubles per level
    time_frequencies: int = 16
    time_sigma: float = 16.0
    time_embed_dim: int = 64

    def __post_init__(self):
        if self.levels < 1:
            raise InvalidConfigError("U-Net needs at least one level")
        if self.base_width < 1 or self.time_frequencies < 1:
            raise InvalidConfigError("widths must be positive")

    @property
    def widths(self) -> tuple:
        mult = self.channel_mult or tuple(2 ** i for i in range(self.levels))
        if len(mult) != self.levels:
            raise InvalidConfigError("channel_mult length must equal levels")
        return tuple(self.base_width * m for m in mult)


def group_count(channels: int) -> int:
    """Largest divisor of `channels` not exceeding eight."""
    g = min(8, channels)
    while channels % g:
        g -= 1
    return g


def _norm(channels: int) -> nn.GroupNorm:
    # tight eps: the per-group standardization should be exact in f64
    return nn.GroupNorm(group_count(channels), channels, eps=1e-12)


class GaussianFourierFeatures(nn.Module):
    """Random-frequency sinusoidal features of the flow time t in [0, 1].

    Frequencies W are drawn once from N(0, sigma^2) and frozen; the
    feature is [sin(2 pi t W), cos(2 pi t W)] of length 2 F.
    """

    def __init__(self, num_frequencies: int = 16, sigma: float = 16.0):
        super().__init__()
        self.register_buffer("W", torch.randn(num_frequencies, dtype=DTYPE) * sigma)

    @property
    def feature_dim(self) -> int:
        return 2 * self.W.shape[0]

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=DTYPE).reshape(-1, 1)
        arg = 2.0 * math.pi * t * self.W[None, :]
        return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


class ResidualBlock1d(nn.Module):
    """GroupNorm/SiLU/conv twice, time embedding added after the first conv."""

    def __init__(self, in_channels: int, out_channels: int, time_dim: int):
        super().__init__()
        self.norm1 = _norm(in_channels)
        self.conv1 = nn.Conv1d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm2 = _norm(out_channels)
        self.conv2 = nn.Conv1d(out_channels, out_channels, 3, padding=1)
        self.skip = (nn.Conv1d(in_channels, out_channels, 1)
                     if in_channels != out_channels else nn.Identity())

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(t_emb)[:, :, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class VectorFieldUNet(nn.Module):
    """Multi-scale 1D U-Net mapping (state, conditioning, t) -> velocity.

    The final output convolution is zero-initialized, so a freshly
    constructed network is exactly the zero field and flow integration
    starts as the identity transport.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths

        self.time_features = GaussianFourierFeatures(cfg.time_frequencies, cfg.time_sigma)
        self.time_mlp = nn.Sequential(
            nn.Linear(self.time_features.feature_dim, cfg.time_embed_dim),
            nn.SiLU(),
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim),
        )

        self.conv_in = nn.Conv1d(cfg.in_channels + cfg.cond_channels, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        for i, w in enumerate(widths):
            blocks = nn.ModuleList()
            for b in range(cfg.n_down):
                cin = w
                if i > 0 and b == 0:
                    cin = w + cfg.cond_channels  # re-injected conditioning
                blocks.append(ResidualBlock1d(cin, w, cfg.time_embed_dim))
            self.down_blocks.append(blocks)
            if i + 1 < cfg.levels:
                self.downsamplers.append(nn.Conv1d(w, widths[i + 1], 3, stride=2, padding=1))

        self.middle = ResidualBlock1d(widths[-1], widths[-1], cfg.time_embed_dim)

        self.up_blocks = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for i in reversed(range(cfg.levels)):
            w = widths[i]
            blocks = nn.ModuleList()
            for b in range(cfg.n_up):
                cin = 2 * w if b == 0 else w  # skip join at matching resolution
                blocks.append(ResidualBlock1d(cin, w, cfg.time_embed_dim))
            self.up_blocks.append(blocks)
            if i > 0:
                self.upsamplers.append(nn.Conv1d(w, widths[i - 1], 3, padding=1))

        self.out_norm = _norm(widths[0])
        self.conv_out = nn.Conv1d(widths[0], cfg.in_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

        self.to(DTYPE)

    def forward(self, state: torch.Tensor, cond: torch.Tensor,
                t: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if state.dim() != 3 or state.shape[1] != cfg.in_channels:
            raise DimensionMismatchError(f"state must be (B, {cfg.in_channels}, N)")
        N = state.shape[2]
        if N % (2 ** (cfg.levels - 1)) != 0:
            raise DimensionMismatchError(
                f"input length {N} not divisible by 2^{cfg.levels - 1}")
        if cond.shape != (state.shape[0], cfg.cond_channels, N):
            raise DimensionMismatchError(
                f"cond must be (B, {cfg.cond_channels}, {N}), got {tuple(cond.shape)}")

        t_emb = self.time_mlp(self.time_features(t))
        if t_emb.shape[0] == 1 and state.shape[0] > 1:
            t_emb = t_emb.expand(state.shape[0], -1)

        x = self.conv_in(torch.cat([state, cond], dim=1))
        skips = []
        for i, blocks in enumerate(self.down_blocks):
            if i > 0:
                x = self.downsamplers[i - 1](x)
                c = torch.nn.functional.avg_pool1d(cond, kernel_size=2 ** i)
                x = torch.cat([x, c], dim=1)
            for block in blocks:
                x = block(x, t_emb)
            skips.append(x)

        x = self.middle(x, t_emb)

        for j, blocks in enumerate(self.up_blocks):
            x = torch.cat([x, skips[len(skips) - 1 - j]], dim=1)
            for block in blocks:
                x = block(x, t_emb)
            if j < len(self.upsamplers):
                x = torch.nn.functional.interpolate(x, scale_factor=2, mode="nearest")
                x = self.upsamplers[j](x)

        return self.conv_out(torch.nn.functional.silu(self.out_norm(x)))


class EmaTracker:
    """Exponential moving average of a module's parameters.

    shadow <- decay * shadow + (1 - decay) * live, applied per update.
    `copy_to` loads the shadow into (a clone of) the live module for
    inference.
    """

    def __init__(self, module: nn.Module, decay: float = 0.999):
        if not (0.0 <= decay <= 1.0):
            raise InvalidConfigError("EMA decay must lie in [0, 1]")
        self.decay = decay
        self.shadow = {name: p.detach().clone()
                       for name, p in module.named_parameters()}

    @torch.no_grad()
    def update(self, module: nn.Module) -> None:
        for name, p in module.named_parameters():
            if self.shadow[name].shape != p.shape:
                raise DimensionMismatchError(f"EMA shape drift on {name}")
            self.shadow[name].mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)

    @torch.no_grad()
    def copy_to(self, module: nn.Module) -> None:
        for name, p in module.named_parameters():
            p.copy_(self.shadow[name])

    def state(self) -> dict:
        return {k: v.clone() for k, v in self.shadow.items()}


def grad(loss_fn, module: nn.Module, *inputs) -> dict:
    """Reverse-mode gradients of a scalar loss w.r.t. the module parameters.

    `loss_fn(module, *inputs)` must return a scalar tensor.  Non-finite
    losses or gradients raise with the offending node named.
    """
    loss = loss_fn(module, *inputs)
    if not torch.isfinite(loss):
        raise FlowCsiError(f"non-finite loss {float(loss.detach())!r}")
    names = [n for n, p in module.named_parameters() if p.requires_grad]
    params = [p for _, p in module.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {}
    for name, g, p in zip(names, grads, params):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise FlowCsiError(f"non-finite gradient at parameter {name!r}")
        out[name] = g
    return out


@torch.no_grad()
def finite_difference_gradients(loss_fn, module: nn.Module, *inputs,
                                step: float = 1e-5, max_elements: int | None = None,
                                rng: torch.Generator | None = None) -> dict:
    """Central-difference gradients, element by element.

    Independent of autograd: only forward evaluations are used.  When
    `max_elements` is set, a random subset of coordinates per parameter
    is probed (the rest are returned as NaN and should be masked).
    """
    out = {}
    for name, p in module.named_parameters():
        flat = p.view(-1)
        n = flat.numel()
        idx = range(n)
        fd = torch.full((n,), float("nan"), dtype=DTYPE)
        if max_elements is not None and n > max_elements:
            g = rng if rng is not None else torch.Generator().manual_seed(0)
            idx = torch.randperm(n, generator=g)[:max_elements].tolist()
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + step
            f_plus = float(loss_fn(module, *inputs))
            flat[i] = orig - step
            f_minus = float(loss_fn(module, *inputs))
            flat[i] = orig
            fd[i] = (f_plus - f_minus) / (2.0 * step)
        out[name] = fd.view_as(p)
    return out
