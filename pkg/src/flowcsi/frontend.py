"""UE-side encoder, scalar latent quantizers, and the BS-side initial decoder.

The front end maps a channel to L bounded latents, quantizes each with q
bits (B = L * q feedback bits, latent-major, MSB-first), and decodes
back to a channel estimate.  Training passes gradients through the
quantizer with a straight-through estimator: the forward pass uses
quantized values, the backward pass treats quantization as the identity
on the (clipped) quantizer input range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .channels import from_stacked_real, to_stacked_real
from .errors import (DimensionMismatchError, InvalidConfigError,
                     MalformedBitsError, TrainingDivergedError)
from .nn import DTYPE

QUANTIZER_KINDS = ("uniform", "mulaw", "per_latent_learned")


class ClipStats:
    """Counts silently clipped quantizer inputs (diagnostic only)."""

    def __init__(self):
        self.count = 0

    def add(self, n: int):
        self.count += int(n)

    def reset(self):
        self.count = 0


clip_stats = ClipStats()


@dataclass(frozen=True)
class QuantizerSpec:
    kind: str
    bits_per_latent: int
    mu: float = 255.0
    levels: tuple | None = None  # (L, 2^q) nested tuples, learned kind only

    def __post_init__(self):
        if self.kind not in QUANTIZER_KINDS:
            raise InvalidConfigError(f"unknown quantizer kind {self.kind!r}")
        if self.bits_per_latent < 1:
            raise InvalidConfigError("need at least one bit per latent")
        if self.kind == "per_latent_learned" and self.levels is not None:
            lv = np.asarray(self.levels)
            if lv.ndim != 2 or lv.shape[1] != 2 ** self.bits_per_latent:
                raise InvalidConfigError("learned levels must be (L, 2^q)")

    @property
    def num_levels(self) -> int:
        return 2 ** self.bits_per_latent


def uniform_levels(q: int) -> np.ndarray:
    """2^q reconstruction levels at the cell midpoints of [-1, 1]."""
    step = 2.0 / 2 ** q
    return -1.0 + (np.arange(2 ** q) + 0.5) * step


def mulaw_compand(z, mu: float = 255.0):
    return np.sign(z) * np.log1p(mu * np.abs(z)) / np.log1p(mu)


def mulaw_expand(y, mu: float = 255.0):
    return np.sign(y) * np.expm1(np.abs(y) * np.log1p(mu)) / mu


class LatentQuantizer(nn.Module):
    """Per-latent scalar quantizer with straight-through gradients.

    Reconstruction levels are a buffer for the uniform and mu-law kinds
    and a trainable parameter for the learned kind; effective levels
    are always sorted and clipped to [-1, 1].  Cell boundaries sit at
    midpoints between adjacent levels; a value exactly on a boundary
    goes to the lower index.  For the mu-law kind the compressed value
    is quantized on the uniform grid and the chosen level expanded back.
    """

    def __init__(self, spec: QuantizerSpec, latent_dim: int):
        super().__init__()
        self.spec = spec
        self.latent_dim = latent_dim
        base = torch.tensor(uniform_levels(spec.bits_per_latent), dtype=DTYPE)
        if spec.kind == "per_latent_learned":
            init = (torch.tensor(np.asarray(spec.levels), dtype=DTYPE)
                    if spec.levels is not None
                    else base.repeat(latent_dim, 1))
            self.levels = nn.Parameter(init)
        else:
            self.register_buffer("levels", base.repeat(latent_dim, 1))

    def effective_levels(self) -> torch.Tensor:
        return torch.sort(self.levels.clamp(-1.0, 1.0), dim=-1).values

    def _gather(self, levels: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
        lidx = torch.arange(self.latent_dim).expand_as(idx)
        return levels[lidx, idx]

    @torch.no_grad()
    def assign(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Indices and dequantized values for latents z of shape (..., L).

        Inputs outside [-1, 1] are clipped silently (counted in
        `clip_stats`).
        """
        z = torch.as_tensor(z, dtype=DTYPE)
        if z.shape[-1] != self.latent_dim:
            raise DimensionMismatchError(
                f"latent dim {z.shape[-1]} != quantizer dim {self.latent_dim}")
        clipped = int((z.abs() > 1.0).sum())
        if clipped:
            clip_stats.add(clipped)
        zc = z.clamp(-1.0, 1.0)
        y = zc
        if self.spec.kind == "mulaw":
            mu = self.spec.mu
            y = torch.sign(zc) * torch.log1p(mu * zc.abs()) / np.log1p(mu)
        levels = self.effective_levels()                    # (L, V)
        bounds = 0.5 * (levels[:, 1:] + levels[:, :-1])     # (L, V-1)
        flat = y.reshape(-1, self.latent_dim)
        idx = torch.searchsorted(bounds, flat.T.contiguous(), right=False).T
        vals = self._gather(levels, idx)
        if self.spec.kind == "mulaw":
            mu = self.spec.mu
            vals = torch.sign(vals) * torch.expm1(vals.abs() * np.log1p(mu)) / mu
        return idx.reshape(z.shape), vals.reshape(z.shape)

    @torch.no_grad()
    def values_for(self, indices) -> torch.Tensor:
        """Dequantized values for given level indices of shape (..., L)."""
        idx = torch.as_tensor(np.asarray(indices), dtype=torch.long)
        flat = idx.reshape(-1, self.latent_dim)
        vals = self._gather(self.effective_levels(), flat)
        if self.spec.kind == "mulaw":
            mu = self.spec.mu
            vals = torch.sign(vals) * torch.expm1(vals.abs() * np.log1p(mu)) / mu
        return vals.reshape(idx.shape)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """Straight-through quantization: quantized forward, identity backward."""
        zc = z.clamp(-1.0, 1.0)
        idx, vals = self.assign(zc.detach())
        if self.spec.kind == "per_latent_learned":
            # route the value through the live levels so they receive gradient
            flat = idx.reshape(-1, self.latent_dim)
            vals = self._gather(self.effective_levels(), flat).reshape(z.shape)
        return vals + zc - zc.detach()


def quantize(spec: QuantizerSpec, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quantize latents z in [-1, 1]^L; returns (indices, dequantized values)."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    quant = LatentQuantizer(spec, z.shape[-1])
    idx, vals = quant.assign(torch.as_tensor(z, dtype=DTYPE))
    return idx.numpy().astype(np.int64), vals.numpy()


def dequantize(spec: QuantizerSpec, indices: np.ndarray) -> np.ndarray:
    """Reconstruction values for the given level indices."""
    indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    quant = LatentQuantizer(spec, indices.shape[-1])
    return quant.values_for(indices).numpy()


# ---------------------------------------------------------------------------
# bit packing: latent-major, MSB-first
# ---------------------------------------------------------------------------

def indices_to_bits(indices: np.ndarray, q: int) -> np.ndarray:
    """(..., L) level indices -> (..., L*q) bits, MSB first per latent."""
    indices = np.asarray(indices, dtype=np.int64)
    shifts = np.arange(q - 1, -1, -1)
    bits = (indices[..., None] >> shifts) & 1
    return bits.reshape(indices.shape[:-1] + (-1,)).astype(np.uint8)


def bits_to_indices(bits: np.ndarray, q: int) -> np.ndarray:
    """(..., L*q) bits -> (..., L) level indices."""
    bits = np.asarray(bits)
    if bits.shape[-1] % q:
        raise MalformedBitsError(f"bit length {bits.shape[-1]} not divisible by q={q}")
    if not np.isin(bits, (0, 1)).all():
        raise MalformedBitsError("bits must be 0/1")
    grouped = bits.reshape(bits.shape[:-1] + (-1, q)).astype(np.int64)
    weights = 1 << np.arange(q - 1, -1, -1)
    return grouped @ weights


def pack_bits(bits: np.ndarray) -> bytes:
    """Serialize a 0/1 vector to packed bytes (latent-major, MSB-first)."""
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def unpack_bits(data: bytes, num_bits: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    if bits.shape[0] < num_bits:
        raise MalformedBitsError(f"only {bits.shape[0]} bits in buffer, need {num_bits}")
    return bits[:num_bits]


# ---------------------------------------------------------------------------
# encoder / decoder networks
# ---------------------------------------------------------------------------

class FrontendNet(nn.Module):
    """Bounded MLP encoder (2N -> L in [-1,1]) and decoder (L -> 2N)."""

    def __init__(self, n_antennas: int, latent_dim: int):
        super().__init__()
        d, w = 2 * n_antennas, 4 * n_antennas
        self.encoder = nn.Sequential(
            nn.Linear(d, w), nn.SiLU(),
            nn.Linear(w, w), nn.SiLU(),
            nn.Linear(w, latent_dim), nn.Tanh(),
        )
        self.decoder = nn.Sequential(
            nn.Linear(latent_dim, w), nn.SiLU(),
            nn.Linear(w, w), nn.SiLU(),
            nn.Linear(w, d),
        )
        self.to(DTYPE)


class FrontendModel:
    """Trained encoder E, quantizer, and initial decoder D0 for one bit budget."""

    def __init__(self, n_antennas: int, latent_dim: int, spec: QuantizerSpec,
                 objective: str = "mse"):
        if objective not in ("mse", "chordal"):
            raise InvalidConfigError(f"unknown objective {objective!r}")
        self.n_antennas = n_antennas
        self.latent_dim = latent_dim
        self.objective = objective
        self.net = FrontendNet(n_antennas, latent_dim)
        self.quantizer = LatentQuantizer(spec, latent_dim)
        self.loss_curve: list[float] = []

    @property
    def spec(self) -> QuantizerSpec:
        return self.quantizer.spec

    @property
    def num_bits(self) -> int:
        return self.latent_dim * self.spec.bits_per_latent

    def _check_channel(self, H: np.ndarray) -> np.ndarray:
        H = np.atleast_2d(np.asarray(H))
        if H.shape[-1] != self.n_antennas:
            raise DimensionMismatchError(
                f"channel has {H.shape[-1]} antennas, front end expects {self.n_antennas}")
        return H

    def _stacked(self, H: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(to_stacked_real(H).reshape(H.shape[0], -1), dtype=DTYPE)

    def latents(self, H: np.ndarray) -> np.ndarray:
        """Bounded encoder outputs before quantization, shape (n, L)."""
        H = self._check_channel(H)
        with torch.no_grad():
            return self.net.encoder(self._stacked(H)).numpy()

    def encode(self, H: np.ndarray) -> np.ndarray:
        """Feedback bits for one channel (B,) or a batch (n, B)."""
        single = np.asarray(H).ndim == 1
        H = self._check_channel(H)
        with torch.no_grad():
            z = self.net.encoder(self._stacked(H))
        idx, _ = self.quantizer.assign(z)
        bits = indices_to_bits(idx.numpy(), self.spec.bits_per_latent)
        return bits[0] if single else bits

    def dequantized_latents(self, bits: np.ndarray) -> np.ndarray:
        """Reconstruction values carried by the bits, shape (..., L)."""
        bits = np.asarray(bits)
        if bits.shape[-1] != self.num_bits:
            raise MalformedBitsError(
                f"expected {self.num_bits} bits, got {bits.shape[-1]}")
        idx = bits_to_indices(bits, self.spec.bits_per_latent)
        return self.quantizer.values_for(idx).numpy()

    def decode(self, bits: np.ndarray) -> np.ndarray:
        """Initial decoder output D0(bits) as complex channels."""
        bits = np.asarray(bits)
        single = bits.ndim == 1
        vals = np.atleast_2d(self.dequantized_latents(bits))
        with torch.no_grad():
            x = self.net.decoder(torch.as_tensor(vals, dtype=DTYPE)).numpy()
        H = from_stacked_real(x.reshape(vals.shape[0], 2, self.n_antennas))
        return H[0] if single else H


def chordal_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of 1 - |h^H hhat|^2 / (||h||^2 ||hhat||^2).

    Inputs are stacked-real (B, 2N) with the real block first; the
    complex inner product is assembled from real arithmetic, so the loss
    is invariant to complex scaling of either argument.
    """
    n = x.shape[1] // 2
    a, b = x[:, :n], x[:, n:]
    c, d = x_hat[:, :n], x_hat[:, n:]
    re = (a * c).sum(1) + (b * d).sum(1)
    im = (a * d).sum(1) - (b * c).sum(1)
    inner_sq = re ** 2 + im ** 2
    norms = (x ** 2).sum(1) * (x_hat ** 2).sum(1)
    return (1.0 - inner_sq / norms).mean()


def mse_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the squared reconstruction error norm."""
    return ((x - x_hat) ** 2).sum(1).mean()


def train_frontend(channels: np.ndarray, model: FrontendModel,
                   steps: int = 4000, batch_size: int = 64, lr: float = 1e-3,
                   seed: int = 0) -> FrontendModel:
    """End-to-end training of encoder, quantizer, and decoder.

    Adam with bias-corrected moments at the given step size; quantizer
    gradients use the straight-through estimator.  The loss curve is
    recorded every step; a non-finite loss aborts.
    """
    if len(channels) == 0:
        raise InvalidConfigError("empty training set")
    X = torch.as_tensor(to_stacked_real(np.asarray(channels)).reshape(len(channels), -1),
                        dtype=DTYPE)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    params = list(model.net.parameters()) + list(model.quantizer.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    loss_fn = mse_loss if model.objective == "mse" else chordal_loss
    for step in range(steps):
        batch = X[rng.integers(0, X.shape[0], size=min(batch_size, X.shape[0]))]
        z = model.net.encoder(batch)
        v = model.quantizer(z)
        x_hat = model.net.decoder(v)
        loss = loss_fn(batch, x_hat)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite front-end loss at step {step}: {float(loss.detach())!r}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        model.loss_curve.append(float(loss.detach()))
    return model
