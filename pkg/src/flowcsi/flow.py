"""Feedback-conditioned flow decoders built on the vector-field U-Net.

Two decoders share one training recipe: fit a time-dependent vector
field to the constant transport direction of straight-line paths
between a source sample and the true channel, conditioned on the
feedback bits.

* refiner: the source is the front-end estimate D0(bits), perturbed by
  sigma0 * eps during training and used unperturbed at inference, so
  decoding is a deterministic refinement of the front end.
* direct: the source is standard Gaussian noise; decoding draws one
  noise sample and transports it to the feedback-conditioned channel
  distribution.

Inference integrates the learned ODE with the second-order midpoint
rule over n_step uniform steps, using EMA weights when configured.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch

from .channels import from_stacked_real, to_stacked_real
from .errors import (FlowCsiError, InvalidConfigError, MissingDependencyError,
                     TrainingDivergedError)
from .frontend import FrontendModel
from .nn import DTYPE, EmaTracker, UNetConfig, VectorFieldUNet

DIVERGENCE_FACTOR = 1e3


@dataclass(frozen=True)
class FlowConfig:
    mode: str                       # "refiner" | "direct"
    sigma0: float = 0.1             # training source perturbation (refiner only)
    n_step: int = 4
    use_ema_for_inference: bool = True
    cond_mode: str = "latent"       # "latent" (dequantized values) | "bits" (+-1 planes)

    def __post_init__(self):
        if self.mode not in ("refiner", "direct"):
            raise InvalidConfigError(f"unknown flow mode {self.mode!r}")
        if self.n_step < 1:
            raise InvalidConfigError("n_step must be >= 1")
        if self.sigma0 < 0:
            raise InvalidConfigError("sigma0 must be >= 0")
        if self.cond_mode not in ("latent", "bits"):
            raise InvalidConfigError(f"unknown cond mode {self.cond_mode!r}")


@dataclass
class FlowTrainingSample:
    state: np.ndarray     # (2, N) point on the path at flow time t
    t: float
    target: np.ndarray    # (2, N) constant transport direction
    cond: np.ndarray      # (C, N) conditioning map


def conditioning(frontend: FrontendModel, bits: np.ndarray,
                 mode: str = "latent") -> np.ndarray:
    """Conditioning map derived from bits, broadcast along antennas.

    "latent": one channel per latent holding its dequantized value;
    "bits": one +-1 plane per feedback bit.
    """
    bits = np.asarray(bits)
    N = frontend.n_antennas
    if mode == "latent":
        vals = frontend.dequantized_latents(bits)
        return np.broadcast_to(vals[..., None], vals.shape + (N,)).copy()
    planes = 2.0 * bits.astype(float) - 1.0
    return np.broadcast_to(planes[..., None], planes.shape + (N,)).copy()


def cond_channels(frontend: FrontendModel, mode: str) -> int:
    return frontend.latent_dim if mode == "latent" else frontend.num_bits


def make_training_sample(h: np.ndarray, bits: np.ndarray, cfg: FlowConfig,
                         rng: np.random.Generator,
                         frontend: FrontendModel | None = None,
                         cond: np.ndarray | None = None) -> FlowTrainingSample:
    """Draw (t, eps) and place one training point on the straight path.

    refiner: source = D0(bits) + sigma0 * eps; direct: source = eps.
    state = (1 - t) * source + t * h; target = h - source.
    """
    if cfg.mode == "refiner" and frontend is None:
        raise MissingDependencyError("refiner training needs the front-end decoder")
    if cond is None:
        if frontend is None:
            raise MissingDependencyError("conditioning needs the front end or an explicit map")
        cond = conditioning(frontend, bits, cfg.cond_mode)
    x1 = to_stacked_real(np.asarray(h))
    t = float(rng.uniform())
    eps = rng.standard_normal(x1.shape)
    if cfg.mode == "refiner":
        source = to_stacked_real(frontend.decode(bits)) + cfg.sigma0 * eps
    else:
        source = eps
    state = (1.0 - t) * source + t * x1
    return FlowTrainingSample(state=state, t=t, target=x1 - source, cond=cond)


class FlowModel:
    """Trained vector field plus EMA shadow and inference configuration."""

    def __init__(self, field: VectorFieldUNet, config: FlowConfig,
                 ema_decay: float = 0.999, frontend_ref: str = ""):
        self.field = field
        self.config = config
        self.ema = EmaTracker(field, decay=ema_decay)
        self.frontend_ref = frontend_ref
        self.loss_curve: list[float] = []

    def inference_field(self) -> VectorFieldUNet:
        """The network used at decode time (EMA shadow when configured)."""
        if not self.config.use_ema_for_inference:
            return self.field
        averaged = copy.deepcopy(self.field)
        self.ema.copy_to(averaged)
        return averaged


def flow_loss(model: FlowModel, samples: list[FlowTrainingSample]) -> float:
    """Mean over the batch of || field(state, cond, t) - target ||^2."""
    if not samples:
        raise FlowCsiError("empty training batch")
    state = torch.as_tensor(np.stack([s.state for s in samples]), dtype=DTYPE)
    cond = torch.as_tensor(np.stack([s.cond for s in samples]), dtype=DTYPE)
    t = torch.as_tensor(np.array([s.t for s in samples]), dtype=DTYPE)
    target = torch.as_tensor(np.stack([s.target for s in samples]), dtype=DTYPE)
    with torch.no_grad():
        pred = model.field(state, cond, t)
        loss = ((pred - target) ** 2).sum(dim=(1, 2)).mean()
    if not torch.isfinite(loss):
        raise TrainingDivergedError("non-finite flow loss")
    return float(loss)


def integrate_midpoint(field_fn, x0: torch.Tensor, cond: torch.Tensor,
                       n_step: int) -> torch.Tensor:
    """Second-order midpoint integration of dx/dt = field(x, cond, t) on [0, 1]."""
    if n_step < 1:
        raise InvalidConfigError("n_step must be >= 1")
    x = x0
    dt = 1.0 / n_step
    for n in range(n_step):
        t_n = n * dt
        k1 = field_fn(x, cond, torch.full((x.shape[0],), t_n, dtype=DTYPE))
        k2 = field_fn(x + 0.5 * dt * k1, cond,
                      torch.full((x.shape[0],), t_n + 0.5 * dt, dtype=DTYPE))
        x = x + dt * k2
        if not torch.isfinite(x).all():
            raise FlowCsiError(f"non-finite flow state after step {n}")
    return x


def integrate_euler(field_fn, x0: torch.Tensor, cond: torch.Tensor,
                    n_step: int) -> torch.Tensor:
    """First-order integrator, kept as a debugging reference."""
    x = x0
    dt = 1.0 / n_step
    for n in range(n_step):
        k = field_fn(x, cond, torch.full((x.shape[0],), n * dt, dtype=DTYPE))
        x = x + dt * k
    return x


def _transport(model: FlowModel, x0: np.ndarray, cond: np.ndarray) -> np.ndarray:
    field = model.inference_field()
    with torch.no_grad():
        out = integrate_midpoint(field, torch.as_tensor(x0, dtype=DTYPE),
                                 torch.as_tensor(cond, dtype=DTYPE),
                                 model.config.n_step)
    return out.numpy()


def refine(bits: np.ndarray, frontend: FrontendModel, model: FlowModel) -> np.ndarray:
    """Deterministic refinement of D0(bits); (B,) bits or (n, B) batches."""
    if model.config.mode != "refiner":
        raise FlowCsiError(f"model mode is {model.config.mode!r}, expected 'refiner'")
    bits = np.asarray(bits)
    single = bits.ndim == 1
    batch = np.atleast_2d(bits)
    x0 = to_stacked_real(np.atleast_2d(frontend.decode(batch)))
    cond = conditioning(frontend, batch, model.config.cond_mode)
    out = from_stacked_real(_transport(model, x0, cond))
    return out[0] if single else out


def decode_direct(bits: np.ndarray, model: FlowModel, rng: np.random.Generator,
                  frontend: FrontendModel) -> np.ndarray:
    """Generative decoding from a fresh Gaussian source, conditioned on bits."""
    if model.config.mode != "direct":
        raise FlowCsiError(f"model mode is {model.config.mode!r}, expected 'direct'")
    bits = np.asarray(bits)
    single = bits.ndim == 1
    batch = np.atleast_2d(bits)
    N = frontend.n_antennas
    x0 = rng.standard_normal((batch.shape[0], 2, N))
    cond = conditioning(frontend, batch, model.config.cond_mode)
    out = from_stacked_real(_transport(model, x0, cond))
    return out[0] if single else out


def train_flow(channels: np.ndarray, frontend: FrontendModel, cfg: FlowConfig,
               unet_cfg: UNetConfig | None = None, steps: int = 3000,
               batch_size: int = 64, lr: float = 1e-3, ema_decay: float = 0.999,
               seed: int = 0) -> FlowModel:
    """Mini-batch conditional flow-matching training with EMA tracking.

    The front end is frozen throughout: bits (and, for the refiner, the
    initial estimates) are precomputed once.  Aborts when the loss is
    non-finite or exceeds 1000x its initial value.
    """
    if cfg.mode == "refiner" and frontend is None:
        raise MissingDependencyError("refiner training needs a trained front end")
    channels = np.asarray(channels)
    n, N = channels.shape

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    if unet_cfg is None:
        unet_cfg = UNetConfig(cond_channels=cond_channels(frontend, cfg.cond_mode))
    field = VectorFieldUNet(unet_cfg)
    model = FlowModel(field, cfg, ema_decay=ema_decay)

    bits = frontend.encode(channels)
    cond = torch.as_tensor(conditioning(frontend, bits, cfg.cond_mode), dtype=DTYPE)
    x1 = torch.as_tensor(to_stacked_real(channels), dtype=DTYPE)
    anchor = (torch.as_tensor(to_stacked_real(frontend.decode(bits)), dtype=DTYPE)
              if cfg.mode == "refiner" else None)

    opt = torch.optim.Adam(field.parameters(), lr=lr)
    initial_loss = None
    for step in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        idx_t = torch.as_tensor(idx)
        t = torch.as_tensor(rng.uniform(size=len(idx)), dtype=DTYPE)
        eps = torch.as_tensor(rng.standard_normal((len(idx), 2, N)), dtype=DTYPE)
        if cfg.mode == "refiner":
            source = anchor[idx_t] + cfg.sigma0 * eps
        else:
            source = eps
        tt = t[:, None, None]
        state = (1.0 - tt) * source + tt * x1[idx_t]
        target = x1[idx_t] - source

        pred = field(state, cond[idx_t], t)
        loss = ((pred - target) ** 2).sum(dim=(1, 2)).mean()
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite flow loss at step {step}")
        if initial_loss is None:
            initial_loss = max(float(loss.detach()), 1e-12)
        if float(loss.detach()) > DIVERGENCE_FACTOR * initial_loss:
            raise TrainingDivergedError(
                f"flow loss {float(loss.detach()):.3e} exceeded {DIVERGENCE_FACTOR:.0e}x "
                f"initial {initial_loss:.3e} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        model.ema.update(field)
        model.loss_curve.append(float(loss.detach()))
    return model


class UNetRegressor:
    """The vector-field backbone trained as a plain bits -> channel regressor.

    Baseline sharing the flow decoders' architecture but fit as a
    deterministic MSE regressor: the network sees a zero state and the
    conditioning map at a fixed flow time of zero.
    """

    def __init__(self, field: VectorFieldUNet, cond_mode: str = "latent"):
        self.field = field
        self.cond_mode = cond_mode
        self.loss_curve: list[float] = []

    def decode(self, bits: np.ndarray, frontend: FrontendModel) -> np.ndarray:
        bits = np.asarray(bits)
        single = bits.ndim == 1
        batch = np.atleast_2d(bits)
        cond = torch.as_tensor(conditioning(frontend, batch, self.cond_mode), dtype=DTYPE)
        x0 = torch.zeros((batch.shape[0], 2, frontend.n_antennas), dtype=DTYPE)
        with torch.no_grad():
            out = self.field(x0, cond, torch.zeros(batch.shape[0], dtype=DTYPE))
        H = from_stacked_real(out.numpy())
        return H[0] if single else H


def train_unet_regressor(channels: np.ndarray, frontend: FrontendModel,
                         unet_cfg: UNetConfig, cond_mode: str = "latent",
                         steps: int = 3000, batch_size: int = 64, lr: float = 1e-3,
                         seed: int = 0) -> UNetRegressor:
    channels = np.asarray(channels)
    n, N = channels.shape
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    field = VectorFieldUNet(unet_cfg)
    reg = UNetRegressor(field, cond_mode)

    bits = frontend.encode(channels)
    cond = torch.as_tensor(conditioning(frontend, bits, cond_mode), dtype=DTYPE)
    x1 = torch.as_tensor(to_stacked_real(channels), dtype=DTYPE)
    opt = torch.optim.Adam(field.parameters(), lr=lr)
    for step in range(steps):
        idx = torch.as_tensor(rng.integers(0, n, size=min(batch_size, n)))
        x0 = torch.zeros((len(idx), 2, N), dtype=DTYPE)
        pred = field(x0, cond[idx], torch.zeros(len(idx), dtype=DTYPE))
        loss = ((pred - x1[idx]) ** 2).sum(dim=(1, 2)).mean()
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite regressor loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        reg.loss_curve.append(float(loss.detach()))
    return reg
