"""Experiment orchestration: data generation, training, evaluation, cell
analysis, and the self-contained theory checks.

A run lives in an output directory: dataset.mcsd, checkpoints/, curves/,
metrics.csv, cells/, and manifest.json.  Every emitted CSV row carries
the configuration hash, and all stage seeds derive deterministically
from the base seed, so a rerun with the same manifest reproduces
identical artifacts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import channels as ch
from . import checkpoint as ckpt
from . import flow as fl
from . import frontend as fe
from . import geometry as geo
from . import precoding as pc
from .errors import (InvalidConfigError, MissingDependencyError,
                     SingularChannelError)
from .nn import (DTYPE, UNetConfig, VectorFieldUNet,
                 finite_difference_gradients, grad)

FRONTEND_METHODS = {
    "uniform_mse": ("uniform", "mse"),
    "uniform_chordal": ("uniform", "chordal"),
    "mulaw_mse": ("mulaw", "mse"),
    "perlat_mse": ("per_latent_learned", "mse"),
}
UNET_METHODS = ("unet_dec_mse", "flow_refiner", "flow_direct")
ALL_METHODS = tuple(FRONTEND_METHODS) + UNET_METHODS + ("full_csi",)


@dataclass
class ExperimentConfig:
    # array and channel model
    rows: int = 2
    cols: int = 8
    element_spacing: float = 0.5
    num_paths: int = 6
    angle_spread: float = 0.05
    power_decay: float = 0.8
    # dataset sizes
    n_train: int = 4000
    n_test: int = 1000
    n_sets: int = 200
    # evaluation axes
    K_list: list = field(default_factory=lambda: [2, 4])
    snr_db_list: list = field(default_factory=lambda: [0.0, 10.0, 20.0, 30.0])
    bits_list: list = field(default_factory=lambda: [16, 32, 48])
    latent_dim: int = 8
    methods: list = field(default_factory=lambda: list(ALL_METHODS))
    # training budgets
    frontend_steps: int = 3000
    frontend_batch: int = 64
    frontend_lr: float = 1e-3
    flow_steps: int = 2000
    flow_batch: int = 64
    flow_lr: float = 1e-3
    ema_decay: float = 0.999
    sigma0: float = 0.1
    n_step: int = 4
    cond_mode: str = "latent"
    # vector-field network (desk-scale width; widen via config for full runs)
    unet_levels: int = 4
    unet_base_width: int = 16
    unet_n_down: int = 1
    unet_n_up: int = 2
    unet_channel_mult: list | None = field(default_factory=lambda: [1, 2, 2, 4])
    # diagnostics
    min_cell_count: int = 5
    seed: int = 0

    def __post_init__(self):
        for b in self.bits_list:
            if b % self.latent_dim:
                raise InvalidConfigError(
                    f"bit budget {b} not divisible by latent dim {self.latent_dim}")
        for m in self.methods:
            if m not in ALL_METHODS:
                raise InvalidConfigError(f"unknown method {m!r}")

    @property
    def geometry(self) -> ch.ArrayGeometry:
        return ch.ArrayGeometry(self.rows, self.cols, self.element_spacing)

    def channel_config(self) -> ch.ClusterModelConfig:
        return ch.ClusterModelConfig(num_paths=self.num_paths,
                                     angle_spread=self.angle_spread,
                                     power_decay=self.power_decay,
                                     seed=self.seed)

    def bits_per_latent(self, bits: int) -> int:
        return bits // self.latent_dim

    def unet_config(self, bits: int) -> UNetConfig:
        n_cond = (self.latent_dim if self.cond_mode == "latent" else bits)
        mult = tuple(self.unet_channel_mult) if self.unet_channel_mult else None
        return UNetConfig(levels=self.unet_levels, base_width=self.unet_base_width,
                          n_down=self.unet_n_down, n_up=self.unet_n_up,
                          cond_channels=n_cond, channel_mult=mult)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def hash(self) -> str:
        canonical = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def stage_seed(base_seed: int, *parts) -> int:
    """Deterministic 63-bit seed for a named pipeline stage."""
    tag = "|".join(str(p) for p in (base_seed,) + parts)
    digest = hashlib.sha256(tag.encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class Workspace:
    out: Path

    def __post_init__(self):
        self.out = Path(self.out)

    @property
    def dataset_path(self) -> Path:
        return self.out / "dataset.mcsd"

    def checkpoint_path(self, method: str, bits: int) -> Path:
        return self.out / "checkpoints" / f"{method}_B{bits}.mgcf"

    def curve_path(self, method: str, bits: int) -> Path:
        return self.out / "curves" / f"{method}_B{bits}.csv"

    def cells_path(self, method: str, bits: int) -> Path:
        return self.out / "cells" / f"{method}_B{bits}.jsonl"

    @property
    def metrics_path(self) -> Path:
        return self.out / "metrics.csv"

    @property
    def manifest_path(self) -> Path:
        return self.out / "manifest.json"

    def prepare(self) -> None:
        for d in (self.out, self.out / "checkpoints", self.out / "curves",
                  self.out / "cells"):
            d.mkdir(parents=True, exist_ok=True)


def _update_manifest(ws: Workspace, config: ExperimentConfig, entry: dict) -> None:
    manifest = {"config_hash": config.hash(), "artifacts": {}, "stage_seeds": {},
                "versions": {"numpy": np.__version__, "torch": torch.__version__}}
    if ws.manifest_path.exists():
        manifest.update(json.loads(ws.manifest_path.read_text()))
        manifest["config_hash"] = config.hash()
    manifest["artifacts"].update(entry.get("artifacts", {}))
    manifest["stage_seeds"].update(entry.get("stage_seeds", {}))
    ws.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# stage: gen-data
# ---------------------------------------------------------------------------

def gen_data(config: ExperimentConfig, ws: Workspace) -> ch.Dataset:
    """Build the dataset (degenerate multiuser sets resampled) and persist it."""
    ws.prepare()
    K_max = max(config.K_list)
    dataset = ch.build_dataset(config.geometry, config.channel_config(),
                               config.n_train, config.n_test, config.n_sets, K_max)
    # reject sets whose true channel matrix is ill-conditioned for ZF
    set_rng = np.random.default_rng(stage_seed(config.seed, "set-resample"))
    for s in range(config.n_sets):
        for _ in range(100):
            H = dataset.test[dataset.multiuser_sets[s]]
            sv = np.linalg.svd(H, compute_uv=False)
            if sv[-1] > 0 and sv[0] / sv[-1] < 1e6:
                break
            dataset.multiuser_sets[s] = set_rng.choice(
                config.n_test, size=K_max, replace=False)
    ch.save_dataset(ws.dataset_path, dataset)
    _update_manifest(ws, config, {"artifacts": {"dataset": str(ws.dataset_path)}})
    return dataset


def load_workspace_dataset(ws: Workspace) -> ch.Dataset:
    if not ws.dataset_path.exists():
        raise MissingDependencyError(
            f"dataset {ws.dataset_path} not found; run gen-data first")
    return ch.load_dataset(ws.dataset_path)


# ---------------------------------------------------------------------------
# stage: train
# ---------------------------------------------------------------------------

def _require_uniform_mse(ws: Workspace, bits: int) -> fe.FrontendModel:
    path = ws.checkpoint_path("uniform_mse", bits)
    if not path.exists():
        raise MissingDependencyError(
            f"method needs the uniform_mse front end at B={bits}; "
            f"checkpoint {path} not found")
    return ckpt.load_frontend(path)


def _write_curve(path: Path, curve: list) -> None:
    with open(path, "w") as f:
        f.write("step,loss\n")
        for i, v in enumerate(curve):
            f.write(f"{i},{v!r}\n")


def train_method(config: ExperimentConfig, method: str, bits: int,
                 ws: Workspace, dataset: ch.Dataset | None = None) -> Path:
    """Train one method at one bit budget; writes checkpoint and loss curve."""
    ws.prepare()
    if method == "full_csi":
        raise InvalidConfigError("full_csi has no trainable model")
    if method not in ALL_METHODS:
        raise InvalidConfigError(f"unknown method {method!r}")
    dataset = dataset if dataset is not None else load_workspace_dataset(ws)
    N = dataset.num_antennas
    q = config.bits_per_latent(bits)
    seed = stage_seed(config.seed, "train", method, bits)
    out = ws.checkpoint_path(method, bits)

    if method in FRONTEND_METHODS:
        kind, objective = FRONTEND_METHODS[method]
        spec = fe.QuantizerSpec(kind=kind, bits_per_latent=q)
        torch.manual_seed(seed)
        model = fe.FrontendModel(N, config.latent_dim, spec, objective=objective)
        fe.train_frontend(dataset.train, model, steps=config.frontend_steps,
                          batch_size=config.frontend_batch, lr=config.frontend_lr,
                          seed=seed)
        ckpt.save_frontend(out, model)
        curve = model.loss_curve
    elif method == "unet_dec_mse":
        front = _require_uniform_mse(ws, bits)
        reg = fl.train_unet_regressor(dataset.train, front, config.unet_config(bits),
                                      cond_mode=config.cond_mode,
                                      steps=config.flow_steps,
                                      batch_size=config.flow_batch,
                                      lr=config.flow_lr, seed=seed)
        ckpt.save_regressor(out, reg)
        curve = reg.loss_curve
    else:  # flow_refiner | flow_direct
        front = _require_uniform_mse(ws, bits)
        mode = "refiner" if method == "flow_refiner" else "direct"
        cfg = fl.FlowConfig(mode=mode, sigma0=config.sigma0, n_step=config.n_step,
                            cond_mode=config.cond_mode)
        model = fl.train_flow(dataset.train, front, cfg,
                              unet_cfg=config.unet_config(bits),
                              steps=config.flow_steps,
                              batch_size=config.flow_batch, lr=config.flow_lr,
                              ema_decay=config.ema_decay, seed=seed)
        model.frontend_ref = str(ws.checkpoint_path("uniform_mse", bits))
        ckpt.save_flow(out, model)
        curve = model.loss_curve

    _write_curve(ws.curve_path(method, bits), curve)
    _update_manifest(ws, config, {
        "artifacts": {f"{method}_B{bits}": str(out)},
        "stage_seeds": {f"train/{method}/B{bits}": seed},
    })
    return out


# ---------------------------------------------------------------------------
# stage: eval
# ---------------------------------------------------------------------------

def _reconstruct(config: ExperimentConfig, method: str, bits: int, ws: Workspace,
                 H_flat: np.ndarray, seed: int) -> np.ndarray:
    """Batched reconstruction of channels H_flat (n, N) for one method."""
    if method == "full_csi":
        return H_flat.copy()
    if method in FRONTEND_METHODS:
        front = ckpt.load_frontend(ws.checkpoint_path(method, bits))
        return front.decode(front.encode(H_flat))
    front = _require_uniform_mse(ws, bits)
    bits_arr = front.encode(H_flat)
    path = ws.checkpoint_path(method, bits)
    if not path.exists():
        raise MissingDependencyError(f"checkpoint {path} not found; train {method} first")
    if method == "unet_dec_mse":
        return ckpt.load_regressor(path).decode(bits_arr, front)
    model = ckpt.load_flow(path)
    if method == "flow_refiner":
        return fl.refine(bits_arr, front, model)
    rng = np.random.default_rng(seed)
    return fl.decode_direct(bits_arr, model, rng, front)


def eval_methods(config: ExperimentConfig, ws: Workspace,
                 methods: list | None = None,
                 dataset: ch.Dataset | None = None) -> tuple[list, int]:
    """Evaluate methods over (bits, K, SNR, set); returns (records, skipped).

    One CSV row per combination; reconstruction is SNR-independent and
    reused across the SNR sweep.  Sets whose reconstructed matrix is too
    ill-conditioned for ZF are skipped and counted.
    """
    ws.prepare()
    methods = methods if methods is not None else config.methods
    dataset = dataset if dataset is not None else load_workspace_dataset(ws)
    records, skipped = [], 0
    for bits in config.bits_list:
        for K in config.K_list:
            sets = dataset.multiuser_sets[:, :K]
            H_all = dataset.test[sets.reshape(-1)]          # (n_sets*K, N)
            for method in methods:
                seed = stage_seed(config.seed, "eval", method, bits, K)
                H_hat_all = _reconstruct(config, method, bits, ws, H_all, seed)
                H_hat_sets = H_hat_all.reshape(config.n_sets, K, -1)
                H_sets = H_all.reshape(config.n_sets, K, -1)
                for snr_db in config.snr_db_list:
                    P = 10.0 ** (snr_db / 10.0)
                    for s in range(config.n_sets):
                        H, H_hat = H_sets[s], H_hat_sets[s]
                        try:
                            F = pc.zf_precoder(H_hat, P, noise_var=1.0)
                        except SingularChannelError:
                            skipped += 1
                            continue
                        records.append(pc.MetricsRecord(
                            seed=config.seed, K=K, N=dataset.num_antennas,
                            B=bits, snr_db=snr_db, method=method,
                            sum_rate=pc.sum_rate(H, F),
                            nmse_db=pc.nmse_db(H, H_hat),
                            agg_desired=pc.aggregate_desired(H, F),
                            agg_interference=pc.aggregate_interference(H, F)))
    pc.append_metrics_csv(ws.metrics_path, records,
                          extra_columns={"config_hash": config.hash()})
    _update_manifest(ws, config, {"artifacts": {"metrics": str(ws.metrics_path)}})
    return records, skipped


# ---------------------------------------------------------------------------
# stage: analyze-cells
# ---------------------------------------------------------------------------

def _complex_to_pairs(arr: np.ndarray) -> list:
    arr = np.asarray(arr)
    return np.stack([arr.real, arr.imag], axis=-1).tolist()


def analyze_cells(config: ExperimentConfig, method: str, bits: int,
                  ws: Workspace, dataset: ch.Dataset | None = None,
                  mds_cap: int = 256) -> tuple[list, int]:
    """Per-cell geometry records for one method; returns (records, n_below_min).

    Each record carries the empirical second moment, its top eigenvalue,
    the cell-mean direction, alignment gaps for the mean and for the
    method's reconstruction, and 2-D MDS coordinates of the members.
    """
    ws.prepare()
    dataset = dataset if dataset is not None else load_workspace_dataset(ws)
    if method in FRONTEND_METHODS:
        front = ckpt.load_frontend(ws.checkpoint_path(method, bits))
    else:
        front = _require_uniform_mse(ws, bits)
    cells = geo.collect_cells(dataset.test, front.encode,
                              min_count=config.min_cell_count)
    below = sum(1 for c in cells.values() if c.below_min)
    records = []
    seed = stage_seed(config.seed, "cells", method, bits)
    for key in sorted(cells):
        cell = cells[key]
        if cell.below_min:
            continue
        R = geo.second_moment(cell.members)
        u_star, lam = geo.optimal_direction(R)
        u_mean = geo.conditional_mean_direction(cell.members)
        recon = _reconstruct(config, method, bits, ws,
                             dataset.test[cell.member_indices[:1]], seed)[0]
        _, u_method = ch.norm_direction(recon)
        sample = cell.members[:mds_cap]
        coords = geo.mds_embed(sample) if sample.shape[0] >= 2 else np.zeros((1, 2))
        records.append({
            "bits": cell.bits.tolist(),
            "count": cell.count,
            "member_indices": cell.member_indices.tolist(),
            "lambda_max": lam,
            "gap_mean": geo.alignment_gap(u_mean, R),
            "gap_method": geo.alignment_gap(u_method, R),
            "u_star": _complex_to_pairs(u_star),
            "u_mean": _complex_to_pairs(u_mean),
            "u_method": _complex_to_pairs(u_method),
            "second_moment": _complex_to_pairs(R),
            "mds": coords.tolist(),
        })
    path = ws.cells_path(method, bits)
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    _update_manifest(ws, config, {
        "artifacts": {f"cells_{method}_B{bits}": str(path)},
        "stage_seeds": {f"cells/{method}/B{bits}": seed},
    })
    return records, below


# ---------------------------------------------------------------------------
# stage: verify-theory (self-contained synthetic checks)
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def check_two_mode_toy() -> CheckResult:
    """Frozen two-mode toy posterior: lam_max, objective at the dominant
    mode, and objective at the normalized mean, each within +-0.01 of
    0.824 / 0.760 / 0.337."""
    rng = np.random.default_rng(2024)
    v1 = np.array([1.0, 0.0])
    v2 = np.array([np.cos(np.deg2rad(130.0)), np.sin(np.deg2rad(130.0))])
    n = 200_000
    pick = rng.random(n) < 0.6
    x = np.where(pick[:, None], v1, v2) + 0.1 * rng.standard_normal((n, 2))
    u = x / np.linalg.norm(x, axis=1, keepdims=True)
    R = geo.second_moment(u)
    _, lam = geo.optimal_direction(R)
    obj_v1 = 1.0 - geo.chordal_distortion(v1, R)
    u_cm = geo.conditional_mean_direction(np.stack([v1, v2]), np.array([0.6, 0.4]))
    obj_cm = 1.0 - geo.chordal_distortion(u_cm, R)
    ok = (abs(lam - 0.824) <= 0.01 and abs(obj_v1 - 0.760) <= 0.01
          and abs(obj_cm - 0.337) <= 0.01)
    return CheckResult("two_mode_toy", ok,
                       f"lam={lam:.4f} obj(v1)={obj_v1:.4f} obj(mean)={obj_cm:.4f}")


def check_rayleigh_bound(n_matrices: int = 100, n_dirs: int = 10_000) -> CheckResult:
    """No random unit direction beats the top eigenvalue; u_star attains it."""
    rng = np.random.default_rng(7)
    worst_excess, worst_attain = -np.inf, 0.0
    for _ in range(n_matrices):
        G = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
        A = G @ G.conj().T
        R = A / np.trace(A).real
        u_star, lam = geo.optimal_direction(R)
        U = rng.standard_normal((n_dirs, 4)) + 1j * rng.standard_normal((n_dirs, 4))
        U /= np.linalg.norm(U, axis=1, keepdims=True)
        vals = np.einsum("ij,jk,ik->i", U.conj(), R, U).real
        worst_excess = max(worst_excess, float(vals.max() - lam))
        worst_attain = max(worst_attain,
                           abs(float(np.real(u_star.conj() @ R @ u_star)) - lam))
    ok = worst_excess <= 1e-9 and worst_attain <= 1e-9
    return CheckResult("rayleigh_bound", ok,
                       f"max excess={worst_excess:.2e} attain err={worst_attain:.2e}")


def check_zf_exactness(n_trials: int = 100) -> CheckResult:
    """Perfect-CSI ZF: interference below 1e-10*P, beam power exact to 1e-12."""
    rng = np.random.default_rng(11)
    P = 10.0
    worst_int, worst_pow = 0.0, 0.0
    for _ in range(n_trials):
        while True:
            H = (rng.standard_normal((4, 8)) + 1j * rng.standard_normal((4, 8))) / np.sqrt(2)
            sv = np.linalg.svd(H, compute_uv=False)
            if sv[0] / sv[-1] < 1e4:
                break
        F = pc.zf_precoder(H, P)
        worst_int = max(worst_int, pc.aggregate_interference(H, F))
        pw = np.sum(np.abs(F.columns) ** 2, axis=0)
        worst_pow = max(worst_pow, float(np.max(np.abs(pw - P / F.num_users))))
    ok = worst_int < 1e-10 * P and worst_pow < 1e-12
    return CheckResult("zf_exactness", ok,
                       f"max interference={worst_int:.2e} max power err={worst_pow:.2e}")


def check_certification_sweep(n_instances: int = 500) -> CheckResult:
    """Same-projector instances: conclusion holds on all hypothesis-passing
    cases; the quadratic expansion is exact on every instance."""
    rng = np.random.default_rng(13)
    n_pass, n_fail, max_resid = 0, 0, 0.0
    for i in range(n_instances):
        K = 2 if i % 2 == 0 else 3
        mix, m = geo.random_same_projector_instance(rng, N=6, K=K, n=0)
        rep = geo.certify_same_projector_case(mix, m, k=1, n=0)
        max_resid = max(max_resid, rep.expansion_residual)
        if rep.hypotheses_hold:
            n_pass += 1
            if not rep.conclusion_holds:
                n_fail += 1
    ok = n_fail == 0 and n_pass > 0 and max_resid < 1e-12
    return CheckResult("certification_sweep", ok,
                       f"{n_pass}/{n_instances} hypothesis-passing, "
                       f"{n_fail} counterexamples, max residual={max_resid:.2e}")


def check_midpoint_order() -> CheckResult:
    """Doubling the step count on dx/dt = x shrinks the endpoint error ~4x."""
    def field(x, cond, t):
        return x

    errors = []
    for n_step in (4, 8, 16):
        x = fl.integrate_midpoint(field, torch.ones(1, 1, 1, dtype=DTYPE),
                                  torch.zeros(1, 1, 1, dtype=DTYPE), n_step)
        errors.append(abs(float(x) - float(np.e)))
    r1, r2 = errors[0] / errors[1], errors[1] / errors[2]
    ok = 3.2 <= r1 <= 4.8 and 3.2 <= r2 <= 4.8
    return CheckResult("midpoint_order", ok, f"ratios {r1:.2f}, {r2:.2f}")


def _gradcheck_net() -> tuple[VectorFieldUNet, tuple]:
    torch.manual_seed(3)
    cfg = UNetConfig(levels=2, base_width=6, n_down=1, n_up=1, cond_channels=3,
                     time_frequencies=4, time_embed_dim=8)
    net = VectorFieldUNet(cfg)
    with torch.no_grad():  # randomize the zero-initialized output layer too
        for p in net.parameters():
            p.add_(0.05 * torch.randn_like(p))
    state = torch.randn(1, 2, 8, dtype=DTYPE)
    cond = torch.randn(1, 3, 8, dtype=DTYPE)
    t = torch.tensor([0.37], dtype=DTYPE)
    probe = torch.randn(1, 2, 8, dtype=DTYPE)

    def loss_fn(module, state, cond, t):
        return (module(state, cond, t) * probe).sum()

    return net, (loss_fn, state, cond, t)


def check_gradients(step: float = 1e-5, rel_tol: float = 1e-5) -> CheckResult:
    """Analytic gradients of a randomized small U-Net against central
    finite differences."""
    net, (loss_fn, state, cond, t) = _gradcheck_net()
    analytic = grad(loss_fn, net, state, cond, t)
    fd = finite_difference_gradients(loss_fn, net, state, cond, t, step=step)
    max_rel = 0.0
    for name in analytic:
        a = analytic[name].reshape(-1).numpy()
        f = fd[name].reshape(-1).numpy()
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-4)
        max_rel = max(max_rel, float(np.max(np.abs(a - f) / denom)))
    ok = max_rel < rel_tol
    return CheckResult("gradient_check", ok, f"max relative error={max_rel:.2e}")


def check_zero_field_identity() -> CheckResult:
    """Untrained flows are identity transports: the refiner returns
    D0(bits) bit-exactly and the direct decoder returns its drawn noise."""
    torch.manual_seed(5)
    N, L, q = 16, 8, 4
    front = fe.FrontendModel(N, L, fe.QuantizerSpec("uniform", q))
    rng = np.random.default_rng(5)
    h = rng.standard_normal(N) + 1j * rng.standard_normal(N)
    bits = front.encode(h)

    cfg_r = fl.FlowConfig(mode="refiner", n_step=4)
    model_r = fl.FlowModel(VectorFieldUNet(UNetConfig(cond_channels=L, base_width=8)),
                           cfg_r)
    out_r = fl.refine(bits, front, model_r)
    ok_r = np.array_equal(out_r, front.decode(bits))

    cfg_d = fl.FlowConfig(mode="direct", n_step=4)
    model_d = fl.FlowModel(VectorFieldUNet(UNetConfig(cond_channels=L, base_width=8)),
                           cfg_d)
    eps = np.random.default_rng(99).standard_normal((1, 2, N))
    out_d = fl.decode_direct(bits, model_d, np.random.default_rng(99), front)
    ok_d = np.array_equal(out_d, ch.from_stacked_real(eps)[0])
    return CheckResult("zero_field_identity", bool(ok_r and ok_d),
                       f"refiner={ok_r} direct={ok_d}")


def check_nmse_scale() -> CheckResult:
    """nmse(h, h/2) must equal 10 log10(1/4) dB."""
    rng = np.random.default_rng(17)
    h = rng.standard_normal((5, 16)) + 1j * rng.standard_normal((5, 16))
    val = pc.nmse_db(h, 0.5 * h)
    ok = abs(val - 10.0 * np.log10(0.25)) < 1e-6
    return CheckResult("nmse_scale", ok, f"nmse(h, h/2)={val:.6f} dB")


def check_chordal_identity(n_cells: int = 50) -> CheckResult:
    """Direct averaging of squared chordal distance equals 1 - u^H R u."""
    rng = np.random.default_rng(19)
    worst = 0.0
    for _ in range(n_cells):
        n = int(rng.integers(2, 60))
        U = rng.standard_normal((n, 8)) + 1j * rng.standard_normal((n, 8))
        U /= np.linalg.norm(U, axis=1, keepdims=True)
        u_hat = rng.standard_normal(8) + 1j * rng.standard_normal(8)
        u_hat /= np.linalg.norm(u_hat)
        direct = float(np.mean([geo.chordal_sq(u, u_hat) for u in U]))
        via_R = geo.chordal_distortion(u_hat, geo.second_moment(U))
        worst = max(worst, abs(direct - via_R))
    ok = worst < 1e-10
    return CheckResult("chordal_identity", ok, f"max deviation={worst:.2e}")


ALL_CHECKS = (check_two_mode_toy, check_rayleigh_bound, check_zf_exactness,
              check_certification_sweep, check_midpoint_order, check_gradients,
              check_zero_field_identity, check_nmse_scale, check_chordal_identity)


def verify_theory() -> list[CheckResult]:
    """Run every self-contained synthetic check; returns all results."""
    return [check() for check in ALL_CHECKS]
