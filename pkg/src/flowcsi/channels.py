"""Synthetic clustered-multipath channel generation for a UPA base station.

Channels are narrowband downlink vectors h of length N = rows * cols,
built as a sum of plane-wave rays with complex Gaussian gains.  The
generator is pure given (seed, draw index), so datasets rebuild
byte-identically and generation can be fanned out across indices.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidConfigError

DATASET_MAGIC = b"MCSD"
DATASET_VERSION = 1


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array at the base station."""

    rows: int
    cols: int
    element_spacing: float = 0.5  # in wavelengths

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise InvalidConfigError("array must have at least one element")
        if self.element_spacing <= 0:
            raise InvalidConfigError("element spacing must be positive")

    @property
    def num_antennas(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class ClusterModelConfig:
    """Clustered-multipath ray model standing in for a ray-traced dataset.

    Rays share a random cluster center per draw; per-ray angles scatter
    around it with `angle_spread` (radians) and gains decay geometrically
    by `power_decay` per ray.  Azimuth/elevation centers are uniform over
    the sector, mimicking a sectored urban-micro cell.
    """

    num_paths: int = 6
    angle_spread: float = 0.05
    power_decay: float = 0.8
    seed: int = 0
    azimuth_sector: tuple = (-np.pi / 3, np.pi / 3)
    elevation_sector: tuple = (-np.pi / 6, np.pi / 6)

    def __post_init__(self):
        if self.num_paths < 1:
            raise InvalidConfigError("num_paths must be >= 1")
        if self.angle_spread < 0:
            raise InvalidConfigError("angle_spread must be >= 0")


@dataclass
class Dataset:
    """Train/test channel splits plus multiuser set assignments.

    `train` and `test` are (n, N) complex arrays.  `multiuser_sets` is an
    (n_sets, K) integer array of row indices into `test`; every set holds
    K distinct test channels.  `norm_scale` is the common scalar applied
    to all channels so the train-split average of ||h||^2 equals N.
    """

    train: np.ndarray
    test: np.ndarray
    multiuser_sets: np.ndarray
    geometry: ArrayGeometry
    config: ClusterModelConfig
    norm_scale: float = 1.0

    @property
    def num_antennas(self) -> int:
        return self.geometry.num_antennas

    def set_channels(self, s: int) -> np.ndarray:
        """Channel matrix rows h_k for multiuser set `s`, shape (K, N)."""
        return self.test[self.multiuser_sets[s]]


def steering_vector(geom: ArrayGeometry, azimuth: float, elevation: float) -> np.ndarray:
    """UPA response a(az, el), length N, constant-modulus entries.

    Entry (r, c) = exp(j 2 pi d (r sin(el) + c sin(az) cos(el))), flattened
    row-major (r outer, c inner).  ||a|| = sqrt(N).
    """
    r = np.arange(geom.rows)[:, None]
    c = np.arange(geom.cols)[None, :]
    phase = 2.0 * np.pi * geom.element_spacing * (
        r * np.sin(elevation) + c * np.sin(azimuth) * np.cos(elevation)
    )
    return np.exp(1j * phase).ravel()


def norm_direction(h: np.ndarray) -> tuple[float, np.ndarray]:
    """Split h into (rho, u) with h = rho * u and ||u|| = 1.

    A zero vector returns rho = 0 and u = 0 (no direction exists).
    """
    rho = float(np.linalg.norm(h))
    if rho == 0.0:
        return 0.0, np.zeros_like(h)
    return rho, h / rho


def to_stacked_real(h: np.ndarray) -> np.ndarray:
    """Complex length-N vector -> real (2, N) tensor [real; imag]."""
    h = np.asarray(h)
    return np.stack([h.real, h.imag], axis=-2)


def from_stacked_real(x: np.ndarray) -> np.ndarray:
    """Real (..., 2, N) tensor -> complex (..., N) vector."""
    x = np.asarray(x)
    return x[..., 0, :] + 1j * x[..., 1, :]


def generate_channel(geom: ArrayGeometry, cfg: ClusterModelConfig,
                     rng: np.random.Generator) -> np.ndarray:
    """Draw one unnormalized clustered-multipath channel vector.

    h = sum_p alpha_p a(az_p, el_p) with alpha_p ~ CN(0, power_decay^p),
    gains normalized so E||h||^2 = N before the dataset-level rescale.
    """
    az_lo, az_hi = cfg.azimuth_sector
    el_lo, el_hi = cfg.elevation_sector
    az0 = rng.uniform(az_lo, az_hi)
    el0 = rng.uniform(el_lo, el_hi)

    powers = cfg.power_decay ** np.arange(cfg.num_paths)
    powers = powers / powers.sum()

    h = np.zeros(geom.num_antennas, dtype=complex)
    for p in range(cfg.num_paths):
        az = az0 + cfg.angle_spread * rng.standard_normal()
        el = el0 + cfg.angle_spread * rng.standard_normal()
        gain = np.sqrt(powers[p] / 2.0) * (rng.standard_normal() + 1j * rng.standard_normal())
        h += gain * steering_vector(geom, az, el)
    return h


def _channel_rng(seed: int, index: int) -> np.random.Generator:
    # one independent stream per draw index; parallel-safe and replayable
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def build_dataset(geom: ArrayGeometry, cfg: ClusterModelConfig,
                  n_train: int, n_test: int, n_sets: int, K: int,
                  rng: np.random.Generator | None = None) -> Dataset:
    """Build a reproducible dataset with disjoint train/test splits.

    Train channels use draw indices [0, n_train); test channels use
    [n_train, n_train + n_test), so the splits are disjoint by
    construction.  Multiuser sets draw K distinct test indices each,
    with replacement across sets.  All randomness derives from cfg.seed;
    the optional `rng` argument only overrides set membership draws.
    """
    if K > n_test:
        raise InvalidConfigError(f"K={K} users cannot be drawn from {n_test} test channels")
    if K < 1 or K > geom.num_antennas:
        raise InvalidConfigError(f"need 1 <= K <= N, got K={K}, N={geom.num_antennas}")

    N = geom.num_antennas
    train = np.empty((n_train, N), dtype=complex)
    test = np.empty((n_test, N), dtype=complex)
    for i in range(n_train):
        train[i] = generate_channel(geom, cfg, _channel_rng(cfg.seed, i))
    for i in range(n_test):
        test[i] = generate_channel(geom, cfg, _channel_rng(cfg.seed, n_train + i))

    # dataset-level power normalization: train-split mean of ||h||^2 -> N
    mean_power = np.mean(np.sum(np.abs(train) ** 2, axis=1)) if n_train else N
    scale = np.sqrt(N / mean_power)
    train *= scale
    test *= scale

    set_rng = rng if rng is not None else np.random.default_rng(
        np.random.SeedSequence([cfg.seed, 0x5E75]))
    sets = np.empty((n_sets, K), dtype=np.int64)
    for s in range(n_sets):
        sets[s] = set_rng.choice(n_test, size=K, replace=False)

    return Dataset(train=train, test=test, multiuser_sets=sets,
                   geometry=geom, config=cfg, norm_scale=float(scale))


# ---------------------------------------------------------------------------
# persistence: binary container and CSV export
# ---------------------------------------------------------------------------

def _interleave(channels: np.ndarray) -> np.ndarray:
    out = np.empty(channels.shape + (2,), dtype="<f8")
    out[..., 0] = channels.real
    out[..., 1] = channels.imag
    return out


def save_dataset(path, ds: Dataset) -> None:
    """Write the binary dataset container (little-endian f64 re/im)."""
    meta = {
        "geometry": asdict(ds.geometry),
        "config": {**asdict(ds.config),
                   "azimuth_sector": list(ds.config.azimuth_sector),
                   "elevation_sector": list(ds.config.elevation_sector)},
        "norm_scale": ds.norm_scale,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    n_train, N = ds.train.shape
    n_test = ds.test.shape[0]
    n_sets, K = ds.multiuser_sets.shape
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", DATASET_VERSION))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<5I", N, n_train, n_test, n_sets, K))
        f.write(_interleave(ds.train).tobytes())
        f.write(_interleave(ds.test).tobytes())
        f.write(ds.multiuser_sets.astype("<u4").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DATASET_MAGIC:
            raise InvalidConfigError(f"bad dataset magic {magic!r}")
        version, = struct.unpack("<I", f.read(4))
        if version != DATASET_VERSION:
            raise InvalidConfigError(f"unsupported dataset version {version}")
        meta_len, = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len).decode())
        N, n_train, n_test, n_sets, K = struct.unpack("<5I", f.read(20))

        def read_channels(n):
            raw = np.frombuffer(f.read(n * N * 2 * 8), dtype="<f8").reshape(n, N, 2)
            return (raw[..., 0] + 1j * raw[..., 1]).astype(complex)

        train = read_channels(n_train)
        test = read_channels(n_test)
        sets = np.frombuffer(f.read(n_sets * K * 4), dtype="<u4")
        sets = sets.reshape(n_sets, K).astype(np.int64)

    gm = meta["geometry"]
    cm = meta["config"]
    geom = ArrayGeometry(rows=gm["rows"], cols=gm["cols"],
                         element_spacing=gm["element_spacing"])
    cfg = ClusterModelConfig(
        num_paths=cm["num_paths"], angle_spread=cm["angle_spread"],
        power_decay=cm["power_decay"], seed=cm["seed"],
        azimuth_sector=tuple(cm["azimuth_sector"]),
        elevation_sector=tuple(cm["elevation_sector"]))
    return Dataset(train=train, test=test, multiuser_sets=sets,
                   geometry=geom, config=cfg, norm_scale=meta["norm_scale"])


def export_channels_csv(path, channels: np.ndarray) -> None:
    """One row per channel, 2N columns (re_0..re_{N-1}, im_0..im_{N-1})."""
    N = channels.shape[1]
    flat = np.concatenate([channels.real, channels.imag], axis=1)
    header = ",".join([f"re_{i}" for i in range(N)] + [f"im_{i}" for i in range(N)])
    np.savetxt(path, flat, delimiter=",", header=header, comments="")
