"""Zero-forcing precoding and downlink rate / quality metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import numpy as np

from .errors import DimensionMismatchError, SingularChannelError

NMSE_FLOOR_DB = -200.0
DEFAULT_CONDITION_CAP = 1e8

METRICS_CSV_HEADER = ["seed", "K", "N", "B", "snr_db", "method",
                      "sum_rate", "nmse_db", "agg_desired", "agg_interference"]


@dataclass
class Precoder:
    """Per-user ZF beams as columns of an (N, K) complex matrix.

    Every column satisfies ||f_k||^2 = P/K (equal power split).
    """

    columns: np.ndarray
    power_budget: float
    noise_var: float

    @property
    def num_users(self) -> int:
        return self.columns.shape[1]


@dataclass
class MetricsRecord:
    seed: int
    K: int
    N: int
    B: int
    snr_db: float
    method: str
    sum_rate: float
    nmse_db: float
    agg_desired: float
    agg_interference: float

    def row(self) -> list:
        return [getattr(self, f.name) for f in fields(self)]


def zf_precoder(H_hat: np.ndarray, P: float, noise_var: float = 1.0,
                condition_cap: float = DEFAULT_CONDITION_CAP) -> Precoder:
    """Normalized zero-forcing precoder from the reconstructed channels.

    H_hat is (K, N) with rows hhat_k^H convention folded in: row k holds
    hhat_k (the precoder uses H_hat rows as the channels to null).
    Columns of Hhat^H (Hhat Hhat^H)^{-1} are rescaled to ||f_k||^2 = P/K.
    """
    H_hat = np.asarray(H_hat)
    K, N = H_hat.shape
    if K > N:
        raise SingularChannelError(f"K={K} users exceed N={N} antennas")
    sv = np.linalg.svd(H_hat, compute_uv=False)
    if sv[-1] == 0 or sv[0] / sv[-1] > condition_cap:
        raise SingularChannelError(
            f"channel matrix condition number {sv[0] / max(sv[-1], 1e-300):.3e} "
            f"exceeds cap {condition_cap:.1e}")
    M = H_hat.conj()  # rows hhat_k^H, the directions the beams must null
    F_unnorm = M.conj().T @ np.linalg.inv(M @ M.conj().T)
    col_norms = np.linalg.norm(F_unnorm, axis=0)
    F = np.sqrt(P / K) * F_unnorm / col_norms
    return Precoder(columns=F, power_budget=P, noise_var=noise_var)


def user_rate(h_k: np.ndarray, F: Precoder, k: int) -> float:
    """Achievable rate log2(1 + SINR_k) in bits/s/Hz."""
    if h_k.shape[0] != F.columns.shape[0]:
        raise DimensionMismatchError("channel and precoder antenna counts differ")
    gains = np.abs(h_k.conj() @ F.columns) ** 2
    signal = gains[k]
    interference = gains.sum() - signal
    return float(np.log2(1.0 + signal / (F.noise_var + interference)))


def sum_rate(H: np.ndarray, F: Precoder) -> float:
    """Sum of per-user rates for true channels H (rows h_k)."""
    return float(sum(user_rate(H[k], F, k) for k in range(H.shape[0])))


def nmse_db(H: np.ndarray, H_hat: np.ndarray) -> float:
    """10 log10 of the mean per-user normalized squared error, floored.

    The per-user ratio ||h - hhat||^2 / ||h||^2 is averaged before the
    log; exact reconstructions clamp at the -200 dB floor.
    """
    H = np.atleast_2d(np.asarray(H))
    H_hat = np.atleast_2d(np.asarray(H_hat))
    if H.shape != H_hat.shape:
        raise DimensionMismatchError(f"shape mismatch {H.shape} vs {H_hat.shape}")
    if H.shape[0] == 0:
        raise DimensionMismatchError("empty channel list")
    err = np.sum(np.abs(H - H_hat) ** 2, axis=1)
    ref = np.sum(np.abs(H) ** 2, axis=1)
    ratio = float(np.mean(err / ref))
    if ratio <= 10 ** (NMSE_FLOOR_DB / 10):
        return NMSE_FLOOR_DB
    return float(10.0 * np.log10(ratio))


def _true_directions(H: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(H, axis=1, keepdims=True)
    keep = norms[:, 0] > 0
    if not np.all(keep):
        import warnings
        warnings.warn("zero-norm channels excluded from direction metrics")
    return H[keep] / norms[keep]


def aggregate_desired(H: np.ndarray, F: Precoder) -> float:
    """Sum over users of |u_k^H f_k|^2 with true unit directions u_k."""
    U = _true_directions(H)
    gains = np.abs(np.einsum("kn,nk->k", U.conj(), F.columns[:, :U.shape[0]]))
    return float(np.sum(gains ** 2))


def aggregate_interference(H: np.ndarray, F: Precoder) -> float:
    """Sum over ordered pairs (k, n != k) of |u_k^H f_n|^2."""
    U = _true_directions(H)
    G = np.abs(U.conj() @ F.columns) ** 2  # (K, K): G[k, n] = |u_k^H f_n|^2
    return float(G.sum() - np.trace(G))


def dft_profile(h: np.ndarray) -> np.ndarray:
    """Magnitudes of the unitary DFT of the channel (beam-domain profile)."""
    h = np.asarray(h)
    N = h.shape[0]
    return np.abs(np.fft.fft(h) / np.sqrt(N))


def append_metrics_csv(path, records: list[MetricsRecord],
                       extra_columns: dict | None = None) -> None:
    """Append metric rows, writing the header if the file is new.

    `extra_columns` adds fixed-value trailing columns (e.g. a config hash)
    to every appended row.
    """
    extra = extra_columns or {}
    header = METRICS_CSV_HEADER + list(extra.keys())
    try:
        new_file = not path.exists() or path.stat().st_size == 0
    except AttributeError:
        import os
        new_file = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if new_file:
            w.writerow(header)
        for r in records:
            w.writerow(r.row() + list(extra.values()))
