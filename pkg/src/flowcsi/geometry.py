"""Posterior directional geometry inside feedback cells.

Everything here operates on unit directions u = h / ||h||.  The central
object is the conditional second-moment matrix R(b) = E[u u^H | b] of a
feedback cell: its principal eigenvector is the best representative
direction under expected chordal distortion, and the gap lambda_max -
u^H R u measures how far a reconstruction sits from that optimum.

The finite-mixture surrogate compares two ways of turning a multimodal
cell posterior into zero-forcing beams: sampling one mode per user
("posterior sampling") versus normalizing the posterior mean
("conditional-mean averaging").  Local leakage terms, their exact
quadratic expansion, and a sufficient-condition certifier for when
averaging is strictly worse are implemented below.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateMeanError, FlowCsiError

PROJECTED_NORM_TOL = 1e-9


def chordal_sq(u: np.ndarray, v: np.ndarray) -> float:
    """Squared chordal distance 1 - |u^H v|^2 between unit directions."""
    return float(1.0 - np.abs(np.vdot(u, v)) ** 2)


# ---------------------------------------------------------------------------
# feedback cells and conditional second moments
# ---------------------------------------------------------------------------

@dataclass
class FeedbackCell:
    """All test-set directions that encode to the same bit-string."""

    bits: np.ndarray               # (B,) uint8 of 0/1
    members: np.ndarray            # (count, N) complex unit directions
    member_indices: np.ndarray     # rows into the originating test split
    below_min: bool = False

    @property
    def count(self) -> int:
        return self.members.shape[0]

    @property
    def key(self) -> bytes:
        return np.packbits(self.bits).tobytes()


def collect_cells(channels: np.ndarray, encode_fn, min_count: int = 1) -> dict:
    """Partition channels into feedback cells keyed by packed bits.

    `encode_fn` maps one complex channel vector to a (B,) 0/1 array.
    Every channel lands in exactly one cell; cells with fewer than
    `min_count` members are kept but flagged.
    """
    groups: dict[bytes, list[int]] = {}
    bits_by_key: dict[bytes, np.ndarray] = {}
    for i, h in enumerate(channels):
        bits = np.asarray(encode_fn(h), dtype=np.uint8)
        key = np.packbits(bits).tobytes()
        groups.setdefault(key, []).append(i)
        bits_by_key[key] = bits
    cells = {}
    for key, idx in groups.items():
        idx = np.asarray(idx)
        members = channels[idx]
        members = members / np.linalg.norm(members, axis=1, keepdims=True)
        cells[key] = FeedbackCell(bits=bits_by_key[key], members=members,
                                  member_indices=idx,
                                  below_min=len(idx) < min_count)
    return cells


def second_moment(members: np.ndarray) -> np.ndarray:
    """Empirical R = mean_i u_i u_i^H over unit directions (Hermitian, trace 1)."""
    members = np.atleast_2d(np.asarray(members))
    if members.shape[0] == 0:
        raise FlowCsiError("empty cell has no second moment")
    R = members.T @ members.conj() / members.shape[0]
    return 0.5 * (R + R.conj().T)  # enforce exact Hermitian symmetry


def optimal_direction(R: np.ndarray) -> tuple[np.ndarray, float]:
    """Principal eigenvector of R with a deterministic phase convention.

    Returns (u_star, lambda_max).  u_star maximizes u^H R u over unit
    vectors; the minimal expected chordal distortion is 1 - lambda_max.
    The global phase is fixed by making the largest-magnitude entry
    (first such entry on ties) real and positive; eigenvalue ties pick
    the lowest index among the maximal eigenvalues.
    """
    w, V = np.linalg.eigh(R)
    tie = np.flatnonzero(w == w.max())
    u = V[:, tie[0]]
    lam = float(w[tie[0]])
    k = int(np.argmax(np.abs(u)))
    phase = u[k] / abs(u[k]) if abs(u[k]) > 0 else 1.0
    return u / phase, lam


def chordal_distortion(u_hat: np.ndarray, R: np.ndarray) -> float:
    """Expected squared chordal distance 1 - u_hat^H R u_hat within the cell."""
    nrm = np.linalg.norm(u_hat)
    if abs(nrm - 1.0) > 1e-6:
        raise FlowCsiError(f"direction must be unit norm, got ||u||={nrm:.6f}")
    return float(1.0 - np.real(u_hat.conj() @ R @ u_hat))


def alignment_gap(u_hat: np.ndarray, R: np.ndarray) -> float:
    """Gap lambda_max - u_hat^H R u_hat from the cell-optimal direction (>= 0)."""
    _, lam = optimal_direction(R)
    return float(lam - (1.0 - chordal_distortion(u_hat, R)))


def conditional_mean_direction(modes: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Normalized weighted mean of directions; the MSE-optimal representative.

    With `weights` None the plain average of the rows is used (empirical
    cell mean).  Raises if the mean vanishes, e.g. for equal-weight
    antipodal modes.
    """
    modes = np.atleast_2d(np.asarray(modes))
    if weights is None:
        mu = modes.mean(axis=0)
    else:
        mu = np.asarray(weights) @ modes
    nrm = np.linalg.norm(mu)
    if nrm < 1e-12:
        raise DegenerateMeanError("posterior mean is (numerically) zero")
    return mu / nrm


def projector_complement(vectors) -> np.ndarray:
    """Orthogonal projector onto the complement of span(vectors).

    Accepts a possibly empty list/array of complex length-N vectors;
    rank deficiency is handled through an SVD basis.  Empty input needs
    an ambient dimension, so pass an (0, N) array in that case.
    """
    A = np.atleast_2d(np.asarray(vectors))
    N = A.shape[1]
    if A.shape[0] == 0:
        return np.eye(N, dtype=complex)
    U, s, _ = np.linalg.svd(A.T, full_matrices=False)  # columns span the vectors
    rank = int(np.sum(s > max(A.shape) * np.finfo(float).eps * (s[0] if s.size else 0)))
    Q = U[:, :rank]
    return np.eye(N, dtype=complex) - Q @ Q.conj().T


# ---------------------------------------------------------------------------
# finite-mixture surrogate for ZF interference
# ---------------------------------------------------------------------------

@dataclass
class MixturePosterior:
    """Per-user mode directions and posterior weights.

    modes: (K, M, N) complex unit vectors; weights: (K, M) nonnegative,
    summing to one per user.  All users share the mode count M.
    """

    modes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.modes = np.asarray(self.modes, dtype=complex)
        self.weights = np.asarray(self.weights, dtype=float)
        K, M, _ = self.modes.shape
        if self.weights.shape != (K, M):
            raise FlowCsiError("weights shape must match (K, M)")
        if np.any(self.weights < -1e-12):
            raise FlowCsiError("negative posterior weight")
        if np.max(np.abs(self.weights.sum(axis=1) - 1.0)) > 1e-9:
            raise FlowCsiError("per-user weights must sum to one")
        norms = np.linalg.norm(self.modes, axis=2)
        if np.max(np.abs(norms - 1.0)) > 1e-9:
            raise FlowCsiError("mode directions must be unit norm")

    @property
    def num_users(self) -> int:
        return self.modes.shape[0]

    @property
    def num_modes(self) -> int:
        return self.modes.shape[1]

    def mean_direction(self, k: int) -> np.ndarray:
        return conditional_mean_direction(self.modes[k], self.weights[k])


@dataclass
class InterferenceEstimate:
    value: float
    std_error: float | None = None
    excluded_tuples: int = 0
    total_tuples: int = 0


def _tuple_interference(mix: MixturePosterior, m: tuple) -> float | None:
    """Total leakage J for one selected mode tuple; None if a beam underflows."""
    K = mix.num_users
    total = 0.0
    for n in range(K):
        others = np.array([mix.modes[j, m[j]] for j in range(K) if j != n])
        Pi = projector_complement(others if others.size else np.zeros((0, mix.modes.shape[2])))
        g = Pi @ mix.modes[n, m[n]]
        eta = float(np.real(np.vdot(g, g)))
        if np.sqrt(eta) < PROJECTED_NORM_TOL:
            return None
        for k in range(K):
            if k == n:
                continue
            for ell in range(mix.num_modes):
                if ell == m[k]:
                    continue
                total += mix.weights[k, ell] * np.abs(np.vdot(mix.modes[k, ell], g)) ** 2 / eta
    return total


def interference_ps(mix: MixturePosterior, mode: str = "exact",
                    n_draws: int = 10_000,
                    rng: np.random.Generator | None = None) -> InterferenceEstimate:
    """Expected ZF leakage when each user's beam nulls one sampled mode.

    "exact" enumerates all M^K mode tuples weighted by the product
    posterior; "monte-carlo" samples tuples and reports a standard
    error.  Tuples whose projected beam norm underflows are excluded
    and counted.
    """
    K, M = mix.num_users, mix.num_modes
    if mode == "exact":
        if M ** K > 1_000_000:
            raise FlowCsiError(f"{M}^{K} tuples exceed the exact-enumeration cap")
        total, excluded, count = 0.0, 0, 0
        for m in itertools.product(range(M), repeat=K):
            count += 1
            w = float(np.prod([mix.weights[k, m[k]] for k in range(K)]))
            if w == 0.0:
                continue
            J = _tuple_interference(mix, m)
            if J is None:
                excluded += 1
                continue
            total += w * J
        return InterferenceEstimate(value=total, excluded_tuples=excluded,
                                    total_tuples=count)
    if mode == "monte-carlo":
        rng = rng if rng is not None else np.random.default_rng(0)
        draws, excluded = [], 0
        for _ in range(n_draws):
            m = tuple(rng.choice(M, p=mix.weights[k]) for k in range(K))
            J = _tuple_interference(mix, m)
            if J is None:
                excluded += 1
                continue
            draws.append(J)
        draws = np.asarray(draws)
        se = float(draws.std(ddof=1) / np.sqrt(len(draws))) if len(draws) > 1 else None
        return InterferenceEstimate(value=float(draws.mean()), std_error=se,
                                    excluded_tuples=excluded, total_tuples=n_draws)
    raise FlowCsiError(f"unknown mode {mode!r}")


def interference_cm(mix: MixturePosterior) -> float:
    """Expected ZF leakage when beams are built from normalized mean directions."""
    K, M, N = mix.modes.shape
    u_cm = np.array([mix.mean_direction(k) for k in range(K)])
    total = 0.0
    for n in range(K):
        others = np.array([u_cm[j] for j in range(K) if j != n])
        Pi = projector_complement(others if others.size else np.zeros((0, N)))
        g = Pi @ u_cm[n]
        eta = float(np.real(np.vdot(g, g)))
        if np.sqrt(eta) < PROJECTED_NORM_TOL:
            raise FlowCsiError("mean-direction beam has (numerically) zero projected energy")
        for k in range(K):
            if k == n:
                continue
            for m in range(M):
                total += mix.weights[k, m] * np.abs(np.vdot(mix.modes[k, m], g)) ** 2 / eta
    return total


# ---------------------------------------------------------------------------
# local leakage terms and the same-projector certifier
# ---------------------------------------------------------------------------

@dataclass
class LocalTermReport:
    """All pieces of the pairwise leakage comparison for tuple m, pair (k, n).

    The sampling-side term is R_ps / eta_ps.  The averaging-side term
    decomposes the mean direction of user n into c_n * (selected mode)
    + d_n, giving per-mode coefficients a (selected-branch leakage) and
    b (deviation leakage) whose quadratic expansion is exact.
    """

    mode_tuple: tuple
    pair: tuple
    I_ps_local: float
    I_cm_local: float
    S_cm: float
    C_cm: float
    R_ps: float
    eta_ps: float
    eta_cm: float
    c_n: float
    d_n: np.ndarray = field(repr=False)
    a_coeffs: np.ndarray = field(repr=False)
    b_coeffs: np.ndarray = field(repr=False)
    cross_term: float = 0.0


def local_terms(mix: MixturePosterior, m: tuple, k: int, n: int) -> LocalTermReport:
    """Evaluate both local leakage terms and the averaging-side decomposition."""
    if k == n:
        raise FlowCsiError("local terms need a pair of distinct users")
    K, M, N = mix.modes.shape

    # sampling side: beams null the selected modes of the other users
    others_sel = np.array([mix.modes[j, m[j]] for j in range(K) if j != n])
    Pi_ps = projector_complement(others_sel)
    g_ps = Pi_ps @ mix.modes[n, m[n]]
    eta_ps = float(np.real(np.vdot(g_ps, g_ps)))
    if np.sqrt(eta_ps) < PROJECTED_NORM_TOL:
        raise FlowCsiError("projected beam norm underflow on the sampling side")
    nonsel = [ell for ell in range(M) if ell != m[k]]
    p_k = mix.weights[k, nonsel]
    R_ps = float(np.sum(p_k * np.abs(mix.modes[k, nonsel].conj() @ g_ps) ** 2))
    I_ps_local = R_ps / eta_ps

    # averaging side: beams null the mean directions of the other users
    mu_n = mix.weights[n] @ mix.modes[n]
    mu_norm = np.linalg.norm(mu_n)
    if mu_norm < 1e-12:
        raise DegenerateMeanError("user mean vanished in local-term evaluation")
    u_cm = np.array([mix.mean_direction(j) for j in range(K)])
    Pi_cm = projector_complement(np.array([u_cm[j] for j in range(K) if j != n]))
    g_cm = Pi_cm @ u_cm[n]
    eta_cm = float(np.real(np.vdot(g_cm, g_cm)))
    if np.sqrt(eta_cm) < PROJECTED_NORM_TOL:
        raise FlowCsiError("projected beam norm underflow on the averaging side")

    c_n = float(mix.weights[n, m[n]] / mu_norm)
    d_n = (mu_n - mix.weights[n, m[n]] * mix.modes[n, m[n]]) / mu_norm

    a = mix.modes[k, nonsel].conj() @ (Pi_cm @ mix.modes[n, m[n]])
    b = mix.modes[k, nonsel].conj() @ (Pi_cm @ d_n)
    S_cm = float(mix.weights[k, m[k]] * np.abs(np.vdot(mix.modes[k, m[k]], g_cm)) ** 2)
    C_cm = float(np.sum(p_k * np.abs(b) ** 2))
    cross = float(np.sum(p_k * np.real(np.conj(a) * b)))
    I_cm_local = (S_cm + float(np.sum(p_k * np.abs(c_n * a + b) ** 2))) / eta_cm

    return LocalTermReport(mode_tuple=tuple(m), pair=(k, n),
                           I_ps_local=I_ps_local, I_cm_local=I_cm_local,
                           S_cm=S_cm, C_cm=C_cm, R_ps=R_ps,
                           eta_ps=eta_ps, eta_cm=eta_cm, c_n=c_n, d_n=d_n,
                           a_coeffs=a, b_coeffs=b, cross_term=cross)


@dataclass
class CertificationReport:
    """Outcome of the same-projector sufficient condition for one (m, k, n)."""

    local: LocalTermReport
    same_projector: bool
    projector_gap: float
    cross_nonnegative: bool
    threshold_holds: bool
    hypotheses_hold: bool
    conclusion_holds: bool
    expansion_residual: float


def certify_same_projector_case(mix: MixturePosterior, m: tuple, k: int, n: int,
                                projector_tol: float = 1e-9) -> CertificationReport:
    """Check the sufficient condition for averaging to leak strictly more.

    Hypotheses: (i) the averaging-side and sampling-side projectors for
    beam n coincide (Frobenius gap below `projector_tol`); (ii) the
    weighted cross term sum_l p_k(l) Re(conj(a_l) b_l) is nonnegative;
    (iii) the deviation leakage C_cm exceeds
    (eta_cm / eta_ps - c_n^2) * R_ps.  When all hold, the averaging-side
    local term strictly exceeds the sampling-side one.  The quadratic
    expansion of the averaging-side term is verified unconditionally.
    """
    lt = local_terms(mix, m, k, n)
    K = mix.num_users
    others_sel = np.array([mix.modes[j, m[j]] for j in range(K) if j != n])
    Pi_ps = projector_complement(others_sel)
    u_cm = np.array([mix.mean_direction(j) for j in range(K) if j != n])
    Pi_cm = projector_complement(u_cm)
    gap = float(np.linalg.norm(Pi_cm - Pi_ps))

    nonsel = [ell for ell in range(mix.num_modes) if ell != m[k]]
    p_k = mix.weights[k, nonsel]
    quad_direct = float(np.sum(p_k * np.abs(lt.c_n * lt.a_coeffs + lt.b_coeffs) ** 2))
    quad_expanded = (lt.c_n ** 2 * float(np.sum(p_k * np.abs(lt.a_coeffs) ** 2))
                     + lt.C_cm + 2.0 * lt.c_n * lt.cross_term)
    residual = abs(quad_direct - quad_expanded)

    same_proj = gap < projector_tol
    cross_ok = lt.cross_term >= 0.0
    threshold_ok = lt.C_cm > (lt.eta_cm / lt.eta_ps - lt.c_n ** 2) * lt.R_ps
    hypotheses = bool(same_proj and cross_ok and threshold_ok)
    return CertificationReport(local=lt, same_projector=same_proj,
                               projector_gap=gap,
                               cross_nonnegative=cross_ok,
                               threshold_holds=threshold_ok,
                               hypotheses_hold=hypotheses,
                               conclusion_holds=lt.I_cm_local > lt.I_ps_local,
                               expansion_residual=residual)


def _random_unit(rng: np.random.Generator, N: int) -> np.ndarray:
    v = rng.standard_normal(N) + 1j * rng.standard_normal(N)
    return v / np.linalg.norm(v)


def _unit_orthogonal_to(rng: np.random.Generator, v: np.ndarray) -> np.ndarray:
    g = _random_unit(rng, v.shape[0])
    g = g - v * np.vdot(v, g)
    return g / np.linalg.norm(g)


def random_same_projector_instance(rng: np.random.Generator, N: int = 6,
                                   K: int = 2, n: int = 0,
                                   max_tilt: float = 0.9) -> tuple[MixturePosterior, tuple]:
    """Draw a random mixture whose pair projectors provably coincide.

    Users other than `n` get three modes whose off-axis components
    cancel in the posterior mean, so each mean direction equals the
    selected mode and the two nulling projectors agree exactly.  User
    `n` gets a generic two-mode mixture (padded to three), so its mean
    direction genuinely collapses between modes.  Returns the mixture
    and the selected tuple (mode 0 for everyone).
    """
    M = 3
    modes = np.zeros((K, M, N), dtype=complex)
    weights = np.zeros((K, M))
    for j in range(K):
        v0 = _random_unit(rng, N)
        if j == n:
            # generic bimodal user: mean is pulled between two separated modes
            w = rng.uniform(0.3, 0.7)
            modes[j, 0] = v0
            modes[j, 1] = _random_unit(rng, N)
            modes[j, 2] = modes[j, 1]
            weights[j] = [w, (1 - w) / 2, (1 - w) / 2]
            continue
        g = _unit_orthogonal_to(rng, v0)
        p1, p2 = rng.uniform(0.1, 0.4, size=2)
        p0 = 1.0 - p1 - p2
        s1 = rng.uniform(0.2, max_tilt)
        s2 = min(p1 * s1 / p2, max_tilt)
        s1 = p2 * s2 / p1  # rebalance so p1*s1 == p2*s2 exactly
        modes[j, 0] = v0
        modes[j, 1] = np.sqrt(1 - s1 ** 2) * v0 + s1 * g
        modes[j, 2] = np.sqrt(1 - s2 ** 2) * v0 - s2 * g
        weights[j] = [p0, p1, p2]
    return MixturePosterior(modes=modes, weights=weights), tuple([0] * K)


# ---------------------------------------------------------------------------
# cell diagnostics: MDS embedding and mode extraction
# ---------------------------------------------------------------------------

def mds_embed(directions: np.ndarray) -> np.ndarray:
    """Classical 2-D MDS of unit directions under squared chordal distance.

    Double-centers D_ij = 1 - |u_i^H u_j|^2 and returns the top-2
    eigenpair coordinates, centered at the origin.  Exact for two
    points; tiny negative eigenvalues are clipped at zero.
    """
    U = np.atleast_2d(np.asarray(directions))
    n = U.shape[0]
    if n < 2:
        raise FlowCsiError("MDS needs at least two directions")
    G = np.abs(U @ U.conj().T) ** 2
    D = 1.0 - G
    J = np.eye(n) - np.ones((n, n)) / n
    B = -0.5 * J @ D @ J
    B = 0.5 * (B + B.T)
    w, V = np.linalg.eigh(B)
    order = np.argsort(w)[::-1][:2]
    lam = np.clip(w[order], 0.0, None)
    lam[lam < lam.max() * 1e-12] = 0.0  # flush eigen-noise so duplicates coincide
    coords = V[:, order] * np.sqrt(lam)
    return coords - coords.mean(axis=0)


def extract_modes(members: np.ndarray, M: int,
                  rng: np.random.Generator | None = None,
                  n_iter: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Spherical k-means under the chordal metric on a cell's members.

    Centroid update is the principal eigenvector of the cluster's
    second moment (the chordal barycenter).  Returns (modes, weights)
    with modes (M, N) and weights summing to one.  Empty clusters are
    reseeded to the worst-covered member.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    U = np.atleast_2d(np.asarray(members))
    n, N = U.shape
    M = min(M, n)

    # k-means++-style seeding on squared chordal distance
    centers = [U[rng.integers(n)]]
    for _ in range(1, M):
        d2 = np.min(np.array([1.0 - np.abs(U @ c.conj()) ** 2 for c in centers]), axis=0)
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centers.append(U[rng.choice(n, p=probs)])
    V = np.array(centers)

    assign = np.zeros(n, dtype=int)
    for sweep in range(n_iter):
        aff = np.abs(U @ V.conj().T) ** 2
        new_assign = np.argmax(aff, axis=1)
        if sweep > 0 and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for mdx in range(M):
            sel = U[assign == mdx]
            if sel.shape[0] == 0:
                worst = int(np.argmin(np.max(aff, axis=1)))
                V[mdx] = U[worst]
                continue
            V[mdx], _lam = optimal_direction(second_moment(sel))
    weights = np.bincount(assign, minlength=M).astype(float) / n
    return V, weights
