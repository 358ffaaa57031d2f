"""Exact finite-state computations behind the sampler identities.

Everything here is dense linear algebra on small row-stochastic matrices.
Quantities that matter are computed two ways where that is cheap (linear solve
plus power iteration, closed form plus detailed-balance scan) so a bug in one
route shows up as a residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ROW_SUM_TOL = 1e-12


class ChainValidationError(ValueError):
    pass


@dataclass(frozen=True)
class DiscreteChain:
    P: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] == 0:
            raise ChainValidationError(f"transition matrix must be square, got shape {P.shape}")
        if not np.all(np.isfinite(P)):
            raise ChainValidationError("transition matrix has non-finite entries")
        bad = np.argwhere(P < 0)
        if bad.size:
            i, j = bad[0]
            raise ChainValidationError(f"row {i} has negative entry {P[i, j]} in column {j}")
        sums = P.sum(axis=1)
        off = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)
        if off.size:
            i = int(off[0])
            raise ChainValidationError(f"row {i} sums to {float(sums[i])!r}, not 1")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)
        if not self.labels:
            object.__setattr__(self, "labels", tuple(range(P.shape[0])))

    @property
    def n(self) -> int:
        return self.P.shape[0]


def _as_matrix(chain) -> np.ndarray:
    return chain.P if isinstance(chain, DiscreteChain) else np.asarray(chain, float)


def _indicator(n: int, C: Sequence[int]) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    mask[list(C)] = True
    return mask


# ---------------------------------------------------------------------------
# invariant measures


@dataclass(frozen=True)
class StationaryResult:
    pi: np.ndarray
    unique: bool
    residual: float
    power_gap: float


def harmonic_dimension(chain, tol: float = 1e-9) -> int:
    """Dimension of ``{h : Ph = h}``, from the numerical rank of ``P - I``."""
    P = _as_matrix(chain)
    s = np.linalg.svd(P - np.eye(P.shape[0]), compute_uv=False)
    if s[0] == 0.0:
        return P.shape[0]
    return int(P.shape[0] - np.sum(s > tol * s[0]))


def power_stationary(P: np.ndarray, iters: int = 100_000, tol: float = 1e-15) -> np.ndarray:
    """Stationary law by power iteration on the lazy chain ``(I + P) / 2``."""
    lazy = 0.5 * (np.eye(P.shape[0]) + P)
    v = np.full(P.shape[0], 1.0 / P.shape[0])
    for _ in range(iters):
        w = v @ lazy
        if np.max(np.abs(w - v)) < tol:
            return w
        v = w
    return v


def stationary_distribution(chain: DiscreteChain, power_check: bool = True) -> StationaryResult:
    """Solve ``pi (P - I) = 0`` with one equation replaced by ``sum(pi) = 1``."""
    P = _as_matrix(chain)
    n = P.shape[0]
    A = (P - np.eye(n)).T
    A[-1] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    unique = harmonic_dimension(P) == 1
    if unique:
        pi = np.linalg.solve(A, rhs)
    else:
        pi = np.linalg.lstsq(A, rhs, rcond=None)[0]
    residual = float(np.max(np.abs(pi @ P - pi)))
    gap = float(np.max(np.abs(power_stationary(P) - pi))) if power_check and unique else float("nan")
    return StationaryResult(pi, unique, residual, gap)


@dataclass(frozen=True)
class KacResult:
    pi0: float
    pi1: float
    finite: bool


def _spectral_radius(M: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(M)))) if M.size else 0.0


def taboo_matrix(P: np.ndarray, C: Sequence[int]) -> np.ndarray:
    """P with every transition into C removed."""
    P0 = np.array(P, dtype=float)
    P0[:, list(C)] = 0.0
    return P0


def _excursion_resolvent(P0: np.ndarray):
    if _spectral_radius(P0) >= 1.0 - 1e-12:
        return None
    return np.linalg.inv(np.eye(P0.shape[0]) - P0)


def kac_measures(chain, pi: np.ndarray, C: Sequence[int], f: np.ndarray) -> KacResult:
    """Excursion measures started from C, integrated against ``f``.

    The first counts times ``0..sigma_C - 1`` of each excursion, the second
    counts ``1..sigma_C``. Both equal ``pi(f)`` when pi is invariant.
    """
    P = _as_matrix(chain)
    pi = np.asarray(pi, float)
    f = np.asarray(f, float)
    C = list(C)
    G = _excursion_resolvent(taboo_matrix(P, C))
    if G is None:
        return KacResult(np.inf, np.inf, False)
    visits = G @ f
    after = G @ (P @ f)
    return KacResult(float(pi[C] @ visits[C]), float(pi[C] @ after[C]), True)


def generalized_kac(chain, pi: np.ndarray, alpha: np.ndarray, f: np.ndarray) -> KacResult:
    """Excursion measures for a randomised set ``{(x, u) : u <= alpha(x)}``.

    The uniform auxiliary coordinate is integrated out: a move to ``y`` escapes
    the set with probability ``1 - alpha(y)``.
    """
    P = _as_matrix(chain)
    pi = np.asarray(pi, float)
    alpha = np.clip(np.asarray(alpha, float), 0.0, 1.0)
    f = np.asarray(f, float)
    P_miss = P * (1.0 - alpha)[None, :]
    G = _excursion_resolvent(P_miss)
    if G is None:
        return KacResult(np.inf, np.inf, False)
    w = pi * alpha
    return KacResult(float(w @ (G @ f)), float(w @ (G @ (P @ f))), True)


# ---------------------------------------------------------------------------
# teleport kernels


def build_memoryless_kernel(chain, pi: np.ndarray, C: Sequence[int]) -> DiscreteChain:
    """``S(y, .) = P(y, .) off C, plus P(y, C) times pi conditioned on C``."""
    P = _as_matrix(chain)
    pi = np.asarray(pi, float)
    mask = _indicator(P.shape[0], C)
    pi_c = np.where(mask, pi, 0.0)
    pi_c /= pi_c.sum()
    S = P * (~mask)[None, :] + np.outer(P[:, mask].sum(axis=1), pi_c)
    return DiscreteChain(_renormalise(S))


def _renormalise(M: np.ndarray) -> np.ndarray:
    # Rounding can leave row sums a few ulp off; the oracle's own constructions
    # are exactly stochastic in real arithmetic.
    return M / M.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class ReversibilityReport:
    off_region_balanced: bool
    region_rows_agree: bool
    detailed_balance: bool
    balance_residual: float

    @property
    def criterion(self) -> bool:
        return self.off_region_balanced and self.region_rows_agree

    @property
    def consistent(self) -> bool:
        return self.criterion == self.detailed_balance


def detailed_balance_residual(P: np.ndarray, pi: np.ndarray) -> float:
    flow = pi[:, None] * P
    return float(np.max(np.abs(flow - flow.T)))


def check_reversibility_criterion(chain, pi: np.ndarray, C: Sequence[int],
                                  tol: float = 1e-10) -> ReversibilityReport:
    """Compare the two structural conditions with a direct detailed-balance test of S.

    Condition one: the flow ``pi(x) P(x, y)`` is symmetric on pairs outside C.
    Condition two: all rows ``P(y, .)`` with ``y`` in C and ``pi(y) > 0`` agree off C.
    """
    P = _as_matrix(chain)
    pi = np.asarray(pi, float)
    mask = _indicator(P.shape[0], C)
    out = ~mask
    flow = (pi[:, None] * P)[np.ix_(out, out)]
    balanced = bool(np.max(np.abs(flow - flow.T), initial=0.0) <= tol)
    rows = P[np.ix_(mask & (pi > 0), out)]
    agree = bool(rows.size == 0 or np.max(np.abs(rows - rows[0]), initial=0.0) <= tol)
    S = build_memoryless_kernel(P, pi, C).P
    res = detailed_balance_residual(S, pi)
    return ReversibilityReport(balanced, agree, res <= tol, res)


@dataclass(frozen=True)
class DiscreteKktKernel:
    """Pair chain ``(y, z)`` with ``z`` in C; pair ``(y, C[j])`` has index ``y * |C| + j``."""

    states: tuple
    R: np.ndarray
    region: tuple

    def index(self, y: int, z: int) -> int:
        return y * len(self.region) + self.region.index(z)


def build_kkt_kernel(chain, C: Sequence[int], Q) -> DiscreteKktKernel:
    P = _as_matrix(chain)
    Q = _as_matrix(Q)
    C = tuple(int(c) for c in C)
    n, m = P.shape[0], len(C)
    if Q.shape != (m, m):
        raise ChainValidationError(f"Q must be {m}x{m} over C, got {Q.shape}")
    mask = _indicator(n, C)
    p_into = P[:, mask].sum(axis=1)
    R = np.zeros((n * m, n * m))
    for y in range(n):
        for j in range(m):
            row = R[y * m + j]
            for y2 in np.flatnonzero(~mask):
                row[y2 * m + j] += P[y, y2]
            for j2, z2 in enumerate(C):
                row[z2 * m + j2] += p_into[y] * Q[j, j2]
    states = tuple((y, z) for y in range(n) for z in C)
    return DiscreteKktKernel(states, R, C)


def kkt_stationary(chain, pi: np.ndarray, C: Sequence[int], Q=None) -> np.ndarray:
    """Invariant law of the pair chain, in :class:`DiscreteKktKernel` ordering.

    Mass at ``(y, x)`` is ``pi(x)`` times the expected number of visits to ``y``
    during an excursion that starts at ``x`` and ends on re-entering C. It does
    not depend on the teleport kernel, which is accepted only for symmetry with
    :func:`build_kkt_kernel`.
    """
    P = _as_matrix(chain)
    pi = np.asarray(pi, float)
    C = list(C)
    G = _excursion_resolvent(taboo_matrix(P, C))
    if G is None:
        raise ChainValidationError("C is not reachable from every state")
    # G = I + P0 G: row x of G counts visits at times 0..sigma_C - 1
    tilde = (pi[C][:, None] * G[C]).T  # shape (n, |C|): [y, j]
    return tilde.reshape(-1)


def pair_marginals(tilde: np.ndarray, n: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(tilde).reshape(n, m)
    return t.sum(axis=1), t.sum(axis=0)


# ---------------------------------------------------------------------------
# ergodicity certificates


@dataclass(frozen=True)
class DriftCertificate:
    V: np.ndarray
    lam: float
    b: float
    set_label: tuple

    def __post_init__(self):
        if np.any(np.asarray(self.V) < 1.0):
            raise ValueError("drift function must be >= 1")


@dataclass(frozen=True)
class DriftReport:
    holds: bool
    max_violation: float
    slack: np.ndarray
    sup_on_set: float


def check_drift(chain, cert: DriftCertificate, tol: float = 1e-12) -> DriftReport:
    """Pointwise test of ``P V <= lam V + b 1_set``; slack is the right side minus the left."""
    P = _as_matrix(chain)
    V = np.asarray(cert.V, float)
    mask = _indicator(P.shape[0], cert.set_label)
    slack = cert.lam * V + cert.b * mask - P @ V
    worst = float(max(0.0, -slack.min()))
    sup = float(V[mask].max()) if mask.any() else 0.0
    return DriftReport(worst <= tol, worst, slack, sup)


def return_drift_certificate(chain, C: Sequence[int], level: float) -> DriftCertificate:
    """Drift certificate from the one-step probability of entering C.

    With ``eta = min over y outside C of P(y, C)``, the function equal to
    ``level`` outside C and 1 on C drifts with ``lam = 1 + eta (1/level - 1)``
    and ``b = level``.
    """
    if level <= 1.0:
        raise ValueError("level must exceed 1")
    P = _as_matrix(chain)
    mask = _indicator(P.shape[0], C)
    into = P[:, mask].sum(axis=1)
    eta = float(into[~mask].min()) if (~mask).any() else 1.0
    V = np.where(mask, 1.0, level)
    return DriftCertificate(V, 1.0 + eta * (1.0 / level - 1.0), level, tuple(int(c) for c in C))


class SmallSetFailure(ValueError):
    pass


@dataclass(frozen=True)
class Minorization:
    epsilon: float
    nu: np.ndarray


def check_small_set(Q, D: Sequence[int]) -> Minorization:
    """Largest one-step minorization ``Q(x, .) >= eps nu`` over ``x`` in D."""
    Q = _as_matrix(Q)
    D = list(D)
    if not D:
        raise ValueError("D must be non-empty")
    m = Q[D].min(axis=0)
    eps = float(m.sum())
    if eps <= 0.0:
        raise SmallSetFailure("rows over D share no common mass")
    return Minorization(eps, m / eps)


@dataclass(frozen=True)
class TvDecay:
    n: np.ndarray
    tv: np.ndarray
    rate: float
    constant: float
    r_squared: float
    fit_points: int

    @property
    def decays(self) -> bool:
        return self.rate < 1.0

    def envelope_ratio(self) -> float:
        """``max TV(n) / (constant * rate**n)`` over the fit window."""
        w = self._window()
        if not w.any():
            return float("nan")
        return float(np.max(self.tv[w] / (self.constant * self.rate ** self.n[w])))

    def _window(self) -> np.ndarray:
        return (self.n >= 5) & (self.tv > 1e-12)


def tv_decay(kernel, pi_tilde: np.ndarray, start: int, n_max: int) -> TvDecay:
    """Total variation of ``delta_start R^n`` from ``pi_tilde`` and a log-linear fit.

    The fit uses ``n >= 5`` with ``TV > 1e-12``. ``rate`` is ``exp(slope)``;
    ``constant`` is the smallest C with ``TV(n) <= C rate^n`` on that window.
    A chain whose TV never leaves a plateau yields rate 1.
    """
    R = kernel.R if isinstance(kernel, DiscreteKktKernel) else _as_matrix(kernel)
    target = np.asarray(pi_tilde, float)
    v = np.zeros(R.shape[0])
    v[start] = 1.0
    ns = np.arange(1, n_max + 1)
    tv = np.empty(n_max)
    for k in range(n_max):
        v = v @ R
        tv[k] = 0.5 * np.abs(v - target).sum()
    w = (ns >= 5) & (tv > 1e-12)
    if w.sum() < 2:
        return TvDecay(ns, tv, 0.0, float(tv[0]), 1.0, int(w.sum()))
    x, y = ns[w].astype(float), np.log(tv[w])
    ss = float(np.sum((y - y.mean()) ** 2))
    if ss <= 1e-20 * y.size:
        # flat plateau: no decay at all
        slope, r2 = 0.0, 1.0
    else:
        slope, icept = np.polyfit(x, y, 1)
        resid = y - (slope * x + icept)
        r2 = 1.0 - float(resid @ resid) / ss
    rate = float(np.exp(slope))
    const = float(np.max(tv[w] * rate ** (-ns[w])))
    return TvDecay(ns, tv, rate, const, r2, int(w.sum()))


# ---------------------------------------------------------------------------
# Metropolis-Hastings written as a teleport process


def mh_acceptance_matrix(K, pi: np.ndarray) -> np.ndarray:
    """``min(1, pi(y) K(y, x) / (pi(x) K(x, y)))`` where ``K(x, y) > 0``, else 0."""
    K = _as_matrix(K)
    pi = np.asarray(pi, float)
    n = K.shape[0]
    acc = np.zeros((n, n))
    for x in range(n):
        for y in range(n):
            if K[x, y] > 0:
                num = pi[y] * K[y, x]
                den = pi[x] * K[x, y]
                acc[x, y] = 1.0 if num >= den else num / den
    return acc


def build_mh_kernel(K, pi: np.ndarray) -> DiscreteChain:
    K = _as_matrix(K)
    moves = K * mh_acceptance_matrix(K, pi)
    np.fill_diagonal(moves, 0.0)
    R = moves + np.diag(1.0 - moves.sum(axis=1))
    return DiscreteChain(R)


@dataclass(frozen=True)
class QAlpha:
    alpha: np.ndarray
    Q: np.ndarray
    undefined: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def build_q_alpha(K, pi: np.ndarray) -> QAlpha:
    """Overall acceptance probability per state and the accepted-move kernel.

    Rows where nothing can ever be accepted are flagged in ``undefined`` and
    filled with a self-loop.
    """
    K = _as_matrix(K)
    moves = K * mh_acceptance_matrix(K, pi)
    alpha = moves.sum(axis=1)
    undefined = alpha <= 0.0
    Q = np.where(undefined[:, None], np.eye(K.shape[0]),
                 moves / np.where(undefined, 1.0, alpha)[:, None])
    return QAlpha(alpha, Q, undefined)


@dataclass(frozen=True)
class MhEquivalence:
    max_discrepancy: float
    effective: np.ndarray
    mh: np.ndarray


def mh_gkkt_equivalence(K, pi: np.ndarray) -> MhEquivalence:
    """Y-marginal law of the identity-base teleport chain versus the MH kernel."""
    qa = build_q_alpha(K, pi)
    eff = np.diag(1.0 - qa.alpha) + qa.alpha[:, None] * qa.Q
    mh = build_mh_kernel(K, pi).P
    return MhEquivalence(float(np.max(np.abs(eff - mh))), eff, mh)


# ---------------------------------------------------------------------------
# instance generators


def random_chain(n: int, rng: np.random.Generator, floor: float = 0.0) -> DiscreteChain:
    """Row-normalised positive uniform matrix (irreducible and aperiodic)."""
    M = rng.random((n, n)) + floor
    return DiscreteChain(M / M.sum(axis=1, keepdims=True))


def random_subset(n: int, rng: np.random.Generator, min_size: int = 1,
                  max_size: int | None = None) -> tuple[int, ...]:
    max_size = n if max_size is None else max_size
    k = int(rng.integers(min_size, max_size + 1))
    return tuple(sorted(int(i) for i in rng.choice(n, size=k, replace=False)))


def block_chain(sizes: Sequence[int], rng: np.random.Generator) -> DiscreteChain:
    """Block-diagonal chain of disjoint irreducible blocks."""
    n = sum(sizes)
    P = np.zeros((n, n))
    i = 0
    for s in sizes:
        P[i:i + s, i:i + s] = random_chain(s, rng).P
        i += s
    return DiscreteChain(P)


def conditioned_mh_kernel(pi: np.ndarray, C: Sequence[int], rng: np.random.Generator) -> DiscreteChain:
    """A random kernel on C leaving pi conditioned on C invariant (MH with random proposals)."""
    C = list(C)
    pi_c = np.asarray(pi, float)[C]
    pi_c = pi_c / pi_c.sum()
    if len(C) == 1:
        return DiscreteChain(np.ones((1, 1)))
    return build_mh_kernel(random_chain(len(C), rng).P, pi_c)


def reversible_instance(n: int, C: Sequence[int], rng: np.random.Generator,
                        shared_rows: bool = True) -> tuple[DiscreteChain, np.ndarray]:
    """Reversible chain, optionally with all C-rows equal off C.

    Built from a symmetric weight matrix ``W``; the chain is ``W`` with rows
    normalised and its invariant law is proportional to the row sums. With
    ``shared_rows`` the C-to-outside weights factor as ``a_y mu_x`` and the
    C-to-C weights as ``s a_y a_y'`` so every C-row, once normalised, has the
    same restriction to the outside. Without it one such weight pair is
    perturbed symmetrically.
    """
    mask = _indicator(n, C)
    inn, out = np.flatnonzero(mask), np.flatnonzero(~mask)
    a = rng.random(inn.size) + 0.5
    mu = rng.random(out.size) + 0.5
    s = rng.random() + 0.5
    W = np.zeros((n, n))
    W[np.ix_(inn, inn)] = s * np.outer(a, a)
    W[np.ix_(inn, out)] = np.outer(a, mu)
    W[np.ix_(out, inn)] = W[np.ix_(inn, out)].T
    B = rng.random((out.size, out.size)) + 0.1
    W[np.ix_(out, out)] = B + B.T
    if not shared_rows:
        if inn.size < 2 or out.size < 1:
            raise ValueError("a broken instance needs |C| >= 2 and a non-empty complement")
        y, x = inn[0], out[0]
        W[y, x] *= 1.7
        W[x, y] = W[y, x]
    rows = W.sum(axis=1)
    pi = rows / rows.sum()
    return DiscreteChain(W / rows[:, None]), pi


# ---------------------------------------------------------------------------
# chain files


def read_chain_file(path) -> tuple[DiscreteChain, tuple[int, ...] | None]:
    """Parse a CSV transition matrix with an optional ``C: i,j,k`` line.

    Blank lines and ``#`` comments are ignored. Validation errors name the
    offending line.
    """
    rows: list[list[float]] = []
    C = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.upper().startswith("C:"):
            try:
                C = tuple(int(t) for t in line[2:].split(",") if t.strip())
            except ValueError as exc:
                raise ChainValidationError(f"{path}:{lineno}: bad subset line: {exc}") from None
            continue
        try:
            rows.append([float(t) for t in line.split(",")])
        except ValueError as exc:
            raise ChainValidationError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ChainValidationError(f"{path}: no matrix rows")
    n = len(rows)
    for i, r in enumerate(rows):
        if len(r) != n:
            raise ChainValidationError(f"{path}: row {i} has {len(r)} entries, expected {n}")
    try:
        chain = DiscreteChain(np.array(rows))
    except ChainValidationError as exc:
        raise ChainValidationError(f"{path}: {exc}") from None
    if C is not None and (not C or min(C) < 0 or max(C) >= n):
        raise ChainValidationError(f"{path}: subset {C} out of range for {n} states")
    return chain, C
