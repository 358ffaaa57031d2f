"""Trace diagnostics: effective sample size, occupancy, grid TV and the embedded teleport chain."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from itertools import product
from typing import Callable, NamedTuple, Sequence

import numpy as np

MIN_ESS_LENGTH = 100


class EssEstimate(NamedTuple):
    value: float
    degenerate: bool
    clipped: bool


def autocorrelation(x: np.ndarray) -> np.ndarray:
    """Normalised autocorrelation (biased 1/n autocovariance) by FFT."""
    x = np.asarray(x, float)
    n = x.size
    c = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    freq = np.fft.rfft(c, size)
    acov = np.fft.irfft(freq * np.conj(freq), size)[:n] / n
    return acov / acov[0]


def ess_estimate(series) -> EssEstimate:
    """ESS with Geyer's initial positive sequence truncation.

    Pair sums of autocorrelations are accumulated while positive. A constant
    series is degenerate and gets 0; estimates above the series length are
    clipped to it.
    """
    x = np.asarray(series, float).ravel()
    n = x.size
    if n < MIN_ESS_LENGTH:
        raise ValueError(f"need at least {MIN_ESS_LENGTH} values, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    if np.ptp(x) == 0.0:
        return EssEstimate(0.0, True, False)
    rho = autocorrelation(x)
    m = (n - 1) // 2
    pairs = rho[0:2 * m:2] + rho[1:2 * m:2]
    stop = np.flatnonzero(pairs <= 0.0)
    kept = pairs[: stop[0]] if stop.size else pairs
    tau = -1.0 + 2.0 * float(kept.sum())
    if tau <= 0.0 or n / tau > n:
        return EssEstimate(float(n), False, True)
    return EssEstimate(n / tau, False, False)


def ess(series) -> float:
    return ess_estimate(series).value


def _stats(v: np.ndarray) -> dict:
    return {"mean": float(np.mean(v)), "variance": float(np.var(v)),
            "min": float(np.min(v)), "max": float(np.max(v))}


@dataclass
class EssReport:
    per_coordinate_ess: np.ndarray
    ess_per_density_eval: np.ndarray
    ess_per_grad_eval: np.ndarray
    ess_per_eval: np.ndarray
    degenerate: np.ndarray
    clipped: np.ndarray

    @classmethod
    def from_trace(cls, samples: np.ndarray, density_evals: int = 0,
                   grad_evals: int = 0) -> "EssReport":
        """ESS of every column; per-evaluation rates divide by the evaluation totals.

        A zero count gives NaN for the matching rate.
        """
        samples = np.asarray(samples, float)
        if samples.ndim == 1:
            samples = samples[:, None]
        est = [ess_estimate(samples[:, j]) for j in range(samples.shape[1])]
        e = np.array([r.value for r in est])

        def per(count):
            return e / count if count > 0 else np.full_like(e, np.nan)

        return cls(e, per(density_evals), per(grad_evals), per(density_evals + grad_evals),
                   np.array([r.degenerate for r in est]), np.array([r.clipped for r in est]))

    def summary(self) -> dict:
        out = {"ess": _stats(self.per_coordinate_ess)}
        for name in ("ess_per_density_eval", "ess_per_grad_eval", "ess_per_eval"):
            v = getattr(self, name)
            out[name] = _stats(v) if np.all(np.isfinite(v)) else None
        return out

    def to_json(self) -> dict:
        def arr(v):
            return [None if not math.isfinite(float(t)) else float(t) for t in v]
        return {"per_coordinate_ess": arr(self.per_coordinate_ess),
                "ess_per_density_eval": arr(self.ess_per_density_eval),
                "ess_per_grad_eval": arr(self.ess_per_grad_eval),
                "ess_per_eval": arr(self.ess_per_eval),
                "degenerate": self.degenerate.tolist(), "clipped": self.clipped.tolist(),
                "summary": self.summary()}


@dataclass(frozen=True)
class TraceSummary:
    n_steps: int
    n_teleports: int
    teleport_fraction: float
    base_accept_rate: float
    q_accept_rate: float
    density_evals: int
    grad_evals: int
    seed: int | None

    @classmethod
    def from_flags(cls, teleported: np.ndarray, accepted: np.ndarray, density_evals: int = 0,
                   grad_evals: int = 0, seed: int | None = None) -> "TraceSummary":
        """Rates from per-step flags; ``accepted`` refers to the move that produced each state.

        Base acceptance is measured over non-teleport steps and teleport
        acceptance over teleport steps, so both are recoverable from a trace.
        """
        tele = np.asarray(teleported, bool)
        acc = np.asarray(accepted, bool)
        n = tele.size
        k = int(tele.sum())
        base = float(acc[~tele].mean()) if k < n else float("nan")
        q = float(acc[tele].mean()) if k else float("nan")
        return cls(n, k, k / n, base, q, int(density_evals), int(grad_evals), seed)

    def to_json(self) -> dict:
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                for k, v in asdict(self).items()}


def _apply(region: Callable, samples: np.ndarray) -> np.ndarray:
    out = np.asarray(region(samples))
    if out.shape != samples.shape[:1]:
        out = np.array([bool(region(x)) for x in samples])
    return out.astype(bool)


def mode_weights(samples: np.ndarray, partitions: Sequence[Callable]) -> np.ndarray:
    """Fraction of samples falling in each (disjoint) region.

    Regions are callables on a batch of points returning booleans, or on a
    single point (detected automatically).
    """
    samples = np.asarray(samples, float)
    if samples.ndim == 1:
        samples = samples[:, None]
    return np.array([_apply(r, samples).mean() for r in partitions])


def half_plane(axis: int = 0, positive: bool = True) -> Callable:
    def region(x):
        x = np.asarray(x, float)
        return x[..., axis] > 0 if positive else x[..., axis] <= 0
    return region


def bin_masses(log_density: Callable, edges: Sequence[np.ndarray], subgrid: int = 10) -> np.ndarray:
    """Normalised target mass per bin by the tensor-product midpoint rule.

    Each bin is split into ``subgrid`` cells per axis. Masses are renormalised
    to sum to one over the grid.
    """
    fine_mids, widths = [], []
    for e in edges:
        e = np.asarray(e, float)
        fine = np.concatenate([np.linspace(a, b, subgrid + 1)[:-1] for a, b in zip(e[:-1], e[1:])]
                              + [e[-1:]])
        fine_mids.append(0.5 * (fine[1:] + fine[:-1]))
        widths.append(np.diff(fine))
    mesh = np.meshgrid(*fine_mids, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    lp = np.asarray(log_density(pts), float)
    if lp.shape != pts.shape[:1]:
        lp = np.array([float(log_density(p)) for p in pts])
    vol = np.ones(())
    for w in widths:
        vol = np.multiply.outer(vol, w)
    dens = np.exp(lp - lp.max()).reshape(vol.shape) * vol
    for axis, e in enumerate(edges):
        nb = len(e) - 1
        shape = dens.shape
        dens = dens.reshape(shape[:axis] + (nb, subgrid) + shape[axis + 1:]).sum(axis=axis + 1)
    return dens / dens.sum()


def grid_tv(samples: np.ndarray, log_density: Callable, edges: Sequence[np.ndarray],
            subgrid: int = 10) -> float:
    """Half L1 distance between the sample histogram and target bin masses.

    Samples outside the grid count as misplaced mass.
    """
    samples = np.asarray(samples, float)
    if samples.ndim == 1:
        samples = samples[:, None]
    counts, _ = np.histogramdd(samples, bins=[np.asarray(e, float) for e in edges])
    emp = counts / samples.shape[0]
    outside = max(0.0, 1.0 - float(emp.sum()))
    exact = bin_masses(log_density, edges, subgrid)
    return 0.5 * (float(np.abs(emp - exact).sum()) + outside)


def occupancy_tv(states: np.ndarray, probs: np.ndarray) -> float:
    """TV between the empirical law of integer-labelled states and ``probs``."""
    probs = np.asarray(probs, float)
    counts = np.bincount(np.asarray(states, int).ravel(), minlength=probs.size)
    return 0.5 * float(np.abs(counts / counts.sum() - probs).sum())


@dataclass
class EmbeddedChainReport:
    empirical: np.ndarray
    counts: np.ndarray
    max_deviation: float
    chi_square: np.ndarray
    n_events: int
    underpowered: bool


def embedded_chain_test(z: np.ndarray, teleported: np.ndarray, Q: np.ndarray,
                        C_labels: Sequence[int], initial_anchor: int | None = None) -> EmbeddedChainReport:
    """Compare transitions of the anchor sequence at teleport times with Q.

    ``z`` holds the anchor after each step. With ``initial_anchor`` the move
    out of the starting anchor is counted too. Rows never visited are
    excluded from the maximum deviation.
    """
    Q = np.asarray(Q, float)
    labels = [int(c) for c in C_labels]
    pos = {c: i for i, c in enumerate(labels)}
    seq = [int(v) for v in np.asarray(z).ravel()[np.asarray(teleported, bool)]]
    if initial_anchor is not None:
        seq = [int(initial_anchor)] + seq
    m = len(labels)
    counts = np.zeros((m, m))
    for a, b in zip(seq[:-1], seq[1:]):
        counts[pos[a], pos[b]] += 1
    totals = counts.sum(axis=1)
    seen = totals > 0
    emp = np.divide(counts, totals[:, None], out=np.zeros_like(counts), where=seen[:, None])
    dev = float(np.max(np.abs(emp - Q)[seen])) if seen.any() else float("nan")
    expected = totals[:, None] * Q
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(expected > 0, (counts - expected) ** 2 / expected, 0.0)
    n_events = max(0, len(seq) - 1)
    return EmbeddedChainReport(emp, counts, dev, terms.sum(axis=1), n_events, n_events < 100)


def regular_edges(lo: Sequence[float], hi: Sequence[float], bins: Sequence[int]) -> list[np.ndarray]:
    return [np.linspace(a, b, k + 1) for a, b, k in zip(lo, hi, bins)]


def histogram_rows(samples: np.ndarray, edges: Sequence[np.ndarray]):
    """Rows ``(lower edges..., upper edges..., mass)`` of a gridded histogram."""
    samples = np.asarray(samples, float)
    counts, _ = np.histogramdd(samples, bins=[np.asarray(e, float) for e in edges])
    mass = counts / samples.shape[0]
    for idx in product(*(range(len(e) - 1) for e in edges)):
        lows = [float(edges[a][i]) for a, i in enumerate(idx)]
        highs = [float(edges[a][i + 1]) for a, i in enumerate(idx)]
        yield (*lows, *highs, float(mass[idx]))
