"""Kick-Kac teleportation samplers.

A step function maps ``(state, rng) -> state`` where ``state`` is a
:class:`KktState`. Kernels are callables ``(x, rng) -> StepOutcome`` (see
:mod:`kickkac.kernels`), so the same step functions drive continuous targets
and finite-state chains.

Randomness is consumed in a fixed order within a step: base proposal draws,
base accept uniform, teleport Bernoulli uniform (only when ``0 < alpha < 1``),
then teleport-kernel draws.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from kickkac.kernels import Kernel, KernelConfig, StepOutcome, make_kernel
from kickkac.targets import AlphaFunction, CriticalRegion, EnvelopeRegion, TargetDensity

DEFAULT_MAX_TRIALS = 10_000_000

EXACT_PI_C = "exact_pi_c"
KERNEL_Q = "kernel_q"


@dataclass(frozen=True, slots=True)
class KktState:
    """State ``(Y_k, Z_k)`` plus what happened on the step that produced it."""

    y: Any
    z: Any
    step_index: int = 0
    teleported: bool = False
    candidate_accepted: bool = False
    q_accepted: bool = False

    @property
    def accepted(self) -> bool:
        """Acceptance of the move that produced ``y`` (teleport move if teleported)."""
        return self.q_accepted if self.teleported else self.candidate_accepted


@dataclass(frozen=True)
class TeleportSpec:
    mode: str
    region: CriticalRegion | AlphaFunction

    def __post_init__(self):
        if self.mode not in (EXACT_PI_C, KERNEL_Q):
            raise ValueError(f"unknown teleport mode {self.mode!r}")
        if self.mode == EXACT_PI_C and not isinstance(self.region, EnvelopeRegion):
            raise ValueError("exact pi_C sampling needs an envelope region")


@dataclass
class RejectionStats:
    draws: int = 0
    rejections: int = 0
    accepts: int = 0

    @property
    def mean_rejections_per_accept(self) -> float:
        return self.rejections / max(1, self.accepts)


class RejectionCapExceeded(RuntimeError):
    def __init__(self, stats: RejectionStats, max_trials: int):
        super().__init__(f"no acceptance within {max_trials} trials "
                         f"({stats.draws} draws so far); envelope is probably mis-specified")
        self.stats = stats
        self.max_trials = max_trials


def _batched(fn, xs: np.ndarray) -> np.ndarray:
    out = np.asarray(fn(xs), dtype=float)
    if out.shape != xs.shape[:1]:
        out = np.array([float(fn(x)) for x in xs])
    return out


def rejection_sample(log_accept: Callable[[np.ndarray], np.ndarray],
                     propose: Callable[[np.random.Generator, int], np.ndarray],
                     rng: np.random.Generator, stats: RejectionStats | None = None,
                     max_trials: int = DEFAULT_MAX_TRIALS, batch: int = 128):
    """Generic accept-reject loop on batches of proposals.

    ``log_accept`` maps a batch of candidates to log acceptance probabilities
    (``<= 0``). Trials are counted up to and including the first acceptance;
    candidates drawn after it in the same batch are discarded uncounted.
    """
    stats = RejectionStats() if stats is None else stats
    trials = 0
    while trials < max_trials:
        m = min(batch, max_trials - trials)
        xs = propose(rng, m)
        u = rng.random(m)
        la = _batched(log_accept, xs)
        with np.errstate(divide="ignore"):
            hit = np.flatnonzero(np.log(u) < la)
        if hit.size:
            i = int(hit[0])
            trials += i + 1
            stats.draws += i + 1
            stats.rejections += i
            stats.accepts += 1
            return xs[i], stats
        trials += m
        stats.draws += m
        stats.rejections += m
    raise RejectionCapExceeded(stats, max_trials)


def rejection_sample_pi_c(region: EnvelopeRegion, target: TargetDensity,
                          rng: np.random.Generator, max_trials: int = DEFAULT_MAX_TRIALS,
                          stats: RejectionStats | None = None, batch: int = 128):
    """Exact draw from ``pi_C``: propose from q, accept w.p. ``1_C pi / (c q)``."""
    if not isinstance(region, EnvelopeRegion):
        raise TypeError("rejection sampling from pi_C needs an EnvelopeRegion")
    logp = target.log_density_unnorm
    log_q = region.instr_log_density
    box = region.box

    def log_accept(xs):
        lp = _batched(logp, xs)
        le = region.log_c + _batched(log_q, xs)
        inside = np.asarray(box.inside(xs)) & (lp <= le)
        with np.errstate(invalid="ignore"):
            return np.where(inside, lp - le, -np.inf)

    return rejection_sample(log_accept, region.instr_sample, rng, stats, max_trials, batch)


def hybrid_reentry(target: TargetDensity, phi_log_density, phi_sample, log_c: float,
                   max_trials: int = DEFAULT_MAX_TRIALS, stats: RejectionStats | None = None):
    """Alpha function and exact re-entry sampler for the hybrid (regeneration) scheme.

    Re-entry draws have density proportional to ``min(c phi, pi)`` and the
    matching teleport probability is ``alpha = min(1, c phi / pi)``.
    Returns ``(alpha, sample, stats)`` with ``sample(rng) -> x``.
    """
    logp = target.log_density_unnorm
    stats = RejectionStats() if stats is None else stats

    def raw(x):
        lp = float(logp(x))
        return math.exp(min(0.0, log_c + float(phi_log_density(x)) - lp))

    def log_accept(xs):
        lp = _batched(logp, xs)
        return np.minimum(0.0, lp - log_c - _batched(phi_log_density, xs))

    def sample(rng):
        return rejection_sample(log_accept, phi_sample, rng, stats, max_trials)[0]

    return AlphaFunction(raw, "min(1, c phi / pi)"), sample, stats


# ---------------------------------------------------------------------------
# step functions


def memoryless_kkt_step(base: Kernel, region: CriticalRegion,
                        sample_pi_c: Callable[[np.random.Generator], Any],
                        state: KktState, rng: np.random.Generator) -> KktState:
    """Base move; a candidate landing in C is replaced by a fresh ``pi_C`` draw."""
    out = base(state.y, rng)
    k = state.step_index + 1
    if not region.contains(out.state):
        return KktState(out.state, state.z, k, False, out.accepted)
    x = sample_pi_c(rng)
    return KktState(x, x, k, True, out.accepted, True)


def kkt_step(base: Kernel, q_kernel: Kernel, region: CriticalRegion,
             state: KktState, rng: np.random.Generator) -> KktState:
    """Base move; a candidate landing in C triggers a Q move of the anchor."""
    out = base(state.y, rng)
    k = state.step_index + 1
    if not region.contains(out.state):
        return KktState(out.state, state.z, k, False, out.accepted)
    q = q_kernel(state.z, rng)
    return KktState(q.state, q.state, k, True, out.accepted, q.accepted)


def _bernoulli(a: float, rng: np.random.Generator) -> bool:
    if a >= 1.0:
        return True
    if a <= 0.0:
        return False
    return rng.random() < a


def gkkt_step(base: Kernel, q_kernel: Kernel, alpha: AlphaFunction,
              state: KktState, rng: np.random.Generator) -> KktState:
    """General KKT: teleport with probability ``alpha(Y*)``.

    ``q_kernel`` must leave the tilted law ``alpha * pi`` invariant. A
    zero-or-one alpha consumes no randomness, so ``alpha = 1_C`` reproduces
    :func:`kkt_step` draw for draw.
    """
    out = base(state.y, rng)
    k = state.step_index + 1
    if not _bernoulli(alpha(out.state), rng):
        return KktState(out.state, state.z, k, False, out.accepted)
    q = q_kernel(state.z, rng)
    if not alpha(q.state) > 0.0:
        raise AssertionError("teleport kernel moved to a point with alpha = 0")
    return KktState(q.state, q.state, k, True, out.accepted, q.accepted)


def memoryless_gkkt_step(base: Kernel, alpha: AlphaFunction,
                         sample_tilde: Callable[[np.random.Generator], Any],
                         state: KktState, rng: np.random.Generator) -> KktState:
    """General KKT with the teleport move replaced by an exact re-entry draw."""
    out = base(state.y, rng)
    k = state.step_index + 1
    if not _bernoulli(alpha(out.state), rng):
        return KktState(out.state, state.z, k, False, out.accepted)
    x = sample_tilde(rng)
    return KktState(x, x, k, True, out.accepted, True)


def base_chain_step(base: Kernel, state: KktState, rng: np.random.Generator) -> KktState:
    """A plain base-kernel step carried in a KktState (never teleports)."""
    out = base(state.y, rng)
    return KktState(out.state, state.z, state.step_index + 1, False, out.accepted)


# ---------------------------------------------------------------------------
# Metropolis-Hastings as a general KKT process


def mh_gkkt_step(attempt: Kernel, state: KktState, rng: np.random.Generator) -> KktState:
    """One step with identity base kernel; an accepted MH attempt is the teleport.

    Acceptance has probability ``alpha_MH(Y)`` and an accepted candidate has
    law ``Q_alpha(Y, .)``, so one attempt realises both the Bernoulli and the
    teleport draw.
    """
    out = attempt(state.y, rng)
    k = state.step_index + 1
    if out.accepted:
        return KktState(out.state, out.state, k, True, True, True)
    return KktState(state.y, state.z, k, False, True)


@dataclass
class MhGkktTrace:
    y: np.ndarray
    teleported: np.ndarray

    @property
    def acceptance_rate(self) -> float:
        return float(self.teleported.mean())


def mh_as_gkkt_chain(target: TargetDensity, proposal: KernelConfig, n: int,
                     x0: np.ndarray, rng: np.random.Generator) -> MhGkktTrace:
    """Run MH written as a general KKT process with identity base kernel.

    The Bernoulli(alpha_MH(Y)) teleport decision and the Q_alpha draw are
    realised jointly by one proposal + accept test: acceptance has probability
    ``alpha_MH(Y)`` and, given acceptance, the candidate has law ``Q_alpha(Y, .)``.
    """
    if proposal.kind not in ("rwm", "mala"):
        raise ValueError("proposal must be rwm or mala")
    attempt = make_kernel(target, proposal)
    x = np.asarray(x0, float)
    state = KktState(x, x)
    ys = np.empty((n, x.size))
    tele = np.zeros(n, dtype=bool)
    for k in range(n):
        state = mh_gkkt_step(attempt, state, rng)
        ys[k] = state.y
        tele[k] = state.teleported
    return MhGkktTrace(ys, tele)


def mh_as_gkkt_discrete(K: np.ndarray, pi: np.ndarray, n: int, x0: int,
                        rng: np.random.Generator) -> MhGkktTrace:
    """Literal finite-state version: draw ``B ~ Bernoulli(alpha_MH(Y))`` exactly,
    then draw ``Z ~ Q_alpha(Z, .)`` by rejection (propose from K, accept with
    the MH ratio)."""
    K = np.asarray(K, float)
    pi = np.asarray(pi, float)
    acc = _mh_ratio(K, pi)
    alpha_mh = np.sum(K * acc, axis=1)
    cum = np.cumsum(K, axis=1)
    y = int(x0)
    ys = np.empty((n, 1))
    tele = np.zeros(n, dtype=bool)
    for k in range(n):
        if rng.random() < alpha_mh[y]:
            while True:
                cand = _draw_row(cum[y], rng.random())
                if rng.random() < acc[y, cand]:
                    break
            y = cand
            tele[k] = True
        ys[k, 0] = y
    return MhGkktTrace(ys, tele)


def _mh_ratio(K: np.ndarray, pi: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (pi[None, :] * K.T) / (pi[:, None] * K)
    return np.where(K > 0, np.minimum(1.0, np.nan_to_num(r, nan=0.0, posinf=1.0)), 0.0)


# ---------------------------------------------------------------------------
# finite-state kernels and regions


def _draw_row(cum_row: np.ndarray, u: float) -> int:
    j = int(np.searchsorted(cum_row, u * cum_row[-1], side="right"))
    return min(j, cum_row.size - 1)


def matrix_kernel(P: np.ndarray, states: np.ndarray | None = None) -> Kernel:
    """Kernel drawing the next state from row ``x`` of a stochastic matrix.

    With ``states`` given, P is indexed by position in ``states`` while the
    chain carries the labels themselves (e.g. a Q matrix over the set C).
    """
    cum = np.cumsum(np.asarray(P, float), axis=1)
    if states is None:
        def step(x, rng):
            return StepOutcome(_draw_row(cum[x], rng.random()), True, 0.0)
        return step
    labels = [int(s) for s in states]
    pos = {s: i for i, s in enumerate(labels)}

    def step(x, rng):
        return StepOutcome(labels[_draw_row(cum[pos[x]], rng.random())], True, 0.0)

    return step


def finite_mh_kernel(K: np.ndarray, pi: np.ndarray) -> Kernel:
    """Metropolis-Hastings on a finite space: propose from K, accept with the usual MH ratio."""
    K = np.asarray(K, float)
    acc = _mh_ratio(K, np.asarray(pi, float))
    cum = np.cumsum(K, axis=1)

    def step(x, rng):
        y = _draw_row(cum[x], rng.random())
        a = acc[x, y]
        if rng.random() < a:
            return StepOutcome(y, True, math.log(a))
        return StepOutcome(x, False, math.log(a) if a > 0 else -math.inf)

    return step


def subset_region(C) -> CriticalRegion:
    members = frozenset(int(c) for c in C)
    return CriticalRegion(lambda x: int(x) in members, f"C={sorted(members)}")


# ---------------------------------------------------------------------------
# chain driver


class SinkError(RuntimeError):
    def __init__(self, step_index: int, cause: BaseException):
        super().__init__(f"trace sink failed at step {step_index}: {cause}")
        self.step_index = step_index


@dataclass
class EvalCounter:
    density: int = 0
    grad: int = 0


def counted(target: TargetDensity, counter: EvalCounter | None = None):
    """Wrap a target so that every density/gradient evaluation is counted."""
    counter = EvalCounter() if counter is None else counter
    logp = target.log_density_unnorm
    grad = target.grad_log_density

    def log_density(x):
        counter.density += 1
        return logp(x)

    def grad_log_density(x):
        counter.grad += 1
        return grad(x)

    wrapped = TargetDensity(target.dim, log_density,
                            None if grad is None else grad_log_density, target.label)
    return wrapped, counter


@dataclass
class ChainSummary:
    n_steps: int
    n_teleports: int
    n_base_accepts: int
    n_q_accepts: int
    density_evals: int
    grad_evals: int
    wall_time: float
    final: KktState = field(repr=False, default=None)


def run_chain(stepper: Callable[[KktState, np.random.Generator], KktState], n: int,
              initial: KktState, rng: np.random.Generator,
              sink: Callable[[KktState], None] | None = None,
              counter: EvalCounter | None = None) -> ChainSummary:
    """Iterate ``stepper`` n times, streaming every state to ``sink``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    d0 = counter.density if counter else 0
    g0 = counter.grad if counter else 0
    tele = base_acc = q_acc = 0
    state = initial
    t0 = time.perf_counter()
    for _ in range(n):
        state = stepper(state, rng)
        if state.teleported:
            tele += 1
            q_acc += state.q_accepted
        else:
            base_acc += state.candidate_accepted
        if sink is not None:
            try:
                sink(state)
            except Exception as exc:
                raise SinkError(state.step_index, exc) from exc
    wall = time.perf_counter() - t0
    return ChainSummary(n, tele, base_acc, q_acc,
                        (counter.density - d0) if counter else 0,
                        (counter.grad - g0) if counter else 0, wall, state)


class ArrayRecorder:
    """Sink keeping ``y`` and flags in preallocated arrays."""

    def __init__(self, n: int, dim: int):
        self.y = np.empty((n, dim))
        self.z = np.empty((n, dim))
        self.teleported = np.zeros(n, dtype=bool)
        self.accepted = np.zeros(n, dtype=bool)
        self.i = 0

    def __call__(self, state: KktState) -> None:
        i = self.i
        self.y[i] = state.y
        self.z[i] = state.z
        self.teleported[i] = state.teleported
        self.accepted[i] = state.accepted
        self.i = i + 1


def initial_anchor(region: CriticalRegion, rng: np.random.Generator, center: np.ndarray,
                   scale: float = 1.0, max_tries: int = 100_000) -> np.ndarray:
    """Find a point in C by Gaussian perturbation of ``center`` with growing scale."""
    center = np.asarray(center, float)
    if region.contains(center):
        return center
    s = scale
    for i in range(max_tries):
        x = center + s * rng.standard_normal(center.size)
        if region.contains(x):
            return x
        if i % 100 == 99:
            s *= 1.5
    raise RuntimeError("could not find an initial point inside the critical region")
