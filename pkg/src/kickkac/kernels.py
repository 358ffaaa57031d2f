"""Metropolis-Hastings base kernels: random walk, MALA and HMC.

Each ``*_step`` function is a pure function of ``(target, cfg, x, rng)``. The
randomness drawn per call is fixed (``d`` normals then one uniform) so runs are
reproducible under seeding and chains with a shared seed stay aligned.
Acceptance is decided in log space: ``log(u) < log_alpha``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import partial
from typing import Callable, NamedTuple

import numpy as np

from kickkac.targets import TargetDensity

KINDS = ("rwm", "mala", "hmc")


@dataclass(frozen=True)
class KernelConfig:
    kind: str
    sigma: float = 1.0
    gamma: float = 0.1
    delta_t: float = 0.1
    n_hmc: int = 10

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "rwm" and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.kind == "mala" and not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.kind == "hmc" and not (self.delta_t > 0 and self.n_hmc >= 1):
            raise ValueError("delta_t must be positive and n_hmc >= 1")


class StepOutcome(NamedTuple):
    state: np.ndarray
    accepted: bool
    log_alpha: float


Kernel = Callable[[np.ndarray, np.random.Generator], StepOutcome]


def _log_ratio(log_pi_x: float, log_pi_y: float, log_q_fwd: float, log_q_bwd: float) -> float:
    if log_pi_y == -math.inf or log_q_bwd == -math.inf:
        return -math.inf
    r = log_pi_y + log_q_bwd - log_pi_x - log_q_fwd
    if r != r:
        return -math.inf
    return min(0.0, r)


def mh_log_acceptance(target: TargetDensity, log_q_fwd: float, log_q_bwd: float,
                      x: np.ndarray, y: np.ndarray) -> float:
    """``min(0, log pi(y) + log r(y,x) - log pi(x) - log r(x,y))``."""
    logp = target.log_density_unnorm
    return _log_ratio(float(logp(x)), float(logp(y)), log_q_fwd, log_q_bwd)


def _decide(x, y, log_alpha, u) -> StepOutcome:
    if log_alpha == 0.0 or (u > 0.0 and math.log(u) < log_alpha):
        return StepOutcome(y, True, log_alpha)
    return StepOutcome(x, False, log_alpha)


def rwm_step(target: TargetDensity, cfg: KernelConfig, x: np.ndarray,
             rng: np.random.Generator) -> StepOutcome:
    xi = rng.standard_normal(target.dim)
    u = rng.random()
    y = x + cfg.sigma * xi
    logp = target.log_density_unnorm
    log_alpha = _log_ratio(float(logp(x)), float(logp(y)), 0.0, 0.0)
    return _decide(x, y, log_alpha, u)


def mala_log_proposal_density(target: TargetDensity, gamma: float, x: np.ndarray,
                              y: np.ndarray, grad_x: np.ndarray | None = None) -> float:
    """``log r_gamma(x, y)`` for the Euler-Maruyama Langevin proposal."""
    if grad_x is None:
        grad_x = target.grad_log_density(x)
    r = y - x - gamma * grad_x
    d = target.dim
    return -0.5 * d * math.log(4.0 * math.pi * gamma) - float(r @ r) / (4.0 * gamma)


def mala_step(target: TargetDensity, cfg: KernelConfig, x: np.ndarray,
              rng: np.random.Generator) -> StepOutcome:
    gamma = cfg.gamma
    xi = rng.standard_normal(target.dim)
    u = rng.random()
    grad = target.grad_log_density
    logp = target.log_density_unnorm
    g_x = grad(x)
    y = x + gamma * g_x + math.sqrt(2.0 * gamma) * xi
    log_pi_y = float(logp(y))
    if not math.isfinite(log_pi_y):
        return StepOutcome(x, False, -math.inf)
    g_y = grad(y)
    fwd = mala_log_proposal_density(target, gamma, x, y, g_x)
    bwd = mala_log_proposal_density(target, gamma, y, x, g_y)
    log_alpha = _log_ratio(float(logp(x)), log_pi_y, fwd, bwd)
    return _decide(x, y, log_alpha, u)


def verlet_step(target: TargetDensity, delta_t: float, x: np.ndarray,
                v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One position-Verlet (leapfrog) step for ``H(x, v) = -log pi(x) + |v|^2/2``."""
    grad = target.grad_log_density
    v_half = v + 0.5 * delta_t * grad(x)
    x_new = x + delta_t * v_half
    return x_new, v_half + 0.5 * delta_t * grad(x_new)


def hmc_trajectory(target: TargetDensity, delta_t: float, n_steps: int,
                   x: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``n_steps`` leapfrog steps, reusing each endpoint gradient (n_steps + 1 evaluations)."""
    grad = target.grad_log_density
    half = 0.5 * delta_t
    g = grad(x)
    for _ in range(n_steps):
        v = v + half * g
        x = x + delta_t * v
        g = grad(x)
        v = v + half * g
    return x, v


def hmc_step(target: TargetDensity, cfg: KernelConfig, x: np.ndarray,
             rng: np.random.Generator) -> StepOutcome:
    v0 = rng.standard_normal(target.dim)
    u = rng.random()
    logp = target.log_density_unnorm
    h0 = -float(logp(x)) + 0.5 * float(v0 @ v0)
    with np.errstate(over="ignore", invalid="ignore"):
        x1, v1 = hmc_trajectory(target, cfg.delta_t, cfg.n_hmc, x, v0)
        if not (np.all(np.isfinite(x1)) and np.all(np.isfinite(v1))):
            return StepOutcome(x, False, -math.inf)
        h1 = -float(logp(x1)) + 0.5 * float(v1 @ v1)
    if not math.isfinite(h1):
        return StepOutcome(x, False, -math.inf)
    log_alpha = min(0.0, h0 - h1)
    return _decide(x, x1, log_alpha, u)


_STEPS = {"rwm": rwm_step, "mala": mala_step, "hmc": hmc_step}


def make_kernel(target: TargetDensity, cfg: KernelConfig) -> Kernel:
    """Bind a target and config into a ``(x, rng) -> StepOutcome`` callable."""
    return partial(_STEPS[cfg.kind], target, cfg)


def identity_kernel(x, rng) -> StepOutcome:
    return StepOutcome(x, True, 0.0)


def tune_step_size(target: TargetDensity, cfg: KernelConfig, x0: np.ndarray,
                   rng: np.random.Generator, target_accept: float,
                   n_rounds: int = 30, round_len: int = 100) -> tuple[KernelConfig, float]:
    """Pre-run stochastic approximation on the log step size.

    Adjusts ``sigma`` (RWM), ``gamma`` (MALA) or ``delta_t`` (HMC) so that the
    empirical acceptance rate approaches ``target_accept``. Returns the tuned
    config and the acceptance rate measured over the final round.
    """
    attr = {"rwm": "sigma", "mala": "gamma", "hmc": "delta_t"}[cfg.kind]
    log_h = math.log(getattr(cfg, attr))
    x = np.asarray(x0, float)
    rate = 0.0
    for r in range(n_rounds):
        cur = replace(cfg, **{attr: math.exp(log_h)})
        kernel = make_kernel(target, cur)
        acc = 0
        for _ in range(round_len):
            out = kernel(x, rng)
            x = out.state
            acc += out.accepted
        rate = acc / round_len
        log_h += (rate - target_accept) * 2.0 / math.sqrt(r + 1.0)
    return replace(cfg, **{attr: math.exp(log_h)}), rate
