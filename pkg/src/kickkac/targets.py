"""Target densities, critical regions and alpha functions.

Every density here works in natural-log space. Two-dimensional targets accept
batched input of shape ``(..., 2)`` so that rejection samplers and grid
quadrature can evaluate many points at once; the high-dimensional targets
(stochastic volatility, Ginzburg-Landau) take a single flat vector.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Sequence

import numpy as np
from scipy.signal import lfilter
from scipy.special import expit, gamma as gamma_fn, logsumexp

LogDensity = Callable[[np.ndarray], "float | np.ndarray"]
Gradient = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TargetDensity:
    """Unnormalized log-density on R^dim with an optional exact gradient."""

    dim: int
    log_density_unnorm: LogDensity
    grad_log_density: Gradient | None = None
    label: str = "target"

    def restricted(self, region: CriticalRegion) -> TargetDensity:
        """The density ``1_C * pi`` (``-inf`` outside the region)."""

        logp = self.log_density_unnorm
        by_level = region.contains_log_density

        def log_density(x):
            if by_level is not None:
                lp = logp(x)
                return lp if by_level(lp) else -math.inf
            if not region.contains(x):
                return -math.inf
            return logp(x)

        return TargetDensity(self.dim, log_density, self.grad_log_density,
                             f"{self.label}|{region.description}")

    def tilted(self, alpha: AlphaFunction) -> TargetDensity:
        """The density proportional to ``alpha * pi``."""

        def log_density(x):
            a = alpha(x)
            if a <= 0.0:
                return -math.inf
            return self.log_density_unnorm(x) + math.log(a)

        return TargetDensity(self.dim, log_density, None,
                             f"{self.label}*{alpha.description}")


@dataclass(frozen=True)
class CriticalRegion:
    contains: Callable[[np.ndarray], bool]
    description: str = "C"
    # For level sets of the target: membership as a function of log pi alone,
    # which lets restricted densities evaluate the target once.
    contains_log_density: Callable[[float], bool] | None = None


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lower, upper]`` (closed)."""

    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def cube(cls, lo: float, hi: float, dim: int) -> Box:
        return cls(np.full(dim, float(lo)), np.full(dim, float(hi)))

    @property
    def log_volume(self) -> float:
        return float(np.sum(np.log(self.upper - self.lower)))

    def inside(self, x: np.ndarray) -> np.ndarray | bool:
        x = np.asarray(x)
        return np.all((x >= self.lower) & (x <= self.upper), axis=-1)

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        shape = (len(self.lower),) if size is None else (size, len(self.lower))
        return self.lower + (self.upper - self.lower) * rng.random(shape)


@dataclass(frozen=True)
class EnvelopeRegion(CriticalRegion):
    """``C = {x in box : pi(x) <= c q(x)}`` with q an instrumental density.

    Carries everything rejection sampling from ``pi_C`` needs. ``instr_sample``
    draws ``size`` points from q; the default instrumental is uniform on the box.
    """

    target: TargetDensity | None = None
    instr_log_density: LogDensity | None = None
    instr_sample: Callable[[np.random.Generator, int], np.ndarray] | None = None
    log_c: float = 0.0
    box: Box | None = None

    def log_envelope(self, x: np.ndarray) -> np.ndarray | float:
        return self.log_c + self.instr_log_density(x)


@dataclass(frozen=True)
class AlphaFunction:
    """A [0, 1]-valued function driving probabilistic teleportation.

    Values are clamped to [0, 1]; ``clamp_events`` counts how many evaluations
    had to be clamped (a value above one means the caller's density bound was
    wrong).
    """

    raw: Callable[[np.ndarray], float]
    description: str = "alpha"
    _clamps: list = field(default_factory=lambda: [0], repr=False, compare=False)

    def __call__(self, x: np.ndarray) -> float:
        a = self.raw(x)
        if a > 1.0:
            self._clamps[0] += 1
            return 1.0
        if a < 0.0 or a != a:
            self._clamps[0] += 1
            return 0.0
        return a

    alpha = __call__

    @property
    def clamp_events(self) -> int:
        return self._clamps[0]

    @classmethod
    def from_region(cls, region: CriticalRegion) -> AlphaFunction:
        return cls(lambda x: 1.0 if region.contains(x) else 0.0,
                   f"1[{region.description}]")

    @classmethod
    def constant(cls, value: float) -> AlphaFunction:
        return cls(lambda x: value, f"const({value})")


# ---------------------------------------------------------------------------
# regions and alpha constructors


def level_set_region(target: TargetDensity, threshold: float) -> CriticalRegion:
    """``C = {x : -log pi_u(x) > threshold}``; boundary points are outside C."""
    if not math.isfinite(threshold):
        raise ValueError("threshold must be finite")
    logp = target.log_density_unnorm

    def contains(x):
        return bool(-logp(x) > threshold)

    return CriticalRegion(contains, f"-log pi > {threshold:g}",
                          lambda lp: bool(-lp > threshold))


def envelope_region(target: TargetDensity, instr_log_density: LogDensity,
                    log_c: float, box: Box,
                    instr_sample: Callable | None = None) -> EnvelopeRegion:
    """``C = {x in box : log pi(x) <= log c + log q(x)}``.

    ``target`` must be normalized for the envelope constant to mean what it
    says. With ``instr_sample=None`` the instrumental is taken to be uniform on
    ``box``.
    """
    logp = target.log_density_unnorm
    if instr_sample is None:
        instr_sample = box.sample

    def contains(x):
        x = np.asarray(x)
        if not box.inside(x):
            return False
        return bool(logp(x) <= log_c + instr_log_density(x))

    return EnvelopeRegion(contains, f"pi <= {math.exp(log_c):.4g} q on box",
                          target=target, instr_log_density=instr_log_density,
                          instr_sample=instr_sample, log_c=log_c, box=box)


def uniform_log_density(box: Box) -> LogDensity:
    log_vol = box.log_volume

    def log_q(x):
        inside = box.inside(x)
        return np.where(inside, -log_vol, -np.inf) if np.ndim(inside) else (
            -log_vol if inside else -math.inf)

    return log_q


def alpha_from_unnormalized(target_unnorm: TargetDensity, tilde_unnorm: TargetDensity,
                            log_Mu: float) -> AlphaFunction:
    """``alpha = exp(log tilde_u - log pi_u - log M_u)``, computed in log space."""
    logp = target_unnorm.log_density_unnorm
    logt = tilde_unnorm.log_density_unnorm

    def raw(x):
        lt = logt(x)
        if lt == -math.inf:
            return 0.0
        r = lt - logp(x) - log_Mu
        # anything above zero is clamped to one by AlphaFunction anyway
        return math.inf if r > 700.0 else math.exp(r)

    return AlphaFunction(raw, f"d{tilde_unnorm.label}/d{target_unnorm.label}/M")


# ---------------------------------------------------------------------------
# experimental targets

BIMODAL_MEAN = np.array([10.0, 0.0])


def bimodal_target(mu: Sequence[float] = BIMODAL_MEAN) -> TargetDensity:
    """Equal mixture of N(mu, I) and N(-mu, I) in two dimensions (normalized)."""
    mu = np.asarray(mu, dtype=float)
    log_norm = -math.log(4.0 * math.pi)

    m0, m1 = float(mu[0]), float(mu[1])

    def exponents(x):
        # scalar fast path: chains evaluate one point at a time
        if x.ndim == 1:
            x0, x1 = float(x[0]), float(x[1])
            a = -0.5 * ((x0 - m0) ** 2 + (x1 - m1) ** 2)
            b = -0.5 * ((x0 + m0) ** 2 + (x1 + m1) ** 2)
            return a, b
        return (-0.5 * np.sum((x - mu) ** 2, axis=-1), -0.5 * np.sum((x + mu) ** 2, axis=-1))

    def log_density(x):
        x = np.asarray(x, dtype=float)
        a, b = exponents(x)
        if x.ndim == 1:
            hi, lo = (a, b) if a >= b else (b, a)
            return log_norm + hi + math.log1p(math.exp(lo - hi))
        return log_norm + np.logaddexp(a, b)

    def grad(x):
        x = np.asarray(x, dtype=float)
        a, b = exponents(x)
        if x.ndim == 1:
            d = b - a
            w = 1.0 / (1.0 + math.exp(d)) if d < 700 else 0.0
            return -(x - mu) * w - (x + mu) * (1.0 - w)
        w = expit(a - b)[..., None]
        return -(x - mu) * w - (x + mu) * (1.0 - w)

    return TargetDensity(2, log_density, grad, "bimodal")


QUARTIC_CENTER = np.array([-7.0, -6.5])
QUARTIC_WEIGHT = 0.8
MIXTURE_TOTAL = 14.8
# integral of exp(-s^4) over R
QUARTIC_1D_INTEGRAL = 2.0 * gamma_fn(1.25)


def default_fifteen_modes() -> np.ndarray:
    """The shipped 14 Gaussian centres (non-canonical; see data/fifteen_modes.csv)."""
    return load_mode_centers(resources.files("kickkac.data") / "fifteen_modes.csv")


def load_mode_centers(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["x1"]), float(r["x2"])] for r in rows])


@dataclass(frozen=True)
class MixtureTarget(TargetDensity):
    """A TargetDensity that can also report per-component log-densities."""

    component_log_density: Callable[[np.ndarray], np.ndarray] | None = None
    n_components: int = 0

    def component_labels(self, x: np.ndarray) -> np.ndarray:
        """Index of the component with the largest responsibility at each point."""
        return np.argmax(self.component_log_density(x), axis=-1)


def fifteen_mode_target(modes: Sequence[Sequence[float]] | None = None) -> MixtureTarget:
    """Quartic light-tailed component at (-7, -6.5) plus 14 unit Gaussians.

    Component 0 is the quartic one; components 1..14 follow ``modes``.
    """
    modes = default_fifteen_modes() if modes is None else np.asarray(modes, dtype=float)
    if modes.shape != (14, 2):
        raise ValueError(f"expected 14 two-dimensional mode centres, got shape {modes.shape}")
    log_quartic_w = (math.log(QUARTIC_WEIGHT) - 2.0 * math.log(QUARTIC_1D_INTEGRAL)
                     - math.log(MIXTURE_TOTAL))
    log_gauss_w = -math.log(2.0 * math.pi) - math.log(MIXTURE_TOTAL)

    def components(x):
        x = np.asarray(x, dtype=float)
        dq = x - QUARTIC_CENTER
        quart = log_quartic_w - np.sum(dq ** 4, axis=-1)
        diff = x[..., None, :] - modes
        gauss = log_gauss_w - 0.5 * np.sum(diff ** 2, axis=-1)
        return np.concatenate([quart[..., None], gauss], axis=-1)

    centres = [(float(a), float(b)) for a, b in modes]
    qx, qy = float(QUARTIC_CENTER[0]), float(QUARTIC_CENTER[1])
    exp = math.exp

    def single(x0, x1):
        # one-point path in plain floats, much faster than numpy on 15 terms;
        # returns log-sum-exp pieces plus weighted offsets for the gradient
        dx, dy = x0 - qx, x1 - qy
        q = log_quartic_w - (dx * dx) ** 2 - (dy * dy) ** 2
        gs = [log_gauss_w - 0.5 * ((a - x0) ** 2 + (b - x1) ** 2) for a, b in centres]
        m = max(q, max(gs))
        wq = exp(q - m)
        total, sx, sy = wq, 0.0, 0.0
        for (a, b), g in zip(centres, gs):
            w = exp(g - m)
            total += w
            sx += w * (a - x0)
            sy += w * (b - x1)
        return m, total, wq, dx, dy, sx, sy

    def log_density(x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            m, total, *_ = single(float(x[0]), float(x[1]))
            return m + math.log(total)
        return logsumexp(components(x), axis=-1)

    def grad(x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            _, total, wq, dx, dy, sx, sy = single(float(x[0]), float(x[1]))
            return np.array([(sx - 4.0 * wq * dx ** 3) / total,
                             (sy - 4.0 * wq * dy ** 3) / total])
        comp = components(x)
        w = np.exp(comp - comp.max(axis=-1, keepdims=True))
        w /= w.sum(axis=-1, keepdims=True)
        dq = x - QUARTIC_CENTER
        g = w[..., :1] * (-4.0 * dq ** 3)
        diff = x[..., None, :] - modes
        return g - np.sum(w[..., 1:, None] * diff, axis=-2)

    return MixtureTarget(2, log_density, grad, "fifteen_mode",
                         component_log_density=components, n_components=15)


def load_sv_observations(path=None) -> np.ndarray:
    if path is None:
        path = resources.files("kickkac.data") / "sv_observations.csv"
    with open(path, newline="") as fh:
        return np.array([float(r["y"]) for r in csv.DictReader(fh)])


def simulate_sv_observations(n_obs: int, rng: np.random.Generator) -> np.ndarray:
    """Draw (tau, rho, z) from the priors and simulate observations.

    The observation variance is ``exp(x_k) / tau``, the convention under which
    the posterior below is the exact log-posterior.
    """
    tau = rng.gamma(21.0, 1.0 / 5.0)
    rho = 2.0 * rng.beta(20.0, 2.0) - 1.0
    z = rng.standard_normal(n_obs)
    x = np.empty(n_obs)
    x[0] = z[0] / math.sqrt(1.0 - rho * rho)
    for k in range(1, n_obs):
        x[k] = rho * x[k - 1] + z[k]
    return rng.standard_normal(n_obs) * np.exp(0.5 * x) / math.sqrt(tau)


_ONE = np.ones(1)


def stochastic_volatility_target(observations: Sequence[float] | None = None) -> TargetDensity:
    """Posterior over ``(alpha, beta, z_0..z_N)`` of the stochastic volatility model.

    ``-log pi`` (constant dropped) is
    ``42a + 5e^{-2a} + 22 log(1+e^{-2b}) + 4b + (N+1)a + sum x/2 + sum (w + z^2)/2``
    with ``rho = tanh b``, ``x_0 = z_0 / sqrt(1-rho^2)``, ``x_{k+1} = rho x_k + z_{k+1}``
    and ``w_k = exp(-x_k - 2a) y_k^2``. The gradient back-propagates through the
    AR(1) recursion.
    """
    y = load_sv_observations() if observations is None else np.asarray(observations, float)
    if y.size == 0:
        raise ValueError("need at least one observation")
    y2 = y * y
    n_obs = y.size

    def forward(theta):
        a, b = theta[0], theta[1]
        z = theta[2:]
        rho = math.tanh(b)
        u = z.copy()
        u[0] = z[0] * np.cosh(b)
        x = lfilter(_ONE, np.array([1.0, -rho]), u)
        w = np.exp(-x) * (y2 * np.exp(-2.0 * a))
        return a, b, z, rho, x, w

    def neg_log(theta):
        with np.errstate(over="ignore", invalid="ignore"):
            a, b, z, _, x, w = forward(np.asarray(theta, float))
            u = (42.0 * a + 5.0 * np.exp(-2.0 * a) + 22.0 * np.logaddexp(0.0, -2.0 * b)
                 + 4.0 * b + n_obs * a + 0.5 * x.sum() + 0.5 * (w.sum() + z @ z))
        # overflow far out in the tails means zero density, not an error
        return u if u == u else math.inf

    def log_density(theta):
        return -float(neg_log(theta))

    def grad(theta):
        with np.errstate(over="ignore", invalid="ignore"):
            return _grad(np.asarray(theta, float))

    def _grad(theta):
        a, b, z, rho, x, w = forward(theta)
        g_x = 0.5 - 0.5 * w
        # adjoint of the recursion: adj_k = g_k + rho * adj_{k+1}
        adj = lfilter(_ONE, np.array([1.0, -rho]), g_x[::-1])[::-1]
        out = np.empty(n_obs + 2)
        out[0] = 42.0 - 10.0 * np.exp(-2.0 * a) + n_obs - w.sum()
        d_rho = adj[1:] @ x[:-1]
        # expit(-2b) = (1 - tanh b) / 2
        out[1] = (-22.0 * (1.0 - rho) + 4.0 + adj[0] * z[0] * np.sinh(b)
                  + (1.0 - rho * rho) * d_rho)
        out[2:] = adj + z
        out[2] = adj[0] * np.cosh(b) + z[0]
        return -out

    return TargetDensity(n_obs + 2, log_density, grad, "stoch_vol")


def ginzburg_landau_target(p: int = 5, tau: float = 2.0, lam: float = 0.5,
                           alpha: float = 0.1) -> TargetDensity:
    """Ginzburg-Landau field on a periodic p x p x p lattice (constant dropped)."""
    if p < 2:
        raise ValueError("lattice side p must be at least 2")
    shape = (p, p, p)
    quad = 1.0 - tau
    grad_w = tau * alpha
    quart = tau * lam

    def neg_log(x):
        f = np.asarray(x, float).reshape(shape)
        energy = quad * np.sum(f * f) + 0.5 * quart * np.sum(f ** 4)
        for ax in range(3):
            d = np.roll(f, -1, axis=ax) - f
            energy += grad_w * np.sum(d * d)
        return 0.5 * energy

    def log_density(x):
        return -float(neg_log(x))

    def grad(x):
        f = np.asarray(x, float).reshape(shape)
        g = quad * f + quart * f ** 3 + 6.0 * grad_w * f
        for ax in range(3):
            g -= grad_w * (np.roll(f, -1, axis=ax) + np.roll(f, 1, axis=ax))
        return -g.reshape(-1)

    return TargetDensity(p ** 3, log_density, grad, "ginzburg_landau")


def standard_normal_target(dim: int = 1) -> TargetDensity:
    """N(0, I_dim), normalized; mostly useful in tests and tuning checks."""
    log_norm = -0.5 * dim * math.log(2.0 * math.pi)

    def log_density(x):
        x = np.asarray(x, float)
        return log_norm - 0.5 * np.sum(x * x, axis=-1)

    return TargetDensity(dim, log_density, lambda x: -np.asarray(x, float), f"normal{dim}")


def flat_target(dim: int = 1) -> TargetDensity:
    return TargetDensity(dim, lambda x: 0.0, lambda x: np.zeros(dim), f"flat{dim}")
