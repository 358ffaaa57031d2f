"""Randomised sweep over the finite-state identities, plus checks for user-supplied chains."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from kickkac import oracle as orc

TOL = 1e-10
TIGHT_TOL = 1e-12
DEFAULT_SEED = 20240611


@dataclass
class CheckResult:
    name: str
    tol: float
    worst: float = 0.0
    worst_instance: str = ""
    failures: int = 0
    count: int = 0
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.failures == 0 and self.count > 0

    def record(self, value: float, instance: str, ok: bool | None = None) -> None:
        """Log one residual (or one boolean outcome when ``ok`` is given)."""
        self.count += 1
        if not np.isfinite(value):
            value = np.inf
        if value >= self.worst:
            self.worst, self.worst_instance = float(value), instance
        if ok is None:
            ok = value <= self.tol
        if not ok:
            self.failures += 1
            if len(self.notes) < 5:
                self.notes.append(f"{instance}: {value:.3e}")

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = f" (worst at {self.worst_instance})" if self.worst_instance else ""
        return (f"{status}  {self.name:<28} worst={self.worst:.3e}  tol={self.tol:.0e}  "
                f"n={self.count}  failures={self.failures}{where}")


class Checks:
    def __init__(self):
        self.results: dict[str, CheckResult] = {}

    def __call__(self, name: str, tol: float = TOL) -> CheckResult:
        if name not in self.results:
            self.results[name] = CheckResult(name, tol)
        return self.results[name]

    def all(self) -> list[CheckResult]:
        return list(self.results.values())


def _instance_rng(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, i]))


def _identity_checks(checks: Checks, chain: orc.DiscreteChain, C: Sequence[int],
                     rng: np.random.Generator, tag: str) -> None:
    """Every invariance identity for one chain and region."""
    n = chain.n
    st = orc.stationary_distribution(chain)
    checks("stationary_residual").record(max(st.residual, st.power_gap), tag)
    pi = st.pi
    f = rng.standard_normal(n)
    pf = float(pi @ f)
    k = orc.kac_measures(chain, pi, C, f)
    checks("kac_excursion_0").record(abs(k.pi0 - pf), tag)
    checks("kac_excursion_1").record(abs(k.pi1 - pf), tag)

    alpha = rng.random(n)
    alpha[rng.integers(n)] = 1.0 - 0.5 * rng.random()
    g = orc.generalized_kac(chain, pi, alpha, f)
    checks("generalized_kac").record(max(abs(g.pi0 - pf), abs(g.pi1 - pf)), tag)

    S = orc.build_memoryless_kernel(chain, pi, C)
    checks("memoryless_invariance", TIGHT_TOL).record(float(np.max(np.abs(pi @ S.P - pi))), tag)

    Q = orc.conditioned_mh_kernel(pi, C, rng)
    R = orc.build_kkt_kernel(chain, C, Q)
    tilde = orc.kkt_stationary(chain, pi, C, Q)
    checks("pair_chain_invariance").record(float(np.max(np.abs(tilde @ R.R - tilde))), tag)
    y_marg, _ = orc.pair_marginals(tilde, n, len(C))
    checks("pair_chain_first_marginal").record(float(np.max(np.abs(y_marg - pi))), tag)
    hd_p, hd_q = orc.harmonic_dimension(chain), orc.harmonic_dimension(Q)
    if hd_p == 1 and hd_q == 1:
        hd_r = orc.harmonic_dimension(R.R)
        checks("uniqueness_link").record(float(hd_r - 1), tag, ok=hd_r == 1)
        st_r = orc.stationary_distribution(orc.DiscreteChain(R.R), power_check=False)
        checks("pair_chain_unique_law").record(float(np.max(np.abs(st_r.pi - tilde))), tag)

    K = orc.random_chain(n, rng)
    checks("mh_as_teleport", TIGHT_TOL).record(orc.mh_gkkt_equivalence(K, pi).max_discrepancy, tag)

    cert = orc.return_drift_certificate(chain, C, 2.0)
    if cert.lam < 1.0:
        dr = orc.check_drift(chain, cert)
        checks("drift_certificate").record(dr.max_violation, tag, ok=dr.holds)
    try:
        mn = orc.check_small_set(Q, range(len(C)))
        gap = float(np.max(mn.epsilon * mn.nu - Q.P))
        checks("small_set", 1e-14).record(max(gap, 0.0), tag)
    except orc.SmallSetFailure:
        checks("small_set", 1e-14).record(np.inf, tag)


def _reversibility_instance(i: int, rng: np.random.Generator):
    """Cycle through random, constructed-positive and constructed-negative instances."""
    n = int(rng.integers(3, 9))
    kind = i % 3
    if kind == 0:
        chain = orc.random_chain(n, rng)
        pi = orc.stationary_distribution(chain).pi
        return "random", chain, pi, orc.random_subset(n, rng)
    C = orc.random_subset(n, rng, min_size=2, max_size=n - 1)
    if kind == 1:
        chain, pi = orc.reversible_instance(n, C, rng, shared_rows=True)
        return "positive", chain, pi, C
    chain, pi = orc.reversible_instance(n, C, rng, shared_rows=False)
    return "negative", chain, pi, C


def certified_instance():
    """Fixed six-state instance with drift and small-set certificates (lazy random chain)."""
    rng = np.random.default_rng(0)
    n, C = 6, (0, 1, 2)
    base = orc.random_chain(n, rng)
    pi = orc.stationary_distribution(base).pi
    chain = orc.DiscreteChain(0.6 * np.eye(n) + 0.4 * base.P)
    Q = orc.conditioned_mh_kernel(pi, C, rng)
    return chain, pi, C, Q


def ergodicity_checks(checks: Checks, n_max: int = 200) -> None:
    chain, pi, C, Q = certified_instance()
    cert = orc.return_drift_certificate(chain, C, 2.0)
    dr = orc.check_drift(chain, cert)
    checks("certified_drift").record(dr.max_violation, "certified", ok=dr.holds and cert.lam < 1)
    mn = orc.check_small_set(Q, range(len(C)))
    checks("certified_small_set", 1e-14).record(
        max(0.0, float(np.max(mn.epsilon * mn.nu - Q.P))), "certified", ok=mn.epsilon > 0)
    R = orc.build_kkt_kernel(chain, C, Q)
    tilde = orc.kkt_stationary(chain, pi, C, Q)
    d = orc.tv_decay(R, tilde, R.index(chain.n - 1, C[0]), n_max)
    checks("tv_decay_fit").record(1.0 - d.r_squared, "certified",
                                  ok=d.r_squared >= 0.99 and d.rate < 1.0)
    checks("tv_decay_envelope", 1e-6).record(max(0.0, d.envelope_ratio() - 1.0), "certified")
    # periodic negative control: deterministic cycle, single-state C
    cyc = orc.DiscreteChain(np.roll(np.eye(4), 1, axis=1))
    Rp = orc.build_kkt_kernel(cyc, (0,), np.ones((1, 1)))
    tp = orc.kkt_stationary(cyc, np.full(4, 0.25), (0,))
    dp = orc.tv_decay(Rp, tp, Rp.index(1, 0), 50)
    checks("tv_periodic_control").record(dp.rate, "cycle4", ok=dp.rate >= 1.0)


def run_sweep(n_instances: int = 200, seed: int = DEFAULT_SEED, max_states: int = 8) -> list[CheckResult]:
    """All identity checks over random instances with 2..max_states states."""
    checks = Checks()
    for i in range(n_instances):
        rng = _instance_rng(seed, i)
        n = int(rng.integers(2, max_states + 1))
        chain = orc.random_chain(n, rng)
        C = orc.random_subset(n, rng)
        _identity_checks(checks, chain, C, rng, f"seed={seed}/instance={i}")

        kind, rchain, rpi, rC = _reversibility_instance(i, _instance_rng(seed + 1, i))
        rep = orc.check_reversibility_criterion(rchain, rpi, rC)
        tag = f"seed={seed + 1}/instance={i}/{kind}"
        checks("reversibility_biconditional").record(
            float(not rep.consistent), tag, ok=rep.consistent)
        if kind != "random":
            expected = kind == "positive"
            ok = rep.criterion == expected and rep.detailed_balance == expected
            checks("reversibility_constructed").record(float(not ok), tag, ok=ok)
    ergodicity_checks(checks)
    return checks.all()


def check_chain(chain: orc.DiscreteChain, C: Sequence[int] | None, label: str,
                seed: int = DEFAULT_SEED) -> list[CheckResult]:
    """Identity checks for one user-supplied chain (C defaults to state 0)."""
    checks = Checks()
    C = (0,) if C is None else tuple(C)
    st = orc.stationary_distribution(chain)
    if not st.unique:
        r = checks("unique_invariant_law")
        r.record(float(orc.harmonic_dimension(chain) - 1), label, ok=False)
        return checks.all()
    pi = st.pi
    for j in range(chain.n):
        e = np.zeros(chain.n)
        e[j] = 1.0
        k = orc.kac_measures(chain, pi, C, e)
        checks("kac_indicator_values").record(max(abs(k.pi0 - pi[j]), abs(k.pi1 - pi[j])),
                                              f"{label}/state={j}")
    _identity_checks(checks, chain, C, np.random.default_rng(seed), label)
    rep = orc.check_reversibility_criterion(chain, pi, C)
    checks("reversibility_biconditional").record(float(not rep.consistent), label,
                                                 ok=rep.consistent)
    return checks.all()
