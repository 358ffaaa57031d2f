"""Property-based checks of the structural invariants."""

import math
from functools import partial

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from kickkac import diagnostics as dg
from kickkac import oracle as orc
from kickkac import sampler as sm
from kickkac import targets as tg
from kickkac.config import build_config
from kickkac.experiments import run_experiment
from kickkac.kernels import KernelConfig, make_kernel

SETTINGS = settings(max_examples=60, deadline=None,
                    suppress_health_check=[HealthCheck.too_slow])


@st.composite
def chains(draw, max_n=8):
    """A random positive stochastic matrix, a non-empty subset C and a test function."""
    n = draw(st.integers(2, max_n))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    chain = orc.random_chain(n, rng, floor=draw(st.sampled_from([0.0, 1e-3])))
    mask = draw(st.lists(st.booleans(), min_size=n, max_size=n))
    if not any(mask):
        mask[draw(st.integers(0, n - 1))] = True
    C = tuple(i for i in range(n) if mask[i])
    return chain, C, rng


@SETTINGS
@given(chains())
def test_kac_excursion_identities(data):
    chain, C, rng = data
    pi = orc.stationary_distribution(chain).pi
    f = rng.standard_normal(chain.n)
    k = orc.kac_measures(chain, pi, C, f)
    assert abs(k.pi0 - pi @ f) <= 1e-10 and abs(k.pi1 - pi @ f) <= 1e-10


@SETTINGS
@given(chains())
def test_generalized_kac_identity(data):
    chain, _, rng = data
    pi = orc.stationary_distribution(chain).pi
    alpha = rng.random(chain.n)
    alpha[rng.integers(chain.n)] = 1.0
    f = rng.standard_normal(chain.n)
    g = orc.generalized_kac(chain, pi, alpha, f)
    assert abs(g.pi0 - pi @ f) <= 1e-10 and abs(g.pi1 - pi @ f) <= 1e-10


@SETTINGS
@given(chains())
def test_memoryless_kernel_keeps_target(data):
    chain, C, _ = data
    pi = orc.stationary_distribution(chain).pi
    S = orc.build_memoryless_kernel(chain, pi, C)
    assert np.max(np.abs(pi @ S.P - pi)) <= 1e-12


@SETTINGS
@given(chains())
def test_pair_chain_law_and_uniqueness(data):
    chain, C, rng = data
    pi = orc.stationary_distribution(chain).pi
    Q = orc.conditioned_mh_kernel(pi, C, rng)
    R = orc.build_kkt_kernel(chain, C, Q)
    tilde = orc.kkt_stationary(chain, pi, C, Q)
    assert np.max(np.abs(tilde @ R.R - tilde)) <= 1e-10
    assert np.max(np.abs(orc.pair_marginals(tilde, chain.n, len(C))[0] - pi)) <= 1e-10
    if orc.harmonic_dimension(chain) == 1 and orc.harmonic_dimension(Q) == 1:
        assert orc.harmonic_dimension(R.R) == 1


@SETTINGS
@given(chains(max_n=6))
def test_metropolis_is_an_identity_base_teleport_chain(data):
    chain, _, rng = data
    pi = rng.dirichlet(np.ones(chain.n))
    assert orc.mh_gkkt_equivalence(chain, pi).max_discrepancy <= 1e-12


@SETTINGS
@given(chains())
def test_reversibility_criterion_matches_detailed_balance(data):
    chain, C, _ = data
    pi = orc.stationary_distribution(chain).pi
    assert orc.check_reversibility_criterion(chain, pi, C).consistent


@SETTINGS
@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_constructed_reversible_instances(n, seed):
    rng = np.random.default_rng(seed)
    C = orc.random_subset(n, rng, min_size=1, max_size=n - 1)
    chain, pi = orc.reversible_instance(n, C, rng, shared_rows=True)
    rep = orc.check_reversibility_criterion(chain, pi, C)
    assert rep.criterion and rep.detailed_balance


dyadic = st.integers(-2**20, 2**20).map(lambda k: k / 1024)


@SETTINGS
@given(dyadic, dyadic, st.integers(-200, 200), dyadic)
def test_alpha_is_invariant_to_a_common_scale(lp, lt, shift, log_m):
    x = np.zeros(1)
    ref = tg.alpha_from_unnormalized(tg.TargetDensity(1, lambda _: lp),
                                     tg.TargetDensity(1, lambda _: lt), log_m)
    scaled = tg.alpha_from_unnormalized(tg.TargetDensity(1, lambda _: lp + shift),
                                        tg.TargetDensity(1, lambda _: lt + shift), log_m)
    assert ref.raw(x) == scaled.raw(x)


@SETTINGS
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-1e3, 1e3))
def test_alpha_scale_invariance_for_general_floats(lp, lt, shift):
    x = np.zeros(1)
    a = tg.alpha_from_unnormalized(tg.TargetDensity(1, lambda _: lp),
                                   tg.TargetDensity(1, lambda _: lt), 0.0).raw(x)
    b = tg.alpha_from_unnormalized(tg.TargetDensity(1, lambda _: lp + shift),
                                   tg.TargetDensity(1, lambda _: lt + shift), 0.0).raw(x)
    assert math.isclose(a, b, rel_tol=1e-9, abs_tol=1e-300)


points = st.lists(st.floats(-20, 20), min_size=2, max_size=2).map(np.array)


@SETTINGS
@given(points, st.floats(-5, 30))
def test_regions_are_pure(x, level):
    t = tg.bimodal_target()
    region = tg.level_set_region(t, level)
    box = tg.Box.cube(-15, 15, 2)
    env = tg.envelope_region(t, tg.uniform_log_density(box), math.log(1.3 / math.pi), box)
    assert region.contains(x) == region.contains(x.copy())
    assert env.contains(x) == env.contains(x.copy())
    assert region.contains(x) == (-t.log_density_unnorm(x) > level)


@SETTINGS
@given(st.integers(0, 2**32 - 1), st.integers(3, 7))
def test_indicator_alpha_and_region_test_agree_draw_for_draw(seed, n):
    rng = np.random.default_rng(seed)
    chain = orc.random_chain(n, rng)
    C = orc.random_subset(n, rng)
    pi = orc.stationary_distribution(chain).pi
    Q = orc.conditioned_mh_kernel(pi, C, rng)
    base, q, region = sm.matrix_kernel(chain.P), sm.matrix_kernel(Q.P, C), sm.subset_region(C)
    a = b = sm.KktState(C[0], C[0])
    ra, rb = np.random.default_rng(seed), np.random.default_rng(seed)
    alpha = tg.AlphaFunction.from_region(region)
    for _ in range(300):
        a = sm.kkt_step(base, q, region, a, ra)
        b = sm.gkkt_step(base, q, alpha, b, rb)
        assert (a.y, a.z, a.teleported) == (b.y, b.z, b.teleported)


@SETTINGS
@given(st.integers(0, 2**32 - 1), st.sampled_from(["rwm", "mala", "hmc"]))
def test_rejected_moves_leave_state_bitwise(seed, kind):
    rng = np.random.default_rng(seed)
    t = tg.fifteen_mode_target()
    step = make_kernel(t, KernelConfig(kind, sigma=3.0, gamma=0.8, delta_t=0.4, n_hmc=3))
    x = rng.uniform(-8, 8, 2)
    for _ in range(20):
        out = step(x, rng)
        if not out.accepted:
            assert np.array_equal(out.state, x)
        x = out.state


@SETTINGS
@given(st.integers(0, 2**32 - 1))
def test_teleport_steps_put_y_on_the_anchor(seed):
    rng = np.random.default_rng(seed)
    t = tg.bimodal_target()
    region = tg.level_set_region(t, 6.0)
    base = make_kernel(t, KernelConfig("mala", gamma=0.5))
    q = make_kernel(t.restricted(region), KernelConfig("rwm", sigma=1.0))
    x0 = sm.initial_anchor(region, rng, np.array([10.0, 0.0]))
    state = sm.KktState(x0, x0)
    for _ in range(200):
        prev = state
        state = sm.kkt_step(base, q, region, state, rng)
        assert region.contains(state.z)
        if state.teleported:
            assert np.array_equal(state.y, state.z)
        else:
            assert np.array_equal(state.z, prev.z)


@SETTINGS
@given(st.lists(st.floats(-1e3, 1e3), min_size=100, max_size=400))
def test_ess_is_reversal_invariant(xs):
    x = np.array(xs)
    a, b = dg.ess_estimate(x), dg.ess_estimate(x[::-1])
    assert a.degenerate == b.degenerate
    assert math.isclose(a.value, b.value, rel_tol=1e-6, abs_tol=1e-9)
    assert 0 <= a.value <= x.size


@SETTINGS
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=200), st.floats(-5, 5))
def test_mode_weights_partition(xs, cut):
    pts = np.column_stack([np.array(xs), np.zeros(len(xs))])
    parts = [lambda p: p[:, 0] > cut, lambda p: p[:, 0] <= cut]
    w = dg.mode_weights(pts, parts)
    assert math.isclose(w.sum(), 1.0)
    assert dg.mode_weights(pts, parts[:1]).sum() <= 1.0


@SETTINGS
@given(st.integers(0, 2**32 - 1))
def test_grid_tv_is_invariant_under_reflection(seed):
    rng = np.random.default_rng(seed)
    xs = rng.normal(0.3, 1.2, (500, 2))
    edges = dg.regular_edges([-3, -3], [3, 3], [6, 6])
    logp = tg.bimodal_target([1.0, 0.0]).log_density_unnorm

    def mirrored(p):
        return logp(p * np.array([-1.0, 1.0]))

    a = dg.grid_tv(xs, logp, edges)
    b = dg.grid_tv(xs * np.array([-1.0, 1.0]), mirrored, edges)
    assert math.isclose(a, b, abs_tol=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["kkt_memoryless", "kkt", "mala"]))
def test_same_seed_same_trace(seed, sampler):
    given_cfg = {"experiment": {"name": "bimodal", "sampler": sampler},
                 "run": {"n_steps": "300", "burn_in": "50", "seed": str(seed)}}
    if sampler == "kkt":
        given_cfg["teleport"] = {"threshold": "8"}
    cfg = build_config(given_cfg)
    a, b = run_experiment(cfg), run_experiment(cfg)
    assert np.array_equal(a.samples, b.samples)
    assert np.array_equal(a.teleported, b.teleported)
