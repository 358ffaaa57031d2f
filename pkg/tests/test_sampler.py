import math
from functools import partial

import numpy as np
import pytest
from scipy import stats

from kickkac import oracle as orc
from kickkac import sampler as sm
from kickkac import targets as tg
from kickkac.diagnostics import bin_masses, grid_tv, occupancy_tv, regular_edges
from kickkac.kernels import KernelConfig, make_kernel


def finite_setup(n=5, C=(0, 2), seed=0):
    rng = np.random.default_rng(seed)
    chain = orc.random_chain(n, rng)
    pi = orc.stationary_distribution(chain).pi
    Q = orc.conditioned_mh_kernel(pi, C, rng)
    return chain, pi, tuple(C), Q


def drive(stepper, n, initial, rng):
    ys, zs, tele = np.empty(n, int), np.empty(n, int), np.zeros(n, bool)
    state = initial
    for k in range(n):
        state = stepper(state, rng)
        ys[k], zs[k], tele[k] = state.y, state.z, state.teleported
    return ys, zs, tele


class TestKktReductions:
    def test_empty_region_gives_the_base_chain(self):
        t = tg.bimodal_target()
        base = make_kernel(t, KernelConfig("mala", gamma=0.1))
        never = tg.CriticalRegion(lambda x: False, "empty")
        q = make_kernel(t, KernelConfig("rwm"))
        a = b = sm.KktState(np.array([10.0, 0.0]), np.array([10.0, 0.0]))
        ra, rb = np.random.default_rng(4), np.random.default_rng(4)
        for _ in range(2000):
            a = sm.kkt_step(base, q, never, a, ra)
            b = sm.base_chain_step(base, b, rb)
            assert np.array_equal(a.y, b.y) and not a.teleported
        assert ra.bit_generator.state == rb.bit_generator.state

    def test_identity_teleport_kernel_returns_to_anchor(self):
        chain, pi, C, _ = finite_setup(6, (1, 4))
        stay = sm.matrix_kernel(np.eye(2), C)
        step = partial(sm.kkt_step, sm.matrix_kernel(chain.P), stay, sm.subset_region(C))
        ys, zs, tele = drive(step, 20_000, sm.KktState(4, 4), np.random.default_rng(1))
        assert tele.sum() > 1000
        assert np.all(ys[tele] == 4) and np.all(zs == 4)

    def test_indicator_alpha_reproduces_kkt_draw_for_draw(self):
        chain, pi, C, Q = finite_setup()
        base, q = sm.matrix_kernel(chain.P), sm.matrix_kernel(Q.P, C)
        region = sm.subset_region(C)
        kkt = partial(sm.kkt_step, base, q, region)
        gkkt = partial(sm.gkkt_step, base, q, tg.AlphaFunction.from_region(region))
        a = drive(kkt, 20_000, sm.KktState(0, 0), np.random.default_rng(8))
        b = drive(gkkt, 20_000, sm.KktState(0, 0), np.random.default_rng(8))
        for u, v in zip(a, b):
            assert np.array_equal(u, v)

    def test_memoryless_equals_kkt_with_iid_teleport_kernel(self):
        chain, pi, C, _ = finite_setup()
        pc = pi[list(C)] / pi[list(C)].sum()
        iid = sm.matrix_kernel(np.tile(pc, (len(C), 1)), C)
        base, region = sm.matrix_kernel(chain.P), sm.subset_region(C)
        kkt = partial(sm.kkt_step, base, iid, region)
        mem = partial(sm.memoryless_kkt_step, base, region, lambda rng: iid(C[0], rng).state)
        a = drive(kkt, 10_000, sm.KktState(0, 0), np.random.default_rng(3))
        b = drive(mem, 10_000, sm.KktState(0, 0), np.random.default_rng(3))
        assert np.array_equal(a[0], b[0])


class TestFiniteStateLaws:
    def test_pair_occupancy_matches_pair_invariant_law(self):
        chain, pi, C, Q = finite_setup()
        R = orc.build_kkt_kernel(chain, C, Q)
        tilde = orc.kkt_stationary(chain, pi, C, Q)
        step = partial(sm.kkt_step, sm.matrix_kernel(chain.P), sm.matrix_kernel(Q.P, C),
                       sm.subset_region(C))
        ys, zs, _ = drive(step, 300_000, sm.KktState(0, 0), np.random.default_rng(5))
        pairs = np.array([R.index(y, z) for y, z in zip(ys, zs)])
        assert occupancy_tv(pairs, tilde) <= 0.01
        assert occupancy_tv(ys, pi) <= 0.01

    def test_kkt_and_memoryless_share_the_target_marginal(self):
        chain, pi, C, Q = finite_setup(6, (0, 3, 5), seed=2)
        pc = pi[list(C)] / pi[list(C)].sum()
        base, region = sm.matrix_kernel(chain.P), sm.subset_region(C)
        kkt = partial(sm.kkt_step, base, sm.matrix_kernel(Q.P, C), region)

        def draw_pi_c(rng):
            return int(rng.choice(C, p=pc))

        mem = partial(sm.memoryless_kkt_step, base, region, draw_pi_c)
        y1 = drive(kkt, 1_000_000, sm.KktState(0, 0), np.random.default_rng(6))[0]
        y2 = drive(mem, 1_000_000, sm.KktState(0, 0), np.random.default_rng(7))[0]
        n = len(pi)
        h1, h2 = np.bincount(y1, minlength=n) / y1.size, np.bincount(y2, minlength=n) / y2.size
        assert 0.5 * np.abs(h1 - h2).sum() <= 0.02
        assert occupancy_tv(y2, pi) <= 0.01

    def test_constant_one_alpha_follows_the_teleport_kernel(self):
        rng = np.random.default_rng(9)
        chain, pi, _, _ = finite_setup(5)
        K = orc.random_chain(5, rng)
        Q = orc.build_mh_kernel(K, pi)
        step = partial(sm.gkkt_step, sm.matrix_kernel(chain.P), sm.matrix_kernel(Q.P),
                       tg.AlphaFunction.constant(1.0))
        ys, zs, tele = drive(step, 200_000, sm.KktState(0, 0), rng)
        assert tele.all() and np.array_equal(ys, zs)
        assert occupancy_tv(ys, pi) <= 0.01

    @pytest.mark.slow
    def test_constant_one_alpha_on_a_continuous_target(self):
        t = tg.standard_normal_target(1)
        step = partial(sm.gkkt_step, make_kernel(t, KernelConfig("mala", gamma=0.5)),
                       make_kernel(t, KernelConfig("rwm", sigma=2.0)),
                       tg.AlphaFunction.constant(1.0))
        rec = sm.ArrayRecorder(1_000_000, 1)
        sm.run_chain(step, 1_000_000, sm.KktState(np.zeros(1), np.zeros(1)),
                     np.random.default_rng(15), rec)
        edges = regular_edges([-4], [4], [40])
        assert rec.teleported.all()
        assert grid_tv(rec.y, t.log_density_unnorm, edges) <= 0.02

    def test_memoryless_general_teleport_keeps_target(self):
        rng = np.random.default_rng(10)
        chain, pi, _, _ = finite_setup(6, seed=4)
        alpha = rng.uniform(0.05, 1.0, 6)
        tilt = alpha * pi / (alpha * pi).sum()
        a = tg.AlphaFunction(lambda y: float(alpha[y]))
        step = partial(sm.memoryless_gkkt_step, sm.matrix_kernel(chain.P), a,
                       lambda r: int(r.choice(6, p=tilt)))
        ys, _, tele = drive(step, 200_000, sm.KktState(0, 0), rng)
        assert occupancy_tv(ys, pi) <= 0.01
        # teleports happen at rate E_pi[(P alpha)] = sum_y pi(y) sum_y' P(y,y') alpha(y')
        assert tele.mean() == pytest.approx(float(pi @ chain.P @ alpha), abs=0.01)

    def test_general_teleport_with_kernel_keeps_target(self):
        rng = np.random.default_rng(12)
        chain, pi, _, _ = finite_setup(5, seed=6)
        alpha = np.array([0.0, 0.3, 1.0, 0.6, 0.0])
        tilt = alpha * pi
        K = np.ones((5, 5)) / 5
        Q = orc.build_mh_kernel(K, tilt / tilt.sum()).P
        a = tg.AlphaFunction(lambda y: float(alpha[y]))
        step = partial(sm.gkkt_step, sm.matrix_kernel(chain.P), sm.matrix_kernel(Q), a)
        ys, zs, _ = drive(step, 300_000, sm.KktState(2, 2), rng)
        assert occupancy_tv(ys, pi) <= 0.01
        assert set(np.unique(zs)) <= {1, 2, 3}


class TestMhAsTeleport:
    def test_discrete_transitions_match_metropolis(self):
        rng = np.random.default_rng(13)
        n = 4
        K = orc.random_chain(n, rng).P
        pi = rng.dirichlet(np.ones(n))
        tr = sm.mh_as_gkkt_discrete(K, pi, 200_000, 0, rng)
        y = tr.y[:, 0].astype(int)
        counts = np.zeros((n, n))
        np.add.at(counts, (y[:-1], y[1:]), 1)
        emp = counts / counts.sum(axis=1, keepdims=True)
        assert np.max(np.abs(emp - orc.build_mh_kernel(K, pi).P)) <= 0.01

    def test_continuous_version_is_textbook_metropolis(self):
        t = tg.bimodal_target()
        prop = KernelConfig("rwm", sigma=2.0)
        x0 = np.array([1.0, 1.0])
        tr = sm.mh_as_gkkt_chain(t, prop, 5000, x0, np.random.default_rng(14))
        rng = np.random.default_rng(14)
        step = make_kernel(t, prop)
        x, acc = x0, 0
        for k in range(5000):
            out = step(x, rng)
            x, acc = out.state, acc + out.accepted
            assert np.array_equal(tr.y[k], x)
        assert tr.acceptance_rate == acc / 5000

    def test_rejects_hmc_proposal(self):
        with pytest.raises(ValueError):
            sm.mh_as_gkkt_chain(tg.standard_normal_target(1), KernelConfig("hmc"), 10,
                                np.zeros(1), np.random.default_rng(0))


def bimodal_region():
    box = tg.Box.cube(-15, 15, 2)
    t = tg.bimodal_target()
    return t, tg.envelope_region(t, tg.uniform_log_density(box), math.log(1.3 / math.pi), box)


class TestRejectionSampler:
    def test_exact_envelope_never_rejects(self, rng):
        box = tg.Box.cube(0, 2, 2)
        flat = tg.TargetDensity(2, lambda x: -math.log(4.0) * np.ones(np.shape(x)[:-1]))
        region = tg.envelope_region(flat, tg.uniform_log_density(box), 0.0, box)
        st = sm.RejectionStats()
        for _ in range(500):
            sm.rejection_sample_pi_c(region, flat, rng, stats=st)
        assert st.rejections == 0 and st.accepts == 500

    def test_mean_rejections_match_quadrature(self, rng):
        t, region = bimodal_region()
        h = 0.01
        g = np.arange(-15 + h / 2, 15, h)
        mass_c = 0.0
        for row in g:
            pts = np.column_stack([np.full(g.size, row), g])
            lp = t.log_density_unnorm(pts)
            inside = lp <= region.log_envelope(pts)
            mass_c += float(np.exp(lp[inside]).sum()) * h * h
        expected = (1.3 / math.pi) / mass_c - 1.0
        st = sm.RejectionStats()
        for _ in range(10_000):
            sm.rejection_sample_pi_c(region, t, rng, stats=st)
        se = math.sqrt(expected * (expected + 1)) / 100
        assert 63 <= expected <= 77
        assert abs(st.mean_rejections_per_accept - expected) <= 4 * se + 0.01 * expected

    def test_accepted_draws_follow_restricted_target(self, rng):
        t, region = bimodal_region()
        draws = np.array([sm.rejection_sample_pi_c(region, t, rng)[0] for _ in range(20_000)])
        assert all(region.contains(x) for x in draws[:500])
        edges = regular_edges([-15, -15], [15, 15], [10, 10])
        logc = region.log_c + region.instr_log_density(np.zeros(2))

        def log_restricted(xs):
            lp = t.log_density_unnorm(xs)
            return np.where(lp <= logc, lp, -np.inf)

        p = bin_masses(log_restricted, edges, subgrid=60).ravel()
        counts, _ = np.histogramdd(draws, bins=edges)
        counts = counts.ravel()
        keep = p * draws.shape[0] >= 5
        obs = np.append(counts[keep], counts[~keep].sum())
        exp = np.append(p[keep], p[~keep].sum()) * draws.shape[0]
        assert stats.chisquare(obs, exp).pvalue > 1e-3

    def test_cap_reports_progress(self, rng):
        with pytest.raises(sm.RejectionCapExceeded) as info:
            sm.rejection_sample(lambda xs: np.full(len(xs), -np.inf),
                                lambda r, m: r.random((m, 1)), rng, max_trials=1000)
        assert info.value.stats.draws == 1000 and info.value.stats.accepts == 0

    def test_requires_envelope_region(self, rng):
        with pytest.raises(TypeError):
            sm.rejection_sample_pi_c(tg.CriticalRegion(lambda x: True), tg.flat_target(1), rng)


class TestHybridReentry:
    def test_reentry_law_is_min_of_envelope_and_target(self, rng):
        t = tg.standard_normal_target(1)
        log_c = math.log(0.5)

        def phi_log(x):
            x = np.asarray(x, float)
            return stats.norm.logpdf(x[..., 0], scale=2.0)

        alpha, sample, st = sm.hybrid_reentry(t, phi_log, lambda r, m: r.normal(0, 2, (m, 1)),
                                              log_c)
        xs = np.array([sample(rng)[0] for _ in range(20_000)])
        grid = np.linspace(-10, 10, 20001)
        dens = np.minimum(0.5 * stats.norm.pdf(grid, scale=2.0), stats.norm.pdf(grid))
        cdf = np.cumsum(dens)
        cdf /= cdf[-1]
        assert stats.kstest(xs, lambda v: np.interp(v, grid, cdf)).pvalue > 1e-3
        x = np.array([0.0])
        assert alpha(x) == pytest.approx(min(1.0, 0.5 * stats.norm.pdf(0, scale=2) /
                                             stats.norm.pdf(0)))
        assert alpha(np.array([5.0])) == 1.0


class TestDriver:
    def test_bookkeeping_and_eval_counts(self):
        t, counter = sm.counted(tg.standard_normal_target(2))
        base = make_kernel(t, KernelConfig("mala", gamma=0.3))
        region = tg.CriticalRegion(lambda x: x[0] > 1.5)
        q = make_kernel(tg.standard_normal_target(2).restricted(region), KernelConfig("rwm"))
        rec = sm.ArrayRecorder(3000, 2)
        start = sm.KktState(np.array([2.0, 0.0]), np.array([2.0, 0.0]))
        out = sm.run_chain(partial(sm.kkt_step, base, q, region), 3000, start,
                           np.random.default_rng(0), rec, counter)
        assert out.n_teleports == rec.teleported.sum() > 0
        assert out.n_base_accepts == int(rec.accepted[~rec.teleported].sum())
        assert out.n_q_accepts == int(rec.accepted[rec.teleported].sum())
        # two density and two gradient evaluations per MALA step
        assert out.density_evals == 2 * 3000 and out.grad_evals == 2 * 3000
        assert out.final.step_index == 3000

    def test_teleport_sets_both_coordinates(self):
        chain, pi, C, Q = finite_setup()
        step = partial(sm.kkt_step, sm.matrix_kernel(chain.P), sm.matrix_kernel(Q.P, C),
                       sm.subset_region(C))
        state, rng = sm.KktState(0, 0), np.random.default_rng(2)
        for _ in range(5000):
            prev = state
            state = step(state, rng)
            assert state.z in C
            if state.teleported:
                assert state.y == state.z
                assert state.accepted == state.q_accepted
            else:
                assert state.z == prev.z
                assert state.accepted == state.candidate_accepted

    def test_sink_failure_reports_step(self):
        calls = []

        def sink(s):
            calls.append(s)
            if len(calls) == 7:
                raise OSError("disk full")

        step = partial(sm.base_chain_step, make_kernel(tg.standard_normal_target(1),
                                                       KernelConfig("rwm")))
        with pytest.raises(sm.SinkError) as info:
            sm.run_chain(step, 100, sm.KktState(np.zeros(1), np.zeros(1)),
                         np.random.default_rng(0), sink)
        assert info.value.step_index == 7

    def test_zero_steps_rejected(self):
        with pytest.raises(ValueError):
            sm.run_chain(lambda s, r: s, 0, sm.KktState(0, 0), np.random.default_rng(0))

    def test_initial_anchor_lands_in_region(self, rng):
        region = tg.CriticalRegion(lambda x: float(np.sum(x * x)) > 400)
        x = sm.initial_anchor(region, rng, np.zeros(2))
        assert region.contains(x)

    def test_teleport_spec_validation(self):
        with pytest.raises(ValueError):
            sm.TeleportSpec("warp", tg.CriticalRegion(lambda x: True))
        with pytest.raises(ValueError):
            sm.TeleportSpec(sm.EXACT_PI_C, tg.CriticalRegion(lambda x: True))
