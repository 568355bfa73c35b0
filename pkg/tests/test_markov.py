import itertools
import math

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from biasedcoin.errors import ConfigError, ConvergenceError, ParameterError
from biasedcoin.markov import (
    adjustable_approx,
    build_chain,
    chain_steady_state,
    efron_steady_state,
    finite_n_metrics,
    smith_asymptotics,
    stationary_cycle,
    t_treatment_variance,
)
from biasedcoin.rules import parse_rule, prob_treatment1


def plain_power(chain, start, steps):
    """Oracle: step a distribution through the chain one transition at a time."""
    v = np.zeros(chain.support.size)
    v[chain.index(start)] = 1.0
    for _ in range(steps):
        v = v @ chain.transition
    return v


def brute_force(rule, n_max):
    """Oracle: enumerate every allocation path, weighting by its probability."""
    rule = parse_rule(rule)
    loss = np.zeros(n_max)
    bias = np.zeros(n_max)
    for path in itertools.product((1, 2), repeat=n_max):
        w, n1, n2 = 1.0, 0, 0
        steps = []
        for arm in path:
            if w == 0:
                break
            pi = float(prob_treatment1(rule, n1, n2))
            steps.append(abs(2 * pi - 1))
            w *= pi if arm == 1 else 1 - pi
            n1, n2 = n1 + (arm == 1), n2 + (arm == 2)
            steps.append((n1 - n2) ** 2)
        if w == 0:
            continue
        for i in range(n_max):
            bias[i] += w * steps[2 * i]
            loss[i] += w * steps[2 * i + 1] / (i + 1)
    return loss, bias


class TestChain:
    def test_rows_stochastic(self):
        for rule in ["efron", "adjustable:a=2", "bigstick:b=3", "imbtol:b=4,p=0.75", "deterministic"]:
            ch = build_chain(rule)
            assert np.allclose(ch.transition.sum(axis=1), 1.0)
            assert (ch.transition >= 0).all()

    def test_period_two(self):
        ch = build_chain("efron", K=6)
        odd = ch.support % 2 != 0
        # one step always changes parity
        assert np.allclose(ch.transition[np.ix_(odd, odd)], 0)
        assert np.allclose(ch.transition[np.ix_(~odd, ~odd)], 0)

    def test_rejects_non_markov(self):
        for rule in ["smith:rho=2", "bayes:gamma=0.1", "block:len=4", "atkinson"]:
            with pytest.raises(ConfigError):
                build_chain(rule)

    def test_barrier_sets_truncation(self):
        assert build_chain("bigstick:b=3").K == 3


class TestStationary:
    def test_reflecting_walk(self):
        cyc = stationary_cycle(build_chain("bigstick:b=4"))
        odd = {d: cyc.prob(d) for d in (-3, -1, 1, 3)}
        assert all(v == pytest.approx(0.25, abs=1e-12) for v in odd.values())
        assert cyc.pi_even[cyc.support.tolist().index(4)] == pytest.approx(1 / 8, abs=1e-12)
        assert cyc.pi_even[cyc.support.tolist().index(0)] == pytest.approx(1 / 4, abs=1e-12)

    @pytest.mark.parametrize("rule", ["efron:p=0.6", "adjustable:a=1", "imbtol:b=3,p=0.75"])
    def test_against_plain_iteration(self, rule):
        ch = build_chain(rule, K=30) if "imbtol" not in rule else build_chain(rule)
        cyc = stationary_cycle(ch)
        v = plain_power(ch, 0, 4000)
        assert np.allclose(v, cyc.pi_even, atol=1e-12)
        assert np.allclose(v @ ch.transition, cyc.pi_odd, atol=1e-12)

    def test_fixed_point(self):
        ch = build_chain("efron", K=40)
        cyc = stationary_cycle(ch)
        T2 = ch.transition @ ch.transition
        assert np.allclose(cyc.pi_even @ T2, cyc.pi_even, atol=1e-14)
        assert cyc.pi_even.sum() == pytest.approx(1.0)

    def test_iteration_cap(self):
        with pytest.raises(ConvergenceError):
            stationary_cycle(build_chain("efron:p=0.51", K=400), max_iter=4)


class TestEfron:
    @pytest.mark.parametrize("p", [0.6, 2 / 3, 0.75, 0.9])
    def test_chain_matches_closed_form(self, p):
        cf = efron_steady_state(p)
        st = chain_steady_state(f"efron:p={p}")
        assert st.var_even == pytest.approx(cf.var_even, abs=1e-8)
        assert st.var_odd == pytest.approx(cf.var_odd, abs=1e-8)
        assert st.p0_even == pytest.approx(cf.p0_even, abs=1e-8)
        assert st.bias_even == pytest.approx(cf.bias_even, abs=1e-8)
        assert st.bias_odd == pytest.approx(cf.bias_odd, abs=1e-8)

    def test_two_thirds(self):
        cf = efron_steady_state(2 / 3)
        assert cf.bias(200) == pytest.approx(1 / 3)
        assert cf.bias(199) == pytest.approx(1 / 6)
        assert cf.p0_even == pytest.approx(0.5)
        assert cf.var_even == pytest.approx(40 / 9)

    @pytest.mark.parametrize("p, ratio", [(0.55, 1.0002), (2 / 3, 1.0250), (0.75, 1.1333)])
    def test_odd_even_ratio(self, p, ratio):
        cf = efron_steady_state(p)
        assert cf.var_odd / cf.var_even == pytest.approx(ratio, abs=5e-5)

    def test_odd_bias_peak(self):
        # d/dp of (2p-1)(1-p)/p vanishes at p = 1/sqrt(2)
        res = minimize_scalar(lambda p: -efron_steady_state(p).bias_odd, bounds=(0.51, 0.99), method="bounded")
        assert res.x == pytest.approx(1 / math.sqrt(2), abs=1e-4)

    def test_limits(self):
        with pytest.raises(ParameterError):
            efron_steady_state(0.5)
        det = efron_steady_state(1.0)
        assert det.bias(200) == 1.0 and det.bias(199) == 0.0 and det.loss(200) == 0.0

    def test_low_p_needs_bigger_truncation(self):
        st = chain_steady_state("efron:p=0.55")
        assert st.K > 60
        assert st.var_even == pytest.approx(efron_steady_state(0.55).var_even, rel=1e-8)

    def test_random_has_no_steady_state(self):
        with pytest.raises(ConfigError):
            chain_steady_state("random")


class TestAdjustableApprox:
    @pytest.mark.parametrize("a", [1, 2, 3, 4])
    def test_chain_on_three_matches_table(self, a):
        p = 2**a / (1 + 2**a)
        st = stationary_cycle(build_chain(f"adjustable:a={a}", K=3))
        expect_odd = {-3: (1 - p) / (2 * (1 + p)), -1: p / (1 + p), 1: p / (1 + p), 3: (1 - p) / (2 * (1 + p))}
        expect_even = {-2: 1 / (2 * (1 + p)), 0: p / (1 + p), 2: 1 / (2 * (1 + p))}
        sup = st.support.tolist()
        for d, v in expect_odd.items():
            assert st.pi_odd[sup.index(d)] == pytest.approx(v, abs=1e-10)
        for d, v in expect_even.items():
            assert st.pi_even[sup.index(d)] == pytest.approx(v, abs=1e-10)

    @pytest.mark.parametrize(
        "a, row",
        [
            (1, (0.0131, 0.0120, 0.2000, 0.2000)),
            (2, (0.0095, 0.0111, 0.3333, 0.1111)),
            (3, (0.0074, 0.0106, 0.4118, 0.0588)),
            (4, (0.0062, 0.0103, 0.4545, 0.0303)),
        ],
    )
    def test_table_values(self, a, row):
        ap = adjustable_approx(a)
        got = (ap.loss(199), ap.loss(200), ap.bias(199), ap.bias(200))
        assert got == pytest.approx(row, abs=5e-5)
        cf = ap.closed_form(199) + ap.closed_form(200)
        assert (cf[0], cf[2], cf[1], cf[3]) == pytest.approx(got, abs=1e-14)

    def test_negative_a(self):
        with pytest.raises(ParameterError):
            adjustable_approx(-1)


class TestFiniteN:
    @pytest.mark.parametrize("rule", ["efron", "adjustable:a=2", "bigstick:b=2", "imbtol:b=3,p=0.75", "deterministic"])
    def test_matches_path_enumeration(self, rule):
        loss, bias = finite_n_metrics(rule, 10)
        bl, bb = brute_force(rule, 10)
        assert np.allclose(loss, bl, atol=1e-13)
        assert np.allclose(bias, bb, atol=1e-13)

    def test_converges_to_steady_state(self):
        loss, bias = finite_n_metrics("efron", 200)
        cf = efron_steady_state(2 / 3)
        assert bias[199] == pytest.approx(cf.bias(200), abs=1e-10)
        assert 200 * loss[199] == pytest.approx(cf.var_even, abs=1e-5)

    def test_first_patient(self):
        loss, bias = finite_n_metrics("efron", 3)
        assert loss[0] == 1.0 and bias[0] == 0.0


class TestSmith:
    def test_loss_limit(self):
        assert smith_asymptotics(2, 200).loss_inf == pytest.approx(0.2)
        assert smith_asymptotics(5, 200, q=5).loss_inf == pytest.approx(5 / 11)

    def test_bias(self):
        assert smith_asymptotics(5, 200).bias_n == pytest.approx(0.0851, abs=5e-5)

    def test_distribution(self):
        dist = smith_asymptotics(2, 100, q=3).loss_distribution()
        assert dist.mean() == pytest.approx(3 / 5)

    def test_multi_arm_variance(self):
        # two arms: n_1 - n/2 = D/2, Var D ~ n/(1+2 rho)
        assert t_treatment_variance(2, 2, 100) == pytest.approx(100 / 4 / 5)
        with pytest.raises(ParameterError):
            t_treatment_variance(1, 1, 10)

    def test_bad(self):
        with pytest.raises(ParameterError):
            smith_asymptotics(-1, 10)
