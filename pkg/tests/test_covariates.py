import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biasedcoin.covariates import (
    DesignState,
    SingularDesign,
    StratumState,
    derivative_function,
    derivative_values,
    discretize,
    minimization_score,
    prob_rule_A,
    prob_rule_B_cov,
    prob_rule_C_family,
    prob_rule_D_cov,
    prob_rule_E_gen,
    prob_rule_J_cov,
    prob_rule_M_ME,
    pseudo_difference,
    update_design,
    variance_loss,
)
from biasedcoin.errors import ParameterError
from biasedcoin.rules import prob_adjustable, prob_bayes


def build(arms, Z):
    st_ = DesignState(Z.shape[1])
    for arm, z in zip(arms, Z):
        update_design(st_, z, arm)
    return st_


def direct_oracle(arms, Z, z_new):
    """Textbook +-1 parametrisation, inverted from scratch."""
    a = np.where(np.asarray(arms) == 1, 1.0, -1.0)
    n = a.size
    F = np.column_stack([np.ones(n), Z])
    G = np.column_stack([a, F])
    Ginv = np.linalg.inv(G.T @ G)
    Finv = np.linalg.inv(F.T @ F)
    var_diff = 4.0 * Ginv[0, 0]  # Var(mu1_hat - mu2_hat) / sigma^2
    loss = n - 4.0 / var_diff
    f = np.concatenate([[1.0], z_new])
    d = [np.r_[s, f] @ Ginv @ np.r_[s, f] - f @ Finv @ f for s in (1.0, -1.0)]
    return loss, np.array(d), Finv, F.T @ a


class TestDesign:
    def test_no_covariates_d(self):
        st_ = build([1, 1, 1, 2], np.zeros((4, 0)))
        d = derivative_values(st_, np.zeros(0))
        assert d == pytest.approx([1 / 12, 3 / 4])
        assert variance_loss(st_) == pytest.approx(1.0)

    def test_balanced_d_is_one_over_n(self):
        st_ = build([1, 2, 2, 1, 1, 2], np.zeros((6, 0)))
        assert derivative_values(st_, np.zeros(0)) == pytest.approx([1 / 6, 1 / 6])
        assert variance_loss(st_) == pytest.approx(0.0, abs=1e-14)

    def test_d_nonnegative(self):
        rng = np.random.default_rng(3)
        st_ = build(rng.integers(1, 3, 40), rng.standard_normal((40, 4)))
        for _ in range(50):
            assert (derivative_values(st_, rng.standard_normal(4)) >= -1e-12).all()

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            arms = rng.integers(1, 3, 30)
            Z = rng.standard_normal((30, 4))
            z_new = rng.standard_normal(4)
            st_ = build(arms, Z)
            loss, d, Finv, b = direct_oracle(arms, Z, z_new)
            assert variance_loss(st_) == pytest.approx(loss, rel=1e-8)
            assert derivative_values(st_, z_new) == pytest.approx(d, rel=1e-8, abs=1e-12)
            assert st_.balance == pytest.approx(b)
            assert st_.inv_info_nuisance == pytest.approx(Finv, rel=1e-8, abs=1e-10)

    def test_batched_equals_single(self):
        rng = np.random.default_rng(5)
        R, n = 6, 25
        arms = rng.integers(1, 3, (R, n))
        Z = rng.standard_normal((R, n, 3))
        batch = DesignState(3, batch=R)
        for i in range(n):
            update_design(batch, Z[:, i], arms[:, i])
        zq = rng.standard_normal((R, 3))
        db = derivative_values(batch, zq)
        lb = variance_loss(batch)
        for r in range(R):
            single = build(arms[r], Z[r])
            assert derivative_values(single, zq[r]) == pytest.approx(db[r], rel=1e-10)
            assert variance_loss(single) == pytest.approx(lb[r], rel=1e-10)

    def test_long_run_stays_accurate(self):
        rng = np.random.default_rng(6)
        n = 2100
        arms, Z = rng.integers(1, 3, n), rng.standard_normal((n, 4))
        st_ = build(arms, Z)
        loss, d, _, _ = direct_oracle(arms, Z, Z[0])
        assert variance_loss(st_) == pytest.approx(loss, rel=1e-8)
        assert derivative_values(st_, Z[0]) == pytest.approx(d, rel=1e-7)

    def test_startup(self):
        st_ = build([1, 2], np.array([[0.3], [0.1]]))
        assert not st_.ready_full
        assert np.isnan(derivative_values(st_, np.array([0.2]))).all()
        with pytest.raises(SingularDesign):
            derivative_function(st_, np.array([0.2]), 1)

    def test_nuisance_ready_before_full(self):
        st_ = build([1, 1], np.array([[0.3], [0.1]]))
        assert st_.ready_nuisance and not st_.ready_full
        assert variance_loss(st_) == pytest.approx(2.0)

    def test_bad_inputs(self):
        st_ = DesignState(2)
        with pytest.raises(ParameterError):
            update_design(st_, np.zeros(3), 1)
        with pytest.raises(ParameterError):
            update_design(st_, np.zeros(2), 3)

    def test_copy_independent(self):
        st_ = build([1, 2, 1, 2], np.zeros((4, 0)))
        other = st_.copy()
        update_design(other, np.zeros(0), 1)
        assert st_.n == 4 and other.n == 5


class TestPseudoDifference:
    def test_recovers_imbalance(self):
        # every state with both arms occupied and n1 + n2 <= 50
        for n in range(2, 51):
            for n1 in range(1, n):
                n2 = n - n1
                d1, d2 = n2 / (n * n1), n1 / (n * n2)
                assert pseudo_difference(d1, d2, n) == pytest.approx(n1 - n2, abs=1e-9)

    def test_from_design_state(self):
        st_ = build([1] * 7 + [2] * 3, np.zeros((10, 0)))
        d1, d2 = derivative_values(st_, np.zeros(0))
        assert pseudo_difference(d1, d2, 10) == pytest.approx(4, abs=1e-9)

    def test_balance_gives_zero(self):
        assert pseudo_difference(0.1, 0.1, 10) == 0.0

    def test_identity_with_covariates(self):
        # D(z) = (L + n w^2) / (2 w) with w = b' (F'F)^{-1} f
        rng = np.random.default_rng(7)
        for _ in range(20):
            arms, Z = rng.integers(1, 3, 40), rng.standard_normal((40, 4))
            z = rng.standard_normal(4)
            st_ = build(arms, Z)
            d1, d2 = derivative_values(st_, z)
            f = np.r_[1.0, z]
            w = st_.balance @ st_.inv_info_nuisance @ f
            L = variance_loss(st_)
            assert pseudo_difference(d1, d2, 40) == pytest.approx((L + 40 * w * w) / (2 * w), rel=1e-7)

    def test_rule_j_equals_adjustable(self):
        for a in (0.5, 1, 2, 3):
            for n in range(2, 51):
                for n1 in range(1, n):
                    n2 = n - n1
                    d1, d2 = n2 / (n * n1), n1 / (n * n2)
                    assert prob_rule_J_cov(a, d1, d2, n) == pytest.approx(prob_adjustable(a, n1 - n2), abs=1e-12)


class TestDesignRules:
    def test_rule_a(self):
        assert prob_rule_A(np.array([1 / 12, 3 / 4])) == pytest.approx([0.1, 0.9])

    def test_rule_b_no_covariates_matches_count_rule(self):
        for n1, n2 in [(3, 1), (5, 5), (2, 9)]:
            n = n1 + n2
            d = np.array([n2 / (n * n1), n1 / (n * n2)])
            assert prob_rule_B_cov(0.1, d)[0] == pytest.approx(prob_bayes(0.1, (n1, n2)))

    def test_rule_e_two_arms(self):
        assert prob_rule_E_gen(np.array([0.3, 0.1]))[0] == pytest.approx(2 / 3)
        assert prob_rule_E_gen(np.array([0.1, 0.3]), 0.75)[0] == pytest.approx(0.25)
        assert prob_rule_E_gen(np.array([0.2, 0.2]))[0] == 0.5

    def test_rule_e_three_arms(self):
        assert prob_rule_E_gen(np.array([0.5, 0.3, 0.1])) == pytest.approx([1 / 2, 1 / 3, 1 / 6])
        assert prob_rule_E_gen(np.array([0.5, 0.5, 0.1])) == pytest.approx([5 / 12, 5 / 12, 1 / 6])

    def test_rule_e_bad_schedule(self):
        with pytest.raises(ParameterError):
            prob_rule_E_gen(np.array([0.5, 0.3, 0.1]), [0.5, 0.5, 0.5])

    def test_rule_d(self):
        assert prob_rule_D_cov(np.array([0.3, 0.1]))[0] == 1.0

    @settings(max_examples=50)
    @given(st.lists(st.floats(0.001, 10), min_size=2, max_size=5))
    def test_probabilities_sum_to_one(self, d):
        d = np.array(d)
        for p in (prob_rule_A(d), prob_rule_B_cov(0.5, d), prob_rule_E_gen(d)):
            assert p.sum() == pytest.approx(1.0)
            assert (p >= 0).all()


class TestStrata:
    def test_discretize(self):
        assert discretize([-0.5, 0.0, 0.2]).tolist() == [0, 0, 1]

    def test_cells_and_margins(self):
        s = StratumState(2)
        for cats, arm in [((0, 1), 1), ((0, 1), 2), ((1, 1), 1), ((0, 0), 1)]:
            s.update(np.array(cats), arm)
        assert s.cell_counts.sum() == 4
        assert (s.margin_counts.sum(axis=(1, 2)) == 4).all()
        assert s.cell_arm_counts(np.array([0, 1])).tolist() == [1, 1]
        assert s.cell_of(np.array([1, 1])).item() == 3

    def test_minimization(self):
        s = StratumState(2)
        s.update(np.array([0, 1]), 1)
        s.update(np.array([0, 0]), 1)
        # new patient (0, 1): covariate 0 level 0 has (2, 0), covariate 1 level 1 has (1, 0)
        assert minimization_score(s, np.array([0, 1]), 1) == 3 + 2
        assert minimization_score(s, np.array([0, 1]), 2) == 1 + 0
        p = prob_rule_M_ME(np.array([5, 1]))
        assert p == 0.0
        assert prob_rule_M_ME(np.array([5, 1]), True, 2 / 3) == pytest.approx(1 / 3)
        assert prob_rule_M_ME(np.array([2, 2])) == 0.5

    def test_cell_rules(self):
        assert prob_rule_C_family(np.array([2, 3]), "C") == 1.0
        assert prob_rule_C_family(np.array([2, 3]), "CE", 0.75) == 0.75
        assert prob_rule_C_family(np.array([4, 1]), "CJ", 2) == pytest.approx(1 / 10)
        with pytest.raises(ParameterError):
            prob_rule_C_family(np.array([4, 1]), "CJ")

    def test_bad_categories(self):
        with pytest.raises(ParameterError):
            StratumState(2).update(np.array([0, 2]), 1)
