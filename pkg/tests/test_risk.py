import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import log_ndtr
from scipy.stats import norm

from benign_leaky.errors import ConfigurationError, ContractViolation
from benign_leaky.limit import build_block_gram, min_norm_direction
from benign_leaky.mixture import MixtureSpec, SigmaSpec
from benign_leaky.network import NeuronSplit
from benign_leaky.risk import (
    MisalignedDirectionWarning,
    bayes_error,
    error_report,
    exact_gaussian_error,
    gaussian_bracket,
    kappa,
    log_kappa,
    mc_error,
    mc_error_fn,
    phase_summary,
)

from conftest import random_data

IDENT = SigmaSpec()
DIAG41 = SigmaSpec(kind="diagonal", values=[4.0, 1.0])


def spec(p, mu, **kw):
    return MixtureSpec(p=p, n=1, mu=mu, **kw)


class TestKappa:
    @pytest.mark.parametrize("t", [-3.0, -0.5, 0.0, 0.3, 2.0, 5.0, 7.9, 8.0])
    def test_matches_normal_tail(self, t):
        assert kappa(t) == pytest.approx(norm.sf(t), rel=1e-13, abs=1e-300)

    @pytest.mark.parametrize("t", [8.5, 12.0, 30.0, 100.0, 1000.0])
    def test_asymptotic_tail(self, t):
        assert log_kappa(t) == pytest.approx(float(log_ndtr(-t)), rel=1e-13)
        assert kappa(t) > 0 or t > 38
        if t < 37:
            assert kappa(t) == pytest.approx(norm.sf(t), rel=1e-12)

    def test_continuity_at_switch(self):
        assert kappa(np.nextafter(8.0, 9.0)) == pytest.approx(kappa(8.0), rel=1e-12)

    def test_vectorized(self):
        t = np.array([0.0, 1.0, 9.0])
        np.testing.assert_allclose(kappa(t), norm.sf(t), rtol=1e-13)

    @settings(max_examples=200, deadline=None)
    @given(t=st.floats(-20, 20))
    def test_reflection(self, t):
        assert kappa(t) + kappa(-t) == pytest.approx(1.0, abs=1e-15)


class TestExact:
    def test_aligned(self):
        assert exact_gaussian_error([1.0, 0.0], [2.0, 0.0], IDENT) == pytest.approx(0.02275, abs=5e-6)
        assert exact_gaussian_error([1.0, 0.0], [2.0, 0.0], IDENT) == pytest.approx(norm.sf(2.0), rel=1e-14)

    def test_orthogonal_is_half(self):
        with pytest.warns(MisalignedDirectionWarning):
            assert exact_gaussian_error([0.0, 1.0], [2.0, 0.0], IDENT) == 0.5

    def test_misaligned_returns_complement(self):
        with pytest.warns(MisalignedDirectionWarning):
            v = exact_gaussian_error([-1.0, 0.0], [1.0, 0.0], IDENT)
        assert v == pytest.approx(1 - norm.sf(1.0), rel=1e-14)

    @settings(max_examples=50, deadline=None)
    @given(c=st.floats(1e-8, 1e8), seed=st.integers(0, 1000))
    def test_scale_invariance(self, c, seed):
        r = np.random.default_rng(seed)
        w, mu = r.standard_normal(6), r.standard_normal(6)
        if w @ mu <= 0:
            w = -w
        assert exact_gaussian_error(c * w, mu, IDENT) == pytest.approx(exact_gaussian_error(w, mu, IDENT), rel=1e-12)

    def test_zero_variance_rejected(self):
        with pytest.raises(ContractViolation):
            exact_gaussian_error([0.0, 0.0], [1.0, 0.0], IDENT)


class TestBracket:
    def test_identity_degenerates(self, rng):
        w, mu = rng.standard_normal(5), rng.standard_normal(5)
        w = w if w @ mu > 0 else -w
        b = gaussian_bracket(w, mu, IDENT)
        ex = exact_gaussian_error(w, mu, IDENT)
        assert b.lower == pytest.approx(ex, rel=1e-14) and b.upper == pytest.approx(ex, rel=1e-14)

    def test_diag_hand_values(self):
        w, mu = [1.0, 0.0], [2.0, 0.0]
        assert exact_gaussian_error(w, mu, DIAG41) == pytest.approx(norm.sf(1.0), rel=1e-14)
        b = gaussian_bracket(w, mu, DIAG41)
        assert b.lower == pytest.approx(norm.sf(2.0), rel=1e-14)
        assert b.upper == pytest.approx(norm.sf(1.0), rel=1e-14)

    def test_zero_direction(self):
        with pytest.raises(ContractViolation):
            gaussian_bracket([0.0, 0.0], [1.0, 0.0], IDENT)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_bracket_holds(self, seed):
        r = np.random.default_rng(seed)
        s = SigmaSpec(kind="diagonal", values=r.uniform(0.2, 5.0, size=6))
        w, mu = r.standard_normal(6), r.standard_normal(6)
        w = w if w @ mu > 0 else -w
        b = gaussian_bracket(w, mu, s)
        ex = exact_gaussian_error(w, mu, s)
        assert b.lower - 1e-15 <= ex <= b.upper + 1e-15

    def test_strong_signal_limit_direction(self):
        # isotropic Gaussian, n |mu|^2 >> R: error of w_bar sits below kappa(c |mu|) for a realized c
        d = random_data(16, 256, 64.0, seed=0)
        ld = min_norm_direction(d, build_block_gram(d, 0.5, NeuronSplit(2, 4)))
        ex = exact_gaussian_error(ld.w_bar, d.mu, IDENT)
        c = float(ld.w_bar @ d.mu) / (np.linalg.norm(ld.w_bar) * 8.0)
        assert 0 < c <= 1
        assert ex <= kappa(c * 8.0) * (1 + 1e-12)


class TestMonteCarlo:
    def test_agrees_with_exact_in_most_seeds(self):
        mu = np.array([1.0, 0.0, 0.0])
        sp = spec(3, mu)
        w = np.array([1.0, 0.5, -0.2])
        ex = exact_gaussian_error(w, mu, IDENT)
        hits = 0
        for s in range(40):
            e = mc_error(w, sp, 100_000, seed=s)
            hits += abs(e.estimate - ex) <= 4 * e.stderr
        assert hits >= 38

    def test_separated_classes(self):
        mu = np.array([20.0, 0.0])
        assert mc_error(mu, spec(2, mu), 10_000, seed=0).estimate == 0.0

    def test_flip(self):
        mu = np.array([0.5, 0.0])
        w = np.array([1.0, 1.0])
        a = mc_error(w, spec(2, mu), 20_000, seed=3)
        b = mc_error(-w, spec(2, mu), 20_000, seed=3)
        assert a.ties == 0 and b.ties == 0
        assert a.estimate + b.estimate == pytest.approx(1.0, abs=1e-12)

    def test_rademacher_ties_count_as_errors(self):
        sp = spec(2, [0.0, 0.0], noise_law={"kind": "rademacher_subgauss"})
        e = mc_error([1.0, 1.0], sp, 4000, seed=0)
        assert e.ties > 0
        assert e.estimate == pytest.approx(0.5 + 0.5 * e.ties / 4000 * 1.0, abs=0.05)

    def test_sample_size_consistency(self):
        mu = np.array([0.8, 0.0, 0.0, 0.0])
        sp = spec(4, mu)
        w = np.array([1.0, 0.3, 0.3, 0.0])
        small = mc_error(w, sp, 10_000, seed=1)
        big = mc_error(w, sp, 1_000_000, seed=2)
        pooled = math.hypot(small.stderr, big.stderr)
        assert abs(small.estimate - big.estimate) <= 5 * pooled

    def test_workers_do_not_change_result(self, monkeypatch):
        import benign_leaky.risk as risk
        monkeypatch.setattr(risk, "MC_CHUNK_ELEMENTS", 1000)
        mu = np.array([0.5, 0.0])
        a = mc_error_fn(lambda x: x @ np.array([1.0, 0.2]), spec(2, mu), 5000, seed=9, workers=1)
        b = mc_error_fn(lambda x: x @ np.array([1.0, 0.2]), spec(2, mu), 5000, seed=9, workers=4)
        assert a == b

    def test_minimum_samples(self):
        with pytest.raises(ContractViolation):
            mc_error([1.0], spec(1, [1.0]), 999, seed=0)


class TestPhase:
    def test_arithmetic(self):
        ps = phase_summary(100, 1.0, 100.0, 1.0)
        assert ps.exponent == pytest.approx(0.5)
        assert ps.regime == "weak"

    def test_limits(self):
        weak = phase_summary(10, 0.01, 1e6, 1.0)
        assert weak.exponent == pytest.approx(10 * 1e-4 / 1e6, rel=1e-4)
        strong = phase_summary(10**6, 2.0, 1.0, 1.0)
        assert strong.regime == "strong"
        assert strong.exponent == pytest.approx(2.0, rel=1e-6)

    def test_heavy_tail_has_no_exponent(self):
        assert phase_summary(10, 1.0, 10.0, None).exponent is None

    def test_validation(self):
        with pytest.raises(ContractViolation):
            phase_summary(0, 1.0, 1.0, 1.0)


class TestBayes:
    def test_values(self):
        assert bayes_error([2.0, 0.0], IDENT) == pytest.approx(norm.sf(2.0), rel=1e-14)
        assert bayes_error([0.0, 0.0], IDENT) == 0.5
        assert bayes_error([2.0, 0.0], DIAG41) == pytest.approx(norm.sf(1.0), rel=1e-14)


class TestReport:
    def test_gaussian_fields(self):
        mu = np.zeros(50)
        mu[0] = 2.0
        sp = MixtureSpec(p=50, n=10, mu=mu)
        w = mu + 0.1
        rep = error_report(w, sp, 10, mc_samples=20_000, seed=1)
        assert rep.exact_gaussian == pytest.approx(exact_gaussian_error(w, mu, IDENT))
        assert rep.bracket_holds and not rep.misaligned
        assert rep.bound_exponent == pytest.approx(10 * 16 / (40 + 50))
        assert rep.pm_bound_shape is None
        assert rep.mc_samples == 20_000 and 0 <= rep.mc_estimate <= 1
        assert set(rep.csv_row()) == set(rep.to_dict())

    def test_poly_tail(self):
        mu = np.array([1.0, 0.0, 0.0])
        sp = MixtureSpec(p=3, n=4, mu=mu, noise_law={"kind": "poly_tail", "r": 3.0})
        rep = error_report(mu, sp, 4)
        assert rep.exact_gaussian is None and rep.bracket_holds is None
        assert rep.bound_exponent is None
        assert rep.pm_bound_shape == pytest.approx(1.0 * (1 + 3 / 4))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            error_report(-mu, sp, 4)
