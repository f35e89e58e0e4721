"""Conditional intensity, compensator estimators, sequence log-likelihood."""

import math

import numpy as np
import numpy.testing as npt
import pytest

import oracles
from conftest import random_dataset, single_batch, small_config
from tppkit import autodiff as ad
from tppkit.autodiff import Tensor, gradient_check
from tppkit.data import Dataset, Event, EventSequence, make_batches
from tppkit.intensity import (IntensityQuery, IntensityView,
                              batch_log_likelihood, compensator_mc,
                              compensator_trapezoid, sequence_loglik,
                              total_intensity, type_intensity)
from tppkit.recurrence import build_model
from tppkit.seeding import derive_rng
from tppkit.synthgen import HawkesParams, exact_loglik


def make_view(rng, num_types=3, dim=8, beta=1.0):
    return IntensityView(
        b=Tensor(rng.normal(0.2, 0.4, size=num_types), True),
        alpha=Tensor(rng.normal(-0.1, 0.05, size=num_types), True),
        w=Tensor(rng.normal(0.0, 0.3, size=(num_types, dim)), True),
        beta=beta,
    )


def constant_view(k_logit, num_types=1, dim=8, beta=1.0):
    """alpha = w = 0: the intensity is softplus(b) everywhere."""
    return IntensityView(
        b=Tensor(np.full(num_types, k_logit), True),
        alpha=Tensor(np.zeros(num_types), True),
        w=Tensor(np.zeros((num_types, dim)), True),
        beta=beta,
    )


def seq_at(times, types=None):
    types = types or [1] * len(times)
    return EventSequence([Event(float(t), int(c)) for t, c in zip(times, types)])


class TestPointEvaluations:
    def test_zero_params_give_ln2(self):
        view = constant_view(0.0)
        q = IntensityQuery(t=1.5, interval_start=1.0, hidden=Tensor(np.zeros(8)))
        assert type_intensity(q, 1, view).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_positive_for_random_inputs(self, rng):
        view = make_view(rng)
        for _ in range(50):
            q = IntensityQuery(t=float(rng.uniform(1, 3)), interval_start=1.0,
                               hidden=Tensor(rng.normal(size=8)))
            assert type_intensity(q, int(rng.integers(1, 4)), view).item() > 0.0

    def test_matches_scalar_recomputation(self, rng):
        view = make_view(rng, beta=1.7)
        h = rng.normal(size=8)
        q = IntensityQuery(t=2.4, interval_start=1.9, hidden=Tensor(h))
        for c in range(1, 4):
            expected = oracles.intensity_scalar(
                view.b.data[c - 1], view.alpha.data[c - 1], view.w.data[c - 1],
                h, 2.4, 1.9, beta=1.7)
            assert type_intensity(q, c, view).item() == pytest.approx(expected, rel=1e-12)

    def test_total_is_sum_of_types(self, rng):
        view = make_view(rng)
        h = rng.normal(size=8)
        q = IntensityQuery(t=2.0, interval_start=1.0, hidden=Tensor(h))
        total = total_intensity(q, view).item()
        parts = sum(type_intensity(q, c, view).item() for c in (1, 2, 3))
        assert total == pytest.approx(parts, rel=1e-12)
        assert total >= max(type_intensity(q, c, view).item() for c in (1, 2, 3))

    def test_single_type_total_equals_type(self, rng):
        view = make_view(rng, num_types=1)
        q = IntensityQuery(t=1.2, interval_start=1.0, hidden=Tensor(rng.normal(size=8)))
        assert total_intensity(q, view).item() == pytest.approx(
            type_intensity(q, 1, view).item(), rel=1e-14)

    def test_symmetric_types_give_multiples(self):
        view = constant_view(0.3, num_types=3)
        q = IntensityQuery(t=2.0, interval_start=1.0, hidden=Tensor(np.zeros(8)))
        assert total_intensity(q, view).item() == pytest.approx(
            3 * type_intensity(q, 1, view).item(), rel=1e-14)

    def test_monotone_in_background(self, rng):
        view = make_view(rng)
        h = rng.normal(size=8)
        q = IntensityQuery(t=2.0, interval_start=1.0, hidden=Tensor(h))
        before = type_intensity(q, 2, view).item()
        view.b.data[1] += 0.5
        assert type_intensity(q, 2, view).item() > before

    def test_bad_query_rejected(self):
        with pytest.raises(ValueError):
            IntensityQuery(t=0.5, interval_start=1.0, hidden=Tensor(np.zeros(8)))
        view = constant_view(0.0)
        q = IntensityQuery(t=1.5, interval_start=1.0, hidden=Tensor(np.zeros(8)))
        with pytest.raises(IndexError):
            type_intensity(q, 5, view)


class TestCompensators:
    def test_constant_intensity_exact_for_any_samples(self, rng):
        view = constant_view(0.4, num_types=2)
        k = 2 * oracles.softplus_scalar(0.4)
        seq = seq_at([1.0, 2.5, 2.9, 4.0])
        hidden = Tensor(rng.normal(size=(4, 8)) * 0.0)
        for m in (1, 3, 10):
            est = compensator_mc(seq, hidden, view, m, derive_rng(m)).item()
            assert est == pytest.approx(k * 3.0, rel=1e-12)
        assert compensator_trapezoid(seq, hidden, view).item() == pytest.approx(
            k * 3.0, rel=1e-12)

    def test_trapezoid_exact_for_linear_intensity(self):
        # huge softplus beta makes softplus(x) = x exactly for x >= 0.05,
        # so the per-interval intensity is linear and the rule is exact
        view = IntensityView(b=Tensor(np.array([1.0])),
                             alpha=Tensor(np.array([0.5])),
                             w=Tensor(np.zeros((1, 8))), beta=1000.0)
        times = [1.0, 1.8, 3.1]
        seq = seq_at(times)
        hidden = Tensor(np.zeros((3, 8)))
        expected = 0.0
        for left, right in zip(times[:-1], times[1:]):
            delta = right - left
            expected += delta + 0.5 * delta * delta / (2 * left)
        got = compensator_trapezoid(seq, hidden, view).item()
        assert got == pytest.approx(expected, rel=1e-12)

    def test_mc_mean_matches_fine_grid(self, rng):
        view = make_view(rng)
        seq = seq_at([0.8, 1.7, 2.1, 3.4], [1, 3, 2, 1])
        hidden_np = rng.normal(size=(4, 8))
        oracle = oracles.riemann_compensator(
            seq.times(), hidden_np, view.b.data, view.alpha.data, view.w.data)
        estimates = np.array([
            compensator_mc(seq, Tensor(hidden_np), view, 10, derive_rng(100 + r)).item()
            for r in range(200)])
        se = estimates.std(ddof=1) / math.sqrt(len(estimates))
        assert abs(estimates.mean() - oracle) < 3 * se + 1e-9

    def test_mc_variance_shrinks_like_one_over_m(self, rng):
        view = make_view(rng)
        seq = seq_at([0.8, 1.7, 2.1, 3.4], [1, 3, 2, 1])
        hidden = Tensor(rng.normal(size=(4, 8)))
        ms = [4, 16, 64, 256]
        variances = []
        for m in ms:
            vals = [compensator_mc(seq, hidden, view, m, derive_rng(m, r)).item()
                    for r in range(300)]
            variances.append(np.var(vals, ddof=1))
        slope = np.polyfit(np.log(ms), np.log(variances), 1)[0]
        assert abs(slope - (-1.0)) < 0.2

    def test_trapezoid_close_to_fine_grid(self, rng):
        for trial in range(5):
            view = make_view(rng)
            seq = seq_at(np.cumsum(rng.uniform(0.2, 1.0, size=5)) + 0.5)
            hidden_np = rng.normal(size=(5, 8)) * 0.5
            oracle = oracles.riemann_compensator(
                seq.times(), hidden_np, view.b.data, view.alpha.data, view.w.data)
            got = compensator_trapezoid(seq, Tensor(hidden_np), view).item()
            assert abs(got - oracle) / oracle < 0.05

    def test_length_one_sequence_scores_zero(self, rng):
        view = make_view(rng)
        seq = seq_at([1.0])
        hidden = Tensor(rng.normal(size=(1, 8)))
        assert compensator_mc(seq, hidden, view, 5, derive_rng(0)).item() == 0.0
        assert compensator_trapezoid(seq, hidden, view).item() == 0.0
        assert sequence_loglik(seq, hidden, view).item() == 0.0

    def test_compensators_nonnegative(self, rng):
        for _ in range(10):
            view = make_view(rng)
            seq = seq_at(np.cumsum(rng.uniform(0.1, 1.0, size=4)) + 0.2)
            hidden = Tensor(rng.normal(size=(4, 8)))
            assert compensator_mc(seq, hidden, view, 8, derive_rng(7)).item() >= 0.0
            assert compensator_trapezoid(seq, hidden, view).item() >= 0.0


class TestSequenceLoglik:
    def test_homogeneous_poisson_closed_form(self):
        view = constant_view(0.9)
        k = oracles.softplus_scalar(0.9)
        seq = seq_at([1.0, 2.0, 3.0])
        hidden = Tensor(np.zeros((3, 8)))
        expected = 2 * math.log(k) - 2 * k
        got_mc = sequence_loglik(seq, hidden, view, "mc", 4, derive_rng(3)).item()
        got_tz = sequence_loglik(seq, hidden, view, "trapezoid").item()
        assert got_mc == pytest.approx(expected, abs=1e-12)
        assert got_tz == pytest.approx(expected, abs=1e-12)

    def test_matches_classical_oracle_in_degenerate_case(self):
        # alpha = w = 0 makes the model a homogeneous multivariate Poisson,
        # which the classical closed-form oracle also covers (a = 0)
        view = constant_view(0.25, num_types=2)
        mu_c = oracles.softplus_scalar(0.25)
        seq = seq_at([0.5, 1.4, 2.2, 3.0], [1, 2, 2, 1])
        hidden = Tensor(np.zeros((4, 8)))
        model_ll = sequence_loglik(seq, hidden, view, "trapezoid").item()
        classical = HawkesParams(np.array([mu_c, mu_c]), np.zeros((2, 2)), 1.0)
        oracle = exact_loglik(classical, seq, 3.0) - math.log(mu_c)
        assert model_ll == pytest.approx(oracle, rel=1e-12)

    def test_matches_straight_line_oracle(self, rng):
        view = make_view(rng)
        times = np.cumsum(rng.uniform(0.3, 1.0, size=5)) + 0.4
        types = rng.integers(1, 4, size=5)
        seq = seq_at(times, list(types))
        hidden_np = rng.normal(size=(5, 8)) * 0.5
        oracle = oracles.model_loglik_oracle(
            times, types, hidden_np, view.b.data, view.alpha.data, view.w.data)
        got = sequence_loglik(seq, Tensor(hidden_np), view, "trapezoid").item()
        # trapezoid bias vs the fine-grid oracle is the only difference
        assert got == pytest.approx(oracle, rel=2e-3)

    def test_zero_start_interval_drops_slope(self):
        view = IntensityView(b=Tensor(np.array([0.5])),
                             alpha=Tensor(np.array([-2000.0])),
                             w=Tensor(np.zeros((1, 8))), beta=1.0)
        seq = seq_at([0.0, 1.0])
        hidden = Tensor(np.zeros((2, 8)))
        got = sequence_loglik(seq, hidden, view, "trapezoid").item()
        k = oracles.softplus_scalar(0.5)
        assert got == pytest.approx(math.log(k) - k, abs=1e-12)

    def test_gradients_pass_fd_both_estimators(self, rng):
        for estimator in ("mc", "trapezoid"):
            view = make_view(rng)
            seq = seq_at(np.cumsum(rng.uniform(0.3, 1.0, size=4)) + 0.4,
                         list(rng.integers(1, 4, size=4)))
            hidden = Tensor(rng.normal(size=(4, 8)) * 0.5, True)
            named = {"b": view.b, "alpha": view.alpha, "w": view.w, "h": hidden}

            def loss():
                return sequence_loglik(seq, hidden, view, estimator, 6, derive_rng(9))

            report = gradient_check(loss, named)
            assert report.ok(), (estimator, report.summary())


class TestBatchPath:
    def test_batched_equals_per_sequence(self, rng):
        cfg = small_config()
        params = build_model(cfg, 3, seed=21)
        ds = random_dataset(rng, 4, 3, 2, 6)
        batch = single_batch(ds)
        from tppkit.recurrence import forward
        hidden, _ = forward(params, batch)
        view = IntensityView.from_model(params)

        for estimator in ("trapezoid", "mc"):
            total, rows = batch_log_likelihood(params, batch, hidden,
                                               estimator, 5, mc_seed=77)
            for r, seq in enumerate(ds.sequences):
                ln = len(seq)
                h_seq = Tensor(hidden.data[r, :ln, :])
                ll = sequence_loglik(seq, h_seq, view, estimator, 5,
                                     derive_rng(77, r))
                assert rows[r] == pytest.approx(ll.item(), rel=1e-12, abs=1e-12)
            assert total.item() == pytest.approx(rows.sum(), rel=1e-12)

    def test_large_sample_chunking_matches_single_shot(self, rng):
        cfg = small_config()
        params = build_model(cfg, 2, seed=22)
        ds = random_dataset(rng, 2, 2, 3, 5)
        batch = single_batch(ds)
        from tppkit.recurrence import forward
        hidden, _ = forward(params, batch)
        with ad.no_grad():
            _, rows_chunked = batch_log_likelihood(params, batch, hidden,
                                                   "mc", 2500, mc_seed=5)
        _, rows_single = batch_log_likelihood(params, batch, hidden,
                                              "mc", 2500, mc_seed=5)
        npt.assert_allclose(rows_chunked, rows_single, rtol=1e-12)
