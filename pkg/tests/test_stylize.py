"""Stylization operators: statistical identities, forced-draw oracles,
gating, and the reconstruction identity."""

import numpy as np
import pytest
from scipy import stats as scipy_stats

from interstyle import autograd as ag
from interstyle.autograd import Tensor
from interstyle.errors import ConfigurationError
from interstyle.stylize import (DsuDraw, MixDraw, PadainDraw, SampledStyle,
                                StylizerSpec, apply_draw, apply_stylizer,
                                channel_style, draw_style, isg_intervals,
                                style_distribution)


@pytest.fixture
def batch():
    rng = np.random.default_rng(42)
    base = rng.standard_normal((8, 6, 5, 4)).astype(np.float32)
    # distinct per-instance styles
    gain = rng.uniform(0.5, 2.0, size=(8, 6, 1, 1)).astype(np.float32)
    bias = rng.uniform(-1.0, 1.0, size=(8, 6, 1, 1)).astype(np.float32)
    return base * gain + bias


def reconstruct(fmap, eps=1e-6):
    """Normalize then restore each instance's own style."""
    mu, sigma = channel_style(fmap, eps)
    draw = SampledStyle(beta=mu.astype(fmap.dtype), gamma=sigma.astype(fmap.dtype))
    out = apply_draw(Tensor(fmap), StylizerSpec(method="isg"), draw)
    ag.active_tape().clear()
    return out.data


class TestReconstruction:
    def test_self_reconstruction_identity(self, batch):
        np.testing.assert_allclose(reconstruct(batch), batch, atol=1e-4)


class TestIsg:
    def test_rho_zero_gives_batch_mean_style(self, batch):
        spec = StylizerSpec(method="isg", rho=0.0)
        rng = np.random.default_rng(0)
        out = apply_stylizer(Tensor(batch), spec, rng, training=True)
        ag.active_tape().clear()
        mu, sigma = channel_style(batch, spec.eps)
        dist = style_distribution(mu, sigma)
        out_mu = out.data.mean(axis=(2, 3))
        out_sigma = out.data.std(axis=(2, 3))
        for b in range(batch.shape[0]):
            np.testing.assert_allclose(out_mu[b], dist.mu_mu, atol=1e-5)
            np.testing.assert_allclose(out_sigma[b], dist.mu_sigma, atol=1e-3)

    def test_defaults(self):
        spec = StylizerSpec(method="isg")
        assert spec.p == 1.0 and spec.rho == 3.0 and spec.eps == 1e-6
        spec.validate()

    def test_output_stats_match_sampled_style(self, batch):
        spec = StylizerSpec(method="isg")
        rng = np.random.default_rng(5)
        fmap = batch.astype(np.float64)
        draw = draw_style(fmap, spec, rng)
        out = apply_draw(Tensor(fmap, dtype=np.float64), spec, draw)
        ag.active_tape().clear()
        np.testing.assert_allclose(out.data.mean(axis=(2, 3)), draw.beta, atol=1e-5)
        np.testing.assert_allclose(out.data.std(axis=(2, 3)),
                                   np.abs(draw.gamma), atol=1e-3)

    def test_interval_containment_and_uniformity(self, batch):
        spec = StylizerSpec(method="isg")
        rng = np.random.default_rng(7)
        mu, sigma = channel_style(batch, spec.eps)
        dist = style_distribution(mu, sigma)
        beta_lo, beta_hi, gamma_lo, gamma_hi = isg_intervals(dist, spec.rho)
        n_draws = 10000
        betas = np.empty((n_draws, batch.shape[1]))
        gammas = np.empty_like(betas)
        for d in range(n_draws):
            draw = draw_style(batch, spec, rng)
            betas[d] = draw.beta[0]
            gammas[d] = draw.gamma[0]
        assert np.all(betas >= beta_lo) and np.all(betas <= beta_hi)
        assert np.all(gammas >= gamma_lo) and np.all(gammas <= gamma_hi)
        width_b = beta_hi - beta_lo
        for c in range(batch.shape[1]):
            # endpoints reached within 2% of the interval width
            assert betas[:, c].min() <= beta_lo[c] + 0.02 * width_b[c]
            assert betas[:, c].max() >= beta_hi[c] - 0.02 * width_b[c]
            stat = scipy_stats.kstest(
                betas[:, c], scipy_stats.uniform(loc=beta_lo[c],
                                                 scale=width_b[c]).cdf)
            assert stat.pvalue > 0.01, f"channel {c} fails KS: p={stat.pvalue}"

    def test_independence_from_original_styles(self):
        rng_data = np.random.default_rng(3)
        fmap = rng_data.standard_normal((64, 6, 5, 4)).astype(np.float32) \
            * rng_data.uniform(0.5, 2.0, size=(64, 6, 1, 1)).astype(np.float32)
        spec = StylizerSpec(method="isg")
        mu, _ = channel_style(fmap, spec.eps)
        rng = np.random.default_rng(11)
        corr_sum = np.zeros(fmap.shape[1])
        n_draws = 2000
        for _ in range(n_draws):
            draw = draw_style(fmap, spec, rng)
            for c in range(fmap.shape[1]):
                r = np.corrcoef(draw.beta[:, c], mu[:, c])[0, 1]
                corr_sum[c] += abs(r)
        assert np.all(corr_sum / n_draws < 0.12)

    def test_degenerate_batch_collapses_to_point(self):
        fmap = np.tile(np.random.default_rng(1).standard_normal((1, 3, 4, 4)),
                       (5, 1, 1, 1)).astype(np.float32)
        spec = StylizerSpec(method="isg")
        draw = draw_style(fmap, spec, np.random.default_rng(2))
        mu, sigma = channel_style(fmap, spec.eps)
        np.testing.assert_allclose(draw.beta, np.tile(mu[:1], (5, 1)), atol=1e-6)
        np.testing.assert_allclose(draw.gamma, np.tile(sigma[:1], (5, 1)), atol=1e-6)


class TestMixstyle:
    def test_lambda_one_keeps_own_style(self, batch):
        spec = StylizerSpec(method="mixstyle")
        perm = np.roll(np.arange(batch.shape[0]), 1)
        draw = MixDraw(lam=np.ones((batch.shape[0], 1), dtype=np.float32), perm=perm)
        out = apply_draw(Tensor(batch), spec, draw)
        ag.active_tape().clear()
        np.testing.assert_allclose(out.data, reconstruct(batch), atol=1e-4)

    def test_lambda_zero_takes_partner_mean(self, batch):
        spec = StylizerSpec(method="mixstyle")
        perm = np.roll(np.arange(batch.shape[0]), 1)
        draw = MixDraw(lam=np.zeros((batch.shape[0], 1), dtype=np.float32), perm=perm)
        out = apply_draw(Tensor(batch.astype(np.float64), dtype=np.float64),
                         spec, draw)
        ag.active_tape().clear()
        mu, _ = channel_style(batch.astype(np.float64), spec.eps)
        np.testing.assert_allclose(out.data.mean(axis=(2, 3)), mu[perm], atol=1e-5)

    def test_identity_permutation_reconstructs(self, batch):
        spec = StylizerSpec(method="mixstyle")
        rng = np.random.default_rng(0)
        lam = rng.beta(spec.alpha, spec.alpha,
                       size=(batch.shape[0], 1)).astype(np.float32)
        draw = MixDraw(lam=lam, perm=np.arange(batch.shape[0]))
        out = apply_draw(Tensor(batch), spec, draw)
        ag.active_tape().clear()
        np.testing.assert_allclose(out.data, reconstruct(batch), atol=1e-4)


class TestDsu:
    def test_identical_batch_reconstructs(self):
        fmap = np.tile(np.random.default_rng(8).standard_normal((1, 3, 5, 4)),
                       (6, 1, 1, 1)).astype(np.float32)
        spec = StylizerSpec(method="dsu")
        out = apply_stylizer(Tensor(fmap), spec, np.random.default_rng(0),
                             training=True)
        ag.active_tape().clear()
        np.testing.assert_allclose(out.data, reconstruct(fmap), atol=1e-4)

    def test_forced_unit_mean_noise(self, batch):
        spec = StylizerSpec(method="dsu")
        b, c = batch.shape[:2]
        draw = DsuDraw(eps_mu=np.ones((b, c), dtype=np.float32),
                       eps_sigma=np.zeros((b, c), dtype=np.float32))
        fmap = batch.astype(np.float64)
        out = apply_draw(Tensor(fmap, dtype=np.float64), spec, draw)
        ag.active_tape().clear()
        mu, _ = channel_style(fmap, spec.eps)
        expected = mu + mu.std(axis=0)
        np.testing.assert_allclose(out.data.mean(axis=(2, 3)), expected, atol=1e-5)

    def test_styles_correlate_with_originals(self):
        rng_data = np.random.default_rng(13)
        fmap = rng_data.standard_normal((64, 4, 5, 4)).astype(np.float32) \
            + rng_data.uniform(-2, 2, size=(64, 4, 1, 1)).astype(np.float32)
        spec = StylizerSpec(method="dsu")
        mu, _ = channel_style(fmap, spec.eps)
        rng = np.random.default_rng(3)
        corrs = []
        for _ in range(2000):
            draw = draw_style(fmap, spec, rng)
            beta = mu + draw.eps_mu * mu.std(axis=0)
            for c in range(fmap.shape[1]):
                corrs.append(np.corrcoef(beta[:, c], mu[:, c])[0, 1])
        assert np.mean(corrs) > 0.5  # theory: 1/sqrt(2) for unit-scale noise

    def test_negative_gamma_clamped(self, batch):
        spec = StylizerSpec(method="dsu")
        b, c = batch.shape[:2]
        draw = DsuDraw(eps_mu=np.zeros((b, c), dtype=np.float32),
                       eps_sigma=np.full((b, c), -100.0, dtype=np.float32))
        out = apply_draw(Tensor(batch), spec, draw)
        ag.active_tape().clear()
        assert np.all(np.isfinite(out.data))
        # channel std collapses to roughly eps
        assert out.data.std(axis=(2, 3)).max() < 1e-3


class TestPadain:
    def test_identity_permutation_reconstructs(self, batch):
        spec = StylizerSpec(method="padain")
        draw = PadainDraw(perm=np.arange(batch.shape[0]))
        out = apply_draw(Tensor(batch), spec, draw)
        ag.active_tape().clear()
        np.testing.assert_allclose(out.data, reconstruct(batch), atol=1e-4)

    def test_two_instance_swap(self):
        rng = np.random.default_rng(21)
        fmap = (rng.standard_normal((2, 3, 6, 5))
                * rng.uniform(0.5, 2, (2, 3, 1, 1))
                + rng.uniform(-1, 1, (2, 3, 1, 1)))
        spec = StylizerSpec(method="padain")
        draw = PadainDraw(perm=np.array([1, 0]))
        out = apply_draw(Tensor(fmap, dtype=np.float64), spec, draw)
        ag.active_tape().clear()
        mu, sigma = channel_style(fmap, spec.eps)
        np.testing.assert_allclose(out.data.mean(axis=(2, 3)), mu[[1, 0]],
                                   atol=1e-5)
        np.testing.assert_allclose(out.data.std(axis=(2, 3)), sigma[[1, 0]],
                                   atol=1e-3)

    def test_style_multiset_preserved(self, batch):
        spec = StylizerSpec(method="padain")
        rng = np.random.default_rng(33)
        out = apply_stylizer(Tensor(batch.astype(np.float64), dtype=np.float64),
                             spec, rng, training=True)
        ag.active_tape().clear()
        mu_in, sigma_in = channel_style(batch.astype(np.float64), spec.eps)
        mu_out = out.data.mean(axis=(2, 3))
        sorted_in = np.sort(mu_in, axis=0)
        sorted_out = np.sort(mu_out, axis=0)
        np.testing.assert_allclose(sorted_out, sorted_in, atol=1e-5)


class TestGatingAndSafety:
    @pytest.mark.parametrize("method", ["isg", "mixstyle", "dsu", "padain"])
    def test_p_zero_is_identity(self, batch, method):
        spec = StylizerSpec(method=method, p=0.0)
        out = apply_stylizer(Tensor(batch), spec, np.random.default_rng(0),
                             training=True)
        assert out.data is batch or np.array_equal(out.data, batch)

    @pytest.mark.parametrize("method", ["isg", "mixstyle", "dsu", "padain"])
    def test_eval_mode_is_identity(self, batch, method):
        spec = StylizerSpec(method=method, p=1.0)
        out = apply_stylizer(Tensor(batch), spec, np.random.default_rng(0),
                             training=False)
        assert np.array_equal(out.data, batch)

    def test_gate_rate_matches_p(self, batch):
        spec = StylizerSpec(method="isg", p=0.3)
        rng = np.random.default_rng(17)
        fired = sum(draw_style(batch, spec, rng) is not None for _ in range(4000))
        assert abs(fired / 4000 - 0.3) < 0.03

    @pytest.mark.parametrize("method", ["isg", "mixstyle", "dsu", "padain"])
    def test_zero_variance_input_stays_finite(self, method):
        fmap = np.ones((4, 3, 5, 5), dtype=np.float32)
        spec = StylizerSpec(method=method)
        out = apply_stylizer(Tensor(fmap), spec, np.random.default_rng(2),
                             training=True)
        ag.active_tape().clear()
        assert np.all(np.isfinite(out.data))

    def test_unknown_method_rejected(self):
        with pytest.raises(ConfigurationError):
            StylizerSpec(method="fourier").validate()

    def test_invalid_p_rejected(self):
        with pytest.raises(ConfigurationError):
            StylizerSpec(method="isg", p=1.5).validate()
