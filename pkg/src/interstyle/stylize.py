"""Feature stylization operators.

A feature map's style is its per-channel mean and standard deviation; every
operator here rewrites that style through the normalize-then-rescale
transform ``gamma * (F - mu(F)) / sigma(F) + beta``. Four ways to pick
(beta, gamma) are provided:

* ``isg``       uniform sampling from batch-level style intervals, so the
                new styles are independent from any one instance's style
* ``mixstyle``  convex mixing of two instances' styles
* ``dsu``       Gaussian perturbation of the instance's own style
* ``padain``    style swap along a random batch permutation

Random draws (samples, mixing weights, permutations) are split out from the
differentiable transform so they can be frozen: ``draw_style`` consumes the
rng and returns plain arrays, ``apply_draw`` builds the tape. Sampled
values are constants under differentiation; the normalization statistics
(and any instance styles entering beta/gamma) stay differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError

METHODS = ("none", "isg", "mixstyle", "dsu", "padain")

_VAR_GUARD = 1e-12  # under the sqrt of batch-level std, keeps backward finite


@dataclass
class StylizerSpec:
    """Configuration of one stylization operator.

    ``p`` is the probability that a call transforms the batch at all (the
    gate is drawn once per batch). ``rho`` scales the isg sampling
    intervals; ``alpha`` parameterizes mixstyle's Beta(alpha, alpha).
    """

    method: str = "isg"
    p: float = 1.0
    rho: float = 3.0
    alpha: float = 0.1
    eps: float = 1e-6
    detach_sampled: bool = True
    seed: Optional[int] = None

    def validate(self) -> "StylizerSpec":
        if self.method not in METHODS:
            raise ConfigurationError(
                f"unknown stylizer method {self.method!r}; expected one of {METHODS}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigurationError(f"stylizer p must be in [0,1], got {self.p}")
        if self.rho < 0:
            raise ConfigurationError(f"stylizer rho must be >= 0, got {self.rho}")
        if self.alpha <= 0:
            raise ConfigurationError(f"stylizer alpha must be > 0, got {self.alpha}")
        if self.eps <= 0:
            raise ConfigurationError(f"stylizer eps must be > 0, got {self.eps}")
        if not self.detach_sampled:
            raise ConfigurationError("sampled style values are always detached")
        return self


@dataclass
class StyleDistribution:
    """Batch-level Gaussian fit of the instance styles (population stats)."""

    mu_mu: np.ndarray
    sigma_mu: np.ndarray
    mu_sigma: np.ndarray
    sigma_sigma: np.ndarray


@dataclass
class SampledStyle:
    """Per-instance affine style parameters, one row per batch element."""

    beta: np.ndarray   # [B, C]
    gamma: np.ndarray  # [B, C]


@dataclass
class MixDraw:
    lam: np.ndarray    # [B, 1] mixing weights
    perm: np.ndarray   # [B] partner indices


@dataclass
class DsuDraw:
    eps_mu: np.ndarray     # [B, C] standard-normal perturbations
    eps_sigma: np.ndarray  # [B, C]


@dataclass
class PadainDraw:
    perm: np.ndarray   # [B]


StyleDraw = Union[SampledStyle, MixDraw, DsuDraw, PadainDraw]


def channel_style(feature_map: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-instance style (mu, sigma), population variance plus eps in the sqrt."""
    mu = feature_map.mean(axis=(2, 3))
    var = feature_map.var(axis=(2, 3))
    sigma = np.sqrt(var + eps)
    return mu, sigma


def style_distribution(mu: np.ndarray, sigma: np.ndarray) -> StyleDistribution:
    """Population mean/std of the per-instance styles over the batch axis."""
    return StyleDistribution(
        mu_mu=mu.mean(axis=0),
        sigma_mu=mu.std(axis=0),
        mu_sigma=sigma.mean(axis=0),
        sigma_sigma=sigma.std(axis=0),
    )


def isg_intervals(dist: StyleDistribution, rho: float):
    """The sampling boxes [mu_hat - rho*sigma_hat, mu_hat + rho*sigma_hat]."""
    beta_low = dist.mu_mu - rho * dist.sigma_mu
    beta_high = dist.mu_mu + rho * dist.sigma_mu
    gamma_low = dist.mu_sigma - rho * dist.sigma_sigma
    gamma_high = dist.mu_sigma + rho * dist.sigma_sigma
    return beta_low, beta_high, gamma_low, gamma_high


# ---------------------------------------------------------------------------
# draw phase: consumes the rng, produces frozen constants


def draw_style(feature_map: np.ndarray, spec: StylizerSpec,
               rng: np.random.Generator,
               stats: Optional[tuple[np.ndarray, np.ndarray]] = None
               ) -> Optional[StyleDraw]:
    """Draw the random part of one stylization; None means pass through.

    ``stats`` may carry precomputed (mu, sigma) to avoid recomputing them.
    """
    spec.validate()
    if spec.method == "none":
        return None
    if rng.random() > spec.p:
        return None
    b = feature_map.shape[0]
    c = feature_map.shape[1]
    if spec.method == "isg":
        mu, sigma = stats if stats is not None \
            else channel_style(feature_map, spec.eps)
        dist = style_distribution(mu, sigma)
        beta_low, beta_high, gamma_low, gamma_high = isg_intervals(dist, spec.rho)
        beta = rng.uniform(beta_low, beta_high, size=(b, c))
        gamma = rng.uniform(gamma_low, gamma_high, size=(b, c))
        return SampledStyle(beta=beta.astype(feature_map.dtype),
                            gamma=gamma.astype(feature_map.dtype))
    if spec.method == "mixstyle":
        lam = rng.beta(spec.alpha, spec.alpha, size=(b, 1))
        return MixDraw(lam=lam.astype(feature_map.dtype), perm=rng.permutation(b))
    if spec.method == "dsu":
        return DsuDraw(
            eps_mu=rng.standard_normal((b, c)).astype(feature_map.dtype),
            eps_sigma=rng.standard_normal((b, c)).astype(feature_map.dtype))
    return PadainDraw(perm=rng.permutation(b))


# ---------------------------------------------------------------------------
# apply phase: differentiable transform with the draw as constants


def _as4d(t: Tensor) -> Tensor:
    return ag.reshape(t, (t.shape[0], t.shape[1], 1, 1))


def _batch_std(t: Tensor) -> Tensor:
    """Population std over the batch axis of a [B, C] tensor (differentiable)."""
    centered = ag.sub(t, ag.tmean(t, axis=0))
    var = ag.tmean(ag.mul(centered, centered), axis=0)
    return ag.sqrt(ag.add(var, _VAR_GUARD))


def apply_draw(feature_map: Tensor, spec: StylizerSpec, draw: StyleDraw) -> Tensor:
    """Restyle the map using the frozen draw; differentiable in the input."""
    mu, sigma = ag.channel_stats(feature_map, spec.eps)
    normalized = ag.div(ag.sub(feature_map, _as4d(mu)), _as4d(sigma))
    if isinstance(draw, SampledStyle):
        beta = Tensor(draw.beta, dtype=feature_map.dtype)
        gamma = Tensor(draw.gamma, dtype=feature_map.dtype)
    elif isinstance(draw, MixDraw):
        lam = Tensor(draw.lam, dtype=feature_map.dtype)
        one_minus = Tensor(1.0 - draw.lam, dtype=feature_map.dtype)
        beta = ag.add(ag.mul(lam, mu), ag.mul(one_minus, ag.take_batch(mu, draw.perm)))
        gamma = ag.add(ag.mul(lam, sigma),
                       ag.mul(one_minus, ag.take_batch(sigma, draw.perm)))
    elif isinstance(draw, DsuDraw):
        noise_mu = ag.mul(Tensor(draw.eps_mu, dtype=feature_map.dtype),
                          _batch_std(mu))
        noise_sigma = ag.mul(Tensor(draw.eps_sigma, dtype=feature_map.dtype),
                             _batch_std(sigma))
        beta = ag.add(mu, noise_mu)
        gamma = ag.maximum(ag.add(sigma, noise_sigma), spec.eps)
    elif isinstance(draw, PadainDraw):
        beta = ag.take_batch(mu, draw.perm)
        gamma = ag.take_batch(sigma, draw.perm)
    else:
        raise ConfigurationError(f"unknown style draw {type(draw).__name__}")
    return ag.add(ag.mul(normalized, _as4d(gamma)), _as4d(beta))


def apply_stylizer(feature_map: Tensor, spec: StylizerSpec,
                   rng: np.random.Generator, training: bool) -> Tensor:
    """Gate, draw, and apply in one step; identity outside training.

    Outside gradient tracking the transform runs as in-place numpy work,
    which keeps the classifier-update forward pass cheap.
    """
    if not training or spec.method == "none":
        return feature_map
    if ag.grad_enabled():
        draw = draw_style(feature_map.data, spec, rng)
        if draw is None:
            return feature_map
        return apply_draw(feature_map, spec, draw)
    data = feature_map.data
    mu, sigma = channel_style(data, spec.eps)
    draw = draw_style(data, spec, rng, stats=(mu, sigma))
    if draw is None:
        return feature_map
    beta, gamma = styles_after_draw(mu, sigma, spec, draw)
    out = data - mu[:, :, None, None]
    out /= sigma[:, :, None, None]
    out *= gamma[:, :, None, None].astype(data.dtype, copy=False)
    out += beta[:, :, None, None].astype(data.dtype, copy=False)
    return Tensor(out)


# ---------------------------------------------------------------------------
# style-space views of each operator, used by the diagnostics exporter


def styles_after_draw(mu: np.ndarray, sigma: np.ndarray, spec: StylizerSpec,
                      draw: StyleDraw) -> tuple[np.ndarray, np.ndarray]:
    """The (beta, gamma) styles the draw would imprint on the batch."""
    if isinstance(draw, SampledStyle):
        return draw.beta, draw.gamma
    if isinstance(draw, MixDraw):
        lam = draw.lam
        return (lam * mu + (1 - lam) * mu[draw.perm],
                lam * sigma + (1 - lam) * sigma[draw.perm])
    if isinstance(draw, DsuDraw):
        beta = mu + draw.eps_mu * mu.std(axis=0)
        gamma = np.maximum(sigma + draw.eps_sigma * sigma.std(axis=0), spec.eps)
        return beta, gamma
    if isinstance(draw, PadainDraw):
        return mu[draw.perm], sigma[draw.perm]
    raise ConfigurationError(f"unknown style draw {type(draw).__name__}")
