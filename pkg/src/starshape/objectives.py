"""Adversarial objectives and their parameter-update rules.

Three objectives are supported. The cross-entropy game scores a
probability-head discriminator; the discriminator ascends the clamped
log-likelihood split and the generator descends the non-saturating
surrogate. The Wasserstein surrogate scores an unconstrained-head critic
by the mean real/fake score gap, constrained either by weight clipping or
by a gradient penalty that pulls the critic's input-gradient norm toward
one on real/fake interpolates. The star step updates one critic per
red-green pair and accumulates all pair gradients into the shared
generator before a single parameter update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import ConfigError, ContractError, NumericError

PROB_EPS = 1e-7
CLIP_BOUND = 0.01
GP_WEIGHT = 10.0

OBJECTIVES = ("gan", "wgan", "wgan-gp")


def _check_finite(name, t):
    if not torch.isfinite(t).all():
        raise NumericError(f"{name} contains non-finite values")


def _clamp_probs(t):
    return t.clamp(PROB_EPS, 1.0 - PROB_EPS)


def gan_d_loss(d_real, d_fake):
    """Mean log D(real) + mean log(1 - D(fake)); the discriminator ascends this."""
    _check_finite("d_real", d_real)
    _check_finite("d_fake", d_fake)
    return torch.log(_clamp_probs(d_real)).mean() + torch.log1p(-_clamp_probs(d_fake)).mean()


def gan_g_loss_nonsaturating(d_fake):
    """-mean log D(fake); the generator descends this instead of the saturating form."""
    _check_finite("d_fake", d_fake)
    return -torch.log(_clamp_probs(d_fake)).mean()


def wgan_critic_estimate(d_real, d_fake):
    """Mean critic score gap, the duality surrogate the critic ascends."""
    return d_real.mean() - d_fake.mean()


def clip_weights(module: torch.nn.Module, bound: float = CLIP_BOUND) -> torch.nn.Module:
    """Clamp every parameter into [-bound, bound] in place."""
    if bound <= 0:
        raise ConfigError("clip bound must be positive")
    with torch.no_grad():
        for p in module.parameters():
            p.clamp_(-bound, bound)
    return module


def gradient_penalty(
    discriminator,
    real: torch.Tensor,
    fake: torch.Tensor,
    weight: float = GP_WEIGHT,
    eps: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Two-sided penalty on the critic's input-gradient norm.

    Interpolates x_hat = eps * real + (1 - eps) * fake with one shared eps
    per sample, and returns weight * mean((||grad_x D(x_hat)||_2 - 1)^2).
    The result stays differentiable w.r.t. the critic parameters, so it can
    sit inside the critic loss (this requires double backward support).
    """
    if real.shape != fake.shape:
        raise ConfigError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} batches differ")
    if eps is None:
        eps = torch.rand(
            real.shape[0], *([1] * (real.dim() - 1)),
            generator=generator, dtype=real.dtype, device=real.device,
        )
    else:
        eps = eps.to(dtype=real.dtype).reshape(real.shape[0], *([1] * (real.dim() - 1)))
        if eps.min() < 0 or eps.max() > 1:
            raise ConfigError("eps draws must lie in [0, 1]")
    x_hat = (eps * real.detach() + (1.0 - eps) * fake.detach()).requires_grad_(True)
    scores = discriminator(x_hat)
    if not scores.requires_grad:
        raise ContractError("discriminator output is detached; cannot take input gradients")
    (grads,) = torch.autograd.grad(
        scores.sum(), x_hat, create_graph=True, retain_graph=True
    )
    norms = grads.flatten(1).norm(2, dim=1)
    return weight * ((norms - 1.0) ** 2).mean()


@dataclass(frozen=True)
class PairLoss:
    d_loss: float
    g_loss: float
    penalty: float | None = None


@dataclass(frozen=True)
class LossReport:
    """Losses of one training step; star steps carry a per-pair breakdown."""

    d_loss: float
    g_loss: float
    penalty: float | None = None
    pairs: tuple = ()

    def is_finite(self) -> bool:
        values = [self.d_loss, self.g_loss]
        if self.penalty is not None:
            values.append(self.penalty)
        return all(math.isfinite(v) for v in values)


def critic_update(discriminator, d_opt, real, fake, objective, gp_weight, clip_bound,
                   gp_eps=None, gp_generator=None):
    d_real = discriminator(real)
    d_fake = discriminator(fake)
    penalty = None
    if objective == "gan":
        loss = -gan_d_loss(d_real, d_fake)
    elif objective == "wgan":
        loss = -wgan_critic_estimate(d_real, d_fake)
    else:
        penalty = gradient_penalty(
            discriminator, real, fake, gp_weight, eps=gp_eps, generator=gp_generator
        )
        loss = -wgan_critic_estimate(d_real, d_fake) + penalty
    d_opt.zero_grad(set_to_none=True)
    loss.backward()
    d_opt.step()
    if objective == "wgan":
        clip_weights(discriminator, clip_bound)
    return float(loss.detach()), None if penalty is None else float(penalty.detach())


def _generator_term(d_fake, objective):
    if objective == "gan":
        return gan_g_loss_nonsaturating(d_fake)
    return -d_fake.mean()


def adversarial_training_step(
    objective: str,
    generator,
    discriminator,
    g_opt,
    d_opt,
    critic_reals,
    critic_latents,
    generator_latent,
    gp_weight: float = GP_WEIGHT,
    clip_bound: float = CLIP_BOUND,
    gp_eps=None,
    gp_generator=None,
) -> LossReport:
    """One alternating step for single-discriminator models.

    Runs one critic update per entry of ``critic_reals`` (fakes are drawn
    fresh each time from ``critic_latents``), then one generator update.
    The report carries the last critic update's losses.
    """
    if objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}")
    if len(critic_reals) != len(critic_latents):
        raise ConfigError("need one latent draw per critic batch")
    d_loss = penalty = None
    for it, (real, latent) in enumerate(zip(critic_reals, critic_latents)):
        with torch.no_grad():
            fake = generator(latent)
        eps = gp_eps[it] if gp_eps is not None else None
        d_loss, penalty = critic_update(
            discriminator, d_opt, real, fake, objective, gp_weight, clip_bound,
            gp_eps=eps, gp_generator=gp_generator,
        )
    fake = generator(generator_latent)
    g_loss = _generator_term(discriminator(fake), objective)
    g_opt.zero_grad(set_to_none=True)
    g_loss.backward()
    g_opt.step()
    return LossReport(d_loss=d_loss, g_loss=float(g_loss.detach()), penalty=penalty)


def star_pairs(output: torch.Tensor):
    """Split a star output (B, 1+c, H, W) into c aligned (red, green_k) pairs."""
    c = output.shape[1] - 1
    return [torch.cat([output[:, :1], output[:, k + 1 : k + 2]], dim=1) for k in range(c)]


def star_training_step(
    generator,
    discriminators,
    g_opt,
    d_opts,
    critic_real_batches,
    critic_latents,
    generator_latent,
    objective: str = "wgan-gp",
    gp_weight: float = GP_WEIGHT,
    clip_bound: float = CLIP_BOUND,
    gp_eps=None,
    gp_generator=None,
) -> LossReport:
    """One alternating step of the star game.

    Per critic iteration the generator runs once and every discriminator k
    is updated on its (generated red, generated green_k) pair against the
    class-k real batch. The generator phase then accumulates the gradient
    of the summed per-pair generator terms before a single parameter
    update. Top-level losses are sums over pairs (last critic iteration);
    ``pairs`` holds the per-pair breakdown.
    """
    if objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}")
    c = len(discriminators)
    if len(d_opts) != c:
        raise ConfigError("need one optimizer per discriminator")
    for batches in critic_real_batches:
        if len(batches) != c:
            raise ConfigError(
                f"each critic iteration needs {c} real pair batches, got {len(batches)}"
            )
    if len(critic_real_batches) != len(critic_latents):
        raise ConfigError("need one latent draw per critic iteration")

    pair_d = [0.0] * c
    pair_pen = [None] * c
    for it, (batches, latent) in enumerate(zip(critic_real_batches, critic_latents)):
        with torch.no_grad():
            fake_pairs = star_pairs(generator(latent))
        for k, (disc, opt, real) in enumerate(zip(discriminators, d_opts, batches)):
            eps = gp_eps[it][k] if gp_eps is not None else None
            pair_d[k], pair_pen[k] = critic_update(
                disc, opt, real, fake_pairs[k], objective, gp_weight, clip_bound,
                gp_eps=eps, gp_generator=gp_generator,
            )

    fake_pairs = star_pairs(generator(generator_latent))
    pair_g_terms = [
        _generator_term(disc(pair), objective)
        for disc, pair in zip(discriminators, fake_pairs)
    ]
    total = sum(pair_g_terms)
    g_opt.zero_grad(set_to_none=True)
    total.backward()
    g_opt.step()

    pair_g = [float(t.detach()) for t in pair_g_terms]
    pairs = tuple(
        PairLoss(d_loss=pair_d[k], g_loss=pair_g[k], penalty=pair_pen[k]) for k in range(c)
    )
    penalty = None if pair_pen[0] is None else float(sum(p for p in pair_pen))
    return LossReport(
        d_loss=float(sum(pair_d)),
        g_loss=float(total.detach()),
        penalty=penalty,
        pairs=pairs,
    )
