"""Latent-space probes of a frozen generator.

Reconstruction minimizes per-pixel mean squared error over the latent with
a limited-memory quasi-Newton optimizer (memory 10, strong Wolfe line
search), restarted from fresh prior draws; the best restart wins and a
line-search failure keeps the best iterate seen instead of dropping the
restart. The separable probe is the harder two-stage variant: fit the red
channel over the red latent first, then the green channel over the green
latent with the red latent frozen at its optimum. Latent quality is
reported as the negative log likelihood under the standard normal prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import data as data_mod
from .errors import ConfigError, ContractError, DataError, ProtocolError, ShapeError
from .models import StarLatent
from .seeding import derive

DEFAULT_RESTARTS = 5
DEFAULT_ITERS = 50
LBFGS_HISTORY = 10


def normalized_l2(a, b) -> float:
    """Squared error averaged over every channel-pixel."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    return float(((x - y) ** 2).mean())


def latent_nll(z) -> float:
    """Negative log likelihood of a latent under the standard normal prior."""
    if isinstance(z, torch.Tensor):
        z = z.detach().cpu().numpy()
    v = np.asarray(z, dtype=np.float64).ravel()
    return float(0.5 * (v @ v) + 0.5 * v.size * math.log(2.0 * math.pi))


def prior_nll_moments(dim: int):
    """Analytic mean and std of the prior NLL in ``dim`` dimensions."""
    mean = 0.5 * dim * (1.0 + math.log(2.0 * math.pi))
    return mean, math.sqrt(dim / 2.0)


@dataclass
class ReconResult:
    """Outcome of reconstructing one target image."""

    best_latent: np.ndarray
    l2_error: float
    nll: float
    restart_errors: list
    mode: str
    stage_errors: list | None = None

    def __post_init__(self):
        if self.restart_errors and not math.isclose(
            self.l2_error, min(self.restart_errors), rel_tol=1e-12
        ):
            raise ProtocolError("l2_error must be the best restart error")


def _target_tensor(target, channels):
    if isinstance(target, (data_mod.Image2C, data_mod.ImageMC)):
        arr = target.channels()
    else:
        arr = np.asarray(target, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != channels:
        raise ShapeError(f"target must be ({channels}, H, W), got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).unsqueeze(0)


def _lbfgs_best(params, err_fn, iters):
    """Run one quasi-Newton restart; returns the best (error, params) seen."""
    opt = torch.optim.LBFGS(
        params, max_iter=iters, history_size=LBFGS_HISTORY, line_search_fn="strong_wolfe"
    )
    best = {"err": math.inf, "state": None}

    def closure():
        opt.zero_grad()
        err = err_fn()
        value = float(err.detach())
        if math.isfinite(value) and value < best["err"]:
            best["err"] = value
            best["state"] = [p.detach().clone() for p in params]
        err.backward()
        return err

    try:
        opt.step(closure)
    except RuntimeError:
        pass  # a failed line search keeps the best iterate recorded so far
    if best["state"] is None:
        with torch.no_grad():
            best["err"] = float(err_fn())
        best["state"] = [p.detach().clone() for p in params]
    return best["err"], best["state"]


class _FrozenGenerator:
    """Puts the generator in eval mode with gradients off, restoring on exit."""

    def __init__(self, generator):
        self.generator = generator

    def __enter__(self):
        self.was_training = self.generator.training
        self.grad_flags = [p.requires_grad for p in self.generator.parameters()]
        self.generator.eval()
        for p in self.generator.parameters():
            p.requires_grad_(False)
        return self.generator

    def __exit__(self, *exc):
        self.generator.train(self.was_training)
        for p, flag in zip(self.generator.parameters(), self.grad_flags):
            p.requires_grad_(flag)


def _restart_init(spec, seed, restart, init_latents):
    d = spec.latent_dim_per_tower
    if init_latents is not None:
        given = init_latents[restart]
        if spec.kind in ("dcgan", "multichannel"):
            return torch.as_tensor(given, dtype=torch.float32).reshape(1, 2 * d).clone()
        z_red, z_green = given
        return (
            torch.as_tensor(z_red, dtype=torch.float32).reshape(1, d).clone(),
            torch.as_tensor(z_green, dtype=torch.float32).reshape(1, d).clone(),
        )
    gen = torch.Generator().manual_seed(derive(seed, f"restart-{restart}"))
    if spec.kind in ("dcgan", "multichannel"):
        return torch.randn(1, 2 * d, generator=gen)
    return torch.randn(1, d, generator=gen), torch.randn(1, d, generator=gen)


def reconstruct_regular(
    generator,
    target,
    restarts: int = DEFAULT_RESTARTS,
    iters: int = DEFAULT_ITERS,
    seed: int = 0,
    pair_index: int = 0,
    init_latents=None,
) -> ReconResult:
    """Jointly fit all latents of one image by restarted quasi-Newton descent."""
    spec = generator.spec
    pairwise = spec.kind in ("separable", "star")
    target_t = _target_tensor(target, 2 if pairwise else spec.output_channels)
    errors, best_err, best_state = [], math.inf, None
    with _FrozenGenerator(generator) as g:
        for r in range(restarts):
            init = _restart_init(spec, seed, r, init_latents)
            if pairwise:
                z_red = init[0].requires_grad_(True)
                z_green = init[1].requires_grad_(True)
                params = [z_red, z_green]

                def err_fn():
                    out = g.forward_pair(z_red, z_green, pair_index)
                    return ((out - target_t) ** 2).mean()

            else:
                z = init.requires_grad_(True)
                params = [z]

                def err_fn():
                    return ((g(z) - target_t) ** 2).mean()

            err, state = _lbfgs_best(params, err_fn, iters)
            errors.append(err)
            if err < best_err:
                best_err, best_state = err, state
    flat = torch.cat([s.flatten() for s in best_state]).numpy()
    return ReconResult(
        best_latent=flat,
        l2_error=best_err,
        nll=latent_nll(flat),
        restart_errors=errors,
        mode="regular",
    )


def reconstruct_separable(
    generator,
    target,
    restarts: int = DEFAULT_RESTARTS,
    iters: int = DEFAULT_ITERS,
    seed: int = 0,
    pair_index: int = 0,
    init_latents=None,
) -> ReconResult:
    """Two-stage fit: red channel over red noise, then green over green noise."""
    spec = generator.spec
    if spec.kind not in ("separable", "star"):
        raise ContractError(f"kind={spec.kind!r} has no separated latents")
    target_t = _target_tensor(target, 2)
    red_target = target_t[:, :1]
    green_target = target_t[:, 1:]
    errors, stage_errors, best_err, best_state = [], [], math.inf, None
    with _FrozenGenerator(generator) as g:
        tower = g.green_towers[pair_index]
        for r in range(restarts):
            z_red, z_green = _restart_init(spec, seed, r, init_latents)
            z_red.requires_grad_(True)

            def red_err_fn():
                red_img, _ = g.red_tower(z_red)
                return ((red_img - red_target) ** 2).mean()

            red_err, (z_red_best,) = _lbfgs_best([z_red], red_err_fn, iters)

            # stage 2: red noise frozen at its optimum, so its features are constant
            with torch.no_grad():
                _, red_feats = g.red_tower(z_red_best)
            z_green.requires_grad_(True)

            def green_err_fn():
                green_img, _ = tower(z_green, red_feats)
                return ((green_img - green_target) ** 2).mean()

            green_err, (z_green_best,) = _lbfgs_best([z_green], green_err_fn, iters)

            with torch.no_grad():
                out = g.forward_pair(z_red_best, z_green_best, pair_index)
                combined = float(((out - target_t) ** 2).mean())
            errors.append(combined)
            stage_errors.append((red_err, green_err))
            if combined < best_err:
                best_err, best_state = combined, [z_red_best, z_green_best]
    flat = torch.cat([s.flatten() for s in best_state]).numpy()
    return ReconResult(
        best_latent=flat,
        l2_error=best_err,
        nll=latent_nll(flat),
        restart_errors=errors,
        mode="separable",
        stage_errors=stage_errors,
    )


def nn_baseline(target, train_set: data_mod.Dataset):
    """Exhaustive nearest neighbor over both channels of the training split."""
    idx = train_set.indices(split=data_mod.TRAIN)
    if not idx:
        idx = list(range(len(train_set.items)))
    if not idx:
        raise ProtocolError("training set is empty")
    if isinstance(target, (data_mod.Image2C, data_mod.ImageMC)):
        t = target.channels().astype(np.float64)
    else:
        t = np.asarray(target, dtype=np.float64)
    pool = np.stack([train_set.items[i].channels() for i in idx]).astype(np.float64)
    d = ((pool - t[None]) ** 2).mean(axis=tuple(range(1, pool.ndim)))
    j = int(np.argmin(d))
    return train_set.items[idx[j]], float(d[j])


def slerp(z0: torch.Tensor, z1: torch.Tensor, t: float) -> torch.Tensor:
    """Great-circle interpolation; falls back to linear near-parallel vectors."""
    n0 = float(torch.linalg.vector_norm(z0))
    n1 = float(torch.linalg.vector_norm(z1))
    if n0 == 0.0 or n1 == 0.0:
        raise DataError("slerp endpoints must be nonzero vectors")
    cos = float(torch.sum(z0 * z1)) / (n0 * n1)
    omega = math.acos(max(-1.0, min(1.0, cos)))
    if omega < 1e-4 or math.pi - omega < 1e-4:
        return (1.0 - t) * z0 + t * z1
    s = math.sin(omega)
    return (math.sin((1.0 - t) * omega) / s) * z0 + (math.sin(t * omega) / s) * z1


def cell_cycle_strip(generator, z_red_start, z_red_end, n_frames: int, z_greens) -> np.ndarray:
    """Sweep the red latent along a great circle while green latents stay fixed.

    Returns an (n_frames, 1+c, H, W) array: one row per frame with columns
    [red, green_1 .. green_c].
    """
    spec = generator.spec
    if spec.kind not in ("separable", "star") or spec.c < 1:
        raise ConfigError("cell-cycle strips need a generator with separated latents")
    if n_frames < 2:
        raise ConfigError("n_frames must be >= 2")
    if len(z_greens) != spec.c:
        raise ConfigError(f"need {spec.c} green latent(s), got {len(z_greens)}")
    z0 = torch.as_tensor(z_red_start, dtype=torch.float32).reshape(1, -1)
    z1 = torch.as_tensor(z_red_end, dtype=torch.float32).reshape(1, -1)
    greens = tuple(torch.as_tensor(z, dtype=torch.float32).reshape(1, -1) for z in z_greens)
    rows = []
    with _FrozenGenerator(generator) as g:
        for i in range(n_frames):
            t = i / (n_frames - 1)
            latent = StarLatent(z_red=slerp(z0, z1, t), z_greens=greens)
            with torch.no_grad():
                out = g(latent)
            rows.append(out[0].numpy())
    return np.stack(rows)


def recon_scatter(results, nn_median=None, latent_dim=None) -> dict:
    """Points (l2_error, nll) plus baseline guide lines for the scatter plot."""
    if not results:
        raise ProtocolError("no reconstruction results to plot")
    points = [(r.l2_error, r.nll) for r in results]
    guides = {}
    if nn_median is not None:
        guides["nn_median_l2"] = float(nn_median)
    if latent_dim is not None:
        mean, std = prior_nll_moments(latent_dim)
        guides["nll_mean"] = mean
        guides["nll_std"] = std
    return {"points": points, "guides": guides}
