"""Alternating-optimization training loop for all model kinds and objectives.

Owns checkpointing, CSV loss logging, periodic sample grids, deterministic
seeding, and the divergence guard. Determinism holds for single-device,
fixed-thread execution: every random draw flows from the config seed
through named substreams.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from . import data as data_mod
from . import objectives
from .errors import ConfigError, DivergenceError
from .models import (
    GeneratorSpec,
    StarGenerator,
    build_discriminator,
    build_generator,
    load_checkpoint,
    sample_latent,
    save_checkpoint,
)
from .seeding import derive

OPTIMIZER_DEFAULTS = {
    "gan": {"optimizer": "adam", "lr": 2e-4, "betas": (0.5, 0.999)},
    "wgan": {"optimizer": "rmsprop", "lr": 5e-5},
    "wgan-gp": {"optimizer": "adam", "lr": 1e-4, "betas": (0.5, 0.9)},
}

# Checkpoints always drop at these generator steps when the run reaches them.
MILESTONES = (100, 1000, 2000, 5000, 10000, 50000)

DIVERGENCE_PATIENCE = 100

LOG_NAME = "training_log.csv"


@dataclass
class TrainConfig:
    objective: str
    model: GeneratorSpec
    out_dir: str
    total_steps: int
    data_dir: str | None = None
    n_critic: int = 5
    batch_size: int = 64
    checkpoint_interval: int = 1000
    seed: int = 0
    lr: float | None = None
    gp_weight: float = objectives.GP_WEIGHT
    clip_bound: float = objectives.CLIP_BOUND
    disc_base_width: int = 128
    sample_grid: int = 8

    def __post_init__(self):
        if self.objective not in OPTIMIZER_DEFAULTS:
            raise ConfigError(
                f"objective must be one of {tuple(OPTIMIZER_DEFAULTS)}, got {self.objective!r}"
            )
        if self.objective == "gan":
            self.n_critic = 1  # the cross-entropy game alternates one-for-one
        if self.n_critic < 1:
            raise ConfigError("n_critic must be >= 1")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if isinstance(self.model, dict):
            self.model = GeneratorSpec(**self.model)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["model"] = dataclasses.asdict(self.model)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))


def _make_optimizer(objective, params, lr=None):
    spec = OPTIMIZER_DEFAULTS[objective]
    lr = spec["lr"] if lr is None else lr
    if spec["optimizer"] == "adam":
        return torch.optim.Adam(params, lr=lr, betas=spec["betas"])
    return torch.optim.RMSprop(params, lr=lr)


class _Batcher:
    """Deterministic minibatch sampler over the training split."""

    def __init__(self, dataset, spec: GeneratorSpec, batch_size: int, rng):
        self.batch_size = batch_size
        self.rng = rng
        self.spec = spec
        if spec.kind == "star":
            if len(dataset.classes) != spec.c:
                raise ConfigError(
                    f"star model with c={spec.c} needs exactly {spec.c} dataset classes, "
                    f"got {len(dataset.classes)}"
                )
            self.pools = [
                torch.from_numpy(dataset.stack(split=data_mod.TRAIN, class_label=label))
                for label in dataset.classes
            ]
            for label, pool in zip(dataset.classes, self.pools):
                if pool.shape[0] == 0:
                    raise ConfigError(f"class {label!r} has no training images")
        else:
            pool = torch.from_numpy(dataset.stack(split=data_mod.TRAIN))
            if pool.shape[0] == 0:
                raise ConfigError("dataset has no training images")
            if pool.shape[1] != spec.output_channels:
                raise ConfigError(
                    f"model outputs {spec.output_channels} channels but data has {pool.shape[1]}"
                )
            self.pools = [pool]

    def _draw(self, pool):
        idx = self.rng.integers(0, pool.shape[0], size=self.batch_size)
        return pool[torch.from_numpy(idx)]

    def batch(self):
        return self._draw(self.pools[0])

    def pair_batches(self):
        return [self._draw(pool) for pool in self.pools]


def _render_grid(images: torch.Tensor, ncol: int) -> np.ndarray:
    """Tile a batch as an RGB grid: red channel -> R, green channels -> G."""
    arr = images.clamp(-1, 1).numpy()
    red = (arr[:, 0] + 1.0) / 2.0
    green = (arr[:, 1:].max(axis=1) + 1.0) / 2.0
    n, h, w = red.shape
    nrow = (n + ncol - 1) // ncol
    canvas = np.zeros((nrow * h, ncol * w, 3), dtype=np.float32)
    for i in range(n):
        r, c = divmod(i, ncol)
        canvas[r * h : (r + 1) * h, c * w : (c + 1) * w, 0] = red[i]
        canvas[r * h : (r + 1) * h, c * w : (c + 1) * w, 1] = green[i]
    return (canvas * 255).astype(np.uint8)


def save_sample_grid(path, generator, latent, ncol: int = 8):
    was_training = generator.training
    generator.eval()
    with torch.no_grad():
        images = generator(latent)
    generator.train(was_training)
    Image.fromarray(_render_grid(images.cpu(), ncol)).save(path)


class _LossLog:
    def __init__(self, path: Path, n_pairs: int, append: bool):
        self.path = path
        self.n_pairs = n_pairs
        header = ["step", "d_loss", "g_loss", "penalty"]
        for k in range(1, n_pairs + 1):
            header += [f"pair{k}_d_loss", f"pair{k}_g_loss", f"pair{k}_penalty"]
        if append and path.exists():
            return
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(header)

    def write(self, step: int, report: objectives.LossReport):
        row = [step, report.d_loss, report.g_loss,
               "" if report.penalty is None else report.penalty]
        for pair in report.pairs:
            row += [pair.d_loss, pair.g_loss, "" if pair.penalty is None else pair.penalty]
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(row)


class _Trainer:
    def __init__(self, cfg: TrainConfig, dataset, fresh: bool):
        self.cfg = cfg
        self.out_dir = Path(cfg.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.dataset = dataset
        if fresh:
            torch.manual_seed(derive(cfg.seed, "model-init"))
            self.generator = build_generator(cfg.model)
            self.discriminators = self._build_discriminators()
            self.g_opt = _make_optimizer(cfg.objective, self.generator.parameters(), cfg.lr)
            self.d_opts = [
                _make_optimizer(cfg.objective, d.parameters(), cfg.lr)
                for d in self.discriminators
            ]
            self.latent_gen = torch.Generator().manual_seed(derive(cfg.seed, "latents"))
            self.gp_gen = torch.Generator().manual_seed(derive(cfg.seed, "gp"))
            self.data_rng = np.random.default_rng(derive(cfg.seed, "batches"))
            grid_gen = torch.Generator().manual_seed(derive(cfg.seed, "samples"))
            self.grid_latent = sample_latent(cfg.model, cfg.sample_grid**2, generator=grid_gen)
            self.step = 0
            self.emitted = []
        self.batcher = None  # built after state is final

    def _build_discriminators(self):
        cfg = self.cfg
        head = "probability" if cfg.objective == "gan" else "unconstrained"
        if cfg.model.kind == "star":
            return [
                build_discriminator(2, head=head, base_width=cfg.disc_base_width)
                for _ in range(cfg.model.c)
            ]
        return [
            build_discriminator(
                cfg.model.output_channels, head=head, base_width=cfg.disc_base_width
            )
        ]

    # -- checkpoint plumbing --------------------------------------------

    def _trainer_state(self):
        return {
            "config": self.cfg.to_dict(),
            "discriminator_states": [d.state_dict() for d in self.discriminators],
            "g_opt_state": self.g_opt.state_dict(),
            "d_opt_states": [o.state_dict() for o in self.d_opts],
            "latent_gen_state": self.latent_gen.get_state(),
            "gp_gen_state": self.gp_gen.get_state(),
            "data_rng_state": self.data_rng.bit_generator.state,
            "grid_latent": self.grid_latent,
            "emitted": list(self.emitted),
        }

    def _restore(self, payload):
        cfg = self.cfg
        state = payload["trainer_state"]
        self.generator = build_generator(cfg.model)
        self.generator.load_state_dict(payload["generator_state"])
        self.discriminators = self._build_discriminators()
        for d, sd in zip(self.discriminators, state["discriminator_states"]):
            d.load_state_dict(sd)
        self.g_opt = _make_optimizer(cfg.objective, self.generator.parameters(), cfg.lr)
        self.g_opt.load_state_dict(state["g_opt_state"])
        self.d_opts = [
            _make_optimizer(cfg.objective, d.parameters(), cfg.lr) for d in self.discriminators
        ]
        for o, sd in zip(self.d_opts, state["d_opt_states"]):
            o.load_state_dict(sd)
        self.latent_gen = torch.Generator()
        self.latent_gen.set_state(state["latent_gen_state"])
        self.gp_gen = torch.Generator()
        self.gp_gen.set_state(state["gp_gen_state"])
        self.data_rng = np.random.default_rng()
        self.data_rng.bit_generator.state = state["data_rng_state"]
        self.grid_latent = state["grid_latent"]
        self.step = int(payload["step"])
        self.emitted = list(state["emitted"])

    def _emit(self, step: int) -> Path:
        path = self.out_dir / f"checkpoint_{step:06d}.ckpt"
        save_checkpoint(path, self.generator, step=step, trainer_state=self._trainer_state())
        save_sample_grid(
            self.out_dir / f"samples_{step:06d}.png",
            self.generator,
            self.grid_latent,
            ncol=self.cfg.sample_grid,
        )
        if step not in self.emitted:
            self.emitted.append(step)
        return path

    def _due(self, step: int) -> bool:
        if step in self.emitted:
            return False
        if step in MILESTONES or step == self.cfg.total_steps:
            return True
        return self.cfg.checkpoint_interval > 0 and step % self.cfg.checkpoint_interval == 0

    # -- the loop ---------------------------------------------------------

    def _one_step(self):
        cfg = self.cfg
        n_critic = cfg.n_critic
        if cfg.model.kind == "star":
            critic_reals = [self.batcher.pair_batches() for _ in range(n_critic)]
            critic_latents = [
                sample_latent(cfg.model, cfg.batch_size, generator=self.latent_gen)
                for _ in range(n_critic)
            ]
            gen_latent = sample_latent(cfg.model, cfg.batch_size, generator=self.latent_gen)
            return objectives.star_training_step(
                self.generator, self.discriminators, self.g_opt, self.d_opts,
                critic_reals, critic_latents, gen_latent,
                objective=cfg.objective, gp_weight=cfg.gp_weight,
                clip_bound=cfg.clip_bound, gp_generator=self.gp_gen,
            )
        critic_reals = [self.batcher.batch() for _ in range(n_critic)]
        critic_latents = [
            sample_latent(cfg.model, cfg.batch_size, generator=self.latent_gen)
            for _ in range(n_critic)
        ]
        gen_latent = sample_latent(cfg.model, cfg.batch_size, generator=self.latent_gen)
        return objectives.adversarial_training_step(
            cfg.objective, self.generator, self.discriminators[0],
            self.g_opt, self.d_opts[0],
            critic_reals, critic_latents, gen_latent,
            gp_weight=cfg.gp_weight, clip_bound=cfg.clip_bound,
            gp_generator=self.gp_gen,
        )

    def run(self) -> list:
        cfg = self.cfg
        self.batcher = _Batcher(self.dataset, cfg.model, cfg.batch_size, self.data_rng)
        log = _LossLog(
            self.out_dir / LOG_NAME,
            cfg.model.c if cfg.model.kind == "star" else 0,
            append=self.step > 0,
        )
        emitted_paths = []
        if self.step == 0 and 0 not in self.emitted:
            emitted_paths.append(self._emit(0))
        last_good = self.out_dir / f"checkpoint_{self.emitted[-1]:06d}.ckpt" if self.emitted else None
        bad_streak = 0
        self.generator.train()
        for d in self.discriminators:
            d.train()
        for step in range(self.step + 1, cfg.total_steps + 1):
            report = self._one_step()
            log.write(step, report)
            if report.is_finite():
                bad_streak = 0
            else:
                bad_streak += 1
                if bad_streak >= DIVERGENCE_PATIENCE:
                    raise DivergenceError(
                        f"losses non-finite for {bad_streak} consecutive steps at step {step}",
                        last_good_checkpoint=last_good,
                    )
            self.step = step
            if self._due(step):
                path = self._emit(step)
                emitted_paths.append(path)
                if report.is_finite():
                    last_good = path
        return emitted_paths


def train(cfg: TrainConfig, dataset=None) -> list:
    """Run the alternating loop from scratch; returns emitted checkpoint paths."""
    if dataset is None:
        if cfg.data_dir is None:
            raise ConfigError("TrainConfig.data_dir is unset and no dataset was passed")
        dataset = data_mod.load_dataset(cfg.data_dir)
    return _Trainer(cfg, dataset, fresh=True).run()


def resume(checkpoint_path, cfg: TrainConfig, dataset=None) -> list:
    """Continue a run from a checkpoint's stored model and optimizer state."""
    if dataset is None:
        if cfg.data_dir is None:
            raise ConfigError("TrainConfig.data_dir is unset and no dataset was passed")
        dataset = data_mod.load_dataset(cfg.data_dir)
    _, payload = load_checkpoint(checkpoint_path)
    stored_spec = GeneratorSpec.from_json(payload["generator_spec"])
    if stored_spec != cfg.model:
        raise ConfigError(
            f"checkpoint was trained with {stored_spec}, config asks for {cfg.model}"
        )
    if "trainer_state" not in payload:
        raise ConfigError("checkpoint carries no trainer state; cannot resume")
    stored_objective = payload["trainer_state"]["config"]["objective"]
    if stored_objective != cfg.objective:
        raise ConfigError(
            f"checkpoint was trained with objective {stored_objective!r}, "
            f"config asks for {cfg.objective!r}"
        )
    trainer = _Trainer(cfg, dataset, fresh=False)
    trainer._restore(payload)
    return trainer.run()
