"""Classifier two-sample test between a sample source and a real test set.

For each of ``n_splits`` random splits the real test set is halved; a fresh
discriminator trains on (source samples vs. the first half) and the score
is computed on (fresh source samples vs. the second half). Three
discriminator flavors are supported: ``xent`` reports the clamped
log-likelihood split (always <= 0), ``wgan`` the clipped critic's mean
score gap (>= 0), and ``wgan-gp`` the score gap minus the gradient penalty
(negative when the two collections are very similar, since the penalty
then dominates). Splits are aggregated by median and median absolute
deviation; non-finite split scores are excluded and flagged, keeping the
aggregate robust to occasional training failures.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import objectives
from .errors import ConfigError, ProtocolError
from .models import build_discriminator, load_checkpoint, sample_latent
from .seeding import derive

FLAVORS = ("xent", "wgan", "wgan-gp")

_FLAVOR_OBJECTIVE = {"xent": "gan", "wgan": "wgan", "wgan-gp": "wgan-gp"}

DEFAULT_SPLITS = 10
DEFAULT_TRAIN_STEPS = 5000


@dataclass
class C2STConfig:
    flavor: str = "wgan-gp"
    n_splits: int = DEFAULT_SPLITS
    train_steps: int = DEFAULT_TRAIN_STEPS
    batch_size: int = 64
    disc_base_width: int = 128
    gp_weight: float = objectives.GP_WEIGHT
    clip_bound: float = objectives.CLIP_BOUND
    seed: int = 0

    def __post_init__(self):
        if self.flavor not in FLAVORS:
            raise ConfigError(f"flavor must be one of {FLAVORS}, got {self.flavor!r}")
        if self.n_splits < 1 or self.train_steps < 1:
            raise ConfigError("n_splits and train_steps must be >= 1")


@dataclass
class C2STReport:
    flavor: str
    per_split_scores: list
    median: float
    mad: float
    excluded_splits: list = field(default_factory=list)
    sub_reports: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "flavor": self.flavor,
            "per_split_scores": list(self.per_split_scores),
            "median": self.median,
            "mad": self.mad,
            "excluded_splits": list(self.excluded_splits),
        }
        if self.sub_reports is not None:
            out["sub_reports"] = {k: v.to_dict() for k, v in self.sub_reports.items()}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "C2STReport":
        subs = d.get("sub_reports")
        return cls(
            flavor=d["flavor"],
            per_split_scores=list(d["per_split_scores"]),
            median=d["median"],
            mad=d["mad"],
            excluded_splits=list(d.get("excluded_splits", [])),
            sub_reports=None if subs is None else {k: cls.from_dict(v) for k, v in subs.items()},
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def median_mad(xs):
    """Median and median absolute deviation of a non-empty collection."""
    arr = np.asarray(list(xs), dtype=np.float64)
    if arr.size == 0:
        raise ProtocolError("median of an empty collection")
    med = float(np.median(arr))
    return med, float(np.median(np.abs(arr - med)))


class ArraySource:
    """Samples with replacement from a fixed image collection."""

    def __init__(self, images):
        self.images = _as_image_tensor(images)
        if self.images.shape[0] < 1:
            raise ProtocolError("sample source is empty")

    @property
    def channels(self):
        return self.images.shape[1]

    def sample(self, n, rng) -> torch.Tensor:
        idx = rng.integers(0, self.images.shape[0], size=n)
        return self.images[torch.from_numpy(idx)]


class GeneratorSource:
    """Samples a frozen generator; multi-output kinds expose one pair slot."""

    def __init__(self, generator, pair_index: int | None = None):
        self.generator = generator.eval()
        self.spec = generator.spec
        if self.spec.kind in ("dcgan", "separable"):
            self.pair_index = None
        else:
            if pair_index is None:
                raise ConfigError(
                    f"kind={self.spec.kind!r} produces {self.spec.c} pairs; pick one with pair_index"
                )
            if not 0 <= pair_index < self.spec.c:
                raise ConfigError(f"pair_index {pair_index} out of range for c={self.spec.c}")
            self.pair_index = pair_index

    @property
    def channels(self):
        return 2

    def sample(self, n, rng) -> torch.Tensor:
        gen = torch.Generator().manual_seed(int(rng.integers(0, 2**63 - 1)))
        z = sample_latent(self.spec, n, generator=gen)
        with torch.no_grad():
            if self.spec.kind == "star":
                return self.generator.forward_pair(
                    z.z_red, z.z_greens[self.pair_index], self.pair_index
                )
            out = self.generator(z)
            if self.spec.kind == "multichannel":
                k = self.pair_index
                return torch.cat([out[:, :1], out[:, k + 1 : k + 2]], dim=1)
            return out


def _as_image_tensor(source) -> torch.Tensor:
    if isinstance(source, data_mod.Dataset):
        arr = source.stack(split=data_mod.TEST)
        if arr.shape[0] == 0:  # unsplit collection: use everything
            arr = source.stack()
        return torch.from_numpy(arr)
    if isinstance(source, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(source, dtype=np.float32))
    if isinstance(source, torch.Tensor):
        return source.float()
    raise ConfigError(f"cannot interpret {type(source).__name__} as an image collection")


def as_source(obj):
    if hasattr(obj, "sample"):
        return obj
    return ArraySource(obj)


def _score_split(source_a, test_images, cfg: C2STConfig, split_index: int) -> float:
    seed = derive(cfg.seed, f"split-{split_index}")
    rng = np.random.default_rng(seed)
    objective = _FLAVOR_OBJECTIVE[cfg.flavor]
    n = test_images.shape[0]
    tt_idx, te_idx = data_mod.half_partition_indices(n, derive(seed, "halves"))
    test_train = test_images[torch.from_numpy(tt_idx)]
    test_test = test_images[torch.from_numpy(te_idx)]
    a_train = source_a.sample(len(tt_idx), rng)
    if a_train.shape[1:] != test_images.shape[1:]:
        raise ConfigError(
            f"source images {tuple(a_train.shape[1:])} do not match the "
            f"test set {tuple(test_images.shape[1:])}"
        )

    torch.manual_seed(derive(seed, "disc-init"))
    disc = build_discriminator(
        test_images.shape[1],
        head="probability" if cfg.flavor == "xent" else "unconstrained",
        base_width=cfg.disc_base_width,
    )
    opt_spec = {
        "xent": (torch.optim.Adam, {"lr": 2e-4, "betas": (0.5, 0.999)}),
        "wgan": (torch.optim.RMSprop, {"lr": 5e-5}),
        "wgan-gp": (torch.optim.Adam, {"lr": 1e-4, "betas": (0.5, 0.9)}),
    }[cfg.flavor]
    opt = opt_spec[0](disc.parameters(), **opt_spec[1])
    gp_gen = torch.Generator().manual_seed(derive(seed, "gp"))

    bs = min(cfg.batch_size, len(tt_idx))
    for _ in range(cfg.train_steps):
        real = test_train[torch.from_numpy(rng.integers(0, len(test_train), bs))]
        fake = a_train[torch.from_numpy(rng.integers(0, len(a_train), bs))]
        objectives.critic_update(
            disc, opt, real, fake, objective,
            cfg.gp_weight, cfg.clip_bound, gp_generator=gp_gen,
        )

    fresh = source_a.sample(len(te_idx), rng)
    with torch.no_grad():
        d_real = disc(test_test)
        d_fake = disc(fresh)
    if cfg.flavor == "xent":
        return float(objectives.gan_d_loss(d_real, d_fake))
    estimate = float(objectives.wgan_critic_estimate(d_real, d_fake))
    if cfg.flavor == "wgan":
        # the clipped-net class is symmetric under negation, so the distance
        # surrogate is non-negative; a negative finite-sample estimate is
        # truncated at the trivial critic's value
        return max(0.0, estimate)
    penalty = objectives.gradient_penalty(
        disc, test_test, fresh, cfg.gp_weight, generator=gp_gen
    )
    return estimate - float(penalty.detach())


def c2st_score(source_a, source_b, cfg: C2STConfig) -> C2STReport:
    """Score ``source_a`` against the real test collection ``source_b``."""
    test_images = _as_image_tensor(source_b)
    if test_images.shape[0] < 2:
        raise ProtocolError("need at least 2 test items for a split")
    source = as_source(source_a)
    scores, excluded = [], []
    for i in range(cfg.n_splits):
        value = _score_split(source, test_images, cfg, i)
        if np.isfinite(value):
            scores.append(value)
        else:
            excluded.append(i)
    if not scores:
        raise ProtocolError("every split produced a non-finite score")
    med, mad = median_mad(scores)
    return C2STReport(
        flavor=cfg.flavor,
        per_split_scores=scores,
        median=med,
        mad=mad,
        excluded_splits=excluded,
    )


def _per_class_test_arrays(real, classes):
    if isinstance(real, data_mod.Dataset):
        out = {}
        for label in classes:
            arr = real.stack(split=data_mod.TEST, class_label=label)
            if arr.shape[0] == 0:
                arr = real.stack(class_label=label)
            out[label] = arr
        return out
    if isinstance(real, dict):
        return {k: v for k, v in real.items()}
    raise ConfigError("multi-output evaluation needs a Dataset or a class->images mapping")


def c2st_generator(generator, real_test, cfg: C2STConfig) -> C2STReport:
    """Evaluate a (possibly multi-output) generator against real test data.

    Two-channel generators produce one report. Multi-channel and star
    generators produce one sub-report per (red, green_k) pair scored
    against the class-k test images, plus a pooled aggregate over all
    pair scores.
    """
    if isinstance(generator, (str, Path)):
        generator, _ = load_checkpoint(generator)
    spec = generator.spec
    if spec.kind in ("dcgan", "separable"):
        return c2st_score(GeneratorSource(generator), real_test, cfg)

    if isinstance(real_test, data_mod.Dataset):
        classes = list(real_test.classes)
    else:
        classes = list(real_test)
    if len(classes) != spec.c:
        raise ConfigError(
            f"generator has {spec.c} green channels but {len(classes)} test classes given"
        )
    arrays = _per_class_test_arrays(real_test, classes)
    subs, pooled, excluded = {}, [], []
    for k, label in enumerate(classes):
        sub_cfg = dataclasses.replace(cfg, seed=derive(cfg.seed, f"class-{label}"))
        sub = c2st_score(GeneratorSource(generator, pair_index=k), arrays[label], sub_cfg)
        subs[label] = sub
        pooled.extend(sub.per_split_scores)
        excluded.extend(f"{label}:{i}" for i in sub.excluded_splits)
    med, mad = median_mad(pooled)
    return C2STReport(
        flavor=cfg.flavor,
        per_split_scores=pooled,
        median=med,
        mad=mad,
        excluded_splits=excluded,
        sub_reports=subs,
    )


def c2st_real_matrix(ds: data_mod.Dataset, cfg: C2STConfig):
    """All-pairs real-vs-real score table.

    Row class supplies training images as the "generated" side; column
    class supplies the test set. Returns (classes, medians, mads) with
    matrix[i][j] scoring class i's train pool against class j's test set.
    """
    classes = list(ds.classes)
    medians = np.zeros((len(classes), len(classes)))
    mads = np.zeros_like(medians)
    for i, a_label in enumerate(classes):
        pool = ds.stack(split=data_mod.TRAIN, class_label=a_label)
        source = ArraySource(pool)
        for j, b_label in enumerate(classes):
            pair_cfg = dataclasses.replace(cfg, seed=derive(cfg.seed, f"{a_label}->{b_label}"))
            report = c2st_score(source, ds.stack(split=data_mod.TEST, class_label=b_label), pair_cfg)
            medians[i, j] = report.median
            mads[i, j] = report.mad
    return classes, medians, mads
