"""Generator and discriminator architectures.

All generators share one ladder: a latent is projected onto a 3x5 grid and
four stride-2 up-convolutions double it to 48x80, with batch normalization
and a rectifier between layers and a final tanh. The channel-separated
variants split that ladder into a red tower and green tower(s) of half
width each, with one-way feature links from red to green at every level,
so the red output is a function of the red latent alone. The star model
is one red tower feeding c green towers; the red tower runs (and batch
normalizes) exactly once per forward pass.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ConfigError, ShapeError

SPATIAL_BASE = (3, 5)  # four stride-2 doublings reach 48x80
N_UP_STAGES = 4
OUT_H, OUT_W = 48, 80

KINDS = ("dcgan", "separable", "multichannel", "star")
DEFAULT_LATENT_PER_TOWER = 50
DEFAULT_CHANNEL_WIDTH = 64  # widest-layer channels budgeted per output channel

HEAD_PROBABILITY = "probability"
HEAD_UNCONSTRAINED = "unconstrained"


@dataclass(frozen=True)
class GeneratorSpec:
    """Architecture configuration for one generator."""

    kind: str
    c: int = 1
    base_width: int | None = None
    latent_dim_per_tower: int = DEFAULT_LATENT_PER_TOWER
    bn_enabled: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown generator kind {self.kind!r}; choose from {KINDS}")
        if self.c < 1:
            raise ConfigError("c (number of green classes) must be >= 1")
        if self.kind in ("dcgan", "separable") and self.c != 1:
            raise ConfigError(f"kind={self.kind!r} is a two-channel model and requires c=1")
        if self.latent_dim_per_tower < 1:
            raise ConfigError("latent_dim_per_tower must be >= 1")
        if self.base_width is None:
            object.__setattr__(self, "base_width", DEFAULT_CHANNEL_WIDTH * self.output_channels)
        per_tower = self.base_width // self.tower_count
        if per_tower * self.tower_count != self.base_width or per_tower % 8 != 0:
            raise ConfigError(
                f"base_width={self.base_width} must split into {self.tower_count} tower(s) "
                "of width divisible by 8"
            )

    @property
    def output_channels(self) -> int:
        return 2 if self.kind in ("dcgan", "separable") else self.c + 1

    @property
    def tower_count(self) -> int:
        return 1 if self.kind in ("dcgan", "multichannel") else self.output_channels

    @property
    def tower_width(self) -> int:
        return self.base_width // self.tower_count

    @property
    def latent_dim(self) -> int:
        """Total latent dimension consumed by one forward pass."""
        if self.kind in ("dcgan", "multichannel"):
            return 2 * self.latent_dim_per_tower
        return (1 + self.c) * self.latent_dim_per_tower

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "GeneratorSpec":
        return cls(**json.loads(text))


@dataclass
class StarLatent:
    """Independent Gaussian latents for the red tower and each green tower."""

    z_red: torch.Tensor
    z_greens: tuple

    def pair(self, k: int = 0) -> torch.Tensor:
        """The (z_red, z_green_k) pair as one flat batch of vectors."""
        return torch.cat([self.z_red, self.z_greens[k]], dim=1)

    def clone(self) -> "StarLatent":
        return StarLatent(self.z_red.clone(), tuple(z.clone() for z in self.z_greens))


def _ladder_widths(width: int):
    return [width, width // 2, width // 4, width // 8]


class _Tower(nn.Module):
    """One up-convolution ladder from a latent vector to an image slice.

    ``side_widths`` gives per-level channel counts of externally supplied
    feature maps (the red tower's); they are concatenated after the tower's
    own features before each up-convolution, so information flows in but
    never back out.
    """

    def __init__(self, latent_dim, width, out_channels, side_widths=None, bn=True):
        super().__init__()
        self.latent_dim = latent_dim
        self.own_widths = _ladder_widths(width)
        self.side_widths = list(side_widths) if side_widths is not None else [0] * N_UP_STAGES
        self.proj = nn.ConvTranspose2d(latent_dim, self.own_widths[0], SPATIAL_BASE, 1, 0, bias=False)
        self.proj_bn = nn.BatchNorm2d(self.own_widths[0]) if bn else nn.Identity()
        ups, norms = [], []
        for level in range(1, N_UP_STAGES):
            in_ch = self.own_widths[level - 1] + self.side_widths[level - 1]
            ups.append(nn.ConvTranspose2d(in_ch, self.own_widths[level], 4, 2, 1, bias=False))
            norms.append(nn.BatchNorm2d(self.own_widths[level]) if bn else nn.Identity())
        self.ups = nn.ModuleList(ups)
        self.norms = nn.ModuleList(norms)
        out_in = self.own_widths[-1] + self.side_widths[-1]
        self.out_conv = nn.ConvTranspose2d(out_in, out_channels, 4, 2, 1)
        self.act = nn.ReLU(inplace=True)

    def forward(self, z, side_feats=None):
        if z.dim() == 2:
            z = z.view(z.shape[0], z.shape[1], 1, 1)
        if z.shape[1] != self.latent_dim:
            raise ShapeError(f"latent has {z.shape[1]} dims, tower expects {self.latent_dim}")
        h = self.act(self.proj_bn(self.proj(z)))
        feats = [h]
        for level, (up, norm) in enumerate(zip(self.ups, self.norms)):
            inp = h if side_feats is None else torch.cat([h, side_feats[level]], dim=1)
            h = self.act(norm(up(inp)))
            feats.append(h)
        inp = h if side_feats is None else torch.cat([h, side_feats[-1]], dim=1)
        img = torch.tanh(self.out_conv(inp))
        return img, feats


class DcganGenerator(nn.Module):
    """Single-tower ladder: plain two-channel or mined multi-channel output."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        self.tower = _Tower(
            2 * spec.latent_dim_per_tower,
            spec.tower_width,
            spec.output_channels,
            bn=spec.bn_enabled,
        )

    def forward(self, z):
        img, _ = self.tower(z)
        return img


class StarGenerator(nn.Module):
    """One red tower feeding ``c`` green towers (``c`` = 1 is the separable model).

    The red tower runs once per forward pass and its features are shared by
    all green towers, so its batch statistics are computed exactly once and
    the red output is identical across every red-green pair.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        d = spec.latent_dim_per_tower
        w = spec.tower_width
        self.red_tower = _Tower(d, w, 1, bn=spec.bn_enabled)
        self.green_towers = nn.ModuleList(
            _Tower(d, w, 1, side_widths=self.red_tower.own_widths, bn=spec.bn_enabled)
            for _ in range(spec.c)
        )

    def forward(self, latent: StarLatent):
        if len(latent.z_greens) != len(self.green_towers):
            raise ShapeError(
                f"latent carries {len(latent.z_greens)} green vector(s), "
                f"model has {len(self.green_towers)} green tower(s)"
            )
        red_img, red_feats = self.red_tower(latent.z_red)
        greens = [
            tower(z, red_feats)[0] for tower, z in zip(self.green_towers, latent.z_greens)
        ]
        return torch.cat([red_img, *greens], dim=1)

    def forward_pair(self, z_red, z_green, k: int = 0):
        """One (red, green_k) pair; other towers are not evaluated."""
        red_img, red_feats = self.red_tower(z_red)
        green_img, _ = self.green_towers[k](z_green, red_feats)
        return torch.cat([red_img, green_img], dim=1)


def init_dcgan_weights(module: nn.Module) -> nn.Module:
    """Zero-mean Gaussian init, std 0.02; batch-norm gains around 1."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, 0.02)
            nn.init.zeros_(m.bias)
    return module


def build_generator(spec: GeneratorSpec) -> nn.Module:
    if spec.kind in ("dcgan", "multichannel"):
        g = DcganGenerator(spec)
    else:
        g = StarGenerator(spec)
    return init_dcgan_weights(g)


def sample_latent(spec: GeneratorSpec, batch_size: int, generator: torch.Generator | None = None):
    """Draw the prior noise for one forward pass of a ``spec`` generator."""
    d = spec.latent_dim_per_tower

    def randn(n):
        return torch.randn(batch_size, n, generator=generator)

    if spec.kind in ("dcgan", "multichannel"):
        return randn(2 * d)
    z_red = randn(d)
    z_greens = tuple(randn(d) for _ in range(spec.c))
    return StarLatent(z_red=z_red, z_greens=z_greens)


def generate(g: nn.Module, z, mode: str = "eval") -> torch.Tensor:
    """Run the generator on ``z``; eval mode is deterministic."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    spec = g.spec
    if spec.kind in ("dcgan", "multichannel"):
        if isinstance(z, StarLatent):
            raise ShapeError(f"kind={spec.kind!r} takes a single latent vector")
        if z.shape[-1] != 2 * spec.latent_dim_per_tower:
            raise ShapeError(
                f"latent has {z.shape[-1]} dims, expected {2 * spec.latent_dim_per_tower}"
            )
    else:
        if not isinstance(z, StarLatent):
            raise ShapeError(f"kind={spec.kind!r} takes a StarLatent")
    was_training = g.training
    g.train(mode == "train")
    try:
        with torch.no_grad():
            return g(z)
    finally:
        g.train(was_training)


class Discriminator(nn.Module):
    """Stride-2 convolution ladder mirroring the generator.

    No batch normalization: the gradient penalty needs per-sample input
    gradients, which batch statistics would couple across the batch.
    """

    def __init__(self, in_channels: int, head: str = HEAD_UNCONSTRAINED, base_width: int = 128):
        super().__init__()
        if in_channels < 2:
            raise ConfigError("discriminator needs at least 2 input channels")
        if head not in (HEAD_PROBABILITY, HEAD_UNCONSTRAINED):
            raise ConfigError(f"unknown head {head!r}")
        if base_width % 8 != 0:
            raise ConfigError("base_width must be divisible by 8")
        self.head = head
        widths = [base_width // 8, base_width // 4, base_width // 2, base_width]
        layers = []
        prev = in_channels
        for w in widths:
            layers += [nn.Conv2d(prev, w, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True)]
            prev = w
        layers.append(nn.Conv2d(prev, 1, SPATIAL_BASE, 1, 0))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        score = self.body(x).view(x.shape[0], 1)
        if self.head == HEAD_PROBABILITY:
            score = torch.sigmoid(score)
        return score


def build_discriminator(
    input_channels: int, head: str = HEAD_UNCONSTRAINED, base_width: int = 128
) -> Discriminator:
    return init_dcgan_weights(Discriminator(input_channels, head, base_width))


def sever_cross_links(g: StarGenerator) -> StarGenerator:
    """Zero every green-tower weight slice that reads red features.

    After this the green outputs depend on the green latents alone; used as
    an ablation oracle for the one-way wiring.
    """
    if not isinstance(g, StarGenerator):
        raise ConfigError("only separable/star generators have cross links")
    with torch.no_grad():
        for tower in g.green_towers:
            convs = list(tower.ups) + [tower.out_conv]
            for level, conv in enumerate(convs):
                own = tower.own_widths[level]
                # transposed-conv weight layout is (in_channels, out, kh, kw);
                # inputs are [own feats | red feats]
                conv.weight[own:].zero_()
    return g


# --- checkpoints ------------------------------------------------------------

CHECKPOINT_FORMAT = "starshape-checkpoint"


def save_checkpoint(path, generator: nn.Module, step: int = 0, trainer_state: dict | None = None):
    """Archive the generator spec (JSON) plus all named parameter arrays.

    Batch-norm running statistics travel in the state dict, so a loaded
    checkpoint reproduces eval-mode outputs bit-exactly.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "generator_spec": generator.spec.to_json(),
        "generator_state": generator.state_dict(),
        "step": int(step),
    }
    if trainer_state is not None:
        payload["trainer_state"] = trainer_state
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    """Rebuild the generator in eval mode; returns (generator, payload)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    spec = GeneratorSpec.from_json(payload["generator_spec"])
    g = build_generator(spec)
    g.load_state_dict(payload["generator_state"])
    g.eval()
    return g, payload
