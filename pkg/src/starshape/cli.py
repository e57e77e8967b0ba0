"""Single command-line entry point for all workflows.

Every run writes a manifest (command, resolved config, seed, input
checksums, outputs) so it can be re-dispatched; directory-producing
commands put ``run_manifest.json`` inside the output directory and
file-producing commands put ``<name>.manifest.json`` next to the output.
All randomness flows from one --seed (or STARSHAPE_SEED), fanned out per
module through named substreams.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from . import c2st as c2st_mod
from . import data as data_mod
from . import latent as latent_mod
from . import report as report_mod
from . import training as training_mod
from .errors import (
    ConfigError,
    ContractError,
    ProtocolError,
    ShapeError,
    SpecError,
    SplitError,
    StarshapeError,
)
from .models import load_checkpoint
from .seeding import derive

USAGE_ERROR = 2
CONFIG_ERROR = 3

_CONFIG_ERRORS = (ConfigError, SpecError, ContractError, ProtocolError, SplitError,
                  ShapeError, FileNotFoundError)


def _default_seed():
    return int(os.environ.get("STARSHAPE_SEED", "0"))


def _resolve_data_dir(value):
    if value is not None:
        return Path(value)
    env = os.environ.get("STARSHAPE_DATA_DIR")
    if env:
        return Path(env)
    raise ConfigError("no dataset given: pass --data or set STARSHAPE_DATA_DIR")


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class _Run:
    """Collects provenance for one CLI invocation and writes the manifest."""

    def __init__(self, args):
        self.command = args.command
        self.config = {
            k: (str(v) if isinstance(v, Path) else v)
            for k, v in vars(args).items()
            if k not in ("func", "command", "workers")
        }
        self.seed = getattr(args, "seed", None)
        self.started = datetime.now(timezone.utc).isoformat()
        self.inputs = {}
        self.outputs = {}

    def add_input(self, path):
        path = Path(path)
        if path.is_dir():
            manifest = path / data_mod.MANIFEST_NAME
            if manifest.is_file():
                self.inputs[str(manifest)] = _sha256_file(manifest)
        elif path.is_file():
            self.inputs[str(path)] = _sha256_file(path)

    def add_output(self, path):
        path = Path(path)
        if path.is_file():
            self.outputs[str(path)] = _sha256_file(path)

    def write(self, target) -> Path:
        target = Path(target)
        if target.is_dir():
            where = target / "run_manifest.json"
        else:
            where = target.with_name(target.name + ".manifest.json")
        payload = {
            "command": self.command,
            "config": self.config,
            "code_version": __version__,
            "seed": self.seed,
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "inputs": self.inputs,
            "outputs": self.outputs,
        }
        where.write_text(json.dumps(payload, indent=2))
        return where


def _parse_class_specs(text, default_noise):
    recipes = []
    for entry in text.split(","):
        parts = entry.strip().split(":")
        if len(parts) == 1:
            name = pattern = parts[0]
            noise = default_noise
        elif len(parts) == 2:
            name, pattern = parts
            noise = default_noise
        elif len(parts) == 3:
            name, pattern = parts[0], parts[1]
            noise = float(parts[2])
        else:
            raise ConfigError(f"cannot parse class spec {entry!r}; use name[:pattern[:noise]]")
        recipes.append(data_mod.ClassRecipe(name=name, pattern=pattern, noise=noise))
    return tuple(recipes)


def cmd_synth_data(args):
    run = _Run(args)
    recipes = _parse_class_specs(args.classes, args.noise)
    spec = data_mod.SynthSpec(recipes=recipes, count=args.count, seed=args.seed)
    ds = data_mod.synth_generate(spec)
    if args.test_fraction > 0:
        ds = data_mod.split_train_test(ds, args.test_fraction, derive(args.seed, "split"))
    out = Path(args.out)
    manifest = data_mod.save_dataset(ds, out)
    run.add_output(manifest)
    run.write(out)
    print(f"wrote {len(ds.items)} images ({len(ds.classes)} classes) to {out}")
    return 0


def cmd_mine_multichannel(args):
    run = _Run(args)
    data_dir = _resolve_data_dir(args.data)
    run.add_input(data_dir)
    ds = data_mod.load_dataset(data_dir)
    mined = data_mod.mine_multichannel(ds)
    out = Path(args.out)
    manifest = data_mod.save_dataset(mined, out)
    run.add_output(manifest)
    run.write(out)
    print(f"mined {len(mined.items)} composites with {len(mined.classes) + 1} channels each")
    return 0


def cmd_train(args):
    run = _Run(args)
    cfg = training_mod.TrainConfig.from_file(args.config)
    if args.out is not None:
        cfg.out_dir = str(args.out)
    if args.data is not None:
        cfg.data_dir = str(args.data)
    elif cfg.data_dir is None:
        cfg.data_dir = str(_resolve_data_dir(None))
    if args.seed is not None:
        cfg.seed = args.seed
    run.seed = cfg.seed
    run.add_input(args.config)
    run.add_input(cfg.data_dir)
    if args.resume:
        paths = training_mod.resume(args.resume, cfg)
    else:
        paths = training_mod.train(cfg)
    for p in paths:
        run.add_output(p)
    run.add_output(Path(cfg.out_dir) / training_mod.LOG_NAME)
    run.write(Path(cfg.out_dir))
    print(f"trained to step {cfg.total_steps}; {len(paths)} checkpoint(s) in {cfg.out_dir}")
    return 0


def _c2st_config(args):
    return c2st_mod.C2STConfig(
        flavor=args.flavor,
        n_splits=args.splits,
        train_steps=args.steps,
        batch_size=args.batch_size,
        disc_base_width=args.disc_width,
        seed=args.seed,
    )


def _write_matrix_csv(path, classes, medians, mads):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["class"]
        for label in classes:
            header += [f"{label}_median", f"{label}_mad"]
        writer.writerow(header)
        for i, label in enumerate(classes):
            row = [label]
            for j in range(len(classes)):
                row += [f"{medians[i][j]:.6g}", f"{mads[i][j]:.6g}"]
            writer.writerow(row)


def cmd_eval_c2st(args):
    run = _Run(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else None
    if not args.matrix:
        if ckpt is None:
            raise ConfigError("eval-c2st needs --checkpoint (or --matrix for real-vs-real)")
        if not ckpt.is_file():
            raise ConfigError(f"checkpoint not found: {ckpt}")
    data_dir = _resolve_data_dir(args.data)
    run.add_input(data_dir)
    ds = data_mod.load_dataset(data_dir)
    cfg = _c2st_config(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.matrix:
        classes, medians, mads = c2st_mod.c2st_real_matrix(ds, cfg)
        _write_matrix_csv(out, classes, medians, mads)
    else:
        run.add_input(ckpt)
        generator, _ = load_checkpoint(ckpt)
        report = c2st_mod.c2st_generator(generator, ds, cfg)
        out.write_text(report.to_json())
        print(f"median {report.median:.4g} (mad {report.mad:.3g}) over "
              f"{len(report.per_split_scores)} split scores")
    run.add_output(out)
    run.write(out)
    return 0


def cmd_reconstruct(args):
    run = _Run(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    run.add_input(ckpt)
    data_dir = _resolve_data_dir(args.data)
    run.add_input(data_dir)
    generator, _ = load_checkpoint(ckpt)
    ds = data_mod.load_dataset(data_dir)
    idx = ds.indices(split=data_mod.TEST) or list(range(len(ds.items)))
    if args.limit:
        idx = idx[: args.limit]
    recon = (
        latent_mod.reconstruct_separable if args.mode == "separable"
        else latent_mod.reconstruct_regular
    )
    class_to_pair = {label: k for k, label in enumerate(ds.classes)}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["image_id", "class", "mode", "l2_error", "nll"]
            + [f"restart_{r + 1}" for r in range(args.restarts)]
        )
        for i in idx:
            item = ds.items[i]
            pair = class_to_pair[item.class_label] if generator.spec.kind == "star" else 0
            result = recon(
                generator, item, restarts=args.restarts, iters=args.iters,
                seed=derive(args.seed, f"target-{i}"), pair_index=pair,
            )
            writer.writerow(
                [i, item.class_label, result.mode, f"{result.l2_error:.8g}", f"{result.nll:.8g}"]
                + [f"{e:.8g}" for e in result.restart_errors]
            )
    run.add_output(out)
    run.write(out)
    print(f"reconstructed {len(idx)} image(s) -> {out}")
    return 0


def cmd_interpolate(args):
    run = _Run(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    run.add_input(ckpt)
    generator, _ = load_checkpoint(ckpt)
    spec = generator.spec
    gen = torch.Generator().manual_seed(derive(args.seed, "interpolate"))
    d = spec.latent_dim_per_tower
    z_start = torch.randn(1, d, generator=gen)
    z_end = torch.randn(1, d, generator=gen)
    z_greens = [torch.randn(1, d, generator=gen) for _ in range(spec.c)]
    strip = latent_mod.cell_cycle_strip(generator, z_start, z_end, args.frames, z_greens)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report_mod.save_strip_png(strip, out)
    run.add_output(out)
    run.write(out)
    print(f"wrote {args.frames}-frame strip with {strip.shape[1]} columns to {out}")
    return 0


def _read_matrix_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    classes = [c[: -len("_median")] for c in header[1:] if c.endswith("_median")]
    med = [[float(r[1 + 2 * j]) for j in range(len(classes))] for r in rows[1:]]
    mad = [[float(r[2 + 2 * j]) for j in range(len(classes))] for r in rows[1:]]
    return classes, med, mad


def cmd_report(args):
    run = _Run(args)
    src = Path(args.input)
    if not src.is_file():
        raise ConfigError(f"input not found: {src}")
    run.add_input(src)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sections = {}
    if src.suffix == ".json":
        payload = json.loads(src.read_text())
        if "per_split_scores" not in payload:
            raise ConfigError(f"{src} is not a two-sample-test report")
        report_mod.plot_c2st_report(payload, out)
        sections["Two-sample test"] = (
            f"median {payload['median']:.4g}, mad {payload['mad']:.4g}, "
            f"{len(payload['per_split_scores'])} splits, "
            f"{len(payload.get('excluded_splits', []))} excluded"
        )
    elif src.suffix == ".csv":
        with open(src) as fh:
            header = fh.readline().strip().split(",")
        if "step" in header:
            report_mod.plot_training_log(src, out)
            sections["Training"] = f"loss curves from {src.name}"
        elif "l2_error" in header:
            with open(src) as fh:
                rows = list(csv.DictReader(fh))
            results = [
                latent_mod.ReconResult(
                    best_latent=np.zeros(0),
                    l2_error=float(r["l2_error"]),
                    nll=float(r["nll"]),
                    restart_errors=[],
                    mode=r.get("mode", "regular"),
                )
                for r in rows
            ]
            scatter = latent_mod.recon_scatter(
                results, nn_median=args.nn_median, latent_dim=args.latent_dim
            )
            report_mod.plot_recon_scatter(scatter, out)
            sections["Reconstruction"] = f"{len(results)} reconstructions from {src.name}"
        elif header and header[0] == "class":
            classes, med, mad = _read_matrix_csv(src)
            report_mod.plot_score_matrix(classes, med, mad, out)
            sections["Score matrix"] = report_mod.matrix_to_markdown(classes, med, mad)
        else:
            raise ConfigError(f"unrecognized CSV schema in {src}")
    else:
        raise ConfigError(f"cannot render {src.suffix!r} inputs")
    run.add_output(out)
    if args.summary:
        summary = report_mod.write_markdown_summary(sections, args.summary)
        run.add_output(summary)
    run.write(out)
    print(f"rendered {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="starshape",
        description="Two-channel cell-image generators: training, two-sample tests, "
                    "latent reconstruction and interpolation.",
    )
    parser.add_argument("--workers", type=int, default=None,
                        help="cap compute threads (default: all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a deterministic synthetic dataset")
    p.add_argument("--classes", required=True,
                   help="comma list of name[:pattern[:noise]]; patterns: tips,ring,dots,cap")
    p.add_argument("--count", type=int, required=True, help="images per class")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("mine-multichannel", help="build NN-mined multi-channel composites")
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_mine_multichannel)

    p = sub.add_parser("train", help="train a generator from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-c2st", help="classifier two-sample test")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--matrix", action="store_true",
                   help="all-pairs real-vs-real table instead of a generator eval")
    p.add_argument("--data", default=None)
    p.add_argument("--flavor", choices=c2st_mod.FLAVORS, default="wgan-gp")
    p.add_argument("--splits", type=int, default=c2st_mod.DEFAULT_SPLITS)
    p.add_argument("--steps", type=int, default=c2st_mod.DEFAULT_TRAIN_STEPS)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--disc-width", type=int, default=128)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_c2st)

    p = sub.add_parser("reconstruct", help="latent recovery of held-out images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--mode", choices=("regular", "separable"), default="regular")
    p.add_argument("--restarts", type=int, default=latent_mod.DEFAULT_RESTARTS)
    p.add_argument("--iters", type=int, default=latent_mod.DEFAULT_ITERS)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("interpolate", help="cell-cycle strip along the red latent")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("report", help="render plots and summaries from result files")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--summary", default=None, help="also write a markdown summary")
    p.add_argument("--nn-median", type=float, default=None)
    p.add_argument("--latent-dim", type=int, default=None)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_report)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 2 on usage error, 0 on --help
        return int(exc.code or 0)
    if args.workers is not None:
        torch.set_num_threads(max(1, args.workers))
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    except StarshapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
