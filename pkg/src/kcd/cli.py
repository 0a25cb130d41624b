"""``kcd`` command line: one binary, one subcommand per workflow.

Settings resolve in this order (later wins): built-in defaults, values stored
in a model checkpoint (mask, acceleration, T), the ``--config`` file, explicit
flags.  Every run writes ``run_config.json`` with the effective settings next
to its outputs.  Exit status is 0 on success, 2 for usage errors (bad flags,
missing inputs, invalid config) and 1 for failures while running; errors are
reported as a single ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .container import ContainerError
from .data import (PortableFormatError, SliceRecord, export_portable, generate_phantoms,
                   import_portable, ingest_fastmri, shepp_logan, write_manifest)
from .degradation import degradation_strip, save_strip_png
from .fourier import ValidationError, forward_transform, magnitude
from .masks import FAMILIES, default_center_fraction, make_mask, make_schedule
from .metrics import psnr
from .sampler import SAMPLERS

logger = logging.getLogger("kcd")

DATA_ENV = "KCD_DATA_DIR"
PORTABLE_SUFFIX = ".kcds"

# key -> (flag, type, default, help).  Defaults are the published full-scale
# values where those exist; `--config desk` selects the small CPU recipe.
SETTINGS = {
    "mask_family": ("--mask", str, "cartesian-random", "sampling mask family"),
    "acceleration": ("--accel", float, 4.0, "acceleration factor R"),
    "center_fraction": ("--center-frac", float, None, "fully sampled center fraction"),
    "total_steps": ("--T", int, 125, "total diffusion steps T"),
    "sampler": ("--sampler", str, "cold", "sampling loop"),
    "n_samples": ("--n-samples", int, 1, "trajectories per slice"),
    "aggregation": ("--aggregation", str, "mean", "how samples are combined"),
    "iterations": ("--iters", int, 700000, "total optimizer updates"),
    "batch_size": ("--batch", int, 6, "examples per update"),
    "learning_rate": ("--lr", float, 2e-5, "Adam learning rate"),
    "checkpoint_interval": ("--checkpoint-every", int, 0, "save training state every N updates (0: final only)"),
    "depth": ("--depth", int, 4, "U-Net depth"),
    "base_channels": ("--base-channels", int, 64, "U-Net first-level channels"),
    "time_embedding_dim": ("--time-embedding-dim", int, 128, "sinusoidal time embedding width"),
    "precision": ("--precision", str, "float32", "training precision"),
    "independent_subsets": ("--independent-subsets", bool, False,
                            "draw each step's k-space subset independently (no nesting)"),
    "data_consistency": ("--data-consistency", bool, False,
                         "re-insert measured k-space after sampling"),
}
CHOICES = {"mask_family": list(FAMILIES), "sampler": list(SAMPLERS),
           "aggregation": ["mean", "median"], "precision": ["float32", "float64"]}
# accepted in config files but without a flag of their own
CONFIG_ONLY = {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "loss": "l1"}
MASK = ("mask_family", "acceleration", "center_fraction")
TRAIN = ("total_steps", "iterations", "batch_size", "learning_rate", "checkpoint_interval",
         "depth", "base_channels", "time_embedding_dim", "precision", "independent_subsets")
SAMPLING = ("total_steps", "sampler", "n_samples", "aggregation", "independent_subsets",
            "data_consistency")
CHECKPOINT_KEYS = ("mask_family", "acceleration", "center_fraction", "total_steps")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage problems become one `error: ...` line instead of argparse's two-line report
    def error(self, message):
        raise UsageError(f"{message} (see `{self.prog} --help`)")


# ---------------------------------------------------------------- parsing

def _default_text(key, default):
    if key == "center_fraction":
        return "0.32/R, i.e. 0.08 at 4x and 0.04 at 8x"
    return default


def _add_setting(parser, key, default=None):
    flag, typ, base_default, text = SETTINGS[key]
    shown = _default_text(key, base_default if default is None else default)
    if typ is bool:
        parser.add_argument(flag, dest=key, action="store_const", const=True, default=None,
                            help=f"{text} (default: off)")
    else:
        parser.add_argument(flag, dest=key, type=typ, default=None, choices=CHOICES.get(key),
                            help=f"{text} (default: {shown})")


def _common(parser, out_default):
    g = parser.add_argument_group("shared")
    g.add_argument("--config", help="JSON config file, or the name of a bundled preset "
                                    "(desk, paper_cartesian_4x, ...) (default: none)")
    g.add_argument("--seed", type=int, default=None, help="master random seed (default: 0)")
    g.add_argument("--jobs", type=int, default=1, help="parallel workers for slices/files (default: 1)")
    g.add_argument("--out", default=out_default, help=f"output directory (default: {out_default})")
    g.add_argument("-q", "--quiet", action="store_true", help="only print results and errors (default: off)")


def _data_arg(parser, name="--data", required_text="dataset"):
    parser.add_argument(name, default=None,
                        help=f"{required_text}: portable slice file, or directory of fastMRI .h5 / "
                             f"{PORTABLE_SUFFIX} files (default: ${DATA_ENV})")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kcd", description="k-space cold diffusion for accelerated MRI")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    s = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    s.add_argument("--n", type=int, default=64, help="number of phantoms (default: 64)")
    s.add_argument("--size", type=int, default=64, help="image side in pixels (default: 64)")
    _common(s, "runs/phantom")

    s = sub.add_parser("make-mask", help="build a sampling mask (JSON descriptor + PNG)")
    s.add_argument("--size", type=int, nargs=2, default=[320, 320], metavar=("H", "W"),
                   help="k-space grid (default: 320 320)")
    for k in MASK:
        _add_setting(s, k)
    _common(s, "runs/mask")

    s = sub.add_parser("degrade-strip", help="render D(x, t) for a sequence of steps")
    _data_arg(s, required_text="dataset (default source is a Shepp-Logan phantom)")
    s.add_argument("--index", type=int, default=0, help="slice index within the dataset (default: 0)")
    s.add_argument("--size", type=int, default=64, help="phantom side when no dataset is given (default: 64)")
    s.add_argument("--steps", type=int, nargs="+", default=None,
                   help="steps to render (default: five evenly spaced from T to 0)")
    for k in MASK + ("total_steps", "independent_subsets"):
        _add_setting(s, k)
    _common(s, "runs/strip")

    s = sub.add_parser("train", help="train the restoration network")
    _data_arg(s, required_text="training dataset")
    s.add_argument("--resume", default=None, help="training state file to continue from (default: none)")
    for k in MASK + TRAIN:
        _add_setting(s, k)
    _common(s, "runs/train")

    for name, text, n_default in [("reconstruct", "reconstruct slices and score them", 1),
                                  ("multi-sample", "multi-trajectory reconstruction with uncertainty maps", 8)]:
        s = sub.add_parser(name, help=text)
        s.add_argument("--checkpoint", required=True, help="model checkpoint (required)")
        _data_arg(s)
        s.add_argument("--volumes", nargs="+", default=None, help="restrict to these volume ids (default: all)")
        s.add_argument("--no-panels", action="store_true", help="skip PNG panels (default: off)")
        for k in MASK + SAMPLING:
            _add_setting(s, k, n_default if k == "n_samples" else None)
        _common(s, f"runs/{name}")

    s = sub.add_parser("evaluate", help="evaluate one model on other masks/accelerations without retraining")
    s.add_argument("--checkpoint", required=True, help="model checkpoint (required)")
    _data_arg(s)
    s.add_argument("--volumes", nargs="+", default=None, help="restrict to these volume ids (default: all)")
    s.add_argument("--train-mask", choices=list(FAMILIES), default=None,
                   help="mask family the model was trained with (default: read from checkpoint)")
    s.add_argument("--eval-mask", nargs="+", choices=list(FAMILIES), default=None,
                   help="mask families to evaluate (default: the training mask)")
    s.add_argument("--accel", nargs="+", type=float, default=None, dest="accels",
                   help="evaluation accelerations (default: the training acceleration)")
    for k in SAMPLING:
        _add_setting(s, k)
    _common(s, "runs/evaluate")

    s = sub.add_parser("zero-shot", help="cross-mask table from a 4x and/or an 8x model")
    s.add_argument("--checkpoint-4x", default=None, help="model trained at 4x (default: none)")
    s.add_argument("--checkpoint-8x", default=None, help="model trained at 8x (default: none)")
    _data_arg(s)
    s.add_argument("--volumes", nargs="+", default=None, help="restrict to these volume ids (default: all)")
    s.add_argument("--train-mask", choices=list(FAMILIES), default=None,
                   help="mask family the models were trained with (default: read from checkpoint)")
    s.add_argument("--eval-mask", nargs="+", choices=list(FAMILIES), default=list(FAMILIES),
                   help="mask families to evaluate (default: all four)")
    for k in SAMPLING:
        _add_setting(s, k)
    _common(s, "runs/zero-shot")

    s = sub.add_parser("ablate-T", help="train and evaluate one model per total step count")
    _data_arg(s, required_text="training dataset")
    _data_arg(s, "--eval-data", "evaluation dataset (default: the training dataset)")
    s.add_argument("--T-values", type=int, nargs="+", default=[125, 250, 1000], dest="T_values",
                   help="values of T to compare (default: 125 250 1000)")
    for k in MASK + tuple(k for k in TRAIN if k != "total_steps"):
        _add_setting(s, k)
    _common(s, "runs/ablate-T")
    return p


# ---------------------------------------------------------------- settings

def _load_config_file(name):
    if name is None:
        return {}
    path = Path(name)
    if not path.is_file():
        bundled = resources.files("kcd") / "configs" / f"{Path(name).stem}.cfg"
        if not bundled.is_file():
            raise UsageError(f"config file not found: {name}")
        text = bundled.read_text()
    else:
        text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid config {name}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"invalid config {name}: expected a JSON object")
    unknown = set(data) - set(SETTINGS) - set(CONFIG_ONLY) - {"seed"}
    if unknown:
        raise UsageError(f"invalid config {name}: unknown keys {sorted(unknown)}")
    for key, choices in CHOICES.items():
        if key in data and data[key] not in choices:
            raise UsageError(f"invalid config {name}: {key}={data[key]!r} not in {choices}")
    return data


def resolve(args, keys, checkpoint_meta=None, overrides=None) -> dict:
    """Effective settings for ``keys`` plus ``seed``."""
    eff = {k: SETTINGS[k][2] for k in keys}
    eff.update(overrides or {})
    eff["seed"] = 0
    for k in CHECKPOINT_KEYS:
        if k in keys and checkpoint_meta and checkpoint_meta.get(k) is not None:
            eff[k] = checkpoint_meta[k]
    cfg = _load_config_file(args.config)
    for k, v in cfg.items():
        if k in keys or k == "seed" or (k in CONFIG_ONLY and "iterations" in keys):
            eff[k] = v
    for k in list(keys) + ["seed"]:
        v = getattr(args, k, None)
        if v is not None:
            eff[k] = v
    if "center_fraction" in eff and eff["center_fraction"] is None:
        eff["center_fraction"] = default_center_fraction(eff["acceleration"])
    return eff


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_config(out: Path, args, effective: dict, inputs: dict) -> None:
    snapshot = {
        "command": args.command,
        "config_file": args.config,
        "seed": effective.get("seed"),
        "inputs": inputs,
        "output": str(args.out),
        "effective": effective,
    }
    (out / "run_config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")


def _dataset_path(value) -> Path:
    root = os.environ.get(DATA_ENV)
    if value is None:
        if not root:
            raise UsageError(f"no dataset given: pass --data or set {DATA_ENV}")
        path = Path(root)
    else:
        path = Path(value)
        if not path.exists() and root and not path.is_absolute() and (Path(root) / path).exists():
            path = Path(root) / path
    if not path.exists():
        raise UsageError(f"dataset not found: {path}")
    return path


def load_dataset(value, jobs=1, volumes=None) -> list[SliceRecord]:
    path = _dataset_path(value)
    if path.is_dir():
        errors: list = []
        records = list(ingest_fastmri(path, errors=errors, jobs=jobs))
        for f in sorted(path.glob(f"*{PORTABLE_SUFFIX}")):
            records.extend(import_portable(f))
        for name, msg in errors:
            logger.warning("skipped %s: %s", name, msg)
    else:
        records = import_portable(path)
    if volumes:
        present = {r.volume_id for r in records}
        missing = [v for v in volumes if v not in present]
        if missing:
            raise UsageError(f"volumes not in dataset {path}: {missing}")
        records = [r for r in records if r.volume_id in set(volumes)]
    if not records:
        raise UsageError(f"dataset {path} contains no slices")
    return records


def _checkpoint(path):
    from .restoration import load_checkpoint

    if path is None or not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# ---------------------------------------------------------------- commands

def cmd_phantom(args):
    eff = resolve(args, ())
    eff.update(n=args.n, size=args.size)
    records = generate_phantoms(args.n, args.size, eff["seed"])
    out = _out_dir(args)
    export_portable(records, out / f"phantoms{PORTABLE_SUFFIX}")
    write_manifest(records, out / "manifest.json")
    _write_run_config(out, args, eff, {})
    print(f"wrote {len(records)} phantoms ({args.size}x{args.size}) to {out / ('phantoms' + PORTABLE_SUFFIX)}")


def cmd_make_mask(args):
    eff = resolve(args, MASK)
    h, w = args.size
    eff["shape"] = [h, w]
    mask = make_mask(eff["mask_family"], h, w, eff["acceleration"], eff["center_fraction"], eff["seed"])
    out = _out_dir(args)
    mask.save_json(out / "mask.json")
    mask.save_png(out / "mask.png")
    _write_run_config(out, args, eff, {})
    print(f"{mask.family} R={mask.acceleration:g}: sampled fraction {mask.sampled_fraction:.4f}")


def cmd_degrade_strip(args):
    eff = resolve(args, MASK + ("total_steps", "independent_subsets"))
    T = eff["total_steps"]
    if args.data is None and not os.environ.get(DATA_ENV):
        x0 = shepp_logan(args.size).astype(np.complex128)
        target, source = magnitude(x0), f"shepp-logan {args.size}"
    else:
        records = load_dataset(args.data, args.jobs)
        if not 0 <= args.index < len(records):
            raise UsageError(f"--index {args.index} outside 0..{len(records) - 1}")
        rec = records[args.index]
        x0, target, source = rec.image, rec.target, f"{rec.volume_id}/{rec.slice_index}"
    steps = args.steps or sorted({int(round(T * f)) for f in (1.0, 0.75, 0.5, 0.25, 0.0)}, reverse=True)
    h, w = x0.shape
    mask = make_mask(eff["mask_family"], h, w, eff["acceleration"], eff["center_fraction"], eff["seed"])
    schedule = make_schedule(mask, T, eff["seed"], independent=eff["independent_subsets"])
    strip = degradation_strip(x0, schedule, steps)
    out = _out_dir(args)
    save_strip_png(strip, out / "strip.png")
    rng = float(target.max()) or 1.0
    rows = [{"t": int(t), "sampled_fraction": float(schedule(int(t)).mean()),
             "psnr_db": _json_float(psnr(np.abs(im), target, rng))} for t, im in zip(steps, strip)]
    (out / "strip.json").write_text(json.dumps({"source": source, "steps": rows}, indent=2) + "\n")
    _write_run_config(out, args, eff, {"data": args.data})
    for r in rows:
        print(f"t={r['t']:<5} sampled {r['sampled_fraction']:.3f}  psnr {float(r['psnr_db']):.2f} dB")


def _json_float(x):
    return "inf" if np.isinf(x) else float(x)


def _train_config(eff):
    from .training import TrainConfig

    known = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in eff.items() if k in known})


def cmd_train(args):
    from .training import train_loop

    eff = resolve(args, MASK + TRAIN)
    if args.resume is not None and not Path(args.resume).is_file():
        raise UsageError(f"training state not found: {args.resume}")
    config = _train_config(eff)
    records = load_dataset(args.data, args.jobs)
    out = _out_dir(args)
    _write_run_config(out, args, config.to_dict(), {"data": args.data, "resume": args.resume})
    state = train_loop(config, records, out_dir=out, resume=args.resume,
                       log_every=0 if args.quiet else 100)
    tail = [h[1] for h in state.history[-100:]]
    print(f"trained {state.iteration} iterations; final loss {np.mean(tail):.5f}; model at {out / 'model.ckpt'}")


def _experiment(eff, model_id, **extra):
    from .evaluation import ExperimentConfig

    return ExperimentConfig(
        mask_family=eff.get("mask_family", "cartesian-random"),
        acceleration=float(eff.get("acceleration", 4.0)),
        center_fraction=eff.get("center_fraction"),
        total_steps=eff["total_steps"], sampler=eff["sampler"], n_samples=eff["n_samples"],
        aggregation=eff["aggregation"], seed=eff["seed"],
        data_consistency=eff["data_consistency"], independent_subsets=eff["independent_subsets"],
        model_id=model_id, **extra)


def _summary_line(report):
    return (f"psnr {report.psnr:.2f} dB  ssim {report.ssim:.4f}  "
            f"(zero-filled {report.zero_filled_psnr:.2f} dB / {report.zero_filled_ssim:.4f})")


def cmd_reconstruct(args):
    from .evaluation import run_experiment

    model = _checkpoint(args.checkpoint)
    overrides = {"n_samples": 8} if args.command == "multi-sample" else None
    eff = resolve(args, MASK + SAMPLING, model.meta, overrides)
    config = _experiment(eff, str(args.checkpoint), train_mask=model.meta.get("mask_family"))
    records = load_dataset(args.data, args.jobs, args.volumes)
    out = _out_dir(args)
    _write_run_config(out, args, config.descriptor(),
                      {"checkpoint": args.checkpoint, "data": args.data, "volumes": args.volumes})
    report = run_experiment(records, model, config, out, jobs=args.jobs, panels=not args.no_panels,
                            keep_estimates=True)
    recon = [SliceRecord(forward_transform(x), np.abs(x), r.volume_id, r.slice_index, r.contrast_tag)
             for x, r in zip(report.estimates, records)]
    export_portable(recon, out / f"reconstructions{PORTABLE_SUFFIX}")
    print(_summary_line(report))
    if config.n_samples > 1:
        u = np.mean([v["uncertainty_mean"] for v in report.per_volume.values()])
        print(f"mean uncertainty over {config.n_samples} samples: {u:.5f}")


def _print_table(table):
    for family, cells in table.items():
        print(family)
        for label, c in cells.items():
            print(f"  {label:<24} {float(c['psnr_db']):7.2f} dB / {float(c['ssim']):.4f}")


def _table_base(args, metas):
    from .evaluation import ExperimentConfig

    eff = resolve(args, SAMPLING)
    train_mask = args.train_mask or next((m.get("mask_family") for m in metas if m.get("mask_family")), None)
    base = ExperimentConfig(total_steps=eff["total_steps"], sampler=eff["sampler"],
                            n_samples=eff["n_samples"], aggregation=eff["aggregation"], seed=eff["seed"],
                            data_consistency=eff["data_consistency"],
                            independent_subsets=eff["independent_subsets"], train_mask=train_mask)
    return eff, base


def cmd_evaluate(args):
    from .evaluation import zero_shot_table

    model = _checkpoint(args.checkpoint)
    meta = model.meta
    if args.total_steps is None and meta.get("total_steps"):
        args.total_steps = int(meta["total_steps"])
    eff, base = _table_base(args, [meta])
    base = replace(base, model_id=str(args.checkpoint))
    trained_R = meta.get("acceleration")
    accels = args.accels or [trained_R or 4.0]
    families = args.eval_mask or [base.train_mask or "cartesian-random"]
    columns = []
    for R in accels:
        label = f"{R:g}x"
        if trained_R is not None and float(trained_R) != float(R):
            label += f" with {float(trained_R):g}-fold model"
        columns.append((label, model, R))
    records = load_dataset(args.data, args.jobs, args.volumes)
    out = _out_dir(args)
    eff.update(train_mask=base.train_mask, eval_masks=families, accelerations=accels)
    _write_run_config(out, args, eff, {"checkpoint": args.checkpoint, "data": args.data,
                                       "volumes": args.volumes})
    _print_table(zero_shot_table(records, columns, families, base, out, args.jobs))


def cmd_zero_shot(args):
    from .evaluation import zero_shot_table

    if args.checkpoint_4x is None and args.checkpoint_8x is None:
        raise UsageError("zero-shot needs --checkpoint-4x and/or --checkpoint-8x")
    m4 = _checkpoint(args.checkpoint_4x) if args.checkpoint_4x else None
    m8 = _checkpoint(args.checkpoint_8x) if args.checkpoint_8x else None
    metas = [m.meta for m in (m4, m8) if m is not None]
    if args.total_steps is None and metas and metas[0].get("total_steps"):
        args.total_steps = int(metas[0]["total_steps"])
    eff, base = _table_base(args, metas)
    columns = []
    if m4 is not None:
        columns.append(("4x", m4, 4.0))
    if m8 is not None:
        columns += [("8x", m8, 8.0), ("4x with 8-fold model", m8, 4.0)]
    records = load_dataset(args.data, args.jobs, args.volumes)
    out = _out_dir(args)
    eff.update(train_mask=base.train_mask, eval_masks=args.eval_mask)
    _write_run_config(out, args, eff, {"checkpoint_4x": args.checkpoint_4x,
                                       "checkpoint_8x": args.checkpoint_8x, "data": args.data,
                                       "volumes": args.volumes})
    _print_table(zero_shot_table(records, columns, args.eval_mask, base, out, args.jobs))


def cmd_ablate_T(args):
    from .evaluation import ExperimentConfig, ablate_timesteps, format_ablation_table

    if len(set(args.T_values)) < 2 or min(args.T_values) < 1:
        raise UsageError("--T-values needs at least two distinct positive values")
    eff = resolve(args, MASK + TRAIN)
    config = _train_config(eff)
    train = load_dataset(args.data, args.jobs)
    evalset = load_dataset(args.eval_data, args.jobs) if args.eval_data else train
    eval_config = ExperimentConfig(mask_family=config.mask_family, acceleration=config.acceleration,
                                   center_fraction=config.center_fraction, seed=config.seed)
    out = _out_dir(args)
    snapshot = dict(config.to_dict(), T_values=args.T_values)
    _write_run_config(out, args, snapshot, {"data": args.data, "eval_data": args.eval_data})
    result = ablate_timesteps(train, evalset, args.T_values, config, (config.acceleration,),
                              eval_config, out_dir=out, jobs=args.jobs)
    print(format_ablation_table(result))


COMMANDS = {
    "phantom": cmd_phantom,
    "make-mask": cmd_make_mask,
    "degrade-strip": cmd_degrade_strip,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "multi-sample": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "zero-shot": cmd_zero_shot,
    "ablate-T": cmd_ablate_T,
}


def _one_line(exc) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return 2
    except (ValidationError, ContainerError, PortableFormatError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
