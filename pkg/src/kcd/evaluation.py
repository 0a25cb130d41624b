"""Experiment harness: per-slice reconstruction, metrics, tables and image panels.

Metrics follow the fastMRI conventions: computed on magnitude images, with
``data_range`` equal to the maximum of the target over the whole volume,
averaged per volume first and then across volumes.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .degradation import zero_filled
from .fourier import ValidationError
from .masks import SamplingMask, default_center_fraction, make_mask
from .metrics import psnr, render_error_map, ssim, to_uint8
from .sampler import multi_sample, run_sampler

__all__ = [
    "ExperimentConfig",
    "MetricReport",
    "run_experiment",
    "zero_shot_table",
    "ablate_timesteps",
    "REFERENCE_ABLATION",
    "CSV_FIELDS",
]

logger = logging.getLogger(__name__)

CSV_FIELDS = ["volume_id", "slice", "mask_family", "R", "T", "sampler", "n_samples", "psnr_db", "ssim"]

# Published full-scale values (fastMRI single-coil knee, 4x/8x Cartesian,
# 700k iterations), printed as context only: not reproducible at desk scale.
REFERENCE_ABLATION = {
    125: {"4x": (30.58, 0.7150), "8x": (29.51, 0.6414)},
    250: {"4x": (30.58, 0.7148), "8x": (29.50, 0.6406)},
    1000: {"4x": (30.59, 0.7149), "8x": (29.51, 0.6412)},
}


@dataclass
class ExperimentConfig:
    mask_family: str = "cartesian-random"
    acceleration: float = 4.0
    center_fraction: float | None = None
    total_steps: int = 125
    sampler: str = "cold"
    n_samples: int = 1
    aggregation: str = "mean"
    seed: int = 0
    data_consistency: bool = False
    independent_subsets: bool = False
    model_id: str = ""
    train_mask: str | None = None

    @property
    def resolved_center_fraction(self) -> float:
        if self.center_fraction is None:
            return default_center_fraction(self.acceleration)
        return self.center_fraction

    def descriptor(self) -> dict:
        d = asdict(self)
        d["center_fraction"] = self.resolved_center_fraction
        return d


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


def _json_num(x: float):
    return "inf" if math.isinf(x) else float(x)


def _slice_seed(seed: int, volume_id: str, slice_index: int, stream: int) -> int:
    ss = np.random.SeedSequence([int(seed), zlib.crc32(volume_id.encode()), int(slice_index), stream])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def slice_mask(config: ExperimentConfig, record) -> SamplingMask:
    h, w = record.shape
    return make_mask(config.mask_family, h, w, config.acceleration, config.resolved_center_fraction,
                     _slice_seed(config.seed, record.volume_id, record.slice_index, 0))


@dataclass
class MetricReport:
    descriptor: dict
    rows: list = field(default_factory=list)
    per_volume: dict = field(default_factory=dict)
    psnr: float = math.nan
    ssim: float = math.nan
    zero_filled_psnr: float = math.nan
    zero_filled_ssim: float = math.nan
    estimates: list | None = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_FIELDS)
            for r in self.rows:
                w.writerow([r["volume_id"], r["slice"], r["mask_family"], _fmt(r["R"]), r["T"],
                            r["sampler"], r["n_samples"], _fmt(r["psnr_db"]), _fmt(r["ssim"])])

    def summary(self) -> dict:
        return {
            "experiment": self.descriptor,
            "psnr_db": _json_num(self.psnr),
            "ssim": _json_num(self.ssim),
            "zero_filled": {"psnr_db": _json_num(self.zero_filled_psnr),
                            "ssim": _json_num(self.zero_filled_ssim)},
            "per_volume": {v: {k: _json_num(x) for k, x in m.items()} for v, m in self.per_volume.items()},
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _save_png(array_u8, path):
    from PIL import Image

    Image.fromarray(array_u8, mode="L").save(path)


def _evaluate_slice(model, record, config: ExperimentConfig, data_range: float, panel_dir,
                    keep_estimate=False):
    mask = slice_mask(config, record)
    traj_seed = _slice_seed(config.seed, record.volume_id, record.slice_index, 1)
    kwargs = {"data_consistency": config.data_consistency,
              "independent_subsets": config.independent_subsets}
    if config.n_samples > 1:
        result = multi_sample(model, record.kspace, mask, config.total_steps, config.n_samples,
                              traj_seed, aggregation=config.aggregation, sampler=config.sampler,
                              **kwargs)
    else:
        result = run_sampler(config.sampler, model, record.kspace, mask, config.total_steps,
                             traj_seed, **kwargs)
    recon = np.abs(result.estimate)
    zf = np.abs(zero_filled(record.kspace, mask))
    target = record.target
    metrics = {
        "psnr_db": psnr(recon, target, data_range),
        "ssim": ssim(recon, target, data_range),
        "zf_psnr_db": psnr(zf, target, data_range),
        "zf_ssim": ssim(zf, target, data_range),
        "uncertainty_mean": float(np.mean(result.uncertainty)) if result.uncertainty is not None else 0.0,
    }
    if panel_dir is not None:
        stem = f"{record.volume_id}_{record.slice_index}"
        _save_png(to_uint8(target), panel_dir / f"{stem}_target.png")
        _save_png(to_uint8(zf), panel_dir / f"{stem}_zero_filled.png")
        _save_png(mask.bits.astype(np.uint8) * 255, panel_dir / f"{stem}_mask.png")
        _save_png(to_uint8(recon), panel_dir / f"{stem}_recon.png")
        _save_png(render_error_map(recon, target, data_range), panel_dir / f"{stem}_error.png")
        if result.uncertainty is not None:
            _save_png(to_uint8(result.uncertainty), panel_dir / f"{stem}_uncertainty.png")
    if keep_estimate:
        metrics["estimate"] = result.estimate
    return metrics


def run_experiment(records, model, config: ExperimentConfig, out_dir=None, jobs: int = 1,
                   panels: bool = True, name: str = "metrics",
                   keep_estimates: bool = False) -> MetricReport:
    """Reconstruct every slice with ``config``'s mask and sampler and score it.

    With ``out_dir`` set, writes ``<name>.csv``, ``<name>.json`` and (if
    ``panels``) ``panels/<volume>_<slice>_<role>.png`` images into it.  With
    ``keep_estimates`` the complex reconstructions are kept in
    ``report.estimates`` (slice order).
    """
    records = list(records)
    if not records:
        raise ValidationError("no slices to evaluate")
    ranges: dict[str, float] = {}
    for r in records:
        ranges[r.volume_id] = max(ranges.get(r.volume_id, 0.0), float(np.max(r.target)))
    for vid, rng in ranges.items():
        if not rng > 0:
            raise ValidationError(f"volume {vid} has an all-zero target")
    out = Path(out_dir) if out_dir is not None else None
    panel_dir = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if panels:
            panel_dir = out / "panels"
            panel_dir.mkdir(exist_ok=True)

    def work(r):
        return _evaluate_slice(model, r, config, ranges[r.volume_id], panel_dir, keep_estimates)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(work, records))
    else:
        results = [work(r) for r in records]

    report = MetricReport(config.descriptor())
    by_volume: dict[str, list] = {}
    if keep_estimates:
        report.estimates = [m.pop("estimate") for m in results]
    for r, m in zip(records, results):
        report.rows.append({"volume_id": r.volume_id, "slice": r.slice_index,
                            "mask_family": config.mask_family, "R": config.acceleration,
                            "T": config.total_steps, "sampler": config.sampler,
                            "n_samples": config.n_samples, **m})
        by_volume.setdefault(r.volume_id, []).append(m)
    for vid, ms in by_volume.items():
        report.per_volume[vid] = {k: float(np.mean([m[k] for m in ms])) for k in ms[0]}
    vols = list(report.per_volume.values())
    report.psnr = float(np.mean([v["psnr_db"] for v in vols]))
    report.ssim = float(np.mean([v["ssim"] for v in vols]))
    report.zero_filled_psnr = float(np.mean([v["zf_psnr_db"] for v in vols]))
    report.zero_filled_ssim = float(np.mean([v["zf_ssim"] for v in vols]))
    if out is not None:
        report.to_csv(out / f"{name}.csv")
        report.to_json(out / f"{name}.json")
    return report


def _cell(report: MetricReport) -> dict:
    return {"psnr_db": _json_num(report.psnr), "ssim": _json_num(report.ssim)}


def zero_shot_table(records, columns, eval_families, base: ExperimentConfig, out_dir=None,
                    jobs: int = 1) -> dict:
    """Cross-mask evaluation without retraining, one block per mask family.

    ``columns`` is a list of ``(label, model, eval_acceleration)``, e.g.
    ``[("4x", m4, 4), ("8x", m8, 8), ("4x with 8-fold model", m8, 4)]``.
    Returns ``{family: {label: {"psnr_db", "ssim"}}}`` and, with ``out_dir``,
    writes ``zero_shot.json`` plus one CSV per cell.
    """
    table: dict = {}
    out = Path(out_dir) if out_dir is not None else None
    for family in eval_families:
        table[family] = {}
        for label, model, accel in columns:
            cfg = replace(base, mask_family=family, acceleration=float(accel), center_fraction=None)
            name = f"{family}_{label.replace(' ', '_')}"
            cell_dir = out / name if out is not None else None
            report = run_experiment(records, model, cfg, cell_dir, jobs=jobs, panels=False)
            table[family][label] = _cell(report)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "zero_shot.json").write_text(json.dumps(
            {"train_mask": base.train_mask, "table": table}, indent=2) + "\n")
    return table


def ablate_timesteps(train_records, eval_records, T_values, train_config, accelerations=(4.0,),
                     eval_config: ExperimentConfig | None = None, checkpoints: dict | None = None,
                     out_dir=None, jobs: int = 1) -> dict:
    """Train (or load) one model per ``T`` and evaluate each with the cold sampler at that ``T``.

    Returns ``{"rows": [{"T": T, "<R>x": {"psnr_db", "ssim"}}, ...], "reference": ...}``.
    """
    from .restoration import load_checkpoint
    from .training import train_loop

    T_values = [int(T) for T in T_values]
    if len(T_values) < 2:
        raise ValidationError("timestep ablation needs at least two values of T")
    eval_config = eval_config or ExperimentConfig(mask_family=train_config.mask_family)
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for T in T_values:
        if checkpoints and T in checkpoints:
            model = load_checkpoint(checkpoints[T])
        else:
            from .restoration import UNetRestorer

            cfg = replace(train_config, total_steps=T)
            state = train_loop(cfg, train_records,
                               out_dir=(out / f"T{T}") if out is not None else None, log_every=0)
            model = UNetRestorer(state.model)
        row = {"T": T}
        for R in accelerations:
            ecfg = replace(eval_config, total_steps=T, acceleration=float(R), center_fraction=None,
                           sampler="cold")
            report = run_experiment(eval_records, model, ecfg, panels=False)
            row[f"{R:g}x"] = _cell(report)
        rows.append(row)
    result = {
        "rows": rows,
        "reference": {str(T): {k: {"psnr_db": v[0], "ssim": v[1]} for k, v in cols.items()}
                      for T, cols in REFERENCE_ABLATION.items()},
        "note": "reference values are full-scale fastMRI results, shown for context only",
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablate_T.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        with open(out / "ablate_T.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["T", "R", "psnr_db", "ssim"])
            for row in rows:
                for R in accelerations:
                    c = row[f"{R:g}x"]
                    w.writerow([row["T"], f"{R:g}", c["psnr_db"], c["ssim"]])
    return result


def format_ablation_table(result: dict) -> str:
    accels = [k for k in result["rows"][0] if k != "T"]
    lines = ["T      " + "  ".join(f"{a:>16}" for a in accels)]
    for row in result["rows"]:
        cells = "  ".join(f"{float(row[a]['psnr_db']):>7.2f} / {float(row[a]['ssim']):.4f}" for a in accels)
        lines.append(f"{row['T']:<6} {cells}")
    lines.append("reference (full-scale fastMRI, not reproduced here):")
    for T, cols in REFERENCE_ABLATION.items():
        cells = "  ".join(f"{k}: {v[0]:.2f} / {v[1]:.4f}" for k, v in cols.items())
        lines.append(f"  T={T:<5} {cells}")
    return "\n".join(lines)
