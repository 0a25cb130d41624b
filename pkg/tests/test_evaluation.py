import csv
import json
import math

import numpy as np
import pytest

from kcd.data import SliceRecord, generate_phantoms
from kcd.evaluation import (CSV_FIELDS, REFERENCE_ABLATION, ExperimentConfig, ablate_timesteps,
                            format_ablation_table, run_experiment, slice_mask, zero_shot_table)
from kcd.fourier import ValidationError, forward_transform
from kcd.masks import FAMILIES
from kcd.metrics import psnr, ssim
from kcd.restoration import ConstantRestorer, RestorationModel
from kcd.training import TrainConfig


class PerSliceOracle(RestorationModel):
    """Returns the true image of whichever slice it is shown (nearest in image space)."""

    def __init__(self, records):
        self.images = [r.image for r in records]

    def _apply(self, x_t, t, T, scale=None):
        scores = [np.linalg.norm(x_t - im) for im in self.images]
        return self.images[int(np.argmin(scores))].copy()


@pytest.fixture(scope="module")
def phantoms():
    return generate_phantoms(4, 32, seed=21)


def test_oracle_end_to_end_gives_perfect_metrics(phantoms, tmp_path):
    cfg = ExperimentConfig(total_steps=4, acceleration=4.0)
    report = run_experiment(phantoms, PerSliceOracle(phantoms), cfg, tmp_path)
    for row in report.rows:
        assert math.isinf(row["psnr_db"]) and row["psnr_db"] > 0
        assert row["ssim"] == 1.0
    assert math.isinf(report.psnr) and report.ssim == 1.0
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert rows[0] == CSV_FIELDS
    assert {r[7] for r in rows[1:]} == {"inf"}
    summary = json.loads((tmp_path / "metrics.json").read_text())
    assert summary["psnr_db"] == "inf" and summary["ssim"] == 1.0


def test_panels_written(phantoms, tmp_path):
    cfg = ExperimentConfig(total_steps=2, n_samples=2)
    run_experiment(phantoms[:1], ConstantRestorer(np.zeros((32, 32))), cfg, tmp_path)
    names = sorted(p.name for p in (tmp_path / "panels").iterdir())
    stem = f"{phantoms[0].volume_id}_0"
    assert names == sorted(f"{stem}_{role}.png" for role in
                           ["target", "zero_filled", "mask", "recon", "error", "uncertainty"])


def test_csv_is_deterministic_and_jobs_independent(phantoms, tmp_path):
    model = ConstantRestorer(np.full((32, 32), 0.3 + 0.1j))
    cfg = ExperimentConfig(mask_family="gaussian-1d", total_steps=3, seed=5)
    run_experiment(phantoms, model, cfg, tmp_path / "a", panels=False)
    run_experiment(phantoms, model, cfg, tmp_path / "b", panels=False, jobs=3)
    for name in ["metrics.csv", "metrics.json"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_slice_masks_depend_on_seed_and_slice(phantoms):
    cfg = ExperimentConfig(seed=1)
    a, b = slice_mask(cfg, phantoms[0]), slice_mask(cfg, phantoms[1])
    assert not np.array_equal(a.bits, b.bits)
    assert np.array_equal(a.bits, slice_mask(cfg, phantoms[0]).bits)
    assert not np.array_equal(a.bits, slice_mask(ExperimentConfig(seed=2), phantoms[0]).bits)


def test_default_center_fraction_follows_acceleration():
    assert ExperimentConfig(acceleration=4).resolved_center_fraction == pytest.approx(0.08)
    assert ExperimentConfig(acceleration=8).resolved_center_fraction == pytest.approx(0.04)


def test_per_volume_data_range_rule():
    # two volumes with different maxima; each slice is scored against its own volume's max
    rng = np.random.default_rng(3)
    imgs = [rng.random((24, 24)) * s for s in (1.0, 0.5, 4.0)]
    recs = [SliceRecord(forward_transform(im), im, vid, i)
            for im, vid, i in zip(imgs, ["A", "A", "B"], [0, 1, 0])]
    pred = np.full((24, 24), 0.2, dtype=complex)
    report = run_experiment(recs, ConstantRestorer(pred), ExperimentConfig(total_steps=1, sampler="one-shot"))
    ranges = {"A": max(imgs[0].max(), imgs[1].max()), "B": imgs[2].max()}
    for row, im, vid in zip(report.rows, imgs, ["A", "A", "B"]):
        assert row["psnr_db"] == pytest.approx(psnr(np.abs(pred), im, ranges[vid]), abs=1e-9)
        assert row["ssim"] == pytest.approx(ssim(np.abs(pred), im, ranges[vid]), abs=1e-12)
    # volume means first, then across volumes
    per_vol = [np.mean([report.rows[0]["psnr_db"], report.rows[1]["psnr_db"]]), report.rows[2]["psnr_db"]]
    assert report.psnr == pytest.approx(np.mean(per_vol), abs=1e-12)


def test_rejects_empty_and_zero_volume():
    with pytest.raises(ValidationError):
        run_experiment([], ConstantRestorer(np.zeros((4, 4))), ExperimentConfig())
    zero = SliceRecord(np.zeros((16, 16), complex), np.zeros((16, 16)), "z", 0)
    with pytest.raises(ValidationError, match="z"):
        run_experiment([zero], ConstantRestorer(np.zeros((16, 16))), ExperimentConfig(total_steps=1))


def test_zero_shot_table_shape(phantoms, tmp_path):
    m4 = ConstantRestorer(np.zeros((32, 32)))
    m8 = ConstantRestorer(np.full((32, 32), 0.1))
    cols = [("4x", m4, 4), ("8x", m8, 8), ("4x with 8-fold model", m8, 4)]
    base = ExperimentConfig(total_steps=2, train_mask="cartesian-random")
    table = zero_shot_table(phantoms[:2], cols, list(FAMILIES), base, tmp_path)
    assert list(table) == list(FAMILIES)
    assert all(list(cells) == ["4x", "8x", "4x with 8-fold model"] for cells in table.values())
    saved = json.loads((tmp_path / "zero_shot.json").read_text())
    assert saved["train_mask"] == "cartesian-random" and set(saved["table"]) == set(FAMILIES)
    assert (tmp_path / "gaussian-2d_4x_with_8-fold_model" / "metrics.csv").exists()


def test_ablation_structure(tmp_path):
    train = generate_phantoms(4, 16, seed=1)
    test = generate_phantoms(2, 16, seed=2)
    cfg = TrainConfig(iterations=2, batch_size=2, depth=1, base_channels=4, time_embedding_dim=4)
    result = ablate_timesteps(train, test, [2, 4, 8], cfg, out_dir=tmp_path)
    assert [r["T"] for r in result["rows"]] == [2, 4, 8]
    assert all(set(r["4x"]) == {"psnr_db", "ssim"} for r in result["rows"])
    assert set(result["reference"]) == {str(T) for T in REFERENCE_ABLATION}
    assert (tmp_path / "ablate_T.json").exists()
    lines = (tmp_path / "ablate_T.csv").read_text().splitlines()
    assert lines[0] == "T,R,psnr_db,ssim" and len(lines) == 4
    text = format_ablation_table(result)
    assert "30.58 / 0.7150" in text and "30.59 / 0.7149" in text


def test_ablation_needs_two_values():
    with pytest.raises(ValidationError):
        ablate_timesteps([], [], [8], TrainConfig())
