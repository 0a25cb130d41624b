"""Training the restorer: ``min E |R(D(x0, t), t) - x0|`` with Adam.

Every example in a batch gets its own step ``t ~ U{1..T}`` and its own freshly
seeded mask and schedule.  All randomness comes from one numpy generator
held in the :class:`TrainState`, so a saved state resumes bit-identically.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .container import ContainerError, read_container, write_container
from .degradation import degrade
from .fourier import ValidationError
from .masks import make_mask, make_schedule
from .restoration import (ReferenceUNet, UNetConfig, complex_to_channels, load_state_arrays,
                          save_checkpoint)

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainingError",
    "l1_loss",
    "draw_steps",
    "init_state",
    "train_step",
    "train_loop",
    "save_state",
    "load_state",
    "write_loss_csv",
]

logger = logging.getLogger(__name__)

STATE_MAGIC = b"KCDSTAT\x00"
STATE_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Every knob of a training run.  Defaults are the desk-scale recipe."""

    total_steps: int = 16
    batch_size: int = 8
    learning_rate: float = 1e-4
    iterations: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "l1"
    seed: int = 0
    checkpoint_interval: int = 0
    precision: str = "float32"
    mask_family: str = "cartesian-random"
    acceleration: float = 4.0
    center_fraction: float = 0.08
    independent_subsets: bool = False
    depth: int = 3
    base_channels: int = 16
    time_embedding_dim: int = 32

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.iterations < 1:
            raise ValidationError(f"iterations must be >= 1, got {self.iterations}")
        if self.total_steps < 1:
            raise ValidationError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.loss != "l1":
            raise ValidationError(f"only the l1 loss is supported, got {self.loss!r}")
        if self.precision not in ("float32", "float64"):
            raise ValidationError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32

    def unet_config(self) -> UNetConfig:
        return UNetConfig(self.depth, self.base_channels, self.time_embedding_dim)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    config: TrainConfig
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    iteration: int = 0
    history: list = field(default_factory=list)  # (iteration, loss, wall_time_s)


def l1_loss(prediction, target):
    """Mean absolute error over all pixels of the real and imaginary channels.

    Works on complex numpy arrays (returns ``float``) and on real 2-channel
    torch tensors (returns a scalar tensor).
    """
    if isinstance(prediction, torch.Tensor):
        if prediction.shape != target.shape:
            raise ValidationError(f"shape mismatch: {tuple(prediction.shape)} vs {tuple(target.shape)}")
        return (prediction - target).abs().mean()
    p, q = np.asarray(prediction), np.asarray(target)
    if p.shape != q.shape:
        raise ValidationError(f"shape mismatch: {p.shape} vs {q.shape}")
    d = p - q
    return float((np.abs(d.real).sum() + np.abs(d.imag).sum()) / (2 * d.size))


def draw_steps(rng: np.random.Generator, n: int, T: int) -> np.ndarray:
    return rng.integers(1, T + 1, size=n)


def default_schedule_factory(config: TrainConfig):
    def factory(rng, shape):
        mask_seed, sched_seed = (int(s) for s in rng.integers(0, 2 ** 63, size=2))
        mask = make_mask(config.mask_family, shape[0], shape[1], config.acceleration,
                         config.center_fraction, mask_seed)
        return make_schedule(mask, config.total_steps, sched_seed,
                             independent=config.independent_subsets)
    return factory


def init_state(config: TrainConfig, model: torch.nn.Module | None = None) -> TrainState:
    torch.manual_seed(config.seed)
    if model is None:
        model = ReferenceUNet(config.unet_config())
    model = model.to(config.dtype)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                           betas=(config.beta1, config.beta2), eps=config.eps)
    return TrainState(config, model, opt, np.random.default_rng(config.seed))


def train_step(state: TrainState, batch, schedule_factory=None, example_ids=None) -> float:
    """One optimizer update on a batch of clean complex images ``(B, H, W)``; returns the loss."""
    cfg = state.config
    batch = np.asarray(batch, dtype=np.complex128)
    if batch.ndim != 3 or batch.shape[0] == 0:
        raise ValidationError(f"batch must be a non-empty (B, H, W) array, got shape {batch.shape}")
    factory = schedule_factory or default_schedule_factory(cfg)
    T = cfg.total_steps
    steps, degraded, scales = [], [], []
    for x0 in batch:
        t = int(draw_steps(state.rng, 1, T)[0])
        schedule = factory(state.rng, x0.shape)
        degraded.append(degrade(x0, t, schedule))
        scales.append(np.max(np.abs(degrade(x0, T, schedule))))
        steps.append(t)
    xt = complex_to_channels(np.stack(degraded), cfg.dtype)
    target = complex_to_channels(batch, cfg.dtype)
    t_tensor = torch.tensor(steps, dtype=torch.long)

    state.model.train()
    pred = state.model(xt, t_tensor, T, torch.tensor(scales, dtype=cfg.dtype))
    loss = l1_loss(pred, target)
    if not torch.isfinite(loss):
        ids = list(example_ids) if example_ids is not None else list(range(len(batch)))
        raise TrainingError(
            f"non-finite loss at iteration {state.iteration + 1}: t={steps}, examples={ids}")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.iteration += 1
    return float(loss.detach())


def _images(dataset) -> np.ndarray:
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    if isinstance(dataset, np.ndarray):
        return dataset.astype(np.complex128)
    return np.stack([r.image for r in dataset])


def train_loop(config: TrainConfig, dataset, model=None, out_dir=None, resume=None,
               schedule_factory=None, log_every: int = 100) -> TrainState:
    """Run ``config.iterations`` updates (counting from a resumed state, if given).

    ``dataset`` is a list of :class:`~kcd.data.SliceRecord` or an array of clean
    complex images.  With ``out_dir`` set, periodic training states, the final
    model checkpoint ``model.ckpt`` and ``loss.csv`` are written there.
    """
    images = _images(dataset)
    if resume is not None:
        state = load_state(resume, model=model)
        state.config.iterations = config.iterations
    else:
        state = init_state(config, model)
    cfg = state.config
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    offset = state.history[-1][2] if state.history else 0.0
    while state.iteration < cfg.iterations:
        idx = state.rng.integers(0, len(images), size=cfg.batch_size)
        loss = train_step(state, images[idx], schedule_factory, example_ids=idx.tolist())
        state.history.append((state.iteration, loss, offset + time.perf_counter() - start))
        if log_every and state.iteration % log_every == 0:
            recent = [h[1] for h in state.history[-log_every:]]
            logger.info("iteration %d  loss %.5f", state.iteration, float(np.mean(recent)))
        if out is not None and cfg.checkpoint_interval and state.iteration % cfg.checkpoint_interval == 0:
            _guarded(state, save_state, state, out / f"state_{state.iteration:07d}.kcs")
    if out is not None:
        _guarded(state, save_state, state, out / "state_final.kcs")
        _guarded(state, save_model, state, out / "model.ckpt")
        _guarded(state, write_loss_csv, state.history, out / "loss.csv")
    return state


def _guarded(state, fn, *args):
    try:
        fn(*args)
    except OSError as exc:
        raise TrainingError(f"iteration {state.iteration}: {exc}") from exc


def save_model(state: TrainState, path) -> None:
    cfg = state.config
    extra = {"mask_family": cfg.mask_family, "acceleration": cfg.acceleration,
             "center_fraction": cfg.center_fraction, "total_steps": cfg.total_steps,
             "iterations": state.iteration, "seed": cfg.seed}
    save_checkpoint(state.model, path, extra)


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss", "wall_time_s"])
        for it, loss, wall in history:
            w.writerow([it, repr(float(loss)), f"{wall:.3f}"])


def save_state(state: TrainState, path) -> None:
    tensors = {f"model/{k}": v.detach().cpu().numpy() for k, v in state.model.state_dict().items()}
    opt = state.optimizer.state_dict()
    for idx, slot in opt["state"].items():
        for key, value in slot.items():
            tensors[f"adam/{idx}/{key}"] = torch.as_tensor(value).detach().cpu().numpy()
    history = np.array(state.history, dtype=np.float64).reshape(-1, 3)
    tensors["history"] = history
    meta = {
        "kind": "train_state",
        "config": state.config.to_dict(),
        "iteration": state.iteration,
        "rng": state.rng.bit_generator.state,
        "param_groups": opt["param_groups"],
    }
    write_container(path, STATE_MAGIC, STATE_VERSION, meta, tensors)


def load_state(path, model=None) -> TrainState:
    try:
        meta, tensors = read_container(path, STATE_MAGIC, STATE_VERSION)
    except ContainerError as exc:
        raise TrainingError(str(exc)) from exc
    config = TrainConfig.from_dict(meta["config"])
    state = init_state(config, model)
    load_state_arrays(state.model, {k[6:]: v for k, v in tensors.items() if k.startswith("model/")},
                      str(path))
    slots: dict[int, dict] = {}
    for key, value in tensors.items():
        if key.startswith("adam/"):
            _, idx, name = key.split("/", 2)
            slots.setdefault(int(idx), {})[name] = torch.from_numpy(np.array(value))
    state.optimizer.load_state_dict({"state": slots, "param_groups": meta["param_groups"]})
    state.rng.bit_generator.state = meta["rng"]
    state.iteration = int(meta["iteration"])
    state.history = [(int(i), float(l), float(w)) for i, l, w in tensors["history"]]
    return state


def load_config(path) -> dict:
    return json.loads(Path(path).read_text())
