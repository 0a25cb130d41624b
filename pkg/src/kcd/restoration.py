"""Restoration operators ``R(x_t, t)``: the model contract, a time-conditioned
U-Net, and exact test doubles."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .container import ContainerError, read_container, write_container
from .fourier import ValidationError, as_complex_image

__all__ = [
    "RestorationModel",
    "OracleRestorer",
    "ConstantRestorer",
    "UNetConfig",
    "ReferenceUNet",
    "UNetRestorer",
    "time_embed",
    "complex_to_channels",
    "channels_to_complex",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

CHECKPOINT_MAGIC = b"KCDMODL\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ContainerError):
    pass


def _check_step(t, T):
    if not (isinstance(T, (int, np.integer)) and T >= 1):
        raise ValidationError(f"total steps T must be a positive integer, got {T!r}")
    if not 0 <= t <= T:
        raise ValidationError(f"step t={t} outside 0..{T}")


class RestorationModel:
    """Anything that maps a degraded image ``x_t`` at step ``t`` of ``T`` to an estimate of ``x0``.

    Implementations must preserve shape, return finite values for finite
    input, and be deterministic.
    """

    def apply(self, x_t, t: int, T: int, scale: float | None = None) -> np.ndarray:
        """Estimate ``x0`` from ``x_t``.

        ``scale`` is the intensity reference of the trajectory (the peak
        magnitude of its zero-filled image); models that normalize their input
        use it, and fall back to the peak of ``x_t`` when it is omitted.
        """
        x_t = as_complex_image(x_t, "x_t")
        _check_step(t, T)
        out = self._apply(x_t, int(t), int(T), scale)
        if out.shape != x_t.shape:
            raise ValidationError(f"restorer changed shape {x_t.shape} -> {out.shape}")
        return out

    def _apply(self, x_t: np.ndarray, t: int, T: int, scale=None) -> np.ndarray:
        raise NotImplementedError

    __call__ = apply


class OracleRestorer(RestorationModel):
    """Returns the true image, whatever it is given."""

    def __init__(self, x0):
        self.x0 = as_complex_image(x0, "x0")

    def _apply(self, x_t, t, T, scale=None):
        if x_t.shape != self.x0.shape:
            raise ValidationError(f"oracle holds shape {self.x0.shape}, got {x_t.shape}")
        return self.x0.copy()


class ConstantRestorer(RestorationModel):
    def __init__(self, c):
        self.c = as_complex_image(c, "c")

    def _apply(self, x_t, t, T, scale=None):
        return np.broadcast_to(self.c, x_t.shape).copy()


def time_embed(t, T: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of the normalized step ``t / T``.

    Layout is ``[sin(w_0 s), ..., sin(w_{h-1} s), cos(w_0 s), ..., cos(w_{h-1} s)]``
    with ``s = t / T`` and ``w_0 = pi``; the lowest pair alone is injective on
    ``s in [0, 1]``.
    """
    if dim < 2 or dim % 2:
        raise ValidationError(f"embedding dim must be even and >= 2, got {dim}")
    s = np.asarray(t, dtype=np.float64) / float(T)
    angles = s[..., None] * _frequencies(dim // 2)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def _frequencies(half: int) -> np.ndarray:
    if half == 1:
        return np.array([math.pi])
    return math.pi * 1000.0 ** (np.arange(half) / (half - 1))


def complex_to_channels(x: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(..., H, W)`` complex -> ``(..., 2, H, W)`` real tensor (real, imaginary)."""
    x = np.asarray(x)
    return torch.from_numpy(np.stack([x.real, x.imag], axis=-3)).to(dtype)


def channels_to_complex(x: torch.Tensor) -> np.ndarray:
    x = x.detach().to(torch.float64).numpy()
    return x[..., 0, :, :] + 1j * x[..., 1, :, :]


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 16
    time_embedding_dim: int = 32
    in_channels: int = 2
    out_channels: int = 2

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ValidationError(f"depth and base_channels must be >= 1, got {self}")
        if self.time_embedding_dim < 2 or self.time_embedding_dim % 2:
            raise ValidationError("time_embedding_dim must be even and >= 2")

    @classmethod
    def paper(cls) -> "UNetConfig":
        return cls(depth=4, base_channels=64, time_embedding_dim=128)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


class _Block(nn.Module):
    # conv-norm-act twice; the time embedding enters as a per-channel shift
    def __init__(self, cin, cout, emb_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = _norm(cout)
        self.shift = nn.Linear(emb_dim, cout)

    def forward(self, x, emb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.shift(emb)[:, :, None, None]
        return F.silu(self.norm2(self.conv2(h)))


class ReferenceUNet(nn.Module):
    """Time-conditioned U-Net on 2-channel (real, imaginary) images.

    ``forward`` takes ``x`` of shape ``(B, 2, H, W)``, integer steps ``t`` of
    shape ``(B,)`` and the total step count ``T``.  Each example is divided by
    ``scale`` (shape ``(B,)``; defaults to the peak magnitude of ``x``) before
    the network and multiplied back afterwards.  Sizes not divisible by
    ``2**depth`` are reflect-padded and cropped.
    """

    def __init__(self, config: UNetConfig = UNetConfig()):
        super().__init__()
        self.config = config
        c = [config.base_channels * 2 ** i for i in range(config.depth + 1)]
        e = config.time_embedding_dim
        self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.inc = _Block(config.in_channels, c[0], e)
        self.down = nn.ModuleList(_Block(c[i], c[i + 1], e) for i in range(config.depth))
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(c[i + 1], c[i], 2, stride=2) for i in reversed(range(config.depth)))
        self.dec = nn.ModuleList(_Block(2 * c[i], c[i], e) for i in reversed(range(config.depth)))
        self.out = nn.Conv2d(c[0], config.out_channels, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def embed(self, t, T):
        t = torch.as_tensor(t).reshape(-1)
        freqs = torch.from_numpy(_frequencies(self.config.time_embedding_dim // 2))
        angles = (t.to(torch.float64) / float(T))[:, None] * freqs
        emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
        return emb.to(self.out.weight.dtype)

    def core(self, x, emb):
        emb = self.time_mlp(emb)
        h = self.inc(x, emb)
        skips = [h]
        for block in self.down:
            h = block(F.avg_pool2d(h, 2), emb)
            skips.append(h)
        skips.pop()
        for up, block in zip(self.up, self.dec):
            h = block(torch.cat([up(h), skips.pop()], dim=1), emb)
        return self.out(h)

    def forward(self, x, t, T, scale=None):
        b, _, h, w = x.shape
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        if scale is None:
            scale = torch.sqrt(x[:, 0] ** 2 + x[:, 1] ** 2).amax(dim=(-2, -1))
        scale = torch.as_tensor(scale, dtype=x.dtype).reshape(-1).expand(b)
        scale = torch.where(scale > 0, scale, torch.ones_like(scale))[:, None, None, None]
        xn = x / scale
        m = 2 ** self.config.depth
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            mode = "reflect" if ph < h and pw < w else "replicate"
            xn = F.pad(xn, (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2), mode=mode)
        y = self.core(xn, self.embed(t, T))
        if ph or pw:
            y = y[..., ph // 2:ph // 2 + h, pw // 2:pw // 2 + w]
        return y * scale


class UNetRestorer(RestorationModel):
    """Adapts a :class:`ReferenceUNet` to the numpy complex-image contract."""

    def __init__(self, net: ReferenceUNet, meta: dict | None = None):
        self.net = net
        self.meta = dict(meta or {})

    def _apply(self, x_t, t, T, scale=None):
        dtype = self.net.out.weight.dtype
        squeeze = x_t.ndim == 2
        batch = x_t[None] if squeeze else x_t.reshape(-1, *x_t.shape[-2:])
        # no dropout or batch statistics in the network, so train/eval mode is irrelevant
        with torch.no_grad():
            y = self.net(complex_to_channels(batch, dtype), torch.full((batch.shape[0],), t), T,
                         None if scale is None else torch.tensor(float(scale), dtype=dtype))
        out = channels_to_complex(y)
        return out[0] if squeeze else out.reshape(x_t.shape)


def _state_arrays(net: nn.Module) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}


def save_checkpoint(net: ReferenceUNet, path, extra: dict | None = None) -> None:
    """Persist architecture config, parameters, and free-form metadata (e.g. training mask)."""
    meta = {"kind": "model", "config": asdict(net.config), "extra": extra or {}}
    write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, meta, _state_arrays(net))


def load_checkpoint(path, expected_config: UNetConfig | None = None) -> UNetRestorer:
    """Load a checkpoint; rejects corrupt files and architecture mismatches."""
    try:
        meta, tensors = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    except ContainerError as exc:
        raise CheckpointError(str(exc)) from exc
    if meta.get("kind") != "model":
        raise CheckpointError(f"{path}: not a model checkpoint")
    config = UNetConfig(**meta["config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError(f"{path}: architecture {config} does not match expected {expected_config}")
    net = ReferenceUNet(config)
    load_state_arrays(net, tensors, str(path))
    return UNetRestorer(net, meta.get("extra"))


def load_state_arrays(net: nn.Module, tensors: dict, source: str = "<memory>") -> None:
    own = net.state_dict()
    if set(own) != set(tensors):
        missing = sorted(set(own) - set(tensors))
        unexpected = sorted(set(tensors) - set(own))
        raise CheckpointError(f"{source}: parameter names differ (missing {missing}, unexpected {unexpected})")
    for name, value in own.items():
        if tuple(value.shape) != tensors[name].shape:
            raise CheckpointError(
                f"{source}: {name} has shape {tensors[name].shape}, model expects {tuple(value.shape)}")
    net.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in tensors.items()})
