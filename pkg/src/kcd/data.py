"""Slice records: fastMRI ingestion, synthetic phantoms, and the portable slice file.

Portable slice file (little-endian)::

    magic        b"KCDSLCE\\0"
    version      u32 (currently 1)
    count        u32
    height       u32
    width        u32
    precision    u8   0 = complex64 k-space / float32 target, 1 = complex128 / float64
    count x (k-space block H*W complex, target block H*W real)
    meta_len     u32, followed by UTF-8 JSON list of per-record metadata
    sha256       32 bytes over everything above

Phantoms are generated with numpy's PCG64 generator, seeded through
``numpy.random.SeedSequence(seed).spawn(n)``, so output is platform independent.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .fourier import ValidationError, forward_transform, inverse_transform, magnitude

__all__ = [
    "SliceRecord",
    "PortableFormatError",
    "shepp_logan",
    "generate_phantoms",
    "center_crop",
    "ingest_fastmri",
    "export_portable",
    "import_portable",
    "write_manifest",
    "load_records",
]

logger = logging.getLogger(__name__)

PORTABLE_MAGIC = b"KCDSLCE\x00"
PORTABLE_VERSION = 1
CONTRASTS = {"CORPD_FBK": "PD", "CORPDFS_FBK": "PDFS"}


class PortableFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SliceRecord:
    kspace: np.ndarray
    target: np.ndarray
    volume_id: str
    slice_index: int
    contrast_tag: str = "synthetic"

    @property
    def image(self) -> np.ndarray:
        return inverse_transform(self.kspace)

    @property
    def shape(self) -> tuple[int, int]:
        return self.kspace.shape

    def metadata(self) -> dict:
        return {"volume_id": self.volume_id, "slice_index": int(self.slice_index),
                "contrast_tag": self.contrast_tag}


# (intensity, semi-axis a, semi-axis b, x0, y0, angle in degrees)
_SHEPP_LOGAN = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
]


def _grid(size):
    c = (np.arange(size) - (size - 1) / 2.0) / (size / 2.0)
    x, y = np.meshgrid(c, -c)
    return x, y


def _ellipses(size, table):
    x, y = _grid(size)
    img = np.zeros((size, size))
    for rho, a, b, x0, y0, deg in table:
        th = math.radians(deg)
        xr = (x - x0) * math.cos(th) + (y - y0) * math.sin(th)
        yr = -(x - x0) * math.sin(th) + (y - y0) * math.cos(th)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += rho
    return img


def shepp_logan(size: int = 64) -> np.ndarray:
    """Modified Shepp-Logan phantom, real valued in ``[0, 1]``."""
    return np.clip(_ellipses(size, _SHEPP_LOGAN), 0.0, 1.0)


def _random_phantom(rng, size):
    table = [(1.0, rng.uniform(0.72, 0.9), rng.uniform(0.8, 0.95), rng.normal(0, 0.02),
              rng.normal(0, 0.02), rng.uniform(-15, 15))]
    _, a, b, x0, y0, deg = table[0]
    shrink = rng.uniform(0.88, 0.94)
    table.append((-rng.uniform(0.3, 0.6), a * shrink, b * shrink, x0, y0, deg))
    for _ in range(int(rng.integers(4, 10))):
        r = rng.uniform(0.0, 0.55)
        phi = rng.uniform(0, 2 * math.pi)
        table.append((rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 0.4),
                      rng.uniform(0.03, 0.25), rng.uniform(0.03, 0.25),
                      r * math.cos(phi) * a, r * math.sin(phi) * b, rng.uniform(0, 180)))
    mag = np.clip(_ellipses(size, table), 0.0, None)
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    x, y = _grid(size)
    coef = rng.normal(0.0, 0.4, size=5)
    phase = coef[0] + coef[1] * x + coef[2] * y + coef[3] * x * y + coef[4] * (x ** 2 - y ** 2)
    return mag * np.exp(1j * phase)


def generate_phantoms(n: int, size: int = 64, seed: int = 0) -> list[SliceRecord]:
    """Random multi-ellipse phantoms with smooth phase; one slice per volume."""
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    if size < 16:
        raise ValidationError(f"size must be >= 16, got {size}")
    records = []
    for i, child in enumerate(np.random.SeedSequence(int(seed)).spawn(n)):
        x = _random_phantom(np.random.default_rng(child), size)
        k = forward_transform(x)
        records.append(SliceRecord(k, magnitude(inverse_transform(k)), f"phantom-{seed}-{i:04d}", 0))
    return records


def center_crop(x: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    H, W = x.shape[-2:]
    if h > H or w > W:
        raise ValidationError(f"cannot crop {(H, W)} to {(h, w)}")
    r0, c0 = (H - h) // 2, (W - w) // 2
    return x[..., r0:r0 + h, c0:c0 + w]


def _read_fastmri_file(path: Path, crop: int) -> list[SliceRecord]:
    import h5py

    with h5py.File(path, "r") as f:
        if "kspace" not in f:
            raise ValidationError("missing 'kspace' dataset")
        ds = f["kspace"]
        if not np.issubdtype(ds.dtype, np.complexfloating):
            raise ValidationError(f"'kspace' has non-complex dtype {ds.dtype}")
        if ds.ndim != 3:
            raise ValidationError(f"'kspace' must be slices x rows x cols, got shape {ds.shape}")
        kspace = ds[()]
        stored = f["reconstruction_esc"][()] if "reconstruction_esc" in f else None
        acq = f.attrs.get("acquisition", "")
        if isinstance(acq, bytes):
            acq = acq.decode()
    contrast = CONTRASTS.get(acq, "unknown")
    records = []
    for i, k in enumerate(kspace):
        img = center_crop(inverse_transform(k), (crop, crop))
        kc = forward_transform(img)
        if stored is not None and stored.shape[-2:] == (crop, crop) and len(stored) == len(kspace):
            target = np.asarray(stored[i], dtype=np.float64)
        else:
            target = magnitude(img)
        records.append(SliceRecord(kc, target, path.stem, i, contrast))
    return records


def _try_read(file: Path, crop: int):
    try:
        return _read_fastmri_file(file, crop), None
    except Exception as exc:  # h5py raises a zoo of types for damaged files
        return None, f"{type(exc).__name__}: {exc}"


def ingest_fastmri(path, crop: int = 320, errors: list | None = None,
                   jobs: int = 1) -> Iterator[SliceRecord]:
    """Yield cropped slices from every ``*.h5`` file under ``path`` in sorted order.

    A file that cannot be read is logged (and appended to ``errors`` as
    ``(filename, message)``) and skipped; slices of a file are yielded only
    once the whole file has been read.  ``jobs > 1`` reads files on a thread
    pool; output order is unchanged.
    """
    files = sorted(Path(path).glob("*.h5"))
    if jobs > 1 and len(files) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(lambda f: _try_read(f, crop), files))
    else:
        results = (_try_read(f, crop) for f in files)
    for file, (records, msg) in zip(files, results):
        if msg is not None:
            logger.error("skipping %s: %s", file.name, msg)
            if errors is not None:
                errors.append((file.name, msg))
            continue
        yield from records


def export_portable(records, path, precision: str = "complex128") -> None:
    records = list(records)
    if not records:
        raise ValidationError("no records to export")
    if precision not in ("complex64", "complex128"):
        raise ValidationError(f"precision must be complex64 or complex128, got {precision}")
    h, w = records[0].shape
    for r in records:
        if r.shape != (h, w) or r.target.shape != (h, w):
            raise ValidationError(f"record {r.volume_id}/{r.slice_index} has shape {r.shape}, expected {(h, w)}")
    flag = 1 if precision == "complex128" else 0
    cdt, rdt = (np.dtype("<c16"), np.dtype("<f8")) if flag else (np.dtype("<c8"), np.dtype("<f4"))
    buf = io.BytesIO()
    buf.write(PORTABLE_MAGIC)
    buf.write(struct.pack("<IIIIB", PORTABLE_VERSION, len(records), h, w, flag))
    for r in records:
        buf.write(np.ascontiguousarray(r.kspace, dtype=cdt).tobytes())
        buf.write(np.ascontiguousarray(r.target, dtype=rdt).tobytes())
    meta = json.dumps([r.metadata() for r in records], sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    payload = buf.getvalue()
    Path(path).write_bytes(payload + hashlib.sha256(payload).digest())


def import_portable(path) -> list[SliceRecord]:
    path = Path(path)
    raw = path.read_bytes()
    header = struct.calcsize("<IIIIB")
    if len(raw) < 8 + header + 4 + 32 or raw[:8] != PORTABLE_MAGIC:
        raise PortableFormatError(f"{path}: not a portable slice file")
    payload, digest = raw[:-32], raw[-32:]
    version, count, h, w, flag = struct.unpack_from("<IIIIB", payload, 8)
    if version != PORTABLE_VERSION:
        raise PortableFormatError(
            f"{path}: portable format version {version} is not supported by this reader "
            f"(supports version {PORTABLE_VERSION}); upgrade the package")
    if hashlib.sha256(payload).digest() != digest:
        raise PortableFormatError(f"{path}: checksum mismatch (file corrupted)")
    cdt, rdt = (np.dtype("<c16"), np.dtype("<f8")) if flag else (np.dtype("<c8"), np.dtype("<f4"))
    pos = 8 + header
    blocks = []
    for _ in range(count):
        k = np.frombuffer(payload, cdt, h * w, pos).reshape(h, w)
        pos += h * w * cdt.itemsize
        t = np.frombuffer(payload, rdt, h * w, pos).reshape(h, w)
        pos += h * w * rdt.itemsize
        blocks.append((k.astype(np.complex128), t.astype(np.float64)))
    (meta_len,) = struct.unpack_from("<I", payload, pos)
    meta = json.loads(payload[pos + 4:pos + 4 + meta_len].decode())
    if len(meta) != count:
        raise PortableFormatError(f"{path}: metadata lists {len(meta)} records, header says {count}")
    return [SliceRecord(k, t, m["volume_id"], m["slice_index"], m["contrast_tag"])
            for (k, t), m in zip(blocks, meta)]


def write_manifest(records, path) -> dict:
    """Dataset manifest: volumes in first-seen order with slice counts, contrast and k-space checksum."""
    volumes: dict[str, dict] = {}
    hashes: dict[str, "hashlib._Hash"] = {}
    for r in records:
        v = volumes.setdefault(r.volume_id, {"volume_id": r.volume_id, "n_slices": 0,
                                             "contrast": r.contrast_tag})
        v["n_slices"] += 1
        hashes.setdefault(r.volume_id, hashlib.sha256()).update(
            np.ascontiguousarray(r.kspace, dtype="<c16").tobytes())
    for vid, h in hashes.items():
        volumes[vid]["sha256"] = h.hexdigest()
    manifest = {"volumes": list(volumes.values())}
    Path(path).write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_records(path, crop: int = 320, jobs: int = 1, errors: list | None = None) -> list[SliceRecord]:
    """Portable file or a directory of fastMRI HDF5 files."""
    path = Path(path)
    if path.is_dir():
        return list(ingest_fastmri(path, crop, errors, jobs))
    return import_portable(path)
