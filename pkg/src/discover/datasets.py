"""Synthetic benchmarks, IDX ingestion and the two-colour digit construction.

Generators are pure functions of their arguments: rows are produced in fixed
chunks whose random streams derive from ``(seed, chunk_index, quantity)``,
so output never depends on how generation is split up.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import integrate

CHUNK = 8192
SWISS_T_RANGE = (1.5 * math.pi, 4.5 * math.pi)
SWISS_LENGTH = 21.0

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    pass


class IDXLengthError(ValueError):
    pass


def _chunk_rngs(seed: int, n: int, n_streams: int
                ) -> Iterator[tuple[int, list[np.random.Generator]]]:
    """Per chunk, one generator per drawn quantity, seeded by (seed, chunk, quantity).

    Separate streams per quantity keep every row's values independent of how
    many rows the chunk holds, so a shorter draw is a prefix of a longer one.
    """
    for i, start in enumerate(range(0, n, CHUNK)):
        yield min(CHUNK, n - start), [np.random.default_rng([int(seed), i, q])
                                      for q in range(n_streams)]


@dataclass
class LabeledData:
    """Inputs ``x`` of shape (n, D) with integer conditions ``y``; extra
    columns hold generator latents used only by oracles."""

    x: np.ndarray
    y: np.ndarray
    extras: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "LabeledData":
        return LabeledData(self.x[idx], self.y[idx], {k: v[idx] for k, v in self.extras.items()},
                           dict(self.meta))


def gen_parametric(n: int, seed: int) -> LabeledData:
    """z, w ~ N(0, 1) independent, x = z + w, y = 1 iff w > 0."""
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    zs, ws = [], []
    for m, (rz, rw) in _chunk_rngs(seed, n, 2):
        zs.append(rz.standard_normal(m))
        ws.append(rw.standard_normal(m))
    z, w = np.concatenate(zs), np.concatenate(ws)
    x = (z + w).astype(np.float32)
    y = (w > 0).astype(np.int64)
    return LabeledData(x[:, None], y, {"z": z, "w": w},
                       {"kind": "parametric", "n": n, "seed": int(seed)})


def parametric_bayes_accuracy() -> float:
    """Accuracy of the Bayes rule for y from x: E[max(Phi(x/sqrt2), 1 - Phi(x/sqrt2))]."""
    from scipy.stats import norm

    val, _ = integrate.quad(lambda u: norm.pdf(u) * norm.cdf(abs(u)), -np.inf, np.inf)
    return float(val)


@lru_cache(maxsize=None)
def _swiss_moments(jitter: float) -> tuple[np.ndarray, np.ndarray]:
    """Population mean and std of the three Swiss-roll coordinates."""
    lo, hi = SWISS_T_RANGE
    span = hi - lo
    e = lambda f: integrate.quad(f, lo, hi, limit=200)[0] / span  # noqa: E731
    m1, m3 = e(lambda t: t * math.cos(t)), e(lambda t: t * math.sin(t))
    v1 = e(lambda t: (t * math.cos(t)) ** 2) - m1**2
    v3 = e(lambda t: (t * math.sin(t)) ** 2) - m3**2
    v2 = SWISS_LENGTH**2 / 12.0
    mean = np.array([m1, SWISS_LENGTH / 2, m3])
    std = np.sqrt(np.array([v1, v2, v3]) + jitter**2)
    return mean, std


def gen_swiss_roll(n: int, noise_rate: float, seed: int, jitter: float = 0.05,
                   standardize: bool = True) -> LabeledData:
    """Labelled Swiss roll: spiral (t cos t, t sin t) in coordinates 1 and 3,
    uniform length in coordinate 2, labels from a split at the population
    median of the length (so any prefix of a draw is itself a draw) and flipped independently with probability ``noise_rate``.

    With ``standardize`` each coordinate is centred and scaled by its
    population moments (not the sample's), so every draw shares one scale.
    """
    if not 0.0 <= noise_rate <= 0.5:
        raise ValueError(f"noise_rate must lie in [0, 0.5], got {noise_rate}")
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    ts, ls, jit, flips = [], [], [], []
    lo, hi = SWISS_T_RANGE
    for m, (rt, rl, rj, rf) in _chunk_rngs(seed, n, 4):
        ts.append(lo + (hi - lo) * rt.random(m))
        ls.append(SWISS_LENGTH * rl.random(m))
        jit.append(rj.standard_normal((m, 3)))
        flips.append(rf.random(m) < noise_rate)
    t, length = np.concatenate(ts), np.concatenate(ls)
    flip = np.concatenate(flips)
    x = np.stack([t * np.cos(t), length, t * np.sin(t)], axis=1) + jitter * np.concatenate(jit)
    if standardize:
        mean, std = _swiss_moments(float(jitter))
        x = (x - mean) / std
    y_clean = (length > SWISS_LENGTH / 2).astype(np.int64)
    y = np.where(flip, 1 - y_clean, y_clean)
    meta = {"kind": "swiss_roll", "n": n, "noise_rate": noise_rate, "seed": int(seed),
            "jitter": jitter, "standardize": standardize}
    return LabeledData(x.astype(np.float32), y,
                       {"y_clean": y_clean, "t": t, "length": length}, meta)


# -- IDX ------------------------------------------------------------------------------

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _read_bytes(path: str | Path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(path: str | Path) -> np.ndarray:
    """Decode an IDX file (optionally gzipped).

    Image files (magic 0x00000803) come back as float32 scaled to [0, 1];
    label files (0x00000801) as int64. Other unsigned-byte tensors keep
    their raw values.
    """
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IDXLengthError(f"{path}: {len(raw)} bytes, need at least 4 for the magic number")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in _IDX_DTYPES or ndim == 0:
        raise IDXFormatError(f"{path}: bad magic number 0x{raw[:4].hex()} at offset 0")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXLengthError(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = np.dtype(_IDX_DTYPES[dtype_code])
    count = int(np.prod(dims))
    need = header + count * dtype.itemsize
    if len(raw) < need:
        raise IDXLengthError(f"{path}: expected {need} bytes for dims {dims}, file has {len(raw)}")
    if len(raw) > need:
        raise IDXFormatError(f"{path}: {len(raw) - need} trailing bytes at offset {need}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=header).reshape(dims)
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IDX_IMAGES_MAGIC:
        return data.astype(np.float32) / 255.0
    if magic == IDX_LABELS_MAGIC:
        return data.astype(np.int64)
    return data.copy()


def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Write an unsigned-byte IDX file (images: 3-D, labels: 1-D)."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError("write_idx stores unsigned bytes; convert first")
    header = struct.pack(">HBB", 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    data = header + arr.tobytes()
    path = Path(path)
    path.write_bytes(gzip.compress(data, mtime=0) if path.suffix == ".gz" else data)


def bundled_digits(n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """The 5,000-image MNIST subset shipped with mlxtend, as uint8 (n, 28, 28)."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - exercised only without the extra
        raise RuntimeError(
            "no IDX paths configured and mlxtend is not installed; "
            "install the 'digits' extra or point dataset.images_path at MNIST IDX files"
        ) from exc
    x, y = mnist_data()
    x = x.reshape(-1, 28, 28).astype(np.uint8)
    if n is not None:
        x, y = x[:n], y[:n]
    return x, y.astype(np.int64)


def downsample(images: np.ndarray, size: int) -> np.ndarray:
    """Area-average (n, H, W) images down to (n, size, size); H must be a multiple."""
    n, h, w = images.shape
    if h % size or w % size:
        raise ValueError(f"cannot area-average {h}x{w} to {size}x{size}")
    fh, fw = h // size, w // size
    return images.reshape(n, size, fh, size, fw).mean(axis=(2, 4))


def colorize_and_flip(images: np.ndarray, noise_rate: float, seed: int,
                      downsample_to: int | None = None,
                      digit_labels: np.ndarray | None = None) -> LabeledData:
    """Duplicate grayscale digits into two colourings and add label noise.

    Copy with y=0 has its red channel removed, copy with y=1 its green
    channel; blue always carries the digit. ``x`` holds flattened H*W*3
    pixels (channel last); ``extras['marginal']`` the label-marginal image
    (red = green = digit / 2).
    """
    if not 0.0 <= noise_rate <= 0.5:
        raise ValueError(f"noise_rate must lie in [0, 0.5], got {noise_rate}")
    g = np.asarray(images, dtype=np.float32)
    if g.min() < 0 or g.max() > 1:
        raise ValueError("grayscale inputs must lie in [0, 1]")
    if downsample_to:
        g = downsample(g, downsample_to)
    n = g.shape[0]
    zero = np.zeros_like(g)
    red_removed = np.stack([zero, g, g], axis=-1)
    green_removed = np.stack([g, zero, g], axis=-1)
    pixels = np.concatenate([red_removed, green_removed])
    y_clean = np.concatenate([np.zeros(n, np.int64), np.ones(n, np.int64)])
    rng = np.random.default_rng([int(seed), 0xC0])
    flip = rng.random(2 * n) < noise_rate
    y = np.where(flip, 1 - y_clean, y_clean)
    marginal = np.stack([0.5 * g, 0.5 * g, g], axis=-1)
    marginal = np.concatenate([marginal, marginal])
    extras = {
        "y_clean": y_clean,
        "source_index": np.concatenate([np.arange(n), np.arange(n)]),
        "marginal": marginal.reshape(2 * n, -1),
    }
    if digit_labels is not None:
        extras["digit_class"] = np.concatenate([digit_labels, digit_labels])
    h, w = g.shape[1:]
    meta = {"kind": "colored_digits", "noise_rate": noise_rate, "seed": int(seed),
            "height": h, "width": w}
    return LabeledData(pixels.reshape(2 * n, -1).astype(np.float32), y, extras, meta)


def batches(dataset_or_n, batch_size: int, seed=None, shuffle: bool = True) -> Iterator[np.ndarray]:
    """Index arrays covering the data once; the last batch may be short.

    ``seed`` may be an int or a ``np.random.Generator``.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = dataset_or_n if isinstance(dataset_or_n, (int, np.integer)) else len(dataset_or_n)
    if shuffle:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# -- dataset blobs -------------------------------------------------------------------


def save_dataset(data: LabeledData, path: str | Path, spec: dict | None = None) -> Path:
    """Write ``<path>.json`` manifest and ``<path>.bin`` columnar blob."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = {"x": data.x, "y": data.y, **{f"extras.{k}": v for k, v in data.extras.items()}}
    entries, chunks, offset = [], [], 0
    for name, arr in columns.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        raw = arr.astype(dt).tobytes()
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {"spec": spec if spec is not None else data.meta, "meta": data.meta,
                "columns": entries, "blob_bytes": len(blob),
                "blob_sha256": hashlib.sha256(blob).hexdigest()}
    path.with_suffix(".bin").write_bytes(blob)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path.with_suffix(".json")


def load_dataset(path: str | Path) -> LabeledData:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise ValueError(f"checksum mismatch for {path.with_suffix('.bin')}")
    cols = {}
    for e in manifest["columns"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        cols[e["name"]] = np.frombuffer(blob, dtype=dt, count=count,
                                        offset=e["offset"]).reshape(e["shape"]).copy()
    extras = {k.split(".", 1)[1]: v for k, v in cols.items() if k.startswith("extras.")}
    return LabeledData(cols["x"], cols["y"], extras, manifest["meta"])
