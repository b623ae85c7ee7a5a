"""Synthetic planar depth scenes, PFM/PPM sample files, and batching.

A dataset directory looks like ``<root>/<split>/<id>.ppm`` (RGB),
``<id>.pfm`` (depth), ``<id>.mask.pfm`` (validity, 1.0/0.0) and
``<id>.meta`` (key=value text).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import kvconfig
from .errors import ConfigurationError, FormatError, UsageError


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    planes_min: int = 2
    planes_max: int = 4
    depth_min: float = 1.0
    depth_max: float = 8.0
    max_depth: float = 10.0
    slope: float = 0.5  # max depth change across the image, as a fraction of the depth range
    albedo_strength: float = 0.25
    texture_noise: float = 0.02
    noise_kappa: float = 0.0  # depth noise std = kappa * depth
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.height % 32 or self.width % 32:
            raise ConfigurationError(f"scene extents {self.height}x{self.width} must be positive multiples of 32")
        if not 1 <= self.planes_min <= self.planes_max:
            raise ConfigurationError("need 1 <= planes_min <= planes_max")
        if not 0 < self.depth_min < self.depth_max <= self.max_depth:
            raise ConfigurationError("need 0 < depth_min < depth_max <= max_depth")
        if min(self.slope, self.albedo_strength, self.texture_noise, self.noise_kappa) < 0:
            raise ConfigurationError("slope, albedo_strength, texture_noise and noise_kappa must be >= 0")
        if self.albedo_strength > 1:
            raise ConfigurationError("albedo_strength must be <= 1")


@dataclass
class Sample:
    rgb: np.ndarray  # 3 x H x W in [0, 1]
    depth: np.ndarray  # H x W in (0, max_depth]
    valid_mask: np.ndarray  # H x W bool
    meta: dict = field(default_factory=dict)
    clean_depth: np.ndarray | None = None  # noise-free depth, in-memory only
    regions: np.ndarray | None = None  # region label per pixel, in-memory only

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise ConfigurationError(f"rgb must be 3xHxW, got {self.rgb.shape}")
        if self.depth.shape != self.rgb.shape[1:] or self.valid_mask.shape != self.depth.shape:
            raise ConfigurationError("rgb, depth and mask extents disagree")
        if np.any(self.depth[self.valid_mask] <= 0):
            raise ConfigurationError("depth must be positive wherever the mask is set")


def generate_scene(config: SceneConfig) -> Sample:
    """Voronoi partition into planar regions, shaded so brightness falls with depth."""
    rng = np.random.default_rng(config.seed)
    H, W = config.height, config.width
    n = int(rng.integers(config.planes_min, config.planes_max + 1))
    rows, cols = np.mgrid[0:H, 0:W].astype(np.float64)
    centres = rng.uniform([0, 0], [H, W], size=(n, 2))
    d2 = (rows[None] - centres[:, 0, None, None]) ** 2 + (cols[None] - centres[:, 1, None, None]) ** 2
    labels = np.argmin(d2, axis=0)

    span = config.depth_max - config.depth_min
    log_c = rng.uniform(np.log(config.depth_min), np.log(config.depth_max), size=n)
    grads = rng.uniform(-config.slope, config.slope, size=(n, 2)) * span
    albedo = rng.uniform(0, 1, size=(n, 3))
    c = np.exp(log_c)[labels]
    depth = c + grads[labels, 0] * (rows - centres[labels, 0]) / H + grads[labels, 1] * (cols - centres[labels, 1]) / W
    depth = np.clip(depth, config.depth_min, config.depth_max)

    brightness = 1.0 - depth / config.max_depth
    a = config.albedo_strength
    rgb = (1 - a) * brightness[None] + a * albedo[labels].transpose(2, 0, 1)
    if config.texture_noise:
        rgb = rgb + rng.normal(0, config.texture_noise, size=rgb.shape)
    rgb = np.clip(rgb, 0, 1)

    stored = depth
    if config.noise_kappa:
        stored = depth + rng.normal(size=depth.shape) * config.noise_kappa * depth
        stored = np.clip(stored, 1e-3, config.max_depth)
    meta = dict(kvconfig.to_items(config))
    return Sample(rgb, stored, np.ones((H, W), dtype=bool), meta, clean_depth=depth, regions=labels)


def generate_dataset(config: SceneConfig, count: int, seed: int | None = None) -> list[Sample]:
    """``count`` scenes with seeds ``base, base+1, ...`` (base defaults to ``config.seed``)."""
    base = config.seed if seed is None else seed
    return [generate_scene(replace(config, seed=base + i)) for i in range(count)]


# -- PFM / PPM ---------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def _header_tokens(buf: bytes, count: int, what: str) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated tokens; return them and the payload offset."""
    pos, tokens = 0, []
    for _ in range(count):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise FormatError(f"{what}: truncated header", offset=pos)
        tokens.append(m.group(2))
        pos = m.end()
    if pos >= len(buf) or buf[pos:pos + 1] not in (b"\n", b" ", b"\r", b"\t"):
        raise FormatError(f"{what}: header must end with one whitespace byte", offset=pos)
    return tokens, pos + 1


def _dims(tokens, offset, what):
    try:
        w, h = int(tokens[0]), int(tokens[1])
    except ValueError:
        raise FormatError(f"{what}: bad dimensions {tokens[0]!r} {tokens[1]!r}", offset=offset) from None
    if w < 1 or h < 1:
        raise FormatError(f"{what}: non-positive dimensions", offset=offset)
    return w, h


def encode_pfm(image: np.ndarray) -> bytes:
    """Greyscale PFM, little-endian float32, rows stored bottom-to-top."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ConfigurationError(f"PFM writer takes an HxW array, got {img.shape}")
    H, W = img.shape
    header = f"Pf\n{W} {H}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(img[::-1], dtype="<f4").tobytes()


def decode_pfm(buf: bytes) -> np.ndarray:
    if not buf.startswith(b"Pf"):
        raise FormatError("PFM: expected 'Pf' magic (greyscale)", offset=0)
    tokens, start = _header_tokens(buf, 4, "PFM")
    w, h = _dims(tokens[1:3], 3, "PFM")
    try:
        scale = float(tokens[3])
    except ValueError:
        raise FormatError(f"PFM: bad scale {tokens[3]!r}", offset=start - 1 - len(tokens[3])) from None
    if scale >= 0:
        raise FormatError("PFM: big-endian (positive scale) files are not supported", offset=start - 1 - len(tokens[3]))
    need = w * h * 4
    if len(buf) - start < need:
        raise FormatError(f"PFM: payload truncated, need {need} bytes", offset=len(buf))
    data = np.frombuffer(buf, dtype="<f4", count=w * h, offset=start).reshape(h, w)
    return data[::-1].astype(np.float32)


def encode_ppm(rgb: np.ndarray) -> bytes:
    """Binary P6 with maxval 255 from a 3xHxW array in [0, 1]."""
    q = quantize_rgb(rgb)
    _, H, W = q.shape
    return f"P6\n{W} {H}\n255\n".encode("ascii") + np.ascontiguousarray(q.transpose(1, 2, 0)).tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    if not buf.startswith(b"P6"):
        raise FormatError("PPM: expected 'P6' magic", offset=0)
    tokens, start = _header_tokens(buf, 4, "PPM")
    w, h = _dims(tokens[1:3], 3, "PPM")
    if tokens[3] != b"255":
        raise FormatError(f"PPM: only maxval 255 is supported, got {tokens[3]!r}", offset=start - 4)
    need = w * h * 3
    if len(buf) - start < need:
        raise FormatError(f"PPM: payload truncated, need {need} bytes", offset=len(buf))
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=start).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float64) / 255.0


def quantize_rgb(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(rgb, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def write_pfm(path, image) -> None:
    Path(path).write_bytes(encode_pfm(image))


def read_pfm(path) -> np.ndarray:
    return decode_pfm(Path(path).read_bytes())


def write_ppm(path, rgb) -> None:
    Path(path).write_bytes(encode_ppm(rgb))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_sample(directory, sample_id: str, sample: Sample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ppm(d / f"{sample_id}.ppm", sample.rgb)
    write_pfm(d / f"{sample_id}.pfm", sample.depth)
    write_pfm(d / f"{sample_id}.mask.pfm", sample.valid_mask.astype(np.float32))
    kvconfig.write_kv_file(d / f"{sample_id}.meta", sorted(sample.meta.items()))


def read_sample(directory, sample_id: str) -> Sample:
    d = Path(directory)
    rgb = read_ppm(d / f"{sample_id}.ppm")
    depth = read_pfm(d / f"{sample_id}.pfm").astype(np.float64)
    mask_path = d / f"{sample_id}.mask.pfm"
    mask = read_pfm(mask_path) > 0.5 if mask_path.exists() else np.ones(depth.shape, dtype=bool)
    meta_path = d / f"{sample_id}.meta"
    meta = kvconfig.read_kv_file(meta_path) if meta_path.exists() else {}
    return Sample(rgb, depth, mask, meta)


def sample_ids(directory) -> list[str]:
    return sorted(p.name[:-4] for p in Path(directory).glob("*.ppm"))


def load_split(root, split: str) -> list[Sample]:
    d = Path(root) / split
    if not d.is_dir():
        raise UsageError(f"no split directory {d}")
    return [read_sample(d, i) for i in sample_ids(d)]


def write_split(root, split: str, samples: Sequence[Sample]) -> None:
    for i, s in enumerate(samples):
        write_sample(Path(root) / split, f"{i:04d}", s)


# -- batching ------------------------------------------------------------------

@dataclass
class Batch:
    indices: np.ndarray
    rgb: np.ndarray  # B x 3 x H x W
    depth: np.ndarray  # B x H x W
    mask: np.ndarray  # B x H x W


def stack(samples: Sequence[Sample], indices=None) -> Batch:
    idx = np.arange(len(samples)) if indices is None else np.asarray(indices)
    return Batch(idx, np.stack([s.rgb for s in samples]), np.stack([s.depth for s in samples]),
                 np.stack([s.valid_mask for s in samples]))


def epoch_order(n: int, shuffle_seed: int | None, epoch: int = 0) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def batch_iter(dataset: Sequence[Sample], batch_size: int, shuffle_seed: int | None = None,
               epoch: int = 0) -> Iterator[Batch]:
    """Batches of one epoch; the final partial batch is dropped."""
    if batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {batch_size}")
    if len(dataset) == 0:
        raise UsageError("empty dataset")
    order = epoch_order(len(dataset), shuffle_seed, epoch)
    for start in range(0, len(order) - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        yield stack([dataset[i] for i in idx], idx)
