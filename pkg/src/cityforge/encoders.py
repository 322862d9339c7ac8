"""Deterministic scene parameterizations.

Three families of encoders drive appearance downstream:

* a multi-resolution hash grid whose per-level tables are synthesized from a
  seed instead of learned, indexed by XOR-combined prime-multiplied integer
  coordinates (spatial position plus a compact scene feature),
* the periodic SinCos positional encoding applied element-wise,
* seeded stand-ins for the global / per-pixel scene encoders that condition
  the hash grid and the instance parameterizations.

All functions are pure; identical seeds give identical outputs on every run.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .semantics import N_CLASSES

if TYPE_CHECKING:
    from .layout import LocalWindow

MASK64 = 0xFFFFFFFFFFFFFFFF

# Published hash primes; the first maps feature dim 1, the last three map x, y, z.
HASH_PRIMES = (1, 2654435761, 805459861, 3674653429, 2097192037)

SINCOS_LEVELS = 10
BUILDING_PIXEL_CHANNELS = 63
GLOBAL_FEATURE_DIMS = 2

_clamped_inputs = 0


def clamped_input_count() -> int:
    """How many sincos inputs have been clamped into [-1, 1] so far."""
    return _clamped_inputs


def splitmix64(x) -> np.ndarray:
    """Counter-based 64-bit mixer (SplitMix64 finalizer), vectorized."""
    z = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _unit_interval(h: np.ndarray) -> np.ndarray:
    """uint64 hash -> float64 in [0, 1)."""
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _signed_unit(h: np.ndarray) -> np.ndarray:
    """uint64 hash -> float64 in [-1, 1)."""
    return 2.0 * _unit_interval(h) - 1.0


@dataclass(frozen=True)
class HashGridConfig:
    """Multi-resolution hash grid hyperparameters (published defaults)."""

    levels: int = 16
    entries_per_level: int = 2**19
    channels: int = 8
    primes: tuple[int, ...] = HASH_PRIMES
    base_resolution: float = 16.0  # lattice spacing in cells at level 0
    per_level_scale: float = 2.0
    feature_dims: int = GLOBAL_FEATURE_DIMS

    def __post_init__(self):
        if self.entries_per_level & (self.entries_per_level - 1):
            raise ValueError("entries_per_level must be a power of two")
        if len(self.primes) < self.feature_dims + 3:
            raise ValueError("need one prime per feature dim plus three spatial")

    def spacing(self, level: int) -> float:
        """Lattice spacing in cells at `level` (halves every level)."""
        return self.base_resolution / self.per_level_scale**level

    def feature_resolution(self, level: int) -> float:
        return self.base_resolution * self.per_level_scale**level


def hash_index(p_quantized: Sequence[int], f_quantized: Sequence[int], cfg: HashGridConfig) -> int:
    """XOR-combined prime hash of integer coordinates, modulo the table size.

    index = (xor_i f_i * prime_i  xor  xor_j p_j * prime_{d+j}) mod N_E with
    64-bit wrapping multiplication; negative inputs contribute their
    two's-complement 64-bit value.
    """
    d = len(f_quantized)
    acc = 0
    for i, v in enumerate(f_quantized):
        acc ^= ((int(v) & MASK64) * cfg.primes[i]) & MASK64
    for j, v in enumerate(p_quantized):
        acc ^= ((int(v) & MASK64) * cfg.primes[d + j]) & MASK64
    return acc & (cfg.entries_per_level - 1)


def _hash_index_batch(p: np.ndarray, f: np.ndarray, cfg: HashGridConfig) -> np.ndarray:
    """Vectorized hash_index; p is (N, 3) int64, f is (d,) int64."""
    d = f.shape[0]
    acc = np.zeros(p.shape[0], dtype=np.uint64)
    with np.errstate(over="ignore"):
        for i in range(d):
            acc ^= np.uint64(int(f[i]) & MASK64) * np.uint64(cfg.primes[i])
        for j in range(3):
            acc ^= p[:, j].astype(np.uint64) * np.uint64(cfg.primes[d + j])
    return (acc & np.uint64(cfg.entries_per_level - 1)).astype(np.int64)


@dataclass(frozen=True)
class FeatureTable:
    """Seed-determined hash-grid entries, synthesized on demand.

    Each (level, index, channel) cell holds a value in [-1, 1] that is a pure
    function of the seed, so lookups never need the 256 MB dense table;
    `level_array` materializes one level when a dense view is wanted.
    """

    seed: int
    config: HashGridConfig = field(default_factory=HashGridConfig)

    def _base(self) -> np.ndarray:
        return splitmix64(np.uint64(self.seed & MASK64) ^ np.uint64(0xC17F0A3E5D6B4291))

    def rows(self, level: int, indices: np.ndarray) -> np.ndarray:
        """(N, channels) values for table entries `indices` at `level`."""
        c = self.config.channels
        idx = np.asarray(indices, dtype=np.uint64)
        with np.errstate(over="ignore"):
            keys = (np.uint64(level) * np.uint64(self.config.entries_per_level) + idx)[:, None] * np.uint64(c) + np.arange(c, dtype=np.uint64)[None, :]
            keys = keys ^ self._base()
        return _signed_unit(splitmix64(keys))

    def channel_values(self, level: int, indices: np.ndarray, channel: int = 0) -> np.ndarray:
        """One channel of rows(level, indices), computed without the others."""
        idx = np.asarray(indices, dtype=np.uint64)
        with np.errstate(over="ignore"):
            keys = (np.uint64(level) * np.uint64(self.config.entries_per_level) + idx) * np.uint64(self.config.channels) + np.uint64(channel)
            keys = keys ^ self._base()
        return _signed_unit(splitmix64(keys))

    def level_array(self, level: int) -> np.ndarray:
        """Materialize one full (N_E, channels) level (for tests/inspection)."""
        return self.rows(level, np.arange(self.config.entries_per_level, dtype=np.int64))


@dataclass(frozen=True)
class SceneFeature:
    """Compact feature vector conditioning an encoder (finite values)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if not np.isfinite(v).all():
            raise ValueError("scene feature must be finite")
        object.__setattr__(self, "values", v)


def hash_feature_batch(points: np.ndarray, f: SceneFeature | np.ndarray, table: FeatureTable, cfg: HashGridConfig | None = None) -> np.ndarray:
    """Multi-level hash-grid lookup with trilinear corner interpolation.

    `points` is (N, 3) in window cells. Per level the position is divided by
    the level's lattice spacing and floored; the scene feature is scaled by
    the level's feature resolution and floored (held fixed across the level's
    8 corners). Level outputs are concatenated: (N, levels * channels).
    """
    cfg = cfg or table.config
    f_vals = f.values if isinstance(f, SceneFeature) else np.asarray(f, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    out = np.empty((n, cfg.levels * cfg.channels), dtype=np.float64)
    corner_offsets = np.array(
        [[dx, dy, dz] for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)], dtype=np.int64
    )
    for level in range(cfg.levels):
        g = pts / cfg.spacing(level)
        c0 = np.floor(g).astype(np.int64)
        w = g - c0
        f_q = np.floor(f_vals * cfg.feature_resolution(level)).astype(np.int64)
        acc = np.zeros((n, cfg.channels), dtype=np.float64)
        for off in corner_offsets:
            corner = c0 + off[None, :]
            weight = np.prod(np.where(off[None, :] == 1, w, 1.0 - w), axis=1)
            rows = table.rows(level, _hash_index_batch(corner, f_q, cfg))
            acc += weight[:, None] * rows
        out[:, level * cfg.channels : (level + 1) * cfg.channels] = acc
    return out


def hash_feature(p: Sequence[float], f: SceneFeature | np.ndarray, table: FeatureTable, cfg: HashGridConfig | None = None) -> np.ndarray:
    """Single-point hash-grid feature; see hash_feature_batch."""
    return hash_feature_batch(np.asarray(p, dtype=np.float64)[None, :], f, table, cfg)[0]


def sincos_encode(x, levels: int = SINCOS_LEVELS) -> np.ndarray:
    """Periodic positional encoding sin(2^i pi x), cos(2^i pi x), i = 0..L-1.

    Applied separately to each element, ordered element-major then level
    (all levels of element 0 first). Inputs are expected in [-1, 1]; values
    outside are clamped and counted (see clamped_input_count).
    """
    global _clamped_inputs
    v = np.asarray(x, dtype=np.float64).ravel()
    over = np.count_nonzero((v < -1.0) | (v > 1.0))
    if over:
        _clamped_inputs += int(over)
        v = np.clip(v, -1.0, 1.0)
    freqs = (2.0 ** np.arange(levels)) * math.pi  # (L,)
    ang = v[:, None] * freqs[None, :]  # (d, L)
    out = np.empty((v.size, levels, 2), dtype=np.float64)
    out[:, :, 0] = np.sin(ang)
    out[:, :, 1] = np.cos(ang)
    return out.reshape(-1)


def sincos_encode_batch(x: np.ndarray, levels: int = SINCOS_LEVELS) -> np.ndarray:
    """Batch sincos: (N, d) -> (N, 2 * levels * d), same ordering per row."""
    global _clamped_inputs
    v = np.asarray(x, dtype=np.float64)
    over = np.count_nonzero((v < -1.0) | (v > 1.0))
    if over:
        _clamped_inputs += int(over)
        v = np.clip(v, -1.0, 1.0)
    freqs = (2.0 ** np.arange(levels)) * math.pi
    ang = v[:, :, None] * freqs[None, None, :]  # (N, d, L)
    out = np.empty(ang.shape + (2,), dtype=np.float64)
    out[..., 0] = np.sin(ang)
    out[..., 1] = np.cos(ang)
    return out.reshape(v.shape[0], -1)


def scene_feature_global(window: "LocalWindow", d: int = GLOBAL_FEATURE_DIMS, seed: int = 0) -> SceneFeature:
    """Compact scene-level feature from the window's class histogram and heights.

    A keyed BLAKE2b digest of the histogram and integer height statistics is
    mapped into [-1, 1]^d, so any change to the window's content (one column's
    class or height) changes the feature, and identical windows always agree.
    """
    if d < 1:
        raise ValueError("feature dimension must be >= 1")
    cells = window.semantic.cells
    hist = np.bincount(cells.ravel(), minlength=N_CLASSES).astype(np.int64)
    bu, td = window.heights.bottom_up, window.heights.top_down
    stats = np.array(
        [int(bu.sum()), int(td.sum()), int(bu.max()), int(td.max()), cells.shape[0], cells.shape[1], window.depth],
        dtype=np.int64,
    )
    payload = hist.tobytes() + stats.tobytes()
    key = (int(seed) & MASK64).to_bytes(8, "little")
    vals = np.empty(d, dtype=np.float64)
    for chunk in range(0, d, 8):
        digest = hashlib.blake2b(payload, digest_size=64, key=key, salt=chunk.to_bytes(8, "little")).digest()
        words = np.frombuffer(digest, dtype="<u8")
        take = min(8, d - chunk)
        vals[chunk : chunk + take] = _signed_unit(words[:take])
    return SceneFeature(vals)


def building_pixel_channels(window: "LocalWindow", xi: np.ndarray, yi: np.ndarray, seed: int, n_channels: int = BUILDING_PIXEL_CHANNELS) -> np.ndarray:
    """Deterministic per-pixel channels in [-1, 1] from local semantics/heights.

    Stand-in for a learned pixel encoder: each channel hashes the pixel's
    coordinates, class and height slab together with the seed.
    """
    xi = np.asarray(xi, dtype=np.int64)
    yi = np.asarray(yi, dtype=np.int64)
    sem = window.semantic.cells[yi, xi].astype(np.uint64)
    bu = window.heights.bottom_up[yi, xi].astype(np.uint64)
    td = window.heights.top_down[yi, xi].astype(np.uint64)
    with np.errstate(over="ignore"):
        key = splitmix64(xi.astype(np.uint64) ^ (yi.astype(np.uint64) << np.uint64(20)))
        key ^= splitmix64(sem ^ (bu << np.uint64(8)) ^ (td << np.uint64(28)))
        key ^= splitmix64(np.uint64(int(seed) & MASK64) ^ np.uint64(0x5B1D8F27A3C964E5))
        keys = key[:, None] * np.uint64(0x9E3779B97F4A7C15) + np.arange(n_channels, dtype=np.uint64)[None, :]
    return _signed_unit(splitmix64(keys))


def building_point_feature(p: Sequence[float], window: "LocalWindow", seed: int, levels: int = SINCOS_LEVELS) -> np.ndarray:
    """Pixel feature of (x, y) concatenated with z, then sincos-encoded.

    Output length 2 * levels * (channels + 1) = 1280 at defaults. z is
    normalized to [-1, 1] by the window depth. Points outside the window
    raise ValueError.
    """
    x, y, z = (float(v) for v in p)
    h, w, depth = window.size
    if not (0.0 <= x < w and 0.0 <= y < h and 0.0 <= z < depth):
        raise ValueError(f"point {p} outside window of size {(h, w, depth)}")
    chans = building_pixel_channels(window, np.array([int(x)]), np.array([int(y)]), seed)[0]
    z_norm = 2.0 * z / depth - 1.0
    return sincos_encode(np.concatenate([chans, [z_norm]]), levels)


def vehicle_point_feature(p_canonical: Sequence[float], f_global: SceneFeature, levels: int = SINCOS_LEVELS) -> np.ndarray:
    """Sincos encoding of (global scene feature, canonical point) concatenated.

    Output length 2 * levels * (d_V + 3) = 100 at defaults. The caller
    canonicalizes (and normalizes) the point first.
    """
    vals = np.concatenate([f_global.values, np.asarray(p_canonical, dtype=np.float64).ravel()])
    return sincos_encode(vals, levels)


def modulation_weights(style_seed: int, n_elems: int, levels: int = SINCOS_LEVELS) -> np.ndarray:
    """(n_elems, levels, 2) projection weights with sum(|w|) = 1.

    Dotting these with a sincos feature yields a scalar in [-1, 1]; used to
    turn high-dimensional encodings into a color modulation.
    """
    keys = np.arange(n_elems * levels * 2, dtype=np.uint64) + (np.uint64(int(style_seed) & MASK64) << np.uint64(20))
    w = _signed_unit(splitmix64(splitmix64(keys))).reshape(n_elems, levels, 2)
    return w / np.abs(w).sum()


def sincos_project(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Streaming dot(sincos_encode(values_row), weights) without materializing.

    `values` is (N, d) already in [-1, 1]; `weights` is (d, L, 2). Equals
    sincos_encode_batch(values) @ weights.reshape(-1) but keeps memory at
    O(N * L).
    """
    n, d = values.shape
    levels = weights.shape[1]
    freqs = (2.0 ** np.arange(levels)) * math.pi
    out = np.zeros(n, dtype=np.float64)
    for e in range(d):
        ang = values[:, e : e + 1] * freqs[None, :]  # (N, L)
        out += np.sin(ang) @ weights[e, :, 0]
        out += np.cos(ang) @ weights[e, :, 1]
    return out
