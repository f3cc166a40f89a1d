"""Volume persistence, frame import/export, noise synthesis, test sequences.

The on-disk volume format ("vvol") is deliberately minimal so pipelines
stay bit-exact: a magic line, one ASCII dimension line "W H T", then
W*H*T little-endian binary64 values in x-fastest row-major order. That
order matches the in-memory (T, H, W) C-contiguous layout, so reading
and writing are straight buffer copies.

PGM (P5) frame sequences are the interchange format with external
tools; import normalises to [0, 1], export clamps and quantises.
"""

from __future__ import annotations

import glob
import os
from dataclasses import dataclass

import numpy as np

VVOL_MAGIC = b"VVOL1\n"


class VvolError(ValueError):
    """Malformed vvol file (bad magic, bad header, or wrong payload size)."""


class PgmError(ValueError):
    """Malformed PGM frame or inconsistent frame sequence."""


def write_vvol(path, v):
    v = np.ascontiguousarray(v, dtype=np.float64)
    if v.ndim != 3:
        raise ValueError(f"expected a (T, H, W) volume, got shape {v.shape}")
    t, h, w = v.shape
    with open(path, "wb") as fh:
        fh.write(VVOL_MAGIC)
        fh.write(f"{w} {h} {t}\n".encode("ascii"))
        fh.write(v.astype("<f8", copy=False).tobytes())


def read_vvol(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(VVOL_MAGIC))
        if magic != VVOL_MAGIC:
            raise VvolError(f"{path}: bad magic {magic!r}")
        header = fh.readline()
        parts = header.split()
        if len(parts) != 3:
            raise VvolError(f"{path}: malformed header {header!r}")
        try:
            w, h, t = (int(p) for p in parts)
        except ValueError as exc:
            raise VvolError(f"{path}: malformed header {header!r}") from exc
        if w < 1 or h < 1 or t < 1:
            raise VvolError(f"{path}: invalid dimensions {w}x{h}x{t}")
        payload = fh.read()
    expected = 8 * w * h * t
    if len(payload) < expected:
        raise VvolError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise VvolError(f"{path}: oversized payload ({len(payload)} of {expected} bytes)")
    data = np.frombuffer(payload, dtype="<f8")
    return data.reshape(t, h, w).copy()


def export_pgm_sequence(v, directory, maxval=65535):
    """Write one PGM per frame (frame_0000.pgm, ...) into `directory`.

    Values are clamped to [0, 1] and quantised with round-half-up; a
    maxval above 255 selects the 16-bit big-endian sample format.
    """
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    os.makedirs(directory, exist_ok=True)
    t, h, w = v.shape
    q = np.floor(np.clip(v, 0.0, 1.0) * maxval + 0.5)
    q = q.astype(np.uint8 if maxval == 255 else ">u2")
    paths = []
    for k in range(t):
        path = os.path.join(directory, f"frame_{k:04d}.pgm")
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
            fh.write(q[k].tobytes())
        paths.append(path)
    return paths


def _read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P5"):
        raise PgmError(f"{path}: not a binary PGM (P5) file")
    # header = magic, width, height, maxval as whitespace-separated tokens,
    # with optional '#' comment lines
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmError(f"{path}: unterminated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(tok) for tok in tokens)
    except ValueError as exc:
        raise PgmError(f"{path}: malformed header tokens {tokens}") from exc
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise PgmError(f"{path}: invalid dimensions or maxval")
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    expected = w * h * dtype.itemsize
    payload = raw[pos : pos + expected]
    if len(payload) < expected:
        raise PgmError(f"{path}: truncated pixel data")
    frame = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return frame.astype(np.float64) / maxval


def import_pgm_sequence(source):
    """Read a directory of PGM frames (sorted by name) or a glob pattern."""
    if os.path.isdir(source):
        paths = sorted(glob.glob(os.path.join(source, "*.pgm")))
    else:
        paths = sorted(glob.glob(source))
    if not paths:
        raise PgmError(f"no PGM frames found at {source}")
    frames = [_read_pgm(p) for p in paths]
    shape = frames[0].shape
    for p, fr in zip(paths, frames):
        if fr.shape != shape:
            raise PgmError(f"{p}: frame size {fr.shape} differs from {shape}")
    return np.stack(frames)


def rgb_to_gray_downsample(frames, target_w, target_h, target_t):
    """Luma conversion plus box-average downsampling of an RGB stack.

    `frames` has shape (T, H, W, 3). Spatial reduction averages over the
    near-uniform index bins that partition each axis; temporal reduction
    subsamples frames at indices round(k * T / target_t).
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValueError(f"expected (T, H, W, 3) RGB frames, got {frames.shape}")
    t, h, w = frames.shape[:3]
    if not (1 <= target_w <= w and 1 <= target_h <= h and 1 <= target_t <= t):
        raise ValueError("targets must be between 1 and the source dimensions")
    gray = frames @ np.array([0.299, 0.587, 0.114])

    idx = np.minimum(np.round(np.arange(target_t) * t / target_t).astype(int), t - 1)
    gray = gray[idx]

    def box_axis(a, axis, target):
        n = a.shape[axis]
        bounds = np.floor(np.arange(target + 1) * n / target).astype(int)
        sums = np.add.reduceat(a, bounds[:-1], axis=axis)
        counts = np.diff(bounds).astype(float)
        shape = [1] * a.ndim
        shape[axis] = target
        return sums / counts.reshape(shape)

    gray = box_axis(gray, 1, target_h)
    gray = box_axis(gray, 2, target_w)
    return gray


@dataclass(frozen=True)
class NoiseSpec:
    """Zero-mean Gaussian noise with the given variance and seed."""

    var: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.var < 0:
            raise ValueError("variance must be >= 0")


def add_noise(v, spec):
    """Add seeded Gaussian noise; never clips the result to [0, 1].

    Normals come from Box-Muller over a counter-based generator, so the
    same seed reproduces the same noise bit for bit on any platform.
    """
    if spec.var == 0.0:
        return v.copy()
    rng = np.random.Generator(np.random.Philox(spec.seed))
    n = v.size
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]: keeps the log finite
    u2 = rng.random(m)
    radius = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([radius * np.cos(2.0 * np.pi * u2),
                        radius * np.sin(2.0 * np.pi * u2)])[:n]
    return v + np.sqrt(spec.var) * z.reshape(v.shape)


SYNTH_KINDS = ("moving-square", "panning-gradient", "switching-scene")


def synth_sequence(kind, w, h, t, seed=0):
    """Deterministic test sequences covering the three motion regimes.

    moving-square: static background with a bright block bouncing one
    voxel per frame. panning-gradient: a smooth x-periodic texture
    drifting one voxel per frame, so each frame is an exact roll of the
    first. switching-scene: two static piecewise-constant scenes that
    swap halves at t = T // 2. All values lie in [0, 1].
    """
    rng = np.random.default_rng(seed)
    if kind == "moving-square":
        y_ramp = np.linspace(0.15, 0.45, h)[:, None]
        video = np.broadcast_to(y_ramp, (t, h, w)).copy()
        side = max(2, min(h, w) // 4)
        px = _bounce_path(w - side, t, start=0)
        py = _bounce_path(h - side, t, start=(h - side) // 2)
        for k in range(t):
            video[k, py[k] : py[k] + side, px[k] : px[k] + side] = 0.9
        return video
    if kind == "panning-gradient":
        x = np.arange(w) / w
        y = np.arange(h) / h
        phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
        base = 0.5 + 0.15 * np.sin(2 * np.pi * x[None, :] + phases[0]) \
                   + 0.10 * np.sin(4 * np.pi * x[None, :] + phases[1]) \
                   + 0.15 * np.sin(2 * np.pi * y[:, None] + phases[2])
        return np.stack([np.roll(base, k, axis=1) for k in range(t)])
    if kind == "switching-scene":
        left, right = rng.uniform(0.2, 0.8, size=2)
        scene_a = np.empty((h, w))
        scene_a[:, : w // 2] = left
        scene_a[:, w // 2 :] = right
        scene_b = np.empty((h, w))
        scene_b[:, : w // 2] = right
        scene_b[:, w // 2 :] = left
        switch = t // 2
        return np.stack([scene_a if k < switch else scene_b for k in range(t)])
    raise ValueError(f"unknown kind {kind!r}, expected one of {SYNTH_KINDS}")


def _bounce_path(limit, count, start=0):
    """Positions 0..limit reflecting at the ends, one step per frame."""
    if limit <= 0:
        return [0] * count
    period = 2 * limit
    pos = []
    for k in range(count):
        phase = (start + k) % period
        pos.append(phase if phase <= limit else period - phase)
    return pos
