"""Video/flow data model, file formats, moving-sprite scenes and patch geometry.

Videos are float64 arrays of shape (3, F, H, W) with values in [0, 1]; flow
fields are (2, T, H, W) arrays of (x, y) displacement in [-1, 1].
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .numerics import rng as rngmod

RVID_MAGIC = b"RVID"
RFLO_MAGIC = b"RFLO"


class FormatError(ValueError):
    pass


class GeometryError(ValueError):
    pass


# patch geometry ------------------------------------------------------------------


@dataclass(frozen=True)
class PatchSpec:
    frames: int
    height: int
    width: int
    tubelet: tuple[int, int, int]

    @property
    def grid(self) -> tuple[int, int, int]:
        kt, kh, kw = self.tubelet
        return (self.frames // kt, self.height // kh, self.width // kw)

    @property
    def n_tokens(self) -> int:
        gt, gh, gw = self.grid
        return gt * gh * gw

    @property
    def patch_dim(self) -> int:
        kt, kh, kw = self.tubelet
        return 3 * kt * kh * kw


def patch_grid(frames: int, height: int, width: int, tubelet=(2, 16, 16)) -> PatchSpec:
    kt, kh, kw = (int(v) for v in tubelet)
    for name, extent, k in (("frames", frames, kt), ("height", height, kh), ("width", width, kw)):
        if k < 1 or extent < k or extent % k:
            raise GeometryError(f"{name}={extent} is not divisible by tubelet extent {k}")
    return PatchSpec(int(frames), int(height), int(width), (kt, kh, kw))


def patchify(video: np.ndarray, patch: PatchSpec) -> np.ndarray:
    """(C, F, H, W) -> (N, C*kt*kh*kw) in (t, h, w) raster order."""
    c = video.shape[0]
    kt, kh, kw = patch.tubelet
    gt, gh, gw = patch.grid
    x = video.reshape(c, gt, kt, gh, kh, gw, kw)
    return x.transpose(1, 3, 5, 0, 2, 4, 6).reshape(gt * gh * gw, c * kt * kh * kw)


def token_mask_to_pixels(mask: np.ndarray, patch: PatchSpec) -> np.ndarray:
    """Per-token boolean mask (N or grid-shaped) -> per-pixel (F, H, W) mask."""
    kt, kh, kw = patch.tubelet
    m = np.asarray(mask, dtype=bool).reshape(patch.grid)
    return m.repeat(kt, 0).repeat(kh, 1).repeat(kw, 2)


def check_video(video: np.ndarray) -> None:
    if video.ndim != 4 or video.shape[0] != 3:
        raise FormatError(f"video must be (3, F, H, W), got {video.shape}")
    if video.size and (video.min() < 0.0 or video.max() > 1.0):
        raise FormatError("video values must lie in [0, 1]")


# file formats -------------------------------------------------------------------------


def encode_rvid(video: np.ndarray) -> bytes:
    check_video(video)
    _, f, h, w = video.shape
    if min(f, h, w) == 0:
        raise FormatError("zero-sized video")
    pix = np.clip(np.floor(video * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return RVID_MAGIC + struct.pack("<4I", 1, f, h, w) + pix.transpose(1, 2, 3, 0).tobytes()


def decode_rvid(buf: bytes) -> np.ndarray:
    if buf[:4] != RVID_MAGIC:
        raise FormatError("bad rvid magic")
    if len(buf) < 20:
        raise FormatError("truncated rvid header")
    version, f, h, w = struct.unpack_from("<4I", buf, 4)
    if version != 1:
        raise FormatError(f"unsupported rvid version {version}")
    if min(f, h, w) == 0:
        raise FormatError("rvid dims must be nonzero")
    payload = buf[20:]
    if len(payload) != f * h * w * 3:
        raise FormatError(f"rvid payload has {len(payload)} bytes, header implies {f * h * w * 3}")
    pix = np.frombuffer(payload, dtype=np.uint8).reshape(f, h, w, 3)
    return pix.transpose(3, 0, 1, 2).astype(np.float64) / 255.0


def save_rvid(video: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_rvid(video))


def load_rvid(path) -> np.ndarray:
    return decode_rvid(Path(path).read_bytes())


def encode_rflo(flow: np.ndarray) -> bytes:
    if flow.ndim != 4 or flow.shape[0] != 2:
        raise FormatError(f"flow must be (2, T, H, W), got {flow.shape}")
    if np.abs(flow).max(initial=0.0) > 1.0:
        raise FormatError("flow values must lie in [-1, 1]")
    _, t, h, w = flow.shape
    return RFLO_MAGIC + struct.pack("<3I", t, h, w) + flow.transpose(1, 2, 3, 0).astype("<f4").tobytes()


def decode_rflo(buf: bytes) -> np.ndarray:
    if buf[:4] != RFLO_MAGIC:
        raise FormatError("bad rflo magic")
    if len(buf) < 16:
        raise FormatError("truncated rflo header")
    t, h, w = struct.unpack_from("<3I", buf, 4)
    if min(t, h, w) == 0:
        raise FormatError("rflo dims must be nonzero")
    payload = buf[16:]
    if len(payload) != t * h * w * 2 * 4:
        raise FormatError("rflo payload length does not match header")
    arr = np.frombuffer(payload, dtype="<f4").reshape(t, h, w, 2)
    return arr.transpose(3, 0, 1, 2).astype(np.float64)


def save_rflo(flow: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_rflo(flow))


def load_rflo(path) -> np.ndarray:
    return decode_rflo(Path(path).read_bytes())


def export_ppm(
    video: np.ndarray,
    out_dir,
    selected: np.ndarray | None = None,
    patch: PatchSpec | None = None,
    prefix: str = "frame",
) -> list[Path]:
    """Write one binary P6 PPM per frame.

    With ``selected`` (per-token booleans) pixels of unselected tokens are
    dimmed to 25% brightness.
    """
    check_video(video)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = video
    if selected is not None:
        if patch is None:
            raise ValueError("overlay needs the PatchSpec of the token mask")
        keep = token_mask_to_pixels(selected, patch)
        frames = video * np.where(keep, 1.0, 0.25)[None]
    pix = np.clip(np.floor(frames * 255.0 + 0.5), 0, 255).astype(np.uint8)
    _, f, h, w = video.shape
    paths = []
    for i in range(f):
        p = out / f"{prefix}_{i:04d}.ppm"
        p.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + pix[:, i].transpose(1, 2, 0).tobytes())
        paths.append(p)
    return paths


def read_ppm(path) -> np.ndarray:
    """Inverse of one exported frame: (3, H, W) bytes as uint8."""
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P6":
        raise FormatError("not a P6 ppm")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)


# synthetic scenes ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneSpec:
    """Moving-sprite scene.

    Each velocity component has magnitude drawn from ``speed_range`` with a
    random sign, unless ``velocity`` pins (vx, vy) for every sprite.
    """

    frames: int = 16
    height: int = 64
    width: int = 64
    tubelet: tuple[int, int, int] = (2, 8, 8)
    sprites: int = 2
    size_range: tuple[int, int] = (8, 12)
    speed_range: tuple[int, int] = (1, 3)
    velocity: tuple[int, int] | None = None
    background: str = "noise"
    color_range: tuple[float, float] = (0.6, 1.0)
    seed: int = 0


@dataclass
class Track:
    size: int
    color: np.ndarray
    xs: list[int] = field(default_factory=list)
    ys: list[int] = field(default_factory=list)


class Scene(NamedTuple):
    video: np.ndarray
    flow: np.ndarray
    motion_mask: np.ndarray
    tracks: list[Track]


def _reflect(p: int, v: int, hi: int) -> tuple[int, int]:
    p += v
    if p < 0:
        p, v = -p, -v
    elif p > hi:
        p, v = 2 * hi - p, -v
    return p, v


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    if spec.background == "noise":
        return rng.uniform(0.0, 0.4, size=(3, h, w))
    if spec.background == "gradient":
        ramp = np.linspace(0.0, 0.4, w)[None, None, :] * np.ones((3, h, 1))
        return ramp * rng.uniform(0.5, 1.0, size=(3, 1, 1))
    raise ValueError(f"unknown background mode {spec.background!r}")


def gen_moving_sprites(spec: SceneSpec) -> Scene:
    """Square sprites translating at constant velocity, reflecting at borders.

    Returns the video, the exact flow (displacement / max(H, W), zero at frame
    0 and on background) and the per-token motion mask: tokens whose patch
    overlaps any sprite in at least one of the frames it covers.
    """
    patch = patch_grid(spec.frames, spec.height, spec.width, spec.tubelet)
    lo, hi = spec.size_range
    if spec.sprites < 0 or lo < 1 or hi < lo or hi >= min(spec.height, spec.width):
        raise ValueError("degenerate scene spec")
    rng = rngmod.stream(spec.seed, "scene")
    bg = _background(spec, rng)
    f, h, w = spec.frames, spec.height, spec.width

    tracks = []
    for _ in range(spec.sprites):
        size = int(rng.integers(lo, hi + 1))
        color = rng.uniform(*spec.color_range, size=3)
        x, y = int(rng.integers(0, w - size + 1)), int(rng.integers(0, h - size + 1))
        if spec.velocity is not None:
            vx, vy = (int(v) for v in spec.velocity)
        else:
            s_lo, s_hi = spec.speed_range
            vx = int(rng.integers(s_lo, s_hi + 1)) * int(rng.choice([-1, 1]))
            vy = int(rng.integers(s_lo, s_hi + 1)) * int(rng.choice([-1, 1]))
        tr = Track(size, color)
        for _t in range(f):
            tr.xs.append(x)
            tr.ys.append(y)
            x, vx = _reflect(x, vx, w - size)
            y, vy = _reflect(y, vy, h - size)
        tracks.append(tr)

    video = np.repeat(bg[:, None], f, axis=1)
    flow = np.zeros((2, f, h, w))
    cover = np.zeros((f, h, w), dtype=bool)
    scale = float(max(h, w))
    for tr in tracks:
        s = tr.size
        for t in range(f):
            x, y = tr.xs[t], tr.ys[t]
            video[:, t, y : y + s, x : x + s] = tr.color[:, None, None]
            cover[t, y : y + s, x : x + s] = True
            if t > 0:
                flow[0, t, y : y + s, x : x + s] = (x - tr.xs[t - 1]) / scale
                flow[1, t, y : y + s, x : x + s] = (y - tr.ys[t - 1]) / scale
    kt, kh, kw = patch.tubelet
    gt, gh, gw = patch.grid
    motion = cover.reshape(gt, kt, gh, kh, gw, kw).any(axis=(1, 3, 5))
    return Scene(video, flow, motion, tracks)


def direction_clip(
    seed: int,
    frames: int = 16,
    height: int = 64,
    width: int = 64,
    speed: int = 2,
    sprites: int = 1,
    background: str = "noise",
) -> tuple[Scene, int]:
    """Two-class motion-direction sample: label 1 for rightward, 0 for leftward.

    Every sprite moves horizontally in the labelled direction without touching
    a border, so the sign of the mean horizontal flow always equals the label.
    """
    rng = rngmod.stream(seed, "direction")
    label = int(rng.integers(0, 2))
    vx = speed if label else -speed
    for attempt in range(1000):
        spec = SceneSpec(
            frames=frames,
            height=height,
            width=width,
            sprites=sprites,
            velocity=(vx, 0),
            background=background,
            seed=seed * 1000 + attempt,
        )
        scene = gen_moving_sprites(spec)
        if all((np.diff(tr.xs) == vx).all() for tr in scene.tracks):
            return scene, label
    raise ValueError("could not place a border-free track; lower the speed or frame count")


def flow_direction(flow: np.ndarray) -> int:
    """Hand-coded oracle classifier: sign of the mean horizontal flow."""
    return int(flow[0].mean() > 0)
