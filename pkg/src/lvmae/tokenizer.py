"""Adaptive FSQ video tokenizer with a learned token scorer.

Topology: a strided 3D-CNN encoder produces continuous latents ``z`` on the
token grid; a two-layer CNN scorer embeds the video on the same grid and
scores each token by the feature distance to the same location one latent
frame earlier; a top-k selection keeps the highest-scoring tokens (all of
latent frame 0 during training); kept latents are FSQ-quantized, the rest
are zeroed, and a transposed-conv decoder reconstructs the pixels.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .masking import round_half_up
from .numerics import Adam, Schedule, Tape, Tensor, apply_op, lr_at
from .numerics import checkpoint as ckpt
from .numerics import rng as rngmod
from .numerics import tensor as T
from .numerics.tensor import NonFiniteError

PAPER_LEVELS = (8, 8, 4, 4, 4, 4, 4, 4)
LVTK_MAGIC = b"LVTK"


# FSQ -----------------------------------------------------------------------------


@dataclass(frozen=True)
class FsqSpec:
    levels: tuple[int, ...] = PAPER_LEVELS

    def __post_init__(self) -> None:
        if not self.levels or any(int(l) < 2 for l in self.levels):
            raise ValueError(f"every FSQ level must be >= 2, got {self.levels}")

    @property
    def dim(self) -> int:
        return len(self.levels)

    @property
    def codebook_size(self) -> int:
        return math.prod(self.levels)

    @property
    def half(self) -> np.ndarray:
        return (np.asarray(self.levels, dtype=np.float64) - 1.0) / 2.0

    def lattice(self, i: int) -> np.ndarray:
        h = self.half[i]
        return (np.arange(self.levels[i]) - h) / h


def _squash(z: np.ndarray, half: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Identity on [-1, 1] with a tanh tail that stays inside the extreme rounding cell.

    Lattice points are fixed points, which makes quantization idempotent.
    Returns the squashed value and its derivative.
    """
    a = np.abs(z)
    c = 0.5 / half
    th = np.tanh(np.maximum(a - 1.0, 0.0))
    inside = a <= 1.0
    s = np.where(inside, z, np.sign(z) * (1.0 + c * th))
    ds = np.where(inside, 1.0, c * (1.0 - th * th))
    return s, ds


def _round_lattice(u: np.ndarray, half: np.ndarray) -> np.ndarray:
    # even level counts sit on half-integers; exact ties go to the + side
    offset = np.where(np.asarray(half) % 1.0 != 0.0, 0.5, 0.0)
    q = np.floor(u - offset + 0.5) + offset
    return np.clip(q, -half, half)


def fsq_quantize_array(z: np.ndarray, spec: FsqSpec) -> np.ndarray:
    if not np.isfinite(z).all():
        raise NonFiniteError("non-finite FSQ input")
    half = spec.half
    s, _ = _squash(z, half)
    return _round_lattice(s * half, half) / half


def fsq_quantize(z: Tensor, spec: FsqSpec) -> Tensor:
    """Quantize the last axis; straight-through gradient on the rounding step."""
    if z.shape[-1] != spec.dim:
        raise ValueError(f"latent dim {z.shape[-1]} != FSQ dim {spec.dim}")
    half = spec.half
    if not np.isfinite(z.data).all():
        raise NonFiniteError("non-finite FSQ input")
    s, ds = _squash(z.data, half)
    out = _round_lattice(s * half, half) / half
    return apply_op(out, (z,), lambda g: (g * ds,))


def fsq_index(zq: np.ndarray, spec: FsqSpec) -> np.ndarray:
    """Mixed-radix code id; channel 0 is the least significant digit."""
    zq = np.asarray(zq, dtype=np.float64)
    half = spec.half
    digits_f = zq * half + half
    digits = np.rint(digits_f)
    if np.abs(digits - digits_f).max(initial=0.0) > 1e-9 or (digits < 0).any() or (
        digits > np.asarray(spec.levels) - 1
    ).any():
        raise ValueError("value is not on the FSQ lattice")
    radix = np.cumprod((1,) + tuple(spec.levels[:-1])).astype(np.int64)
    return (digits.astype(np.int64) * radix).sum(axis=-1)


def fsq_from_index(code, spec: FsqSpec) -> np.ndarray:
    code = np.asarray(code, dtype=np.int64)
    if (code < 0).any() or (code >= spec.codebook_size).any():
        raise ValueError("code id out of range")
    digits = []
    rest = code
    for L in spec.levels:
        digits.append(rest % L)
        rest = rest // L
    d = np.stack(digits, axis=-1).astype(np.float64)
    half = spec.half
    return (d - half) / half


# config and parameters ------------------------------------------------------------


@dataclass(frozen=True)
class TokenizerConfig:
    """Desk defaults: 16x64x64 clips -> 8x8x8 latent grid of 8-dim FSQ latents."""

    frames: int = 16
    height: int = 64
    width: int = 64
    patch: tuple[int, int] = (8, 8)
    channels: tuple[int, ...] = (16, 32)
    scorer_channels: int = 32
    levels: tuple[int, ...] = PAPER_LEVELS
    train_topk: int = 192
    keep_first: bool = True
    topk_includes_first: bool = False
    infer_keep: float = 0.15
    tau_scale: float = 0.1

    def __post_init__(self) -> None:
        kh, kw = self.patch
        if kh != kw or kh < 4 or kh & (kh - 1):
            raise ValueError("spatial downsample must be a square power of two >= 4")
        if len(self.channels) != int(math.log2(kh)) - 1:
            raise ValueError(f"need {int(math.log2(kh)) - 1} hidden widths for /{kh} downsampling")
        if self.frames % 2 or self.height % kh or self.width % kw:
            raise ValueError("clip dims must divide the (2, kh, kw) downsample")

    @property
    def fsq(self) -> FsqSpec:
        return FsqSpec(tuple(self.levels))

    @property
    def latent_grid(self) -> tuple[int, int, int]:
        kh, kw = self.patch
        return (self.frames // 2, self.height // kh, self.width // kw)

    @property
    def encoder_strides(self) -> list[tuple[int, int, int]]:
        n = len(self.channels) + 1
        return [(2, 2, 2)] + [(1, 2, 2)] * (n - 1)

    @property
    def scorer_strides(self) -> list[tuple[int, int, int]]:
        kh, _ = self.patch
        return [(2, kh // 2, kh // 2), (1, 2, 2)]


def init_params(cfg: TokenizerConfig, seed: int = 0) -> dict[str, Tensor]:
    r = rngmod.stream(seed, "tokenizer-init")
    widths = [3, *cfg.channels, cfg.fsq.dim]
    p: dict[str, Tensor] = {}

    def add(name, shape):
        p[name] = Tensor(rngmod.trunc_normal(r, shape), requires_grad=True, name=name)
        p[name.replace(".w", ".b")] = Tensor(np.zeros(shape[1] if name.startswith("dec") else shape[0]), True)

    for i, s in enumerate(cfg.encoder_strides):
        add(f"enc.{i}.w", (widths[i + 1], widths[i], *s))
    # decoder mirrors the encoder; conv-transpose kernels are (in, out, ...)
    n = len(cfg.encoder_strides)
    for j, i in enumerate(reversed(range(n))):
        add(f"dec.{j}.w", (widths[i + 1], widths[i], *cfg.encoder_strides[i]))
    sc = cfg.scorer_channels
    s1, s2 = cfg.scorer_strides
    add("score.0.w", (sc, 3, *s1))
    add("score.1.w", (sc, sc, *s2))
    return p


def encode(params, video: Tensor, cfg: TokenizerConfig) -> Tensor:
    """(B, 3, F, H, W) -> continuous latents (B, Dt, Dh, Dw, D)."""
    x = video
    n = len(cfg.encoder_strides)
    for i, s in enumerate(cfg.encoder_strides):
        x = T.conv3d(x, params[f"enc.{i}.w"], s, params[f"enc.{i}.b"])
        if i < n - 1:
            x = T.gelu(x)
    return T.transpose(x, (0, 2, 3, 4, 1))


def decode(params, latents: Tensor, cfg: TokenizerConfig) -> Tensor:
    """(B, Dt, Dh, Dw, D) -> reconstructed video (B, 3, F, H, W) in [0, 1]."""
    x = T.transpose(latents, (0, 4, 1, 2, 3))
    strides = list(reversed(cfg.encoder_strides))
    for j, s in enumerate(strides):
        x = T.conv_transpose3d(x, params[f"dec.{j}.w"], s, params[f"dec.{j}.b"])
        x = T.gelu(x) if j < len(strides) - 1 else T.sigmoid(x)
    return x


def scorer_features(params, video: Tensor, cfg: TokenizerConfig) -> Tensor:
    s1, s2 = cfg.scorer_strides
    x = T.gelu(T.conv3d(video, params["score.0.w"], s1, params["score.0.b"]))
    x = T.conv3d(x, params["score.1.w"], s2, params["score.1.b"])
    return T.transpose(x, (0, 2, 3, 4, 1))


def score_tokens(params, video: Tensor, cfg: TokenizerConfig) -> Tensor:
    """Distances for latent frames 1..Dt-1: (B, Dt - 1, Dh, Dw)."""
    f = scorer_features(params, video, cfg)
    if f.shape[1:4] != cfg.latent_grid:
        raise ValueError(f"scorer grid {f.shape[1:4]} != latent grid {cfg.latent_grid}")
    return T.l2norm(f[:, 1:] - f[:, :-1])


def importance_map(scores: np.ndarray, mode: str) -> np.ndarray:
    """Prepend latent frame 0: +inf (keep-all sentinel) in train mode, 0 in infer mode."""
    first = np.inf if mode == "train" else 0.0
    pad = np.full(scores.shape[:-3] + (1,) + scores.shape[-2:], first)
    return np.concatenate([pad, scores], axis=-3)


# selection ---------------------------------------------------------------------------


def _topk_flat(scores: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-scores, kind="stable")
    mask = np.zeros(scores.size, dtype=bool)
    mask[order[:k]] = True
    return mask


def select_topk(scores: np.ndarray, k: int, mode: str = "infer", tau_scale: float = 0.1):
    """Hard top-k over one importance map (Dt, Dh, Dw).

    Train mode keeps every latent-frame-0 token and ``k`` more from the
    remaining frames; infer mode is a plain top-k. Returns the boolean mask
    and sigmoid-relaxed weights around the k-th score.
    """
    s = np.asarray(scores, dtype=np.float64)
    if mode == "train":
        elig = s[1:].reshape(-1)
        if not 0 < k <= elig.size:
            raise ValueError(f"k={k} outside (0, {elig.size}]")
        m = _topk_flat(elig, k)
        mask = np.concatenate([np.ones(s[0].size, bool), m]).reshape(s.shape)
        w = _soft_weights(elig, k, tau_scale)
        weights = np.concatenate([np.ones(s[0].size), w]).reshape(s.shape)
    elif mode == "infer":
        flat = s.reshape(-1)
        if not 0 < k <= flat.size:
            raise ValueError(f"k={k} outside (0, {flat.size}]")
        mask = _topk_flat(flat, k).reshape(s.shape)
        weights = _soft_weights(flat, k, tau_scale).reshape(s.shape)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return mask, weights


def _soft_weights(flat: np.ndarray, k: int, tau_scale: float) -> np.ndarray:
    kth = np.sort(flat)[::-1][k - 1]
    tau = tau_scale * flat.std()
    if tau == 0.0:
        return (flat >= kth).astype(np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * (flat - kth) / tau))


def infer_keep_count(n_tokens: int, fraction: float) -> int:
    return round_half_up(fraction * n_tokens)


def topk_mask(scores: Tensor, k: int, tau_scale: float = 0.1) -> Tensor:
    """Per-sample hard top-k of ``scores`` (B, ...) as a 0/1 tensor.

    Backward passes the gradient through the derivative of
    sigmoid((s - s_k) / tau), tau = tau_scale * std of the batch scores.
    """
    s = scores.data
    b = s.shape[0]
    flat = s.reshape(b, -1)
    if not 0 < k <= flat.shape[1]:
        raise ValueError(f"k={k} outside (0, {flat.shape[1]}]")
    order = np.argsort(-flat, axis=1, kind="stable")
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, order[:, :k], 1.0, axis=1)
    kth = np.take_along_axis(flat, order[:, k - 1 : k], axis=1)
    tau = tau_scale * flat.std()

    def fn(g):
        if tau == 0.0:
            return (np.zeros_like(s),)
        sig = 0.5 * (1.0 + np.tanh(0.5 * (flat - kth) / tau))
        return ((g.reshape(b, -1) * sig * (1.0 - sig) / tau).reshape(s.shape),)

    return apply_op(mask.reshape(s.shape), (scores,), fn)


# training forward ------------------------------------------------------------------------


class TokenizerOutput(NamedTuple):
    loss: Tensor
    recon: Tensor
    z: Tensor
    zq: Tensor
    scores: Tensor
    mask: Tensor


def forward(params, video, cfg: TokenizerConfig, k: int | None = None) -> TokenizerOutput:
    """Training-mode pass: encode, score, select, quantize, zero, decode, pixel MSE."""
    x = video if isinstance(video, Tensor) else Tensor(video)
    if x.ndim == 4:
        x = T.reshape(x, (1,) + x.shape)
    if x.shape[2:] != (cfg.frames, cfg.height, cfg.width):
        raise ValueError(f"batch dims {x.shape} do not match config")
    z = encode(params, x, cfg)
    scores = score_tokens(params, x, cfg)
    kk = cfg.train_topk if k is None else k
    if cfg.keep_first:
        if cfg.topk_includes_first:
            kk -= scores.shape[2] * scores.shape[3]
        rest = topk_mask(scores, kk, cfg.tau_scale)
        first = Tensor(np.ones((x.shape[0], 1) + scores.shape[2:]))
        mask = T.concat([first, rest], axis=1)
    else:
        zero = T.mul(scores[:, :1], 0.0)
        mask = topk_mask(T.concat([zero, scores], axis=1), kk, cfg.tau_scale)
    zq = fsq_quantize(z, cfg.fsq)
    kept = T.mul(zq, T.reshape(mask, mask.shape + (1,)))
    recon = decode(params, kept, cfg)
    loss = T.mean((recon - x) ** 2.0)
    return TokenizerOutput(loss, recon, z, zq, scores, mask)


@dataclass
class TokenizerTrainer:
    cfg: TokenizerConfig
    params: dict[str, Tensor]
    schedule: Schedule
    opt: Adam
    step_count: int = 0

    @classmethod
    def create(cls, cfg: TokenizerConfig, schedule: Schedule, seed: int = 0, beta1=0.0, beta2=0.99):
        params = init_params(cfg, seed)
        return cls(cfg, params, schedule, Adam(params, beta1, beta2, weight_decay=0.0))

    def step(self, batch: np.ndarray) -> float:
        return tokenizer_train_step(batch, self)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        out.update(self.opt.state_arrays())
        out["meta/step"] = np.asarray(float(self.step_count))
        return out

    def load_state_arrays(self, arrays) -> None:
        for k, v in self.params.items():
            v.data = np.array(arrays[f"param/{k}"], dtype=np.float64)
        self.opt.load_state_arrays(arrays)
        self.step_count = int(arrays["meta/step"])


def tokenizer_train_step(batch: np.ndarray, trainer: TokenizerTrainer) -> float:
    """One joint Adam step on encoder, decoder and scorer; aborts on a non-finite loss."""
    with Tape() as tape:
        out = forward(trainer.params, Tensor(batch), trainer.cfg)
    loss = float(out.loss.data)
    if not math.isfinite(loss):
        raise NonFiniteError(f"tokenizer loss is {loss}")
    tape.backward(out.loss, trainer.params.values())
    step = min(trainer.step_count + 1, trainer.schedule.total_steps)
    trainer.opt.step(lr_at(step, trainer.schedule))
    trainer.step_count += 1
    return loss


def save_tokenizer(path, cfg: TokenizerConfig, params) -> None:
    arrays = {f"param/{k}": v.data for k, v in params.items()}
    arrays["meta/levels"] = np.asarray(cfg.levels, dtype=np.float64)
    ckpt.save(path, arrays)


def load_tokenizer_params(path, cfg: TokenizerConfig) -> dict[str, Tensor]:
    arrays = ckpt.load(path)
    params = init_params(cfg)
    for k, v in params.items():
        v.data = np.array(arrays[f"param/{k}"], dtype=np.float64)
        v.requires_grad = False
    return params


# frozen inference ---------------------------------------------------------------------------


@dataclass
class LongTokens:
    z: np.ndarray  # (Gt, Gh, Gw, D) continuous latents
    zq: np.ndarray  # quantized latents, the MAE regression targets
    scores: np.ndarray  # (Gt, Gh, Gw) importance, 0 on each window's first latent frame
    selected: np.ndarray  # (Gt, Gh, Gw) infer-mode top-k over the whole duration
    padded: int = 0  # frames appended by repeating the last frame


def tokenize_long_video(video: np.ndarray, params, cfg: TokenizerConfig, keep: float | None = None) -> LongTokens:
    """Slide a non-overlapping ``cfg.frames`` window over time and concatenate."""
    if video.ndim != 4 or video.shape[1] == 0:
        raise ValueError("empty video")
    c, f, h, w = video.shape
    win = cfg.frames
    pad = (-f) % win
    if pad:
        video = np.concatenate([video, np.repeat(video[:, -1:], pad, axis=1)], axis=1)
    n_win = video.shape[1] // win
    wcfg = TokenizerConfig(**{**cfg.__dict__, "height": h, "width": w})
    batch = video.reshape(c, n_win, win, h, w).transpose(1, 0, 2, 3, 4)
    x = Tensor(batch)
    z = encode(params, x, wcfg).data
    s = importance_map(score_tokens(params, x, wcfg).data, "infer")
    zq = fsq_quantize_array(z, wcfg.fsq)
    gt = n_win * z.shape[1]
    z = z.reshape((gt,) + z.shape[2:])
    zq = zq.reshape(z.shape)
    s = s.reshape((gt,) + s.shape[2:])
    k = infer_keep_count(s.size, cfg.infer_keep if keep is None else keep)
    sel, _ = select_topk(s, k, "infer")
    return LongTokens(z, zq, s, sel, pad)


def encode_tokens(lt: LongTokens) -> bytes:
    """``LVTK`` | grid u32x3 | D u32 | zq f64 | scores f64 | selection bits (LSB first)."""
    gt, gh, gw, d = lt.zq.shape
    return b"".join(
        [
            LVTK_MAGIC,
            struct.pack("<4I", gt, gh, gw, d),
            np.ascontiguousarray(lt.zq, dtype="<f8").tobytes(),
            np.ascontiguousarray(lt.scores, dtype="<f8").tobytes(),
            np.packbits(lt.selected.reshape(-1), bitorder="little").tobytes(),
        ]
    )


def decode_tokens(buf: bytes) -> LongTokens:
    if buf[:4] != LVTK_MAGIC:
        raise ValueError("bad LVTK magic")
    gt, gh, gw, d = struct.unpack_from("<4I", buf, 4)
    n = gt * gh * gw
    pos = 20
    zq = np.frombuffer(buf, "<f8", n * d, pos).reshape(gt, gh, gw, d).astype(np.float64)
    pos += 8 * n * d
    s = np.frombuffer(buf, "<f8", n, pos).reshape(gt, gh, gw).astype(np.float64)
    pos += 8 * n
    bits = np.frombuffer(buf, np.uint8, (n + 7) // 8, pos)
    if pos + bits.size != len(buf):
        raise ValueError("LVTK length does not match header")
    sel = np.unpackbits(bits, count=n, bitorder="little").astype(bool).reshape(gt, gh, gw)
    return LongTokens(zq.copy(), zq, s, sel)


def save_tokens(lt: LongTokens, path) -> None:
    Path(path).write_bytes(encode_tokens(lt))


def load_tokens(path) -> LongTokens:
    return decode_tokens(Path(path).read_bytes())
