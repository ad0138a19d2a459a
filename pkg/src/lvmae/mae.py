"""Dual-masked video MAE: tubelet embedding, ViT encoder over visible tokens,
decoder over encoded tokens plus [MASK] tokens at the decoder-selected
positions, regression losses, fine-tuning heads and multi-crop evaluation.

Token sequences are batched as (B, n, d). Every sample of a batch must carry
the same visible and selected counts, which all mask strategies guarantee for
a fixed grid and budget.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import masking as M
from .numerics import Adam, Schedule, Tape, Tensor, lr_at
from .numerics import checkpoint as ckpt
from .numerics import rng as rngmod
from .numerics import tensor as T
from .numerics.tensor import NonFiniteError
from .video import PatchSpec, patch_grid, patchify

TARGETS = ("fsq", "rgb")
HEADS = ("mean", "cls")


@dataclass(frozen=True)
class MaeConfig:
    """Desk defaults; ``frames`` only fixes the pre-training clip length."""

    frames: int = 16
    height: int = 64
    width: int = 64
    tubelet: tuple[int, int, int] = (2, 8, 8)
    dim: int = 64
    enc_layers: int = 4
    enc_heads: int = 4
    mlp_ratio: int = 4
    dec_dim: int = 64
    dec_layers: int = 2
    dec_heads: int = 4
    dec_mlp_ratio: int = 4
    target: str = "fsq"
    fsq_dim: int = 8

    def __post_init__(self) -> None:
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        if self.dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ValueError("heads must divide the model width")
        if self.dec_dim > self.dim:
            raise ValueError("decoder width must not exceed encoder width")
        if self.dim % 2 or self.dec_dim % 2 or self.dim < 6 or self.dec_dim < 6:
            raise ValueError("widths must be even and >= 6 for the 3D sin-cos encoding")
        patch_grid(self.frames, self.height, self.width, self.tubelet)

    @property
    def patch(self) -> PatchSpec:
        return patch_grid(self.frames, self.height, self.width, self.tubelet)

    @property
    def patch_dim(self) -> int:
        kt, kh, kw = self.tubelet
        return 3 * kt * kh * kw

    @property
    def target_dim(self) -> int:
        return self.fsq_dim if self.target == "fsq" else self.patch_dim


# positional encoding -----------------------------------------------------------------


def _sincos_1d(pos: np.ndarray, dim: int) -> np.ndarray:
    omega = 1.0 / 10000.0 ** (np.arange(dim // 2) / (dim / 2.0))
    ang = pos[:, None] * omega[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@lru_cache(maxsize=32)
def _sincos_cached(grid: tuple[int, int, int], dim: int) -> np.ndarray:
    gt, gh, gw = grid
    ds = 2 * (dim // 6)
    dt = dim - 2 * ds
    t, h, w = np.meshgrid(np.arange(gt), np.arange(gh), np.arange(gw), indexing="ij")
    pe = np.concatenate(
        [
            _sincos_1d(t.reshape(-1).astype(np.float64), dt),
            _sincos_1d(h.reshape(-1).astype(np.float64), ds),
            _sincos_1d(w.reshape(-1).astype(np.float64), ds),
        ],
        axis=1,
    )
    pe.setflags(write=False)
    return pe


def sincos_3d(grid, dim: int) -> np.ndarray:
    """Fixed (N, dim) table in raster order: temporal, height and width blocks concatenated.

    The two spatial blocks get ``2 * (dim // 6)`` channels each; the rest go to time.
    """
    return _sincos_cached(tuple(int(g) for g in grid), int(dim))


# parameters ----------------------------------------------------------------------------


def _block_shapes(prefix: str, d: int, r: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.ln1.g": (d,),
        f"{prefix}.ln1.b": (d,),
        f"{prefix}.qkv.w": (d, 3 * d),
        f"{prefix}.qkv.b": (3 * d,),
        f"{prefix}.proj.w": (d, d),
        f"{prefix}.proj.b": (d,),
        f"{prefix}.ln2.g": (d,),
        f"{prefix}.ln2.b": (d,),
        f"{prefix}.fc1.w": (d, r * d),
        f"{prefix}.fc1.b": (r * d,),
        f"{prefix}.fc2.w": (r * d, d),
        f"{prefix}.fc2.b": (d,),
    }


def _xavier_uniform(rng, shape) -> np.ndarray:
    # (in, out) matrices; the patch embedding (d, 3, kt, kh, kw) is a linear map of the flattened tubelet
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        fan_in, fan_out = int(np.prod(shape[1:])), shape[0]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _materialize(shapes: dict[str, tuple[int, ...]], rng) -> dict[str, Tensor]:
    """LayerNorm gains 1, biases 0, weight matrices xavier-uniform, tokens and the class head N(0, 0.02)."""
    out = {}
    for name, shape in shapes.items():
        if name.endswith(".g"):
            data = np.ones(shape)
        elif name.endswith(".b"):
            data = np.zeros(shape)
        elif name.endswith(".w") and name != "head.w":
            data = _xavier_uniform(rng, shape)
        else:
            data = rngmod.trunc_normal(rng, shape)
        out[name] = Tensor(data, requires_grad=True, name=name)
    return out


def encoder_shapes(cfg: MaeConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.dim
    shapes = {"embed.w": (d, 3, *cfg.tubelet), "embed.b": (d,)}
    for i in range(cfg.enc_layers):
        shapes.update(_block_shapes(f"enc.{i}", d, cfg.mlp_ratio))
    shapes.update({"enc.norm.g": (d,), "enc.norm.b": (d,)})
    return shapes


def decoder_shapes(cfg: MaeConfig) -> dict[str, tuple[int, ...]]:
    d, dd = cfg.dim, cfg.dec_dim
    shapes = {"dec.proj.w": (d, dd), "dec.proj.b": (dd,), "dec.mask_token": (dd,)}
    for i in range(cfg.dec_layers):
        shapes.update(_block_shapes(f"dec.{i}", dd, cfg.dec_mlp_ratio))
    shapes.update(
        {
            "dec.norm.g": (dd,),
            "dec.norm.b": (dd,),
            "dec.head.w": (dd, cfg.target_dim),
            "dec.head.b": (cfg.target_dim,),
        }
    )
    return shapes


def init_params(cfg: MaeConfig, seed: int = 0) -> dict[str, Tensor]:
    """Encoder and decoder parameters for pre-training."""
    shapes = {**encoder_shapes(cfg), **decoder_shapes(cfg)}
    return _materialize(shapes, rngmod.stream(seed, "mae-init"))


# transformer ---------------------------------------------------------------------------


def attention(x: Tensor, p, prefix: str, heads: int) -> Tensor:
    b, n, d = x.shape
    dh = d // heads
    qkv = T.linear(x, p[f"{prefix}.qkv.w"], p[f"{prefix}.qkv.b"])
    qkv = T.transpose(T.reshape(qkv, (b, n, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = T.softmax(T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh)))
    out = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, n, d))
    return T.linear(out, p[f"{prefix}.proj.w"], p[f"{prefix}.proj.b"])


def block(x: Tensor, p, prefix: str, heads: int) -> Tensor:
    """Pre-norm transformer block with full attention."""
    h = T.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    x = x + attention(h, p, prefix, heads)
    h = T.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h = T.gelu(T.linear(h, p[f"{prefix}.fc1.w"], p[f"{prefix}.fc1.b"]))
    return x + T.linear(h, p[f"{prefix}.fc2.w"], p[f"{prefix}.fc2.b"])


def patchify_embed(video, cfg: MaeConfig, params) -> Tensor:
    """(B, 3, F, H, W) -> (B, N, d) embeddings in raster order, positional encoding added."""
    x = video if isinstance(video, Tensor) else Tensor(video)
    if x.ndim == 4:
        x = T.reshape(x, (1,) + x.shape)
    _, _, f, h, w = x.shape
    patch = patch_grid(f, h, w, cfg.tubelet)
    e = T.conv3d(x, params["embed.w"], cfg.tubelet, params["embed.b"])
    b, d = e.shape[:2]
    e = T.transpose(T.reshape(e, (b, d, patch.n_tokens)), (0, 2, 1))
    return e + Tensor(sincos_3d(patch.grid, d))


def _check_idx(idx, n_tokens: int, what: str) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 2:
        raise ValueError(f"{what} indices must be (B, n)")
    if idx.size and (idx.min() < 0 or idx.max() >= n_tokens):
        raise ValueError(f"{what} index out of range")
    return idx


def encode_tokens(tokens: Tensor, visible_idx, cfg: MaeConfig, params, prefix: str = "enc") -> Tensor:
    """Run the encoder over the tokens at ``visible_idx`` (B, Ne) only."""
    vis = _check_idx(visible_idx, tokens.shape[1], "visible")
    if vis.shape[1] < 1:
        raise ValueError("encoder needs at least one visible token")
    x = T.gather(tokens, vis)
    for i in range(cfg.enc_layers):
        x = block(x, params, f"{prefix}.{i}", cfg.enc_heads)
    return T.layer_norm(x, params[f"{prefix}.norm.g"], params[f"{prefix}.norm.b"])


def encode_visible(video, visible_idx, cfg: MaeConfig, params) -> Tensor:
    return encode_tokens(patchify_embed(video, cfg, params), visible_idx, cfg, params)


def decode_selected(z: Tensor, visible_idx, selected_idx, grid, cfg: MaeConfig, params) -> Tensor:
    """Predictions (B, Nd, target_dim) at ``selected_idx``, in the order given."""
    n = int(np.prod(grid))
    vis = _check_idx(visible_idx, n, "visible")
    sel = _check_idx(selected_idx, n, "selected")
    b = vis.shape[0]
    if sel.shape[1] == 0:
        return Tensor(np.zeros((b, 0, cfg.target_dim)))
    for i in range(b):
        if np.intersect1d(vis[i], sel[i]).size:
            raise ValueError("decoder-selected positions overlap encoder-visible ones")
    pe = sincos_3d(grid, cfg.dec_dim)
    y = T.linear(z, params["dec.proj.w"], params["dec.proj.b"]) + Tensor(pe[vis])
    m = params["dec.mask_token"] + Tensor(pe[sel])
    x = T.concat([y, m], axis=1)
    for i in range(cfg.dec_layers):
        x = block(x, params, f"dec.{i}", cfg.dec_heads)
    x = T.layer_norm(x, params["dec.norm.g"], params["dec.norm.b"])
    x = x[:, vis.shape[1] :]
    return T.linear(x, params["dec.head.w"], params["dec.head.b"])


def mae_loss(pred: Tensor, targets, selected_idx) -> Tensor:
    """Mean squared error over decoder-selected tokens and target channels.

    ``targets`` is the full (B, N, target_dim) volume; only the selected rows
    enter the loss, so every other row (encoder-visible ones included) has a
    zero gradient.
    """
    t = targets if isinstance(targets, Tensor) else Tensor(targets)
    sel = _check_idx(selected_idx, t.shape[1], "selected")
    if pred.shape[:2] != sel.shape or pred.shape[2] != t.shape[2]:
        raise ValueError(f"prediction {pred.shape} does not match selection {sel.shape} / targets {t.shape}")
    if sel.shape[1] == 0:
        return Tensor(0.0)
    diff = pred - T.gather(t, sel)
    return T.mean(diff * diff)


# pre-training ----------------------------------------------------------------------------


def rgb_targets(videos: np.ndarray, cfg: MaeConfig) -> np.ndarray:
    """Raw pixel patches (B, N, 3*kt*kh*kw), no per-patch normalization."""
    _, _, f, h, w = videos.shape
    patch = patch_grid(f, h, w, cfg.tubelet)
    return np.stack([patchify(v, patch) for v in videos])


@dataclass
class MaskBatch:
    grid: tuple[int, int, int]
    masks: list[M.MaskSet]

    @property
    def visible_idx(self) -> np.ndarray:
        return np.stack([m.visible_idx for m in self.masks])

    @property
    def selected_idx(self) -> np.ndarray:
        return np.stack([m.selected_idx for m in self.masks])


def make_masks(
    strategy: str,
    grid,
    budget: M.BudgetSpec,
    seed: int,
    step: int,
    saliency: Sequence[M.SaliencyMap | None] | None = None,
    batch: int = 1,
    uniform_step: int = 7,
) -> MaskBatch:
    """Per-sample masks from streams keyed by (seed, step, sample).

    Encoder masks depend only on that key, so every strategy sees the same
    encoder masks for the same step.
    """
    grid = tuple(int(g) for g in grid)
    masks = []
    for i in range(batch):
        sal = saliency[i] if saliency is not None else None
        masks.append(
            M.build_masks(
                strategy,
                grid,
                budget,
                rngmod.stream(seed, "encoder-mask", step, i),
                rngmod.stream(seed, "decoder-mask", step, i),
                sal,
                uniform_step,
            )
        )
    counts = {(m.n_enc, m.n_dec) for m in masks}
    if len(counts) != 1:
        raise M.BudgetError(f"mask counts differ across the batch: {sorted(counts)}")
    return MaskBatch(grid, masks)


def pretrain_loss(params, videos, targets, masks: MaskBatch, cfg: MaeConfig) -> Tensor:
    z = encode_visible(videos, masks.visible_idx, cfg, params)
    pred = decode_selected(z, masks.visible_idx, masks.selected_idx, masks.grid, cfg, params)
    return mae_loss(pred, targets, masks.selected_idx)


@dataclass
class Pretrainer:
    cfg: MaeConfig
    params: dict[str, Tensor]
    opt: Adam
    schedule: Schedule
    step_count: int = 0

    @classmethod
    def create(cls, cfg: MaeConfig, schedule: Schedule, seed: int = 0, weight_decay: float = 0.05):
        params = init_params(cfg, seed)
        return cls(cfg, params, Adam(params, 0.9, 0.95, weight_decay=weight_decay), schedule)

    def step(self, videos: np.ndarray, targets: np.ndarray, masks: MaskBatch) -> float:
        return pretrain_step(self, videos, targets, masks)

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


def pretrain_step(trainer: Pretrainer, videos: np.ndarray, targets: np.ndarray, masks: MaskBatch) -> float:
    """Forward, backward and one Adam step; aborts on a non-finite loss.

    With no selected tokens there is nothing to learn and the parameters are
    left untouched.
    """
    with Tape() as tape:
        loss = pretrain_loss(trainer.params, videos, targets, masks, trainer.cfg)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NonFiniteError(f"MAE loss is {value}")
    trainer.step_count += 1
    if masks.selected_idx.shape[1] == 0:
        return value
    tape.backward(loss, trainer.params.values())
    trainer.opt.step(lr_at(min(trainer.step_count, trainer.schedule.total_steps), trainer.schedule))
    return value


# fine-tuning -------------------------------------------------------------------------------


def head_shapes(cfg: MaeConfig, n_classes: int, head: str) -> dict[str, tuple[int, ...]]:
    d = cfg.dim
    shapes: dict[str, tuple[int, ...]] = {}
    if head == "cls":
        shapes.update(
            {
                "cls.query": (d,),
                "cls.ln.g": (d,),
                "cls.ln.b": (d,),
                "cls.q.w": (d, d),
                "cls.kv.w": (d, 2 * d),
                "cls.proj.w": (d, d),
                "cls.proj.b": (d,),
            }
        )
    shapes.update({"head.ln.g": (d,), "head.ln.b": (d,), "head.w": (d, n_classes), "head.b": (n_classes,)})
    return shapes


def init_classifier(cfg: MaeConfig, n_classes: int, head: str = "mean", encoder=None, seed: int = 0):
    """Encoder parameters (copied from ``encoder`` when given) plus a fresh head."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if head not in HEADS:
        raise ValueError(f"head must be one of {HEADS}")
    rng = rngmod.stream(seed, "classifier-init")
    params = _materialize(encoder_shapes(cfg), rng)
    if encoder is not None:
        for k in params:
            src = encoder[k]
            params[k].data = np.array(src.data if isinstance(src, Tensor) else src, dtype=np.float64)
    params.update(_materialize(head_shapes(cfg, n_classes, head), rng))
    return params


def class_attention(x: Tensor, p, heads: int) -> Tensor:
    """One learned query attending over all tokens: (B, n, d) -> (B, d)."""
    b, n, d = x.shape
    dh = d // heads
    h = T.layer_norm(x, p["cls.ln.g"], p["cls.ln.b"])
    q = T.reshape(T.linear(T.reshape(p["cls.query"], (1, d)), p["cls.q.w"]), (1, heads, 1, dh))
    kv = T.transpose(T.reshape(T.linear(h, p["cls.kv.w"]), (b, n, 2, heads, dh)), (2, 0, 3, 1, 4))
    att = T.softmax(T.mul(T.matmul(q, T.swapaxes(kv[0], -1, -2)), 1.0 / math.sqrt(dh)))
    out = T.reshape(T.matmul(att, kv[1]), (b, d))
    return p["cls.query"] + T.linear(out, p["cls.proj.w"], p["cls.proj.b"])


def classify(params, videos, cfg: MaeConfig, keep_idx=None, head: str = "mean") -> Tensor:
    """Logits (B, C). ``keep_idx`` (B, n) restricts the encoder to a token subset."""
    tokens = patchify_embed(videos, cfg, params)
    b, n = tokens.shape[:2]
    idx = np.tile(np.arange(n), (b, 1)) if keep_idx is None else keep_idx
    x = encode_tokens(tokens, idx, cfg, params)
    pooled = T.mean(x, axis=1) if head == "mean" else class_attention(x, params, cfg.enc_heads)
    pooled = T.layer_norm(pooled, params["head.ln.g"], params["head.ln.b"])
    return T.linear(pooled, params["head.w"], params["head.b"])


def cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    q = np.full((b, c), smoothing / c)
    q[np.arange(b), labels] += 1.0 - smoothing
    return T.neg(T.mean(T.tsum(T.log_softmax(logits) * Tensor(q), axis=1)))


def drop_tokens(grid, drop_ratio: float, rng, batch: int) -> np.ndarray:
    """Kept-token indices (B, n) under a tube pattern; ratio 0 keeps everything."""
    n = int(np.prod(grid))
    if drop_ratio == 0.0:
        return np.tile(np.arange(n), (batch, 1))
    return np.stack([np.flatnonzero(~M.make_tube_mask(grid, drop_ratio, rng)) for _ in range(batch)])


@dataclass
class Finetuner:
    cfg: MaeConfig
    params: dict[str, Tensor]
    opt: Adam
    schedule: Schedule
    head: str = "mean"
    drop_ratio: float = 0.0
    smoothing: float = 0.2
    seed: int = 0
    step_count: int = 0

    @classmethod
    def create(
        cls,
        cfg: MaeConfig,
        n_classes: int,
        schedule: Schedule,
        encoder=None,
        head: str = "mean",
        drop_ratio: float = 0.0,
        smoothing: float = 0.2,
        seed: int = 0,
        weight_decay: float = 0.05,
    ):
        params = init_classifier(cfg, n_classes, head, encoder, seed)
        opt = Adam(params, 0.9, 0.999, weight_decay=weight_decay)
        return cls(cfg, params, opt, schedule, head, drop_ratio, smoothing, seed)

    def loss(self, videos, labels, keep_idx=None) -> Tensor:
        return cross_entropy(classify(self.params, videos, self.cfg, keep_idx, self.head), labels, self.smoothing)

    def step(self, videos: np.ndarray, labels) -> float:
        _, _, f, h, w = videos.shape
        grid = patch_grid(f, h, w, self.cfg.tubelet).grid
        keep = drop_tokens(grid, self.drop_ratio, rngmod.stream(self.seed, "drop", self.step_count), len(videos))
        with Tape() as tape:
            loss = self.loss(videos, labels, keep)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFiniteError(f"fine-tune loss is {value}")
        tape.backward(loss, self.params.values())
        self.step_count += 1
        self.opt.step(lr_at(min(self.step_count, self.schedule.total_steps), self.schedule))
        return value

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


def crop_starts(frames: int, crop_len: int, n_crops: int) -> list[int]:
    """Evenly spaced temporal crop starts; a single crop is centered."""
    if crop_len > frames:
        raise ValueError(f"crop of {crop_len} frames is longer than the {frames}-frame video")
    if n_crops < 1:
        raise ValueError("need at least one crop")
    if n_crops == 1:
        return [(frames - crop_len) // 2]
    return [M.round_half_up(i * (frames - crop_len) / (n_crops - 1)) for i in range(n_crops)]


def multi_crop_eval(videos: np.ndarray, params, cfg: MaeConfig, crop_len: int, n_crops: int, head: str = "mean"):
    """Average logits over ``n_crops`` evenly spaced temporal crops of (B, 3, F, H, W)."""
    starts = crop_starts(videos.shape[2], crop_len, n_crops)
    logits = [classify(params, videos[:, :, s : s + crop_len], cfg, head=head).data for s in starts]
    return np.mean(logits, axis=0)


def save_params(path, params, extra: dict[str, np.ndarray] | None = None) -> None:
    arrays = {f"param/{k}": v.data for k, v in params.items()}
    arrays.update(extra or {})
    ckpt.save(path, arrays)


def load_params(path) -> dict[str, Tensor]:
    return {
        k[len("param/") :]: Tensor(v, requires_grad=True, name=k[len("param/") :])
        for k, v in ckpt.load(path).items()
        if k.startswith("param/")
    }
