"""Encoder tube masks and decoder token-selection strategies.

All masks are flat boolean arrays over the token grid in (t, h, w) raster
order. ``encoder_masked`` marks tokens hidden from the encoder;
``decoder_selected`` marks tokens the decoder reconstructs, always a subset
of the encoder-masked pool.

Count rules: the encoder's visible spatial positions use round-half-up;
decoder budgets (adaptive top-k, random extras, random strategy) use floor,
which keeps every split of a budget (e.g. 15+0, 10+5, 0+15 percent) at the
same total.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .video import PatchSpec

STRATEGIES = ("none", "random", "uniform", "flow", "adaptive")
LVMK_MAGIC = b"LVMK"


class BudgetError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(round(x, 9) + 0.5))


def floor_count(x: float) -> int:
    return int(math.floor(round(x, 9)))


def _grid(grid) -> tuple[int, int, int]:
    if isinstance(grid, PatchSpec):
        return grid.grid
    gt, gh, gw = (int(g) for g in grid)
    return gt, gh, gw


@dataclass(frozen=True)
class BudgetSpec:
    rho_e: float = 0.9
    rho_d: float = 0.9
    rho_r: float = 0.05

    def __post_init__(self) -> None:
        for name in ("rho_e", "rho_d", "rho_r"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise BudgetError(f"{name}={v} outside [0, 1]")

    @property
    def token_budget(self) -> float:
        return (1.0 - self.rho_d) + self.rho_r

    def feasible(self) -> bool:
        return round(self.token_budget, 9) <= round(self.rho_e, 9)


@dataclass
class MaskSet:
    grid: tuple[int, int, int]
    encoder_masked: np.ndarray
    decoder_selected: np.ndarray
    strategy: str = "none"
    expected_nd: int | None = None
    rho_e: float = 0.0
    rho_d: float = 0.0
    rho_r: float = 0.0

    @property
    def n(self) -> int:
        gt, gh, gw = self.grid
        return gt * gh * gw

    @property
    def n_enc(self) -> int:
        return int((~self.encoder_masked).sum())

    @property
    def n_dec(self) -> int:
        return int(self.decoder_selected.sum())

    @property
    def visible_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.encoder_masked)

    @property
    def selected_idx(self) -> np.ndarray:
        return np.flatnonzero(self.decoder_selected)


@dataclass
class Report:
    ok: bool
    violations: list[str] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)


# encoder ------------------------------------------------------------------------------


def tube_visible_count(grid, rho_e: float) -> int:
    _, gh, gw = _grid(grid)
    return round_half_up((1.0 - rho_e) * gh * gw)


def make_tube_mask(grid, rho_e: float, rng: np.random.Generator) -> np.ndarray:
    """Random spatial visibility pattern replicated over every temporal slot."""
    gt, gh, gw = _grid(grid)
    if not 0.0 <= rho_e < 1.0:
        raise BudgetError(f"encoder mask ratio {rho_e} must be in [0, 1)")
    n_vis = tube_visible_count(grid, rho_e)
    if n_vis < 1:
        raise BudgetError(f"rho_e={rho_e} leaves no visible spatial position on a {gh}x{gw} grid")
    spatial = np.ones(gh * gw, dtype=bool)
    spatial[rng.choice(gh * gw, size=n_vis, replace=False)] = False
    return np.tile(spatial, gt)


# decoder -------------------------------------------------------------------------------


def decoder_none(grid, encoder_masked: np.ndarray) -> MaskSet:
    g = _grid(grid)
    sel = encoder_masked.copy()
    return MaskSet(g, encoder_masked, sel, "none", int(sel.sum()), rho_d=0.0, rho_r=0.0)


def decoder_random(grid, encoder_masked: np.ndarray, budget_fraction: float, rng) -> MaskSet:
    g = _grid(grid)
    n = encoder_masked.size
    count = floor_count(budget_fraction * n)
    pool = np.flatnonzero(encoder_masked)
    if count > pool.size:
        raise BudgetError(f"random budget {count} exceeds encoder-masked pool {pool.size}")
    sel = np.zeros(n, dtype=bool)
    sel[rng.choice(pool, size=count, replace=False)] = True
    return MaskSet(g, encoder_masked, sel, "random", count, rho_d=1.0 - budget_fraction, rho_r=0.0)


def decoder_uniform(grid, encoder_masked: np.ndarray, step: int = 7) -> MaskSet:
    """Every encoder-masked token in temporal slots 0, step, 2*step, ..."""
    if step < 1:
        raise BudgetError("uniform step must be >= 1")
    g = _grid(grid)
    gt, gh, gw = g
    slots = (np.arange(gt) % step == 0).repeat(gh * gw)
    sel = encoder_masked & slots
    return MaskSet(g, encoder_masked, sel, "uniform", int(sel.sum()))


@dataclass
class SaliencyMap:
    """Probability distribution over tokens; ``uniform_fallback`` flags a degenerate source."""

    values: np.ndarray
    uniform_fallback: bool = False

    @classmethod
    def from_scores(cls, scores: np.ndarray) -> "SaliencyMap":
        s = np.asarray(scores, dtype=np.float64).reshape(-1)
        if (s < 0).any() or not np.isfinite(s).all():
            raise ValueError("saliency scores must be finite and nonnegative")
        total = s.sum()
        if total <= 0:
            return cls(np.full(s.size, 1.0 / s.size), True)
        return cls(s / total)


def flow_saliency(flow: np.ndarray, patch: PatchSpec) -> SaliencyMap:
    """Mean |flow| over both channels and every pixel of each tubelet, normalized."""
    _, t, h, w = flow.shape
    if (t, h, w) != (patch.frames, patch.height, patch.width):
        raise ValueError(f"flow {flow.shape[1:]} does not match patch geometry")
    kt, kh, kw = patch.tubelet
    gt, gh, gw = patch.grid
    per = np.abs(flow).reshape(2, gt, kt, gh, kh, gw, kw).mean(axis=(0, 2, 4, 6))
    return SaliencyMap.from_scores(per)


def decoder_adaptive(
    grid,
    encoder_masked: np.ndarray,
    saliency: SaliencyMap | np.ndarray,
    rho_d: float,
    rho_r: float,
    rng: np.random.Generator,
) -> MaskSet:
    """Top-(1 - rho_d)N encoder-masked tokens by saliency plus rho_r N random extras.

    Ties rank by ascending flat index.
    """
    g = _grid(grid)
    s = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency, np.float64)
    n = encoder_masked.size
    if s.shape != (n,):
        raise ValueError(f"saliency has shape {s.shape}, expected ({n},)")
    if (s < 0).any() or abs(s.sum() - 1.0) > 1e-9:
        raise ValueError("saliency must be a normalized distribution")
    k = floor_count((1.0 - rho_d) * n)
    r = floor_count(rho_r * n)
    pool = np.flatnonzero(encoder_masked)
    if k + r > pool.size:
        raise BudgetError(f"adaptive budget {k}+{r} exceeds encoder-masked pool {pool.size}")
    order = pool[np.argsort(-s[pool], kind="stable")]
    sel = np.zeros(n, dtype=bool)
    sel[order[:k]] = True
    rest = order[k:]
    if r:
        sel[rng.choice(np.sort(rest), size=r, replace=False)] = True
    return MaskSet(g, encoder_masked, sel, "adaptive", k + r, rho_d=rho_d, rho_r=rho_r)


def build_masks(
    strategy: str,
    grid,
    budget: BudgetSpec,
    enc_rng: np.random.Generator,
    dec_rng: np.random.Generator,
    saliency: SaliencyMap | None = None,
    uniform_step: int = 7,
) -> MaskSet:
    """Tube encoder mask followed by the named decoder strategy."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    enc = make_tube_mask(grid, budget.rho_e, enc_rng)
    if strategy == "none":
        ms = decoder_none(grid, enc)
    elif strategy == "random":
        ms = decoder_random(grid, enc, budget.token_budget, dec_rng)
    elif strategy == "uniform":
        ms = decoder_uniform(grid, enc, uniform_step)
    else:
        if saliency is None:
            raise ValueError(f"strategy {strategy!r} needs a saliency map")
        ms = decoder_adaptive(grid, enc, saliency, budget.rho_d, budget.rho_r, dec_rng)
        ms.strategy = strategy
    ms.rho_e = budget.rho_e
    return ms


def validate(ms: MaskSet, budget: BudgetSpec | None = None) -> Report:
    v: list[str] = []
    n = ms.n
    if ms.encoder_masked.shape != (n,) or ms.decoder_selected.shape != (n,):
        v.append("shape")
        return Report(False, v)
    if (ms.decoder_selected & ~ms.encoder_masked).any():
        v.append("loss-on-visible")
    if ms.expected_nd is not None and ms.n_dec != ms.expected_nd:
        v.append("budget-count")
    gt = ms.grid[0]
    if gt > 1:
        tubes = ms.encoder_masked.reshape(gt, -1)
        if not (tubes == tubes[0]).all():
            v.append("tube-inconsistent")
    if budget is not None:
        if ms.n_enc != gt * tube_visible_count(ms.grid, budget.rho_e):
            v.append("encoder-count")
    counts = {"N": n, "Ne": ms.n_enc, "Nd": ms.n_dec}
    return Report(not v, v, counts)


# LVMK dump ---------------------------------------------------------------------------------


def encode_masks(ms: MaskSet) -> bytes:
    """``LVMK`` | grid u32x3 | enc bits | dec bits | rho_e, rho_d, rho_r f64 (LSB-first bits)."""
    gt, gh, gw = ms.grid
    return b"".join(
        [
            LVMK_MAGIC,
            struct.pack("<3I", gt, gh, gw),
            np.packbits(ms.encoder_masked, bitorder="little").tobytes(),
            np.packbits(ms.decoder_selected, bitorder="little").tobytes(),
            struct.pack("<3d", ms.rho_e, ms.rho_d, ms.rho_r),
        ]
    )


def decode_masks(buf: bytes) -> MaskSet:
    if buf[:4] != LVMK_MAGIC:
        raise ValueError("bad LVMK magic")
    gt, gh, gw = struct.unpack_from("<3I", buf, 4)
    n = gt * gh * gw
    nb = (n + 7) // 8
    if len(buf) != 16 + 2 * nb + 24:
        raise ValueError("LVMK length does not match grid")
    bits = np.frombuffer(buf, dtype=np.uint8, count=2 * nb, offset=16)
    enc = np.unpackbits(bits[:nb], count=n, bitorder="little").astype(bool)
    dec = np.unpackbits(bits[nb:], count=n, bitorder="little").astype(bool)
    rho_e, rho_d, rho_r = struct.unpack_from("<3d", buf, 16 + 2 * nb)
    return MaskSet((gt, gh, gw), enc, dec, "dump", int(dec.sum()), rho_e, rho_d, rho_r)


def save_masks(ms: MaskSet, path) -> None:
    Path(path).write_bytes(encode_masks(ms))


def load_masks(path) -> MaskSet:
    return decode_masks(Path(path).read_bytes())
