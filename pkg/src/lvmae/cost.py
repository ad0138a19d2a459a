"""Analytic FLOPs and activation-memory model of the dual-masked MAE.

FLOPs are forward-pass multiply-adds times 2, counting only matmuls and the
patch-embedding convolution (norms, softmax, biases and activations are
ignored). A transformer layer over ``n`` tokens of width ``d`` with MLP ratio
``r`` costs ``8 n d^2 + 4 n^2 d + 4 r n d^2``.

Memory is ``bytes * (n d c1 + heads n^2 c2)`` per layer, with ``c1 = 8 + 2r``
saved width-``d`` activations per token and ``c2 = 2`` copies of each
attention matrix (scores and softmax), plus parameters, gradients and the two
Adam moments. Only the ordering of the numbers is meaningful.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .masking import BudgetError, BudgetSpec, floor_count, tube_visible_count
from .video import patch_grid

CSV_COLUMNS = ("frames", "rho_d", "Ne", "Nd", "flops_total", "flops_decoder_share", "mem_bytes")
C2 = 2


@dataclass(frozen=True)
class ArchDims:
    enc_layers: int = 12
    enc_dim: int = 768
    enc_heads: int = 12
    enc_mlp_ratio: int = 4
    dec_layers: int = 4
    dec_dim: int = 384
    dec_heads: int = 4
    dec_mlp_ratio: int = 4
    target_dim: int = 8
    bytes_per_value: int = 4
    batch: int = 1

    def __post_init__(self) -> None:
        for k, v in asdict(self).items():
            if int(v) < 1:
                raise ValueError(f"{k} must be a positive integer")
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ValueError("heads must divide the widths")

    @classmethod
    def from_mae(cls, cfg, bytes_per_value: int = 8, batch: int = 1) -> "ArchDims":
        return cls(
            cfg.enc_layers,
            cfg.dim,
            cfg.enc_heads,
            cfg.mlp_ratio,
            cfg.dec_layers,
            cfg.dec_dim,
            cfg.dec_heads,
            cfg.dec_mlp_ratio,
            cfg.target_dim,
            bytes_per_value,
            batch,
        )


PAPER_DIMS = ArchDims()


@dataclass
class CostReport:
    N: int
    Ne: int
    Nd: int
    flops: dict[str, int] = field(default_factory=dict)
    memory: dict[str, int] = field(default_factory=dict)

    @property
    def flops_total(self) -> int:
        return sum(self.flops.values())

    @property
    def mem_bytes(self) -> int:
        return sum(self.memory.values())

    @property
    def decoder_share(self) -> float:
        total = self.flops_total
        return (self.flops["decoder"] + self.flops["heads"]) / total if total else 0.0

    @property
    def encoder_share(self) -> float:
        total = self.flops_total
        return self.flops["encoder"] / total if total else 0.0


def layer_flops(n: int, d: int, r: int) -> int:
    return 8 * n * d * d + 4 * n * n * d + 4 * r * n * d * d


def layer_memory(n: int, d: int, heads: int, r: int, nbytes: int) -> int:
    return nbytes * (n * d * (8 + 2 * r) + heads * n * n * C2)


def param_count(dims: ArchDims, patch_dim: int) -> int:
    def blk(d, r):
        return 4 * d + 3 * d * d + 3 * d + d * d + d + 2 * r * d * d + r * d + d

    enc = patch_dim * dims.enc_dim + dims.enc_dim + dims.enc_layers * blk(dims.enc_dim, dims.enc_mlp_ratio)
    enc += 2 * dims.enc_dim
    dec = dims.enc_dim * dims.dec_dim + 2 * dims.dec_dim
    dec += dims.dec_layers * blk(dims.dec_dim, dims.dec_mlp_ratio) + 2 * dims.dec_dim
    dec += dims.dec_dim * dims.target_dim + dims.target_dim
    return enc + dec


def token_counts(
    frames: int, height: int, width: int, tubelet, rho_e: float, rho_d: float, rho_r: float, strategy: str = "adaptive"
) -> tuple[int, int, int]:
    """(N, Ne, Nd). Budgeted strategies use ``floor((1 - rho_d) N) + floor(rho_r N)``.

    The budget is deliberately not capped at the encoder-masked pool, so a
    sweep down to ``rho_d = 0`` keeps growing (N + Ne decoder tokens).
    ``strategy="none"`` reconstructs exactly the encoder-masked pool.
    """
    for name, v in (("rho_e", rho_e), ("rho_d", rho_d), ("rho_r", rho_r)):
        if not 0.0 <= v <= 1.0:
            raise BudgetError(f"{name}={v} outside [0, 1]")
    if rho_e >= 1.0:
        raise BudgetError("rho_e must be < 1")
    patch = patch_grid(frames, height, width, tubelet)
    gt = patch.grid[0]
    n = patch.n_tokens
    ne = gt * tube_visible_count(patch.grid, rho_e)
    if strategy == "none":
        nd = n - ne
    else:
        nd = floor_count((1.0 - rho_d) * n) + floor_count(rho_r * n)
    return n, ne, nd


def estimate(
    frames: int,
    height: int,
    width: int,
    tubelet,
    rho_e: float,
    rho_d: float,
    rho_r: float,
    dims: ArchDims = PAPER_DIMS,
    strategy: str = "adaptive",
) -> CostReport:
    n, ne, nd = token_counts(frames, height, width, tubelet, rho_e, rho_d, rho_r, strategy)
    kt, kh, kw = tubelet
    patch_dim = 3 * kt * kh * kw
    b = dims.batch
    de, dd = dims.enc_dim, dims.dec_dim
    nc = ne + nd
    flops = {
        "patch_embed": b * 2 * n * patch_dim * de,
        "encoder": b * dims.enc_layers * layer_flops(ne, de, dims.enc_mlp_ratio),
        "decoder": b * (2 * ne * de * dd + dims.dec_layers * layer_flops(nc, dd, dims.dec_mlp_ratio)),
        "heads": b * 2 * nd * dd * dims.target_dim,
    }
    by = dims.bytes_per_value
    memory = {
        "patch_embed": b * by * (n * patch_dim + n * de),
        "encoder": b * dims.enc_layers * layer_memory(ne, de, dims.enc_heads, dims.enc_mlp_ratio, by),
        "decoder": b * dims.dec_layers * layer_memory(nc, dd, dims.dec_heads, dims.dec_mlp_ratio, by),
        "heads": b * by * nd * (dd + 2 * dims.target_dim),
        "params": 4 * by * param_count(dims, patch_dim),
    }
    return CostReport(n, ne, nd, flops, memory)


def flops_estimate(*args, **kwargs) -> CostReport:
    return estimate(*args, **kwargs)


def memory_estimate(*args, **kwargs) -> CostReport:
    return estimate(*args, **kwargs)


def activation_bytes(report: CostReport) -> int:
    return report.mem_bytes - report.memory["params"]


def sweep_rows(
    frame_list: Iterable[int],
    rho_d_list: Iterable[float],
    dims: ArchDims = PAPER_DIMS,
    height: int = 224,
    width: int = 224,
    tubelet=(2, 16, 16),
    rho_e: float = 0.9,
    rho_r: float = 0.0,
) -> list[dict]:
    frame_list, rho_d_list = sorted(set(frame_list)), sorted(set(rho_d_list))
    if not frame_list or not rho_d_list:
        raise ValueError("sweep needs at least one frame count and one ratio")
    rows = []
    for f in frame_list:
        for rd in rho_d_list:
            rep = estimate(f, height, width, tubelet, rho_e, rd, rho_r, dims)
            rows.append(
                {
                    "frames": f,
                    "rho_d": rd,
                    "Ne": rep.Ne,
                    "Nd": rep.Nd,
                    "flops_total": rep.flops_total,
                    "flops_decoder_share": round(rep.decoder_share, 6),
                    "mem_bytes": rep.mem_bytes,
                }
            )
    return rows


def sweep_report(frame_list: Sequence[int], rho_d_list: Sequence[float], dims: ArchDims = PAPER_DIMS, path=None, **kw) -> str:
    """CSV text (also written to ``path`` when given); whitespace-free, so gnuplot reads it with ``sep ','``."""
    buf = io.StringIO()
    buf.write("# forward FLOPs = 2 x multiply-adds (matmul + patch conv); memory in bytes\n")
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(sweep_rows(frame_list, rho_d_list, dims, **kw))
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def budget_ratio(
    budgets: Sequence[float],
    reference: float = 0.15,
    frames: int = 128,
    dims: ArchDims = PAPER_DIMS,
    height: int = 224,
    width: int = 224,
    tubelet=(2, 16, 16),
    rho_e: float = 0.9,
) -> list[float]:
    """Memory at each token budget relative to ``reference`` (adaptive share only)."""

    def mem(bud):
        return estimate(frames, height, width, tubelet, rho_e, 1.0 - bud, 0.0, dims).mem_bytes

    ref = mem(reference)
    return [mem(b) / ref for b in budgets]


def fits(report: CostReport, activation_budget: int) -> bool:
    return activation_bytes(report) <= activation_budget


def human_bytes(n: float) -> str:
    units = ["B", "KiB", "MiB", "GiB", "TiB"]
    i = min(int(math.log(max(n, 1), 1024)), len(units) - 1)
    return f"{n / 1024 ** i:.2f} {units[i]}"


def budget_spec_cost(frames: int, height: int, width: int, tubelet, budget: BudgetSpec, dims: ArchDims, strategy: str):
    return estimate(frames, height, width, tubelet, budget.rho_e, budget.rho_d, budget.rho_r, dims, strategy)
