"""Dataset directories: ``video_XXXX.rvid`` (+ ``.rflo``), ``labels.csv`` and ``motion_masks.npy``."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import video as V
from .config import ConfigError, ExperimentConfig

LABELS = "labels.csv"
MOTION = "motion_masks.npy"


@dataclass
class Dataset:
    names: list[str]
    videos: list[np.ndarray]
    flows: list[np.ndarray | None] = field(default_factory=list)
    labels: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.videos)

    def label_array(self) -> np.ndarray:
        missing = [n for n in self.names if n not in self.labels]
        if missing:
            raise ConfigError("missing_labels", f"{LABELS} has no label for {missing[0]}")
        return np.array([self.labels[n] for n in self.names], dtype=np.int64)

    def stack(self, idx) -> np.ndarray:
        return np.stack([self.videos[i] for i in idx])


def scene_seed(cfg: ExperimentConfig, i: int) -> int:
    return cfg.seed * 1_000_003 + cfg.data.seed_offset + i


def make_scene(cfg: ExperimentConfig, i: int) -> tuple[V.Scene, int]:
    s, d = cfg.scene, cfg.data
    seed = scene_seed(cfg, i)
    if d.task == "direction":
        return V.direction_clip(
            seed, s.frames, s.height, s.width, d.direction_speed, d.direction_sprites, s.background
        )
    spec = V.SceneSpec(
        frames=s.frames,
        height=s.height,
        width=s.width,
        tubelet=tuple(cfg.mae.tubelet),
        sprites=s.sprites,
        size_range=tuple(s.size_range),
        speed_range=tuple(s.speed_range),
        background=s.background,
        seed=seed,
    )
    scene = V.gen_moving_sprites(spec)
    return scene, V.flow_direction(scene.flow)


def generate(cfg: ExperimentConfig, out_dir) -> list[Path]:
    """Write the synthetic dataset and return every file written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written, rows, motion = [], [], []
    for i in range(cfg.data.n_videos):
        scene, label = make_scene(cfg, i)
        name = f"video_{i:04d}.rvid"
        V.save_rvid(scene.video, out / name)
        V.save_rflo(scene.flow, out / f"video_{i:04d}.rflo")
        written += [out / name, out / f"video_{i:04d}.rflo"]
        rows.append((name, label))
        motion.append(scene.motion_mask)
    with open(out / LABELS, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("filename", "label"))
        w.writerows(rows)
    np.save(out / MOTION, np.stack(motion) if motion else np.zeros((0,), dtype=bool))
    return written + [out / LABELS, out / MOTION]


def load(data_dir, limit: int | None = None) -> Dataset:
    root = Path(data_dir)
    if not root.is_dir():
        raise ConfigError("missing_path", f"data directory {root} not found")
    paths = sorted(root.glob("*.rvid"))
    if limit is not None:
        paths = paths[:limit]
    if not paths:
        raise ConfigError("missing_path", f"no .rvid files in {root}")
    videos = [V.load_rvid(p) for p in paths]
    flows = [V.load_rflo(p.with_suffix(".rflo")) if p.with_suffix(".rflo").exists() else None for p in paths]
    labels = {}
    if (root / LABELS).exists():
        with open(root / LABELS, newline="", encoding="utf-8") as fh:
            labels = {row["filename"]: int(row["label"]) for row in csv.DictReader(fh)}
    return Dataset([p.name for p in paths], videos, flows, labels)


def load_motion_masks(data_dir) -> np.ndarray:
    return np.load(Path(data_dir) / MOTION)
