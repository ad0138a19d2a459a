"""Experiment configuration: nested dataclasses, JSON I/O, presets, ``--set`` overrides."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any

from .. import masking as M
from ..video import GeometryError, patch_grid

SEED_ENV = "LVMAE_SEED"


class ConfigError(ValueError):
    """Invalid configuration; ``code`` is the machine-readable error class."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class SceneCfg:
    frames: int = 16
    height: int = 64
    width: int = 64
    sprites: int = 2
    size_range: tuple = (8, 12)
    speed_range: tuple = (1, 3)
    background: str = "noise"


@dataclass
class DataCfg:
    task: str = "sprites"  # sprites | direction
    n_videos: int = 16
    seed_offset: int = 0
    direction_sprites: int = 3
    direction_speed: int = 2


@dataclass
class TokenizerCfg:
    window: int = 16
    channels: tuple = (16, 32)
    scorer_channels: int = 32
    levels: tuple = (8, 8, 4, 4, 4, 4, 4, 4)
    train_topk: int = 192
    topk_includes_first: bool = False
    infer_keep: float = 0.15
    tau_scale: float = 0.1
    steps: int = 2000
    batch: int = 4
    lr: float = 1e-3
    warmup: int = 50
    beta1: float = 0.0
    beta2: float = 0.99
    checkpoint_every: int = 100
    record_wall_ms: bool = True


@dataclass
class MaeCfg:
    tubelet: tuple = (2, 8, 8)
    dim: int = 64
    enc_layers: int = 4
    enc_heads: int = 4
    mlp_ratio: int = 4
    dec_dim: int = 64
    dec_layers: int = 2
    dec_heads: int = 4
    dec_mlp_ratio: int = 4


@dataclass
class BudgetCfg:
    rho_e: float = 0.9
    rho_d: float = 0.9
    rho_r: float = 0.05
    uniform_step: int = 7


@dataclass
class PretrainCfg:
    steps: int = 200
    batch: int = 8
    lr: float = 1e-3
    warmup: int = 20
    weight_decay: float = 0.05
    checkpoint_every: int = 50
    fixed_batch: bool = False
    dump_masks: bool = False
    record_wall_ms: bool = True


@dataclass
class FinetuneCfg:
    steps: int = 500
    batch: int = 8
    lr: float = 1e-3
    warmup: int = 25
    weight_decay: float = 0.05
    head: str = "mean"
    drop_ratio: float = 0.0
    smoothing: float = 0.2
    n_classes: int = 2
    checkpoint_every: int = 100
    record_wall_ms: bool = True


@dataclass
class EvalCfg:
    crop_len: int = 0  # 0 = the whole clip
    n_crops: int = 1
    batch: int = 16


@dataclass
class CostCfg:
    frames: list = field(default_factory=lambda: [16, 32, 64, 128])
    rho_d: list = field(default_factory=lambda: [round(0.05 * i, 2) for i in range(18)])
    rho_r: float = 0.0
    height: int = 224
    width: int = 224
    tubelet: tuple = (2, 16, 16)
    dims: str = "paper"  # paper | desk
    bytes_per_value: int = 4
    check_frames: int = 128
    activation_budget: int = 2**30


@dataclass
class PathsCfg:
    data: str = "data"
    val_data: str = ""
    tokenizer: str = ""
    checkpoint: str = ""
    resume: str = ""
    out: str = "runs/out"


@dataclass
class ExperimentConfig:
    seed: int = 0
    strategy: str = "adaptive"
    targets: str = "fsq"
    scene: SceneCfg = field(default_factory=SceneCfg)
    data: DataCfg = field(default_factory=DataCfg)
    tokenizer: TokenizerCfg = field(default_factory=TokenizerCfg)
    mae: MaeCfg = field(default_factory=MaeCfg)
    budget: BudgetCfg = field(default_factory=BudgetCfg)
    pretrain: PretrainCfg = field(default_factory=PretrainCfg)
    finetune: FinetuneCfg = field(default_factory=FinetuneCfg)
    eval: EvalCfg = field(default_factory=EvalCfg)
    cost: CostCfg = field(default_factory=CostCfg)
    paths: PathsCfg = field(default_factory=PathsCfg)


# Paper-scale hyperparameters; the desk preset is the dataclass defaults.
PAPER_PRESET: dict[str, Any] = {
    "scene": {"frames": 128, "height": 224, "width": 224},
    "tokenizer": {
        "channels": [64, 128, 128],
        "scorer_channels": 64,
        "train_topk": 768,
        "infer_keep": 0.15,
        "batch": 256,
        "lr": 1e-4,
    },
    "mae": {
        "tubelet": [2, 16, 16],
        "dim": 768,
        "enc_layers": 12,
        "enc_heads": 12,
        "mlp_ratio": 4,
        "dec_dim": 384,
        "dec_layers": 4,
        "dec_heads": 4,
        "dec_mlp_ratio": 4,
    },
    "pretrain": {"steps": 1600, "batch": 512, "lr": 1.5e-4, "warmup": 40, "weight_decay": 0.05},
    "finetune": {"head": "cls", "drop_ratio": 0.2, "smoothing": 0.2, "weight_decay": 0.0},
    "eval": {"crop_len": 128, "n_crops": 1},
}
PRESETS = {"desk": {}, "paper": PAPER_PRESET}


# (de)serialization -------------------------------------------------------------------


def to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = to_dict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = copy.deepcopy(v)
    return out


def _coerce(path: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError("bad_value", f"{path} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError("bad_value", f"{path} must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("bad_value", f"{path} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError("bad_value", f"{path} must be a string")
        return value
    if isinstance(default, (tuple, list)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError("bad_value", f"{path} must be a list")
        items = list(value)
        for x in items:
            if isinstance(x, bool) or not isinstance(x, (int, float)):
                raise ConfigError("bad_value", f"{path} must hold numbers")
        return tuple(items) if isinstance(default, tuple) else items
    raise ConfigError("bad_value", f"{path}: unsupported type")


def _merge(cfg, data: dict, prefix: str = "") -> None:
    if not isinstance(data, dict):
        raise ConfigError("bad_value", f"{prefix or 'config'} must be an object")
    names = {f.name for f in dataclasses.fields(cfg)}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in names:
            raise ConfigError("bad_key", f"unknown config key {path!r}")
        cur = getattr(cfg, key)
        if dataclasses.is_dataclass(cur):
            _merge(cur, value, path + ".")
        else:
            setattr(cfg, key, _coerce(path, cur, value))


def from_dict(data: dict, preset: str | None = None) -> ExperimentConfig:
    data = dict(data)
    preset = data.pop("preset", preset) or "desk"
    if preset not in PRESETS:
        raise ConfigError("bad_value", f"unknown preset {preset!r}")
    cfg = ExperimentConfig()
    _merge(cfg, PRESETS[preset])
    _merge(cfg, data)
    return cfg


def dumps(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), sort_keys=True, indent=2)


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError("bad_override", f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError("bad_override", f"bad override key {key!r}")
    return parts, value


def apply_override(cfg: ExperimentConfig, text: str) -> None:
    parts, value = parse_override(text)
    nested: dict = {}
    cur = nested
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    _merge(cfg, nested)


def load(path: str | None = None, overrides=(), env=None, preset: str | None = None) -> ExperimentConfig:
    """File (or preset defaults), then ``LVMAE_SEED``, then ``--set`` overrides; validated."""
    data: dict = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError("missing_path", f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("bad_json", f"{path}: {exc}") from None
    cfg = from_dict(data, preset)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError("bad_value", f"{SEED_ENV} must be an integer") from None
    for o in overrides:
        apply_override(cfg, o)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.strategy not in M.STRATEGIES:
        raise ConfigError("bad_strategy", f"unknown strategy {cfg.strategy!r}; expected one of {M.STRATEGIES}")
    if cfg.targets not in ("fsq", "rgb"):
        raise ConfigError("bad_targets", f"targets must be fsq or rgb, got {cfg.targets!r}")
    if cfg.data.task not in ("sprites", "direction"):
        raise ConfigError("bad_value", f"unknown data task {cfg.data.task!r}")
    if cfg.finetune.head not in ("mean", "cls"):
        raise ConfigError("bad_value", f"unknown head {cfg.finetune.head!r}")
    if cfg.cost.dims not in ("paper", "desk"):
        raise ConfigError("bad_value", "cost.dims must be paper or desk")
    s = cfg.scene
    if len(cfg.mae.tubelet) != 3:
        raise ConfigError("bad_geometry", "tubelet needs three extents")
    try:
        patch_grid(s.frames, s.height, s.width, cfg.mae.tubelet)
        patch_grid(cfg.tokenizer.window, s.height, s.width, cfg.mae.tubelet)
    except GeometryError as exc:
        raise ConfigError("bad_geometry", str(exc)) from None
    kt, kh, kw = cfg.mae.tubelet
    if kt != 2 or kh != kw:
        raise ConfigError("bad_geometry", "tokenizer latent grid needs a (2, k, k) tubelet")
    try:
        b = M.BudgetSpec(cfg.budget.rho_e, cfg.budget.rho_d, cfg.budget.rho_r)
    except M.BudgetError as exc:
        raise ConfigError("bad_budget", str(exc)) from None
    if cfg.budget.rho_e >= 1.0:
        raise ConfigError("bad_budget", "rho_e must be < 1")
    if not b.feasible() and cfg.strategy in ("random", "flow", "adaptive"):
        raise ConfigError("bad_budget", "token budget exceeds the encoder-masked fraction")
    for name in ("pretrain", "finetune", "tokenizer"):
        sec = getattr(cfg, name)
        if sec.steps < 0 or sec.batch < 1:
            raise ConfigError("bad_value", f"{name}.steps must be >= 0 and {name}.batch >= 1")
    if cfg.eval.crop_len < 0 or cfg.eval.n_crops < 1 or cfg.eval.batch < 1:
        raise ConfigError("bad_value", "eval needs crop_len >= 0, n_crops >= 1 and batch >= 1")
    if not 0.0 <= cfg.finetune.drop_ratio < 1.0:
        raise ConfigError("bad_value", "finetune.drop_ratio must lie in [0, 1)")
    if cfg.finetune.n_classes < 2:
        raise ConfigError("bad_value", "finetune.n_classes must be >= 2")
    if not cfg.cost.frames or not cfg.cost.rho_d:
        raise ConfigError("bad_value", "cost sweep lists must be nonempty")


def budget_spec(cfg: ExperimentConfig) -> M.BudgetSpec:
    return M.BudgetSpec(cfg.budget.rho_e, cfg.budget.rho_d, cfg.budget.rho_r)
