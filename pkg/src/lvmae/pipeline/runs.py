"""Stage orchestration: each ``run_*`` writes its artifacts and one manifest."""
from __future__ import annotations

import csv
import json
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import cost as C
from .. import mae
from .. import masking as M
from .. import tokenizer as tok
from .. import video as V
from ..numerics import Schedule, lr_at
from ..numerics import checkpoint as ckpt
from ..numerics import rng as rngmod
from . import data as D
from .config import ConfigError, ExperimentConfig, budget_spec, config_hash, to_dict

METRIC_COLUMNS = ("step", "loss", "lr", "wall_ms", "strategy", "frames", "rho_d", "rho_r")
STATE_FILE = "state.lvmt"


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=10,
            cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


@dataclass
class RunManifest:
    stage: str
    config_sha256: str
    config: dict
    git: str
    seed: int
    outputs: list[str] = field(default_factory=list)
    started: float = 0.0
    wall_seconds: float = 0.0
    summary: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / f"manifest-{self.stage}.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


class Run:
    """Output directory, manifest bookkeeping and the metrics CSV of one stage."""

    def __init__(self, stage: str, cfg: ExperimentConfig):
        self.stage, self.cfg = stage, cfg
        self.out = Path(cfg.paths.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.t0 = time.time()
        self.outputs: list[Path] = []
        self._metrics = None

    def path(self, name: str) -> Path:
        p = self.out / name
        if p not in self.outputs:
            self.outputs.append(p)
        return p

    def open_metrics(self, record_wall_ms: bool, append: bool = False):
        p = self.path(f"metrics-{self.stage}.csv")
        fresh = not (append and p.exists())
        self._fh = open(p, "w" if fresh else "a", newline="", encoding="utf-8")
        self._metrics = csv.writer(self._fh, lineterminator="\n")
        if fresh:
            self._metrics.writerow(METRIC_COLUMNS)
        self._record_wall = record_wall_ms
        self._tick = time.perf_counter()

    def log(self, step: int, loss: float, lr: float, frames: int) -> None:
        now = time.perf_counter()
        wall = round((now - self._tick) * 1000.0, 3) if self._record_wall else 0
        self._tick = now
        b = self.cfg.budget
        self._metrics.writerow((step, repr(float(loss)), repr(float(lr)), wall, self.cfg.strategy, frames, b.rho_d, b.rho_r))
        self._fh.flush()

    def finish(self, summary: dict | None = None) -> RunManifest:
        if self._metrics is not None:
            self._fh.close()
        man = RunManifest(
            self.stage,
            config_hash(self.cfg),
            to_dict(self.cfg),
            git_describe(),
            self.cfg.seed,
            [],
            self.t0,
            round(time.time() - self.t0, 3),
            summary or {},
        )
        man_path = self.out / f"manifest-{self.stage}.json"
        man.outputs = sorted(str(p) for p in self.outputs + [man_path] if p == man_path or p.exists())
        man.write(self.out)
        return man


def _require(path: str, what: str) -> Path:
    if not path:
        raise ConfigError("missing_path", f"{what} path is not set")
    p = Path(path)
    if not p.exists():
        raise ConfigError("missing_path", f"{what} {p} not found")
    return p


# configs of the numeric modules ----------------------------------------------------------------


def mae_config(cfg: ExperimentConfig, frames: int | None = None) -> mae.MaeConfig:
    m, s = cfg.mae, cfg.scene
    return mae.MaeConfig(
        frames=frames or s.frames,
        height=s.height,
        width=s.width,
        tubelet=tuple(m.tubelet),
        dim=m.dim,
        enc_layers=m.enc_layers,
        enc_heads=m.enc_heads,
        mlp_ratio=m.mlp_ratio,
        dec_dim=m.dec_dim,
        dec_layers=m.dec_layers,
        dec_heads=m.dec_heads,
        dec_mlp_ratio=m.dec_mlp_ratio,
        target=cfg.targets,
        fsq_dim=len(cfg.tokenizer.levels),
    )


def tokenizer_config(cfg: ExperimentConfig) -> tok.TokenizerConfig:
    t, s = cfg.tokenizer, cfg.scene
    kh = cfg.mae.tubelet[1]
    try:
        return tok.TokenizerConfig(
            frames=t.window,
            height=s.height,
            width=s.width,
            patch=(kh, kh),
            channels=tuple(t.channels),
            scorer_channels=t.scorer_channels,
            levels=tuple(t.levels),
            train_topk=t.train_topk,
            topk_includes_first=t.topk_includes_first,
            infer_keep=t.infer_keep,
            tau_scale=t.tau_scale,
        )
    except ValueError as exc:
        raise ConfigError("bad_geometry", str(exc)) from None


def _schedule(steps: int, lr: float, warmup: int) -> Schedule:
    return Schedule(lr, min(warmup, max(steps - 1, 0)), max(steps, 1))


def _batch_idx(seed: int, name: str, step: int, n: int, batch: int) -> np.ndarray:
    return rngmod.stream(seed, name, step).choice(n, size=batch, replace=batch > n)


def _checkpoint(run: "Run", trainer, every: int, total: int) -> None:
    """Latest state plus a step-numbered copy, so any periodic checkpoint can seed a resume."""
    n = trainer.step_count
    if n % max(every, 1) == 0 or n == total:
        arrays = trainer.state_arrays()
        (run.out / "ckpt").mkdir(exist_ok=True)
        ckpt.save(run.path(f"ckpt/step_{n:06d}.lvmt"), arrays)
        ckpt.save(run.path(STATE_FILE), arrays)


def _resume(trainer, cfg: ExperimentConfig) -> bool:
    if not cfg.paths.resume:
        return False
    trainer.load_state_arrays(ckpt.load(_require(cfg.paths.resume, "resume checkpoint")))
    return True


# stages ------------------------------------------------------------------------------------------


def run_gen_data(cfg: ExperimentConfig) -> RunManifest:
    """Synthesize a seeded dataset of clips, flows, labels and motion masks."""
    run = Run("gen-data", cfg)
    target = Path(cfg.paths.data)
    files = D.generate(cfg, target)
    run.outputs += files
    return run.finish({"n_videos": cfg.data.n_videos, "data": str(target)})


def run_train_tokenizer(cfg: ExperimentConfig) -> RunManifest:
    """Train the adaptive FSQ tokenizer on random window crops."""
    run = Run("tokenizer", cfg)
    ds = D.load(_require(cfg.paths.data, "data directory"))
    tcfg = tokenizer_config(cfg)
    t = cfg.tokenizer
    trainer = tok.TokenizerTrainer.create(tcfg, _schedule(t.steps, t.lr, t.warmup), cfg.seed, t.beta1, t.beta2)
    resumed = _resume(trainer, cfg)
    run.open_metrics(t.record_wall_ms, append=resumed)
    win = t.window
    while trainer.step_count < t.steps:
        step = trainer.step_count
        idx = _batch_idx(cfg.seed, "tokenizer-batch", step, len(ds), t.batch)
        r = rngmod.stream(cfg.seed, "tokenizer-crop", step)
        clips = []
        for i in idx:
            v = ds.videos[i]
            if v.shape[1] < win:
                raise ConfigError("bad_geometry", f"{ds.names[i]} is shorter than the {win}-frame window")
            s0 = int(r.integers(0, v.shape[1] - win + 1))
            clips.append(v[:, s0 : s0 + win])
        loss = trainer.step(np.stack(clips))
        run.log(step, loss, lr_at(trainer.step_count, trainer.schedule), win)
        _checkpoint(run, trainer, t.checkpoint_every, t.steps)
    tok.save_tokenizer(run.path("tokenizer.lvmt"), tcfg, trainer.params)
    return run.finish({"steps": trainer.step_count})


def _targets_and_saliency(cfg: ExperimentConfig, ds: D.Dataset, mcfg: mae.MaeConfig, with_targets: bool = True):
    """Frozen-tokenizer FSQ targets and importance maps, or RGB targets and flow saliency."""
    grid = mcfg.patch.grid
    want_fsq = with_targets and cfg.targets == "fsq"
    need_tok = want_fsq or cfg.strategy == "adaptive"
    targets, saliency = None, [None] * len(ds)
    if need_tok:
        tcfg = tokenizer_config(cfg)
        params = tok.load_tokenizer_params(_require(cfg.paths.tokenizer, "tokenizer checkpoint"), tcfg)
        fsq_t, sal = [], []
        for v in ds.videos:
            lt = tok.tokenize_long_video(v, params, tcfg)
            g = tuple(lt.zq.shape[:3])
            if g[0] < grid[0] or g[1:] != grid[1:]:
                raise ConfigError("bad_geometry", f"tokenizer grid {g} does not cover MAE grid {grid}")
            fsq_t.append(lt.zq[: grid[0]].reshape(-1, lt.zq.shape[-1]))
            sal.append(M.SaliencyMap.from_scores(lt.scores[: grid[0]]))
        if want_fsq:
            targets = np.stack(fsq_t)
        if cfg.strategy == "adaptive":
            saliency = sal
    if with_targets and cfg.targets == "rgb":
        targets = mae.rgb_targets(np.stack(ds.videos), mcfg)
    if cfg.strategy == "flow":
        if any(f is None for f in ds.flows):
            raise ConfigError("missing_path", "flow strategy needs a .rflo file next to every video")
        saliency = [M.flow_saliency(f, mcfg.patch) for f in ds.flows]
    return targets, saliency


def pretrain_masks(cfg: ExperimentConfig, grid, step: int, saliency, idx) -> mae.MaskBatch:
    return mae.make_masks(
        cfg.strategy,
        grid,
        budget_spec(cfg),
        cfg.seed,
        step,
        [saliency[i] for i in idx],
        len(idx),
        cfg.budget.uniform_step,
    )


def run_pretrain(cfg: ExperimentConfig) -> RunManifest:
    """MAE pre-training with the tokenizer frozen; checkpoints the full state periodically."""
    run = Run("pretrain", cfg)
    ds = D.load(_require(cfg.paths.data, "data directory"))
    mcfg = mae_config(cfg)
    if any(v.shape[1:] != (mcfg.frames, mcfg.height, mcfg.width) for v in ds.videos):
        raise ConfigError("bad_geometry", "videos do not match the scene geometry")
    targets, saliency = _targets_and_saliency(cfg, ds, mcfg)
    p = cfg.pretrain
    trainer = mae.Pretrainer.create(mcfg, _schedule(p.steps, p.lr, p.warmup), cfg.seed, p.weight_decay)
    resumed = _resume(trainer, cfg)
    run.open_metrics(p.record_wall_ms, append=resumed)
    grid = mcfg.patch.grid
    if p.dump_masks:
        (run.out / "masks").mkdir(exist_ok=True)
    while trainer.step_count < p.steps:
        step = trainer.step_count
        idx = np.arange(p.batch) % len(ds) if p.fixed_batch else _batch_idx(cfg.seed, "pretrain-batch", step, len(ds), p.batch)
        masks = pretrain_masks(cfg, grid, step, saliency, idx)
        if p.dump_masks:
            M.save_masks(masks.masks[0], run.path(f"masks/step_{step:05d}.lvmk"))
        loss = trainer.step(ds.stack(idx), targets[idx], masks)
        run.log(step, loss, lr_at(trainer.step_count, trainer.schedule), mcfg.frames)
        _checkpoint(run, trainer, p.checkpoint_every, p.steps)
    mae.save_params(run.path("mae.lvmt"), trainer.params)
    return run.finish({"steps": trainer.step_count})


def _encoder_from(path: str) -> dict | None:
    if not path:
        return None
    params = mae.load_params(_require(path, "encoder checkpoint"))
    return {k: v for k, v in params.items() if k.startswith(("embed.", "enc."))}


def evaluate(params, ds: D.Dataset, cfg: ExperimentConfig, mcfg: mae.MaeConfig) -> float:
    labels = ds.label_array()
    e = cfg.eval
    correct = 0
    for s in range(0, len(ds), e.batch):
        idx = np.arange(s, min(s + e.batch, len(ds)))
        videos = ds.stack(idx)
        logits = mae.multi_crop_eval(videos, params, mcfg, e.crop_len or videos.shape[2], e.n_crops, cfg.finetune.head)
        correct += int((logits.argmax(axis=1) == labels[idx]).sum())
    return correct / len(ds)


def run_finetune(cfg: ExperimentConfig) -> RunManifest:
    """Fine-tune a classifier on top of a pretrained (or fresh) encoder."""
    run = Run("finetune", cfg)
    ds = D.load(_require(cfg.paths.data, "data directory"))
    labels = ds.label_array()
    mcfg = mae_config(cfg)
    f = cfg.finetune
    if labels.min() < 0 or labels.max() >= f.n_classes:
        raise ConfigError("bad_value", f"labels must lie in [0, {f.n_classes})")
    encoder = _encoder_from(cfg.paths.checkpoint)
    ft = mae.Finetuner.create(
        mcfg, f.n_classes, _schedule(f.steps, f.lr, f.warmup), encoder, f.head, f.drop_ratio, f.smoothing, cfg.seed,
        f.weight_decay,
    )
    resumed = _resume(ft, cfg)
    run.open_metrics(f.record_wall_ms, append=resumed)
    while ft.step_count < f.steps:
        step = ft.step_count
        idx = _batch_idx(cfg.seed, "finetune-batch", step, len(ds), f.batch)
        loss = ft.step(ds.stack(idx), labels[idx])
        run.log(step, loss, lr_at(ft.step_count, ft.schedule), ds.videos[0].shape[1])
        _checkpoint(run, ft, f.checkpoint_every, f.steps)
    mae.save_params(run.path("classifier.lvmt"), ft.params, {"meta/n_classes": np.asarray(float(f.n_classes))})
    summary = {"steps": ft.step_count}
    if cfg.paths.val_data:
        val = D.load(_require(cfg.paths.val_data, "validation data"))
        summary["val_top1"] = evaluate(ft.params, val, cfg, mcfg)
    return run.finish(summary)


def run_eval(cfg: ExperimentConfig) -> RunManifest:
    """Multi-crop top-1 accuracy of a classifier checkpoint."""
    run = Run("eval", cfg)
    ckpt_path = _require(cfg.paths.checkpoint, "fine-tuned checkpoint")
    params = mae.load_params(ckpt_path)
    ds = D.load(_require(cfg.paths.data, "data directory"))
    crop = cfg.eval.crop_len or ds.videos[0].shape[1]
    mcfg = mae_config(cfg, crop)
    top1 = evaluate(params, ds, cfg, mcfg)
    result = {"top1": top1, "n_crops": cfg.eval.n_crops, "frames": crop, "checkpoint": str(ckpt_path)}
    run.path("eval.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return run.finish(result)


def run_masks(cfg: ExperimentConfig) -> RunManifest:
    """Step-0 masks of every video for the configured strategy, plus their validation report."""
    run = Run("masks", cfg)
    ds = D.load(_require(cfg.paths.data, "data directory"))
    mcfg = mae_config(cfg)
    _, saliency = _targets_and_saliency(cfg, ds, mcfg, with_targets=False)
    budget = budget_spec(cfg)
    (run.out / "masks").mkdir(exist_ok=True)
    report = {}
    for i, name in enumerate(ds.names):
        mb = pretrain_masks(cfg, mcfg.patch.grid, 0, saliency, [i])
        ms = mb.masks[0]
        M.save_masks(ms, run.path(f"masks/{Path(name).stem}.lvmk"))
        rep = M.validate(ms, budget)
        report[name] = {"ok": rep.ok, "n_enc": ms.n_enc, "n_dec": ms.n_dec, "violations": rep.violations}
    run.path("masks.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return run.finish({"videos": len(ds), "all_ok": all(r["ok"] for r in report.values())})


def cost_dims(cfg: ExperimentConfig) -> C.ArchDims:
    c = cfg.cost
    if c.dims == "paper":
        return C.ArchDims(bytes_per_value=c.bytes_per_value, target_dim=len(cfg.tokenizer.levels))
    return C.ArchDims.from_mae(mae_config(cfg), bytes_per_value=c.bytes_per_value)


def run_cost(cfg: ExperimentConfig) -> RunManifest:
    """Analytic FLOPs and activation memory over frames and decoder mask ratios."""
    run = Run("cost", cfg)
    c = cfg.cost
    dims = cost_dims(cfg)
    geom = dict(height=c.height, width=c.width, tubelet=tuple(c.tubelet))
    C.sweep_report(c.frames, c.rho_d, dims, path=run.path("cost.csv"), rho_e=cfg.budget.rho_e, rho_r=c.rho_r, **geom)
    budget = budget_spec(cfg)
    check = {}
    for strategy in ("none", cfg.strategy):
        rep = C.budget_spec_cost(c.check_frames, c.height, c.width, tuple(c.tubelet), budget, dims, strategy)
        check[strategy] = {
            "Ne": rep.Ne,
            "Nd": rep.Nd,
            "activation_bytes": C.activation_bytes(rep),
            "fits": C.fits(rep, c.activation_budget),
        }
    summary = {"frames": c.check_frames, "activation_budget": c.activation_budget, "strategies": check}
    run.path("budget.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return run.finish(summary)


def run_viz(cfg: ExperimentConfig) -> RunManifest:
    """PPM frames of the first video with unselected decoder tokens dimmed."""
    run = Run("viz", cfg)
    ds = D.load(_require(cfg.paths.data, "data directory"), limit=1)
    mcfg = mae_config(cfg)
    _, saliency = _targets_and_saliency(cfg, ds, mcfg, with_targets=False)
    ms = pretrain_masks(cfg, mcfg.patch.grid, 0, saliency, [0]).masks[0]
    sel = ms.decoder_selected.reshape(mcfg.patch.grid)
    for p in V.export_ppm(ds.videos[0], run.out / "viz", sel, mcfg.patch):
        run.outputs.append(p)
    return run.finish({"frames": len(run.outputs), "n_dec": ms.n_dec})


STAGES = {
    "gen-data": run_gen_data,
    "train-tokenizer": run_train_tokenizer,
    "pretrain": run_pretrain,
    "finetune": run_finetune,
    "eval": run_eval,
    "masks": run_masks,
    "cost": run_cost,
    "viz": run_viz,
}
