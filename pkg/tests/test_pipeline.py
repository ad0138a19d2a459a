import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lvmae import masking as M
from lvmae.numerics import checkpoint as ckpt
from lvmae.pipeline import config as C
from lvmae.pipeline import data as D
from lvmae.pipeline.cli import main
from lvmae.pipeline.runs import METRIC_COLUMNS

TINY = {
    "scene": {"frames": 8, "height": 32, "width": 32, "sprites": 2, "size_range": [6, 10]},
    "data": {"n_videos": 4},
    "tokenizer": {"window": 8, "channels": [8, 8], "scorer_channels": 8, "train_topk": 16, "steps": 2, "batch": 2,
                  "record_wall_ms": False},
    "mae": {"dim": 16, "enc_layers": 1, "enc_heads": 2, "dec_dim": 12, "dec_layers": 1, "dec_heads": 2},
    "budget": {"rho_e": 0.75, "rho_d": 0.75, "rho_r": 0.05},
    "pretrain": {"steps": 6, "batch": 2, "warmup": 2, "checkpoint_every": 2, "record_wall_ms": False},
    "finetune": {"steps": 4, "batch": 2, "warmup": 1, "checkpoint_every": 2, "record_wall_ms": False},
    "eval": {"crop_len": 8, "batch": 4},
}


def cli(*argv, capsys=None):
    code = main(list(argv))
    if capsys is None:
        return code, "", ""
    out, err = capsys.readouterr()
    return code, out, err


def write_config(path: Path, extra=None) -> str:
    cfg = json.loads(json.dumps(TINY))
    for k, v in (extra or {}).items():
        cfg.setdefault(k, {}).update(v) if isinstance(v, dict) else cfg.__setitem__(k, v)
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    """Dataset plus a briefly trained tokenizer, shared by the stage tests."""
    root = tmp_path_factory.mktemp("world")
    conf = write_config(root / "c.json")
    data, tokdir = root / "data", root / "tok"
    assert cli("gen-data", "--config", conf, "--set", f"paths.data={data}", "--set", f"paths.out={root / 'gen'}")[0] == 0
    code = cli("train-tokenizer", "--config", conf, "--set", f"paths.data={data}", "--set", f"paths.out={tokdir}")[0]
    assert code == 0
    return {"root": root, "conf": conf, "data": data, "tok": tokdir / "tokenizer.lvmt"}


def pretrain(world, out, *extra):
    return cli(
        "pretrain",
        "--config",
        world["conf"],
        "--set",
        f"paths.data={world['data']}",
        "--set",
        f"paths.tokenizer={world['tok']}",
        "--set",
        f"paths.out={out}",
        *extra,
    )[0]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# configuration --------------------------------------------------------------------------------


def test_round_trip_is_fixed_point():
    for preset in C.PRESETS:
        cfg = C.from_dict({}, preset)
        again = C.from_dict(json.loads(C.dumps(cfg)))
        assert again == cfg and C.config_hash(again) == C.config_hash(cfg)
        assert C.dumps(again) == C.dumps(cfg)


@settings(max_examples=50, deadline=None)
@given(
    st.integers(0, 2**31),
    st.sampled_from(M.STRATEGIES),
    st.floats(0.5, 0.95),
    st.lists(st.integers(1, 256), min_size=1, max_size=4),
)
def test_round_trip_property(seed, strategy, rho_e, frames):
    cfg = C.from_dict({"seed": seed, "strategy": strategy, "budget": {"rho_e": rho_e}, "cost": {"frames": frames}})
    text = C.dumps(cfg)
    assert C.dumps(C.from_dict(json.loads(text))) == text


def test_override_parsing_and_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 1, "strategy": "random", "budget": {"rho_d": 0.8}}))
    cfg = C.load(str(path), env={})
    assert (cfg.seed, cfg.strategy, cfg.budget.rho_d) == (1, "random", 0.8)
    assert C.load(str(path), env={"LVMAE_SEED": "7"}).seed == 7
    cfg = C.load(str(path), ["seed=9", "strategy=uniform", "cost.frames=[8, 16]"], env={"LVMAE_SEED": "7"})
    assert (cfg.seed, cfg.strategy, cfg.cost.frames) == (9, "uniform", [8, 16])
    assert C.load(None, ["mae.tubelet=[2, 4, 4]"], env={}).mae.tubelet == (2, 4, 4)
    assert C.load(None, preset="paper", env={}).mae.dim == 768


def test_paper_preset_mirrors_hyperparameters():
    cfg = C.from_dict({}, "paper")
    assert cfg.tokenizer.train_topk == 768 and cfg.tokenizer.levels == (8, 8, 4, 4, 4, 4, 4, 4)
    assert (cfg.tokenizer.beta1, cfg.tokenizer.beta2, cfg.tokenizer.lr) == (0.0, 0.99, 1e-4)
    assert (cfg.pretrain.lr, cfg.pretrain.warmup, cfg.pretrain.weight_decay) == (1.5e-4, 40, 0.05)
    assert (cfg.finetune.smoothing, cfg.finetune.drop_ratio, cfg.finetune.head) == (0.2, 0.2, "cls")
    assert (cfg.budget.rho_e, cfg.budget.rho_d, cfg.budget.rho_r) == (0.9, 0.9, 0.05)
    assert cfg.mae.tubelet == (2, 16, 16) and cfg.scene.frames == 128


@pytest.mark.parametrize(
    "override, code",
    [
        ("strategy=bogus", "bad_strategy"),
        ("targets=pixels", "bad_targets"),
        ("mae.tubelet=[2, 7, 7]", "bad_geometry"),
        ("mae.tubelet=[4, 8, 8]", "bad_geometry"),
        ("budget.rho_d=1.5", "bad_budget"),
        ("budget.rho_d=0.05", "bad_budget"),
        ("no.such=1", "bad_key"),
        ("pretrain.steps=\"many\"", "bad_value"),
        ("novalue", "bad_override"),
    ],
)
def test_config_errors_exit_2(override, code, capsys):
    status, _, err = cli("cost", "--set", override, capsys=capsys)
    assert status == 2
    assert err.startswith(f"error_code={code} ")


def test_missing_and_malformed_config(tmp_path, capsys):
    status, _, err = cli("cost", "--config", str(tmp_path / "nope.json"), capsys=capsys)
    assert status == 2 and err.startswith("error_code=missing_path")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    status, _, err = cli("cost", "--config", str(bad), capsys=capsys)
    assert status == 2 and err.startswith("error_code=bad_json")


def test_seed_env_must_be_integer(monkeypatch, capsys):
    monkeypatch.setenv("LVMAE_SEED", "abc")
    status, _, err = cli("cost", capsys=capsys)
    assert status == 2 and "error_code=bad_value" in err


# stages -------------------------------------------------------------------------------------------


def test_cost_stage(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"cost": {"frames": [16, 128], "rho_d": [0.0, 0.85]}, "paths": {"out": str(tmp_path / "o")}}))
    status, out, _ = cli("cost", "--config", str(conf), capsys=capsys)
    assert status == 0
    text = (tmp_path / "o" / "cost.csv").read_text().splitlines()
    assert text[0].startswith("#") and len(text) == 2 + 4
    man = json.loads((tmp_path / "o" / "manifest-cost.json").read_text())
    assert man["stage"] == "cost" and len(man["config_sha256"]) == 64 and man["git"]
    assert str(tmp_path / "o" / "cost.csv") in man["outputs"]
    assert json.loads(out)["stage"] == "cost"


def test_desk_cost_budget_separates_strategies(tmp_path):
    out = tmp_path / "o"
    assert cli("cost", "--set", "cost.dims=\"desk\"", "--set", "cost.bytes_per_value=8", "--set", "cost.height=64",
               "--set", "cost.width=64", "--set", "cost.tubelet=[2, 8, 8]", "--set", f"paths.out={out}")[0] == 0
    budget = json.loads((out / "budget.json").read_text())
    assert budget["strategies"]["adaptive"]["fits"] and not budget["strategies"]["none"]["fits"]


def test_gen_data_static(tmp_path):
    d = tmp_path / "d"
    assert cli("gen-data", "--set", "scene.sprites=0", "--set", "data.n_videos=3", "--set", f"paths.data={d}",
               "--set", f"paths.out={tmp_path / 'o'}")[0] == 0
    masks = np.load(d / "motion_masks.npy")
    assert masks.shape == (3, 8, 8, 8) and not masks.any()
    ds = D.load(d)
    assert len(ds) == 3 and all(np.all(v == v[:, :1]) for v in ds.videos)
    assert all(np.all(f == 0) for f in ds.flows)
    assert set(ds.labels) == set(ds.names)


def test_gen_data_direction_labels_match_flow(tmp_path):
    d = tmp_path / "d"
    args = ["--set", "data.task=\"direction\"", "--set", "data.n_videos=6", "--set", f"paths.data={d}"]
    assert cli("gen-data", *args, "--set", f"paths.out={tmp_path}")[0] == 0
    ds = D.load(d)
    assert [int(ds.flows[i][0].mean() > 0) for i in range(6)] == list(ds.label_array())


def test_pretrain_writes_rows_checkpoints_and_complete_manifest(world, tmp_path):
    out = tmp_path / "run"
    assert pretrain(world, out) == 0
    table = rows(out / "metrics-pretrain.csv")
    assert tuple(table[0]) == METRIC_COLUMNS
    assert [int(r["step"]) for r in table] == list(range(6))
    assert all(r["wall_ms"] == "0" and r["strategy"] == "adaptive" for r in table)
    man = json.loads((out / "manifest-pretrain.json").read_text())
    written = sorted(str(p) for p in out.rglob("*") if p.is_file())
    assert written == man["outputs"]
    assert {Path(p).name for p in man["outputs"]} >= {"mae.lvmt", "state.lvmt", "step_000002.lvmt"}


def test_pretrain_200_rows(world, tmp_path):
    out = tmp_path / "run"
    assert pretrain(world, out, "--set", "pretrain.steps=200", "--set", "pretrain.checkpoint_every=100") == 0
    assert len(rows(out / "metrics-pretrain.csv")) == 200


def test_tokenizer_stays_frozen(world, tmp_path):
    before = world["tok"].read_bytes()
    assert pretrain(world, tmp_path / "run") == 0
    assert world["tok"].read_bytes() == before


def test_determinism_byte_for_byte(world, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert pretrain(world, a) == 0 and pretrain(world, b) == 0
    for name in ("metrics-pretrain.csv", "state.lvmt", "mae.lvmt", "ckpt/step_000004.lvmt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_resume_reproduces_remaining_steps(world, tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    assert pretrain(world, full) == 0
    assert pretrain(world, part, "--set", f"paths.resume={full / 'ckpt' / 'step_000002.lvmt'}") == 0
    assert rows(part / "metrics-pretrain.csv") == rows(full / "metrics-pretrain.csv")[2:]
    assert (part / "state.lvmt").read_bytes() == (full / "state.lvmt").read_bytes()


def test_strategies_share_encoder_masks(world, tmp_path):
    dumps = {}
    for strategy in ("adaptive", "random", "uniform"):
        out = tmp_path / strategy
        assert pretrain(world, out, "--set", f"strategy={strategy}", "--set", "pretrain.dump_masks=true") == 0
        dumps[strategy] = [M.load_masks(p) for p in sorted((out / "masks").glob("*.lvmk"))]
    assert len(dumps["adaptive"]) == 6
    for a, r, u in zip(dumps["adaptive"], dumps["random"], dumps["uniform"]):
        assert np.array_equal(a.encoder_masked, r.encoder_masked)
        assert np.array_equal(a.encoder_masked, u.encoder_masked)
    assert any(not np.array_equal(a.decoder_selected, r.decoder_selected) for a, r in zip(dumps["adaptive"], dumps["random"]))


def test_non_finite_loss_keeps_last_good_checkpoint(world, tmp_path, capsys):
    out = tmp_path / "run"
    status = pretrain(world, out, "--set", "pretrain.lr=1e200", "--set", "pretrain.warmup=0",
                      "--set", "pretrain.checkpoint_every=1")
    _, err = capsys.readouterr()
    assert status == 1 and err.startswith("error_code=non_finite")
    last = ckpt.load(out / "state.lvmt")
    assert int(last["meta/step"]) >= 1
    assert all(np.isfinite(v).all() for v in last.values())
    assert not (out / "mae.lvmt").exists()


def test_pretrain_without_tokenizer_is_config_error(world, tmp_path, capsys):
    status, _, err = cli("pretrain", "--config", world["conf"], "--set", f"paths.data={world['data']}",
                         "--set", f"paths.out={tmp_path}", capsys=capsys)
    assert status == 2 and err.startswith("error_code=missing_path")


def test_pretrain_rgb_flow_needs_no_tokenizer(world, tmp_path):
    code = cli("pretrain", "--config", world["conf"], "--set", f"paths.data={world['data']}", "--set", "targets=rgb",
               "--set", "strategy=flow", "--set", f"paths.out={tmp_path}")[0]
    assert code == 0


def test_corrupt_checkpoint_is_runtime_error(world, tmp_path, capsys):
    bad = tmp_path / "bad.lvmt"
    bad.write_bytes(b"LVMT garbage")
    status = pretrain(world, tmp_path / "run", "--set", f"paths.resume={bad}")
    _, err = capsys.readouterr()
    assert status == 1 and err.startswith("error_code=bad_format")


def test_finetune_and_eval(world, tmp_path):
    pre, ft, ev = tmp_path / "pre", tmp_path / "ft", tmp_path / "ev"
    assert pretrain(world, pre) == 0
    base = ["--config", world["conf"], "--set", f"paths.data={world['data']}"]
    assert cli("finetune", *base, "--set", f"paths.checkpoint={pre / 'mae.lvmt'}", "--set", f"paths.out={ft}",
               "--set", "finetune.head=\"cls\"", "--set", "finetune.drop_ratio=0.5")[0] == 0
    assert len(rows(ft / "metrics-finetune.csv")) == 4
    assert cli("eval", *base, "--set", f"paths.checkpoint={ft / 'classifier.lvmt'}", "--set", "finetune.head=\"cls\"",
               "--set", "eval.crop_len=4", "--set", "eval.n_crops=2", "--set", f"paths.out={ev}")[0] == 0
    result = json.loads((ev / "eval.json").read_text())
    assert set(result) == {"top1", "n_crops", "frames", "checkpoint"}
    assert result["n_crops"] == 2 and result["frames"] == 4 and 0.0 <= result["top1"] <= 1.0


def test_constant_classifier_scores_half_on_balanced_set(world, tmp_path):
    from lvmae import mae
    from lvmae.pipeline.runs import mae_config

    d = tmp_path / "d"
    d.mkdir()
    for p in Path(world["data"]).glob("*.rvid"):
        (d / p.name).write_bytes(p.read_bytes())
    names = sorted(p.name for p in d.glob("*.rvid"))
    (d / "labels.csv").write_text("filename,label\n" + "".join(f"{n},{i % 2}\n" for i, n in enumerate(names)))
    cfg = C.from_dict(json.loads(Path(world["conf"]).read_text()))
    params = mae.init_classifier(mae_config(cfg), 2, "mean")
    for k, v in params.items():
        if k.startswith("head."):
            v.data = np.zeros_like(v.data)
    mae.save_params(tmp_path / "const.lvmt", params)
    out = tmp_path / "ev"
    assert cli("eval", "--config", world["conf"], "--set", f"paths.data={d}", "--set",
               f"paths.checkpoint={tmp_path / 'const.lvmt'}", "--set", f"paths.out={out}")[0] == 0
    assert json.loads((out / "eval.json").read_text())["top1"] == 0.5


def test_eval_missing_checkpoint(world, tmp_path, capsys):
    status, _, err = cli("eval", "--config", world["conf"], "--set", f"paths.data={world['data']}",
                         "--set", f"paths.checkpoint={tmp_path / 'none.lvmt'}", capsys=capsys)
    assert status == 2 and err.startswith("error_code=missing_path")


def test_masks_and_viz(world, tmp_path):
    base = ["--config", world["conf"], "--set", f"paths.data={world['data']}", "--set", f"paths.tokenizer={world['tok']}"]
    assert cli("masks", *base, "--set", f"paths.out={tmp_path / 'm'}")[0] == 0
    report = json.loads((tmp_path / "m" / "masks.json").read_text())
    assert len(report) == 4 and all(r["ok"] and r["n_dec"] == 19 for r in report.values())
    assert cli("viz", *base, "--set", f"paths.out={tmp_path / 'v'}")[0] == 0
    assert len(list((tmp_path / "v" / "viz").glob("*.ppm"))) == 8


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "lvmae.pipeline.cli", "cost", "--set", "strategy=nope"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 2 and proc.stderr.startswith("error_code=bad_strategy")
    proc = subprocess.run(
        [sys.executable, "-m", "lvmae.pipeline.cli", "cost", "--set", f"paths.out={tmp_path}", "--set", "cost.frames=[16]"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0 and (tmp_path / "cost.csv").exists()
