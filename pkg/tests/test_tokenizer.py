import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fd import numeric_grad, rel_err
from lvmae import tokenizer as tk
from lvmae import video as V
from lvmae.numerics import Schedule, Tape, Tensor
from lvmae.numerics import tensor as T

TINY = tk.TokenizerConfig(
    frames=4, height=16, width=16, patch=(4, 4), channels=(4,), scorer_channels=4, levels=(5, 4, 3), train_topk=6
)


# FSQ


def test_codebook_size_paper_levels():
    assert tk.FsqSpec(tk.PAPER_LEVELS).codebook_size == 262144 == 2**18


def test_code_zero_is_most_negative_corner():
    spec = tk.FsqSpec(tk.PAPER_LEVELS)
    assert np.array_equal(tk.fsq_from_index(0, spec), -np.ones(8))
    assert np.array_equal(tk.fsq_from_index(spec.codebook_size - 1, spec), np.ones(8))


def test_fsq_3x3_enumeration():
    spec = tk.FsqSpec((3, 3))
    g = np.linspace(-3, 3, 121)
    z = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    q = tk.fsq_quantize_array(z, spec)
    assert len({tuple(r) for r in q}) == 9
    ids = tk.fsq_index(q, spec)
    assert sorted(set(ids.tolist())) == list(range(9))


@pytest.mark.parametrize("levels", [(3, 3), (8, 8), (2, 3, 4), (4, 4, 4, 4, 4, 4), (5, 7, 2, 3, 2, 4)])
def test_fsq_index_bijection(levels):
    spec = tk.FsqSpec(levels)
    assert spec.codebook_size <= 4096
    codes = np.arange(spec.codebook_size)
    pts = tk.fsq_from_index(codes, spec)
    assert np.array_equal(tk.fsq_index(pts, spec), codes)
    assert len({tuple(p) for p in pts}) == spec.codebook_size
    # every decoded point is on its channel lattice
    for i in range(spec.dim):
        assert np.isin(pts[:, i], spec.lattice(i)).all()


def test_fsq_index_errors():
    spec = tk.FsqSpec((3, 3))
    with pytest.raises(ValueError):
        tk.fsq_index(np.array([0.3, 0.0]), spec)
    with pytest.raises(ValueError):
        tk.fsq_from_index(9, spec)
    with pytest.raises(ValueError):
        tk.FsqSpec((1, 3))


def test_fsq_zero_saturation_and_tie():
    odd = tk.FsqSpec((3, 5))
    assert np.array_equal(tk.fsq_quantize_array(np.zeros(2), odd), np.zeros(2))
    assert tk.fsq_quantize_array(np.array([1e6]), tk.FsqSpec((3,)))[0] == 1.0
    assert tk.fsq_quantize_array(np.array([-1e6]), tk.FsqSpec((3,)))[0] == -1.0
    # even levels: 0 is the midpoint of -1/(L-1) and +1/(L-1); ties go to +
    even = tk.FsqSpec((4,))
    assert tk.fsq_quantize_array(np.zeros(1), even)[0] == pytest.approx(1 / 3)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.integers(2, 9), min_size=1, max_size=5),
    st.integers(0, 2**32 - 1),
    st.floats(0.1, 20.0),
)
def test_fsq_idempotent_and_on_lattice(levels, seed, scale):
    spec = tk.FsqSpec(tuple(levels))
    z = np.random.default_rng(seed).normal(scale=scale, size=(50, spec.dim))
    q = tk.fsq_quantize_array(z, spec)
    assert np.array_equal(tk.fsq_quantize_array(q, spec), q)
    for i in range(spec.dim):
        assert np.isin(q[:, i], spec.lattice(i)).all()


def test_fsq_straight_through_matches_fd_of_downstream():
    """d loss / d z = (d f / d zq evaluated at zq) * squash'(z) on a 2-channel spec."""
    spec = tk.FsqSpec((5, 4))
    rng = np.random.default_rng(0)
    z = Tensor(rng.uniform(-1.4, 1.4, size=(6, 2)), requires_grad=True)
    a = rng.normal(size=(2, 3))

    def f(zq):
        return T.tsum(T.tanh(T.matmul(zq, Tensor(a))))

    with Tape() as tape:
        loss = f(tk.fsq_quantize(z, spec))
    tape.backward(loss)
    zq = tk.fsq_quantize_array(z.data, spec)
    dfdq, _ = numeric_grad(lambda: float(f(Tensor(zq)).data), zq, 1e-6)
    _, ds = tk._squash(z.data, spec.half)
    assert rel_err(z.grad, dfdq * ds) < 1e-6


# encoder, decoder, scorer


def test_desk_latent_grid_and_decode_contract():
    cfg = tk.TokenizerConfig()
    assert cfg.latent_grid == (8, 8, 8)
    p = tk.init_params(cfg)
    x = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 16, 64, 64)))
    z = tk.encode(p, x, cfg)
    assert z.shape == (1, 8, 8, 8, 8)
    y = tk.decode(p, Tensor(tk.fsq_quantize_array(z.data, cfg.fsq)), cfg)
    assert y.shape == x.shape and y.data.min() >= 0 and y.data.max() <= 1


def test_config_rejects_bad_geometry():
    with pytest.raises(ValueError):
        tk.TokenizerConfig(frames=15)
    with pytest.raises(ValueError):
        tk.TokenizerConfig(height=60)
    with pytest.raises(ValueError):
        tk.TokenizerConfig(channels=(16,))


def test_static_video_scores_zero():
    p = tk.init_params(tk.TokenizerConfig(), seed=3)
    frame = np.random.default_rng(0).uniform(size=(3, 1, 64, 64))
    x = Tensor(np.repeat(frame, 16, axis=1)[None])
    s = tk.score_tokens(p, x, tk.TokenizerConfig())
    assert s.shape == (1, 7, 8, 8) and not s.data.any()


def test_one_patch_change_peaks_at_that_token():
    cfg = tk.TokenizerConfig()
    p = tk.init_params(cfg, seed=5)
    rng = np.random.default_rng(1)
    frame = rng.uniform(size=(3, 1, 64, 64))
    vid = np.repeat(frame, 16, axis=1)
    vid[:, 14:16, 24:32, 40:48] = rng.uniform(size=(3, 2, 8, 8))  # latent (7, 3, 5)
    s = tk.importance_map(tk.score_tokens(p, Tensor(vid[None]), cfg).data[0], "infer")
    assert np.unravel_index(np.argmax(s), s.shape) == (7, 3, 5)
    assert np.count_nonzero(s) == 1


def test_scores_invariant_to_appending_last_pair():
    cfg = tk.TokenizerConfig()
    longer = tk.TokenizerConfig(frames=18)
    p = tk.init_params(cfg, seed=2)
    vid = V.gen_moving_sprites(V.SceneSpec(seed=4)).video
    ext = np.concatenate([vid, vid[:, -2:]], axis=1)
    a = tk.score_tokens(p, Tensor(vid[None]), cfg).data
    b = tk.score_tokens(p, Tensor(ext[None]), longer).data
    np.testing.assert_array_equal(b[:, :-1], a)
    assert not b[:, -1].any()


# selection


def test_train_selection_keeps_frame_zero_plus_k():
    s = np.random.default_rng(0).random((8, 16, 16))
    s[0] = 0.0  # keep-all ignores the scores on frame 0
    mask, _ = tk.select_topk(s, 768, "train")
    assert mask.sum() == 1024 and mask[0].all()
    rest = s[1:].reshape(-1)
    assert np.array_equal(np.sort(rest[mask[1:].reshape(-1)]), np.sort(rest)[-768:])


def test_infer_selection_paper_count():
    k = tk.infer_keep_count(8 * 14 * 14, 0.15)
    assert k == 235
    s = np.random.default_rng(1).random((8, 14, 14))
    mask, w = tk.select_topk(s, k, "infer")
    assert mask.sum() == 235
    assert ((w >= 0.5) == mask).all()


def test_selection_ties_and_errors():
    mask, _ = tk.select_topk(np.ones((2, 2, 2)), 3, "infer")
    assert np.flatnonzero(mask).tolist() == [0, 1, 2]
    mask, _ = tk.select_topk(np.ones((2, 2, 2)), 3, "train")
    assert np.flatnonzero(mask).tolist() == [0, 1, 2, 3, 4, 5, 6]
    with pytest.raises(ValueError):
        tk.select_topk(np.ones((2, 2, 2)), 5, "train")
    with pytest.raises(ValueError):
        tk.select_topk(np.ones((2, 2, 2)), 0, "infer")


def test_topk_mask_matches_select_topk_and_counts():
    s = np.random.default_rng(2).random((3, 5, 4, 4))
    m = tk.topk_mask(Tensor(s), 11).data
    assert (m.reshape(3, -1).sum(axis=1) == 11).all()
    for b in range(3):
        ref, _ = tk.select_topk(s[b], 11, "infer")
        assert np.array_equal(m[b].astype(bool), ref)


# training graph


def tiny_batch(seed=0):
    return np.random.default_rng(seed).uniform(size=(2, 3, TINY.frames, TINY.height, TINY.width))


def test_forward_zero_masks_and_budget():
    p = tk.init_params(TINY, seed=1)
    out = tk.forward(p, tiny_batch(), TINY)
    m = out.mask.data
    assert m.shape == (2, 2, 4, 4)
    assert (m.reshape(2, -1).sum(axis=1) == 16 + 6).all() and m[:, 0].all()
    kept = out.zq.data * m[..., None]
    assert not kept[m == 0].any()
    cfg = tk.TokenizerConfig(**{**TINY.__dict__, "topk_includes_first": True, "train_topk": 20})
    assert (tk.forward(p, tiny_batch(), cfg).mask.data.reshape(2, -1).sum(axis=1) == 20).all()


def surrogate_loss(p, x, cfg, ref):
    """Smooth function whose gradient at the reference params equals the straight-through one.

    Rounding is replaced by ``zq0 + squash(z) - squash(z0)`` and the hard mask
    by ``m0 + sig((s - thr0)/tau0) - sig((s0 - thr0)/tau0)``, with all ``*0``
    quantities frozen at the reference point.
    """
    half = cfg.fsq.half
    z = tk.encode(p, x, cfg).data
    s = tk.score_tokens(p, x, cfg).data
    sq, _ = tk._squash(z, half)
    zr = ref["zq"] + sq - ref["sq"]
    sig = lambda v: 0.5 * (1 + np.tanh(0.5 * (v - ref["thr"]) / ref["tau"]))
    rest = ref["m"][:, 1:] + sig(s) - sig(ref["s"])
    m = np.concatenate([ref["m"][:, :1], rest], axis=1)
    recon = tk.decode(p, Tensor(zr * m[..., None]), cfg).data
    return float(((recon - x.data) ** 2).mean())


def test_tokenizer_graph_matches_surrogate_fd():
    p = tk.init_params(TINY, seed=7)
    for name, t in p.items():
        if name.endswith(".w"):
            t.data *= 10.0  # O(1) latents, so finite differences are well conditioned
    x = Tensor(tiny_batch(3))
    assert 0.3 < np.abs(tk.encode(p, x, TINY).data).max() < 1.0
    with Tape() as tape:
        out = tk.forward(p, x, TINY)
    tape.backward(out.loss, p.values())
    s = out.scores.data
    flat = s.reshape(s.shape[0], -1)
    ref = {
        "zq": out.zq.data,
        "sq": tk._squash(out.z.data, TINY.fsq.half)[0],
        "m": out.mask.data,
        "s": s,
        "thr": np.sort(flat, axis=1)[:, ::-1][:, TINY.train_topk - 1].reshape(-1, 1, 1, 1),
        "tau": TINY.tau_scale * flat.std(),
    }
    assert surrogate_loss(p, x, TINY, ref) == pytest.approx(float(out.loss.data), rel=1e-12)
    worst = 0.0
    for name, t in p.items():
        num, mask = numeric_grad(lambda: surrogate_loss(p, x, TINY, ref), t.data, 1e-5, max_entries=12)
        worst = max(worst, rel_err(t.grad[mask], num[mask]))
    assert worst < 1e-4
    score_grad = sum(np.abs(p[k].grad).sum() for k in p if k.startswith("score."))
    assert score_grad > 0


def test_train_step_finite_and_resumable(tmp_path):
    sched = Schedule(1e-3, 2, 10)
    a = tk.TokenizerTrainer.create(TINY, sched, seed=1)
    for _ in range(3):
        assert np.isfinite(a.step(tiny_batch()))
    b = tk.TokenizerTrainer.create(TINY, sched, seed=9)
    b.load_state_arrays({k: v.copy() for k, v in a.state_arrays().items()})
    for i in range(3):
        assert a.step(tiny_batch(i)) == b.step(tiny_batch(i))
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)
    tk.save_tokenizer(tmp_path / "t.lvmt", TINY, a.params)
    back = tk.load_tokenizer_params(tmp_path / "t.lvmt", TINY)
    assert all(np.array_equal(back[k].data, a.params[k].data) for k in a.params)


def test_train_step_rejects_nonfinite():
    tr = tk.TokenizerTrainer.create(TINY, Schedule(1e-3, 2, 10))
    bad = tiny_batch()
    bad[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        tr.step(bad)


@pytest.mark.slow
def test_loss_halves_in_200_steps_on_fixed_batch():
    cfg = tk.TokenizerConfig()
    tr = tk.TokenizerTrainer.create(cfg, Schedule(1e-3, 20, 200), seed=0)
    batch = np.stack([V.gen_moving_sprites(V.SceneSpec(seed=i)).video for i in range(8)])
    first = tr.step(batch)
    for _ in range(198):
        tr.step(batch)
    last = tr.step(batch)
    assert last <= 0.5 * first, (first, last)


# long videos


def test_long_video_windows_stack():
    cfg = tk.TokenizerConfig()
    p = tk.init_params(cfg, seed=4)
    vid = V.gen_moving_sprites(V.SceneSpec(frames=32, seed=2)).video
    lt = tk.tokenize_long_video(vid, p, cfg)
    assert lt.z.shape == (16, 8, 8, 8) and lt.scores.shape == (16, 8, 8) and lt.padded == 0
    for w in range(2):
        clip = Tensor(vid[None, :, 16 * w : 16 * (w + 1)])
        np.testing.assert_array_equal(lt.z[8 * w : 8 * (w + 1)], tk.encode(p, clip, cfg).data[0])
        s = tk.importance_map(tk.score_tokens(p, clip, cfg).data[0], "infer")
        np.testing.assert_array_equal(lt.scores[8 * w : 8 * (w + 1)], s)
    assert lt.selected.sum() == tk.infer_keep_count(1024, 0.15)
    single = tk.tokenize_long_video(vid[:, :16], p, cfg)
    np.testing.assert_array_equal(single.z, lt.z[:8])


def test_long_video_padding_and_empty():
    cfg = tk.TokenizerConfig()
    p = tk.init_params(cfg)
    vid = V.gen_moving_sprites(V.SceneSpec(frames=20, seed=1)).video
    lt = tk.tokenize_long_video(vid, p, cfg)
    assert lt.padded == 12 and lt.z.shape[0] == 16
    with pytest.raises(ValueError):
        tk.tokenize_long_video(np.zeros((3, 0, 64, 64)), p, cfg)


def test_long_video_paper_grid():
    cfg = tk.TokenizerConfig(height=224, width=224, patch=(16, 16), channels=(2, 2, 2), scorer_channels=2)
    p = tk.init_params(cfg)
    vid = np.random.default_rng(0).uniform(size=(3, 128, 224, 224))
    lt = tk.tokenize_long_video(vid, p, cfg)
    assert lt.scores.shape == (64, 14, 14)
    assert lt.zq.shape == (64, 14, 14, 8)


def test_lvtk_round_trip(tmp_path):
    cfg = tk.TokenizerConfig()
    p = tk.init_params(cfg, seed=1)
    lt = tk.tokenize_long_video(V.gen_moving_sprites(V.SceneSpec(seed=3)).video, p, cfg)
    tk.save_tokens(lt, tmp_path / "a.lvtk")
    back = tk.load_tokens(tmp_path / "a.lvtk")
    for f in ("zq", "scores", "selected"):
        np.testing.assert_array_equal(getattr(back, f), getattr(lt, f))
    tk.save_tokens(back, tmp_path / "b.lvtk")
    assert (tmp_path / "a.lvtk").read_bytes() == (tmp_path / "b.lvtk").read_bytes()
