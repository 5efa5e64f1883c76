import json
import math

import numpy as np
import pytest

from icontrast import trainrun as tr
from icontrast import vit
from icontrast.evalmetrics import cosine_margin, linear_probe, token_separability
from icontrast.numerics import Rng
from icontrast.synthworld import SceneConfig, generate

SMALL_VIT = vit.ViTConfig(height=32, width=32, patch=8, dim=16, layers=2, heads=2)


def small_cfg(**kw):
    base = dict(vit=SMALL_VIT, crop_h=32, crop_w=32, batch_size=4, epochs=2, eval_samples=4, lr=1e-3)
    base.update(kw)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def scenes():
    return generate(8, SceneConfig(), 42)


# ---------------------------------------------------------------- Adam

def test_adam_zero_grads_keep_params():
    p = {"w": np.array([1.0, -2.0])}
    st = tr.adam_init(p)
    st.m["w"][:] = [0.5, 0.5]
    st.v["w"][:] = [0.25, 0.25]
    hyper = tr.AdamHyper(lr=0.1)
    before = p["w"].copy()
    # moments decay; params are checked separately from zero moments, where the step is exactly 0
    tr.adam_step(p, {"w": np.zeros(2)}, st, hyper)
    np.testing.assert_allclose(st.m["w"], [0.45, 0.45])
    np.testing.assert_allclose(st.v["w"], [0.24975, 0.24975])
    q = {"w": before.copy()}
    st2 = tr.adam_init(q)
    tr.adam_step(q, {"w": np.zeros(2)}, st2, hyper)
    np.testing.assert_array_equal(q["w"], before)


def test_adam_first_step_opposes_gradient():
    p = {"w": np.zeros(4)}
    g = np.array([1.0, -3.0, 0.5, -0.01])
    tr.adam_step(p, {"w": g}, tr.adam_init(p), tr.AdamHyper(lr=0.01))
    assert np.all(np.sign(p["w"]) == -np.sign(g))


def test_adam_two_step_scalar_trace():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    x, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate([0.5, -1.0], start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    p = {"x": np.array(1.0)}
    st = tr.adam_init(p)
    for g in (0.5, -1.0):
        tr.adam_step(p, {"x": np.array(g)}, st, tr.AdamHyper(lr, b1, b2, eps))
    assert float(p["x"]) == pytest.approx(x, abs=1e-15)


def test_adam_rejects_non_finite():
    p = {"w": np.zeros(2)}
    with pytest.raises(FloatingPointError, match="w"):
        tr.adam_step(p, {"w": np.array([np.nan, 0.0])}, tr.adam_init(p), tr.AdamHyper())


# ---------------------------------------------------------------- metrics

def test_margin_identical_features_is_zero():
    f = np.ones((6, 4))
    assert cosine_margin(f, np.array([1, 1, 0, 0, 0, 0])) == pytest.approx(0.0, abs=1e-15)


def test_margin_orthogonal_classes_is_one():
    f = np.array([[1, 0], [2, 0], [0, 3], [0, 1], [0, 5]], dtype=float)
    assert cosine_margin(f, np.array([1, 1, 0, 0, 0])) == pytest.approx(1.0, abs=1e-15)


def test_margin_random_features_near_zero():
    rng = Rng(0)
    vals = []
    for _ in range(100):
        f = rng.normal_array((49, 32))
        m = np.zeros(49, dtype=int)
        m[:10] = 1
        vals.append(cosine_margin(f, m))
    assert abs(np.mean(vals)) <= 0.05


def test_margin_degenerate_raises():
    from icontrast.contrast import DegenerateMask
    with pytest.raises(DegenerateMask):
        cosine_margin(np.ones((3, 2)), np.zeros(3))
    assert len(token_separability([np.eye(3), np.eye(3)], np.array([1, 0, 0]))) == 2


def test_probe_separated_features():
    rng = Rng(1)
    y = (rng.uniform_array(200) < 0.3).astype(int)
    x = rng.normal_array((200, 5)) * 0.1
    x[:, 0] += 3 * y
    assert linear_probe(x, y, 0) == 1.0
    assert linear_probe(x, y, 0, balance=False) == 1.0


def test_probe_shuffled_labels_near_majority_rate():
    rng = Rng(2)
    x = rng.normal_array((2000, 8))
    y = (rng.uniform_array(2000) < 0.3).astype(int)
    assert abs(linear_probe(x, y, 3) - 0.5) <= 0.05
    assert abs(linear_probe(x, y, 3, balance=False) - 0.7) <= 0.05


def test_probe_deterministic_and_errors():
    rng = Rng(3)
    x = rng.normal_array((100, 3))
    y = (x[:, 0] > 0).astype(int)
    assert linear_probe(x, y, 7) == linear_probe(x, y, 7)
    with pytest.raises(ValueError):
        linear_probe(x, np.zeros(100), 0)


# ---------------------------------------------------------------- config

def test_config_roundtrip_and_validation(tmp_path):
    cfg = small_cfg(lam=0.5)
    back = tr.TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    with pytest.raises(ValueError, match="unknown"):
        tr.TrainConfig.from_dict({"nope": 1})
    with pytest.raises(ValueError):
        small_cfg(crop_h=24).validate()
    with pytest.raises(ValueError):
        small_cfg(lam=-1).validate()
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"lam": 0.25, "vit": {"dim": 8}}))
    loaded = tr.load_config(path)
    assert loaded.lam == 0.25 and loaded.vit.dim == 8 and loaded.vit.layers == 4


# ---------------------------------------------------------------- objective

def _batch(scenes, cfg, n=2):
    from icontrast.maskgrid import token_mask
    images, pmasks, targets = tr.crop_batch(scenes, np.arange(n), cfg, None)
    tmasks = [token_mask(m, cfg.beta, cfg.vit.patch) for m in pmasks]
    return images, tmasks, targets


def test_crop_targets_are_crop_centroids(scenes):
    from icontrast.maskgrid import center_crop_pair
    cfg = small_cfg()
    images, _, _ = tr.crop_batch(scenes, [0, 1], cfg, Rng(0))
    assert images.shape == (2, 32, 32, 3) and 0.0 <= images.min() and images.max() <= 1.0
    _, _, (top, left) = center_crop_pair(scenes.images[0], scenes.masks[0], 32, 32)
    rows, cols = np.nonzero(scenes.masks[0])
    unit = [(cols.mean() + 0.5 - left) / 32, (rows.mean() + 0.5 - top) / 32]
    _, _, t = tr.crop_batch(scenes, [0], cfg, None)
    np.testing.assert_allclose(t[0], np.array(unit) * 4, atol=1e-5)  # 4x4 token grid
    _, _, t = tr.crop_batch(scenes, [0], small_cfg(target_units="unit"), None)
    np.testing.assert_allclose(t[0], unit, atol=1e-6)


def test_lambda_zero_gives_task_only_gradients(scenes):
    cfg0 = small_cfg(lam=0.0)
    cfg_off = small_cfg(icon_enabled=False)
    params = tr.init_model(cfg0)
    images, tmasks, targets = _batch(scenes, cfg0)
    a = tr.loss_and_grads(params, images, tmasks, targets, cfg0, [1, 2])
    b = tr.loss_and_grads(params, images, tmasks, targets, cfg_off, [1, 2])
    assert a.icon_loss > 0 and b.icon_loss == 0
    for k in params:
        assert np.array_equal(a.grads[k], b.grads[k])


def test_total_loss_affine_in_lambda(scenes):
    params = tr.init_model(small_cfg())
    cfg_a, cfg_b = small_cfg(lam=0.0), small_cfg(lam=2.0)
    images, tmasks, targets = _batch(scenes, cfg_a)
    a = tr.loss_and_grads(params, images, tmasks, targets, cfg_a, [5, 6])
    b = tr.loss_and_grads(params, images, tmasks, targets, cfg_b, [5, 6])
    assert b.total_loss == pytest.approx(a.task_loss + 2.0 * b.icon_loss, rel=1e-12)
    assert a.icon_loss == pytest.approx(b.icon_loss, rel=1e-12)


def test_objective_with_keys_matches_loss_and_grads(scenes):
    cfg = small_cfg()
    params = tr.init_model(cfg)
    images, tmasks, targets = _batch(scenes, cfg, 3)
    tmasks[0] = np.zeros_like(tmasks[0])
    first = tr.loss_and_grads(params, images, tmasks, targets, cfg, [1, 2, 3])
    params["blk1.fc1_w"] = params["blk1.fc1_w"] + 0.01
    again = tr.loss_and_grads(params, images, tmasks, targets, cfg, [9, 9, 9], keys=first.records)
    got = tr.objective_with_keys(params, images, tmasks, targets, cfg, first.records)
    assert got == pytest.approx(again.total_loss, rel=1e-13)


def test_parallel_matches_reference(scenes):
    cfg = small_cfg()
    params = tr.init_model(cfg)
    images, tmasks, targets = _batch(scenes, cfg, 4)
    seeds = [11, 12, 13, 14]
    a = tr.loss_and_grads(params, images, tmasks, targets, cfg, seeds, threads=1)
    b = tr.loss_and_grads(params, images, tmasks, targets, cfg, seeds, threads=3)
    assert abs(a.total_loss - b.total_loss) <= 1e-9
    for k in params:
        np.testing.assert_allclose(a.grads[k], b.grads[k], atol=1e-9)


def test_degenerate_masks_only_leave_icon(scenes):
    cfg = small_cfg()
    params = tr.init_model(cfg)
    images, tmasks, targets = _batch(scenes, cfg)
    empty = [np.zeros_like(tmasks[0]), tmasks[1]]
    res = tr.loss_and_grads(params, images, empty, targets, cfg, [1, 2])
    only = tr.loss_and_grads(params, images[1:], tmasks[1:], targets[1:], cfg, [2])
    assert res.degenerate == 1
    assert res.icon_loss == pytest.approx(only.icon_loss, rel=1e-12)


# ---------------------------------------------------------------- training loop

def test_lambda_zero_trajectory_equals_no_icon(scenes):
    p0, _ = tr.train(small_cfg(lam=0.0), scenes)
    p1, _ = tr.train(small_cfg(icon_enabled=False), scenes)
    for k in p0:
        assert np.array_equal(p0[k], p1[k])


def test_train_deterministic_logs_and_checkpoints(tmp_path, scenes):
    outs = []
    cfg = small_cfg(checkpoint=str(tmp_path / "a.ickp"), metrics=str(tmp_path / "a.jsonl"))
    for _ in range(2):
        tr.train(cfg, scenes)
        lines = (tmp_path / "a.jsonl").read_text().splitlines()
        outs.append(([tr.mask_timing(x) for x in lines], (tmp_path / "a.ickp").read_bytes()))
    assert outs[0] == outs[1]
    header, records = tr.read_metric_log(tmp_path / "a.jsonl")
    assert header["config"]["lr"] == 1e-3
    assert [r["epoch"] for r in records] == [1, 2]
    assert {"task_loss", "icon_loss_layers", "total_loss", "cosine_margin", "probe_acc",
            "wall_time"} <= set(records[0])
    params, cfg = tr.load_model(tmp_path / "a.ickp")
    assert cfg == small_cfg(checkpoint=str(tmp_path / "a.ickp"), metrics=str(tmp_path / "a.jsonl"))
    assert set(params) == set(tr.init_model(cfg))


def test_total_loss_decreases_early():
    data = generate(64, SceneConfig(), 3)
    _, recs = tr.train(small_cfg(epochs=5, batch_size=8), data)
    assert recs[-1]["total_loss"] < recs[0]["total_loss"]


def test_threads_env(monkeypatch):
    monkeypatch.setenv("ICON_THREADS", "4")
    assert tr._threads(small_cfg()) == 4
    monkeypatch.setenv("ICON_THREADS", "x")
    with pytest.raises(ValueError):
        tr._threads(small_cfg())


# ---------------------------------------------------------------- exports and bench

def test_pgm_header(tmp_path):
    tr.write_pgm(tmp_path / "h.pgm", np.arange(12.0).reshape(3, 4))
    raw = (tmp_path / "h.pgm").read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n")
    pix = np.frombuffer(raw[len(b"P5\n4 3\n255\n"):], np.uint8)
    assert pix[0] == 0 and pix[-1] == 255 and pix.size == 12


def test_export_attention(tmp_path, scenes):
    cfg = small_cfg(epochs=1, checkpoint=str(tmp_path / "m.ickp"))
    tr.train(cfg, scenes)
    raw, pgm = tr.export_attention(tmp_path / "m.ickp", scenes.images[0], None, tmp_path / "att")
    grid = np.frombuffer(raw.read_bytes(), "<f4")
    assert grid.size == 16
    assert pgm.read_bytes().startswith(b"P5\n4 4\n255\n")


def test_bench_sampling_table():
    rows = tr.bench_sampling((14, 14), reps=1)
    assert len(rows) == 6 and {r["sampler"] for r in rows} == {"fps", "random"}
    assert all(r["median_s"] > 0 for r in rows)
    with pytest.raises(ValueError, match="infeasible"):
        tr.bench_sampling((4, 4), [(5, 25)], reps=1)
