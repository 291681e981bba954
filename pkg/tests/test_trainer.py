import numpy as np
import pytest

from hashpress.autodiff import Tensor
from hashpress.codec import CodecConfig, CodecModel
from hashpress.dataset import SyntheticSceneConfig, generate_scene
from hashpress.hashhead import HashHead, HashHeadConfig
from hashpress.trainer import (
    Adam,
    TrainingDiverged,
    TrainSchedule,
    eval_psnr,
    flatten_task_gradient,
    load_checkpoint,
    mgda_combine,
    pcgrad,
    save_checkpoint,
    stage1_train,
    stage2_train,
    unflatten_to,
    write_log,
)


def grid_min_norm(g1, g2, points=10_001):
    alphas = np.linspace(0.0, 1.0, points)
    combos = alphas[:, None] * g1[None, :] + (1 - alphas)[:, None] * g2[None, :]
    sq = (combos * combos).sum(axis=1)
    best = int(np.argmin(sq))
    return combos[best], float(sq[best])


def test_mgda_symmetric_example():
    combined = mgda_combine(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert np.allclose(combined, [0.5, 0.5])


def test_mgda_coincident_gradients():
    g = np.array([0.3, -1.2, 2.0])
    assert np.allclose(mgda_combine(g, g.copy()), g)


def test_mgda_shorter_vector_wins():
    g1 = np.array([0.4, -0.2, 1.0])
    combined = mgda_combine(g1, 2.0 * g1)
    assert np.allclose(combined, g1)
    _, grid_sq = grid_min_norm(g1, 2.0 * g1)
    assert float(combined @ combined) <= grid_sq + 1e-12


def test_mgda_both_zero():
    z = np.zeros(4)
    assert np.array_equal(mgda_combine(z, z), z)


def test_mgda_matches_grid_oracle_and_descent_property():
    rng = np.random.default_rng(0)
    for _ in range(50):
        g1 = rng.normal(size=8)
        g2 = rng.normal(size=8)
        g1 /= np.linalg.norm(g1)
        g2 /= np.linalg.norm(g2)
        combined = mgda_combine(g1, g2)
        _, grid_sq = grid_min_norm(g1, g2)
        ours = float(combined @ combined)
        assert abs(ours - grid_sq) < 1e-6
        assert np.linalg.norm(combined) <= min(np.linalg.norm(g1), np.linalg.norm(g2)) + 1e-12
        if ours > 1e-9:
            assert combined @ g1 >= -1e-12
            assert combined @ g2 >= -1e-12


def test_pcgrad_hand_example():
    g1 = np.array([1.0, 0.0])
    g2 = np.array([-1.0, 1.0])
    projected, total = pcgrad([g1, g2], np.random.default_rng(0))
    assert np.allclose(projected[0], [0.5, 0.5])
    assert abs(projected[0] @ g2) < 1e-12
    assert np.allclose(total, projected[0] + projected[1])


def test_pcgrad_nonconflicting_unchanged():
    g1 = np.array([1.0, 0.5])
    g2 = np.array([0.5, 1.0])
    projected, _ = pcgrad([g1, g2], np.random.default_rng(1))
    assert np.array_equal(projected[0], g1)
    assert np.array_equal(projected[1], g2)


def test_pcgrad_identical_gradients_sum():
    g = np.array([0.2, -0.4, 1.0])
    _, total = pcgrad([g, g.copy(), g.copy()], np.random.default_rng(2))
    assert np.allclose(total, 3 * g)


def test_pcgrad_two_tasks_order_independent():
    rng = np.random.default_rng(3)
    for _ in range(30):
        g1, g2 = rng.normal(size=(2, 6))
        pa, ta = pcgrad([g1, g2], np.random.default_rng(10))
        pb, tb = pcgrad([g2, g1], np.random.default_rng(99))
        assert np.allclose(ta, tb)
        assert np.allclose(pa[0], pb[1]) and np.allclose(pa[1], pb[0])


def test_pcgrad_zero_norm_opponent_skipped():
    g1 = np.array([1.0, 0.0])
    z = np.zeros(2)
    projected, total = pcgrad([g1, z], np.random.default_rng(4))
    assert np.array_equal(projected[0], g1)
    assert np.array_equal(total, g1)


def test_pcgrad_trace_orthogonality():
    rng = np.random.default_rng(5)
    for _ in range(20):
        grads = [rng.normal(size=10) for _ in range(4)]
        trace = []
        pcgrad(grads, np.random.default_rng(6), trace=trace)
        for _i, _j, dot_after in trace:
            assert dot_after >= -1e-12


def test_pcgrad_dimension_mismatch():
    with pytest.raises(ValueError):
        pcgrad([np.ones(3), np.ones(4)], np.random.default_rng(0))


def make_params(values):
    return {k: Tensor(np.array(v), requires_grad=True) for k, v in values.items()}


def test_adam_zero_gradient_fixed_point():
    params = make_params({"a": [1.0, -2.0]})
    opt = Adam(params, lr=0.1)
    opt.step({"a": np.zeros(2)})
    assert np.array_equal(params["a"].data, [1.0, -2.0])


def test_adam_descends_on_quadratic():
    params = make_params({"x": [1.0]})
    opt = Adam(params, lr=0.1)
    for _ in range(20):
        g = 2.0 * params["x"].data
        opt.step({"x": g})
    assert abs(params["x"].data[0]) < 1.0


def test_adam_deterministic():
    def run():
        params = make_params({"x": [1.0, 2.0]})
        opt = Adam(params, lr=0.05)
        for i in range(10):
            opt.step({"x": params["x"].data * (i + 1)})
        return params["x"].data.copy()

    assert np.array_equal(run(), run())


def test_adam_lr_factors_respected():
    params = make_params({"codec.w": [1.0], "hash_head.w": [1.0]})
    opt = Adam(params, lr=0.1, lr_factors={"codec.": 0.0})
    opt.step({"codec.w": np.ones(1), "hash_head.w": np.ones(1)})
    assert params["codec.w"].data[0] == 1.0  # frozen
    assert params["hash_head.w"].data[0] != 1.0


def test_adam_rejects_nonfinite_gradient():
    params = make_params({"x": [1.0]})
    opt = Adam(params, lr=0.1)
    with pytest.raises(TrainingDiverged):
        opt.step({"x": np.array([np.nan])})


def test_flatten_unflatten_roundtrip():
    params = make_params({"a": [[1.0, 2.0]], "b": [3.0, 4.0, 5.0]})
    flat = flatten_task_gradient([params["a"].data, params["b"].data])
    back = unflatten_to(params, ["a", "b"], flat)
    assert np.array_equal(back["a"], params["a"].data)
    assert np.array_equal(back["b"], params["b"].data)


def tiny_setup(n=24, seed=0):
    cfg = SyntheticSceneConfig(size=16, seed=seed)
    images = np.empty((n, 16, 16, 3))
    labels = np.empty((n, cfg.classes))
    for i in range(n):
        images[i], labels[i] = generate_scene(cfg, np.random.default_rng([seed, i]))
    codec_cfg = CodecConfig(widths=(8, 12), latent_channels=6, hyper_widths=(8, 12),
                            hyper_channels=4, mixtures=2, lam=0.05)
    return images, labels, codec_cfg


def test_stage1_descends_and_logs():
    images, _, codec_cfg = tiny_setup()
    model = CodecModel(codec_cfg, seed=1)
    sched = TrainSchedule(stage1_steps=60, batch=4, seed=3, early_stop_window=0)
    rows = stage1_train(images, model, sched)
    assert len(rows) == 60
    first = np.mean([r[2] for r in rows[:10]])
    last = np.mean([r[2] for r in rows[-10:]])
    assert last < first
    assert all(len(r) == 8 for r in rows)


def test_stage1_bit_identical_across_runs():
    images, _, codec_cfg = tiny_setup()
    sched = TrainSchedule(stage1_steps=25, batch=4, seed=11, early_stop_window=0)

    def run():
        model = CodecModel(codec_cfg, seed=2)
        stage1_train(images, model, sched)
        return {k: v.data.copy() for k, v in model.params.items()}

    a, b = run(), run()
    for k in a:
        assert np.array_equal(a[k], b[k]), k


def test_stage2_trains_and_freeze_factor_keeps_codec():
    images, labels, codec_cfg = tiny_setup()
    model = CodecModel(codec_cfg, seed=4)
    sched = TrainSchedule(stage1_steps=30, stage2_steps=20, batch=4, seed=5,
                          early_stop_window=0, codec_lr_factor=0.0)
    stage1_train(images, model, sched)
    snapshot = {k: v.data.copy() for k, v in model.params.items()}
    head = HashHead(HashHeadConfig(q=16, classes=labels.shape[1], hidden=8),
                    latent_channels=codec_cfg.latent_channels, seed=4)
    rows = stage2_train(images, labels, model, head, sched)
    assert len(rows) == 20
    for k, v in snapshot.items():
        assert np.array_equal(v, model.params[k].data), k  # frozen codec untouched
    first_psnr = rows[0][7]
    assert all(len(r) == 8 for r in rows)
    assert np.isfinite(first_psnr)


def test_stage2_moves_codec_with_reduced_rate():
    images, labels, codec_cfg = tiny_setup()
    model = CodecModel(codec_cfg, seed=6)
    sched = TrainSchedule(stage1_steps=10, stage2_steps=10, batch=4, seed=7,
                          early_stop_window=0, codec_lr_factor=0.1)
    stage1_train(images, model, sched)
    snapshot = {k: v.data.copy() for k, v in model.params.items()}
    head = HashHead(HashHeadConfig(q=16, classes=labels.shape[1], hidden=8),
                    latent_channels=codec_cfg.latent_channels, seed=6)
    stage2_train(images, labels, model, head, sched)
    moved = any(not np.array_equal(snapshot[k], model.params[k].data) for k in snapshot)
    assert moved


def test_schedule_validation():
    with pytest.raises(ValueError):
        TrainSchedule(lr=0.0)
    with pytest.raises(ValueError):
        TrainSchedule(codec_lr_factor=1.5)


def test_eval_psnr_finite():
    images, _, codec_cfg = tiny_setup(n=6)
    model = CodecModel(codec_cfg, seed=8)
    value = eval_psnr(model, images)
    assert np.isfinite(value) and value > 0


def test_checkpoint_roundtrip(tmp_path):
    images, labels, codec_cfg = tiny_setup(n=8)
    model = CodecModel(codec_cfg, seed=9)
    head = HashHead(HashHeadConfig(q=8, classes=labels.shape[1], hidden=8),
                    latent_channels=codec_cfg.latent_channels, seed=9)
    sched = TrainSchedule(stage1_steps=5, batch=4, seed=9, early_stop_window=0)
    stage1_train(images, model, sched)
    p = tmp_path / "model.jckp"
    save_checkpoint(p, model, head, sched, stage=1, extra={"note": "t"})
    model2, head2, header = load_checkpoint(p)
    assert header["stage"] == 1
    assert header["codec_config"]["latent_channels"] == codec_cfg.latent_channels
    for k in model.params:
        assert np.array_equal(model.params[k].data, model2.params[k].data)
    for k in head.params:
        assert np.array_equal(head.params[k].data, head2.params[k].data)
    # deterministic bytes
    save_checkpoint(tmp_path / "again.jckp", model, head, sched, stage=1, extra={"note": "t"})
    assert (tmp_path / "again.jckp").read_bytes() == p.read_bytes()


def test_checkpoint_without_head(tmp_path):
    images, _, codec_cfg = tiny_setup(n=4)
    model = CodecModel(codec_cfg, seed=10)
    p = tmp_path / "codec.jckp"
    save_checkpoint(p, model)
    model2, head2, _ = load_checkpoint(p)
    assert head2 is None
    for k in model.params:
        assert np.array_equal(model.params[k].data, model2.params[k].data)


def test_write_log_format(tmp_path):
    rows = [[0, 1, 1.25, "", "", "", 0.5, 30.0], [1, 2, 1.0, 2.0, 3.0, 4.0, 0.4, 31.0]]
    p = tmp_path / "log.csv"
    write_log(p, rows)
    lines = p.read_text().splitlines()
    assert lines[0] == "step,stage,L_C,L_p,L_b,L_c,bpp,psnr"
    assert len(lines) == 3
    assert all(len(line.split(",")) == 8 for line in lines)
