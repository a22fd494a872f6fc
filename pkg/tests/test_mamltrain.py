import numpy as np
import pytest

from metalab.diffnet import NetParams, NetSpec, flatten, forward, init_params, loss_grad, unflatten
from metalab.mamltrain import (
    AdamState,
    InnerConfig,
    OuterConfig,
    TrainConfig,
    adam_step,
    batches_per_epoch,
    episode_losses,
    evaluate,
    head_only_adapt,
    inner_adapt,
    load_checkpoint,
    meta_gradient,
    read_curves_csv,
    sample_episodes,
    save_checkpoint,
    train_maml,
    write_curves_csv,
)
from metalab.taskgen import BenchmarkParams, Episode, build_finite_pool, infinite_pool, sample_episode, sample_task

TINY_TARGET = NetSpec((1, 6, 6, 1), "relu")


def make_episodes(n, seed, n_support=4, n_query=6):
    pool = build_finite_pool(BenchmarkParams(target_spec=TINY_TARGET), n, seed)
    return sample_episodes(pool.tasks, n_support, n_query, (-1.0, 1.0), seed)


def unrolled_loss(spec, theta, batch, cfg):
    return float(episode_losses(spec, unflatten(spec, theta), batch, cfg).mean())


def fd_meta_grad(spec, params, batch, cfg, h=1e-5):
    theta = flatten(params)
    out = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        out[i] = (unrolled_loss(spec, theta + e, batch, cfg) - unrolled_loss(spec, theta - e, batch, cfg)) / (2 * h)
    return out


# --- inner loop ---------------------------------------------------------------


def test_inner_zero_steps_is_identity_copy():
    spec = NetSpec((1, 5, 1), "sigmoid")
    p = init_params(spec, 0)
    ep = make_episodes(1, 0)
    q = inner_adapt(spec, p, ep.support_x[0], ep.support_y[0], InnerConfig(steps=0))
    assert q.bit_equal(p) and q is not p


def test_inner_zero_lr_is_identity():
    spec = NetSpec((1, 5, 1), "sigmoid")
    p = init_params(spec, 0)
    ep = make_episodes(1, 0)
    q = inner_adapt(spec, p, ep.support_x[0], ep.support_y[0], InnerConfig(steps=3, lr=0.0))
    assert q.bit_equal(p)


def test_inner_step_matches_manual_descent():
    spec = NetSpec((1, 5, 5, 1), "relu")
    p = init_params(spec, 1)
    ep = make_episodes(1, 2)
    x, y = ep.support_x[0], ep.support_y[0]
    manual = flatten(p)
    for _ in range(3):
        _, g = loss_grad(spec, unflatten(spec, manual), x, y)
        manual = manual - 0.05 * flatten(g)
    got = inner_adapt(spec, p, x, y, InnerConfig(steps=3, lr=0.05))
    np.testing.assert_array_equal(flatten(got), manual)


def test_inner_step_on_quadratic_loss():
    # linear chain y = w2 (w1 x): one step from w1=1, w2=0 moves w2 by lr * 2 * mean(x*y)
    spec = NetSpec((1, 1, 1), "identity")
    p = NetParams((np.ones((1, 1)), np.zeros((1, 1))), (np.zeros(1), np.zeros(1)))
    x = np.array([[1.0], [2.0]])
    y = 3.0 * x
    q = inner_adapt(spec, p, x, y, InnerConfig(steps=1, lr=0.1))
    assert q.weights[1][0, 0] == pytest.approx(0.1 * 2 * np.mean(x * y))
    assert q.biases[1][0] == pytest.approx(0.1 * 2 * np.mean(y))
    assert q.weights[0][0, 0] == 1.0 and q.biases[0][0] == 0.0


def test_batched_inner_adapt_matches_per_episode():
    spec = NetSpec((1, 6, 6, 1), "sigmoid")
    p = init_params(spec, 3)
    batch = make_episodes(4, 5)
    cfg = InnerConfig(steps=2)
    adapted = inner_adapt(spec, p, batch.support_x, batch.support_y, cfg)
    for i in range(4):
        single = inner_adapt(spec, p, batch.support_x[i], batch.support_y[i], cfg)
        for a, b in zip(flatten(single), flatten(adapted)[i]):
            assert a == pytest.approx(b, rel=1e-12, abs=1e-14)


# --- meta-gradient ------------------------------------------------------------


@pytest.mark.parametrize("steps", [1, 2])
@pytest.mark.parametrize("seed", range(4))
def test_meta_gradient_matches_finite_differences(steps, seed):
    spec = NetSpec((1, 8, 8, 1), "sigmoid")
    rng = np.random.default_rng(seed)
    params = unflatten(spec, rng.normal(scale=0.7, size=spec.n_params))
    batch = make_episodes(3, seed)
    cfg = InnerConfig(steps=steps, lr=0.1)
    loss, g, losses = meta_gradient(spec, params, batch, cfg)
    assert loss == pytest.approx(losses.mean())
    fd = fd_meta_grad(spec, params, batch, cfg)
    err = np.abs(flatten(g) - fd) / np.maximum(np.maximum(np.abs(fd), np.abs(flatten(g))), 1e-4)
    assert err.max() <= 1e-4


def test_meta_gradient_zero_steps_is_query_gradient():
    spec = NetSpec((1, 5, 1), "sigmoid")
    p = init_params(spec, 0)
    batch = make_episodes(3, 1)
    _, g, _ = meta_gradient(spec, p, batch, InnerConfig(steps=0))
    expect = np.mean(
        [flatten(loss_grad(spec, p, batch.query_x[i], batch.query_y[i])[1]) for i in range(3)], axis=0
    )
    np.testing.assert_allclose(flatten(g), expect, rtol=1e-12, atol=1e-15)


def test_first_order_equals_second_order_when_lr_is_zero():
    spec = NetSpec((1, 5, 5, 1), "sigmoid")
    p = init_params(spec, 0)
    batch = make_episodes(2, 1)
    a = meta_gradient(spec, p, batch, InnerConfig(steps=2, lr=0.0))[1]
    b = meta_gradient(spec, p, batch, InnerConfig(steps=2, lr=0.0, first_order=True))[1]
    np.testing.assert_array_equal(flatten(a), flatten(b))


def test_first_order_drops_hessian_terms():
    spec = NetSpec((1, 5, 5, 1), "sigmoid")
    p = init_params(spec, 0)
    batch = make_episodes(2, 1)
    cfg = InnerConfig(steps=1, lr=0.1, first_order=True)
    _, g, _ = meta_gradient(spec, p, batch, cfg)
    adapted = inner_adapt(spec, p, batch.support_x, batch.support_y, cfg)
    _, gq = loss_grad(spec, adapted, batch.query_x, batch.query_y)
    np.testing.assert_allclose(flatten(g), flatten(gq.mean_over_batch()), rtol=1e-12)


def test_meta_gradient_accepts_single_episode():
    spec = NetSpec((1, 4, 1), "sigmoid")
    p = init_params(spec, 0)
    task = sample_task(BenchmarkParams(target_spec=TINY_TARGET), 0)
    ep = sample_episode(task, 5, 5, (-1, 1), 0)
    assert isinstance(ep, Episode)
    loss, g, losses = meta_gradient(spec, p, ep, InnerConfig())
    assert losses.shape == (1,) and g.batch_shape == ()


def test_meta_gradient_with_batchnorm_matches_fd():
    from metalab.diffnet import BatchNormState

    spec = NetSpec((1, 6, 6, 1), "sigmoid", use_batchnorm=True)
    params = init_params(spec, 2)
    bn = BatchNormState.fresh(spec)
    batch = make_episodes(2, 3, n_support=6, n_query=6)
    cfg = InnerConfig(steps=1, lr=0.1)
    _, g, _ = meta_gradient(spec, params, batch, cfg, bn)

    def f(t):
        return float(episode_losses(spec, unflatten(spec, t), batch, cfg, bn).mean())

    theta, h = flatten(params), 1e-4
    fd = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        fd[i] = (-f(theta + 2 * e) + 8 * f(theta + e) - 8 * f(theta - e) + f(theta - 2 * e)) / (12 * h)
    err = np.abs(flatten(g) - fd) / np.maximum(np.maximum(np.abs(fd), np.abs(flatten(g))), 1e-4)
    assert err.max() <= 1e-4


# --- Adam ---------------------------------------------------------------------


def test_adam_first_step_moves_by_lr_times_sign():
    spec = NetSpec((2, 3, 1))
    p = init_params(spec, 0)
    g = unflatten(spec, np.linspace(-2, 3, spec.n_params) + 0.01)
    cfg = OuterConfig(adam_lr=0.01)
    q, st = adam_step(AdamState.zeros(spec.n_params), p, g, cfg)
    step = flatten(q) - flatten(p)
    np.testing.assert_allclose(step, -0.01 * np.sign(flatten(g)), rtol=1e-6)
    assert st.t == 1


def test_adam_matches_reference_sequence():
    cfg = OuterConfig(adam_lr=0.1)
    spec = NetSpec((1, 1, 1), "identity")
    theta = np.array([1.0, 0.0, -0.5, 2.0])
    p = unflatten(spec, theta)
    st = AdamState.zeros(4)
    m = v = np.zeros(4)
    for t in range(1, 6):
        g = np.array([2 * theta[0], theta[1] - 1, np.sin(theta[2]), 0.5])
        p, st = adam_step(st, p, unflatten(spec, g), cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta = theta - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(flatten(p), theta, rtol=1e-13)


def test_adam_zero_gradient_keeps_params():
    spec = NetSpec((2, 3, 1))
    p = init_params(spec, 0)
    q, _ = adam_step(AdamState.zeros(spec.n_params), p, unflatten(spec, np.zeros(spec.n_params)), OuterConfig())
    assert q.bit_equal(p)


def test_adam_shape_mismatch():
    spec = NetSpec((2, 3, 1))
    p = init_params(spec, 0)
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros(3), p, p, OuterConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        InnerConfig(steps=-1)
    with pytest.raises(ValueError):
        OuterConfig(beta1=1.0)
    with pytest.raises(ValueError):
        TrainConfig(eval_every=0)


# --- head-only adaptation -----------------------------------------------------


def test_head_only_recovers_linear_head():
    spec = NetSpec((1, 3, 3, 1), "relu")
    p = init_params(spec, 0)
    x = np.linspace(-1, 1, 40)[:, None]
    feats = forward(spec, p, x)[1].hidden[-2]
    w = np.array([[0.5, -1.0, 2.0]])
    y = feats @ w.T + 0.5
    q = head_only_adapt(spec, p, x, y, ridge=0.0)
    np.testing.assert_allclose(forward(spec, q, x)[0], y, atol=1e-8)
    for a, b in zip(q.weights[:-1], p.weights[:-1]):
        assert np.array_equal(a, b)


def test_head_only_single_point():
    spec = NetSpec((1, 4, 1), "sigmoid")
    p = init_params(spec, 0)
    q = head_only_adapt(spec, p, np.array([[0.3]]), np.array([[2.0]]))
    assert forward(spec, q, np.array([[0.3]]))[0][0, 0] == pytest.approx(2.0, abs=1e-4)


# --- training loop ------------------------------------------------------------


def small_setup(n_tasks=6):
    bench = BenchmarkParams(target_spec=TINY_TARGET)
    return (
        NetSpec((1, 6, 6, 1), "relu", use_batchnorm=True),
        build_finite_pool(bench, n_tasks, 0),
        infinite_pool(bench, 1),
    )


def test_meta_batches_per_epoch():
    bench = BenchmarkParams(target_spec=TINY_TARGET)
    assert batches_per_epoch(build_finite_pool(bench, 200, 0), 75) == 3
    assert batches_per_epoch(build_finite_pool(bench, 75, 0), 75) == 1
    assert batches_per_epoch(infinite_pool(bench, 0), 75) == 1


def test_zero_epochs_returns_init():
    spec, pool, val = small_setup()
    init = init_params(spec, 9)
    run = train_maml(spec, pool, val, train=TrainConfig(epochs=0, val_episodes=4), init=init)
    assert run.curve == []
    assert run.checkpoint_best.params.bit_equal(init)
    assert run.checkpoint_last.params.bit_equal(init)
    assert run.checkpoint_best.epoch == 0


def test_training_reduces_loss_and_is_deterministic():
    spec, pool, val = small_setup()
    kw = dict(
        inner=InnerConfig(),
        outer=OuterConfig(adam_lr=0.01, meta_batch_size=4),
        train=TrainConfig(epochs=30, eval_every=10, val_episodes=8, record_wall_time=False),
        seed=3,
    )
    a = train_maml(spec, pool, val, **kw)
    b = train_maml(spec, pool, val, **kw)
    assert a.curve == b.curve
    assert [r[0] for r in a.curve] == [10, 20, 30]
    assert all(r[3] == 0.0 for r in a.curve)
    assert a.checkpoint_last.params.bit_equal(b.checkpoint_last.params)
    assert a.checkpoint_last.adam.t == 60  # 6 tasks in batches of 4
    assert a.curve[-1][1] < a.initial_train_loss
    assert a.checkpoint_best.meta_val_loss == min([a.initial_val_loss] + [r[2] for r in a.curve])


def test_progress_callback_and_final_row():
    spec, pool, val = small_setup()
    rows = []
    run = train_maml(
        spec, pool, val, train=TrainConfig(epochs=7, eval_every=5, val_episodes=4), progress=rows.append
    )
    assert [r[0] for r in rows] == [5, 7]
    assert run.checkpoint_last.epoch == 7


def test_evaluate_deterministic_and_nonnegative():
    spec, pool, val = small_setup()
    p = init_params(spec, 0)
    from metalab.diffnet import BatchNormState

    bn = BatchNormState.fresh(spec)
    a = evaluate(spec, p, val, 10, InnerConfig(), 4, bn=bn)
    b = evaluate(spec, p, val, 10, InnerConfig(), 4, bn=bn)
    assert a == b and a[0] > 0 and a[1] >= 0


# --- persistence --------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    spec, pool, val = small_setup()
    run = train_maml(spec, pool, val, train=TrainConfig(epochs=3, eval_every=1, val_episodes=4))
    ck = run.checkpoint_last
    save_checkpoint(ck, tmp_path / "c.ckpt")
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert back.spec == ck.spec and back.epoch == ck.epoch
    assert back.params.bit_equal(ck.params)
    assert back.meta_val_loss == ck.meta_val_loss
    assert np.array_equal(back.adam.m, ck.adam.m) and back.adam.t == ck.adam.t
    for a, b in zip(back.bn.running_var, ck.bn.running_var):
        assert np.array_equal(a, b)
    x = np.linspace(-1, 1, 9)[:, None]
    assert np.array_equal(
        forward(spec, back.params, x, back.bn.with_mode("running"))[0],
        forward(spec, ck.params, x, ck.bn.with_mode("running"))[0],
    )


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"garbage")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")


def test_curves_csv_roundtrip(tmp_path):
    rows = [(10, 1.0 / 3, 2.5, 0.0), (20, 0.1, 1e-300, 1.25)]
    write_curves_csv(rows, tmp_path / "c.csv")
    assert read_curves_csv(tmp_path / "c.csv") == rows
    (tmp_path / "bad.csv").write_text("epoch,foo\n1,2\n")
    with pytest.raises(ValueError):
        read_curves_csv(tmp_path / "bad.csv")
