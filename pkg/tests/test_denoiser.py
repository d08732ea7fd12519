import numpy as np
import pytest

from conftest import SMALL, finite_difference_check, random_inputs
from diffplan import denoiser
from diffplan.denoiser import (
    AdamState,
    Checkpoint,
    DenoiserConfig,
    adam_update,
    init_params,
    load_checkpoint,
    loss_and_grad,
    predict_noise,
    save_checkpoint,
)
from diffplan.errors import DivergenceError


def test_zero_init_predicts_zero():
    params = init_params(SMALL, np.random.default_rng(0))
    a, s, k = random_inputs(SMALL, 5, np.random.default_rng(1))
    out = predict_noise(params, a, s, k)
    assert out.shape == a.shape
    assert np.all(out == 0.0)


def test_single_and_batched_agree(small_params):
    a, s, k = random_inputs(SMALL, 3, np.random.default_rng(2))
    batched = predict_noise(small_params, a, s, k)
    for i in range(3):
        np.testing.assert_allclose(predict_noise(small_params, a[i], s[i], k[i]), batched[i], rtol=1e-12, atol=1e-14)


def test_deterministic(small_params):
    a, s, k = random_inputs(SMALL, 4, np.random.default_rng(3))
    np.testing.assert_array_equal(predict_noise(small_params, a, s, k), predict_noise(small_params, a, s, k))


def test_no_cross_sample_coupling(small_params):
    rng = np.random.default_rng(4)
    a, s, k = random_inputs(SMALL, 6, rng)
    out = predict_noise(small_params, a, s, k)
    perm = rng.permutation(6)
    np.testing.assert_allclose(predict_noise(small_params, a[perm], s[perm], k[perm]), out[perm], rtol=1e-12, atol=1e-14)


def test_input_perturbation_is_lipschitz(small_params):
    rng = np.random.default_rng(5)
    a, s, k = random_inputs(SMALL, 1, rng)
    base = predict_noise(small_params, a, s, k)
    changes = []
    for delta in (1e-2, 1e-3, 1e-4):
        a2 = a.copy()
        a2[0, 1, 0] += delta
        changes.append(np.max(np.abs(predict_noise(small_params, a2, s, k) - base)) / delta)
    # first-order response: the ratio converges as delta shrinks
    assert abs(changes[1] - changes[2]) < 1e-2 * max(changes[2], 1e-8) + 1e-6
    assert changes[2] < 1e3


def test_shape_mismatch(small_params):
    a, s, k = random_inputs(SMALL, 2, np.random.default_rng(6))
    with pytest.raises(ValueError):
        predict_noise(small_params, a[:, :3], s, k)
    with pytest.raises(ValueError):
        predict_noise(small_params, a, s[:, :, :2], k)


def test_loss_gradient_matches_finite_differences(small_params):
    rng = np.random.default_rng(7)
    a, s, k = random_inputs(SMALL, 5, rng)
    target = rng.standard_normal(a.shape)
    _, grads = loss_and_grad(small_params, a, s, k, target)
    err = finite_difference_check(lambda p: loss_and_grad(p, a, s, k, target)[0], small_params, grads, rng)
    assert err <= 1e-4


@pytest.mark.parametrize("activation", ["silu", "tanh"])
def test_gradient_every_layer(activation):
    cfg = DenoiserConfig(H=4, A=2, T_o=2, S=3, E=8, hidden=(16, 16, 16), activation=activation)
    rng = np.random.default_rng(8)
    params = init_params(cfg, rng, zero_last=False)
    a, s, k = random_inputs(cfg, 4, rng)
    target = rng.standard_normal(a.shape)
    _, grads = loss_and_grad(params, a, s, k, target)
    err = finite_difference_check(lambda p: loss_and_grad(p, a, s, k, target)[0], params, grads, rng, per_tensor=10)
    assert err <= 1e-4


def test_loss_zero_at_own_prediction(small_params):
    a, s, k = random_inputs(SMALL, 3, np.random.default_rng(9))
    target = predict_noise(small_params, a, s, k)
    loss, grads = loss_and_grad(small_params, a, s, k, target)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads)


def test_duplicated_batch_same_mean(small_params):
    rng = np.random.default_rng(10)
    a, s, k = random_inputs(SMALL, 3, rng)
    target = rng.standard_normal(a.shape)
    l1, g1 = loss_and_grad(small_params, a, s, k, target)
    l2, g2 = loss_and_grad(
        small_params, np.concatenate([a, a]), np.concatenate([s, s]), np.concatenate([k, k]), np.concatenate([target, target])
    )
    assert l1 == pytest.approx(l2, rel=1e-13)
    for x, y in zip(g1, g2):
        np.testing.assert_allclose(x, y, rtol=1e-11, atol=1e-14)


def test_empty_batch_rejected(small_params):
    with pytest.raises(ValueError):
        loss_and_grad(small_params, np.zeros((0, 4, 2)), np.zeros((0, 2, 3)), np.zeros(0, int), np.zeros((0, 4, 2)))


def test_adam_zero_grad_keeps_params(small_params):
    state = AdamState.fresh(small_params)
    new, _ = adam_update(small_params, small_params.zeros_like(), state, 1e-3)
    for x, y in zip(new.arrays, small_params.arrays):
        np.testing.assert_array_equal(x, y)


def test_adam_first_step_by_hand(small_params):
    grads = small_params.zeros_like()
    grads[0][0, 0] = 0.3
    grads[1][2] = -2.0
    lr = 0.01
    new, state = adam_update(small_params, grads, AdamState.fresh(small_params), lr)
    # step 1: m = 0.1 g, v = 0.001 g^2, bias-corrected m_hat = g, v_hat = g^2
    for g, idx, ti in ((0.3, (0, 0), 0), (-2.0, (2,), 1)):
        m_hat = (0.1 * g) / (1 - 0.9)
        v_hat = (0.001 * g * g) / (1 - 0.999)
        expected = small_params.arrays[ti][idx] - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert new.arrays[ti][idx] == pytest.approx(expected, abs=1e-15)
    assert state.step == 1
    assert state.m[0][0, 0] == pytest.approx(0.03)


def test_adam_second_step_by_hand():
    cfg = DenoiserConfig(H=1, A=1, T_o=1, S=1, E=2, hidden=(1,))
    params = init_params(cfg, np.random.default_rng(0), zero_last=False)
    w0 = params.arrays[0][0, 0]
    g1, g2 = 0.5, -0.25
    lr = 0.1
    state = AdamState.fresh(params)
    for g in (g1, g2):
        grads = params.zeros_like()
        grads[0][0, 0] = g
        params, state = adam_update(params, grads, state, lr)
    m1, v1 = 0.1 * g1, 0.001 * g1**2
    w1 = w0 - lr * (m1 / 0.1) / (np.sqrt(v1 / 0.001) + 1e-8)
    m2, v2 = 0.9 * m1 + 0.1 * g2, 0.999 * v1 + 0.001 * g2**2
    w2 = w1 - lr * (m2 / (1 - 0.81)) / (np.sqrt(v2 / (1 - 0.999**2)) + 1e-8)
    assert params.arrays[0][0, 0] == pytest.approx(w2, abs=1e-14)


def test_adam_deterministic(small_params):
    grads = [np.full_like(a, 0.1) for a in small_params.arrays]
    a1, s1 = adam_update(small_params, grads, AdamState.fresh(small_params), 1e-3)
    a2, s2 = adam_update(small_params, grads, AdamState.fresh(small_params), 1e-3)
    for x, y in zip(a1.arrays, a2.arrays):
        np.testing.assert_array_equal(x, y)


def test_adam_rejects_non_finite(small_params):
    grads = small_params.zeros_like()
    grads[0][0, 0] = np.nan
    with pytest.raises(DivergenceError):
        adam_update(small_params, grads, AdamState.fresh(small_params), 1e-3)


def test_adam_rejects_bad_lr(small_params):
    with pytest.raises(ValueError):
        adam_update(small_params, small_params.zeros_like(), AdamState.fresh(small_params), 0.0)


def test_checkpoint_round_trip(tmp_path, small_params):
    ckpt = Checkpoint(small_params, 100, "cosine", {"stage": "test"})
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    assert back.config == small_params.config
    assert back.K == 100 and back.schedule == "cosine"
    assert back.meta == {"stage": "test"}
    for x, y in zip(back.params.arrays, small_params.arrays):
        np.testing.assert_array_equal(x, y)
    header = path.read_bytes().split(b"\n", 1)[0].decode()
    assert "layers=22x16,16x16,16x8" in header
    assert path.stat().st_size == len(header) + 1 + 8 * small_params.n_params


def test_checkpoint_rejects_truncated(tmp_path, small_params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, Checkpoint(small_params, 100, "cosine"))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_time_embedding_shape_and_range():
    emb = denoiser.time_embedding(np.array([1, 50, 100]), 32)
    assert emb.shape == (3, 32)
    assert np.all(np.abs(emb) <= 1.0)
    assert not np.allclose(emb[0], emb[1])
