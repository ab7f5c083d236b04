from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from lifelong_hanabi.errors import NumericError, UsageError
from lifelong_hanabi.learner import (
    Architecture,
    Batch,
    Checkpoint,
    LossSpec,
    OptimizerState,
    aux_loss,
    clip_grad_norm,
    decay_learning_rate,
    epsilon_greedy,
    epsilon_greedy_batch,
    flatten,
    forward,
    greedy,
    init_params,
    linear_epsilon,
    load_checkpoint,
    loss_and_grad,
    optimizer_step,
    per_sample_gradients,
    save_checkpoint,
    td_loss,
    td_targets,
    unflatten,
)

from factories import random_arch, random_batch, random_params
from oracles import numeric_grad, relative_error


def fd_check(arch, theta, batch, spec, rng, n_coords=40):
    r = loss_and_grad(theta, arch, batch, spec)
    idx = rng.choice(arch.num_params, size=min(n_coords, arch.num_params), replace=False)
    num = numeric_grad(lambda t: loss_and_grad(t, arch, batch, spec).loss, theta, idx)
    return relative_error(r.grad[idx], num)


def test_architecture_layout():
    arch = Architecture(5, (4, 3), 2, aux_head=True, aux_slots=2, aux_classes=3)
    assert arch.layer_shapes == [(4, 5), (3, 4), (2, 3), (6, 3)]
    assert arch.num_params == 4 * 5 + 4 + 3 * 4 + 3 + 2 * 3 + 2 + 6 * 3 + 6
    theta = init_params(arch, 0)
    assert np.array_equal(flatten(unflatten(theta, arch)), theta)
    assert Architecture.from_dict(arch.to_dict()) == arch
    with pytest.raises(UsageError):
        unflatten(theta[:-1], arch)


@pytest.mark.parametrize(
    "kwargs", [dict(hidden_dims=()), dict(dropout_rate=1.0), dict(aux_head=True, aux_slots=0, aux_classes=3)]
)
def test_bad_architectures(kwargs):
    with pytest.raises(UsageError):
        Architecture(**{**dict(input_len=3, hidden_dims=(4,), num_actions=2), **kwargs})


def test_forward_matches_manual_computation():
    rng = np.random.default_rng(1)
    arch = Architecture(3, (4,), 2, aux_head=True, aux_slots=1, aux_classes=2)
    theta = random_params(arch, rng)
    (W1, b1), (Wq, bq), (Wa, ba) = unflatten(theta, arch)
    X = rng.standard_normal((5, 3))
    h = np.maximum(X @ W1.T + b1, 0)
    q, aux = forward(theta, arch, X)
    assert np.allclose(q, h @ Wq.T + bq)
    assert np.allclose(aux.reshape(5, 2), h @ Wa.T + ba)


def test_td_targets_double_q():
    rng = np.random.default_rng(2)
    arch = random_arch(rng, aux=False)
    theta, target = random_params(arch, rng), random_params(arch, rng)
    b = random_batch(arch, 6, rng)
    y = td_targets(theta, target, arch, b, 0.9)
    q_on, _ = forward(theta, arch, b.next_obs[:, 0])
    q_tg, _ = forward(target, arch, b.next_obs[:, 0])
    for i in range(6):
        legal = np.flatnonzero(b.next_legal[i, 0])
        a = legal[np.argmax(q_on[i, legal])]
        boot = 0.0 if b.terminal[i] else q_tg[i, a]
        assert y[i] == pytest.approx(b.reward[i] + 0.9 * boot)


def test_td_loss_value_and_weights():
    rng = np.random.default_rng(3)
    arch = random_arch(rng, aux=False)
    theta = random_params(arch, rng)
    b = random_batch(arch, 8, rng)
    loss, td = td_loss(theta, theta, arch, b, 0.99)
    assert loss == pytest.approx(np.mean(b.weights * td**2))
    r = loss_and_grad(theta, arch, b, LossSpec(target_params=theta))
    assert r.td_loss == pytest.approx(loss) and np.allclose(r.td, td)


@pytest.mark.parametrize("seats", [1, 2])
@pytest.mark.parametrize("kind", ["td", "aux", "combined"])
def test_finite_differences(kind, seats):
    rng = np.random.default_rng(seats * 10 + len(kind))
    for _ in range(5):
        arch = random_arch(rng, aux=kind != "td")
        theta, target = random_params(arch, rng), random_params(arch, rng)
        b = random_batch(arch, 7, rng, seats=seats)
        spec = {
            "td": LossSpec(target_params=target, discount=0.9),
            "aux": LossSpec(target_params=target, td_weight=0.0, aux_weight=1.0),
            "combined": LossSpec(target_params=target, discount=0.9, aux_weight=0.7),
        }[kind]
        assert fd_check(arch, theta, b, spec, rng) < 1e-4


def test_finite_differences_with_dropout_mask_fixed():
    rng = np.random.default_rng(7)
    arch = random_arch(rng, aux=True, dropout=0.3)
    theta, target = random_params(arch, rng), random_params(arch, rng)
    b = random_batch(arch, 5, rng)
    spec = LossSpec(target_params=target, aux_weight=0.5, dropout_seed=11)
    assert fd_check(arch, theta, b, spec, rng) < 1e-4


def test_aux_loss_is_cross_entropy():
    rng = np.random.default_rng(4)
    arch = Architecture(3, (5,), 2, aux_head=True, aux_slots=2, aux_classes=3)
    theta = random_params(arch, rng)
    b = random_batch(arch, 4, rng)
    _, logits = forward(theta, arch, b.obs[:, 0])
    labels = b.aux_labels[:, 0]
    terms = []
    for i in range(4):
        for s in range(2):
            if labels[i, s] >= 0:
                z = logits[i, s]
                terms.append(np.log(np.exp(z).sum()) - z[labels[i, s]])
    loss, _ = aux_loss(theta, arch, b)
    assert loss == pytest.approx(np.mean(terms))


def test_aux_loss_requires_head_and_labels():
    rng = np.random.default_rng(5)
    arch = random_arch(rng, aux=False)
    b = random_batch(arch, 3, rng)
    with pytest.raises(UsageError):
        loss_and_grad(random_params(arch, rng), arch, b, LossSpec(aux_weight=1.0))
    arch = random_arch(rng, aux=True)
    b = replace(random_batch(arch, 3, rng), aux_labels=None)
    with pytest.raises(UsageError):
        loss_and_grad(random_params(arch, rng), arch, b, LossSpec(aux_weight=1.0))


def test_batch_shape_checks():
    rng = np.random.default_rng(6)
    arch = random_arch(rng)
    b = random_batch(arch, 3, rng)
    wrong = replace(arch, input_len=arch.input_len + 1)
    with pytest.raises(UsageError):
        loss_and_grad(init_params(wrong, 0), wrong, b, LossSpec())
    with pytest.raises(UsageError):
        loss_and_grad(init_params(arch, 0), arch, b.subset(slice(0, 0)), LossSpec())


def test_per_sample_gradients_match_single_sample_batches():
    rng = np.random.default_rng(8)
    arch = random_arch(rng)
    theta, target = random_params(arch, rng), random_params(arch, rng)
    b = random_batch(arch, 9, rng, seats=2)
    spec = LossSpec(target_params=target)
    G = np.concatenate(list(per_sample_gradients(theta, arch, b, spec, chunk=4)))
    for i in range(9):
        single = loss_and_grad(theta, arch, b.subset([i]), spec).grad
        assert np.allclose(G[i], single, atol=1e-12)
    assert np.allclose(G.mean(axis=0), loss_and_grad(theta, arch, b, spec).grad)


def test_batch_concat_fills_missing_weights():
    rng = np.random.default_rng(9)
    arch = random_arch(rng)
    a, b = random_batch(arch, 3, rng), random_batch(arch, 2, rng, weights=False)
    c = Batch.concat([a, b])
    assert len(c) == 5 and np.array_equal(c.weights[3:], np.ones(2))
    with pytest.raises(UsageError):
        Batch.concat([])


def test_adam_first_step_and_bias_correction():
    theta = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -4.0, 0.0])
    opt = OptimizerState("adam", learning_rate=0.1)
    new, opt2 = optimizer_step(opt, theta, g)
    # after one step m_hat = g and v_hat = g^2
    assert np.allclose(new, theta - 0.1 * g / (np.abs(g) + 1e-8))
    assert opt2.step == 1 and opt.step == 0
    new2, _ = optimizer_step(opt2, new, g)
    m = 0.9 * 0.1 * g + 0.1 * g
    v = 0.999 * 0.001 * g * g + 0.001 * g * g
    expect = new - 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert np.allclose(new2, expect)


def test_sgd_momentum():
    theta = np.zeros(2)
    g = np.array([1.0, -1.0])
    opt = OptimizerState("sgd", learning_rate=0.5, momentum=0.8)
    t1, opt = optimizer_step(opt, theta, g)
    t2, opt = optimizer_step(opt, t1, g)
    assert np.allclose(t1, -0.5 * g)
    assert np.allclose(t2, t1 - 0.5 * 1.8 * g)
    decayed = decay_learning_rate(replace(opt, lr_decay=0.9))
    assert decayed.learning_rate == pytest.approx(0.45)
    assert decayed.fresh().velocity is None and decayed.fresh().learning_rate == pytest.approx(0.45)


def test_optimizer_validation():
    with pytest.raises(UsageError):
        OptimizerState("rmsprop")
    with pytest.raises(UsageError):
        OptimizerState(learning_rate=-1.0)
    with pytest.raises(NumericError):
        optimizer_step(OptimizerState(), np.zeros(2), np.array([np.nan, 0.0]))
    with pytest.raises(UsageError):
        optimizer_step(OptimizerState(), np.zeros(2), np.zeros(3))


@settings(max_examples=50)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=10), st.floats(0.01, 100))
def test_clip_grad_norm_bounds_the_norm(values, max_norm):
    g = np.array(values)
    c = clip_grad_norm(g, max_norm)
    assert np.linalg.norm(c) <= max_norm * (1 + 1e-9) or np.allclose(c, g)
    if np.linalg.norm(g) <= max_norm:
        assert np.array_equal(c, g)
    assert clip_grad_norm(g, None) is g


def test_greedy_prefers_lowest_index_on_ties_and_respects_mask():
    q = np.array([[1.0, 3.0, 3.0, 9.0]])
    legal = np.array([[True, True, True, False]])
    assert greedy(q, legal)[0] == 1
    assert epsilon_greedy(q[0], legal[0], 0.0, 0) == 1
    with pytest.raises(UsageError):
        epsilon_greedy(q[0], np.zeros(4, dtype=bool), 0.1, 0)


def test_epsilon_one_is_uniform_over_legal():
    legal = np.array([[True, False, True, True, False]] * 30000)
    q = np.zeros(legal.shape)
    q[:, 4] = 100.0
    acts, greedy_acts = epsilon_greedy_batch(q, legal, 1.0, np.random.default_rng(0))
    assert np.all(greedy_acts == 0)
    counts = np.bincount(acts, minlength=5)
    assert counts[1] == counts[4] == 0
    assert stats.chisquare(counts[[0, 2, 3]]).pvalue > 0.01


def test_linear_epsilon_schedule():
    assert linear_epsilon(0, 100) == 1.0
    assert linear_epsilon(25, 100, end=0.0) == pytest.approx(0.5)
    assert linear_epsilon(50, 100) == 0.05
    assert linear_epsilon(10**6, 100) == 0.05


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(10)
    arch = random_arch(rng)
    theta = random_params(arch, rng)
    ck = Checkpoint(arch, theta, {"version": 1}, {"method": "iql"}, 3, {"note": "x"})
    assert np.array_equal(ck.params, theta.astype(np.float32).astype(np.float64))
    save_checkpoint(tmp_path / "a.ckpt", ck)
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.arch == arch and np.array_equal(back.params, ck.params)
    assert back.to_bytes() == ck.to_bytes()
    data = bytearray(ck.to_bytes())
    with pytest.raises(UsageError):
        Checkpoint.from_bytes(b"XXXX" + bytes(data[4:]))
    with pytest.raises(UsageError):
        Checkpoint.from_bytes(bytes(data[:-4]))
    with pytest.raises(UsageError):
        Checkpoint(arch, theta[:-1], {}, {}, 0)
