import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from ssl_am.errors import DimensionError, NonFiniteError, StoreFormatError
from ssl_am.nncore import (PAPER_STUDENT, PAPER_TEACHER, ModelParams, ModelSpec, align_targets, backward_chunked,
                           backward_full, ce_loss, checkpoint_bytes, checkpoint_from_bytes, chunk_bounds, forward,
                           load_checkpoint, log_softmax, loss_and_grad, one_hot, save_checkpoint, scored_mask,
                           sgd_step, softmax)


def small_model(seed, layers=(5, 4), bidirectional=False, lookahead=0, input_dim=3, outputs=4):
    spec = ModelSpec(input_dim, layers, outputs, bidirectional, lookahead)
    return ModelParams.init(spec, seed, dtype=np.float64, scale=0.5)


def named(model):
    return {n: model[n] for n in model.names()}


def test_layout_covers_flat_vector():
    spec = ModelSpec(7, (5, 3), 4, bidirectional=True)
    model = ModelParams.init(spec, 0)
    ends = [model.slice_of(n) for n in model.names()]
    assert ends[0].start == 0 and ends[-1].stop == spec.num_params
    assert all(a.stop == b.start for a, b in zip(ends, ends[1:]))
    assert model["lstm1.bw.w_x"].shape == (12, 10)  # input is the concatenated 2x5 layer below


def test_reference_topologies():
    assert PAPER_STUDENT.num_params == pytest.approx(24e6, rel=0.02)
    assert not PAPER_STUDENT.bidirectional and PAPER_STUDENT.lookahead_frames == 3
    assert PAPER_TEACHER.bidirectional and PAPER_TEACHER.num_outputs == 3183


def test_params_are_read_only():
    model = ModelParams.init(ModelSpec(2, (3,), 2), 0)
    with pytest.raises(ValueError):
        model.params[0] = 1.0


def test_init_is_seeded():
    spec = ModelSpec(2, (3,), 2)
    assert ModelParams.init(spec, 5) == ModelParams.init(spec, 5)
    assert ModelParams.init(spec, 5) != ModelParams.init(spec, 6)


@pytest.mark.parametrize("bidirectional", [False, True])
def test_forward_matches_reference_lstm(bidirectional, rng):
    model = small_model(1, bidirectional=bidirectional)
    x = rng.normal(size=(7, 3))
    expect = oracles.lstm_logits(named(model), model.spec.layer_sizes, bidirectional, x)
    np.testing.assert_allclose(forward(model, x), expect, rtol=1e-12, atol=1e-12)


def test_batch_forward_equals_per_sequence(rng):
    model = small_model(2, bidirectional=True)
    x = rng.normal(size=(3, 6, 3))
    batch = forward(model, x)
    for b in range(3):
        np.testing.assert_allclose(batch[b], forward(model, x[b]), rtol=1e-13, atol=1e-13)


def test_unidirectional_is_causal(rng):
    model = small_model(3)
    x = rng.normal(size=(8, 3))
    y = x.copy()
    y[5:] += 1.0
    np.testing.assert_array_equal(forward(model, x)[:5], forward(model, y)[:5])


def test_forward_rejects_wrong_dim_and_nonfinite(rng):
    model = small_model(0)
    with pytest.raises(DimensionError):
        forward(model, rng.normal(size=(4, 2)))
    bad = rng.normal(size=(4, 3))
    bad[1, 1] = np.nan
    with pytest.raises(NonFiniteError):
        forward(model, bad)


def test_ce_loss_matches_reference(rng):
    logits = rng.normal(size=(6, 5))
    labels = np.array([0, 4, -1, 2, 2, -1])
    loss, grad = ce_loss(logits, labels)
    assert loss == pytest.approx(oracles.cross_entropy(logits, labels), rel=1e-12)
    assert np.all(grad[labels < 0] == 0)
    soft = softmax(rng.normal(size=(6, 5)))
    soft[2] = 0
    loss, _ = ce_loss(logits, soft)
    assert loss == pytest.approx(oracles.cross_entropy(logits, soft), rel=1e-12)


def test_one_hot_equals_hard_labels(rng):
    logits = rng.normal(size=(5, 4))
    labels = np.array([3, -1, 0, 1, 1])
    l1, g1 = ce_loss(logits, labels)
    l2, g2 = ce_loss(logits, one_hot(labels, 4, np.float64))
    assert l1 == pytest.approx(l2, rel=1e-14)
    np.testing.assert_allclose(g1, g2, atol=1e-15)


def test_align_targets_shift():
    t = np.arange(6)
    np.testing.assert_array_equal(align_targets(t, 2), [-1, -1, 0, 1, 2, 3])
    np.testing.assert_array_equal(align_targets(t, 0), t)
    np.testing.assert_array_equal(align_targets(t, 9), [-1] * 6)
    dense = np.eye(3)[[0, 1, 2, 0]]
    out = align_targets(dense, 1)
    assert not scored_mask(out)[0] and np.array_equal(out[1:], dense[:3])


def test_lookahead_loss_matches_reference(rng):
    model = small_model(4, lookahead=2)
    x = rng.normal(size=(7, 3))
    labels = rng.integers(0, 4, size=7)
    loss, _ = loss_and_grad(model, x, align_targets(labels, 2))
    expect = oracles.cross_entropy(forward(model, x), labels, lookahead=2)
    assert loss == pytest.approx(expect, rel=1e-12)


@pytest.mark.parametrize("bidirectional", [False, True])
def test_gradient_matches_finite_differences(bidirectional, rng):
    model = small_model(5, layers=(3, 2), bidirectional=bidirectional)
    x = rng.normal(size=(5, 3))
    y = rng.integers(0, 4, size=5)
    grad = backward_full(model, x, y)
    fd = oracles.finite_difference(
        lambda p: oracles.cross_entropy(oracles.lstm_logits(named(model.with_params(p)), (3, 2), bidirectional, x), y),
        model.params.copy(),
    )
    np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-8)


def test_chunk_bounds():
    assert chunk_bounds(7, 3) == [(0, 3), (3, 6), (6, 7)]
    assert chunk_bounds(4, 10) == [(0, 4)]
    with pytest.raises(ValueError):
        chunk_bounds(4, 0)


def test_chunked_grads_are_sum_of_independent_chunks(rng):
    model = small_model(6)
    x = rng.normal(size=(9, 3))
    y = rng.integers(0, 4, size=9)
    chunks = backward_chunked(model, x, y, 4, rng_seed=0)
    assert sorted(c.start for c in chunks) == [0, 4, 8]
    total = sum(c.grad for c in chunks)
    expect = sum(backward_full(model, x[s:e], y[s:e], normalizer=9) for s, e in chunk_bounds(9, 4))
    np.testing.assert_allclose(total, expect, rtol=1e-13, atol=1e-15)
    # cutting the recurrence changes the gradient
    assert not np.allclose(total, backward_full(model, x, y))


def test_chunk_order_is_seeded(rng):
    model = small_model(7)
    x, y = rng.normal(size=(12, 3)), rng.integers(0, 4, size=12)
    order = lambda s: [c.start for c in backward_chunked(model, x, y, 3, rng_seed=s)]
    assert order(1) == order(1)
    assert sorted(order(1)) == [0, 3, 6, 9]


def test_sgd_step():
    model = ModelParams.init(ModelSpec(2, (2,), 2), 0, dtype=np.float64)
    g = np.ones(model.params.size)
    np.testing.assert_array_equal(sgd_step(model, g, 0.5).params, model.params - 0.5)
    with pytest.raises(ValueError):
        sgd_step(model, g, 0.0)


def test_checkpoint_round_trip(tmp_path):
    model = ModelParams.init(ModelSpec(6, (4, 3), 5, True, 2), 9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    back = load_checkpoint(path)
    assert back.spec == model.spec and back == model
    assert checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_rejects_corruption():
    data = checkpoint_bytes(ModelParams.init(ModelSpec(2, (2,), 2), 0))
    with pytest.raises(StoreFormatError):
        checkpoint_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(StoreFormatError):
        checkpoint_from_bytes(data[:-4])


@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=40))
def test_softmax_properties(values):
    z = np.array(values)
    p = softmax(z)
    assert np.all(p >= 0) and p.sum() == pytest.approx(1.0)
    assert np.all(np.isfinite(log_softmax(z)))
    assert p[z.argmax()] == p.max()  # near-ties in z may tie in p
