import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from ssl_am.data import Example, Unit, minibatch_loss_grad
from ssl_am.distopt import (BmufConfig, BmufState, GtcConfig, GtcState, ReplicaDivergence, TrainData, WorkerPool,
                            bmuf_block, bmuf_update, gtc_exchange, gtc_quantize, gtc_round, local_sgd, run_training)
from ssl_am.errors import DataError
from ssl_am.nncore import ModelParams, ModelSpec, loss_and_grad
from ssl_am.schedule import ScheduleConfig, build_plan, build_supervised_plan

SPEC = ModelSpec(3, (4,), 5)


def model64(seed=0, spec=SPEC):
    return ModelParams.init(spec, seed, dtype=np.float64, scale=0.3)


def random_batches(rng, n, size=2, length=5, classes=5):
    return [[Unit(rng.normal(size=(length, 3)), rng.integers(0, classes, size=length)) for _ in range(size)]
            for _ in range(n)]


def concat_grad(params, batch_group):
    """Gradient of the mean loss over all units of a round, unit by unit."""
    model = model64().with_params(params)
    total = sum(u.scored for mb in batch_group for u in mb)
    g = np.zeros_like(params)
    for mb in batch_group:
        for u in mb:
            g = g + loss_and_grad(model, u.frames, u.targets, total)[1]
    return g


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-5, 5)),
       st.sampled_from([2.0**-10, 0.01, 0.1, 1.0]))
def test_quantize_invariants(acc, tau):
    sent, residual = gtc_quantize(acc, tau)
    assert np.all(np.abs(residual) < tau)
    np.testing.assert_array_equal(sent, np.round(sent / tau) * tau)  # whole quanta
    np.testing.assert_allclose(sent + residual, acc, rtol=0, atol=1e-12)
    assert np.all(np.abs(sent) <= np.abs(acc) + 1e-12)


def test_quantize_zero_tau_is_exact(rng):
    acc = rng.normal(size=10)
    sent, residual = gtc_quantize(acc, 0.0)
    assert sent.tobytes() == acc.tobytes() and not residual.any()


def test_quantize_small_values_stay_in_residual():
    sent, residual = gtc_quantize(np.array([0.004, -0.009, 0.011, -0.035]), 0.01)
    np.testing.assert_allclose(sent, [0, 0, 0.01, -0.03])
    np.testing.assert_allclose(residual, [0.004, -0.009, 0.001, -0.005], atol=1e-15)


def test_exchange_accumulates_residuals(rng):
    states = [GtcState.fresh(4, 0.1) for _ in range(2)]
    raw_total = np.zeros(4)
    sent_total = np.zeros(4)
    for _ in range(20):
        grads = [rng.normal(scale=0.05, size=4) for _ in range(2)]
        total, sent = gtc_exchange(grads, states)
        raw_total += sum(grads)
        sent_total += total
        np.testing.assert_array_equal(total, sent[0] + sent[1])
    np.testing.assert_allclose(sent_total + sum(s.residual for s in states), raw_total, atol=1e-12)


@pytest.mark.parametrize("workers", [1, 2, 3])
def test_gtc_zero_tau_equals_serial_sgd(workers, rng):
    batches = random_batches(rng, 6 * workers)
    pool = WorkerPool(model64(), workers)
    states = [GtcState.fresh(SPEC.num_params, 0.0) for _ in range(workers)]
    rounds = [batches[i : i + workers] for i in range(0, len(batches), workers)]
    for group in rounds:
        gtc_round(pool, states, group, lr=0.3)
    ref = oracles.serial_sgd(model64().params, rounds, 0.3, concat_grad)
    np.testing.assert_allclose(pool.model.params, ref, rtol=0, atol=1e-12)


def test_gtc_missing_minibatch_is_zero_gradient(rng):
    batches = random_batches(rng, 1)
    a = WorkerPool(model64(), 2)
    gtc_round(a, [GtcState.fresh(SPEC.num_params, 0.0) for _ in range(2)], [batches[0], None], 0.1)
    b = WorkerPool(model64(), 1)
    gtc_round(b, [GtcState.fresh(SPEC.num_params, 0.0)], [batches[0]], 0.1)
    assert a.model == b.model


@pytest.mark.parametrize("protocol", ["gtc", "bmuf"])
def test_threaded_matches_sequential(protocol, rng):
    batches = random_batches(rng, 12)
    models = []
    for threaded in (False, True):
        with WorkerPool(model64(), 3, threaded=threaded, check_replicas=True) as pool:
            if protocol == "gtc":
                states = [GtcState.fresh(SPEC.num_params, 0.01) for _ in range(3)]
                for i in range(0, 12, 3):
                    gtc_round(pool, states, batches[i : i + 3], 0.2)
                models.append(pool.model)
            else:
                state = BmufState(0.5, 1.0, 2)
                for b in range(2):
                    blocks = [batches[b * 6 + 2 * w : b * 6 + 2 * w + 2] for w in range(3)]
                    glob = bmuf_block(pool, state, blocks, 0.2)
                models.append(glob)
    assert models[0].params.tobytes() == models[1].params.tobytes()


def test_bmuf_single_worker_is_serial_sgd(rng):
    batches = random_batches(rng, 8)
    pool = WorkerPool(model64(), 1)
    state = BmufState(0.0, 1.0, 4)
    for b in range(2):
        glob = bmuf_block(pool, state, [batches[4 * b : 4 * b + 4]], 0.2)
    serial, _ = local_sgd(model64(), batches, 0.2)
    assert glob.params.tobytes() == serial.params.tobytes()


def test_bmuf_block_size_one_is_model_averaging(rng):
    batches = random_batches(rng, 6)
    pool = WorkerPool(model64(), 3)
    state = BmufState(0.0, 1.0, 1)
    glob = bmuf_block(pool, state, [[b] for b in batches[:3]], 0.2)
    start = model64()
    ends = [local_sgd(start, [b], 0.2)[0].params for b in batches[:3]]
    np.testing.assert_allclose(glob.params, sum(ends) / 3, rtol=0, atol=1e-12)


@pytest.mark.parametrize("nesterov", [True, False])
def test_bmuf_update_matches_textbook_recurrence(nesterov):
    # dyadic values keep every operation exact
    w0 = np.array([1.0, -2.0, 0.5])
    moves = [np.array([0.25, 0.5, -0.75]), np.array([-0.125, 0.25, 0.5])]
    eta, zeta = 0.5, 0.75
    expect = oracles.bmuf_textbook(w0, [lambda s, m=m: s + m for m in moves], eta, zeta, nesterov)
    state = BmufState(eta, zeta, 1, nesterov)
    start = w0.copy()
    for (w_ref, start_ref), m in zip(expect, moves):
        start = bmuf_update(state, start, start + m)
        assert state.global_params.tobytes() == w_ref.tobytes()
        assert start.tobytes() == start_ref.tobytes()


def test_bmuf_state_validation():
    with pytest.raises(ValueError):
        BmufState(1.0)
    with pytest.raises(ValueError):
        BmufState(0.5, 0.0)


def test_pool_map_order_and_divergence():
    pool = WorkerPool(model64(), 3, threaded=True, check_replicas=True)
    assert pool.map(lambda w, x: (w, x), "abc") == [(0, "a"), (1, "b"), (2, "c")]
    pool.replicas[2] = model64(1)
    with pytest.raises(ReplicaDivergence):
        pool.assert_consistent()
    pool.close()


def test_minibatch_mixed_lengths(rng):
    model = model64()
    units = [Unit(rng.normal(size=(n, 3)), rng.integers(0, 5, size=n)) for n in (3, 5, 3)]
    loss, grad = minibatch_loss_grad(model, units)
    total = sum(u.scored for u in units)
    ref = sum(loss_and_grad(model, u.frames, u.targets, total)[1] for u in units)
    np.testing.assert_allclose(grad, ref, atol=1e-14)


# ---------------------------------------------------------------------------
# run_training


def toy_data(rng, n_lab=6, n_unl=12, n_held=4, length=12):
    def ex(i, soft):
        y = rng.integers(0, 5, size=length)
        x = rng.normal(size=(length, 3)) + y[:, None] * 0.5
        t = np.eye(5)[y] if soft else y
        return Example(f"e{i}", x, t, f"c{i % 2}")

    labeled = {o: [ex(i, False) for i in range(n_lab)] for o in range(3)}
    return TrainData(labeled, [ex(i, True) for i in range(n_unl)], [ex(i, False) for i in range(n_held)])


@pytest.mark.parametrize("protocol", [GtcConfig(0.0), GtcConfig(2.0**-10), BmufConfig(2)])
def test_run_training_metrics_rows(protocol, rng):
    data = toy_data(rng)
    plan = build_plan(ScheduleConfig(3, 1, lr0=0.5, chunked_until_sub_epoch=2, chunk_len=4))
    pool = WorkerPool(model64(), 2)
    model, metrics = run_training(pool, plan, protocol, data, batch_size=2, baseline_error=0.8)
    assert [m.sub_epoch for m in metrics] == [0, 1, 2, 3]
    assert metrics[0].frames_seen == 0
    assert all(b.frames_seen > a.frames_seen for a, b in zip(metrics, metrics[1:]))
    assert metrics[-1].relative_error_reduction == pytest.approx(100 * (0.8 - metrics[-1].heldout_frame_error) / 0.8)
    assert metrics[-1].heldout_ce < metrics[0].heldout_ce


def test_run_training_is_deterministic(rng):
    data = toy_data(rng)
    plan = build_plan(ScheduleConfig(2, 1, lr0=0.5))
    runs = [run_training(WorkerPool(model64(), 2, seed=4), plan, GtcConfig(0.01), data, seed=4) for _ in range(2)]
    assert runs[0][0] == runs[1][0] and runs[0][1] == runs[1][1]


def test_labeled_only_plan_is_supervised_training(rng):
    data = toy_data(rng)
    plan = build_supervised_plan(3, 1, 0.5, 0.9)
    _, metrics = run_training(WorkerPool(model64(), 1), plan, GtcConfig(0.0), TrainData(data.labeled, [], data.heldout))
    assert len(metrics) == len(plan) + 1


def test_run_training_errors(rng):
    data = toy_data(rng)
    plan = build_plan(ScheduleConfig(2, 1))
    with pytest.raises(DataError):
        run_training(WorkerPool(model64(), 1), plan, GtcConfig(), TrainData(data.labeled, [], data.heldout))
    with pytest.raises(DataError):
        run_training(WorkerPool(model64(), 1), plan, GtcConfig(), TrainData({0: data.labeled[0]}, data.unlabeled))
    budget = build_plan(ScheduleConfig(3, 3, sub_epoch_frames=10_000))
    with pytest.raises(DataError):
        run_training(WorkerPool(model64(), 1), budget, GtcConfig(), data)
