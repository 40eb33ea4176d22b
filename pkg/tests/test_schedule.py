import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssl_am.schedule import (CHUNKED, FULL, LABELED, UNLABELED, Phase, PlanCursor, ScheduleConfig, TrainPlan,
                             build_plan, build_supervised_plan, expected_labeled_count, next_phase, peek_phase,
                             plan_from_text, plan_to_text, relative_error_reduction, without_labeled)


def test_hundred_k_analogue():
    plan = build_plan(ScheduleConfig(4, 1, lr0=0.01, gamma=0.8, chunked_until_sub_epoch=3))
    assert plan.kinds() == "ULULULUL"
    assert [p.bptt for p in plan] == [CHUNKED] * 6 + [FULL] * 2
    assert [p.offset for p in plan if p.kind == LABELED] == [0, 1, 2, 0]


def test_million_analogue():
    plan = build_plan(ScheduleConfig(18, 5, chunked_until_sub_epoch=15))
    labeled = [p for p in plan if p.kind == LABELED]
    assert [p.sub_epoch for p in labeled] == [5, 10, 15, 18]  # 18 is the trailing pass
    assert [p.offset for p in labeled[:3]] == [0, 1, 2]
    unl = [p for p in plan if p.kind == UNLABELED]
    assert [p.sub_epoch for p in unl] == list(range(1, 19))
    assert all(p.bptt == (FULL if p.sub_epoch > 15 else CHUNKED) for p in plan)
    no_tail = build_plan(ScheduleConfig(18, 5, chunked_until_sub_epoch=15, trailing_labeled=False))
    assert [p.sub_epoch for p in no_tail if p.kind == LABELED] == [5, 10, 15]


@given(st.integers(1, 30), st.integers(1, 30), st.floats(0.05, 1.0), st.floats(1.0, 3.0), st.booleans())
def test_plan_invariants(n, k, gamma, boost, trailing):
    k = min(k, n)
    cfg = ScheduleConfig(n, k, lr0=0.1, gamma=gamma, labeled_lr_multiplier=boost, trailing_labeled=trailing)
    plan = build_plan(cfg)
    unl = [p for p in plan if p.kind == UNLABELED]
    lab = [p for p in plan if p.kind == LABELED]
    assert len(unl) == n
    assert [p.lr for p in unl] == [0.1 * gamma**s for s in range(n)]
    assert len(lab) == expected_labeled_count(cfg)
    assert len(lab) == (math.ceil(n / k) if trailing else n // k)
    assert [p.offset for p in lab] == [i % 3 for i in range(len(lab))]
    last_lr = {p.sub_epoch: p.lr for p in unl}
    assert all(p.lr == pytest.approx(boost * last_lr[p.sub_epoch]) for p in lab)
    assert plan_from_text(plan_to_text(plan)) == plan


def test_no_decay():
    plan = build_plan(ScheduleConfig(5, 2, lr0=0.3, gamma=1.0))
    assert {p.lr for p in plan if p.kind == UNLABELED} == {0.3}


@pytest.mark.parametrize("kwargs", [
    dict(num_sub_epochs=0), dict(num_sub_epochs=3, interleave_every=4), dict(num_sub_epochs=3, lr0=0.0),
    dict(num_sub_epochs=3, gamma=1.5), dict(num_sub_epochs=3, labeled_lr_multiplier=0.5),
    dict(num_sub_epochs=3, chunked_until_sub_epoch=4), dict(num_sub_epochs=3, chunk_len=0),
])
def test_invalid_configs(kwargs):
    with pytest.raises(ValueError):
        build_plan(ScheduleConfig(**kwargs))


def test_phase_validation():
    with pytest.raises(ValueError):
        Phase(LABELED, 1, 0.1, CHUNKED)
    with pytest.raises(ValueError):
        Phase("other", 1, 0.1, CHUNKED)
    with pytest.raises(ValueError):
        Phase(UNLABELED, 1, -0.1, FULL)


def test_supervised_plan():
    plan = build_supervised_plan(4, 2, lr0=1.0, gamma=0.5)
    assert plan.kinds() == "L" * 6
    assert [p.offset for p in plan] == [0, 1, 2, 0, 1, 2]
    assert [p.bptt for p in plan] == [CHUNKED] * 4 + [FULL] * 2
    assert [p.lr for p in plan] == [0.5**e for e in range(6)]
    assert len(build_supervised_plan(0)) == 0


def test_without_labeled():
    plan = build_plan(ScheduleConfig(3, 1))
    assert without_labeled(plan).kinds() == "UUU"


def test_cursor_iteration():
    plan = build_plan(ScheduleConfig(3, 1))
    cur = PlanCursor()
    seen = []
    while (p := peek_phase(plan, cur)) is not None:
        assert peek_phase(plan, cur) is p
        assert next_phase(plan, cur) is p
        seen.append(p)
    assert tuple(seen) == plan.phases
    assert next_phase(plan, cur) is None
    assert next_phase(TrainPlan(()), PlanCursor()) is None
    # resuming from a saved position gives the same remaining phases
    assert next_phase(plan, PlanCursor(2)) == plan.phases[2]


def test_relative_error_reduction():
    assert relative_error_reduction(0.2, 0.2) == 0.0
    assert relative_error_reduction(0.2, 0.18) == pytest.approx(10.0)
    with pytest.raises(ValueError):
        relative_error_reduction(0.0, 0.1)


def test_plan_text_round_trip_supervised(tmp_path):
    from ssl_am.schedule import load_plan, save_plan

    for plan in (build_supervised_plan(3, 1, 0.37, 0.91), build_supervised_plan(0), build_plan(ScheduleConfig(4, 2))):
        save_plan(tmp_path / "p.plan", plan)
        assert load_plan(tmp_path / "p.plan") == plan
        assert plan_to_text(load_plan(tmp_path / "p.plan")) == (tmp_path / "p.plan").read_text()


def test_plan_text_rejects_garbage():
    with pytest.raises(ValueError):
        plan_from_text("not a plan")
    text = plan_to_text(build_plan(ScheduleConfig(2, 1)))
    with pytest.raises(ValueError):
        plan_from_text(text.replace("lr=", "lr=abc", 1))
