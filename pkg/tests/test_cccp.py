import csv
import math

import numpy as np
import pytest

from helpers import dataset_from_array, outlier_dataset
from rampscreen.cccp import (MODEL_MAGIC, MODES, Model, TrainConfig, compute_mu, format_model,
                             hinge, load_model, margins, parse_model, predict, predict_many,
                             ramp, ramp_objective, train)
from rampscreen.dataio import make_synthetic
from rampscreen.kernel import KernelSpec
from rampscreen.oracle import solve_rsvm_reference
from rampscreen.solver import build_problem, SolverState


def test_loss_examples():
    z = np.array([2.0, 1.0, 0.5, 0.0, -3.0])
    assert list(hinge(z)) == [0.0, 0.0, 0.5, 1.0, 4.0]
    assert list(ramp(z)) == [0.0, 0.0, 0.5, 1.0, 1.0]
    assert list(ramp(z, -1.0)) == [0.0, 0.0, 0.5, 1.0, 2.0]
    # ramp is the difference of two hinges and is capped at 1 - s
    zz = np.linspace(-5, 5, 101)
    assert np.all(ramp(zz, -0.5) <= 1.5 + 1e-12) and np.all(ramp(zz, -0.5) >= 0)


def test_compute_mu_threshold():
    ds = dataset_from_array([[1.0], [2.0], [3.0]], [1, -1, 1])
    from rampscreen.kernel import KernelCache
    pr = build_problem(ds, KernelCache(KernelSpec.linear(), ds), 2.0)
    st = SolverState(alpha=np.zeros(3), g=np.array([-1.5, 0.0, 0.0]), b=0.0)
    # f = g + y + b = (-0.5, -1, 1): margins (-0.5, 1, 1)
    assert list(margins(st, pr)) == [-0.5, 1.0, 1.0]
    assert list(compute_mu(st, pr, 0.0, 2.0)) == [2.0, 0.0, 0.0]
    assert list(compute_mu(st, pr, -1.0, 2.0)) == [0.0, 0.0, 0.0]


@pytest.mark.parametrize("kw", [dict(C=0.0), dict(C=math.inf), dict(s=0.5), dict(eps=0.0),
                                dict(mode="fast"), dict(screen_every=0), dict(max_outer=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw).validate()


def test_train_needs_two_samples():
    with pytest.raises(ValueError):
        train(dataset_from_array([[1.0]], [1]))


@pytest.mark.parametrize("seed", range(4))
def test_train_matches_reference(seed):
    ds = outlier_dataset(seed, n=60)
    cfg = TrainConfig(kernel=KernelSpec.gaussian(0.5), C=1.0, eps=1e-10)
    model, trace = train(ds, cfg)
    ref, states = solve_rsvm_reference(ds, cfg)
    assert trace.status == "converged"
    assert trace.outer_iterations == len(states)
    assert np.allclose(model.decision_function(ds.rows), ref.decision_function(ds.rows), atol=1e-5)


@pytest.mark.parametrize("seed", range(3))
def test_modes_agree(seed):
    ds = outlier_dataset(seed, n=120)
    out = {}
    for mode in MODES:
        cfg = TrainConfig(C=1.0, eps=1e-10, mode=mode, screen_warmup=0, screen_every=5)
        model, trace = train(ds, cfg)
        out[mode] = (model.decision_function(ds.rows), trace.outer_iterations)
    base, outer = out["none"]
    for mode, (f, k) in out.items():
        assert k == outer, mode
        assert np.abs(f - base).max() <= 1e-6, mode


@pytest.mark.parametrize("seed", range(4))
def test_descent_and_majorization(seed):
    ds = outlier_dataset(seed, n=100, flip=0.15)
    _, trace = train(ds, TrainConfig(C=10.0, eps=1e-10, s=-0.5))
    assert not trace.descent_violations(1e-8)
    assert not trace.majorization_violations(1e-8)
    assert all(r.gap >= -1e-10 for r in trace.records)


def test_propagation_rows_in_trajectory():
    ds = make_synthetic(150, 0.1, 3.0, 5)
    _, trace = train(ds, TrainConfig(C=0.1, eps=1e-10))
    assert trace.outer_iterations >= 2
    rows = [r for r in trace.trajectory if r["rule"] == "propagation"]
    assert len(rows) == trace.outer_iterations - 1
    _, plain = train(ds, TrainConfig(C=0.1, eps=1e-10, mode="none"))
    assert not any(r["rule"] == "propagation" for r in plain.trajectory)


def test_audit_keeps_reports_and_states():
    ds = make_synthetic(80, 0.1, 3.0, 1)
    _, trace = train(ds, TrainConfig(audit=True, screen_warmup=0, screen_every=2),
                     keep_states=True)
    assert len(trace.states) == trace.outer_iterations
    assert any(st.reports for _, st in trace.states)


def test_deterministic():
    ds = make_synthetic(200, 0.1, 3.0, 2)
    a, ta = train(ds, TrainConfig())
    b, tb = train(ds, TrainConfig())
    assert format_model(a) == format_model(b)
    assert [r.cil_iterations for r in ta.records] == [r.cil_iterations for r in tb.records]


def test_model_round_trip(tmp_path):
    ds = make_synthetic(60, 0.1, 3.0, 3)
    model, _ = train(ds, TrainConfig(C=2.0, s=-0.25))
    text = format_model(model)
    assert text.splitlines()[0] == MODEL_MAGIC
    back = parse_model(text)
    assert format_model(back) == text
    assert np.array_equal(back.decision_function(ds.rows), model.decision_function(ds.rows))
    model.save(tmp_path / "m.txt")
    assert format_model(load_model(tmp_path / "m.txt")) == text
    lin = Model(KernelSpec.linear(), 1.0, 0.0, 0.5, np.array([0]), np.array([1.0]),
                (((1, 2.0),),), 1, {"status": "converged"})
    assert format_model(parse_model(format_model(lin))) == format_model(lin)


@pytest.mark.parametrize("text", ["", "bogus\n", MODEL_MAGIC + "\nkernel linear\n",
                                  MODEL_MAGIC + "\nkernel linear\nC 1\ns 0\nb 0\nn_sv 2\nsv 0 1.0 1:1\n"])
def test_parse_model_errors(text):
    with pytest.raises(ValueError):
        parse_model(text)


def test_predict_zero_score_is_positive():
    m = Model(KernelSpec.linear(), 1.0, 0.0, 0.0, np.array([0]), np.array([1.0]),
              (((1, 1.0),),))
    assert predict(m, ((2, 5.0),)) == (0.0, 1)
    scores, labels = predict_many(m, [((1, -1.0),), ((1, 1.0),)])
    assert list(labels) == [-1, 1]
    empty = Model(KernelSpec.linear(), 1.0, 0.0, -0.3, np.zeros(0, int), np.zeros(0), ())
    assert predict(empty, ()) == (-0.3, -1)


def test_trace_csv(tmp_path):
    _, trace = train(make_synthetic(50, 0.1, 3.0, 0), TrainConfig())
    p = tmp_path / "trace.csv"
    trace.write_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "# rampscreen-trace v1"
    rows = list(csv.DictReader(lines[1:]))
    assert len(rows) == trace.outer_iterations
    assert float(rows[-1]["ramp_objective"]) == trace.records[-1].ramp_objective


def test_ramp_objective_at_zero():
    ds = dataset_from_array([[1.0], [2.0]], [1, -1])
    from rampscreen.kernel import KernelCache
    pr = build_problem(ds, KernelCache(KernelSpec.linear(), ds), 3.0)
    st = SolverState.zeros(pr)
    assert ramp_objective(st, pr) == 3.0 * 2
