import hashlib

import numpy as np
import pytest

import quadlab.trainer as tr
from quadlab import autodiff as ad
from quadlab.autodiff import Tensor
from quadlab.baselines import FisherDiag, estimate_fisher, ewc_penalty, ewc_penalty_value, method_spec
from quadlab.benchmark import BenchmarkConfig
from quadlab.memory import TripletBuffer
from quadlab.model import Model, init_params
from quadlab.trainer import TrainConfig, evaluate, load_data, run_sequence, score

TINY_BENCH = BenchmarkConfig(train_size=32, val_size=8, test_size=16, novel_size=16)
TINY = dict(epochs=1, batch_size=16, d_model=16, n_heads=2, d_ff=16, memory_capacity=40, fisher_samples=8)


@pytest.fixture(scope="module")
def data():
    return load_data(TINY_BENCH)


def cfg(method, **kw):
    return TrainConfig(method=method, **{**TINY, **kw})


def param_bytes(model):
    return b"".join(p.data.tobytes() for p in model.parameters())


def test_unknown_method_and_bad_config():
    with pytest.raises(ValueError, match="unknown method"):
        method_spec("magic")
    with pytest.raises(ValueError):
        cfg("quad", memory_capacity=0)
    with pytest.raises(ValueError):
        cfg("quad", selection="nearest")
    with pytest.raises(ValueError):
        cfg("vanilla", lr=0)


def test_zero_lambda_quad_equals_vanilla_bitwise(data):
    _, a = run_sequence(data, cfg("vanilla"))
    _, b = run_sequence(data, cfg("quad", lam=0.0))
    assert param_bytes(a.model) == param_bytes(b.model)
    assert sum(b.counters.stability_evals) > 0


def test_vanilla_never_reads_memory(data):
    _, st = run_sequence(data, cfg("vanilla"))
    assert st.counters.memory_reads == 0 and st.memory is None and st.buffer is None


def test_vanilla_loss_trends_down():
    d = load_data(TINY_BENCH)
    c = cfg("vanilla", lr=3e-3)
    st = tr.init_state(d, c)
    batch = d.splits[0]["train"].subset(np.arange(16))
    rng = np.random.default_rng(0)
    for _ in range(50):
        tr._step(st, c, batch, (), rng, 0)
    losses = np.array([row[5] for row in st.losses])
    ma = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert ma[-1] < ma[0]
    assert np.corrcoef(np.arange(len(ma)), ma)[0, 1] < -0.9


def test_er_first_macro_matches_vanilla(data):
    snaps = {}

    def hook(name):
        def f(state, macro):
            if macro == 0:
                snaps[name] = param_bytes(state.model)
        return f

    run_sequence(data, cfg("vanilla"), eval_hook=hook("vanilla"))
    run_sequence(data, cfg("er"), eval_hook=hook("er"))
    assert snaps["vanilla"] == snaps["er"]


def test_er_with_zero_capacity_is_vanilla(data):
    _, a = run_sequence(data, cfg("vanilla"))
    _, b = run_sequence(data, cfg("er", memory_capacity=0))
    assert param_bytes(a.model) == param_bytes(b.model)


def test_er_replay_draws_are_uniform():
    from scipy.stats import chi2
    from quadlab.benchmark import TripletSet
    n = 30
    ts = TripletSet(np.zeros((n, 1, 1)), np.zeros((n, 1), dtype=np.int64), np.arange(n),
                    np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64), [()] * n)
    buf = TripletBuffer(n).insert_task_triplets(0, ts, np.random.default_rng(0))
    counts = np.bincount(buf.sample(60_000, np.random.default_rng(1)).answers, minlength=n)
    assert ((counts - 2000.0) ** 2 / 2000.0).sum() < chi2.ppf(0.99, df=n - 1)


def test_fisher_properties(data):
    c = cfg("ewc")
    model = tr.init_state(data, c).model
    train = data.splits[0]["train"]
    f1 = estimate_fisher(model, train, 16, np.random.default_rng(0))
    f2 = estimate_fisher(model, train, 32, np.random.default_rng(0))
    assert all((v >= 0).all() for v in f1.importance.values())
    # question tokens never used by the task get no importance
    used = np.unique(train.questions)
    unused = np.setdiff1d(np.arange(model.config.question_vocab_size), used)
    assert np.all(f1.importance["q.embed"][unused] == 0)
    for k in ("head.w", "layer0.wq", "vis.w1"):
        rel = np.linalg.norm(f2.importance[k] - f1.importance[k]) / np.linalg.norm(f2.importance[k])
        assert rel < 0.2 or k != "head.w"
    assert all(p.grad is None or not p.grad.any() for p in model.parameters())


def test_ewc_penalty_examples():
    rng = np.random.default_rng(0)
    anchor = {"w": rng.normal(size=(2, 3)), "b": rng.normal(size=3)}
    imp = {"w": rng.random((2, 3)), "b": rng.random(3)}
    fisher = FisherDiag(imp, anchor)
    at = {k: Tensor(v.copy(), requires_grad=True) for k, v in anchor.items()}
    assert ewc_penalty(at, [fisher]).item() == 0.0

    moved = {k: v.copy() for k, v in anchor.items()}
    moved["w"][1, 2] += 0.3
    val = ewc_penalty({k: Tensor(v) for k, v in moved.items()}, [fisher]).item()
    assert val == pytest.approx(imp["w"][1, 2] * 0.09, abs=1e-12)

    rand = {k: v + rng.normal(size=v.shape) for k, v in anchor.items()}
    second = FisherDiag({k: rng.random(v.shape) for k, v in anchor.items()}, {k: v * 0 for k, v in anchor.items()})
    oracle = sum(float(f.importance[k].ravel()[i]) * (rand[k].ravel()[i] - f.anchor[k].ravel()[i]) ** 2
                 for f in (fisher, second) for k in rand for i in range(rand[k].size))
    got = ewc_penalty({k: Tensor(v) for k, v in rand.items()}, [fisher, second]).item()
    assert got == pytest.approx(oracle, abs=1e-10)
    assert ewc_penalty_value(rand, [fisher, second]) == pytest.approx(oracle, abs=1e-10)


def test_first_macro_has_no_stability_terms(data):
    _, st = run_sequence(data, cfg("quad"))
    first = data.schedule.macro_tasks(0)
    assert all(st.counters.stability_evals[t] == 0 for t in first)
    assert all(n > 0 for n in st.counters.stability_evals[len(first):])


def test_memory_size_after_each_macro(data):
    sizes = []
    c = cfg("quad")
    run_sequence(data, c, eval_hook=lambda st, m: sizes.append((len(st.memory), st.memory.mutations)))
    per_task = TINY_BENCH.train_size
    for m, (n, mutations) in enumerate(sizes):
        seen = 4 * (m + 1)
        assert n == min(c.memory_capacity, seen * per_task)
        assert mutations == seen


def test_teacher_constant_within_macro(data, monkeypatch):
    seen = []
    real = tr._commit_boundary

    def spy(state, cfg_, data_, rng, macro):
        if state.teacher is not None:
            seen.append(("before", macro, param_bytes(state.teacher)))
        real(state, cfg_, data_, rng, macro)
        seen.append(("after", macro, param_bytes(state.teacher)))

    monkeypatch.setattr(tr, "_commit_boundary", spy)
    run_sequence(data, cfg("quad"))
    afters = {m: h for kind, m, h in seen if kind == "after"}
    for kind, m, h in seen:
        if kind == "before":
            assert h == afters[m - 1]


def test_evaluation_has_no_side_effects(data):
    _, plain = run_sequence(data, cfg("quad"))
    probe = data.splits[3]["test"]
    _, probed = run_sequence(data, cfg("quad"),
                             eval_hook=lambda st, m: evaluate(st.model, probe, tr.skill_space(data, 0)))
    assert param_bytes(plain.model) == param_bytes(probed.model)


def test_run_is_deterministic_and_matrix_shaped(data):
    m1, _ = run_sequence(data, cfg("quad"))
    m2, _ = run_sequence(data, cfg("quad"))
    assert np.array_equal(m1.a, m2.a, equal_nan=True)
    L = m1.a.shape[0]
    for i in range(L):
        for j in range(L):
            assert np.isnan(m1.a[i, j]) == (i > j)
    assert m1.ap == m2.ap and m1.forget == m2.forget


def test_joint_fills_final_column(data):
    m, _ = run_sequence(data, cfg("joint"))
    assert not np.isnan(m.a[:, -1]).any()
    assert np.isnan(m.a[:, :-1]).all() and np.isnan(m.forget)
    again, _ = run_sequence(data, cfg("joint"))
    assert again.ap == m.ap


def test_hardwired_colour_model_on_counting(data):
    c = cfg("vanilla")
    model = tr.init_state(data, c).model
    red = data.bench.vocab.answer("color", "red")
    bias = np.zeros(model.config.answer_vocab_size)
    bias[red] = 1e3
    model.params["head.b"].data = bias
    acc, rate = evaluate(model, data.macro_split(0, "test"), tr.skill_space(data, 0))
    assert (acc, rate) == (0.0, 1.0)


def test_score_perfect_and_uniform():
    space = np.arange(6)
    y = np.random.default_rng(0).integers(0, 6, 1000)
    assert score(y, y, space) == (1.0, 0.0)
    pred = np.random.default_rng(1).integers(0, 30, 1000)
    _, rate = score(pred, y, space)
    half_width = 3 * np.sqrt(0.8 * 0.2 / 1000)
    assert abs(rate - 0.8) < half_width
    with pytest.raises(ValueError):
        score(np.array([]), np.array([]), space)


def test_artifacts(data, tmp_path):
    c = cfg("quad")
    metrics, st = run_sequence(data, c)
    out = tr.write_run(tmp_path, data, c, metrics, st)
    import json
    summary = json.loads((out / "metrics.json").read_text())
    assert {"AP", "Forget", "OOAS", "novelAP"} <= set(summary)
    assert (out / "losses.csv").read_text().splitlines()[0] == "step,task,plasticity,pseudo_label,attention,total"
    assert (out / "matrix.csv").read_text().startswith("task,count,color")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"]["global"] == 0 and len(manifest["benchmark_hash"]) == 64
