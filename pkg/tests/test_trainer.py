import numpy as np
import pytest

from cider.dsp import LabeledPairInputs, ModelInput
from cider.errors import EmptyList, NoNegatives, NoPositives, TooFewRuns
from cider.model import CiderConfig
from cider.trainer import (AdamState, TrainConfig, adam_step, aggregate_runs,
                           auto_class_weights, fit, sample_chunk)

TOY_MODEL = CiderConfig(channels=(2, 3, 3, 4), kernel=3, strides=(2, 2, 1, 1),
                        input_shape=(12, 12, 2))


def test_adam_zero_gradient_leaves_params():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    before = params["w"].copy()
    adam_step(params, {"w": np.zeros(3)}, AdamState(), 1, TrainConfig())
    np.testing.assert_array_equal(params["w"], before)


def test_adam_single_step_magnitude():
    # one step with constant gradient c: bias correction gives ~lr * sign(c)
    cfg = TrainConfig(learning_rate=0.01)
    for c in (0.5, -3.0, 1e-3):
        params = {"w": np.array([0.0])}
        adam_step(params, {"w": np.array([c])}, AdamState(), 1, cfg)
        expected = -cfg.learning_rate * c / (abs(c) + cfg.adam_eps)
        assert params["w"][0] == pytest.approx(expected, rel=1e-12)
        assert abs(params["w"][0]) == pytest.approx(cfg.learning_rate, rel=1e-4)


def test_adam_quadratic_descent():
    # direct simulation: monotone drop until the convergence region (the
    # momentum term oscillates once theta reaches ~0 around step 11), with
    # the 50-step value several orders of magnitude below the start
    cfg = TrainConfig(learning_rate=0.1)
    params = {"theta": np.array([1.0])}
    state = AdamState()
    values = [params["theta"][0] ** 2]
    for t in range(1, 51):
        g = 2.0 * params["theta"]
        adam_step(params, {"theta": g.copy()}, state, t, cfg)
        values.append(params["theta"][0] ** 2)
    assert all(values[i + 1] < values[i] for i in range(10))
    assert values[50] < 1e-3 * values[0]


def test_adam_only_touched_params_move():
    cfg = TrainConfig(learning_rate=0.01)
    params = {"a": np.ones(2), "b": np.ones(2)}
    adam_step(params, {"a": np.ones(2)}, AdamState(), 1, cfg)
    assert not np.array_equal(params["a"], np.ones(2))
    np.testing.assert_array_equal(params["b"], np.ones(2))


def test_sample_chunk_uniform_and_seeded():
    rng = np.random.default_rng(0)
    items = ["a", "b", "c", "d"]
    counts = {k: 0 for k in items}
    n = 10_000
    for _ in range(n):
        counts[sample_chunk(items, rng)] += 1
    sigma = np.sqrt(n * 0.25 * 0.75)
    for k in items:
        assert abs(counts[k] - n * 0.25) < 3 * sigma

    a = [sample_chunk(items, np.random.default_rng(5)) for _ in range(20)]
    b = [sample_chunk(items, np.random.default_rng(5)) for _ in range(20)]
    assert a == b
    assert sample_chunk(["only"], rng) == "only"
    with pytest.raises(EmptyList):
        sample_chunk([], rng)


def test_auto_class_weights():
    w_pos, w_neg = auto_class_weights([1, 1, 0, 0])
    assert (w_pos, w_neg) == (1.0, 1.0)
    w_pos, w_neg = auto_class_weights([1, 0, 0, 0])
    assert w_pos == 2.0 and w_neg == pytest.approx(2 / 3)
    with pytest.raises(NoPositives):
        auto_class_weights([0, 0])
    with pytest.raises(NoNegatives):
        auto_class_weights([1, 1])


def test_aggregate_runs():
    mean, std = aggregate_runs([0.8, 0.9])
    assert mean == pytest.approx(0.85)
    assert std == pytest.approx(0.070711, abs=1e-5)
    mean2, std2 = aggregate_runs([0.9, 0.8])
    assert (mean2, std2) == (mean, std)
    assert aggregate_runs([0.75, 0.75, 0.75])[1] == 0.0
    assert aggregate_runs([0.7, 0.7, 0.7])[1] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(TooFewRuns):
        aggregate_runs([0.5])


# --- fit on a tiny planted-signal dataset ---

def _planted_examples(rng, n_pairs, separation=6.0):
    """Recording pairs whose positive class lights up a band of rows."""
    examples = []
    for i in range(n_pairs):
        label = i % 2
        inputs = []
        for _ in range(int(rng.integers(1, 4))):
            base = rng.normal(-60.0, 3.0, size=(12, 12, 2))
            if label:
                base[4:8, :, :] += separation + rng.normal(0, 0.5)
            inputs.append(ModelInput(np.clip(base, -80, 0).astype(np.float32)))
        examples.append(LabeledPairInputs(f"p{i:03d}", label, inputs))
    return examples


def _fit_config(seed=0, epochs=10):
    return TrainConfig(learning_rate=1e-2, batch_size=8, max_epochs=epochs, seed=seed)


def test_fit_learns_separable_data():
    rng = np.random.default_rng(20)
    train = _planted_examples(rng, 40)
    dev = _planted_examples(rng, 16)
    result = fit(train, dev, TOY_MODEL, _fit_config())
    assert max(result.dev_auc_by_epoch) >= 0.95
    assert result.best_epoch == int(np.argmax(result.dev_auc_by_epoch)) + 1


def test_fit_single_epoch():
    rng = np.random.default_rng(21)
    train = _planted_examples(rng, 12)
    dev = _planted_examples(rng, 8)
    result = fit(train, dev, TOY_MODEL, _fit_config(epochs=1))
    assert result.best_epoch == 1
    assert len(result.dev_auc_by_epoch) == 1
    assert result.final_params is not None


def test_fit_deterministic():
    rng = np.random.default_rng(22)
    train = _planted_examples(rng, 16)
    dev = _planted_examples(rng, 8)
    a = fit(train, dev, TOY_MODEL, _fit_config(seed=9, epochs=2))
    b = fit(train, dev, TOY_MODEL, _fit_config(seed=9, epochs=2))
    assert a.dev_auc_by_epoch == b.dev_auc_by_epoch
    assert a.best_epoch == b.best_epoch
    for name in a.final_params.tensors:
        np.testing.assert_array_equal(a.final_params.tensors[name].data,
                                      b.final_params.tensors[name].data)


def test_fit_loss_decreases_on_fixed_batch():
    # smoke property at the stock learning rate
    from cider.autodiff import Tensor, backward, sigmoid, weighted_bce
    from cider.model import build, forward
    from cider.trainer import AdamState, adam_step

    rng = np.random.default_rng(23)
    examples = _planted_examples(rng, 16)
    x = np.stack([ex.inputs[0].to_nchw() for ex in examples]).astype(np.float32)
    y = np.array([ex.label for ex in examples], dtype=np.float32)
    cfg = TrainConfig()  # stock learning_rate 1e-4
    params = build(TOY_MODEL, seed=3)
    state = AdamState()
    losses = []
    for t in range(1, 7):
        params.zero_grad()
        loss = weighted_bce(sigmoid(forward(params, Tensor(x), "train")), y)
        backward(loss)
        losses.append(float(loss.data))
        grads = {n: p.grad for n, p in params.tensors.items() if p.grad is not None}
        data = {n: params.tensors[n].data for n in grads}
        adam_step(data, grads, state, t, cfg)
    assert losses[5] < losses[0]


def test_fit_writes_log(tmp_path):
    rng = np.random.default_rng(24)
    train = _planted_examples(rng, 12)
    dev = _planted_examples(rng, 8)
    log = tmp_path / "train.log.csv"
    fit(train, dev, TOY_MODEL, _fit_config(epochs=2), log_path=log)
    lines = log.read_text().strip().split("\n")
    assert lines[0] == "epoch,train_loss,dev_auc"
    assert len(lines) == 3
    epoch, loss, auc = lines[1].split(",")
    assert epoch == "1" and float(loss) > 0 and 0.0 <= float(auc) <= 1.0


def test_fit_requires_both_classes():
    rng = np.random.default_rng(25)
    train = [ex for ex in _planted_examples(rng, 10) if ex.label == 1]
    dev = _planted_examples(rng, 8)
    with pytest.raises(NoNegatives):
        fit(train, dev, TOY_MODEL, _fit_config())
    with pytest.raises(EmptyList):
        fit([], dev, TOY_MODEL, _fit_config())


def test_fit_requires_at_least_one_epoch():
    rng = np.random.default_rng(26)
    train = _planted_examples(rng, 8)
    dev = _planted_examples(rng, 8)
    with pytest.raises(ValueError):
        fit(train, dev, TOY_MODEL, _fit_config(epochs=0))
