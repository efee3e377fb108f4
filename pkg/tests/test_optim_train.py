import numpy as np
import pytest
from hypothesis import given, strategies as st

from tavit import tensor as T
from tavit.data import build_slices, generate_phantom
from tavit.models import ModelConfig, build_mprvit
from tavit.nn import Parameter, TransformerConfig
from tavit.optim import AdamW, AdamWState, adamw_step
from tavit.train import (
    EpochRecord,
    TrainPlan,
    early_stop,
    history_csv,
    subsample_slices,
    train_stage,
)

ORACLE_FIRST_STEP = -1.99999800000200e-4  # -lr / (1 + eps) with unit bias-corrected moments


def first_step_state(weight_decay=0.0):
    return AdamWState(lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-6, weight_decay=weight_decay)


def test_adamw_first_step_oracle():
    theta = np.zeros(3)
    adamw_step([theta], [np.ones(3)], first_step_state())
    np.testing.assert_allclose(theta, ORACLE_FIRST_STEP, rtol=0, atol=1e-10)
    assert abs(theta[0] - ORACLE_FIRST_STEP) < 1e-18


def test_zero_gradient_without_decay_leaves_parameters():
    theta = np.array([1.0, -2.0, 3.5])
    adamw_step([theta], [np.zeros(3)], first_step_state())
    np.testing.assert_array_equal(theta, [1.0, -2.0, 3.5])


def test_missing_gradient_counts_as_zero():
    theta = np.array([1.0, -2.0])
    adamw_step([theta], [None], first_step_state(weight_decay=0.5))
    np.testing.assert_allclose(theta, np.array([1.0, -2.0]) * (1 - 2e-4 * 0.5), rtol=1e-15)


@given(wd=st.floats(0.0, 10.0), steps=st.integers(1, 5),
       theta0=st.lists(st.floats(-100, 100), min_size=1, max_size=6))
def test_property_decay_only_is_multiplicative_shrink(wd, steps, theta0):
    theta = np.array(theta0)
    state = first_step_state(weight_decay=wd)
    for _ in range(steps):
        adamw_step([theta], [np.zeros_like(theta)], state)
    np.testing.assert_allclose(theta, np.array(theta0) * (1 - 2e-4 * wd) ** steps, rtol=1e-12, atol=1e-300)


def reference_adam(theta, grads, lr=2e-4, b1=0.5, b2=0.999, eps=1e-6):
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return theta


@given(seed=st.integers(0, 10_000), steps=st.integers(1, 8))
def test_property_no_decay_equals_plain_adam(seed, steps):
    rng = np.random.default_rng(seed)
    theta0 = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(steps)]
    theta = theta0.copy()
    state = first_step_state()
    for g in grads:
        adamw_step([theta], [g], state)
    np.testing.assert_allclose(theta, reference_adam(theta0, grads), rtol=0, atol=1e-12)


def test_optimizer_state_length_checked():
    state = first_step_state()
    adamw_step([np.zeros(2)], [np.ones(2)], state)
    with pytest.raises(ValueError):
        adamw_step([np.zeros(2), np.zeros(2)], [None, None], state)


def test_adamw_class_steps_parameters():
    p = Parameter(np.zeros(2, dtype=np.float64))
    p.grad = np.ones(2)
    opt = AdamW([p], weight_decay=0.0)
    opt.step()
    np.testing.assert_allclose(p.data, ORACLE_FIRST_STEP, atol=1e-12)
    opt.zero_grad()
    assert p.grad is None


# early stopping ---------------------------------------------------------------

@pytest.mark.parametrize("history,patience,expected", [
    ([5, 4, 3, 2.5, 2.6, 2.7, 2.8], 2, True),   # best at epoch 4, three epochs without improvement
    ([5, 4, 3, 2.5, 2.6, 2.7], 2, False),
    ([1.0], 0, False),
    ([5, 4, 3, 2, 1], 0, False),
    ([1.0, 1.1], 0, True),
    ([1.0, 1.0], 0, True),  # ties are not improvements
])
def test_early_stop_examples(history, patience, expected):
    assert early_stop(history, patience) is expected


def test_early_stop_rejects_empty():
    with pytest.raises(ValueError):
        early_stop([], 3)


@given(vals=st.lists(st.floats(0, 10), min_size=1, max_size=30), patience=st.integers(0, 10))
def test_property_early_stop_never_fires_on_new_best(vals, patience):
    if vals[-1] < min(vals[:-1], default=np.inf):
        assert not early_stop(vals, patience)


def test_plan_validation():
    with pytest.raises(ValueError):
        TrainPlan(stage="pretrain").validate()
    with pytest.raises(ValueError):
        TrainPlan(epochs=0).validate()
    with pytest.raises(ValueError):
        TrainPlan(patience=-1).validate()


# training loop ---------------------------------------------------------------

TINY = TransformerConfig(embed_dim=8, heads=2, layers=1, mlp_ratio=2)


@pytest.fixture(scope="module")
def tiny_slices():
    train = [generate_phantom(i, (4, 16, 16)) for i in range(3)]
    val = [generate_phantom(10 + i, (4, 16, 16)) for i in range(2)]
    return build_slices(train, "synthesis"), build_slices(val, "synthesis", "val")


def tiny_model():
    return build_mprvit(ModelConfig(image_size=16, channels=(4, 4, 8), transformer=TINY, seed=5))


def test_training_is_deterministic_and_reduces_loss(tiny_slices):
    train, val = tiny_slices
    plan = TrainPlan(epochs=20, batch_size=4, patience=20, lr=3e-3, seed=11)
    a = train_stage(tiny_model(), plan, train, val)
    b = train_stage(tiny_model(), plan, train, val)
    assert history_csv(a.history) == history_csv(b.history)
    assert a.history[-1].train_l1 < a.history[0].train_l1
    for name in a.best_state:
        np.testing.assert_array_equal(a.best_state[name], b.best_state[name])


def test_patience_zero_stops_one_epoch_after_best(tiny_slices):
    train, val = tiny_slices
    plan = TrainPlan(epochs=30, batch_size=4, patience=0, lr=3e-3)
    result = train_stage(tiny_model(), plan, train, val)
    if result.stopped_early:
        assert len(result.history) == result.best_epoch + 1
    vals = [r.val_l1 for r in result.history]
    assert result.best_epoch == int(np.argmin(vals)) + 1


def test_best_weights_are_restored(tiny_slices):
    train, val = tiny_slices
    model = tiny_model()
    result = train_stage(model, TrainPlan(epochs=3, batch_size=4, lr=3e-3), train, val)
    for name, arr in model.state_dict().items():
        np.testing.assert_array_equal(arr, result.best_state[name])


def test_empty_split_is_an_error(tiny_slices):
    train, val = tiny_slices
    from tavit.train import take_slices
    with pytest.raises(ValueError):
        train_stage(tiny_model(), TrainPlan(epochs=1), train, take_slices(val, np.array([], dtype=int)))


def test_subsample_keeps_per_patient_counts(tiny_slices):
    train, _ = tiny_slices
    sub = subsample_slices(train, 2, np.random.default_rng(0))
    assert len(sub) == 6
    assert sorted(set(sub.patient_ids)) == sorted(set(train.patient_ids))
    assert subsample_slices(train, 0, np.random.default_rng(0)) is train


def test_history_csv_round_trips_floats():
    text = history_csv([EpochRecord(1, 0.1, 1 / 3)])
    assert text.splitlines()[1] == f"1,0.1,{1 / 3!r}"
    assert float(text.splitlines()[1].split(",")[2]) == 1 / 3


def test_non_finite_loss_raises(tiny_slices):
    train, val = tiny_slices
    model = tiny_model()
    with T.no_grad():
        model.head.weight.data[...] = np.nan
    with pytest.raises(FloatingPointError):
        train_stage(model, TrainPlan(epochs=1, batch_size=4), train, val)
