import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from semdan import autodiff as ad
from semdan.autodiff import ShapeError, Tensor
from semdan.conditioning import (ConditioningStrategy, DataError, PrototypeBank, batch_prototypes,
                                 condition_input, ema_update, entropy, entropy_weight, normalize_predictions,
                                 project_structure)


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_normalize_hand_value():
    out = normalize_predictions(Tensor([[3.0, 4.0]]), Tensor([[0.5, 0.5]]))
    np.testing.assert_allclose(out.values, [[3.5355339059, 3.5355339059]], rtol=1e-10)


def test_normalize_one_hot():
    out = normalize_predictions(Tensor([[1.0, 2.0, 2.0]]), Tensor([[0.0, 1.0]]))
    np.testing.assert_allclose(out.values, [[0.0, 3.0]], rtol=1e-15)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (6, 8), elements=st.floats(-20, 20)),
       arrays(np.float64, (6, 3), elements=st.floats(-10, 10)))
def test_normalize_preserves_feature_norm(f, z):
    p = softmax(z)
    out = normalize_predictions(Tensor(f), Tensor(p)).values
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), np.linalg.norm(f, axis=1), rtol=1e-9, atol=1e-300)


def test_normalize_keeps_argmax():
    rng = np.random.default_rng(0)
    p = softmax(rng.normal(size=(20, 4)))
    out = normalize_predictions(Tensor(rng.normal(size=(20, 6))), Tensor(p)).values
    nz = np.linalg.norm(out, axis=1) > 0
    np.testing.assert_array_equal(np.argmax(out[nz], axis=1), np.argmax(p[nz], axis=1))


def test_batch_prototypes_examples():
    m, present = batch_prototypes(np.array([[1.0, 1.0], [3.0, 3.0]]), [0, 0], 1)
    np.testing.assert_array_equal(m, [[2.0, 2.0]])
    np.testing.assert_array_equal(present, [True])
    _, present = batch_prototypes(np.ones((2, 2)), [0, 1], 3)
    np.testing.assert_array_equal(present, [True, True, False])


def test_batch_prototypes_bad_label():
    with pytest.raises(DataError, match="index 1"):
        batch_prototypes(np.ones((2, 2)), [0, 3], 3)


def test_ema_half_step():
    bank = PrototypeBank(np.zeros((1, 2)), 0.5, np.array([True]))
    ema_update(bank, np.array([[2.0, 2.0]]), np.array([True]))
    np.testing.assert_array_equal(bank.M, [[1.0, 1.0]])


def test_ema_geometric_convergence():
    bank = PrototypeBank(np.zeros((1, 1)), 0.5, np.array([True]))
    target = np.array([[4.0]])
    for t in range(1, 8):
        ema_update(bank, target, np.array([True]))
        assert bank.M[0, 0] == pytest.approx(4.0 - 4.0 * 0.5 ** t, abs=1e-15)


def test_ema_frozen_and_first_touch():
    bank = PrototypeBank.empty(2, 2, lambda_ema=1.0)
    ema_update(bank, np.array([[1.0, 2.0], [9.0, 9.0]]), np.array([True, False]))
    np.testing.assert_array_equal(bank.M, [[1.0, 2.0], [0.0, 0.0]])
    np.testing.assert_array_equal(bank.initialized, [True, False])
    for _ in range(5):
        ema_update(bank, np.array([[5.0, 5.0], [0.0, 0.0]]), np.array([True, False]))
    np.testing.assert_array_equal(bank.M, [[1.0, 2.0], [0.0, 0.0]])


def test_project_basis_and_uniform():
    M = np.array([[1.0, 0.0, 2.0], [0.0, 3.0, 1.0]])
    bank = PrototypeBank(M, 0.5, np.array([True, True]))
    np.testing.assert_array_equal(project_structure(Tensor([[5.0, 0.0]]), bank).values, [5 * M[0]])
    out = project_structure(Tensor([[2.0, 2.0]]), bank).values
    np.testing.assert_allclose(out, [4 * M.mean(axis=0)], rtol=1e-15)
    with pytest.raises(ShapeError):
        project_structure(Tensor([[1.0, 0.0, 0.0]]), bank)


def test_entropy_weight_examples():
    np.testing.assert_array_equal(entropy_weight(Tensor([[0.0, 1.0, 0.0]])).values, [[2.0]])
    np.testing.assert_allclose(entropy_weight(Tensor([[0.5, 0.5]])).values, [[1.5]], rtol=1e-15)


def test_entropy_weight_range():
    p = softmax(np.random.default_rng(1).normal(size=(200, 5)) * 3)
    w = entropy_weight(p).values
    assert np.all((w > 1) & (w <= 2))
    assert entropy(np.array([[0.0, 1.0]]))[0] == 0.0


# ------------------------------------------------------------------ condition_input

D, C = 8, 3


@pytest.fixture
def batch():
    rng = np.random.default_rng(2)
    return Tensor(rng.normal(size=(5, D))), Tensor(softmax(rng.normal(size=(5, C))))


@pytest.fixture
def bank():
    return PrototypeBank(np.random.default_rng(3).normal(size=(C, D)), 0.5, np.ones(C, dtype=bool))


@pytest.mark.parametrize("kind,width", [("dann", D), ("concat_fp", D + C), ("sdan", D + C),
                                        ("ssdan", 2 * D), ("multilinear", D * C)])
def test_input_widths(kind, width, batch, bank):
    s = ConditioningStrategy(kind)
    assert s.input_width(D, C) == width
    assert condition_input(s, *batch, bank=bank).tensor.shape == (5, width)


def test_dann_passes_features_through(batch):
    f, p = batch
    out = condition_input(ConditioningStrategy("dann"), f, p).tensor
    np.testing.assert_array_equal(out.values, f.values)


def test_sdan_k1_branch_norm_equals_feature_norm(batch):
    f, p = batch
    out = condition_input(ConditioningStrategy("sdan", 1.0), f, p).tensor.values
    np.testing.assert_allclose(np.linalg.norm(out[:, D:], axis=1), np.linalg.norm(out[:, :D], axis=1), rtol=1e-12)


def test_multilinear_hand_value():
    out = condition_input(ConditioningStrategy("multilinear"), Tensor([[1.0, 2.0]]), Tensor([[0.3, 0.7]]))
    np.testing.assert_allclose(out.tensor.values, [[0.3, 0.7, 0.6, 1.4]], rtol=1e-15)


@pytest.mark.parametrize("k", [1.0, 3.0, 8.0])
def test_reported_norm_ratio(k, batch):
    out = condition_input(ConditioningStrategy("sdan", k), *batch)
    np.testing.assert_allclose(out.feature_norm / out.branch_norm, 1 / k, rtol=1e-9)


@pytest.mark.parametrize("kind", ["concat_fp", "sdan", "ssdan", "multilinear"])
def test_prediction_branch_carries_no_gradient(kind, batch, bank):
    f, _ = batch
    z = Tensor(np.random.default_rng(4).normal(size=(5, C)), requires_grad=True)
    p = ad.softmax_rows(z)
    out = condition_input(ConditioningStrategy(kind, 2.0 if kind in ("sdan", "ssdan") else 1.0), f, p, bank=bank)
    ad.backward(ad.sum_all(ad.mul(out.tensor, out.tensor)))
    assert z.grad is None or not np.any(z.grad)


def test_ssdan_uninitialized_rows_warn(batch):
    f, p = batch
    empty = PrototypeBank.empty(C, D)
    with pytest.warns(RuntimeWarning, match="not initialized"):
        out = condition_input(ConditioningStrategy("ssdan"), f, p, bank=empty)
    assert out.tensor.shape == (5, 2 * D)
    np.testing.assert_array_equal(out.tensor.values[:, D:], 0.0)


def test_ssdan_initialized_is_silent(batch, bank):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        condition_input(ConditioningStrategy("ssdan"), *batch, bank=bank)


def test_ssdan_needs_bank(batch):
    with pytest.raises(ValueError):
        condition_input(ConditioningStrategy("ssdan"), *batch)


@pytest.mark.parametrize("kwargs", [{"kind": "cdan"}, {"kind": "sdan", "k": 0}, {"kind": "concat_fp", "k": 3}])
def test_invalid_strategies(kwargs):
    with pytest.raises(ValueError):
        ConditioningStrategy(**kwargs)


def test_ssdan_projection_norm_is_uncontrolled_unless_renormalized(batch, bank):
    f, p = batch
    fn = np.linalg.norm(f.values, axis=1)
    raw = condition_input(ConditioningStrategy("ssdan", 2.0), f, p, bank=bank)
    assert not np.allclose(raw.branch_norm, 2 * fn)
    fixed = condition_input(ConditioningStrategy("ssdan", 2.0), f, p, bank=bank, renormalize=True)
    np.testing.assert_allclose(fixed.branch_norm, 2 * fn, rtol=1e-12)
