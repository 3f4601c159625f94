"""Tests for the prototype bank, assignment network, and mask transform."""

import numpy as np
import pytest

from textseries import numerics as nx
from textseries.numerics import Tensor
from textseries.prototypes import (
    AssignmentNet,
    assign,
    export_weight_heatmap,
    few_shot_extract,
    init_bank,
    mask_components,
    mask_from_weights,
)


# ---------------------------------------------------------------------------
# bank
# ---------------------------------------------------------------------------


def test_bank_rows_orthonormal():
    bank = init_bank(16, 64, seed=0)
    gram = bank.matrix @ bank.matrix.T
    np.testing.assert_allclose(gram, np.eye(16), atol=1e-5)


def test_bank_single_prototype_is_unit_vector():
    bank = init_bank(1, 8, seed=3)
    assert np.linalg.norm(bank.matrix[0]) == pytest.approx(1.0, abs=1e-6)


def test_bank_same_seed_identical():
    a = init_bank(8, 32, seed=42)
    b = init_bank(8, 32, seed=42)
    assert a.matrix.tobytes() == b.matrix.tobytes()


def test_bank_too_many_prototypes_is_error():
    with pytest.raises(ValueError, match="n_prototypes"):
        init_bank(65, 64, seed=0)


# ---------------------------------------------------------------------------
# mask transform
# ---------------------------------------------------------------------------


def test_mask_zero_and_negative_are_excluded():
    m = mask_from_weights(np.array([0.3, -0.2, 0.0]))
    assert m.values[0] == pytest.approx(0.3)
    assert m.values[1] == -np.inf
    assert m.values[2] == -np.inf
    assert not m.degenerate


def test_mask_all_positive_passes_through():
    m = mask_from_weights(np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(m.values, [1.0, 2.0, 3.0])


def test_mask_all_nonpositive_retains_argmax_at_zero():
    m = mask_from_weights(np.array([-1.0, -2.0, -0.5]))
    assert m.degenerate
    assert m.values[2] == 0.0
    assert m.values[0] == -np.inf and m.values[1] == -np.inf


def test_mask_finite_values_zero_at_excluded():
    m = mask_from_weights(np.array([0.7, -3.0]))
    np.testing.assert_array_equal(m.finite_values, np.array([0.7, 0.0], dtype=np.float32))


def test_mask_softmax_semantics():
    m = mask_from_weights(np.array([0.5, -1.0, 1.5]))
    probs = nx.softmax(Tensor(m.finite_values), exclude=m.excluded).data
    assert probs[1] == 0.0
    assert probs.sum() == pytest.approx(1.0)


def test_mask_components_batched_fallback():
    w = np.array([[0.5, -1.0], [-2.0, -3.0]], dtype=np.float32)
    keep_mult, exclude = mask_components(w)
    np.testing.assert_array_equal(keep_mult, [[1.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(exclude, [[False, True], [False, True]])
    # degenerate row: retained slot enters at logit 0, not its raw weight
    logits = w * keep_mult
    assert logits[1, 0] == 0.0


def test_mask_rejects_nonfinite_weights():
    with pytest.raises(ValueError, match="finite"):
        mask_from_weights(np.array([np.inf, 0.0]))


# ---------------------------------------------------------------------------
# assignment network
# ---------------------------------------------------------------------------


def test_assign_zero_init_outputs_bias():
    net = AssignmentNet(window_len=64, text_dim=8, n_prototypes=4, seed=0)
    for name, p in net.params.items():
        if name != "assign.out.b":
            p.data = np.zeros_like(p.data)
    net.params["assign.out.b"].data = np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32)
    w = assign(np.zeros(64, dtype=np.float32), np.zeros(8, dtype=np.float32), net)
    np.testing.assert_allclose(w, [1.0, 2.0, 3.0, 4.0], atol=1e-6)


def test_assign_output_length_contract():
    net = AssignmentNet(window_len=48, text_dim=12, n_prototypes=7, seed=1)
    gen = np.random.Generator(np.random.PCG64(5))
    w = assign(gen.standard_normal(48).astype(np.float32),
               gen.standard_normal(12).astype(np.float32), net)
    assert w.shape == (7,)


def test_assign_shape_mismatch_is_error():
    net = AssignmentNet(window_len=48, text_dim=12, n_prototypes=7, seed=1)
    with pytest.raises(nx.ShapeError, match="window length"):
        assign(np.zeros(50, dtype=np.float32), np.zeros(12, dtype=np.float32), net)


def test_assign_deterministic():
    gen = np.random.Generator(np.random.PCG64(9))
    x = gen.standard_normal(64).astype(np.float32)
    t = gen.standard_normal(8).astype(np.float32)
    net = AssignmentNet(window_len=64, text_dim=8, n_prototypes=4, seed=2)
    a = assign(x, t, net)
    b = assign(x, t, net)
    assert a.tobytes() == b.tobytes()


def test_assign_gradients_flow_to_conv_weights():
    nx.set_default_dtype(np.float64)
    try:
        net = AssignmentNet(window_len=32, text_dim=4, n_prototypes=3, seed=7)
        gen = np.random.Generator(np.random.PCG64(1))
        x = Tensor(gen.standard_normal((2, 32)))
        t = Tensor(gen.standard_normal((2, 4)))
        with nx.GradTape() as tape:
            w = net.assign(x, t)
            loss = nx.mean_all(nx.square(w))
        grads = tape.gradients(loss)
        g = grads[net.params["assign.conv1.w"]]
        assert np.abs(g).max() > 0

        def f(arr):
            p = net.params["assign.conv1.w"]
            saved = p.data
            p.data = arr
            try:
                return nx.mean_all(nx.square(net.assign(x, t))).item()
            finally:
                p.data = saved

        fd = nx.finite_difference(f, net.params["assign.conv1.w"].data, h=1e-4)
        err = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6)
        assert err.max() < 1e-4
    finally:
        nx.set_default_dtype(np.float32)


# ---------------------------------------------------------------------------
# few-shot extraction
# ---------------------------------------------------------------------------


@pytest.fixture
def small_net():
    return AssignmentNet(window_len=32, text_dim=6, n_prototypes=5, seed=11)


def test_few_shot_single_sample_equals_assign(small_net):
    gen = np.random.Generator(np.random.PCG64(2))
    x = gen.standard_normal(32).astype(np.float32)
    t = gen.standard_normal(6).astype(np.float32)
    w1 = assign(x, t, small_net)
    w2 = few_shot_extract(x[None, :], t[None, :], small_net)
    np.testing.assert_allclose(w1, w2, atol=1e-6)


def test_few_shot_duplicates_equal_single(small_net):
    gen = np.random.Generator(np.random.PCG64(3))
    x = gen.standard_normal(32).astype(np.float32)
    t = gen.standard_normal(6).astype(np.float32)
    one = few_shot_extract(x[None, :], t[None, :], small_net)
    many = few_shot_extract(np.repeat(x[None, :], 5, axis=0),
                            np.repeat(t[None, :], 5, axis=0), small_net)
    np.testing.assert_allclose(one, many, atol=1e-5)


def test_few_shot_empty_is_error(small_net):
    with pytest.raises(ValueError, match="at least one"):
        few_shot_extract(np.zeros((0, 32), dtype=np.float32),
                         np.zeros((0, 6), dtype=np.float32), small_net)


# ---------------------------------------------------------------------------
# heatmap export
# ---------------------------------------------------------------------------


def test_heatmap_csv_layout(tmp_path):
    weights = np.array([[0.1, -0.2, 0.3], [1.0, 0.0, -1.0]])
    path = tmp_path / "heat.csv"
    export_weight_heatmap(weights, path, sample_ids=["a", "b"])
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "sample_id,0,1,2"
    assert lines[1].startswith("a,0.100000,-0.200000,0.300000")
    assert len(lines) == 3
