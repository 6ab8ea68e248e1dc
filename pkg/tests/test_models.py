import numpy as np
import pytest

from diffora.errors import DimensionError, NormalizationError
from diffora.models import (
    TheoryNet,
    init_modular_net,
    init_theory_net,
    modular_forward,
    theory_forward,
    theory_grad,
    theory_loss,
    train_theory,
)
from diffora.numerics import SeededRng, gaussian_matrix, sign_vector

from oracles import central_difference, materialized_modular_forward


def unit_columns(d, n, seed):
    x = gaussian_matrix(d, n, SeededRng(seed))
    return x / np.sqrt(np.sum(x * x, axis=0))


# ---------------------------------------------------------------------------
# TheoryNet
# ---------------------------------------------------------------------------


def test_theory_forward_zero_weights():
    net = TheoryNet(np.zeros((3, 4)), np.zeros((3, 4)), sign_vector(4, SeededRng(1)),
                    np.ones((3, 4)))
    x = unit_columns(3, 5, 2)
    assert np.array_equal(theory_forward(net, x), np.zeros((5, 1)))


def test_theory_forward_all_ones_gate_reduces_to_plain_sum():
    net = init_theory_net(4, 8, SeededRng(3))
    x = unit_columns(4, 6, 4)
    got = theory_forward(net, x)
    z = (net.w0 + net.w).T @ x
    want = ((net.a.T @ np.maximum(z, 0.0)) / np.sqrt(8)).T
    assert np.max(np.abs(got - want)) < 1e-12


def test_theory_forward_hand_case():
    # m=2, d=2, a=(+1,-1); w columns chosen so both units are active at x
    w0 = np.zeros((2, 2))
    w = np.array([[1.0, 0.5], [0.0, 0.5]])  # unit 0 = (1,0), unit 1 = (.5,.5)
    a = np.array([[1.0], [-1.0]])
    net = TheoryNet(w0, w, a, np.ones((2, 2)))
    x = np.array([[1.0], [0.0]])
    # z0 = 1, z1 = 0.5 -> (relu(1) - relu(0.5)) / sqrt(2)
    assert theory_forward(net, x)[0, 0] == pytest.approx(0.5 / np.sqrt(2.0), abs=1e-15)


def test_theory_forward_rejects_non_unit_columns():
    net = init_theory_net(3, 4, SeededRng(5))
    with pytest.raises(NormalizationError):
        theory_forward(net, 2.0 * unit_columns(3, 2, 6))


def test_theory_loss_values():
    net = init_theory_net(3, 4, SeededRng(7))
    x = unit_columns(3, 5, 8)
    y = theory_forward(net, x)
    assert theory_loss(net, x, y) == pytest.approx(0.0, abs=1e-30)
    # single sample with f = 3, y = 1 -> 0.5 * 4 = 2
    net2 = TheoryNet(np.zeros((2, 1)), np.array([[3.0 * np.sqrt(1)], [0.0]]),
                     np.array([[1.0]]), np.ones((2, 1)))
    x2 = np.array([[1.0], [0.0]])
    assert theory_forward(net2, x2)[0, 0] == pytest.approx(3.0)
    assert theory_loss(net2, x2, np.array([[1.0]])) == pytest.approx(2.0)


def test_theory_loss_matches_scalar_loop():
    net = init_theory_net(4, 6, SeededRng(9))
    x = unit_columns(4, 5, 10)
    y = gaussian_matrix(5, 1, SeededRng(11))
    preds = theory_forward(net, x)
    want = sum(0.5 * (preds[i, 0] - y[i, 0]) ** 2 for i in range(5))
    assert theory_loss(net, x, y) == pytest.approx(want, rel=1e-12)


def test_theory_loss_length_mismatch():
    net = init_theory_net(3, 4, SeededRng(12))
    with pytest.raises(DimensionError):
        theory_loss(net, unit_columns(3, 4, 13), np.zeros((5, 1)))


def test_theory_grad_zero_gate_and_perfect_fit():
    net = init_theory_net(3, 5, SeededRng(14), gamma=np.zeros((3, 5)))
    x = unit_columns(3, 4, 15)
    y = gaussian_matrix(4, 1, SeededRng(16))
    assert np.array_equal(theory_grad(net, x, y), np.zeros((3, 5)))
    net2 = init_theory_net(3, 5, SeededRng(17))
    y2 = theory_forward(net2, x)
    assert np.max(np.abs(theory_grad(net2, x, y2))) == 0.0


def test_theory_grad_matches_finite_differences():
    net = init_theory_net(4, 6, SeededRng(18))
    x = unit_columns(4, 5, 19)
    y = gaussian_matrix(5, 1, SeededRng(20))
    analytic = theory_grad(net, x, y)
    fd = central_difference(lambda: theory_loss(net, x, y), net.w)
    z = net.effective_weights().T @ x
    assert np.min(np.abs(z)) > 1e-6  # away from the ReLU kink
    denom = np.maximum(np.abs(fd), 1e-8)
    assert np.max(np.abs(analytic - fd) / denom) < 1e-4


def test_positive_homogeneity():
    net = init_theory_net(3, 6, SeededRng(21))
    x = unit_columns(3, 4, 22)
    base = theory_forward(net, x)
    c = 3.7
    scaled = TheoryNet(c * net.w0, c * net.w, net.a, net.gamma)
    got = theory_forward(scaled, x)
    assert np.max(np.abs(got - c * base)) < 1e-12 * max(1.0, np.max(np.abs(base)))


def test_gradient_masking_is_bitwise():
    gamma = np.zeros((3, 6))
    gamma[:, :3] = 1.0
    net = init_theory_net(3, 6, SeededRng(23), gamma=gamma)
    x = unit_columns(3, 5, 24)
    y = gaussian_matrix(5, 1, SeededRng(25))
    frozen = net.w[:, 3:].copy()
    train_theory(net, x, y, eta=0.05, steps=40)
    assert np.array_equal(net.w[:, 3:], frozen)


def test_train_theory_residual_count():
    net = init_theory_net(3, 32, SeededRng(26))
    x = unit_columns(3, 4, 27)
    y = 0.5 * gaussian_matrix(4, 1, SeededRng(28))
    res = train_theory(net, x, y, eta=0.05, steps=25)
    assert len(res) == 26
    assert res[-1] < res[0]


# ---------------------------------------------------------------------------
# ModularNet
# ---------------------------------------------------------------------------


def build_net(seed=30, layers=2, with_adapters=True, train_b=False):
    net = init_modular_net(layers, 4, 2, 8, 1, SeededRng(seed))
    if with_adapters:
        net = net.with_own_adapters(2, 2.0, SeededRng(seed + 1))
        if train_b:
            rng = SeededRng(seed + 2)
            for li, fam, slot in net.slots():
                slot.adapter.b = 0.3 * gaussian_matrix(*slot.adapter.b.shape, rng)
    return net


def test_fresh_adapters_keep_base_outputs_bitwise():
    base = build_net(with_adapters=False)
    net = base.with_own_adapters(2, 2.0, SeededRng(31))
    x = gaussian_matrix(8, 7, SeededRng(32))
    gates = np.full((2, 6), 0.37)
    assert np.array_equal(net.forward(x, gates), base.forward(x))


def test_fresh_adapters_gate_invariance():
    net = build_net()
    x = gaussian_matrix(8, 5, SeededRng(33))
    all_zero = net.forward(x, np.zeros((2, 6)))
    all_one = net.forward(x, np.ones((2, 6)))
    assert np.array_equal(all_zero, all_one)


def test_modular_forward_matches_materialized_reference():
    net = build_net(train_b=True)
    x = gaussian_matrix(8, 6, SeededRng(34))
    gates = np.tile(np.array([1.0, 0.0, 1.0, 0.0, 1.0, 0.0]), (2, 1))
    got = modular_forward(net, gates, x)
    want = materialized_modular_forward(net, gates, x)
    assert np.max(np.abs(got - want)) < 1e-10


def test_all_gates_one_equals_standard_lora_reference():
    net = build_net(seed=40, train_b=True)
    x = gaussian_matrix(8, 6, SeededRng(41))
    got = net.forward(x, np.ones((2, 6)))
    want = materialized_modular_forward(net, None, x)
    assert np.max(np.abs(got - want)) < 1e-10


def test_modular_gates_shape_check():
    net = build_net()
    with pytest.raises(DimensionError):
        net.forward(gaussian_matrix(8, 2, SeededRng(42)), np.ones((3, 6)))
    with pytest.raises(DimensionError):
        net.forward(gaussian_matrix(7, 2, SeededRng(43)), None)


def test_adapter_and_gate_gradients_match_finite_differences():
    net = build_net(seed=50, train_b=True)
    x = gaussian_matrix(8, 5, SeededRng(51))
    y = gaussian_matrix(5, 1, SeededRng(52))
    gates = np.full((2, 6), 1.0 / 6.0)
    loss, grads = net.loss_and_grads(x, y, gates=gates)

    ad = net.layers[1]["I"].adapter
    fd_a = central_difference(lambda: net.loss(x, y, gates=gates), ad.a)
    fd_b = central_difference(lambda: net.loss(x, y, gates=gates), ad.b)
    da, db = grads.by_site[(1, "I")]
    assert np.max(np.abs(da - fd_a) / np.maximum(np.abs(fd_a), 1e-8)) < 1e-4
    assert np.max(np.abs(db - fd_b) / np.maximum(np.abs(fd_b), 1e-8)) < 1e-4

    fd_gates = central_difference(lambda: net.loss(x, y, gates=gates), gates)
    assert np.max(np.abs(grads.gates - fd_gates) / np.maximum(np.abs(fd_gates), 1e-8)) < 1e-4


def test_shared_adapter_gradients_accumulate_over_sites():
    net = build_net(seed=60, with_adapters=False)
    shared = None
    wiring = {}
    from diffora.adapters import init_adapter

    shared = init_adapter(4, 4, 1, 2.0, SeededRng(61))
    shared.b = 0.2 * gaussian_matrix(4, 1, SeededRng(62))
    wiring[(0, "Q")] = shared
    wiring[(1, "Q")] = shared
    net = net.with_adapters(wiring, shared_ids={id(shared)})
    x = gaussian_matrix(8, 5, SeededRng(63))
    y = gaussian_matrix(5, 1, SeededRng(64))
    _, grads = net.loss_and_grads(x, y, gates=None)
    total = grads.by_adapter[id(shared)]
    site_sum_a = grads.by_site[(0, "Q")][0] + grads.by_site[(1, "Q")][0]
    site_sum_b = grads.by_site[(0, "Q")][1] + grads.by_site[(1, "Q")][1]
    assert np.allclose(total[1], site_sum_a, atol=1e-15)
    assert np.allclose(total[2], site_sum_b, atol=1e-15)
