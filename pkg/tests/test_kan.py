import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import BSpline

from kan_ets.kan import (
    MEXICAN_HAT_NORM,
    CheckpointError,
    KanNetwork,
    SplineGrid,
    SplineLayer,
    WaveletLayer,
    bspline_basis,
    bspline_basis_with_derivative,
    init_network,
    load_network,
    mexican_hat,
    network_forward,
    network_gradients,
    network_to_dict,
    parse_architecture,
    save_network,
    silu,
)

GRID = SplineGrid()


def naive_basis(x, knots, m, k):
    """Textbook recursive Cox-de Boor on scalars, half-open intervals."""
    if k == 0:
        return 1.0 if knots[m] <= x < knots[m + 1] else 0.0
    left = right = 0.0
    if knots[m + k] != knots[m]:
        left = (x - knots[m]) / (knots[m + k] - knots[m]) * naive_basis(x, knots, m, k - 1)
    if knots[m + k + 1] != knots[m + 1]:
        right = (knots[m + k + 1] - x) / (knots[m + k + 1] - knots[m + 1]) * naive_basis(x, knots, m + 1, k - 1)
    return left + right


def test_grid_properties():
    assert GRID.n_basis == 8
    assert len(GRID.knots) == 5 + 2 * 3 + 1
    assert np.all(np.diff(GRID.knots) > 0)
    assert np.allclose(np.diff(GRID.knots), 0.4)
    assert SplineGrid.from_dict(GRID.to_dict()) == GRID


def test_degree_zero_is_interval_indicator():
    g = SplineGrid(5, 0)
    b = bspline_basis(np.array([-0.9, -0.1, 0.5]), g)
    assert np.array_equal(b, np.eye(5)[[0, 2, 3]])


def test_basis_values_at_zero_against_naive_oracle():
    got = bspline_basis(np.array([0.0]), GRID)[0]
    want = [naive_basis(0.0, GRID.knots, m, 3) for m in range(GRID.n_basis)]
    assert np.allclose(got, want, atol=1e-15)
    # Uniform cubic B-spline at a cell midpoint: (1/48, 23/48, 23/48, 1/48).
    assert np.allclose(sorted(got[got > 0]), sorted([1 / 48, 23 / 48, 23 / 48, 1 / 48]))


@settings(max_examples=100, deadline=None)
@given(st.floats(-1.8, 1.8))
def test_basis_matches_naive_and_scipy(x):
    got = bspline_basis(np.array([x]), GRID)[0]
    naive = [naive_basis(x, GRID.knots, m, 3) for m in range(GRID.n_basis)]
    ref = [float(np.nan_to_num(BSpline.basis_element(GRID.knots[m:m + 5], extrapolate=False)(x))) for m in range(8)]
    assert np.allclose(got, naive, atol=1e-12)
    assert np.allclose(got, ref, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_partition_of_unity(seed):
    x = np.random.default_rng(seed).uniform(-1, 1, size=1000)
    x = x[(x > -1) & (x < 1)]
    s = bspline_basis(x, GRID).sum(axis=-1)
    assert np.all(np.abs(s - 1) <= 1e-10)


def test_local_support_and_outside_zero():
    x = np.linspace(-3, 3, 2001)
    b = bspline_basis(x, GRID)
    knots = GRID.knots
    for m in range(GRID.n_basis):
        outside = (x < knots[m]) | (x > knots[m + 4])
        assert np.all(b[outside, m] == 0)
    assert np.all(bspline_basis(np.array([-2.5, 2.5]), GRID) == 0)


def test_continuity_across_knots():
    for t in GRID.knots:
        lo, hi = bspline_basis(np.array([t - 1e-9, t + 1e-9]), GRID)
        assert np.max(np.abs(lo - hi)) <= 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_basis_derivative_matches_finite_difference(seed):
    x = np.random.default_rng(seed).uniform(-1.5, 1.5, size=50)
    _, d = bspline_basis_with_derivative(x, GRID)
    eps = 1e-6
    fd = (bspline_basis(x + eps, GRID) - bspline_basis(x - eps, GRID)) / (2 * eps)
    assert np.allclose(d, fd, atol=1e-6)


def test_silu_and_wavelet_values():
    assert silu(np.array(0.0)) == 0
    assert silu(np.array(1.0)) == pytest.approx(1 / (1 + math.exp(-1)))
    assert MEXICAN_HAT_NORM == pytest.approx(2 / (math.sqrt(3) * math.pi**0.25))
    assert mexican_hat(np.array(0.0)) == pytest.approx(0.8673, abs=1e-4)
    assert np.allclose(mexican_hat(np.array([-1.0, 1.0])), 0, atol=1e-16)


def test_spline_layer_zero_parameters_give_zero():
    layer = SplineLayer(np.zeros((3, 4)), np.zeros((3, 4, 8)))
    y, _ = layer.forward(np.random.default_rng(0).uniform(0, 1, (5, 4)))
    assert np.all(y == 0)
    layer = SplineLayer(np.ones((2, 3)), np.zeros((2, 3, 8)))
    y, _ = layer.forward(np.zeros((1, 3)))
    assert np.all(y == 0)


def test_one_to_one_spline_layer_hand_sum():
    coeffs = np.arange(8, dtype=float).reshape(1, 1, 8) / 10
    layer = SplineLayer(np.array([[0.7]]), coeffs)
    x = 0.3
    basis = [naive_basis(x, GRID.knots, m, 3) for m in range(8)]
    expected = 0.7 * x / (1 + math.exp(-x)) + sum(c * b for c, b in zip(coeffs.ravel(), basis))
    assert layer.forward(np.array([[x]]))[0][0, 0] == pytest.approx(expected, abs=1e-14)


def test_wavelet_layer_formula_and_shift_identity():
    rng = np.random.default_rng(1)
    w, t, s = rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), rng.normal(size=(2, 3)) * 0.3
    layer = WaveletLayer(w, t, s)
    x = rng.normal(size=(4, 3))
    y, _ = layer.forward(x)
    psi = lambda u: MEXICAN_HAT_NORM * (1 - u * u) * np.exp(-u * u / 2)
    expected = np.array([[sum(w[i, j] * psi((xb[j] - t[i, j]) / math.exp(s[i, j])) for j in range(3)) for i in range(2)]
                         for xb in x])
    assert np.allclose(y, expected, atol=1e-14)
    shifted = WaveletLayer(w, t + 0.37, s)
    assert np.allclose(shifted.forward(x + 0.37)[0], y, atol=1e-13)


def test_two_by_two_network_manual_composition():
    rng = np.random.default_rng(2)
    l1 = SplineLayer(rng.normal(size=(2, 2)), rng.normal(size=(2, 2, 8)))
    l2 = SplineLayer(rng.normal(size=(2, 2)), rng.normal(size=(2, 2, 8)))
    net = KanNetwork([l1, l2])
    x = np.array([0.2, -0.4])

    def layer_eval(layer, v):
        out = np.zeros(layer.out_dim)
        for i in range(layer.out_dim):
            for j in range(layer.in_dim):
                b = [naive_basis(v[j], GRID.knots, m, 3) for m in range(8)]
                out[i] += layer.base_weights[i, j] * v[j] / (1 + math.exp(-v[j])) + np.dot(layer.spline_coeffs[i, j], b)
        return out

    assert np.allclose(network_forward(x, net), layer_eval(l2, layer_eval(l1, x)), atol=1e-13)


def test_dimension_mismatch():
    net = init_network([3, 2, 3])
    with pytest.raises(ValueError):
        network_forward(np.zeros(4), net)
    with pytest.raises(ValueError):
        KanNetwork([SplineLayer(np.zeros((2, 3)), np.zeros((2, 3, 8))), SplineLayer(np.zeros((2, 3)), np.zeros((2, 3, 8)))])


def test_init_determinism_and_scale():
    a, b, c = init_network([10, 5, 10], seed=4), init_network([10, 5, 10], seed=4), init_network([10, 5, 10], seed=5)
    assert all(np.array_equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert not all(np.array_equal(p, q) for p, q in zip(a.parameters(), c.parameters()))
    l0 = a.layers[0]
    assert np.all(np.abs(l0.base_weights) <= math.sqrt(6 / 10))
    for kind in ("spline", "wavelet"):
        net = init_network([500, 100, 500], kind=kind, seed=0)
        x = np.random.default_rng(0).uniform(0, 1, (8, 500))
        y = net(x)
        assert y.shape == (8, 500) and np.all(np.isfinite(y)) and np.max(np.abs(y)) < 10
    w = init_network([4, 3], kind="wavelet", seed=0).layers[0]
    assert np.all(w.log_scales == 0) and np.all(np.abs(w.translations) <= 1)


def test_output_layer_scale_only_touches_last_layer():
    a = init_network([6, 4, 6], seed=3)
    b = init_network([6, 4, 6], seed=3, output_layer_scale=0.1)
    assert np.array_equal(a.layers[0].base_weights, b.layers[0].base_weights)
    assert np.allclose(b.layers[1].spline_coeffs, 0.1 * a.layers[1].spline_coeffs)
    assert np.allclose(b.layers[1].base_weights, 0.1 * a.layers[1].base_weights)


def test_forward_determinism():
    net = init_network([20, 7, 20], seed=1)
    x = np.random.default_rng(0).uniform(0, 1, (3, 20))
    assert np.array_equal(net(x), net(x))


def fd_check(net, x, g, eps=1e-5):
    grads, dx = network_gradients(net, x, g)
    worst = 0.0
    for p, gp in zip(net.parameters(), grads):
        fd = np.empty_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = np.sum(g * net(x))
            p[idx] = old - eps
            down = np.sum(g * net(x))
            p[idx] = old
            fd[idx] = (up - down) / (2 * eps)
        worst = max(worst, np.max(np.abs(gp - fd)) / max(np.max(np.abs(fd)), 1e-8))
    fdx = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        fdx[idx] = (np.sum(g * net(xp)) - np.sum(g * net(xm))) / (2 * eps)
    worst = max(worst, np.max(np.abs(dx - fdx)) / max(np.max(np.abs(fdx)), 1e-8))
    return worst


@pytest.mark.parametrize("kind", ["spline", "wavelet"])
@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(kind, seed):
    net = init_network([10, 5, 10], kind=kind, seed=seed)
    rng = np.random.default_rng(100 + seed)
    x = rng.uniform(0, 1, (3, 10))
    g = rng.normal(size=(3, 10))
    assert fd_check(net, x, g) <= 1e-4


def test_zero_upstream_gives_zero_gradients():
    net = init_network([6, 3, 6], seed=0)
    grads, dx = network_gradients(net, np.full(6, 0.5), np.zeros(6))
    assert all(np.all(g == 0) for g in grads) and np.all(dx == 0)


def test_gradients_against_torch_autograd():
    torch = pytest.importorskip("torch")
    net = init_network([5, 4, 3], kind="wavelet", seed=7)
    rng = np.random.default_rng(0)
    x, g = rng.uniform(0, 1, (2, 5)), rng.normal(size=(2, 3))
    grads, _ = network_gradients(net, x, g)
    h = torch.tensor(x, requires_grad=False)
    params = []
    for layer in net.layers:
        w, t, s = (torch.tensor(v, requires_grad=True) for v in (layer.weights, layer.translations, layer.log_scales))
        params += [w, t, s]
        u = (h[:, None, :] - t) / torch.exp(s)
        h = torch.einsum("oi,boi->bo", w, MEXICAN_HAT_NORM * (1 - u**2) * torch.exp(-u**2 / 2))
    (h * torch.tensor(g)).sum().backward()
    for ours, p in zip(grads, params):
        assert np.allclose(ours, p.grad.numpy(), atol=1e-12)


def test_parse_architecture():
    assert parse_architecture("[500,100,500]") == (500, 100, 500)
    assert parse_architecture("[500, 3, 1]") == (500, 3, 1)
    assert parse_architecture([4, 2]) == (4, 2)
    with pytest.raises(ValueError, match="'x'"):
        parse_architecture("[500,x,500]")
    with pytest.raises(ValueError, match="'0'"):
        parse_architecture("[5,0,5]")
    with pytest.raises(ValueError):
        parse_architecture("[5]")


@pytest.mark.parametrize("kind", ["spline", "wavelet"])
def test_checkpoint_round_trip(tmp_path, kind):
    net = init_network([6, 4, 6], kind=kind, seed=1)
    save_network(net, tmp_path / "m.json")
    back = load_network(tmp_path / "m.json")
    assert back.architecture == net.architecture and back.kind == kind
    assert all(np.array_equal(p, q) for p, q in zip(net.parameters(), back.parameters()))


def test_checkpoint_errors(tmp_path):
    doc = network_to_dict(init_network([3, 2], seed=0))
    bad = json.loads(json.dumps(doc))
    bad["layers"][0]["base_weights"]["data"].pop()
    (tmp_path / "a.json").write_text(json.dumps(bad))
    with pytest.raises(CheckpointError):
        load_network(tmp_path / "a.json")
    bad = json.loads(json.dumps(doc))
    bad["format_version"] = 2
    (tmp_path / "b.json").write_text(json.dumps(bad))
    with pytest.raises(CheckpointError):
        load_network(tmp_path / "b.json")
    bad = json.loads(json.dumps(doc))
    bad["architecture"] = [3, 5]
    (tmp_path / "c.json").write_text(json.dumps(bad))
    with pytest.raises(CheckpointError):
        load_network(tmp_path / "c.json")
