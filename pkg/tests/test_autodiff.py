import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from thermognn.autodiff import (DTYPE, AdamState, ContractError, DimensionError, Mlp, MlpSpec, Standardizer,
                                TrainingError, adam_step, grad_input, load_arrays, lr_at, save_arrays, swish,
                                swish_second)


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_mlp_shape():
    mlp = Mlp(MlpSpec((3, 10, 10, 1)), torch.Generator().manual_seed(0))
    assert mlp(torch.zeros(4, 3, dtype=DTYPE)).shape == (4, 1)


def test_zero_weights_give_zero_output():
    mlp = Mlp(MlpSpec((3, 5, 2)))
    with torch.no_grad():
        for p in mlp.parameters():
            p.zero_()
    assert torch.equal(mlp(torch.randn(4, 3, dtype=DTYPE)), torch.zeros(4, 2, dtype=DTYPE))


def test_single_identity_layer_passes_input_through():
    mlp = Mlp(MlpSpec((3, 3)))
    with torch.no_grad():
        mlp.layers[0].weight.copy_(torch.eye(3, dtype=DTYPE))
    x = torch.tensor([[1.5, -2.0, 0.25]], dtype=DTYPE)
    assert torch.equal(mlp(x), x)


def loop_forward(mlp, x):
    """Plain-python forward pass of a swish MLP."""
    h = [float(v) for v in x]
    for k, layer in enumerate(mlp.layers):
        W, b = layer.weight.detach().tolist(), layer.bias.detach().tolist()
        h = [sum(W[i][j] * h[j] for j in range(len(h))) + b[i] for i in range(len(b))]
        if k < len(mlp.layers) - 1:
            h = [v / (1.0 + math.exp(-v)) for v in h]
    return h


def test_forward_matches_loop_oracle():
    mlp = Mlp(MlpSpec((3, 16, 1)), torch.Generator().manual_seed(1))
    x = np.random.default_rng(1).normal(size=3)
    out = mlp(torch.tensor(x, dtype=DTYPE)).tolist()
    assert out == pytest.approx(loop_forward(mlp, x), abs=1e-12)


def test_mlp_rejects_wrong_width():
    mlp = Mlp(MlpSpec((3, 5, 1)))
    with pytest.raises(DimensionError):
        mlp(torch.zeros(2, 4, dtype=DTYPE))


@pytest.mark.parametrize("act", ["relu", "ReLU", "leaky_relu"])
def test_relu_family_rejected(act):
    with pytest.raises(ValueError):
        MlpSpec((2, 4, 1), act)


def test_swish_values():
    assert swish(0.0) == 0.0
    assert swish(50.0) == pytest.approx(50.0, abs=1e-9)
    assert swish(1.0) == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-15)
    assert swish_second(0.0) == pytest.approx(0.5, abs=1e-15)


def test_swish_derivatives_at_zero_by_finite_differences():
    h = 1e-4
    first = (swish(h) - swish(-h)) / (2 * h)
    second = (swish(h) - 2 * swish(0.0) + swish(-h)) / h ** 2
    assert first == pytest.approx(0.5, abs=1e-6)
    # x*sigmoid(x) has f''(0) = 2 * sigmoid'(0) = 0.5, not 0.25
    assert second == pytest.approx(0.5, abs=1e-6)
    assert second != 0


def test_swish_second_derivative_by_autograd():
    x = torch.zeros(1, dtype=DTYPE, requires_grad=True)
    (g,) = torch.autograd.grad(swish(x).sum(), x, create_graph=True)
    (h,) = torch.autograd.grad(g.sum(), x)
    assert float(h) == pytest.approx(0.5, abs=1e-12)


def test_input_gradient_matches_finite_differences_on_100_mlps():
    rng = np.random.default_rng(0)
    for k in range(100):
        w_in = int(rng.integers(1, 5))
        widths = (w_in,) + tuple(int(w) for w in rng.integers(2, 8, size=int(rng.integers(1, 3)))) + (1,)
        mlp = Mlp(MlpSpec(widths), torch.Generator().manual_seed(k))
        x = rng.normal(size=w_in)
        g = grad_input(lambda t: mlp(t).sum(), torch.tensor(x, dtype=DTYPE), create_graph=False).numpy()
        with torch.no_grad():
            fd = central_diff(lambda v: float(mlp(torch.tensor(v, dtype=DTYPE)).sum()), x)
        assert np.allclose(g, fd, rtol=1e-6, atol=1e-8), (k, g, fd)


def test_nested_parameter_gradient_matches_finite_differences():
    """d/dtheta of ||dF/dx||^2, the pattern behind the degeneracy loss."""
    mlp = Mlp(MlpSpec((3, 6, 6, 1)), torch.Generator().manual_seed(7))
    x = torch.tensor([0.3, -0.2, 0.5], dtype=DTYPE)

    def loss():
        g = grad_input(lambda t: mlp(t).sum(), x.clone(), create_graph=True)
        return (g ** 2).sum()

    params = list(mlp.parameters())
    analytic = [torch.zeros_like(p) if a is None else a
                for p, a in zip(params, torch.autograd.grad(loss(), params, allow_unused=True))]
    h = 1e-6
    for p, a in zip(params, analytic):
        flat = p.data.view(-1)
        for i in range(0, flat.numel(), 3):
            old = float(flat[i])
            flat[i] = old + h
            lp = float(loss().detach())
            flat[i] = old - h
            lm = float(loss().detach())
            flat[i] = old
            fd = (lp - lm) / (2 * h)
            assert abs(fd - float(a.view(-1)[i])) <= 1e-6 + 1e-5 * abs(fd)


def test_grad_of_half_square_norm_is_identity():
    x = torch.tensor([1.0, -3.0, 0.5], dtype=DTYPE)
    assert torch.allclose(grad_input(lambda t: 0.5 * (t * t).sum(), x), x, atol=0, rtol=0)


def test_grad_input_requires_scalar():
    with pytest.raises(ContractError):
        grad_input(lambda t: t * 2, torch.ones(3, dtype=DTYPE))


def test_grad_input_without_dependence_is_zero():
    g = grad_input(lambda t: torch.tensor(1.0, dtype=DTYPE), torch.ones(3, dtype=DTYPE))
    assert torch.equal(g, torch.zeros(3, dtype=DTYPE))


def test_adam_first_step_moves_by_lr():
    p = torch.tensor([1.0, -2.0], dtype=DTYPE)
    st_ = AdamState.for_params([p])
    adam_step([p], [torch.tensor([3.0, -0.5], dtype=DTYPE)], st_, lr=0.1)
    assert np.allclose(p.numpy(), [0.9, -1.9], atol=1e-7)


def test_adam_zero_gradient_leaves_params():
    p = torch.tensor([1.0, 2.0], dtype=DTYPE)
    s = AdamState.for_params([p])
    adam_step([p], [torch.zeros(2, dtype=DTYPE)], s, 0.1)
    assert torch.equal(p, torch.tensor([1.0, 2.0], dtype=DTYPE))


def test_adam_scalar_unit_gradient_step():
    p = torch.tensor([0.0], dtype=DTYPE)
    s = AdamState.for_params([p])
    adam_step([p], [torch.ones(1, dtype=DTYPE)], s, 0.1)
    assert float(p) == pytest.approx(-0.1, abs=1e-8)
    assert s.step == 1


def test_adam_identical_params_stay_identical():
    a, b = torch.ones(3, dtype=DTYPE), torch.ones(3, dtype=DTYPE)
    s = AdamState.for_params([a, b])
    for k in range(5):
        g = torch.full((3,), float(k) - 2.0, dtype=DTYPE)
        adam_step([a, b], [g, g.clone()], s, 0.05)
    assert torch.equal(a, b)


def test_adam_is_deterministic():
    def run():
        p = torch.tensor([0.5, 0.5], dtype=DTYPE)
        s = AdamState.for_params([p])
        for k in range(20):
            adam_step([p], [torch.tensor([math.sin(k), math.cos(k)], dtype=DTYPE)], s, 0.01)
        return p.numpy().copy()

    assert np.array_equal(run(), run())


def test_adam_rejects_nan_gradient():
    p = [torch.zeros(2, dtype=DTYPE), torch.zeros(3, dtype=DTYPE)]
    s = AdamState.for_params(p)
    with pytest.raises(TrainingError) as err:
        adam_step(p, [torch.zeros(2, dtype=DTYPE), torch.tensor([0.0, float("nan"), 0.0], dtype=DTYPE)], s, 0.1)
    assert err.value.param_index == 1


def test_lr_schedule():
    assert lr_at(0, 1e-3, [2000, 4000]) == 1e-3
    assert lr_at(1999, 1e-3, [2000, 4000]) == 1e-3
    assert lr_at(2000, 1e-3, [2000, 4000]) == pytest.approx(1e-4)
    assert lr_at(5999, 1e-3, [2000, 4000]) == pytest.approx(1e-5)


def test_lr_without_milestones():
    assert all(lr_at(e, 3e-4, []) == 3e-4 for e in (0, 10, 10_000))


@given(st.integers(0, 10_000))
def test_lr_nonincreasing(epoch):
    assert lr_at(epoch + 1, 1e-3, [100, 500, 2000]) <= lr_at(epoch, 1e-3, [100, 500, 2000])


@given(st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=30))
def test_standardizer_round_trip(values):
    data = np.asarray(values).reshape(-1, 2) if len(values) % 2 == 0 else np.asarray(values[:-1]).reshape(-1, 2)
    s = Standardizer.fit(data)
    assert np.allclose(s.invert(s.apply(data)), data, atol=1e-12 * max(1.0, np.abs(data).max()), rtol=0)


def test_standardizer_constant_channel_is_floored(caplog):
    s = Standardizer.fit(np.full((5, 2), 5.0))
    assert np.all(s.std == 1e-8)
    assert np.array_equal(s.apply(np.full((5, 2), 5.0)), np.zeros((5, 2)))
    assert "constant" in caplog.text


def test_standardizer_on_unit_normal_data():
    s = Standardizer.fit(np.random.default_rng(0).standard_normal((20000, 3)))
    assert np.allclose(s.mean, 0, atol=0.03) and np.allclose(s.std, 1, atol=0.03)


def test_param_file_round_trip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([math.pi])}
    save_arrays(tmp_path / "p", arrays, {"note": "x"})
    back, meta = load_arrays(tmp_path / "p")
    assert meta == {"note": "x"}
    for k in arrays:
        assert np.array_equal(back[k], arrays[k])


def test_param_file_truncation_detected(tmp_path):
    save_arrays(tmp_path / "p", {"a": np.ones(10)})
    blob = tmp_path / "p" / "params.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_arrays(tmp_path / "p")
