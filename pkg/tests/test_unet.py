import numpy as np
import pytest

from burnseg import unet as unet_mod
from burnseg.errors import ShapeError
from burnseg.layers import EVAL, TRAIN
from burnseg.tensor import Rng, Tape, Tensor, backward, grad_check, shadow64
from burnseg.training import bce_loss
from burnseg.unet import UNetConfig, build, forward, set_mode

# counted once with UNetModel.n_parameters() and cross-checked by _formula_count
PARAMS_DEPTH4_BASE16 = 2_161_921
PARAMS_DEPTH3_BASE8 = 135_105


def _formula_count(cin, depth, base, out=1):
    conv = lambda i, o: 9 * i * o + o  # noqa: E731
    bn = lambda o: 2 * o  # noqa: E731
    block = lambda i, o: conv(i, o) + bn(o) + conv(o, o) + bn(o)  # noqa: E731
    w = [base * 2 ** k for k in range(depth + 1)]
    total, prev = 0, cin
    for k in range(depth):
        total += block(prev, w[k])
        prev = w[k]
    total += block(w[depth - 1], w[depth])
    for k in reversed(range(depth)):
        total += conv(w[k + 1], w[k]) + block(2 * w[k], w[k])
    return total + conv(w[0], out)


@pytest.mark.parametrize("depth,base,expected", [(4, 16, PARAMS_DEPTH4_BASE16), (3, 8, PARAMS_DEPTH3_BASE8)])
def test_parameter_count(depth, base, expected):
    model = build(UNetConfig(depth=depth, base_width=base), Rng(0))
    assert model.n_parameters() == expected == _formula_count(4, depth, base)


def test_smallest_instance_parameter_order():
    names = list(build(UNetConfig(depth=1, base_width=1), Rng(0)).parameters())
    block = ["conv1.weight", "conv1.bias", "bn1.gamma", "bn1.beta", "conv2.weight", "conv2.bias", "bn2.gamma",
             "bn2.beta"]
    expected = ([f"enc0.{n}" for n in block] + [f"bottleneck.{n}" for n in block] + ["dec0.up.weight", "dec0.up.bias"]
                + [f"dec0.{n}" for n in block] + ["head.weight", "head.bias"])
    assert names == expected


def test_same_seed_same_parameters():
    a = build(UNetConfig(depth=2, base_width=4), Rng(5)).state_arrays()
    b = build(UNetConfig(depth=2, base_width=4), Rng(5)).state_arrays()
    c = build(UNetConfig(depth=2, base_width=4), Rng(6)).state_arrays()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a if k.endswith("weight"))


@pytest.mark.parametrize("hw", [16, 32, 64, 128])
def test_forward_shape_and_range(hw):
    model = build(UNetConfig(depth=4, base_width=2), Rng(0))
    x = Tensor(np.random.default_rng(hw).random((2, 4, hw, hw)))
    y = forward(model, x)
    assert y.shape == (2, 1, hw, hw)
    assert y.data.min() > 0 and y.data.max() < 1


def test_non_square_shape():
    model = build(UNetConfig(depth=2, base_width=2), Rng(0))
    assert forward(model, Tensor(np.zeros((1, 4, 8, 12)))).shape == (1, 1, 8, 12)


def test_indivisible_dims_name_multiple():
    model = build(UNetConfig(depth=4, base_width=2), Rng(0))
    with pytest.raises(ShapeError, match="multiples of 16"):
        forward(model, Tensor(np.zeros((1, 4, 24, 32))))
    with pytest.raises(ShapeError):
        forward(model, Tensor(np.zeros((1, 3, 32, 32))))


def test_zero_input_gives_half():
    model = build(UNetConfig(), Rng(0))
    y = forward(model, Tensor(np.zeros((2, 4, 64, 64))))
    assert y.shape == (2, 1, 64, 64)
    assert np.abs(y.data - 0.5).max() < 1e-3


def test_eval_forward_is_pure():
    model = build(UNetConfig(depth=2, base_width=4), Rng(1))
    set_mode(model, EVAL)
    x = Tensor(np.random.default_rng(0).random((2, 4, 16, 16)))
    before = {k: v.copy() for k, v in model.state_arrays().items()}
    assert forward(model, x).data.tobytes() == forward(model, x).data.tobytes()
    assert all(np.array_equal(before[k], v) for k, v in model.state_arrays().items())


def test_modes():
    model = build(UNetConfig(depth=2, base_width=4, dropout_p=0.5), Rng(1))
    x = Tensor(np.random.default_rng(0).random((2, 4, 16, 16)))
    params = {k: v.data.copy() for k, v in model.parameters().items()}

    set_mode(model, TRAIN)
    rm = model.buffers()["enc0.bn1.running_mean"].data.copy()
    a, b = forward(model, x).data, forward(model, x).data
    assert not np.array_equal(a, b)  # dropout draws differ
    assert not np.array_equal(rm, model.buffers()["enc0.bn1.running_mean"].data)

    set_mode(model, EVAL)
    assert np.array_equal(forward(model, x).data, forward(model, x).data)
    set_mode(model, TRAIN)
    set_mode(model, EVAL)
    assert all(np.array_equal(params[k], v.data) for k, v in model.parameters().items())


def test_skip_connections_pass_encoder_tensor(monkeypatch):
    model = build(UNetConfig(depth=3, base_width=2), Rng(2))
    seen = []
    real = unet_mod.concat_channels

    def spy(parts):
        seen.append(parts[1])
        return real(parts)

    monkeypatch.setattr(unet_mod, "concat_channels", spy)
    trace = {}
    forward(model, Tensor(np.random.default_rng(0).random((1, 4, 16, 16))), trace=trace)
    assert len(seen) == 3
    # decoders run deepest first
    for concat_part, k in zip(seen, (2, 1, 0)):
        assert concat_part is trace[f"enc{k}"]
        assert concat_part.shape[2] == 16 >> k


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_reaches_every_parameter(seed):
    model = build(UNetConfig(depth=2, base_width=4), Rng(seed))
    gen = np.random.default_rng(seed)
    x = Tensor(gen.random((2, 4, 16, 16)))
    y = (gen.random((2, 1, 16, 16)) > 0.7).astype(np.float32)
    with Tape() as tape:
        loss = bce_loss(forward(model, x), y)
    backward(loss, tape)
    for name, p in model.parameters().items():
        assert p.grad is not None and p.grad.shape == p.shape, name
        if name.endswith(".bias") and not name.startswith(("head", "dec0.up", "dec1.up")):
            # a conv bias directly in front of batchnorm cancels out exactly;
            # its gradient is round-off around zero
            continue
        assert np.abs(p.grad).max() > 0, name


def whole_model_grad_error(seed, step):
    """Worst per-element relative error over the input and every parameter
    of a depth-1, width-2 model on 8x8 inputs (64-bit, dropout off)."""
    with shadow64():
        model = build(UNetConfig(depth=1, base_width=2, dropout_p=0.0), Rng(seed)).astype(np.float64)
        gen = np.random.default_rng(seed)
        x = Tensor(gen.random((2, 4, 8, 8)))
        y = (gen.random((2, 1, 8, 8)) > 0.5).astype(np.float64)

        def loss(_):
            return bce_loss(forward(model, x), y)

        reports = [grad_check(loss, x, step=step)]
        reports += [grad_check(loss, p, step=step) for p in model.parameters().values()]
    assert all(r.valid for r in reports)
    return max(r.max_rel_error for r in reports)


@pytest.mark.parametrize("seed", range(8))
def test_whole_model_gradient_converges(seed):
    # at step 1e-3 the O(step^2) truncation alone can exceed 1e-4 on this
    # tiny, strongly curved network; a smaller step isolates the gradient
    assert whole_model_grad_error(seed, 1e-4) < 1e-4


def test_float32_grad_matches_loosely():
    model = build(UNetConfig(depth=2, base_width=4, dropout_p=0.0), Rng(4))
    gen = np.random.default_rng(4)
    x = Tensor(gen.random((2, 4, 16, 16)))
    y = (gen.random((2, 1, 16, 16)) > 0.5).astype(np.float32)
    weights = [n for n in model.parameters() if n.endswith("weight")]
    chosen = gen.choice(weights, 5, replace=False)
    for name in chosen:
        p = model.parameters()[name]
        idx = [int(gen.integers(p.data.size))]
        rep = grad_check(lambda _: bce_loss(forward(model, x), y), p, step=1e-3, indices=idx, atol=1e-3)
        assert rep.passed(1e-2), (name, rep)
