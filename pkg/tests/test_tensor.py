import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from burnseg.errors import ContractError, EmptyTapeError, NumericError, ShapeError
from burnseg.tensor import (Rng, Tape, Tensor, add, backward, concat_channels, grad_check, mean, mul, ones,
                            randn, relu, shadow64, sigmoid, split_channels, sum as tsum, zeros)


def _leaf(values, dtype=None):
    return Tensor(np.asarray(values), requires_grad=True, dtype=dtype)


def test_constructors():
    assert zeros([2, 2]).data.tolist() == [[0, 0], [0, 0]]
    assert ones([3]).data.tolist() == [1, 1, 1]
    assert zeros([2]).dtype == np.float32


@pytest.mark.parametrize("shape", [[0], [2, -1], [1, 1, 1, 1, 1], []])
def test_bad_shapes_raise(shape):
    with pytest.raises(ShapeError):
        zeros(shape)


def test_randn_moments_frozen_seed():
    x = randn([10_000], Rng(7), 0.0, 1.0).data
    assert abs(x.mean()) < 0.05
    assert abs(x.std() - 1.0) < 0.05


def test_randn_same_seed_bit_identical():
    a = randn([64], Rng(3).split("init")).data
    b = randn([64], Rng(3).split("init")).data
    c = randn([64], Rng(3).split("dropout")).data
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_rng_state_round_trip():
    r = Rng(11)
    r.generator.random(5)
    state = r.get_state()
    first = r.generator.random(4)
    r.set_state(state)
    assert np.array_equal(r.generator.random(4), first)


def test_add_mul_values():
    assert add(Tensor([1, 2]), Tensor([3, 4])).data.tolist() == [4, 6]
    assert mul(Tensor([1, 2]), Tensor([0, 0])).data.tolist() == [0, 0]
    with pytest.raises(ShapeError):
        add(Tensor([1, 2]), Tensor([1, 2, 3]))


def test_mul_gradient_is_other_factor():
    a, b = _leaf([1.5, -2.0, 3.0]), _leaf([4.0, 5.0, -6.0])
    with Tape() as tape:
        loss = tsum(mul(a, b))
    backward(loss, tape)
    assert np.array_equal(a.grad, b.data)
    assert np.array_equal(b.grad, a.data)


def test_relu_and_sigmoid_values():
    assert relu(Tensor([-1, 0, 2])).data.tolist() == [0, 0, 2]
    assert sigmoid(Tensor([0.0])).item() == 0.5
    s = sigmoid(Tensor([-100.0, 100.0])).data
    assert np.isfinite(s).all() and s.min() >= 0 and s.max() <= 1


@given(arrays(np.float64, 16, elements=st.floats(-30, 30)))
def test_sigmoid_symmetry(x):
    with shadow64():
        pos = sigmoid(Tensor(x)).data
        neg = sigmoid(Tensor(-x)).data
    assert np.allclose(neg, 1 - pos, atol=1e-6)


def test_backward_polynomials():
    x = _leaf([1.0, 2.0, 3.0])
    with Tape() as tape:
        loss = tsum(x)
    backward(loss, tape)
    assert x.grad.tolist() == [1, 1, 1]

    x = _leaf([1.0, 2.0])
    with Tape() as tape:
        loss = tsum(mul(x, x))
    backward(loss, tape)
    assert x.grad.tolist() == [2, 4]


def test_fan_out_accumulates():
    x = _leaf(np.random.default_rng(0).standard_normal(5))
    with Tape() as tape:
        loss = add(tsum(x), tsum(x))
    backward(loss, tape)
    assert np.array_equal(x.grad, 2 * np.ones(5, np.float32))


def test_gradients_accumulate_across_calls():
    x = _leaf([1.0, 1.0])
    for _ in range(2):
        with Tape() as tape:
            loss = tsum(x)
        backward(loss, tape)
    assert x.grad.tolist() == [2, 2]
    x.zero_grad()
    assert x.grad is None


def test_backward_errors():
    x = _leaf([1.0, 2.0])
    with Tape() as tape:
        y = mul(x, x)
    with pytest.raises(ContractError):
        backward(y, tape)
    detached = tsum(x)  # built outside any tape
    with pytest.raises(EmptyTapeError):
        backward(detached, Tape())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_forward_raises():
    with pytest.raises(NumericError):
        mul(Tensor([1e30]), Tensor([1e30]))


def test_concat_and_split_round_trip():
    rng = np.random.default_rng(1)
    a = Tensor(rng.standard_normal((2, 3, 8, 8)))
    b = Tensor(rng.standard_normal((2, 1, 8, 8)))
    c = concat_channels([a, b])
    assert c.shape == (2, 4, 8, 8)
    pa, pb = split_channels(c, [3, 1])
    assert pa.data.tobytes() == a.data.tobytes()
    assert pb.data.tobytes() == b.data.tobytes()
    assert np.array_equal(concat_channels([a]).data, a.data)
    with pytest.raises(ShapeError):
        concat_channels([a, Tensor(np.zeros((2, 1, 4, 8)))])


def test_ops_do_not_mutate_inputs():
    rng = np.random.default_rng(2)
    a = _leaf(rng.standard_normal((2, 2, 4, 4)))
    b = _leaf(rng.standard_normal((2, 2, 4, 4)))
    before = (a.data.copy(), b.data.copy())
    with Tape() as tape:
        y = mean(sigmoid(add(relu(mul(a, b)), concat_channels(split_channels(a, [1, 1])))))
    backward(y, tape)
    assert np.array_equal(a.data, before[0]) and np.array_equal(b.data, before[1])


def test_grad_check_sum_exact():
    with shadow64():
        x = Tensor(np.random.default_rng(3).standard_normal(10))
        rep = grad_check(tsum, x)
    assert rep.valid and rep.max_rel_error < 1e-12


def _away_from_zero(n, seed):
    x = np.random.default_rng(seed).standard_normal(n)
    return np.where(np.abs(x) < 1e-2, 0.5, x)


@pytest.mark.parametrize("op", [
    lambda x: tsum(relu(x)),
    lambda x: tsum(sigmoid(x)),
    lambda x: tsum(mul(x, x)),
    lambda x: mean(add(x, mul(x, sigmoid(x)))),
    lambda x: tsum(mul(concat_channels(split_channels(x, [1, 2])), x)),
], ids=["relu", "sigmoid", "square", "mixed", "split_concat"])
def test_elementwise_ops_grad_check(op):
    with shadow64():
        x = Tensor(_away_from_zero(2 * 3 * 4 * 4, 4).reshape(2, 3, 4, 4))
        rep = grad_check(op, x)
    assert rep.passed(1e-5), rep


def test_grad_check_excludes_relu_kink():
    with shadow64():
        x = Tensor(np.array([-1.0, 5e-4, 2.0]))
        rep = grad_check(lambda t: tsum(relu(t)), x, exclude=np.abs(x.data) < 1e-3)
    assert rep.excluded == [1]
    assert rep.passed(1e-5)


def test_grad_check_flags_nondeterminism():
    gen = np.random.default_rng(0)

    def noisy(t):
        return tsum(mul(t, Tensor(gen.random(t.shape))))

    with shadow64():
        rep = grad_check(noisy, Tensor(np.ones(4)))
    assert not rep.valid


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12))
def test_square_gradient_property(vals):
    x = _leaf(vals, np.float64)
    with Tape() as tape:
        loss = tsum(mul(x, x))
    backward(loss, tape)
    assert np.allclose(x.grad, 2 * np.asarray(vals))
