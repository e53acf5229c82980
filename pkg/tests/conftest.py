import numpy as np
import pytest

from hemoscan.slice_encoder import EncoderConfig
from hemoscan.tensor_core import Tape, Tensor, backward, finite_difference_grad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def check_gradients(build_loss, arrays, h=1e-5, rtol=1e-4, atol=1e-7):
    """Compare taped gradients of build_loss(*tensors) against central differences"""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build_loss(*leaves)
    backward(tape, loss, params=leaves)

    for i, leaf in enumerate(leaves):
        def f(x, i=i):
            args = [Tensor(a) for a in arrays]
            args[i] = x
            return build_loss(*args)

        numeric = finite_difference_grad(f, arrays[i], h)
        np.testing.assert_allclose(leaf.grad, numeric.data, rtol=rtol, atol=atol)


@pytest.fixture
def gradcheck():
    return check_gradients


@pytest.fixture
def tiny_encoder_config():
    return EncoderConfig(stages=(4, 8), blocks=1, cardinality=2, group_width=2, embedding_dim=8, input_side=16)
