import numpy as np
import pytest

from unest import ops
from unest.encoder import TransformerLayer
from unest.gradcheck import MODEL_STEP, grad_check, micro_model_case, primitive_cases
from unest.nn import Linear
from unest.tensor import Tensor, default_dtype

CASES = sorted(primitive_cases(np.random.default_rng(0)))


@pytest.fixture(autouse=True)
def float64():
    with default_dtype(np.float64):
        yield


@pytest.mark.parametrize("name", CASES)
def test_primitive(name):
    fn, inputs = primitive_cases(np.random.default_rng(0))[name]
    assert grad_check(fn, inputs, h=1e-5) < 1e-4


def test_linear_map_is_exact():
    rng = np.random.default_rng(1)
    layer = Linear(5, 3, rng)
    x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3)))
    assert grad_check(lambda x: (layer(x) * w).sum(), [x]) < 1e-8


def test_layer_norm_vector():
    rng = np.random.default_rng(2)
    x, g, b = (Tensor(rng.normal(size=16), requires_grad=True) for _ in range(3))
    w = Tensor(rng.normal(size=16))
    assert grad_check(lambda x, g, b: (ops.layer_norm(x, g, b) * w).sum(), [x, g, b]) < 1e-4


def test_transformer_layer():
    rng = np.random.default_rng(3)
    layer = TransformerLayer(16, 2, 4, rng)
    x = Tensor(rng.normal(size=(2, 8, 16))[:, None], requires_grad=True)
    w = Tensor(rng.normal(size=(2, 1, 8, 16)))
    params = [x] + layer.parameters()
    assert grad_check(lambda *_: (layer(x) * w).sum(), params, max_coords=20, rng=rng) < 1e-3


def test_micro_model():
    _, fn, params = micro_model_case(seed=0)
    assert grad_check(fn, params, h=MODEL_STEP, max_coords=4, rng=np.random.default_rng(0)) < 1e-3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_raises():
    x = Tensor(np.array([-1.0]), requires_grad=True)
    with pytest.raises(FloatingPointError):
        grad_check(lambda x: x.log().sum(), [x])
