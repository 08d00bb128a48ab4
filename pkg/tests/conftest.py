import numpy as np
import pytest

from deltalearn import LayerSpec, Tensor, build_model, make_synthetic_transfer_pair


def tiny_layers(k=3, tap_all=False):
    """2-conv model on 3x8x8 inputs, both convs tapped when asked."""
    return [
        LayerSpec("conv", out_channels=4, kernel=3, pad=1, tap=tap_all),
        LayerSpec("relu"),
        LayerSpec("maxpool"),
        LayerSpec("conv", out_channels=6, kernel=3, pad=1, tap=True),
        LayerSpec("relu"),
        LayerSpec("gap"),
        LayerSpec("linear", out_features=k),
    ]


@pytest.fixture
def tiny_model():
    return build_model(tiny_layers(), (3, 8, 8), seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_transfer_pair():
    src_train, tgt_train = make_synthetic_transfer_pair(5, k_src=3, k_tgt=3,
                                                        n_per_class=10, size=16)
    src_test, tgt_test = make_synthetic_transfer_pair(5, k_src=3, k_tgt=3,
                                                      n_per_class=5, size=16,
                                                      split="test")
    return {"src_train": src_train, "tgt_train": tgt_train,
            "src_test": src_test, "tgt_test": tgt_test}


def params_equal(a, b):
    return set(a.params) == set(b.params) and all(
        np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)


def tensor_of(rng, *shape, scale=1.0, requires_grad=False):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad)
