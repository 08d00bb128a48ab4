import numpy as np
import pytest

from deltalearn import (LayerSpec, Tensor, build_model, forward, forward_with_taps,
                        grad_check_params, load_checkpoint, replace_head,
                        save_checkpoint)
from deltalearn.errors import ConfigError, FormatError
from deltalearn.models import (deserialize_model, desk32_layers, resolve_model_spec,
                               serialize_model, source_feature_maps)

from conftest import params_equal, tiny_layers


class TestBuild:
    def test_same_seed_is_bitwise_identical(self):
        a = build_model(tiny_layers(), (3, 8, 8), seed=3)
        b = build_model(tiny_layers(), (3, 8, 8), seed=3)
        assert params_equal(a, b)

    def test_different_seed_differs(self):
        a = build_model(tiny_layers(), (3, 8, 8), seed=3)
        b = build_model(tiny_layers(), (3, 8, 8), seed=4)
        assert not params_equal(a, b)

    def test_forward_shape_chain(self, rng):
        layers = [LayerSpec("conv", out_channels=8, kernel=3), LayerSpec("relu"),
                  LayerSpec("maxpool"), LayerSpec("linear", out_features=5)]
        model = build_model(layers, (3, 16, 16), seed=0)
        logits = forward(model, rng.standard_normal((4, 3, 16, 16)))
        assert logits.shape == (4, 5)

    def test_fan_in_variance(self):
        layers = [LayerSpec("conv", out_channels=34, kernel=5), LayerSpec("relu"),
                  LayerSpec("gap"), LayerSpec("linear", out_features=3)]
        model = build_model(layers, (12, 8, 8), seed=9)
        w = model.params["conv0.weight"].data
        assert w.size >= 10_000
        fan_in = 12 * 5 * 5
        assert abs(w.var() - 2.0 / fan_in) < 0.2 * (2.0 / fan_in)

    def test_illegal_chains_rejected(self):
        with pytest.raises(ConfigError):
            build_model([LayerSpec("conv", out_channels=2, kernel=3)], (3, 8, 8), 0)
        with pytest.raises(ConfigError):  # pool on odd extent
            build_model([LayerSpec("maxpool"), LayerSpec("linear", out_features=2)],
                        (3, 7, 7), 0)
        with pytest.raises(ConfigError):  # tap without relu after
            build_model([LayerSpec("conv", out_channels=2, kernel=3, tap=True),
                         LayerSpec("maxpool"), LayerSpec("linear", out_features=2)],
                        (3, 8, 8), 0)
        with pytest.raises(ConfigError):  # non-integer conv output extent
            build_model([LayerSpec("conv", out_channels=2, kernel=2, stride=2),
                         LayerSpec("relu"), LayerSpec("linear", out_features=2)],
                        (3, 7, 7), 0)


class TestReplaceHead:
    def test_head_swap_preserves_shared_bitwise(self):
        src = build_model(tiny_layers(k=4), (3, 8, 8), seed=1)
        tgt = replace_head(src, 3, seed=2)
        assert tgt.num_classes == 3
        for name in tgt.shared_names():
            assert np.array_equal(tgt.params[name].data, src.params[name].data)

    def test_head_names_are_params_minus_snapshot(self):
        src = build_model(tiny_layers(k=4), (3, 8, 8), seed=1)
        tgt = replace_head(src, 3, seed=2)
        assert set(tgt.head_names) == set(tgt.params) - set(tgt.source_params)

    def test_spar_start_equals_snapshot(self):
        src = build_model(tiny_layers(k=4), (3, 8, 8), seed=1)
        tgt = replace_head(src, 3, seed=2)
        for name, ref in tgt.source_params.items():
            assert np.array_equal(tgt.params[name].data, ref)

    def test_forward_after_replacement_is_finite(self, rng):
        src = build_model(tiny_layers(k=4), (3, 8, 8), seed=1)
        tgt = replace_head(src, 3, seed=2)
        logits = forward(tgt, rng.standard_normal((2, 3, 8, 8)))
        assert logits.shape == (2, 3)
        assert np.all(np.isfinite(logits.data))

    def test_too_few_classes_rejected(self):
        src = build_model(tiny_layers(k=4), (3, 8, 8), seed=1)
        with pytest.raises(ConfigError):
            replace_head(src, 1, seed=0)


class TestTaps:
    def test_tap_geometry(self, rng):
        layers = [LayerSpec("conv", out_channels=8, kernel=3, pad=1, tap=True),
                  LayerSpec("relu"), LayerSpec("gap"),
                  LayerSpec("linear", out_features=2)]
        model = build_model(layers, (3, 5, 5), seed=0)
        _, fms = forward_with_taps(model, rng.standard_normal((2, 3, 5, 5)))
        assert fms.vectors(0).shape == (2, 8, 25)

    def test_zero_input_zero_bias_gives_zero_maps(self, tiny_model):
        _, fms = forward_with_taps(tiny_model, np.zeros((2, 3, 8, 8)))
        assert np.array_equal(fms.vectors(3).data, np.zeros((2, 6, 16)))

    def test_fm_is_row_major_flatten_of_activation(self, tiny_model, rng):
        x = rng.standard_normal((2, 3, 8, 8))
        logits, fms = forward_with_taps(tiny_model, x)
        # recompute the tapped activation by hand: conv0/relu/pool/conv3/relu
        from deltalearn import tensor as T
        from deltalearn.tensor import ConvKernel
        h = Tensor(x)
        h = T.conv2d(h, ConvKernel(tiny_model.params["conv0.weight"],
                                   tiny_model.params["conv0.bias"], 1, 1))
        h = T.relu(h)
        h = T.maxpool2x2(h)
        h = T.conv2d(h, ConvKernel(tiny_model.params["conv3.weight"],
                                   tiny_model.params["conv3.bias"], 1, 1))
        h = T.relu(h)
        assert np.array_equal(fms.vectors(3).data, h.data.reshape(2, 6, 16))
        assert fms.vector(3, 2, sample=1).tolist() == h.data[1, 2].reshape(-1).tolist()

    def test_taps_do_not_change_logits(self, tiny_model, rng):
        x = rng.standard_normal((3, 3, 8, 8))
        plain = forward(tiny_model, x)
        tapped, _ = forward_with_taps(tiny_model, x)
        assert plain.data.tobytes() == tapped.data.tobytes()

    def test_gradients_flow_through_feature_maps(self, tiny_model):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 8, 8))

        def objective():
            _, fms = forward_with_taps(tiny_model, x)
            fm = fms.vectors(3)
            return (fm * fm).sum()

        err = grad_check_params(objective, tiny_model.params, eps=1e-5)
        assert err < 1e-4

    def test_source_maps_need_snapshot(self, tiny_model, rng):
        from deltalearn.errors import ContractError
        with pytest.raises(ContractError):
            source_feature_maps(tiny_model, rng.standard_normal((1, 3, 8, 8)))


class TestCheckpoint:
    def test_roundtrip_is_bit_exact(self, tmp_path):
        src = build_model(tiny_layers(k=4), (3, 8, 8), seed=1)
        tgt = replace_head(src, 3, seed=2)
        path = tmp_path / "model.dlta"
        save_checkpoint(tgt, path)
        back = load_checkpoint(path)
        assert params_equal(tgt, back)
        assert back.head_names == tgt.head_names
        assert back.layers == tgt.layers
        assert serialize_model(back) == serialize_model(tgt)

    def test_digest_tracks_parameters(self):
        a = build_model(tiny_layers(), (3, 8, 8), seed=1)
        b = build_model(tiny_layers(), (3, 8, 8), seed=1)
        assert a.digest() == b.digest()
        b.params["conv0.bias"].data[0] = 1.0
        assert a.digest() != b.digest()

    def test_bad_magic_reports_offset_zero(self):
        with pytest.raises(FormatError) as err:
            deserialize_model(b"NOPE" + b"\x00" * 32)
        assert err.value.offset == 0

    def test_truncation_detected(self):
        src = build_model(tiny_layers(), (3, 8, 8), seed=1)
        raw = serialize_model(src)
        with pytest.raises(FormatError):
            deserialize_model(raw[:-7])


def test_desk32_taps_every_conv_but_first():
    layers = desk32_layers(5)
    convs = [(i, s) for i, s in enumerate(layers) if s.kind == "conv"]
    assert [s.tap for _, s in convs] == [False, True, True]
    assert layers[-1].out_features == 5


def test_resolve_model_spec(tmp_path):
    layers, shape = resolve_model_spec("desk32", 7)
    assert shape == (3, 32, 32) and layers[-1].out_features == 7
    import json
    doc = {"input_shape": [1, 8, 8],
           "layers": [{"kind": "conv", "out_channels": 2, "kernel": 3, "pad": 1},
                      {"kind": "relu"}, {"kind": "gap"},
                      {"kind": "linear", "out_features": 2}]}
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(doc))
    layers, shape = resolve_model_spec(str(p), 2)
    assert shape == (1, 8, 8) and len(layers) == 4
