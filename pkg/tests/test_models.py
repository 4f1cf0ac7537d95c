import json

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from fundusnet.errors import ConfigError, ShapeError
from fundusnet.models import (FreezePolicy, ModelSpec, build_baseline_cnn, build_transfer_model,
                              count_trainable, describe, forward, load_model,
                              load_tensor_archive, model_from_spec, save_model,
                              save_tensor_archive, trainable_parameters)
from fundusnet.training import TrainConfig, make_optimizer

from .oracles import central_difference


class TestBaseline:
    def test_layer_vocabulary(self):
        spec = describe(build_baseline_cnn(224, 4, seed=0))
        types = [layer.type for layer in spec.layers]
        assert types == ["Conv2d", "BatchNorm2d", "ReLU", "MaxPool2d"] * 3 + \
            ["Flatten", "Linear", "ReLU", "Linear", "Softmax"]
        assert spec.layers[-1].output_shape == (4,)
        assert spec.layers[-2].output_shape == (4,)
        assert spec.backbone_id is None
        assert all(layer.trainable for layer in spec.layers if layer.params)

    def test_spatial_trace(self):
        spec = describe(build_baseline_cnn(224, 4, seed=0))
        pools = [layer.output_shape for layer in spec.layers if layer.type == "MaxPool2d"]
        assert pools == [(32, 112, 112), (64, 56, 56), (128, 28, 28)]

    def test_two_classes_same_topology(self):
        four = describe(build_baseline_cnn(224, 4, seed=0))
        two = describe(build_baseline_cnn(224, 2, seed=0))
        assert [layer.type for layer in two.layers] == [layer.type for layer in four.layers]
        assert two.layers[-1].output_shape == (2,)

    def test_smallest_valid_input(self):
        # 32 -> 16 -> 8 -> 4
        assert describe(build_baseline_cnn(32, 4)).layers[-1].output_shape == (4,)

    def test_collapsing_input_rejected(self):
        # 8 -> 4 -> 2 -> 1
        with pytest.raises(ConfigError, match="collapses"):
            build_baseline_cnn(8, 4)

    def test_needs_two_classes(self):
        with pytest.raises(ConfigError):
            build_baseline_cnn(32, 1)

    def test_pooling_takes_window_max(self):
        model = build_baseline_cnn(32, 4)
        pool = model.blocks[0][3]
        x = torch.tensor([[[[1.0, 5.0], [3.0, -2.0]]]])
        assert pool(x).item() == 5.0


@pytest.fixture(scope="module")
def small():
    return build_baseline_cnn(32, 4, channels=(8, 8, 8), hidden=16, seed=0)


class TestForward:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
    def test_rows_are_distributions(self, small, n, seed):
        rng = np.random.default_rng(seed)
        batch = rng.normal(0, 3, (n, 32, 32, 3)).astype(np.float32)
        probs = forward(small, batch)
        assert probs.shape == (n, 4)
        assert np.all(probs >= 0)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)

    def test_shape_mismatch_names_dims(self, small):
        with pytest.raises(ShapeError, match=r"\(N, 32, 32, 3\).*\(2, 16, 16, 3\)"):
            forward(small, np.zeros((2, 16, 16, 3), np.float32))
        with pytest.raises(ShapeError):
            forward(small, torch.zeros(2, 3, 31, 32))

    def test_duplicate_rows_identical(self, small):
        x = np.random.default_rng(0).random((1, 32, 32, 3), dtype=np.float32)
        probs = forward(small, np.concatenate([x, x, x]))
        assert np.array_equal(probs[0], probs[1]) and np.array_equal(probs[1], probs[2])

    def test_tensor_and_array_layouts_agree(self, small):
        x = np.random.default_rng(1).random((2, 32, 32, 3), dtype=np.float32)
        from_tensor = forward(small, torch.from_numpy(x).permute(0, 3, 1, 2))
        np.testing.assert_array_equal(forward(small, x), from_tensor)

    def test_relu_outputs_nonnegative(self, small):
        seen = []
        hooks = [m.register_forward_hook(lambda _m, i, o: seen.append(o.clone()))
                 for m in small.modules() if isinstance(m, nn.ReLU)]
        x = torch.randn(4, 3, 32, 32) * 10 - 3
        small.train()
        small(x)
        for h in hooks:
            h.remove()
        assert len(seen) == 4
        assert all(bool((t >= 0).all()) for t in seen)


def test_final_layer_gradient_matches_finite_differences():
    torch.manual_seed(0)
    model = build_baseline_cnn(8, 2, channels=(4,), hidden=8).double()
    model.train()
    x = torch.rand(6, 3, 8, 8, dtype=torch.float64)
    y = torch.tensor([0, 1, 0, 1, 1, 0])
    loss_fn = nn.CrossEntropyLoss()

    model.zero_grad()
    loss_fn(model(x), y).backward()
    for param in (model.head.weight, model.head.bias):
        analytic = param.grad.detach().clone()
        flat = param.data.view(-1)
        numeric = torch.zeros_like(flat)
        for i in range(flat.numel()):
            original = flat[i].item()

            def loss_at(v, i=i):
                flat[i] = v
                with torch.no_grad():
                    return loss_fn(model(x), y).item()

            numeric[i] = central_difference(loss_at, original, 1e-6)
            flat[i] = original
        rel = (analytic.view(-1) - numeric).abs() / torch.clamp(
            torch.maximum(analytic.view(-1).abs(), numeric.abs()), min=1e-8)
        assert rel.max().item() < 1e-3


class TestTransfer:
    def test_fine_tune_tail_one(self, bundle):
        model = build_transfer_model(bundle, 4, FreezePolicy.fine_tune(1))
        names = set(trainable_parameters(model))
        expected = {n for n, _ in model.named_parameters()
                    if n.startswith("head.") or n.startswith("features.8.")}
        assert names == expected

    def test_fine_tune_tail_three(self, bundle):
        model = build_transfer_model(bundle, 4, FreezePolicy.fine_tune(3))
        prefixes = {n.split(".")[0] + "." + n.split(".")[1] for n in trainable_parameters(model)
                    if n.startswith("features.")}
        assert prefixes == {"features.6", "features.7", "features.8"}

    def test_feature_extract_head_only(self, bundle):
        model = build_transfer_model(bundle, 4, FreezePolicy.feature_extract())
        assert set(trainable_parameters(model)) == {"head.1.weight", "head.1.bias"}
        # 1280 pooled features -> 4 classes: weight plus bias
        assert count_trainable(model) == 1280 * 4 + 4

    @pytest.mark.parametrize("k", [2, 4, 7])
    def test_head_width_independent_of_imagenet_classes(self, bundle, k):
        model = build_transfer_model(bundle, k, input_side=64)
        assert forward(model, np.zeros((2, 64, 64, 3), np.float32)).shape == (2, k)
        assert describe(model).layers[-1].output_shape == (k,)

    def test_backbone_weights_come_from_bundle(self, bundle):
        state = bundle.state_dict()
        model = build_transfer_model(bundle, 4)
        for name, value in model.features.state_dict().items():
            assert torch.equal(value, state[f"features.{name}"])
        assert "classifier.1.weight" in state
        assert not any(n.startswith("classifier") for n in model.state_dict())

    def test_head_init_is_uniform_fan_in(self, bundle):
        head = build_transfer_model(bundle, 4).head[1]
        bound = 1 / np.sqrt(1280)
        assert head.weight.abs().max().item() <= bound
        assert head.weight.std().item() == pytest.approx(bound / np.sqrt(3), rel=0.05)

    def test_needs_two_classes(self, bundle):
        with pytest.raises(ConfigError):
            build_transfer_model(bundle, 1)

    def test_frozen_blocks_stay_in_eval_mode(self, bundle):
        model = build_transfer_model(bundle, 4, FreezePolicy.fine_tune(1))
        model.train()
        assert all(not block.training for block in model.features[:8])
        assert model.features[8].training and model.head.training

    def test_spec_marks_trainable_layers(self, bundle):
        spec = describe(build_transfer_model(bundle, 4, FreezePolicy.fine_tune(1), input_side=64))
        flags = {layer.name: layer.trainable for layer in spec.layers}
        assert flags["features.8"] and flags["head"]
        assert not any(flags[f"features.{i}"] for i in range(8))
        assert spec.backbone_id == "efficientnet_b0"

    @pytest.mark.parametrize("policy", [FreezePolicy.feature_extract(), FreezePolicy.fine_tune(1)])
    def test_one_step_leaves_frozen_parameters_untouched(self, bundle, policy):
        model = build_transfer_model(bundle, 4, policy, input_side=64)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        cfg = TrainConfig(model_kind="transfer", freeze_policy=policy, input_side=64)
        opt = make_optimizer(model, cfg)
        model.train()
        loss = nn.functional.cross_entropy(model(torch.rand(4, 3, 64, 64)), torch.tensor([0, 1, 2, 3]))
        loss.backward()
        opt.step()
        trainable = set(trainable_parameters(model))
        tail_prefix = "features.8." if policy.mode == "fine_tune" else None
        for name, value in model.state_dict().items():
            changed = not torch.equal(value, before[name])
            if name in trainable:
                assert changed, name
            elif tail_prefix and name.startswith(tail_prefix):
                continue  # BatchNorm statistics of the trainable block may move
            elif name.startswith("features."):
                assert not changed, name


class TestSerialization:
    def test_spec_json_round_trip(self):
        spec = describe(build_baseline_cnn(64, 3, seed=0))
        again = ModelSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
        assert again == spec

    def test_tensor_archive_bit_exact(self, tmp_path):
        tensors = {
            "a": torch.randn(3, 4),
            "b": torch.arange(5, dtype=torch.int64),
            "c": torch.tensor(7.5, dtype=torch.float64),
            "d": torch.randn(2, 2, 2).half(),
        }
        manifest = save_tensor_archive(tensors, tmp_path / "w.bin")
        assert [m["name"] for m in manifest] == ["a", "b", "c", "d"]
        assert manifest[1]["offset"] == manifest[0]["nbytes"]
        back = load_tensor_archive(tmp_path / "w.bin", manifest)
        for k in tensors:
            assert back[k].dtype == tensors[k].dtype
            assert torch.equal(back[k], tensors[k])

    def test_save_load_baseline(self, tmp_path):
        model = build_baseline_cnn(32, 4, seed=3)
        save_model(model, tmp_path / "run")
        loaded, doc = load_model(tmp_path / "run")
        assert {"name", "shape", "dtype", "offset"} <= set(doc["tensors"][0])
        x = np.random.default_rng(0).random((2, 32, 32, 3), dtype=np.float32)
        np.testing.assert_array_equal(forward(loaded, x), forward(model, x))

    def test_save_load_transfer_restores_policy(self, bundle, tmp_path):
        model = build_transfer_model(bundle, 4, FreezePolicy.feature_extract(), input_side=64)
        save_model(model, tmp_path / "run")
        loaded, _ = load_model(tmp_path / "run")
        assert loaded.policy == model.policy
        assert set(trainable_parameters(loaded)) == set(trainable_parameters(model))
        x = np.random.default_rng(0).random((2, 64, 64, 3), dtype=np.float32)
        np.testing.assert_array_equal(forward(loaded, x), forward(model, x))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            model_from_spec(ModelSpec("mystery", 32, 4))


class TestFreezePolicy:
    def test_feature_extract_has_no_tail(self):
        assert FreezePolicy("feature_extract", 5).trainable_tail == 0

    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            FreezePolicy("partial")

    def test_tail_larger_than_backbone(self, bundle):
        with pytest.raises(ConfigError):
            build_transfer_model(bundle, 4, FreezePolicy.fine_tune(10))
