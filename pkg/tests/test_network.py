import numpy as np
import pytest

from fastsal import network as net
from fastsal.errors import ConfigError, ContractError, ParseError, WeightStoreError
from fastsal.network import (WeightStore, build_backbone, build_fastsal,
                             check_weights, fold_batch_norm,
                             group_feature_blocks, init_weights, load_weights,
                             save_weights, trainable_slots)
from fastsal.tensor import Tensor


@pytest.fixture(scope="module")
def backbone_small():
    graph = build_backbone((1, 3, 48, 64), width=0.25)
    return graph, init_weights(graph, seed=0)


@pytest.fixture(scope="module")
def fastsal_small():
    graph = build_fastsal("C", (1, 3, 48, 64), width=0.25)
    return graph, init_weights(graph, seed=0)


class TestBackboneStructure:
    def test_eighteen_taps(self):
        graph = build_backbone((1, 3, 192, 256))
        assert len(graph.taps) == 18

    def test_tap_scale_schedule(self):
        graph = build_backbone((1, 3, 192, 256))
        shapes = graph.infer_shapes()
        hw = [shapes[t][2:] for t in graph.taps]
        assert hw[:2] == [(96, 128)] * 2
        assert hw[2:4] == [(48, 64)] * 2
        assert hw[4:7] == [(24, 32)] * 3
        assert hw[7:14] == [(12, 16)] * 7
        assert hw[14:] == [(6, 8)] * 4

    def test_tap_channels(self):
        graph = build_backbone((1, 3, 192, 256))
        shapes = graph.infer_shapes()
        ch = [shapes[t][1] for t in graph.taps]
        assert ch == [32, 16, 24, 24, 32, 32, 32,
                      64, 64, 64, 64, 96, 96, 96, 160, 160, 160, 320]

    def test_parameter_count(self):
        graph = build_backbone((1, 3, 192, 256))
        store = init_weights(graph)
        assert store.scalar_count() == 1_811_712

    def test_rejects_bad_size(self):
        with pytest.raises(ConfigError):
            build_backbone((1, 3, 50, 64))

    def test_forward_and_tap_collection(self, backbone_small):
        graph, store = backbone_small
        x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 48, 64))
                   .astype(np.float32))
        res = graph.run(store, x, want=["taps"])
        assert len(res["taps"]) == 18
        assert all(np.all(np.isfinite(t.data)) for t in res["taps"])

    def test_run_shapes_match_inference(self, backbone_small):
        graph, store = backbone_small
        x = Tensor(np.zeros((1, 3, 48, 64), dtype=np.float32))
        res = graph.run(store, x, want=[l.name for l in graph.layers[:5]])
        shapes = graph.infer_shapes()
        for name, t in res.items():
            if name != "out":
                assert t.shape == shapes[name]


class TestFeatureBlocks:
    def test_block_channels_full_width(self):
        graph = build_fastsal("C", (1, 3, 192, 256))
        shapes = graph.infer_shapes()
        ch = [shapes[f"blocks.b{i}"][1] for i in range(1, 5)]
        assert ch == [96, 96, 544, 800]
        assert sum(ch) == 1536

    def test_block_scales(self):
        graph = build_fastsal("C", (1, 3, 192, 256))
        shapes = graph.infer_shapes()
        hw = [shapes[f"blocks.b{i}"][2:] for i in range(1, 5)]
        assert hw == [(48, 64), (24, 32), (12, 16), (6, 8)]

    def test_functional_grouping_matches_graph(self, backbone_small):
        graph, store = backbone_small
        x = Tensor(np.random.default_rng(1).normal(size=(1, 3, 48, 64))
                   .astype(np.float32))
        taps = graph.run(store, x, want=["taps"])["taps"]
        blocks = group_feature_blocks(taps)
        lst = blocks.as_list()
        assert len(lst) == 4
        # finest block is H/4 of the 48x64 input
        assert lst[0].shape[2:] == (12, 16)
        assert lst[-1].shape[2:] == (2, 2)

    def test_grouping_needs_eighteen(self):
        with pytest.raises(ContractError):
            group_feature_blocks([Tensor(np.zeros((1, 1, 2, 2)))] * 17)


class TestFullModel:
    @pytest.mark.parametrize("variant", ["C", "A"])
    def test_output_is_one_logit_channel_at_input_size(self, variant):
        graph = build_fastsal(variant, (1, 3, 48, 64), width=0.25)
        store = init_weights(graph, seed=1)
        x = Tensor(np.random.default_rng(2).normal(size=(1, 3, 48, 64))
                   .astype(np.float32))
        out = graph.run(store, x)["out"]
        assert out.shape == (1, 1, 48, 64)
        assert np.all(np.isfinite(out.data))

    def test_bad_variant(self):
        with pytest.raises(ConfigError):
            build_fastsal("X", (1, 3, 48, 64))

    def test_deterministic_forward(self, fastsal_small):
        graph, store = fastsal_small
        x = Tensor(np.random.default_rng(3).normal(size=(1, 3, 48, 64))
                   .astype(np.float32))
        a = graph.run(store, x)["out"]
        b = graph.run(store, x)["out"]
        np.testing.assert_array_equal(a.data, b.data)

    def test_init_seed_controls_weights(self, fastsal_small):
        graph, _ = fastsal_small
        s0 = init_weights(graph, seed=0)
        s0b = init_weights(graph, seed=0)
        s1 = init_weights(graph, seed=1)
        name = "decoder.out.w"
        np.testing.assert_array_equal(s0.get(name).data, s0b.get(name).data)
        assert not np.array_equal(s0.get(name).data, s1.get(name).data)


class TestModifiedInvertedResidual:
    def _weights(self, din, dout, seed=0):
        rng = np.random.default_rng(seed)
        hidden = 2 * din
        store = WeightStore()

        def conv(prefix, ci, co, k, groups=1):
            store.put(prefix + ".w", Tensor(
                rng.normal(0, 0.1, (co, ci // groups, k, k)).astype(np.float32)))
            store.put(prefix + ".b", Tensor(np.zeros(co, dtype=np.float32)))

        conv("mir.expand.conv", din, hidden, 1)
        conv("mir.dw.conv", hidden, hidden, 3, groups=hidden)
        conv("mir.project.conv", hidden, dout, 1)
        for bn, c in (("expand", hidden), ("dw", hidden), ("project", dout)):
            store.put(f"mir.{bn}.bn.gamma", Tensor(np.ones(c, dtype=np.float32)))
            store.put(f"mir.{bn}.bn.beta", Tensor(np.zeros(c, dtype=np.float32)))
            store.put(f"mir.{bn}.bn.rmean", Tensor(np.zeros(c, dtype=np.float32)))
            store.put(f"mir.{bn}.bn.rvar", Tensor(np.ones(c, dtype=np.float32)))
        return store

    def test_preserves_spatial_size(self):
        store = self._weights(8, 4)
        x = Tensor(np.random.default_rng(1).normal(size=(1, 8, 6, 6))
                   .astype(np.float32))
        out = net.modified_inverted_residual(x, None, store)
        assert out.shape == (1, 4, 6, 6)

    def test_skip_when_channels_match(self):
        store = self._weights(4, 4, seed=2)
        # zero all conv weights: with the skip the block becomes identity
        for name in list(store.names()):
            if name.endswith(".w"):
                store.put(name, Tensor(np.zeros_like(store.get(name).data)))
        x = Tensor(np.random.default_rng(3).normal(size=(1, 4, 5, 5))
                   .astype(np.float32))
        out = net.modified_inverted_residual(x, None, store)
        np.testing.assert_allclose(out.data, x.data, atol=1e-6)

    def test_previous_level_is_added(self):
        store = self._weights(4, 4, seed=4)
        x = Tensor(np.random.default_rng(5).normal(size=(1, 4, 5, 5))
                   .astype(np.float32))
        prev = Tensor(np.random.default_rng(6).normal(size=(1, 4, 5, 5))
                      .astype(np.float32))
        fused = net.modified_inverted_residual(x, prev, store)
        manual = net.modified_inverted_residual(
            Tensor(x.data + prev.data), None, store)
        np.testing.assert_allclose(fused.data, manual.data, rtol=1e-6)

    def test_shape_mismatch(self):
        store = self._weights(4, 4)
        x = Tensor(np.zeros((1, 4, 5, 5), dtype=np.float32))
        prev = Tensor(np.zeros((1, 4, 3, 3), dtype=np.float32))
        with pytest.raises(Exception):
            net.modified_inverted_residual(x, prev, store)

    def test_param_count_at_width_64(self):
        # expansion 2 with biased convs and affine bn:
        # expand 64*128+128, dw 9*128+128, project 128*64+64, bn 2*(128+128+64)
        store = self._weights(64, 64)
        assert store.scalar_count() == 18_496


class TestWeightIO:
    def test_round_trip(self, tmp_path, fastsal_small):
        graph, store = fastsal_small
        path = str(tmp_path / "w.fsal")
        save_weights(store, path)
        loaded = load_weights(path)
        assert sorted(loaded.names()) == sorted(store.names())
        for name in store.names():
            np.testing.assert_array_equal(loaded.get(name).data,
                                          store.get(name).data)
        check_weights(graph, loaded)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.fsal"
        path.write_bytes(b"NOPE" + b"\x00" * 10)
        with pytest.raises(ParseError) as e:
            load_weights(str(path))
        assert e.value.offset == 0

    def test_truncated_payload(self, tmp_path, fastsal_small):
        _, store = fastsal_small
        path = tmp_path / "trunc.fsal"
        save_weights(store, str(path))
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(ParseError) as e:
            load_weights(str(path))
        assert e.value.offset is not None

    def test_trailing_garbage(self, tmp_path, fastsal_small):
        _, store = fastsal_small
        path = tmp_path / "extra.fsal"
        save_weights(store, str(path))
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(ParseError, match="trailing"):
            load_weights(str(path))

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "v9.fsal"
        path.write_bytes(b"FSAL" + (9).to_bytes(2, "little") + b"\x00" * 4)
        with pytest.raises(ParseError, match="version"):
            load_weights(str(path))

    def test_missing_slot(self, fastsal_small):
        graph, store = fastsal_small
        broken = store.copy()
        broken.tensors.pop("decoder.out.w")
        with pytest.raises(WeightStoreError, match="decoder.out.w"):
            check_weights(graph, broken)

    def test_wrong_shape(self, fastsal_small):
        graph, store = fastsal_small
        broken = store.copy()
        broken.put("decoder.out.b", Tensor(np.zeros(7, dtype=np.float32)))
        with pytest.raises(WeightStoreError, match="decoder.out.b"):
            check_weights(graph, broken)

    def test_trainable_slots_exclude_running_stats(self, fastsal_small):
        _, store = fastsal_small
        slots = trainable_slots(store)
        assert slots
        assert not any(s.endswith((".rmean", ".rvar")) for s in slots)


class TestBatchNormFolding:
    def test_inference_equivalence(self, fastsal_small):
        graph, store = fastsal_small
        x = Tensor(np.random.default_rng(7).normal(size=(1, 3, 48, 64))
                   .astype(np.float32))
        ref = graph.run(store, x)["out"].data
        fg, fs = fold_batch_norm(graph, store)
        out = fg.run(fs, x)["out"].data
        denom = np.abs(ref).max() + 1e-12
        assert np.abs(out - ref).max() / denom < 1e-5

    def test_no_bn_layers_remain(self, fastsal_small):
        graph, store = fastsal_small
        fg, fs = fold_batch_norm(graph, store)
        assert all(l.kind != "bn" for l in fg.layers)
        assert not any(n.endswith((".gamma", ".rmean")) for n in fs.names())

    def test_originals_untouched(self, fastsal_small):
        graph, store = fastsal_small
        n_layers = len(graph.layers)
        snapshot = store.get("backbone.stem.conv.w").data.copy()
        fold_batch_norm(graph, store)
        assert len(graph.layers) == n_layers
        np.testing.assert_array_equal(store.get("backbone.stem.conv.w").data,
                                      snapshot)

    def test_taps_preserved(self, fastsal_small):
        graph, store = fastsal_small
        fg, fs = fold_batch_norm(graph, store)
        x = Tensor(np.random.default_rng(8).normal(size=(1, 3, 48, 64))
                   .astype(np.float32))
        taps = fg.run(fs, x, want=["taps"])["taps"]
        assert len(taps) == 18
