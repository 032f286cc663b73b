import numpy as np
import pytest

from layerroute import encoder as enc
from layerroute.errors import ConfigError, ContractError, DataError

DIMS = enc.StackDims(12, 16, 32)
GROUPS = enc.default_groups(12)


def scene(seed=0, noise=0.1, values=(1, 4, 2)):
    return enc.SceneSpec(attributes=dict(zip(GROUPS, values)), noise_scale=noise, seed=seed)


class TestGenerateStack:
    def test_same_seed_bit_identical(self):
        a = enc.generate_stack(scene(seed=5), DIMS)
        b = enc.generate_stack(scene(seed=5), DIMS)
        assert a.patch_features.tobytes() == b.patch_features.tobytes()
        assert a.cls_features.tobytes() == b.cls_features.tobytes()

    def test_different_seed_differs(self):
        a = enc.generate_stack(scene(seed=5), DIMS)
        b = enc.generate_stack(scene(seed=6), DIMS)
        assert not np.array_equal(a.patch_features, b.patch_features)

    def test_zero_embeddings_give_zero_stack(self):
        dims = enc.StackDims(3, 1, 1)
        groups = ((1,), (2,), (3,))
        emb = enc.LayerEmbeddings(groups=groups,
                                  tables=tuple(np.zeros((1, 2)) for _ in groups),
                                  gains=np.ones(3), n_values=2)
        spec = enc.SceneSpec(attributes={g: 0 for g in groups}, noise_scale=0.0, seed=1)
        stack = enc.generate_stack(spec, dims, emb)
        assert np.all(stack.patch_features == 0.0)
        assert np.all(stack.cls_features == 0.0)

    def test_group_outside_layer_range_rejected(self):
        spec = enc.SceneSpec(attributes={(1, 2): 0, (3, 13): 1}, seed=0)
        with pytest.raises(ConfigError):
            enc.generate_stack(spec, enc.StackDims(4, 2, 4))

    def test_groups_must_partition(self):
        spec = enc.SceneSpec(attributes={(1, 2): 0, (2, 3): 1}, seed=0)
        with pytest.raises(ConfigError):
            enc.generate_stack(spec, enc.StackDims(3, 2, 4))

    def test_cls_is_patch_mean(self):
        stack = enc.generate_stack(scene(seed=2), DIMS)
        np.testing.assert_allclose(stack.cls_features, stack.patch_features.mean(axis=1),
                                   atol=1e-15)


class TestProbes:
    def test_noise_free_home_layer_perfect_and_away_at_chance(self):
        # single-layer groups: each layer carries exactly one attribute
        dims = enc.StackDims(3, 4, 16)
        groups = ((1,), (2,), (3,))
        tr_f, tr_y = enc.sample_layer_means(dims, groups, 5, 500, 0.0, seed=11)
        te_f, te_y = enc.sample_layer_means(dims, groups, 5, 1000, 0.0, seed=12)
        W = enc.fit_linear_probe(tr_f[:, 0], tr_y[:, 0], 5)
        assert enc.probe_accuracy(W, te_f[:, 0], te_y[:, 0]) == 1.0
        W_away = enc.fit_linear_probe(tr_f[:, 2], tr_y[:, 0], 5)
        away = enc.probe_accuracy(W_away, te_f[:, 2], te_y[:, 0])
        assert abs(away - 0.2) < 0.1  # chance for 5 values

    def test_depth_specialization_gap_at_default_noise(self):
        acc = enc.specialization_matrix(DIMS, GROUPS, 6, noise_scale=0.1, seed=3,
                                        n_train=300, n_test=300)
        for gi, g in enumerate(GROUPS):
            home = min(acc[gi, l - 1] for l in g)
            away = max(acc[gi, l - 1] for l in range(1, 13) if l not in g)
            assert home - away >= 0.3, f"group {gi}: home {home:.3f} away {away:.3f}"


class TestPenultimateCls:
    def test_two_layers_returns_first(self):
        spec = enc.SceneSpec(attributes={(1,): 0, (2,): 1}, noise_scale=0.0, seed=0)
        dims = enc.StackDims(2, 2, 8)
        with pytest.raises(ConfigError):
            # default grouping needs >= 3 layers; build embeddings explicitly
            enc.default_groups(2)
        emb = enc.make_embeddings(dims, ((1,), (2,)), 2)
        stack = enc.generate_stack(spec, dims, emb)
        np.testing.assert_array_equal(enc.penultimate_cls(stack), stack.cls_features[0])

    def test_constructed_ramp_returns_layer_four_of_five(self):
        patch = np.stack([np.full((3, 4), float(l)) for l in range(1, 6)])
        stack = enc.LayerStack(patch_features=patch, cls_features=patch.mean(axis=1))
        np.testing.assert_array_equal(enc.penultimate_cls(stack), np.full(4, 4.0))

    def test_clip_scale_depth_returns_layer_23(self):
        patch = np.zeros((24, 1, 2))
        cls = np.arange(1, 25, dtype=np.float64)[:, None] * np.ones((1, 2))
        stack = enc.LayerStack(patch_features=patch, cls_features=cls)
        np.testing.assert_array_equal(enc.penultimate_cls(stack), np.full(2, 23.0))

    def test_single_layer_rejected(self):
        stack = enc.LayerStack(patch_features=np.zeros((1, 2, 2)),
                               cls_features=np.zeros((1, 2)))
        with pytest.raises(ContractError):
            enc.penultimate_cls(stack)


class TestStackDump:
    def test_round_trip_bit_exact(self, tmp_path):
        stack = enc.generate_stack(scene(seed=9), DIMS)
        path = tmp_path / "probe.stack"
        enc.dump_stack(stack, path)
        loaded = enc.load_stack(path)
        assert loaded.patch_features.tobytes() == stack.patch_features.tobytes()
        assert loaded.cls_features.tobytes() == stack.cls_features.tobytes()

    def test_header_layout(self, tmp_path):
        spec = enc.SceneSpec(attributes={(1,): 0, (2,): 1, (3,): 0}, seed=1)
        stack = enc.generate_stack(spec, enc.StackDims(3, 2, 4))
        path = tmp_path / "s.stack"
        enc.dump_stack(stack, path)
        raw = path.read_bytes()
        assert raw[:4] == b"LSTK"
        version, L, P, D = np.frombuffer(raw[4:20], dtype="<i4")
        assert (version, L, P, D) == (1, 3, 2, 4)
        assert len(raw) == 20 + 8 * (3 * 2 * 4 + 3 * 4)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(DataError):
            enc.load_stack(path)

    def test_missing_file_is_data_error(self, tmp_path):
        with pytest.raises(DataError):
            enc.load_stack(tmp_path / "absent.stack")
