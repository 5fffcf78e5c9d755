"""The two-stream network: masks, attention, forward properties,
ablations, and checkpointing."""

import numpy as np
import pytest

from meshseg import autodiff as ad
from meshseg.autodiff import Tensor
from meshseg.errors import ConfigError
from meshseg.model import (
    AttentionMasks,
    ModelConfig,
    build_masks,
    init_params,
    load_checkpoint,
    met_forward,
    multi_head_attention,
    save_checkpoint,
)
from meshseg.preprocess import pad_sample

from conftest import permute_sample, small_model_config, small_sample


def make_model(sample, dtype=np.float64, seed=0, **overrides):
    cfg = small_model_config(eigen_count=sample.eigen_count, **overrides)
    params = init_params(cfg, np.random.default_rng(seed), dtype=dtype)
    return cfg, params


class TestModelConfig:
    def test_head_divisibility_enforced(self):
        with pytest.raises(ConfigError, match="divisible"):
            ModelConfig(num_classes=2, d_t=10, d_p=16, num_heads=4)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            ModelConfig.from_dict({"num_classes": 2, "bogus": 1})

    def test_feature_width(self):
        assert ModelConfig(num_classes=2, eigen_count=16).feature_width == 28


class TestBuildMasks:
    def test_structure(self):
        sample = small_sample(target_faces=24)
        masks = build_masks(sample, dtype=np.float64)
        n = sample.n_total
        # diagonal always allowed in all additive masks
        assert (np.diag(masks.adjacency) == 0).all()
        assert (np.diag(masks.cluster) == 0).all()
        # adjacency mask allows exactly self plus dual-graph neighbors
        dense = sample.adjacency.to_dense() + np.eye(n)
        np.testing.assert_array_equal(masks.adjacency == 0, dense > 0)
        # co-membership rows of cluster_avg sum to 1
        np.testing.assert_allclose(masks.cluster_avg.sum(axis=1), 1.0, atol=1e-12)
        # padding columns blocked for real rows in the cluster-stream mask
        real = sample.real_mask
        assert np.isneginf(masks.real[np.ix_(real, ~real)]).all()
        assert (masks.real[:, real] == 0).all()


class TestMultiHeadAttention:
    def test_singleton_softmax_is_identity_weight(self, rng):
        d = 4
        params = {
            "a.wq": Tensor(rng.normal(size=(d, d))),
            "a.wk": Tensor(rng.normal(size=(d, d))),
            "a.wv": Tensor(rng.normal(size=(d, d))),
            "a.wo": Tensor(rng.normal(size=(d, d))),
        }
        x = Tensor(rng.normal(size=(1, d)))
        out = multi_head_attention(params, "a", x, x, x, np.zeros((1, 1)), 2)
        expected = (x.data @ params["a.wv"].data) @ params["a.wo"].data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_all_masked_row_outputs_zero(self, rng):
        d = 4
        params = {
            f"a.{k}": Tensor(rng.normal(size=(d, d))) for k in ("wq", "wk", "wv", "wo")
        }
        x = Tensor(rng.normal(size=(2, d)))
        mask = np.array([[0.0, 0.0], [-np.inf, -np.inf]])
        out = multi_head_attention(params, "a", x, x, x, mask, 1)
        np.testing.assert_array_equal(out.data[1], 0.0)

    def test_hand_computed_two_by_two(self):
        # h=1, identity projections, Q=K=V=I2: row i mixes with weights
        # softmax applied to scores/sqrt(d) of row i of Q K^T = I
        d = 2
        eye = Tensor(np.eye(d))
        params = {f"a.{k}": eye for k in ("wq", "wk", "wv", "wo")}
        x = Tensor(np.eye(d))
        out = multi_head_attention(params, "a", x, x, x, np.zeros((2, 2)), 1)
        s = 1.0 / np.sqrt(d)
        w_same = np.exp(s) / (np.exp(s) + 1.0)
        expected = np.array([[w_same, 1 - w_same], [1 - w_same, w_same]])
        np.testing.assert_allclose(out.data, expected, atol=1e-12)


class TestForward:
    def test_output_shape(self):
        sample = small_sample(target_faces=24)
        cfg, params = make_model(sample)
        scores = met_forward(sample, params, cfg)
        assert scores.shape == (24, 2)

    def test_eval_determinism_bit_identical(self):
        sample = small_sample()
        cfg, params = make_model(sample)
        a = met_forward(sample, params, cfg).data
        b = met_forward(sample, params, cfg).data
        assert (a == b).all()

    def test_feature_width_mismatch(self):
        sample = small_sample(eigen_count=4)
        cfg, params = make_model(sample)
        bad_cfg = small_model_config(eigen_count=6)
        with pytest.raises(ConfigError, match="feature width"):
            met_forward(sample, params, bad_cfg)

    def test_max_clusters_overflow(self):
        sample = small_sample(target_faces=24)
        cfg, params = make_model(sample, max_clusters=2)
        with pytest.raises(ConfigError, match="cluster embeddings"):
            met_forward(sample, params, cfg)

    def test_permutation_equivariance(self, rng):
        sample = small_sample(target_faces=24)
        cfg, params = make_model(sample)
        base = met_forward(sample, params, cfg).data
        for _ in range(5):
            perm = rng.permutation(sample.n_total)
            permuted = permute_sample(sample, perm)
            scores = met_forward(permuted, params, cfg).data
            assert np.abs(scores - base[perm]).max() <= 1e-6

    def test_padding_invariance(self):
        sample = small_sample()  # unpadded, 20 faces
        cfg, params = make_model(sample)
        base = met_forward(sample, params, cfg).data
        padded = pad_sample(sample, sample.n_total + 13)
        scores = met_forward(padded, params, cfg).data
        assert np.abs(scores[: sample.n_total] - base).max() <= 1e-6

    def test_single_layer_locality(self):
        """Perturbing a face that is neither adjacent to face i nor in its
        cluster leaves face i's single-layer score unchanged."""
        sample = small_sample()
        cfg, params = make_model(sample, num_layers=1)
        base = met_forward(sample, params, cfg).data
        neighbors = sample.adjacency.neighbor_lists()
        i = 0
        same_cluster = set(
            np.flatnonzero(sample.cluster_ids == sample.cluster_ids[i]).tolist()
        )
        excluded = {i, *neighbors[i], *same_cluster}
        far = next(j for j in range(sample.n_total) if j not in excluded)
        bumped = sample.features.copy()
        bumped[far] += 0.37
        from dataclasses import replace

        perturbed = replace(sample, features=bumped)
        scores = met_forward(perturbed, params, cfg).data
        assert np.abs(scores[i] - base[i]).max() <= 1e-6
        assert np.abs(scores[far] - base[far]).max() > 1e-6  # sanity

    def test_training_dropout_changes_output_and_is_seeded(self):
        sample = small_sample()
        cfg, params = make_model(sample)
        eval_scores = met_forward(sample, params, cfg).data
        t1 = met_forward(
            sample, params, cfg, training=True, rng=np.random.default_rng(3)
        ).data
        t2 = met_forward(
            sample, params, cfg, training=True, rng=np.random.default_rng(3)
        ).data
        assert (t1 == t2).all()
        assert np.abs(t1 - eval_scores).max() > 0

    def test_unused_cluster_embedding_rows_get_zero_gradient(self):
        sample = small_sample()
        cfg, params = make_model(sample)
        scores = met_forward(sample, params, cfg)
        ad.backward(ad.reduce_sum(ad.mul(scores, scores)))
        grad = params["cluster_embed"].grad
        used = set(sample.cluster_ids.tolist())
        for row in range(cfg.max_clusters):
            if row not in used:
                np.testing.assert_array_equal(grad[row], 0.0)


class TestAblations:
    def test_feature_ablation_equals_manual_zeroing(self):
        from dataclasses import replace

        from meshseg.preprocess import COORD_COLS

        sample = small_sample()
        cfg, params = make_model(sample, use_coords=False)
        ablated = met_forward(sample, params, cfg).data

        zeroed = sample.features.copy()
        zeroed[:, COORD_COLS] = 0
        manual_sample = replace(sample, features=zeroed)
        full_cfg = small_model_config(eigen_count=sample.eigen_count)
        manual = met_forward(manual_sample, params, full_cfg).data
        np.testing.assert_array_equal(ablated, manual)

    def test_cluster_stream_ablation_runs_and_ignores_cluster_params(self):
        sample = small_sample()
        cfg, params = make_model(sample, use_cluster_stream=False)
        scores = met_forward(sample, params, cfg)
        assert scores.shape == (sample.n_total, 2)
        ad.backward(ad.reduce_sum(ad.mul(scores, scores)))
        # cluster-path parameters receive no gradient in the ablated model
        assert params["cluster_embed"].grad is None
        assert params["layers.0.ct.wq"].grad is None
        assert params["layers.0.sa_t.wq"].grad is not None

    def test_tc_sum_flag_changes_output_with_multi_member_clusters(self):
        sample = small_sample(lam=4.0)  # 3 clusters over 20 faces
        cfg, params = make_model(sample)
        sum_cfg = small_model_config(eigen_count=sample.eigen_count, tc_sum=True)
        avg = met_forward(sample, params, cfg).data
        total = met_forward(sample, params, sum_cfg).data
        assert np.abs(avg - total).max() > 1e-8


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        sample = small_sample()
        cfg, params = make_model(sample, dtype=np.float32)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, cfg)
        loaded, loaded_cfg = load_checkpoint(path)
        assert loaded_cfg == cfg
        assert set(loaded) == set(params)
        for name in params:
            np.testing.assert_array_equal(loaded[name].data, params[name].data)

    def test_forward_bit_identical_after_round_trip(self, tmp_path):
        sample = small_sample()
        cfg, params = make_model(sample, dtype=np.float32)
        base = met_forward(sample, params, cfg).data
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, cfg)
        loaded, loaded_cfg = load_checkpoint(path)
        again = met_forward(sample, loaded, loaded_cfg).data
        assert (base == again).all()

    def test_manifest_self_describing(self, tmp_path):
        import json
        import zipfile

        sample = small_sample()
        cfg, params = make_model(sample, dtype=np.float32)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, cfg)
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
        assert manifest["dtype"] == "<f4"
        assert manifest["config"]["d_t"] == cfg.d_t
        assert manifest["config"]["use_cluster_stream"] is True
        assert manifest["params"]["embed.w"]["shape"] == [cfg.feature_width, cfg.d_t]

    def test_unknown_version_rejected(self, tmp_path):
        import json
        import zipfile

        sample = small_sample()
        cfg, params = make_model(sample, dtype=np.float32)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, cfg)
        with zipfile.ZipFile(path) as zf:
            payload = {name: zf.read(name) for name in zf.namelist()}
        manifest = json.loads(payload["manifest.json"])
        manifest["format_version"] = 42
        payload["manifest.json"] = json.dumps(manifest).encode()
        with zipfile.ZipFile(path, "w") as zf:
            for name, blob in payload.items():
                zf.writestr(name, blob)
        with pytest.raises(ConfigError, match="format version"):
            load_checkpoint(path)
