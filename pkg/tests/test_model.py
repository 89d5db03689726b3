import math

import numpy as np
import pytest

from tomformer import model as M
from tomformer import tensor as T
from tomformer.errors import ConfigError, ShapeError
from tomformer.gradcheck import END_TO_END_TOLERANCE, TINY_CONFIG, tiny_end_to_end
from tomformer.model import ModelConfig, ModelParams, count_parameters, forward, init_parameters
from tomformer.tensor import Tensor, finite_diff_check

# C=3, H=W=32, P=8, D=32, 4 heads, 2 layers, Q=20, K=8, MLP 64/64, heads 64/64, one CNN stage.
REFERENCE = ModelConfig(
    image_channels=3,
    image_height=32,
    image_width=32,
    patch_size=8,
    embed_dim=32,
    num_heads=4,
    num_layers=2,
    num_queries=20,
    num_classes=8,
    mlp_hidden_dims=(64, 64),
    head_hidden_dims=(64, 64),
    cnn_channels=(32,),
    cnn_pool_sizes=(8,),
)
# Counted by hand, tensor by tensor:
#   E 192*32=6144, pos 16*32=512, queries 20*32=640, conv 32*3*9+32=896,
#   fusion 64*32+32=2080, per layer (LN 128 + attn 4*1056 + MLP 2112+4160+2080) = 12704 -> 25408,
#   final LN 64, class head 2112+4160+585=6857, box head 2112+4160+260=6532.
REFERENCE_COUNT = 49133

CONFIG_MATRIX = [
    REFERENCE,
    TINY_CONFIG,
    ModelConfig(),
    ModelConfig(embed_dim=64, num_heads=4, mlp_hidden_dims=(128, 128), head_hidden_dims=(128, 128)),
    ModelConfig(image_channels=1, image_height=16, image_width=24, patch_size=4, embed_dim=12, num_heads=3,
                num_layers=3, num_queries=5, num_classes=2, mlp_hidden_dims=(7, 9), head_hidden_dims=(5, 6)),
]


def small_config(**kw):
    base = dict(image_height=8, image_width=8, patch_size=4, embed_dim=8, num_heads=2, num_layers=1,
                num_queries=3, num_classes=3, mlp_hidden_dims=(8, 8), head_hidden_dims=(8, 8))
    base.update(kw)
    return ModelConfig(**base)


class TestConfig:
    def test_patch_divisibility(self):
        with pytest.raises(ConfigError):
            ModelConfig(image_height=30)

    def test_heads_divide_dim(self):
        with pytest.raises(ConfigError):
            ModelConfig(embed_dim=30, num_heads=4)

    def test_cnn_must_land_on_grid(self):
        with pytest.raises(ConfigError):
            ModelConfig(cnn_channels=(32,), cnn_pool_sizes=(4,))

    def test_cnn_last_stage_is_embed_dim(self):
        with pytest.raises(ConfigError):
            ModelConfig(cnn_channels=(16,), cnn_pool_sizes=(8,))

    def test_default_stages(self):
        assert M.default_cnn_stages(4, 32) == ((16, 32), (2, 2))
        assert M.default_cnn_stages(16, 64) == ((32, 64), (4, 4))
        assert M.default_cnn_stages(8, 32) == ((32,), (8,))

    def test_round_trip_dict(self):
        cfg = CONFIG_MATRIX[-1]
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestPatchify:
    def test_single_patch(self):
        img = np.arange(16.0).reshape(1, 4, 4)
        assert M.patchify(Tensor(img), 4).data.tolist() == [list(range(16))]

    def test_vit_shapes(self):
        assert M.patchify(Tensor(np.zeros((3, 224, 224))), 16).shape == (196, 768)

    def test_grid_order(self):
        rows = M.patchify(Tensor(np.arange(16.0).reshape(1, 4, 4)), 2).data
        assert rows.tolist() == [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]]

    def test_channel_major_within_patch(self):
        img = np.stack([np.zeros((2, 2)), np.ones((2, 2))])
        assert M.patchify(Tensor(img), 2).data.tolist() == [[0, 0, 0, 0, 1, 1, 1, 1]]

    def test_not_divisible(self):
        with pytest.raises(ShapeError):
            M.patchify(Tensor(np.zeros((1, 5, 4))), 2)


class TestEmbedAndFuse:
    def _params(self, **tensors):
        return ModelParams({k: Tensor(np.array(v, dtype=float)) for k, v in tensors.items()})

    def test_zero(self):
        p = self._params(patch_projection=np.ones((4, 3)), positional_embeddings=np.zeros((2, 3)))
        assert not M.embed_patches(Tensor(np.zeros((2, 4))), p).data.any()

    def test_zero_patches_give_positions(self):
        pos = np.arange(6.0).reshape(2, 3)
        p = self._params(patch_projection=np.ones((4, 3)), positional_embeddings=pos)
        np.testing.assert_array_equal(M.embed_patches(Tensor(np.zeros((2, 4))), p).data, pos)

    def test_hand_arithmetic(self):
        p = self._params(patch_projection=np.eye(2), positional_embeddings=[[10.0, 10.0]])
        assert M.embed_patches(Tensor([[1.0, 2.0]]), p).data.tolist() == [[11.0, 12.0]]

    def test_fuse_zero(self):
        p = self._params(**{"fusion.weight": np.ones((4, 2)), "fusion.bias": np.zeros(2)})
        assert not M.fuse_tokens(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 2))), p).data.any()

    def test_fuse_stacked_identity(self):
        p = self._params(**{"fusion.weight": np.vstack([np.eye(2), np.eye(2)]), "fusion.bias": np.zeros(2)})
        out = M.fuse_tokens(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]]), p)
        assert out.data.tolist() == [[1.0, 1.0]]

    def test_fuse_shape_and_mismatch(self):
        p = self._params(**{"fusion.weight": np.ones((4, 2)), "fusion.bias": np.zeros(2)})
        assert M.fuse_tokens(Tensor(np.ones((7, 2))), Tensor(np.ones((7, 2))), p).shape == (7, 2)
        with pytest.raises(ShapeError):
            M.fuse_tokens(Tensor(np.ones((7, 2))), Tensor(np.ones((6, 2))), p)

    def test_assemble(self):
        fused, queries = np.arange(6.0).reshape(3, 2), -np.arange(4.0).reshape(2, 2)
        y = M.assemble_sequence(Tensor(fused), Tensor(queries)).data
        assert y.shape == (5, 2)
        np.testing.assert_array_equal(y[3], queries[0])
        np.testing.assert_array_equal(M.assemble_sequence(Tensor(np.zeros((0, 2))), Tensor(queries)).data, queries)
        assert M.assemble_sequence(Tensor(np.zeros((196, 64))), Tensor(np.zeros((20, 64)))).shape == (216, 64)


class TestCNN:
    def test_zero_image(self):
        cfg = small_config()
        params = init_parameters(cfg, 0)
        assert not M.cnn_features(Tensor(np.zeros((3, 8, 8))), params, cfg).data.any()

    def test_shape(self):
        cfg = ModelConfig(image_height=32, image_width=32, patch_size=8, embed_dim=16)
        params = init_parameters(cfg, 0)
        assert M.cnn_features(Tensor(np.ones((3, 32, 32))), params, cfg).shape == (16, 16)

    def test_identity_kernel_max_per_patch(self):
        cfg = ModelConfig(image_channels=1, image_height=4, image_width=4, patch_size=2, embed_dim=1, num_heads=1,
                          cnn_channels=(1,), cnn_pool_sizes=(2,), cnn_kernel_size=1)
        params = init_parameters(cfg, 0)
        params["cnn.0.weight"].data = np.ones((1, 1, 1, 1))
        img = np.array([[1, 5, 2, 0], [3, 4, 8, 1], [0, 2, 6, 6], [9, 1, 7, 3]], dtype=float)
        out = M.cnn_features(Tensor(img[None]), params, cfg)
        assert out.data.ravel().tolist() == [5.0, 8.0, 9.0, 7.0]


def _attention_params(wq, wk, wv, wo, d, mlp_out_zero=True):
    p = {}
    pre = "layers.0"
    p[f"{pre}.ln1.gamma"], p[f"{pre}.ln1.beta"] = np.ones(d), np.zeros(d)
    p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"] = np.ones(d), np.zeros(d)
    for name, w in (("q", wq), ("k", wk), ("v", wv), ("o", wo)):
        p[f"{pre}.attn.w{name}"] = w
        p[f"{pre}.attn.b{name}"] = np.zeros(d)
    rng = np.random.default_rng(0)
    p[f"{pre}.mlp.0.weight"], p[f"{pre}.mlp.0.bias"] = rng.normal(size=(d, 3)), np.zeros(3)
    p[f"{pre}.mlp.1.weight"], p[f"{pre}.mlp.1.bias"] = rng.normal(size=(3, 3)), np.zeros(3)
    p[f"{pre}.mlp.2.weight"] = np.zeros((3, d)) if mlp_out_zero else rng.normal(size=(3, d))
    p[f"{pre}.mlp.2.bias"] = np.zeros(d)
    return ModelParams({k: Tensor(v) for k, v in p.items()})


class TestEncoderLayer:
    def test_zero_branches_are_identity(self):
        cfg = small_config()
        params = init_parameters(cfg, 3)
        for name in ("layers.0.attn.wo", "layers.0.mlp.2.weight"):
            params[name].data = np.zeros_like(params[name].data)
        y = Tensor(np.random.default_rng(1).normal(size=(7, 8)))
        np.testing.assert_array_equal(M.encoder_layer(y, params, 0, cfg).data, y.data)

    def test_shape_preserved(self):
        cfg = small_config()
        y = Tensor(np.random.default_rng(1).normal(size=(7, 8)))
        assert M.encoder_layer(y, init_parameters(cfg, 0), 0, cfg).shape == (7, 8)

    def test_single_head_hand_computed(self):
        # T=2, D=2. LN of [1,3] and [4,0] (eps ~ 0) is [-1,1] and [1,-1].
        cfg = ModelConfig(image_channels=1, image_height=2, image_width=2, patch_size=2, embed_dim=2, num_heads=1,
                          num_queries=1, num_classes=1, mlp_hidden_dims=(3, 3), head_hidden_dims=(2, 2),
                          cnn_kernel_size=1, ln_eps=1e-12)
        wq = np.array([[1.0, 0.0], [0.0, 2.0]])
        wk = np.array([[0.0, 1.0], [1.0, 0.0]])
        wv = np.array([[1.0, 1.0], [0.0, 1.0]])
        wo = np.eye(2)
        params = _attention_params(wq, wk, wv, wo, 2)
        y = np.array([[1.0, 3.0], [4.0, 0.0]])
        x = np.array([[-1.0, 1.0], [1.0, -1.0]])
        q, k, v = x @ wq, x @ wk, x @ wv  # q=[[-1,2],[1,-2]] k=[[1,-1],[-1,1]] v=[[-1,0],[1,0]]
        scores = q @ k.T / math.sqrt(2)  # [[-3,3],[3,-3]]/sqrt2
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        attn = e / e.sum(axis=1, keepdims=True)
        s = 1 / (1 + math.exp(-6 / math.sqrt(2)))  # weight on the favoured token
        np.testing.assert_allclose(attn, [[1 - s, s], [s, 1 - s]], atol=1e-15)
        want = y + attn @ v @ wo
        got = M.encoder_layer(Tensor(y), params, 0, cfg).data
        np.testing.assert_allclose(got, want, atol=1e-9)


class TestForward:
    cfg = small_config(num_queries=20)

    def test_rows_and_range(self):
        params = init_parameters(self.cfg, 0)
        img = Tensor(np.random.default_rng(0).uniform(-1, 1, (3, 8, 8)))
        out = forward(img, params, self.cfg)
        assert out.class_logits.shape == (20, 4)
        assert out.boxes.shape == (20, 4)
        assert np.all((out.boxes.data >= 0) & (out.boxes.data <= 1))

    def test_deterministic(self):
        params = init_parameters(self.cfg, 0)
        img = Tensor(np.random.default_rng(0).uniform(-1, 1, (3, 8, 8)))
        a, b = forward(img, params, self.cfg), forward(img, params, self.cfg)
        assert a.class_logits.data.tobytes() == b.class_logits.data.tobytes()
        assert a.boxes.data.tobytes() == b.boxes.data.tobytes()

    def test_wrong_image_shape(self):
        with pytest.raises(ShapeError):
            forward(Tensor(np.zeros((3, 8, 4))), init_parameters(self.cfg, 0), self.cfg)

    def test_query_permutation_equivariance(self):
        cfg = small_config(num_queries=6)
        params = init_parameters(cfg, 2)
        img = Tensor(np.random.default_rng(3).uniform(-1, 1, (3, 8, 8)))
        perm = np.random.default_rng(4).permutation(6)
        base = forward(img, params, cfg)
        params["object_queries"].data = params["object_queries"].data[perm]
        permuted = forward(img, params, cfg)
        np.testing.assert_allclose(permuted.class_logits.data, base.class_logits.data[perm], atol=1e-12)
        np.testing.assert_allclose(permuted.boxes.data, base.boxes.data[perm], atol=1e-12)

    def test_residual_path(self):
        cfg = small_config(num_layers=2)
        params = init_parameters(cfg, 5)
        for n in range(2):
            for name in (f"layers.{n}.attn.wo", f"layers.{n}.attn.bo", f"layers.{n}.mlp.2.weight", f"layers.{n}.mlp.2.bias"):
                params[name].data = np.zeros_like(params[name].data)
        img = Tensor(np.random.default_rng(3).uniform(-1, 1, (3, 8, 8)))
        out = forward(img, params, cfg)
        normed = T.layer_norm(params["object_queries"], params["final_ln.gamma"], params["final_ln.beta"], cfg.ln_eps)
        logits = M.feed_forward(normed, params, "class_head", "relu")
        boxes = T.sigmoid(M.feed_forward(normed, params, "box_head", "relu"))
        np.testing.assert_array_equal(out.class_logits.data, logits.data)
        np.testing.assert_array_equal(out.boxes.data, boxes.data)

    def test_end_to_end_gradient(self):
        fn, x, _ = tiny_end_to_end(0)
        assert finite_diff_check(fn, x, 1e-5) < END_TO_END_TOLERANCE


class TestParameters:
    def test_reference_hand_count(self):
        assert count_parameters(REFERENCE) == REFERENCE_COUNT

    @pytest.mark.parametrize("cfg", CONFIG_MATRIX)
    def test_closed_form_matches_instantiated(self, cfg):
        assert count_parameters(cfg) == init_parameters(cfg, 0).total_size()

    def test_patch_projection_size(self):
        assert init_parameters(REFERENCE, 0)["patch_projection"].size == 8 * 8 * 3 * 32

    def test_layers_add_linearly(self):
        one = ModelConfig(num_layers=1)
        per_layer = count_parameters(ModelConfig(num_layers=2)) - count_parameters(one)
        assert count_parameters(ModelConfig(num_layers=4)) == count_parameters(one) + 3 * per_layer

    def test_seed_determinism(self):
        a, b = init_parameters(REFERENCE, 11), init_parameters(REFERENCE, 11)
        assert a.flat().tobytes() == b.flat().tobytes()
        assert init_parameters(REFERENCE, 12).flat().tobytes() != a.flat().tobytes()

    def test_initial_values(self):
        params = init_parameters(REFERENCE, 0)
        for name, t in params.items():
            assert np.all(np.isfinite(t.data))
            if name.endswith("gamma"):
                assert np.all(t.data == 1.0)
            if name.endswith(("beta", "bias")) or name.rsplit(".", 1)[-1] in ("bq", "bk", "bv", "bo"):
                assert not t.data.any()

    def test_uniform_variance(self):
        params = init_parameters(ModelConfig(embed_dim=32, mlp_hidden_dims=(32, 32)), 0)
        w = params["layers.0.attn.wq"].data  # 32x32 = 1024 draws, fan_in 32
        law = (1 / 32) / 3  # variance of U(-b, b) is b^2 / 3
        assert law / 3 < w.var() < 3 * law
        assert np.abs(w).max() <= math.sqrt(1 / 32)

    def test_query_init_scale(self):
        q = init_parameters(ModelConfig(num_queries=200, embed_dim=64, num_heads=4), 0)["object_queries"].data
        assert abs(q.std() - 0.02) < 0.002
