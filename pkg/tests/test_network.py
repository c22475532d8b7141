import dataclasses

import numpy as np
import pytest

from skpool.errors import ConfigError, ValidationError
from skpool.keypoints import ClipRecord, FrameRecord, InstanceRecord, build_cloud, collate, shuffle_tracking
from skpool.network import (
    ModelConfig,
    ModelParams,
    concat_pool,
    encoding_table,
    forward_features,
    forward_recognition,
    gpb,
    index_encoding,
    init_params,
    mlp_block,
    param_shapes,
    point_embedding,
)
from skpool.tensor import Segments, Tensor, backward, softmax_cross_entropy

from conftest import make_clip, numeric_grad, permute_instances, permute_rows_within_instances, rel_error

TINY = ModelConfig(D=8, r=1, alpha=2, C=3, num_keypoint_types=4, num_categories=1)


def logits_bytes(clip, params):
    return forward_recognition(build_cloud(clip, params.config.num_categories), params).data.tobytes()


# --- config and params ------------------------------------------------------------

@pytest.mark.parametrize("bad", [dict(D=7), dict(r=0), dict(alpha=0), dict(C=1)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        ModelConfig(**bad).validate()


def test_param_shapes_follow_stage_widths():
    shapes = param_shapes(ModelConfig(D=8, r=2, alpha=3, C=5), "recognition")
    assert shapes["embed.w1"] == (4, 8)
    assert shapes["stage1.block1.w1"] == (16, 8)
    assert shapes["stage2.block0.w2"] == (16, 48)
    assert shapes["stage3.block0.w3"] == (96, 32)
    assert shapes["head.w"] == (32, 5)
    assert "lift.w" not in shapes
    assert param_shapes(ModelConfig(D=8), "localization")["lift.w"] == (16, 32)


def test_params_reject_wrong_shape():
    arrays = init_params(TINY).arrays()
    arrays["head.w"] = np.zeros((3, 3))
    with pytest.raises(ValidationError, match="head.w"):
        ModelParams(TINY, "recognition", arrays)


def test_params_reject_non_finite():
    arrays = init_params(TINY).arrays()
    arrays["head.b"] = np.full((1, 3), np.inf)
    with pytest.raises((ConfigError, ValidationError)):
        ModelParams(TINY, "recognition", arrays)


# --- encodings --------------------------------------------------------------------

def test_index_zero_alternates():
    np.testing.assert_array_equal(index_encoding(0, 8), [0, 1, 0, 1, 0, 1, 0, 1])


def test_distinct_indices_distinct_vectors():
    table = encoding_table(np.arange(300), 16)
    assert len({row.tobytes() for row in table}) == 300


def test_encoding_matches_direct_formula():
    dim = 12
    for idx in (1, 7, 299, 9999):
        ref = []
        for k in range(dim // 2):
            ref += [np.sin(idx / 10000 ** (2 * k / dim)), np.cos(idx / 10000 ** (2 * k / dim))]
        np.testing.assert_allclose(index_encoding(idx, dim), ref, atol=1e-12, rtol=0)


def test_odd_encoding_dim():
    with pytest.raises(ConfigError):
        index_encoding(3, 5)


# --- embedding and blocks -----------------------------------------------------------

def test_embedding_shared_weights():
    kp = np.array([[0.2, 0.3, 0.9], [0.2, 0.3, 0.9]])
    clip = ClipRecord("c", 0, (FrameRecord(0, (InstanceRecord(0, kp), InstanceRecord(0, kp))),))
    cloud = build_cloud(clip, 1)
    emb = point_embedding(cloud, init_params(TINY, seed=1)).data
    # row 0 and row 2 share features and keypoint type 0
    np.testing.assert_array_equal(emb[0], emb[2])
    diff = emb[1] - emb[0]
    np.testing.assert_allclose(diff, index_encoding(1, 8) - index_encoding(0, 8), atol=1e-12)


def test_embedding_row_permutation():
    params = init_params(TINY, seed=2)
    cloud = build_cloud(make_clip(F=2, I=2, K=4), 1)
    perm = np.random.default_rng(0).permutation(cloud.num_rows)
    shuffled = dataclasses.replace(cloud, features=cloud.features[perm],
                                   keypoint_type_of=cloud.keypoint_type_of[perm], _cache={})
    np.testing.assert_array_equal(point_embedding(shuffled, params).data,
                                  point_embedding(cloud, params).data[perm])


def test_embedding_rejects_unknown_keypoint_type():
    cloud = build_cloud(make_clip(K=6), 1)
    with pytest.raises(ValidationError, match="keypoint type"):
        point_embedding(cloud, init_params(TINY))


def test_concat_pool_singleton(rng):
    x, w1 = rng.normal(size=(1, 3)), rng.normal(size=(6, 3))
    out = concat_pool(Tensor(x), Segments.single(1), Tensor(w1)).data
    np.testing.assert_allclose(out, np.maximum(np.hstack([x, x]) @ w1, 0), atol=1e-12)


def test_concat_pool_loop_oracle(rng):
    x, w1 = rng.normal(size=(9, 3)), rng.normal(size=(6, 3))
    g = np.array([0, 1, 2, 0, 1, 2, 0, 0, 1])
    out = concat_pool(Tensor(x), Segments(g, 3), Tensor(w1)).data
    for i in range(9):
        gmax = np.array([max(x[j, d] for j in range(9) if g[j] == g[i]) for d in range(3)])
        ref = np.maximum(np.concatenate([x[i], gmax]) @ w1, 0)
        np.testing.assert_allclose(out[i], ref, atol=1e-12)


def test_concat_pool_within_group_permutation(rng):
    x, w1 = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    g = np.array([0, 0, 0, 1, 1, 1])
    perm = np.array([2, 0, 1, 5, 3, 4])
    a = concat_pool(Tensor(x), Segments(g, 2), Tensor(w1)).data
    b = concat_pool(Tensor(x[perm]), Segments(g, 2), Tensor(w1)).data
    assert a[perm].tobytes() == b.tobytes()


def test_mlp_block_zero_weights_is_identity(rng):
    cfg = ModelConfig(D=4, r=1, alpha=2, C=2)
    arrays = {k: (np.zeros_like(v) if k.split(".")[-1] in ("w1", "w2", "w3") else v)
              for k, v in init_params(cfg).arrays().items()}
    params = ModelParams(cfg, "recognition", arrays)
    x = rng.normal(size=(5, 4))
    out = mlp_block(Tensor(x), Segments([0, 0, 1, 1, 1], 2), params, "stage1.block0")
    np.testing.assert_array_equal(out.data, x)


def test_mlp_block_shape_and_gradient(rng):
    cfg = ModelConfig(D=4, r=1, alpha=2, C=2)
    params = init_params(cfg, seed=3)
    x = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    s = Segments([0, 1, 0, 1, 2, 2], 3)
    w = rng.normal(size=(6, 4))

    def loss():
        out = mlp_block(x, s, params, "stage1.block0")
        return (out.data * w).sum(), out

    val, out = loss()
    assert out.shape == (6, 4)
    from skpool.tensor import mul, sum_all
    backward(sum_all(mul(out, Tensor(w))))
    assert rel_error(x.grad, numeric_grad(lambda: loss()[0], x.data)) < 1e-4
    w1 = params["stage1.block0.w1"]
    assert rel_error(w1.grad, numeric_grad(lambda: loss()[0], w1.data)) < 1e-4


def test_gpb_single_group(rng):
    x = rng.normal(size=(5, 3))
    out = gpb(Tensor(x), Segments.single(5)).data
    np.testing.assert_array_equal(out, np.hstack([x.max(0), x.max(0)])[None])


def test_gpb_shape_contract(rng):
    out = gpb(Tensor(rng.normal(size=(12, 4))), Segments(np.repeat([0, 1, 2], 4), 3))
    assert out.shape == (3, 8)


# --- full forward ------------------------------------------------------------------

def test_cascaded_row_counts_recognition():
    cloud = build_cloud(make_clip(F=300, I=2, K=18), 1)
    params = init_params(ModelConfig(D=8, r=1, alpha=1, C=3, num_categories=1))
    trace = {}
    feats, _ = forward_features(cloud, params, trace=trace)
    assert (trace["stage1_rows"], trace["stage2_rows"], trace["stage3_rows"]) == (10800, 600, 300)
    assert feats.rows == 300


def test_cascaded_row_counts_localization():
    cloud = build_cloud(make_clip(F=300, I=2, K=18), 1)
    params = init_params(ModelConfig(D=8, r=1, alpha=1, C=3, num_categories=1), "localization")
    trace = {}
    feats, _ = forward_features(cloud, params, trace=trace)
    assert (trace["stage1_rows"], trace["stage2_rows"], trace["stage3_rows"]) == (10800, 600, 600)
    assert feats.rows == 600 and feats.cols == 32


def test_features_nonnegative():
    feats, _ = forward_features(build_cloud(make_clip(K=4), 1), init_params(TINY, seed=5))
    assert feats.data.min() >= 0.0


def test_mode_mismatch():
    with pytest.raises(ConfigError):
        forward_features(build_cloud(make_clip(K=4), 1), init_params(TINY), mode="localization")


def test_degenerate_clip_runs():
    clip = ClipRecord("c", 0, (FrameRecord(0, (InstanceRecord(0, [[0.5, 0.5, 1.0]]),)),))
    logits = forward_recognition(build_cloud(clip, 1), init_params(TINY))
    assert logits.shape == (1, 3) and np.isfinite(logits.data).all()


@pytest.mark.parametrize("seed", range(5))
def test_keypoint_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    params = init_params(TINY, seed=seed)
    cloud = build_cloud(make_clip(F=4, I=3, K=4, seed=seed), 1)
    a = forward_recognition(cloud, params).data
    b = forward_recognition(permute_rows_within_instances(cloud, rng), params).data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("seed", range(5))
def test_instance_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    params = init_params(TINY, seed=seed)
    clip = make_clip(F=4, I=3, K=4, seed=seed)
    assert logits_bytes(clip, params) == logits_bytes(permute_instances(clip, rng), params)


def test_tracking_free():
    params = init_params(TINY, seed=1)
    clip = make_clip(F=6, I=3, K=4, seed=2)
    assert logits_bytes(clip, params) == logits_bytes(shuffle_tracking(clip, 1, seed=3), params)


def test_frame_reversal_changes_logits():
    params = init_params(TINY, seed=1)
    clip = make_clip(F=5, I=2, K=4, seed=4)
    frames = tuple(FrameRecord(i, f.instances) for i, f in enumerate(reversed(clip.frames)))
    assert logits_bytes(clip, params) != logits_bytes(ClipRecord("r", 0, frames), params)


def test_batched_logits_equal_single_clip_logits():
    params = init_params(TINY, seed=2)
    clouds = [build_cloud(make_clip(F=2 + k, I=1 + k % 2, K=4, seed=k), 1) for k in range(4)]
    batched = forward_recognition(collate(clouds), params).data
    for k, cloud in enumerate(clouds):
        assert batched[k].tobytes() == forward_recognition(cloud, params).data[0].tobytes()


def test_end_to_end_gradient_check():
    cloud = build_cloud(make_clip(F=3, I=2, K=4, seed=9), 1)
    params = init_params(TINY, seed=4)
    label = np.array([[0.0, 1.0, 0.0]])

    def loss():
        return softmax_cross_entropy(forward_recognition(cloud, params), label)

    params.zero_grads()
    backward(loss())
    for name in ("embed.w1", "stage1.block0.w1", "stage2.block0.norm1.gain", "stage3.block0.w3", "head.w"):
        t = params[name]
        assert rel_error(t.grad, numeric_grad(lambda: loss().item(), t.data), floor=1e-6) < 1e-4, name
