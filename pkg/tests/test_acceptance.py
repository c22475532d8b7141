"""End-to-end acceptance checks.

Each test prints one ``PASS`` or ``FAIL`` line naming its criterion, so the
verdicts can be read straight out of a verbose run. The training criteria
take several minutes each.
"""

import json
import time

import numpy as np
import pytest

from skpool.checkpoint import dumps_checkpoint, load_checkpoint, save_checkpoint
from skpool.cli import main
from skpool.keypoints import build_cloud, collate, shuffle_tracking
from skpool.localization import (
    eval_instance_localization,
    infer_instance_logits,
    mixed_pool,
    mixed_training_logit,
    sample_mix_mask,
)
from skpool.network import (
    ModelConfig,
    concat_pool,
    forward_features,
    forward_recognition,
    gpb,
    head,
    init_params,
    video_logits,
)
from skpool.synthetic import SynthConfig, gen_localization, gen_synthetic
from skpool.tensor import Segments, Tensor, grad_check, segment_max_pool, softmax_cross_entropy
from skpool.train import TrainConfig, build_clouds, evaluate, robustness_sweep, train

from conftest import make_clip, permute_instances, permute_rows_within_instances


@pytest.fixture
def report(capsys):
    """Print one verdict line per criterion, outside pytest's output capture."""

    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        assert ok, detail

    return emit


def random_clip(rng, k):
    return make_clip(F=int(rng.integers(2, 7)), I=int(rng.integers(1, 4)), K=18,
                     seed=int(rng.integers(1 << 30)), clip_id=f"r{k}")


# --- 1: invariances ------------------------------------------------------------------

def test_permutation_invariance(report):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    cfg = ModelConfig(D=16, r=1, alpha=2, C=4, num_categories=1)
    failures = []
    for k in range(100):
        params = init_params(cfg, seed=k)
        clip = random_clip(rng, k)
        ref = forward_recognition(build_cloud(clip, 1), params).data.tobytes()
        variants = {
            "keypoints": permute_rows_within_instances(build_cloud(clip, 1), rng),
            "instances": build_cloud(permute_instances(clip, rng), 1),
            "tracks": build_cloud(shuffle_tracking(clip, 1, seed=k), 1),
        }
        for name, cloud in variants.items():
            if forward_recognition(cloud, params).data.tobytes() != ref:
                failures.append((k, name))
    elapsed = time.perf_counter() - start
    report(1, not failures and elapsed < 30,
           f"100 clips x 3 permutations bitwise equal, {len(failures)} mismatches, {elapsed:.1f} s")


# --- 2: gradients --------------------------------------------------------------------

def test_gradient_correctness(report):
    start = time.perf_counter()
    cfg = ModelConfig(D=8, r=1, alpha=2, C=3, num_keypoint_types=4, num_categories=1)
    params = init_params(cfg, seed=11)
    cloud = build_cloud(make_clip(F=3, I=2, K=4, seed=5), 1)
    label = np.array([[0.0, 0.0, 1.0]])
    worst = grad_check(lambda: softmax_cross_entropy(forward_recognition(cloud, params), label),
                       [params[n] for n in params.names()])
    elapsed = time.perf_counter() - start
    report(2, worst < 1e-4 and elapsed < 60,
           f"max relative error {worst:.2e} over all parameters, {elapsed:.1f} s")


# --- 3: cascade ----------------------------------------------------------------------

def test_cascaded_reduction(report):
    cloud = build_cloud(make_clip(F=300, I=2, K=18), 1)
    trace = {}
    forward_features(cloud, init_params(ModelConfig(num_categories=1)), trace=trace)
    counts = (trace["stage1_rows"], trace["stage2_rows"], trace["stage3_rows"])
    report(3, counts == (10800, 600, 300), f"stage rows {counts[0]} -> {counts[1]} -> {counts[2]}")


# --- 4: pooling oracles --------------------------------------------------------------

def loop_group_max(x, groups, num_groups):
    out = np.full((num_groups, x.shape[1]), -np.inf)
    for i in range(x.shape[0]):
        for d in range(x.shape[1]):
            if x[i, d] > out[groups[i], d]:
                out[groups[i], d] = x[i, d]
    return out


def test_pooling_oracles(report):
    rng = np.random.default_rng(4)
    bad = {"segment_max_pool": 0, "gpb": 0, "concat_pool": 0, "mixed_pool": 0}
    for _ in range(1000):
        n, g, d = int(rng.integers(1, 12)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        groups = np.concatenate([np.arange(g), rng.integers(0, g, size=n)])  # every group non-empty
        x = rng.normal(size=(groups.size, d))
        seg = Segments(groups, g)
        ref = loop_group_max(x, groups, g)
        bad["segment_max_pool"] += not np.array_equal(segment_max_pool(Tensor(x), seg).data, ref)

        whole = loop_group_max(x, np.zeros(groups.size, dtype=int), 1)[0]
        expected = np.array([list(ref[j]) + list(whole) for j in range(g)])
        bad["gpb"] += not np.array_equal(gpb(Tensor(x), seg).data, expected)

        # small integers keep every product and sum exact, so the comparison can be exact
        xi = rng.integers(-4, 5, size=(groups.size, d)).astype(float)
        w1 = rng.integers(-3, 4, size=(2 * d, d)).astype(float)
        gmax = loop_group_max(xi, groups, g)
        expected = np.zeros_like(xi)
        for i in range(xi.shape[0]):
            row = list(xi[i]) + list(gmax[groups[i]])
            for k in range(d):
                expected[i, k] = max(0.0, sum(row[j] * w1[j, k] for j in range(2 * d)))
        bad["concat_pool"] += not np.array_equal(concat_pool(Tensor(xi), seg, Tensor(w1)).data, expected)

        fa, fb = np.abs(rng.normal(size=(n, d))), np.abs(rng.normal(size=(int(rng.integers(1, 12)), d)))
        ma = sample_mix_mask(fa.shape[0], seed=int(rng.integers(1 << 30)), mode="rows")
        mb = sample_mix_mask(fb.shape[0], lam=ma.lam, seed=int(rng.integers(1 << 30)), mode="rows")
        out = np.zeros(d)
        for i in range(fa.shape[0]):
            for c in range(d):
                out[c] = max(out[c], fa[i, c] * ma.keep[i])
        for i in range(fb.shape[0]):
            for c in range(d):
                out[c] = max(out[c], fb[i, c] * (not mb.keep[i]))
        bad["mixed_pool"] += not np.array_equal(mixed_pool(Tensor(fa), Tensor(fb), ma, mb).data[0], out)
    report(4, not any(bad.values()), f"mismatches over 1000 instances each: {bad}")


# --- 5 and 6: recognition ------------------------------------------------------------

@pytest.fixture(scope="module")
def recognition(tmp_path_factory):
    synth = SynthConfig(num_classes=4, clips_per_class=200, F=16, I=2, K=18, noise_sigma=0.01)
    train_clips, test_clips = gen_synthetic(synth, 0), gen_synthetic(synth, 1)
    cfg = TrainConfig(epochs=30, ckpt_path=str(tmp_path_factory.mktemp("rec") / "model.skp"))
    start = time.perf_counter()
    params, run = train(cfg, clips=train_clips, test_clips=test_clips)
    return params, run, test_clips, time.perf_counter() - start


@pytest.mark.slow
def test_desk_scale_recognition(report, recognition):
    _, run, _, elapsed = recognition
    report(5, run.test_accuracy >= 0.95 and elapsed < 600,
           f"test accuracy {run.test_accuracy:.4f} after 30 epochs, {elapsed:.0f} s")


@pytest.mark.slow
def test_robustness_sweeps(report, recognition):
    params, _, clips, _ = recognition
    clean = evaluate(params, clips)
    track = robustness_sweep(params, clips, "track", [1, 2, 4, 8, 16], seed=0)
    fn = robustness_sweep(params, clips, "fn", [0.0, 1.0], seed=0)
    flat = {acc for _, acc in track} == {clean}
    ok = flat and abs(fn[1][1] - 0.25) <= 0.10 and fn[0][1] == clean
    report(6, ok, f"clean {clean:.4f}, track curve {[a for _, a in track]}, "
                  f"FN 0 -> {fn[0][1]:.4f}, FN 1 -> {fn[1][1]:.4f}")


# --- 7: pooling switch ---------------------------------------------------------------

def test_pooling_switch(report):
    rng = np.random.default_rng(7)
    params = init_params(ModelConfig(D=16, r=1, alpha=2, C=4, num_categories=1), "localization", seed=3)
    clouds = [build_cloud(random_clip(rng, k), 1) for k in range(100)]
    switched = lam_one = 0
    for k, cloud in enumerate(clouds):
        feats, segs = forward_features(cloud, params)
        switched += head(segment_max_pool(feats, segs), params).data.tobytes() == \
            video_logits(cloud, params).data.tobytes()
        other, _ = forward_features(clouds[(k + 1) % 100], params)
        ma, mb = sample_mix_mask(feats.rows, lam=1.0), sample_mix_mask(other.rows, lam=1.0)
        lam_one += mixed_training_logit(feats, other, ma, mb, params).data.tobytes() == \
            video_logits(cloud, params).data.tobytes()
    batch = collate(clouds)
    feats, segs = forward_features(batch, params)
    pooled = head(segment_max_pool(feats, segs), params).data.tobytes() == video_logits(batch, params).data.tobytes()
    report(7, switched == 100 and lam_one == 100 and pooled,
           f"switch equal on {switched}/100 clips, batched {pooled}, lambda=1 equal on {lam_one}/100")


# --- 8: localization ----------------------------------------------------------------

@pytest.mark.slow
def test_weakly_supervised_localization(report, tmp_path):
    train_clips = gen_localization(SynthConfig(num_classes=4, clips_per_class=200), 0)
    test_clips = gen_localization(SynthConfig(num_classes=4, clips_per_class=50), 1)
    cfg = TrainConfig(mode="localization", mixing=True, epochs=60, ckpt_path=str(tmp_path / "loc.skp"))
    start = time.perf_counter()
    params, _ = train(cfg, clips=train_clips)
    elapsed = time.perf_counter() - start
    clouds = build_clouds(test_clips, params.config)
    preds = []
    for i in range(0, len(clouds), 32):
        preds += infer_instance_logits(collate(clouds[i:i + 32]), params)
    metrics = eval_instance_localization(preds, test_clips)
    ok = metrics["accuracy"] >= 0.85 and metrics["mAP"] >= 0.85 and elapsed < 1200
    report(8, ok, f"instance accuracy {metrics['accuracy']:.4f}, mAP {metrics['mAP']:.4f}, "
                  f"60 epochs in {elapsed:.0f} s")


# --- 9: determinism -----------------------------------------------------------------

def test_determinism(report, tmp_path):
    data = tmp_path / "train.jsonl"
    main(["gen-synth", "--classes", "3", "--clips", "8", "--frames", "6", "--out", str(data)])
    blobs = []
    for name in ("a", "b"):
        cfg = TrainConfig(model=ModelConfig(D=16, r=1, alpha=2, C=3), epochs=3, batch_size=8,
                          train_path=str(data), ckpt_path=str(tmp_path / f"{name}.skp"))
        (tmp_path / f"{name}.json").write_text(json.dumps(cfg.to_dict()))
        assert main(["train", "--config", str(tmp_path / f"{name}.json")]) == 0
        blobs.append((tmp_path / f"{name}.skp").read_bytes())
    save_checkpoint(load_checkpoint(tmp_path / "a.skp"), tmp_path / "copy.skp")
    round_trip = (tmp_path / "copy.skp").read_bytes() == blobs[0]
    in_memory = dumps_checkpoint(load_checkpoint(tmp_path / "a.skp")) == blobs[0]
    report(9, blobs[0] == blobs[1] and round_trip and in_memory,
           f"two train runs identical {blobs[0] == blobs[1]}, round trip identical {round_trip and in_memory}")
