import json
import zipfile

import numpy as np
import pytest
import torch

from diffhpe.checkpoint import CheckpointError, load_arrays, save_arrays
from diffhpe.conditioning import toy_backbone
from diffhpe.data import fit_stats, stack_clips, synthetic_dataset
from diffhpe.metrics import mpjpe
from diffhpe.model import (build_model, evaluate_model, hypothesis_seeds, load_backbone, load_model, occlude,
                           predict, save_backbone, save_model)


@pytest.fixture(scope="module")
def setup():
    from diffhpe.skeleton import load_skeleton

    sk = load_skeleton("mini5")
    ds = synthetic_dataset(2, 4, 18, sk, test_fraction=0.25)
    clips = ds.clips("train", 9, 9)
    stats = fit_stats(clips, sk.root)
    x2d, x3d = stack_clips(clips)
    model = build_model("diffhpe_2d", sk, num_blocks=2, channels=8, time_embedding_dim=16, seed=1)
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in model.denoiser.out_head.parameters():
            p.copy_(0.1 * torch.randn(p.shape, generator=g))
    return sk, stats, x2d, x3d, model.eval()


def test_array_container_roundtrip(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b/c": np.array([1, 2], dtype=">i4"),
              "flag": np.array([True, False])}
    save_arrays(tmp_path / "x.ckpt", arrays, {"k": [1, 2]})
    back, meta = load_arrays(tmp_path / "x.ckpt")
    assert meta == {"k": [1, 2]}
    for k, v in arrays.items():
        np.testing.assert_array_equal(back[k], v)
    with zipfile.ZipFile(tmp_path / "x.ckpt") as zf:
        manifest = json.loads(zf.read("manifest.json"))
    assert manifest["arrays"]["b/c"]["dtype"] == "<i4"
    assert manifest["arrays"]["a"]["shape"] == [2, 3]


def test_container_deterministic_bytes(tmp_path):
    arrays = {"w": np.linspace(0, 1, 10)}
    save_arrays(tmp_path / "a.ckpt", arrays, {})
    save_arrays(tmp_path / "b.ckpt", arrays, {})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_container_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_arrays(tmp_path / "missing.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_arrays(tmp_path / "junk.ckpt")


def test_model_roundtrip_same_predictions(setup, tmp_path):
    sk, stats, x2d, _, model = setup
    save_model(tmp_path / "m.ckpt", model, stats)
    back, stats2, _, meta = load_model(tmp_path / "m.ckpt")
    assert meta["mode"] == "raw2d" and stats2.tracks == stats.tracks
    np.testing.assert_array_equal(predict(model, x2d[:3], stats, H=2, seed=4),
                                  predict(back, x2d[:3], stats2, H=2, seed=4))


def test_best_params_preferred(setup, tmp_path):
    sk, stats, x2d, _, model = setup
    best = {k: torch.zeros_like(v) if k.startswith("out_head") else v.clone()
            for k, v in model.denoiser.state_dict().items()}
    save_model(tmp_path / "m.ckpt", model, stats, best_state=best)
    best_model, *_ = load_model(tmp_path / "m.ckpt", which="best")
    latest, *_ = load_model(tmp_path / "m.ckpt", which="model")
    assert torch.count_nonzero(best_model.denoiser.out_head.weight) == 0
    assert torch.equal(latest.denoiser.out_head.weight, model.denoiser.out_head.weight)


def test_backbone_checkpoint(setup, tmp_path):
    sk, stats, *_ = setup
    bb = toy_backbone(sk, seed=3, feat_dim=4).freeze()
    save_backbone(tmp_path / "b.ckpt", bb, stats)
    back, st = load_backbone(tmp_path / "b.ckpt")
    assert back.frozen and st.tracks == stats.tracks
    for (k, v), (_, w) in zip(bb.state_dict().items(), back.state_dict().items()):
        assert torch.equal(v, w)
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "b.ckpt")


def test_hypothesis_seeds():
    a = hypothesis_seeds(0, 0, 5)
    assert len(set(a)) == 5 and a == hypothesis_seeds(0, 0, 5)
    assert a[:3] != hypothesis_seeds(0, 1, 3) and a[:3] != hypothesis_seeds(1, 0, 3)


def test_predict_shape_and_root(setup):
    sk, stats, x2d, _, model = setup
    hyp = predict(model, x2d[:5], stats, H=3, seed=0, batch_size=2)
    assert hyp.shape == (3, 5, 9, 5, 3)
    np.testing.assert_allclose(hyp[..., sk.root, :], 0.0, atol=1e-12)


def test_predict_independent_of_batch_size(setup):
    _, stats, x2d, _, model = setup
    a = predict(model, x2d[:4], stats, H=2, seed=0, batch_size=4)
    b = predict(model, x2d[:4], stats, H=2, seed=0, batch_size=4)
    np.testing.assert_array_equal(a, b)


def test_aggregate_never_worse_per_clip(setup):
    sk, stats, x2d, x3d, model = setup
    report, hyp = evaluate_model(model, x2d, x3d, stats, H=5, seed=0)
    gt = x3d - x3d[..., :1, :]
    agg = hyp.mean(0)
    for k in range(len(gt)):
        assert mpjpe(agg[k], gt[k]) <= np.mean([mpjpe(h[k], gt[k]) for h in hyp]) + 1e-12
    assert report.mpjpe_mm <= report.mpjpe_hypotheses_mm


def test_evaluate_oracle_needs_no_model(setup):
    sk, _, x2d, x3d, _ = setup
    rep, _ = evaluate_model(None, x2d, x3d, None, what="oracle", skeleton=sk)
    assert rep.mpjpe_mm == 0.0


def test_evaluate_backbone_requires_one(setup):
    _, stats, x2d, x3d, model = setup
    with pytest.raises(ValueError):
        evaluate_model(model, x2d, x3d, stats, what="backbone")
    with pytest.raises(ValueError):
        evaluate_model(model, x2d, x3d, stats, what="magic")


def test_occlude_none_is_identity(setup):
    sk, _, x2d, *_ = setup
    np.testing.assert_array_equal(occlude(x2d, "none", 0, sk), x2d)
    hidden = occlude(x2d, {"pattern": "consecutive_frames", "n": 2}, 0, sk)
    assert ((hidden == 0).all(axis=(2, 3)).sum(axis=1) == 2).all()
