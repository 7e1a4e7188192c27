import json

import numpy as np
import pytest

from diffhpe.cli import main
from diffhpe.metrics import read_table

TINY = dict(mode="diffhpe_2d", batch_size=8, learning_rate=2e-3, dropout=0.0, epochs=2, num_blocks=2, channels=8,
            time_embedding_dim=16, seq_len=9, stride=9, eval_every=1, selection_split="test")


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "ds"), "--seed", "3", "--num-tracks", "4", "--track-length", "27",
                 "--skeleton", "mini5", "--test-fraction", "0.25"]) == 0
    cfg = root / "train.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["train", "--config", str(cfg), "--dataset", str(root / "ds"), "--out", str(root / "run")]) == 0
    wcfg = root / "wrapper.json"
    wcfg.write_text(json.dumps({**TINY, "mode": "diffhpe_wrapper", "backbone_steps": 30, "backbone_feat_dim": 4}))
    assert main(["train", "--config", str(wcfg), "--dataset", str(root / "ds"), "--out", str(root / "wrap")]) == 0
    return root


def _eval(work, out, *extra):
    args = ["eval", "--checkpoint", str(work / "run" / "checkpoint.ckpt"), "--dataset", str(work / "ds"),
            "--out", str(work / out), *extra]
    assert main(args) == 0
    return json.loads((work / out / "eval.json").read_text())


def test_gen_data_files(work):
    names = sorted(p.name for p in (work / "ds").iterdir())
    assert "manifest.json" in names and len([n for n in names if n.endswith(".f32")]) == 8


def test_gen_data_byte_identical(work, tmp_path):
    main(["gen-data", "--out", str(tmp_path / "again"), "--seed", "3", "--num-tracks", "4", "--track-length", "27",
          "--skeleton", "mini5", "--test-fraction", "0.25"])
    for f in (work / "ds").iterdir():
        assert f.read_bytes() == (tmp_path / "again" / f.name).read_bytes()


def test_gen_data_config_file(tmp_path):
    cfg = tmp_path / "g.json"
    cfg.write_text(json.dumps({"num_tracks": 2, "track_length": 12, "skeleton": "mini5", "seed": 1}))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d"), "--num-tracks", "3"]) == 0
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert len(m["tracks"]) == 3 and m["tracks"][0]["frames"] == 12


def test_gen_data_detection_noise(work, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "noisy"), "--seed", "3", "--num-tracks", "4", "--track-length",
                 "27", "--skeleton", "mini5", "--test-fraction", "0.25", "--detection-noise", "4"]) == 0
    from diffhpe.data import load_dataset

    clean, noisy = load_dataset(work / "ds"), load_dataset(tmp_path / "noisy")
    diff = np.concatenate([(a.x2d - b.x2d).ravel() for a, b in zip(noisy.tracks, clean.tracks)])
    assert 3.0 < diff.std() < 5.0
    assert all(np.array_equal(a.x3d, b.x3d) for a, b in zip(noisy.tracks, clean.tracks))


def test_gen_data_zero_tracks_usage_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--out", str(tmp_path / "d"), "--num-tracks", "0"])
    assert e.value.code == 2


def test_gen_data_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "--out", str(blocker / "sub"), "--num-tracks", "1", "--track-length", "5"]) == 1


def test_train_outputs(work):
    names = sorted(p.name for p in (work / "run").iterdir())
    assert names == ["checkpoint.ckpt", "config.json", "train_log.jsonl"]


def test_train_missing_dataset(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["train", "--config", str(cfg), "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 1
    assert "dataset not found" in capsys.readouterr().err


def test_train_resume_continues_epochs(work, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**TINY, "epochs": 3}))
    ck = work / "run" / "checkpoint.ckpt"
    out = tmp_path / "resumed"
    import shutil

    shutil.copytree(work / "run", out)
    assert main(["train", "--config", str(cfg), "--dataset", str(work / "ds"), "--out", str(out),
                 "--resume", str(out / "checkpoint.ckpt")]) == 0
    epochs = [json.loads(l)["epoch"] for l in (out / "train_log.jsonl").read_text().splitlines()]
    assert epochs == [1, 2, 3]
    assert ck.exists()


def test_eval_records_h(work):
    one = _eval(work, "e1", "--hypotheses", "1")
    five = _eval(work, "e5", "--hypotheses", "5")
    assert one["H"] == 1 and five["H"] == 5
    assert read_table(work / "e5" / "eval.csv")[0]["H"] == 5


def test_eval_pattern_none_equals_default(work):
    assert _eval(work, "a", "--pattern", "none") == _eval(work, "b")


def test_eval_deterministic(work):
    a = _eval(work, "d1", "--pattern", "random", "--seed", "4")
    b = _eval(work, "d2", "--pattern", "random", "--seed", "4")
    assert a == b
    assert (work / "d1" / "eval.csv").read_bytes() == (work / "d2" / "eval.csv").read_bytes()


def test_eval_oracle(work):
    assert main(["eval", "--model", "oracle", "--dataset", str(work / "ds"), "--out", str(work / "o"),
                 "--seq-len", "9"]) == 0
    rep = json.loads((work / "o" / "eval.json").read_text())
    assert rep["mpjpe_mm"] == 0.0
    from diffhpe.data import load_dataset, stack_clips
    from diffhpe.metrics import symmetry_gap, temporal_std

    ds = load_dataset(work / "ds")
    _, x3d = stack_clips(ds.clips("test", 9, 9))
    assert rep["symmetry_gap_mm"] == pytest.approx(1000 * symmetry_gap(x3d, ds.skeleton), rel=1e-12)
    assert rep["temporal_std_mm"] == pytest.approx(1000 * temporal_std(x3d, ds.skeleton), rel=1e-12)
    # zero up to the float32 rounding of the stored arrays
    assert rep["symmetry_gap_mm"] < 1e-3 and rep["temporal_std_mm"] < 1e-3


def test_eval_backbone_of_wrapper(work):
    assert main(["eval", "--model", "backbone", "--checkpoint", str(work / "wrap" / "checkpoint.ckpt"),
                 "--dataset", str(work / "ds"), "--out", str(work / "bb")]) == 0
    assert json.loads((work / "bb" / "eval.json").read_text())["H"] == 1


def test_eval_missing_checkpoint(work, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--dataset", str(work / "ds"),
                 "--out", str(tmp_path)]) == 1


def test_sample(work):
    assert main(["sample", "--checkpoint", str(work / "run" / "checkpoint.ckpt"), "--dataset", str(work / "ds"),
                 "--out", str(work / "s"), "--hypotheses", "3", "--num-clips", "2"]) == 0
    hyp = np.load(work / "s" / "hypotheses.npy")
    assert hyp.shape == (3, 2, 9, 5, 3)
    np.testing.assert_allclose(np.load(work / "s" / "aggregate.npy"), hyp.mean(0))


def _manifest(work, path, checkpoints, **kw):
    path.write_text(json.dumps({"dataset": str(work / "ds"), "checkpoints": checkpoints, **kw}))
    return path


def test_matrix_single_cell_equals_eval(work):
    ck = str(work / "run" / "checkpoint.ckpt")
    man = _manifest(work, work / "m1.json", {"none": ck},
                    methods={"diffusion": {"source": "diffusion", "checkpoints": {"none": ck}}})
    assert main(["occlusion-matrix", "--config", str(man), "--out", str(work / "m1"), "--hypotheses", "5"]) == 0
    cell = read_table(work / "m1" / "reports.csv")
    rep = _eval(work, "m1e")
    assert len(cell) == 1 and cell[0]["mpjpe_mm"] == pytest.approx(rep["mpjpe_mm"], rel=1e-12)


def test_matrix_self_difference_zero(work):
    ck = str(work / "wrap" / "checkpoint.ckpt")
    methods = {"a": {"source": "diffusion", "checkpoints": {"none": ck}},
               "b": {"source": "diffusion", "checkpoints": {"none": ck}}}
    man = _manifest(work, work / "m2.json", None, methods=methods, baseline="a", candidate="b")
    assert main(["occlusion-matrix", "--config", str(man), "--out", str(work / "m2"), "--hypotheses", "1",
                 "--pattern", "none", "random"]) == 0
    lines = (work / "m2" / "difference_mpjpe_mm.csv").read_text().splitlines()
    assert lines[0] == "train\\test,none,random"
    assert [float(v) for v in lines[1].split(",")[1:]] == [0.0, 0.0]


def test_matrix_five_by_five(work):
    pats = ["none", "random", "random_leg_arm", "consecutive_leg", "consecutive_frames"]
    ck = str(work / "wrap" / "checkpoint.ckpt")
    man = _manifest(work, work / "m5.json", {p: ck for p in pats}, test_patterns=pats, hypotheses=1,
                    metrics=["mpjpe_mm"])
    # 9-frame clips cannot hold the 10-frame default leg span; evaluate on full 27-frame tracks
    assert main(["occlusion-matrix", "--config", str(man), "--out", str(work / "m5"), "--seq-len", "27"]) == 0
    rows = read_table(work / "m5" / "reports.csv")
    assert len(rows) == 2 * 25
    for name in ("matrix_backbone_mpjpe_mm.csv", "matrix_diffusion_mpjpe_mm.csv", "difference_mpjpe_mm.csv",
                 "heatmap_backbone_mpjpe_mm.png", "heatmap_diffusion_mpjpe_mm.png", "difference_mpjpe_mm.png"):
        assert (work / "m5" / name).stat().st_size > 0
    diff = np.loadtxt(work / "m5" / "difference_mpjpe_mm.csv", delimiter=",", skiprows=1, usecols=range(1, 6))
    bb = np.loadtxt(work / "m5" / "matrix_backbone_mpjpe_mm.csv", delimiter=",", skiprows=1, usecols=range(1, 6))
    df = np.loadtxt(work / "m5" / "matrix_diffusion_mpjpe_mm.csv", delimiter=",", skiprows=1, usecols=range(1, 6))
    np.testing.assert_allclose(diff, bb - df)


def test_matrix_rejects_unknown_pattern(work):
    man = _manifest(work, work / "bad.json", {"blur": str(work / "run" / "checkpoint.ckpt")})
    with pytest.raises(SystemExit):
        main(["occlusion-matrix", "--config", str(man), "--out", str(work / "bad")])
