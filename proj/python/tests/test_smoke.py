import json

import numpy as np
import pytest

import kpt


def test_splits_and_joint_names():
    names = kpt.joint_names()
    assert len(names) == 16
    d = kpt.builtin_split("d")
    assert len(d["s1"]) == len(d["s2"]) == 8
    assert set(d["s1"]) & set(d["s2"]) == {"r_elbow", "l_elbow", "r_knee", "l_knee"}
    with pytest.raises(ValueError):
        kpt.builtin_split("z")


def test_kernels_match_numpy():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (2, 3, 6, 6))
    k = rng.uniform(-1, 1, (4, 3, 3, 3))
    b = rng.uniform(-1, 1, 4)
    y = kpt.conv2d(x, k, b, stride=1, padding=1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 6, 6))
    for i in range(6):
        for j in range(6):
            ref[:, :, i, j] = np.einsum("nchw,fchw->nf", xp[:, :, i:i + 3, j:j + 3], k) + b
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(kpt.maxpool2(x), x.reshape(2, 3, 3, 2, 3, 2).max(axis=(3, 5)))
    np.testing.assert_array_equal(kpt.upsample_nearest2(x), x.repeat(2, axis=2).repeat(2, axis=3))


def test_dataset_round_trip(tmp_path):
    data = kpt.generate_synthetic(3, 6, 32)
    assert len(data) == 6 and data.resolution == 32
    img = data.image(0)
    assert img.shape == (3, 32, 32) and 0.0 <= img.min() and img.max() <= 1.0
    assert data.pose(0)["joints"].shape == (16, 3)
    data.save(tmp_path / "d")
    back = kpt.load_dataset(tmp_path / "d")
    np.testing.assert_array_equal(back.image(5), data.image(5))
    train, val = data.split(2, 1)
    assert (len(train), len(val)) == (4, 2)


def test_pck_strict_boundary():
    gt = np.zeros((1, 16, 3))
    gt[0, :, :2] = 10.0
    gt[0, 0] = [20.0, 10.0, 1.0]
    gt[0, 1] = [20.0, 10.0, 1.0]
    pred = np.array([[[30.0, 10.0], [29.9, 10.0]]])
    rep = kpt.pck(pred, gt, np.array([20.0]), ["r_ankle", "r_knee"])
    assert rep["metric"] == "PCKh@0.5"
    assert [j["correct"] for j in rep["joints"]] == [0, 1]


def test_network_and_checkpoint(tmp_path):
    arch = {"num_stacks": 2, "depth": 1, "base_channels": 4, "input_resolution": 16,
            "heatmap_resolution": 4, "num_output_channels": 3}
    net = kpt.HourglassNet.build(arch, 7)
    assert net.parameter_count() > 0
    assert any(n.startswith("unit1.head") for n in net.parameter_names())
    net.eval()
    x = np.random.default_rng(1).uniform(0, 1, (2, 3, 16, 16)).astype(np.float32)
    heads = net.forward(x)
    assert [h.shape for h in heads] == [(2, 3, 4, 4)] * 2
    net.save(tmp_path / "n.kpt")
    back = kpt.load_checkpoint(tmp_path / "n.kpt")
    back.eval()
    np.testing.assert_array_equal(back.forward(x)[1], heads[1])
    with pytest.raises(OSError):
        kpt.load_checkpoint(tmp_path / "missing.kpt")


def test_cli_pipeline(tmp_path):
    code, out, _ = kpt.run_cli(["gen-data", "--seed", "2", "--count", "12", "--out", str(tmp_path / "data")])
    assert code == 0 and "12 samples" in out
    cfg = {"run_id": "ri", "dataset": "data", "val_count": 4,
           "experiment": {"mode": "random_init", "split": "d",
                          "training": {"max_epochs": 1, "iterations_per_epoch": 2}}}
    (tmp_path / "ri.json").write_text(json.dumps(cfg))
    code, _, err = kpt.run_cli(["train", "--config", str(tmp_path / "ri.json"), "--out", str(tmp_path / "runs")])
    assert code == 0, err
    code, out, _ = kpt.run_cli(["report", "--runs", str(tmp_path / "runs")])
    assert code == 0 and "Random initialization" in out
    assert kpt.run_cli(["frobnicate"])[0] == 2
