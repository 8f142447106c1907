import numpy as np
import pytest

import depthseq as ds


def small_model_config():
    return {
        "encoder_channels": [4, 4, 4],
        "d_model": 8,
        "n_heads": 2,
        "n_layers": 1,
        "d_max": 24,
    }


def test_volume_roundtrip(tmp_path):
    arr = np.arange(4 * 3 * 2, dtype=np.float32).reshape(4, 3, 2)
    v = ds.Volume(arr, spacing=(0.5, 0.5, 1.0))
    assert v.dims == [4, 3, 2]
    assert v.validate() == []
    np.testing.assert_array_equal(v.to_numpy(), arr)
    p = tmp_path / "v.dstvol"
    ds.save_volume(v, p)
    back = ds.load_volume(p)
    assert back == v
    assert back.spacing == [0.5, 0.5, 1.0]


def test_load_missing_file_raises_value_error(tmp_path):
    with pytest.raises(ValueError):
        ds.load_volume(tmp_path / "absent.dstvol")


def test_phantom_and_hemispheres():
    case = ds.generate_phantom(3)
    vol = case["volume"]
    assert vol.dims == [32, 32, 24]
    z = case["landmarks"]
    assert len(z) == 6
    assert z[0] <= z[1] <= z[2] and z[3] <= z[4] <= z[5]
    halves = ds.separate_hemispheres(vol)
    left, right = halves["left"], halves["right"]
    assert left.shape == (32, 32, 24)
    assert not np.any(left & right)
    assert left.sum() > 0 and right.sum() > 0

    labels = ds.assign_segments(case["calc_mask"], z, left, right)
    calc = case["calc_mask"].astype(bool)
    assert np.all(labels[~calc] == 0)
    assert np.all((labels[calc] >= 1) & (labels[calc] <= 8))


def test_metrics():
    assert ds.quadratic_weighted_kappa([[5, 0], [0, 5]]) == pytest.approx(1.0)
    a = np.zeros((4, 4, 4), dtype=np.uint8)
    a[:2] = 1
    b = np.zeros_like(a)
    b[1:3] = 1
    assert ds.dice(a, b) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        ds.quadratic_weighted_kappa([[1, 0]])


def test_flops_and_model():
    cfg = small_model_config()
    f = ds.estimate_flops(cfg, (32, 32, 24))
    assert f["total"] > 0
    m = ds.init_model(cfg, seed=1)
    assert m.parameter_count > 0
    assert ds.model_config(m)["d_model"] == 8
    case = ds.generate_phantom(0)
    z, probs = ds.infer(m, case["volume"])
    assert len(z) == 6
    assert probs.shape == (6, 24)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_checkpoint_roundtrip(tmp_path):
    m = ds.init_model(small_model_config(), seed=2)
    p = tmp_path / "m.ckpt"
    ds.save_checkpoint(m, p, seed=2)
    back = ds.load_checkpoint(p)
    np.testing.assert_array_equal(back.parameter("head.loc.weight"), m.parameter("head.loc.weight"))


def test_invalid_config_raises():
    with pytest.raises(ValueError):
        ds.init_model({"d_model": 7, "n_heads": 2})


def test_folds():
    plan = ds.make_folds([f"c{i}" for i in range(20)], k=5, seed=0)
    assert len(plan) == 5
    for f in plan:
        assert len(f["test"]) == 4 and len(f["val"]) == 2 and len(f["train"]) == 14


def test_train_and_evaluate(tmp_path):
    manifest = ds.write_cohort(10, tmp_path / "data", dims=(16, 16, 24))
    cfg = {
        "model": {"encoder_channels": [4, 8, 8], "d_model": 16, "n_heads": 2, "d_max": 24},
        "max_epochs": 2,
        "patience": 2,
    }
    report, model = ds.train(cfg, manifest, tmp_path / "best.ckpt")
    assert report["epochs_run"] == 2
    assert len(report["train_loss"]) == 2
    assert (tmp_path / "best.ckpt").exists()
    ev = ds.evaluate(model, manifest)
    assert ev["metrics"]["aggregate"]["mae"] >= 0.0
    assert len(ev["cases"]) == 2


def test_divergence_raises(tmp_path):
    manifest = ds.write_cohort(10, tmp_path / "data", dims=(16, 16, 24))
    cfg = {
        "model": {"encoder_channels": [4, 8, 8], "d_model": 16, "n_heads": 2, "d_max": 24},
        "lr": 1e300,
        "max_epochs": 2,
    }
    with pytest.raises(ArithmeticError):
        ds.train(cfg, manifest)
