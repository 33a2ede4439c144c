import math
import os
from pathlib import Path

import numpy as np
import pytest

fpqlab = pytest.importorskip("fpqlab")

DATA_ROOT = Path(os.environ.get("FPQ_DATA_ROOT", Path(__file__).resolve().parents[2] / "data"))


def test_fake_quantize_rounds_half_to_even_and_clips():
    # s = 0.5 is exact, so x / s lands exactly on the .5 ties.
    x = np.array([0.25, 0.75, 1.25, 0.3, 100.0, -1.0], dtype=np.float32)
    out = fpqlab.fake_quantize(x, scale=[0.5], zero_point=[0], bits=4)
    assert out.dtype == np.float32
    assert out.tolist() == [0.0, 1.0, 1.0, 0.5, 7.5, 0.0]


def test_fake_quantize_is_idempotent():
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, size=(4, 50)).astype(np.float32)
    q = fpqlab.fake_quantize(x, scale=[0.05, 0.1, 0.2, 0.3], zero_point=[3, 7, 0, 15], bits=4)
    assert np.array_equal(fpqlab.fake_quantize(q, scale=[0.05, 0.1, 0.2, 0.3], zero_point=[3, 7, 0, 15], bits=4), q)


def test_calibrate_maps_the_range_onto_the_grid():
    cal = fpqlab.calibrate(np.array([-1.0, 0.3, 1.0, -0.2], dtype=np.float32), bits=4)
    assert cal["scale"][0] == pytest.approx(2.0 / 15.0, rel=1e-6)
    assert len(cal["zero_point"]) == 1
    assert cal["warnings"] == []


def test_uniform_delta_support_and_variance():
    d = fpqlab.uniform_delta([200000], s=0.3, seed=1)
    assert d.min() >= -0.15 and d.max() <= 0.15
    assert d.var() == pytest.approx(0.3**2 / 12, rel=0.02)


def test_standardize_and_csd_hand_values():
    z = np.array([[1.0], [2.0], [3.0]], dtype=np.float32)
    assert fpqlab.standardize(z, eps=1e-12)[:, 0].tolist() == pytest.approx([-1.2247449, 0.0, 1.2247449], abs=1e-5)
    loss = fpqlab.csd_loss([z[::-1].copy()], [z], eps=1e-12)
    assert loss == pytest.approx(12.0, rel=1e-5)
    assert fpqlab.csd_loss([z], [z]) == 0.0


def test_square_fixture_bias():
    report = fpqlab.accumulated_bias("square", s=0.4, p=1.0, trials=10000, seed=3)
    assert abs(report["output_bias"] - 0.2**2 / 3) < 3 * report["output_stderr"]


def test_config_round_trip_and_errors():
    cfg = fpqlab.Config(lr=0.02, csd=False, wbits=2)
    assert cfg["optim.lr"] == "0.02"
    assert cfg["csd"] == "false"
    cfg["fpq.p"] = 0.3
    assert cfg.to_dict()["fpq.p"] == "0.3"
    assert len(cfg.hash()) == 64
    assert "optim.lr" in fpqlab.Config.keys()
    with pytest.raises(fpqlab.ConfigError, match="learning_rate"):
        cfg["learning_rate"] = 1
    cfg["p"] = 1.5
    with pytest.raises(fpqlab.ConfigError, match=r"p in \[0, 1\]"):
        cfg.validate()


def test_errors_share_a_base_class():
    assert issubclass(fpqlab.ConfigError, fpqlab.Error)
    with pytest.raises(fpqlab.Error):
        fpqlab.uniform_delta([3], s=-1.0)


@pytest.mark.skipif(not (DATA_ROOT / "mnist").is_dir(), reason="MNIST subset not present")
def test_tiny_training_run(tmp_path):
    cfg = fpqlab.Config(
        data_root=str(DATA_ROOT),
        train_subset=300,
        width=4,
        epochs=1,
        teacher_epochs=1,
        trace_every_epochs=0,
        stability_trials=2,
        stability_samples=16,
    )
    student, summary = fpqlab.train(cfg)
    assert summary["epochs"] == 1
    assert 0.0 <= summary["test_accuracy"] <= 1.0
    assert math.isfinite(summary["train_loss"])
    assert student.quantized

    path = tmp_path / "student.ckpt"
    student.save(str(path))
    loaded = fpqlab.Model.load(str(path))
    x = np.zeros((2, 1, 28, 28), dtype=np.float32)
    assert np.array_equal(loaded(x), student(x))
    assert loaded.zero_point_digest == student.zero_point_digest
    assert fpqlab.evaluate(loaded, cfg) == pytest.approx(summary["test_accuracy"])
