import numpy as np
import pytest

from pcdiff.diffusion import PointCloud
from pcdiff.io import gen_synthetic
from pcdiff.pipeline import (Model, TrainConfig, TrainingError, downsample, evaluate_clouds, format_report,
                             reconstruct, train, train_step, write_report)
from pcdiff.tensor import ContractError, make_rng

TINY = dict(channels=(4, 8), code_dim=8, width=16, render_res=16, log_every=0, batch_size=2)


@pytest.fixture(scope="module")
def data():
    return [gen_synthetic(k, 48, seed=i) for i, k in enumerate(("sphere", "cube"))]


def test_step0_geo_loss_is_unit_variance(data):
    model = Model(TrainConfig(**TINY))
    vals = []
    rng = make_rng(0)
    for step in range(40):
        parts, inputs = train_step(model, data, rng, 1)
        vals.append(parts.values()["geo"])
        np.testing.assert_array_equal(model.noise(inputs["x0"][0], 5, np.zeros(8)).data, 0.0)
    # zero-initialized noise head: L_geo = mean eps^2
    assert np.mean(vals) == pytest.approx(1.0, abs=0.05)


def test_disable_rgb_skips_render(data):
    parts, _ = train_step(Model(TrainConfig(**TINY, disable_rgb=True)), data, make_rng(0), 0)
    assert parts.values()["rgb"] == 0.0
    parts, _ = train_step(Model(TrainConfig(**TINY)), data, make_rng(0), 0)
    v = parts.values()
    assert v["rgb"] > 0.0
    assert v["total"] == pytest.approx(v["geo"] + v["cham"] + v["rgb"], rel=1e-12)


def test_training_is_deterministic(data):
    cfg = TrainConfig(**TINY, steps=5)
    a, b = train(cfg, data), train(cfg, data)
    assert [x["total"] for x in a.losses] == [x["total"] for x in b.losses]
    for name, t in a.model.store.items():
        assert t.data.tobytes() == b.model.store[name].data.tobytes()


def test_resume_reproduces_uninterrupted_trace(data, tmp_path):
    cfg = TrainConfig(**TINY, steps=8)
    full = train(cfg, data)
    first = train(cfg, data, out=tmp_path / "half.pcdm", stop_at=4)
    rest = train(cfg, data, resume=tmp_path / "half.pcdm")
    assert [x["total"] for x in first.losses + rest.losses] == [x["total"] for x in full.losses]
    for name, t in full.model.store.items():
        assert t.data.tobytes() == rest.model.store[name].data.tobytes()


def test_resume_rejects_architecture_mismatch(data, tmp_path):
    train(TrainConfig(**TINY, steps=1), data, out=tmp_path / "m.pcdm")
    other = dict(TINY, width=32)
    with pytest.raises(ContractError, match="width"):
        train(TrainConfig(**other, steps=2), data, resume=tmp_path / "m.pcdm")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts_with_dump(data, tmp_path):
    cfg = TrainConfig(**TINY, steps=3, lr=1e300)
    with pytest.raises(TrainingError, match="non-finite"):
        train(cfg, data, out=tmp_path / "m.pcdm")
    assert list(tmp_path.glob("m.pcdm.diag-*.npz"))


def test_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(batch_size=0)
    with pytest.raises(ContractError):
        TrainConfig(w_rgb=-1.0)
    with pytest.raises(ContractError, match="unknown"):
        TrainConfig.from_dict({"stepz": 3})
    cfg = TrainConfig(**TINY)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_reconstruct_contract_and_determinism(data):
    model = Model(TrainConfig(**TINY))
    a = reconstruct(model, data[0].image, seed=3, trace_stride=50, n_points=40)
    b = reconstruct(model, data[0].image, seed=3, trace_stride=50, n_points=40)
    assert a.final.positions.tobytes() == b.final.positions.tobytes()
    assert a.final.n_points == 40 and a.final.colors is not None
    assert np.all((a.final.colors > 0) & (a.final.colors < 1))
    assert a.steps == [150, 100, 50, 0]
    assert all(c.colors is None for c in a.clouds)
    with pytest.raises(ContractError):
        reconstruct(model, np.zeros((32, 32, 3)))


def test_reconstruct_with_oracle_noise_recovers_cloud(data):
    model = Model(TrainConfig(**TINY))
    x0 = data[0].cloud.positions
    sched = model.schedule

    def oracle(x, t):
        ab = sched.alpha_bar[t - 1]
        return (x - np.sqrt(ab) * x0) / np.sqrt(1 - ab)

    out = reconstruct(model, data[0].image, seed=1, n_points=x0.shape[0], noise_fn=oracle)
    from pcdiff.losses import metric_cd
    assert metric_cd(out.final, x0) < 1e-3


def test_evaluate_rows_and_identity(data, tmp_path):
    clouds = [s.cloud for s in data]
    rows = evaluate_clouds(["a", "b"], clouds, clouds)
    assert len(rows) == 3 and rows[-1]["name"] == "mean"
    assert all(r["cd"] == 0.0 and r["emd"] == 0.0 for r in rows)
    rng = make_rng(0)
    preds = [PointCloud(c.positions + 0.05 * rng.standard_normal(c.positions.shape)) for c in clouds]
    rows = evaluate_clouds(["a", "b"], preds, clouds)
    assert abs(rows[-1]["cd"] - (rows[0]["cd"] + rows[1]["cd"]) / 2) < 1e-9
    write_report(tmp_path / "r.csv", rows)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "name,cd_x1e3,emd_x1e2" and len(lines) == 4
    assert float(lines[1].split(",")[1]) == pytest.approx(rows[0]["cd"] * 1e3, abs=1e-6)
    assert format_report(rows) == (tmp_path / "r.csv").read_text()
    with pytest.raises(ContractError):
        evaluate_clouds([], [], [])


def test_downsample_box_filter():
    img = np.arange(4 * 4 * 3, dtype=float).reshape(4, 4, 3)
    out = downsample(img, 2)
    np.testing.assert_allclose(out[0, 0], img[:2, :2].mean(axis=(0, 1)))
    with pytest.raises(ContractError):
        downsample(img, 3)
