"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

The end-to-end criteria (6, 7) train the desk-scale fixture twice and take
about 40 minutes on one CPU core.
"""

import hashlib
import itertools
import json
import time

import numpy as np
import pytest

from conftest import numeric_grad
from test_tensor import UNARY_CASES
from pcdiff import tensor as tn
from pcdiff.cli import main as cli_main
from pcdiff.diffusion import PointCloud, build_schedule, estimate_x0, forward_marginal, forward_step, reverse_step
from pcdiff.io import SHAPE_KINDS, gen_synthetic
from pcdiff.losses import emd_auction, emd_hungarian, loss_chamfer, metric_cd
from pcdiff.pipeline import desk_fixture_config, evaluate, train
from pcdiff.predictors import (ColorNetConfig, ShapeNetConfig, init_color_net, init_shape_net, predict_colors,
                               predict_noise)
from pcdiff.renderer import Camera, RenderConfig, render, render_details
from pcdiff.tensor import ParamStore, Tensor, make_rng


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number} {title}: {'PASS' if ok else 'FAIL'} ({detail})")
    return emit


# -- 1 -----------------------------------------------------------------------------------
def grad_error(analytic, numeric, abs_floor=None):
    """Norm-wise relative error between two gradients."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def _op_errors():
    worst = 0.0
    for kind, fn in UNARY_CASES.items():
        rng = make_rng(len(kind))
        for _ in range(5):
            x = rng.standard_normal((4, 3))
            x[np.abs(x) < 1e-3] += 0.01
            x[np.abs(x - 0.05) < 1e-3] += 0.01
            t = Tensor(x, requires_grad=True)
            fn(t).backward()
            num = numeric_grad(lambda v: float(fn(Tensor(v)).data), x)
            worst = max(worst, grad_error(t.grad, num))
    return worst


def _param_errors(store, loss, names, per_param=8):
    grads = tn.backward(loss(), store)
    worst = 0.0
    for name in names:
        p = store[name]
        base = p.data.copy()
        sel = np.unravel_index(np.arange(0, p.size, max(1, p.size // per_param)), p.shape)

        def f(v):
            d = base.copy()
            d[sel] = v
            p.data = d
            out = float(loss().data)
            p.data = base
            return out

        worst = max(worst, grad_error(grads[name][sel], numeric_grad(f, base[sel])))
    return worst


def _net_errors():
    rng = make_rng(0)
    scfg = ShapeNetConfig(width=32, n_modulated=3, code_dim=8, fourier=6, T=200)
    ccfg = ColorNetConfig(width=32, n_modulated=3, code_dim=8, fourier=6, T=200)
    store = ParamStore()
    init_shape_net(store, scfg, rng)
    init_color_net(store, ccfg, rng)
    for n in ("shape.out.w", "color.out.w"):
        store.set(n, 0.3 * rng.standard_normal(store[n].shape))
    x = rng.standard_normal((8, 3))
    code = rng.standard_normal(8)
    probe = rng.standard_normal((8, 3))
    e1 = _param_errors(store, lambda: (predict_noise(x, 77, code, store, scfg) * probe).sum(),
                       store.subset("shape.").names())
    e2 = _param_errors(store, lambda: (predict_colors(x, code, store, ccfg, t=77) * probe).sum(),
                       store.subset("color.").names())
    return max(e1, e2)


def _renderer_errors():
    rng = make_rng(41)
    pts = rng.standard_normal((20, 3)) * 0.5
    cols = rng.uniform(0.1, 0.9, size=(20, 3))
    cam = Camera((0.0, 0.0, 3.0), (0.0, 0.0, 0.0), fov=np.deg2rad(50.0), width=4, height=4)
    cfg = RenderConfig(near=1.5, far=4.5, n_samples=16, k=4, mask_radius=0.4)
    probe = rng.standard_normal((4, 4, 3))
    store = ParamStore({"p": pts, "c": cols})
    grads = tn.backward((render(store["p"], store["c"], cam, cfg) * probe).sum(), store)
    nc = numeric_grad(lambda v: float((render(pts, v, cam, cfg) * probe).sum().data), cols)
    npos = numeric_grad(lambda v: float((render(v, cols, cam, cfg) * probe).sum().data), pts, h=1e-7)
    return max(grad_error(grads["c"], nc), grad_error(grads["p"], npos))


def test_criterion_1_gradient_correctness(report):
    start = time.perf_counter()
    assert set(tn.OPS) <= set(UNARY_CASES)
    ops, nets, rend = _op_errors(), _net_errors(), _renderer_errors()
    elapsed = time.perf_counter() - start
    ok = ops < 1e-3 and nets < 1e-3 and rend < 1e-2 and elapsed < 60
    report(1, "gradient correctness", ok,
           f"ops {ops:.2e}, predictors {nets:.2e}, renderer {rend:.2e}, {elapsed:.1f}s")
    assert ok


# -- 2 -----------------------------------------------------------------------------------
def test_criterion_2_forward_process_fidelity(report):
    sched = build_schedule(200, 1e-4, 0.05)
    rng = make_rng(2)
    paths = 10_000
    x0 = np.array([0.7, -1.2, 0.3])
    worst = 0.0
    for t_end in (1, 50, 100, 200):
        x = PointCloud(np.tile(x0, (paths, 1)))
        for t in range(1, t_end + 1):
            x = forward_step(x, t, sched, rng.standard_normal((paths, 3)))
        ab = sched.alpha_bar[t_end - 1]
        mean, var = np.sqrt(ab) * x0, 1.0 - ab
        se_mean = np.sqrt(var / paths)
        se_var = var * np.sqrt(2.0 / (paths - 1))
        z_mean = np.abs(x.positions.mean(axis=0) - mean) / se_mean
        z_var = np.abs(x.positions.var(axis=0, ddof=1) - var) / se_var
        worst = max(worst, z_mean.max(), z_var.max())
    ok = worst < 4.0 and sched.alpha_bar[-1] < 0.01
    report(2, "forward-process fidelity", ok,
           f"max deviation {worst:.2f} SE, alpha_bar[200]={sched.alpha_bar[-1]:.5f}")
    assert ok


# -- 3 -----------------------------------------------------------------------------------
def test_criterion_3_inversion_identities(report):
    sched = build_schedule(200, 1e-4, 0.05)
    rng = make_rng(3)
    x0 = PointCloud(rng.standard_normal((256, 3)))
    roundtrip = 0.0
    for t in range(1, 201):
        n = rng.standard_normal((256, 3))
        xt = forward_marginal(x0, t, sched, n)
        roundtrip = max(roundtrip, np.abs(estimate_x0(xt, n, t, sched).positions - x0.positions).max())
    n = rng.standard_normal((256, 3))
    x1 = forward_marginal(x0, 1, sched, n)
    rev1 = np.abs(reverse_step(x1, n, 1, sched, rng.standard_normal((256, 3))).positions - x0.positions).max()
    x = PointCloud(rng.standard_normal((256, 3)))
    for t in range(200, 0, -1):
        ab = sched.alpha_bar[t - 1]
        eps = (x.positions - np.sqrt(ab) * x0.positions) / np.sqrt(1 - ab)
        x = reverse_step(x, eps, t, sched, rng.standard_normal((256, 3)) if t > 1 else None)
    cd = metric_cd(x, x0)
    ok = roundtrip < 1e-10 and rev1 < 1e-12 and cd < 1e-3
    report(3, "inversion identities", ok, f"round trip {roundtrip:.1e}, t=1 step {rev1:.1e}, oracle chain CD {cd:.1e}")
    assert ok


# -- 4 -----------------------------------------------------------------------------------
def _chamfer_loop(a, b):
    ab = sum(min(sum((x[i] - y[i]) ** 2 for i in range(3)) for y in b) for x in a) / len(a)
    ba = sum(min(sum((x[i] - y[i]) ** 2 for i in range(3)) for x in a) for y in b) / len(b)
    return ab + ba


def test_criterion_4_metric_oracles(report):
    rng = make_rng(4)
    perms = np.array(list(itertools.permutations(range(8))))
    worst_rel = 0.0
    worst_exact = 0.0
    for _ in range(50):
        a, b = rng.standard_normal((8, 3)), rng.standard_normal((8, 3))
        cost = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1))
        brute = cost[np.arange(8), perms].mean(axis=1).min()
        hung = emd_hungarian(a, b)
        worst_exact = max(worst_exact, abs(hung - brute))
        worst_rel = max(worst_rel, abs(emd_auction(a, b) - brute) / brute)
    cham = 0.0
    for _ in range(10):
        a, b = rng.standard_normal((16, 3)), rng.standard_normal((16, 3))
        ref = _chamfer_loop(a, b)
        cham = max(cham, abs(metric_cd(a, b) - ref), abs(float(loss_chamfer(a, b).data) - ref))
    ok = worst_rel < 0.01 and worst_exact < 1e-12 and cham < 1e-12
    report(4, "metric oracles", ok,
           f"auction vs brute {worst_rel:.1e} rel, hungarian vs brute {worst_exact:.1e}, chamfer {cham:.1e}")
    assert ok


# -- 5 -----------------------------------------------------------------------------------
def test_criterion_5_renderer_conservation(report):
    rng = make_rng(5)
    pts = rng.standard_normal((300, 3)) * 0.7
    cols = rng.uniform(size=(300, 3))
    cam = Camera((0.3, 0.8, 4.5), (0.0, 0.0, 0.0), fov=np.deg2rad(45.0), width=40, height=25)
    det = render_details(pts, cols, cam, RenderConfig(near=2.5, far=6.5, n_samples=32, k=8, mask_radius=0.3,
                                                      jitter=True), rng=rng)
    tau = det.transmittance
    checks = {
        "tau1": bool(np.all(tau[:, 0] == 1.0)),
        "monotone": bool(np.all(np.diff(tau, axis=1) <= 0.0)),
        "weights": bool(np.all(det.weights.sum(axis=1) <= 1.0 + 1e-12)),
        "pixels": bool(np.all((det.image.data >= 0.0) & (det.image.data <= 1.0))),
    }
    ln2 = np.log(2.0)
    color = np.array([[0.9, 0.3, 0.6]])
    one = render_details(np.array([[0.0, 0.0, -2.0]]), color,
                         Camera((0.0, 0.0, 0.0), (0.0, 0.0, -1.0), width=1, height=1, fov=np.deg2rad(1.0)),
                         RenderConfig(near=1.0 - ln2 / 2, far=1.0 + ln2 / 2, n_samples=1, k=1, mask_radius=1.5,
                                      background=(0.0, 0.0, 0.0)))
    closed = float(np.abs(one.image.data.reshape(3) - 0.5 * color[0]).max())
    ok = all(checks.values()) and tau.shape[0] == 1000 and closed < 1e-12
    report(5, "renderer conservation", ok, f"{tau.shape[0]} rays {checks}, ln2 case error {closed:.1e}")
    assert ok


# -- 6 / 7 -------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def fixture_runs():
    dataset = [gen_synthetic(kind, 256, seed=i) for i, kind in enumerate(SHAPE_KINDS)]
    runs = {}
    for arm, disable in (("rgb", False), ("no_rgb", True)):
        cfg = desk_fixture_config(disable_rgb=disable)
        start = time.perf_counter()
        result = train(cfg, dataset)
        elapsed = time.perf_counter() - start
        rows, preds = evaluate(result.model, dataset)
        mse = []
        for p, s in zip(preds, dataset):
            img = render(p.positions, p.colors, s.camera, s.render_config()).data
            mse.append(float(((img - s.image.rgb) ** 2).mean()))
        runs[arm] = {"cfg": cfg, "seconds": elapsed, "rows": rows, "mse": mse}
    return runs


@pytest.mark.slow
def test_criterion_6_desk_scale_end_to_end(report, fixture_runs):
    run = fixture_runs["rgb"]
    cds = [r["cd"] for r in run["rows"][:-1]]
    cfg = run["cfg"]
    ok = (cfg.steps <= 5000 and run["seconds"] <= 45 * 60 and cfg.render_stride == 4
          and all(c < 0.05 for c in cds) and all(m < 0.02 for m in run["mse"]))
    detail = ", ".join(f"{r['name']} CD {r['cd']:.4f} MSE {m:.4f}" for r, m in zip(run["rows"], run["mse"]))
    report(6, "desk-scale end-to-end", ok, f"{detail}; {cfg.steps} steps in {run['seconds'] / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_7_ablation_direction(report, fixture_runs):
    with_rgb = fixture_runs["rgb"]["rows"][-1]["cd"]
    without = fixture_runs["no_rgb"]["rows"][-1]["cd"]
    ok = with_rgb <= without
    report(7, "ablation direction", ok, f"mean CD with L_rgb {with_rgb:.4f}, without {without:.4f}")
    assert ok


# -- 8 -----------------------------------------------------------------------------------
def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _run_all_subcommands(root):
    data = root / "data"
    assert cli_main(["gen-data", "--out", str(data), "--n-points", "64"]) == 0
    cfg = {"steps": 8, "batch_size": 2, "channels": [4, 8], "code_dim": 8, "width": 16, "render_res": 16,
           "log_every": 0, "seed": 7, "data_dir": str(data)}
    (root / "cfg.json").write_text(json.dumps(cfg))
    ckpt = root / "m.pcdm"
    assert cli_main(["train", "--config", str(root / "cfg.json"), "--out", str(ckpt)]) == 0
    assert cli_main(["reconstruct", "--ckpt", str(ckpt), "--image", str(data / "cube.png"),
                     "--scene", str(data / "cube.json"), "--out", str(root / "cube_pred.ply")]) == 0
    assert cli_main(["render", "--scene", str(data / "cube.json"), "--cloud", str(root / "cube_pred.ply"),
                     "--out", str(root / "cube_pred.png")]) == 0
    assert cli_main(["eval", "--data", str(data), "--ckpt", str(ckpt), "--report", str(root / "report.csv")]) == 0


def test_criterion_8_determinism(report, tmp_path, capsys):
    import shutil

    root = tmp_path / "run"
    _run_all_subcommands(root)
    first = _digest(root)
    files = sum(1 for p in root.rglob("*") if p.is_file())
    shutil.rmtree(root)
    _run_all_subcommands(root)
    capsys.readouterr()
    ok = _digest(root) == first
    report(8, "determinism", ok, f"{files} output files of gen-data/train/reconstruct/render/eval, "
           f"{'byte-identical' if ok else 'different'} across two runs")
    assert ok
