"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[acceptance N] PASS|FAIL: ...`` line (visible even
without ``-s``) and then asserts. Run just these with::

    pytest tests/test_acceptance.py -v
"""

import hashlib
import statistics
import subprocess
import sys
import time

import numpy as np
import pytest

from simdet.detloss import Detection, assign_targets, encode_box, total_loss
from simdet.diffcore import DetectorNet, NetConfig, Tensor, backward, forward, load_weights, save_weights
from simdet.evaluation import average_color_histogram, mean_average_precision
from simdet.geometry import BBox, ciou_grad, ciou_loss
from simdet.harness import run_matrix, run_scheme, scheme_config, segment_digest
from simdet.synthdata import REAL, VIRTUAL, generate_dataset, generate_scene, mosaic, read_annotations, write_annotations

from oracles import brute_force_map, central_difference, flat_grads, network_fd, relative_error, scalar_ciou


@pytest.fixture
def record(capsys):
    def _record(n, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return _record


def test_01_ciou_gradient_fidelity(record):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        p = BBox(*rng.uniform(0.1, 0.9, 2), *rng.uniform(0.05, 0.9, 2))
        g = BBox(*rng.uniform(0.1, 0.9, 2), *rng.uniform(0.05, 0.9, 2))
        # the analytic gradient treats the trade-off weight as a constant
        alpha = ciou_loss(p, g).alpha
        gt = tuple(g.as_array())
        fd = central_difference(lambda x: scalar_ciou(tuple(x), gt, alpha), p.as_array(), 1e-5)
        worst = max(worst, float(relative_error(ciou_grad(p, g), fd, 1e-8).max()))
    elapsed = time.perf_counter() - start
    record(1, worst < 1e-4 and elapsed < 5, f"max rel err {worst:.2e} (< 1e-4) on 100 pairs in {elapsed:.2f}s (< 5s)")


def test_02_closed_form_loss(record):
    S, B, K = 2, 1, 3
    empty = total_loss(Tensor(np.zeros((S, S, B * (5 + K)))), assign_targets([], S, B), lambda_noobj=0.5)
    expected = 0.5 * S * S * B * np.log(2)

    S, B = 4, 2
    gt = [(0, BBox(0.3, 0.3, 0.2, 0.4)), (2, BBox(0.31, 0.33, 0.5, 0.1)), (1, BBox(0.8, 0.6, 0.3, 0.3))]
    grid = assign_targets(gt, S, B)
    pred = np.full((S, S, B * (5 + K)), -30.0)
    for row, col, slot, cls, box in grid.assigned():
        base = slot * (5 + K)
        pred[row, col, base : base + 4] = encode_box(box, S)[2]
        pred[row, col, base + 4] = 30.0
        pred[row, col, base + 5 + cls] = 30.0
    perfect = total_loss(Tensor(pred.astype(np.float32)), grid)
    ok = abs(empty.total - expected) < 1e-5 and abs(empty.total - 1.386294) < 1e-5 and perfect.total < 1e-4
    record(2, ok, f"no-object total {empty.total:.6f} vs {expected:.6f}; perfect total {perfect.total:.2e} (< 1e-4)")


TOY = NetConfig(input_size=16, boxes_per_cell=2, num_classes=2, backbone_channels=(4, 6, 8), neck_channels=8)


def test_03_network_gradient_check(record):
    start = time.perf_counter()
    worst, params = 0.0, 0
    for seed in range(3):
        net = DetectorNet(TOY, seed=seed)
        params = net.num_parameters()
        rng = np.random.default_rng(seed)
        img = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
        target = assign_targets([(0, BBox(0.3, 0.3, 0.4, 0.3)), (1, BBox(0.7, 0.6, 0.2, 0.5))], TOY.grid_size, 2)
        rep = total_loss(forward(net, img), target)
        backward(net, rep.tensor)
        analytic = flat_grads(net)
        net64, img64 = net.astype(np.float64), img.astype(np.float64)
        fd = network_fd(net64, lambda n: total_loss(forward(n, img64), target, alpha=rep.alpha).total)
        # floor at float32 resolution so exactly-zero gradients compare sanely
        worst = max(worst, float(relative_error(analytic, fd, 1e-6).max()))
    elapsed = time.perf_counter() - start
    ok = params <= 2000 and worst < 1e-3 and elapsed < 60
    record(3, ok, f"{params} params, 3 seeds, max rel err {worst:.2e} (< 1e-3) in {elapsed:.1f}s (< 60s)")


def _random_instance(rng):
    K = 3
    dets, gts = [], []
    for _ in range(int(rng.integers(1, 4))):
        g = [(int(rng.integers(0, K)), BBox(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.1, 0.4, 2))) for _ in range(rng.integers(0, 5))]
        d = []
        for _ in range(rng.integers(0, 7)):
            if g and rng.random() < 0.7:
                c, b = g[int(rng.integers(0, len(g)))]
                box = BBox(b.cx + rng.normal(0, 0.05), b.cy + rng.normal(0, 0.05), b.w * rng.uniform(0.7, 1.3), b.h * rng.uniform(0.7, 1.3))
            else:
                c, box = int(rng.integers(0, K)), BBox(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.1, 0.4, 2))
            # coarse confidences so ties occur
            d.append(Detection(c, box, float(rng.integers(1, 11)) / 10))
        dets.append(d)
        gts.append(g)
    return dets, gts


def test_04_ap_oracle_equivalence(record):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(500):
        dets, gts = _random_instance(rng)
        rep = mean_average_precision(dets, gts, 0.5, K=3, conf_thresh=0.0)
        aps, mean = brute_force_map(
            [[(d.cls, d.confidence, d.box.as_array().tolist()) for d in img] for img in dets],
            [[(c, b.as_array().tolist()) for c, b in img] for img in gts],
            0.5,
            3,
        )
        mismatches += rep.per_class != aps or rep.mAP != mean
    elapsed = time.perf_counter() - start
    record(4, mismatches == 0 and elapsed < 10, f"{mismatches}/500 bit-level mismatches in {elapsed:.2f}s (< 10s)")


def test_05_freezing_invariance(record, tmp_path):
    cfg = scheme_config(
        "YCSVR", seed=5, num_classes=3, virtual_n=200, real_n=80, pretrain_n=100, epochs_c=3, epochs_v=5, epochs_r=10,
        out_dir=str(tmp_path / "run"),
    )
    rep = run_scheme(cfg)
    v, r = segment_digest(rep.weights["V"], "head"), segment_digest(rep.weights["R"], "head")
    moved = segment_digest(rep.weights["V"], "backbone") != segment_digest(rep.weights["R"], "backbone")
    record(5, v == r and moved, f"head sha256 post-V {v[:16]} / post-R {r[:16]}; backbone changed in R: {moved}")


def test_06_mosaic_consistency(record):
    worst, bad, kept = 0.0, 0, 0
    for seed in range(200):
        scenes = [generate_scene(seed * 4 + i, REAL, K=7, max_objects=6) for i in range(4)]
        out = mosaic(scenes, seed)
        for (cls, box), (q, j) in zip(out.annotations, out.meta["provenance"]):
            kept += 1
            x1, y1, x2, y2 = box.corners()
            bad += not (box.w > 0 and box.h > 0 and x1 >= 0 and y1 >= 0 and x2 <= 1 and y2 <= 1)
            qmap = out.meta["maps"][q]
            sx1, sy1, sx2, sy2 = qmap.source_region()
            s = scenes[q].annotations[j][1].corners()
            clipped = np.array([max(s[0], sx1), max(s[1], sy1), min(s[2], sx2), min(s[3], sy2)])
            back = np.array([*qmap.inverse(x1, y1), *qmap.inverse(x2, y2)])
            worst = max(worst, float(np.abs(back - clipped).max()))
    record(6, worst <= 1e-6 and bad == 0, f"{kept} boxes over 200 mosaics, max inverse-map error {worst:.1e}, invalid boxes {bad}")


def test_07_cli_determinism(record, tmp_path):
    outs = []
    for name in ("a", "b"):
        cmd = [sys.executable, "-m", "simdet", "scheme", "--name", "YCSVR", "--seed", "7", "--virtual-n", "200", "--out", str(tmp_path / name)]
        subprocess.run(cmd, check=True, capture_output=True)
        files = sorted(p.name for p in (tmp_path / name).iterdir() if p.suffix in (".sdw", ".csv"))
        outs.append({f: hashlib.sha256((tmp_path / name / f).read_bytes()).hexdigest() for f in files})
    same = outs[0] == outs[1] and {"stage_C.sdw", "stage_V.sdw", "stage_R.sdw", "report.csv"} <= set(outs[0])
    record(7, same, f"two runs of `scheme --name YCSVR --seed 7`: {len(outs[0])} files compared, identical={same}")


@pytest.mark.slow
def test_08_directional_benchmark(record, tmp_path):
    cpu0, wall0 = time.process_time(), time.perf_counter()
    res = run_matrix(["YR", "YVR"], [2000], [0, 1, 2], tmp_path / "matrix.csv", base=dict(num_classes=3, real_n=400))
    cpu, wall = time.process_time() - cpu0, time.perf_counter() - wall0
    by = {s: [r.mAP for r in res.reports if r.scheme == s] for s in ("YR", "YVR")}
    yr, yvr = statistics.fmean(by["YR"]), statistics.fmean(by["YVR"])
    ok = not res.failures and len(by["YR"]) == len(by["YVR"]) == 3 and yvr >= yr + 0.05 and cpu < 20 * 60
    detail = (
        f"mean mAP YR {yr:.3f} {[round(m, 3) for m in by['YR']]}, YVR {yvr:.3f} {[round(m, 3) for m in by['YVR']]}, "
        f"gap {yvr - yr:+.3f} (>= +0.05); {cpu / 60:.1f} CPU-min ({wall / 60:.1f} wall-min, limit 20)"
    )
    record(8, ok, detail)


def test_09_domain_gap_histograms(record, tmp_path):
    v = average_color_histogram(generate_dataset(91, 300, VIRTUAL, tmp_path / "v").rows)
    r = average_color_histogram(generate_dataset(92, 300, REAL, tmp_path / "r").rows)
    gap = r.overall_mean() - v.overall_mean()
    configured = REAL.brightness - VIRTUAL.brightness
    ok = gap >= 0.15 and v.overall_mean() < r.overall_mean() and abs(gap - configured) <= 0.05
    record(9, ok, f"virtual mean {v.overall_mean():.3f} < real {r.overall_mean():.3f}; gap {gap:.3f} vs configured {configured:.2f} +/- 0.05")


def test_10_format_round_trips(record, tmp_path):
    rng = np.random.default_rng(10)
    ann_ok = 0
    for i in range(100):
        anns = [(int(rng.integers(0, 7)), BBox(*np.round(rng.uniform(0.05, 0.95, 2), 6), *np.round(rng.uniform(0.01, 0.1, 2), 6))) for _ in range(rng.integers(0, 8))]
        path = tmp_path / f"a{i}.txt"
        write_annotations(path, anns)
        first = path.read_bytes()
        back = read_annotations(path, 7)
        write_annotations(path, back)
        ann_ok += back == anns and path.read_bytes() == first
    w_ok = 0
    for i in range(100):
        cfg = NetConfig(
            input_size=8 * int(rng.integers(1, 9)),
            boxes_per_cell=int(rng.integers(1, 4)),
            num_classes=int(rng.integers(1, 8)),
            backbone_channels=tuple(int(c) for c in rng.integers(1, 9, size=3)),
            neck_channels=int(rng.integers(1, 9)),
        )
        net = DetectorNet(cfg, seed=int(rng.integers(0, 2**62)))
        for p in net.parameters():
            p.data = rng.normal(0, 10, p.data.shape).astype(np.float32)
        path = tmp_path / f"w{i}.sdw"
        save_weights(net, path)
        state = load_weights(path)
        w_ok += all(a.tobytes() == b.tobytes() and a.shape == b.shape for name in state for a, b in zip(state[name], net.state()[name]))
    record(10, ann_ok == 100 and w_ok == 100, f"annotation round trips {ann_ok}/100, weight round trips {w_ok}/100 bit-exact")
