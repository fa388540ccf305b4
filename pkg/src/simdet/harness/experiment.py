"""Staged training schemes, the generic pretraining stage and experiment matrices."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence


from simdet.diffcore import DetectorNet, NetConfig, load_weights, save_weights, set_frozen, transfer_weights
from simdet.diffcore.weights import encode_weights
from simdet.errors import ConfigurationError, SimdetError
from simdet.evaluation import APReport
from simdet.harness.config import SchemeConfig, scheme_config
from simdet.harness.training import StageResult, evaluate_detector, train_stage
from simdet.rng import derive
from simdet.synthdata import Manifest, generate_dataset, split_half
from simdet.synthdata.scene import NEUTRAL, DomainProfile

log = logging.getLogger(__name__)

# stream identifiers for derive(); fixed so runs stay reproducible
_STREAM = {"C": 0x43, "V": 0x56, "R": 0x52, "split": 0x53, "init": 0x49, "train": 0x54}


# ---------------------------------------------------------------------------
# data


def _cached_dataset(root: Path, tag: str, seed: int, n: int, profile: DomainProfile, cfg: SchemeConfig, style: str) -> Manifest:
    """Generate a dataset once; later calls with identical parameters reuse it."""
    key = (tag, seed, n, profile, cfg.num_classes, cfg.max_objects, cfg.image_size, style)
    digest = hashlib.sha256(repr(key).encode()).hexdigest()[:12]
    target = root / f"{tag}_n{n}_{digest}"
    manifest_path = target / "manifest.csv"
    if manifest_path.exists():
        return Manifest.read(manifest_path)
    log.info("generating %d %s images in %s", n, tag, target)
    return generate_dataset(seed, n, profile, target, cfg.num_classes, cfg.max_objects, cfg.image_size, style=style)


def _load(manifest: Manifest, K: int):
    images, labels = manifest.load()
    for lab in labels:
        for cls, _ in lab:
            if cls >= K:
                raise ConfigurationError(f"dataset uses class {cls} but the detector has {K} classes")
    return images, labels


@dataclass
class SchemeData:
    real_train: Manifest
    real_test: Manifest
    virtual: Manifest | None = None


def prepare_data(cfg: SchemeConfig) -> SchemeData:
    """Load the manifests named in ``cfg``, generating any that are missing."""
    root = Path(cfg.data_dir) if cfg.data_dir else Path(cfg.out_dir) / "data"
    if cfg.real_train_manifest or cfg.real_test_manifest:
        if not (cfg.real_train_manifest and cfg.real_test_manifest):
            raise ConfigurationError("give both real_train_manifest and real_test_manifest, or neither")
        train, test = Manifest.read(cfg.real_train_manifest), Manifest.read(cfg.real_test_manifest)
    else:
        real = DomainProfile("real", cfg.real_brightness, cfg.real_noise)
        full = _cached_dataset(root, "real", derive(cfg.seed, _STREAM["R"]), cfg.real_n, real, cfg, "ppe")
        train, test = split_half(full, derive(cfg.seed, _STREAM["split"]))
    virtual = None
    if "V" in cfg.stages:
        if cfg.virtual_manifest:
            virtual = Manifest.read(cfg.virtual_manifest)
        else:
            prof = DomainProfile("virtual", cfg.virtual_brightness, cfg.virtual_noise)
            virtual = _cached_dataset(root, "virtual", derive(cfg.seed, _STREAM["V"]), cfg.virtual_n, prof, cfg, "ppe")
    return SchemeData(train, test, virtual)


# ---------------------------------------------------------------------------
# stages


def net_config(cfg: SchemeConfig) -> NetConfig:
    return NetConfig(input_size=cfg.image_size, boxes_per_cell=cfg.boxes_per_cell, num_classes=cfg.num_classes)


def _train(net: DetectorNet, data, cfg: SchemeConfig, epochs: int, stream: int, mosaic: bool = False) -> StageResult:
    return train_stage(
        net,
        *data,
        epochs=epochs,
        lr=cfg.lr,
        momentum=cfg.momentum,
        batch_size=cfg.batch_size,
        seed=derive(cfg.seed, _STREAM["train"], stream),
        lambda_noobj=cfg.lambda_noobj,
        mosaic_prob=cfg.mosaic_prob if mosaic else 0.0,
        warmup_steps=cfg.warmup_steps,
        grad_clip=cfg.grad_clip,
    )


def _write_stage(path: Path, net: DetectorNet, result: StageResult) -> None:
    save_weights(net, path)
    meta = {"initial_loss": result.initial_loss, "final_loss": result.final_loss, "steps": result.steps}
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def _read_stage(path: Path) -> StageResult:
    meta_path = path.with_suffix(".json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        return StageResult(meta["initial_loss"], meta["final_loss"], steps=meta["steps"])
    return StageResult(math.nan, math.nan)


def pretrain_generic(
    seed: int,
    out_weights,
    cfg: SchemeConfig | None = None,
) -> StageResult:
    """Train on the auxiliary shape task (neutral profile) and save the weights.

    Only ``seed`` and the size/schedule fields of ``cfg`` matter; the
    auxiliary classes use different shapes and colours from the benchmark.
    """
    cfg = (cfg or scheme_config("YCVR")).replace(seed=seed)
    root = Path(cfg.data_dir) if cfg.data_dir else Path(out_weights).resolve().parent / "data"
    manifest = _cached_dataset(root, "pretrain", derive(seed, _STREAM["C"]), cfg.pretrain_n, NEUTRAL, cfg, "aux")
    net = DetectorNet(net_config(cfg), seed=derive(seed, _STREAM["init"], _STREAM["C"]))
    result = _train(net, _load(manifest, cfg.num_classes), cfg, cfg.epochs_c, _STREAM["C"])
    _write_stage(Path(out_weights), net, result)
    return result


def _pretrain_cached(cfg: SchemeConfig, path: Path) -> StageResult:
    """Stage C depends only on the seed and schedule, so share it between schemes."""
    if not cfg.data_dir:
        return pretrain_generic(cfg.seed, path, cfg)
    key = (cfg.seed, cfg.pretrain_n, cfg.epochs_c, cfg.num_classes, cfg.image_size, cfg.max_objects, cfg.boxes_per_cell,
           cfg.lr, cfg.momentum, cfg.batch_size, cfg.warmup_steps, cfg.grad_clip, cfg.lambda_noobj)
    cached = Path(cfg.data_dir) / f"pretrain_{hashlib.sha256(repr(key).encode()).hexdigest()[:12]}.sdw"
    if not cached.exists():
        pretrain_generic(cfg.seed, cached, cfg)
    path.write_bytes(cached.read_bytes())
    path.with_suffix(".json").write_bytes(cached.with_suffix(".json").read_bytes())
    return _read_stage(path)


@dataclass
class RunReport:
    scheme: str
    virtual_n: int
    seed: int
    stage_losses: dict[str, float]
    initial_losses: dict[str, float]
    mAP: float
    per_class_ap: dict[int, float]
    num_classes: int
    wall_clock_seconds: float = 0.0
    weights: dict[str, Path] = field(default_factory=dict, repr=False)

    def header(self) -> list[str]:
        return ["scheme", "virtual_n", "seed", "loss_C", "loss_V", "loss_R", "mAP"] + [f"ap_{c}" for c in range(self.num_classes)]

    def row(self) -> list[str]:
        def fmt(v):
            return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))

        losses = [fmt(self.stage_losses.get(s)) for s in ("C", "V", "R")]
        aps = [fmt(self.per_class_ap.get(c)) for c in range(self.num_classes)]
        return [self.scheme, str(self.virtual_n), str(self.seed), *losses, fmt(self.mAP), *aps]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        w.writerow(self.row())
        return buf.getvalue()


def run_scheme(cfg: SchemeConfig) -> RunReport:
    """Run every stage of ``cfg``, evaluate on the real test split and write the report.

    Each stage leaves ``stage_<X>.sdw`` (and a small loss sidecar) in
    ``cfg.out_dir``. With ``cfg.resume`` an existing stage file is loaded
    instead of retrained.
    """
    start = time.perf_counter()
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    data = prepare_data(cfg)
    ncfg = net_config(cfg)
    real_train = _load(data.real_train, cfg.num_classes)
    losses: dict[str, float] = {}
    initial: dict[str, float] = {}
    paths: dict[str, Path] = {}
    prev: Path | None = None
    net: DetectorNet | None = None
    for stage in cfg.stages:
        path = out / f"stage_{stage}.sdw"
        if cfg.resume and path.exists():
            log.info("stage %s: resuming from %s", stage, path)
            res = _read_stage(path)
            net = None
        elif stage == "C" and cfg.pretrain_weights:
            path.write_bytes(Path(cfg.pretrain_weights).read_bytes())
            res = _read_stage(Path(cfg.pretrain_weights))
            net = None
        elif stage == "C":
            res = _pretrain_cached(cfg, path)
            net = None
        else:
            net = DetectorNet(ncfg, seed=derive(cfg.seed, _STREAM["init"], _STREAM[stage]))
            if stage == "V":
                if prev is not None:
                    transfer_weights(net, prev, sorted(cfg.pretrain_segments))
                res = _train(net, _load(data.virtual, cfg.num_classes), cfg, cfg.epochs_v, _STREAM["V"], cfg.mosaic)
            else:
                if prev is not None:
                    transfer_weights(net, prev, sorted(cfg.loaded_segments))
                    set_frozen(net, cfg.frozen_segments)
                res = _train(net, real_train, cfg, cfg.epochs_r, _STREAM["R"])
                set_frozen(net, cfg.frozen_segments, frozen=False)
            _write_stage(path, net, res)
        log.info("stage %s: loss %.4f -> %.4f", stage, res.initial_loss, res.final_loss)
        losses[stage], initial[stage] = res.final_loss, res.initial_loss
        paths[stage] = path
        prev = path

    if net is None:
        net = DetectorNet(ncfg)
        transfer_weights(net, prev, sorted(load_weights(prev)))
    test_images, test_labels = _load(data.real_test, cfg.num_classes)
    rep: APReport = evaluate_detector(net, test_images, test_labels, cfg.iou_thresh, cfg.conf_thresh)
    report = RunReport(
        cfg.scheme,
        cfg.virtual_n,
        cfg.seed,
        losses,
        initial,
        rep.mAP,
        rep.per_class,
        cfg.num_classes,
        time.perf_counter() - start,
        paths,
    )
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8", newline="")
    # timing varies between runs, so it lives outside the reproducible report
    (out / "timing.json").write_text(json.dumps({"wall_clock_seconds": report.wall_clock_seconds}) + "\n", encoding="utf-8")
    return report


def segment_digest(weights_path, segment: str) -> str:
    """SHA-256 of one segment's serialized parameters in a weight file."""
    state = load_weights(weights_path)
    if segment not in state:
        raise ConfigurationError(f"{weights_path} has no segment {segment!r}")
    return hashlib.sha256(encode_weights({segment: state[segment]})).hexdigest()


# ---------------------------------------------------------------------------
# matrices

MATRIX_HEADER = ["kind", "scheme", "virtual_n", "seed", "loss_C", "loss_V", "loss_R", "mAP", "mAP_std", "cells", "status"]


@dataclass
class MatrixResult:
    reports: list[RunReport]
    failures: list[tuple[str, int, int, str]]
    aggregates: list[tuple[str, int, float, float, int]]
    csv_text: str = ""


def _matrix_csv(cells: list[tuple[str, int, int, RunReport | None, str]], aggregates) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MATRIX_HEADER)
    for scheme, n, seed, rep, status in cells:
        if rep is None:
            w.writerow(["run", scheme, n, seed, "", "", "", "", "", 1, status])
        else:
            w.writerow(["run", *rep.row()[:7], "", 1, "ok"])
    for scheme, n, mean, std, count in aggregates:
        w.writerow(["aggregate", scheme, n, "", "", "", "", repr(mean), repr(std), count, "ok"])
    return buf.getvalue()


def run_matrix(
    schemes: Sequence[str],
    virtual_ns: Sequence[int],
    seeds: Sequence[int],
    out_csv,
    base: dict | None = None,
    work_dir=None,
) -> MatrixResult:
    """Run every (scheme, virtual_n, seed) cell in order and write one CSV.

    A failing cell is recorded with its error and the sweep carries on; the
    CSV is rewritten after every cell so completed rows survive a crash.
    Aggregates give the mean and sample standard deviation of mAP per
    (scheme, virtual_n) over successful seeds.
    """
    base = dict(base or {})
    out_csv = Path(out_csv)
    work = Path(work_dir) if work_dir else out_csv.parent / (out_csv.stem + "_runs")
    base.setdefault("data_dir", str(work / "data"))
    # validate every cell before spending any compute
    configs = []
    for scheme in schemes:
        for n in virtual_ns:
            for seed in seeds:
                cfg = scheme_config(scheme, **{**base, "virtual_n": n, "seed": seed, "out_dir": str(work / f"{scheme}_n{n}_s{seed}")})
                configs.append(cfg)
    cells: list[tuple[str, int, int, RunReport | None, str]] = []
    reports, failures = [], []
    for cfg in configs:
        try:
            rep = run_scheme(cfg)
        except (SimdetError, OSError, ValueError, FloatingPointError, RuntimeError) as exc:
            msg = f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")
            log.error("cell %s n=%d seed=%d %s", cfg.scheme, cfg.virtual_n, cfg.seed, msg)
            failures.append((cfg.scheme, cfg.virtual_n, cfg.seed, msg))
            cells.append((cfg.scheme, cfg.virtual_n, cfg.seed, None, msg))
        else:
            reports.append(rep)
            cells.append((cfg.scheme, cfg.virtual_n, cfg.seed, rep, "ok"))
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        out_csv.write_text(_matrix_csv(cells, []), encoding="utf-8", newline="")
    aggregates = []
    for scheme in schemes:
        for n in virtual_ns:
            maps = [c[3].mAP for c in cells if c[0] == scheme and c[1] == n and c[3] is not None]
            if maps:
                std = statistics.stdev(maps) if len(maps) > 1 else 0.0
                aggregates.append((scheme, n, statistics.fmean(maps), std, len(maps)))
    text = _matrix_csv(cells, aggregates)
    out_csv.write_text(text, encoding="utf-8", newline="")
    return MatrixResult(reports, failures, aggregates, text)
