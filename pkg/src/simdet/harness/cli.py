"""``simdet`` command line."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from simdet.diffcore import load_weights
from simdet.errors import ConfigurationError, FormatError, SimdetError
from simdet.evaluation import (
    average_color_histogram,
    mean_average_precision,
    write_ap_report,
    write_detections,
    write_histogram_csv,
)
from simdet.harness.config import SCHEME_KEYS, SCHEME_NAMES, config_from_mapping, convert_fields, read_config_file, scheme_config
from simdet.harness.experiment import run_matrix, run_scheme
from simdet.harness.training import detect, net_from_state
from simdet.rng import SplitMix, derive
from simdet.synthdata import CLASS_NAMES, Manifest, ManifestRow, generate_dataset, mosaic, sample_subset, split_half
from simdet.synthdata.io import class_counts, load_image, read_annotations, to_uint8, write_annotations, write_ppm
from simdet.synthdata.scene import DomainProfile, Scene, get_profile

log = logging.getLogger("simdet")


def _cmd_generate(args) -> int:
    profile = get_profile(args.profile)
    if args.brightness is not None or args.noise is not None:
        profile = DomainProfile(
            profile.name,
            profile.brightness if args.brightness is None else args.brightness,
            profile.noise_sigma if args.noise is None else args.noise,
            profile.palette_shift,
        )
    m = generate_dataset(args.seed, args.n, profile, args.out, args.classes, args.max_objects, args.size, style=args.style)
    print(f"wrote {len(m)} scenes to {args.out} ({sum(r.num_objects for r in m.rows)} objects)")
    return 0


def _cmd_sample(args) -> int:
    sub = sample_subset(Manifest.read(args.manifest), args.n, args.seed)
    sub.write(args.out)
    print(f"wrote {len(sub)}-image subset to {args.out}")
    return 0


def _cmd_split(args) -> int:
    train, test = split_half(Manifest.read(args.manifest), args.seed)
    train.write(args.out_train)
    test.write(args.out_test)
    print(f"train {len(train)} -> {args.out_train}; test {len(test)} -> {args.out_test}")
    return 0


def _cmd_mosaic(args) -> int:
    rows = [row for path in args.manifests for row in Manifest.read(path).rows]
    if not rows:
        raise ConfigurationError("no images in the given manifests")
    K = len(rows[0].counts)
    n = args.n or len(rows)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    rng = SplitMix(derive(args.seed, 0x4D))
    width = max(5, len(str(n - 1)))
    new_rows = []
    for i in range(n):
        picks = [rows[int(rng.integers(0, len(rows)))] for _ in range(4)]
        scenes = [Scene(load_image(r.image), read_annotations(r.annotation, K)) for r in picks]
        out_scene = mosaic(scenes, derive(args.seed, i), output_size=scenes[0].image.shape[:2])
        img_path = out / "images" / f"mosaic_{i:0{width}d}.ppm"
        ann_path = out / "labels" / f"mosaic_{i:0{width}d}.txt"
        write_ppm(img_path, to_uint8(out_scene.image))
        write_annotations(ann_path, out_scene.annotations)
        counts = tuple(class_counts(out_scene.annotations, K))
        new_rows.append(ManifestRow(img_path.resolve(), ann_path.resolve(), len(out_scene.annotations), counts))
    Manifest(new_rows).write(out / "manifest.csv")
    print(f"wrote {n} mosaics to {out}")
    return 0


def _cmd_train(args) -> int:
    raw = read_config_file(args.config, SCHEME_KEYS)
    cfg = config_from_mapping(raw)
    rep = run_scheme(cfg)
    print(f"{cfg.scheme} seed={cfg.seed}: mAP {rep.mAP:.4f} (report in {Path(cfg.out_dir) / 'report.csv'})")
    return 0


def _cmd_eval(args) -> int:
    manifest = Manifest.read(args.manifest)
    images, labels = manifest.load()
    if len(images) == 0:
        raise ConfigurationError(f"{args.manifest} lists no images")
    net = net_from_state(load_weights(args.weights), images.shape[1], args.boxes_per_cell)
    if manifest.num_classes > net.config.num_classes:
        raise ConfigurationError(f"{args.manifest} has {manifest.num_classes} classes but the weights detect {net.config.num_classes}")
    dets = detect(net, images, args.conf_thresh)
    report = mean_average_precision(dets, labels, args.iou_thresh, net.config.num_classes, args.conf_thresh)
    names = CLASS_NAMES if net.config.num_classes <= len(CLASS_NAMES) else None
    write_ap_report(args.report, report, names)
    if args.detections:
        d = Path(args.detections)
        d.mkdir(parents=True, exist_ok=True)
        for row, image_dets in zip(manifest.rows, dets):
            write_detections(d / (Path(row.image).stem + ".txt"), image_dets)
    for cls, ap in sorted(report.per_class.items()):
        print(f"{names[cls] if names else cls}: AP {ap:.4f}")
    print(f"mAP {report.mAP:.4f}")
    return 0


def _cmd_histogram(args) -> int:
    hist = average_color_histogram(Manifest.read(args.manifest).rows)
    write_histogram_csv(args.out, hist)
    r, g, b = hist.mean_intensity()
    print(f"mean intensity r={r:.4f} g={g:.4f} b={b:.4f} overall={hist.overall_mean():.4f}")
    return 0


def _cmd_scheme(args) -> int:
    overrides = {}
    if args.config:
        overrides = convert_fields(read_config_file(args.config, SCHEME_KEYS - {"scheme", "seed", "virtual_n", "out_dir"}))
    cfg = scheme_config(args.name, seed=args.seed, virtual_n=args.virtual_n, out_dir=args.out, **overrides)
    rep = run_scheme(cfg)
    print(rep.to_csv(), end="")
    return 0


MATRIX_KEYS = {"schemes", "virtual_ns", "seeds", "out", "work_dir"}


def _cmd_matrix(args) -> int:
    raw = read_config_file(args.config, MATRIX_KEYS | (SCHEME_KEYS - {"scheme", "seed", "virtual_n", "out_dir"}))
    try:
        schemes = [s.strip() for s in raw.pop("schemes").split(",") if s.strip()]
        virtual_ns = [int(v) for v in raw.pop("virtual_ns").split(",")]
        seeds = [int(v) for v in raw.pop("seeds").split(",")]
        out = raw.pop("out")
    except KeyError as exc:
        raise ConfigurationError(f"matrix config is missing {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ConfigurationError(f"bad matrix list: {exc}") from None
    work_dir = raw.pop("work_dir", None)
    result = run_matrix(schemes, virtual_ns, seeds, out, base=convert_fields(raw), work_dir=work_dir)
    print(result.csv_text, end="")
    for scheme, n, seed, msg in result.failures:
        print(f"cell {scheme}/{n}/{seed} {msg}", file=sys.stderr)
    return 1 if result.failures else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simdet", description="Synthetic-to-real detection transfer experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--profile", default="real", help="virtual, real or neutral")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=7)
    g.add_argument("--max-objects", type=int, default=4)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--brightness", type=float)
    g.add_argument("--noise", type=float)
    g.add_argument("--style", choices=("ppe", "aux"), default="ppe")
    g.set_defaults(func=_cmd_generate)

    s = sub.add_parser("sample", help="class-ratio preserving random subset")
    s.add_argument("--manifest", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_sample)

    sp = sub.add_parser("split", help="random 50:50 train/test split")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-train", required=True)
    sp.add_argument("--out-test", required=True)
    sp.set_defaults(func=_cmd_split)

    m = sub.add_parser("mosaic", help="write a dataset of four-image mosaics")
    m.add_argument("--manifests", nargs="+", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.add_argument("--n", type=int, help="number of mosaics (default: number of source images)")
    m.set_defaults(func=_cmd_mosaic)

    t = sub.add_parser("train", help="run a fully configured scheme from a key = value file")
    t.add_argument("--config", required=True)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate saved weights on a dataset")
    e.add_argument("--weights", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--iou-thresh", type=float, default=0.5)
    e.add_argument("--conf-thresh", type=float, default=0.25)
    e.add_argument("--report", required=True)
    e.add_argument("--boxes-per-cell", type=int, default=2)
    e.add_argument("--detections", help="directory for per-image detection files")
    e.set_defaults(func=_cmd_eval)

    h = sub.add_parser("histogram", help="average colour histogram of a dataset")
    h.add_argument("--manifest", required=True)
    h.add_argument("--out", required=True)
    h.set_defaults(func=_cmd_histogram)

    sc = sub.add_parser("scheme", help="run a preset training scheme on generated data")
    sc.add_argument("--name", required=True, help=", ".join(SCHEME_NAMES))
    sc.add_argument("--virtual-n", type=int, default=2000)
    sc.add_argument("--seed", type=int, default=0)
    sc.add_argument("--out", required=True)
    sc.add_argument("--config", help="key = value overrides")
    sc.set_defaults(func=_cmd_scheme)

    mx = sub.add_parser("matrix", help="run a scheme x size x seed sweep")
    mx.add_argument("--config", required=True)
    mx.set_defaults(func=_cmd_matrix)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SimdetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
