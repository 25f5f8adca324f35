"""Command-line surface: summarize / train / detect / eval / gradcheck /
synth / bench.  Exit codes: 0 success, 1 usage error, 2 data error."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import costs, detect as det, fileio, synth, train as tr
from .augment import AugmentOptions
from .model import build_model, describe_s3fd_mobilefacenet


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we want 1
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="extd", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("summarize", help="parameter / madds report")
    s.add_argument("--config", required=True)
    s.add_argument("--input-size", type=int, default=640)

    s = sub.add_parser("train", help="train on an annotated dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True, help="annotation file")
    s.add_argument("--out", required=True, help="weight file to write")
    s.add_argument("--iters", type=int, default=240_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--resolution", type=int, default=640)

    s = sub.add_parser("detect", help="detect faces in one image")
    s.add_argument("--config", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--conf", type=float, default=det.CONF_THRESH)
    s.add_argument("--nms", type=float, default=det.NMS_IOU)
    s.add_argument("--topk", type=int, default=det.TOPK)
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", help="average precision of a detection file")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--iou", type=float, default=0.5)

    s = sub.add_parser("gradcheck", help="finite-difference gradient check")
    s.add_argument("--config", default=None)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--resolution", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("bench", help="forward latency per resolution")
    s.add_argument("--config", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--sizes", required=True, help="comma-separated, e.g. 128,256")
    s.add_argument("--trials", type=int, default=1000)
    return p


def _cmd_summarize(args) -> int:
    config, _ = fileio.load_config(args.config)
    report = costs.count_madds(config, args.input_size, args.input_size)
    print(report.render_table())
    return 0


def _cmd_train(args) -> int:
    config, seed = fileio.load_config(args.config)
    if args.seed is not None:
        seed = args.seed
    index = fileio.parse_annotations(Path(args.data).read_text(encoding="utf-8"))
    dataset = fileio.load_dataset(index, Path(args.data).parent)
    schedule = tr.Schedule(total_iters=args.iters) if args.iters == 240_000 \
        else tr.Schedule.scaled(args.iters)
    params, _ = tr.train_loop(
        config, schedule, dataset, seed=seed, resolution=args.resolution,
        augment_opt=AugmentOptions(),
        trace_path=str(Path(args.out).with_suffix(".trace")),
        log_every=max(1, args.iters // 50))
    fileio.save_weights(args.out, params)
    print(f"wrote {args.out}")
    return 0


def _cmd_detect(args) -> int:
    config, _ = fileio.load_config(args.config)
    params = fileio.load_weights(args.weights)
    image = fileio.load_pbm(args.image)
    dets = det.detect(params, config, image, conf_thresh=args.conf,
                      nms_iou=args.nms, topk=args.topk)
    Path(args.out).write_text(
        fileio.format_detections(Path(args.image).name, dets),
        encoding="utf-8")
    print(f"{len(dets)} detections -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    preds = fileio.parse_detections(Path(args.pred).read_text(encoding="utf-8"))
    gt = fileio.parse_annotations(Path(args.gt).read_text(encoding="utf-8"))
    gt_map = {Path(name).name: boxes for name, boxes in gt.entries}
    dets_per_image, gts_per_image = [], []
    for name, dets in preds:
        key = Path(name).name
        if key not in gt_map:
            raise fileio.FormatError(f"prediction for unknown image {name!r}")
        dets_per_image.append(dets)
        gts_per_image.append(gt_map[key])
    report = det.average_precision(dets_per_image, gts_per_image,
                                   iou_thresh=args.iou)
    print(f"AP {report.ap:.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    if args.config:
        config, _ = fileio.load_config(args.config)
    else:
        config = tr.TINY_CONFIG
    report = tr.grad_check(config, seed=args.seed)
    print(report.render())
    return 0 if report.max_rel_err < 1e-3 else 2


def _cmd_synth(args) -> int:
    synth.synth_generate(args.count, args.resolution, args.seed, args.out)
    print(f"wrote {args.count} images to {args.out}")
    return 0


def _cmd_bench(args) -> int:
    config, seed = fileio.load_config(args.config)
    params = fileio.load_weights(args.weights)
    sizes = [int(s) for s in args.sizes.split(",") if s]
    for point in det.bench(params, config, sizes, trials=args.trials):
        print(f"{point.resolution} {point.mean_s * 1e3:.3f}ms "
              f"+- {point.std_s * 1e3:.3f}ms ({point.trials} trials)")
    return 0


_COMMANDS = {
    "summarize": _cmd_summarize,
    "train": _cmd_train,
    "detect": _cmd_detect,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "synth": _cmd_synth,
    "bench": _cmd_bench,
}


def cli(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (fileio.FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
