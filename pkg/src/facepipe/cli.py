"""``facepipe`` command line front end.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .kernels import BACKEND


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON config file (default: $FACEPIPE_CONFIG)")
    p.add_argument("--seed", type=int, help="seed for every random stream of this command")
    p.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    p.add_argument("--pretty", action="store_true", help="human-readable output instead of JSON/CSV")
    return p


def build_parser():
    common = _common()
    parser = _Parser(prog="facepipe", description="Face detection, tracking and recognition pipeline.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    ds = sub.add_parser("dataset", help="dataset construction")
    ds_sub = ds.add_subparsers(dest="action", parser_class=_Parser)
    p = ds_sub.add_parser("extract", parents=[common], help="dump video frames via the external decoder")
    p.add_argument("video")
    p.add_argument("--out", required=True)
    p.add_argument("--fps", type=float)
    p = ds_sub.add_parser("build", parents=[common], help="split a label-per-directory tree into a manifest")
    p.add_argument("root")
    p.add_argument("--out", help="manifest CSV path (default ROOT/manifest.csv)")
    p.add_argument("--fractions", type=_floats, help="train,validation,test fractions")
    p = ds_sub.add_parser("synth", parents=[common], help="write a desk-generated identity face set")
    p.add_argument("out")
    p.add_argument("--identities", type=int, default=4)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("train", parents=[common], help="train a model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory for history, checkpoints, model")
    p.add_argument("--preset", choices=["tiny", "canonical"])
    p.add_argument("--init", help="warm-start from this model file")
    p.add_argument("--resume", help="resume from a ckpt_epoch_NNN.frcm checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)

    p = sub.add_parser("eval", parents=[common], help="accuracy report for a model")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--splits", default="validation,test")
    p.add_argument("--out", help="write report.json here (the table goes next to it as report.txt)")

    p = sub.add_parser("detect", parents=[common], help="detect faces in images, CSV output")
    p.add_argument("images", nargs="*", help="image files")
    p.add_argument("--frames", help="directory of frames")
    p.add_argument("--cascade")
    p.add_argument("--out", help="CSV path (default stdout)")

    p = sub.add_parser("run", parents=[common], help="annotate a directory of frames")
    p.add_argument("--frames", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--cascade")
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int)

    p = sub.add_parser("bench", parents=[common], help="latency/throughput of the pipeline")
    p.add_argument("--model", required=True)
    p.add_argument("--cascade")
    p.add_argument("--frames", help="directory of frames (default: synthetic moving face)")
    p.add_argument("--count", type=int, help="measured frames")
    p.add_argument("--warmup", type=int)
    p.add_argument("--size", type=int, help="synthetic frame size")
    p.add_argument("--out", help="bench.json path (default stdout)")

    md = sub.add_parser("model", help="model files")
    md_sub = md.add_subparsers(dest="action", parser_class=_Parser)
    p = md_sub.add_parser("inspect", parents=[common], help="print layer table and labels")
    p.add_argument("path")
    p = md_sub.add_parser("init", parents=[common], help="write a freshly initialised model")
    p.add_argument("--labels", required=True, help="comma-separated label names")
    p.add_argument("--preset", choices=["tiny", "canonical"])
    p.add_argument("--out", required=True)
    return parser


def _apply_flags(cfg, args):
    seed = getattr(args, "seed", None)
    if seed is not None:
        for section in ("dataset", "model", "train", "bench"):
            cfg[section]["seed"] = seed
    flags = {
        "fps": "dataset.fps", "fractions": "dataset.fractions", "preset": "model.preset",
        "epochs": "train.epochs", "batch_size": "train.batch_size", "lr": "train.lr",
        "momentum": "train.momentum", "cascade": "detector.cascade", "stride": "pipeline.stride",
        "count": "bench.frames", "warmup": "bench.warmup", "size": "bench.frame_size",
    }
    for attr, dotted in flags.items():
        if attr == "size" and args.command != "bench":
            continue
        cfgmod.set_value(cfg, dotted, getattr(args, attr, None))
    return cfg


def _emit(text, out=None):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _cascade(cfg):
    from .detect import load_cascade
    return load_cascade(cfg["detector"]["cascade"])


def _pipeline_config(cfg):
    from .pipeline import DetectorConfig, PipelineConfig
    det = {k: v for k, v in cfg["detector"].items() if k != "cascade"}
    return PipelineConfig(**cfg["pipeline"], detector=DetectorConfig(**det))


def cmd_dataset(args, cfg):
    from .dataset import SplitSpec, build_manifest, extract_frames

    ds = cfg["dataset"]
    if args.action == "extract":
        n = extract_frames(args.video, args.out, ds["fps"], ds["frame_extractor_cmd"])
        _emit(f"{n} frames\n" if args.pretty else json.dumps({"frames": n}) + "\n")
    elif args.action == "build":
        manifest = build_manifest(args.root, SplitSpec(tuple(ds["fractions"]), ds["seed"]))
        out = args.out or str(Path(args.root) / "manifest.csv")
        manifest.save(out)
        counts = manifest.counts()
        if args.pretty:
            lines = ["Label\tTraining Set\tValidation Set\tTest Set"]
            lines += [f"{lab}\t{c['train']}\t{c['validation']}\t{c['test']}" for lab, c in counts.items()]
            _emit("\n".join(lines) + "\n")
        else:
            _emit(json.dumps({"manifest": out, "counts": counts}, sort_keys=True) + "\n")
    elif args.action == "synth":
        from .synth import write_identity_dataset
        names = write_identity_dataset(args.out, args.identities, args.per_class, args.size, ds["seed"])
        _emit(json.dumps({"root": args.out, "labels": names}) + "\n")
    return 0


def _build_graph(cfg, labels):
    from .model import build_alexnet, init_weights
    m = cfg["model"]
    graph = build_alexnet(m["preset"], labels, input_size=m["input_size"])
    return init_weights(graph, m["seed"])


def cmd_train(args, cfg):
    from .dataset import DatasetManifest
    from .modelfile import load_model
    from .training import TrainConfig, train

    manifest = DatasetManifest.load(args.manifest)
    t = cfg["train"]
    tc = TrainConfig(**{**t, "lr_milestones": tuple(t["lr_milestones"])})
    if args.init or args.resume:
        graph = load_model(args.init or args.resume)
    else:
        graph = _build_graph(cfg, manifest.labels)
    log = (lambda row: print(json.dumps(row), file=sys.stderr)) if args.pretty else None
    result = train(graph, manifest, tc, out_dir=args.out, resume_from=args.resume, log=log)
    last = result.history[-1] if result.history else {}
    _emit(json.dumps({"model": str(Path(args.out) / "model.frcm"), "best": result.best_checkpoint,
                      "checkpoints": result.checkpoints, "last_epoch": last}) + "\n")
    return 0


def cmd_eval(args, cfg):
    from .dataset import DatasetManifest
    from .evaluation import accuracy_table, evaluate
    from .modelfile import load_model

    graph = load_model(args.model)
    manifest = DatasetManifest.load(args.manifest)
    reports = {}
    for split in [s for s in args.splits.split(",") if s]:
        if manifest.split(split):
            reports[split] = evaluate(graph, manifest, split)
    if not reports:
        raise ValueError(f"none of the splits {args.splits!r} has entries")
    table = accuracy_table(reports.get("validation"), reports.get("test"))
    payload = json.dumps({s: r.to_dict() for s, r in reports.items()}, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(payload, encoding="utf-8")
        Path(args.out).with_suffix(".txt").write_text(table, encoding="utf-8")
    _emit(table if args.pretty else payload)
    return 0


def cmd_detect(args, cfg):
    from .detect import detect_multiscale, detections_to_csv
    from .imageio import read_image
    from .pipeline import list_frames

    paths = [Path(p) for p in args.images]
    if args.frames:
        paths += list_frames(args.frames)
    if not paths:
        raise UsageError("detect needs image paths or --frames")
    cascade = _cascade(cfg)
    d = cfg["detector"]
    rows = []
    for i, path in enumerate(paths):
        dets = detect_multiscale(cascade, read_image(path), d["scale_factor"], d["min_size"], d["step"],
                                 d["min_neighbors"], d["iou_threshold"])
        rows += [(i, det) for det in dets]
    if args.pretty:
        text = "".join(f"{paths[i].name}: {det.bbox} score {det.score:.3f}\n" for i, det in rows)
    else:
        text = detections_to_csv(rows)
    _emit(text, args.out)
    return 0


def cmd_run(args, cfg):
    from .modelfile import load_model
    from .pipeline import process_stream

    summary = process_stream(args.frames, _cascade(cfg), load_model(args.model), _pipeline_config(cfg),
                             args.out)
    _emit(json.dumps(summary, sort_keys=True) + "\n")
    return 0


def cmd_bench(args, cfg):
    from .bench import benchmark, pipeline_stages
    from .imageio import read_image
    from .modelfile import load_model
    from .pipeline import list_frames
    from .synth import moving_face_sequence

    b = cfg["bench"]
    if args.frames:
        frames = [read_image(p) for p in list_frames(args.frames)]
    else:
        size = b["frame_size"]
        face = max(24, int(size * 0.69))
        base, _ = moving_face_sequence(10, size, size, face, start=(1, 1), velocity=(1, 1), seed=b["seed"])
        frames = [base[i % len(base)] for i in range(b["frames"])]
    pipe_cfg = _pipeline_config(cfg)
    pipe_cfg.threaded = False
    stages = pipeline_stages(_cascade(cfg), load_model(args.model), pipe_cfg)
    report = benchmark(stages, frames, warmup=b["warmup"])
    out = json.loads(report.to_json())
    out["backend"] = BACKEND
    if args.pretty:
        lines = [f"backend {BACKEND}, {report.frames} frames, {report.fps:.1f} fps"]
        lines += [f"{k:<9} p50 {v['p50']:.3f} ms  p95 {v['p95']:.3f} ms  p99 {v['p99']:.3f} ms"
                  for k, v in report.stages.items()]
        _emit("\n".join(lines) + "\n", args.out)
    else:
        _emit(json.dumps(out, indent=2, sort_keys=True) + "\n", args.out)
    return 0


def cmd_model(args, cfg):
    from .modelfile import describe, load_model, save_model

    if args.action == "inspect":
        graph = load_model(args.path)
        if args.pretty:
            _emit(describe(graph) + "\n")
        else:
            shapes = graph.layer_shapes()
            layers = [{"index": i, "kind": layer.kind, "output": list(shapes[i + 1]),
                       "params": int(sum(t.size for t in graph.params.get(i, [])))}
                      for i, layer in enumerate(graph.layers)]
            _emit(json.dumps({"input": list(graph.input_shape), "labels": graph.labels,
                              "layers": layers, "parameters": int(graph.parameter_count())},
                             indent=2) + "\n")
    elif args.action == "init":
        labels = [s for s in args.labels.split(",") if s]
        graph = _build_graph(cfg, labels)
        save_model(graph, args.out)
        _emit(json.dumps({"model": args.out, "parameters": int(graph.parameter_count())}) + "\n")
    return 0


COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "eval": cmd_eval, "detect": cmd_detect,
            "run": cmd_run, "bench": cmd_bench, "model": cmd_model}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("facepipe: error: a subcommand is required")
        if args.command in ("dataset", "model") and args.action is None:
            raise UsageError(f"facepipe {args.command}: error: an action is required")
    except UsageError as exc:
        if "subcommand is required" in str(exc) or "action is required" in str(exc):
            parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    try:
        cfg = cfgmod.load_config(args.config)
        _apply_flags(cfg, args)
        if args.print_config:
            print(cfgmod.dumps(cfg))
            return 0
        np.seterr(over="ignore", under="ignore")
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"facepipe: error: {exc}", file=sys.stderr)
        return 1
    except cfgmod.ConfigError as exc:
        print(f"facepipe: config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"facepipe: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
