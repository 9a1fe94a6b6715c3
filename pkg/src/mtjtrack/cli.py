"""Command-line entry point: dataset synthesis, training, prediction,
evaluation, and report emission.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every command writes a run.json echoing its resolved configuration.
"""

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__, _rng, dataio, heatmap, imaging, localizer, network, reporting, trainer

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _write_run_json(out_dir, command, resolved):
    os.makedirs(out_dir, exist_ok=True)
    resolved = {k: v for k, v in resolved.items() if k not in ("func", "command")}
    doc = {"command": command, "package_version": __version__, "config": resolved}
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_synth(args):
    domains = [d.strip() for d in args.domains.split(",") if d.strip()]
    if args.n_per_domain < 1:
        raise _UsageError("--n-per-domain must be >= 1")
    for d in domains:
        if d not in dataio.PHANTOM_PRESETS:
            raise _UsageError(
                f"unknown synthetic domain {d!r}; choose from {sorted(dataio.PHANTOM_PRESETS)}"
            )
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    labels = []
    for di, domain in enumerate(domains):
        preset = dataio.PHANTOM_PRESETS[domain]
        video_id = f"{domain.lower()}-000"
        frame_dir = os.path.join("frames", video_id)
        os.makedirs(os.path.join(out_dir, frame_dir), exist_ok=True)
        for i in range(args.n_per_domain):
            draw = _rng.substream(args.seed, _rng.SYNTH, di, i)
            jx = draw.uniform(12, args.width - 13)
            jy = draw.uniform(12, args.height - 13)
            params = dataio.PhantomParams(
                seed=_rng.substream_seed(args.seed, _rng.SYNTH, di, i, 1),
                width=args.width,
                height=args.height,
                junction_x=jx,
                junction_y=jy,
                **preset,
            )
            frame, gt = dataio.synth_phantom(params, video_id=video_id, frame_idx=i)
            dataio.write_frame(
                frame, os.path.join(out_dir, frame_dir, f"frame_{i:06d}.png")
            )
            if args.annotators <= 1:
                labels.append(gt)
            else:
                jitter = _rng.substream(args.seed, _rng.ANNOT, di, i)
                for a in range(1, args.annotators + 1):
                    pos = (
                        float(np.clip(jx + jitter.normal(0, args.annotator_jitter), 0, args.width - 1e-6)),
                        float(np.clip(jy + jitter.normal(0, args.annotator_jitter), 0, args.height - 1e-6)),
                    )
                    labels.append(
                        dataio.LabelRecord(video_id, i, f"S{a}", pos)
                    )
        entries.append(
            dataio.VideoEntry(
                video_id=video_id,
                instrument=domain,
                movement=args.movement,
                muscle=args.muscle,
                subject_group="healthy",
                frame_dir=frame_dir,
                pixel_spacing_mm=args.spacing,
                crop=imaging.CropSpec(0, 0, args.width, args.height),
                stride=args.stride,
            )
        )
    manifest = dataio.DatasetManifest(entries=tuple(entries))
    dataio.save_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    dataio.write_labels(labels, os.path.join(out_dir, "labels.csv"))
    _write_run_json(out_dir, "synth", vars(args))
    print(
        f"synthesized {args.n_per_domain * len(domains)} frames "
        f"({len(domains)} domains) into {out_dir}"
    )
    return EXIT_OK


def _load_stage_datasets(manifest_path, labels_path, stages_domains, input_w, input_h):
    manifest = dataio.load_manifest(manifest_path)
    records = dataio.load_labels(labels_path)
    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    by_frame = {}
    for r in records:
        by_frame.setdefault((r.video_id, r.frame_idx), []).append(r)

    per_domain = {}
    for entry in manifest.entries:
        pairs = per_domain.setdefault(entry.instrument, [])
        indices = dataio.sample_frames(entry, entry.stride, base_dir=base_dir)
        for i in indices:
            recs = by_frame.get((entry.video_id, i))
            if not recs:
                continue
            frame = dataio.read_frame(
                os.path.join(base_dir, entry.frame_dir, f"frame_{i:06d}.png")
            )
            frame = imaging.crop_resize(frame, entry.crop, input_w, input_h)
            positions = [r.position for r in recs if r.position is not None]
            if positions:
                pos = tuple(np.mean(np.asarray(positions), axis=0))
                if not (0 <= pos[0] < input_w and 0 <= pos[1] < input_h):
                    raise dataio.DataFormatError(
                        f"label {pos} outside network input {input_w}x{input_h} "
                        f"for {entry.video_id}:{i}"
                    )
                target = heatmap.make_soft_label(pos, input_w, input_h)
            else:
                target = heatmap.make_soft_label(None, input_w, input_h)
            pairs.append((frame.astype(np.float32), target.astype(np.float32)))

    stages = []
    for k, domains in enumerate(stages_domains, start=1):
        dataset = []
        for d in domains:
            dataset.extend(per_domain.get(d, []))
        if not dataset:
            raise dataio.DataFormatError(f"stage {k} ({domains}) has no training data")
        stages.append(trainer.CurriculumStage(stage_id=k, domains=list(domains), dataset=dataset))
    return stages


def cmd_train(args):
    domains = [d.strip() for d in args.stages.split(",") if d.strip()]
    if not domains:
        raise _UsageError("--stages needs at least one domain")
    stages_domains = [domains[: k + 1] for k in range(len(domains))]
    net_config = network.NetworkConfig(
        depth=args.depth,
        base_filters=args.base_filters,
        input_w=args.input_w,
        input_h=args.input_h,
        kernel_size=args.kernel_size,
        rng_seed=_rng.substream_seed(args.seed, _rng.INIT),
    )
    train_config = trainer.TrainConfig(
        learning_rate=args.lr,
        beta1=args.beta1,
        beta2=args.beta2,
        zero_class_weight=args.w0,
        epochs_per_stage=args.epochs,
        batch_size=args.batch_size,
        rng_seed=_rng.substream_seed(args.seed, _rng.SHUFFLE),
        adam_epsilon=args.adam_eps,
    )
    stages = _load_stage_datasets(
        args.manifest, args.labels, stages_domains, args.input_w, args.input_h
    )
    weights = network.init_weights(net_config)
    os.makedirs(args.out_dir, exist_ok=True)
    _write_run_json(args.out_dir, "train", vars(args))
    models, log = trainer.train_curriculum(
        weights, stages, train_config, args.out_dir, augment=args.augment
    )
    trainer.write_training_log(log, os.path.join(args.out_dir, "training_log.csv"))
    for k, stage in enumerate(stages, start=1):
        print(
            f"stage {k} ({'+'.join(stage.domains)}): {len(stage.dataset)} samples, "
            f"final loss {log[-1][2] if log else float('nan'):.6f}"
        )
    print(f"wrote {len(models)} checkpoints to {args.out_dir}")
    return EXIT_OK


def _predict_one(weights, entry, base_dir, frame_idx):
    frame = dataio.read_frame(
        os.path.join(base_dir, entry.frame_dir, f"frame_{frame_idx:06d}.png")
    )
    cfg = weights.config
    frame = imaging.crop_resize(frame, entry.crop, cfg.input_w, cfg.input_h)
    pmap = network.forward(weights, imaging.normalize(frame).astype(np.float32))
    pred = localizer.locate(pmap)
    verdict = localizer.filter_prediction(pred, cfg.input_w, cfg.input_h)
    return entry.video_id, frame_idx, pred, verdict


def cmd_predict(args):
    weights = network.load_weights(args.weights)
    manifest = dataio.load_manifest(args.manifest)
    base_dir = os.path.dirname(os.path.abspath(args.manifest))
    wanted = None
    if args.videos:
        wanted = {v.strip() for v in args.videos.split(",") if v.strip()}
    tasks = []
    for entry in manifest.entries:
        if wanted is not None and entry.video_id not in wanted:
            continue
        for i in dataio.sample_frames(entry, entry.stride, base_dir=base_dir):
            tasks.append((entry, i))
    start = time.perf_counter()
    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            rows = list(
                pool.map(lambda t: _predict_one(weights, t[0], base_dir, t[1]), tasks)
            )
    else:
        rows = [_predict_one(weights, entry, base_dir, i) for entry, i in tasks]
    elapsed = time.perf_counter() - start
    out_dir = os.path.dirname(os.path.abspath(args.out_csv)) or "."
    os.makedirs(out_dir, exist_ok=True)
    localizer.write_predictions(rows, args.out_csv)
    _write_run_json(out_dir, "predict", vars(args))
    sec_per_frame = elapsed / len(rows) if rows else 0.0
    print(f"sec_per_frame={sec_per_frame:.6f}")
    print(f"wrote {len(rows)} predictions to {args.out_csv}")
    return EXIT_OK


def cmd_evaluate(args):
    pred_rows = localizer.read_predictions(args.predictions)
    records = dataio.load_labels(args.labels)
    manifest = dataio.load_manifest(args.manifest)
    report, ledger = reporting.build_report(
        pred_rows,
        records,
        manifest,
        image_size=(args.image_w, args.image_h),
        n_grid=None,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    reporting.write_report(report, os.path.join(args.out_dir, "report.json"))
    reporting.write_ledger(ledger, os.path.join(args.out_dir, "excluded_frames.csv"))
    reporting.write_figures(report, args.out_dir)
    _write_run_json(args.out_dir, "evaluate", vars(args))
    for case, count in report["exclusions"].items():
        print(f"excluded[{case}]={count}")
    print(f"kept={report['n_frames_kept']} of {report['n_frames_total']}")
    print(f"rmse_mm={report['model']['rmse_mm']:.4f}")
    return EXIT_OK


def cmd_report(args):
    report = reporting.load_report(args.report)
    os.makedirs(args.out_dir, exist_ok=True)
    reporting.write_figures(report, args.out_dir)
    _write_run_json(args.out_dir, "report", vars(args))
    model = report["model"]
    print(
        f"frames kept {report['n_frames_kept']}/{report['n_frames_total']}; "
        f"RMSE {model['rmse_mm']:.3f} mm, SEM {model['sem_mm']:.3f} mm, "
        f"MAE {model['mae_mm']:.3f} mm"
    )
    if report.get("icc"):
        icc = report["icc"]
        print(
            f"ICC {icc['value']:.3f} (95% CI [{icc['ci_low']:.3f}, {icc['ci_high']:.3f}])"
        )
    print(f"figures written to {args.out_dir}")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="mtjtrack", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-per-domain", type=int, default=100)
    p.add_argument("--domains", default="SyntheticA")
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--movement", default="MVC", choices=dataio.MOVEMENTS)
    p.add_argument("--muscle", default="MG", choices=dataio.MUSCLES)
    p.add_argument("--spacing", type=float, default=dataio.DEFAULT_PIXEL_SPACING_MM)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--annotators", type=int, default=1)
    p.add_argument("--annotator-jitter", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the curriculum on a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stages", required=True, help="comma list of domains, expanded cumulatively")
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--base-filters", type=int, default=64)
    p.add_argument("--input-w", type=int, default=256)
    p.add_argument("--input-h", type=int, default=128)
    p.add_argument("--kernel-size", type=int, default=3)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--adam-eps", type=float, default=1e-8)
    p.add_argument("--w0", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict junction positions for a dataset")
    p.add_argument("--weights", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--videos", default="", help="optional comma list of video ids")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="filter predictions and compute the report")
    p.add_argument("--predictions", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--image-w", type=int, default=256)
    p.add_argument("--image-h", type=int, default=128)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="re-emit figures and a summary from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (dataio.DataFormatError, network.WeightsFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (trainer.NumericFailure, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
