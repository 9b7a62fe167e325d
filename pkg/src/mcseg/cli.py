"""Command-line front end: ``mcseg <command> --config run.json [overrides]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 numerical failure. ``MCSEG_THREADS`` caps BLAS worker threads.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from .config import RunConfig, parse_resolution
from .data import (DatasetIndex, build_samples, load_mask, load_rgb, make_folds, resize_mask, resize_rgb,
                   scan_davis_layout, synth_suite, write_davis_layout)
from .errors import ConfigError, DataError, MCSegError, NumericalError
from .metrics import EvalRow, aggregate, evaluate_pair, write_report_csv
from .model import NetConfig, SegNet, load_weights, read_weights_header, save_weights
from .motion import flow_to_rgb, frame_diff, horn_schunck, write_flo
from .train import predict, train

log = logging.getLogger("mcseg")

COMMANDS = ("synth", "diff", "flow", "train", "infer", "eval", "xval", "bench")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mcseg", description="Motion-cue video object segmentation toolkit.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field; dotted keys reach sections (e.g. synth.count=5)")
    p.add_argument("--variant", choices=("dual_diff", "dual_flow", "single"))
    p.add_argument("--data", help="dataset root (images/<seq>/, annotations/<seq>/)")
    p.add_argument("--test-data", help="held-out dataset root for eval/infer")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--epochs", type=int)
    p.add_argument("--checkpoint", action="append", help="checkpoint path (repeatable)")
    p.add_argument("--predictions", help="directory of predicted masks to score (eval)")
    p.add_argument("--oracle", choices=("gt", "empty"), help="score ground truth or empty masks (eval)")
    p.add_argument("--report", help="eval CSV path")
    p.add_argument("--resolutions", help="bench resolutions, comma-separated (480p or HxW)")
    p.add_argument("--repetitions", type=int, help="bench repetitions (>= 3)")
    p.add_argument("--threads", type=int, help="bench worker threads (default 1)")
    p.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = list(args.overrides)
    flag_map = {"variant": "variant", "data": "data", "test_data": "test_data", "out": "output_dir",
                "epochs": "epochs", "predictions": "predictions", "oracle": "oracle", "report": "report",
                "repetitions": "bench.repetitions", "threads": "bench.threads"}
    d = cfg.to_dict()
    for attr, key in flag_map.items():
        value = getattr(args, attr)
        if value is None:
            continue
        section, _, name = key.rpartition(".")
        (d[section] if section else d)[name] = value
    if args.seeds is not None:
        try:
            d["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}", field="seeds")
    if args.checkpoint:
        d["checkpoints"] = list(args.checkpoint)
    if args.resolutions:
        d["bench"]["resolutions"] = [r.strip() for r in args.resolutions.split(",") if r.strip()]
    return RunConfig.from_dict(d).with_overrides(overrides)


# ---------------------------------------------------------------- helpers


def _out(cfg: RunConfig, *parts) -> Path:
    path = Path(cfg.output_dir).joinpath(*parts)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _need(value, name):
    if value is None:
        raise ConfigError(f"this command needs {name}", field=name)
    return value


def _index(cfg: RunConfig, root) -> DatasetIndex:
    index = scan_davis_layout(root, cfg.resolution, cfg.stationary)
    if cfg.stationary_only:
        index = index.stationary()
        if not index.sequences:
            raise DataError(f"{root}: no sequences tagged stationary")
    return index


def _native_frames(seq) -> List[np.ndarray]:
    return [load_rgb(p).astype(np.float32) / 255 for p in seq.frames]


def _save_png(arr: np.ndarray, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def _load_net(path, cfg: RunConfig):
    """Load a checkpoint for ``cfg.variant``; the stored architecture fills in widths."""
    stored = read_weights_header(path).get("config")
    net_cfg = NetConfig.from_dict(stored) if stored else cfg.net()
    weights = load_weights(path, replace(net_cfg, variant=cfg.variant))
    net = SegNet(weights.config, seed=None)
    net.load_state(weights)
    return net, weights.meta


def _gt_masks(seq) -> Dict[int, np.ndarray]:
    ids = seq.frame_ids()
    return {ids.index(a.stem): load_mask(a) for a in seq.annotations}


def _score_net(net, samples, index: DatasetIndex, cfg: RunConfig, seed: int, fold: int) -> List[EvalRow]:
    """Predict at the network resolution, score against native-resolution ground truth."""
    preds = predict(net, samples, cfg.batch_size)
    gts = {s.name: _gt_masks(s) for s in index.sequences}
    rows = []
    for pred, s in zip(preds, samples):
        gt = gts[s.meta.sequence][s.meta.t]
        f, j = evaluate_pair(resize_mask(pred, gt.shape), gt, cfg.tolerance_px)
        rows.append(EvalRow(cfg.condition, cfg.variant, seed, fold, s.meta.sequence, s.meta.t, f, j))
    return rows


def _hs(cfg):
    return cfg.horn_schunck if cfg.variant == "dual_flow" else None


def _log_epoch(writer, variant, seed, fold):
    def on_epoch(epoch, loss):
        writer.writerow([variant, seed, fold, epoch, repr(float(loss))])
        log.info("%s seed %d fold %d epoch %d loss %.5f", variant, seed, fold, epoch, loss)
    return on_epoch


def _train_one(cfg, samples, seed, fold, ckpt_dir: Path, writer) -> SegNet:
    result = train(samples, cfg.net(), seed, cfg.epochs, cfg.batch_size, cfg.optim(),
                   on_epoch=_log_epoch(writer, cfg.variant, seed, fold))
    weights = result.net.state()
    weights.meta = {"seed": seed, "fold": fold, "condition": cfg.condition}
    save_weights(weights, ckpt_dir / f"{cfg.variant}_seed{seed}_fold{fold}.mcw")
    return result.net


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> Path:
    s = cfg.synth
    clips = synth_suite(s.count, s.seed, canvas=s.canvas, frames=s.frames, size=s.size, speed=s.speed,
                        distractor=s.distractor, camera_pan=s.camera_pan, texture=s.texture, prefix=s.prefix)
    root = write_davis_layout(_out(cfg), clips)
    print(f"wrote {len(clips)} clips to {root}")
    return root


def cmd_diff(cfg: RunConfig) -> Path:
    index = scan_davis_layout(_need(cfg.data, "data"), stationary=cfg.stationary)
    out = _out(cfg, "diff")
    n = 0
    for seq in index.sequences:
        frames = _native_frames(seq)
        for t in range(len(frames) - 1):
            _save_png(_to_u8(frame_diff(frames[t], frames[t + 1])), out / seq.name / f"{t:05d}.png")
            n += 1
    print(f"wrote {n} difference images to {out}")
    return out


def cmd_flow(cfg: RunConfig) -> Path:
    index = scan_davis_layout(_need(cfg.data, "data"), stationary=cfg.stationary)
    out = _out(cfg, "flow")
    n = 0
    for seq in index.sequences:
        frames = _native_frames(seq)
        for t in range(len(frames) - 1):
            flow = horn_schunck(frames[t], frames[t + 1], cfg.horn_schunck)
            (out / seq.name).mkdir(parents=True, exist_ok=True)
            write_flo(flow, out / seq.name / f"{t:05d}.flo")
            _save_png(_to_u8(flow_to_rgb(flow)), out / seq.name / f"{t:05d}.png")
            n += 1
    print(f"wrote {n} flow fields to {out}")
    return out


def cmd_train(cfg: RunConfig) -> List[Path]:
    index = _index(cfg, _need(cfg.data, "data"))
    samples = build_samples(index, cfg.variant, _hs(cfg), cfg.resolution, fold=0)
    if not samples:
        raise DataError(f"{cfg.data}: no annotated frames to train on")
    ckpt_dir = _out(cfg, "checkpoints")
    paths = []
    with open(_out(cfg) / "train_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "seed", "fold", "epoch", "loss"])
        for seed in cfg.seeds:
            _train_one(cfg, samples, seed, 0, ckpt_dir, writer)
            paths.append(ckpt_dir / f"{cfg.variant}_seed{seed}_fold0.mcw")
    print(f"wrote {len(paths)} checkpoints to {ckpt_dir}")
    return paths


def cmd_infer(cfg: RunConfig) -> Path:
    if not cfg.checkpoints:
        raise ConfigError("infer needs at least one checkpoint", field="checkpoints")
    index = _index(cfg, _need(cfg.test_data or cfg.data, "data"))
    samples = build_samples(index, cfg.variant, _hs(cfg), cfg.resolution, with_masks_only=False)
    out = _out(cfg, "masks")
    sizes = {s.name: load_rgb(s.frames[0]).shape[:2] for s in index.sequences}
    for ckpt in cfg.checkpoints:
        net, _ = _load_net(ckpt, cfg)
        sub = out / Path(ckpt).stem if len(cfg.checkpoints) > 1 else out
        for pred, s in zip(predict(net, samples, cfg.batch_size), samples):
            mask = resize_mask(pred, sizes[s.meta.sequence])
            _save_png(mask * 255, sub / s.meta.sequence / f"{s.meta.t:05d}.png")
    print(f"wrote masks for {len(samples)} frames to {out}")
    return out


def cmd_eval(cfg: RunConfig) -> Path:
    """Score checkpoints, a prediction directory or an oracle; reads inputs only."""
    index = _index(cfg, _need(cfg.test_data or cfg.data, "data"))
    rows: List[EvalRow] = []
    if cfg.oracle or cfg.predictions:
        seed = cfg.seeds[0]
        for seq in index.sequences:
            for t, gt in sorted(_gt_masks(seq).items()):
                if cfg.oracle == "gt":
                    pred = gt
                elif cfg.oracle == "empty":
                    pred = np.zeros_like(gt)
                else:
                    path = Path(cfg.predictions) / seq.name / f"{seq.frames[t].stem}.png"
                    if not path.exists():
                        raise DataError(f"missing prediction {path}")
                    pred = resize_mask(load_mask(path), gt.shape)
                f, j = evaluate_pair(pred, gt, cfg.tolerance_px)
                rows.append(EvalRow(cfg.condition, cfg.variant, seed, 0, seq.name, t, f, j))
    else:
        if not cfg.checkpoints:
            raise ConfigError("eval needs checkpoints, predictions or an oracle", field="checkpoints")
        samples = build_samples(index, cfg.variant, _hs(cfg), cfg.resolution)
        for i, ckpt in enumerate(cfg.checkpoints):
            net, meta = _load_net(ckpt, cfg)
            rows.extend(_score_net(net, samples, index, cfg, int(meta.get("seed", i)), int(meta.get("fold", 0))))
    if not rows:
        raise DataError("no annotated frames to evaluate")
    report = aggregate(rows, metadata={"variant": cfg.variant, "condition": cfg.condition})
    path = Path(cfg.report) if cfg.report else _out(cfg) / "eval.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, path)
    for (cond, variant), agg in report.aggregates.items():
        print(f"{cond} {variant}: F {agg.mean_F:.4f} IoU {agg.mean_IoU:.4f} "
              f"(frame mean F {agg.frame_mean_F:.4f} IoU {agg.frame_mean_IoU:.4f})")
    return path


def cmd_xval(cfg: RunConfig) -> Path:
    index = _index(cfg, _need(cfg.data, "data"))
    folds = make_folds(index, cfg.folds, cfg.fold_seed)
    if folds[0].degenerate:
        log.warning("k=1: training and testing on the same sequences")
    samples = build_samples(index, cfg.variant, _hs(cfg), cfg.resolution)
    out = _out(cfg, "xval")
    ckpt_dir = _out(cfg, "xval", "checkpoints")
    pooled: List[EvalRow] = []
    with open(out / "train_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "seed", "fold", "epoch", "loss"])
        for fold in folds:
            train_set = [s for s in samples if s.meta.sequence in set(fold.train)]
            test_set = [s for s in samples if s.meta.sequence in set(fold.test)]
            if not train_set or not test_set:
                raise DataError(f"fold {fold.index} has no annotated frames in its train or test split")
            rows = []
            for seed in cfg.seeds:
                net = _train_one(cfg, train_set, seed, fold.index, ckpt_dir, writer)
                rows.extend(_score_net(net, test_set, index.subset(fold.test), cfg, seed, fold.index))
            write_report_csv(aggregate(rows), out / f"fold{fold.index}.csv")
            pooled.extend(rows)
            log.info("fold %d tested on %s", fold.index, ", ".join(fold.test))
    report = aggregate(pooled, metadata={"variant": cfg.variant, "folds": str(cfg.folds)})
    write_report_csv(report, out / "pooled.csv")
    for (cond, variant), agg in report.aggregates.items():
        print(f"{cond} {variant} pooled over {len(folds)} folds: F {agg.mean_F:.4f} IoU {agg.mean_IoU:.4f}")
    return out / "pooled.csv"


BENCH_HEADER = ["method", "resolution", "frames_timed", "mean_s", "median_s", "p95_s", "ratio"]


def _bench_frames(cfg: RunConfig) -> List[np.ndarray]:
    if cfg.data:
        seq = scan_davis_layout(cfg.data, stationary=cfg.stationary).sequences[0]
        frames = [load_rgb(p) for p in seq.frames]
    else:
        s = cfg.synth
        clip = synth_suite(1, s.seed, canvas=s.canvas, frames=cfg.bench.frames, size=s.size, speed=s.speed,
                           distractor=s.distractor, texture=s.texture)[0]
        frames = clip.images
    if len(frames) < 2:
        raise DataError("bench needs at least 2 frames")
    return frames


def run_bench(cfg: RunConfig) -> List[dict]:
    """Time frame differencing and Horn-Schunck on identical frame pairs."""
    frames = _bench_frames(cfg)
    params = replace(cfg.horn_schunck, iterations=cfg.bench.iterations, early_stop_delta=0.0)
    results = []
    with threadpool_limits(limits=cfg.bench.threads):
        for res_text in cfg.bench.resolutions:
            h, w = parse_resolution(res_text)
            imgs = [resize_rgb(f, (h, w)).astype(np.float32) / 255 for f in frames]
            pairs = list(zip(imgs[:-1], imgs[1:]))
            frame_diff(*pairs[0])  # warm-up, not timed
            horn_schunck(*pairs[0], params)
            times = {"frame_diff": [], "horn_schunck": []}
            for _ in range(cfg.bench.repetitions):
                for a, b in pairs:
                    t0 = time.perf_counter()
                    frame_diff(a, b)
                    t1 = time.perf_counter()
                    horn_schunck(a, b, params)
                    t2 = time.perf_counter()
                    times["frame_diff"].append(t1 - t0)
                    times["horn_schunck"].append(t2 - t1)
            ratio = np.mean(times["horn_schunck"]) / np.mean(times["frame_diff"])
            for method, ts in times.items():
                ts = np.asarray(ts)
                results.append({"method": method, "resolution": f"{h}x{w}", "frames_timed": len(ts),
                                "mean_s": float(ts.mean()), "median_s": float(np.median(ts)),
                                "p95_s": float(np.percentile(ts, 95)), "ratio": float(ratio)})
    return results


def cmd_bench(cfg: RunConfig) -> Path:
    results = run_bench(cfg)
    path = _out(cfg) / "bench.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(results)
    for r in results:
        print(f"{r['method']:>12} {r['resolution']:>9} n={r['frames_timed']} mean {r['mean_s'] * 1e3:.3f} ms "
              f"median {r['median_s'] * 1e3:.3f} ms p95 {r['p95_s'] * 1e3:.3f} ms ratio {r['ratio']:.1f}")
    return path


HANDLERS = {"synth": cmd_synth, "diff": cmd_diff, "flow": cmd_flow, "train": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval, "xval": cmd_xval, "bench": cmd_bench}


def _thread_cap() -> Optional[int]:
    raw = os.environ.get("MCSEG_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MCSEG_THREADS must be a positive integer, got {raw!r}", field="MCSEG_THREADS")
    if n < 1:
        raise ConfigError(f"MCSEG_THREADS must be a positive integer, got {raw!r}", field="MCSEG_THREADS")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            sys.stdout.write(cfg.to_json())
            return 0
        with threadpool_limits(limits=_thread_cap()):
            HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"mcseg {args.command}: configuration error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"mcseg {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 3
    except MCSegError as exc:
        print(f"mcseg {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mcseg {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
