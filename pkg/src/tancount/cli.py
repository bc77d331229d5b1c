"""Command-line entry point: ``tancount <subcommand> [flags]``.

Option precedence is command-line flag, then ``--config`` JSON file, then
built-in defaults.  The resolved configuration is echoed to stderr and
embedded in every JSON report.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from . import bench, dataio, density, serialize
from .lcn import LcnModel, LcnTrainConfig, TrainingDiverged, lcn_forward, lcn_train
from .tan import TanConfig, TanModel, tan_param_count, tan_train, tan_train_joint

log = logging.getLogger("tancount")

DEFAULTS = {
    "seed": 0,
    "threads": None,
    "out": "out",
    "sigma": "adaptive",
    "beta": density.DEFAULT_BETA,
    "knn": density.DEFAULT_KNN,
    "fixed_sigma": density.DEFAULT_FIXED_SIGMA,
    "k": 2,
    "blocks": 3,
    "hidden": 20,
    "lam": 0.15,
    "lr": None,  # per-command: 1e-5 for LCN, 5e-4 for TAN
    "iters": 1000,
    "resolution": "320x240",
    "frames": 200,
    "split": "all",
    "init": "gaussian",
    "init_std": 0.01,
    "batch_size": None,
    "checkpoint_every": 0,
    "mode": "tan",
    "walkers": 12,
    "speed": 1.0,
    "noise": 0.0,
    "noise_prob": 1.0,
    "size": "128x128",
}


class CliError(Exception):
    """User-facing failure; message printed, exit code 2."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _resolve(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        cfg.update(json.loads(path.read_text()))
    for key, value in vars(args).items():
        if key in ("func", "config") or value is None:
            continue
        cfg[key] = value
    if cfg.get("threads") is None and os.environ.get("TANCOUNT_THREADS"):
        cfg["threads"] = int(os.environ["TANCOUNT_THREADS"])
    return cfg


def _parse_wh(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in str(text).lower().split("x"))
    except ValueError as exc:
        raise CliError(f"expected WIDTHxHEIGHT, got {text!r}") from exc
    return w, h


def _sigma_mode(cfg: dict):
    s = str(cfg["sigma"])
    if s == "adaptive":
        return "adaptive"
    if s.startswith("fixed"):
        _, _, val = s.partition(":")
        return float(val) if val else float(cfg["fixed_sigma"])
    try:
        return float(s)
    except ValueError as exc:
        raise CliError(f"--sigma must be 'adaptive', 'fixed[:S]' or a number, got {s!r}") from exc


def _sigmas(cfg: dict, ann) -> np.ndarray:
    mode = _sigma_mode(cfg)
    if mode == "adaptive":
        return density.adaptive_sigmas(
            ann, int(cfg["knn"]), float(cfg["beta"]), fallback=float(cfg["fixed_sigma"])
        )
    return np.full(len(ann), mode)


def _gt(cfg: dict, ann) -> density.DensityMap:
    return density.render_density(ann, _sigmas(cfg, ann))


def _split(cfg: dict) -> dataio.SplitSpec:
    s = cfg["split"]
    builtin = {"all": dataio.ALL_TRAIN, "mall": dataio.MALL_SPLIT, "ucsd": dataio.UCSD_SPLIT}
    if s in builtin:
        return builtin[s]
    path = Path(s)
    if not path.is_file():
        raise CliError(f"split must be one of {sorted(builtin)} or a JSON file, got {s!r}")
    return dataio.SplitSpec.from_json(path.read_text())


def _load_data(cfg: dict) -> dataio.Dataset:
    if not cfg.get("data"):
        raise CliError("--data is required")
    try:
        return dataio.load_dataset(cfg["data"])
    except dataio.DatasetError as exc:
        raise CliError(str(exc)) from exc


def _write_json(path: Path, payload: dict, cfg: dict) -> None:
    payload = dict(payload)
    payload["config"] = {k: v for k, v in cfg.items() if k != "no_timestamp"}
    payload["config_hash"] = bench.config_hash(payload["config"])
    if not cfg.get("no_timestamp"):
        payload["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def _tan_cfg(cfg: dict, **kw) -> TanConfig:
    return TanConfig(
        k=int(cfg["k"]), blocks=int(cfg["blocks"]), hidden=int(cfg["hidden"]),
        lam=float(cfg["lam"]), lr=float(cfg["lr"] if cfg["lr"] is not None else 5e-4),
        iters=int(cfg["iters"]), seed=int(cfg["seed"]),
        batch_size=int(cfg["batch_size"] or 4), **kw,
    )


def _load_models(cfg: dict, need_tan: bool):
    if not cfg.get("lcn"):
        raise CliError("--lcn checkpoint is required")
    try:
        lcn = serialize.load_lcn(cfg["lcn"])
        tan = serialize.load_tan(cfg["tan"]) if need_tan and cfg.get("tan") else None
    except (FileNotFoundError, serialize.FormatError) as exc:
        raise CliError(str(exc)) from exc
    if need_tan and tan is None:
        raise CliError("--tan checkpoint is required unless --single-frame is given")
    return lcn, tan


def _save_heatmap(path: Path, grid: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(density.heatmap_rgb(grid)).save(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    h, w = _parse_wh(cfg["size"])[::-1]
    spec = dataio.SynthSpec(
        walkers=int(cfg["walkers"]), speed=float(cfg["speed"]), noise=float(cfg["noise"]),
        noise_prob=float(cfg["noise_prob"]), frames=int(cfg["frames"]), size=(h, w),
        seed=int(cfg["seed"]),
    )
    if cfg.get("spec"):
        spec = dataio.SynthSpec.from_json(Path(cfg["spec"]).read_text())
    ds = dataio.synth_video(spec)
    root = dataio.write_dataset(ds, cfg["out"])
    print(json.dumps({"out": str(root), "frames": len(ds), "walkers": spec.walkers}))
    return 0


def cmd_gen_density(cfg: dict) -> int:
    ds = _load_data(cfg)
    out = Path(cfg["out"])
    summary = []
    for seq in ds.sequences:
        for name, ann in zip(seq.frame_names, seq.annotations):
            dmap = _gt(cfg, ann)
            if seq.roi is not None:
                dmap = density.apply_roi(dmap, seq.roi)
            stem = Path(name).stem
            serialize.save_tensor(out / seq.name / f"{stem}.tan", dmap.grid.astype(np.float32))
            if cfg.get("downsample"):
                small = density.downsample_gt(dmap)
                serialize.save_tensor(
                    out / seq.name / f"{stem}.x8.tan", small.grid.astype(np.float32)
                )
            if cfg.get("heatmaps"):
                _save_heatmap(out / seq.name / f"{stem}.png", dmap.grid)
            summary.append({"sequence": seq.name, "frame": name, "points": len(ann),
                            "integral": dmap.count(), "sigmas": _sigmas(cfg, ann).tolist()})
    _write_json(out / "density_summary.json", {"frames": summary}, cfg)
    print(json.dumps({"out": str(out), "frames": len(summary)}))
    return 0


def _training_frames(cfg: dict):
    ds = _load_data(cfg)
    train, _ = dataio.apply_split(ds, _split(cfg))
    if not len(train):
        raise CliError("training split is empty")
    return train


def cmd_train_lcn(cfg: dict) -> int:
    train = _training_frames(cfg)
    samples = []
    for seq in train.sequences:
        for i, ann in enumerate(seq.annotations):
            dmap = _gt(cfg, ann)
            if seq.roi is not None:
                dmap = density.apply_roi(dmap, seq.roi)
            img = seq.image(i)
            if seq.roi is not None:
                img = density.apply_roi(img, seq.roi)
            samples.append((img, density.downsample_gt(dmap).grid))
    lr = float(cfg["lr"]) if cfg["lr"] is not None else 1e-5
    tcfg = LcnTrainConfig(
        lr=lr, init_std=float(cfg["init_std"]), batch_size=int(cfg["batch_size"] or 1),
        iters=int(cfg["iters"]), seed=int(cfg["seed"]),
        checkpoint_every=int(cfg["checkpoint_every"]), init=cfg["init"],
    )
    out = Path(cfg["out"])
    if cfg.get("resume"):
        model = serialize.load_lcn(cfg["resume"])
    else:
        model = LcnModel.init(tcfg.seed, tcfg.init_std, scheme=tcfg.init)
    extra = {"resolution": [train.sequences[0].width, train.sequences[0].height]}

    def checkpoint(it, m):
        serialize.save_lcn(m, out / "lcn", {**extra, "iteration": it})

    checkpoint(0, model)
    try:
        model, losses = lcn_train(samples, tcfg, model=model, on_checkpoint=checkpoint)
    except TrainingDiverged as exc:
        print(f"error: {exc}; last good checkpoint kept at {out / 'lcn'}", file=sys.stderr)
        return 3
    serialize.save_lcn(model, out / "lcn", {**extra, "iteration": tcfg.iters})
    with open(out / "lcn_loss.jsonl", "w") as fh:
        for it, v in enumerate(losses, 1):
            fh.write(json.dumps({"iter": it, "loss": v}) + "\n")
    preds = [float(np.sum(bench_map)) for bench_map in _lcn_maps(model, [s[0] for s in samples])]
    gts = [float(s[1].sum()) for s in samples]
    _write_json(out / "train_lcn.json", {"train_mae": bench.mae(preds, gts),
                                         "final_loss": losses[-1] if losses else None}, cfg)
    print(json.dumps({"checkpoint": str(out / "lcn"), "iters": tcfg.iters,
                      "train_mae": bench.mae(preds, gts)}))
    return 0


def _lcn_maps(lcn: LcnModel, frames):
    return [lcn_forward(f, lcn).grid for f in frames]


def _sequence_maps(lcn: LcnModel, seq: dataio.Sequence) -> list[np.ndarray]:
    counter = bench.StreamingCounter(lcn, None, roi=seq.roi)
    return [r.density for r in counter.run(seq.image(i) for i in range(len(seq)))]


def cmd_train_tan(cfg: dict) -> int:
    train = _training_frames(cfg)
    lcn, _ = _load_models(cfg, need_tan=False)
    tcfg = _tan_cfg(cfg)
    windows = []
    for seq in train.sequences:
        maps = _sequence_maps(lcn, seq)
        for t, ann in enumerate(seq.annotations):
            gt = _gt(cfg, ann)
            if seq.roi is not None:
                gt = density.apply_roi(gt, seq.roi)
            windows.append((dataio.make_window(maps, t, tcfg.k), density.downsample_gt(gt).grid))
    out = Path(cfg["out"])
    model = serialize.load_tan(cfg["resume"]) if cfg.get("resume") else TanModel.init(tcfg)
    try:
        if cfg.get("joint"):
            frame_windows = []
            for seq in train.sequences:
                for t, (_, gt) in enumerate(windows[: len(seq)]):
                    idx = dataio.window_indices(t, tcfg.k, len(seq))
                    frame_windows.append((np.stack([seq.image(i) for i in idx]), gt))
                windows = windows[len(seq):]
            model, lcn, losses = tan_train_joint(frame_windows, lcn, tcfg, model=model)
            serialize.save_lcn(lcn, out / "lcn_joint", {"iteration": tcfg.iters})
        else:
            model, losses = tan_train(windows, tcfg, model=model)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    serialize.save_tan(model, out / "tan", {"iteration": tcfg.iters})
    with open(out / "tan_loss.jsonl", "w") as fh:
        for it, v in enumerate(losses, 1):
            fh.write(json.dumps({"iter": it, "loss": v}) + "\n")
    print(json.dumps({"checkpoint": str(out / "tan"), "iters": tcfg.iters}))
    return 0


def _iter_video(cfg: dict):
    """Yield ``(name, frame_names, frame_loader, roi)`` for each input video."""
    if cfg.get("frames_dir"):
        d = Path(cfg["frames_dir"])
        if not d.is_dir():
            raise CliError(f"frames directory not found: {d}")
        names = sorted(
            (p.name for p in d.iterdir() if p.suffix.lower() in dataio.IMAGE_SUFFIXES),
            key=dataio._frame_sort_key,
        )

        def load(i):
            return np.asarray(Image.open(d / names[i]).convert("RGB"), np.float32) / 255.0

        yield d.name, names, load, None
        return
    for seq in _load_data(cfg).sequences:
        yield seq.name, seq.frame_names, seq.image, seq.roi


def cmd_infer(cfg: dict) -> int:
    single = bool(cfg.get("single_frame"))
    lcn, tan = _load_models(cfg, need_tan=not single)
    expected = None
    manifest = Path(cfg["lcn"]) / "manifest.json"
    if manifest.is_file():
        expected = json.loads(manifest.read_text()).get("resolution")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for name, frame_names, load, roi in _iter_video(cfg):
        if not frame_names:
            continue
        first = load(0)
        if expected and list(first.shape[1::-1]) != list(expected):
            raise CliError(
                f"{name}: frame resolution {first.shape[1]}x{first.shape[0]} does not match "
                f"checkpoint resolution {expected[0]}x{expected[1]}"
            )
        counter = bench.StreamingCounter(lcn, None if single else tan, roi=roi)
        frames = (first if i == 0 else load(i) for i in range(len(frame_names)))
        for r in counter.run(frames):
            rec = {"video": name, **r.record(), "frame": frame_names[r.frame]}
            records.append(rec)
            if cfg.get("heatmaps"):
                _save_heatmap(out / "heatmaps" / name / f"{Path(rec['frame']).stem}.png", r.density)
    with open(out / "counts.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    if cfg.get("csv"):
        with open(out / "counts.csv", "w") as fh:
            fh.write("video,frame,count\n")
            for rec in records:
                fh.write(f"{rec['video']},{rec['frame']},{rec['count']:.6f}\n")
    print(json.dumps({"frames": len(records), "out": str(out / "counts.jsonl")}))
    return 0


def _read_counts_file(path: Path) -> list[float]:
    if not path.is_file():
        raise CliError(f"counts file not found: {path}")
    text = path.read_text().strip()
    if not text:
        return []
    if text.startswith("["):
        return [float(v) for v in json.loads(text)]
    return [float(json.loads(line)["count"]) for line in text.splitlines() if line.strip()]


def cmd_eval(cfg: dict) -> int:
    ds = _load_data(cfg)
    _, test = dataio.apply_split(ds, _split(cfg)) if cfg["split"] != "all" else (None, ds)
    if cfg.get("counts_file"):
        preds = _read_counts_file(Path(cfg["counts_file"]))
        gts, scenes = [], []
        for seq in test.sequences:
            gts += [bench._gt_count(a, seq.roi) for a in seq.annotations]
            scenes += [seq.name.split("#")[0]] * len(seq)
        if len(preds) != len(gts):
            raise CliError(f"counts file has {len(preds)} entries, test split has {len(gts)} frames")
        report = bench.report_from_counts(preds, gts, scenes, model_id="counts-file", config=cfg)
    else:
        mode = cfg["mode"]
        lcn, tan = _load_models(cfg, need_tan=(mode == "tan"))
        report = bench.evaluate(test, lcn, tan, mode=mode, k=int(cfg["k"]),
                                model_id=str(cfg.get("tan") or cfg.get("lcn")), config=cfg)
    out = Path(cfg["out"])
    _write_json(out / "eval.json", report.to_dict(), cfg)
    if cfg.get("csv"):
        (out / "eval_counts.csv").write_text(report.to_csv())
    print(f"{'scene':<24}{'MAE':>10}{'MSE':>10}")
    for scene, row in report.per_scene.items():
        print(f"{scene:<24}{row['mae']:>10.4f}{row['mse']:>10.4f}")
    print(f"{'all':<24}{report.mae:>10.4f}{report.mse:>10.4f}")
    return 0


def cmd_bench(cfg: dict) -> int:
    if cfg.get("lcn"):
        lcn = serialize.load_lcn(cfg["lcn"])
    else:
        lcn = LcnModel.init(int(cfg["seed"]))
    tan = None if cfg.get("single_frame") else (
        serialize.load_tan(cfg["tan"]) if cfg.get("tan") else TanModel.init(_tan_cfg(cfg))
    )
    report = bench.fps_bench(
        lcn, tan, _parse_wh(cfg["resolution"]), int(cfg["frames"]),
        threads=cfg.get("threads"), seed=int(cfg["seed"]),
    )
    payload = json.loads(report.to_json())
    _write_json(Path(cfg["out"]) / "bench.json", payload, cfg)
    print(f"{report.resolution[0]}x{report.resolution[1]}  frames={report.frames}  "
          f"fps={report.fps:.1f}  cores={report.cores}  precision={report.precision}")
    return 0


def cmd_params(cfg: dict) -> int:
    lcn = serialize.load_lcn(cfg["lcn"]) if cfg.get("lcn") else LcnModel.init(zero=True)
    if cfg.get("tan"):
        tan_n = serialize.load_tan(cfg["tan"]).param_count()
    else:
        tan_n = tan_param_count(int(cfg["hidden"]), int(cfg["blocks"]))
    counts = {"lcn": lcn.param_count(), "tan": tan_n}
    counts["total"] = counts["lcn"] + counts["tan"]
    print(json.dumps(counts))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker threads (env TANCOUNT_THREADS)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--no-timestamp", action="store_true", default=None,
                        help="omit timestamps so reports are byte-reproducible")
    common.add_argument("-v", "--verbose", action="store_true", default=None)

    gt = argparse.ArgumentParser(add_help=False)
    gt.add_argument("--sigma", help="'adaptive', 'fixed' or 'fixed:S' (pixels)")
    gt.add_argument("--beta", type=float)
    gt.add_argument("--knn", type=int)
    gt.add_argument("--fixed-sigma", dest="fixed_sigma", type=float)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset root (canonical layout)")
    data.add_argument("--split", help="all | mall | ucsd | path to SplitSpec JSON")

    tanopt = argparse.ArgumentParser(add_help=False)
    tanopt.add_argument("--k", type=int, help="frames on each side of the centre")
    tanopt.add_argument("--blocks", type=int)
    tanopt.add_argument("--hidden", type=int)
    tanopt.add_argument("--lambda", dest="lam", type=float)

    train = argparse.ArgumentParser(add_help=False)
    train.add_argument("--lr", type=float)
    train.add_argument("--iters", type=int)
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--resume", help="checkpoint directory to continue from")

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--lcn", help="LCN checkpoint directory")
    ckpt.add_argument("--tan", help="TAN checkpoint directory")

    p = argparse.ArgumentParser(prog="tancount", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic video dataset")
    s.add_argument("--walkers", type=int)
    s.add_argument("--speed", type=float)
    s.add_argument("--noise", type=float)
    s.add_argument("--noise-prob", dest="noise_prob", type=float)
    s.add_argument("--frames", type=int)
    s.add_argument("--size", help="WIDTHxHEIGHT")
    s.add_argument("--spec", help="SynthSpec JSON file")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("gen-density", parents=[common, gt, data], help="ground-truth density maps")
    s.add_argument("--heatmaps", action="store_true", default=None)
    s.add_argument("--downsample", action="store_true", default=None,
                   help="also write 1/8 sum-pooled maps")
    s.set_defaults(func=cmd_gen_density)

    s = sub.add_parser("train-lcn", parents=[common, gt, data, train], help="train the LCN")
    s.add_argument("--init", choices=["gaussian", "he"])
    s.add_argument("--init-std", dest="init_std", type=float)
    s.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    s.set_defaults(func=cmd_train_lcn)

    s = sub.add_parser("train-tan", parents=[common, gt, data, train, tanopt, ckpt],
                       help="train the temporal stack on a frozen LCN")
    s.add_argument("--joint", action="store_true", default=None,
                   help="also fine-tune the LCN (writes lcn_joint/)")
    s.set_defaults(func=cmd_train_tan)

    s = sub.add_parser("infer", parents=[common, data, ckpt], help="streaming per-frame counts")
    s.add_argument("--frames-dir", dest="frames_dir", help="directory of video frames")
    s.add_argument("--single-frame", dest="single_frame", action="store_true", default=None)
    s.add_argument("--heatmaps", action="store_true", default=None)
    s.add_argument("--csv", action="store_true", default=None)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common, data, ckpt, tanopt], help="MAE / MSE report")
    s.add_argument("--mode", choices=["tan", "single", "average"])
    s.add_argument("--counts-file", dest="counts_file",
                   help="score precomputed counts (JSON list or counts.jsonl)")
    s.add_argument("--csv", action="store_true", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common, ckpt, tanopt], help="streaming throughput")
    s.add_argument("--resolution", help="WIDTHxHEIGHT")
    s.add_argument("--frames", type=int)
    s.add_argument("--single-frame", dest="single_frame", action="store_true", default=None)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("params", parents=[common, ckpt, tanopt], help="parameter counts")
    s.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        cfg.pop("command", None)
        print("config: " + json.dumps({k: cfg[k] for k in sorted(cfg)}, default=str),
              file=sys.stderr)
        with threadpool_limits(limits=cfg["threads"]):
            return args.func(cfg)
    except (CliError, dataio.DatasetError, serialize.FormatError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
