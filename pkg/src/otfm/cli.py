"""Command-line entry point: ``otfm {synth,degrade,train,fuse,eval,bench}``.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numerical failure.
Failures print one line ``error code=<n> kind=<type> message=<text>`` to stderr.
"""
from __future__ import annotations

import argparse
import shlex
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
HELP_WIDTH = 100


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH, max_help_position=32)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="otfm", formatter_class=_formatter,
                     description="Pansharpening with one-step flow matching under an unbalanced OT objective.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, description=help_text, formatter_class=_formatter)

    p = add("synth", "Write a deterministic synthetic dataset and its manifest.")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--count", type=int, default=64, help="number of triplets")
    p.add_argument("--bands", type=int, default=4, help="multispectral bands")
    p.add_argument("--hr-size", type=int, default=64, help="PAN / HRMS side length")
    p.add_argument("--ratio", type=int, default=4, help="resolution ratio")
    p.add_argument("--split", default="train", choices=("train", "val", "test"), help="manifest split")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="allow a non-empty output directory")

    p = add("degrade", "Build a reduced-resolution triplet from a full-resolution (pan, ms) pair.")
    p.add_argument("--in", dest="in_dir", required=True,
                   help="directory holding pan.otfm and ms.otfm at native resolution")
    p.add_argument("--out", required=True, help="output triplet directory")
    p.add_argument("--ratio", type=int, default=4, help="resolution ratio")
    p.add_argument("--sensor", default="", help="sensor tag selecting an MTF table from the config")
    p.add_argument("--config", help="config file with [mtf] / [mtf.<sensor>] sections")
    p.add_argument("--force", action="store_true", help="allow a non-empty output directory")

    p = add("train", "Train mapping and potential networks.")
    p.add_argument("--config", help="config file (key = value sections)")
    p.add_argument("--manifest", required=True, help="training manifest")
    p.add_argument("--run-dir", required=True, help="directory for checkpoints, log and run.txt")
    p.add_argument("--max-steps", type=int, help="override train.max_steps")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--batch-size", type=int, help="override train.batch_size")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config value (repeatable)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--force", action="store_true", help="allow a non-empty run directory")

    p = add("fuse", "Fuse one PAN / LRMS pair with a trained checkpoint.")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--pan", required=True, help="PAN raster")
    p.add_argument("--lrms", required=True, help="LRMS raster")
    p.add_argument("--out", required=True, help="output raster path")
    p.add_argument("--steps", type=int, default=1, help="Euler steps (1 = one-step)")
    p.add_argument("--no-ema", action="store_true", help="use live instead of EMA weights")
    p.add_argument("--bit-depth", type=int, default=32, choices=(8, 16, 32), help="output bit depth")

    p = add("eval", "Score a checkpoint (or 'oracle' / 'bicubic') on a manifest.")
    p.add_argument("--manifest", required=True, help="evaluation manifest")
    p.add_argument("--checkpoint", required=True, help="checkpoint file, 'oracle' or 'bicubic'")
    p.add_argument("--protocol", default="reduced", choices=("reduced", "full"), help="metric protocol")
    p.add_argument("--steps", type=int, default=1, help="Euler steps used for fusion")
    p.add_argument("--window", type=int, default=32, help="Q2n / UIQI block size")
    p.add_argument("--out-dir", required=True, help="directory for report.txt, report.kv and run.txt")

    p = add("bench", "Measure fusion latency per number of Euler steps.")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--hr-size", type=int, default=256, help="PAN side length")
    p.add_argument("--steps", default="1,25", help="comma-separated step counts")
    p.add_argument("--repeats", type=int, default=3, help="timed repeats per step count (>= 3)")
    p.add_argument("--out-dir", help="directory for bench.txt and run.txt")
    return parser


def _prepare_dir(path: Path, force: bool) -> Path:
    if path.exists() and not path.is_dir():
        raise DataError(f"{path} exists and is not a directory")
    if path.exists() and any(path.iterdir()) and not force:
        raise DataError(f"{path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_run_txt(directory: Path, argv: List[str], resolved: str) -> None:
    text = "command: otfm " + " ".join(shlex.quote(a) for a in argv) + "\n\n" + resolved
    (directory / "run.txt").write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")


def _args_text(args: argparse.Namespace) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(vars(args).items()) if k != "command")


def _parse_sets(items: List[str]) -> Dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_synth(args, argv) -> int:
    from .imagery import DatasetManifest, save_triplet, synth_dataset, write_manifest

    if args.count < 1:
        raise UsageError("--count must be >= 1")
    out = _prepare_dir(Path(args.out_dir), args.force)
    try:
        triplets = synth_dataset(args.seed, args.count, args.bands, args.hr_size, args.ratio)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    entries = []
    for i, t in enumerate(triplets):
        name = f"scene_{i:04d}"
        save_triplet(t, out / name)
        entries.append(name)
    write_manifest(DatasetManifest(entries, args.ratio, args.bands, args.split, root=out),
                   out / "manifest.txt")
    _write_run_txt(out, argv, _args_text(args))
    print(f"wrote {len(entries)} triplets and {out / 'manifest.txt'}")
    return EXIT_OK


def _load_config(path: Optional[str]):
    from .config import OTFMConfig, load_config

    return load_config(path) if path else OTFMConfig()


def cmd_degrade(args, argv) -> int:
    from .config import DataConfig
    from .degradation import degrade_spatial
    from .imagery import SampleTriplet, load_raster, save_triplet

    src = Path(args.in_dir)
    pan_path, ms_path = src / "pan.otfm", src / "ms.otfm"
    for p in (pan_path, ms_path):
        if not p.is_file():
            raise DataError(f"missing input {p}")
    pan = load_raster(pan_path)
    ms = load_raster(ms_path)
    r = args.ratio
    if pan.bands != 1:
        raise DataError("pan.otfm must have one band")
    if (pan.height, pan.width) != (r * ms.height, r * ms.width):
        raise DataError(f"pan {pan.height}x{pan.width} is not {r}x ms {ms.height}x{ms.width}")
    cfg = _load_config(args.config)
    cfg.data = DataConfig(bands=ms.bands, ratio=r, sensor=args.sensor)
    cfg.sync()
    mtf = cfg.mtf_spec()
    out = _prepare_dir(Path(args.out), args.force)
    triplet = SampleTriplet(degrade_spatial(pan, mtf, pan=True), degrade_spatial(ms, mtf), ms,
                            ratio=r, name=src.name)
    save_triplet(triplet, out)
    _write_run_txt(out, argv, _args_text(args) + "\n" + _mtf_text(mtf))
    print(f"wrote reduced-resolution triplet to {out}")
    return EXIT_OK


def _mtf_text(mtf) -> str:
    gains = ", ".join(repr(g) for g in mtf.nyquist_gain_per_band)
    return (f"[mtf]\nms_gains = {gains}\npan_gain = {mtf.pan_gain!r}\n"
            f"kernel_size = {mtf.kernel_size}\nratio = {mtf.ratio}\n")


def cmd_train(args, argv) -> int:
    from .config import apply_overrides, format_config
    from .imagery import read_manifest
    from .trainer import train_loop

    cfg = _load_config(args.config)
    overrides = _parse_sets(args.set)
    for flag, key in (("max_steps", "train.max_steps"), ("seed", "train.seed"),
                      ("batch_size", "train.batch_size")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = str(value)
    cfg = apply_overrides(cfg, overrides)
    manifest = read_manifest(args.manifest)
    if manifest.bands != cfg.data.bands or manifest.ratio != cfg.data.ratio:
        overrides_data = {"data.bands": str(manifest.bands), "data.ratio": str(manifest.ratio)}
        cfg = apply_overrides(cfg, overrides_data)
    run_dir = Path(args.run_dir)
    if args.resume is None:
        _prepare_dir(run_dir, args.force)
    else:
        run_dir.mkdir(parents=True, exist_ok=True)
    _write_run_txt(run_dir, argv, format_config(cfg))
    ckpt = train_loop(manifest, cfg, run_dir=run_dir, resume_from=args.resume, log=print)
    print(f"final checkpoint step={ckpt.step} path={run_dir / 'final.ckpt'}")
    return EXIT_OK


def cmd_fuse(args, argv) -> int:
    from .imagery import load_raster, save_raster
    from .sampler import FusionRequest, fuse

    try:
        req = FusionRequest(load_raster(args.pan), load_raster(args.lrms), args.steps, not args.no_ema)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = fuse(req, args.checkpoint)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_raster(out, out_path, bit_depth=args.bit_depth)
    _write_run_txt(out_path.parent, argv, _args_text(args))
    print(f"wrote {out_path} shape={out.shape}")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    from .imagery import read_manifest
    from .metrics import evaluate

    manifest = read_manifest(args.manifest)
    model = args.checkpoint
    if model not in ("oracle", "bicubic") and not Path(model).is_file():
        raise DataError(f"checkpoint {model} not found")
    report = evaluate(manifest, model, args.protocol, steps=args.steps, window=args.window)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = report.to_table()
    kv = "\n".join(report.to_kv_lines()) + "\n"
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    (out / "report.kv").write_text(kv, encoding="utf-8")
    _write_run_txt(out, argv, _args_text(args))
    print(table)
    print(kv, end="")
    for flag in report.flags:
        print("flag: " + flag)
    return EXIT_OK


def cmd_bench(args, argv) -> int:
    from .sampler import bench_latency

    try:
        steps = [int(s) for s in args.steps.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--steps expects comma-separated integers, got {args.steps!r}") from None
    if not steps or any(s < 1 for s in steps):
        raise UsageError("--steps values must be positive integers")
    if args.repeats < 3:
        raise UsageError("--repeats must be >= 3")
    table = bench_latency(args.checkpoint, args.hr_size, steps, args.repeats)
    text = table.format()
    print(text)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.txt").write_text(text + "\n", encoding="utf-8")
        _write_run_txt(out, argv, _args_text(args))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "degrade": cmd_degrade, "train": cmd_train,
            "fuse": cmd_fuse, "eval": cmd_eval, "bench": cmd_bench}


def _classify(exc: BaseException) -> int:
    from .checkpoint import CheckpointError
    from .config import ConfigError
    from .imagery import RasterFormatError
    from .losses import NonFiniteLossError
    from .sampler import ArchitectureMismatchError, LatencyOrderError
    from .trainer import TrainingDivergedError

    if isinstance(exc, (UsageError, ConfigError)):
        return EXIT_USAGE
    if isinstance(exc, (TrainingDivergedError, NonFiniteLossError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, RasterFormatError, CheckpointError, ArchitectureMismatchError,
                        LatencyOrderError, OSError, ValueError)):
        return EXIT_DATA
    return EXIT_DATA


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args, argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = _classify(exc)
        message = " ".join(str(exc).split())
        print(f"error code={code} kind={type(exc).__name__} message={message}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
