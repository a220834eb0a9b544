"""Command-line interface: ``gen-data``, ``train``, ``infer``, ``eval`` and ``sweep``.

Exit status is 0 on success, 1 on a usage error and 2 when the command
itself fails (bad files, corrupt checkpoints, invalid settings).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .checkpoint import CheckpointError, load_network, save_network
from .config import ConfigError, RunConfig, load_config
from .inference import STRATEGIES, InferenceConfig, run_inference
from .model import MEMONetwork
from .netpbm import read_netpbm, write_pgm
from .synthdata import build_dataset, load_dataset
from .training import lora_inject, train

log = logging.getLogger("memo_edge")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ensure_seed(args) -> int:
    if args.seed is None:
        args.seed = int(np.random.SeedSequence().entropy % (2**31))
        log.warning("no --seed given; using seed %d", args.seed)
    return args.seed


def _scales(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("scales must be positive")
    return vals


def _steps(text: str):
    if text.lower() == "full":
        return "full"
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--steps expects a positive integer or 'full', got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError("--steps must be >= 1")
    return v


# ---------------------------------------------------------------------------
# map I/O
# ---------------------------------------------------------------------------


def write_probability_map(path: Path, p: np.ndarray, raw: bool = False) -> Path:
    if raw:
        out = path.with_suffix(".f32")
        out.write_bytes(np.ascontiguousarray(p, dtype="<f4").tobytes())
    else:
        out = path.with_suffix(".pgm")
        write_pgm(out, np.round(np.clip(p, 0, 1) * 255).astype(np.uint8))
    return out


def read_map(path: Path, shape=None) -> np.ndarray:
    """Probability map in [0, 1] from an 8-bit PGM or a raw float32 dump (needs ``shape``)."""
    if path.suffix == ".f32":
        data = np.frombuffer(path.read_bytes(), dtype="<f4")
        if shape is None or data.size != shape[0] * shape[1]:
            raise ValueError(f"{path}: raw map size {data.size} does not match {shape}")
        return data.reshape(shape).astype(np.float64)
    arr = read_netpbm(path)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return arr.astype(np.float64) / 255.0


def _image_paths(inputs: list[str]) -> list[Path]:
    out = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            sub = p / "images" if (p / "images").is_dir() else p
            out.extend(sorted(sub.glob("*.ppm")) + sorted(sub.glob("*.pgm")))
        elif p.exists():
            out.append(p)
        else:
            raise FileNotFoundError(f"no such image or directory: {p}")
    if not out:
        raise FileNotFoundError("no input images found")
    return out


def _load_image(path: Path) -> np.ndarray:
    arr = read_netpbm(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr.transpose(2, 0, 1).astype(np.float32) / 255.0


def _gt_maps(gt_dir: Path) -> dict[str, np.ndarray]:
    sub = gt_dir / "edges" if (gt_dir / "edges").is_dir() else gt_dir
    paths = sorted(sub.glob("*.pgm"))
    if not paths:
        raise FileNotFoundError(f"no ground-truth .pgm files in {sub}")
    return {p.stem: read_map(p) >= 0.5 for p in paths}


def _pred_maps(pred_dir: Path, gts: dict[str, np.ndarray]) -> list[np.ndarray]:
    preds = []
    for stem, gt in gts.items():
        for suffix in (".pgm", ".f32"):
            path = pred_dir / f"{stem}{suffix}"
            if path.exists():
                preds.append(read_map(path, gt.shape))
                break
        else:
            raise FileNotFoundError(f"no prediction for {stem} in {pred_dir}")
    return preds


def _scale_dir(root: Path, s: float) -> Path:
    return root / f"scale_{s:g}"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> int:
    scene = cfg.scene_config(seed=args.seed)
    entries = build_dataset(args.n, scene, args.out_dir, jobs=args.jobs)
    print(f"wrote {len(entries)} pairs to {args.out_dir}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    finetune = args.lora is not None
    tcfg = cfg.training_config(finetune=finetune, seed=args.seed)
    for key in ("max_steps", "time_budget", "epochs", "learning_rate"):
        value = getattr(args, key)
        if value is not None:
            setattr(tcfg, key, value)
    images, edges = load_dataset(args.data_dir)
    if finetune:
        if args.base is None:
            raise UsageError("train --lora requires --base CHECKPOINT")
        net = load_network(args.base)
        adapters = lora_inject(net, args.lora, cfg["train"]["lora_alpha"], seed=tcfg.seed)
        n_adapter = sum(a.parameter_count for a in adapters)
        log.info("fine-tuning %d adapter parameters (%.2f%% of the base)", n_adapter, 100 * n_adapter / (net.parameter_count() - n_adapter))
    else:
        net = MEMONetwork(cfg.model_config(seed=args.seed))
    net.check_size(*images[0].shape[1:])
    start = time.perf_counter()
    history, _ = train(net, images, edges, tcfg)
    save_network(net, args.out)
    tail = np.mean(history[-20:]) if history else float("nan")
    print(f"trained {len(history)} steps in {time.perf_counter() - start:.0f}s; final loss {tail:.4f}; saved {args.out}")
    return EXIT_OK


def _infer_config(args, cfg: RunConfig, scale=None) -> InferenceConfig:
    i = cfg["infer"]
    return InferenceConfig(
        steps=i["steps"] if args.steps is None else (None if args.steps == "full" else args.steps),
        strategy=args.strategy or i["strategy"],
        scale=i["scale"] if scale is None else scale,
        fraction=i["fraction"],
        seed=args.seed,
    )


def _run_infer(net, paths, icfg, out_dir: Path, raw: bool, trace: bool) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in paths:
        _, tr = run_inference(net, _load_image(path), icfg)
        out = write_probability_map(out_dir / path.stem, tr.probabilities, raw)
        if trace:
            (out_dir / f"{path.stem}.trace.tsv").write_text(tr.to_tsv(), encoding="utf-8")
        log.info("%s -> %s (%d forward passes)", path, out, tr.forward_passes)


def cmd_infer(args, cfg: RunConfig) -> int:
    net = load_network(args.checkpoint)
    icfg = _infer_config(args, cfg, args.scale)
    paths = _image_paths(args.images)
    _run_infer(net, paths, icfg, Path(args.out_dir), args.raw, args.trace)
    print(f"wrote {len(paths)} maps to {args.out_dir}")
    return EXIT_OK


def _emit_report(report: ev.EvalReport, out: str | None) -> None:
    print(report.summary())
    if out:
        report.write_tsv(out)
        print(f"report written to {out}")


def cmd_eval(args, cfg: RunConfig) -> int:
    e = cfg["eval"]
    protocol = args.protocol or e["protocol"]
    thresholds = ev.default_thresholds(e["thresholds"])
    scales = args.scales if args.scales is not None else e["scales"]
    gts = _gt_maps(Path(args.gt_dir))
    gt_list = list(gts.values())
    if scales:
        per_scale = {s: _pred_maps(_scale_dir(Path(args.pred_dir), s), gts) for s in scales}
        report = ev.multi_granularity_eval(per_scale, gt_list, protocol, thresholds, e["tolerance"], jobs=args.jobs)
    else:
        preds = _pred_maps(Path(args.pred_dir), gts)
        report = ev.ods_ois(preds, gt_list, thresholds, protocol, e["tolerance"], jobs=args.jobs)
    _emit_report(report, args.out)
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    net = load_network(args.checkpoint)
    root = Path(args.data_dir)
    paths = _image_paths([str(root)])
    out_dir = Path(args.out_dir)
    for s in args.scales:
        _run_infer(net, paths, _infer_config(args, cfg, s), _scale_dir(out_dir, s), False, False)
    e = cfg["eval"]
    gts = _gt_maps(root)
    per_scale = {s: _pred_maps(_scale_dir(out_dir, s), gts) for s in args.scales}
    report = ev.multi_granularity_eval(
        per_scale, list(gts.values()), args.protocol or e["protocol"], ev.default_thresholds(e["thresholds"]), e["tolerance"], jobs=args.jobs
    )
    _emit_report(report, args.out or str(out_dir / "report.tsv"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="memo-edge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--seed", type=int, help="seed for data, weights and sampling (default: fresh entropy, logged)")

    p = sub.add_parser("gen-data", help="write a synthetic image/edge dataset")
    common(p)
    p.add_argument("--n", type=int, required=True, help="number of pairs")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from scratch, or fine-tune adapters with --lora")
    common(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--lora", type=int, metavar="RANK", help="fine-tune rank-RANK adapters on top of --base")
    p.add_argument("--base", help="base checkpoint for --lora")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--time-budget", type=float, help="seconds")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.set_defaults(func=cmd_train)

    def infer_opts(p):
        p.add_argument("--steps", type=_steps, help="iterations, or 'full' (default from config: 10)")
        p.add_argument("--strategy", choices=STRATEGIES)

    p = sub.add_parser("infer", help="predict edge maps for images")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("images", nargs="+", help="image files or directories of .ppm files")
    infer_opts(p)
    p.add_argument("--scale", type=float, help="granularity scale (default 1.0)")
    p.add_argument("--trace", action="store_true", help="also write per-step masked counts as TSV")
    p.add_argument("--raw", action="store_true", help="write float32 little-endian maps instead of 8-bit PGM")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted maps against ground truth")
    common(p)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--protocol", choices=ev.PROTOCOLS)
    p.add_argument("--scales", type=_scales, help="multi-granularity: read PRED_DIR/scale_<s>/ per scale")
    p.add_argument("--out", help="TSV report path")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="infer at several scales, then multi-granularity eval")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scales", type=_scales, required=True)
    infer_opts(p)
    p.add_argument("--protocol", choices=ev.PROTOCOLS)
    p.add_argument("--out", help="TSV report path (default OUT_DIR/report.tsv)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    _ensure_seed(args)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"memo-edge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, CheckpointError, ConfigError, FloatingPointError) as exc:
        print(f"memo-edge {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch())
