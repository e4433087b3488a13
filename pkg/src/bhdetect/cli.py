"""Command line entry point: ``bhdetect {gen,train,infer,eval}``.

Every subcommand writes ``run.json`` (the fully resolved arguments) into its
output directory. Exit status is 0 on success, 1 on a runtime error and 2 on
a usage error; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, evalsuite, segnet, trainer
from . import scenegen as sg
from .errors import ContractError, DivergenceError, ParseError, SpecError
from .fileio import atomic_write_text, read_pgm, write_pgm

log = logging.getLogger("bhdetect")

SOC_COLUMNS = """\
soc.csv columns:
  W             window length (successive frames)
  mean_range_m  mean first-detection range over detected cases (nan if none)
  seom_m        standard error of that mean (nan with fewer than 2 detections)
  fa_per_hour   pooled false alarms / pooled video hours at --frame-rate
  n_detected    cases with at least one valid detection
  n_cases       cases evaluated
zfa.csv / report.csv columns:
  case, W, detected (0/1), detection_range_m, false_alarms
zfa_scan.csv columns:
  W, false_alarms (pooled over all cases)
"""


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ arg types


def _probability(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"threshold must lie strictly between 0 and 1, got {text}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def _w_range(text: str) -> tuple[int, int]:
    try:
        a, b = (int(p) for p in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a:b, got {text!r}") from None
    if not 1 <= a <= b:
        raise argparse.ArgumentTypeError(f"need 1 <= a <= b, got {text!r}")
    return a, b


# --------------------------------------------------------------------- parser


def _camera_flags(p: argparse.ArgumentParser) -> None:
    c = sg.CameraModel()
    p.add_argument("--width", type=_positive_int, default=c.width)
    p.add_argument("--height", type=_positive_int, default=c.height)
    p.add_argument("--focal-px", type=float, default=c.focal_px)
    p.add_argument("--frame-rate", type=float, default=c.frame_rate_hz)
    p.add_argument("--horizon-frac", type=float, default=c.horizon_frac)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bhdetect", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, **kw):
        p = sub.add_parser(name, **kw)
        p.add_argument("--config", type=Path, help="JSON file whose keys mirror the flag names")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        return p

    g = add("gen", help="render synthetic encounter suites or a training set")
    g.add_argument("--preset", required=True, choices=[*sg.PRESET_CASES, "train"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-frames", type=_positive_int, default=300, help="frames per encounter")
    g.add_argument("--n-samples", type=_positive_int, default=200, help="training crops (preset train)")
    g.add_argument("--crop", type=_positive_int, default=64, help="crop size (preset train)")
    g.add_argument("--bird-rate", type=float, default=sg.DEFAULT_BIRDS.rate_per_frame,
                   help="expected new birds per frame in encounter presets")
    _camera_flags(g)

    t = add("train", help="train the segmenter on a generated dataset")
    d = trainer.TrainConfig()
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--epochs", type=_positive_int, default=d.max_epochs)
    t.add_argument("--lr", type=float, default=d.learn_rate)
    t.add_argument("--momentum", type=float, default=d.momentum)
    t.add_argument("--l2", type=float, default=d.l2)
    t.add_argument("--batch-size", type=_positive_int, default=d.batch_size)
    t.add_argument("--crop", type=_positive_int, default=d.crop_size)
    t.add_argument("--translate", type=int, default=d.translate_px)
    t.add_argument("--flip-prob", type=float, default=d.flip_prob)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--loss-normalization", choices=["pixel", "image"], default=d.loss_normalization)
    t.add_argument("--seed", type=int, default=d.seed)
    n = segnet.NetworkConfig()
    t.add_argument("--layers", type=_positive_int, default=n.encoder_layers)
    t.add_argument("--filters", type=_positive_int, default=n.filters_per_layer)
    t.add_argument("--threshold", type=_probability, default=n.threshold)

    i = add("infer", help="segment frames into aircraft mask PGMs")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--input", type=Path, required=True, help="a sequence directory or a directory of them")
    i.add_argument("--threshold", type=_probability, default=None, help="override the checkpoint threshold")
    i.add_argument("--batch-size", type=_positive_int, default=8)

    e = add(
        "eval",
        help="track masks and score them against truth",
        epilog=SOC_COLUMNS,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    e.add_argument("--truth-root", type=Path, required=True, help="sequence dir(s) holding truth.json")
    e.add_argument("--masks-root", type=Path, default=None, help="masks from `infer` (same layout)")
    e.add_argument("--checkpoint", type=Path, default=None, help="segment frames on the fly instead")
    e.add_argument("--threshold", type=_probability, default=None)
    mode = e.add_mutually_exclusive_group(required=True)
    mode.add_argument("--W", type=_positive_int, dest="W", help="single window length report")
    mode.add_argument("--W-range", type=_w_range, dest="W_range", help="SOC over windows a:b")
    mode.add_argument("--zfa", action="store_true", help="smallest window with zero false alarms")
    e.add_argument("--W-max", type=_positive_int, dest="W_max", default=40)
    e.add_argument("--frame-rate", type=float, default=15.0)
    e.add_argument("--svg", action="store_true", help="also draw soc.svg (with --W-range)")
    e.add_argument("--name", default=None, help="label for report.txt (defaults to the truth dir name)")
    return parser


def _config_path(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv``; keys of a ``--config`` JSON file act as flag defaults."""
    path = _config_path(argv)
    command = next((t for t in argv if t in COMMANDS), None)
    if path is None or command is None:
        return parser.parse_args(argv)
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        parser.error(f"cannot read config: {exc}")
    except json.JSONDecodeError as exc:
        parser.error(f"{path}: byte {exc.pos}: {exc.msg}")
    if not isinstance(cfg, dict):
        parser.error(f"{path}: top level must be an object")
    if "args" in cfg and "command" in cfg:  # a run.json from an earlier run
        if cfg["command"] != command:
            parser.error(f"{path}: recorded command {cfg['command']!r} is not {command!r}")
        cfg = cfg["args"]
    subparser = _subparser(parser, command)
    known = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, value in cfg.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            parser.error(f"{path}: unknown key {key!r} for {command}")
        action = known[dest]
        if action.type is not None and value is not None and not isinstance(value, bool):
            text = ":".join(map(str, value)) if isinstance(value, list) else str(value)
            try:
                value = action.type(text)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                parser.error(f"{path}: {key}: {exc}")
        defaults[dest] = value
    # options satisfied by the file are no longer required on the command line
    for action in subparser._actions:
        if action.dest in defaults:
            action.required = False
    for group in subparser._mutually_exclusive_groups:
        if any(a.dest in defaults for a in group._group_actions):
            group.required = False
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _subparser(parser, name):
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            return a.choices[name]
    raise KeyError(name)


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, tuple):
        return list(v)
    return v


def _write_run_json(out: Path, args: argparse.Namespace) -> None:
    doc = {"bhdetect": __version__, "command": args.command}
    doc["args"] = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("command", "verbose", "config")}
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "run.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands


def _camera(args) -> sg.CameraModel:
    return sg.CameraModel(args.width, args.height, args.focal_px, args.frame_rate, args.horizon_frac)


def cmd_gen(args) -> int:
    camera = _camera(args)
    out: Path = args.out
    if args.preset == "train":
        frames = sg.training_frames(args.n_samples, args.seed, camera)
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, 2000]))
        samples = []
        for k, (img, mask, meta) in enumerate(frames):
            full = trainer.LabeledSample(img, mask, f"sample_{k:05d}", meta)
            samples.append(trainer.crop_around_aircraft(full, args.crop, rng))
        trainer.write_dataset(samples, out)
        print(f"wrote {len(samples)} training crops to {out}")
    else:
        suite = sg.preset_suite(args.preset, args.seed, camera, args.n_frames)
        for case_id, spec in suite:
            spec.birds.rate_per_frame = args.bird_rate
            seq = sg.generate_encounter(spec, camera, args.seed)
            sg.write_sequence(seq, out / case_id)
        print(f"wrote {len(suite)} {args.preset} sequences to {out}")
    _write_run_json(out, args)
    return 0


def cmd_train(args) -> int:
    cfg = trainer.TrainConfig(
        learn_rate=args.lr, momentum=args.momentum, l2=args.l2, max_epochs=args.epochs,
        batch_size=args.batch_size, crop_size=args.crop, translate_px=args.translate,
        flip_prob=args.flip_prob, seed=args.seed, augment=not args.no_augment,
        loss_normalization=args.loss_normalization,
    )
    cfg.validate()
    data = trainer.read_dataset(args.data)
    net_cfg = segnet.NetworkConfig(encoder_layers=args.layers, filters_per_layer=args.filters, threshold=args.threshold)
    net = segnet.build_network(net_cfg, np.random.default_rng(np.random.SeedSequence([args.seed, 3000])))
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    segnet.save_checkpoint(net, out / "init.ck")
    net, history = trainer.train(net, data, cfg)
    segnet.save_checkpoint(net, out / "model.ck")
    atomic_write_text(out / "loss.csv", trainer.loss_csv(history))
    _write_run_json(out, args)
    print(f"final loss {history[-1]:.6g} after {len(history)} epochs")
    return 0


def _sequence_dirs(root: Path) -> list[Path]:
    """``root`` itself if it holds frames, else its immediate children that do."""
    if not root.is_dir():
        raise ContractError(f"{root}: not a directory")
    if (root / sg.frame_name(0)).exists() or (root / "truth.json").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and ((p / "truth.json").exists() or (p / sg.frame_name(0)).exists()))
    if not dirs:
        raise ContractError(f"{root}: no sequence directories found")
    return dirs


def _frame_paths(d: Path) -> list[Path]:
    paths = sorted(p for p in d.glob("frame_*.pgm") if not p.name.endswith(".mask.pgm"))
    if not paths:
        raise ContractError(f"{d}: no frame_*.pgm files")
    return paths


def _segment_dir(net, d: Path, threshold, batch_size: int) -> np.ndarray:
    frames = []
    for p in _frame_paths(d):
        img = read_pgm(p)
        h, w = img.shape
        if h % net.config.divisor or w % net.config.divisor:
            raise ContractError(f"{p}: {h}x{w} frame is not divisible by {net.config.divisor}")
        frames.append(img)
    probs = segnet.predict_proba(net, np.stack(frames), batch_size)
    t = net.config.threshold if threshold is None else threshold
    return segnet.threshold_mask(probs, t)


def cmd_infer(args) -> int:
    net = segnet.load_checkpoint(args.checkpoint)
    dirs = _sequence_dirs(args.input)
    single = dirs == [args.input]
    total = 0
    for d in dirs:
        masks = _segment_dir(net, d, args.threshold, args.batch_size)
        dest = args.out if single else args.out / d.name
        dest.mkdir(parents=True, exist_ok=True)
        for k, m in enumerate(masks):
            write_pgm(dest / sg.mask_name(k), m.astype(np.uint8) * 255)
        total += len(masks)
    _write_run_json(args.out, args)
    print(f"wrote {total} masks for {len(dirs)} sequence(s) to {args.out}")
    return 0


def _load_cases(args) -> list[evalsuite.EvalCase]:
    if (args.masks_root is None) == (args.checkpoint is None):
        raise UsageError("eval needs exactly one of --masks-root or --checkpoint")
    dirs = _sequence_dirs(args.truth_root)
    net = segnet.load_checkpoint(args.checkpoint) if args.checkpoint else None
    cases = []
    for d in dirs:
        if not (d / "truth.json").exists():
            raise ContractError(f"{d}: missing truth.json")
        _, _, truth = sg.read_truth(d)
        if net is not None:
            masks = _segment_dir(net, d, args.threshold, 8)
        else:
            mdir = args.masks_root if dirs == [args.truth_root] else args.masks_root / d.name
            masks = sg.read_mask_dir(mdir, len(truth)).astype(bool)
        cases.append(evalsuite.EvalCase(d.name, masks, truth, args.frame_rate))
    return cases


def cmd_eval(args) -> int:
    cases = _load_cases(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    name = args.name or args.truth_root.name
    if args.W_range is not None:
        a, b = args.W_range
        points = evalsuite.soc_curve(cases, range(a, b + 1))
        atomic_write_text(out / "soc.csv", evalsuite.soc_csv(points))
        if args.svg:
            atomic_write_text(out / "soc.svg", evalsuite.soc_svg(points))
        print(f"wrote SOC over W={a}..{b} for {len(cases)} cases to {out / 'soc.csv'}")
    elif args.zfa:
        res = evalsuite.zfa_search(cases, args.W_max)
        scan = "W,false_alarms\n" + "".join(f"{w},{fa}\n" for w, fa in res.scanned)
        atomic_write_text(out / "zfa_scan.csv", scan)
        if res.found:
            atomic_write_text(out / "zfa.csv", evalsuite.zfa_csv(res.report))
            text = evalsuite.format_report(name, res.report)
        else:
            atomic_write_text(out / "zfa.csv", "case,W,detected,detection_range_m,false_alarms\n")
            text = f"{name}: no alarm-free window up to W={args.W_max}"
        atomic_write_text(out / "report.txt", text + "\n")
        print(text)
    else:
        rep = evalsuite.evaluate(cases, args.W)
        atomic_write_text(out / "report.csv", evalsuite.zfa_csv(rep))
        text = evalsuite.format_report(name, rep)
        atomic_write_text(out / "report.txt", text + "\n")
        print(text)
    _write_run_json(out, args)
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = _apply_config(parser, argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"bhdetect {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"bhdetect train: error: {exc}", file=sys.stderr)
        return 1
    except (ContractError, ParseError, SpecError, OSError, ValueError) as exc:
        print(f"bhdetect {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
