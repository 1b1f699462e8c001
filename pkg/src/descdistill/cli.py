"""Command-line entry point: ``descdistill <subcommand> [flags]``.

Every subcommand writes its outputs into ``--out`` together with a
``manifest.json`` that lists the resolved configuration, the seed, sha256
hashes of inputs and outputs, and the tool version. Manifests hold no
timings, so identical inputs and seed give byte-identical output
directories (``profile`` excepted: its outputs are wall-clock numbers).

``--config FILE`` reads a JSON object whose keys are flag names
(``batch_size`` or ``batch-size``); explicit command-line flags win.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__

log = logging.getLogger("descdistill")

MANIFEST = "manifest.json"


class CliError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_input(path) -> str:
    p = Path(path)
    if p.is_dir():
        h = hashlib.sha256()
        for f in sorted(q for q in p.iterdir() if q.is_file() and q.name != MANIFEST):
            h.update(f.name.encode())
            h.update(_sha256_file(f).encode())
        return h.hexdigest()
    if not p.is_file():
        raise CliError(f"input not found: {p}")
    return _sha256_file(p)


def _write_manifest(out: Path, command: str, args: argparse.Namespace, inputs: dict, outputs: list[str]) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "verbose", "out")}
    manifest = {
        "tool": "descdistill",
        "version": __version__,
        "command": command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": {str(k): _hash_input(v) for k, v in inputs.items()},
        "outputs": {name: _sha256_file(out / name) for name in outputs},
        "config_file": args.config,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------ subcommands


def cmd_synth(args) -> list[str]:
    from .data import SynthConfig, generate_synthetic, save_ubc

    cfg = SynthConfig(max_rotation_deg=args.max_rotation, max_shift=args.max_shift,
                      noise_std=args.noise)
    store = generate_synthetic(args.points, args.per_point, args.seed, cfg)
    out = _outdir(args)
    save_ubc(store, out)
    log.info("wrote %d patches for %d points to %s", len(store), store.num_points, out)
    names = sorted(p.name for p in out.iterdir() if p.name != MANIFEST)
    _write_manifest(out, "synth", args, {}, names)
    return names


def cmd_import_ubc(args) -> list[str]:
    from .data import PatchStore, load_ubc, save_ubc

    store = load_ubc(args.input)
    if args.max_points:
        ids = sorted(store.groups)[:args.max_points]
        store = store.subset(ids)
    if len(store) == 0:
        raise CliError("imported store is empty")
    store = PatchStore(store.patches, store.point_ids, store.source)
    out = _outdir(args)
    save_ubc(store, out)
    summary = {"patches": len(store), "points": store.num_points, "store_digest": store.digest()}
    _write_json(out / "summary.json", summary)
    names = sorted(p.name for p in out.iterdir() if p.name != MANIFEST)
    _write_manifest(out, "import-ubc", args, {"input": args.input}, names)
    return names


def _train_config(args, stage: str):
    from .losses import LossConfig
    from .train import TrainConfig

    loss = LossConfig(margin=args.margin, alpha_b=args.alpha_b, gamma=args.gamma, beta=args.beta,
                      lambda_r=args.lambda_r, lambda_b=args.lambda_b, eps=args.eps)
    cfg = TrainConfig(stage=stage, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                      seed=args.seed, loss=loss, augment_fraction=args.augment,
                      teacher_path=getattr(args, "teacher", None))
    cfg.validate()
    return cfg


def _save_training(out: Path, name: str, ck, trainlog, cfg) -> list[str]:
    ck.save(out / f"{name}.ckpt")
    trainlog.write_csv(out / "train_log.csv")
    cfg.save(out / "train_config.json")
    return [f"{name}.ckpt", "train_config.json", "train_log.csv"]


def cmd_train_teacher(args) -> list[str]:
    from .data import load_ubc
    from .train import train_teacher

    cfg = _train_config(args, "teacher")
    store = load_ubc(args.data)
    ck, trainlog = train_teacher(store, cfg)
    out = _outdir(args)
    names = _save_training(out, "teacher", ck, trainlog, cfg)
    _write_manifest(out, "train-teacher", args, {"data": args.data}, names)
    return names


def cmd_train_student(args) -> list[str]:
    from .data import load_ubc
    from .models import student_spec
    from .train import ConfigError, train_basic, train_student

    if not args.teacher and args.beta > 0:
        raise ConfigError("train-student requires --teacher CKPT (or --beta 0 for an undistilled student)")
    cfg = _train_config(args, "student")
    store = load_ubc(args.data)
    if args.teacher:
        ck, trainlog = train_student(store, args.teacher, cfg)
    else:
        ck, trainlog = train_basic(store, cfg, student_spec())
    out = _outdir(args)
    names = _save_training(out, "student", ck, trainlog, cfg)
    inputs = {"data": args.data}
    if args.teacher:
        inputs["teacher"] = args.teacher
    _write_manifest(out, "train-student", args, inputs, names)
    return names


def cmd_eval(args) -> list[str]:
    from .data import load_pair_list, load_ubc
    from .descriptor import benchmark_pairs, write_fpr95_csv
    from .models import load_checkpoint

    net = load_checkpoint(args.checkpoint).network
    store = load_ubc(args.data)
    pairs = load_pair_list(args.pair_list, store) if args.pair_list else None
    res = benchmark_pairs(net, store, args.pairs, args.seed, pairs=pairs)
    out = _outdir(args)
    rows = [dict(r, network=net.spec.name, dim=net.output_dim) for r in res.rows()]
    write_fpr95_csv(out / "fpr95.csv", rows)
    with open(out / "pairs.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["idx_a", "idx_b", "is_match", "dist_real", "dist_binary"])
        p = res.pairs
        for row in zip(p.idx_a, p.idx_b, p.is_match, p.dist_real, p.dist_binary):
            w.writerow([int(row[0]), int(row[1]), int(row[2]), repr(float(row[3])), int(row[4])])
    names = ["fpr95.csv", "pairs.csv"]
    inputs = {"checkpoint": args.checkpoint, "data": args.data}
    if args.pair_list:
        inputs["pair_list"] = args.pair_list
    _write_manifest(out, "eval", args, inputs, names)
    print(f"FPR95 real {res.fpr95_real:.4f}  binary {res.fpr95_binary:.4f}  ({len(p.is_match)} pairs)")
    return names


def cmd_profile(args) -> list[str]:
    from .descriptor import profile
    from .models import build_student, build_teacher, load_checkpoint

    nets = [load_checkpoint(c).network for c in args.checkpoint or []]
    for arch in args.arch or []:
        nets.append(build_teacher(args.seed) if arch == "teacher" else build_student(args.seed))
    if not nets:
        raise CliError("profile needs --checkpoint and/or --arch")
    results = [profile(n, args.patches, args.runs, args.seed) for n in nets]
    out = _outdir(args)
    _write_json(out / "profile.json", {"results": results})
    for r in results:
        print(f"{r['network']}: {r['param_count']} params, {r['runtime_ms_median']:.1f} ms "
              f"per {r['num_patches']} patches (median of {r['runs']})")
    _write_manifest(out, "profile", args, {f"checkpoint{i}": c for i, c in enumerate(args.checkpoint or [])},
                    ["profile.json"])
    return ["profile.json"]


def cmd_simulate(args) -> list[str]:
    from . import mrsim

    if args.scenario:
        sc = mrsim.Scenario.load(args.scenario)
    else:
        desc = mrsim.DescriptorSource(kind="model" if args.model else "synthetic", dim=args.dim,
                                      noise=args.noise, checkpoint=args.model, store=args.data)
        sc = mrsim.scripted_scenario(args.robots, args.keyframes, args.shared_places, args.revisit,
                                     seed=args.seed, rate_hz=args.rate, keypoints=args.keypoints,
                                     descriptor=desc, latency=args.latency)
    if sc.descriptor.kind == "model":
        if not sc.descriptor.checkpoint or not sc.descriptor.store:
            raise CliError("model descriptor source needs both --model CKPT and --data DIR")
        from .models import load_checkpoint
        sc.descriptor.dim = load_checkpoint(sc.descriptor.checkpoint).network.output_dim
    report = mrsim.run(sc, mrsim.MatcherConfig(args.tau, args.min_matches))
    out = _outdir(args)
    sc.save(out / "scenario.json")
    (out / "report.json").write_text(report.to_json())
    (out / "timeseries.csv").write_text(report.timeseries_csv())
    bw = mrsim.bandwidth_report(report).to_dict()
    _write_json(out / "bandwidth.json", bw)
    names = ["bandwidth.json", "report.json", "scenario.json", "timeseries.csv"]
    inputs = {}
    for key, path in (("scenario", args.scenario), ("model", sc.descriptor.checkpoint),
                      ("data", sc.descriptor.store)):
        if path:
            inputs[key] = path
    _write_manifest(out, "simulate", args, inputs, names)
    pr = "n/a" if report.precision is None else f"{report.precision:.3f}"
    rc = "n/a" if report.recall is None else f"{report.recall:.3f}"
    print(f"{len(report.loops)} loops, precision {pr}, recall {rc}, "
          f"{bw['mean_kbit_per_s']:.1f} kbit/s per robot")
    return names


def cmd_report(args) -> list[str]:
    """Collect results from run directories into one plot-ready table."""
    rows = []
    for d in map(Path, args.runs):
        mf = d / MANIFEST
        if not mf.is_file():
            raise CliError(f"{d}: no {MANIFEST}")
        manifest = json.loads(mf.read_text())
        base = {"run": d.name, "command": manifest["command"], "seed": manifest.get("seed")}
        if (d / "fpr95.csv").is_file():
            for r in csv.DictReader(open(d / "fpr95.csv")):
                rows.append(dict(base, metric=f"fpr95_{r['mode']}", value=float(r["fpr95"])))
        if (d / "report.json").is_file():
            rep = json.loads((d / "report.json").read_text())
            for key in ("precision", "recall"):
                rows.append(dict(base, metric=key, value=rep[key]))
            bw = rep["bandwidth"]
            rows.append(dict(base, metric="mean_bytes_per_s", value=bw["mean_bytes_per_s"]))
            rows.append(dict(base, metric="mean_kbit_per_s", value=bw["mean_kbit_per_s"]))
        if (d / "train_log.csv").is_file():
            recs = list(csv.DictReader(open(d / "train_log.csv")))
            rows.append(dict(base, metric="final_loss", value=float(recs[-1]["total"])))
        if (d / "profile.json").is_file():
            for r in json.loads((d / "profile.json").read_text())["results"]:
                rows.append(dict(base, metric=f"runtime_ms_{r['network']}", value=r["runtime_ms_median"]))
                rows.append(dict(base, metric=f"params_{r['network']}", value=r["param_count"]))
    out = _outdir(args)
    fields = ["run", "command", "seed", "metric", "value"]
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _write_json(out / "summary.json", {"rows": rows})
    _write_manifest(out, "report", args, {f"run{i}": str(Path(r) / MANIFEST) for i, r in enumerate(args.runs)},
                    ["summary.csv", "summary.json"])
    return ["summary.csv", "summary.json"]


# ------------------------------------------------------------------ parser


def _add_common(p: argparse.ArgumentParser, seed: int = 0) -> None:
    p.add_argument("--seed", type=int, default=seed, help="seed for every random draw (default %(default)s)")
    p.add_argument("--config", metavar="JSON", help="JSON file of flag defaults; explicit flags override it")
    p.add_argument("-o", "--out", required=True, metavar="DIR", help="output directory (created if missing)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_training(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--data", required=True, metavar="DIR", help="UBC-layout patch directory")
    g.add_argument("--epochs", type=int, default=20, help="passes over the point ids (default %(default)s)")
    g.add_argument("--batch-size", type=int, default=128, help="pairs per step, N (default %(default)s)")
    g.add_argument("--lr", type=float, default=0.01, help="Adam learning rate (default %(default)s)")
    g.add_argument("--augment", type=float, default=0.5,
                   help="fraction of pairs rotated by a right angle, in [0, 1] (default %(default)s)")
    g = p.add_argument_group("loss weights")
    g.add_argument("--margin", type=float, default=1.0, help="triplet margin t, L2 units (default %(default)s)")
    g.add_argument("--alpha-b", type=float, default=1.0, help="binarization weight (default %(default)s)")
    g.add_argument("--gamma", type=float, default=1.0, help="binary distillation weight (default %(default)s)")
    g.add_argument("--lambda-r", type=float, default=0.95, help="teacher distance scale (default %(default)s)")
    g.add_argument("--lambda-b", type=float, default=None,
                   help="teacher dot-product scale; default student_dim / teacher_dim")
    g.add_argument("--eps", type=float, default=1e-5, help="soft-sign epsilon (default %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="descdistill", description="Compact binary descriptor distillation pipeline.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic labelled patch set (UBC layout)")
    p.add_argument("--points", type=int, required=True, help="number of 3D points (labels)")
    p.add_argument("--per-point", type=int, default=3, help="patches per point (default %(default)s)")
    p.add_argument("--max-rotation", type=float, default=20.0, help="view rotation range, degrees (default %(default)s)")
    p.add_argument("--max-shift", type=float, default=3.0, help="view shift range, pixels (default %(default)s)")
    p.add_argument("--noise", type=float, default=10.0, help="pixel noise std, grey levels 0-255 (default %(default)s)")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("import-ubc", help="validate and copy a UBC patch directory")
    p.add_argument("input", metavar="DIR", help="directory with patchesNNNN.bmp grids and info.txt")
    p.add_argument("--max-points", type=int, default=0, help="keep only the first N point ids (0 = all)")
    _add_common(p)
    p.set_defaults(func=cmd_import_ubc)

    p = sub.add_parser("train-teacher", help="stage 1: train the 128-d teacher on the basic loss")
    _add_training(p)
    p.add_argument("--beta", type=float, default=0.0, help=argparse.SUPPRESS)
    _add_common(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="stage 2: train the 64-d student against a frozen teacher")
    _add_training(p)
    p.add_argument("--teacher", metavar="CKPT", help="teacher checkpoint (required unless --beta 0)")
    p.add_argument("--beta", type=float, default=2.0, help="distillation weight (default %(default)s)")
    _add_common(p)
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("eval", help="FPR95 on matched/unmatched pairs, real and binary distances")
    p.add_argument("--checkpoint", required=True, metavar="CKPT", help="network checkpoint")
    p.add_argument("--data", required=True, metavar="DIR", help="UBC-layout patch directory")
    p.add_argument("--pairs", type=int, default=2000, help="number of sampled pairs, half matched (default %(default)s)")
    p.add_argument("--pair-list", metavar="FILE", help="explicit UBC m50 pair file instead of sampling")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="parameter count and wall time per batch of patches")
    p.add_argument("--checkpoint", action="append", metavar="CKPT", help="checkpoint to time (repeatable)")
    p.add_argument("--arch", action="append", choices=["teacher", "student"],
                   help="time a freshly initialized architecture (repeatable)")
    p.add_argument("--patches", type=int, default=500, help="patches per timed run (default %(default)s)")
    p.add_argument("--runs", type=int, default=5, help="timed runs, median reported, at least 5 (default %(default)s)")
    _add_common(p)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("simulate", help="multi-robot keyframe exchange and loop detection")
    p.add_argument("--scenario", metavar="JSON", help="scenario file; overrides the scripted-scenario flags")
    p.add_argument("--robots", type=int, default=3, help="number of robots (default %(default)s)")
    p.add_argument("--keyframes", type=int, default=50, help="keyframes per robot (default %(default)s)")
    p.add_argument("--shared-places", type=int, default=10, help="places visible to several robots (default %(default)s)")
    p.add_argument("--revisit", type=float, default=0.3, help="probability a keyframe sees a shared place (default %(default)s)")
    p.add_argument("--rate", type=float, default=7.0, help="keyframe rate, Hz (default %(default)s)")
    p.add_argument("--keypoints", type=int, default=200, help="keypoints per keyframe, K (default %(default)s)")
    p.add_argument("--dim", type=int, default=64, help="descriptor bits, multiple of 8 (default %(default)s)")
    p.add_argument("--noise", type=float, default=0.05, help="bit-flip probability per observation (default %(default)s)")
    p.add_argument("--latency", type=float, default=0.0, help="per-message channel latency, seconds (default %(default)s)")
    p.add_argument("--model", metavar="CKPT", help="describe real patches with this network instead of synthetic bits")
    p.add_argument("--data", metavar="DIR", help="patch directory for --model")
    p.add_argument("--tau", type=int, default=16, help="Hamming match threshold, bits (default %(default)s)")
    p.add_argument("--min-matches", type=int, default=12, help="mutual matches needed for a loop (default %(default)s)")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="merge run directories into summary CSV/JSON")
    p.add_argument("runs", nargs="+", metavar="RUN_DIR", help="directories containing manifest.json")
    _add_common(p)
    p.set_defaults(func=cmd_report)
    return ap


def _apply_config(ap: argparse.ArgumentParser, argv: list[str]) -> None:
    """Install ``--config`` values as subcommand defaults before the real parse."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    path = Path(known.config)
    if not path.is_file():
        raise CliError(f"config file not found: {path}")
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(values, dict):
        raise CliError(f"{path}: expected a JSON object")
    subs = next(a for a in ap._actions if isinstance(a, argparse._SubParsersAction))
    cmd = next((a for a in argv if a in subs.choices), None)
    if cmd is None:
        return
    sp = subs.choices[cmd]
    dests = {a.dest for a in sp._actions}
    values = {k.replace("-", "_"): v for k, v in values.items()}
    unknown = sorted(set(values) - dests)
    if unknown:
        raise CliError(f"{path}: unknown keys for {cmd}: {', '.join(unknown)}")
    for a in sp._actions:
        if a.dest in values:
            a.required = False
    sp.set_defaults(**values)


def main(argv: list[str] | None = None) -> int:
    from .data import DatasetError
    from .mrsim import WireError
    from .models import CheckpointError

    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        _apply_config(ap, argv)
    except CliError as exc:
        print(f"descdistill: error: {exc}", file=sys.stderr)
        return 2
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, DatasetError, CheckpointError, WireError, ValueError, OSError) as exc:
        print(f"descdistill {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
