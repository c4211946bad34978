"""Command-line entry point: ``aulacaps <command> [flags] --out DIR``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Errors are printed to
stderr as one line, ``error: <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import model as M
from . import train as T

log = logging.getLogger("aulacaps")

TRAIN_FIELDS = ("lr0", "decay", "epochs", "batch_size", "patience", "val_fraction", "threshold")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _au(value: str) -> int:
    """AU by name ("AU4"), FACS id ("4") -> label column."""
    v = value.upper().removeprefix("AU")
    try:
        return D.au_index(int(v))
    except (ValueError, KeyError) as exc:
        raise argparse.ArgumentTypeError(f"unknown AU {value!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aulacaps", description="Dual-stream capsule network for facial action unit detection.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--out", required=out_required, type=Path, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", type=Path, help="JSON file of flag values; explicit flags win")

    g = sub.add_parser("gen-data", help="write a synthetic AU dataset")
    common(g)
    g.add_argument("--subjects", type=int, default=6)
    g.add_argument("--frames", type=int, default=120)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--active-aus", default="4,7,17", help="comma-separated FACS ids")
    g.add_argument("--noise", type=float, default=3.0)

    tr = sub.add_parser("train", help="subject-wise k-fold training")
    common(tr)
    tr.add_argument("--data", type=Path, required=True)
    tr.add_argument("--folds", type=int, default=3)
    tr.add_argument("--preset", choices=sorted(M.PRESETS), help="model preset (default: from frame size)")
    tr.add_argument("--workers", type=int, default=1, help="data loading workers (loading is in-memory)")
    defaults = T.TrainConfig()
    for name in TRAIN_FIELDS:
        tr.add_argument("--" + name.replace("_", "-"), type=type(getattr(defaults, name)), default=None)

    for name, helptext in (("eval", "re-evaluate a training run"), ("ablate", "single-stream ablation heads")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--run", type=Path, required=True)
        sp.add_argument("--data", type=Path, required=True)
        sp.add_argument("--threshold", type=float, default=0.5)
        if name == "ablate":
            sp.add_argument("--stream", choices=("2d", "3d", "both"), default="both")
            for f in ("lr0", "decay", "epochs", "batch_size", "patience"):
                sp.add_argument("--" + f.replace("_", "-"), type=type(getattr(defaults, f)), default=None)

    for name, helptext in (
        ("trace", "per-frame probabilities of one subject"),
        ("saliency", "guided-backprop saliency for one AU"),
        ("reconstruct", "decoder reconstructions of frames of interest"),
    ):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--run", type=Path, required=True)
        sp.add_argument("--data", type=Path, required=True)
        sp.add_argument("--subject", required=True)
        if name == "saliency":
            sp.add_argument("--au", type=_au, required=True, help="AU name or FACS id, e.g. AU4")
            sp.add_argument("--frame", type=int, help="frame index (default: the first 8 frames where the AU is active)")
        if name == "reconstruct":
            sp.add_argument("--frames", default="0,20,40,60,80,100")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(gc, out_required=False)
    gc.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    return p


def _apply_config_file(parser: argparse.ArgumentParser, args: argparse.Namespace, argv) -> argparse.Namespace:
    """Values from ``--config`` fill every flag not given explicitly on the command line."""
    if getattr(args, "config", None) is None:
        return args
    try:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    explicit = {a.split("=")[0].lstrip("-").replace("-", "_") for a in argv if a.startswith("--")}
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if dest == "model":
            continue
        if not hasattr(args, dest):
            raise UsageError(f"config key {key!r} is not a flag of {args.command}")
        if dest not in explicit:
            setattr(args, dest, Path(value) if isinstance(getattr(args, dest), Path) else value)
    args.model_overrides = doc.get("model", {})
    return args


def _echo(args: argparse.Namespace, argv, extra: dict | None = None) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    parsed = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())}
    doc = {"argv": list(argv), "parsed": parsed}
    if extra:
        doc["resolved"] = extra
    (out / "run_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load(path):
    try:
        return D.load_dataset(path)
    except FileNotFoundError as exc:
        raise D.DatasetError(f"unreadable dataset {path}: {exc}") from exc


def _model_config(args, manifest, sequences) -> M.ModelConfig:
    size = sequences[0].frames.shape[1]
    preset = args.preset or ("full" if size == 96 else "desk")
    cfg = M.PRESETS[preset]()
    overrides = dict(getattr(args, "model_overrides", {}) or {})
    if "input_size" not in overrides and size != cfg.input_size:
        overrides["input_size"] = size
    channels = sequences[0].frames.shape[-1]
    if channels != cfg.channels:
        overrides["channels"] = channels
    if overrides:
        cfg = M.ModelConfig.from_dict({**cfg.to_dict(), **overrides})
    cfg.validate()
    return cfg


def _train_config(args) -> T.TrainConfig:
    kw = {f: getattr(args, f) for f in TRAIN_FIELDS if getattr(args, f, None) is not None}
    return T.TrainConfig(seed=args.seed, **kw)


# --- commands ----------------------------------------------------------------


def cmd_gen_data(args, argv) -> None:
    active = tuple(int(a) for a in str(args.active_aus).split(",") if a.strip())
    spec = D.SynthSpec(args.subjects, args.frames, active, args.seed, args.size, args.noise)
    ds = D.synth_generate(spec)
    D.save_dataset(args.out, ds.sequences)
    _echo(args, argv)
    print(f"wrote {len(ds.sequences)} subjects x {args.frames} frames to {args.out}")


def cmd_train(args, argv) -> None:
    from . import plots

    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    manifest, sequences = _load(args.data)
    model_cfg = _model_config(args, manifest, sequences)
    cfg = _train_config(args)
    folds = D.split_folds([v.subject_id for v in sequences], args.folds, seed=args.seed)
    _echo(args, argv, {"model": model_cfg.to_dict(), "train": vars(cfg), "folds": folds.folds})
    result = T.train(sequences, folds, model_cfg, cfg, out_dir=args.out)
    out = Path(args.out)
    plots.plot_training_curves([row for f in result.folds for row in f.log], out / "training_curves.png")
    plots.plot_coactivation(np.asarray(result.report.co_activation), out / "coactivation.png")
    seqs = {v.subject_id: v for v in sequences}
    for f in result.folds:
        for sid in f.test_subjects:
            rows = T.trace_rows(seqs[sid].labels, f.test_probs[sid])
            plots.plot_trace(rows, result.active_aus, out / f"trace_{sid}.png", title=sid)
    print(f"avg_f1={result.report.avg_f1:.4f} over {','.join(result.report.evaluated_aus)}")


def _run(args):
    manifest, sequences = _load(args.data)
    try:
        result = T.load_run(args.run, sequences)
    except FileNotFoundError as exc:
        raise D.DatasetError(f"unreadable run directory {args.run}: {exc}") from exc
    return manifest, sequences, result


def cmd_eval(args, argv) -> None:
    from . import plots

    _, sequences, result = _run(args)
    seqs = {v.subject_id: v for v in sequences}
    report = T.collate(result.folds, seqs, args.threshold, result.active_aus)
    _echo(args, argv)
    out = Path(args.out)
    (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    with open(out / "metrics.csv", "w", encoding="utf-8") as fh:
        fh.write("au,precision,recall,f1\n")
        for i, name in enumerate(D.AU_NAMES):
            fh.write(f"{name},{report.precision[i]:.6f},{report.recall[i]:.6f},{report.f1[i]:.6f}\n")
        fh.write(f"avg,,,{report.avg_f1:.6f}\n")
    T.write_matrix_csv(out / "coactivation.csv", np.asarray(report.co_activation))
    plots.plot_coactivation(np.asarray(report.co_activation), out / "coactivation.png")
    print(f"avg_f1={report.avg_f1:.4f}")


def cmd_ablate(args, argv) -> None:
    import matplotlib.pyplot as plt

    from . import plots

    _, sequences, result = _run(args)
    kw = {f: getattr(args, f) for f in ("lr0", "decay", "epochs", "batch_size", "patience") if getattr(args, f) is not None}
    cfg = T.TrainConfig(seed=args.seed, threshold=args.threshold, **kw)
    streams = ("2d", "3d") if args.stream == "both" else (args.stream,)
    reports = {"full": T.collate(result.folds, {v.subject_id: v for v in sequences}, args.threshold, result.active_aus)}
    for s in streams:
        reports[s] = T.ablate(result, sequences, s, cfg)
    _echo(args, argv, {"train": vars(cfg)})
    out = Path(args.out)
    with open(out / "ablation.csv", "w", encoding="utf-8") as fh:
        fh.write("model,avg_f1," + ",".join(D.AU_NAMES[i] for i in result.active_aus) + "\n")
        for name, r in reports.items():
            fh.write(f"{name},{r.avg_f1:.6f}," + ",".join(f"{r.f1[i]:.6f}" for i in result.active_aus) + "\n")
    (out / "ablation.json").write_text(
        json.dumps({k: json.loads(r.to_json()) for k, r in reports.items()}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(list(reports), [r.avg_f1 for r in reports.values()], color=["C0", "C1", "C2"][: len(reports)])
    ax.set_ylabel("avg F1")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    plots._save(fig, out / "ablation.png")
    print(" ".join(f"{k}={r.avg_f1:.4f}" for k, r in reports.items()))


def _fold_for(result: T.TrainResult, sid: str) -> T.FoldResult:
    for f in result.folds:
        if sid in f.test_subjects:
            return f
    raise UsageError(f"subject {sid!r} is not in any test fold of the run")


def cmd_trace(args, argv) -> None:
    from . import plots

    _, sequences, result = _run(args)
    fold = _fold_for(result, args.subject)
    video = {v.subject_id: v for v in sequences}[args.subject]
    rows = T.temporal_trace(fold.model, video)
    _echo(args, argv)
    out = Path(args.out)
    T.write_trace_csv(out / f"trace_{args.subject}.csv", rows)
    plots.plot_trace(rows, result.active_aus, out / f"trace_{args.subject}.png", title=args.subject)
    hits = {D.AU_NAMES[i]: T.transition_hits(rows[:, 1 + i], rows[:, 13 + i]) for i in result.active_aus}
    (out / f"transitions_{args.subject}.json").write_text(
        json.dumps({k: {"hits": h, "transitions": n} for k, (h, n) in hits.items()}, indent=2) + "\n",
        encoding="utf-8",
    )
    print(" ".join(f"{k}={h}/{n}" for k, (h, n) in hits.items()))


def cmd_saliency(args, argv) -> None:
    from . import plots

    _, sequences, result = _run(args)
    fold = _fold_for(result, args.subject)
    video = {v.subject_id: v for v in sequences}[args.subject]
    if args.frame is not None:
        if not 0 <= args.frame < len(video):
            raise UsageError(f"--frame must be in 0..{len(video) - 1}")
        frames = [args.frame]
    else:
        frames = np.flatnonzero(video.labels[:, args.au]).tolist()[:8]
        if not frames:
            raise UsageError(f"{D.AU_NAMES[args.au]} is never active for {args.subject}; pass --frame")
    rows = D.window_indices(len(video), fold.model.config.window_N)
    _echo(args, argv)
    out = Path(args.out)
    name = D.AU_NAMES[args.au]
    for t in frames:
        sal = T.guided_backprop_saliency(fold.model, video.frames[rows[t]][None], args.au)
        stem = f"saliency_{args.subject}_{name}_{t:04d}"
        np.savetxt(out / f"{stem}.csv", sal, delimiter=",", fmt="%.6f")
        plots.plot_saliency(video.frames[t, :, :, 0], sal, out / f"{stem}.png", title=f"{args.subject} {name} frame {t}")
    print(f"wrote {len(frames)} saliency maps for {name}")


def cmd_reconstruct(args, argv) -> None:
    from . import plots

    _, sequences, result = _run(args)
    fold = _fold_for(result, args.subject)
    video = {v.subject_id: v for v in sequences}[args.subject]
    try:
        frames = [int(f) for f in str(args.frames).split(",") if f.strip()]
    except ValueError as exc:
        raise UsageError(f"--frames must be comma-separated integers: {exc}") from exc
    frames = [f for f in frames if 0 <= f < len(video)]
    if not frames:
        raise UsageError("no valid frame indices in --frames")
    originals, recons = T.reconstruct_frames(fold.model, video, frames)
    _echo(args, argv)
    out = Path(args.out)
    with open(out / "reconstruction.csv", "w", encoding="utf-8") as fh:
        fh.write("frame,mse\n")
        for t, o, r in zip(frames, originals, recons):
            fh.write(f"{t},{float(np.mean((o - r) ** 2)):.6f}\n")
    plots.plot_reconstructions(originals, recons, out / f"reconstruction_{args.subject}.png")
    print(f"reconstructed {len(frames)} frames")


def cmd_gradcheck(args, argv) -> int:
    from . import gradcheck

    results, elapsed = gradcheck.run_suite(tuple(range(args.seed, args.seed + args.seeds)))
    lines = [f"{r.name},{r.max_rel_error:.3e},{r.tolerance:.0e},{'ok' if r.ok else 'FAIL'}" for r in results]
    print("check,max_rel_error,tolerance,status")
    print("\n".join(lines))
    print(f"# {len(results)} checks over {args.seeds} seeds in {elapsed:.1f}s")
    if args.out is not None:
        _echo(args, argv)
        (Path(args.out) / "gradcheck.csv").write_text(
            "check,max_rel_error,tolerance,status\n" + "\n".join(lines) + "\n", encoding="utf-8"
        )
    failed = [r.name for r in results if not r.ok]
    if failed:
        raise RuntimeError(f"gradient check failed for {','.join(failed)}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "trace": cmd_trace,
    "saliency": cmd_saliency,
    "reconstruct": cmd_reconstruct,
    "gradcheck": cmd_gradcheck,
}


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config_file(parser, args, argv)
        logging.basicConfig(level=str(args.log_level).upper(), format="%(message)s", stream=sys.stderr)
        COMMANDS[args.command](args, argv)
        return 0
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except D.DatasetError as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 2


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


def main() -> None:
    sys.exit(dispatch())
