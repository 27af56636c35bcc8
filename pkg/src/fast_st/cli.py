"""Command-line entry point: ``fast-st <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .analysis import (
    GROUP_NAMES,
    CurvePoint,
    degradation_groups,
    eligible,
    newest_token_mean,
    per_step_stats,
    predicted_context_similarity,
    reverse_position_profile,
    similarity_matrix,
    write_curve_csv,
)
from .corpus import Utterance, config_to_dict, read_jsonl, write_jsonl
from .fad import FadTrainer, MaskCountError
from .metrics import DelayTrace, aggregate
from .model import SpeechTranslator
from .pipeline import PROFILES, get_profile, make_splits, run_experiment, write_outputs
from .streaming import StreamPolicy, read_traces, sweep, trace_record, write_traces
from .training import OfflineTrainer, TrainingDivergence, pretrain_acoustic

logger = logging.getLogger("fast_st")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
SPLITS = ("train", "dev", "test")
METRIC_FIELDS = ["k", "m", "p", "mode", "BLEU", "AL", "AP", "DAL"]


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


# -- shared helpers ----------------------------------------------------------------


def _profile(args):
    return get_profile(args.profile, args.seed)


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _jsonl_logger(path: Path, quiet: bool):
    fh = open(path, "a")

    def log(rec: dict):
        fh.write(json.dumps(rec) + "\n")
        fh.flush()
        if not quiet and ("dev_st" in rec or rec.get("step", 0) % 50 == 0):
            logger.info("%s", rec)

    log.close = fh.close
    return log


def _load_split(data_dir: str, split: str) -> list[Utterance]:
    path = Path(data_dir) / f"{split}.jsonl"
    if not path.exists():
        raise DataError(f"missing corpus file {path}")
    try:
        corpus = read_jsonl(path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if not corpus:
        raise DataError(f"{path}: no data")
    return corpus


def _splits(args, profile) -> dict[str, list[Utterance]]:
    if args.data:
        return {s: _load_split(args.data, s) for s in SPLITS}
    return make_splits(profile.corpus)


def _load_model(path: str, profile) -> SpeechTranslator:
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing checkpoint {p}")
    try:
        state = checkpoint.load(p)
    except checkpoint.CheckpointError as exc:
        raise DataError(str(exc)) from exc
    if any(k.startswith("model.") for k in state):
        state = {k[6:]: v for k, v in state.items() if k.startswith("model.")}
    model = SpeechTranslator(profile.model, profile.offline.seed)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{p}: {exc}") from exc
    return model


def _write_csv(path: Path, fields, rows) -> None:
    from .pipeline import _write_csv as write

    write(path, fields, rows)


# -- subcommands ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    profile = _profile(args)
    cfg = profile.corpus
    if args.utterances is not None:
        cfg = dataclasses.replace(cfg, n_utterances=args.utterances)
    out = _out(args)
    targets = [out / f"{s}.jsonl" for s in SPLITS]
    if not args.force and any(t.exists() for t in targets):
        raise UsageError(f"{out} already holds a corpus; pass --force to overwrite")
    splits = make_splits(cfg)
    for split, path in zip(SPLITS, targets):
        write_jsonl(path, splits[split])
    (out / "corpus_config.json").write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")
    logger.info("wrote %d/%d/%d utterances to %s", *(len(splits[s]) for s in SPLITS), out)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    profile = _profile(args)
    splits = _splits(args, profile)
    out = _out(args)
    model = SpeechTranslator(profile.model, args.seed)
    log = _jsonl_logger(out / "pretrain_log.jsonl", args.quiet)
    cfg = profile.offline if args.steps is None else dataclasses.replace(profile.offline, pretrain_steps=args.steps)
    try:
        pretrain_acoustic(model, splits["train"], cfg, log)
    finally:
        log.close()
    checkpoint.save(out / "pretrained.ckpt", model.state_dict())
    return EXIT_OK


def cmd_train_offline(args) -> int:
    profile = _profile(args)
    splits = _splits(args, profile)
    out = _out(args)
    cfg = profile.offline
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, stage1_epochs=args.epochs, stage2_epochs=args.epochs)
    model = _load_model(args.init, profile) if args.init else SpeechTranslator(profile.model, args.seed)
    log = _jsonl_logger(out / "offline_log.jsonl", args.quiet)
    trainer = OfflineTrainer(model, splits["train"], splits["dev"], cfg, log)
    state_path = out / "offline_state.ckpt"
    if args.resume:
        if not state_path.exists():
            raise DataError(f"nothing to resume: {state_path} missing")
        trainer.load_state_dict(checkpoint.load(state_path))
    try:
        if not args.init and not args.resume:
            pretrain_acoustic(model, splits["train"], cfg, log)
        while not trainer.done:
            if args.max_epochs is not None and args.max_epochs <= 0:
                break
            trainer.step_epoch()
            checkpoint.save(state_path, trainer.state_dict())
            if args.max_epochs is not None:
                args.max_epochs -= 1
        if trainer.done:
            res = trainer.finish()
            checkpoint.save(out / "teacher.ckpt", model.state_dict())
            logger.info("dev ST loss: stage 1 %.4f, stage 2 %.4f", res.dev_stage1, res.dev_stage2)
    finally:
        log.close()
    return EXIT_OK


def cmd_train_fad(args) -> int:
    profile = _profile(args)
    splits = _splits(args, profile)
    out = _out(args)
    teacher = _load_model(args.teacher, profile)
    m = profile.m if args.m is None else args.m
    overrides = dict(m=m, allow_small_m=args.allow_small_m)
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.no_w2v_loss:
        overrides["use_w2v_loss"] = False
    if args.no_cif_loss:
        overrides["use_cif_loss"] = False
    if args.no_masks:
        overrides["student_masks"] = False
    try:
        cfg = dataclasses.replace(profile.fad, **overrides)
    except MaskCountError as exc:
        raise UsageError(f"{exc}; pass --allow-small-m to override") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    log = _jsonl_logger(out / "fad_log.jsonl", args.quiet)
    trainer = FadTrainer(teacher, splits["train"], cfg, log)
    state_path = out / "fad_state.ckpt"
    if args.resume:
        if not state_path.exists():
            raise DataError(f"nothing to resume: {state_path} missing")
        trainer.load_state_dict(checkpoint.load(state_path))
    try:
        while not trainer.done:
            if args.max_epochs is not None and args.max_epochs <= 0:
                break
            trainer.step_epoch()
            checkpoint.save(state_path, trainer.state_dict())
            if args.max_epochs is not None:
                args.max_epochs -= 1
        if trainer.done:
            checkpoint.save(out / "student.ckpt", trainer.student.state_dict())
    finally:
        log.close()
    return EXIT_OK


def cmd_eval_streaming(args) -> int:
    profile = _profile(args)
    out = _out(args)
    test = _load_split(args.data, "test") if args.data else make_splits(profile.corpus)["test"]
    if args.limit:
        test = test[: args.limit]
    teacher = _load_model(args.teacher, profile)
    m = profile.m if args.m is None else args.m
    k_list = args.k_list or list(profile.k_list)
    modes = _modes(args.modes)
    models = {"baseline": (teacher, False), "fai": (teacher, True)}
    if "fast" in modes:
        if not args.student:
            raise UsageError("mode 'fast' needs --student")
        models["fast"] = (_load_model(args.student, profile), True)
    rows, traces = [], []
    for mode in modes:
        model, fai = models[mode]
        base = StreamPolicy(1, m, args.p, args.chunk, fai)
        result = sweep(model, test, k_list, base, mode)
        for row in result.rows:
            rows.append(row.csv_row())
        for k, sessions in result.sessions.items():
            policy = dataclasses.replace(base, k=k)
            traces.extend(trace_record(s, u, policy, mode) for s, u in zip(sessions, test))
    write_traces(out / "traces.jsonl", traces)
    _write_csv(out / "metrics.csv", METRIC_FIELDS, rows)
    if not args.quiet:
        for r in rows:
            print(",".join(str(r[f]) for f in METRIC_FIELDS))
    return EXIT_OK


def _modes(text: str) -> list[str]:
    modes = ["baseline", "fai", "fast"] if text == "all" else [t.strip() for t in text.split(",")]
    bad = [m for m in modes if m not in ("baseline", "fai", "fast")]
    if bad:
        raise UsageError(f"unknown mode(s) {bad}")
    return modes


def cmd_analyze_gap(args) -> int:
    profile = _profile(args)
    out = _out(args)
    test = _load_split(args.data, "test") if args.data else make_splits(profile.corpus)["test"]
    teacher = _load_model(args.teacher, profile)
    m = profile.m if args.m is None else args.m
    modes = _modes(args.mode)
    models = {"baseline": (teacher, 0), "fai": (teacher, m)}
    if "fast" in modes:
        if not args.student:
            raise UsageError("mode 'fast' needs --student")
        models["fast"] = (_load_model(args.student, profile), m)
    utts = eligible(teacher, test)
    if args.limit:
        utts = utts[: args.limit]
    if not utts:
        raise DataError("no utterances inside the analysis length window")
    profile_pts, step_pts, group_rows = [], [], []
    for mode in modes:
        model, masks = models[mode]
        mats = [similarity_matrix(model, u, masks, teacher) for u in utts]
        profile_pts.extend(reverse_position_profile(mats, args.max_tau, mode))
        for name, pts in per_step_stats(mats, mode).items():
            step_pts.extend(dataclasses.replace(p, mode=f"{mode}:{name}") for p in pts)
        scores = [newest_token_mean(S) for S in mats]
        for label, members in zip(GROUP_NAMES, degradation_groups(scores)):
            group_rows.append({"group": label, "mode": mode, "mean": f"{np.mean([scores[i] for i in members]):.10f}",
                               "count": len(members), "ids": " ".join(str(utts[i].uid) for i in members)})
    write_curve_csv(out / "gap_profile.csv", profile_pts)
    write_curve_csv(out / "gap_per_step.csv", step_pts)
    _write_csv(out / "gap_groups.csv", ["group", "mode", "mean", "count", "ids"], group_rows)
    if args.context:
        ctx: list[CurvePoint] = []
        for mode in modes:
            model, masks = models[mode]
            if masks > 0:
                ctx.extend(predicted_context_similarity(model, utts, masks, mode))
        write_curve_csv(out / "gap_context.csv", ctx)
    if not args.quiet:
        for p in profile_pts:
            print(f"{p.mode},{p.x},{p.mean:.4f},{p.count}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    out = _out(args)
    records = []
    for path in args.traces:
        if not Path(path).exists():
            raise DataError(f"missing trace file {path}")
        try:
            records.extend(read_traces(path))
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    if not records:
        raise DataError("no data: trace files are empty")
    groups: dict[tuple, list[dict]] = {}
    for rec in records:
        key = (rec.get("k", ""), rec.get("m", ""), rec.get("p", ""), rec.get("mode", ""))
        groups.setdefault(key, []).append(rec)
    rows = []
    for key in sorted(groups, key=lambda t: tuple(str(x) for x in t)):
        recs = groups[key]
        try:
            traces = [DelayTrace(float(r["src_ms"]), [float(d) for d in r["delays_ms"]]) for r in recs]
            for t in traces:
                t.validate()
        except (ValueError, TypeError) as exc:
            raise DataError(f"invalid trace: {exc}") from exc
        rep = aggregate([r["hyp"] for r in recs], [r["ref"] for r in recs], traces)
        k, m, p, mode = key
        rows.append({"k": k, "m": m, "p": p, "mode": mode, "BLEU": f"{rep.bleu:.10f}", "AL": f"{rep.al_ms:.10f}",
                     "AP": f"{rep.ap:.10f}", "DAL": f"{rep.dal_ms:.10f}"})
    _write_csv(out / "metrics.csv", METRIC_FIELDS, rows)
    if not args.quiet:
        print(",".join(METRIC_FIELDS))
        for r in rows:
            print(",".join(str(r[f]) for f in METRIC_FIELDS))
    return EXIT_OK


def cmd_run(args) -> int:
    profile = _profile(args)
    out = _out(args)
    log = _jsonl_logger(out / "run_log.jsonl", args.quiet)
    try:
        result = run_experiment(profile, tuple(args.extra_m or ()), out_dir=out, log=log)
    finally:
        log.close()
    checkpoint.save(out / "teacher.ckpt", result.teacher.state_dict())
    checkpoint.save(out / "student.ckpt", result.students[profile.m].state_dict())
    (out / "profile.json").write_text(json.dumps(profile.to_dict(), indent=2, sort_keys=True, default=list) + "\n")
    if not args.quiet:
        print(f"offline BLEU {result.offline_bleu:.2f}")
        for mode, sw in result.sweeps.items():
            for r in sw.rows:
                print(f"{mode} k={r.k} BLEU={r.report.bleu:.2f} AL={r.report.al_ms:.1f}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="global seed (default 0)")
    common.add_argument("--out-dir", default=".", help="directory for outputs (default .)")
    common.add_argument("--quiet", action="store_true", help="only warnings and errors")
    common.add_argument("--profile", choices=sorted(PROFILES), default="paper",
                        help="hyperparameter bundle (default paper: m=50)")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="corpus directory from gen-data (default: regenerate from profile and seed)")

    parser = _Parser(prog="fast-st", description="Toy-scale future-aware streaming speech translation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic corpus as JSONL")
    p.add_argument("--utterances", type=int, help="training utterance count")
    p.add_argument("--force", action="store_true", help="overwrite an existing corpus")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[common, data], help="masked-reconstruction pretraining")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-offline", parents=[common, data], help="two-stage offline training")
    p.add_argument("--init", help="pretrained checkpoint (default: pretrain first)")
    p.add_argument("--epochs", type=int, help="epochs per stage")
    p.add_argument("--resume", action="store_true", help="continue from offline_state.ckpt in --out-dir")
    p.add_argument("--max-epochs", type=int, help="stop after this many epochs (resumable)")
    p.set_defaults(func=cmd_train_offline)

    p = sub.add_parser("train-fad", parents=[common, data], help="future-aware distillation")
    p.add_argument("--teacher", required=True)
    p.add_argument("--m", type=int, help="future context length")
    p.add_argument("--allow-small-m", action="store_true", help="permit m <= 10")
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-w2v-loss", action="store_true", help="ablation: drop the representation loss")
    p.add_argument("--no-cif-loss", action="store_true", help="ablation: drop the CIF weight loss")
    p.add_argument("--no-masks", action="store_true", help="ablation: student sees no mask embeddings")
    p.add_argument("--resume", action="store_true", help="continue from fad_state.ckpt in --out-dir")
    p.add_argument("--max-epochs", type=int)
    p.set_defaults(func=cmd_train_fad)

    p = sub.add_parser("eval-streaming", parents=[common, data], help="wait-k sweep with delay traces")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student")
    p.add_argument("--modes", default="baseline,fai", help="comma list of baseline,fai,fast or 'all'")
    p.add_argument("--k-list", type=_int_list)
    p.add_argument("--m", type=int)
    p.add_argument("--p", type=float, default=1.0, help="discard rate (default 1.0)")
    p.add_argument("--chunk", type=int, default=2, help="frames per READ (default 2 = 40 ms)")
    p.add_argument("--limit", type=int, help="evaluate only the first N test utterances")
    p.set_defaults(func=cmd_eval_streaming)

    p = sub.add_parser("analyze-gap", parents=[common, data], help="streaming/offline representation gap")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student")
    p.add_argument("--mode", default="baseline", help="comma list of baseline,fai,fast or 'all'")
    p.add_argument("--m", type=int)
    p.add_argument("--max-tau", type=int, default=20)
    p.add_argument("--context", action="store_true", help="also write predicted-context similarity")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_analyze_gap)

    p = sub.add_parser("metrics", parents=[common], help="BLEU / AL / AP / DAL from trace files")
    p.add_argument("traces", nargs="+")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("run", parents=[common], help="full pipeline: data, teacher, student, sweeps, gap")
    p.add_argument("--extra-m", type=_int_list, help="train and sweep extra students with these m")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fast-st: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"fast-st: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"fast-st: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
