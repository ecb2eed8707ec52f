"""Command-line entry point: ``fraudgan <command> [flags]``.

Usage errors exit with status 2 (argparse); runtime failures exit with 1
and print one JSON object ``{"error": ..., "message": ...}`` on stderr.
Output files carry no timestamps, so the same seed and flags reproduce them
byte for byte.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import corpus as cp
from .autodiff import Rng
from .config import TrainConfig, desk_config, dump_config, load_config
from .discriminator import FRAUD_CLASS, Batch
from .experiments import KINDS, Dataset, run_experiment
from .metrics import evaluate
from .trainer import adversarial_train, load_models, synth_from_config

log = logging.getLogger("fraudgan")

PROB_FIELD = "fraud_probability"


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# argument parsing


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _ratio(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("must lie strictly between 0 and 1")
    return v


def _score(text: str) -> int:
    v = int(text)
    if v not in (-1, 1, 2, 3, 4, 5):
        raise argparse.ArgumentTypeError("score must be 1..5 or -1/1")
    return v


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", help="run config file (key = value lines)")
    p.add_argument("--seed", type=_seed, help="seed for every random stream (overrides the config)")
    p.add_argument("--threads", type=_positive, default=1, help="worker processes for independent runs")
    p.add_argument("--out", required=True, help=out_help)


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="JSONL corpus (default: synthetic corpus from the config)")
    p.add_argument("--supervision", type=_ratio)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--rollouts", type=_positive)
    p.add_argument("--no-regularizer", action="store_true")
    p.add_argument("--no-score-in-g", action="store_true")
    p.add_argument("--no-score-in-d", action="store_true")
    p.add_argument("--features", help="comma list over mnr, rl, se, sr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fraudgan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic JSONL corpus")
    _common(p, "output JSONL path")
    p.add_argument("--n", type=_positive, help="number of reviews (default: synth_size)")

    p = sub.add_parser("train", help="pretrain and run the adversarial loop")
    _common(p, "output directory for the checkpoint and metrics")
    _train_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--iterations", type=int, help="outer adversarial iterations")

    p = sub.add_parser("generate", help="sample reviews from a trained generator")
    _common(p, "output JSONL path")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--score", type=_score, required=True)
    p.add_argument("--n", type=_positive, default=10)

    p = sub.add_parser("detect", help="add D_g fraud probabilities to a JSONL file")
    _common(p, "output JSONL path")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)

    p = sub.add_parser("evaluate", help="AP/AUC/accuracy of a scored JSONL file")
    _common(p, "output JSON path")
    p.add_argument("--input", required=True)
    p.add_argument("--field", default=PROB_FIELD)

    p = sub.add_parser("experiment", help="run an experiment grid")
    _common(p, "output directory for report CSVs")
    _train_flags(p)
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds from --seed")
    p.add_argument("--dataset", action="append", default=[], metavar="NAME=PATH",
                   help="named JSONL corpus (repeatable; default: the synthetic corpus)")

    p = sub.add_parser("convert-dataset", help="map an external CSV layout to canonical JSONL")
    p.add_argument("--layout", required=True, choices=cp.LAYOUTS)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=_positive, default=1)
    return parser


def resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else desk_config()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    for key in ("supervision", "lam", "rollouts", "features", "data"):
        v = getattr(args, key, None)
        if v is not None:
            changes[key] = v
    if getattr(args, "iterations", None) is not None:
        changes["adv_iterations"] = args.iterations
    if getattr(args, "no_regularizer", False):
        changes["regularizer_on"] = False
    if getattr(args, "no_score_in_g", False):
        changes["score_in_g"] = False
    if getattr(args, "no_score_in_d", False):
        changes["score_in_d"] = False
    return cfg.with_(**changes).validate()


# ---------------------------------------------------------------------------
# commands


def _same_file(a, b) -> bool:
    return Path(a).resolve() == Path(b).resolve()


def _read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise cp.CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
    return rows


def _write_jsonl(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in rows:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def cmd_synth_data(args) -> dict:
    cfg = resolve_config(args)
    if args.n:
        cfg = cfg.with_(synth_size=args.n)
    reviews = synth_from_config(cfg)
    cp.write_corpus(reviews, args.out)
    return {"written": len(reviews), "out": args.out}


def cmd_train(args) -> dict:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(dump_config(cfg), encoding="utf-8")
    metrics = open(out / "metrics.jsonl", "w", encoding="utf-8")
    with metrics:
        def emit(rep):
            metrics.write(json.dumps(rep.as_dict(), sort_keys=True) + "\n")
            metrics.flush()
            log.info("iteration %d: AP %.4f AUC %.4f accuracy %.4f", rep.iteration, rep.ap, rep.auc, rep.accuracy)

        result = adversarial_train(cfg, checkpoint_path=out / "model.sgan", resume=args.resume, on_report=emit)
    final = result.final
    return {"iteration": final.iteration, "ap": final.ap, "auc": final.auc, "accuracy": final.accuracy,
            "checkpoint": str(out / "model.sgan")}


def cmd_generate(args) -> dict:
    models, data, cfg = load_models(args.checkpoint)
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    try:
        cat = cp.score_to_category(args.score, cfg.C)
    except (ValueError, cp.CorpusError) as exc:
        raise CommandError(f"score {args.score} does not fit C={cfg.C}: {exc}") from None
    rng = Rng(cfg.seed, f"generate/{args.score}")
    ids, _, _ = models.gen.sample_ids(np.full(args.n, cat), rng)
    rows = []
    for i, row in enumerate(ids):
        tokens = cp.decode(row, data.vocab)
        rows.append({"review_id": f"gen-{args.score}-{i}", "text": " ".join(tokens), "score": args.score,
                     "label": "fraud", "origin": "bot"})
    _write_jsonl(rows, args.out)
    return {"written": len(rows), "out": args.out}


def _review_for_scoring(rec: dict, where: str) -> cp.Review:
    # the label does not influence scoring, so unlabeled input is accepted
    return cp.review_from_record({**rec, "label": rec.get("label", "genuine")}, where)


def cmd_detect(args) -> dict:
    if _same_file(args.input, args.out):
        raise CommandError("--out must differ from --input")
    models, data, cfg = load_models(args.checkpoint)
    rows = _read_jsonl(args.input)
    reviews = [_review_for_scoring(r, f"{args.input}:{i + 1}") for i, r in enumerate(rows)]
    for r in reviews:
        if len(r.text) >= cfg.T:
            log.warning("review %s has %d tokens; truncated to T-1=%d", r.review_id, len(r.text), cfg.T - 1)
            r.text = r.text[: cfg.T - 1]
    ids = cp.encode_batch(reviews, data.vocab, cfg.T)
    cats = np.array([cp.score_to_category(r.score, cfg.C) for r in reviews], dtype=np.int64)
    feats = None
    names = cfg.feature_list()
    if names:
        behavior = cp.extract_behavioral(reviews, cfg.C)
        rows_b = np.stack([behavior[r.review_id].as_array() for r in reviews])
        feats = data.scaler.transform(rows_b)[:, [cp.FEATURE_NAMES.index(n) for n in names]]
    probs = models.dg.predict_batch(Batch(ids, cats, feats), data.embeddings).p[:, FRAUD_CLASS]
    for rec, p in zip(rows, probs):
        rec[PROB_FIELD] = float(p)
    _write_jsonl(rows, args.out)
    return {"scored": len(rows), "out": args.out}


def cmd_evaluate(args) -> dict:
    if _same_file(args.input, args.out):
        raise CommandError("--out must differ from --input")
    rows = _read_jsonl(args.input)
    try:
        scores = [float(r[args.field]) for r in rows]
        labels = [cp._FILE_LABELS[str(r["label"])] != cp.GENUINE for r in rows]
    except KeyError as exc:
        raise CommandError(f"{args.input}: record without {exc.args[0]!r}") from None
    rep = evaluate(scores, labels)
    result = {k: v for k, v in rep.as_dict().items() if k != "iteration"}
    Path(args.out).write_text(json.dumps(result, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return result


def cmd_experiment(args) -> dict:
    cfg = resolve_config(args)
    datasets = []
    for spec in args.dataset:
        name, sep, path = spec.partition("=")
        if not sep or not name or not path:
            raise CommandError(f"--dataset expects NAME=PATH, got {spec!r}")
        datasets.append(Dataset(name, path))
    if not datasets:
        datasets = [Dataset(Path(cfg.data).stem if cfg.data else "synthetic", cfg.data)]
    seeds = [cfg.seed + k for k in range(max(1, args.seeds))]
    report = run_experiment(args.kind, cfg, seeds, datasets, out_dir=args.out, workers=args.threads)
    return {"rows": len(report.rows), "out": args.out}


def cmd_convert(args) -> dict:
    if _same_file(args.input, args.out):
        raise CommandError("--out must differ from --input")
    n = cp.convert_csv(args.input, args.out, args.layout)
    return {"written": n, "out": args.out}


COMMANDS = {
    "synth-data": cmd_synth_data, "train": cmd_train, "generate": cmd_generate, "detect": cmd_detect,
    "evaluate": cmd_evaluate, "experiment": cmd_experiment, "convert-dataset": cmd_convert,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError, ArithmeticError, KeyError, ckpt.CheckpointError) as exc:
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)},
                         sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
