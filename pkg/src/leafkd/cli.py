"""Command-line entry point: ``leafkd <command> [options]``.

Every command reads an optional JSON config (``--config``), lets flags
override it, and writes its outputs plus a ``manifest.json`` into ``--out``.
A manifest can be passed back as ``--config`` to repeat the run.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from scipy.stats import spearmanr

from . import __version__
from .corpus import CorpusConfig, generate
from .distill import LossKind, LossSpec
from .encoder import EncoderConfig, EncoderState, TextEncoder, init_encoder, teacher_config
from .errors import ConfigError, DataError, NumericError
from .evalhub import (
    BENCH_BATCH_SIZES,
    MODES,
    SCHEMES,
    JudgedDataset,
    bench_csv,
    bench_table,
    collect_robustness_points,
    evaluate,
    sweep,
    sweep_csv,
    throughput_bench,
)
from .teacher import EmbeddingCache, EncoderTeacher, build_cache, synthetic_teacher
from .tokenizer import Vocab, build_vocab
from .trainer import (
    SCHEDULES,
    Checkpoint,
    TrainConfig,
    ablation_batch_size,
    ablation_lr,
    ablation_pooling,
    fit_robustness_margin,
    history_csv,
    train,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SEED_ENV = "LEAF_SEED"

# workspace file names
TRAIN_TEXTS = "train.txt"
VOCAB_FILE = "vocab.txt"
TEACHER_FILE = "teacher.lefc"
CACHE_STEM = "cache"
STUDENT_FILE = "student.lefc"
MANIFEST = "manifest.json"


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: Optional[int]
    inputs: dict
    outputs: list = field(default_factory=list)
    tool_version: str = __version__
    wall_time_s: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


class Outputs:
    """Writes files under one directory and remembers their names."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.names: list[str] = []

    def path(self, name: str) -> Path:
        self.names.append(name)
        return self.dir / name

    def text(self, name: str, content: str) -> None:
        self.path(name).write_text(content, encoding="utf-8")

    def json(self, name: str, obj) -> None:
        self.text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def table(self, stem: str, rows: list[dict]) -> None:
        """Write ``rows`` as ``stem.csv`` and ``stem.json``."""
        buf = io.StringIO()
        if rows:
            w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        self.text(f"{stem}.csv", buf.getvalue())
        self.json(f"{stem}.json", rows)


# ---------------------------------------------------------------------------
# workspace loading


def _load_workspace(cache_dir):
    d = Path(cache_dir)
    vocab = Vocab.load(d / VOCAB_FILE)
    teacher = EncoderTeacher(EncoderState.load(d / TEACHER_FILE), vocab)
    cache = EmbeddingCache.load(d / CACHE_STEM)
    return vocab, teacher, cache


def _load_student(path) -> EncoderState:
    path = Path(path)
    if path.suffix == ".left":
        return Checkpoint.load(path).state
    return EncoderState.load(path)


def _student_config(s: dict, vocab: Vocab, cache: EmbeddingCache, pooling: Optional[str] = None) -> EncoderConfig:
    return EncoderConfig(
        num_layers=s["layers"],
        num_heads=s["heads"],
        hidden_dim=s["hidden"],
        vocab_size=len(vocab),
        output_dim=cache.dim,
        pooling=pooling or s["pooling"],
        normalize_output=cache.normalized,
        seed=s["seed"],
    )


def _train_config(s: dict) -> TrainConfig:
    return TrainConfig(
        batch_size=s["batch_size"],
        lr_start=s["lr_start"],
        lr_end=s["lr_end"],
        cycles=s["cycles"],
        epochs_per_cycle=s["epochs_per_cycle"],
        beta1=s["beta1"],
        beta2=s["beta2"],
        weight_decay=s["weight_decay"],
        adam_eps=s["adam_eps"],
        schedule=s["schedule"],
        loss=LossSpec(s["loss"], s["aux_weight"]),
        seed=s["seed"],
        checkpoint_every=s["checkpoint_every"],
    )


def _encoders(vocab, teacher, student_state, cache):
    student = TextEncoder(student_state, vocab, instruction=cache.instruction)
    t_enc = TextEncoder(teacher.state, vocab, instruction=cache.instruction)
    return student, t_enc


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(s: dict, out: Outputs) -> dict:
    cfg = CorpusConfig(
        count=s["count"],
        clusters=s["clusters"],
        queries=s["queries"],
        train_count=s["train_count"],
        train_query_fraction=s["train_query_fraction"],
        doc_len=tuple(s["doc_len"]),
        query_len=tuple(s["query_len"]),
        seed=s["seed"],
    )
    dataset, texts = generate(cfg)
    dataset.save(out.dir)
    out.names += ["docs.jsonl", "queries.jsonl", "qrels.tsv"]
    out.text(TRAIN_TEXTS, "".join(t + "\n" for t in texts))
    return {}


def cmd_cache(s: dict, out: Outputs) -> dict:
    corpus = Path(s["corpus"])
    dataset = JudgedDataset.load(corpus)
    texts = (corpus / TRAIN_TEXTS).read_text(encoding="utf-8").splitlines()
    inputs = {"corpus": str(corpus)}
    if s["vocab"]:
        vocab = Vocab.load(s["vocab"])
        inputs["vocab"] = s["vocab"]
    else:
        vocab = build_vocab(texts + dataset.doc_texts + dataset.query_texts, s["vocab_size"])
    if s["teacher"]:
        teacher = EncoderTeacher(EncoderState.load(s["teacher"]), vocab)
        inputs["teacher"] = s["teacher"]
    else:
        base = teacher_config(len(vocab))
        cfg = EncoderConfig(
            num_layers=s["teacher_layers"],
            num_heads=s["teacher_heads"],
            hidden_dim=s["teacher_hidden"],
            vocab_size=len(vocab),
            output_dim=s["teacher_dim"],
            ffn_multiplier=base.ffn_multiplier,
            max_context=base.max_context,
            seed=s["teacher_seed"],
        )
        teacher = synthetic_teacher(cfg, vocab)
    cache = build_cache(teacher, texts, instruction=s["instruction"] or None, val_holdout=s["val_holdout"], seed=s["seed"])
    vocab.save(out.path(VOCAB_FILE))
    teacher.state.save(out.path(TEACHER_FILE))
    cache.save(out.dir / CACHE_STEM)
    out.names += [p.name for p in EmbeddingCache.paths(CACHE_STEM)]
    return inputs


def cmd_train(s: dict, out: Outputs) -> dict:
    vocab, teacher, cache = _load_workspace(s["cache_dir"])
    config = _train_config(s)
    student = init_encoder(_student_config(s, vocab, cache))
    resume = Checkpoint.load(s["resume"]) if s["resume"] else None
    aux = config.loss.needs_traces
    res = train(
        student,
        cache,
        config,
        vocab,
        teacher=teacher if aux else None,
        resume=resume,
        epochs=s["epochs"],
        checkpoint_dir=out.dir / "checkpoints",
    )
    out.names += [f"checkpoints/epoch_{ck.epoch:03d}.left" for ck in res.checkpoints]
    res.state.save(out.path(STUDENT_FILE))
    out.text("history.csv", history_csv(res.history))
    out.json(
        "report.json",
        {
            "initial_val_loss": res.initial_val_loss,
            "final_val_loss": res.final_val_loss,
            "steps": res.history[-1].step if res.history else 0,
            "checkpoints": [{"epoch": ck.epoch, "cycle": ck.cycle, "val_loss": ck.val_loss} for ck in res.checkpoints],
        },
    )
    inputs = {"cache_dir": s["cache_dir"]}
    if s["resume"]:
        inputs["resume"] = s["resume"]
    return inputs


def cmd_eval(s: dict, out: Outputs) -> dict:
    dataset = JudgedDataset.load(s["corpus"])
    vocab, teacher, cache = _load_workspace(s["cache_dir"])
    student, t_enc = _encoders(vocab, teacher, _load_student(s["student"]), cache)
    kw = dict(dim=s["dim"], scheme=s["scheme"], renormalize=not s["no_renormalize"])
    rows = [
        {"model": "teacher", "mode": "standard", "ndcg10": evaluate(dataset, t_enc, **kw)},
        {"model": "student", "mode": "standard", "ndcg10": evaluate(dataset, student, **kw)},
        {"model": "student", "mode": "asym", "ndcg10": evaluate(dataset, student, t_enc, **kw)},
    ]
    for r in rows:
        r.update(dim=s["dim"] or cache.dim, scheme=s["scheme"])
    out.table("eval", rows)
    return {"corpus": s["corpus"], "cache_dir": s["cache_dir"], "student": s["student"]}


def cmd_sweep(s: dict, out: Outputs) -> dict:
    dataset = JudgedDataset.load(s["corpus"])
    vocab, teacher, cache = _load_workspace(s["cache_dir"])
    student, t_enc = _encoders(vocab, teacher, _load_student(s["student"]), cache)
    dims = s["dims"] or _halvings(cache.dim)
    rows = sweep(
        dataset,
        student,
        t_enc,
        dims,
        s["schemes"],
        s["modes"],
        renormalize=not s["no_renormalize"],
        float_queries=s["float_queries"],
    )
    out.text("sweep.csv", sweep_csv(rows))
    out.json("sweep.json", [asdict(r) for r in rows])
    return {"corpus": s["corpus"], "cache_dir": s["cache_dir"], "student": s["student"]}


def _halvings(dim: int, floor: int = 8) -> list[int]:
    out = [dim]
    while out[-1] // 2 >= floor:
        out.append(out[-1] // 2)
    return out


def cmd_robustness(s: dict, out: Outputs) -> dict:
    dataset = JudgedDataset.load(s["corpus"])
    vocab, teacher, cache = _load_workspace(s["cache_dir"])
    paths = sorted(Path(s["checkpoints"]).glob("*.left"))
    if len(paths) < 2:
        raise DataError(f"need at least 2 checkpoints in {s['checkpoints']}, found {len(paths)}")
    cks = [Checkpoint.load(p) for p in paths]
    t_enc = TextEncoder(teacher.state, vocab, instruction=cache.instruction)
    points = collect_robustness_points(cks, dataset, t_enc, vocab, mode=s["mode"])
    teacher_score = evaluate(dataset, t_enc)
    fit = fit_robustness_margin(points, teacher_score, exclude_cycle_first=not s["include_cycle_first"])
    err = [p.mean_val_error for p in points]
    score = [p.downstream_score for p in points]
    rho = float(spearmanr(err, score)[0]) if len(set(err)) > 1 and len(set(score)) > 1 else None
    out.table("points", [asdict(p) for p in points])
    out.json(
        "robustness.json",
        {"teacher_score": teacher_score, "spearman": rho, "mode": s["mode"], **asdict(fit)},
    )
    return {"corpus": s["corpus"], "cache_dir": s["cache_dir"], "checkpoints": [str(p) for p in paths]}


def cmd_bench(s: dict, out: Outputs) -> dict:
    dataset = JudgedDataset.load(s["corpus"])
    vocab, teacher, cache = _load_workspace(s["cache_dir"])
    student, t_enc = _encoders(vocab, teacher, _load_student(s["student"]), cache)
    results = {}
    for name, enc in (("teacher", t_enc), ("student", student)):
        results[name] = {
            side: throughput_bench(enc, texts, s["batch_sizes"], s["repeats"], s["seed"])
            for side, texts in (("docs", dataset.doc_texts), ("queries", dataset.query_texts))
        }
    rows = bench_table(results, baseline="teacher")
    out.text("bench.csv", bench_csv(rows))
    raw = {m: {side: {str(b): t for b, t in r.times.items()} for side, r in sides.items()} for m, sides in results.items()}
    out.json("bench.json", {"rows": rows, "times_s": raw})
    return {"corpus": s["corpus"], "cache_dir": s["cache_dir"], "student": s["student"]}


def cmd_ablate(s: dict, out: Outputs) -> dict:
    vocab, teacher, cache = _load_workspace(s["cache_dir"])
    base = _train_config(s)
    scfg = _student_config(s, vocab, cache)
    kind = s["ablation"]
    if kind == "pooling":
        res = ablation_pooling(cache, scfg, vocab, base, epochs=s["epochs"])
        out.table("ablation_pooling", [res])
    elif kind == "lr":
        n = len(cache.rows("train"))
        budgets = s["budgets"] or sorted({max(1, n // 4), max(1, n // 2), n})
        rows = ablation_lr(cache, scfg, vocab, budgets, s["schedules"], base, epochs=s["epochs"])
        out.table("ablation_lr", [asdict(r) for r in rows])
    else:
        budget = s["budget"] or (len(cache.rows("train")) // max(s["sizes"])) * max(s["sizes"])
        if budget < 1:
            raise ConfigError(f"train split too small for batch size {max(s['sizes'])}")
        rows = ablation_batch_size(cache, scfg, vocab, s["sizes"], budget, base)
        out.table("ablation_batch", [asdict(r) for r in rows])
    return {"cache_dir": s["cache_dir"]}


# ---------------------------------------------------------------------------
# argument parsing


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--lr-start", type=float, default=d.lr_start)
    g.add_argument("--lr-end", type=float, default=d.lr_end)
    g.add_argument("--cycles", type=int, default=d.cycles)
    g.add_argument("--epochs-per-cycle", type=int, default=d.epochs_per_cycle)
    g.add_argument("--beta1", type=float, default=d.beta1)
    g.add_argument("--beta2", type=float, default=d.beta2)
    g.add_argument("--weight-decay", type=float, default=d.weight_decay)
    g.add_argument("--adam-eps", type=float, default=d.adam_eps)
    g.add_argument("--schedule", choices=SCHEDULES, default=d.schedule)
    g.add_argument("--loss", choices=[k.value for k in LossKind], default=d.loss.kind.value)
    g.add_argument("--aux-weight", type=float, default=d.loss.aux_weight)
    g.add_argument("--checkpoint-every", type=int, default=d.checkpoint_every)
    g = p.add_argument_group("student")
    g.add_argument("--layers", type=int, default=2)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--hidden", type=int, default=32)
    g.add_argument("--pooling", choices=["mean", "cls"], default="mean")


def _add_common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", help="JSON config file or a previous manifest.json; flags override it")
    p.add_argument("--out", required=True, help="output directory")
    if seed:
        p.add_argument("--seed", type=int, default=0, help=f"overridden by ${SEED_ENV}")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    """Shows the default of every option, including those without help text."""

    def _format_action(self, action):
        if action.help is None and action.option_strings and action.default not in (None, argparse.SUPPRESS):
            action = copy.copy(action)
            action.help = "(default: %(default)s)"
        return super()._format_action(action)


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    fmt = _Formatter
    parser = argparse.ArgumentParser(prog="leafkd", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"leafkd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["gen-corpus"] = sub.add_parser("gen-corpus", help="write a synthetic judged corpus", formatter_class=fmt)
    _add_common(p)
    c = CorpusConfig()
    p.add_argument("--count", type=int, default=c.count, help="number of documents")
    p.add_argument("--clusters", type=int, default=c.clusters)
    p.add_argument("--queries", type=int, default=c.queries, help="0 picks max(clusters, count // 5)")
    p.add_argument("--train-count", type=int, default=c.train_count)
    p.add_argument("--train-query-fraction", type=float, default=c.train_query_fraction)
    p.add_argument("--doc-len", type=int, nargs=2, default=list(c.doc_len), metavar=("MIN", "MAX"))
    p.add_argument("--query-len", type=int, nargs=2, default=list(c.query_len), metavar=("MIN", "MAX"))

    p = subs["cache"] = sub.add_parser("cache", help="build vocab, teacher and teacher-embedding cache", formatter_class=fmt)
    _add_common(p)
    t = teacher_config(8)
    p.add_argument("--corpus", required=True, help="directory written by gen-corpus")
    p.add_argument("--vocab", help="existing vocab file (default: build one)")
    p.add_argument("--vocab-size", type=int, default=256)
    p.add_argument("--teacher", help="existing teacher weights (default: random synthetic teacher)")
    p.add_argument("--teacher-layers", type=int, default=t.num_layers)
    p.add_argument("--teacher-heads", type=int, default=t.num_heads)
    p.add_argument("--teacher-hidden", type=int, default=t.hidden_dim)
    p.add_argument("--teacher-dim", type=int, default=t.output_dim)
    p.add_argument("--teacher-seed", type=int, default=t.seed)
    p.add_argument("--instruction", default="", help="prefix prepended to every text before embedding")
    p.add_argument("--val-holdout", type=int, default=64, help="items held out for validation")

    p = subs["train"] = sub.add_parser("train", help="distill a student onto the cached teacher", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--cache-dir", required=True, help="directory written by the cache command")
    _add_train_flags(p)
    p.add_argument("--epochs", type=int, default=None, help="stop after this many global epochs")
    p.add_argument("--resume", help="checkpoint to continue from")

    def eval_inputs(p):
        p.add_argument("--corpus", required=True)
        p.add_argument("--cache-dir", required=True)
        p.add_argument("--student", required=True, help="student weights (.lefc) or checkpoint (.left)")

    p = subs["eval"] = sub.add_parser("eval", help="nDCG@10 for teacher, student and asymmetric mode", formatter_class=fmt)
    _add_common(p, seed=False)
    eval_inputs(p)
    p.add_argument("--dim", type=int, default=None, help="truncate embeddings to this width")
    p.add_argument("--scheme", choices=SCHEMES, default="float32")
    p.add_argument("--no-renormalize", action="store_true", help="skip re-normalization after truncation")

    p = subs["sweep"] = sub.add_parser("sweep", help="nDCG@10 over modes x dims x schemes", formatter_class=fmt)
    _add_common(p, seed=False)
    eval_inputs(p)
    p.add_argument("--dims", type=int, nargs="+", default=None, help="default: full width halved down to 8")
    p.add_argument("--schemes", nargs="+", choices=SCHEMES, default=list(SCHEMES))
    p.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES))
    p.add_argument("--no-renormalize", action="store_true")
    p.add_argument("--float-queries", action="store_true", help="keep queries unquantized")

    p = subs["robustness"] = sub.add_parser("robustness", help="fit the robustness margin over checkpoints", formatter_class=fmt)
    _add_common(p, seed=False)
    p.add_argument("--corpus", required=True)
    p.add_argument("--cache-dir", required=True)
    p.add_argument("--checkpoints", required=True, help="directory of .left checkpoints")
    p.add_argument("--mode", choices=MODES, default="asym")
    p.add_argument("--include-cycle-first", action="store_true", help="keep the first epoch of each cycle in the fit")

    p = subs["bench"] = sub.add_parser("bench", help="throughput and latency of teacher and student", formatter_class=fmt)
    _add_common(p)
    eval_inputs(p)
    p.add_argument("--batch-sizes", type=int, nargs="+", default=list(BENCH_BATCH_SIZES))
    p.add_argument("--repeats", type=int, default=7)

    p = sub.add_parser("ablate", help="pooling, learning-rate schedule or batch-size ablation", formatter_class=fmt)
    asub = p.add_subparsers(dest="ablation", required=True)
    for name, hlp in (("pooling", "mean vs CLS pooling"), ("lr", "schedule x data budget"), ("batch", "batch size at a fixed budget")):
        q = subs[f"ablate {name}"] = asub.add_parser(name, help=hlp, formatter_class=fmt)
        _add_common(q)
        q.add_argument("--cache-dir", required=True)
        _add_train_flags(q)
        if name == "pooling":
            q.add_argument("--epochs", type=int, default=1)
        elif name == "lr":
            q.add_argument("--epochs", type=int, default=10)
            q.add_argument("--budgets", type=int, nargs="+", default=None, help="training items per epoch")
            q.add_argument("--schedules", nargs="+", choices=SCHEDULES, default=list(SCHEDULES))
        else:
            q.add_argument("--sizes", type=int, nargs="+", default=[256, 64, 16])
            q.add_argument("--budget", type=int, default=None, help="default: largest multiple of the biggest size")
    return parser, subs


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "cache": cmd_cache,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "robustness": cmd_robustness,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def _read_config(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if isinstance(data, dict) and "command" in data and "config" in data:
        data = data["config"]
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return data


def resolve(argv) -> tuple[str, dict]:
    """Parse ``argv`` into a command name and its resolved settings.

    Precedence, lowest first: parser defaults, the ``--config`` file, flags,
    and finally ``LEAF_SEED`` for the seed.
    """
    parser, subs = build_parser()
    # first pass only finds the command and config file; required flags may
    # still come from the config
    required = [a for q in subs.values() for a in q._actions if a.required]
    for a in required:
        a.required = False
    args = parser.parse_args(argv)
    key = args.command if args.command != "ablate" else f"ablate {args.ablation}"
    cfg = _read_config(args.config) if args.config else {}
    unknown = sorted(set(cfg) - {a.dest for a in subs[key]._actions})
    if unknown:
        raise ConfigError(f"unknown config keys for {key}: {unknown}")
    subs[key].set_defaults(**cfg)
    for a in required:
        a.required = a.dest not in cfg
    args = parser.parse_args(argv)
    settings = {k: v for k, v in vars(args).items() if k not in ("config", "command")}
    env = os.environ.get(SEED_ENV)
    if env is not None and "seed" in settings:
        try:
            settings["seed"] = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return args.command, settings


def run(argv=None) -> int:
    command, settings = resolve(argv)
    t0 = time.perf_counter()
    out = Outputs(settings["out"])
    inputs = COMMANDS[command](settings, out)
    label = command if command != "ablate" else f"ablate {settings['ablation']}"
    snapshot = {k: v for k, v in settings.items() if k != "ablation"}
    manifest = RunManifest(label, snapshot, settings.get("seed"), inputs, out.names, wall_time_s=time.perf_counter() - t0)
    (out.dir / MANIFEST).write_text(manifest.to_json(), encoding="utf-8")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        code, err = EXIT_CONFIG, exc
    except (DataError, OSError) as exc:
        code, err = EXIT_DATA, exc
    except NumericError as exc:
        code, err = EXIT_NUMERIC, exc
    print(f"leafkd: error: {err}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
