"""Command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 data or I/O error, 4 numeric
divergence during training.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

import torch

from . import analysis
from .config import RunConfig, load_config
from .errors import ConfigError, ContractError, DataFormatError, DivergenceError, VLDecompError
from .inputs import (
    PairRecord,
    TextRecord,
    atomic_write,
    build_joint_input,
    build_text_input,
    load_dataset,
    save_dataset,
    synth_dataset,
)
from .model import VLTransformer, image_inputs, load_checkpoint, save_checkpoint, text_inputs
from .retrieval import (
    EVAL_COLUMNS,
    LATENCY_COLUMNS,
    EmbeddingIndex,
    InferenceCounter,
    benchmark,
    cosine_topk,
    encode_corpus,
    evaluate,
)
from .training import (
    DECOMPOSE_COLUMNS,
    PRETRAIN_COLUMNS,
    pretrain_joint,
    train_decompose,
    write_metrics,
)

log = logging.getLogger("vldecomp")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _synth(cfg: RunConfig, n_pairs: int | None = None) -> list[PairRecord]:
    return synth_dataset(
        n_pairs or cfg.n_pairs, cfg.n_classes, cfg.feat_dim, cfg.vocab_size, cfg.noise, cfg.seed,
        n_words=cfg.n_words, words_per_class=cfg.words_per_class,
        text_len=(cfg.text_len_min, cfg.text_len_max), n_regions=cfg.n_regions, world_seed=cfg.world_seed,
    )


def _pairs(cfg: RunConfig, n_pairs: int | None = None) -> list[PairRecord]:
    """The configured dataset file, or synthetic pairs when none is set."""
    if not cfg.dataset:
        return _synth(cfg, n_pairs)
    pairs, vocab, feat = load_dataset(cfg.dataset)
    if vocab != cfg.vocab_size or feat != cfg.feat_dim:
        raise ConfigError(
            f"{cfg.dataset} has vocab_size={vocab} feat_dim={feat}; "
            f"config says vocab_size={cfg.vocab_size} feat_dim={cfg.feat_dim}"
        )
    return pairs


def _checkpoint(path: str, cfg: RunConfig, key: str = "checkpoint") -> VLTransformer:
    if not path:
        raise ConfigError(f"{key} is not set")
    return load_checkpoint(path, expected=cfg.model_config())


def _csv(rows: Sequence[dict], columns: Sequence[str]) -> bytes:
    return analysis.rows_to_csv(rows, columns)


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, out: Path) -> None:
    pairs = _synth(cfg)
    path = out / "dataset.vlds"
    save_dataset(path, pairs, cfg.vocab_size, cfg.feat_dim)
    print(f"synth: {len(pairs)} pairs, {cfg.n_classes} classes -> {path} sha256={_sha256(path)}")


def _epoch_writer(path: Path, columns: Sequence[str]):
    """Callback that rewrites the metrics CSV (atomically) after every epoch."""
    rows = []

    def on_epoch_end(metrics, model) -> bool:
        rows.append(metrics)
        write_metrics(path, rows, columns)
        return False

    return on_epoch_end


def cmd_pretrain(cfg: RunConfig, out: Path) -> None:
    pcfg = cfg.pretrain_config()
    pairs = _pairs(cfg)
    model = VLTransformer(cfg.model_config(), seed=cfg.seed)
    history = pretrain_joint(model, pairs, pcfg, cfg.input_config(),
                             _epoch_writer(out / "pretrain_metrics.csv", PRETRAIN_COLUMNS))
    save_checkpoint(out / "pretrain.vldw", model)
    write_metrics(out / "pretrain_metrics.csv", history, PRETRAIN_COLUMNS)
    last = history[-1] if history else None
    summary = f" acc={last.in_batch_acc:.3f} margin={last.logit_margin:.3f}" if last else ""
    print(f"pretrain: {len(history)} epochs{summary} -> {out / 'pretrain.vldw'}")


def cmd_decompose(cfg: RunConfig, out: Path) -> None:
    tcfg = cfg.train_config()
    pairs = _pairs(cfg)
    if cfg.init_checkpoint:
        model = _checkpoint(cfg.init_checkpoint, cfg, "init_checkpoint")
    else:
        model = VLTransformer(cfg.model_config(), seed=cfg.seed)
    history = train_decompose(model, pairs, tcfg, cfg.input_config(),
                              _epoch_writer(out / "decompose_metrics.csv", DECOMPOSE_COLUMNS))
    save_checkpoint(out / "decompose.vldw", model)
    write_metrics(out / "decompose_metrics.csv", history, DECOMPOSE_COLUMNS)
    last = history[-1] if history else None
    summary = f" r1_t2i={last.in_batch_r1_t2i:.3f} r1_i2t={last.in_batch_r1_i2t:.3f}" if last else ""
    start = cfg.init_checkpoint or "random init"
    print(f"decompose: {len(history)} epochs from {start}{summary} -> {out / 'decompose.vldw'}")


def _tower(cfg: RunConfig) -> str:
    if cfg.tower not in ("image", "text"):
        raise ConfigError(f"tower must be image|text, got {cfg.tower!r}")
    return cfg.tower


def cmd_encode(cfg: RunConfig, out: Path) -> None:
    tower = _tower(cfg)
    model = _checkpoint(cfg.checkpoint, cfg)
    pairs = _pairs(cfg)
    icfg = cfg.input_config()
    if tower == "image":
        items, ids = image_inputs(pairs, icfg), [p.image.id for p in pairs]
    else:
        items, ids = text_inputs(pairs, icfg), [p.text.id for p in pairs]
    counter = InferenceCounter()
    index = encode_corpus(model, items, ids, cfg.eval_batch_size, counter)
    path = out / f"{tower}.vldi"
    index.save(path)
    print(f"encode: {len(index)} {tower} embeddings, inference_count={counter.count} -> {path}")


def cmd_retrieve(cfg: RunConfig, out: Path) -> None:
    tower = _tower(cfg)
    index = EmbeddingIndex.load(cfg.index or out / f"{tower}.vldi")
    model = _checkpoint(cfg.checkpoint, cfg)
    icfg = cfg.input_config()
    if cfg.query_tokens:
        try:
            tokens = tuple(int(t) for t in cfg.query_tokens.split())
        except ValueError:
            raise ConfigError(f"query_tokens must be integers, got {cfg.query_tokens!r}") from None
        if tower != "image":
            raise ConfigError("query_tokens needs an image index (tower = image)")
        query_id, query = None, build_text_input(TextRecord(0, tokens), icfg)
    else:
        pairs = _pairs(cfg)
        if not 0 <= cfg.query_index < len(pairs):
            raise ConfigError(f"query_index {cfg.query_index} outside dataset of {len(pairs)} pairs")
        p = pairs[cfg.query_index]
        if tower == "image":
            query_id, query = p.text.id, text_inputs([p], icfg)[0]
        else:
            query_id, query = p.image.id, image_inputs([p], icfg)[0]
    with torch.no_grad():
        vec = model.individual_forward(query)[0].numpy()
    result = cosine_topk(index, vec, cfg.k, query_id)
    rows = [{"rank": r, "id": i, "score": s} for r, (i, s) in enumerate(result.hits, start=1)]
    atomic_write(out / "retrieve.csv", _csv(rows, ("rank", "id", "score")))
    print(f"retrieve: query {query_id if query_id is not None else 'tokens'} top-{len(rows)}")
    for r in rows:
        print(f"{r['rank']}\t{r['id']}\t{r['score']:.6f}")


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    modes = {"both": ("decomposed", "joint"), "decomposed": ("decomposed",), "joint": ("joint",)}
    if cfg.eval_mode not in modes:
        raise ConfigError(f"eval_mode must be decomposed|joint|both, got {cfg.eval_mode!r}")
    model = _checkpoint(cfg.checkpoint, cfg)
    pairs = _pairs(cfg)
    rows = []
    for mode in modes[cfg.eval_mode]:
        rep = evaluate(model, pairs, mode, cfg.eval_batch_size, cfg.input_config())
        rows.append(rep.row())
        print(
            f"eval {mode}: R@1/5/10 t2i {rep.r1_t2i:.3f}/{rep.r5_t2i:.3f}/{rep.r10_t2i:.3f} "
            f"i2t {rep.r1_i2t:.3f}/{rep.r5_i2t:.3f}/{rep.r10_i2t:.3f} AR {rep.ar:.3f} "
            f"inference_count={rep.inference_count} ({rep.seconds:.2f}s)"
        )
    atomic_write(out / "eval.csv", _csv(rows, EVAL_COLUMNS))


def cmd_bench(cfg: RunConfig, out: Path) -> None:
    try:
        sizes = [int(s) for s in cfg.bench_sizes.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bench_sizes must be comma-separated integers, got {cfg.bench_sizes!r}") from None
    if not sizes or min(sizes) < 1:
        raise ConfigError("bench_sizes must list positive sizes")
    model = _checkpoint(cfg.checkpoint, cfg)
    pairs = _pairs(cfg, n_pairs=max(sizes))
    reports = benchmark(
        model, pairs, sizes, cfg.bench_batch_size, cfg.bench_repetitions, cfg.bench_warmup,
        cfg.bench_queries, cfg.bench_joint_max_batches or None, cfg.input_config(),
    )
    rows = [{c: (int(getattr(r, c)) if c == "extrapolated" else getattr(r, c)) for c in LATENCY_COLUMNS} for r in reports]
    atomic_write(out / "bench.csv", _csv(rows, LATENCY_COLUMNS))
    print("size\tmode\tbatch\tavg_ms\tmin_ms\tmax_ms\tp95_ms\tp99.99_ms\tmem_mb\tinferences")
    for r in reports:
        flag = " (extrapolated)" if r.extrapolated else ""
        print(
            f"{r.size}\t{r.mode}\t{r.batch}\t{r.avg_ms:.2f}\t{r.min_ms:.2f}\t{r.max_ms:.2f}\t"
            f"{r.p95_ms:.2f}\t{r.p99_99_ms:.2f}\t{r.mem_mb:.2f}\t{r.inference_count}{flag}"
        )


def _analysis_inputs(cfg: RunConfig, pairs: Sequence[PairRecord]) -> dict[str, list]:
    icfg = cfg.input_config()
    pairs = list(pairs[: cfg.analyze_samples])
    if cfg.analyze_mode == "individual":
        return {"L": text_inputs(pairs, icfg), "V": image_inputs(pairs, icfg)}
    if cfg.analyze_mode == "joint":
        return {"joint": [build_joint_input(p, icfg) for p in pairs]}
    raise ConfigError(f"analyze_mode must be individual|joint, got {cfg.analyze_mode!r}")


def cmd_analyze(cfg: RunConfig, out: Path) -> None:
    model = _checkpoint(cfg.checkpoint, cfg)
    pairs = _pairs(cfg)
    groups = analysis.parse_groups(cfg.layer_groups, model.cfg.n_layers)
    inputs = _analysis_inputs(cfg, pairs)
    before = _checkpoint(cfg.compare_checkpoint, cfg, "compare_checkpoint") if cfg.compare_checkpoint else None
    files: list[tuple[Path, bytes]] = []
    after_b, before_b = {}, {}
    for name, items in inputs.items():
        res = analysis.analyze_inputs(model, items, cfg.eval_batch_size)
        after_b[name] = res.breakdown
        report = analysis.layer_group_report(res.breakdown, groups)
        files.append((out / f"attention_{name}.csv", _csv(report, analysis.REPORT_COLUMNS)))
        routing = res.routing(cfg.routing_k)
        files.append((out / f"routing_{name}.csv", _csv(analysis.routing_rows(routing), analysis.ROUTING_COLUMNS)))
        total = res.breakdown.total().percentages()
        print(
            f"analyze {name}: neutral {total['neutral_total_pct']:.2f}% "
            f"(cls {total['cls_pct']:.2f}, sep {total['sep_pct']:.2f}) "
            f"single {total['single_pct']:.2f}% cross_pct={total['cross_pct']:.2f}"
        )
        for layer, nodes in enumerate(routing.layers, start=1):
            desc = ", ".join(f"{n.slot_index}{'*' if n.is_special else ''}:{100 * n.share:.1f}%" for n in nodes)
            print(f"  layer {layer} routing: {desc}")
        if before is not None:
            before_b[name] = analysis.analyze_inputs(before, items, cfg.eval_batch_size).breakdown
    if before is not None:
        rows = analysis.compare_runs(before_b, after_b, groups)
        files.append((out / "compare.csv", _csv(rows, analysis.COMPARE_COLUMNS)))
    for path, data in files:
        atomic_write(path, data)


COMMANDS: dict[str, Callable[[RunConfig, Path], None]] = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "decompose": cmd_decompose,
    "encode": cmd_encode,
    "retrieve": cmd_retrieve,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "analyze": cmd_analyze,
}


HELP = {
    "synth": "write a synthetic paired dataset",
    "pretrain": "joint (early-interaction) contrastive pre-training",
    "decompose": "two-tower contrastive training from a checkpoint or random init",
    "encode": "encode one modality of the dataset into an index file",
    "retrieve": "top-k cosine search for one query",
    "eval": "recall@1/5/10 in decomposed and/or joint mode",
    "bench": "timing of full matching jobs and single queries",
    "analyze": "attention breakdown and routing nodes",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vldecomp", description="Two-tower decomposition of joint VL transformers.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--seed", type=int, help="overrides the seed key")
        p.add_argument("--out", type=Path, default=Path("."), help="existing output directory (default: .)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg.seed = args.seed
        if not args.out.is_dir():
            raise ConfigError(f"output directory {args.out} does not exist")
        COMMANDS[args.command](cfg, args.out)
        atomic_write(args.out / f"{args.command}.conf", cfg.dumps().encode("utf-8"))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataFormatError, ContractError, VLDecompError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        where = f" {e.filename}" if e.filename else ""
        print(f"i/o error:{where}: {e.strerror or e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
