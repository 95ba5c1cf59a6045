"""Command-line entry point: ``sceneqa <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.  ``SCENEQA_DATA`` supplies the dataset root when
``--dataset`` is omitted.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import decode_throughput, export_attention
from .datakit import (DataError, DatasetManifest, QAItem, SceneConfig, SceneSample, generate_dataset, ingest_scanqa,
                      load_clouds, load_palette, token_stats)
from .encoder import ConfigError
from .lm import Vocabulary, tokenize
from .metrics import EvalPair, MetricReport, read_predictions, write_predictions
from .model import ModelConfig, SceneQAModel, build_examples, prepare_scene, preset
from .pointcloud import PointCloud
from .pointio import PLYFormatError, read_cloud, write_ply
from .serialize import IntegrityError, load
from .training import (CheckpointError, TrainingAborted, TrainPlan, evaluate_detection, load_checkpoint,
                       pretrain_detector, save_checkpoint, train)
from .tensor import NumericalError

log = logging.getLogger("sceneqa")
ENV_DATASET = "SCENEQA_DATA"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ------------------------------------------------------------------ helpers
def dataset_root(args) -> Path:
    root = args.dataset or os.environ.get(ENV_DATASET)
    if not root:
        raise UsageError(f"--dataset is required (or set {ENV_DATASET})")
    return Path(root)


def load_split(root: Path, split: str) -> DatasetManifest:
    path = root / f"manifest_{split}.jsonl"
    if not path.exists():
        raise DataError(f"no manifest for split {split!r} at {path}")
    manifest = DatasetManifest.read(path)
    load_clouds(manifest, root)
    return manifest


def corpus_vocabulary(root: Path) -> Vocabulary:
    texts = []
    for path in sorted(root.glob("manifest_*.jsonl")):
        for s in DatasetManifest.read(path).samples:
            for q in s.qa:
                texts += [q.instruction, *q.refs()]
    if not texts:
        raise DataError(f"no manifests with samples under {root}")
    return Vocabulary.build(texts)


def model_config(args, vocab_size: int) -> ModelConfig:
    if getattr(args, "model_config", None):
        try:
            raw = json.loads(Path(args.model_config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"model config {args.model_config}: {exc}") from exc
        cfg = ModelConfig.from_dict(raw)
    else:
        cfg = preset(args.preset, vocab_size)
    cfg = cfg.with_vocab(vocab_size)
    if getattr(args, "nq", None):
        cfg = cfg.with_queries(args.nq[0] if isinstance(args.nq, list) else args.nq)
    if getattr(args, "no_fusion", False):
        cfg = cfg.with_fusion(False)
    return cfg


def load_model(path: Path) -> tuple[SceneQAModel, Vocabulary, dict]:
    _, meta = load(path)
    if "model_config" not in meta or "vocab" not in meta:
        raise CheckpointError(f"checkpoint {path} lacks model_config/vocab metadata; it is not a full model checkpoint")
    cfg = ModelConfig.from_dict(meta["model_config"])
    vocab = Vocabulary(meta["vocab"])
    model = SceneQAModel(cfg)
    load_checkpoint(path, model)
    return model, vocab, meta


def load_encoder_weights(model: SceneQAModel, path: Path) -> None:
    tensors, _ = load(path)
    own = {n for n, _ in model.encoder.named_parameters(prefix="encoder.")}
    found = {n for n in tensors if n.startswith("encoder.")}
    if own != found:
        raise CheckpointError(f"encoder checkpoint {path}: missing tensors {sorted(own - found)}; "
                              f"unexpected tensors {sorted(found - own)}")
    model.encoder.load_state_dict({n[len("encoder."):]: tensors[n] for n in own})


def emit(out_dir: Path | None, name: str, record: dict) -> None:
    print(json.dumps(record, sort_keys=True))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / name, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


# ----------------------------------------------------------------- commands
def cmd_gen_data(args) -> int:
    root = dataset_root(args)
    cfg = SceneConfig(n_points=args.points)
    if args.palette:
        cats, cols = load_palette(args.palette)
        cfg = replace(cfg, categories=cats, colors=cols)
    manifests = generate_dataset(root, args.seed, args.scenes, cfg, args.val_fraction)
    for name, m in manifests.items():
        print(f"{name}: {len(m.samples)} scenes, {len(m.qa_ids())} samples -> {root / f'manifest_{name}.jsonl'}")
    return EXIT_OK


def cmd_pretrain_detector(args) -> int:
    root = dataset_root(args)
    manifest = load_split(root, "train")
    vocab = corpus_vocabulary(root)
    cfg = model_config(args, len(vocab))
    with T.precision("float32"):
        model = SceneQAModel(cfg, args.seed)
    scenes = [prepare_scene(s, cfg.encoder) for s in manifest.samples]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pretrain_detector(model.encoder, scenes, args.steps, lr_max=args.lr_max, lr_min=args.lr_min,
                      batch_size=args.batch_size, seed=args.seed, log_path=out / "detector_log.jsonl")
    save_checkpoint(out / "encoder.ntc", _Prefixed(model.encoder, "encoder."),
                    meta={"kind": "encoder", "model_config": cfg.to_dict()})
    try:
        val = load_split(root, "val")
        report = evaluate_detection(model.encoder, [prepare_scene(s, cfg.encoder) for s in val.samples])
        emit(out, "detector_eval.jsonl", report.to_dict())
    except DataError:
        pass
    print(f"encoder checkpoint: {out / 'encoder.ntc'}")
    return EXIT_OK


class _Prefixed:
    """Adapter exposing a module's parameters under a name prefix."""

    def __init__(self, module, prefix: str):
        self._module, self._prefix = module, prefix

    def state_dict(self):
        return {self._prefix + n: a for n, a in self._module.state_dict().items()}


def cmd_train(args) -> int:
    root = dataset_root(args)
    vocab = corpus_vocabulary(root)
    cfg = model_config(args, len(vocab))
    make = TrainPlan.published if args.published_schedule else TrainPlan.desk
    overrides = {k: v for k, v in dict(epochs=args.epochs, batch_size=args.batch_size, lr_max=args.lr_max,
                                       lr_min=args.lr_min, max_steps=args.max_steps).items() if v is not None}
    plan = make(args.phase, seed=args.seed, query_fusion=cfg.compressor.query_fusion,
                lm_frozen=args.freeze_lm, encoder_frozen=args.freeze_encoder,
                compressor_trainable=not args.freeze_compressor, **overrides)
    with T.precision(plan.precision):
        model = SceneQAModel(cfg, args.seed)
    if args.init:
        init = Path(args.init)
        _, meta = load(init)
        if meta.get("kind") == "encoder":
            load_encoder_weights(model, init)
        else:
            if meta.get("model_config") and ModelConfig.from_dict(meta["model_config"]) != cfg:
                raise CheckpointError(f"--init {init} was trained with a different model config")
            load_checkpoint(init, model)
    examples = build_examples(load_split(root, "train"), vocab, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    (out / "model_config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    (out / "plan.json").write_text(json.dumps(plan.to_dict(), indent=1, sort_keys=True))
    result = train(model, plan, examples, log_path=out / "train_log.jsonl", checkpoint_dir=out / "checkpoints",
                   resume=args.resume, meta={"vocab": vocab.tokens, "kind": "model"})
    final = out / f"{plan.phase}.ntc"
    save_checkpoint(final, model, plan_hash=result.plan_hash,
                    meta={"vocab": vocab.tokens, "kind": "model", "phase": plan.phase,
                          "model_config": cfg.to_dict()})
    emit(out, "train_summary.jsonl", {"phase": plan.phase, "steps": result.steps,
                                      "final_loss": result.losses[-1] if result.losses else None,
                                      "checkpoint": str(final)})
    return EXIT_OK


def evaluate_model(model: SceneQAModel, vocab: Vocabulary, manifest: DatasetManifest, mode: str = "greedy",
                   tasks=None, batch_size: int = 16) -> tuple[MetricReport, list[dict]]:
    examples = build_examples(manifest, vocab, model.config, tasks=tasks)
    records = []
    with T.precision("float32"):
        for i in range(0, len(examples), batch_size):
            batch = examples[i:i + batch_size]
            for e, answer in zip(batch, model.generate(batch, vocab, mode)):
                records.append({"id": e.id, "question": e.question, "answer": answer,
                                "references": e.references, "task": e.task})
    pairs = [EvalPair.from_text(r["id"], r["answer"], r["references"], r["task"]) for r in records]
    return MetricReport.from_pairs(pairs), records


def cmd_eval(args) -> int:
    out = Path(args.out) if args.out else None
    if args.predictions:
        report = MetricReport.from_pairs(read_predictions(args.predictions))
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint (or --predictions)")
        root = dataset_root(args)
        model, vocab, _ = load_model(Path(args.checkpoint))
        report, records = evaluate_model(model, vocab, load_split(root, args.split), args.mode)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            write_predictions(out / "predictions.jsonl", records)
    print(report.table())
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report.record(), indent=1, sort_keys=True))
        with open(out / "report.jsonl", "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"split": "all", **report.scores}, sort_keys=True) + "\n")
            for task, sc in report.per_task.items():
                fh.write(json.dumps({"split": task, **sc}, sort_keys=True) + "\n")
    return EXIT_OK


def single_scene(path: Path, question: str, model: SceneQAModel, vocab: Vocabulary):
    cloud = read_cloud(path)
    sample = SceneSample(path.stem, cloud, [], [QAItem("q0", question, ".", "qa")])
    manifest = DatasetManifest("infer", [sample])
    return cloud, build_examples(manifest, vocab, model.config)[0]


def cmd_infer(args) -> int:
    model, vocab, _ = load_model(Path(args.checkpoint))
    _, example = single_scene(Path(args.cloud), args.question, model, vocab)
    with T.precision("float32"):
        answer = model.generate([example], vocab, args.mode)[0]
    print(json.dumps({"question": args.question, "answer": answer}))
    return EXIT_OK


def cmd_export_attention(args) -> int:
    model, vocab, _ = load_model(Path(args.checkpoint))
    if args.k > model.config.compressor.n_queries:
        raise UsageError(f"--k {args.k} exceeds N_q={model.config.compressor.n_queries}")
    cloud, example = single_scene(Path(args.cloud), args.question, model, vocab)
    original = (cloud.points - example.scene.centroid) / example.scene.scale
    with T.precision("float32"):
        maps = export_attention(model, example, args.k, original)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def colored(score):
        rgb = np.column_stack([score, np.full_like(score, 0.25), np.full_like(score, 0.25)])
        return PointCloud(cloud.points, rgb)

    for i, score in enumerate(maps.scores):
        write_ply(out / f"query_{i:02d}.ply", colored(score))
    write_ply(out / "composite.ply", colored(maps.composite))
    emit(out, "attention.jsonl", {"question": args.question, "k": args.k,
                                  "object_queries": maps.object_queries.tolist(), "points": len(cloud)})
    return EXIT_OK


def cmd_query_sweep(args) -> int:
    root = dataset_root(args)
    vocab = corpus_vocabulary(root)
    base = model_config(args, len(vocab))
    # ModelConfig checks N_q against N_3D here, before any training starts
    plans = [replace(base, encoder=replace(base.encoder, n_3d=args.n3d)).with_queries(nq) for nq in args.nq]
    train_m, val_m = load_split(root, "train"), load_split(root, "val")
    out = Path(args.out) if args.out else None
    fingerprint = {"machine": platform.machine(), "python": platform.python_version(), "numpy": np.__version__,
                   "cpus": os.cpu_count()}
    for nq, cfg in zip(args.nq, plans):
        with T.precision("float32"):
            model = SceneQAModel(cfg, args.seed)
        plan = TrainPlan.desk("finetune", seed=args.seed, max_steps=args.steps, query_fusion=cfg.compressor.query_fusion,
                              tasks=None)
        if args.steps > 0:
            train(model, plan, build_examples(train_m, vocab, cfg))
        report, _ = evaluate_model(model, vocab, val_m)
        val_examples = build_examples(val_m, vocab, cfg)[: args.throughput_batch]
        with T.precision("float32"):
            tps = decode_throughput(model, val_examples, steps=args.decode_steps)
        row = {"nq": nq, **{k: v for k, v in report.scores.items()}, "tokens_per_s": tps, "env": fingerprint}
        emit(out, "query_sweep.jsonl", row)
    return EXIT_OK


def cmd_stats(args) -> int:
    root = dataset_root(args)
    manifest = DatasetManifest.read(root / f"manifest_{args.split}.jsonl")
    stats = token_stats(manifest, tokenize)
    rec = stats.to_dict()
    rec.pop("question_lengths")
    rec.pop("answer_lengths")
    emit(Path(args.out) if args.out else None, "token_stats.jsonl", {"split": args.split, **rec})
    return EXIT_OK


def cmd_ingest_scanqa(args) -> int:
    manifest = ingest_scanqa(args.questions, args.annotations, args.clouds, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clouds = Path(args.clouds).resolve()
    for s in manifest.samples:
        s.cloud_path = os.path.relpath(clouds / s.cloud_path, out.resolve())
    manifest.write(out / f"manifest_{args.split}.jsonl")
    print(f"{len(manifest.samples)} scenes, {len(manifest.qa_ids())} samples; skipped {len(manifest.skipped)}")
    return EXIT_OK


# ------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="sceneqa", description="Desk-scale 3D scene question answering.")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def model_opts(sp):
        sp.add_argument("--preset", default="desk", choices=["tiny", "small", "desk", "full"])
        sp.add_argument("--model-config", help="JSON model config (overrides --preset)")
        sp.add_argument("--no-fusion", action="store_true", help="disable query fusion")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--dataset", "--out", dest="dataset")
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--scenes", type=int, default=64)
    g.add_argument("--points", type=int, default=4096)
    g.add_argument("--val-fraction", type=float, default=0.25)
    g.add_argument("--palette", help="JSON palette with categories and colors")
    g.set_defaults(func=cmd_gen_data)

    d = sub.add_parser("pretrain-detector", help="detection pre-training of the spatial encoder")
    d.add_argument("--dataset")
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--steps", type=int, default=3000)
    d.add_argument("--batch-size", type=int, default=8)
    d.add_argument("--lr-max", type=float, default=6e-3)
    d.add_argument("--lr-min", type=float, default=1e-4)
    model_opts(d)
    d.set_defaults(func=cmd_pretrain_detector)

    t = sub.add_parser("train", help="pre-train or fine-tune the full model")
    t.add_argument("--dataset")
    t.add_argument("--out", required=True)
    t.add_argument("--phase", choices=["pretrain", "finetune"], required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--init", help="encoder or model checkpoint to start from")
    t.add_argument("--resume", help="training checkpoint to resume")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr-max", type=float)
    t.add_argument("--lr-min", type=float)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--published-schedule", action="store_true", help="published epochs, batch size and learning rates")
    t.add_argument("--freeze-lm", action="store_true")
    t.add_argument("--freeze-encoder", action="store_true")
    t.add_argument("--freeze-compressor", action="store_true")
    t.add_argument("--nq", type=int)
    model_opts(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="generate answers for a split and score them")
    e.add_argument("--dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--predictions", help="score an existing prediction file instead")
    e.add_argument("--split", default="val")
    e.add_argument("--mode", choices=["greedy", "beam"], default="greedy")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="answer one question about one point cloud")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--cloud", required=True)
    i.add_argument("--question", required=True)
    i.add_argument("--mode", choices=["greedy", "beam"], default="greedy")
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("export-attention", help="write per-query attention heat maps as PLY")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--cloud", required=True)
    a.add_argument("--question", required=True)
    a.add_argument("--k", type=int, default=10)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_export_attention)

    q = sub.add_parser("query-sweep", help="train and time models with different query counts")
    q.add_argument("--dataset")
    q.add_argument("--nq", type=int, nargs="+", default=[4, 32, 128])
    q.add_argument("--n3d", type=int, default=128, help="object queries (must be >= every N_q with fusion)")
    q.add_argument("--steps", type=int, default=200)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--decode-steps", type=int, default=8)
    q.add_argument("--throughput-batch", type=int, default=8)
    q.add_argument("--out")
    model_opts(q)
    q.set_defaults(func=cmd_query_sweep)

    s = sub.add_parser("stats", help="token-length statistics of a split")
    s.add_argument("--dataset")
    s.add_argument("--split", default="train")
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    n = sub.add_parser("ingest-scanqa", help="convert ScanQA-style files into a manifest")
    n.add_argument("--questions", required=True)
    n.add_argument("--annotations")
    n.add_argument("--clouds", required=True)
    n.add_argument("--split", default="val")
    n.add_argument("--out", required=True)
    n.set_defaults(func=cmd_ingest_scanqa)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, PLYFormatError, IntegrityError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, TrainingAborted) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
