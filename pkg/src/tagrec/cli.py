"""Command-line entry point.

Every subcommand exits zero on success and nonzero on error, and
supports ``--json`` for machine-readable output.  A config file
(``--config``) supplies defaults; flags override per invocation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import lexicons
from .catalog import Catalog
from .compression import compress
from .config import PipelineConfig, load_config, save_config
from .errors import TagrecError
from .events import EventStore, reliable_filter
from .explain import build_table, derive_interest_links, generate_explanation, \
    lookup, pair_candidates, ExplanationTable
from .gateway import Task
from .incremental import (FeedbackRecord, RulePurifier, StubCompleter, balance,
                          complete, export_sft, hr_at_k, make_eval_set, purify,
                          EvalSet, EvalUser)
from .judge import (DEFAULT_SCHEMAS, AgreementMetrics, JudgeBuffer,
                    buffer_agreement, drift_check)
from .pipeline import Pipeline, dataset_from_store
from .retrieval import (FusionConfig, Interaction, ItemFeatures, LossConfig,
                        ModelConfig, RetrievalDataset, retrieve_topk, save_model,
                        train, fuse)
from .service import JudgeService, serve_forever
from .taxonomy import TagMapper


def _load_cfg(args) -> PipelineConfig:
    if args.config and Path(args.config).exists():
        cfg = load_config(args.config)
    else:
        cfg = PipelineConfig()
    overrides = {}
    for name in ("store_dir", "catalog_path", "provider", "seed", "now"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def _emit(args, payload: dict, human: list[str]) -> None:
    if args.json:
        print(json.dumps(payload, ensure_ascii=False, indent=1))
    else:
        for line in human:
            print(line)


def cmd_ingest(args) -> int:
    cfg = _load_cfg(args)
    store = EventStore(args.store or cfg.store_dir)
    with open(args.input, encoding="utf-8") as fh:
        report = store.ingest(fh)
    payload = {"accepted": report.accepted, "rejected": report.rejected,
               "rejects": [{"line": line, "reason": reason}
                           for line, reason in report.rejects]}
    human = [f"accepted {report.accepted} events, rejected {report.rejected}"]
    human += [f"  line {line}: {reason}" for line, reason in report.rejects[:20]]
    _emit(args, payload, human)
    return 0


def cmd_export(args) -> int:
    cfg = _load_cfg(args)
    store = EventStore(args.store or cfg.store_dir)
    lines = store.export_lines(args.user, since=args.since, until=args.until)
    if args.json:
        print(json.dumps({"user_id": args.user, "events": len(lines),
                          "lines": lines}, ensure_ascii=False, indent=1))
    else:
        for line in lines:
            print(line)
    return 0


def cmd_compress(args) -> int:
    cfg = _load_cfg(args)
    store = EventStore(args.store or cfg.store_dir)
    log = store.log(args.user)
    if args.reliable_only:
        log = reliable_filter(log)
    now = args.now if args.now is not None else (cfg.now or None)
    if now is None:
        import time as _time
        now = int(_time.time())
    compressed = compress(log, now, limit=args.k, budget=args.budget)
    payload = {"user_id": args.user, "groups": len(compressed.groups),
               "token_count": compressed.token_count,
               "truncated": compressed.truncated,
               "rendered": compressed.rendered}
    _emit(args, payload, [f"groups={len(compressed.groups)} "
                          f"tokens={compressed.token_count}",
                          compressed.rendered])
    return 0


def cmd_mine_interests(args) -> int:
    cfg = _load_cfg(args)
    if args.pool_size is not None:
        cfg = dataclasses.replace(cfg, pool_size=args.pool_size)
    pipeline = Pipeline(cfg)
    profile = pipeline.ensure_profile(args.user)
    payload = profile.to_wire()
    human = [f"{args.user}: {len(profile.interests)} interests "
             f"({len(profile.passed())} passed screening)"]
    human += [f"  {e.label} [{e.stage}] {'PASS' if e.verdict and e.verdict.passed else 'fail'}"
              for e in profile.interests]
    _emit(args, payload, human)
    return 0


def cmd_predict_tags(args) -> int:
    cfg = _load_cfg(args)
    if args.min_tags is not None:
        cfg = dataclasses.replace(cfg, min_tags=args.min_tags)
    pipeline = Pipeline(cfg)
    profile = pipeline.ensure_profile(args.user)
    tag_set = pipeline.ensure_tags(args.user, profile)
    payload = tag_set.to_wire()
    human = [f"{args.user}: {len(tag_set.triplets)} tags"]
    human += [f"  {t.tag}  <-  {t.interest}" for t in tag_set.triplets[:20]]
    _emit(args, payload, human)
    return 0


def _dataset_from_json(path: str) -> RetrievalDataset:
    record = json.loads(Path(path).read_text(encoding="utf-8"))
    items = {r["sparse"]["item_id"]: ItemFeatures(sparse=r["sparse"],
                                                  dense=r.get("dense", {}))
             for r in record["items"]}
    interactions = [Interaction(**r) for r in record["interactions"]]
    return RetrievalDataset(items=items, interactions=interactions,
                            user_sequences=record.get("sequences", {}))


def cmd_train_retrieval(args) -> int:
    cfg = _load_cfg(args)
    if args.data:
        dataset = _dataset_from_json(args.data)
    else:
        catalog = Catalog.load(cfg.catalog_path)
        dataset = dataset_from_store(EventStore(cfg.store_dir), catalog)
    steps = args.steps
    if steps is None and args.epochs is not None:
        per_epoch = max(1, len(dataset.interactions) // cfg.batch_size)
        steps = args.epochs * per_epoch
    loss_cfg = LossConfig(
        alpha=args.alpha if args.alpha is not None else cfg.alpha,
        k_negatives=args.k_neg if args.k_neg is not None else cfg.k_negatives,
        learning_rate=cfg.learning_rate,
        steps=steps if steps is not None else cfg.train_steps,
        batch_size=cfg.batch_size,
        seed=args.seed if args.seed is not None else cfg.seed)
    model_cfg = ModelConfig(embed_dim=cfg.embed_dim, output_dim=cfg.output_dim,
                            seed=loss_cfg.seed)
    result = train(dataset, loss_cfg, model_config=model_cfg)
    out = Path(args.out) if args.out else Path(cfg.artifacts_dir) / "model.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(result.model, out)
    payload = {"model": str(out), "steps": len(result.history),
               "initial_loss": result.history[0], "final_loss": result.history[-1]}
    _emit(args, payload, [f"trained {len(result.history)} steps: "
                          f"{result.history[0]:.4f} -> {result.history[-1]:.4f}",
                          f"saved {out}"])
    return 0


def cmd_retrieve(args) -> int:
    cfg = _load_cfg(args)
    if args.beta is not None:
        cfg = dataclasses.replace(cfg, beta=args.beta)
    pipeline = Pipeline(cfg)
    profile = pipeline.ensure_profile(args.user)
    tag_set = pipeline.ensure_tags(args.user, profile)
    fused = fuse(pipeline.user_vector(args.user), pipeline.tag_vector(tag_set),
                 FusionConfig(beta=cfg.beta))
    ranked = retrieve_topk(pipeline.embedded_catalog(), fused, args.k)
    payload = {"user_id": args.user, "beta": cfg.beta,
               "items": [{"item_id": i, "score": s} for i, s in ranked]}
    _emit(args, payload, [f"{i}  {s:.4f}" for i, s in ranked])
    return 0


def cmd_build_explanations(args) -> int:
    cfg = _load_cfg(args)
    pipeline = Pipeline(cfg)
    profiles = list(pipeline.profiles.load_all().values())
    if not profiles:
        raise TagrecError("no profiles found; run mine-interests first")
    phi = TagMapper(pipeline.ensure_taxonomy(), pipeline.ensure_model())
    links = derive_interest_links(pipeline.tag_sets.load_all().values(), phi)
    pairs, skipped = pair_candidates(profiles, pipeline.catalog, links)
    table = ExplanationTable.load(pipeline.table_path)
    generator = lambda interest, item_id: generate_explanation(
        pipeline.gateway, interest, pipeline.catalog.get(item_id),
        date_ts=pipeline.now(), judge=pipeline.judge, seed=cfg.seed)
    report = build_table(table, pairs, generator)
    table.save(pipeline.table_path)
    payload = {"pairs": len(pairs), "generated": report.generated,
               "skipped_existing": report.skipped_existing,
               "failures": report.failures, "unlinked_interests": skipped}
    _emit(args, payload, [f"pairs={len(pairs)} generated={report.generated} "
                          f"skipped={report.skipped_existing} "
                          f"failures={len(report.failures)}"])
    return 0


def cmd_explain(args) -> int:
    cfg = _load_cfg(args)
    pipeline = Pipeline(cfg)
    profile = pipeline.ensure_profile(args.user)
    table = ExplanationTable.load(pipeline.table_path)
    product = pipeline.catalog.get(args.item)
    if product is None:
        raise TagrecError(f"unknown item {args.item!r}")
    entry = lookup(table, args.item, profile, product, now=pipeline.now())
    payload = entry.to_wire()
    _emit(args, payload, [f"{args.item}: {entry.explanation}"
                          + ("  (fallback)" if entry.fallback else "")])
    return 0


def cmd_il_pipeline(args) -> int:
    cfg = _load_cfg(args)
    pipeline = Pipeline(cfg)
    store = pipeline.store
    now = pipeline.now()
    since = now - args.window_days * 86400
    records = []
    logs = {}
    for user_id in store.user_ids():
        log = store.log(user_id)
        logs[user_id] = log
        for event in log.events:
            if event.timestamp < since or event.timestamp >= now:
                continue
            if not event.item_id or not event.item_title:
                continue
            behavior = "purchase" if event.behavior.value == "purchase" else "click"
            records.append(FeedbackRecord(
                user_id=user_id, item_id=event.item_id,
                item_title=event.item_title, category=event.category_id or "",
                behavior=behavior, timestamp=event.timestamp))
    purified = purify(records, RulePurifier(logs))
    completed = complete(purified.kept, StubCompleter(),
                         pipeline.profiles.load_all())
    phi = None
    if pipeline.catalog is not None and pipeline.model_path.exists():
        phi = TagMapper(pipeline.ensure_taxonomy(), pipeline.ensure_model())
    balanced = balance(completed.samples,
                       per_user_cap=args.per_user_cap or cfg.per_user_cap,
                       per_cate_cap=args.per_cate_cap or cfg.per_cate_cap,
                       tag_to_cate=phi,
                       seed=args.seed if args.seed is not None else cfg.seed)
    count = export_sft(balanced, args.out)
    payload = {"window_days": args.window_days, "input": len(records),
               "kept": len(purified.kept), "dropped": len(purified.dropped),
               "review": len(purified.review),
               "completed": len(completed.samples),
               "skipped": completed.skipped, "exported": count,
               "out": args.out}
    _emit(args, payload, [f"input={len(records)} kept={len(purified.kept)} "
                          f"dropped={len(purified.dropped)} "
                          f"review={len(purified.review)} exported={count}"])
    return 0


def cmd_eval_hr(args) -> int:
    cfg = _load_cfg(args)
    record = json.loads(Path(args.eval).read_text(encoding="utf-8"))
    eval_set = EvalSet(users=tuple(
        EvalUser(user_id=u["user_id"], cutoff=u.get("cutoff", 0),
                 true_category=u["true_category"])
        for u in record["users"]))
    pipeline = Pipeline(cfg)
    if "predictions" in record:
        predictions = record["predictions"]
    else:
        def predictions(user_id: str) -> list[str]:
            profile = pipeline.ensure_profile(user_id)
            return pipeline.ensure_tags(user_id, profile).tags()
    if "phi" in record:
        mapping = record["phi"]
        phi = lambda tag: mapping.get(tag, "")
    else:
        phi = TagMapper(pipeline.ensure_taxonomy(), pipeline.ensure_model())
    value = hr_at_k(predictions, phi, eval_set, k=args.k)
    payload = {"k": args.k, "users": len(eval_set.users), "hr": value}
    _emit(args, payload, [f"HR@{args.k} = {value:.4f} over {len(eval_set.users)} users"])
    return 0


def cmd_judge_eval(args) -> int:
    cfg = _load_cfg(args)
    buffer = JudgeBuffer(Path(cfg.artifacts_dir) / "judge_buffer.jsonl")
    baseline_path = Path(cfg.artifacts_dir) / "judge_baseline.json"
    payload = {"tasks": {}}
    human = []
    for task in Task:
        metrics = buffer_agreement(buffer, task)
        payload["tasks"][task.value] = metrics.to_wire() if metrics else None
        if metrics:
            human.append(f"{task.value}: acc={metrics.accuracy:.4f} n={metrics.n}")
    if args.save_baseline:
        baseline_path.write_text(json.dumps(payload["tasks"]), encoding="utf-8")
        human.append(f"baseline saved to {baseline_path}")
        payload["baseline_saved"] = str(baseline_path)
    elif baseline_path.exists():
        stored = json.loads(baseline_path.read_text(encoding="utf-8"))
        payload["drift"] = {}
        for task in Task:
            metrics = buffer_agreement(buffer, task)
            base = stored.get(task.value)
            if metrics and base and base.get("accuracy") is not None:
                baseline = AgreementMetrics(
                    n=base["n"], tp=base["tp"], fp=base["fp"], fn=base["fn"],
                    tn=base["tn"], accuracy=base["accuracy"],
                    precision=base["precision"], recall=base["recall"],
                    f1=base["f1"])
                report = drift_check(metrics, baseline, delta=cfg.judge_delta)
                payload["drift"][task.value] = report.to_wire()
                human.append(f"{task.value}: drift={report.status}")
    _emit(args, payload, human or ["no doubly-labeled samples yet"])
    return 0


def cmd_serve(args) -> int:
    cfg = _load_cfg(args)
    if args.port is not None:
        cfg = dataclasses.replace(cfg, bind_port=args.port)
    if args.console_dir is not None:
        cfg = dataclasses.replace(cfg, console_dir=args.console_dir)
    buffer = JudgeBuffer(Path(cfg.artifacts_dir) / "judge_buffer.jsonl")
    pipeline = None
    if Path(cfg.catalog_path).exists():
        pipeline = Pipeline(cfg)
    service = JudgeService(cfg, buffer, pipeline=pipeline)
    print(f"serving on http://{cfg.bind_host}:{cfg.bind_port}", flush=True)
    serve_forever(service)
    return 0


def cmd_run_pipeline(args) -> int:
    cfg = _load_cfg(args)
    pipeline = Pipeline(cfg)
    bundle = pipeline.run(args.user, k=args.k)
    payload = bundle.to_wire()
    human = [f"{args.user}: {len(bundle.items)} items"]
    human += [f"  {item.item_id}  {item.score:.4f}  {item.explanation}"
              + ("  (fallback)" if item.fallback else "")
              for item in bundle.items]
    _emit(args, payload, human)
    return 0


def cmd_init_config(args) -> int:
    cfg = PipelineConfig()
    save_config(cfg, args.out)
    _emit(args, {"config": args.out}, [f"wrote defaults to {args.out}"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tagrec")
    parser.add_argument("--config", default="tagrec.cfg",
                        help="path to the key=value config file")
    parser.add_argument("--json", action="store_true",
                        help="machine-readable output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="ingest a JSONL event file")
    p.add_argument("--input", required=True)
    p.add_argument("--store", default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("export", help="export a user's events")
    p.add_argument("--user", required=True)
    p.add_argument("--since", type=int, default=None)
    p.add_argument("--until", type=int, default=None)
    p.add_argument("--store", default=None)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("compress", help="compress a user's behavior log")
    p.add_argument("--user", required=True)
    p.add_argument("--now", type=int, default=None)
    p.add_argument("--budget", type=int, default=128_000)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--store", default=None)
    p.add_argument("--reliable-only", action="store_true", default=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("mine-interests", help="mine and screen a profile")
    p.add_argument("--user", required=True)
    p.add_argument("--pool-size", type=int, default=None)
    p.add_argument("--provider", choices=("stub", "http"), default=None)
    p.set_defaults(func=cmd_mine_interests)

    p = sub.add_parser("predict-tags", help="predict item tags")
    p.add_argument("--user", required=True)
    p.add_argument("--min-tags", type=int, default=None)
    p.add_argument("--provider", choices=("stub", "http"), default=None)
    p.set_defaults(func=cmd_predict_tags)

    p = sub.add_parser("train-retrieval", help="train the tri-tower model")
    p.add_argument("--data", default=None, help="dataset JSON (default: store)")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--k-neg", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train_retrieval)

    p = sub.add_parser("retrieve", help="fused top-k retrieval")
    p.add_argument("--user", required=True)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--k", type=int, default=50)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("build-explanations", help="offline explanation table")
    p.add_argument("--profiles", default=None, help="unused; profiles come "
                   "from the artifacts dir")
    p.add_argument("--catalog", dest="catalog_path", default=None)
    p.set_defaults(func=cmd_build_explanations)

    p = sub.add_parser("explain", help="look up an explanation")
    p.add_argument("--user", required=True)
    p.add_argument("--item", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("il-pipeline", help="incremental-learning data pipeline")
    p.add_argument("--window-days", type=int, default=14)
    p.add_argument("--per-user-cap", type=int, default=None)
    p.add_argument("--per-cate-cap", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_il_pipeline)

    p = sub.add_parser("eval-hr", help="hit-rate evaluation")
    p.add_argument("--k", type=int, default=30)
    p.add_argument("--eval", required=True)
    p.set_defaults(func=cmd_eval_hr)

    p = sub.add_parser("judge-eval", help="agreement and drift metrics")
    p.add_argument("--save-baseline", action="store_true")
    p.set_defaults(func=cmd_judge_eval)

    p = sub.add_parser("serve", help="start the annotation/judge service")
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--console-dir", default=None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("run-pipeline", help="full loop for one user")
    p.add_argument("--user", required=True)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_run_pipeline)

    p = sub.add_parser("init-config", help="write a default config file")
    p.add_argument("--out", default="tagrec.cfg")
    p.set_defaults(func=cmd_init_config)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TagrecError as err:
        if args.json:
            print(json.dumps({"error": str(err)}), file=sys.stderr)
        else:
            print(f"error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
