"""Command line: synth, train, train-seq2seq, eval, serve, generate, load-probe.

Data directories hold the catalogue files plus ``interactions.jsonl`` and
``contexts.jsonl``. Bundle directories are what the service loads.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..config import AppConfig, load_config
from ..datamodel import CatalogError, InteractionFormatError, load_catalog_dir, load_contexts, load_interactions
from ..embedding import config_for_catalog
from ..model import (
    CheckpointError,
    FallbackModel,
    RankingModel,
    TrainingDivergedError,
    build_seq2seq_examples,
    train_fallback,
    train_ranking,
    train_seq2seq,
)
from ..pipeline import ConfigError
from ..service import (
    MODEL_FILES,
    BundleError,
    RecommenderService,
    ServiceError,
    make_server,
    serve_in_thread,
    write_manifest,
    write_use_cases,
)
from .evaluate import (
    KS,
    evaluate,
    leave_last_out,
    model_ranker,
    oracle_ranker,
    pipeline_ranker,
    popularity_baseline,
    random_baseline,
    training_examples,
)
from .synth import generate_synthetic, write_synthetic

log = logging.getLogger("seqrec")


class CliError(Exception):
    pass


def _load_data(data_dir: str):
    d = Path(data_dir)
    catalog = load_catalog_dir(d)
    sequences = load_interactions(d / "interactions.jsonl", catalog).sequences
    contexts = load_contexts(d / "contexts.jsonl", catalog.vocab_sizes)
    return catalog, sequences, contexts


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    sys.stdout.flush()


def _train_cfg(base, args):
    over = {}
    if args.epochs is not None:
        over["epochs"] = args.epochs
    if args.seed is not None:
        over["seed"] = args.seed
    return replace(base, **over)


# -- subcommands -------------------------------------------------------------

def cmd_synth(cfg: AppConfig, args) -> int:
    synth = cfg.synth
    over = {k: v for k, v in (("seed", args.seed), ("n_users", args.users)) if v is not None}
    synth = replace(synth, **over)
    data = generate_synthetic(synth)
    write_synthetic(data, args.out, synth)
    _emit({"out": str(args.out), "users": len(data.sequences),
           "interactions": sum(len(s) for s in data.sequences.values()),
           "catalog": dict(zip(("items", "outfits", "creators"), data.catalog.sizes))})
    return 0


def cmd_train(cfg: AppConfig, args) -> int:
    catalog, sequences, contexts = _load_data(args.data)
    split = leave_last_out(sequences, contexts, cfg.model.target_entity_type)
    examples = training_examples(split, contexts, catalog, cfg.model.max_len)
    train = _train_cfg(cfg.train, args)
    out = Path(args.out)
    catalog.save(out)
    write_use_cases(out, cfg.service.use_cases)
    summary = {"examples": len(examples), "out": str(out)}
    if args.variant in ("softmax", "both"):
        emb = config_for_catalog(catalog, d_model=cfg.model.d_model, max_len=cfg.model.max_len,
                                 use_age_feature=cfg.use_age_feature)
        model, res = train_ranking(examples, catalog, cfg.model, train, emb)
        model.save(out / MODEL_FILES["ranking"], {"train": train.to_dict(), "loss_curve": res.loss_curve,
                                                   "initial_loss": res.initial_loss})
        summary["ranking"] = {"initial_loss": res.initial_loss, "final_loss": res.loss_curve[-1] if res.loss_curve
                              else None, "seconds": round(res.seconds, 2)}
    if args.variant in ("fallback", "both"):
        enc = replace(cfg.model, layers=cfg.fallback.layers)
        model, res = train_fallback(examples, catalog, enc, train, cfg.fallback.loss, cfg.fallback.negatives)
        model.save(out / MODEL_FILES["fallback"], {"train": train.to_dict(), "loss_curve": res.loss_curve})
        summary["fallback"] = {"final_loss": res.loss_curve[-1] if res.loss_curve else None,
                               "seconds": round(res.seconds, 2)}
    write_manifest(out)
    _emit(summary)
    return 0


def cmd_train_seq2seq(cfg: AppConfig, args) -> int:
    catalog, sequences, contexts = _load_data(args.data)
    split = leave_last_out(sequences, contexts, "outfit")
    ref = split.train_reference_ts
    examples = []
    for uid in sorted(split.train):
        examples += build_seq2seq_examples(split.train[uid], contexts.get(uid), catalog, cfg.seq2seq.max_len, ref)
    if args.limit is not None:
        examples = examples[:args.limit]
    train = _train_cfg(cfg.seq2seq_train, args)
    out = Path(args.out)
    if not (out / "items.jsonl").exists():
        catalog.save(out)
    elif load_catalog_dir(out).fingerprint() != catalog.fingerprint():
        raise CliError(f"{out} already holds a different catalog")
    model, res = train_seq2seq(examples, catalog, cfg.seq2seq, train)
    model.save(out / MODEL_FILES["seq2seq"], {"train": train.to_dict(), "loss_curve": res.loss_curve})
    write_manifest(out)
    _emit({"examples": len(examples), "out": str(out), "step_accuracy": model.step_accuracy(examples[:512]),
           "final_loss": res.loss_curve[-1] if res.loss_curve else None, "seconds": round(res.seconds, 2)})
    return 0


def cmd_eval(cfg: AppConfig, args) -> int:
    catalog, sequences, contexts = _load_data(args.data)
    etype = cfg.model.target_entity_type
    split = leave_last_out(sequences, contexts, etype)
    ks = tuple(int(k) for k in args.ks.split(",")) if args.ks else KS
    bundle = Path(args.bundle) if args.bundle else None
    name = args.model
    if name in ("ranking", "fallback"):
        if bundle is None:
            raise CliError(f"--model {name} needs --bundle")
        cls = RankingModel if name == "ranking" else FallbackModel
        model = cls.load(bundle / MODEL_FILES[name], catalog)
        if args.use_case:
            cases = cfg.service.use_cases
            if args.use_case not in cases:
                raise CliError(f"unknown use case {args.use_case!r}")
            ranker = pipeline_ranker(model, cases[args.use_case], seed=args.seed or 0)
        else:
            ranker = model_ranker(model)
    elif name == "popularity":
        ranker = popularity_baseline(split.train, catalog, etype)
    elif name == "random":
        ranker = random_baseline(catalog, etype, seed=args.seed or 0)
    else:
        ranker = oracle_ranker(catalog, etype)
    report = evaluate(ranker, split, catalog, ks)
    report.extra["model"] = name
    if args.use_case:
        report.extra["use_case"] = args.use_case
    if args.baselines:
        report.extra["baselines"] = {
            "popularity": evaluate(popularity_baseline(split.train, catalog, etype), split, catalog, ks).overall,
            "random": evaluate(random_baseline(catalog, etype), split, catalog, ks).overall,
        }
    sys.stdout.write(report.to_json() + "\n")
    return 0


def _service(cfg: AppConfig, bundle: str) -> RecommenderService:
    svc = RecommenderService(cfg.service.use_cases, cfg.min_items)
    svc.reload_artifacts(bundle)
    return svc


def cmd_serve(cfg: AppConfig, args) -> int:
    bundle = args.bundle or cfg.service.artifacts
    svc = _service(cfg, bundle)
    server = make_server(svc, args.host or cfg.service.host, cfg.service.port if args.port is None else args.port,
                         default_path=bundle)
    host, port = server.server_address[:2]
    log.info("serving %s on http://%s:%d", svc.artifacts.version, host, port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _read_request(text: str | None) -> dict:
    if text is None:
        return {}
    if text == "-":
        text = sys.stdin.read()
    elif text.startswith("@"):
        text = Path(text[1:]).read_text()
    try:
        body = json.loads(text)
    except ValueError as exc:
        raise CliError(f"request is not valid JSON: {exc}") from None
    if not isinstance(body, dict):
        raise CliError("request must be a JSON object")
    return body


def cmd_generate(cfg: AppConfig, args) -> int:
    body = _read_request(args.request)
    for key in ("strategy", "temperature", "max_items", "min_items", "seed"):
        val = getattr(args, key)
        if val is not None:
            body[key] = val
    svc = _service(cfg, args.bundle or cfg.service.artifacts)
    try:
        _emit(svc.handle_generate(body))
    except ServiceError as exc:
        raise CliError(exc.message) from None
    return 0


def _probe_bodies(cfg: AppConfig, args, catalog) -> list[dict]:
    if not args.data:
        rng = np.random.default_rng(0)
        bodies = []
        for n in range(64):
            ids = catalog.ids("item")
            hist = [{"entity_type": "item", "entity_id": ids[int(rng.integers(len(ids)))], "interaction_type": "click",
                     "timestamp": 1_700_000_000 + 60 * j} for j in range(int(rng.integers(0, 20)))]
            bodies.append({"user_id": f"probe{n}", "interactions": hist, "reference_ts": 1_700_100_000})
        return bodies
    _, sequences, contexts = _load_data(args.data)
    split = leave_last_out(sequences, contexts, cfg.model.target_entity_type)
    bodies = []
    for u in split.heldout[:500]:
        ctx = u.context
        bodies.append({
            "user_id": u.user_id,
            "context": None if ctx is None else {"market": ctx.market, "device": ctx.device,
                                                 "gender_intent": ctx.gender_intent},
            "interactions": [{"entity_type": i.entity_type, "entity_id": i.entity_id,
                              "interaction_type": i.interaction_type, "timestamp": i.timestamp} for i in u.history],
            "reference_ts": u.reference_ts,
        })
    return bodies


def cmd_load_probe(cfg: AppConfig, args) -> int:
    server = None
    if args.url:
        base = args.url.rstrip("/")
        with urllib.request.urlopen(base + "/health") as resp:
            health = json.loads(resp.read())
        catalog = load_catalog_dir(args.bundle) if args.bundle else None
        if catalog is None and not args.data:
            raise CliError("--url without --data needs --bundle to build requests")
    else:
        svc = _service(cfg, args.bundle or cfg.service.artifacts)
        server, _ = serve_in_thread(svc)
        base = "http://%s:%d" % server.server_address[:2]
        health = svc.health()
        catalog = svc.artifacts.catalog
    bodies = _probe_bodies(cfg, args, catalog or load_catalog_dir(args.data))
    for b in bodies:
        b["use_case"] = args.use_case
        b["k"] = args.k
    errors = 0
    lock = threading.Lock()

    def one(n: int) -> float:
        nonlocal errors
        data = json.dumps(bodies[n % len(bodies)]).encode()
        req = urllib.request.Request(base + "/v1/recommend", data=data, headers={"Content-Type": "application/json"})
        t0 = time.perf_counter()
        try:
            with urllib.request.urlopen(req) as resp:
                resp.read()
        except urllib.error.URLError:
            with lock:
                errors += 1
        return time.perf_counter() - t0

    try:
        for n in range(min(args.warmup, args.requests)):
            one(n)
        t0 = time.perf_counter()
        with ThreadPoolExecutor(args.concurrency) as pool:
            lat = np.array(list(pool.map(one, range(args.requests)))) * 1000
        wall = time.perf_counter() - t0
    finally:
        if server is not None:
            server.shutdown()
            server.server_close()
    _emit({"version": health.get("version"), "requests": args.requests, "concurrency": args.concurrency,
           "errors": errors, "p50_ms": round(float(np.percentile(lat, 50)), 3),
           "p90_ms": round(float(np.percentile(lat, 90)), 3), "p99_ms": round(float(np.percentile(lat, 99)), 3),
           "max_ms": round(float(lat.max()), 3), "throughput_rps": round(args.requests / wall, 1)})
    return 0 if errors == 0 else 1


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqrec", description="Sequence recommender: data, training, eval, serving.")
    p.add_argument("--config", help="TOML or JSON config file shared by all subcommands")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--users", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train the ranking (softmax) and/or fallback model into a bundle")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="bundle directory")
    s.add_argument("--variant", choices=("softmax", "fallback", "both"), default="softmax")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("train-seq2seq", help="train the outfit generator into a bundle")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="bundle directory")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--limit", type=int, help="use only the first N outfit examples")
    s.set_defaults(func=cmd_train_seq2seq)

    s = sub.add_parser("eval", help="leave-last-out evaluation; report JSON on stdout")
    s.add_argument("--data", required=True)
    s.add_argument("--bundle")
    s.add_argument("--model", choices=("ranking", "fallback", "popularity", "random", "oracle"), default="ranking")
    s.add_argument("--use-case", help="rank through this use case's full pipeline")
    s.add_argument("--ks", help="comma-separated cutoffs, default 5,10,20")
    s.add_argument("--seed", type=int)
    s.add_argument("--no-baselines", dest="baselines", action="store_false")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--bundle")
    s.add_argument("--host")
    s.add_argument("--port", type=int)
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("generate", help="generate one outfit from a bundle")
    s.add_argument("--bundle")
    s.add_argument("--request", help="JSON body, @file, or - for stdin")
    s.add_argument("--strategy", choices=("greedy", "sample"))
    s.add_argument("--temperature", type=float)
    s.add_argument("--max-items", type=int)
    s.add_argument("--min-items", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("load-probe", help="measure recommend latency percentiles")
    s.add_argument("--bundle")
    s.add_argument("--data", help="dataset whose held-out users become requests")
    s.add_argument("--url", help="probe a running server instead of an in-process one")
    s.add_argument("--requests", type=int, default=500)
    s.add_argument("--concurrency", type=int, default=8)
    s.add_argument("--warmup", type=int, default=20)
    s.add_argument("--use-case", default="default")
    s.add_argument("--k", type=int, default=10)
    s.set_defaults(func=cmd_load_probe)
    return p


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad usage
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(cfg, args)
    except (CliError, ConfigError, BundleError, CheckpointError, CatalogError, InteractionFormatError,
            TrainingDivergedError, OSError, ValueError) as exc:
        print(f"seqrec {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
