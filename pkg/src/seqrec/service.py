"""HTTP serving with the entity catalogue co-located with the models.

Requests carry raw entity ids and context enums only; the service builds
features with the same code used in training. An artifact bundle is loaded,
validated and published as one immutable object, so a request reads the
current bundle reference once and is served entirely by that version.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any

import numpy as np

from .datamodel import (
    CONTEXT_FEATURES,
    ENTITY_TYPES,
    INTERACTION_TYPES,
    Catalog,
    CatalogError,
    Interaction,
    UserContext,
    load_catalog_dir,
)
from .model import CheckpointError, FallbackModel, RankingModel, Seq2SeqModel
from .pipeline import ConfigError, ModelScorer, PipelineRequest, UseCaseConfig, rerank, validate_use_case

log = logging.getLogger(__name__)

CATALOG_FILES = ("items.jsonl", "outfits.jsonl", "creators.jsonl", "vocab.json")
MODEL_FILES = {"ranking": "ranking.npz", "fallback": "fallback.npz", "seq2seq": "seq2seq.npz"}
USE_CASE_FILE = "use_cases.json"
MANIFEST = "manifest.json"

RECOMMEND_KEYS = {"user_id", "use_case", "k", "context", "interactions", "reference_ts", "seed"}
GENERATE_KEYS = {"user_id", "context", "interactions", "strategy", "temperature", "max_items", "min_items",
                 "reference_ts", "seed"}
INTERACTION_KEYS = {"entity_type", "entity_id", "interaction_type", "timestamp"}


class BundleError(ValueError):
    pass


class ServiceError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(bundle_dir: str | Path) -> dict:
    """Checksum every bundle file present and write ``manifest.json``."""
    d = Path(bundle_dir)
    names = [n for n in CATALOG_FILES + tuple(MODEL_FILES.values()) + (USE_CASE_FILE,) if (d / n).exists()]
    manifest = {"files": {n: sha256_file(d / n) for n in names}}
    tmp = d / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    tmp.replace(d / MANIFEST)
    return manifest


def write_use_cases(bundle_dir: str | Path, use_cases: dict[str, UseCaseConfig]) -> None:
    body = {name: {k: v for k, v in uc.to_dict().items() if k != "name"} for name, uc in use_cases.items()}
    (Path(bundle_dir) / USE_CASE_FILE).write_text(json.dumps(body, sort_keys=True, indent=1) + "\n")


def build_bundle(bundle_dir: str | Path, catalog: Catalog, ranking: RankingModel,
                 fallback: FallbackModel | None = None, seq2seq: Seq2SeqModel | None = None,
                 use_cases: dict[str, UseCaseConfig] | None = None) -> Path:
    """Write catalog, checkpoints and use cases, then the manifest last."""
    d = Path(bundle_dir)
    catalog.save(d)
    ranking.save(d / MODEL_FILES["ranking"])
    if fallback is not None:
        fallback.save(d / MODEL_FILES["fallback"])
    if seq2seq is not None:
        seq2seq.save(d / MODEL_FILES["seq2seq"])
    if use_cases is not None:
        write_use_cases(d, use_cases)
    write_manifest(d)
    return d


@dataclass(frozen=True)
class ServingArtifacts:
    version: str
    path: str
    catalog: Catalog
    ranking: RankingModel
    fallback: FallbackModel | None
    seq2seq: Seq2SeqModel | None
    use_cases: dict[str, UseCaseConfig]
    checksums: dict[str, str]
    vectors: dict[str, np.ndarray] = field(default_factory=dict)
    min_items: int = 2


def load_bundle(path: str | Path, version: str, default_use_cases: dict[str, UseCaseConfig] | None = None,
                min_items: int = 2) -> ServingArtifacts:
    d = Path(path)
    mpath = d / MANIFEST
    if not mpath.exists():
        raise BundleError(f"{d}: no {MANIFEST}")
    try:
        manifest = json.loads(mpath.read_text())
        files = dict(manifest["files"])
    except (ValueError, KeyError, TypeError) as exc:
        raise BundleError(f"{mpath}: unreadable manifest ({exc})") from None
    for required in ("items.jsonl", "outfits.jsonl", "vocab.json", MODEL_FILES["ranking"]):
        if required not in files:
            raise BundleError(f"{d}: manifest does not list {required}")
    for name, digest in files.items():
        fp = d / name
        if not fp.exists():
            raise BundleError(f"{d}: {name} listed in manifest but missing")
        if sha256_file(fp) != digest:
            raise BundleError(f"{d}: checksum mismatch for {name}")
    try:
        catalog = load_catalog_dir(d)
        ranking = RankingModel.load(d / MODEL_FILES["ranking"], catalog)
        fallback = FallbackModel.load(d / MODEL_FILES["fallback"], catalog) if "fallback.npz" in files else None
        seq2seq = Seq2SeqModel.load(d / MODEL_FILES["seq2seq"], catalog) if "seq2seq.npz" in files else None
    except (CatalogError, CheckpointError, ValueError, KeyError, OSError) as exc:
        raise BundleError(f"{d}: {exc}") from None
    if USE_CASE_FILE in files:
        try:
            raw = json.loads((d / USE_CASE_FILE).read_text())
            use_cases = {n: UseCaseConfig.from_dict(n, b) for n, b in raw.items()}
        except (ValueError, AttributeError) as exc:
            raise BundleError(f"{d}: bad {USE_CASE_FILE} ({exc})") from None
    else:
        use_cases = dict(default_use_cases or {"default": UseCaseConfig("default")})
    for uc in use_cases.values():
        model = fallback if uc.model == "fallback" else ranking
        if model is None:
            raise BundleError(f"{d}: use case {uc.name!r} needs a fallback model, bundle has none")
        try:
            validate_use_case(uc, model)
        except ConfigError as exc:
            raise BundleError(f"{d}: {exc}") from None
    vectors = {"ranking": ModelScorer(ranking).target_vectors()}
    if fallback is not None:
        vectors["fallback"] = ModelScorer(fallback).target_vectors()
    return ServingArtifacts(version, str(d), catalog, ranking, fallback, seq2seq, use_cases, files, vectors,
                            min_items)


# -- request parsing ---------------------------------------------------------

def _int(v, what: str, minimum: int | None = None) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ServiceError(400, f"{what} must be an integer")
    if minimum is not None and v < minimum:
        raise ServiceError(400, f"{what} must be >= {minimum}")
    return v


def _check_keys(obj: dict, allowed: set[str], what: str) -> None:
    extra = sorted(set(obj) - allowed)
    if extra:
        raise ServiceError(400, f"{what}: unexpected fields {extra} (only raw ids and context enums are accepted)")


def parse_context(raw: Any, catalog: Catalog, user_id: str | None) -> UserContext | None:
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ServiceError(400, "context must be an object")
    _check_keys(raw, set(CONTEXT_FEATURES), "context")
    vals = {}
    for f in CONTEXT_FEATURES:
        v = raw.get(f)
        if v is not None:
            v = _int(v, f"context.{f}", 0)
            size = catalog.vocab_sizes.get(f)
            if size is not None and v >= size:
                raise ServiceError(400, f"context.{f}={v} outside vocabulary of size {size}")
        vals[f] = v
    return UserContext(user_id, **vals)


def parse_interactions(raw: Any, catalog: Catalog) -> tuple[list[Interaction], list[str]]:
    """Validated interactions in chronological order, plus warnings for unknown ids."""
    if raw is None:
        return [], []
    if not isinstance(raw, list):
        raise ServiceError(400, "interactions must be a list")
    out, warnings = [], []
    for n, rec in enumerate(raw):
        if not isinstance(rec, dict):
            raise ServiceError(400, f"interactions[{n}] must be an object")
        _check_keys(rec, INTERACTION_KEYS, f"interactions[{n}]")
        missing = sorted(INTERACTION_KEYS - set(rec))
        if missing:
            raise ServiceError(400, f"interactions[{n}]: missing {missing}")
        etype, itype, eid = rec["entity_type"], rec["interaction_type"], rec["entity_id"]
        if etype not in ENTITY_TYPES:
            raise ServiceError(400, f"interactions[{n}]: unknown entity_type {etype!r}")
        if itype not in INTERACTION_TYPES:
            raise ServiceError(400, f"interactions[{n}]: unknown interaction_type {itype!r}")
        if not isinstance(eid, str):
            raise ServiceError(400, f"interactions[{n}]: entity_id must be a string")
        ts = _int(rec["timestamp"], f"interactions[{n}].timestamp", 1)
        if not catalog.contains(etype, eid):
            warnings.append(f"skipped unknown {etype} id {eid!r}")
            continue
        out.append(Interaction("", ts, etype, eid, itype))
    out.sort(key=lambda i: i.timestamp)
    return out, warnings


def _reference_ts(body: dict, interactions: list[Interaction], now: float) -> int:
    if body.get("reference_ts") is not None:
        ref = _int(body["reference_ts"], "reference_ts", 1)
    else:
        ref = int(now)
    if interactions and interactions[-1].timestamp > ref:
        if body.get("reference_ts") is not None:
            raise ServiceError(400, "reference_ts precedes an interaction timestamp")
        ref = interactions[-1].timestamp
    return ref


def _seed(body: dict) -> int | None:
    return None if body.get("seed") is None else _int(body["seed"], "seed", 0)


class RecommenderService:
    """Transport-independent core; the HTTP handler is a thin wrapper."""

    def __init__(self, use_cases: dict[str, UseCaseConfig] | None = None, min_items: int = 2, clock=time.time):
        self._artifacts: ServingArtifacts | None = None
        self._reload_lock = threading.Lock()
        self._counter = 0
        self._default_use_cases = use_cases
        self._min_items = min_items
        self._clock = clock
        self.started = clock()
        self.last_error: str | None = None

    @property
    def artifacts(self) -> ServingArtifacts | None:
        return self._artifacts

    def reload_artifacts(self, path: str | Path) -> str:
        """Validate a bundle and publish it; on failure the current bundle stays."""
        with self._reload_lock:
            self._counter += 1
            mpath = Path(path) / MANIFEST
            digest = hashlib.sha256(mpath.read_bytes()).hexdigest()[:12] if mpath.exists() else "none"
            version = f"v{self._counter}-{digest}"
            try:
                arts = load_bundle(path, version, self._default_use_cases, self._min_items)
            except BundleError as exc:
                self.last_error = str(exc)
                log.error("reload rejected: %s", exc)
                raise
            self._artifacts = arts  # single reference assignment publishes the bundle
            self.last_error = None
            log.info("serving %s from %s", version, path)
            return version

    def health(self) -> dict:
        arts = self._artifacts
        out = {"uptime_s": round(self._clock() - self.started, 3)}
        if arts is None:
            out["status"] = "not_ready"
        else:
            out.update(status="ok", version=arts.version, checksums=arts.checksums, path=arts.path,
                       use_cases=sorted(arts.use_cases))
        if self.last_error:
            out["last_reload_error"] = self.last_error
        return out

    def _current(self) -> ServingArtifacts:
        arts = self._artifacts
        if arts is None:
            raise ServiceError(503, "artifacts not loaded")
        return arts

    def handle_recommend(self, body: Any) -> dict:
        arts = self._current()
        if not isinstance(body, dict):
            raise ServiceError(400, "body must be a JSON object")
        _check_keys(body, RECOMMEND_KEYS, "request")
        name = body.get("use_case", "default")
        if not isinstance(name, str):
            raise ServiceError(400, "use_case must be a string")
        if name not in arts.use_cases:
            raise ServiceError(404, f"unknown use_case {name!r}")
        uc = arts.use_cases[name]
        if body.get("k") is not None:
            uc = uc.with_k(_int(body["k"], "k", 1))
        user_id = body.get("user_id")
        if user_id is not None and not isinstance(user_id, str):
            raise ServiceError(400, "user_id must be a string")
        context = parse_context(body.get("context"), arts.catalog, user_id)
        interactions, warnings = parse_interactions(body.get("interactions"), arts.catalog)
        ref = _reference_ts(body, interactions, self._clock())
        model = arts.fallback if uc.model == "fallback" else arts.ranking
        scores = model.score_history(context, interactions, ref)
        result = rerank(scores, PipelineRequest(context, interactions, ref), uc, arts.catalog,
                        arts.vectors[uc.model], _seed(body))
        return {
            "version": arts.version,
            "use_case": name,
            "items": [{"entity_id": c.entity_id, "score": c.score} for c in result.candidates],
            "filtered_all": result.filtered_all,
            "warnings": warnings,
        }

    def handle_generate(self, body: Any) -> dict:
        arts = self._current()
        if not isinstance(body, dict):
            raise ServiceError(400, "body must be a JSON object")
        _check_keys(body, GENERATE_KEYS, "request")
        if arts.seq2seq is None:
            raise ServiceError(503, "this bundle has no outfit generator")
        strategy = body.get("strategy", "greedy")
        if strategy not in ("greedy", "sample"):
            raise ServiceError(400, "strategy must be 'greedy' or 'sample'")
        temperature = body.get("temperature", 1.0)
        if isinstance(temperature, bool) or not isinstance(temperature, (int, float)) or temperature <= 0:
            raise ServiceError(400, "temperature must be a positive number")
        max_items = _int(body.get("max_items", arts.seq2seq.config.max_items), "max_items", 1)
        min_items = _int(body.get("min_items", arts.min_items), "min_items", 0)
        if min_items > max_items:
            raise ServiceError(400, "min_items exceeds max_items")
        user_id = body.get("user_id")
        context = parse_context(body.get("context"), arts.catalog, user_id if isinstance(user_id, str) else None)
        interactions, warnings = parse_interactions(body.get("interactions"), arts.catalog)
        ref = _reference_ts(body, interactions, self._clock())
        seed = _seed(body) or 0
        out = arts.seq2seq.generate(context, interactions, ref, strategy=strategy, temperature=float(temperature),
                                    max_items=max_items, min_items=min_items, seed=seed)
        return {"version": arts.version, "items": out.item_ids, "probabilities": out.probabilities,
                "warnings": warnings}


# -- HTTP ---------------------------------------------------------------------

def _encode(payload: dict) -> bytes:
    return (json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n").encode()


class _Handler(BaseHTTPRequestHandler):
    service: RecommenderService
    default_path: str | None = None
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # route through logging instead of stderr
        log.debug("%s %s", self.address_string(), fmt % args)

    def _send(self, status: int, payload: dict) -> None:
        data = _encode(payload)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _body(self) -> Any:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        if not raw:
            return {}
        try:
            return json.loads(raw)
        except ValueError:
            raise ServiceError(400, "body is not valid JSON") from None

    def do_GET(self):
        if self.path == "/health":
            h = self.service.health()
            self._send(200 if h["status"] == "ok" else 503, h)
        else:
            self._send(404, {"error": f"no route {self.path}"})

    def do_POST(self):
        try:
            body = self._body()
            if self.path == "/v1/recommend":
                self._send(200, self.service.handle_recommend(body))
            elif self.path == "/v1/outfit":
                self._send(200, self.service.handle_generate(body))
            elif self.path == "/admin/reload":
                path = body.get("path", self.default_path) if isinstance(body, dict) else None
                if not isinstance(path, str):
                    raise ServiceError(400, "reload needs a bundle path")
                try:
                    version = self.service.reload_artifacts(path)
                except BundleError as exc:
                    arts = self.service.artifacts
                    self._send(422, {"error": str(exc), "version": arts.version if arts else None})
                    return
                self._send(200, {"version": version})
            else:
                self._send(404, {"error": f"no route {self.path}"})
        except ServiceError as exc:
            self._send(exc.status, {"error": exc.message})
        except Exception as exc:  # keep serving; report as server error
            log.exception("request failed")
            self._send(500, {"error": f"internal error: {exc}"})


def make_server(service: RecommenderService, host: str = "127.0.0.1", port: int = 0,
                default_path: str | None = None) -> ThreadingHTTPServer:
    handler = type("Handler", (_Handler,), {"service": service, "default_path": default_path})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


def serve_in_thread(service: RecommenderService, host: str = "127.0.0.1", port: int = 0,
                    default_path: str | None = None) -> tuple[ThreadingHTTPServer, threading.Thread]:
    server = make_server(service, host, port, default_path)
    thread = threading.Thread(target=server.serve_forever, name="seqrec-http", daemon=True)
    thread.start()
    return server, thread
