import json
import shutil

import numpy as np
import pytest

from seqrec.datamodel import Interaction, UserContext, load_catalog_dir
from seqrec.embedding import encode_histories
from seqrec.model import RankingModel
from seqrec.pipeline import UseCaseConfig
from seqrec.service import (
    BundleError,
    RecommenderService,
    ServiceError,
    build_bundle,
    serve_in_thread,
    write_manifest,
)
from service_kit import get, make_bundle, post, relabel, stress, wire
from toys import random_catalog, random_context, random_sequence, toy_ranking

CTX = {"market": 1, "device": 0, "gender_intent": 1}
REF = 1_800_000_000


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    return make_bundle(tmp_path_factory.mktemp("bundle") / "b", seed=3, n_outfits=12)


@pytest.fixture
def svc(bundle):
    s = RecommenderService()
    s.reload_artifacts(bundle)
    return s


@pytest.fixture(scope="module")
def http(bundle):
    s = RecommenderService()
    s.reload_artifacts(bundle)
    server, _ = serve_in_thread(s)
    yield "http://%s:%d" % server.server_address[:2], s
    server.shutdown()
    server.server_close()


def items_of(svc, n=3):
    return [{"entity_type": "item", "entity_id": i, "interaction_type": "click", "timestamp": REF - 3600 * (n - j)}
            for j, i in enumerate(svc.artifacts.catalog.ids("item")[:n])]


def test_health_before_load_is_not_ready():
    s = RecommenderService()
    assert s.health()["status"] == "not_ready"
    with pytest.raises(ServiceError) as err:
        s.handle_recommend({})
    assert err.value.status == 503


def test_health_reports_version_and_checksums(svc, bundle):
    h = svc.health()
    assert h["status"] == "ok"
    assert h["version"].startswith("v1-")
    assert set(h["checksums"]) >= {"items.jsonl", "ranking.npz", "vocab.json"}
    assert h["uptime_s"] >= 0


def test_cold_start_context_only(svc):
    r = svc.handle_recommend({"context": CTX, "interactions": [], "reference_ts": REF})
    ids = [it["entity_id"] for it in r["items"]]
    assert len(ids) == 5 and len(set(ids)) == 5
    assert all(svc.artifacts.catalog.contains("outfit", i) for i in ids)
    assert r["warnings"] == [] and not r["filtered_all"]


def test_partial_cold_start_uses_item_history(svc):
    cold = svc.handle_recommend({"context": CTX, "reference_ts": REF})
    part = svc.handle_recommend({"context": CTX, "interactions": items_of(svc), "reference_ts": REF})
    assert len(part["items"]) == 5
    assert [it["score"] for it in part["items"]] != [it["score"] for it in cold["items"]]


def test_no_context_at_all(svc):
    assert len(svc.handle_recommend({})["items"]) == 5


def test_unknown_ids_are_skipped_with_warning(svc):
    hist = items_of(svc, 2) + [{"entity_type": "item", "entity_id": "nope", "interaction_type": "click",
                                "timestamp": REF - 10}]
    with_unknown = svc.handle_recommend({"context": CTX, "interactions": hist, "reference_ts": REF})
    clean = svc.handle_recommend({"context": CTX, "interactions": hist[:2], "reference_ts": REF})
    assert len(with_unknown["warnings"]) == 1 and "nope" in with_unknown["warnings"][0]
    assert with_unknown["items"] == clean["items"]


def test_service_features_match_offline_features(svc):
    """Scores from the wire path equal the offline batch path bit for bit."""
    rng = np.random.default_rng(0)
    arts = svc.artifacts
    for trial in range(20):
        seq = random_sequence(rng, arts.catalog, int(rng.integers(0, 7)), start=REF - 20 * 86400)
        ctx = random_context(rng)
        body = {"context": {"market": ctx.market, "device": ctx.device, "gender_intent": ctx.gender_intent},
                "interactions": wire(seq), "reference_ts": REF, "k": 12}
        got = {it["entity_id"]: it["score"] for it in svc.handle_recommend(body)["items"]}
        batch = encode_histories(arts.catalog, [UserContext(None, ctx.market, ctx.device, ctx.gender_intent)],
                                 [[Interaction("", i.timestamp, i.entity_type, i.entity_id, i.interaction_type)
                                   for i in seq]], [REF], arts.ranking.encoder.max_len)
        offline = arts.ranking.score_batch(batch)[0]
        ids = arts.catalog.ids("outfit")
        assert got == {ids[n]: float(offline[n]) for n in range(len(ids))}


def test_fallback_use_case_routes_to_fallback_model(svc):
    arts = svc.artifacts
    r = svc.handle_recommend({"use_case": "fallback", "context": CTX, "reference_ts": REF})
    probs = arts.fallback.score_history(UserContext(None, **CTX), [], REF)
    ids = arts.catalog.ids("outfit")
    expect = sorted(range(len(ids)), key=lambda n: (-probs[n], ids[n]))[:5]
    assert [it["entity_id"] for it in r["items"]] == [ids[n] for n in expect]


def test_k_override_and_explore_seed_determinism(svc):
    body = {"use_case": "explore", "k": 3, "context": CTX, "reference_ts": REF, "seed": 11}
    a, b = svc.handle_recommend(body), svc.handle_recommend(body)
    assert len(a["items"]) == 3 and a == b


@pytest.mark.parametrize("body, status", [
    ([1, 2], 400),
    ({"use_case": "nope"}, 404),
    ({"k": 0}, 400),
    ({"k": "3"}, 400),
    ({"surprise": 1}, 400),
    ({"context": {"market": 99}}, 400),
    ({"context": {"colour": 1}}, 400),
    ({"interactions": "i1"}, 400),
    ({"interactions": [{"entity_type": "item", "entity_id": "x", "interaction_type": "click"}]}, 400),
    ({"interactions": [{"entity_type": "item", "entity_id": "x", "interaction_type": "click", "timestamp": 5,
                        "category": 2}]}, 400),
    ({"interactions": [{"entity_type": "hat", "entity_id": "x", "interaction_type": "click", "timestamp": 5}]}, 400),
    ({"interactions": [{"entity_type": "item", "entity_id": "x", "interaction_type": "like", "timestamp": 5}]}, 400),
])
def test_bad_requests(svc, body, status):
    with pytest.raises(ServiceError) as err:
        svc.handle_recommend(body)
    assert err.value.status == status


def test_http_identical_bytes_and_errors(http):
    base, s = http
    body = {"use_case": "diverse", "context": CTX, "interactions": items_of(s), "reference_ts": REF}
    a, b = post(base, "/v1/recommend", body), post(base, "/v1/recommend", body)
    assert a == b and a[0] == 200
    assert post(base, "/v1/recommend", b"{not json")[0] == 400
    assert post(base, "/v1/recommend", {"use_case": "missing"})[0] == 404
    assert post(base, "/v1/nowhere", {})[0] == 404
    status, h = get(base, "/health")
    assert status == 200 and h["status"] == "ok"


def test_outfit_generation(svc):
    body = {"context": CTX, "interactions": items_of(svc), "reference_ts": REF, "min_items": 2, "max_items": 4}
    a = svc.handle_generate(body)
    assert a == svc.handle_generate(body)
    assert 2 <= len(a["items"]) <= 4 and len(set(a["items"])) == len(a["items"])
    assert len(a["probabilities"]) == len(a["items"])
    assert all(svc.artifacts.catalog.contains("item", i) for i in a["items"])
    sampled = [tuple(svc.handle_generate({**body, "strategy": "sample", "seed": n})["items"]) for n in range(20)]
    assert all(2 <= len(o) <= 4 and len(set(o)) == len(o) for o in sampled)
    with pytest.raises(ServiceError):
        svc.handle_generate({**body, "strategy": "beam"})
    with pytest.raises(ServiceError):
        svc.handle_generate({**body, "min_items": 5})


def test_outfit_endpoint_needs_generator(tmp_path):
    s = RecommenderService()
    s.reload_artifacts(make_bundle(tmp_path / "b", seq2seq=False))
    with pytest.raises(ServiceError) as err:
        s.handle_generate({})
    assert err.value.status == 503


def test_identical_reloads_get_distinct_tags(svc, bundle):
    v1 = svc.artifacts.version
    v2 = svc.reload_artifacts(bundle)
    assert v2 != v1 and v1.split("-")[1] == v2.split("-")[1]
    assert svc.health()["version"] == v2


def test_corrupt_checkpoint_is_rejected_and_old_version_serves(svc, bundle, tmp_path):
    before = svc.handle_recommend({"context": CTX, "reference_ts": REF})
    bad = tmp_path / "bad"
    shutil.copytree(bundle, bad)
    (bad / "ranking.npz").write_bytes(b"garbage")
    with pytest.raises(BundleError, match="checksum"):
        svc.reload_artifacts(bad)
    write_manifest(bad)  # checksums now agree but the file is still not a checkpoint
    with pytest.raises(BundleError):
        svc.reload_artifacts(bad)
    assert svc.handle_recommend({"context": CTX, "reference_ts": REF}) == before
    h = svc.health()
    assert h["status"] == "ok" and "last_reload_error" in h


def test_missing_manifest_and_missing_file(svc, bundle, tmp_path):
    d = tmp_path / "nomf"
    shutil.copytree(bundle, d)
    (d / "manifest.json").unlink()
    with pytest.raises(BundleError, match="manifest"):
        svc.reload_artifacts(d)
    write_manifest(d)
    (d / "outfits.jsonl").unlink()
    with pytest.raises(BundleError):
        svc.reload_artifacts(d)


def test_checkpoint_from_other_catalog_rejected(svc, tmp_path):
    rng = np.random.default_rng(1)
    cat = random_catalog(rng, n_items=20, n_outfits=12)
    other = relabel(cat, "x_")
    d = build_bundle(tmp_path / "mixed", cat, toy_ranking(cat))
    toy_ranking(other).save(d / "ranking.npz")
    write_manifest(d)
    with pytest.raises(BundleError, match="different catalog"):
        svc.reload_artifacts(d)


def test_use_case_validated_against_model(svc, tmp_path):
    cases = {"fresh": UseCaseConfig("fresh", freshness="age_feature_toggle")}
    with pytest.raises(BundleError, match="age"):
        svc.reload_artifacts(make_bundle(tmp_path / "age", use_cases=cases))
    cases = {"fb": UseCaseConfig("fb", model="fallback")}
    with pytest.raises(BundleError, match="fallback"):
        svc.reload_artifacts(make_bundle(tmp_path / "nofb", fallback=False, use_cases=cases))
    cases = {"items": UseCaseConfig("items", target_entity_type="item")}
    with pytest.raises(BundleError, match="targets item"):
        svc.reload_artifacts(make_bundle(tmp_path / "tgt", use_cases=cases))


def test_reload_over_http(tmp_path):
    a = make_bundle(tmp_path / "a", seed=0, prefix="a_")
    b = make_bundle(tmp_path / "b", seed=1, prefix="b_")
    s = RecommenderService()
    server, _ = serve_in_thread(s)
    base = "http://%s:%d" % server.server_address[:2]
    try:
        assert get(base, "/health")[0] == 503
        assert post(base, "/admin/reload", {"path": str(a)})[0] == 200
        first = post(base, "/v1/recommend", {"reference_ts": REF})[1]
        status, body = post(base, "/admin/reload", {"path": str(tmp_path / "none")})
        assert status == 422 and body["version"] == first["version"]
        assert post(base, "/admin/reload", {"path": str(b)})[0] == 200
        second = post(base, "/v1/recommend", {"reference_ts": REF})[1]
        assert second["version"] != first["version"]
        assert all(it["entity_id"].startswith("b_") for it in second["items"])
    finally:
        server.shutdown()
        server.server_close()


def test_concurrent_reload_stress(tmp_path):
    out = stress(tmp_path, n_requests=1000, n_reloads=3)
    assert out["reloads"] >= 3 and out["rejected"] == 1
    assert out["errors"] == 0 and out["mismatches"] == 0 and out["mixed"] == 0
    assert out["versions"] >= 4 and out["health"] == 200


def test_bundle_round_trip_loads_same_model(bundle):
    cat = load_catalog_dir(bundle)
    m = RankingModel.load(bundle / "ranking.npz", cat)
    assert json.loads((bundle / "use_cases.json").read_text())["default"]["k"] == 5
    assert m.catalog.fingerprint() == cat.fingerprint()
