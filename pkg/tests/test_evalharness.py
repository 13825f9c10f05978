import json
import math

import numpy as np
import pytest

from seqrec.datamodel import Interaction, UserContext, load_catalog_dir
from seqrec.evalharness.cli import cli_main
from seqrec.evalharness.evaluate import (
    EvalReport,
    HeldOut,
    Split,
    evaluate,
    leave_last_out,
    model_ranker,
    oracle_ranker,
    pipeline_ranker,
    popularity_baseline,
    random_baseline,
    segment_of,
    training_examples,
)
from seqrec.evalharness.synth import SynthConfig, generate_synthetic, write_synthetic
from seqrec.model import EncoderConfig, RankingModel, TrainConfig, train_ranking
from seqrec.pipeline import UseCaseConfig

SMALL = dict(n_users=400, n_items=200, n_outfits=40, n_creators=5)


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SynthConfig(**SMALL))


@pytest.fixture(scope="module")
def small_split(small):
    return leave_last_out(small.sequences, small.contexts)


def tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


# -- synthetic data --------------------------------------------------------------

def test_synth_files_are_byte_identical_per_seed(tmp_path):
    cfg = SynthConfig(**SMALL, seed=3)
    write_synthetic(generate_synthetic(cfg), tmp_path / "a", cfg)
    write_synthetic(generate_synthetic(cfg), tmp_path / "b", cfg)
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    other = SynthConfig(**SMALL, seed=4)
    write_synthetic(generate_synthetic(other), tmp_path / "c", other)
    assert tree(tmp_path / "c") != tree(tmp_path / "a")


def test_synth_structure(small):
    cat = small.catalog
    styles = small.styles
    item_style = dict(zip(cat.ids("item"), styles["item"]))
    for o, st in zip(cat.ids("outfit"), styles["outfit"]):
        assert {item_style[i] for i in cat.outfits[o].item_ids} == {st}
    for uid, seq in small.sequences.items():
        assert seq[-1].entity_type == "outfit"
        assert all(a.timestamp <= b.timestamp for a, b in zip(seq, seq[1:]))
        tier = small.segments[uid]
        if tier == "cold":
            assert len(seq) == 1
        elif tier == "partial":
            assert all(i.entity_type == "item" for i in seq[:-1])
    days = {uid: {i.timestamp // 86400 for i in seq} for uid, seq in small.sequences.items()}
    assert max(len(d) for d in days.values()) > 1


def test_synth_hot_limit_is_uniform():
    """Very high temperature and no popularity skew: item draws are uniform."""
    cfg = SynthConfig(n_users=1500, n_items=40, n_outfits=16, n_creators=4, temperature=1e9, popularity_skew=0.0,
                      partial_share=1.0, cold_start_share=0.0, seed=1)
    data = generate_synthetic(cfg)
    counts = np.zeros(cfg.n_items)
    for seq in data.sequences.values():
        for i in seq:
            if i.entity_type == "item":
                counts[data.catalog.index("item", i.entity_id)] += 1
    expected = counts.sum() / cfg.n_items
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # 39 degrees of freedom: the 99.9th percentile is about 72
    assert chi2 < 72, chi2


def test_synth_default_temperature_is_style_concentrated():
    cfg = SynthConfig(n_users=300, n_items=80, n_outfits=16, n_creators=4, n_styles=4, mixture_concentration=1e-3)
    data = generate_synthetic(cfg)
    outfit_style = dict(zip(data.catalog.ids("outfit"), data.styles["outfit"]))
    pure = []
    for seq in data.sequences.values():
        st = [outfit_style[i.entity_id] for i in seq if i.entity_type == "outfit"]
        pure.append(np.mean(np.array(st) == np.bincount(st).argmax()))
    assert np.mean(pure) > 0.8


def test_single_style_outfits_are_style_pure():
    data = generate_synthetic(SynthConfig(n_users=50, n_items=30, n_outfits=6, n_creators=2, n_styles=1))
    assert set(data.styles["outfit"]) == {0} and set(data.styles["item"]) == {0}
    for seq in data.sequences.values():
        assert {int(data.styles["outfit"][data.catalog.index("outfit", i.entity_id)])
                for i in seq if i.entity_type == "outfit"} == {0}


@pytest.mark.parametrize("bad", [dict(n_users=0), dict(n_outfits=4, n_styles=8), dict(n_creators=50),
                                 dict(n_items=10), dict(temperature=0.0), dict(cold_start_share=0.7,
                                                                               partial_share=0.5)])
def test_synth_rejects_inconsistent_counts(bad):
    with pytest.raises(ValueError):
        generate_synthetic(SynthConfig(**{**SMALL, **bad}))


# -- split and segments ----------------------------------------------------------

def test_leave_last_out_never_trains_on_target(small, small_split):
    for h in small_split.heldout:
        seq = small.sequences[h.user_id]
        assert h.target == seq[-1] or seq.index(h.target) == len(h.history)
        assert h.history == small_split.train[h.user_id]
        assert all(i.timestamp <= h.target.timestamp for i in h.history)
    assert small_split.excluded == 0


def test_users_without_target_are_excluded_and_counted():
    seqs = {"a": [Interaction("a", 1, "item", "i1", "click")],
            "b": [Interaction("b", 1, "item", "i1", "click"), Interaction("b", 2, "outfit", "o1", "click")]}
    split = leave_last_out(seqs, {})
    assert split.excluded == 1 and [h.user_id for h in split.heldout] == ["b"]


def test_segments(small, small_split):
    assert segment_of([], "outfit") == "cold-start"
    assert segment_of([Interaction("u", 1, "item", "i", "click")], "outfit") == "partial"
    assert segment_of([Interaction("u", 1, "outfit", "o", "click")], "outfit") == "existing"
    report = evaluate(popularity_baseline(small_split.train, small.catalog), small_split, small.catalog)
    planted = {"cold": "cold-start", "partial": "partial"}
    for h in small_split.heldout:
        tier = small.segments[h.user_id]
        if tier in planted:
            assert segment_of(h.history, "outfit") == planted[tier]
    assert sum(report.segment_sizes.values()) == report.n_users


def test_training_examples_use_train_reference(small, small_split):
    ex = training_examples(small_split, small.contexts, small.catalog, 50)
    assert ex and all(max(e.recency) <= 30 for e in ex)


# -- metrics and baselines -------------------------------------------------------

def test_oracle_recall_is_one(small, small_split):
    report = evaluate(oracle_ranker(small.catalog), small_split, small.catalog)
    for k in report.ks:
        assert report.recall(k) == 1.0 and report.overall[f"ndcg@{k}"] == 1.0


def test_random_recall_matches_expectation():
    data = generate_synthetic(SynthConfig(n_users=2000, n_items=100, n_outfits=50, n_creators=5, seed=2))
    split = leave_last_out(data.sequences, data.contexts)
    vals = [evaluate(random_baseline(data.catalog, seed=s), split, data.catalog, ks=(10,)).recall(10)
            for s in range(10)]
    p = 10 / 50
    sigma = math.sqrt(p * (1 - p) / (len(split.heldout) * len(vals)))
    assert abs(np.mean(vals) - p) < 4 * sigma


def test_ndcg_bounds_and_coverage_range(small, small_split):
    for ranker in (random_baseline(small.catalog, seed=5), popularity_baseline(small_split.train, small.catalog)):
        rep = evaluate(ranker, small_split, small.catalog)
        for metrics in [rep.overall, *rep.segments.values()]:
            for k in rep.ks:
                r, n, c = metrics[f"recall@{k}"], metrics[f"ndcg@{k}"], metrics[f"coverage@{k}"]
                assert r / math.log2(k + 1) - 1e-12 <= n <= r + 1e-12
                assert 0 <= r <= 1 and 0 <= c <= 1


def test_popularity_orders_by_count_then_id(small, small_split):
    pop = popularity_baseline(small_split.train, small.catalog)
    ids = small.catalog.ids("outfit")
    ranked = pop([None], len(ids))[0]
    keys = [(-pop.counts[n], ids[n]) for n in ranked]
    assert keys == sorted(keys)
    seqs = {"u": [Interaction("u", 1, "item", "i0000", "click")]}
    flat = popularity_baseline(seqs, small.catalog)([None], 3)[0]
    assert [ids[n] for n in flat] == sorted(ids)[:3]


def test_popularity_recall_matches_recount(small, small_split):
    counts = {}
    for seq in small_split.train.values():
        for i in seq:
            if i.entity_type == "outfit":
                counts[i.entity_id] = counts.get(i.entity_id, 0) + 1
    top = sorted(small.catalog.ids("outfit"), key=lambda o: (-counts.get(o, 0), o))
    rep = evaluate(popularity_baseline(small_split.train, small.catalog), small_split, small.catalog)
    for k in rep.ks:
        hits = sum(h.target.entity_id in top[:k] for h in small_split.heldout)
        assert rep.recall(k) == hits / len(small_split.heldout)


def test_report_json_round_trip(small, small_split):
    rep = evaluate(popularity_baseline(small_split.train, small.catalog), small_split, small.catalog)
    body = json.loads(rep.to_json())
    assert body["ks"] == [5, 10, 20]
    assert set(body["segments"]) == {"cold-start", "partial", "existing"}
    assert set(body["overall"]) == {f"{m}@{k}" for m in ("recall", "ndcg", "coverage") for k in (5, 10, 20)}
    assert isinstance(rep, EvalReport) and rep.recall(10) == body["overall"]["recall@10"]


def test_empty_heldout_reports_zero(small):
    rep = evaluate(oracle_ranker(small.catalog), Split({}, []), small.catalog)
    assert rep.n_users == 0 and rep.recall(10) == 0.0


@pytest.fixture(scope="module")
def small_model(small, small_split):
    ex = training_examples(small_split, small.contexts, small.catalog, 20)
    enc = EncoderConfig(layers=1, heads=2, d_model=16, d_ff=32, max_len=20, dropout=0.0)
    model, _ = train_ranking(ex, small.catalog, enc, TrainConfig(epochs=4, lr=3e-3))
    return model


def test_pipeline_with_everything_off_equals_model_ranker(small, small_split, small_model):
    a = evaluate(model_ranker(small_model), small_split, small.catalog)
    b = evaluate(pipeline_ranker(small_model, UseCaseConfig()), small_split, small.catalog)
    assert a.overall == b.overall


def test_diversified_coverage_at_least_undiversified(small, small_split, small_model):
    plain = evaluate(pipeline_ranker(small_model, UseCaseConfig()), small_split, small.catalog)
    mmr = evaluate(pipeline_ranker(small_model, UseCaseConfig(diversify="mmr", alpha=0.5)), small_split,
                   small.catalog)
    for k in plain.ks:
        assert mmr.overall[f"coverage@{k}"] >= plain.overall[f"coverage@{k}"]


def test_heldout_reference_is_target_time():
    t = Interaction("u", 99, "outfit", "o", "click")
    assert HeldOut("u", UserContext("u"), [], t).reference_ts == 99


# -- command line ----------------------------------------------------------------

def run(capsys, *argv):
    code = cli_main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def small_config(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text(
        "[synth]\nn_users = 150\nn_items = 80\nn_outfits = 16\nn_creators = 4\n"
        "[model]\nlayers = 1\nheads = 2\nd_model = 16\nd_ff = 32\nmax_len = 12\n"
        "[seq2seq]\nenc_layers = 1\ndec_layers = 1\nheads = 2\nd_model = 16\nd_ff = 32\nmax_len = 12\n"
        "[train]\nepochs = 1\n[seq2seq_train]\nepochs = 1\n"
        "[service.use_cases.default]\nk = 5\n[service.use_cases.diverse]\nk = 5\ndiversify = \"mmr\"\n")
    return path


def test_cli_synth_twice_identical(tmp_path, capsys):
    cfg = small_config(tmp_path)
    for name in ("a", "b"):
        assert run(capsys, "--config", cfg, "synth", "--seed", 7, "--out", tmp_path / name)[0] == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


def test_cli_eval_oracle(tmp_path, capsys):
    cfg = small_config(tmp_path)
    run(capsys, "--config", cfg, "synth", "--out", tmp_path / "d")
    code, out, _ = run(capsys, "--config", cfg, "eval", "--data", tmp_path / "d", "--model", "oracle")
    assert code == 0
    report = json.loads(out)
    assert all(report["overall"][f"recall@{k}"] == 1.0 for k in (5, 10, 20))


def test_cli_train_zero_epochs_is_initialization(tmp_path, capsys):
    cfg = small_config(tmp_path)
    run(capsys, "--config", cfg, "synth", "--out", tmp_path / "d")
    code, _, _ = run(capsys, "--config", cfg, "train", "--data", tmp_path / "d", "--out", tmp_path / "b",
                     "--epochs", 0, "--seed", 4)
    assert code == 0
    cat = load_catalog_dir(tmp_path / "b")
    loaded = RankingModel.load(tmp_path / "b" / "ranking.npz", cat)
    fresh = RankingModel(cat, loaded.encoder, loaded.embedding, seed=4)
    assert set(loaded.params) == set(fresh.params)
    for name in fresh.params:
        np.testing.assert_array_equal(loaded.params[name].data, fresh.params[name].data)


def test_cli_full_flow(tmp_path, capsys):
    cfg = small_config(tmp_path)
    d, b = tmp_path / "d", tmp_path / "b"
    assert run(capsys, "--config", cfg, "synth", "--out", d)[0] == 0
    assert run(capsys, "--config", cfg, "train", "--data", d, "--out", b, "--variant", "both")[0] == 0
    assert run(capsys, "--config", cfg, "train-seq2seq", "--data", d, "--out", b, "--limit", 30)[0] == 0
    for extra in ([], ["--model", "fallback"], ["--use-case", "diverse"], ["--model", "popularity"]):
        code, out, _ = run(capsys, "--config", cfg, "eval", "--data", d, "--bundle", b, *extra)
        assert code == 0 and 0 <= json.loads(out)["overall"]["recall@10"] <= 1
    code, out, _ = run(capsys, "--config", cfg, "generate", "--bundle", b, "--request", '{"interactions": []}',
                       "--max-items", 3)
    gen = json.loads(out)
    assert code == 0 and 2 <= len(gen["items"]) <= 3
    code, out, _ = run(capsys, "--config", cfg, "load-probe", "--bundle", b, "--data", d, "--requests", 40,
                       "--concurrency", 4)
    probe = json.loads(out)
    assert code == 0 and probe["errors"] == 0 and probe["p50_ms"] <= probe["p99_ms"]


def test_cli_usage_errors_exit_2(capsys):
    for argv in ([], ["bogus"], ["eval", "--nope"], ["train"]):
        with pytest.raises(SystemExit) as err:
            cli_main(argv)
        assert err.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_cli_runtime_errors_exit_nonzero(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--data", tmp_path / "missing", "--model", "oracle")
    assert code != 0 and "error" in err
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nwidth = 3\n")
    code, _, err = run(capsys, "--config", bad, "synth", "--out", tmp_path / "x")
    assert code != 0 and "width" in err
    code, _, err = run(capsys, "eval", "--data", tmp_path, "--model", "ranking")
    assert code != 0
