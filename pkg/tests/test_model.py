import math

import numpy as np
import pytest

from conftest import build_tiny_catalog, make_interactions
from seqrec.datamodel import Catalog, Item, Outfit, UserContext, build_training_examples
from seqrec.model import (
    CheckpointError,
    EncoderConfig,
    FallbackModel,
    RankingModel,
    Seq2SeqConfig,
    Seq2SeqModel,
    TrainConfig,
    alternative_loss,
    build_seq2seq_examples,
    clm_loss,
    collate_examples,
    ranking_loss_from_scores,
    sample_negatives,
    score_catalog,
    train_fallback,
    train_ranking,
    train_seq2seq,
)
from seqrec.numerics import Tape, Tensor, grad_check, grad_check_params
from toys import (
    causality_violations,
    mask_violations,
    random_batch,
    random_catalog,
    random_sequence,
    seq2seq_examples,
    toy_fallback,
    toy_ranking,
    toy_seq2seq,
)


@pytest.fixture
def cat():
    return random_catalog(np.random.default_rng(11), n_items=20, n_outfits=10)


# -- encoder ---------------------------------------------------------------

def test_encoder_config_rejects_indivisible_heads():
    with pytest.raises(ValueError, match="divisible"):
        EncoderConfig(d_model=10, heads=3)


def test_causality():
    assert causality_violations(20, seed=1) == 0


def test_causality_check_detects_a_bidirectional_encoder():
    assert causality_violations(20, seed=1, causal=False) > 0


def test_single_row_input(cat):
    model = RankingModel(cat, EncoderConfig(dropout=0.0), dtype=np.float64)
    h = model.encode(Tape(record=False), model.encode_requests([UserContext("u", 0, 1, 0)], [[]], [0]))
    assert h.shape == (1, 1, 64)
    assert np.all(np.isfinite(h.data))


def test_oversize_input_rejected(cat):
    model = toy_ranking(cat)
    seq = random_sequence(np.random.default_rng(0), cat, 8)
    batch = model.encode_requests([None], [seq], [seq[-1].timestamp])
    batch.entity = np.concatenate([batch.entity, batch.entity[:, :1]], axis=1)
    batch.itype = np.concatenate([batch.itype, batch.itype[:, :1]], axis=1)
    batch.recency = np.concatenate([batch.recency, batch.recency[:, :1]], axis=1)
    with pytest.raises(ValueError, match="max_len"):
        model.encode(Tape(record=False), batch)


def test_forward_is_deterministic_with_dropout_seed(cat):
    model = toy_ranking(cat, dropout=0.3)
    batch, _, _ = random_batch(np.random.default_rng(2), model)
    a = model.encode(Tape(record=False, train=True, seed=5), batch).data
    b = model.encode(Tape(record=False, train=True, seed=5), batch).data
    c = model.encode(Tape(record=False, train=True, seed=6), batch).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


# -- CLM loss --------------------------------------------------------------

def test_clm_single_position_is_neg_log_prob():
    rng = np.random.default_rng(0)
    hidden = Tensor(rng.normal(size=(1, 3, 4)))
    table = Tensor(rng.normal(size=(5, 4)))
    mask = np.array([[False, True, False]])
    targets = np.array([[0, 3, 0]])
    loss = clm_loss(Tape(record=False), hidden, targets, mask, table).data
    p = score_catalog(hidden.data[0, 1], table.data)[3]
    assert loss == pytest.approx(-math.log(p), rel=1e-12)


def test_clm_all_false_mask_is_error(cat):
    model = toy_ranking(cat)
    batch, targets, mask = random_batch(np.random.default_rng(0), model)
    with pytest.raises(ValueError, match="mask"):
        model.loss(Tape(record=False), batch, targets, np.zeros_like(mask))


def test_unmasked_targets_do_not_matter():
    assert mask_violations(20, seed=3) == 0


def test_masked_target_change_changes_loss(cat):
    model = toy_ranking(cat)
    batch, targets, mask = random_batch(np.random.default_rng(4), model)
    base = model.loss(Tape(record=False), batch, targets, mask).data
    r, c = np.argwhere(mask)[0]
    changed = targets.copy()
    changed[r, c] = (changed[r, c] + 1) % model.n_targets
    assert model.loss(Tape(record=False), batch, changed, mask).data != base


def test_clm_gradient_check(cat):
    model = toy_ranking(cat)
    batch, targets, mask = random_batch(np.random.default_rng(5), model, batch_size=2)
    report = grad_check_params(lambda tape: model.loss(tape, batch, targets, mask), model.params,
                               tolerance=1e-4, max_coords=400, rng=np.random.default_rng(0))
    assert report.passed, report.max_rel_error


# -- scoring ---------------------------------------------------------------

def test_score_catalog_properties():
    rng = np.random.default_rng(1)
    h, table = rng.normal(size=8), rng.normal(size=(30, 8))
    p = score_catalog(h, table)
    assert p.sum() == pytest.approx(1.0, abs=1e-6)
    logits = table @ h
    np.testing.assert_array_equal(np.argsort(-p, kind="stable")[:10], np.argsort(-logits, kind="stable")[:10])
    cand = [3, 7, 11, 29]
    q = score_catalog(h, table, cand)
    assert q.sum() == pytest.approx(1.0, abs=1e-6)
    assert np.all(q[np.setdiff1d(np.arange(30), cand)] == 0)
    assert list(np.argsort(-q[cand])) == list(np.argsort(-p[cand]))
    with pytest.raises(ValueError, match="empty"):
        score_catalog(h, table, [])


def test_score_history_sums_to_one(cat):
    model = toy_ranking(cat)
    seq = random_sequence(np.random.default_rng(0), cat, 4)
    p = model.score_history(UserContext("u", 1, 1, 0), seq, seq[-1].timestamp)
    assert p.shape == (cat.count("outfit"),)
    assert p.sum() == pytest.approx(1.0, abs=1e-6)


# -- training --------------------------------------------------------------

def _examples(catalog, n_users=30, seed=0, max_len=8):
    rng = np.random.default_rng(seed)
    out = []
    for u in range(n_users):
        seq = random_sequence(rng, catalog, int(rng.integers(2, 12)), user=f"u{u}")
        out += build_training_examples(seq, UserContext(f"u{u}", 0, 1, 1), "outfit", max_len,
                                       seq[-1].timestamp, catalog)
    return out


def test_initial_loss_is_log_vocab():
    catalog = random_catalog(np.random.default_rng(0), n_items=120, n_outfits=60, n_creators=4)
    examples = _examples(catalog, max_len=50)
    _, result = train_ranking(examples, catalog, train=TrainConfig(epochs=0))
    assert result.initial_loss == pytest.approx(math.log(60), rel=0.10)


def test_memorises_repeated_example():
    catalog = build_tiny_catalog()
    seq = make_interactions([("item", "i0"), ("outfit", "o1"), ("item", "i3"), ("outfit", "o0"),
                             ("creator", "c0"), ("outfit", "o2")])
    ex = build_training_examples(seq, UserContext("u", 1, 0, 1), "outfit", 8, seq[-1].timestamp, catalog)
    assert len(ex) == 1
    enc = EncoderConfig(layers=1, heads=2, d_model=16, d_ff=32, dropout=0.0, max_len=8)
    _, result = train_ranking(ex * 50, catalog, enc, TrainConfig(epochs=200, batch_size=64, lr=3e-3))
    assert min(result.loss_curve) < 0.1
    assert result.loss_curve[-1] < 0.1


def test_training_is_reproducible(cat):
    examples = _examples(cat)
    enc = EncoderConfig(layers=1, heads=2, d_model=8, d_ff=12, max_len=8)
    cfg = TrainConfig(epochs=3, batch_size=16, seed=4)
    m1, r1 = train_ranking(examples, cat, enc, cfg)
    m2, r2 = train_ranking(examples, cat, enc, cfg)
    assert r1.loss_curve == r2.loss_curve
    for k in m1.params:
        np.testing.assert_array_equal(m1.params[k].data, m2.params[k].data)
    _, r3 = train_ranking(examples, cat, enc, TrainConfig(epochs=3, batch_size=16, seed=5))
    assert r3.loss_curve != r1.loss_curve


def test_training_rejects_empty_dataset(cat):
    with pytest.raises(ValueError, match="empty"):
        train_ranking([], cat)


def test_checkpoint_round_trip(cat, tmp_path):
    examples = _examples(cat)
    enc = EncoderConfig(layers=1, heads=2, d_model=8, d_ff=12, max_len=8)
    model, _ = train_ranking(examples, cat, enc, TrainConfig(epochs=1, batch_size=16),
                             checkpoint_path=tmp_path / "r.npz")
    loaded = RankingModel.load(tmp_path / "r.npz", cat)
    for k, t in model.params.items():
        np.testing.assert_array_equal(loaded.params[k].data, t.data)
    batch, _, _ = random_batch(np.random.default_rng(0), model)
    np.testing.assert_array_equal(model.score_batch(batch), loaded.score_batch(batch))


def test_checkpoint_rejects_other_catalog_and_corruption(cat, tmp_path):
    toy_ranking(cat).save(tmp_path / "r.npz")
    with pytest.raises(CheckpointError, match="different catalog"):
        RankingModel.load(tmp_path / "r.npz", build_tiny_catalog())
    with pytest.raises(CheckpointError, match="expected a seq2seq"):
        Seq2SeqModel.load(tmp_path / "r.npz", cat)
    raw = (tmp_path / "r.npz").read_bytes()
    (tmp_path / "bad.npz").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        RankingModel.load(tmp_path / "bad.npz", cat)


# -- alternative losses ----------------------------------------------------

def _scores(pos, neg):
    return Tensor(np.asarray(pos, dtype=float)), Tensor(np.asarray(neg, dtype=float))


def test_bpr_values():
    t = Tape(record=False)
    assert ranking_loss_from_scores(t, "bpr", *_scores([0.3], [[0.3]])).data == pytest.approx(math.log(2))
    assert ranking_loss_from_scores(t, "bpr", *_scores([60.0], [[0.5, -1.0]])).data < 1e-20


def test_top1_and_bce_values():
    sp, sn = 0.5, [-0.2, 1.0]
    sig = lambda x: 1 / (1 + math.exp(-x))  # noqa: E731
    t = Tape(record=False)
    top1 = np.mean([sig(s - sp) + sig(s * s) for s in sn])
    bce = -math.log(sig(sp)) - sum(math.log(1 - sig(s)) for s in sn)
    assert ranking_loss_from_scores(t, "top1", *_scores([sp], [sn])).data == pytest.approx(top1, rel=1e-12)
    assert ranking_loss_from_scores(t, "bce", *_scores([sp], [sn])).data == pytest.approx(bce, rel=1e-12)


@pytest.mark.parametrize("kind", ["bpr", "top1", "bce"])
def test_alternative_loss_gradients(kind):
    rng = np.random.default_rng(7)
    pos = np.array([0, 4, 2])
    neg = sample_negatives(rng, pos, 6, 3)
    for _ in range(10):
        h, table = rng.normal(size=(3, 5)), rng.normal(size=(6, 5))
        report = grad_check(lambda tape, a, b: alternative_loss(tape, kind, a, b, pos, neg), [h, table])
        assert report.max_rel_error < 1e-5


def test_alternative_loss_rejects_empty_negatives():
    t = Tape(record=False)
    with pytest.raises(ValueError, match="negative"):
        alternative_loss(t, "bpr", Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))), np.array([0, 1]),
                         np.zeros((2, 0), dtype=int))
    with pytest.raises(ValueError, match="unknown"):
        ranking_loss_from_scores(t, "hinge", *_scores([0.0], [[0.0]]))


def test_negatives_exclude_the_positive():
    rng = np.random.default_rng(0)
    pos = rng.integers(0, 5, size=2000)
    neg = sample_negatives(rng, pos, 5, 4)
    assert not np.any(neg == pos[:, None])
    assert set(np.unique(neg)) == set(range(5))


# -- fallback --------------------------------------------------------------

def test_fallback_dot_and_softmax_rank_alike(cat):
    model = toy_fallback(cat)
    batch, _, _ = random_batch(np.random.default_rng(0), model)
    dots = model.logits(batch)
    probs = model.score_batch(batch)
    assert dots.shape == (3, cat.count("outfit"))
    for r in range(3):
        np.testing.assert_array_equal(np.argsort(-dots[r], kind="stable")[:5],
                                      np.argsort(-probs[r], kind="stable")[:5])


@pytest.mark.parametrize("kind", ["bpr", "top1", "bce"])
def test_fallback_loss_gradient(cat, kind):
    model = toy_fallback(cat, loss_kind=kind, negatives=4)
    batch, targets, mask = random_batch(np.random.default_rng(1), model, batch_size=2)
    report = grad_check_params(
        lambda tape: model.sampled_loss(tape, batch, targets, mask, np.random.default_rng(9)),
        model.params, tolerance=1e-4, max_coords=300, rng=np.random.default_rng(0))
    assert report.passed, report.max_rel_error


def test_fallback_train_and_reload(cat, tmp_path):
    examples = _examples(cat)
    enc = EncoderConfig(layers=1, heads=2, d_model=8, d_ff=12, max_len=8)
    model, result = train_fallback(examples, cat, enc, TrainConfig(epochs=2, batch_size=16), loss_kind="bce",
                                   negatives=3, checkpoint_path=tmp_path / "f.npz")
    assert len(result.loss_curve) == 2
    loaded = FallbackModel.load(tmp_path / "f.npz", cat)
    assert (loaded.loss_kind, loaded.negatives) == ("bce", 3)
    batch, _, _ = random_batch(np.random.default_rng(0), model)
    np.testing.assert_array_equal(model.logits(batch), loaded.logits(batch))


# -- seq2seq ---------------------------------------------------------------

def test_single_item_outfit_has_two_decoder_steps(tiny_catalog):
    model = toy_seq2seq(tiny_catalog)
    seq = make_interactions([("item", "i0"), ("outfit", "o2")])
    ex = build_seq2seq_examples(seq, None, tiny_catalog, 8, seq[-1].timestamp)
    assert [e.item_ids for e in ex] == [("i5",)]
    _, tokens, targets, mask = model.collate(ex)
    assert mask.sum() == 2
    assert list(targets[0, :2]) == [tiny_catalog.index("item", "i5"), model.eos]
    assert tokens[0, 0] == model.bos


def test_seq2seq_initial_loss_is_log_vocab():
    catalog = random_catalog(np.random.default_rng(0), n_items=80, n_outfits=30)
    model = Seq2SeqModel(catalog, dtype=np.float64)
    loss = model.loss(Tape(record=False), *model.collate(seq2seq_examples(catalog)[:64])).data
    assert loss == pytest.approx(math.log(81), rel=0.10)


def test_seq2seq_gradient_check(cat):
    model = toy_seq2seq(cat)
    batch = model.collate(seq2seq_examples(cat)[:3])
    report = grad_check_params(lambda tape: model.loss(tape, *batch), model.params, tolerance=1e-4,
                               max_coords=400, rng=np.random.default_rng(0))
    assert report.passed, report.max_rel_error


def test_seq2seq_unknown_item_is_error(cat):
    model = toy_seq2seq(cat)
    with pytest.raises(KeyError, match="i999"):
        model.seq2seq_loss(None, [], ["i0", "i999"], 0)


def test_seq2seq_context_only_encoder(cat):
    model = toy_seq2seq(cat)
    loss = model.seq2seq_loss(UserContext("u", 0, 0, 0), [], ["i0", "i1"], 0)
    assert np.isfinite(loss.data)


def test_generation_on_three_item_vocabulary():
    catalog = Catalog([Item(f"i{n}", 0, 0, 0, 0) for n in range(3)], [Outfit("o", ("i0", "i1"))], [],
                      {"category": 1, "color": 1, "brand": 1, "price_bucket": 1})
    model = toy_seq2seq(catalog)
    for seed in range(50):
        out = model.generate(None, [], 0, strategy="sample", temperature=2.0, seed=seed)
        assert len(set(out.item_ids)) == len(out.item_ids)
        assert 2 <= len(out.item_ids) <= 3
        assert all(0 < p <= 1 for p in out.probabilities)


def test_greedy_generation_is_deterministic(cat):
    model = toy_seq2seq(cat)
    seq = random_sequence(np.random.default_rng(0), cat, 5)
    a = model.generate(None, seq, seq[-1].timestamp)
    b = model.generate(None, seq, seq[-1].timestamp, seed=99)
    assert a == b


def test_generation_rejects_bad_strategy(cat):
    model = toy_seq2seq(cat)
    with pytest.raises(ValueError, match="strategy"):
        model.generate(None, [], 0, strategy="beam")


def test_overfit_seq2seq_reproduces_outfit(tiny_catalog, tmp_path):
    seq = make_interactions([("item", "i0"), ("item", "i4"), ("outfit", "o1")])
    ex = build_seq2seq_examples(seq, UserContext("u", 1, 0, 1), tiny_catalog, 8, seq[-1].timestamp)
    cfg = dict(enc_layers=1, dec_layers=1, heads=2, d_model=16, d_ff=32, dropout=0.0, max_len=8, max_items=4)
    model, result = train_seq2seq(ex * 20, tiny_catalog, Seq2SeqConfig(**cfg),
                                  TrainConfig(epochs=150, batch_size=32, lr=3e-3),
                                  checkpoint_path=tmp_path / "s.npz")
    assert model.step_accuracy(ex) == 1.0
    out = model.generate(UserContext("u", 1, 0, 1), seq[:2], seq[-1].timestamp)
    assert out.item_ids == ["i2", "i3", "i4"]
    loaded = Seq2SeqModel.load(tmp_path / "s.npz", tiny_catalog)
    assert loaded.generate(UserContext("u", 1, 0, 1), seq[:2], seq[-1].timestamp) == out
