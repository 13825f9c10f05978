"""Masked next-entity cross-entropy and the pairwise/pointwise alternatives."""

from __future__ import annotations

import numpy as np

from ..numerics import Tape, Tensor

ALTERNATIVE_LOSSES = ("bpr", "top1", "bce")


def clm_loss(tape: Tape, hidden: Tensor, target_ids: np.ndarray, target_mask: np.ndarray,
             output_table: Tensor) -> Tensor:
    """Mean over masked rows of -log softmax(hidden · tableᵀ)[target].

    Only masked rows are gathered and scored, so unmasked rows contribute
    nothing whatever their target id.
    """
    mask = np.asarray(target_mask, dtype=bool).reshape(-1)
    if not mask.any():
        raise ValueError("clm_loss: target mask has no true bit")
    d = hidden.shape[-1]
    rows = np.flatnonzero(mask)
    flat = tape.reshape(hidden, (-1, d))
    picked = tape.embedding_lookup(flat, rows)
    logits = tape.matmul(picked, tape.transpose(output_table, (1, 0)))
    targets = np.asarray(target_ids).reshape(-1)[rows]
    return tape.softmax_cross_entropy(logits, targets)


def pairwise_scores(tape: Tape, hidden: Tensor, output_table: Tensor, positives: np.ndarray,
                    negatives: np.ndarray) -> tuple[Tensor, Tensor]:
    """Dot-product scores (N,) for positives and (N, M) for negatives."""
    n, d = hidden.shape
    pos = tape.embedding_lookup(output_table, np.asarray(positives))
    s_pos = tape.sum(tape.multiply(hidden, pos), axis=-1)
    neg = tape.embedding_lookup(output_table, np.asarray(negatives))
    s_neg = tape.sum(tape.multiply(tape.reshape(hidden, (n, 1, d)), neg), axis=-1)
    return s_pos, s_neg


def ranking_loss_from_scores(tape: Tape, kind: str, s_pos: Tensor, s_neg: Tensor) -> Tensor:
    """bpr: mean -log σ(s⁺ - s⁻); top1: mean σ(s⁻ - s⁺) + σ(s⁻²);
    bce: mean over positives of -log σ(s⁺) - Σ log(1 - σ(s⁻))."""
    if s_neg.ndim != 2 or s_neg.shape[1] == 0:
        raise ValueError(f"{kind}: need at least one negative per positive")
    n = s_pos.shape[0]
    s_pos_col = tape.reshape(s_pos, (n, 1))
    if kind == "bpr":
        return tape.neg(tape.mean(tape.log_sigmoid(tape.sub(s_pos_col, s_neg))))
    if kind == "top1":
        return tape.mean(tape.add(tape.sigmoid(tape.sub(s_neg, s_pos_col)), tape.sigmoid(tape.square(s_neg))))
    if kind == "bce":
        pos_term = tape.log_sigmoid(s_pos)
        neg_term = tape.sum(tape.log_sigmoid(tape.neg(s_neg)), axis=1)
        return tape.neg(tape.mean(tape.add(pos_term, neg_term)))
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {ALTERNATIVE_LOSSES}")


def alternative_loss(tape: Tape, kind: str, hidden: Tensor, output_table: Tensor,
                     positives: np.ndarray, negatives: np.ndarray) -> Tensor:
    negatives = np.asarray(negatives)
    if negatives.ndim != 2 or negatives.shape[1] == 0:
        raise ValueError(f"{kind}: need at least one negative per positive")
    s_pos, s_neg = pairwise_scores(tape, hidden, output_table, positives, negatives)
    return ranking_loss_from_scores(tape, kind, s_pos, s_neg)


def sample_negatives(rng: np.random.Generator, positives: np.ndarray, n_targets: int, m: int) -> np.ndarray:
    """Uniform over the target vocabulary excluding each row's positive."""
    if n_targets < 2:
        raise ValueError("negative sampling needs at least two targets")
    positives = np.asarray(positives)
    draw = rng.integers(0, n_targets - 1, size=(positives.shape[0], m))
    return draw + (draw >= positives[:, None])
