"""Contrastive objectives (NT-Xent, SimSiam, relation-aware DICE loss) and pretraining.

The DICE loss for an anchor ``x`` averages, over its in-batch positives
``x'``, the negated log-ratio

    exp(s(x, x') / tau) / (sum_{x+} exp(s(x, x+) / tau_p) + sum_{x!=} exp(s(x, x!=) / tau_n))

and the batch loss is the mean over anchors.  Negative-relation pairs appear
in neither the numerator nor the denominator.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .augment import AugmentedSample, RelationIndex
from .autodiff import Tensor
from .encoders import EncoderSpec, GraphEncoder
from .graph import GraphBatch
from .layers import MLP

log = logging.getLogger(__name__)

LOSS_KINDS = ("dice", "ntxent", "simsiam")
METRIC_FIELDS = ("epoch", "mean_loss", "pos_mean", "pos_std", "noneq_mean", "noneq_std",
                 "neg_mean", "neg_std")


class EmptyPositiveSet(ValueError):
    def __init__(self, anchor):
        super().__init__(f"anchor {anchor} has no positive partner in the batch")
        self.anchor = anchor


class EmptyPositiveRow(ValueError):
    def __init__(self, row: int):
        super().__init__(f"row {row} of the positive mask is empty")
        self.row = row


class NumericFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    kind: str = "dice"
    tau: float = 0.05
    tau_p: float = 0.2
    tau_n: float = 0.05

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if min(self.tau, self.tau_p, self.tau_n) <= 0:
            raise ValueError("temperatures must be positive")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 1024
    epochs: int = 200
    seed: int = 0


@dataclass
class BatchMasks:
    """Positive / non-equal masks over a batch (symmetric, zero diagonal, disjoint)."""
    pos: np.ndarray
    neq: np.ndarray
    S: Optional[np.ndarray] = None

    def __post_init__(self):
        p, q = np.asarray(self.pos, float), np.asarray(self.neq, float)
        if p.shape != q.shape or p.shape[0] != p.shape[1]:
            raise ad.ShapeMismatch("masks", p.shape, q.shape)
        if not (np.array_equal(p, p.T) and np.array_equal(q, q.T)):
            raise ValueError("masks must be symmetric")
        if np.any(np.diag(p)) or np.any(np.diag(q)) or np.any(p * q):
            raise ValueError("masks must have zero diagonal and be disjoint")
        self.pos, self.neq = p, q

    @classmethod
    def from_relations(cls, relations: RelationIndex, idx=None) -> "BatchMasks":
        pos, neq, _ = relations.masks(idx)
        return cls(pos, neq)

    def positives(self, i: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.pos[i])]

    def nonequal(self, i: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.neq[i])]


# ---------------------------------------------------------------- losses

def cosine_matrix(Z: Tensor) -> Tensor:
    Zn = ad.l2_normalize_rows(Z)
    return ad.matmul(Zn, ad.transpose(Zn))


def nt_xent(Z: Tensor, pairing: Sequence[int], tau: float = 0.05) -> Tensor:
    """Normalized temperature-scaled cross entropy.

    ``pairing[i]`` is the row index of anchor ``i``'s positive, or ``-1`` to
    drop row ``i`` as an anchor (it still counts in other rows' denominators).
    """
    L = Z.shape[0]
    pairing = np.asarray(pairing, dtype=np.int64)
    if pairing.shape != (L,):
        raise ad.ShapeMismatch("nt_xent pairing", Z.shape, pairing.shape)
    anchors = np.flatnonzero(pairing >= 0)
    if len(anchors) == 0:
        raise EmptyPositiveSet("<all>")
    if np.any(pairing[anchors] == anchors):
        raise ValueError("an anchor cannot be its own positive")
    S = ad.gather_rows(cosine_matrix(Z), anchors)
    logits = ad.scalar_mul(S, 1.0 / tau)
    off = np.ones((len(anchors), L))
    off[np.arange(len(anchors)), anchors] = 0.0
    pick = np.zeros((len(anchors), L))
    pick[np.arange(len(anchors)), pairing[anchors]] = 1.0
    lse = ad.log(ad.row_sum(ad.mul(ad.exp(logits), Tensor(off))))
    num = ad.row_sum(ad.mul(logits, Tensor(pick)))
    return ad.mean(ad.sub(lse, num))


class Predictor:
    def __init__(self, params: ad.ParamSet, hidden: int, rng: np.random.Generator,
                 bottleneck: Optional[int] = None, name: str = "pred"):
        self.mlp = MLP(params, name, hidden, bottleneck or max(1, hidden // 4), hidden, rng)

    def __call__(self, z: Tensor) -> Tensor:
        return self.mlp(z)


def _row_cos(a: Tensor, b: Tensor) -> Tensor:
    return ad.row_sum(ad.mul(ad.l2_normalize_rows(a), ad.l2_normalize_rows(b)))


def simsiam(z1: Tensor, z2: Tensor, predictor: Optional[Callable] = None) -> Tensor:
    """Symmetric negative cosine of predictions against stop-gradient targets."""
    pred = predictor or (lambda z: z)
    p1, p2 = pred(z1), pred(z2)
    both = ad.add(_row_cos(p1, ad.stop_gradient(z2)), _row_cos(p2, ad.stop_gradient(z1)))
    return ad.scalar_mul(ad.mean(both), -0.5)


def _anchor_rows(pos: np.ndarray, anchors) -> np.ndarray:
    counts = pos.sum(axis=1)
    if anchors is None:
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            raise EmptyPositiveRow(int(empty[0]))
        return np.arange(len(counts))
    rows = np.asarray(anchors)
    if rows.dtype == bool:
        rows = np.flatnonzero(rows)
    for r in rows:
        if counts[r] == 0:
            raise EmptyPositiveRow(int(r))
    if len(rows) == 0:
        raise EmptyPositiveRow(-1)
    return rows.astype(np.int64)


def dice_loss_from_similarity(S: Tensor, masks: BatchMasks, tau: float, tau_p: float,
                              tau_n: float, anchors=None) -> Tensor:
    """Vectorized relation-aware loss on a precomputed similarity matrix."""
    if S.shape != masks.pos.shape:
        raise ad.ShapeMismatch("dice_loss", S.shape, masks.pos.shape)
    rows = _anchor_rows(masks.pos, anchors)
    Sa = ad.gather_rows(S, rows)
    P = Tensor(masks.pos[rows])
    Q = Tensor(masks.neq[rows])
    denom = ad.add(ad.row_sum(ad.mul(P, ad.exp(ad.scalar_mul(Sa, 1.0 / tau_p)))),
                   ad.row_sum(ad.mul(Q, ad.exp(ad.scalar_mul(Sa, 1.0 / tau_n)))))
    log_ratio = ad.sub(ad.scalar_mul(Sa, 1.0 / tau), ad.log(denom))
    per_anchor = ad.mul(ad.row_sum(ad.mul(P, log_ratio)),
                        Tensor(1.0 / masks.pos[rows].sum(axis=1, keepdims=True)))
    return ad.scalar_mul(ad.mean(per_anchor), -1.0)


def dice_loss_masked(Z: Tensor, masks: BatchMasks, tau: float = 0.05, tau_p: float = 0.2,
                     tau_n: float = 0.05, anchors=None) -> Tensor:
    return dice_loss_from_similarity(cosine_matrix(Z), masks, tau, tau_p, tau_n, anchors)


def dice_loss_naive(embeddings, relations, tau: float = 0.05, tau_p: float = 0.2,
                    tau_n: float = 0.05, anchors=None) -> float:
    """Literal double loop over anchors and their positives.

    ``relations`` is anything with ``positives(i)`` and ``nonequal(i)``
    (a :class:`RelationIndex` or :class:`BatchMasks`).
    """
    Z = [np.asarray(z, dtype=np.float64) for z in np.asarray(embeddings, dtype=np.float64)]

    def sim(a, b):
        return float(Z[a] @ Z[b] / (math.sqrt(Z[a] @ Z[a]) * math.sqrt(Z[b] @ Z[b])))

    rows = range(len(Z)) if anchors is None else (
        np.flatnonzero(anchors) if np.asarray(anchors).dtype == bool else anchors)
    terms = []
    for x in rows:
        pos = relations.positives(int(x))
        if not pos:
            raise EmptyPositiveSet(int(x))
        neq = relations.nonequal(int(x))
        denom = sum(math.exp(sim(x, p) / tau_p) for p in pos) + \
            sum(math.exp(sim(x, q) / tau_n) for q in neq)
        acc = 0.0
        for xp in pos:
            acc += -math.log(math.exp(sim(x, xp) / tau) / denom)
        terms.append(acc / len(pos))
    return sum(terms) / len(terms)


# ---------------------------------------------------------------- batching

def balance_batch(batch: Sequence[int], relations: RelationIndex,
                  rng: np.random.Generator) -> list[int]:
    """Subsample so every origin in the batch keeps exactly ``m`` samples,
    ``m`` being the smallest per-origin count."""
    groups: dict[int, list[int]] = {}
    for i in batch:
        groups.setdefault(int(relations.origin_code[i]), []).append(int(i))
    if not groups:
        return []
    m = min(len(v) for v in groups.values())
    out = []
    for members in groups.values():
        pick = np.sort(rng.choice(len(members), size=m, replace=False))
        out.extend(members[k] for k in pick)
    return out


def relation_stats(embeddings: np.ndarray, relations: RelationIndex) -> dict[str, float]:
    """Mean/std cosine over unordered pairs of each relation class."""
    Z = np.asarray(embeddings, dtype=np.float64)
    Zn = Z / np.linalg.norm(Z, axis=1, keepdims=True)
    S = Zn @ Zn.T
    pos, neq, neg = relations.masks()
    iu = np.triu_indices(len(Z), k=1)
    out = {}
    for key, mask in (("pos", pos), ("noneq", neq), ("neg", neg)):
        vals = S[iu][mask[iu] > 0]
        out[f"{key}_mean"] = float(vals.mean()) if len(vals) else float("nan")
        out[f"{key}_std"] = float(vals.std()) if len(vals) else float("nan")
    return out


# ---------------------------------------------------------------- training

@dataclass
class PretrainResult:
    encoder: GraphEncoder
    metrics: list[dict] = field(default_factory=list)
    predictor_params: Optional[ad.ParamSet] = None


def _pick_partners(pos: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    pairing = np.full(len(pos), -1, dtype=np.int64)
    for i in range(len(pos)):
        cand = np.flatnonzero(pos[i])
        if len(cand):
            pairing[i] = cand[int(rng.integers(len(cand)))]
    return pairing


def pretrain(samples: Sequence[AugmentedSample], encoder_spec: EncoderSpec,
             loss_cfg: LossConfig = LossConfig(), train_cfg: TrainConfig = TrainConfig(),
             eval_samples: Optional[Sequence[AugmentedSample]] = None,
             on_epoch: Optional[Callable[[dict], None]] = None) -> PretrainResult:
    """Contrastive pretraining with per-origin balanced batches.

    Metrics are recorded once per epoch; relation statistics come from
    ``eval_samples`` in eval mode (NaN when no eval split is given).
    """
    if not samples:
        raise ValueError("empty pretraining dataset")
    relations = RelationIndex.from_samples(samples)
    graphs = [s.graph for s in samples]
    eval_rel = RelationIndex.from_samples(eval_samples) if eval_samples else None
    eval_graphs = [s.graph for s in eval_samples] if eval_samples else None

    rng = np.random.default_rng(train_cfg.seed)
    encoder = GraphEncoder(encoder_spec, seed=np.random.default_rng([train_cfg.seed, 1]))
    params = list(encoder.params.values())
    predictor = pred_params = None
    if loss_cfg.kind == "simsiam":
        pred_params = ad.ParamSet()
        predictor = Predictor(pred_params, encoder_spec.hidden,
                              np.random.default_rng([train_cfg.seed, 2]))
        params += list(pred_params.values())
    opt = ad.Adam(params, lr=train_cfg.lr)

    metrics = []
    n = len(samples)
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, train_cfg.batch_size):
            sub = balance_batch(order[start:start + train_cfg.batch_size], relations, rng)
            masks = BatchMasks.from_relations(relations, sub)
            anchors = masks.pos.sum(axis=1) > 0
            if not anchors.any():
                continue
            batch = GraphBatch.from_graphs([graphs[i] for i in sub])
            opt.zero_grad()
            Z = encoder.forward(batch, train=True, rng=rng).g
            if loss_cfg.kind == "dice":
                loss = dice_loss_masked(Z, masks, loss_cfg.tau, loss_cfg.tau_p, loss_cfg.tau_n,
                                        anchors=anchors)
            elif loss_cfg.kind == "ntxent":
                loss = nt_xent(Z, _pick_partners(masks.pos, rng), loss_cfg.tau)
            else:
                pairing = _pick_partners(masks.pos, rng)
                rows = np.flatnonzero(pairing >= 0)
                loss = simsiam(ad.gather_rows(Z, rows), ad.gather_rows(Z, pairing[rows]),
                               predictor)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericFailure(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(value)

        row = {"epoch": epoch, "mean_loss": float(np.mean(losses)) if losses else float("nan")}
        if eval_graphs:
            row.update(relation_stats(encoder.embed(eval_graphs), eval_rel))
        else:
            row.update({k: float("nan") for k in METRIC_FIELDS[2:]})
        metrics.append(row)
        log.info("epoch %d loss %.5f", epoch, row["mean_loss"])
        if on_epoch:
            on_epoch(row)
    return PretrainResult(encoder, metrics, pred_params)


def split_holdout(samples: Sequence[AugmentedSample], fraction: float,
                  seed: int = 0) -> tuple[list[AugmentedSample], list[AugmentedSample]]:
    """Deterministic (train, held-out) split of an augmented dataset."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("holdout fraction must be in [0, 1)")
    rng = np.random.default_rng([seed, 7])
    mask = rng.random(len(samples)) < fraction
    return ([s for s, m in zip(samples, mask) if not m],
            [s for s, m in zip(samples, mask) if m])


def write_metrics_csv(path, rows: Sequence[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in METRIC_FIELDS[1:]])
