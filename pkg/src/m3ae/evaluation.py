"""Downstream heads, fine-tuning, pair scoring and Recall@K."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import TokenSequence
from .model import M3AE
from .objectives import (
    MASK_TOKEN,
    PairHead,
    apply_text_mask,
    force_corruption,
    itm_loss,
    sample_mask_plan,
)
from .optim import AdamW, ParamGroup, LrSchedule
from .tensor import Tensor, no_grad
from .transformer import pool


class ClassificationHead(PairHead):
    """2D -> D -> n_classes over [z_I ; z_T]."""

    def __init__(self, dim: int, n_classes: int, seed: int = 0):
        super().__init__(dim, n_classes, np.random.default_rng(seed))

    @property
    def n_classes(self) -> int:
        return self.n_out


def _length_groups(ids: Sequence[np.ndarray]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, row in enumerate(ids):
        groups.setdefault(len(row), []).append(i)
    return groups


def pooled_features(model: M3AE, patches: np.ndarray, ids: Sequence[np.ndarray]) -> Tensor:
    """[z_I ; z_T] per pair (graph-building); texts of unequal length are run in groups."""
    patches = np.asarray(patches, dtype=np.float32)
    groups = _length_groups(ids)
    if len(groups) == 1:
        return model.pooled(patches, np.stack(ids))
    parts, order = [], []
    for idx in groups.values():
        parts.append(model.pooled(patches[idx], np.stack([ids[i] for i in idx])))
        order.extend(idx)
    stacked = T.concat(parts, axis=0)
    return stacked[np.argsort(order)]


def classify(patches: np.ndarray, ids, model: M3AE, head: ClassificationHead) -> np.ndarray:
    """Class distribution(s) for one pair or a batch of pairs."""
    single = np.asarray(patches).ndim == 2
    p = np.asarray(patches)[None] if single else np.asarray(patches)
    seqs = [np.asarray(ids)] if single else [np.asarray(r) for r in ids]
    with no_grad():
        probs = T.softmax(head(pooled_features(model, p, seqs)), axis=-1).data
    return probs[0] if single else probs


def score_pair(patches: np.ndarray, ids: np.ndarray, model: M3AE) -> float:
    """Matched-probability from the image-text matching head."""
    with no_grad():
        logit = model.forward_itm(np.asarray(patches)[None], np.asarray(ids)[None]).data
    return float(T._stable_sigmoid(logit.astype(np.float64)).reshape(-1)[0])


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # (n_images, n_texts)
    image_ids: list = field(default_factory=list)
    text_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("score matrix has non-finite entries")
        n_i, n_t = self.scores.shape
        self.image_ids = list(self.image_ids) or list(range(n_i))
        self.text_ids = list(self.text_ids) or list(range(n_t))


def pair_features(model: M3AE, patches: np.ndarray, ids: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Pooled [z_I ; z_T] for every (image i, text j), shape (n_img, n_txt, 2D).

    Each image and text is encoded once; only the fusion runs per pair.
    """
    patches = np.asarray(patches, dtype=np.float32)
    ids = np.asarray(ids)
    n_i, n_t = len(patches), len(ids)
    with no_grad():
        hv = model.encode_vision(model.embed_image(patches))
        hl = model.encode_language(model.embed_text(ids))
        ii, jj = np.meshgrid(np.arange(n_i), np.arange(n_t), indexing="ij")
        ii, jj = ii.reshape(-1), jj.reshape(-1)
        out = []
        for s in range(0, len(ii), chunk):
            trace = model.fuse(hv[ii[s:s + chunk]], hl[jj[s:s + chunk]])
            out.append(pool(trace).data)
    return np.concatenate(out).reshape(n_i, n_t, -1)


def itm_score_matrix(model: M3AE, patches: np.ndarray, ids: np.ndarray, head: PairHead | None = None) -> ScoreMatrix:
    feats = pair_features(model, patches, ids)
    head = head or model.itm_head
    with no_grad():
        logits = head(Tensor(feats, dtype=np.float32)).data[..., 0]
    return ScoreMatrix(T._stable_sigmoid(logits.astype(np.float64)))


def true_ranks(scores: ScoreMatrix | np.ndarray, direction: str) -> np.ndarray:
    """0-based rank of the diagonal item for each query (ties: lower candidate id first)."""
    s = scores.scores if isinstance(scores, ScoreMatrix) else np.asarray(scores, dtype=np.float64)
    if direction == "T2I":
        s = s.T
    elif direction != "I2T":
        raise ValueError(f"direction must be 'I2T' or 'T2I', got {direction!r}")
    n_q, n_c = s.shape
    if n_q != n_c:
        raise ValueError("recall needs a square (matched-pool) score matrix")
    true = s[np.arange(n_q), np.arange(n_q)][:, None]
    cand = np.arange(n_c)[None, :]
    q = np.arange(n_q)[:, None]
    ahead = (s > true) | ((s == true) & (cand < q))
    return ahead.sum(axis=1)


def recall_at_k(scores: ScoreMatrix | np.ndarray, direction: str, k: int) -> float:
    """Fraction of queries whose ground-truth candidate is in the top ``k``.

    ``I2T`` queries are images (rows) ranking texts; ``T2I`` queries are texts
    (columns) ranking images.
    """
    s = scores.scores if isinstance(scores, ScoreMatrix) else np.asarray(scores)
    pool_size = s.shape[1] if direction == "I2T" else s.shape[0]
    if not 1 <= k <= pool_size:
        raise ValueError(f"K={k} outside [1, {pool_size}]")
    return float(np.mean(true_ranks(scores, direction) < k))


# -- fine-tuning --------------------------------------------------------------


@dataclass
class FinetuneConfig:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 16
    freeze_backbone: bool = True
    weight_decay: float = 0.01
    seed: int = 0


@dataclass
class FinetuneResult:
    head: PairHead
    accuracy: list[float]  # training accuracy after each epoch
    losses: list[float]


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label id outside [0, {n_classes})")
    return labels


def finetune(
    model: M3AE,
    head: ClassificationHead,
    patches: np.ndarray,
    ids: Sequence[np.ndarray],
    labels: np.ndarray,
    config: FinetuneConfig,
) -> FinetuneResult:
    """Cross-entropy training of ``head`` (and the backbone unless frozen) with AdamW."""
    labels = _check_labels(labels, head.n_classes)
    patches = np.asarray(patches, dtype=np.float32)
    n = len(labels)
    params = dict(head.named_parameters("head."))
    if not config.freeze_backbone:
        params.update(model.named_parameters())
    total = max(1, config.epochs * -(-n // config.batch_size))
    opt = AdamW([ParamGroup("finetune", params, LrSchedule(config.lr, total, 0.0))], weight_decay=config.weight_decay)
    frozen_feats = None
    if config.freeze_backbone:
        with no_grad():
            frozen_feats = pooled_features(model, patches, ids).data
    rng = np.random.default_rng(config.seed)
    acc_hist, loss_hist = [], []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            opt.zero_grad()
            if frozen_feats is not None:
                feats = Tensor(frozen_feats[idx])
            else:
                feats = pooled_features(model, patches[idx], [ids[i] for i in idx])
            logp = T.log_softmax(head(feats), axis=-1)
            loss = -logp[np.arange(len(idx)), labels[idx]].mean()
            T.backward(loss)
            opt.step(config.lr)
            epoch_loss += loss.item() * len(idx)
        loss_hist.append(epoch_loss / n)
        acc_hist.append(accuracy(model, head, patches, ids, labels, frozen_feats))
    return FinetuneResult(head, acc_hist, loss_hist)


def accuracy(model, head, patches, ids, labels, features: np.ndarray | None = None) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    with no_grad():
        feats = Tensor(features) if features is not None else pooled_features(model, patches, ids)
        pred = head(feats).data.argmax(axis=-1)
    return float(np.mean(pred == labels))


def finetune_itm(model: M3AE, patches: np.ndarray, ids: np.ndarray, epochs: int = 200, lr: float = 1e-3, seed: int = 0) -> PairHead:
    """Retrain a copy of the matching head on matched (diagonal) and mismatched pairs of a pool."""
    feats = pair_features(model, patches, ids)
    n = feats.shape[0]
    head = PairHead(model.config.dim, 1, np.random.default_rng(seed))
    head.load_state_dict(model.itm_head.state_dict())
    opt = AdamW([ParamGroup("itm", dict(head.named_parameters("itm_head.")), LrSchedule(lr, max(epochs, 1), 0.0))])
    rng = np.random.default_rng(seed)
    pos = feats[np.arange(n), np.arange(n)]
    for _ in range(epochs):
        # balanced: each image once with its caption, once with a random other caption
        shift = rng.integers(1, n, size=n) if n > 1 else np.zeros(n, dtype=int)
        neg = feats[np.arange(n), (np.arange(n) + shift) % n]
        x = Tensor(np.concatenate([pos, neg]), dtype=np.float32)
        y = np.concatenate([np.ones(n), np.zeros(n)])[:, None]
        opt.zero_grad()
        loss = itm_loss(head(x), y)
        T.backward(loss)
        opt.step(lr)
    return head


def mlm_accuracy(model: M3AE, patches: np.ndarray, ids: np.ndarray, draws: int = 8, seed: int = 0) -> float:
    """Top-1 accuracy at masked text positions, every masked token replaced by [MASK].

    ``ids`` is (B, M + 2) with specials; ``draws`` independent plans per pair.
    """
    patches = np.asarray(patches, dtype=np.float32)
    ids = np.asarray(ids)
    m = ids.shape[1] - 2
    rho = model.config.rho_text
    hits = total = 0
    with no_grad():
        for d in range(draws):
            plans = [force_corruption(sample_mask_plan(m, rho, "text", int(np.random.SeedSequence([seed, d, b]).generate_state(1)[0])), MASK_TOKEN)
                     for b in range(len(ids))]
            if not len(plans[0]):
                continue
            masked = np.stack([apply_text_mask(TokenSequence(r[1:-1], r), p, model.config.vocab_size).with_specials
                               for r, p in zip(ids, plans)])
            logits, targets = model.forward_mlm(patches, masked, ids, plans)
            hits += int((logits.data.argmax(axis=-1) == targets).sum())
            total += targets.size
    if total == 0:
        raise ValueError("no maskable text positions")
    return hits / total


# -- result files -------------------------------------------------------------

EVAL_FIELDS = ("task", "split", "metric", "value", "seed")


def write_metrics_csv(path: str | Path, rows: list[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_FIELDS)
        for task, split, metric, value, seed in rows:
            w.writerow([task, split, metric, f"{value:.6f}", seed])


def write_score_matrix(path: str | Path, sm: ScoreMatrix) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image"] + [str(t) for t in sm.text_ids])
        for iid, row in zip(sm.image_ids, sm.scores):
            w.writerow([str(iid)] + [f"{v:.8f}" for v in row])


def retrieval_rows(sm: ScoreMatrix, task: str, split: str, seed: int, ks=(1, 5, 10)) -> list[tuple]:
    rows = []
    for direction in ("I2T", "T2I"):
        for k in ks:
            rows.append((task, split, f"{direction}_R@{k}", recall_at_k(sm, direction, k), seed))
    return rows
