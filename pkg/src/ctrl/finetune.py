"""Stage 2: supervised CTR training of the collaborative tower.

Only the collaborative encoder and a freshly initialized linear+sigmoid head
are trained and deployed; the text tower is not needed here. The single-stage
variant (end_to_end_train) instead minimizes the supervised loss plus a
weighted contrastive term with the text tower attached.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DTensor, Tape
from .config import FinetuneConfig
from .data import EncodedSplit, batches
from .encoders import CollaborativeEncoder, Linear
from .exceptions import NumericError, UsageError
from .metrics import LOG_EPS, auc, logloss
from .optim import AdamW
from .params import ParamStore, rng_for
from .prompt import build_prompt


class CtrHead:
    """Randomly initialized linear layer to one logit, plus sigmoid."""

    def __init__(self, store: ParamStore, d_in: int, rng, prefix: str = "ctr.out"):
        self.lin = Linear(store, prefix, d_in, 1, rng)
        self.prefix = prefix

    def __call__(self, h: DTensor) -> DTensor:
        logits = self.lin(h)
        return ad.sigmoid(ad.reshape(logits, (h.shape[0],)))


def bce_loss(preds: DTensor, labels) -> DTensor:
    """Mean binary cross entropy. Probabilities are clamped away from 0 and 1
    by 1e-12 using relu (gradients are exact inside the clamp range)."""
    y = np.asarray(labels, dtype=np.float64)
    if preds.shape != y.shape:
        raise UsageError(f"preds shape {preds.shape} != labels shape {y.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise UsageError("labels must be 0 or 1")
    if preds.data.min() < 0.0 or preds.data.max() > 1.0:
        raise UsageError("predictions must lie in [0, 1]")
    eps = DTensor(LOG_EPS)
    log_p = ad.log(ad.add(ad.relu(ad.sub(preds, eps)), eps))
    one_minus = ad.sub(DTensor(1.0), preds)
    log_q = ad.log(ad.add(ad.relu(ad.sub(one_minus, eps)), eps))
    terms = ad.add(ad.mul(DTensor(y), log_p),
                   ad.mul(DTensor(1.0 - y), log_q))
    return ad.neg(ad.mean(terms))


def predict_scores(encoder: CollaborativeEncoder, head: CtrHead,
                   split: EncodedSplit, batch_size: int = 4096) -> np.ndarray:
    out = []
    for batch in batches(split, batch_size, "eval"):
        out.append(head(encoder(batch, train=False)).data)
    return np.concatenate(out)


def _epoch_seed(seed: int, epoch: int) -> int:
    return seed * 1_000_003 + epoch


@dataclass
class FinetuneResult:
    history: list  # rows of (epoch, train_loss, val_auc, val_logloss)
    best_epoch: int
    best_val_auc: float
    diverged: bool


def write_history(history, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_auc", "val_logloss"])
        for row in history:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def finetune(encoder: CollaborativeEncoder, head: CtrHead,
             train_split: EncodedSplit, val_split: EncodedSplit,
             cfg: FinetuneConfig, seed: int,
             history_path=None) -> FinetuneResult:
    """Adam over encoder + head parameters with early stopping on validation
    AUC; the best-epoch parameter state is restored before returning."""
    store = encoder.store
    names = encoder.param_names() + [n for n in store.names()
                                     if n.startswith(head.prefix)]
    opt = AdamW(store, names=names, weight_decay=0.0)
    drop_rng = rng_for(seed, "finetune.dropout")
    history = []
    best = store.snapshot()
    best_auc, best_epoch, bad_epochs = -np.inf, -1, 0
    diverged = False
    for epoch in range(cfg.epochs):
        losses = []
        try:
            for batch in batches(train_split, cfg.batch_size, "train",
                                 seed=_epoch_seed(seed, epoch)):
                with Tape() as tape:
                    preds = head(encoder(batch, train=True, rng=drop_rng))
                    loss = bce_loss(preds, batch.labels)
                tape.backward(loss)
                opt.step(cfg.lr)
                losses.append(loss.item())
        except NumericError as e:
            warnings.warn(f"fine-tuning diverged in epoch {epoch} ({e}); "
                          "restoring best state")
            diverged = True
            break
        val_scores = predict_scores(encoder, head, val_split)
        val_auc = auc(val_scores, val_split.labels)
        val_ll = logloss(val_scores, val_split.labels)
        history.append((epoch, float(np.mean(losses)), val_auc, val_ll))
        if val_auc > best_auc:
            best_auc, best_epoch, bad_epochs = val_auc, epoch, 0
            best = store.snapshot()
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
    store.restore(best)
    if history_path is not None:
        write_history(history, history_path)
    return FinetuneResult(history=history, best_epoch=best_epoch,
                          best_val_auc=float(best_auc), diverged=diverged)


def end_to_end_train(model, head: CtrHead, train_split: EncodedSplit,
                     val_split: EncodedSplit, tokenizer, cfg: FinetuneConfig,
                     seed: int, history_path=None) -> FinetuneResult:
    """Single-stage variant: minimize supervised loss + lambda * contrastive
    loss jointly over both towers and all heads. With lambda = 0 the
    supervised trajectory matches plain fine-tuning step for step."""
    from .align import infonce_tab2text, infonce_text2tab

    store = model.store
    opt = AdamW(store, weight_decay=0.0)
    lam = cfg.lambda_ccl
    tau = model.cfg.align.temperature
    drop_rng = rng_for(seed, "finetune.dropout")
    history = []
    best = store.snapshot()
    best_auc, best_epoch, bad_epochs = -np.inf, -1, 0
    diverged = False
    encoder = model.collab
    for epoch in range(cfg.epochs):
        losses = []
        try:
            for batch in batches(train_split, cfg.batch_size, "train",
                                 seed=_epoch_seed(seed, epoch)):
                prompts = [build_prompt(r, encoder.schema, model.template)
                           for r in batch.raw_rows]
                ids, mask = tokenizer.encode_batch(prompts)
                with Tape() as tape:
                    h_col = encoder(batch, train=True, rng=drop_rng)
                    preds = head(h_col)
                    l_ctr = bce_loss(preds, batch.labels)
                    h_tab = model.tab_proj(h_col)
                    h_text = model.text_proj(model.text(ids, mask))
                    s_text, s_tab = model.similarity_matrices(h_text, h_tab)
                    l_ccl = ad.mul(ad.add(infonce_text2tab(s_text, tau),
                                          infonce_tab2text(s_tab, tau)),
                                   DTensor(0.5))
                    loss = ad.add(l_ctr, ad.mul(DTensor(lam), l_ccl))
                tape.backward(loss)
                opt.step(cfg.lr)
                losses.append((loss.item(), l_ctr.item(), l_ccl.item()))
        except NumericError as e:
            warnings.warn(f"single-stage training diverged in epoch {epoch} "
                          f"({e}); restoring best state")
            diverged = True
            break
        val_scores = predict_scores(encoder, head, val_split)
        val_auc = auc(val_scores, val_split.labels)
        val_ll = logloss(val_scores, val_split.labels)
        mean_ctr = float(np.mean([l[1] for l in losses]))
        history.append((epoch, mean_ctr, val_auc, val_ll))
        if val_auc > best_auc:
            best_auc, best_epoch, bad_epochs = val_auc, epoch, 0
            best = store.snapshot()
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
    store.restore(best)
    if history_path is not None:
        write_history(history, history_path)
    return FinetuneResult(history=history, best_epoch=best_epoch,
                          best_val_auc=float(best_auc), diverged=diverged)
