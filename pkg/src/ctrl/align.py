"""Stage 1: cross-modal contrastive alignment of the two towers.

Each tower's output is projected to a shared width. Similarity between a text
row and a tabular row is either cosine over the projected vectors or a late
interaction score: both vectors are split into M sub-representations and the
score is the sum over one side's sub-representations of the maximum inner
product against the other side's (asymmetric by construction). The training
loss is the mean of the two directional InfoNCE losses over the in-batch
similarity matrix, diagonal = positive pairs.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DTensor, Tape
from .config import AlignConfig, RunConfig
from .data import EncodedSplit, batches
from .encoders import CollaborativeEncoder, Linear, TextEncoder
from .exceptions import NumericError, ShapeError, UsageError
from .optim import AdamW, WarmupSchedule
from .params import ParamStore, rng_for
from .prompt import PromptTemplate, Tokenizer, build_prompt


class ProjectionHead(Linear):
    """Affine map from a tower's output width to the shared alignment width."""


class SubspaceHead:
    """M affine maps to width d_sub = d_proj / M, stored as one matrix.
    Sub-representations are optionally L2-normalized, which bounds the late
    interaction score in [-M, M] and decouples it from representation scale."""

    def __init__(self, store, prefix, d_proj, m, rng, normalize: bool = True):
        if m < 1:
            raise UsageError("m_subspaces must be >= 1")
        if d_proj % m != 0:
            raise UsageError("m_subspaces must divide d_proj")
        self.m = m
        self.d_sub = d_proj // m
        self.normalize = normalize
        self.lin = Linear(store, prefix, d_proj, m * self.d_sub, rng)

    def __call__(self, h: DTensor) -> DTensor:
        z = self.lin(h)
        z = ad.reshape(z, (h.shape[0], self.m, self.d_sub))
        if self.normalize:
            z = ad.l2_normalize(z, axis=2)
        return z


def maxsim(subs_i, subs_j) -> DTensor:
    """Late interaction score between two sub-representation sets (M_i, d) and
    (M_j, d): sum over rows of subs_i of the max inner product with subs_j."""
    a = subs_i if isinstance(subs_i, DTensor) else DTensor(subs_i)
    b = subs_j if isinstance(subs_j, DTensor) else DTensor(subs_j)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("maxsim expects (M_i, d) and (M_j, d)")
    sims = ad.matmul(a, ad.transpose(b, (1, 0)))
    return ad.sum_(ad.max_(sims, axis=1))


def maxsim_matrix(subs_a: DTensor, subs_b: DTensor) -> DTensor:
    """All-pairs late interaction scores. subs_a, subs_b: (N, M, d).
    Returns (N, N) with rows indexed by subs_a."""
    n, m, d = subs_a.shape
    nb, mb, db = subs_b.shape
    if d != db:
        raise ShapeError("sub-representation widths differ")
    flat_a = ad.reshape(subs_a, (n * m, d))
    flat_b = ad.reshape(subs_b, (nb * mb, d))
    sims = ad.matmul(flat_a, ad.transpose(flat_b, (1, 0)))  # (n*m, nb*mb)
    sims = ad.reshape(sims, (n, m, nb, mb))
    best = ad.max_(sims, axis=3)  # (n, m, nb)
    return ad.sum_(best, axis=1)  # (n, nb)


def cosine(h_i, h_j) -> DTensor:
    """Cosine similarity between two vectors; zero vectors score 0 (warned)."""
    a = h_i if isinstance(h_i, DTensor) else DTensor(h_i)
    b = h_j if isinstance(h_j, DTensor) else DTensor(h_j)
    an = ad.l2_normalize(ad.reshape(a, (1, a.data.size)), axis=1)
    bn = ad.l2_normalize(ad.reshape(b, (1, b.data.size)), axis=1)
    return ad.sum_(ad.mul(an, bn))


def cosine_matrix(h_a: DTensor, h_b: DTensor) -> DTensor:
    a = ad.l2_normalize(h_a, axis=1)
    b = ad.l2_normalize(h_b, axis=1)
    return ad.matmul(a, ad.transpose(b, (1, 0)))


def infonce(sim_matrix: DTensor, temperature: float) -> DTensor:
    """Softmax cross-entropy over one direction of the similarity matrix.
    Rows are anchors, the diagonal holds the positive pairs. Stabilized by
    row-max subtraction inside logsumexp."""
    if temperature <= 0:
        raise UsageError("temperature must be > 0")
    s = sim_matrix if isinstance(sim_matrix, DTensor) else DTensor(sim_matrix)
    if s.data.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {s.shape}")
    n = s.shape[0]
    if n == 1:
        return DTensor(np.zeros(()))
    logits = ad.mul(s, DTensor(1.0 / temperature))
    lse = ad.logsumexp(logits, axis=1)  # (N,)
    diag = ad.sum_(ad.mul(logits, DTensor(np.eye(n))), axis=1)
    return ad.mean(ad.sub(lse, diag))


infonce_text2tab = infonce  # rows indexed by text


def infonce_tab2text(sim_matrix: DTensor, temperature: float) -> DTensor:
    """Same objective with rows indexed by tabular anchors."""
    return infonce(sim_matrix, temperature)


class AlignmentModel:
    """Both towers plus projection (and, for the late interaction mode,
    sub-space) heads, sharing one ParamStore."""

    def __init__(self, store: ParamStore, schema, vocab_size: int,
                 cfg: RunConfig, template: PromptTemplate = None):
        a = cfg.align
        self.cfg = cfg
        self.store = store
        self.template = template or PromptTemplate(
            variant=cfg.prompt_variant, user_prefix=cfg.user_prefix,
            item_prefix=cfg.item_prefix)
        self.collab = CollaborativeEncoder(store, schema, cfg.model,
                                           rng_for(cfg.seed, "collab"))
        self.text = TextEncoder(store, vocab_size, cfg.text,
                                rng_for(cfg.seed, "text"))
        self.tab_proj = ProjectionHead(store, "heads.tab_proj",
                                       self.collab.out_dim, a.d_proj,
                                       rng_for(cfg.seed, "heads.tab_proj"))
        self.text_proj = ProjectionHead(store, "heads.text_proj",
                                        self.text.out_dim, a.d_proj,
                                        rng_for(cfg.seed, "heads.text_proj"))
        if a.similarity == "maxsim":
            self.tab_sub = SubspaceHead(store, "heads.tab_sub", a.d_proj,
                                        a.m_subspaces,
                                        rng_for(cfg.seed, "heads.tab_sub"),
                                        normalize=a.normalize_subreps)
            self.text_sub = SubspaceHead(store, "heads.text_sub", a.d_proj,
                                         a.m_subspaces,
                                         rng_for(cfg.seed, "heads.text_sub"),
                                         normalize=a.normalize_subreps)
        else:
            self.tab_sub = self.text_sub = None

    def projected(self, batch, token_ids, mask, train: bool = False, rng=None):
        h_tab = self.tab_proj(self.collab(batch, train=train, rng=rng))
        h_text = self.text_proj(self.text(token_ids, mask))
        return h_text, h_tab

    def similarity_matrices(self, h_text: DTensor, h_tab: DTensor):
        """Returns (rows=text matrix, rows=tabular matrix)."""
        if self.cfg.align.similarity == "maxsim":
            a = self.text_sub(h_text)
            b = self.tab_sub(h_tab)
            return maxsim_matrix(a, b), maxsim_matrix(b, a)
        s = cosine_matrix(h_text, h_tab)
        return s, ad.transpose(s, (1, 0))

    def ccl(self, batch, token_ids, mask, train: bool = False, rng=None):
        """Returns (loss, text-to-tabular term, tabular-to-text term)."""
        h_text, h_tab = self.projected(batch, token_ids, mask, train=train, rng=rng)
        s_text, s_tab = self.similarity_matrices(h_text, h_tab)
        tau = self.cfg.align.temperature
        l_t2t = infonce_text2tab(s_text, tau)
        l_tab2text = infonce_tab2text(s_tab, tau)
        loss = ad.mul(ad.add(l_t2t, l_tab2text), DTensor(0.5))
        return loss, l_t2t, l_tab2text


def ccl_loss(model: AlignmentModel, batch, token_ids, mask,
             train: bool = False, rng=None) -> DTensor:
    return model.ccl(batch, token_ids, mask, train=train, rng=rng)[0]


def _epoch_seed(seed: int, epoch: int) -> int:
    return seed * 1_000_003 + epoch


@dataclass
class AlignResult:
    curve: list  # rows of (step, lr, loss, l_t2t, l_tab2text)
    steps: int
    diverged: bool


def write_curve(curve, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "loss", "l_t2t", "l_tab2text"])
        for row in curve:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def align_train(model: AlignmentModel, split: EncodedSplit,
                tokenizer: Tokenizer, cfg: AlignConfig, seed: int,
                curve_path=None) -> AlignResult:
    """Minimize the contrastive loss over every parameter of both towers and
    all heads. On a non-finite loss the last good parameter state is restored
    and training stops."""
    store = model.store
    sched = WarmupSchedule(cfg.start_lr, cfg.peak_lr, cfg.warmup_steps)
    opt = AdamW(store, weight_decay=cfg.weight_decay)
    drop_rng = rng_for(seed, "align.dropout")
    curve = []
    step = 0
    diverged = False
    last_good = store.snapshot()
    for epoch in range(cfg.epochs):
        for batch in batches(split, cfg.batch_size, "align",
                             seed=_epoch_seed(seed, epoch)):
            prompts = [build_prompt(r, model.collab.schema, model.template)
                       for r in batch.raw_rows]
            ids, mask = tokenizer.encode_batch(prompts)
            lr = sched.lr_at(step)
            # a state is only known good once its forward pass came out finite
            pre_step = store.snapshot()
            try:
                with Tape() as tape:
                    loss, l_t2t, l_tab2text = model.ccl(
                        batch, ids, mask, train=True, rng=drop_rng)
                tape.backward(loss)
                opt.step(lr)
            except NumericError as e:
                warnings.warn(f"alignment diverged at step {step} ({e}); "
                              "restoring last good state")
                store.restore(last_good)
                diverged = True
                break
            curve.append((step, lr, loss.item(), l_t2t.item(), l_tab2text.item()))
            last_good = pre_step
            step += 1
        if diverged:
            break
    if curve_path is not None:
        write_curve(curve, curve_path)
    return AlignResult(curve=curve, steps=step, diverged=diverged)


def evaluate_ccl(model: AlignmentModel, split: EncodedSplit,
                 tokenizer: Tokenizer, cfg: AlignConfig, seed: int = 0) -> float:
    """Mean contrastive loss over the split in eval mode (no updates)."""
    total, count = 0.0, 0
    for batch in batches(split, cfg.batch_size, "align", seed=_epoch_seed(seed, 0)):
        prompts = [build_prompt(r, model.collab.schema, model.template)
                   for r in batch.raw_rows]
        ids, mask = tokenizer.encode_batch(prompts)
        loss, _, _ = model.ccl(batch, ids, mask, train=False)
        total += loss.item()
        count += 1
    if count == 0:
        raise UsageError("split has fewer rows than one alignment batch")
    return total / count
