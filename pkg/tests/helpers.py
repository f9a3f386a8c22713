"""Shared test oracles, kept independent of the code paths they check.

- finite-difference gradient checking (central differences, h=1e-6)
- brute-force pairwise AUC
"""

from __future__ import annotations

import numpy as np

from ctrl.autodiff import DTensor, Tape

FD_H = 1e-6
FD_RTOL = 1e-4
# central differences cannot resolve differences below roundoff(f)/h
FD_ATOL = 1e-7


def numeric_grad(f, x: np.ndarray, h: float = FD_H) -> np.ndarray:
    """Central-difference gradient of scalar-valued f at x, coordinatewise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def check_grads(build_loss, leaves: dict[str, np.ndarray], rtol: float = FD_RTOL,
                h: float = FD_H, sample: int | None = None,
                rng: np.random.Generator | None = None) -> None:
    """Compare taped gradients of build_loss against central differences.

    ``build_loss`` receives {name: DTensor} and returns a scalar DTensor;
    ``leaves`` holds the arrays whose gradients are checked. ``sample``
    limits the number of coordinates checked per leaf.
    """
    tensors = {k: DTensor(v, requires_grad=True) for k, v in leaves.items()}
    with Tape() as tape:
        loss = build_loss(tensors)
    tape.backward(loss)
    analytic = {k: t.grad.copy() for k, t in tensors.items()}

    def eval_loss(arrays: dict[str, np.ndarray]) -> float:
        ts = {k: DTensor(v) for k, v in arrays.items()}
        return build_loss(ts).item()

    for name, base in leaves.items():
        base = np.asarray(base, dtype=np.float64)
        coords = np.arange(base.size)
        if sample is not None and base.size > sample:
            r = rng or np.random.default_rng(0)
            coords = r.choice(base.size, size=sample, replace=False)
        num = np.zeros(base.size)
        ana = analytic[name].reshape(-1)
        work = {k: v.copy() for k, v in leaves.items()}
        flat = work[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = eval_loss(work)
            flat[i] = orig - h
            fm = eval_loss(work)
            flat[i] = orig
            num[i] = (fp - fm) / (2.0 * h)
        picked_num = num[coords]
        picked_ana = ana[coords]
        scale = max(np.abs(picked_num).max(initial=0.0),
                    np.abs(picked_ana).max(initial=0.0), 1e-8)
        diff = np.abs(picked_ana - picked_num).max(initial=0.0)
        assert diff < FD_ATOL + rtol * scale, (
            f"gradient mismatch for '{name}': abs diff {diff:.3e}, "
            f"rel err {diff / scale:.3e} "
            f"(analytic {picked_ana[:4]}, numeric {picked_num[:4]})")


def auc_bruteforce(scores, labels) -> float:
    """O(P*N) pair counting: wins + half ties over all pos-neg pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need at least one positive and one negative")
    diff = pos[:, None] - neg[None, :]
    wins = (diff > 0).sum()
    ties = (diff == 0).sum()
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def store_grad_check(store, forward, names=None, sample: int | None = 5,
                     rtol: float = FD_RTOL, rng=None) -> None:
    """FD-check a store-backed model: `forward()` must rebuild the scalar loss
    from the store's current parameter tensors on every call."""
    names = list(names) if names is not None else store.names()
    leaves = {n: np.asarray(store[n].data).copy() for n in names}

    def build(tensors):
        for n, t in tensors.items():
            store.replace(n, t)
        return forward()

    check_grads(build, leaves, rtol=rtol, sample=sample, rng=rng)


def tiny_run_config(seed: int = 0, backbone: str = "autoint",
                    similarity: str = "maxsim", **align_overrides):
    """A full RunConfig small enough for finite-difference checks."""
    from ctrl.config import (AlignConfig, FinetuneConfig, ModelConfig,
                             RunConfig, TextConfig)
    align_kwargs = dict(temperature=0.7, batch_size=4, similarity=similarity,
                        m_subspaces=2, d_proj=8, epochs=1, warmup_steps=4,
                        start_lr=1e-4, peak_lr=1e-3)
    align_kwargs.update(align_overrides)
    return RunConfig(
        seed=seed,
        model=ModelConfig(backbone=backbone, d=4, hidden=(8, 6),
                          attn_layers=1, attn_heads=2, attn_head_dim=3,
                          cross_layers=2),
        text=TextConfig(d_model=8, n_layers=1, n_heads=2, d_ff=16,
                        max_tokens=32),
        align=AlignConfig(**align_kwargs),
        finetune=FinetuneConfig(lr=1e-3, batch_size=8, epochs=2, patience=2),
    )


def tiny_pipeline(seed: int = 0, backbone: str = "autoint",
                  similarity: str = "maxsim", n_rows: int = 24,
                  history_len: int = 2, **align_overrides):
    """Synthetic rows -> splits -> tokenizer -> AlignmentModel, all tiny.

    Returns (model, tokenizer, splits, cfg) where splits is
    (train, val, test) EncodedSplits.
    """
    from ctrl.align import AlignmentModel
    from ctrl.data import prepare_splits
    from ctrl.params import ParamStore
    from ctrl.prompt import Tokenizer, build_prompt
    from ctrl.synthetic import SyntheticSpec, generate

    rows, schema, _ = generate(SyntheticSpec(
        n_rows=n_rows, n_fields=2, vocab_size=3, rule="logistic",
        flip_noise=0.0, seed=seed, history_len=history_len))
    train, val, test, fitted = prepare_splits(rows, schema)
    cfg = tiny_run_config(seed=seed, backbone=backbone, similarity=similarity,
                          **align_overrides)
    store = ParamStore()
    model = AlignmentModel(store, fitted, vocab_size=64, cfg=cfg)
    corpus = [build_prompt(r, fitted, model.template) for r in train.raw_rows]
    tokenizer = Tokenizer.fit(corpus, max_tokens=cfg.text.max_tokens)
    assert tokenizer.vocab_size <= 64
    return model, tokenizer, (train, val, test), cfg
