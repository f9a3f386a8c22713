"""Representation dumps and 2-D projection for inspecting alignment quality.

The alignment effect is summarized by one scalar: mean cosine similarity of
paired (same-row) text/tabular representations minus the mean over unpaired
combinations. Projection to 2-D uses PCA (top-2 singular vectors) with a
deterministic sign convention so repeated runs produce identical plots.
"""

from __future__ import annotations

import csv
import warnings

import numpy as np

from .data import EncodedSplit, batches
from .exceptions import DataError, UsageError
from .prompt import build_prompt


def tower_representations(model, split: EncodedSplit, tokenizer,
                          batch_size: int = 256):
    """Projected representations for every row: (h_text (N, D), h_tab (N, D))."""
    texts, tabs = [], []
    for batch in batches(split, batch_size, "eval"):
        prompts = [build_prompt(r, model.collab.schema, model.template)
                   for r in batch.raw_rows]
        ids, mask = tokenizer.encode_batch(prompts)
        h_text, h_tab = model.projected(batch, ids, mask, train=False)
        texts.append(h_text.data)
        tabs.append(h_tab.data)
    return np.concatenate(texts), np.concatenate(tabs)


def dump_embeddings(model, split: EncodedSplit, tokenizer, path,
                    batch_size: int = 256):
    """Write 2N records: one per row per modality. Columns are row_id,
    modality (tab|text), then the representation coordinates."""
    h_text, h_tab = tower_representations(model, split, tokenizer, batch_size)
    d = h_text.shape[1]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "modality"] + [f"v{i}" for i in range(d)])
        for i in range(h_tab.shape[0]):
            w.writerow([i, "tab"] + [repr(float(v)) for v in h_tab[i]])
        for i in range(h_text.shape[0]):
            w.writerow([i, "text"] + [repr(float(v)) for v in h_text[i]])
    return h_text, h_tab


def read_embeddings(path):
    ids, modalities, vecs = [], [], []
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or header[:2] != ["row_id", "modality"]:
                raise DataError(f"{path}: not an embedding dump")
            for row in reader:
                ids.append(int(row[0]))
                modalities.append(row[1])
                vecs.append([float(v) for v in row[2:]])
    except OSError as e:
        raise DataError(f"cannot read embeddings: {e}") from e
    if not vecs:
        raise DataError(f"{path}: no embedding records")
    return np.array(ids), modalities, np.array(vecs)


def _row_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms == 0.0, 1.0, norms)


def paired_gap(h_text: np.ndarray, h_tab: np.ndarray):
    """Returns (paired mean cosine, unpaired mean cosine, gap). Pairs are rows
    with equal index; unpaired averages over all i != j combinations."""
    if h_text.shape != h_tab.shape:
        raise UsageError("towers must produce equal-shaped representations")
    n = h_text.shape[0]
    if n < 2:
        raise UsageError("need at least 2 rows to compare paired vs unpaired")
    sims = _row_normalize(h_text) @ _row_normalize(h_tab).T
    paired = float(np.trace(sims) / n)
    unpaired = float((sims.sum() - np.trace(sims)) / (n * (n - 1)))
    return paired, unpaired, paired - unpaired


def project_2d(x: np.ndarray):
    """PCA onto the top-2 principal components.

    Sign convention: within each component the largest-magnitude loading is
    made positive. Rank-deficient input (fewer than 2 informative directions)
    yields a zero second column and a warning flag.

    Returns (coords (R, 2), explained_variance_ratio (2,), rank_deficient).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise UsageError("project_2d needs at least 3 records")
    centered = x - x.mean(axis=0)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    total = float((svals ** 2).sum())
    rank_deficient = False
    coords = np.zeros((x.shape[0], 2))
    ratios = np.zeros(2)
    tol = svals[0] * max(x.shape) * np.finfo(np.float64).eps if svals.size else 0.0
    for c in range(2):
        if c >= svals.size or svals[c] <= tol:
            rank_deficient = True
            warnings.warn("input has fewer than 2 informative directions; "
                          "second component set to zero")
            break
        component = vt[c]
        if component[np.argmax(np.abs(component))] < 0:
            component = -component
        coords[:, c] = centered @ component
        ratios[c] = svals[c] ** 2 / total if total > 0 else 0.0
    return coords, ratios, rank_deficient


def write_projection(coords, ratios, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y"])
        for row in coords:
            w.writerow([repr(float(row[0])), repr(float(row[1]))])
        w.writerow(["# explained_variance_ratio",
                    " ".join(repr(float(r)) for r in ratios)])
