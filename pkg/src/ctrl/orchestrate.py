"""Stage runners that tie the library together around one working directory.

`prepare_workdir` materializes everything later stages need as plain files:

    config.json                  run settings
    schema.json                  schema with fitted vocabularies
    train.csv / val.csv / test.csv

so every stage can resume from disk. Stage outputs land in the same
directory: tokenizer.json, align.ckpt, curve.csv, gap.json (stage 1),
model.ckpt, history.csv (stage 2), report.json, ablation.csv/.json,
sweep.csv, embeddings.csv, projection.csv.

Checkpoints embed their own RunConfig, and loaders rebuild model topology
from that embedded copy, so a checkpoint remains readable after the
directory's config.json is edited.
"""

from __future__ import annotations

import dataclasses
import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .align import AlignmentModel, align_train
from .autodiff import DTensor
from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .config import RunConfig, load_config, save_config
from .data import (EncodedSplit, FeatureSchema, build_vocab, encode,
                   load_schema, read_csv_rows, save_schema, schema_hash,
                   split_by_time, write_csv_rows)
from .encoders import CollaborativeEncoder
from .exceptions import DataError, UsageError
from .finetune import (CtrHead, end_to_end_train, finetune, predict_scores)
from .metrics import EvalReport, auc, logloss, relaimpr
from .params import ParamStore, rng_for
from .prompt import PromptTemplate, Tokenizer, build_prompt
from .viz import tower_representations

ARM_NAMES = ("ctrl", "cosine_sim", "no_align", "end_to_end")
ENV_THREAD_CAP = "CTRL_ALIGN_THREADS"

SPLIT_FILES = ("train", "val", "test")


@dataclass
class Prepared:
    """Fitted schema plus the three encoded splits."""
    schema: FeatureSchema
    train: EncodedSplit
    val: EncodedSplit
    test: EncodedSplit

    @property
    def hash(self) -> str:
        return schema_hash(self.schema)

    def split(self, name: str) -> EncodedSplit:
        if name not in SPLIT_FILES:
            raise UsageError(f"split must be one of {SPLIT_FILES}, got '{name}'")
        return getattr(self, name)


def template_from(cfg: RunConfig) -> PromptTemplate:
    return PromptTemplate(variant=cfg.prompt_variant,
                          user_prefix=cfg.user_prefix,
                          item_prefix=cfg.item_prefix)


def prepare_workdir(out_dir, rows, schema: FeatureSchema,
                    cfg: RunConfig) -> Prepared:
    """Time-split raw rows, fit vocabularies on train, write all artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_rows, val_rows, test_rows = split_by_time(rows, cfg.split_ratios)
    fitted = schema if schema.fitted else build_vocab(train_rows, schema)
    save_schema(fitted, out / "schema.json")
    save_config(cfg, out / "config.json")
    for name, subset in zip(SPLIT_FILES, (train_rows, val_rows, test_rows)):
        write_csv_rows(subset, fitted, out / f"{name}.csv")
    return Prepared(fitted, encode(train_rows, fitted),
                    encode(val_rows, fitted), encode(test_rows, fitted))


def load_prepared(work_dir) -> tuple[RunConfig, Prepared]:
    work = Path(work_dir)
    cfg = load_config(work / "config.json")
    fitted = load_schema(work / "schema.json")
    if not fitted.fitted:
        raise DataError(f"{work / 'schema.json'}: vocabularies are not fitted; "
                        "run prepare first")
    splits = [encode(read_csv_rows(work / f"{n}.csv", fitted), fitted)
              for n in SPLIT_FILES]
    return cfg, Prepared(fitted, *splits)


def save_tokenizer(tok: Tokenizer, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(tok.to_dict(), fh, sort_keys=True)
        fh.write("\n")


def load_tokenizer(path) -> Tokenizer:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return Tokenizer.from_dict(json.load(fh))
    except OSError as e:
        raise DataError(f"cannot read tokenizer file: {e}") from e
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataError(f"malformed tokenizer file: {e}") from e


def fit_tokenizer(prepared: Prepared, cfg: RunConfig) -> Tokenizer:
    template = template_from(cfg)
    corpus = [build_prompt(r, prepared.schema, template)
              for r in prepared.train.raw_rows]
    return Tokenizer.fit(corpus, max_tokens=cfg.text.max_tokens)


def alignment_gap(model: AlignmentModel, split: EncodedSplit,
                  tokenizer: Tokenizer, batch_size: int = 256):
    """(paired, unpaired, gap) mean cross-tower similarity over a split.

    Scored with the model's own head: plain cosine for the cosine head, and
    the per-subspace mean of best-match cosines for the late interaction
    head. Both land in [-1, 1] with normalized sub-representations, so the
    paired-minus-unpaired gap is comparable across the two modes."""
    h_text, h_tab = tower_representations(model, split, tokenizer, batch_size)
    n = h_text.shape[0]
    if n < 2:
        raise UsageError("need at least 2 rows to compare paired vs unpaired")
    sims, _ = model.similarity_matrices(DTensor(h_text), DTensor(h_tab))
    scores = sims.data
    if model.cfg.align.similarity == "maxsim":
        scores = scores / model.cfg.align.m_subspaces
    paired = float(np.trace(scores) / n)
    unpaired = float((scores.sum() - np.trace(scores)) / (n * (n - 1)))
    return paired, unpaired, paired - unpaired


def align_stage(prepared: Prepared, cfg: RunConfig, out_dir,
                gap_split: str = "val") -> dict:
    """Stage 1: fit the tokenizer, contrastively train both towers, measure the
    paired-vs-unpaired cosine gap before and after, checkpoint everything."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tokenizer = fit_tokenizer(prepared, cfg)
    save_tokenizer(tokenizer, out / "tokenizer.json")
    store = ParamStore()
    model = AlignmentModel(store, prepared.schema, tokenizer.vocab_size, cfg)
    split = prepared.split(gap_split)
    pre = alignment_gap(model, split, tokenizer, cfg.align.batch_size)
    result = align_train(model, prepared.train, tokenizer, cfg.align,
                         cfg.seed, curve_path=out / "curve.csv")
    if result.steps == 0:
        raise UsageError("train split is smaller than one alignment batch; "
                         "lower align.batch_size")
    post = alignment_gap(model, split, tokenizer, cfg.align.batch_size)
    summary = {
        "steps": result.steps,
        "diverged": result.diverged,
        "final_loss": result.curve[-1][2] if result.curve else None,
        "pre_gap": pre[2],
        "post_gap": post[2],
        "gap_split": gap_split,
    }
    with open(out / "gap.json", "w", encoding="utf-8") as fh:
        json.dump({"pre": {"paired": pre[0], "unpaired": pre[1], "gap": pre[2]},
                   "post": {"paired": post[0], "unpaired": post[1], "gap": post[2]},
                   "split": gap_split}, fh, sort_keys=True)
        fh.write("\n")
    save_checkpoint(out / "align.ckpt", store, prepared.hash, cfg.to_dict(),
                    extra={"stage": "align", **summary})
    return summary


def load_alignment_model(prepared: Prepared, ckpt_path, tokenizer: Tokenizer):
    """Rebuild an AlignmentModel from its checkpoint's embedded config."""
    ckpt = load_checkpoint(ckpt_path, expect_schema_hash=prepared.hash)
    cfg = RunConfig.from_dict(ckpt.config)
    store = ParamStore()
    model = AlignmentModel(store, prepared.schema, tokenizer.vocab_size, cfg)
    restore_into(store, ckpt, "")
    return model, cfg


def _fresh_ctr_model(prepared: Prepared, cfg: RunConfig):
    """Collaborative tower + CTR head on their own store. Uses the same rng
    streams as AlignmentModel, so arms with and without stage 1 share the
    tabular tower's initialization."""
    store = ParamStore()
    enc = CollaborativeEncoder(store, prepared.schema, cfg.model,
                               rng_for(cfg.seed, "collab"))
    head = CtrHead(store, enc.out_dim, rng_for(cfg.seed, "ctr"))
    return store, enc, head


def finetune_stage(prepared: Prepared, cfg: RunConfig, out_dir,
                   init_ckpt=None) -> "FinetuneResult":
    """Stage 2: supervised training of the collaborative tower and CTR head.
    `init_ckpt` warm-starts the tower from a stage-1 checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store, enc, head = _fresh_ctr_model(prepared, cfg)
    if init_ckpt is not None:
        ckpt = load_checkpoint(init_ckpt, expect_schema_hash=prepared.hash)
        ckpt_model = RunConfig.from_dict(ckpt.config).model
        if ckpt_model != cfg.model:
            raise UsageError(
                f"{init_ckpt}: tower settings in the checkpoint "
                f"({ckpt_model}) do not match the requested ones ({cfg.model})")
        n = restore_into(store, ckpt, "collab.")
        if n == 0:
            raise UsageError(f"{init_ckpt}: no tower tensors to warm-start from")
    result = finetune(enc, head, prepared.train, prepared.val, cfg.finetune,
                      cfg.seed, history_path=out / "history.csv")
    save_checkpoint(out / "model.ckpt", store, prepared.hash, cfg.to_dict(),
                    extra={"stage": "finetune",
                           "init": str(init_ckpt) if init_ckpt else "",
                           "best_epoch": result.best_epoch,
                           "best_val_auc": result.best_val_auc,
                           "diverged": result.diverged})
    return result


def end_to_end_stage(prepared: Prepared, cfg: RunConfig,
                     out_dir) -> "FinetuneResult":
    """Single-stage arm: supervised loss plus weighted contrastive loss,
    trained jointly from scratch."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tokenizer = fit_tokenizer(prepared, cfg)
    save_tokenizer(tokenizer, out / "tokenizer.json")
    store = ParamStore()
    model = AlignmentModel(store, prepared.schema, tokenizer.vocab_size, cfg)
    head = CtrHead(store, model.collab.out_dim, rng_for(cfg.seed, "ctr"))
    result = end_to_end_train(model, head, prepared.train, prepared.val,
                              tokenizer, cfg.finetune, cfg.seed,
                              history_path=out / "history.csv")
    save_checkpoint(out / "model.ckpt", store, prepared.hash, cfg.to_dict(),
                    extra={"stage": "end_to_end",
                           "lambda_ccl": cfg.finetune.lambda_ccl,
                           "best_epoch": result.best_epoch,
                           "best_val_auc": result.best_val_auc,
                           "diverged": result.diverged})
    return result


def evaluate_ckpt(prepared: Prepared, ckpt_path, split: str = "test",
                  base_auc: float = None, base_name: str = None,
                  report_path=None) -> EvalReport:
    """Deployment-style evaluation: only the collaborative tower and CTR head
    are rebuilt from the checkpoint; text-tower tensors are ignored."""
    ckpt = load_checkpoint(ckpt_path, expect_schema_hash=prepared.hash)
    cfg = RunConfig.from_dict(ckpt.config)
    store, enc, head = _fresh_ctr_model(prepared, cfg)
    missing = [n for n in store.names() if n not in ckpt.params]
    if missing:
        raise UsageError(f"{ckpt_path}: checkpoint does not cover the full "
                         f"tower + head (missing {missing[0]}, ...); "
                         "is this a stage-1 checkpoint?")
    restore_into(store, ckpt, "")
    data = prepared.split(split)
    scores = predict_scores(enc, head, data)
    rel = None
    if base_auc is not None:
        rel = relaimpr(auc(scores, data.labels), base_auc)
    report = EvalReport(auc=auc(scores, data.labels),
                        logloss=logloss(scores, data.labels),
                        n_examples=data.n, seed=cfg.seed,
                        relaimpr_pct=rel, base_name=base_name)
    if report_path is not None:
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
            fh.write("\n")
    return report


def _arm_config(arm: str, cfg: RunConfig) -> RunConfig:
    if arm == "cosine_sim":
        return replace(cfg, align=replace(cfg.align, similarity="cosine"))
    if arm == "ctrl":
        return replace(cfg, align=replace(cfg.align, similarity="maxsim"))
    return cfg


def run_arm(arm: str, prepared: Prepared, cfg: RunConfig, out_dir) -> EvalReport:
    """One ablation arm end to end; artifacts land under out_dir."""
    if arm not in ARM_NAMES:
        raise UsageError(f"unknown arm '{arm}', expected one of {ARM_NAMES}")
    arm_cfg = _arm_config(arm, cfg)
    out = Path(out_dir)
    if arm in ("ctrl", "cosine_sim"):
        align_stage(prepared, arm_cfg, out)
        finetune_stage(prepared, arm_cfg, out, init_ckpt=out / "align.ckpt")
    elif arm == "no_align":
        finetune_stage(prepared, arm_cfg, out)
    else:
        end_to_end_stage(prepared, arm_cfg, out)
    return evaluate_ckpt(prepared, out / "model.ckpt",
                         report_path=out / "report.json")


def run_ablation(prepared: Prepared, cfg: RunConfig, out_dir,
                 arms=ARM_NAMES) -> dict:
    """All requested arms with a shared stage-2 recipe; scores are reported
    as lift over the no-alignment baseline when it is present."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arms = tuple(arms)
    for arm in arms:
        if arm not in ARM_NAMES:
            raise UsageError(f"unknown arm '{arm}', expected one of {ARM_NAMES}")
    stage2 = {arm: dataclasses.asdict(_arm_config(arm, cfg).finetune)
              for arm in arms}
    if len({json.dumps(s, sort_keys=True) for s in stage2.values()}) != 1:
        raise UsageError("ablation arms disagree on stage-2 settings; "
                         "the comparison would be confounded")
    reports = {arm: run_arm(arm, prepared, cfg, out / arm) for arm in arms}

    base = reports.get("no_align")
    rows = []
    for arm in arms:
        rep = reports[arm]
        rel = None
        if base is not None and arm != "no_align":
            if base.auc > 0.5:
                rel = relaimpr(rep.auc, base.auc)
            else:
                warnings.warn("baseline AUC is not above 0.5; lift over it "
                              "is undefined and left blank")
        rows.append({"arm": arm, "auc": rep.auc, "logloss": rep.logloss,
                     "relaimpr_vs_no_align_pct": rel})

    with open(out / "ablation.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("arm,auc,logloss,relaimpr_vs_no_align_pct\n")
        for r in rows:
            rel = "" if r["relaimpr_vs_no_align_pct"] is None \
                else repr(r["relaimpr_vs_no_align_pct"])
            fh.write(f"{r['arm']},{r['auc']!r},{r['logloss']!r},{rel}\n")
    blob = {"seed": cfg.seed, "arms": rows}
    with open(out / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump(blob, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return blob


def _worker_cap(requested: int) -> int:
    cap = os.environ.get(ENV_THREAD_CAP)
    if cap is None or cap == "":
        return requested
    try:
        cap = int(cap)
    except ValueError:
        raise UsageError(f"{ENV_THREAD_CAP} must be an integer, got {cap!r}") \
            from None
    if cap < 1:
        raise UsageError(f"{ENV_THREAD_CAP} must be >= 1, got {cap}")
    return min(requested, cap)


def _sweep_cell(work_dir: str, cell_dir: str, cfg_dict: dict,
                tau: float, batch: int) -> dict:
    """One sweep cell, self-contained so it can run in a child process."""
    cfg = RunConfig.from_dict(cfg_dict)
    cfg = replace(cfg, align=replace(cfg.align, temperature=tau,
                                     batch_size=batch))
    _, prepared = load_prepared(work_dir)
    cell = Path(cell_dir)
    align_stage(prepared, cfg, cell)
    finetune_stage(prepared, cfg, cell, init_ckpt=cell / "align.ckpt")
    report = evaluate_ckpt(prepared, cell / "model.ckpt",
                           report_path=cell / "report.json")
    return {"tau": tau, "batch": batch,
            "auc": report.auc, "logloss": report.logloss}


def run_sweep(work_dir, cfg: RunConfig, taus, batch_sizes, out_dir,
              parallel: int = 1) -> tuple[list, list]:
    """Temperature x batch-size grid, each cell a full stage-1 + stage-2 run.

    Cells run in grid order (temperature outer loop). Failed cells are
    recorded and skipped rather than aborting the grid. Returns
    (rows, failures) and writes sweep.csv (+ sweep_failures.json if any).
    """
    if parallel < 1:
        raise UsageError("--parallel must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = []
    for tau in taus:
        for batch in batch_sizes:
            cell = (float(tau), int(batch))
            if cell in grid:
                warnings.warn(f"duplicate sweep cell (tau={cell[0]:g}, "
                              f"batch={cell[1]}) ignored")
                continue
            grid.append(cell)
    if not grid:
        raise UsageError("sweep grid is empty")

    def cell_dir(tau, batch):
        return str(out / f"cell_tau{tau:g}_bs{batch}")

    rows, failures = [], []
    workers = _worker_cap(min(parallel, len(grid)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [(tau, batch,
                     pool.submit(_sweep_cell, str(work_dir),
                                 cell_dir(tau, batch), cfg.to_dict(),
                                 tau, batch))
                    for tau, batch in grid]
            for tau, batch, fut in futs:
                try:
                    rows.append(fut.result())
                except Exception as e:  # noqa: BLE001 - cell isolation
                    failures.append({"tau": tau, "batch": batch,
                                     "error": f"{type(e).__name__}: {e}"})
    else:
        for tau, batch in grid:
            try:
                rows.append(_sweep_cell(str(work_dir), cell_dir(tau, batch),
                                        cfg.to_dict(), tau, batch))
            except Exception as e:  # noqa: BLE001 - cell isolation
                failures.append({"tau": tau, "batch": batch,
                                 "error": f"{type(e).__name__}: {e}"})

    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("tau,batch,auc,logloss\n")
        for r in rows:
            fh.write(f"{r['tau']:g},{r['batch']},{r['auc']!r},"
                     f"{r['logloss']!r}\n")
    if failures:
        warnings.warn(f"{len(failures)} sweep cell(s) failed; see "
                      f"{out / 'sweep_failures.json'}")
        with open(out / "sweep_failures.json", "w", encoding="utf-8") as fh:
            json.dump(failures, fh, indent=2)
            fh.write("\n")
    return rows, failures
