"""Temperature x batch-size sweep over the alignment stage.

Every cell runs stage 1 with its own (tau, batch) pair, fine-tunes from the
aligned checkpoint, and reports test AUC / logloss. Failed cells are
recorded in sweep_failures.json instead of aborting the grid.

    python scripts/sweep_alignment.py --out /tmp/sweep --rows 1024
"""

import argparse
from pathlib import Path

from ctrl.config import (AlignConfig, FinetuneConfig, ModelConfig, RunConfig,
                         TextConfig)
from ctrl.orchestrate import prepare_workdir, run_sweep
from ctrl.synthetic import SyntheticSpec, generate

DEFAULT_TAUS = (0.1, 0.3, 0.7, 1.0, 2.0)
DEFAULT_BATCHES = (32, 128)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--rows", type=int, default=1024)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--taus", type=float, nargs="+", default=DEFAULT_TAUS)
    ap.add_argument("--batches", type=int, nargs="+", default=DEFAULT_BATCHES)
    ap.add_argument("--parallel", type=int, default=1,
                    help="worker processes (capped by CTRL_ALIGN_THREADS)")
    args = ap.parse_args()

    rows, schema, _ = generate(SyntheticSpec(
        n_rows=args.rows, n_fields=6, vocab_size=40, rule="logistic",
        flip_noise=0.1, seed=7, history_len=3))
    cfg = RunConfig(
        seed=args.seed,
        model=ModelConfig(backbone="mlp", d=8, hidden=(32, 16), attn_layers=1,
                          attn_heads=2, attn_head_dim=4, cross_layers=2),
        text=TextConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32,
                        max_tokens=64),
        align=AlignConfig(batch_size=64, epochs=3, warmup_steps=10,
                          start_lr=1e-5, peak_lr=1e-3, m_subspaces=2,
                          d_proj=32),
        finetune=FinetuneConfig(lr=1e-2, batch_size=64, epochs=4, patience=4),
    )
    out = Path(args.out)
    prepare_workdir(out / "work", rows, schema, cfg)
    cells, failures = run_sweep(out / "work", cfg, args.taus, args.batches,
                                out, parallel=args.parallel)

    print(f"{'tau':>5} {'batch':>6} {'auc':>8} {'logloss':>9}")
    for c in cells:
        print(f"{c['tau']:>5g} {c['batch']:>6d} {c['auc']:>8.4f} "
              f"{c['logloss']:>9.4f}")
    if failures:
        print(f"{len(failures)} cell(s) failed; see sweep_failures.json")
    print(f"\nfull grid in {out / 'sweep.csv'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
