"""Seeded training runs behind the learning and ablation checks.

Every run trains on folds 0-1 of the default toy dataset and scores fold 2 after the
last epoch. Results are appended as JSON lines so an interrupted sweep resumes where
it stopped::

    python -m mffaseg.experiments --out results/experiments.jsonl
"""
from __future__ import annotations

import argparse
import json
import logging
import statistics
import time
from pathlib import Path

from .metrics import EvalReport, evaluate_video
from .toydata import ToyConfig, generate_videos
from .train import TrainConfig, train

log = logging.getLogger(__name__)

VARIANTS: dict[str, dict] = {
    "tab+sab": {},
    "sab": {"aggregation": "sab"},
    "none": {"aggregation": "none"},
    "no_first_loss": {"first_loss": False},
}
SEEDS = (0, 1, 2)
EPOCHS = 30
MARGIN = 0.005
# (better, worse) pairs that should be ordered by held-out mDSC
ORDERINGS = (("tab+sab", "sab"), ("sab", "none"), ("tab+sab", "no_first_loss"))


def held_out_mdsc(model, videos) -> float:
    report = EvalReport()
    for v in videos:
        report = report.merge(evaluate_video(model, v))
    return report.mdsc


def run_one(variant: str, seed: int, epochs: int = EPOCHS, toy_seed: int = 0, eval_every: int = 5) -> dict:
    cfg = TrainConfig.from_dict({"epochs": epochs, "seed": seed, **VARIANTS[variant]})
    videos, _ = generate_videos(ToyConfig(), toy_seed)
    train_v = [v for v in videos if v.fold in cfg.train_folds]
    eval_v = [v for v in videos if v.fold in cfg.eval_folds]
    curve: dict[int, float] = {}
    losses: list[float] = []
    train_seconds = 0.0
    start = time.perf_counter()

    def on_epoch(epoch, model, rec):
        nonlocal train_seconds
        train_seconds += time.perf_counter() - start_epoch[0]
        losses.append(rec["loss_total"])
        if (epoch + 1) % eval_every == 0 or epoch + 1 == epochs:
            curve[epoch + 1] = held_out_mdsc(model, eval_v)
            log.info("%s seed %d epoch %d mDSC %.4f", variant, seed, epoch + 1, curve[epoch + 1])
        start_epoch[0] = time.perf_counter()

    start_epoch = [start]
    train(cfg, train_v, on_epoch=on_epoch)
    return {"variant": variant, "seed": seed, "epochs": epochs, "final_mdsc": curve[epochs],
            "mdsc_curve": curve, "loss_curve": losses, "train_seconds": train_seconds,
            "wall_seconds": time.perf_counter() - start}


def load_results(path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        return []
    return [json.loads(line) for line in p.read_text(encoding="utf-8").splitlines() if line.strip()]


def run_sweep(path, variants=tuple(VARIANTS), seeds=SEEDS, epochs: int = EPOCHS) -> list[dict]:
    done = {(r["variant"], r["seed"]) for r in load_results(path) if r["epochs"] == epochs}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    for seed in seeds:
        for variant in variants:
            if (variant, seed) in done:
                continue
            rec = run_one(variant, seed, epochs)
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
    return load_results(path)


def medians(results: list[dict], key: str = "final_mdsc") -> dict[str, float]:
    by: dict[str, list[float]] = {}
    for r in results:
        by.setdefault(r["variant"], []).append(r[key])
    return {v: statistics.median(xs) for v, xs in by.items()}


def check_orderings(results: list[dict]) -> list[dict]:
    """One row per ordering: the two medians, the margin, and a verdict.

    ``ok`` means better >= worse + margin; ``reseed`` means the medians are ordered but
    closer than the margin; ``violated`` means the order is reversed.
    """
    med = medians(results)
    rows = []
    for better, worse in ORDERINGS:
        if better not in med or worse not in med:
            rows.append({"better": better, "worse": worse, "verdict": "missing"})
            continue
        diff = med[better] - med[worse]
        verdict = "ok" if diff >= MARGIN else ("reseed" if diff >= 0 else "violated")
        rows.append({"better": better, "worse": worse, "margin": diff, "verdict": verdict,
                     "medians": (med[better], med[worse])})
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m mffaseg.experiments")
    ap.add_argument("--out", default="results/experiments.jsonl")
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    ap.add_argument("--seeds", nargs="+", type=int, default=list(SEEDS))
    ap.add_argument("--epochs", type=int, default=EPOCHS)
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    results = run_sweep(a.out, a.variants, a.seeds, a.epochs)
    for variant, m in sorted(medians(results).items()):
        print(f"{variant:14s} median mDSC {m:.4f}")
    for row in check_orderings(results):
        print(row)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
