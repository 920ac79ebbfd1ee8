"""Chronological splits, classification/regression metrics, permutation
importance, and the consolidated run-matrix report."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .graphbuild import feature_location
from .preprocess import CollectionDailySeries


@dataclass
class SplitRange:
    lo: int
    hi: int  # inclusive

    def contains(self, day: int) -> bool:
        return self.lo <= day <= self.hi


@dataclass
class SplitPlan:
    """Per-collection chronological train/validation/test day ranges."""

    ranges: dict[str, dict[str, SplitRange]]
    warnings: list[str] = field(default_factory=list)

    def global_train_end(self) -> int:
        return min(r["train"].hi for r in self.ranges.values())


def make_split(series: dict[str, CollectionDailySeries],
               ratios=(0.7, 0.15, 0.15), history: int = 14, step: int = 1,
               ) -> SplitPlan:
    """Chronological per-collection cut. A series too short to yield at
    least one sample per split is excluded with a warning."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    r_train, r_val, _ = ratios
    ranges: dict[str, dict[str, SplitRange]] = {}
    warnings: list[str] = []
    for coll in sorted(series):
        s = series[coll]
        n = s.last_day - s.first_day + 1
        train_hi = s.first_day + int(math.floor(n * r_train)) - 1
        val_hi = s.first_day + int(math.floor(n * (r_train + r_val))) - 1
        test_hi = s.last_day
        # each split must admit at least one (T, T+step) pair with history
        if train_hi - step < s.first_day + history or val_hi - step <= train_hi \
                or test_hi - step <= val_hi:
            warnings.append(f"{coll}: series too short for split ({n} days)")
            continue
        ranges[coll] = {
            "train": SplitRange(s.first_day, train_hi),
            "val": SplitRange(train_hi + 1, val_hi),
            "test": SplitRange(val_hi + 1, test_hi),
        }
    return SplitPlan(ranges, warnings)


def split_samples(plan: SplitPlan, split: str,
                  series: dict[str, CollectionDailySeries],
                  collection_index: dict[str, int],
                  history: int, step: int):
    """(t_end, collection index, label) samples: both T and T+step must lie
    inside the split's range and the window must be covered by the series."""
    samples = []
    for coll in sorted(plan.ranges):
        if coll not in collection_index or coll not in series:
            continue
        s = series[coll]
        rng_ = plan.ranges[coll][split]
        ci = collection_index[coll]
        for t in range(max(rng_.lo, s.first_day + history), rng_.hi - step + 1):
            if not rng_.contains(t + step):
                continue
            label = 1.0 if s.price(t + step) - s.price(t) > 0 else 0.0
            samples.append((t, ci, label))
    return samples


def metrics_classification(predictions, labels):
    """(ACC, MCC) at threshold 0.5; MCC is 0 when its denominator is 0."""
    predictions = np.asarray(predictions, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if predictions.shape != labels.shape:
        raise ValueError(f"shape mismatch {predictions.shape} vs {labels.shape}")
    if len(labels) == 0:
        return 0.0, 0.0
    pred = (predictions >= 0.5).astype(float)
    tp = float(np.sum((pred == 1) & (labels == 1)))
    tn = float(np.sum((pred == 0) & (labels == 0)))
    fp = float(np.sum((pred == 1) & (labels == 0)))
    fn = float(np.sum((pred == 0) & (labels == 1)))
    acc = (tp + tn) / len(labels)
    denom = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    mcc = 0.0 if denom == 0 else (tp * tn - fp * fn) / denom
    return acc, mcc


def metrics_regression(predictions, targets):
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if predictions.shape != targets.shape:
        raise ValueError(f"shape mismatch {predictions.shape} vs {targets.shape}")
    err = predictions - targets
    return float(np.mean(np.abs(err))), float(np.mean(err ** 2))


def check_no_leakage(plan: SplitPlan, samples, step: int,
                     collections: list[str]) -> list:
    """Train samples whose label day crosses the train boundary (must be
    empty for a correct split). Samples carry collection indices into
    `collections`."""
    bad = []
    for t, ci, _ in samples:
        coll = collections[ci]
        if coll in plan.ranges and t + step > plan.ranges[coll]["train"].hi:
            bad.append((coll, t))
    return bad


# ------------------------------------------------------- feature importance

def _permute_node_block(prepared, attr, col, rng):
    """Copy of prepared days with one feature column shuffled jointly
    across every (entity, day) cell of the evaluation snapshots."""
    import copy
    days = sorted(prepared)
    stacked = np.concatenate([getattr(prepared[d], attr)[:, col] for d in days])
    perm = rng.permutation(stacked.shape[0])
    stacked = stacked[perm]
    out = {}
    offset = 0
    for d in days:
        p = copy.copy(prepared[d])
        arr = getattr(p, attr).copy()
        n = arr.shape[0]
        arr[:, col] = stacked[offset:offset + n]
        offset += n
        setattr(p, attr, arr)
        out[d] = p
    return out


def permutation_importance(model, prepared, groups, feature: str, seed: int,
                           repeats: int = 5) -> float:
    """Importance = baseline ACC minus mean ACC over `repeats` shuffles of
    the named feature column; embedding blocks permute as whole vectors."""
    embed_dim = (model.static_norm.shape[1] - 1) // 2
    block, col = feature_location(feature, embed_dim)  # raises on unknown name
    probs, labels = model.predict_samples(prepared, groups)
    baseline, _ = metrics_classification(probs, labels)
    rng = np.random.default_rng(seed)
    accs = []
    for _ in range(repeats):
        if block == "wallet_dynamic":
            shuffled = _permute_node_block(prepared, "wallet_x", col, rng)
            probs, labels = model.predict_samples(shuffled, groups)
        elif block == "collection_dynamic":
            shuffled = _permute_node_block(prepared, "coll_x", col, rng)
            probs, labels = model.predict_samples(shuffled, groups)
        else:  # collection_static: permute the block rows across collections
            static = model.static_norm.copy()
            perm = rng.permutation(static.shape[0])
            static[:, col] = static[perm, col]
            probs, labels = model.predict_samples(prepared, groups,
                                                  static_override=static)
        acc, _ = metrics_classification(probs, labels)
        accs.append(acc)
    return baseline - float(np.mean(accs))


# --------------------------------------------------------------- run matrix

@dataclass
class ReportRow:
    task: str       # collection | token
    step: int
    ablation: str
    seed: int
    acc: float
    mcc: float
    mae: float
    mse: float
    n_samples: int


REPORT_HEADER = "task,step,ablation,seed,acc,mcc,mae,mse,n_samples"


def write_report_csv(path, rows: list[ReportRow]):
    with open(path, "w") as f:
        f.write(REPORT_HEADER + "\n")
        for r in rows:
            f.write(f"{r.task},{r.step},{r.ablation},{r.seed},{r.acc!r},"
                    f"{r.mcc!r},{r.mae!r},{r.mse!r},{r.n_samples}\n")


def read_report_csv(lines) -> list[ReportRow]:
    rows = []
    for line in lines:
        line = line.strip()
        if not line or line.startswith("task,"):
            continue
        task, step, abl, seed, acc, mcc, mae, mse, n = line.split(",")
        rows.append(ReportRow(task, int(step), abl, int(seed), float(acc),
                              float(mcc), float(mae), float(mse), int(n)))
    return rows


def summarize_report(rows: list[ReportRow]) -> str:
    """Mean +/- std over seeds per (task, step, ablation), markdown table."""
    cells: dict[tuple, list[ReportRow]] = {}
    for r in rows:
        cells.setdefault((r.task, r.step, r.ablation), []).append(r)
    out = ["| task | step | ablation | seeds | ACC | MCC | MAE | MSE |",
           "|---|---|---|---|---|---|---|---|"]
    for key in sorted(cells):
        group = cells[key]

        def ms(vals):
            return f"{np.mean(vals):.4f} +/- {np.std(vals):.4f}"

        out.append("| {} | {} | {} | {} | {} | {} | {} | {} |".format(
            key[0], key[1], key[2], len(group),
            ms([r.acc for r in group]), ms([r.mcc for r in group]),
            ms([r.mae for r in group]), ms([r.mse for r in group])))
    return "\n".join(out)


def run_matrix(cells, runner) -> list[ReportRow]:
    """Evaluate `runner(step, ablation, seed)` over the grid; the runner
    returns (task, acc, mcc, mae, mse, n)."""
    rows = []
    for step, ablation, seed in cells:
        task, acc, mcc, mae, mse, n = runner(step, ablation, seed)
        rows.append(ReportRow(task, step, ablation, seed, acc, mcc, mae, mse, n))
    return rows
