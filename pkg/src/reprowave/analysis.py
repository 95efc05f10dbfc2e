"""Reproducibility statistics over ensembles of trained models.

The deviation criterion for a set of values observed across runs is the
population standard deviation divided by the maximum absolute value
(defined as 0 when every value is 0, where the formula degenerates to
0/0). It is scale-invariant and bounded by 2.

Boxplot whiskers follow the convention median +/- 1.5 * IQR, quantiles
by linear interpolation between closest ranks. The testing-error model
RMSE/eps = (val_loss)^A * B is fit by ordinary least squares in log-log
space; the slope's two-sided p-value comes from a Wald test against the
t-distribution with n-2 degrees of freedom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sstats

from .containers import read_checkpoint
from .msnet import MultiScaleNet
from .policy import FixedOrder
from .rollout import recurrent_predict


def deviation(values_across_runs) -> float | np.ndarray:
    """Population std across runs over max |value| across runs.

    The run axis is axis 0; scalars in, scalar out; arrays in,
    elementwise array out. All-zero slots give 0.
    """
    stack = np.asarray(values_across_runs, dtype=np.float64)
    if stack.shape[0] < 2:
        raise ValueError("deviation needs values from at least 2 runs")
    std = stack.std(axis=0)
    peak = np.abs(stack).max(axis=0)
    if stack.ndim == 1:
        return float(std / peak) if peak > 0 else 0.0
    out = np.zeros_like(std)
    nonzero = peak > 0
    out[nonzero] = std[nonzero] / peak[nonzero]
    return out


def histogram_mode(values: np.ndarray, rule: str = "fd") -> tuple[float, int]:
    """Mode as the center of the tallest histogram bin; returns (mode, bins).

    Bin width follows Freedman-Diaconis by default ('sqrt' selects
    sqrt-count binning); degenerate spreads fall back to the median.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return lo, 1
    if rule == "fd":
        q1, q3 = np.quantile(values, [0.25, 0.75])
        width = 2.0 * (q3 - q1) / len(values) ** (1 / 3)
        n_bins = int(math.ceil((hi - lo) / width)) if width > 0 else int(math.sqrt(len(values)))
    elif rule == "sqrt":
        n_bins = int(math.sqrt(len(values)))
    else:
        raise ValueError(f"unknown binning rule {rule!r}")
    n_bins = max(1, n_bins)
    counts, edges = np.histogram(values, bins=n_bins, range=(lo, hi))
    k = int(np.argmax(counts))
    return float(0.5 * (edges[k] + edges[k + 1])), n_bins


@dataclass
class DeviationReport:
    values: np.ndarray  # flat per-element deviations
    per_kernel: dict[str, float]  # mean deviation per conv weight tensor
    mode: float
    n_bins: int
    fraction_zero: float
    quantiles: dict[str, float]
    grouping: str = "per-weight"

    @property
    def median(self) -> float:
        return self.quantiles["q50"]

    def summary_dict(self) -> dict:
        most = max(self.per_kernel, key=self.per_kernel.get) if self.per_kernel else None
        return {
            "n_values": int(self.values.size),
            "mode": self.mode,
            "histogram_bins": self.n_bins,
            "fraction_zero": self.fraction_zero,
            "quantiles": self.quantiles,
            "quantile_rule": "linear interpolation between closest ranks",
            "most_modified_kernel": most,
            "per_kernel_mean": self.per_kernel,
            "grouping": self.grouping,
        }


def _deviation_report(stacks: dict[str, np.ndarray], grouping: str) -> DeviationReport:
    fields = {name: deviation(stack) for name, stack in stacks.items()}
    flat = np.concatenate([f.ravel() for f in fields.values()])
    per_kernel = {
        name: float(f.mean()) for name, f in fields.items() if name.endswith(".weight")
    }
    mode, n_bins = histogram_mode(flat)
    quantiles = {
        f"q{int(q * 100)}": float(np.quantile(flat, q)) for q in (0.25, 0.5, 0.75, 0.8, 0.9)
    }
    return DeviationReport(
        values=flat,
        per_kernel=per_kernel,
        mode=mode,
        n_bins=n_bins,
        fraction_zero=float(np.mean(flat == 0.0)),
        quantiles=quantiles,
        grouping=grouping,
    )


def weight_deviation_report(checkpoint_paths) -> DeviationReport:
    """Per-parameter deviation across one checkpoint per run."""
    if len(checkpoint_paths) < 2:
        raise ValueError("need checkpoints from at least 2 runs")
    metas, arrays = [], []
    for p in checkpoint_paths:
        meta, arrs = read_checkpoint(p)
        metas.append(meta)
        arrays.append(arrs)
    hashes = {m["arch_hash"] for m in metas}
    if len(hashes) != 1:
        raise ValueError(f"architecture mismatch across checkpoints: {sorted(hashes)}")
    names = [n for n in arrays[0] if not n.startswith("adam.")]
    stacks = {
        name: np.stack([a[name].astype(np.float64) for a in arrays]) for name in names
    }
    return _deviation_report(stacks, "per-weight")


def featured_field_deviation(nets: list[MultiScaleNet], sample_frames: np.ndarray,
                             policy=None) -> dict[str, np.ndarray]:
    """Per-pixel deviation of each scale's output for one shared input.

    sample_frames: the 4 seed frames in physical units; each model
    normalizes by the std of the first frame (its own precision), and
    the captured quarter/half/full outputs are compared across models.
    """
    if len(nets) < 2:
        raise ValueError("need at least 2 models")
    policy = policy if policy is not None else FixedOrder()
    sample_frames = np.asarray(sample_frames)
    per_scale: list[list[np.ndarray]] = [[], [], []]
    for net in nets:
        scale = float(np.std(sample_frames[0]))
        x = (sample_frames / scale).astype(net.dtype)[None]
        _, feats = net.forward(x, policy, capture_featured=True)
        for si, f in enumerate(feats):
            per_scale[si].append(f[0, 0].astype(np.float64))
    names = ("quarter", "half", "full")
    return {name: deviation(np.stack(lst)) for name, lst in zip(names, per_scale)}


@dataclass
class BoxplotStats:
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    mean: float
    n: int
    outliers: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "median": self.median, "q1": self.q1, "q3": self.q3,
            "whisker_low": self.whisker_low, "whisker_high": self.whisker_high,
            "mean": self.mean, "n": self.n, "outliers": self.outliers,
            "whisker_rule": "median +/- 1.5 IQR",
        }


def boxplot_stats(values) -> BoxplotStats:
    vals = np.asarray(values, dtype=np.float64).ravel()
    if vals.size == 0:
        raise ValueError("boxplot of an empty set")
    q1, med, q3 = (float(v) for v in np.quantile(vals, [0.25, 0.5, 0.75]))
    iqr = q3 - q1
    lo, hi = med - 1.5 * iqr, med + 1.5 * iqr
    outliers = vals[(vals < lo) | (vals > hi)]
    return BoxplotStats(med, q1, q3, lo, hi, float(vals.mean()), int(vals.size),
                        [float(v) for v in outliers])


@dataclass
class RegressionFit:
    exponent_a: float
    prefactor_b: float
    r_squared: float
    p_value: float
    n_points: int
    recurrence: int | None = None

    def to_dict(self) -> dict:
        return {
            "A": self.exponent_a, "B": self.prefactor_b, "r_squared": self.r_squared,
            "p_value": self.p_value, "n_points": self.n_points, "r": self.recurrence,
        }


def loglog_regression(points, recurrence: int | None = None) -> RegressionFit:
    """OLS fit of y = x^A * B in log-log space with a Wald slope test."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("expected (n, 2) array of (x, y) pairs")
    if pts.shape[0] < 3:
        raise ValueError("regression needs at least 3 points")
    if np.any(pts <= 0) or not np.isfinite(pts).all():
        raise ValueError("log-log regression requires finite positive values")
    lx, ly = np.log(pts[:, 0]), np.log(pts[:, 1])
    if np.ptp(lx) == 0:
        raise ValueError("all x values identical; slope undefined")
    if np.ptp(ly) == 0:
        # flat data: slope exactly 0 and indistinguishable from 0
        return RegressionFit(0.0, float(np.exp(ly[0])), 0.0, 1.0, pts.shape[0], recurrence)
    res = sstats.linregress(lx, ly)
    if res.stderr == 0:
        p = 0.0 if res.slope != 0 else 1.0
    else:
        p = float(res.pvalue)
        if p < 1e-300:
            p = 0.0
    return RegressionFit(
        float(res.slope), float(np.exp(res.intercept)), float(res.rvalue**2),
        p, pts.shape[0], recurrence,
    )


def random_database_campaign(model_entries: list[dict], test_db, recurrence_set,
                             eps_amp: float, weights: tuple[float, float]) -> dict:
    """Recurrent testing of every model over every test simulation.

    model_entries: dicts with keys run, epoch, val_loss, predictor,
    is_best. For each recurrence in recurrence_set: per-model loss
    distribution over simulations, the pooled (val_loss, mean RMSE/eps)
    regression, and at each r the best-models worst/best loss ratio.
    """
    recurrences = sorted(recurrence_set)
    if not recurrences:
        raise ValueError("empty recurrence set")
    n_sims = test_db.n_sims("test")
    if n_sims == 0:
        raise ValueError("empty test database")
    max_r = recurrences[-1]

    per_model = []
    for entry in model_entries:
        losses = {r: [] for r in recurrences}
        errors = {r: [] for r in recurrences}
        for sim in range(n_sims):
            frames = test_db.sim_frames("test", sim)
            trace = recurrent_predict(entry["predictor"], frames, max_r, eps_amp,
                                      weights, model_id=str(entry["run"]))
            by_r = {s.r: s for s in trace.steps}
            for r in recurrences:
                step = by_r.get(r)
                if step is None or step.loss_total is None:
                    raise ValueError(
                        f"test simulations too short for recurrence {r} "
                        f"({test_db.root})"
                    )
                losses[r].append(step.loss_total)
                errors[r].append(step.rmse_eps)
        per_model.append({"entry": entry, "losses": losses, "errors": errors})

    out = {"recurrences": recurrences, "per_r": {}}
    for r in recurrences:
        rows = []
        points = []
        best_by_run: dict[str, float] = {}
        for pm in per_model:
            e = pm["entry"]
            mean_loss = float(np.mean(pm["losses"][r]))
            mean_rmse = float(np.mean(pm["errors"][r]))
            rows.append({
                "run": e["run"], "epoch": e["epoch"], "val_loss": e["val_loss"],
                "is_best": bool(e.get("is_best")),
                "mean_loss": mean_loss, "mean_rmse_eps": mean_rmse,
                "boxplot": boxplot_stats(pm["losses"][r]).to_dict(),
            })
            points.append((e["val_loss"], mean_rmse))
            if e.get("is_best"):
                best_by_run[e["run"]] = mean_loss
        block = {"models": rows}
        try:
            block["regression"] = loglog_regression(points, r).to_dict()
        except ValueError as exc:
            block["regression"] = {"error": str(exc)}
        if len(best_by_run) >= 2:
            worst = max(best_by_run.values())
            best = min(best_by_run.values())
            block["best_models_loss_ratio"] = worst / best if best > 0 else None
        out["per_r"][r] = block
    return out
