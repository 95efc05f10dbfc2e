"""Auto-regressive inference with energy-preserving correction.

A trace starts from 4 ground-truth seed frames (physical units). Each
recurrence r normalizes the current window by the population std of its
first frame, predicts the next frame, de-normalizes, shifts the result
so its spatial mean equals the mean of the first seed frame (the
conserved quantity in a closed reflecting domain), and slides the
window. Recurrence 0 is the plain single-prediction mode.

Losses are evaluated in the step's normalized space; RMSE is evaluated
in physical units and reported relative to the pulse amplitude.

The model is any callable mapping a physical (4, n, n) window to a
physical (n, n) next frame; NetPredictor adapts a trained network
(normalization inside, summation policy fixed by default).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataset import PULSE_AMPLITUDE, make_benchmark
from .lbm import SimConfig, frames_to_array, run_simulation
from .msnet import LOSS_WEIGHTS, MultiScaleNet, loss_terms
from .policy import FixedOrder


class RolloutError(RuntimeError):
    pass


def energy_correction(pred: np.ndarray, reference_mean: float) -> np.ndarray:
    """Uniform shift moving the field's spatial mean to reference_mean."""
    return pred + (reference_mean - float(np.mean(pred)))


def rmse(pred: np.ndarray, truth: np.ndarray, eps_amp: float = PULSE_AMPLITUDE) -> float:
    """Root-mean-square error in physical units, relative to the pulse amplitude."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    diff = pred - truth
    return float(np.sqrt(np.mean(diff * diff))) / eps_amp


@dataclass
class TraceStep:
    r: int
    frame_index: int  # stored-frame index the prediction corresponds to
    prediction: np.ndarray
    reference: np.ndarray | None
    loss_total: float | None
    loss_l2: float | None
    loss_gdl: float | None
    rmse_eps: float | None
    scale: float  # normalization scale of this step's window
    mean_shift: float  # energy-correction shift applied


@dataclass
class RolloutTrace:
    model_id: str
    scenario: str
    reference_mean: float
    steps: list[TraceStep]
    aborted: bool = False

    def metric(self, name: str) -> list:
        return [getattr(s, name) for s in self.steps]


class NetPredictor:
    """Physical-in/physical-out adapter around a MultiScaleNet."""

    def __init__(self, net: MultiScaleNet, policy=None, model_id: str = ""):
        self.net = net
        self.policy = policy if policy is not None else FixedOrder()
        self.model_id = model_id

    def __call__(self, window: np.ndarray) -> np.ndarray:
        scale = float(np.std(window[0]))
        if not scale > 0:
            raise RolloutError("window's first frame is all-quiet; cannot normalize")
        x = (window / scale).astype(self.net.dtype)[None]
        pred = self.net.forward(x, self.policy)[0, 0]
        return pred.astype(window.dtype) * scale


def recurrent_predict(model, frames: np.ndarray, n_recurrences: int,
                      eps_amp: float = PULSE_AMPLITUDE,
                      weights: tuple[float, float] = LOSS_WEIGHTS,
                      model_id: str = "", scenario: str = "") -> RolloutTrace:
    """Roll the model forward n_recurrences+1 steps from frames[0:4].

    frames holds the ground-truth stored frames; references beyond the
    available truth are simply absent from the trace metrics.
    """
    frames = np.asarray(frames)
    if n_recurrences < 0:
        raise ValueError("n_recurrences must be >= 0")
    if frames.ndim != 3 or frames.shape[0] < 4:
        raise ValueError(f"need at least 4 seed frames, got shape {frames.shape}")
    window = [frames[i] for i in range(4)]
    reference_mean = float(np.mean(window[0]))
    trace = RolloutTrace(model_id, scenario, reference_mean, [])
    w_field, w_grad = weights

    for r in range(n_recurrences + 1):
        scale = float(np.std(window[0]))
        pred = model(np.stack(window))
        if not np.isfinite(pred).all():
            trace.aborted = True
            break
        shift = reference_mean - float(np.mean(pred))
        corrected = pred + shift

        idx = 4 + r
        total = l2 = gdl = err = None
        reference = None
        if idx < frames.shape[0]:
            reference = frames[idx]
            l2, gdl = loss_terms(corrected / scale, reference / scale)
            total = w_field * l2 + w_grad * gdl
            err = rmse(corrected, reference, eps_amp)
        trace.steps.append(
            TraceStep(r, idx, corrected, reference, total, l2, gdl, err, scale, shift)
        )
        window = window[1:] + [corrected]
    return trace


def write_trace_csv(trace: RolloutTrace, path) -> None:
    with open(path, "w") as fh:
        fh.write("r,frame_index,loss_total,loss_l2,loss_gdl,rmse_eps,scale,mean_shift\n")
        for s in trace.steps:
            row = [s.r, s.frame_index, s.loss_total, s.loss_l2, s.loss_gdl,
                   s.rmse_eps, s.scale, s.mean_shift]
            fh.write(",".join("" if v is None else repr(v) for v in row) + "\n")


def benchmark_truth(kind: str, config: SimConfig, n_recurrences: int) -> np.ndarray:
    """Ground-truth frame stack long enough for the requested rollout."""
    needed = (4 + n_recurrences) * config.timestep_jump
    cfg = replace(config, total_timesteps=max(config.total_timesteps, needed))
    frames, _ = frames_to_array(run_simulation(cfg, make_benchmark(kind, cfg), "double"))
    return frames


def extrema_ratio(traces: list[RolloutTrace], metric: str = "loss_total") -> list[float | None]:
    """Across-model max/min of a metric at each recurrence."""
    if len(traces) < 2:
        raise ValueError("extrema ratio needs at least 2 traces")
    n = min(len(t.steps) for t in traces)
    out = []
    for i in range(n):
        vals = [getattr(t.steps[i], metric) for t in traces]
        if any(v is None for v in vals):
            out.append(None)
            continue
        lo = min(vals)
        out.append(max(vals) / lo if lo > 0 else None)
    return out


def benchmark_suite(predictors: dict[str, object], kinds, config: SimConfig,
                    n_recurrences: int, eps_amp: float = PULSE_AMPLITUDE,
                    weights: tuple[float, float] = LOSS_WEIGHTS) -> dict:
    """Rollout every model on every benchmark; collect spread statistics."""
    results = {}
    for kind in kinds:
        frames = benchmark_truth(kind, config, n_recurrences)
        traces = [
            recurrent_predict(fn, frames, n_recurrences, eps_amp, weights,
                              model_id=mid, scenario=kind)
            for mid, fn in predictors.items()
        ]
        block = {"traces": traces}
        if len(traces) >= 2:
            block["loss_ratio"] = extrema_ratio(traces, "loss_total")
            n = min(len(t.steps) for t in traces)
            band = []
            for i in range(n):
                vals = [t.steps[i].rmse_eps for t in traces]
                band.append((None, None) if any(v is None for v in vals)
                            else (min(vals), max(vals)))
            block["rmse_band"] = band
        results[kind] = block
    return results


def dump_trace_frames(trace: RolloutTrace, path, config: SimConfig) -> None:
    """Optional binary dump of the predicted fields of one trace."""
    from .containers import write_frame_container

    frames = np.stack([s.prediction for s in trace.steps])
    steps = [s.frame_index * config.timestep_jump for s in trace.steps]
    write_frame_container(
        Path(path), frames, steps,
        {"model": trace.model_id, "scenario": trace.scenario, "kind": "rollout"},
    )
