"""Multi-run ensemble training.

Every run of an ensemble starts from the same seed: identical He init,
identical batch order and augmentation draws. Under the fixed summation
policy the runs are therefore byte-identical; under the shuffled policy
they differ only through each run's private entropy stream — exactly
the quantity under study.

Per-epoch randomness is stateless: epoch e draws from
SeedSequence(seed, spawn_key=(1, e)) (weight init uses spawn_key=(0,)),
so resuming from a checkpoint replays the remaining epochs bit-exactly
under the fixed policy without serializing generator state.

Validation always runs fixed-order, so reported validation losses
differ across runs only through the trained weights.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .containers import read_checkpoint, write_checkpoint
from .dataset import Database, Datapoint, augment_rotate, normalize
from .msnet import LOSS_WEIGHTS, MultiScaleNet, loss_and_grad
from .optim import Adam, NonFiniteGradientError, PlateauScheduler
from .policy import FixedOrder, make_policy
from .precision import dtype_of


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1500
    batch_size: int = 32
    checkpoint_interval: int = 125
    precision: str = "single"
    n_runs: int = 1
    seed: int = 0
    policy: str = "shuffled"
    lr: float = 1e-4
    lr_factor: float = 0.98
    lr_patience: int = 10
    lr_threshold: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_weights: tuple[float, float] = LOSS_WEIGHTS

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_interval < 1:
            raise ValueError("epochs, batch_size, checkpoint_interval must be >= 1")
        if self.precision not in ("single", "double"):
            raise ValueError(f"unknown precision {self.precision!r}")


@dataclass
class RunRecord:
    run_id: str
    policy: str
    entropy_ref: str
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    checkpoints: list[dict] = field(default_factory=list)
    best: dict | None = None
    aborted: bool = False


def init_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0,))))


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(1, epoch)))
    )


def _assemble(db: Database, split: str, indices, dtype, rng=None):
    """Stack datapoints into (B, 4, n, n) / (B, 1, n, n) normalized batches."""
    xs, ts = [], []
    for j in indices:
        dp = db.load(split, int(j))
        dp = Datapoint(dp.inputs.astype(dtype), dp.target.astype(dtype),
                       dp.source_sim, dp.source_offset)
        if rng is not None:
            dp = augment_rotate(dp, rng)
        dp, _ = normalize(dp)
        xs.append(dp.inputs)
        ts.append(dp.target)
    return np.stack(xs), np.stack(ts)[:, None]


def _batches(n: int, size: int, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield idx[start : start + size]


def evaluate(net: MultiScaleNet, db: Database, split: str, batch_size: int,
             weights=LOSS_WEIGHTS) -> float:
    """Datapoint-weighted mean loss over a split; fixed-order, unaugmented."""
    fixed = FixedOrder()
    n = db.n_datapoints(split)
    total = 0.0
    for chunk in _batches(n, batch_size):
        x, t = _assemble(db, split, chunk, net.dtype)
        pred = net.forward(x, fixed)
        loss, _, _, _ = loss_and_grad(pred, t, weights)
        total += loss * len(chunk)
    return total / n


def train_run(config: TrainConfig, db: Database, scales: list[dict], run_id: str,
              out_dir, resume_from=None, log=None) -> RunRecord:
    """One training run; writes checkpoints, losses.csv, entropy.txt,
    record.json under out_dir/run_id."""
    run_dir = Path(out_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    dtype = dtype_of(config.precision)

    net = MultiScaleNet(scales, config.precision)
    policy = make_policy(config.policy)
    adam = Adam(net.params, config.lr, config.beta1, config.beta2, config.adam_eps)
    sched = PlateauScheduler(adam, config.lr_factor, config.lr_patience, config.lr_threshold)
    record = RunRecord(run_id, policy.name, policy.entropy_ref)

    start_epoch = 1
    if resume_from is None:
        net.init_weights(init_rng(config.seed))
        mode = "w"
    else:
        meta, arrays = read_checkpoint(resume_from)
        if meta["arch_hash"] != net.arch_hash:
            raise ValueError(
                f"checkpoint architecture {meta['arch_hash']} != current {net.arch_hash}"
            )
        net.load_params(arrays)
        adam.load_state(meta["scalars"], arrays)
        sched.load_state(meta["scalars"])
        start_epoch = meta["epoch"] + 1
        mode = "a"

    (run_dir / "entropy.txt").write_text(f"{policy.name} {policy.entropy_ref}\n")
    n_train = db.n_datapoints("train")

    def save_checkpoint(epoch: int, train_loss: float, val_loss: float) -> str:
        name = f"ckpt_{epoch:05d}.rwc"
        scalars = {
            "adam_t": adam.t, "lr": adam.lr,
            "train_loss": train_loss, "val_loss": val_loss,
            "seed": config.seed,
            "beta1": adam.beta1, "beta2": adam.beta2, "adam_eps": adam.eps,
        }
        scalars.update(sched.state_scalars())
        arrays = dict(net.params)
        arrays.update(adam.state_arrays())
        write_checkpoint(run_dir / name, config.precision, epoch, run_id,
                         policy.entropy_ref, net.arch_hash, scalars, arrays)
        record.checkpoints.append(
            {"epoch": epoch, "file": name, "train_loss": train_loss, "val_loss": val_loss}
        )
        return name

    with open(run_dir / "losses.csv", mode) as csv:
        if mode == "w":
            csv.write("epoch,train_loss,val_loss,lr\n")
        for epoch in range(start_epoch, config.epochs + 1):
            rng = epoch_rng(config.seed, epoch)
            order = rng.permutation(n_train)
            loss_sum = 0.0
            try:
                for chunk in _batches(n_train, config.batch_size, order):
                    x, t = _assemble(db, "train", chunk, dtype, rng)
                    pred = net.forward(x, policy, keep_ctx=True)
                    total, _, _, grad = loss_and_grad(pred, t, config.loss_weights)
                    if not math.isfinite(total):
                        raise NonFiniteGradientError(f"non-finite loss at epoch {epoch}")
                    grads = net.backward(grad, policy)
                    adam.step(net.params, grads)
                    loss_sum += total * len(chunk)
            except NonFiniteGradientError as exc:
                record.aborted = True
                if log:
                    log(f"{run_id}: aborted: {exc}")
                break
            train_loss = loss_sum / n_train
            val_loss = evaluate(net, db, "val", config.batch_size, config.loss_weights)
            sched.step(train_loss)
            record.train_losses.append(train_loss)
            record.val_losses.append(val_loss)
            record.lrs.append(adam.lr)
            csv.write(f"{epoch},{train_loss!r},{val_loss!r},{adam.lr!r}\n")
            if epoch % config.checkpoint_interval == 0:
                save_checkpoint(epoch, train_loss, val_loss)
            if log and (epoch % 10 == 0 or epoch == config.epochs):
                log(f"{run_id}: epoch {epoch}/{config.epochs} "
                    f"train {train_loss:.3e} val {val_loss:.3e} lr {adam.lr:.3e}")

    if record.checkpoints:
        record.best = min(record.checkpoints, key=lambda c: c["val_loss"])
    _write_record(run_dir, record)
    return record


def _write_record(run_dir: Path, record: RunRecord) -> None:
    doc = {
        "run_id": record.run_id,
        "policy": record.policy,
        "entropy_ref": record.entropy_ref,
        "aborted": record.aborted,
        "checkpoints": record.checkpoints,
        "best": record.best,
        "n_epochs": len(record.train_losses),
    }
    (run_dir / "record.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_run_record(run_dir) -> RunRecord:
    run_dir = Path(run_dir)
    doc = json.loads((run_dir / "record.json").read_text())
    record = RunRecord(doc["run_id"], doc["policy"], doc["entropy_ref"],
                       checkpoints=doc["checkpoints"], best=doc["best"],
                       aborted=doc["aborted"])
    rows = (run_dir / "losses.csv").read_text().splitlines()[1:]
    for row in rows:
        _, tr, va, lr = row.split(",")
        record.train_losses.append(float(tr))
        record.val_losses.append(float(va))
        record.lrs.append(float(lr))
    return record


def _run_worker(config: TrainConfig, db_root: str, scales, run_id: str, out_dir: str):
    return train_run(config, Database.open(db_root), scales, run_id, out_dir)


def train_ensemble(config: TrainConfig, db: Database, scales: list,
                   out_dir, log=None, workers: int = 1) -> list[RunRecord]:
    """n_runs independent runs, identical seed, per-run policy entropy."""
    run_ids = [f"run_{i:02d}" for i in range(config.n_runs)]
    if workers > 1 and config.n_runs > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_worker, config, str(db.root), scales, rid, str(out_dir))
                       for rid in run_ids]
            return [f.result() for f in futures]
    return [train_run(config, db, scales, rid, out_dir, log=log) for rid in run_ids]


def summarize_losses(records: list[RunRecord]) -> dict:
    """Best-model losses per run plus across-run statistics."""
    if not records:
        raise ValueError("need at least one run record")
    rows = []
    for r in records:
        if r.best is None:
            continue
        rows.append({
            "run": r.run_id, "epoch": r.best["epoch"],
            "train_loss": r.best["train_loss"], "val_loss": r.best["val_loss"],
        })
    if not rows:
        raise ValueError("no run has a saved checkpoint")

    def stats(key: str) -> dict:
        vals = np.array([row[key] for row in rows], dtype=np.float64)
        lo = float(vals.min())
        return {
            "avg": float(vals.mean()),
            "std": float(vals.std()),
            "max_min_ratio": float(vals.max() / lo) if lo > 0 else None,
        }

    return {"runs": rows, "train": stats("train_loss"), "val": stats("val_loss")}
