"""Databases of simulation datapoints and the generalization benchmarks.

A datapoint is 5 consecutive stored frames: 4 inputs + 1 target. Frames
of one simulation are split into non-overlapping windows of 5, so a
40-frame simulation yields 8 datapoints.

Generation always runs the solver in double precision; single-precision
training converts at load time. Each simulation goes to one binary
container file; a plain-text manifest records the spec echo, per-file
hashes, and the datapoint index -> (file, frame offset) map, making the
whole database a pure function of (spec, seed).

Per-simulation randomness comes from SeedSequence(seed, spawn_key=
(split, sim_index)) with split codes train=0, val=1, test=2, so the
test stream is independent of the training stream by construction.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from itertools import repeat
from pathlib import Path

import numpy as np

from .containers import read_frame_container, write_frame_container
from .lbm import (
    PlaneWaveSpec,
    PulseSpec,
    SimConfig,
    frames_to_array,
    run_simulation,
)

WINDOW = 5  # frames per datapoint: 4 inputs + 1 target
SPLIT_CODES = {"train": 0, "val": 1, "test": 2}

PULSE_AMPLITUDE = 0.001
PULSE_HALF_WIDTH = 12.0

BENCHMARK_KINDS = ("centered-pulse", "opposite-pulses", "plane-wave")


class DegenerateDatapointError(ValueError):
    """First input frame is (numerically) all-quiet; cannot normalize."""


@dataclass(frozen=True)
class DatabaseSpec:
    sim_config: SimConfig
    seed: int
    n_sims_train: int = 400
    n_sims_val: int = 100
    pulse_count_range: tuple[int, int] = (1, 4)
    pulse_center_range: tuple[float, float] = (0.1, 0.9)
    # validation sims may run longer than training sims (more datapoints
    # per simulation); None means same length
    val_total_timesteps: int | None = None

    def __post_init__(self):
        lo, hi = self.pulse_count_range
        if not (1 <= lo <= hi):
            raise ValueError(f"bad pulse count range {self.pulse_count_range}")
        clo, chi = self.pulse_center_range
        if not (0.0 <= clo <= chi <= 1.0):
            raise ValueError(f"bad pulse center range {self.pulse_center_range}")

    def frames_per_sim(self, split: str) -> int:
        total = self.sim_config.total_timesteps
        if split == "val" and self.val_total_timesteps is not None:
            total = self.val_total_timesteps
        return total // self.sim_config.timestep_jump + 1


@dataclass(frozen=True)
class Datapoint:
    inputs: np.ndarray  # (4, n, n), chronological
    target: np.ndarray  # (n, n)
    source_sim: str = ""
    source_offset: int = 0  # stored-frame index of the first input


@dataclass(frozen=True)
class DatapointRef:
    file: str
    offset: int
    sim: str


def _sim_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(SPLIT_CODES[split], index)))
    )


def draw_pulses(rng: np.random.Generator, spec: DatabaseSpec) -> list[PulseSpec]:
    """Random pulse set for one simulation: count, then centers in order."""
    lo, hi = spec.pulse_count_range
    count = int(rng.integers(lo, hi + 1))
    clo, chi = spec.pulse_center_range
    pulses = []
    for _ in range(count):
        cx, cy = rng.uniform(clo, chi, size=2)
        pulses.append(
            PulseSpec((float(cx), float(cy)), PULSE_AMPLITUDE, PULSE_HALF_WIDTH)
        )
    return pulses


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _split_config(spec: DatabaseSpec, split: str) -> SimConfig:
    config = spec.sim_config
    if split == "val" and spec.val_total_timesteps is not None:
        config = replace(config, total_timesteps=spec.val_total_timesteps)
    if config.total_timesteps // config.timestep_jump + 1 < WINDOW:
        raise ValueError(
            f"{split}: {config.total_timesteps} timesteps at jump "
            f"{config.timestep_jump} yield fewer than {WINDOW} frames"
        )
    return config


def _simulate_one(spec: DatabaseSpec, split: str, index: int):
    """Run one stored simulation; deterministic in (seed, split, index)."""
    config = _split_config(spec, split)
    pulses = draw_pulses(_sim_rng(spec.seed, split, index), spec)
    frames, steps = frames_to_array(run_simulation(config, pulses, "double"))
    echo = dict(config.to_echo())
    echo["split"] = split
    echo["sim_index"] = index
    echo["pulses"] = ";".join(
        f"{p.center[0]!r}:{p.center[1]!r}:{p.amplitude!r}:{p.half_width!r}"
        for p in pulses
    )
    return frames, steps, echo


def _write_split(spec: DatabaseSpec, split: str, n_sims: int, root: Path,
                 workers: int = 1):
    """Simulate and store one split; returns (file names, frame counts).

    Sims are independent (private RNG per index), so results are identical
    regardless of worker count; files are written in index order either way.
    """
    _split_config(spec, split)  # validate before any work
    if workers > 1 and n_sims > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_simulate_one, repeat(spec), repeat(split),
                                    range(n_sims)))
    else:
        results = [_simulate_one(spec, split, i) for i in range(n_sims)]
    names = []
    for i, (frames, steps, echo) in enumerate(results):
        name = f"{split}_{i:04d}.rwf"
        write_frame_container(root / name, frames, steps, echo)
        names.append((name, frames.shape[0]))
    return names


def _manifest_lines(spec: DatabaseSpec, splits: dict[str, list], root: Path) -> list[str]:
    lines = ["format_version 1", f"seed {spec.seed}"]
    lines.append(f"pulse_count_range {spec.pulse_count_range[0]} {spec.pulse_count_range[1]}")
    lines.append(f"pulse_center_range {spec.pulse_center_range[0]!r} {spec.pulse_center_range[1]!r}")
    for key, value in spec.sim_config.to_echo().items():
        lines.append(f"sim {key} {value!r}" if isinstance(value, float) else f"sim {key} {value}")
    if spec.val_total_timesteps is not None:
        lines.append(f"val_total_timesteps {spec.val_total_timesteps}")
    for split, names in splits.items():
        lines.append(f"n_sims_{split} {len(names)}")
    for split, names in splits.items():
        for name, count in names:
            lines.append(f"file {split} {name} {count} {_sha256(root / name)}")
    for split, names in splits.items():
        idx = 0
        for name, count in names:
            for off in range(0, count - WINDOW + 1, WINDOW):
                lines.append(f"datapoint {split} {idx} {name} {off}")
                idx += 1
    return lines


def _write_database(spec: DatabaseSpec, out_dir, split_sizes: dict[str, int],
                    workers: int = 1) -> "Database":
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    splits = {}
    for split, n_sims in split_sizes.items():
        splits[split] = _write_split(spec, split, n_sims, root, workers=workers)
    (root / "manifest.txt").write_text("\n".join(_manifest_lines(spec, splits, root)) + "\n")
    return Database.open(root)


def generate_database(spec: DatabaseSpec, out_dir, workers: int = 1) -> "Database":
    """Build the train+val database under out_dir."""
    return _write_database(
        spec, out_dir, {"train": spec.n_sims_train, "val": spec.n_sims_val},
        workers=workers,
    )


def generate_random_test_database(n_sims: int, spec: DatabaseSpec, out_dir,
                                  workers: int = 1) -> "Database":
    """Independent random-pulse simulations for testing (split code 2)."""
    return _write_database(spec, out_dir, {"test": n_sims}, workers=workers)


class Database:
    """Read handle over a generated database directory."""

    def __init__(self, root: Path, refs: dict[str, list[DatapointRef]],
                 files: dict[str, list[tuple[str, int]]], meta: dict):
        self.root = Path(root)
        self.refs = refs
        self.files = files  # split -> [(file name, frame count)]
        self.meta = meta
        self._cache: dict[str, np.ndarray] = {}

    @classmethod
    def open(cls, root) -> "Database":
        root = Path(root)
        manifest = root / "manifest.txt"
        if not manifest.exists():
            raise FileNotFoundError(f"no database manifest at {manifest}")
        refs: dict[str, list[DatapointRef]] = {}
        files: dict[str, list[tuple[str, int]]] = {}
        meta: dict = {"hashes": {}}
        for raw in manifest.read_text().splitlines():
            parts = raw.split()
            if not parts:
                continue
            if parts[0] == "file":
                _, split, name, count, digest = parts
                files.setdefault(split, []).append((name, int(count)))
                meta["hashes"][name] = digest
            elif parts[0] == "datapoint":
                _, split, idx, name, off = parts
                lst = refs.setdefault(split, [])
                assert int(idx) == len(lst)
                lst.append(DatapointRef(name, int(off), name.rsplit(".", 1)[0]))
            elif parts[0] == "sim":
                meta.setdefault("sim", {})[parts[1]] = parts[2]
            else:
                meta[parts[0]] = " ".join(parts[1:])
        return cls(root, refs, files, meta)

    @property
    def splits(self) -> tuple[str, ...]:
        return tuple(self.refs)

    @property
    def sim_config(self) -> SimConfig:
        return SimConfig.from_echo(self.meta["sim"])

    def n_datapoints(self, split: str) -> int:
        return len(self.refs.get(split, ()))

    def frames(self, file_name: str) -> np.ndarray:
        if file_name not in self._cache:
            frames, _, _ = read_frame_container(self.root / file_name)
            self._cache[file_name] = frames
        return self._cache[file_name]

    def sim_frames(self, split: str, sim_index: int) -> np.ndarray:
        name, _ = self.files[split][sim_index]
        return self.frames(name)

    def n_sims(self, split: str) -> int:
        return len(self.files.get(split, ()))

    def load(self, split: str, index: int) -> Datapoint:
        ref = self.refs[split][index]
        frames = self.frames(ref.file)
        block = frames[ref.offset : ref.offset + WINDOW]
        return Datapoint(block[:4], block[4], ref.sim, ref.offset)

    def verify_hashes(self) -> None:
        for name, digest in self.meta["hashes"].items():
            actual = _sha256(self.root / name)
            if actual != digest:
                raise ValueError(f"{name}: hash mismatch (manifest {digest}, file {actual})")


def augment_rotate(point: Datapoint, rng: np.random.Generator) -> Datapoint:
    """Rotate all 5 frames by the same random multiple of 90 degrees."""
    k = int(rng.integers(0, 4))
    if k == 0:
        return point
    return Datapoint(
        np.rot90(point.inputs, k, axes=(1, 2)).copy(),
        np.rot90(point.target, k).copy(),
        point.source_sim,
        point.source_offset,
    )


def normalize(point: Datapoint) -> tuple[Datapoint, float]:
    """Divide all 5 frames by the population std of the first input frame."""
    first = point.inputs[0]
    if float(np.var(first)) < 1e-30:
        raise DegenerateDatapointError(
            f"datapoint {point.source_sim}@{point.source_offset}: first frame is all-quiet"
        )
    scale = float(np.std(first))
    return (
        Datapoint(point.inputs / scale, point.target / scale,
                  point.source_sim, point.source_offset),
        scale,
    )


def make_benchmark(kind: str, config: SimConfig):
    """Initializer for the three generalization benchmarks."""
    if kind == "centered-pulse":
        return [PulseSpec((0.5, 0.5), PULSE_AMPLITUDE, PULSE_HALF_WIDTH)]
    if kind == "opposite-pulses":
        off = 0.1  # domain fraction; 20 grid spacings on a 200-cell grid
        return [
            PulseSpec((0.5, 0.5 - off), PULSE_AMPLITUDE, PULSE_HALF_WIDTH),
            PulseSpec((0.5, 0.5 + off), -PULSE_AMPLITUDE, PULSE_HALF_WIDTH),
        ]
    if kind == "plane-wave":
        return PlaneWaveSpec(0.5, PULSE_AMPLITUDE, PULSE_HALF_WIDTH)
    raise ValueError(f"unknown benchmark {kind!r}; expected one of {BENCHMARK_KINDS}")
