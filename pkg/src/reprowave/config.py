"""Experiment configuration: INI files, named presets, overrides.

Resolution order: preset defaults, then the config file, then any
`section.key=value` overrides. Every command writes the fully resolved
configuration into its output root, so artifacts always carry their
provenance.

Presets: `desk` is a minutes-scale setup (N=64, 40+10 sims, 3 runs,
100 epochs); `paper` mirrors the full-scale constants (N=200, 400+100
sims, 1500 epochs, 10 runs).
"""

from __future__ import annotations

import configparser
import copy
import io
from dataclasses import dataclass, replace

from .dataset import BENCHMARK_KINDS, DatabaseSpec
from .lbm import SimConfig
from .training import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Bad configuration input (a usage error at the CLI level)."""


PAPER_PRESET: dict[str, dict[str, str]] = {
    "experiment": {
        "version": "1",
        "precision": "single",
        "policy": "shuffled",
        "seed": "1234",
        "output_root": "runs/paper",
    },
    "simulation": {
        "grid_size": "200",
        "domain_length": "100.0",
        "sound_speed": "343.0",
        "ambient_density": "1.0",
        "timestep_jump": "4",
        "relaxation_time": "0.55",
        "total_timesteps": "173",
    },
    "database": {
        "n_sims_train": "400",
        "n_sims_val": "100",
        "pulse_count_min": "1",
        "pulse_count_max": "4",
        "pulse_center_min": "0.1",
        "pulse_center_max": "0.9",
        "train_total_timesteps": "156",
        "val_total_timesteps": "236",
    },
    "architecture": {"spec": "default"},
    "training": {
        "epochs": "1500",
        "batch_size": "32",
        "checkpoint_interval": "125",
        "n_runs": "10",
        "lr": "1e-4",
        "lr_factor": "0.98",
        "lr_patience": "10",
        "lr_threshold": "1e-6",
        "beta1": "0.9",
        "beta2": "0.999",
        "adam_eps": "1e-8",
        "w_field": "0.98",
        "w_grad": "0.02",
    },
    "rollout": {
        "recurrences": "43",
        "benchmarks": ",".join(BENCHMARK_KINDS),
        "dump_frames": "false",
    },
    "analysis": {
        "recurrence_set": "0,5,10,25,50",
        "n_test_sims": "100",
        "test_total_timesteps": "216",
        "featured_benchmark": "centered-pulse",
    },
}

DESK_PRESET = copy.deepcopy(PAPER_PRESET)
DESK_PRESET["experiment"].update(seed="20260826", output_root="runs/desk")
DESK_PRESET["simulation"].update(grid_size="64", total_timesteps="60")
DESK_PRESET["database"].update(
    n_sims_train="40", n_sims_val="10",
    train_total_timesteps="16", val_total_timesteps="16",
)
DESK_PRESET["architecture"] = {"spec": "desk"}
DESK_PRESET["training"].update(
    epochs="100", batch_size="20", checkpoint_interval="25", n_runs="3", lr="1e-3",
)
DESK_PRESET["analysis"].update(n_test_sims="8")

PRESETS = {"paper": PAPER_PRESET, "desk": DESK_PRESET}

SECTION_ORDER = ("experiment", "simulation", "database", "architecture",
                 "training", "rollout", "analysis")


@dataclass
class ExperimentConfig:
    raw: dict[str, dict[str, str]]

    def _get(self, section: str, key: str) -> str:
        return self.raw[section][key]

    # --- experiment ---
    @property
    def precision(self) -> str:
        p = self._get("experiment", "precision")
        if p not in ("single", "double"):
            raise ConfigError(f"experiment.precision must be single|double, got {p!r}")
        return p

    @property
    def policy(self) -> str:
        p = self._get("experiment", "policy")
        if p not in ("fixed", "shuffled"):
            raise ConfigError(f"experiment.policy must be fixed|shuffled, got {p!r}")
        return p

    @property
    def seed(self) -> int:
        return int(self._get("experiment", "seed"))

    @property
    def output_root(self) -> str:
        return self._get("experiment", "output_root")

    # --- simulation / database ---
    def sim_config(self) -> SimConfig:
        s = self.raw["simulation"]
        return SimConfig(
            grid_size=int(s["grid_size"]),
            domain_length=float(s["domain_length"]),
            sound_speed=float(s["sound_speed"]),
            ambient_density=float(s["ambient_density"]),
            timestep_jump=int(s["timestep_jump"]),
            relaxation_time=float(s["relaxation_time"]),
            total_timesteps=int(s["total_timesteps"]),
        )

    def database_spec(self) -> DatabaseSpec:
        d = self.raw["database"]
        sim = replace(self.sim_config(), total_timesteps=int(d["train_total_timesteps"]))
        return DatabaseSpec(
            sim_config=sim,
            seed=self.seed,
            n_sims_train=int(d["n_sims_train"]),
            n_sims_val=int(d["n_sims_val"]),
            pulse_count_range=(int(d["pulse_count_min"]), int(d["pulse_count_max"])),
            pulse_center_range=(float(d["pulse_center_min"]), float(d["pulse_center_max"])),
            val_total_timesteps=int(d["val_total_timesteps"]),
        )

    # --- architecture / training ---
    @property
    def arch_source(self) -> str:
        return self._get("architecture", "spec")

    def train_config(self) -> TrainConfig:
        t = self.raw["training"]
        return TrainConfig(
            epochs=int(t["epochs"]),
            batch_size=int(t["batch_size"]),
            checkpoint_interval=int(t["checkpoint_interval"]),
            precision=self.precision,
            n_runs=int(t["n_runs"]),
            seed=self.seed,
            policy=self.policy,
            lr=float(t["lr"]),
            lr_factor=float(t["lr_factor"]),
            lr_patience=int(t["lr_patience"]),
            lr_threshold=float(t["lr_threshold"]),
            beta1=float(t["beta1"]),
            beta2=float(t["beta2"]),
            adam_eps=float(t["adam_eps"]),
            loss_weights=(float(t["w_field"]), float(t["w_grad"])),
        )

    @property
    def loss_weights(self) -> tuple[float, float]:
        t = self.raw["training"]
        return (float(t["w_field"]), float(t["w_grad"]))

    # --- rollout / analysis ---
    @property
    def rollout_recurrences(self) -> int:
        return int(self._get("rollout", "recurrences"))

    @property
    def rollout_benchmarks(self) -> list[str]:
        kinds = [k.strip() for k in self._get("rollout", "benchmarks").split(",") if k.strip()]
        for k in kinds:
            if k not in BENCHMARK_KINDS:
                raise ConfigError(f"unknown benchmark {k!r}; expected one of {BENCHMARK_KINDS}")
        return kinds

    @property
    def rollout_dump_frames(self) -> bool:
        return self._get("rollout", "dump_frames").lower() in ("1", "true", "yes", "on")

    @property
    def analysis_recurrences(self) -> list[int]:
        return sorted(int(v) for v in self._get("analysis", "recurrence_set").split(","))

    @property
    def n_test_sims(self) -> int:
        return int(self._get("analysis", "n_test_sims"))

    @property
    def test_total_timesteps(self) -> int:
        return int(self._get("analysis", "test_total_timesteps"))

    @property
    def featured_benchmark(self) -> str:
        return self._get("analysis", "featured_benchmark")

    def to_ini_text(self) -> str:
        buf = io.StringIO()
        for section in SECTION_ORDER:
            buf.write(f"[{section}]\n")
            for key in sorted(self.raw[section]):
                buf.write(f"{key} = {self.raw[section][key]}\n")
            buf.write("\n")
        return buf.getvalue()


def _validate_keys(raw: dict[str, dict[str, str]]) -> None:
    known = PAPER_PRESET
    for section, values in raw.items():
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")
        for key in values:
            if key not in known[section]:
                raise ConfigError(f"unknown config key {section}.{key}")


def load_config(path: str | None = None, preset: str | None = None,
                overrides=(), output_root: str | None = None) -> ExperimentConfig:
    """Resolve preset -> file -> overrides into an ExperimentConfig."""
    if preset is None:
        preset = "desk"
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; available: {sorted(PRESETS)}")
    raw = copy.deepcopy(PRESETS[preset])

    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        file_raw = {s: dict(parser.items(s)) for s in parser.sections()}
        _validate_keys(file_raw)
        for section, values in file_raw.items():
            raw[section].update(values)

    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        _validate_keys({section.strip(): {key.strip(): value}})
        raw[section.strip()][key.strip()] = value.strip()

    if output_root is not None:
        raw["experiment"]["output_root"] = output_root

    if int(raw["experiment"]["version"]) != CONFIG_VERSION:
        raise ConfigError(
            f"unsupported config version {raw['experiment']['version']} "
            f"(this build reads version {CONFIG_VERSION})"
        )
    return ExperimentConfig(raw)
