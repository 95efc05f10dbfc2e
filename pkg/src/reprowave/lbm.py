"""D2Q9 lattice-Boltzmann solver for 2D linear acoustics.

BGK collision, half-way bounce-back on all four walls (null wall
velocity), Gaussian-pulse initial conditions. Everything is vectorized
numpy with a fixed per-cell operand order, so a simulation is
bit-reproducible for a given precision.

Grid convention: arrays are indexed [y, x]; cell i sits at (i + 0.5) dx,
so a domain-fraction coordinate f maps to lattice position f*n - 0.5 and
the walls coincide with the half-way bounce-back planes at -0.5 and
n - 0.5. The lattice sound speed is 1/sqrt(3) cells per timestep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .precision import dtype_of, precision_of

# D2Q9 velocity set: rest, axis-aligned, diagonals.
EX = (0, 1, 0, -1, 0, 1, -1, -1, 1)
EY = (0, 0, 1, 0, -1, 1, 1, -1, -1)
WEIGHTS = (4 / 9, 1 / 9, 1 / 9, 1 / 9, 1 / 9, 1 / 36, 1 / 36, 1 / 36, 1 / 36)
OPPOSITE = (0, 3, 4, 1, 2, 7, 8, 5, 6)

LATTICE_SOUND_SPEED = 1.0 / math.sqrt(3.0)


class LatticeInstabilityError(RuntimeError):
    """A lattice value became non-finite; the simulation is unstable."""


class PulseError(ValueError):
    """Invalid pulse specification."""


@dataclass(frozen=True)
class SimConfig:
    """Simulation setup; defaults follow the full-scale acoustic case."""

    grid_size: int = 200
    domain_length: float = 100.0
    sound_speed: float = 343.0
    ambient_density: float = 1.0
    timestep_jump: int = 4
    relaxation_time: float = 0.55
    total_timesteps: int = 173

    def __post_init__(self):
        if self.grid_size < 8:
            raise ValueError(f"grid_size must be >= 8, got {self.grid_size}")
        if self.timestep_jump < 1:
            raise ValueError("timestep_jump must be >= 1")
        if self.relaxation_time <= 0.5:
            raise ValueError("relaxation_time must exceed 0.5 for BGK stability")
        if self.total_timesteps < 0:
            raise ValueError("total_timesteps must be non-negative")

    @property
    def dx(self) -> float:
        return self.domain_length / self.grid_size

    @property
    def dt(self) -> float:
        # one lattice step covers dx / (a * sqrt(3)) seconds of physical time
        return self.dx * LATTICE_SOUND_SPEED / self.sound_speed

    def to_echo(self) -> dict:
        return {
            "grid_size": self.grid_size,
            "domain_length": self.domain_length,
            "sound_speed": self.sound_speed,
            "ambient_density": self.ambient_density,
            "timestep_jump": self.timestep_jump,
            "relaxation_time": self.relaxation_time,
            "total_timesteps": self.total_timesteps,
        }

    @classmethod
    def from_echo(cls, echo: dict) -> "SimConfig":
        return cls(
            grid_size=int(echo["grid_size"]),
            domain_length=float(echo["domain_length"]),
            sound_speed=float(echo["sound_speed"]),
            ambient_density=float(echo["ambient_density"]),
            timestep_jump=int(echo["timestep_jump"]),
            relaxation_time=float(echo["relaxation_time"]),
            total_timesteps=int(echo["total_timesteps"]),
        )


@dataclass(frozen=True)
class PulseSpec:
    """Gaussian pulse: center in domain fractions, half-width in cells."""

    center: tuple[float, float]
    amplitude: float = 0.001
    half_width: float = 12.0

    def __post_init__(self):
        if self.half_width <= 0:
            raise PulseError("half_width must be positive")
        cx, cy = self.center
        if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
            raise PulseError(f"pulse center {self.center} outside the unit square")


@dataclass(frozen=True)
class PlaneWaveSpec:
    """Gaussian-contour plane wave in x, extruded along y."""

    center_x: float = 0.5
    amplitude: float = 0.001
    half_width: float = 12.0

    def __post_init__(self):
        if self.half_width <= 0:
            raise PulseError("half_width must be positive")
        if not 0.0 <= self.center_x <= 1.0:
            raise PulseError(f"plane wave center {self.center_x} outside [0, 1]")


@dataclass
class LatticeState:
    """Distribution functions, shape (9, n, n)."""

    f: np.ndarray

    @property
    def grid_size(self) -> int:
        return self.f.shape[1]

    @property
    def precision(self) -> str:
        return precision_of(self.f)


@dataclass(frozen=True)
class Field2D:
    """Acoustic density rho' = rho - rho0 at one simulation timestep."""

    values: np.ndarray
    frame_index: int = field(default=0)


def _coords(config: SimConfig, dtype) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(config.grid_size, dtype=dtype)
    return np.meshgrid(idx, idx, indexing="xy")  # X varies along axis 1


def _fraction_to_lattice(f: float, n: int) -> float:
    return f * n - 0.5


def pulse_density(config: SimConfig, pulses, dtype=np.float64) -> np.ndarray:
    """Total density field of superposed Gaussian pulses (additive in rho')."""
    if not pulses:
        raise PulseError("at least one pulse required")
    x, y = _coords(config, dtype)
    n = config.grid_size
    bump = np.zeros((n, n), dtype=dtype)
    for p in pulses:
        cx = _fraction_to_lattice(p.center[0], n)
        cy = _fraction_to_lattice(p.center[1], n)
        d2 = (x - cx) ** 2 + (y - cy) ** 2
        bump = bump + p.amplitude * np.exp(-math.log(2.0) * d2 / p.half_width**2)
    return (config.ambient_density * (1.0 + bump)).astype(dtype)


def plane_wave_density(config: SimConfig, wave: PlaneWaveSpec, dtype=np.float64) -> np.ndarray:
    x, _ = _coords(config, dtype)
    cx = _fraction_to_lattice(wave.center_x, config.grid_size)
    bump = wave.amplitude * np.exp(-math.log(2.0) * (x - cx) ** 2 / wave.half_width**2)
    return (config.ambient_density * (1.0 + bump)).astype(dtype)


def equilibrium(rho: np.ndarray, ux: np.ndarray, uy: np.ndarray) -> np.ndarray:
    """BGK equilibrium distributions for the nine velocities."""
    f = np.empty((9,) + rho.shape, dtype=rho.dtype)
    usq = ux * ux + uy * uy
    for k in range(9):
        eu = EX[k] * ux + EY[k] * uy
        f[k] = WEIGHTS[k] * rho * (1.0 + 3.0 * eu + 4.5 * eu * eu - 1.5 * usq)
    return f


def state_from_density(config: SimConfig, rho: np.ndarray, precision: str = "double") -> LatticeState:
    """Equilibrium lattice state at the given density and zero velocity."""
    dt = dtype_of(precision)
    rho = np.asarray(rho, dtype=dt)
    zero = np.zeros_like(rho)
    return LatticeState(equilibrium(rho, zero, zero))


def init_pulses(config: SimConfig, pulses, precision: str = "double") -> LatticeState:
    return state_from_density(config, pulse_density(config, pulses, dtype_of(precision)), precision)


def init_plane_wave(config: SimConfig, wave: PlaneWaveSpec, precision: str = "double") -> LatticeState:
    return state_from_density(config, plane_wave_density(config, wave, dtype_of(precision)), precision)


def density(state: LatticeState) -> np.ndarray:
    """Zeroth moment, accumulated in fixed index order."""
    f = state.f
    return ((((((((f[0] + f[1]) + f[2]) + f[3]) + f[4]) + f[5]) + f[6]) + f[7]) + f[8])


def acoustic_density(state: LatticeState, config: SimConfig) -> np.ndarray:
    return density(state) - config.ambient_density


def momentum(state: LatticeState) -> tuple[np.ndarray, np.ndarray]:
    f = state.f
    jx = ((((f[1] - f[3]) + f[5]) - f[6]) - f[7]) + f[8]
    jy = ((((f[2] - f[4]) + f[5]) + f[6]) - f[7]) - f[8]
    return jx, jy


def step(state: LatticeState, config: SimConfig) -> LatticeState:
    """Advance one timestep: BGK collide, stream, bounce-back at walls."""
    f = state.f
    # non-finite values surface as LatticeInstabilityError below, so the
    # intermediate inf/nan arithmetic warnings carry no extra information
    with np.errstate(invalid="ignore", over="ignore"):
        rho = density(state)
        jx, jy = momentum(state)
        ux = jx / rho
        uy = jy / rho
        feq = equilibrium(rho, ux, uy)
        omega = 1.0 / config.relaxation_time
        post = f - (f - feq) * omega

    n = config.grid_size
    new = np.empty_like(post)
    for k in range(9):
        new[k] = np.roll(post[k], shift=(EY[k], EX[k]), axis=(0, 1))
    # Half-way bounce-back: links that would enter through a wall return
    # reversed to their source cell. Corners get the same value twice.
    for k in range(9):
        o = OPPOSITE[k]
        if EY[k] > 0:
            new[k][0, :] = post[o][0, :]
        elif EY[k] < 0:
            new[k][n - 1, :] = post[o][n - 1, :]
    for k in range(9):
        o = OPPOSITE[k]
        if EX[k] > 0:
            new[k][:, 0] = post[o][:, 0]
        elif EX[k] < 0:
            new[k][:, n - 1] = post[o][:, n - 1]

    if not np.isfinite(new).all():
        bad = int(np.count_nonzero(~np.isfinite(new)))
        raise LatticeInstabilityError(
            f"{bad} non-finite distribution values after step (tau={config.relaxation_time})"
        )
    return LatticeState(new)


def run_simulation(config: SimConfig, initializer, precision: str = "double") -> list[Field2D]:
    """Run `total_timesteps` steps, storing rho' every `timestep_jump` steps.

    `initializer` is a list of PulseSpec, a PlaneWaveSpec, or a ready
    LatticeState. Frames carry their simulation timestep as frame_index.
    """
    if isinstance(initializer, LatticeState):
        state = initializer
    elif isinstance(initializer, PlaneWaveSpec):
        state = init_plane_wave(config, initializer, precision)
    else:
        state = init_pulses(config, initializer, precision)

    frames = [Field2D(acoustic_density(state, config), 0)]
    for t in range(1, config.total_timesteps + 1):
        state = step(state, config)
        if t % config.timestep_jump == 0:
            frames.append(Field2D(acoustic_density(state, config), t))
    return frames


def frames_to_array(frames) -> tuple[np.ndarray, np.ndarray]:
    values = np.stack([fr.values for fr in frames])
    steps = np.array([fr.frame_index for fr in frames], dtype=np.int64)
    return values, steps
