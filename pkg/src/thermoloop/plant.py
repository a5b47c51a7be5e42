"""Lumped single-node thermal simulation of a TEC-driven amplifier mount.

Heat balance on the cold node, all terms in watts:

* junction transport  S * I * Tc        (positive current injects heat)
* internal dissipation 0.5 * I^2 * R    (removed from the node)
* hot-side exchange   K * (Th - Tc)     (removed from the node)
* absorbed pump load  eta * P           (removed from the node)

so ``m_e * c * dTc/dt = S*I*Tc - 0.5*I^2*R - K*(Th - Tc) - eta*P``. The sign
convention is deliberately shared verbatim with the training residual so the
simulator and the physics loss describe one and the same discrete model.

The balance is linear in Tc while a current is held, so each substep is an
exact backward-Euler solve: the per-sample transition satisfies
``(T[k] - T[k-1])/dt == balance(T[k], I[k]) / (m_e*c)`` to roundoff when
``substeps_per_sample == 1``. Measurement noise is additive Gaussian on the
reported reading only; the true state is never perturbed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import math

import numpy as np

from .accel import jit_kernel
from .configio import atomic_write_text, format_kv, read_kv

# Hard simulation guard band extends this far beyond the safety temp_bounds;
# leaving it means the state has diverged and stepping raises.
GUARD_MARGIN_K = 15.0


class DivergenceError(RuntimeError):
    """True temperature left the simulation guard band."""


@dataclass(frozen=True)
class PhysicalConstants:
    """Measured parameters of the cooler/amplifier assembly (SI units)."""

    seebeck: float = 8.76e-4          # V/K
    internal_resistance: float = 6.09  # ohm
    heat_transfer: float = 0.373       # W/K
    hot_side_temp: float = 300.15      # K (27 C ambient plate)
    equiv_mass: float = 0.3            # kg
    heat_capacity: float = 800.0       # J/(kg K)

    def __post_init__(self):
        for name in ("seebeck", "internal_resistance", "heat_transfer",
                     "hot_side_temp", "equiv_mass", "heat_capacity"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0.0):
                raise ValueError(f"PhysicalConstants.{name} must be finite and > 0, got {value}")

    @property
    def thermal_mass(self) -> float:
        """Aggregate heat capacity m_e * c in J/K."""
        return self.equiv_mass * self.heat_capacity


@dataclass(frozen=True)
class PlantConfig:
    """Simulation configuration around a :class:`PhysicalConstants` set."""

    constants: PhysicalConstants = field(default_factory=PhysicalConstants)
    laser_power: float = 0.0            # W of pump power at the amplifier
    heat_load_efficiency: float = 0.5   # fraction of pump power absorbed as heat
    sensor_noise_std: float = 5e-4      # K, additive on reported readings
    sample_period: float = 0.2          # s (5 Hz sampling)
    substeps_per_sample: int = 10
    temp_bounds: tuple[float, float] = (278.15, 313.15)   # K, safety envelope
    current_bounds: tuple[float, float] = (-2.0, 2.0)     # A, actuator limits

    def __post_init__(self):
        if self.laser_power < 0.0 or not math.isfinite(self.laser_power):
            raise ValueError(f"laser_power must be finite and >= 0, got {self.laser_power}")
        if not 0.0 <= self.heat_load_efficiency <= 1.0:
            raise ValueError(f"heat_load_efficiency must lie in [0, 1], got {self.heat_load_efficiency}")
        if self.sensor_noise_std < 0.0:
            raise ValueError("sensor_noise_std must be >= 0")
        if self.sample_period <= 0.0:
            raise ValueError("sample_period must be > 0")
        if self.substeps_per_sample < 1:
            raise ValueError("substeps_per_sample must be >= 1")
        if self.temp_bounds[0] >= self.temp_bounds[1]:
            raise ValueError(f"temp_bounds must be ordered, got {self.temp_bounds}")
        if self.current_bounds[0] > self.current_bounds[1]:
            raise ValueError(f"current_bounds must be ordered, got {self.current_bounds}")

    @property
    def laser_load(self) -> float:
        """Absorbed pump heat eta * P in watts."""
        return self.heat_load_efficiency * self.laser_power

    @property
    def guard_bounds(self) -> tuple[float, float]:
        return (self.temp_bounds[0] - GUARD_MARGIN_K, self.temp_bounds[1] + GUARD_MARGIN_K)


@dataclass(frozen=True)
class PlantState:
    """Instantaneous true cold-side temperature at simulation time ``time``."""

    cold_side_temp: float  # K
    time: float = 0.0      # s

    def __post_init__(self):
        if not math.isfinite(self.cold_side_temp):
            raise ValueError(f"cold_side_temp must be finite, got {self.cold_side_temp}")
        if not math.isfinite(self.time):
            raise ValueError(f"time must be finite, got {self.time}")


def heat_terms(state: PlantState, current: float, cfg: PlantConfig) -> tuple[float, float, float, float]:
    """Instantaneous heat flows (junction, dissipation, conduction, laser) in W."""
    if not (math.isfinite(current) and math.isfinite(state.cold_side_temp)):
        raise ValueError(f"non-finite input: current={current}, temp={state.cold_side_temp}")
    _check_current(current, cfg)
    k = cfg.constants
    peltier = k.seebeck * current * state.cold_side_temp
    joule = 0.5 * current * current * k.internal_resistance
    conduction = k.heat_transfer * (k.hot_side_temp - state.cold_side_temp)
    return peltier, joule, conduction, cfg.laser_load


def _check_current(current: float, cfg: PlantConfig) -> None:
    lo, hi = cfg.current_bounds
    if not lo <= current <= hi:
        raise ValueError(f"current {current} A outside bounds [{lo}, {hi}] A")


@jit_kernel
def _integrate(currents, temp0, dt, substeps, seebeck, resistance, conduct,
               hot_temp, thermal_mass, laser_load, guard_lo, guard_hi):
    """Advance one sample per current via exact backward-Euler substeps.

    Returns (temps, bad_index); bad_index is the first sample whose state left
    the guard band (-1 when none did). temps[i] is the state after currents[i].
    """
    n = currents.shape[0]
    temps = np.empty(n)
    temp = temp0
    for i in range(n):
        drive = currents[i]
        # balance(T) = gain*T - sink with both pieces constant over the hold
        gain = seebeck * drive + conduct
        sink = 0.5 * drive * drive * resistance + conduct * hot_temp + laser_load
        for _ in range(substeps):
            temp = (temp - dt * sink / thermal_mass) / (1.0 - dt * gain / thermal_mass)
            if not (guard_lo <= temp <= guard_hi):
                temps[i] = temp
                return temps, i
        temps[i] = temp
    return temps, -1


def _advance(state: PlantState, currents: np.ndarray, cfg: PlantConfig) -> tuple[np.ndarray, int]:
    k = cfg.constants
    dt = cfg.sample_period / cfg.substeps_per_sample
    lo, hi = cfg.guard_bounds
    return _integrate(currents, state.cold_side_temp, dt, cfg.substeps_per_sample,
                      k.seebeck, k.internal_resistance, k.heat_transfer,
                      k.hot_side_temp, k.thermal_mass, cfg.laser_load, lo, hi)


def step(state: PlantState, current: float, cfg: PlantConfig) -> PlantState:
    """Advance one sample period; returns the new true state.

    Raises :class:`DivergenceError` when the temperature leaves the guard band.
    """
    if not math.isfinite(current):
        raise ValueError(f"non-finite current {current}")
    _check_current(current, cfg)
    temps, bad = _advance(state, np.array([float(current)]), cfg)
    new_time = state.time + cfg.sample_period
    if bad >= 0:
        lo, hi = cfg.guard_bounds
        raise DivergenceError(
            f"temperature diverged during step at t={new_time:.3f} s with "
            f"I={current:.4f} A: T={temps[0]:.3f} K outside guard band [{lo:.2f}, {hi:.2f}] K")
    return PlantState(cold_side_temp=float(temps[0]), time=new_time)


def measure(state: PlantState, cfg: PlantConfig, rng: np.random.Generator | None = None) -> float:
    """Reported temperature: true state plus Gaussian sensor noise."""
    if rng is None or cfg.sensor_noise_std == 0.0:
        return state.cold_side_temp
    return state.cold_side_temp + cfg.sensor_noise_std * rng.standard_normal()


@dataclass
class Trajectory:
    """Sampled run of the plant; one row per applied current."""

    time_s: np.ndarray
    current_A: np.ndarray
    temp_true_K: np.ndarray
    temp_meas_K: np.ndarray

    CSV_HEADER = "time_s,current_A,temp_true_K,temp_meas_K"

    def __len__(self) -> int:
        return len(self.time_s)

    def state_at(self, i: int) -> PlantState:
        return PlantState(cold_side_temp=float(self.temp_true_K[i]), time=float(self.time_s[i]))

    def to_csv(self, path: str) -> None:
        lines = [self.CSV_HEADER]
        for i in range(len(self)):
            lines.append(f"{float(self.time_s[i])!r},{float(self.current_A[i])!r},"
                         f"{float(self.temp_true_K[i])!r},{float(self.temp_meas_K[i])!r}")
        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path: str) -> "Trajectory":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != cls.CSV_HEADER:
                raise ValueError(f"{path}:1: expected header {cls.CSV_HEADER!r}, got {header!r}")
            cols: list[list[float]] = [[], [], [], []]
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                parts = line.strip().split(",")
                if len(parts) != 4:
                    raise ValueError(f"{path}:{lineno}: expected 4 columns, got {len(parts)}")
                for c, part in zip(cols, parts):
                    c.append(float(part))
        return cls(*(np.asarray(c) for c in cols))


def simulate(initial: PlantState, currents, cfg: PlantConfig,
             rng: np.random.Generator | int | None = None,
             truncate_at_bounds: bool = False) -> Trajectory:
    """Apply a current sequence; deterministic given the rng seed.

    With ``truncate_at_bounds`` the trajectory is quietly cut just before the
    first sample whose true temperature leaves ``cfg.temp_bounds`` (mirroring a
    safety shutdown); otherwise only the wider guard band raises.
    """
    currents = np.asarray(currents, dtype=np.float64)
    if currents.ndim != 1:
        raise ValueError("currents must be a 1-D sequence")
    if currents.size == 0:
        empty = np.empty(0)
        return Trajectory(empty, empty.copy(), empty.copy(), empty.copy())
    if not np.all(np.isfinite(currents)):
        bad = int(np.flatnonzero(~np.isfinite(currents))[0])
        raise ValueError(f"non-finite current at index {bad}")
    lo, hi = cfg.current_bounds
    out_of_bounds = (currents < lo) | (currents > hi)
    if np.any(out_of_bounds):
        bad = int(np.flatnonzero(out_of_bounds)[0])
        raise ValueError(f"current {currents[bad]} A at index {bad} outside bounds [{lo}, {hi}] A")

    temps, bad = _advance(initial, currents, cfg)
    n = currents.size if bad < 0 else bad + 1
    if bad >= 0 and not truncate_at_bounds:
        t_bad = initial.time + (bad + 1) * cfg.sample_period
        glo, ghi = cfg.guard_bounds
        raise DivergenceError(
            f"temperature diverged at sample {bad} (t={t_bad:.3f} s, I={currents[bad]:.4f} A): "
            f"T={temps[bad]:.3f} K outside guard band [{glo:.2f}, {ghi:.2f}] K")

    temps = temps[:n]
    currents = currents[:n]
    if truncate_at_bounds:
        blo, bhi = cfg.temp_bounds
        violating = (temps < blo) | (temps > bhi)
        if np.any(violating):
            n = int(np.flatnonzero(violating)[0])
            temps = temps[:n]
            currents = currents[:n]

    times = initial.time + cfg.sample_period * np.arange(1, temps.size + 1)
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    if rng is None or cfg.sensor_noise_std == 0.0:
        meas = temps.copy()
    else:
        meas = temps + cfg.sensor_noise_std * rng.standard_normal(temps.size)
    return Trajectory(times, currents.copy(), temps, meas)


def equilibrium_current(cfg: PlantConfig, temp: float) -> float:
    """Drive current that holds ``temp`` steady, if one exists in bounds.

    Solves S*I*T - 0.5*I^2*R - K*(Th - T) - laser_load = 0 for I (quadratic);
    returns the in-bounds root of smallest magnitude. Raises ValueError when
    the temperature cannot be held within the actuator limits.
    """
    k = cfg.constants
    a = -0.5 * k.internal_resistance
    b = k.seebeck * temp
    c = -(k.heat_transfer * (k.hot_side_temp - temp) + cfg.laser_load)
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        raise ValueError(f"no equilibrium current exists at T={temp:.2f} K "
                         f"(required heat balance unreachable)")
    root = math.sqrt(disc)
    candidates = [(-b + root) / (2.0 * a), (-b - root) / (2.0 * a)]
    lo, hi = cfg.current_bounds
    feasible = [i for i in candidates if lo <= i <= hi]
    if not feasible:
        raise ValueError(f"equilibrium currents {candidates} A at T={temp:.2f} K "
                         f"are outside bounds [{lo}, {hi}] A")
    return min(feasible, key=abs)


# --- flat config file round trip -------------------------------------------

_PLANT_KEYS = [
    ("seebeck", "V/K"), ("internal_resistance", "ohm"), ("heat_transfer", "W/K"),
    ("hot_side_temp", "K"), ("equiv_mass", "kg"), ("heat_capacity", "J/(kg K)"),
    ("laser_power", "W"), ("heat_load_efficiency", "fraction in [0,1]"),
    ("sensor_noise_std", "K"), ("sample_period", "s"), ("substeps_per_sample", "count"),
    ("temp_min", "K"), ("temp_max", "K"), ("current_min", "A"), ("current_max", "A"),
]


def plant_config_items(cfg: PlantConfig) -> list[tuple[str, object, str]]:
    k = cfg.constants
    values = {
        "seebeck": k.seebeck, "internal_resistance": k.internal_resistance,
        "heat_transfer": k.heat_transfer, "hot_side_temp": k.hot_side_temp,
        "equiv_mass": k.equiv_mass, "heat_capacity": k.heat_capacity,
        "laser_power": cfg.laser_power, "heat_load_efficiency": cfg.heat_load_efficiency,
        "sensor_noise_std": cfg.sensor_noise_std, "sample_period": cfg.sample_period,
        "substeps_per_sample": cfg.substeps_per_sample,
        "temp_min": cfg.temp_bounds[0], "temp_max": cfg.temp_bounds[1],
        "current_min": cfg.current_bounds[0], "current_max": cfg.current_bounds[1],
    }
    return [(key, repr(values[key]), unit) for key, unit in _PLANT_KEYS]


def save_plant_config(cfg: PlantConfig, path: str) -> None:
    atomic_write_text(path, format_kv(plant_config_items(cfg)))


def plant_config_from_kv(kv: dict[str, str], base: PlantConfig | None = None) -> PlantConfig:
    base = base or PlantConfig()
    bk = base.constants
    constants = PhysicalConstants(
        seebeck=float(kv.get("seebeck", bk.seebeck)),
        internal_resistance=float(kv.get("internal_resistance", bk.internal_resistance)),
        heat_transfer=float(kv.get("heat_transfer", bk.heat_transfer)),
        hot_side_temp=float(kv.get("hot_side_temp", bk.hot_side_temp)),
        equiv_mass=float(kv.get("equiv_mass", bk.equiv_mass)),
        heat_capacity=float(kv.get("heat_capacity", bk.heat_capacity)),
    )
    return replace(
        base,
        constants=constants,
        laser_power=float(kv.get("laser_power", base.laser_power)),
        heat_load_efficiency=float(kv.get("heat_load_efficiency", base.heat_load_efficiency)),
        sensor_noise_std=float(kv.get("sensor_noise_std", base.sensor_noise_std)),
        sample_period=float(kv.get("sample_period", base.sample_period)),
        substeps_per_sample=int(kv.get("substeps_per_sample", base.substeps_per_sample)),
        temp_bounds=(float(kv.get("temp_min", base.temp_bounds[0])),
                     float(kv.get("temp_max", base.temp_bounds[1]))),
        current_bounds=(float(kv.get("current_min", base.current_bounds[0])),
                        float(kv.get("current_max", base.current_bounds[1]))),
    )


def load_plant_config(path: str) -> PlantConfig:
    return plant_config_from_kv(read_kv(path))
