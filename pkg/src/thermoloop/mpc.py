"""Receding-horizon control by constrained particle-swarm search.

每 tick the controller encodes the measurement history once, then evolves a
swarm of candidate m-step current sequences inside the actuator box: velocity
update with inertia plus attraction to personal/global bests, componentwise
clamping back into the box, and a tracking cost

    J = sum_l (That_l - T_ref)^2 + w * sum_l (I_l - I_{l-1})^2

anchored at the previously applied current. Candidates whose predicted
temperatures leave the thermal safety box are punished with their personal
best cost plus one (a large sentinel before any personal best exists), so a
violator can never become the global best while any feasible candidate has
been seen. Only the first element of the winning sequence is applied.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import plant as plant_mod
from .datagen import Normalization
from .gru import ModelDims, ModelParams, decode_candidates, encode_history_batch

PENALTY_SENTINEL = 1e6


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 5
    swarm_size: int = 100
    iterations: int = 30
    inertia: float = 0.5
    accel_personal: float = 1.5
    accel_global: float = 1.5
    current_bounds: tuple[float, float] = (-2.0, 2.0)    # A, actuator box
    temp_bounds: tuple[float, float] = (278.15, 313.15)  # K, thermal safety box
    control_cost_weight: float = 0.01
    setpoint: float = 303.15        # K
    solve_budget: float = 0.1       # s of wall clock per solve
    seed: int = 0
    init_velocity_fraction: float = 0.1  # of box width, for initial velocities
    warm_start: bool = False        # seed one particle with the shifted previous optimum

    def __post_init__(self):
        if self.horizon < 1 or self.swarm_size < 1 or self.iterations < 1:
            raise ValueError("horizon, swarm_size and iterations must be >= 1")
        if self.current_bounds[0] > self.current_bounds[1]:
            raise ValueError("current_bounds must be ordered")
        if self.solve_budget <= 0:
            raise ValueError("solve_budget must be > 0")


@dataclass
class Swarm:
    positions: np.ndarray        # (P, m) amperes
    velocities: np.ndarray       # (P, m)
    costs: np.ndarray            # (P,) cost of current positions
    best_positions: np.ndarray   # (P, m)
    best_costs: np.ndarray       # (P,)
    global_best_position: np.ndarray  # (m,)
    global_best_cost: float
    iteration: int = 0


def cost(pred_temps: np.ndarray, currents: np.ndarray, prev_applied: float,
         cfg: MpcConfig) -> float:
    """Tracking error plus control-variation cost of one candidate."""
    pred_temps = np.asarray(pred_temps, dtype=np.float64)
    currents = np.asarray(currents, dtype=np.float64)
    if pred_temps.shape != (cfg.horizon,) or currents.shape != (cfg.horizon,):
        raise ValueError(f"expected length-{cfg.horizon} sequences, got "
                         f"{pred_temps.shape} and {currents.shape}")
    track = float(np.sum((pred_temps - cfg.setpoint) ** 2))
    deltas = np.diff(currents, prepend=prev_applied)
    return track + cfg.control_cost_weight * float(np.sum(deltas ** 2))


def _batch_costs(pred_temps: np.ndarray, positions: np.ndarray, prev_applied: float,
                 cfg: MpcConfig) -> np.ndarray:
    track = np.sum((pred_temps - cfg.setpoint) ** 2, axis=1)
    deltas = np.diff(positions, axis=1, prepend=np.full((positions.shape[0], 1),
                                                        prev_applied))
    return track + cfg.control_cost_weight * np.sum(deltas ** 2, axis=1)


def evaluate_candidates(history: np.ndarray, positions: np.ndarray, predictor,
                        cfg: MpcConfig, prev_applied: float = 0.0,
                        personal_best_costs: np.ndarray | None = None) -> np.ndarray:
    """Cost every candidate sequence; safety violators get personal best + 1."""
    positions = np.asarray(positions, dtype=np.float64)
    preds = predictor.predict(np.asarray(history, dtype=np.float64), positions)
    costs = _batch_costs(preds, positions, prev_applied, cfg)
    lo, hi = cfg.temp_bounds
    violating = np.any((preds < lo) | (preds > hi), axis=1)
    if np.any(violating):
        if personal_best_costs is None:
            penal = np.full(positions.shape[0], PENALTY_SENTINEL)
        else:
            penal = np.where(np.isfinite(personal_best_costs),
                             personal_best_costs + 1.0, PENALTY_SENTINEL)
        costs = np.where(violating, penal, costs)
    return costs


def pso_update(swarm: Swarm, cfg: MpcConfig, rng: np.random.Generator) -> Swarm:
    """Refresh bests from current costs, then move every particle (in place)."""
    improved = swarm.costs < swarm.best_costs
    swarm.best_costs = np.where(improved, swarm.costs, swarm.best_costs)
    swarm.best_positions = np.where(improved[:, None], swarm.positions,
                                    swarm.best_positions)
    champion = int(np.argmin(swarm.best_costs))
    if swarm.best_costs[champion] < swarm.global_best_cost:
        swarm.global_best_cost = float(swarm.best_costs[champion])
        swarm.global_best_position = swarm.best_positions[champion].copy()

    shape = swarm.positions.shape
    r1 = rng.uniform(size=shape)
    r2 = rng.uniform(size=shape)
    swarm.velocities = (cfg.inertia * swarm.velocities
                        + cfg.accel_personal * r1 * (swarm.best_positions - swarm.positions)
                        + cfg.accel_global * r2 * (swarm.global_best_position - swarm.positions))
    lo, hi = cfg.current_bounds
    swarm.positions = np.clip(swarm.positions + swarm.velocities, lo, hi)
    swarm.iteration += 1
    return swarm


@dataclass
class SolveDiagnostics:
    best_cost_history: list[float]
    solve_time: float
    over_budget: bool
    iterations_run: int


def solve(history: np.ndarray, prev_applied: float, predictor, cfg: MpcConfig,
          rng: np.random.Generator | None = None,
          init_position: np.ndarray | None = None) -> tuple[np.ndarray, SolveDiagnostics]:
    """One receding-horizon optimization; returns the best m-step sequence.

    Hitting the wall-clock budget returns the best found so far with the
    over-budget flag set instead of blocking the control loop.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    start = time.perf_counter()
    lo, hi = cfg.current_bounds
    p, m = cfg.swarm_size, cfg.horizon
    positions = rng.uniform(lo, hi, size=(p, m))
    vspan = cfg.init_velocity_fraction * (hi - lo)
    velocities = rng.uniform(-vspan, vspan, size=(p, m))
    if init_position is not None:
        positions[0] = np.clip(init_position, lo, hi)

    swarm = Swarm(positions=positions, velocities=velocities,
                  costs=np.full(p, np.inf),
                  best_positions=positions.copy(),
                  best_costs=np.full(p, np.inf),
                  global_best_position=positions[0].copy(),
                  global_best_cost=float("inf"))

    best_history: list[float] = []
    over_budget = False
    iterations = 0
    for _ in range(cfg.iterations):
        swarm.costs = evaluate_candidates(history, swarm.positions, predictor, cfg,
                                          prev_applied, swarm.best_costs)
        pso_update(swarm, cfg, rng)
        best_history.append(swarm.global_best_cost)
        iterations += 1
        if time.perf_counter() - start > cfg.solve_budget:
            over_budget = iterations < cfg.iterations
            break
    elapsed = time.perf_counter() - start
    return swarm.global_best_position.copy(), SolveDiagnostics(
        best_cost_history=best_history, solve_time=elapsed,
        over_budget=over_budget, iterations_run=iterations)


# --- predictors --------------------------------------------------------------


@dataclass(frozen=True)
class LinearModel:
    """Scalar first-order surrogate in Celsius: T(k) = decay*T(k-1) + gain*I(k)."""

    gain: float = 0.028   # degC per ampere
    decay: float = 0.988


def linear_predict(history_last: float, currents: np.ndarray,
                   model: LinearModel) -> np.ndarray:
    """Iterate the scalar recurrence from the last measured temperature (K in/out)."""
    currents = np.asarray(currents, dtype=np.float64)
    temp_c = history_last - 273.15
    out = np.empty(currents.shape[-1])
    for l in range(currents.shape[-1]):
        temp_c = model.decay * temp_c + model.gain * currents[l]
        out[l] = temp_c
    return out + 273.15


class LinearPredictor:
    """Batch adapter of the first-order surrogate for the swarm solver."""

    def __init__(self, model: LinearModel | None = None, history_len: int = 100):
        self.model = model or LinearModel()
        self.history_len = history_len  # buffer depth only; the recurrence reads one sample

    def predict(self, history: np.ndarray, currents: np.ndarray) -> np.ndarray:
        currents = np.atleast_2d(currents)
        temp_c = np.full(currents.shape[0], history[-1] - 273.15)
        out = np.empty_like(currents)
        for l in range(currents.shape[1]):
            temp_c = self.model.decay * temp_c + self.model.gain * currents[:, l]
            out[:, l] = temp_c
        return out + 273.15


class GruPredictor:
    """Checkpointed GRU adapter; encodes each distinct history exactly once.

    The history encoding is cached and reused while the solver evaluates
    thousands of candidates against the same measurement window, which is what
    keeps a full solve within the latency budget.
    """

    def __init__(self, params: ModelParams, dims: ModelDims, norm: Normalization):
        self.params = params
        self.dims = dims
        self.norm = norm
        self.history_len = dims.history_len
        self._cached_history: np.ndarray | None = None
        self._cached_hidden: np.ndarray | None = None

    def _hidden_for(self, history: np.ndarray) -> np.ndarray:
        if (self._cached_history is not None
                and history.shape == self._cached_history.shape
                and np.array_equal(history, self._cached_history)):
            return self._cached_hidden
        hist_n = self.norm.norm_temps(history)
        hidden = encode_history_batch(hist_n[None, :], self.params)[0]
        self._cached_history = history.copy()
        self._cached_hidden = hidden
        return hidden

    def predict(self, history: np.ndarray, currents: np.ndarray) -> np.ndarray:
        history = np.asarray(history, dtype=np.float64)
        if history.shape != (self.dims.history_len,):
            raise ValueError(f"history length {history.shape} != {self.dims.history_len}")
        currents = np.atleast_2d(np.asarray(currents, dtype=np.float64))
        hidden = self._hidden_for(history)
        ctrl_n = self.norm.norm_currents(currents)
        preds_n = decode_candidates(hidden, ctrl_n, self.params)
        return self.norm.denorm_temps(preds_n)


# --- acquisition buffer ------------------------------------------------------


class AcquisitionBuffer:
    """Bounded single-producer/single-consumer measurement queue.

    The simulation drives it synchronously, but the contract (producer pushes,
    consumer snapshots the latest window without blocking the producer) is
    what a hardware acquisition thread would substitute into.
    """

    def __init__(self, capacity: int):
        self._buf: deque[float] = deque(maxlen=capacity)
        self.capacity = capacity

    def push(self, value: float) -> None:
        self._buf.append(float(value))

    def __len__(self) -> int:
        return len(self._buf)

    @property
    def ready(self) -> bool:
        return len(self._buf) == self.capacity

    def latest(self) -> float | None:
        return self._buf[-1] if self._buf else None

    def window(self) -> np.ndarray:
        if not self.ready:
            raise ValueError(f"buffer holds {len(self._buf)}/{self.capacity} samples")
        return np.asarray(self._buf, dtype=np.float64)


# --- closed loop --------------------------------------------------------------


@dataclass
class ClosedLoopResult:
    trace: plant_mod.Trajectory
    solve_ms: np.ndarray          # per tick; 0 during warm-up
    best_cost: np.ndarray         # per tick; nan during warm-up
    warmup_ticks: int
    over_budget_count: int
    controller: str

    def controlled_slice(self) -> slice:
        return slice(self.warmup_ticks, len(self.trace))

    CSV_HEADER = "tick,time_s,temp_meas_K,temp_true_K,current_A,solve_ms,global_best_cost"

    def to_csv(self, path: str) -> None:
        from .configio import AtomicTextFile
        tr = self.trace
        with AtomicTextFile(path) as fh:
            fh.write(self.CSV_HEADER + "\n")
            for i in range(len(tr)):
                fh.write(f"{i},{float(tr.time_s[i])!r},{float(tr.temp_meas_K[i])!r},"
                         f"{float(tr.temp_true_K[i])!r},{float(tr.current_A[i])!r},"
                         f"{float(self.solve_ms[i])!r},{float(self.best_cost[i])!r}\n")


MAX_CONSECUTIVE_OVER_BUDGET = 50


def warmup_current(plant_cfg: plant_mod.PlantConfig, setpoint: float) -> float:
    """Hold current for the warm-up phase.

    Prefers the exact heat-balance equilibrium at the setpoint; when none is
    within actuator bounds, falls back to inverting the first-order surrogate
    and clamping (a reachable setpoint never needs the fallback).
    """
    try:
        return plant_mod.equilibrium_current(plant_cfg, setpoint)
    except ValueError:
        model = LinearModel()
        hold = (1.0 - model.decay) * (setpoint - 273.15) / model.gain
        lo, hi = plant_cfg.current_bounds
        return float(np.clip(hold, lo, hi))


def run_closed_loop(plant_cfg: plant_mod.PlantConfig, predictor, cfg: MpcConfig,
                    duration: float, seed: int, controller_name: str = "mpc",
                    initial_offset: float = 0.0) -> ClosedLoopResult:
    """Warm up the history buffer at a hold current, then control every tick.

    The plant starts at ``setpoint + initial_offset``; each tick reads one
    measurement into the acquisition buffer, solves for the m-step sequence
    and applies its first element. Deterministic given ``seed``.
    """
    n_history = getattr(predictor, "history_len", 100)
    total_ticks = int(round(duration / plant_cfg.sample_period))
    warmup = min(n_history, total_ticks)

    ss = np.random.SeedSequence(seed)
    noise_seed, solver_seed = ss.spawn(2)
    noise_rng = np.random.default_rng(noise_seed)
    solver_rng = np.random.default_rng(solver_seed)

    state = plant_mod.PlantState(cfg.setpoint + initial_offset)
    hold = warmup_current(plant_cfg, cfg.setpoint)
    buffer = AcquisitionBuffer(n_history)

    times = np.empty(total_ticks)
    currents = np.empty(total_ticks)
    true_temps = np.empty(total_ticks)
    meas_temps = np.empty(total_ticks)
    solve_ms = np.zeros(total_ticks)
    best_cost = np.full(total_ticks, np.nan)

    prev_applied = hold
    last_optimum: np.ndarray | None = None
    over_budget_count = 0
    consecutive_over = 0
    for tick in range(total_ticks):
        if tick < warmup:
            current = hold
        else:
            history = buffer.window()
            init_position = None
            if cfg.warm_start and last_optimum is not None:
                init_position = np.concatenate([last_optimum[1:], last_optimum[-1:]])
            sequence, diag = solve(history, prev_applied, predictor, cfg,
                                   rng=solver_rng, init_position=init_position)
            last_optimum = sequence
            current = float(sequence[0])
            solve_ms[tick] = diag.solve_time * 1e3
            best_cost[tick] = diag.best_cost_history[-1] if diag.best_cost_history else np.nan
            if diag.over_budget:
                over_budget_count += 1
                consecutive_over += 1
                if consecutive_over > MAX_CONSECUTIVE_OVER_BUDGET:
                    raise RuntimeError(
                        f"{controller_name}: solver exceeded its {cfg.solve_budget}s "
                        f"budget on {consecutive_over} consecutive ticks (tick {tick})")
            else:
                consecutive_over = 0
        try:
            state = plant_mod.step(state, current, plant_cfg)
        except plant_mod.DivergenceError as exc:
            raise plant_mod.DivergenceError(
                f"{controller_name} at tick {tick} (t={state.time:.1f} s): {exc}") from exc
        reading = plant_mod.measure(state, plant_cfg, noise_rng)
        buffer.push(reading)
        prev_applied = current
        times[tick] = state.time
        currents[tick] = current
        true_temps[tick] = state.cold_side_temp
        meas_temps[tick] = reading

    trace = plant_mod.Trajectory(times, currents, true_temps, meas_temps)
    return ClosedLoopResult(trace=trace, solve_ms=solve_ms, best_cost=best_cost,
                            warmup_ticks=warmup, over_budget_count=over_budget_count,
                            controller=controller_name)


def load_closed_loop_csv(path: str) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Read a closed-loop trace CSV; returns (tick, column arrays)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != ClosedLoopResult.CSV_HEADER:
            raise ValueError(f"{path}:1: expected header {ClosedLoopResult.CSV_HEADER!r}")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    names = header.split(",")
    data = np.array([[float(v) for v in row] for row in rows]) if rows else np.empty((0, len(names)))
    cols = {name: data[:, i] for i, name in enumerate(names)}
    return cols["tick"], cols
