"""Randomized open-loop excitation datasets and supervised windowing.

A dataset is built per pump-power level: a piecewise-constant random current
signal excites the simulated plant, the measured trajectory is cut into
maximally overlapping (history, control, target) windows, and z-score
normalization statistics are computed from the training split only.

On-disk format: ``dataset.csv`` with columns ``window_id,role,idx,value``
(role one of ``hist_T``/``ctrl_I``/``tgt_T``, values in kelvin / amperes) plus
a JSON sidecar ``dataset.meta.json`` carrying normalization constants, the
excitation spec echo, per-trajectory provenance and the train/val split.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import plant
from .configio import AtomicTextFile, atomic_write_text

DEFAULT_POWER_LEVELS = (0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60)


@dataclass(frozen=True)
class ExcitationSpec:
    """Open-loop excitation protocol (duration is total across all levels)."""

    duration: float = 20000.0                      # s, summed over power levels
    current_range: tuple[float, float] = (-2.0, 2.0)   # A
    update_freq_range: tuple[float, float] = (0.05, 5.0)  # Hz
    power_levels: tuple[float, ...] = DEFAULT_POWER_LEVELS  # W
    seed: int = 0

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be > 0")
        if self.current_range[0] > self.current_range[1]:
            raise ValueError(f"current_range must be ordered, got {self.current_range}")
        if not 0 < self.update_freq_range[0] <= self.update_freq_range[1]:
            raise ValueError(f"update_freq_range must be ordered and positive, got {self.update_freq_range}")
        if len(self.power_levels) == 0:
            raise ValueError("power_levels must be non-empty")


@dataclass(frozen=True)
class SampleWindow:
    """One supervised triple; target temps immediately follow the history."""

    history_temps: np.ndarray    # n kelvin values
    control_currents: np.ndarray  # m ampere values
    target_temps: np.ndarray     # m kelvin values

    def __eq__(self, other):
        return (isinstance(other, SampleWindow)
                and np.array_equal(self.history_temps, other.history_temps)
                and np.array_equal(self.control_currents, other.control_currents)
                and np.array_equal(self.target_temps, other.target_temps))


@dataclass(frozen=True)
class Normalization:
    temp_mean: float
    temp_std: float
    current_scale: float

    def __post_init__(self):
        if not self.temp_std > 0:
            raise ValueError(f"temp_std must be > 0, got {self.temp_std}")
        if not self.current_scale > 0:
            raise ValueError(f"current_scale must be > 0, got {self.current_scale}")

    def norm_temps(self, temps):
        return (np.asarray(temps, dtype=np.float64) - self.temp_mean) / self.temp_std

    def denorm_temps(self, normed):
        return np.asarray(normed, dtype=np.float64) * self.temp_std + self.temp_mean

    def norm_currents(self, currents):
        return np.asarray(currents, dtype=np.float64) / self.current_scale

    def denorm_currents(self, normed):
        return np.asarray(normed, dtype=np.float64) * self.current_scale


@dataclass(frozen=True)
class TrajectoryInfo:
    """Provenance of the windows cut from one excitation trajectory."""

    power: float
    initial_temp: float
    num_samples: int
    first_window: int
    num_windows: int
    val_start: int  # window id where the validation tail of this trajectory begins


@dataclass
class Dataset:
    """Stacked sample windows plus normalization and provenance."""

    hist: np.ndarray      # (W, n) kelvin
    ctrl: np.ndarray      # (W, m) amperes
    tgt: np.ndarray       # (W, m) kelvin
    normalization: Normalization
    spec: ExcitationSpec
    trajectories: list[TrajectoryInfo] = field(default_factory=list)
    n: int = 100
    m: int = 5
    stride: int = 1
    val_fraction: float = 0.1

    def __len__(self) -> int:
        return self.hist.shape[0]

    def __getitem__(self, i: int) -> SampleWindow:
        return SampleWindow(self.hist[i], self.ctrl[i], self.tgt[i])

    def window_power(self, i: int) -> float:
        for info in self.trajectories:
            if info.first_window <= i < info.first_window + info.num_windows:
                return info.power
        raise IndexError(i)

    def train_indices(self) -> np.ndarray:
        parts = [np.arange(t.first_window, t.val_start) for t in self.trajectories]
        return np.concatenate(parts) if parts else np.empty(0, dtype=int)

    def val_indices(self) -> np.ndarray:
        parts = [np.arange(t.val_start, t.first_window + t.num_windows) for t in self.trajectories]
        return np.concatenate(parts) if parts else np.empty(0, dtype=int)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (np.array_equal(self.hist, other.hist)
                and np.array_equal(self.ctrl, other.ctrl)
                and np.array_equal(self.tgt, other.tgt)
                and self.normalization == other.normalization
                and self.spec == other.spec
                and self.trajectories == other.trajectories
                and (self.n, self.m, self.stride, self.val_fraction)
                == (other.n, other.m, other.stride, other.val_fraction))


def generate_excitation(spec: ExcitationSpec, num_samples: int | None = None,
                        rng: np.random.Generator | None = None,
                        sample_period: float = 0.2) -> np.ndarray:
    """Piecewise-constant random current signal.

    Hold lengths are 1/f seconds with f uniform in ``update_freq_range``
    (rounded to whole samples, at least one); values are uniform in
    ``current_range``. Deterministic given the rng state.
    """
    if num_samples is None:
        num_samples = int(round(spec.duration / sample_period))
    if num_samples < 0:
        raise ValueError("num_samples must be >= 0")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    lo, hi = spec.current_range
    f_lo, f_hi = spec.update_freq_range
    out = np.empty(num_samples)
    pos = 0
    while pos < num_samples:
        freq = rng.uniform(f_lo, f_hi)
        hold = max(1, int(round((1.0 / freq) / sample_period)))
        value = rng.uniform(lo, hi)
        end = min(pos + hold, num_samples)
        out[pos:end] = value
        pos = end
    return out


def _window_arrays(temps: np.ndarray, currents: np.ndarray, n: int, m: int,
                   stride: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    temps = np.asarray(temps, dtype=np.float64)
    currents = np.asarray(currents, dtype=np.float64)
    if temps.shape != currents.shape or temps.ndim != 1:
        raise ValueError(f"temps and currents must be equal-length 1-D sequences, "
                         f"got {temps.shape} and {currents.shape}")
    if n < 1 or m < 1 or stride < 1:
        raise ValueError("n, m and stride must all be >= 1")
    total = temps.size
    if total < n + m:
        raise ValueError(f"sequence of length {total} is too short for n={n}, m={m} "
                         f"(need at least {n + m} samples)")
    count = (total - n - m) // stride + 1
    starts = stride * np.arange(count)
    hist = np.stack([temps[s:s + n] for s in starts])
    tgt = np.stack([temps[s + n:s + n + m] for s in starts])
    ctrl = np.stack([currents[s + n:s + n + m] for s in starts])
    return hist, ctrl, tgt


def window_trajectory(temps, currents, n: int, m: int, stride: int = 1) -> list[SampleWindow]:
    """Cut a trajectory into contiguous (history, control, target) windows."""
    hist, ctrl, tgt = _window_arrays(temps, currents, n, m, stride)
    return [SampleWindow(hist[i], ctrl[i], tgt[i]) for i in range(hist.shape[0])]


def build_dataset(spec: ExcitationSpec, plant_cfg: plant.PlantConfig,
                  n: int = 100, m: int = 5, stride: int = 1,
                  val_fraction: float = 0.1,
                  initial_temp: float | None = None) -> Dataset:
    """Excite the plant at every power level and window the measurements.

    Each level gets ``duration / len(power_levels)`` seconds of excitation from
    its own seeded substream. Trajectories are truncated at the first safety
    bound violation. When ``initial_temp`` is None each trajectory starts at a
    seeded random offset a little above the hot-side temperature, which is the
    only region the actuator can hold, so the windows cover the band closed
    loops operate in.
    """
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must lie in [0, 1)")
    ss = np.random.SeedSequence(spec.seed)
    children = ss.spawn(len(spec.power_levels))
    per_level = int(round(spec.duration / len(spec.power_levels) / plant_cfg.sample_period))

    hists, ctrls, tgts, infos = [], [], [], []
    first_window = 0
    for power, child in zip(spec.power_levels, children):
        rng = np.random.default_rng(child)
        currents = generate_excitation(spec, per_level, rng, plant_cfg.sample_period)
        hot = plant_cfg.constants.hot_side_temp
        t0 = initial_temp if initial_temp is not None else hot + rng.uniform(2.0, 9.0)
        cfg_level = dataclasses.replace(plant_cfg, laser_power=power)
        try:
            traj = plant.simulate(plant.PlantState(t0), currents, cfg_level, rng=rng,
                                  truncate_at_bounds=True)
        except plant.DivergenceError as exc:
            raise plant.DivergenceError(f"power level {power} W: {exc}") from exc
        if len(traj) < n + m:
            raise ValueError(f"power level {power} W produced only {len(traj)} usable "
                             f"samples, need at least {n + m}")
        hist, ctrl, tgt = _window_arrays(traj.temp_meas_K, traj.current_A, n, m, stride)
        count = hist.shape[0]
        val_count = int(count * val_fraction)
        infos.append(TrajectoryInfo(power=power, initial_temp=float(t0),
                                    num_samples=len(traj), first_window=first_window,
                                    num_windows=count,
                                    val_start=first_window + count - val_count))
        hists.append(hist)
        ctrls.append(ctrl)
        tgts.append(tgt)
        first_window += count

    hist = np.concatenate(hists)
    ctrl = np.concatenate(ctrls)
    tgt = np.concatenate(tgts)
    dataset = Dataset(hist=hist, ctrl=ctrl, tgt=tgt,
                      normalization=Normalization(1.0, 1.0, 1.0),
                      spec=spec, trajectories=infos, n=n, m=m, stride=stride,
                      val_fraction=val_fraction)
    train = dataset.train_indices()
    if train.size == 0:
        raise ValueError("dataset has no training windows")
    temps = np.concatenate([hist[train].ravel(), tgt[train].ravel()])
    scale = max(abs(plant_cfg.current_bounds[0]), abs(plant_cfg.current_bounds[1]))
    std = float(np.std(temps))
    dataset.normalization = Normalization(temp_mean=float(np.mean(temps)),
                                          temp_std=std if std > 0 else 1.0,
                                          current_scale=scale)
    return dataset


# --- persistence ------------------------------------------------------------

_ROLES = ("hist_T", "ctrl_I", "tgt_T")


def save_dataset(dataset: Dataset, directory: str) -> tuple[str, str]:
    """Write dataset.csv + dataset.meta.json into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    csv_path = os.path.join(directory, "dataset.csv")
    meta_path = os.path.join(directory, "dataset.meta.json")

    with AtomicTextFile(csv_path) as fh:
        fh.write("window_id,role,idx,value\n")
        for w in range(len(dataset)):
            parts = []
            for role, row in zip(_ROLES, (dataset.hist[w], dataset.ctrl[w], dataset.tgt[w])):
                for idx, value in enumerate(row):
                    parts.append(f"{w},{role},{idx},{float(value)!r}\n")
            fh.write("".join(parts))

    meta = {
        "format": 1,
        "n": dataset.n, "m": dataset.m, "stride": dataset.stride,
        "val_fraction": dataset.val_fraction,
        "normalization": dataclasses.asdict(dataset.normalization),
        "excitation": {
            "duration": dataset.spec.duration,
            "current_range": list(dataset.spec.current_range),
            "update_freq_range": list(dataset.spec.update_freq_range),
            "power_levels": list(dataset.spec.power_levels),
            "seed": dataset.spec.seed,
        },
        "trajectories": [dataclasses.asdict(t) for t in dataset.trajectories],
    }
    atomic_write_text(meta_path, json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return csv_path, meta_path


def load_dataset(directory: str) -> Dataset:
    """Inverse of :func:`save_dataset`; errors name the offending CSV row."""
    csv_path = os.path.join(directory, "dataset.csv")
    meta_path = os.path.join(directory, "dataset.meta.json")
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format") != 1:
        raise ValueError(f"{meta_path}: unsupported dataset format {meta.get('format')!r}")
    n, m = int(meta["n"]), int(meta["m"])

    try:
        frame = pd.read_csv(csv_path, dtype={"window_id": np.int64, "role": str,
                                             "idx": np.int64, "value": np.float64},
                            float_precision="round_trip")
    except (pd.errors.ParserError, ValueError) as exc:
        raise ValueError(f"{csv_path}: malformed dataset file: {exc}") from exc
    if list(frame.columns) != ["window_id", "role", "idx", "value"]:
        raise ValueError(f"{csv_path}:1: unexpected columns {list(frame.columns)}")
    if frame.isna().any().any():
        row = int(frame.isna().any(axis=1).idxmax())
        raise ValueError(f"{csv_path}:{row + 2}: truncated or non-numeric row")

    counts = {"hist_T": n, "ctrl_I": m, "tgt_T": m}
    num_windows = 0 if frame.empty else int(frame["window_id"].max()) + 1
    rows_per_window = n + 2 * m
    if len(frame) != num_windows * rows_per_window:
        raise ValueError(f"{csv_path}: expected {num_windows * rows_per_window} data rows "
                         f"for {num_windows} windows, found {len(frame)}")

    hist = np.full((num_windows, n), np.nan)
    ctrl = np.full((num_windows, m), np.nan)
    tgt = np.full((num_windows, m), np.nan)
    arrays = {"hist_T": hist, "ctrl_I": ctrl, "tgt_T": tgt}
    for role, arr in arrays.items():
        sub = frame[frame["role"] == role]
        if len(sub) != num_windows * counts[role]:
            raise ValueError(f"{csv_path}: role {role} has {len(sub)} rows, "
                             f"expected {num_windows * counts[role]}")
        wid = sub["window_id"].to_numpy()
        idx = sub["idx"].to_numpy()
        if np.any(idx < 0) or np.any(idx >= counts[role]):
            bad = int(sub.index[(idx < 0) | (idx >= counts[role])][0])
            raise ValueError(f"{csv_path}:{bad + 2}: idx out of range for role {role}")
        arr[wid, idx] = sub["value"].to_numpy()
    for role, arr in arrays.items():
        if np.isnan(arr).any():
            w, i = np.argwhere(np.isnan(arr))[0]
            raise ValueError(f"{csv_path}: missing {role} entry for window {w}, idx {i}")

    norm = Normalization(**meta["normalization"])
    exc_meta = meta["excitation"]
    spec = ExcitationSpec(duration=exc_meta["duration"],
                          current_range=tuple(exc_meta["current_range"]),
                          update_freq_range=tuple(exc_meta["update_freq_range"]),
                          power_levels=tuple(exc_meta["power_levels"]),
                          seed=exc_meta["seed"])
    infos = [TrajectoryInfo(**t) for t in meta["trajectories"]]
    return Dataset(hist=hist, ctrl=ctrl, tgt=tgt, normalization=norm, spec=spec,
                   trajectories=infos, n=n, m=m, stride=int(meta["stride"]),
                   val_fraction=float(meta["val_fraction"]))
