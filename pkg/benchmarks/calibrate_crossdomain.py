"""Calibration sweep: physics-weight sensitivity of out-of-domain prediction.

Trains the physics-regularized model and the data-only ablation on low-power
excitation data, then scores multi-step prediction MAE on windows cut from
closed-loop traces at 1.5 W (a power never seen in training). Used once to
freeze the acceptance thresholds; see notes in the repo README.
"""

import sys
import time

import numpy as np

sys.path.insert(0, "src")

from thermoloop.datagen import ExcitationSpec, build_dataset, _window_arrays
from thermoloop.gru import ModelDims, forward_batch
from thermoloop.mpc import GruPredictor, MpcConfig, run_closed_loop
from thermoloop.plant import PlantConfig
from thermoloop.train import TrainConfig, fit


def eval_mae(params, dims, norm, traces, stride=2):
    hists, ctrls, tgts = [], [], []
    for res in traces:
        sl = res.controlled_slice()
        temps = res.trace.temp_meas_K[sl]
        amps = res.trace.current_A[sl]
        h, c, t = _window_arrays(temps, amps, dims.history_len, dims.horizon, stride)
        hists.append(h); ctrls.append(c); tgts.append(t)
    hist = np.concatenate(hists); ctrl = np.concatenate(ctrls); tgt = np.concatenate(tgts)
    preds = norm.denorm_temps(forward_batch(norm.norm_temps(hist),
                                            norm.norm_currents(ctrl), params))
    return float(np.mean(np.abs(preds - tgt))), hist.shape[0]


def main():
    duration = float(sys.argv[1]) if len(sys.argv) > 1 else 5600.0
    stride = int(sys.argv[2]) if len(sys.argv) > 2 else 2
    weights = [0.0, 0.001, 0.01, 0.1]
    seeds = [0, 1, 2]
    dims = ModelDims()

    for seed in seeds:
        spec = ExcitationSpec(duration=duration, seed=seed)
        ds = build_dataset(spec, PlantConfig(), n=100, m=5, stride=stride)
        norm = ds.normalization
        models = {}
        for w in weights:
            t0 = time.perf_counter()
            params, log = fit(ds, dims, TrainConfig(epochs=10, seed=seed, physics_weight=w))
            models[w] = params
            print(f"seed={seed} w={w}: train {time.perf_counter()-t0:.0f}s "
                  f"val={log.val_rows[-1][1]:.2e}", flush=True)
        # evaluation traces at 1.5 W: each model controls once, windows pooled
        plant_cfg = PlantConfig(laser_power=1.5)
        cfg = MpcConfig(setpoint=303.15, seed=seed)
        traces = []
        for w in (0.0, 0.001):
            pred = GruPredictor(models[w], dims, norm)
            traces.append(run_closed_loop(plant_cfg, pred, cfg, duration=420.0,
                                          seed=100 + seed, initial_offset=-0.3))
        for w in weights:
            mae, nwin = eval_mae(models[w], dims, norm, traces)
            print(f"seed={seed} w={w}: OOD MAE {mae*1e3:.3f} mK over {nwin} windows", flush=True)


if __name__ == "__main__":
    main()
