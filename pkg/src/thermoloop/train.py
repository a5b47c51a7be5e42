"""Joint data + physics training of the GRU predictor.

The loss blends the normalized-space MSE with the squared residual of the
discrete thermal balance evaluated on denormalized predictions:

    total = (1 - w_eff) * mse + w_eff * physics
    residual_l = (T[l] - T[l-1]) / dt
                 - (S*I[l]*T[l] - 0.5*I[l]^2*R - K*(Th - T[l])) / (m_e*c)

for horizon steps l = 2..m, averaged over batch and residual count. The
effective physics weight ramps linearly over the first ``ramp_epochs`` epochs
(phased constraint introduction); ``physics_weight = 0`` gives the purely
data-driven ablation and skips the physics path entirely, so an ablation run
is bit-identical to a trainer with no physics code at all.

Gradients are exact reverse-mode derivatives through the full unroll,
including the denormalization inside the physics term; the finite-difference
oracle lives in the test suite only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .accel import jit_kernel
from .datagen import Dataset, Normalization
from .gru import ModelDims, ModelParams, forward_batch, init_params, zero_params_like
from .plant import PhysicalConstants


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.01
    physics_weight: float = 0.001      # blend weight of the physics residual
    ramp_epochs: int = 3               # linear ramp of the physics weight
    lr_step_epochs: int = 4            # StepLR: decay every this many epochs
    lr_decay_factor: float = 0.5
    seed: int = 0
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)
    sample_period: float = 0.2         # s between consecutive horizon steps

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.physics_weight < 1.0:
            raise ValueError("physics_weight must lie in [0, 1)")
        if self.learning_rate <= 0 or self.sample_period <= 0:
            raise ValueError("learning_rate and sample_period must be > 0")

    def effective_weight(self, epoch: int) -> float:
        """Physics weight at a (zero-based) epoch, with the linear ramp applied."""
        if self.physics_weight == 0.0:
            return 0.0
        if self.ramp_epochs <= 0:
            return self.physics_weight
        return self.physics_weight * min(1.0, epoch / self.ramp_epochs)


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    timestep: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams, **kw) -> "AdamState":
        return cls(first_moment={n: np.zeros_like(a) for n, a in params.tensors()},
                   second_moment={n: np.zeros_like(a) for n, a in params.tensors()},
                   **kw)


@dataclass(frozen=True)
class LossReport:
    data_loss: float
    physics_loss: float   # nan when the physics path was skipped
    total: float
    lambda_eff: float


@dataclass(frozen=True)
class Batch:
    """Normalized training arrays plus the statistics that produced them."""

    hist: np.ndarray   # (B, n) normalized temperatures
    ctrl: np.ndarray   # (B, m) normalized currents
    tgt: np.ndarray    # (B, m) normalized temperatures
    norm: Normalization


def data_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error over batch and horizon."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("empty batch")
    return float(np.mean((pred - target) ** 2))


def physics_residuals(pred_temps: np.ndarray, currents: np.ndarray,
                      consts: PhysicalConstants, dt: float) -> np.ndarray:
    """Discrete heat-balance residuals (B, m-1) in K/s, physical units in."""
    pred_temps = np.atleast_2d(np.asarray(pred_temps, dtype=np.float64))
    currents = np.atleast_2d(np.asarray(currents, dtype=np.float64))
    if pred_temps.shape != currents.shape:
        raise ValueError(f"shape mismatch: {pred_temps.shape} vs {currents.shape}")
    if pred_temps.shape[1] < 2:
        raise ValueError(f"physics residual needs horizon >= 2, got {pred_temps.shape[1]}")
    mc = consts.thermal_mass
    t_now = pred_temps[:, 1:]
    t_prev = pred_temps[:, :-1]
    i_now = currents[:, 1:]
    balance = (consts.seebeck * i_now * t_now
               - 0.5 * i_now ** 2 * consts.internal_resistance
               - consts.heat_transfer * (consts.hot_side_temp - t_now))
    return (t_now - t_prev) / dt - balance / mc


def physics_loss(pred_temps: np.ndarray, currents: np.ndarray,
                 consts: PhysicalConstants, dt: float) -> float:
    """Mean squared heat-balance residual over batch and steps 2..m."""
    res = physics_residuals(pred_temps, currents, consts, dt)
    return float(np.mean(res ** 2))


def total_loss(batch: Batch, params: ModelParams, cfg: TrainConfig,
               epoch: int) -> LossReport:
    preds = forward_batch(batch.hist, batch.ctrl, params)
    return _combine(preds, batch, cfg, epoch)


def _combine(preds: np.ndarray, batch: Batch, cfg: TrainConfig, epoch: int) -> LossReport:
    w_eff = cfg.effective_weight(epoch)
    d = data_loss(preds, batch.tgt)
    if cfg.physics_weight == 0.0:
        return LossReport(d, float("nan"), d, 0.0)
    temps = batch.norm.denorm_temps(preds)
    currents = batch.norm.denorm_currents(batch.ctrl)
    p = physics_loss(temps, currents, cfg.constants, cfg.sample_period)
    return LossReport(d, p, (1.0 - w_eff) * d + w_eff * p, w_eff)


@jit_kernel
def _gru_backward(hist, hs, zs, rs, cs, d_ht, u_z, u_r, u_c):
    """Reverse-mode pass through the unrolled recurrence.

    hist (B, n); hs (n+1, B, H) with hs[t] the state before step t; zs/rs/cs
    the cached gate values per step; d_ht (B, H) the upstream gradient at the
    final state. Returns gradients for the nine recurrent tensors.
    """
    n = zs.shape[0]
    batch = hist.shape[0]
    hidden = u_z.shape[0]
    uz_t = np.ascontiguousarray(u_z.T)
    ur_t = np.ascontiguousarray(u_r.T)
    uc_t = np.ascontiguousarray(u_c.T)
    dw_z = np.zeros(hidden)
    dw_r = np.zeros(hidden)
    dw_c = np.zeros(hidden)
    db_z = np.zeros(hidden)
    db_r = np.zeros(hidden)
    db_c = np.zeros(hidden)
    du_z = np.zeros((hidden, hidden))
    du_r = np.zeros((hidden, hidden))
    du_c = np.zeros((hidden, hidden))
    dh = d_ht.copy()
    for t in range(n - 1, -1, -1):
        z = zs[t]
        r = rs[t]
        c = cs[t]
        h_prev = hs[t]
        dz = dh * (c - h_prev)
        dac = (dh * z) * (1.0 - c * c)
        dh_prev = dh * (1.0 - z)
        rp = r * h_prev
        du_c += np.dot(np.ascontiguousarray(rp.T), dac)
        drp = np.dot(dac, uc_t)
        dr = drp * h_prev
        dh_prev += drp * r
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        du_z += np.dot(np.ascontiguousarray(h_prev.T), daz)
        du_r += np.dot(np.ascontiguousarray(h_prev.T), dar)
        dh_prev += np.dot(daz, uz_t) + np.dot(dar, ur_t)
        for b in range(batch):
            x = hist[b, t]
            dw_z += x * daz[b]
            dw_r += x * dar[b]
            dw_c += x * dac[b]
            db_z += daz[b]
            db_r += dar[b]
            db_c += dac[b]
        dh = dh_prev
    return dw_z, du_z, db_z, dw_r, du_r, db_r, dw_c, du_c, db_c


def gradients(batch: Batch, params: ModelParams, cfg: TrainConfig,
              epoch: int) -> tuple[ModelParams, LossReport]:
    """Exact gradients of the blended loss w.r.t. every parameter tensor."""
    preds, (gru_cache, a1, h1, _h_i, hcat) = forward_batch(batch.hist, batch.ctrl,
                                                           params, with_cache=True)
    report = _combine(preds, batch, cfg, epoch)
    b, m = preds.shape
    w_eff = report.lambda_eff

    # upstream gradient at the normalized decoder output
    d_out = (1.0 - w_eff) * (2.0 / (b * m)) * (preds - batch.tgt)
    if cfg.physics_weight > 0.0 and w_eff > 0.0:
        consts = cfg.constants
        mc = consts.thermal_mass
        dt = cfg.sample_period
        temps = batch.norm.denorm_temps(preds)
        currents = batch.norm.denorm_currents(batch.ctrl)
        res = physics_residuals(temps, currents, consts, dt)
        scale = 2.0 / (b * (m - 1))
        d_temps = np.zeros_like(temps)
        # residual l reads T[l] with slope 1/dt - (S*I[l] + K)/mc ...
        d_temps[:, 1:] += scale * res * (1.0 / dt - (consts.seebeck * currents[:, 1:]
                                                     + consts.heat_transfer) / mc)
        # ... and T[l-1] with slope -1/dt
        d_temps[:, :-1] += scale * res * (-1.0 / dt)
        d_out += w_eff * d_temps * batch.norm.temp_std

    grads = zero_params_like(params)
    hidden = params.b_z.shape[0]
    grads.w_y[:] = hcat.T @ d_out
    grads.b_y[:] = d_out.sum(axis=0)
    d_hcat = d_out @ params.w_y.T
    d_ht = d_hcat[:, :hidden]
    d_hi = d_hcat[:, hidden:]

    grads.w_i2[:] = h1.T @ d_hi
    grads.b_i2[:] = d_hi.sum(axis=0)
    d_h1 = d_hi @ params.w_i2.T
    d_a1 = d_h1 * (a1 > 0.0)
    grads.w_i1[:] = batch.ctrl.T @ d_a1
    grads.b_i1[:] = d_a1.sum(axis=0)

    hs, zs, rs, cs = gru_cache
    out = _gru_backward(np.ascontiguousarray(batch.hist), hs, zs, rs, cs,
                        np.ascontiguousarray(d_ht), params.u_z, params.u_r, params.u_c)
    (grads.w_z[:], grads.u_z[:], grads.b_z[:], grads.w_r[:], grads.u_r[:],
     grads.b_r[:], grads.w_c[:], grads.u_c[:], grads.b_c[:]) = out

    for name, arr in grads.tensors():
        if not np.all(np.isfinite(arr)):
            raise ArithmeticError(f"non-finite gradient in tensor {name}")
    return grads, report


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState,
              learning_rate: float) -> tuple[ModelParams, AdamState]:
    """Bias-corrected Adam update; functional, returns fresh params and state."""
    t = state.timestep + 1
    new_params = {}
    new_m = {}
    new_v = {}
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.tensors():
        g = getattr(grads, name)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}: {g.shape} vs {p.shape}")
        m = state.beta1 * state.first_moment[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.second_moment[name] + (1.0 - state.beta2) * g * g
        update = learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_params[name] = p - update
        new_m[name] = m
        new_v[name] = v
    return (ModelParams(**new_params),
            AdamState(first_moment=new_m, second_moment=new_v, timestep=t,
                      beta1=state.beta1, beta2=state.beta2, eps=state.eps))


@dataclass
class TrainLog:
    """Per-batch loss rows plus per-epoch validation MSE."""

    rows: list[tuple[int, int, float, float, float, float, float]] = field(default_factory=list)
    val_rows: list[tuple[int, float]] = field(default_factory=list)
    initial_val: float = float("nan")  # validation MSE of the freshly initialized model

    CSV_HEADER = "epoch,batch,data_loss,physics_loss,total,lr,lambda_eff"

    def to_csv(self) -> str:
        # validation summaries are interleaved with batch = -1
        lines = [self.CSV_HEADER]
        val = {epoch: mse for epoch, mse in self.val_rows}
        last_epoch = None
        for row in self.rows:
            if row[0] != last_epoch and last_epoch is not None and last_epoch in val:
                lines.append(f"{last_epoch},-1,{val[last_epoch]!r},nan,nan,nan,nan")
            last_epoch = row[0]
            epoch, batch_i, d, p, tot, lr, lam = row
            lines.append(f"{epoch},{batch_i},{d!r},{p!r},{tot!r},{lr!r},{lam!r}")
        if last_epoch is not None and last_epoch in val:
            lines.append(f"{last_epoch},-1,{val[last_epoch]!r},nan,nan,nan,nan")
        return "\n".join(lines) + "\n"


def fit(dataset: Dataset, dims: ModelDims, cfg: TrainConfig,
        progress=None) -> tuple[ModelParams, TrainLog]:
    """Run the full training loop; deterministic given ``cfg.seed``."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if dataset.n != dims.history_len or dataset.m != dims.horizon:
        raise ValueError(f"dataset windows ({dataset.n}, {dataset.m}) do not match "
                         f"model dims ({dims.history_len}, {dims.horizon})")
    norm = dataset.normalization
    hist = norm.norm_temps(dataset.hist)
    ctrl = norm.norm_currents(dataset.ctrl)
    tgt = norm.norm_temps(dataset.tgt)
    train_idx = dataset.train_indices()
    val_idx = dataset.val_indices()

    ss = np.random.SeedSequence(cfg.seed)
    init_seed, shuffle_seed = ss.spawn(2)
    params = init_params(dims, seed=np.random.default_rng(init_seed))
    shuffle_rng = np.random.default_rng(shuffle_seed)
    adam = AdamState.for_params(params)
    log = TrainLog()
    if val_idx.size:
        log.initial_val = _validation_epoch(hist, ctrl, tgt, val_idx, params)

    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.lr_decay_factor ** (epoch // cfg.lr_step_epochs)
        order = shuffle_rng.permutation(train_idx)
        for batch_i, start in enumerate(range(0, order.size, cfg.batch_size)):
            sel = order[start:start + cfg.batch_size]
            batch = Batch(hist[sel], ctrl[sel], tgt[sel], norm)
            grads, report = gradients(batch, params, cfg, epoch)
            if not math.isfinite(report.total):
                raise RuntimeError(f"non-finite loss at epoch {epoch}, batch {batch_i}: "
                                   f"{report}")
            params, adam = adam_step(params, grads, adam, lr)
            log.rows.append((epoch, batch_i, report.data_loss, report.physics_loss,
                             report.total, lr, report.lambda_eff))
        if val_idx.size:
            val_mse = _validation_epoch(hist, ctrl, tgt, val_idx, params)
            log.val_rows.append((epoch, val_mse))
            if progress is not None:
                progress(epoch, val_mse)
        elif progress is not None:
            progress(epoch, float("nan"))
    return params, log


def _validation_epoch(hist, ctrl, tgt, val_idx, params, chunk: int = 4096) -> float:
    total = 0.0
    count = 0
    for start in range(0, val_idx.size, chunk):
        sel = val_idx[start:start + chunk]
        preds = forward_batch(hist[sel], ctrl[sel], params)
        total += float(np.sum((preds - tgt[sel]) ** 2))
        count += preds.size
    return total / count
