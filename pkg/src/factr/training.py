"""Losses, Adam, the sharpness-aware two-pass step, the warm-restart
schedule, and the training loops (supervised, self-supervised, transfer).

Everything is deterministic given TrainConfig.seed: one Generator drives
batch order, dropout and patch masking, consumed in a fixed sequence.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .evaluation import evaluate
from .model import Forecaster, load_checkpoint
from .tensor import Tensor, no_grad


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses


def _check_shapes(pred: Tensor, target: np.ndarray):
    if tuple(pred.shape) != tuple(target.shape):
        raise TrainingError(f"prediction shape {pred.shape} vs target {target.shape}")


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    _check_shapes(pred, target)
    diff = pred - Tensor(np.asarray(target, dtype=pred.dtype))
    return (diff * diff).mean()


def mae_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    _check_shapes(pred, target)
    return (pred - Tensor(np.asarray(target, dtype=pred.dtype))).abs().mean()


def masked_mse_loss(pred: Tensor, target: np.ndarray, weight: np.ndarray) -> Tensor:
    """MSE restricted to weighted positions (pretraining's masked-only mode)."""
    _check_shapes(pred, target)
    total = float(weight.sum())
    if total == 0:
        raise TrainingError("masked loss with an all-zero weight")
    diff = pred - Tensor(np.asarray(target, dtype=pred.dtype))
    w = Tensor(np.asarray(weight, dtype=pred.dtype))
    return (diff * diff * w).sum() * (1.0 / total)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class TrainConfig:
    lr: float = 1e-4
    rho: float = 0.0                 # SAM radius; 0 short-circuits to plain Adam
    batch_size: int = 32
    max_epochs: int = 150
    patience: int | None = 10        # None disables early stopping
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_min: float = 1e-6
    restart_period: int = 10
    restart_mult: int = 2
    masked_only: bool = False        # pretraining: loss on masked patches only

    def validate(self):
        if self.lr <= 0 or self.lr_min < 0:
            raise TrainingError("learning rates must be positive")
        if self.rho < 0:
            raise TrainingError("rho must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise TrainingError("batch_size and max_epochs must be >= 1")
        if self.patience is not None and self.patience < 1:
            raise TrainingError("patience must be >= 1 or None")
        if self.restart_period < 1 or self.restart_mult < 1:
            raise TrainingError("restart_period and restart_mult must be >= 1")


class AdamState:
    """First/second moment buffers keyed by parameter name."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One bias-corrected Adam update, in the parameters' dtype."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        if name not in grads:
            raise TrainingError(f"no gradient supplied for parameter {name!r}")
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def _trainable(model: Forecaster) -> dict[str, Tensor]:
    return {n: p for n, p in model.params.items() if p.requires_grad}


def _collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    # Parameters that a variant leaves unused legitimately get no gradient;
    # a zero gradient keeps their Adam trajectory exactly frozen.
    return {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for n, p in params.items()}


def grad_global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def sam_step(model: Forecaster, loss_fn, state: AdamState, cfg: TrainConfig,
             lr: float) -> float:
    """Sharpness-aware update: ascend rho along the gradient, take the Adam
    step with the gradient measured there, descend back.

    loss_fn() must run a fresh taped forward and return the scalar loss.
    With rho == 0 the ascent pass is skipped entirely, which makes the
    trajectory bit-identical to plain Adam. Returns the loss at the
    unperturbed weights.
    """
    params = _trainable(model)
    model.zero_grad()
    loss = loss_fn()
    base = float(loss.data)
    loss.backward()
    grads = _collect_grads(params)

    if cfg.rho > 0.0:
        norm = grad_global_norm(grads)
        if norm > 0.0:
            scale = cfg.rho / norm
            # Keep the originals and assign back: += then -= would not
            # restore the weights bit-exactly in floating point.
            originals = {n: p.data for n, p in params.items()}
            for n, p in params.items():
                p.data = p.data + scale * grads[n]
            model.zero_grad()
            second = loss_fn()
            second.backward()
            grads = _collect_grads(params)
            for n, p in params.items():
                p.data = originals[n]

    adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return base


def cosine_warm_restart_lr(epoch: int, base_lr: float, lr_min: float = 1e-6,
                           period: int = 10, mult: int = 2) -> float:
    """Cosine annealing with warm restarts; epoch is 0-based.

    Cycle lengths are period, period*mult, period*mult^2, ... so restarts
    land at epochs 0, 10, 30, 70, ... for the defaults.
    """
    if epoch < 0:
        raise TrainingError("epoch must be >= 0")
    start, length = 0, period
    while epoch >= start + length:
        start += length
        length = length * mult
    frac = (epoch - start) / length
    return lr_min + 0.5 * (base_lr - lr_min) * (1.0 + np.cos(np.pi * frac))


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainData:
    """Normalized dataset plus split ranges and optional covariate codes."""

    dataset: D.SeriesDataset
    ranges: D.SplitRanges
    covariate_codes: np.ndarray | None = None


@dataclass
class LogRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainResult:
    log: list[LogRow]
    best_val: float
    best_epoch: int
    epochs_run: int
    best_state: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "seconds")


def log_to_tsv(rows: list[LogRow]) -> str:
    out = ["\t".join(LOG_COLUMNS)]
    for r in rows:
        out.append(f"{r.epoch}\t{r.train_loss:.8f}\t{r.val_loss:.8f}"
                   f"\t{r.lr:.8e}\t{r.seconds:.3f}")
    return "\n".join(out) + "\n"


def _snapshot(model: Forecaster) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in model.params.items()}


def _fit(model: Forecaster, data: TrainData, cfg: TrainConfig, batch_loss_factory,
         val_fn, early_stop: bool, window_horizon: int | None = None) -> TrainResult:
    """Shared epoch loop. batch_loss_factory(batch, rng) -> closure for
    sam_step; val_fn() -> float validation loss after each epoch.
    window_horizon 0 yields input-only windows (reconstruction)."""
    cfg.validate()
    if window_horizon is None:
        window_horizon = model.config.horizon
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    lo, hi = data.ranges.train
    log: list[LogRow] = []
    best_val, best_epoch, bad = np.inf, 0, 0
    best_state = _snapshot(model)
    epochs_run = 0

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        lr = cosine_warm_restart_lr(epoch - 1, cfg.lr, cfg.lr_min,
                                    cfg.restart_period, cfg.restart_mult)
        losses = []
        batches = D.window_iter(data.dataset, (lo, hi), model.config.lookback,
                                window_horizon, cfg.batch_size, shuffle=True,
                                rng=rng, covariate_codes=data.covariate_codes)
        for i, batch in enumerate(batches):
            loss = sam_step(model, batch_loss_factory(batch, rng), state, cfg, lr)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"loss became non-finite at epoch {epoch}, batch {i}")
            losses.append(loss)
        train_loss = float(np.mean(losses))
        val_loss = val_fn()
        epochs_run = epoch
        log.append(LogRow(epoch, train_loss, val_loss, lr,
                          time.perf_counter() - t0))
        if val_loss < best_val:
            best_val, best_epoch, bad = val_loss, epoch, 0
            best_state = _snapshot(model)
        else:
            bad += 1
            if early_stop and cfg.patience is not None and bad >= cfg.patience:
                break

    for n, p in model.params.items():
        p.data = best_state[n].copy()
    return TrainResult(log, float(best_val), best_epoch, epochs_run, best_state)


def train_forecaster(model: Forecaster, data: TrainData, cfg: TrainConfig) -> TrainResult:
    """Supervised training with early stopping on validation MSE; the model
    ends at the best-validation weights."""

    def factory(batch, rng):
        def closure():
            pred = model.forward(batch.inputs, covariates=batch.covariates,
                                 training=True, rng=rng)
            return mse_loss(pred, batch.targets)
        return closure

    def val_fn():
        span = D.context_range(data.ranges, "val", model.config.lookback)
        return evaluate(model, data.dataset, span, batch_size=cfg.batch_size * 2,
                        covariate_codes=data.covariate_codes).mse

    return _fit(model, data, cfg, factory, val_fn, early_stop=True)


# ---------------------------------------------------------------------------
# self-supervised pretraining


def pretrain_reconstructor(model: Forecaster, data: TrainData, cfg: TrainConfig,
                           mask_ratio: float) -> TrainResult:
    """Masked-patch reconstruction for a fixed number of epochs.

    The model must be built with horizon == lookback. Inputs have
    round(mask_ratio * N) patches zeroed per (window, channel); the target
    is the unmasked window. Normalization statistics come from what the
    model actually sees, the masked window.
    """
    cfg.validate()
    if model.config.horizon != model.config.lookback:
        raise TrainingError(
            "reconstruction needs horizon == lookback "
            f"(got {model.config.horizon} != {model.config.lookback})")
    if not 0.0 < mask_ratio < 1.0:
        raise TrainingError(f"mask_ratio must be in (0, 1), got {mask_ratio}")
    p = model.config.patch_len

    def factory(batch, rng):
        masked, mask = D.mask_patches(batch.inputs, p, mask_ratio, rng)

        def closure():
            pred = model.forward(masked, covariates=batch.covariates,
                                 training=True, rng=rng)
            if cfg.masked_only:
                weight = np.repeat(mask.astype(np.float32), p, axis=-1)
                return masked_mse_loss(pred, batch.inputs, weight)
            return mse_loss(pred, batch.inputs)
        return closure

    def val_fn():
        # Fixed masking seed: the val curve is comparable across epochs.
        # Reconstruction windows need no forecasting context, so the plain
        # val range is used without a lookback extension.
        return _reconstruction_loss(model, data, data.ranges.val, cfg, mask_ratio)

    return _fit(model, data, cfg, factory, val_fn, early_stop=False, window_horizon=0)


def _reconstruction_loss(model: Forecaster, data: TrainData,
                         row_range: tuple[int, int], cfg: TrainConfig,
                         mask_ratio: float) -> float:
    rng = np.random.default_rng([cfg.seed, 7919])
    p = model.config.patch_len
    total, count = 0.0, 0
    with no_grad():
        for batch in D.window_iter(data.dataset, row_range, model.config.lookback,
                                   0, cfg.batch_size * 2,
                                   covariate_codes=data.covariate_codes):
            masked, _ = D.mask_patches(batch.inputs, p, mask_ratio, rng)
            pred = model.forward(masked, covariates=batch.covariates).data
            err = pred.astype(np.float64) - batch.inputs.astype(np.float64)
            total += float((err ** 2).sum())
            count += err.size
    return total / count


# ---------------------------------------------------------------------------
# transfer


def load_encoder(model: Forecaster, checkpoint_path: str):
    """Copy every non-head tensor from a reconstruction checkpoint into a
    forecasting model. Shapes must match; the head stays freshly initialized."""
    ckpt_cfg, tensors = load_checkpoint(checkpoint_path)
    for field_name in ("n_channels", "lookback", "patch_len", "stride", "d_model",
                       "fm_rank", "spatial_rank", "dyn_vocab_sizes"):
        ours = getattr(model.config, field_name)
        theirs = getattr(ckpt_cfg, field_name)
        if ours != theirs:
            raise TrainingError(
                f"encoder transfer needs matching {field_name}: "
                f"checkpoint has {theirs}, model has {ours}")
    model.load_state(tensors, subset=model.encoder_param_names())


def probe_head(model: Forecaster, data: TrainData, cfg: TrainConfig) -> TrainResult:
    """Linear probing: freeze the encoder, train only the head. The encoder
    tensors are bit-identical before and after."""
    encoder = model.encoder_param_names()
    model.set_trainable(encoder, False)
    try:
        result = _fit(model, data, cfg,
                      _forecast_factory(model), _forecast_val(model, data, cfg),
                      early_stop=False)
    finally:
        model.set_trainable(encoder, True)
    return result


def finetune_all(model: Forecaster, data: TrainData, head_cfg: TrainConfig,
                 full_cfg: TrainConfig) -> tuple[TrainResult, TrainResult]:
    """Two-stage transfer: probe the head first, then unfreeze everything."""
    head_result = probe_head(model, data, head_cfg)
    full_result = _fit(model, data, full_cfg,
                       _forecast_factory(model), _forecast_val(model, data, full_cfg),
                       early_stop=False)
    return head_result, full_result


def _forecast_factory(model: Forecaster):
    def factory(batch, rng):
        def closure():
            pred = model.forward(batch.inputs, covariates=batch.covariates,
                                 training=True, rng=rng)
            return mse_loss(pred, batch.targets)
        return closure
    return factory


def _forecast_val(model: Forecaster, data: TrainData, cfg: TrainConfig):
    def val_fn():
        span = D.context_range(data.ranges, "val", model.config.lookback)
        return evaluate(model, data.dataset, span, batch_size=cfg.batch_size * 2,
                        covariate_codes=data.covariate_codes).mse
    return val_fn
