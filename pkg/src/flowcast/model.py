"""The forecaster: embedding, attention blocks, output adapter, training.

Predictions come from a stack of partition-attention blocks on the
embedded window, followed by a per-node temporal remap from T input steps
to the forecast horizon and a channel projection. Training is mini-batch
Adam on the masked absolute error in normalized units; points whose true
value is stored as zero are treated as missing everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .attention import (
    AlphaCapture,
    BlockParams,
    apply_block,
    init_block_params,
)
from .data import Dataset, NormStats, WindowSample, batch_arrays
from .embedding import (
    EmbeddingParams,
    SpePack,
    TpePack,
    compute_spe,
    embed,
    init_embedding_params,
)
from .errors import ContractError, NumericError
from .optim import (
    AdamState,
    adam_step,
    clip_global_norm,
    glorot_uniform,
    zero_gradients,
    zeros_param,
)
from .partition import (
    BaseNodeSet,
    PartitionScheme,
    build_p1,
    build_p2,
    calibrate_tau,
    make_base_set,
    shift_bases,
)
from .stgraph import SpatialGraph, UnifiedGraph, build_unified
from .tensor import Param, Tensor, absolute, add, backward, constant, matmul, mul, scale, sub, tensor_sum


@dataclass
class ModelConfig:
    """Hyperparameters and dataset geometry for one model."""

    n_nodes: int
    t_in: int = 12
    t_out: int = 12
    channels: int = 1
    dim: int = 16
    spe_modes: int = 16
    gamma: int = 288
    n_blocks: int = 4
    n_heads: int = 4
    n_subsets: int = 40
    tau: int | None = None
    seed: int = 0
    learning_rate: float = 0.001
    batch_size: int = 8
    epochs: int = 100
    clip_norm: float = 5.0

    def validate(self) -> None:
        if self.n_nodes < 1:
            raise ContractError("need at least one node")
        for name in ("t_in", "t_out", "channels", "dim", "n_blocks", "n_heads", "n_subsets", "gamma"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dim % self.n_heads != 0:
            raise ContractError(f"dim {self.dim} not divisible by {self.n_heads} heads")
        if not 1 <= self.spe_modes < self.n_nodes:
            raise ContractError(
                f"spe_modes must be in [1, {self.n_nodes}), got {self.spe_modes}"
            )
        if self.n_subsets > self.n_nodes:
            raise ContractError(
                f"n_subsets {self.n_subsets} cannot exceed {self.n_nodes} nodes"
            )
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if self.epochs < 0:
            raise ContractError("epochs must be nonnegative")
        if self.clip_norm < 0:
            raise ContractError("clip_norm must be nonnegative (0 disables clipping)")


@dataclass
class AdapterParams:
    """Per-node temporal remap T -> T' and channel projection D -> C."""

    w_time: Param
    b_time: Param
    w_out: Param
    b_out: Param

    def params(self) -> list[Param]:
        return [self.w_time, self.b_time, self.w_out, self.b_out]


@dataclass
class ForecastModel:
    config: ModelConfig
    spatial: SpatialGraph
    unified: UnifiedGraph
    spe: SpePack
    tpe: TpePack
    embedding: EmbeddingParams
    blocks: list[BlockParams]
    adapter: AdapterParams
    p1: PartitionScheme
    p2: PartitionScheme
    norm_stats: NormStats | None = None

    def params(self) -> list[Param]:
        out = self.embedding.params()
        for block in self.blocks:
            out.extend(block.params())
        out.extend(self.adapter.params())
        return out

    def param_dict(self) -> dict[str, Param]:
        table: dict[str, Param] = {}
        for p in self.params():
            if p.name in table:
                raise ContractError(f"duplicate parameter name {p.name}")
            table[p.name] = p
        return table


def build_model(
    config: ModelConfig,
    spatial: SpatialGraph,
    schemes: tuple[PartitionScheme, PartitionScheme] | None = None,
) -> ForecastModel:
    """Build partitions (unless given) and initialize all parameters.

    Initialization order is fixed: embedding, blocks in order, adapter,
    all drawn from one generator seeded by config.seed.
    """
    config.validate()
    if spatial.n_nodes != config.n_nodes:
        raise ContractError(
            f"config says {config.n_nodes} nodes but the graph has {spatial.n_nodes}"
        )
    unified = build_unified(spatial, config.t_in)
    spe = compute_spe(spatial, config.spe_modes)
    tpe = TpePack(gamma=config.gamma)

    if schemes is None:
        bases = make_base_set(unified, spe.selected, config.n_subsets, config.seed)
        bases.tau = calibrate_tau(unified, bases)
        p1 = build_p1(unified, bases)
        shifted = shift_bases(unified, bases)
        p2 = build_p2(unified, shifted)
    else:
        p1, p2 = schemes
        for scheme in (p1, p2):
            if scheme.n_elements != unified.n_elements:
                raise ContractError(
                    f"{scheme.label} covers {scheme.n_elements} elements, expected "
                    f"{unified.n_elements}"
                )
    config.tau = p1.tau

    rng = np.random.default_rng(config.seed)
    embedding = init_embedding_params(
        rng, config.channels, config.dim, config.spe_modes, TpePack(config.gamma).width
    )
    blocks = [
        init_block_params(rng, config.dim, config.n_heads, f"block{b}")
        for b in range(config.n_blocks)
    ]
    adapter = AdapterParams(
        w_time=glorot_uniform(rng, (config.t_out, config.t_in), "adapter.w_time"),
        b_time=zeros_param((config.dim,), "adapter.b_time"),
        w_out=glorot_uniform(rng, (config.dim, config.channels), "adapter.w_out"),
        b_out=zeros_param((config.channels,), "adapter.b_out"),
    )
    return ForecastModel(
        config=config,
        spatial=spatial,
        unified=unified,
        spe=spe,
        tpe=tpe,
        embedding=embedding,
        blocks=blocks,
        adapter=adapter,
        p1=p1,
        p2=p2,
    )


def forward_arrays(
    model: ForecastModel,
    values: np.ndarray,
    day: np.ndarray,
    step: np.ndarray,
    captures: dict[tuple[int, int], AlphaCapture] | None = None,
) -> Tensor:
    """Forward over (N, T, C) or batched (B, N, T, C) arrays.

    captures, when given, maps (block_index, module_index) to an
    AlphaCapture that receives the attention weights of that module.
    """
    x = embed(values, day, step, model.spe, model.tpe, model.embedding)
    for b, block in enumerate(model.blocks):
        cap1 = captures.get((b, 0)) if captures else None
        cap2 = captures.get((b, 1)) if captures else None
        x = apply_block(x, model.p1, model.p2, block, cap1, cap2)
    x = add(matmul(model.adapter.w_time, x), model.adapter.b_time)
    return add(matmul(x, model.adapter.w_out), model.adapter.b_out)


def forward(model: ForecastModel, window: WindowSample) -> Tensor:
    """Predict one window; output shape (N, t_out, channels), normalized."""
    return forward_arrays(model, window.values_norm, window.day, window.step)


def masked_mae_loss(
    pred: Tensor, truth: np.ndarray, mask: np.ndarray | None = None
) -> Tensor:
    """Mean absolute error over unmasked points, as a scalar tensor.

    By default points where truth == 0 are masked out; an explicit mask
    (True = keep) overrides that, which lets callers train on normalized
    targets while masking on raw zeros. All-masked input gives loss 0.
    """
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ContractError(f"pred shape {pred.shape} != truth shape {truth.shape}")
    if mask is None:
        mask = truth != 0.0
    mask = np.asarray(mask)
    if mask.shape != truth.shape:
        raise ContractError(f"mask shape {mask.shape} != truth shape {truth.shape}")
    count = int(mask.sum())
    masked = mul(absolute(sub(pred, constant(truth))), constant(mask.astype(np.float64)))
    return scale(tensor_sum(masked), 1.0 / max(count, 1))


@dataclass
class MetricsReport:
    mae: float
    mape_percent: float
    rmse: float
    evaluated_points: int
    excluded_zeros: int

    def to_text(self) -> str:
        return (
            f"mae {self.mae:.6f}  mape {self.mape_percent:.4f}%  rmse {self.rmse:.6f}  "
            f"points {self.evaluated_points} (excluded zeros {self.excluded_zeros})"
        )


def metrics_from_arrays(pred: np.ndarray, truth: np.ndarray) -> MetricsReport:
    """MAE, MAPE (percent), RMSE with zero-truth points excluded from all.

    Inputs are in raw units and must have identical shape.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ContractError(f"pred shape {pred.shape} != truth shape {truth.shape}")
    mask = truth != 0.0
    kept = int(mask.sum())
    if kept == 0:
        raise ContractError("no nonzero truth points to evaluate")
    diff = pred[mask] - truth[mask]
    mae = float(np.abs(diff).mean())
    mape = float(np.abs(diff / truth[mask]).mean() * 100.0)
    rmse = float(np.sqrt((diff * diff).mean()))
    return MetricsReport(
        mae=mae,
        mape_percent=mape,
        rmse=rmse,
        evaluated_points=kept,
        excluded_zeros=int(truth.size - kept),
    )


def predict_windows(
    model: ForecastModel,
    samples: list[WindowSample],
    stats: NormStats,
    batch_size: int = 32,
) -> np.ndarray:
    """De-normalized predictions for a window list; (W, N, t_out, C)."""
    if not samples:
        raise ContractError("cannot predict an empty window list")
    chunks = []
    for lo in range(0, len(samples), batch_size):
        values, day, step, _, _ = batch_arrays(samples[lo : lo + batch_size])
        pred = forward_arrays(model, values, day, step)
        chunks.append(stats.invert(pred.data))
    return np.concatenate(chunks, axis=0)


def evaluate(
    model: ForecastModel,
    samples: list[WindowSample],
    stats: NormStats,
    horizon: int | None = None,
    batch_size: int = 32,
) -> MetricsReport:
    """Metrics over a split, optionally sliced at one horizon step.

    horizon is 1-based; horizon k compares predictions and truth at
    forecast step k only. Without it, all t_out steps count.
    """
    if not samples:
        raise ContractError("cannot evaluate an empty split")
    if horizon is not None and not 1 <= horizon <= model.config.t_out:
        raise ContractError(
            f"horizon {horizon} outside [1, {model.config.t_out}]"
        )
    preds = predict_windows(model, samples, stats, batch_size)
    truth = np.stack([s.target_raw for s in samples], axis=0)
    if horizon is not None:
        preds = preds[:, :, horizon - 1, :]
        truth = truth[:, :, horizon - 1, :]
    return metrics_from_arrays(preds, truth)


def ha_baseline(
    values: np.ndarray, steps_per_week: int, targets: Iterable[int]
) -> np.ndarray:
    """Historical average: mean over all prior weeks at the same weekly slot.

    values is the raw series (steps, nodes, channels); each target index
    must have at least one full week of history.
    """
    values = np.asarray(values, dtype=np.float64)
    targets = list(targets)
    out = np.empty((len(targets),) + values.shape[1:], dtype=np.float64)
    for row, s in enumerate(targets):
        if not 0 <= s < values.shape[0]:
            raise ContractError(f"target step {s} outside the series")
        priors = list(range(s - steps_per_week, -1, -steps_per_week))
        if not priors:
            raise ContractError(
                f"target step {s} has no full prior week (period {steps_per_week})"
            )
        out[row] = values[priors].mean(axis=0)
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TraceRow:
    epoch: int
    train_loss: float
    val_mae: float
    val_mape: float
    val_rmse: float

    def to_csv(self) -> str:
        return (
            f"{self.epoch},{self.train_loss!r},{self.val_mae!r},"
            f"{self.val_mape!r},{self.val_rmse!r}"
        )

    @staticmethod
    def csv_header() -> str:
        return "epoch,train_loss,val_mae,val_mape,val_rmse"


@dataclass
class TrainResult:
    model: ForecastModel
    trace: list[TraceRow]
    best_val_mae: float
    best_params: dict[str, np.ndarray]
    best_epoch: int
    epochs_completed: int


def train(
    model: ForecastModel,
    dataset: Dataset,
    start_epoch: int = 0,
    log=None,
) -> TrainResult:
    """Mini-batch Adam on masked MAE with per-epoch validation.

    Deterministic for a fixed seed: epoch e shuffles with a generator
    seeded by (seed, e), so the window order never depends on where a
    run started. Resuming rebuilds optimizer moments from zero, since
    checkpoints carry parameters only. The best validation MAE snapshot
    is retained; with an empty validation split the final parameters are
    the snapshot and validation columns record NaN.
    """
    config = model.config
    train_windows = dataset.splits["train"]
    val_windows = dataset.splits.get("val", [])
    if not train_windows:
        raise ContractError("train split has no windows")
    model.norm_stats = dataset.stats

    params = model.params()
    state = AdamState(learning_rate=config.learning_rate)
    trace: list[TraceRow] = []
    best_val = float("inf")
    best_params = {p.name: p.data.copy() for p in params}
    best_epoch = start_epoch

    masks = [s.target_raw != 0.0 for s in train_windows]
    for epoch in range(start_epoch + 1, config.epochs + 1):
        rng = np.random.default_rng((config.seed, epoch))
        order = rng.permutation(len(train_windows))
        total_loss = 0.0
        for lo in range(0, len(order), config.batch_size):
            chosen = order[lo : lo + config.batch_size]
            batch = [train_windows[int(i)] for i in chosen]
            values, day, step, target_norm, _ = batch_arrays(batch)
            mask = np.stack([masks[int(i)] for i in chosen], axis=0)
            pred = forward_arrays(model, values, day, step)
            loss = masked_mae_loss(pred, target_norm, mask)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NumericError(
                    f"non-finite loss {loss_value} at epoch {epoch}, "
                    f"batch starting at {lo} (step {state.step_count + 1})"
                )
            zero_gradients(params)
            backward(loss)
            if config.clip_norm > 0.0:
                clip_global_norm(params, config.clip_norm)
            adam_step(state, params)
            total_loss += loss_value * len(batch)

        train_loss = total_loss / len(train_windows)
        if val_windows:
            report = evaluate(model, val_windows, dataset.stats)
            row = TraceRow(epoch, train_loss, report.mae, report.mape_percent, report.rmse)
            if report.mae < best_val:
                best_val = report.mae
                best_params = {p.name: p.data.copy() for p in params}
                best_epoch = epoch
        else:
            row = TraceRow(epoch, train_loss, float("nan"), float("nan"), float("nan"))
            best_params = {p.name: p.data.copy() for p in params}
            best_epoch = epoch
        trace.append(row)
        if log is not None:
            log(row)

    return TrainResult(
        model=model,
        trace=trace,
        best_val_mae=best_val,
        best_params=best_params,
        best_epoch=best_epoch,
        epochs_completed=config.epochs,
    )


def load_params(model: ForecastModel, table: dict[str, np.ndarray]) -> None:
    """Copy arrays into the model's parameters by name."""
    own = model.param_dict()
    for name, array in table.items():
        if name not in own:
            raise ContractError(f"unknown parameter {name}")
        if own[name].data.shape != array.shape:
            raise ContractError(
                f"parameter {name} has shape {own[name].data.shape}, got {array.shape}"
            )
        own[name].data[...] = array
