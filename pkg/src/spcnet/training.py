"""Losses, the cycle training loop, and evaluation.

The training objective compares every stage's prediction against a nested
farthest-point-sampled version of the true missing part; the cycle variants
additionally feed first-pass outputs back through the network and penalize
the round trip, with gradients flowing through the whole composition.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import fps, viewpoint_split
from .model import ModelConfig, StageOutputs, init_params, spcnet_forward
from .optim import AdamState, ParamSet, adam_step, zero_grads
from .rng import Rng
from .tensor import Tensor, as_tensor, backward, constant, no_grad

CUBE_CORNERS = np.array(
    [(x, y, z) for x in (-1.0, 1.0) for y in (-1.0, 1.0) for z in (-1.0, 1.0)]
)


def chamfer(a: Tensor, b: Tensor) -> Tensor:
    """Symmetric mean of squared nearest-neighbor distances between clouds.

    Differentiable with respect to both clouds; the nearest-neighbor
    assignment itself is held fixed, which is the true gradient almost
    everywhere.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer: clouds must be non-empty")
    diff = a.data[:, None, :] - b.data[None, :, :]
    d2 = np.sum(diff * diff, axis=-1)
    idx_ab = d2.argmin(axis=1)
    idx_ba = d2.argmin(axis=0)
    da = a - T.gather_rows(b, idx_ab)
    db = b - T.gather_rows(a, idx_ba)
    term_a = (da * da).sum(axis=1).mean()
    term_b = (db * db).sum(axis=1).mean()
    return term_a + term_b


def downsample_targets(p_missing: np.ndarray, down_rate: int) -> tuple[np.ndarray, np.ndarray]:
    """Nested FPS targets at rates K and K^2; the coarser set is a subset of
    the finer one by construction."""
    p_missing = np.asarray(p_missing, dtype=np.float64)
    m = p_missing.shape[0]
    if down_rate < 1 or m % (down_rate * down_rate) != 0:
        raise ValueError(
            f"downsample_targets: {m} points not divisible by rate {down_rate}^2"
        )
    mid = p_missing[fps(p_missing, m // down_rate)]
    low = mid[fps(mid, m // (down_rate * down_rate))]
    return mid, low


def nested_targets(p_missing: np.ndarray, counts) -> list:
    """One target cloud per stage count, sampled by a nested FPS chain."""
    p_missing = np.asarray(p_missing, dtype=np.float64)
    by_count = {p_missing.shape[0]: p_missing}
    current = p_missing
    for c in sorted(set(counts), reverse=True):
        if c > current.shape[0]:
            raise ValueError(
                f"nested_targets: stage count {c} exceeds missing part size "
                f"{p_missing.shape[0]}"
            )
        if c not in by_count:
            current = current[fps(current, c)]
            by_count[c] = current
        else:
            current = by_count[c]
    return [by_count[c] for c in counts]


@dataclass(frozen=True)
class LossWeights:
    alpha: tuple = (1.0, 1.0, 1.0, 1.0)
    beta: tuple = (1.0, 0.5)

    def __post_init__(self):
        if any(a < 0 for a in self.alpha) or any(b < 0 for b in self.beta):
            raise ValueError("loss weights must be non-negative")
        if not any(self.alpha) or not any(self.beta):
            raise ValueError("loss weights must not be all zero")


def stepwise_loss(outputs: StageOutputs, targets, weights: LossWeights) -> Tensor:
    """Weighted sum of per-stage Chamfer distances against matching targets."""
    stages = outputs.stages
    if len(targets) != len(stages):
        raise ValueError(
            f"stepwise_loss: {len(stages)} stages but {len(targets)} targets"
        )
    if len(stages) > len(weights.alpha):
        raise ValueError(
            f"stepwise_loss: {len(stages)} stages exceed the {len(weights.alpha)} "
            "stage weights"
        )
    total = None
    for stage, target, alpha in zip(stages, targets, weights.alpha):
        target = np.asarray(target, dtype=np.float64)
        if stage.shape[0] != target.shape[0]:
            raise ValueError(
                f"stepwise_loss: stage has {stage.shape[0]} points but target "
                f"has {target.shape[0]}"
            )
        term = chamfer(stage, constant(target)) * alpha
        total = term if total is None else total + term
    return total


def cycle_total_loss(
    complete_from_partial,
    complete_from_missing,
    p_partial: np.ndarray,
    p_missing: np.ndarray,
    weights: LossWeights,
    loss_mode: str = "4L",
):
    """Direct and cycle losses over one shape.

    ``complete_from_partial`` maps a partial-side cloud to StageOutputs
    predicting the missing side; ``complete_from_missing`` is the companion
    direction (the same network when the split is symmetric).  Mode 1L keeps
    only the direct missing-side loss; 2L both direct losses; 4L adds the two
    cycle losses, whose passes consume first-pass outputs as fresh inputs so
    gradients flow through the full composition.

    Returns (total, components) with components keyed loss1..loss4.
    """
    if loss_mode not in ("1L", "2L", "4L"):
        raise ValueError(f"unknown loss mode {loss_mode!r}")
    beta1, beta2 = weights.beta

    out_missing = complete_from_partial(Tensor(p_partial))
    loss1 = stepwise_loss(out_missing, nested_targets(p_missing, out_missing.counts()), weights)
    if loss_mode == "1L":
        return loss1, {"loss1": loss1.item()}

    out_partial = complete_from_missing(Tensor(p_missing))
    loss2 = stepwise_loss(out_partial, nested_targets(p_partial, out_partial.counts()), weights)
    direct = loss1 + loss2
    if loss_mode == "2L":
        total = direct * beta1
        return total, {"loss1": loss1.item(), "loss2": loss2.item()}

    cycle_missing = complete_from_partial(out_partial.final)
    loss4 = stepwise_loss(cycle_missing, nested_targets(p_missing, cycle_missing.counts()), weights)
    cycle_partial = complete_from_missing(out_missing.final)
    loss3 = stepwise_loss(cycle_partial, nested_targets(p_partial, cycle_partial.counts()), weights)
    total = direct * beta1 + (loss3 + loss4) * beta2
    return total, {
        "loss1": loss1.item(),
        "loss2": loss2.item(),
        "loss3": loss3.item(),
        "loss4": loss4.item(),
    }


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 24
    lr: float = 1e-4
    seed: int = 0
    eval_viewpoint: tuple = (1.0, 1.0, 1.0)
    lr_decay: str = "none"  # none | cosine

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError(f"lr_decay must be none or cosine, got {self.lr_decay!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch; cosine decays to 2% of lr."""
        if self.lr_decay == "none" or self.epochs == 1:
            return self.lr
        floor = 0.02 * self.lr
        phase = (epoch - 1) / (self.epochs - 1)
        return floor + 0.5 * (self.lr - floor) * (1.0 + np.cos(np.pi * phase))


@dataclass
class TrainResult:
    params: ParamSet
    adam: AdamState
    config: ModelConfig
    trace: list
    meta: dict
    reverse_params: ParamSet | None = None
    reverse_adam: AdamState | None = None
    reverse_config: ModelConfig | None = None

    def trace_lines(self) -> list:
        keys = _trace_keys(self.config.loss_mode)
        lines = []
        for row in self.trace:
            parts = [str(row["epoch"])]
            parts += [f"{row[k]:.9g}" for k in keys]
            parts.append(f"{row['total']:.9g}")
            lines.append(",".join(parts))
        return lines


def _trace_keys(loss_mode: str) -> list:
    return {
        "1L": ["loss1"],
        "2L": ["loss1", "loss2"],
        "4L": ["loss1", "loss2", "loss3", "loss4"],
    }[loss_mode]


def _is_shared_regime(config: ModelConfig) -> bool:
    # 1L never exercises the reverse direction; a symmetric split shares one
    # parameter set for both directions.
    return config.loss_mode == "1L" or config.missing_count == config.partial_count


def train(dataset, model_config: ModelConfig, train_config: TrainConfig) -> TrainResult:
    """Optimize the network(s) on a dataset of complete shapes.

    Per epoch and shape a viewpoint is drawn from the eight cube corners, the
    shape is split at the configured ratio, and the configured loss applies;
    per-shape losses are averaged over a batch before each Adam step.
    Asymmetric splits under the cycle modes train a second parameter set for
    the reverse direction jointly.
    """
    shapes = dataset.shapes
    if not shapes:
        raise ValueError("train: dataset is empty")
    model_config.validate()
    weights = LossWeights()
    rng = Rng(train_config.seed)
    sampling_rng = rng.spawn()
    shared = _is_shared_regime(model_config)

    params = init_params(model_config, train_config.seed)
    adam = AdamState.for_params(params)
    if shared:
        rev_config, rev_params, rev_adam = None, None, None
    else:
        rev_config = model_config.reversed_ratio()
        rev_params = init_params(rev_config, train_config.seed + 1)
        rev_adam = AdamState.for_params(rev_params)

    def forward_missing(cloud: Tensor) -> StageOutputs:
        return spcnet_forward(cloud, params, model_config, rng=sampling_rng)

    def forward_partial(cloud: Tensor) -> StageOutputs:
        if shared:
            return spcnet_forward(cloud, params, model_config, rng=sampling_rng)
        return spcnet_forward(cloud, rev_params, rev_config, rng=sampling_rng)

    keys = _trace_keys(model_config.loss_mode)
    trace = []
    for epoch in range(1, train_config.epochs + 1):
        epoch_sums = {k: 0.0 for k in keys}
        epoch_total = 0.0
        for start in range(0, len(shapes), train_config.batch_size):
            batch = shapes[start:start + train_config.batch_size]
            zero_grads(params)
            if rev_params is not None:
                zero_grads(rev_params)
            batch_loss = None
            for _, points in batch:
                corner = CUBE_CORNERS[rng.randrange(len(CUBE_CORNERS))]
                p_n, p_m = viewpoint_split(points, corner, model_config.missing_ratio)
                loss, components = cycle_total_loss(
                    forward_missing, forward_partial, p_n, p_m, weights,
                    model_config.loss_mode,
                )
                batch_loss = loss if batch_loss is None else batch_loss + loss
                for k in keys:
                    epoch_sums[k] += components[k]
                epoch_total += loss.item()
            backward(batch_loss * (1.0 / len(batch)))
            lr = train_config.lr_at(epoch)
            adam_step(params, adam, lr=lr)
            if rev_params is not None:
                adam_step(rev_params, rev_adam, lr=lr)
        row = {"epoch": epoch}
        row.update({k: epoch_sums[k] / len(shapes) for k in keys})
        row["total"] = epoch_total / len(shapes)
        trace.append(row)

    meta = {
        "epochs": str(train_config.epochs),
        "seed": str(train_config.seed),
        "loss_mode": model_config.loss_mode,
    }
    return TrainResult(
        params=params,
        adam=adam,
        config=model_config,
        trace=trace,
        meta=meta,
        reverse_params=rev_params,
        reverse_adam=rev_adam,
        reverse_config=rev_config,
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Per-category mean Chamfer distances (x1000) plus the overall mean."""

    columns: tuple
    per_category: list = field(default_factory=list)  # (category, count, values)
    overall: tuple = ()

    def to_csv(self) -> str:
        lines = ["category,count," + ",".join(self.columns)]
        for category, count, values in self.per_category:
            lines.append(
                f"{category},{count}," + ",".join(f"{v:.9g}" for v in values)
            )
        total = sum(count for _, count, _ in self.per_category)
        lines.append(f"overall,{total}," + ",".join(f"{v:.9g}" for v in self.overall))
        return "\n".join(lines) + "\n"


def _worker_count() -> int:
    raw = os.environ.get("SPCNET_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def evaluate(
    params: ParamSet,
    config: ModelConfig,
    dataset,
    viewpoint=(1.0, 1.0, 1.0),
    stagewise: bool = False,
    seed: int = 0,
) -> EvalReport:
    """Split each shape at a fixed viewpoint, complete it, and report the
    Chamfer distance between predicted and true whole shapes, scaled by 1000.

    ``stagewise`` reports instead the per-stage distances against the
    matching-resolution missing-part targets.
    """
    shapes = dataset.shapes
    if not shapes:
        raise ValueError("evaluate: dataset is empty")
    if shapes[0][1].shape[0] != config.points_per_shape:
        raise ValueError(
            f"evaluate: checkpoint expects {config.points_per_shape} points per "
            f"shape, dataset has {shapes[0][1].shape[0]}"
        )
    vp = np.asarray(viewpoint, dtype=np.float64)

    def shape_values(item):
        index, (_, points) = item
        rng = Rng(seed + index) if config.sampling_kind == "rps" else None
        p_n, p_m = viewpoint_split(points, vp, config.missing_ratio)
        with no_grad():
            out = spcnet_forward(Tensor(p_n), params, config, rng=rng)
            if stagewise:
                targets = nested_targets(p_m, out.counts())
                return tuple(
                    chamfer(stage, constant(t)).item() * 1000.0
                    for stage, t in zip(out.stages, targets)
                )
            pred_whole = np.concatenate([p_n, out.final.data], axis=0)
            true_whole = np.concatenate([p_n, p_m], axis=0)
            return (chamfer(Tensor(pred_whole), Tensor(true_whole)).item() * 1000.0,)

    workers = _worker_count()
    items = list(enumerate(shapes))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(shape_values, items))
    else:
        values = [shape_values(item) for item in items]

    if stagewise:
        n_stages = len(values[0])
        if n_stages == 4:
            columns = ("cd_coarse", "cd_mid", "cd_fine", "cd_final")
        else:
            columns = tuple(f"cd_stage{i}" for i in range(n_stages))
    else:
        columns = ("cd_x1000",)

    by_category: dict = {}
    for (_, (category, _)), vals in zip(items, values):
        by_category.setdefault(category, []).append(vals)
    per_category = []
    for category in sorted(by_category):
        rows = np.array(by_category[category])
        per_category.append((category, rows.shape[0], tuple(rows.mean(axis=0))))
    all_rows = np.array(values)
    overall = tuple(all_rows.mean(axis=0))
    return EvalReport(columns=columns, per_category=per_category, overall=overall)
