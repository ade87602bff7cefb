"""The stepwise completion network: coarse stage plus a chain of refinement
modules, predicting the missing part of a partial cloud.

Row-order contract used throughout: whenever a partial cloud and a coarse
prediction are joined, the partial rows come first and the predicted rows
last, and the refinement module slices the trailing block back out.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from . import layers as L
from .geometry import fps, knn, rps
from .optim import ParamBuilder, ParamSet
from .rng import Rng
from .tensor import Tensor, as_tensor

CONV_KINDS = ("adapt", "edge")
VMLP_KINDS = ("vmlp", "pointnet_mlp", "one_subnet")
SAMPLING_KINDS = ("fps", "rps")
LOSS_MODES = ("1L", "2L", "4L")
PARTIAL_SUBSTITUTIONS = ("none", "pnk-pn", "pnkk-pn")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and ablation switches.

    ``width_scale`` multiplies every layer width of the base schedule, which
    keeps the wiring topology fixed while shrinking runs to desk scale.
    """

    points_per_shape: int = 2048
    missing_ratio: float = 0.5
    down_rate: int = 4
    scm_count: int = 3
    upsample_factors: tuple = (4, 4, 1)
    grid_count: int = 16
    grid_r: float = 0.05
    knn_k: int = 16
    conv_kind: str = "adapt"
    vmlp_kind: str = "vmlp"
    use_aggregation: bool = True
    sampling_kind: str = "fps"
    width_scale: float = 1.0
    loss_mode: str = "1L"
    partial_substitution: str = "none"

    # -- derived counts ----------------------------------------------------

    @property
    def missing_count(self) -> int:
        return int(round(self.missing_ratio * self.points_per_shape))

    @property
    def partial_count(self) -> int:
        return self.points_per_shape - self.missing_count

    @property
    def coarse_count(self) -> int:
        return self.missing_count // int(np.prod(self.upsample_factors))

    def stage_counts(self) -> list:
        """Point counts of (coarse, refinement 1, ..., refinement S)."""
        counts = [self.coarse_count]
        for factor in self.upsample_factors:
            counts.append(counts[-1] * factor)
        return counts

    def validate(self) -> None:
        if not 1 <= self.scm_count <= 3:
            raise ValueError(f"scm_count must be 1..3, got {self.scm_count}")
        if len(self.upsample_factors) != self.scm_count:
            raise ValueError(
                f"upsample_factors {self.upsample_factors} must have one entry "
                f"per refinement stage ({self.scm_count})"
            )
        if any(u < 1 for u in self.upsample_factors):
            raise ValueError(f"upsample factors must be >= 1, got {self.upsample_factors}")
        if not 0.0 < self.missing_ratio < 1.0:
            raise ValueError(f"missing_ratio must be in (0, 1), got {self.missing_ratio}")
        if self.conv_kind not in CONV_KINDS:
            raise ValueError(f"conv_kind must be one of {CONV_KINDS}, got {self.conv_kind!r}")
        if self.vmlp_kind not in VMLP_KINDS:
            raise ValueError(f"vmlp_kind must be one of {VMLP_KINDS}, got {self.vmlp_kind!r}")
        if self.sampling_kind not in SAMPLING_KINDS:
            raise ValueError(
                f"sampling_kind must be one of {SAMPLING_KINDS}, got {self.sampling_kind!r}"
            )
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.partial_substitution not in PARTIAL_SUBSTITUTIONS:
            raise ValueError(
                f"partial_substitution must be one of {PARTIAL_SUBSTITUTIONS}, "
                f"got {self.partial_substitution!r}"
            )
        prod = int(np.prod(self.upsample_factors))
        if self.missing_count % prod != 0 or self.coarse_count < 1:
            raise ValueError(
                f"missing part of {self.missing_count} points is not divisible "
                f"by the upsample chain {self.upsample_factors}"
            )
        depth = self.down_rate ** (self.scm_count - 1)
        if self.partial_count % depth != 0 or self.partial_count // depth < 2:
            raise ValueError(
                f"partial input of {self.partial_count} points does not divide "
                f"by down-sampling rate {self.down_rate} over "
                f"{self.scm_count - 1} levels"
            )
        if self.partial_substitution == "pnkk-pn" and self.scm_count < 3:
            raise ValueError("pnkk-pn substitution needs the three-stage chain")
        if self.partial_substitution == "pnk-pn" and self.scm_count < 2:
            raise ValueError("pnk-pn substitution needs at least two stages")

    def reversed_ratio(self) -> "ModelConfig":
        """Config of the companion network completing the opposite part."""
        return replace(self, missing_ratio=1.0 - self.missing_ratio)


@dataclass(frozen=True)
class WidthSchedule:
    vmlp_sub: tuple
    vmlp_adjust: int
    global_width: int
    encoder: tuple
    local_feat: int
    fold_hidden: tuple
    coarse_enc: tuple
    coarse_hidden: int


def width_schedule(scale: float) -> WidthSchedule:
    def s(x: int) -> int:
        return max(1, int(round(x * scale)))

    return WidthSchedule(
        vmlp_sub=tuple(s(x) for x in (16, 32, 64, 64, 128)),
        vmlp_adjust=s(32),
        global_width=s(128),
        encoder=tuple(s(x) for x in (64, 128, 256)),
        local_feat=s(256),
        fold_hidden=(s(256), s(128)),
        coarse_enc=tuple(s(x) for x in (64, 128, 256)),
        coarse_hidden=s(256),
    )


def vmlp_spec(config: ModelConfig) -> L.VmlpSpec:
    w = width_schedule(config.width_scale)
    return L.VmlpSpec(
        sub_dims=w.vmlp_sub,
        adjust_width=w.vmlp_adjust,
        out_width=w.global_width,
        kind=config.vmlp_kind,
        knn_k=config.knn_k,
    )


def _eff_k(k: int, n: int) -> int:
    return max(1, min(k, n - 1))


@dataclass
class StageOutputs:
    """Predicted clouds of every stage plus the per-stage hand-off features.

    ``stages[0]`` is the coarse prediction; each later entry is one
    refinement.  Hand-offs pair the stage's joined cloud coordinates with the
    point-wise feature passed to the next stage.
    """

    stages: list
    handoffs: list = field(default_factory=list)

    @property
    def coarse(self) -> Tensor:
        return self.stages[0]

    @property
    def mid(self) -> Tensor:
        return self.stages[1]

    @property
    def fine(self) -> Tensor:
        return self.stages[2]

    @property
    def final(self) -> Tensor:
        return self.stages[-1]

    def counts(self) -> list:
        return [s.shape[0] for s in self.stages]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def coarse_stage(p_down: Tensor, params: ParamSet, config: ModelConfig) -> Tensor:
    """Encode the sparsest partial input to a global code and decode it with
    two linear layers into the coarse missing-part prediction."""
    p_down = as_tensor(p_down)
    if p_down.shape[0] < 2:
        raise ValueError(f"coarse_stage: need at least 2 points, got {p_down.shape[0]}")
    w = width_schedule(config.width_scale)
    enc = L.shared_mlp(p_down, L.LayerSpec(w.coarse_enc), params, "coarse.enc")
    code = T.reduce_max_rows(enc).reshape(1, -1)
    hidden = T.relu(T.linear(code, params["coarse.dec.l0.w"], params["coarse.dec.l0.b"]))
    flat = T.linear(hidden, params["coarse.dec.l1.w"], params["coarse.dec.l1.b"])
    return flat.reshape(config.coarse_count, 3)


def acm_forward(
    whole: Tensor,
    p_missing: Tensor,
    pointwise_global: Tensor,
    upsample_k: int,
    params: ParamSet,
    prefix: str,
    config: ModelConfig,
) -> Tensor:
    """Graph-convolution encoder over the joined cloud, a detailed point-wise
    local feature, and a folding head over the trailing predicted block."""
    whole = as_tensor(whole)
    p_missing = as_tensor(p_missing)
    n = whole.shape[0]
    m = p_missing.shape[0]
    if m > n or not np.array_equal(whole.data[n - m:], p_missing.data):
        raise ValueError(
            f"{prefix}: joined cloud must end with the {m} predicted rows "
            "(row-order contract violated)"
        )
    w = width_schedule(config.width_scale)
    kind = config.conv_kind
    k = _eff_k(config.knn_k, n)
    graph = knn(whole.data, whole.data, k)
    f0 = L.graph_conv(
        kind, whole, pointwise_global, graph, params, f"{prefix}.conv0", w.encoder[0]
    )
    c1, f1 = L.graph_pool(
        whole, f0, max(1, n // 2), config.knn_k, params, f"{prefix}.pool1",
        w.encoder[1], kind,
    )
    c2, f2 = L.graph_pool(
        c1, f1, max(1, c1.shape[0] // 2), config.knn_k, params, f"{prefix}.pool2",
        w.encoder[2], kind,
    )
    code = T.reduce_max_rows(f2)
    u1 = L.interpolate_up(whole, c1, f1, k=min(3, c1.shape[0]))
    u2 = L.interpolate_up(whole, c2, f2, k=min(3, c2.shape[0]))
    detail = T.concat([f0, u1, u2, T.broadcast_row(code, n)], axis=1)
    local = L.shared_mlp(
        detail, L.LayerSpec((w.local_feat,), use_bn=False), params, f"{prefix}.local"
    )
    tail = T.gather_rows(local, np.arange(n - m, n))
    return L.fold_decode(
        p_missing, tail, upsample_k, config.grid_r, config.grid_count,
        params, f"{prefix}.fold", w.fold_hidden,
    )


def scm_forward(
    p_partial: Tensor,
    p_coarse: Tensor,
    prev_handoff,
    stage_index: int,
    params: ParamSet,
    config: ModelConfig,
):
    """One refinement stage: join partial and coarse clouds, extract the
    point-wise global feature, merge the previous stage's hand-off, and emit
    the refined cloud plus this stage's hand-off."""
    wants_prev = stage_index > 0 and config.use_aggregation
    if wants_prev and prev_handoff is None:
        raise ValueError(f"scm{stage_index}: previous hand-off feature required")
    if not wants_prev and prev_handoff is not None:
        raise ValueError(f"scm{stage_index}: unexpected hand-off feature")
    whole = T.concat([as_tensor(p_partial), as_tensor(p_coarse)], axis=0)
    f_hat = L.vmlp(whole, params, f"scm{stage_index}.vmlp", vmlp_spec(config))
    if wants_prev:
        prev_points, prev_feats = prev_handoff
        feat = L.aggregate_prev(
            whole, f_hat, prev_points, prev_feats, params, f"scm{stage_index}.agg"
        )
    else:
        feat = f_hat
    refined = acm_forward(
        whole, p_coarse, feat, config.upsample_factors[stage_index],
        params, f"scm{stage_index}.acm", config,
    )
    return refined, (whole.data, feat)


def spcnet_forward(
    p_partial: Tensor,
    params: ParamSet,
    config: ModelConfig,
    rng: Rng | None = None,
) -> StageOutputs:
    """Full pipeline: multi-resolution sampling of the partial input, the
    coarse stage, then every refinement stage with feature hand-off."""
    config.validate()
    p_partial = as_tensor(p_partial)
    if p_partial.shape[0] != config.partial_count:
        raise ValueError(
            f"expected a partial cloud of {config.partial_count} points, "
            f"got {p_partial.shape[0]}"
        )
    levels = [p_partial]
    for _ in range(config.scm_count - 1):
        target = levels[-1].shape[0] // config.down_rate
        if config.sampling_kind == "rps":
            if rng is None:
                raise ValueError("random point sampling needs an rng")
            idx = rps(levels[-1].data, target, rng)
        else:
            idx = fps(levels[-1].data, target)
        levels.append(T.gather_rows(levels[-1], idx))
    if config.partial_substitution == "pnk-pn" and len(levels) > 1:
        levels[1] = levels[0]
    elif config.partial_substitution == "pnkk-pn":
        levels[2] = levels[0]

    coarse = coarse_stage(levels[config.scm_count - 1], params, config)
    stages = [coarse]
    handoffs = []
    current = coarse
    handoff = None
    for i in range(config.scm_count):
        partial = levels[config.scm_count - 1 - i]
        prev = handoff if (i > 0 and config.use_aggregation) else None
        current, handoff = scm_forward(partial, current, prev, i, params, config)
        stages.append(current)
        handoffs.append(handoff)
    return StageOutputs(stages=stages, handoffs=handoffs)


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def init_params(config: ModelConfig, seed: int) -> ParamSet:
    """Every parameter of every stage, in a fixed walk order under one seed."""
    config.validate()
    w = width_schedule(config.width_scale)
    pb = ParamBuilder(Rng(seed))

    enc_out = L.shared_mlp_params(pb, "coarse.enc", 3, L.LayerSpec(w.coarse_enc))
    pb.weight("coarse.dec.l0.w", enc_out, w.coarse_hidden)
    pb.bias("coarse.dec.l0.b", w.coarse_hidden)
    pb.weight("coarse.dec.l1.w", w.coarse_hidden, config.coarse_count * 3)
    pb.bias("coarse.dec.l1.b", config.coarse_count * 3)

    vspec = vmlp_spec(config)
    g = vspec.out_width
    conv_params = (
        L.adaptconv_params if config.conv_kind == "adapt" else L.edgeconv_params
    )
    for i in range(config.scm_count):
        L.vmlp_params(pb, f"scm{i}.vmlp", vspec)
        if i > 0 and config.use_aggregation:
            L.aggregate_prev_params(pb, f"scm{i}.agg", g, g, g)
        conv_params(pb, f"scm{i}.acm.conv0", g, w.encoder[0])
        conv_params(pb, f"scm{i}.acm.pool1", w.encoder[0], w.encoder[1])
        conv_params(pb, f"scm{i}.acm.pool2", w.encoder[1], w.encoder[2])
        detail_width = w.encoder[0] + w.encoder[1] + 2 * w.encoder[2]
        L.shared_mlp_params(
            pb, f"scm{i}.acm.local", detail_width,
            L.LayerSpec((w.local_feat,), use_bn=False),
        )
        L.fold_decode_params(pb, f"scm{i}.acm.fold", w.local_feat, w.fold_hidden)
    return pb.entries


def zero_fold_heads(params: ParamSet, config: ModelConfig) -> None:
    """Zero the final layer of every folding head: each stage then reproduces
    its coarse input replicated, an end-to-end identity audit."""
    w = width_schedule(config.width_scale)
    last = len(w.fold_hidden)
    for i in range(config.scm_count):
        params[f"scm{i}.acm.fold.l{last}.w"].data[:] = 0.0
        params[f"scm{i}.acm.fold.l{last}.b"].data[:] = 0.0
