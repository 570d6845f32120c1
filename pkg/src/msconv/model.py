"""Desk-scale embedding backbone and margin-based softmax losses.

TinyNet is a deliberately small stand-in for a production backbone: a stem
convolution, one or more stages of residual multi-scale blocks, global
average pooling, and an FC head whose output is L2-normalized onto the unit
sphere.  The margin losses (ArcFace / CosFace / combined-margin forms)
operate on cosine logits between embeddings and class-center rows.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from . import tensor as T
from .autograd import Tape, Var
from .block import (FusionKind, MSConvState, _gauss, block_forward_on_tape,
                    param_rng)

BLOCK_PARAM_NAMES = ("k3", "k5", "w_reduce", "b_reduce", "w_expand", "b_expand")


@dataclass(frozen=True)
class StageSpec:
    """One stage: ``blocks`` residual units at ``channels`` width.

    The first block applies ``stride`` (with a 1x1 projection shortcut when
    stride or width changes); the rest are stride-1 identity residuals.
    """

    blocks: int
    channels: int
    stride: int = 1
    kind: FusionKind = FusionKind.MSCONV

    def __post_init__(self):
        if self.blocks < 1 or self.channels < 1 or self.stride < 1:
            raise ValueError(f"invalid stage spec {self}")


@dataclass(frozen=True)
class TinyNetConfig:
    in_channels: int = 3
    stem_channels: int = 16
    stages: tuple[StageSpec, ...] = (StageSpec(blocks=1, channels=32, stride=2),)
    embed_dim: int = 64
    dilations: tuple[int, int] = (1, 2)
    reduction: int = 16
    min_width: int = 32

    def __post_init__(self):
        if self.in_channels < 1 or self.stem_channels < 1 or self.embed_dim < 1:
            raise ValueError("channel and embedding widths must be positive")
        if not self.stages:
            raise ValueError("at least one stage required")
        if min(self.dilations) < 1:
            raise ValueError("dilations must be positive")

    def with_fusion(self, kind: FusionKind) -> "TinyNetConfig":
        """Same architecture with every block switched to ``kind``."""
        return replace(self, stages=tuple(replace(s, kind=kind)
                                          for s in self.stages))

    def total_stride(self) -> int:
        out = 1
        for s in self.stages:
            out *= s.stride
        return out

    def block_layout(self):
        """Yields (name, c_in, c_out, stride, kind) for every block in order."""
        c_prev = self.stem_channels
        for si, stage in enumerate(self.stages):
            for bi in range(stage.blocks):
                stride = stage.stride if bi == 0 else 1
                yield f"s{si}b{bi}", c_prev, stage.channels, stride, stage.kind
                c_prev = stage.channels


def init_params(cfg: TinyNetConfig, seed: int) -> dict[str, np.ndarray]:
    """Fresh parameter set: fan-in Gaussian weights, zero biases.

    Every layer draws from its own seeded stream, so adding or removing one
    layer never shifts another layer's initialization.
    """
    params: dict[str, np.ndarray] = {}
    params["stem"] = _gauss(param_rng(seed, "stem"),
                            (3, 3, cfg.in_channels, cfg.stem_channels),
                            9 * cfg.in_channels)
    for name, c_in, c_out, stride, _ in cfg.block_layout():
        st = MSConvState.init(c_in, c_out, seed=seed, tag=name,
                              dilations=cfg.dilations, stride=stride,
                              reduction=cfg.reduction, min_width=cfg.min_width)
        for pname, arr in st.param_dict().items():
            params[f"{name}/{pname}"] = arr
        if stride != 1 or c_in != c_out:
            params[f"{name}/proj"] = _gauss(param_rng(seed, name + "/proj"),
                                            (1, 1, c_in, c_out), c_in)
    c_last = cfg.stages[-1].channels
    params["w_embed"] = _gauss(param_rng(seed, "embed/w"),
                               (c_last, cfg.embed_dim), c_last)
    params["b_embed"] = np.zeros(cfg.embed_dim)
    return params


def tinynet_forward(tape: Tape, x: Var, params: dict[str, Var],
                    cfg: TinyNetConfig, traces: list | None = None) -> Var:
    """Record the backbone forward pass; returns the unit-norm embedding Var.

    Pass a list as ``traces`` to collect (block name, intermediate Vars)
    pairs for visualization.
    """
    n, h, w, c = x.value.shape
    if c != cfg.in_channels:
        raise T.ShapeError(f"input has {c} channels, config expects {cfg.in_channels}")
    stride_all = cfg.total_stride()
    if h % stride_all or w % stride_all:
        raise ValueError(f"spatial dims {h}x{w} not divisible by total stride "
                         f"{stride_all}")
    cur = tape.conv2d(x, params["stem"], dilation=1, stride=1)
    for name, c_in, c_out, stride, kind in cfg.block_layout():
        blk = {p: params[f"{name}/{p}"] for p in BLOCK_PARAM_NAMES}
        v, tr = block_forward_on_tape(tape, cur, blk, dilations=cfg.dilations,
                                      stride=stride, kind=kind)
        if f"{name}/proj" in params:
            shortcut = tape.conv2d(cur, params[f"{name}/proj"],
                                   dilation=1, stride=stride)
        else:
            shortcut = cur
        cur = tape.add(v, shortcut)
        if traces is not None:
            traces.append((name, tr))
    pooled = tape.gap(cur)
    emb = tape.fc(pooled, params["w_embed"], params["b_embed"])
    return tape.l2_normalize_rows(emb)


def tinynet_embed(x: T.Tensor4, params: dict[str, np.ndarray],
                  cfg: TinyNetConfig) -> T.ChannelVec:
    """Pure embedding extraction on a throwaway tape."""
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    return tinynet_forward(tape, tape.leaf(x), leaves, cfg).value


# -- margin losses -----------------------------------------------------------

# arccos argument clamp; keeps the angular forms differentiable at cos = +-1
COS_CLAMP = 1.0 - 1e-7


class MarginKind(Enum):
    PLAIN = "plain"
    ARC = "arc"
    COS = "cos"
    COMBINED = "combined"


@dataclass(frozen=True)
class MarginLossConfig:
    """Scaled cosine logits with a margin on the target class.

    The target logit is s * (cos(m1*theta + m2) - m3) where theta is the
    angle between the embedding and its class center; non-target logits are
    plain s * cos(theta_j).  m1=1, m2=0 reduces the target form to
    cos(theta) - m3 and is evaluated without any arccos.
    """

    kind: MarginKind
    class_count: int
    scale: float = 64.0
    m1: float = 1.0
    m2: float = 0.0
    m3: float = 0.0

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("need at least two classes")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.m1 <= 0 or self.m2 < 0 or self.m3 < 0:
            raise ValueError("margins must be non-negative (m1 positive)")
        if self.kind is MarginKind.PLAIN and \
                (self.m1, self.m2, self.m3) != (1.0, 0.0, 0.0):
            raise ValueError("plain loss takes no margins")

    @classmethod
    def plain(cls, class_count: int, scale: float = 1.0):
        return cls(MarginKind.PLAIN, class_count, scale)

    @classmethod
    def arc(cls, class_count: int, scale: float = 64.0, m2: float = 0.5):
        return cls(MarginKind.ARC, class_count, scale, m2=m2)

    @classmethod
    def cos(cls, class_count: int, scale: float = 64.0, m3: float = 0.35):
        return cls(MarginKind.COS, class_count, scale, m3=m3)

    @classmethod
    def combined(cls, class_count: int, scale: float = 64.0, m1: float = 1.0,
                 m2: float = 0.3, m3: float = 0.2):
        return cls(MarginKind.COMBINED, class_count, scale, m1, m2, m3)


def _check_margin_inputs(emb: np.ndarray, labels: np.ndarray,
                         centers: np.ndarray, cfg: MarginLossConfig) -> np.ndarray:
    if emb.ndim != 2 or centers.ndim != 2 or emb.shape[1] != centers.shape[1]:
        raise T.ShapeError(f"embeddings {emb.shape} vs centers {centers.shape}")
    if centers.shape[0] != cfg.class_count:
        raise T.ShapeError(f"{centers.shape[0]} centers for {cfg.class_count} classes")
    labels = np.asarray(labels)
    if labels.shape != (emb.shape[0],):
        raise T.ShapeError(f"labels shape {labels.shape} for batch {emb.shape[0]}")
    if labels.min() < 0 or labels.max() >= cfg.class_count:
        raise ValueError("label out of range")
    for tag, rows in (("embedding", emb), ("center", centers)):
        norms = np.sqrt(np.sum(rows * rows, axis=1))
        worst = float(np.max(np.abs(norms - 1.0)))
        if worst > 1e-4:
            raise ValueError(f"{tag} rows not L2-normalized (off by {worst:.3e})")
    return labels.astype(np.int64)


def _margin_forward(emb, labels, centers, cfg):
    """Loss value plus the analytic gradients w.r.t. embeddings and centers."""
    labels = _check_margin_inputs(emb, labels, centers, cfg)
    n = emb.shape[0]
    rows = np.arange(n)
    cos_all = emb @ centers.T
    target = cos_all[rows, labels]

    if cfg.m1 == 1.0 and cfg.m2 == 0.0:
        psi = target - cfg.m3
        factor = np.ones(n)
    else:
        clamped = np.clip(target, -COS_CLAMP, COS_CLAMP)
        theta = np.arccos(clamped)
        psi = np.cos(cfg.m1 * theta + cfg.m2) - cfg.m3
        active = (target > -COS_CLAMP) & (target < COS_CLAMP)
        factor = np.where(
            active, cfg.m1 * np.sin(cfg.m1 * theta + cfg.m2) / np.sin(theta), 0.0)

    logits = cfg.scale * cos_all
    logits[rows, labels] = cfg.scale * psi
    peak = logits.max(axis=1, keepdims=True)
    expd = np.exp(logits - peak)
    total = expd.sum(axis=1, keepdims=True)
    loss = float(np.mean(np.log(total[:, 0]) + peak[:, 0] - logits[rows, labels]))

    dlogits = expd / total
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    dcos = cfg.scale * dlogits
    dcos[rows, labels] *= factor
    return loss, dcos @ centers, dcos.T @ emb


def margin_loss(embeddings: np.ndarray, labels, centers: np.ndarray,
                cfg: MarginLossConfig) -> float:
    """Mean margin cross-entropy over the batch (value only)."""
    loss, _, _ = _margin_forward(np.asarray(embeddings, dtype=np.float64),
                                 labels, np.asarray(centers, dtype=np.float64),
                                 cfg)
    return loss


def margin_ce_on_tape(tape: Tape, emb: Var, centers: Var, labels,
                      cfg: MarginLossConfig) -> Var:
    """Margin cross-entropy as one fused tape op with analytic backward."""
    loss, d_emb, d_centers = _margin_forward(emb.value, labels,
                                             centers.value, cfg)

    def vjp(g):
        s = float(g)
        return (s * d_emb, s * d_centers)

    return tape.emit("margin_ce", (emb, centers), np.asarray(loss), vjp)


def cosine_scores(embeddings: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Cosine logits (n, class_count) between unit rows."""
    return embeddings @ centers.T


def normalize_rows(rows: np.ndarray) -> np.ndarray:
    """Unit-norm rows; zero rows stay zero."""
    norms = np.sqrt(np.sum(rows * rows, axis=1, keepdims=True))
    return rows / np.where(norms > 0, norms, 1.0)
