"""Training loop, cosine-annealed SGD, run configuration, and checkpoints.

The recipe: SGD with momentum 0.9, coupled weight decay 5e-4 on weights (not
biases), learning rate annealed from 0.02 to 5e-6 along a quarter cosine wave
evaluated per step.  Everything is seeded and single-threaded, so two runs of
the same config produce byte-identical logs and checkpoints.

Run configs serialize to flat ``key = value`` text (the same format the CLI
reads), and checkpoints echo their config alongside the tensors so a saved
model is self-describing.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import msct
from .block import FusionKind
from .data import LabeledImages, SyntheticSpec, gen_synthetic, make_pairs
from .metrics import VerificationSet, pair_accuracy, pair_scores, tar_at_far
from .model import (MarginKind, MarginLossConfig, StageSpec, TinyNetConfig,
                    init_params, margin_ce_on_tape, normalize_rows,
                    tinynet_embed, tinynet_forward)
from .autograd import Tape
from .block import param_rng, _gauss


class ConfigError(ValueError):
    """Malformed or unknown run-configuration input."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the offending batch location."""

    def __init__(self, epoch: int, step: int, batch_indices):
        self.epoch = epoch
        self.step = step
        self.batch_indices = list(int(i) for i in batch_indices)
        super().__init__(
            f"non-finite loss at epoch {epoch} step {step}; "
            f"batch indices {self.batch_indices}")


@dataclass(frozen=True)
class LRSchedule:
    """Quarter-wave cosine decay: lr(t) = lr_min + (lr_init-lr_min)*cos(pi*t/(2T))."""

    total_steps: int
    lr_init: float = 0.02
    lr_min: float = 5e-6

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("schedule needs at least one step")
        if not 0.0 < self.lr_min < self.lr_init:
            raise ValueError("require 0 < lr_min < lr_init")


def lr_at(sched: LRSchedule, t: int) -> float:
    """Learning rate at step t in [0, T].

    Evaluated as the convex combination lr_min*(1-s) + lr_init*s with
    s = sin(pi*(T-t)/(2T)), which equals the cosine rule exactly in real
    arithmetic but hits both endpoints exactly in floating point (s is 0.0 at
    t=T and rounds to 1.0 at t=0).
    """
    if not 0 <= t <= sched.total_steps:
        raise ValueError(f"step {t} outside [0, {sched.total_steps}]")
    s = math.sin(math.pi * (sched.total_steps - t) / (2.0 * sched.total_steps))
    return sched.lr_min * (1.0 - s) + sched.lr_init * s


@dataclass(frozen=True)
class RunConfig:
    data: SyntheticSpec = SyntheticSpec()
    model: TinyNetConfig = TinyNetConfig()
    # scale 16 keeps the epoch-loss trend smooth at desk size; the
    # conventional 64 overshoots once the tiny set is separated
    loss: MarginLossConfig = MarginLossConfig(MarginKind.COS, 10, scale=16.0,
                                              m3=0.35)
    fusion: FusionKind = FusionKind.MSCONV
    lr_init: float = 0.02
    lr_min: float = 5e-6
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.lr_min < self.lr_init:
            raise ValueError("require 0 < lr_min < lr_init")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive, epochs non-negative")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.loss.class_count != self.data.identity_count:
            raise ValueError("loss class_count must equal identity_count")


def _decayed(name: str) -> bool:
    # biases are exempt from weight decay
    return not name.split("/")[-1].startswith("b_")


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             velocity: dict[str, np.ndarray], cfg: RunConfig, lr: float,
             ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """One momentum-SGD update; returns fresh arrays, inputs untouched."""
    new_p, new_v = {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape "
                             f"{p.shape} for {name}")
        if cfg.weight_decay and _decayed(name):
            g = g + cfg.weight_decay * p
        v = cfg.momentum * velocity[name] + g
        new_v[name] = v
        new_p[name] = p - lr * v
    return new_p, new_v


@dataclass
class TrainResult:
    config: RunConfig
    params: dict[str, np.ndarray]
    init: dict[str, np.ndarray]
    epoch_losses: list[float] = field(default_factory=list)
    epoch_accs: list[float] = field(default_factory=list)
    log_lines: list[str] = field(default_factory=list)


def _fmt(x: float) -> str:
    return repr(float(x))


def full_init(cfg: RunConfig) -> dict[str, np.ndarray]:
    """Backbone parameters plus the class-center matrix."""
    model_cfg = cfg.model.with_fusion(cfg.fusion)
    params = init_params(model_cfg, cfg.seed)
    params["centers"] = _gauss(param_rng(cfg.seed, "centers"),
                               (cfg.loss.class_count, cfg.model.embed_dim),
                               cfg.model.embed_dim)
    return params


def embed_dataset(params: dict[str, np.ndarray], model_cfg: TinyNetConfig,
                  images: np.ndarray, batch_size: int) -> np.ndarray:
    """Embeddings for every image, batched, deterministic order."""
    net_params = {k: v for k, v in params.items() if k != "centers"}
    chunks = [tinynet_embed(images[i:i + batch_size], net_params, model_cfg)
              for i in range(0, images.shape[0], batch_size)]
    return np.concatenate(chunks, axis=0)


def train_accuracy(params: dict[str, np.ndarray], model_cfg: TinyNetConfig,
                   ds: LabeledImages, batch_size: int) -> float:
    """Fraction of samples whose nearest class center is their own."""
    embs = embed_dataset(params, model_cfg, ds.images, batch_size)
    centers = normalize_rows(np.asarray(params["centers"], dtype=np.float64))
    predicted = np.argmax(embs @ centers.T, axis=1)
    return float(np.mean(predicted == ds.labels))


def train(cfg: RunConfig, dataset: LabeledImages | None = None) -> TrainResult:
    """Run the full recipe; pure apart from consuming the config and data.

    Emits one log line per epoch (mean step loss, train accuracy, last lr).
    Raises TrainingDivergedError if any step's loss is non-finite.
    """
    ds = gen_synthetic(cfg.data) if dataset is None else dataset
    model_cfg = cfg.model.with_fusion(cfg.fusion)
    params = full_init(cfg)
    init_snapshot = {k: v.copy() for k, v in params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}

    n = ds.images.shape[0]
    batches_per_epoch = -(-n // cfg.batch_size)
    total_steps = cfg.epochs * batches_per_epoch
    sched = (LRSchedule(total_steps, cfg.lr_init, cfg.lr_min)
             if total_steps else None)

    result = TrainResult(cfg, params, init_snapshot)
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 3, epoch]).permutation(n)
        step_losses = []
        lr = cfg.lr_init
        for b in range(batches_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = lr_at(sched, step)
            tape = Tape()
            leaves = {k: tape.leaf(v) for k, v in params.items()}
            emb = tinynet_forward(tape, tape.leaf(ds.images[idx]),
                                  leaves, model_cfg)
            # non-finite values and zero rows (norm overflow) both mean the
            # optimization state is unusable
            if (not np.isfinite(emb.value).all()
                    or not emb.value.any(axis=1).all()):
                raise TrainingDivergedError(epoch, step, idx)
            centers = tape.l2_normalize_rows(leaves["centers"])
            loss_var = margin_ce_on_tape(tape, emb, centers,
                                         ds.labels[idx], cfg.loss)
            loss = float(loss_var.value)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, step, idx)
            grads = tape.backward(loss_var)
            params, velocity = sgd_step(
                params, {k: grads[v] for k, v in leaves.items()},
                velocity, cfg, lr)
            step_losses.append(loss)
            step += 1
        epoch_loss = float(np.mean(step_losses))
        acc = train_accuracy(params, model_cfg, ds, cfg.batch_size)
        result.epoch_losses.append(epoch_loss)
        result.epoch_accs.append(acc)
        result.log_lines.append(
            f"epoch={epoch + 1} loss={_fmt(epoch_loss)} acc={_fmt(acc)} "
            f"lr={_fmt(lr)}")
    result.params = params
    return result


# -- verification evaluation -------------------------------------------------

def verification_set(embs: np.ndarray, pairs) -> VerificationSet:
    """Cosine scores of (i, j, same) index pairs, split by same-flag."""
    ii = np.array([p[0] for p in pairs])
    jj = np.array([p[1] for p in pairs])
    same = np.array([p[2] for p in pairs], dtype=bool)
    scores = pair_scores(embs[ii], embs[jj])
    return VerificationSet(scores[same], scores[~same])


def evaluate_verification(params, model_cfg: TinyNetConfig, ds: LabeledImages,
                          pairs, far_target: float, batch_size: int = 32,
                          ) -> dict[str, float]:
    embs = embed_dataset(params, model_cfg, ds.images, batch_size)
    vs = verification_set(embs, pairs)
    tar, thr = tar_at_far(vs, far_target)
    acc, acc_thr = pair_accuracy(vs)
    return {"tar": tar, "threshold": thr, "pair_acc": acc,
            "acc_threshold": acc_thr, "far_target": far_target}


# -- ablation harness ---------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    kind: FusionKind
    final_loss: float
    train_acc: float
    pair_acc: float
    tar: float
    threshold: float


@dataclass
class AblationReport:
    far_target: float
    rows: list[AblationRow]
    results: dict[FusionKind, TrainResult]


DEFAULT_ABLATION_KINDS = (FusionKind.MSCONV, FusionKind.MSCONV_SUM,
                          FusionKind.NO_SO, FusionKind.NO_MO_NO_SO,
                          FusionKind.SKCONV_REFERENCE)


def ablation_run(cfg: RunConfig, kinds=DEFAULT_ABLATION_KINDS, *,
                 far_target: float = 0.01, genuine_pairs: int = 300,
                 impostor_pairs: int = 1000) -> AblationReport:
    """Train one model per fusion kind on identical data and seed.

    Held-out evaluation uses a freshly generated identity set (data seed + 1)
    so the verification numbers measure the embedding space, not memorized
    training samples.
    """
    ds = gen_synthetic(cfg.data)
    eval_spec = replace(cfg.data, seed=cfg.data.seed + 1)
    eval_ds = gen_synthetic(eval_spec)
    pairs = make_pairs(eval_ds.labels, genuine_pairs, impostor_pairs,
                       seed=eval_spec.seed)

    rows, results = [], {}
    for kind in kinds:
        run_cfg = replace(cfg, fusion=kind)
        res = train(run_cfg, dataset=ds)
        ver = evaluate_verification(res.params,
                                    run_cfg.model.with_fusion(kind),
                                    eval_ds, pairs, far_target,
                                    cfg.batch_size)
        rows.append(AblationRow(
            kind=kind,
            final_loss=res.epoch_losses[-1] if res.epoch_losses else math.nan,
            train_acc=res.epoch_accs[-1] if res.epoch_accs else math.nan,
            pair_acc=ver["pair_acc"], tar=ver["tar"],
            threshold=ver["threshold"]))
        results[kind] = res
    return AblationReport(far_target, rows, results)


def format_ablation_report(report: AblationReport) -> str:
    """Human-readable table followed by a machine-readable key=value block."""
    head = (f"{'kind':<12} {'final_loss':>12} {'train_acc':>10} "
            f"{'pair_acc':>10} {'tar':>8} {'threshold':>10}")
    out = [f"fusion ablation (tar at far={report.far_target:g})", head,
           "-" * len(head)]
    for r in report.rows:
        out.append(f"{r.kind.value:<12} {r.final_loss:>12.6f} "
                   f"{r.train_acc:>10.4f} {r.pair_acc:>10.4f} "
                   f"{r.tar:>8.4f} {r.threshold:>10.4f}")
    out.append("")
    for r in report.rows:
        out.append(f"kind={r.kind.value} final_loss={_fmt(r.final_loss)} "
                   f"train_acc={_fmt(r.train_acc)} pair_acc={_fmt(r.pair_acc)} "
                   f"tar={_fmt(r.tar)} threshold={_fmt(r.threshold)}")
    return "\n".join(out) + "\n"


# -- flat key=value configuration ---------------------------------------------

def _parse_int(v: str) -> int:
    return int(v)


def _parse_float(v: str) -> float:
    return float(v)


def _parse_int_list(v: str) -> tuple[int, ...]:
    return tuple(int(part) for part in v.split(","))


def _parse_fusion(v: str) -> FusionKind:
    try:
        return FusionKind(v)
    except ValueError:
        raise ConfigError(f"unknown fusion kind {v!r}; choose from "
                          f"{[k.value for k in FusionKind]}") from None


def _parse_loss(v: str) -> MarginKind:
    try:
        return MarginKind(v)
    except ValueError:
        raise ConfigError(f"unknown loss kind {v!r}; choose from "
                          f"{[k.value for k in MarginKind]}") from None


_SCHEMA = {
    "identities": _parse_int,
    "samples_per_identity": _parse_int,
    "image_size": _parse_int,
    "channels": _parse_int,
    "noise_sigma": _parse_float,
    "shift_range": _parse_int,
    "data_seed": _parse_int,
    "stem_channels": _parse_int,
    "stage_blocks": _parse_int_list,
    "stage_channels": _parse_int_list,
    "stage_strides": _parse_int_list,
    "embed_dim": _parse_int,
    "dilations": _parse_int_list,
    "reduction": _parse_int,
    "min_width": _parse_int,
    "fusion": _parse_fusion,
    "loss": _parse_loss,
    "scale": _parse_float,
    "m1": _parse_float,
    "m2": _parse_float,
    "m3": _parse_float,
    "lr_init": _parse_float,
    "lr_min": _parse_float,
    "momentum": _parse_float,
    "weight_decay": _parse_float,
    "batch_size": _parse_int,
    "epochs": _parse_int,
    "seed": _parse_int,
}

# margins filled in per loss kind when the config does not pin them
_MARGIN_DEFAULTS = {
    MarginKind.PLAIN: (1.0, 0.0, 0.0),
    MarginKind.ARC: (1.0, 0.5, 0.0),
    MarginKind.COS: (1.0, 0.0, 0.35),
    MarginKind.COMBINED: (1.0, 0.3, 0.2),
}

_BASE = RunConfig()
_DEFAULTS = {
    "identities": _BASE.data.identity_count,
    "samples_per_identity": _BASE.data.samples_per_identity,
    "image_size": _BASE.data.height,
    "channels": _BASE.data.channels,
    "noise_sigma": _BASE.data.noise_sigma,
    "shift_range": _BASE.data.shift_range,
    "data_seed": _BASE.data.seed,
    "stem_channels": _BASE.model.stem_channels,
    "stage_blocks": tuple(s.blocks for s in _BASE.model.stages),
    "stage_channels": tuple(s.channels for s in _BASE.model.stages),
    "stage_strides": tuple(s.stride for s in _BASE.model.stages),
    "embed_dim": _BASE.model.embed_dim,
    "dilations": _BASE.model.dilations,
    "reduction": _BASE.model.reduction,
    "min_width": _BASE.model.min_width,
    "fusion": _BASE.fusion,
    "loss": _BASE.loss.kind,
    "scale": _BASE.loss.scale,
    "lr_init": _BASE.lr_init,
    "lr_min": _BASE.lr_min,
    "momentum": _BASE.momentum,
    "weight_decay": _BASE.weight_decay,
    "batch_size": _BASE.batch_size,
    "epochs": _BASE.epochs,
    "seed": _BASE.seed,
}


def parse_kv_lines(lines) -> dict[str, str]:
    """`key = value` pairs; comments (#) and blanks skipped; unknown keys fail."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = key.strip(), value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        pairs[key] = value
    return pairs


def build_config(pairs: dict[str, str]) -> RunConfig:
    """RunConfig from raw string pairs layered over desk defaults."""
    vals: dict[str, object] = {}
    for key, raw in pairs.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            vals[key] = _SCHEMA[key](raw)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    merged = {**_DEFAULTS, **vals}
    m1d, m2d, m3d = _MARGIN_DEFAULTS[merged["loss"]]
    merged.setdefault("m1", m1d)
    merged.setdefault("m2", m2d)
    merged.setdefault("m3", m3d)

    blocks = merged["stage_blocks"]
    chans = merged["stage_channels"]
    strides = merged["stage_strides"]
    if not (len(blocks) == len(chans) == len(strides)):
        raise ConfigError("stage_blocks, stage_channels and stage_strides "
                          "must have equal length")
    if len(merged["dilations"]) != 2:
        raise ConfigError("dilations must be two comma-separated integers")
    try:
        data = SyntheticSpec(
            identity_count=merged["identities"],
            samples_per_identity=merged["samples_per_identity"],
            height=merged["image_size"], width=merged["image_size"],
            channels=merged["channels"], noise_sigma=merged["noise_sigma"],
            shift_range=merged["shift_range"], seed=merged["data_seed"])
        model = TinyNetConfig(
            in_channels=merged["channels"],
            stem_channels=merged["stem_channels"],
            stages=tuple(StageSpec(blocks=b, channels=c, stride=s)
                         for b, c, s in zip(blocks, chans, strides)),
            embed_dim=merged["embed_dim"], dilations=merged["dilations"],
            reduction=merged["reduction"], min_width=merged["min_width"])
        loss = MarginLossConfig(
            kind=merged["loss"], class_count=merged["identities"],
            scale=merged["scale"], m1=merged["m1"], m2=merged["m2"],
            m3=merged["m3"])
        return RunConfig(
            data=data, model=model, loss=loss, fusion=merged["fusion"],
            lr_init=merged["lr_init"], lr_min=merged["lr_min"],
            momentum=merged["momentum"], weight_decay=merged["weight_decay"],
            batch_size=merged["batch_size"], epochs=merged["epochs"],
            seed=merged["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def config_to_lines(cfg: RunConfig) -> list[str]:
    """Flat echo of the config; feeding these lines back reproduces cfg."""
    def fmt(v):
        if isinstance(v, (FusionKind, MarginKind)):
            return v.value
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        if isinstance(v, float):
            return repr(v)
        return str(v)

    values = {
        "identities": cfg.data.identity_count,
        "samples_per_identity": cfg.data.samples_per_identity,
        "image_size": cfg.data.height,
        "channels": cfg.data.channels,
        "noise_sigma": cfg.data.noise_sigma,
        "shift_range": cfg.data.shift_range,
        "data_seed": cfg.data.seed,
        "stem_channels": cfg.model.stem_channels,
        "stage_blocks": tuple(s.blocks for s in cfg.model.stages),
        "stage_channels": tuple(s.channels for s in cfg.model.stages),
        "stage_strides": tuple(s.stride for s in cfg.model.stages),
        "embed_dim": cfg.model.embed_dim,
        "dilations": cfg.model.dilations,
        "reduction": cfg.model.reduction,
        "min_width": cfg.model.min_width,
        "fusion": cfg.fusion,
        "loss": cfg.loss.kind,
        "scale": cfg.loss.scale,
        "m1": cfg.loss.m1,
        "m2": cfg.loss.m2,
        "m3": cfg.loss.m3,
        "lr_init": cfg.lr_init,
        "lr_min": cfg.lr_min,
        "momentum": cfg.momentum,
        "weight_decay": cfg.weight_decay,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
    }
    return [f"{key} = {fmt(val)}" for key, val in values.items()]


def config_from_lines(lines) -> RunConfig:
    return build_config(parse_kv_lines(lines))


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(directory, params: dict[str, np.ndarray],
                    cfg: RunConfig) -> None:
    """Tensor files + manifest + a config echo; fully self-describing."""
    msct.save_tensors(directory, params)
    with open(os.path.join(directory, "config.txt"), "w") as fh:
        fh.write("\n".join(config_to_lines(cfg)) + "\n")


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], RunConfig]:
    params = msct.load_tensors(directory)
    with open(os.path.join(directory, "config.txt")) as fh:
        cfg = config_from_lines(fh.readlines())
    return params, cfg
