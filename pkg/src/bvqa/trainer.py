"""Two-stage training: image pretraining, then video finetuning.

Stage one trains the spatial pooling stage plus a throwaway scalar head on
single images (patch grids with a quality score). Stage two builds the
full video model, optionally seeds its spatial stage with the pretrained
arrays, and trains on whole videos. Patch features come from a frozen
extractor in both stages, so the CNN itself never trains here.

Reproducibility rules the design:
  * every epoch's shuffle derives from (seed, epoch) alone, so resuming
    from a checkpoint replays the exact batch order a straight run uses,
  * the optimizer is pure (arrays in, arrays out) and its moments live in
    the checkpoint, so stop-and-resume is bit-identical to running through,
  * epoch 0 in the log is the loss before any update, which makes "did
    training move at all" visible in every log.

Gradients accumulate item by item: each video's loss is scaled by 1/batch
before backpropagation, and one optimizer step fires per batch.
"""

from __future__ import annotations

import dataclasses
import io
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, as_node, backward, grad_of, no_grad
from .errors import CheckpointError, ConfigError, DataError, NumericError, ShapeError
from .nncore import AdamState, adam_update, init_fc_params, mse_loss, zero_grads
from .pooling import (
    FcParams,
    ModelParams,
    PoolParams,
    SpatialPoolConfig,
    TemporalPoolConfig,
    image_forward,
    init_model_params,
    init_score_head,
    init_spatial_params,
    video_forward,
)

CHECKPOINT_VERSION = 1

# child-seed tags so the epoch shuffle and holdout split draw from
# independent streams of the one training seed
_SHUFFLE_TAG = 0x5E9
_HOLDOUT_TAG = 0x7A1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    freeze: frozenset = frozenset()
    holdout_frac: float = 0.0
    stop_at_train_mse: float | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.holdout_frac < 1.0:
            raise ConfigError(f"holdout_frac must be in [0, 1), got {self.holdout_frac}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        object.__setattr__(self, "freeze", frozenset(self.freeze))


@dataclass
class EpochStats:
    epoch: int
    train_mse: float
    val_mse: float | None = None
    wall_s: float = 0.0


@dataclass
class TrainLog:
    entries: list[EpochStats] = field(default_factory=list)

    def to_jsonl_text(self) -> str:
        buf = io.StringIO()
        for e in self.entries:
            row = {"epoch": e.epoch, "train_mse": e.train_mse, "wall_s": e.wall_s}
            if e.val_mse is not None:
                row["val_mse"] = e.val_mse
            buf.write(json.dumps(row, sort_keys=True) + "\n")
        return buf.getvalue()

    @property
    def final_train_mse(self) -> float:
        if not self.entries:
            raise DataError("empty training log")
        return self.entries[-1].train_mse


def _is_frozen(name: str, freeze) -> bool:
    return any(name == p or name.startswith(p + ".") for p in freeze)


def _mean_loss(items, loss_fn) -> float:
    with no_grad():
        return float(np.mean([float(loss_fn(x, y).value) for x, y in items]))


def _train_loop(items, loss_fn, trainable: dict[str, Node], cfg: TrainConfig,
                start_epoch: int = 0, adam: AdamState | None = None,
                on_checkpoint=None) -> tuple[TrainLog, AdamState]:
    """Generic minibatch loop shared by both training stages.

    loss_fn(x, y) must build a fresh scalar loss node. on_checkpoint(epoch,
    adam) fires after checkpoint-worthy epochs and after the final one.
    """
    items = list(items)
    if not items:
        raise DataError("training needs at least one example")
    val_items: list = []
    if cfg.holdout_frac > 0.0:
        rng = np.random.default_rng([cfg.seed, _HOLDOUT_TAG])
        perm = rng.permutation(len(items))
        n_val = round(cfg.holdout_frac * len(items))
        if n_val >= len(items):
            raise DataError(f"holdout_frac={cfg.holdout_frac} leaves no training items")
        val_items = [items[i] for i in perm[:n_val]]
        items = [items[i] for i in perm[n_val:]]

    if adam is None:
        adam = AdamState(lr=cfg.lr)
    log = TrainLog()
    t0 = time.perf_counter()
    if start_epoch == 0:
        log.entries.append(EpochStats(
            epoch=0, train_mse=_mean_loss(items, loss_fn),
            val_mse=_mean_loss(val_items, loss_fn) if val_items else None,
            wall_s=time.perf_counter() - t0))

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, _SHUFFLE_TAG, epoch]).permutation(len(items))
        epoch_losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = [items[i] for i in order[lo:lo + cfg.batch_size]]
            zero_grads(trainable.items())
            for x, y in batch:
                loss = loss_fn(x, y)
                value = float(loss.value)
                if not np.isfinite(value):
                    raise NumericError(f"training diverged: non-finite loss at "
                                       f"epoch {epoch}; check the input features "
                                       f"or lower the learning rate")
                epoch_losses.append(value)
                backward(ad.scale(loss, 1.0 / len(batch)))
            params = {name: node.value for name, node in trainable.items()}
            grads = {name: grad_of(node) for name, node in trainable.items()}
            params, adam = adam_update(adam, params, grads)
            for name, node in trainable.items():
                node.value = params[name]
        zero_grads(trainable.items())
        train_mse = float(np.mean(epoch_losses))
        log.entries.append(EpochStats(
            epoch=epoch, train_mse=train_mse,
            val_mse=_mean_loss(val_items, loss_fn) if val_items else None,
            wall_s=time.perf_counter() - t0))
        snapshot_due = cfg.checkpoint_every > 0 and epoch % cfg.checkpoint_every == 0
        stop = (cfg.stop_at_train_mse is not None
                and train_mse <= cfg.stop_at_train_mse)
        if on_checkpoint is not None and (snapshot_due or stop or epoch == cfg.epochs):
            on_checkpoint(epoch, adam)
        if stop:
            break
    return log, adam


# ---------------------------------------------------------------------------
# stage one: image pretraining


@dataclass
class PretrainResult:
    d: int
    spatial_cfg: SpatialPoolConfig
    spatial: PoolParams
    head: FcParams
    log: TrainLog

    def named_params(self) -> dict[str, Node]:
        out = dict(self.spatial.named("spatial"))
        out.update(self.head.named("pretrain_head"))
        return out


def _check_image(x, d: int | None):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"pretraining expects (N, d) images, got {arr.shape}")
    if d is not None and arr.shape[1] != d:
        raise ShapeError(f"pretraining image has d={arr.shape[1]}, expected {d}")
    return arr


def pretrain_spatial(images, spatial_cfg: SpatialPoolConfig,
                     cfg: TrainConfig) -> PretrainResult:
    """Train the spatial stage plus a scalar head on (patch-grid, score) pairs."""
    images = [(np.asarray(x, dtype=np.float64), float(y)) for x, y in images]
    if not images:
        raise DataError("pretraining needs at least one image")
    d = _check_image(images[0][0], None).shape[1]
    for x, _ in images:
        _check_image(x, d)
    spatial = init_spatial_params(d, spatial_cfg, np.random.default_rng([cfg.seed, 1]))
    head = init_score_head(spatial_cfg.fc_out, np.random.default_rng([cfg.seed, 4]))

    trainable = dict(spatial.named("spatial"))
    trainable.update(head.named("pretrain_head"))
    trainable = {n: p for n, p in trainable.items() if not _is_frozen(n, cfg.freeze)}

    def loss_fn(x, y):
        pred = image_forward(spatial, spatial_cfg, d, head, x)
        return mse_loss(pred, as_node(np.asarray(y)))

    log, _ = _train_loop(images, loss_fn, trainable, cfg)
    return PretrainResult(d=d, spatial_cfg=spatial_cfg, spatial=spatial,
                          head=head, log=log)


# ---------------------------------------------------------------------------
# stage two: video finetuning


@dataclass
class FinetuneResult:
    model: ModelParams
    log: TrainLog
    adam: AdamState


def adopt_spatial_stage(model: ModelParams, pretrained: PoolParams) -> None:
    """Copy pretrained spatial arrays into a model, shape-checked, by value."""
    dst = dict(model.spatial.named("spatial"))
    src = dict(pretrained.named("spatial"))
    if set(dst) != set(src):
        raise CheckpointError("pretrained spatial stage does not fit this model "
                              f"(parameter sets differ: {sorted(set(dst) ^ set(src))})")
    for name, node in dst.items():
        if node.value.shape != src[name].value.shape:
            raise CheckpointError(f"pretrained spatial stage does not fit: {name} "
                                  f"is {src[name].value.shape}, expected {node.value.shape}")
        node.value = src[name].value.copy()


def _check_video(x, d: int | None):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"finetuning expects (T, N, d) videos, got {arr.shape}")
    if d is not None and arr.shape[2] != d:
        raise ShapeError(f"video has d={arr.shape[2]}, expected {d}")
    return arr


def finetune(videos, spatial_cfg: SpatialPoolConfig, temporal_cfg: TemporalPoolConfig,
             cfg: TrainConfig, init_spatial: PoolParams | None = None,
             resume=None, checkpoint_dir=None) -> FinetuneResult:
    """Train the full video scorer on (features, mos) pairs.

    init_spatial seeds the spatial stage (stage-one output). resume points
    at a checkpoint written by this function; training continues from the
    saved epoch up to cfg.epochs with identical results to an uninterrupted
    run. The throwaway pretraining head rides along in the model for
    checkpointing but takes no video gradient.
    """
    videos = [(np.asarray(x, dtype=np.float64), float(y)) for x, y in videos]
    if not videos:
        raise DataError("finetuning needs at least one video")
    d = _check_video(videos[0][0], None).shape[2]
    for x, _ in videos:
        _check_video(x, d)

    start_epoch = 0
    adam: AdamState | None = None
    if resume is not None:
        raw = load_checkpoint(resume)
        meta = raw.meta
        if meta.get("kind") != "finetune":
            raise CheckpointError(f"cannot resume from a {meta.get('kind')!r} checkpoint")
        if meta["seed"] != cfg.seed:
            raise CheckpointError(f"resume seed {cfg.seed} differs from the "
                                  f"checkpoint's ({meta['seed']})")
        model = model_from_checkpoint(raw)
        if model.d != d:
            raise CheckpointError(f"checkpoint feature dimension {model.d} does "
                                  f"not match the data ({d})")
        if (model.spatial_cfg, model.temporal_cfg) != (spatial_cfg, temporal_cfg):
            raise CheckpointError("checkpoint pooling configuration does not "
                                  "match the requested one")
        start_epoch = int(meta["epoch"])
        adam = raw.adam
        adam = dataclasses.replace(adam, lr=cfg.lr) if adam is not None else None
    else:
        model = init_model_params(d, spatial_cfg, temporal_cfg, seed=cfg.seed)
        if init_spatial is not None:
            adopt_spatial_stage(model, init_spatial)

    trainable = {n: p for n, p in model.named_params().items()
                 if not n.startswith("pretrain_head.") and not _is_frozen(n, cfg.freeze)}
    if not trainable:
        raise DataError("freeze leaves nothing to train")

    def loss_fn(x, y):
        return mse_loss(video_forward(model, x), as_node(np.asarray(y)))

    on_checkpoint = None
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)

        def on_checkpoint(epoch, state):
            path = os.path.join(os.fspath(checkpoint_dir), f"ckpt_epoch{epoch:05d}.npz")
            save_model_checkpoint(path, model, cfg, epoch, state)

    log, adam = _train_loop(videos, loss_fn, trainable, cfg,
                            start_epoch=start_epoch, adam=adam,
                            on_checkpoint=on_checkpoint)
    return FinetuneResult(model=model, log=log, adam=adam)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class RawCheckpoint:
    params: dict[str, np.ndarray]
    adam: AdamState | None
    meta: dict


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict,
                    adam: AdamState | None = None) -> None:
    """npz with param/<name> arrays, optional adam moments, and a JSON meta."""
    path = os.fspath(path)
    arrays = {f"param/{n}": np.asarray(v) for n, v in params.items()}
    if adam is not None:
        meta = dict(meta)
        meta["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                        "eps": adam.eps, "t": adam.t}
        for n, v in adam.m.items():
            arrays[f"adam.m/{n}"] = np.asarray(v)
        for n, v in adam.v.items():
            arrays[f"adam.v/{n}"] = np.asarray(v)
    arrays["version"] = np.asarray(CHECKPOINT_VERSION)
    arrays["meta"] = np.asarray(json.dumps(meta, sort_keys=True))
    tmp = path + ".tmp.npz"
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path) -> RawCheckpoint:
    path = os.fspath(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "version" not in arrays or "meta" not in arrays:
        raise CheckpointError(f"{path}: not a checkpoint (missing version/meta)")
    version = int(arrays["version"])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} "
                              f"(expected {CHECKPOINT_VERSION})")
    meta = json.loads(str(arrays["meta"]))
    params = {k[len("param/"):]: arrays[k] for k in arrays if k.startswith("param/")}
    adam = None
    if "adam" in meta:
        a = meta["adam"]
        adam = AdamState(
            lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"],
            m={k[len("adam.m/"):]: arrays[k] for k in arrays if k.startswith("adam.m/")},
            v={k[len("adam.v/"):]: arrays[k] for k in arrays if k.startswith("adam.v/")})
    return RawCheckpoint(params=params, adam=adam, meta=meta)


def _cfg_meta(spatial_cfg: SpatialPoolConfig, temporal_cfg: TemporalPoolConfig | None):
    meta = {"spatial_cfg": dataclasses.asdict(spatial_cfg)}
    if temporal_cfg is not None:
        meta["temporal_cfg"] = dataclasses.asdict(temporal_cfg)
    return meta


def save_model_checkpoint(path, model: ModelParams, cfg: TrainConfig,
                          epoch: int, adam: AdamState | None) -> None:
    meta = {"kind": "finetune", "epoch": epoch, "seed": cfg.seed, "d": model.d,
            "has_pretrain_head": model.pretrain_head is not None}
    meta.update(_cfg_meta(model.spatial_cfg, model.temporal_cfg))
    params = {n: node.value for n, node in model.named_params().items()}
    save_checkpoint(path, params, meta, adam)


def model_from_checkpoint(raw: RawCheckpoint) -> ModelParams:
    meta = raw.meta
    try:
        spatial_cfg = SpatialPoolConfig(**meta["spatial_cfg"])
        temporal_cfg = TemporalPoolConfig(**meta["temporal_cfg"])
        model = init_model_params(int(meta["d"]), spatial_cfg, temporal_cfg,
                                  seed=int(meta.get("seed", 0)),
                                  with_pretrain_head=bool(meta["has_pretrain_head"]))
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint meta is incomplete: {exc}") from exc
    named = model.named_params()
    if set(named) != set(raw.params):
        raise CheckpointError("checkpoint parameter names do not match the model "
                              f"({sorted(set(named) ^ set(raw.params))})")
    for name, node in named.items():
        arr = np.asarray(raw.params[name], dtype=np.float64)
        if arr.shape != node.value.shape:
            raise CheckpointError(f"checkpoint {name}: shape {arr.shape} does not "
                                  f"match {node.value.shape}")
        node.value = arr
    return model


def save_pretrain_checkpoint(path, result: PretrainResult, cfg: TrainConfig) -> None:
    meta = {"kind": "pretrain", "epoch": len(result.log.entries) - 1,
            "seed": cfg.seed, "d": result.d}
    meta.update(_cfg_meta(result.spatial_cfg, None))
    params = {n: node.value for n, node in result.named_params().items()}
    save_checkpoint(path, params, meta)


def load_pretrain_checkpoint(path) -> PretrainResult:
    raw = load_checkpoint(path)
    if raw.meta.get("kind") != "pretrain":
        raise CheckpointError(f"{os.fspath(path)}: not a pretraining checkpoint")
    try:
        spatial_cfg = SpatialPoolConfig(**raw.meta["spatial_cfg"])
        d = int(raw.meta["d"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint meta is incomplete: {exc}") from exc
    spatial = init_spatial_params(d, spatial_cfg, np.random.default_rng(0))
    head = init_fc_params(spatial_cfg.fc_out, 1, np.random.default_rng(0))
    result = PretrainResult(d=d, spatial_cfg=spatial_cfg, spatial=spatial,
                            head=head, log=TrainLog())
    named = result.named_params()
    if set(named) != set(raw.params):
        raise CheckpointError("pretraining checkpoint parameter names do not match "
                              f"({sorted(set(named) ^ set(raw.params))})")
    for name, node in named.items():
        arr = np.asarray(raw.params[name], dtype=np.float64)
        if arr.shape != node.value.shape:
            raise CheckpointError(f"checkpoint {name}: shape {arr.shape} does not "
                                  f"match {node.value.shape}")
        node.value = arr
    return result
