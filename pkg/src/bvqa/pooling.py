"""Model assembly: spatial pooling, temporal pooling, regression head.

A video arrives as a (T, N, d) feature tensor: T frames, N patches per
frame, d feature channels per patch. The model collapses it in two stages:

  spatial   per frame, N patch vectors -> one frame embedding. Variants:
            concatenate (flatten all patches, needs a fixed patch count),
            mean (average over patches), lstm / bilstm (two recurrent
            layers over the patch sequence in raster order, final state
            through a dense layer).
  temporal  T frame embeddings -> one score. Recurrent variants (lstm /
            bilstm, two layers plus a dense layer, then the head) see the
            frame order; scalar variants score every frame through the
            head and combine the scores with an arithmetic, harmonic, or
            geometric mean.

The harmonic and geometric means need positive inputs, so per-frame scores
are clamped to a small positive floor first. Everything is built from
autodiff nodes, so one backward call reaches every trainable array.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, as_node, no_grad
from .backbone import FeatureTensor
from .errors import ConfigError, ShapeError
from .nncore import (
    BiLstmParams,
    FcParams,
    LstmParams,
    bilstm_forward,
    bilstm_param_count,
    fc_forward,
    fc_param_count,
    init_bilstm_params,
    init_fc_params,
    init_lstm_params,
    lstm_forward,
    lstm_param_count,
)

SPATIAL_KINDS = ("concatenate", "mean", "lstm", "bilstm")
TEMPORAL_KINDS = ("mean", "harmonic", "geometric", "lstm", "bilstm")
RECURRENT_KINDS = ("lstm", "bilstm")

# floor for per-frame scores entering harmonic/geometric pooling
EPS_POS = 1e-6


@dataclass(frozen=True)
class SpatialPoolConfig:
    kind: str = "bilstm"
    hidden: int = 64
    fc_out: int = 256
    n_patches: int | None = None  # required by the concatenate variant

    def __post_init__(self):
        if self.kind not in SPATIAL_KINDS:
            raise ConfigError(f"unknown spatial pooling kind {self.kind!r}; "
                              f"choose from {SPATIAL_KINDS}")
        if self.hidden < 1 or self.fc_out < 1:
            raise ConfigError(f"spatial pooling sizes must be >= 1, got "
                              f"hidden={self.hidden} fc_out={self.fc_out}")
        if self.kind == "concatenate" and (self.n_patches is None or self.n_patches < 1):
            raise ConfigError("concatenate spatial pooling needs n_patches "
                              "(the flattened width depends on it)")


@dataclass(frozen=True)
class TemporalPoolConfig:
    kind: str = "bilstm"
    hidden: int = 64
    fc_out: int = 128

    def __post_init__(self):
        if self.kind not in TEMPORAL_KINDS:
            raise ConfigError(f"unknown temporal pooling kind {self.kind!r}; "
                              f"choose from {TEMPORAL_KINDS}")
        if self.hidden < 1 or self.fc_out < 1:
            raise ConfigError(f"temporal pooling sizes must be >= 1, got "
                              f"hidden={self.hidden} fc_out={self.fc_out}")

    @property
    def is_recurrent(self) -> bool:
        return self.kind in RECURRENT_KINDS


@dataclass
class PoolParams:
    """Trainable arrays of one pooling stage; all fields optional."""

    rnn1: LstmParams | BiLstmParams | None = None
    rnn2: LstmParams | BiLstmParams | None = None
    fc: FcParams | None = None

    def named(self, prefix: str):
        if self.rnn1 is not None:
            yield from self.rnn1.named(f"{prefix}.rnn1")
        if self.rnn2 is not None:
            yield from self.rnn2.named(f"{prefix}.rnn2")
        if self.fc is not None:
            yield from self.fc.named(f"{prefix}.fc")


@dataclass
class ModelParams:
    """The full video scorer plus the head used during image pretraining."""

    d: int
    spatial_cfg: SpatialPoolConfig
    temporal_cfg: TemporalPoolConfig
    spatial: PoolParams
    temporal: PoolParams
    head: FcParams
    pretrain_head: FcParams | None = field(default=None)

    def named_params(self) -> dict[str, Node]:
        out: dict[str, Node] = {}
        out.update(self.spatial.named("spatial"))
        out.update(self.temporal.named("temporal"))
        out.update(self.head.named("head"))
        if self.pretrain_head is not None:
            out.update(self.pretrain_head.named("pretrain_head"))
        return out


# ---------------------------------------------------------------------------
# initialization


def init_spatial_params(d: int, cfg: SpatialPoolConfig,
                        rng: np.random.Generator) -> PoolParams:
    if d < 1:
        raise ConfigError(f"feature dimension must be >= 1, got {d}")
    K = cfg.hidden
    if cfg.kind == "concatenate":
        return PoolParams(fc=init_fc_params(cfg.n_patches * d, cfg.fc_out, rng))
    if cfg.kind == "mean":
        return PoolParams(fc=init_fc_params(d, cfg.fc_out, rng))
    if cfg.kind == "lstm":
        return PoolParams(rnn1=init_lstm_params(d, K, rng),
                          rnn2=init_lstm_params(K, K, rng),
                          fc=init_fc_params(K, cfg.fc_out, rng))
    return PoolParams(rnn1=init_bilstm_params(d, K, rng),
                      rnn2=init_bilstm_params(2 * K, K, rng),
                      fc=init_fc_params(2 * K, cfg.fc_out, rng))


def init_temporal_params(in_dim: int, cfg: TemporalPoolConfig,
                         rng: np.random.Generator) -> PoolParams:
    if not cfg.is_recurrent:
        return PoolParams()
    K = cfg.hidden
    if cfg.kind == "lstm":
        return PoolParams(rnn1=init_lstm_params(in_dim, K, rng),
                          rnn2=init_lstm_params(K, K, rng),
                          fc=init_fc_params(K, cfg.fc_out, rng))
    return PoolParams(rnn1=init_bilstm_params(in_dim, K, rng),
                      rnn2=init_bilstm_params(2 * K, K, rng),
                      fc=init_fc_params(2 * K, cfg.fc_out, rng))


def head_input_dim(spatial_cfg: SpatialPoolConfig,
                   temporal_cfg: TemporalPoolConfig) -> int:
    """The head regresses the temporal output, or per-frame embeddings when
    the temporal stage is a scalar mean."""
    return temporal_cfg.fc_out if temporal_cfg.is_recurrent else spatial_cfg.fc_out


def init_score_head(in_dim: int, rng: np.random.Generator) -> FcParams:
    """Scoring head with its bias at the bottom of the 1..5 rating scale.

    Starting the scores positive keeps the ratio pools (harmonic, geometric)
    inside their operating region; with a zero bias an unlucky weight draw
    can leave every initial score below the positivity floor, where the
    clamp blocks all gradients and training never moves.
    """
    head = init_fc_params(in_dim, 1, rng)
    head.b.value[...] = 1.0
    return head


def init_model_params(d: int, spatial_cfg: SpatialPoolConfig,
                      temporal_cfg: TemporalPoolConfig, seed: int = 0,
                      with_pretrain_head: bool = True) -> ModelParams:
    """Fresh model. Spatial arrays depend only on (seed, d, spatial config),
    so two models sharing those agree on their spatial stage exactly."""
    spatial = init_spatial_params(d, spatial_cfg, np.random.default_rng([seed, 1]))
    temporal = init_temporal_params(spatial_cfg.fc_out, temporal_cfg,
                                    np.random.default_rng([seed, 2]))
    head = init_score_head(head_input_dim(spatial_cfg, temporal_cfg),
                           np.random.default_rng([seed, 3]))
    pretrain_head = None
    if with_pretrain_head:
        pretrain_head = init_score_head(spatial_cfg.fc_out,
                                        np.random.default_rng([seed, 4]))
    return ModelParams(d=d, spatial_cfg=spatial_cfg, temporal_cfg=temporal_cfg,
                       spatial=spatial, temporal=temporal, head=head,
                       pretrain_head=pretrain_head)


# ---------------------------------------------------------------------------
# forward passes


def _as_patch_nodes(frame, d: int, stage: str) -> list[Node]:
    if isinstance(frame, (list, tuple)):
        nodes = [as_node(x) for x in frame]
    else:
        arr = np.asarray(frame, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"{stage}: expected (N, d) per frame, got {arr.shape}")
        nodes = [as_node(row) for row in arr]
    if not nodes:
        raise ShapeError(f"{stage}: no patches")
    for node in nodes:
        if node.value.shape != (d,):
            raise ShapeError(f"{stage}: patch vector shape {node.value.shape} "
                             f"does not match feature dimension ({d},)")
    return nodes


def spatial_pool_forward(params: PoolParams, cfg: SpatialPoolConfig, d: int,
                         frame) -> Node:
    """One frame's N patch vectors -> one (fc_out,) frame embedding."""
    xs = _as_patch_nodes(frame, d, "spatial pooling")
    if cfg.kind == "concatenate":
        if len(xs) != cfg.n_patches:
            raise ShapeError(f"spatial pooling: concatenate was built for "
                             f"{cfg.n_patches} patches per frame, got {len(xs)}")
        return fc_forward(params.fc, ad.concat(xs))
    if cfg.kind == "mean":
        acc = xs[0]
        for x in xs[1:]:
            acc = ad.add(acc, x)
        return fc_forward(params.fc, ad.scale(acc, 1.0 / len(xs)))
    if cfg.kind == "lstm":
        hs1, _, _ = lstm_forward(params.rnn1, xs)
        _, h_last, _ = lstm_forward(params.rnn2, hs1)
        return fc_forward(params.fc, h_last)
    steps1, _ = bilstm_forward(params.rnn1, xs)
    _, final = bilstm_forward(params.rnn2, steps1)
    return fc_forward(params.fc, final)


def temporal_pool_forward(params: PoolParams, cfg: TemporalPoolConfig,
                          frame_embeds: list[Node]) -> Node:
    """T frame embeddings -> one (fc_out,) video embedding (recurrent kinds)."""
    if not cfg.is_recurrent:
        raise ConfigError(f"temporal pooling kind {cfg.kind!r} has no recurrent "
                          f"stage; it pools per-frame scores instead")
    if not frame_embeds:
        raise ShapeError("temporal pooling: no frames")
    if cfg.kind == "lstm":
        hs1, _, _ = lstm_forward(params.rnn1, frame_embeds)
        _, h_last, _ = lstm_forward(params.rnn2, hs1)
        return fc_forward(params.fc, h_last)
    steps1, _ = bilstm_forward(params.rnn1, frame_embeds)
    _, final = bilstm_forward(params.rnn2, steps1)
    return fc_forward(params.fc, final)


def pool_scores(scores: Node, kind: str) -> Node:
    """Collapse a (T,) vector of per-frame scores to one scalar node."""
    if kind == "mean":
        return ad.vmean(scores)
    if kind == "harmonic":
        safe = ad.clamp_min(scores, EPS_POS)
        return ad.reciprocal(ad.vmean(ad.reciprocal(safe)))
    if kind == "geometric":
        safe = ad.clamp_min(scores, EPS_POS)
        return ad.exp(ad.vmean(ad.log(safe)))
    raise ConfigError(f"unknown scalar pooling kind {kind!r}")


def video_forward(model: ModelParams, feats) -> Node:
    """Full pipeline on one video's (T, N, d) features. Returns a scalar node."""
    if isinstance(feats, FeatureTensor):
        feats = feats.data
    arr = np.asarray(feats, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"video_forward: expected (T, N, d) features, got {arr.shape}")
    if arr.shape[2] != model.d:
        raise ShapeError(f"video_forward: feature dimension {arr.shape[2]} does "
                         f"not match the model's ({model.d})")
    if arr.shape[0] < 1:
        raise ShapeError("video_forward: no frames")
    embeds = [spatial_pool_forward(model.spatial, model.spatial_cfg, model.d, frame)
              for frame in arr]
    if model.temporal_cfg.is_recurrent:
        pooled = temporal_pool_forward(model.temporal, model.temporal_cfg, embeds)
        return ad.vsum(fc_forward(model.head, pooled))
    scores = ad.concat([fc_forward(model.head, e) for e in embeds])
    return pool_scores(scores, model.temporal_cfg.kind)


def image_forward(spatial: PoolParams, cfg: SpatialPoolConfig, d: int,
                  head: FcParams, patch_feats) -> Node:
    """Image scorer used in pretraining: spatial stage plus its own head."""
    embed = spatial_pool_forward(spatial, cfg, d, patch_feats)
    return ad.vsum(fc_forward(head, embed))


def predict_video(model: ModelParams, feats) -> float:
    with no_grad():
        return float(video_forward(model, feats).value)


# ---------------------------------------------------------------------------
# parameter counting (closed forms, verified against the arrays in tests)


def spatial_param_count(d: int, cfg: SpatialPoolConfig) -> int:
    K = cfg.hidden
    if cfg.kind == "concatenate":
        return fc_param_count(cfg.n_patches * d, cfg.fc_out)
    if cfg.kind == "mean":
        return fc_param_count(d, cfg.fc_out)
    if cfg.kind == "lstm":
        return (lstm_param_count(d, K) + lstm_param_count(K, K)
                + fc_param_count(K, cfg.fc_out))
    return (bilstm_param_count(d, K) + bilstm_param_count(2 * K, K)
            + fc_param_count(2 * K, cfg.fc_out))


def temporal_param_count(in_dim: int, cfg: TemporalPoolConfig) -> int:
    K = cfg.hidden
    if not cfg.is_recurrent:
        return 0
    if cfg.kind == "lstm":
        return (lstm_param_count(in_dim, K) + lstm_param_count(K, K)
                + fc_param_count(K, cfg.fc_out))
    return (bilstm_param_count(in_dim, K) + bilstm_param_count(2 * K, K)
            + fc_param_count(2 * K, cfg.fc_out))


def pretrain_param_count(d: int, spatial_cfg: SpatialPoolConfig) -> int:
    """Image-quality model: spatial stage plus its scalar head."""
    return spatial_param_count(d, spatial_cfg) + fc_param_count(spatial_cfg.fc_out, 1)


def model_param_count(d: int, spatial_cfg: SpatialPoolConfig,
                      temporal_cfg: TemporalPoolConfig,
                      with_pretrain_head: bool = True) -> int:
    total = (spatial_param_count(d, spatial_cfg)
             + temporal_param_count(spatial_cfg.fc_out, temporal_cfg)
             + fc_param_count(head_input_dim(spatial_cfg, temporal_cfg), 1))
    if with_pretrain_head:
        total += fc_param_count(spatial_cfg.fc_out, 1)
    return total


def count_params(model: ModelParams) -> int:
    return sum(node.value.size for node in model.named_params().values())
