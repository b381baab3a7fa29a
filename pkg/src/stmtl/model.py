"""Spatio-temporal transformer for joint moving-object detection and segmentation.

Per-step backbone features are positionally encoded (grid + time step) and
concatenated along the feature axis into per-location temporal traces of
width T*d.  A transformer encoder self-attends over the trace map; a query
decoder cross-attends learnable queries against it.  Only the last frame's
block of each decoded query is kept, and in the shared-decoder ("late")
wiring the joint query matrix is split row-wise into detection and
segmentation groups before the task heads.

Four wirings are supported:
  det-only   one decoder with object queries, detection head
  seg-only   one decoder with class queries, segmentation head
  early      shared encoder, two task decoders, two heads
  late       shared encoder and decoder with joint queries, split, two heads
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import DecoderStack, EncoderStack
from .autodiff import Tensor
from .backbone import Backbone
from .config import TrainConfig
from .errors import ConfigError, ContractError, DimensionError
from .heads import CLASS_MOVING, DetectionHead, SegmentationHead
from .matching import softmax_probs
from .posenc import SpatialPE, TemporalPE, apply_pe, build_spatial_pe, build_temporal_pe


@dataclass
class FeatureTrace:
    """Per-location concatenation of T encoded feature steps, [HW, T*d]."""
    tensor: Tensor
    grid_h: int
    grid_w: int
    steps: int
    step_dim: int


def aggregate_traces(step_features: list[Tensor], spe: SpatialPE,
                     tpe: TemporalPE) -> FeatureTrace:
    """Encode each step with the grid table plus its time row, then concatenate."""
    if not step_features:
        raise ContractError("aggregate_traces needs at least one step")
    width = step_features[0].shape
    for f in step_features:
        if f.shape != width:
            raise DimensionError(f"step features disagree: {f.shape} vs {width}")
    if len(step_features) > tpe.steps:
        raise DimensionError(
            f"{len(step_features)} steps but temporal table has {tpe.steps} rows")
    encoded = [apply_pe(f, spe, tpe.table[t]) for t, f in enumerate(step_features)]
    return FeatureTrace(ad.concat_last_dim(encoded), spe.grid_h, spe.grid_w,
                        len(step_features), width[1])


def st_encode(encoder: EncoderStack, trace: FeatureTrace) -> Tensor:
    if trace.tensor.shape[1] != encoder.model_dim:
        raise ConfigError(
            f"encoder built for width {encoder.model_dim}, trace is {trace.tensor.shape[1]}")
    return encoder(trace.tensor)


def st_decode(decoder: DecoderStack, queries: Tensor, memory: Tensor
              ) -> tuple[Tensor, list[Tensor]]:
    if queries.shape[1] != memory.shape[1]:
        raise ConfigError(
            f"query width {queries.shape[1]} != memory width {memory.shape[1]}")
    if memory.shape[1] != decoder.model_dim:
        raise ConfigError(
            f"decoder built for width {decoder.model_dim}, memory is {memory.shape[1]}")
    return decoder(queries, memory)


def select_last_frame(decoded: Tensor, steps: int, step_dim: int) -> Tensor:
    """Keep the columns belonging to the most recent time step."""
    if decoded.shape[1] != steps * step_dim:
        raise ContractError(
            f"decoded width {decoded.shape[1]} is not steps*step_dim = {steps}*{step_dim}")
    return ad.slice_last_dim(decoded, (steps - 1) * step_dim, steps * step_dim)


def split_joint_queries(selected: Tensor, n_obj: int) -> tuple[Tensor, Tensor]:
    """Rows [0, n_obj) for detection, the rest for segmentation classes."""
    n_rows = selected.shape[0]
    if n_obj > n_rows:
        raise ContractError(f"cannot split {n_obj} object rows from {n_rows} total")
    return ad.slice_rows(selected, 0, n_obj), ad.slice_rows(selected, n_obj, n_rows)


@dataclass
class ModelOutput:
    class_logits: Tensor | None = None       # [N_o, 2]
    boxes: Tensor | None = None              # [N_o, 4]
    mask_logits: Tensor | None = None        # [N_c, H1, W1]
    det_attention: list[Tensor] | None = None  # per head, [N_o, HW]
    seg_attention: list[Tensor] | None = None  # per head, [N_c, HW]

    def require_detection(self):
        if self.class_logits is None:
            raise ContractError("this model mode has no detection head")
        return self.class_logits, self.boxes

    def require_segmentation(self):
        if self.mask_logits is None:
            raise ContractError("this model mode has no segmentation head")
        return self.mask_logits


def mean_attention(weights: list[Tensor]) -> np.ndarray:
    """Head-averaged attention map as a plain array (for export)."""
    return np.mean([w.data for w in weights], axis=0)


class STMTL:
    """The full model; parameters are plain Tensors drawn in a fixed order."""

    def __init__(self, cfg: TrainConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dm = cfg.model_dim
        ff = cfg.feed_forward_dim

        self.backbone = Backbone(rng, cfg.image_h, cfg.image_w, cfg.feat_dim)
        if self.backbone.grid_h != cfg.grid_h or self.backbone.grid_w != cfg.grid_w:
            raise ConfigError(
                f"backbone grid {self.backbone.grid_h}x{self.backbone.grid_w} "
                f"differs from configured {cfg.grid_h}x{cfg.grid_w}")
        self.spe = build_spatial_pe(cfg.grid_h, cfg.grid_w, cfg.feat_dim)
        self.tpe = build_temporal_pe(cfg.frames, cfg.feat_dim)
        self.encoder = EncoderStack(rng, cfg.enc_layers, dm, cfg.heads, ff)

        qsa = cfg.decoder_query_self_attention
        self.decoder = None
        self.det_decoder = None
        self.seg_decoder = None
        self.queries = None
        self.det_queries = None
        self.seg_queries = None
        if cfg.mode == "late":
            self.decoder = DecoderStack(rng, cfg.dec_layers, dm, cfg.heads, ff, qsa)
            n_q = cfg.n_obj_queries + cfg.n_class_queries
            self.queries = ad.uniform_init(rng, (n_q, dm), dm)
        elif cfg.mode == "early":
            self.det_decoder = DecoderStack(rng, cfg.dec_layers, dm, cfg.heads, ff, qsa)
            self.seg_decoder = DecoderStack(rng, cfg.dec_layers, dm, cfg.heads, ff, qsa)
            self.det_queries = ad.uniform_init(rng, (cfg.n_obj_queries, dm), dm)
            self.seg_queries = ad.uniform_init(rng, (cfg.n_class_queries, dm), dm)
        elif cfg.mode == "det-only":
            self.det_decoder = DecoderStack(rng, cfg.dec_layers, dm, cfg.heads, ff, qsa)
            self.det_queries = ad.uniform_init(rng, (cfg.n_obj_queries, dm), dm)
        else:  # seg-only
            self.seg_decoder = DecoderStack(rng, cfg.dec_layers, dm, cfg.heads, ff, qsa)
            self.seg_queries = ad.uniform_init(rng, (cfg.n_class_queries, dm), dm)

        self.det_head = DetectionHead(rng, cfg.feat_dim) if cfg.has_detection else None
        self.seg_head = (SegmentationHead(rng, cfg.n_class_queries, cfg.grid_h,
                                          cfg.grid_w, cfg.image_h, cfg.image_w)
                         if cfg.has_segmentation else None)

    # ---- parameters -----------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params: list[tuple[str, Tensor]] = list(self.backbone.named_parameters("backbone"))
        params += list(self.encoder.named_parameters("encoder"))
        if self.decoder is not None:
            params += list(self.decoder.named_parameters("decoder"))
            params.append(("queries.joint", self.queries))
        if self.det_decoder is not None:
            params += list(self.det_decoder.named_parameters("decoder.det"))
            params.append(("queries.det", self.det_queries))
        if self.seg_decoder is not None:
            params += list(self.seg_decoder.named_parameters("decoder.seg"))
            params.append(("queries.seg", self.seg_queries))
        if self.det_head is not None:
            params += list(self.det_head.named_parameters("head.det"))
        if self.seg_head is not None:
            params += list(self.seg_head.named_parameters("head.seg"))
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]):
        from .errors import CheckpointMismatch
        own = self.named_parameters()
        own_names = [n for n, _ in own]
        for name, tensor in own:
            if name not in state:
                raise CheckpointMismatch(f"checkpoint is missing parameter {name!r}")
            value = state[name]
            if tuple(value.shape) != tensor.shape:
                raise CheckpointMismatch(
                    f"parameter {name!r}: checkpoint shape {tuple(value.shape)} "
                    f"!= model shape {tensor.shape}")
            tensor.data[...] = value
        extra = set(state) - set(own_names)
        if extra:
            raise CheckpointMismatch(f"checkpoint has unexpected parameter {sorted(extra)[0]!r}")

    def clone(self) -> "STMTL":
        twin = STMTL(self.cfg)
        twin.load_state(self.state_dict())
        return twin

    # ---- forward ----------------------------------------------------------

    def encode_steps(self, frames: list[np.ndarray], flows: list[np.ndarray]) -> Tensor:
        """Backbone + positional encodings + trace aggregation + encoder."""
        if len(frames) != self.cfg.frames or len(flows) != self.cfg.frames:
            raise ContractError(
                f"model expects {self.cfg.frames} frames with aligned flows, "
                f"got {len(frames)} and {len(flows)}")
        feats = [self.backbone(ad.constant(f), ad.constant(fl))
                 for f, fl in zip(frames, flows)]
        trace = aggregate_traces(feats, self.spe, self.tpe)
        return st_encode(self.encoder, trace)

    def forward(self, frames: list[np.ndarray], flows: list[np.ndarray]) -> ModelOutput:
        cfg = self.cfg
        memory = self.encode_steps(frames, flows)
        out = ModelOutput()
        if cfg.mode == "late":
            decoded, weights = st_decode(self.decoder, self.queries, memory)
            selected = select_last_frame(decoded, cfg.frames, cfg.feat_dim)
            det_feats, seg_feats = split_joint_queries(selected, cfg.n_obj_queries)
            out.class_logits, out.boxes = self.det_head(det_feats)
            out.mask_logits = self.seg_head(seg_feats)
            out.det_attention = [ad.slice_rows(w, 0, cfg.n_obj_queries) for w in weights]
            out.seg_attention = [ad.slice_rows(w, cfg.n_obj_queries, w.shape[0])
                                 for w in weights]
            return out
        if self.det_decoder is not None:
            decoded, weights = st_decode(self.det_decoder, self.det_queries, memory)
            selected = select_last_frame(decoded, cfg.frames, cfg.feat_dim)
            out.class_logits, out.boxes = self.det_head(selected)
            out.det_attention = weights
        if self.seg_decoder is not None:
            decoded, weights = st_decode(self.seg_decoder, self.seg_queries, memory)
            selected = select_last_frame(decoded, cfg.frames, cfg.feat_dim)
            out.mask_logits = self.seg_head(selected)
            out.seg_attention = weights
        return out

    def predict(self, frames: list[np.ndarray], flows: list[np.ndarray]) -> dict:
        """Detached numpy outputs for evaluation and export."""
        out = self.forward(frames, flows)
        result: dict = {}
        if out.class_logits is not None:
            probs = softmax_probs(out.class_logits.data)
            result["boxes"] = out.boxes.data.copy()
            result["scores"] = probs[:, CLASS_MOVING].copy()
            result["det_attention"] = mean_attention(out.det_attention)
        if out.mask_logits is not None:
            result["mask"] = out.mask_logits.data.argmax(axis=0).astype(np.uint8)
            result["mask_logits"] = out.mask_logits.data.copy()
            result["seg_attention"] = mean_attention(out.seg_attention)
        return result
