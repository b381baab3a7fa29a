"""Training loop: Adam with warm-up then exponential decay, deterministic replay.

The learning rate ramps linearly across the warm epochs (reaching the warm
end value on the last of them), then decays geometrically from the decay
start value to the decay end value over the remaining epochs; the drop at
the warm/decay boundary is intentional and mirrors the configured
endpoints.  Gradients are accumulated per sample in a fixed order, so runs
are bit-reproducible for any worker count (ST_MTL_THREADS).
"""

from __future__ import annotations

import json
import math
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attention, autodiff as ad
from .config import TrainConfig
from .data import VideoSample, read_dataset
from .errors import ConfigError, ContractError, DataError, NumericError, ParseError
from .matching import LossWeights, match_and_loss, segmentation_loss, mtl_loss
from .metrics import EvalRecord, dataset_seg_iou, detection_metrics
from .model import STMTL

CHECKPOINT_MAGIC = b"STMT"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# learning-rate schedule


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up over the first warm_epochs, then geometric decay.

    Endpoints are exact: epoch 0 gives lr_warm_start, the last warm epoch
    gives lr_warm_end, and the final epoch gives lr_decay_end.
    """
    if epoch < 0 or epoch >= max(1, cfg.epochs):
        raise ContractError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warm_epochs:
        if cfg.warm_epochs == 1:
            return cfg.lr_warm_start
        frac = epoch / (cfg.warm_epochs - 1)
        return cfg.lr_warm_start + (cfg.lr_warm_end - cfg.lr_warm_start) * frac
    span = cfg.epochs - 1 - cfg.warm_epochs
    if span <= 0:
        return cfg.lr_decay_end if epoch == cfg.epochs - 1 and span == 0 else cfg.lr_decay_start
    frac = (epoch - cfg.warm_epochs) / span
    if frac <= 0.0:
        return cfg.lr_decay_start
    if frac >= 1.0:
        return cfg.lr_decay_end
    return math.exp(math.log(cfg.lr_decay_start)
                    + frac * (math.log(cfg.lr_decay_end) - math.log(cfg.lr_decay_start)))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @staticmethod
    def for_params(named_params) -> "AdamState":
        state = AdamState()
        for name, p in named_params:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(state: AdamState, named_params, lr: float):
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in named_params:
        g = p.grad
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_global_norm(named_params, max_norm: float) -> float:
    total = 0.0
    for _, p in named_params:
        total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, p in named_params:
            p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# sample preparation and per-sample loss


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def _filter3(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    padded = np.pad(image, 1)
    out = np.zeros_like(image)
    for u in range(3):
        for v in range(3):
            out += kernel[u, v] * padded[u:u + image.shape[0], v:v + image.shape[1]]
    return out


def prepare_inputs(sample: VideoSample, cfg: TrainConfig
                   ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Last cfg.frames frames plus one flow map per step.

    Flow stored at step t describes motion t -> t+1; the final step has no
    successor and is padded with zeros.  Modes: "gt" ground-truth flow,
    "diff" sobel gradients of the temporal difference, "zero" all zeros.
    """
    t_total = sample.frames.shape[0]
    if cfg.frames > t_total:
        raise DataError(f"model wants {cfg.frames} frames, sample has {t_total}")
    first = t_total - cfg.frames
    frames = [sample.frames[k] for k in range(first, t_total)]
    flows = []
    zero = np.zeros((2,) + sample.mask.shape)
    for k in range(first, t_total):
        if cfg.flow == "zero" or k == t_total - 1:
            flows.append(zero)
        elif cfg.flow == "gt":
            flows.append(sample.flows[k])
        else:  # diff
            diff = sample.frames[k + 1].mean(axis=0) - sample.frames[k].mean(axis=0)
            flows.append(np.stack([_filter3(diff, _SOBEL_X), _filter3(diff, _SOBEL_Y)]))
    return frames, flows


def loss_weights(cfg: TrainConfig) -> LossWeights:
    return LossWeights(cfg.lambda_class, cfg.lambda_l1, cfg.lambda_giou, cfg.noobj_weight)


def sample_loss(model: STMTL, sample: VideoSample, cfg: TrainConfig) -> ad.Tensor:
    frames, flows = prepare_inputs(sample, cfg)
    out = model.forward(frames, flows)
    det = seg = None
    if cfg.has_detection:
        det, _ = match_and_loss(out.class_logits, out.boxes, sample.boxes,
                                loss_weights(cfg))
    if cfg.has_segmentation:
        seg = segmentation_loss(out.mask_logits, sample.mask)
    return mtl_loss(det, seg, cfg.w_det, cfg.w_seg)


def _batch_step(model: STMTL, batch: list[VideoSample], cfg: TrainConfig,
                n_threads: int) -> float:
    """Accumulate mean-of-batch gradients into the model; returns the batch loss.

    Per-sample gradients are reduced in sample order whatever the worker
    count, so results are bit-identical for any ST_MTL_THREADS.
    """
    params = model.named_parameters()
    scale = 1.0 / len(batch)
    acc = {name: np.zeros_like(p.data) for name, p in params}
    total = 0.0
    if n_threads <= 1:
        for sample in batch:
            for _, p in params:
                p.zero_grad()
            scaled = ad.mul(sample_loss(model, sample, cfg), ad.constant(scale))
            total += scaled.item()
            scaled.backward()
            for name, p in params:
                acc[name] += p.grad
    else:
        def run_one(sample: VideoSample):
            twin = model.clone()
            scaled = ad.mul(sample_loss(twin, sample, cfg), ad.constant(scale))
            value = scaled.item()
            scaled.backward()
            return value, {name: p.grad for name, p in twin.named_parameters()}

        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(run_one, batch))
        for value, grads in results:
            total += value
            for name in acc:
                acc[name] += grads[name]
    for name, p in params:
        p.grad[...] = acc[name]
    return total


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: STMTL, samples: list[VideoSample], cfg: TrainConfig) -> dict:
    records = []
    mask_pairs = []
    for sample in samples:
        frames, flows = prepare_inputs(sample, cfg)
        pred = model.predict(frames, flows)
        if "boxes" in pred:
            records.append(EvalRecord(pred["boxes"], pred["scores"], sample.boxes))
        if "mask" in pred:
            mask_pairs.append((pred["mask"], sample.mask))
    out: dict = {}
    if records:
        out.update(detection_metrics(records))
    else:
        out["map_total"] = out["ap50"] = out["ap75"] = None
    out["seg_iou"] = dataset_seg_iou(mask_pairs) if mask_pairs else None
    out["score"] = sum(v for v in (out.get("map_total"), out.get("seg_iou"))
                       if v is not None)
    return out


# ---------------------------------------------------------------------------
# checkpoint format: "STMT", u32 version, length-prefixed JSON meta,
# length-prefixed (name, shape, float64 data) records, optional Adam state


def save_checkpoint(path, model_state: dict, opt: AdamState | None, meta: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(model_state)))
        for name, arr in model_state.items():
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())
        if opt is None:
            fh.write(struct.pack("<I", 0))
        else:
            fh.write(struct.pack("<I", 1))
            fh.write(struct.pack("<Q", opt.step))
            for name in model_state:
                fh.write(opt.m[name].astype("<f8").tobytes())
                fh.write(opt.v[name].astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, AdamState | None, dict]:
    path = Path(path)
    raw = path.read_bytes()
    pos = 0

    def take(n: int, why: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise ParseError(path, pos, f"truncated checkpoint while reading {why}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    magic, version = struct.unpack("<4sI", take(8, "header"))
    if magic != CHECKPOINT_MAGIC:
        raise ParseError(path, 0, f"expected magic {CHECKPOINT_MAGIC.decode()}")
    if version != CHECKPOINT_VERSION:
        raise ParseError(path, 4, f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", take(4, "meta length"))
    meta = json.loads(take(meta_len, "meta"))
    (n_params,) = struct.unpack("<I", take(4, "parameter count"))
    state: dict = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode()
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * count, f"data of {name}"), dtype="<f8")
        state[name] = data.reshape(shape).copy()
    (has_opt,) = struct.unpack("<I", take(4, "optimizer flag"))
    opt = None
    if has_opt:
        (step,) = struct.unpack("<Q", take(8, "optimizer step"))
        opt = AdamState(step=step)
        for name, arr in state.items():
            opt.m[name] = np.frombuffer(take(8 * arr.size, f"m of {name}"),
                                        dtype="<f8").reshape(arr.shape).copy()
            opt.v[name] = np.frombuffer(take(8 * arr.size, f"v of {name}"),
                                        dtype="<f8").reshape(arr.shape).copy()
    return state, opt, meta


def load_model(path) -> tuple[STMTL, TrainConfig, dict]:
    state, _, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    model = STMTL(cfg)
    model.load_state(state)
    return model, cfg, meta


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    history: list
    last_path: str
    best_path: str
    steps: int
    stopped_early: bool
    model: STMTL


def _targets_met(metrics: dict, cfg: TrainConfig) -> bool:
    checks = []
    if cfg.early_stop_ap50 > 0:
        checks.append((metrics.get("ap50") or 0.0) >= cfg.early_stop_ap50)
    if cfg.early_stop_seg_iou > 0:
        checks.append((metrics.get("seg_iou") or 0.0) >= cfg.early_stop_seg_iou)
    return bool(checks) and all(checks)


def train(cfg: TrainConfig, resume: str | None = None,
          max_steps: int = 0, quiet: bool = False) -> TrainResult:
    cfg.validate()
    if not cfg.dataset:
        raise ConfigError("config key 'dataset' is required for training")
    samples = read_dataset(cfg.dataset)
    if not samples:
        raise DataError(f"dataset {cfg.dataset} is empty")
    val_samples = read_dataset(cfg.val_dataset) if cfg.val_dataset else samples

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    last_path = out_dir / "last.ckpt"
    best_path = out_dir / "best.ckpt"
    metrics_path = out_dir / "metrics.jsonl"
    n_threads = max(1, int(os.environ.get("ST_MTL_THREADS", "1")))

    model = STMTL(cfg)
    adam = AdamState.for_params(model.named_parameters())
    shuffler = np.random.default_rng(np.random.SeedSequence([cfg.seed, 9001]))
    start_epoch, best_score, steps = 0, -math.inf, 0

    if resume:
        state, opt, meta = load_checkpoint(resume)
        model.load_state(state)
        if opt is not None:
            adam = opt
        start_epoch = meta.get("epoch", 0)
        best_score = meta.get("best_score", -math.inf)
        steps = meta.get("steps", 0)
        if meta.get("rng_state"):
            bg = np.random.PCG64()
            bg.state = meta["rng_state"]
            shuffler = np.random.Generator(bg)

    def meta_now(epoch: int) -> dict:
        # out_dir is where the run writes, not part of the model's identity;
        # dropping it keeps equal runs byte-identical across directories
        conf = cfg.to_dict()
        conf.pop("out_dir")
        return {"config": conf, "epoch": epoch, "best_score": best_score,
                "steps": steps, "rng_state": shuffler.bit_generator.state}

    history: list[dict] = []
    stopped = False
    log = open(metrics_path, "a" if resume else "w", encoding="utf-8")
    try:
        if cfg.epochs == 0 or start_epoch >= cfg.epochs:
            save_checkpoint(last_path, model.state_dict(), adam, meta_now(start_epoch))
            return TrainResult(history, str(last_path), str(best_path), steps, False, model)

        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_schedule(epoch, cfg)
            order = shuffler.permutation(len(samples))
            epoch_loss, n_batches = 0.0, 0
            t0 = time.monotonic()
            for lo in range(0, len(order), cfg.batch_size):
                batch = [samples[i] for i in order[lo:lo + cfg.batch_size]]
                loss_value = _batch_step(model, batch, cfg, n_threads)
                if not math.isfinite(loss_value):
                    raise NumericError(f"non-finite loss at optimizer step {steps + 1}")
                clip_global_norm(model.named_parameters(), cfg.clip_norm)
                adam_step(adam, model.named_parameters(), lr)
                epoch_loss += loss_value
                n_batches += 1
                steps += 1
                if max_steps and steps >= max_steps:
                    break
            line = {"epoch": epoch, "lr": lr, "train_loss": epoch_loss / max(1, n_batches),
                    "steps": steps}

            budget_done = bool(max_steps and steps >= max_steps)
            at_eval = ((epoch + 1) % max(1, cfg.eval_every) == 0
                       or epoch == cfg.epochs - 1 or budget_done)
            if at_eval:
                line.update(evaluate(model, val_samples, cfg))
                if line["score"] > best_score:
                    best_score = line["score"]
                    save_checkpoint(best_path, model.state_dict(), None, meta_now(epoch + 1))
                save_checkpoint(last_path, model.state_dict(), adam, meta_now(epoch + 1))
                if _targets_met(line, cfg):
                    stopped = True
            history.append(line)
            log.write(json.dumps(line, sort_keys=True) + "\n")
            log.flush()
            if not quiet:
                print(f"epoch {epoch}: loss={line['train_loss']:.4f} lr={lr:.2e} "
                      f"steps={steps} ({time.monotonic() - t0:.1f}s)"
                      + (f" score={line.get('score'):.4f}" if at_eval else ""))
            if stopped or budget_done:
                break

        save_checkpoint(last_path, model.state_dict(), adam,
                        meta_now(history[-1]["epoch"] + 1 if history else start_epoch))
        if not best_path.exists():
            save_checkpoint(best_path, model.state_dict(), None,
                            meta_now(history[-1]["epoch"] + 1 if history else start_epoch))
    finally:
        log.close()
    return TrainResult(history, str(last_path), str(best_path), steps, stopped, model)
