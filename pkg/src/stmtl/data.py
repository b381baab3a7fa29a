"""Synthetic moving-shapes clips with exact boxes, motion masks and flow.

Each sample is T frames of hard-edged rectangles/circles on a noisy flat
background.  Movers translate with constant integer pixel velocity; static
distractors are rendered from the same shape kind and color as a mover, so
a single frame cannot tell them apart and the motion cue is load-bearing.
Ground truth is exact by construction: boxes are the tight bounds of each
mover's pixels in the last frame, the mask marks mover pixels, and the
flow map stores every mover pixel's displacement to the next frame.

On-disk layout (one directory per sample, listed by manifest.json):
  frame_<t>.ppm   binary P6, 8-bit RGB
  flow_<t>.flo2   "FLO2" magic, u32 height, u32 width, then h*w*2
                  little-endian f32 (dx, dy) pairs, row-major
  mask.pgm        binary P5; 0 = background, 255 = moving
  labels.json     {"boxes": [[cx,cy,w,h], ...], "class": ["moving", ...]}
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, GenerationError, ParseError

MASK_BACKGROUND = 0
MASK_MOVING = 1

PLACEMENT_RETRIES = 100


@dataclass(frozen=True)
class SceneSpec:
    """Knobs for one dataset; per-sample variation comes from the seed."""
    image_h: int = 64
    image_w: int = 64
    frames: int = 2
    movers_min: int = 1
    movers_max: int = 2
    static_min: int = 1
    static_max: int = 1
    shape_kinds: tuple[str, ...] = ("rectangle", "circle")
    vel_min: int = 1
    vel_max: int = 3
    size_min: int = 5       # half-extent in pixels
    size_max: int = 11
    noise: float = 0.02
    seed: int = 0

    def to_dict(self) -> dict:
        return {"image_h": self.image_h, "image_w": self.image_w,
                "frames": self.frames, "movers_min": self.movers_min,
                "movers_max": self.movers_max, "static_min": self.static_min,
                "static_max": self.static_max, "shape_kinds": list(self.shape_kinds),
                "vel_min": self.vel_min, "vel_max": self.vel_max,
                "size_min": self.size_min, "size_max": self.size_max,
                "noise": self.noise, "seed": self.seed}

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        d = dict(d)
        d["shape_kinds"] = tuple(d.get("shape_kinds", ("rectangle", "circle")))
        return SceneSpec(**d)


@dataclass
class VideoSample:
    sample_id: str
    frames: np.ndarray       # [T, 3, H, W] floats in [0, 1]
    flows: np.ndarray        # [T-1, 2, H, W] pixel displacements (dx, dy)
    boxes: np.ndarray        # [M, 4] normalized cxcywh for movers, last frame
    mask: np.ndarray         # [H, W] uint8 in {0, 1}
    classes: list = field(default_factory=list)


@dataclass
class _Shape:
    kind: str
    color: np.ndarray
    half_w: int
    half_h: int       # circles use half_w as radius
    cx0: int
    cy0: int
    vx: int
    vy: int

    def center(self, t: int) -> tuple[int, int]:
        return self.cx0 + self.vx * t, self.cy0 + self.vy * t

    def pixel_mask(self, t: int, h: int, w: int) -> np.ndarray:
        cx, cy = self.center(t)
        out = np.zeros((h, w), dtype=bool)
        if self.kind == "rectangle":
            out[max(0, cy - self.half_h):cy + self.half_h + 1,
                max(0, cx - self.half_w):cx + self.half_w + 1] = True
        else:
            yy, xx = np.mgrid[0:h, 0:w]
            out = (xx - cx) ** 2 + (yy - cy) ** 2 <= self.half_w ** 2
        return out

    def bounds_over_clip(self, frames: int) -> tuple[int, int, int, int]:
        xs = [self.cx0, self.cx0 + self.vx * (frames - 1)]
        ys = [self.cy0, self.cy0 + self.vy * (frames - 1)]
        return (min(xs) - self.half_w, min(ys) - self.half_h,
                max(xs) + self.half_w, max(ys) + self.half_h)


def _boxes_disjoint(a, b, gap: int = 2) -> bool:
    return (a[2] + gap < b[0] or b[2] + gap < a[0]
            or a[3] + gap < b[1] or b[3] + gap < a[1])


def _place_shapes(spec: SceneSpec, rng: np.random.Generator,
                  n_movers: int, n_static: int) -> list[_Shape]:
    """Sample shapes whose clip-wide bounds fit the frame and never overlap."""
    for _ in range(PLACEMENT_RETRIES):
        shapes: list[_Shape] = []
        ok = True
        for idx in range(n_movers + n_static):
            is_mover = idx < n_movers
            if is_mover or not shapes:
                kind = spec.shape_kinds[rng.integers(len(spec.shape_kinds))]
                color = rng.uniform(0.45, 0.95, size=3)
            else:
                # distractors clone a mover's appearance so per-frame looks
                # cannot separate moving from static
                pool = n_movers if n_movers > 0 else len(shapes)
                donor = shapes[int(rng.integers(pool))]
                kind, color = donor.kind, donor.color.copy()
            half_w = int(rng.integers(spec.size_min, spec.size_max + 1))
            half_h = half_w if kind == "circle" else \
                int(rng.integers(spec.size_min, spec.size_max + 1))
            if is_mover:
                while True:
                    vx, vy = int(rng.integers(-spec.vel_max, spec.vel_max + 1)), \
                             int(rng.integers(-spec.vel_max, spec.vel_max + 1))
                    if max(abs(vx), abs(vy)) >= spec.vel_min:
                        break
            else:
                vx = vy = 0
            span_x = half_w + abs(vx) * (spec.frames - 1) + 1
            span_y = half_h + abs(vy) * (spec.frames - 1) + 1
            if 2 * span_x + 2 >= spec.image_w or 2 * span_y + 2 >= spec.image_h:
                ok = False
                break
            cx0 = int(rng.integers(span_x, spec.image_w - span_x))
            cy0 = int(rng.integers(span_y, spec.image_h - span_y))
            cand = _Shape(kind, color, half_w, half_h, cx0, cy0, vx, vy)
            bounds = cand.bounds_over_clip(spec.frames)
            if any(not _boxes_disjoint(bounds, s.bounds_over_clip(spec.frames))
                   for s in shapes):
                ok = False
                break
            shapes.append(cand)
        if ok:
            return shapes
    raise GenerationError(
        f"could not place {n_movers} movers and {n_static} distractors in "
        f"{spec.image_w}x{spec.image_h} after {PLACEMENT_RETRIES} attempts")


def generate_sample(spec: SceneSpec, index: int) -> VideoSample:
    """Deterministic for a given (spec.seed, index) pair."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    n_movers = int(rng.integers(spec.movers_min, spec.movers_max + 1))
    n_static = int(rng.integers(spec.static_min, spec.static_max + 1))
    background = float(rng.uniform(0.08, 0.25))
    shapes = _place_shapes(spec, rng, n_movers, n_static)

    h, w, t_total = spec.image_h, spec.image_w, spec.frames
    frames = np.full((t_total, 3, h, w), background)
    owner = np.full((t_total, h, w), -1, dtype=np.int64)
    for t in range(t_total):
        for idx, shape in enumerate(shapes):
            pix = shape.pixel_mask(t, h, w)
            frames[t, :, pix] = shape.color
            owner[t][pix] = idx

    flows = np.zeros((max(0, t_total - 1), 2, h, w))
    for t in range(t_total - 1):
        for idx in range(n_movers):
            pix = owner[t] == idx
            flows[t, 0][pix] = shapes[idx].vx
            flows[t, 1][pix] = shapes[idx].vy

    mask = (owner[t_total - 1] < n_movers) & (owner[t_total - 1] >= 0)
    boxes = []
    for idx in range(n_movers):
        ys, xs = np.nonzero(owner[t_total - 1] == idx)
        x0, x1, y0, y1 = xs.min(), xs.max(), ys.min(), ys.max()
        boxes.append([(x0 + x1 + 1) / (2 * w), (y0 + y1 + 1) / (2 * h),
                      (x1 - x0 + 1) / w, (y1 - y0 + 1) / h])

    if spec.noise > 0:
        frames += rng.uniform(-spec.noise, spec.noise, size=frames.shape)
        np.clip(frames, 0.0, 1.0, out=frames)

    sample = VideoSample(sample_id=f"s{index:04d}", frames=frames, flows=flows,
                         boxes=np.array(boxes).reshape(-1, 4),
                         mask=mask.astype(np.uint8),
                         classes=["moving"] * n_movers)
    _check_invariants(sample, shapes, owner, flows, n_movers, n_static)
    return sample


def _check_invariants(sample: VideoSample, shapes, owner, flows,
                      n_movers: int, n_static: int):
    h, w = sample.mask.shape
    # every mask pixel lies inside some stored box
    if sample.boxes.size:
        ys, xs = np.nonzero(sample.mask)
        x0 = (sample.boxes[:, 0] - sample.boxes[:, 2] / 2) * w
        x1 = (sample.boxes[:, 0] + sample.boxes[:, 2] / 2) * w
        y0 = (sample.boxes[:, 1] - sample.boxes[:, 3] / 2) * h
        y1 = (sample.boxes[:, 1] + sample.boxes[:, 3] / 2) * h
        inside = ((xs[:, None] + 0.5 >= x0) & (xs[:, None] + 0.5 <= x1)
                  & (ys[:, None] + 0.5 >= y0) & (ys[:, None] + 0.5 <= y1))
        assert inside.any(axis=1).all(), "mask pixel outside every box"
    # flow support equals the mover-owned pixels on every non-final frame
    for t in range(flows.shape[0]):
        moving = (flows[t] != 0).any(axis=0)
        owned = (owner[t] >= 0) & (owner[t] < n_movers)
        assert (moving == owned).all(), "flow support disagrees with mover pixels"
    if n_static > 0 and n_movers > 0:
        donors = {(shapes[i].kind, tuple(shapes[i].color)) for i in range(n_movers)}
        clones = {(s.kind, tuple(s.color)) for s in shapes[n_movers:]}
        assert donors & clones, "no distractor shares a mover's appearance"


# ---------------------------------------------------------------------------
# binary image / flow formats


def write_ppm(path, image: np.ndarray):
    """image: [3, H, W] floats in [0,1], quantized to 8 bits."""
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[1], arr.shape[2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.transpose(1, 2, 0).tobytes())


def write_pgm(path, gray: np.ndarray):
    arr = np.asarray(gray, dtype=np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def _read_pnm_header(raw: bytes, path, magic: bytes):
    if raw[:2] != magic:
        raise ParseError(path, 0, f"expected magic {magic.decode()}")
    fields, pos = [], 2
    while len(fields) < 3:
        if pos >= len(raw):
            raise ParseError(path, pos, "truncated header")
        ch = raw[pos:pos + 1]
        if ch == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace():
                pos += 1
            token = raw[start:pos]
            if not token.isdigit():
                raise ParseError(path, start, f"bad header token {token!r}")
            fields.append(int(token))
    return fields[0], fields[1], fields[2], pos + 1  # skip single whitespace


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h, maxval, offset = _read_pnm_header(raw, path, b"P6")
    expected = offset + h * w * 3
    if len(raw) < expected:
        raise ParseError(path, len(raw), f"expected {expected} bytes, found {len(raw)}")
    arr = np.frombuffer(raw[offset:expected], dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / maxval


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h, _, offset = _read_pnm_header(raw, path, b"P5")
    expected = offset + h * w
    if len(raw) < expected:
        raise ParseError(path, len(raw), f"expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw[offset:expected], dtype=np.uint8).reshape(h, w)


FLOW_MAGIC = b"FLO2"


def write_flow(path, flow: np.ndarray):
    """flow: [2, H, W] (dx, dy); stored as row-major interleaved f32 pairs."""
    h, w = flow.shape[1], flow.shape[2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", FLOW_MAGIC, h, w))
        fh.write(flow.transpose(1, 2, 0).astype("<f4").tobytes())


def read_flow(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise ParseError(path, len(raw), "expected at least 12 header bytes")
    magic, h, w = struct.unpack("<4sII", raw[:12])
    if magic != FLOW_MAGIC:
        raise ParseError(path, 0, f"expected magic {FLOW_MAGIC.decode()}")
    expected = 12 + h * w * 2 * 4
    if len(raw) != expected:
        raise ParseError(path, len(raw), f"expected {expected} bytes, found {len(raw)}")
    arr = np.frombuffer(raw[12:], dtype="<f4").reshape(h, w, 2)
    return arr.transpose(2, 0, 1).astype(np.float64)


# ---------------------------------------------------------------------------
# dataset directory


def write_dataset(samples: list[VideoSample], root, spec: SceneSpec | None = None):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ids = []
    for sample in samples:
        sdir = root / sample.sample_id
        sdir.mkdir(exist_ok=True)
        for t in range(sample.frames.shape[0]):
            write_ppm(sdir / f"frame_{t}.ppm", sample.frames[t])
        for t in range(sample.flows.shape[0]):
            write_flow(sdir / f"flow_{t}.flo2", sample.flows[t])
        write_pgm(sdir / "mask.pgm", sample.mask * 255)
        with open(sdir / "labels.json", "w", encoding="utf-8") as fh:
            json.dump({"boxes": sample.boxes.tolist(), "class": list(sample.classes)},
                      fh)
        ids.append(sample.sample_id)
    manifest = {"version": 1, "num": len(ids), "samples": ids}
    if spec is not None:
        manifest["spec"] = spec.to_dict()
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DataError(f"no manifest.json in {root}")
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("num") != len(manifest.get("samples", [])):
        raise DataError(f"{path}: manifest count disagrees with its sample list")
    return manifest


def read_sample(root, sample_id: str) -> VideoSample:
    sdir = Path(root) / sample_id
    frames = []
    t = 0
    while (sdir / f"frame_{t}.ppm").exists():
        frames.append(read_ppm(sdir / f"frame_{t}.ppm"))
        t += 1
    if not frames:
        raise DataError(f"{sdir}: no frames found")
    flows = [read_flow(sdir / f"flow_{k}.flo2") for k in range(t - 1)]
    mask = (read_pgm(sdir / "mask.pgm") > 127).astype(np.uint8)
    with open(sdir / "labels.json", "r", encoding="utf-8") as fh:
        labels = json.load(fh)
    return VideoSample(sample_id=sample_id, frames=np.stack(frames),
                       flows=np.stack(flows) if flows else np.zeros((0, 2) + mask.shape),
                       boxes=np.asarray(labels["boxes"], dtype=np.float64).reshape(-1, 4),
                       mask=mask, classes=list(labels["class"]))


def read_dataset(root) -> list[VideoSample]:
    manifest = read_manifest(root)
    return [read_sample(root, sid) for sid in manifest["samples"]]


def generate_dataset(spec: SceneSpec, num: int) -> list[VideoSample]:
    return [generate_sample(spec, i) for i in range(num)]
