"""Synthetic moving-object clips with analytic motion, the x4 bicubic
degradation, the two training protocols and the on-disk corpus format.

Continuous image coordinates put the centre of pixel ``i`` at ``i + 0.5``;
an object centred at ``p`` in HR pixels sits at ``p / scale`` in LR pixels.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from tmnet.tensor import ConfigError
from tmnet.video_ops import resize_bicubic

SHAPES = ("gaussian_blob", "rectangle")
BORDER_PX = 2.0
BLOB_EXTENT_SIGMAS = 3.0
OBJECT_GAP_PX = 8.0  # clearance between swept boxes so tails do not mix
SPLITS = ("train", "val", "test")


class SpecError(ValueError):
    """A clip specification violates its invariants."""


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    position: tuple  # (x, y) HR centre at frame 0
    velocity: tuple  # (vx, vy) HR px per frame
    size: tuple  # blob: (sigma, sigma); rectangle: (half_width, half_height)
    intensity: tuple  # RGB in [0, 1]

    def center(self, tau: float) -> np.ndarray:
        return np.asarray(self.position, dtype=np.float64) + tau * np.asarray(self.velocity, dtype=np.float64)

    @property
    def radius(self) -> np.ndarray:
        """Half-extent (x, y) of the region the object effectively occupies."""
        if self.shape == "gaussian_blob":
            return BLOB_EXTENT_SIGMAS * np.asarray(self.size, dtype=np.float64)
        return np.asarray(self.size, dtype=np.float64)

    def swept_box(self, frame_count: int) -> tuple[np.ndarray, np.ndarray]:
        """(lo, hi) corners of the area covered over frames ``0..frame_count-1``."""
        a, b = self.center(0), self.center(frame_count - 1)
        return np.minimum(a, b) - self.radius, np.maximum(a, b) + self.radius


@dataclass(frozen=True)
class ClipSpec:
    seed: int
    frame_count: int = 7
    hr_size: int = 64
    objects: tuple = ()
    background: tuple = (0.2, 0.2, 0.2)

    def validate(self) -> None:
        if self.frame_count < 2 or self.hr_size < 8:
            raise SpecError(f"clip needs >= 2 frames and hr_size >= 8, got {self.frame_count}, {self.hr_size}")
        for obj in self.objects:
            if obj.shape not in SHAPES:
                raise SpecError(f"unknown shape {obj.shape!r}")
            if math.hypot(*obj.velocity) > self.hr_size / self.frame_count:
                raise SpecError(f"velocity {obj.velocity} exceeds hr_size/frame_count")
            lo, hi = obj.swept_box(self.frame_count)
            if lo.min() < BORDER_PX or hi.max() > self.hr_size - BORDER_PX:
                raise SpecError(f"object {obj} leaves the frame interior")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClipSpec":
        objs = tuple(ObjectSpec(o["shape"], tuple(o["position"]), tuple(o["velocity"]), tuple(o["size"]),
                                tuple(o["intensity"])) for o in d["objects"])
        return cls(int(d["seed"]), int(d["frame_count"]), int(d["hr_size"]), objs, tuple(d["background"]))


@dataclass
class VideoClip:
    """Frames ``[T, 3, H, W]`` in [0, 1] plus frame-rate metadata."""

    frames: np.ndarray
    fps: float = 30.0
    role: str = "hr_ground_truth"

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ConfigError(f"clip frames must be [T,3,H,W], got {self.frames.shape}")

    def __len__(self) -> int:
        return self.frames.shape[0]

    def frame(self, i: int) -> np.ndarray:
        return self.frames[i : i + 1]


@dataclass(frozen=True)
class DegradationSpec:
    scale_factor: int = 4
    method: str = "bicubic"


# --- rendering -------------------------------------------------------------------


def _box_coverage(centers: np.ndarray, c: float, half: float) -> np.ndarray:
    """Overlap length of unit pixels [i, i+1) with [c - half, c + half]."""
    lo = np.maximum(centers - 0.5, c - half)
    hi = np.minimum(centers + 0.5, c + half)
    return np.clip(hi - lo, 0.0, 1.0)


def object_alpha(obj: ObjectSpec, tau: float, size: int) -> np.ndarray:
    """Anti-aliased coverage ``[H, W]`` of ``obj`` at (possibly fractional) frame ``tau``."""
    cx, cy = obj.center(tau)
    centers = np.arange(size) + 0.5
    if obj.shape == "gaussian_blob":
        sx, sy = obj.size
        ax = np.exp(-((centers - cx) ** 2) / (2 * sx * sx))
        ay = np.exp(-((centers - cy) ** 2) / (2 * sy * sy))
    else:
        hx, hy = obj.size
        ax = _box_coverage(centers, cx, hx)
        ay = _box_coverage(centers, cy, hy)
    return np.outer(ay, ax)


def render_frame(spec: ClipSpec, tau: float) -> np.ndarray:
    """One frame ``[3, H, W]`` at moment ``tau`` (in frame units)."""
    bg = np.asarray(spec.background, dtype=np.float64).reshape(3, 1, 1)
    img = np.broadcast_to(bg, (3, spec.hr_size, spec.hr_size)).copy()
    for obj in spec.objects:
        alpha = object_alpha(obj, tau, spec.hr_size)
        img += alpha[None] * (np.asarray(obj.intensity, dtype=np.float64).reshape(3, 1, 1) - bg)
    return img


def render_clip(spec: ClipSpec) -> VideoClip:
    spec.validate()
    frames = np.stack([render_frame(spec, float(tau)) for tau in range(spec.frame_count)])
    return VideoClip(frames, role="hr_ground_truth")


def degrade(clip: VideoClip, spec: DegradationSpec = DegradationSpec()) -> VideoClip:
    if spec.method != "bicubic":
        raise ConfigError(f"unsupported degradation {spec.method!r}")
    lr = resize_bicubic(clip.frames, spec.scale_factor, "down")
    return VideoClip(lr, fps=clip.fps, role="lr_input")


# --- random specs ----------------------------------------------------------------


def random_clip_spec(seed: int, clip_index: int, hr_size: int = 64, frame_count: int = 7,
                     speed_range=(0.5, 3.0), max_objects: int = 3, max_tries: int = 200) -> ClipSpec:
    """Draw 1..max_objects objects whose swept boxes are disjoint and interior.

    Objects that cannot be placed after ``max_tries`` attempts are dropped
    (at least one is always placed when the frame is large enough).
    """
    rng = np.random.default_rng([seed, clip_index])
    background = tuple(float(v) for v in rng.uniform(0.05, 0.35, size=3))
    n_obj = int(rng.integers(1, max_objects + 1))
    placed: list[ObjectSpec] = []
    boxes: list[tuple[np.ndarray, np.ndarray]] = []
    for k in range(n_obj):
        for _ in range(max_tries):
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            if shape == "gaussian_blob":
                s = float(rng.uniform(2.0, 5.0))
                size = (s, s)
            else:
                size = tuple(float(v) for v in rng.uniform(2.0, 6.0, size=2))
            speed = float(rng.uniform(*speed_range))
            angle = float(rng.uniform(0, 2 * np.pi))
            vel = (speed * math.cos(angle), speed * math.sin(angle))
            colour = tuple(float(v) for v in rng.uniform(0.55, 1.0, size=3))
            span = np.abs(np.asarray(vel)) * (frame_count - 1)
            radius = (BLOB_EXTENT_SIGMAS if shape == "gaussian_blob" else 1.0) * np.asarray(size)
            lo_bound = BORDER_PX + radius + np.maximum(-np.asarray(vel) * (frame_count - 1), 0)
            hi_bound = hr_size - BORDER_PX - radius - np.maximum(np.asarray(vel) * (frame_count - 1), 0)
            if np.any(hi_bound <= lo_bound) or np.any(span + 2 * radius > hr_size - 2 * BORDER_PX):
                continue
            pos = tuple(float(v) for v in rng.uniform(lo_bound, hi_bound))
            obj = ObjectSpec(shape, pos, vel, size, colour)
            lo, hi = obj.swept_box(frame_count)
            if any(np.all(lo - OBJECT_GAP_PX < bhi) and np.all(blo < hi + OBJECT_GAP_PX) for blo, bhi in boxes):
                continue
            placed.append(obj)
            boxes.append((lo, hi))
            break
    spec = ClipSpec(int(seed) * 100003 + clip_index, frame_count, hr_size, tuple(placed), background)
    spec.validate()
    return spec


# --- centroids -------------------------------------------------------------------


def measure_centroid(frame: np.ndarray, spec: ClipSpec, obj: ObjectSpec, threshold: float = 0.0,
                     scale: int = 1) -> np.ndarray:
    """Weighted centroid (x, y) of ``obj`` inside its swept box.

    Weights are ``sum_c |frame - background|`` minus ``threshold`` times the
    object's own contrast (clipped at zero). ``scale`` > 1 measures on a
    frame downsampled by that factor; the result is in that frame's pixels
    and the window grows by the support of the downsampling kernel.
    """
    lo, hi = obj.swept_box(spec.frame_count)
    pad = 2.0 if scale > 1 else 0.0
    lo, hi = lo / scale - pad, hi / scale + pad
    h, w = frame.shape[-2:]
    x0, y0 = max(int(np.floor(lo[0])), 0), max(int(np.floor(lo[1])), 0)
    x1, y1 = min(int(np.ceil(hi[0])), w), min(int(np.ceil(hi[1])), h)
    bg = np.asarray(spec.background).reshape(3, 1, 1)
    diff = np.abs(frame.reshape(3, h, w)[:, y0:y1, x0:x1] - bg).sum(0)
    contrast = float(np.abs(np.asarray(obj.intensity) - np.asarray(spec.background)).sum())
    wts = np.maximum(diff - threshold * contrast, 0.0)
    total = wts.sum()
    if total <= 0:
        return np.array([np.nan, np.nan])
    ys = np.arange(y0, y1) + 0.5
    xs = np.arange(x0, x1) + 0.5
    return np.array([(wts.sum(0) * xs).sum() / total, (wts.sum(1) * ys).sum() / total])


# --- protocols -------------------------------------------------------------------


@dataclass
class ProtocolSample:
    input_idx: tuple
    inputs: np.ndarray  # [k, 3, h, w] LR
    target_idx: tuple
    targets: np.ndarray  # [m, 3, H, W] HR
    t_list: list  # per gap


PROTOCOLS = {
    "step1": ((0, 2, 4, 6), tuple(range(7)), [0.5]),
    "step2": ((0, 6), (1, 2, 3, 4, 5), [k / 6 for k in range(1, 6)]),
}


def assemble_protocol(hr: VideoClip, protocol: str, lr: Optional[VideoClip] = None,
                      degradation: DegradationSpec = DegradationSpec()) -> ProtocolSample:
    """Split a 7-frame clip into LR inputs, HR targets and per-gap moments."""
    if len(hr) != 7:
        raise ConfigError(f"protocols need exactly 7 frames, got {len(hr)}")
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; expected one of {sorted(PROTOCOLS)}")
    if lr is None:
        lr = degrade(hr, degradation)
    inp, tgt, ts = PROTOCOLS[protocol]
    n_gaps = len(inp) - 1
    return ProtocolSample(inp, lr.frames[list(inp)], tgt, hr.frames[list(tgt)], [list(ts) for _ in range(n_gaps)])


def output_moments(input_idx: Sequence[int], t_per_gap: Sequence[Sequence[float]]) -> list[float]:
    """Frame-unit moment of each output position (inputs and interpolations, in order)."""
    taus = []
    for g, a in enumerate(input_idx):
        taus.append(float(a))
        if g < len(input_idx) - 1:
            b = input_idx[g + 1]
            taus.extend(a + t * (b - a) for t in sorted(t_per_gap[g]))
    return taus


def baseline_bicubic_blend(lr_a: np.ndarray, lr_b: np.ndarray, t: float, scale: int = 4) -> np.ndarray:
    """Bicubic-upsample both frames and blend ``(1-t)*A + t*B``."""
    if not 0.0 <= t <= 1.0:
        raise ConfigError(f"t must lie in [0, 1], got {t}")
    up_a = resize_bicubic(lr_a, scale, "up")
    up_b = resize_bicubic(lr_b, scale, "up")
    if t == 0.0:
        return up_a
    if t == 1.0:
        return up_b
    return (1.0 - t) * up_a + t * up_b


# --- corpus ----------------------------------------------------------------------


@dataclass
class Corpus:
    """Clip specs per split; frames are rendered on demand and cached."""

    seed: int
    specs: dict = field(default_factory=dict)  # split -> list[(clip_id, ClipSpec)]
    scale_factor: int = 4
    _cache: dict = field(default_factory=dict, repr=False)

    def split(self, name: str) -> list:
        return self.specs.get(name, [])

    def clip(self, clip_id: int) -> tuple[ClipSpec, VideoClip, VideoClip]:
        if clip_id not in self._cache:
            spec = self.spec(clip_id)
            hr = render_clip(spec)
            self._cache[clip_id] = (spec, hr, degrade(hr, DegradationSpec(self.scale_factor)))
        return self._cache[clip_id]

    def spec(self, clip_id: int) -> ClipSpec:
        for items in self.specs.values():
            for cid, spec in items:
                if cid == clip_id:
                    return spec
        raise KeyError(f"no clip {clip_id}")

    def arrays(self, split: str, dtype=np.float32) -> tuple[list, np.ndarray, np.ndarray]:
        """(clip ids, HR ``[n,T,3,H,W]``, LR ``[n,T,3,h,w]``) for one split."""
        ids = [cid for cid, _ in self.split(split)]
        if not ids:
            raise ConfigError(f"split {split!r} is empty")
        hr = np.stack([self.clip(c)[1].frames for c in ids]).astype(dtype)
        lr = np.stack([self.clip(c)[2].frames for c in ids]).astype(dtype)
        return ids, hr, lr


def split_counts(n_clips: int, n_val: Optional[int] = None, n_test: Optional[int] = None) -> tuple[int, int, int]:
    """Default split: one twelfth each for val and test (240 -> 200/20/20)."""
    n_val = round(n_clips / 12) if n_val is None else n_val
    n_test = round(n_clips / 12) if n_test is None else n_test
    n_train = n_clips - n_val - n_test
    if n_clips < 1 or min(n_val, n_test) < 0 or n_train < 0:
        raise ConfigError(f"invalid split of {n_clips} clips into val={n_val}, test={n_test}")
    return n_train, n_val, n_test


def generate_corpus(seed: int = 42, n_clips: int = 240, n_val: Optional[int] = None, n_test: Optional[int] = None,
                    hr_size: int = 64, frame_count: int = 7, scale_factor: int = 4,
                    speed_range=(0.5, 3.0)) -> Corpus:
    if hr_size % scale_factor:
        raise ConfigError(f"hr_size {hr_size} not divisible by scale {scale_factor}")
    counts = split_counts(n_clips, n_val, n_test)
    specs, cid = {}, 0
    for name, count in zip(SPLITS, counts):
        specs[name] = []
        for _ in range(count):
            specs[name].append((cid, random_clip_spec(seed, cid, hr_size, frame_count, speed_range)))
            cid += 1
    return Corpus(seed, specs, scale_factor)


def standard_corpus() -> Corpus:
    """200 train / 20 val / 20 test clips, HR 64x64, 7 frames, seed 42."""
    return generate_corpus(42, 240)


# --- PGM I/O -------------------------------------------------------------------


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1], scale to 255 and round half away from zero."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def write_pgm(path, plane: np.ndarray) -> None:
    data = to_uint8(plane)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM into floats in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ConfigError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ConfigError(f"{path}: only maxval 255 is supported")
    pix = np.frombuffer(raw[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    if pix.size != w * h:
        raise ConfigError(f"{path}: truncated pixel data")
    return pix.reshape(h, w).astype(np.float64) / 255.0


def write_rgb(stem, image: np.ndarray) -> list[str]:
    """Write ``[3, H, W]`` as ``{stem}_r.pgm``, ``_g``, ``_b``; returns the paths."""
    paths = []
    for ch, plane in zip("rgb", image):
        p = f"{stem}_{ch}.pgm"
        write_pgm(p, plane)
        paths.append(p)
    return paths


def read_rgb(stem) -> np.ndarray:
    stem = str(stem)
    for suffix in ("_r.pgm", "_g.pgm", "_b.pgm"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
    return np.stack([read_pgm(f"{stem}_{ch}.pgm") for ch in "rgb"])


def write_corpus(out_dir, corpus: Corpus) -> Path:
    """Export every clip as HR/LR PGM triplets plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": corpus.seed, "scale_factor": corpus.scale_factor, "splits": {}, "clips": []}
    for split in SPLITS:
        manifest["splits"][split] = [cid for cid, _ in corpus.split(split)]
        for cid, spec in corpus.split(split):
            _, hr, lr = corpus.clip(cid)
            clip_dir = out / f"clip{cid:04d}"
            files = {"hr": [], "lr": []}
            for kind, clip in (("hr", hr), ("lr", lr)):
                (clip_dir / kind).mkdir(parents=True, exist_ok=True)
                for idx in range(len(clip)):
                    stem = clip_dir / kind / f"clip{cid}_f{idx}"
                    files[kind].append([os.path.relpath(p, out) for p in write_rgb(stem, clip.frames[idx])])
            manifest["clips"].append({"id": cid, "split": split, "spec": spec.to_dict(), "files": files})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def load_corpus(data_dir) -> Corpus:
    """Rebuild a corpus from its manifest (frames are re-rendered from the specs)."""
    path = Path(data_dir) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
        specs = {split: [] for split in SPLITS}
        for entry in manifest["clips"]:
            specs[entry["split"]].append((int(entry["id"]), ClipSpec.from_dict(entry["spec"])))
        corpus = Corpus(int(manifest["seed"]), specs, int(manifest.get("scale_factor", 4)))
    except FileNotFoundError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"corrupt manifest {path}: {exc}") from exc
    for split in SPLITS:
        if [c for c, _ in specs[split]] != list(manifest["splits"].get(split, [])):
            raise ConfigError(f"corrupt manifest {path}: split {split!r} does not match clip entries")
    return corpus
