"""Charbonnier loss, Adam, cosine schedule, augmentation and the training drivers.

Two-step training first fits the main network at a fixed mid-point moment with
modulation disabled (``two_step1``), then trains only the temporal-modulation
parameters on multi-moment supervision with the main network frozen
(``two_step2``).  ``one`` trains everything jointly from scratch on the
multi-moment data, for comparison.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from tmnet import ops
from tmnet.evaluation import ModelPredictor, evaluate, summarize
from tmnet.model import ModelConfig, TMNet
from tmnet.serialization import read_checkpoint, write_checkpoint
from tmnet.synth import PROTOCOLS, Corpus
from tmnet.tensor import ConfigError, ShapeError, Tensor, backward

log = logging.getLogger(__name__)

STEPS = ("one", "two_step1", "two_step2")
DEFAULT_ITERS = {"two_step1": 2000, "two_step2": 300, "one": 2300}
STEP_T = tuple(k / 6 for k in range(1, 6))
LOG_HEADER = ("iter", "lr", "loss", "val_psnr_db", "val_ssim")


class TrainingDivergedError(RuntimeError):
    """Raised when the loss becomes NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 4e-4
    lr_min: float = 1e-7
    cosine_period_iters: int = 2000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    crop_size: int = 32  # HR pixels; the LR crop is crop_size / scale
    charbonnier_eps: float = 1e-3
    total_iters: Optional[int] = None  # None -> per-step default
    seed: int = 0
    step: str = "two_step1"
    t_schedule: tuple = STEP_T
    log_interval: int = 50
    val_interval: int = 500
    val_clips: Optional[int] = None  # None -> whole validation split

    def __post_init__(self):
        object.__setattr__(self, "t_schedule", tuple(float(t) for t in self.t_schedule))
        if not 0 < self.lr_min < self.lr_max:
            raise ConfigError(f"need 0 < lr_min < lr_max, got {self.lr_min}, {self.lr_max}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.cosine_period_iters < 1:
            raise ConfigError(f"cosine_period_iters must be >= 1, got {self.cosine_period_iters}")
        if self.step not in STEPS:
            raise ConfigError(f"step must be one of {STEPS}, got {self.step!r}")
        if not self.t_schedule or not all(0.0 < t < 1.0 for t in self.t_schedule):
            raise ConfigError(f"every scheduled t must lie in (0, 1), got {self.t_schedule}")
        if self.total_iters is not None and self.total_iters < 0:
            raise ConfigError(f"total_iters must be >= 0, got {self.total_iters}")
        if self.log_interval < 1 or self.val_interval < 1:
            raise ConfigError("log_interval and val_interval must be >= 1")
        if not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1:
            raise ConfigError("Adam betas must lie in [0, 1)")

    @property
    def iters(self) -> int:
        return DEFAULT_ITERS[self.step] if self.total_iters is None else self.total_iters

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["t_schedule"] = list(self.t_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "t_schedule" in d:
            d["t_schedule"] = tuple(d["t_schedule"])
        return cls(**d)


# --- loss, optimiser, schedule ---------------------------------------------------


def charbonnier_loss(pred: Tensor, target: Tensor, eps: float = 1e-3) -> Tensor:
    """mean(sqrt((pred - target)^2 + eps^2)); smooth at zero difference."""
    if pred.shape != target.shape:
        raise ShapeError(f"charbonnier_loss: shapes differ {pred.shape} vs {target.shape}")
    d = ops.sub(pred, target)
    return ops.mean(ops.sqrt(ops.add_scalar(ops.square(d), eps * eps)))


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "OptimizerState":
        return cls({n: np.zeros_like(p.data) for n, p in params.items()},
                   {n: np.zeros_like(p.data) for n, p in params.items()}, 0)


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float, cfg: TrainConfig = TrainConfig()) -> None:
    """Bias-corrected Adam update of every parameter in ``params`` (in place)."""
    missing = sorted(n for n in params if grads.get(n) is None)
    if missing:
        raise ValueError(f"missing gradient for trainable parameter(s): {missing[:5]}")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.step += 1
    c1, c2 = 1.0 - b1**state.step, 1.0 - b2**state.step
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = (lr / c1) * m / (np.sqrt(v / c2) + cfg.adam_eps)
        p.assign(p.data - step.astype(p.dtype))


def cosine_lr(it: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Cosine annealing from lr_max to lr_min, restarting every period."""
    if it < 0:
        raise ValueError(f"iteration must be >= 0, got {it}")
    period = cfg.cosine_period_iters
    phase = (it % period) / period
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * phase))


# --- augmentation & batches ------------------------------------------------------


@dataclass(frozen=True)
class AugmentationSpec:
    hflip: bool = False
    rotation: int = 0  # quarter turns, counter-clockwise

    def __post_init__(self):
        if self.rotation not in (0, 1, 2, 3):
            raise ConfigError(f"rotation must be 0..3 quarter turns, got {self.rotation}")

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "AugmentationSpec":
        return cls(bool(rng.random() < 0.5), int(rng.integers(4)))


def _apply(x: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    if spec.hflip:
        x = x[..., ::-1]
    if spec.rotation:
        x = np.rot90(x, spec.rotation, axes=(-2, -1))
    return x


def augment(clip_lr: np.ndarray, clip_hr: np.ndarray, spec: AugmentationSpec) -> tuple[np.ndarray, np.ndarray]:
    """Apply one flip/rotation to every frame of both resolutions."""
    return np.ascontiguousarray(_apply(clip_lr, spec)), np.ascontiguousarray(_apply(clip_hr, spec))


@dataclass
class BatchSampler:
    """Seeded stream of augmented, LR-aligned crops from training clips."""

    hr: np.ndarray  # [n, T, 3, H, W]
    lr: np.ndarray  # [n, T, 3, h, w]
    batch_size: int
    crop_size: int  # HR
    seed: int

    def __post_init__(self):
        if len(self.hr) == 0:
            raise ConfigError("training dataset is empty")
        self.scale = self.hr.shape[-1] // self.lr.shape[-1]
        if self.crop_size % self.scale:
            raise ConfigError(f"crop_size {self.crop_size} is not a multiple of the scale {self.scale}")
        self.lr_crop = self.crop_size // self.scale
        if self.lr_crop % 4 or self.lr_crop > min(self.lr.shape[-2:]):
            raise ConfigError(f"LR crop {self.lr_crop} must be a multiple of 4 and fit in {self.lr.shape[-2:]}")
        self.rng = np.random.default_rng([self.seed, 2])

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        """Returns (LR ``[B,T,3,c,c]``, HR ``[B,T,3,sc,sc]``)."""
        n = len(self.hr)
        idx = self.rng.choice(n, self.batch_size, replace=n < self.batch_size)
        c, s = self.lr_crop, self.scale
        lrs, hrs = [], []
        for i in idx:
            y = int(self.rng.integers(self.lr.shape[-2] - c + 1))
            x = int(self.rng.integers(self.lr.shape[-1] - c + 1))
            spec = AugmentationSpec.draw(self.rng)
            a, b = augment(self.lr[i, :, :, y : y + c, x : x + c],
                           self.hr[i, :, :, s * y : s * (y + c), s * x : s * (x + c)], spec)
            lrs.append(a)
            hrs.append(b)
        return np.stack(lrs), np.stack(hrs)


# --- checkpoints -----------------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict  # name -> ndarray
    optimizer: Optional[OptimizerState] = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, model: TMNet, optimizer: Optional[OptimizerState] = None, **meta) -> "Checkpoint":
        return cls(model.cfg, {n: p.data.copy() for n, p in model.named_parameters()}, optimizer,
                   dict(meta, dtype=str(model.dtype)))

    def to_bytes(self) -> bytes:
        entries = dict(self.params)
        trailer = {"model_config": self.model_config.to_dict(), "meta": self.meta}
        if self.optimizer is not None:
            for n in self.optimizer.m:
                entries[f"optim.m.{n}"] = self.optimizer.m[n]
                entries[f"optim.v.{n}"] = self.optimizer.v[n]
            trailer["optimizer_step"] = self.optimizer.step
        buf = io.BytesIO()
        write_checkpoint(buf, entries, trailer)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        entries, trailer = read_checkpoint(io.BytesIO(blob))
        try:
            cfg = ModelConfig.from_dict(trailer["model_config"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"checkpoint trailer lacks a valid model_config: {exc}") from exc
        params = {n: a for n, a in entries.items() if not n.startswith("optim.")}
        opt = None
        if "optimizer_step" in trailer:
            m = {n[len("optim.m."):]: a for n, a in entries.items() if n.startswith("optim.m.")}
            v = {n[len("optim.v."):]: a for n, a in entries.items() if n.startswith("optim.v.")}
            opt = OptimizerState(m, v, int(trailer["optimizer_step"]))
        ckpt = cls(cfg, params, opt, trailer.get("meta", {}))
        ckpt.build_model()  # validates names and shapes
        return ckpt

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())

    def build_model(self) -> TMNet:
        """Instantiate the configured network and load these weights into it."""
        model = TMNet(self.model_config, dtype=np.dtype(self.meta.get("dtype", "float32")))
        own = dict(model.named_parameters())
        missing, extra = sorted(set(own) - set(self.params)), sorted(set(self.params) - set(own))
        if missing or extra:
            raise ConfigError(f"checkpoint does not match its model config: missing={missing[:3]} "
                              f"unexpected={extra[:3]}")
        for n, p in own.items():
            if self.params[n].shape != p.shape:
                raise ConfigError(f"checkpoint entry {n} has shape {self.params[n].shape}, expected {p.shape}")
            p.assign(self.params[n])
        return model


def parameter_digest(params: dict) -> str:
    """SHA-256 over names, shapes and bytes, in name order."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# --- the training loop -----------------------------------------------------------


@dataclass
class TrainResult:
    model: TMNet
    checkpoint: Checkpoint
    losses: list
    log_rows: list  # dicts keyed by LOG_HEADER
    first_grad_norms: dict  # parameter name -> gradient norm at the first iteration
    nonzero_grads: set  # parameters that received a nonzero gradient at some iteration


def _val_setup(step: str) -> tuple[str, bool]:
    """(evaluation protocol, interpolated-only) used for validation in a step."""
    return ("step1", False) if step == "two_step1" else ("step2", True)


def validate(model: TMNet, corpus: Corpus, step: str, n_clips: Optional[int] = None,
             t_schedule: Sequence[float] = STEP_T) -> tuple[float, float]:
    """Mean Y-PSNR / SSIM on the validation split (on-grid frames)."""
    protocol, interp_only = _val_setup(step)
    ids = [cid for cid, _ in corpus.split("val")][:n_clips]
    t = None if protocol == "step1" else [list(t_schedule)]
    recs = evaluate(ModelPredictor(model), corpus, "val", protocol, t_per_gap=t, clip_ids=ids)
    s = summarize(recs, interpolated_only=interp_only)
    return s["psnr_db"], s["ssim"]


def _fmt(v, spec: str) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else format(v, spec)


def _fit(model: TMNet, trainable: dict, corpus: Corpus, cfg: TrainConfig, protocol: tuple,
         log_path=None, progress: Optional[Callable[[dict], None]] = None,
         optimizer: Optional[OptimizerState] = None) -> TrainResult:
    input_idx, target_idx, positions, t_list = protocol
    _, hr, lr = corpus.arrays("train", model.dtype)
    sampler = BatchSampler(hr, lr, cfg.batch_size, cfg.crop_size, cfg.seed)
    state = optimizer if optimizer is not None else OptimizerState.zeros(trainable)
    for n, p in model.named_parameters():
        p.requires_grad = n in trainable
    total = cfg.iters
    losses, rows, first_norms, nonzero = [], [], {}, set()
    fh = open(log_path, "w", newline="") if log_path is not None else None
    writer = csv.writer(fh, lineterminator="\n") if fh else None
    if writer:
        writer.writerow(LOG_HEADER)
        fh.flush()

    def emit(it, lr_now, loss, val):
        row = {"iter": it, "lr": lr_now, "loss": loss,
               "val_psnr_db": val[0] if val else None, "val_ssim": val[1] if val else None}
        rows.append(row)
        if writer:
            writer.writerow([it, f"{lr_now:.6e}", _fmt(loss, ".6f"), _fmt(row["val_psnr_db"], ".4f"),
                             _fmt(row["val_ssim"], ".6f")])
            fh.flush()
        if progress:
            progress(row)

    try:
        for it in range(total):
            lr_now = cosine_lr(it, cfg)
            val = None
            if it % cfg.val_interval == 0:
                val = validate(model, corpus, cfg.step, cfg.val_clips, cfg.t_schedule)
            lr_b, hr_b = sampler.next()
            frames = [Tensor(np.ascontiguousarray(lr_b[:, i])) for i in input_idx]
            out, _ = model.forward_stacked(frames, t_list, positions)
            tgt = hr_b[:, list(target_idx)].swapaxes(0, 1).reshape(out.shape)
            loss = charbonnier_loss(out, Tensor(np.ascontiguousarray(tgt)), cfg.charbonnier_eps)
            value = float(loss.data.reshape(-1)[0])
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss {value} at iteration {it} "
                                            f"(step={cfg.step}, lr={lr_now:.3e}); aborting")
            backward(loss)
            grads = {n: p.grad for n, p in trainable.items()}
            if it == 0:
                first_norms = {n: (0.0 if g is None else float(np.linalg.norm(g))) for n, g in grads.items()}
            nonzero.update(n for n, g in grads.items() if n not in nonzero and g is not None and g.any())
            adam_step(trainable, grads, state, lr_now, cfg)
            for p in trainable.values():
                p.grad = None
            losses.append(value)
            if it % cfg.log_interval == 0 or val is not None:
                emit(it, lr_now, value, val)
        emit(total, cosine_lr(total, cfg), None, validate(model, corpus, cfg.step, cfg.val_clips, cfg.t_schedule))
    finally:
        if fh:
            fh.close()
        for p in model.parameters():
            p.requires_grad = True
    ckpt = Checkpoint.capture(model, state, step=cfg.step, iters=total, train_config=cfg.to_dict())
    return TrainResult(model, ckpt, losses, rows, first_norms, nonzero)


def _step1_protocol() -> tuple:
    inp, tgt, ts = PROTOCOLS["step1"]
    return inp, tgt, None, [list(ts)] * (len(inp) - 1)


def _step2_protocol(t_schedule: Sequence[float], all_frames: bool) -> tuple:
    ts = sorted(t_schedule)
    inp = (0, 6)
    if not all(abs(6 * t - round(6 * t)) < 1e-9 for t in ts):
        raise ConfigError(f"supervised moments must fall on HR frames (multiples of 1/6), got {ts}")
    interp = tuple(int(round(6 * t)) for t in ts)
    if all_frames:
        return inp, (0,) + interp + (6,), None, [ts]
    return inp, interp, list(range(1, len(ts) + 1)), [ts]


def train_step1(model_cfg: ModelConfig, corpus: Corpus, cfg: TrainConfig, log_path=None,
                progress=None, dtype=np.float32) -> TrainResult:
    """Fit the main network at t = 0.5 against all seven HR frames."""
    cfg = cfg.replace(step="two_step1")
    model = TMNet(model_cfg.replace(tmb_mode="off"), seed=cfg.seed, dtype=dtype)
    main, _ = model.partition()
    return _fit(model, main, corpus, cfg, _step1_protocol(), log_path, progress)


def train_step2(model_cfg: ModelConfig, step1: Optional[Checkpoint], corpus: Corpus, cfg: TrainConfig,
                log_path=None, progress=None) -> TrainResult:
    """Train only the modulation parameters on frames 1 and 7, supervising frames 2-6."""
    if step1 is None:
        raise ConfigError("Step 2 needs a Step-1 checkpoint")
    if model_cfg.tmb_mode == "off":
        raise ConfigError("Step 2 needs tmb_mode 'linear' or 'nonlinear'")
    base = {k: v for k, v in step1.model_config.to_dict().items() if k not in ("tmb_mode", "tmb_levels")}
    want = {k: v for k, v in model_cfg.to_dict().items() if k not in ("tmb_mode", "tmb_levels")}
    if base != want:
        raise ConfigError(f"Step-1 checkpoint architecture {base} differs from requested {want}")
    cfg = cfg.replace(step="two_step2")
    model = TMNet(model_cfg, seed=cfg.seed, dtype=np.dtype(step1.meta.get("dtype", "float32")))
    main, tmb = model.partition()
    ckpt_main = {n: a for n, a in step1.params.items() if not TMNet.is_tmb(n)}
    if set(ckpt_main) != set(main):
        raise ConfigError("Step-1 checkpoint does not cover the main network parameters")
    for n, p in main.items():
        p.assign(ckpt_main[n])
    return _fit(model, tmb, corpus, cfg, _step2_protocol(cfg.t_schedule, False), log_path, progress)


def train_one_step(model_cfg: ModelConfig, corpus: Corpus, cfg: TrainConfig, log_path=None,
                   progress=None, dtype=np.float32) -> TrainResult:
    """Joint training of every parameter from scratch on the multi-moment data."""
    if model_cfg.tmb_mode == "off":
        raise ConfigError("one-step training needs tmb_mode 'linear' or 'nonlinear'")
    cfg = cfg.replace(step="one")
    model = TMNet(model_cfg, seed=cfg.seed, dtype=dtype)
    params = dict(model.named_parameters())
    return _fit(model, params, corpus, cfg, _step2_protocol(cfg.t_schedule, True), log_path, progress)


# --- ablations -------------------------------------------------------------------


SUITES = {
    "q2": ("TMB-L1", "TMB-L2", "TMB-L3", "TMB-all"),
    "q3": ("TMB-Linear", "TMB"),
    "q4": ("GFF", "LFC+GFF", "LFC→GFF"),
    "q5": ("Baseline", "+F^L", "TMNet"),
}

# variant -> (ModelConfig changes, uses Step 2)
VARIANTS = {
    "TMB-L1": ({"tmb_levels": ("L1",)}, True),
    "TMB-L2": ({"tmb_levels": ("L2",)}, True),
    "TMB-L3": ({"tmb_levels": ("L3",)}, True),
    "TMB-all": ({"tmb_levels": ("L1", "L2", "L3")}, True),
    "TMB-Linear": ({"tmb_mode": "linear"}, True),
    "TMB": ({"tmb_mode": "nonlinear"}, True),
    "GFF": ({"fusion_mode": "GFF_only"}, False),
    "LFC+GFF": ({"fusion_mode": "LFC_plus_GFF"}, False),
    "LFC→GFF": ({"fusion_mode": "LFC_then_GFF"}, False),
    "Baseline": ({"fusion_mode": "GFF_only", "skip_initial_features": False}, False),
    "+F^L": ({"fusion_mode": "GFF_only", "skip_initial_features": True}, False),
    "TMNet": ({"fusion_mode": "LFC_then_GFF", "skip_initial_features": True}, False),
}
ABLATION_HEADER = ("suite", "variant", "psnr_db", "ssim", "centroid_error_px", "step1_iters", "step2_iters")


def variant_config(variant_id: str, base: ModelConfig = ModelConfig()) -> tuple[ModelConfig, bool]:
    if variant_id not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant_id!r}; expected one of {sorted(VARIANTS)}")
    changes, two_step = VARIANTS[variant_id]
    cfg = base.replace(**changes)
    if two_step and cfg.tmb_mode == "off":
        cfg = cfg.replace(tmb_mode="nonlinear")
    return cfg, two_step


def step2_budget(step1_iters: int) -> int:
    """Step-2 iterations that keep the default 2000:300 ratio."""
    return max(1, round(step1_iters * DEFAULT_ITERS["two_step2"] / DEFAULT_ITERS["two_step1"]))


def run_ablation(variant_id: str, corpus: Corpus, cfg: TrainConfig, base: ModelConfig = ModelConfig(),
                 split: str = "test", cache: Optional[dict] = None) -> list:
    """Train one variant with the shared seed/budget and score it on ``split``.

    Variants with modulation run both steps (the Step-1 network is shared via
    ``cache``); the rest are evaluated after Step 1 on the Step-1 protocol.
    """
    model_cfg, two_step = variant_config(variant_id, base)
    cache = {} if cache is None else cache
    # the Step-1 network ignores every modulation setting
    main_cfg = model_cfg.replace(tmb_mode="off", tmb_levels=ModelConfig().tmb_levels)
    key = json.dumps([main_cfg.to_dict(), cfg.replace(step="two_step1").to_dict()],
                     sort_keys=True)
    if key not in cache:
        cache[key] = train_step1(model_cfg, corpus, cfg.replace(step="two_step1")).checkpoint
    step1 = cache[key]
    if two_step:
        s2 = cfg.replace(step="two_step2", total_iters=step2_budget(cfg.iters))
        model = train_step2(model_cfg, step1, corpus, s2).model
        return evaluate(ModelPredictor(model), corpus, split, "step2", t_per_gap=[list(cfg.t_schedule)],
                        id_prefix=f"{variant_id}:")
    return evaluate(ModelPredictor(step1.build_model()), corpus, split, "step1", id_prefix=f"{variant_id}:")


def run_suite(suite: str, corpus: Corpus, cfg: TrainConfig, base: ModelConfig = ModelConfig(),
              out_csv=None, split: str = "test") -> list[dict]:
    """Run every variant of a suite; one summary row per variant."""
    if suite not in SUITES:
        raise ConfigError(f"unknown ablation suite {suite!r}; expected one of {sorted(SUITES)}")
    cache: dict = {}
    rows = []
    for variant in SUITES[suite]:
        _, two_step = variant_config(variant, base)
        recs = run_ablation(variant, corpus, cfg, base, split, cache)
        s = summarize(recs, interpolated_only=two_step)
        rows.append({"suite": suite, "variant": variant, "psnr_db": s["psnr_db"], "ssim": s["ssim"],
                     "centroid_error_px": s["centroid_error_px"], "step1_iters": cfg.iters,
                     "step2_iters": step2_budget(cfg.iters) if two_step else 0})
        log.info("ablation %s %s: %.4f dB", suite, variant, s["psnr_db"])
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ABLATION_HEADER)
            for r in rows:
                w.writerow([r["suite"], r["variant"], _fmt(r["psnr_db"], ".4f"), _fmt(r["ssim"], ".6f"),
                            _fmt(r["centroid_error_px"], ".4f"), r["step1_iters"], r["step2_iters"]])
    return rows


__all__ = [
    "AugmentationSpec", "BatchSampler", "Checkpoint", "OptimizerState", "TrainConfig", "TrainResult",
    "TrainingDivergedError", "adam_step", "augment", "charbonnier_loss", "cosine_lr", "parameter_digest",
    "run_ablation", "run_suite", "train_one_step", "train_step1", "train_step2", "validate", "variant_config",
]
