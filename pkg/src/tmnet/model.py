"""The temporal-modulation network: feature extraction, controllable feature
interpolation, local/global temporal fusion and HR reconstruction.

Every stage operates on a *stacked* feature tensor ``[L*N, C, h, w]`` holding
``L`` sequence positions of a batch of ``N`` clips (position-major), so each
convolution runs as one large matrix product over the whole sequence.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from tmnet import ops
from tmnet.nn import Conv2d, Module, Parameter, ResidualBlock, Sequential, kaiming_normal
from tmnet.tensor import ConfigError, ShapeError, Tensor
from tmnet.video_ops import ConvLSTMState, ConvLSTMWeights, conv_lstm_step, deform_conv2d

TMB_MODES = ("off", "linear", "nonlinear")
FUSION_MODES = ("GFF_only", "LFC_then_GFF", "LFC_plus_GFF")
LEVELS = ("L1", "L2", "L3")
TMB_PREFIX = "tmb"
KERNEL = 3


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    front_resblocks: int = 5
    recon_resblocks: int = 8
    scale_factor: int = 4
    pcd_levels: int = 3
    deform_groups: int = 1
    tmb_mode: str = "nonlinear"
    tmb_levels: tuple = LEVELS
    fusion_mode: str = "LFC_then_GFF"
    skip_initial_features: bool = True

    def __post_init__(self):
        object.__setattr__(self, "tmb_levels", tuple(sorted(set(self.tmb_levels))))
        if self.channels < 1 or self.front_resblocks < 0 or self.recon_resblocks < 0:
            raise ConfigError(f"invalid channel/resblock counts in {self}")
        if self.channels % self.deform_groups:
            raise ConfigError(f"channels={self.channels} not divisible by deform_groups={self.deform_groups}")
        if self.scale_factor not in (2, 4):
            raise ConfigError(f"scale_factor must be 2 or 4, got {self.scale_factor}")
        if self.pcd_levels != 3:
            raise ConfigError(f"pcd_levels is fixed at 3, got {self.pcd_levels}")
        if self.tmb_mode not in TMB_MODES:
            raise ConfigError(f"tmb_mode must be one of {TMB_MODES}, got {self.tmb_mode!r}")
        unknown = set(self.tmb_levels) - set(LEVELS)
        if unknown:
            raise ConfigError(f"unknown tmb levels {sorted(unknown)}")
        if self.tmb_mode != "off" and not self.tmb_levels:
            raise ConfigError("tmb_levels must be nonempty when tmb_mode != 'off'")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tmb_levels"] = list(self.tmb_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "tmb_levels" in d:
            d["tmb_levels"] = tuple(d["tmb_levels"])
        return cls(**d)


@dataclass(frozen=True)
class TemporalParam:
    """A moment ``t`` strictly between two input frames."""

    t: float

    def __post_init__(self):
        if not (0.0 < float(self.t) < 1.0) or not np.isfinite(self.t):
            raise ConfigError(f"t must lie in (0, 1), got {self.t}")

    @property
    def complement(self) -> float:
        return 1.0 - float(self.t)


@dataclass
class FeatureSequence:
    """Per-position features stacked position-major as ``[L*N, C, h, w]``.

    ``provenance[i]`` is ``("frame", index)`` for features of an input frame
    or ``("interp", gap, t)`` for a synthesised moment.
    """

    stage: str
    data: Tensor
    batch: int
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        if self.data.shape[0] != self.batch * len(self.provenance):
            raise ShapeError(f"{self.data.shape[0]} rows for {len(self.provenance)} positions x batch {self.batch}")

    def __len__(self) -> int:
        return len(self.provenance)

    def __getitem__(self, i: int) -> Tensor:
        return ops.slice_axis(self.data, 0, i * self.batch, (i + 1) * self.batch)

    def with_data(self, stage: str, data: Tensor) -> "FeatureSequence":
        return FeatureSequence(stage, data, self.batch, list(self.provenance))


def _rows(x: Tensor, positions: Sequence[int], n: int) -> Tensor:
    """Gather the batch blocks at ``positions`` (merging contiguous runs)."""
    pieces, run = [], None
    for p in positions:
        if run is not None and p == run[1]:
            run[1] = p + 1
        else:
            if run is not None:
                pieces.append(run)
            run = [p, p + 1]
    pieces.append(run)
    if len(pieces) == 1 and pieces[0] == [0, x.shape[0] // n]:
        return x
    return ops.concat([ops.slice_axis(x, 0, a * n, b * n) for a, b in pieces], axis=0)


def normalize_t_values(t_values, n_gaps: int) -> list[list[float]]:
    """Accept one flat list (applied to every gap) or one list per gap."""
    if len(t_values) and all(isinstance(v, (list, tuple)) for v in t_values):
        per_gap = [list(v) for v in t_values]
        if len(per_gap) != n_gaps:
            raise ConfigError(f"got t lists for {len(per_gap)} gaps, clip has {n_gaps}")
    else:
        per_gap = [list(t_values) for _ in range(n_gaps)]
    out = []
    for ts in per_gap:
        out.append(sorted(TemporalParam(float(t)).t for t in ts))
    return out


# --- building blocks ---------------------------------------------------------------


class DCNPack(Module):
    """Modulated deformable conv whose offsets and mask come from a conv over ``feat``.

    The offset/mask conv starts small (a tenth of the Kaiming scale): offsets
    begin near zero and masks near ``sigmoid(0) = 0.5``, while gradients still
    reach the layers that produce ``feat`` from the first iteration.
    """

    def __init__(self, channels: int, offset_in: int, groups: int, rng, dtype):
        super().__init__()
        self.groups = groups
        self.n_off = 2 * groups * KERNEL * KERNEL
        self.conv_offset = Conv2d(offset_in, 3 * groups * KERNEL * KERNEL, KERNEL, rng,
                                  scale=0.1, dtype=dtype)
        self.weight = Parameter(kaiming_normal(rng, (channels, channels, KERNEL, KERNEL)).astype(dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))

    def offsets_and_mask(self, feat: Tensor) -> tuple[Tensor, Tensor]:
        o = self.conv_offset(feat)
        return ops.channel_slice(o, 0, self.n_off), ops.sigmoid(ops.channel_slice(o, self.n_off, o.shape[1]))

    def __call__(self, x: Tensor, feat: Tensor) -> Tensor:
        off, mask = self.offsets_and_mask(feat)
        return deform_conv2d(x, off, mask, self.weight, self.bias, groups=self.groups)


class ModulationBranch(Module):
    """Two 3x3 convs (ReLU between) whose output is scaled channel-wise by v_t."""

    def __init__(self, channels: int, rng, dtype):
        super().__init__()
        self.conv_a = Conv2d(channels, channels, 3, rng, dtype=dtype)
        self.conv_b = Conv2d(channels, channels, 3, rng, dtype=dtype)

    def __call__(self, feat: Tensor, v: Tensor) -> Tensor:
        return ops.add(feat, ops.mul(self.conv_b(ops.relu(self.conv_a(feat))), v))


class TemporalModulation(Module):
    """Maps ``t`` to a channel vector ``v_t`` and owns the per-level branches."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        c = cfg.channels
        self.mode = cfg.tmb_mode
        self.dtype = dtype
        if cfg.tmb_mode == "nonlinear":
            self.fcn = Sequential(
                Conv2d(1, c, 1, rng, dtype=dtype),
                Conv2d(c, c, 1, rng, dtype=dtype),
                # zero final layer: v_t = 0 at the start, i.e. the unmodulated network
                Conv2d(c, c, 1, rng, init="zeros", dtype=dtype),
            )
        elif cfg.tmb_mode == "linear":
            self.fcn = Sequential(Conv2d(1, c, 1, rng, init="zeros", dtype=dtype))
        else:
            raise ConfigError("TemporalModulation requires tmb_mode 'linear' or 'nonlinear'")
        self.levels = cfg.tmb_levels
        for lvl in cfg.tmb_levels:
            setattr(self, f"branch_{lvl.lower()}", ModulationBranch(c, rng, dtype))

    def vector(self, t: float) -> Tensor:
        x = Tensor(np.full((1, 1, 1, 1), t, dtype=self.dtype))
        layers = self.fcn
        for i in range(len(layers)):
            x = layers[i](x)
            if i < len(layers) - 1:
                x = ops.relu(x)
        return x

    def modulate(self, level: str, feat: Tensor, v: Tensor) -> Tensor:
        return getattr(self, f"branch_{level.lower()}")(feat, v)


class FeaturePyramid(Module):
    """Builds L2 and L3 from L1 with stride-2 convs."""

    def __init__(self, channels: int, rng, dtype):
        super().__init__()
        self.l2_down = Conv2d(channels, channels, 3, rng, stride=2, padding=1, dtype=dtype)
        self.l2_conv = Conv2d(channels, channels, 3, rng, dtype=dtype)
        self.l3_down = Conv2d(channels, channels, 3, rng, stride=2, padding=1, dtype=dtype)
        self.l3_conv = Conv2d(channels, channels, 3, rng, dtype=dtype)

    def __call__(self, l1: Tensor) -> list[Tensor]:
        h, w = l1.shape[2:]
        if h % 4 or w % 4:
            raise ShapeError(f"feature size {h}x{w} must be divisible by 4 for the 3-level pyramid")
        lrelu = ops.leaky_relu
        l2 = lrelu(self.l2_conv(lrelu(self.l2_down(l1))))
        l3 = lrelu(self.l3_conv(lrelu(self.l3_down(l2))))
        return [l1, l2, l3]


class ModulatedPCD(Module):
    """One directional pyramid/cascading/deformable alignment module.

    ``warp_first`` selects which of the two inputs is sampled by the
    deformable convs; both always feed the offset predictors in the order
    (prev, next).
    """

    def __init__(self, cfg: ModelConfig, rng, tmb_rng, dtype, warp_first: bool):
        super().__init__()
        c, g = cfg.channels, cfg.deform_groups
        self.warp_first = warp_first
        for lvl in (3, 2, 1):
            setattr(self, f"offset_conv1_l{lvl}", Conv2d(2 * c, c, 3, rng, dtype=dtype))
            setattr(self, f"offset_conv2_l{lvl}", Conv2d(c if lvl == 3 else 2 * c, c, 3, rng, dtype=dtype))
            setattr(self, f"dcn_l{lvl}", DCNPack(c, c, g, rng, dtype))
            if lvl < 3:
                setattr(self, f"fuse_l{lvl}", Conv2d(2 * c, c, 1, rng, dtype=dtype))
        self.tmb = TemporalModulation(cfg, tmb_rng, dtype) if cfg.tmb_mode != "off" else None

    def __call__(self, pyr_a: list[Tensor], pyr_b: list[Tensor], v: Optional[Tensor]) -> Tensor:
        lrelu = ops.leaky_relu
        src = pyr_a if self.warp_first else pyr_b
        prev_off = prev_feat = None
        for lvl in (3, 2, 1):
            i = lvl - 1
            off = lrelu(getattr(self, f"offset_conv1_l{lvl}")(ops.concat_channels([pyr_a[i], pyr_b[i]])))
            conv2 = getattr(self, f"offset_conv2_l{lvl}")
            if prev_off is None:
                off = lrelu(conv2(off))
            else:
                up = ops.scalar_mul(ops.bilinear_upsample_x2(prev_off), 2.0)
                off = lrelu(conv2(ops.concat_channels([off, up])))
            if v is not None and self.tmb is not None and f"L{lvl}" in self.tmb.levels:
                off = self.tmb.modulate(f"L{lvl}", off, v)
            feat = getattr(self, f"dcn_l{lvl}")(src[i], off)
            if lvl == 3:
                feat = lrelu(feat)
            else:
                feat = getattr(self, f"fuse_l{lvl}")(
                    ops.concat_channels([feat, ops.bilinear_upsample_x2(prev_feat)]))
                if lvl == 2:
                    feat = lrelu(feat)
            prev_off, prev_feat = off, feat
        return feat


class ControllableInterpolation(Module):
    """Synthesises features at moment t from two neighbouring frames."""

    def __init__(self, cfg: ModelConfig, rng, tmb_rng, dtype):
        super().__init__()
        c = cfg.channels
        self.pyramid = FeaturePyramid(c, rng, dtype)
        self.fwd = ModulatedPCD(cfg, rng, tmb_rng, dtype, warp_first=True)
        self.bwd = ModulatedPCD(cfg, rng, tmb_rng, dtype, warp_first=False)
        self.fuse = Conv2d(2 * c, c, 1, rng, dtype=dtype)
        self.modulated = cfg.tmb_mode != "off"
        self.channels = c
        self.dtype = dtype

    def vectors(self, t: float, zero_modulation: bool = False) -> tuple[Optional[Tensor], Optional[Tensor]]:
        if not self.modulated:
            return None, None
        if zero_modulation:
            z = Tensor(np.zeros((1, self.channels, 1, 1), dtype=self.dtype))
            return z, z
        tp = TemporalParam(t)
        return self.fwd.tmb.vector(tp.t), self.bwd.tmb.vector(tp.complement)

    def __call__(self, pyr_prev: list[Tensor], pyr_next: list[Tensor], t: float,
                 zero_modulation: bool = False) -> Tensor:
        v_fwd, v_bwd = self.vectors(t, zero_modulation)
        f_fwd = self.fwd(pyr_prev, pyr_next, v_fwd)
        f_bwd = self.bwd(pyr_prev, pyr_next, v_bwd)
        return self.fuse(ops.concat_channels([f_fwd, f_bwd]))


class LocalFeatureComparison(Module):
    """Refines each position with deformably aligned neighbours (residual)."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        c, g = cfg.channels, cfg.deform_groups
        self.offset_prev = Conv2d(2 * c, c, 3, rng, dtype=dtype)
        self.dcn_prev = DCNPack(c, c, g, rng, dtype)
        self.offset_next = Conv2d(2 * c, c, 3, rng, dtype=dtype)
        self.dcn_next = DCNPack(c, c, g, rng, dtype)
        self.fuse1 = Conv2d(3 * c, c, 1, rng, dtype=dtype)
        self.fuse2 = Conv2d(c, c, 1, rng, dtype=dtype)
        self.fuse3 = Conv2d(c, c, 1, rng, dtype=dtype)
        self.fuse4 = Conv2d(c, c, 1, rng, dtype=dtype)

    def __call__(self, seq: FeatureSequence) -> FeatureSequence:
        if len(seq) == 0:
            raise ShapeError("LFC needs a nonempty sequence")
        x, n, length = seq.data, seq.batch, len(seq)
        if length == 1:
            prev = nxt = x
        else:
            prev = ops.concat([ops.slice_axis(x, 0, 0, n), ops.slice_axis(x, 0, 0, (length - 1) * n)], axis=0)
            nxt = ops.concat([ops.slice_axis(x, 0, n, length * n),
                              ops.slice_axis(x, 0, (length - 1) * n, length * n)], axis=0)
        lrelu = ops.leaky_relu
        a_prev = self.dcn_prev(prev, lrelu(self.offset_prev(ops.concat_channels([x, prev]))))
        a_next = self.dcn_next(nxt, lrelu(self.offset_next(ops.concat_channels([x, nxt]))))
        y = ops.relu(self.fuse1(ops.concat_channels([a_prev, x, a_next])))
        y = ops.relu(self.fuse2(y))
        y = self.fuse4(self.fuse3(y))
        return seq.with_data("lfc", ops.add(x, y))


class DeformableConvLSTMCell(Module):
    """ConvLSTM cell whose incoming hidden state is deformably aligned to the input."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        c, g = cfg.channels, cfg.deform_groups
        self.offset_conv = Conv2d(2 * c, c, 3, rng, dtype=dtype)
        self.dcn = DCNPack(c, c, g, rng, dtype)
        self.gates = Conv2d(2 * c, 4 * c, 3, rng, dtype=dtype)

    def __call__(self, x: Tensor, state: Optional[ConvLSTMState]) -> ConvLSTMState:
        if state is None:
            # zero initial state: nothing to align yet
            state = ConvLSTMState.zeros(x.shape, x.dtype)
        else:
            feat = ops.leaky_relu(self.offset_conv(ops.concat_channels([state.hidden, x])))
            state = ConvLSTMState(self.dcn(state.hidden, feat), state.cell)
        return conv_lstm_step(x, state, ConvLSTMWeights(self.gates.weight, self.gates.bias))

    def run(self, frames: Sequence[Tensor]) -> list[Tensor]:
        state, hs = None, []
        for x in frames:
            state = self(x, state)
            hs.append(state.hidden)
        return hs


class GlobalFeatureFusion(Module):
    """Bidirectional deformable ConvLSTM merged by a 1x1 conv."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        c = cfg.channels
        self.fwd = DeformableConvLSTMCell(cfg, rng, dtype)
        self.bwd = DeformableConvLSTMCell(cfg, rng, dtype)
        self.fuse = Conv2d(2 * c, c, 1, rng, dtype=dtype)

    def __call__(self, seq: FeatureSequence) -> FeatureSequence:
        if len(seq) == 0:
            raise ShapeError("GFF needs a nonempty sequence")
        frames = [seq[i] for i in range(len(seq))]
        h_fwd = self.fwd.run(frames)
        h_bwd = self.bwd.run(frames[::-1])[::-1]
        merged = ops.concat_channels([ops.concat(h_fwd, axis=0), ops.concat(h_bwd, axis=0)])
        return seq.with_data("gff", self.fuse(merged))


class Reconstruction(Module):
    """Residual refinement, optional initial-feature skip, pixel-shuffle upsampling."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        c = cfg.channels
        self.skip = cfg.skip_initial_features
        self.blocks = Sequential(*[ResidualBlock(c, rng, dtype) for _ in range(cfg.recon_resblocks)])
        self.up1 = Conv2d(c, 4 * c, 3, rng, dtype=dtype)
        self.up2 = Conv2d(c, 4 * c, 3, rng, dtype=dtype) if cfg.scale_factor == 4 else None
        self.hr_conv = Conv2d(c, c, 3, rng, dtype=dtype)
        self.last = Conv2d(c, 3, 3, rng, dtype=dtype)

    def __call__(self, feats: Tensor, initial: Optional[Tensor]) -> Tensor:
        lrelu = ops.leaky_relu
        x = self.blocks(feats)
        if self.skip:
            if initial is None or initial.shape != x.shape:
                raise ShapeError("initial-feature skip needs a sequence aligned with the fused features")
            x = ops.add(x, initial)
        x = lrelu(ops.pixel_shuffle(self.up1(x), 2))
        if self.up2 is not None:
            x = lrelu(ops.pixel_shuffle(self.up2(x), 2))
        return self.last(lrelu(self.hr_conv(x)))


# --- full network ------------------------------------------------------------------


class TMNet(Module):
    """Two-or-more LR frames plus moments in (0,1) -> HR frames at all positions.

    Main-network parameters are drawn from ``default_rng([seed, 0])`` and
    temporal-modulation parameters from ``default_rng([seed, 1])``, so the
    main weights do not depend on whether modulation is enabled.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng([seed, 0])
        tmb_rng = np.random.default_rng([seed, 1])
        c = cfg.channels
        self.conv_first = Conv2d(3, c, 3, rng, dtype=dtype)
        self.front = Sequential(*[ResidualBlock(c, rng, dtype) for _ in range(cfg.front_resblocks)])
        self.cfi = ControllableInterpolation(cfg, rng, tmb_rng, dtype)
        self.lfc = LocalFeatureComparison(cfg, rng, dtype) if cfg.fusion_mode != "GFF_only" else None
        self.gff = GlobalFeatureFusion(cfg, rng, dtype)
        if cfg.fusion_mode == "LFC_plus_GFF":
            self.merge = Conv2d(2 * c, c, 1, rng, dtype=dtype)
        self.recon = Reconstruction(cfg, rng, dtype)
        self._rename()

    # parameter partition ------------------------------------------------------------
    @staticmethod
    def is_tmb(name: str) -> bool:
        return TMB_PREFIX in name.split(".")

    def partition(self) -> tuple[dict[str, Parameter], dict[str, Parameter]]:
        main, tmb = {}, {}
        for name, p in self.named_parameters():
            (tmb if self.is_tmb(name) else main)[name] = p
        return main, tmb

    def freeze(self, group: str) -> None:
        """Mark one partition (``"main"`` or ``"tmb"``) as not requiring grad."""
        main, tmb = self.partition()
        for p in main.values():
            p.requires_grad = group != "main"
        for p in tmb.values():
            p.requires_grad = group != "tmb"

    # stages -------------------------------------------------------------------------
    def extract_features(self, frames: Sequence[Tensor]) -> FeatureSequence:
        if len(frames) < 2:
            raise ConfigError(f"need at least 2 input frames, got {len(frames)}")
        shape = frames[0].shape
        for f in frames:
            if f.shape != shape or len(shape) != 4 or shape[1] != 3:
                raise ShapeError(f"frames must share an [N,3,h,w] shape, got {f.shape} vs {shape}")
        x = ops.concat(list(frames), axis=0)
        feats = self.front(ops.leaky_relu(self.conv_first(x)))
        return FeatureSequence("initial", feats, shape[0], [("frame", i) for i in range(len(frames))])

    def interpolate(self, initial: FeatureSequence, t_values, zero_modulation: bool = False) -> FeatureSequence:
        n, n_frames = initial.batch, len(initial)
        per_gap = normalize_t_values(t_values, n_frames - 1)
        pyr = self.cfi.pyramid(initial.data)
        # group (gap, t) jobs by t so each CFI call batches all gaps sharing a moment;
        # without modulation the result does not depend on t at all
        groups: dict[float, list[int]] = {}
        for gap, ts in enumerate(per_gap):
            for t in ts:
                key = t if self.cfi.modulated else 0.5
                if gap not in groups.setdefault(key, []):
                    groups[key].append(gap)
        results: dict[tuple[int, float], Tensor] = {}
        for key, gaps in groups.items():
            pyr_prev = [_rows(level, gaps, n) for level in pyr]
            pyr_next = [_rows(level, [g + 1 for g in gaps], n) for level in pyr]
            out = self.cfi(pyr_prev, pyr_next, key, zero_modulation)
            for j, gap in enumerate(gaps):
                results[(gap, key)] = ops.slice_axis(out, 0, j * n, (j + 1) * n) if len(gaps) > 1 else out
        pieces, prov = [], []
        for i in range(n_frames):
            pieces.append(initial[i])
            prov.append(("frame", i))
            if i < n_frames - 1:
                for t in per_gap[i]:
                    pieces.append(results[(i, t if self.cfi.modulated else 0.5)])
                    prov.append(("interp", i, t))
        return FeatureSequence("interpolated", ops.concat(pieces, axis=0), n, prov)

    def fuse(self, seq: FeatureSequence) -> FeatureSequence:
        mode = self.cfg.fusion_mode
        if mode == "GFF_only":
            return self.gff(seq)
        if mode == "LFC_then_GFF":
            return self.gff(self.lfc(seq))
        lfc, gff = self.lfc(seq), self.gff(seq)
        return seq.with_data("gff", self.merge(ops.concat_channels([lfc.data, gff.data])))

    def reconstruct(self, fused: FeatureSequence, initial: FeatureSequence,
                    positions: Optional[Sequence[int]] = None) -> Tensor:
        if len(fused) != len(initial):
            raise ShapeError(f"sequence lengths differ: {len(fused)} vs {len(initial)}")
        feats, init = fused.data, initial.data
        if positions is not None:
            feats, init = _rows(feats, positions, fused.batch), _rows(init, positions, fused.batch)
        return self.recon(feats, init if self.cfg.skip_initial_features else None)

    def forward_stacked(self, frames: Sequence[Tensor], t_values, positions: Optional[Sequence[int]] = None,
                        zero_modulation: bool = False) -> tuple[Tensor, list]:
        """Run all stages; returns HR frames stacked ``[P*N, 3, H, W]`` and provenance.

        ``positions`` restricts reconstruction to a subset of output positions.
        """
        initial = self.extract_features(frames)
        seq = self.interpolate(initial, t_values, zero_modulation)
        fused = self.fuse(seq)
        out = self.reconstruct(fused, seq, positions)
        prov = seq.provenance if positions is None else [seq.provenance[p] for p in positions]
        return out, prov

    def forward(self, frames: Sequence[Tensor], t_values, zero_modulation: bool = False) -> list[Tensor]:
        out, prov = self.forward_stacked(frames, t_values, zero_modulation=zero_modulation)
        n = frames[0].shape[0]
        return [ops.slice_axis(out, 0, i * n, (i + 1) * n) for i in range(len(prov))]

    __call__ = forward
