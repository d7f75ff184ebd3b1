"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from tmnet.tensor import Tensor, backward, no_grad


class NonDeterministicError(RuntimeError):
    """The function under test returned different values for identical inputs."""


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-5

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<24} max_rel_err={self.worst:.3e} tol={self.tol:.0e} {status}"


def _scalar(f: Callable[..., Tensor], inputs: Sequence[Tensor]) -> float:
    with no_grad():
        out = f(*inputs)
    return float(out.data.sum())


def finite_diff_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-6,
    tol: float = 1e-5,
    name: str = "f",
    wrt: Optional[Sequence[int]] = None,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``sum(f(*inputs))`` against central differences.

    The error for input ``i`` is ``max|g_tape - g_fd| / max|g_fd|`` over the
    checked elements (a max-norm relative error, robust to individual
    entries that are near zero). ``max_elements`` samples a fixed random
    subset of coordinates for large inputs.
    """
    inputs = [Tensor(t.data, requires_grad=True) for t in inputs]
    wrt = range(len(inputs)) if wrt is None else wrt
    first = _scalar(f, inputs)
    if _scalar(f, inputs) != first:
        raise NonDeterministicError(f"{name}: repeated evaluation differs")

    out = f(*inputs)
    from tmnet import ops

    backward(ops.sum(out) if out.data.size != 1 else out)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(name=name, tol=tol)
    for i in wrt:
        x = inputs[i]
        analytic = np.zeros(x.shape) if x.grad is None else x.grad
        flat_idx = np.arange(x.data.size)
        if max_elements is not None and flat_idx.size > max_elements:
            flat_idx = np.sort(rng.choice(flat_idx, size=max_elements, replace=False))
        base = x.data.copy()
        numeric = np.empty(flat_idx.size)
        for j, fi in enumerate(flat_idx):
            idx = np.unravel_index(fi, x.shape)
            vals = []
            for sign in (1.0, -1.0):
                pert = base.copy()
                pert[idx] += sign * h
                probe = list(inputs)
                probe[i] = Tensor(pert)
                vals.append(_scalar(f, probe))
            numeric[j] = (vals[0] - vals[1]) / (2 * h)
        tape = analytic.reshape(-1)[flat_idx]
        scale = max(np.abs(numeric).max(), np.abs(tape).max())
        err = 0.0 if scale == 0 else float(np.abs(tape - numeric).max() / scale)
        report.max_rel_error[f"input{i}"] = err
    return report


# --- the operator registry -------------------------------------------------------


def _param_slots(module):
    for key, p in module._params.items():
        yield module, key, p
    for child in module._children.values():
        yield from _param_slots(child)


def functional(module, call: Callable[[], Tensor]):
    """``(f, params)`` where ``f(*params)`` evaluates ``call`` with the module's
    parameters temporarily replaced by the given tensors."""
    slots = list(_param_slots(module))

    def f(*tensors):
        saved = [getattr(o, a) for o, a, _ in slots]
        try:
            for (o, a, _), t in zip(slots, tensors):
                object.__setattr__(o, a, t)
            return call()
        finally:
            for (o, a, _), s in zip(slots, saved):
                object.__setattr__(o, a, s)

    return f, [Tensor(p.data) for _, _, p in slots]


def _randomize(module, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Give all-zero parameters (biases, zero-init layers) random values so every path is exercised."""
    for p in module.parameters():
        if not np.any(p.data):
            p.assign(rng.normal(0.0, scale, p.shape))


def _tiny_cfg(**changes):
    from tmnet.model import ModelConfig

    base = dict(channels=4, front_resblocks=1, recon_resblocks=1, deform_groups=2)
    base.update(changes)
    return ModelConfig(**base)


def operator_suite(seed: int = 0) -> list[tuple[str, Callable[[], GradCheckReport]]]:
    """Named finite-difference checks over every differentiable building block (f64)."""
    from tmnet import ops, video_ops
    from tmnet.model import (FeaturePyramid, FeatureSequence, GlobalFeatureFusion, LocalFeatureComparison,
                             ModulatedPCD, TemporalModulation, TMNet)

    def rng(k):
        return np.random.default_rng([seed, k])

    def t(shape, k, scale=1.0):
        return Tensor(rng(k).normal(0.0, scale, shape))

    def conv():
        return finite_diff_check(lambda x, w, b: ops.conv2d(x, w, b, padding=1),
                                 [t((2, 3, 5, 5), 1), t((4, 3, 3, 3), 2), t((4,), 3)], name="conv2d")

    def conv_strided():
        return finite_diff_check(lambda x, w: ops.conv2d(x, w, stride=2, padding=1),
                                 [t((1, 2, 6, 6), 4), t((3, 2, 3, 3), 5)], name="conv2d_stride2")

    def bilinear():
        coords = Tensor(rng(7).uniform(-1.5, 5.5, (2, 2, 3, 3)))
        return finite_diff_check(ops.bilinear_sample, [t((2, 3, 5, 5), 6), coords], name="bilinear_sample")

    def deform():
        x, w = t((1, 4, 5, 5), 8), t((3, 4, 3, 3), 9, 0.5)
        off = t((1, 2 * 2 * 9, 5, 5), 10, 0.7)
        mask = Tensor(rng(11).uniform(0.1, 0.9, (1, 2 * 9, 5, 5)))
        return finite_diff_check(lambda a, o, m, k, b: video_ops.deform_conv2d(a, o, m, k, b, groups=2),
                                 [x, off, mask, w, t((3,), 12)], name="deform_conv2d", max_elements=60)

    def shuffle():
        return finite_diff_check(lambda x: ops.pixel_shuffle(x, 2), [t((1, 8, 3, 3), 13)], name="pixel_shuffle")

    def up2():
        return finite_diff_check(ops.bilinear_upsample_x2, [t((1, 2, 3, 4), 14)], name="bilinear_upsample_x2")

    def bicubic():
        return finite_diff_check(lambda x: video_ops.resize_bicubic(x, 2, "down"), [t((1, 2, 8, 8), 15)],
                                 name="resize_bicubic")

    def lstm():
        def f(x, h, c, w, b):
            s = video_ops.conv_lstm_step(x, video_ops.ConvLSTMState(h, c), video_ops.ConvLSTMWeights(w, b))
            return ops.add(s.hidden, s.cell)

        return finite_diff_check(f, [t((1, 2, 4, 4), 16), t((1, 3, 4, 4), 17), t((1, 3, 4, 4), 18),
                                     t((12, 5, 3, 3), 19, 0.3), t((12,), 20)], name="conv_lstm_step")

    def tmb_map():
        m = TemporalModulation(_tiny_cfg(), rng(21), np.float64)
        _randomize(m, rng(22))
        f, params = functional(m.fcn, lambda: m.vector(0.3))
        return finite_diff_check(f, params, name="tmb_map")

    def pcd():
        cfg = _tiny_cfg()
        pyr = FeaturePyramid(4, rng(23), np.float64)
        m = ModulatedPCD(cfg, rng(24), rng(25), np.float64, warp_first=True)
        _randomize(m, rng(26))
        return finite_diff_check(lambda a, b, v: m(pyr(a), pyr(b), v),
                                 [t((1, 4, 8, 8), 27), t((1, 4, 8, 8), 28), t((1, 4, 1, 1), 29)],
                                 name="modulated_pcd", max_elements=40)

    def lfc():
        m = LocalFeatureComparison(_tiny_cfg(), rng(30), np.float64)
        _randomize(m, rng(31))
        prov = [("frame", 0), ("interp", 0, 0.5), ("frame", 1)]
        return finite_diff_check(lambda d: m(FeatureSequence("interpolated", d, 1, prov)).data,
                                 [t((3, 4, 4, 4), 32)], name="lfc", max_elements=60)

    def gff():
        m = GlobalFeatureFusion(_tiny_cfg(), rng(33), np.float64)
        _randomize(m, rng(34))
        prov = [("frame", 0), ("interp", 0, 0.5), ("frame", 1)]
        return finite_diff_check(lambda d: m(FeatureSequence("lfc", d, 1, prov)).data,
                                 [t((3, 4, 4, 4), 35)], name="gff_bdconvlstm", max_elements=60)

    def charbonnier():
        from tmnet.train import charbonnier_loss

        return finite_diff_check(lambda a, b: charbonnier_loss(a, b, 1e-3), [t((2, 3, 4, 4), 36), t((2, 3, 4, 4), 37)],
                                 name="charbonnier_loss")

    def full_model():
        model = TMNet(_tiny_cfg(), seed=seed, dtype=np.float64)
        _randomize(model, rng(38), 0.1)
        frames = [Tensor(rng(39 + i).uniform(0, 1, (1, 3, 4, 4))) for i in range(2)]
        return finite_diff_check(lambda a, b: model.forward_stacked([a, b], [[0.3, 0.7]])[0], frames,
                                 tol=1e-4, name="full_tiny_model", max_elements=48)

    return [("conv2d", conv), ("conv2d_stride2", conv_strided), ("bilinear_sample", bilinear),
            ("deform_conv2d", deform), ("pixel_shuffle", shuffle), ("bilinear_upsample_x2", up2),
            ("resize_bicubic", bicubic), ("conv_lstm_step", lstm), ("tmb_map", tmb_map),
            ("modulated_pcd", pcd), ("lfc", lfc), ("gff_bdconvlstm", gff), ("charbonnier_loss", charbonnier),
            ("full_tiny_model", full_model)]


def run_suite(seed: int = 0) -> list[GradCheckReport]:
    return [check() for _, check in operator_suite(seed)]
