import numpy as np
import pytest

from tmnet import ops
from tmnet.gradcheck import GradCheckReport, NonDeterministicError, finite_diff_check, functional, operator_suite
from tmnet.nn import Conv2d
from tmnet.tensor import Tensor


def test_registry_covers_core_operators():
    names = [n for n, _ in operator_suite()]
    assert len(names) >= 8 and len(set(names)) == len(names)
    for required in ("conv2d", "bilinear_sample", "deform_conv2d", "pixel_shuffle", "conv_lstm_step",
                     "tmb_map", "modulated_pcd", "charbonnier_loss"):
        assert required in names


@pytest.mark.parametrize("name", ["conv2d", "pixel_shuffle", "bilinear_upsample_x2", "tmb_map", "charbonnier_loss"])
def test_fast_operators_pass(name):
    check = dict(operator_suite(seed=1))[name]
    report = check()
    assert report.passed, report.line()


def test_detects_wrong_gradient():
    # a deliberately broken op: forward is x**2, backward claims 3x
    def bad(x):
        out = ops.mul(x, x)
        return ops.add(out, ops.mul(ops.sub(x, Tensor(x.data)), Tensor(x.data)))

    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    assert finite_diff_check(lambda a: ops.mul(a, a), [x]).passed
    assert not finite_diff_check(bad, [x]).passed


def test_nondeterminism_raises():
    rng = np.random.default_rng(0)
    x = Tensor(np.ones(3))
    with pytest.raises(NonDeterministicError):
        finite_diff_check(lambda a: ops.mul(a, Tensor(rng.standard_normal(3))), [x])


def test_sampled_elements_are_deterministic():
    x = Tensor(np.random.default_rng(2).standard_normal((20, 20)))
    a = finite_diff_check(lambda v: ops.mul(v, v), [x], max_elements=17, seed=5)
    b = finite_diff_check(lambda v: ops.mul(v, v), [x], max_elements=17, seed=5)
    assert a.max_rel_error == b.max_rel_error


def test_functional_restores_params():
    conv = Conv2d(2, 3, 3, np.random.default_rng(0), dtype=np.float64)
    before = {k: v.data.copy() for k, v in conv.named_parameters()}
    x = Tensor(np.random.default_rng(1).standard_normal((1, 2, 5, 5)))
    f, params = functional(conv, lambda: conv(x))
    f(*[Tensor(p.data * 2) for p in params])
    assert all(np.array_equal(before[k], v.data) for k, v in conv.named_parameters())


def test_report_line_format():
    r = GradCheckReport("op", {"input0": 2e-6}, tol=1e-5)
    assert r.passed and r.line().endswith("PASS") and "op" in r.line()
    r.max_rel_error["input1"] = 1.0
    assert not r.passed and r.line().endswith("FAIL")
