import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tmnet import ops
from tmnet.model import ModelConfig, TMNet
from tmnet.nn import Parameter
from tmnet.tensor import ConfigError, ShapeError, Tensor, backward, no_grad
from tmnet.train import (SUITES, AugmentationSpec, BatchSampler, Checkpoint, OptimizerState, TrainConfig,
                         TrainingDivergedError, adam_step, augment, charbonnier_loss, cosine_lr, parameter_digest,
                         run_ablation, train_one_step, train_step1, train_step2, variant_config)

QUICK = TrainConfig(total_iters=6, log_interval=2, val_interval=3, val_clips=1)


class TestCharbonnier:
    def test_zero_difference(self):
        x = Tensor(np.ones((2, 3)))
        assert charbonnier_loss(x, x, 1e-3).item() == pytest.approx(1e-3)

    def test_unit_difference(self):
        assert charbonnier_loss(Tensor(np.ones(4)), Tensor(np.zeros(4))).item() == pytest.approx(math.sqrt(1 + 1e-6))

    def test_gradient_zero_at_origin(self):
        p = Tensor(np.full(3, 0.5), requires_grad=True)
        backward(charbonnier_loss(p, Tensor(np.full(3, 0.5))))
        assert np.all(p.grad == 0.0)

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=8))
    def test_lower_bound(self, diffs):
        d = np.array(diffs)
        loss = charbonnier_loss(Tensor(d), Tensor(np.zeros_like(d))).item()
        assert loss >= 1e-3 - 1e-15
        if np.any(np.abs(d) > 1e-6):  # below that the excess rounds away
            assert loss > 1e-3

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            charbonnier_loss(Tensor(np.ones(3)), Tensor(np.ones(4)))


def _reference_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return theta


class TestAdam:
    @given(st.floats(1e-3, 1e3), st.sampled_from([-1.0, 1.0]))
    def test_first_step_is_sign_like(self, mag, sign):
        p = Parameter(np.zeros(3), "w")
        state = OptimizerState.zeros({"w": p})
        adam_step({"w": p}, {"w": np.full(3, sign * mag)}, state, 1e-3)
        np.testing.assert_allclose(p.data, -sign * 1e-3 * mag / (mag + 1e-8), rtol=1e-12)
        assert abs(abs(p.data[0]) - 1e-3) < 1e-3 * 1e-5

    def test_matches_reference_over_steps(self, rng):
        grads = rng.normal(size=(5, 4))
        p = Parameter(np.ones(4), "w")
        state = OptimizerState.zeros({"w": p})
        for g in grads:
            adam_step({"w": p}, {"w": g}, state, 1e-2)
        np.testing.assert_allclose(p.data, _reference_adam(np.ones(4), list(grads), 1e-2), rtol=1e-12)
        assert state.step == 5

    def test_zero_gradient(self):
        p = Parameter(np.arange(3.0), "w")
        state = OptimizerState({"w": np.zeros(3)}, {"w": np.zeros(3)}, 0)
        adam_step({"w": p}, {"w": np.zeros(3)}, state, 1e-3)
        np.testing.assert_array_equal(p.data, np.arange(3.0))
        state.m["w"][:] = 1.0
        adam_step({"w": p}, {"w": np.zeros(3)}, state, 0.0)
        np.testing.assert_allclose(state.m["w"], 0.9)

    def test_missing_gradient(self):
        p = Parameter(np.zeros(2), "w")
        with pytest.raises(ValueError, match="missing gradient"):
            adam_step({"w": p}, {"w": None}, OptimizerState.zeros({"w": p}), 1e-3)

    def test_deterministic_100_steps(self):
        def run():
            r = np.random.default_rng(0)
            p = Parameter(r.normal(size=(3, 3)), "w")
            target = Tensor(r.normal(size=(3, 3)))
            state = OptimizerState.zeros({"w": p})
            for _ in range(100):
                backward(charbonnier_loss(p, target))
                adam_step({"w": p}, {"w": p.grad}, state, 1e-2)
                p.grad = None
            return p.data.tobytes()

        assert run() == run()


class TestSchedule:
    cfg = TrainConfig()

    def test_endpoints(self):
        assert cosine_lr(0, self.cfg) == pytest.approx(4e-4)
        assert cosine_lr(1000, self.cfg) == pytest.approx((4e-4 + 1e-7) / 2)
        assert cosine_lr(2000, self.cfg) == pytest.approx(4e-4)
        assert cosine_lr(1999, self.cfg) == pytest.approx(1e-7, abs=1e-9)

    @given(st.integers(0, 10**6))
    def test_bounds(self, it):
        assert 1e-7 <= cosine_lr(it, self.cfg) <= 4e-4

    def test_negative(self):
        with pytest.raises(ValueError):
            cosine_lr(-1)


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(lr_min=1e-3), dict(lr_min=0.0), dict(batch_size=0), dict(step="three"),
                                     dict(t_schedule=(0.5, 1.0)), dict(total_iters=-1)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)

    def test_default_budgets(self):
        assert [TrainConfig(step=s).iters for s in ("two_step1", "two_step2", "one")] == [2000, 300, 2300]

    def test_roundtrip(self):
        cfg = TrainConfig(seed=3, t_schedule=(0.25, 0.5))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"learning_rate": 1})


def _centroid(img):
    w = np.abs(img - img[..., :1, :1]).sum(axis=0)
    ys, xs = np.indices(w.shape) + 0.5
    return np.array([(w * xs).sum(), (w * ys).sum()]) / w.sum()


class TestAugment:
    @given(st.integers(0, 3), st.integers(0, 3), st.booleans())
    def test_rotation_group(self, a, b, flip):
        x = np.arange(2 * 3 * 4 * 4.0).reshape(2, 3, 4, 4)
        y = np.arange(2 * 3 * 16 * 16.0).reshape(2, 3, 16, 16)
        once = augment(*augment(x, y, AugmentationSpec(flip, a)), AugmentationSpec(False, b))
        both = augment(x, y, AugmentationSpec(flip, (a + b) % 4))
        if not flip:
            np.testing.assert_array_equal(once[0], both[0])
            np.testing.assert_array_equal(once[1], both[1])

    def test_double_flip_identity(self):
        x, y = np.random.default_rng(0).normal(size=(2, 1, 3, 4, 4))
        twice = augment(*augment(x, y, AugmentationSpec(True)), AugmentationSpec(True))
        np.testing.assert_array_equal(twice[0], x)

    @pytest.mark.parametrize("flip", [False, True])
    @pytest.mark.parametrize("rot", range(4))
    def test_lr_hr_centroids_stay_aligned(self, flip, rot):
        from tmnet.synth import ClipSpec, ObjectSpec, degrade, render_clip

        spec = ClipSpec(0, 7, 64, (ObjectSpec("gaussian_blob", (22.3, 37.8), (1.0, -0.5), (3.0, 3.0),
                                              (0.9, 0.7, 0.8)),), (0.2, 0.2, 0.2))
        hr = render_clip(spec)
        lr = degrade(hr)
        a, b = augment(lr.frames, hr.frames, AugmentationSpec(flip, rot))
        for f in range(7):
            assert np.linalg.norm(_centroid(b[f]) - 4 * _centroid(a[f])) <= 0.4  # 0.1 LR px


class TestSampler:
    def _data(self, n=5):
        hr = np.random.default_rng(0).uniform(size=(n, 7, 3, 64, 64))
        lr = hr.reshape(n, 7, 3, 16, 4, 16, 4).mean(axis=(4, 6))
        return hr, lr

    def test_crops_aligned_and_deterministic(self):
        hr, lr = self._data()
        a = BatchSampler(hr, lr, 3, 32, seed=5)
        b = BatchSampler(hr, lr, 3, 32, seed=5)
        for _ in range(4):
            (la, ha), (lb, hb) = a.next(), b.next()
            np.testing.assert_array_equal(la, lb)
            assert la.shape == (3, 7, 3, 8, 8) and ha.shape == (3, 7, 3, 32, 32)
            np.testing.assert_allclose(la, ha.reshape(3, 7, 3, 8, 4, 8, 4).mean(axis=(4, 6)), atol=1e-12)

    @pytest.mark.parametrize("crop", [30, 24, 128])
    def test_bad_crop(self, crop):
        hr, lr = self._data()
        with pytest.raises(ConfigError):
            BatchSampler(hr, lr, 2, crop, 0)

    def test_empty(self):
        with pytest.raises(ConfigError):
            BatchSampler(np.zeros((0, 7, 3, 64, 64)), np.zeros((0, 7, 3, 16, 16)), 2, 32, 0)


class TestTraining:
    def test_step1_learns_and_reaches_every_parameter(self, tiny_cfg, small_corpus, tmp_path):
        res = train_step1(tiny_cfg, small_corpus, QUICK.replace(total_iters=40, val_interval=40, log_interval=10),
                          log_path=tmp_path / "log.csv")
        assert np.mean(res.losses[-5:]) < np.mean(res.losses[:5])
        assert res.log_rows[-1]["val_psnr_db"] > res.log_rows[0]["val_psnr_db"]
        dead = [n for n, g in res.first_grad_norms.items() if not g > 0]
        assert not dead
        assert res.model.cfg.tmb_mode == "off"
        rows = list(csv.reader(open(tmp_path / "log.csv")))
        assert rows[0] == ["iter", "lr", "loss", "val_psnr_db", "val_ssim"]
        assert [r[0] for r in rows[1:]] == ["0", "10", "20", "30", "40"]

    def test_checkpoint_roundtrip_bit_identical(self, tiny_cfg, small_corpus, tmp_path):
        res = train_step1(tiny_cfg, small_corpus, QUICK)
        res.checkpoint.save(tmp_path / "a.ckpt")
        loaded = Checkpoint.load(tmp_path / "a.ckpt")
        assert loaded.optimizer.step == 6
        x = [Tensor(np.random.default_rng(0).uniform(size=(1, 3, 8, 8)).astype(np.float32)) for _ in range(2)]
        with no_grad():
            a = res.model.forward_stacked(x, [0.5])[0].data
            b = loaded.build_model().forward_stacked(x, [0.5])[0].data
        assert a.tobytes() == b.tobytes()
        assert loaded.to_bytes() == (tmp_path / "a.ckpt").read_bytes()

    def test_checkpoint_shape_mismatch(self, tiny_cfg, small_corpus):
        ck = Checkpoint.capture(TMNet(tiny_cfg))
        name = next(iter(ck.params))
        ck.params[name] = np.zeros(7, np.float32)
        with pytest.raises(ConfigError):
            Checkpoint.from_bytes(ck.to_bytes())

    def test_reproducible_bytes(self, tiny_cfg, small_corpus):
        a = train_step1(tiny_cfg, small_corpus, QUICK).checkpoint.to_bytes()
        b = train_step1(tiny_cfg, small_corpus, QUICK).checkpoint.to_bytes()
        assert a == b

    def test_step2_freezes_main_and_trains_tmb(self, tiny_cfg, small_corpus):
        s1 = train_step1(tiny_cfg, small_corpus, QUICK)
        before = parameter_digest(s1.model.partition()[0])
        s2 = train_step2(tiny_cfg, s1.checkpoint, small_corpus, QUICK.replace(total_iters=4))
        main, tmb = s2.model.partition()
        assert parameter_digest(main) == before
        assert set(tmb) == s2.nonzero_grads
        assert s2.checkpoint.meta["step"] == "two_step2"
        # the untrained modulation starts as the identity, so its initial PSNR equals Step 1's
        assert s2.log_rows[0]["val_psnr_db"] is not None

    def test_step2_preconditions(self, tiny_cfg, small_corpus):
        s1 = train_step1(tiny_cfg, small_corpus, QUICK.replace(total_iters=1))
        with pytest.raises(ConfigError):
            train_step2(tiny_cfg, None, small_corpus, QUICK)
        with pytest.raises(ConfigError):
            train_step2(tiny_cfg.replace(tmb_mode="off"), s1.checkpoint, small_corpus, QUICK)
        with pytest.raises(ConfigError):
            train_step2(tiny_cfg.replace(channels=4), s1.checkpoint, small_corpus, QUICK)

    def test_one_step_trains_everything(self, tiny_cfg, small_corpus):
        res = train_one_step(tiny_cfg, small_corpus, QUICK.replace(total_iters=3))
        assert len(res.checkpoint.optimizer.m) == len(list(res.model.named_parameters()))

    def test_nan_aborts(self, tiny_cfg, small_corpus, monkeypatch):
        import tmnet.train as tr

        monkeypatch.setattr(tr, "charbonnier_loss", lambda p, t, eps: ops.scalar_mul(ops.mean(p), float("nan")))
        with pytest.raises(TrainingDivergedError, match="iteration 0"):
            train_step1(tiny_cfg, small_corpus, QUICK)


class TestAblation:
    def test_suites(self):
        assert set(SUITES["q2"]) == {"TMB-L1", "TMB-L2", "TMB-L3", "TMB-all"}
        assert set(SUITES["q4"]) == {"GFF", "LFC+GFF", "LFC→GFF"}
        assert set(SUITES["q5"]) == {"Baseline", "+F^L", "TMNet"}
        assert set(SUITES["q3"]) == {"TMB-Linear", "TMB"}

    @pytest.mark.parametrize("variant,field,value", [("GFF", "fusion_mode", "GFF_only"),
                                                     ("Baseline", "skip_initial_features", False),
                                                     ("TMB-L2", "tmb_levels", ("L2",)),
                                                     ("TMB-Linear", "tmb_mode", "linear")])
    def test_variant_configs(self, variant, field, value):
        assert getattr(variant_config(variant)[0], field) == value

    def test_unknown_variant(self, small_corpus):
        with pytest.raises(ConfigError):
            run_ablation("TMB-L4", small_corpus, QUICK)

    def test_gff_only_runs(self, tiny_cfg, small_corpus):
        recs = run_ablation("GFF", small_corpus, QUICK.replace(total_iters=2), base=tiny_cfg)
        assert len(recs) == 2 * 7 and all(r.clip_id.startswith("GFF:") for r in recs)
        assert all(math.isfinite(r.psnr_db) for r in recs)

    def test_step1_shared_across_modulation_variants(self, tiny_cfg, small_corpus):
        cache = {}
        cfg = QUICK.replace(total_iters=2)
        run_ablation("TMB-L1", small_corpus, cfg, base=tiny_cfg, cache=cache)
        run_ablation("TMB-L3", small_corpus, cfg, base=tiny_cfg, cache=cache)
        assert len(cache) == 1
