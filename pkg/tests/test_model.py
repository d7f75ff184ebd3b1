import numpy as np
import pytest
from hypothesis import given, strategies as st

from tmnet.gradcheck import _randomize
from tmnet.model import (FeaturePyramid, ModelConfig, TemporalParam, TMNet, normalize_t_values)
from tmnet.nn import Conv2d, Sequential
from tmnet.tensor import ConfigError, ShapeError, Tensor, no_grad

TINY = dict(channels=4, front_resblocks=1, recon_resblocks=1)


def _frames(n_frames=2, batch=1, size=4, seed=0, dtype=np.float64):
    r = np.random.default_rng(seed)
    return [Tensor(r.uniform(0, 1, (batch, 3, size, size)).astype(dtype)) for _ in range(n_frames)]


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(channels=0), dict(scale_factor=3), dict(pcd_levels=2),
                                     dict(tmb_mode="cubic"), dict(tmb_levels=("L4",)), dict(fusion_mode="x"),
                                     dict(channels=6, deform_groups=4), dict(tmb_levels=())])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            ModelConfig(**bad)

    def test_dict_roundtrip(self):
        cfg = ModelConfig(tmb_levels=("L3", "L1"), fusion_mode="GFF_only")
        assert cfg.tmb_levels == ("L1", "L3")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"chanels": 3})


class TestTemporal:
    @pytest.mark.parametrize("t", [0.0, 1.0, -0.1, 1.5, float("nan")])
    def test_out_of_range(self, t):
        with pytest.raises(ConfigError):
            TemporalParam(t)

    @given(st.floats(0.001, 0.999))
    def test_complement(self, t):
        assert TemporalParam(t).complement == pytest.approx(1 - t)

    def test_normalize_flat_and_per_gap(self):
        assert normalize_t_values([0.7, 0.3], 2) == [[0.3, 0.7], [0.3, 0.7]]
        assert normalize_t_values([[0.5], [0.2, 0.1]], 2) == [[0.5], [0.1, 0.2]]
        with pytest.raises(ConfigError):
            normalize_t_values([[0.5]], 2)


class TestParameters:
    def test_names_deterministic_and_seeded(self):
        a, b = TMNet(ModelConfig(**TINY), seed=3), TMNet(ModelConfig(**TINY), seed=3)
        assert [n for n, _ in a.named_parameters()] == [n for n, _ in b.named_parameters()]
        for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data)
        c = TMNet(ModelConfig(**TINY), seed=4)
        assert any(not np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), c.parameters()))

    def test_main_weights_independent_of_modulation(self):
        on = TMNet(ModelConfig(**TINY), seed=1)
        off = TMNet(ModelConfig(**TINY, tmb_mode="off"), seed=1)
        main_on, tmb_on = on.partition()
        main_off, tmb_off = off.partition()
        assert tmb_on and not tmb_off and list(main_on) == list(main_off)
        for n in main_on:
            np.testing.assert_array_equal(main_on[n].data, main_off[n].data)

    @pytest.mark.parametrize("levels,n_branches", [(("L1",), 1), (("L2", "L3"), 2), (("L1", "L2", "L3"), 3)])
    def test_tmb_levels_own_branches(self, levels, n_branches):
        _, tmb = TMNet(ModelConfig(**TINY, tmb_levels=levels)).partition()
        branches = {n.split(".")[3] for n in tmb if ".branch_" in n}
        assert len(branches) == n_branches

    def test_fusion_variants(self):
        names = lambda m: {n.split(".")[0] for n, _ in TMNet(ModelConfig(**TINY, fusion_mode=m)).named_parameters()}  # noqa: E731
        assert "lfc" not in names("GFF_only")
        assert "merge" in names("LFC_plus_GFF") and "lfc" in names("LFC_plus_GFF")
        assert "merge" not in names("LFC_then_GFF")

    def test_freeze_partition(self):
        m = TMNet(ModelConfig(**TINY))
        m.freeze("main")
        main, tmb = m.partition()
        assert not any(p.requires_grad for p in main.values()) and all(p.requires_grad for p in tmb.values())

    def test_state_dict_strict(self):
        m = TMNet(ModelConfig(**TINY))
        state = m.state_dict()
        state.pop(next(iter(state)))
        with pytest.raises(KeyError):
            m.load_state_dict(state)

    def test_sequential_naming(self, rng):
        s = Sequential(Conv2d(1, 2, 1, rng), Conv2d(2, 2, 1, rng))
        assert [n for n, _ in s.named_parameters()] == ["0.weight", "0.bias", "1.weight", "1.bias"]
        assert len(s) == 2


class TestForward:
    def test_shapes_and_provenance(self):
        m = TMNet(ModelConfig(**TINY), dtype=np.float64)
        with no_grad():
            outs = m.forward(_frames(3, batch=2), [0.25, 0.75])
        assert len(outs) == 3 + 2 * 2
        assert all(o.shape == (2, 3, 16, 16) for o in outs)
        _, prov = m.forward_stacked(_frames(3), [[0.5], [0.2, 0.4]])
        assert prov == [("frame", 0), ("interp", 0, 0.5), ("frame", 1), ("interp", 1, 0.2), ("interp", 1, 0.4),
                        ("frame", 2)]

    def test_positions_subset(self):
        m = TMNet(ModelConfig(**TINY), dtype=np.float64)
        with no_grad():
            full, _ = m.forward_stacked(_frames(), [0.3, 0.6])
            part, prov = m.forward_stacked(_frames(), [0.3, 0.6], positions=[1, 2])
        np.testing.assert_array_equal(part.data, full.data[1:3])
        assert prov == [("interp", 0, 0.3), ("interp", 0, 0.6)]

    def test_zero_modulation_equals_off(self):
        on = TMNet(ModelConfig(**TINY), seed=2, dtype=np.float64)
        _randomize(on, np.random.default_rng(0))  # make v_t nonzero in the modulated model
        off = TMNet(ModelConfig(**TINY, tmb_mode="off"), seed=2, dtype=np.float64)
        main_on, _ = on.partition()
        off.load_state_dict({n: p.data for n, p in main_on.items()})
        with no_grad():
            a, _ = on.forward_stacked(_frames(), [0.3, 0.7], zero_modulation=True)
            b, _ = off.forward_stacked(_frames(), [0.3, 0.7])
            c, _ = on.forward_stacked(_frames(), [0.3, 0.7])
        np.testing.assert_array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)

    def test_unmodulated_output_independent_of_t(self):
        m = TMNet(ModelConfig(**TINY, tmb_mode="off"), dtype=np.float64)
        with no_grad():
            a = m.forward(_frames(), [0.2])[1]
            b = m.forward(_frames(), [0.8])[1]
        np.testing.assert_array_equal(a.data, b.data)

    def test_batch_consistency(self):
        # clips in a batch do not interact
        m = TMNet(ModelConfig(**TINY), dtype=np.float64)
        _randomize(m, np.random.default_rng(1))
        fr = _frames(batch=2)
        with no_grad():
            both = m.forward_stacked(fr, [0.4])[0].data
            one = m.forward_stacked([Tensor(f.data[1:]) for f in fr], [0.4])[0].data
        np.testing.assert_allclose(both[[1, 3, 5]], one, atol=1e-12)

    @pytest.mark.parametrize("frames,err", [(1, ConfigError), ("size", ShapeError)])
    def test_input_errors(self, frames, err):
        m = TMNet(ModelConfig(**TINY), dtype=np.float64)
        fr = _frames(1) if frames == 1 else _frames(2, size=6)
        with pytest.raises(err):
            m.forward(fr, [0.5])

    def test_pyramid_requires_divisible(self, rng):
        with pytest.raises(ShapeError):
            FeaturePyramid(2, rng, np.float64)(Tensor(np.ones((1, 2, 6, 6))))


class TestContinuity:
    @pytest.mark.parametrize("mode", ["nonlinear", "linear"])
    @pytest.mark.parametrize("t", [0.2, 0.5, 0.8])
    def test_tmb_map_linear_scaling(self, mode, t):
        from tmnet.evaluation import difference_ratios

        # wide enough that some ReLU units stay live across (0, 1)
        m = TMNet(ModelConfig(**dict(TINY, channels=16), tmb_mode=mode), dtype=np.float64)
        _randomize(m, np.random.default_rng(3))
        tmb = m.cfi.fwd.tmb
        ratios = difference_ratios(lambda s: tmb.vector(s).data, t)
        assert all(1.6 <= r <= 2.4 for r in ratios), ratios

    @pytest.mark.parametrize("t", [0.2, 0.5, 0.8])
    def test_output_linear_scaling(self, t):
        from tmnet.evaluation import interpolation_ratios

        m = TMNet(ModelConfig(**TINY), dtype=np.float64)
        _randomize(m, np.random.default_rng(4))
        pair = np.stack([f.data for f in _frames(size=8)], axis=1)
        ratios = interpolation_ratios(m, pair, t)
        assert all(1.6 <= r <= 2.4 for r in ratios), ratios

    def test_ratio_of_constant_is_inf(self):
        from tmnet.evaluation import difference_ratios

        assert difference_ratios(lambda s: np.ones(3), 0.5) == [float("inf")] * 2
