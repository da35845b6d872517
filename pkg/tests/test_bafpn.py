import numpy as np
import pytest

import oracles
from eldetect.attention import MultiHeadCosineAttention
from eldetect.backbone import BackbonePyramid
from eldetect.bafpn import (
    ALL_VARIANTS,
    BAFPN,
    BottomUpParams,
    TopDownParams,
    Variant,
    bottom_up_refine,
    fuse_variant,
    top_down,
)
from eldetect.tensor import DimensionError, Tensor, grad_check, mul, tsum


def pyramid(widths=(2, 3, 4, 5), size=16, seed=0, scale=1.0) -> BackbonePyramid:
    rng = np.random.default_rng(seed)
    return BackbonePyramid(*(Tensor(scale * rng.normal(size=(w, size >> k, size >> k))) for k, w in enumerate(widths)))


def arrays(c: BackbonePyramid) -> list[np.ndarray]:
    return [lv.data for lv in c.levels()]


def randomize_biases(module, seed):
    rng = np.random.default_rng(seed)
    for _, p in module.named_parameters():
        if p.ndim == 1:
            p.data = rng.normal(scale=0.1, size=p.shape)


class TestTopDown:
    def test_single_level(self):
        rng = np.random.default_rng(0)
        params = TopDownParams((2, 2, 2, 2), 3, rng)
        c5 = Tensor(rng.normal(size=(2, 2, 2)))
        out = top_down(BackbonePyramid(None, None, None, c5), params)
        expected = params.smooth[3](params.lateral[3](c5)).data
        np.testing.assert_array_equal(out.P5.data, expected)
        assert out.P4 is None and out.P3 is None and out.P2 is None

    def test_zero_propagation_from_c2(self):
        rng = np.random.default_rng(1)
        params = TopDownParams((2, 2, 2, 2), 2, rng)
        for m in params.lateral + params.smooth:
            m.set_identity()
        c2 = rng.normal(size=(2, 16, 16))
        c = BackbonePyramid(Tensor(c2), *(Tensor(np.zeros((2, 16 >> k, 16 >> k))) for k in (1, 2, 3)))
        out = top_down(c, params)
        np.testing.assert_array_equal(out.P2.data, c2)
        for lv in (out.P3, out.P4, out.P5):
            assert not lv.data.any()

    @pytest.mark.parametrize("seed", range(3))
    def test_transcription_oracle(self, seed):
        rng = np.random.default_rng(seed)
        params = TopDownParams((2, 3, 4, 5), 2, rng)
        randomize_biases(params, seed + 10)
        c = pyramid(seed=seed)
        out = top_down(c, params)
        ref = oracles.top_down(arrays(c), params)
        for k, lv in zip((2, 3, 4, 5), (out.P2, out.P3, out.P4, out.P5)):
            np.testing.assert_allclose(lv.data, ref[k], rtol=1e-10, atol=1e-12)

    def test_odd_extents(self):
        rng = np.random.default_rng(2)
        params = TopDownParams((2, 2, 2, 2), 2, rng)
        c = BackbonePyramid(*(Tensor(rng.normal(size=(2, s, s))) for s in (13, 7, 4, 2)))
        out = top_down(c, params)
        ref = oracles.top_down(arrays(c), params)
        np.testing.assert_allclose(out.P2.data, ref[2], rtol=1e-10, atol=1e-12)

    def test_inconsistent_extents(self):
        params = TopDownParams((2, 2, 2, 2), 2, np.random.default_rng(0))
        c = BackbonePyramid(*(Tensor(np.zeros((2, s, s))) for s in (16, 8, 5, 2)))
        with pytest.raises(DimensionError):
            top_down(c, params)


class TestBottomUp:
    def _setup(self, mode="cosine", seed=0, size=8, widths=(2, 3, 4, 5), d=2):
        rng = np.random.default_rng(seed)
        td = TopDownParams(widths, d, rng)
        bu = BottomUpParams(widths, d, rng)
        a3 = MultiHeadCosineAttention(d, rng, mode) if mode else None
        a4 = MultiHeadCosineAttention(d, rng, mode) if mode else None
        for m in (td, bu) + ((a3, a4) if mode else ()):
            randomize_biases(m, seed + 5)
        c = pyramid(widths, size, seed + 1)
        return c, td, bu, a3, a4

    def test_arithmetic_fixture(self):
        d = 2
        rng = np.random.default_rng(3)
        bu = BottomUpParams((d, d, d, d), d, rng)
        for name, m in vars(bu).items():
            for conv in m if isinstance(m, list) else [m]:
                conv.set_identity()
        # identity stride-2 conv samples the even cells
        a3, a4 = (MultiHeadCosineAttention(d, rng) for _ in range(2))
        a3.zero_value_proj()
        a4.zero_value_proj()
        p2 = rng.normal(size=(d, 8, 8))
        zeros = lambda s: Tensor(np.zeros((d, s, s)))  # noqa: E731
        c = BackbonePyramid(zeros(8), zeros(4), zeros(2), zeros(1))
        from eldetect.bafpn import TopDownPyramid

        p = TopDownPyramid(Tensor(p2), zeros(4), zeros(2), zeros(1))
        out = bottom_up_refine(c, p, a3, a4, bu)
        np.testing.assert_array_equal(out.B2.data, p2)
        np.testing.assert_array_equal(out.B3.data, 0.5 * p2[:, ::2, ::2])
        np.testing.assert_array_equal(out.B4.data, 0.25 * p2[:, ::4, ::4])
        np.testing.assert_array_equal(out.B5.data, 0.25 * p2[:, ::8, ::8])
        np.testing.assert_array_equal(out.B6.data, out.B5.data)

    @pytest.mark.parametrize("mode", ["cosine", "dot", None])
    @pytest.mark.parametrize("seed", range(2))
    def test_transcription_oracle(self, mode, seed):
        c, td, bu, a3, a4 = self._setup(mode, seed)
        p = top_down(c, td)
        out = bottom_up_refine(c, p, a3, a4, bu)
        P = {2: p.P2.data, 3: p.P3.data, 4: p.P4.data, 5: p.P5.data}
        ref = oracles.bottom_up(arrays(c), P, a3, a4, bu)
        for k, lv in zip(range(2, 7), out.levels()):
            np.testing.assert_allclose(lv.data, ref[k], rtol=1e-10, atol=1e-10)

    @pytest.mark.parametrize("size", [8, 16, 32])
    def test_halving_chain(self, size):
        c, td, bu, a3, a4 = self._setup(size=size)
        out = bottom_up_refine(c, top_down(c, td), a3, a4, bu)
        extents = [lv.shape[1:] for lv in out.levels()]
        assert extents == [(size >> k, size >> k) for k in range(5)] or size >> 4 == 0
        assert all(lv.shape[0] == 2 for lv in out.levels())
        b5 = out.B5.shape[1:]
        assert out.B6.shape[1:] == ((b5[0] + 1) // 2, (b5[1] + 1) // 2)
        assert set(out.similarity) == {"B3", "B4"}

    def test_gradient_reaches_every_backbone_level(self):
        c, td, bu, a3, a4 = self._setup(seed=4)
        for lv in c.levels():
            lv.requires_grad = True
        out = bottom_up_refine(c, top_down(c, td), a3, a4, bu)
        rng = np.random.default_rng(0)
        loss = None
        for lv in out.levels():
            term = tsum(mul(lv, rng.normal(size=lv.shape)))
            loss = term if loss is None else loss + term
        loss.backward()
        for lv in c.levels():
            assert lv.grad is not None and np.abs(lv.grad).sum() > 0


class TestVariants:
    def test_six_variants(self):
        assert len(ALL_VARIANTS) == 6
        assert {v.name for v in ALL_VARIANTS} == {
            f"{f}+{a}" for f in ("topdown", "bidirectional") for a in ("none", "dot", "cosine")
        }

    def test_parse_roundtrip(self):
        for v in ALL_VARIANTS:
            assert Variant.parse(v.name) == v

    def test_invalid(self):
        with pytest.raises(ValueError):
            Variant("sideways", "none")

    def test_default_is_bidirectional_cosine_and_matches_refine(self):
        net = BAFPN((2, 3, 4, 5), 2, Variant(), np.random.default_rng(0))
        c = pyramid(size=16, seed=1)
        out = fuse_variant(c, net)
        ref = bottom_up_refine(c, top_down(c, net.top), net.attn3, net.attn4, net.bottom)
        for a, b in zip(out.levels(), ref.levels()):
            assert a.data.tobytes() == b.data.tobytes()

    def test_bidirectional_none_zero_input(self):
        net = BAFPN((2, 3, 4, 5), 2, Variant("bidirectional", "none"), np.random.default_rng(0))
        c = pyramid(size=16, scale=0.0)
        for lv in fuse_variant(c, net).levels():
            assert not lv.data.any()

    def test_topdown_none_is_plain_fpn(self):
        net = BAFPN((2, 3, 4, 5), 2, Variant("topdown", "none"), np.random.default_rng(0))
        randomize_biases(net, 1)
        c = pyramid(size=16, seed=2)
        out = fuse_variant(c, net)
        ref = oracles.top_down(arrays(c), net.top)
        for k, lv in zip((2, 3, 4, 5), out.levels()):
            np.testing.assert_allclose(lv.data, ref[k], rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(out.B6.data, oracles.maxpool2(ref[5]))

    @pytest.mark.parametrize("mode", ["cosine", "dot"])
    def test_topdown_attention_oracle(self, mode):
        net = BAFPN((2, 3, 4, 5), 2, Variant("topdown", mode), np.random.default_rng(0))
        randomize_biases(net, 3)
        c = pyramid(size=16, seed=4)
        out = fuse_variant(c, net)
        C = arrays(c)
        P = oracles.top_down(C, net.top)
        lat4 = oracles.conv_module(C[2], net.top.lateral[2])
        lat3 = oracles.conv_module(C[1], net.top.lateral[1])
        q4 = oracles.fused(net.attn4, lat4, P[4], oracles.up2(P[5], P[4].shape[1:]))
        q3 = oracles.fused(net.attn3, lat3, P[3], oracles.up2(q4, P[3].shape[1:]))
        np.testing.assert_allclose(out.B4.data, q4, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(out.B3.data, q3, rtol=1e-10, atol=1e-12)
        assert set(out.similarity) == {"B3", "B4"}

    def test_bidirectional_has_more_parameters(self):
        counts = {v.name: BAFPN((32, 64, 128, 256), 64, v, np.random.default_rng(0)).num_parameters()
                  for v in ALL_VARIANTS}
        for att in ("none", "dot", "cosine"):
            assert counts[f"bidirectional+{att}"] > counts[f"topdown+{att}"]
        assert counts["bidirectional+cosine"] == counts["bidirectional+dot"]


class TestGradients:
    def test_top_down(self):
        rng = np.random.default_rng(0)
        params = TopDownParams((2, 2, 2, 2), 2, rng)
        c = pyramid((2, 2, 2, 2), 8, 1)
        r = [np.random.default_rng(k).normal(size=lv.shape) for k, lv in enumerate(c.levels())]

        def fn(c2, c3, c4, c5):
            out = top_down(BackbonePyramid(c2, c3, c4, c5), params)
            return tsum(mul(out.P2, r[0])) + tsum(mul(out.P3, r[1])) + tsum(mul(out.P4, r[2])) + tsum(mul(out.P5, r[3]))

        assert grad_check(fn, c.levels()).passed(1e-3)

    @pytest.mark.parametrize("mode", ["cosine", "dot"])
    def test_bottom_up(self, mode):
        rng = np.random.default_rng(1)
        widths = (2, 2, 2, 2)
        td, bu = TopDownParams(widths, 2, rng), BottomUpParams(widths, 2, rng)
        a3, a4 = MultiHeadCosineAttention(2, rng, mode), MultiHeadCosineAttention(2, rng, mode)
        c = pyramid(widths, 8, 2)
        r = np.random.default_rng(3)
        weights = [r.normal(size=(2, 8 >> k, 8 >> k)) for k in range(4)] + [r.normal(size=(2, 1, 1))]

        def fn(c2, c3, c4, c5):
            cc = BackbonePyramid(c2, c3, c4, c5)
            out = bottom_up_refine(cc, top_down(cc, td), a3, a4, bu)
            total = None
            for lv, w in zip(out.levels(), weights):
                term = tsum(mul(lv, w))
                total = term if total is None else total + term
            return total

        rep = grad_check(fn, c.levels())
        assert rep.passed(1e-3), rep.worst
