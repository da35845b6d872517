import hashlib

import numpy as np
import pytest

from eldetect.backbone import Backbone, BackboneConfig, extract_pyramid
from eldetect.tensor import ContractError, Tensor, grad_check, mul, tsum

# sum of C2..C5 for seed-123 weights on the seed-7 image, recorded from the first verified run
GOLDEN_SUM = 2635.6281900045665


def small_net(seed=0, **kw) -> Backbone:
    cfg = BackboneConfig(stem_channels=4, widths=(4, 4, 6, 8), blocks_per_stage=1, **kw)
    return Backbone(cfg, np.random.default_rng(seed))


class TestConfig:
    def test_defaults(self):
        cfg = BackboneConfig()
        assert cfg.widths == (32, 64, 128, 256) and cfg.in_channels == 1 and cfg.input_size == 128

    @pytest.mark.parametrize("kw", [{"widths": (1, 2, 3)}, {"widths": (1, 2, 0, 4)}, {"input_size": 100}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            BackboneConfig(**kw)


class TestExtractPyramid:
    def test_strides_64(self):
        net = Backbone(BackboneConfig(), np.random.default_rng(0))
        c = extract_pyramid(Tensor(np.random.default_rng(1).normal(size=(1, 64, 64))), net)
        assert [lv.shape for lv in c.levels()] == [(32, 16, 16), (64, 8, 8), (128, 4, 4), (256, 2, 2)]

    @pytest.mark.parametrize("h,w", [(32, 32), (64, 96), (128, 128)])
    def test_halving_chain(self, h, w):
        c = small_net()(Tensor(np.zeros((1, h, w))))
        extents = [lv.shape[1:] for lv in c.levels()]
        assert extents[0] == (h // 4, w // 4)
        for big, small in zip(extents, extents[1:]):
            assert small == (big[0] // 2, big[1] // 2)

    def test_zero_image_zero_pyramid(self):
        c = Backbone(BackboneConfig(), np.random.default_rng(0))(Tensor(np.zeros((1, 64, 64))))
        assert all(not lv.data.any() for lv in c.levels())

    def test_three_channel_input(self):
        net = Backbone(BackboneConfig(in_channels=3, stem_channels=4, widths=(4, 4, 4, 4)), np.random.default_rng(0))
        assert net(Tensor(np.ones((3, 32, 32)))).C5.shape == (4, 1, 1)

    @pytest.mark.parametrize("shape", [(1, 48, 64), (1, 64, 40), (2, 64, 64), (64, 64)])
    def test_contract(self, shape):
        with pytest.raises(ContractError):
            small_net()(Tensor(np.zeros(shape)))

    def test_deterministic_golden_checksum(self):
        def digest():
            net = Backbone(BackboneConfig(), np.random.default_rng(123))
            img = np.random.default_rng(7).uniform(-2, 2, size=(1, 64, 64))
            c = net(Tensor(img))
            return hashlib.sha256(b"".join(lv.data.tobytes() for lv in c.levels())).hexdigest()

        assert digest() == digest()
        net = Backbone(BackboneConfig(), np.random.default_rng(123))
        c = net(Tensor(np.random.default_rng(7).uniform(-2, 2, size=(1, 64, 64))))
        assert float(sum(lv.data.sum() for lv in c.levels())) == pytest.approx(GOLDEN_SUM, rel=1e-12)

    def test_parameter_namespace(self):
        names = [n for n, _ in small_net().named_parameters()]
        assert "stem/weight" in names and "stages/2/convs/0/bias" in names


class TestGradients:
    def test_scalar_readout(self):
        net = small_net(3)
        img = Tensor(np.random.default_rng(4).normal(size=(1, 32, 32)))
        w = net.stem.weight
        r = [np.random.default_rng(k).normal(size=lv.shape) for k, lv in enumerate(net(img).levels())]

        def fn(img, w):
            c = net(img)
            return sum((tsum(mul(lv, rr)) for lv, rr in zip(c.levels(), r)), start=Tensor(0.0))

        rep = grad_check(fn, [img, w], max_coords=40, rng=np.random.default_rng(5))
        assert rep.passed(1e-3), rep.worst
