import numpy as np
import pytest

from unest.config import GeometryError, micro_config
from unest.decoder import ConvDecoder, ImageSkip, ResidualBlock, UpStage
from unest.tensor import Tensor, no_grad


def rng():
    return np.random.default_rng(0)


class TestResidualBlock:
    def test_identity_shortcut_when_widths_match(self):
        assert ResidualBlock(4, 4, rng()).shortcut is None
        assert ResidualBlock(4, 6, rng()).shortcut is not None

    def test_shape(self):
        out = ResidualBlock(3, 5, rng())(Tensor(np.random.default_rng(1).normal(size=(2, 3, 4, 4, 4))))
        assert out.shape == (2, 5, 4, 4, 4)

    def test_channel_check(self):
        with pytest.raises(GeometryError, match="channels"):
            ResidualBlock(3, 5, rng())(Tensor(np.zeros((1, 4, 2, 2, 2))))


class TestStages:
    def test_upstage_doubles_extent(self):
        stage = UpStage(8, 4, rng())
        out = stage(Tensor(np.ones((1, 8, 2, 3, 2))), Tensor(np.ones((1, 4, 4, 6, 4))))
        assert out.shape == (1, 4, 4, 6, 4)

    def test_upstage_skip_mismatch(self):
        stage = UpStage(8, 4, rng())
        with pytest.raises(GeometryError, match="skip"):
            stage(Tensor(np.ones((1, 8, 2, 2, 2))), Tensor(np.ones((1, 4, 8, 8, 8))))

    @pytest.mark.parametrize("level,extent", [(0, 8), (1, 4), (2, 2)])
    def test_image_skip_resolution(self, level, extent):
        skip = ImageSkip(1, 3, level, rng())
        assert skip(Tensor(np.ones((1, 1, 8, 8, 8)))).shape == (1, 3, extent, extent, extent)


class TestConvDecoder:
    def test_stage_count_and_widths(self):
        cfg = micro_config()
        dec = ConvDecoder(cfg, rng())
        assert cfg.upsample_stages == 3
        assert cfg.resolved_decoder_widths() == (32, 16, 8, 4)
        assert len(dec.stages) == 3 and len(dec.hierarchy_skips) == 2 and len(dec.image_skips) == 1

    def test_patch_four_adds_two_image_skips(self):
        cfg = micro_config(patch=(4, 4, 4), window=(32, 32, 32))
        dec = ConvDecoder(cfg, rng())
        assert len(dec.image_skips) == 2
        assert [s.stride for s in dec.image_skips] == [2, 1]

    def test_forward_shape(self):
        cfg = micro_config(classes=4)
        dec = ConvDecoder(cfg, rng())
        image = Tensor(np.ones((1, 1, 16, 16, 16)))
        skips = [Tensor(np.ones((1, 8, 8, 8, 8))), Tensor(np.ones((1, 16, 4, 4, 4)))]
        with no_grad():
            out = dec(image, skips, Tensor(np.ones((1, 32, 2, 2, 2))))
        assert out.shape == (1, 4, 16, 16, 16)

    def test_bad_skip_names_stage(self):
        cfg = micro_config()
        dec = ConvDecoder(cfg, rng())
        image = Tensor(np.ones((1, 1, 16, 16, 16)))
        skips = [Tensor(np.ones((1, 8, 8, 8, 8))), Tensor(np.ones((1, 16, 6, 6, 6)))]
        with pytest.raises(GeometryError, match="stage 0"):
            dec(image, skips, Tensor(np.ones((1, 32, 2, 2, 2))))

    def test_skip_count_checked(self):
        dec = ConvDecoder(micro_config(), rng())
        with pytest.raises(GeometryError, match="hierarchy skips"):
            dec(Tensor(np.ones((1, 1, 16, 16, 16))), [], Tensor(np.ones((1, 32, 2, 2, 2))))
