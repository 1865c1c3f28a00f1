import pytest

from unest.config import (
    ModelConfig,
    TrainConfig,
    dump_kv,
    load_configs,
    micro_config,
    model_config_from_dict,
    model_config_to_dict,
    read_kv,
    scale_config,
)


class TestScales:
    @pytest.mark.parametrize(
        "scale,depths,heads,widths",
        [
            ("S", (2, 2, 8), (2, 4, 8), (64, 128, 256)),
            ("B", (2, 2, 8), (4, 8, 16), (128, 256, 512)),
            ("L", (2, 2, 20), (6, 12, 24), (192, 384, 768)),
        ],
    )
    def test_hyperparameters(self, scale, depths, heads, widths):
        cfg = scale_config(scale)
        assert (cfg.depths, cfg.heads, cfg.widths, cfg.patch) == (depths, heads, widths, (4, 4, 4))

    def test_unknown_scale(self):
        with pytest.raises(KeyError):
            scale_config("XL")

    def test_decoder_widths(self):
        assert scale_config("B").resolved_decoder_widths() == (512, 256, 128, 64, 32)


class TestFiles:
    def test_precedence_and_comments(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("# micro run\nscale = micro\nclasses = 3   # three labels\npeak_lr = 0.002\nwindow = 32,32,32\n")
        model, train = load_configs(read_kv(path))
        assert model.classes == 3 and model.widths == (8, 16, 32) and model.window == (32, 32, 32)
        assert train.peak_lr == 0.002 and train.window == (32, 32, 32)
        assert train.weight_decay == TrainConfig().weight_decay

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown config keys: colour"):
            load_configs({"colour": "red"})

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("classes 3\n")
        with pytest.raises(ValueError, match="key = value"):
            read_kv(path)

    def test_dump_roundtrip(self, tmp_path):
        model, train = micro_config(classes=4, block_aggregation=False), TrainConfig(total_steps=9, warmup_steps=3)
        path = tmp_path / "c.txt"
        path.write_text(dump_kv(model, train))
        m2, t2 = load_configs(read_kv(path))
        assert m2 == model and t2.total_steps == 9 and t2.warmup_steps == 3

    def test_dict_roundtrip(self):
        cfg = ModelConfig(decoder_widths=(64, 32, 16, 8, 4, 2))
        assert model_config_from_dict(model_config_to_dict(cfg)) == cfg
