import pytest

from gatedlexnet.config import ConfigError, RunConfig


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.attention.lam == 1.0
        assert cfg.attention.max_line_length == 30
        assert cfg.train.optimizer == "sgd"
        assert cfg.precision == "float64"

    def test_dump_load_round_trip(self):
        cfg = RunConfig()
        cfg.encoder.cb_channels = [4, 8, 8, 8]
        cfg.train.lr = 3e-4
        cfg.data.lines_max = 2
        cfg.augment.contrast_range = (0.5, 1.5)
        assert RunConfig.loads(cfg.dumps()) == cfg

    def test_dict_round_trip(self):
        cfg = RunConfig()
        cfg.encoder.gated_placement = "late"
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    def test_comments_and_blank_lines(self):
        cfg = RunConfig.loads("# toy run\n\ntrain.lr = 0.5  # fast\nencoder.gated_placement = late\n")
        assert cfg.train.lr == 0.5
        assert cfg.encoder.gated_placement == "late"

    def test_int_promoted_to_float(self):
        assert RunConfig.loads("train.lr = 1").train.lr == 1.0

    def test_boolean_spellings(self):
        assert RunConfig.loads("train.augment = true").train.augment is True
        assert RunConfig.loads("encoder.gated_norm = False").encoder.gated_norm is False

    def test_hash_inside_quotes_kept(self):
        assert RunConfig.loads("lexdecode.mode = 'words'  # comment").lexdecode.mode == "words"

    @pytest.mark.parametrize(
        "text, line, key",
        [
            ("train.lr = 0.1\ntrain.momentum = 0.9\n", 2, "train.momentum"),
            ("\n\nbogus = 1\n", 3, "bogus"),
            ("precision.x = 1\n", 1, "precision.x"),
        ],
    )
    def test_unknown_key_names_line(self, text, line, key):
        with pytest.raises(ConfigError, match=rf"<config>:{line}: unknown key '{key}'"):
            RunConfig.loads(text)

    def test_bad_type_names_key_and_line(self):
        with pytest.raises(ConfigError, match=r"cfg.txt:2: train.iterations expects int"):
            RunConfig.loads("train.lr = 0.1\ntrain.iterations = many\n", "cfg.txt")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match=":1: expected key = value"):
            RunConfig.loads("train.lr 0.1\n")

    def test_invalid_section_value(self):
        with pytest.raises(ConfigError, match=r":1: invalid lexdecode section"):
            RunConfig.loads("lexdecode.mode = 'trigrams'\n")
        with pytest.raises(ConfigError, match=r":2: invalid encoder section"):
            RunConfig.loads("train.lr = 1.0\nencoder.gated_placement = middle\n")

    def test_precision_checked(self):
        with pytest.raises(ConfigError, match="precision"):
            RunConfig.loads("precision = float16\n")

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("train.seed = 9\n")
        assert RunConfig.load(path).train.seed == 9
        path.write_text("train.sed = 9\n")
        with pytest.raises(ConfigError, match=rf"{path.name}:1: unknown key 'train.sed'"):
            RunConfig.load(path)
