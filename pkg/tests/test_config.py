"""Run configuration: TOML parsing, overrides, validation, hashing."""

import pytest

from crackseq.config import (ConfigError, RunConfig, config_hash, load_config,
                             parse_overrides)


class TestLoadConfig:
    def test_defaults_are_valid(self):
        assert load_config() == RunConfig()

    def test_reads_toml_file(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text(
            'learning_rate = 0.5\nt_window = 3\nwavelet_basis = "db2"\n'
            "float64 = true\n"
        )
        config = load_config(path)
        assert config.learning_rate == 0.5
        assert config.t_window == 3
        assert config.wavelet_basis == "db2"
        assert config.float64 is True
        assert config.channels == RunConfig().channels  # untouched default

    def test_overrides_win_over_file(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("epochs = 9\n")
        config = load_config(path, overrides=["epochs=2", "seed=7"])
        assert config.epochs == 2
        assert config.seed == 7

    def test_override_bare_string_fallback(self):
        # db2 is not valid TOML without quotes; the fallback keeps it.
        config = load_config(overrides=["wavelet_basis=db2"])
        assert config.wavelet_basis == "db2"

    def test_override_boolean_and_float(self):
        values = parse_overrides(["float64=true", "learning_rate=1e-3"])
        assert values == {"float64": True, "learning_rate": 1e-3}

    def test_malformed_override(self):
        with pytest.raises(ConfigError, match="key=value"):
            parse_overrides(["learning_rate"])

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("learnig_rate = 0.5\n")
        with pytest.raises(ConfigError, match="unknown config keys"):
            load_config(path)

    def test_tables_rejected(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("[optimizer]\nlearning_rate = 0.5\n")
        with pytest.raises(ConfigError, match="unknown config keys"):
            load_config(path)

    def test_bad_toml_syntax(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("epochs = = 3\n")
        with pytest.raises(ConfigError, match="cannot parse config"):
            load_config(path)

    @pytest.mark.parametrize("line, message", [
        ('learning_rate = "fast"', "must be a number"),
        ("epochs = 2.5", "must be an integer"),
        ("float64 = 1", "must be a boolean"),
        ("train_annotations = 3", "must be a string"),
    ])
    def test_type_errors(self, tmp_path, line, message):
        path = tmp_path / "run.toml"
        path.write_text(line + "\n")
        with pytest.raises(ConfigError, match=message):
            load_config(path)


class TestValidation:
    @pytest.mark.parametrize("override, message", [
        ("epochs=0", "must be positive"),
        ("t_window=0", "must be positive"),
        ("learning_rate=-0.1", "must be >= 0"),
        ("focal_alpha=1.5", r"must be in \[0, 1\]"),
        ("nms_iou=0.0", r"must be in \(0, 1\]"),
        ("match_iou=1.5", r"must be in \(0, 1\]"),
        ("input_size=50", "divisible by stride"),
        ("wavelet_basis=fourier", "wavelet_basis must be one of"),
        ("wavelet_kernel=4", "must be odd"),
    ])
    def test_range_errors(self, override, message):
        with pytest.raises(ConfigError, match=message):
            load_config(overrides=[override])


class TestHash:
    def test_stable_and_sensitive(self):
        a = RunConfig()
        b = RunConfig()
        assert config_hash(a) == config_hash(b)
        assert len(config_hash(a)) == 12
        int(config_hash(a), 16)  # hex digest
        c = RunConfig(seed=1)
        assert config_hash(c) != config_hash(a)
