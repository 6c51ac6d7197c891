import numpy as np
import pytest

from netspectra.config import SCHEMA, ConfigError, derive_seed, load_config, parse_config

MINIMAL = "[network]\ndims = 20, 30, 10\n"


class TestParse:
    def test_defaults(self):
        cfg = parse_config(MINIMAL)
        assert cfg.get("network", "dims") == (20, 30, 10)
        assert cfg.get("train", "lr") == 0.01
        assert cfg.get("forget", "lambda_cf") == 1000.0
        assert set(cfg.values) == set(SCHEMA)

    def test_typed_values(self):
        cfg = parse_config(
            MINIMAL
            + "[train]\nschedule = piecewise\npoints = 10:0.01, 20:0.001\nrecord = 5\ntrainable = last\n"
            + "[forget]\nhessian_budget = 0.2\nsingular_budget = outliers\nmethods = none sv-loss\n"
        )
        assert cfg.get("train", "points") == ((10, 0.01), (20, 0.001))
        assert cfg.get("train", "record") == 5
        assert cfg.get("train", "trainable") == "last"
        assert cfg.get("forget", "hessian_budget") == 0.2
        assert cfg.get("forget", "singular_budget") == "outliers"
        assert cfg.get("forget", "methods") == ("none", "sv-loss")

    def test_record_none(self):
        assert parse_config(MINIMAL + "[train]\nrecord = none\n").get("train", "record") is None

    def test_unknown_key_line(self):
        with pytest.raises(ConfigError, match=r"<config>:4: unknown key 'learning_rate'"):
            parse_config(MINIMAL + "[train]\nlearning_rate = 0.1\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match=r":3: unknown section \[optim\]"):
            parse_config(MINIMAL + "[optim]\nlr = 1\n")

    def test_bad_value_names_key(self):
        with pytest.raises(ConfigError, match=r":4: bad value for train.epochs"):
            parse_config(MINIMAL + "[train]\nepochs = many\n")

    def test_bad_choice(self):
        with pytest.raises(ConfigError, match="schedule"):
            parse_config(MINIMAL + "[train]\nschedule = cosine\n")

    def test_missing_dims(self):
        with pytest.raises(ConfigError, match="network.dims"):
            parse_config("[run]\nseed = 1\n")

    def test_idx_needs_paths(self):
        with pytest.raises(ConfigError, match="data.train_images"):
            parse_config(MINIMAL + "[data]\nsource = idx\ntrain_labels = x\n")

    def test_syntax_error(self):
        with pytest.raises(ConfigError):
            parse_config("dims = 1\n")

    def test_echo_is_plain(self):
        echo = parse_config(MINIMAL).echo()
        assert echo["network"]["dims"] == [20, 30, 10]


class TestLoad:
    def test_path_in_messages(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text(MINIMAL + "[train]\nbogus = 1\n")
        with pytest.raises(ConfigError, match=f"{path}:4"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "absent.ini")


class TestDeriveSeed:
    def test_stable_and_distinct(self):
        assert derive_seed(3, "data") == derive_seed(3, "data")
        seeds = {derive_seed(3, label) for label in ("data", "init", "shuffle", "lanczos")}
        assert len(seeds) == 4
        assert derive_seed(3, "data") != derive_seed(4, "data")

    def test_usable_as_generator_seed(self):
        np.random.default_rng(derive_seed(0, "init")).normal()
