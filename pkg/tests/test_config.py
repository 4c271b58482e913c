"""
Tests for engine configuration loading, environment overrides and schemas
"""

import pytest

from config.config import ConfigLoader, ConfigValidator


class TestConfigLoader:
    """ConfigLoader"""

    def test_engine_defaults(self):
        config = ConfigLoader("dev").load_engine_config()
        assert config["project"]["version"] == "1.0.0"
        assert config["logging"]["level"] == "INFO"
        assert config["engine"]["archive"]["format_version"] == 1

    def test_prod_override(self, monkeypatch):
        """prod raises the log level and reads threads from the environment"""
        monkeypatch.delenv("LGMJOINT_THREADS", raising=False)
        config = ConfigLoader("prod").load_engine_config()
        assert config["logging"]["level"] == "WARNING"
        assert config["engine"]["controls"]["threads"] is None
        assert config["engine"]["controls"]["tolerance"] > 0

    def test_prod_threads_from_environment(self, monkeypatch):
        monkeypatch.setenv("LGMJOINT_THREADS", "4")
        assert ConfigLoader("prod").control_defaults()["threads"] == "4"

    def test_environment_variable_selects_file(self, monkeypatch):
        monkeypatch.setenv("LGMJOINT_ENVIRONMENT", "prod")
        assert ConfigLoader().environment == "prod"

    def test_cached(self):
        loader = ConfigLoader("dev")
        assert loader.load_engine_config() is loader.load_engine_config()

    def test_missing_config(self):
        with pytest.raises(FileNotFoundError):
            ConfigLoader("dev").load_config("absent")

    def test_bundled_model_documents(self):
        loader = ConfigLoader("dev")
        assert '"longitudinal"' in loader.model_document("example1")
        with pytest.raises(FileNotFoundError):
            loader.model_document("example9")

    def test_schema_errors_have_locations(self):
        errors = ConfigLoader("dev").schema_errors({"n_subjects": 0}, "scenario")
        assert any(e.startswith("n_subjects:") for e in errors)
        assert any(e.startswith("<root>:") for e in errors)

    def test_deep_merge(self):
        merged = ConfigLoader("dev").deep_merge({"a": {"b": 1, "c": 2}, "d": 3}, {"a": {"b": 5}, "e": 6})
        assert merged == {"a": {"b": 5, "c": 2}, "d": 3, "e": 6}

    def test_merged_controls_keep_nested_defaults(self):
        loader = ConfigLoader("dev")
        merged = loader.merged_controls({"prior_fixed": {"prec": 1e-8}, "tolerance": 1e-8})
        assert merged["prior_fixed"]["prec"] == 1e-8
        assert merged["prior_fixed"]["mean_intercept"] == loader.control_defaults()["prior_fixed"]["mean_intercept"]
        assert merged["tolerance"] == 1e-8
        assert merged["rw_jitter"] == loader.control_defaults()["rw_jitter"]
        assert loader.merged_controls() == loader.control_defaults()


class TestConfigValidator:
    """Static value checks"""

    def test_cutpoints(self):
        assert ConfigValidator.validate_cutpoints([0.0, 1.0, 2.5])
        assert not ConfigValidator.validate_cutpoints([0.0, 2.0, 2.0])
        assert not ConfigValidator.validate_cutpoints([-1.0, 2.0])

    def test_names(self):
        assert ConfigValidator.validate_baseline("rw2")
        assert not ConfigValidator.validate_baseline("gompertz")
        assert ConfigValidator.validate_strategy("grid")

    def test_positive(self):
        assert ConfigValidator.validate_positive(1e-9)
        assert not ConfigValidator.validate_positive(0)
        assert not ConfigValidator.validate_positive(None)
