"""
lgmjoint Configuration Management

Engine defaults (control values, prediction and oracle settings, logging)
live in config/engine.json. The file named after the active environment
(dev.json, prod.json) is layered on top, "${VAR}" placeholders are filled
from the process environment and the result is checked against
config/schemas/<name>.schema.json when such a schema exists.
"""

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import jsonschema

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).parent


@dataclass(frozen=True)
class ConfigPaths:
    """Where engine settings, bundled models and schemas are kept"""
    root: Path = CONFIG_DIR
    models: Path = CONFIG_DIR / "models"
    schemas: Path = CONFIG_DIR / "schemas"

    def settings(self, name: str) -> Path:
        return self.root / f"{name}.json"

    def schema(self, name: str) -> Path:
        return self.schemas / f"{name}.schema.json"

    def model(self, name: str) -> Path:
        return self.models / f"{name}.json"


def _read_json(path: Path) -> Dict[str, Any]:
    with path.open(encoding="utf-8") as handle:
        return json.load(handle)


class ConfigLoader:
    """
    Layered engine settings for one environment.

    The environment comes from the constructor, then LGMJOINT_ENVIRONMENT,
    then falls back to "dev". Loaded settings are cached per name.
    """

    def __init__(self, environment: Optional[str] = None):
        self.environment = environment or os.getenv("LGMJOINT_ENVIRONMENT", "dev")
        self.paths = ConfigPaths()
        self._settings: Dict[str, Dict[str, Any]] = {}
        self._schemas: Dict[str, Dict[str, Any]] = {}

    def load_config(self, config_name: str, validate_schema: bool = True) -> Dict[str, Any]:
        """
        Settings file merged with the environment overlay.

        Args:
            config_name: file stem under config/, e.g. "engine"
            validate_schema: check the merged settings against their schema

        Raises:
            FileNotFoundError: no config/<config_name>.json
            jsonschema.ValidationError: merged settings break the schema
        """
        if config_name in self._settings:
            return self._settings[config_name]

        source = self.paths.settings(config_name)
        if not source.exists():
            raise FileNotFoundError(f"Configuration file not found: {source}")
        merged = _read_json(source)

        overlay = self.paths.settings(self.environment)
        if overlay.exists():
            merged = self.deep_merge(merged, _read_json(overlay))
        else:
            logger.debug(f"No overlay for environment {self.environment}")

        if validate_schema:
            self.validate(merged, config_name)
        merged = self._resolve_env_vars(merged)

        self._settings[config_name] = merged
        logger.info(f"Loaded {config_name} settings (environment={self.environment})")
        return merged

    def load_engine_config(self) -> Dict[str, Any]:
        return self.load_config("engine")

    def control_defaults(self) -> Dict[str, Any]:
        """Default ControlOptions values"""
        return self.load_engine_config()["engine"]["controls"]

    def merged_controls(self, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """Control defaults with per-model overrides merged on top"""
        return self.deep_merge(self.control_defaults(), dict(overrides or {}))

    def predict_defaults(self) -> Dict[str, Any]:
        return self.load_engine_config()["engine"]["predict"]

    def oracle_defaults(self) -> Dict[str, Any]:
        return self.load_engine_config()["engine"]["oracle"]

    def model_document(self, name: str) -> str:
        """Raw text of a bundled model document under config/models"""
        path = self.paths.model(name)
        if not path.exists():
            raise FileNotFoundError(f"Model document not found: {path}")
        return path.read_text(encoding="utf-8")

    def schema(self, schema_name: str) -> Dict[str, Any]:
        if schema_name not in self._schemas:
            self._schemas[schema_name] = _read_json(self.paths.schema(schema_name))
        return self._schemas[schema_name]

    def validate(self, document: Dict[str, Any], schema_name: str) -> None:
        """Raise jsonschema.ValidationError on the first violation; no schema means no check"""
        if not self.paths.schema(schema_name).exists():
            logger.warning(f"No {schema_name} schema under {self.paths.schemas}, skipping validation")
            return
        try:
            jsonschema.validate(document, self.schema(schema_name))
        except jsonschema.ValidationError as exc:
            logger.error(f"{schema_name} settings rejected by schema: {exc.message}")
            raise

    def schema_errors(self, document: Dict[str, Any], schema_name: str) -> List[str]:
        """Every violation as "<path>: <message>", ordered by path"""
        validator = jsonschema.Draft7Validator(self.schema(schema_name))
        found = sorted(validator.iter_errors(document), key=lambda e: list(e.path))
        return [f"{'/'.join(str(p) for p in e.path) or '<root>'}: {e.message}" for e in found]

    @staticmethod
    def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
        """Nested dicts merge key by key; any other override value replaces the base"""
        merged = dict(base)
        for key, value in override.items():
            current = merged.get(key)
            if isinstance(current, dict) and isinstance(value, dict):
                merged[key] = ConfigLoader.deep_merge(current, value)
            else:
                merged[key] = value
        return merged

    @staticmethod
    def _resolve_env_vars(node: Any) -> Any:
        """Replace "${VAR}" strings by the variable's value, or None when unset"""
        if isinstance(node, dict):
            return {key: ConfigLoader._resolve_env_vars(value) for key, value in node.items()}
        if isinstance(node, list):
            return [ConfigLoader._resolve_env_vars(item) for item in node]
        if isinstance(node, str) and node.startswith("${") and node.endswith("}"):
            name = node[2:-1]
            if name not in os.environ:
                logger.debug(f"Placeholder {name} has no environment value")
            return os.environ.get(name)
        return node


class ConfigValidator:
    """Static checks shared by the model-document parser"""

    BASELINES = ("rw1", "rw2", "exponential", "weibull")
    STRATEGIES = ("eb", "grid")

    @staticmethod
    def validate_baseline(kind: str) -> bool:
        return kind in ConfigValidator.BASELINES

    @staticmethod
    def validate_strategy(strategy: str) -> bool:
        return strategy in ConfigValidator.STRATEGIES

    @staticmethod
    def validate_cutpoints(values) -> bool:
        """Strictly increasing and non-negative"""
        return all(v >= 0 for v in values) and all(b > a for a, b in zip(values, values[1:]))

    @staticmethod
    def validate_positive(value) -> bool:
        return value is not None and value > 0


config_loader = ConfigLoader()
