from .config import ConfigError, ExperimentSpec, load_config, parse_config

__all__ = ["ConfigError", "ExperimentSpec", "load_config", "parse_config"]
