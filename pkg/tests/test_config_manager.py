#!/usr/bin/env python3
"""
Tests for the configuration manager.
"""

import json
import logging

import pytest

from core.config_manager import DEFAULT_CONFIG, ConfigManager, worker_count


def test_defaults_without_file(temp_config_dir):
    config = ConfigManager(temp_config_dir)
    assert config.config == DEFAULT_CONFIG
    assert config.get("grid_points") == 2048
    assert config.get("missing", "fallback") == "fallback"


def test_env_dir_is_used(temp_config_dir):
    config = ConfigManager()
    assert config.config_dir == temp_config_dir


def test_file_merges_over_defaults(temp_config_dir):
    (temp_config_dir / "config.json").write_text(json.dumps({"grid_points": 512, "seed": 9}))
    config = ConfigManager(temp_config_dir)
    assert config.get("grid_points") == 512
    assert config.get("seed") == 9
    assert config.get("root_tol_x") == DEFAULT_CONFIG["root_tol_x"]


def test_unknown_keys_warned(temp_config_dir, caplog):
    (temp_config_dir / "config.json").write_text(json.dumps({"model": "base", "seed": 3}))
    with caplog.at_level(logging.WARNING, logger="core.config_manager"):
        config = ConfigManager(temp_config_dir)
    assert "model" not in config.config
    assert config.get("seed") == 3
    assert "unknown config keys: model" in caplog.text


@pytest.mark.parametrize("content", ["{not json", "[1, 2]"])
def test_bad_file_falls_back(temp_config_dir, caplog, content):
    (temp_config_dir / "config.json").write_text(content)
    with caplog.at_level(logging.WARNING, logger="core.config_manager"):
        config = ConfigManager(temp_config_dir)
    assert config.config == DEFAULT_CONFIG
    assert "using defaults" in caplog.text


def test_set_and_save(temp_config_dir):
    config = ConfigManager(temp_config_dir)
    config.set("basis_size", 5)
    assert config.save_config()
    assert ConfigManager(temp_config_dir).get("basis_size") == 5


def test_set_unknown_key(temp_config_dir):
    with pytest.raises(KeyError):
        ConfigManager(temp_config_dir).set("language", "zh")


def test_log_level(temp_config_dir):
    config = ConfigManager(temp_config_dir)
    assert config.log_level() == logging.WARNING
    config.set("log_level", "debug")
    assert config.log_level() == logging.DEBUG


class TestWorkerCount:
    def test_configured(self, temp_config_dir):
        assert worker_count(3) == 3
        assert worker_count() == 1

    def test_env_override(self, temp_config_dir, monkeypatch):
        monkeypatch.setenv("PSIFRAC_THREADS", "4")
        assert worker_count(2) == 4
        assert ConfigManager(temp_config_dir).worker_count() == 4

    def test_zero_means_all_cpus(self, temp_config_dir, monkeypatch):
        monkeypatch.setattr("core.config_manager.os.cpu_count", lambda: 6)
        assert worker_count(0) == 6

    def test_bad_env_ignored(self, temp_config_dir, monkeypatch, caplog):
        monkeypatch.setenv("PSIFRAC_THREADS", "many")
        with caplog.at_level(logging.WARNING, logger="core.config_manager"):
            assert worker_count(2) == 2
        assert "PSIFRAC_THREADS" in caplog.text
