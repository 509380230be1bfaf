import pytest

from samfed.config import ExperimentConfig, dump_config, load_config, parse_config
from samfed.errors import ConfigError


def test_defaults_validate():
    cfg = ExperimentConfig().validate()
    assert cfg.client_configs()[0].base_channels < cfg.teacher_config.base_channels


def test_parse_overrides_and_comments():
    cfg = parse_config("""
        # comment line
        mode = heterogeneous   # trailing comment
        rounds = 3
        client_channels = 3, 3, 4, 4
        beta = 0.25
        styles = blob, ring
    """)
    assert cfg.mode == "heterogeneous" and cfg.rounds == 3 and cfg.beta == 0.25
    assert cfg.client_channels == (3, 3, 4, 4) and cfg.styles == ("blob", "ring")


def test_dump_parse_round_trip():
    cfg = ExperimentConfig(rounds=4, lr=0.02, lora_targets=("dec1.c2", "head"))
    assert parse_config(dump_config(cfg)) == cfg


@pytest.mark.parametrize("text", [
    "nonsense = 1",
    "rounds = many",
    "rounds 3",
    "mode = sideways",
    "client_channels = 4, 8, 4, 4",  # homogeneous needs identical clients
    "client_counts = 10, 20",
    "image_size = 30",
    "num_classes = 3",
    "noniid_skew = 2",
    "lora_dropout = 1.0",
    "styles = triangle",
])
def test_parse_rejects(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_large_adapter_hyperparameters_accepted():
    cfg = parse_config("lora_rank = 16\nlora_alpha = 32\nlora_dropout = 0.1\nlora_targets = all")
    assert (cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout) == (16, 32.0, 0.1)


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")
