import json
from pathlib import Path

import pytest

from coisac.config import config_from_dict, dump_resolved, load_config, paper_scene
from coisac.errors import ConfigError

from conftest import scene_dict

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_paper_scene_file():
    cfg = load_config(CONFIGS / "paper_scene.toml")
    assert (cfg.ofdm.n_subcarriers, cfg.ofdm.n_symbols) == (36, 64)
    assert (cfg.array.n_tx, cfg.array.n_rx) == (8, 8)
    assert [s.position_m for s in cfg.stations] == [(0.0, 0.0), (100.0, 100.0), (50.0, 100.0)]
    assert cfg.tx_power_w == 5.0
    assert cfg.stations == paper_scene().stations


def test_tiny_oracle_file():
    cfg = load_config(CONFIGS / "tiny_oracle.toml")
    assert cfg.ofdm.n_subcarriers == cfg.ofdm.n_symbols == 2
    assert cfg.array.n_rx <= 2 and len(cfg.stations) == 2
    assert cfg.oracle.xi_points <= 5 and cfg.oracle.alpha_points <= 5


def test_missing_trial_count_filled(tmp_path):
    cfg = config_from_dict(scene_dict())
    assert cfg.n_trials == 100
    assert "n_trials" in cfg.defaults_filled
    out = tmp_path / "resolved.json"
    dump_resolved(cfg, out)
    resolved = json.loads(out.read_text())
    assert resolved["config"]["n_trials"] == 100
    assert "n_trials" in resolved["defaults_filled"]


def test_negative_noise_variance_names_field():
    with pytest.raises(ConfigError) as exc:
        config_from_dict(scene_dict(noise_variance=-1.0))
    assert exc.value.field == "noise_variance"


def test_unknown_key_rejected():
    with pytest.raises(ConfigError) as exc:
        config_from_dict(scene_dict(bogus=1))
    assert "bogus" in str(exc.value)


def test_unknown_section_key_rejected():
    raw = scene_dict()
    raw["ofdm"]["n_carriers"] = 4
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_snr_list_strictly_increasing():
    with pytest.raises(ConfigError) as exc:
        config_from_dict(scene_dict(snr_db=[0.0, 0.0, 5.0]))
    assert exc.value.field == "snr_db"


def test_zero_trials_rejected():
    with pytest.raises(ConfigError):
        config_from_dict(scene_dict(n_trials=0))


def test_no_stations_rejected():
    raw = scene_dict()
    raw["stations"] = []
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert exc.value.field == "stations"


def test_parse_error_has_line(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("seed = 1\nn_trials = \n")
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    assert exc.value.line == 2


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError) as exc:
        load_config(tmp_path / "nope.toml")
    assert "nope.toml" in str(exc.value)


def test_hgamp_section_validation():
    with pytest.raises(ConfigError):
        config_from_dict(scene_dict(hgamp={"damping": 1.5}))
    cfg = config_from_dict(scene_dict(hgamp={"damping": 0.5}))
    assert cfg.hgamp.damping == 0.5


def test_replace_revalidates():
    cfg = paper_scene()
    assert cfg.replace(n_trials=7).n_trials == 7
    with pytest.raises(ConfigError):
        cfg.replace(n_trials=0)
