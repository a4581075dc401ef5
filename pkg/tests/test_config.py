import numpy as np
import pytest

from fmcw_odom.config import PipelineConfig, from_mapping, load_config
from fmcw_odom.errors import ConfigError


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text("")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg == PipelineConfig()
    assert load_config() == PipelineConfig()


def test_defaults_carry_the_published_constants():
    cfg = PipelineConfig()
    assert cfg.azimuth_bin_deg == 0.2 and cfg.num_beam_rows == 80
    assert cfg.ransac_threshold_mps == 0.2 and cfg.ransac_iterations == 20
    assert cfg.stationary_threshold_mps == 0.03 and cfg.integrator_steps == 100
    assert cfg.mode == "filter" and cfg.threads == 1
    assert cfg.grid().shape == (80, 600)


@pytest.mark.parametrize("text", [
    "ransac_threshold_mps: -1\n",
    "ransac_iterations: 0\n",
    "mode: smoother\n",
    "qc_diag: [1, 1, 1, 1, 1, -1]\n",
    "qz_diag: [1, 1, 0, 1]\n",
    "r_doppler: 0\n",
    "qc_diag: [1, 2, 3]\n",
    "lidar_rotation_rpy_deg: [0, 0]\n",
    "integrator_steps: 2.5\n",
    "use_gyro: 1\n",
    "doppler_sign: 2\n",
    "sim_outlier_fraction: 1.2\n",
    "sim_trajectory: spiral\n",
    "azimuth_min_deg: 10\nazimuth_max_deg: -10\n",
    "sequence_dir: does/not/exist\n",
    "not_a_key: 3\n",
    "- a\n- b\n",
    "key: [unclosed\n",
])
def test_invalid_configs_rejected(tmp_path, text):
    (tmp_path / "c.yaml").write_text(text)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.yaml")


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.yaml")


def test_relative_paths_resolve_against_the_file(tmp_path):
    (tmp_path / "seq").mkdir()
    (tmp_path / "c.yaml").write_text("sequence_dir: seq\nintegrator_steps: 10\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.sequence_dir == str(tmp_path / "seq")
    assert cfg.integrator().steps == 10


def test_overrides_win_and_none_is_ignored(tmp_path):
    (tmp_path / "c.yaml").write_text("mode: batch\nransac_seed: 3\n")
    cfg = load_config(tmp_path / "c.yaml", mode=None, ransac_seed=9)
    assert cfg.mode == "batch" and cfg.ransac_seed == 9


def test_module_configs_built_from_keys():
    cfg = from_mapping({"qc_diag": [2, 2, 2, 1, 1, 1], "r_doppler": 0.04, "ransac_seed": 5,
                        "lidar_position": [1, 2, 3], "lidar_rotation_rpy_deg": [0, 0, 90],
                        "gyro_rotation_rpy_deg": [0, 0, 0], "gyro_position": [0, 0, 1]})
    assert np.allclose(np.diag(cfg.noise().q_c), [2, 2, 2, 1, 1, 1])
    assert cfg.noise().r_dop == 0.04 and cfg.ransac().seed == 5
    assert np.allclose(cfg.lidar_extrinsics().r_v, [1, 2, 3])
    assert np.allclose(cfg.lidar_extrinsics().R_sv @ [0, 1, 0], [1, 0, 0], atol=1e-12)
    assert np.allclose(cfg.gyro_extrinsics().R_sv, np.eye(3))
    assert np.allclose(PipelineConfig().gyro_extrinsics().R_sv, PipelineConfig().lidar_extrinsics().R_sv)


def test_snapshot_round_trips():
    cfg = PipelineConfig(mode="batch", integrator_steps=7)
    assert from_mapping(cfg.snapshot()) == cfg


def test_replace_rejects_unknown():
    with pytest.raises(ConfigError):
        PipelineConfig().replace(bogus=1)
    assert PipelineConfig().replace(mode="batch").mode == "batch"


def test_sim_config_mapping(tmp_path):
    cfg = PipelineConfig(sim_duration=3.0, sim_trajectory="constant", sim_seed=4, azimuth_bin_deg=1.0)
    sc = cfg.sim_config()
    assert sc.duration == 3.0 and sc.trajectory == "constant" and sc.seed == 4
    assert sc.grid.shape == (80, 120)
