"""Configuration documents: round trips and validation errors."""
import json

import numpy as np
import pytest

from polycontact import config as cfgm
from polycontact import scenarios
from polycontact.config import ConfigError


class TestBodyDocuments:
    def test_round_trip(self, tmp_path):
        body = scenarios.cube_in_slot_body()
        doc = cfgm.body_to_dict(body)
        path = tmp_path / "body.json"
        path.write_text(json.dumps(doc))
        loaded = cfgm.load_body(path)
        assert loaded.mass == body.mass
        assert np.allclose(loaded.inertia, body.inertia)
        assert len(loaded.actuated) == len(body.actuated)
        assert len(loaded.environment) == len(body.environment)
        assert loaded.pairs == body.pairs
        for a, b in zip(loaded.environment, body.environment):
            assert np.allclose(a.G, b.G)
            assert np.allclose(a.h, b.h)
            assert np.allclose(a.offset_pose.rho, b.offset_pose.rho)

    def test_rows_renormalized_on_load(self):
        doc = {"mass": 1.0, "inertia": [1, 1, 1],
               "actuated": [{"G": [[2, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0],
                                   [0, 0, 1], [0, 0, -1]],
                             "h": [1.0, 0.5, 0.5, 0.5, 0.5, 0.5]}],
               "environment": [{"G": np.vstack([np.eye(3), -np.eye(3)]).tolist(),
                                "h": [0.5] * 6}],
               "pairs": [[0, 0]]}
        body = cfgm.body_from_dict(doc)
        assert np.allclose(np.linalg.norm(body.actuated[0].G, axis=1), 1.0)

    def test_unbounded_shape_rejected(self):
        doc = {"mass": 1.0, "inertia": [1, 1, 1],
               "actuated": [{"G": [[0, 0, 1]], "h": [1.0]}],
               "environment": [{"G": np.vstack([np.eye(3), -np.eye(3)]).tolist(),
                                "h": [0.5] * 6}],
               "pairs": [[0, 0]]}
        with pytest.raises(ConfigError):
            cfgm.body_from_dict(doc)

    def test_missing_field_rejected(self):
        with pytest.raises(ConfigError):
            cfgm.body_from_dict({"mass": 1.0})


class TestScenarioDocuments:
    def test_round_trip(self, tmp_path):
        cfg = scenarios.cube_in_slot_config()
        doc = cfgm.ocp_config_to_dict(cfg)
        path = tmp_path / "ocp.json"
        path.write_text(json.dumps(doc))
        loaded = cfgm.load_ocp_config(path)
        assert loaded.N == cfg.N
        assert loaded.n_s == cfg.n_s
        assert loaded.tau_1 == cfg.tau_1
        assert np.allclose(loaded.beta_c, cfg.beta_c)
        assert np.allclose(loaded.rho_dir, cfg.rho_dir)
        assert np.allclose(loaded.x0, cfg.x0)
        assert loaded.mode == cfg.mode

    def test_table_keys_present(self):
        doc = cfgm.ocp_config_to_dict(scenarios.cube_in_slot_config())
        for key in ("N", "dt", "n_s", "k_t", "k_r", "n_hom", "tau_1", "sigma_1",
                    "mu_init_1", "kappa_tau", "kappa_sigma", "kappa_mu",
                    "beta_r_1", "beta_r_4", "beta_c_1", "beta_c_4",
                    "delta_hat", "rho_dir", "mode", "hessian", "tol"):
            assert key in doc

    def test_bad_rate_rejected(self):
        doc = cfgm.ocp_config_to_dict(scenarios.cube_in_slot_config())
        doc["kappa_tau"] = 1.5
        with pytest.raises(ConfigError):
            cfgm.ocp_config_from_dict(doc)

    def test_non_unit_direction_rejected(self):
        doc = cfgm.ocp_config_to_dict(scenarios.cube_in_slot_config())
        doc["rho_dir"] = [[1, 1, 0]] * doc["n_s"]
        with pytest.raises(ConfigError):
            cfgm.ocp_config_from_dict(doc)
