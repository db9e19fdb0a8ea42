"""Configuration loading, defaults, and per-key validation messages."""

import dataclasses

import pytest

from queuedesign.config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    config_from_dict,
    load_config,
)


class TestDefaults:
    def test_empty_config_is_valid(self):
        cfg = config_from_dict({})
        assert cfg.cohort.n == 2000
        assert cfg.mechanism.p == (0.5, 0.5)
        assert cfg.design.objective == "exogenous"
        assert cfg.estimation.nuisance_method == "oracle"
        assert cfg.execution.threads == 1

    def test_none_and_missing_blocks_are_defaults(self):
        assert config_from_dict(None) == RunConfig().validate()
        assert config_from_dict({"cohort": None}) == RunConfig().validate()

    def test_frozen(self):
        cfg = config_from_dict({})
        with pytest.raises(dataclasses.FrozenInstanceError):
            cfg.cohort.n = 5


class TestValidationMessages:
    """Errors must name the offending key so sweeps fail loudly."""

    @pytest.mark.parametrize(
        "data, key",
        [
            ({"cohort": {"n": 0}}, "cohort.n"),
            ({"cohort": {"dgp": "gaussian"}}, "cohort.dgp"),
            ({"cohort": {"psi": 0.3}}, "cohort.psi"),
            ({"mechanism": {"beta": 1.0}}, "mechanism.beta"),
            ({"mechanism": {"p": [0.7, 0.2]}}, "mechanism.p"),
            ({"mechanism": {"mode": "fifo"}}, "mechanism.mode"),
            ({"mechanism": {"mode": "rationed"}}, "mechanism.alpha_target"),
            ({"design": {"objective": "minimax"}}, "design.objective"),
            ({"design": {"kappa": -1.0}}, "design.kappa"),
            ({"design": {"switch_strengths": [1.0]}}, "design.switch_strengths"),
            ({"design": {"greedy_cap": 0.0}}, "design.greedy_cap"),
            ({"estimation": {"nuisance_method": "forest"}}, "estimation.nuisance_method"),
            ({"estimation": {"gamma": 0.5}}, "estimation.gamma"),
            ({"estimation": {"estimators": ["ols"]}}, "estimation.estimators"),
            ({"execution": {"threads": 0}}, "execution.threads"),
            ({"execution": {"seed": -1}}, "execution.seed"),
        ],
    )
    def test_bad_value_names_key(self, data, key):
        with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
            config_from_dict(data)

    def test_unknown_block_rejected(self):
        with pytest.raises(ConfigError, match="simulation"):
            config_from_dict({"simulation": {}})

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError, match=r"cohort\.size"):
            config_from_dict({"cohort": {"size": 100}})

    def test_alpha_target_budget_identity(self):
        with pytest.raises(ConfigError, match=r"mechanism\.alpha_target"):
            config_from_dict({
                "mechanism": {"mode": "rationed", "alpha_target": [0.9, 0.9]},
            })

    def test_rationed_with_consistent_target_passes(self):
        cfg = config_from_dict({
            "mechanism": {"mode": "rationed", "alpha_target": [0.6, 0.4]},
        })
        assert cfg.mechanism.alpha_target == (0.6, 0.4)


class TestYamlLoading:
    def test_yaml_roundtrip(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text(
            "cohort:\n  n: 500\n  psi: -0.05\n"
            "design:\n  objective: endogenous\n  c_grid: [0.1, 0.2]\n"
            "execution:\n  seed: 7\n  out_dir: results\n"
        )
        cfg = load_config(str(path))
        assert cfg.cohort.n == 500
        assert cfg.design.c_grid == (0.1, 0.2)
        assert cfg.execution.seed == 7
        assert cfg.execution.out_dir == "results"

    def test_missing_path_means_defaults(self):
        assert load_config(None) == RunConfig().validate()

    def test_nested_lists_become_tuples(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("design:\n  bias_arms:\n  - [0.6, 0.0]\n  - [0.6, 0.5]\n")
        cfg = load_config(str(path))
        assert cfg.design.bias_arms == ((0.6, 0.0), (0.6, 0.5))


class TestOverrides:
    def test_overrides_apply(self):
        cfg = config_from_dict({})
        out = apply_overrides(cfg, seed=42, out_dir="elsewhere", threads=4)
        assert out.execution.seed == 42
        assert out.execution.out_dir == "elsewhere"
        assert out.execution.threads == 4
        # untouched blocks are preserved
        assert out.cohort == cfg.cohort

    def test_none_overrides_keep_config(self):
        cfg = config_from_dict({"execution": {"seed": 9}})
        assert apply_overrides(cfg).execution.seed == 9

    def test_invalid_override_is_caught(self):
        with pytest.raises(ConfigError, match=r"execution\.threads"):
            apply_overrides(config_from_dict({}), threads=0)
