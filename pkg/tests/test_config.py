"""Configuration round-trip and validation tests."""

import pytest

from microforge.config import RunConfig, load_config, override, save_config
from microforge.errors import ConfigError
from microforge.genlat import GeneratorConfig
from microforge.objectives import ObjectiveSpec
from microforge.props import SolverConfig


def sample_config():
    return RunConfig(
        generator=GeneratorConfig(
            output_dims=(32, 32, 32),
            seed=7,
            corr_lengths=(4.5, 7.25, 3.125),
            sigma_smooth=1.75,
            voxel_size=0.4,
        ),
        solver=SolverConfig(
            max_iterations=12345, tolerance=3.0517578125e-05, omega=1.85
        ),
        objective=ObjectiveSpec(
            kind="weighted_ssa_drel", gamma=0.3,
            ssa_range=0.123456789012345, drel_range=0.1,
        ),
        lo=-5.0,
        hi=5.0,
        n_init=20,
        i_tot=100,
        seed=11,
        ard=True,
        early_stop_patience=15,
        early_stop_tol=0.001953125,
        snapshot_every=25,
        out_dir="runs/demo",
    )


class TestRoundTrip:
    def test_full_round_trip_is_exact(self, tmp_path):
        cfg = sample_config()
        path = tmp_path / "run.ini"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_non_dyadic_floats_round_trip(self, tmp_path):
        cfg = RunConfig(
            solver=SolverConfig(tolerance=1e-4, omega=1.9),
            early_stop_tol=0.1 + 0.2,
        )
        path = tmp_path / "run.ini"
        save_config(cfg, path)
        loaded = load_config(path)
        assert loaded.solver.tolerance == 1e-4
        assert loaded.solver.omega == 1.9
        assert loaded.early_stop_tol == 0.1 + 0.2

    def test_save_is_deterministic(self, tmp_path):
        cfg = sample_config()
        a, b = tmp_path / "a.ini", tmp_path / "b.ini"
        save_config(cfg, a)
        save_config(cfg, b)
        assert a.read_bytes() == b.read_bytes()

    def test_external_command_round_trip(self, tmp_path):
        cfg = RunConfig(
            endpoint_mode="external",
            external_command=("python3", "bridge.py", "--flag", "a b"),
        )
        path = tmp_path / "run.ini"
        save_config(cfg, path)
        assert load_config(path).external_command == cfg.external_command

    def test_frozen_objective_stats_round_trip(self, tmp_path):
        cfg = RunConfig(
            objective=ObjectiveSpec(
                kind="drel_axis_const_others", axis="y",
                penalty_means=(0.123, 0.456),
            )
        )
        path = tmp_path / "run.ini"
        save_config(cfg, path)
        assert load_config(path).objective.penalty_means == (0.123, 0.456)


class TestDefaults:
    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("")
        assert load_config(path) == RunConfig()

    def test_partial_override(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[loop]\nn_init = 9\n")
        cfg = load_config(path)
        assert cfg.n_init == 9
        assert cfg.i_tot == 500


class TestValidation:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.ini")

    def test_unknown_section(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[surprise]\nkey = 1\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[loop]\nn_itr = 10\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_bad_number(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[loop]\nn_init = many\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_bad_boolean(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[loop]\nard = maybe\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_bad_generator_dims(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[generator]\noutput_dims = 17,16,16\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_bad_objective_kind(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[objective]\nkind = volume\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_external_mode_needs_command(self):
        with pytest.raises(ConfigError):
            RunConfig(endpoint_mode="external")

    def test_unknown_endpoint_mode(self):
        with pytest.raises(ConfigError):
            RunConfig(endpoint_mode="remote")


class TestDerived:
    def test_design_space_dim_follows_generator(self):
        cfg = RunConfig(generator=GeneratorConfig(output_dims=(32, 32, 16)))
        space = cfg.design_space()
        assert space.dim == 2 * 2 * 1
        assert space.lo == -5.0 and space.hi == 5.0

    def test_loop_config_carries_settings(self):
        cfg = sample_config()
        loop = cfg.loop_config()
        assert loop.n_init == 20
        assert loop.i_tot == 100
        assert loop.seed == 11
        assert loop.ard is True
        assert loop.solver == cfg.solver

    def test_override_ignores_none(self):
        cfg = sample_config()
        assert override(cfg, seed=None, threads=None) == cfg
        assert override(cfg, seed=99).seed == 99

    def test_override_rejects_unknown(self):
        with pytest.raises(ConfigError):
            override(sample_config(), sneed=1)
