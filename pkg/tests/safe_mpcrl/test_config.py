import pytest

from safe_mpcrl.config import (
    OUTPUT_DIR_ENV,
    ConfigParseError,
    ConfigSchemaError,
    PresetConflictError,
    expand_preset,
    load_config,
    parse_config_text,
    validate_config,
)
from safe_mpcrl.preset_registry import UnknownPresetError


def _write(tmp_path, text, name="experiment.yaml"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_static_lod_preset(tmp_path):
    """Check the values a preset fills in."""
    cfg = load_config(_write(tmp_path, "preset: static-lod\n"), environ={})
    assert cfg.variant == "lod"
    assert cfg.mpc.horizon == 1
    assert cfg.mpc.w_mpc == 20.0**6
    assert cfg.trainer.w_rl == 1e3
    assert cfg.trainer.episode_length == 60
    assert cfg.output_dir == "results"

    world = cfg.build_world()
    assert len(world.obstacles) == 1
    assert world.obstacles[0].radius == 1.5
    assert world.obstacles[0].motion is None

    mpc_cfg = cfg.mpc_config()
    assert mpc_cfg.variant == "lod"
    assert mpc_cfg.omega_bar_init == 1000.0
    assert mpc_cfg.p_omega_init == 0.4
    assert mpc_cfg.dump_path is None


def test_dynamic_rnn_preset(tmp_path):
    """Check the moving obstacles and the network settings of a dynamic preset."""
    text = "preset: dynamic-rnn\nseed: 3\ntrainer:\n  n_episodes: 10\n"
    cfg = load_config(_write(tmp_path, text), environ={})
    assert cfg.variant == "rnn"
    assert cfg.trainer.n_episodes == 10
    # Values the document does not mention come from the preset.
    assert cfg.trainer.w_rl == 1e5
    assert cfg.trainer.episode_length == 80

    world = cfg.build_world()
    assert len(world.obstacles) == 3
    assert [ob.motion is not None for ob in world.obstacles] == [False, True, True]

    mpc_cfg = cfg.mpc_config()
    assert mpc_cfg.horizon == 6
    assert mpc_cfg.hidden == (16, 16, 16)

    trainer_cfg = cfg.trainer_config()
    assert trainer_cfg.noise.seed == 4
    assert trainer_cfg.start_state == (-5.0, -5.0, 0.0, 0.0)


def test_config_without_preset():
    """Check a complete document with no preset."""
    document = {
        "variant": "nn",
        "world": {"obstacles": [{"center": [0.0, 1.0], "radius": 0.5}]},
        "network": {"hidden": [4, 4]},
    }
    cfg = validate_config(expand_preset(document))
    assert cfg.preset is None
    assert cfg.network.hidden == [4, 4]
    assert cfg.solver.method == "sqp"
    assert cfg.solver.hessian == "bfgs"
    assert cfg.solver_config(None).method == "sqp"


def test_parse_errors():
    """Check that YAML problems carry a position."""
    with pytest.raises(ConfigParseError) as err:
        parse_config_text("")
    assert (err.value.line, err.value.column) == (1, 1)

    with pytest.raises(ConfigParseError) as err:
        parse_config_text("# only a comment\n")
    assert err.value.line == 1

    with pytest.raises(ConfigParseError) as err:
        parse_config_text("variant: lod\n seed: 2\n")
    assert err.value.line == 2

    with pytest.raises(ConfigParseError):
        parse_config_text("- a list\n- at the top\n")


def test_schema_errors():
    """Check that unknown keys and bad values name their fields."""
    with pytest.raises(ConfigSchemaError) as err:
        validate_config(expand_preset({"preset": "static-lod", "mpc": {"horizn": 2}}))
    assert "mpc.horizn" in err.value.fields

    with pytest.raises(ConfigSchemaError) as err:
        validate_config(expand_preset({"preset": "static-lod", "trainer": {"zeta": 1.5}}))
    assert "trainer.zeta" in err.value.fields

    with pytest.raises(ConfigSchemaError):
        validate_config(expand_preset({"preset": "static-nn", "network": {"hidden": [4, 0]}}))

    # A moving obstacle must start on its segment.
    document = {
        "variant": "lod",
        "world": {
            "obstacles": [{"center": [3.0, 0.0], "radius": 0.5, "motion": {"x_min": -1.0, "x_max": 1.0}}]
        },
    }
    with pytest.raises(ConfigSchemaError):
        validate_config(document)

    # Schema errors are value errors too.
    with pytest.raises(ValueError):
        validate_config({"variant": "lod"})


def test_preset_errors():
    """Check unknown presets and variant conflicts."""
    with pytest.raises(UnknownPresetError):
        expand_preset({"preset": "static-gp"})
    with pytest.raises(PresetConflictError):
        expand_preset({"preset": "static-lod", "variant": "nn"})

    # Repeating the preset's own variant is fine.
    assert expand_preset({"preset": "static-lod", "variant": "lod"})["variant"] == "lod"


def test_output_dir_override(tmp_path):
    """Check that the environment overrides the output directory."""
    path = _write(tmp_path, "preset: static-lod\noutput_dir: from_file\n")
    assert load_config(path, environ={}).output_dir == "from_file"
    assert load_config(path, environ={OUTPUT_DIR_ENV: "from_env"}).output_dir == "from_env"

    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.yaml", environ={})


def test_output_files(tmp_path):
    """Check where the optional solver and problem logs go."""
    text = "preset: static-lod\nsolver:\n  iteration_log: true\nmpc:\n  dump_problems: true\n"
    cfg = load_config(_write(tmp_path, text), environ={})
    mpc_cfg = cfg.mpc_config(str(tmp_path))
    assert mpc_cfg.dump_path == str(tmp_path / "mpc_problems.jsonl")
    assert mpc_cfg.solver.iteration_log == str(tmp_path / "nlp_iterations.jsonl")


def test_swapped_init(tmp_path):
    """Check the alternative reading of the optimal-decay initialization."""
    cfg = load_config(_write(tmp_path, "preset: static-lod\nlod:\n  init: swapped\n"), environ={})
    mpc_cfg = cfg.mpc_config()
    assert mpc_cfg.omega_bar_init == 0.4
    assert mpc_cfg.p_omega_init == 1000.0


def test_config_hash(tmp_path):
    """Check that the hash ignores the output directory but not the content."""
    first = load_config(_write(tmp_path, "preset: static-lod\n", "a.yaml"), environ={})
    moved = _write(tmp_path, "preset: static-lod\noutput_dir: elsewhere\n", "b.yaml")
    second = load_config(moved, environ={})
    third = load_config(_write(tmp_path, "preset: static-lod\nseed: 1\n", "c.yaml"), environ={})
    assert len(first.config_hash()) == 64
    assert first.config_hash() == second.config_hash()
    assert first.config_hash() != third.config_hash()
