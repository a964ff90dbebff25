"""Tests for run configuration and settings."""

from pathlib import Path

import pytest
from pydantic import ValidationError

from revformer.config import (
    PRESETS,
    MViTModelSection,
    RunConfig,
    Settings,
    StageConfig,
    ViTConfig,
    ViTModelSection,
    load_run_config,
    parse_run_config,
    preset,
)
from revformer.exceptions import ConfigError


def test_presets_build() -> None:
    """Test that every preset validates and has the advertised family."""
    for name in PRESETS:
        section = preset(name)
        assert section.arch in ("rev_vit", "rev_mvit")


def test_vit_presets_geometry() -> None:
    """Test token count and heads of the Rev-ViT zoo."""
    b = preset("rev_vit_b")
    assert (b.num_tokens, b.heads, b.mlp_hidden) == (196, 12, 3072)
    assert preset("rev_vit_l").heads == 16
    assert preset("rev_vit_s").heads == 6


def test_mvit_b_stage_grids() -> None:
    """Test the Rev-MViT-B stage resolutions at 224 x 224."""
    section = preset("rev_mvit_b")
    assert section.stem_grid == 56
    assert section.stage_grids() == [56, 28, 14, 7]
    assert [st.embed_dim for st in section.stages] == [96, 192, 384, 768]
    assert [st.transition_kv_stride for st in section.stages] == [1, 1, 1, 1]
    assert str(section.fusion) == "3x-mlp"


def test_unknown_preset() -> None:
    """Test that an unknown preset name is a config error."""
    with pytest.raises(ConfigError):
        preset("rev_vit_xxl")


def test_unknown_key_rejected() -> None:
    """Test that typos abort validation."""
    with pytest.raises(ValidationError):
        ViTConfig.model_validate({"embed_dim": 32, "dept": 4})
    with pytest.raises(ConfigError):
        parse_run_config({"model": {"arch": "rev_vit"}, "trian": {}})


def test_geometry_checks() -> None:
    """Test image/patch divisibility, head divisibility and stage doubling."""
    with pytest.raises(ValidationError):
        ViTConfig(image_size=15, patch_size=4)
    with pytest.raises(ValidationError):
        ViTConfig(embed_dim=30, num_heads=4)
    with pytest.raises(ValidationError):
        MViTModelSection(
            stages=[
                StageConfig(embed_dim=8, num_heads=1, depth=1),
                StageConfig(embed_dim=24, num_heads=2, depth=1),
            ]
        )


def test_drop_path_rate_range() -> None:
    """Test that stochastic depth must be below one."""
    with pytest.raises(ValidationError):
        ViTConfig(drop_path_rate=1.0)


def test_fusion_given_as_text() -> None:
    """Test that a fusion strategy string in the config is parsed."""
    section = MViTModelSection.model_validate({"fusion": "norm->max"})
    assert section.fusion.op == "max"
    assert section.fusion.pre_norm


def test_model_section_discriminator() -> None:
    """Test that ``arch`` selects the model family."""
    cfg = parse_run_config({"model": {"arch": "rev_mvit"}})
    assert isinstance(cfg.model, MViTModelSection)
    cfg = parse_run_config({"model": {"arch": "cached_vit"}})
    assert isinstance(cfg.model, ViTModelSection)


def test_batch_cannot_exceed_samples() -> None:
    """Test the cross-section batch check."""
    with pytest.raises(ConfigError):
        parse_run_config({"train": {"batch": 64, "data": {"num_samples": 32}}})


def test_load_toml_with_preset(temp_dir: Path) -> None:
    """Test a TOML run file that starts from a preset and overrides fields."""
    path = temp_dir / "run.toml"
    path.write_text(
        "seed = 3\n"
        "\n"
        "[model]\n"
        'preset = "tiny_vit"\n'
        "depth = 2\n"
        "\n"
        "[train]\n"
        "steps = 5\n"
        'optimizer = "sgd"\n'
    )
    cfg = load_run_config(path)
    assert cfg.seed == 3
    assert cfg.model.depth == 2
    assert cfg.model.embed_dim == 32
    assert cfg.train.optimizer == "sgd"


def test_load_preset_name() -> None:
    """Test that a preset name gives a default run around that model."""
    cfg = load_run_config("tiny_mvit")
    assert isinstance(cfg, RunConfig)
    assert cfg.model.arch == "rev_mvit"


def test_load_errors(temp_dir: Path) -> None:
    """Test missing and malformed run files."""
    with pytest.raises(ConfigError):
        load_run_config(temp_dir / "missing.toml")
    bad = temp_dir / "bad.toml"
    bad.write_text("[model\n")
    with pytest.raises(ConfigError):
        load_run_config(bad)


def test_configs_are_frozen() -> None:
    """Test that validated configs cannot be mutated."""
    section = preset("tiny_vit")
    with pytest.raises(ValidationError):
        section.depth = 8


def test_settings_from_environment(monkeypatch: pytest.MonkeyPatch) -> None:
    """Test environment overrides of process settings."""
    monkeypatch.setenv("REVFORMER_THREADS", "3")
    monkeypatch.setenv("REVFORMER_DEFAULT_DTYPE", "float64")
    settings = Settings()
    assert settings.threads == 3
    assert settings.default_dtype == "float64"
    assert settings.get_output_dir().is_absolute()
