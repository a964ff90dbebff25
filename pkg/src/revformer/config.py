"""Configuration management for revformer.

Two layers live here: process-level ``Settings`` read from the environment, and the
``RunConfig`` tree parsed from a TOML run file (or a named preset). Every run-config
model forbids unknown keys so a typo aborts before any model is constructed.
"""

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Annotated, Any, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from revformer.exceptions import ConfigError


class Settings(BaseSettings):
    """Process settings loaded from environment variables (prefix ``REVFORMER_``)."""

    model_config = SettingsConfigDict(
        env_prefix="REVFORMER_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Project paths
    project_root: Path = Path(__file__).parent.parent.parent
    output_dir: Path = Field(default=Path("runs"))

    # Execution
    threads: int = Field(default=1, ge=1, description="Cap on parallel bench sweep points")
    log_level: str = Field(default="INFO")

    # Precision
    default_dtype: Literal["float32", "float64"] = Field(default="float32")
    verify_dtype: Literal["float32", "float64"] = Field(default="float64")

    def get_output_dir(self) -> Path:
        """Get absolute path to the output directory."""
        if self.output_dir.is_absolute():
            return self.output_dir
        return self.project_root / self.output_dir


# Global settings instance
settings = Settings()


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


FusionOp = Literal["max", "concat", "mlp", "linear"]


class FusionStrategy(_Strict):
    """How two residual streams are merged into one tensor.

    Written as an arrow chain, e.g. ``"2x-mlp"``, ``"norm->concat"``,
    ``"norm->1-layer->0.2dp->norm"``. A leading ``norm`` layer-normalises each stream
    before merging, a trailing ``norm`` normalises the merged tensor, and ``0.Ndp``
    applies dropout with rate 0.N to the merged tensor.
    """

    op: FusionOp = "mlp"
    mlp_ratio: int = Field(default=2, ge=1)
    pre_norm: bool = False
    post_norm: bool = False
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)

    @model_validator(mode="before")
    @classmethod
    def _from_text(cls, value: Any) -> Any:
        if isinstance(value, str):
            return cls.parse_fields(value)
        return value

    @staticmethod
    def parse_fields(text: str) -> dict[str, Any]:
        parts = [p.strip().lower() for p in text.replace("→", "->").split("->") if p.strip()]
        fields: dict[str, Any] = {}
        seen_op = False
        for part in parts:
            if part == "norm":
                fields["post_norm" if seen_op else "pre_norm"] = True
            elif part in ("max", "concat"):
                fields["op"] = part
                seen_op = True
            elif part == "1-layer":
                fields["op"] = "linear"
                seen_op = True
            elif part.endswith("x-mlp"):
                ratio = part[: -len("x-mlp")]
                if not ratio.isdigit():
                    raise ValueError(f"unknown fusion step {part!r} in {text!r}")
                fields["op"] = "mlp"
                fields["mlp_ratio"] = int(ratio)
                seen_op = True
            elif part.endswith("dp"):
                try:
                    fields["dropout"] = float(part[:-2])
                except ValueError as e:
                    raise ValueError(f"unknown fusion step {part!r} in {text!r}") from e
            else:
                raise ValueError(f"unknown fusion step {part!r} in {text!r}")
        if not seen_op:
            raise ValueError(f"fusion {text!r} names no merge operator")
        return fields

    @classmethod
    def parse(cls, text: str) -> "FusionStrategy":
        """Parse an arrow-chain description, raising ``ConfigError`` on bad input."""
        try:
            return cls.model_validate(text)
        except ValidationError as e:
            raise ConfigError(f"invalid fusion strategy {text!r}: {e}") from e

    def __str__(self) -> str:
        op = {"max": "max", "concat": "concat", "linear": "1-layer"}.get(
            self.op, f"{self.mlp_ratio}x-mlp"
        )
        steps = (["norm"] if self.pre_norm else []) + [op]
        if self.dropout > 0:
            steps.append(f"{self.dropout:g}dp")
        if self.post_norm:
            steps.append("norm")
        return "->".join(steps)


class ViTConfig(_Strict):
    """Rev-ViT architecture description."""

    image_size: int = Field(default=16, ge=1)
    patch_size: int = Field(default=4, ge=1)
    in_chans: int = Field(default=3, ge=1)
    embed_dim: int = Field(default=32, ge=1)
    mlp_ratio: float = Field(default=4.0, gt=0)
    depth: int = Field(default=4, ge=1)
    num_heads: int | None = Field(default=None, ge=1, description="Defaults to embed_dim // 64")
    drop_path_rate: float = Field(default=0.0, ge=0.0, lt=1.0)
    num_classes: int = Field(default=8, ge=1)
    termination: FusionStrategy = Field(
        default_factory=lambda: FusionStrategy.parse("norm->concat")
    )
    layer_norm_eps: float = Field(default=1e-6, gt=0)

    @model_validator(mode="after")
    def _check_geometry(self) -> "ViTConfig":
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.heads}")
        return self

    @property
    def heads(self) -> int:
        return self.num_heads if self.num_heads is not None else max(1, self.embed_dim // 64)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid**2

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


class StageConfig(_Strict):
    """One Rev-MViT stage: an optional stage-transition block then ``depth`` preserving blocks."""

    embed_dim: int = Field(ge=1)
    num_heads: int = Field(ge=1)
    depth: int = Field(ge=0, description="Number of stage-preserving blocks")
    kv_pool_stride: int = Field(default=1, ge=1)
    q_pool_stride: int = Field(
        default=2, ge=1, description="Used by the transition into this stage"
    )
    transition_kv_stride: int = Field(
        default=1, ge=1, description="Key/value pooling stride of the transition into this stage"
    )
    mlp_ratio: float = Field(default=4.0, gt=0)

    @model_validator(mode="after")
    def _check_heads(self) -> "StageConfig":
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        return self


class MViTConfig(_Strict):
    """Rev-MViT architecture description."""

    image_size: int = Field(default=16, ge=1)
    in_chans: int = Field(default=3, ge=1)
    stem_kernel: int = Field(default=3, ge=1)
    stem_stride: int = Field(default=2, ge=1)
    stem_padding: int = Field(default=1, ge=0)
    pool_kernel: int = Field(default=3, ge=1)
    stages: list[StageConfig] = Field(
        default_factory=lambda: [
            StageConfig(embed_dim=8, num_heads=1, depth=1, kv_pool_stride=2),
            StageConfig(embed_dim=16, num_heads=2, depth=1, kv_pool_stride=1),
        ]
    )
    fusion: FusionStrategy = Field(default_factory=lambda: FusionStrategy.parse("2x-mlp"))
    termination: FusionStrategy = Field(
        default_factory=lambda: FusionStrategy.parse("norm->concat")
    )
    drop_path_rate: float = Field(default=0.0, ge=0.0, lt=1.0)
    num_classes: int = Field(default=8, ge=1)
    layer_norm_eps: float = Field(default=1e-6, gt=0)

    @model_validator(mode="after")
    def _check_stages(self) -> "MViTConfig":
        if not self.stages:
            raise ValueError("at least one stage is required")
        for prev, cur in zip(self.stages, self.stages[1:]):
            if cur.embed_dim != 2 * prev.embed_dim:
                raise ValueError(
                    f"stage dims must double: {prev.embed_dim} -> {cur.embed_dim}"
                )
        return self

    @property
    def stem_grid(self) -> int:
        return (self.image_size + 2 * self.stem_padding - self.stem_kernel) // self.stem_stride + 1

    def stage_grids(self) -> list[int]:
        """Token-grid side of every stage, first stage at the stem resolution."""
        grids = [self.stem_grid]
        for stage in self.stages[1:]:
            grids.append(-(-grids[-1] // stage.q_pool_stride))
        return grids


class ViTModelSection(ViTConfig):
    arch: Literal["rev_vit", "cached_vit"] = "rev_vit"


class MViTModelSection(MViTConfig):
    arch: Literal["rev_mvit"] = "rev_mvit"


ModelSection = Annotated[Union[ViTModelSection, MViTModelSection], Field(discriminator="arch")]

Precision = Literal["float32", "float64"]


class DataSection(_Strict):
    """Synthetic Gaussian-mixture image classification set."""

    num_samples: int = Field(default=512, ge=1)
    eval_samples: int = Field(default=256, ge=1)
    noise: float = Field(default=0.5, ge=0.0)


class TrainSection(_Strict):
    lr: float = Field(default=1e-3, gt=0)
    weight_decay: float = Field(default=0.05, ge=0)
    steps: int = Field(default=300, ge=0)
    batch: int = Field(default=32, ge=1)
    optimizer: Literal["sgd", "adamw"] = "adamw"
    momentum: float = Field(default=0.9, ge=0, lt=1)
    betas: tuple[float, float] = (0.9, 0.999)
    dtype: Precision = "float32"
    log_every: int = Field(default=10, ge=1)
    data: DataSection = Field(default_factory=DataSection)


class VerifySection(_Strict):
    suites: list[
        Literal[
            "invertibility",
            "gradient",
            "finite_difference",
            "shape",
            "memory",
            "recompute",
            "reduction",
        ]
    ] = Field(
        default_factory=lambda: [
            "invertibility",
            "gradient",
            "finite_difference",
            "shape",
            "memory",
            "recompute",
            "reduction",
        ]
    )
    widths: list[int] = Field(default_factory=lambda: [64, 384, 768])
    depths: list[int] = Field(default_factory=lambda: [4, 12, 24])
    precisions: list[Precision] = Field(default_factory=lambda: ["float64", "float32"])
    tokens: int = Field(default=16, ge=1)
    batch: int = Field(default=2, ge=1)
    tol_inverse_float64: float = 1e-10
    tol_inverse_float32: float = 1e-4
    tol_gradient: float = 1e-9
    tol_finite_difference: float = 1e-5
    fd_step: float = 1e-5
    memory_depths: list[int] = Field(default_factory=lambda: [4, 8, 16, 24])
    memory_width: int = Field(default=16, ge=1)
    max_reversible_ratio: float = 1.25
    min_cached_ratio: float = 3.0


class BenchSection(_Strict):
    archs: list[Literal["rev_vit", "rev_mvit"]] = Field(default_factory=lambda: ["rev_vit"])
    depths: list[int] = Field(default_factory=lambda: [4, 8, 16, 24])
    dims: list[int] = Field(default_factory=lambda: [32])
    schedules: list[Literal["reversible", "cached"]] = Field(
        default_factory=lambda: ["reversible", "cached"]
    )
    steps: int = Field(default=3, ge=1)
    batch: int = Field(default=8, ge=1)


class RunConfig(_Strict):
    """Complete description of a revformer run."""

    model: ModelSection = Field(default_factory=ViTModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    verify: VerifySection = Field(default_factory=VerifySection)
    bench: BenchSection = Field(default_factory=BenchSection)
    seed: int = 0

    @model_validator(mode="after")
    def _check_batch(self) -> "RunConfig":
        if self.train.batch > self.train.data.num_samples:
            raise ValueError(
                f"train.batch {self.train.batch} exceeds data.num_samples "
                f"{self.train.data.num_samples}"
            )
        return self


def _mvit_b() -> MViTModelSection:
    return MViTModelSection(
        image_size=224,
        stem_kernel=7,
        stem_stride=4,
        stem_padding=3,
        stages=[
            StageConfig(embed_dim=96, num_heads=1, depth=1, kv_pool_stride=4),
            StageConfig(embed_dim=192, num_heads=2, depth=1, kv_pool_stride=2),
            StageConfig(embed_dim=384, num_heads=4, depth=10, kv_pool_stride=1),
            StageConfig(embed_dim=768, num_heads=8, depth=1, kv_pool_stride=1),
        ],
        fusion=FusionStrategy.parse("3x-mlp"),
        num_classes=1000,
    )


def _vit(dim: int, depth: int, **overrides: Any) -> ViTModelSection:
    fields: dict[str, Any] = dict(
        image_size=224, patch_size=16, embed_dim=dim, depth=depth, num_classes=1000
    )
    fields.update(overrides)
    return ViTModelSection(**fields)


PRESETS: dict[str, Any] = {
    "rev_vit_s": lambda: _vit(384, 12),
    "rev_vit_b": lambda: _vit(768, 12),
    "rev_vit_l": lambda: _vit(1024, 24),
    "rev_mvit_b": _mvit_b,
    "tiny_vit": lambda: ViTModelSection(embed_dim=32, depth=4, num_heads=2),
    "tiny_mvit": lambda: MViTModelSection(),
}


def preset(name: str) -> ViTModelSection | MViTModelSection:
    """Return the named architecture preset."""
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None


def load_run_config(source: str | Path) -> RunConfig:
    """Load a run config from a TOML file, or wrap a preset name in a default run.

    Raises:
        ConfigError: If the file is missing, malformed, or fails validation
    """
    if isinstance(source, str) and source in PRESETS:
        return RunConfig(model=preset(source))

    path = Path(source)
    if not path.exists():
        raise ConfigError(f"config {source} is neither a file nor a preset ({sorted(PRESETS)})")
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    return parse_run_config(data)


def parse_run_config(data: dict[str, Any]) -> RunConfig:
    """Validate an already-parsed mapping into a ``RunConfig``."""
    data = dict(data)
    model = data.get("model")
    if isinstance(model, dict) and "preset" in model:
        model = dict(model)
        base = preset(model.pop("preset")).model_dump()
        base.update(model)
        data["model"] = base
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid run config: {e}") from e
