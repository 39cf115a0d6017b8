"""
Configuration management for hybridtower
"""
import os
import copy
import json
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional

from dotenv import load_dotenv

from hybridtower.errors import ConfigError

# Load environment variables
load_dotenv(override=False)

GENERATOR_INPUT_CHOICES = ("full", "video", "video_frame", "video_patch", "frame_patch")
FUSION_KINDS = ("xpool", "cross_attn")


class Config:
    """Process-wide settings: project paths, environment and JSON defaults"""

    # Project paths
    BASE_DIR = Path(__file__).parent.parent
    CONFIG_DIR = BASE_DIR / "config"
    LOGS_DIR = Path(os.getenv("HYBRIDTOWER_LOG_DIR", str(BASE_DIR / "logs")))

    LOG_LEVEL = os.getenv("HYBRIDTOWER_LOG_LEVEL", "INFO")
    # Overrides every seed in the run config when set
    SEED = os.getenv("HYBRIDTOWER_SEED", "")

    _settings = {}

    @classmethod
    def load_settings(cls):
        """Load default settings from config/settings.json"""
        settings_file = cls.CONFIG_DIR / "settings.json"
        if not settings_file.exists():
            raise ConfigError(f"Default settings not found: {settings_file}")
        with open(settings_file, "r", encoding="utf-8") as f:
            cls._settings = json.load(f)

    @classmethod
    def defaults(cls) -> dict:
        """Deep copy of the default settings tree"""
        if not cls._settings:
            cls.load_settings()
        return copy.deepcopy(cls._settings)


def _coerce(raw: str, reference, key: str):
    """Parse ``raw`` into the type of the default value ``reference``"""
    raw = raw.strip()
    try:
        if isinstance(reference, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(reference, int):
            return int(raw)
        if isinstance(reference, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"Invalid value for {key}: {raw!r} (expected {type(reference).__name__})")
    return raw


class RunConfig:
    """Effective configuration of one run

    Layers JSON defaults, a flat ``section.key = value`` file, the environment seed
    and command-line overrides. Unknown keys are rejected.
    """

    SEEDED_SECTIONS = ("data", "model", "train")

    def __init__(self, settings: Optional[dict] = None):
        self._values = settings if settings is not None else Config.defaults()
        if Config.SEED:
            self.set_seed(int(Config.SEED))

    @classmethod
    def load(cls, path: Optional[Path] = None, overrides: Iterable[str] = (),
             seed: Optional[int] = None) -> "RunConfig":
        """Build the effective config from file, overrides and seed

        Args:
            path: Optional flat config file
            overrides: ``section.key=value`` strings, applied after the file
            seed: Optional single seed for every random stream

        Returns:
            RunConfig instance
        """
        cfg = cls()
        if path is not None:
            cfg.update_from_file(Path(path))
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"Override must look like section.key=value, got {item!r}")
            key, value = item.split("=", 1)
            cfg.set(key.strip(), value)
        if seed is not None:
            cfg.set_seed(seed)
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        """Rebuild a config from its canonical rendering (as embedded in checkpoints)"""
        cfg = cls(Config.defaults())
        cfg.update_from_lines(text.splitlines(), "<embedded config>")
        return cfg

    def update_from_file(self, path: Path):
        """Apply a flat ``section.key = value`` file"""
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            self.update_from_lines(f, str(path))

    def update_from_lines(self, lines: Iterable[str], source: str = "<config>"):
        for line_no, line in enumerate(lines, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{line_no}: expected 'section.key = value'")
            key, value = line.split("=", 1)
            self.set(key.strip(), value)

    def set(self, dotted_key: str, value):
        """Set one value; the key must already exist in the defaults"""
        if dotted_key.count(".") != 1:
            raise ConfigError(f"Config key must be 'section.key', got {dotted_key!r}")
        section, key = dotted_key.split(".")
        if section not in self._values:
            raise ConfigError(f"Unknown config section: {section!r}")
        if key not in self._values[section]:
            raise ConfigError(f"Unknown config key: {dotted_key!r}")
        reference = self._values[section][key]
        if isinstance(value, str):
            value = _coerce(value, reference, dotted_key)
        self._values[section][key] = value

    def set_seed(self, seed: int):
        """Route a single seed to every random stream"""
        for section in self.SEEDED_SECTIONS:
            self._values[section]["seed"] = int(seed)

    def get(self, section: str, key: str):
        try:
            return self._values[section][key]
        except KeyError:
            raise ConfigError(f"Unknown config key: {section}.{key}")

    def section(self, section: str) -> dict:
        if section not in self._values:
            raise ConfigError(f"Unknown config section: {section!r}")
        return dict(self._values[section])

    def copy(self) -> "RunConfig":
        return RunConfig(copy.deepcopy(self._values))

    def to_text(self) -> str:
        """Canonical flat rendering, one ``section.key = value`` per line"""
        lines = []
        for section in sorted(self._values):
            for key in sorted(self._values[section]):
                value = self._values[section][key]
                if isinstance(value, bool):
                    value = "true" if value else "false"
                elif isinstance(value, float):
                    value = repr(value)
                lines.append(f"{section}.{key} = {value}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        """SHA-256 hex digest of the canonical rendering"""
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def validate(self) -> List[str]:
        """Validate cross-field constraints

        Returns:
            list of human-readable errors (empty when valid)
        """
        errors = []
        v = self._values

        if v["model"]["heads"] < 1 or v["model"]["width"] % v["model"]["heads"] != 0:
            errors.append("model.width must be divisible by model.heads")
        if v["fusion"]["heads"] < 1 or v["model"]["width"] % v["fusion"]["heads"] != 0:
            errors.append("model.width must be divisible by fusion.heads")
        if v["data"]["p_info"] > v["data"]["patches"]:
            errors.append("data.p_info must not exceed data.patches")
        if not 1 <= v["its"]["k"] <= v["data"]["frames"] * v["data"]["patches"]:
            errors.append("its.k must be between 1 and frames * patches")
        if v["its"]["scale"] not in ("per_head", "paper_literal"):
            errors.append("its.scale must be 'per_head' or 'paper_literal'")
        if v["generator"]["kind"] not in ("causal", "mlp", "qformer"):
            errors.append("generator.kind must be one of causal, mlp, qformer")
        if v["generator"]["inputs"] not in GENERATOR_INPUT_CHOICES:
            errors.append(f"generator.inputs must be one of {', '.join(GENERATOR_INPUT_CHOICES)}")
        if v["fusion"]["kind"] not in FUSION_KINDS:
            errors.append(f"fusion.kind must be one of {', '.join(FUSION_KINDS)}")
        if v["data"]["text_len"] > v["model"]["max_text_len"]:
            errors.append("data.text_len must not exceed model.max_text_len")
        for key in ("sigma_video", "sigma_text", "sigma_patch"):
            if v["data"][key] < 0:
                errors.append(f"data.{key} must be non-negative")
        for key in ("stage0_lr", "stage1_lr", "stage2_lr"):
            if v["train"][key] <= 0:
                errors.append(f"train.{key} must be positive")
        if v["train"]["batch_size"] < 2:
            errors.append("train.batch_size must be at least 2 (InfoNCE needs negatives)")
        if v["objectives"]["alpha"] < 0:
            errors.append("objectives.alpha must be non-negative")
        if not 0 < v["objectives"]["tau_init"] <= v["objectives"]["tau_max"]:
            errors.append("objectives.tau_init must be in (0, tau_max]")
        if v["data"]["val_fraction"] + v["data"]["test_fraction"] >= 1.0:
            errors.append("data.val_fraction + data.test_fraction must be below 1")
        if v["serving"]["batch_size"] < 1 or v["serving"]["top"] < 1:
            errors.append("serving.batch_size and serving.top must be positive")

        return errors

    def require_valid(self):
        """Raise ConfigError listing every validation error"""
        errors = self.validate()
        if errors:
            raise ConfigError("; ".join(errors))


@dataclass(frozen=True)
class ModelDims:
    """Shape knobs shared by every model component"""
    d_in: int
    width: int
    heads: int
    frames: int
    patches: int
    video_depth: int
    text_depth: int
    generator_depth: int
    mlp_ratio: int
    max_text_len: int
    k: int
    its_scale: str
    generator_kind: str
    generator_inputs: str
    generator_init_from_text: bool
    fusion_kind: str
    fusion_heads: int
    fc_depth: int
    tau_init: float
    tau_max: float
    seed: int

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "ModelDims":
        return cls(
            d_in=cfg.get("data", "d_in"),
            width=cfg.get("model", "width"),
            heads=cfg.get("model", "heads"),
            frames=cfg.get("data", "frames"),
            patches=cfg.get("data", "patches"),
            video_depth=cfg.get("model", "video_depth"),
            text_depth=cfg.get("model", "text_depth"),
            generator_depth=cfg.get("generator", "depth"),
            mlp_ratio=cfg.get("model", "mlp_ratio"),
            max_text_len=cfg.get("model", "max_text_len"),
            k=cfg.get("its", "k"),
            its_scale=cfg.get("its", "scale"),
            generator_kind=cfg.get("generator", "kind"),
            generator_inputs=cfg.get("generator", "inputs"),
            generator_init_from_text=cfg.get("generator", "init_from_text"),
            fusion_kind=cfg.get("fusion", "kind"),
            fusion_heads=cfg.get("fusion", "heads"),
            fc_depth=cfg.get("fusion", "fc_depth"),
            tau_init=cfg.get("objectives", "tau_init"),
            tau_max=cfg.get("objectives", "tau_max"),
            seed=cfg.get("model", "seed"),
        )

    @property
    def generator_length(self) -> int:
        """Longest generator sequence: bos + 4 video tokens + frames + k + eos"""
        return 4 + self.frames + self.k + 2


@dataclass(frozen=True)
class TrainConfig:
    """Optimization knobs for all training stages"""
    seed: int
    batch_size: int
    stage_steps: Dict[int, int]
    stage_lr: Dict[int, float]
    beta1: float
    beta2: float
    eps: float
    alpha: float
    eval_every: int
    patience: int

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "TrainConfig":
        train = cfg.section("train")
        return cls(
            seed=train["seed"],
            batch_size=train["batch_size"],
            stage_steps={s: train[f"stage{s}_steps"] for s in (0, 1, 2)},
            stage_lr={s: train[f"stage{s}_lr"] for s in (0, 1, 2)},
            beta1=train["beta1"],
            beta2=train["beta2"],
            eps=train["eps"],
            alpha=cfg.get("objectives", "alpha"),
            eval_every=train["eval_every"],
            patience=train["patience"],
        )


@dataclass(frozen=True)
class ServingConfig:
    """Index build and query knobs"""
    batch_size: int
    top: int

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "ServingConfig":
        return cls(**cfg.section("serving"))
