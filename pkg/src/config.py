import os
from typing import Dict, Iterable, Optional

from src.errors import DataFormatError, UsageError

# Paths
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA_DIR = os.path.join(BASE_DIR, "data")
RUNS_DIR = os.path.join(BASE_DIR, "runs")
MANIFEST_NAME = "manifest.tsv"
CONFIG_NAME = "config.txt"

# Environment
THREADS_ENV = "SPECREC_THREADS"

# Acquisition defaults
WINDOW_ALPHA = 8.0
SPLIT_RATIOS = (0.6, 0.2, 0.2)
SELECT_EVERY = 8
SPECTRAL_OVERFIT_EPOCH = 15

# Every accepted key with its default; the default's type is the parse type.
# `seed` has no default and must be provided by the config file or --seed.
DEFAULTS: Dict[str, object] = {
    "seed": None,

    "phantom.n_eyes": 24,
    "phantom.n_patients": 18,
    "phantom.n_bscans_per_eye": 32,
    "phantom.n_k": 512,
    "phantom.width": 64,
    "phantom.layer_depths": (0.30, 0.36, 0.42, 0.50, 0.58),
    "phantom.layer_reflectivities": (1.0, 0.5, 0.7, 0.4, 0.9),
    "phantom.speckle_density": 40,
    "phantom.speckle_reflectivity": 0.15,
    "phantom.noise_sigma": 0.02,
    "phantom.envelope_alpha": 1.0,
    "phantom.layer_tilt": 0.03,
    "phantom.split_ratios": SPLIT_RATIOS,
    "phantom.out_dir": os.path.join(DATA_DIR, "phantom"),

    "signal.alpha": WINDOW_ALPHA,
    "signal.log_compress": True,
    "signal.degrade": "window",
    "signal.mean_filter_n": 11,
    "signal.lambda0_nm": 1060.0,
    "signal.delta_lambda_nm": 100.0,

    "data.select_every": SELECT_EVERY,
    "data.crop_top": 0,
    "data.crop_height": 0,
    "data.strip_width": 0,
    "data.augment_copies": 1,

    "augment.h_flip": True,
    "augment.v_flip": True,
    "augment.center_jitter": 16.0,
    "augment.alpha_min": 6.0,
    "augment.alpha_max": 10.0,

    "model.res_blocks": 4,
    "model.channels": 16,
    "model.kernel": 3,
    "model.disc_channels": (16, 16, 32, 32, 64, 64),
    "model.disc_strides": (1, 2, 1, 2, 1, 2),
    "model.dense_units": 64,
    "model.unet_depth": 3,
    "model.unet_base_channels": 8,
    "model.unet_dilations": (1, 3, 15, 31),
    "model.unet_kernel": 3,

    "train.domain": "spatial",
    "train.dataset": os.path.join(DATA_DIR, "phantom"),
    "train.save_dir": os.path.join(RUNS_DIR, "run"),
    "train.epochs": 3,
    "train.batch_size": 8,
    "train.max_steps": 0,
    "train.lr_g": 1e-4,
    "train.lr_d": 1e-4,
    "train.beta1": 0.5,
    "train.beta2": 0.999,
    "train.lambda_adv": 1e-3,
    "train.eval_every": 50,
    "train.checkpoint_every": "epoch",
    "train.patience": 0,
    "train.init_checkpoint": "",
    "train.dtype": "float32",

    "eval.p_low": 1.0,
    "eval.p_high": 99.0,
    "eval.scale": 1,
    "eval.checkpoint": "",
}

TRUE_WORDS = {"1", "true", "yes", "on"}
FALSE_WORDS = {"0", "false", "no", "off"}


def _parse_value(key: str, text: str, default):
    text = text.strip()
    try:
        if key == "seed":
            return int(text) if text else None
        if isinstance(default, bool):
            word = text.lower()
            if word in TRUE_WORDS:
                return True
            if word in FALSE_WORDS:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, tuple):
            item_type = type(default[0]) if default else float
            return tuple(item_type(part) for part in text.split(",") if part.strip())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as e:
        raise UsageError(f"Invalid value for {key}: {e}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


class RunConfig:
    """Namespaced key=value configuration; unknown keys are rejected."""

    def __init__(self, values: Optional[Dict[str, object]] = None):
        self.values = dict(DEFAULTS)
        if values:
            for key, value in values.items():
                self.set(key, value)

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        return cls().update_from_file(path)

    def update_from_file(self, path: str) -> "RunConfig":
        """Apply only the keys present in `path` on top of the current values."""
        try:
            with open(path, "r", encoding="utf-8") as f:
                lines = f.readlines()
        except FileNotFoundError:
            raise UsageError(f"Config file not found: {path}")

        for lineno, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataFormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, text = line.split("=", 1)
            self.set_text(key.strip(), text)
        return self

    def set_text(self, key: str, text: str):
        if key not in DEFAULTS:
            raise UsageError(f"Unknown config key: {key}")
        self.values[key] = _parse_value(key, text, DEFAULTS[key])

    def set(self, key: str, value):
        if key not in DEFAULTS:
            raise UsageError(f"Unknown config key: {key}")
        if isinstance(value, str) and not isinstance(DEFAULTS[key], str):
            value = _parse_value(key, value, DEFAULTS[key])
        self.values[key] = value

    def apply_overrides(self, pairs: Iterable[str]):
        """Apply `key=value` strings from the command line."""
        for pair in pairs or []:
            if "=" not in pair:
                raise UsageError(f"Override must be key=value, got {pair!r}")
            key, text = pair.split("=", 1)
            self.set_text(key.strip(), text)

    def __getitem__(self, key: str):
        if key not in self.values:
            raise UsageError(f"Unknown config key: {key}")
        return self.values[key]

    def require_seed(self) -> int:
        seed = self.values.get("seed")
        if seed is None:
            raise UsageError("A seed is required: set `seed=` in the config or pass --seed")
        return int(seed)

    def dumps(self) -> str:
        return "".join(f"{key}={_format_value(self.values[key])}\n" for key in sorted(self.values))

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.dumps())


def worker_threads() -> int:
    """Worker thread cap from SPECREC_THREADS (default: CPU count)."""
    text = os.environ.get(THREADS_ENV, "").strip()
    if text:
        try:
            return max(1, int(text))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {text!r}")
    return os.cpu_count() or 1
