"""Key-value run configuration: a plain text file of ``key = value`` lines
('#' starts a comment), merged with command-line flag overrides (flags win).
Unknown keys are rejected up front."""

from __future__ import annotations

from pathlib import Path

# Every key any subcommand understands, with its value parser.
KNOWN_KEYS = {
    # shared
    "dataset": str,
    "out": str,
    "seed": int,
    "dtype": str,
    # gen-synthetic
    "images": int,
    "tags": int,
    "feature_dim": int,
    "frac_place": float,
    "frac_conditioned": float,
    "frac_invariant": float,
    "regions_per_tag": int,
    "place_spread_km": float,
    "region_spread_km": float,
    "feature_noise": float,
    "mean_tags": float,
    "word_dim": int,
    "min_images_per_tag": int,
    "val_size": int,
    "test_size": int,
    # train-baseline
    "kind": str,
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "embed_dim": int,
    "clip_norm": float,
    # train-locsens
    "embeddings": str,
    "strategy": str,
    "margin": float,
    "negatives": int,
    "negative_mode": str,
    "sigma_final": float,
    "ramp_epochs": int,
    "zero_prob": float,
    "epochs_per_rung": int,
    "steps_per_epoch": int,
    # evaluate / retrieve / tag
    "model": str,
    "queries": int,
    "min_count": int,
    "k": int,
    "stop_tags": str,
    "tag": str,
    "lat": float,
    "lon": float,
    "image": int,
}


class ConfigError(ValueError):
    pass


class RunConfig:
    def __init__(self, values: dict | None = None):
        self._values = {}
        for key, value in (values or {}).items():
            self._set(key, value)

    def _set(self, key: str, value):
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown configuration key {key!r}")
        if value is None:
            return
        try:
            self._values[key] = KNOWN_KEYS[key](value)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value {value!r} for key {key!r}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            try:
                cfg._set(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
        return cfg

    def override(self, **flags) -> "RunConfig":
        """Flags win over file values; None flags are ignored."""
        merged = RunConfig()
        merged._values = dict(self._values)
        for key, value in flags.items():
            merged._set(key, value)
        return merged

    def get(self, key: str, default=None):
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown configuration key {key!r}")
        return self._values.get(key, default)

    def require(self, key: str):
        value = self.get(key)
        if value is None:
            raise ConfigError(f"missing required configuration key {key!r}")
        return value

    def as_dict(self) -> dict:
        return dict(self._values)
