"""Run configuration: one JSON document drives every CLI command.

The schema is validated before any work: unknown keys are rejected, types
checked, and the fully resolved document is written next to each run's
outputs so results stay reproducible from the artifact alone.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .data import PhantomConfig
from .errors import ConfigurationError
from .losses import LossWeights
from .metrics import ExtractorConfig
from .nets import NetworkConfig
from .training import TrainConfig

# stage-dependent defaults used when train.iterations / train.batch_size are null
STAGE_DEFAULTS = {
    "sgp": {"iterations": 1500, "batch_size": 16},
    "lsc": {"iterations": 1500, "batch_size": 8},
    "pta": {"iterations": 2000, "batch_size": 2},
}

_SCHEMA = {
    "seed": int,
    "phantom": {
        "image_size": int,
        "num_volumes": int,
        "slices_per_volume": int,
        "num_ellipses": list,
        "lesion_probability": float,
        "lf_blur_sigma": float,
        "lf_noise_sigma": float,
        "lf_downsample_factor": int,
        "contrast": str,
    },
    "network": {
        "base_channels": int,
        "depth": int,
        "embed_dim": int,
        "norm_kind": str,
    },
    "corruption": {
        "block_size": int,
        "rotate_fraction": float,
        "mask_fraction": float,
        "fill_value": float,
    },
    "loss_weights": {
        "lambda1": float,
        "lambda2": float,
        "lambda3": float,
    },
    "train": {
        "stage": (str, type(None)),   # echo only; the CLI --stage flag decides
        "iterations": (int, type(None)),
        "batch_size": (int, type(None)),
        "learning_rate": float,
        "optimizer": str,
        "tau": float,
        "use_sgp": bool,
        "use_lsc": bool,
        "checkpoint_every": int,
        "sgp_context_slices": int,
        "sgp_symmetric": bool,
        "d_updates": int,
        "match_assignment": str,
    },
    "metrics": {
        "is_splits": int,
        "msssim_scales": int,
        "msssim_pairs": int,
        "extractor_steps": int,
        "extractor_seed": int,
        "extractor_volumes_per_class": int,
        "extractor_slices_per_volume": int,
    },
}


def default_config() -> dict:
    return {
        "seed": 0,
        "phantom": {
            "image_size": 64,
            "num_volumes": 20,
            "slices_per_volume": 16,
            "num_ellipses": [2, 5],
            "lesion_probability": 0.3,
            "lf_blur_sigma": 1.8,
            "lf_noise_sigma": 0.25,
            "lf_downsample_factor": 2,
            "contrast": "T1",
        },
        "network": {
            "base_channels": 16,
            "depth": 3,
            "embed_dim": 64,
            "norm_kind": "instance",
        },
        "corruption": {
            "block_size": 8,
            "rotate_fraction": 0.15,
            "mask_fraction": 0.15,
            "fill_value": 0.0,
        },
        "loss_weights": {
            "lambda1": 0.5,
            "lambda2": 0.2,
            "lambda3": 0.3,
        },
        "train": {
            "stage": None,
            "iterations": None,
            "batch_size": None,
            "learning_rate": 2e-4,
            "optimizer": "adaptive_moments",
            "tau": 0.2,
            "use_sgp": True,
            "use_lsc": True,
            "checkpoint_every": 500,
            "sgp_context_slices": 1,
            "sgp_symmetric": False,
            "d_updates": 1,
            "match_assignment": "argmax",
        },
        "metrics": {
            "is_splits": 4,
            "msssim_scales": 3,
            "msssim_pairs": 100,
            "extractor_steps": 600,
            "extractor_seed": 101,
            "extractor_volumes_per_class": 6,
            "extractor_slices_per_volume": 8,
        },
    }


def _check_types(doc, schema, path=""):
    if not isinstance(doc, dict):
        raise ConfigurationError(f"config section {path or '<root>'} must be an object")
    for key, value in doc.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigurationError(f"unknown config key: {here}")
        expected = schema[key]
        if isinstance(expected, dict):
            _check_types(value, expected, here)
            continue
        kinds = expected if isinstance(expected, tuple) else (expected,)
        if float in kinds and isinstance(value, int) and not isinstance(value, bool):
            continue  # ints are acceptable where floats are expected
        if bool not in kinds and isinstance(value, bool) and int in kinds:
            raise ConfigurationError(f"config key {here} must be an integer, got a boolean")
        if not isinstance(value, kinds):
            names = "/".join(k.__name__ for k in kinds)
            raise ConfigurationError(
                f"config key {here} must be {names}, got {type(value).__name__}"
            )


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_set_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, sets) -> dict:
    """Apply --set key.path=value overrides (values parsed as JSON when possible)."""
    out = copy.deepcopy(doc)
    for item in sets or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        target = out
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in target or not isinstance(target[part], dict):
                raise ConfigurationError(f"unknown config key: {key}")
            target = target[part]
        if parts[-1] not in target:
            raise ConfigurationError(f"unknown config key: {key}")
        target[parts[-1]] = _parse_set_value(raw)
    return out


class RunConfig:
    """Validated merged view over the phantom/network/train/metric sections."""

    def __init__(self, doc: dict):
        _check_types(doc, _SCHEMA)
        self.doc = _deep_merge(default_config(), doc)
        _check_types(self.doc, _SCHEMA)
        # construct every sub-config now so all field validators run up front
        self.phantom_config().validate()
        self.network_config().validate()
        self.loss_weights().validate()
        for stage in STAGE_DEFAULTS:
            self.train_config(stage).validate()
        size = self.doc["phantom"]["image_size"]
        depth = self.doc["network"]["depth"]
        if size % (2 ** depth) != 0:
            raise ConfigurationError(
                f"phantom.image_size={size} must be divisible by 2^network.depth={2 ** depth}"
            )

    @classmethod
    def load(cls, path=None, sets=None) -> "RunConfig":
        doc = {}
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigurationError(f"config file not found: {p}")
            try:
                doc = json.loads(p.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"config file {p} is not valid JSON: {exc}")
        merged = _deep_merge(default_config(), doc)
        merged = apply_overrides(merged, sets)
        return cls(merged)

    @property
    def seed(self) -> int:
        return self.doc["seed"]

    def phantom_config(self) -> PhantomConfig:
        p = self.doc["phantom"]
        return PhantomConfig(
            image_size=p["image_size"],
            num_volumes=p["num_volumes"],
            slices_per_volume=p["slices_per_volume"],
            num_ellipses=tuple(p["num_ellipses"]),
            lesion_probability=p["lesion_probability"],
            lf_blur_sigma=p["lf_blur_sigma"],
            lf_noise_sigma=p["lf_noise_sigma"],
            lf_downsample_factor=p["lf_downsample_factor"],
            seed=self.seed,
            block_size=self.doc["corruption"]["block_size"],
            contrast=p["contrast"],
        )

    def network_config(self) -> NetworkConfig:
        n = self.doc["network"]
        return NetworkConfig(
            base_channels=n["base_channels"],
            depth=n["depth"],
            embed_dim=n["embed_dim"],
            norm_kind=n["norm_kind"],
            seed=self.seed,
        )

    def loss_weights(self) -> LossWeights:
        w = self.doc["loss_weights"]
        return LossWeights(w["lambda1"], w["lambda2"], w["lambda3"])

    def train_config(self, stage: str) -> TrainConfig:
        if stage not in STAGE_DEFAULTS:
            raise ConfigurationError(f"unknown training stage {stage!r}")
        t = self.doc["train"]
        c = self.doc["corruption"]
        iterations = t["iterations"]
        batch_size = t["batch_size"]
        if iterations is None:
            iterations = STAGE_DEFAULTS[stage]["iterations"]
        if batch_size is None:
            batch_size = STAGE_DEFAULTS[stage]["batch_size"]
        return TrainConfig(
            stage=stage,
            iterations=iterations,
            batch_size=batch_size,
            learning_rate=t["learning_rate"],
            optimizer=t["optimizer"],
            seed=self.seed,
            weights=self.loss_weights(),
            tau=t["tau"],
            block_size=c["block_size"],
            rotate_fraction=c["rotate_fraction"],
            mask_fraction=c["mask_fraction"],
            fill_value=c["fill_value"],
            use_sgp=t["use_sgp"],
            use_lsc=t["use_lsc"],
            checkpoint_every=t["checkpoint_every"],
            sgp_context_slices=t["sgp_context_slices"],
            sgp_symmetric=t["sgp_symmetric"],
            d_updates=t["d_updates"],
            match_assignment=t["match_assignment"],
        )

    def extractor_config(self) -> ExtractorConfig:
        m = self.doc["metrics"]
        return ExtractorConfig(
            image_size=self.doc["phantom"]["image_size"],
            steps=m["extractor_steps"],
            seed=m["extractor_seed"],
            volumes_per_class=m["extractor_volumes_per_class"],
            slices_per_volume=m["extractor_slices_per_volume"],
        )

    def resolved(self, stage: str | None = None) -> dict:
        """Fully resolved config echo, with stage defaults filled in."""
        doc = copy.deepcopy(self.doc)
        if stage is not None:
            tc = self.train_config(stage)
            doc["train"]["iterations"] = tc.iterations
            doc["train"]["batch_size"] = tc.batch_size
            doc["train"]["stage"] = stage
        return doc

    def write_resolved(self, path, stage: str | None = None) -> None:
        Path(path).write_text(
            json.dumps(self.resolved(stage), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
