"""Run configuration: per-module sections, profiles, JSON round-trip.

A run is one JSON document with a global seed; stage functions derive
every module seed from it so a whole pipeline reruns bit-identically. The
``paper`` profile mirrors the full three-panel replication; ``tiny`` is
the desk-scale single-type profile used by the acceptance runs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .dataset import AugmentParams
from .diagnose import VolumeThresholds
from .neuralvol.network import NetConfig, tiny_config
from .neuralvol.training import TrainConfig, tiny_train_config
from .scansim import ATTACH_PATTERNS, LayoutConfig, PcbModel, ScanConfig, ShapeParams, make_pcb
from .voxelizer import GridConfig

ALLOWED_STEPS_UM = (20.0, 50.0)


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    profile: str = "tiny"
    passes: int = 1
    label_source: str = "analytic"
    attach_patterns: tuple[str, ...] = ("unattached",)
    layout: LayoutConfig = field(default_factory=LayoutConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)
    grid: GridConfig = field(default_factory=GridConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    prediction_s_per_region: float = 1.3
    thresholds: dict[str, VolumeThresholds] | None = None

    def validate(self, allow_any_step: bool = False) -> "RunConfig":
        if self.passes < 1:
            raise ConfigError("passes must be >= 1")
        if self.label_source not in ("analytic", "annotated"):
            raise ConfigError(f"unknown label source {self.label_source!r}")
        for pattern in self.attach_patterns:
            if pattern not in ATTACH_PATTERNS:
                raise ConfigError(f"unknown attach pattern {pattern!r}")
        if not allow_any_step and self.scan.step_um not in ALLOWED_STEPS_UM:
            raise ConfigError(
                f"scan step {self.scan.step_um} um is not in {ALLOWED_STEPS_UM}; "
                "pass the explicit override flag to use it"
            )
        return self

    def resolved(self) -> "RunConfig":
        """Propagate the global seed into every module config."""
        return replace(
            self,
            scan=replace(self.scan, seed=self.seed),
            augment=replace(self.augment, seed=self.seed),
            train=replace(self.train, seed=self.seed),
        )

    def with_step(self, step_um: float) -> "RunConfig":
        """Set the scan step and keep the augmentation stage step in sync."""
        return replace(
            self,
            scan=replace(self.scan, step_um=step_um),
            augment=replace(self.augment, min_step_um=step_um),
        )

    def pcbs(self) -> list[PcbModel]:
        """One panel per attach pattern, indexed in order."""
        return [
            make_pcb(replace(self.layout, attach_pattern=pattern), seed=self.seed, index=i)
            for i, pattern in enumerate(self.attach_patterns)
        ]


def paper_config(seed: int = 0) -> RunConfig:
    """Full-replication profile: three panels, five types, five passes."""
    return RunConfig(
        seed=seed,
        profile="paper",
        passes=5,
        attach_patterns=("attached", "unattached", "half"),
        layout=LayoutConfig(),
        scan=ScanConfig(step_um=20.0),
        augment=AugmentParams(min_step_um=20.0),
        net=NetConfig(),
        train=TrainConfig(),
    )


def tiny_profile_config(seed: int = 0) -> RunConfig:
    """Desk-scale profile: one unattached panel, one glue type, 50 um step."""
    layout = LayoutConfig(
        rows=1,
        columns=6,
        glue_types=("A",),
        base_volume_mm3={"A": 0.035},
        footprint_mm={"A": (0.5, 0.9)},
        die_mm={"A": (0.4, 0.7, 0.25)},
    )
    return RunConfig(
        seed=seed,
        profile="tiny",
        passes=1,
        attach_patterns=("unattached",),
        layout=layout,
        scan=ScanConfig(step_um=50.0, margin_mm=0.15),
        augment=AugmentParams(min_step_um=50.0),
        net=tiny_config(),
        train=tiny_train_config(seed=seed),
    )


def profile_config(profile: str, seed: int = 0) -> RunConfig:
    if profile == "paper":
        return paper_config(seed)
    if profile == "tiny":
        return tiny_profile_config(seed)
    raise ConfigError(f"unknown profile {profile!r}")


def _layout_to_dict(layout: LayoutConfig) -> dict:
    doc = asdict(layout)
    doc["column_scales"] = list(layout.scales())
    doc.pop("column_scale_range")
    return doc


def _layout_from_dict(doc: dict) -> LayoutConfig:
    shape = ShapeParams(**{**doc.get("shape", {}),
                           "bump_position": tuple(doc.get("shape", {}).get("bump_position", (0.0, 0.72)))})
    return LayoutConfig(
        rows=doc["rows"],
        columns=doc["columns"],
        glue_types=tuple(doc["glue_types"]),
        deposits_per_type=doc["deposits_per_type"],
        base_volume_mm3={k: float(v) for k, v in doc["base_volume_mm3"].items()},
        column_scales=tuple(doc["column_scales"]),
        footprint_mm={k: tuple(v) for k, v in doc["footprint_mm"].items()},
        die_mm={k: tuple(v) for k, v in doc["die_mm"].items()},
        squeeze_ratio=doc["squeeze_ratio"],
        fillet_width_mm=doc["fillet_width_mm"],
        shape=shape,
        attach_pattern=doc.get("attach_pattern", "unattached"),
    )


def config_to_dict(cfg: RunConfig) -> dict:
    doc = {
        "seed": cfg.seed,
        "profile": cfg.profile,
        "passes": cfg.passes,
        "label_source": cfg.label_source,
        "attach_patterns": list(cfg.attach_patterns),
        "layout": _layout_to_dict(cfg.layout),
        "scan": asdict(cfg.scan),
        "augment": asdict(cfg.augment),
        "grid": asdict(cfg.grid),
        "net": asdict(cfg.net),
        "train": asdict(cfg.train),
        "prediction_s_per_region": cfg.prediction_s_per_region,
        "thresholds": None
        if cfg.thresholds is None
        else {
            k: {"lower_mm3": t.lower_mm3, "upper_mm3": t.upper_mm3}
            for k, t in sorted(cfg.thresholds.items())
        },
    }
    return doc


def config_from_dict(doc: dict) -> RunConfig:
    try:
        augment = dict(doc["augment"])
        augment["noise_levels"] = tuple(augment["noise_levels"])
        net = dict(doc["net"])
        net["channels"] = tuple(net["channels"])
        net["input_dims"] = tuple(net["input_dims"])
        thresholds = doc.get("thresholds")
        return RunConfig(
            seed=doc["seed"],
            profile=doc.get("profile", "custom"),
            passes=doc["passes"],
            label_source=doc.get("label_source", "analytic"),
            attach_patterns=tuple(doc["attach_patterns"]),
            layout=_layout_from_dict(doc["layout"]),
            scan=ScanConfig(**doc["scan"]),
            augment=AugmentParams(**augment),
            grid=GridConfig(**doc["grid"]),
            net=NetConfig(**net),
            train=TrainConfig(**doc["train"]),
            prediction_s_per_region=doc.get("prediction_s_per_region", 1.3),
            thresholds=None
            if thresholds is None
            else {
                k: VolumeThresholds(v["lower_mm3"], v["upper_mm3"])
                for k, v in thresholds.items()
            },
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad run config: {exc}") from exc


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(doc)
