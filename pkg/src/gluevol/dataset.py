"""Annotated, augmented, split dataset construction.

Volume labels come from the geometric annotation pipeline (plane fit,
frame, crop, close, triangulate, projected-face volume) on unattached
scans; attached deposits inherit the per-(column, type) mean of those
annotations. Each scan is augmented by sliding crop windows plus Gaussian
z-noise levels, and split train/test by deposit position (the last deposit
of each circuit/type tests, the rest train) so augmentations never leak
across the split.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import geom3d
from .geom3d import BoundingBox2, EmptyGlueWarning, Plane, PointCloud
from .scansim import PcbModel, RegionSpec, ScanConfig, scan_lattice
from .util import DOMAIN_AUGMENT, derived_rng, floor_ratio, stable_u32

# Annotated volumes below this are flagged as empty deposits.
EMPTY_GLUE_FLOOR_MM3 = 1e-4


class MissingColumnAnnotation(ValueError):
    """A (column, glue type) has no unattached annotation to propagate."""


class IncompleteScanSet(ValueError):
    """Manifest build found scan files missing from the workspace."""


@dataclass(frozen=True)
class AugmentParams:
    """Crop/noise augmentation parameters.

    Windows cover ``window_fraction`` of each axis range and slide in steps
    of max(shift_fraction * range, min_step) over the leftover slack; each
    crop is emitted at every noise level, sigma = level * z-range.
    """

    window_fraction: float = 0.92
    shift_fraction: float = 0.02
    min_step_um: float = 20.0
    noise_levels: tuple[float, ...] = (0.0, 0.03, 0.06, 0.09)
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.window_fraction < 1):
            raise ValueError("window_fraction must be in (0, 1)")
        levels = self.noise_levels
        if any(l < 0 for l in levels) or any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("noise levels must be non-negative and increasing")


@dataclass(frozen=True)
class Sample:
    """One augmented training/test sample and its provenance tags."""

    path: str
    glue_type: str
    attached: bool
    pcb: int
    row: int
    col: int
    deposit: int
    scan_pass: int
    crop_index: int
    noise_level: float
    volume_mm3: float
    annotated_mm3: float | None
    split: str


@dataclass
class Manifest:
    samples: list[Sample]
    provenance: dict = field(default_factory=dict)

    def counts(self) -> dict[tuple[str, bool, str], int]:
        table: dict[tuple[str, bool, str], int] = {}
        for s in self.samples:
            key = (s.glue_type, s.attached, s.split)
            table[key] = table.get(key, 0) + 1
        return table

    def to_json(self, path) -> None:
        doc = {
            "samples": [asdict(s) for s in self.samples],
            "provenance": self.provenance,
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "Manifest":
        doc = json.loads(Path(path).read_text())
        samples = [Sample(**record) for record in doc["samples"]]
        return cls(samples=samples, provenance=doc.get("provenance", {}))

    def to_csv(self, path) -> None:
        """Label table export for audit."""
        fields = [f for f in Sample.__dataclass_fields__]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(fields)
            for s in self.samples:
                writer.writerow([getattr(s, f) for f in fields])


def annotate(
    cloud: PointCloud,
    footprint: BoundingBox2 | None = None,
    step_mm: float | None = None,
    ransac_threshold: float = 0.005,
    ransac_iterations: int = 500,
    ransac_seed: int = 0,
) -> float:
    """Estimated deposit volume (mm^3) of an unattached regional scan.

    Fits the substrate plane, moves the cloud into the plane frame, crops to
    the glue footprint, closes the surface against the plane, triangulates
    the raster lattice and sums projected-face volumes. Footprint and step
    default from the scan metadata.
    """
    if step_mm is None:
        step_mm = cloud.meta["step_um"] * 1e-3
    if footprint is None and "footprint" in cloud.meta:
        footprint = BoundingBox2(*cloud.meta["footprint"])
    plane, _ = geom3d.fit_plane_ransac(
        cloud, ransac_threshold, ransac_iterations, ransac_seed
    )
    framed = geom3d.to_plane_frame(cloud, plane)
    if footprint is not None:
        framed = geom3d.crop_xy(framed, footprint, allow_empty=False)
    substrate = Plane.xy()
    closed = geom3d.close_with_projection(framed, substrate)
    mesh = geom3d.triangulate_lattice(closed, step_mm)
    # Substrate points sit a hair below the fitted plane (the RANSAC inlier
    # band includes the deposit skirt, lifting the fit); clamp those faces
    # to zero contribution instead of warning on every scan.
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", geom3d.NegativeSideVertices)
        volume = geom3d.mesh_volume_over_plane(mesh, substrate, clamp=True)
    if volume < EMPTY_GLUE_FLOOR_MM3:
        warnings.warn(
            f"annotated volume {volume:.2e} mm^3 below empty-deposit floor",
            EmptyGlueWarning,
            stacklevel=2,
        )
    return volume


@dataclass(frozen=True)
class AnnotationRecord:
    pcb: int
    row: int
    col: int
    glue_type: str
    deposit: int
    scan_pass: int
    volume_mm3: float


class AnnotationTable:
    """Per-scan annotation volumes with (column, type) aggregation."""

    def __init__(self, records: Iterable[AnnotationRecord] = ()):
        self.records: list[AnnotationRecord] = list(records)

    def add(self, record: AnnotationRecord) -> None:
        self.records.append(record)

    def column_mean(self, col: int, glue_type: str) -> float:
        values = [
            r.volume_mm3
            for r in self.records
            if r.col == col and r.glue_type == glue_type
        ]
        if not values:
            raise MissingColumnAnnotation(f"no annotation for column {col} type {glue_type}")
        return sum(values) / len(values)

    def deposit_mean(self, pcb: int, row: int, col: int, glue_type: str, deposit: int) -> float | None:
        values = [
            r.volume_mm3
            for r in self.records
            if (r.pcb, r.row, r.col, r.glue_type, r.deposit)
            == (pcb, row, col, glue_type, deposit)
        ]
        return sum(values) / len(values) if values else None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pcb", "row", "col", "glue_type", "deposit", "scan_pass", "volume_mm3"])
            for r in self.records:
                writer.writerow(
                    [r.pcb, r.row, r.col, r.glue_type, r.deposit, r.scan_pass, r.volume_mm3]
                )

    @classmethod
    def from_csv(cls, path) -> "AnnotationTable":
        table = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                table.add(
                    AnnotationRecord(
                        pcb=int(row["pcb"]),
                        row=int(row["row"]),
                        col=int(row["col"]),
                        glue_type=row["glue_type"],
                        deposit=int(row["deposit"]),
                        scan_pass=int(row["scan_pass"]),
                        volume_mm3=float(row["volume_mm3"]),
                    )
                )
        return table


def crop_offsets(range_mm: float, params: AugmentParams) -> np.ndarray:
    """Window start offsets along one axis, centered over the slide slack."""
    window = params.window_fraction * range_mm
    slack = range_mm - window
    step = max(params.shift_fraction * range_mm, params.min_step_um * 1e-3)
    count = floor_ratio(slack, step) + 1 if slack > 0 else 1
    margin = (slack - (count - 1) * step) / 2.0
    return margin + step * np.arange(count)


def crop_counts(x_range: float, y_range: float, params: AugmentParams) -> tuple[int, int]:
    return len(crop_offsets(x_range, params)), len(crop_offsets(y_range, params))


def augment(cloud: PointCloud, params: AugmentParams) -> list[PointCloud]:
    """Crop/noise augmentations of one scan, deterministic per seed.

    Emits every crop window at every noise level, tagged with ``crop`` and
    ``noise_level`` metadata. Level 0 leaves z untouched.
    """
    lo, hi = cloud.bounds()
    x_range, y_range = hi[0] - lo[0], hi[1] - lo[1]
    z_range = hi[2] - lo[2]
    offs_x = crop_offsets(x_range, params)
    offs_y = crop_offsets(y_range, params)
    window_x = params.window_fraction * x_range
    window_y = params.window_fraction * y_range
    rng = derived_rng(
        params.seed,
        DOMAIN_AUGMENT,
        stable_u32(str(cloud.meta.get("region_id", ""))),
        int(cloud.meta.get("pass", 0)),
        int(cloud.meta.get("pcb", 0)),
    )
    out: list[PointCloud] = []
    crop_index = 0
    for ox in offs_x:
        for oy in offs_y:
            box = BoundingBox2(
                lo[0] + ox, lo[0] + ox + window_x, lo[1] + oy, lo[1] + oy + window_y
            )
            cropped = geom3d.crop_xy(cloud, box)
            for level in params.noise_levels:
                xyz = cropped.xyz
                if level > 0:
                    xyz = xyz.copy()
                    xyz[:, 2] += rng.normal(0.0, level * z_range, size=len(xyz))
                sample = PointCloud(xyz, cropped.meta)
                sample.meta.update(crop=crop_index, noise_level=level)
                out.append(sample)
            crop_index += 1
    return out


def split_for(region: RegionSpec, deposits_per_type: int) -> str:
    """Last deposit of each circuit/type tests; the others train."""
    return "test" if region.deposit == deposits_per_type - 1 else "train"


def sample_filename(pcb_index: int, region: RegionSpec, scan_pass: int,
                    crop_index: int, level_index: int) -> str:
    return (
        f"pcb{pcb_index}_c{region.row}{region.col}_t{region.glue_type}"
        f"_d{region.deposit}_pass{scan_pass}_crop{crop_index}_n{level_index}.ggpc"
    )


def expected_crop_counts(region: RegionSpec, scan_cfg: ScanConfig,
                         params: AugmentParams) -> tuple[int, int]:
    """Crop grid size from the exact raster lattice extent (no scan needed)."""
    xs, ys = scan_lattice(region, scan_cfg)
    x_range = float(xs[-1] - xs[0]) if len(xs) > 1 else 0.0
    y_range = float(ys[-1] - ys[0]) if len(ys) > 1 else 0.0
    return crop_counts(x_range, y_range, params)


def propagate_labels(manifest: Manifest, annotations: AnnotationTable) -> Manifest:
    """Attached samples get the mean annotated volume of unattached deposits
    in the same column and glue type; unattached samples are untouched."""
    means: dict[tuple[int, str], float] = {}
    samples = []
    for s in manifest.samples:
        if s.attached:
            key = (s.col, s.glue_type)
            if key not in means:
                means[key] = annotations.column_mean(*key)
            s = Sample(**{**asdict(s), "volume_mm3": means[key]})
        samples.append(s)
    return Manifest(samples=samples, provenance=dict(manifest.provenance))


def build_manifest(
    pcbs: Sequence[PcbModel],
    scan_cfg: ScanConfig,
    params: AugmentParams,
    passes: int = 1,
    annotations: AnnotationTable | None = None,
    label_source: str = "analytic",
    scan_dir: Path | None = None,
    provenance: Mapping | None = None,
) -> Manifest:
    """Assemble the sample manifest for a set of scanned panels.

    Unattached labels default to the simulator's exact volumes
    (``label_source="analytic"``); ``"annotated"`` switches them to the
    per-deposit mean of geometric annotations, reproducing the noisy-label
    regime. Attached labels always propagate from same-column unattached
    annotations. With ``scan_dir`` set, missing scan files raise
    IncompleteScanSet.
    """
    if label_source not in ("analytic", "annotated"):
        raise ValueError(f"unknown label source {label_source!r}")
    if label_source == "annotated" and annotations is None:
        raise ValueError("annotated label source needs an annotation table")
    from .scansim import analytic_volume, scan_filename  # cycle-free import

    samples: list[Sample] = []
    column_means: dict[tuple[int, str], float] = {}
    for pcb in pcbs:
        deposits_per_type = pcb.layout.deposits_per_type
        for region in pcb.regions():
            n_cx, n_cy = expected_crop_counts(region, scan_cfg, params)
            split = split_for(region, deposits_per_type)
            annotated = None
            if annotations is not None and not region.attached:
                annotated = annotations.deposit_mean(
                    pcb.index, region.row, region.col, region.glue_type, region.deposit
                )
            if region.attached:
                if annotations is None:
                    raise MissingColumnAnnotation(
                        "attached regions need an annotation table to label"
                    )
                key = (region.col, region.glue_type)
                if key not in column_means:
                    column_means[key] = annotations.column_mean(*key)
                label = column_means[key]
            elif label_source == "annotated":
                if annotated is None:
                    raise MissingColumnAnnotation(
                        f"no annotation for deposit {region.region_id}"
                    )
                label = annotated
            else:
                label = analytic_volume(region)
            for scan_pass in range(passes):
                if scan_dir is not None:
                    scan_path = Path(scan_dir) / scan_filename(pcb.index, region, scan_pass)
                    if not scan_path.exists():
                        raise IncompleteScanSet(f"missing scan {scan_path}")
                for crop_index in range(n_cx * n_cy):
                    for level_index, level in enumerate(params.noise_levels):
                        samples.append(
                            Sample(
                                path=sample_filename(
                                    pcb.index, region, scan_pass, crop_index, level_index
                                ),
                                glue_type=region.glue_type,
                                attached=region.attached,
                                pcb=pcb.index,
                                row=region.row,
                                col=region.col,
                                deposit=region.deposit,
                                scan_pass=scan_pass,
                                crop_index=crop_index,
                                noise_level=level,
                                volume_mm3=label,
                                annotated_mm3=annotated,
                                split=split,
                            )
                        )
    return Manifest(samples=samples, provenance=dict(provenance or {}))
