"""3D voxel grids and the GTVp/GTVn label post-processing.

Arrays are indexed ``[i, j, k]`` along x, y, z. The physical position of a
voxel center is ``origin + spacing * (i, j, k)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateInputError,
    InvalidArgumentError,
    LabelValidationError,
    ShapeMismatchError,
)

__all__ = [
    "BACKGROUND",
    "GTVP",
    "GTVN",
    "ScalarVolume",
    "LabelVolume",
    "NodeComponent",
    "RemovalReport",
    "NodeStatistics",
    "connected_components",
    "reference_centroid",
    "centroid_distance",
    "filter_distant_nodes",
    "dice",
    "aggregated_dice",
    "resample_trilinear",
    "resample_nearest",
    "zscore_normalize",
    "node_statistics",
    "DEFAULT_D_MAX_MM",
]

BACKGROUND, GTVP, GTVN = 0, 1, 2
VALID_LABELS = (BACKGROUND, GTVP, GTVN)
DEFAULT_D_MAX_MM = 150.0

_STRUCTURE_26 = np.ones((3, 3, 3), dtype=bool)


def _check_geometry(shape, spacing, origin):
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise InvalidArgumentError(f"volume must be 3-D with positive dims, got shape {shape}")
    spacing = tuple(float(s) for s in spacing)
    origin = tuple(float(o) for o in origin)
    if len(spacing) != 3 or any(not s > 0 for s in spacing):
        raise InvalidArgumentError(f"spacing components must be > 0, got {spacing}")
    if len(origin) != 3:
        raise InvalidArgumentError("origin must have three components")
    return spacing, origin


@dataclass(frozen=True)
class ScalarVolume:
    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        spacing, origin = _check_geometry(values.shape, self.spacing, self.origin)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self):
        return self.values.shape

    def flat_values(self) -> np.ndarray:
        """Values in x-fastest order."""
        return self.values.ravel(order="F")


@dataclass(frozen=True)
class LabelVolume:
    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        raw = np.asarray(self.labels)
        if raw.dtype.kind == "f":
            if not np.all(np.isfinite(raw)) or np.any(raw != np.round(raw)):
                raise LabelValidationError("label volume holds non-integer values")
        labels = raw.astype(np.int64)
        bad = np.setdiff1d(np.unique(labels), VALID_LABELS)
        if bad.size:
            raise LabelValidationError(f"label value {int(bad[0])} outside {{0, 1, 2}}")
        labels = labels.astype(np.uint8)
        spacing, origin = _check_geometry(labels.shape, self.spacing, self.origin)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self):
        return self.labels.shape

    @property
    def voxel_volume_ml(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz / 1000.0

    def with_labels(self, labels) -> "LabelVolume":
        return LabelVolume(labels, self.spacing, self.origin)


@dataclass(frozen=True)
class NodeComponent:
    class_label: int
    voxel_count: int
    volume_ml: float
    centroid: tuple
    index: int = 0  # label id within the component map

    def as_dict(self):
        return {
            "class_label": self.class_label,
            "voxel_count": self.voxel_count,
            "volume_ml": self.volume_ml,
            "centroid_mm": list(self.centroid),
        }


def _index_to_physical(vol, index_coords):
    return tuple(float(o + s * c) for o, s, c in zip(vol.origin, vol.spacing, index_coords))


def _label_components(vol: LabelVolume, class_label: int):
    return ndimage.label(vol.labels == class_label, structure=_STRUCTURE_26)


def connected_components(vol: LabelVolume, class_label: int) -> list[NodeComponent]:
    """26-connected components of one class, largest first."""
    if class_label not in (GTVP, GTVN):
        raise InvalidArgumentError("class_label must be 1 (GTVp) or 2 (GTVn)")
    component_map, count = _label_components(vol, class_label)
    return _components_from_map(vol, class_label, component_map, count)


def _components_from_map(vol, class_label, component_map, count):
    if count == 0:
        return []
    ids = np.arange(1, count + 1)
    sizes = ndimage.sum_labels(np.ones(vol.dims), component_map, ids).astype(int)
    centers = ndimage.center_of_mass(np.ones(vol.dims), component_map, ids)
    comps = [
        NodeComponent(
            class_label=class_label,
            voxel_count=int(size),
            volume_ml=int(size) * vol.voxel_volume_ml,
            centroid=_index_to_physical(vol, center),
            index=int(i),
        )
        for i, size, center in zip(ids, sizes, centers)
    ]
    comps.sort(key=lambda c: -c.voxel_count)
    return comps


def reference_centroid(vol: LabelVolume):
    """Center of mass of all GTVp voxels, or None when there is no GTVp."""
    idx = np.argwhere(vol.labels == GTVP)
    if len(idx) == 0:
        return None
    return _index_to_physical(vol, idx.mean(axis=0))


def centroid_distance(p, n) -> float:
    """Euclidean distance between two physical points (mm)."""
    (xp, yp, zp), (xn, yn, zn) = p, n
    return math.sqrt((xp - xn) ** 2 + (yp - yn) ** 2 + (zp - zn) ** 2)


@dataclass
class RemovalReport:
    d_max: float
    reference: tuple | None
    removed: list = field(default_factory=list)  # (NodeComponent, distance)
    kept: list = field(default_factory=list)

    @property
    def no_reference(self) -> bool:
        return self.reference is None

    def as_dict(self):
        def entry(comp, dist):
            d = comp.as_dict()
            d["distance_mm"] = dist
            return d

        return {
            "d_max_mm": self.d_max,
            "no_reference": self.no_reference,
            "reference_centroid_mm": None if self.reference is None else list(self.reference),
            "removed": [entry(c, d) for c, d in self.removed],
            "kept": [entry(c, d) for c, d in self.kept],
        }


def filter_distant_nodes(vol: LabelVolume, d_max: float = DEFAULT_D_MAX_MM):
    """Relabel GTVn components farther than ``d_max`` mm from the GTVp centroid.

    Returns the filtered volume and a :class:`RemovalReport`. Without any GTVp
    voxels the input is returned unchanged and the report flags it.
    """
    if not d_max > 0:
        raise InvalidArgumentError("d_max must be > 0")
    ref = reference_centroid(vol)
    report = RemovalReport(d_max=float(d_max), reference=ref)
    if ref is None:
        return vol, report

    component_map, count = _label_components(vol, GTVN)
    labels = vol.labels.copy()
    for comp in _components_from_map(vol, GTVN, component_map, count):
        dist = centroid_distance(ref, comp.centroid)
        if dist > d_max:
            labels[component_map == comp.index] = BACKGROUND
            report.removed.append((comp, dist))
        else:
            report.kept.append((comp, dist))
    return vol.with_labels(labels), report


def dice(a: LabelVolume, b: LabelVolume, class_label: int) -> float:
    """Dice overlap of one class. Two empty masks score 1, one empty scores 0."""
    if a.dims != b.dims:
        raise ShapeMismatchError(f"dims differ: {a.dims} vs {b.dims}")
    ma = a.labels == class_label
    mb = b.labels == class_label
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(ma & mb)) / total


def aggregated_dice(pairs, class_label: int) -> float:
    """Dice pooled over many (prediction, reference) pairs: 2*sum|A&B| / sum(|A|+|B|)."""
    inter = total = 0
    for a, b in pairs:
        if a.dims != b.dims:
            raise ShapeMismatchError(f"dims differ: {a.dims} vs {b.dims}")
        ma = a.labels == class_label
        mb = b.labels == class_label
        inter += int(np.count_nonzero(ma & mb))
        total += int(ma.sum()) + int(mb.sum())
    return 1.0 if total == 0 else 2.0 * inter / total


def _target_grid(dims, spacing, origin, target_spacing):
    target_spacing = tuple(float(s) for s in target_spacing)
    if len(target_spacing) != 3 or any(not s > 0 for s in target_spacing):
        raise InvalidArgumentError("target spacing components must be > 0")
    new_dims = tuple(max(1, int(round(n * s / t))) for n, s, t in zip(dims, spacing, target_spacing))
    # keep the physical extent: first new center sits half a new voxel inside the old outer edge
    new_origin = tuple(o - s / 2.0 + t / 2.0 for o, s, t in zip(origin, spacing, target_spacing))
    axes = [
        (no + t * np.arange(nd) - o) / s
        for nd, no, t, o, s in zip(new_dims, new_origin, target_spacing, origin, spacing)
    ]
    coords = np.meshgrid(*axes, indexing="ij")
    return new_dims, target_spacing, new_origin, coords


def resample_trilinear(vol: ScalarVolume, target_spacing) -> ScalarVolume:
    """Trilinear resampling onto a grid of ``target_spacing`` over the same extent.

    Samples outside the outermost voxel centers clamp to the edge value.
    """
    if tuple(float(s) for s in target_spacing) == vol.spacing:
        return ScalarVolume(vol.values.copy(), vol.spacing, vol.origin)
    _, spacing, origin, coords = _target_grid(vol.dims, vol.spacing, vol.origin, target_spacing)
    clamped = [np.clip(c, 0, n - 1) for c, n in zip(coords, vol.dims)]
    out = ndimage.map_coordinates(vol.values, clamped, order=1, mode="nearest")
    return ScalarVolume(out, spacing, origin)


def resample_nearest(vol: LabelVolume, target_spacing) -> LabelVolume:
    """Nearest-neighbour resampling; never introduces new labels."""
    if tuple(float(s) for s in target_spacing) == vol.spacing:
        return LabelVolume(vol.labels.copy(), vol.spacing, vol.origin)
    _, spacing, origin, coords = _target_grid(vol.dims, vol.spacing, vol.origin, target_spacing)
    idx = [np.clip(np.floor(c + 0.5).astype(int), 0, n - 1) for c, n in zip(coords, vol.dims)]
    return LabelVolume(vol.labels[idx[0], idx[1], idx[2]], spacing, origin)


def zscore_normalize(vol: ScalarVolume) -> ScalarVolume:
    """Standardize all voxels to zero mean and unit (population) std."""
    v = vol.values
    if v.size < 2:
        raise DegenerateInputError("z-score needs at least two voxels")
    mean = v.mean()
    std = v.std()
    if not std > 0:
        raise DegenerateInputError("z-score undefined for a constant volume")
    return ScalarVolume((v - mean) / std, vol.spacing, vol.origin)


@dataclass(frozen=True)
class NodeStatistics:
    gtvp_count: int
    gtvp_volume_ml: float
    gtvn_count: int
    gtvn_volume_ml: float
    smallest_gtvn_ml: float
    gtvn_distances_mm: tuple

    @property
    def has_gtvp(self) -> bool:
        return self.gtvp_count > 0

    def as_dict(self):
        return {
            "gtvp_count": self.gtvp_count,
            "gtvp_volume_ml": self.gtvp_volume_ml,
            "gtvn_count": self.gtvn_count,
            "gtvn_volume_ml": self.gtvn_volume_ml,
            "smallest_gtvn_ml": self.smallest_gtvn_ml,
            "gtvn_distances_mm": list(self.gtvn_distances_mm),
        }


def node_statistics(vol: LabelVolume) -> NodeStatistics:
    """Per-patient counts, volumes and node-to-primary distances.

    ``smallest_gtvn_ml`` is 0 when there are no nodes; distances are empty
    when either class is missing.
    """
    primaries = connected_components(vol, GTVP)
    nodes = connected_components(vol, GTVN)
    ref = reference_centroid(vol)
    distances = () if ref is None else tuple(centroid_distance(ref, c.centroid) for c in nodes)
    return NodeStatistics(
        gtvp_count=len(primaries),
        gtvp_volume_ml=sum(c.voxel_count for c in primaries) * vol.voxel_volume_ml,
        gtvn_count=len(nodes),
        gtvn_volume_ml=sum(c.voxel_count for c in nodes) * vol.voxel_volume_ml,
        smallest_gtvn_ml=min((c.volume_ml for c in nodes), default=0.0),
        gtvn_distances_mm=distances,
    )
