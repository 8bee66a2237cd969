"""First-order, shape and GLCM texture features for one labelled region.

Intensities are discretized with a fixed bin width anchored at the region
minimum. The GLCM is built per offset (13 unique 3-D directions at the
configured distance), features are computed per offset and then averaged.
This approximates common radiomics defaults; it is not a bit-for-bit
reimplementation of any particular toolkit.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateTextureError,
    EmptyRegionError,
    InvalidArgumentError,
    NoTumorError,
    ShapeMismatchError,
)
from .volume import GTVP, LabelVolume, ScalarVolume

__all__ = [
    "ExtractionSettings",
    "FeatureVector",
    "UNIQUE_OFFSETS",
    "discretize",
    "first_order_features",
    "shape_features",
    "glcm_matrices",
    "glcm_features",
    "extract_all",
    "FEATURE_NAMES",
]


def _unique_offsets():
    # one representative of each +/- pair among the 26 neighbours
    out = []
    for d in itertools.product((-1, 0, 1), repeat=3):
        if d == (0, 0, 0):
            continue
        if tuple(-c for c in d) in out:
            continue
        out.append(d)
    return tuple(out)


UNIQUE_OFFSETS = _unique_offsets()


@dataclass(frozen=True)
class ExtractionSettings:
    bin_width: float = 25.0
    glcm_distance: int = 1
    glcm_directions: tuple = UNIQUE_OFFSETS
    symmetric_glcm: bool = True

    def __post_init__(self):
        if not self.bin_width > 0:
            raise InvalidArgumentError("bin_width must be > 0")
        if int(self.glcm_distance) != self.glcm_distance or self.glcm_distance < 1:
            raise InvalidArgumentError("glcm_distance must be an integer >= 1")
        object.__setattr__(self, "glcm_directions", tuple(tuple(int(c) for c in d) for d in self.glcm_directions))


@dataclass(frozen=True)
class FeatureVector:
    names: tuple
    values: np.ndarray
    modality: str = ""

    def __post_init__(self):
        names = tuple(self.names)
        values = np.asarray(self.values, dtype=float)
        if len(set(names)) != len(names):
            raise InvalidArgumentError("feature names must be unique")
        if values.shape != (len(names),):
            raise InvalidArgumentError("one value per feature name required")
        if not np.all(np.isfinite(values)):
            bad = [n for n, v in zip(names, values) if not np.isfinite(v)]
            raise InvalidArgumentError(f"non-finite feature values: {bad}")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", values)

    def as_dict(self):
        return dict(zip(self.names, self.values.tolist()))

    def __getitem__(self, name):
        return float(self.values[self.names.index(name)])

    def __add__(self, other):
        return FeatureVector(self.names + other.names, np.concatenate([self.values, other.values]), self.modality)


def discretize(values, bin_width: float) -> np.ndarray:
    """1-based fixed-width bins anchored at ``min(values)``."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise EmptyRegionError("cannot discretize an empty region")
    if not bin_width > 0:
        raise InvalidArgumentError("bin_width must be > 0")
    return (np.floor((values - values.min()) / bin_width) + 1).astype(int)


def _region(vol, mask, class_label):
    if vol.dims != mask.dims:
        raise ShapeMismatchError(f"volume dims {vol.dims} != mask dims {mask.dims}")
    region = mask.labels == class_label
    if not region.any():
        raise EmptyRegionError(f"no voxels with label {class_label}")
    return region


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


FIRST_ORDER_NAMES = (
    "firstorder_mean",
    "firstorder_median",
    "firstorder_minimum",
    "firstorder_maximum",
    "firstorder_range",
    "firstorder_variance",
    "firstorder_std",
    "firstorder_skewness",
    "firstorder_kurtosis",
    "firstorder_energy",
    "firstorder_rms",
    "firstorder_mean_absolute_deviation",
    "firstorder_p10",
    "firstorder_p90",
    "firstorder_iqr",
    "firstorder_entropy",
)


def first_order_features(vol: ScalarVolume, mask: LabelVolume, class_label: int = GTVP,
                         settings: ExtractionSettings | None = None) -> FeatureVector:
    """Intensity statistics over the masked voxels.

    Skewness and excess kurtosis of a constant region are reported as 0.
    """
    settings = settings or ExtractionSettings()
    v = vol.values[_region(vol, mask, class_label)]
    mean = v.mean()
    dev = v - mean
    m2 = np.mean(dev ** 2)
    if m2 > 0:
        skew = np.mean(dev ** 3) / m2 ** 1.5
        kurt = np.mean(dev ** 4) / m2 ** 2 - 3.0
    else:
        skew = kurt = 0.0
    p10, p25, p75, p90 = np.percentile(v, [10, 25, 75, 90])
    bins = discretize(v, settings.bin_width)
    values = [
        mean,
        np.median(v),
        v.min(),
        v.max(),
        v.max() - v.min(),
        m2,
        math.sqrt(m2),
        skew,
        kurt,
        np.sum(v ** 2),
        math.sqrt(np.mean(v ** 2)),
        np.mean(np.abs(dev)),
        p10,
        p90,
        p75 - p25,
        _entropy(np.bincount(bins)),
    ]
    return FeatureVector(FIRST_ORDER_NAMES, values)


SHAPE_NAMES = (
    "shape_volume_ml",
    "shape_surface_area_mm2",
    "shape_surface_volume_ratio",
    "shape_sphericity",
)


def _exposed_face_area(region, spacing):
    sx, sy, sz = spacing
    face_area = (sy * sz, sx * sz, sx * sy)
    padded = np.pad(region, 1).astype(np.int8)
    area = 0.0
    for axis in range(3):
        faces = np.count_nonzero(np.diff(padded, axis=axis))
        area += faces * face_area[axis]
    return area


def shape_features(mask: LabelVolume, class_label: int = GTVP) -> FeatureVector:
    """Voxel-count volume, exposed-face surface area and derived ratios.

    The face-count surface overestimates the area of smooth objects, so
    sphericity stays below 1 even for digital spheres.
    """
    region = mask.labels == class_label
    count = int(region.sum())
    if count == 0:
        raise EmptyRegionError(f"no voxels with label {class_label}")
    volume_mm3 = count * float(np.prod(mask.spacing))
    area = _exposed_face_area(region, mask.spacing)
    sphericity = math.pi ** (1.0 / 3.0) * (6.0 * volume_mm3) ** (2.0 / 3.0) / area
    values = [count * mask.voxel_volume_ml, area, area / volume_mm3, sphericity]
    return FeatureVector(SHAPE_NAMES, values)


def _bin_image(vol, region, bin_width):
    binned = np.zeros(vol.dims, dtype=int)
    binned[region] = discretize(vol.values[region], bin_width)
    return binned


def _shifted_pairs(binned, region, offset):
    """Bins of (voxel, voxel + offset) for every pair with both ends in the region."""
    src, dst = [], []
    for d, n in zip(offset, binned.shape):
        if abs(d) >= n:
            return np.zeros(0, int), np.zeros(0, int)
        src.append(slice(max(0, -d), n - max(0, d)))
        dst.append(slice(max(0, d), n - max(0, -d)))
    src, dst = tuple(src), tuple(dst)
    both = region[src] & region[dst]
    return binned[src][both], binned[dst][both]


def glcm_matrices(vol: ScalarVolume, mask: LabelVolume, class_label: int = GTVP,
                  settings: ExtractionSettings | None = None) -> np.ndarray:
    """Raw co-occurrence counts, shape ``(n_offsets, Ng, Ng)``.

    Bin ``b`` maps to row/column ``b - 1``.
    """
    settings = settings or ExtractionSettings()
    region = _region(vol, mask, class_label)
    binned = _bin_image(vol, region, settings.bin_width)
    ng = int(binned.max())
    mats = np.zeros((len(settings.glcm_directions), ng, ng))
    for k, direction in enumerate(settings.glcm_directions):
        offset = tuple(settings.glcm_distance * c for c in direction)
        a, b = _shifted_pairs(binned, region, offset)
        np.add.at(mats[k], (a - 1, b - 1), 1.0)
        if settings.symmetric_glcm:
            mats[k] += mats[k].T.copy()
    return mats


GLCM_NAMES = (
    "glcm_joint_energy",
    "glcm_joint_entropy",
    "glcm_contrast",
    "glcm_correlation",
    "glcm_idm",
    "glcm_autocorrelation",
    "glcm_cluster_shade",
    "glcm_cluster_prominence",
)


def _glcm_feature_row(p):
    ng = p.shape[0]
    i, j = np.meshgrid(np.arange(1, ng + 1), np.arange(1, ng + 1), indexing="ij")
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    levels = np.arange(1, ng + 1)
    mu_x = float(px @ levels)
    mu_y = float(py @ levels)
    sd_x = math.sqrt(max(float(px @ (levels - mu_x) ** 2), 0.0))
    sd_y = math.sqrt(max(float(py @ (levels - mu_y) ** 2), 0.0))
    autocorr = float((i * j * p).sum())
    if sd_x * sd_y > 1e-12:
        corr = (autocorr - mu_x * mu_y) / (sd_x * sd_y)
    else:
        corr = 1.0
    nz = p[p > 0]
    cluster = i + j - mu_x - mu_y
    return [
        float((p ** 2).sum()),
        float(-(nz * np.log2(nz)).sum()) + 0.0,
        float(((i - j) ** 2 * p).sum()),
        corr,
        float((p / (1.0 + (i - j) ** 2)).sum()),
        autocorr,
        float((cluster ** 3 * p).sum()),
        float((cluster ** 4 * p).sum()),
    ]


def glcm_features(vol: ScalarVolume, mask: LabelVolume, class_label: int = GTVP,
                  settings: ExtractionSettings | None = None) -> FeatureVector:
    """Texture features averaged over offsets that have at least one pair."""
    mats = glcm_matrices(vol, mask, class_label, settings)
    totals = mats.sum(axis=(1, 2))
    valid = totals > 0
    if not valid.any():
        raise DegenerateTextureError("no in-region voxel pairs at the configured offsets")
    rows = [_glcm_feature_row(m / t) for m, t in zip(mats[valid], totals[valid])]
    return FeatureVector(GLCM_NAMES, np.mean(rows, axis=0))


FEATURE_NAMES = FIRST_ORDER_NAMES + SHAPE_NAMES + GLCM_NAMES


def extract_modality(vol: ScalarVolume, mask: LabelVolume, modality: str,
                     settings: ExtractionSettings | None = None, class_label: int = GTVP) -> FeatureVector:
    if vol.dims != mask.dims:
        raise ShapeMismatchError(f"{modality} dims {vol.dims} != mask dims {mask.dims}")
    if not np.any(mask.labels == class_label):
        raise NoTumorError(f"no voxels with label {class_label} for {modality} extraction")
    fv = (first_order_features(vol, mask, class_label, settings)
          + shape_features(mask, class_label)
          + glcm_features(vol, mask, class_label, settings))
    return FeatureVector(fv.names, fv.values, modality)


def extract_all(ct: ScalarVolume, pet: ScalarVolume, mask: LabelVolume,
                settings: ExtractionSettings | None = None):
    """CT and PET feature vectors over the GTVp region.

    Both vectors follow the :data:`FEATURE_NAMES` order.

    Raises
    ------
    NoTumorError
        The mask has no GTVp voxels; callers fall back to clinical-only risk.
    """
    for name, vol in (("CT", ct), ("PET", pet)):
        if vol.dims != mask.dims or not np.allclose(vol.spacing, mask.spacing):
            raise ShapeMismatchError(f"{name} grid does not match the mask grid")
    return (extract_modality(ct, mask, "CT", settings),
            extract_modality(pet, mask, "PET", settings))
