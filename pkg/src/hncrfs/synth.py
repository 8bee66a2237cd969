"""Synthetic survival cohorts and geometric volume phantoms.

All randomness comes from ``numpy.random.Generator`` with the PCG64 bit
generator, seeded explicitly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .pipeline import FeatureTable
from .survstat import SurvivalRecord
from .volume import GTVN, GTVP, LabelVolume, ScalarVolume

__all__ = [
    "GENERATOR_NAME",
    "SynthSpec",
    "Sphere",
    "generate_survival",
    "generate_multimodal_cohort",
    "generate_volume_phantom",
    "generate_imaging_cohort",
]

GENERATOR_NAME = "numpy.random.PCG64"


@dataclass(frozen=True)
class SynthSpec:
    n: int
    betas: tuple = ()
    censoring_rate: float = 0.0
    baseline_rate: float = 0.05
    seed: int = 0
    binary: bool = False

    def __post_init__(self):
        if self.n < 2:
            raise InvalidArgumentError("n must be >= 2")
        if not self.baseline_rate > 0:
            raise InvalidArgumentError("baseline_rate must be > 0")
        if not 0.0 <= self.censoring_rate < 1.0:
            raise InvalidArgumentError("censoring_rate must lie in [0, 1)")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))


def _exponential_times(rng, linear_predictor, baseline_rate):
    u = rng.random(len(linear_predictor))
    # 1 - u lies in (0, 1], keeping times finite
    return -np.log1p(-u) / (baseline_rate * np.exp(linear_predictor))


def _calibrated_censoring(event_times, target, unit_draws):
    """Scale exponential censoring draws so the censored fraction hits ``target``."""
    if target == 0.0:
        return np.full_like(event_times, np.inf)

    def frac(log_scale):
        return np.mean(math.exp(log_scale) * unit_draws < event_times)

    lo, hi = -30.0, 30.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        # a larger scale means later censoring, hence fewer censored patients
        if frac(mid) > target:
            lo = mid
        else:
            hi = mid
    return math.exp(hi) * unit_draws


def _survival_from_covariates(rng, X, betas, spec):
    lp = X @ np.asarray(betas, dtype=float) if X.shape[1] else np.zeros(X.shape[0])
    t_event = _exponential_times(rng, lp, spec.baseline_rate)
    unit = rng.exponential(1.0, size=len(t_event))
    t_cens = _calibrated_censoring(t_event, spec.censoring_rate, unit)
    event = t_event <= t_cens
    time = np.minimum(t_event, t_cens)
    time = np.maximum(time, np.finfo(float).tiny)
    return [SurvivalRecord(float(t), bool(e)) for t, e in zip(time, event)], lp


def generate_survival(spec: SynthSpec, n_noise_features: int = 0, modality: str = "clinical"):
    """Exponential proportional-hazards cohort with known coefficients.

    Columns ``planted_0..`` carry ``spec.betas``; ``noise_00..`` have zero
    effect. Returns ``(FeatureTable, records)``.
    """
    rng = np.random.default_rng(spec.seed)
    n, p = spec.n, len(spec.betas)
    if spec.binary:
        planted = rng.integers(0, 2, size=(n, p)).astype(float)
    else:
        planted = rng.standard_normal((n, p))
    noise = rng.standard_normal((n, n_noise_features))
    records, _ = _survival_from_covariates(rng, planted, spec.betas, spec)
    names = [f"planted_{i}" for i in range(p)] + [f"noise_{i:02d}" for i in range(n_noise_features)]
    ids = [f"P{i:04d}" for i in range(n)]
    table = FeatureTable(ids, names, np.hstack([planted, noise]), modality)
    return table, records


def generate_multimodal_cohort(n: int = 400, n_planted: int = 3, n_noise: int = 50, beta: float = 0.5,
                               censoring_rate: float = 0.25, baseline_rate: float = 0.05, seed: int = 0,
                               modalities=("clinical", "CT", "PET"), no_gtvp_fraction: float = 0.0,
                               null: bool = False):
    """One cohort, one feature table per modality, all driven by one hazard.

    Each modality gets ``n_planted`` informative columns with coefficient
    ``+/-beta`` (alternating sign) and ``n_noise`` null columns. With
    ``null=True`` every coefficient is zero. A ``no_gtvp_fraction`` of
    patients is dropped from the imaging tables to mimic an empty GTVp.

    Returns ``(tables, records, has_gtvp)`` where ``tables`` maps modality
    to :class:`FeatureTable` and ``has_gtvp`` maps patient id to bool.
    """
    rng = np.random.default_rng(seed)
    ids = [f"P{i:04d}" for i in range(n)]
    blocks = {m: rng.standard_normal((n, n_planted + n_noise)) for m in modalities}
    signs = np.array([1.0 if i % 2 == 0 else -1.0 for i in range(n_planted)])
    coef = np.zeros(n_planted + n_noise)
    if not null:
        coef[:n_planted] = beta * signs
    lp = sum(blocks[m] @ coef for m in modalities)
    spec = SynthSpec(n=n, censoring_rate=censoring_rate, baseline_rate=baseline_rate, seed=seed)
    t_event = _exponential_times(rng, lp, spec.baseline_rate)
    unit = rng.exponential(1.0, size=n)
    t_cens = _calibrated_censoring(t_event, censoring_rate, unit)
    time = np.maximum(np.minimum(t_event, t_cens), np.finfo(float).tiny)
    records = [SurvivalRecord(float(t), bool(e)) for t, e in zip(time, t_event <= t_cens)]

    no_gtvp = rng.random(n) < no_gtvp_fraction
    has_gtvp = {pid: not bool(flag) for pid, flag in zip(ids, no_gtvp)}
    names = [f"planted_{i}" for i in range(n_planted)] + [f"noise_{i:02d}" for i in range(n_noise)]
    tables = {}
    for m in modalities:
        if m == "clinical":
            tables[m] = FeatureTable(ids, names, blocks[m], m)
        else:
            keep = ~no_gtvp
            tables[m] = FeatureTable([pid for pid, k in zip(ids, keep) if k], names, blocks[m][keep], m)
    return tables, records, has_gtvp


@dataclass(frozen=True)
class Sphere:
    center: tuple  # mm, physical
    radius: float  # mm


@dataclass(frozen=True)
class PhantomIntensities:
    background: float = 0.0
    gtvp: float = 100.0
    gtvn: float = 60.0


@dataclass(frozen=True)
class _PhantomDefaults:
    ct: PhantomIntensities = field(default_factory=lambda: PhantomIntensities(0.0, 40.0, 30.0))
    pet: PhantomIntensities = field(default_factory=lambda: PhantomIntensities(1.0, 12.0, 6.0))


def generate_volume_phantom(gtvp: Sphere | None, gtvn_list=(), dims=(64, 64, 64), spacing=(2.0, 2.0, 2.0),
                            origin=(0.0, 0.0, 0.0), ct_intensities: PhantomIntensities | None = None,
                            pet_intensities: PhantomIntensities | None = None, noise_sd: float = 0.0,
                            seed: int = 0):
    """Spherical GTVp/GTVn phantom with constant (optionally noisy) intensities.

    A voxel belongs to a sphere when its center lies within the radius.
    GTVp wins where spheres overlap.

    Returns ``(LabelVolume, ScalarVolume CT, ScalarVolume PET)``.
    """
    defaults = _PhantomDefaults()
    ct_i = ct_intensities or defaults.ct
    pet_i = pet_intensities or defaults.pet
    spacing = tuple(float(s) for s in spacing)
    origin = tuple(float(o) for o in origin)
    axes = [o + s * np.arange(n) for o, s, n in zip(origin, spacing, dims)]
    lo = np.array([a[0] for a in axes])
    hi = np.array([a[-1] for a in axes])
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")

    def inside(sphere):
        c = np.asarray(sphere.center, dtype=float)
        if sphere.radius < max(spacing):
            raise InvalidArgumentError("sphere radius must be at least one voxel")
        if np.any(c - sphere.radius < lo - 1e-9) or np.any(c + sphere.radius > hi + 1e-9):
            raise InvalidArgumentError(f"sphere at {sphere.center} r={sphere.radius} leaves the volume")
        return (gx - c[0]) ** 2 + (gy - c[1]) ** 2 + (gz - c[2]) ** 2 <= sphere.radius ** 2

    labels = np.zeros(dims, dtype=np.uint8)
    for s in gtvn_list:
        labels[inside(s)] = GTVN
    if gtvp is not None:
        labels[inside(gtvp)] = GTVP

    rng = np.random.default_rng(seed)

    def fill(intens):
        vals = np.full(dims, intens.background, dtype=float)
        vals[labels == GTVP] = intens.gtvp
        vals[labels == GTVN] = intens.gtvn
        if noise_sd > 0:
            vals = vals + rng.normal(0.0, noise_sd, size=dims)
        return ScalarVolume(vals, spacing, origin)

    mask = LabelVolume(labels, spacing, origin)
    return mask, fill(ct_i), fill(pet_i)


@dataclass
class PhantomPatient:
    patient_id: str
    mask: LabelVolume  # predicted labels, possibly with a spurious distant node
    reference: LabelVolume  # ground truth without the spurious node
    ct: ScalarVolume
    pet: ScalarVolume
    clinical: object  # pipeline.ClinicalRecord


def generate_imaging_cohort(n: int = 40, seed: int = 0, dims=(48, 48, 48), spacing=(4.0, 4.0, 4.0),
                            censoring_rate: float = 0.25, spurious_fraction: float = 0.3,
                            no_gtvp_fraction: float = 0.05, missing_fraction: float = 0.3):
    """Small imaging cohort whose hazard depends on tumour size, PET uptake and HPV.

    Each patient has a spherical GTVp near one corner, 0-2 nearby nodes and,
    for a ``spurious_fraction`` of patients, an extra node ~159 mm away that
    only appears in the predicted mask. Clinical status fields are missing
    at random with probability ``missing_fraction``.
    """
    from .pipeline import ClinicalRecord

    rng = np.random.default_rng(seed)
    center = np.array([48.0, 48.0, 48.0])
    far = center + 92.0
    radius = rng.uniform(6.0, 16.0, n)
    pet_level = rng.normal(10.0, 3.0, n)
    hpv = rng.integers(0, 2, n)
    no_gtvp = rng.random(n) < no_gtvp_fraction
    z = lambda v: (v - v.mean()) / v.std()  # noqa: E731
    lp = 1.0 * z(radius) + 0.8 * z(pet_level) - 0.7 * hpv
    lp[no_gtvp] = 0.0
    spec = SynthSpec(n=n, censoring_rate=censoring_rate, seed=seed)
    t_event = _exponential_times(rng, lp, spec.baseline_rate)
    t_cens = _calibrated_censoring(t_event, censoring_rate, rng.exponential(1.0, n))
    time = np.maximum(np.minimum(t_event, t_cens), 1e-3)
    event = t_event <= t_cens

    patients = []
    for i in range(n):
        pid = f"SYN{i:03d}"
        nodes = []
        for _ in range(rng.integers(0, 3)):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            nodes.append(Sphere(tuple(center + rng.uniform(28.0, 36.0) * direction), 4.0 + rng.uniform(0, 2)))
        primary = None if no_gtvp[i] else Sphere(tuple(center), float(radius[i]))
        ct_i = PhantomIntensities(0.0, float(rng.normal(40.0, 10.0)), 30.0)
        pet_i = PhantomIntensities(1.0, float(pet_level[i]), 4.0)
        sub_seed = int(rng.integers(0, 2**31 - 1))
        ref, ct, pet = generate_volume_phantom(primary, nodes, dims, spacing, ct_intensities=ct_i,
                                               pet_intensities=pet_i, noise_sd=2.0, seed=sub_seed)
        mask = ref
        if rng.random() < spurious_fraction:
            mask, _, _ = generate_volume_phantom(primary, nodes + [Sphere(tuple(far), 8.0)], dims, spacing,
                                                 ct_intensities=ct_i, pet_intensities=pet_i, seed=sub_seed)

        def maybe(v):
            return None if rng.random() < missing_fraction else float(v)

        clinical = ClinicalRecord(
            patient_id=pid,
            gender="M" if rng.random() < 0.8 else "F",
            age=float(np.round(rng.normal(60.0, 9.0), 1)),
            tobacco=maybe(rng.integers(0, 2)),
            alcohol=maybe(rng.integers(0, 2)),
            performance_status=maybe(rng.integers(0, 3)),
            hpv_status=maybe(hpv[i]),
            surgery=float(rng.integers(0, 2)),
            chemotherapy=float(rng.random() < 0.85),
            time=float(time[i]),
            event=bool(event[i]),
        )
        patients.append(PhantomPatient(pid, mask, ref, ct, pet, clinical))
    return patients
