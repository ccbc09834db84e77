"""Seeded synthetic DWI/ADC cohort generator.

Each subject is an ellipsoidal "brain" with a smooth intensity gradient
on a zero background. CE-positive subjects carry 1..3 spherical lesions,
bright on DWI (tissue mean boosted by dwi_lesion_contrast) and dark on
ADC (tissue mean scaled by adc_lesion_factor), both modalities sharing
geometry. Rician noise models the magnitude-image corruption, with a
higher sigma on DWI than on ADC. Auxiliary AHT and functional-status
labels are sampled so that larger lesion burden raises P(AHT=1) and the
expected score; the effect sizes are configuration, not clinical claims.

All randomness derives from numpy SeedSequence spawning, so per-subject
generation is order-independent and reproducible.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .volume_io import CohortManifest, ScanRecord, Volume, write_manifest, write_mvol

SESSION_IDS = ("base", "fu1")


@dataclass
class PhantomParams:
    dims: tuple = (64, 64, 64)
    spacing_mm: tuple = (1.5, 1.5, 1.5)
    lesion_prevalence: float = 0.5
    lesion_radius_range: tuple = (4.0, 9.0)  # voxels
    lesion_count_range: tuple = (1, 3)
    dwi_lesion_contrast: float = 0.45  # fractional boost over tissue mean (3 x default DWI sigma)
    adc_lesion_factor: float = 0.4     # lesion level as a fraction of tissue mean
    dwi_noise_sigma: float = 0.15      # relative to tissue mean
    adc_noise_sigma: float = 0.05
    brain_semi_axes_frac: tuple = (0.80, 0.88, 0.88)  # of each half-extent
    gradient_amplitude: float = 0.15
    sessions_range: tuple = (1, 2)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if not 0.0 <= self.lesion_prevalence <= 1.0:
            raise ValidationError("bad prevalence", f"prevalence must be in [0,1], got {self.lesion_prevalence}")
        if self.lesion_radius_range[0] <= 0 or self.lesion_radius_range[0] > self.lesion_radius_range[1]:
            raise ValidationError("bad radius range", f"bad lesion radius range {self.lesion_radius_range}")
        if self.dwi_noise_sigma < 0 or self.adc_noise_sigma < 0:
            raise ValidationError("bad sigma", "noise sigmas must be >= 0")

    def semi_axes(self):
        return tuple(f * (d / 2.0) for f, d in zip(self.brain_semi_axes_frac, self.dims))


@dataclass
class SubjectMeta:
    ce_label: int
    aht_label: int
    fss_score: int
    n_sessions: int
    centers: list = field(default_factory=list)   # voxel coords (z,y,x)
    radii: list = field(default_factory=list)     # voxels
    lesion_burden: float = 0.0                    # sum r^3 over ellipsoid semi-axis product
    lesion_hemisphere: int | None = None          # 1 if first lesion right of midline


def sample_ce_labels(n, prevalence, seed):
    """The cohort's seeded CE assignment; re-derivable independently of
    volume generation (summary counts come from exactly this draw)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    return (rng.random(n) < prevalence).astype(np.int64)


def sample_subject_meta(rng, params, ce_label):
    """Lesion geometry and auxiliary labels for one subject."""
    semi = params.semi_axes()
    min_semi = min(semi)
    centers, radii = [], []
    if ce_label:
        lo, hi = params.lesion_count_range
        n_lesions = int(rng.integers(lo, hi + 1))
        for _ in range(n_lesions):
            r = float(rng.uniform(*params.lesion_radius_range))
            reach = 1.0 - r / min_semi
            if reach <= 0:
                raise ValidationError("lesion too large",
                                      f"lesion radius {r:.1f} does not fit inside brain semi-axes {tuple(round(s, 1) for s in semi)}")
            # uniform direction, radius biased outward like a uniform ball draw
            vec = rng.standard_normal(3)
            vec /= max(np.linalg.norm(vec), 1e-12)
            rho = reach * rng.random() ** (1.0 / 3.0)
            center = tuple((d - 1) / 2.0 + rho * v * s for d, v, s in zip(params.dims, vec, semi))
            centers.append(center)
            radii.append(r)
    burden = float(sum(r ** 3 for r in radii) / (semi[0] * semi[1] * semi[2]))
    p_aht = 1.0 / (1.0 + np.exp(-(-1.8 + 220.0 * burden)))
    aht = int(rng.random() < p_aht)
    fss = int(np.clip(round(2.0 + 450.0 * burden + 1.2 * rng.standard_normal()), 0, 30))
    hemisphere = None
    if centers:
        hemisphere = int(centers[0][2] >= (params.dims[2] - 1) / 2.0)
    lo, hi = params.sessions_range
    n_sessions = int(rng.integers(lo, hi + 1))
    return SubjectMeta(ce_label=int(ce_label), aht_label=aht, fss_score=fss,
                       n_sessions=n_sessions, centers=centers, radii=radii,
                       lesion_burden=burden, lesion_hemisphere=hemisphere)


def _grids(dims):
    z = np.arange(dims[0], dtype=np.float64)[:, None, None]
    y = np.arange(dims[1], dtype=np.float64)[None, :, None]
    x = np.arange(dims[2], dtype=np.float64)[None, None, :]
    return z, y, x


def _masks(meta, params):
    dims = params.dims
    semi = params.semi_axes()
    z, y, x = _grids(dims)
    cz, cy, cx = ((d - 1) / 2.0 for d in dims)
    brain = (((z - cz) / semi[0]) ** 2 + ((y - cy) / semi[1]) ** 2 + ((x - cx) / semi[2]) ** 2) <= 1.0
    lesion = np.zeros(dims, dtype=bool)
    for center, r in zip(meta.centers, meta.radii):
        lesion |= ((z - center[0]) ** 2 + (y - center[1]) ** 2 + (x - center[2]) ** 2) <= r * r
    return brain, lesion


def _rician(clean, sigma, rng):
    if sigma <= 0:
        return clean.astype(np.float32)
    g1 = rng.standard_normal(clean.shape, dtype=np.float32)
    g2 = rng.standard_normal(clean.shape, dtype=np.float32)
    noisy = np.sqrt((clean.astype(np.float32) + sigma * g1) ** 2 + (sigma * g2) ** 2)
    return noisy.astype(np.float32)


def render_session(meta, params, noise_rng):
    """One paired (DWI, ADC) acquisition for a subject's geometry."""
    brain, lesion = _masks(meta, params)
    dims = params.dims
    _, y, x = _grids(dims)
    g = params.gradient_amplitude
    grad_w = g * (x - (dims[2] - 1) / 2.0) / (dims[2] / 2.0)
    grad_h = g * (y - (dims[1] - 1) / 2.0) / (dims[1] / 2.0)

    dwi = np.where(brain, 1.0 + grad_w, 0.0)
    adc = np.where(brain, 1.0 + grad_h, 0.0)
    if lesion.any():
        dwi[lesion] = 1.0 + params.dwi_lesion_contrast
        adc[lesion] = params.adc_lesion_factor
    dwi = _rician(dwi, params.dwi_noise_sigma, noise_rng)
    adc = _rician(adc, params.adc_noise_sigma, noise_rng)
    return (Volume(voxels=dwi, spacing_mm=params.spacing_mm, modality="DWI"),
            Volume(voxels=adc, spacing_mm=params.spacing_mm, modality="ADC"))


def _subject_streams(seq):
    meta_seq, *session_seqs = seq.spawn(1 + len(SESSION_IDS))
    return np.random.default_rng(meta_seq), [np.random.default_rng(s) for s in session_seqs]


def generate_subject_detail(seed, params):
    """Full single-subject bundle: volumes, masks, and meta (first session)."""
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    meta_rng, session_rngs = _subject_streams(seq)
    ce = int(meta_rng.random() < params.lesion_prevalence)
    meta = sample_subject_meta(meta_rng, params, ce)
    dwi, adc = render_session(meta, params, session_rngs[0])
    brain, lesion = _masks(meta, params)
    return {"dwi": dwi, "adc": adc, "meta": meta, "brain_mask": brain, "lesion_mask": lesion}


def generate_subject(seed, params):
    """(dwi, adc, ce_label, aht_label, fss_score) for one seeded subject."""
    d = generate_subject_detail(seed, params)
    m = d["meta"]
    return d["dwi"], d["adc"], m.ce_label, m.aht_label, m.fss_score


def generate_cohort(n_subjects, params, seed, out_dir):
    """Write a full cohort (MVOL volumes + manifest.csv + summary.json).

    Returns (manifest, summary). The positive count in the summary equals
    the sample_ce_labels draw for (n_subjects, prevalence, seed).
    """
    if n_subjects < 5:
        raise ValidationError("cohort too small", f"need at least 5 subjects, got {n_subjects}")
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write_probe")
        with open(probe, "w") as fh:
            fh.write("ok")
        os.remove(probe)
    except OSError as exc:
        raise ValidationError("unwritable directory", f"cannot write to {out_dir}: {exc}") from exc

    ce = sample_ce_labels(n_subjects, params.lesion_prevalence, seed)
    root = np.random.SeedSequence(seed)
    root.spawn(1)  # label stream, consumed by sample_ce_labels
    subject_seqs = root.spawn(n_subjects)

    records = []
    for i, seq in enumerate(subject_seqs):
        sid = f"s{i + 1:03d}"
        meta_rng, session_rngs = _subject_streams(seq)
        meta_rng.random()  # mirrors the prevalence draw position in generate_subject_detail
        meta = sample_subject_meta(meta_rng, params, int(ce[i]))
        for k in range(meta.n_sessions):
            session = SESSION_IDS[k]
            dwi, adc = render_session(meta, params, session_rngs[k])
            for vol, modality in ((dwi, "DWI"), (adc, "ADC")):
                name = f"{sid}_{session}_{modality.lower()}.mvol"
                write_mvol(vol, os.path.join(out_dir, name))
                records.append(ScanRecord(subject_id=sid, session_id=session, modality=modality,
                                          path=name, ce_label=meta.ce_label,
                                          aht_label=meta.aht_label, fss_score=meta.fss_score))
    manifest = CohortManifest(records=records)
    write_manifest(manifest, os.path.join(out_dir, "manifest.csv"))
    summary = {
        "n_subjects": int(n_subjects),
        "n_positive": int(ce.sum()),
        "n_records": len(records),
        "prevalence": params.lesion_prevalence,
        "seed": seed,
        "dims": list(params.dims),
    }
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest, summary
