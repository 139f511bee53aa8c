"""Synthetic cohorts with planted, known signal.

Each patient gets two independent latent scores. ``s_img`` drives the polyps
painted on the slides (and therefore the colonoscopy/microscopy intermediates);
``s_clin`` drives a handful of clinical-record fields. The image side reaches
the label only through the polyps: ``m_img`` is the cohort-standardized
:func:`polyp_score`, and the binary label marks the top ``prevalence``
fraction of::

    z = image_signal * m_img + clinical_signal * s_clin + noise_sd * eps
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .clinical import PAPER_SCHEMA, ClinicalSchema
from .errors import ConfigError, FormatError
from .maskhit import ADENOMA_TYPES, INTERMEDIATE_TARGETS, SERRATED_TYPES
from .tiling import Slide

FORMAT_NAME = "crcrisk-cohort"
FORMAT_VERSION = 1

TISSUE_RGB = (214, 150, 190)
BACKGROUND_RGB = (243, 243, 243)
ADENOMA_RGB = (105, 55, 140)
SERRATED_RGB = (190, 120, 85)


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 200
    slide_px: tuple = (128, 128)  # (width, height)
    patch_px: int = 8
    prevalence: float = 0.167
    image_signal: float = 2.0
    clinical_signal: float = 1.0
    noise_sd: float = 1.0
    seed: int = 0
    p_second_slide: float = 0.3
    missing_rate: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "slide_px", tuple(int(v) for v in self.slide_px))
        if self.n_patients < 0:
            raise ConfigError("n_patients must be >= 0")
        if not 0.0 < self.prevalence < 1.0:
            raise ConfigError("prevalence must lie in (0, 1)")
        if len(self.slide_px) != 2 or min(self.slide_px) < self.patch_px or self.patch_px < 4:
            raise ConfigError("slide_px must be >= patch_px (>= 4) in both dimensions")
        if min(self.image_signal, self.clinical_signal, self.noise_sd) < 0:
            raise ConfigError("signals and noise_sd must be non-negative")
        if not 0 <= self.p_second_slide <= 1 or not 0 <= self.missing_rate < 1:
            raise ConfigError("p_second_slide and missing_rate must be probabilities")

    def to_dict(self):
        d = asdict(self)
        d["slide_px"] = list(self.slide_px)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class IntermediateTargets:
    largest_adenoma_size: int = 0
    n_adenomas: int = 0
    largest_serrated_size: int = 0
    n_serrated: int = 0
    most_advanced_serrated: int = 0
    most_advanced_adenoma: int = 0

    def as_dict(self):
        return asdict(self)


@dataclass
class PatientRecord:
    id: str
    slides: list
    clinical: dict
    intermediates: IntermediateTargets
    label: int
    latent: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ConfigError("label must be 0 or 1")


@dataclass
class Cohort:
    config: SynthConfig
    patients: list
    schema: ClinicalSchema = PAPER_SCHEMA

    def __len__(self):
        return len(self.patients)

    @property
    def labels(self):
        return np.array([p.label for p in self.patients], dtype=np.int64)

    @property
    def ids(self):
        return [p.id for p in self.patients]

    def subset(self, indices):
        return Cohort(self.config, [self.patients[i] for i in indices], self.schema)

    def intermediate_arrays(self):
        return {t: np.array([getattr(p.intermediates, t) for p in self.patients]) for t in INTERMEDIATE_TARGETS}


def size_class(size_mm):
    """0 none, 1 <5mm, 2 5-9mm, 3 10-20mm, 4 >20mm."""
    if size_mm <= 0:
        return 0
    if size_mm < 5:
        return 1
    if size_mm < 10:
        return 2
    if size_mm <= 20:
        return 3
    return 4


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def _cut(value, cuts):
    return int(np.searchsorted(np.asarray(cuts), value))


# ----------------------------------------------------------------------------
# polyps and slides


def _draw_polyps(s_img, rng):
    n_ad = int(min(rng.poisson(math.exp(0.5 + 1.0 * s_img)), 8))
    ad_sizes = [round(float(math.exp(1.4 + 0.5 * s_img + 0.25 * rng.normal())), 1) for _ in range(n_ad)]
    n_ser = int(min(rng.poisson(math.exp(-0.6 + 0.25 * s_img)), 5))
    ser_sizes = [round(float(math.exp(1.3 + 0.15 * s_img + 0.4 * rng.normal())), 1) for _ in range(n_ser)]
    adv_ad = 0
    villous_score = 0.5 * s_img + rng.normal()
    if n_ad:
        adv_ad = 1 + _cut(villous_score, [1.0, 1.8])
    adv_ser = 0
    ser_score = 0.3 * s_img + rng.normal()
    if n_ser:
        adv_ser = 1 + _cut(ser_score, [0.5, 1.5, 2.2])
    targets = IntermediateTargets(
        largest_adenoma_size=size_class(max(ad_sizes, default=0.0)),
        n_adenomas=n_ad,
        largest_serrated_size=size_class(max(ser_sizes, default=0.0)),
        n_serrated=n_ser,
        most_advanced_serrated=adv_ser,
        most_advanced_adenoma=adv_ad,
    )
    polyps = [("adenoma", s) for s in ad_sizes] + [("serrated", s) for s in ser_sizes]
    return polyps, targets


def ellipse_mask(shape, cy, cx, ry, rx, angle):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    ca, sa = math.cos(angle), math.sin(angle)
    u = (dx * ca + dy * sa) / rx
    v = (-dx * sa + dy * ca) / ry
    return u * u + v * v <= 1.0


def _paint_slide(slide_id, cfg: SynthConfig, polyps, rng):
    width, height = cfg.slide_px
    img = np.empty((height, width, 3))
    img[:] = BACKGROUND_RGB
    img += rng.normal(0, 3, img.shape)
    cy = height / 2 + rng.uniform(-0.05, 0.05) * height
    cx = width / 2 + rng.uniform(-0.05, 0.05) * width
    ry = height * rng.uniform(0.40, 0.48)
    rx = width * rng.uniform(0.40, 0.48)
    tissue = ellipse_mask((height, width), cy, cx, ry, rx, 0.0)
    img[tissue] = np.asarray(TISSUE_RGB) + rng.normal(0, 6, (int(tissue.sum()), 3))
    blobs = []
    max_r = 0.2 * min(width, height)
    for kind, size in polyps:
        r = min(cfg.patch_px * (0.5 + 0.15 * size), max_r)
        t = rng.uniform(0, 2 * math.pi)
        rho = 0.6 * math.sqrt(rng.uniform())
        by = round(float(cy + rho * ry * math.sin(t)), 3)
        bx = round(float(cx + rho * rx * math.cos(t)), 3)
        bry = round(float(r), 3)
        brx = round(float(r * rng.uniform(0.7, 1.0)), 3)
        ang = round(float(rng.uniform(0, math.pi)), 3)
        m = ellipse_mask((height, width), by, bx, bry, brx, ang)
        color = ADENOMA_RGB if kind == "adenoma" else SERRATED_RGB
        img[m] = np.asarray(color) + rng.normal(0, 8, (int(m.sum()), 3))
        blobs.append((kind, by, bx, bry, brx, ang))
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Slide(slide_id, pixels, blobs)


def blob_pixel_mask(slide: Slide):
    m = np.zeros(slide.pixels.shape[:2], dtype=bool)
    for _, cy, cx, ry, rx, ang in slide.blobs:
        m |= ellipse_mask(m.shape, cy, cx, ry, rx, ang)
    return m


def blob_patch_mask(slide: Slide, patch_px, min_fraction=0.5):
    """Patch cells whose pixels are at least ``min_fraction`` planted blob."""
    rows, cols = slide.height // patch_px, slide.width // patch_px
    m = blob_pixel_mask(slide)[: rows * patch_px, : cols * patch_px]
    return m.reshape(rows, patch_px, cols, patch_px).mean(axis=(1, 3)) >= min_fraction


def planted_blob_area(patient: PatientRecord):
    return int(sum(blob_pixel_mask(s).sum() for s in patient.slides))


# ----------------------------------------------------------------------------
# clinical records


def _choice(rng, levels, probs):
    return levels[int(rng.choice(len(levels), p=np.asarray(probs) / np.sum(probs)))]


def _clinical_record(c, targets: IntermediateTargets, schema: ClinicalSchema, cfg: SynthConfig, rng):
    """c is the clinical latent; fields loading on it: age, sex, exercise,
    smoking, weight/bmi, aspirin, bowel prep."""
    r = {}
    r["age"] = round(float(np.clip(59 + 9 * (0.6 * c + 0.8 * rng.normal()), 40, 85)), 1)
    r["sex"] = "M" if rng.uniform() < _sigmoid(0.6 * c) else "F"
    r["hispanic"] = "Hispanic" if rng.uniform() < 0.012 else "Not Hispanic"
    r["race"] = _choice(rng, schema["race"].levels, [0.3, 0.2, 0.4, 95.9, 2.5, 0.7])
    r["exercise"] = schema["exercise"].levels[_cut(-0.4 * c + rng.normal(), [-1.4, -0.2, 1.3])]
    r["smoker_status"] = schema["smoker_status"].levels[_cut(0.4 * c + rng.normal(), [0.1, 1.3])]
    r["years_smoking"] = 0.0 if r["smoker_status"] == "Never smoker" else round(float(abs(rng.normal(15, 10))), 1)
    r["weekly_alcohol"] = schema["weekly_alcohol"].levels[_cut(0.2 * c + rng.normal(), [-0.35, 0.5, 1.0, 2.1])]
    r["calcium"] = "Yes" if rng.uniform() < 0.38 else "No"
    r["vitamins"] = "Yes" if rng.uniform() < 0.66 else "No"
    weight = float(np.clip(185 + 40 * (0.4 * c + 0.9 * rng.normal()), 95, 400))
    height = float(np.clip(67.4 + 4.2 * rng.normal(), 56, 80))
    r["weight_lb"] = round(weight, 1)
    r["height_in"] = round(height, 1)
    r["bmi"] = round(703.0 * weight / height ** 2, 1)
    r["ibd"] = "Yes" if rng.uniform() < 0.055 else "No"
    r["genetic_syndrome"] = "Yes" if rng.uniform() < 0.002 else "No"
    r["bowel_habit_change"] = "Yes" if rng.uniform() < 0.01 else "No"
    r["gi_bleeding"] = "Yes" if rng.uniform() < 0.03 else "No"
    r["aspirin"] = "Yes" if rng.uniform() < _sigmoid(-0.3 + 0.7 * c) else "No"
    r["family_polyps"] = _choice(rng, schema["family_polyps"].levels, [22, 32, 46])
    r["family_crc_first_degree"] = "Yes" if rng.uniform() < 0.27 else "No"
    r["prep_quality"] = schema["prep_quality"].levels[_cut(0.3 * c + rng.normal(), [-0.45, 1.3])]
    r["prep_nulytely"] = "Yes" if rng.uniform() < _sigmoid(-1.6 - 0.8 * c) else "No"
    r["time_since_colonoscopy"] = _choice(rng, schema["time_since_colonoscopy"].levels, [32, 3.5, 18, 40.5, 6])
    for name in ("personal", "medical", "family", "endoscopy"):
        for v in schema.select(name).variables:
            if rng.uniform() < cfg.missing_rate:
                r[v.name] = None
    r["n_adenomas"] = float(targets.n_adenomas)
    r["largest_adenoma_size"] = float(targets.largest_adenoma_size)
    r["n_serrated"] = float(targets.n_serrated)
    r["largest_serrated_size"] = float(targets.largest_serrated_size)
    r["most_advanced_adenoma"] = ADENOMA_TYPES[targets.most_advanced_adenoma]
    r["most_advanced_serrated"] = SERRATED_TYPES[targets.most_advanced_serrated]
    return {v.name: r.get(v.name) for v in schema.variables}


# ----------------------------------------------------------------------------


def threshold_labels(z, prevalence):
    """Label the top round(prevalence * n) scores positive (stable ordering on ties)."""
    n = len(z)
    n_pos = int(math.floor(prevalence * n + 0.5))
    labels = np.zeros(n, dtype=np.int64)
    if n_pos:
        order = np.argsort(-np.asarray(z), kind="stable")
        labels[order[:n_pos]] = 1
    return labels


def polyp_score(targets: IntermediateTargets):
    """Unstandardized image-side risk carried by the planted polyps."""
    return (math.log1p(targets.n_adenomas) + 0.5 * targets.largest_adenoma_size
            + 0.3 * targets.most_advanced_adenoma + 0.2 * targets.n_serrated)


def _standardize(x):
    if x.size == 0:
        return x
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else np.zeros_like(x)


def generate_cohort(cfg: SynthConfig) -> Cohort:
    """The image latent drives the polyps; the label sees the image side only
    through the polyps (standardized polyp score)."""
    schema = PAPER_SCHEMA
    n = cfg.n_patients
    ss = np.random.SeedSequence(cfg.seed)
    rng_lat, rng_poly, rng_slide, rng_clin = (np.random.default_rng(s) for s in ss.spawn(4))
    s_img = rng_lat.normal(size=n)
    s_clin = rng_lat.normal(size=n)
    eps = rng_lat.normal(size=n)
    drawn = [_draw_polyps(float(v), rng_poly) for v in s_img]
    m_img = _standardize(np.array([polyp_score(t) for _, t in drawn]))
    z = cfg.image_signal * m_img + cfg.clinical_signal * s_clin + cfg.noise_sd * eps
    labels = threshold_labels(z, cfg.prevalence)

    patients = []
    width = max(4, len(str(max(n - 1, 0))))
    for i, (polyps, targets) in enumerate(drawn):
        pid = f"P{i:0{width}d}"
        n_slides = 1 + int(rng_slide.uniform() < cfg.p_second_slide)
        assign = rng_slide.integers(0, n_slides, size=len(polyps))
        slides = [_paint_slide(f"{pid}_S{j}", cfg, [p for p, a in zip(polyps, assign) if a == j], rng_slide)
                  for j in range(n_slides)]
        clinical = _clinical_record(float(s_clin[i]), targets, schema, cfg, rng_clin)
        latent = {"s_img": float(s_img[i]), "s_clin": float(s_clin[i]), "z": float(z[i])}
        patients.append(PatientRecord(pid, slides, clinical, targets, int(labels[i]), latent))
    return Cohort(cfg, patients, schema)


# ----------------------------------------------------------------------------
# persistence

_LABEL_FIELDS = ["patient_id", "label"] + list(INTERMEDIATE_TARGETS) + ["s_img", "s_clin", "z"]
_BLOB_FIELDS = ["slide_id", "kind", "cy", "cx", "ry", "rx", "angle"]


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_cohort(cohort: Cohort, directory):
    d = Path(directory)
    (d / "slides").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": cohort.config.to_dict(),
        "schema": cohort.schema.dumps(),
        "patients": [{"id": p.id, "slides": [s.id for s in p.slides]} for p in cohort.patients],
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    names = cohort.schema.names
    with open(d / "clinical.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id"] + names)
        for p in cohort.patients:
            w.writerow([p.id] + [_fmt(p.clinical.get(k)) for k in names])
    with open(d / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_LABEL_FIELDS)
        for p in cohort.patients:
            inter = p.intermediates.as_dict()
            w.writerow([p.id, p.label] + [inter[t] for t in INTERMEDIATE_TARGETS]
                       + [_fmt(p.latent.get(k)) for k in ("s_img", "s_clin", "z")])
    with open(d / "blobs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_BLOB_FIELDS)
        for p in cohort.patients:
            for s in p.slides:
                for b in s.blobs:
                    w.writerow([s.id, b[0]] + [repr(float(x)) for x in b[1:]])
    for p in cohort.patients:
        for s in p.slides:
            Image.fromarray(s.pixels).save(d / "slides" / f"{s.id}.ppm", format="PPM")


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def read_cohort(directory) -> Cohort:
    from .clinical import parse_schema

    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{d / 'manifest.json'}: unreadable manifest ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
        raise FormatError(f"{d}: not a cohort directory")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{d}: cohort format version {manifest.get('version')} unsupported")
    try:
        cfg = SynthConfig.from_dict(manifest["config"])
        schema = parse_schema(manifest["schema"])
        index = manifest["patients"]
        clinical = {r["patient_id"]: r for r in _read_csv(d / "clinical.csv")}
        labels = {r["patient_id"]: r for r in _read_csv(d / "labels.csv")}
        blobs = {}
        for r in _read_csv(d / "blobs.csv"):
            blobs.setdefault(r["slide_id"], []).append(
                (r["kind"],) + tuple(float(r[k]) for k in _BLOB_FIELDS[2:]))
        patients = []
        for entry in index:
            pid = entry["id"]
            slides = []
            for sid in entry["slides"]:
                with Image.open(d / "slides" / f"{sid}.ppm") as im:
                    px = np.array(im.convert("RGB"), dtype=np.uint8)
                slides.append(Slide(sid, px, blobs.get(sid, [])))
            row = clinical[pid]
            rec = {}
            for v in schema.variables:
                raw = row[v.name]
                rec[v.name] = None if raw == "" else (float(raw) if v.kind == "continuous" else raw)
            lab = labels[pid]
            inter = IntermediateTargets(**{t: int(lab[t]) for t in INTERMEDIATE_TARGETS})
            latent = {k: float(lab[k]) for k in ("s_img", "s_clin", "z") if lab.get(k, "") != ""}
            patients.append(PatientRecord(pid, slides, rec, inter, int(lab["label"]), latent))
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{d}: inconsistent cohort files ({exc!r})") from exc
    return Cohort(cfg, patients, schema)
