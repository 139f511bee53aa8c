"""MAE pretraining, direct and guided risk fine-tuning, and patient-level inference."""
from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import maskhit as mh
from .errors import ConfigError, NoTissueError, NumericalError
from .featurizer import ConvExtractor, ExtractorConfig, slide_feature_table
from .tiling import (DEFAULT_BRIGHTNESS_THRESHOLD, DEFAULT_MIN_TISSUE_FRACTION, cover_regions,
                     subsample_patches, tile, tissue_mask)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    pretrain_epochs: int = 10
    finetune_epochs: int = 15
    intermediate_epochs: int = 5  # guided stage 1; longer runs overfit the intermediate heads
    regions_per_patient_train: int = 4
    patch_fraction_train: float = 0.25
    max_regions_eval: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    grad_clip: float = 1.0
    batch_size: int = 16
    guided_backbone_lr_scale: float = 0.2
    seed: int = 0
    freeze_transformer: bool = False
    calibrate_risk: bool = True

    def __post_init__(self):
        if min(self.regions_per_patient_train, self.max_regions_eval, self.batch_size) < 1:
            raise ConfigError("region counts and batch_size must be >= 1")
        if min(self.pretrain_epochs, self.finetune_epochs, self.intermediate_epochs) < 0:
            raise ConfigError("epoch counts must be >= 0")
        if not 0 < self.patch_fraction_train <= 1:
            raise ConfigError("patch_fraction_train must lie in (0, 1]")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError("lr must be > 0 and momentum in [0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class SlideBank:
    """Tissue grids, lattice regions and frozen patch features, computed once per slide."""

    def __init__(self, extractor_cfg: ExtractorConfig, region_side,
                 brightness_threshold=DEFAULT_BRIGHTNESS_THRESHOLD,
                 min_tissue_fraction=DEFAULT_MIN_TISSUE_FRACTION):
        self.extractor_cfg = extractor_cfg
        self.extractor = ConvExtractor(extractor_cfg)
        self.region_side = region_side
        self.brightness_threshold = brightness_threshold
        self.min_tissue_fraction = min_tissue_fraction
        self._slides = {}

    @classmethod
    def for_model(cls, transformer_cfg: mh.TransformerConfig, patch_px, featurizer_seed, **kw):
        ext = ExtractorConfig(patch_px=patch_px, feat_dim=transformer_cfg.feat_dim, seed=featurizer_seed)
        return cls(ext, transformer_cfg.region_side, **kw)

    def slide(self, slide):
        entry = self._slides.get(slide.id)
        if entry is None:
            p = self.extractor_cfg.patch_px
            grid = tile(slide, p, tissue_mask(slide, p, self.brightness_threshold, self.min_tissue_fraction))
            table = slide_feature_table(slide, grid, self.extractor)
            entry = (grid, table, cover_regions(grid, self.region_side, slide.id))
            self._slides[slide.id] = entry
        return entry

    def patient_regions(self, patient):
        """Pooled lattice regions of all slides as (feature table, Region) pairs."""
        out = []
        for s in patient.slides:
            _, table, regions = self.slide(s)
            out.extend((table, r) for r in regions)
        return out

    def region_arrays(self, table, region):
        return table[region.coords[:, 0], region.coords[:, 1]], region.positions


def _build_batch(bank, patients, rng, n_regions, fraction):
    feats, pos, index = [], [], []
    for i, patient in enumerate(patients):
        pool = bank.patient_regions(patient)
        if not pool:
            raise NoTissueError(f"patient {patient.id} has no tissue patches")
        pick = rng.choice(len(pool), size=min(n_regions, len(pool)), replace=False)
        for j in sorted(pick):
            table, region = pool[j]
            if fraction < 1:
                region = subsample_patches(region, fraction, rng)
            f, p = bank.region_arrays(table, region)
            feats.append(f)
            pos.append(p)
            index.append(i)
    return mh.RegionBatch.from_regions(feats, pos), np.asarray(index, dtype=np.int64)


class MomentumSGD:
    """Heavy-ball SGD with cosine step-size decay and global-norm clipping."""

    def __init__(self, lr, momentum, total_steps, grad_clip=None):
        self.lr = lr
        self.momentum = momentum
        self.total_steps = max(int(total_steps), 1)
        self.grad_clip = grad_clip
        self.velocity = {}
        self.t = 0

    def current_lr(self):
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * min(self.t, self.total_steps) / self.total_steps))

    def step(self, params: mh.ModelParams, grads, keys, lr_scale=None):
        norm = math.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in keys))
        scale = 1.0
        if self.grad_clip and norm > self.grad_clip:
            scale = self.grad_clip / norm
        lr = self.current_lr()
        for k in keys:
            v = self.velocity.get(k)
            v = scale * grads[k] if v is None else self.momentum * v + scale * grads[k]
            self.velocity[k] = v
            k_lr = lr if lr_scale is None else lr * lr_scale.get(k, 1.0)
            params.tensors[k] = params.tensors[k] - k_lr * v
        self.t += 1
        return norm


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [np.sort(order[i:i + batch_size]) for i in range(0, n, batch_size)]


def _check(loss, stage, step):
    if not np.isfinite(loss):
        raise NumericalError(f"{stage}: non-finite loss at step {step}")


def _rng(cfg: TrainConfig, stage):
    return np.random.default_rng([cfg.seed, sum(map(ord, stage))])


def init_checkpoint(transformer_cfg, featurizer_seed, seed=0):
    return mh.Checkpoint(mh.init_params(transformer_cfg, seed), featurizer_seed, "init")


def pretrain(cohort, cfg: TrainConfig, bank: SlideBank, init: mh.Checkpoint, log_rows=None):
    """Masked-feature pretraining; returns a checkpoint tagged "pretrained"."""
    if len(cohort) == 0:
        raise ConfigError("cannot pretrain on an empty cohort")
    params = init.params.copy()
    mcfg = params.config
    rng = _rng(cfg, "pretrain")
    n = len(cohort)
    steps = cfg.pretrain_epochs * math.ceil(n / cfg.batch_size)
    opt = MomentumSGD(cfg.lr, cfg.momentum, steps, cfg.grad_clip)
    keys = [k for k in params.tensors if not k.startswith(("risk.", "head."))]
    for epoch in range(cfg.pretrain_epochs):
        for idx in _batches(n, cfg.batch_size, rng):
            batch, _ = _build_batch(bank, [cohort.patients[i] for i in idx], rng,
                                    cfg.regions_per_patient_train, cfg.patch_fraction_train)
            keep = batch.present.sum(axis=1) >= 2
            if not keep.any():
                continue
            batch = mh.mae_mask(batch.subset(keep), mcfg.mask_ratio, rng)
            loss, g = mh.mae_loss(params, batch, with_grad=True)
            _check(loss, "pretrain", opt.t)
            opt.step(params, g, keys)
            if log_rows is not None:
                log_rows.append((opt.t, "pretrain", loss))
    return mh.Checkpoint(params, init.featurizer_seed, "pretrained", {"pretrain_epochs": cfg.pretrain_epochs})


def _train_risk(params, cohort, cfg, bank, rng, stage, freeze, log_rows, backbone_lr_scale=1.0):
    labels = cohort.labels
    weights = mh.balanced_class_weights(labels)
    n = len(cohort)
    steps = cfg.finetune_epochs * math.ceil(n / cfg.batch_size)
    opt = MomentumSGD(cfg.lr, cfg.momentum, steps, cfg.grad_clip)
    keys = ["risk.w", "risk.b"] if freeze else [k for k in params.tensors if not k.startswith(("head.", "recon."))]
    lr_scale = {k: backbone_lr_scale for k in keys if not mh.is_head(k)}
    for epoch in range(cfg.finetune_epochs):
        for idx in _batches(n, cfg.batch_size, rng):
            batch, pidx = _build_batch(bank, [cohort.patients[i] for i in idx], rng,
                                       cfg.regions_per_patient_train, cfg.patch_fraction_train)
            loss, g = mh.risk_loss(params, batch, pidx, labels[idx], weights, with_grad=True, backbone=not freeze)
            _check(loss, stage, opt.t)
            opt.step(params, g, keys, lr_scale)
            if log_rows is not None:
                log_rows.append((opt.t, stage, loss))
    return params


def finetune_direct(ckpt: mh.Checkpoint, cohort, cfg: TrainConfig, bank: SlideBank, from_scratch=False,
                    log_rows=None):
    """Train the risk head end to end on sampled, subsampled regions."""
    if ckpt.stage != "pretrained" and not from_scratch:
        raise ConfigError(f"direct fine-tuning expects a pretrained checkpoint, got {ckpt.stage!r}")
    if len(cohort) == 0:
        raise ConfigError("cannot fine-tune on an empty cohort")
    params = ckpt.params.copy()
    rng = _rng(cfg, "direct")
    mh.reset_risk_head(params, rng)
    params = _train_risk(params, cohort, cfg, bank, rng, "direct", False, log_rows)
    mh.drop_intermediate_heads(params)
    out = mh.Checkpoint(params, ckpt.featurizer_seed, "risk", {"mode": "direct"})
    return calibrate_risk_head(out, cohort, cfg, bank) if cfg.calibrate_risk else out


def train_intermediate(ckpt: mh.Checkpoint, cohort, target_spec, cfg: TrainConfig, bank: SlideBank,
                       log_rows=None):
    """Stage 1 of guided training: fit intermediate heads and the transformer jointly."""
    targets = mh.resolve_targets(target_spec)
    if len(cohort) == 0:
        raise ConfigError("cannot fine-tune on an empty cohort")
    params = ckpt.params.copy()
    rng = _rng(cfg, "intermediate")
    mh.drop_intermediate_heads(params)
    mh.add_intermediate_heads(params, targets, rng)
    arrays = cohort.intermediate_arrays()
    n = len(cohort)
    steps = cfg.intermediate_epochs * math.ceil(n / cfg.batch_size)
    opt = MomentumSGD(cfg.lr, cfg.momentum, steps, cfg.grad_clip)
    keys = [k for k in params.tensors if not k.startswith(("risk.", "recon."))]
    for epoch in range(cfg.intermediate_epochs):
        for idx in _batches(n, cfg.batch_size, rng):
            batch, pidx = _build_batch(bank, [cohort.patients[i] for i in idx], rng,
                                       cfg.regions_per_patient_train, cfg.patch_fraction_train)
            tgt = {t: arrays[t][idx] for t in targets}
            loss, g = mh.intermediate_loss(params, batch, pidx, tgt, targets, with_grad=True)
            _check(loss, "intermediate", opt.t)
            opt.step(params, g, keys)
            if log_rows is not None:
                log_rows.append((opt.t, "intermediate", loss))
    meta = {"targets": list(targets)}
    return mh.Checkpoint(params, ckpt.featurizer_seed, "intermediate", meta)


def finetune_guided(ckpt: mh.Checkpoint, cohort, target_spec, cfg: TrainConfig, bank: SlideBank,
                    log_rows=None, stage1=None):
    """Two-stage guided training. Pass ``stage1`` to reuse an intermediate checkpoint."""
    targets = mh.resolve_targets(target_spec)
    if stage1 is None:
        stage1 = train_intermediate(ckpt, cohort, targets, cfg, bank, log_rows)
    params = stage1.params.copy()
    mh.drop_intermediate_heads(params)
    rng = _rng(cfg, "guided")
    mh.reset_risk_head(params, rng)
    stage = "guided-freeze" if cfg.freeze_transformer else "guided-full"
    params = _train_risk(params, cohort, cfg, bank, rng, stage, cfg.freeze_transformer, log_rows,
                         cfg.guided_backbone_lr_scale)
    meta = {"mode": stage, "targets": list(targets)}
    out = mh.Checkpoint(params, ckpt.featurizer_seed, "risk", meta)
    return calibrate_risk_head(out, cohort, cfg, bank) if cfg.calibrate_risk else out


def calibrate_risk_head(ckpt: mh.Checkpoint, cohort, cfg: TrainConfig, bank: SlideBank):
    """Platt-scale the risk head on the training patients under the inference protocol.

    Training sees a few subsampled regions per patient while inference averages
    up to ``max_regions_eval`` full regions, which shrinks the logits toward the
    mean. Refitting ``a * logit + c`` by unweighted logistic regression restores
    probabilities on the prevalence scale. The slope is kept non-negative so the
    ranking, and hence the AUC, never flips.
    """
    from sklearn.linear_model import LogisticRegression

    labels = cohort.labels
    if len(np.unique(labels)) < 2:
        return ckpt
    params = ckpt.params.copy()
    e = embed_patients(ckpt, cohort.patients, cfg, bank)
    z = e @ params["risk.w"] + params["risk.b"][0]
    sd = z.std()
    if not sd > 0:
        return ckpt
    lr = LogisticRegression(C=1e6, max_iter=1000).fit(((z - z.mean()) / sd)[:, None], labels)
    if lr.coef_[0, 0] > 0:
        a = float(lr.coef_[0, 0]) / sd
        c = float(lr.intercept_[0]) - a * z.mean()
    else:
        # an inverted in-sample ranking carries no usable scale; fall back to the base rate
        a, rate = 0.0, float(labels.mean())
        c = math.log(rate / (1.0 - rate))
    params.tensors["risk.w"] = a * params["risk.w"]
    params.tensors["risk.b"] = np.array([a * params["risk.b"][0] + c])
    return mh.Checkpoint(params, ckpt.featurizer_seed, ckpt.stage, {**ckpt.meta, "calibrated": True})


# ----------------------------------------------------------------------------
# inference


def eval_regions(bank, patient, max_regions, rng):
    """Lattice cover of every slide, pooled; at most ``max_regions`` drawn without replacement."""
    pool = bank.patient_regions(patient)
    if not pool:
        raise NoTissueError(f"patient {patient.id} has no tissue patches")
    if len(pool) > max_regions:
        pick = np.sort(rng.choice(len(pool), size=max_regions, replace=False))
        pool = [pool[i] for i in pick]
    return pool


def embed_patients(ckpt: mh.Checkpoint, patients, cfg: TrainConfig, bank: SlideBank, chunk=32):
    """Patient embeddings (mean class token over evaluation regions), shape (P, model_dim)."""
    out = np.zeros((len(patients), ckpt.params.config.model_dim))
    for start in range(0, len(patients), chunk):
        feats, pos, index = [], [], []
        group = patients[start:start + chunk]
        for i, patient in enumerate(group):
            rng = np.random.default_rng([cfg.seed, zlib.crc32(patient.id.encode())])
            for table, region in eval_regions(bank, patient, cfg.max_regions_eval, rng):
                f, p = bank.region_arrays(table, region)
                feats.append(f)
                pos.append(p)
                index.append(i)
        if not feats:
            continue
        batch = mh.RegionBatch.from_regions(feats, pos)
        out[start:start + len(group)] = mh.patient_embeddings(ckpt.params, batch, index, len(group))
    return out


def predict_cohort(ckpt: mh.Checkpoint, patients, cfg: TrainConfig, bank: SlideBank):
    return mh.risk_head(ckpt.params, embed_patients(ckpt, patients, cfg, bank))


def predict_patient(ckpt: mh.Checkpoint, patient, cfg: TrainConfig, bank: SlideBank):
    return float(predict_cohort(ckpt, [patient], cfg, bank)[0])


def predict_intermediates(ckpt: mh.Checkpoint, patients, target_spec, cfg: TrainConfig, bank: SlideBank):
    return mh.intermediate_head(ckpt.params, embed_patients(ckpt, patients, cfg, bank), target_spec)


def write_training_log(rows, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "stage", "loss"])
        for step, stage, loss in rows:
            w.writerow([step, stage, repr(float(loss))])
