"""Named model pipelines evaluated by the repeated-split harness.

A pipeline name lists input modalities joined by ``+`` and may carry options
after a colon::

    colonoscopy+wsi+clinical
    wsi+clinical:fusion=decision_average,wsi=guided-full,model=rf
    wsi-guided-freeze            (shortcut for wsi:wsi=guided-freeze)

Tabular-only pipelines fit the chosen classifier on the encoded clinical
columns. Pipelines containing ``wsi`` alone score the transformer risk head.
Mixed pipelines fuse the two according to ``fusion`` (decision_weighted by
default).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import fusion as fu
from . import maskhit as mh
from . import training as tr
from .clinical import MODALITIES, TABULAR_MODELS, fit_preprocessor, fit_tabular, transform
from .errors import ConfigError
from .evalstat import PipelineOutput, kfold

WSI_MODES = ("direct", "guided-full", "guided-freeze")
TABULAR_MODALITIES = tuple(MODALITIES)
SHORTCUTS = {f"wsi-{m}": f"wsi:wsi={m}" for m in WSI_MODES}
OPTION_KEYS = ("fusion", "wsi", "model", "target")


@dataclass(frozen=True)
class PipelineSpec:
    name: str
    modalities: tuple
    wsi_mode: str = "direct"
    target: str = "all_colonoscopy"
    model: str = "lr"
    fusion: str = "decision_weighted"

    @property
    def uses_wsi(self):
        return "wsi" in self.modalities

    @property
    def tabular(self):
        return tuple(m for m in self.modalities if m != "wsi")


def valid_tokens():
    return ("wsi",) + TABULAR_MODALITIES + tuple(SHORTCUTS)


def parse_pipeline(name: str, defaults=None) -> PipelineSpec:
    """``defaults`` maps option keys (fusion, wsi, model, target) to values used
    when the name does not set them."""
    text = SHORTCUTS.get(name.strip(), name.strip())
    head, _, opts = text.partition(":")
    mods = tuple(m.strip() for m in head.split("+") if m.strip())
    if not mods:
        raise ConfigError(f"empty pipeline name; valid tokens: {', '.join(valid_tokens())}")
    bad = [m for m in mods if m != "wsi" and m not in TABULAR_MODALITIES]
    if bad:
        raise ConfigError(f"unknown pipeline token(s) {bad} in {name!r}; valid tokens: {', '.join(valid_tokens())}")
    if len(set(mods)) != len(mods):
        raise ConfigError(f"duplicate modality in {name!r}")
    kw = dict(defaults or {})
    for item in filter(None, (o.strip() for o in opts.split(","))):
        key, sep, value = item.partition("=")
        if not sep or key not in OPTION_KEYS:
            raise ConfigError(f"bad pipeline option {item!r}; valid keys: {', '.join(OPTION_KEYS)}")
        kw[key] = value.strip()
    spec = PipelineSpec(name=name, modalities=mods, **{k: v for k, v in (
        ("wsi_mode", kw.get("wsi")), ("target", kw.get("target")), ("model", kw.get("model")),
        ("fusion", kw.get("fusion"))) if v is not None})
    if spec.wsi_mode not in WSI_MODES:
        raise ConfigError(f"unknown wsi mode {spec.wsi_mode!r}; valid: {', '.join(WSI_MODES)}")
    if spec.model not in TABULAR_MODELS:
        raise ConfigError(f"unknown model {spec.model!r}; valid: {', '.join(TABULAR_MODELS)}")
    if spec.fusion not in fu.FUSION_METHODS:
        raise ConfigError(f"unknown fusion {spec.fusion!r}; valid: {', '.join(fu.FUSION_METHODS)}")
    mh.resolve_targets(spec.target)
    return spec


def _key(idx):
    return hashlib.sha1(np.asarray(idx, dtype=np.int64).tobytes()).hexdigest()


@dataclass
class ExperimentContext:
    """Shared state for one experiment: the cohort, configs, slide bank and caches.

    The masked pretraining checkpoint is label-free and fitted once on the
    whole cohort; every supervised model is fitted on training indices only.
    """

    cohort: object
    transformer_cfg: mh.TransformerConfig
    train_cfg: tr.TrainConfig
    featurizer_seed: int = 0
    cv_folds: int = 5
    seed: int = 0
    pretrained: mh.Checkpoint = None
    bank: tr.SlideBank = None
    _cache: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.bank is None:
            self.bank = tr.SlideBank.for_model(self.transformer_cfg, self.cohort.config.patch_px,
                                               self.featurizer_seed)

    @property
    def labels(self):
        return self.cohort.labels

    def pretrained_ckpt(self):
        if self.pretrained is None:
            init = tr.init_checkpoint(self.transformer_cfg, self.featurizer_seed, self.train_cfg.seed)
            self.pretrained = tr.pretrain(self.cohort, self.train_cfg, self.bank, init)
        return self.pretrained

    def _memo(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def stage1(self, target, train_idx):
        return self._memo(("stage1", target, _key(train_idx)), lambda: tr.train_intermediate(
            self.pretrained_ckpt(), self.cohort.subset(train_idx), target, self.train_cfg, self.bank))

    def wsi_model(self, mode, target, train_idx):
        def fit():
            sub = self.cohort.subset(train_idx)
            if mode == "direct":
                return tr.finetune_direct(self.pretrained_ckpt(), sub, self.train_cfg, self.bank)
            cfg = tr.TrainConfig.from_dict({**self.train_cfg.to_dict(),
                                            "freeze_transformer": mode == "guided-freeze"})
            return tr.finetune_guided(self.pretrained_ckpt(), sub, target, cfg, self.bank,
                                      stage1=self.stage1(target, train_idx))
        return self._memo(("wsi", mode, target, _key(train_idx)), fit)

    def wsi_embeddings(self, mode, target, train_idx, idx):
        ckpt = self.wsi_model(mode, target, train_idx)
        return self._memo(("emb", mode, target, _key(train_idx), _key(idx)), lambda: tr.embed_patients(
            ckpt, [self.cohort.patients[i] for i in idx], self.train_cfg, self.bank))

    def wsi_scores(self, mode, target, train_idx, idx):
        ckpt = self.wsi_model(mode, target, train_idx)
        return mh.risk_head(ckpt.params, self.wsi_embeddings(mode, target, train_idx, idx))

    def folds(self, train_idx, repeat):
        return [np.asarray(train_idx)[f] for f in
                kfold(self.labels[train_idx], self.cv_folds, [self.seed, repeat, 1])]

    def wsi_oof(self, mode, target, train_idx, repeat):
        """Out-of-fold WSI probabilities for the training rows (computed on first use)."""
        def compute():
            train_idx_arr = np.asarray(train_idx)
            out = np.zeros(len(train_idx_arr))
            pos = {int(p): i for i, p in enumerate(train_idx_arr)}
            for fold in self.folds(train_idx, repeat):
                inner = np.setdiff1d(train_idx_arr, fold)
                scores = self.wsi_scores(mode, target, inner, fold)
                out[[pos[int(p)] for p in fold]] = scores
            return out
        return self._memo(("oof", mode, target, _key(train_idx), repeat), compute)

    def clinical_matrices(self, modalities, train_idx, test_idx):
        schema = self.cohort.schema.select(modalities)
        recs = [p.clinical for p in self.cohort.patients]
        stats = fit_preprocessor([recs[i] for i in train_idx], schema)
        return (transform(stats, [recs[i] for i in train_idx]),
                transform(stats, [recs[i] for i in test_idx]), schema)


def _tabular_oof(kind, X, y, folds_local, seed):
    out = np.zeros(len(y))
    for fold in folds_local:
        inner = np.setdiff1d(np.arange(len(y)), fold)
        out[fold] = fit_tabular(kind, X[inner], y[inner], seed=seed).predict_proba(X[fold])
    return out


def _local_folds(ctx, train_idx, repeat):
    pos = {int(p): i for i, p in enumerate(train_idx)}
    return [np.array([pos[int(p)] for p in f]) for f in ctx.folds(train_idx, repeat)]


def make_pipeline(spec: PipelineSpec | str, ctx: ExperimentContext, weight=None):
    """Callable (train_idx, test_idx, repeat) -> PipelineOutput.

    ``weight`` fixes the decision_weighted weight instead of selecting it on
    out-of-fold training scores.
    """
    spec = parse_pipeline(spec) if isinstance(spec, str) else spec

    def run(train_idx, test_idx, repeat):
        y = ctx.labels
        ytr = y[train_idx]
        seed = ctx.seed * 1000 + repeat
        extra = {"spec": spec}
        if spec.tabular:
            Xtr, Xte, schema = ctx.clinical_matrices(spec.tabular, train_idx, test_idx)
            local = _local_folds(ctx, train_idx, repeat)
            extra["schema"] = schema
        if not spec.uses_wsi:
            model = fit_tabular(spec.model, Xtr, ytr, seed=seed)
            extra.update(model=model, X_test=Xte, X_train=Xtr)
            return PipelineOutput(model.predict_proba(Xte), _tabular_oof(spec.model, Xtr, ytr, local, seed), extra)

        mode, target = spec.wsi_mode, spec.target
        p_test = ctx.wsi_scores(mode, target, train_idx, test_idx)
        if not spec.tabular:
            # in-sample training scores fix the threshold; out-of-fold would need k more fits
            return PipelineOutput(p_test, ctx.wsi_scores(mode, target, train_idx, train_idx), extra)

        if spec.fusion == "feature_level":
            E_tr = ctx.wsi_embeddings(mode, target, train_idx, train_idx)
            E_te = ctx.wsi_embeddings(mode, target, train_idx, test_idx)
            fs = fu.FusionSpec("feature_level", seed=seed)
            model = fu.fuse_feature_level(E_tr, Xtr, ytr, fs)
            Z_tr, Z_te = fu.concat_features(E_tr, Xtr), fu.concat_features(E_te, Xte)
            oof = np.zeros(len(ytr))
            for fold in local:
                inner = np.setdiff1d(np.arange(len(ytr)), fold)
                oof[fold] = fu.fuse_feature_level(E_tr[inner], Xtr[inner], ytr[inner], fs).predict_proba(Z_tr[fold])
            extra.update(model=model, X_test=Z_te, X_train=Z_tr, embed_dim=E_tr.shape[1])
            return PipelineOutput(model.predict_proba(Z_te), oof, extra)

        if spec.fusion == "wsi_decision_feature" or (spec.fusion == "decision_weighted" and weight is None):
            oof_wsi = ctx.wsi_oof(mode, target, train_idx, repeat)
        else:
            # a fixed rule only needs training scores for the threshold; skip the k extra fits
            oof_wsi = ctx.wsi_scores(mode, target, train_idx, train_idx)
        Z_tr, Z_te = fu.stack_wsi(Xtr, oof_wsi), fu.stack_wsi(Xte, p_test)
        extra.update(X_train=Z_tr, X_test=Z_te)
        if spec.fusion == "wsi_decision_feature":
            fs = fu.FusionSpec("wsi_decision_feature", classifier=spec.model, seed=seed)
            model = fu.fuse_wsi_decision_feature(oof_wsi, Xtr, ytr, fs)
            oof = np.zeros(len(ytr))
            for fold in local:
                inner = np.setdiff1d(np.arange(len(ytr)), fold)
                oof[fold] = fu.fuse_wsi_decision_feature(oof_wsi[inner], Xtr[inner], ytr[inner], fs).predict_proba(Z_tr[fold])
            extra["model"] = model
            return PipelineOutput(model.predict_proba(Z_te), oof, extra)

        clin = fit_tabular(spec.model, Xtr, ytr, seed=seed)
        oof_clin = _tabular_oof(spec.model, Xtr, ytr, local, seed)
        if spec.fusion == "decision_average":
            w = 0.5
        elif weight is not None:
            w = float(weight)
        else:
            w = fu.select_weight(oof_wsi, oof_clin, ytr)
        model = fu.DecisionFusionModel(clin, w)
        extra.update(model=model, weight=w)
        p_clin = clin.predict_proba(Xte)
        return PipelineOutput(fu.fuse_decision_weighted(p_test, p_clin, w),
                              fu.fuse_decision_weighted(oof_wsi, oof_clin, w), extra)

    run.spec = spec
    return run


def shapley_groups(spec: PipelineSpec, schema, embed_dim=0):
    """Column groups of a pipeline's model input: one per source variable, plus the WSI input."""
    offset = embed_dim if spec.fusion == "feature_level" and spec.uses_wsi else 0
    groups = {}
    if offset:
        groups["WSI features"] = list(range(offset))
    for name, s in schema.column_groups().items():
        groups[name] = list(range(s.start + offset, s.stop + offset))
    if spec.uses_wsi and not offset:
        groups["WSI risk score"] = [schema.width]
    return groups
