"""Repeated stratified splits, cross-validation folds, metrics and paired t-tests."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, UndefinedMetricError

METRICS = ("auc", "accuracy", "f1", "precision", "recall")
P_SENTINEL = 1e-12


@dataclass(frozen=True)
class ExperimentConfig:
    test_fraction: float = 0.25
    n_repeats: int = 10
    cv_folds: int = 5
    seed: int = 0
    threshold_rule: str = "cv_max_f1"

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.n_repeats < 1 or self.cv_folds < 2:
            raise ConfigError("n_repeats must be >= 1 and cv_folds >= 2")
        if self.threshold_rule not in ("cv_max_f1", "fixed_0.5"):
            raise ConfigError(f"unknown threshold rule {self.threshold_rule!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ----------------------------------------------------------------------------
# splitting


def _labels_of(obj):
    return np.asarray(obj.labels if hasattr(obj, "labels") else obj)


def split_indices(labels, test_fraction, seed):
    """Stratified patient-level partition -> (train_idx, test_idx), both sorted."""
    labels = np.asarray(labels)
    if len(labels) < 4:
        raise ConfigError("need at least 4 patients to split")
    rng = np.random.default_rng(seed)
    test = []
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        test.extend(idx[: int(math.floor(test_fraction * len(idx) + 0.5))])
    test = np.sort(np.asarray(test, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(labels)), test)
    return train, test


def split(cohort, test_fraction, seed):
    train, test = split_indices(_labels_of(cohort), test_fraction, seed)
    return cohort.subset(train), cohort.subset(test)


def kfold(labels, k, seed):
    """Stratified folds: classes are shuffled then dealt round-robin, so sizes differ by <= 1."""
    labels = _labels_of(labels)
    n = len(labels)
    if k > n or k < 2:
        raise ConfigError(f"cannot make {k} folds from {n} samples")
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)])
    assign = np.empty(n, dtype=np.int64)
    assign[order] = np.arange(n) % k
    return [np.flatnonzero(assign == f) for f in range(k)]


# ----------------------------------------------------------------------------
# metrics


def auc(scores, labels):
    """P(score+ > score-) + 0.5 P(tie), computed from midranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    u = rankdata(s)[y].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def ordinal_concordance(pred, target):
    """Concordance over pairs with distinct targets (ties in prediction count half);
    reduces to AUC for a binary target."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    diff_t = target[:, None] > target[None, :]
    n_pairs = diff_t.sum()
    if n_pairs == 0:
        raise UndefinedMetricError("concordance is undefined when all targets are equal")
    dp = pred[:, None] - pred[None, :]
    return float(((dp > 0) & diff_t).sum() / n_pairs + 0.5 * ((dp == 0) & diff_t).sum() / n_pairs)


def confusion(scores, labels, threshold):
    pred = np.asarray(scores) >= threshold
    y = np.asarray(labels).astype(bool)
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    tn = int((~pred & ~y).sum())
    return tp, fp, fn, tn


def metrics_from_confusion(tp, fp, fn, tn):
    n = tp + fp + fn + tn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"accuracy": (tp + tn) / n if n else 0.0, "f1": f1, "precision": precision, "recall": recall}


def classification_metrics(scores, labels, threshold):
    if not 0 <= threshold <= 1:
        raise ValueError("threshold must lie in [0, 1]")
    return metrics_from_confusion(*confusion(scores, labels, threshold))


def max_f1_threshold(scores, labels):
    """Threshold (one of the scores) maximizing F1; ties -> the larger threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if y.sum() == 0:
        return 0.5
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    last = np.r_[s_sorted[1:] != s_sorted[:-1], True]  # end of each tie block
    tp, fp, cand = tp[last], fp[last], s_sorted[last]
    f1 = 2 * tp / (tp + fp + y.sum())
    return float(np.clip(cand[int(np.argmax(f1))], 0.0, 1.0))


# ----------------------------------------------------------------------------
# paired t-test


def _betacf(a, b, x, max_iter=500, eps=1e-15):
    """Continued fraction for the regularized incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    return h


def betainc_reg(a, b, x, xc=None):
    """Regularized incomplete beta I_x(a, b); pass ``xc`` = 1 - x when it is
    known more accurately than the subtraction."""
    xc = 1.0 - x if xc is None else xc
    if x <= 0.0:
        return 0.0
    if xc <= 0.0:
        return 1.0
    lbeta = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    front = math.exp(lbeta + a * math.log(x) + b * math.log(xc))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, xc) / b


def t_two_sided_p(t, df):
    if math.isinf(t):
        return 0.0
    t2 = t * t
    return betainc_reg(df / 2.0, 0.5, df / (df + t2), t2 / (df + t2))


def paired_ttest(metric_a, metric_b):
    """Paired t-test on per-repeat metrics -> (t, two-sided p).

    All-zero differences give (0, 1); constant non-zero differences give
    (+-inf, 0), which reports print as p < 1e-12.
    """
    a = np.asarray(metric_a, dtype=np.float64)
    b = np.asarray(metric_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    if a.size < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    n = d.size
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    return float(t), float(t_two_sided_p(t, n - 1))


def format_p(p):
    return f"<{P_SENTINEL:.0e}" if p < P_SENTINEL else f"{p:.4g}"


# ----------------------------------------------------------------------------
# experiment harness


@dataclass
class PipelineOutput:
    test_scores: np.ndarray
    train_scores: np.ndarray = None  # out-of-fold when available; used for the threshold
    extra: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    rows: list  # dicts: pipeline, repeat, threshold, metrics
    pipelines: list
    config: dict = field(default_factory=dict)
    pvalues: dict = field(default_factory=dict)  # (a, b) -> (t, p) on per-repeat AUC

    def metric(self, pipeline, name="auc"):
        return np.array([r[name] for r in self.rows if r["pipeline"] == pipeline])

    def summary(self):
        out = {}
        for p in self.pipelines:
            out[p] = {}
            for m in METRICS:
                v = self.metric(p, m)
                out[p][m] = (float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0)
        return out

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pipeline", "repeat", "threshold"] + list(METRICS))
        for r in self.rows:
            w.writerow([r["pipeline"], r["repeat"], f"{r['threshold']:.6f}"] + [f"{r[m]:.6f}" for m in METRICS])
        return buf.getvalue()

    def pvalues_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pipeline_a", "pipeline_b", "metric", "t", "p"])
        for (a, b), (t, p) in sorted(self.pvalues.items()):
            w.writerow([a, b, "auc", f"{t:.6f}", format_p(p)])
        return buf.getvalue()

    def summary_text(self):
        lines = [f"{'pipeline':<40s} " + " ".join(f"{m:>17s}" for m in METRICS)]
        for p, stats in self.summary().items():
            lines.append(f"{p:<40s} " + " ".join(f"{mu:.3f} ({sd:.3f})".rjust(17) for mu, sd in stats.values()))
        if self.pvalues:
            lines.append("")
            lines.append("paired t-tests on per-repeat AUC")
            for (a, b), (t, p) in sorted(self.pvalues.items()):
                lines.append(f"  {a} vs {b}: t={t:.3f} p={format_p(p)}")
        return "\n".join(lines) + "\n"

    def write(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.csv").write_text(self.to_csv())
        (d / "pvalues.csv").write_text(self.pvalues_csv())
        (d / "summary.txt").write_text(self.summary_text())


def repeat_splits(labels, cfg: ExperimentConfig):
    """The split sequence shared by every pipeline of an experiment."""
    return [split_indices(labels, cfg.test_fraction, [cfg.seed, r]) for r in range(cfg.n_repeats)]


def run_experiment(cfg: ExperimentConfig, labels, pipelines, fixed_threshold=0.5):
    """Evaluate each pipeline on the identical split sequence.

    ``pipelines`` maps name -> callable(train_idx, test_idx, repeat) returning a
    PipelineOutput. Any exception is re-raised tagged with the repeat index.
    """
    labels = _labels_of(labels)
    rows = []
    names = list(pipelines)
    for r, (train, test) in enumerate(repeat_splits(labels, cfg)):
        for name in names:
            try:
                out = pipelines[name](train, test, r)
                y_test = labels[test]
                a = auc(out.test_scores, y_test)
                thr = fixed_threshold
                if cfg.threshold_rule == "cv_max_f1" and out.train_scores is not None:
                    thr = max_f1_threshold(out.train_scores, labels[train])
                m = classification_metrics(out.test_scores, y_test, thr)
            except Exception as exc:
                exc.args = (f"pipeline {name!r}, repeat {r}: {exc}",) + exc.args[1:]
                raise
            rows.append({"pipeline": name, "repeat": r, "threshold": thr, "auc": a, **m})
    report = EvalReport(rows, names, cfg.to_dict())
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if cfg.n_repeats >= 2:
                report.pvalues[(a, b)] = paired_ttest(report.metric(a), report.metric(b))
    return report
