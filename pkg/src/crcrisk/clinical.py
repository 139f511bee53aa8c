"""Clinical-record schema, outcome labeling, preprocessing and tabular baselines."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .errors import ConfigError, FormatError, NumericalError

CATEGORIES = ("personal", "medical", "family", "endoscopy", "colonoscopy", "microscopy")
# modality names used by pipelines -> schema categories
MODALITIES = {
    "clinical": ("personal", "medical", "family", "endoscopy"),
    "colonoscopy": ("colonoscopy",),
    "microscopy": ("microscopy",),
    "personal": ("personal",),
    "medical": ("medical",),
    "family": ("family",),
    "endoscopy": ("endoscopy",),
}


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str  # "continuous" | "categorical"
    levels: tuple = ()
    category: str = "personal"

    @property
    def width(self):
        return 1 if self.kind == "continuous" else len(self.levels)


@dataclass(frozen=True)
class ClinicalSchema:
    variables: tuple

    def __post_init__(self):
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise ConfigError("schema variable names must be unique")
        for v in self.variables:
            if v.kind not in ("continuous", "categorical"):
                raise ConfigError(f"{v.name}: unknown kind {v.kind!r}")
            if v.kind == "categorical" and len(v.levels) < 1:
                raise ConfigError(f"{v.name}: categorical variable without levels")
            if v.category not in CATEGORIES:
                raise ConfigError(f"{v.name}: unknown category {v.category!r}")

    @property
    def names(self):
        return [v.name for v in self.variables]

    @property
    def width(self):
        return sum(v.width for v in self.variables)

    def __getitem__(self, name):
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    def select(self, categories):
        """Sub-schema holding only the given categories (or modality names)."""
        cats = set()
        for c in ([categories] if isinstance(categories, str) else categories):
            cats.update(MODALITIES.get(c, (c,)))
        unknown = cats - set(CATEGORIES)
        if unknown:
            raise ConfigError(f"unknown schema categories {sorted(unknown)}")
        return ClinicalSchema(tuple(v for v in self.variables if v.category in cats))

    def column_groups(self):
        """Variable name -> slice of its encoded columns."""
        out, start = {}, 0
        for v in self.variables:
            out[v.name] = slice(start, start + v.width)
            start += v.width
        return out

    def dumps(self):
        lines = ["# name | kind | levels (';'-separated, categorical only) | category"]
        for v in self.variables:
            lines.append(f"{v.name} | {v.kind} | {';'.join(v.levels)} | {v.category}")
        return "\n".join(lines) + "\n"


def parse_schema(text) -> ClinicalSchema:
    variables = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split("|")]
        if len(parts) != 4:
            raise FormatError(f"schema line {lineno}: expected 4 '|'-separated fields")
        name, kind, levels, category = parts
        lv = tuple(x.strip() for x in levels.split(";") if x.strip()) if levels else ()
        variables.append(Variable(name, kind, lv, category))
    return ClinicalSchema(tuple(variables))


def load_schema(path=None) -> ClinicalSchema:
    if path is None:
        return parse_schema(resources.files("crcrisk").joinpath("data/default_schema.txt").read_text())
    return parse_schema(Path(path).read_text())


PAPER_SCHEMA = load_schema()


# ----------------------------------------------------------------------------
# outcome


@dataclass
class Findings:
    size_mm: float = 0.0
    villous: bool = False
    high_grade_dysplasia: bool = False
    serrated_with_dysplasia: bool = False
    is_crc: bool = False
    time_years: float = 0.0
    kind: str = "adenoma"  # adenoma | serrated | hyperplastic | crc


def is_high_risk_finding(f: Findings):
    if f.is_crc or f.kind == "crc":
        return True
    if f.serrated_with_dysplasia:
        return True
    if f.kind == "adenoma":
        return f.size_mm >= 10.0 or f.villous or f.high_grade_dysplasia
    return False


def label_high_risk(followup, window_years=5.0):
    """1 when any finding inside the window is CRC, an advanced adenoma
    (>= 10 mm, villous, or high-grade dysplasia) or a serrated polyp with dysplasia."""
    for f in followup:
        if f.time_years < 0 or f.size_mm < 0:
            raise ValueError("finding times and sizes must be non-negative")
    return int(any(f.time_years <= window_years and is_high_risk_finding(f) for f in followup))


# ----------------------------------------------------------------------------
# preprocessing


def _is_missing(value):
    return value is None or value == "" or (isinstance(value, float) and math.isnan(value))


@dataclass
class PreprocStats:
    schema: ClinicalSchema
    means: dict
    stds: dict
    modes: dict

    @property
    def width(self):
        return self.schema.width


@dataclass
class ClinicalVector:
    values: np.ndarray
    provenance: dict = field(default_factory=dict)  # variable -> "missing" | "unseen"


def fit_preprocessor(train_records, schema: ClinicalSchema) -> PreprocStats:
    """Means, population stds and modes from the training records only."""
    if len(train_records) == 0:
        raise ValueError("cannot fit a preprocessor on an empty training set")
    means, stds, modes = {}, {}, {}
    for v in schema.variables:
        vals = [r.get(v.name) for r in train_records]
        vals = [x for x in vals if not _is_missing(x)]
        if v.kind == "continuous":
            arr = np.asarray(vals, dtype=np.float64)
            means[v.name] = float(arr.mean()) if arr.size else 0.0
            stds[v.name] = float(arr.std()) if arr.size else 0.0
        else:
            counts = {lv: 0 for lv in v.levels}
            for x in vals:
                if str(x) in counts:
                    counts[str(x)] += 1
            # ties -> earliest level in schema order
            modes[v.name] = max(v.levels, key=lambda lv: (counts[lv], -v.levels.index(lv)))
    return PreprocStats(schema, means, stds, modes)


def apply(stats: PreprocStats, record) -> ClinicalVector:
    out = np.zeros(stats.schema.width)
    prov = {}
    col = 0
    for v in stats.schema.variables:
        x = record.get(v.name)
        if v.kind == "continuous":
            if _is_missing(x):
                prov[v.name] = "missing"
                x = stats.means[v.name]
            sd = stats.stds[v.name]
            out[col] = 0.0 if sd == 0 else (float(x) - stats.means[v.name]) / sd
        else:
            if _is_missing(x):
                prov[v.name] = "missing"
                x = stats.modes[v.name]
            elif str(x) not in v.levels:
                prov[v.name] = "unseen"
                x = stats.modes[v.name]
            out[col + v.levels.index(str(x))] = 1.0
        col += v.width
    return ClinicalVector(out, prov)


def transform(stats: PreprocStats, records):
    if not records:
        return np.zeros((0, stats.width))
    return np.stack([apply(stats, r).values for r in records])


# ----------------------------------------------------------------------------
# models


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class ConstantModel:
    def __init__(self, p):
        self.p = float(p)

    def predict_proba(self, X):
        return np.full(len(X), self.p)


def _single_class(y):
    y = np.asarray(y)
    if y.size and (y.min() == y.max()):
        warnings.warn("training labels contain a single class; fitting a constant predictor", RuntimeWarning)
        return ConstantModel(float(y[0]))
    return None


@dataclass
class LogisticModel:
    w: np.ndarray
    b: float
    converged: bool = True
    n_iter: int = 0

    def decision_function(self, X):
        return np.asarray(X, dtype=np.float64) @ self.w + self.b

    def predict_proba(self, X):
        return _sigmoid(self.decision_function(X))


def logistic_objective(w, b, X, y, lam):
    z = X @ w + b
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * lam * w @ w
    r = _sigmoid(z) - y
    gw = X.T @ r / len(y) + lam * w
    gb = r.mean()
    return loss, gw, gb


def fit_logistic_l2(X, y, lam=1e-2, tol=1e-6, max_iter=100) -> LogisticModel:
    """Newton's method on mean log-loss + lam/2 ||w||^2 (bias unpenalized).

    Stops when the full gradient norm falls below ``tol``; if ``max_iter`` is
    reached first a warning is issued and ``converged`` is False.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("X must be finite")
    n, p = X.shape
    Xb = np.hstack([X, np.ones((n, 1))])
    theta = np.zeros(p + 1)
    prev = np.clip(y.mean(), 1e-12, 1 - 1e-12)
    theta[-1] = math.log(prev / (1 - prev))
    reg = np.full(p + 1, lam)
    reg[-1] = 0.0

    def obj(t):
        loss, gw, gb = logistic_objective(t[:-1], t[-1], X, y, lam)
        return loss, np.append(gw, gb)

    loss, g = obj(theta)
    for it in range(1, max_iter + 1):
        if np.linalg.norm(g) < tol:
            return LogisticModel(theta[:-1], float(theta[-1]), True, it - 1)
        s = _sigmoid(Xb @ theta)
        H = (Xb * (s * (1 - s))[:, None]).T @ Xb / n + np.diag(reg) + 1e-12 * np.eye(p + 1)
        step = np.linalg.solve(H, g)
        t = 1.0
        while True:
            cand = theta - t * step
            closs, cg = obj(cand)
            if closs <= loss - 1e-4 * t * (g @ step) or t < 1e-10:
                break
            t *= 0.5
        theta, loss, g = cand, closs, cg
    converged = bool(np.linalg.norm(g) < tol)
    if not converged:
        warnings.warn(f"logistic regression did not converge (|grad|={np.linalg.norm(g):.2e})", RuntimeWarning)
    return LogisticModel(theta[:-1], float(theta[-1]), converged, max_iter)


def predict_proba(model, X):
    return model.predict_proba(np.asarray(X, dtype=np.float64))


@dataclass
class ForestConfig:
    n_trees: int = 200
    max_depth: int = 8
    min_leaf: int = 5
    seed: int = 0


class RandomForestModel:
    """Bagged Gini trees with sqrt(p) feature subsampling (scikit-learn backend)."""

    def __init__(self, forest):
        self.forest = forest

    def predict_proba(self, X):
        return self.forest.predict_proba(np.asarray(X, dtype=np.float64))[:, 1]


def fit_random_forest(X, y, cfg: ForestConfig = None):
    from sklearn.ensemble import RandomForestClassifier

    cfg = cfg or ForestConfig()
    const = _single_class(y)
    if const is not None:
        return const
    forest = RandomForestClassifier(
        n_estimators=cfg.n_trees, max_depth=cfg.max_depth, min_samples_leaf=cfg.min_leaf,
        max_features="sqrt", criterion="gini", bootstrap=True, random_state=cfg.seed, n_jobs=1)
    forest.fit(np.asarray(X, dtype=np.float64), np.asarray(y).astype(int))
    return RandomForestModel(forest)


@dataclass
class MLPConfig:
    hidden: int = 32
    lam: float = 1e-3
    seed: int = 0
    max_iter: int = 500
    tol: float = 1e-6

    def __post_init__(self):
        if self.hidden < 1:
            raise ConfigError("MLP needs at least one hidden unit")


def init_mlp(n_in, cfg: MLPConfig):
    rng = np.random.default_rng(cfg.seed)
    return {
        "W1": rng.normal(0, 1 / math.sqrt(max(n_in, 1)), (n_in, cfg.hidden)),
        "b1": np.zeros(cfg.hidden),
        "W2": rng.normal(0, 1 / math.sqrt(cfg.hidden), (cfg.hidden,)),
        "b2": np.zeros(1),
    }


def mlp_logits(params, X):
    return np.tanh(X @ params["W1"] + params["b1"]) @ params["W2"] + params["b2"][0]


def mlp_loss(params, X, y, lam, with_grad=False):
    """Mean cross-entropy + lam/2 (|W1|^2 + |W2|^2); same protocol as the transformer losses."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    a = np.tanh(X @ params["W1"] + params["b1"])
    z = a @ params["W2"] + params["b2"][0]
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z)
                 + 0.5 * lam * (np.sum(params["W1"] ** 2) + np.sum(params["W2"] ** 2)))
    if not with_grad:
        return loss
    dz = (_sigmoid(z) - y) / n
    da = np.outer(dz, params["W2"]) * (1 - a ** 2)
    g = {
        "W2": a.T @ dz + lam * params["W2"],
        "b2": np.array([dz.sum()]),
        "W1": X.T @ da + lam * params["W1"],
        "b1": da.sum(axis=0),
    }
    return loss, g


class MLPModel:
    def __init__(self, params, converged=True):
        self.params = params
        self.converged = converged

    def predict_proba(self, X):
        return _sigmoid(mlp_logits(self.params, np.asarray(X, dtype=np.float64)))


_MLP_KEYS = ("W1", "b1", "W2", "b2")


def _pack(params):
    return np.concatenate([params[k].ravel() for k in _MLP_KEYS])


def _unpack(theta, template):
    out, i = {}, 0
    for k in _MLP_KEYS:
        n = template[k].size
        out[k] = theta[i:i + n].reshape(template[k].shape)
        i += n
    return out


def fit_mlp(X, y, cfg: MLPConfig = None) -> MLPModel:
    """One tanh hidden layer trained full-batch with L-BFGS on the analytic gradient."""
    cfg = cfg or MLPConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    const = _single_class(y)
    if const is not None:
        return const
    template = init_mlp(X.shape[1], cfg)

    def fg(theta):
        loss, g = mlp_loss(_unpack(theta, template), X, y, cfg.lam, with_grad=True)
        return loss, _pack(g)

    res = minimize(fg, _pack(template), jac=True, method="L-BFGS-B",
                   options={"maxiter": cfg.max_iter, "gtol": cfg.tol})
    if not np.isfinite(res.fun):
        raise NumericalError("MLP training diverged")
    if not res.success and res.nit >= cfg.max_iter:
        warnings.warn(f"MLP stopped at max_iter={cfg.max_iter}", RuntimeWarning)
    return MLPModel(_unpack(res.x, template), bool(res.success))


TABULAR_MODELS = ("lr", "rf", "mlp")


def fit_tabular(kind, X, y, seed=0, lam=1e-2):
    if kind == "lr":
        const = _single_class(y)
        return const if const is not None else fit_logistic_l2(X, y, lam)
    if kind == "rf":
        return fit_random_forest(X, y, ForestConfig(seed=seed))
    if kind == "mlp":
        return fit_mlp(X, y, MLPConfig(seed=seed))
    raise ConfigError(f"unknown tabular model {kind!r}; valid: {', '.join(TABULAR_MODELS)}")
