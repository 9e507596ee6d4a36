"""Naive Bayes prediction of which block transactions a peer is missing.

Classes are "present" and "missing"; "missing" is the positive class. Four
features per transaction: effective fee (gWei), age at the sender (s), rank
ratio inside the block, and whether the sender holds the transaction.

Continuous conditionals are either closed-form curves (the fitted shapes the
default model ships with) or histograms produced by `train`. The fitted
curves are likelihood shapes, not normalized densities; only the argmax of
the score matters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

PRESENT = "present"
MISSING = "missing"
LABELS = (PRESENT, MISSING)
CONTINUOUS = ("fee_gwei", "age_s", "rank_ratio")
EPSILON = 1e-12

DEFAULT_RANGES = {"fee_gwei": (0.0, 200.0), "age_s": (0.0, 200.0), "rank_ratio": (0.0, 1.0)}
DEFAULT_BINS = {"fee_gwei": 40, "age_s": 40, "rank_ratio": 20}


@dataclass(frozen=True)
class FeatureVector:
    fee_gwei: float
    age_s: float
    rank_ratio: float
    present_at_sender: bool

    def __post_init__(self) -> None:
        if not 0.0 <= self.rank_ratio <= 1.0:
            raise ValueError(f"rank_ratio {self.rank_ratio} outside [0, 1]")
        if self.age_s < 0 or self.fee_gwei < 0:
            raise ValueError("fee and age must be non-negative")


@dataclass(frozen=True)
class LabeledSample:
    features: FeatureVector
    label: str

    def to_record(self) -> dict:
        f = self.features
        return {
            "fee_gwei": f.fee_gwei,
            "age_s": f.age_s,
            "rank_ratio": f.rank_ratio,
            "present_at_sender": f.present_at_sender,
            "label": self.label,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "LabeledSample":
        if rec["label"] not in LABELS:
            raise ValueError(f"unknown label {rec['label']!r}")
        f = FeatureVector(
            float(rec["fee_gwei"]),
            float(rec["age_s"]),
            float(rec["rank_ratio"]),
            bool(rec["present_at_sender"]),
        )
        return cls(f, rec["label"])


def extract_features(
    fee_wei: int,
    position: tuple[int, int],
    sender_first_seen_ms: Optional[float],
    present_at_sender: bool,
    now_ms: float,
) -> FeatureVector:
    """Features of the n-th of m block transactions as seen by the sending node."""
    n, m = position
    if not 1 <= n <= m:
        raise ValueError(f"position {n}/{m} out of range")
    if sender_first_seen_ms is None:
        age = 0.0
    else:
        age = max(now_ms - sender_first_seen_ms, 0.0) / 1000.0
    return FeatureVector(fee_wei / 1e9, age, n / m, present_at_sender)


# ----- densities -----

def _inverse_quadratic(x, c):
    return c[0] / (x * x + c[1] * x + c[2])


def _two_gaussian(x, c):
    return c[0] * np.exp(-(((x - c[1]) / c[2]) ** 2)) + c[3] * np.exp(-(((x - c[4]) / c[5]) ** 2))


def _reciprocal(x, c):
    return c[0] / (x + c[1])


def _quadratic(x, c):
    return c[0] * x * x + c[1] * x + c[2]


def _linear_ratio(x, c):
    return (c[0] * x + c[1]) / (x + c[2])


CURVES: dict[str, Callable] = {
    "inverse_quadratic": _inverse_quadratic,
    "two_gaussian": _two_gaussian,
    "reciprocal": _reciprocal,
    "quadratic": _quadratic,
    "linear_ratio": _linear_ratio,
}


@dataclass(frozen=True)
class ParamCurve:
    name: str
    coeffs: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.name not in CURVES:
            raise ValueError(f"unknown curve {self.name!r}")

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return CURVES[self.name](np.asarray(x, dtype=float), self.coeffs)

    def __call__(self, x: float) -> float:
        return float(self.evaluate(np.array([x]))[0])

    def to_dict(self) -> dict:
        return {"kind": "curve", "name": self.name, "coeffs": list(self.coeffs)}


@dataclass(frozen=True)
class Histogram:
    edges: tuple[float, ...]
    masses: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.edges) != len(self.masses) + 1:
            raise ValueError("histogram needs len(edges) == len(masses) + 1")
        if any(m < 0 for m in self.masses):
            raise ValueError("histogram masses must be non-negative")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError("histogram edges must be strictly increasing")

    def bin_index(self, x: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(np.asarray(self.edges), x, side="right") - 1
        return np.clip(idx, 0, len(self.masses) - 1)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        widths = np.diff(self.edges)
        dens = np.asarray(self.masses) / widths
        return dens[self.bin_index(np.asarray(x, dtype=float))]

    def __call__(self, x: float) -> float:
        return float(self.evaluate(np.array([x]))[0])

    def integral(self) -> float:
        return float(sum(self.masses))

    def to_dict(self) -> dict:
        return {"kind": "histogram", "edges": list(self.edges), "masses": list(self.masses)}


@dataclass(frozen=True)
class Categorical:
    """Distribution of the boolean present-at-sender feature."""

    p_present: float
    p_missing: float

    def evaluate(self, present: np.ndarray) -> np.ndarray:
        return np.where(np.asarray(present, dtype=bool), self.p_present, self.p_missing)

    def __call__(self, present: bool) -> float:
        return self.p_present if present else self.p_missing

    def to_dict(self) -> dict:
        return {"kind": "categorical", "present": self.p_present, "missing": self.p_missing}


Density = Union[ParamCurve, Histogram, Categorical]


def density_from_dict(d: dict) -> Density:
    kind = d["kind"]
    if kind == "curve":
        return ParamCurve(d["name"], tuple(float(c) for c in d["coeffs"]))
    if kind == "histogram":
        return Histogram(tuple(d["edges"]), tuple(d["masses"]))
    if kind == "categorical":
        return Categorical(float(d["present"]), float(d["missing"]))
    raise ValueError(f"unknown density kind {kind!r}")


# ----- model -----

FEATURE_KEYS = CONTINUOUS + ("present_at_sender",)


@dataclass(frozen=True)
class BayesModel:
    prior_present: float
    prior_missing: float
    cond: dict  # (feature, label) -> Density

    def __post_init__(self) -> None:
        if abs(self.prior_present + self.prior_missing - 1.0) > 1e-9:
            raise ValueError("priors must sum to 1")
        for feat in FEATURE_KEYS:
            for label in LABELS:
                if (feat, label) not in self.cond:
                    raise ValueError(f"missing conditional for {feat}|{label}")

    def prior(self, label: str) -> float:
        return self.prior_present if label == PRESENT else self.prior_missing

    def to_dict(self) -> dict:
        return {
            "prior_present": self.prior_present,
            "prior_missing": self.prior_missing,
            "cond": {f"{feat}|{label}": self.cond[(feat, label)].to_dict()
                     for feat in FEATURE_KEYS for label in LABELS},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BayesModel":
        cond = {}
        for key, desc in d["cond"].items():
            feat, label = key.split("|")
            cond[(feat, label)] = density_from_dict(desc)
        return cls(float(d["prior_present"]), float(d["prior_missing"]), cond)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "BayesModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def reference_model() -> BayesModel:
    """The shipped fitted model."""
    cond = {
        ("fee_gwei", PRESENT): ParamCurve("inverse_quadratic", (0.6222, -0.1143, 0.8207)),
        ("fee_gwei", MISSING): ParamCurve("inverse_quadratic", (0.5636, -0.2979, 0.7611)),
        ("age_s", PRESENT): ParamCurve("two_gaussian", (0.0275, 6.447, 5.632, 0.02145, 13.44, 20.46)),
        ("age_s", MISSING): ParamCurve("reciprocal", (0.0306, 0.04501)),
        ("rank_ratio", PRESENT): ParamCurve("quadratic", (-0.003665, 0.004119, 0.009356)),
        ("rank_ratio", MISSING): ParamCurve("linear_ratio", (0.0047, 0.001141, 0.01187)),
        ("present_at_sender", PRESENT): Categorical(0.99, 0.01),
        ("present_at_sender", MISSING): Categorical(0.23, 0.77),
    }
    return BayesModel(0.92, 0.08, cond)


@dataclass(frozen=True)
class Classification:
    label: str
    score_missing: float
    score_present: float


def _columns(features: Sequence[FeatureVector]) -> dict[str, np.ndarray]:
    return {
        "fee_gwei": np.fromiter((f.fee_gwei for f in features), float, len(features)),
        "age_s": np.fromiter((f.age_s for f in features), float, len(features)),
        "rank_ratio": np.fromiter((f.rank_ratio for f in features), float, len(features)),
        "present_at_sender": np.fromiter((f.present_at_sender for f in features), bool, len(features)),
    }


def log_scores(model: BayesModel, cols: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-row (score_missing, score_present) in the log domain with the density floor."""
    out = []
    for label in (MISSING, PRESENT):
        s = math.log(max(model.prior(label), EPSILON))
        for feat in FEATURE_KEYS:
            dens = model.cond[(feat, label)].evaluate(cols[feat])
            s = s + np.log(np.maximum(dens, EPSILON))
        out.append(np.broadcast_to(s, cols["rank_ratio"].shape))
    return out[0], out[1]


def classify(model: BayesModel, f: FeatureVector) -> Classification:
    sm, sp = log_scores(model, _columns([f]))
    sm, sp = float(sm[0]), float(sp[0])
    return Classification(MISSING if sm >= sp else PRESENT, sm, sp)


def classify_batch(model: BayesModel, features: Sequence[FeatureVector]) -> np.ndarray:
    """Boolean array, True where the transaction is predicted missing."""
    if not features:
        return np.zeros(0, dtype=bool)
    sm, sp = log_scores(model, _columns(features))
    return sm >= sp


# ----- training -----

def _edges(feature: str, bins, ranges: dict) -> np.ndarray:
    if isinstance(bins, int):
        lo, hi = ranges[feature]
        return np.linspace(lo, hi, bins + 1)
    return np.asarray(bins, dtype=float)


def _histogram(values: np.ndarray, edges: np.ndarray) -> Histogram:
    idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, len(edges) - 2)
    counts = np.bincount(idx, minlength=len(edges) - 1).astype(float)
    masses = counts / counts.sum()
    return Histogram(tuple(float(e) for e in edges), tuple(float(m) for m in masses))


def train(
    samples: Sequence[LabeledSample],
    bins: Optional[dict] = None,
    ranges: Optional[dict] = None,
) -> BayesModel:
    """Histogram Naive Bayes. `bins` maps feature -> bin count or explicit edges."""
    bins = {**DEFAULT_BINS, **(bins or {})}
    ranges = {**DEFAULT_RANGES, **(ranges or {})}
    by_label = {label: [s.features for s in samples if s.label == label] for label in LABELS}
    for label, feats in by_label.items():
        if not feats:
            raise ValueError(f"training set has no {label!r} samples")
    total = len(by_label[PRESENT]) + len(by_label[MISSING])
    cond = {}
    for label, feats in by_label.items():
        cols = _columns(feats)
        for feat in CONTINUOUS:
            cond[(feat, label)] = _histogram(cols[feat], _edges(feat, bins[feat], ranges))
        n = len(feats)
        n_present = int(cols["present_at_sender"].sum())
        cond[("present_at_sender", label)] = Categorical(
            (n_present + 1) / (n + 2), (n - n_present + 1) / (n + 2)
        )
    p_missing = len(by_label[MISSING]) / total
    return BayesModel(1.0 - p_missing, p_missing, cond)


# ----- evaluation -----

@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fn: int
    fp: int
    tn: int

    @property
    def precision(self) -> Optional[float]:
        d = self.tp + self.fp
        return self.tp / d if d else None

    @property
    def recall(self) -> Optional[float]:
        d = self.tp + self.fn
        return self.tp / d if d else None

    @property
    def accuracy(self) -> Optional[float]:
        d = self.tp + self.fn + self.fp + self.tn
        return (self.tp + self.tn) / d if d else None

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fn": self.fn, "fp": self.fp, "tn": self.tn,
            "precision": self.precision, "recall": self.recall,
        }


REFERENCE_CONFUSION = ConfusionMatrix(tp=9385, fn=12182, fp=483, tn=177950)


def confusion(predicted_missing: Iterable[bool], actual_missing: Iterable[bool]) -> ConfusionMatrix:
    tp = fn = fp = tn = 0
    for p, a in zip(predicted_missing, actual_missing):
        if a:
            tp += p
            fn += not p
        else:
            fp += p
            tn += not p
    return ConfusionMatrix(int(tp), int(fn), int(fp), int(tn))


def evaluate(model: BayesModel, test: Sequence[LabeledSample]) -> ConfusionMatrix:
    if not test:
        raise ValueError("empty test set")
    pred = classify_batch(model, [s.features for s in test])
    actual = [s.label == MISSING for s in test]
    return confusion(pred.tolist(), actual)


# ----- predictors used by the protocol layer -----

class Predictor:
    def predict_missing(self, features: Sequence[FeatureVector]) -> list[bool]:
        raise NotImplementedError


@dataclass
class BayesPredictor(Predictor):
    model: BayesModel = field(default_factory=reference_model)

    def predict_missing(self, features: Sequence[FeatureVector]) -> list[bool]:
        return classify_batch(self.model, features).tolist()


@dataclass
class ConstantPredictor(Predictor):
    missing: bool = False

    def predict_missing(self, features: Sequence[FeatureVector]) -> list[bool]:
        return [self.missing] * len(features)


# ----- dataset IO -----

def write_dataset(path: Union[str, Path], samples: Iterable[LabeledSample]) -> int:
    n = 0
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")
            n += 1
    return n


def read_dataset(path: Union[str, Path]) -> list[LabeledSample]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(LabeledSample.from_record(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad record: {exc}") from exc
    return out


# ----- generative sampling from a curve-based model -----

_GRID = 20001


def _grid(feature: str) -> np.ndarray:
    lo, hi = DEFAULT_RANGES[feature]
    return np.linspace(lo, hi, _GRID)


def _shape_mass(model: BayesModel, feature: str, label: str) -> tuple[np.ndarray, np.ndarray, float]:
    x = _grid(feature)
    y = np.maximum(model.cond[(feature, label)].evaluate(x), 0.0)
    cdf = np.concatenate([[0.0], np.cumsum((y[1:] + y[:-1]) / 2 * np.diff(x))])
    return x, cdf, float(cdf[-1])


def generative_priors(model: BayesModel) -> dict[str, float]:
    """Class weights of the joint proportional to prior times every likelihood shape."""
    w = {}
    for label in LABELS:
        z = model.prior(label)
        for feat in CONTINUOUS:
            z *= _shape_mass(model, feat, label)[2]
        w[label] = z
    total = sum(w.values())
    return {k: v / total for k, v in w.items()}


def sample_generative(model: BayesModel, n: int, rng: np.random.Generator) -> list[LabeledSample]:
    """Draw labeled samples whose Bayes-optimal decision is `model`'s decision.

    Continuous features are drawn by inverse-CDF from each likelihood shape
    truncated to its default range, with class weights from
    `generative_priors`.
    """
    priors = generative_priors(model)
    is_missing = rng.random(n) < priors[MISSING]
    cols: dict[str, np.ndarray] = {}
    for feat in CONTINUOUS:
        col = np.empty(n)
        for label, mask in ((MISSING, is_missing), (PRESENT, ~is_missing)):
            x, cdf, mass = _shape_mass(model, feat, label)
            u = rng.random(int(mask.sum())) * mass
            col[mask] = np.interp(u, cdf, x)
        cols[feat] = col
    p_present = np.where(
        is_missing,
        model.cond[("present_at_sender", MISSING)](True),
        model.cond[("present_at_sender", PRESENT)](True),
    )
    present = rng.random(n) < p_present
    return [
        LabeledSample(
            FeatureVector(float(cols["fee_gwei"][i]), float(cols["age_s"][i]),
                          float(min(max(cols["rank_ratio"][i], 0.0), 1.0)), bool(present[i])),
            MISSING if is_missing[i] else PRESENT,
        )
        for i in range(n)
    ]
