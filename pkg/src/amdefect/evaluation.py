"""Accuracy, confusion matrices and windowed SSIM, plus the report format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_VARIANT = (f"uniform {SSIM_WINDOW}x{SSIM_WINDOW} window, stride 1, valid windows only, "
                f"population moments, K1={SSIM_K1}, K2={SSIM_K2}, L=1.0, mean over windows then channels")


def accuracy(preds, truth) -> float:
    preds = np.asarray(preds)
    truth = np.asarray(truth)
    if preds.shape != truth.shape:
        raise ValueError(f"length mismatch: {preds.shape} predictions vs {truth.shape} labels")
    if preds.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    return float((preds == truth).sum() / preds.size)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray                      # rows = true class, cols = predicted
    class_names: list[str] = field(default_factory=list)
    label_set: str | None = None

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.counts.sum())

    def recall(self) -> np.ndarray:
        rows = self.counts.sum(axis=1)
        return np.divide(np.diag(self.counts), rows, out=np.full(len(rows), np.nan), where=rows > 0)

    def precision(self) -> np.ndarray:
        cols = self.counts.sum(axis=0)
        return np.divide(np.diag(self.counts), cols, out=np.full(len(cols), np.nan), where=cols > 0)


def confusion(preds, truth, k: int, class_names=None, label_set: str | None = None) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {truth.shape}")
    for name, arr in (("prediction", preds), ("label", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{name} out of range [0, {k})")
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (truth, preds), 1)
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    return ConfusionMatrix(m, names, label_set)


def minority_recall(cm: ConfusionMatrix, majority: int = 0) -> float:
    """Recall pooled over every class except ``majority``."""
    keep = [i for i in range(len(cm.counts)) if i != majority]
    support = cm.counts[keep].sum()
    if support == 0:
        return float("nan")
    return float(cm.counts[keep, keep].sum() / support)


# SSIM

def _box_mean(x: np.ndarray, win: int) -> np.ndarray:
    """Mean over every win x win window (valid positions) of a 2-D float64 array."""
    c = np.zeros((x.shape[0] + 1, x.shape[1] + 1))
    c[1:, 1:] = x.cumsum(axis=0).cumsum(axis=1)
    s = c[win:, win:] - c[:-win, win:] - c[win:, :-win] + c[:-win, :-win]
    return s / (win * win)


def ssim_map(a: np.ndarray, b: np.ndarray, win: int = SSIM_WINDOW, data_range: float = 1.0) -> np.ndarray:
    """Per-window SSIM of two single-channel images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    # center first so the box-sum variance does not cancel catastrophically
    shift = 0.5 * (a.mean() + b.mean())
    a = a - shift
    b = b - shift
    mu_a = _box_mean(a, win)
    mu_b = _box_mean(b, win)
    var_a = np.maximum(_box_mean(a * a, win) - mu_a ** 2, 0.0)
    var_b = np.maximum(_box_mean(b * b, win) - mu_b ** 2, 0.0)
    cov = _box_mean(a * b, win) - mu_a * mu_b
    mu_a += shift
    mu_b += shift
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, win: int = SSIM_WINDOW) -> float:
    """Mean windowed SSIM, averaged over channels; inputs are H x W (x C) in [0, 1]."""
    a = getattr(a, "pixels", a)
    b = getattr(b, "pixels", b)
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.shape[0] < win or a.shape[1] < win:
        raise ValueError(f"ssim: images smaller than the {win}x{win} window")
    vals = [ssim_map(a[:, :, ch], b[:, :, ch], win).mean() for ch in range(a.shape[2])]
    return float(np.mean(vals))


@dataclass
class SSIMReport:
    values: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else float("nan")

    def to_dict(self) -> dict:
        v = np.asarray(self.values, dtype=np.float64)
        if v.size == 0:
            return {"count": 0}
        return {"count": int(v.size), "mean": float(v.mean()), "std": float(v.std()),
                "min": float(v.min()), "max": float(v.max()), "variant": SSIM_VARIANT}


def ssim_report(clean, other) -> SSIMReport:
    return SSIMReport([ssim(x, y) for x, y in zip(clean, other)])


# reports

def _pct(x: float) -> float | None:
    return None if x is None or np.isnan(x) else round(100.0 * x, 1)


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    ssim: SSIMReport | None = None
    title: str = "evaluation"

    @property
    def accuracy(self) -> float:
        return self.confusion.accuracy()

    def to_dict(self) -> dict:
        cm = self.confusion
        out = {
            "title": self.title,
            "label_set": cm.label_set,
            "classes": cm.class_names,
            "n": cm.total,
            "accuracy_percent": _pct(self.accuracy),
            "accuracy": self.accuracy,
            "confusion": cm.counts.tolist(),
            "recall_percent": {n: _pct(r) for n, r in zip(cm.class_names, cm.recall())},
            "precision_percent": {n: _pct(p) for n, p in zip(cm.class_names, cm.precision())},
        }
        if self.ssim is not None:
            out["ssim"] = self.ssim.to_dict()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        cm = self.confusion
        names = cm.class_names
        width = max([len(n) for n in names] + [10])
        lines = [f"# {self.title}", f"Testing accuracy (%): {100 * self.accuracy:.1f}  (n={cm.total})", "",
                 "confusion (rows = true, cols = predicted)"]
        lines.append(" " * width + "  " + "  ".join(f"{i:>6d}" for i in range(len(names))))
        for i, n in enumerate(names):
            lines.append(f"{n:<{width}}  " + "  ".join(f"{v:>6d}" for v in cm.counts[i]))
        lines.append("")
        lines.append(f"{'class':<{width}}  {'recall%':>8}  {'prec%':>8}")
        for n, r, p in zip(names, cm.recall(), cm.precision()):
            rs = "-" if np.isnan(r) else f"{100 * r:.1f}"
            ps = "-" if np.isnan(p) else f"{100 * p:.1f}"
            lines.append(f"{n:<{width}}  {rs:>8}  {ps:>8}")
        if self.ssim is not None and self.ssim.values:
            d = self.ssim.to_dict()
            lines += ["", f"SSIM mean {d['mean']:.3f} (std {d['std']:.3f}, min {d['min']:.3f}, "
                          f"max {d['max']:.3f}; {SSIM_VARIANT})"]
        return "\n".join(lines) + "\n"
