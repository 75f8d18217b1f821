"""Evaluation metrics: CCC and its loss, macro-F1, accuracy, paired t-test, run summaries."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import stats

from .errors import DegenerateTest, LabelError, ShapeError, TooShort

CCC_EPS = 1e-12


@dataclass(frozen=True)
class CccResult:
    ccc: float
    mu_y: float
    mu_yhat: float
    var_y: float
    var_yhat: float
    cov: float


def _pair(y, yhat):
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ShapeError(f"length mismatch: {y.size} vs {yhat.size}")
    if y.size < 2:
        raise TooShort("CCC needs at least two samples")
    return y, yhat


def ccc(y, yhat) -> CccResult:
    """Concordance correlation coefficient with population (1/n) moments.

    Returns 0 when the denominator falls below 1e-12 (both sequences constant and equal).
    """
    y, yhat = _pair(y, yhat)
    mu_y, mu_p = y.mean(), yhat.mean()
    dy, dp = y - mu_y, yhat - mu_p
    var_y, var_p = np.mean(dy * dy), np.mean(dp * dp)
    cov = np.mean(dy * dp)
    denom = var_y + var_p + (mu_y - mu_p) ** 2
    value = 0.0 if denom < CCC_EPS else float(np.clip(2.0 * cov / denom, -1.0, 1.0))
    return CccResult(value, float(mu_y), float(mu_p), float(var_y), float(var_p), float(cov))


def ccc_loss(y, yhat) -> float:
    """``1 - (CCC + 1) / 2``, in [0, 1]."""
    return 1.0 - (ccc(y, yhat).ccc + 1.0) / 2.0


def ccc_torch(y: torch.Tensor, yhat: torch.Tensor) -> torch.Tensor:
    """Differentiable CCC over the last axis (population moments)."""
    if y.shape != yhat.shape:
        raise ShapeError(f"shape mismatch: {tuple(y.shape)} vs {tuple(yhat.shape)}")
    mu_y, mu_p = y.mean(-1, keepdim=True), yhat.mean(-1, keepdim=True)
    dy, dp = y - mu_y, yhat - mu_p
    var_y, var_p = (dy * dy).mean(-1), (dp * dp).mean(-1)
    cov = (dy * dp).mean(-1)
    denom = var_y + var_p + (mu_y - mu_p).squeeze(-1) ** 2
    return 2.0 * cov / denom.clamp_min(CCC_EPS)


def ccc_loss_torch(y: torch.Tensor, yhat: torch.Tensor) -> torch.Tensor:
    """Mean CCC loss over the leading axes."""
    return (1.0 - (ccc_torch(y, yhat) + 1.0) / 2.0).mean()


def _labels(pred, true, n_classes):
    pred = np.asarray(pred, dtype=np.int64).ravel()
    true = np.asarray(true, dtype=np.int64).ravel()
    if pred.shape != true.shape:
        raise ShapeError(f"length mismatch: {pred.size} vs {true.size}")
    for name, a in (("pred", pred), ("true", true)):
        if a.size and (a.min() < 0 or a.max() >= n_classes):
            raise LabelError(f"{name} labels must lie in [0, {n_classes})")
    return pred, true


def confusion_matrix(pred, true, n_classes: int) -> np.ndarray:
    pred, true = _labels(pred, true, n_classes)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def macro_f1(pred, true, n_classes: int) -> float:
    """Unweighted mean of per-class F1; a class absent from both contributes 0."""
    cm = confusion_matrix(pred, true, n_classes)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(0) + cm.sum(1)
    f1 = np.divide(2 * tp, denom, out=np.zeros(n_classes), where=denom > 0)
    return float(f1.mean())


def accuracy(pred, true) -> float:
    pred, true = np.asarray(pred).ravel(), np.asarray(true).ravel()
    if pred.shape != true.shape:
        raise ShapeError(f"length mismatch: {pred.size} vs {true.size}")
    return float(np.mean(pred == true)) if pred.size else 0.0


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t-test; returns ``(t, p)`` with n-1 degrees of freedom."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise TooShort("paired t-test needs at least two pairs")
    d = a - b
    sd = d.std(ddof=1)
    # rounding noise from a constant shift must still count as degenerate
    if sd <= 1e-12 * max(np.abs(d).max(), np.finfo(float).tiny):
        raise DegenerateTest("differences have zero variance")
    n = d.size
    t = d.mean() / (sd / np.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), df=n - 1)
    return float(t), float(min(1.0, p))


@dataclass
class RunReport:
    metric_name: str
    values: list
    seeds: list = field(default_factory=list)
    mean: float = 0.0
    std: float = 0.0

    def __post_init__(self):
        self.values = [float(v) for v in self.values]
        if self.values:
            arr = np.asarray(self.values)
            self.mean = float(arr.mean())
            self.std = float(arr.std(ddof=0))

    def compare(self, other: "RunReport") -> dict:
        """Paired t-test of this report against ``other`` (same run seeds)."""
        try:
            t, p = paired_t_test(self.values, other.values)
        except (DegenerateTest, TooShort) as e:
            return {"t": None, "p": None, "note": str(e)}
        return {"t": t, "p": p}

    def to_dict(self) -> dict:
        return {"metric": self.metric_name, "values": self.values, "seeds": list(self.seeds),
                "mean": self.mean, "std": self.std}

    def __str__(self):
        return f"{self.metric_name}: {self.mean:.3f} ± {self.std:.3f} (n={len(self.values)})"
