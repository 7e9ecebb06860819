"""Generation-quality metrics and their continual-learning aggregates.

A run produces one result matrix per base metric with entry (i, j) holding
the value on scenario j (in training order) after training step i. The
report aggregates are means over the final row, plus the forgetting rate
computed from the retrieval-precision matrix.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ContractViolation, NumericFault
from .core.rng import RngStream

BASE_METRICS = ("fid", "rprecision", "diversity", "multimodality", "weighted_f1")


# -- Frechet distance ---------------------------------------------------------


def _sym_sqrt(mat: np.ndarray, context: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    if vals.min() < -1e-8:
        raise NumericFault(
            f"{context}: eigenvalue {vals.min():.3e} below -1e-8 in matrix sqrt"
        )
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid_from_stats(
    mu1: np.ndarray, sigma1: np.ndarray, mu2: np.ndarray, sigma2: np.ndarray
) -> float:
    """Frechet distance between Gaussians via a symmetric eigendecomposition:
    ||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)."""
    diff = np.asarray(mu1, float) - np.asarray(mu2, float)
    s1 = np.asarray(sigma1, float)
    s2 = np.asarray(sigma2, float)
    root1 = _sym_sqrt(s1, "fid")
    inner = root1 @ s2 @ root1
    inner = (inner + inner.T) / 2.0
    vals = np.linalg.eigvalsh(inner)
    if vals.min() < -1e-8:
        raise NumericFault(f"fid: cross-term eigenvalue {vals.min():.3e} below -1e-8")
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt)


def fid(real: np.ndarray, generated: np.ndarray, eps: float = 1e-6) -> float:
    """Sample-level Frechet distance; covariances get an eps*I regularizer so
    degenerate inputs (e.g. all-identical features) stay well defined."""
    real = np.asarray(real, float)
    generated = np.asarray(generated, float)
    if real.ndim != 2 or generated.ndim != 2:
        raise ContractViolation("fid expects 2-D feature arrays")
    if real.shape[0] < 2 or generated.shape[0] < 2:
        raise ContractViolation("fid needs at least 2 samples per side")
    if real.shape[1] != generated.shape[1]:
        raise ContractViolation(
            f"fid: feature widths differ ({real.shape[1]} vs {generated.shape[1]})"
        )
    d = real.shape[1]
    mu_r, mu_g = real.mean(axis=0), generated.mean(axis=0)
    sig_r = np.cov(real, rowvar=False, ddof=1) + eps * np.eye(d)
    sig_g = np.cov(generated, rowvar=False, ddof=1) + eps * np.eye(d)
    return fid_from_stats(mu_r, sig_r, mu_g, sig_g)


# -- retrieval precision ---------------------------------------------------------


def r_precision_hit(
    motion_feat: np.ndarray,
    true_text_feat: np.ndarray,
    distractor_feats: np.ndarray,
) -> bool:
    """Hit iff the true text is strictly nearest to the motion feature."""
    d_true = float(np.linalg.norm(motion_feat - true_text_feat))
    d_other = np.linalg.norm(distractor_feats - motion_feat, axis=1)
    return bool(d_true < d_other.min()) if len(d_other) else True


# -- diversity / multimodality -------------------------------------------------


@dataclass
class DiversityResult:
    value: float
    pairs_used: int
    reduced: bool = False


def diversity(features: np.ndarray, pairs: int, rng: RngStream) -> DiversityResult:
    """Mean distance over ``pairs`` disjoint random pairs; shrinks the pair
    count (and records that) when samples run short."""
    features = np.asarray(features, float)
    n = features.shape[0]
    if n < 2:
        raise ContractViolation("diversity needs at least 2 samples")
    actual = min(pairs, n // 2)
    perm = rng.permutation(n)[: 2 * actual]
    a = features[perm[0::2]]
    b = features[perm[1::2]]
    value = float(np.linalg.norm(a - b, axis=1).mean())
    return DiversityResult(value=value, pairs_used=actual, reduced=actual < pairs)


@dataclass
class MultimodalityResult:
    value: float
    zero_variance: bool


def multimodality(per_text_features: list[np.ndarray]) -> MultimodalityResult:
    """Mean within-text pair distance, averaged over texts. Each entry holds
    2*S_m features of generations for one text, paired consecutively."""
    if not per_text_features:
        raise ContractViolation("multimodality needs at least one text group")
    means = []
    for feats in per_text_features:
        feats = np.asarray(feats, float)
        if feats.shape[0] < 2:
            raise ContractViolation("each text needs at least 2 generations")
        half = feats.shape[0] // 2
        a, b = feats[: 2 * half : 2], feats[1 : 2 * half : 2]
        means.append(np.linalg.norm(a - b, axis=1).mean())
    value = float(np.mean(means))
    return MultimodalityResult(value=value, zero_variance=value == 0.0)


# -- weighted F1 ---------------------------------------------------------------


@dataclass
class WeightedF1Result:
    value: float
    excluded_classes: list[int] = field(default_factory=list)


def weighted_f1(
    true_labels: np.ndarray, pred_labels: np.ndarray, n_classes: int
) -> WeightedF1Result:
    """Support-weighted mean of per-class F1; classes absent from the truth
    are excluded from the weighting and recorded."""
    true_labels = np.asarray(true_labels)
    pred_labels = np.asarray(pred_labels)
    if true_labels.shape != pred_labels.shape:
        raise ContractViolation("weighted_f1: label arrays differ in shape")
    total = len(true_labels)
    score = 0.0
    excluded = []
    for c in range(n_classes):
        support = int((true_labels == c).sum())
        if support == 0:
            excluded.append(c)
            continue
        tp = int(((true_labels == c) & (pred_labels == c)).sum())
        fp = int(((true_labels != c) & (pred_labels == c)).sum())
        fn = support - tp
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        score += (support / total) * f1
    return WeightedF1Result(value=float(score), excluded_classes=excluded)


# -- forgetting rate ---------------------------------------------------------------


def forgetting_rate(r_matrix: np.ndarray) -> float:
    """Mean over the first N-1 columns of (historical max r_{k,j} for
    k in [j, N-1] minus the final-row value r_{N,j}); 1-indexed in the usual
    formula, 0-indexed here. Negative values mean backward transfer."""
    r = np.asarray(r_matrix, float)
    n = r.shape[0]
    if n < 2:
        raise ContractViolation("forgetting rate undefined for fewer than 2 steps")
    gaps = []
    for j in range(n - 1):
        hist = r[j : n - 1, j]
        if np.isnan(hist).any() or np.isnan(r[n - 1, j]):
            raise ContractViolation(f"forgetting rate: missing cells in column {j}")
        gaps.append(hist.max() - r[n - 1, j])
    return float(np.mean(gaps))


# -- sign test ---------------------------------------------------------------


def binomial_sign_test_p(successes: int, trials: int) -> float:
    """One-sided exact binomial p-value against chance (p=0.5)."""
    if trials < 1 or successes > trials:
        raise ContractViolation("sign test: bad counts")
    total = sum(math.comb(trials, k) for k in range(successes, trials + 1))
    return total / 2.0**trials


# -- result matrices and reports ---------------------------------------------------


class ResultMatrix:
    """Per-metric values (training step x scenario column), NaN = unfilled."""

    def __init__(self, name: str, n_steps: int, n_columns: int):
        self.name = name
        self.values = np.full((n_steps, n_columns), np.nan)

    def set(self, step: int, column: int, value: float) -> None:
        if not np.isfinite(value):
            raise NumericFault(f"{self.name}[{step},{column}] is not finite")
        self.values[step, column] = value

    def get(self, step: int, column: int) -> float:
        return float(self.values[step, column])

    def final_row(self) -> np.ndarray:
        row = self.values[-1]
        missing = np.flatnonzero(np.isnan(row)).tolist()
        if missing:
            raise ContractViolation(
                f"{self.name}: final row missing columns {missing}"
            )
        return row

    def to_csv(self, path: str | Path) -> None:
        lines = ["step," + ",".join(f"col{j}" for j in range(self.values.shape[1]))]
        for i, row in enumerate(self.values):
            cells = ",".join("" if np.isnan(v) else repr(float(v)) for v in row)
            lines.append(f"{i},{cells}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, name: str, path: str | Path) -> "ResultMatrix":
        lines = Path(path).read_text().strip().splitlines()
        rows = []
        for line in lines[1:]:
            cells = line.split(",")[1:]
            rows.append([float(c) if c else np.nan for c in cells])
        out = cls(name, len(rows), len(rows[0]))
        out.values = np.array(rows)
        return out


@dataclass
class MetricsReport:
    method: str
    mode: str
    seed: int
    order: list[int]
    af: float
    ar: float
    ad: float
    amm: float
    awf: float
    fr: float | None
    per_scenario: dict[str, list[float]]
    notes: dict[str, object] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "method": self.method,
            "mode": self.mode,
            "seed": self.seed,
            "order": self.order,
            "aggregates": {
                "AF": self.af, "AR": self.ar, "AD": self.ad,
                "AMM": self.amm, "AWF": self.awf,
                "FR": self.fr,
            },
            "per_scenario": self.per_scenario,
            "notes": self.notes,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        obj = json.loads(text)
        agg = obj["aggregates"]
        return cls(
            method=obj["method"], mode=obj["mode"], seed=obj["seed"],
            order=obj["order"], af=agg["AF"], ar=agg["AR"], ad=agg["AD"],
            amm=agg["AMM"], awf=agg["AWF"], fr=agg["FR"],
            per_scenario=obj["per_scenario"], notes=obj.get("notes", {}),
        )


def aggregate(
    matrices: dict[str, ResultMatrix],
    method: str,
    mode: str,
    seed: int,
    order: list[int],
    notes: dict | None = None,
) -> MetricsReport:
    """Final-row means for every base metric plus the forgetting rate."""
    missing = [m for m in BASE_METRICS if m not in matrices]
    if missing:
        raise ContractViolation(f"aggregate: missing matrices {missing}")
    rows = {name: matrices[name].final_row() for name in BASE_METRICS}
    n_steps = matrices["rprecision"].values.shape[0]
    fr = forgetting_rate(matrices["rprecision"].values) if n_steps >= 2 else None
    return MetricsReport(
        method=method, mode=mode, seed=seed, order=list(order),
        af=float(rows["fid"].mean()),
        ar=float(rows["rprecision"].mean()),
        ad=float(rows["diversity"].mean()),
        amm=float(rows["multimodality"].mean()),
        awf=float(rows["weighted_f1"].mean()),
        fr=fr,
        per_scenario={name: [float(v) for v in rows[name]] for name in BASE_METRICS},
        notes=notes or {},
    )
