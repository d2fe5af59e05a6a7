"""Recognition and ordering metrics: character P/R/F1, NED, IoU, ROUGE-L, order accuracy."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Hashable, Iterable, Optional, Sequence

from callikit.geometry import BBox


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def char_prf(pred: Sequence[Hashable], gt: Sequence[Hashable]) -> PRF:
    """Precision/recall over character multisets.

    Matches are the size of the multiset intersection. Two empty inputs count
    as a perfect match.
    """
    if len(pred) == 0 and len(gt) == 0:
        return PRF(1.0, 1.0, 1.0)
    matches = sum((Counter(pred) & Counter(gt)).values())
    p = matches / len(pred) if pred else 0.0
    r = matches / len(gt) if gt else 0.0
    return PRF(p, r, f1_score(p, r))


def levenshtein(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def ned(pred: Sequence[Hashable], gt: Sequence[Hashable]) -> float:
    """Levenshtein distance over ``max(len(pred), len(gt))``; 0 for two empty inputs."""
    denom = max(len(pred), len(gt))
    if denom == 0:
        return 0.0
    return levenshtein(pred, gt) / denom


def iou(a: BBox, b: BBox) -> float:
    inter = a.intersection_area(b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def lcs_length(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for ca in a:
        cur = [0]
        for j, cb in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if ca == cb else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(pred: Sequence[Hashable], gt: Sequence[Hashable]) -> float:
    """ROUGE-L F-measure (balanced) from the longest common subsequence."""
    if len(pred) == 0 and len(gt) == 0:
        return 1.0
    lcs = lcs_length(pred, gt)
    if lcs == 0:
        return 0.0
    p = lcs / len(pred)
    r = lcs / len(gt)
    return 2 * p * r / (p + r)


def _check_permutation(perm: Sequence[int], name: str) -> None:
    if sorted(int(i) for i in perm) != list(range(len(perm))):
        raise ValueError(f"{name} is not a permutation of 0..{len(perm) - 1}: {list(perm)}")


def order_accuracy(pred: Sequence[int], gt: Sequence[int]) -> tuple[int, float]:
    """Return ``(exact, elementwise)`` agreement between two permutations."""
    if len(pred) != len(gt):
        raise ValueError(f"length mismatch: {len(pred)} vs {len(gt)}")
    _check_permutation(pred, "pred")
    _check_permutation(gt, "gt")
    if not gt:
        return 1, 1.0
    agree = sum(int(p) == int(g) for p, g in zip(pred, gt))
    return int(agree == len(gt)), agree / len(gt)


@dataclass(frozen=True)
class SampleScore:
    sample_id: str
    prf: PRF
    ned: float


@dataclass
class EvalReport:
    per_sample: list[SampleScore]
    precision: float
    recall: float
    macro_f1: float
    ned: float
    tier: Optional[str] = None
    missing: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "tier": self.tier,
            "count": len(self.per_sample),
            "precision": self.precision,
            "recall": self.recall,
            "macro_f1": self.macro_f1,
            "ned": self.ned,
            "missing": list(self.missing),
            "per_sample": [
                {"id": s.sample_id, **asdict(s.prf), "ned": s.ned} for s in self.per_sample
            ],
        }

    def table(self) -> str:
        head = f"{'tier':<8}{'n':>6}{'P':>8}{'R':>8}{'F1':>8}{'NED':>8}"
        row = (
            f"{(self.tier or 'all'):<8}{len(self.per_sample):>6}"
            f"{self.precision:>8.3f}{self.recall:>8.3f}{self.macro_f1:>8.3f}{self.ned:>8.3f}"
        )
        return head + "\n" + row


def score_sample(sample_id: str, pred: str, gt: str) -> SampleScore:
    return SampleScore(sample_id, char_prf(pred, gt), ned(pred, gt))


def aggregate(scores: Iterable[SampleScore], tier: Optional[str] = None) -> EvalReport:
    """Average per-sample scores; macro-F1 is the mean of per-sample F1."""
    scores = list(scores)
    if not scores:
        raise ValueError("cannot aggregate an empty sample set")
    n = len(scores)
    return EvalReport(
        per_sample=scores,
        precision=sum(s.prf.precision for s in scores) / n,
        recall=sum(s.prf.recall for s in scores) / n,
        macro_f1=sum(s.prf.f1 for s in scores) / n,
        ned=sum(s.ned for s in scores) / n,
        tier=tier,
    )
