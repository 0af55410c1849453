"""Detection metrics: DET sweep, equal error rate and normalized minimum DCF.

A trial is accepted when ``score >= threshold``. The sweep visits ``-inf``,
every distinct score once, and ``+inf``; miss and false-alarm counts are
kept as integers so results are exact functions of the score ranks.
"""

from dataclasses import dataclass, field

import numpy as np

from .corpus import Trial  # noqa: F401 (re-exported)
from .errors import EvaluationError, InputError
from .io import atomic_write

DEFAULT_P_TARGETS = (0.01, 0.001)


@dataclass(frozen=True)
class DcfParams:
    p_target: float
    cost_miss: float = 1.0
    cost_fa: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise InputError("p_target must lie strictly between 0 and 1")
        if self.cost_miss <= 0 or self.cost_fa <= 0:
            raise InputError("costs must be positive")


@dataclass
class DetCurve:
    thresholds: np.ndarray
    n_miss: np.ndarray
    n_fa: np.ndarray
    n_target: int
    n_nontarget: int

    @property
    def p_miss(self):
        return self.n_miss / self.n_target

    @property
    def p_fa(self):
        return self.n_fa / self.n_nontarget

    def points(self):
        return list(zip(self.thresholds.tolist(), self.p_miss.tolist(), self.p_fa.tolist()))


def _split(scores, labels=None):
    if labels is None:
        labels = scores.labels
        scores = scores.scores
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InputError("scores and labels must be matching 1-D arrays")
    if not np.all(np.isfinite(scores)):
        raise EvaluationError("scores must be finite")
    return scores[labels], scores[~labels]


def det_curve(scores, labels=None):
    """Sweep every distinct score. Accepts a ScoreSet, or raw scores with boolean labels."""
    tgt, non = _split(scores, labels)
    if len(tgt) == 0 or len(non) == 0:
        raise EvaluationError(
            f"need both classes, got {len(tgt)} target and {len(non)} nontarget trials"
        )
    thresholds = np.concatenate([[-np.inf], np.unique(np.concatenate([tgt, non])), [np.inf]])
    n_miss = np.searchsorted(np.sort(tgt), thresholds, side="left")
    n_fa = len(non) - np.searchsorted(np.sort(non), thresholds, side="left")
    return DetCurve(thresholds, n_miss, n_fa, len(tgt), len(non))


def eer(curve):
    """Equal error rate, interpolated linearly between the two points straddling p_miss = p_fa."""
    pm, pf = curve.p_miss, curve.p_fa
    i = int(np.flatnonzero(pm >= pf)[0])
    if i == 0:
        return float(pm[0])
    dm = pm[i] - pm[i - 1]
    df = pf[i] - pf[i - 1]
    lam = (pf[i - 1] - pm[i - 1]) / (dm - df)
    return float(pm[i - 1] + lam * dm)


def min_dcf(curve, params):
    """Minimum detection cost normalized by the better of always-accept / always-reject."""
    if not isinstance(params, DcfParams):
        params = DcfParams(params)
    c_miss = params.cost_miss * params.p_target
    c_fa = params.cost_fa * (1.0 - params.p_target)
    cost = c_miss * curve.p_miss + c_fa * curve.p_fa
    return float(cost.min() / min(c_miss, c_fa))


def dcf_label(p_target):
    exponent = np.log10(p_target)
    if np.isclose(exponent, round(exponent)):
        return f"DCF(10^{int(round(exponent))})"
    return f"DCF({p_target:g})"


@dataclass
class Report:
    dcf: dict = field(default_factory=dict)   # p_target -> normalized minDCF, in column order
    eer: float = 0.0
    n_target: int = 0
    n_nontarget: int = 0

    @property
    def eer_percent(self):
        return 100.0 * self.eer

    @property
    def dcf_1e2(self):
        return self.dcf[0.01]

    @property
    def dcf_1e3(self):
        return self.dcf[0.001]

    def columns(self):
        """``(name, value)`` pairs in table order: the DCF columns, then EER(%)."""
        cols = [(dcf_label(p), v) for p, v in self.dcf.items()]
        return cols + [("EER(%)", self.eer_percent)]

    def to_csv(self):
        cols = self.columns() + [("targets", self.n_target), ("nontargets", self.n_nontarget)]
        names = ",".join(name for name, _ in cols)
        values = ",".join(f"{v:.6f}" if isinstance(v, float) else str(v) for _, v in cols)
        return f"{names}\n{values}\n"

    def to_text(self, name="system"):
        cols = self.columns()
        width = max(12, len(name))
        head = f"{'Embedding':<{width}} | " + " | ".join(f"{c:>11}" for c, _ in cols)
        row = f"{name:<{width}} | " + " | ".join(f"{v:>11.4f}" if c != "EER(%)" else f"{v:>11.3f}"
                                                 for c, v in cols)
        return "\n".join([head, "-" * len(head), row]) + "\n"


def evaluate(scores, labels=None, p_targets=DEFAULT_P_TARGETS):
    """EER and minDCF at each target prior (default 0.01 and 0.001, unit costs)."""
    curve = det_curve(scores, labels)
    return Report({p: min_dcf(curve, DcfParams(p)) for p in p_targets},
                  eer(curve), curve.n_target, curve.n_nontarget)


def write_report(path, report, name="system"):
    """Writes ``path`` (CSV) and ``path + '.txt'`` (aligned table)."""
    with atomic_write(path, "w") as fh:
        fh.write(report.to_csv())
    with atomic_write(f"{path}.txt", "w") as fh:
        fh.write(report.to_text(name))
