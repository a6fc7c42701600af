"""Recognition rates, confusion matrices, the paired t-test, and
aggregation of cross-validation trials.

Rates are percentages in [0, 100]; internal values keep full precision
and are rounded (2 d.p., half-up) only when formatted for reports.
"""

import csv
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .model import ensemble_vote_batch


class MetricsError(ValueError):
    """Empty datasets, mismatched rate lists, or degenerate statistics."""


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K, K); rows true class, columns predicted

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def rate(self):
        """Recognition rate: 100 * trace / total."""
        return 100.0 * float(np.trace(self.counts)) / self.total

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            k = self.counts.shape[0]
            writer.writerow(["true\\pred"] + [f"c{j}" for j in range(k)])
            for i in range(k):
                writer.writerow([f"c{i}"] + [int(v) for v in self.counts[i]])


def evaluate(net, dataset, mode="ensemble", batch_size=32):
    """Confusion matrix and recognition rate on a labelled dataset.

    *mode* is "ensemble" (argmax of the vote counts) or a 0-based branch
    index (argmax of that branch's probabilities). Inference mode only.
    """
    if len(dataset) == 0:
        raise MetricsError("cannot evaluate an empty dataset")
    k = net.config.num_classes
    counts = np.zeros((k, k), dtype=np.int64)
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.samples[start:start + batch_size]
        x = np.stack([s.image for s in chunk])
        if mode == "ensemble":
            probs = net.forward_all(x, train=False)
            preds = ensemble_vote_batch(probs).argmax(axis=1)
        else:
            probs = net.forward_branch(int(mode), x, train=False)
            preds = probs.argmax(axis=1)
        for s, p in zip(chunk, preds):
            if s.label is None:
                raise MetricsError(f"unlabelled sample {s.source_id} in evaluation set")
            counts[s.label, p] += 1
    cm = ConfusionMatrix(counts)
    return cm, cm.rate


# -- paired t-test --------------------------------------------------------------


@dataclass
class TTestResult:
    t: float
    df: int
    p: float  # two-tailed


def _betacf(a, b, x, max_iter=300, eps=1e-14):
    """Continued fraction for the regularized incomplete beta (Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise MetricsError("incomplete beta did not converge")


def reg_inc_beta(a, b, x):
    """Regularized incomplete beta I_x(a, b), accurate to ~1e-14."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_tailed_p(t, df):
    """P(|T_df| >= |t|) via the incomplete beta."""
    return reg_inc_beta(df / 2.0, 0.5, df / (df + t * t))


def paired_t_test(before, after):
    """Paired t-test of after - before; two-tailed p-value.

    Raises MetricsError when the differences have zero variance (the
    statistic is undefined there).
    """
    before = np.asarray(before, dtype=np.float64)
    after = np.asarray(after, dtype=np.float64)
    if before.shape != after.shape or before.ndim != 1:
        raise MetricsError("before/after must be equal-length 1-D sequences")
    n = before.size
    if n < 2:
        raise MetricsError("paired t-test needs at least two pairs")
    d = after - before
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise MetricsError("zero-variance differences: t statistic undefined")
    t = float(d.mean() / (sd / math.sqrt(n)))
    return TTestResult(t=t, df=n - 1, p=student_t_two_tailed_p(t, n - 1))


# -- trial aggregation -----------------------------------------------------------


@dataclass
class TrialSummary:
    columns: list
    mean: dict
    std: dict          # sample std (ddof=1); 0 by convention for one trial
    per_trial: list    # the input rows
    single_trial: bool

    def difference_row(self, after_col, before_col):
        return [row[after_col] - row[before_col] for row in self.per_trial]


def aggregate_trials(rows):
    """Mean and sample standard deviation per column over trials.

    *rows* is a sequence of mappings with identical numeric columns. A
    single trial is flagged and gets std 0 by convention.
    """
    rows = list(rows)
    if not rows:
        raise MetricsError("no trials to aggregate")
    columns = list(rows[0])
    single = len(rows) == 1
    mean, std = {}, {}
    for col in columns:
        vals = np.array([row[col] for row in rows], dtype=np.float64)
        mean[col] = float(vals.mean())
        std[col] = 0.0 if single else float(vals.std(ddof=1))
    return TrialSummary(columns, mean, std, rows, single)


def round2(x):
    """Half-up rounding to 2 decimal places, for presentation only."""
    return float(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def fmt2(x):
    return f"{round2(x):.2f}"
