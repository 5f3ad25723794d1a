"""Segmentation metrics: smoke-class F1, two-class mIoU, scale-aware buckets.

Aggregate numbers pool the integer confusion counts over the dataset and
recompute the ratios once, so accumulation order cannot drift.
"""

import dataclasses

import numpy as np

BUCKETS = ("small", "medium", "large")


def confusion(pred, gt):
    """(tp, fp, fn, tn) of the smoke class."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"extent mismatch: pred {pred.shape} vs gt {gt.shape}")
    p = pred != 0
    g = gt != 0
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return tp, fp, fn, tn


def f1_from_counts(tp, fp, fn):
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0  # no smoke anywhere and none predicted
    return 2.0 * tp / denom


def miou_from_counts(tp, fp, fn, tn):
    smoke_denom = tp + fp + fn
    smoke = tp / smoke_denom if smoke_denom else 1.0
    bg_denom = tn + fp + fn
    bg = tn / bg_denom if bg_denom else 1.0
    return 0.5 * (smoke + bg)


def f1_miou(pred, gt):
    """Smoke-class F1 and mean IoU over {smoke, background} for one mask pair."""
    tp, fp, fn, tn = confusion(pred, gt)
    return f1_from_counts(tp, fp, fn), miou_from_counts(tp, fp, fn, tn)


def scale_partition(gt, t1=0.01, t2=0.10):
    """Bucket by smoke-area fraction: small below t1, large at or above t2."""
    if not 0.0 < t1 < t2 < 1.0:
        raise ValueError(f"thresholds must satisfy 0 < t1 < t2 < 1, got {t1}, {t2}")
    gt = np.asarray(gt)
    frac = np.count_nonzero(gt) / gt.size
    if frac < t1:
        return "small"
    if frac < t2:
        return "medium"
    return "large"


@dataclasses.dataclass
class BucketStats:
    n: int = 0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def add(self, counts):
        tp, fp, fn, tn = counts
        self.n += 1
        self.tp += tp
        self.fp += fp
        self.fn += fn
        self.tn += tn

    @property
    def f1(self):
        return f1_from_counts(self.tp, self.fp, self.fn)

    @property
    def miou(self):
        return miou_from_counts(self.tp, self.fp, self.fn, self.tn)


@dataclasses.dataclass
class MetricReport:
    buckets: dict          # name -> BucketStats, plus "total"
    per_image: list        # (name, bucket, f1, miou)


def evaluate_pairs(pairs, t1=0.01, t2=0.10):
    """pairs: iterable of (name, pred, gt) -> MetricReport with pooled buckets."""
    buckets = {name: BucketStats() for name in BUCKETS}
    total = BucketStats()
    per_image = []
    for name, pred, gt in pairs:
        counts = confusion(pred, gt)
        bucket = scale_partition(gt, t1, t2)
        buckets[bucket].add(counts)
        total.add(counts)
        per_image.append((name, bucket, f1_from_counts(*counts[:3]), miou_from_counts(*counts)))
    buckets["total"] = total
    return MetricReport(buckets=buckets, per_image=per_image)


def format_report(report, per_image=False):
    lines = ["bucket\timages\tF1\tmIoU"]
    for name in BUCKETS + ("total",):
        st = report.buckets[name]
        if st.n == 0:
            lines.append(f"{name}\t0\t-\t-")
        else:
            lines.append(f"{name}\t{st.n}\t{st.f1:.4f}\t{st.miou:.4f}")
    if per_image:
        lines.append("")
        lines.append("image\tbucket\tF1\tmIoU")
        for name, bucket, f1, miou in report.per_image:
            lines.append(f"{name}\t{bucket}\t{f1:.4f}\t{miou:.4f}")
    return "\n".join(lines)
