"""COD evaluation: MAE, S-measure, F-measure, weighted F-measure, E-measure.

Score maps are float arrays in [0, 1]; ground truth masks are {0, 1}.
Threshold sweeps use the 255 levels t = k/255, k = 0..254, with a pixel
counted as positive when its score is strictly above t.  The adaptive
variants binarize at min(2 * mean score, 1) with ``score >= t``.

Where the reference definitions add a machine-epsilon floor to a
denominator, this module instead guards the denominator explicitly, so a
perfect prediction scores exactly 1.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

BETA2 = 0.3
THRESHOLDS = np.arange(255) / 255.0

# weighted F-measure constants from the original definition (not tunable here):
# 7x7 Gaussian with sigma 5, background weight decay 2 - exp(ln(0.5)/5 * dist)
WFM_KERNEL_SIZE = 7
WFM_SIGMA = 5.0
WFM_DECAY = np.log(0.5) / 5.0


class MetricInputError(ValueError):
    pass


def _prepare(c, g) -> tuple[np.ndarray, np.ndarray]:
    c = np.asarray(c, dtype=np.float64)
    g = np.asarray(g)
    if c.shape != g.shape:
        raise MetricInputError(f"score map {c.shape} and mask {g.shape} differ in shape")
    if c.ndim != 2:
        raise MetricInputError(f"expected 2-d maps, got {c.shape}")
    if not np.all(np.isfinite(c)) or c.min() < 0.0 or c.max() > 1.0:
        raise MetricInputError("score map must be finite and inside [0, 1]")
    if not np.all((g == 0) | (g == 1)):
        raise MetricInputError("ground truth must be binary")
    return c, g.astype(bool)


def _require_foreground(g: np.ndarray, name: str) -> None:
    if not g.any():
        raise MetricInputError(f"{name}: ground truth has no foreground pixels")


def adaptive_threshold(c: np.ndarray) -> float:
    return min(2.0 * float(c.mean()), 1.0)


# -- MAE ----------------------------------------------------------------------------


def mae(c, g) -> float:
    c, g = _prepare(c, g)
    return float(np.mean(np.abs(c - g)))


# -- F-measure ----------------------------------------------------------------------


def _f_beta(p, r):
    p = np.asarray(p, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    num = (1.0 + BETA2) * p * r
    den = BETA2 * p + r
    out = np.zeros(np.broadcast(p, r).shape)
    np.divide(num, den, out=out, where=den > 0)
    return out


def _counts_curve(c: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(n_predicted, n_true_positive) per sweep threshold."""
    flat = c.reshape(-1)
    pos = flat[g.reshape(-1)]
    # number of values strictly above t = n - (values <= t)
    all_sorted = np.sort(flat)
    pos_sorted = np.sort(pos)
    n_pred = flat.size - np.searchsorted(all_sorted, THRESHOLDS, side="right")
    n_tp = pos.size - np.searchsorted(pos_sorted, THRESHOLDS, side="right")
    return n_pred, n_tp


def _pr(n_pred, n_tp, n_pos):
    n_pred = np.asarray(n_pred, dtype=np.float64)
    n_tp = np.asarray(n_tp, dtype=np.float64)
    precision = np.zeros(n_pred.shape)
    np.divide(n_tp, n_pred, out=precision, where=n_pred > 0)
    return precision, n_tp / n_pos


@dataclass
class _FStats:
    precision: np.ndarray
    recall: np.ndarray
    adaptive: float


def _f_stats(c: np.ndarray, g: np.ndarray) -> _FStats:
    _require_foreground(g, "f_measures")
    n_pos = int(g.sum())
    n_pred, n_tp = _counts_curve(c, g)
    precision, recall = _pr(n_pred, n_tp, n_pos)
    binary = c >= adaptive_threshold(c)
    ap, ar = _pr(binary.sum(), (binary & g).sum(), n_pos)
    return _FStats(precision, recall, float(_f_beta(ap, ar)))


def f_measures(c, g) -> tuple[float, float, float]:
    """(adaptive, mean, max) F-measure with beta^2 = 0.3."""
    c, g = _prepare(c, g)
    st = _f_stats(c, g)
    curve = _f_beta(st.precision, st.recall)
    return st.adaptive, float(curve.mean()), float(curve.max())


# -- E-measure ----------------------------------------------------------------------


def _enhanced_from_counts(tp, fp, fn, tn, n_pos: int, n: int) -> np.ndarray:
    """Mean enhanced alignment for binarized maps described by confusion counts."""
    tp, fp, fn, tn = (np.asarray(v, dtype=np.float64) for v in (tp, fp, fn, tn))
    if n_pos == 0:
        return (fn + tn) / n  # every predicted-negative pixel scores 1
    if n_pos == n:
        return (tp + fp) / n
    mean_fm = (tp + fp) / n
    mean_gt = n_pos / n
    total = np.zeros(tp.shape)
    for count, fm_val, gt_val in ((tp, 1.0, 1.0), (fp, 1.0, 0.0), (fn, 0.0, 1.0), (tn, 0.0, 0.0)):
        a = fm_val - mean_fm
        b = gt_val - mean_gt
        align = 2.0 * a * b / (a * a + b * b)
        total = total + count * (align + 1.0) ** 2 / 4.0
    return total / n


@dataclass
class _EStats:
    curve: np.ndarray
    adaptive: float


def _e_stats(c: np.ndarray, g: np.ndarray) -> _EStats:
    n = c.size
    n_pos = int(g.sum())
    n_pred, n_tp = _counts_curve(c, g)
    fp = n_pred - n_tp
    fn = n_pos - n_tp
    tn = n - n_pred - fn
    curve = _enhanced_from_counts(n_tp, fp, fn, tn, n_pos, n)
    binary = c >= adaptive_threshold(c)
    atp = int((binary & g).sum())
    apred = int(binary.sum())
    adaptive = _enhanced_from_counts(atp, apred - atp, n_pos - atp, n - apred - (n_pos - atp), n_pos, n)
    return _EStats(curve, float(adaptive))


def e_measures(c, g) -> tuple[float, float, float]:
    """(adaptive, mean, max) enhanced-alignment measure."""
    c, g = _prepare(c, g)
    st = _e_stats(c, g)
    return st.adaptive, float(st.curve.mean()), float(st.curve.max())


# -- S-measure ----------------------------------------------------------------------


def _object_score(values: np.ndarray) -> float:
    """2*mean / (mean^2 + 1 + std), std with n-1 normalization."""
    n = values.size
    if n == 0:
        return 0.0
    mu = float(values.mean())
    sigma = float(values.std(ddof=1)) if n > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sigma)


def _s_object(c: np.ndarray, g: np.ndarray) -> float:
    n_fg = int(g.sum())
    n_bg = g.size - n_fg
    o_fg = _object_score(c[g])
    o_bg = _object_score(1.0 - c[~g])
    return (n_fg * o_fg + n_bg * o_bg) / g.size


def _round_half_up_ratio(num: int, den: int) -> int:
    return (2 * num + den) // (2 * den)


def _centroid(g: np.ndarray) -> tuple[int, int]:
    """1-based (column, row) centroid of the foreground, rounded half up."""
    rows, cols = g.shape
    total = int(g.sum())
    if total == 0:
        return _round_half_up_ratio(cols, 2), _round_half_up_ratio(rows, 2)
    col_idx = np.arange(1, cols + 1)
    row_idx = np.arange(1, rows + 1)
    x = _round_half_up_ratio(int((g.sum(axis=0) * col_idx).sum()), total)
    y = _round_half_up_ratio(int((g.sum(axis=1) * row_idx).sum()), total)
    return x, y


def _ssim(x: np.ndarray, y: np.ndarray) -> float:
    n = x.size
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    if n > 1:
        sxx = (dx * dx).sum() / (n - 1)
        syy = (dy * dy).sum() / (n - 1)
        sxy = (dx * dy).sum() / (n - 1)
    else:
        sxx = syy = sxy = 0.0
    alpha = 4.0 * mx * my * sxy
    beta = (mx * mx + my * my) * (sxx + syy)
    if alpha != 0:
        return float(alpha / beta)
    return 1.0 if beta == 0 else 0.0


def _s_region(c: np.ndarray, g: np.ndarray) -> float:
    x, y = _centroid(g)
    gf = g.astype(np.float64)
    total = 0.0
    for rs, cs in (
        (slice(0, y), slice(0, x)),
        (slice(0, y), slice(x, None)),
        (slice(y, None), slice(0, x)),
        (slice(y, None), slice(x, None)),
    ):
        block = c[rs, cs]
        if block.size:
            total += block.size * _ssim(block, gf[rs, cs])
    return total / g.size


def s_measure(c, g, alpha: float = 0.5) -> float:
    """Structure measure: alpha * object term + (1 - alpha) * region term."""
    c, g = _prepare(c, g)
    ratio = g.mean()
    if ratio == 0:
        return float(1.0 - c.mean())
    if ratio == 1:
        return float(c.mean())
    score = alpha * _s_object(c, g) + (1.0 - alpha) * _s_region(c, g)
    return float(min(max(score, 0.0), 1.0))


# -- weighted F-measure -------------------------------------------------------------


def gaussian_kernel(size: int = WFM_KERNEL_SIZE, sigma: float = WFM_SIGMA) -> np.ndarray:
    r = (size - 1) / 2.0
    ax = np.arange(size) - r
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def nearest_foreground(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean distance to, and flat index of, the nearest foreground pixel.

    Ties go to the smallest row-major index.  Foreground pixels map to
    themselves at distance 0.
    """
    h, w = g.shape
    dist = ndimage.distance_transform_edt(~g)
    sq = np.rint(dist * dist).astype(np.int64)
    nearest = np.arange(g.size).reshape(h, w)
    rows, cols = np.nonzero(~g)
    sq_bg = sq[rows, cols]
    idx = np.full(rows.size, -1, dtype=np.int64)
    for d2 in np.unique(sq_bg):
        sel = np.nonzero(sq_bg == d2)[0]
        r = int(np.floor(np.sqrt(d2)))
        # lexicographic (dy, dx) order == row-major order of the target pixel
        offsets = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx == d2]
        for dy, dx in offsets:
            if sel.size == 0:
                break
            ty = rows[sel] + dy
            tx = cols[sel] + dx
            ok = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
            hit = np.zeros(sel.size, dtype=bool)
            hit[ok] = g[ty[ok], tx[ok]]
            idx[sel[hit]] = ty[hit] * w + tx[hit]
            sel = sel[~hit]
    nearest[rows, cols] = idx
    return np.sqrt(sq.astype(np.float64)), nearest


def weighted_f(c, g) -> float:
    c, g = _prepare(c, g)
    _require_foreground(g, "weighted_f")
    gf = g.astype(np.float64)
    err = np.abs(c - gf)
    dist, nearest = nearest_foreground(g)
    # background errors take the error of their nearest foreground pixel
    err_t = err.reshape(-1)[nearest.reshape(-1)].reshape(err.shape)
    err_a = ndimage.correlate(err_t, gaussian_kernel(), mode="constant", cval=0.0)
    min_e = np.where(g & (err_a < err), err_a, err)
    weight = np.where(g, 1.0, 2.0 - np.exp(WFM_DECAY * dist))
    ew = min_e * weight
    tp_w = gf.sum() - ew[g].sum()
    fp_w = ew[~g].sum()
    recall = 1.0 - ew[g].mean()
    precision = tp_w / (tp_w + fp_w) if tp_w + fp_w > 0 else 0.0
    return float(_f_beta(precision, recall))


# -- dataset aggregation ------------------------------------------------------------

METRIC_FIELDS = (
    "s_measure",
    "weighted_f",
    "f_adaptive",
    "f_mean",
    "f_max",
    "e_adaptive",
    "e_mean",
    "e_max",
    "mae",
)


@dataclass
class ImageMetrics:
    name: str
    s_measure: float
    weighted_f: float
    f_adaptive: float
    f_mean: float
    f_max: float
    e_adaptive: float
    e_mean: float
    e_max: float
    mae: float


@dataclass
class MetricReport:
    s_measure: float
    weighted_f: float
    f_adaptive: float
    f_mean: float
    f_max: float
    e_adaptive: float
    e_mean: float
    e_max: float
    mae: float
    per_image: list[ImageMetrics] = field(default_factory=list)

    def aggregate(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_FIELDS}

    def to_json(self) -> str:
        return json.dumps(
            {"aggregate": self.aggregate(), "per_image": [asdict(m) for m in self.per_image]},
            indent=2,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("name",) + METRIC_FIELDS)
        for m in self.per_image:
            writer.writerow([m.name] + [repr(getattr(m, k)) for k in METRIC_FIELDS])
        writer.writerow(["AGGREGATE"] + [repr(getattr(self, k)) for k in METRIC_FIELDS])
        return buf.getvalue()

    def write(self, path: str) -> None:
        """Write CSV or JSON depending on the extension (.csv / .json); other extensions write both."""
        root, ext = os.path.splitext(path)
        if ext.lower() == ".csv":
            targets = {path: self.to_csv()}
        elif ext.lower() == ".json":
            targets = {path: self.to_json()}
        else:
            targets = {root + ".csv": self.to_csv(), root + ".json": self.to_json()}
        for target, text in targets.items():
            with open(target, "w") as fh:
                fh.write(text)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        obj = json.loads(text)
        return cls(**obj["aggregate"], per_image=[ImageMetrics(**m) for m in obj["per_image"]])


@dataclass
class _ImageResult:
    metrics: ImageMetrics
    f_stats: _FStats
    e_stats: _EStats


def _evaluate_one(args) -> _ImageResult:
    name, c, g = args
    c, g = _prepare(c, g)
    fs = _f_stats(c, g)
    es = _e_stats(c, g)
    f_curve = _f_beta(fs.precision, fs.recall)
    m = ImageMetrics(
        name=name,
        s_measure=s_measure(c, g),
        weighted_f=weighted_f(c, g),
        f_adaptive=fs.adaptive,
        f_mean=float(f_curve.mean()),
        f_max=float(f_curve.max()),
        e_adaptive=es.adaptive,
        e_mean=float(es.curve.mean()),
        e_max=float(es.curve.max()),
        mae=float(np.mean(np.abs(c - g))),
    )
    return _ImageResult(m, fs, es)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("FSPNET_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_dataset(
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    names: Optional[Sequence[str]] = None,
    threads: Optional[int] = None,
) -> MetricReport:
    """Per-image metrics plus dataset aggregates.

    Scalar metrics are averaged over images.  For the swept metrics the
    precision/recall curves (F) and the alignment curves (E) are averaged
    over images per threshold before the mean/max reduction.
    """
    if len(pairs) == 0:
        raise MetricInputError("evaluate_dataset: no (score, mask) pairs")
    if names is None:
        names = [f"{i:04d}" for i in range(len(pairs))]
    if len(names) != len(pairs):
        raise MetricInputError(f"evaluate_dataset: {len(names)} names for {len(pairs)} pairs")
    jobs = [(n, c, g) for n, (c, g) in zip(names, pairs)]
    threads = threads or worker_count()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_evaluate_one, jobs))
    else:
        results = [_evaluate_one(j) for j in jobs]

    k = len(results)
    mean_p = sum(r.f_stats.precision for r in results) / k
    mean_r = sum(r.f_stats.recall for r in results) / k
    f_curve = _f_beta(mean_p, mean_r)
    e_curve = sum(r.e_stats.curve for r in results) / k
    per = [r.metrics for r in results]

    def avg(key):
        return float(sum(getattr(m, key) for m in per) / k)

    return MetricReport(
        s_measure=avg("s_measure"),
        weighted_f=avg("weighted_f"),
        f_adaptive=avg("f_adaptive"),
        f_mean=float(f_curve.mean()),
        f_max=float(f_curve.max()),
        e_adaptive=avg("e_adaptive"),
        e_mean=float(e_curve.mean()),
        e_max=float(e_curve.max()),
        mae=avg("mae"),
        per_image=per,
    )


__all__ = [
    "mae",
    "f_measures",
    "e_measures",
    "s_measure",
    "weighted_f",
    "evaluate_dataset",
    "MetricReport",
    "ImageMetrics",
    "MetricInputError",
    "THRESHOLDS",
    "BETA2",
]
