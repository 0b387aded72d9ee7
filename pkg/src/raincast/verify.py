"""Forecast verification: categorical, neighborhood, error, and probabilistic
scores, plus their micro-aggregation into skill reports.

Scores whose denominator is 0 are *undefined* and reported as NaN; undefined
cells are excluded from macro averages rather than counted as 0.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .intensity import BinSet
from .probcast import crps
from .raster import SENTINEL


@dataclass
class ConfusionCounts:
    """Event counts at one (threshold, lead time) cell."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def accumulate_confusion(pred, obs, threshold: float, valid=None) -> ConfusionCounts:
    """Count hits/false alarms/misses/correct negatives over valid pixels.

    An event is rate >= threshold, on both the prediction and observation side.
    """
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape:
        raise ValueError("pred/obs shape mismatch")
    if valid is None:
        valid = obs != SENTINEL
    pe = pred >= threshold
    oe = obs >= threshold
    return ConfusionCounts(
        tp=int(np.sum(pe & oe & valid)),
        fp=int(np.sum(pe & ~oe & valid)),
        fn=int(np.sum(~pe & oe & valid)),
        tn=int(np.sum(~pe & ~oe & valid)),
    )


def categorical_scores(c: ConfusionCounts) -> dict:
    """CSI, FBI and HSS from confusion counts; 0/0 cells come back as NaN."""
    tp, fp, fn, tn = c.tp, c.fp, c.fn, c.tn
    csi = tp / (tp + fp + fn) if (tp + fp + fn) > 0 else math.nan
    fbi = (tp + fp) / (tp + fn) if (tp + fn) > 0 else math.nan
    hss_den = (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn)
    hss = 2.0 * (tp * tn - fn * fp) / hss_den if hss_den > 0 else math.nan
    return {"csi": csi, "fbi": fbi, "hss": hss}


# ---------------------------------------------------------------------------
# neighborhood scores


def _box_fractions(binary: np.ndarray, window: int) -> np.ndarray:
    """Event fraction in each window; windows are truncated at the edges and
    normalized by the number of cells actually inside the domain."""
    h, w = binary.shape
    half = window // 2
    padded = np.pad(binary.astype(np.float64), half)
    sums = sliding_window_view(padded, (window, window)).sum(axis=(2, 3))
    ones = np.pad(np.ones((h, w)), half)
    counts = sliding_window_view(ones, (window, window)).sum(axis=(2, 3))
    return sums / counts


def fss_components(pred_bin, obs_bin, window: int) -> tuple[float, float]:
    """Numerator and denominator sums of the fractions skill score, for
    accumulation across samples."""
    pred_bin = np.asarray(pred_bin)
    obs_bin = np.asarray(obs_bin)
    if pred_bin.shape != obs_bin.shape:
        raise ValueError("pred/obs shape mismatch")
    window = int(window)
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    f = _box_fractions(pred_bin, window)
    o = _box_fractions(obs_bin, window)
    num = float(np.sum((f - o) ** 2))
    den = float(np.sum(f**2) + np.sum(o**2))
    return num, den


def fss(pred_bin, obs_bin, window: int) -> float:
    """Fractions skill score: 1 - sum((F-O)^2) / (sum(F^2) + sum(O^2)).

    F and O are event fractions in a window x window box around each pixel.
    Two empty fields agree vacuously and score 1.
    """
    num, den = fss_components(pred_bin, obs_bin, window)
    if den == 0.0:
        return 1.0
    return 1.0 - num / den


def fss_window_px(neigh_km: float, res_km: float) -> int:
    """Symmetric odd window covering a neighborhood distance in km."""
    return 2 * round(neigh_km / (2.0 * res_km)) + 1


def _max_pool(binary: np.ndarray, pool: int) -> np.ndarray:
    h, w = binary.shape
    if h % pool or w % pool:
        raise ValueError(f"pool {pool} does not divide {h}x{w}")
    return binary.reshape(h // pool, pool, w // pool, pool).max(axis=(1, 3))


def pooled_confusion(pred, obs, pool: int, threshold: float, valid=None) -> ConfusionCounts:
    """Confusion counts after max-pooling the binarized fields.

    Invalid observation pixels count as non-events before pooling.
    """
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if valid is None:
        valid = obs != SENTINEL
    pe = _max_pool((pred >= threshold) & valid, int(pool))
    oe = _max_pool((obs >= threshold) & valid, int(pool))
    return ConfusionCounts(
        tp=int(np.sum(pe & oe)),
        fp=int(np.sum(pe & ~oe)),
        fn=int(np.sum(~pe & oe)),
        tn=int(np.sum(~pe & ~oe)),
    )


def pooled_csi(pred, obs, pool: int, threshold: float, valid=None) -> float:
    """CSI tolerant to small displacements: max-pool both fields, then score."""
    return categorical_scores(pooled_confusion(pred, obs, pool, threshold, valid))["csi"]


def error_scores(pred, obs, valid=None) -> dict:
    """Mean absolute and mean squared error over valid pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if valid is None:
        valid = obs != SENTINEL
    n = int(valid.sum())
    if n == 0:
        return {"mae": math.nan, "mse": math.nan}
    diff = np.where(valid, pred - obs, 0.0)
    return {"mae": float(np.abs(diff).sum() / n), "mse": float((diff**2).sum() / n)}


# ---------------------------------------------------------------------------
# structural similarity


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    r = np.arange(window) - (window - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(pred, obs, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over all fully interior Gaussian windows.

    The dynamic range is taken from the observation field.  Inputs must be
    sentinel-free and at least window x window.
    """
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape:
        raise ValueError("pred/obs shape mismatch")
    if np.any(pred == SENTINEL) or np.any(obs == SENTINEL):
        raise ValueError("ssim inputs must be sentinel-free")
    if min(pred.shape) < window:
        raise ValueError(f"fields must be at least {window}x{window}")
    dyn = float(obs.max() - obs.min())
    if dyn == 0.0:
        dyn = 1.0
    c1 = (k1 * dyn) ** 2
    c2 = (k2 * dyn) ** 2
    kern = _gaussian_kernel(window, sigma)

    def local(img):
        return np.einsum("ijkl,kl->ij", sliding_window_view(img, (window, window)), kern)

    mu_p = local(pred)
    mu_o = local(obs)
    var_p = local(pred * pred) - mu_p**2
    var_o = local(obs * obs) - mu_o**2
    cov = local(pred * obs) - mu_p * mu_o
    num = (2 * mu_p * mu_o + c1) * (2 * cov + c2)
    den = (mu_p**2 + mu_o**2 + c1) * (var_p + var_o + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# report aggregation


@dataclass(frozen=True)
class EvalSample:
    """One forecast/observation pair entering a report.

    pred, obs: (T, H, W) rate fields (obs may contain sentinels).
    prob: optional (T, K, H, W) exceedance cube for CRPS.
    """

    pred: np.ndarray
    obs: np.ndarray
    prob: np.ndarray | None = None


@dataclass(frozen=True)
class ReportConfig:
    thresholds: tuple[float, ...] = (0.5, 1.0, 2.0, 5.0, 10.0)
    windows_km: tuple[float, ...] = (2.0, 10.0, 20.0)
    pools: tuple[int, ...] = (4,)
    res_km: float = 2.0
    bins: BinSet | None = None
    lead_min: tuple[float, ...] = ()


@dataclass
class SkillReport:
    """Scalar scores keyed by (metric, threshold, lead time), derived from
    micro-aggregated counts and sums."""

    config: ReportConfig
    rows: list = field(default_factory=list)  # (metric, threshold, lead_min, value)
    n_samples: int = 0

    def value(self, metric: str, threshold, lead) -> float:
        for m, th, ld, v in self.rows:
            if m == metric and th == threshold and ld == lead:
                return v
        raise KeyError((metric, threshold, lead))

    def macro(self) -> dict:
        """Unweighted mean over thresholds, then over lead times, skipping
        undefined cells."""
        per_metric: dict[str, dict] = {}
        for m, th, ld, v in self.rows:
            if ld == "all":
                continue
            per_metric.setdefault(m, {}).setdefault(ld, []).append(v)
        out = {}
        for m, by_lead in per_metric.items():
            lead_means = []
            for vals in by_lead.values():
                vals = [v for v in vals if not math.isnan(v)]
                if vals:
                    lead_means.append(sum(vals) / len(vals))
            out[m] = sum(lead_means) / len(lead_means) if lead_means else math.nan
        return out

    def to_csv(self) -> str:
        lines = ["metric,threshold,lead_min,value"]
        for m, th, ld, v in self.rows:
            lines.append(f"{m},{th},{ld},{v!r}")
        for m, v in sorted(self.macro().items()):
            lines.append(f"{m},all,all,{v!r}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {
            "config": {
                "thresholds": list(self.config.thresholds),
                "windows_km": list(self.config.windows_km),
                "pools": list(self.config.pools),
                "res_km": self.config.res_km,
                "lead_min": list(self.config.lead_min),
                "bins": None if self.config.bins is None else json.loads(self.config.bins.to_json()),
            },
            "n_samples": self.n_samples,
            "rows": [
                {"metric": m, "threshold": th, "lead_min": ld, "value": None if isinstance(v, float) and math.isnan(v) else v}
                for m, th, ld, v in self.rows
            ],
            "macro": {k: (None if math.isnan(v) else v) for k, v in self.macro().items()},
        }
        return json.dumps(doc, sort_keys=True)


def build_report(samples, config: ReportConfig) -> SkillReport:
    """Micro-aggregate a stream of :class:`EvalSample` into a skill report.

    Confusion counts, FSS numerators/denominators, error sums and CRPS sums
    are accumulated over all samples and pixels per (threshold, lead time);
    scores are computed once at the end.
    """
    windows = [fss_window_px(km, config.res_km) for km in config.windows_km]
    conf: dict = {}
    pooled: dict = {}
    fss_acc: dict = {}
    err_acc: dict = {}
    crps_acc: dict = {}
    ssim_acc: dict = {}
    lead_min = list(config.lead_min)
    n_samples = 0

    for s in samples:
        n_samples += 1
        t_steps = s.pred.shape[0]
        if not lead_min:
            lead_min = list(range(t_steps))
        for t in range(t_steps):
            pred, obs = s.pred[t], s.obs[t]
            valid = obs != SENTINEL
            for th in config.thresholds:
                key = (th, t)
                conf[key] = conf.get(key, ConfusionCounts()) + accumulate_confusion(
                    pred, obs, th, valid
                )
                pe = (pred >= th) & valid
                oe = (obs >= th) & valid
                for w_px, w_km in zip(windows, config.windows_km):
                    num, den = fss_components(pe, oe, w_px)
                    a = fss_acc.setdefault((th, w_km, t), [0.0, 0.0])
                    a[0] += num
                    a[1] += den
                for pool in config.pools:
                    pooled[(th, pool, t)] = pooled.get(
                        (th, pool, t), ConfusionCounts()
                    ) + pooled_confusion(pred, obs, pool, th, valid)
            n = int(valid.sum())
            a = err_acc.setdefault(t, [0.0, 0.0, 0])
            if n:
                diff = np.where(valid, pred - obs, 0.0)
                a[0] += float(np.abs(diff).sum())
                a[1] += float((diff**2).sum())
                a[2] += n
            if valid.all() and min(pred.shape) >= 11:
                a = ssim_acc.setdefault(t, [0.0, 0])
                a[0] += ssim(pred, obs)
                a[1] += 1
        if s.prob is not None and config.bins is not None:
            for t in range(t_steps):
                r = crps(s.prob[t : t + 1], s.obs[t : t + 1], config.bins)
                if not r.empty:
                    a = crps_acc.setdefault(t, [0.0, 0])
                    a[0] += r.value * r.count
                    a[1] += r.count

    if n_samples == 0:
        raise ValueError("build_report needs at least one sample")

    report = SkillReport(config=config, n_samples=n_samples)

    def lead_label(t):
        return lead_min[t] if t < len(lead_min) else t

    for (th, t), c in sorted(conf.items()):
        scores = categorical_scores(c)
        for m in ("csi", "fbi", "hss"):
            report.rows.append((m, th, lead_label(t), scores[m]))
    for (th, w_km, t), (num, den) in sorted(fss_acc.items()):
        v = 1.0 if den == 0.0 else 1.0 - num / den
        report.rows.append((f"fss_{w_km:g}km", th, lead_label(t), v))
    for (th, pool, t), c in sorted(pooled.items()):
        report.rows.append((f"pooled_csi_p{pool}", th, lead_label(t), categorical_scores(c)["csi"]))
    for t, (abs_sum, sq_sum, n) in sorted(err_acc.items()):
        report.rows.append(("mae", "all", lead_label(t), abs_sum / n if n else math.nan))
        report.rows.append(("mse", "all", lead_label(t), sq_sum / n if n else math.nan))
    for t, (total, n) in sorted(crps_acc.items()):
        report.rows.append(("crps", "all", lead_label(t), total / n if n else math.nan))
    for t, (total, n) in sorted(ssim_acc.items()):
        report.rows.append(("ssim", "all", lead_label(t), total / n if n else math.nan))
    return report
