"""Evaluation metrics for flows and warped images.

Flow accuracy is measured directly against ground truth (endpoint error and
threshold accuracy).  Image similarity between a predicted warp and the
ground-truth warp uses classic intensity statistics: global and local
correlation, mutual information, peak signal-to-noise, structural
similarity, and a sum-of-correlations-of-differences score that also
consults the reference thermal image.  A paired t-test compares two result
sets.  Everything here is a pure function of numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])
DEFAULT_THRESHOLDS = (1.0, 3.0, 5.0)
PSNR_CAP = 99.0
_EPS = 1e-12


def _check_flow_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[0] != 2:
        raise ContractError(f"flow pair must share a (2, H, W) shape, got {pred.shape}, {gt.shape}")


def endpoint_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-pixel Euclidean distance between two flow fields."""
    _check_flow_pair(pred, gt)
    return np.sqrt(((pred - gt) ** 2).sum(axis=0))


def aepe(pred: np.ndarray, gt: np.ndarray) -> float:
    return float(endpoint_errors(pred, gt).mean())


def pck(pred: np.ndarray, gt: np.ndarray, thresholds=DEFAULT_THRESHOLDS) -> dict:
    """Percent of pixels whose endpoint error is within each threshold."""
    if not thresholds or any(t <= 0 for t in thresholds):
        raise ContractError(f"thresholds must be positive, got {thresholds}")
    err = endpoint_errors(pred, gt)
    return {float(t): float(100.0 * (err <= t).mean()) for t in thresholds}


def pearson(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    """Pearson correlation over all elements; (0, True) when undefined."""
    if a.shape != b.shape:
        raise ContractError(f"correlation needs equal shapes, got {a.shape}, {b.shape}")
    da = a.ravel() - a.mean()
    db = b.ravel() - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom < _EPS:
        return 0.0, True
    return float(np.clip((da * db).sum() / denom, -1.0, 1.0)), False


def cc(pred: np.ndarray, gt: np.ndarray) -> tuple[float, bool]:
    """Global Pearson correlation across all channels and pixels."""
    return pearson(pred, gt)


def ncc(pred: np.ndarray, gt: np.ndarray, window: int = 9) -> float:
    """Mean zero-normalized correlation over local windows.

    Windows are fully inside the image; a window that is flat in either
    input contributes zero.
    """
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ContractError(f"ncc needs equal (C, H, W) shapes, got {pred.shape}, {gt.shape}")
    if window % 2 == 0 or window > min(pred.shape[1:]):
        raise ContractError(f"window {window} must be odd and fit inside {pred.shape[1:]}")
    total, count = 0.0, 0
    for c in range(pred.shape[0]):
        wa = np.lib.stride_tricks.sliding_window_view(pred[c], (window, window))
        wb = np.lib.stride_tricks.sliding_window_view(gt[c], (window, window))
        da = wa - wa.mean(axis=(2, 3), keepdims=True)
        db = wb - wb.mean(axis=(2, 3), keepdims=True)
        num = np.einsum("ijkl,ijkl->ij", da, db)
        denom = np.sqrt(
            np.einsum("ijkl,ijkl->ij", da, da) * np.einsum("ijkl,ijkl->ij", db, db)
        )
        valid = denom > _EPS
        total += (num[valid] / denom[valid]).sum()
        count += num.size
    return float(total / count)


def to_gray(img: np.ndarray) -> np.ndarray:
    """Luma projection of a (3, H, W) image with the 601 weights."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"expected a (3, H, W) image, got {img.shape}")
    return np.tensordot(GRAY_WEIGHTS, img, axes=1)


def mutual_information(pred: np.ndarray, gt: np.ndarray, bins: int = 256) -> float:
    """Shannon mutual information in bits between the gray joint histogram."""
    ga, gb = to_gray(pred), to_gray(gt)
    if ga.shape != gb.shape:
        raise ContractError(f"mi needs equal shapes, got {pred.shape}, {gt.shape}")
    joint, _, _ = np.histogram2d(
        ga.ravel(), gb.ravel(), bins=bins, range=[[0.0, 1.0], [0.0, 1.0]]
    )
    p = joint / joint.sum()
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    mask = p > 0
    return float((p[mask] * np.log2(p[mask] / (px @ py)[mask])).sum())


def psnr(pred: np.ndarray, gt: np.ndarray, peak: float = 1.0, cap: float = PSNR_CAP) -> float:
    if pred.shape != gt.shape:
        raise ContractError(f"psnr needs equal shapes, got {pred.shape}, {gt.shape}")
    mse = float(((pred - gt) ** 2).mean())
    if mse <= 0.0:
        return cap
    return float(min(10.0 * math.log10(peak * peak / mse), cap))


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    half = (window - 1) // 2
    line = np.exp(-np.arange(-half, half + 1, dtype=np.float64) ** 2 / (2.0 * sigma * sigma))
    kernel = np.outer(line, line)
    return kernel / kernel.sum()


def ssim(
    pred: np.ndarray,
    gt: np.ndarray,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean structural similarity with a Gaussian window, per channel.

    Windowed moments are weighted means (not sample covariances) and only
    fully interior window positions enter the average.
    """
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ContractError(f"ssim needs equal (C, H, W) shapes, got {pred.shape}, {gt.shape}")
    if window > min(pred.shape[1:]):
        raise ContractError(f"window {window} does not fit inside {pred.shape[1:]}")
    kernel = _gaussian_kernel(window, sigma)
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    scores = []
    for c in range(pred.shape[0]):
        wa = np.lib.stride_tricks.sliding_window_view(pred[c], (window, window))
        wb = np.lib.stride_tricks.sliding_window_view(gt[c], (window, window))
        mu_a = np.einsum("ijkl,kl->ij", wa, kernel)
        mu_b = np.einsum("ijkl,kl->ij", wb, kernel)
        var_a = np.einsum("ijkl,kl->ij", wa * wa, kernel) - mu_a * mu_a
        var_b = np.einsum("ijkl,kl->ij", wb * wb, kernel) - mu_b * mu_b
        cov = np.einsum("ijkl,kl->ij", wa * wb, kernel) - mu_a * mu_b
        num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        scores.append((num / den).mean())
    return float(np.clip(np.mean(scores), -1.0, 1.0))


def scd(pred: np.ndarray, gt: np.ndarray, aux: np.ndarray) -> tuple[float, bool]:
    """Sum of correlations of differences.

    Treats ``pred`` as a fusion of the two sources: how much of ``gt`` shows
    up once ``aux`` is subtracted, plus how much of ``aux`` shows up once
    ``gt`` is subtracted.
    """
    r1, d1 = pearson(pred - aux, gt)
    r2, d2 = pearson(pred - gt, aux)
    return r1 + r2, d1 or d2


@dataclass
class ImageSimilarity:
    cc: float
    ncc: float
    mi: float
    psnr: float
    scd: float
    ssim: float
    flags: tuple = ()


def image_similarity(pred: np.ndarray, gt: np.ndarray, aux: np.ndarray) -> ImageSimilarity:
    """All image metrics between a predicted and a reference image.

    ``aux`` is the fixed thermal reference; only the difference-correlation
    score consults it.
    """
    for name, img in (("pred", pred), ("gt", gt), ("aux", aux)):
        if img.shape != pred.shape or img.ndim != 3 or img.shape[0] != 3:
            raise ContractError(f"{name} must match pred's (3, H, W) shape, got {img.shape}")
        if img.min() < -1e-9 or img.max() > 1.0 + 1e-9:
            raise ContractError(f"{name} values must lie in [0, 1]")
    flags = []
    cc_val, cc_flat = cc(pred, gt)
    if cc_flat:
        flags.append("cc-degenerate")
    scd_val, scd_flat = scd(pred, gt, aux)
    if scd_flat:
        flags.append("scd-degenerate")
    psnr_val = psnr(pred, gt)
    if psnr_val >= PSNR_CAP:
        flags.append("psnr-capped")
    return ImageSimilarity(
        cc=cc_val,
        ncc=ncc(pred, gt),
        mi=mutual_information(pred, gt),
        psnr=psnr_val,
        scd=scd_val,
        ssim=ssim(pred, gt),
        flags=tuple(flags),
    )


# ---------------------------------------------------------------------------
# paired t-test


def _beta_continued_fraction(a: float, b: float, x: float, max_iter: int = 300) -> float:
    # modified Lentz evaluation of the incomplete beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) >= tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) >= tiny else tiny)
        c = 1.0 + aa / (c if abs(c) >= tiny else tiny)
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) >= tiny else tiny)
        c = 1.0 + aa / (c if abs(c) >= tiny else tiny)
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 3e-14:
            return h
    raise NumericError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b), evaluated on whichever tail the continued fraction likes."""
    if a <= 0.0 or b <= 0.0:
        raise ContractError(f"beta parameters must be positive, got {a}, {b}")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    # the front factor is symmetric under (a, x) <-> (b, 1 - x)
    front = math.exp(
        a * math.log(x)
        + b * math.log1p(-x)
        - (math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b))
    )
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


@dataclass
class TTestResult:
    t: float
    p: float
    dof: int
    degenerate: bool = False


def paired_ttest(scores_a, scores_b) -> TTestResult:
    """Two-sided paired t-test on matched score lists.

    Zero-variance differences (including identical lists) are reported as
    t = 0, p = 1 with the degenerate flag instead of an infinite statistic.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ContractError(f"need two equal-length lists of at least 2, got {a.shape}, {b.shape}")
    d = a - b
    n = d.size
    sd = float(d.std(ddof=1))
    scale = max(1.0, float(np.abs(d).max()))
    if sd <= 1e-12 * scale:
        return TTestResult(t=0.0, p=1.0, dof=n - 1, degenerate=True)
    t = float(d.mean() / (sd / math.sqrt(n)))
    dof = n - 1
    p = regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t))
    return TTestResult(t=t, p=float(min(max(p, 0.0), 1.0)), dof=dof)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    """Aggregated metric values for one pair or a whole evaluation run."""

    aepe: float
    pck: dict
    cc: float
    ncc: float
    mi: float
    psnr: float
    scd: float
    ssim: float
    n_samples: int = 1
    fingerprint: str = ""
    flags: tuple = ()

    def validate(self) -> "MetricsReport":
        ordered = sorted(self.pck)
        values = [self.pck[t] for t in ordered]
        if any(not 0.0 <= v <= 100.0 for v in values) or values != sorted(values):
            raise ContractError(f"pck must be monotone percentages, got {self.pck}")
        if not -1.0 <= self.ssim <= 1.0 or self.psnr < 0.0:
            raise ContractError("ssim or psnr out of range")
        return self

    def to_json(self) -> dict:
        return {
            "aepe": self.aepe,
            "pck": [[t, self.pck[t]] for t in sorted(self.pck)],
            "cc": self.cc,
            "ncc": self.ncc,
            "mi": self.mi,
            "psnr": self.psnr,
            "scd": self.scd,
            "ssim": self.ssim,
            "n_samples": self.n_samples,
            "fingerprint": self.fingerprint,
            "flags": list(self.flags),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "MetricsReport":
        from .errors import SchemaError

        try:
            return cls(
                aepe=payload["aepe"],
                pck={float(t): v for t, v in payload["pck"]},
                cc=payload["cc"],
                ncc=payload["ncc"],
                mi=payload["mi"],
                psnr=payload["psnr"],
                scd=payload["scd"],
                ssim=payload["ssim"],
                n_samples=payload["n_samples"],
                fingerprint=payload.get("fingerprint", ""),
                flags=tuple(payload.get("flags", ())),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed metrics report: {exc}") from None


def aggregate_reports(reports: list, fingerprint: str = "") -> MetricsReport:
    """Mean over per-pair reports; sample counts add, flags union."""
    if not reports:
        raise ContractError("nothing to aggregate")
    thresholds = sorted(reports[0].pck)
    if any(sorted(r.pck) != thresholds for r in reports):
        raise ContractError("reports disagree on pck thresholds")
    mean = lambda attr: float(np.mean([getattr(r, attr) for r in reports]))
    flags = tuple(sorted({f for r in reports for f in r.flags}))
    return MetricsReport(
        aepe=mean("aepe"),
        pck={t: float(np.mean([r.pck[t] for r in reports])) for t in thresholds},
        cc=mean("cc"),
        ncc=mean("ncc"),
        mi=mean("mi"),
        psnr=mean("psnr"),
        scd=mean("scd"),
        ssim=mean("ssim"),
        n_samples=sum(r.n_samples for r in reports),
        fingerprint=fingerprint,
        flags=flags,
    )
