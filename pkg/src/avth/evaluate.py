"""Rate-distortion evaluation: PSNR/SSIM, BD-rate, lip-sync confidence and GOP/QP sweeps."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.interpolate import PchipInterpolator

from .config import Config
from .container import bitrate_report, demux
from .media import AudioClip, ColorTag, Frame, FrameSequence, rgb_to_yuv
from .nets import frames_to_batch
from .training import SyncScorer, fit_scorer

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2


class EvalError(ValueError):
    pass


# --- pixel metrics ----------------------------------------------------------------------------


def _check_pair(a: Frame, b: Frame):
    if a.dims != b.dims:
        raise EvalError(f"dimension mismatch: {a.dims} vs {b.dims}")


def mse(a: Frame, b: Frame) -> float:
    _check_pair(a, b)
    if a.color is not b.color:
        raise EvalError(f"color mismatch: {a.color.value} vs {b.color.value}")
    total = sum(float(((p.astype(np.float64) - q) ** 2).sum()) for p, q in zip(a.planes, b.planes))
    return total / sum(p.size for p in a.planes)


def psnr(a: Frame, b: Frame) -> float:
    """PSNR in dB over all samples; identical frames give +inf (see :func:`capped`)."""
    err = mse(a, b)
    return math.inf if err == 0 else 10.0 * math.log10(255.0**2 / err)


def capped(db: float) -> float:
    return min(db, PSNR_CAP)


def _luma(frame: Frame) -> np.ndarray:
    if frame.color is ColorTag.RGB:
        frame = rgb_to_yuv(frame, ColorTag.YUV444)
    return frame.planes[0].astype(np.float64)


def _box_means(x: np.ndarray, n: int) -> np.ndarray:
    """Mean over every n x n window (valid positions, stride 1)."""
    c = np.pad(x.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    s = c[n:, n:] - c[:-n, n:] - c[n:, :-n] + c[:-n, :-n]
    return s / (n * n)


def ssim(a: Frame, b: Frame) -> float:
    """Mean SSIM over all 8x8 luma windows (uniform weighting)."""
    _check_pair(a, b)
    x, y = _luma(a), _luma(b)
    n = min(SSIM_WINDOW, *x.shape)
    mx, my = _box_means(x, n), _box_means(y, n)
    # population variances within each window
    vx = _box_means(x * x, n) - mx * mx
    vy = _box_means(y * y, n) - my * my
    cxy = _box_means(x * y, n) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return float(np.mean(num / den))


def sequence_metrics(ref: FrameSequence, test: FrameSequence) -> tuple[float, float]:
    """Mean capped PSNR and mean SSIM over frames."""
    if len(ref) != len(test):
        raise EvalError(f"sequence lengths differ: {len(ref)} vs {len(test)}")
    if not len(ref):
        raise EvalError("empty sequences")
    p = [capped(psnr(a, b)) for a, b in zip(ref, test)]
    s = [ssim(a, b) for a, b in zip(ref, test)]
    return float(np.mean(p)), float(np.mean(s))


# --- BD-rate ------------------------------------------------------------------------------------


@dataclass(frozen=True)
class RDPoint:
    bitrate: float  # kbps
    value: float


def rd_curve(points) -> list[RDPoint]:
    pts = sorted((p if isinstance(p, RDPoint) else RDPoint(float(p[0]), float(p[1])) for p in points),
                 key=lambda p: p.bitrate)
    if len(pts) < 3:
        raise EvalError(f"an RD curve needs at least 3 points, got {len(pts)}")
    rates = [p.bitrate for p in pts]
    if any(not (r > 0 and math.isfinite(r)) for r in rates):
        raise EvalError("bitrates must be positive and finite")
    if any(b <= a for a, b in zip(rates, rates[1:])):
        raise EvalError("duplicate bitrates in RD curve")
    if any(not math.isfinite(p.value) for p in pts):
        raise EvalError("metric values must be finite")
    return pts


def _fit(q: np.ndarray, lr: np.ndarray, lo: float, hi: float) -> float:
    """Integral over [lo, hi] of log-rate as a function of (oriented) quality."""
    if len(q) >= 5:
        return float(PchipInterpolator(q, lr).integrate(lo, hi))
    poly = np.polyint(np.polyfit(q, lr, min(3, len(q) - 1)))
    return float(np.polyval(poly, hi) - np.polyval(poly, lo))


def bd_rate(anchor, test, lower_is_better: bool = False, tol: float = 1e-9) -> float:
    """Average bitrate difference (percent) of ``test`` against ``anchor`` at equal quality.

    log10(rate) is fitted as a function of the metric (≥5 points: monotone piecewise
    cubic; otherwise a cubic, or lower order for fewer points) and integrated over the
    shared metric range. Negative means the test curve needs less bitrate.
    """
    fits = []
    for name, pts in (("anchor", rd_curve(anchor)), ("test", rd_curve(test))):
        q = np.array([-p.value if lower_is_better else p.value for p in pts])
        if np.any(np.diff(q) < -tol):
            raise EvalError(f"degenerate {name} curve: quality is not monotonic in bitrate")
        if np.any(np.diff(q) <= 0):
            raise EvalError(f"degenerate {name} curve: repeated quality values")
        fits.append((q, np.log10([p.bitrate for p in pts])))
    (qa, la), (qt, lt) = fits
    lo, hi = max(qa[0], qt[0]), min(qa[-1], qt[-1])
    if not hi > lo:
        raise EvalError("curves have no overlapping metric range")
    delta = (_fit(qt, lt, lo, hi) - _fit(qa, la, lo, hi)) / (hi - lo)
    return (10.0**delta - 1.0) * 100.0


def read_curve_csv(path_or_text, *, text: bool = False) -> dict[str, list[RDPoint]]:
    """Parse ``setting,bitrate_kbps,metric`` rows (header required, '#' comments skipped).

    Returns points grouped by the optional ``curve`` column, or under '' when absent.
    """
    src = io.StringIO(path_or_text) if text else open(path_or_text, newline="", encoding="utf-8")
    with src:
        rows = [(n, line) for n, line in enumerate(src.read().splitlines(), 1)
                if line.strip() and not line.lstrip().startswith("#")]
    if not rows:
        raise EvalError("curve CSV is empty")
    header_line, header_row = rows[0]
    header = [h.strip() for h in next(csv.reader([header_row]))]
    for col in ("setting", "bitrate_kbps", "metric"):
        if col not in header:
            raise EvalError(f"line {header_line}: missing column '{col}'")
    ib, im = header.index("bitrate_kbps"), header.index("metric")
    ic = header.index("curve") if "curve" in header else None
    curves: dict[str, list[RDPoint]] = {}
    for n, line in rows[1:]:
        cells = next(csv.reader([line]))
        if len(cells) != len(header):
            raise EvalError(f"line {n}: expected {len(header)} fields, got {len(cells)}")
        try:
            pt = RDPoint(float(cells[ib]), float(cells[im]))
        except ValueError:
            raise EvalError(f"line {n}: bitrate and metric must be numbers") from None
        curves.setdefault(cells[ic].strip() if ic is not None else "", []).append(pt)
    return curves


# --- lip-sync confidence ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyncResult:
    confidence: float
    best_shift: int
    shifts: tuple[int, ...]
    curve: tuple[float, ...]


def sync_from_embeddings(audio: np.ndarray, video: np.ndarray, max_shift: int = 15) -> SyncResult:
    """Peak-minus-mean of shifted mean cosine similarity.

    Shift s pairs audio embedding t+s with video embedding t. A video delayed by k
    frames relative to its audio (video[t] shows audio[t-k]) peaks at s = -k.
    """
    a = np.asarray(audio, dtype=np.float64)
    v = np.asarray(video, dtype=np.float64)
    if a.shape != v.shape or a.ndim != 2:
        raise EvalError(f"embedding arrays must share shape (T, d), got {a.shape} and {v.shape}")
    if max_shift < 1:
        raise EvalError("max_shift must be >= 1")
    n = a.shape[0]
    if n < 2 * max_shift + 1:
        raise EvalError(f"sequence of {n} frames is shorter than 2*max_shift+1 = {2 * max_shift + 1}")
    a = a / np.linalg.norm(a, axis=1, keepdims=True).clip(1e-12)
    v = v / np.linalg.norm(v, axis=1, keepdims=True).clip(1e-12)
    shifts = tuple(range(-max_shift, max_shift + 1))
    curve = []
    for s in shifts:
        t0, t1 = max(0, -s), min(n, n - s)
        curve.append(float(np.mean(np.sum(a[t0 + s : t1 + s] * v[t0:t1], axis=1))))
    best = int(np.argmax(curve))
    return SyncResult(max(curve) - float(np.mean(curve)), shifts[best], shifts, tuple(curve))


def sync_confidence(frames, clip: AudioClip, scorer: SyncScorer, max_shift: int = 15, fps: float | None = None) -> SyncResult:
    frames = list(frames) if not isinstance(frames, FrameSequence) else frames
    fps = float(frames.fps) if fps is None and isinstance(frames, FrameSequence) else (fps or 25.0)
    n = len(frames)
    if n < 2 * max_shift + 1:
        raise EvalError(f"sequence of {n} frames is shorter than 2*max_shift+1 = {2 * max_shift + 1}")
    with torch.no_grad():
        a = scorer.embed_audio(scorer.audio_windows(clip, range(n), fps)).numpy()
        v = scorer.embed_mouth(frames_to_batch(list(frames))).numpy()
    return sync_from_embeddings(a, v, max_shift)


def calibrated_scorer(cfg: Config = Config(), n_clips: int = 3, n_frames: int = 100, size: int = 64,
                      steps: int = 200) -> SyncScorer:
    """Scorer fitted contrastively on synthetic clips whose seeds derive from ``cfg.seed``.

    The mouth crop is pooled to a fixed grid, so the result applies at any frame size.
    """
    from .synthetic import synthetic_talking_head

    scorer = SyncScorer(feature_dim=cfg.feature_dim, seed=cfg.scorer_seed)
    base = 1000 + 10 * cfg.seed
    pairs = [synthetic_talking_head(n_frames, size, size, seed=base + k) for k in range(n_clips)]
    fit_scorer(scorer, pairs, steps=steps)
    return scorer


# --- sweeps --------------------------------------------------------------------------------------------

SWEEP_COLUMNS = ("setting", "kbps_video", "kbps_total", "psnr", "ssim", "sync_confidence")


@dataclass(frozen=True)
class SweepRow:
    setting: str
    kbps_video: float
    kbps_total: float
    psnr: float
    ssim: float
    sync_confidence: float


def rd_sweep(seq: FrameSequence, clip: AudioClip, cfg: Config = Config(), gops=None, qps=None,
             scorer: SyncScorer | None = None) -> list[SweepRow]:
    """Encode+decode once per GOP size (or keyframe QP) and score each decode."""
    from .pipeline import decode_stream, encode_stream

    if (gops is None) == (qps is None):
        raise EvalError("give exactly one of a GOP list or a QP list")
    settings = [("gop", int(g)) for g in gops] if gops is not None else [("qp", int(q)) for q in qps]
    if scorer is None and len(seq) >= 2 * cfg.sync_max_shift + 1:
        scorer = calibrated_scorer(cfg)
    rows = []
    for kind, value in settings:
        run = cfg.replace(gop_size=value) if kind == "gop" else cfg.replace(keyframe_qp=value)
        data = encode_stream(seq, clip, run)
        report = bitrate_report(demux(data))
        dec = decode_stream(data, run).frames
        p, s = sequence_metrics(seq, dec)
        if len(dec) >= 2 * run.sync_max_shift + 1:
            conf = sync_confidence(dec, clip, scorer, run.sync_max_shift).confidence
        else:
            conf = math.nan
        rows.append(SweepRow(f"{kind}={value}", report.kbps_video, report.kbps_total, p, s, conf))
    return rows


def format_sweep_csv(rows, seed: int | None = None) -> str:
    buf = io.StringIO()
    if seed is not None:
        buf.write(f"# seed={seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([r.setting] + [f"{getattr(r, c):.6f}" for c in SWEEP_COLUMNS[1:]])
    return buf.getvalue()


def sweep_to_curve_csv(rows, metric: str = "psnr", basis: str = "kbps_video") -> str:
    """Re-express sweep rows in the ``setting,bitrate_kbps,metric`` ingest schema."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["setting", "bitrate_kbps", "metric"])
    for r in rows:
        w.writerow([r.setting, f"{getattr(r, basis):.6f}", f"{getattr(r, metric):.6f}"])
    return buf.getvalue()
