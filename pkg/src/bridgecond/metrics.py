"""PSNR / SSIM / masked consistency and the evaluation report.

Images may be uint8 (scaled by 1/255) or floats already in [0, 1].
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .datapipe.imageio import read_pgm, read_ppm
from .datapipe.pipeline import read_manifest
from .datapipe.scorer import ScorerAdapter, ScorerError

PSNR_CAP = 99.0
SSIM_WINDOW = 8
K1, K2 = 0.01, 0.03


def _unit(x) -> np.ndarray:
    x = np.asarray(x)
    return x.astype(np.float64) / 255.0 if np.issubdtype(x.dtype, np.integer) else x.astype(np.float64)


def _same_size(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image sizes differ: {a.shape} vs {b.shape}")


def _region_mse(a: np.ndarray, b: np.ndarray, region: np.ndarray | None) -> float:
    diff = (a - b) ** 2
    if region is None:
        return float(diff.mean())
    region = np.asarray(region, dtype=bool)
    if region.shape != a.shape[:2]:
        raise ValueError(f"region {region.shape} does not match image {a.shape[:2]}")
    if not region.any():
        raise ValueError("empty region")
    return float(diff[region].mean())


def psnr(a, b, region: np.ndarray | None = None) -> float:
    """10 log10(1 / MSE) on unit-scaled pixels; zero error gives ``PSNR_CAP``."""
    a, b = _unit(a), _unit(b)
    _same_size(a, b)
    mse = _region_mse(a, b, region)
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim_window(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    """SSIM of one window using population (1/N) statistics."""
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mx, my = x.mean(), y.mean()
    vx, vy = ((x - mx) ** 2).mean(), ((y - my) ** 2).mean()
    cov = ((x - mx) * (y - my)).mean()
    return float(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))


def ssim(a, b, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over every stride-1 window position, averaged over channels."""
    a, b = _unit(a), _unit(b)
    _same_size(a, b)
    if min(a.shape[:2]) < window:
        raise ValueError(f"image {a.shape[:2]} is smaller than the {window}x{window} window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = K1 ** 2, K2 ** 2
    wa = sliding_window_view(a, (window, window), axis=(0, 1))
    wb = sliding_window_view(b, (window, window), axis=(0, 1))
    axes = (-2, -1)
    ma, mb = wa.mean(axis=axes), wb.mean(axis=axes)
    va = ((wa - ma[..., None, None]) ** 2).mean(axis=axes)
    vb = ((wb - mb[..., None, None]) ** 2).mean(axis=axes)
    cov = ((wa - ma[..., None, None]) * (wb - mb[..., None, None])).mean(axis=axes)
    s = ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2))
    return float(s.mean())


def masked_mse(a, b, mask: np.ndarray) -> dict:
    """MSE outside (``bg_mse``) and inside (``edit_mse``) the mask."""
    a, b = _unit(a), _unit(b)
    _same_size(a, b)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any() or mask.all():
        raise ValueError("mask and its complement must both be non-empty")
    return {"bg_mse": _region_mse(a, b, ~mask), "edit_mse": _region_mse(a, b, mask)}


def masked_consistency(sample) -> dict:
    """Source/target consistency of an EditSample split by its mask."""
    if sample.mask is None:
        raise ValueError("sample has no mask")
    return masked_mse(sample.source, sample.target, sample.mask)


# --- report ------------------------------------------------------------------

ROW_FIELDS = ("id", "task", "present", "psnr_bg", "psnr_capped", "ssim", "masked_mse_edit", "sc", "pq", "vie")
MEAN_FIELDS = ("psnr_bg", "ssim", "masked_mse_edit", "sc", "pq", "vie")


@dataclass
class MetricReport:
    rows: list[dict]
    scorer_failures: int = 0
    aggregates: dict = field(init=False)

    def __post_init__(self):
        self.aggregates = aggregate(self.rows)

    @property
    def missing(self) -> int:
        return sum(not r["present"] for r in self.rows)

    def write_csv(self, path) -> None:
        try:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(ROW_FIELDS)
                for r in self.rows:
                    w.writerow([_fmt(r.get(k)) for k in ROW_FIELDS])
                w.writerow(["mean", "", sum(r["present"] for r in self.rows), _fmt(self.aggregates["psnr_bg"]),
                            "", *(_fmt(self.aggregates[k]) for k in MEAN_FIELDS[1:])])
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc.strerror}") from exc

    def summary(self) -> str:
        agg = self.aggregates
        vie = agg["vie"]
        cells = {
            "VIEScore": None if vie is None else vie / 10.0,
            "CLIPScore": None,
            "PSNR": agg["psnr_bg"],
            "SSIM": agg["ssim"],
            "LPIPS": None,
        }
        head = "".join(f"{k:>11}" for k in cells)
        body = "".join(f"{'n/a' if v is None else f'{v:.4f}':>11}" for v in cells.values())
        return head + "\n" + body


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def aggregate(rows: list[dict]) -> dict:
    """Arithmetic means over present rows with a finite value; None when no row qualifies."""
    out = {}
    for k in MEAN_FIELDS:
        vals = sorted(r[k] for r in rows if r["present"] and r.get(k) is not None and math.isfinite(r[k]))
        out[k] = math.fsum(vals) / len(vals) if vals else None
    return out


def _eval_row(row: dict, root: Path, pred_dir: Path) -> tuple[dict, tuple | None]:
    out = {k: None for k in ROW_FIELDS}
    out.update(id=row["id"], task=row["task"], present=False)
    pred_path = pred_dir / f"{row['id']}.ppm"
    if not pred_path.exists():
        return out, None
    pred = read_ppm(pred_path)
    src, tgt = read_ppm(root / row["src_path"]), read_ppm(root / row["tgt_path"])
    mask = read_pgm(root / row["mask_path"])
    bg = ~mask if (mask.any() and not mask.all()) else None
    value = psnr(pred, tgt, bg)
    out.update(present=True, psnr_bg=value, psnr_capped=value == PSNR_CAP, ssim=ssim(pred, tgt),
               masked_mse_edit=_region_mse(_unit(pred), _unit(tgt), mask) if mask.any() else None)
    return out, (src, pred, mask, row["instruction"], str(root / row["src_path"]), str(pred_path))


def evaluate(manifest_path, pred_dir, scorer: ScorerAdapter | None = None, workers: int = 1) -> MetricReport:
    """Compare ``<pred_dir>/<id>.ppm`` against each manifest row's target."""
    manifest_path, pred_dir = Path(manifest_path), Path(pred_dir)
    rows = read_manifest(manifest_path)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(lambda r: _eval_row(r, manifest_path.parent, pred_dir), rows))
    failures = 0
    out_rows = []
    for row, job in results:
        if job is not None and scorer is not None:
            src, pred, mask, instruction, src_path, pred_path = job
            try:
                s = scorer.score(src, pred, mask, instruction, src_path, pred_path)
                row.update(sc=s["sc"], pq=s["pq"], vie=s["overall"])
            except ScorerError:
                failures += 1
        out_rows.append(row)
    return MetricReport(out_rows, failures)
