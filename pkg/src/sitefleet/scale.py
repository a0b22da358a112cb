"""Robust image-scale regression: pixels-per-meter as a function of drone altitude.

The surveying drone needs to turn pixel offsets into meters, so it learns
ppm(h) from (altitude, pixels-per-meter) samples with RANSAC over low-degree
polynomials and picks the degree on held-out spans. Fitting happens in a
standardized altitude basis z = (h - mean) / std to keep degree-4 Vandermonde
systems well conditioned; `ScaleModel.raw_coefficients()` converts back to
ascending powers of the raw altitude.

File formats owned here:
  training samples  CSV, header `altitude_m,pixels_per_meter`
  held-out spans    CSV, header `pixel_span_px,true_meters,altitude_m`
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import SiteFleetError


class FitError(SiteFleetError):
    """Bad fitting input (too few samples, identical altitudes, empty sets)."""


class DegenerateFitError(FitError):
    """RANSAC consensus stayed below the configured minimum fraction."""


class ExtrapolationError(SiteFleetError):
    """Prediction requested outside the guarded altitude range."""


class InvalidPredictionError(SiteFleetError):
    """The fitted polynomial gives a nonpositive scale at this altitude."""


class SampleFormatError(SiteFleetError):
    """Malformed sample or held-out CSV; message carries the line number."""


@dataclass(frozen=True)
class ScaleSample:
    altitude: float
    pixels_per_meter: float

    def __post_init__(self) -> None:
        for name, v in (("altitude", self.altitude), ("pixels_per_meter", self.pixels_per_meter)):
            if not (math.isfinite(v) and v > 0.0):
                raise FitError(f"ScaleSample.{name} must be finite and > 0, got {v!r}")


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 1000
    inlier_threshold: float = 2.0
    min_inlier_fraction: float = 0.5
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise FitError(f"iterations must be >= 1, got {self.iterations}")
        if not self.inlier_threshold > 0.0:
            raise FitError(f"inlier_threshold must be > 0, got {self.inlier_threshold}")
        if not 0.0 <= self.min_inlier_fraction <= 1.0:
            raise FitError(f"min_inlier_fraction outside [0,1]: {self.min_inlier_fraction}")


@dataclass(frozen=True)
class ScaleModel:
    """A fitted ppm(h) polynomial.

    `coefficients` are ascending powers of the standardized altitude
    z = (h - alt_mean) / alt_std. alt_min/alt_max record the training
    altitude range backing the extrapolation guard; inlier_indices index
    into the training sample list the model was fitted from.
    """

    degree: int
    coefficients: tuple[float, ...]
    inlier_count: int
    inlier_threshold: float
    alt_mean: float
    alt_std: float
    alt_min: float
    alt_max: float
    inlier_indices: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not 1 <= self.degree <= 4:
            raise FitError(f"degree must be in 1..4, got {self.degree}")
        if len(self.coefficients) != self.degree + 1:
            raise FitError(
                f"degree {self.degree} needs {self.degree + 1} coefficients, "
                f"got {len(self.coefficients)}"
            )
        if self.inlier_count < self.degree + 1:
            raise FitError(f"inlier_count {self.inlier_count} below degree+1")

    def raw_coefficients(self) -> tuple[float, ...]:
        """Coefficients in ascending powers of the raw altitude."""
        from numpy.polynomial import polynomial as npoly

        inner = np.array([-self.alt_mean / self.alt_std, 1.0 / self.alt_std])
        out = np.zeros(1)
        for c in reversed(self.coefficients):
            out = npoly.polyadd(npoly.polymul(out, inner), np.array([c]))
        out = np.pad(out, (0, self.degree + 1 - len(out)))
        return tuple(float(v) for v in out)


def _standardize(altitudes: np.ndarray) -> tuple[np.ndarray, float, float]:
    mean = float(altitudes.mean())
    std = float(altitudes.std())
    if std == 0.0:
        raise FitError("all sample altitudes identical; cannot fit a polynomial in altitude")
    return (altitudes - mean) / std, mean, std


def fit_ransac(samples: list[ScaleSample], degree: int, cfg: FitConfig) -> ScaleModel:
    """Classic RANSAC: minimal samples, residual-threshold voting, then a full
    least-squares refit on the winning inlier set.

    Ties on consensus size go to the candidate whose refit RMSE is lower,
    then to the earlier iteration. Deterministic for a given cfg.rng_seed.
    """
    if not 1 <= degree <= 4:
        raise FitError(f"degree must be in 1..4, got {degree}")
    n = len(samples)
    k = degree + 1
    if n < k:
        raise FitError(f"need at least {k} samples for degree {degree}, got {n}")

    alts = np.array([s.altitude for s in samples])
    ppm = np.array([s.pixels_per_meter for s in samples])
    z, mean, std = _standardize(alts)
    vander = np.vander(z, k, increasing=True)

    rng = np.random.default_rng(cfg.rng_seed)
    best_count = -1
    best_rmse = math.inf
    best_mask: np.ndarray | None = None
    best_coef: np.ndarray | None = None
    for _ in range(cfg.iterations):
        pick = rng.choice(n, k, replace=False)
        try:
            hyp = np.linalg.solve(vander[pick], ppm[pick])
        except np.linalg.LinAlgError:
            continue
        if not np.all(np.isfinite(hyp)):
            continue
        mask = np.abs(vander @ hyp - ppm) <= cfg.inlier_threshold
        count = int(mask.sum())
        if count < best_count or count < k:
            continue
        coef, *_ = np.linalg.lstsq(vander[mask], ppm[mask], rcond=None)
        rmse = float(np.sqrt(np.mean((vander[mask] @ coef - ppm[mask]) ** 2)))
        if count > best_count or rmse < best_rmse:
            best_count, best_rmse, best_mask, best_coef = count, rmse, mask, coef

    if best_mask is None or best_count < cfg.min_inlier_fraction * n:
        raise DegenerateFitError(
            f"degenerate fit: consensus {max(best_count, 0)}/{n} below "
            f"min_inlier_fraction {cfg.min_inlier_fraction}"
        )
    return ScaleModel(
        degree=degree,
        coefficients=tuple(float(c) for c in best_coef),
        inlier_count=best_count,
        inlier_threshold=cfg.inlier_threshold,
        alt_mean=mean,
        alt_std=std,
        alt_min=float(alts.min()),
        alt_max=float(alts.max()),
        inlier_indices=tuple(int(i) for i in np.flatnonzero(best_mask)),
    )


def predict_ppm(model: ScaleModel, altitude: float) -> float:
    lo, hi = 0.5 * model.alt_min, 1.5 * model.alt_max
    if not lo <= altitude <= hi:
        raise ExtrapolationError(
            f"altitude {altitude} m outside guarded range [{lo:.2f}, {hi:.2f}] m"
        )
    z = (altitude - model.alt_mean) / model.alt_std
    value = 0.0
    for c in reversed(model.coefficients):
        value = value * z + c
    if not value > 0.0:
        raise InvalidPredictionError(f"model invalid at altitude {altitude} m: ppm {value:.3f}")
    return value


def evaluate_rmse(model: ScaleModel, heldout: list[tuple[float, float, float]]) -> float:
    """RMSE (in centimeters) of predicted real-world span vs truth.

    Held-out rows are (pixel_span_px, true_meters, altitude_m); the predicted
    span is pixel_span / predict_ppm(model, altitude).
    """
    if not heldout:
        raise FitError("empty held-out set")
    sq = 0.0
    for pixel_span, true_m, altitude in heldout:
        predicted = pixel_span / predict_ppm(model, altitude)
        sq += (predicted - true_m) ** 2
    return math.sqrt(sq / len(heldout)) * 100.0


def degree_study(
    samples: list[ScaleSample],
    heldout: list[tuple[float, float, float]],
    degrees: set[int],
    cfg: FitConfig,
) -> dict[int, dict[float, float]]:
    """Fit one model per degree and report held-out RMSE per altitude.

    Returns {degree: {altitude_m: rmse_cm}}; altitudes are the distinct
    values appearing in the held-out set. Each degree is fitted with the
    same config (and therefore the same seed).
    """
    if not degrees:
        raise FitError("empty degree set")
    if not heldout:
        raise FitError("empty held-out set")
    by_alt: dict[float, list[tuple[float, float, float]]] = {}
    for row in heldout:
        by_alt.setdefault(row[2], []).append(row)
    table: dict[int, dict[float, float]] = {}
    for degree in sorted(degrees):
        model = fit_ransac(samples, degree, cfg)
        table[degree] = {
            alt: evaluate_rmse(model, rows) for alt, rows in sorted(by_alt.items())
        }
    return table


# --- synthetic pinhole data ------------------------------------------------
#
# Stand-in for the unavailable field samples: an ideal nadir pinhole camera
# sees ppm(h) = f/h. Training data adds homoscedastic Gaussian noise on the
# ppm reading plus a fraction of gross multiplicative outliers (botched scale
# extractions); held-out spans are noise-free so the study measures model
# bias against the true optics rather than detector noise.

PINHOLE_FOCAL_PX = 1000.0
STUDY_ALTITUDES = (5.0, 8.0, 10.0, 15.0)


def synthetic_pinhole_samples(
    n: int = 120,
    noise_sigma: float = 3.0,
    outlier_fraction: float = 0.2,
    rng_seed: int = 0,
    altitude_range: tuple[float, float] = (3.0, 20.0),
    focal_px: float = PINHOLE_FOCAL_PX,
) -> tuple[list[ScaleSample], tuple[int, ...]]:
    """Training samples plus the indices of the planted outliers."""
    rng = np.random.default_rng(rng_seed)
    lo, hi = altitude_range
    h = rng.uniform(lo, hi, n)
    ppm = focal_px / h + rng.normal(0.0, noise_sigma, n)
    n_out = int(round(outlier_fraction * n))
    idx = rng.choice(n, n_out, replace=False)
    factor = np.where(
        rng.random(n_out) < 0.5,
        rng.uniform(1.5, 4.0, n_out),
        rng.uniform(0.2, 0.6, n_out),
    )
    ppm[idx] = focal_px / h[idx] * factor
    samples = [ScaleSample(float(a), float(p)) for a, p in zip(h, ppm)]
    return samples, tuple(sorted(int(i) for i in idx))


def synthetic_pinhole_heldout(
    altitudes: tuple[float, ...] = STUDY_ALTITUDES,
    spans: tuple[float, ...] = tuple(np.linspace(0.5, 5.0, 10)),
    focal_px: float = PINHOLE_FOCAL_PX,
) -> list[tuple[float, float, float]]:
    """Noise-free held-out rows (pixel_span_px, true_meters, altitude_m)."""
    return [(span * focal_px / alt, span, alt) for alt in altitudes for span in spans]


def nominal_scale_model(focal_px: float = PINHOLE_FOCAL_PX, degree: int = 3) -> ScaleModel:
    """Model fitted to the clean pinhole curve; the simulator's stand-in for
    a survey-calibrated fit when no field samples are loaded."""
    samples, _ = synthetic_pinhole_samples(
        n=60, noise_sigma=0.0, outlier_fraction=0.0, rng_seed=0, focal_px=focal_px,
    )
    return fit_ransac(samples, degree, FitConfig(rng_seed=0))


# --- CSV formats ------------------------------------------------------------

def load_samples_csv(path: str) -> list[ScaleSample]:
    return [
        ScaleSample(row[0], row[1])
        for row in _read_csv(path, ("altitude_m", "pixels_per_meter"))
    ]


def load_heldout_csv(path: str) -> list[tuple[float, float, float]]:
    return _read_csv(path, ("pixel_span_px", "true_meters", "altitude_m"))


def _read_csv(path: str, header: tuple[str, ...]) -> list[tuple[float, ...]]:
    rows: list[tuple[float, ...]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, raw in enumerate(reader, start=1):
            if not raw or (len(raw) == 1 and not raw[0].strip()):
                continue
            if lineno == 1:
                if tuple(cell.strip() for cell in raw) != header:
                    raise SampleFormatError(
                        f"{path}:1: expected header {','.join(header)}"
                    )
                continue
            if len(raw) != len(header):
                raise SampleFormatError(
                    f"{path}:{lineno}: expected {len(header)} columns, got {len(raw)}"
                )
            try:
                rows.append(tuple(float(cell) for cell in raw))
            except ValueError as exc:
                raise SampleFormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise SampleFormatError(f"{path}: no data rows")
    return rows
