"""Panel ingestion, covariates, training windows, and window sampling.

A panel is an ordered collection of same-granularity series. Targets are
float arrays with NaN marking missing observations. Training windows have
a fixed total length; windows may start before the series does, in which
case the prefix is zero-padded and masked. Series are drawn with
probability proportional to their scale, placements uniformly within a
series.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum

import numpy as np

from .errors import ConfigError, DataError

__all__ = [
    "MASK_OBSERVED",
    "MASK_PADDED",
    "MASK_MISSING",
    "Granularity",
    "TimeSeries",
    "Panel",
    "WindowSpec",
    "TrainingWindow",
    "FeatureStats",
    "load_jsonl",
    "add_steps",
    "steps_between",
    "compute_scale",
    "series_scale",
    "raw_features",
    "feature_names",
    "fit_feature_stats",
    "build_window",
    "placement_bounds",
    "WindowSampler",
    "velocity_histogram",
]

MASK_OBSERVED = 0
MASK_PADDED = 1
MASK_MISSING = 2


class Granularity(str, Enum):
    HOURLY = "hourly"
    DAILY = "daily"
    WEEKLY = "weekly"
    MONTHLY = "monthly"

    @property
    def code(self) -> str:
        return {"hourly": "H", "daily": "D", "weekly": "W", "monthly": "M"}[self.value]

    @classmethod
    def from_code(cls, code: str) -> "Granularity":
        table = {"H": cls.HOURLY, "D": cls.DAILY, "W": cls.WEEKLY, "M": cls.MONTHLY}
        if code not in table:
            raise DataError(f"unknown freq code {code!r}; expected one of H, D, W, M")
        return table[code]

    @property
    def season_length(self) -> int:
        """Natural season: day for hourly, week for daily, year otherwise."""
        return {"hourly": 24, "daily": 7, "weekly": 52, "monthly": 12}[self.value]


def _add_months(ts: datetime, k: int) -> datetime:
    total = ts.year * 12 + (ts.month - 1) + k
    year, month = divmod(total, 12)
    month += 1
    # Clamp to the target month's last day (e.g. Jan 31 + 1 month -> Feb 28).
    if month == 12:
        last = 31
    else:
        last = (datetime(year, month + 1, 1) - timedelta(days=1)).day
    return ts.replace(year=year, month=month, day=min(ts.day, last))


_STEP_DELTA = {
    Granularity.HOURLY: timedelta(hours=1),
    Granularity.DAILY: timedelta(days=1),
    Granularity.WEEKLY: timedelta(weeks=1),
}


def add_steps(ts: datetime, k: int, granularity: Granularity) -> datetime:
    """Timestamp k steps after ts (k may be negative)."""
    if granularity is Granularity.MONTHLY:
        return _add_months(ts, k)
    return ts + k * _STEP_DELTA[granularity]


def steps_between(granularity: Granularity, a: datetime, b: datetime) -> int:
    """Integer step count from a to b; errors if b is off the step grid."""
    if granularity is Granularity.MONTHLY:
        k = (b.year - a.year) * 12 + (b.month - a.month)
    else:
        delta = (b - a).total_seconds()
        unit = _STEP_DELTA[granularity].total_seconds()
        k = int(round(delta / unit))
    if add_steps(a, k, granularity) != b:
        raise DataError(
            f"timestamp {b.isoformat()} is not a whole number of "
            f"{granularity.value} steps from {a.isoformat()}"
        )
    return k


@dataclass
class TimeSeries:
    """One series; target holds NaN where the observation is missing."""

    id: str
    start: datetime
    granularity: Granularity
    target: np.ndarray
    category: int = 0

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.target.ndim != 1 or self.target.size == 0:
            raise DataError(f"series {self.id!r}: target must be a non-empty sequence")
        observed = self.target[~np.isnan(self.target)]
        if observed.size == 0:
            raise DataError(f"series {self.id!r}: no observed points")
        if np.any(observed < 0.0):
            j = int(np.nanargmin(self.target))
            raise DataError(f"series {self.id!r}: negative target at index {j}")
        if self.category < 0:
            raise DataError(f"series {self.id!r}: category must be non-negative")

    @property
    def n(self) -> int:
        return int(self.target.size)

    def timestamp(self, step: int) -> datetime:
        return add_steps(self.start, step, self.granularity)


@dataclass
class Panel:
    series: list[TimeSeries] = field(default_factory=list)

    def __post_init__(self):
        if not self.series:
            raise DataError("empty panel: no series")
        grans = {s.granularity for s in self.series}
        if len(grans) > 1:
            raise DataError(f"mixed granularities in panel: {sorted(g.value for g in grans)}")

    @property
    def granularity(self) -> Granularity:
        return self.series[0].granularity

    def __len__(self) -> int:
        return len(self.series)

    def __iter__(self):
        return iter(self.series)

    def get(self, series_id: str) -> TimeSeries:
        for s in self.series:
            if s.id == series_id:
                return s
        raise DataError(f"no series with id {series_id!r}")

    @property
    def category_cardinality(self) -> int:
        return max(s.category for s in self.series) + 1

    def require_integer_targets(self):
        """Count likelihoods need integer observations."""
        for s in self.series:
            vals = s.target[~np.isnan(s.target)]
            if np.any(vals != np.floor(vals)):
                raise DataError(
                    f"series {s.id!r}: non-integer targets are incompatible "
                    "with a count likelihood"
                )


def load_jsonl(path) -> Panel:
    """Parse a JSON-lines panel file.

    Each line: {"id": str, "start": ISO-8601, "freq": H|D|W|M,
    "target": [num|null, ...], "cat": int (optional, default 0)}.
    """
    series = []
    seen_ids = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{where}: invalid JSON: {e}") from None
            if not isinstance(obj, dict):
                raise DataError(f"{where}: expected a JSON object")
            for key in ("id", "start", "freq", "target"):
                if key not in obj:
                    raise DataError(f"{where}: missing key {key!r}")
            sid = obj["id"]
            if not isinstance(sid, str) or not sid:
                raise DataError(f"{where}: id must be a non-empty string")
            if sid in seen_ids:
                raise DataError(f"{where}: duplicate series id {sid!r}")
            try:
                start = datetime.fromisoformat(obj["start"])
            except (TypeError, ValueError):
                raise DataError(f"{where}: start is not an ISO-8601 timestamp") from None
            gran = Granularity.from_code(obj["freq"]) if isinstance(obj["freq"], str) else None
            if gran is None:
                raise DataError(f"{where}: freq must be a string code")
            raw = obj["target"]
            if not isinstance(raw, list) or not raw:
                raise DataError(f"{where}: target must be a non-empty array")
            values = np.empty(len(raw), dtype=np.float64)
            for j, v in enumerate(raw):
                if v is None:
                    values[j] = np.nan
                elif isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v):
                    values[j] = float(v)
                else:
                    raise DataError(f"{where}: target[{j}] must be a finite number or null")
            cat = obj.get("cat", 0)
            if not isinstance(cat, int) or isinstance(cat, bool):
                raise DataError(f"{where}: cat must be an integer")
            try:
                series.append(TimeSeries(sid, start, gran, values, cat))
            except DataError as e:
                raise DataError(f"{where}: {e}") from None
            seen_ids.add(sid)
    if not series:
        raise DataError(f"{path}: empty panel: no series")
    try:
        return Panel(series)
    except DataError as e:
        raise DataError(f"{path}: {e}") from None


@dataclass(frozen=True)
class WindowSpec:
    """Fixed window geometry: conditioning steps then prediction steps."""

    conditioning_length: int
    prediction_length: int

    def __post_init__(self):
        if self.conditioning_length < 1 or self.prediction_length < 1:
            raise ConfigError("window lengths must be at least 1")

    @property
    def total(self) -> int:
        return self.conditioning_length + self.prediction_length


def compute_scale(values) -> float:
    """Scale nu = 1 + mean of the conditioning range.

    Missing entries (None or NaN) and padded zeros contribute 0 to the
    sum; the divisor is the full conditioning length.
    """
    arr = np.array(
        [np.nan if v is None else float(v) for v in values], dtype=np.float64
    )
    if arr.size == 0:
        raise ConfigError("compute_scale requires at least one conditioning step")
    return 1.0 + float(np.nansum(arr)) / arr.size


def series_scale(series: TimeSeries) -> float:
    """Whole-series scale used as the sampling weight for this series."""
    return 1.0 + float(np.nansum(series.target)) / series.n


def feature_names(granularity: Granularity) -> list:
    base = ["age"]
    if granularity is Granularity.HOURLY:
        return base + ["hour_of_day", "day_of_week"]
    if granularity is Granularity.DAILY:
        return base + ["day_of_week"]
    if granularity is Granularity.WEEKLY:
        return base + ["week_of_year"]
    return base + ["month_of_year"]


def raw_features(series: TimeSeries, start_offset: int, length: int) -> np.ndarray:
    """Unstandardized covariate rows for steps [start_offset, start_offset+length).

    Steps may precede the series start (negative age) or run past its end
    (future covariates are known).
    """
    gran = series.granularity
    out = np.empty((length, len(feature_names(gran))), dtype=np.float64)
    out[:, 0] = np.arange(start_offset, start_offset + length, dtype=np.float64)
    stamps = [series.timestamp(k) for k in range(start_offset, start_offset + length)]
    if gran is Granularity.HOURLY:
        out[:, 1] = [ts.hour for ts in stamps]
        out[:, 2] = [ts.weekday() for ts in stamps]
    elif gran is Granularity.DAILY:
        out[:, 1] = [ts.weekday() for ts in stamps]
    elif gran is Granularity.WEEKLY:
        out[:, 1] = [ts.isocalendar()[1] for ts in stamps]
    else:
        out[:, 1] = [ts.month for ts in stamps]
    return out


@dataclass
class FeatureStats:
    """Per-feature mean and standard deviation from the training split."""

    mean: np.ndarray
    std: np.ndarray
    names: list

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def to_dict(self) -> dict:
        return {
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "names": list(self.names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(
            np.asarray(d["mean"], dtype=np.float64),
            np.asarray(d["std"], dtype=np.float64),
            list(d["names"]),
        )


def placement_bounds(n: int, spec: WindowSpec):
    """Valid window start offsets for a series of length n.

    The earliest start pads the whole conditioning range; the latest ends
    exactly at the series end, so the prediction range never runs past
    recorded data. Returns (lo, hi) inclusive, or None when the series is
    shorter than the prediction range.
    """
    lo = -spec.conditioning_length
    hi = n - spec.total
    if hi < lo:
        return None
    return lo, hi


def _train_placement_count(n: int, spec: WindowSpec) -> int:
    bounds = placement_bounds(n, spec)
    if bounds is None:
        return 0
    total = bounds[1] - bounds[0] + 1
    return total - total // 10


def fit_feature_stats(panel: Panel, spec: WindowSpec) -> FeatureStats:
    """Standardization statistics over the training split.

    Each extended step of each series is weighted by the number of
    training windows that contain it, so the standardized feature mean
    over the training windows is exactly zero without enumerating them.
    """
    gran = panel.granularity
    d = len(feature_names(gran))
    sum_w = 0.0
    sum_x = np.zeros(d)
    sum_x2 = np.zeros(d)
    T = spec.total
    for series in panel:
        bounds = placement_bounds(series.n, spec)
        if bounds is None:
            continue
        lo, _ = bounds
        hi_train = lo + _train_placement_count(series.n, spec) - 1
        ks = np.arange(lo, series.n)
        low = np.maximum(lo, ks - T + 1)
        high = np.minimum(hi_train, ks)
        w = np.maximum(0, high - low + 1).astype(np.float64)
        x = raw_features(series, lo, series.n - lo)
        sum_w += w.sum()
        sum_x += (x * w[:, None]).sum(axis=0)
        sum_x2 += (x * x * w[:, None]).sum(axis=0)
    if sum_w <= 0.0:
        raise DataError("no series admits a training window under this window spec")
    mean = sum_x / sum_w
    var = np.maximum(sum_x2 / sum_w - mean * mean, 0.0)
    std = np.sqrt(var)
    std[std < 1e-12] = 1.0
    return FeatureStats(mean, std, feature_names(gran))


@dataclass
class TrainingWindow:
    """One fixed-length slice of a series, ready for the network.

    target holds 0.0 at padded steps and NaN at missing steps; mask says
    which is which. covariates are standardized.
    """

    series_id: str
    start_offset: int
    target: np.ndarray
    mask: np.ndarray
    covariates: np.ndarray
    scale: float
    category: int

    @property
    def total(self) -> int:
        return int(self.target.size)


def _window_arrays(series: TimeSeries, spec: WindowSpec, start_offset: int):
    bounds = placement_bounds(series.n, spec)
    if bounds is None or not (bounds[0] <= start_offset <= bounds[1]):
        raise ConfigError(
            f"series {series.id!r}: start offset {start_offset} is outside "
            f"the valid placement range"
        )
    T = spec.total
    target = np.zeros(T, dtype=np.float64)
    mask = np.full(T, MASK_PADDED, dtype=np.int8)
    first_real = max(0, -start_offset)
    vals = series.target[start_offset + first_real : start_offset + T]
    missing = np.isnan(vals)
    mask[first_real:] = np.where(missing, MASK_MISSING, MASK_OBSERVED)
    target[first_real:] = vals
    cond = target[: spec.conditioning_length].copy()
    cond[mask[: spec.conditioning_length] == MASK_MISSING] = np.nan
    scale = compute_scale(cond)
    return target, mask, scale


def build_window(
    series: TimeSeries, spec: WindowSpec, start_offset: int, stats: FeatureStats
) -> TrainingWindow:
    target, mask, scale = _window_arrays(series, spec, start_offset)
    covariates = stats.standardize(raw_features(series, start_offset, spec.total))
    return TrainingWindow(
        series.id, start_offset, target, mask, covariates, scale, series.category
    )


class WindowSampler:
    """Draws training windows: series by scale weight, placement uniform.

    Placements within a series split chronologically, roughly 90/10, into
    a training and a validation part. Series too short for any placement
    are skipped with a warning and never drawn.
    """

    def __init__(self, panel: Panel, spec: WindowSpec, stats: FeatureStats, uniform: bool = False):
        self.panel = panel
        self.spec = spec
        self.stats = stats
        self._series = []
        self._bounds = []
        self._n_train = []
        weights = []
        for series in panel:
            bounds = placement_bounds(series.n, spec)
            if bounds is None:
                warnings.warn(
                    f"series {series.id!r} is shorter than the prediction range; skipped",
                    stacklevel=2,
                )
                continue
            self._series.append(series)
            self._bounds.append(bounds)
            self._n_train.append(_train_placement_count(series.n, spec))
            weights.append(1.0 if uniform else series_scale(series))
        if not self._series:
            raise DataError("no series is long enough for the window spec")
        self._cum_weights = np.cumsum(np.asarray(weights, dtype=np.float64))
        # Extended standardized features per series, sliced on each draw.
        self._features = [
            stats.standardize(raw_features(s, -spec.conditioning_length, s.n + spec.conditioning_length))
            for s in self._series
        ]

    def draw(self, stream) -> TrainingWindow:
        i = stream.choice_weighted(self._cum_weights)
        lo, _ = self._bounds[i]
        start = lo + stream.randint(self._n_train[i])
        return self._window(i, start)

    def _window(self, i: int, start_offset: int) -> TrainingWindow:
        series = self._series[i]
        spec = self.spec
        target, mask, scale = _window_arrays(series, spec, start_offset)
        # Slice the precomputed slab; identical to standardizing fresh rows.
        row0 = start_offset + spec.conditioning_length
        covariates = self._features[i][row0 : row0 + spec.total]
        return TrainingWindow(
            series.id, start_offset, target, mask, covariates, scale, series.category
        )

    def validation_windows(self, cap: int = 512) -> list:
        """Deterministic held-out pool: the last ~10% of placements per
        series, strided down to at most cap windows."""
        slots = []
        for i, series in enumerate(self._series):
            lo, hi = self._bounds[i]
            first_val = lo + self._n_train[i]
            for s in range(first_val, hi + 1):
                slots.append((i, s))
        if len(slots) > cap:
            stride = -(-len(slots) // cap)
            slots = slots[::stride]
        return [self._window(i, s) for i, s in slots]

    def has_validation(self) -> bool:
        return any(
            self._bounds[i][1] - self._bounds[i][0] + 1 > self._n_train[i]
            for i in range(len(self._series))
        )


def velocity_histogram(panel: Panel, bucket_width: float = 0.25):
    """Bucket counts of log10(1 + series mean); missing steps count as 0.

    Returns (edge, count) rows sorted by edge; counts sum to the number
    of series.
    """
    if bucket_width <= 0.0:
        raise ConfigError("bucket width must be positive")
    counts = {}
    for series in panel:
        mean = float(np.nansum(series.target)) / series.n
        idx = int(math.floor(math.log10(1.0 + mean) / bucket_width))
        counts[idx] = counts.get(idx, 0) + 1
    return [(idx * bucket_width, counts[idx]) for idx in sorted(counts)]
