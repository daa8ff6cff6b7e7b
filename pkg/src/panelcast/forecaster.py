"""Monte Carlo forecasting: encode the conditioning range once, then roll
each sample path forward by drawing from the predicted distribution and
feeding the draw back in.

Every path has its own RNG substream keyed by (seed, "path", series id,
path index), so path p is the same no matter how many paths are drawn.
Quantiles are empirical nearest-rank: sorted column index ceil(rho*n)-1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .dataset import (
    MASK_MISSING,
    MASK_OBSERVED,
    MASK_PADDED,
    TimeSeries,
    add_steps,
    compute_scale,
    raw_features,
)
from .errors import ConfigError, DataError
from .likelihood import LikelihoodKind, LikelihoodParams, sample
from .network import ModelParams, decode_step, encode
from .rng import substream

__all__ = [
    "ForecastSamples",
    "QuantileForecast",
    "ForecastRecord",
    "forecast",
    "nearest_rank",
    "quantiles",
    "span_aggregate",
    "shuffle_paths",
    "record_from_samples",
    "write_forecasts",
    "read_forecasts",
]

DEFAULT_NUM_SAMPLES = 200


@dataclass
class ForecastSamples:
    series_id: str
    start: datetime  # timestamp of the first predicted step
    samples: np.ndarray  # (num_samples, horizon)
    seed: int

    @property
    def num_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def horizon(self) -> int:
        return int(self.samples.shape[1])


@dataclass
class QuantileForecast:
    levels: list
    values: np.ndarray  # (len(levels), horizon)


def _conditioning_arrays(series: TimeSeries, params: ModelParams):
    """Last conditioning_length steps, zero-padded in front when the
    series is shorter."""
    c = params.spec.conditioning_length
    n = series.n
    start_offset = n - c
    target = np.zeros(c, dtype=np.float64)
    mask = np.full(c, MASK_PADDED, dtype=np.int8)
    first_real = max(0, -start_offset)
    vals = series.target[max(0, start_offset) : n]
    missing = np.isnan(vals)
    mask[first_real:] = np.where(missing, MASK_MISSING, MASK_OBSERVED)
    target[first_real:] = vals
    if not np.any(mask == MASK_OBSERVED):
        raise DataError(
            f"series {series.id!r}: no observed value in the conditioning range"
        )
    cond_for_scale = target.copy()
    cond_for_scale[mask == MASK_MISSING] = np.nan
    nu = compute_scale(cond_for_scale)
    target[mask == MASK_MISSING] = np.nan
    return start_offset, target, mask, nu


def forecast(
    series: TimeSeries,
    params: ModelParams,
    num_samples: int = DEFAULT_NUM_SAMPLES,
    seed: int = 0,
    horizon: int = 0,
) -> ForecastSamples:
    """Sample paths for the steps after the series' last recorded point.

    horizon defaults to the model's prediction length. The conditioning
    range is encoded once (missing values imputed by sampling); all paths
    start from that state.
    """
    if num_samples < 1:
        raise ConfigError("num_samples must be at least 1")
    if series.granularity is not params.granularity:
        raise DataError(
            f"series {series.id!r} is {series.granularity.value} but the model "
            f"expects {params.granularity.value} data"
        )
    h = horizon if horizon else params.spec.prediction_length
    if h < 1:
        raise ConfigError("horizon must be at least 1")
    c = params.spec.conditioning_length
    start_offset, cond_target, cond_mask, nu = _conditioning_arrays(series, params)
    feats = params.stats.standardize(raw_features(series, start_offset, c + h))
    state, z_last = encode(
        cond_target,
        cond_mask,
        feats[:c],
        nu,
        series.category,
        params,
        substream(seed, "impute", series.id),
    )
    state = type(state)(
        [np.repeat(hh, num_samples, axis=0) for hh in state.h],
        [np.repeat(cc, num_samples, axis=0) for cc in state.c],
    )
    streams = [substream(seed, "path", series.id, p) for p in range(num_samples)]
    out = np.empty((num_samples, h), dtype=np.float64)
    z_prev = np.full(num_samples, z_last, dtype=np.float64)
    kind = params.likelihood
    for t in range(h):
        state, mu, disp = decode_step(params, state, z_prev, feats[c + t], series.category, nu)
        for p in range(num_samples):
            z_prev[p] = sample(LikelihoodParams(kind, float(mu[p]), float(disp[p])), streams[p])
        out[:, t] = z_prev
    return ForecastSamples(series.id, series.timestamp(series.n), out, seed)


def _as_matrix(samples) -> np.ndarray:
    mat = samples.samples if isinstance(samples, ForecastSamples) else np.asarray(samples)
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.size == 0:
        raise ConfigError("sample matrix must be non-empty and 2-d")
    return mat


def nearest_rank(sorted_values: np.ndarray, rho: float):
    """Empirical rho-quantile of an ascending array: index ceil(rho*n)-1.

    The tiny slack keeps products like 0.9*200 from rounding up a rank.
    """
    if not 0.0 < rho < 1.0:
        raise ConfigError(f"quantile level must be in (0, 1), got {rho}")
    n = sorted_values.shape[0]
    idx = max(0, int(math.ceil(rho * n - 1e-9)) - 1)
    return sorted_values[idx]


def quantiles(samples, levels) -> QuantileForecast:
    """Per-step nearest-rank quantiles at each requested level."""
    mat = _as_matrix(samples)
    levels = [float(v) for v in levels]
    if not levels:
        raise ConfigError("at least one quantile level is required")
    sorted_cols = np.sort(mat, axis=0)
    values = np.stack([nearest_rank(sorted_cols, rho) for rho in levels])
    return QuantileForecast(levels, values)


def span_aggregate(samples, lead: int, span: int, rho: float) -> float:
    """rho-quantile of per-path sums over the span [lead, lead+span)."""
    mat = _as_matrix(samples)
    h = mat.shape[1]
    if lead < 0 or span < 1 or lead + span > h:
        raise ConfigError(
            f"span [{lead}, {lead + span}) does not fit a horizon of {h} steps"
        )
    sums = mat[:, lead : lead + span].sum(axis=1)
    return float(nearest_rank(np.sort(sums), rho))


def shuffle_paths(samples, seed: int):
    """Permute the path dimension independently at each step, destroying
    inter-step correlation while keeping each step's marginal intact."""
    mat = _as_matrix(samples)
    if mat.shape[0] < 2:
        raise ConfigError("shuffling needs at least two sample paths")
    out = np.empty_like(mat)
    for t in range(mat.shape[1]):
        perm = substream(seed, "shuffle", t).permutation(mat.shape[0])
        out[:, t] = mat[perm, t]
    if isinstance(samples, ForecastSamples):
        return ForecastSamples(samples.series_id, samples.start, out, samples.seed)
    return out


@dataclass
class ForecastRecord:
    """One series' forecast as written to the output file."""

    series_id: str
    start: datetime
    quantile_values: dict  # float level -> (horizon,) array
    num_samples: int
    seed: int
    samples: np.ndarray = None  # present only when emitted

    @property
    def horizon(self) -> int:
        first = next(iter(self.quantile_values.values()))
        return int(first.shape[0])

    def to_json_obj(self) -> dict:
        obj = {
            "id": self.series_id,
            "start": self.start.isoformat(),
            "num_samples": self.num_samples,
            "seed": self.seed,
            "quantiles": {
                repr(level): [float(v) for v in vals]
                for level, vals in self.quantile_values.items()
            },
        }
        if self.samples is not None:
            obj["samples"] = [[float(v) for v in row] for row in self.samples]
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ForecastRecord":
        try:
            quant = {
                float(k): np.asarray(v, dtype=np.float64)
                for k, v in obj["quantiles"].items()
            }
            samples = None
            if "samples" in obj:
                samples = np.asarray(obj["samples"], dtype=np.float64)
            return cls(
                obj["id"],
                datetime.fromisoformat(obj["start"]),
                quant,
                int(obj["num_samples"]),
                int(obj["seed"]),
                samples,
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"malformed forecast record: {e}") from None


def record_from_samples(fc: ForecastSamples, levels, emit_samples: bool = False) -> ForecastRecord:
    q = quantiles(fc, levels)
    return ForecastRecord(
        fc.series_id,
        fc.start,
        {level: q.values[i] for i, level in enumerate(q.levels)},
        fc.num_samples,
        fc.seed,
        fc.samples if emit_samples else None,
    )


def write_forecasts(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_obj(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def read_forecasts(path):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON: {e}") from None
            records.append(ForecastRecord.from_json_obj(obj))
    if not records:
        raise DataError(f"{path}: no forecast records")
    return records
