"""Training loop: weighted window draws, Adam with gradient clipping,
per-epoch validation on held-out placements, early stopping on the best
validation NLL, and a small grid search.

An epoch is a fixed number of drawn windows; weighted sampling has no
natural pass over the data. Validation NLL is the total NLL divided by
the number of steps that contribute to the loss.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Panel, WindowSampler, WindowSpec, fit_feature_stats
from .errors import ConfigError, DivergenceError
from .likelihood import LikelihoodKind
from .network import ModelParams, init_model, unroll_batch
from .optim import clip_global_norm, init_adam, adam_step
from .rng import substream

__all__ = ["TrainConfig", "TrainLog", "parse_config", "train", "grid_search"]

MAX_GRAD_NORM = 10.0
VALIDATION_CAP = 512
DIVERGENCE_LIMIT = 3


@dataclass
class TrainConfig:
    likelihood: LikelihoodKind = LikelihoodKind.GAUSSIAN
    conditioning_length: int = 24
    prediction_length: int = 12
    num_layers: int = 3
    hidden_units: int = 40
    embedding_dim: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    max_batches: int = 2000
    patience: int = 5
    windows_per_epoch: int = 500
    seed: int = 0
    uniform_sampling: bool = False
    no_scaling: bool = False

    def __post_init__(self):
        self.likelihood = LikelihoodKind(self.likelihood)
        for name in (
            "conditioning_length",
            "prediction_length",
            "num_layers",
            "hidden_units",
            "embedding_dim",
            "batch_size",
            "max_batches",
            "patience",
            "windows_per_epoch",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"config {name} must be at least 1")
        if self.learning_rate <= 0.0:
            raise ConfigError("config learning_rate must be positive")

    @property
    def window_spec(self) -> WindowSpec:
        return WindowSpec(self.conditioning_length, self.prediction_length)

    def to_dict(self) -> dict:
        return {
            "likelihood": self.likelihood.value,
            "conditioning_length": self.conditioning_length,
            "prediction_length": self.prediction_length,
            "num_layers": self.num_layers,
            "hidden_units": self.hidden_units,
            "embedding_dim": self.embedding_dim,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "max_batches": self.max_batches,
            "patience": self.patience,
            "windows_per_epoch": self.windows_per_epoch,
            "seed": self.seed,
            "uniform_sampling": self.uniform_sampling,
            "no_scaling": self.no_scaling,
        }


_BOOL_KEYS = {"uniform_sampling", "no_scaling"}
_INT_KEYS = {
    "conditioning_length",
    "prediction_length",
    "num_layers",
    "hidden_units",
    "embedding_dim",
    "batch_size",
    "max_batches",
    "patience",
    "windows_per_epoch",
    "seed",
}
_FLOAT_KEYS = {"learning_rate"}


def parse_config(text: str) -> TrainConfig:
    """Flat key=value config; blank lines and # comments allowed; unknown
    keys rejected."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key in _BOOL_KEYS:
            if val.lower() not in ("true", "false"):
                raise ConfigError(f"config line {lineno}: {key} must be true or false")
            values[key] = val.lower() == "true"
        elif key in _INT_KEYS:
            try:
                values[key] = int(val)
            except ValueError:
                raise ConfigError(f"config line {lineno}: {key} must be an integer") from None
        elif key in _FLOAT_KEYS:
            try:
                values[key] = float(val)
            except ValueError:
                raise ConfigError(f"config line {lineno}: {key} must be a number") from None
        elif key == "likelihood":
            try:
                values[key] = LikelihoodKind(val)
            except ValueError:
                raise ConfigError(f"config line {lineno}: unknown likelihood {val!r}") from None
        else:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
    return TrainConfig(**values)


@dataclass
class TrainLog:
    """One row per validation pass plus the final stopping reason."""

    rows: list = field(default_factory=list)  # (epoch, batches, train_nll, val_nll, elapsed)
    stopping_reason: str = ""

    def add(self, epoch: int, batches: int, train_nll: float, val_nll: float, elapsed: float):
        self.rows.append((epoch, batches, train_nll, val_nll, elapsed))

    @property
    def best_val_nll(self) -> float:
        return min(r[3] for r in self.rows) if self.rows else float("inf")

    def to_tsv(self) -> str:
        lines = ["epoch\tbatches\ttrain_nll\tval_nll\telapsed_s"]
        for epoch, batches, train_nll, val_nll, elapsed in self.rows:
            lines.append(f"{epoch}\t{batches}\t{train_nll:.6f}\t{val_nll:.6f}\t{elapsed:.3f}")
        lines.append(f"# stopped: {self.stopping_reason}")
        return "\n".join(lines) + "\n"


def _pool_nll(pool, params: ModelParams, batch_size: int, stream) -> float:
    total = 0.0
    steps = 0
    for i in range(0, len(pool), batch_size):
        res = unroll_batch(pool[i : i + batch_size], params, stream, compute_grads=False)
        total += res.loss
        steps += res.counted_steps
    if steps == 0:
        raise ConfigError("validation pool has no contributing steps")
    return total / steps


def _force_unit_scale(window):
    window.scale = 1.0
    return window


def train(panel: Panel, config: TrainConfig):
    """Returns (ModelParams at the best validation NLL, TrainLog)."""
    if config.likelihood is LikelihoodKind.NEG_BINOMIAL:
        panel.require_integer_targets()
    spec = config.window_spec
    stats = fit_feature_stats(panel, spec)
    sampler = WindowSampler(panel, spec, stats, uniform=config.uniform_sampling)
    model = init_model(
        config.likelihood,
        spec,
        stats,
        panel.granularity,
        panel.category_cardinality,
        config.num_layers,
        config.hidden_units,
        config.embedding_dim,
        config.seed,
    )
    adam = init_adam(model.blocks(), learning_rate=config.learning_rate)
    draw_stream = substream(config.seed, "train", "draw")
    impute_stream = substream(config.seed, "train", "impute")

    pool = sampler.validation_windows(cap=VALIDATION_CAP)
    if not pool:
        # Panels where every series has fewer than 10 placements hold
        # nothing out; fall back to a fixed in-sample pool.
        fallback = substream(config.seed, "train", "valpool")
        pool = [sampler.draw(fallback) for _ in range(min(VALIDATION_CAP, 64))]
    if config.no_scaling:
        pool = [_force_unit_scale(w) for w in pool]

    log = TrainLog()
    best_val = float("inf")
    best_blocks = model.copy_blocks()
    stale = 0
    batches_done = 0
    divergent_streak = 0
    start_time = time.monotonic()
    steps_per_epoch = -(-config.windows_per_epoch // config.batch_size)
    epoch = 0

    while batches_done < config.max_batches:
        epoch += 1
        epoch_nll = 0.0
        epoch_steps = 0
        for _ in range(steps_per_epoch):
            if batches_done >= config.max_batches:
                break
            windows = [sampler.draw(draw_stream) for _ in range(config.batch_size)]
            if config.no_scaling:
                windows = [_force_unit_scale(w) for w in windows]
            batches_done += 1
            try:
                res = unroll_batch(windows, model, impute_stream)
            except DivergenceError as e:
                divergent_streak += 1
                if divergent_streak >= DIVERGENCE_LIMIT:
                    log.stopping_reason = f"diverged: {e}"
                    raise DivergenceError(
                        f"training diverged after {batches_done} batches: {e}", log=log
                    ) from None
                continue
            grads = res.grads
            for g in grads.values():
                g /= len(windows)
            norm = clip_global_norm(grads, MAX_GRAD_NORM)
            if not np.isfinite(norm):
                divergent_streak += 1
                if divergent_streak >= DIVERGENCE_LIMIT:
                    log.stopping_reason = "diverged: non-finite gradients"
                    raise DivergenceError(
                        f"training diverged after {batches_done} batches: non-finite gradients",
                        log=log,
                    )
                continue
            divergent_streak = 0
            adam_step(model.blocks(), grads, adam)
            epoch_nll += res.loss
            epoch_steps += res.counted_steps
        train_nll = epoch_nll / epoch_steps if epoch_steps else float("nan")
        val_nll = _pool_nll(pool, model, config.batch_size, substream(config.seed, "val", epoch))
        log.add(epoch, batches_done, train_nll, val_nll, time.monotonic() - start_time)
        if val_nll < best_val:
            best_val = val_nll
            best_blocks = model.copy_blocks()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                log.stopping_reason = f"no validation improvement for {config.patience} epochs"
                break
    if not log.stopping_reason:
        log.stopping_reason = f"reached max_batches={config.max_batches}"
    model.load_blocks(best_blocks)
    return model, log


def grid_search(panel: Panel, hidden_candidates, embedding_candidates, config: TrainConfig):
    """Trains every (hidden units, embedding dim) candidate and ranks by
    held-out NLL, ties broken by fewer parameters.

    Returns (best config, results) where results rows are
    (hidden_units, embedding_dim, val_nll).
    """
    if not hidden_candidates or not embedding_candidates:
        raise ConfigError("grid search needs at least one candidate per axis")
    results = []
    ranked = []
    for hidden in hidden_candidates:
        for emb in embedding_candidates:
            candidate = replace(config, hidden_units=hidden, embedding_dim=emb)
            try:
                model, log = train(panel, candidate)
                val = log.best_val_nll
                params = model.parameter_count()
            except DivergenceError:
                val = float("inf")
                params = 0
            results.append((hidden, emb, val))
            ranked.append((val, params, hidden, emb, candidate))
    finite = [r for r in ranked if np.isfinite(r[0])]
    if not finite:
        raise ConfigError("grid search: every candidate diverged")
    finite.sort(key=lambda r: (r[0], r[1]))
    best = finite[0][4]
    return best, results
