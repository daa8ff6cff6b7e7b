"""Deterministic random streams and the samplers built on them.

Every piece of randomness in the engine flows from one integer seed, split
into named substreams so that unrelated consumers (weight init, window
draws, each forecast sample path, ...) never share state. A substream is
identified by a path of strings/ints hashed into a PCG64 spawn key, so
adding paths never reshuffles existing ones.

Distribution transforms are implemented here rather than taken from
numpy's Generator methods: normals via Box-Muller, Gamma via the
Marsaglia-Tsang squeeze (with the shape<1 boost), Poisson via inversion
below lambda=10 and Hormann's PTRS transformed rejection above, and the
negative binomial as the Gamma-Poisson mixture.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

__all__ = ["Stream", "substream", "derive_seed"]

_TWO_PI = 2.0 * math.pi


def _path_key(path):
    key = []
    for part in path:
        if isinstance(part, (int, np.integer)):
            key.append(int(part) & 0xFFFFFFFF)
            key.append((int(part) >> 32) & 0xFFFFFFFF)
        else:
            digest = hashlib.sha256(str(part).encode("utf-8")).digest()
            key.append(int.from_bytes(digest[:4], "little"))
            key.append(int.from_bytes(digest[4:8], "little"))
    return tuple(key)


def substream(seed: int, *path) -> "Stream":
    """Derive the named substream of `seed` identified by `path`."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_path_key(path))
    return Stream(ss)


def derive_seed(seed: int, *path) -> int:
    """A new integer seed deterministically derived from (seed, path).

    Lets one seed fan out into independent whole seed spaces (e.g. one
    per rolling-backtest window) without colliding substream names.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_path_key(path))
    lo, hi = ss.generate_state(2)
    return int(lo) | (int(hi) << 32)


class Stream:
    """One deterministic random stream."""

    def __init__(self, seed_sequence: np.random.SeedSequence):
        self._gen = np.random.Generator(np.random.PCG64(seed_sequence))

    # -- uniforms ----------------------------------------------------------

    def uniform(self) -> float:
        """One double in [0, 1)."""
        return float(self._gen.random())

    def uniforms(self, n: int) -> np.ndarray:
        return self._gen.random(n)

    def _uniform_pos(self) -> float:
        # In (0, 1]; safe as a log argument.
        return 1.0 - float(self._gen.random())

    def choice_weighted(self, cumulative_weights: np.ndarray) -> int:
        """Index drawn with probability proportional to the weight steps.

        `cumulative_weights` is the inclusive cumulative sum of positive
        weights; the last entry is the total.
        """
        u = self.uniform() * cumulative_weights[-1]
        return int(np.searchsorted(cumulative_weights, u, side="right"))

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return min(int(self.uniform() * n), n - 1)

    def permutation(self, n: int) -> np.ndarray:
        # Fisher-Yates driven by this stream's uniforms.
        out = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    # -- normals (Box-Muller) ----------------------------------------------

    def normal(self) -> float:
        r = math.sqrt(-2.0 * math.log(self._uniform_pos()))
        return r * math.cos(_TWO_PI * float(self._gen.random()))

    def normals(self, n: int) -> np.ndarray:
        u1 = 1.0 - self._gen.random(n)
        u2 = self._gen.random(n)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)

    def gaussian(self, mu: float, sigma: float) -> float:
        return mu + sigma * self.normal()

    # -- gamma (Marsaglia-Tsang) ---------------------------------------------

    def gamma(self, shape: float, scale: float = 1.0) -> float:
        if shape <= 0.0 or scale <= 0.0:
            raise ValueError("gamma requires shape > 0 and scale > 0")
        if shape < 1.0:
            # Boost: Gamma(a) = Gamma(a+1) * U^(1/a).
            boost = math.exp(math.log(self._uniform_pos()) / shape)
            return self._gamma_ge1(shape + 1.0) * boost * scale
        return self._gamma_ge1(shape) * scale

    def _gamma_ge1(self, shape: float) -> float:
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = self._uniform_pos()
            x2 = x * x
            if u < 1.0 - 0.0331 * x2 * x2:
                return d * v
            if math.log(u) < 0.5 * x2 + d * (1.0 - v + math.log(v)):
                return d * v

    # -- poisson -------------------------------------------------------------

    def poisson(self, lam: float) -> int:
        if lam < 0.0 or not math.isfinite(lam):
            raise ValueError("poisson requires finite lambda >= 0")
        if lam == 0.0:
            return 0
        if lam < 10.0:
            return self._poisson_inversion(lam)
        return self._poisson_ptrs(lam)

    def _poisson_inversion(self, lam: float) -> int:
        p = math.exp(-lam)
        s = p
        u = self.uniform()
        k = 0
        while u > s:
            k += 1
            p *= lam / k
            s += p
        return k

    def _poisson_ptrs(self, lam: float) -> int:
        # Hormann's transformed rejection with squeeze (PTRS), lambda >= 10.
        loglam = math.log(lam)
        b = 0.931 + 2.53 * math.sqrt(lam)
        a = -0.059 + 0.02483 * b
        invalpha = 1.1239 + 1.1328 / (b - 3.4)
        vr = 0.9277 - 3.6224 / (b - 2.0)
        while True:
            u = self.uniform() - 0.5
            v = self._uniform_pos()
            us = 0.5 - abs(u)
            k = math.floor((2.0 * a / us + b) * u + lam + 0.43)
            if us >= 0.07 and v <= vr:
                return int(k)
            if k < 0 or (us < 0.013 and v > us):
                continue
            if math.log(v) + math.log(invalpha) - math.log(a / (us * us) + b) <= (
                k * loglam - lam - math.lgamma(k + 1.0)
            ):
                return int(k)

    # -- negative binomial -----------------------------------------------------

    def neg_binomial(self, mu: float, alpha: float) -> int:
        """Gamma-Poisson mixture with mean mu and variance mu + mu^2 * alpha."""
        if mu <= 0.0 or alpha <= 0.0:
            raise ValueError("neg_binomial requires mu > 0 and alpha > 0")
        lam = self.gamma(1.0 / alpha, scale=alpha * mu)
        return self.poisson(lam)
