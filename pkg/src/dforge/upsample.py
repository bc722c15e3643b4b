"""Per-epoch artificial training states on the unsampled instants.

Sparse ground-truth snapshots are linearly interpolated across gaps and
perturbed with a zero-mean Gaussian whose standard deviation scales with
the local interpolant magnitude, so components that are exactly zero
(for example constrained boundary values) stay exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CoverageError
from .multifidelity import DiscrepancyDataset

__all__ = [
    "UpsampleConfig",
    "linear_interpolant",
    "sample_prior",
    "build_upsampled_epoch",
]


@dataclass(frozen=True)
class UpsampleConfig:
    """Settings for artificial-state generation.

    ``alpha`` scales the Gaussian prior: by default the standard deviation
    of component i is alpha * |interpolant_i|. With ``noise_as_variance``
    the same product is treated as the variance instead, which is the
    other defensible reading of the prior definition.
    """

    alpha: float
    seed: int = 0
    noise_as_variance: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be nonnegative, got {self.alpha}")


def linear_interpolant(d0, d1, t0, t1, t) -> np.ndarray:
    """Componentwise linear interpolation between two anchor states.

    Evaluates (d0*t1 - d1*t0)/(t1 - t0) + t*(d1 - d0)/(t1 - t0); the
    endpoints are returned exactly to avoid roundoff there.
    """
    if not t1 > t0:
        raise ConfigError(f"need t1 > t0, got t0={t0}, t1={t1}")
    if t < t0 or t > t1:
        raise ConfigError(f"t={t} outside the anchor interval [{t0}, {t1}]")
    d0 = np.asarray(d0, dtype=np.float64)
    d1 = np.asarray(d1, dtype=np.float64)
    if t == t0:
        return d0.copy()
    if t == t1:
        return d1.copy()
    span = t1 - t0
    return (d0 * t1 - d1 * t0) / span + t * (d1 - d0) / span


def sample_prior(dbar, alpha, rng, noise_as_variance=False) -> np.ndarray:
    """Draw one artificial state around the interpolant ``dbar``.

    Component i gets independent Gaussian noise with standard deviation
    alpha * |dbar_i| (or sqrt(alpha * |dbar_i|) under the variance
    reading). Components with dbar_i == 0 come back exactly zero, and
    alpha == 0 returns the interpolant unchanged without consuming
    random numbers.
    """
    if alpha < 0:
        raise ConfigError(f"alpha must be nonnegative, got {alpha}")
    dbar = np.asarray(dbar, dtype=np.float64)
    if alpha == 0.0:
        return dbar.copy()
    mag = np.abs(dbar)
    sigma = np.sqrt(alpha * mag) if noise_as_variance else alpha * mag
    return dbar + sigma * rng.standard_normal(dbar.shape)


def _instant_generator(root: np.random.SeedSequence, instant: int):
    child = np.random.SeedSequence(
        entropy=root.entropy, spawn_key=tuple(root.spawn_key) + (int(instant),)
    )
    return np.random.default_rng(child)


def build_upsampled_epoch(dataset: DiscrepancyDataset, cfg: UpsampleConfig,
                          rng: np.random.SeedSequence) -> dict:
    """Fresh artificial states for every unsampled instant.

    Returns {grid index: state}. Each instant draws from its own
    substream of ``rng`` (a SeedSequence), keyed by the instant index, so
    the result is identical no matter how the loop is scheduled; distinct
    epoch SeedSequences give fresh draws. Ground-truth snapshots are
    never touched. Every unsampled index must lie strictly inside the
    sampled hull.
    """
    s = dataset.sample_indices
    t_up = dataset.t_up
    if t_up.size == 0:
        return {}
    if s.size < 2:
        raise CoverageError("need at least 2 ground-truth snapshots to interpolate")
    if t_up.min() < s[0] or t_up.max() > s[-1]:
        raise CoverageError(
            f"unsampled indices {t_up.min()}..{t_up.max()} extend beyond the "
            f"sampled hull {s[0]}..{s[-1]}"
        )
    times = dataset.lofi.grid.instants
    out = {}
    for k in t_up:
        pos = int(np.searchsorted(s, k))
        k0, k1 = s[pos - 1], s[pos]
        dbar = linear_interpolant(
            dataset.deltas[pos - 1], dataset.deltas[pos],
            times[k0], times[k1], times[k],
        )
        if cfg.alpha == 0.0:
            out[int(k)] = dbar
        else:
            gen = _instant_generator(rng, int(k))
            out[int(k)] = sample_prior(dbar, cfg.alpha, gen, cfg.noise_as_variance)
    return out
