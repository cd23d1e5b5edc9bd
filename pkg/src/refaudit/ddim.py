"""Cascaded DDIM sampling mathematics: noise schedules, the x0-prediction
step, conditional sampling, slab tiling for the 2.5D super-resolution stage,
and slab merging.

The denoiser predicts the clean image x0 at each step; the noise estimate is
recovered from it as eps = (x_t - sqrt(abar_t) x0) / sqrt(1 - abar_t) and the
step update is

    x_prev = sqrt(abar_prev) x0
             + sqrt(1 - abar_prev - sigma^2) eps + sigma z,

with sigma = eta sqrt((1-abar_prev)/(1-abar_t)) sqrt(1 - abar_t/abar_prev).
eta=0 gives deterministic trajectories. The sampler core operates on plain
arrays; geometry-carrying volumes enter only at the cascade boundary.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import ScheduleError
from .volume import (
    BinaryMask,
    Volume3D,
    downsample,
    require_same_geometry,
    upsample_trilinear,
)

# x0-predictor: (x_t, t, condition) -> x0 estimate, same shape as x_t.
Denoiser = Callable[[np.ndarray, int, Any], np.ndarray]


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step noise variances beta[1..T] and signal retentions
    alpha_bar[0..T] with alpha_bar[0] = 1 at the data end."""

    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        abar = np.asarray(self.alpha_bar, dtype=np.float64)
        if beta.ndim != 1 or len(beta) < 1:
            raise ValueError("beta must be a nonempty 1D array")
        if len(abar) != len(beta) + 1 or abar[0] != 1.0:
            raise ValueError("alpha_bar must have length T+1 with alpha_bar[0] == 1")
        if not ((beta > 0) & (beta < 1)).all():
            raise ValueError("beta values must lie in (0, 1)")
        if not (np.diff(abar) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")
        beta.setflags(write=False)
        abar.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", abar)

    @property
    def num_steps(self) -> int:
        return len(self.beta)

    def sigma(self, t: int, t_prev: int, eta: float) -> float:
        """DDIM noise scale for the jump t -> t_prev; 0 when eta = 0 and at
        the data end."""
        if not 0 <= t_prev < t <= self.num_steps:
            raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
        if eta == 0.0:
            return 0.0
        a, q = self.alpha_bar[t], self.alpha_bar[t_prev]
        return float(eta * np.sqrt((1.0 - q) / (1.0 - a)) * np.sqrt(1.0 - a / q))


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule with alpha_bar by cumulative product."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return DiffusionSchedule(beta=beta, alpha_bar=alpha_bar)


def uniform_steps(T: int, n: int) -> list:
    """Uniformly spaced sampling subsequence: n jumps from T down to 0."""
    if not 1 <= n <= T:
        raise ValueError(f"need 1 <= n <= T, got n={n}, T={T}")
    seq = sorted({int(round(v)) for v in np.linspace(T, 0, n + 1)}, reverse=True)
    return seq


def ddim_step(x_t, t: int, t_prev: int, x0_pred, schedule: DiffusionSchedule,
              eta: float = 0.0, rng=None):
    """One x0-parameterized DDIM update from step t to t_prev."""
    if not 0 <= t_prev < t:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_pred = np.asarray(x0_pred, dtype=np.float64)
    if x0_pred.shape != x_t.shape:
        raise ValueError(f"x0_pred shape {x0_pred.shape} != x_t shape {x_t.shape}")
    a = schedule.alpha_bar[t]
    q = schedule.alpha_bar[t_prev]
    if a >= 1.0:
        raise ScheduleError(f"alpha_bar[{t}] = {a} at t > 0")
    sigma = schedule.sigma(t, t_prev, eta)
    eps = (x_t - np.sqrt(a) * x0_pred) / np.sqrt(1.0 - a)
    out = np.sqrt(q) * x0_pred + np.sqrt(max(1.0 - q - sigma * sigma, 0.0)) * eps
    if sigma > 0.0:
        if rng is None:
            raise ValueError("eta > 0 requires an rng")
        out = out + sigma * rng.standard_normal(x_t.shape)
    return out


def sample(denoiser: Denoiser, condition, schedule: DiffusionSchedule, steps,
           eta: float = 0.0, rng=None, shape=None, x_init=None) -> np.ndarray:
    """Run the DDIM chain along ``steps`` (strictly decreasing, ending at the
    data end 0), starting from standard normal noise (or ``x_init``)."""
    steps = [int(s) for s in steps]
    if len(steps) < 2:
        raise ValueError("step subsequence must contain at least one jump")
    if any(b >= a for a, b in zip(steps, steps[1:])):
        raise ValueError(f"step subsequence must be strictly decreasing: {steps}")
    if steps[-1] != 0:
        raise ValueError(f"step subsequence must end at the data end (0): {steps}")
    if steps[0] > schedule.num_steps:
        raise ValueError(f"first step {steps[0]} exceeds schedule T={schedule.num_steps}")

    if x_init is not None:
        x = np.asarray(x_init, dtype=np.float64)
    else:
        if rng is None or shape is None:
            raise ValueError("sampling from noise requires rng and shape")
        x = rng.standard_normal(shape)
    for t, t_prev in zip(steps[:-1], steps[1:]):
        x0_pred = np.asarray(denoiser(x, t, condition), dtype=np.float64)
        x = ddim_step(x, t, t_prev, x0_pred, schedule, eta=eta, rng=rng)
    return x


# ---------------------------------------------------------------------------
# Slab tiling and merging for the 2.5D stage


@dataclass(frozen=True)
class SlabSpec:
    """Axial slab geometry of the super-resolution stage."""

    size: int = 8
    overlap: int = 4

    def __post_init__(self):
        if not 0 < self.overlap < self.size:
            raise ValueError(f"need 0 < overlap < size, got {self}")

    @property
    def stride(self) -> int:
        return self.size - self.overlap


def stage2_slabs(nz: int, spec: SlabSpec = SlabSpec()) -> list:
    """Half-open slab ranges covering [0, nz): starts at multiples of the
    stride, with the last slab clamped to end at nz.

    When clamping would leave three slabs over one slice (possible whenever
    overlap >= size/2), the last regular slab is dropped; every slice stays
    covered and interior multiplicity stays <= 2 for the canonical
    size=2*overlap geometry.
    """
    if nz < spec.size:
        raise ValueError(f"nz={nz} smaller than slab size {spec.size}")
    starts = list(range(0, nz - spec.size + 1, spec.stride))
    if starts[-1] + spec.size != nz:
        clamped = nz - spec.size
        if len(starts) >= 2 and 2 * spec.stride <= spec.size:
            starts = starts[:-1]
        starts.append(clamped)
    return [(s, s + spec.size) for s in starts]


def merge_slabs(slabs, ranges, nz=None) -> np.ndarray:
    """Merge overlapping axial slabs into a full array.

    Within a k-slice overlap the incoming slab ramps with weights
    1/(k+1) ... k/(k+1) while the outgoing slab carries the complement, so
    every slice's weights sum to 1; non-overlap slices are copied. The result
    does not depend on slab processing order.
    """
    slabs = [np.asarray(s, dtype=np.float64) for s in slabs]
    ranges = [(int(a), int(b)) for a, b in ranges]
    if len(slabs) != len(ranges) or not slabs:
        raise ValueError("slabs and ranges must be nonempty and parallel")
    order = sorted(range(len(ranges)), key=lambda i: ranges[i])
    slabs = [slabs[i] for i in order]
    ranges = [ranges[i] for i in order]

    lead = slabs[0].shape[:-1]
    for s, (z0, z1) in zip(slabs, ranges):
        if s.shape[:-1] != lead or s.shape[-1] != z1 - z0:
            raise ValueError(f"slab shape {s.shape} inconsistent with range ({z0}, {z1})")
    if nz is None:
        nz = ranges[-1][1]
    for i in range(1, len(ranges)):
        if ranges[i][0] < ranges[i - 1][0] + 1 or ranges[i][0] > ranges[i - 1][1]:
            raise ValueError(f"slab ranges neither ordered nor contiguous: {ranges}")
        if i >= 2 and ranges[i][0] < ranges[i - 2][1]:
            raise ValueError(f"slice covered by three slabs: {ranges}")
    if ranges[0][0] != 0 or ranges[-1][1] != nz:
        raise ValueError(f"slab ranges do not tile [0, {nz}): {ranges}")

    out = np.zeros(lead + (nz,), dtype=np.float64)
    for i, (s, (z0, z1)) in enumerate(zip(slabs, ranges)):
        w = np.ones(z1 - z0)
        if i > 0:
            k = ranges[i - 1][1] - z0
            if k > 0:
                w[:k] = np.arange(1, k + 1) / (k + 1)
        if i < len(ranges) - 1:
            k = z1 - ranges[i + 1][0]
            if k > 0:
                w[-k:] = np.arange(k, 0, -1) / (k + 1)
        out[..., z0:z1] += s * w
    return out


# ---------------------------------------------------------------------------
# Two-stage cascade


@dataclass(frozen=True)
class CascadeConfig:
    """Sampler configuration; serializes into every run manifest."""

    t_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 50
    eta: float = 0.0
    downsample_factor: tuple = (2, 2, 2)
    slab: SlabSpec = field(default_factory=SlabSpec)
    seed: int = 0

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["downsample_factor"] = list(self.downsample_factor)
        return d


def _stage_rng(seed: int, stage: int, index: int = 0):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stage, index)))


def cascade_reface(
    defaced: Volume3D,
    removed: BinaryMask,
    stage1: Denoiser,
    stage2: Denoiser,
    config: CascadeConfig = CascadeConfig(),
) -> Volume3D:
    """Two-stage refacing: a 3D low-resolution imputation pass conditioned on
    the downsampled defaced image, then slab-wise super-resolution
    conditioned on the defaced image and the upsampled stage-1 output.

    Slabs use independent RNG streams derived from (seed, slab index), so the
    merged result is invariant to slab completion order. The final composite
    preserves observed voxels: generated content replaces the input only
    inside ``removed``.
    """
    require_same_geometry(defaced, removed, "defaced volume and removed mask")
    schedule = make_schedule(config.t_steps, config.beta_start, config.beta_end)
    steps = uniform_steps(config.t_steps, config.sample_steps)

    low = downsample(defaced, config.downsample_factor)
    cond1 = {"defaced_lowres": low, "defaced": defaced, "removed": removed}
    x_low = sample(
        stage1, cond1, schedule, steps, eta=config.eta,
        rng=_stage_rng(config.seed, 0), shape=low.dims,
    )
    low_refaced = low.with_data(x_low)
    up = upsample_trilinear(low_refaced, config.downsample_factor)
    up_data = up.data[: defaced.dims[0], : defaced.dims[1], : defaced.dims[2]]

    nz = defaced.dims[2]
    ranges = stage2_slabs(nz, config.slab)
    slab_out = []
    for i, (z0, z1) in enumerate(ranges):
        cond2 = {
            "defaced": defaced.data[:, :, z0:z1],
            "upsampled": up_data[:, :, z0:z1],
            "slab_range": (z0, z1),
            "defaced_vol": defaced,
            "removed": removed,
        }
        slab_out.append(
            sample(
                stage2, cond2, schedule, steps, eta=config.eta,
                rng=_stage_rng(config.seed, 1, i),
                shape=(defaced.dims[0], defaced.dims[1], z1 - z0),
            )
        )
    merged = merge_slabs(slab_out, ranges, nz=nz)
    composite = np.where(removed.data, merged, defaced.data)
    return defaced.with_data(composite)
