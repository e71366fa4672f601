"""Deterministic DDIM reverse sampling over pluggable denoisers.

The schedule follows the usual linear-beta discrete diffusion: 1000
training steps with beta from 1e-4 to 0.02, thinned to (by default) 50
inference timesteps. Each reverse step reconstructs the clean-signal
estimate from the predicted noise and re-noises it at the previous
timestep; with the deterministic update used here the trajectory is a
pure function of the initial noise and the denoiser.

Denoisers implement predict(z, t, cond, session=None, directive=None).
Besides remote backends (see wire.py) this module ships three local ones
used for verification: two with closed-form posterior noise (point-mass
and isotropic-Gaussian data distributions) and a toy pixel-space denoiser
that exercises the full attention-constraint path end to end.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .attention import AttentionDirective, AttentionRecord, cross_attention
from .errors import BackendError, ConfigError
from .guidance import Condition, GuidanceScales, compose, required_conditions

T_TRAIN = 1000
T_INFER = 50
BETA_START = 1e-4
BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal levels plus the thinned inference timesteps.

    alphas_bar has T_train + 1 entries indexed by timestep, with
    alphas_bar[0] == 1 (no noise at t=0). timesteps is strictly
    decreasing and ends above 0; the sampler appends the final hop to 0.
    """

    alphas_bar: np.ndarray
    timesteps: tuple[int, ...]

    @property
    def t_train(self) -> int:
        return len(self.alphas_bar) - 1

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.t_train:
            raise ConfigError(f"timestep {t} outside [0, {self.t_train}]")
        return float(self.alphas_bar[t])

    def step_pairs(self) -> list[tuple[int, int]]:
        """Consecutive (t, t_prev) hops, ending at (timesteps[-1], 0)."""
        nxt = self.timesteps[1:] + (0,)
        return list(zip(self.timesteps, nxt))


def make_schedule(
    t_train: int = T_TRAIN,
    t_infer: int = T_INFER,
    beta_start: float = BETA_START,
    beta_end: float = BETA_END,
) -> NoiseSchedule:
    if t_train < 1:
        raise ConfigError(f"t_train must be >= 1, got {t_train}")
    if not 1 <= t_infer <= t_train:
        raise ConfigError(f"t_infer must be in [1, {t_train}], got {t_infer}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, t_train)
    alphas_bar = np.empty(t_train + 1, dtype=np.float64)
    alphas_bar[0] = 1.0
    alphas_bar[1:] = np.cumprod(1.0 - betas)
    stride = t_train // t_infer
    timesteps = tuple(t_train - k * stride for k in range(t_infer))
    return NoiseSchedule(alphas_bar, timesteps)


def ddim_step(
    z: np.ndarray,
    eps: np.ndarray,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """One deterministic reverse hop from timestep t to t_prev."""
    if not 0 <= t_prev < t:
        raise ConfigError(f"need 0 <= t_prev < t, got t={t} t_prev={t_prev}")
    z = np.asarray(z, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z.shape != eps.shape:
        raise ConfigError(f"z shape {z.shape} != eps shape {eps.shape}")
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    x0 = (z - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps


@runtime_checkable
class Denoiser(Protocol):
    def predict(
        self,
        z: np.ndarray,
        t: int,
        cond: Condition,
        session=None,
        directive: AttentionDirective | None = None,
    ) -> np.ndarray: ...


def sample(
    init_noise: np.ndarray,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    scales: GuidanceScales = GuidanceScales(),
    directive: AttentionDirective | None = None,
    session=None,
    dump_dir: str | Path | None = None,
) -> np.ndarray:
    """Run the full reverse trajectory and return the final clean latent.

    Per step, predictions are requested only for conditions with nonzero
    blend weight; the directive is forwarded only on the edge-conditioned
    calls, where the constraint lives. With a single active condition the
    blend is skipped entirely, so that prediction passes through
    bit-identical. Set dump_dir to write each step's latent as raw
    little-endian float32 next to a small JSON sidecar.
    """
    z = np.array(init_noise, dtype=np.float64, copy=True)
    conds = sorted(required_conditions(scales), key=list(Condition).index)
    if not conds:
        raise ConfigError("no active guidance conditions")
    if dump_dir is not None:
        dump_dir = Path(dump_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)

    for step, (t, t_prev) in enumerate(schedule.step_pairs()):
        preds: dict[Condition, np.ndarray] = {}
        for cond in conds:
            fwd = directive if cond in (Condition.EDGE_TEXT, Condition.PIP_TEXT) else None
            try:
                eps = denoiser.predict(z, t, cond, session=session, directive=fwd)
            except ConfigError:
                raise
            except Exception as e:
                raise BackendError(
                    f"denoiser failed at step {step} (t={t}, cond={cond.value}): {e}"
                ) from e
            eps = np.asarray(eps, dtype=np.float64)
            if eps.shape != z.shape:
                raise BackendError(
                    f"denoiser returned shape {eps.shape} for latent {z.shape} "
                    f"at step {step} (t={t}, cond={cond.value})"
                )
            preds[cond] = eps
        if len(conds) == 1:
            eps_mix = preds[conds[0]]
        else:
            eps_mix = compose(
                preds.get(Condition.UNCOND),
                preds.get(Condition.TEXT_ONLY),
                preds.get(Condition.EDGE_TEXT),
                preds.get(Condition.PIP_TEXT),
                scales,
            )
        z = ddim_step(z, eps_mix, t, t_prev, schedule)
        if dump_dir is not None:
            _dump_latent(dump_dir, step, t_prev, z)
    return z


def _dump_latent(dump_dir: Path, step: int, t: int, z: np.ndarray) -> None:
    stem = dump_dir / f"step_{step:03d}"
    z.astype("<f4").tofile(stem.with_suffix(".f32"))
    stem.with_suffix(".json").write_text(
        json.dumps({"step": step, "t": t, "shape": list(z.shape), "dtype": "f32"})
    )


class PointMassDenoiser:
    """Exact posterior noise for data concentrated at a single x0.

    If all probability sits at x0, the noise that produced z at level t is
    (z - sqrt(ab) * x0) / sqrt(1 - ab), so the deterministic trajectory
    must land on x0 no matter where it starts. Used to pin the sampler.
    """

    def __init__(self, x0: np.ndarray, schedule: NoiseSchedule):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.schedule = schedule

    def predict(self, z, t, cond, session=None, directive=None):
        ab = self.schedule.alpha_bar(t)
        if ab >= 1.0:
            raise ConfigError(f"no noise to predict at t={t}")
        z = np.asarray(z, dtype=np.float64)
        if z.shape != self.x0.shape:
            raise ConfigError(f"latent shape {z.shape} != target shape {self.x0.shape}")
        return (z - math.sqrt(ab) * self.x0) / math.sqrt(1.0 - ab)


class GaussianAnalyticDenoiser:
    """Exact posterior mean noise for an isotropic Gaussian data law.

    With x0 ~ N(mu, sigma^2 I), the marginal of z at level t is
    N(sqrt(ab) mu, (ab sigma^2 + 1 - ab) I) and the posterior mean of the
    injected noise given z is

        E[eps | z] = sqrt(1 - ab) * (z - sqrt(ab) mu) / (ab sigma^2 + 1 - ab).

    Sampling with this oracle should land in the data law's typical set:
    the output's mean tracks mu and its spread tracks sigma.
    """

    def __init__(self, mu: np.ndarray, sigma: float, schedule: NoiseSchedule):
        if sigma < 0:
            raise ConfigError(f"sigma must be non-negative, got {sigma}")
        self.mu = np.asarray(mu, dtype=np.float64)
        self.sigma = float(sigma)
        self.schedule = schedule

    def predict(self, z, t, cond, session=None, directive=None):
        ab = self.schedule.alpha_bar(t)
        if ab >= 1.0:
            raise ConfigError(f"no noise to predict at t={t}")
        z = np.asarray(z, dtype=np.float64)
        var = ab * self.sigma * self.sigma + (1.0 - ab)
        return math.sqrt(1.0 - ab) * (z - math.sqrt(ab) * self.mu) / var


class ToyGlyphDenoiser:
    """Pixel-space denoiser that paints the sketch where attention allows.

    It runs a real constrained cross-attention: every spatial position
    queries a fixed focus token, the directive scales and masks that
    token's column, and the clamped column becomes the paint mask m. The
    clean-signal target is background outside m and the sketch field
    (ink -1, paper +1) inside; the positive-image-prompt condition also
    paints the bbox outline band. Unconditional and text-only predictions
    target plain background. The predicted noise is then the point-mass
    formula toward that target, so the sampler converges onto it exactly
    and every directive knob is observable in the output.
    """

    PERIMETER_WEIGHT = 1.0

    def __init__(
        self,
        sketch: np.ndarray,
        schedule: NoiseSchedule,
        token_count: int,
        focus_token: int | None,
        perimeter_band: np.ndarray | None = None,
        background: float = 0.0,
        constraint_enabled: bool = True,
        record_attention: bool = True,
    ):
        sketch = np.asarray(sketch)
        if sketch.ndim != 2:
            raise ConfigError(f"sketch must be 2-D, got shape {sketch.shape}")
        if token_count < 1:
            raise ConfigError(f"token_count must be >= 1, got {token_count}")
        if focus_token is not None and not 0 <= focus_token < token_count:
            raise ConfigError(f"focus token {focus_token} out of range for {token_count} tokens")
        self.h, self.w = sketch.shape
        self.field = np.where(sketch == 0, -1.0, 1.0)
        self.schedule = schedule
        self.token_count = token_count
        self.focus_token = focus_token
        self.background = float(background)
        self.constraint_enabled = constraint_enabled
        self.record_attention = record_attention
        self.attention_records: list[AttentionRecord] = []
        if perimeter_band is not None:
            perimeter_band = np.asarray(perimeter_band)
            if perimeter_band.shape != sketch.shape:
                raise ConfigError("perimeter band shape differs from sketch")
            perimeter_band = (perimeter_band != 0).astype(np.float64)
        self.perimeter_band = perimeter_band

        n = self.h * self.w
        # Every position asks for the focus token with logit 8, which the
        # softmax turns into ~1 before constraining; keys and values are
        # one-hot so the map is directly readable.
        self.queries = np.zeros((n, token_count), dtype=np.float64)
        if focus_token is not None:
            self.queries[:, focus_token] = 8.0 * math.sqrt(token_count)
        self.keys = np.eye(token_count, dtype=np.float64)
        self.values = np.eye(token_count, dtype=np.float64)
        self._mask_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def _attention(self, directive: AttentionDirective | None) -> tuple[np.ndarray, np.ndarray]:
        """Constrained map and clamped paint mask, cached per directive.

        The toy map does not depend on z or t, so per-step records can
        share one array instead of 50 copies of a canvas-sized map.
        """
        key = id(directive)
        if key not in self._mask_cache:
            _, amap = cross_attention(
                self.queries,
                self.keys,
                self.values,
                directive=directive,
                layer_hw=(self.h, self.w),
            )
            m = np.clip(amap[:, self.focus_token].reshape(self.h, self.w), 0.0, 1.0)
            # Hold the directive itself so its id cannot be recycled.
            self._mask_cache[key] = (directive, amap, m)
        _, amap, m = self._mask_cache[key]
        return amap, m

    def _paint_mask(self, directive: AttentionDirective | None, t: int, record: bool) -> np.ndarray:
        if self.focus_token is None:
            return np.zeros((self.h, self.w), dtype=np.float64)
        amap, m = self._attention(directive)
        if record:
            self.attention_records.append(AttentionRecord("toy", t, self.h, self.w, amap))
        return m

    def predict(self, z, t, cond, session=None, directive=None):
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 3 or z.shape[1:] != (self.h, self.w):
            raise ConfigError(
                f"latent shape {z.shape} does not match canvas {self.h}x{self.w}"
            )
        cond = Condition(cond)
        if cond in (Condition.UNCOND, Condition.TEXT_ONLY):
            x0_field = np.full((self.h, self.w), self.background)
        else:
            if self.constraint_enabled and directive is None:
                raise ConfigError(
                    f"constraint enabled but no directive given for {cond.value}"
                )
            record = self.record_attention and cond == Condition.EDGE_TEXT
            m = self._paint_mask(directive, t, record)
            if cond == Condition.PIP_TEXT and self.perimeter_band is not None:
                m = np.maximum(m, self.PERIMETER_WEIGHT * self.perimeter_band)
            x0_field = self.background * (1.0 - m) + m * self.field
        x0 = np.broadcast_to(x0_field, z.shape)
        ab = self.schedule.alpha_bar(t)
        if ab >= 1.0:
            raise ConfigError(f"no noise to predict at t={t}")
        return (z - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
