"""Analytic patch-grid diffusion testbed.

Each patch of an (Hs x Ws) grid carries its own isotropic Gaussian-mixture
target. Because the forward process x_t = alpha(t) x_0 + sigma(t) eps keeps
Gaussian mixtures Gaussian, the time-t marginal, its score, and the
posterior mean of the clean state are all available in closed form. On top
of that oracle the module provides:

  * an ancestral stochastic reverse sampler (the testbed's "plain" step),
  * an Euler-Maruyama integrator for the velocity-form SDE that shares the
    same marginals (zero injected noise recovers the deterministic ODE),
  * a patch-additive verifier (weighted per-patch log-density at t = 0),
  * defect injection and synthetic attention generation so the mask
    pipeline can be exercised against known ground truth.

Every oracle evaluation increments an NFE counter on the predictor; batched
states of shape (..., dim) count one evaluation per leading element.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .attention import AttentionBundle, AttentionField, Grid, _as_grid

_LOG_2PI = math.log(2.0 * math.pi)
_TIME_TOL = 1e-12


@dataclass(frozen=True)
class CosineSchedule:
    """Variance-preserving schedule alpha(t) = cos(pi t / 2T), sigma = sin.

    alpha(0) = 1 and sigma(0) = 0 exactly; alpha(T) vanishes to floating
    point roundoff and sigma(T) = 1. alpha^2 + sigma^2 = 1 identically.
    """

    horizon: float
    n_steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError(f"schedule horizon must be positive, got {self.horizon}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be at least 1, got {self.n_steps}")

    def _phase(self, t: float) -> float:
        return 0.5 * math.pi * t / self.horizon

    def alpha(self, t: float) -> float:
        return math.cos(self._phase(t))

    def sigma(self, t: float) -> float:
        return math.sin(self._phase(t))

    def dalpha(self, t: float) -> float:
        return -0.5 * math.pi / self.horizon * math.sin(self._phase(t))

    def dsigma(self, t: float) -> float:
        return 0.5 * math.pi / self.horizon * math.cos(self._phase(t))

    def check_time(self, t: float) -> float:
        if not -_TIME_TOL <= t <= self.horizon + _TIME_TOL:
            raise ValueError(f"time {t} outside schedule range [0, {self.horizon}]")
        return min(max(t, 0.0), self.horizon)

    def step_times(self) -> np.ndarray:
        """Uniform sampling grid from the horizon down to 0."""
        return np.linspace(self.horizon, 0.0, self.n_steps + 1)


@dataclass(frozen=True)
class PatchWorld:
    """Independent per-patch Gaussian-mixture targets with a weighted verifier.

    weights[j, k], means[j, k, :], variances[j, k] describe component k of
    patch j; variances are isotropic per component. verifier_weights are
    non-negative and sum to 1 (uniform by default).
    """

    grid: Grid
    patch_dim: int
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    verifier_weights: np.ndarray

    def __post_init__(self):
        grid = _as_grid(self.grid)
        m = grid[0] * grid[1]
        d = int(self.patch_dim)
        if d < 1:
            raise ValueError(f"patch_dim must be at least 1, got {d}")
        weights = np.asarray(self.weights, dtype=float)
        means = np.asarray(self.means, dtype=float)
        variances = np.asarray(self.variances, dtype=float)
        if weights.ndim != 2 or weights.shape[0] != m:
            raise ValueError(f"weights must have shape ({m}, K), got {weights.shape}")
        k = weights.shape[1]
        if means.shape != (m, k, d):
            raise ValueError(f"means must have shape ({m}, {k}, {d}), got {means.shape}")
        if variances.shape != (m, k):
            raise ValueError(f"variances must have shape ({m}, {k}), got {variances.shape}")
        if np.any(weights < 0):
            raise ValueError("mixture weights must be non-negative")
        if np.any(np.abs(weights.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("mixture weights must sum to 1 within 1e-12 per patch")
        if np.any(variances <= 0):
            raise ValueError("mixture variances must be positive")
        vweights = np.asarray(self.verifier_weights, dtype=float)
        if vweights.shape != (m,):
            raise ValueError(f"verifier_weights must have shape ({m},), got {vweights.shape}")
        if np.any(vweights < 0) or abs(vweights.sum() - 1.0) > 1e-9:
            raise ValueError("verifier weights must be non-negative and sum to 1")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "patch_dim", d)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)
        object.__setattr__(self, "verifier_weights", vweights)

    @classmethod
    def uniform(cls, grid, patch_dim: int, components, verifier_weights=None) -> "PatchWorld":
        """Replicate one mixture spec over every patch.

        components: iterable of (weight, mean, variance); the mean may be a
        scalar (broadcast over the patch dimension) or a d-vector.
        """
        grid = _as_grid(grid)
        m = grid[0] * grid[1]
        d = int(patch_dim)
        comp = list(components)
        if not comp:
            raise ValueError("at least one mixture component is required")
        weights = np.array([c[0] for c in comp], dtype=float)
        means = np.array(
            [np.broadcast_to(np.asarray(c[1], dtype=float), (d,)) for c in comp]
        )
        variances = np.array([c[2] for c in comp], dtype=float)
        if verifier_weights is None:
            vw = np.full(m, 1.0 / m)
        else:
            vw = np.asarray(verifier_weights, dtype=float)
        return cls(
            grid=grid,
            patch_dim=d,
            weights=np.tile(weights, (m, 1)),
            means=np.tile(means, (m, 1, 1)),
            variances=np.tile(variances, (m, 1)),
            verifier_weights=vw,
        )

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def dim(self) -> int:
        return self.n_patches * self.patch_dim

    def patch_view(self, x: np.ndarray) -> np.ndarray:
        """Reshape (..., dim) coordinates into (..., n_patches, patch_dim)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"state has {x.shape[-1]} coordinates, world needs {self.dim}")
        return x.reshape(*x.shape[:-1], self.n_patches, self.patch_dim)

    def coordinate_mask(self, bits: np.ndarray) -> np.ndarray:
        """Broadcast per-patch bits over each patch's coordinates."""
        bits = np.asarray(bits)
        if bits.shape != (self.n_patches,):
            raise ValueError(f"mask must have one bit per patch ({self.n_patches})")
        return np.repeat(bits.astype(bool), self.patch_dim)


@dataclass(frozen=True)
class LatentState:
    """A state vector (optionally batched along leading axes) at time t."""

    x: np.ndarray
    t: float

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValueError("latent state contains non-finite entries")
        if not self.t >= -_TIME_TOL:
            raise ValueError(f"latent time must be non-negative, got {self.t}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "t", max(float(self.t), 0.0))


@dataclass(frozen=True)
class OracleEval:
    """One oracle evaluation: score of the time-t marginal, posterior mean
    of the clean state, and the equivalent noise prediction."""

    score: np.ndarray
    denoised: np.ndarray
    eps: np.ndarray


def _component_log_weights(world: PatchWorld) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(world.weights)


def _oracle_terms(world: PatchWorld, schedule: CosineSchedule, x: np.ndarray, t: float):
    """Shared responsibility computation for score / posterior mean / density.

    Component k of patch j at time t is N(alpha mu_jk, (alpha^2 s_jk^2 +
    sigma^2) I); responsibilities are formed in log space so small densities
    never underflow to zero before normalization.
    """
    a = schedule.alpha(t)
    s2 = schedule.sigma(t) ** 2
    xp = world.patch_view(x)[..., None, :]          # (..., M, 1, d)
    centered = xp - a * world.means                 # (..., M, K, d)
    var_t = a * a * world.variances + s2            # (M, K)
    sq = np.sum(centered * centered, axis=-1)       # (..., M, K)
    log_comp = (
        _component_log_weights(world)
        - 0.5 * world.patch_dim * (np.log(var_t) + _LOG_2PI)
        - 0.5 * sq / var_t
    )
    log_norm = logsumexp(log_comp, axis=-1)          # (..., M)
    resp = np.exp(log_comp - log_norm[..., None])    # (..., M, K)
    return a, var_t, centered, resp, log_norm


def log_density(world: PatchWorld, schedule: CosineSchedule, x: np.ndarray, t: float) -> np.ndarray:
    """Exact log-density of the time-t marginal (summed over patches)."""
    t = schedule.check_time(t)
    *_, log_norm = _oracle_terms(world, schedule, x, t)
    return log_norm.sum(axis=-1)


def gmm_score(world: PatchWorld, schedule: CosineSchedule, x: np.ndarray, t: float) -> np.ndarray:
    """Exact score of the time-t marginal, evaluated per patch independently."""
    t = schedule.check_time(t)
    _, var_t, centered, resp, _ = _oracle_terms(world, schedule, x, t)
    per_comp = -centered / var_t[..., None]
    score = np.sum(resp[..., None] * per_comp, axis=-2)
    return score.reshape(np.shape(x))


def posterior_mean(world: PatchWorld, schedule: CosineSchedule, x: np.ndarray, t: float) -> np.ndarray:
    """E[x_0 | x_t], formed per component so it stays stable even where
    alpha(t) is at roundoff level."""
    t = schedule.check_time(t)
    a, var_t, centered, resp, _ = _oracle_terms(world, schedule, x, t)
    gain = (a * world.variances / var_t)[..., None]  # (M, K, 1)
    per_comp = world.means + gain * centered
    mean = np.sum(resp[..., None] * per_comp, axis=-2)
    return mean.reshape(np.shape(x))


@dataclass
class NoisePredictor:
    """Closed-form noise oracle bound to a world and schedule.

    eps(x, t) = -sigma(t) * score(x, t). ``mode`` records which integrator
    family the predictor is meant for; both step functions accept either.
    The ``nfe`` counter increases by one per evaluated state (batched calls
    count the batch size), which is the compute unit for budget matching.
    """

    world: PatchWorld
    schedule: CosineSchedule
    mode: str = "diffusion-sde"
    nfe: int = field(default=0)

    _MODES = ("diffusion-sde", "flow-sde")

    def __post_init__(self):
        if self.mode not in self._MODES:
            raise ValueError(f"mode must be one of {self._MODES}, got {self.mode!r}")

    def _count(self, x: np.ndarray):
        x = np.asarray(x)
        self.nfe += int(np.prod(x.shape[:-1], dtype=int)) if x.ndim > 1 else 1

    def evaluate(self, x: np.ndarray, t: float) -> OracleEval:
        t = self.schedule.check_time(t)
        self._count(x)
        a, var_t, centered, resp, _ = _oracle_terms(self.world, self.schedule, x, t)
        per_score = -centered / var_t[..., None]
        score = np.sum(resp[..., None] * per_score, axis=-2).reshape(np.shape(x))
        gain = (a * self.world.variances / var_t)[..., None]
        per_mean = self.world.means + gain * centered
        denoised = np.sum(resp[..., None] * per_mean, axis=-2).reshape(np.shape(x))
        return OracleEval(score=score, denoised=denoised, eps=-self.schedule.sigma(t) * score)

    def eps(self, x: np.ndarray, t: float) -> np.ndarray:
        return self.evaluate(x, t).eps

    def score(self, x: np.ndarray, t: float) -> np.ndarray:
        return self.evaluate(x, t).score

    def reset_nfe(self):
        self.nfe = 0


def forward_noise(schedule: CosineSchedule, state: LatentState, t: float, z: np.ndarray) -> LatentState:
    """Corrupt a clean state to time t: x_t = alpha(t) x_0 + sigma(t) z."""
    if abs(state.t) > _TIME_TOL:
        raise ValueError(f"forward_noise expects a state at t=0, got t={state.t}")
    t = schedule.check_time(t)
    z = np.asarray(z, dtype=float)
    if z.shape != state.x.shape:
        raise ValueError(f"noise shape {z.shape} does not match state shape {state.x.shape}")
    return LatentState(x=schedule.alpha(t) * state.x + schedule.sigma(t) * z, t=t)


def _ancestral_coefficients(schedule: CosineSchedule, t: float, s: float):
    """Coefficients of the ancestral posterior q(x_s | x_t, x_0)."""
    a_t, s_t = schedule.alpha(t), schedule.sigma(t)
    a_s, s_s = schedule.alpha(s), schedule.sigma(s)
    ratio = a_t / a_s
    var_ts = max(s_t * s_t - ratio * ratio * s_s * s_s, 0.0)
    coef_x = ratio * (s_s * s_s) / (s_t * s_t)
    coef_x0 = a_s * var_ts / (s_t * s_t)
    noise_std = math.sqrt(var_ts * (s_s * s_s) / (s_t * s_t))
    return coef_x, coef_x0, noise_std


def _resolve_target_time(t: float, dt: float) -> float:
    if not dt > 0:
        raise ValueError(f"step size must be positive, got {dt}")
    if dt > t + _TIME_TOL:
        raise ValueError(f"step size {dt} exceeds current time {t}")
    s = t - dt
    return 0.0 if abs(s) < _TIME_TOL else s


def reverse_sde_step(predictor: NoisePredictor, state: LatentState, dt: float,
                     rng: np.random.Generator) -> LatentState:
    """One ancestral stochastic reverse step t -> t - dt (one NFE).

    The clean-state estimate comes from the oracle's posterior mean; at a
    target time of 0 the posterior noise vanishes, so the final step is
    deterministic given the oracle.
    """
    t = predictor.schedule.check_time(state.t)
    s = _resolve_target_time(t, dt)
    ev = predictor.evaluate(state.x, t)
    coef_x, coef_x0, noise_std = _ancestral_coefficients(predictor.schedule, t, s)
    z = rng.standard_normal(state.x.shape)
    x_next = coef_x * state.x + coef_x0 * ev.denoised + noise_std * z
    return LatentState(x=x_next, t=s)


def velocity(schedule: CosineSchedule, ev: OracleEval, t: float) -> np.ndarray:
    """Interpolant velocity d/dt E[alpha x_0 + sigma eps | x_t] under the
    bound schedule, assembled from one oracle evaluation."""
    return schedule.dalpha(t) * ev.denoised - schedule.dsigma(t) * schedule.sigma(t) * ev.score


def flow_sde_step(predictor: NoisePredictor, state: LatentState, dt: float,
                  sigma_inj, rng: np.random.Generator) -> LatentState:
    """Euler-Maruyama step of the velocity-form SDE, backward in time (one NFE).

    dx = (u_t - sigma_inj(t)^2 / 2 * score) dt + sigma_inj(t) dw. With
    sigma_inj = 0 this is exactly an Euler step of the deterministic flow.
    """
    t = predictor.schedule.check_time(state.t)
    s = _resolve_target_time(t, dt)
    ev = predictor.evaluate(state.x, t)
    u = velocity(predictor.schedule, ev, t)
    g = float(sigma_inj(t)) if callable(sigma_inj) else float(sigma_inj)
    if g < 0:
        raise ValueError(f"injected noise scale must be non-negative, got {g}")
    drift = u - 0.5 * g * g * ev.score
    x_next = state.x - dt * drift
    if g > 0:
        x_next = x_next + g * math.sqrt(dt) * rng.standard_normal(state.x.shape)
    return LatentState(x=x_next, t=s)


def sample_base(predictor: NoisePredictor, rng: np.random.Generator,
                shape=None) -> LatentState:
    """Draw x_T ~ N(0, I) and integrate to t = 0 with ancestral reverse steps.

    Consumes exactly n_steps evaluations per trajectory; ``shape`` adds
    leading batch axes.
    """
    dim = predictor.world.dim
    full_shape = (dim,) if shape is None else (*tuple(shape), dim)
    times = predictor.schedule.step_times()
    state = LatentState(x=rng.standard_normal(full_shape), t=float(times[0]))
    for t_cur, t_next in zip(times[:-1], times[1:]):
        state = reverse_sde_step(predictor, state, float(t_cur - t_next), rng)
    return state


def verifier_score(world: PatchWorld, state: LatentState) -> float | np.ndarray:
    """Weighted per-patch log-density of a clean state; higher is better."""
    if abs(state.t) > _TIME_TOL:
        raise ValueError(f"verifier expects a state at t=0, got t={state.t}")
    xp = world.patch_view(state.x)[..., None, :]
    centered = xp - world.means
    sq = np.sum(centered * centered, axis=-1)
    log_comp = (
        _component_log_weights(world)
        - 0.5 * world.patch_dim * (np.log(world.variances) + _LOG_2PI)
        - 0.5 * sq / world.variances
    )
    per_patch = logsumexp(log_comp, axis=-1)
    total = np.sum(world.verifier_weights * per_patch, axis=-1)
    return float(total) if np.ndim(total) == 0 else total


def inject_defects(world: PatchWorld, state: LatentState, count: int, magnitude: float,
                   rng: np.random.Generator) -> tuple[LatentState, np.ndarray]:
    """Displace ``count`` distinct patches by ``magnitude`` in uniformly
    random directions; returns the modified state and the sorted ground-truth
    defect index set."""
    if abs(state.t) > _TIME_TOL:
        raise ValueError(f"inject_defects expects a state at t=0, got t={state.t}")
    m = world.n_patches
    if not 1 <= count <= m:
        raise ValueError(f"defect count must lie in [1, {m}], got {count}")
    if state.x.ndim != 1:
        raise ValueError("inject_defects operates on a single (unbatched) state")
    chosen = np.sort(rng.choice(m, size=count, replace=False))
    directions = rng.standard_normal((count, world.patch_dim))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    directions /= norms
    x = state.x.copy()
    patches = x.reshape(m, world.patch_dim)
    patches[chosen] += magnitude * directions
    return LatentState(x=x, t=0.0), chosen


_QUERY_LOGIT_GAP = 2.0


def grid_query_features(grid) -> np.ndarray:
    """Constant-norm positional features whose inner products decay with
    grid distance.

    Raw coordinates make softmax(Q Q^T) rows depend on |q_j| rather than on
    distance (the centre row would be uniform), so each axis coordinate is
    embedded as a cos/sin pair instead. The common scale is chosen so the
    self-to-nearest-neighbour logit gap is at least ``_QUERY_LOGIT_GAP``,
    which keeps every row's self-weight above 1/2 on any grid: smoothing is
    local and a noiseless planted contrast always survives thresholding.
    """
    hs, ws = _as_grid(grid)
    omega_r = math.pi / (hs - 1) if hs > 1 else 0.0
    omega_c = math.pi / (ws - 1) if ws > 1 else 0.0
    gaps = [1.0 - math.cos(w) for w in (omega_r, omega_c) if w > 0.0]
    gap_scale = _QUERY_LOGIT_GAP / min(gaps) if gaps else 1.0
    # logits are <q_i, q_j>/sqrt(4) = (g^2/2)(cos dr + cos dc): g^2/2 = gap_scale
    g = math.sqrt(2.0 * gap_scale)
    rows, cols = np.divmod(np.arange(hs * ws), ws)
    return g * np.column_stack([
        np.cos(omega_r * rows), np.sin(omega_r * rows),
        np.cos(omega_c * cols), np.sin(omega_c * cols),
    ])


def synth_attention(world: PatchWorld, state: LatentState, true_set: np.ndarray,
                    gain_pos: float, gain_neg: float, noise_sd: float,
                    rng: np.random.Generator,
                    base_level: float = 1.0) -> tuple[AttentionBundle, np.ndarray]:
    """Synthesize an attention bundle whose contrast marks the defect set.

    The positive field loses ``gain_pos`` on defective patches, the negative
    field gains ``gain_neg`` there, and the origin field is flat; every field
    receives iid Gaussian noise of scale ``noise_sd`` (clamped at zero) and
    the positional queries receive the same noise scale, so noise_sd tunes
    the achievable mask precision/recall monotonically.
    """
    if noise_sd < 0:
        raise ValueError(f"noise_sd must be non-negative, got {noise_sd}")
    m = world.n_patches
    indicator = np.zeros(m)
    indicator[np.asarray(true_set, dtype=int)] = 1.0
    orig = base_level + noise_sd * rng.standard_normal(m)
    pos = base_level - gain_pos * indicator + noise_sd * rng.standard_normal(m)
    neg = base_level + gain_neg * indicator + noise_sd * rng.standard_normal(m)
    bundle = AttentionBundle(
        orig=AttentionField(values=np.maximum(orig, 0.0), grid=world.grid),
        pos=AttentionField(values=np.maximum(pos, 0.0), grid=world.grid),
        neg=AttentionField(values=np.maximum(neg, 0.0), grid=world.grid),
    )
    queries = grid_query_features(world.grid)
    if noise_sd > 0:
        queries = queries + noise_sd * rng.standard_normal(queries.shape)
    return bundle, queries
