"""Guided reverse sampling: steer each step with a second, degraded forward pass.

Every guidance method here shares one recipe.  At each solver step the model
is evaluated twice: once normally (the positive prediction) and once under
some degradation (the negative prediction).  The combined prediction

    combined = positive + gamma * (positive - negative)

extrapolates away from whatever the degradation kept, so the sampler is
pushed toward what the degradation destroyed.  Methods differ only in the
negative pass:

* cfg: the model is re-run with the null class instead of the condition
  (requires a model trained with label dropout),
* tpg: token tensors entering a set of blocks are rewritten by seeded
  norm-preserving perturbations (shuffle by default),
* pag: post-softmax attention in those blocks is replaced by the identity,
* seg: post-softmax attention rows are smeared by a Gaussian.

With gamma = 0 the combination collapses to the positive prediction, and
because solver noise is keyed by (run seed, timestep) rather than drawn from
a shared advancing stream, a gamma = 0 guided run reproduces the unguided
trajectory bit for bit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .denoiser import AttentionBlur, AttentionIdentity, Denoiser, HookPoint, HookSite, TokenPerturb
from .diffusion import NoiseSchedule, ddim_step, ddpm_jump, timestep_grid
from .errors import InvalidConfig, ShapeMismatch, UnsupportedMethod, UsageError
from .perturb import PerturbKind, PerturbOp
from .rng import SeededRng


class GuidanceMethod(str, Enum):
    NONE = "none"
    CFG = "cfg"
    TPG = "tpg"
    PAG = "pag"
    SEG = "seg"


DEFAULT_GAMMA = {
    GuidanceMethod.NONE: 0.0,
    GuidanceMethod.CFG: 5.0,
    GuidanceMethod.TPG: 3.0,
    GuidanceMethod.PAG: 3.0,
    GuidanceMethod.SEG: 3.0,
}


def middle_third(depth: int) -> tuple[int, ...]:
    """Default layer set for perturbations: the middle third of the stack."""
    lo = depth // 3
    hi = depth - depth // 3
    return tuple(range(lo, hi))


@dataclass(frozen=True)
class GuidanceConfig:
    method: GuidanceMethod = GuidanceMethod.NONE
    gamma: float | None = None
    layers: tuple[int, ...] | None = None
    perturb_kind: PerturbKind = PerturbKind.SHUFFLE
    seg_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", GuidanceMethod(self.method))
        object.__setattr__(self, "perturb_kind", PerturbKind(self.perturb_kind))
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(int(k) for k in self.layers))
        if self.gamma is not None:
            if not np.isfinite(self.gamma) or self.gamma < 0:
                raise InvalidConfig(f"gamma must be finite and >= 0, got {self.gamma}")
        if not (self.seg_sigma > 0):
            raise InvalidConfig(f"seg_sigma must be positive, got {self.seg_sigma}")

    def resolved_gamma(self) -> float:
        if self.gamma is None:
            return DEFAULT_GAMMA[self.method]
        return float(self.gamma)

    def resolved_layers(self, depth: int) -> tuple[int, ...]:
        layers = middle_third(depth) if self.layers is None else self.layers
        for k in layers:
            if not (0 <= k < depth):
                raise InvalidConfig(f"layer {k} outside [0, {depth})")
        return tuple(layers)


def combine(eps_pos: np.ndarray, eps_neg: np.ndarray, gamma: float) -> np.ndarray:
    """positive + gamma * (positive - negative)."""
    eps_pos = np.asarray(eps_pos)
    eps_neg = np.asarray(eps_neg)
    if eps_pos.shape != eps_neg.shape:
        raise ShapeMismatch(f"positive shape {eps_pos.shape} != negative shape {eps_neg.shape}")
    if not np.isfinite(gamma) or gamma < 0:
        raise InvalidConfig(f"gamma must be finite and >= 0, got {gamma}")
    return eps_pos + gamma * (eps_pos - eps_neg)


def build_hooks(gcfg: GuidanceConfig, model_cfg, t: int) -> dict:
    """Hook set for the negative pass of the configured method at timestep t.

    Perturbation payloads are keyed by (guidance seed, layer, timestep), so
    the same (seed, k, t) triple always yields the same matrix.
    """
    layers = gcfg.resolved_layers(model_cfg.depth)
    if not layers:
        warnings.warn(
            f"guidance method {gcfg.method.value} with an empty layer set degenerates "
            "to the unguided model", stacklevel=2,
        )
        return {}
    hooks: dict = {}
    if gcfg.method is GuidanceMethod.TPG:
        root = SeededRng(gcfg.seed)
        for k in layers:
            op = PerturbOp.make(gcfg.perturb_kind, model_cfg.n_tokens,
                                root.stream("perturb", k, int(t)))
            hooks[HookPoint(k, HookSite.TOKEN_INPUT)] = TokenPerturb(op)
    elif gcfg.method is GuidanceMethod.PAG:
        for k in layers:
            hooks[HookPoint(k, HookSite.ATTENTION_MAP)] = AttentionIdentity()
    elif gcfg.method is GuidanceMethod.SEG:
        for k in layers:
            hooks[HookPoint(k, HookSite.ATTENTION_MAP)] = AttentionBlur(gcfg.seg_sigma)
    else:
        raise InvalidConfig(f"method {gcfg.method.value} does not use hooks")
    return hooks


def negative_eps(x_t: np.ndarray, t: int, c, gcfg: GuidanceConfig, model: Denoiser) -> np.ndarray:
    """The degraded prediction for the configured method at timestep t."""
    method = gcfg.method
    if method is GuidanceMethod.NONE:
        raise InvalidConfig("the unguided method has no negative pass")
    if method is GuidanceMethod.CFG:
        if not model.cond_dropout_p:
            raise UnsupportedMethod(
                "null-conditioned guidance needs a model trained with label dropout "
                "(cond_dropout > 0)"
            )
        return model.forward(x_t, t, None)
    hooks = build_hooks(gcfg, model.cfg, t)
    return model.forward(x_t, t, c, hooks=hooks)


@dataclass(frozen=True)
class SampleRun:
    solver: str = "ddim"
    steps: int = 50
    batch: int = 16
    condition: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.solver not in ("ddim", "ddpm"):
            raise InvalidConfig(f"unknown solver {self.solver!r}")
        if self.steps < 1:
            raise InvalidConfig(f"steps must be >= 1, got {self.steps}")
        if self.batch < 1:
            raise InvalidConfig(f"batch must be >= 1, got {self.batch}")


@dataclass
class SampleResult:
    samples: np.ndarray
    trajectory: list[tuple[int, np.ndarray]]


def sample(model: Denoiser, sched: NoiseSchedule, gcfg: GuidanceConfig, run: SampleRun,
           snapshots: int = 0) -> SampleResult:
    """Run the reverse process from pure noise down to step 0.

    Initial noise comes from the (run.seed, "init") stream and ancestral
    solver noise at step t from (run.seed, "solver", t); neither depends on
    how many forward passes guidance makes, which is what keeps gamma = 0
    runs identical to unguided ones.  ``snapshots`` > 0 additionally records
    that many evenly spaced intermediate states (the final state included).
    """
    grid = timestep_grid(sched.timesteps, run.steps)
    if snapshots < 0 or snapshots > run.steps:
        raise UsageError(f"snapshot count {snapshots} must lie in [0, {run.steps}]")
    snap_at = set()
    if snapshots:
        snap_at = {int(round(v)) for v in np.linspace(0, run.steps - 1, snapshots)}
    root = SeededRng(run.seed)
    x = root.stream("init").generator().standard_normal((run.batch,) + model.cfg.input_shape)
    gamma = gcfg.resolved_gamma()
    trajectory: list[tuple[int, np.ndarray]] = []

    for i in range(run.steps):
        t, t_prev = grid[i], grid[i + 1]
        eps_pos = model.forward(x, t, run.condition)
        if gcfg.method is GuidanceMethod.NONE:
            eps_hat = eps_pos
        else:
            eps_neg = negative_eps(x, t, run.condition, gcfg, model)
            eps_hat = combine(eps_pos, eps_neg, gamma)
        if run.solver == "ddim":
            x = ddim_step(x, eps_hat, t, t_prev, sched)
        else:
            z = None
            if t_prev > 0:
                z = root.stream("solver", t).generator().standard_normal(x.shape)
            x = ddpm_jump(x, eps_hat, t, t_prev, sched, z)
        if i in snap_at:
            trajectory.append((t_prev, x.copy()))

    return SampleResult(samples=x, trajectory=trajectory)
