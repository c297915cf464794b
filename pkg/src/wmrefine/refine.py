"""Decision-time iterative refinement of the recurrent state.

At every environment step the agent's recurrent vector h can be improved by
gradient descent on a Monte-Carlo objective computed over imagined rollouts:
sample s trajectories of length lambda from the current state using the
dynamics prior and the actor, score them with one of three objectives, add a
KL regularizer anchoring the refined latent to the initial one, backprop to
h, and take a step. The latent z is re-inferred from the true observation by
the encoder (mode) after every update; the final action is the actor's mode.

Objectives (all minimized, averaged over the rollout and the s samples):
  sig  - divergence between the encoder posterior on the model's own
         reconstruction and the dynamics prior, along the rollout
  pig  - across-ensemble variance of predicted latent means (disagreement)
  ent  - entropy of the dynamics prior
  none - no refinement; still applies deterministic mode-based selection,
         which is exactly the fair-comparison baseline path
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .distributions import (
    Categorical,
    categorical_mode,
    categorical_sample_st,
    entropy_categorical,
    kl_categorical,
)
from .trainer import ActorCriticParams, actor_logits
from .world_model import (
    ModelState,
    WorldModelParams,
    decode,
    dynamics_dist,
    encoder_dist,
    imagine_step,
)

logger = logging.getLogger(__name__)

OBJECTIVES = ("sig", "pig", "ent", "none")
ALPHA_GRID = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3)


@dataclass
class IIConfig:
    objective: str = "none"
    n: int = 10                 # gradient iterations per environment step
    s: int = 3                  # sampled rollouts per iteration
    rollout_len: int = 1        # lambda
    alpha: float = 1e-2         # step size on h
    reg_free_bits: float = 1.0
    reg_scale: float = 1.0
    objective_scale: float = 1.0
    common_random_numbers: bool = False  # reuse one draw stream per iteration

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.n < 0 or self.s < 1 or self.rollout_len < 0 or self.alpha < 0:
            raise ValueError("IIConfig requires n >= 0, s >= 1, rollout_len >= 0, alpha >= 0")

    @property
    def active(self) -> bool:
        return self.objective != "none"


@dataclass
class RolloutTrajectory:
    """Imagined states (index 0 is the start), the prior at each state, and
    the straight-through actions that produced the chain.

    All tensors carry the s-sample batch as their leading axis, so one
    trajectory object holds all s rollouts of an iteration.
    """

    states: list
    priors: list
    actions: list
    contributions: np.ndarray | None = None  # per (step, sample), filled by objectives


@dataclass
class TraceEntry:
    objective: float
    regularizer: float
    grad_norm: float


@dataclass
class RefinementTrace:
    entries: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    @property
    def objective_first(self) -> float:
        return self.entries[0].objective

    @property
    def objective_last(self) -> float:
        return self.entries[-1].objective

    @property
    def grad_norm_mean(self) -> float:
        norms = [e.grad_norm for e in self.entries if np.isfinite(e.grad_norm)]
        return float(np.mean(norms)) if norms else 0.0


@dataclass
class RefineResult:
    state: ModelState
    action: np.ndarray  # one-hot
    trace: RefinementTrace


# ---------------------------------------------------------------------------
# rollouts


def rollout(wm: WorldModelParams, ac: ActorCriticParams, start: ModelState,
            length: int, rng: np.random.Generator) -> RolloutTrajectory:
    """Imagined trajectory from ``start``: actor samples actions, the prior
    samples latents, and the whole chain stays differentiable w.r.t. start.h
    (straight-through one-hots keep gradients flowing through the actor).
    """
    states = [start]
    priors = [dynamics_dist(wm, start.h)]
    actions = []
    state = start
    for _ in range(length):
        logits = actor_logits(ac, state)
        a_dist = Categorical(ad.reshape(logits, logits.data.shape[:-1] + (1, logits.data.shape[-1])))
        a = categorical_sample_st(a_dist, rng)
        a = ad.reshape(a, logits.data.shape)
        nxt, prior = imagine_step(wm, state, a, rng)
        states.append(nxt)
        priors.append(prior)
        actions.append(a)
        state = nxt
    return RolloutTrajectory(states, priors, actions)


def _reduce_steps(traj: RolloutTrajectory, step_terms: list[Tensor], length: int) -> Tensor:
    """Average per-step (s,)-shaped terms over samples and the rollout length."""
    traj.contributions = np.stack([np.atleast_1d(t.data.astype(np.float64)) for t in step_terms])
    s = step_terms[0].data.shape[0] if step_terms[0].data.ndim else 1
    total = step_terms[0]
    for t in step_terms[1:]:
        total = ad.add(total, t)
    return ad.scale(ad.mean(total), 1.0 / max(length, 1))


def obj_sig(wm: WorldModelParams, traj: RolloutTrajectory) -> Tensor:
    """State information gain: KL between the encoder posterior evaluated on
    the decoder's own reconstruction and the dynamics prior, per rollout step.
    """
    terms = []
    for state, prior in zip(traj.states, traj.priors):
        recon = decode(wm, state)
        posterior = encoder_dist(wm, state.h, recon)
        terms.append(kl_categorical(posterior, prior))
    return _reduce_steps(traj, terms, len(traj.states) - 1)


def ensemble_variance(preds: list[Tensor]) -> Tensor:
    """Mean over components of the across-member population variance.

    Accumulates in float64, so bit-identical members give exactly zero.
    """
    k = len(preds)
    stacked = np.stack([p.data.astype(np.float64) for p in preds])
    mu = stacked.mean(axis=0)
    var = np.mean((stacked - mu) ** 2, axis=0)
    value = var.mean(axis=-1)
    out = Tensor(value.astype(preds[0].data.dtype), tuple(preds))
    d = preds[0].data.shape[-1]

    def backward_rule():
        g = np.asarray(out.grad)[..., None]
        for p, x in zip(preds, stacked):
            p.grad += (g * (2.0 / (k * d)) * (x - mu)).astype(p.data.dtype)

    out._backward = backward_rule
    return out


def obj_pig(wm: WorldModelParams, traj: RolloutTrajectory) -> Tensor:
    """Parameter information gain: ensemble disagreement along the rollout."""
    from .world_model import ensemble_predict

    terms = [ensemble_variance(ensemble_predict(wm, state.h)) for state in traj.states]
    return _reduce_steps(traj, terms, len(traj.states) - 1)


def obj_ent(wm: WorldModelParams, traj: RolloutTrajectory) -> Tensor:
    """Mean entropy of the dynamics prior along the rollout."""
    terms = [entropy_categorical(prior) for prior in traj.priors]
    return _reduce_steps(traj, terms, len(traj.states) - 1)


OBJECTIVE_FNS = {"sig": obj_sig, "pig": obj_pig, "ent": obj_ent}


def reg_term(z0_posterior: Categorical, zi_posterior: Categorical,
             free_bits: float) -> Tensor:
    """max(free_bits, KL(initial posterior || current posterior)).

    Below the floor the gradient is exactly zero, leaving room for small
    non-penalized changes to the representation.
    """
    return ad.maximum_const(kl_categorical(z0_posterior, zi_posterior), free_bits)


# ---------------------------------------------------------------------------
# the refinement loop


def _detach_dist(dist: Categorical) -> Categorical:
    return Categorical(ad.detach(dist.logits))


def _mode_flat(dist: Categorical) -> np.ndarray:
    return categorical_mode(dist).reshape(-1)


def refine(
    wm: WorldModelParams,
    ac: ActorCriticParams,
    h0: np.ndarray,
    x_t: np.ndarray,
    config: IIConfig,
    rng: np.random.Generator,
) -> RefineResult:
    """Iteratively refine h against the configured rollout objective.

    h0 must be the recurrent state the baseline inference produced for
    observation x_t. Returns the refined state, the deterministically
    selected action, and a trace with one entry per iteration plus the
    post-update evaluation (n+1 entries; a lone entry when nothing runs).
    World-model and actor parameters are never mutated.
    """
    cfg = wm.cfg
    obs = Tensor(np.asarray(x_t, dtype=np.float32))
    h = np.array(h0, dtype=np.float32, copy=True)
    trace = RefinementTrace()

    h_leaf = Tensor(h)
    post0 = encoder_dist(wm, h_leaf, obs)
    z0_posterior = _detach_dist(post0)

    if not config.active:
        z = _mode_flat(post0)
        state = ModelState(h_leaf, Tensor(z))
        action = _argmax_onehot(actor_logits(ac, state).data)
        trace.entries.append(TraceEntry(float("nan"), float("nan"), 0.0))
        return RefineResult(state, action, trace)

    objective_fn = OBJECTIVE_FNS[config.objective]
    crn_seed = int(rng.integers(2**31 - 1)) if config.common_random_numbers else None

    def iteration_rng():
        return np.random.default_rng(crn_seed) if crn_seed is not None else rng

    def evaluate(h_leaf: Tensor, posterior: Categorical):
        """Build the scaled loss at the current leaf; returns (loss, raw obj, raw reg)."""
        z_flat = _mode_flat(posterior)
        start = ModelState(
            ad.broadcast_rows(h_leaf, config.s),
            Tensor(np.repeat(z_flat[None, :], config.s, axis=0)),
        )
        traj = rollout(wm, ac, start, config.rollout_len, iteration_rng())
        obj = objective_fn(wm, traj)
        reg = reg_term(z0_posterior, posterior, config.reg_free_bits)
        loss = ad.add(ad.scale(obj, config.objective_scale),
                      ad.scale(reg, config.reg_scale))
        return loss, float(obj.data), float(reg.data)

    for i in range(config.n):
        h_leaf = Tensor(h)
        posterior = encoder_dist(wm, h_leaf, obs)
        loss, obj_raw, reg_raw = evaluate(h_leaf, posterior)
        backward(loss)
        g = h_leaf.grad
        norm = float(np.sqrt(np.sum(np.square(g, dtype=np.float64))))
        if not np.isfinite(norm):
            trace.flags.append(f"nonfinite_gradient_iter{i}")
            trace.entries.append(TraceEntry(obj_raw, reg_raw, float("nan")))
            logger.warning("refine: non-finite gradient at iteration %d; remaining skipped", i)
            break
        trace.entries.append(TraceEntry(obj_raw, reg_raw, norm))
        h = h - config.alpha * g

    h_leaf = Tensor(h)
    posterior = encoder_dist(wm, h_leaf, obs)
    if not trace.flags:
        _, obj_raw, reg_raw = evaluate(h_leaf, posterior)
        trace.entries.append(TraceEntry(obj_raw, reg_raw, 0.0))
    z = _mode_flat(posterior)
    state = ModelState(h_leaf, Tensor(z))
    action = _argmax_onehot(actor_logits(ac, state).data)
    return RefineResult(state, action, trace)


def _argmax_onehot(logits: np.ndarray) -> np.ndarray:
    out = np.zeros_like(logits)
    out[np.argmax(logits)] = 1.0  # ties break to the lowest index
    return out


# ---------------------------------------------------------------------------
# calibration (objective scales and step size)


def _episode_objective_stats(wm, ac, env, config: IIConfig, seed: int,
                             observe_rng_seed: int = 0):
    """Drive one episode with refinement; collect per-step first/last raw
    objective values (and the mean |objective| for scale calibration).
    """
    from .world_model import observe_step, initial_state
    from .trainer import onehot_actions

    obs = env.reset(seed)
    state_h = np.zeros(wm.cfg.h, dtype=np.float32)
    state_z = np.zeros(wm.cfg.latent, dtype=np.float32)
    prev_a = -1
    rng = np.random.default_rng(observe_rng_seed)
    firsts, lasts = [], []
    while not env.done:
        prev = ModelState(Tensor(state_h), Tensor(state_z))
        post_state, _, _ = observe_step(
            wm, prev, Tensor(onehot_actions(np.array(prev_a), wm.cfg.action_count)),
            Tensor(obs), rng, sample=False)
        result = refine(wm, ac, post_state.h.data, obs, config,
                        np.random.default_rng((seed * 100003 + env.t) % (2**31 - 1)))
        firsts.append(result.trace.objective_first)
        lasts.append(result.trace.objective_last)
        state_h = result.state.h.data
        state_z = result.state.z.data
        prev_a = int(np.argmax(result.action))
        obs = env.step(prev_a).observation
    return np.array(firsts), np.array(lasts)


def calibrate_objective_scale(wm, ac, env, objective: str, config: IIConfig,
                              seed: int = 0) -> float:
    """Scale constant putting the raw objective near unit magnitude, measured
    once on a calibration episode with no updates applied (n=0)."""
    probe = IIConfig(objective=objective, n=0, s=config.s,
                     rollout_len=config.rollout_len, alpha=0.0,
                     reg_free_bits=config.reg_free_bits)
    firsts, _ = _episode_objective_stats(wm, ac, env, probe, seed)
    mean_mag = float(np.mean(np.abs(firsts)))
    if not np.isfinite(mean_mag) or mean_mag < 1e-12:
        return 1.0
    return 1.0 / mean_mag


def calibrate_alpha(wm, ac, env_factory, objective: str, config: IIConfig,
                    seeds=(0, 1, 2, 3, 4), grid=ALPHA_GRID) -> dict:
    """Appendix-style step-size tuning: the largest grid alpha whose mean
    objective does not increase from iteration 0 to iteration n across the
    calibration episodes. Falls back to 0.0 when every alpha increases it.
    """
    results = {}
    chosen = 0.0
    for alpha in sorted(grid, reverse=True):
        cand = IIConfig(objective=objective, n=config.n, s=config.s,
                        rollout_len=config.rollout_len, alpha=alpha,
                        reg_free_bits=config.reg_free_bits,
                        reg_scale=config.reg_scale,
                        objective_scale=config.objective_scale)
        firsts, lasts = [], []
        for seed in seeds:
            f, l = _episode_objective_stats(wm, ac, env_factory(), cand, seed)
            firsts.append(f.mean())
            lasts.append(l.mean())
        delta = float(np.mean(lasts) - np.mean(firsts))
        results[alpha] = delta
        if delta <= 0.0:
            chosen = alpha
            break
    return {"alpha": chosen, "deltas": results}
