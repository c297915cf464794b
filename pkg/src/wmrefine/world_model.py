"""Recurrent latent world model with a categorical state and dynamics ensemble.

Six learned pieces operate on the model state (h, z): a gated recurrent
sequence cell advancing h, an encoder producing the posterior over z from
(h, observation), a dynamics head producing the prior over z from h alone,
reward and continue heads, and an observation decoder. A K-member ensemble
of small nets predicts the latent distribution from h; the spread of its
predictions is the disagreement signal used by the refinement objectives.

All functions accept unbatched ``(dim,)`` or batched ``(B, dim)`` tensors.
Parameters are immutable during evaluation; training mutates them in place.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import Categorical, categorical_mode, categorical_sample_st

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    obs_dim: int
    action_count: int
    h: int = 128
    groups: int = 8
    classes: int = 8
    hidden: int = 128
    ensemble: int = 8
    ensemble_hidden: int = 64

    def __post_init__(self):
        if self.ensemble < 2:
            raise ValueError(f"ensemble size must be >= 2, got {self.ensemble}")
        if self.groups < 1 or self.classes < 2:
            raise ValueError(f"invalid latent shape {self.groups}x{self.classes}")

    @property
    def latent(self) -> int:
        return self.groups * self.classes


@dataclass
class ModelState:
    """Paired deterministic recurrent vector h and one-hot latent z.

    z is flattened to (..., groups*classes) with exact one-hot blocks per
    group. The blank pre-episode state carries an all-zero z.
    """

    h: Tensor
    z: Tensor

    def detached(self) -> "ModelState":
        return ModelState(ad.detach(self.h), ad.detach(self.z))


@dataclass
class WorldModelParams:
    cfg: ModelConfig
    params: dict

    @property
    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def main(self) -> dict:
        return {k: v for k, v in self.params.items() if not k.startswith("ens")}

    def member(self, k: int) -> dict:
        prefix = f"ens{k}."
        return {k_: v for k_, v in self.params.items() if k_.startswith(prefix)}


def _dense(rng, fan_in: int, fan_out: int) -> np.ndarray:
    return (rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(np.float32)


def _add_mlp(params, rng, prefix: str, sizes) -> None:
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}.w{i}"] = Tensor(_dense(rng, a, b))
        params[f"{prefix}.b{i}"] = Tensor(np.zeros(b, dtype=np.float32))


def init_world_model(cfg: ModelConfig, rng: np.random.Generator) -> WorldModelParams:
    params: dict = {}
    gate_in = cfg.latent + cfg.action_count + cfg.h
    for gate in ("r", "u", "c"):
        params[f"seq.w{gate}"] = Tensor(_dense(rng, gate_in, cfg.h))
        params[f"seq.b{gate}"] = Tensor(np.zeros(cfg.h, dtype=np.float32))
    _add_mlp(params, rng, "enc", [cfg.h + cfg.obs_dim, cfg.hidden, cfg.latent])
    _add_mlp(params, rng, "dyn", [cfg.h, cfg.hidden, cfg.latent])
    _add_mlp(params, rng, "rew", [cfg.h + cfg.latent, cfg.hidden, 1])
    _add_mlp(params, rng, "con", [cfg.h + cfg.latent, cfg.hidden, 1])
    _add_mlp(params, rng, "dec", [cfg.h + cfg.latent, cfg.hidden, cfg.obs_dim])
    for k in range(cfg.ensemble):
        _add_mlp(params, rng, f"ens{k}", [cfg.h, cfg.ensemble_hidden, cfg.latent])
    wm = WorldModelParams(cfg, params)
    logger.info("world model built: %d parameters (%d ensemble members)", wm.param_count, cfg.ensemble)
    return wm


def zero_world_model(cfg: ModelConfig) -> WorldModelParams:
    """All-zero parameters; handy for contract tests of the untrained model."""
    wm = init_world_model(cfg, np.random.default_rng(0))
    for t in wm.params.values():
        t.data[...] = 0.0
    return wm


def initial_state(cfg: ModelConfig, batch: int | None = None) -> ModelState:
    shape_h = (cfg.h,) if batch is None else (batch, cfg.h)
    shape_z = (cfg.latent,) if batch is None else (batch, cfg.latent)
    return ModelState(
        Tensor(np.zeros(shape_h, dtype=np.float32)),
        Tensor(np.zeros(shape_z, dtype=np.float32)),
    )


def _mlp2(params: dict, prefix: str, x: Tensor) -> Tensor:
    hid = ad.tanh(ad.affine(x, params[f"{prefix}.w0"], params[f"{prefix}.b0"]))
    return ad.affine(hid, params[f"{prefix}.w1"], params[f"{prefix}.b1"])


def seq_cell(wm: WorldModelParams, h: Tensor, z: Tensor, action: Tensor) -> Tensor:
    """Gated recurrent update; output stays in (-1, 1) per unit."""
    p = wm.params
    u_in = ad.concat([z, action, h], axis=-1)
    reset = ad.sigmoid(ad.affine(u_in, p["seq.wr"], p["seq.br"]))
    update = ad.sigmoid(ad.affine(u_in, p["seq.wu"], p["seq.bu"]))
    cand_in = ad.concat([z, action, ad.mul(reset, h)], axis=-1)
    cand = ad.tanh(ad.affine(cand_in, p["seq.wc"], p["seq.bc"]))
    one_minus_update = ad.add_const(ad.neg(update), 1.0)
    return ad.add(ad.mul(update, h), ad.mul(one_minus_update, cand))


def _grouped(wm: WorldModelParams, flat_logits: Tensor) -> Categorical:
    cfg = wm.cfg
    shape = flat_logits.data.shape[:-1] + (cfg.groups, cfg.classes)
    return Categorical(ad.reshape(flat_logits, shape))


def encoder_dist(wm: WorldModelParams, h: Tensor, obs: Tensor) -> Categorical:
    return _grouped(wm, _mlp2(wm.params, "enc", ad.concat([h, obs], axis=-1)))


def dynamics_dist(wm: WorldModelParams, h: Tensor) -> Categorical:
    return _grouped(wm, _mlp2(wm.params, "dyn", h))


def _flat(z_grouped: Tensor) -> Tensor:
    shape = z_grouped.data.shape[:-2] + (z_grouped.data.shape[-2] * z_grouped.data.shape[-1],)
    return ad.reshape(z_grouped, shape)


def observe_step(
    wm: WorldModelParams,
    prev: ModelState,
    action: Tensor,
    obs: Tensor,
    rng: np.random.Generator,
    sample: bool = True,
):
    """Advance h from (prev, action), then infer the latent from (h, obs).

    Returns (posterior state, prior distribution, posterior distribution).
    Training passes sample=True; evaluation uses the mode (sample=False).
    """
    if not np.all(np.isfinite(obs.data)):
        raise ValueError("observe_step: observation contains non-finite values")
    h = seq_cell(wm, prev.h, prev.z, action)
    prior = dynamics_dist(wm, h)
    posterior = encoder_dist(wm, h, obs)
    if sample:
        z = _flat(categorical_sample_st(posterior, rng))
    else:
        z = Tensor(categorical_mode(posterior).reshape(h.data.shape[:-1] + (wm.cfg.latent,)))
    return ModelState(h, z), prior, posterior


def imagine_step(
    wm: WorldModelParams,
    state: ModelState,
    action: Tensor,
    rng: np.random.Generator,
):
    """Advance h and sample the next latent from the prior alone.

    Returns (next state, prior distribution); no observation is consumed.
    """
    h = seq_cell(wm, state.h, state.z, action)
    prior = dynamics_dist(wm, h)
    z = _flat(categorical_sample_st(prior, rng))
    return ModelState(h, z), prior


def decode_logits(wm: WorldModelParams, state: ModelState) -> Tensor:
    return _mlp2(wm.params, "dec", ad.concat([state.h, state.z], axis=-1))


def decode(wm: WorldModelParams, state: ModelState) -> Tensor:
    """Reconstruction with values in the observation range via sigmoid."""
    return ad.sigmoid(decode_logits(wm, state))


def predict_reward(wm: WorldModelParams, state: ModelState) -> Tensor:
    out = _mlp2(wm.params, "rew", ad.concat([state.h, state.z], axis=-1))
    return ad.reshape(out, out.data.shape[:-1])


def continue_logits(wm: WorldModelParams, state: ModelState) -> Tensor:
    out = _mlp2(wm.params, "con", ad.concat([state.h, state.z], axis=-1))
    return ad.reshape(out, out.data.shape[:-1])


def predict_continue(wm: WorldModelParams, state: ModelState) -> Tensor:
    return ad.sigmoid(continue_logits(wm, state))


def ensemble_predict(wm: WorldModelParams, h: Tensor) -> list[Tensor]:
    """Each member's predicted latent mean: per-group probabilities, flattened.

    Every output row sums to the number of groups.
    """
    cfg = wm.cfg
    outs = []
    for k in range(cfg.ensemble):
        logits = _mlp2(wm.params, f"ens{k}", h)
        shape = logits.data.shape[:-1] + (cfg.groups, cfg.classes)
        outs.append(_flat(ad.softmax(ad.reshape(logits, shape))))
    return outs
