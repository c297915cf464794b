"""World-model pre-training on replayed experience and an imagination-trained
actor-critic.

The world model maximizes an evidence bound on observation subsequences:
reconstruction log-likelihood minus a KL between the encoder posterior and
the dynamics prior (free-bits clamped per group), plus reward and continue
prediction losses. Ensemble members train on their own independently drawn
batch streams so their parameters decorrelate. The actor improves imagined
returns by REINFORCE against a learned critic baseline and stays a
differentiable state-to-logits map.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_update, backward
from .distributions import (
    Categorical,
    categorical_sample_st,
    entropy_categorical,
    kl_categorical_per_group,
)
from .world_model import (
    ModelConfig,
    ModelState,
    WorldModelParams,
    continue_logits,
    decode_logits,
    imagine_step,
    initial_state,
    observe_step,
    predict_continue,
    predict_reward,
)

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    seq_len: int = 8
    model_lr: float = 1e-3
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    kl_scale: float = 1.0
    free_bits: float = 1.0  # nats per latent group during training
    reward_loss_scale: float = 1.0  # sparse small-magnitude rewards need weight
    imagination_horizon: int = 15
    gamma: float = 0.95
    return_lambda: float = 0.95
    entropy_coef: float = 3e-3
    epsilon: float = 0.1

    def __post_init__(self):
        positive = ("batch_size", "seq_len", "model_lr", "actor_lr", "critic_lr",
                    "imagination_horizon", "gamma")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.free_bits < 0:
            raise ValueError("TrainConfig.free_bits must be >= 0")


# ---------------------------------------------------------------------------
# replay


class ReplayBuffer:
    """Ring of episodes; sampling returns subsequences inside one episode.

    Each stored row i holds (obs_i, prev_action_i, reward_i, cont_i): the
    action that led into obs_i, the reward received on arrival, and the
    continue flag after arrival. Row 0 of an episode has no previous action
    (index -1 encodes a zero one-hot).
    """

    def __init__(self, capacity_steps: int):
        self.capacity = capacity_steps
        self.episodes: list[dict] = []
        self._steps = 0

    def __len__(self) -> int:
        return self._steps

    @property
    def episode_count(self) -> int:
        return len(self.episodes)

    def add_episode(self, obs, prev_action, reward, cont) -> None:
        ep = {
            "obs": np.asarray(obs, dtype=np.float32),
            "prev_action": np.asarray(prev_action, dtype=np.int64),
            "reward": np.asarray(reward, dtype=np.float32),
            "cont": np.asarray(cont, dtype=np.float32),
        }
        n = len(ep["reward"])
        if not (len(ep["obs"]) == len(ep["prev_action"]) == n):
            raise ValueError("episode arrays must share length")
        self.episodes.append(ep)
        self._steps += n
        while self._steps > self.capacity and len(self.episodes) > 1:
            dropped = self.episodes.pop(0)
            self._steps -= len(dropped["reward"])

    def sample(self, rng: np.random.Generator, batch: int, length: int):
        """Uniform subsequences fully inside one episode; returns (batch, key)."""
        valid = [i for i, ep in enumerate(self.episodes) if len(ep["reward"]) >= length]
        if not valid:
            raise TrainingError(f"no episode has {length}+ steps to sample")
        obs, act, rew, cont = [], [], [], []
        key = []
        for _ in range(batch):
            ep_idx = valid[int(rng.integers(len(valid)))]
            ep = self.episodes[ep_idx]
            start = int(rng.integers(len(ep["reward"]) - length + 1))
            key.append((ep_idx, start))
            sl = slice(start, start + length)
            obs.append(ep["obs"][sl])
            act.append(ep["prev_action"][sl])
            rew.append(ep["reward"][sl])
            cont.append(ep["cont"][sl])
        batch_dict = {
            "obs": np.stack(obs),
            "prev_action": np.stack(act),
            "reward": np.stack(rew),
            "cont": np.stack(cont),
        }
        return batch_dict, tuple(key)


def batch_key_hash(key) -> str:
    return hashlib.sha256(repr(key).encode()).hexdigest()[:16]


def onehot_actions(indices, count: int) -> np.ndarray:
    """Index -1 encodes the blank pre-episode action (all zeros)."""
    idx = np.asarray(indices)
    scalar = idx.ndim == 0
    idx = np.atleast_1d(idx)
    out = np.zeros(idx.shape + (count,), dtype=np.float32)
    mask = idx >= 0
    np.put_along_axis(out, np.where(mask, idx, 0)[..., None], 1.0, axis=-1)
    out[~mask] = 0.0
    return out[0] if scalar else out


# ---------------------------------------------------------------------------
# world-model objective


def elbo_loss(wm: WorldModelParams, batch: dict, config: TrainConfig,
              rng: np.random.Generator):
    """Negative evidence bound plus reward/continue losses on a subsequence.

    Returns (scalar loss Tensor, dict of per-term float diagnostics).
    """
    cfg = wm.cfg
    B, L = batch["reward"].shape
    actions = onehot_actions(batch["prev_action"], cfg.action_count)
    state = initial_state(cfg, batch=B)
    recon_terms, kl_terms, rew_terms, cont_terms = [], [], [], []
    kl_raw_total = 0.0
    recon_mse_total = 0.0
    for i in range(L):
        obs = Tensor(batch["obs"][:, i])
        state, prior, posterior = observe_step(wm, state, Tensor(actions[:, i]), obs, rng)
        recon = ad.sum_(ad.bce_with_logits(decode_logits(wm, state), obs.data), axis=-1)
        per_group = kl_categorical_per_group(posterior, prior)
        kl_clamped = ad.sum_(ad.maximum_const(per_group, config.free_bits), axis=-1)
        delta = ad.sub(predict_reward(wm, state), Tensor(batch["reward"][:, i]))
        rew = ad.mul(delta, delta)
        cont = ad.bce_with_logits(continue_logits(wm, state), batch["cont"][:, i])
        recon_terms.append(ad.mean(recon))
        kl_terms.append(ad.mean(kl_clamped))
        rew_terms.append(ad.mean(rew))
        cont_terms.append(ad.mean(cont))
        kl_raw_total += float(np.mean(per_group.data.sum(axis=-1)))
        probs = ad.sigmoid_np(decode_logits(wm, state).data)
        recon_mse_total += float(np.mean((probs - batch["obs"][:, i]) ** 2))

    def avg(terms):
        return ad.scale(ad.sum_(ad.concat([ad.reshape(t, (1,)) for t in terms], axis=0)), 1.0 / L)

    recon_l, kl_l, rew_l, cont_l = avg(recon_terms), avg(kl_terms), avg(rew_terms), avg(cont_terms)
    loss = ad.add(ad.add(recon_l, ad.scale(kl_l, config.kl_scale)),
                  ad.add(ad.scale(rew_l, config.reward_loss_scale), cont_l))
    parts = {
        "loss": float(loss.data),
        "recon_nll": float(recon_l.data),
        "kl": kl_raw_total / L,
        "kl_clamped": float(kl_l.data),
        "reward_loss": float(rew_l.data),
        "cont_loss": float(cont_l.data),
        "recon_mse": recon_mse_total / L,
    }
    return loss, parts


def _detached_features(wm: WorldModelParams, batch: dict, rng: np.random.Generator):
    """Posterior states for every position of a batch, detached from the graph."""
    cfg = wm.cfg
    B, L = batch["reward"].shape
    actions = onehot_actions(batch["prev_action"], cfg.action_count)
    state = initial_state(cfg, batch=B)
    hs, zs = [], []
    for i in range(L):
        state, _, _ = observe_step(wm, state, Tensor(actions[:, i]),
                                   Tensor(batch["obs"][:, i]), rng)
        state = state.detached()
        hs.append(state.h.data)
        zs.append(state.z.data)
    return np.concatenate(hs, axis=0), np.concatenate(zs, axis=0)


def _member_update(wm: WorldModelParams, k: int, batch: dict, rng, opt: AdamState,
                   config: TrainConfig) -> float:
    """One cross-entropy step for ensemble member k on its own batch."""
    cfg = wm.cfg
    h, z_target = _detached_features(wm, batch, rng)
    from .world_model import _mlp2  # member net shares the MLP helper

    logits = _mlp2(wm.params, f"ens{k}", Tensor(h))
    shaped = ad.reshape(logits, (h.shape[0], cfg.groups, cfg.classes))
    logp = ad.log_softmax(shaped)
    ce = ad.scale(ad.sum_(ad.mul(logp, z_target.reshape(h.shape[0], cfg.groups, cfg.classes))),
                  -1.0 / h.shape[0])
    backward(ce)
    adam_update(wm.member(k), opt, config.model_lr)
    return float(ce.data)


def train_world_model(
    wm: WorldModelParams,
    buffer: ReplayBuffer,
    config: TrainConfig,
    steps: int,
    rng: np.random.Generator,
    member_rngs: list[np.random.Generator] | None = None,
    wm_opt: AdamState | None = None,
    member_opts: list[AdamState] | None = None,
) -> dict:
    """Adam steps on the evidence-bound loss; one ensemble member updates per
    step on its own independently sampled batch (round-robin).

    Returns {"trace": [per-step dicts], "member_batch_hashes": [per member]}.
    """
    cfg = wm.cfg
    wm_opt = wm_opt if wm_opt is not None else AdamState()
    member_opts = member_opts if member_opts is not None else [AdamState() for _ in range(cfg.ensemble)]
    if member_rngs is None:
        seqs = np.random.SeedSequence(1234).spawn(cfg.ensemble)
        member_rngs = [np.random.default_rng(s) for s in seqs]
    trace = []
    member_hashes: list[list[str]] = [[] for _ in range(cfg.ensemble)]
    main = wm.main()
    for step in range(steps):
        batch, key = buffer.sample(rng, config.batch_size, config.seq_len)
        loss, parts = elbo_loss(wm, batch, config, rng)
        if not np.isfinite(loss.data):
            logger.warning("train_world_model: non-finite loss at step %d, batch %s; step aborted",
                           step, batch_key_hash(key))
            parts["aborted"] = True
            trace.append({"step": step, **parts})
            continue
        backward(loss)
        adam_update(main, wm_opt, config.model_lr)
        k = step % cfg.ensemble
        mbatch, mkey = buffer.sample(member_rngs[k], config.batch_size, config.seq_len)
        member_ce = _member_update(wm, k, mbatch, member_rngs[k], member_opts[k], config)
        member_hashes[k].append(batch_key_hash(mkey))
        trace.append({"step": step, **parts, "member": k, "member_ce": member_ce})
    return {"trace": trace, "member_batch_hashes": member_hashes}


# ---------------------------------------------------------------------------
# actor-critic in imagination


@dataclass
class ActorCriticParams:
    cfg: ModelConfig
    params: dict

    def actor(self) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith("actor")}

    def critic(self) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith("critic")}


def init_actor_critic(cfg: ModelConfig, rng: np.random.Generator) -> ActorCriticParams:
    """Actor logits start at zero so the untrained policy is uniform."""
    from .world_model import _dense

    feat = cfg.h + cfg.latent
    params = {
        "actor.w0": Tensor(_dense(rng, feat, cfg.hidden)),
        "actor.b0": Tensor(np.zeros(cfg.hidden, dtype=np.float32)),
        "actor.w1": Tensor(np.zeros((cfg.hidden, cfg.action_count), dtype=np.float32)),
        "actor.b1": Tensor(np.zeros(cfg.action_count, dtype=np.float32)),
        "critic.w0": Tensor(_dense(rng, feat, cfg.hidden)),
        "critic.b0": Tensor(np.zeros(cfg.hidden, dtype=np.float32)),
        "critic.w1": Tensor(np.zeros((cfg.hidden, 1), dtype=np.float32)),
        "critic.b1": Tensor(np.zeros(1, dtype=np.float32)),
    }
    return ActorCriticParams(cfg, params)


def actor_logits(ac: ActorCriticParams, state: ModelState) -> Tensor:
    """Differentiable state -> action logits map (refinement backprops here)."""
    feat = ad.concat([state.h, state.z], axis=-1)
    hid = ad.tanh(ad.affine(feat, ac.params["actor.w0"], ac.params["actor.b0"]))
    return ad.affine(hid, ac.params["actor.w1"], ac.params["actor.b1"])


def actor_dist(ac: ActorCriticParams, state: ModelState) -> Categorical:
    logits = actor_logits(ac, state)
    return Categorical(ad.reshape(logits, logits.data.shape[:-1] + (1, ac.cfg.action_count)))


def critic_value(ac: ActorCriticParams, state: ModelState) -> Tensor:
    feat = ad.concat([state.h, state.z], axis=-1)
    hid = ad.tanh(ad.affine(feat, ac.params["critic.w0"], ac.params["critic.b0"]))
    out = ad.affine(hid, ac.params["critic.w1"], ac.params["critic.b1"])
    return ad.reshape(out, out.data.shape[:-1])


def lambda_returns(rewards, conts, values, bootstrap, gamma, lam):
    """TD(lambda) targets computed backward from the bootstrap value."""
    H, B = rewards.shape
    out = np.zeros((H, B), dtype=np.float64)
    nxt = bootstrap.astype(np.float64)
    next_value = bootstrap.astype(np.float64)
    for j in range(H - 1, -1, -1):
        out[j] = rewards[j] + gamma * conts[j] * ((1 - lam) * next_value + lam * nxt)
        nxt = out[j]
        next_value = values[j]
    return out


def train_actor_critic(
    wm: WorldModelParams,
    ac: ActorCriticParams,
    buffer: ReplayBuffer,
    config: TrainConfig,
    steps: int,
    rng: np.random.Generator,
    actor_opt: AdamState | None = None,
    critic_opt: AdamState | None = None,
) -> list[dict]:
    """Policy-gradient steps on imagined rollouts from replayed start states."""
    cfg = wm.cfg
    actor_opt = actor_opt if actor_opt is not None else AdamState()
    critic_opt = critic_opt if critic_opt is not None else AdamState()
    trace = []
    for step in range(steps):
        batch, _ = buffer.sample(rng, config.batch_size, config.seq_len)
        h, z = _detached_features(wm, batch, rng)
        # one start state per batch row: the final position of each subsequence
        B = config.batch_size
        idx = np.arange((config.seq_len - 1) * B, config.seq_len * B)
        state = ModelState(Tensor(h[idx]), Tensor(z[idx]))

        log_probs, entropies, value_nodes = [], [], []
        rewards, conts, values = [], [], []
        H = config.imagination_horizon
        for _ in range(H):
            logits = actor_logits(ac, state)
            probs = ad.softmax_np(logits.data)
            acts = np.array([rng.choice(cfg.action_count, p=p) for p in probs])
            onehot = onehot_actions(acts, cfg.action_count)
            logp = ad.sum_(ad.mul(ad.log_softmax(logits), onehot), axis=-1)
            ent = entropy_categorical(
                Categorical(ad.reshape(logits, (B, 1, cfg.action_count))))
            v = critic_value(ac, state)
            nxt, _ = imagine_step(wm, state, Tensor(onehot), rng)
            state = nxt.detached()
            log_probs.append(logp)
            entropies.append(ent)
            value_nodes.append(v)
            rewards.append(predict_reward(wm, state).data.copy())
            conts.append(predict_continue(wm, state).data.copy())
            values.append(v.data.copy())
        bootstrap = critic_value(ac, state).data
        returns = lambda_returns(np.stack(rewards), np.stack(conts),
                                 np.stack(values), bootstrap,
                                 config.gamma, config.return_lambda)
        if not np.all(np.isfinite(returns)):
            logger.warning("train_actor_critic: non-finite return at step %d; skipped", step)
            continue
        weights = np.ones((H, B), dtype=np.float32)
        for j in range(1, H):
            weights[j] = weights[j - 1] * config.gamma * conts[j - 1]

        adv = (returns - np.stack(values)).astype(np.float32)
        adv = (adv - adv.mean()) / (adv.std() + 1e-6)  # standardized baseline-corrected signal
        actor_terms = []
        critic_terms = []
        for j in range(H):
            w = weights[j]
            actor_terms.append(ad.sum_(ad.mul(log_probs[j], Tensor(adv[j] * w))))
            actor_terms.append(ad.scale(ad.sum_(ad.mul(entropies[j], Tensor(w))),
                                        config.entropy_coef))
            delta = ad.sub(value_nodes[j], Tensor(returns[j].astype(np.float32)))
            critic_terms.append(ad.sum_(ad.mul(ad.mul(delta, delta), Tensor(w))))
        actor_loss = ad.scale(ad.concat([ad.reshape(t, (1,)) for t in actor_terms], axis=0),
                              -1.0 / (H * B))
        actor_loss = ad.sum_(actor_loss)
        critic_loss = ad.scale(
            ad.sum_(ad.concat([ad.reshape(t, (1,)) for t in critic_terms], axis=0)),
            1.0 / (H * B))
        backward(actor_loss)
        adam_update(ac.actor(), actor_opt, config.actor_lr)
        backward(critic_loss)
        adam_update(ac.critic(), critic_opt, config.critic_lr)
        trace.append({
            "step": step,
            "mean_return": float(returns.mean()),
            "actor_entropy": float(np.mean([e.data.mean() for e in entropies])),
            "critic_loss": float(critic_loss.data),
        })
    return trace


# ---------------------------------------------------------------------------
# experience collection


def collect_experience(
    env,
    wm: WorldModelParams,
    ac: ActorCriticParams,
    buffer: ReplayBuffer,
    steps: int,
    rng: np.random.Generator,
    epsilon: float = 0.0,
) -> int:
    """Run on-policy episodes (epsilon-uniform exploration) into the buffer.

    Whole episodes are stored; collection stops once ``steps`` env steps have
    accumulated. Returns the number of steps actually collected.
    """
    cfg = wm.cfg
    collected = 0
    while collected < steps:
        obs = env.reset(int(rng.integers(2**31 - 1)))
        ep_obs, ep_act, ep_rew, ep_cont = [obs], [-1], [0.0], [1.0]
        h = np.zeros(cfg.h, dtype=np.float32)
        z = np.zeros(cfg.latent, dtype=np.float32)
        prev_a = -1
        while not env.done:
            state, _, _ = observe_step(
                wm, ModelState(Tensor(h), Tensor(z)),
                Tensor(onehot_actions(np.array(prev_a), cfg.action_count)),
                Tensor(obs), rng)
            h, z = state.h.data, state.z.data
            if rng.random() < epsilon:
                action = int(rng.integers(env.action_count))
            else:
                probs = ad.softmax_np(actor_logits(ac, state).data)
                action = int(rng.choice(cfg.action_count, p=probs))
            res = env.step(action)
            obs = res.observation
            ep_obs.append(obs)
            ep_act.append(action)
            ep_rew.append(res.reward)
            ep_cont.append(float(res.cont))
            prev_a = action
            collected += 1
        buffer.add_episode(np.stack(ep_obs), np.array(ep_act), np.array(ep_rew),
                           np.array(ep_cont))
    return collected
