"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s``. The shared agent fixture
(20k world-model steps on the partially-observable maze) trains once and is
cached under tests/.acceptance_cache; the first run takes ~25 minutes on two
CPU cores, later runs reuse the cache.
"""

import math
import time

import numpy as np
import pytest

from wmrefine import autodiff as ad
from wmrefine.autodiff import Tensor, backward
from wmrefine.distributions import (
    Categorical,
    entropy_categorical,
    kl_categorical,
)
from wmrefine.envs import YMaze
from wmrefine.evaluate import immediate_impact, paired_test, run_episode
from wmrefine.metrics import mse, ssim
from wmrefine.refine import IIConfig, refine, reg_term, rollout, obj_pig
from wmrefine.trainer import critic_value, init_actor_critic, onehot_actions
from wmrefine.world_model import ModelState, observe_step, zero_world_model, ModelConfig

import acceptance_support as fx
from helpers import finite_diff

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="session")
def fixture():
    return fx.build_fixture()


# ---------------------------------------------------------------------------
# 1. autodiff soundness


def _random_graph(seed):
    """A random composite of the engine's ops with a few hundred parameters."""
    rng = np.random.default_rng(seed)
    b = int(rng.integers(2, 5))
    d0 = int(rng.integers(4, 10))
    widths = [d0] + [int(rng.integers(4, 14)) for _ in range(int(rng.integers(2, 4)))]
    groups = int(rng.integers(1, 4))
    classes = int(rng.integers(2, 5))
    arrays = [rng.standard_normal((b, d0))]
    for a, w in zip(widths[:-1], widths[1:]):
        arrays.append(rng.standard_normal((a, w)) * 0.7)
        arrays.append(rng.standard_normal(w) * 0.1)
    arrays.append(rng.standard_normal((widths[-1], groups * classes)) * 0.7)
    arrays.append(rng.standard_normal(groups * classes) * 0.1)
    arrays.append(rng.standard_normal((b, groups, classes)))

    def build(*leaves):
        x = leaves[0]
        k = 1
        h = x
        for _ in widths[1:]:
            w, bias = leaves[k], leaves[k + 1]
            k += 2
            pre = ad.affine(h, w, bias)
            h = ad.tanh(pre) if (k // 2) % 2 else ad.sigmoid(pre)
        wq, bq, other = leaves[k], leaves[k + 1], leaves[k + 2]
        logits = ad.reshape(ad.affine(h, wq, bq), (b, groups, classes))
        q = Categorical(logits)
        p = Categorical(other)
        mixed = ad.add(kl_categorical(q, p), ad.scale(entropy_categorical(q), 0.5))
        gated = ad.maximum_const(mixed, 0.05)
        return ad.add(ad.mean(gated), ad.mean(ad.mul(h, h)))

    return build, arrays


def test_criterion_01_autodiff_soundness():
    t0 = time.time()
    checked = 0
    total_params = 0
    for seed in range(20):
        build, arrays = _random_graph(seed)
        total_params += sum(a.size for a in arrays)
        assert sum(a.size for a in arrays) <= 10_000
        leaves = [Tensor(a.copy()) for a in arrays]
        backward(build(*leaves))

        def numeric(*raw):
            return float(build(*[Tensor(r) for r in raw]).data)

        fd = finite_diff(numeric, [a.copy() for a in arrays], h=1e-4)
        for leaf, g in zip(leaves, fd):
            mask = np.abs(leaf.grad) > 1e-6
            rel = np.abs(leaf.grad - g)[mask] / np.maximum(
                np.abs(leaf.grad), np.abs(g))[mask]
            assert rel.size == 0 or rel.max() < 1e-3
            checked += int(mask.sum())
    elapsed = time.time() - t0
    ok = elapsed < 120
    fx.report(1, "autodiff soundness", ok,
              f"20 graphs, {total_params} params, {checked} coords vs central "
              f"differences, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. exact trivial values


def test_criterion_02_exact_trivial_values():
    rng = np.random.default_rng(0)
    details = []

    logits = rng.standard_normal((3, 4)).astype(np.float32)
    kl_same = abs(float(kl_categorical(Categorical(Tensor(logits)),
                                       Categorical(Tensor(logits.copy()))).data))
    details.append(f"KL(q,q)={kl_same:.1e}")
    assert kl_same <= 1e-9

    cfg = ModelConfig(obs_dim=4, action_count=2, h=6, groups=2, classes=3,
                      hidden=6, ensemble=3, ensemble_hidden=4)
    wm = zero_world_model(cfg)
    for name, t in wm.params.items():
        if name.startswith("ens0"):
            t.data[...] = rng.standard_normal(t.data.shape).astype(np.float32)
    for k in (1, 2):
        for sfx in ("w0", "b0", "w1", "b1"):
            wm.params[f"ens{k}.{sfx}"].data[...] = wm.params[f"ens0.{sfx}"].data
    ac = init_actor_critic(cfg, rng)
    start = ModelState(Tensor(rng.standard_normal((2, 6)).astype(np.float32)),
                       Tensor(np.tile([1, 0, 0, 1, 0, 0], (2, 1)).astype(np.float32)))
    pig = float(obj_pig(wm, rollout(wm, ac, start, 1, np.random.default_rng(1))).data)
    details.append(f"identical-ensemble PIG={pig}")
    assert pig == 0.0

    sat = Categorical(Tensor(np.tile([1e4, 0.0, 0.0], (2, 1)).astype(np.float32)))
    ent = float(entropy_categorical(sat).data)
    details.append(f"saturated ENT={ent:.1e}")
    assert ent <= 1e-6

    base = rng.standard_normal((2, 3))
    z0 = Categorical(Tensor(base.copy()))
    zi_logits = Tensor(base.copy())
    out = reg_term(z0, Categorical(zi_logits), free_bits=1.0)
    backward(out)
    details.append(f"reg@i0={float(out.data)}")
    assert float(out.data) == pytest.approx(1.0, abs=1e-9)
    assert np.all(zi_logits.grad == 0.0)

    x = rng.random((7, 7, 2))
    details.append(f"ssim(x,x)={ssim(x, x):.12f} mse(x,x)={mse(x, x)}")
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)
    assert mse(x, x) == 0.0

    fx.report(2, "exact trivial values", True, "; ".join(details))


# ---------------------------------------------------------------------------
# 3. no-op equivalences


def test_criterion_03_noop_equivalences(fixture):
    wm, ac, _ = fx.load_agent(fx.EVAL_CHECKPOINT)
    arms = {
        "baseline": IIConfig(),
        "alpha0": IIConfig(objective="sig", n=fx.II_N, s=fx.II_S, rollout_len=1,
                           alpha=0.0),
        "n0": IIConfig(objective="sig", n=0, s=fx.II_S, rollout_len=1, alpha=0.5),
        "none_again": IIConfig(objective="none"),
    }
    mismatches = []
    for seed in range(5):
        records = {}
        for name, cfg in arms.items():
            records[name] = run_episode(wm, ac, fx.make_env(), cfg, seed)
        base = records["baseline"]
        for name in ("alpha0", "n0", "none_again"):
            rec = records[name]
            same = (rec.length == base.length and rec.score == base.score)
            for sa, sb in zip(rec.steps, base.steps):
                same &= (sa.reward == sb.reward and sa.mse_pre == sb.mse_pre
                         and sa.psnr_pre == sb.psnr_pre and sa.ssim_pre == sb.ssim_pre)
                if name in ("alpha0", "n0"):
                    same &= (sa.mse_post == sa.mse_pre and sa.ssim_post == sa.ssim_pre
                             and sa.psnr_post == sa.psnr_pre)
            if not same:
                mismatches.append((seed, name))
    ok = not mismatches
    fx.report(3, "no-op equivalences", ok,
              "alpha=0, n=0, objective=none all bit-identical to baseline over 5 seeds"
              if ok else f"mismatches: {mismatches}")
    assert ok


# ---------------------------------------------------------------------------
# 4. training efficacy


def _held_out_episodes(n=6):
    episodes = []
    rng = np.random.default_rng(777)
    for i in range(n):
        env = fx.make_env()
        obs = env.reset(fx.HELD_OUT_BASE_SEED + i)
        seq_obs, seq_act = [obs], [-1]
        while not env.done:
            a = int(rng.integers(3))
            res = env.step(a)
            seq_obs.append(res.observation)
            seq_act.append(a)
        episodes.append((np.stack(seq_obs), np.array(seq_act)))
    return episodes


def _replay_mse(wm, episodes):
    from wmrefine.world_model import decode

    errs = []
    for seq_obs, seq_act in episodes:
        h = np.zeros(wm.cfg.h, np.float32)
        z = np.zeros(wm.cfg.latent, np.float32)
        rng = np.random.default_rng(0)
        for t in range(len(seq_obs)):
            st, _, _ = observe_step(
                wm, ModelState(Tensor(h), Tensor(z)),
                Tensor(onehot_actions(np.array(seq_act[t]), 3)),
                Tensor(seq_obs[t]), rng, sample=False)
            errs.append(mse(seq_obs[t], decode(wm, st).data))
            h, z = st.h.data, st.z.data
    return float(np.mean(errs))


def _uniform_scores(n=100):
    out = []
    for seed in range(n):
        env = fx.make_env()
        env.reset(seed)
        rng = np.random.default_rng([seed, 99])
        total = 0.0
        while not env.done:
            total += env.step(int(rng.integers(3))).reward
        out.append(total)
    return np.array(out)


def test_criterion_04_training_efficacy(fixture):
    held = _held_out_episodes()
    wm_init, _, _ = fx.load_agent("ckpt_init")
    wm_final, ac_final, _ = fx.load_agent("ckpt_20000")
    mse_init = _replay_mse(wm_init, held)
    mse_final = _replay_mse(wm_final, held)
    drop = 1.0 - mse_final / mse_init

    losses = fx.loss_trace()[:5000]
    ema = []
    acc = losses[0]
    k = 2.0 / 501.0
    for v in losses:
        acc = acc + k * (v - acc)
        ema.append(acc)
    milestones = [ema[i] for i in range(999, 5000, 1000)]
    smooth_ok = all(b <= a + 1e-6 for a, b in zip(milestones, milestones[1:]))

    trained = fx.evaluate_arm("ckpt_20000", "none", 0, 100)
    t_scores = np.array([r.score for r in trained])
    u_scores = _uniform_scores(100)
    se = math.sqrt(t_scores.var(ddof=1) / 100 + u_scores.var(ddof=1) / 100)
    margin = (t_scores.mean() - u_scores.mean()) / se

    runtime_ok = fixture["train_seconds"] <= 1800
    ok = drop >= 0.5 and margin >= 3.0 and smooth_ok and runtime_ok
    fx.report(4, "training efficacy", ok,
              f"held-out MSE {mse_init:.4f}->{mse_final:.4f} ({100*drop:.0f}% drop); "
              f"actor {t_scores.mean():.3f} vs uniform {u_scores.mean():.3f} "
              f"(+{margin:.1f} SE); smoothed loss monotone={smooth_ok}; "
              f"train {fixture['train_seconds']:.0f}s")
    assert drop >= 0.5
    assert margin >= 3.0
    assert smooth_ok
    assert runtime_ok


def test_trained_critic_ranks_rewarding_states(fixture):
    """Post-training evaluation oracle: the critic should value a state next
    to a collected checkpoint above the neutral start state."""
    wm, ac, _ = fx.load_agent("ckpt_20000")
    records = fx.evaluate_arm("ckpt_20000", "none", 0, 100)
    good_seeds = [r.seed for r in records if r.score > 0.5]
    assert good_seeds, "no rewarding episodes to probe"
    start_vals, reward_vals = [], []
    for seed in good_seeds[:10]:
        env = fx.make_env()
        obs = env.reset(seed)
        h = np.zeros(wm.cfg.h, np.float32)
        z = np.zeros(wm.cfg.latent, np.float32)
        prev = -1
        rng = np.random.default_rng(0)
        done_val = None
        while not env.done:
            st, _, _ = observe_step(wm, ModelState(Tensor(h), Tensor(z)),
                                    Tensor(onehot_actions(np.array(prev), 3)),
                                    Tensor(obs), rng, sample=False)
            h, z = st.h.data, st.z.data
            if env.t == 0:
                start_vals.append(float(critic_value(ac, st).data))
            from wmrefine.trainer import actor_logits
            prev = int(np.argmax(actor_logits(ac, st).data))
            res = env.step(prev)
            obs = res.observation
            if res.reward > 0.2:
                done_val = float(critic_value(ac, st).data)
        if done_val is not None:
            reward_vals.append(done_val)
    assert np.mean(reward_vals) > np.mean(start_vals)


# ---------------------------------------------------------------------------
# 5. tuned-alpha descent


def test_criterion_05_tuned_alpha_descent(fixture):
    from wmrefine.refine import _episode_objective_stats

    details = []
    ok = True
    for ckpt in ("ckpt_2500", "ckpt_10000", "ckpt_20000"):
        scale, alpha = fx.calibration(ckpt, "sig")
        wm, ac, _ = fx.load_agent(ckpt)
        cfg = IIConfig(objective="sig", n=fx.II_N, s=fx.II_S, rollout_len=1,
                       alpha=alpha, objective_scale=scale)
        firsts, lasts = _episode_objective_stats(wm, ac, fx.make_env(), cfg, seed=600)
        descends = float(lasts.mean()) <= float(firsts.mean())
        ok &= descends
        details.append(f"{ckpt}: alpha={alpha:.3g} {firsts.mean():.4f}->{lasts.mean():.4f}")
    fx.report(5, "tuned-alpha descent (n=10)", ok, "; ".join(details))
    assert ok


# ---------------------------------------------------------------------------
# 6. immediate impact (Fig. 2 direction)


def test_criterion_06_immediate_impact(fixture):
    sig = fx.evaluate_arm(fx.EVAL_CHECKPOINT, "sig", 1, 30)
    imp = immediate_impact(sig, "mse")
    sig_ok = imp["mean_delta"] < 0 and imp["p"] is not None and imp["p"] < 0.05

    pig = fx.evaluate_arm(fx.EVAL_CHECKPOINT, "pig", 1, 30)
    pig_imp = immediate_impact(pig, "mse")
    pig_improving = pig_imp["mean_delta"] < 0 and (pig_imp["p"] or 1.0) < 0.05
    ok = sig_ok and not pig_improving
    fx.report(6, "immediate impact", ok,
              f"SIG lam=1 mean(mse_post-mse_pre)={imp['mean_delta']:+.2e} "
              f"(p={imp['p']:.2e}, n={imp['n']}); PIG delta={pig_imp['mean_delta']:+.2e} "
              f"(p={pig_imp['p']:.2e}) improving={pig_improving}")
    assert sig_ok
    assert not pig_improving


# ---------------------------------------------------------------------------
# 7. rollout-length contrast


def test_criterion_07_rollout_length_contrast(fixture):
    base = fx.evaluate_arm(fx.EVAL_CHECKPOINT, "none", 0, 30)
    lam1 = fx.evaluate_arm(fx.EVAL_CHECKPOINT, "sig", 1, 30)
    lam8 = fx.evaluate_arm(fx.EVAL_CHECKPOINT, "sig", 8, 30)
    base_mse = np.mean([r.metric("mse") for r in base])

    def overall_improvement(recs):
        return base_mse - np.mean([r.metric("mse") for r in recs])

    def immediate_improvement(recs):
        return -immediate_impact(recs, "mse")["mean_delta"]

    over1, over8 = overall_improvement(lam1), overall_improvement(lam8)
    imm1, imm8 = immediate_improvement(lam1), immediate_improvement(lam8)
    ok = (over8 > over1) and (imm1 > imm8)
    fx.report(7, "rollout-length contrast", ok,
              f"overall improvement lam8 {over8:+.2e} vs lam1 {over1:+.2e}; "
              f"immediate improvement lam1 {imm1:+.2e} vs lam8 {imm8:+.2e}")
    assert over8 > over1
    assert imm1 > imm8


# ---------------------------------------------------------------------------
# 8. threshold-bucket pattern (Table 1 direction)


def test_criterion_08_threshold_buckets(fixture):
    base = fx.evaluate_arm(fx.EVAL_CHECKPOINT, "none", 0, 100)
    ii = fx.evaluate_arm(fx.EVAL_CHECKPOINT, "sig", 1, 100)
    b = np.array([r.score for r in base])
    i = np.array([r.score for r in ii])
    med = float(np.median(b))
    below = b < med
    d_below = (i - b)[below]
    d_above = (i - b)[~below]
    p_below = paired_test(d_below)
    ok = (d_below.mean() > d_above.mean() and d_below.mean() > 0
          and p_below is not None and p_below < 0.05)
    fx.report(8, "threshold buckets", ok,
              f"median {med:.3f}; below-median delta {d_below.mean():+.4f} "
              f"(n={below.sum()}, p={p_below:.3g}); above-median delta "
              f"{d_above.mean():+.4f} (n={(~below).sum()})")
    assert d_below.mean() > d_above.mean()
    assert d_below.mean() > 0
    assert p_below < 0.05


# ---------------------------------------------------------------------------
# 9. entropy-objective null


def test_criterion_09_entropy_null(fixture):
    base = fx.evaluate_arm(fx.EVAL_CHECKPOINT, "none", 0, 100)
    ent = fx.evaluate_arm(fx.EVAL_CHECKPOINT, "ent", 1, 100)
    from wmrefine.evaluate import compare

    summary = compare(base, ent)
    details = []
    ok = True
    for metric in ("score", "mse", "psnr", "ssim"):
        c = summary[metric]
        if metric in ("score", "psnr", "ssim"):
            improving = c.ii_mean > c.baseline_mean
        else:
            improving = c.ii_mean < c.baseline_mean
        p = c.paired_p if c.paired_p is not None else c.welch_p
        significant_improvement = improving and p is not None and p < 0.05
        ok &= not significant_improvement
        details.append(f"{metric}: p={p:.3g}{' IMPROVES' if significant_improvement else ''}")
    fx.report(9, "entropy-objective null", ok, "; ".join(details))
    assert ok


# ---------------------------------------------------------------------------
# 10. Monte-Carlo scaling


def test_criterion_10_monte_carlo_scaling(fixture):
    wm, ac, _ = fx.load_agent(fx.EVAL_CHECKPOINT)
    env = fx.make_env()
    obs = env.reset(0)
    st, _, _ = observe_step(wm, ModelState(Tensor(np.zeros(wm.cfg.h, np.float32)),
                                           Tensor(np.zeros(wm.cfg.latent, np.float32))),
                            Tensor(onehot_actions(np.array(-1), 3)),
                            Tensor(obs), np.random.default_rng(0), sample=False)
    h0 = st.h.data

    def estimates(s, repeats=200):
        vals = []
        for r in range(repeats):
            cfg = IIConfig(objective="sig", n=0, s=s, rollout_len=3)
            result = refine(wm, ac, h0, obs, cfg, np.random.default_rng(3000 + r))
            vals.append(result.trace.entries[0].objective)
        return np.array(vals)

    v1 = float(np.var(estimates(1)))
    v16 = float(np.var(estimates(16)))
    ratio = v1 / v16
    ok = 8.0 <= ratio <= 32.0
    fx.report(10, "Monte-Carlo scaling", ok,
              f"var(s=1)={v1:.3e} var(s=16)={v16:.3e} ratio={ratio:.1f} (ideal 16)")
    assert ok


# ---------------------------------------------------------------------------
# 11. determinism & persistence


def test_criterion_11_determinism_and_persistence(fixture, tmp_path):
    from wmrefine.checkpoint import load_checkpoint, save_checkpoint
    from wmrefine.cli import main

    src = fx.CACHE / f"{fx.EVAL_CHECKPOINT}.wmck"
    wm, ac, steps, meta = load_checkpoint(src)
    resaved = tmp_path / "resaved.wmck"
    save_checkpoint(resaved, wm, ac, steps, meta["config_hash"])
    roundtrip_ok = resaved.read_bytes() == src.read_bytes()

    cfg_text = f"""
[run]
task = ymaze-po
horizon = {fx.HORIZON}
seeds = 0..2
deterministic = true

[model]
h = 64
groups = 4
classes = 4
ensemble = 4
hidden = 64
ensemble_hidden = 32

[ii]
objective = sig
n = 2
s = 1
rollout_len = 1
alpha = 0.01
objective_scale = 1.0
"""
    ini = tmp_path / "run.ini"
    ini.write_text(cfg_text)
    outs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        code = main(["eval", "--config", str(ini), "--checkpoint", str(src),
                     "--out", str(out)])
        assert code == 0
        outs.append(next(out.glob("*.csv")).read_bytes())
    csv_ok = outs[0] == outs[1]
    ok = roundtrip_ok and csv_ok
    fx.report(11, "determinism & persistence", ok,
              f"checkpoint round-trip byte-identical={roundtrip_ok}; "
              f"repeated eval CSV byte-identical={csv_ok}")
    assert ok
