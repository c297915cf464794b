"""Matched-seed comparison of the baseline agent and the refinement arm.

Trains a small agent, evaluates both arms on the same seeds, and prints the
metric comparison, the immediate per-step impact, and a threshold-bucket
table over matched pairs. Takes a few minutes.
Run: python3 demos/04_baseline_vs_refinement.py
"""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from wmrefine.envs import YMaze
from wmrefine.evaluate import compare, immediate_impact, match_pairs, run_episodes, threshold_analysis
from wmrefine.refine import IIConfig, calibrate_alpha, calibrate_objective_scale
from wmrefine.trainer import (
    ReplayBuffer,
    TrainConfig,
    collect_experience,
    init_actor_critic,
    train_world_model,
    train_actor_critic,
)
from wmrefine.world_model import ModelConfig, init_world_model

HORIZON = 80
env = YMaze("po", horizon=HORIZON)
cfg = ModelConfig(obs_dim=env.obs_dim, action_count=3, h=48, groups=4, classes=4,
                  hidden=48, ensemble=4, ensemble_hidden=16)
tc = TrainConfig(batch_size=8, seq_len=16, reward_loss_scale=100.0, entropy_coef=0.1,
                 imagination_horizon=20, gamma=0.97)
rng = np.random.default_rng(0)
wm = init_world_model(cfg, rng)
ac = init_actor_critic(cfg, rng)
buffer = ReplayBuffer(30_000)
collect_experience(env, wm, ac, buffer, 2000, rng, epsilon=1.0)
for _ in range(6):
    collect_experience(env, wm, ac, buffer, 400, rng, epsilon=0.3)
    train_world_model(wm, buffer, tc, 400, rng)
    train_actor_critic(wm, ac, buffer, tc, 120, rng)
print("training done; calibrating the refinement arm")

probe = IIConfig(objective="sig", n=10, s=3, rollout_len=1)
scale = calibrate_objective_scale(wm, ac, YMaze("po", horizon=HORIZON), "sig", probe, seed=9001)
alpha = calibrate_alpha(wm, ac, lambda: YMaze("po", horizon=HORIZON), "sig",
                        IIConfig(objective="sig", n=10, s=3, rollout_len=1,
                                 objective_scale=scale),
                        seeds=(9002, 9003, 9004))["alpha"]
print(f"objective scale {scale:.3g}, step size {alpha:.3g}")

seeds = list(range(24))
baseline = run_episodes(wm, ac, "ymaze-po", IIConfig(), seeds, horizon=HORIZON, workers=2)
arm = IIConfig(objective="sig", n=10, s=3, rollout_len=1, alpha=alpha, objective_scale=scale)
refined = run_episodes(wm, ac, "ymaze-po", arm, seeds, horizon=HORIZON, workers=2)

summary = compare(baseline, refined)
print(f"\n{'metric':<8}{'baseline':>10}{'refined':>10}{'p':>10}")
for name, m in summary.metrics.items():
    p = m.paired_p if m.paired_p is not None else m.welch_p
    print(f"{name:<8}{m.baseline_mean:>10.4f}{m.ii_mean:>10.4f}{p:>10.3g}")

imp = immediate_impact(refined, "mse")
print(f"\nimmediate impact on mse: {imp['mean_delta']:+.2e} over {imp['n']} steps "
      f"(p={imp['p']:.2g}; negative means the refined state reconstructs better)")

print(f"\n{'threshold':>10}{'% eps':>8}{'baseline':>10}{'refined':>10}")
pairs = match_pairs(baseline, refined)
for row in threshold_analysis(pairs, [float('inf'), 0.3, 0.0]):
    thr = "all" if row.threshold == float("inf") else f"<{row.threshold:.1f}"
    bm = "n/a" if row.baseline_mean is None else f"{row.baseline_mean:.3f}"
    im = "n/a" if row.ii_mean is None else f"{row.ii_mean:.3f}"
    print(f"{thr:>10}{row.pct_episodes:>7.0f}%{bm:>10}{im:>10}")
