"""Train a small world model on the partially-observable maze.

Collects random-walk experience, runs a few hundred evidence-bound steps,
and prints the loss terms plus a side-by-side of an observation and its
reconstruction. Takes about a minute. Run: python3 demos/02_train_world_model.py
"""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from wmrefine.autodiff import Tensor
from wmrefine.envs import YMaze
from wmrefine.trainer import (
    ReplayBuffer,
    TrainConfig,
    collect_experience,
    init_actor_critic,
    onehot_actions,
    train_world_model,
)
from wmrefine.world_model import (
    ModelConfig,
    ModelState,
    decode,
    init_world_model,
    observe_step,
)

env = YMaze("po", horizon=80)
cfg = ModelConfig(obs_dim=env.obs_dim, action_count=3, h=48, groups=4, classes=4,
                  hidden=48, ensemble=2, ensemble_hidden=16)
train_cfg = TrainConfig(batch_size=8, seq_len=8)
rng = np.random.default_rng(0)

wm = init_world_model(cfg, rng)
ac = init_actor_critic(cfg, rng)
print(f"world model: {wm.param_count} parameters")

buffer = ReplayBuffer(20_000)
collect_experience(env, wm, ac, buffer, 1200, rng, epsilon=1.0)
print(f"replay buffer: {len(buffer)} steps over {buffer.episode_count} episodes")

result = train_world_model(wm, buffer, train_cfg, 400, rng)
for row in result["trace"][::100] + [result["trace"][-1]]:
    print(f"step {row['step']:3d}  loss {row['loss']:7.2f}  recon_mse {row['recon_mse']:.4f}"
          f"  kl {row['kl']:.3f}")

# reconstruct the first observation of a stored episode
obs = buffer.episodes[0]["obs"][3]
state, _, _ = observe_step(
    wm,
    ModelState(Tensor(np.zeros(cfg.h, np.float32)), Tensor(np.zeros(cfg.latent, np.float32))),
    Tensor(onehot_actions(np.array(-1), 3)), Tensor(obs), rng, sample=False)
recon = decode(wm, state).data

rows, cols, ch = env.obs_spatial_shape
labels = " #.SDT"
print("\nobservation vs reconstruction (argmax channel per cell):")
for r in range(rows):
    left = "".join(labels[int(np.argmax(obs.reshape(rows, cols, ch)[r, c]))]
                   for c in range(cols))
    right = "".join(labels[int(np.argmax(recon.reshape(rows, cols, ch)[r, c]))]
                    for c in range(cols))
    print(f"  {left}    {right}")
