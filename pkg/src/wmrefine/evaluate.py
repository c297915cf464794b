"""Episode execution for baseline and refinement arms, plus the comparison
statistics: Welch and paired t-tests, immediate-impact accounting, and the
threshold-bucket breakdown over matched-seed episode pairs.

Both arms run the same code path (the baseline is the refinement engine with
its objective disabled), use deterministic mode-based latent and action
selection, and record reconstruction metrics at every step; the refinement
arm records them both before and after the updates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .autodiff import Tensor
from .metrics import metric_triple
from .refine import IIConfig, refine
from .trainer import ActorCriticParams, onehot_actions
from .world_model import ModelState, WorldModelParams, decode, observe_step

logger = logging.getLogger(__name__)

METRICS = ("score", "length", "mse", "psnr", "ssim")


@dataclass
class StepRecord:
    reward: float
    mse_pre: float
    psnr_pre: float
    ssim_pre: float
    mse_post: float | None = None
    psnr_post: float | None = None
    ssim_post: float | None = None
    obj_first: float | None = None
    obj_last: float | None = None
    grad_norm_mean: float | None = None
    flags: str = ""


@dataclass
class EpisodeRecord:
    seed: int
    mode: str  # "baseline" or "ii"
    steps: list = field(default_factory=list)
    score: float = 0.0
    length: int = 0
    flags: str = ""

    def step_values(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.steps], dtype=np.float64)

    def metric(self, name: str) -> float:
        """Episode-level value: score/length, or a mean reconstruction metric
        (post-refinement values where they exist, else pre)."""
        if name == "score":
            return self.score
        if name == "length":
            return float(self.length)
        post = [getattr(s, f"{name}_post") for s in self.steps]
        if all(v is not None for v in post) and post:
            return float(np.mean(post))
        return float(np.mean(self.step_values(f"{name}_pre")))


def run_episode(
    wm: WorldModelParams,
    ac: ActorCriticParams,
    env,
    ii_config: IIConfig,
    seed: int,
) -> EpisodeRecord:
    """One evaluation episode; the arm is decided by ii_config.objective.

    Model states are advanced with mode-selected latents in both arms; the
    refinement arm carries the refined state forward. Refinement draws come
    from a (seed, step)-keyed stream so arms never perturb the env stream.
    """
    cfg = wm.cfg
    record = EpisodeRecord(seed=seed, mode="ii" if ii_config.active else "baseline")
    obs = env.reset(seed)
    spatial = env.obs_spatial_shape
    h = np.zeros(cfg.h, dtype=np.float32)
    z = np.zeros(cfg.latent, dtype=np.float32)
    prev_a = -1
    obs_rng = np.random.default_rng(seed)  # unused by mode selection; kept for parity
    while not env.done:
        try:
            prev = ModelState(Tensor(h), Tensor(z))
            action_onehot = Tensor(onehot_actions(np.array(prev_a), cfg.action_count))
            post_state, _, _ = observe_step(wm, prev, action_onehot, Tensor(obs),
                                            obs_rng, sample=False)
            pre = metric_triple(obs, decode(wm, post_state).data, spatial)
            result = refine(wm, ac, post_state.h.data, obs, ii_config,
                            np.random.default_rng([seed, env.t]))
            step = StepRecord(reward=0.0, mse_pre=pre[0], psnr_pre=pre[1], ssim_pre=pre[2])
            if ii_config.active:
                post = metric_triple(obs, decode(wm, result.state).data, spatial)
                step.mse_post, step.psnr_post, step.ssim_post = post
                step.obj_first = result.trace.objective_first
                step.obj_last = result.trace.objective_last
                step.grad_norm_mean = result.trace.grad_norm_mean
                step.flags = ";".join(result.trace.flags)
            h = result.state.h.data
            z = result.state.z.data
            prev_a = int(np.argmax(result.action))
            res = env.step(prev_a)
        except (RuntimeError, ValueError) as err:
            record.flags = f"truncated:{err}"
            logger.warning("run_episode seed=%d truncated: %s", seed, err)
            break
        obs = res.observation
        step.reward = res.reward
        record.steps.append(step)
        record.score += res.reward
    record.length = len(record.steps)
    return record


_WORKER: dict = {}


def _worker_init(wm, ac, task, horizon, ii_config):
    from .envs import make_env

    _WORKER["wm"] = wm
    _WORKER["ac"] = ac
    _WORKER["env"] = make_env(task, horizon or None)
    _WORKER["ii"] = ii_config


def _worker_run(seed: int) -> EpisodeRecord:
    return run_episode(_WORKER["wm"], _WORKER["ac"], _WORKER["env"], _WORKER["ii"], seed)


def run_episodes(wm, ac, task: str, ii_config: IIConfig, seeds,
                 horizon: int | None = None, workers: int = 1):
    """Evaluate many seeds, optionally over a process pool.

    Results depend only on the seed list (each episode derives all of its
    randomness from its seed), so the worker count never changes the output.
    """
    if workers <= 1:
        _worker_init(wm, ac, task, horizon, ii_config)
        try:
            return [_worker_run(seed) for seed in seeds]
        finally:
            _WORKER.clear()
    import multiprocessing as mp

    try:
        with mp.Pool(workers, initializer=_worker_init,
                     initargs=(wm, ac, task, horizon, ii_config)) as pool:
            return pool.map(_worker_run, list(seeds))
    except (OSError, mp.ProcessError):  # constrained environments: run inline
        logger.warning("run_episodes: process pool unavailable, running sequentially")
        return run_episodes(wm, ac, task, ii_config, seeds, horizon, workers=1)


# ---------------------------------------------------------------------------
# statistics


def welch_test(a, b):
    """Two-sample t-test without equal-variance assumption; p=1 for two
    identical constant samples."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        return None
    if np.var(a) == 0.0 and np.var(b) == 0.0:
        return 1.0 if np.mean(a) == np.mean(b) else 0.0
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


def paired_test(diffs):
    """One-sample t-test of mean(diff) = 0; p=1 for all-zero differences."""
    d = np.asarray(diffs, dtype=np.float64)
    if len(d) < 2:
        return None
    if np.all(d == d[0]):
        return 1.0 if d[0] == 0.0 else 0.0
    return float(stats.ttest_1samp(d, 0.0).pvalue)


@dataclass
class MetricComparison:
    metric: str
    baseline_mean: float
    baseline_std: float
    ii_mean: float
    ii_std: float
    welch_p: float | None
    paired_p: float | None
    n_pairs: int
    significant: bool


@dataclass
class ComparisonSummary:
    metrics: dict
    n_baseline: int
    n_ii: int
    flags: list = field(default_factory=list)

    def __getitem__(self, name: str) -> MetricComparison:
        return self.metrics[name]


def match_pairs(baseline, ii):
    """Seed-matched (baseline, ii) record pairs."""
    by_seed = {r.seed: r for r in baseline}
    return [(by_seed[r.seed], r) for r in ii if r.seed in by_seed]


def compare(baseline, ii) -> ComparisonSummary:
    """Per-metric means/stds for both arms with Welch (unpaired) and paired
    (matched seeds) tests; significance flagged at p < 0.05."""
    if not baseline or not ii:
        raise ValueError("compare requires non-empty record lists")
    flags = []
    if len(baseline) < 2 or len(ii) < 2:
        flags.append("too_few_episodes_for_p_values")
    pairs = match_pairs(baseline, ii)
    metrics = {}
    for name in METRICS:
        a = np.array([r.metric(name) for r in baseline])
        b = np.array([r.metric(name) for r in ii])
        welch_p = welch_test(a, b)
        paired_p = None
        if len(pairs) >= 2:
            diffs = [pb.metric(name) - pa.metric(name) for pa, pb in pairs]
            paired_p = paired_test(diffs)
        p_best = paired_p if paired_p is not None else welch_p
        metrics[name] = MetricComparison(
            metric=name,
            baseline_mean=float(a.mean()), baseline_std=float(a.std(ddof=1)) if len(a) > 1 else 0.0,
            ii_mean=float(b.mean()), ii_std=float(b.std(ddof=1)) if len(b) > 1 else 0.0,
            welch_p=welch_p, paired_p=paired_p, n_pairs=len(pairs),
            significant=(p_best is not None and p_best < 0.05),
        )
    return ComparisonSummary(metrics=metrics, n_baseline=len(baseline), n_ii=len(ii), flags=flags)


def immediate_impact(ii_records, metric: str = "mse"):
    """Mean per-step change (post - pre) of a reconstruction metric across all
    steps of the given refinement-arm records, with a paired test."""
    pre, post = [], []
    for rec in ii_records:
        for s in rec.steps:
            p = getattr(s, f"{metric}_post")
            if p is not None:
                pre.append(getattr(s, f"{metric}_pre"))
                post.append(p)
    if not pre:
        return {"mean_delta": float("nan"), "p": None, "n": 0}
    diffs = np.array(post) - np.array(pre)
    return {"mean_delta": float(diffs.mean()), "p": paired_test(diffs), "n": len(diffs)}


@dataclass
class BucketRow:
    threshold: float
    pct_episodes: float
    n: int
    baseline_mean: float | None
    ii_mean: float | None
    paired_p: float | None
    significant: bool


def threshold_analysis(pairs, thresholds) -> list[BucketRow]:
    """Bucket matched pairs by baseline score below each threshold.

    Buckets are nested: the episode share can only shrink as the threshold
    drops. Empty buckets produce rows with null means.
    """
    if not pairs:
        raise ValueError("threshold_analysis requires matched pairs")
    for a, b in pairs:
        if a.seed != b.seed:
            raise ValueError("threshold_analysis pairs must share seeds")
    total = len(pairs)
    rows = []
    for thr in thresholds:
        bucket = [(a, b) for a, b in pairs if a.score < thr]
        if not bucket:
            rows.append(BucketRow(thr, 0.0, 0, None, None, None, False))
            continue
        base = np.array([a.score for a, _ in bucket])
        iis = np.array([b.score for _, b in bucket])
        p = paired_test(iis - base)
        rows.append(BucketRow(
            threshold=thr,
            pct_episodes=100.0 * len(bucket) / total,
            n=len(bucket),
            baseline_mean=float(base.mean()),
            ii_mean=float(iis.mean()),
            paired_p=p,
            significant=(p is not None and p < 0.05 and float(iis.mean()) != float(base.mean())),
        ))
    return rows
