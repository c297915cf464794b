"""Operator entry point: train, eval, compare, and sweep subcommands.

Exit codes: 0 success, 2 configuration error, 3 data error (unreadable or
mismatched checkpoints/CSVs). Every output file embeds the config hash.
"""

from __future__ import annotations

import argparse
import glob as globlib
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff import AdamState
from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_train_state,
    save_checkpoint,
    save_train_state,
)
from .config import ConfigError, RunConfig, config_hash, load_run_config, parse_seed_range
from .envs import make_env
from .evaluate import EpisodeRecord, StepRecord, compare, match_pairs, run_episodes, threshold_analysis
from .refine import IIConfig, calibrate_alpha, calibrate_objective_scale
from .trainer import (
    ReplayBuffer,
    TrainConfig,
    collect_experience,
    init_actor_critic,
    train_actor_critic,
    train_world_model,
)
from .world_model import init_world_model

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

CSV_KIND_EVAL = "wmrefine-eval-csv"
CSV_KIND_TRAIN = "wmrefine-train-csv"
CSV_VERSION = "v1"

STEP_COLUMNS = ("seed", "step", "reward", "mse_pre", "psnr_pre", "ssim_pre",
                "mse_post", "psnr_post", "ssim_post", "obj_iter0", "obj_itern",
                "grad_norm_mean", "flags")


class DataError(RuntimeError):
    pass


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


# ---------------------------------------------------------------------------
# CSV formats


def write_eval_csv(path, records, meta: dict) -> None:
    """One row per step plus one summary row per episode (step = -1)."""
    lines = []
    head = " ".join(f"{k}={v}" for k, v in sorted(meta.items()))
    lines.append(f"# {CSV_KIND_EVAL} {CSV_VERSION} {head}")
    lines.append(",".join(STEP_COLUMNS))
    for rec in records:
        for i, s in enumerate(rec.steps):
            row = (rec.seed, i, s.reward, s.mse_pre, s.psnr_pre, s.ssim_pre,
                   s.mse_post, s.psnr_post, s.ssim_post, s.obj_first, s.obj_last,
                   s.grad_norm_mean, s.flags or "")
            lines.append(",".join(_fmt(v) for v in row))
        summary_flags = f"episode_summary;length={rec.length}"
        if rec.flags:
            summary_flags += f";{rec.flags}"

        def mean_of(name):
            vals = [getattr(s, name) for s in rec.steps]
            if not vals or any(v is None for v in vals):
                return None
            return float(np.mean(vals))

        row = (rec.seed, -1, rec.score,
               mean_of("mse_pre"), mean_of("psnr_pre"), mean_of("ssim_pre"),
               mean_of("mse_post"), mean_of("psnr_post"), mean_of("ssim_post"),
               mean_of("obj_first"), mean_of("obj_last"), mean_of("grad_norm_mean"),
               summary_flags)
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_eval_csv(path):
    """Returns (meta dict, list of EpisodeRecord); schema-validated."""
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from err
    lines = text.splitlines()
    if not lines or not lines[0].startswith(f"# {CSV_KIND_EVAL} "):
        raise DataError(f"{path}: not a {CSV_KIND_EVAL} file")
    headline = lines[0].split()
    if headline[2] != CSV_VERSION:
        raise DataError(f"{path}: unknown schema version {headline[2]!r}")
    meta = dict(part.split("=", 1) for part in headline[3:] if "=" in part)
    if tuple(lines[1].split(",")) != STEP_COLUMNS:
        raise DataError(f"{path}: unexpected column set")
    records: dict[tuple, EpisodeRecord] = {}
    order = []
    mode = "ii" if meta.get("objective", "none") != "none" else "baseline"

    def fparse(v):
        return None if v == "" else float(v)

    for line in lines[2:]:
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(STEP_COLUMNS):
            raise DataError(f"{path}: malformed row {line!r}")
        seed, step = int(parts[0]), int(parts[1])
        if seed not in records:
            records[seed] = EpisodeRecord(seed=seed, mode=mode)
            order.append(seed)
        rec = records[seed]
        if step == -1:
            rec.score = float(parts[2])
            for field in parts[12].split(";"):
                if field.startswith("length="):
                    rec.length = int(field.split("=", 1)[1])
        else:
            rec.steps.append(StepRecord(
                reward=float(parts[2]),
                mse_pre=float(parts[3]), psnr_pre=float(parts[4]), ssim_pre=float(parts[5]),
                mse_post=fparse(parts[6]), psnr_post=fparse(parts[7]), ssim_post=fparse(parts[8]),
                obj_first=fparse(parts[9]), obj_last=fparse(parts[10]),
                grad_norm_mean=fparse(parts[11]), flags=parts[12]))
    return meta, [records[s] for s in order]


def write_train_csv(path, rows, meta: dict) -> None:
    if not rows:
        Path(path).write_text(f"# {CSV_KIND_TRAIN} {CSV_VERSION} "
                              + " ".join(f"{k}={v}" for k, v in sorted(meta.items())) + "\n")
        return
    cols = sorted(rows[0].keys())
    lines = [f"# {CSV_KIND_TRAIN} {CSV_VERSION} "
             + " ".join(f"{k}={v}" for k, v in sorted(meta.items()))]
    lines.append(",".join(cols))
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# train


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(batch_size=cfg.batch_size, seq_len=cfg.seq_len,
                       model_lr=cfg.model_lr, actor_lr=cfg.actor_lr,
                       critic_lr=cfg.critic_lr, kl_scale=cfg.kl_scale,
                       free_bits=cfg.train_free_bits,
                       reward_loss_scale=cfg.reward_loss_scale,
                       imagination_horizon=cfg.imagination_horizon,
                       gamma=cfg.gamma, return_lambda=cfg.return_lambda,
                       entropy_coef=cfg.entropy_coef, epsilon=cfg.epsilon)


def cmd_train(cfg: RunConfig, resume: str | None = None) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    env = make_env(cfg.task, cfg.horizon or None)
    mc = cfg.model_config(env.obs_dim, env.action_count)
    chash = config_hash(cfg)
    tc = _train_config(cfg)

    if resume is not None:
        wm, ac, env_steps, _ = load_checkpoint(resume, expect_cfg=mc)
        state_path = Path(resume).with_suffix(".trainstate.npz")
        if not state_path.exists():
            raise DataError(f"resume needs the sidecar {state_path}")
        buffer, opts, rngs, env_steps = load_train_state(state_path)
        member_opts = [opts[f"member{k}"] for k in range(mc.ensemble)]
        member_rngs = [rngs[f"member{k}"] for k in range(mc.ensemble)]
    else:
        wm = init_world_model(mc, np.random.default_rng([cfg.train_seed, 0]))
        ac = init_actor_critic(mc, np.random.default_rng([cfg.train_seed, 0]))
        buffer = ReplayBuffer(max(cfg.budget + cfg.prefill, 10_000))
        opts = {"wm": AdamState(), "actor": AdamState(), "critic": AdamState()}
        member_opts = [AdamState() for _ in range(mc.ensemble)]
        for k, m in enumerate(member_opts):
            opts[f"member{k}"] = m
        rngs = {
            "collect": np.random.default_rng([cfg.train_seed, 1]),
            "train": np.random.default_rng([cfg.train_seed, 2]),
            "ac": np.random.default_rng([cfg.train_seed, 3]),
        }
        for k, seq in enumerate(np.random.SeedSequence(cfg.ensemble_seed).spawn(mc.ensemble)):
            rngs[f"member{k}"] = np.random.default_rng(seq)
        member_rngs = [rngs[f"member{k}"] for k in range(mc.ensemble)]
        env_steps = 0
        save_checkpoint(out / f"ckpt_{env_steps:07d}.wmck", wm, ac, env_steps, chash)

    loss_rows: list[dict] = []
    ac_rows: list[dict] = []
    next_checkpoint = (env_steps // cfg.checkpoint_every + 1) * cfg.checkpoint_every \
        if cfg.checkpoint_every > 0 else None
    prefill_target = max(cfg.prefill, tc.batch_size * tc.seq_len)
    last_saved_steps = env_steps
    last_ckpt = out / f"ckpt_{env_steps:07d}.wmck"

    while env_steps < cfg.budget:
        if len(buffer) < prefill_target:
            chunk = prefill_target
            eps = 1.0
        else:
            chunk = min(cfg.collect_per_round, cfg.budget - env_steps)
            eps = cfg.epsilon
        env_steps += collect_experience(env, wm, ac, buffer, chunk, rngs["collect"], epsilon=eps)
        result = train_world_model(wm, buffer, tc, cfg.wm_steps_per_round,
                                   rngs["train"], member_rngs=member_rngs,
                                   wm_opt=opts["wm"], member_opts=member_opts)
        for row in result["trace"]:
            row["env_steps"] = env_steps
            loss_rows.append(row)
        for row in train_actor_critic(wm, ac, buffer, tc, cfg.ac_steps_per_round,
                                      rngs["ac"], actor_opt=opts["actor"],
                                      critic_opt=opts["critic"]):
            row["env_steps"] = env_steps
            ac_rows.append(row)
        while next_checkpoint is not None and env_steps >= next_checkpoint:
            last_ckpt = out / f"ckpt_{next_checkpoint:07d}.wmck"
            save_checkpoint(last_ckpt, wm, ac, env_steps, chash)
            last_saved_steps = env_steps
            next_checkpoint += cfg.checkpoint_every

    if last_saved_steps != env_steps:
        last_ckpt = out / f"ckpt_{env_steps:07d}.wmck"
        save_checkpoint(last_ckpt, wm, ac, env_steps, chash)
    save_train_state(last_ckpt.with_suffix(".trainstate.npz"), buffer, opts, rngs, env_steps)
    write_train_csv(out / "loss_trace.csv", loss_rows, {"config_hash": chash, "kind": "world_model"})
    write_train_csv(out / "actor_trace.csv", ac_rows, {"config_hash": chash, "kind": "actor_critic"})
    logger.info("train: %d env steps, checkpoints in %s", env_steps, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _build_ii(cfg: RunConfig, wm, ac) -> IIConfig:
    ii = IIConfig(objective=cfg.objective, n=cfg.n, s=cfg.s,
                  rollout_len=cfg.rollout_len,
                  alpha=max(cfg.alpha, 0.0),
                  reg_free_bits=cfg.reg_free_bits, reg_scale=cfg.reg_scale,
                  objective_scale=cfg.objective_scale if cfg.objective_scale >= 0 else 1.0,
                  common_random_numbers=cfg.common_random_numbers)
    if not ii.active:
        return ii
    calib_seed = 10_000_019
    if cfg.objective_scale < 0:
        env = make_env(cfg.task, cfg.horizon or None)
        scale = calibrate_objective_scale(wm, ac, env, cfg.objective, ii, seed=calib_seed)
        ii.objective_scale = scale
        logger.info("calibrated objective_scale=%.4g for %s", scale, cfg.objective)
    if cfg.alpha < 0:
        seeds = tuple(calib_seed + 1 + i for i in range(cfg.calibration_episodes))
        result = calibrate_alpha(wm, ac, lambda: make_env(cfg.task, cfg.horizon or None),
                                 cfg.objective, ii, seeds=seeds)
        ii.alpha = result["alpha"]
        logger.info("calibrated alpha=%.4g for %s (deltas %s)", ii.alpha,
                    cfg.objective, result["deltas"])
    return ii


def _eval_meta(cfg: RunConfig, ii: IIConfig, ckpt_step) -> dict:
    return {
        "config_hash": config_hash(cfg), "task": cfg.task,
        "objective": ii.objective, "lambda": ii.rollout_len, "alpha": ii.alpha,
        "n": ii.n, "s": ii.s, "checkpoint_step": ckpt_step,
        "deterministic": cfg.deterministic,
    }


def cmd_eval(cfg: RunConfig, checkpoint: str, workers: int = 1) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    env = make_env(cfg.task, cfg.horizon or None)
    mc = cfg.model_config(env.obs_dim, env.action_count)
    wm, ac, ckpt_step, _ = load_checkpoint(checkpoint, expect_cfg=mc)
    ii = _build_ii(cfg, wm, ac)
    records = run_episodes(wm, ac, cfg.task, ii, cfg.seeds,
                           horizon=cfg.horizon or None, workers=workers)
    name = f"eval_{ii.objective}_l{ii.rollout_len}_ckpt{ckpt_step}.csv"
    write_eval_csv(out / name, records, _eval_meta(cfg, ii, ckpt_step))
    scores = [r.score for r in records]
    logger.info("eval: %d episodes, mean score %.3f, wrote %s",
                len(records), float(np.mean(scores)), out / name)
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare


def _parse_thresholds(text: str):
    out = []
    for part in text.split(","):
        part = part.strip().lower()
        if not part:
            continue
        out.append(float("inf") if part in ("inf", "all") else float(part))
    if not out:
        raise ConfigError("empty threshold list")
    return out


def cmd_compare(baseline_csv: str, ii_csvs, thresholds, out_dir: str) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base_meta, base_records = read_eval_csv(baseline_csv)
    if base_meta.get("objective", "none") != "none":
        logger.warning("%s: baseline CSV carries an active objective", baseline_csv)
    table_lines = []
    summary_rows = []
    by_objective: dict[str, list] = {}
    for path in ii_csvs:
        meta, records = read_eval_csv(path)
        summary = compare(base_records, records)
        arm = f"{meta['objective']} lambda={meta.get('lambda', '?')}"
        by_objective.setdefault(meta["objective"], []).append((meta, records, summary))
        table_lines.append(f"== {arm} (alpha={meta.get('alpha', '?')}) ==")
        table_lines.append(f"{'metric':<8}{'baseline':>12}{'ii':>12}{'delta':>12}{'p':>12}{'sig':>5}")
        for name, m in summary.metrics.items():
            p = m.paired_p if m.paired_p is not None else m.welch_p
            table_lines.append(
                f"{name:<8}{m.baseline_mean:>12.4f}{m.ii_mean:>12.4f}"
                f"{m.ii_mean - m.baseline_mean:>12.4f}"
                f"{(f'{p:.4g}' if p is not None else 'n/a'):>12}"
                f"{('*' if m.significant else ''):>5}")
            summary_rows.append({
                "arm": arm, "metric": name,
                "baseline_mean": m.baseline_mean, "baseline_std": m.baseline_std,
                "ii_mean": m.ii_mean, "ii_std": m.ii_std,
                "welch_p": m.welch_p, "paired_p": m.paired_p,
                "significant": int(m.significant),
            })
        pairs = match_pairs(base_records, records)
        if pairs:
            table_lines.append(f"{'Threshold':>10}{'% Ep.':>8}{'Baseline':>10}{'II':>10}{'p':>12}")
            for row in threshold_analysis(pairs, thresholds):
                thr = "All" if row.threshold == float("inf") else f"< {row.threshold:.2f}"
                bm = "n/a" if row.baseline_mean is None else f"{row.baseline_mean:.3f}"
                im = "n/a" if row.ii_mean is None else f"{row.ii_mean:.3f}"
                pv = "n/a" if row.paired_p is None else f"{row.paired_p:.4g}"
                mark = "*" if row.significant else ""
                table_lines.append(f"{thr:>10}{row.pct_episodes:>7.0f}%{bm:>10}{im:>10}{pv:>11}{mark}")
                summary_rows.append({
                    "arm": arm, "metric": f"bucket<{row.threshold}",
                    "baseline_mean": row.baseline_mean, "baseline_std": row.pct_episodes,
                    "ii_mean": row.ii_mean, "ii_std": None,
                    "welch_p": None, "paired_p": row.paired_p,
                    "significant": int(row.significant),
                })
        table_lines.append("")

    # per objective, the arm with the best significant score improvement;
    # falls back to the baseline value when nothing is significant
    base_score = float(np.mean([r.score for r in base_records]))
    for objective, arms in by_objective.items():
        best = None
        for meta, records, summary in arms:
            m = summary["score"]
            if m.significant and m.ii_mean > m.baseline_mean:
                if best is None or m.ii_mean > best[0]:
                    best = (m.ii_mean, meta.get("lambda", "?"))
        if best is None:
            table_lines.append(f"best-lambda[{objective}]: none significant; "
                               f"baseline value {base_score:.4f} assumed")
            summary_rows.append({"arm": f"best_{objective}", "metric": "score",
                                 "baseline_mean": base_score, "baseline_std": None,
                                 "ii_mean": base_score, "ii_std": None,
                                 "welch_p": None, "paired_p": None, "significant": 0})
        else:
            table_lines.append(f"best-lambda[{objective}]: lambda={best[1]} "
                               f"score {best[0]:.4f} (baseline {base_score:.4f})")
            summary_rows.append({"arm": f"best_{objective}", "metric": "score",
                                 "baseline_mean": base_score, "baseline_std": None,
                                 "ii_mean": best[0], "ii_std": None,
                                 "welch_p": None, "paired_p": None, "significant": 1})

    text = "\n".join(table_lines)
    print(text)
    (out / "compare_summary.txt").write_text(text + "\n")
    write_train_csv(out / "compare_summary.csv", summary_rows,
                    {"config_hash": base_meta.get("config_hash", "?"), "kind": "compare"})
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep(cfg: RunConfig, workers: int = 1) -> int:
    checkpoints = []
    for pattern in cfg.checkpoints:
        checkpoints.extend(sorted(globlib.glob(pattern)))
    if not checkpoints or not cfg.objectives or not cfg.lambdas:
        logger.warning("sweep: empty grid (checkpoints=%d objectives=%d lambdas=%d); nothing to do",
                       len(checkpoints), len(cfg.objectives), len(cfg.lambdas))
        return EXIT_OK
    failures = 0
    for ckpt in checkpoints:
        for objective in cfg.objectives:
            import dataclasses

            calibrated = dataclasses.replace(
                cfg, objective=objective, rollout_len=min(cfg.lambdas),
                alpha=-1.0, objective_scale=-1.0)
            env = make_env(cfg.task, cfg.horizon or None)
            mc = cfg.model_config(env.obs_dim, env.action_count)
            try:
                wm, ac, _, _ = load_checkpoint(ckpt, expect_cfg=mc)
                ii = _build_ii(calibrated, wm, ac)
            except (CheckpointError, DataError) as err:
                logger.error("sweep: calibration failed for %s/%s: %s", ckpt, objective, err)
                failures += len(cfg.lambdas)
                continue
            for lam in cfg.lambdas:
                cell = dataclasses.replace(
                    cfg, objective=objective, rollout_len=lam,
                    alpha=ii.alpha, objective_scale=ii.objective_scale)
                try:
                    cmd_eval(cell, ckpt, workers=workers)
                except (CheckpointError, DataError, ConfigError) as err:
                    logger.error("sweep: cell (%s, %s, lambda=%d) failed: %s",
                                 ckpt, objective, lam, err)
                    failures += 1
    if failures:
        logger.warning("sweep finished with %d failed cells", failures)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "objective", None):
        cfg.objective = args.objective
    if getattr(args, "rollout_len", None) is not None:
        cfg.rollout_len = args.rollout_len
    if getattr(args, "steps", None) is not None:
        cfg.budget = args.steps
    if getattr(args, "alpha", None) is not None:
        cfg.alpha = args.alpha
    if getattr(args, "seeds", None):
        cfg.seeds = parse_seed_range(args.seeds)
    if getattr(args, "deterministic", None) is not None:
        cfg.deterministic = args.deterministic
    if getattr(args, "out", None):
        cfg.out = args.out
    from .config import validate

    validate(cfg)
    return cfg


def _bool_flag(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wmrefine",
                                     description="train, evaluate, and compare "
                                                 "decision-time state refinement")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--objective", choices=["sig", "pig", "ent", "none"])
        p.add_argument("--rollout-len", type=int, dest="rollout_len")
        p.add_argument("--steps", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--seeds", help='seed list: "a..b" or comma-separated')
        p.add_argument("--deterministic", type=_bool_flag)
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, default=1)

    t = sub.add_parser("train", help="pre-train world model and actor")
    common(t)
    t.add_argument("--checkpoint", help="resume from this checkpoint")

    e = sub.add_parser("eval", help="run evaluation episodes against a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)

    c = sub.add_parser("compare", help="baseline-vs-refinement statistics")
    c.add_argument("--baseline", required=True, help="baseline eval CSV")
    c.add_argument("--ii", required=True, nargs="+", help="refinement eval CSVs")
    c.add_argument("--thresholds", default="inf", help='e.g. "inf,0.9,0.75,0.5"')
    c.add_argument("--out", default="runs/compare")

    s = sub.add_parser("sweep", help="objective x rollout-length x checkpoint grid")
    common(s)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "compare":
            return cmd_compare(args.baseline, args.ii,
                               _parse_thresholds(args.thresholds), args.out)
        cfg = load_run_config(args.config) if args.config else RunConfig()
        cfg = _apply_overrides(cfg, args)
        if args.command == "train":
            return cmd_train(cfg, resume=args.checkpoint)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, workers=args.workers)
        if args.command == "sweep":
            return cmd_sweep(cfg, workers=args.workers)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as err:
        logger.error("config error: %s", err)
        return EXIT_CONFIG
    except (CheckpointError, DataError) as err:
        logger.error("data error: %s", err)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
