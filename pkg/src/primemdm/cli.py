"""Command-line entry point: ``primemdm {train,sample,eval,analyze}``.

Exit codes: 0 success, 1 configuration/input error, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
import time
from pathlib import Path

import numpy as np

from . import analytics
from .codec import make_codec
from .config import ConfigError, RunConfig, load_config
from .data import (TokenRows, builtin_density, grid_sampler, histogram_image, load_density,
                   sample_histogram, tv_distance, write_pgm, BUILTINS)
from .model import Model
from .net import NetConfig, init, load_checkpoint, save_checkpoint
from .sampler import SamplerConfig, generate_batch, impute_batch
from .schedule import get_schedule
from .trainer import NumericFailure, TrainConfig, eval_nll, fit

PRESETS = {
    "text": {"schedule": "linear", "T": 1024, "L": 1024, "lengths": "1,2,3,4,5,6,7,8"},
    "image": {"schedule": "linear", "T": 1024, "L": 3072, "lengths": "1,2,3,4"},
}


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


# -- builders shared by the commands -----------------------------------------

def build_task(cfg: RunConfig):
    """Return (dataset_sampler, density_grid_or_None, seq_len)."""
    csv_path = cfg.get("task", "dataset_csv")
    if csv_path:
        rows = TokenRows.from_csv(csv_path)
        if rows.rows.max() >= cfg.int("codec", "num_classes") or rows.rows.min() < 0:
            raise ConfigError(f"{csv_path}: tokens outside [0, num_classes)")
        return rows, None, rows.rows.shape[1]
    side = cfg.int("task", "side")
    name = cfg.get("task", "density")
    if name in BUILTINS:
        grid = builtin_density(name, side)
    else:
        try:
            grid = load_density(name, side)
        except (OSError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
    return grid_sampler(grid), grid, 2


def build_model(cfg: RunConfig, seq_len: int) -> Model:
    codec = make_codec(cfg.int("codec", "num_classes"), cfg.int("codec", "length"))
    net_cfg = NetConfig(seq_len=seq_len, length=codec.length, base=codec.base,
                        num_classes=codec.num_classes, embed_dim=cfg.int("net", "embed_dim"),
                        hidden_dim=cfg.int("net", "hidden_dim"),
                        num_layers=cfg.int("net", "num_layers"), head=cfg.get("net", "head"))
    return Model(net_cfg, codec)


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg.int("train", "batch_size"),
        learning_rate=cfg.float("train", "learning_rate"),
        adam_beta1=cfg.float("train", "adam_beta1"),
        adam_beta2=cfg.float("train", "adam_beta2"),
        adam_eps=cfg.float("train", "adam_eps"),
        steps=cfg.int("train", "steps"),
        t_min=cfg.float("train", "t_min"),
        weighted_loss=cfg.bool("train", "weighted_loss"),
        carryover_in_train=cfg.bool("train", "carryover_in_train"),
        seed=cfg.int("run", "seed"),
        dtype=cfg.get("train", "dtype"),
    )


def _load_run(checkpoint, overrides=()):
    """Rebuild (params, model, cfg) from a checkpoint and its embedded config."""
    try:
        params, net_cfg, meta = load_checkpoint(checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint {checkpoint}: {exc}") from exc
    cp_cfg = load_config(None, environ={})
    for sec, items in meta.get("config", {}).items():
        for k, v in items.items():
            cp_cfg.set(sec, k, v)
    for item in overrides:
        lhs, value = item.split("=", 1)
        sec, key = lhs.split(".", 1)
        cp_cfg.set(sec, key, value)
    cp_cfg.validate()
    _, _, seq_len = build_task(cp_cfg)
    model = build_model(cp_cfg, seq_len)
    if model.config != net_cfg:
        raise ConfigError(f"checkpoint network {net_cfg} does not match config {model.config}")
    return params, model, cp_cfg


# -- train -------------------------------------------------------------------

def cmd_train(args) -> int:
    try:
        overrides = list(args.set or [])
        if args.seed is not None:
            overrides.append(f"run.seed={args.seed}")
        if args.steps is not None:
            overrides.append(f"train.steps={args.steps}")
        cfg = load_config(args.config, overrides)
        sampler, grid, seq_len = build_task(cfg)
        model = build_model(cfg, seq_len)
        tcfg = train_config(cfg)
    except (ConfigError, ValueError, OSError) as exc:
        _err(str(exc))
        return 1
    seed = tcfg.seed
    if args.run_dir:
        run_dir = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path(args.out or cfg.get("run", "out_dir")) / f"{stamp}-seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(run_dir / "config.ini")
    sch = get_schedule(cfg.get("schedule", "name"))
    params = init(model.config, np.random.default_rng([seed, 0]),
                  zero_head=cfg.bool("net", "zero_head"))
    meta = {"config": cfg.as_dict()}
    isr_value = analytics.isr(sch, cfg.int("sampler", "num_steps"), seq_len, model.codec.length)

    def ckpt(p, step):
        save_checkpoint(run_dir / f"ckpt_{step:06d}.bin", p, model.config, meta)

    try:
        params, history = fit(params, model, sampler, sch, tcfg,
                              metrics_path=run_dir / "metrics.csv",
                              eval_every=cfg.int("train", "eval_every"),
                              eval_mc=cfg.int("train", "eval_mc"), isr_value=isr_value,
                              checkpoint_every=cfg.int("train", "checkpoint_every"),
                              checkpoint_fn=ckpt,
                              log=None if args.quiet else (lambda m: print(m, flush=True)))
    except NumericFailure as exc:
        _err(f"numeric failure: {exc}")
        return 2
    save_checkpoint(run_dir / "model.bin", params, model.config, meta)
    rep = eval_nll(params, model, sampler, sch, cfg.int("train", "final_eval_mc"),
                   np.random.default_rng([seed, 2]), tcfg.t_min)
    with open(run_dir / "nll.txt", "w") as fh:
        fh.write(_nll_text(rep))
    print(f"run directory: {run_dir}")
    print(_nll_text(rep), end="")
    return 0


def _nll_text(rep) -> str:
    se = "N/A" if rep.stderr is None else f"{rep.stderr:.6f}"
    return (f"nll_bound_nats_per_token {rep.nats_per_token:.6f}\n"
            f"stderr_nats_per_token {se}\n"
            f"perplexity_per_token {rep.perplexity:.6f}\n"
            f"nll_bound_nats_per_sequence {rep.nats_per_sequence:.6f}\n"
            f"perplexity_per_sequence {np.exp(rep.nats_per_sequence):.6f}\n"
            f"num_mc {rep.num_mc}\n")


# -- sample ------------------------------------------------------------------

def _parse_kept(spec: str, L: int, l: int) -> np.ndarray:
    bits = [c for c in spec if c in "01"]
    if len(bits) == l:
        return np.tile(np.array([b == "1" for b in bits]), (L, 1))
    if len(bits) == L * l:
        return np.array([b == "1" for b in bits]).reshape(L, l)
    raise ConfigError(f"--impute expects {l} or {L * l} binary digits, got {spec!r}")


def cmd_sample(args) -> int:
    try:
        params, model, cfg = _load_run(args.checkpoint, args.set or [])
        if args.config:
            user = load_config(args.config, args.set or [])
            _, _, seq_len = build_task(user)
            if build_model(user, seq_len).config != model.config:
                raise ConfigError("config does not match the checkpoint's network")
        seed = cfg.int("run", "seed") if args.seed is None else args.seed
        sch = get_schedule(cfg.get("schedule", "name"))
        T = args.steps or cfg.int("sampler", "num_steps")
        scfg = SamplerConfig(num_steps=T, schedule=sch, seed=seed,
                             cache_outputs=cfg.bool("sampler", "cache_outputs") and not args.no_cache,
                             freeze_draws_on_idle=cfg.bool("sampler", "freeze_draws_on_idle"))
        sampler, grid, seq_len = build_task(cfg)
        kept = None
        if args.impute:
            kept = _parse_kept(args.impute, seq_len, model.codec.length)
    except (ConfigError, ValueError, OSError) as exc:
        _err(str(exc))
        return 1
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    L = model.config.seq_len
    if args.n == 0:
        tokens = np.zeros((0, L), dtype=np.int64)
        idle = np.zeros(0)
        evals = 0
    elif kept is not None:
        if args.condition:
            cond = TokenRows.from_csv(args.condition).rows
            if len(cond) < args.n:
                cond = cond[np.arange(args.n) % len(cond)]
            cond = cond[:args.n]
        else:
            cond = sampler(np.random.default_rng([seed, 3]), args.n)
        np.savetxt(out / "conditions.csv", cond, fmt="%d", delimiter=",")
        run = impute_batch(params, model, scfg, kept, cond, rng)
        tokens, idle, evals = run.tokens, run.idle_step_counts, run.model_evals
    else:
        run = generate_batch(params, model, scfg, args.n, rng)
        tokens, idle, evals = run.tokens, run.idle_step_counts, run.model_evals
    with open(out / "samples.csv", "w") as fh:
        for row in tokens:
            fh.write(",".join(str(int(v)) for v in row) + "\n")
    with open(out / "idle.csv", "w") as fh:
        fh.write("T,runs,idle_mean,idle_var,isr_empirical,isr_analytic,model_evals\n")
        mean = float(idle.mean()) if len(idle) else float("nan")
        var = float(idle.var(ddof=1)) if len(idle) > 1 else float("nan")
        fh.write(f"{T},{len(idle)},{mean:.6f},{var:.6f},{mean / T:.6f},"
                 f"{analytics.isr(sch, T, L, model.codec.length):.6f},{evals}\n")
    if grid is not None:
        hist = sample_histogram(tokens, grid.side) if len(tokens) else \
            np.zeros((grid.side, grid.side))
        write_pgm(out / "histogram.pgm", histogram_image(hist))
        np.savetxt(out / "histogram.csv", hist, fmt="%d", delimiter=",")
    print(f"wrote {len(tokens)} samples to {out / 'samples.csv'}")
    return 0


# -- eval --------------------------------------------------------------------

def cmd_eval(args) -> int:
    try:
        params, model, cfg = _load_run(args.checkpoint, args.set or [])
        sampler, grid, seq_len = build_task(cfg)
    except (ConfigError, ValueError, OSError) as exc:
        _err(str(exc))
        return 1
    seed = cfg.int("run", "seed") if args.seed is None else args.seed
    sch = get_schedule(cfg.get("schedule", "name"))
    rep = eval_nll(params, model, sampler, sch, args.num_mc, np.random.default_rng([seed, 4]),
                   cfg.float("train", "t_min"))
    print("# NLL bound in nats; perplexity_per_token = exp(bound / L), "
          f"perplexity_per_sequence = exp(bound) over the L={seq_len} tokens of a sequence")
    print(_nll_text(rep), end="")
    if grid is not None and args.n_samples > 0:
        T = args.steps or cfg.int("sampler", "num_steps")
        run = generate_batch(params, model, SamplerConfig(num_steps=T, schedule=sch),
                             args.n_samples, np.random.default_rng([seed, 5]))
        print(f"tv_distance {tv_distance(grid, run.tokens):.6f}")
        print(f"tv_samples {args.n_samples}")
    return 0


# -- analyze -----------------------------------------------------------------

ANALYZE_FIELDS = ["schedule", "T", "L", "l", "eta", "isr", "sim_mean", "sim_var", "elbow"]


def analyze_rows(schedule: str, T: int, L: int, lengths, runs: int, seed: int):
    sch = get_schedule(schedule)
    rng = np.random.default_rng(seed)
    lengths = sorted(int(v) for v in lengths)
    elbow = analytics.isr_elbow(sch, T, L, lengths) if len(lengths) >= 3 else ""
    rows = []
    for l in lengths:
        eta = analytics.expected_idle_steps(sch, T, L * l)
        sim_mean = sim_var = ""
        if runs > 0:
            counts = analytics.simulate_idle_runs(sch, T, L * l, runs, rng)
            sim_mean = f"{counts.mean():.6f}"
            sim_var = f"{counts.var(ddof=1):.6f}" if runs > 1 else "0"
        rows.append([str(sch), T, L, l, f"{eta:.6f}", f"{eta / T:.8f}", sim_mean, sim_var,
                     elbow])
    return rows


def cmd_analyze(args) -> int:
    preset = PRESETS[args.preset] if args.preset else {}
    try:
        schedule = args.schedule or preset.get("schedule", "linear")
        T = args.T if args.T is not None else preset.get("T", 1024)
        L = args.L if args.L is not None else preset.get("L", 1024)
        lengths_txt = args.lengths or preset.get("lengths", "1,2,3,4,5,6,7,8")
        lengths = [int(v) for v in lengths_txt.split(",") if v.strip()]
        if T < 1 or L < 1 or args.runs < 0 or not lengths or min(lengths) < 1:
            raise ValueError("T, L, lengths must be positive and runs >= 0")
        get_schedule(schedule)
    except ValueError as exc:
        _err(str(exc))
        return 1
    rows = analyze_rows(schedule, T, L, lengths, args.runs, args.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ANALYZE_FIELDS)
    w.writerows(rows)
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


# -- argument parsing --------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="primemdm", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model on a 2D density or token CSV")
    p.add_argument("config", help="INI config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="parent directory for the run directory")
    p.add_argument("--run-dir", help="exact run directory (skips timestamp naming)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--steps", type=int, help="number of reverse steps T")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="check the checkpoint against this config")
    p.add_argument("--impute", metavar="BITS",
                   help="kept-digit mask, l bits applied to every token (or L*l bits)")
    p.add_argument("--condition", help="CSV of token rows to impute from")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="NLL bound, perplexity and sample TV distance")
    p.add_argument("checkpoint")
    p.add_argument("--num-mc", type=int, default=4096)
    p.add_argument("--n-samples", type=int, default=100_000)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="idle-step / ISR table with elbow recommendation")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--schedule")
    p.add_argument("--T", type=int)
    p.add_argument("--L", type=int)
    p.add_argument("--lengths", help="comma-separated candidate l values")
    p.add_argument("--runs", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    p.set_defaults(func=cmd_analyze)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "num_mc", 1) < 1:
        _err("--num-mc must be >= 1")
        return 1
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
