"""Command line: synth, train, eval, robustness, bench, dump-bev.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import os
import re
import sys

from . import experiments as E
from .config import TrainConfig, dump_config, load_config
from .scene import SceneConfig, synth_corpus
from .tensor import ConfigError, DataError, NumericError
from .train import Corpus, evaluate, load_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def parse_sigmas(text):
    """``2^-15..2^-10`` (every integer exponent in between) or a comma list of numbers."""
    m = re.fullmatch(r"\s*2\^(-?\d+)\s*\.\.\s*2\^(-?\d+)\s*", text)
    if m:
        a, b = int(m.group(1)), int(m.group(2))
        step = 1 if b >= a else -1
        return [2.0 ** e for e in range(a, b + step, step)]
    try:
        vals = [float(_sigma_token(t)) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse sigmas {text!r}") from None
    if not vals:
        raise ConfigError("no sigmas given")
    return vals


def _sigma_token(tok):
    tok = tok.strip()
    m = re.fullmatch(r"2\^(-?\d+)", tok)
    return 2.0 ** int(m.group(1)) if m else float(tok)


def _config(path):
    if path is None:
        return TrainConfig()
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} not found")
    return load_config(path)


def cmd_synth(a):
    n_val = a.scenes // 5 if a.val is None else a.val
    if a.scenes < 1 or n_val > a.scenes:
        raise ConfigError("need at least one scene and no more val scenes than scenes")
    try:
        man = synth_corpus(a.out, a.seed, a.scenes - n_val, n_val, SceneConfig())
    except OSError as exc:
        raise DataError(str(exc)) from None
    print(f"wrote {len(man['scenes'])} scenes ({man['n_train']} train, {man['n_val']} val) to {a.out}")


def cmd_train(a):
    cfg = _config(a.config)
    if a.corpus:
        cfg.corpus = a.corpus
    os.makedirs(a.out, exist_ok=True)
    dump_config(cfg, os.path.join(a.out, "config.yaml"))

    def progress(row):
        if a.verbose and row["step"] % a.log_every == 0:
            print(f"step {row['step']:5d} epoch {row['epoch']:3d} lr {row['lr']:.2e} total {row['total']:.4f}",
                  flush=True)

    res = train(cfg, out=a.out, max_steps=a.max_steps, resume=a.resume, progress=progress)
    if res.log:
        print(f"steps {res.log[0]['step']}..{res.step - 1}: total loss {res.log[0]['total']:.4f} -> "
              f"{res.log[-1]['total']:.4f}")
    print(f"checkpoint {res.checkpoint}")
    if cfg.corpus and not a.no_eval:
        summ, _ = evaluate(res.checkpoint, cfg.corpus, "val", out=os.path.join(a.out, "val_metrics.csv"))
        print(" ".join(f"{k}={v:.4f}" for k, v in sorted(summ.items())))


def cmd_eval(a):
    summ, text = evaluate(a.ckpt, a.corpus, a.split, a.mask, out=a.out, oracle=a.oracle)
    if a.out is None:
        sys.stdout.write(text)
    print(" ".join(f"{k}={v:.4f}" for k, v in sorted(summ.items())))


def cmd_robustness(a):
    _, model, _, _ = load_checkpoint(a.ckpt)
    rows = E.run_robustness(model, parse_sigmas(a.sigmas), a.trials, a.seed)
    text = E.robustness_csv(rows)
    if a.out:
        with open(a.out, "w") as fh:
            fh.write(text)
    print("sigma,reo_max_delta,baseline_mean_displacement_px")
    for r in E.robustness_summary(rows):
        print(f"{r['sigma']!r},{r['reo_max_delta']!r},{r['baseline_mean_displacement']:.6f}")


def cmd_bench(a):
    model = None
    if a.ckpt:
        cfg, model, _, _ = load_checkpoint(a.ckpt)
    else:
        cfg = _config(a.config)
    rep = E.bench(cfg.model, a.repeats, a.seed, model=model)
    print(E.bench_table(rep))


def cmd_dump_bev(a):
    cfg, model, _, _ = load_checkpoint(a.ckpt)
    scene_dir = os.path.normpath(a.scene)
    corpus = Corpus(os.path.dirname(scene_dir), cfg.model)
    inputs = E.scene_inputs(corpus, os.path.basename(scene_dir), cfg.model)
    model.eval()
    for p in E.dump_bev(model, inputs, a.out):
        print(p)


def build_parser():
    p = argparse.ArgumentParser(prog="reo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("synth", help="write a synthetic scene corpus")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scenes", type=int, default=80, help="total scenes; a fifth go to val unless --val is given")
    s.add_argument("--val", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train from a YAML config")
    s.add_argument("--config")
    s.add_argument("--corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--max-steps", type=int, default=None)
    s.add_argument("--resume", default=None, help="checkpoint to continue from")
    s.add_argument("--no-eval", action="store_true")
    s.add_argument("--log-every", type=int, default=16)
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="metrics CSV for a checkpoint on a corpus split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--split", default="val", choices=("train", "val"))
    s.add_argument("--mask", default="none", choices=("none", "visible"))
    s.add_argument("--out", default=None)
    s.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("robustness", help="calibration-noise sweep")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--sigmas", default="2^-15..2^-10")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_robustness)

    s = sub.add_parser("bench", help="per-stage forward timing")
    s.add_argument("--config")
    s.add_argument("--ckpt")
    s.add_argument("--repeats", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("dump-bev", help="write BEV feature channels as PGM images")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", required=True, help="scene directory inside a corpus")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_dump_bev)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        dump = getattr(exc, "dump_path", None)
        print(f"numeric abort: {exc}" + (f" (dump: {dump})" if dump else ""), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK
