"""``coca-lab`` command line.

Verbs::

    train --config CFG --out DIR
    eval ppl|passkey --checkpoint CK --out DIR
    diagnose order|decay|borders --out DIR
    bench contraction --out DIR
    inspect checkpoint PATH
    experiment --out DIR

Run configs are JSON with a mandatory ``seed`` and optional sections
``model``, ``train``, ``corpus``, ``eval``, ``diagnostics``; unknown keys are
errors. Every command writes ``manifest.json`` (config hash, seed, versions,
git revision) next to its outputs. ``COCA_LAB_THREADS`` caps torch and
kernel threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import zlib
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .errors import CocaLabError, ConfigError
from .reporting import config_hash, write_csv, write_manifest

log = logging.getLogger("coca_lab")

SECTIONS = {
    "model": {"preset", "n_layers", "d_model", "n_heads", "max_seq", "vocab_size", "rope_base", "variant", "mlp_ratio"},
    "train": {
        "total_steps", "warmup_fraction", "lr_start", "lr_peak", "lr_final", "beta1", "beta2", "eps",
        "weight_decay", "grad_clip", "batch_size", "grad_accum", "seq_len", "checkpoint_every", "log_timing",
    },
    "corpus": {"kind", "parts", "size_tokens"},
    "eval": {"contexts", "stride", "lengths", "n", "ntk_kappa", "template", "docs", "doc_tokens", "gen_tokens"},
    "diagnostics": {"head_dim", "s_max", "s_min", "theta0", "rope_base", "coca", "mode"},
}


def substream(seed: int, name: str) -> int:
    """Independent 32-bit seed for a named consumer of the run seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def load_run_config(path) -> dict:
    """Parse and validate a run config; errors name the offending field or line."""
    text = Path(path).read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    return validate_run_config(cfg)


def validate_run_config(cfg) -> dict:
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    if "seed" not in cfg:
        raise ConfigError("seed: required field missing")
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
        raise ConfigError(f"seed: must be a non-negative integer, got {cfg['seed']!r}")
    for sec, allowed in SECTIONS.items():
        body = cfg.get(sec, {})
        if not isinstance(body, dict):
            raise ConfigError(f"{sec}: must be an object")
        bad = set(body) - allowed
        if bad:
            raise ConfigError(f"{sec}.{sorted(bad)[0]}: unknown key (allowed: {', '.join(sorted(allowed))})")
    return cfg


def _model_config(run: dict):
    from .model import ModelConfig, preset

    body = dict(run.get("model", {}))
    name = body.pop("preset", "desk")
    try:
        return preset(name, seed=substream(run["seed"], "model"), **body)
    except TypeError as e:
        raise ConfigError(f"model: {e}") from None


def _train_config(run: dict):
    from .training import TrainConfig

    return TrainConfig(seed=substream(run["seed"], "train"), **run.get("train", {}))


def _corpus(run: dict, seq_len: int):
    from .corpus import mixed_corpus, synth_corpus

    body = run.get("corpus", {})
    kind = body.get("kind", "mix")
    size = int(body.get("size_tokens", 1_000_000))
    seed = substream(run["seed"], "data")
    if kind == "mix":
        return mixed_corpus(body.get("parts", {"keyvalue": 0.5, "lm_mix": 0.5}), size, seed, seq_len)
    if "parts" in body:
        raise ConfigError("corpus.parts: only valid with kind 'mix'")
    return synth_corpus(kind, size, seed, seq_len)


def _prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_from_args(args) -> dict:
    run = load_run_config(args.config) if getattr(args, "config", None) else {"seed": 0}
    if getattr(args, "seed", None) is not None:
        run = {**run, "seed": args.seed}
    return validate_run_config(run)


def cmd_train(args) -> int:
    from .model import init_model
    from .training import train_loop

    if not args.config:
        raise ConfigError("train needs --config")
    run = _run_from_args(args)
    mcfg = _model_config(run)
    tcfg = _train_config(run)
    out = _prepare_out(args.out, args.force) if not args.resume else Path(args.out)
    corpus = _corpus(run, tcfg.seq_len)
    model = init_model(mcfg)

    def progress(step, lr, loss):
        if step % max(1, tcfg.total_steps // 20) == 0 or step == tcfg.total_steps:
            log.info("step %d/%d lr %.3e loss %.4f", step, tcfg.total_steps, lr, loss)

    res = train_loop(model, corpus, tcfg, out_dir=out, resume=args.resume, on_step=progress)
    (out / "run_config.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    write_manifest(out / "manifest.json", command="train", config_hash=config_hash(run), seed=run["seed"],
                   model=mcfg.to_dict(), train=tcfg.to_dict(), steps=res.step)
    loss = f"final loss {res.losses[-1]:.4f}" if res.losses else "no new steps"
    print(f"trained {res.step} steps; {loss}; checkpoint {out / 'final.ckpt'}")
    return 0


def _int_list(s: str):
    return [int(x) for x in s.split(",") if x.strip()]


def cmd_eval(args) -> int:
    from .corpus import synth_corpus
    from .evaluation import passkey_suite, ppl_curve
    from .templates import PASSKEY_MIN, TEMPLATES
    from .tokenizer import encode

    run = _run_from_args(args)
    ev = run.get("eval", {})
    model, _ = ckpt_io.load_model(args.checkpoint)
    model.eval()
    out = _prepare_out(args.out, args.force)
    kappa = args.ntk_kappa if args.ntk_kappa is not None else ev.get("ntk_kappa")
    seed = substream(run["seed"], "eval")
    train_len = model.cfg.max_seq
    if args.task == "ppl":
        kappa = 1.0 if kappa is None else float(kappa)
        contexts = _int_list(args.contexts) if args.contexts else ev.get("contexts", [train_len, 2 * train_len, 4 * train_len, 8 * train_len])
        stride = args.stride if args.stride is not None else int(ev.get("stride", 256))
        n_docs = args.docs if args.docs is not None else int(ev.get("docs", 4))
        doc_tokens = int(ev.get("doc_tokens", max(contexts) * 2))
        docs = [synth_corpus("lm_mix", doc_tokens, seed + i) for i in range(n_docs)]
        curve = ppl_curve(model, docs, contexts, stride, kappa)
        write_csv(out / "ppl.csv", ["context", "ppl"], curve.csv_rows())
        records = curve.records
        extra = dict(stride=stride, docs=n_docs, doc_tokens=doc_tokens)
    else:
        n = args.n if args.n is not None else int(ev.get("n", 100))
        template = TEMPLATES[args.template or ev.get("template", "standard")]
        shortest = len(encode(template.render(PASSKEY_MIN, 1, 0)))
        default_lengths = [m * train_len for m in (2, 4, 8, 16) if m * train_len >= shortest]
        lengths = _int_list(args.lengths) if args.lengths else ev.get("lengths", default_lengths)
        if not lengths:
            raise ConfigError(f"every default passkey length is below the {shortest}-token prompt; pass --lengths")
        # unset kappa: the smallest NTK factor whose capacity covers the longest length
        kappa = max(1.0, max(lengths) / train_len) if kappa is None else float(kappa)
        samples = []
        curve = passkey_suite(model, lengths, n, kappa, seed, template, int(ev.get("gen_tokens", 64)), samples_out=samples)
        write_csv(out / "passkey.csv", ["length", "n", "accuracy"], curve.csv_rows())
        (out / "passkey_samples.json").write_text(json.dumps(samples, indent=1) + "\n")
        records = curve.records
        extra = dict(template=template.name, n=n)
    write_manifest(out / "manifest.json", command=f"eval {args.task}", config_hash=config_hash(run),
                   seed=run["seed"], ntk_kappa=kappa, checkpoint=str(args.checkpoint), **extra)
    for r in records:
        print(json.dumps(r, sort_keys=True))
    return 0


def _diag_vectors(args, run, d_default):
    """Seeded Gaussian q and k/t, or projections of one token from a checkpoint layer."""
    rng = np.random.default_rng(substream(run["seed"], "diag"))
    if args.checkpoint:
        model, _ = ckpt_io.load_model(args.checkpoint)
        block = model.blocks[args.layer]
        hd = model.cfg.head_dim
        tok = int(rng.integers(0, 256))
        with torch.no_grad():
            x = block.ln_1(model.tok_emb.weight[tok])
            q = block.attn.w_q(x)[args.head * hd : (args.head + 1) * hd].double().numpy()
            t = block.attn.w_t(x)[args.head * hd : (args.head + 1) * hd].double().numpy()
        return q, t, model.cfg.rope_base, model.cfg.variant
    q = rng.standard_normal(d_default)
    t = rng.standard_normal(d_default)
    return q, t, None, None


def cmd_diagnose(args) -> int:
    from .attention import fold_relu_t
    from .diagnostics import decay_bound_check, order_break_scan, rotary_border_report
    from .rotary import build_rotary_table

    run = _run_from_args(args)
    dg = run.get("diagnostics", {})
    d = args.head_dim or int(dg.get("head_dim", 64))
    out = _prepare_out(args.out, args.force)
    status = 0
    if args.kind in ("order", "decay"):
        q, t, base, variant = _diag_vectors(args, run, d)
        d = q.shape[-1]
        table = build_rotary_table(d, base or float(dg.get("rope_base", 10000.0)), 2)
        if args.mode is not None:
            coca = args.mode == "coca" or args.coca
        else:
            coca = args.coca or variant == "coca" or dg.get("coca", False) or dg.get("mode") == "coca"
        folded = fold_relu_t(t)
        half = d // 2
        k_eff = np.concatenate([q[:half] * folded[:half], q[half:] * folded[half:]]) if coca else t
    if args.kind == "order":
        s_max = args.s_max or int(dg.get("s_max", 512))
        rep = order_break_scan(q, k_eff, table, s_max)
        write_csv(out / "order.csv", ["j", "theta0", "predicted", "measured"], rep.component_rows())
        write_csv(out / "order_aggregate.csv", ["s", "a"], [(s, repr(a)) for s, a in enumerate(rep.aggregate)])
        mismatches = sum(
            1 for p, m, tr in zip(rep.predicted_break_count, rep.measured_break_count, rep.truncated)
            if not tr and m != int(np.floor(p + 1e-9))
        )
        print(f"variant: {'coca' if coca else 'baseline'}")
        print(f"measured break counts: {rep.measured_break_count}")
        print(f"max measured: {max(rep.measured_break_count)}; mismatches vs floor(theta0/theta): {mismatches}")
        status = int(mismatches > 0)
        summary = dict(max_measured=max(rep.measured_break_count), mismatches=mismatches)
    elif args.kind == "decay":
        mode = "coca" if coca else "baseline"
        s_min, s_max = int(dg.get("s_min", 1)), args.s_max or int(dg.get("s_max", 4096))
        second = folded if mode == "coca" else t
        rep = decay_bound_check(q, second, table, range(s_min, s_max + 1), mode)
        write_csv(out / "decay.csv", ["s", "a", "rhs_weak", "rhs_strong"], rep.curve_rows())
        (out / "decay.json").write_text(rep.to_json() + "\n")
        violations = rep.violations_strong + rep.violations_weak + rep.eq11_violations
        print(f"mode: {mode}")
        print(f"violations: {violations}")
        if mode == "coca":
            print(f"closed-form max error: {rep.closed_form_max_err:.3e}")
        status = int(violations > 0)
        summary = dict(violations=violations, mode=mode)
    else:
        theta0 = args.theta0 if args.theta0 is not None else float(dg.get("theta0", 0.5))
        s_max = args.s_max or int(dg.get("s_max", 1024))
        table = build_rotary_table(d, float(dg.get("rope_base", 10000.0)), 2)
        rep = rotary_border_report(theta0, table, s_max)
        rows = [(j, e.border, e.s, repr(e.s_exact), e.scanned) for j, ev in rep.items() if j != "agree" for e in ev]
        write_csv(out / "borders.csv", ["j", "border", "s", "s_exact", "scanned"], rows)
        print(f"events: {len(rows)}; predicted and scanned reversals agree: {rep['agree']}")
        status = int(not rep["agree"])
        summary = dict(events=len(rows), agree=rep["agree"])
    write_manifest(out / "manifest.json", command=f"diagnose {args.kind}", config_hash=config_hash(run),
                   seed=run["seed"], summary=summary)
    return status


def cmd_bench(args) -> int:
    from .bench import bench_contraction

    out = _prepare_out(args.out, args.force)
    rows = bench_contraction(args.sq, args.sk, args.heads, args.d, args.reps, args.batch, causal=args.causal)
    header = ["method", "seconds", "peak_elems", "max_rel_err"]
    write_csv(out / "bench.csv", header, [[r[h] for h in header] for r in rows])
    naive = next(r for r in rows if r["method"] == "naive")
    for r in rows:
        ratio = naive["peak_elems"] / max(r["peak_elems"], 1)
        print(f"{r['method']:>16}  {r['seconds'] * 1e3:9.3f} ms  peak {r['peak_elems']:>10} elems "
              f"(naive/this {ratio:6.1f}x)  max rel err {r['max_rel_err']:.2e}")
    write_manifest(out / "manifest.json", command="bench contraction", config_hash=config_hash({k: v for k, v in vars(args).items() if k not in ("func", "out", "force", "default_out", "verbose")}),
                   seed=0, shape=dict(sq=args.sq, sk=args.sk, heads=args.heads, d=args.d, batch=args.batch))
    bad = [r for r in rows if r["max_rel_err"] > 1e-5 * (1e3 if args.d > 256 else 1)]
    return int(bool(bad))


def cmd_inspect(args) -> int:
    ck = ckpt_io.load(args.path)
    params = ck.params()
    info = {
        "step": ck.step,
        "config": ck.config,
        "n_tensors": len(ck.tensors),
        "n_parameters": int(sum(v.size for v in params.values())),
        "has_optimizer_state": any(k.startswith("optim.") for k in ck.tensors),
        "extra": ck.extra,
        "tensors": {k: list(v.shape) for k, v in params.items()},
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def cmd_experiment(args) -> int:
    from .experiment import run_experiment

    summary = run_experiment(Path(args.out))
    print(json.dumps({k: v for k, v in summary.items() if k != "runs"}, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (default runs/<command>)")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = argparse.ArgumentParser(prog="coca-lab", description="CoCA vs RoPE desk experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model from a run config")
    t.add_argument("--resume", help="checkpoint to continue from (writes into --out)")
    t.set_defaults(func=cmd_train, default_out="runs/train")

    e = sub.add_parser("eval", help="perplexity or passkey evaluation")
    esub = e.add_subparsers(dest="task", required=True)
    for task in ("ppl", "passkey"):
        ep = esub.add_parser(task, parents=[common])
        ep.add_argument("--checkpoint", required=True)
        ep.add_argument("--ntk-kappa", type=float, default=None, help="NTK base scale factor (ppl default 1; passkey default covers the longest length)")
        ep.set_defaults(func=cmd_eval, default_out=f"runs/eval-{task}")
        if task == "ppl":
            ep.add_argument("--contexts", help="comma-separated context sizes")
            ep.add_argument("--stride", type=int, default=None, help="window stride (default 256)")
            ep.add_argument("--docs", type=int, default=None)
        else:
            ep.add_argument("--lengths", help="comma-separated target prompt lengths")
            ep.add_argument("--n", type=int, default=None, help="samples per length (default 100)")
            ep.add_argument("--template", choices=["standard", "desk"], default=None)

    d = sub.add_parser("diagnose", help="order breaking, decay bounds, rotary borders")
    dsub = d.add_subparsers(dest="kind", required=True)
    for kind in ("order", "decay", "borders"):
        dp = dsub.add_parser(kind, parents=[common])
        dp.add_argument("--head-dim", type=int, default=None)
        dp.add_argument("--s-max", type=int, default=None)
        dp.set_defaults(func=cmd_diagnose, default_out=f"runs/diagnose-{kind}")
        if kind == "borders":
            dp.add_argument("--theta0", type=float, default=None)
        else:
            dp.add_argument("--coca", action="store_true", help="use CoCA effective keys")
            dp.add_argument("--mode", choices=["coca", "baseline"], default=None)
            dp.add_argument("--checkpoint")
            dp.add_argument("--layer", type=int, default=0)
            dp.add_argument("--head", type=int, default=0)

    b = sub.add_parser("bench", help="kernel benchmarks")
    bsub = b.add_subparsers(dest="what", required=True)
    bc = bsub.add_parser("contraction", parents=[common])
    for name, default in (("sq", 128), ("sk", 128), ("heads", 4), ("d", 64), ("reps", 5), ("batch", 1)):
        bc.add_argument(f"--{name}", type=int, default=default)
    bc.add_argument("--causal", action="store_true")
    bc.set_defaults(func=cmd_bench, default_out="runs/bench-contraction")

    i = sub.add_parser("inspect", help="inspect artifacts")
    isub = i.add_subparsers(dest="what", required=True)
    ic = isub.add_parser("checkpoint")
    ic.add_argument("path")
    ic.set_defaults(func=cmd_inspect)

    x = sub.add_parser("experiment", help="desk CoCA vs baseline sweep")
    x.add_argument("--out", default="results/desk_extrapolation")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "out", "") is None:
        args.out = args.default_out
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = os.environ.get("COCA_LAB_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            parser.error("COCA_LAB_THREADS must be an integer")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileExistsError as e:
        print(f"refusing: {e}", file=sys.stderr)
        return 2
    except (CocaLabError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
