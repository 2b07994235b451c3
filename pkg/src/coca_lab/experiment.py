"""Desk-scale extrapolation experiment: CoCA vs RoPE baseline over several seeds.

Each (seed, variant) run trains a desk model on an even mix of ``keyvalue``
episodes and ``lm_mix`` text, then measures passkey accuracy past the
training length under NTK rescaling and sliding-window perplexity at long
context without rescaling. Runs are stored individually so an interrupted
sweep picks up where it stopped; ``summary.json`` is keyed by the protocol
hash.

    python -m coca_lab.experiment --out results/desk_extrapolation
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import time
from pathlib import Path

import torch

from . import checkpoint as ckpt_io
from .corpus import mixed_corpus, synth_corpus
from .evaluation import passkey_suite, ppl_curve
from .model import init_model, preset
from .reporting import config_hash, write_manifest
from .templates import TEMPLATES
from .training import TrainConfig, train_loop

log = logging.getLogger("coca_lab.experiment")

PROTOCOL = {
    "model_preset": "desk",
    "seeds": [0, 1, 2],
    "variants": ["coca", "baseline"],
    "corpus": {"parts": {"keyvalue": 0.5, "lm_mix": 0.5}, "size_tokens": 4_000_000},
    "train": {
        "total_steps": 6000,
        "warmup_fraction": 0.01,
        "lr_start": 1e-7,
        "lr_peak": 1e-3,
        "lr_final": 1e-4,
        "weight_decay": 0.1,
        "grad_clip": 1.0,
        "batch_size": 16,
        "grad_accum": 1,
        "seq_len": 64,
    },
    "passkey": {"lengths": [128, 256], "target_length": 256, "ntk_kappa": 4.0, "n": 100, "template": "desk"},
    "ppl": {"docs": 8, "doc_tokens": 1024, "contexts": [64, 512], "long_context": 512, "stride": 256, "ntk_kappa": 1.0},
    "criteria": {"min_accuracy_gain": 0.20, "coca_max_ppl_ratio": 2.0, "baseline_min_ppl_ratio": 4.0},
}


def protocol_hash(protocol=PROTOCOL) -> str:
    return config_hash(protocol)[:16]


def run_one(seed: int, variant: str, out_dir: Path, protocol=PROTOCOL) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    result_path = out_dir / "result.json"
    if result_path.exists():
        return json.loads(result_path.read_text())
    t0 = time.perf_counter()
    model = init_model(preset(protocol["model_preset"], variant=variant, seed=seed))
    corpus = mixed_corpus(
        protocol["corpus"]["parts"], protocol["corpus"]["size_tokens"], 1000 + seed,
        protocol["train"]["seq_len"],
    )
    cfg = TrainConfig(seed=seed, **protocol["train"])

    def progress(step, lr, loss):
        if step % 500 == 0:
            log.info("seed %d %s step %d lr %.2e loss %.4f", seed, variant, step, lr, loss)

    final_ckpt = out_dir / "final.ckpt"
    if final_ckpt.exists():
        model, _ = ckpt_io.load_model(final_ckpt)
        losses = []
    else:
        res = train_loop(model, corpus, cfg, out_dir=out_dir, on_step=progress)
        losses = res.losses
    train_s = time.perf_counter() - t0

    pk = protocol["passkey"]
    samples = []
    curve = passkey_suite(
        model, pk["lengths"], pk["n"], pk["ntk_kappa"], seed=10_000 + seed,
        template=TEMPLATES[pk["template"]], samples_out=samples,
    )
    pp = protocol["ppl"]
    docs = [synth_corpus("lm_mix", pp["doc_tokens"], 50_000 + 100 * seed + i) for i in range(pp["docs"])]
    pcurve = ppl_curve(model, docs, pp["contexts"], pp["stride"], pp["ntk_kappa"])
    ppl = {r["context"]: r["ppl"] for r in pcurve.records}
    result = {
        "seed": seed,
        "variant": variant,
        "final_loss": float(sum(losses[-100:]) / max(1, len(losses[-100:]))) if losses else None,
        "passkey": {str(r["length"]): r["accuracy"] for r in curve.records},
        "ppl": {str(k): v for k, v in ppl.items()},
        "ppl_ratio": ppl[pp["long_context"]] / ppl[pp["contexts"][0]],
        "train_seconds": train_s,
        "eval_seconds": time.perf_counter() - t0 - train_s,
    }
    (out_dir / "passkey_samples.json").write_text(json.dumps(samples[:20], indent=1))
    result_path.write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


def summarize(results: list, protocol=PROTOCOL) -> dict:
    by = {(r["seed"], r["variant"]): r for r in results}
    target = str(protocol["passkey"]["target_length"])
    seeds = [s for s in protocol["seeds"] if (s, "coca") in by and (s, "baseline") in by]
    gains = [by[s, "coca"]["passkey"][target] - by[s, "baseline"]["passkey"][target] for s in seeds]
    coca_ratio = [by[s, "coca"]["ppl_ratio"] for s in seeds]
    base_ratio = [by[s, "baseline"]["ppl_ratio"] for s in seeds]
    crit = protocol["criteria"]
    summary = {
        "protocol_hash": protocol_hash(protocol),
        "seeds": seeds,
        "complete": len(seeds) == len(protocol["seeds"]),
        "median_accuracy_gain": statistics.median(gains) if gains else None,
        "median_coca_ppl_ratio": statistics.median(coca_ratio) if seeds else None,
        "median_baseline_ppl_ratio": statistics.median(base_ratio) if seeds else None,
        "runs": results,
    }
    if seeds:
        summary["passkey_pass"] = summary["median_accuracy_gain"] >= crit["min_accuracy_gain"]
        summary["ppl_pass"] = (
            summary["median_coca_ppl_ratio"] <= crit["coca_max_ppl_ratio"]
            and summary["median_baseline_ppl_ratio"] >= crit["baseline_min_ppl_ratio"]
        )
    return summary


def run_experiment(out: Path, protocol=PROTOCOL) -> dict:
    out = Path(out) / protocol_hash(protocol)
    out.mkdir(parents=True, exist_ok=True)
    (out / "protocol.json").write_text(json.dumps(protocol, indent=2, sort_keys=True))
    results = []
    for seed in protocol["seeds"]:
        for variant in protocol["variants"]:
            results.append(run_one(seed, variant, out / f"seed{seed}_{variant}", protocol))
    summary = summarize(results, protocol)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    write_manifest(out / "manifest.json", config_hash=config_hash(protocol), seed=protocol["seeds"],
                   ntk_kappa=protocol["passkey"]["ntk_kappa"])
    return summary


def load_summary(out: Path, protocol=PROTOCOL):
    path = Path(out) / protocol_hash(protocol) / "summary.json"
    return json.loads(path.read_text()) if path.exists() else None


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/desk_extrapolation")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    summary = run_experiment(Path(args.out))
    print(json.dumps({k: v for k, v in summary.items() if k != "runs"}, indent=2))


if __name__ == "__main__":
    main()
