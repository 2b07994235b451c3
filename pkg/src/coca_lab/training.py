"""Training loop: warmup/decay schedule, AdamW, accumulation, resumable checkpoints."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .errors import ConfigError, InputError, NumericError, StateError
from .model import CocaLM, lm_loss

METRICS_HEADER = ["step", "lr", "loss", "tokens_per_sec", "elapsed_s"]


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 1000
    warmup_fraction: float = 0.01
    lr_start: float = 1e-7
    lr_peak: float = 1e-4
    lr_final: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    batch_size: int = 16
    grad_accum: int = 1
    seq_len: int = 64
    seed: int = 0
    checkpoint_every: int = 0
    log_timing: bool = False

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0 < self.warmup_fraction < 1:
            raise ConfigError(f"warmup_fraction must be in (0, 1), got {self.warmup_fraction}")
        if not (self.lr_start <= self.lr_peak and self.lr_final <= self.lr_peak):
            raise ConfigError("need lr_start <= lr_peak and lr_final <= lr_peak")
        if min(self.lr_start, self.lr_final) < 0:
            raise ConfigError("learning rates must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.grad_accum < 1 or self.seq_len < 1:
            raise ConfigError("batch_size, grad_accum and seq_len must be >= 1")
        if self.weight_decay < 0 or self.grad_clip < 0 or self.checkpoint_every < 0:
            raise ConfigError("weight_decay, grad_clip and checkpoint_every must be >= 0")

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_fraction * self.total_steps)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ``lr_start -> lr_peak`` over the warmup, then linear ``-> lr_final`` at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise InputError(f"step {step} outside [0, {cfg.total_steps}]")
    w = cfg.warmup_steps
    if step <= w:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * step / w
    return cfg.lr_peak + (cfg.lr_final - cfg.lr_peak) * (step - w) / (cfg.total_steps - w)


def new_optimizer_state(params: dict) -> dict:
    return {
        "step": 0,
        "m": {n: torch.zeros_like(p) for n, p in params.items()},
        "v": {n: torch.zeros_like(p) for n, p in params.items()},
    }


def decays(name: str, p: torch.Tensor) -> bool:
    """Weight decay applies to matrices (embeddings, projections), not norms or biases."""
    return p.ndim >= 2


@torch.no_grad()
def adamw_step(params: dict, grads: dict, state: dict, lr: float, cfg: TrainConfig) -> dict:
    """Decoupled-decay Adam with bias correction, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
    state["step"] += 1
    t = state["step"]
    bc1 = 1 - cfg.beta1**t
    bc2_sqrt = math.sqrt(1 - cfg.beta2**t)
    for name, p in params.items():
        g = grads[name]
        m, v = state["m"][name], state["v"][name]
        if cfg.weight_decay and decays(name, p):
            p.mul_(1 - lr * cfg.weight_decay)
        m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
        v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
        denom = (v.sqrt() / bc2_sqrt).add_(cfg.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return state


class WindowLoader:
    """Windows of ``seq_len + 1`` tokens starting at multiples of ``seq_len``.

    Sample ``g`` (counting across epochs) is window ``perm_e[g mod n]`` of
    epoch ``e = g // n`` with ``perm_e`` drawn from ``(seed, e)``. The order
    depends only on the sample count, so batching and resumption do not
    change which windows are seen.
    """

    def __init__(self, corpus, seq_len: int, seed: int):
        self.corpus = torch.as_tensor(np.asarray(corpus, dtype=np.int64))
        self.seq_len = seq_len
        self.seed = seed
        self.n_windows = (len(self.corpus) - 1) // seq_len
        if self.n_windows < 1:
            raise InputError(f"corpus of {len(self.corpus)} tokens holds no {seq_len + 1}-token window")
        self._perm = {}

    def _perm_for(self, epoch: int) -> np.ndarray:
        if epoch not in self._perm:
            self._perm = {epoch: np.random.default_rng([self.seed, epoch]).permutation(self.n_windows)}
        return self._perm[epoch]

    def batch(self, start: int, count: int) -> torch.Tensor:
        rows = []
        for g in range(start, start + count):
            w = int(self._perm_for(g // self.n_windows)[g % self.n_windows])
            rows.append(self.corpus[w * self.seq_len : w * self.seq_len + self.seq_len + 1])
        return torch.stack(rows)


@dataclass
class TrainResult:
    step: int
    losses: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    seconds: float = 0.0


def _grads(model):
    out = {}
    for n, p in model.named_parameters():
        out[n] = p.grad if p.grad is not None else torch.zeros_like(p)
    return out


def train_loop(
    model: CocaLM,
    corpus,
    cfg: TrainConfig,
    out_dir=None,
    resume=None,
    on_step: Optional[Callable] = None,
) -> TrainResult:
    """Run until ``cfg.total_steps`` optimizer steps are done.

    Step ``k`` (1-based) uses ``lr_at(k - 1)``. With ``out_dir``, writes
    ``metrics.csv``, periodic ``ckpt_<step:06d>.ckpt`` and ``final.ckpt``.
    ``resume`` (path or Checkpoint) restores parameters, moments and the data
    cursor; continuation is bit-identical in single-threaded runs.
    """
    if cfg.seq_len > model.cfg.max_seq:
        raise ConfigError(f"seq_len {cfg.seq_len} exceeds model max_seq {model.cfg.max_seq}")
    out_dir = Path(out_dir) if out_dir is not None else None
    loader = WindowLoader(corpus, cfg.seq_len, cfg.seed)
    params = dict(model.named_parameters())
    state = new_optimizer_state({n: p.detach() for n, p in params.items()})
    step, samples = 0, 0
    if resume is not None:
        ck = resume if isinstance(resume, ckpt_io.Checkpoint) else ckpt_io.load(resume)
        if ck.config != model.cfg.to_dict():
            raise StateError("checkpoint config differs from the model being trained")
        ckpt_io.restore_params(model, ck)
        saved = ck.optimizer_state()
        for n in params:
            state["m"][n].copy_(torch.from_numpy(saved["m"][n]))
            state["v"][n].copy_(torch.from_numpy(saved["v"][n]))
        state["step"] = saved["step"]
        step = ck.step
        samples = json.loads(ck.rng_state.decode("ascii"))["samples"]

    def snapshot(path):
        rng = json.dumps({"samples": samples, "seed": cfg.seed}).encode("ascii")
        c = ckpt_io.model_checkpoint(
            model, step, state, rng, extra={"train": cfg.to_dict()}
        )
        return ckpt_io.save(path, c)

    writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        mpath = out_dir / "metrics.csv"
        kept = []
        if resume is not None and mpath.exists():
            with mpath.open() as f:
                kept = [r for r in csv.reader(f)][1:]
            kept = [r for r in kept if int(r[0]) <= step]
        fh = mpath.open("w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        writer.writerows(kept)

    result = TrainResult(step)
    t0 = time.perf_counter()
    model.train()
    try:
        while step < cfg.total_steps:
            ts = time.perf_counter()
            lr = lr_at(step, cfg)
            model.zero_grad(set_to_none=True)
            total = 0.0
            for _ in range(cfg.grad_accum):
                mb = loader.batch(samples, cfg.batch_size)
                samples += cfg.batch_size
                loss = lm_loss(model, mb) / cfg.grad_accum
                if not torch.isfinite(loss):
                    if out_dir is not None:
                        snapshot(out_dir / "diverged.ckpt")
                    raise NumericError(f"non-finite loss at step {step + 1}")
                loss.backward()
                total += loss.item()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            adamw_step({n: p.data for n, p in params.items()}, _grads(model), state, lr, cfg)
            step += 1
            result.losses.append(total)
            if writer is not None:
                if cfg.log_timing:
                    dt = time.perf_counter() - ts
                    tps = cfg.batch_size * cfg.grad_accum * cfg.seq_len / max(dt, 1e-12)
                    row = [step, repr(lr), repr(total), f"{tps:.1f}", f"{time.perf_counter() - t0:.3f}"]
                else:
                    row = [step, repr(lr), repr(total), "0", "0"]
                writer.writerow(row)
            if on_step is not None:
                on_step(step, lr, total)
            if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                result.checkpoints.append(snapshot(out_dir / f"ckpt_{step:06d}.ckpt"))
        if out_dir is not None:
            result.checkpoints.append(snapshot(out_dir / "final.ckpt"))
    finally:
        if writer is not None:
            fh.close()
    model.eval()
    result.step = step
    result.seconds = time.perf_counter() - t0
    return result


__all__ = [
    "METRICS_HEADER",
    "TrainConfig",
    "TrainResult",
    "WindowLoader",
    "adamw_step",
    "decays",
    "lr_at",
    "new_optimizer_state",
    "train_loop",
]
