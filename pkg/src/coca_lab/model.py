"""Causal transformer with a selectable attention variant."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import VARIANTS, CausalSelfAttention
from .errors import ConfigError, InputError, NumericError, RangeError
from .rotary import DEFAULT_BASE, RotaryTable, build_rotary_table, ntk_rescale
from .tokenizer import VOCAB_SIZE


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    max_seq: int = 64
    vocab_size: int = VOCAB_SIZE
    rope_base: float = DEFAULT_BASE
    variant: str = "coca"
    mlp_ratio: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError(f"head_dim {self.d_model // self.n_heads} must be even")
        if self.max_seq < 2:
            raise ConfigError(f"max_seq must be >= 2, got {self.max_seq}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.mlp_ratio > 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if not self.rope_base > 1:
            raise ConfigError(f"rope_base must be > 1, got {self.rope_base}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "tiny": dict(n_layers=1, d_model=16, n_heads=2, max_seq=16),
    "desk": dict(n_layers=4, d_model=128, n_heads=4, max_seq=64),
    # 350M-parameter setting; recorded for reference, too large for desk runs
    "large-350m": dict(n_layers=24, d_model=1024, n_heads=16, max_seq=512),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


class Block(nn.Module):
    """Pre-norm residual block: attention then GELU MLP, applied sequentially."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        hidden = int(round(cfg.mlp_ratio * cfg.d_model))
        self.ln_1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg.d_model, cfg.n_heads, cfg.variant)
        self.ln_2 = nn.LayerNorm(cfg.d_model)
        self.fc_in = nn.Linear(cfg.d_model, hidden, bias=False)
        self.fc_out = nn.Linear(hidden, cfg.d_model, bias=False)

    def forward(self, x, table, cache=None):
        a, cache = self.attn(self.ln_1(x), table, cache)
        x = x + a
        x = x + self.fc_out(F.gelu(self.fc_in(self.ln_2(x))))
        return x, cache


class CocaLM(nn.Module):
    """Byte-level causal LM. ``forward`` returns ``(logits, caches)``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.base_table = build_rotary_table(cfg.head_dim, cfg.rope_base, cfg.max_seq)
        self.table = self.base_table
        self.ntk_kappa = 1.0

    def set_context(self, max_pos: int, ntk_kappa: float = 1.0) -> RotaryTable:
        """Rebuild the rotary table for inference up to ``max_pos`` positions.

        ``ntk_kappa > 1`` enlarges the base as for a context of
        ``ntk_kappa * max_seq`` tokens; the table is then grown (never
        rescaled further) to hold ``max_pos`` positions.
        """
        if ntk_kappa < 1:
            raise RangeError(f"ntk_kappa must be >= 1, got {ntk_kappa}")
        train_len = self.cfg.max_seq
        table = ntk_rescale(self.base_table, train_len, int(round(ntk_kappa * train_len)))
        self.table = table.extended(max(max_pos, self.cfg.max_seq))
        self.ntk_kappa = float(ntk_kappa)
        return self.table

    def reset_context(self):
        self.table = self.base_table
        self.ntk_kappa = 1.0

    def forward(self, tokens, caches: Optional[list] = None, use_cache: bool = False):
        tokens = torch.as_tensor(tokens)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None]
        if tokens.ndim != 2:
            raise InputError(f"tokens must be [seq] or [batch, seq], got {tuple(tokens.shape)}")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.vocab_size):
            raise InputError(f"token ids must lie in [0, {self.cfg.vocab_size})")
        if caches is not None and len(caches) != len(self.blocks):
            raise InputError(f"expected {len(self.blocks)} layer caches, got {len(caches)}")
        past = caches[0].length if caches else 0
        if past + tokens.shape[1] > self.table.max_pos:
            raise RangeError(
                f"sequence end {past + tokens.shape[1]} exceeds rotary capacity {self.table.max_pos}"
            )
        x = self.tok_emb(tokens.long())
        new_caches = []
        for i, block in enumerate(self.blocks):
            x, c = block(x, self.table, caches[i] if caches else None)
            new_caches.append(c)
        logits = self.lm_head(self.ln_f(x))
        if squeeze:
            logits = logits[0]
        return logits, (new_caches if (use_cache or caches is not None) else None)

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_model(cfg: ModelConfig) -> CocaLM:
    """Deterministic init from ``cfg.seed``: matrices ``N(0, 1/d_model)``, norms at identity.

    Parameters are drawn in registration order, which does not depend on the
    variant, so both variants share weights for a given seed.
    """
    model = CocaLM(cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    std = 1.0 / math.sqrt(cfg.d_model)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.split(".")[-2].startswith("ln_"):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * std)
    return model


def next_token_loss(logits, targets) -> torch.Tensor:
    """Mean cross-entropy in nats; ``targets`` already shifted by the caller."""
    targets = torch.as_tensor(targets)
    if tuple(logits.shape[:-1]) != tuple(targets.shape):
        raise InputError(f"logits {tuple(logits.shape)} do not match targets {tuple(targets.shape)}")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1).long())


def lm_loss(model: CocaLM, batch) -> torch.Tensor:
    """Loss of a ``[batch, seq + 1]`` token block."""
    batch = torch.as_tensor(batch)
    logits, _ = model(batch[..., :-1])
    return next_token_loss(logits, batch[..., 1:])


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_parameter: str
    n_coords: int
    per_parameter: dict


def gradient_check(
    model: nn.Module,
    batch,
    epsilon: float = 1e-5,
    n_coords: int = 256,
    seed: int = 0,
    loss_fn: Optional[Callable] = None,
    must_include: tuple = ("attn.w_q.weight", "attn.w_t.weight"),
    per_tensor_min: int = 8,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """Central finite differences against autograd, in float64, on a copy of ``model``.

    Samples ``n_coords`` coordinates, with at least ``per_tensor_min`` from
    every parameter whose name ends in one of ``must_include``. Relative error
    is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    if not epsilon > 0:
        raise InputError(f"epsilon must be positive, got {epsilon}")
    loss_fn = loss_fn or lm_loss
    model = copy.deepcopy(model).double()
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model, batch)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {float(loss)} in gradient check")
    loss.backward()
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    rng = np.random.default_rng(seed)
    picks = []
    for i, (name, p) in enumerate(named):
        if name.endswith(must_include):
            k = min(per_tensor_min, p.numel())
            picks += [(i, int(j)) for j in rng.choice(p.numel(), size=k, replace=False)]
    sizes = np.array([p.numel() for _, p in named], dtype=np.float64)
    remaining = max(0, n_coords - len(picks))
    owners = rng.choice(len(named), size=remaining, p=sizes / sizes.sum())
    picks += [(int(i), int(rng.integers(named[i][1].numel()))) for i in owners]

    worst, worst_name, per = 0.0, "", {}
    with torch.no_grad():
        for i, j in picks:
            name, p = named[i]
            flat = p.view(-1)
            analytic = float(p.grad.view(-1)[j])
            orig = float(flat[j])
            flat[j] = orig + epsilon
            up = float(loss_fn(model, batch))
            flat[j] = orig - epsilon
            down = float(loss_fn(model, batch))
            flat[j] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"non-finite loss perturbing {name}[{j}]")
            numeric = (up - down) / (2 * epsilon)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), abs_floor)
            per[name] = max(per.get(name, 0.0), err)
            if err >= worst:
                worst, worst_name = err, name
    return GradCheckReport(worst, worst_name, len(picks), per)


__all__ = [
    "Block",
    "CocaLM",
    "GradCheckReport",
    "ModelConfig",
    "PRESETS",
    "gradient_check",
    "init_model",
    "lm_loss",
    "next_token_loss",
    "preset",
]
