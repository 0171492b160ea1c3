"""Toy decoder-only transformer with optional sliding-window attention and LoRA.

Pre-LN blocks with learned absolute position embeddings; hidden states are
reported after the final layer norm, and the sequence representation is the
hidden state at the first end-of-sequence token. Attention projections are
stored in (out_features, in_features) orientation and applied via F.linear,
so a LoRA pair (A: r x d_in, B: d_out x r) merges as W + (alpha/r) * B @ A.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_MAGIC = b"FOCUSCKPT1"

LORA_TARGETS = ("q", "k", "v", "o")

TAU_MIN = 1e-3
TAU_MAX = 10.0

# Amplitude of the sinusoidal position-embedding init, sized against the
# 0.02-std token embeddings so neither signal drowns the other at layer 1.
POS_INIT_SCALE = 0.1

_DTYPES = {"float32": torch.float32, "float64": torch.float64}
_NP_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _sinusoid_table(max_len: int, d_model: int, dtype: torch.dtype) -> torch.Tensor:
    pos = torch.arange(max_len, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, d_model, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, idx / d_model)
    table = torch.zeros(max_len, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : d_model // 2])
    return table.to(dtype)


@dataclass
class LoraConfig:
    rank: int = 4
    alpha: float = 8.0
    targets: tuple[str, ...] = LORA_TARGETS

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {self.rank}")
        self.targets = tuple(self.targets)
        bad = [t for t in self.targets if t not in LORA_TARGETS]
        if bad:
            raise ValueError(f"unknown LoRA targets {bad}; allowed: {LORA_TARGETS}")


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_len: int = 512
    window: Optional[int] = None
    lora: Optional[LoraConfig] = None
    seed: int = 0
    dtype: str = "float32"
    tau_init: float = 0.07
    tie_embeddings: bool = False
    # Feedforward width as a multiple of d_model; 0 drops the MLP entirely,
    # leaving attention-only blocks.
    mlp_mult: int = 4

    def __post_init__(self):
        if isinstance(self.lora, dict):
            self.lora = LoraConfig(**self.lora)
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.mlp_mult < 0:
            raise ValueError(f"mlp_mult must be >= 0, got {self.mlp_mult}")
        if self.window is not None and not 1 <= self.window <= self.max_len:
            raise ValueError(f"window {self.window} must be in [1, max_len={self.max_len}]")
        if self.dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        if not TAU_MIN <= self.tau_init <= TAU_MAX:
            raise ValueError(f"tau_init {self.tau_init} outside [{TAU_MIN}, {TAU_MAX}]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        if obj.get("lora") is not None:
            lora = dict(obj["lora"])
            lora["targets"] = tuple(lora["targets"])
            obj["lora"] = LoraConfig(**lora)
        return cls(**obj)


@dataclass
class ForwardOutput:
    """Per-position logits and hidden states, plus optional attention maps.

    For a single (unbatched) input, tensors carry no batch dim and
    ``eos_index`` is an int (-1 when no EOS was found). Attention maps are
    one (n_heads, L, L) tensor per layer; each row is a distribution over
    the keys the mask allows, with disallowed entries exactly zero.
    """

    logits: torch.Tensor
    hidden: torch.Tensor
    attn: Optional[list[torch.Tensor]]
    eos_index: Union[int, torch.Tensor]


class Block(nn.Module):
    def __init__(self, config: ModelConfig, gen: torch.Generator):
        super().__init__()
        d = config.d_model
        dt = _DTYPES[config.dtype]

        def w(shape, std=0.02):
            return nn.Parameter(torch.randn(shape, generator=gen, dtype=dt) * std)

        self.ln1_g = nn.Parameter(torch.ones(d, dtype=dt))
        self.ln1_b = nn.Parameter(torch.zeros(d, dtype=dt))
        self.wq = w((d, d))
        self.wk = w((d, d))
        self.wv = w((d, d))
        self.wo = w((d, d))
        self.ln2_g = nn.Parameter(torch.ones(d, dtype=dt))
        self.ln2_b = nn.Parameter(torch.zeros(d, dtype=dt))
        m = config.mlp_mult * d
        if m > 0:
            self.w1 = w((m, d))
            self.b1 = nn.Parameter(torch.zeros(m, dtype=dt))
            self.w2 = w((d, m))
            self.b2 = nn.Parameter(torch.zeros(d, dtype=dt))
        else:
            self.w1 = self.b1 = self.w2 = self.b2 = None

        self.lora_A = nn.ParameterDict()
        self.lora_B = nn.ParameterDict()
        if config.lora is not None:
            r = config.lora.rank
            for t in config.lora.targets:
                self.lora_A[t] = w((r, d))
                # Zero B keeps the adapted model identical to the base at init.
                self.lora_B[t] = nn.Parameter(torch.zeros(d, r, dtype=dt))

        self.n_heads = config.n_heads
        self.lora_cfg = config.lora

    def _proj(self, x: torch.Tensor, target: str) -> torch.Tensor:
        base = {"q": self.wq, "k": self.wk, "v": self.wv, "o": self.wo}[target]
        out = F.linear(x, base)
        if self.lora_cfg is not None and target in self.lora_cfg.targets:
            scale = self.lora_cfg.alpha / self.lora_cfg.rank
            out = out + scale * F.linear(F.linear(x, self.lora_A[target]), self.lora_B[target])
        return out

    def forward(self, x: torch.Tensor, mask: torch.Tensor, want_attn: bool):
        b, L, d = x.shape
        h = F.layer_norm(x, (d,), self.ln1_g, self.ln1_b)
        q = self._proj(h, "q").view(b, L, self.n_heads, -1).transpose(1, 2)
        k = self._proj(h, "k").view(b, L, self.n_heads, -1).transpose(1, 2)
        v = self._proj(h, "v").view(b, L, self.n_heads, -1).transpose(1, 2)

        scores = q @ k.transpose(-2, -1) / (q.shape[-1] ** 0.5)
        scores = scores.masked_fill(~mask, float("-inf"))
        probs = torch.softmax(scores, dim=-1)

        ctx = (probs @ v).transpose(1, 2).reshape(b, L, d)
        x = x + self._proj(ctx, "o")

        if self.w1 is not None:
            h = F.layer_norm(x, (d,), self.ln2_g, self.ln2_b)
            x = x + F.linear(F.gelu(F.linear(h, self.w1, self.b1)), self.w2, self.b2)
        return x, (probs if want_attn else None)


class FocusLM(nn.Module):
    """The toy causal LM. Construct via :func:`init_params` for seeded init."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        dt = _DTYPES[config.dtype]
        gen = torch.Generator().manual_seed(config.seed)

        self.tok_emb = nn.Parameter(torch.randn(config.vocab_size, config.d_model,
                                                generator=gen, dtype=dt) * 0.02)
        # Positions stay learnable but start as scaled sinusoids rather than
        # noise: banded patterns (such as attending one position back) are then
        # linear in the embeddings, which random init makes needlessly hard to
        # reach at this scale.
        self.pos_emb = nn.Parameter(
            _sinusoid_table(config.max_len, config.d_model, dt) * POS_INIT_SCALE)
        self.blocks = nn.ModuleList(Block(config, gen) for _ in range(config.n_layers))
        self.ln_f_g = nn.Parameter(torch.ones(config.d_model, dtype=dt))
        self.ln_f_b = nn.Parameter(torch.zeros(config.d_model, dtype=dt))
        if config.tie_embeddings:
            self.head_w = None
        else:
            self.head_w = nn.Parameter(torch.randn(config.vocab_size, config.d_model,
                                                   generator=gen, dtype=dt) * 0.02)
        self.log_inv_tau = nn.Parameter(
            torch.tensor(float(np.log(1.0 / config.tau_init)), dtype=dt))

        if config.lora is not None:
            self._freeze_for_lora()

    def _freeze_for_lora(self):
        # Only adapters, embeddings, layer norms, and the temperature train.
        for name, p in self.named_parameters():
            tunable = ("lora_" in name or name in ("tok_emb", "pos_emb", "log_inv_tau")
                       or ".ln" in name or name.startswith("ln_f"))
            p.requires_grad_(tunable)

    def tau(self) -> torch.Tensor:
        """Contrastive temperature, clamped to its stability range."""
        return torch.exp(-self.log_inv_tau).clamp(TAU_MIN, TAU_MAX)

    def attention_mask(self, length: int) -> torch.Tensor:
        """Boolean (L, L) mask: query i may attend key j iff 0 <= i-j < window."""
        idx = torch.arange(length)
        rel = idx[:, None] - idx[None, :]
        allowed = rel >= 0
        if self.config.window is not None:
            allowed &= rel < self.config.window
        return allowed

    def forward(self, tokens, want_attn: bool = False,
                eos_id: Optional[int] = None) -> ForwardOutput:
        if not torch.is_tensor(tokens):
            tokens = torch.tensor(tokens, dtype=torch.long)
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens.unsqueeze(0)
        b, L = tokens.shape
        if L > self.config.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.config.max_len}")
        if L == 0:
            raise ValueError("cannot run forward on an empty sequence")

        mask = self.attention_mask(L)
        x = self.tok_emb[tokens] + self.pos_emb[:L]
        attn_maps: list[torch.Tensor] = []
        for block in self.blocks:
            x, probs = block(x, mask, want_attn)
            if want_attn:
                attn_maps.append(probs)

        hidden = F.layer_norm(x, (self.config.d_model,), self.ln_f_g, self.ln_f_b)
        logits = F.linear(hidden, self.tok_emb if self.head_w is None else self.head_w)

        eos_index: Union[int, torch.Tensor]
        if eos_id is None:
            eos_index = torch.full((b,), -1, dtype=torch.long)
        else:
            firsts = []
            for row in tokens:
                hits = (row == eos_id).nonzero(as_tuple=True)[0]
                firsts.append(int(hits[0]) if len(hits) else -1)
            eos_index = torch.tensor(firsts, dtype=torch.long)

        if squeeze:
            return ForwardOutput(
                logits=logits[0], hidden=hidden[0],
                attn=[a[0] for a in attn_maps] if want_attn else None,
                eos_index=int(eos_index[0]),
            )
        return ForwardOutput(
            logits=logits, hidden=hidden,
            attn=attn_maps if want_attn else None,
            eos_index=eos_index,
        )


def init_params(config: ModelConfig) -> FocusLM:
    """Seeded, deterministic model initialization."""
    return FocusLM(config)


def eos_representation(out: ForwardOutput) -> torch.Tensor:
    """Final hidden state at the first EOS position of a single sequence."""
    if not isinstance(out.eos_index, int):
        raise ValueError("eos_representation expects an unbatched ForwardOutput")
    if out.eos_index < 0:
        raise ValueError("no EOS token in input")
    return out.hidden[out.eos_index]


def effective_weight(base: torch.Tensor, lora_a: torch.Tensor, lora_b: torch.Tensor,
                     alpha: float, rank: int) -> torch.Tensor:
    """Merged weight W + (alpha/rank) * B @ A."""
    if lora_b.shape != (base.shape[0], rank) or lora_a.shape != (rank, base.shape[1]):
        raise ValueError(
            f"LoRA shapes {tuple(lora_a.shape)}/{tuple(lora_b.shape)} do not conform "
            f"to base {tuple(base.shape)} with rank {rank}")
    return base + (alpha / rank) * (lora_b @ lora_a)


def merge_lora(model: FocusLM) -> FocusLM:
    """Fold the adapters into the base weights, returning a LoRA-free model."""
    cfg = model.config
    if cfg.lora is None:
        raise ValueError("model has no LoRA adapters to merge")
    merged_cfg = ModelConfig(**{**cfg.to_dict(), "lora": None})
    merged = FocusLM(merged_cfg)
    state = {k: v.detach().clone() for k, v in model.state_dict().items()
             if "lora_" not in k}
    with torch.no_grad():
        for i, block in enumerate(model.blocks):
            for t in cfg.lora.targets:
                base = {"q": block.wq, "k": block.wk, "v": block.wv, "o": block.wo}[t]
                state[f"blocks.{i}.w{t}"] = effective_weight(
                    base, block.lora_A[t], block.lora_B[t], cfg.lora.alpha, cfg.lora.rank)
    merged.load_state_dict(state)
    return merged


def attach_lora(model: FocusLM, lora: LoraConfig) -> FocusLM:
    """Copy a LoRA-free model into one carrying fresh adapters.

    The base weights transfer unchanged and the new adapters start at their
    seeded init (B zero), so the returned model computes the same function
    as the input until the adapters are trained. Base weights are frozen.
    """
    cfg = model.config
    if cfg.lora is not None:
        raise ValueError("model already carries LoRA adapters")
    adapted_cfg = ModelConfig(**{**cfg.to_dict(), "lora": lora})
    adapted = FocusLM(adapted_cfg)
    state = dict(adapted.state_dict())
    for k, v in model.state_dict().items():
        state[k] = v.detach().clone()
    adapted.load_state_dict(state)
    return adapted


def trainable_parameters(model: FocusLM) -> list[tuple[str, nn.Parameter]]:
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]


def reachability(window: Optional[int], n_layers: int, length: int, i: int, j: int) -> bool:
    """Can information at position j reach position i through n_layers of
    windowed attention? Each layer moves at most window-1 positions."""
    if not 0 <= j <= i < length:
        raise ValueError(f"need 0 <= j <= i < length, got i={i} j={j} length={length}")
    if n_layers < 1:
        return i == j
    if window is None:
        return True
    return i - j < n_layers * (window - 1) + 1


def save_checkpoint(model: FocusLM, path) -> None:
    """Versioned named-tensor container; round-trips bit-exactly."""
    names = [n for n, _ in model.named_parameters()]
    params = dict(model.named_parameters())
    tensors = [{"name": n, "dtype": model.config.dtype, "shape": list(params[n].shape)}
               for n in names]
    header = json.dumps({"config": model.config.to_dict(), "tensors": tensors},
                        ensure_ascii=False).encode("utf-8")
    np_dtype = _NP_DTYPES[model.config.dtype]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for n in names:
            fh.write(params[n].detach().numpy().astype(np_dtype).tobytes())


def load_checkpoint(path) -> FocusLM:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a focustune checkpoint (bad magic {magic!r})")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        model = FocusLM(config)
        params = dict(model.named_parameters())
        np_dtype = _NP_DTYPES[config.dtype]
        itemsize = np.dtype(np_dtype).itemsize
        with torch.no_grad():
            for rec in header["tensors"]:
                name, shape = rec["name"], tuple(rec["shape"])
                if name not in params:
                    raise ValueError(f"{path}: unknown tensor {name!r} in checkpoint")
                count = int(np.prod(shape)) if shape else 1
                buf = fh.read(count * itemsize)
                arr = np.frombuffer(buf, dtype=np_dtype).reshape(shape)
                params[name].copy_(torch.from_numpy(arr.copy()))
    return model
