"""Losses, optimizer, and the training loop.

The objective is the sum of a causal LM term over the original sequence, the
same term over its augmented counterpart, and a symmetric in-batch
contrastive term over the two sets of EOS representations. All three are
sums, not means, so anchor values scale with batch and sequence sizes.
"""

from __future__ import annotations

import json
import math
import os
import random
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .errors import DataError, NumericError
from .model import FocusLM, save_checkpoint
from .text_corpus import QASample, Vocab, build_prompt, tokenize

ABLATION_SWITCHES = ("-da", "-contra", "-masking")


@dataclass(frozen=True)
class Ablation:
    """Which objective pieces are on. The contrastive term needs the
    augmented views, so use_contra requires use_da."""

    use_da: bool = True
    use_contra: bool = True
    use_masking: bool = True

    def __post_init__(self):
        if self.use_contra and not self.use_da:
            raise ValueError("contrastive term requires augmented views (use_da)")

    @classmethod
    def parse(cls, spec: str) -> "Ablation":
        """Parse switch lists like "-contra" or "-da,-masking"; also accepts
        "full" (everything on) and "none" (plain CLM on originals)."""
        spec = spec.strip()
        if spec in ("", "full"):
            return cls()
        if spec == "none":
            return cls(use_da=False, use_contra=False, use_masking=False)
        off = set()
        for tok in spec.split(","):
            tok = tok.strip()
            if tok not in ABLATION_SWITCHES:
                raise ValueError(f"unknown ablation switch {tok!r}; allowed: "
                                 f"{', '.join(ABLATION_SWITCHES)}, full, none")
            off.add(tok)
        use_da = "-da" not in off
        return cls(use_da=use_da,
                   use_contra="-contra" not in off and use_da,
                   use_masking="-masking" not in off)

    def tag(self) -> str:
        off = []
        if not self.use_da:
            off.append("-da")
        if not self.use_contra and self.use_da:
            off.append("-contra")
        if not self.use_masking:
            off.append("-masking")
        return ",".join(off) if off else "full"


@dataclass
class PairedBatch:
    """Right-padded token matrices for the original sequences and, when
    augmentation is in play, their augmented views. Loss masks align with
    next-token targets: mask[t] scores the prediction of token t+1."""

    orig_tokens: torch.Tensor
    orig_loss_mask: torch.Tensor
    eos_orig: torch.Tensor
    aug_tokens: Optional[torch.Tensor] = None
    aug_loss_mask: Optional[torch.Tensor] = None
    eos_aug: Optional[torch.Tensor] = None

    @property
    def size(self) -> int:
        return self.orig_tokens.shape[0]


def _pad_stack(seqs: Sequence[list[int]], pad_id: int):
    width = max(len(s) for s in seqs)
    toks = torch.full((len(seqs), width), pad_id, dtype=torch.long)
    mask = torch.zeros(len(seqs), max(width - 1, 1), dtype=torch.bool)
    for i, s in enumerate(seqs):
        toks[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        mask[i, : len(s) - 1] = True
    return toks, mask


def _first_eos(seqs: Sequence[list[int]], eos_id: int) -> torch.Tensor:
    out = []
    for i, s in enumerate(seqs):
        try:
            out.append(s.index(eos_id))
        except ValueError:
            raise DataError(f"sequence {i} has no EOS token") from None
    return torch.tensor(out, dtype=torch.long)


def build_batch(pairs: Sequence[tuple[QASample, Optional[QASample]]],
                vocab: Vocab) -> PairedBatch:
    """Tokenize (original, augmented) sample pairs into one padded batch.
    Pass None as the augmented element for plain-CLM training."""
    if not pairs:
        raise DataError("empty batch")
    orig_ids = [tokenize(build_prompt(o, with_answer=True), vocab) for o, _ in pairs]
    toks_o, mask_o = _pad_stack(orig_ids, vocab.pad_id)
    batch = PairedBatch(orig_tokens=toks_o, orig_loss_mask=mask_o,
                        eos_orig=_first_eos(orig_ids, vocab.eos_id))
    augs = [a for _, a in pairs]
    if any(a is not None for a in augs):
        if any(a is None for a in augs):
            raise DataError("mixed batch: some pairs lack an augmented view")
        aug_ids = [tokenize(build_prompt(a, with_answer=True), vocab) for a in augs]
        batch.aug_tokens, batch.aug_loss_mask = _pad_stack(aug_ids, vocab.pad_id)
        batch.eos_aug = _first_eos(aug_ids, vocab.eos_id)
    return batch


def clm_loss(logits: torch.Tensor, targets: torch.Tensor,
             loss_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Summed next-token NLL. With uniform logits over V this is
    (#scored positions) * ln V."""
    if logits.dim() == 2:
        logits, targets = logits.unsqueeze(0), targets.unsqueeze(0)
        if loss_mask is not None:
            loss_mask = loss_mask.unsqueeze(0)
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if loss_mask is not None:
        nll = nll * loss_mask.to(nll.dtype)
    return nll.sum()


def _sequence_clm(model: FocusLM, tokens: torch.Tensor,
                  loss_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    out = model(tokens)
    loss = clm_loss(out.logits[:, :-1], tokens[:, 1:], loss_mask)
    return loss, out.hidden


def contrastive_loss(reps_a: torch.Tensor, reps_b: torch.Tensor,
                     tau) -> torch.Tensor:
    """Symmetric in-batch InfoNCE over cosine similarities, summed over both
    directions and all rows. Uniform similarities give 2 * N * ln N."""
    if reps_a.shape != reps_b.shape or reps_a.dim() != 2:
        raise ValueError(f"representation shapes {tuple(reps_a.shape)} vs "
                         f"{tuple(reps_b.shape)} must match and be 2-D")
    for name, r in (("first", reps_a), ("second", reps_b)):
        norms = r.norm(dim=1)
        if bool((norms == 0).any()):
            raise NumericError(f"zero-norm representation in {name} view")
    a = F.normalize(reps_a, dim=1)
    b = F.normalize(reps_b, dim=1)
    sim = a @ b.T / tau
    labels = torch.arange(sim.shape[0])
    return (F.cross_entropy(sim, labels, reduction="sum")
            + F.cross_entropy(sim.T, labels, reduction="sum"))


@dataclass
class LossBreakdown:
    clm_orig: float
    clm_aug: float
    contra: float
    total: float
    tau: float

    def to_dict(self) -> dict:
        return {"clm_orig": self.clm_orig, "clm_aug": self.clm_aug,
                "contra": self.contra, "total": self.total, "tau": self.tau}


def total_loss(model: FocusLM, batch: PairedBatch,
               ablation: Ablation = Ablation()) -> tuple[torch.Tensor, LossBreakdown]:
    """Objective for one paired batch. The breakdown's total is the exact
    float sum of its parts."""
    loss_o, hidden_o = _sequence_clm(model, batch.orig_tokens, batch.orig_loss_mask)
    loss = loss_o
    clm_aug = contra = 0.0
    if ablation.use_da:
        if batch.aug_tokens is None:
            raise DataError("ablation requires augmented views but batch has none")
        loss_a, hidden_a = _sequence_clm(model, batch.aug_tokens, batch.aug_loss_mask)
        loss = loss + loss_a
        clm_aug = float(loss_a.detach())
        if ablation.use_contra:
            rows = torch.arange(batch.size)
            reps_o = hidden_o[rows, batch.eos_orig]
            reps_a = hidden_a[rows, batch.eos_aug]
            loss_c = contrastive_loss(reps_o, reps_a, model.tau())
            loss = loss + loss_c
            contra = float(loss_c.detach())
    clm_orig = float(loss_o.detach())
    breakdown = LossBreakdown(clm_orig=clm_orig, clm_aug=clm_aug, contra=contra,
                              total=clm_orig + clm_aug + contra,
                              tau=float(model.tau().detach()))
    return loss, breakdown


def lr_schedule(step: int, total_steps: int, base_lr: float,
                warmup_frac: float = 0.05) -> float:
    """Linear ramp over ceil(warmup_frac * total_steps) steps, then constant.
    step is the 0-based index of the upcoming update."""
    if step < 0 or total_steps < 1:
        raise ValueError(f"need step >= 0 and total_steps >= 1, got {step}/{total_steps}")
    warmup = math.ceil(warmup_frac * total_steps)
    if warmup <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup)


@dataclass
class OptimState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(named_params: Sequence[tuple[str, torch.nn.Parameter]],
               state: OptimState, lr: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.01) -> None:
    """One AdamW update with decoupled weight decay and bias correction.
    Refuses to touch parameters or state if any gradient is non-finite."""
    live = [(n, p) for n, p in named_params if p.grad is not None]
    for name, p in live:
        if not bool(torch.isfinite(p.grad).all()):
            raise NumericError(f"non-finite gradient in {name}")
    beta1, beta2 = betas
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for name, p in live:
            g = p.grad
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            p.mul_(1.0 - lr * weight_decay)
            state.m[name].mul_(beta1).add_(g, alpha=1.0 - beta1)
            state.v[name].mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (state.v[name].sqrt() / math.sqrt(bc2)).add_(eps)
            p.addcdiv_(state.m[name], denom, value=-(lr / bc1))


@dataclass
class TrainConfig:
    steps: int = 100
    batch_size: int = 8
    lr: float = 2e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: Optional[float] = 1.0
    warmup_frac: float = 0.05
    seed: int = 0
    log_every: int = 1
    ablation: Ablation = field(default_factory=Ablation)

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if isinstance(self.ablation, str):
            self.ablation = Ablation.parse(self.ablation)


@dataclass
class TrainResult:
    steps: int
    final_loss: float
    best_loss: float
    best_step: int
    metrics_path: str
    final_path: str
    best_path: str
    elapsed_s: float


def train_loop(model: FocusLM, pairs: Sequence[tuple[QASample, Optional[QASample]]],
               vocab: Vocab, cfg: TrainConfig, out_dir: str) -> TrainResult:
    """Seeded fine-tuning over (original, augmented) pairs.

    Pairs are shuffled per epoch as units so each batch keeps its views
    aligned. Metrics go to out_dir/metrics.jsonl, one JSON object per
    logged step; final and best (lowest total) checkpoints are written at
    the end. Deterministic for a fixed seed and dataset.
    """
    if not pairs:
        raise DataError("no training pairs")
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    final_path = os.path.join(out_dir, "final.ckpt")
    best_path = os.path.join(out_dir, "best.ckpt")

    if cfg.ablation.use_da and any(a is None for _, a in pairs):
        raise DataError("ablation requires augmented views but some pairs lack one")
    # With augmentation off, train on originals only regardless of pairing.
    if not cfg.ablation.use_da:
        pairs = [(o, None) for o, _ in pairs]

    rng = random.Random(cfg.seed)
    order: list[int] = []
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    opt = OptimState()
    best_loss, best_step = math.inf, -1
    best_state = None
    t0 = time.monotonic()

    with open(metrics_path, "w", encoding="utf-8") as log:
        for step in range(cfg.steps):
            take = []
            while len(take) < cfg.batch_size:
                if not order:
                    order = list(range(len(pairs)))
                    rng.shuffle(order)
                take.append(order.pop())
            batch = build_batch([pairs[i] for i in take], vocab)

            loss, parts = total_loss(model, batch, cfg.ablation)
            if not math.isfinite(parts.total):
                raise NumericError(f"non-finite loss at step {step}: {parts.to_dict()}")
            for _, p in params:
                if p.grad is not None:
                    p.grad = None
            loss.backward()
            if cfg.clip_norm:
                torch.nn.utils.clip_grad_norm_([p for _, p in params], cfg.clip_norm)
            lr = lr_schedule(step, cfg.steps, cfg.lr, cfg.warmup_frac)
            adamw_step(params, opt, lr, cfg.betas, cfg.eps, cfg.weight_decay)

            if parts.total < best_loss:
                best_loss, best_step = parts.total, step
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                log.write(json.dumps({"step": step, "lr": lr, **parts.to_dict()}) + "\n")

    save_checkpoint(model, final_path)
    current = {k: v.detach().clone() for k, v in model.state_dict().items()}
    with torch.no_grad():
        model.load_state_dict(best_state)
        save_checkpoint(model, best_path)
        model.load_state_dict(current)

    return TrainResult(steps=cfg.steps, final_loss=parts.total, best_loss=best_loss,
                       best_step=best_step, metrics_path=metrics_path,
                       final_path=final_path, best_path=best_path,
                       elapsed_s=time.monotonic() - t0)


@dataclass
class GradCheckReport:
    n_coords: int
    max_rel_err: float
    mean_rel_err: float
    worst_param: str
    worst_index: int
    tol: float
    passed: bool
    elapsed_s: float

    def to_dict(self) -> dict:
        return {"n_coords": self.n_coords, "max_rel_err": self.max_rel_err,
                "mean_rel_err": self.mean_rel_err, "worst_param": self.worst_param,
                "worst_index": self.worst_index, "tol": self.tol,
                "passed": self.passed, "elapsed_s": self.elapsed_s}


def grad_check(model: FocusLM, batch: PairedBatch,
               ablation: Ablation = Ablation(), n_coords: int = 200,
               h: float = 1e-5, tol: float = 1e-6, seed: int = 0) -> GradCheckReport:
    """Compare autograd against central finite differences on sampled
    coordinates of the trainable parameters.

    Relative error uses a unit floor, |a - fd| / max(1, |a|, |fd|), so
    coordinates with near-zero gradient do not blow up the ratio. The model
    must be float64 for the differences to resolve below tol.
    """
    if model.config.dtype != "float64":
        raise ValueError("grad_check needs a float64 model")
    t0 = time.monotonic()
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]

    loss, _ = total_loss(model, batch, ablation)
    for _, p in params:
        p.grad = None
    loss.backward()
    grads = {n: (p.grad.detach().clone() if p.grad is not None
                 else torch.zeros_like(p)) for n, p in params}

    sizes = [(n, p.numel()) for n, p in params]
    total = sum(s for _, s in sizes)
    rng = random.Random(seed)
    picks = rng.sample(range(total), min(n_coords, total))

    def locate(flat: int):
        for name, size in sizes:
            if flat < size:
                return name, flat
            flat -= size
        raise AssertionError

    by_name = dict(params)
    max_err, mean_acc = 0.0, 0.0
    worst = ("", -1)
    with torch.no_grad():
        for flat in picks:
            name, idx = locate(flat)
            p = by_name[name]
            view = p.view(-1)
            orig = float(view[idx])
            view[idx] = orig + h
            lp, _ = total_loss(model, batch, ablation)
            view[idx] = orig - h
            lm, _ = total_loss(model, batch, ablation)
            view[idx] = orig
            fd = (float(lp) - float(lm)) / (2.0 * h)
            a = float(grads[name].view(-1)[idx])
            err = abs(a - fd) / max(1.0, abs(a), abs(fd))
            mean_acc += err
            if err > max_err:
                max_err, worst = err, (name, idx)

    n = len(picks)
    return GradCheckReport(n_coords=n, max_rel_err=max_err, mean_rel_err=mean_acc / n,
                           worst_param=worst[0], worst_index=worst[1], tol=tol,
                           passed=max_err < tol, elapsed_s=time.monotonic() - t0)
