"""Decoding, answer metrics, eval sweeps, and attention introspection."""

from __future__ import annotations

import csv
import json
import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .errors import DataError
from .model import FocusLM
from .retrieval_augment import embed, score
from .text_corpus import (QASample, Vocab, build_prompt, detokenize,
                          sentence_split, split_words, tokenize)

EVAL_MODES = ("plain", "retrieval", "rerank")


def greedy_decode(model: FocusLM, prompt_ids: Sequence[int], eos_id: int,
                  max_new_tokens: int = 16) -> list[int]:
    """Argmax continuation of prompt_ids, stopping at EOS (excluded) or the
    token budget. Ties break toward the lower token id."""
    if not prompt_ids:
        raise DataError("empty prompt")
    ids = list(prompt_ids)
    out: list[int] = []
    with torch.no_grad():
        for _ in range(max_new_tokens):
            if len(ids) >= model.config.max_len:
                break
            logits = model(ids).logits[-1]
            nxt = int(torch.argmax(logits))
            if nxt == eos_id:
                break
            out.append(nxt)
            ids.append(nxt)
    return out


def normalize_answer(s: str) -> str:
    """Lowercase, drop punctuation and the articles a/an/the, collapse spaces."""
    s = s.lower()
    s = "".join(ch for ch in s if ch not in set(string.punctuation))
    s = re.sub(r"\b(a|an|the)\b", " ", s)
    return " ".join(s.split())


def exact_match(prediction: str, golds: Sequence[str]) -> float:
    if not golds:
        raise DataError("no gold answers")
    pred = normalize_answer(prediction)
    return float(any(pred == normalize_answer(g) for g in golds))


def _f1_single(prediction: str, gold: str) -> float:
    pred_toks = normalize_answer(prediction).split()
    gold_toks = normalize_answer(gold).split()
    if not pred_toks or not gold_toks:
        return float(pred_toks == gold_toks)
    common = Counter(pred_toks) & Counter(gold_toks)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_toks)
    recall = overlap / len(gold_toks)
    return 2 * precision * recall / (precision + recall)


def token_f1(prediction: str, golds: Sequence[str]) -> float:
    if not golds:
        raise DataError("no gold answers")
    return max(_f1_single(prediction, g) for g in golds)


def _option_loglik(model: FocusLM, prompt_ids: list[int], option: str,
                   vocab: Vocab) -> float:
    """Length-normalized log-likelihood of an answer option continuation."""
    cont = tokenize(f" {option} {vocab.tokens[vocab.eos_id]}", vocab)
    ids = prompt_ids + cont
    if len(ids) > model.config.max_len:
        raise DataError(f"option sequence length {len(ids)} exceeds max_len")
    with torch.no_grad():
        logits = model(ids).logits
        logp = torch.log_softmax(logits[:-1], dim=-1)
        start = len(prompt_ids) - 1
        total = 0.0
        for t in range(start, len(ids) - 1):
            total += float(logp[t, ids[t + 1]])
    return total / len(cont)


def mc_accuracy(model: FocusLM, samples: Sequence[QASample], vocab: Vocab) -> float:
    """Fraction of samples whose gold option scores highest by
    length-normalized log-likelihood. Ties go to the lower option index."""
    if not samples:
        raise DataError("no samples")
    correct = 0
    for sample in samples:
        if not sample.options:
            raise DataError(f"sample {sample.id} has no options")
        if sample.answers[0] not in sample.options:
            raise DataError(f"sample {sample.id}: gold answer not among options")
        gold = sample.options.index(sample.answers[0])
        prompt_ids = tokenize(build_prompt(sample), vocab)
        best, best_ll = 0, -float("inf")
        for i, opt in enumerate(sample.options):
            ll = _option_loglik(model, prompt_ids, opt, vocab)
            if ll > best_ll:
                best, best_ll = i, ll
        correct += int(best == gold)
    return correct / len(samples)


def _eval_view(sample: QASample, mode: str, embedder=None) -> QASample:
    """Reshape a sample's context for the requested eval mode."""
    if mode == "plain" or len(sample.documents) <= 1:
        return sample
    if mode == "retrieval":
        q_vec = embed(sample.question, embedder)
        scores = [score(q_vec, embed(d.text, embedder)) for d in sample.documents]
        best = max(range(len(scores)), key=lambda i: (scores[i], -i))
        docs = [sample.documents[best]]
    elif mode == "rerank":
        q_vec = embed(sample.question, embedder)
        scores = [score(q_vec, embed(d.text, embedder)) for d in sample.documents]
        order = sorted(range(len(scores)), key=lambda i: (scores[i], i))
        docs = [sample.documents[i] for i in order]
    else:
        raise ValueError(f"unknown eval mode {mode!r}; allowed: {EVAL_MODES}")
    return QASample(id=sample.id, question=sample.question, answers=sample.answers,
                    documents=docs, evidence=sample.evidence, options=sample.options)


@dataclass
class EvalReport:
    mode: str
    n: int
    em: float
    f1: float
    predictions: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "n": self.n, "em": self.em, "f1": self.f1,
                "predictions": self.predictions}


def evaluate(model: FocusLM, samples: Sequence[QASample], vocab: Vocab,
             mode: str = "plain", embedder=None,
             max_new_tokens: int = 8) -> EvalReport:
    """Greedy-decode answers and score EM / token F1 against the golds."""
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown eval mode {mode!r}; allowed: {EVAL_MODES}")
    if not samples:
        raise DataError("no samples")
    preds = []
    em_sum = f1_sum = 0.0
    for sample in samples:
        view = _eval_view(sample, mode, embedder)
        ids = tokenize(build_prompt(view), vocab)
        gen = greedy_decode(model, ids, vocab.eos_id, max_new_tokens)
        text = detokenize(gen, vocab)
        em = exact_match(text, sample.answers)
        f1 = token_f1(text, sample.answers)
        em_sum += em
        f1_sum += f1
        preds.append({"id": sample.id, "prediction": text, "em": em, "f1": f1})
    n = len(samples)
    return EvalReport(mode=mode, n=n, em=em_sum / n, f1=f1_sum / n, predictions=preds)


@dataclass
class SweepReport:
    """EM / F1 over a grid of gold positions (rows) by document counts (cols).

    Rows are either absolute gold indices (ints) or depth fractions
    (floats in [0, 1], 1.0 meaning the last slot)."""

    mode: str
    positions: list
    doc_counts: list[int]
    em: list[list[float]]
    f1: list[list[float]]

    def to_dict(self) -> dict:
        return {"mode": self.mode, "positions": self.positions,
                "doc_counts": self.doc_counts, "em": self.em, "f1": self.f1}


def sweep_eval(model: FocusLM, vocab: Vocab,
               grids: dict[int, dict[int, list[QASample]]], mode: str = "plain",
               embedder=None, max_new_tokens: int = 8) -> SweepReport:
    """grids maps doc_count -> position -> samples. Every doc count must
    cover the same positions."""
    if not grids:
        raise DataError("empty sweep grid")
    doc_counts = sorted(grids)
    positions = sorted(grids[doc_counts[0]])
    for n_docs in doc_counts:
        if sorted(grids[n_docs]) != positions:
            raise DataError(f"doc count {n_docs} covers different positions")
    em_grid, f1_grid = [], []
    for pos in positions:
        em_row, f1_row = [], []
        for n_docs in doc_counts:
            rep = evaluate(model, grids[n_docs][pos], vocab, mode, embedder,
                           max_new_tokens)
            em_row.append(rep.em)
            f1_row.append(rep.f1)
        em_grid.append(em_row)
        f1_grid.append(f1_row)
    return SweepReport(mode=mode, positions=positions, doc_counts=doc_counts,
                       em=em_grid, f1=f1_grid)


def fraction_position(n_documents: int, frac: float) -> int:
    """Absolute gold index for a depth fraction; 1.0 maps to the last slot."""
    if not 0.0 <= frac <= 1.0:
        raise ValueError(f"position fraction {frac} outside [0, 1]")
    if n_documents < 1:
        raise ValueError(f"n_documents must be >= 1, got {n_documents}")
    return min(n_documents - 1, math.floor(frac * n_documents))


def fraction_sweep(model: FocusLM, vocab: Vocab, base_samples: Sequence[QASample],
                   doc_counts: Sequence[int], fracs: Sequence[float],
                   seeds: Sequence[int], mode: str = "plain", embedder=None,
                   max_new_tokens: int = 8) -> SweepReport:
    """Depth-fraction sweep with per-cell means over distractor-draw seeds.

    Each cell (frac, n_docs) evaluates the base samples with the gold
    document pinned at fraction_position(n_docs, frac), once per seed
    (seeds redraw the distractor subset), and averages EM / F1.
    """
    from .dataset_synth import position_sweep_set

    if not doc_counts or not fracs or not seeds:
        raise DataError("doc_counts, fracs, and seeds must all be nonempty")
    counts = sorted(set(doc_counts))
    rows = sorted(set(fracs))
    em_grid, f1_grid = [], []
    for frac in rows:
        em_row, f1_row = [], []
        for n_docs in counts:
            pos = fraction_position(n_docs, frac)
            em_sum = f1_sum = 0.0
            for seed in seeds:
                ds = position_sweep_set(base_samples, n_docs, [pos], seed=seed)[pos]
                rep = evaluate(model, ds, vocab, mode, embedder, max_new_tokens)
                em_sum += rep.em
                f1_sum += rep.f1
            em_row.append(em_sum / len(seeds))
            f1_row.append(f1_sum / len(seeds))
        em_grid.append(em_row)
        f1_grid.append(f1_row)
    return SweepReport(mode=mode, positions=list(rows), doc_counts=counts,
                       em=em_grid, f1=f1_grid)


def write_sweep_csv(report: SweepReport, path, metric: str = "em") -> None:
    """Rows are gold positions, columns are document counts."""
    grid = {"em": report.em, "f1": report.f1}.get(metric)
    if grid is None:
        raise ValueError(f"unknown metric {metric!r}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["position"] + [str(c) for c in report.doc_counts])
        for pos, row in zip(report.positions, grid):
            w.writerow([pos] + [f"{v:.6f}" for v in row])


def write_report_json(report, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")


@dataclass
class HeatmapResult:
    sentences: list[str]
    weights: list[float]
    gold_index: Optional[int]
    row_sum: float

    def to_dict(self) -> dict:
        return {"sentences": self.sentences, "weights": self.weights,
                "gold_index": self.gold_index, "row_sum": self.row_sum}


def _normalize_ws(s: str) -> str:
    return " ".join(s.split())


def gold_sentence_index(sample: QASample, sentences: Sequence[str]) -> Optional[int]:
    """First sentence containing an evidence span (whitespace-insensitive)."""
    if not sample.evidence:
        return None
    targets = [_normalize_ws(e) for e in sample.evidence]
    for i, sent in enumerate(sentences):
        norm = _normalize_ws(sent)
        if any(t in norm or norm in t for t in targets if t):
            return i
    return None


def attention_heatmap(model: FocusLM, sample: QASample, vocab: Vocab,
                      layer: Optional[int] = None) -> HeatmapResult:
    """Sentence-level attention from the last prompt token.

    The attention row at the final prompt position is averaged over heads
    (and over layers when layer is None), then summed within each context
    sentence's token span. Weights over sentences need not sum to 1; the
    template tokens absorb the remainder. row_sum reports the full row's
    mass, which softmax pins to 1.
    """
    context = "\n\n".join(d.text for d in sample.documents)
    sentences = sentence_split(context)
    if not sentences:
        raise DataError(f"sample {sample.id} has an empty context")
    prompt = build_prompt(sample)
    ids = tokenize(prompt, vocab)

    with torch.no_grad():
        out = model(ids, want_attn=True)
    if layer is None:
        row = torch.stack([a[:, -1, :] for a in out.attn]).mean(dim=(0, 1))
    else:
        row = out.attn[layer][:, -1, :].mean(dim=0)

    # Context tokens sit right after the leading "Article:" marker.
    ctx_words = split_words(context)
    start = 1
    spans = []
    for sent in sentences:
        n = len(split_words(sent))
        spans.append((start, start + n))
        start += n
    if start - 1 != len(ctx_words):
        raise DataError(f"sample {sample.id}: sentence spans do not tile the context")

    weights = [float(row[a:b].sum()) for a, b in spans]
    return HeatmapResult(sentences=sentences, weights=weights,
                         gold_index=gold_sentence_index(sample, sentences),
                         row_sum=float(row.sum()))
