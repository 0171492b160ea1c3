"""Synthetic multi-document QA generators.

Builds NQd-style samples with one gold document among seeded distractors at
a controlled position, and a desk-scale needle corpus of key-value lookup
documents for training toy models. All generation is deterministic given a
seed; per-sample RNG streams are derived from (seed, split, index) so that
samples could be generated in parallel without changing the output.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Sequence, Union

from .text_corpus import Document, QASample, build_prompt, tokenize


@dataclass
class SynthSpec:
    """Recipe for one synthetic multi-document sample."""

    n_documents: int
    gold_position: Union[int, str] = "random"  # index or "random"
    seed: int = 0
    distractor_pool: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.n_documents < 1:
            raise ValueError(f"n_documents must be >= 1, got {self.n_documents}")
        if self.n_documents > len(self.distractor_pool) + 1:
            raise ValueError(
                f"n_documents={self.n_documents} exceeds pool size "
                f"{len(self.distractor_pool)} + 1 gold")
        if self.gold_position != "random":
            if not isinstance(self.gold_position, int):
                raise ValueError(f"gold_position must be an int or 'random', got {self.gold_position!r}")
            if not 0 <= self.gold_position < self.n_documents:
                raise ValueError(
                    f"gold_position {self.gold_position} out of range for "
                    f"{self.n_documents} documents")


def _sample_rng(seed: int, tag: str, index: int) -> random.Random:
    # String seeding is stable across processes (unlike hash()-based seeding).
    return random.Random(f"{seed}/{tag}/{index}")


def synth_multidoc(question: str, answer: str, gold_doc: str, spec: SynthSpec,
                   sample_id: str = "s0", sample_index: int = 0) -> QASample:
    """One sample: the gold document among seeded distractors.

    Distractors are drawn from the pool without replacement and never equal
    the gold document; exactly one document carries the gold flag.
    """
    pool = [d for d in spec.distractor_pool if d != gold_doc]
    n_distractors = spec.n_documents - 1
    if len(pool) < n_distractors:
        raise ValueError(
            f"distractor pool has {len(pool)} usable documents, need {n_distractors}")
    rng = _sample_rng(spec.seed, "multidoc", sample_index)
    distractors = rng.sample(pool, n_distractors)
    if spec.gold_position == "random":
        pos = rng.randrange(spec.n_documents)
    else:
        pos = spec.gold_position

    texts = distractors[:pos] + [gold_doc] + distractors[pos:]
    documents = [
        Document(doc_id=f"{sample_id}-d{i}", text=t, is_gold=(i == pos))
        for i, t in enumerate(texts)
    ]
    return QASample(
        id=sample_id,
        question=question,
        answers=[answer],
        documents=documents,
        evidence=[gold_doc],
    )


def position_sweep_set(base_samples: Sequence[QASample], n_documents: int,
                       positions: Sequence[int], seed: int = 0) -> dict[int, list[QASample]]:
    """One dataset copy per gold position, sharing distractors per sample.

    Each base sample must carry one gold document and enough distractors;
    ``n_documents - 1`` of its distractors are picked once (seeded), then
    reused at every position so that the datasets differ only in where the
    gold document sits.
    """
    for pos in positions:
        if not 0 <= pos < n_documents:
            raise ValueError(f"position {pos} out of range for {n_documents} documents")

    per_sample_distractors: list[tuple[QASample, Document, list[Document]]] = []
    for idx, sample in enumerate(base_samples):
        golds = sample.gold_documents
        if len(golds) != 1:
            raise ValueError(f"sample {sample.id!r} must have exactly one gold document")
        gold = golds[0]
        distractors = [d for d in sample.documents if not d.is_gold]
        if len(distractors) < n_documents - 1:
            raise ValueError(
                f"sample {sample.id!r} has {len(distractors)} distractors, "
                f"need {n_documents - 1}")
        rng = _sample_rng(seed, "sweep", idx)
        chosen = rng.sample(distractors, n_documents - 1)
        per_sample_distractors.append((sample, gold, chosen))

    sweep: dict[int, list[QASample]] = {}
    for pos in positions:
        dataset = []
        for sample, gold, chosen in per_sample_distractors:
            docs = list(chosen[:pos]) + [gold] + list(chosen[pos:])
            dataset.append(QASample(
                id=f"{sample.id}@pos{pos}",
                question=sample.question,
                answers=list(sample.answers),
                documents=[
                    Document(doc_id=d.doc_id, text=d.text, is_gold=d.is_gold)
                    for d in docs
                ],
                evidence=list(sample.evidence) if sample.evidence is not None else None,
                options=list(sample.options) if sample.options is not None else None,
            ))
        sweep[pos] = dataset
    return sweep


def _word_width(n: int) -> int:
    return max(3, len(str(n - 1)))


def _kv_pools(vocab_size: int) -> tuple[list[str], list[str]]:
    width = _word_width(max(vocab_size, 1))
    keys = [f"k{i:0{width}d}" for i in range(vocab_size)]
    values = [f"v{i:0{width}d}" for i in range(vocab_size)]
    return keys, values


def _key_split(vocab_size: int, max_docs: int) -> int:
    """Index splitting the key pool into train / held-out halves.

    Holds out max(max_docs, a sixth of the pool): test samples must be able
    to fill their largest context entirely from held-out keys, and the
    held-out side should never shrink to a handful of keys the model could
    cover by accident.
    """
    return vocab_size - max(max_docs, vocab_size // 6)


def synth_needle_corpus(n_samples: int, n_documents: Union[int, Sequence[int]],
                        vocab_size: int, seed: int = 0,
                        test_fraction: float = 0.25,
                        gold_last_fraction: float = 0.0) -> tuple[list[QASample], list[QASample]]:
    """Key-value lookup corpus: the gold document holds ``key = value .``,
    distractors hold other pairs, the question is the bare key and the
    answer is the value.

    Keys are partitioned between train and test so no test key ever appears
    in a train sample (gold or distractor). Within a split, each sample draws
    its key with replacement and a fresh random value, so the same key recurs
    with different values and the answer is only recoverable from the
    context, never from a memorized binding. Values are shared across the
    split so every answer token is seen during training. ``n_documents`` may
    be a sequence, in which case samples cycle through the listed counts.

    ``gold_last_fraction`` forces that share of samples to carry the gold
    document in the final slot; the rest place it uniformly. Uniform
    placement rarely exercises the last slot at large document counts, and
    a model trained without that coverage fails exactly the orders a
    reranker produces.
    """
    if isinstance(n_documents, int):
        doc_counts = [n_documents]
    else:
        doc_counts = list(n_documents)
    if not doc_counts or any(c < 1 for c in doc_counts):
        raise ValueError(f"invalid document counts {doc_counts}")
    if not 0.0 <= gold_last_fraction <= 1.0:
        raise ValueError(f"gold_last_fraction must be in [0, 1], got {gold_last_fraction}")
    max_docs = max(doc_counts)

    n_test = max(1, round(n_samples * test_fraction)) if test_fraction > 0 else 0
    n_train = n_samples - n_test
    if n_train < 1:
        raise ValueError(f"test_fraction {test_fraction} leaves no training samples")

    keys, values = _kv_pools(vocab_size)
    split_at = _key_split(vocab_size, max_docs)
    train_keys, test_keys = keys[:split_at], keys[split_at:]
    if max_docs > len(train_keys) or max_docs > len(test_keys):
        raise ValueError(
            f"vocab_size={vocab_size} too small to fill {max_docs} documents "
            f"from both key pools ({len(train_keys)}/{len(test_keys)})")

    def make_sample(split: str, key_pool: list[str], index: int) -> QASample:
        rng = _sample_rng(seed, f"needle-{split}", index)
        key = rng.choice(key_pool)
        value = rng.choice(values)
        n_docs = doc_counts[index % len(doc_counts)]
        distractor_keys = rng.sample([k for k in key_pool if k != key], n_docs - 1)
        # The extra draw only happens when the feature is on, so corpora
        # generated with the default stay byte-identical.
        if gold_last_fraction > 0.0 and rng.random() < gold_last_fraction:
            gold_pos = n_docs - 1
        else:
            gold_pos = rng.randrange(n_docs)

        docs: list[Document] = []
        for i in range(n_docs):
            if i == gold_pos:
                docs.append(Document(doc_id=f"{split}{index}-d{i}",
                                     text=f"{key} = {value} .", is_gold=True))
            else:
                d_key = distractor_keys.pop()
                d_value = rng.choice([v for v in values if v != value])
                docs.append(Document(doc_id=f"{split}{index}-d{i}",
                                     text=f"{d_key} = {d_value} .", is_gold=False))
        return QASample(
            id=f"{split}{index}",
            # Single-token question: the answer slot then sits one token
            # after the key, the same local layout the in-document pairs
            # have around their separator.
            question=key,
            answers=[value],
            documents=docs,
            evidence=[f"{key} = {value}"],
        )

    train = [make_sample("train", train_keys, i) for i in range(n_train)]
    test = [make_sample("test", test_keys, i) for i in range(n_test)]
    return train, test


def synth_multiqa_corpus(n_samples: int, vocab_size: int, seed: int = 0,
                         n_pairs: Union[int, tuple[int, int]] = (2, 6),
                         max_docs: int = 16) -> list[QASample]:
    """Key-value pairs drilled by repeated question/answer lines.

    Each sample's document lists m random pairs and then asks about them in
    question/answer lines written in the exact token pattern the prompt
    template ends with. Queries are drawn with replacement, so one pair may
    be drilled several times while another is skipped; the last draw is not
    written into the document but becomes the sample's own question, which
    the prompt template then appends in the same shape. Every drilled
    answer is predictable only by matching the key back to its pair by
    content, so these rows train the answer-slot geometry densely: several
    supervised lookups per row instead of one.

    The trailing key block synth_needle_corpus holds out for its test split
    is excluded here (pass the same vocab_size and the largest document
    count used there), so pretraining on these samples never leaks a test
    key.
    """
    if isinstance(n_pairs, int):
        lo, hi = n_pairs, n_pairs
    else:
        lo, hi = n_pairs
    if not 1 <= lo <= hi:
        raise ValueError(f"need 1 <= lo <= hi, got n_pairs={n_pairs}")
    keys, values = _kv_pools(vocab_size)
    key_pool = keys[: _key_split(vocab_size, max_docs)]
    if hi > len(key_pool):
        raise ValueError(f"n_pairs {hi} exceeds the {len(key_pool)}-key pool")

    samples: list[QASample] = []
    for i in range(n_samples):
        rng = _sample_rng(seed, "multiqa", i)
        m = rng.randint(lo, hi)
        ks = rng.sample(key_pool, m)
        vs = [rng.choice(values) for _ in range(m)]
        parts = [f"{k} = {v} ." for k, v in zip(ks, vs)]
        drills = [rng.randrange(m) for _ in range(rng.randint(2, 2 * m))]
        for j in drills[:-1]:
            parts.append(f"Question: {ks[j]} Answer: {vs[j]} <eos>")
        q = drills[-1]
        samples.append(QASample(
            id=f"multiqa{i}",
            question=ks[q],
            answers=[vs[q]],
            documents=[Document(doc_id=f"multiqa{i}-d0", text=" ".join(parts),
                                is_gold=True)],
            evidence=[f"{ks[q]} = {vs[q]}"],
        ))
    return samples


def synth_links_corpus(n_samples: int, vocab_size: int, seed: int = 0,
                       lines: tuple[int, int] = (8, 14)) -> list[str]:
    """Plain pretraining texts of ``w = f u .`` lines under one fixed w->u map.

    Predicting u at the filler slot forces an attention hop of exactly two
    positions back to read w, and because the map is global the credit is
    immediate, with no second lookup needed. That makes these texts a direct
    training signal for the two-back gather which key-value documents need
    on their value positions, where the key also sits two tokens back. The
    filler f is drawn from the full content pool, never a dedicated filler
    alphabet: the gather has to fire with arbitrary content at the skipped
    slot or it will not transfer. The mapped alphabets themselves stay
    disjoint from keys and values so the fixed map never installs a prior
    over real answers.
    """
    lo, hi = lines
    if not 1 <= lo <= hi:
        raise ValueError(f"need 1 <= lo <= hi, got lines={lines}")
    width = _word_width(max(vocab_size, 1))
    ws = [f"w{i:0{width}d}" for i in range(vocab_size)]
    us = [f"u{i:0{width}d}" for i in range(vocab_size)]
    fillers = ([f"k{i:0{width}d}" for i in range(vocab_size)]
               + [f"v{i:0{width}d}" for i in range(vocab_size)] + ws + us)
    perm = list(range(vocab_size))
    random.Random(f"{seed}/links-map").shuffle(perm)
    link = {ws[i]: us[perm[i]] for i in range(vocab_size)}

    texts: list[str] = []
    for i in range(n_samples):
        rng = _sample_rng(seed, "links", i)
        parts = []
        for _ in range(rng.randint(lo, hi)):
            a = rng.choice(ws)
            parts.append(f"{a} = {rng.choice(fillers)} {link[a]} .")
        texts.append(" ".join(parts))
    return texts


@dataclass(frozen=True)
class LookupUniverse:
    """The closed word set a lookup world is built from.

    keys/values are exactly the pools synth_needle_corpus derives for the
    same vocab_size, split the same way, so a base model pretrained on this
    universe and a corpus generated from it agree on every word and never
    leak a held-out key into a training binding. link_sources/link_targets
    are two extra alphabets joined by one fixed bijection (link_map) that
    exists only in pretraining text.
    """

    keys: list[str]
    values: list[str]
    link_sources: list[str]
    link_targets: list[str]
    link_map: dict[str, str]
    train_keys: list[str]
    test_keys: list[str]

    @property
    def pool(self) -> list[str]:
        return self.keys + self.values + self.link_sources + self.link_targets


def lookup_universe(vocab_size: int, max_docs: int = 16,
                    map_seed: int = 777) -> LookupUniverse:
    """Word pools plus the fixed link map for one lookup world.

    map_seed fixes the link bijection independently of any corpus seed: the
    map is part of the universe, not of a draw, so two corpora over the same
    vocab_size share it.
    """
    keys, values = _kv_pools(vocab_size)
    width = _word_width(max(vocab_size, 1))
    ws = [f"w{i:0{width}d}" for i in range(vocab_size)]
    us = [f"u{i:0{width}d}" for i in range(vocab_size)]
    perm = list(range(vocab_size))
    random.Random(map_seed).shuffle(perm)
    split_at = _key_split(vocab_size, max_docs)
    return LookupUniverse(
        keys=keys, values=values, link_sources=ws, link_targets=us,
        link_map={ws[i]: us[perm[i]] for i in range(vocab_size)},
        train_keys=keys[:split_at], test_keys=keys[split_at:],
    )


def _rows_repeat(rng: random.Random, n: int, vocab_size: int) -> list[list[int]]:
    # floor 8 keeps pad/eos/mask/unk and low punctuation ids out of spans
    rows = []
    for _ in range(n):
        u = rng.randint(8, 40)
        first = [rng.randrange(8, vocab_size) for _ in range(u)]
        rows.append(first + first)
    return rows


def _rows_links(rng: random.Random, n: int, uni: LookupUniverse,
                vocab) -> list[list[int]]:
    rows = []
    for _ in range(n):
        words: list[str] = []
        for _ in range(rng.randint(8, 14)):
            a = rng.choice(uni.link_sources)
            words += [a, "=", rng.choice(uni.pool), uni.link_map[a], "."]
        rows.append([vocab.token_to_id[w] for w in words])
    return rows


def _rows_multiqa(rng: random.Random, n: int, uni: LookupUniverse,
                  vocab) -> list[list[int]]:
    rows = []
    for _ in range(n):
        m = rng.randint(2, 6)
        ks = rng.sample(uni.train_keys, m)
        vs = [rng.choice(uni.values) for _ in range(m)]
        words: list[str] = []
        for k, v in zip(ks, vs):
            words += [k, "=", v, "."]
        # with replacement: a pair may be drilled repeatedly or skipped
        for _ in range(rng.randint(2, 2 * m)):
            j = rng.randrange(m)
            words += ["Question:", ks[j], "Answer:", vs[j], "<eos>"]
        rows.append([vocab.token_to_id[w] for w in words])
    return rows


def _needle_once(rng: random.Random, n_docs: int, uni: LookupUniverse,
                 gold_last: bool) -> QASample:
    key = rng.choice(uni.train_keys)
    val = rng.choice(uni.values)
    others = rng.sample([k for k in uni.train_keys if k != key], n_docs - 1)
    gold = n_docs - 1 if gold_last else rng.randrange(n_docs)
    docs = []
    for i in range(n_docs):
        if i == gold:
            docs.append(Document(doc_id=f"d{i}", text=f"{key} = {val} .",
                                 is_gold=True))
        else:
            dv = rng.choice([v for v in uni.values if v != val])
            docs.append(Document(doc_id=f"d{i}", text=f"{others.pop()} = {dv} .",
                                 is_gold=False))
    return QASample(id="q", question=key, answers=[val], documents=docs)


def _rows_needle(rng: random.Random, n: int, uni: LookupUniverse,
                 vocab) -> list[list[int]]:
    counts = [c for c in (1, 2, 4, 8, 16) if c <= len(uni.train_keys)]
    rows = []
    for _ in range(n):
        s = _needle_once(rng, rng.choice(counts), uni,
                         gold_last=(rng.random() < 0.25))
        rows.append(tokenize(build_prompt(s, with_answer=True), vocab))
    return rows


def pretrain_rows(step: int, universe: LookupUniverse, vocab,
                  batch_size: int = 32) -> list[list[int]]:
    """One pretraining batch of token-id rows, drawn fresh from the step.

    Four row families in proportion 6:6:10:10 at the reference batch of 32:

    * repeat: a random token span written twice; the second half is
      predictable only by content match-and-copy, the generic machinery
      every lookup reuses.
    * links: ``w = filler u .`` lines under the universe's fixed w->u map;
      predicting u requires gathering the word two positions back through
      an arbitrary filler, the same hop a value position needs.
    * multiqa: several key-value lines followed by drilled Question/Answer
      lines, a dense version of the lookup supervision.
    * needle: full prompt-formatted lookup samples over document counts
      1/2/4/8/16, a quarter with the gold document forced last so late
      positions get coverage.

    Bindings only ever use train-side keys; repeat spans range over the
    whole content vocabulary (token ids), so held-out keys are seen as
    tokens but never as bindings. The step index is the only source of
    randomness: row content is a pure function of (step, universe, vocab),
    so a run can be resumed or replayed exactly.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    rng = random.Random(step)
    n_rep = round(batch_size * 6 / 32)
    n_lnk = round(batch_size * 6 / 32)
    n_mqa = round(batch_size * 10 / 32)
    n_ndl = batch_size - n_rep - n_lnk - n_mqa
    return (_rows_repeat(rng, n_rep, vocab.size)
            + _rows_links(rng, n_lnk, universe, vocab)
            + _rows_multiqa(rng, n_mqa, universe, vocab)
            + _rows_needle(rng, n_ndl, universe, vocab))


def synth_repeat_corpus(n_samples: int, vocab_size: int, seed: int = 0,
                        length: tuple[int, int] = (8, 40)) -> list[str]:
    """Plain pretraining texts: a random word span written twice in a row.

    Every token of the second half is predictable, but only by locating its
    first occurrence by content (span lengths vary, so no fixed offset
    works) and copying the word that follows it. This trains the generic
    match-and-copy machinery that question slots reuse. The pool spans the
    key, value, and link alphabets so all content embeddings get copy
    training; that exposes tokens, never key-to-value bindings, so held-out
    lookup keys stay unseen as bindings.
    """
    lo, hi = length
    if not 1 <= lo <= hi:
        raise ValueError(f"need 1 <= lo <= hi, got length={length}")
    width = _word_width(max(vocab_size, 1))
    pool = ([f"k{i:0{width}d}" for i in range(vocab_size)]
            + [f"v{i:0{width}d}" for i in range(vocab_size)]
            + [f"w{i:0{width}d}" for i in range(vocab_size)]
            + [f"u{i:0{width}d}" for i in range(vocab_size)])
    texts: list[str] = []
    for i in range(n_samples):
        rng = _sample_rng(seed, "repeat", i)
        span = [rng.choice(pool) for _ in range(rng.randint(lo, hi))]
        texts.append(" ".join(span + span))
    return texts
