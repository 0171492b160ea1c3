"""Tokenization, special tokens, prompt templating, and the JSONL sample model.

The tokenizer is word-level: text is split on whitespace and each word is
looked up in a fixed vocabulary, with unknown words mapped to a reserved
``<unk>`` id. A small set of "atomic" strings (the special tokens plus the
prompt template markers) are split out of words even when not surrounded by
whitespace, so that e.g. ``"Article:<mask>"`` tokenizes as
``["Article:", "<mask>"]`` instead of one unknown word.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

UNK_TOKEN = "<unk>"
MASK_TOKEN = "<mask>"
EOS_TOKEN = "<eos>"
PAD_TOKEN = "<pad>"
SPECIAL_TOKENS = (UNK_TOKEN, MASK_TOKEN, EOS_TOKEN, PAD_TOKEN)

ARTICLE_MARKER = "Article:"
QUESTION_MARKER = "Question:"
ANSWER_MARKER = "Answer:"
TEMPLATE_MARKERS = (ARTICLE_MARKER, QUESTION_MARKER, ANSWER_MARKER)

# Strings treated as indivisible during tokenization, longest first so that
# the leftmost-longest match wins.
ATOMIC_TOKENS = tuple(sorted(SPECIAL_TOKENS + TEMPLATE_MARKERS, key=len, reverse=True))

_SENTENCE_BOUNDARY = re.compile(r"(?<=[.!?])\s+")


def split_words(text: str) -> list[str]:
    """Split text into word-level tokens.

    Whitespace separates words; atomic strings (special tokens, template
    markers) are additionally split out of words they are glued to.
    """
    words: list[str] = []
    for fragment in text.split():
        words.extend(_split_atomic(fragment))
    return words


def _split_atomic(fragment: str) -> list[str]:
    pieces: list[str] = []
    rest = fragment
    while rest:
        hit = None
        for atom in ATOMIC_TOKENS:
            pos = rest.find(atom)
            if pos != -1 and (hit is None or pos < hit[0]):
                hit = (pos, atom)
        if hit is None:
            pieces.append(rest)
            break
        pos, atom = hit
        if pos > 0:
            pieces.append(rest[:pos])
        pieces.append(atom)
        rest = rest[pos + len(atom):]
    return pieces


@dataclass(frozen=True)
class Vocab:
    """Fixed word-level vocabulary with reserved special tokens.

    Token ids are a bijection onto 0..V-1; the special ids are pairwise
    distinct by construction.
    """

    tokens: tuple[str, ...]
    token_to_id: dict[str, int] = field(repr=False)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        for special in SPECIAL_TOKENS:
            if special not in self.token_to_id:
                raise ValueError(f"vocabulary is missing special token {special!r}")

    @classmethod
    def build(cls, texts: Iterable[str], extra_tokens: Sequence[str] = ()) -> "Vocab":
        """Build a vocabulary covering all words of ``texts``.

        Specials and template markers come first, then corpus words in
        sorted order, so the result is independent of input ordering.
        """
        words = set()
        for text in texts:
            words.update(split_words(text))
        words.update(extra_tokens)
        words.difference_update(SPECIAL_TOKENS)
        ordered = list(SPECIAL_TOKENS) + sorted(words)
        return cls(tokens=tuple(ordered), token_to_id={t: i for i, t in enumerate(ordered)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK_TOKEN]

    @property
    def mask_id(self) -> int:
        return self.token_to_id[MASK_TOKEN]

    @property
    def eos_id(self) -> int:
        return self.token_to_id[EOS_TOKEN]

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD_TOKEN]


def tokenize(text: str, vocab: Vocab) -> list[int]:
    """Map text to token ids; unknown words map to the reserved unk id."""
    unk = vocab.unk_id
    return [vocab.token_to_id.get(w, unk) for w in split_words(text)]


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    """Inverse of :func:`tokenize` on in-vocab text (space-joined words)."""
    return " ".join(vocab.tokens[i] for i in ids)


def sentence_split(text: str) -> list[str]:
    """Split text into sentences at '.', '!' or '?' followed by whitespace.

    Text without terminal punctuation is a single sentence. Joining the
    result with single spaces reproduces any single-space-separated input.
    """
    if not text.strip():
        return []
    parts = _SENTENCE_BOUNDARY.split(text)
    return [p for p in parts if p]


@dataclass
class Document:
    doc_id: str
    text: str
    is_gold: bool = False


@dataclass
class QASample:
    """One question/answer/context-documents record, the unit of all datasets."""

    id: str
    question: str
    answers: list[str]
    documents: list[Document]
    evidence: Optional[list[str]] = None
    options: Optional[list[str]] = None

    def __post_init__(self):
        if not self.answers:
            raise ValueError(f"sample {self.id!r} has no answers")
        if self.options is not None and len(self.options) < 2:
            raise ValueError(f"sample {self.id!r} has fewer than 2 options")

    @property
    def gold_documents(self) -> list[Document]:
        return [d for d in self.documents if d.is_gold]

    def to_dict(self) -> dict:
        out = {
            "id": self.id,
            "question": self.question,
            "answers": list(self.answers),
            "documents": [
                {"doc_id": d.doc_id, "text": d.text, "is_gold": d.is_gold}
                for d in self.documents
            ],
        }
        if self.evidence is not None:
            out["evidence"] = list(self.evidence)
        if self.options is not None:
            out["options"] = list(self.options)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "QASample":
        return cls(
            id=obj["id"],
            question=obj["question"],
            answers=list(obj["answers"]),
            documents=[
                Document(doc_id=d["doc_id"], text=d["text"], is_gold=bool(d.get("is_gold", False)))
                for d in obj["documents"]
            ],
            evidence=list(obj["evidence"]) if "evidence" in obj and obj["evidence"] is not None else None,
            options=list(obj["options"]) if "options" in obj and obj["options"] is not None else None,
        )


def build_prompt(sample: QASample, with_answer: bool = False) -> str:
    """Render the fixed QA prompt for a sample.

    Context documents are joined by a blank line. With ``with_answer`` the
    first gold answer and a single EOS token are appended, which is the
    training-time form; without it the prompt ends at the answer marker for
    generation.
    """
    if not sample.documents:
        raise ValueError(f"sample {sample.id!r} has no documents")
    ctx = "\n\n".join(d.text for d in sample.documents)
    prompt = f"Article:{ctx}\n Question: {sample.question}\n Answer:"
    if with_answer:
        prompt += f" {sample.answers[0]} {EOS_TOKEN}"
    return prompt


def read_jsonl(path) -> list[QASample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                samples.append(QASample.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{line_no}: malformed sample record: {exc}") from exc
    return samples


def write_jsonl(samples: Iterable[QASample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sample in samples:
            fh.write(json.dumps(sample.to_dict(), ensure_ascii=False) + "\n")


def write_vocab(vocab: Vocab, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"tokens": list(vocab.tokens)}, fh, ensure_ascii=False)
        fh.write("\n")


def read_vocab(path) -> Vocab:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    tokens = tuple(obj["tokens"])
    return Vocab(tokens=tokens, token_to_id={t: i for i, t in enumerate(tokens)})
