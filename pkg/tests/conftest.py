import pytest
import torch

from focustune.text_corpus import Document, QASample, Vocab


@pytest.fixture(autouse=True)
def _single_thread():
    # keep timings stable and runs reproducible on shared CI boxes
    torch.set_num_threads(1)


@pytest.fixture
def tiny_sample() -> QASample:
    return QASample(
        id="s0",
        question="k01",
        answers=["v07"],
        documents=[
            Document(doc_id="d0", text="k03 : v02 .", is_gold=False),
            Document(doc_id="d1", text="k01 : v07 .", is_gold=True),
        ],
        evidence=["k01 : v07"],
    )


@pytest.fixture
def tiny_vocab(tiny_sample) -> Vocab:
    from focustune.text_corpus import build_prompt

    return Vocab.build([build_prompt(tiny_sample, with_answer=True)])
