"""Text pipeline: tokenization, vocabulary, JSONL ingestion, batching, and
the synthetic confound corpus generator.

The corpus generator builds binary hate/non-hate sentences from templates
where the class is decided by context tokens (negative adjectives, negation
words), never by the subject. A configurable fraction of each class uses an
invented identity-group subject, which lets tests manufacture a spurious
identity-to-label correlation in train while keeping the test split balanced.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .seeding import STREAM_DATA, substream

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1

_PUNCT = frozenset(string.punctuation)


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, split punctuation into 1-char tokens."""
    out: list[str] = []
    for chunk in text.lower().split():
        run: list[str] = []
        for ch in chunk:
            if ch in _PUNCT:
                if run:
                    out.append("".join(run))
                    run = []
                out.append(ch)
            else:
                run.append(ch)
        if run:
            out.append("".join(run))
    return out


@dataclass
class Example:
    text: str
    label: int
    token_ids: list[int] = field(default_factory=list)


class Vocabulary:
    """token -> id map with PAD=0 and UNK=1 reserved; ids contiguous [0, V)."""

    def __init__(self, tokens: list[str], min_freq: int = 2, max_size: int = 20000):
        if tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError(f"vocabulary must start with {PAD_TOKEN!r}, {UNK_TOKEN!r}")
        if len(tokens) != len(set(tokens)):
            raise ValueError("duplicate token in vocabulary")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        self.min_freq = min_freq
        self.max_size = max_size

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str, max_len: int) -> list[int]:
        """Token ids, truncated to max_len and right-padded with PAD."""
        ids = [self.token_to_id.get(t, UNK_ID) for t in tokenize(text)[:max_len]]
        return ids + [PAD_ID] * (max_len - len(ids))

    def save(self, path) -> None:
        # one token per line, line number = id
        fileio.atomic_write_text(path, "".join(t + "\n" for t in self.id_to_token))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        return cls(tokens)


def build_vocab(texts, min_freq: int = 2, max_size: int = 20000) -> Vocabulary:
    """Frequency-then-lexicographic vocabulary over tokenized texts.

    Only the training split should be passed here.
    """
    counts: dict[str, int] = {}
    for text in texts:
        for tok in tokenize(text):
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )[: max_size - 2]
    return Vocabulary([PAD_TOKEN, UNK_TOKEN] + kept, min_freq=min_freq, max_size=max_size)


def encode_examples(examples, vocab: Vocabulary, max_len: int = 64) -> list[Example]:
    return [Example(e.text, e.label, vocab.encode(e.text, max_len)) for e in examples]


def load_jsonl(path) -> list[Example]:
    """Order-preserving load of {"text": str, "label": 0|1} records."""
    out: list[Example] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}: line {lineno}: malformed JSON: {e}") from e
            if not isinstance(rec, dict) or not isinstance(rec.get("text"), str):
                raise ValueError(f"{path}: line {lineno}: record needs a string 'text' field")
            label = rec.get("label")
            if isinstance(label, bool) or label not in (0, 1):
                raise ValueError(f"{path}: line {lineno}: label must be 0 or 1, got {label!r}")
            out.append(Example(rec["text"], int(label)))
    return out


def write_jsonl(path, examples) -> None:
    lines = "".join(
        json.dumps({"text": e.text, "label": e.label}) + "\n" for e in examples
    )
    fileio.atomic_write_text(path, lines)


@dataclass
class Batch:
    token_ids: np.ndarray  # [B x max_len] int64
    mask: np.ndarray  # [B x max_len] bool, true where token != PAD
    labels: np.ndarray  # [B] int64

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]


def _to_batch(examples) -> Batch:
    lens = {len(e.token_ids) for e in examples}
    if len(lens) != 1 or 0 in lens:
        raise ValueError("examples must be encoded to a common max_len before batching")
    ids = np.array([e.token_ids for e in examples], dtype=np.int64)
    return Batch(
        token_ids=ids,
        mask=ids != PAD_ID,
        labels=np.array([e.label for e in examples], dtype=np.int64),
    )


def make_batches(examples, batch_size: int, shuffle_seed: int) -> list[Batch]:
    """Deterministic shuffle, fixed-size batches; a final size-1 batch is dropped.

    A one-anchor batch degenerates the contrastive term, so the final batch is
    kept only when it has at least 2 examples.
    """
    if not examples:
        raise ValueError("make_batches over an empty corpus")
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    order = np.random.default_rng(int(shuffle_seed)).permutation(len(examples))
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        if idx.size < 2:
            continue
        batches.append(_to_batch([examples[i] for i in idx]))
    return batches


def iter_eval_batches(examples, batch_size: int):
    """Order-preserving batches covering every example (size-1 tail kept)."""
    if not examples:
        raise ValueError("empty split")
    for start in range(0, len(examples), batch_size):
        yield _to_batch(examples[start : start + batch_size])


# ---------------------------------------------------------------------------
# synthetic confound corpus
# ---------------------------------------------------------------------------

IDENTITY_TOKENS = ("blorgs", "snarps", "quibs", "zerts")
_NEUTRAL_SUBJECTS = ("people", "folks", "neighbors", "students", "workers", "drivers")
_NEG_ADJ = ("awful", "vile", "worthless", "dreadful", "rotten", "nasty")
_POS_ADJ = ("kind", "gentle", "brilliant", "cheerful", "generous", "honest")


def _sentence(rng: np.random.Generator, kind: str, subject: str) -> str:
    # class is carried by context tokens: bare negative adjectives mean hate,
    # negation words flip the same adjectives to non-hate (the hard negatives)
    if kind == "hate":
        a1, a2 = rng.choice(_NEG_ADJ, size=2, replace=False)
        forms = (
            f"those {subject} are {a1} and {a2}",
            f"{subject} seem so {a1} , truly {a2}",
        )
    elif kind == "plain":
        a1, a2 = rng.choice(_POS_ADJ, size=2, replace=False)
        forms = (
            f"those {subject} are {a1} and {a2}",
            f"{subject} seem so {a1} , truly {a2}",
        )
    else:  # hard negative: same negative adjectives, negated
        a1, a2 = rng.choice(_NEG_ADJ, size=2, replace=False)
        forms = (
            f"those {subject} are not {a1} and never {a2}",
            f"{subject} never seem {a1} , not even {a2}",
        )
    return forms[int(rng.integers(len(forms)))]


def _exact_flags(rng: np.random.Generator, n: int, rate: float) -> np.ndarray:
    # exact-count assignment so corpus-level frequencies are tight, not Bernoulli
    k = int(round(rate * n))
    flags = np.zeros(n, dtype=bool)
    flags[:k] = True
    rng.shuffle(flags)
    return flags


def _split(rng: np.random.Generator, n_per_class: int, id_rate_hate: float, id_rate_non: float) -> list[Example]:
    out: list[Example] = []
    id_flags = _exact_flags(rng, n_per_class, id_rate_hate)
    for i in range(n_per_class):
        pool = IDENTITY_TOKENS if id_flags[i] else _NEUTRAL_SUBJECTS
        subject = str(rng.choice(pool))
        out.append(Example(_sentence(rng, "hate", subject), 1))
    id_flags = _exact_flags(rng, n_per_class, id_rate_non)
    hard_flags = _exact_flags(rng, n_per_class, 0.5)
    for i in range(n_per_class):
        pool = IDENTITY_TOKENS if id_flags[i] else _NEUTRAL_SUBJECTS
        subject = str(rng.choice(pool))
        kind = "hardneg" if hard_flags[i] else "plain"
        out.append(Example(_sentence(rng, kind, subject), 0))
    perm = rng.permutation(len(out))
    return [out[i] for i in perm]


def generate_confound_corpus(
    n_per_class: int, confound_rate: float, seed: int
) -> tuple[list[Example], list[Example], list[Example]]:
    """(train, val, test) splits with an engineered identity-label confound.

    In train and val, identity-group subjects appear in hate sentences with
    probability confound_rate and in non-hate sentences with probability
    1 - confound_rate (exact counts). The test split is balanced: both classes
    carry identity subjects at rate 0.5. Labels are always decided by context
    tokens, so the identity correlation is a pure shortcut.
    """
    if not 0.0 <= confound_rate <= 1.0:
        raise ValueError(f"confound_rate must be in [0, 1], got {confound_rate}")
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    n_held = max(2, n_per_class // 4)
    train = _split(substream(seed, STREAM_DATA + "-train"), n_per_class, confound_rate, 1.0 - confound_rate)
    val = _split(substream(seed, STREAM_DATA + "-val"), n_held, confound_rate, 1.0 - confound_rate)
    test = _split(substream(seed, STREAM_DATA + "-test"), n_held, 0.5, 0.5)
    return train, val, test


def has_identity_token(text: str) -> bool:
    toks = set(tokenize(text))
    return any(t in toks for t in IDENTITY_TOKENS)
