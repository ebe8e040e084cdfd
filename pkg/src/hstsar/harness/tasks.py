"""Synthetic long-sequence classification tasks.

Both generators are pure functions of their :class:`SyntheticTaskSpec`: the
same spec always yields the same splits. Token ids start at
``FIRST_FREE_ID`` so the reserved PAD / [CLS] / global ids never collide
with task symbols.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigurationError, ParseError
from ..hst import FIRST_FREE_ID, PAD_ID

SPLITS = ("train", "dev", "test")


class Task(str, enum.Enum):
    CROSS_BLOCK_PARITY = "cross_block_parity"
    LISTOPS_MINI = "listops_mini"


@dataclass
class SyntheticTaskSpec:
    task: Task = Task.CROSS_BLOCK_PARITY
    length: int = 64
    block_width: int = 8  # parity: one mark per block of this many tokens
    vocab: int | None = None
    num_classes: int | None = None
    seed: int = 0
    train_size: int = 5000
    dev_size: int = 500
    test_size: int = 1000
    max_depth: int = 3  # listops only
    max_args: int = 5  # listops only

    def __post_init__(self):
        self.task = Task(self.task)
        if self.task is Task.CROSS_BLOCK_PARITY:
            if self.length % self.block_width:
                raise ConfigurationError(
                    f"parity length {self.length} must be a multiple of block_width {self.block_width}"
                )
            self.num_classes = 2
            self.vocab = self.vocab or FIRST_FREE_ID + 2 + 8
            if self.vocab < FIRST_FREE_ID + 3:
                raise ConfigurationError("parity needs room for two marks and one filler token")
        else:
            self.num_classes = 10
            self.vocab = len(LISTOPS_VOCAB) + FIRST_FREE_ID
            if self.length < 5:
                raise ConfigurationError("listops sequences need length >= 5")

    def size(self, split):
        return {"train": self.train_size, "dev": self.dev_size, "test": self.test_size}[split]

    def to_dict(self):
        d = asdict(self)
        d["task"] = self.task.value
        return d


@dataclass
class Dataset:
    """Token ids ``[N, length]`` (PAD-filled) and integer labels."""

    ids: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    @property
    def valid(self):
        return self.ids != PAD_ID

    def subset(self, idx):
        return Dataset(self.ids[idx], self.labels[idx])


def _split_rng(spec, split):
    return np.random.default_rng([spec.seed, SPLITS.index(split), 7919])


# ---------------------------------------------------------------------------
# cross-block parity

MARK_A = FIRST_FREE_ID
MARK_B = FIRST_FREE_ID + 1
FILLER_START = FIRST_FREE_ID + 2


def parity_label(marks):
    """Parity of the number of A marks: 0 for even, 1 for odd."""
    return sum(1 for m in marks if m in ("A", MARK_A)) % 2


def generate_cross_block_parity(spec, split="train"):
    """One A/B mark at a random offset in every block, filler elsewhere.

    The label is the parity of the number of A marks, so no single block
    determines it.
    """
    rng = _split_rng(spec, split)
    n = spec.size(split)
    w = spec.block_width
    m = spec.length // w
    ids = rng.integers(FILLER_START, spec.vocab, (n, spec.length))
    is_a = rng.random((n, m)) < 0.5
    offsets = rng.integers(0, w, (n, m))
    cols = np.arange(m)[None, :] * w + offsets
    np.put_along_axis(ids, cols, np.where(is_a, MARK_A, MARK_B), axis=1)
    labels = is_a.sum(axis=1) % 2
    return Dataset(ids.astype(np.int64), labels.astype(np.int64))


# ---------------------------------------------------------------------------
# ListOps-mini

OPS = ("[MIN", "[MAX", "[MED", "[SM")
LISTOPS_VOCAB = tuple(str(i) for i in range(10)) + OPS + ("]",)
_TOKEN_ID = {tok: FIRST_FREE_ID + i for i, tok in enumerate(LISTOPS_VOCAB)}
_ID_TOKEN = {v: k for k, v in _TOKEN_ID.items()}


def _apply(op, values):
    if op == "[MIN":
        return min(values)
    if op == "[MAX":
        return max(values)
    if op == "[MED":
        return int(np.median(values))
    return sum(values) % 10


def tokenize_listops(text):
    """Split ``"[MAX 2 [MIN 3 4]]"`` into tokens, detaching closing brackets."""
    out = []
    for word in text.split():
        core = word.rstrip("]")
        if core:
            out.append(core)
        out.extend("]" * (len(word) - len(core)))
    return out


def evaluate_listops(tokens):
    """Value of a prefix expression given as text or a token list."""
    if isinstance(tokens, str):
        tokens = tokenize_listops(tokens)
    stack = [[]]
    ops = []
    for i, tok in enumerate(tokens):
        if tok in OPS:
            ops.append(tok)
            stack.append([])
        elif tok == "]":
            if not ops or not stack[-1]:
                raise ParseError("unbalanced or empty operator", f"token {i}")
            vals = stack.pop()
            stack[-1].append(_apply(ops.pop(), vals))
        elif tok.isdigit() and len(tok) == 1:
            stack[-1].append(int(tok))
        else:
            raise ParseError(f"unknown token {tok!r}", f"token {i}")
    if ops or len(stack) != 1 or len(stack[0]) != 1:
        raise ParseError("expression is not a single closed term", "end")
    return stack[0][0]


def _gen_expr(rng, depth, max_depth, max_args):
    if depth > 1 and (depth > max_depth or rng.random() < 0.35):
        return [str(int(rng.integers(10)))]
    op = OPS[int(rng.integers(len(OPS)))]
    out = [op]
    for _ in range(int(rng.integers(2, max_args + 1))):
        if depth < max_depth:
            out += _gen_expr(rng, depth + 1, max_depth, max_args)
        else:
            out.append(str(int(rng.integers(10))))
    out.append("]")
    return out


def encode_listops(tokens):
    return [_TOKEN_ID[t] for t in tokens]


def decode_listops(ids):
    return [_ID_TOKEN[int(i)] for i in ids if int(i) != PAD_ID]


def generate_listops_mini(spec, split="train"):
    """Random nested MIN/MAX/MED/SM expressions of depth <= ``max_depth``.

    Expressions longer than ``spec.length`` tokens are redrawn; shorter ones
    are right-padded with PAD. The label is the evaluated digit.
    """
    rng = _split_rng(spec, split)
    n = spec.size(split)
    ids = np.full((n, spec.length), PAD_ID, dtype=np.int64)
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        while True:
            toks = _gen_expr(rng, 1, spec.max_depth, spec.max_args)
            if len(toks) <= spec.length:
                break
        ids[i, : len(toks)] = encode_listops(toks)
        labels[i] = evaluate_listops(toks)
    return Dataset(ids, labels)


def generate(spec, split="train"):
    if spec.task is Task.CROSS_BLOCK_PARITY:
        return generate_cross_block_parity(spec, split)
    return generate_listops_mini(spec, split)
