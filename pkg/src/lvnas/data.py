"""Corpora, vocabularies, validation split and MLM masking.

Synthetic profiles (``n`` content tokens, ids ``3 .. vocab_size-1``):

``local``
    Order-2 Markov chain with additive structure::

        P(c | a, b) = 0.1 / n + 0.9 * (0.6 * U[b, c] + 0.4 * V[a, c])

    where every row of ``U`` and ``V`` is Dirichlet(1) over 3 random tokens.
    The first two tokens are uniform.  Predictable from a ±2 window, and the
    additive form keeps it learnable by small models in a few thousand steps.
``global``
    Let ``off = ceil(s / 2)``.  Positions ``< off`` are uniform i.i.d.;
    every position ``i >= off`` repeats position ``i - off``.  A masked token
    is recoverable exactly when its partner is visible.
``mixed``
    Let ``tail = s // 4`` and ``off = s - tail``.  Positions ``< off`` follow
    the Markov chain; every position ``i >= off`` repeats position ``i - off``.
    The middle of the sequence is therefore purely local while the two ends
    are tied across a distance of ``off``.

The chain is a deterministic function of ``(seed, n)`` so exact Bayes
ceilings can be recomputed from a corpus's provenance.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import make_rng

PAD, MASK, UNK = 0, 1, 2
SPECIAL_TOKENS = ("[PAD]", "[MASK]", "[UNK]")
N_SPECIAL = len(SPECIAL_TOKENS)
PROFILES = ("local", "global", "mixed")
MASK_SCHEMES = ("pure_mask", "bert_80_10_10")
CORPUS_MAGIC = "LVC1"

MARKOV_SUPPORT = 3
MARKOV_SMOOTHING = 0.1
MARKOV_RECENT_WEIGHT = 0.6


class CorpusError(ValueError):
    pass


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if tuple(self.tokens[:N_SPECIAL]) != SPECIAL_TOKENS:
            raise CorpusError("vocabulary must start with [PAD], [MASK], [UNK]")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise CorpusError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def synthetic(cls, vocab_size: int) -> "Vocab":
        return cls(list(SPECIAL_TOKENS) + [f"w{i}" for i in range(vocab_size - N_SPECIAL)])

    def encode(self, toks) -> list[int]:
        return [self.index.get(t, UNK) for t in toks]


@dataclass
class Corpus:
    sequences: np.ndarray  # (n, seq_len) int64
    vocab: Vocab
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.sequences = np.asarray(self.sequences, dtype=np.int64)
        if self.sequences.ndim != 2:
            raise CorpusError("sequences must be a 2-D array")
        if self.sequences.size and (self.sequences.min() < 0 or self.sequences.max() >= len(self.vocab)):
            raise CorpusError("token id outside vocabulary")

    def __len__(self) -> int:
        return self.sequences.shape[0]

    @property
    def seq_len(self) -> int:
        return self.sequences.shape[1]

    def subset(self, idx) -> "Corpus":
        return Corpus(self.sequences[np.asarray(idx, dtype=np.int64)], self.vocab, dict(self.provenance))


# --------------------------------------------------------------------------- #
# Synthetic generation
# --------------------------------------------------------------------------- #
@dataclass
class MarkovChain:
    """Order-2 chain over content indices ``0..n-1``: ``table[a, b, c] = P(c | a, b)``."""

    table: np.ndarray

    @property
    def n(self) -> int:
        return self.table.shape[0]

    def stationary_pairs(self, tol: float = 1e-14, max_iter: int = 100_000) -> np.ndarray:
        """Stationary distribution over consecutive pairs ``(a, b)`` by power iteration."""
        n = self.n
        pi = np.full((n, n), 1.0 / (n * n))
        for _ in range(max_iter):
            nxt = np.einsum("ab,abc->bc", pi, self.table)
            if np.abs(nxt - pi).max() < tol:
                return nxt
            pi = nxt
        return pi

    def next_token_ceiling(self) -> float:
        """Stationary-averaged ``max_c P(c | a, b)``: best one-step-ahead accuracy."""
        return float((self.stationary_pairs() * self.table.max(axis=-1)).sum())

    def sample(self, rng: np.random.Generator, n_seq: int, length: int) -> np.ndarray:
        out = np.empty((n_seq, length), dtype=np.int64)
        out[:, :2] = rng.integers(0, self.n, size=(n_seq, min(2, length)))
        cdf = np.cumsum(self.table, axis=-1)
        for t in range(2, length):
            u = rng.random(n_seq)[:, None]
            rows = cdf[out[:, t - 2], out[:, t - 1]]
            out[:, t] = np.minimum((rows < u).sum(axis=-1), self.n - 1)
        return out


def build_markov_chain(seed: int, n: int) -> MarkovChain:
    rng = make_rng([seed, 0x4D41524B])  # separate stream from sequence sampling
    m = min(MARKOV_SUPPORT, n)

    def sparse_rows() -> np.ndarray:
        rows = np.zeros((n, n))
        for r in rows:
            r[rng.choice(n, size=m, replace=False)] = rng.dirichlet(np.ones(m))
        return rows

    recent, older = sparse_rows(), sparse_rows()
    w = MARKOV_RECENT_WEIGHT
    mix = w * recent[None, :, :] + (1.0 - w) * older[:, None, :]
    return MarkovChain(MARKOV_SMOOTHING / n + (1.0 - MARKOV_SMOOTHING) * mix)


def copy_offset(seq_len: int, profile: str = "global") -> int:
    """Distance between a copied position and its source."""
    if profile == "mixed":
        return seq_len - seq_len // 4
    return (seq_len + 1) // 2


def gen_synthetic_corpus(
    seed: int, n_sequences: int, seq_len: int, vocab_size: int, profile: str = "mixed"
) -> Corpus:
    if vocab_size < 8:
        raise CorpusError(f"vocab_size must be at least 8, got {vocab_size}")
    if seq_len < 8:
        raise CorpusError(f"seq_len must be at least 8, got {seq_len}")
    if n_sequences < 1:
        raise CorpusError("n_sequences must be positive")
    if profile not in PROFILES:
        raise CorpusError(f"unknown profile {profile!r}; expected one of {', '.join(PROFILES)}")
    n = vocab_size - N_SPECIAL
    rng = make_rng([seed, 0x53455153])
    if profile == "local":
        content = build_markov_chain(seed, n).sample(rng, n_sequences, seq_len)
    else:
        off = copy_offset(seq_len, profile)
        if profile == "global":
            first = rng.integers(0, n, size=(n_sequences, off))
        else:
            first = build_markov_chain(seed, n).sample(rng, n_sequences, off)
        content = np.concatenate([first, first[:, : seq_len - off]], axis=1)
    prov = {"source": "synthetic", "profile": profile, "seed": seed}
    return Corpus(content + N_SPECIAL, Vocab.synthetic(vocab_size), prov)


def generating_chain(corpus: Corpus) -> MarkovChain | None:
    """The Markov chain behind a synthetic corpus (None for the ``global`` profile)."""
    prov = corpus.provenance
    if prov.get("source") != "synthetic":
        raise CorpusError("corpus is not synthetic")
    if prov["profile"] == "global":
        return None
    return build_markov_chain(prov["seed"], len(corpus.vocab) - N_SPECIAL)


# --------------------------------------------------------------------------- #
# Exact Bayes ceilings
# --------------------------------------------------------------------------- #
def _posterior_marginals(chain: MarkovChain | None, obs: np.ndarray, n: int) -> np.ndarray:
    """``P(x_t | visible tokens)`` for each position; ``obs[t] = -1`` when hidden."""
    length = obs.shape[0]
    ev = np.ones((length, n))
    seen = obs >= 0
    ev[seen] = 0.0
    ev[seen, obs[seen]] = 1.0
    if chain is None or length < 2:
        return ev / ev.sum(axis=1, keepdims=True)
    table = chain.table
    alphas = np.empty((length, n, n))
    a = np.outer(ev[0], ev[1])
    alphas[1] = a / a.sum()
    for t in range(2, length):
        a = np.einsum("ab,abc->bc", alphas[t - 1], table) * ev[t]
        alphas[t] = a / a.sum()
    post = np.empty((length, n))
    beta = np.ones((n, n))
    for t in range(length - 1, 0, -1):
        joint = alphas[t] * beta
        post[t] = joint.sum(axis=0)
        if t == 1:
            post[0] = joint.sum(axis=1)
        beta = np.einsum("abc,bc->ab", table * ev[t][None, None, :], beta)
        beta /= beta.max()
    return post / post.sum(axis=1, keepdims=True)


def bayes_masked_accuracy(
    corpus: Corpus, sequences: np.ndarray, mask: np.ndarray, positions: np.ndarray | None = None
) -> float:
    """Expected accuracy of the Bayes-optimal predictor on the given masked positions.

    Only unmasked tokens are treated as evidence (pure ``[MASK]`` corruption).
    ``positions`` optionally restricts scoring to a boolean ``(s,)`` selection.
    """
    chain = generating_chain(corpus)
    profile = corpus.provenance["profile"]
    n = len(corpus.vocab) - N_SPECIAL
    s = sequences.shape[1]
    score = mask if positions is None else mask & positions[None, :]
    total, hits = 0, 0.0
    for row, m, sc in zip(sequences - N_SPECIAL, mask, score):
        if not sc.any():
            continue
        if profile == "local":
            obs = np.where(m, -1, row)
            best = _posterior_marginals(chain, obs, n).max(axis=1)
        else:
            off = copy_offset(s, profile)
            obs = np.where(m[:off], -1, row[:off])
            tail = s - off
            partner_seen = ~m[off:]
            obs[:tail] = np.where(partner_seen & (obs[:tail] < 0), row[off:], obs[:tail])
            first = _posterior_marginals(chain, obs, n).max(axis=1)
            best = np.concatenate([first, first[:tail]])
        hits += float(best[sc].sum())
        total += int(sc.sum())
    if total == 0:
        raise CorpusError("no masked positions selected")
    return hits / total


# --------------------------------------------------------------------------- #
# Plain-text ingestion
# --------------------------------------------------------------------------- #
def ingest_text(
    path: str | Path, vocab_build: str = "char", seq_len: int = 64, max_vocab: int | None = None
) -> Corpus:
    """Tokenise a UTF-8 file into fixed-length sequences, dropping the ragged tail.

    The vocabulary is ordered by descending frequency (ties by token text);
    with ``max_vocab`` set, tokens beyond that many content entries map to [UNK].
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc
    if vocab_build == "char":
        toks = list(text)
    elif vocab_build == "whitespace":
        toks = text.split()
    else:
        raise CorpusError(f"unknown vocab_build {vocab_build!r}; expected char or whitespace")
    if not toks:
        raise CorpusError(f"{path} contains no tokens")
    counts = Counter(toks)
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    ranked = [t for t in ranked if t not in SPECIAL_TOKENS]
    if max_vocab is not None:
        ranked = ranked[:max_vocab]
    vocab = Vocab(list(SPECIAL_TOKENS) + ranked)
    ids = np.asarray(vocab.encode(toks), dtype=np.int64)
    n_seq = ids.size // seq_len
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    prov = {"source": "text", "path": str(path), "sha256": digest, "vocab_build": vocab_build}
    return Corpus(ids[: n_seq * seq_len].reshape(n_seq, seq_len), vocab, prov)


# --------------------------------------------------------------------------- #
# Split and masking
# --------------------------------------------------------------------------- #
def split_train_val(corpus: Corpus, val_fraction: float = 0.02, seed: int = 0) -> tuple[Corpus, Corpus]:
    if not 0.0 < val_fraction < 1.0:
        raise CorpusError("val_fraction must lie strictly between 0 and 1")
    n = len(corpus)
    n_val = math.floor(n * val_fraction + 0.5)
    if n_val == 0 or n_val == n:
        raise CorpusError(f"a {val_fraction} split of {n} sequences leaves an empty side")
    perm = make_rng([seed, 0x53504C54]).permutation(n)
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    return corpus.subset(train_idx), corpus.subset(val_idx)


@dataclass
class MaskedBatch:
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]


def masked_count(seq_len: int, mask_rate: float) -> int:
    return math.floor(mask_rate * seq_len + 0.5)


def apply_mlm_masking(
    rng: np.random.Generator,
    tokens: np.ndarray,
    mask_rate: float = 0.15,
    scheme: str = "pure_mask",
    vocab_size: int | None = None,
) -> MaskedBatch:
    """Pick ``round(mask_rate * s)`` non-special positions per row and corrupt them.

    Every picked position is a prediction target whatever its corruption.
    """
    if not 0.0 < mask_rate < 1.0:
        raise CorpusError("mask_rate must lie strictly between 0 and 1")
    if scheme not in MASK_SCHEMES:
        raise CorpusError(f"unknown masking scheme {scheme!r}")
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    b, s = tokens.shape
    k = masked_count(s, mask_rate)
    eligible = tokens >= N_SPECIAL
    if (eligible.sum(axis=1) < k).any():
        raise CorpusError(f"a sequence has fewer than {k} maskable positions")
    keys = rng.random((b, s))
    keys[~eligible] = np.inf
    picked = np.argsort(keys, axis=1, kind="stable")[:, :k]
    mask = np.zeros((b, s), dtype=bool)
    np.put_along_axis(mask, picked, True, axis=1)
    inputs = tokens.copy()
    if scheme == "pure_mask":
        inputs[mask] = MASK
    else:
        if vocab_size is None:
            raise CorpusError("bert_80_10_10 needs vocab_size for random replacements")
        u = rng.random(int(mask.sum()))
        rand_tok = rng.integers(N_SPECIAL, vocab_size, size=u.size)
        vals = tokens[mask]
        vals = np.where(u < 0.8, MASK, np.where(u < 0.9, rand_tok, vals))
        inputs[mask] = vals
    return MaskedBatch(inputs, tokens.copy(), mask)


# --------------------------------------------------------------------------- #
# Corpus file format
# --------------------------------------------------------------------------- #
_ESCAPES = {"\\": "\\\\", "\n": "\\n", "\r": "\\r", "\t": "\\t", " ": "\\s"}
_UNESCAPES = {"\\": "\\", "n": "\n", "r": "\r", "t": "\t", "s": " "}


def _escape(tok: str) -> str:
    return "".join(_ESCAPES.get(ch, ch) for ch in tok)


def _unescape(line: str) -> str:
    out, it = [], iter(line)
    for ch in it:
        if ch == "\\":
            nxt = next(it, None)
            if nxt not in _UNESCAPES:
                raise CorpusError(f"bad escape in vocabulary line {line!r}")
            out.append(_UNESCAPES[nxt])
        else:
            out.append(ch)
    return "".join(out)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    n, s = corpus.sequences.shape
    lines = [f"{CORPUS_MAGIC} {len(corpus.vocab)} {s} {n}"]
    lines += [_escape(t) for t in corpus.vocab.tokens]
    lines += [" ".join(map(str, row)) for row in corpus.sequences.tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_corpus(path: str | Path) -> Corpus:
    try:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
    except (OSError, UnicodeDecodeError) as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    head = lines[0].split()
    if len(head) != 4 or head[0] != CORPUS_MAGIC:
        raise CorpusError(f"{path}: not an {CORPUS_MAGIC} corpus file")
    v, s, n = (int(x) for x in head[1:])
    if len(lines) < 1 + v + n:
        raise CorpusError(f"{path}: truncated corpus file")
    vocab = Vocab([_unescape(t) for t in lines[1 : 1 + v]])
    rows = lines[1 + v : 1 + v + n]
    try:
        seqs = np.array([[int(x) for x in r.split()] for r in rows], dtype=np.int64).reshape(n, s)
    except ValueError as exc:
        raise CorpusError(f"{path}: malformed sequence lines ({exc})") from exc
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return Corpus(seqs, vocab, {"source": "file", "path": str(path), "sha256": digest})
