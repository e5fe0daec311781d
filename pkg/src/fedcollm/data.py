"""Corpus loading, character tokenization, federated partitioning, and a
synthetic multiple-choice task generator."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError

PAD_ID = 0
BOS_ID = 1
RESERVED = 2


@dataclass
class Corpus:
    """Tokenized documents over a character vocabulary.

    Ids 0 and 1 are reserved (pad, bos); characters map to 2..len(vocab)+1
    in sorted order. `labels` carries one source/topic label per document
    (all zero when the source has no topic structure).
    """

    documents: list[list[int]]
    vocab: str
    digest: str
    labels: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.labels:
            self.labels = [0] * len(self.documents)
        if len(self.labels) != len(self.documents):
            raise InputError("labels and documents must have equal length")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) + RESERVED

    def tokenize(self, text: str) -> list[int]:
        index = {ch: i + RESERVED for i, ch in enumerate(self.vocab)}
        try:
            return [index[ch] for ch in text]
        except KeyError as exc:
            raise InputError(f"character {exc.args[0]!r} not in vocabulary") from None

    def detokenize(self, ids) -> str:
        chars = []
        for i in ids:
            if i < RESERVED:
                raise InputError(f"id {i} is reserved and has no character")
            if i - RESERVED >= len(self.vocab):
                raise InputError(f"id {i} out of vocabulary range")
            chars.append(self.vocab[i - RESERVED])
        return "".join(chars)


def _build_corpus(texts: list[str], raw_bytes: bytes, labels=None) -> Corpus:
    vocab = "".join(sorted(set("".join(texts))))
    digest = hashlib.sha256(raw_bytes).hexdigest()
    index = {ch: i + RESERVED for i, ch in enumerate(vocab)}
    documents = [[index[ch] for ch in t] for t in texts]
    return Corpus(documents=documents, vocab=vocab, digest=digest,
                  labels=list(labels) if labels else [])


def load_corpus(path) -> Corpus:
    """Load documents from plain text (one per line) or JSONL with a "text"
    field (chosen by a .jsonl/.json suffix). Blank lines are skipped."""
    path = Path(path)
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InputError(f"undecodable byte at offset {exc.start} in {path}") from None
    texts = []
    if path.suffix in (".jsonl", ".json"):
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: invalid JSON: {exc}") from None
            if not isinstance(record, dict) or "text" not in record:
                raise InputError(f'{path}:{lineno}: expected an object with a "text" field')
            if record["text"]:
                texts.append(str(record["text"]))
    else:
        texts = [line for line in text.splitlines() if line]
    return _build_corpus(texts, raw)


# Per-topic word banks over pairwise-disjoint alphabets, so continuations
# from different topics are distinguishable from local character statistics.
_TOPIC_BANKS = (
    ("moon", "son", "most", "tons", "onto"),
    ("fell", "reed", "elder", "fled", "free"),
    ("kiwi", "wick", "kick", "civic", "vick"),
    ("pugh", "yup", "hug", "guppy", "huppy"),
)


def make_synthetic_corpus(
    n_docs: int = 240,
    seed: int = 20240601,
    n_topics: int = 4,
    words_per_doc: tuple[int, int] = (9, 13),
) -> Corpus:
    """The bundled synthetic corpus: short topic-flavored word sequences.

    Each document draws its words from one topic's small bank, so a trained
    character model can tell in-topic continuations from out-of-topic ones.
    Deterministic in (n_docs, seed, n_topics, words_per_doc).
    """
    if n_topics < 1 or n_topics > len(_TOPIC_BANKS):
        raise InputError(f"n_topics must be in 1..{len(_TOPIC_BANKS)}")
    rng = np.random.default_rng(seed)
    texts = []
    labels = []
    for i in range(n_docs):
        topic = int(rng.integers(0, n_topics))
        bank = _TOPIC_BANKS[topic]
        n_words = int(rng.integers(words_per_doc[0], words_per_doc[1] + 1))
        words = [bank[int(rng.integers(0, len(bank)))] for _ in range(n_words)]
        texts.append(" ".join(words) + ".")
        labels.append(topic)
    raw = "\n".join(texts).encode("utf-8")
    return _build_corpus(texts, raw, labels)


@dataclass
class FederatedSplit:
    """Document-index shards: K client shards, auxiliary shard, eval shard."""

    client_shards: list[list[int]]
    aux: list[int]
    eval: list[int]
    descriptor: dict

    def all_assigned(self) -> list[int]:
        out = list(self.eval) + list(self.aux)
        for shard in self.client_shards:
            out.extend(shard)
        return out


def partition(corpus: Corpus, k: int, scheme: str = "iid", seed: int = 0,
              beta: float = 0.5) -> FederatedSplit:
    """Split a corpus into K client shards plus reserved shards.

    10% of documents (at least one) are held out for evaluation and another
    10% reserved as the auxiliary shard before any client assignment, so
    the auxiliary data is disjoint from every client's data. "iid" deals the
    rest round-robin after a seeded shuffle; "dirichlet" draws per-client
    proportions from Dirichlet(beta) independently for each document label.
    """
    n = len(corpus.documents)
    if n == 0:
        raise InputError("cannot partition an empty corpus")
    if k < 1:
        raise InputError("K must be >= 1")
    if scheme not in ("iid", "dirichlet"):
        raise InputError(f"unknown partition scheme {scheme!r}")
    if beta <= 0:
        raise InputError("beta must be > 0")

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_eval = max(1, round(0.1 * n))
    n_aux = max(1, round(0.1 * n))
    eval_ids = [int(i) for i in order[:n_eval]]
    aux_ids = [int(i) for i in order[n_eval : n_eval + n_aux]]
    rest = order[n_eval + n_aux :]
    if k > rest.size:
        raise InputError(f"K={k} exceeds the {rest.size} documents available for clients")

    if scheme == "iid":
        shards = [[int(i) for i in rest[c::k]] for c in range(k)]
    else:
        labels = np.asarray([corpus.labels[i] for i in rest])
        shards = [[] for _ in range(k)]
        for label in sorted(set(labels.tolist())):
            members = rest[labels == label]
            props = rng.dirichlet(np.full(k, beta))
            bounds = (np.cumsum(props) * members.size).astype(int)[:-1]
            for c, chunk in enumerate(np.split(members, bounds)):
                shards[c].extend(int(i) for i in chunk)
        # every client must hold at least one document to train on
        for c in range(k):
            if not shards[c]:
                donor = max(range(k), key=lambda j: len(shards[j]))
                shards[c].append(shards[donor].pop())

    return FederatedSplit(
        client_shards=shards,
        aux=aux_ids,
        eval=eval_ids,
        descriptor={"scheme": scheme, "seed": int(seed), "beta": float(beta),
                    "k": int(k), "corpus_digest": corpus.digest},
    )


@dataclass
class McqInstance:
    prompt: list[int]
    choices: list[list[int]]
    gold: int

    def __post_init__(self):
        if len(self.choices) < 2:
            raise InputError("an instance needs at least two choices")
        if not 0 <= self.gold < len(self.choices):
            raise InputError("gold index out of range")


def make_mcq_set(
    corpus: Corpus,
    n: int,
    seed: int = 0,
    prompt_len: int = 16,
    choice_len: int = 8,
    n_choices: int = 4,
    doc_ids=None,
) -> list[McqInstance]:
    """Build continuation-choice instances: the prompt is a document prefix,
    the gold choice its true continuation, distractors continuations drawn
    from other documents at the same offset."""
    if n < 0:
        raise InputError("n must be >= 0")
    if n == 0:
        return []
    window = prompt_len + choice_len
    ids = list(doc_ids) if doc_ids is not None else list(range(len(corpus.documents)))
    pool = [i for i in ids if len(corpus.documents[i]) >= window]
    if len(pool) < 2:
        raise InputError(
            f"need at least 2 documents of length >= {window} to build distractors"
        )
    rng = np.random.default_rng(seed)
    instances = []
    for _ in range(n):
        doc_id = pool[int(rng.integers(0, len(pool)))]
        doc = corpus.documents[doc_id]
        prompt = doc[:prompt_len]
        gold_seq = doc[prompt_len:window]
        distractors: list[list[int]] = []
        attempts = 0
        while len(distractors) < n_choices - 1:
            attempts += 1
            if attempts > 64 * n_choices:
                raise InputError("could not sample enough distinct distractors")
            other = pool[int(rng.integers(0, len(pool)))]
            if other == doc_id:
                continue
            cand = corpus.documents[other][prompt_len:window]
            if cand == gold_seq or cand in distractors:
                continue
            distractors.append(cand)
        gold_pos = int(rng.integers(0, n_choices))
        choices = distractors[:gold_pos] + [gold_seq] + distractors[gold_pos:]
        instances.append(McqInstance(prompt=prompt, choices=choices, gold=gold_pos))
    return instances


def save_mcq_jsonl(instances: list[McqInstance], corpus: Corpus, path) -> None:
    """Export instances as JSONL records {"prompt", "choices", "gold"}."""
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            record = {
                "prompt": corpus.detokenize(inst.prompt),
                "choices": [corpus.detokenize(c) for c in inst.choices],
                "gold": inst.gold,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_mcq_jsonl(path, corpus: Corpus) -> list[McqInstance]:
    instances = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            instances.append(
                McqInstance(
                    prompt=corpus.tokenize(record["prompt"]),
                    choices=[corpus.tokenize(c) for c in record["choices"]],
                    gold=int(record["gold"]),
                )
            )
    return instances
