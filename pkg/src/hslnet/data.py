"""Region features, query text, relevance labels and a synthetic corpus.

File formats (UTF-8, tab separated, no header):

* features:  ``image_id  n  f_1,f_2,...,f_{n*d0}`` (row-major)
* queries:   ``query_id  text``
* relevance: ``query_id  image_id  grade``
"""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


@dataclass
class ObjectFeatureSet:
    image_id: str
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"{self.image_id}: need an (n >= 1, d0) feature matrix, got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"{self.image_id}: non-finite feature value")

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass
class TokenSequence:
    query_id: str
    ids: np.ndarray
    original_length: int = 0

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1 or self.ids.size < 1:
            raise ValueError(f"{self.query_id}: token sequence must be nonempty")
        if not self.original_length:
            self.original_length = int(self.ids.size)

    @property
    def m(self) -> int:
        return int(self.ids.size)


def split_words(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip punctuation from token edges."""
    words = (w.strip(string.punctuation) for w in text.lower().split())
    return [w for w in words if w]


@dataclass
class Vocabulary:
    tokens: list[str]
    counts: dict[str, int]
    min_count: int = 5
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index and self.index[token] > UNK_ID

    def lookup(self, token: str) -> int:
        idx = self.index.get(token, UNK_ID)
        return UNK_ID if idx == PAD_ID else idx


def build_vocab(queries: Iterable[str], min_count: int = 5) -> Vocabulary:
    """Vocabulary of words seen at least ``min_count`` times.

    Ids 0 and 1 are reserved for padding and the unknown token; the rest are
    assigned by descending frequency, ties broken lexicographically.
    """
    counts = Counter()
    seen_any = False
    for text in queries:
        seen_any = True
        counts.update(split_words(text))
    if not seen_any or not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary([PAD_TOKEN, UNK_TOKEN] + kept, {t: counts[t] for t in kept}, min_count)


def tokenize(text: str, vocab: Vocabulary, max_tokens: int | None = None, query_id: str = "") -> TokenSequence:
    words = split_words(text)
    if not words:
        raise ValueError(f"query {query_id!r} is empty after tokenization")
    ids = [vocab.lookup(w) for w in words]
    limit = len(ids) if max_tokens is None else max_tokens
    return TokenSequence(query_id, np.array(ids[:limit]), original_length=len(ids))


# ---------------------------------------------------------------------------
# TSV files


def _fmt(x: float) -> str:
    return repr(float(x))


def save_features(sets: Iterable[ObjectFeatureSet], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sets:
            flat = ",".join(_fmt(x) for x in s.features.ravel())
            fh.write(f"{s.image_id}\t{s.n}\t{flat}\n")


def load_features(path, d0: int | None = None) -> dict[str, ObjectFeatureSet]:
    out: dict[str, ObjectFeatureSet] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated columns, got {len(parts)}")
            image_id, n_raw, values = parts
            try:
                n = int(n_raw)
                flat = np.array([float(x) for x in values.split(",")], dtype=np.float64)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed row ({exc})") from None
            if n < 1:
                raise ValueError(f"{path}:{lineno}: object count must be >= 1")
            dim = d0 if d0 is not None else flat.size // n
            if flat.size != n * dim:
                raise ValueError(f"{path}:{lineno}: {image_id} declares n={n}, d0={dim} but has {flat.size} values")
            if image_id in out:
                raise ValueError(f"{path}:{lineno}: duplicate image_id {image_id}")
            try:
                out[image_id] = ObjectFeatureSet(image_id, flat.reshape(n, dim))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def save_queries(queries: dict[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, text in queries.items():
            if "\t" in text or "\n" in text:
                raise ValueError(f"query {qid} text contains a tab or newline")
            fh.write(f"{qid}\t{text}\n")


def load_queries(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected query_id<TAB>text")
            if parts[0] in out:
                raise ValueError(f"{path}:{lineno}: duplicate query_id {parts[0]}")
            out[parts[0]] = parts[1]
    return out


def save_relevance(rows: Iterable[tuple[str, str, int]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, iid, grade in rows:
            fh.write(f"{qid}\t{iid}\t{int(grade)}\n")


def load_relevance(path) -> list[tuple[str, str, int]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected query_id<TAB>image_id<TAB>grade")
            try:
                grade = int(parts[2])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: grade must be an integer") from None
            if grade < 0:
                raise ValueError(f"{path}:{lineno}: negative grade")
            rows.append((parts[0], parts[1], grade))
    return rows


def load_word_vectors(path, vocab: Vocabulary, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Embedding table seeded from a ``token v_1 ... v_d`` text file.

    Rows for tokens missing from the file keep a Xavier-uniform draw.
    """
    limit = np.sqrt(6.0 / (len(vocab) + dim))
    table = rng.uniform(-limit, limit, size=(len(vocab), dim))
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            token = parts[0].lower()
            if token not in vocab:
                continue
            if len(parts) - 1 != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            table[vocab.index[token]] = [float(x) for x in parts[1:]]
    return table


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Aligned training pairs plus per-query candidate pools for evaluation."""

    images: dict[str, ObjectFeatureSet]
    train_queries: dict[str, str]
    train_pairs: list[tuple[str, str]]
    eval_queries: dict[str, str] = field(default_factory=dict)
    eval_pools: dict[str, dict[str, int]] = field(default_factory=dict)
    classes: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for qid, iid in self.train_pairs:
            if qid not in self.train_queries:
                raise ValueError(f"training pair references unknown query {qid}")
            if iid not in self.images:
                raise ValueError(f"training pair references unknown image {iid}")
        for qid, pool in self.eval_pools.items():
            if qid not in self.eval_queries:
                raise ValueError(f"candidate pool for unknown query {qid}")
            for iid in pool:
                if iid not in self.images:
                    raise ValueError(f"candidate pool of {qid} references unknown image {iid}")

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_features(self.images.values(), out / "features.tsv")
        save_queries(self.train_queries, out / "train_queries.tsv")
        save_relevance(((q, i, 1) for q, i in self.train_pairs), out / "train_pairs.tsv")
        save_queries(self.eval_queries, out / "eval_queries.tsv")
        save_relevance(
            ((q, i, g) for q, pool in self.eval_pools.items() for i, g in pool.items()),
            out / "eval_relevance.tsv",
        )

    @classmethod
    def load(cls, data_dir) -> "Dataset":
        d = Path(data_dir)
        images = load_features(d / "features.tsv")
        train_queries = load_queries(d / "train_queries.tsv")
        pairs = [(q, i) for q, i, g in load_relevance(d / "train_pairs.tsv") if g > 0]
        eval_queries: dict[str, str] = {}
        pools: dict[str, dict[str, int]] = {}
        if (d / "eval_queries.tsv").exists():
            eval_queries = load_queries(d / "eval_queries.tsv")
            for q, i, g in load_relevance(d / "eval_relevance.tsv"):
                pools.setdefault(q, {})[i] = g
        return cls(images, train_queries, pairs, eval_queries, pools)


def gen_synthetic(
    classes: int = 8,
    pairs_per_class: int = 25,
    n: int = 4,
    m: int = 6,
    d0: int = 16,
    vocab_size: int = 64,
    noise: float = 0.1,
    seed: int = 7,
    tokens_per_class: int = 4,
    eval_fraction: float = 0.2,
    pool_size: int = 30,
) -> Dataset:
    """Class-structured corpus where an image is relevant to a query iff they share a class.

    Each class owns a prototype feature vector and a disjoint set of words.
    An image holds 1..n objects, each the prototype plus Gaussian noise; a
    query is 1..m words drawn from its class's word set. A fraction of every
    class's pairs is held out; each held-out query gets a candidate pool of
    held-out images with grade 1 for same-class images.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if vocab_size < classes * tokens_per_class:
        raise ValueError(f"vocab_size={vocab_size} < classes*tokens_per_class={classes * tokens_per_class}")
    if pairs_per_class < 2:
        raise ValueError("need at least 2 pairs per class")
    rng = np.random.default_rng(seed)
    words = [f"w{i:03d}" for i in range(vocab_size)]
    order = rng.permutation(vocab_size)
    class_words = [[words[j] for j in order[c * tokens_per_class:(c + 1) * tokens_per_class]] for c in range(classes)]
    prototypes = rng.standard_normal((classes, d0))

    images: dict[str, ObjectFeatureSet] = {}
    labels: dict[str, int] = {}
    train_q: dict[str, str] = {}
    eval_q: dict[str, str] = {}
    train_pairs: list[tuple[str, str]] = []
    eval_images: list[str] = []
    n_eval = max(1, int(round(pairs_per_class * eval_fraction))) if eval_fraction > 0 else 0
    for c in range(classes):
        for k in range(pairs_per_class):
            iid, qid = f"img{c:02d}_{k:03d}", f"q{c:02d}_{k:03d}"
            count = int(rng.integers(1, n + 1))
            feats = prototypes[c] + noise * rng.standard_normal((count, d0))
            images[iid] = ObjectFeatureSet(iid, feats)
            length = int(rng.integers(1, m + 1))
            text = " ".join(rng.choice(class_words[c], size=length))
            labels[iid] = labels[qid] = c
            if k < pairs_per_class - n_eval:
                train_q[qid] = text
                train_pairs.append((qid, iid))
            else:
                eval_q[qid] = text
                eval_images.append(iid)

    pools: dict[str, dict[str, int]] = {}
    for qid in eval_q:
        c = labels[qid]
        positives = [i for i in eval_images if labels[i] == c]
        negatives = [i for i in eval_images if labels[i] != c]
        take = max(0, min(len(negatives), pool_size - len(positives)))
        chosen = list(rng.choice(negatives, size=take, replace=False)) if take else []
        pools[qid] = {i: int(labels[i] == c) for i in sorted(positives + chosen)}
    return Dataset(images, train_q, train_pairs, eval_q, pools, labels)


def pad_features(sets: list[ObjectFeatureSet]) -> tuple[np.ndarray, np.ndarray]:
    """Stack feature sets into ``(B, n_max, d0)`` with a boolean object mask."""
    d0 = sets[0].features.shape[1]
    n_max = max(s.n for s in sets)
    out = np.zeros((len(sets), n_max, d0))
    mask = np.zeros((len(sets), n_max), dtype=bool)
    for b, s in enumerate(sets):
        if s.features.shape[1] != d0:
            raise ValueError(f"{s.image_id}: feature width {s.features.shape[1]} != {d0}")
        out[b, :s.n] = s.features
        mask[b, :s.n] = True
    return out, mask


def pad_tokens(seqs: list[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    m_max = max(s.m for s in seqs)
    ids = np.full((len(seqs), m_max), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), m_max), dtype=bool)
    for b, s in enumerate(seqs):
        ids[b, :s.m] = s.ids
        mask[b, :s.m] = True
    return ids, mask
