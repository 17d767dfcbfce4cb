"""Binary descriptors, hierarchical vocabulary tree, bag-of-words vectors and the keyframe database."""
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from core.errors import EmptyCorpusError, NoCandidateError, VocabularyError, VocabularyFormatError
from core.features import FeatureSet

logger = logging.getLogger(__name__)

HEADER = "BINVOC"
COMMON_WORDS_RATIO = 0.8
UNANCHORED_MIN_SCORE = 1.0  # loop queries with no covisible keyframe in the database
KMAJORITY_ITERATIONS = 10

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)


def binarize(descriptors: np.ndarray) -> np.ndarray:
    """Bit i is 1 iff d_i >= 0; bits are packed into uint8 (a 256-float vector becomes 32 bytes)."""
    descriptors = np.asarray(descriptors, dtype=float)
    if not np.all(np.isfinite(descriptors)):
        raise VocabularyError("descriptor has non-finite entries")
    if descriptors.shape[-1] % 8:
        raise VocabularyError(f"descriptor length {descriptors.shape[-1]} is not a whole number of bytes")
    return np.packbits(descriptors >= 0.0, axis=-1)


def unpack(binary: np.ndarray) -> np.ndarray:
    return np.unpackbits(np.asarray(binary, dtype=np.uint8), axis=-1)


def hamming(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamming distance between packed descriptors, broadcast over leading axes."""
    return _POPCOUNT[np.bitwise_xor(a, b)].sum(axis=-1).astype(np.int64)


def pairwise_hamming(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return hamming(a[:, None, :], b[None, :, :])


def _majority(descriptors: np.ndarray) -> np.ndarray:
    bits = unpack(descriptors)
    return np.packbits(2 * bits.sum(axis=0) >= len(descriptors))


def _assign(descriptors: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return np.argmin(pairwise_hamming(descriptors, centers), axis=1)


def _fill_empty(labels: np.ndarray, descriptors: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Give every empty cluster the member of the largest cluster farthest from its center."""
    k = len(centers)
    for c in range(k):
        counts = np.bincount(labels, minlength=k)
        if counts[c] > 0:
            continue
        largest = int(np.argmax(counts))
        members = np.flatnonzero(labels == largest)
        if len(members) < 2:
            continue
        distances = hamming(descriptors[members], centers[largest])
        moved = members[int(np.argmax(distances))]
        labels[moved] = c
        centers[c] = descriptors[moved]
    return labels


def kmajority(descriptors: np.ndarray, k: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Binary k-means: Hamming assignment, per-bit majority centers. Returns (centers, labels)."""
    unique = np.unique(descriptors, axis=0)
    if len(unique) <= k:
        return unique, _assign(descriptors, unique)

    # farthest-point seeding from a seeded first pick
    chosen = [int(rng.integers(len(descriptors)))]
    nearest = hamming(descriptors, descriptors[chosen[0]])
    for _ in range(1, k):
        chosen.append(int(np.argmax(nearest)))
        nearest = np.minimum(nearest, hamming(descriptors, descriptors[chosen[-1]]))
    centers = descriptors[chosen].copy()

    labels = _fill_empty(_assign(descriptors, centers), descriptors, centers)
    for _ in range(KMAJORITY_ITERATIONS):
        updated = np.array([_majority(descriptors[labels == c]) for c in range(k)])
        new_labels = _fill_empty(_assign(descriptors, updated), descriptors, updated)
        converged = np.array_equal(updated, centers) and np.array_equal(new_labels, labels)
        centers, labels = updated, new_labels
        if converged:
            break
    keep = np.flatnonzero(np.bincount(labels, minlength=k) > 0)
    remap = -np.ones(k, dtype=int)
    remap[keep] = np.arange(len(keep))
    return centers[keep], remap[labels]


@dataclass
class VocabularyNode:
    id: int
    parent: int
    center: np.ndarray
    children: List[int] = field(default_factory=list)
    word_id: int = -1
    idf: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return not self.children and self.parent >= 0


@dataclass
class BowVector:
    """Sparse word id -> TF-IDF weight, L1-normalized."""
    weights: Dict[int, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.weights)

    def words(self) -> Set[int]:
        return set(self.weights)

    def similarity(self, other: "BowVector") -> float:
        """L1 score 1 - ½‖a − b‖₁."""
        if not self.weights or not other.weights:
            return 0.0
        distance = 0.0
        for word in self.weights.keys() | other.weights.keys():
            distance += abs(self.weights.get(word, 0.0) - other.weights.get(word, 0.0))
        return 1.0 - 0.5 * distance


class VocabularyTree:
    def __init__(self, k: int, depth: int, nodes: List[VocabularyNode], n_bits: int = 256):
        self.k = k
        self.depth = depth
        self.nodes = nodes
        self.n_bits = n_bits
        self.words = [node.id for node in nodes if node.is_leaf]
        for word_id, node_id in enumerate(self.words):
            nodes[node_id].word_id = word_id

    @property
    def word_count(self) -> int:
        return len(self.words)

    @classmethod
    def train(cls, corpus: Union[np.ndarray, Sequence[np.ndarray]], k: int = 10, depth: int = 4,
              seed: int = 0) -> "VocabularyTree":
        """Hierarchical k-majority clustering of packed binary descriptors.

        `corpus` is either one (N, bytes) array, where every descriptor counts as its own document
        for the IDF, or a sequence of such arrays, one per document (image).
        """
        if k < 2 or depth < 1:
            raise VocabularyError("vocabulary needs k >= 2 and depth >= 1")
        documents = _documents(corpus)
        descriptors = np.concatenate(documents) if documents else np.zeros((0, 32), np.uint8)
        if len(descriptors) == 0:
            raise EmptyCorpusError("cannot train a vocabulary on an empty corpus")
        if len(descriptors) < k ** depth:
            logger.warning("corpus of %d descriptors is smaller than %d^%d words", len(descriptors), k, depth)

        rng = np.random.default_rng(seed)
        n_bytes = descriptors.shape[1]
        nodes = [VocabularyNode(0, -1, np.zeros(n_bytes, dtype=np.uint8))]
        frontier = [(0, np.arange(len(descriptors)))]
        for _ in range(depth):
            next_frontier = []
            for node_id, members in frontier:
                centers, labels = kmajority(descriptors[members], k, rng)
                for c, center in enumerate(centers):
                    child = VocabularyNode(len(nodes), node_id, center.astype(np.uint8))
                    nodes.append(child)
                    nodes[node_id].children.append(child.id)
                    next_frontier.append((child.id, members[labels == c]))
            frontier = next_frontier

        tree = cls(k, depth, nodes, n_bits=8 * n_bytes)
        tree._set_idf(documents)
        logger.info("trained vocabulary: k=%d depth=%d words=%d from %d descriptors",
                    k, depth, tree.word_count, len(descriptors))
        return tree

    def _set_idf(self, documents: List[np.ndarray]) -> None:
        frequency = np.zeros(self.word_count)
        for document in documents:
            if len(document):
                frequency[np.unique(self.quantize_binary(document))] += 1
        n_docs = max(len(documents), 1)
        for word_id, node_id in enumerate(self.words):
            self.nodes[node_id].idf = float(np.log(n_docs / frequency[word_id])) if frequency[word_id] else 0.0

    def quantize_binary(self, descriptors: np.ndarray) -> np.ndarray:
        """Greedy root-to-leaf descent by minimum Hamming distance; word id per descriptor."""
        descriptors = np.atleast_2d(np.asarray(descriptors, dtype=np.uint8))
        words = np.empty(len(descriptors), dtype=int)
        for i, descriptor in enumerate(descriptors):
            node = self.nodes[0]
            while node.children:
                centers = np.array([self.nodes[c].center for c in node.children])
                node = self.nodes[node.children[int(np.argmin(hamming(centers, descriptor)))]]
            words[i] = node.word_id
        return words

    def nearest_word(self, descriptor: np.ndarray) -> int:
        """Exhaustive scan over every leaf center."""
        centers = np.array([self.nodes[node_id].center for node_id in self.words])
        return int(np.argmin(hamming(centers, np.asarray(descriptor, dtype=np.uint8))))

    def transform_binary(self, descriptors: np.ndarray) -> BowVector:
        if len(descriptors) == 0:
            return BowVector()
        words = self.quantize_binary(descriptors)
        counts = np.bincount(words, minlength=self.word_count).astype(float)
        present = np.flatnonzero(counts)
        tf = counts[present] / len(words)
        idf = np.array([self.nodes[self.words[w]].idf for w in present])
        weights = tf * idf
        if weights.sum() <= 0.0:
            weights = tf
        keep = weights > 0.0
        weights = weights[keep] / weights[keep].sum()
        return BowVector({int(w): float(v) for w, v in zip(present[keep], weights)})

    def transform(self, features: FeatureSet) -> BowVector:
        if len(features) == 0:
            return BowVector()
        return self.transform_binary(binarize(features.descriptors))

    # -- file format -----------------------------------------------------

    def save(self, path: Union[str, Path]) -> None:
        lines = [f"{HEADER} {self.k} {self.depth} {self.word_count}"]
        for node in self.nodes:
            lines.append(f"{node.id} {node.parent} {int(node.is_leaf)} {node.idf!r} {node.center.tobytes().hex()}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "VocabularyTree":
        lines = [line for line in Path(path).read_text().splitlines() if line.strip()]
        if not lines:
            raise VocabularyFormatError(f"{path}: empty vocabulary file")
        header = lines[0].split()
        if len(header) != 4 or header[0] != HEADER:
            raise VocabularyFormatError(f"{path}: bad header {lines[0]!r}")
        try:
            k, depth, word_count = int(header[1]), int(header[2]), int(header[3])
        except ValueError as e:
            raise VocabularyFormatError(f"{path}: bad header {lines[0]!r}") from e

        nodes: List[VocabularyNode] = []
        leaf_flags = []
        for number, line in enumerate(lines[1:], start=2):
            parts = line.split()
            if len(parts) != 5:
                raise VocabularyFormatError(f"{path}:{number}: expected 5 fields")
            try:
                node_id, parent, is_leaf, idf = int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3])
                center = np.frombuffer(bytes.fromhex(parts[4]), dtype=np.uint8).copy()
            except ValueError as e:
                raise VocabularyFormatError(f"{path}:{number}: {e}") from e
            if node_id != len(nodes) or not -1 <= parent < node_id:
                raise VocabularyFormatError(f"{path}:{number}: node ids must be dense and parents precede children")
            nodes.append(VocabularyNode(node_id, parent, center, idf=idf))
            leaf_flags.append(bool(is_leaf))
            if parent >= 0:
                nodes[parent].children.append(node_id)

        if not nodes:
            raise VocabularyFormatError(f"{path}: no nodes")
        tree = cls(k, depth, nodes, n_bits=8 * len(nodes[0].center))
        if tree.word_count != word_count or [n.is_leaf for n in nodes] != leaf_flags:
            raise VocabularyFormatError(f"{path}: leaf structure disagrees with the header")
        for node_id in tree.words:
            steps, node = 0, nodes[node_id]
            while node.parent >= 0:
                node, steps = nodes[node.parent], steps + 1
            if steps != depth:
                raise VocabularyFormatError(f"{path}: leaf {node_id} is not at depth {depth}")
        return tree


def _documents(corpus: Union[np.ndarray, Sequence[np.ndarray]]) -> List[np.ndarray]:
    if isinstance(corpus, np.ndarray):
        if corpus.size == 0:
            return []
        corpus = np.atleast_2d(corpus).astype(np.uint8)
        return [row[None, :] for row in corpus]
    return [np.atleast_2d(np.asarray(d, dtype=np.uint8)) for d in corpus if len(d)]


def quantize(tree: VocabularyTree, features: FeatureSet) -> BowVector:
    return tree.transform(features)


def train_vocabulary(corpus, k: int = 10, depth: int = 4, seed: int = 0) -> VocabularyTree:
    return VocabularyTree.train(corpus, k, depth, seed)


@dataclass
class LoopCandidate:
    kf_id: int
    score: float
    group_score: float
    common_words: int


class KeyframeDatabase:
    """Inverted index word id -> keyframe ids, with the BoW vector of every keyframe."""

    def __init__(self, vocabulary: Optional[VocabularyTree] = None):
        self.vocabulary = vocabulary
        self.inverted: Dict[int, Set[int]] = {}
        self.vectors: Dict[int, BowVector] = {}
        self.lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.vectors)

    def add(self, kf_id: int, bow: BowVector) -> None:
        with self.lock:
            if kf_id in self.vectors:
                self._erase(kf_id)
            self.vectors[kf_id] = bow
            for word in bow.weights:
                self.inverted.setdefault(word, set()).add(kf_id)

    def erase(self, kf_id: int) -> None:
        with self.lock:
            self._erase(kf_id)

    def _erase(self, kf_id: int) -> None:
        bow = self.vectors.pop(kf_id, None)
        if bow is None:
            return
        for word in bow.weights:
            entries = self.inverted.get(word)
            if entries is not None:
                entries.discard(kf_id)
                if not entries:
                    del self.inverted[word]

    def clear(self) -> None:
        with self.lock:
            self.inverted.clear()
            self.vectors.clear()

    def rebuilt_index(self) -> Dict[int, Set[int]]:
        index: Dict[int, Set[int]] = {}
        for kf_id, bow in self.vectors.items():
            for word in bow.weights:
                index.setdefault(word, set()).add(kf_id)
        return index

    def _common_words(self, bow: BowVector, exclude: Set[int]) -> Dict[int, int]:
        common: Dict[int, int] = {}
        for word in bow.weights:
            for kf_id in self.inverted.get(word, ()):
                if kf_id not in exclude:
                    common[kf_id] = common.get(kf_id, 0) + 1
        return common

    def _rank(self, bow: BowVector, exclude: Set[int], neighbours, min_score: float,
              top_n: Optional[int]) -> List[LoopCandidate]:
        with self.lock:
            common = self._common_words(bow, exclude)
            if not common:
                return []
            min_common = COMMON_WORDS_RATIO * max(common.values())
            scores = {}
            for kf_id, count in common.items():
                if count >= min_common:
                    score = bow.similarity(self.vectors[kf_id])
                    if score >= min_score:
                        scores[kf_id] = score
        if not scores:
            return []

        groups = []
        for kf_id in sorted(scores):
            members = [kf_id] + [n for n in neighbours(kf_id) if n in scores]
            group_score = sum(scores[m] for m in members)
            best = max(members, key=lambda m: (scores[m], -m))
            groups.append(LoopCandidate(best, scores[best], group_score, common[best]))
        groups.sort(key=lambda c: (-c.group_score, -c.score, c.kf_id))

        ranked: List[LoopCandidate] = []
        seen: Set[int] = set()
        for candidate in groups:
            if candidate.kf_id in seen:
                continue
            seen.add(candidate.kf_id)
            ranked.append(candidate)
        return ranked if top_n is None else ranked[:top_n]

    def similarity_floor(self, bow: BowVector, covisible: Iterable[int]) -> Optional[float]:
        """Lowest similarity between the query and those of its covisible keyframes held here."""
        with self.lock:
            scores = [bow.similarity(self.vectors[k]) for k in covisible if k in self.vectors]
        return min(scores) if scores else None

    def detect_candidates(self, kf_id: int, bow: BowVector, covisible: Iterable[int],
                          neighbours=lambda kf: [], top_n: int = 3,
                          min_score: Optional[float] = None) -> List[LoopCandidate]:
        """Loop candidates for a query keyframe, best keyframe of each of the top N groups.

        `neighbours(kf)` returns a keyframe's covisibility neighbours; it defines the groups
        whose similarity scores are accumulated. Candidates must score at least `min_score`,
        by default the similarity_floor of `covisible`. A query none of whose covisible
        keyframes is in the database has nothing to compare against and gets no candidate
        short of an identical document.
        """
        covisible = set(covisible)
        if min_score is None:
            floor = self.similarity_floor(bow, covisible)
            min_score = UNANCHORED_MIN_SCORE if floor is None else floor
        exclude = covisible | {kf_id}
        ranked = self._rank(bow, exclude, neighbours, min_score, top_n)
        if not ranked:
            raise NoCandidateError(f"no loop candidate for keyframe {kf_id}")
        return ranked

    def relocalization_candidates(self, bow: BowVector, neighbours=lambda kf: []) -> List[LoopCandidate]:
        ranked = self._rank(bow, set(), neighbours, 0.0, None)
        if not ranked:
            raise NoCandidateError("no keyframe shares words with the query")
        return ranked
