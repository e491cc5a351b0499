"""Embedding-space metrics: k-NN group accuracy and functional dissimilarity."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from synemb import FormatError, SynEmbError
from synemb.corpus import EvalSet, gold_neighbours

FD_CONVENTIONS = ("similarity", "distance", "mixed")


def levenshtein(a, b) -> int:
    """Unit-cost edit distance between two sequences."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def levenshtein_complement(a, b) -> float:
    """``1 - levenshtein(a, b) / max(len(a), len(b))``; two empty sequences count as identical."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / longest


def cosine_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise SynEmbError("cosine distance is undefined for a zero vector")
    return float(1.0 - np.dot(u, v) / (nu * nv))


def cosine_similarity_matrix(embeddings) -> np.ndarray:
    X = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise SynEmbError(f"zero embedding vector at row {int(np.flatnonzero(norms == 0)[0])}")
    Xn = X / norms[:, None]
    S = Xn @ Xn.T
    S = 0.5 * (S + S.T)
    np.fill_diagonal(S, 1.0)
    return S


def rank_neighbours(embeddings) -> np.ndarray:
    """Row i lists every j != i by ascending cosine distance, ties by ascending index."""
    D = 1.0 - cosine_similarity_matrix(embeddings)
    n = D.shape[0]
    np.fill_diagonal(D, np.inf)
    order = np.argsort(D, axis=1, kind="stable")
    return order[:, : n - 1]


@dataclass
class KnnResult:
    accuracy: float
    scores: np.ndarray  # per included item; NaN where excluded
    excluded: int


def knn_accuracy(embeddings, gold, k: int) -> KnnResult:
    """Mean over items of ``|N(i, k) & gold(i)| / k``.

    ``gold`` is a list of same-group index arrays (see
    :func:`synemb.corpus.gold_neighbours`) or a flat sequence of group ids.
    Items whose gold set has fewer than ``k`` members are excluded and counted.
    """
    if k < 1:
        raise SynEmbError(f"k must be >= 1, got {k}")
    n = len(embeddings)
    if n < k + 1:
        raise SynEmbError(f"need at least {k + 1} items for {k}-NN, got {n}")
    if len(gold) and np.ndim(gold[0]) == 0:
        gold = gold_neighbours(gold)
    if len(gold) != n:
        raise SynEmbError(f"{len(gold)} gold sets for {n} embeddings")
    order = rank_neighbours(embeddings)[:, :k]
    scores = np.full(n, np.nan)
    excluded = 0
    for i in range(n):
        members = gold[i]
        if len(members) < k:
            excluded += 1
            continue
        scores[i] = np.isin(order[i], members).sum() / k
    included = scores[~np.isnan(scores)]
    if included.size == 0:
        raise SynEmbError(f"no item has at least {k} gold neighbours")
    return KnnResult(float(included.mean()), scores, excluded)


def levenshtein_matrix(upos_seqs) -> np.ndarray:
    seqs = [tuple(s) for s in upos_seqs]
    n = len(seqs)
    L = np.eye(n)
    memo: dict = {}
    for i in range(n):
        for j in range(i + 1, n):
            key = (seqs[i], seqs[j])
            if key not in memo:
                memo[key] = memo[(seqs[j], seqs[i])] = levenshtein_complement(seqs[i], seqs[j])
            L[i, j] = L[j, i] = memo[key]
    return L


def min_max(M: np.ndarray) -> np.ndarray:
    lo, hi = M.min(), M.max()
    # identical vectors give cosines a few ulps below 1, so compare with a rounding margin
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        raise SynEmbError("degenerate similarity matrix: all entries are equal")
    return (M - lo) / (hi - lo)


@dataclass
class SimilarityMatrices:
    L: np.ndarray
    S_hat: np.ndarray

    @property
    def n(self) -> int:
        return self.L.shape[0]


def similarity_matrices(upos_seqs, embeddings, convention: str = "similarity", L=None) -> SimilarityMatrices:
    """Build the UPOS-side matrix and the min-max normalized embedding-side matrix.

    ``similarity``: Levenshtein complement vs normalized cosine similarity.
    ``distance``: normalized Levenshtein distance vs normalized cosine distance.
    ``mixed``: Levenshtein complement vs normalized cosine distance.
    """
    if convention not in FD_CONVENTIONS:
        raise SynEmbError(f"unknown convention {convention!r}; choose from {FD_CONVENTIONS}")
    n = len(upos_seqs)
    if n != len(embeddings):
        raise SynEmbError(f"{n} UPOS sequences but {len(embeddings)} embeddings")
    if n < 2:
        raise SynEmbError(f"functional dissimilarity needs n >= 2, got {n}")
    if L is None:
        L = levenshtein_matrix(upos_seqs)
    S = cosine_similarity_matrix(embeddings)
    if convention == "similarity":
        return SimilarityMatrices(L, min_max(S))
    if convention == "distance":
        return SimilarityMatrices(1.0 - L, min_max(1.0 - S))
    return SimilarityMatrices(L, min_max(1.0 - S))


def functional_dissimilarity(upos_seqs, embeddings, convention: str = "similarity", L=None) -> float:
    """``||L - S_hat||_F / n`` (lower is better)."""
    m = similarity_matrices(upos_seqs, embeddings, convention, L)
    return float(np.linalg.norm(m.L - m.S_hat) / m.n)


# ---------------------------------------------------------------- external embeddings

def load_external_embeddings(path) -> list[tuple[str, np.ndarray]]:
    """Rows of ``<id><TAB>v1 v2 ... vd``."""
    rows: list[tuple[str, np.ndarray]] = []
    dim = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            sid, sep, values = line.partition("\t")
            if not sep:
                raise FormatError(f"{path}: row {lineno}: missing tab between id and vector")
            try:
                vec = np.array([float(x) for x in values.split()], dtype=np.float64)
            except ValueError as e:
                raise FormatError(f"{path}: row {lineno}: {e}") from None
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise FormatError(f"row {lineno}: dim {vec.size} ≠ {dim}")
            rows.append((sid, vec))
    if not rows:
        raise FormatError(f"{path}: no vectors")
    return rows


def write_embeddings(path, ids, vectors) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for sid, vec in zip(ids, vectors):
            f.write(f"{sid}\t{' '.join(repr(float(x)) for x in vec)}\n")


def align_embeddings(rows, ids) -> np.ndarray:
    """Order external rows to match ``ids``; raises on the first id mismatch."""
    table = dict(rows)
    if len(table) != len(rows):
        raise FormatError("duplicate sentence ids in embedding file")
    for sid in ids:
        if sid not in table:
            raise FormatError(f"sentence id {sid!r} has no embedding row")
    extra = [sid for sid, _ in rows if sid not in set(ids)]
    if extra:
        raise FormatError(f"embedding id {extra[0]!r} does not match any sentence")
    return np.stack([table[sid] for sid in ids])


# ---------------------------------------------------------------- reports

@dataclass
class LanguageScores:
    lang: str
    total: int
    groups: int
    knn: dict[int, float] = field(default_factory=dict)
    excluded: dict[int, int] = field(default_factory=dict)


@dataclass
class NeighbourReport:
    languages: list[LanguageScores]

    def to_json(self) -> str:
        return json.dumps({"languages": [asdict(s) for s in self.languages]}, indent=2, sort_keys=True)

    def to_text(self) -> str:
        ks = sorted({k for s in self.languages for k in s.knn})
        head = "/".join(f"{k}-NN" for k in ks)
        lines = [f"{'lang':<6}{head:>16}{'Total/Groups':>16}"]
        for s in self.languages:
            acc = "/".join(f"{100 * s.knn[k]:.2f}" for k in ks)
            lines.append(f"{s.lang:<6}{acc:>16}{f'{s.total}/{s.groups}':>16}")
        return "\n".join(lines) + "\n"


def neighbour_report(eval_set: EvalSet, embeddings, ks=(1, 5)) -> NeighbourReport:
    """Per-language k-NN accuracies; neighbours are searched within each language only."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if len(embeddings) != len(eval_set):
        raise SynEmbError(f"{len(embeddings)} embeddings for {len(eval_set)} sentences")
    langs = np.array([s.lang for s in eval_set.sentences])
    gids = eval_set.group_ids()
    out = []
    for lang in eval_set.languages():
        sel = np.flatnonzero(langs == lang)
        scores = LanguageScores(lang, len(sel), len(set(gids[sel].tolist())))
        for k in ks:
            res = knn_accuracy(embeddings[sel], gids[sel], k)
            scores.knn[k] = res.accuracy
            scores.excluded[k] = res.excluded
        out.append(scores)
    return NeighbourReport(out)
