"""Environment-affordance memory.

Training observations are clustered into activity-centric zones (k-means on
unit-normalised embeddings). Each zone keeps noun/verb count histograms and
an averaged narration bag-of-words. A novel video is matched against the
zones by a blend of visual and narrative cosine similarity; the top-K
zones' counts, weighted by a softmax over similarity, give noun and verb
affordance distributions that refine the model's class probabilities.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff.serialize import load_tensor, save_tensor
from .errors import ConfigurationError, DimensionError, ValidationError

BOW_DIM = 256
SMOOTHING = 1e-8
DB_FORMAT_VERSION = 1

SparseVec = Dict[int, float]


@dataclass
class AffordanceConfig:
    enabled: bool = False
    num_zones: int = 8
    top_k: int = 5
    tau: float = 0.1
    beta: float = 0.5
    lam: float = 0.5
    iterations: int = 50
    seed: int = 7
    bow_dim: int = BOW_DIM

    def validate(self) -> None:
        if self.num_zones < 1 or self.top_k < 1:
            raise ConfigurationError("num_zones and top_k must be >= 1")
        if self.tau <= 0:
            raise ConfigurationError("tau must be positive")
        if not 0.0 <= self.beta <= 1.0 or not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError("beta and lam must lie in [0, 1]")


@dataclass
class ZoneRecord:
    zone_id: int
    embedding: np.ndarray
    noun_counts: np.ndarray
    verb_counts: np.ndarray
    narration_bow: SparseVec = field(default_factory=dict)


@dataclass
class AffordanceDistribution:
    noun_probs: np.ndarray
    verb_probs: np.ndarray
    support_zone_ids: List[int]
    weights: List[float]


@dataclass
class AffordanceSample:
    embedding: np.ndarray
    noun: int
    verb: int
    narration: List[str] = field(default_factory=list)


# ----------------------------------------------------------------------
# bag of words

def hash_token(token: str, dim: int = BOW_DIM) -> int:
    return zlib.crc32(token.lower().encode("utf-8")) % dim


def bag_of_words(tokens: Sequence[str], dim: int = BOW_DIM) -> SparseVec:
    """Hashed, L2-normalised term counts; empty input gives the empty vector."""
    counts: Dict[int, float] = {}
    for tok in tokens:
        idx = hash_token(tok, dim)
        counts[idx] = counts.get(idx, 0.0) + 1.0
    return _normalize_sparse(counts)


def _normalize_sparse(vec: SparseVec) -> SparseVec:
    norm = np.sqrt(sum(v * v for v in vec.values()))
    if norm == 0:
        return {}
    return {k: vec[k] / norm for k in sorted(vec)}


def sparse_cosine(a: SparseVec, b: SparseVec) -> float:
    if not a or not b:
        return 0.0
    if len(b) < len(a):
        a, b = b, a
    dot = sum(v * b.get(k, 0.0) for k, v in a.items())
    na = np.sqrt(sum(v * v for v in a.values()))
    nb = np.sqrt(sum(v * v for v in b.values()))
    return float(dot / (na * nb))


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValidationError("zero-norm embedding")
    return v / norm


# ----------------------------------------------------------------------
# clustering

def kmeans(points: np.ndarray, k: int, seed: int, iterations: int = 50) -> Tuple[np.ndarray, np.ndarray]:
    """Lloyd's k-means with seeded init; an empty cluster is reseeded to the
    point farthest from its current centroid.

    Returns ``(centroids [k, d], assignment [n])``.
    """
    n = len(points)
    if k > n:
        raise ConfigurationError(f"num_zones={k} exceeds number of samples {n}")
    rng = np.random.default_rng(seed)
    centroids = points[np.sort(rng.choice(n, size=k, replace=False))].copy()
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iterations):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
        assign = d2.argmin(axis=1)
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = points[members].mean(axis=0)
            else:
                far = int(d2[np.arange(n), assign].argmax())
                centroids[j] = points[far]
                assign[far] = j
                d2[far, :] = 0.0
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    return centroids, d2.argmin(axis=1)


def build_database(samples: Sequence[AffordanceSample], num_nouns: int, num_verbs: int,
                   cfg: AffordanceConfig) -> List[ZoneRecord]:
    cfg.validate()
    if not samples:
        raise ValidationError("affordance database needs at least one sample")
    widths = {np.asarray(s.embedding).shape for s in samples}
    if len(widths) != 1:
        raise DimensionError(f"embeddings have differing widths {sorted(widths)}")
    points = np.stack([_unit(s.embedding) for s in samples])
    centroids, assign = kmeans(points, cfg.num_zones, cfg.seed, cfg.iterations)
    zones = []
    for j in range(cfg.num_zones):
        members = [s for s, a in zip(samples, assign) if a == j]
        nouns = np.zeros(num_nouns, dtype=np.int64)
        verbs = np.zeros(num_verbs, dtype=np.int64)
        bow: Dict[int, float] = {}
        for s in members:
            if not (0 <= s.noun < num_nouns and 0 <= s.verb < num_verbs):
                raise ValidationError(f"class ids ({s.noun}, {s.verb}) out of vocabulary")
            nouns[s.noun] += 1
            verbs[s.verb] += 1
            for k, v in bag_of_words(s.narration, cfg.bow_dim).items():
                bow[k] = bow.get(k, 0.0) + v / len(members)
        if not members:
            continue  # only when the final reassignment empties a zone
        zones.append(ZoneRecord(j, _unit(centroids[j]), nouns, verbs, _normalize_sparse(bow)))
    return zones


# ----------------------------------------------------------------------
# retrieval and refinement

def zone_similarities(query_embedding: np.ndarray, query_bow: SparseVec,
                      db: Sequence[ZoneRecord], beta: float) -> np.ndarray:
    q = np.asarray(query_embedding, dtype=np.float64)
    if q.shape != db[0].embedding.shape:
        raise DimensionError(f"query width {q.shape} vs zone width {db[0].embedding.shape}")
    q = _unit(q)
    if not query_bow:
        beta = 1.0
    sims = []
    for z in db:
        visual = float(q @ z.embedding)
        narrative = sparse_cosine(query_bow, z.narration_bow)
        sims.append(beta * visual + (1.0 - beta) * narrative)
    return np.array(sims)


def query_affordances(query_embedding: np.ndarray, query_bow: Optional[SparseVec],
                      db: Sequence[ZoneRecord], cfg: AffordanceConfig) -> AffordanceDistribution:
    if not db:
        raise ValidationError("empty affordance database")
    sims = zone_similarities(query_embedding, query_bow or {}, db, cfg.beta)
    k = min(cfg.top_k, len(db))
    ids = np.array([z.zone_id for z in db])
    order = np.lexsort((ids, -sims))[:k]
    logits = sims[order] / cfg.tau
    w = np.exp(logits - logits.max())
    w /= w.sum()
    nouns = sum(wi * db[i].noun_counts for wi, i in zip(w, order))
    verbs = sum(wi * db[i].verb_counts for wi, i in zip(w, order))
    return AffordanceDistribution(
        _normalize_counts(np.asarray(nouns, dtype=np.float64)),
        _normalize_counts(np.asarray(verbs, dtype=np.float64)),
        [int(ids[i]) for i in order],
        [float(x) for x in w],
    )


def _normalize_counts(c: np.ndarray) -> np.ndarray:
    total = c.sum()
    if total <= 0:
        return np.full(len(c), 1.0 / len(c))
    return c / total


def refine_probs(model_probs: np.ndarray, aff_probs: np.ndarray, lam: float) -> np.ndarray:
    """Log-linear blend ``p ∝ model^(1-lam) * (aff + eps)^lam``, renormalised."""
    p = np.asarray(model_probs, dtype=np.float64)
    a = np.asarray(aff_probs, dtype=np.float64)
    if p.shape != a.shape:
        raise DimensionError(f"refine_probs: model {p.shape} vs affordance {a.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return p / p.sum()
    with np.errstate(divide="ignore"):
        logit = (1.0 - lam) * np.log(p) + lam * np.log(a + SMOOTHING)
    logit -= logit.max()
    out = np.exp(logit)
    return out / out.sum()


def refine_predictions(preds, dist: AffordanceDistribution, lam: float):
    return [
        p.replace(noun_probs=refine_probs(p.noun_probs, dist.noun_probs, lam),
                  verb_probs=refine_probs(p.verb_probs, dist.verb_probs, lam))
        for p in preds
    ]


# ----------------------------------------------------------------------
# persistence: <dir>/manifest.json + <dir>/embeddings.stat

def save_database(db: Sequence[ZoneRecord], path: Union[str, Path], cfg: AffordanceConfig,
                  num_nouns: int, num_verbs: int) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": DB_FORMAT_VERSION,
        "num_nouns": num_nouns,
        "num_verbs": num_verbs,
        "config": asdict(cfg),
        "zones": [
            {
                "zone_id": z.zone_id,
                "noun_counts": [int(c) for c in z.noun_counts],
                "verb_counts": [int(c) for c in z.verb_counts],
                "narration_bow": [[int(k), float(v)] for k, v in sorted(z.narration_bow.items())],
            }
            for z in db
        ],
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    save_tensor(path / "embeddings.stat", np.stack([z.embedding for z in db]).astype(np.float64))


def load_database(path: Union[str, Path]):
    """Returns ``(zones, config, num_nouns, num_verbs)``."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != DB_FORMAT_VERSION:
        raise ValidationError(f"unsupported affordance db version {manifest.get('format_version')}")
    emb = load_tensor(path / "embeddings.stat")
    if len(emb) != len(manifest["zones"]):
        raise ValidationError("embedding blob does not match zone list")
    zones = [
        ZoneRecord(
            zone_id=int(z["zone_id"]),
            embedding=emb[i].copy(),
            noun_counts=np.array(z["noun_counts"], dtype=np.int64),
            verb_counts=np.array(z["verb_counts"], dtype=np.int64),
            narration_bow={int(k): float(v) for k, v in z["narration_bow"]},
        )
        for i, z in enumerate(manifest["zones"])
    ]
    return zones, AffordanceConfig(**manifest["config"]), manifest["num_nouns"], manifest["num_verbs"]


def samples_to_json(samples: Sequence[AffordanceSample]) -> list:
    return [{"embedding": [float(v) for v in s.embedding], "noun": int(s.noun), "verb": int(s.verb),
             "narration": list(s.narration)} for s in samples]


def samples_from_json(items: list) -> List[AffordanceSample]:
    return [AffordanceSample(np.asarray(it["embedding"], dtype=np.float64), int(it["noun"]),
                             int(it["verb"]), list(it.get("narration", []))) for it in items]
