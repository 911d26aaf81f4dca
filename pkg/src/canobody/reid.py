"""Identity matching and retrieval metrics.

Matching runs on the encoder's identity code alone: cosine similarity
of L2-normalized vectors ranks the gallery per query. Reported metrics
are the cumulative match curve (fraction of queries whose first correct
hit appears within rank r) and mean average precision (precision@k
averaged over the ranks of true positives, then over queries). Score
matrices from different feature sources fuse by summation, optionally
after per-matrix standardization.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ppm, render, skinning
from .encoder import ImageEncoder
from .synth import load_manifest

FEAT_MAGIC = b"IAKFEAT1"
_ROLES = {"query": 0, "gallery": 1}
_ROLE_NAMES = {v: k for k, v in _ROLES.items()}


@dataclass
class FeatureSet:
    rec_ids: np.ndarray    # [N] u32
    subjects: np.ndarray   # [N] u32
    outfits: np.ndarray    # [N] u32
    roles: np.ndarray      # [N] str 'query'/'gallery'
    vectors: np.ndarray    # [N, D] f32

    def __len__(self):
        return len(self.rec_ids)

    def subset(self, mask: np.ndarray) -> "FeatureSet":
        return FeatureSet(self.rec_ids[mask], self.subjects[mask], self.outfits[mask],
                          self.roles[mask], self.vectors[mask])

    @property
    def queries(self) -> "FeatureSet":
        return self.subset(self.roles == "query")

    @property
    def gallery(self) -> "FeatureSet":
        return self.subset(self.roles == "gallery")

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(FEAT_MAGIC)
            fh.write(struct.pack("<II", len(self), self.vectors.shape[1]))
            for i in range(len(self)):
                fh.write(struct.pack("<IIIB", int(self.rec_ids[i]), int(self.subjects[i]),
                                     int(self.outfits[i]), _ROLES[str(self.roles[i])]))
                fh.write(self.vectors[i].astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "FeatureSet":
        raw = Path(path).read_bytes()
        if raw[:8] != FEAT_MAGIC:
            raise ValueError(f"{path}: not a feature file")
        n, dim = struct.unpack_from("<II", raw, 8)
        off = 16
        rec_ids = np.zeros(n, dtype=np.uint32)
        subjects = np.zeros(n, dtype=np.uint32)
        outfits = np.zeros(n, dtype=np.uint32)
        roles = np.empty(n, dtype=object)
        vectors = np.zeros((n, dim), dtype=np.float32)
        for i in range(n):
            rid, sub, out, role = struct.unpack_from("<IIIB", raw, off)
            off += 13
            rec_ids[i] = rid
            subjects[i] = sub
            outfits[i] = out
            roles[i] = _ROLE_NAMES[role]
            vectors[i] = np.frombuffer(raw, dtype="<f4", count=dim, offset=off)
            off += dim * 4
        return cls(rec_ids, subjects, outfits, np.asarray(roles), vectors)


@dataclass
class ScoreMatrix:
    scores: np.ndarray       # [Q, G]
    query_ids: np.ndarray
    gallery_ids: np.ndarray

    def save(self, path):
        Path(path).write_text(json.dumps({
            "query_ids": self.query_ids.tolist(),
            "gallery_ids": self.gallery_ids.tolist(),
            "scores": self.scores.tolist()}, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ScoreMatrix":
        d = json.loads(Path(path).read_text())
        return cls(scores=np.asarray(d["scores"], dtype=np.float64),
                   query_ids=np.asarray(d["query_ids"], dtype=np.int64),
                   gallery_ids=np.asarray(d["gallery_ids"], dtype=np.int64))


@dataclass
class EvalReport:
    cmc: np.ndarray
    map_score: float
    per_query_ap: list[float]
    protocol: str
    n_queries: int
    n_excluded: int

    def to_json_dict(self) -> dict:
        return {"protocol": self.protocol, "cmc": [float(v) for v in self.cmc],
                "mAP": float(self.map_score),
                "per_query_ap": [float(v) for v in self.per_query_ap],
                "n_queries": self.n_queries, "n_excluded": self.n_excluded}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json_dict(), sort_keys=True, indent=1))


def _normalize_rows(vecs: np.ndarray, who: FeatureSet | None = None) -> np.ndarray:
    norms = np.linalg.norm(vecs, axis=1)
    bad = norms < 1e-12
    if bad.any():
        which = int(np.nonzero(bad)[0][0])
        rid = int(who.rec_ids[which]) if who is not None else which
        raise ValueError(f"zero feature vector for record {rid}")
    return vecs / norms[:, None]


def cosine_scores(queries: FeatureSet, gallery: FeatureSet) -> ScoreMatrix:
    if queries.vectors.shape[1] != gallery.vectors.shape[1]:
        raise ValueError("query/gallery feature dimensions differ")
    q = _normalize_rows(queries.vectors.astype(np.float64), queries)
    g = _normalize_rows(gallery.vectors.astype(np.float64), gallery)
    return ScoreMatrix(scores=q @ g.T, query_ids=queries.rec_ids.astype(np.int64),
                       gallery_ids=gallery.rec_ids.astype(np.int64))


def fuse(a: ScoreMatrix, b: ScoreMatrix, mode: str = "sum") -> ScoreMatrix:
    if a.scores.shape != b.scores.shape:
        raise ValueError(f"score shapes differ: {a.scores.shape} vs {b.scores.shape}")
    for name, ia, ib in (("query", a.query_ids, b.query_ids),
                         ("gallery", a.gallery_ids, b.gallery_ids)):
        neq = ia != ib
        if neq.any():
            first = int(np.nonzero(neq)[0][0])
            raise ValueError(f"{name} record order differs at index {first}: "
                             f"{ia[first]} vs {ib[first]}")
    if mode == "sum":
        s = a.scores + b.scores
    elif mode == "znorm-sum":
        def z(m):
            std = m.std()
            return (m - m.mean()) / (std if std > 0 else 1.0)
        s = z(a.scores) + z(b.scores)
    else:
        raise ValueError(f"unknown fuse mode '{mode}'")
    return ScoreMatrix(scores=s, query_ids=a.query_ids, gallery_ids=a.gallery_ids)


def evaluate(scores: ScoreMatrix, q_subjects: np.ndarray, g_subjects: np.ndarray,
             protocol: str = "standard", q_outfits: np.ndarray | None = None,
             g_outfits: np.ndarray | None = None, max_rank: int = 20) -> EvalReport:
    """CMC and mAP over the ranked gallery.

    'cloth-change' keeps only queries whose outfit differs from their
    subject's gallery outfit. Ties rank by gallery record id. Queries
    with no positive under the protocol are excluded and counted.
    """
    q_subjects = np.asarray(q_subjects)
    g_subjects = np.asarray(g_subjects)
    n_q, n_g = scores.scores.shape
    keep = np.ones(n_q, dtype=bool)
    if protocol == "cloth-change":
        if q_outfits is None or g_outfits is None:
            raise ValueError("cloth-change protocol needs outfit ids")
        gal_outfit = {int(s): int(o) for s, o in zip(g_subjects, g_outfits)}
        for i in range(n_q):
            subj = int(q_subjects[i])
            if subj in gal_outfit and int(q_outfits[i]) == gal_outfit[subj]:
                keep[i] = False
    elif protocol != "standard":
        raise ValueError(f"unknown protocol '{protocol}'")

    cmc = np.zeros(max_rank)
    aps = []
    excluded = int((~keep).sum())
    for i in np.nonzero(keep)[0]:
        positives = g_subjects == q_subjects[i]
        if not positives.any():
            excluded += 1
            continue
        order = np.lexsort((scores.gallery_ids, -scores.scores[i]))
        hits = positives[order]
        ranks = np.nonzero(hits)[0]
        first = ranks[0]
        if first < max_rank:
            cmc[first:] += 1
        precision_at = np.cumsum(hits)[ranks] / (ranks + 1.0)
        aps.append(float(precision_at.mean()))
    n_eval = len(aps)
    if n_eval == 0:
        raise ValueError("no evaluable queries under the protocol")
    return EvalReport(cmc=cmc / n_eval, map_score=float(np.mean(aps)),
                      per_query_ap=aps, protocol=protocol, n_queries=n_eval,
                      n_excluded=excluded)


def evaluate_features(feats: FeatureSet, protocol: str = "standard",
                      max_rank: int = 20) -> EvalReport:
    q, g = feats.queries, feats.gallery
    scores = cosine_scores(q, g)
    return evaluate(scores, q.subjects, g.subjects, protocol=protocol,
                    q_outfits=q.outfits, g_outfits=g.outfits, max_rank=max_rank)


def extract_features(enc: ImageEncoder, data_dir, head: str = "id") -> FeatureSet:
    """One encoder pass per image; never touches skinning or rendering."""
    before = (skinning.CALL_COUNTS["canonical_correspondence"],
              render.CALL_COUNTS["render"])
    manifest = load_manifest(data_dir)
    base = Path(data_dir)
    head_idx = {"id": 0, "cloth": 1, "tex": 2}[head]
    rec_ids, subjects, outfits, roles, vectors = [], [], [], [], []
    for rec in manifest["records"]:
        img_path = base / rec["image"]
        if not img_path.exists():
            raise FileNotFoundError(f"missing image {img_path}")
        img = ppm.read_ppm(img_path)
        codes = enc.forward_np(img)
        vectors.append(codes[head_idx])
        rec_ids.append(rec["id"])
        subjects.append(rec["subject"])
        outfits.append(rec["outfit"])
        roles.append("gallery" if rec["gallery"] else "query")
    after = (skinning.CALL_COUNTS["canonical_correspondence"],
             render.CALL_COUNTS["render"])
    assert after == before, "feature extraction must not invoke 3D machinery"
    return FeatureSet(np.asarray(rec_ids, dtype=np.uint32),
                      np.asarray(subjects, dtype=np.uint32),
                      np.asarray(outfits, dtype=np.uint32),
                      np.asarray(roles, dtype=object),
                      np.stack(vectors).astype(np.float32))
