"""Distance matrices, CMC / mAP under the cross-camera protocol, and
k-reciprocal re-ranking post-processing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

METRICS = ("euclidean", "squared_euclidean", "cosine")


def distance_matrix(Q, G, metric="euclidean"):
    Q = np.asarray(Q, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if Q.ndim != 2 or G.ndim != 2 or Q.shape[1] != G.shape[1]:
        raise ValueError(f"distance_matrix: incompatible shapes {Q.shape} and {G.shape}")
    if metric not in METRICS:
        raise ValueError(f"distance_matrix: metric must be one of {METRICS}, got {metric!r}")
    if metric == "cosine":
        qn = np.linalg.norm(Q, axis=1)
        gn = np.linalg.norm(G, axis=1)
        if np.any(qn == 0) or np.any(gn == 0):
            raise ValueError("distance_matrix: zero vector under cosine metric")
        return 1.0 - (Q / qn[:, None]) @ (G / gn[:, None]).T
    sq = np.sum(Q * Q, axis=1)[:, None] + np.sum(G * G, axis=1)[None, :] - 2.0 * Q @ G.T
    sq = np.maximum(sq, 0.0)
    return sq if metric == "squared_euclidean" else np.sqrt(sq)


def _ranked_matches(dist_row, q_id, q_cam, g_ids, g_cams):
    """Gallery match flags in rank order after cross-camera filtering.

    Gallery entries sharing both identity and camera with the query are
    excluded; ties in distance break by gallery index (stable sort).
    """
    keep = ~((g_ids == q_id) & (g_cams == q_cam))
    idx = np.nonzero(keep)[0]
    order = idx[np.argsort(dist_row[idx], kind="stable")]
    return g_ids[order] == q_id


def cmc(dist, q_ids, q_cams, g_ids, g_cams, topk=(1, 5, 10, 20)):
    """CMC curve values at the requested ranks.

    Returns (dict rank -> value, num_evaluated, num_excluded); queries with
    no valid positive after filtering are excluded from the average.
    """
    dist = np.asarray(dist)
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    hits = np.zeros(len(topk))
    evaluated = 0
    excluded = 0
    for qi in range(dist.shape[0]):
        matches = _ranked_matches(dist[qi], q_ids[qi], q_cams[qi], g_ids, g_cams)
        if not matches.any():
            excluded += 1
            continue
        first = int(np.argmax(matches))
        evaluated += 1
        for j, k in enumerate(topk):
            if first < k:
                hits[j] += 1
    curve = {int(k): (hits[j] / evaluated if evaluated else 0.0) for j, k in enumerate(topk)}
    return curve, evaluated, excluded


def mean_ap(dist, q_ids, q_cams, g_ids, g_cams):
    """Mean average precision over the filtered rankings.

    AP per query is the mean, over its positives, of precision at each
    positive's rank.  Returns (mAP, num_evaluated, num_excluded).
    """
    dist = np.asarray(dist)
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    aps = []
    excluded = 0
    for qi in range(dist.shape[0]):
        matches = _ranked_matches(dist[qi], q_ids[qi], q_cams[qi], g_ids, g_cams)
        if not matches.any():
            excluded += 1
            continue
        ranks = np.nonzero(matches)[0]
        precisions = (np.arange(len(ranks)) + 1.0) / (ranks + 1.0)
        aps.append(precisions.mean())
    return (float(np.mean(aps)) if aps else 0.0), len(aps), excluded


@dataclass
class MetricsReport:
    mAP: float
    cmc: dict
    num_queries: int
    excluded_queries: int

    def to_json_dict(self):
        return {
            "mAP": self.mAP,
            "cmc": {str(k): v for k, v in self.cmc.items()},
            "num_queries": self.num_queries,
            "excluded_queries": self.excluded_queries,
        }


def evaluate_ranking(q_feats, g_feats, q_ids, q_cams, g_ids, g_cams,
                     metric="euclidean", topk=(1, 5, 10, 20), dist=None) -> MetricsReport:
    if dist is None:
        dist = distance_matrix(q_feats, g_feats, metric)
    curve, evaluated, excluded = cmc(dist, q_ids, q_cams, g_ids, g_cams, topk)
    m_ap, _, _ = mean_ap(dist, q_ids, q_cams, g_ids, g_cams)
    return MetricsReport(mAP=m_ap, cmc=curve, num_queries=evaluated, excluded_queries=excluded)


# ---------------------------------------------------------------------------
# k-reciprocal re-ranking
# ---------------------------------------------------------------------------


def _k_reciprocal_neighbors(rank, i, k):
    forward = rank[i, : k + 1]
    backward = rank[forward, : k + 1]
    return forward[np.any(backward == i, axis=1)]


def k_reciprocal_rerank(dist_qg, q_feats, g_feats, k1=20, k2=6, lam=0.3):
    """Blend the original query-gallery distances with Jaccard distances over
    k-reciprocal neighbor sets: final = lam * original + (1 - lam) * jaccard.

    Deterministic; lam = 1 returns the original matrix exactly.
    """
    if not (k1 > k2 >= 1):
        raise ValueError(f"k_reciprocal_rerank: need k1 > k2 >= 1, got k1={k1}, k2={k2}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"k_reciprocal_rerank: lambda must lie in [0, 1], got {lam}")
    q_feats = np.asarray(q_feats, dtype=np.float64)
    g_feats = np.asarray(g_feats, dtype=np.float64)
    dist_qg = np.asarray(dist_qg, dtype=np.float64)
    nq, ng = q_feats.shape[0], g_feats.shape[0]
    if k1 >= ng:
        raise ValueError(f"k_reciprocal_rerank: k1={k1} must be smaller than gallery size {ng}")
    if lam == 1.0:
        return dist_qg.copy()

    feats = np.vstack([q_feats, g_feats])
    n = nq + ng
    dist = distance_matrix(feats, feats, "squared_euclidean")
    dist = dist / np.maximum(dist.max(axis=0), 1e-12)[None, :]
    dist = dist.T
    rank = np.argsort(dist, axis=1, kind="stable")

    V = np.zeros((n, n))
    for i in range(n):
        neighbors = _k_reciprocal_neighbors(rank, i, k1)
        expansion = neighbors
        for cand in neighbors:
            cand_neighbors = _k_reciprocal_neighbors(rank, cand, int(round(k1 / 2)))
            if len(np.intersect1d(cand_neighbors, neighbors)) > (2.0 / 3.0) * len(cand_neighbors):
                expansion = np.concatenate([expansion, cand_neighbors])
        expansion = np.unique(expansion)
        weights = np.exp(-dist[i, expansion])
        V[i, expansion] = weights / weights.sum()

    if k2 > 1:
        V = np.stack([V[rank[i, :k2]].mean(axis=0) for i in range(n)])

    inv_index = [np.nonzero(V[:, j])[0] for j in range(n)]
    jaccard = np.zeros((nq, n))
    for i in range(nq):
        temp_min = np.zeros(n)
        nz = np.nonzero(V[i])[0]
        for j in nz:
            rows = inv_index[j]
            temp_min[rows] += np.minimum(V[i, j], V[rows, j])
        jaccard[i] = 1.0 - temp_min / (2.0 - temp_min)

    return lam * dist_qg + (1.0 - lam) * jaccard[:, nq:]
