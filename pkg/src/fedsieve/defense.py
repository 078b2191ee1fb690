"""Server-side anomalous-client screening.

Given every client's freshly trained weights and the previous global
weights, the screen (1) projects the per-client FC-weight deltas to 2-D
with PCA, (2) groups the projections by complete-linkage agglomerative
clustering under a data-driven distance threshold, and (3) flags whole
clusters in which at least half the members' update directions disagree
with the global weights (cosine similarity non-positive or below the
mean of all similarities).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import RejectedInputError

logger = logging.getLogger(__name__)

THRESHOLD_FLOOR = 1e-9
_NORM_EPS = 1e-12


class TooFewClientsError(RejectedInputError):
    """Fewer than two clients: the screen cannot run."""


@dataclass(frozen=True)
class DefenseConfig:
    # Whether the cosine stage compares weight deltas (default) or the raw
    # local weights against the previous global weights.
    cosine_on_deltas: bool = True
    # Same choice for the dot products feeding the clustering threshold.
    threshold_on_deltas: bool = True
    linkage: str = "complete"
    metric: str = "L2"


@dataclass
class ClusterAssignment:
    labels: dict[int, int]  # client id -> dense cluster index
    threshold_used: float
    linkage: str = "complete"
    metric: str = "L2"

    def clusters(self) -> list[list[int]]:
        m = max(self.labels.values()) + 1 if self.labels else 0
        out: list[list[int]] = [[] for _ in range(m)]
        for cid, c in self.labels.items():
            out[c].append(cid)
        return out


@dataclass
class AbcDiagnostics:
    """Per-run record of everything the screen looked at."""

    threshold: float
    client_ids: list[int]
    pca_coords: dict[int, tuple[float, float]]
    cluster_labels: dict[int, int]
    similarities: dict[int, float]
    clipped_similarities: dict[int, float]  # max(0, s); informational only
    flagged: list[int]
    n_clusters: int

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "n_clusters": self.n_clusters,
            "flagged": sorted(self.flagged),
            "clients": [
                {
                    "id": cid,
                    "pca": list(self.pca_coords[cid]),
                    "cluster": self.cluster_labels[cid],
                    "similarity": self.similarities[cid],
                    "clipped_similarity": self.clipped_similarities[cid],
                    "flagged": cid in set(self.flagged),
                }
                for cid in self.client_ids
            ],
        }


@dataclass
class AbcResult:
    flagged: set[int]
    diagnostics: AbcDiagnostics | None


# ---------------------------------------------------------------------------
# stages


def pca_2d(deltas: np.ndarray) -> np.ndarray:
    """Rows mean-centered and projected onto the top-2 principal directions."""
    deltas = np.asarray(deltas, dtype=float)
    if deltas.ndim != 2 or deltas.shape[0] < 2:
        raise TooFewClientsError(f"PCA needs at least 2 rows, got shape {deltas.shape}")
    if deltas.shape[1] < 2:
        raise RejectedInputError(f"PCA needs at least 2 features, got shape {deltas.shape}")
    centered = deltas - deltas.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:2].T


def distance_threshold(local_vectors: np.ndarray, global_vector: np.ndarray,
                       floor: float = THRESHOLD_FLOOR) -> float:
    """mean(dots) - population std(dots), floored to stay positive, where
    dots are the inner products of each row with the global vector."""
    dots = np.asarray(local_vectors, dtype=float) @ np.asarray(global_vector, dtype=float)
    return max(float(dots.mean() - dots.std()), floor)


def _pairwise_distances(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def agglomerative_cluster(points: np.ndarray, threshold: float,
                          client_ids: list[int] | None = None) -> ClusterAssignment:
    """Complete-linkage agglomerative clustering over Euclidean distance.

    Pairs keep merging while the smallest complete-linkage distance is
    <= threshold; the cluster count is emergent.  Uses the Lance-Williams
    update d(i+j, k) = max(d(i,k), d(j,k)).
    """
    points = np.asarray(points, dtype=float)
    if threshold <= 0:
        raise RejectedInputError(f"distance threshold must be positive, got {threshold}")
    n = points.shape[0]
    if client_ids is None:
        client_ids = list(range(n))

    dist = _pairwise_distances(points)
    np.fill_diagonal(dist, np.inf)
    active = np.ones(n, dtype=bool)
    members: list[list[int]] = [[i] for i in range(n)]
    while active.sum() > 1:
        masked = np.where(active[:, None] & active[None, :], dist, np.inf)
        i, j = np.unravel_index(np.argmin(masked), masked.shape)
        if masked[i, j] > threshold:
            break
        i, j = min(i, j), max(i, j)
        dist[i, :] = np.maximum(dist[i, :], dist[j, :])
        dist[:, i] = dist[i, :]
        dist[i, i] = np.inf
        active[j] = False
        members[i].extend(members[j])

    # Dense labels ordered by each cluster's smallest member index.
    clusters = sorted((members[i] for i in range(n) if active[i]), key=min)
    labels = {}
    for idx, cluster in enumerate(clusters):
        for pos in cluster:
            labels[client_ids[pos]] = idx
    return ClusterAssignment(labels=labels, threshold_used=float(threshold))


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """<a, b> / (|a||b|); 0.0 when either norm is (near) zero."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < _NORM_EPS or nb < _NORM_EPS:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def classify_clusters(assignment: ClusterAssignment, sims: dict[int, float]) -> set[int]:
    """Flag every cluster where at least half the members look suspicious.

    A member is suspicious when its similarity is <= 0 or <= the mean of
    all similarities.  The half test is exact on integers (2*count >= size).
    If every similarity is identical the mean test would flag everyone, so
    that degenerate case flags nothing.
    """
    missing = [cid for cid in assignment.labels if cid not in sims]
    if missing:
        raise RejectedInputError(f"no similarity recorded for assigned clients {missing}")
    values = np.array([sims[cid] for cid in assignment.labels])
    if values.size and np.all(values == values.flat[0]):
        return set()
    mean = float(values.mean())
    flagged: set[int] = set()
    for cluster in assignment.clusters():
        count = sum(1 for cid in cluster if sims[cid] <= 0 or sims[cid] <= mean)
        if 2 * count >= len(cluster):
            flagged.update(cluster)
    return flagged


# ---------------------------------------------------------------------------
# full pipeline


def run_abc(clients_weights: list[tuple[int, nn.ModelParams]],
            w_global_prev: nn.ModelParams,
            detected_prev: set[int],
            model_config: nn.ModelConfig,
            config: DefenseConfig = DefenseConfig()) -> AbcResult:
    """Run the full screen; on fewer than two clients the previous
    detected set is kept unchanged and no diagnostics are produced."""
    if len(clients_weights) < 2:
        logger.warning("screen skipped: %d client(s) submitted", len(clients_weights))
        return AbcResult(set(detected_prev), None)

    ids = [cid for cid, _ in clients_weights]
    global_vec = nn.fc_slice(w_global_prev, model_config)
    local_vecs = np.stack([nn.fc_slice(p, model_config) for _, p in clients_weights])
    deltas = local_vecs - global_vec

    coords = pca_2d(deltas)
    threshold_input = deltas if config.threshold_on_deltas else local_vecs
    threshold = distance_threshold(threshold_input, global_vec)
    assignment = agglomerative_cluster(coords, threshold, client_ids=ids)

    cosine_input = deltas if config.cosine_on_deltas else local_vecs
    sims = {cid: cosine_similarity(cosine_input[k], global_vec)
            for k, cid in enumerate(ids)}
    flagged = classify_clusters(assignment, sims)

    diagnostics = AbcDiagnostics(
        threshold=threshold,
        client_ids=list(ids),
        pca_coords={cid: (float(coords[k, 0]), float(coords[k, 1]))
                    for k, cid in enumerate(ids)},
        cluster_labels=dict(assignment.labels),
        similarities=dict(sims),
        clipped_similarities={cid: max(0.0, s) for cid, s in sims.items()},
        flagged=sorted(flagged),
        n_clusters=len(assignment.clusters()),
    )
    return AbcResult(flagged, diagnostics)


def abc_module(clients_weights: list[tuple[int, nn.ModelParams]],
               w_global_prev: nn.ModelParams,
               detected_prev: set[int],
               model_config: nn.ModelConfig,
               config: DefenseConfig = DefenseConfig()) -> set[int]:
    """Flagged client ids for one screening pass (see :func:`run_abc`)."""
    return run_abc(clients_weights, w_global_prev, detected_prev, model_config, config).flagged
