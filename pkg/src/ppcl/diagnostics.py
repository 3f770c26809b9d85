"""Key-drift instrumentation: fixed queries, per-stage key snapshots,
PCA projections for plotting, and drift statistics.

The PCA basis is refit at every stage on the concatenation of the fixed
queries and the current keys (a `fixed_basis` switch reuses the first
stage's basis instead, which makes animations smoother). Eigenvectors
come from a cyclic Jacobi sweep over the covariance matrix; at d <= 64
that is plenty accurate and keeps the module self-contained.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .errors import ContractError


def _round_robin_pairs(n_slots: int):
    """Tournament schedule: n_slots-1 rounds of disjoint index pairs."""
    players = list(range(n_slots))
    half = n_slots // 2
    for _ in range(n_slots - 1):
        yield [(players[i], players[n_slots - 1 - i]) for i in range(half)]
        players = [players[0]] + [players[-1]] + players[1:-1]


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues and eigenvectors of a symmetric matrix by parallel
    Jacobi: each round rotates a set of disjoint (p, q) pairs at once.

    Returns (values, vectors) sorted by descending eigenvalue; vectors are
    the columns.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ContractError("jacobi_eigh needs a square matrix")
    v = np.eye(n)
    scale = max(1.0, float(np.abs(a).max()))
    skip = tol * scale / max(n, 1)
    n_slots = n + (n % 2)  # pad to even; the dummy slot never rotates
    for _ in range(max_sweeps):
        off = np.sqrt((np.tril(a, -1) ** 2).sum())
        if off <= tol * scale:
            break
        for pairs in _round_robin_pairs(n_slots):
            pq = np.array([(p, q) if p < q else (q, p) for p, q in pairs if max(p, q) < n])
            ps, qs = pq[:, 0], pq[:, 1]
            apq = a[ps, qs]
            live = np.abs(apq) > skip
            if not live.any():
                continue
            ps, qs, apq = ps[live], qs[live], apq[live]
            theta = (a[qs, qs] - a[ps, ps]) / (2.0 * apq)
            t = np.where(theta == 0.0, 1.0,
                         np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0)))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            col_p, col_q = a[:, ps], a[:, qs]
            a[:, ps] = c * col_p - s * col_q
            a[:, qs] = s * col_p + c * col_q
            row_p, row_q = a[ps, :], a[qs, :]
            a[ps, :] = c[:, None] * row_p - s[:, None] * row_q
            a[qs, :] = s[:, None] * row_p + c[:, None] * row_q
            col_p, col_q = v[:, ps], v[:, qs]
            v[:, ps] = c * col_p - s * col_q
            v[:, qs] = s * col_p + c * col_q
    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return values[order], v[:, order]


@dataclass
class PcaResult:
    components: np.ndarray    # (n_components, d) orthonormal rows
    projections: np.ndarray   # (n_points, n_components)
    eigenvalues: np.ndarray
    degenerate: bool          # fewer than the requested components carried variance
    mean: np.ndarray


def pca_top3(points: np.ndarray, n_components: int = 3) -> PcaResult:
    """Leading principal components of mean-centered points.

    Rank deficiency below `n_components` is flagged rather than fatal:
    the result carries only the informative components. Component signs
    are fixed so each one's largest-magnitude entry is positive.
    """
    points = np.asarray(points, dtype=np.float64)
    n, d = points.shape
    if n < n_components + 1:
        raise ContractError(f"need at least {n_components + 1} points, got {n}")
    if d < n_components:
        raise ContractError(f"need dimension >= {n_components}, got {d}")
    mean = points.mean(axis=0)
    centered = points - mean
    cov = centered.T @ centered / (n - 1)
    values, vectors = jacobi_eigh(cov)
    cutoff = max(values[0], 0.0) * 1e-10 + 1e-30
    available = int(np.sum(values[:n_components] > cutoff))
    comps = vectors[:, :available].T.copy()
    for row in comps:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    return PcaResult(components=comps,
                     projections=centered @ comps.T,
                     eigenvalues=values[:available].copy(),
                     degenerate=available < n_components,
                     mean=mean)


@dataclass
class DriftSnapshot:
    stage: str                       # "init" or "after_task_<t>"
    keys: np.ndarray                 # deep copy of the pool's key matrix
    queries: np.ndarray              # the fixed query set
    query_tasks: np.ndarray          # task label per query row
    key_tasks: list[tuple[int, ...] | None]  # assignment per key, None when unassigned
    query_proj: np.ndarray           # (n_queries, <=3)
    key_proj: np.ndarray             # (n_keys, <=3)
    degenerate: bool


def make_snapshot(keys: np.ndarray, key_tasks: list, queries: np.ndarray,
                  query_tasks: np.ndarray, stage: str,
                  basis: PcaResult | None = None) -> DriftSnapshot:
    """Project queries + keys to 3-d; PCA is fit jointly on both unless an
    explicit basis is supplied."""
    keys = np.asarray(keys, dtype=np.float64).copy()
    queries = np.asarray(queries, dtype=np.float64)
    stacked = np.concatenate([queries, keys], axis=0)
    res = basis or pca_top3(stacked)
    proj = (stacked - res.mean) @ res.components.T
    return DriftSnapshot(stage=stage, keys=keys, queries=queries,
                         query_tasks=np.asarray(query_tasks),
                         key_tasks=key_tasks,
                         query_proj=proj[: len(queries)],
                         key_proj=proj[len(queries):],
                         degenerate=res.degenerate)


def snapshot_keys(pool, queries: np.ndarray, query_tasks: np.ndarray, stage: str,
                  basis: PcaResult | None = None) -> DriftSnapshot:
    """Freeze the pool's keys at a stage and project them with the queries."""
    key_tasks = [None if pool.assignment is None else pool.assignment.get(i)
                 for i in range(pool.size)]
    return make_snapshot(pool.key_matrix(), key_tasks, queries, query_tasks, stage, basis)


@dataclass
class DriftStageStats:
    stage: str
    fraction_nearest: dict[int, float]       # task -> share of keys nearest its centroid
    nearest_task: np.ndarray                 # per-key nearest centroid
    displacement: np.ndarray                 # per-key distance moved since previous stage
    mean_displacement_by_task: dict[int, float]  # over exclusively assigned keys


def drift_stats(snapshots: list[DriftSnapshot]) -> list[DriftStageStats]:
    """Per-stage nearest-centroid fractions and key movement.

    Query centroids are fixed across stages (queries never move). Per-task
    displacement averages over the keys exclusively assigned to the task;
    without an assignment it averages over the keys nearest the task's
    centroid at the previous stage.
    """
    if len(snapshots) < 2:
        raise ContractError("need at least two snapshots")
    first = snapshots[0]
    tasks = sorted(set(int(t) for t in first.query_tasks))
    centroids = {t: first.queries[first.query_tasks == t].mean(axis=0) for t in tasks}
    out: list[DriftStageStats] = []
    prev_keys = None
    prev_nearest = None
    for snap in snapshots:
        nearest = np.array([_nearest_centroid(k, centroids, tasks) for k in snap.keys])
        fractions = {t: float(np.mean(nearest == t)) for t in tasks}
        if prev_keys is None:
            displacement = np.zeros(len(snap.keys))
        else:
            displacement = np.linalg.norm(snap.keys - prev_keys, axis=1)
        has_assignment = any(owned is not None for owned in snap.key_tasks)
        by_task = {}
        for t in tasks:
            if has_assignment:
                group = [i for i, owned in enumerate(snap.key_tasks) if owned == (t,)]
            elif prev_nearest is not None:
                group = [i for i in range(len(snap.keys)) if prev_nearest[i] == t]
            else:
                group = []
            by_task[t] = float(np.mean(displacement[group])) if group else 0.0
        out.append(DriftStageStats(stage=snap.stage, fraction_nearest=fractions,
                                   nearest_task=nearest, displacement=displacement,
                                   mean_displacement_by_task=by_task))
        prev_keys = snap.keys
        prev_nearest = nearest
    return out


def _nearest_centroid(key: np.ndarray, centroids: dict[int, np.ndarray], tasks: list[int]) -> int:
    best_task = tasks[0]
    best_sim = -np.inf
    for t in tasks:
        sim = float(ag.cosine_similarity(key, centroids[t]))
        if sim > best_sim:
            best_sim = sim
            best_task = t
    return best_task


# ----------------------------------------------------------------------
# CSV emission (the plotting contract)


def _task_label(tasks) -> str:
    if tasks is None:
        return "-"
    return "|".join(str(t) for t in tasks)


def write_stage_csv(snap: DriftSnapshot, path: str | Path) -> None:
    """Rows: point_type, task_label, pc1, pc2, pc3 (queries first)."""
    lines = ["point_type,task_label,pc1,pc2,pc3"]

    def coords(row) -> str:
        vals = list(row) + [0.0] * (3 - len(row))
        return ",".join(f"{v:.6f}" for v in vals)

    for label, row in zip(snap.query_tasks, snap.query_proj):
        lines.append(f"query,{int(label)},{coords(row)}")
    for owned, row in zip(snap.key_tasks, snap.key_proj):
        lines.append(f"key,{_task_label(owned)},{coords(row)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_drift_csv(stats: list[DriftStageStats], path: str | Path) -> None:
    lines = ["stage,task,fraction_nearest,mean_displacement"]
    for st in stats:
        for t in sorted(st.fraction_nearest):
            lines.append(f"{st.stage},{t},{st.fraction_nearest[t]:.6f},"
                         f"{st.mean_displacement_by_task[t]:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
