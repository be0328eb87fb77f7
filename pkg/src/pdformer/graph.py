"""Road-network graphs: adjacency, hop distances, geographic masks and
Laplacian eigenvector embeddings."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

UNREACHABLE = -1
"""Sentinel stored in hop-distance matrices for pairs with no directed path."""

ZERO_EIG_TOL = 1e-8


@dataclass(frozen=True)
class RoadNetwork:
    node_count: int
    edges: tuple[tuple[int, int], ...]
    adjacency: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.node_count


@dataclass(frozen=True)
class LaplacianEmbeddingBasis:
    vectors: np.ndarray  # (N, k)
    eigenvalues: np.ndarray  # (k,)


def build_from_edge_list(n: int, edges) -> RoadNetwork:
    """Build a network on ``n`` nodes from directed ``(src, dst)`` pairs.

    Duplicate edges collapse; self-loops are dropped so the diagonal stays 0.
    """
    if n < 1:
        raise ValueError(f"node count must be positive, got {n}")
    adj = np.zeros((n, n), dtype=np.int8)
    kept = []
    for e in edges:
        i, j = int(e[0]), int(e[1])
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"edge {(i, j)} out of range for {n} nodes")
        if i == j or adj[i, j]:
            continue
        adj[i, j] = 1
        kept.append((i, j))
    adj.setflags(write=False)
    return RoadNetwork(n, tuple(kept), adj)


def grid_to_graph(rows: int, cols: int) -> RoadNetwork:
    """Grid of ``rows x cols`` cells, row-major node ids, directed 8-neighbour edges."""
    if rows < 1 or cols < 1:
        raise ValueError(f"grid must be at least 1x1, got {rows}x{cols}")
    edges = []
    for r in range(rows):
        for c in range(cols):
            src = r * cols + c
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dr == 0 and dc == 0:
                        continue
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < rows and 0 <= cc < cols:
                        edges.append((src, rr * cols + cc))
    return build_from_edge_list(rows * cols, edges)


def ring_graph(n: int) -> RoadNetwork:
    """Bidirectional cycle 0-1-...-(n-1)-0."""
    if n == 1:
        return build_from_edge_list(1, [])
    edges = []
    for i in range(n):
        j = (i + 1) % n
        edges += [(i, j), (j, i)]
    return build_from_edge_list(n, edges)


def hop_distances(net: RoadNetwork) -> np.ndarray:
    """All-pairs directed hop counts by BFS; :data:`UNREACHABLE` where no path exists."""
    n = net.node_count
    succ = [np.flatnonzero(net.adjacency[i]) for i in range(n)]
    dist = np.full((n, n), UNREACHABLE, dtype=np.int64)
    for s in range(n):
        dist[s, s] = 0
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in succ[u]:
                if dist[s, v] == UNREACHABLE:
                    dist[s, v] = dist[s, u] + 1
                    queue.append(v)
    return dist


def geographic_mask(dist: np.ndarray, lam: int = 2) -> np.ndarray:
    """1 where the hop distance is at most ``lam`` (self included), else 0."""
    if lam < 0:
        raise ValueError(f"hop threshold must be >= 0, got {lam}")
    dist = np.asarray(dist)
    return ((dist != UNREACHABLE) & (dist <= lam)).astype(np.int8)


def normalized_laplacian(adjacency: np.ndarray) -> np.ndarray:
    a = np.asarray(adjacency, dtype=np.float64)
    a = np.maximum(a, a.T)
    deg = a.sum(axis=1)
    with np.errstate(divide="ignore"):
        dinv = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    return np.eye(len(a)) - dinv[:, None] * a * dinv[None, :]


def _fix_sign(vectors: np.ndarray) -> np.ndarray:
    out = vectors.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        # argmax returns the lowest index among ties
        idx = int(np.argmax(np.abs(np.round(col, 12))))
        if col[idx] < 0:
            out[:, j] = -col
    return out


def laplacian_embedding_basis(net: RoadNetwork, k: int) -> LaplacianEmbeddingBasis:
    """The ``k`` eigenvectors of the symmetric normalized Laplacian with the
    smallest eigenvalues above :data:`ZERO_EIG_TOL`, eigenvalues ascending."""
    lap = normalized_laplacian(net.adjacency)
    vals, vecs = np.linalg.eigh(lap)
    keep = vals > ZERO_EIG_TOL
    vals, vecs = vals[keep], vecs[:, keep]
    if k < 1 or k > len(vals):
        raise ValueError(f"requested k={k} but only {len(vals)} nontrivial eigenvectors are available")
    basis = _fix_sign(vecs[:, :k])
    return LaplacianEmbeddingBasis(basis, vals[:k].copy())


# ---------------------------------------------------------------- file formats


def read_edge_list(path, n: int | None = None) -> RoadNetwork:
    """Parse ``src,dst[,weight]`` lines (``#`` comments allowed); weights are ignored.

    Without ``n``, the node count is one more than the largest index seen.
    """
    edges = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) not in (2, 3):
            raise ValueError(f"{path}:{lineno}: expected 'src,dst[,weight]', got {raw!r}")
        try:
            edges.append((int(parts[0]), int(parts[1])))
            if len(parts) == 3:
                float(parts[2])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric field in {raw!r}") from None
    if n is None:
        n = 1 + max((max(e) for e in edges), default=-1)
    return build_from_edge_list(n, edges)


def write_edge_list(path, net: RoadNetwork) -> None:
    lines = [f"# {net.node_count} nodes"] + [f"{i},{j}" for i, j in net.edges]
    Path(path).write_text("\n".join(lines) + "\n")


def write_matrix_csv(path, matrix: np.ndarray) -> None:
    """Row-major CSV with a ``rows,cols`` header line."""
    m = np.atleast_2d(np.asarray(matrix))
    if np.issubdtype(m.dtype, np.integer):
        body = "\n".join(",".join(str(int(v)) for v in row) for row in m)
    else:
        body = "\n".join(",".join(repr(float(v)) for v in row) for row in m)
    Path(path).write_text(f"{m.shape[0]},{m.shape[1]}\n{body}\n")


def read_matrix_csv(path, dtype=np.float64) -> np.ndarray:
    lines = Path(path).read_text().strip().splitlines()
    rows, cols = (int(v) for v in lines[0].split(","))
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1 : rows + 1]], dtype=np.float64)
    if data.shape != (rows, cols):
        raise ValueError(f"{path}: header says {rows}x{cols}, body is {data.shape}")
    return data.astype(dtype)
