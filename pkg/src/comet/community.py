"""Global wallet transfer graph and modularity-based community detection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ingest import Kind, TransactionRecord


@dataclass
class TransferGraph:
    """Undirected, weighted by transfer count; self-transfers dropped."""

    nodes: list[str]
    weights: dict[tuple[str, str], int]  # keys canonical (min, max)

    def adjacency(self):
        adj: dict[str, dict[str, float]] = {n: {} for n in self.nodes}
        for (u, v), w in self.weights.items():
            adj[u][v] = adj[u].get(v, 0.0) + w
            adj[v][u] = adj[v].get(u, 0.0) + w
        return adj

    @property
    def total_weight(self) -> float:
        return float(sum(self.weights.values()))


@dataclass
class CommunityAssignment:
    membership: dict[str, int]  # wallet -> cluster id
    modularity: float
    seed: int
    q_history: list[float] = field(default_factory=list)

    def clusters(self) -> dict[int, list[str]]:
        roster: dict[int, list[str]] = {}
        for w in sorted(self.membership):
            roster.setdefault(self.membership[w], []).append(w)
        return roster


def build_transfer_graph(records: list[TransactionRecord],
                         window: tuple[int, int]) -> TransferGraph:
    """Edge weight = transfers between the pair (either direction) with
    day inside [window[0], window[1]]."""
    lo, hi = window
    weights: dict[tuple[str, str], int] = {}
    nodes: set[str] = set()
    for r in records:
        if r.kind is not Kind.TRANSFER or not (lo <= r.day <= hi):
            continue
        if r.from_wallet == r.to_wallet:
            continue
        key = (min(r.from_wallet, r.to_wallet), max(r.from_wallet, r.to_wallet))
        weights[key] = weights.get(key, 0) + 1
        nodes.update(key)
    return TransferGraph(sorted(nodes), weights)


def modularity(graph: TransferGraph, partition: dict[str, int],
               resolution: float = 1.0) -> float:
    """Q = sum_c( w_in(c)/W - resolution * (deg(c)/(2W))^2 )."""
    missing = [n for n in graph.nodes if n not in partition]
    if missing:
        raise ValueError(f"partition does not cover nodes {missing[:5]}")
    W = graph.total_weight
    if W == 0:
        return 0.0
    w_in: dict[int, float] = {}
    deg: dict[int, float] = {}
    for (u, v), w in graph.weights.items():
        deg[partition[u]] = deg.get(partition[u], 0.0) + w
        deg[partition[v]] = deg.get(partition[v], 0.0) + w
        if partition[u] == partition[v]:
            w_in[partition[u]] = w_in.get(partition[u], 0.0) + w
    q = 0.0
    for c in deg:
        q += w_in.get(c, 0.0) / W - resolution * (deg[c] / (2 * W)) ** 2
    return q


def _one_level(adj, self_w, W, order, resolution):
    """One local-move phase on an integer-indexed graph. Returns
    (community of each node, improved flag, Q trace per sweep)."""
    n = len(adj)
    comm = list(range(n))
    k = [sum(adj[i].values()) + 2 * self_w[i] for i in range(n)]
    sigma_tot = list(k)
    improved = False
    moved = True
    while moved:
        moved = False
        for i in order:
            ci = comm[i]
            # weights from i to each neighboring community, i removed
            links: dict[int, float] = {}
            for j, w in adj[i].items():
                links[comm[j]] = links.get(comm[j], 0.0) + w
            sigma_tot[ci] -= k[i]
            comm[i] = -1
            stay_gain = links.get(ci, 0.0) / W - \
                resolution * sigma_tot[ci] * k[i] / (2 * W * W)
            # only strict improvements move; among equal best improvements
            # the lowest community id wins
            best_c, best_gain = ci, stay_gain
            for c in sorted(links):
                if c == ci:
                    continue
                gain = links[c] / W - resolution * sigma_tot[c] * k[i] / (2 * W * W)
                if gain > best_gain + 1e-12:
                    best_c, best_gain = c, gain
                elif best_c != ci and abs(gain - best_gain) <= 1e-12 and c < best_c:
                    best_c = c
            comm[i] = best_c
            sigma_tot[best_c] += k[i]
            if best_c != ci:
                moved = True
                improved = True
    return comm, improved


def louvain(graph: TransferGraph, seed: int = 0,
            resolution: float = 1.0) -> CommunityAssignment:
    """Alternate seeded local moves and coarsening until no move improves Q.

    Ties in gain break toward the lowest cluster id; a fixed seed yields an
    identical assignment on every run.
    """
    names = list(graph.nodes)
    n = len(names)
    index = {w: i for i, w in enumerate(names)}
    adj: list[dict[int, float]] = [{} for _ in range(n)]
    for (u, v), w in graph.weights.items():
        iu, iv = index[u], index[v]
        adj[iu][iv] = adj[iu].get(iv, 0.0) + w
        adj[iv][iu] = adj[iv].get(iu, 0.0) + w
    self_w = [0.0] * n
    W = graph.total_weight
    rng = np.random.default_rng(seed)

    assignment = list(range(n))  # original node -> current community label
    q_history: list[float] = []
    if W == 0:
        return CommunityAssignment({w: i for i, w in enumerate(names)}, 0.0, seed, [0.0])

    while True:
        m = len(adj)
        order = list(range(m))
        rng.shuffle(order)
        comm, improved = _one_level(adj, self_w, W, order, resolution)
        # compact community labels preserving relative order
        labels = sorted(set(comm))
        relabel = {c: i for i, c in enumerate(labels)}
        comm = [relabel[c] for c in comm]
        assignment = [comm[assignment[i]] for i in range(n)]
        part = {names[i]: assignment[i] for i in range(n)}
        q_history.append(modularity(graph, part, resolution))
        if not improved:
            break
        # coarsen: communities become nodes
        nc = len(labels)
        new_adj: list[dict[int, float]] = [{} for _ in range(nc)]
        new_self = [0.0] * nc
        for i in range(m):
            ci = comm[i]
            new_self[ci] += self_w[i]
            for j, w in adj[i].items():
                cj = comm[j]
                if ci == cj:
                    if i < j:
                        new_self[ci] += w
                else:
                    new_adj[ci][cj] = new_adj[ci].get(cj, 0.0) + w
        adj, self_w = new_adj, new_self

    final = {names[i]: assignment[i] for i in range(n)}
    return CommunityAssignment(final, modularity(graph, final, resolution),
                               seed, q_history)


def assign_communities(graph: TransferGraph, all_wallets, seed: int = 0,
                       resolution: float = 1.0) -> CommunityAssignment:
    """Louvain assignment extended to the full wallet universe: wallets
    absent from the transfer graph get fresh singleton clusters."""
    result = louvain(graph, seed, resolution)
    membership = dict(result.membership)
    next_id = max(membership.values(), default=-1) + 1
    for w in sorted(all_wallets):
        if w not in membership:
            membership[w] = next_id
            next_id += 1
    return CommunityAssignment(membership, result.modularity, seed, result.q_history)


def write_communities_csv(path, assignment: CommunityAssignment):
    with open(path, "w") as f:
        f.write(f"# seed={assignment.seed} q={assignment.modularity!r}\n")
        f.write("wallet,cluster_id\n")
        for w in sorted(assignment.membership):
            f.write(f"{w},{assignment.membership[w]}\n")


def read_communities_csv(lines) -> CommunityAssignment:
    seed, q = 0, 0.0
    membership: dict[str, int] = {}
    for line in lines:
        line = line.strip()
        if line.startswith("#"):
            parts = dict(p.split("=") for p in line[1:].split())
            seed, q = int(parts["seed"]), float(parts["q"])
            continue
        if not line or line.startswith("wallet,"):
            continue
        w, c = line.split(",")
        membership[w] = int(c)
    return CommunityAssignment(membership, q, seed)
