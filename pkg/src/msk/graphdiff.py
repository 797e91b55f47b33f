"""Finite-volume Markov chain approximating the limit diffusion on the graph.

Each edge is cut into cells of width ~h with jump rates alpha/(2h^2) +-
gamma/(2h) (one-sided upwind correction keeps rates nonnegative when the
drift dominates on a cell, at the price of O(h) numerical diffusion).  A
saddle carries one shared vertex cell spanning a half-cell stub of each
incident edge; its outward rates are proportional to the gluing weights,
normalized so the generator stays consistent with the averaged operator at
the vertex, which makes the stationary flux split across the saddle
proportional to the weights.  Extremum and cap endpoints are reflecting;
junction vertices are plain diffusive splices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .averaging import EdgeCoefficientTable, GluingWeights
from .reeb import GraphPoint, ReebGraph
from .rng import philox_stream

__all__ = [
    "GraphChain",
    "GraphMarginal",
    "build_chain",
    "evolve_marginal",
    "sample_paths",
]


@dataclass
class GraphChain:
    """States, rates and generator of the finite-volume chain."""

    graph: ReebGraph
    state_edge: np.ndarray    # (n,) edge id, or -1 for saddle vertex cells
    state_z: np.ndarray       # (n,) cell centers (vertex cells: saddle value)
    state_h: np.ndarray       # (n,) cell widths
    neighbors: np.ndarray     # (n, 3) state indices, -1 padding
    rates: np.ndarray         # (n, 3) outgoing rates aligned with neighbors
    vertex_state: dict        # saddle vertex id -> state index

    @property
    def n_states(self) -> int:
        return len(self.state_z)

    @property
    def total_rate(self) -> np.ndarray:
        return self.rates.sum(axis=1)

    def generator(self) -> sparse.csr_matrix:
        n = self.n_states
        rows, cols, vals = [], [], []
        for k in range(self.neighbors.shape[1]):
            mask = self.neighbors[:, k] >= 0
            rows.append(np.nonzero(mask)[0])
            cols.append(self.neighbors[mask, k])
            vals.append(self.rates[mask, k])
        rows.append(np.arange(n))
        cols.append(np.arange(n))
        vals.append(-self.total_rate)
        return sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n))

    def states_on_edge(self, edge_id: int) -> np.ndarray:
        return np.nonzero(self.state_edge == edge_id)[0]

    def nearest_state(self, point: GraphPoint) -> int:
        idx = self.states_on_edge(point.edge_id)
        if len(idx) == 0:
            raise ValueError(f"no states on edge {point.edge_id}")
        return int(idx[np.argmin(np.abs(self.state_z[idx] - point.z))])

    def marginal_rows(self, marginal: "GraphMarginal"):
        for k in range(self.n_states):
            yield (int(self.state_edge[k]), float(self.state_z[k]),
                   float(marginal.probs[k]))


@dataclass
class GraphMarginal:
    """Probability vector over chain states at one time."""

    probs: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        if np.any(self.probs < -1e-12):
            raise ValueError("negative probabilities")
        if abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError("marginal does not sum to one")

    @classmethod
    def point_mass(cls, chain: GraphChain, point: GraphPoint) -> "GraphMarginal":
        probs = np.zeros(chain.n_states)
        probs[chain.nearest_state(point)] = 1.0
        return cls(probs=probs, time=0.0)


def _directional_rates(alpha, gamma, h, d=None):
    """(up, down) rates of one cell; upwind floor preserves the drift."""
    d = h if d is None else d
    up = alpha / (2 * h * d) + gamma / (2 * h)
    down = alpha / (2 * h * d) - gamma / (2 * h)
    if down < 0:
        up, down = gamma / h, 0.0
    elif up < 0:
        up, down = 0.0, -gamma / h
    return up, down


def build_chain(graph: ReebGraph, tables: list, weights: list,
                h: float) -> GraphChain:
    """Discretize the averaged generator as a continuous-time chain.

    ``tables`` holds one coefficient table per edge (indexable by edge id),
    ``weights`` the gluing weights of every saddle vertex.
    """
    table_of = {t.edge_id: t for t in tables}
    weight_of = {w.vertex_id: w for w in weights}
    min_len = min(e.z_hi - e.z_lo for e in graph.edges)
    if h > min_len / 10.0:
        raise ValueError(f"h={h} too coarse: shortest edge has length "
                         f"{min_len:.4g}")
    for v in graph.saddle_vertices():
        if v.id not in weight_of:
            raise ValueError(f"missing gluing weights for saddle vertex {v.id}")

    state_edge, state_z, state_h = [], [], []
    edge_slices = {}
    for e in graph.edges:
        lo_stub = graph.vertices[e.vertex_lo].kind == "saddle"
        hi_stub = graph.vertices[e.vertex_hi].kind == "saddle"
        lo = e.z_lo + (h / 2 if lo_stub else 0.0)
        hi = e.z_hi - (h / 2 if hi_stub else 0.0)
        n_cells = max(1, int(round((hi - lo) / h)))
        h_e = (hi - lo) / n_cells
        centers = lo + (np.arange(n_cells) + 0.5) * h_e
        start = len(state_z)
        state_edge.extend([e.id] * n_cells)
        state_z.extend(centers.tolist())
        state_h.extend([h_e] * n_cells)
        edge_slices[e.id] = (start, start + n_cells, h_e)

    vertex_state = {}
    for v in graph.saddle_vertices():
        vertex_state[v.id] = len(state_z)
        stubs = [edge_slices[e.id][2] for e in graph.incident_edges(v.id)]
        state_edge.append(-1)
        state_z.append(v.value)
        state_h.append(float(np.mean(stubs)))

    state_edge = np.asarray(state_edge)
    state_z = np.asarray(state_z)
    state_h = np.asarray(state_h)
    n = len(state_z)
    neighbors = np.full((n, 3), -1, dtype=np.int64)
    rates = np.zeros((n, 3))

    def add_rate(src, dst, rate):
        slot = int((neighbors[src] >= 0).sum())
        neighbors[src, slot] = dst
        rates[src, slot] = rate

    for e in graph.edges:
        start, stop, h_e = edge_slices[e.id]
        table = table_of[e.id]
        alphas = np.asarray(table.alpha_at(state_z[start:stop]), dtype=float)
        gammas = np.asarray(table.gamma_at(state_z[start:stop]), dtype=float)
        if np.any(alphas <= 0):
            raise ValueError(f"nonpositive diffusion coefficient on edge {e.id}")
        for k in range(stop - start):
            up, down = _directional_rates(float(alphas[k]), float(gammas[k]), h_e)
            idx = start + k
            if k + 1 < stop - start:
                add_rate(idx, idx + 1, up)
            elif graph.vertices[e.vertex_hi].kind == "saddle":
                add_rate(idx, vertex_state[e.vertex_hi], up)
            if k > 0:
                add_rate(idx, idx - 1, down)
            elif graph.vertices[e.vertex_lo].kind == "saddle":
                add_rate(idx, vertex_state[e.vertex_lo], down)

    # junction splices: lower edge's top cell <-> upper edge's bottom cell
    for v in graph.vertices:
        if v.kind != "junction":
            continue
        lo_edge = [e for e in graph.incident_edges(v.id) if e.vertex_hi == v.id][0]
        hi_edge = [e for e in graph.incident_edges(v.id) if e.vertex_lo == v.id][0]
        a = edge_slices[lo_edge.id][1] - 1
        b = edge_slices[hi_edge.id][0]
        d = 0.5 * (state_h[a] + state_h[b])
        t_lo, t_hi = table_of[lo_edge.id], table_of[hi_edge.id]
        up, _ = _directional_rates(float(t_lo.alpha_at(state_z[a])),
                                   float(t_lo.gamma_at(state_z[a])),
                                   float(state_h[a]), d)
        _, down = _directional_rates(float(t_hi.alpha_at(state_z[b])),
                                     float(t_hi.gamma_at(state_z[b])),
                                     float(state_h[b]), d)
        add_rate(a, b, up)
        add_rate(b, a, down)

    # saddle vertex cells: outward rates proportional to the gluing weights
    for v in graph.saddle_vertices():
        w = weight_of[v.id].weights
        vs = vertex_state[v.id]
        denom = 0.0
        plan = []
        for e in graph.incident_edges(v.id):
            start, stop, h_e = edge_slices[e.id]
            table = table_of[e.id]
            alpha_s = float(table.alpha_at(v.value))
            gamma_s = float(table.gamma_at(v.value))
            if alpha_s <= 0:
                raise ValueError(
                    f"nonpositive diffusion at saddle value on edge {e.id}")
            above = e.vertex_lo == v.id
            target = start if above else stop - 1
            sratio = 1.0 + (gamma_s * h_e / alpha_s) * (1.0 if above else -1.0)
            plan.append((target, w[e.id] * max(sratio, 1e-3) / h_e))
            denom += w[e.id] * h_e / alpha_s
        for target, conductance in plan:
            add_rate(vs, target, conductance / denom)

    return GraphChain(graph=graph, state_edge=state_edge, state_z=state_z,
                      state_h=state_h, neighbors=neighbors, rates=rates,
                      vertex_state=vertex_state)


def evolve_marginal(chain: GraphChain, init: GraphMarginal, t: float,
                    dt: float, method: str = "implicit") -> GraphMarginal:
    """Advance the forward equation of the chain by time t.

    The implicit Euler option is unconditionally stable and conserves mass
    to solver precision; the explicit option requires dt below half the
    inverse of the largest exit rate.
    """
    if t < 0 or dt <= 0:
        raise ValueError("need t >= 0 and dt > 0")
    if t == 0:
        return GraphMarginal(probs=init.probs.copy(), time=init.time)
    n_steps = max(1, int(np.ceil(t / dt - 1e-12)))
    step = t / n_steps
    gen_t = chain.generator().T.tocsc()
    probs = init.probs.copy()
    if method == "implicit":
        solver = splu(sparse.identity(chain.n_states, format="csc") - step * gen_t)
        for _ in range(n_steps):
            probs = solver.solve(probs)
            probs /= probs.sum()  # implicit Euler conserves mass; scrub roundoff
    elif method == "explicit":
        bound = 0.5 / chain.total_rate.max()
        if step > bound:
            raise ValueError(f"explicit step {step:.3g} above stability bound "
                             f"{bound:.3g}")
        for _ in range(n_steps):
            probs = probs + step * gen_t.dot(probs)
    else:
        raise ValueError(f"unknown method {method!r}")
    return GraphMarginal(probs=np.maximum(probs, 0.0) if method == "implicit"
                         else probs, time=init.time + t)


def sample_paths(chain: GraphChain, init: GraphPoint, t: float, n: int,
                 seed: int, absorb_edges=None) -> list:
    """Exact exponential-clock simulation of n chain paths to time t.

    Paths that enter an edge in ``absorb_edges`` freeze there.  Each path
    consumes its own (seed, index) stream, so results do not depend on the
    ensemble size or scheduling.  Returns the end states as graph points;
    a path sitting on a saddle cell reports the lowest incident edge.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    absorb = frozenset(absorb_edges) if absorb_edges else frozenset()
    start = chain.nearest_state(init)
    n_states = chain.n_states
    cum_rates = np.cumsum(chain.rates, axis=1)
    totals = chain.total_rate

    state = np.full(n, start, dtype=np.int64)
    tcur = np.zeros(n)
    active = np.ones(n, dtype=bool)
    if int(chain.state_edge[start]) in absorb:
        active[:] = False

    block = 64
    gens = [philox_stream(seed, i, 0) for i in range(n)]
    buf = np.empty((n, block))
    for i, g in enumerate(gens):
        buf[i] = g.random(block)
    ptr = np.zeros(n, dtype=np.int64)

    def draw(ids):
        need_refill = ptr[ids] >= block
        for i in ids[need_refill]:
            buf[i] = gens[i].random(block)
            ptr[i] = 0
        vals = buf[ids, ptr[ids]]
        ptr[ids] += 1
        return vals

    while active.any():
        ids = np.nonzero(active)[0]
        s = state[ids]
        rate = totals[s]
        u1 = draw(ids)
        with np.errstate(divide="ignore"):
            wait = np.where(rate > 0, -np.log(u1) / np.where(rate > 0, rate, 1.0),
                            np.inf)
        tnew = tcur[ids] + wait
        done = tnew > t
        active[ids[done]] = False
        tcur[ids[done]] = t
        move = ids[~done]
        if len(move) == 0:
            continue
        tcur[move] = tnew[~done]
        u2 = draw(move)
        sm = state[move]
        target = (u2[:, None] * totals[sm][:, None] > cum_rates[sm]).sum(axis=1)
        state[move] = chain.neighbors[sm, target]
        if absorb:
            hit = np.isin(chain.state_edge[state[move]], list(absorb))
            active[move[hit]] = False

    out = []
    for k in range(n):
        s = int(state[k])
        eid = int(chain.state_edge[s])
        if eid < 0:
            vid = next(v for v, st in chain.vertex_state.items() if st == s)
            eid = min(e.id for e in chain.graph.incident_edges(vid))
        out.append(GraphPoint(edge_id=eid, z=float(chain.state_z[s])))
    return out
