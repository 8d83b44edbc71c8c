"""Path regularizer and its diagonal second derivatives.

gamma2_net is the sum over source->output paths of the product of squared
edge weights; kappa_i = 0.5 * d^2 gamma2_net / d theta_i^2 splits into a
per-edge term kappa1 and an interaction term kappa2 that is nonzero only
when a single path can traverse two edges sharing one parameter (time
unrolled recurrent nets).  Everything here is computed by dynamic
programming on the squared-weight network; brute-force path enumeration is
provided as the oracle.

The data-dependent variants blend the squared-weight recursion with batch
statistics of the pre-activations and reduce to the data-independent case
at alpha=0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientData, UnsupportedCombination
from .netgraph import (
    NODE_BIAS,
    NODE_INTERNAL,
    NODE_OUTPUT,
    NetworkGraph,
    RNNSpec,
    enumerate_paths,
    forward,
)

VALID_STATS = ("variance", "second_moment")


@dataclass
class GammaState:
    """Per-node squared path scale; gamma2_net sums the output nodes."""

    gamma2: np.ndarray  # (V,)
    gamma2_net: float


@dataclass
class KappaVector:
    kappa1: np.ndarray
    kappa2: np.ndarray

    @property
    def kappa(self) -> np.ndarray:
        return self.kappa1 + self.kappa2


# -- squared-weight network DP ------------------------------------------------


def _squared_forward_values(net: NetworkGraph, theta: np.ndarray) -> np.ndarray:
    """All-ones input run through the squared-weight linear network.

    The value at node v equals the sum over source->v paths of the product
    of squared weights, i.e. gamma2_v.
    """
    w2 = theta[net.edges[:, 2]] ** 2
    g = np.zeros(net.n_nodes)
    g[net.source_nodes] = 1.0
    for v in net.topo:
        if net.in_edges[v]:
            eids, srcs, _ = net.in_edges[v]
            g[v] = w2[eids] @ g[srcs]
    return g


def _squared_backward_values(net: NetworkGraph, theta: np.ndarray) -> np.ndarray:
    """delta_v: sum over v->output paths of squared-weight products."""
    w2 = theta[net.edges[:, 2]] ** 2
    delta = np.zeros(net.n_nodes)
    delta[net.output_nodes] = 1.0
    for v in net.topo[::-1]:
        if net.in_edges[v]:
            eids, srcs, _ = net.in_edges[v]
            np.add.at(delta, srcs, w2[eids] * delta[v])
    return delta


def path_reg_dp(net: NetworkGraph, theta: np.ndarray) -> tuple[GammaState, float]:
    """Path regularizer by a single forward DP: gamma2_v = sum gamma2_u w^2."""
    g = _squared_forward_values(net, theta)
    total = float(g[net.output_nodes].sum())
    return GammaState(gamma2=g, gamma2_net=total), total


def path_reg_bruteforce(net: NetworkGraph, theta: np.ndarray, cap: int | None = None) -> float:
    """Oracle: enumerate every path and sum the squared-weight products."""
    paths = enumerate_paths(net) if cap is None else enumerate_paths(net, cap)
    w2 = theta[net.edges[:, 2]] ** 2
    return float(sum(w2[p].prod() if len(p) else 1.0 for p in paths.paths))


def kappa1(net: NetworkGraph, theta: np.ndarray) -> np.ndarray:
    """Per-parameter second-derivative term ignoring same-parameter interactions.

    Computed as the gradient of the squared-weight network's summed output
    at the all-ones input: kappa1_i = sum_{e in E_i} delta_{dst(e)} * gamma2_{src(e)}.
    """
    if net.rnn is not None:
        return _kappa1_rnn(net.rnn, theta)
    g = _squared_forward_values(net, theta)
    delta = _squared_backward_values(net, theta)
    src, dst, pid = net.edges[:, 0], net.edges[:, 1], net.edges[:, 2]
    out = np.zeros(net.n_param)
    np.add.at(out, pid, delta[dst] * g[src])
    return out


def _rnn_squared_values(spec: RNNSpec, theta: np.ndarray):
    """Forward values and backward sensitivities of the squared RNN at all-ones input.

    Returns (hs, deltas): hs[i][t] and deltas[i][t] are (n_i,) vectors for
    t = 1..T stored at index t-1.
    """
    w_in, w_rec, w_out = spec.unpack(theta)
    w_in = [m**2 for m in w_in]
    w_rec = [m**2 for m in w_rec]
    w_out = w_out**2
    hs = []
    prev = [np.ones(spec.n_in) for _ in range(spec.T)]
    for i, n_i in enumerate(spec.hidden):
        h_i = []
        h_last = np.zeros(n_i)
        for t in range(spec.T):
            h_last = w_in[i] @ prev[t] + w_rec[i] @ h_last
            h_i.append(h_last)
        hs.append(h_i)
        prev = h_i
    deltas = [[np.zeros(n_i) for _ in range(spec.T)] for n_i in spec.hidden]
    ones_out = np.ones(spec.n_out)
    for t in spec.output_times:
        deltas[-1][t - 1] += w_out.T @ ones_out
    for i in reversed(range(len(spec.hidden))):
        for t in reversed(range(spec.T)):
            if t + 1 < spec.T:
                deltas[i][t] += w_rec[i].T @ deltas[i][t + 1]
            if i > 0:
                deltas[i - 1][t] += w_in[i].T @ deltas[i][t]
    return hs, deltas


def _kappa1_rnn(spec: RNNSpec, theta: np.ndarray) -> np.ndarray:
    hs, deltas = _rnn_squared_values(spec, theta)
    g_in, g_rec = [], []
    prev = [np.ones(spec.n_in) for _ in range(spec.T)]
    for i, n_i in enumerate(spec.hidden):
        gi = np.zeros((n_i, spec.n_in if i == 0 else spec.hidden[i - 1]))
        gr = np.zeros((n_i, n_i))
        for t in range(spec.T):
            gi += np.outer(deltas[i][t], prev[t])
            if t > 0:
                gr += np.outer(deltas[i][t], hs[i][t - 1])
        g_in.append(gi)
        g_rec.append(gr)
        prev = hs[i]
    g_out = np.zeros((spec.n_out, spec.hidden[-1]))
    for t in spec.output_times:
        g_out += np.outer(np.ones(spec.n_out), hs[-1][t - 1])
    return spec.pack(g_in, g_rec, g_out)


def kappa2_rnn(spec: RNNSpec, theta: np.ndarray) -> np.ndarray:
    """Interaction term for the recurrent matrices; zero for W_in and W_out.

    For each recurrent parameter (j, k) of layer i, sum over ordered pairs
    of its time copies t_a < t_b of
        delta_{t_b}[j] * (Wrec^2)^{t_b-1-t_a}[k, j] * h_{t_a-1}[k]
    on the squared network, times 4: a factor 2 from differentiating the
    square and a factor 2 because both orderings of a copy pair carry the
    same weight in the second derivative.
    """
    if spec.T < 3:
        return np.zeros(spec.n_param)
    hs, deltas = _rnn_squared_values(spec, theta)
    w_in, w_rec, w_out = spec.unpack(theta)
    g_in = [np.zeros_like(m) for m in w_in]
    g_rec = []
    for i, n_i in enumerate(spec.hidden):
        W2 = w_rec[i] ** 2
        acc = np.zeros((n_i, n_i))
        # powers[s] = (W2^s)[k, j] indexed [k, j]
        power = np.eye(n_i)
        for s in range(spec.T - 2):
            if s > 0:
                power = power @ W2
            inner = np.zeros((n_i, n_i))
            for t_a in range(2, spec.T + 1):
                t_b = t_a + s + 1
                if t_b > spec.T:
                    break
                # h at time t_a - 1, delta at time t_b  (1-based times)
                inner += np.outer(deltas[i][t_b - 1], hs[i][t_a - 2])
            acc += power.T * inner
        g_rec.append(4.0 * W2 * acc)
    g_out = np.zeros_like(w_out)
    return spec.pack(g_in, g_rec, g_out)


def kappa_bruteforce(net: NetworkGraph, theta: np.ndarray, cap: int | None = None) -> KappaVector:
    """Oracle kappa over enumerated paths; exact for any weight sharing.

    kappa1 sums, per path and per edge on it, the product of squared
    weights over the other edges; kappa2 sums over ordered pairs of
    distinct same-parameter edges the product excluding both, times
    2 * theta_i^2 (the true second derivative, matching central
    differences of gamma2_net).
    """
    paths = enumerate_paths(net) if cap is None else enumerate_paths(net, cap)
    pid_of_edge = net.edges[:, 2]
    w2 = theta**2
    k1 = np.zeros(net.n_param)
    k2 = np.zeros(net.n_param)
    for p in paths.paths:
        pids = pid_of_edge[p]
        facs = w2[pids]
        for a in range(len(pids)):
            k1[pids[a]] += np.prod(np.delete(facs, a)) if len(facs) > 1 else 1.0
            for b in range(len(pids)):
                if b == a or pids[b] != pids[a]:
                    continue
                rest = np.prod(np.delete(facs, [a, b])) if len(facs) > 2 else 1.0
                k2[pids[a]] += 2.0 * w2[pids[a]] * rest
    return KappaVector(kappa1=k1, kappa2=k2)


# -- data-dependent variants ---------------------------------------------------


def _batch_stat(z_rows: np.ndarray, stat: str) -> np.ndarray:
    """Biased (1/n) variance or second moment along the batch axis."""
    if stat == "second_moment":
        return np.mean(z_rows**2, axis=-1)
    if stat == "variance":
        return np.var(z_rows, axis=-1)
    raise UnsupportedCombination(f"unknown stat {stat!r}")


def ddp_gamma(net: NetworkGraph, theta: np.ndarray, batch: np.ndarray, alpha: float, stat: str = "second_moment") -> GammaState:
    """Blended per-node measure: alpha * S(z_v) + (1-alpha) * sum gamma2_u w^2.

    Input nodes seed the data-independent recursion with 1.  S is the batch
    variance or second moment of the pre-activation at v.
    """
    if stat not in VALID_STATS:
        raise UnsupportedCombination(f"unknown stat {stat!r}")
    if not 0.0 <= alpha <= 1.0:
        raise UnsupportedCombination(f"alpha={alpha} outside [0, 1]")
    if alpha > 0 and (batch is None or len(batch) == 0):
        raise InsufficientData("data-dependent measure needs a non-empty batch")
    if alpha == 0.0:
        state, _ = path_reg_dp(net, theta)
        return state

    trace = forward(net, theta, batch)
    w2 = theta[net.edges[:, 2]] ** 2
    g = np.zeros(net.n_nodes)
    g[net.source_nodes] = 1.0
    s_all = _batch_stat(trace.z, stat)
    for v in net.topo:
        if net.in_edges[v]:
            eids, srcs, _ = net.in_edges[v]
            g[v] = alpha * s_all[v] + (1.0 - alpha) * (w2[eids] @ g[srcs])
    return GammaState(gamma2=g, gamma2_net=float(g[net.output_nodes].sum()))


def _check_no_sharing(net: NetworkGraph):
    pid = net.edges[:, 2]
    if len(np.unique(pid)) != len(pid):
        raise UnsupportedCombination("data-dependent kappa is undefined for shared weights")


def ddp_kappa(net: NetworkGraph, theta: np.ndarray, batch: np.ndarray, alpha: float, stat: str = "second_moment") -> np.ndarray:
    """0.5 * d^2 gamma2_net / d w_e^2 for the blended measure, per edge parameter.

    Requires a one-to-one parameter map when alpha > 0.  Propagates two
    backward quantities: A_v = d gamma2_net / d gamma2_v and, per example,
    the coefficient matrix B of pre-activation products; then
        kappa_{u->v} = (1-alpha) A_v gamma2_u + sum_i B_i[v, v] h_u(i)^2.

    With stat="second_moment" this is the exact second derivative (the
    batch statistic decouples over examples).  With stat="variance" the
    recursion runs on batch-centered quantities and drops the cross-example
    coupling through the batch mean, matching the usual per-example
    treatment of normalization statistics.
    """
    if stat not in VALID_STATS:
        raise UnsupportedCombination(f"unknown stat {stat!r}")
    if alpha == 0.0:
        return kappa1(net, theta)
    _check_no_sharing(net)
    if batch is None or len(batch) == 0:
        raise InsufficientData("data-dependent kappa needs a non-empty batch")

    trace = forward(net, theta, batch)
    n = trace.batch_size
    V = net.n_nodes
    w = theta[net.edges[:, 2]]
    w2 = w**2

    gamma = ddp_gamma(net, theta, batch, alpha, stat).gamma2

    # A_v = d gamma2_net / d gamma2_v
    A = np.zeros(V)
    A[net.output_nodes] = 1.0
    for v in net.topo[::-1]:
        if net.in_edges[v]:
            eids, srcs, _ = net.in_edges[v]
            np.add.at(A, srcs, (1.0 - alpha) * w2[eids] * A[v])

    out_w = [[] for _ in range(V)]
    out_v = [[] for _ in range(V)]
    for e in range(net.n_edges):
        out_w[net.edges[e, 0]].append(w[e])
        out_v[net.edges[e, 0]].append(net.edges[e, 1])

    active = (trace.z > 0) | (net.node_kind == NODE_OUTPUT)[:, None]

    # B[v1, v2, i]: coefficient of z_{v1} z_{v2} (centered for variance) in
    # gamma2_net, with downstream dependence folded in.
    B = np.zeros((V, V, n))
    noninput = [v for v in net.topo[::-1] if net.node_kind[v] in (NODE_INTERNAL, NODE_OUTPUT)]
    for v in noninput:
        B[v, v] += alpha * A[v] / n
    for idx1, u1 in enumerate(noninput):
        ch1_w, ch1_v = out_w[u1], out_v[u1]
        if not ch1_w:
            continue
        for u2 in noninput[:idx1 + 1]:
            ch2_w, ch2_v = out_w[u2], out_v[u2]
            if not ch2_w:
                continue
            acc = np.zeros(n)
            for w1, v1 in zip(ch1_w, ch1_v):
                for w2_, v2 in zip(ch2_w, ch2_v):
                    acc += w1 * w2_ * B[v1, v2]
            contrib = acc * (active[u1] if u1 == u2 else active[u1] * active[u2])
            B[u1, u2] += contrib
            if u1 != u2:
                B[u2, u1] += contrib

    h = trace.h
    if stat == "variance":
        h = h - h.mean(axis=1, keepdims=True)
        h[net.node_kind == NODE_BIAS] = 0.0
    out = np.zeros(net.n_param)
    for e in range(net.n_edges):
        u, v, pid = net.edges[e]
        out[pid] = (1.0 - alpha) * A[v] * gamma[u] + float(B[v, v] @ (h[u] ** 2))
    return out


def fisher_diag_analytic(net: NetworkGraph, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Diagonal of the Fisher matrix under the Gaussian output model.

    F[e] = mean_x sum_{v' in outputs} (d f(x)[v'] / d w_e)^2, evaluated on
    the empirical input distribution X.  Requires a one-to-one param map.
    """
    _check_no_sharing(net)
    trace = forward(net, theta, X)
    B = trace.batch_size
    V = net.n_nodes
    w = theta[net.edges[:, 2]]
    total = np.zeros(net.n_param)
    for out_node in net.output_nodes:
        # s[v] holds d z_out / d h_v while unprocessed, the gated
        # d z_out / d z_v once node v has been visited.
        s = np.zeros((V, B))
        s[out_node] = 1.0
        for v in net.topo[::-1]:
            if not net.in_edges[v]:
                continue
            if net.node_kind[v] != NODE_OUTPUT:
                s[v] = s[v] * (trace.z[v] > 0)
            eids, srcs, _ = net.in_edges[v]
            np.add.at(s, srcs, np.outer(w[eids], s[v]))
        for e in range(net.n_edges):
            u, v, pid = net.edges[e]
            total[pid] += np.mean((trace.h[u] * s[v]) ** 2)
    return total
