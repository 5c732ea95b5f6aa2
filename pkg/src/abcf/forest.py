"""Sum-of-trees ensembles and their backfitting Metropolis-Hastings sampler.

Trees are stored heap-style in fixed-width integer arrays: node ``i`` has
children ``2i + 1`` and ``2i + 2``. ``var[i] >= 0`` marks a split on that
covariate, ``-1`` a leaf and ``-2`` an unused slot. Covariates are binned
once against a per-variable cutpoint grid; a unit goes left at a split
``(v, k)`` when its bin ``xb[v] <= k`` (i.e. ``x[v] < cutpoints[v][k]``).

Each unit ``j`` contributes to a tree through an observation
``target_j = scale_j * g(x_j) + noise`` with noise precision ``prec_j``. The
prognostic forest uses ``scale = 1``; the treatment forest uses the
arm-specific multipliers ``b0`` / ``b1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

GROW, PRUNE, CHANGE, NOOP = 0, 1, 2, -1
MOVE_NAMES = {GROW: "grow", PRUNE: "prune", CHANGE: "change", NOOP: "noop"}

MAX_DEPTH = 9
MAX_NODES = 2 ** (MAX_DEPTH + 1) - 1

LEAF = -1
UNUSED = -2

# columns of the per-tree move log
LOG_KIND, LOG_ACCEPTED, LOG_NODE, LOG_VAR, LOG_CUT, LOG_RATIO, LOG_PRIOR, LOG_LIK = range(8)
LOG_WIDTH = 8


def make_cutpoints(x: np.ndarray, n_cut: int = 100) -> np.ndarray:
    """Uniform grid of ``n_cut`` interior cutpoints over the range of ``x``."""
    lo, hi = float(np.min(x)), float(np.max(x))
    if not hi > lo:
        return np.empty(0)
    k = np.arange(1, n_cut + 1)
    return lo + (hi - lo) * k / (n_cut + 1)


class CovariateGrid:
    """Cutpoint grid for a covariate matrix plus the binning it induces."""

    def __init__(self, X: np.ndarray, n_cut: int = 100):
        X = np.asarray(X, dtype=float)
        self.p = X.shape[1]
        self.cutpoints = [make_cutpoints(X[:, v], n_cut) for v in range(self.p)]
        self.ncut = np.array([len(c) for c in self.cutpoints], dtype=np.int32)

    def bin(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.p:
            raise ValueError(f"expected covariates with {self.p} columns, got shape {X.shape}")
        xb = np.empty(X.shape, dtype=np.int32)
        for v in range(self.p):
            xb[:, v] = np.searchsorted(self.cutpoints[v], X[:, v], side="right")
        return xb


# ---------------------------------------------------------------------------
# numba kernels

@numba.njit(cache=True)
def _depth(i):
    d = 0
    while i > 0:
        i = (i - 1) // 2
        d += 1
    return d


@numba.njit(cache=True)
def _log_psplit(d, alpha, beta):
    return math.log(alpha) - beta * math.log(1.0 + d)


@numba.njit(cache=True)
def _log1m_psplit(d, alpha, beta):
    return math.log1p(-alpha * (1.0 + d) ** (-beta))


@numba.njit(cache=True)
def _ranges(var_row, cut_row, node, ncut, lo, hi):
    """Fill the inclusive range of admissible cut indices per variable."""
    for v in range(ncut.shape[0]):
        lo[v] = 0
        hi[v] = ncut[v] - 1
    child = node
    while child > 0:
        parent = (child - 1) // 2
        v = var_row[parent]
        k = cut_row[parent]
        if child == 2 * parent + 1:
            if k - 1 < hi[v]:
                hi[v] = k - 1
        elif k + 1 > lo[v]:
            lo[v] = k + 1
        child = parent


@numba.njit(cache=True)
def _n_valid(lo, hi):
    c = 0
    for v in range(lo.shape[0]):
        if hi[v] >= lo[v]:
            c += 1
    return c


@numba.njit(cache=True)
def _child_can_split(lo, hi, v, new_lo, new_hi, child_depth):
    if child_depth >= MAX_DEPTH:
        return False
    for w in range(lo.shape[0]):
        if w == v:
            if new_hi >= new_lo:
                return True
        elif hi[w] >= lo[w]:
            return True
    return False


@numba.njit(cache=True)
def _log_leafprob_children(lo, hi, v, k, d, alpha, beta):
    """Log prior probability that both children of a (v, k) split at depth d stay leaves."""
    out = 0.0
    if _child_can_split(lo, hi, v, lo[v], k - 1, d + 1):
        out += _log1m_psplit(d + 1, alpha, beta)
    if _child_can_split(lo, hi, v, k + 1, hi[v], d + 1):
        out += _log1m_psplit(d + 1, alpha, beta)
    return out


@numba.njit(cache=True)
def _draw_rule(lo, hi, rng):
    nvalid = _n_valid(lo, hi)
    r = rng.integers(0, nvalid)
    v = -1
    for w in range(lo.shape[0]):
        if hi[w] >= lo[w]:
            if r == 0:
                v = w
                break
            r -= 1
    k = lo[v] + rng.integers(0, hi[v] - lo[v] + 1)
    return v, k


@numba.njit(cache=True)
def _log_rule(lo, hi, v):
    return -math.log(_n_valid(lo, hi)) - math.log(hi[v] - lo[v] + 1)


@numba.njit(cache=True)
def _propose(var_row, cut_row, hi_t, ncut, alpha, beta, p_grow, p_prune, rng, lo, hi, buf):
    """Draw a tree move.

    Returns ``(kind, node, var, cut, log_q_fwd, log_q_rev, log_prior_diff)``.
    ``kind`` is NOOP when the drawn leaf admits no split rule.
    """
    n_leaves = 0
    n_nog = 0
    m = buf.shape[0] // 2
    for i in range(hi_t):
        if var_row[i] == LEAF:
            buf[n_leaves] = i
            n_leaves += 1
        elif var_row[i] >= 0 and var_row[2 * i + 1] == LEAF and var_row[2 * i + 2] == LEAF:
            buf[m + n_nog] = i
            n_nog += 1
    p_change = 1.0 - p_grow - p_prune
    if n_nog == 0:
        kind = GROW
        pm_fwd = 1.0
    else:
        u = rng.random()
        if u < p_grow:
            kind = GROW
            pm_fwd = p_grow
        elif u < p_grow + p_prune:
            kind = PRUNE
            pm_fwd = p_prune
        else:
            kind = CHANGE
            pm_fwd = p_change

    if kind == GROW:
        node = buf[rng.integers(0, n_leaves)]
        d = _depth(node)
        _ranges(var_row, cut_row, node, ncut, lo, hi)
        if d >= MAX_DEPTH or _n_valid(lo, hi) == 0:
            return NOOP, node, -1, -1, 0.0, 0.0, 0.0
        v, k = _draw_rule(lo, hi, rng)
        log_rule = _log_rule(lo, hi, v)
        nog_after = n_nog + 1
        if node > 0:
            parent = (node - 1) // 2
            sib = 2 * parent + 2 if node == 2 * parent + 1 else 2 * parent + 1
            if var_row[sib] == LEAF:
                nog_after -= 1
        log_q_fwd = math.log(pm_fwd) - math.log(n_leaves) + log_rule
        log_q_rev = math.log(p_prune) - math.log(nog_after)
        log_prior = (_log_psplit(d, alpha, beta) + log_rule
                     + _log_leafprob_children(lo, hi, v, k, d, alpha, beta)
                     - _log1m_psplit(d, alpha, beta))
        return GROW, node, v, k, log_q_fwd, log_q_rev, log_prior

    node = buf[m + rng.integers(0, n_nog)]
    d = _depth(node)
    _ranges(var_row, cut_row, node, ncut, lo, hi)
    v_old = var_row[node]
    k_old = cut_row[node]
    log_rule_old = _log_rule(lo, hi, v_old)
    leaf_old = _log_leafprob_children(lo, hi, v_old, k_old, d, alpha, beta)
    if kind == PRUNE:
        pm_rev = 1.0 if node == 0 else p_grow
        log_q_fwd = math.log(pm_fwd) - math.log(n_nog)
        log_q_rev = math.log(pm_rev) - math.log(n_leaves - 1) + log_rule_old
        log_prior = (_log1m_psplit(d, alpha, beta) - _log_psplit(d, alpha, beta)
                     - log_rule_old - leaf_old)
        return PRUNE, node, v_old, k_old, log_q_fwd, log_q_rev, log_prior

    v, k = _draw_rule(lo, hi, rng)
    log_rule_new = _log_rule(lo, hi, v)
    leaf_new = _log_leafprob_children(lo, hi, v, k, d, alpha, beta)
    log_q_fwd = math.log(pm_fwd) - math.log(n_nog) + log_rule_new
    log_q_rev = math.log(pm_fwd) - math.log(n_nog) + log_rule_old
    log_prior = log_rule_new - log_rule_old + leaf_new - leaf_old
    return CHANGE, node, v, k, log_q_fwd, log_q_rev, log_prior


@numba.njit(cache=True)
def _lm(s, lam, a):
    # leaf log marginal likelihood up to data-only terms that cancel in ratios
    return 0.5 * math.log(a / (a + lam)) + s * s / (2.0 * (a + lam))


@numba.njit(cache=True)
def _sweep(var, cut, val, hi_arr, leaf_of, fit, xb, ncut, target, prec, scale,
           alpha, beta, leaf_sd, p_grow, p_prune, rng, log):
    """One backfitting pass over every tree of an ensemble (in place)."""
    m = var.shape[0]
    n = fit.shape[0]
    p = ncut.shape[0]
    a = 1.0 / (leaf_sd * leaf_sd)
    resid = np.empty(n)
    wt = np.empty(n)
    for j in range(n):
        resid[j] = target[j] - scale[j] * fit[j]
        wt[j] = prec[j] * scale[j]
    old_g = np.empty(n)
    S = np.zeros(MAX_NODES)
    L = np.zeros(MAX_NODES)
    C = np.zeros(MAX_NODES, dtype=np.int64)
    lo = np.empty(p, dtype=np.int64)
    hi = np.empty(p, dtype=np.int64)
    buf = np.empty(2 * MAX_NODES, dtype=np.int64)

    for t in range(m):
        vr = var[t]
        cr = cut[t]
        hi_t = hi_arr[t]
        kind, node, v, k, lqf, lqr, lprior = _propose(
            vr, cr, hi_t, ncut, alpha, beta, p_grow, p_prune, rng, lo, hi, buf)
        for i in range(hi_t):
            S[i] = 0.0
            L[i] = 0.0
            C[i] = 0
        c1 = -1
        c2 = -1
        if kind == PRUNE or kind == CHANGE:
            c1 = 2 * node + 1
            c2 = 2 * node + 2
        sl = 0.0
        ll = 0.0
        cl = 0
        sr = 0.0
        lr = 0.0
        cr_n = 0
        for j in range(n):
            leaf = leaf_of[t, j]
            g = val[t, leaf]
            old_g[j] = g
            e = resid[j] + scale[j] * g
            s_j = wt[j] * e
            l_j = wt[j] * scale[j]
            S[leaf] += s_j
            L[leaf] += l_j
            C[leaf] += 1
            if (kind == GROW and leaf == node) or (kind == CHANGE and (leaf == c1 or leaf == c2)):
                if xb[j, v] <= k:
                    sl += s_j
                    ll += l_j
                    cl += 1
                else:
                    sr += s_j
                    lr += l_j
                    cr_n += 1

        accepted = False
        lratio = 0.0
        llik = 0.0
        if kind == GROW or kind == CHANGE:
            if cl > 0 and cr_n > 0:
                if kind == GROW:
                    llik = _lm(sl, ll, a) + _lm(sr, lr, a) - _lm(S[node], L[node], a)
                else:
                    llik = (_lm(sl, ll, a) + _lm(sr, lr, a)
                            - _lm(S[c1], L[c1], a) - _lm(S[c2], L[c2], a))
                lratio = lprior + lqr - lqf + llik
                accepted = math.log(rng.random()) < lratio
            else:
                lratio = -np.inf
        elif kind == PRUNE:
            llik = (_lm(S[c1] + S[c2], L[c1] + L[c2], a)
                    - _lm(S[c1], L[c1], a) - _lm(S[c2], L[c2], a))
            lratio = lprior + lqr - lqf + llik
            accepted = math.log(rng.random()) < lratio

        if accepted:
            if kind == GROW:
                vr[node] = v
                cr[node] = k
                vr[2 * node + 1] = LEAF
                vr[2 * node + 2] = LEAF
                if 2 * node + 3 > hi_t:
                    hi_t = 2 * node + 3
                for j in range(n):
                    if leaf_of[t, j] == node:
                        leaf_of[t, j] = 2 * node + 1 if xb[j, v] <= k else 2 * node + 2
                S[2 * node + 1] = sl
                L[2 * node + 1] = ll
                S[2 * node + 2] = sr
                L[2 * node + 2] = lr
            elif kind == PRUNE:
                vr[node] = LEAF
                vr[c1] = UNUSED
                vr[c2] = UNUSED
                for j in range(n):
                    if leaf_of[t, j] == c1 or leaf_of[t, j] == c2:
                        leaf_of[t, j] = node
                S[node] = S[c1] + S[c2]
                L[node] = L[c1] + L[c2]
                while hi_t > 1 and vr[hi_t - 1] == UNUSED:
                    hi_t -= 1
            else:
                vr[node] = v
                cr[node] = k
                for j in range(n):
                    if leaf_of[t, j] == c1 or leaf_of[t, j] == c2:
                        leaf_of[t, j] = c1 if xb[j, v] <= k else c2
                S[c1] = sl
                L[c1] = ll
                S[c2] = sr
                L[c2] = lr
            hi_arr[t] = hi_t

        log[t, LOG_KIND] = kind
        log[t, LOG_ACCEPTED] = 1.0 if accepted else 0.0
        log[t, LOG_NODE] = node
        log[t, LOG_VAR] = v
        log[t, LOG_CUT] = k
        log[t, LOG_RATIO] = lratio
        log[t, LOG_PRIOR] = lprior + lqr - lqf
        log[t, LOG_LIK] = llik

        for i in range(hi_t):
            if vr[i] == LEAF:
                post = a + L[i]
                val[t, i] = S[i] / post + rng.standard_normal() / math.sqrt(post)
        for j in range(n):
            delta = val[t, leaf_of[t, j]] - old_g[j]
            fit[j] += delta
            resid[j] -= scale[j] * delta


@numba.njit(cache=True)
def _predict(var, cut, val, xb):
    m = var.shape[0]
    n = xb.shape[0]
    out = np.zeros(n)
    for j in range(n):
        s = 0.0
        for t in range(m):
            node = 0
            while var[t, node] >= 0:
                if xb[j, var[t, node]] <= cut[t, node]:
                    node = 2 * node + 1
                else:
                    node = 2 * node + 2
            s += val[t, node]
        out[j] = s
    return out


@numba.njit(cache=True)
def _assign_leaves(var, cut, xb, leaf_of):
    for t in range(var.shape[0]):
        for j in range(xb.shape[0]):
            node = 0
            while var[t, node] >= 0:
                if xb[j, var[t, node]] <= cut[t, node]:
                    node = 2 * node + 1
                else:
                    node = 2 * node + 2
            leaf_of[t, j] = node


# ---------------------------------------------------------------------------
# Python surface

@dataclass
class DecisionTree:
    """A single heap-indexed tree (a copy, detached from any ensemble)."""

    var: np.ndarray
    cut: np.ndarray
    val: np.ndarray

    @classmethod
    def stump(cls, value: float = 0.0) -> "DecisionTree":
        var = np.full(MAX_NODES, UNUSED, dtype=np.int32)
        var[0] = LEAF
        val = np.zeros(MAX_NODES)
        val[0] = value
        return cls(var, np.zeros(MAX_NODES, dtype=np.int32), val)

    @classmethod
    def from_nested(cls, spec) -> "DecisionTree":
        """Build from nested tuples: a leaf is a float, a split ``(var, cut, left, right)``."""
        tree = cls.stump()
        tree.var[0] = UNUSED

        def place(node, s):
            if node >= MAX_NODES:
                raise ValueError("tree deeper than MAX_DEPTH")
            if isinstance(s, tuple):
                v, k, left, right = s
                tree.var[node] = v
                tree.cut[node] = k
                place(2 * node + 1, left)
                place(2 * node + 2, right)
            else:
                tree.var[node] = LEAF
                tree.val[node] = float(s)

        place(0, spec)
        return tree

    def to_nested(self, node: int = 0):
        if self.var[node] == LEAF:
            return float(self.val[node])
        return (int(self.var[node]), int(self.cut[node]),
                self.to_nested(2 * node + 1), self.to_nested(2 * node + 2))

    @property
    def hi(self) -> int:
        used = np.flatnonzero(self.var != UNUSED)
        return int(used[-1]) + 1

    def leaves(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.var[: self.hi] == LEAF)]

    def internal(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.var[: self.hi] >= 0)]

    def depth(self) -> int:
        return max(_depth(i) for i in self.leaves())

    def is_stump(self) -> bool:
        return self.var[0] == LEAF

    def structure(self):
        """Nested tuple without leaf values (hashable, for comparisons)."""
        def walk(node):
            if self.var[node] == LEAF:
                return None
            return (int(self.var[node]), int(self.cut[node]), walk(2 * node + 1), walk(2 * node + 2))
        return walk(0)

    def evaluate(self, xb: np.ndarray) -> np.ndarray:
        return _predict(self.var[None, :], self.cut[None, :], self.val[None, :], np.asarray(xb, dtype=np.int32))

    def validate(self, ncut: np.ndarray) -> None:
        """Check structural invariants; raise ``AssertionError`` on violation."""
        ncut = np.asarray(ncut, dtype=np.int32)
        lo = np.empty(len(ncut), dtype=np.int64)
        hi = np.empty(len(ncut), dtype=np.int64)
        assert self.var[0] != UNUSED, "root unused"
        for i in range(MAX_NODES):
            v = self.var[i]
            if v == UNUSED:
                continue
            if i > 0:
                assert self.var[(i - 1) // 2] >= 0, f"node {i} has a non-split parent"
            if v == LEAF:
                assert np.isfinite(self.val[i]), f"leaf {i} value not finite"
                continue
            assert 2 * i + 2 < MAX_NODES, f"node {i} splits past max depth"
            assert self.var[2 * i + 1] != UNUSED and self.var[2 * i + 2] != UNUSED, f"node {i} missing a child"
            _ranges(self.var, self.cut, i, ncut, lo, hi)
            assert lo[v] <= self.cut[i] <= hi[v], f"node {i} rule ({v}, {self.cut[i]}) outside admissible range"


@dataclass
class TreeProposal:
    kind: str
    node: int
    var: int
    cut: int
    log_q_forward: float
    log_q_reverse: float
    log_prior_ratio: float


def propose_tree_move(tree: DecisionTree, ncut, rng: np.random.Generator, *, alpha: float = 0.95,
                      beta: float = 2.0, p_grow: float = 0.25, p_prune: float = 0.25) -> TreeProposal:
    """Draw a grow / prune / change proposal for ``tree`` without applying it."""
    ncut = np.asarray(ncut, dtype=np.int32)
    lo = np.empty(len(ncut), dtype=np.int64)
    hi = np.empty(len(ncut), dtype=np.int64)
    buf = np.empty(2 * MAX_NODES, dtype=np.int64)
    kind, node, v, k, lqf, lqr, lprior = _propose(
        tree.var, tree.cut, tree.hi, ncut, alpha, beta, p_grow, p_prune, rng, lo, hi, buf)
    return TreeProposal(MOVE_NAMES[kind], int(node), int(v), int(k), lqf, lqr, lprior)


def apply_move(tree: DecisionTree, prop: TreeProposal) -> DecisionTree:
    """Return a copy of ``tree`` with ``prop`` applied (leaf values of new leaves are 0)."""
    out = DecisionTree(tree.var.copy(), tree.cut.copy(), tree.val.copy())
    i = prop.node
    if prop.kind == "grow":
        out.var[i] = prop.var
        out.cut[i] = prop.cut
        out.var[2 * i + 1] = LEAF
        out.var[2 * i + 2] = LEAF
        out.val[2 * i + 1] = out.val[2 * i + 2] = 0.0
    elif prop.kind == "prune":
        out.var[i] = LEAF
        out.var[2 * i + 1] = UNUSED
        out.var[2 * i + 2] = UNUSED
        out.val[i] = 0.0
    elif prop.kind == "change":
        out.var[i] = prop.var
        out.cut[i] = prop.cut
    return out


def leaf_log_marginal(residuals, precisions, leaf_scale: float) -> float:
    """Log marginal likelihood of a leaf's residuals under a N(0, leaf_scale^2) leaf value.

    Computes ``log ∫ prod_j N(r_j | m, 1/prec_j) N(m | 0, leaf_scale^2) dm`` in
    closed form. An empty leaf contributes 0.
    """
    r = np.asarray(residuals, dtype=float)
    lam = np.asarray(precisions, dtype=float)
    if not leaf_scale > 0:
        raise ValueError("leaf_scale must be positive")
    if np.any(lam <= 0):
        raise ValueError("precisions must be positive")
    a = 1.0 / leaf_scale**2
    big_lam = lam.sum()
    s = np.sum(lam * r)
    data = np.sum(0.5 * np.log(lam / (2 * np.pi)) - 0.5 * lam * r**2)
    return float(0.5 * np.log(a / (a + big_lam)) + s**2 / (2 * (a + big_lam)) + data)


class Forest:
    """One tree ensemble bound to a training covariate matrix.

    ``fit`` caches the ensemble's raw sum at each training unit.
    """

    def __init__(self, X: np.ndarray, n_trees: int, *, alpha: float, beta: float, leaf_sd: float,
                 n_cut: int = 100, p_grow: float = 0.25, p_prune: float = 0.25):
        self.grid = CovariateGrid(X, n_cut)
        self.xb = self.grid.bin(X)
        self.n = self.xb.shape[0]
        self.m = n_trees
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.leaf_sd = float(leaf_sd)
        self.p_grow = float(p_grow)
        self.p_prune = float(p_prune)
        self.var = np.full((n_trees, MAX_NODES), UNUSED, dtype=np.int32)
        self.var[:, 0] = LEAF
        self.cut = np.zeros((n_trees, MAX_NODES), dtype=np.int32)
        self.val = np.zeros((n_trees, MAX_NODES))
        self.hi = np.ones(n_trees, dtype=np.int32)
        self.leaf_of = np.zeros((n_trees, self.n), dtype=np.int32)
        self.fit = np.zeros(self.n)
        self.last_log = np.zeros((n_trees, LOG_WIDTH))

    @property
    def ncut(self) -> np.ndarray:
        return self.grid.ncut

    def tree(self, t: int) -> DecisionTree:
        return DecisionTree(self.var[t].copy(), self.cut[t].copy(), self.val[t].copy())

    def set_tree(self, t: int, tree: DecisionTree) -> None:
        self.var[t] = tree.var
        self.cut[t] = tree.cut
        self.val[t] = tree.val
        self.hi[t] = tree.hi
        self.refresh()

    def refresh(self) -> None:
        """Recompute leaf membership and cached fits from the tree arrays."""
        _assign_leaves(self.var, self.cut, self.xb, self.leaf_of)
        self.fit = _predict(self.var, self.cut, self.val, self.xb)

    def update(self, target, precisions, rng: np.random.Generator, scale=None) -> np.ndarray:
        """Backfit every tree once against ``target`` and return the move log."""
        target = np.ascontiguousarray(target, dtype=float)
        prec = np.ascontiguousarray(precisions, dtype=float)
        sc = np.ones(self.n) if scale is None else np.ascontiguousarray(scale, dtype=float)
        _sweep(self.var, self.cut, self.val, self.hi, self.leaf_of, self.fit, self.xb, self.ncut,
               target, prec, sc, self.alpha, self.beta, self.leaf_sd, self.p_grow, self.p_prune,
               rng, self.last_log)
        return self.last_log

    def predict(self, X: np.ndarray) -> np.ndarray:
        return _predict(self.var, self.cut, self.val, self.grid.bin(X))

    def predict_training(self) -> np.ndarray:
        return _predict(self.var, self.cut, self.val, self.xb)

    def n_leaves(self) -> np.ndarray:
        return (self.var == LEAF).sum(axis=1)

    def copy(self) -> "Forest":
        new = Forest.__new__(Forest)
        new.__dict__.update(self.__dict__)
        for name in ("var", "cut", "val", "hi", "leaf_of", "fit", "last_log"):
            setattr(new, name, getattr(self, name).copy())
        return new


# ---------------------------------------------------------------------------
# BCF parameterization: mu(x, pi) + b_z * tau_raw(x), treatment effect (b1 - b0) * tau_raw

B_PRIOR_VAR = 0.5


def mu_covariates(X, pi, w=None) -> np.ndarray:
    cols = [np.asarray(X, dtype=float), np.asarray(pi, dtype=float).reshape(-1, 1)]
    if w is not None:
        cols.append(np.asarray(w, dtype=float).reshape(-1, 1))
    return np.hstack(cols)


def tau_covariates(X, w=None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if w is None:
        return X
    return np.hstack([X, np.asarray(w, dtype=float).reshape(-1, 1)])


@dataclass
class ForestState:
    """Prognostic and treatment ensembles on the standardized outcome scale."""

    mu: Forest
    tau: Forest
    z: np.ndarray
    b0: float = -0.5
    b1: float = 0.5
    use_w: bool = False

    @property
    def b(self) -> np.ndarray:
        return np.where(self.z == 1, self.b1, self.b0)

    @property
    def mu_fit(self) -> np.ndarray:
        """Control-arm prognostic value at each training unit."""
        return self.mu.fit + self.b0 * self.tau.fit

    @property
    def tau_fit(self) -> np.ndarray:
        return (self.b1 - self.b0) * self.tau.fit

    @property
    def f_fit(self) -> np.ndarray:
        return self.mu.fit + self.b * self.tau.fit

    def copy(self) -> "ForestState":
        return ForestState(self.mu.copy(), self.tau.copy(), self.z.copy(), self.b0, self.b1, self.use_w)


def init_forests(d, cfg, rng=None) -> ForestState:
    """Stump ensembles with zero leaves; leaf scales follow BCF defaults.

    Leaf prior sds on the standardized scale are ``2 / sqrt(n_trees_mu)`` for
    the prognostic forest and ``1 / sqrt(n_trees_tau)`` for the treatment
    forest. ``rng`` is accepted for interface symmetry; initialization is
    deterministic.
    """
    w = d.w if cfg.w_as_covariate else None
    mu = Forest(mu_covariates(d.X, d.pi, w), cfg.n_trees_mu, alpha=cfg.alpha_mu, beta=cfg.beta_mu,
                leaf_sd=2.0 / math.sqrt(cfg.n_trees_mu), n_cut=cfg.n_cutpoints)
    tau = Forest(tau_covariates(d.X, w), cfg.n_trees_tau, alpha=cfg.alpha_tau, beta=cfg.beta_tau,
                 leaf_sd=1.0 / math.sqrt(cfg.n_trees_tau), n_cut=cfg.n_cutpoints)
    return ForestState(mu, tau, np.asarray(d.z, dtype=np.int8).copy(), use_w=cfg.w_as_covariate)


def update_forest(state: ForestState, which: str, target, precisions, rng) -> np.ndarray:
    """Backfit one ensemble.

    For ``which="mu"`` the target is ``y - b_z * tau_raw``; for ``"tau"`` it is
    ``y - mu`` and each unit's contribution is multiplied by its arm scale
    ``b_z``. Returns the per-tree move log.
    """
    if which == "mu":
        return state.mu.update(target, precisions, rng)
    if which == "tau":
        return state.tau.update(target, precisions, rng, scale=state.b)
    raise ValueError(f"unknown ensemble {which!r}")


def treatment_scale_conditional(tau_raw, resid, precisions, z, arm: int, prior_var: float = B_PRIOR_VAR):
    """Mean and variance of the normal full conditional of ``b_arm``."""
    sel = np.asarray(z) == arm
    t = np.asarray(tau_raw)[sel]
    lam = np.asarray(precisions)[sel]
    r = np.asarray(resid)[sel]
    post_prec = 1.0 / prior_var + np.sum(lam * t * t)
    return float(np.sum(lam * t * r) / post_prec), float(1.0 / post_prec)


def update_treatment_scales(state: ForestState, resid, precisions, rng) -> tuple[float, float]:
    """Redraw ``b0`` and ``b1`` given the treatment forest fit.

    ``resid`` is ``y - mu_raw`` (outcome minus the prognostic forest).
    """
    m0, v0 = treatment_scale_conditional(state.tau.fit, resid, precisions, state.z, 0)
    m1, v1 = treatment_scale_conditional(state.tau.fit, resid, precisions, state.z, 1)
    e0, e1 = rng.standard_normal(2)
    state.b0 = m0 + math.sqrt(v0) * e0
    state.b1 = m1 + math.sqrt(v1) * e1
    return state.b0, state.b1


def predict(state: ForestState, X, pi, w=None) -> tuple[np.ndarray, np.ndarray]:
    """Control-arm prognostic value and treatment effect at new covariates."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    pi = np.atleast_1d(np.asarray(pi, dtype=float))
    if state.use_w and w is None:
        raise ValueError("this forest was fit with w as a covariate; pass w")
    wc = np.atleast_1d(np.asarray(w, dtype=float)) if state.use_w else None
    expected = state.tau.grid.p - (1 if state.use_w else 0)
    if X.shape[1] != expected:
        raise ValueError(f"expected {expected} covariates, got {X.shape[1]}")
    raw_mu = state.mu.predict(mu_covariates(X, pi, wc))
    raw_tau = state.tau.predict(tau_covariates(X, wc))
    return raw_mu + state.b0 * raw_tau, (state.b1 - state.b0) * raw_tau
