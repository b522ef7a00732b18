"""Numeric inner loops.

Every kernel exists twice: a numba ``@njit`` version and a plain numpy version
that performs the same arithmetic in the same order.  Callers use the
unsuffixed names, which are bound at import time according to the
``ECTCONTROL_BACKEND`` environment variable (``numba`` or ``numpy``).  The
default is ``numba`` when it is importable.

The suffixed ``*_numba`` / ``*_numpy`` functions stay importable so tests and
``benchmarks/bench_kernels.py`` can compare the two paths directly.
"""
import os

import numpy as np

try:
    import numba as nb
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    nb = None
    HAVE_NUMBA = False


def _select_backend():
    requested = os.environ.get("ECTCONTROL_BACKEND", "").strip().lower()
    if requested in ("", "auto"):
        return "numba" if HAVE_NUMBA else "numpy"
    if requested not in ("numba", "numpy"):
        raise ValueError(f"ECTCONTROL_BACKEND must be 'numba' or 'numpy', got {requested!r}")
    if requested == "numba" and not HAVE_NUMBA:
        raise ImportError("ECTCONTROL_BACKEND=numba but numba is not installed")
    return requested


BACKEND = _select_backend()


def _njit(func):
    if not HAVE_NUMBA:
        return func
    return nb.njit(cache=True)(func)


# ---------------------------------------------------------------------------
# Symmetric eigendecomposition: parallel-ordering (round-robin) Jacobi
# ---------------------------------------------------------------------------

def round_robin_schedule(n):
    """Pairings for one Jacobi sweep.

    Returns an int array of shape ``(rounds, pairs, 2)``.  Within a round the
    pairs are disjoint, so their rotations commute and may be applied together.
    Odd ``n`` gets a dummy index ``n`` whose pairs are dropped.
    """
    m = n + (n % 2)
    if m < 2:
        return np.zeros((0, 0, 2), dtype=np.int64)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = []
        for k in range(m // 2):
            p, q = players[k], players[m - 1 - k]
            if p < n and q < n:
                pairs.append((min(p, q), max(p, q)))
        rounds.append(pairs)
        # rotate all but the first player
        players = [players[0], players[-1]] + players[1:-1]
    width = max(len(r) for r in rounds)
    sched = np.full((len(rounds), width, 2), -1, dtype=np.int64)
    for r, pairs in enumerate(rounds):
        for k, pq in enumerate(pairs):
            sched[r, k] = pq
    return sched


def _offdiag_norm_numpy(a):
    off = a - np.diag(np.diag(a))
    return np.sqrt(np.sum(off * off))


def jacobi_eigh_numpy(a, schedule, tol=1e-12, max_sweeps=100):
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    scale = np.sqrt(np.sum(a * a))
    target = tol * scale
    sweeps = 0
    while _offdiag_norm_numpy(a) > target:
        if sweeps >= max_sweeps:
            return np.diag(a).copy(), v, -1
        for r in range(schedule.shape[0]):
            pairs = schedule[r]
            pairs = pairs[pairs[:, 0] >= 0]
            p, q = pairs[:, 0], pairs[:, 1]
            apq = a[p, q]
            active = apq != 0.0
            if not np.any(active):
                continue
            p, q, apq = p[active], q[active], apq[active]
            app, aqq = a[p, p], a[q, q]
            tau = (aqq - app) / (2.0 * apq)
            sgn = np.where(tau >= 0.0, 1.0, -1.0)
            t = sgn / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        sweeps += 1
    return np.diag(a).copy(), v, sweeps


def jacobi_eigh_numba(a, schedule, tol=1e-12, max_sweeps=100):
    return _jacobi_eigh_nb(np.ascontiguousarray(a, dtype=np.float64), schedule, tol, max_sweeps)


@_njit
def _jacobi_eigh_nb(a_in, schedule, tol, max_sweeps):
    a = a_in.copy()
    n = a.shape[0]
    v = np.eye(n)
    scale = np.sqrt(np.sum(a * a))
    target = tol * scale
    width = schedule.shape[1]
    cs = np.empty(width)
    ss = np.empty(width)
    live = np.zeros(width, dtype=np.bool_)
    colp = np.empty(n)
    sweeps = 0
    while True:
        off = 0.0
        for i in range(n):
            for j in range(n):
                if i != j:
                    off += a[i, j] * a[i, j]
        if np.sqrt(off) <= target:
            break
        if sweeps >= max_sweeps:
            return np.diag(a).copy(), v, -1
        for r in range(schedule.shape[0]):
            any_live = False
            for k in range(width):
                p = schedule[r, k, 0]
                q = schedule[r, k, 1]
                live[k] = False
                if p < 0:
                    continue
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                sgn = 1.0 if tau >= 0.0 else -1.0
                t = sgn / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                cs[k] = c
                ss[k] = t * c
                live[k] = True
                any_live = True
            if not any_live:
                continue
            # all column rotations, then all row rotations (matches numpy order)
            for k in range(width):
                if not live[k]:
                    continue
                p = schedule[r, k, 0]
                q = schedule[r, k, 1]
                c = cs[k]
                s = ss[k]
                for i in range(n):
                    colp[i] = a[i, p]
                for i in range(n):
                    aq = a[i, q]
                    a[i, p] = c * colp[i] - s * aq
                    a[i, q] = s * colp[i] + c * aq
            for k in range(width):
                if not live[k]:
                    continue
                p = schedule[r, k, 0]
                q = schedule[r, k, 1]
                c = cs[k]
                s = ss[k]
                for j in range(n):
                    ap = a[p, j]
                    aq = a[q, j]
                    a[p, j] = c * ap - s * aq
                    a[q, j] = s * ap + c * aq
            for k in range(width):
                if not live[k]:
                    continue
                p = schedule[r, k, 0]
                q = schedule[r, k, 1]
                a[p, q] = 0.0
                a[q, p] = 0.0
                c = cs[k]
                s = ss[k]
                for i in range(n):
                    vp = v[i, p]
                    vq = v[i, q]
                    v[i, p] = c * vp - s * vq
                    v[i, q] = s * vp + c * vq
        sweeps += 1
    return np.diag(a).copy(), v, sweeps


# ---------------------------------------------------------------------------
# Discrete LTI recursion  x(k+1) = A x(k) + b u(k)
# ---------------------------------------------------------------------------

def lti_simulate_numpy(a, b, u, x0, steps, out_node, keep_states):
    n = a.shape[0]
    x = np.array(x0, dtype=np.float64, copy=True)
    out = np.empty(steps + 1)
    states = np.empty((n, steps + 1 if keep_states else 0))
    for k in range(steps + 1):
        out[k] = x[out_node] if out_node >= 0 else np.sqrt(np.dot(x, x))
        if keep_states:
            states[:, k] = x
        if k == steps:
            break
        uk = u[k] if k < u.shape[0] else 0.0
        x = a @ x + b * uk
    return out, states


@_njit
def _lti_simulate_nb(a, b, u, x0, steps, out_node, keep_states):
    n = a.shape[0]
    x = x0.copy()
    out = np.empty(steps + 1)
    states = np.empty((n, steps + 1 if keep_states else 0))
    for k in range(steps + 1):
        if out_node >= 0:
            out[k] = x[out_node]
        else:
            out[k] = np.sqrt(np.dot(x, x))
        if keep_states:
            states[:, k] = x
        if k == steps:
            break
        uk = u[k] if k < u.shape[0] else 0.0
        x = a @ x + b * uk
    return out, states


def lti_simulate_numba(a, b, u, x0, steps, out_node, keep_states):
    return _lti_simulate_nb(
        np.ascontiguousarray(a, dtype=np.float64),
        np.ascontiguousarray(b, dtype=np.float64),
        np.ascontiguousarray(u, dtype=np.float64),
        np.ascontiguousarray(x0, dtype=np.float64),
        int(steps), int(out_node), bool(keep_states),
    )


# ---------------------------------------------------------------------------
# Gramian energy: per column j of B, sum_t ||A^t b_j||^2
# ---------------------------------------------------------------------------

def gramian_energy_numpy(a, bmat, tol, max_terms, horizon):
    """Return ``(energy_per_column, terms_used, converged)``.

    ``horizon > 0`` sums exactly that many terms; otherwise terms are added
    until the total increment drops to ``tol`` or ``max_terms`` is reached.
    """
    x = np.array(bmat, dtype=np.float64, copy=True)
    energy = np.zeros(x.shape[1])
    limit = horizon if horizon > 0 else max_terms
    terms = 0
    while terms < limit:
        inc = np.sum(x * x, axis=0)
        energy += inc
        terms += 1
        if horizon <= 0 and inc.sum() <= tol:
            return energy, terms, True
        x = a @ x
    return energy, terms, horizon > 0


@_njit
def _gramian_energy_nb(a, bmat, tol, max_terms, horizon):
    x = bmat.copy()
    m = x.shape[1]
    energy = np.zeros(m)
    inc = np.empty(m)
    limit = horizon if horizon > 0 else max_terms
    terms = 0
    while terms < limit:
        for j in range(m):
            inc[j] = np.sum(x[:, j] * x[:, j])
        energy += inc
        terms += 1
        if horizon <= 0 and inc.sum() <= tol:
            return energy, terms, True
        x = a @ x
    return energy, terms, horizon > 0


def gramian_energy_numba(a, bmat, tol, max_terms, horizon):
    return _gramian_energy_nb(
        np.ascontiguousarray(a, dtype=np.float64),
        np.ascontiguousarray(bmat, dtype=np.float64),
        float(tol), int(max_terms), int(horizon),
    )


# ---------------------------------------------------------------------------
# Indirect effect a*b for many resampled datasets
#   a: coefficient of x in  m ~ 1 + x + C
#   b: coefficient of m in  y ~ 1 + x + m + C
# Solved through normal equations; a draw whose Gram matrix is numerically
# singular is reported as not ok.
# ---------------------------------------------------------------------------

_SINGULAR_RTOL = 1e-12


@_njit
def _chol_solve(g, rhs, rtol):
    p = g.shape[0]
    low = np.zeros((p, p))
    diag_max = 0.0
    for i in range(p):
        if g[i, i] > diag_max:
            diag_max = g[i, i]
    for j in range(p):
        d = g[j, j]
        for k in range(j):
            d -= low[j, k] * low[j, k]
        if d <= rtol * diag_max:
            return rhs, False
        low[j, j] = np.sqrt(d)
        for i in range(j + 1, p):
            acc = g[i, j]
            for k in range(j):
                acc -= low[i, k] * low[j, k]
            low[i, j] = acc / low[j, j]
    z = np.empty(p)
    for i in range(p):
        acc = rhs[i]
        for k in range(i):
            acc -= low[i, k] * z[k]
        z[i] = acc / low[i, i]
    sol = np.empty(p)
    for i in range(p - 1, -1, -1):
        acc = z[i]
        for k in range(i + 1, p):
            acc -= low[k, i] * sol[k]
        sol[i] = acc / low[i, i]
    return sol, True


@_njit
def _ab_one(x, m, y, cov, rows):
    # design columns: 1, x, cov..., then m for the outcome model
    n = rows.shape[0]
    q = cov.shape[1]
    p1 = 2 + q
    p2 = p1 + 1
    g = np.zeros((p2, p2))
    rm = np.zeros(p2)
    ry = np.zeros(p2)
    row = np.empty(p2)
    for t in range(n):
        i = rows[t]
        row[0] = 1.0
        row[1] = x[i]
        for c in range(q):
            row[2 + c] = cov[i, c]
        row[p1] = m[t]
        for r in range(p2):
            ry[r] += row[r] * y[i]
            if r < p1:
                rm[r] += row[r] * m[t]
            for c in range(r, p2):
                g[r, c] += row[r] * row[c]
    for r in range(p2):
        for c in range(r):
            g[r, c] = g[c, r]
    sol_m, ok_m = _chol_solve(g[:p1, :p1].copy(), rm[:p1].copy(), _SINGULAR_RTOL)
    sol_y, ok_y = _chol_solve(g, ry, _SINGULAR_RTOL)
    if not (ok_m and ok_y):
        return np.nan, False
    return sol_m[1] * sol_y[p1], True


@_njit
def _indirect_resampled_nb(x, m, y, cov, idx):
    nb_draws = idx.shape[0]
    n = idx.shape[1]
    out = np.empty(nb_draws)
    ok = np.zeros(nb_draws, dtype=np.bool_)
    mrow = np.empty(n)
    for d in range(nb_draws):
        rows = idx[d]
        for t in range(n):
            mrow[t] = m[rows[t]]
        out[d], ok[d] = _ab_one(x, mrow, y, cov, rows)
    return out, ok


@_njit
def _indirect_given_m_nb(x, mstar, y, cov):
    nb_draws = mstar.shape[0]
    n = mstar.shape[1]
    rows = np.arange(n)
    out = np.empty(nb_draws)
    ok = np.zeros(nb_draws, dtype=np.bool_)
    for d in range(nb_draws):
        out[d], ok[d] = _ab_one(x, mstar[d], y, cov, rows)
    return out, ok


def _cov2d(cov, n):
    if cov is None:
        return np.zeros((n, 0))
    cov = np.asarray(cov, dtype=np.float64)
    return cov.reshape(n, -1)


def indirect_resampled_numba(x, m, y, cov, idx):
    """ab for each bootstrap draw; ``idx`` has shape ``(draws, n)``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _indirect_resampled_nb(
        x, np.ascontiguousarray(m, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.float64),
        np.ascontiguousarray(_cov2d(cov, x.shape[0])),
        np.ascontiguousarray(idx, dtype=np.int64),
    )


def indirect_given_m_numba(x, mstar, y, cov):
    """ab for each row of ``mstar`` used as the mediator (rows not resampled)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _indirect_given_m_nb(
        x, np.ascontiguousarray(mstar, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.float64),
        np.ascontiguousarray(_cov2d(cov, x.shape[0])),
    )


def _batched_chol_solve(g, rhs):
    # numpy mirror of _chol_solve, vectorised over the leading axis
    nbatch, p, _ = g.shape
    low = np.zeros_like(g)
    ok = np.ones(nbatch, dtype=bool)
    diag_max = np.max(np.diagonal(g, axis1=1, axis2=2), axis=1)
    for j in range(p):
        d = g[:, j, j] - np.sum(low[:, j, :j] * low[:, j, :j], axis=1)
        ok &= d > _SINGULAR_RTOL * diag_max
        low[:, j, j] = np.sqrt(np.where(ok, d, 1.0))
        for i in range(j + 1, p):
            acc = g[:, i, j] - np.sum(low[:, i, :j] * low[:, j, :j], axis=1)
            low[:, i, j] = acc / low[:, j, j]
    z = np.empty((nbatch, p))
    for i in range(p):
        z[:, i] = (rhs[:, i] - np.sum(low[:, i, :i] * z[:, :i], axis=1)) / low[:, i, i]
    sol = np.empty((nbatch, p))
    for i in range(p - 1, -1, -1):
        sol[:, i] = (z[:, i] - np.sum(low[:, i + 1:, i] * sol[:, i + 1:], axis=1)) / low[:, i, i]
    return sol, ok


def _ab_batch_numpy(design, mb, yb):
    # design: (B, n, p1) ; mb, yb: (B, n)
    full = np.concatenate([design, mb[:, :, None]], axis=2)
    g = np.einsum("bni,bnj->bij", full, full)
    ry = np.einsum("bni,bn->bi", full, yb)
    p1 = design.shape[2]
    rm = ry.copy()
    rm[:, :p1] = np.einsum("bni,bn->bi", design, mb)
    sol_m, ok_m = _batched_chol_solve(g[:, :p1, :p1].copy(), rm[:, :p1].copy())
    sol_y, ok_y = _batched_chol_solve(g, ry)
    ok = ok_m & ok_y
    ab = np.where(ok, sol_m[:, 1] * sol_y[:, p1], np.nan)
    return ab, ok


def indirect_resampled_numpy(x, m, y, cov, idx, chunk=512):
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    design = np.column_stack([np.ones(n), x, _cov2d(cov, n)])
    m = np.asarray(m, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.empty(idx.shape[0])
    ok = np.empty(idx.shape[0], dtype=bool)
    for s in range(0, idx.shape[0], chunk):
        rows = idx[s:s + chunk]
        out[s:s + chunk], ok[s:s + chunk] = _ab_batch_numpy(design[rows], m[rows], y[rows])
    return out, ok


def indirect_given_m_numpy(x, mstar, y, cov, chunk=512):
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    design = np.column_stack([np.ones(n), x, _cov2d(cov, n)])
    mstar = np.asarray(mstar, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.empty(mstar.shape[0])
    ok = np.empty(mstar.shape[0], dtype=bool)
    for s in range(0, mstar.shape[0], chunk):
        mb = mstar[s:s + chunk]
        b = mb.shape[0]
        out[s:s + chunk], ok[s:s + chunk] = _ab_batch_numpy(
            np.broadcast_to(design, (b,) + design.shape), mb, np.broadcast_to(y, (b, n)))
    return out, ok


# ---------------------------------------------------------------------------
# Bagged regression trees (CART, squared error), fit + predict in one call.
# Bootstrap rows are drawn by the caller so both backends see identical data.
# Trees are stored as flat arrays: feature (-1 for leaf), threshold, left,
# right, value.
# ---------------------------------------------------------------------------

def _seq_sum(v):
    return float(np.cumsum(v)[-1]) if v.size else 0.0


def _best_split_numpy(xs, ys, min_leaf):
    n, d = xs.shape
    best_gain, best_f, best_thr = -np.inf, -1, 0.0
    total = _seq_sum(ys)        # sequential, to match the compiled loop bit for bit
    base = total * total / n
    for f in range(d):
        order = np.argsort(xs[:, f], kind="mergesort")
        xv = xs[order, f]
        cs = np.cumsum(ys[order])
        nl = np.arange(1, n)
        sl = cs[:-1]
        sr = total - sl
        gain = sl * sl / nl + sr * sr / (n - nl) - base
        valid = (nl >= min_leaf) & (n - nl >= min_leaf) & (xv[1:] > xv[:-1])
        if not np.any(valid):
            continue
        gain = np.where(valid, gain, -np.inf)
        k = int(np.argmax(gain))
        if gain[k] > best_gain:
            best_gain, best_f = gain[k], f
            best_thr = 0.5 * (xv[k] + xv[k + 1])
    return best_f, best_thr, best_gain


def _grow_tree_numpy(x, y, rows, max_depth, min_leaf):
    feat, thr, left, right, val = [], [], [], [], []
    stack = [(rows, 0, -1, False)]
    while stack:
        node_rows, depth, parent, is_right = stack.pop()
        node = len(feat)
        if parent >= 0:
            if is_right:
                right[parent] = node
            else:
                left[parent] = node
        ys = y[node_rows]
        feat.append(-1)
        thr.append(0.0)
        left.append(-1)
        right.append(-1)
        val.append(_seq_sum(ys) / ys.shape[0])
        if depth >= max_depth or node_rows.shape[0] < 2 * min_leaf:
            continue
        f, t, gain = _best_split_numpy(x[node_rows], ys, min_leaf)
        if f < 0 or not gain > 1e-12 * max(1.0, _seq_sum(ys * ys)):
            continue
        feat[node], thr[node] = f, t
        go_left = x[node_rows, f] <= t
        stack.append((node_rows[~go_left], depth + 1, node, True))
        stack.append((node_rows[go_left], depth + 1, node, False))
    return np.array(feat), np.array(thr), np.array(left), np.array(right), np.array(val)


def _predict_tree_numpy(tree, xt):
    feat, thr, left, right, val = tree
    out = np.empty(xt.shape[0])
    for i in range(xt.shape[0]):
        node = 0
        while feat[node] >= 0:
            node = left[node] if xt[i, feat[node]] <= thr[node] else right[node]
        out[i] = val[node]
    return out


def bagged_trees_numpy(x, y, xt, boot_idx, max_depth, min_leaf):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    pred = np.zeros(xt.shape[0])
    for rows in np.asarray(boot_idx, dtype=np.int64):
        pred += _predict_tree_numpy(_grow_tree_numpy(x, y, rows, max_depth, min_leaf), xt)
    return pred / boot_idx.shape[0]


@_njit
def _best_split_nb(x, y, rows, min_leaf):
    n = rows.shape[0]
    d = x.shape[1]
    best_gain = -np.inf
    best_f = -1
    best_thr = 0.0
    total = 0.0
    for t in range(n):
        total += y[rows[t]]
    base = total * total / n
    xv = np.empty(n)
    yv = np.empty(n)
    for f in range(d):
        for t in range(n):
            xv[t] = x[rows[t], f]
        order = np.argsort(xv, kind="mergesort")
        for t in range(n):
            yv[t] = y[rows[order[t]]]
        xs = xv[order]
        cs = np.cumsum(yv)
        kbest = -1
        gbest = -np.inf
        for k in range(n - 1):
            nl = k + 1
            if nl < min_leaf or n - nl < min_leaf or not xs[k + 1] > xs[k]:
                continue
            sl = cs[k]
            sr = total - sl
            g = sl * sl / nl + sr * sr / (n - nl) - base
            if g > gbest:
                gbest = g
                kbest = k
        if kbest >= 0 and gbest > best_gain:
            best_gain = gbest
            best_f = f
            best_thr = 0.5 * (xs[kbest] + xs[kbest + 1])
    return best_f, best_thr, best_gain


@_njit
def _grow_tree_nb(x, y, rows, max_depth, min_leaf):
    cap = 2 ** (max_depth + 1)
    feat = np.full(cap, -1, dtype=np.int64)
    thr = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    val = np.zeros(cap)
    # explicit stack of (start, stop) slices into a working row buffer
    buf = rows.copy()
    st_lo = np.empty(cap, dtype=np.int64)
    st_hi = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    st_parent = np.empty(cap, dtype=np.int64)
    st_right = np.empty(cap, dtype=np.bool_)
    top = 0
    st_lo[0] = 0
    st_hi[0] = buf.shape[0]
    st_depth[0] = 0
    st_parent[0] = -1
    st_right[0] = False
    top = 1
    count = 0
    while top > 0:
        top -= 1
        lo = st_lo[top]
        hi = st_hi[top]
        depth = st_depth[top]
        parent = st_parent[top]
        node = count
        count += 1
        if parent >= 0:
            if st_right[top]:
                right[parent] = node
            else:
                left[parent] = node
        node_rows = buf[lo:hi].copy()
        m = hi - lo
        acc = 0.0
        sq = 0.0
        for t in range(m):
            acc += y[node_rows[t]]
            sq += y[node_rows[t]] * y[node_rows[t]]
        val[node] = acc / m
        if depth >= max_depth or m < 2 * min_leaf:
            continue
        f, t_split, gain = _best_split_nb(x, y, node_rows, min_leaf)
        if f < 0 or not gain > 1e-12 * max(1.0, sq):
            continue
        feat[node] = f
        thr[node] = t_split
        nleft = 0
        for t in range(m):
            if x[node_rows[t], f] <= t_split:
                buf[lo + nleft] = node_rows[t]
                nleft += 1
        k = lo + nleft
        for t in range(m):
            if not x[node_rows[t], f] <= t_split:
                buf[k] = node_rows[t]
                k += 1
        # push right first so the left child is numbered first (as in numpy path)
        st_lo[top] = lo + nleft
        st_hi[top] = hi
        st_depth[top] = depth + 1
        st_parent[top] = node
        st_right[top] = True
        top += 1
        st_lo[top] = lo
        st_hi[top] = lo + nleft
        st_depth[top] = depth + 1
        st_parent[top] = node
        st_right[top] = False
        top += 1
    return feat, thr, left, right, val


@_njit
def _bagged_trees_nb(x, y, xt, boot_idx, max_depth, min_leaf):
    pred = np.zeros(xt.shape[0])
    for b in range(boot_idx.shape[0]):
        feat, thr, left, right, val = _grow_tree_nb(x, y, boot_idx[b], max_depth, min_leaf)
        for i in range(xt.shape[0]):
            node = 0
            while feat[node] >= 0:
                if xt[i, feat[node]] <= thr[node]:
                    node = left[node]
                else:
                    node = right[node]
            pred[i] += val[node]
    return pred / boot_idx.shape[0]


def bagged_trees_numba(x, y, xt, boot_idx, max_depth, min_leaf):
    return _bagged_trees_nb(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.float64),
        np.ascontiguousarray(xt, dtype=np.float64),
        np.ascontiguousarray(boot_idx, dtype=np.int64),
        int(max_depth), int(min_leaf),
    )


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_KERNELS = ("jacobi_eigh", "lti_simulate", "gramian_energy", "indirect_resampled",
            "indirect_given_m", "bagged_trees")


def get_kernel(name, backend=None):
    """Return the implementation of ``name`` for ``backend`` (default: active)."""
    if name not in _KERNELS:
        raise KeyError(name)
    backend = backend or BACKEND
    if backend == "numba" and not HAVE_NUMBA:
        backend = "numpy"
    return globals()[f"{name}_{backend}"]


jacobi_eigh = get_kernel("jacobi_eigh")
lti_simulate = get_kernel("lti_simulate")
gramian_energy = get_kernel("gramian_energy")
indirect_resampled = get_kernel("indirect_resampled")
indirect_given_m = get_kernel("indirect_given_m")
bagged_trees = get_kernel("bagged_trees")
