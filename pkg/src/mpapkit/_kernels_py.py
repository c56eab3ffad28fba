"""Pure-Python/numpy fallback for the compiled kernels in ``_kernels.pyx``.

Same signatures and the same floating-point operation order: prefix sums are
sequential (``np.cumsum``), node totals are accumulated in row-index order, and
ties inside a feature resolve by row index because sorts are stable.
"""
import numpy as np
from scipy.signal import lfilter

ROUNDOFF = 1e-10


def _rk4_interval_map(dt, rc, c, rd, substeps):
    # One sample interval of RK4 with linearly interpolated flow is affine:
    # pc_next = P * pc + a * q0 + b * q1. Recover (P, a, b) from basis inputs.
    h = dt / substeps
    inv_c, inv_rd = 1.0 / c, 1.0 / rd
    coeffs = []
    for pc, q0, q1 in ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)):
        dq = q1 - q0
        for j in range(substeps):
            qa = q0 + dq * (j / substeps)
            qm = q0 + dq * ((j + 0.5) / substeps)
            qb = q0 + dq * ((j + 1) / substeps)
            k1 = (qa - pc * inv_rd) * inv_c
            k2 = (qm - (pc + 0.5 * h * k1) * inv_rd) * inv_c
            k3 = (qm - (pc + 0.5 * h * k2) * inv_rd) * inv_c
            k4 = (qb - (pc + h * k3) * inv_rd) * inv_c
            pc = pc + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        coeffs.append(pc)
    return coeffs


def rk4_cycle(q, dt, rc, c, rd, pc0, substeps, out):
    q = np.asarray(q, dtype=np.float64)
    P, a, b = _rk4_interval_map(dt, rc, c, rd, substeps)
    u = a * q + b * np.roll(q, -1)
    pcs = lfilter([1.0], [1.0, -P], u, zi=[P * pc0])[0]
    out[0] = rc * q[0] + pc0
    out[1:] = rc * q[1:] + pcs[:-1]
    return float(pcs[-1])


class TreeWorkspace:
    """Mirror of the compiled workspace; holds X and its presorted order."""

    def __init__(self, X, order):
        self.X = np.asarray(X, dtype=np.float64)
        self.order = np.asarray(order, dtype=np.intc)
        self.n, self.n_features = self.X.shape

    def grow(self, gw, hw, selected, features, max_depth, min_samples_leaf, min_gain, lam):
        gw = np.asarray(gw, dtype=np.float64)
        hw = np.asarray(hw, dtype=np.float64)
        if gw.shape[0] != self.n or hw.shape[0] != self.n or len(selected) != self.n:
            raise ValueError("gradient arrays do not match the workspace rows")
        features = np.asarray(features, dtype=np.intc)
        if features.size and (features.min() < 0 or features.max() >= self.n_features):
            raise ValueError("feature index out of range")
        return grow_tree(self.X, self.order, gw, hw, selected, features, max_depth,
                         min_samples_leaf, min_gain, lam)


def grow_tree(X, order, gw, hw, selected, features, max_depth, min_samples_leaf,
              min_gain, lam):
    selected = np.asarray(selected, dtype=bool)
    rows = np.flatnonzero(selected).astype(np.intc)
    if rows.size == 0:
        raise ValueError("no rows selected for tree growth")
    min_leaf = max(1, int(min_samples_leaf))
    nodes = {k: [] for k in ("feature", "threshold", "left", "right", "value", "gain", "count")}

    def new_node():
        for key in nodes:
            nodes[key].append(0)
        return len(nodes["value"]) - 1

    def grow(rows, depth):
        node = new_node()
        n = rows.size
        G = np.cumsum(gw[rows])[-1]
        H = np.cumsum(hw[rows])[-1]
        nodes["value"][node] = -G / (H + lam)
        nodes["count"][node] = n
        nodes["feature"][node] = -1
        nodes["left"][node] = -1
        nodes["right"][node] = -1
        nodes["threshold"][node] = 0.0
        nodes["gain"][node] = 0.0
        if depth >= max_depth or n < 2 * min_leaf or n < 2:
            return node
        parent = G * G / (H + lam)
        best_gain, best_f, best_thr = -1.0e300, -1, 0.0
        nl_all = np.arange(1, n)
        valid_size = (nl_all >= min_leaf) & (n - nl_all >= min_leaf)
        for f in features:
            vals = X[rows, f]
            srt = rows[np.argsort(vals, kind="stable")]
            sv = X[srt, f]
            GL = np.cumsum(gw[srt])[:-1]
            HL = np.cumsum(hw[srt])[:-1]
            GR = G - GL
            HR = H - HL
            valid = valid_size & (sv[1:] > sv[:-1]) & (HL + lam > 0.0) & (HR + lam > 0.0)
            if not valid.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                gains = GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent
            gains = np.where(valid, gains, -np.inf)
            k = int(np.argmax(gains))
            if gains[k] > best_gain:
                best_gain = float(gains[k])
                best_f = int(f)
                v, vn = sv[k], sv[k + 1]
                thr = 0.5 * (v + vn)
                best_thr = v if thr >= vn else thr
        if best_f < 0:
            return node
        if not best_gain > max(ROUNDOFF * parent, min_gain):
            return node
        go_left = X[rows, best_f] <= best_thr
        nodes["feature"][node] = best_f
        nodes["threshold"][node] = best_thr
        nodes["gain"][node] = best_gain
        nodes["left"][node] = grow(rows[go_left], depth + 1)
        nodes["right"][node] = grow(rows[~go_left], depth + 1)
        return node

    grow(rows, 0)
    return (
        np.asarray(nodes["feature"], dtype=np.intc),
        np.asarray(nodes["threshold"], dtype=np.float64),
        np.asarray(nodes["left"], dtype=np.intc),
        np.asarray(nodes["right"], dtype=np.intc),
        np.asarray(nodes["value"], dtype=np.float64),
        np.asarray(nodes["gain"], dtype=np.float64),
        np.asarray(nodes["count"], dtype=np.intc),
    )


def predict_forest(X, feature, threshold, left, right, value, default_left, offsets,
                   weights, base):
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    acc = np.full(n, base, dtype=np.float64)
    rows = np.arange(n)
    for t, off in enumerate(offsets):
        node = np.zeros(n, dtype=np.int64)
        while True:
            feat = feature[off + node]
            active = feat >= 0
            if not active.any():
                break
            idx = rows[active]
            nd = node[active] + off
            x = X[idx, feat[active]]
            go_left = (x <= threshold[nd]) | (np.isnan(x) & (default_left[nd] != 0))
            node[active] = np.where(go_left, left[nd], right[nd])
        acc = acc + weights[t] * value[off + node]
    return acc
