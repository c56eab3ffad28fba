# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: Windkessel RK4 cycle, exact tree growth, forest evaluation.

Every routine mirrors ``_kernels_py`` operation for operation so both backends
produce bit-identical trees and predictions.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef double ROUNDOFF = 1e-10


def rk4_cycle(const double[::1] q, double dt, double rc, double c, double rd,
              double pc0, int substeps, double[::1] out):
    """Integrate one cardiac cycle; fills ``out`` with p at each sample, returns p_c(T).

    Flow is linearly interpolated inside each sample interval, so ``substeps``
    RK4 steps over one interval form an affine map
    pc -> P*pc + a*q[i] + b*q[i+1]; it is built once from basis inputs.
    """
    cdef Py_ssize_t n = q.shape[0], i
    cdef int j, basis
    cdef double h = dt / substeps
    cdef double inv_c = 1.0 / c, inv_rd = 1.0 / rd
    cdef double pc, q0, q1, dq, qa, qm, qb, k1, k2, k3, k4
    cdef double coef[3]
    with nogil:
        for basis in range(3):
            pc = 1.0 if basis == 0 else 0.0
            q0 = 1.0 if basis == 1 else 0.0
            q1 = 1.0 if basis == 2 else 0.0
            dq = q1 - q0
            for j in range(substeps):
                qa = q0 + dq * (<double>j / substeps)
                qm = q0 + dq * ((j + 0.5) / substeps)
                qb = q0 + dq * (<double>(j + 1) / substeps)
                k1 = (qa - pc * inv_rd) * inv_c
                k2 = (qm - (pc + 0.5 * h * k1) * inv_rd) * inv_c
                k3 = (qm - (pc + 0.5 * h * k2) * inv_rd) * inv_c
                k4 = (qb - (pc + h * k3) * inv_rd) * inv_c
                pc = pc + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            coef[basis] = pc
        pc = pc0
        for i in range(n):
            out[i] = rc * q[i] + pc
            pc = coef[0] * pc + (coef[1] * q[i] + coef[2] * q[(i + 1) % n])
    return pc


cdef class _Grower:
    # raw pointers into arrays owned by grow_tree's frame
    cdef const double* xt      # column-major copy of X: xt[f * n + r]
    cdef Py_ssize_t n
    cdef const double* gw
    cdef const double* hw
    cdef int* by_feature       # fa rows of m entries
    cdef int* by_index
    cdef Py_ssize_t m
    cdef const int* features
    cdef int fa
    cdef int* tmp
    cdef char* goes_left
    cdef int max_depth, min_leaf
    cdef bint unit_hessian
    cdef double min_gain, lam
    cdef int n_nodes
    cdef int* feature
    cdef double* threshold
    cdef int* left
    cdef int* right
    cdef double* value
    cdef double* gain
    cdef int* count

    cdef int grow(self, int start, int end, int depth) noexcept nogil:
        cdef int node = self.n_nodes
        cdef int k, r, fi, f, nl, best_f = -1, n = end - start
        cdef int min_leaf = self.min_leaf
        cdef double lam = self.lam
        cdef double G = 0.0, H = 0.0, GL, HL, GR, HR, gain, parent, v, vn, thr
        cdef double best_gain = -1.0e300, best_thr = 0.0
        cdef const double* col
        cdef const double* gw = self.gw
        cdef const double* hw = self.hw
        cdef int* rows
        self.n_nodes += 1
        for k in range(start, end):
            r = self.by_index[k]
            G += gw[r]
            H += hw[r]
        self.value[node] = -G / (H + lam)
        self.count[node] = n
        self.feature[node] = -1
        self.left[node] = -1
        self.right[node] = -1
        self.threshold[node] = 0.0
        self.gain[node] = 0.0
        if depth >= self.max_depth or n < 2 * min_leaf or n < 2:
            return node
        parent = G * G / (H + lam)
        for fi in range(self.fa):
            f = self.features[fi]
            col = self.xt + f * self.n
            rows = self.by_feature + fi * self.m
            GL = 0.0
            HL = 0.0
            # rows before the first admissible split point only accumulate
            for k in range(start, start + min_leaf - 1):
                r = rows[k]
                GL += gw[r]
                HL += hw[r]
            vn = col[rows[start + min_leaf - 1]]
            for k in range(start + min_leaf - 1, end - min_leaf):
                r = rows[k]
                GL += gw[r]
                if self.unit_hessian:
                    # a running sum of ones is exact, so this matches the summed form
                    HL = <double>(k - start + 1)
                else:
                    HL += hw[r]
                v = vn
                vn = col[rows[k + 1]]
                if not (vn > v):
                    continue
                GR = G - GL
                HR = H - HL
                if HL + lam <= 0.0 or HR + lam <= 0.0:
                    continue
                gain = GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    thr = 0.5 * (v + vn)
                    if thr >= vn:
                        thr = v
                    best_thr = thr
        if best_f < 0:
            return node
        thr = ROUNDOFF * parent
        if thr < self.min_gain:
            thr = self.min_gain
        if not (best_gain > thr):
            return node

        col = self.xt + best_f * self.n
        nl = 0
        for k in range(start, end):
            r = self.by_index[k]
            self.goes_left[r] = col[r] <= best_thr
            nl += self.goes_left[r]
        self._partition(self.by_index, start, end)
        if depth + 1 < self.max_depth:
            # children at max depth become leaves and never scan features
            for fi in range(self.fa):
                self._partition(self.by_feature + fi * self.m, start, end)

        self.feature[node] = best_f
        self.threshold[node] = best_thr
        self.gain[node] = best_gain
        self.left[node] = self.grow(start, start + nl, depth + 1)
        self.right[node] = self.grow(start + nl, end, depth + 1)
        return node

    cdef void _partition(self, int* rows, int start, int end) noexcept nogil:
        # stable: left block keeps order, right block keeps order
        cdef int k, r, a = start, b = 0
        cdef char* gl = self.goes_left
        cdef int* tmp = self.tmp
        for k in range(start, end):
            r = rows[k]
            if gl[r]:
                rows[a] = r
                a += 1
            else:
                tmp[b] = r
                b += 1
        for k in range(b):
            rows[a + k] = tmp[k]


cdef class TreeWorkspace:
    """Per-dataset state reused across trees: transposed X, presorted order, buffers."""
    cdef readonly object xt, order
    cdef object by_feature, by_index, tmp, goes_left, nodes_i, nodes_d
    cdef readonly Py_ssize_t n, n_features

    def __init__(self, X, order):
        X = np.asarray(X, dtype=np.float64)
        self.n = X.shape[0]
        self.n_features = X.shape[1]
        self.xt = np.ascontiguousarray(X.T)
        self.order = np.ascontiguousarray(order, dtype=np.intc)
        self.by_feature = np.empty(max(self.n_features * self.n, 1), dtype=np.intc)
        self.by_index = np.empty(max(self.n, 1), dtype=np.intc)
        self.tmp = np.empty(max(self.n, 1), dtype=np.intc)
        self.goes_left = np.zeros(max(self.n, 1), dtype=np.int8)
        self.nodes_i = np.empty((4, 2 * self.n + 1), dtype=np.intc)
        self.nodes_d = np.empty((3, 2 * self.n + 1), dtype=np.float64)

    def grow(self, const double[::1] gw, const double[::1] hw, const char[::1] selected,
             const int[::1] features, int max_depth, int min_samples_leaf,
             double min_gain, double lam):
        cdef Py_ssize_t n = self.n, fa = features.shape[0], m = 0, i, fi
        cdef int r, k
        cdef _Grower g = _Grower()
        cdef const double[:, ::1] xtv = self.xt
        cdef const int[:, ::1] order = self.order
        cdef int[::1] bf = self.by_feature
        cdef int[::1] bi = self.by_index
        cdef int[::1] tmp_v = self.tmp
        cdef char[::1] gl_v = self.goes_left
        cdef int[:, ::1] ni = self.nodes_i
        cdef double[:, ::1] nd = self.nodes_d
        if gw.shape[0] != n or hw.shape[0] != n or selected.shape[0] != n:
            raise ValueError("gradient arrays do not match the workspace rows")
        for i in range(n):
            if selected[i]:
                bi[m] = <int>i
                m += 1
        if m == 0:
            raise ValueError("no rows selected for tree growth")
        for fi in range(fa):
            if features[fi] < 0 or features[fi] >= self.n_features:
                raise ValueError("feature index out of range")
            k = 0
            for i in range(n):
                r = order[features[fi], i]
                if selected[r]:
                    bf[fi * m + k] = r
                    k += 1

        g.xt = &xtv[0, 0]
        g.n = n
        g.gw = &gw[0]
        g.hw = &hw[0]
        g.by_feature = &bf[0]
        g.by_index = &bi[0]
        g.m = m
        g.features = &features[0] if fa > 0 else NULL
        g.fa = <int>fa
        g.tmp = &tmp_v[0]
        g.goes_left = &gl_v[0]
        g.max_depth = max_depth
        g.min_leaf = min_samples_leaf if min_samples_leaf > 1 else 1
        g.min_gain = min_gain
        g.lam = lam
        g.n_nodes = 0
        g.unit_hessian = True
        for i in range(n):
            if selected[i] and hw[i] != 1.0:
                g.unit_hessian = False
                break
        g.feature = &ni[0, 0]
        g.left = &ni[1, 0]
        g.right = &ni[2, 0]
        g.count = &ni[3, 0]
        g.threshold = &nd[0, 0]
        g.value = &nd[1, 0]
        g.gain = &nd[2, 0]
        with nogil:
            g.grow(0, <int>m, 0)
        k = g.n_nodes
        ints = self.nodes_i[:, :k].copy()
        dbls = self.nodes_d[:, :k].copy()
        return (ints[0], dbls[0], ints[1], ints[2], dbls[1], dbls[2], ints[3])


def grow_tree(X, order, gw, hw, selected, features, max_depth, min_samples_leaf,
              min_gain, lam):
    """Grow one regression tree by exact greedy search.

    ``order`` holds, per feature column, all row indices stably sorted by value.
    Only rows with ``selected[r]`` participate. Returns preorder node arrays
    (feature, threshold, left, right, value, gain, count).
    """
    return TreeWorkspace(X, order).grow(gw, hw, selected, features, max_depth,
                                        min_samples_leaf, min_gain, lam)


def predict_forest(const double[:, ::1] X, const int[::1] feature, const double[::1] threshold,
                   const int[::1] left, const int[::1] right, const double[::1] value,
                   const char[::1] default_left, const long[::1] offsets,
                   const double[::1] weights, double base):
    """base + sum_t w_t * tree_t(x), trees accumulated in order."""
    cdef Py_ssize_t n = X.shape[0], t, i, n_trees = weights.shape[0]
    cdef long node, off
    cdef double x, acc
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            acc = base
            for t in range(n_trees):
                off = offsets[t]
                node = 0
                while feature[off + node] >= 0:
                    x = X[i, feature[off + node]]
                    if x <= threshold[off + node] or (x != x and default_left[off + node]):
                        node = left[off + node]
                    else:
                        node = right[off + node]
                acc = acc + weights[t] * value[off + node]
            o[i] = acc
    return out
