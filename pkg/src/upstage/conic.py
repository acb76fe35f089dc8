"""Solver-agnostic conic program representation.

A `ConicProgram` collects scalar variables (optionally grouped into
vectors or packed symmetric matrix blocks), a linear objective, and
constraints of four kinds: linear equalities, linear inequalities,
second-order cones ||v|| <= t and semidefinite blocks M(x) >= 0.
Rows are stored as (row, col, val) triplets and compressed only when a
backend is invoked, so large programs can be assembled incrementally
from vectorized index arithmetic.

Backends advertise their cone support; `clarabel` handles every cone
used here, `scs` is available as a fallback.  Infeasibility is a
first-class status so that receding-horizon callers can degrade
gracefully instead of catching exceptions.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_TROUBLE = "numerical-trouble"


class Aff:
    """Scalar affine expression; convenience layer over triplet assembly."""

    __slots__ = ("terms", "const")

    def __init__(self, terms=None, const=0.0):
        self.terms = dict(terms or {})
        self.const = float(const)

    @staticmethod
    def of(var, coef=1.0):
        return Aff({int(var): float(coef)})

    def __add__(self, other):
        if isinstance(other, Aff):
            terms = dict(self.terms)
            for k, v in other.terms.items():
                terms[k] = terms.get(k, 0.0) + v
            return Aff(terms, self.const + other.const)
        return Aff(self.terms, self.const + float(other))

    __radd__ = __add__

    def __neg__(self):
        return Aff({k: -v for k, v in self.terms.items()}, -self.const)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Aff) else -float(other))

    def __rsub__(self, other):
        return (-self) + float(other)

    def __mul__(self, scalar):
        s = float(scalar)
        return Aff({k: v * s for k, v in self.terms.items()}, self.const * s)

    __rmul__ = __mul__


@dataclass
class SolveReport:
    status: str
    objective: float | None = None
    x: np.ndarray | None = None
    iterations: int = 0
    wall_time: float = 0.0
    backend: str = ""
    detail: str = ""

    def value(self, handle):
        if self.x is None:
            raise ValueError(f"no primal values: solve status is {self.status!r}")
        idx = np.asarray(handle)
        out = self.x[idx]
        return float(out) if idx.ndim == 0 else out


@dataclass
class SymBlock:
    """Packed symmetric n x n matrix variable (lower triangle, row-major).

    Off-diagonal entries are stored once, unscaled: packed[i*(i+1)/2 + j]
    holds M[i, j] for i >= j.
    """

    offset: int
    n: int

    @property
    def packed(self):
        return np.arange(self.offset, self.offset + self.n * (self.n + 1) // 2)

    def index(self, i, j):
        if j > i:
            i, j = j, i
        return self.offset + i * (i + 1) // 2 + j

    def unpack(self, x):
        m = np.zeros((self.n, self.n))
        tri = np.tril_indices(self.n)
        m[tri] = x[self.packed]
        return m + np.tril(m, -1).T


def pack_symmetric(m: np.ndarray) -> np.ndarray:
    return np.asarray(m)[np.tril_indices(m.shape[0])]


class ConicProgram:
    def __init__(self):
        self._nvar = 0
        self._vars: dict[str, tuple[int, tuple]] = {}
        self._obj_cols: list[np.ndarray] = []
        self._obj_vals: list[np.ndarray] = []
        self.obj_const = 0.0
        # linear rows, stored per kind as triplet chunks
        self._eq = _RowStore()
        self._le = _RowStore()
        self._soc: list[dict] = []
        self._psd: list[dict] = []
        self._lb: dict[int, float] = {}
        self._ub: dict[int, float] = {}

    # -- variables -------------------------------------------------------

    @property
    def n_vars(self):
        return self._nvar

    def add_var(self, name, shape=(), lb=None, ub=None):
        if name in self._vars:
            raise ValueError(f"variable {name!r} already registered")
        shape = tuple(shape) if np.iterable(shape) else (shape,) if shape else ()
        size = int(np.prod(shape)) if shape else 1
        idx = np.arange(self._nvar, self._nvar + size).reshape(shape or ())
        self._vars[name] = (self._nvar, shape)
        self._nvar += size
        if lb is not None:
            self.set_lower(idx, lb)
        if ub is not None:
            self.set_upper(idx, ub)
        return idx if shape else int(idx)

    def add_sym(self, name, n) -> SymBlock:
        if name in self._vars:
            raise ValueError(f"variable {name!r} already registered")
        size = n * (n + 1) // 2
        block = SymBlock(self._nvar, n)
        self._vars[name] = (self._nvar, ("sym", n))
        self._nvar += size
        return block

    def set_lower(self, idx, lb):
        for i, v in zip(np.atleast_1d(idx).ravel(), np.broadcast_to(lb, np.shape(np.atleast_1d(idx).ravel()))):
            self._lb[int(i)] = float(v)

    def set_upper(self, idx, ub):
        for i, v in zip(np.atleast_1d(idx).ravel(), np.broadcast_to(ub, np.shape(np.atleast_1d(idx).ravel()))):
            self._ub[int(i)] = float(v)

    # -- objective ---------------------------------------------------------

    def minimize_terms(self, cols, vals, const=0.0):
        self._obj_cols.append(np.asarray(cols, dtype=np.int64).ravel())
        self._obj_vals.append(np.asarray(vals, dtype=float).ravel())
        self.obj_const += float(const)

    def minimize(self, expr: Aff):
        self.minimize_terms(list(expr.terms.keys()), list(expr.terms.values()), expr.const)

    # -- linear constraints -------------------------------------------------

    def add_eq_block(self, rows, cols, vals, rhs):
        """Bulk equality rows sum_j A[i,j] x_j = rhs[i]."""
        return self._eq.add(rows, cols, vals, rhs)

    def add_le_block(self, rows, cols, vals, rhs):
        """Bulk inequality rows sum_j A[i,j] x_j <= rhs[i]."""
        return self._le.add(rows, cols, vals, rhs)

    def add_eq(self, expr: Aff, rhs=0.0):
        k = list(expr.terms.keys())
        return self._eq.add(np.zeros(len(k), dtype=int), k, list(expr.terms.values()),
                            [float(rhs) - expr.const])

    def add_le(self, expr: Aff, rhs=0.0):
        k = list(expr.terms.keys())
        return self._le.add(np.zeros(len(k), dtype=int), k, list(expr.terms.values()),
                            [float(rhs) - expr.const])

    # -- cones ---------------------------------------------------------------

    def add_soc(self, t, vec):
        """||vec|| <= t with affine t and vector entries.

        `t` is an Aff (or bare variable index); `vec` a sequence of Aff
        (or indices).  An empty vector degrades to t >= 0.
        """
        t = t if isinstance(t, Aff) else Aff.of(t)
        vec = [v if isinstance(v, Aff) else Aff.of(v) for v in vec]
        if len(vec) == 0:
            return self.add_le(-t, 0.0)
        entry = {
            "t_cols": list(t.terms.keys()),
            "t_vals": list(t.terms.values()),
            "t_const": t.const,
            "rows": [], "cols": [], "vals": [],
            "consts": [v.const for v in vec],
            "dim": len(vec),
        }
        for i, v in enumerate(vec):
            entry["rows"].extend([i] * len(v.terms))
            entry["cols"].extend(v.terms.keys())
            entry["vals"].extend(v.terms.values())
        self._soc.append(entry)
        return len(self._soc) - 1

    def add_soc_block(self, t_cols, t_vals, t_const, rows, cols, vals, consts):
        """Bulk form of `add_soc` for vectorized assembly."""
        self._soc.append({
            "t_cols": np.asarray(t_cols, dtype=np.int64).tolist(),
            "t_vals": np.asarray(t_vals, dtype=float).tolist(),
            "t_const": float(t_const),
            "rows": np.asarray(rows, dtype=np.int64).tolist(),
            "cols": np.asarray(cols, dtype=np.int64).tolist(),
            "vals": np.asarray(vals, dtype=float).tolist(),
            "consts": np.asarray(consts, dtype=float).tolist(),
            "dim": len(consts),
        })
        return len(self._soc) - 1

    def add_psd_block(self, n, entry_i, entry_j, cols, vals, const=None):
        """Affine symmetric block M(x) >= 0 (PSD).

        entry_i/entry_j index the matrix entry (i >= j) each (col, val)
        coefficient contributes to; `const` is the constant symmetric
        matrix part, (n, n) or packed lower triangle.
        """
        ei = np.asarray(entry_i, dtype=np.int64)
        ej = np.asarray(entry_j, dtype=np.int64)
        if np.any(ej > ei):
            raise ValueError("PSD entries must index the lower triangle (i >= j)")
        if const is None:
            cpacked = np.zeros(n * (n + 1) // 2)
        else:
            const = np.asarray(const, dtype=float)
            cpacked = pack_symmetric(const) if const.ndim == 2 else const.copy()
        self._psd.append({
            "n": int(n),
            "ei": ei.tolist(),
            "ej": ej.tolist(),
            "cols": np.asarray(cols, dtype=np.int64).tolist(),
            "vals": np.asarray(vals, dtype=float).tolist(),
            "const": cpacked.tolist(),
        })
        return len(self._psd) - 1

    def add_psd(self, mat) -> int:
        """PSD constraint from an (n, n) array of Aff/float entries."""
        mat = np.asarray(mat, dtype=object)
        n = mat.shape[0]
        if mat.shape != (n, n):
            raise ValueError("PSD block must be square")
        for i in range(n):
            for j in range(i):
                a, b = mat[i, j], mat[j, i]
                at = a.terms if isinstance(a, Aff) else {}
                bt = b.terms if isinstance(b, Aff) else {}
                ac = a.const if isinstance(a, Aff) else float(a)
                bc = b.const if isinstance(b, Aff) else float(b)
                if at != bt or not np.isclose(ac, bc):
                    raise ValueError("PSD block must be symmetric")
        ei, ej, cols, vals = [], [], [], []
        const = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1):
                e = mat[i, j]
                if isinstance(e, Aff):
                    const[i, j] = const[j, i] = e.const
                    for c, v in e.terms.items():
                        ei.append(i); ej.append(j); cols.append(c); vals.append(v)
                else:
                    const[i, j] = const[j, i] = float(e)
        return self.add_psd_block(n, ei, ej, cols, vals, const)

    # -- serialization ---------------------------------------------------------

    def to_dict(self):
        return {
            "schema_version": 1,
            "n_vars": self._nvar,
            "vars": {k: [off, list(shape) if isinstance(shape, tuple) else shape]
                     for k, (off, shape) in self._vars.items()},
            "objective": {
                "cols": np.concatenate(self._obj_cols).tolist() if self._obj_cols else [],
                "vals": np.concatenate(self._obj_vals).tolist() if self._obj_vals else [],
                "const": self.obj_const,
            },
            "eq": self._eq.to_dict(),
            "le": self._le.to_dict(),
            "soc": self._soc,
            "psd": self._psd,
            "lb": {str(k): v for k, v in self._lb.items()},
            "ub": {str(k): v for k, v in self._ub.items()},
        }

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        prog = cls()
        prog._nvar = d["n_vars"]
        prog._vars = {k: (v[0], tuple(v[1])) for k, v in d["vars"].items()}
        obj = d["objective"]
        if obj["cols"]:
            prog.minimize_terms(obj["cols"], obj["vals"])
        prog.obj_const = obj["const"]
        prog._eq = _RowStore.from_dict(d["eq"])
        prog._le = _RowStore.from_dict(d["le"])
        prog._soc = d["soc"]
        prog._psd = d["psd"]
        prog._lb = {int(k): v for k, v in d["lb"].items()}
        prog._ub = {int(k): v for k, v in d["ub"].items()}
        return prog

    # -- lowering ---------------------------------------------------------------

    @staticmethod
    def _row_normalize(a, b, prune_trivial=False):
        """Scale each row to unit max coefficient (pure row equilibration).

        Rows with essentially no coefficients are left unscaled; with
        `prune_trivial`, such rows are dropped when their bound is
        trivially satisfied (inequality 0 <= b with b >= 0).
        """
        a = a.tocoo()
        mx = np.zeros(a.shape[0])
        if a.nnz:
            np.maximum.at(mx, a.row, np.abs(a.data))
        scale = np.where(mx > 1e-4, mx, 1.0)
        d = sp.diags(1.0 / scale)
        a = (d @ a.tocsr()).tocsr()
        b = b / scale
        if prune_trivial:
            # a slack row whose coefficients are negligible against its
            # bound can never become active at sane variable magnitudes
            keep = ~((b >= 0.0) & (mx <= 1e-4 * (1.0 + np.abs(b))))
            if not keep.all():
                a = a[keep]
                b = b[keep]
        return a, b

    def _assemble(self, psd_order="clarabel"):
        """Stack all constraints into (A, b, cone list) with s = b - A x."""
        n = self._nvar
        blocks = []
        bs = []
        cones = []  # list of ("zero"|"nonneg"|"soc"|"psd", size or n)

        a_eq, b_eq = self._eq.matrix(n)
        if a_eq.shape[0]:
            a_eq, b_eq = self._row_normalize(a_eq, b_eq)
            blocks.append(a_eq)
            bs.append(b_eq)
            cones.append(("zero", a_eq.shape[0]))

        a_le, b_le = self._le.matrix(n)
        if a_le.shape[0]:
            a_le, b_le = self._row_normalize(a_le, b_le, prune_trivial=True)
        rows = [a_le] if a_le.shape[0] else []
        rhs = [b_le] if a_le.shape[0] else []
        nb = len(self._lb) + len(self._ub)
        if nb:
            bi, bc, bv, bb = [], [], [], []
            r = 0
            for i, v in self._lb.items():   # x >= lb  ->  -x <= -lb
                bi.append(r); bc.append(i); bv.append(-1.0); bb.append(-v); r += 1
            for i, v in self._ub.items():
                bi.append(r); bc.append(i); bv.append(1.0); bb.append(v); r += 1
            rows.append(sp.coo_matrix((bv, (bi, bc)), shape=(r, n)))
            rhs.append(np.array(bb))
        if rows:
            a_all = sp.vstack(rows)
            blocks.append(a_all)
            bs.append(np.concatenate(rhs))
            cones.append(("nonneg", a_all.shape[0]))

        for c in self._soc:
            dim = c["dim"] + 1
            ri = np.concatenate([np.zeros(len(c["t_cols"]), dtype=int),
                                 np.asarray(c["rows"], dtype=int) + 1])
            ci = np.concatenate([np.asarray(c["t_cols"], dtype=int),
                                 np.asarray(c["cols"], dtype=int)])
            vi = -np.concatenate([np.asarray(c["t_vals"]), np.asarray(c["vals"])])
            blocks.append(sp.coo_matrix((vi, (ri, ci)), shape=(dim, n)))
            bs.append(np.concatenate([[c["t_const"]], np.asarray(c["consts"])]))
            cones.append(("soc", dim))

        root2 = np.sqrt(2.0)
        for c in self._psd:
            m = c["n"]
            npk = m * (m + 1) // 2
            ei = np.asarray(c["ei"], dtype=int)
            ej = np.asarray(c["ej"], dtype=int)
            cpk = np.asarray(c["const"])
            if psd_order == "clarabel":
                # row-major lower triangle == column-major upper triangle
                rowpos = ei * (ei + 1) // 2 + ej
            else:  # scs: column-major lower triangle
                rowpos = _scs_tri_pos(ei, ej, m)
            scale_entry = np.where(ei == ej, 1.0, root2)
            vals = -np.asarray(c["vals"]) * scale_entry
            blocks.append(sp.coo_matrix((vals, (rowpos, np.asarray(c["cols"], dtype=int))),
                                        shape=(npk, n)))
            all_i = np.concatenate([np.full(k + 1, k) for k in range(m)])
            all_j = np.concatenate([np.arange(k + 1) for k in range(m)])
            bscale = np.where(all_i == all_j, 1.0, root2)
            if psd_order == "clarabel":
                bvec = cpk * bscale
            else:
                bvec = np.empty(npk)
                bvec[_scs_tri_pos(all_i, all_j, m)] = cpk * bscale
            bs.append(bvec)
            cones.append(("psd", m))

        A = sp.vstack(blocks).tocsc() if blocks else sp.csc_matrix((0, n))
        b = np.concatenate(bs) if bs else np.zeros(0)
        q = np.zeros(n)
        for cols, vals in zip(self._obj_cols, self._obj_vals):
            np.add.at(q, cols, vals)
        if not np.all(np.isfinite(q)):
            raise ValueError("objective coefficients must be finite")
        return A, b, q, cones

    def solve(self, backend="clarabel", tol=1e-8, max_iter=200_000, verbose=False,
              time_limit=0.0) -> SolveReport:
        if backend == "clarabel":
            return self._solve_clarabel(tol, max_iter, verbose, time_limit)
        if backend == "scs":
            return self._solve_scs(tol, max_iter, verbose)
        raise ValueError(f"unknown backend {backend!r}")

    def _solve_clarabel(self, tol, max_iter, verbose, time_limit):
        import clarabel

        A, b, q, cones = self._assemble("clarabel")
        cone_objs = []
        for kind, size in cones:
            if kind == "zero":
                cone_objs.append(clarabel.ZeroConeT(size))
            elif kind == "nonneg":
                cone_objs.append(clarabel.NonnegativeConeT(size))
            elif kind == "soc":
                cone_objs.append(clarabel.SecondOrderConeT(size))
            else:
                cone_objs.append(clarabel.PSDTriangleConeT(size))
        settings = clarabel.DefaultSettings()
        settings.verbose = verbose
        settings.max_iter = min(max_iter, 1_000_000)
        settings.tol_gap_abs = tol
        settings.tol_gap_rel = tol
        settings.tol_feas = tol
        # the default 1e-8 static regularization is too small for the
        # collocation problems assembled here and stalls the KKT solves
        settings.static_regularization_constant = 1e-7
        if time_limit:
            settings.time_limit = time_limit
        P = sp.csc_matrix((self._nvar, self._nvar))
        t0 = time.perf_counter()
        try:
            solver = clarabel.DefaultSolver(P, q, A, b, cone_objs, settings)
            sol = solver.solve()
        except BaseException as exc:  # backend failure surfaces as a status
            return SolveReport(NUMERICAL_TROUBLE, backend="clarabel", detail=str(exc),
                               wall_time=time.perf_counter() - t0)
        wall = time.perf_counter() - t0
        status = str(sol.status)
        mapping = {
            "Solved": OPTIMAL,
            "AlmostSolved": OPTIMAL,
            "PrimalInfeasible": INFEASIBLE,
            "AlmostPrimalInfeasible": INFEASIBLE,
            "DualInfeasible": UNBOUNDED,
            "AlmostDualInfeasible": UNBOUNDED,
        }
        st = mapping.get(status, NUMERICAL_TROUBLE)
        rep = SolveReport(st, backend="clarabel", iterations=sol.iterations,
                          wall_time=wall, detail=status)
        if st == OPTIMAL:
            rep.x = np.asarray(sol.x)
            rep.objective = float(sol.obj_val) + self.obj_const
        return rep

    def _solve_scs(self, tol, max_iter, verbose):
        import scs

        A, b, q, cones = self._assemble("scs")
        # SCS wants cones grouped: zero, nonneg, soc list, psd list
        order = {"zero": 0, "nonneg": 1, "soc": 2, "psd": 3}
        perm_rows = []
        offset = 0
        groups = {"zero": [], "nonneg": [], "soc": [], "psd": []}
        spans = []
        for kind, size in cones:
            rows = size if kind != "psd" else size * (size + 1) // 2
            spans.append((kind, offset, rows, size))
            offset += rows
        for kind in ("zero", "nonneg", "soc", "psd"):
            for k, off, rows, size in spans:
                if k == kind:
                    perm_rows.append(np.arange(off, off + rows))
                    groups[kind].append(size)
        perm = np.concatenate(perm_rows) if perm_rows else np.zeros(0, dtype=int)
        A = A.tocsr()[perm].tocsc()
        b = b[perm]
        cone = {}
        if groups["zero"]:
            cone["z"] = int(sum(groups["zero"]))
        if groups["nonneg"]:
            cone["l"] = int(sum(groups["nonneg"]))
        if groups["soc"]:
            cone["q"] = [int(s) for s in groups["soc"]]
        if groups["psd"]:
            cone["s"] = [int(s) for s in groups["psd"]]
        data = {"A": A, "b": b, "c": q}
        t0 = time.perf_counter()
        try:
            solver = scs.SCS(data, cone, eps_abs=tol, eps_rel=tol,
                             max_iters=max_iter, verbose=verbose)
            sol = solver.solve()
        except BaseException as exc:
            return SolveReport(NUMERICAL_TROUBLE, backend="scs", detail=str(exc),
                               wall_time=time.perf_counter() - t0)
        wall = time.perf_counter() - t0
        status = sol["info"]["status"]
        if "solved" in status.lower():
            rep = SolveReport(OPTIMAL, backend="scs", wall_time=wall,
                              iterations=sol["info"]["iter"], detail=status)
            rep.x = np.asarray(sol["x"])
            rep.objective = float(q @ rep.x) + self.obj_const
            return rep
        if "infeasible" in status.lower():
            return SolveReport(INFEASIBLE, backend="scs", wall_time=wall, detail=status)
        if "unbounded" in status.lower():
            return SolveReport(UNBOUNDED, backend="scs", wall_time=wall, detail=status)
        return SolveReport(NUMERICAL_TROUBLE, backend="scs", wall_time=wall, detail=status)


def _scs_tri_pos(i, j, n):
    """Row position of lower-triangle entry (i, j), column-major stacking."""
    j = np.asarray(j)
    i = np.asarray(i)
    return (j * (2 * n - j - 1)) // 2 + i


class _RowStore:
    """Triplet accumulator for a family of linear rows."""

    def __init__(self):
        self.rows: list[np.ndarray] = []
        self.cols: list[np.ndarray] = []
        self.vals: list[np.ndarray] = []
        self.rhs: list[np.ndarray] = []
        self.n_rows = 0

    def add(self, rows, cols, vals, rhs):
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        rows = np.asarray(rows, dtype=np.int64) + self.n_rows
        self.rows.append(rows.ravel())
        self.cols.append(np.asarray(cols, dtype=np.int64).ravel())
        self.vals.append(np.asarray(vals, dtype=float).ravel())
        self.rhs.append(rhs)
        first = self.n_rows
        self.n_rows += len(rhs)
        return first

    def matrix(self, n_cols):
        if not self.rhs:
            return sp.csc_matrix((0, n_cols)), np.zeros(0)
        a = sp.coo_matrix(
            (np.concatenate(self.vals),
             (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(self.n_rows, n_cols))
        return a, np.concatenate(self.rhs)

    def to_dict(self):
        return {
            "rows": np.concatenate(self.rows).tolist() if self.rows else [],
            "cols": np.concatenate(self.cols).tolist() if self.cols else [],
            "vals": np.concatenate(self.vals).tolist() if self.vals else [],
            "rhs": np.concatenate(self.rhs).tolist() if self.rhs else [],
        }

    @classmethod
    def from_dict(cls, d):
        store = cls()
        if d["rhs"]:
            store.rows.append(np.asarray(d["rows"], dtype=np.int64))
            store.cols.append(np.asarray(d["cols"], dtype=np.int64))
            store.vals.append(np.asarray(d["vals"], dtype=float))
            store.rhs.append(np.asarray(d["rhs"], dtype=float))
            store.n_rows = len(d["rhs"])
        return store
