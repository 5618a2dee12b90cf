"""In-memory LP representation and MPS-format ingestion.

The canonical problem form is

    minimize    c'x + const
    subject to  con_lower <= A x <= con_upper
                var_lower <=  x  <= var_upper

with IEEE +/-inf marking absent bounds. Maximization inputs are negated on
ingestion and flagged so reported objectives can be flipped back.
"""

from __future__ import annotations

import gzip
import io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as _sp

INF = float("inf")

_SECTIONS = {
    "NAME", "OBJSENSE", "OBJSENSE\tMAX", "ROWS", "COLUMNS", "RHS",
    "RANGES", "BOUNDS", "ENDATA",
}


class MpsParseError(ValueError):
    """Malformed MPS input; carries the 1-based source line when known."""

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class SparseMatrix:
    """Compressed sparse row matrix with int64 indices and float64 values.

    Invariants: row_offsets is non-decreasing with row_offsets[0] == 0 and
    row_offsets[-1] == nnz; column indices are strictly increasing within
    each row; every stored value is finite.
    """

    __slots__ = ("num_rows", "num_cols", "row_offsets", "col_indices", "values", "_sp", "_tr")

    def __init__(self, num_rows, num_cols, row_offsets, col_indices, values):
        self.num_rows = int(num_rows)
        self.num_cols = int(num_cols)
        self.row_offsets = np.ascontiguousarray(row_offsets, dtype=np.int64)
        self.col_indices = np.ascontiguousarray(col_indices, dtype=np.int64)
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self._sp = None
        self._tr = None
        self._check()
        for arr in (self.row_offsets, self.col_indices, self.values):
            arr.setflags(write=False)

    def _check(self):
        m, n = self.num_rows, self.num_cols
        off = self.row_offsets
        if off.shape != (m + 1,):
            raise ValueError(f"row_offsets has length {off.shape[0]}, expected {m + 1}")
        if m >= 0 and (off[0] != 0 or off[-1] != len(self.values)):
            raise ValueError("row_offsets must start at 0 and end at nnz")
        if np.any(np.diff(off) < 0):
            raise ValueError("row_offsets must be non-decreasing")
        if len(self.col_indices) != len(self.values):
            raise ValueError("col_indices and values length mismatch")
        if len(self.col_indices) and (
            self.col_indices.min() < 0 or self.col_indices.max() >= n
        ):
            raise ValueError("column index out of range")
        # strictly increasing columns within each row
        starts = off[:-1]
        ends = off[1:]
        d = np.diff(self.col_indices)
        if len(d):
            row_breaks = np.zeros(len(self.col_indices), dtype=bool)
            row_breaks[starts[(starts > 0) & (starts < len(self.col_indices))]] = True
            if np.any((d <= 0) & ~row_breaks[1:]):
                raise ValueError("column indices must be strictly increasing within a row")
        if len(self.values) and not np.all(np.isfinite(self.values)):
            raise ValueError("stored matrix values must be finite")
        del starts, ends

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_rows, self.num_cols)

    def as_scipy(self) -> _sp.csr_matrix:
        """Zero-copy scipy view used by the multiplication kernels."""
        if self._sp is None:
            self._sp = _sp.csr_matrix(
                (self.values, self.col_indices, self.row_offsets),
                shape=(self.num_rows, self.num_cols),
                copy=False,
            )
        return self._sp

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.num_rows, self.num_cols))
        for i in range(self.num_rows):
            lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
            out[i, self.col_indices[lo:hi]] = self.values[lo:hi]
        return out

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def col_nnz(self) -> np.ndarray:
        return np.bincount(self.col_indices, minlength=self.num_cols).astype(np.int64)

    @classmethod
    def from_coo(cls, num_rows, num_cols, rows, cols, vals) -> "SparseMatrix":
        """Build CSR from triplets; duplicate entries are summed."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if len(rows):
            keep = np.ones(len(rows), dtype=bool)
            dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
            if np.any(dup):
                # sum runs of duplicates in position order
                group = np.concatenate([[0], np.cumsum(~dup)])
                vals = np.bincount(group, weights=vals)
                keep = np.concatenate([[True], ~dup])
                rows, cols = rows[keep], cols[keep]
        offsets = np.zeros(num_rows + 1, dtype=np.int64)
        np.add.at(offsets, rows + 1, 1)
        offsets = np.cumsum(offsets)
        return cls(num_rows, num_cols, offsets, cols, vals)

    @classmethod
    def from_dense(cls, dense) -> "SparseMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        rows, cols = np.nonzero(dense)
        return cls.from_coo(dense.shape[0], dense.shape[1], rows, cols, dense[rows, cols])

    def __repr__(self):
        return f"SparseMatrix({self.num_rows}x{self.num_cols}, nnz={self.nnz})"


@dataclass
class LpProblem:
    """One LP instance: matrix, objective, and both bound pairs."""

    matrix: SparseMatrix
    objective: np.ndarray        # length n
    var_lower: np.ndarray        # length n, -inf allowed
    var_upper: np.ndarray        # length n, +inf allowed
    con_lower: np.ndarray        # length m, -inf allowed
    con_upper: np.ndarray        # length m, +inf allowed
    objective_constant: float = 0.0
    maximize: bool = False       # original sense; data is stored negated for max
    name: str = ""
    row_names: list[str] = field(default_factory=list, repr=False)
    col_names: list[str] = field(default_factory=list, repr=False)

    def __post_init__(self):
        m, n = self.matrix.shape
        self.objective = np.ascontiguousarray(self.objective, dtype=np.float64)
        self.var_lower = np.ascontiguousarray(self.var_lower, dtype=np.float64)
        self.var_upper = np.ascontiguousarray(self.var_upper, dtype=np.float64)
        self.con_lower = np.ascontiguousarray(self.con_lower, dtype=np.float64)
        self.con_upper = np.ascontiguousarray(self.con_upper, dtype=np.float64)
        for name, arr, length in (
            ("objective", self.objective, n),
            ("var_lower", self.var_lower, n),
            ("var_upper", self.var_upper, n),
            ("con_lower", self.con_lower, m),
            ("con_upper", self.con_upper, m),
        ):
            if arr.shape != (length,):
                raise ValueError(f"{name} has length {arr.shape[0]}, expected {length}")
        if np.any(self.var_lower > self.var_upper):
            j = int(np.argmax(self.var_lower > self.var_upper))
            raise ValueError(f"variable {j}: lower bound exceeds upper bound")
        if np.any(self.con_lower > self.con_upper):
            i = int(np.argmax(self.con_lower > self.con_upper))
            raise ValueError(f"constraint {i}: lower bound exceeds upper bound")
        if not np.all(np.isfinite(self.objective)):
            raise ValueError("objective coefficients must be finite")

    @property
    def num_constraints(self) -> int:
        return self.matrix.num_rows

    @property
    def num_variables(self) -> int:
        return self.matrix.num_cols


def objective_value(problem: LpProblem, x: np.ndarray) -> float:
    """c'x + constant in the internal (minimization) sense."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (problem.num_variables,):
        raise ValueError(
            f"x has length {x.shape[0]}, expected {problem.num_variables}"
        )
    return float(np.dot(problem.objective, x) + problem.objective_constant)


def reported_objective(problem: LpProblem, internal_value: float) -> float:
    """Objective in the sense the input declared (flips sign for max inputs)."""
    return -internal_value if problem.maximize else internal_value


# ---------------------------------------------------------------------------
# MPS reader
# ---------------------------------------------------------------------------

_ROW_TYPES = {"N", "E", "L", "G"}
# LI/UI are integer-bound markers; the integrality is dropped (LP relaxation)
# and they act as LO/UP.
_BOUND_VALUED = {"UP", "LO", "FX", "LI", "UI"}
_BOUND_FLAG = {"FR", "MI", "PL", "BV"}


def parse_mps(source) -> LpProblem:
    """Parse fixed- or free-format MPS text into an LpProblem.

    `source` may be str, bytes (optionally gzip-compressed), or a text-mode
    file object. Sections must appear in the standard order; E/L/G rows map
    to the corresponding constraint-bound pairs, the first N row is the
    objective and later N rows become free constraints. Duplicate matrix
    entries are summed.
    """
    if isinstance(source, bytes):
        if source[:2] == b"\x1f\x8b":
            source = gzip.decompress(source)
        text = source.decode("utf-8", errors="replace")
    elif isinstance(source, str):
        text = source
    else:
        text = source.read()
        if isinstance(text, bytes):
            return parse_mps(text)
    return _parse_lines(text.splitlines())


def load_mps(path) -> LpProblem:
    """Read an MPS file; gzip input is detected by magic bytes."""
    with open(path, "rb") as fh:
        return parse_mps(fh.read())


def _parse_float(tok: str, line_no: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise MpsParseError(f"expected a number, got {tok!r}", line_no) from None


def _parse_lines(lines) -> LpProblem:
    name = ""
    maximize = False
    section = None
    seen = []

    row_order: list[str] = []            # constraint rows, declaration order
    row_type: dict[str, str] = {}
    row_index: dict[str, int] = {}
    obj_row: str | None = None

    col_index: dict[str, int] = {}
    col_order: list[str] = []
    coo_rows: list[int] = []
    coo_cols: list[int] = []
    coo_vals: list[float] = []
    obj_coeffs: dict[int, float] = {}

    rhs: dict[str, float] = {}
    obj_rhs = 0.0
    ranges: dict[str, float] = {}

    lower: dict[int, float] = {}
    upper: dict[int, float] = {}
    lower_explicit: set[int] = set()

    def col_id(tok: str) -> int:
        j = col_index.get(tok)
        if j is None:
            j = len(col_order)
            col_index[tok] = j
            col_order.append(tok)
        return j

    for line_no, raw in enumerate(lines, start=1):
        if not raw.strip() or raw.lstrip().startswith("*"):
            continue
        indented = raw[0] in " \t"
        tokens = raw.split()

        if not indented:
            head = tokens[0].upper()
            if head == "NAME":
                name = tokens[1] if len(tokens) > 1 else ""
                section = "NAME"
                continue
            if head in ("ROWS", "COLUMNS", "RHS", "RANGES", "BOUNDS", "OBJSENSE", "ENDATA"):
                if seen and head != "ENDATA":
                    prev = seen[-1]
                    order = ["OBJSENSE", "ROWS", "COLUMNS", "RHS", "RANGES", "BOUNDS"]
                    if head in order and prev in order and order.index(head) < order.index(prev):
                        raise MpsParseError(f"section {head} out of order after {prev}", line_no)
                section = head
                seen.append(head)
                if head == "ENDATA":
                    break
                if head == "OBJSENSE" and len(tokens) > 1:
                    maximize = tokens[1].upper().startswith("MAX")
                    section = "OBJSENSE_DONE"
                continue
            raise MpsParseError(f"unrecognized section header {tokens[0]!r}", line_no)

        if section == "OBJSENSE":
            maximize = tokens[0].upper().startswith("MAX")
            section = "OBJSENSE_DONE"
            continue

        if section == "ROWS":
            if len(tokens) < 2:
                raise MpsParseError("ROWS entry needs a type and a name", line_no)
            rtype, rname = tokens[0].upper(), tokens[1]
            if rtype not in _ROW_TYPES:
                raise MpsParseError(f"unknown row type {tokens[0]!r}", line_no)
            if rname in row_index or rname == obj_row:
                raise MpsParseError(f"duplicate row name {rname!r}", line_no)
            if rtype == "N" and obj_row is None:
                obj_row = rname
            else:
                # extra N rows are kept as free constraints
                row_index[rname] = len(row_order)
                row_order.append(rname)
                row_type[rname] = rtype
            continue

        if section == "COLUMNS":
            if len(tokens) >= 3 and tokens[1].upper() == "'MARKER'":
                continue  # INTORG/INTEND: integrality dropped, LP relaxation
            if len(tokens) < 3 or len(tokens) % 2 == 0:
                raise MpsParseError("COLUMNS entry needs (row, value) pairs", line_no)
            j = col_id(tokens[0])
            for k in range(1, len(tokens), 2):
                rname, val = tokens[k], _parse_float(tokens[k + 1], line_no)
                if rname == obj_row:
                    obj_coeffs[j] = obj_coeffs.get(j, 0.0) + val
                elif rname in row_index:
                    coo_rows.append(row_index[rname])
                    coo_cols.append(j)
                    coo_vals.append(val)
                else:
                    raise MpsParseError(f"undeclared row {rname!r}", line_no)
            continue

        if section in ("RHS", "RANGES"):
            if len(tokens) < 3:
                raise MpsParseError(f"{section} entry needs (row, value) pairs", line_no)
            start = 1 if len(tokens) % 2 == 1 else 0  # set name is optional
            for k in range(start, len(tokens), 2):
                rname, val = tokens[k], _parse_float(tokens[k + 1], line_no)
                if section == "RHS":
                    if rname == obj_row:
                        obj_rhs = val
                    elif rname in row_index:
                        rhs[rname] = val
                    else:
                        raise MpsParseError(f"undeclared row {rname!r}", line_no)
                else:
                    if rname not in row_index:
                        raise MpsParseError(f"undeclared row {rname!r}", line_no)
                    if row_type[rname] == "N":
                        raise MpsParseError(f"RANGES entry on free row {rname!r}", line_no)
                    ranges[rname] = val
            continue

        if section == "BOUNDS":
            code = tokens[0].upper()
            if code in _BOUND_VALUED:
                if len(tokens) == 4:
                    cname, val = tokens[2], _parse_float(tokens[3], line_no)
                elif len(tokens) == 3:
                    cname, val = tokens[1], _parse_float(tokens[2], line_no)
                else:
                    raise MpsParseError(f"malformed {code} bound", line_no)
            elif code in _BOUND_FLAG:
                if len(tokens) < 2:
                    raise MpsParseError(f"malformed {code} bound", line_no)
                cname, val = tokens[-1], 0.0
            else:
                raise MpsParseError(f"unknown bound code {tokens[0]!r}", line_no)
            j = col_id(cname)
            if code in ("LO", "LI"):
                lower[j] = val
                lower_explicit.add(j)
            elif code in ("UP", "UI"):
                upper[j] = val
                # classic MPS convention: a negative upper bound on a column
                # whose lower bound is still the default 0 frees the lower side
                if val < 0 and j not in lower_explicit:
                    lower[j] = -INF
            elif code == "FX":
                lower[j] = val
                upper[j] = val
                lower_explicit.add(j)
            elif code == "FR":
                lower[j] = -INF
                upper[j] = INF
                lower_explicit.add(j)
            elif code == "MI":
                lower[j] = -INF
                lower_explicit.add(j)
            elif code == "PL":
                upper[j] = INF
            elif code == "BV":
                lower[j] = 0.0
                upper[j] = 1.0
                lower_explicit.add(j)
            continue

        if section in ("NAME", "OBJSENSE_DONE", None):
            raise MpsParseError("data line outside any section", line_no)

    if "ROWS" not in seen:
        raise MpsParseError("missing ROWS section")

    m = len(row_order)
    n = len(col_order)
    matrix = SparseMatrix.from_coo(m, n, coo_rows, coo_cols, coo_vals)

    con_lower = np.empty(m)
    con_upper = np.empty(m)
    for i, rname in enumerate(row_order):
        b = rhs.get(rname, 0.0)
        t = row_type[rname]
        if t == "E":
            lo, hi = b, b
        elif t == "L":
            lo, hi = -INF, b
        elif t == "G":
            lo, hi = b, INF
        else:  # free row
            lo, hi = -INF, INF
        if rname in ranges:
            r = ranges[rname]
            if t == "E":
                lo, hi = (b, b + r) if r >= 0 else (b + r, b)
            elif t == "L":
                lo = hi - abs(r)
            elif t == "G":
                hi = lo + abs(r)
        con_lower[i], con_upper[i] = lo, hi

    c = np.zeros(n)
    for j, val in obj_coeffs.items():
        c[j] = val
    objective_constant = -obj_rhs  # RHS on the objective row negates the constant

    var_lower = np.zeros(n)
    var_upper = np.full(n, INF)
    for j, val in lower.items():
        var_lower[j] = val
    for j, val in upper.items():
        var_upper[j] = val
    bad = np.nonzero(var_lower > var_upper)[0]
    if len(bad):
        raise MpsParseError(
            f"bounds for column {col_order[bad[0]]!r} are inconsistent (lower > upper)"
        )

    if maximize:
        c = -c
        objective_constant = -objective_constant

    return LpProblem(
        matrix=matrix,
        objective=c,
        var_lower=var_lower,
        var_upper=var_upper,
        con_lower=con_lower,
        con_upper=con_upper,
        objective_constant=objective_constant,
        maximize=maximize,
        name=name,
        row_names=list(row_order),
        col_names=list(col_order),
    )


# ---------------------------------------------------------------------------
# MPS writer (round-trip support; names are normalized)
# ---------------------------------------------------------------------------

def write_mps(problem: LpProblem, name: str = "") -> str:
    """Serialize to free-format MPS. Values use %.17g so a re-parse is exact."""
    m, n = problem.num_constraints, problem.num_variables
    c = -problem.objective if problem.maximize else problem.objective
    const = -problem.objective_constant if problem.maximize else problem.objective_constant
    lc, uc = problem.con_lower, problem.con_upper
    lv, uv = problem.var_lower, problem.var_upper

    out = io.StringIO()
    out.write(f"NAME {name or problem.name or 'GRIDLP'}\n")
    if problem.maximize:
        out.write("OBJSENSE\n    MAX\n")
    out.write("ROWS\n")
    out.write(" N  OBJ\n")
    row_kind = []
    for i in range(m):
        if lc[i] == uc[i]:
            kind = "E"
        elif lc[i] == -INF and uc[i] == INF:
            kind = "N"
        elif uc[i] == INF:
            kind = "G"
        elif lc[i] == -INF:
            kind = "L"
        else:
            kind = "G"  # two-sided: G plus a RANGES entry
        row_kind.append(kind)
        out.write(f" {kind}  R{i}\n")

    out.write("COLUMNS\n")
    transpose = problem.matrix.as_scipy().tocsc()
    for j in range(n):
        if c[j] != 0.0:
            out.write(f"    C{j}  OBJ  {c[j]:.17g}\n")
        lo, hi = transpose.indptr[j], transpose.indptr[j + 1]
        for k in range(lo, hi):
            out.write(f"    C{j}  R{transpose.indices[k]}  {transpose.data[k]:.17g}\n")

    out.write("RHS\n")
    if const != 0.0:
        out.write(f"    RHS  OBJ  {-const:.17g}\n")
    for i in range(m):
        kind = row_kind[i]
        if kind == "N":
            continue
        b = lc[i] if kind in ("E", "G") else uc[i]
        if b != 0.0:
            out.write(f"    RHS  R{i}  {b:.17g}\n")

    two_sided = [
        i for i in range(m)
        if row_kind[i] == "G" and uc[i] != INF and lc[i] != uc[i]
    ]
    if two_sided:
        out.write("RANGES\n")
        for i in two_sided:
            out.write(f"    RNG  R{i}  {uc[i] - lc[i]:.17g}\n")

    bound_lines = []
    for j in range(n):
        lo, hi = lv[j], uv[j]
        if lo == 0.0 and hi == INF:
            continue
        if lo == -INF and hi == INF:
            bound_lines.append(f" FR BND  C{j}\n")
            continue
        if lo == hi:
            bound_lines.append(f" FX BND  C{j}  {lo:.17g}\n")
            continue
        if lo == -INF:
            bound_lines.append(f" MI BND  C{j}\n")
        elif lo != 0.0:
            bound_lines.append(f" LO BND  C{j}  {lo:.17g}\n")
        if hi != INF:
            bound_lines.append(f" UP BND  C{j}  {hi:.17g}\n")
    if bound_lines:
        out.write("BOUNDS\n")
        out.writelines(bound_lines)

    out.write("ENDATA\n")
    return out.getvalue()
