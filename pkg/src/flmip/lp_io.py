"""CPLEX-style LP file export and a minimal reader for self round-trips.

Numbers are written with 17 significant digits so external cross-checks see
bit-identical coefficients.
"""

from __future__ import annotations

import re

import numpy as np
import scipy.sparse as sp

from .encoder import MiConstraintSystem
from .errors import NetworkFormatError
from .misolver import LinearObjective, MiProblem, QuadraticObjective


def _num(v: float) -> str:
    return f"{v:.17g}"


def _sanitize(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.]", "_", name)


def _expr(coeffs, names) -> str:
    parts = []
    for i, c in coeffs:
        sign = "-" if c < 0 else "+"
        parts.append(f"{sign} {_num(abs(c))} {names[i]}")
    if not parts:
        return "0 " + (names[0] if names else "x0")
    s = " ".join(parts)
    return s[2:] if s.startswith("+ ") else s


def export_lp(target, path) -> None:
    """Write a system (feasibility) or MiProblem (with objective) as an LP file."""
    if isinstance(target, MiProblem):
        sys_, obj = target.system, target.objective
    else:
        sys_, obj = target, None
    names = [_sanitize(n) for n in sys_.names]
    lines = ["\\ flmip LP export", "Minimize"]
    if obj is None:
        lines.append(" obj: 0 " + (names[0] if names else "x0"))
    else:
        lin = _expr([(i, c) for i, c in enumerate(obj.c) if c != 0.0], names)
        if getattr(obj, "is_quadratic", False) and obj.H.nnz:
            H = sp.coo_matrix(obj.H)
            qterms = []
            seen = set()
            for i, j, v in zip(H.row, H.col, H.data):
                if v == 0.0 or (j, i) in seen:
                    continue
                seen.add((i, j))
                sign = "-" if v < 0 else "+"
                if i == j:
                    qterms.append(f"{sign} {_num(abs(v))} {names[i]} ^ 2")
                else:
                    qterms.append(f"{sign} {_num(2 * abs(v))} {names[i]} * {names[j]}")
            lines.append(f" obj: {lin} + [ {' '.join(qterms)} ] / 2")
        else:
            lines.append(f" obj: {lin}")
    lines.append("Subject To")
    A_eq, b_eq, A_ub, b_ub = sys_.matrices()
    for r in range(A_ub.shape[0]):
        row = A_ub.getrow(r)
        coeffs = list(zip(row.indices.tolist(), row.data.tolist()))
        lines.append(f" c{r}: {_expr(coeffs, names)} <= {_num(b_ub[r])}")
    off = A_ub.shape[0]
    for r in range(A_eq.shape[0]):
        row = A_eq.getrow(r)
        coeffs = list(zip(row.indices.tolist(), row.data.tolist()))
        lines.append(f" c{off + r}: {_expr(coeffs, names)} = {_num(b_eq[r])}")
    lines.append("Bounds")
    for i, name in enumerate(names):
        lo, hi = sys_.lb[i], sys_.ub[i]
        if sys_.is_binary[i]:
            continue
        if lo == -np.inf and hi == np.inf:
            lines.append(f" {name} free")
        elif lo == -np.inf:
            lines.append(f" -inf <= {name} <= {_num(hi)}")
        elif hi == np.inf:
            lines.append(f" {name} >= {_num(lo)}")
        else:
            lines.append(f" {_num(lo)} <= {name} <= {_num(hi)}")
    binaries = [names[i] for i in sys_.binary_indices]
    if binaries:
        lines.append("Binaries")
        lines.append(" " + " ".join(binaries))
    lines.append("End")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


_TOKEN = re.compile(r"(<=|>=|=|\+|\-|\[|\]|\*|\^|/|[A-Za-z_][A-Za-z0-9_.]*|"
                    r"[0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?|inf)")


def _parse_terms(tokens, names, index):
    """Linear term list from a token stream (no quadratic brackets)."""
    coeffs = []
    sign, coef, pending = 1.0, None, False
    for tok in tokens:
        if tok == "+":
            sign, coef, pending = 1.0, None, False
        elif tok == "-":
            sign, coef, pending = -1.0, None, False
        elif re.fullmatch(r"[0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?", tok):
            coef = float(tok)
        else:
            if tok not in index:
                index[tok] = len(names)
                names.append(tok)
            c = sign * (coef if coef is not None else 1.0)
            coeffs.append((index[tok], c))
            sign, coef = 1.0, None
    return coeffs


def parse_lp(path) -> MiProblem:
    """Read back our own export: enough LP-format support for round-trips."""
    with open(path) as fh:
        raw = [ln.split("\\")[0].rstrip() for ln in fh]
    lines = [ln for ln in raw if ln.strip()]
    section = None
    obj_tokens: list[str] = []
    rows = []       # (coeffs, sense, rhs)
    bounds = []     # raw bound lines
    binaries: list[str] = []
    for ln in lines:
        key = ln.strip().lower()
        if key in ("minimize", "maximise", "maximize", "subject to", "st",
                   "bounds", "binaries", "binary", "end", "general", "generals"):
            section = key
            continue
        if section == "minimize":
            obj_tokens.extend(_TOKEN.findall(ln))
        elif section in ("subject to", "st"):
            body = ln.split(":", 1)[1] if ":" in ln else ln
            m = re.search(r"(<=|>=|=)", body)
            if not m:
                raise NetworkFormatError(f"constraint without relation: {ln!r}")
            lhs, sense, rhs = body[:m.start()], m.group(1), body[m.end():]
            rows.append((_TOKEN.findall(lhs), sense, float(rhs)))
        elif section == "bounds":
            bounds.append(ln.strip())
        elif section in ("binaries", "binary"):
            binaries.extend(ln.split())
    names: list[str] = []
    index: dict[str, int] = {}

    # objective: strip label, split quadratic bracket
    if obj_tokens and obj_tokens[0] == "obj":
        obj_tokens = obj_tokens[1:]
    quad = []
    if "[" in obj_tokens:
        i, j = obj_tokens.index("["), obj_tokens.index("]")
        quad = obj_tokens[i + 1:j]
        obj_tokens = obj_tokens[:i] + obj_tokens[j + 1:]
        # trailing "/ 2"
        while obj_tokens and obj_tokens[-1] in ("/", "2", "+"):
            obj_tokens.pop()
    lin_coeffs = _parse_terms(obj_tokens, names, index)

    row_data = []
    for toks, sense, rhs in rows:
        coeffs = _parse_terms(toks, names, index)
        row_data.append((coeffs, sense, rhs))

    sys_ = MiConstraintSystem()
    binset = set(binaries)
    for name in names:
        sys_.add_var(name, -np.inf, np.inf, binary=name in binset)
    for bl in bounds:
        toks = bl.replace("<=", " <= ").replace(">=", " >= ").split()
        if toks[-1] == "free":
            continue
        if len(toks) == 5:  # lo <= name <= hi
            lo = -np.inf if toks[0] in ("-inf", "-Inf") else float(toks[0])
            sys_.set_bounds(index[toks[2]], lo, float(toks[4]))
        elif len(toks) == 3 and toks[1] == ">=":
            sys_.lb[index[toks[0]]] = float(toks[2])
        elif len(toks) == 3 and toks[1] == "<=":
            sys_.ub[index[toks[0]]] = float(toks[2])
        else:
            raise NetworkFormatError(f"unsupported bound line: {bl!r}")
    for coeffs, sense, rhs in row_data:
        if sense == "=":
            sys_.add_eq(coeffs, rhs)
        elif sense == "<=":
            sys_.add_le(coeffs, rhs)
        else:
            sys_.add_ge(coeffs, rhs)

    c = np.zeros(sys_.num_vars)
    for i, v in lin_coeffs:
        c[i] += v
    if quad:
        H = np.zeros((sys_.num_vars, sys_.num_vars))
        sign, coef, terms = 1.0, None, []
        k = 0
        while k < len(quad):
            tok = quad[k]
            if tok == "+":
                sign = 1.0
            elif tok == "-":
                sign = -1.0
            elif re.fullmatch(r"[0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?", tok):
                coef = float(tok)
            elif tok in index:
                i = index[tok]
                if k + 2 < len(quad) and quad[k + 1] == "^":
                    H[i, i] += sign * (coef if coef is not None else 1.0)
                    k += 2
                elif k + 2 < len(quad) and quad[k + 1] == "*":
                    j = index[quad[k + 2]]
                    v = 0.5 * sign * (coef if coef is not None else 1.0)
                    H[i, j] += v
                    H[j, i] += v
                    k += 2
                sign, coef = 1.0, None
            k += 1
        return MiProblem(sys_, QuadraticObjective(sp.csc_matrix(H), c))
    return MiProblem(sys_, LinearObjective(c))
