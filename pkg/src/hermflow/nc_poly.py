"""Symbolic noncommutative words and polynomials over matrix letters.

Letters come in three kinds:

* ``x``: self-adjoint letters X_i (exponent always +1),
* ``u``: Cayley unitaries u(X_i)^{+-1},
* ``v``: fixed external unitaries v_i^{+-1}.

``x``/``u`` letters share the index space: ``u`` with index i means the
Cayley transform of the matrix substituted for X_i.  The free difference
quotient and the cyclic gradient act on ``x`` letters only; ``u`` and ``v``
letters are treated as constants at the symbolic level (derivatives through
the Cayley map are handled by exact matrix calculus in the potentials
module).

Text syntax, e.g. ``"X1 u2 X1 u2^-1 v1"``: whitespace-separated letters,
``^-1`` marks the inverse of a unitary letter.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .matrix_core import HermitianTuple, UnitaryTuple, cayley

MAX_DEGREE = 16

Letter = tuple[str, int, int]  # (kind, index, exponent)
Word = tuple[Letter, ...]

_COEFF_TOL = 1e-14


def _canonical(terms: dict[Word, complex]) -> dict[Word, complex]:
    out = {}
    for w, c in terms.items():
        if abs(c) > _COEFF_TOL:
            out[w] = complex(c)
    return dict(sorted(out.items(), key=lambda kv: (len(kv[0]), kv[0])))


@dataclass(frozen=True)
class NCPolynomial:
    terms: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "terms", _canonical(self.terms))
        for w in self.terms:
            for kind, idx, exp in w:
                if kind not in ("x", "u", "v"):
                    raise ValueError(f"unknown letter kind {kind!r}")
                if kind == "x" and exp != 1:
                    raise ValueError("self-adjoint letters carry exponent +1 only")
                if exp not in (1, -1):
                    raise ValueError(f"exponent must be +-1, got {exp}")
                if idx < 1:
                    raise ValueError("letter indices are 1-based")

    # -- constructors ------------------------------------------------------
    @staticmethod
    def zero() -> "NCPolynomial":
        return NCPolynomial({})

    @staticmethod
    def one() -> "NCPolynomial":
        return NCPolynomial({(): 1.0})

    @staticmethod
    def x(i: int) -> "NCPolynomial":
        return NCPolynomial({(("x", i, 1),): 1.0})

    @staticmethod
    def u(i: int, exp: int = 1) -> "NCPolynomial":
        return NCPolynomial({(("u", i, exp),): 1.0})

    @staticmethod
    def v(i: int, exp: int = 1) -> "NCPolynomial":
        return NCPolynomial({(("v", i, exp),): 1.0})

    @staticmethod
    def monomial(word: Word, coeff: complex = 1.0) -> "NCPolynomial":
        return NCPolynomial({tuple(word): coeff})

    # -- algebra -----------------------------------------------------------
    def __add__(self, other: "NCPolynomial") -> "NCPolynomial":
        t = dict(self.terms)
        for w, c in other.terms.items():
            t[w] = t.get(w, 0.0) + c
        return NCPolynomial(t)

    def __sub__(self, other: "NCPolynomial") -> "NCPolynomial":
        return self + (-1.0) * other

    def __mul__(self, other):
        if isinstance(other, NCPolynomial):
            t: dict[Word, complex] = {}
            for w1, c1 in self.terms.items():
                for w2, c2 in other.terms.items():
                    w = w1 + w2
                    if len(w) > MAX_DEGREE:
                        raise ValueError(f"word degree {len(w)} exceeds cap {MAX_DEGREE}")
                    t[w] = t.get(w, 0.0) + c1 * c2
            return NCPolynomial(t)
        return NCPolynomial({w: c * other for w, c in self.terms.items()})

    __rmul__ = __mul__

    def __neg__(self) -> "NCPolynomial":
        return (-1.0) * self

    def adjoint(self) -> "NCPolynomial":
        t = {}
        for w, c in self.terms.items():
            w2 = tuple((k, i, -e if k != "x" else 1) for (k, i, e) in reversed(w))
            t[w2] = t.get(w2, 0.0) + np.conj(c)
        return NCPolynomial(t)

    def degree(self) -> int:
        return max((len(w) for w in self.terms), default=0)

    def letter_indices(self, kind: str) -> set:
        return {i for w in self.terms for (k, i, _) in w if k == kind}

    def __repr__(self):
        if not self.terms:
            return "0"
        return " + ".join(f"({c:g})*{word_to_text(w) or '1'}" for w, c in self.terms.items())


@dataclass(frozen=True)
class TensorPolynomial:
    """Sums of coeff * (left word) x (right word)."""

    terms: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "terms", _canonical(self.terms))

    @staticmethod
    def zero() -> "TensorPolynomial":
        return TensorPolynomial({})

    def __add__(self, other: "TensorPolynomial") -> "TensorPolynomial":
        t = dict(self.terms)
        for w, c in other.terms.items():
            t[w] = t.get(w, 0.0) + c
        return TensorPolynomial(t)

    def __mul__(self, scalar) -> "TensorPolynomial":
        return TensorPolynomial({w: c * scalar for w, c in self.terms.items()})

    __rmul__ = __mul__

    def left_mul(self, p: NCPolynomial) -> "TensorPolynomial":
        """(p x 1) * self."""
        t: dict = {}
        for (l, r), c in self.terms.items():
            for w, cp in p.terms.items():
                key = (w + l, r)
                t[key] = t.get(key, 0.0) + c * cp
        return TensorPolynomial(t)

    def right_mul(self, q: NCPolynomial) -> "TensorPolynomial":
        """self * (1 x q)."""
        t: dict = {}
        for (l, r), c in self.terms.items():
            for w, cq in q.terms.items():
                key = (l, r + w)
                t[key] = t.get(key, 0.0) + c * cq
        return TensorPolynomial(t)


# -- text syntax -----------------------------------------------------------

_TOKEN = re.compile(r"^(X|u|v)(\d+)(\^-1|\^\+?1)?$", re.IGNORECASE)


def parse_word(text: str) -> NCPolynomial:
    """Parse a single word like ``"X1 u2 X1 u2^-1 v1"`` into a monomial."""
    letters = []
    for tok in text.split():
        mt = _TOKEN.match(tok)
        if not mt:
            raise ValueError(f"cannot parse letter {tok!r}")
        kind_raw, idx, exp_raw = mt.group(1), int(mt.group(2)), mt.group(3)
        kind = {"x": "x", "u": "u", "v": "v"}[kind_raw.lower()]
        exp = -1 if exp_raw == "^-1" else 1
        if kind == "x" and exp == -1:
            raise ValueError("self-adjoint letters cannot be inverted")
        letters.append((kind, idx, exp))
    return NCPolynomial.monomial(tuple(letters))


def word_to_text(word: Word) -> str:
    parts = []
    for kind, idx, exp in word:
        base = {"x": "X", "u": "u", "v": "v"}[kind] + str(idx)
        parts.append(base + ("^-1" if exp == -1 else ""))
    return " ".join(parts)


# -- evaluation ------------------------------------------------------------


def _letter_matrices(
    word: Word,
    x: np.ndarray,
    u_ext: np.ndarray | None,
    cayley_cache: dict,
) -> list[np.ndarray]:
    """Matrices (batched) for each letter of a word.

    ``x`` has shape (..., m, n, n); ``u_ext`` shape (count, n, n).
    """
    mats = []
    for kind, idx, exp in word:
        if kind == "x":
            if idx > x.shape[-3]:
                raise IndexError(f"letter X{idx} out of range (m={x.shape[-3]})")
            mats.append(x[..., idx - 1, :, :])
        elif kind == "u":
            if idx > x.shape[-3]:
                raise IndexError(f"letter u{idx} out of range (m={x.shape[-3]})")
            if idx not in cayley_cache:
                cayley_cache[idx] = cayley(x[..., idx - 1, :, :])
            c = cayley_cache[idx]
            mats.append(c if exp == 1 else np.conj(np.swapaxes(c, -1, -2)))
        else:
            if u_ext is None or idx > u_ext.shape[0]:
                raise IndexError(f"external unitary v{idx} not provided")
            c = u_ext[idx - 1]
            mats.append(c if exp == 1 else c.conj().T)
    return mats


def eval_word_array(
    word: Word, x: np.ndarray, u_ext: np.ndarray | None = None, cayley_cache: dict | None = None
) -> np.ndarray:
    n = x.shape[-1]
    if cayley_cache is None:
        cayley_cache = {}
    mats = _letter_matrices(word, x, u_ext, cayley_cache)
    if not mats:
        shape = x.shape[:-3] + (n, n)
        return np.broadcast_to(np.eye(n, dtype=complex), shape).copy()
    acc = mats[0]
    for mat in mats[1:]:
        acc = acc @ mat  # matmul broadcasts leading batch axes
    lead = x.shape[:-3]
    if acc.ndim == 2 and lead:
        acc = np.broadcast_to(acc, lead + acc.shape).copy()
    return acc


def eval_poly_array(
    p: NCPolynomial, x: np.ndarray, u_ext: np.ndarray | None = None, cayley_cache: dict | None = None
) -> np.ndarray:
    """Evaluate on batched tuples: x shape (..., m, n, n) -> (..., n, n)."""
    n = x.shape[-1]
    if cayley_cache is None:
        cayley_cache = {}
    out = np.zeros(x.shape[:-3] + (n, n), dtype=complex)
    for w, c in p.terms.items():
        out += c * eval_word_array(w, x, u_ext, cayley_cache)
    return out


def eval(p: NCPolynomial, x: HermitianTuple, u: UnitaryTuple | None = None) -> np.ndarray:
    """Substitute matrices for letters and return the resulting n x n matrix."""
    u_ext = u.data if u is not None and u.count else None
    return eval_poly_array(p, x.data, u_ext)


def trace_eval(p: NCPolynomial, x: HermitianTuple, u: UnitaryTuple | None = None) -> complex:
    """(1/n) Tr of the evaluated polynomial."""
    mat = eval(p, x, u)
    return complex(np.trace(mat) / x.n)


# -- derivations -----------------------------------------------------------


def free_difference_quotient(p: NCPolynomial, i: int) -> TensorPolynomial:
    """Leibniz splitting at every occurrence of X_i: a X_i b -> a (x) b."""
    t: dict = {}
    for w, c in p.terms.items():
        for pos, (kind, idx, _exp) in enumerate(w):
            if kind == "x" and idx == i:
                key = (w[:pos], w[pos + 1 :])
                t[key] = t.get(key, 0.0) + c
    return TensorPolynomial(t)


def cyclic_gradient(p: NCPolynomial, i: int) -> NCPolynomial:
    """Rotation sum: a X_i b -> b a over occurrences of X_i in each word."""
    t: dict = {}
    for w, c in p.terms.items():
        for pos, (kind, idx, _exp) in enumerate(w):
            if kind == "x" and idx == i:
                key = w[pos + 1 :] + w[:pos]
                t[key] = t.get(key, 0.0) + c
    return NCPolynomial(t)


def bitrace(
    tp: TensorPolynomial, x: HermitianTuple, u: UnitaryTuple | None = None
) -> complex:
    """sum coeff * (1/n)Tr(left) * (1/n)Tr(right)."""
    u_ext = u.data if u is not None and u.count else None
    return complex(bitrace_array(tp, x.data, u_ext))


def bitrace_array(
    tp: TensorPolynomial, x: np.ndarray, u_ext: np.ndarray | None = None, cayley_cache: dict | None = None
) -> np.ndarray:
    """Batched bitrace: x shape (..., m, n, n) -> complex array (...)."""
    n = x.shape[-1]
    if cayley_cache is None:
        cayley_cache = {}
    out = np.zeros(x.shape[:-3], dtype=complex)
    for (l, r), c in tp.terms.items():
        tl = np.trace(eval_word_array(l, x, u_ext, cayley_cache), axis1=-2, axis2=-1) / n
        tr = np.trace(eval_word_array(r, x, u_ext, cayley_cache), axis1=-2, axis2=-1) / n
        out = out + c * tl * tr
    return out
