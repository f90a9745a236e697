"""Measurement model f(x) = g(Ax): pointwise links, forward map, gradients.

The model is the composition of a linear mixing stage A (a dense matrix or
an implicit linear map) with an elementwise invertible link g. Everything
downstream (greedy solvers, nonlinear least squares, the benchmark harness)
talks to the model through `apply`, `residual_gradient` and
`restricted_jacobian`.
"""

import numpy as np

__all__ = [
    "Nonlinearity",
    "IDENTITY",
    "EXP",
    "SIGNED_LOG",
    "LinearMap",
    "IdentityMap",
    "MeasurementModel",
    "NonFiniteModelError",
]

# exp(t) overflows float64 near t ~ 709; stay a bit below
EXP_ARG_LIMIT = 700.0


class NonFiniteModelError(RuntimeError):
    """Raised when a model evaluation produces a non-finite value."""


class Nonlinearity:
    """Elementwise link g with derivative and inverse.

    Supported kinds:

    - ``identity``: g(t) = t
    - ``exp``:      g(t) = e^t
    - ``slog``:     g(t) = sign(t) * ln(1 + |t|)  (signed logarithm)

    All three are continuous, strictly increasing on the whole real line
    and have strictly positive derivative, so g is invertible.
    """

    KINDS = ("identity", "exp", "slog")

    def __init__(self, kind):
        if kind not in self.KINDS:
            raise ValueError(f"unknown nonlinearity kind {kind!r}; expected one of {self.KINDS}")
        self.kind = kind

    def g(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "identity":
            return t.copy()
        if self.kind == "exp":
            return np.exp(t)
        return np.sign(t) * np.log1p(np.abs(t))

    def dg(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "identity":
            return np.ones_like(t)
        if self.kind == "exp":
            return np.exp(t)
        return 1.0 / (1.0 + np.abs(t))

    def inverse(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "identity":
            return u.copy()
        if self.kind == "exp":
            return np.log(u)
        return np.sign(u) * np.expm1(np.abs(u))

    @classmethod
    def from_name(cls, name):
        return cls(name)

    def __repr__(self):
        return f"Nonlinearity({self.kind!r})"

    def __eq__(self, other):
        return isinstance(other, Nonlinearity) and other.kind == self.kind

    def __hash__(self):
        return hash(("Nonlinearity", self.kind))


IDENTITY = Nonlinearity("identity")
EXP = Nonlinearity("exp")
SIGNED_LOG = Nonlinearity("slog")


class LinearMap:
    """Implicit m-by-n linear operator given by matvec/rmatvec actions.

    Used where materializing A is wasteful (wavelet synthesis on images,
    identity at image scale). Dense paths accept plain ndarrays instead.
    """

    def __init__(self, shape, matvec, rmatvec):
        self.shape = (int(shape[0]), int(shape[1]))
        self._matvec = matvec
        self._rmatvec = rmatvec

    def matvec(self, v):
        return self._matvec(np.asarray(v, dtype=float))

    def rmatvec(self, u):
        return self._rmatvec(np.asarray(u, dtype=float))

    def column(self, j):
        e = np.zeros(self.shape[1])
        e[j] = 1.0
        return self.matvec(e)


class IdentityMap(LinearMap):
    def __init__(self, n):
        super().__init__((n, n), lambda v: v.copy(), lambda u: u.copy())
        self.is_identity = True


def _matvec(A, x):
    if isinstance(A, np.ndarray):
        return A @ x
    return A.matvec(x)


def _rmatvec(A, u):
    if isinstance(A, np.ndarray):
        return A.T @ u
    return A.rmatvec(u)


class MeasurementModel:
    """Forward map f(x) = g(Ax) with m observations of an n-vector.

    Parameters
    ----------
    A : ndarray of shape (m, n), or LinearMap
        Linear mixing stage. Dense matrices get full validation; implicit
        maps are trusted to be linear and adjoint-consistent.
    g : Nonlinearity (or any object with elementwise g/dg methods)
        Pointwise link applied to Ax.
    """

    def __init__(self, A, g):
        if isinstance(A, np.ndarray):
            A = np.asarray(A, dtype=float)
            if A.ndim != 2:
                raise ValueError(f"A must be 2-D, got shape {A.shape}")
            if not np.all(np.isfinite(A)):
                raise ValueError("A contains non-finite entries")
        elif not isinstance(A, LinearMap):
            raise TypeError("A must be an ndarray or a LinearMap")
        m, n = A.shape
        if m < 1 or n < 1:
            raise ValueError(f"A must have positive dimensions, got {A.shape}")
        self.A = A
        self.g = g

    @property
    def m(self):
        return self.A.shape[0]

    @property
    def n(self):
        return self.A.shape[1]

    def _check_x(self, x):
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.n:
            raise ValueError(f"x has length {x.size}, model expects {self.n}")
        return x

    def _check_y(self, y):
        y = np.asarray(y, dtype=float).ravel()
        if y.size != self.m:
            raise ValueError(f"y has length {y.size}, model expects {self.m}")
        return y

    def linear_part(self, x):
        """Ax, without the link applied."""
        return _matvec(self.A, self._check_x(x))

    def apply(self, x):
        """Evaluate f(x) = g(Ax).

        Raises NonFiniteModelError if any output entry overflows, naming
        the first offending measurement row.
        """
        u = self.linear_part(x)
        out = self.g.g(u)
        bad = np.flatnonzero(~np.isfinite(out))
        if bad.size:
            raise NonFiniteModelError(
                f"model output is non-finite at row {bad[0]} (Ax = {u[bad[0]]:.6g})"
            )
        return out

    def residual_gradient(self, x, y):
        """Gradient of the squared residual, grad_x ||y - f(x)||_2^2.

        Equals 2 A^T (g'(Ax) * (g(Ax) - y)). The greedy solvers take the
        absolute value, so the sign and the factor 2 do not affect their
        selection rule.
        """
        y = self._check_y(y)
        u = self.linear_part(x)
        fx = self.g.g(u)
        w = self.g.dg(u) * (fx - y)
        if not np.all(np.isfinite(w)):
            raise NonFiniteModelError("non-finite intermediate in residual gradient")
        grad = 2.0 * _rmatvec(self.A, w)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteModelError("non-finite residual gradient")
        return grad

    def restricted_jacobian(self, x, support):
        """Jacobian of f restricted to the columns in `support`.

        J[i, j] = g'((Ax)_i) * A[i, support[j]], shape (m, len(support)).
        The off-support entries of x still contribute to Ax; the greedy
        solvers keep x identically zero there.
        """
        support = np.asarray(support, dtype=int).ravel()
        if support.size == 0:
            raise ValueError("support must be nonempty")
        if support.min() < 0 or support.max() >= self.n:
            raise ValueError("support index out of range")
        u = self.linear_part(x)
        w = self.g.dg(u)
        if isinstance(self.A, np.ndarray):
            cols = self.A[:, support]
        else:
            cols = np.column_stack([self.A.column(j) for j in support])
        J = w[:, None] * cols
        if not np.all(np.isfinite(J)):
            raise NonFiniteModelError("non-finite Jacobian")
        return J

    def jacobian_ops(self, x, support):
        """Matrix-free actions of the restricted Jacobian at x.

        Returns (jmat, jtmat): v -> J v and u -> J^T u for v of length
        len(support). Avoids materializing columns for implicit maps.
        """
        support = np.asarray(support, dtype=int).ravel()
        if support.size == 0:
            raise ValueError("support must be nonempty")
        u = self.linear_part(x)
        w = self.g.dg(u)
        n = self.n

        def jmat(v):
            full = np.zeros(n)
            full[support] = v
            return w * _matvec(self.A, full)

        def jtmat(r):
            return _rmatvec(self.A, w * r)[support]

        return jmat, jtmat

    def __repr__(self):
        return f"MeasurementModel(m={self.m}, n={self.n}, g={getattr(self.g, 'kind', self.g)!r})"
