"""Independent oracles used by the test suite.

Everything here deliberately avoids the library's grouped coefficient
functions and assembled forms: polynomial calculus is exact on coefficient
arrays, and the weak-form oracles expand the constraint operators by the
product rule from scratch, so that a transcription or sign error in the
assembly cannot cancel in the comparison.
"""

import numpy as np

from nullctrl.fem import Assembler, QuadratureRule


class Poly2T:
    """Polynomial in (x1, x2, t) with exact calculus on coefficient arrays."""

    def __init__(self, coeffs):
        self.c = np.asarray(coeffs, dtype=float)

    @classmethod
    def random(cls, rng, deg_x, deg_t, scale=1.0):
        """Random polynomial with *total* spatial degree <= deg_x."""
        c = rng.standard_normal((deg_x + 1, deg_x + 1, deg_t + 1)) * scale
        for a in range(deg_x + 1):
            for b in range(deg_x + 1):
                if a + b > deg_x:
                    c[a, b, :] = 0.0
        return cls(c)

    @classmethod
    def bubble(cls, L1, L2):
        """x1 (L1 - x1) x2 (L2 - x2): vanishes on the rectangle boundary."""
        cx = np.array([0.0, L1, -1.0])
        cy = np.array([0.0, L2, -1.0])
        c = np.einsum("a,b->ab", cx, cy)[:, :, None]
        return cls(c)

    @classmethod
    def tfactor(cls, coeffs_t):
        c = np.asarray(coeffs_t, dtype=float)[None, None, :]
        return cls(c)

    def __mul__(self, other):
        if np.isscalar(other):
            return Poly2T(self.c * other)
        a, b = self.c, other.c
        out = np.zeros((a.shape[0] + b.shape[0] - 1,
                        a.shape[1] + b.shape[1] - 1,
                        a.shape[2] + b.shape[2] - 1))
        for i in range(a.shape[0]):
            for j in range(a.shape[1]):
                for k in range(a.shape[2]):
                    if a[i, j, k] != 0.0:
                        out[i:i + b.shape[0], j:j + b.shape[1],
                            k:k + b.shape[2]] += a[i, j, k] * b
        return Poly2T(out)

    __rmul__ = __mul__

    def __add__(self, other):
        sa, sb = self.c.shape, other.c.shape
        shape = tuple(max(u, v) for u, v in zip(sa, sb))
        out = np.zeros(shape)
        out[:sa[0], :sa[1], :sa[2]] += self.c
        out[:sb[0], :sb[1], :sb[2]] += other.c
        return Poly2T(out)

    def _diff(self, axis):
        n = self.c.shape[axis]
        if n == 1:
            return Poly2T(np.zeros((1, 1, 1)))
        sl = [slice(None)] * 3
        sl[axis] = slice(1, None)
        k = np.arange(1, n)
        shape = [1, 1, 1]
        shape[axis] = n - 1
        return Poly2T(self.c[tuple(sl)] * k.reshape(shape))

    def dx1(self):
        return self._diff(0)

    def dx2(self):
        return self._diff(1)

    def dt(self):
        return self._diff(2)

    def lap(self):
        return self.dx1().dx1() + self.dx2().dx2()

    def __call__(self, X, t):
        X = np.asarray(X, dtype=float)
        x1, x2 = X[..., 0], X[..., 1]
        t = np.asarray(t, dtype=float)
        out = np.zeros(np.broadcast(x1, t).shape)
        for i in range(self.c.shape[0]):
            for j in range(self.c.shape[1]):
                for k in range(self.c.shape[2]):
                    if self.c[i, j, k] != 0.0:
                        out = out + self.c[i, j, k] * x1 ** i * x2 ** j * t ** k
        return out

    def as_spacetime(self):
        return lambda X, t: self(X, t)


def fd_gradient(f, x, h=1e-6):
    """Central-difference gradient of a scalar function of a 2-point."""
    x = np.asarray(x, dtype=float)
    g = np.zeros(2)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def fd_divergence(f, x, h=1e-6):
    """Central-difference divergence of a vector field of a 2-point."""
    x = np.asarray(x, dtype=float)
    d = 0.0
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        d += (f(x + e)[i] - f(x - e)[i]) / (2.0 * h)
    return d


def quad_spacetime(mesh, rule, integrand):
    """Quadrature of integrand(X, t) over the cylinder with the given rule."""
    asm = Assembler(mesh, rule)
    total = 0.0
    for batch in asm.batches():
        vals = integrand(batch.Xq[:, None, :, :], batch.tq[None, :, :])
        total += float(np.einsum("abq,q->", vals, batch.w))
    return total


def heat_constraint_oracle(mesh, ws, G, z, p, lam, rule):
    """Product-rule expansion of the normalized heat constraint form.

    Evaluates  iint (zhat - rho^{-1} L*(rho0 phat)) lamhat  for polynomial
    inputs, expanding L*(rho0 phat) term by term with the weight-derivative
    ratios written out from scratch (no grouped coefficients, no integration
    by parts: the Laplacian of the polynomial is exact).
    """
    T = ws.T
    Gf = G if callable(G) else (lambda X, t, g=float(G): g)
    p_t, p_x1, p_x2, p_lap = p.dt(), p.dx1(), p.dx2(), p.lap()

    def integrand(X, t):
        chi, gchi, lchi = ws.chi(X)
        tau = T - t
        rr0 = tau ** 1.5                                   # rho^-1 rho0
        rr0_t = -1.5 * np.sqrt(tau) + chi / np.sqrt(tau)   # rho^-1 d_t rho0
        rr0_g = np.sqrt(tau)[..., None] * gchi             # rho^-1 grad rho0
        rr0_lap = (np.sqrt(tau) * lchi
                   + np.einsum("...i,...i->...", gchi, gchi) / np.sqrt(tau))
        pv = p(X, t)
        grad_term = rr0_g[..., 0] * p_x1(X, t) + rr0_g[..., 1] * p_x2(X, t)
        Lstar = (-(rr0_t * pv + rr0 * p_t(X, t))
                 - (rr0_lap * pv + 2.0 * grad_term + rr0 * p_lap(X, t))
                 + Gf(X, t) * rr0 * pv)
        return (z(X, t) - Lstar) * lam(X, t)

    return quad_spacetime(mesh, rule, integrand)


def oseen_constraint_oracle(mesh, ws, nu, ybar, w, zv, pv, sigma, lamv, rule):
    """Direct quadrature of  iint (z - M* p - grad sigma) . lam.

    M* p = -p_t - nu Lap p - (grad p)(ybar + w) - (grad p)^T ybar, expanded
    with exact polynomial derivatives; with ybar = w = 0 this is the Stokes
    constraint.  zv, pv, lamv are pairs of Poly2T, sigma a Poly2T.
    """
    p_t = [p.dt() for p in pv]
    p_lap = [p.lap() for p in pv]
    # jac[i][j] = d_j p_i
    jac = [[p.dx1(), p.dx2()] for p in pv]
    s_grad = [sigma.dx1(), sigma.dx2()]

    def integrand(X, t):
        shape = np.broadcast(X[..., 0], t).shape
        yb = (np.broadcast_to(np.asarray(ybar(X, t), dtype=float), shape + (2,))
              if ybar is not None else np.zeros(shape + (2,)))
        wv = (np.broadcast_to(np.asarray(w(X, t), dtype=float), shape + (2,))
              if w is not None else np.zeros(shape + (2,)))
        adv = yb + wv
        out = 0.0
        for i in range(2):
            Ji = [jac[i][j](X, t) for j in range(2)]
            JTi = [jac[j][i](X, t) for j in range(2)]
            Mstar_i = (-p_t[i](X, t) - nu * p_lap[i](X, t)
                       - (Ji[0] * adv[..., 0] + Ji[1] * adv[..., 1])
                       - (JTi[0] * yb[..., 0] + JTi[1] * yb[..., 1]))
            out = out + (zv[i](X, t) - Mstar_i - s_grad[i](X, t)) * lamv[i](X, t)
        return out

    return quad_spacetime(mesh, rule, integrand)


def hatted_flow_constraint_oracle(mesh, ws, nu, ybar, w, zv, pv, sigma,
                                  lamv, mu, rule):
    """Direct quadrature of the hatted flow constraint, expanded from scratch.

    Momentum part:
        iint (zhat - rho^{-1}[M*(rho0 phat) + grad(rho sigmahat)]).lamhat
    Divergence part: iint rho1^{-1} div(rho0 phat) muhat
    with M* expanded by the product rule using the weight-derivative ratios
    and exact polynomial derivatives (no integration by parts: the Laplacian
    of the polynomial is used directly).
    """
    T = ws.T
    p_t = [p.dt() for p in pv]
    p_lap = [p.lap() for p in pv]
    jac = [[pv[i].dx1(), pv[i].dx2()] for i in range(2)]
    s_grad = [sigma.dx1(), sigma.dx2()]

    def integrand(X, t):
        shape = np.broadcast(X[..., 0], t).shape
        chi, gchi, lchi = ws.chi(X)
        tau = T - t
        sq = np.sqrt(tau)
        rr0 = tau * sq
        rr0_t = -1.5 * sq + chi / sq
        rr0_g = sq[..., None] * gchi
        rr0_lap = sq * lchi + np.einsum("...i,...i->...", gchi, gchi) / sq
        yb = (np.broadcast_to(np.asarray(ybar(X, t), dtype=float), shape + (2,))
              if ybar is not None else np.zeros(shape + (2,)))
        wv = (np.broadcast_to(np.asarray(w(X, t), dtype=float), shape + (2,))
              if w is not None else np.zeros(shape + (2,)))
        adv = yb + wv
        out = 0.0
        for i in range(2):
            pvi = pv[i](X, t)
            Ji = [jac[i][j](X, t) for j in range(2)]
            JTi = [jac[j][i](X, t) for j in range(2)]
            # rho^{-1} * each piece of M*(rho0 phat):
            t_term = rr0_t * pvi + rr0 * p_t[i](X, t)
            visc = nu * (rr0_lap * pvi
                         + 2.0 * (rr0_g[..., 0] * Ji[0] + rr0_g[..., 1] * Ji[1])
                         + rr0 * p_lap[i](X, t))
            conv = (rr0 * (Ji[0] * adv[..., 0] + Ji[1] * adv[..., 1])
                    + np.einsum("...j,...j->...", gchi, adv) * sq * pvi)
            convT = (rr0 * (JTi[0] * yb[..., 0] + JTi[1] * yb[..., 1])
                     + sq * gchi[..., i]
                     * (pv[0](X, t) * yb[..., 0] + pv[1](X, t) * yb[..., 1]))
            Mstar_i = -t_term - visc - conv - convT
            sig_term = s_grad[i](X, t) + gchi[..., i] / tau * sigma(X, t)
            out = out + (zv[i](X, t) - Mstar_i - sig_term) * lamv[i](X, t)
        # divergence block against muhat
        div = (tau * (jac[0][0](X, t) + jac[1][1](X, t))
               + gchi[..., 0] * pv[0](X, t) + gchi[..., 1] * pv[1](X, t))
        out = out + div * mu(X, t)
        return out

    return quad_spacetime(mesh, rule, integrand)


def reduced_vector(system, which, **fields):
    """Stack full per-field coefficient vectors into a reduced vector."""
    blocks = system.primal if which == "primal" else system.dual
    out = np.zeros(sum(b.size for b in blocks))
    for blk in blocks:
        full = fields[blk.name]
        out[blk.offset:blk.offset + blk.size] = full[blk.space.free_idx]
    return out
