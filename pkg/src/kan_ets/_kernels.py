"""Compiled inner loops for the spin-chain integrator."""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _apply(psi, diag, n_sites, coeff, out):
    for b in range(psi.shape[0]):
        x = 0j
        for i in range(n_sites):
            x += psi[b ^ (1 << i)]
        out[b] = diag[b] * psi[b] + coeff * x


@njit(cache=True, nogil=True)
def evolve_single(diag, weights, n_sites, hx, amp, omega, dt, n_steps, n_sub, out, rhs, norms):
    """RK4 for one drive; fills out/rhs/norms in place and returns the max |Im| of the RHS."""
    dim = diag.shape[0]
    psi = np.zeros(dim, np.complex128)
    psi[0] = 1.0
    k1 = np.empty(dim, np.complex128)
    k2 = np.empty(dim, np.complex128)
    k3 = np.empty(dim, np.complex128)
    k4 = np.empty(dim, np.complex128)
    tmp = np.empty(dim, np.complex128)
    h = dt / n_sub
    worst_imag = 0.0
    for k in range(n_steps):
        for s in range(n_sub):
            t = k * dt + s * h
            c1 = -0.5 * (hx + amp * np.sin(omega * t))
            c2 = -0.5 * (hx + amp * np.sin(omega * (t + 0.5 * h)))
            c4 = -0.5 * (hx + amp * np.sin(omega * (t + h)))
            _apply(psi, diag, n_sites, c1, k1)
            for b in range(dim):
                k1[b] *= -1j
                tmp[b] = psi[b] + (0.5 * h) * k1[b]
            _apply(tmp, diag, n_sites, c2, k2)
            for b in range(dim):
                k2[b] *= -1j
                tmp[b] = psi[b] + (0.5 * h) * k2[b]
            _apply(tmp, diag, n_sites, c2, k3)
            for b in range(dim):
                k3[b] *= -1j
                tmp[b] = psi[b] + h * k3[b]
            _apply(tmp, diag, n_sites, c4, k4)
            for b in range(dim):
                psi[b] += (h / 6.0) * (k1[b] + 2.0 * k2[b] + 2.0 * k3[b] - 1j * k4[b])

        nrm = 0.0
        mag = 0.0
        acc = 0j
        for b in range(dim):
            cb = psi[b].conjugate()
            nrm += psi[b].real ** 2 + psi[b].imag ** 2
            xs = 0j
            for i in range(n_sites):
                fb = psi[b ^ (1 << i)]
                xs += fb
                acc += cb * weights[i, b] * fb
            mag += (cb * xs).real
        # RHS = -1j * acc
        val = -1j * acc
        norms[k] = nrm
        out[k] = mag
        rhs[k] = val.real
        if abs(val.imag) > worst_imag:
            worst_imag = abs(val.imag)
    return worst_imag
