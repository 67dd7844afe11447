"""Compiled inner loops for the MPM stepper and the splat rasterizer.

All kernels are serial (no prange) so accumulation order is fixed and results
are bit-reproducible run to run. Error conditions are reported through an
int32 status array (code, particle index) because numba cannot raise rich
exceptions cheaply; wrappers in mpm.py translate them.

Status codes: 0 ok, 1 NaN in particle state, 2 inverted element,
3 velocity-gradient guard tripped, 4 stencil clipped at the domain edge.
"""

import math

import numpy as np
from numba import njit

OK = 0
ERR_NAN = 1
ERR_INVERTED = 2
ERR_GRADV = 3
ERR_STENCIL = 4

KERNEL_OPTS = dict(cache=True, nogil=True)


# ---------------------------------------------------------------------------
# B-spline weights
# ---------------------------------------------------------------------------

@njit(inline="always", **KERNEL_OPTS)
def _weights_1d(u, degree, w, dw):
    """1D B-spline weights for grid coordinate u (units of dx).

    Fills w[0:degree+1], dw[0:degree+1] (dw in units of 1/dx) and returns the
    base node index. degree 2 is the C1 quadratic kernel, degree 3 cubic.
    """
    if degree == 2:
        base = int(math.floor(u - 0.5))
        fx = u - base
        w[0] = 0.5 * (1.5 - fx) ** 2
        w[1] = 0.75 - (fx - 1.0) ** 2
        w[2] = 0.5 * (fx - 0.5) ** 2
        dw[0] = fx - 1.5
        dw[1] = -2.0 * (fx - 1.0)
        dw[2] = fx - 0.5
        return base
    # cubic
    base = int(math.floor(u)) - 1
    fx = u - base
    for i in range(4):
        d = fx - i
        ad = abs(d)
        if ad < 1.0:
            w[i] = 0.5 * ad ** 3 - ad ** 2 + 2.0 / 3.0
            dw[i] = (1.5 * ad ** 2 - 2.0 * ad) * (1.0 if d >= 0 else -1.0)
        elif ad < 2.0:
            w[i] = (2.0 - ad) ** 3 / 6.0
            dw[i] = -0.5 * (2.0 - ad) ** 2 * (1.0 if d >= 0 else -1.0)
        else:
            w[i] = 0.0
            dw[i] = 0.0
    return base


@njit(**KERNEL_OPTS)
def bspline_weights_kernel(pos, origin, dx, degree, nodes, w_out, dw_out, base_out):
    """Per-axis weights/gradients for one position; returns a status code.

    w_out, dw_out are (degree+1, 3); dw_out is in world units (1/dx applied).
    """
    sup = degree + 1
    for a in range(3):
        u = (pos[a] - origin) / dx
        w = np.empty(4)
        dw = np.empty(4)
        base = _weights_1d(u, degree, w, dw)
        if base < 0 or base + sup > nodes:
            return ERR_STENCIL
        base_out[a] = base
        for i in range(sup):
            w_out[i, a] = w[i]
            dw_out[i, a] = dw[i] / dx
    return OK


# ---------------------------------------------------------------------------
# Polar decomposition (Higham iteration)
# ---------------------------------------------------------------------------

@njit(inline="always", **KERNEL_OPTS)
def _polar_3x3(F, R):
    """Rotation factor of F (det F > 0 assumed), written into R."""
    a = F[0, 0]; b = F[0, 1]; c = F[0, 2]
    d = F[1, 0]; e = F[1, 1]; f = F[1, 2]
    g = F[2, 0]; h = F[2, 1]; i = F[2, 2]
    for _ in range(40):
        det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)
        inv = 1.0 / det
        # inverse transpose via cofactors
        y00 = (e * i - f * h) * inv
        y01 = -(d * i - f * g) * inv
        y02 = (d * h - e * g) * inv
        y10 = -(b * i - c * h) * inv
        y11 = (a * i - c * g) * inv
        y12 = -(a * h - b * g) * inv
        y20 = (b * f - c * e) * inv
        y21 = -(a * f - c * d) * inv
        y22 = (a * e - b * d) * inv
        n00 = 0.5 * (a + y00); n01 = 0.5 * (b + y01); n02 = 0.5 * (c + y02)
        n10 = 0.5 * (d + y10); n11 = 0.5 * (e + y11); n12 = 0.5 * (f + y12)
        n20 = 0.5 * (g + y20); n21 = 0.5 * (h + y21); n22 = 0.5 * (i + y22)
        diff = (abs(n00 - a) + abs(n01 - b) + abs(n02 - c)
                + abs(n10 - d) + abs(n11 - e) + abs(n12 - f)
                + abs(n20 - g) + abs(n21 - h) + abs(n22 - i))
        a = n00; b = n01; c = n02
        d = n10; e = n11; f = n12
        g = n20; h = n21; i = n22
        if diff < 1e-14:
            break
    R[0, 0] = a; R[0, 1] = b; R[0, 2] = c
    R[1, 0] = d; R[1, 1] = e; R[1, 2] = f
    R[2, 0] = g; R[2, 1] = h; R[2, 2] = i


@njit(**KERNEL_OPTS)
def polar_batch(F, R):
    for p in range(F.shape[0]):
        _polar_3x3(F[p], R[p])


@njit(inline="always", **KERNEL_OPTS)
def _det3(M):
    return (M[0, 0] * (M[1, 1] * M[2, 2] - M[1, 2] * M[2, 1])
            - M[0, 1] * (M[1, 0] * M[2, 2] - M[1, 2] * M[2, 0])
            + M[0, 2] * (M[1, 0] * M[2, 1] - M[1, 1] * M[2, 0]))


# ---------------------------------------------------------------------------
# Constitutive models (batched; single source of truth for the stepper)
# ---------------------------------------------------------------------------

@njit(inline="always", **KERNEL_OPTS)
def _stress_total(F_E, R, F_v, C, mu, lam, eta, sig):
    """Total Cauchy stress (elastic corotated + viscous) into sig; returns J_E.

    sigma_E = (2 mu / J)(F_E - R) F_E^T + lam (J - 1) I,  J = det F_E
    sigma_v = det(F_v) * 2 eta * D,  D = sym(C)
    """
    J = _det3(F_E)
    coef = 2.0 * mu / J
    for r in range(3):
        for c in range(3):
            s = 0.0
            for k in range(3):
                s += (F_E[r, k] - R[r, k]) * F_E[c, k]
            sig[r, c] = coef * s
    vol = lam * (J - 1.0)
    sig[0, 0] += vol
    sig[1, 1] += vol
    sig[2, 2] += vol
    if eta != 0.0:
        Jv2eta = _det3(F_v) * 2.0 * eta
        for r in range(3):
            for c in range(3):
                sig[r, c] += Jv2eta * 0.5 * (C[r, c] + C[c, r])
    return J


@njit(**KERNEL_OPTS)
def stress_batch(F_E, R, F_v, C, mu, lam, eta, out):
    sig = np.empty((3, 3))
    for p in range(F_E.shape[0]):
        _stress_total(F_E[p], R[p], F_v[p], C[p], mu[p], lam[p], eta[p], sig)
        out[p] = sig


# ---------------------------------------------------------------------------
# Transfers
# ---------------------------------------------------------------------------

@njit(**KERNEL_OPTS)
def p2g_kernel(pos, vel, mass, vol0, F_E, F_v, C, R_polar,
               mu, lam, eta,
               grid_mass, grid_mom, grid_force,
               origin, dx, degree, status):
    """Scatter mass, APIC momentum and internal stress forces onto the grid.

    Recomputes the polar rotation of F_E into R_polar (needed by the
    corotated stress) so callers may mutate F_E freely between calls.
    """
    n = pos.shape[0]
    nodes = grid_mass.shape[0]
    sup = degree + 1
    w = np.empty((4, 3))
    dw = np.empty((4, 3))
    wa = np.empty(4)
    dwa = np.empty(4)
    base = np.empty(3, dtype=np.int64)
    sig = np.empty((3, 3))
    rzk = np.empty(4)
    cz0 = np.empty(4)
    cz1 = np.empty(4)
    cz2 = np.empty(4)
    inv_dx = 1.0 / dx
    for p in range(n):
        # NaN guard over the full simulation state of this particle
        bad = False
        for a in range(3):
            if pos[p, a] != pos[p, a] or vel[p, a] != vel[p, a]:
                bad = True
        for r in range(3):
            for c in range(3):
                if (F_E[p, r, c] != F_E[p, r, c] or F_v[p, r, c] != F_v[p, r, c]
                        or C[p, r, c] != C[p, r, c]):
                    bad = True
        if bad or mass[p] != mass[p]:
            status[0] = ERR_NAN
            status[1] = p
            return
        _polar_3x3(F_E[p], R_polar[p])
        for a in range(3):
            u = (pos[p, a] - origin) * inv_dx
            b = _weights_1d(u, degree, wa, dwa)
            if b < 0 or b + sup > nodes:
                status[0] = ERR_STENCIL
                status[1] = p
                return
            base[a] = b
            for i in range(sup):
                w[i, a] = wa[i]
                dw[i, a] = dwa[i] * inv_dx

        J = _stress_total(F_E[p], R_polar[p], F_v[p], C[p],
                          mu[p], lam[p], eta[p], sig)
        if J <= 0.0 or _det3(F_v[p]) <= 0.0:
            status[0] = ERR_INVERTED
            status[1] = p
            return
        fscale = vol0[p] * J
        s00 = fscale * sig[0, 0]; s01 = fscale * sig[0, 1]; s02 = fscale * sig[0, 2]
        s10 = fscale * sig[1, 0]; s11 = fscale * sig[1, 1]; s12 = fscale * sig[1, 2]
        s20 = fscale * sig[2, 0]; s21 = fscale * sig[2, 1]; s22 = fscale * sig[2, 2]

        mp = mass[p]
        v0 = vel[p, 0]; v1 = vel[p, 1]; v2 = vel[p, 2]
        c00 = C[p, 0, 0]; c01 = C[p, 0, 1]; c02 = C[p, 0, 2]
        c10 = C[p, 1, 0]; c11 = C[p, 1, 1]; c12 = C[p, 1, 2]
        c20 = C[p, 2, 0]; c21 = C[p, 2, 1]; c22 = C[p, 2, 2]
        b0 = base[0]; b1 = base[1]; b2 = base[2]
        for k in range(sup):
            rz = origin + (b2 + k) * dx - pos[p, 2]
            rzk[k] = rz
            cz0[k] = c02 * rz
            cz1[k] = c12 * rz
            cz2[k] = c22 * rz
        for i in range(sup):
            wx = w[i, 0]
            dwx = dw[i, 0]
            rx = origin + (b0 + i) * dx - pos[p, 0]
            t0 = v0 + c00 * rx
            t1 = v1 + c10 * rx
            t2 = v2 + c20 * rx
            gi = b0 + i
            for j in range(sup):
                wy = w[j, 1]
                wxy = wx * wy
                gx_xy = dwx * wy
                gy_xy = wx * dw[j, 1]
                ry = origin + (b1 + j) * dx - pos[p, 1]
                u0 = t0 + c01 * ry
                u1 = t1 + c11 * ry
                u2 = t2 + c21 * ry
                gj = b1 + j
                for k in range(sup):
                    wz = w[k, 2]
                    wijk = wxy * wz
                    pw = mp * wijk
                    gwx = gx_xy * wz
                    gwy = gy_xy * wz
                    gwz = wxy * dw[k, 2]
                    gk = b2 + k
                    grid_mass[gi, gj, gk] += pw
                    grid_mom[gi, gj, gk, 0] += pw * (u0 + cz0[k])
                    grid_mom[gi, gj, gk, 1] += pw * (u1 + cz1[k])
                    grid_mom[gi, gj, gk, 2] += pw * (u2 + cz2[k])
                    grid_force[gi, gj, gk, 0] -= s00 * gwx + s01 * gwy + s02 * gwz
                    grid_force[gi, gj, gk, 1] -= s10 * gwx + s11 * gwy + s12 * gwz
                    grid_force[gi, gj, gk, 2] -= s20 * gwx + s21 * gwy + s22 * gwz
    status[0] = OK


@njit(**KERNEL_OPTS)
def grid_update_kernel(grid_mass, grid_mom, grid_force, grid_vel,
                       flags, drive_vel_sum, drive_count,
                       dt, mass_eps, bc_codes, layers,
                       lo0, lo1, lo2, hi0, hi1, hi2, has_drive):
    """Momentum -> velocity, force increment, drive override, boundary faces.

    Touches only the populated node box [lo, hi) (the grid outside it is
    zero by the clear/p2g contract). bc_codes: per face (-x,+x,-y,+y,-z,+z),
    0 sticky / 1 slip.
    """
    m = grid_mass.shape[0]
    for i in range(lo0, hi0):
        near_x = i < layers or i >= m - layers
        for j in range(lo1, hi1):
            near_xy = near_x or j < layers or j >= m - layers
            for k in range(lo2, hi2):
                mn = grid_mass[i, j, k]
                drive_here = has_drive and drive_count[i, j, k] > 0
                if mn <= mass_eps and not drive_here:
                    if mn != 0.0:
                        grid_vel[i, j, k, 0] = 0.0
                        grid_vel[i, j, k, 1] = 0.0
                        grid_vel[i, j, k, 2] = 0.0
                    continue
                if mn > mass_eps:
                    inv = 1.0 / mn
                    grid_vel[i, j, k, 0] = (grid_mom[i, j, k, 0]
                                            + dt * grid_force[i, j, k, 0]) * inv
                    grid_vel[i, j, k, 1] = (grid_mom[i, j, k, 1]
                                            + dt * grid_force[i, j, k, 1]) * inv
                    grid_vel[i, j, k, 2] = (grid_mom[i, j, k, 2]
                                            + dt * grid_force[i, j, k, 2]) * inv
                if drive_here:
                    inv_c = 1.0 / drive_count[i, j, k]
                    grid_vel[i, j, k, 0] = drive_vel_sum[i, j, k, 0] * inv_c
                    grid_vel[i, j, k, 1] = drive_vel_sum[i, j, k, 1] * inv_c
                    grid_vel[i, j, k, 2] = drive_vel_sum[i, j, k, 2] * inv_c
                    flags[i, j, k] |= 2
                if not (near_xy or k < layers or k >= m - layers):
                    continue
                # boundary bands, applied last so walls win
                for a in range(3):
                    idx = i if a == 0 else (j if a == 1 else k)
                    if idx < layers:
                        face = 2 * a
                    elif idx >= m - layers:
                        face = 2 * a + 1
                    else:
                        continue
                    flags[i, j, k] |= 1
                    if bc_codes[face] == 0:
                        grid_vel[i, j, k, 0] = 0.0
                        grid_vel[i, j, k, 1] = 0.0
                        grid_vel[i, j, k, 2] = 0.0
                    else:
                        grid_vel[i, j, k, a] = 0.0


@njit(**KERNEL_OPTS)
def g2p_kernel(grid_vel, pos, vel, C, origin, dx, degree, status):
    """Gather velocities and APIC affine matrices back to particles."""
    n = pos.shape[0]
    nodes = grid_vel.shape[0]
    sup = degree + 1
    pref = 12.0 / (dx * dx * (degree + 1))
    w = np.empty((4, 3))
    wa = np.empty(4)
    dwa = np.empty(4)
    base = np.empty(3, dtype=np.int64)
    rzk = np.empty(4)
    inv_dx = 1.0 / dx
    for p in range(n):
        for a in range(3):
            u = (pos[p, a] - origin) * inv_dx
            b = _weights_1d(u, degree, wa, dwa)
            if b < 0 or b + sup > nodes:
                status[0] = ERR_STENCIL
                status[1] = p
                return
            base[a] = b
            for i in range(sup):
                w[i, a] = wa[i]
        vx = 0.0; vy = 0.0; vz = 0.0
        c00 = 0.0; c01 = 0.0; c02 = 0.0
        c10 = 0.0; c11 = 0.0; c12 = 0.0
        c20 = 0.0; c21 = 0.0; c22 = 0.0
        b0 = base[0]; b1 = base[1]; b2 = base[2]
        for k in range(sup):
            rzk[k] = origin + (b2 + k) * dx - pos[p, 2]
        for i in range(sup):
            wx = w[i, 0]
            rx = origin + (b0 + i) * dx - pos[p, 0]
            gi = b0 + i
            for j in range(sup):
                wxy = wx * w[j, 1]
                ry = origin + (b1 + j) * dx - pos[p, 1]
                gj = b1 + j
                for k in range(sup):
                    wijk = wxy * w[k, 2]
                    gvx = wijk * grid_vel[gi, gj, b2 + k, 0]
                    gvy = wijk * grid_vel[gi, gj, b2 + k, 1]
                    gvz = wijk * grid_vel[gi, gj, b2 + k, 2]
                    rz = rzk[k]
                    vx += gvx
                    vy += gvy
                    vz += gvz
                    c00 += gvx * rx; c01 += gvx * ry; c02 += gvx * rz
                    c10 += gvy * rx; c11 += gvy * ry; c12 += gvy * rz
                    c20 += gvz * rx; c21 += gvz * ry; c22 += gvz * rz
        vel[p, 0] = vx; vel[p, 1] = vy; vel[p, 2] = vz
        C[p, 0, 0] = pref * c00; C[p, 0, 1] = pref * c01; C[p, 0, 2] = pref * c02
        C[p, 1, 0] = pref * c10; C[p, 1, 1] = pref * c11; C[p, 1, 2] = pref * c12
        C[p, 2, 0] = pref * c20; C[p, 2, 1] = pref * c21; C[p, 2, 2] = pref * c22
    status[0] = OK


# ---------------------------------------------------------------------------
# Deformation gradient update + splat rotation co-update
# ---------------------------------------------------------------------------

@njit(inline="always", **KERNEL_OPTS)
def _quat_mul(aw, ax, ay, az, bw, bx, by, bz):
    return (aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw)


@njit(inline="always", **KERNEL_OPTS)
def _quat_from_mat(R):
    """Unit quaternion (w,x,y,z) of a rotation matrix (Shepperd's method)."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        return 0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s
    if R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        return (R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s
    if R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        return (R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s
    s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
    return (R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s


@njit(**KERNEL_OPTS)
def deformation_update_kernel(F_E, F_v, C, R_polar, quat, gamma,
                              dt, grad_limit, update_rotation, status):
    """F_E <- F_E (I + dt C), F_v <- F_v (I + gamma dt D), D = sym(C).

    Also rotates each splat quaternion by the incremental rotation of F_E's
    polar factor (R_polar holds the pre-update rotation and is refreshed).
    """
    n = F_E.shape[0]
    A = np.empty((3, 3))
    B = np.empty((3, 3))
    Rn = np.empty((3, 3))
    for p in range(n):
        # stability guard: dt * |grad v|_F < grad_limit
        fn = 0.0
        for r in range(3):
            for c in range(3):
                fn += C[p, r, c] * C[p, r, c]
        if dt * math.sqrt(fn) >= grad_limit:
            status[0] = ERR_GRADV
            status[1] = p
            return
        # A = I + dt*C ; B = I + gamma*dt*D
        g = gamma[p] * dt
        for r in range(3):
            for c in range(3):
                A[r, c] = dt * C[p, r, c]
                B[r, c] = g * 0.5 * (C[p, r, c] + C[p, c, r])
            A[r, r] += 1.0
            B[r, r] += 1.0
        # F_E <- F_E @ A (in place via temps)
        for r in range(3):
            e0 = F_E[p, r, 0]; e1 = F_E[p, r, 1]; e2 = F_E[p, r, 2]
            v0 = F_v[p, r, 0]; v1 = F_v[p, r, 1]; v2 = F_v[p, r, 2]
            for c in range(3):
                F_E[p, r, c] = e0 * A[0, c] + e1 * A[1, c] + e2 * A[2, c]
                F_v[p, r, c] = v0 * B[0, c] + v1 * B[1, c] + v2 * B[2, c]
        if _det3(F_E[p]) <= 0.0 or _det3(F_v[p]) <= 0.0:
            status[0] = ERR_INVERTED
            status[1] = p
            return
        if update_rotation:
            _polar_3x3(F_E[p], Rn)
            # incremental rotation dR = Rn @ R_old^T
            qw = 1.0; qx = 0.0; qy = 0.0; qz = 0.0
            d00 = Rn[0, 0] * R_polar[p, 0, 0] + Rn[0, 1] * R_polar[p, 0, 1] + Rn[0, 2] * R_polar[p, 0, 2]
            d01 = Rn[0, 0] * R_polar[p, 1, 0] + Rn[0, 1] * R_polar[p, 1, 1] + Rn[0, 2] * R_polar[p, 1, 2]
            d02 = Rn[0, 0] * R_polar[p, 2, 0] + Rn[0, 1] * R_polar[p, 2, 1] + Rn[0, 2] * R_polar[p, 2, 2]
            d10 = Rn[1, 0] * R_polar[p, 0, 0] + Rn[1, 1] * R_polar[p, 0, 1] + Rn[1, 2] * R_polar[p, 0, 2]
            d11 = Rn[1, 0] * R_polar[p, 1, 0] + Rn[1, 1] * R_polar[p, 1, 1] + Rn[1, 2] * R_polar[p, 1, 2]
            d12 = Rn[1, 0] * R_polar[p, 2, 0] + Rn[1, 1] * R_polar[p, 2, 1] + Rn[1, 2] * R_polar[p, 2, 2]
            d20 = Rn[2, 0] * R_polar[p, 0, 0] + Rn[2, 1] * R_polar[p, 0, 1] + Rn[2, 2] * R_polar[p, 0, 2]
            d21 = Rn[2, 0] * R_polar[p, 1, 0] + Rn[2, 1] * R_polar[p, 1, 1] + Rn[2, 2] * R_polar[p, 1, 2]
            d22 = Rn[2, 0] * R_polar[p, 2, 0] + Rn[2, 1] * R_polar[p, 2, 1] + Rn[2, 2] * R_polar[p, 2, 2]
            B[0, 0] = d00; B[0, 1] = d01; B[0, 2] = d02
            B[1, 0] = d10; B[1, 1] = d11; B[1, 2] = d12
            B[2, 0] = d20; B[2, 1] = d21; B[2, 2] = d22
            qw, qx, qy, qz = _quat_from_mat(B)
            nw, nx, ny, nz = _quat_mul(qw, qx, qy, qz,
                                       quat[p, 0], quat[p, 1], quat[p, 2], quat[p, 3])
            norm = math.sqrt(nw * nw + nx * nx + ny * ny + nz * nz)
            quat[p, 0] = nw / norm
            quat[p, 1] = nx / norm
            quat[p, 2] = ny / norm
            quat[p, 3] = nz / norm
            for r in range(3):
                for c in range(3):
                    R_polar[p, r, c] = Rn[r, c]
    status[0] = OK


# ---------------------------------------------------------------------------
# Drive region node flagging
# ---------------------------------------------------------------------------

@njit(**KERNEL_OPTS)
def drive_nodes_kernel(pos, tagged_idx, velocity, drive_vel_sum, drive_count,
                       origin, dx, degree, nodes):
    """Accumulate a drive velocity on every node within the B-spline support
    of any tagged particle. Each node counts a given drive at most once."""
    sup = degree + 1
    touched = np.zeros((nodes, nodes, nodes), dtype=np.uint8)
    for ti in range(tagged_idx.shape[0]):
        p = tagged_idx[ti]
        bx = by = bz = 0
        ok = True
        for a in range(3):
            u = (pos[p, a] - origin) / dx
            if degree == 2:
                b = int(math.floor(u - 0.5))
            else:
                b = int(math.floor(u)) - 1
            if b < 0 or b + sup > nodes:
                ok = False
                break
            if a == 0:
                bx = b
            elif a == 1:
                by = b
            else:
                bz = b
        if not ok:
            continue
        for i in range(sup):
            for j in range(sup):
                for k in range(sup):
                    gi = bx + i; gj = by + j; gk = bz + k
                    if touched[gi, gj, gk] == 0:
                        touched[gi, gj, gk] = 1
                        drive_vel_sum[gi, gj, gk, 0] += velocity[0]
                        drive_vel_sum[gi, gj, gk, 1] += velocity[1]
                        drive_vel_sum[gi, gj, gk, 2] += velocity[2]
                        drive_count[gi, gj, gk] += 1


# ---------------------------------------------------------------------------
# Density sampling (rest-volume estimation)
# ---------------------------------------------------------------------------

@njit(**KERNEL_OPTS)
def sample_density_kernel(grid_mass, pos, origin, dx, degree, rho_out):
    n = pos.shape[0]
    nodes = grid_mass.shape[0]
    sup = degree + 1
    cell_vol = dx * dx * dx
    w = np.empty((4, 3))
    base = np.empty(3, dtype=np.int64)
    for p in range(n):
        for a in range(3):
            u = (pos[p, a] - origin) / dx
            wa = np.empty(4)
            dwa = np.empty(4)
            b = _weights_1d(u, degree, wa, dwa)
            base[a] = b
            for i in range(sup):
                w[i, a] = wa[i]
        rho = 0.0
        for i in range(sup):
            for j in range(sup):
                for k in range(sup):
                    gi = base[0] + i; gj = base[1] + j; gk = base[2] + k
                    if 0 <= gi < nodes and 0 <= gj < nodes and 0 <= gk < nodes:
                        rho += w[i, 0] * w[j, 1] * w[k, 2] * grid_mass[gi, gj, gk]
        rho_out[p] = rho / cell_vol


# ---------------------------------------------------------------------------
# Splat compositing
# ---------------------------------------------------------------------------

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.999
T_MIN = 1.0e-4


@njit(**KERNEL_OPTS)
def composite_block(ids, means, inv_a, inv_b, inv_c, opac, colors, depths,
                    x0, y0, w, h, out_rgb, out_alpha, out_depth):
    """Front-to-back alpha compositing of the listed splats over a pixel
    block with origin (x0, y0). ids must already be in depth order.

    The same routine serves the naive full-image path and the tiled path so
    both produce bit-identical results by construction.
    """
    for iy in range(h):
        py = y0 + iy + 0.5
        for ix in range(w):
            px = x0 + ix + 0.5
            T = 1.0
            r = 0.0; g = 0.0; b = 0.0
            dep = 0.0
            hit = False
            for s in ids:
                dx = px - means[s, 0]
                dy = py - means[s, 1]
                q = inv_a[s] * dx * dx + 2.0 * inv_b[s] * dx * dy + inv_c[s] * dy * dy
                alpha = opac[s] * math.exp(-0.5 * q)
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                if alpha < ALPHA_MIN:
                    continue
                r += T * alpha * colors[s, 0]
                g += T * alpha * colors[s, 1]
                b += T * alpha * colors[s, 2]
                if not hit:
                    dep = depths[s]
                    hit = True
                T *= 1.0 - alpha
                if T < T_MIN:
                    break
            out_rgb[y0 + iy, x0 + ix, 0] = r
            out_rgb[y0 + iy, x0 + ix, 1] = g
            out_rgb[y0 + iy, x0 + ix, 2] = b
            out_alpha[y0 + iy, x0 + ix] = 1.0 - T
            out_depth[y0 + iy, x0 + ix] = dep


def warm_up():
    """Compile every kernel on tiny inputs (populates the on-disk cache)."""
    cfgN = 9
    pos = np.zeros((1, 3)) + 0.0
    vel = np.zeros((1, 3))
    mass = np.ones(1)
    vol0 = np.ones(1)
    F = np.eye(3)[None].copy()
    C = np.zeros((1, 3, 3))
    R = np.eye(3)[None].copy()
    mu = np.ones(1)
    lam = np.ones(1)
    eta = np.zeros(1)
    gm = np.zeros((cfgN, cfgN, cfgN))
    gmom = np.zeros((cfgN, cfgN, cfgN, 3))
    gf = np.zeros((cfgN, cfgN, cfgN, 3))
    gv = np.zeros((cfgN, cfgN, cfgN, 3))
    flags = np.zeros((cfgN, cfgN, cfgN), dtype=np.uint8)
    dvs = np.zeros((cfgN, cfgN, cfgN, 3))
    dc = np.zeros((cfgN, cfgN, cfgN), dtype=np.int32)
    status = np.zeros(2, dtype=np.int64)
    origin, dx = -1.0, 0.25
    p2g_kernel(pos, vel, mass, vol0, F, F.copy(), C, R, mu, lam, eta,
               gm, gmom, gf, origin, dx, 2, status)
    grid_update_kernel(gm, gmom, gf, gv, flags, dvs, dc, 1e-4, 1e-12,
                       np.zeros(6, dtype=np.int64), 2,
                       0, 0, 0, cfgN, cfgN, cfgN, False)
    g2p_kernel(gv, pos, vel, C, origin, dx, 2, status)
    quat = np.zeros((1, 4)); quat[:, 0] = 1.0
    deformation_update_kernel(F, F.copy(), C, R, quat, np.zeros(1),
                              1e-4, 0.5, True, status)
    drive_nodes_kernel(pos, np.zeros(1, dtype=np.int64), np.zeros(3),
                       dvs, dc, origin, dx, 2, cfgN)
    sample_density_kernel(gm, pos, origin, dx, 2, np.zeros(1))
    polar_batch(F, R)
    stress_batch(F, R, F.copy(), C, mu, lam, eta, np.zeros((1, 3, 3)))
    composite_block(np.zeros(1, dtype=np.int64), np.zeros((1, 2)),
                    np.ones(1), np.zeros(1), np.ones(1), np.ones(1) * 0.5,
                    np.zeros((1, 3)), np.ones(1),
                    0, 0, 2, 2, np.zeros((2, 2, 3)), np.zeros((2, 2)),
                    np.zeros((2, 2)))
    wout = np.empty((3, 3)); dwout = np.empty((3, 3))
    bspline_weights_kernel(np.zeros(3), origin, dx, 2, cfgN, wout, dwout,
                           np.zeros(3, dtype=np.int64))
