"""Inner loops of the registration and exponential map.

Every kernel exists twice, a numba loop (``*_nb``) and a vectorised numpy
version (``*_np``). Both evaluate the same arithmetic in the same order, so
results agree to the last bit on ordinary inputs. The public names at the
bottom are bound to one or the other according to :data:`USE_NUMBA`.

Arrays are ``(nx, ny, nz)`` float64, C-contiguous, indexed ``[x, y, z]``.
Sample coordinates are in voxels and are clamped to ``[0, n-1]`` per axis.
"""

import numpy as np
from scipy import ndimage

from ._accel import USE_NUMBA, njit


def _axis_setup_np(c, n):
    c = np.clip(c, 0.0, n - 1.0)
    i0 = np.minimum(np.floor(c).astype(np.intp), n - 2)
    t = c - i0
    return i0, t


def _weights_np(img_shape, cx, cy, cz):
    nx, ny, nz = img_shape
    i0, tx = _axis_setup_np(cx, nx)
    j0, ty = _axis_setup_np(cy, ny)
    k0, tz = _axis_setup_np(cz, nz)
    base = (i0 * ny + j0) * nz + k0
    return base, tx, ty, tz


def _interp_flat_np(flat, base, tx, ty, tz, sy, sx):
    ux = 1.0 - tx
    uy = 1.0 - ty
    uz = 1.0 - tz
    c00 = flat[base] * ux + flat[base + sx] * tx
    c10 = flat[base + sy] * ux + flat[base + sy + sx] * tx
    c01 = flat[base + 1] * ux + flat[base + sx + 1] * tx
    c11 = flat[base + sy + 1] * ux + flat[base + sy + sx + 1] * tx
    c0 = c00 * uy + c10 * ty
    c1 = c01 * uy + c11 * ty
    return c0 * uz + c1 * tz


def sample_scalar_np(img, cx, cy, cz):
    """Trilinear samples of ``img`` at coordinate arrays ``cx, cy, cz``."""
    nx, ny, nz = img.shape
    base, tx, ty, tz = _weights_np(img.shape, cx, cy, cz)
    return _interp_flat_np(img.ravel(), base, tx, ty, tz, nz, ny * nz)


def sample_vector_np(field, cx, cy, cz):
    """Trilinear samples of each component of a ``(3, nx, ny, nz)`` field."""
    _, nx, ny, nz = field.shape
    base, tx, ty, tz = _weights_np(field.shape[1:], cx, cy, cz)
    out = np.empty((3,) + np.shape(cx))
    for c in range(3):
        out[c] = _interp_flat_np(field[c].ravel(), base, tx, ty, tz,
                                 nz, ny * nz)
    return out


def box_sum_np(arr, radius):
    """Sum over the ``(2r+1)^3`` window around each voxel, truncated at borders."""
    out = np.asarray(arr, dtype=np.float64)
    for axis in range(3):
        n = out.shape[axis]
        moved = np.moveaxis(out, axis, 0)
        csum = np.zeros((n + 1,) + moved.shape[1:])
        np.cumsum(moved, axis=0, out=csum[1:])
        idx = np.arange(n)
        hi = np.minimum(idx + radius + 1, n)
        lo = np.maximum(idx - radius, 0)
        out = np.moveaxis(csum[hi] - csum[lo], 0, axis)
    return np.ascontiguousarray(out)


@njit
def _axis_setup_nb(c, n):
    if c < 0.0:
        c = 0.0
    elif c > n - 1.0:
        c = n - 1.0
    i = int(np.floor(c))
    if i > n - 2:
        i = n - 2
    return i, c - i


@njit
def _interp_nb(img, i, j, k, tx, ty, tz):
    ux = 1.0 - tx
    uy = 1.0 - ty
    uz = 1.0 - tz
    c00 = img[i, j, k] * ux + img[i + 1, j, k] * tx
    c10 = img[i, j + 1, k] * ux + img[i + 1, j + 1, k] * tx
    c01 = img[i, j, k + 1] * ux + img[i + 1, j, k + 1] * tx
    c11 = img[i, j + 1, k + 1] * ux + img[i + 1, j + 1, k + 1] * tx
    c0 = c00 * uy + c10 * ty
    c1 = c01 * uy + c11 * ty
    return c0 * uz + c1 * tz


@njit
def _sample_scalar_flat_nb(img, cx, cy, cz, out):
    nx, ny, nz = img.shape
    for p in range(cx.size):
        i, tx = _axis_setup_nb(cx[p], nx)
        j, ty = _axis_setup_nb(cy[p], ny)
        k, tz = _axis_setup_nb(cz[p], nz)
        out[p] = _interp_nb(img, i, j, k, tx, ty, tz)


@njit
def _sample_vector_flat_nb(field, cx, cy, cz, out):
    nx, ny, nz = field.shape[1], field.shape[2], field.shape[3]
    for p in range(cx.size):
        i, tx = _axis_setup_nb(cx[p], nx)
        j, ty = _axis_setup_nb(cy[p], ny)
        k, tz = _axis_setup_nb(cz[p], nz)
        for c in range(3):
            out[c, p] = _interp_nb(field[c], i, j, k, tx, ty, tz)


def _flat(a):
    return np.ascontiguousarray(a, dtype=np.float64).ravel()


def sample_scalar_nb(img, cx, cy, cz):
    shape = np.shape(cx)
    out = np.empty(int(np.prod(shape)))
    _sample_scalar_flat_nb(np.ascontiguousarray(img, dtype=np.float64),
                           _flat(cx), _flat(cy), _flat(cz), out)
    return out.reshape(shape)


def sample_vector_nb(field, cx, cy, cz):
    shape = np.shape(cx)
    out = np.empty((3, int(np.prod(shape))))
    _sample_vector_flat_nb(np.ascontiguousarray(field, dtype=np.float64),
                           _flat(cx), _flat(cy), _flat(cz), out)
    return out.reshape((3,) + shape)


@njit
def _box_x_nb(src, radius, out):
    nx, ny, nz = src.shape
    csum = np.zeros((nx + 1, ny, nz))
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                csum[i + 1, j, k] = csum[i, j, k] + src[i, j, k]
    for i in range(nx):
        hi = min(i + radius + 1, nx)
        lo = max(i - radius, 0)
        for j in range(ny):
            for k in range(nz):
                out[i, j, k] = csum[hi, j, k] - csum[lo, j, k]


@njit
def _box_y_nb(src, radius, out):
    nx, ny, nz = src.shape
    csum = np.zeros((ny + 1, nz))
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                csum[j + 1, k] = csum[j, k] + src[i, j, k]
        for j in range(ny):
            hi = min(j + radius + 1, ny)
            lo = max(j - radius, 0)
            for k in range(nz):
                out[i, j, k] = csum[hi, k] - csum[lo, k]


@njit
def _box_z_nb(src, radius, out):
    nx, ny, nz = src.shape
    csum = np.zeros(nz + 1)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                csum[k + 1] = csum[k] + src[i, j, k]
            for k in range(nz):
                out[i, j, k] = csum[min(k + radius + 1, nz)] - csum[max(k - radius, 0)]


def box_sum_nb(arr, radius):
    src = np.ascontiguousarray(arr, dtype=np.float64)
    tmp = np.empty_like(src)
    out = np.empty_like(src)
    _box_x_nb(src, radius, tmp)
    _box_y_nb(tmp, radius, out)
    _box_z_nb(out, radius, tmp)
    return tmp


def compose_disp_np(u_a, u_b):
    """``u_b + u_a(p + u_b(p))`` for ``(3, nx, ny, nz)`` displacement arrays."""
    nx, ny, nz = u_b.shape[1:]
    gx, gy, gz = np.meshgrid(np.arange(nx, dtype=np.float64),
                             np.arange(ny, dtype=np.float64),
                             np.arange(nz, dtype=np.float64), indexing="ij")
    return u_b + sample_vector_np(u_a, gx + u_b[0], gy + u_b[1], gz + u_b[2])


@njit
def _compose_disp_nb(u_a, u_b, out):
    _, nx, ny, nz = u_b.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                bx = u_b[0, i, j, k]
                by = u_b[1, i, j, k]
                bz = u_b[2, i, j, k]
                ii, tx = _axis_setup_nb(i + bx, nx)
                jj, ty = _axis_setup_nb(j + by, ny)
                kk, tz = _axis_setup_nb(k + bz, nz)
                out[0, i, j, k] = bx + _interp_nb(u_a[0], ii, jj, kk, tx, ty, tz)
                out[1, i, j, k] = by + _interp_nb(u_a[1], ii, jj, kk, tx, ty, tz)
                out[2, i, j, k] = bz + _interp_nb(u_a[2], ii, jj, kk, tx, ty, tz)


def compose_disp_nb(u_a, u_b):
    u_a = np.ascontiguousarray(u_a, dtype=np.float64)
    u_b = np.ascontiguousarray(u_b, dtype=np.float64)
    out = np.empty_like(u_b)
    _compose_disp_nb(u_a, u_b, out)
    return out


def lncc_terms_np(n, sI, sJ, sII, sJJ, sIJ, eps, mask):
    """Per-voxel squared correlation and gradient coefficients from window sums.

    Returns ``(cc_sum, count, A, B, C)``: the sum of squared correlations over
    voxels where both local variances reach ``eps``, the number of voxels where
    at least one does (restricted to ``mask``), and the coefficients with
    ``d cc_q / d J_p = A_q I_p - B_q J_p - C_q`` for ``p`` in window ``q``.
    """
    vI = sII - sI * sI / n
    vJ = sJJ - sJ * sJ / n
    cross = sIJ - sI * sJ / n
    okI = vI / n >= eps
    okJ = vJ / n >= eps
    counted = (okI | okJ) & mask
    both = okI & okJ & mask
    safe = np.where(both, vI * vJ, 1.0)
    cc = np.where(both, np.minimum(cross * cross / safe, 1.0), 0.0)
    A = np.where(both, 2.0 * cross / safe, 0.0)
    B = np.where(both, A * cross / np.where(both, vJ, 1.0), 0.0)
    C = A * (sI / n) - B * (sJ / n)
    return float(cc.sum()), int(counted.sum()), A, B, C


@njit
def _lncc_terms_nb(n, sI, sJ, sII, sJJ, sIJ, eps, mask, A, B, C):
    cc_sum = 0.0
    count = 0
    for p in range(n.size):
        if not mask[p]:
            A[p] = 0.0
            B[p] = 0.0
            C[p] = 0.0
            continue
        vI = sII[p] - sI[p] * sI[p] / n[p]
        vJ = sJJ[p] - sJ[p] * sJ[p] / n[p]
        okI = vI / n[p] >= eps
        okJ = vJ / n[p] >= eps
        if okI or okJ:
            count += 1
        if okI and okJ:
            cross = sIJ[p] - sI[p] * sJ[p] / n[p]
            safe = vI * vJ
            cc_sum += min(cross * cross / safe, 1.0)
            a = 2.0 * cross / safe
            b = a * cross / vJ
            A[p] = a
            B[p] = b
            C[p] = a * (sI[p] / n[p]) - b * (sJ[p] / n[p])
        else:
            A[p] = 0.0
            B[p] = 0.0
            C[p] = 0.0
    return cc_sum, count


def lncc_terms_nb(n, sI, sJ, sII, sJJ, sIJ, eps, mask):
    shape = n.shape
    A = np.empty(n.size)
    B = np.empty(n.size)
    C = np.empty(n.size)
    flat = [np.ascontiguousarray(a, dtype=np.float64).ravel() for a in (n, sI, sJ, sII, sJJ, sIJ)]
    m = np.ascontiguousarray(np.broadcast_to(mask, shape)).ravel()
    cc_sum, count = _lncc_terms_nb(*flat, eps, m, A, B, C)
    return cc_sum, count, A.reshape(shape), B.reshape(shape), C.reshape(shape)


def deformation_stats_np(u):
    """``(sum |grad u|^2, sum |u|^2, min det(I + grad u))`` of a displacement.

    Derivatives are central differences inside and one-sided at the faces.
    """
    g = [np.gradient(u[c], edge_order=1) for c in range(3)]
    sq = 0.0
    for c in range(3):
        for a in range(3):
            sq += float((g[c][a] * g[c][a]).sum())
    a, b, c = g[0][0] + 1.0, g[0][1], g[0][2]
    d, e, f = g[1][0], g[1][1] + 1.0, g[1][2]
    p, q, r = g[2][0], g[2][1], g[2][2] + 1.0
    det = a * (e * r - f * q) - b * (d * r - f * p) + c * (d * q - e * p)
    return sq, float((u * u).sum()), float(det.min())


@njit
def _diff_nb(arr, i, j, k, axis):
    n = arr.shape[axis]
    pos = i if axis == 0 else (j if axis == 1 else k)
    hi = 1 if pos < n - 1 else 0
    lo = 1 if pos > 0 else 0
    if axis == 0:
        d = arr[i + hi, j, k] - arr[i - lo, j, k]
    elif axis == 1:
        d = arr[i, j + hi, k] - arr[i, j - lo, k]
    else:
        d = arr[i, j, k + hi] - arr[i, j, k - lo]
    if hi + lo == 2:
        d = d / 2.0
    return d


@njit
def _deformation_stats_nb(u):
    _, nx, ny, nz = u.shape
    sq = 0.0
    uu = 0.0
    mn = np.inf
    g = np.empty((3, 3))
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                for c in range(3):
                    uc = u[c]
                    uu += uc[i, j, k] * uc[i, j, k]
                    for a in range(3):
                        d = _diff_nb(uc, i, j, k, a)
                        g[c, a] = d
                        sq += d * d
                a = g[0, 0] + 1.0
                e = g[1, 1] + 1.0
                r = g[2, 2] + 1.0
                det = (a * (e * r - g[1, 2] * g[2, 1])
                       - g[0, 1] * (g[1, 0] * r - g[1, 2] * g[2, 0])
                       + g[0, 2] * (g[1, 0] * g[2, 1] - e * g[2, 0]))
                if det < mn:
                    mn = det
    return sq, uu, mn


def deformation_stats_nb(u):
    return _deformation_stats_nb(np.ascontiguousarray(u, dtype=np.float64))


def laplacian_np(a):
    """Seven-point Laplacian with edge-replicated borders."""
    p = np.pad(a, 1, mode="edge")
    return (p[2:, 1:-1, 1:-1] + p[:-2, 1:-1, 1:-1] + p[1:-1, 2:, 1:-1]
            + p[1:-1, :-2, 1:-1] + p[1:-1, 1:-1, 2:] + p[1:-1, 1:-1, :-2] - 6.0 * a)


@njit
def _laplacian_nb(a, out):
    nx, ny, nz = a.shape
    for i in range(nx):
        im, ip = max(i - 1, 0), min(i + 1, nx - 1)
        for j in range(ny):
            jm, jp = max(j - 1, 0), min(j + 1, ny - 1)
            for k in range(nz):
                km, kp = max(k - 1, 0), min(k + 1, nz - 1)
                out[i, j, k] = (a[ip, j, k] + a[im, j, k] + a[i, jp, k]
                                + a[i, jm, k] + a[i, j, kp] + a[i, j, km]
                                - 6.0 * a[i, j, k])


def laplacian_nb(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    out = np.empty_like(a)
    _laplacian_nb(a, out)
    return out


def gaussian_weights(sigma, truncate=4.0):
    """Normalised 1-D Gaussian taps, the same ones scipy.ndimage uses."""
    radius = int(truncate * float(sigma) + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 / (sigma * sigma) * x * x)
    return w / w.sum()


def gaussian_smooth_np(arr, sigma):
    """Separable Gaussian blur with edge replication."""
    return ndimage.gaussian_filter(np.asarray(arr, dtype=np.float64), sigma,
                                   mode="nearest")


@njit
def _gauss_x_nb(src, w, out):
    nx, ny, nz = src.shape
    r = (w.size - 1) // 2
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                out[i, j, k] = 0.0
        for t in range(w.size):
            ii = min(max(i + t - r, 0), nx - 1)
            wt = w[t]
            for j in range(ny):
                for k in range(nz):
                    out[i, j, k] += wt * src[ii, j, k]


@njit
def _gauss_y_nb(src, w, out):
    nx, ny, nz = src.shape
    r = (w.size - 1) // 2
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                out[i, j, k] = 0.0
            for t in range(w.size):
                jj = min(max(j + t - r, 0), ny - 1)
                wt = w[t]
                for k in range(nz):
                    out[i, j, k] += wt * src[i, jj, k]


@njit
def _gauss_z_nb(src, w, out):
    nx, ny, nz = src.shape
    r = (w.size - 1) // 2
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                acc = 0.0
                for t in range(w.size):
                    kk = min(max(k + t - r, 0), nz - 1)
                    acc += w[t] * src[i, j, kk]
                out[i, j, k] = acc


def gaussian_smooth_nb(arr, sigma):
    src = np.ascontiguousarray(arr, dtype=np.float64)
    w = gaussian_weights(sigma)
    tmp = np.empty_like(src)
    out = np.empty_like(src)
    _gauss_x_nb(src, w, tmp)
    _gauss_y_nb(tmp, w, out)
    _gauss_z_nb(out, w, tmp)
    return tmp

if USE_NUMBA:
    sample_scalar = sample_scalar_nb
    sample_vector = sample_vector_nb
    box_sum = box_sum_nb
    compose_disp = compose_disp_nb
    lncc_terms = lncc_terms_nb
    deformation_stats = deformation_stats_nb
    laplacian = laplacian_nb
    gaussian_smooth = gaussian_smooth_nb
else:
    sample_scalar = sample_scalar_np
    sample_vector = sample_vector_np
    box_sum = box_sum_np
    compose_disp = compose_disp_np
    lncc_terms = lncc_terms_np
    deformation_stats = deformation_stats_np
    laplacian = laplacian_np
    gaussian_smooth = gaussian_smooth_np
