"""Low-level trilinear kernels shared by volume and field operations.

Everything here works on raw float64 arrays. Grids are shaped (nx, ny, nz)
and indexed [x, y, z]. Sampling uses clamp-to-edge: coordinates are clipped
to [0, n-1] per axis before the cell lookup, and the derivative with respect
to a clamped-away coordinate is zero.
"""
from __future__ import annotations

import numpy as np

# Corner order: (a, b, d) -> 4a + 2b + d, where a/b/d pick the +1 corner
# along x/y/z.
_CORNERS = [(a, b, d) for a in (0, 1) for b in (0, 1) for d in (0, 1)]


def identity_grid(dims):
    """Voxel-index coordinates as a (3, nx, ny, nz) float64 array."""
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"))


class CellCache:
    """Cell indices, weights and clamp masks for a batch of sample points.

    Precomputing these once lets several grids be interpolated (or adjoint-
    scattered) at the same points without redoing the index arithmetic,
    which is the hot path of the registration loop.
    """

    def __init__(self, points, dims):
        pts = np.asarray(points, dtype=np.float64).reshape(3, -1)
        self.dims = tuple(int(n) for n in dims)
        self.npoints = pts.shape[1]
        self.size = self.dims[0] * self.dims[1] * self.dims[2]

        i0 = []
        g = []
        self.inb = []
        for a in range(3):
            na = self.dims[a]
            pa = pts[a]
            qa = np.clip(pa, 0.0, na - 1.0)
            ia = np.minimum(qa.astype(np.int64), na - 2)
            fa = qa - ia
            i0.append(ia)
            g.append((1.0 - fa, fa))
            # derivative of the clamp: zero strictly outside the grid
            self.inb.append(((pa >= 0.0) & (pa <= na - 1.0)).astype(np.float64))

        sx = self.dims[1] * self.dims[2]
        sy = self.dims[2]
        base = i0[0] * sx + i0[1] * sy + i0[2]
        self.idx = np.empty((8, self.npoints), dtype=np.int64)
        self.w = np.empty((8, self.npoints), dtype=np.float64)
        gx, gy, gz = g
        for c, (a, b, d) in enumerate(_CORNERS):
            self.idx[c] = base + a * sx + b * sy + d
            self.w[c] = gx[a] * gy[b] * gz[d]
        self._g = g

    @property
    def idx_flat(self):
        flat = getattr(self, "_idx_flat", None)
        if flat is None:
            flat = self.idx.ravel()
            self._idx_flat = flat
        return flat

    def gather_corners(self, grid):
        """Corner values of `grid` for every point, shaped (8, M)."""
        return grid.reshape(-1)[self.idx]

    def value_from_corners(self, corners):
        return np.einsum("cm,cm->m", self.w, corners)

    def interpolate(self, grid):
        return self.value_from_corners(self.gather_corners(grid))

    def combine_corners(self, corners_stack, coef):
        """Per-point linear combination sum_i coef[i] * corners_stack[i].

        corners_stack is (K, 8, M), coef is (K, M); returns (8, M). Because
        both interpolation and its derivative are linear in corner values,
        this collapses K gradient evaluations into one.
        """
        return np.einsum("icm,im->cm", corners_stack, coef)

    def grad_from_corners(self, corners):
        """d(interpolant)/d(point) per axis, shaped (3, M).

        Exact derivative of the trilinear interpolant (piecewise constant
        per cell along each axis); zeroed where the point was clamped.
        """
        gx, gy, gz = self._g
        c = corners
        out = np.empty((3, self.npoints))
        out[0] = (gy[0] * gz[0] * (c[4] - c[0]) + gy[0] * gz[1] * (c[5] - c[1])
                  + gy[1] * gz[0] * (c[6] - c[2]) + gy[1] * gz[1] * (c[7] - c[3]))
        out[1] = (gx[0] * gz[0] * (c[2] - c[0]) + gx[0] * gz[1] * (c[3] - c[1])
                  + gx[1] * gz[0] * (c[6] - c[4]) + gx[1] * gz[1] * (c[7] - c[5]))
        out[2] = (gx[0] * gy[0] * (c[1] - c[0]) + gx[0] * gy[1] * (c[3] - c[2])
                  + gx[1] * gy[0] * (c[5] - c[4]) + gx[1] * gy[1] * (c[7] - c[6]))
        for a in range(3):
            out[a] *= self.inb[a]
        return out

    def interpolate_with_grad(self, grid):
        corners = self.gather_corners(grid)
        return self.value_from_corners(corners), self.grad_from_corners(corners)

    def scatter(self, values):
        """Adjoint of `interpolate`: accumulate weighted values onto the grid.

        One bincount over all corners keeps the summation order fixed so
        results are bit-reproducible.
        """
        return np.bincount(self.idx_flat, weights=(self.w * values).ravel(),
                           minlength=self.size)
