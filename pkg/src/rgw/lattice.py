"""Torus geometry, block partitions, rectilinear paths and field scaling.

Sites of a periodic cubic lattice with ``side`` points per axis are stored as
flat indices ``i = (x0 * side + x1) * side + x2``.  A lattice carries a spacing
``L**(-spacing_exp)``; the unit lattice has ``spacing_exp = 0``.

Bond fields are arrays of shape ``(3, nsites)`` holding the forward values
``A_mu(x) = A(x, x + e_mu)``.  The reverse orientation is recovered by
antisymmetry, ``A(x + e_mu, x) = -A_mu(x)``.

Blocks of odd side ``b`` are centred on the sublattice ``b * c``:
``B(c) = {x : |x - b c| <= (b - 1) / 2}`` componentwise, with wraparound.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np


class LatticeError(ValueError):
    pass


@dataclass(frozen=True)
class Scales:
    """Random-walk, polymer and region scales (all odd multiples of ``L``)."""

    M0: int
    M1: int
    R0: int


def _wrap(d, n):
    # signed displacement in [-n//2, n - n//2)
    return (np.asarray(d) + n // 2) % n - n // 2


class TorusLattice:
    """Periodic cubic lattice with ``side`` sites per axis and spacing ``L**-k``."""

    def __init__(self, side, L=3, spacing_exp=0, scales=None):
        side, L = int(side), int(L)
        if side <= 0:
            raise LatticeError("side must be positive")
        if L < 1 or L % 2 == 0:
            raise LatticeError(f"block side L={L} must be odd")
        self.side = side
        self.L = L
        self.spacing_exp = int(spacing_exp)
        self.scales = scales
        if scales is not None:
            problems = validate_scales(side, L, scales)
            if problems:
                raise LatticeError("; ".join(problems))

    def __repr__(self):
        return f"TorusLattice(side={self.side}, L={self.L}, spacing_exp={self.spacing_exp})"

    def __eq__(self, other):
        return (isinstance(other, TorusLattice) and self.side == other.side
                and self.L == other.L and self.spacing_exp == other.spacing_exp)

    def __hash__(self):
        return hash((self.side, self.L, self.spacing_exp))

    # geometry ----------------------------------------------------------
    @property
    def nsites(self):
        return self.side ** 3

    @property
    def spacing(self):
        return float(self.L) ** (-self.spacing_exp)

    @property
    def period(self):
        return self.side * self.spacing

    @property
    def volume_weight(self):
        """Weight ``spacing**3`` of each site in the lattice inner product."""
        return self.spacing ** 3

    @cached_property
    def coords(self):
        n = self.side
        c = np.indices((n, n, n)).reshape(3, -1).T
        c.setflags(write=False)
        return c

    def index(self, x):
        x = np.asarray(x) % self.side
        return (x[..., 0] * self.side + x[..., 1]) * self.side + x[..., 2]

    def coord(self, i):
        return self.coords[i]

    @cached_property
    def _neighbours(self):
        fwd = np.empty((3, self.nsites), dtype=np.int64)
        bwd = np.empty((3, self.nsites), dtype=np.int64)
        wrap = np.empty((3, self.nsites), dtype=bool)
        c = self.coords
        for mu in range(3):
            e = np.zeros(3, dtype=np.int64)
            e[mu] = 1
            fwd[mu] = self.index(c + e)
            bwd[mu] = self.index(c - e)
            wrap[mu] = c[:, mu] == self.side - 1
        for a in (fwd, bwd, wrap):
            a.setflags(write=False)
        return fwd, bwd, wrap

    def forward(self, mu):
        """Index array of ``x + e_mu``."""
        return self._neighbours[0][mu]

    def backward(self, mu):
        """Index array of ``x - e_mu``."""
        return self._neighbours[1][mu]

    def wraps(self, mu):
        """True where the forward bond ``x -> x + e_mu`` crosses the boundary."""
        return self._neighbours[2][mu]

    def displacement(self, x, y):
        """Signed wrapped displacement ``y - x`` per axis, in lattice units."""
        return _wrap(np.asarray(y) - np.asarray(x), self.side)

    def distance(self, x, y):
        """Sup-metric torus distance between coordinate triples (lattice units)."""
        return np.abs(self.displacement(x, y)).max(axis=-1)

    def distances_from(self, x):
        """Distances from coordinate ``x`` to every site."""
        return self.distance(np.asarray(x)[None, :], self.coords)

    @cached_property
    def distance_matrix(self):
        c = self.coords
        d = np.zeros((self.nsites, self.nsites), dtype=np.int64)
        for mu in range(3):
            d = np.maximum(d, np.abs(_wrap(c[None, :, mu] - c[:, None, mu], self.side)))
        return d

    # blocks ------------------------------------------------------------
    def block_partition(self, b):
        """Return ``(labels, nb)``: block label of every site for blocks of side ``b``."""
        b = int(b)
        if b % 2 == 0:
            raise LatticeError(f"block side {b} must be odd")
        if self.side % b:
            raise LatticeError(f"side {self.side} not divisible by block side {b}")
        nb = self.side // b
        c = ((self.coords + (b - 1) // 2) // b) % nb
        labels = (c[:, 0] * nb + c[:, 1]) * nb + c[:, 2]
        return labels, nb

    @cached_property
    def block_labels(self):
        return self.block_partition(self.L)[0]

    def coarse(self):
        """The block lattice (side ``side/L``, spacing ``L`` times larger)."""
        if self.side % self.L:
            raise LatticeError(f"side {self.side} not divisible by L={self.L}")
        return TorusLattice(self.side // self.L, self.L, self.spacing_exp - 1)

    def block_of(self, y):
        """Sites of the L-block ``B(y)`` for a coarse coordinate triple ``y``."""
        nb = self.side // self.L
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (3,) or np.any(y < 0) or np.any(y >= nb):
            raise LatticeError(f"{tuple(y)} is not a coarse site of a side-{nb} block lattice")
        label = (y[0] * nb + y[1]) * nb + y[2]
        return np.flatnonzero(self.block_labels == label)

    def block_center(self, b, label):
        nb = self.side // b
        c = np.array(np.unravel_index(label, (nb, nb, nb)))
        return c * b

    def sublattice(self, b):
        """Coordinates of the centres ``b * c`` of the side-``b`` blocks."""
        nb = self.side // b
        return np.indices((nb, nb, nb)).reshape(3, -1).T * b

    def to_spacing(self, spacing_exp):
        return TorusLattice(self.side, self.L, spacing_exp, self.scales)


def validate_scales(side, L, scales):
    """List violated divisibility/ordering constraints for the scale record."""
    problems = []
    for name in ("M0", "M1", "R0"):
        v = getattr(scales, name)
        if v <= 0 or v % 2 == 0:
            problems.append(f"{name}={v} must be a positive odd integer")
        elif v % L:
            problems.append(f"{name}={v} must be a multiple of L={L}")
        if v > 0 and side % v:
            problems.append(f"side {side} not divisible by {name}={v}")
    if not L <= scales.M0 <= scales.M1 <= scales.R0:
        problems.append(f"need L <= M0 <= M1 <= R0, got {L}, {scales.M0}, {scales.M1}, {scales.R0}")
    return problems


# paths ---------------------------------------------------------------
def rectilinear_steps(lattice, x, y):
    """Oriented steps ``(site, mu, sign)`` of the path from ``x`` to ``y``.

    Coordinate 0 changes first, then 1, then 2, each along the shortest
    wrapped displacement.
    """
    x = np.asarray(x, dtype=np.int64) % lattice.side
    d = lattice.displacement(x, y)
    steps = []
    p = x.copy()
    for mu in range(3):
        s = 1 if d[mu] > 0 else -1
        for _ in range(abs(int(d[mu]))):
            steps.append((int(lattice.index(p)), mu, s))
            p[mu] = (p[mu] + s) % lattice.side
    return steps


def rectilinear_path(lattice, x, y):
    """Bond list of the path ``Gamma_yx`` from ``x`` to ``y`` as coordinate pairs."""
    out = []
    for site, mu, s in rectilinear_steps(lattice, x, y):
        a = lattice.coord(site)
        b = a.copy()
        b[mu] = (b[mu] + s) % lattice.side
        out.append((tuple(int(v) for v in a), tuple(int(v) for v in b)))
    return out


def path_sum(lattice, A, x, y):
    """``A(Gamma_yx) = sum over steps x_i -> x_{i+1} of A(x_{i+1} x_i)``.

    Each bond enters with the orientation opposite to the direction of
    travel, so ``A(Gamma_yx)`` shifts by ``lam(y) - lam(x)`` under
    ``A -> A - d lam``.
    """
    values = A.values if isinstance(A, BondField) else np.asarray(A)
    total = 0.0
    for site, mu, s in rectilinear_steps(lattice, x, y):
        if s > 0:
            total -= values[mu, site]
        else:
            total += values[mu, lattice.backward(mu)[site]]
    return total


def travel_sum(lattice, A, path):
    """Sum of ``A`` over a bond list in the listed orientation."""
    A = A if isinstance(A, BondField) else BondField(lattice, A)
    return float(sum(A.bond(a, b) for a, b in path))


def block_path_sums(lattice, values):
    """``A(Gamma_{y x})`` for every fine site ``x`` and its own block centre ``y``.

    Vectorised over sites; equals :func:`path_sum` from ``x`` to ``L * y``.
    """
    n, L = lattice.side, lattice.L
    c = np.array(lattice.coords)
    centre = (((c + (L - 1) // 2) // L) % (n // L)) * L
    d = _wrap(centre - c, n)
    pos = c.copy()
    total = np.zeros(lattice.nsites, dtype=values.dtype)
    for mu in range(3):
        sign = np.sign(d[:, mu])
        for k in range(int(np.abs(d[:, mu]).max(initial=0))):
            active = np.abs(d[:, mu]) > k
            idx = lattice.index(pos)
            back = lattice.backward(mu)[idx]
            step = np.where(sign > 0, -values[mu, idx], values[mu, back])
            total += np.where(active, step, 0.0)
            pos[:, mu] = np.where(active, (pos[:, mu] + sign) % n, pos[:, mu])
    return total


def block_path_incidence(lattice):
    """Sparse ``(nsites, 3 * nsites)`` matrix with ``inc @ A.ravel() = block_path_sums(A)``.

    Column ``mu * nsites + x`` belongs to the bond ``(x, x + e_mu)``; entries
    are the +-1 orientations with which the bond enters each block path.
    """
    import scipy.sparse as sp

    n, L, N = lattice.side, lattice.L, lattice.nsites
    c = np.array(lattice.coords)
    centre = (((c + (L - 1) // 2) // L) % (n // L)) * L
    d = _wrap(centre - c, n)
    pos = c.copy()
    rows, cols, vals = [], [], []
    sites = np.arange(N)
    for mu in range(3):
        sign = np.sign(d[:, mu])
        for k in range(int(np.abs(d[:, mu]).max(initial=0))):
            active = np.abs(d[:, mu]) > k
            idx = lattice.index(pos)
            back = lattice.backward(mu)[idx]
            bond = np.where(sign > 0, idx, back)
            rows.append(sites[active])
            cols.append(mu * N + bond[active])
            vals.append(np.where(sign > 0, -1.0, 1.0)[active])
            pos[:, mu] = np.where(active, (pos[:, mu] + sign) % n, pos[:, mu])
    if not rows:
        return sp.csr_matrix((N, 3 * N))
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(N, 3 * N))


# fields --------------------------------------------------------------
class BondField:
    """Real antisymmetric function on oriented bonds, stored as ``A_mu(x)``."""

    def __init__(self, lattice, values=None):
        self.lattice = lattice
        if values is None:
            values = np.zeros((3, lattice.nsites))
        values = np.asarray(values, dtype=float)
        if values.shape != (3, lattice.nsites):
            raise LatticeError(f"bond values need shape (3, {lattice.nsites}), got {values.shape}")
        self.values = values

    @classmethod
    def random(cls, lattice, rng, scale=1.0):
        return cls(lattice, scale * rng.standard_normal((3, lattice.nsites)))

    def component(self, mu):
        return self.values[mu]

    def bond(self, x, xp):
        """``A(x, x')`` for nearest neighbours given as coordinate triples."""
        lat = self.lattice
        d = lat.displacement(x, xp)
        if np.abs(d).sum() != 1:
            raise LatticeError(f"{tuple(x)} and {tuple(xp)} are not nearest neighbours")
        mu = int(np.flatnonzero(d)[0])
        if d[mu] > 0:
            return self.values[mu, lat.index(x)]
        return -self.values[mu, lat.index(xp)]

    def __neg__(self):
        return BondField(self.lattice, -self.values)

    def __add__(self, other):
        return BondField(self.lattice, self.values + other.values)

    def __sub__(self, other):
        return BondField(self.lattice, self.values - other.values)

    def __mul__(self, c):
        return BondField(self.lattice, c * self.values)

    __rmul__ = __mul__

    def derivative(self, nu):
        """Forward difference ``(A_mu(x + e_nu) - A_mu(x)) / spacing`` for all mu."""
        lat = self.lattice
        return (self.values[:, lat.forward(nu)] - self.values) / lat.spacing

    def to_json(self):
        c = self.lattice.coords
        bonds = [[[int(v) for v in c[i]], mu, float(self.values[mu, i])]
                 for mu in range(3) for i in range(self.lattice.nsites)]
        return json.dumps({"side": self.lattice.side, "spacing_exp": self.lattice.spacing_exp,
                           "L": self.lattice.L, "bonds": bonds})

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        lat = TorusLattice(doc["side"], doc.get("L", 3), doc["spacing_exp"])
        values = np.zeros((3, lat.nsites))
        for x, mu, v in doc["bonds"]:
            values[mu, lat.index(np.asarray(x))] = v
        return cls(lat, values)


def gradient(lattice, lam):
    """The pure-gauge bond field ``(d lam)(x, x + e_mu) = (lam(x+e_mu) - lam(x)) / spacing``."""
    lam = np.asarray(lam, dtype=float)
    vals = np.stack([(lam[lattice.forward(mu)] - lam) / lattice.spacing for mu in range(3)])
    return BondField(lattice, vals)


BOSON_EXPONENT = -0.5
FERMION_EXPONENT = -1.0


def scale_field(lattice, values, direction, kind):
    """Rescale a field between lattices whose spacings differ by ``L``.

    ``up`` maps spacing ``L**-k`` to ``L**-(k-1)`` and multiplies values by
    ``L**(-1/2)`` for bosons, ``L**(-1)`` for fermions; ``down`` inverts it.
    The site index set is unchanged.  Returns ``(new_lattice, new_values)``.
    """
    if kind not in ("boson", "fermion"):
        raise LatticeError(f"unknown field kind {kind!r}")
    power = BOSON_EXPONENT if kind == "boson" else FERMION_EXPONENT
    if direction == "up":
        factor, k = float(lattice.L) ** power, lattice.spacing_exp - 1
    elif direction == "down":
        factor, k = float(lattice.L) ** (-power), lattice.spacing_exp + 1
    else:
        raise LatticeError(f"direction must be 'up' or 'down', got {direction!r}")
    values = np.asarray(values)
    n = lattice.nsites
    if values.shape[-1] not in (n, 4 * n) and values.shape[0] != n:
        raise LatticeError("field does not live on the given lattice")
    return lattice.to_spacing(k), factor * values


# regions -------------------------------------------------------------
class RegionMask:
    """A union of side-``b`` blocks, with corridor shrinking.

    ``shrink(1)`` removes every block touching the complement (faces, edges or
    corners), leaving one corridor of blocks between the result and the
    complement.
    """

    def __init__(self, lattice, block_side, blocks):
        self.lattice = lattice
        self.block_side = int(block_side)
        labels, nb = lattice.block_partition(self.block_side)
        self._labels = labels
        self.nb = nb
        mask = np.zeros(nb ** 3, dtype=bool)
        blocks = np.asarray(blocks)
        if blocks.dtype == bool:
            if blocks.shape != mask.shape:
                raise LatticeError("block mask has the wrong length")
            mask[:] = blocks
        else:
            mask[blocks.astype(np.int64)] = True
        self.block_mask = mask

    @classmethod
    def full(cls, lattice, block_side):
        nb = lattice.side // block_side
        return cls(lattice, block_side, np.ones(nb ** 3, dtype=bool))

    @classmethod
    def empty(cls, lattice, block_side):
        nb = lattice.side // block_side
        return cls(lattice, block_side, np.zeros(nb ** 3, dtype=bool))

    @property
    def blocks(self):
        return np.flatnonzero(self.block_mask)

    @property
    def sites(self):
        """Boolean site mask."""
        return self.block_mask[self._labels]

    def complement(self):
        return RegionMask(self.lattice, self.block_side, ~self.block_mask)

    def _block_neighbours(self):
        nb = self.nb
        c = np.indices((nb, nb, nb)).reshape(3, -1).T
        out = []
        for d in np.ndindex(3, 3, 3):
            dd = np.array(d) - 1
            nc = (c + dd) % nb
            out.append((nc[:, 0] * nb + nc[:, 1]) * nb + nc[:, 2])
        return np.stack(out)

    def shrink(self, level=1):
        mask = self.block_mask.copy()
        nbrs = self._block_neighbours()
        for _ in range(level):
            mask = mask & np.all(mask[nbrs], axis=0)
        return RegionMask(self.lattice, self.block_side, mask)

    def __le__(self, other):
        return bool(np.all(~self.block_mask | other.block_mask))
