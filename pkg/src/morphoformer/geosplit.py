"""City-internal radial-sector train/val/test partition and a leakage auditor."""

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .dataset import HALF, FormatError

log = logging.getLogger(__name__)

N_SECTORS = 10
SECTOR_DEG = 360.0 / N_SECTORS
SUBSETS = ("train", "val", "test")
TRAIN, VAL, TEST = 0, 1, 2
TARGET = (0.8, 0.1, 0.1)
NONE = -1


class EmptyCityError(ValueError):
    pass


@dataclass
class SectorAssignment:
    core: tuple
    sectors: np.ndarray      # int8 grid, -1 on invalid cells
    subset_of_sector: tuple  # length 10, values in {0, 1, 2}

    def subset_grid(self, centers):
        """int8 grid holding the subset code of every sample centre, -1 elsewhere."""
        grid = np.full(self.sectors.shape, NONE, dtype=np.int8)
        if len(centers):
            sec = self.sectors[centers[:, 0], centers[:, 1]]
            grid[centers[:, 0], centers[:, 1]] = np.asarray(self.subset_of_sector, dtype=np.int8)[sec]
        return grid


def locate_core(table):
    """Footprint-weighted centroid (row, col) of the valid cells."""
    w = np.where(table.valid, table.lambda_p, 0.0)
    total = w.sum()
    if not table.valid.any():
        raise EmptyCityError(f"city {table.city_id} has no valid cells")
    rr, cc = np.indices(table.shape)
    if total <= 0:
        return float(rr[table.valid].mean()), float(cc[table.valid].mean())
    return float((w * rr).sum() / total), float((w * cc).sum() / total)


def sector_index(theta_deg):
    """Sector of an angle in degrees; intervals are [36k, 36(k+1))."""
    t = np.mod(np.asarray(theta_deg, dtype=np.float64), 360.0)
    return np.minimum((t // SECTOR_DEG).astype(np.int64), N_SECTORS - 1)


def cell_angles(shape, core, rotate=0.0):
    rr, cc = np.indices(shape)
    dr = rr - core[0]
    dc = cc - core[1]
    theta = np.degrees(np.arctan2(dr, dc)) - rotate
    at_core = (dr == 0) & (dc == 0)
    return theta, at_core


def assign_sectors(table, core, rotate=0.0):
    """Sector index per valid cell; the returned assignment has no subsets yet."""
    theta, at_core = cell_angles(table.shape, core, rotate)
    sec = sector_index(theta)
    sec[at_core] = 0
    grid = np.where(table.valid, sec, NONE).astype(np.int8)
    return SectorAssignment(tuple(core), grid, (TRAIN,) * N_SECTORS)


def greedy_balance(counts, target=TARGET):
    """Map each sector to a subset so subset sizes approach ``target``.

    Sectors go in descending size to the subset with the largest remaining
    deficit (ties: train, then val, then test). When at least three sectors
    are nonempty, any subset left without a nonempty sector takes the
    smallest nonempty sector of the subset holding the most of them.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if np.any(counts < 0):
        raise ValueError("sector counts must be nonnegative")
    k = len(counts)
    nonempty = int((counts > 0).sum())
    if nonempty < 3:
        log.warning("degenerate city: %d nonempty sectors, assigning everything to train", nonempty)
        return (TRAIN,) * k
    total = counts.sum()
    goal = np.asarray(target, dtype=np.float64) * total
    have = np.zeros(3)
    out = [TRAIN] * k
    for s in sorted(range(k), key=lambda i: (-counts[i], i)):
        if counts[s] == 0:
            continue
        deficit = goal - have
        best = int(np.argmax(deficit))  # argmax returns the first maximum
        out[s] = best
        have[best] += counts[s]
    for missing in (VAL, TEST):
        members = [s for s in range(k) if out[s] == missing and counts[s] > 0]
        if members:
            continue
        sizes = [sum(1 for s in range(k) if out[s] == sub and counts[s] > 0) for sub in range(3)]
        donor = int(np.argmax(sizes))
        pool = [s for s in range(k) if out[s] == donor and counts[s] > 0]
        smallest = min(pool, key=lambda s: (counts[s], s))
        out[smallest] = missing
    return tuple(out)


def ratio_deviation(counts, assignment, target=TARGET):
    """L1 distance between achieved subset fractions and the target ratio."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    sizes = np.zeros(3)
    for c, a in zip(counts, assignment):
        sizes[a] += c
    return float(np.abs(sizes / total - np.asarray(target)).sum())


def subset_sizes(counts, assignment):
    sizes = [0, 0, 0]
    for c, a in zip(counts, assignment):
        sizes[a] += int(c)
    return tuple(sizes)


@dataclass
class CitySplit:
    city_id: str
    assignment: SectorAssignment
    counts: tuple
    subset_grid: np.ndarray

    @property
    def sizes(self):
        return subset_sizes(self.counts, self.assignment.subset_of_sector)

    @property
    def fractions(self):
        s = np.asarray(self.sizes, dtype=np.float64)
        return tuple((s / max(s.sum(), 1)).tolist())


def geosplit_city(table, rotate=0.0, target=TARGET):
    """Sector, balance and label every sample centre of one city."""
    core = locate_core(table)
    assignment = assign_sectors(table, core, rotate)
    centers = table.sample_centers()
    sec = assignment.sectors[centers[:, 0], centers[:, 1]] if len(centers) else np.zeros(0, dtype=np.int64)
    counts = tuple(int(c) for c in np.bincount(sec, minlength=N_SECTORS))
    assignment.subset_of_sector = greedy_balance(counts, target)
    return CitySplit(table.city_id, assignment, counts, assignment.subset_grid(centers))


def random_split(table, rng, target=TARGET):
    """Cell-wise random split of the sample centres, used as the leaky reference."""
    centers = table.sample_centers()
    grid = np.full(table.shape, NONE, dtype=np.int8)
    codes = rng.choice(3, size=len(centers), p=np.asarray(target) / np.sum(target)).astype(np.int8)
    grid[centers[:, 0], centers[:, 1]] = codes
    return grid


def leakage_audit(subset_grid, window=9, denominator="assigned"):
    """Mean share of a test centre's window cells that are training centres.

    ``denominator="assigned"`` divides by the window cells that are sample
    centres of any subset; ``"window"`` divides by all ``window**2 - 1`` cells.
    """
    radius = window // 2
    tests = np.argwhere(subset_grid == TEST)
    if len(tests) == 0:
        return 0.0
    counts = kernels.window_counts(np.ascontiguousarray(subset_grid, dtype=np.int8),
                                   tests.astype(np.int64), radius, 3)
    train = counts[:, TRAIN].astype(np.float64)
    if denominator == "window":
        denom = np.full(len(tests), float(window * window - 1))
    elif denominator == "assigned":
        denom = counts.sum(axis=1).astype(np.float64)
    else:
        raise ValueError(f"unknown denominator {denominator!r}")
    frac = np.divide(train, denom, out=np.zeros_like(train), where=denom > 0)
    return float(frac.mean())


# ---------------------------------------------------------------- split file

SPLIT_HEADER = ("city_id", "row", "col", "subset")


def export_split(splits, path):
    """Write ``{city_id: subset_grid}`` as the split CSV."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SPLIT_HEADER)
        for city, grid in splits.items():
            for r, c in np.argwhere(grid >= 0):
                w.writerow([city, int(r), int(c), SUBSETS[grid[r, c]]])


def import_split(path, shapes):
    """Read a split CSV into ``{city_id: subset_grid}``; ``shapes`` maps city to grid shape."""
    grids = {city: np.full(shape, NONE, dtype=np.int8) for city, shape in shapes.items()}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != SPLIT_HEADER:
            raise FormatError(f"{path}: expected header {','.join(SPLIT_HEADER)}, got {header}")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != 4 or rec[3] not in SUBSETS:
                raise FormatError(f"{path}:{lineno}: bad split record {rec}")
            if rec[0] not in grids:
                raise FormatError(f"{path}:{lineno}: unknown city {rec[0]!r}")
            grids[rec[0]][int(rec[1]), int(rec[2])] = SUBSETS.index(rec[3])
    return grids


def centers_by_subset(subset_grid):
    """Sample centres of each subset, row-major."""
    return {name: np.argwhere(subset_grid == code) for code, name in enumerate(SUBSETS)}


def margin_ok(shape, row, col):
    return HALF <= row < shape[0] - HALF and HALF <= col < shape[1] - HALF


def global_fractions(splits):
    total = np.zeros(3)
    for s in splits:
        total += np.asarray(s.sizes, dtype=np.float64)
    return tuple((total / max(total.sum(), 1)).tolist())


def angle_of(row, col, core):
    return math.degrees(math.atan2(row - core[0], col - core[1])) % 360.0
