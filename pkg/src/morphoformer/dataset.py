"""Cell labels, plausibility filtering, scene assembly, synthetic cities, file formats.

Grid geometry: one label cell is 100 m and is rendered as a 10x10 block of
10 m pixels. A scene is the 9x9-cell window (90x90 pixels) around a centre
cell, stacked as nine channels::

    0 SAR_VV   1 SAR_VH   2 B2   3 B3   4 B4   5 B8   6 DEM   7 RESERVED   8 MASK
"""

import csv
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, zoom

CELL_AREA = 10_000.0
CELL_PX = 10
WINDOW = 9
HALF = WINDOW // 2
SCENE_PX = WINDOW * CELL_PX
H_FLOOR = 3.0

RASTER_BANDS = ("SAR_VV", "SAR_VH", "B2", "B3", "B4", "B8", "DEM")
SCENE_CHANNELS = RASTER_BANDS + ("RESERVED", "MASK")
N_CHANNELS = len(SCENE_CHANNELS)
MASK_CHANNEL = 8
RESERVED_CHANNEL = 7

CELLS_HEADER = ("city_id", "row", "col", "lambda_p", "h_ave", "valid")
RASTER_MAGIC = b"MRPH-RAS" + b"\0" * 7
RASTER_VERSION = 1


class GeometryError(ValueError):
    pass


class BoundsError(IndexError):
    pass


class FormatError(ValueError):
    pass


class VersionError(FormatError):
    pass


@dataclass(frozen=True)
class Building:
    area: float
    height: float


@dataclass(frozen=True)
class CellLabel:
    city_id: str
    row: int
    col: int
    lambda_p: float
    h_ave: float
    valid: bool


def fishnet_aggregate(buildings):
    """Footprint ratio and area-weighted mean height of one 100 m cell.

    Returns ``(lambda_p, h_ave, valid)``; a cell without buildings is
    ``(0.0, 0.0, False)``.
    """
    areas = np.array([b.area for b in buildings], dtype=np.float64)
    heights = np.array([b.height for b in buildings], dtype=np.float64)
    if np.any(areas < 0):
        raise GeometryError("negative intersection area")
    total = areas.sum()
    if total > CELL_AREA:
        raise GeometryError(f"intersection areas sum to {total} m2, above the {CELL_AREA} m2 cell")
    if len(buildings) == 0 or total == 0:
        return 0.0, 0.0, False
    return float(total / CELL_AREA), float((areas * heights).sum() / total), True


def plausible(lambda_p, h_ave):
    """Vectorised plausibility rule; True means keep."""
    lambda_p = np.asarray(lambda_p)
    h_ave = np.asarray(h_ave)
    bad = (h_ave < 2.0) | (h_ave > 500.0) | (lambda_p <= 0.01) | ((lambda_p < 0.04) & (h_ave >= 20.0))
    return ~bad


def plausibility_filter(label):
    return bool(plausible(label.lambda_p, label.h_ave))


@dataclass
class CellTable:
    city_id: str
    lambda_p: np.ndarray
    h_ave: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.lambda_p = np.asarray(self.lambda_p, dtype=np.float64)
        self.h_ave = np.asarray(self.h_ave, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if not (self.lambda_p.shape == self.h_ave.shape == self.valid.shape) or self.lambda_p.ndim != 2:
            raise ValueError("label arrays must share one 2-D grid shape")

    @property
    def shape(self):
        return self.lambda_p.shape

    def label(self, row, col):
        return CellLabel(self.city_id, row, col, float(self.lambda_p[row, col]),
                         float(self.h_ave[row, col]), bool(self.valid[row, col]))

    def keep_mask(self):
        """Cells that are valid and pass the plausibility rules."""
        return self.valid & plausible(self.lambda_p, self.h_ave)

    def sample_centers(self):
        """(row, col) of every cell usable as a scene centre, row-major order."""
        keep = self.keep_mask()
        rows, cols = self.shape
        keep[:HALF, :] = False
        keep[rows - HALF:, :] = False
        keep[:, :HALF] = False
        keep[:, cols - HALF:] = False
        return np.argwhere(keep)

    def __eq__(self, other):
        return (isinstance(other, CellTable) and self.city_id == other.city_id
                and np.array_equal(self.lambda_p, other.lambda_p)
                and np.array_equal(self.h_ave, other.h_ave)
                and np.array_equal(self.valid, other.valid))


@dataclass
class BandRasters:
    city_id: str
    data: np.ndarray  # (bands, rows * 10, cols * 10) float32
    bands: tuple = RASTER_BANDS

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.bands = tuple(self.bands)
        if self.data.ndim != 3 or self.data.shape[0] != len(self.bands):
            raise ValueError("raster data must be (bands, rows, cols)")

    def __eq__(self, other):
        return (isinstance(other, BandRasters) and self.city_id == other.city_id
                and self.bands == other.bands and np.array_equal(self.data, other.data))


@dataclass
class Scene:
    bands: np.ndarray  # (9, 90, 90)
    label: tuple
    center: tuple


@dataclass
class BandStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# ---------------------------------------------------------------- scenes

def _check_margin(table, row, col):
    rows, cols = table.shape
    if row < HALF or col < HALF or row >= rows - HALF or col >= cols - HALF:
        raise BoundsError(f"centre ({row}, {col}) is closer than {HALF} cells to the edge of a {rows}x{cols} grid")


def _window(rasters, row, col):
    r0 = (row - HALF) * CELL_PX
    c0 = (col - HALF) * CELL_PX
    return rasters.data[:, r0:r0 + SCENE_PX, c0:c0 + SCENE_PX]


def _mask(table, row, col):
    block = table.valid[row - HALF:row + HALF + 1, col - HALF:col + HALF + 1]
    return np.kron(block.astype(np.float64), np.ones((CELL_PX, CELL_PX)))


def assemble_scene(table, rasters, center, stats=None):
    """Cut the 9x9-cell scene around ``center``; optionally z-score the bands."""
    row, col = int(center[0]), int(center[1])
    _check_margin(table, row, col)
    if not plausibility_filter(table.label(row, col)) or not table.valid[row, col]:
        raise ValueError(f"centre ({row}, {col}) fails the plausibility rules")
    x = np.zeros((N_CHANNELS, SCENE_PX, SCENE_PX))
    x[:len(RASTER_BANDS)] = _window(rasters, row, col)
    if stats is not None:
        x[:len(RASTER_BANDS)] = (x[:len(RASTER_BANDS)] - stats.mean[:, None, None]) / stats.std[:, None, None]
    x[MASK_CHANNEL] = _mask(table, row, col)
    return Scene(x, (float(table.lambda_p[row, col]), float(table.h_ave[row, col])),
                 (table.city_id, row, col))


def assemble_batch(table, rasters, centers, stats=None):
    """Scenes for many centres of one city as a (n, 9, 90, 90) array, plus labels (n, 2)."""
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    n = len(centers)
    x = np.zeros((n, N_CHANNELS, SCENE_PX, SCENE_PX))
    nb = len(RASTER_BANDS)
    for i, (row, col) in enumerate(centers):
        _check_margin(table, row, col)
        x[i, :nb] = _window(rasters, row, col)
        x[i, MASK_CHANNEL] = _mask(table, row, col)
    if stats is not None:
        x[:, :nb] -= stats.mean[None, :, None, None]
        x[:, :nb] /= stats.std[None, :, None, None]
    y = np.stack([table.lambda_p[centers[:, 0], centers[:, 1]],
                  table.h_ave[centers[:, 0], centers[:, 1]]], axis=1) if n else np.zeros((0, 2))
    return x, y


def band_stats(cities, centers_by_city):
    """Per-band mean/std over the pixel blocks of the given (training) centre cells."""
    nb = len(RASTER_BANDS)
    s = np.zeros(nb)
    s2 = np.zeros(nb)
    count = 0
    for (table, rasters), centers in zip(cities, centers_by_city):
        if len(centers) == 0:
            continue
        data = rasters.data.astype(np.float64)
        rows, cols = table.shape
        blocks = data.reshape(nb, rows, CELL_PX, cols, CELL_PX)
        sel = blocks[:, centers[:, 0], :, centers[:, 1], :]  # (n, nb, 10, 10)
        s += sel.sum(axis=(0, 2, 3))
        s2 += (sel * sel).sum(axis=(0, 2, 3))
        count += sel.shape[0] * CELL_PX * CELL_PX
    if count == 0:
        raise ValueError("no training cells to compute band statistics from")
    mean = s / count
    std = np.sqrt(np.maximum(s2 / count - mean * mean, 0.0))
    std[std == 0] = 1.0
    return BandStats(mean, std)


# ---------------------------------------------------------------- synthetic cities

@dataclass
class SyntheticCityConfig:
    """Knobs of the radial, FAR-coupled synthetic city.

    Heights follow ``h_floor + coupling * lambda_p + latent_scale * z + noise``
    where ``z`` is a smooth lognormal field that also tints roof reflectance.
    """

    city_id: str = "city00"
    grid_size: int = 120
    core: tuple = None
    lambda_max: float = 0.6
    r0: float = 19.0
    coupling: float = 8.0
    latent_scale: float = 6.0
    latent_skew: float = 0.5
    smoothness: float = 4.0
    extent: float = 0.46
    hole_fraction: float = 0.03
    lambda_noise: float = 0.25
    height_noise: float = 1.5
    sar_noise: float = 1.5
    optical_noise: float = 0.01
    seed: int = 0

    def validate(self):
        if self.grid_size < 2 * HALF + 5:
            raise ValueError(f"grid_size must be >= {2 * HALF + 5}, got {self.grid_size}")
        if not 0 < self.lambda_max <= 1:
            raise ValueError(f"lambda_max must lie in (0, 1], got {self.lambda_max}")
        if self.r0 <= 0 or self.smoothness <= 0:
            raise ValueError("r0 and smoothness must be positive")
        for name in ("lambda_noise", "height_noise", "sar_noise", "optical_noise", "hole_fraction"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self):
        d = dict(self.__dict__)
        d["core"] = list(self.core) if self.core is not None else None
        return d


def _smooth_field(rng, shape, sigma):
    f = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    sd = f.std()
    return (f - f.mean()) / (sd if sd > 0 else 1.0)


def generate_city(cfg):
    """Build one synthetic city: ``(CellTable, BandRasters, latent_z)``.

    ``latent_z`` is returned for analysis (it is not an input band).
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.grid_size
    core = cfg.core if cfg.core is not None else ((n - 1) / 2.0, (n - 1) / 2.0)
    rr, cc = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    r = np.hypot(rr - core[0], cc - core[1])

    # labels
    eps_l = rng.normal(0.0, cfg.lambda_noise, (n, n)) if cfg.lambda_noise > 0 else np.zeros((n, n))
    lam = np.clip(cfg.lambda_max * np.exp(-r / cfg.r0) * (1.0 + eps_l), 0.0, 1.0)
    g = _smooth_field(rng, (n, n), cfg.smoothness)
    # decorrelate the latent field from the radial density inside the city
    inside = r <= cfg.extent * n
    lc = lam[inside] - lam[inside].mean()
    if lc.var() > 0:
        g = g - (np.dot(g[inside] - g[inside].mean(), lc) / np.dot(lc, lc)) * (lam - lam[inside].mean())
        g = (g - g[inside].mean()) / g[inside].std()
    z = np.exp(cfg.latent_skew * g)
    eps_h = rng.normal(0.0, cfg.height_noise, (n, n)) if cfg.height_noise > 0 else np.zeros((n, n))
    h = np.clip(H_FLOOR + cfg.coupling * lam + cfg.latent_scale * z + eps_h, 2.0, 500.0)

    holes = _smooth_field(rng, (n, n), 3.0)
    thresh = np.quantile(holes, 1.0 - cfg.hole_fraction) if cfg.hole_fraction > 0 else np.inf
    valid = (r <= cfg.extent * n) & (holes < thresh) & (lam > 0)
    lam = np.where(valid, lam, 0.0)
    h = np.where(valid, h, 0.0)
    table = CellTable(cfg.city_id, lam, h, valid)

    # rasters
    px = n * CELL_PX
    up = lambda a: np.kron(a, np.ones((CELL_PX, CELL_PX)))  # noqa: E731
    ranks = rng.random((n, n, CELL_PX * CELL_PX)).argsort(axis=2).argsort(axis=2)
    n_roof = np.rint(lam * CELL_PX * CELL_PX)
    roof = (ranks < n_roof[:, :, None]).reshape(n, n, CELL_PX, CELL_PX).transpose(0, 2, 1, 3).reshape(px, px)
    water = up((~valid & (r <= cfg.extent * n)).astype(np.float64)) > 0

    gz = up(g)
    ground = np.array([0.05, 0.08, 0.06, 0.32])
    water_refl = np.array([0.06, 0.05, 0.03, 0.02])
    roof_base = np.array([0.12, 0.13, 0.15, 0.22])
    roof_tint = np.array([0.03, 0.025, 0.02, -0.03])
    optical = np.empty((4, px, px))
    for k in range(4):
        v = np.where(roof, roof_base[k] + roof_tint[k] * gz, ground[k])
        v = np.where(water, water_refl[k], v)
        optical[k] = v + rng.normal(0.0, cfg.optical_noise, (px, px))

    height_cue = lam * np.log1p(h) / np.log1p(30.0)
    speckle = rng.normal(0.0, cfg.sar_noise, (n, n))
    vv = -14.0 + 8.0 * up(height_cue) + up(speckle) + rng.normal(0.0, cfg.sar_noise, (px, px))
    vh = -21.0 + 5.0 * up(height_cue) + 0.7 * up(speckle) + rng.normal(0.0, cfg.sar_noise, (px, px))
    vv = np.where(water, -22.0, vv)
    vh = np.where(water, -28.0, vh)

    terrain = _smooth_field(rng, (n, n), 6.0)
    dem = 80.0 + 25.0 * zoom(terrain, CELL_PX, order=1, mode="nearest", grid_mode=True)

    data = np.stack([vv, vh, optical[0], optical[1], optical[2], optical[3], dem]).astype(np.float32)
    return table, BandRasters(cfg.city_id, data), z


def city_pearson(table):
    keep = table.keep_mask()
    return float(np.corrcoef(table.lambda_p[keep], table.h_ave[keep])[0, 1])


# ---------------------------------------------------------------- file formats

def export_cells(table, path):
    rows, cols = table.shape
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CELLS_HEADER)
        for i in range(rows):
            for j in range(cols):
                w.writerow([table.city_id, i, j, repr(float(table.lambda_p[i, j])),
                            repr(float(table.h_ave[i, j])), int(table.valid[i, j])])


def import_cells(path):
    """Read a cell CSV; returns one CellTable per city_id (dict, insertion ordered)."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != CELLS_HEADER:
            raise FormatError(f"{path}: expected header {','.join(CELLS_HEADER)}, got {header}")
        recs = {}
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(CELLS_HEADER):
                raise FormatError(f"{path}:{lineno}: expected {len(CELLS_HEADER)} fields, got {len(rec)}")
            try:
                recs.setdefault(rec[0], []).append((int(rec[1]), int(rec[2]), float(rec[3]),
                                                    float(rec[4]), int(rec[5])))
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
    tables = {}
    for city, items in recs.items():
        arr = np.array(items, dtype=np.float64)
        rows = int(arr[:, 0].max()) + 1
        cols = int(arr[:, 1].max()) + 1
        if len(items) != rows * cols:
            raise FormatError(f"{path}: city {city} has {len(items)} cells, expected {rows}x{cols}")
        lam = np.zeros((rows, cols))
        h = np.zeros((rows, cols))
        valid = np.zeros((rows, cols), dtype=bool)
        ri = arr[:, 0].astype(int)
        ci = arr[:, 1].astype(int)
        lam[ri, ci] = arr[:, 2]
        h[ri, ci] = arr[:, 3]
        valid[ri, ci] = arr[:, 4] != 0
        tables[city] = CellTable(city, lam, h, valid)
    return tables


def raster_bytes(rasters):
    header = json.dumps({"city_id": rasters.city_id, "bands": list(rasters.bands),
                         "rows": int(rasters.data.shape[1]), "cols": int(rasters.data.shape[2]),
                         "dtype": "f32le"}, sort_keys=True).encode("utf-8")
    payload = rasters.data.astype("<f4").tobytes(order="C")
    return b"".join([RASTER_MAGIC, bytes([RASTER_VERSION]), struct.pack("<I", len(header)), header,
                     payload, struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)])


def export_rasters(rasters, path):
    with open(path, "wb") as f:
        f.write(raster_bytes(rasters))


def parse_rasters(blob):
    if len(blob) < 20 or blob[:15] != RASTER_MAGIC:
        raise FormatError("not a raster file: bad magic")
    if blob[15] != RASTER_VERSION:
        raise VersionError(f"unsupported raster version {blob[15]} (this reader handles {RASTER_VERSION})")
    (hlen,) = struct.unpack_from("<I", blob, 16)
    start = 20 + hlen
    if len(blob) < start:
        raise FormatError(f"truncated header: expected {hlen} header bytes, file has {len(blob) - 20}")
    try:
        header = json.loads(blob[20:start].decode("utf-8"))
        bands = tuple(header["bands"])
        rows, cols = int(header["rows"]), int(header["cols"])
        city = header["city_id"]
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"malformed raster header: {e}") from None
    if header.get("dtype") != "f32le":
        raise FormatError(f"unsupported dtype {header.get('dtype')!r}")
    expected = len(bands) * rows * cols * 4
    actual = len(blob) - start - 4
    if actual != expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, got {max(actual, 0)}")
    payload = blob[start:start + expected]
    (crc,) = struct.unpack_from("<I", blob, start + expected)
    if crc != zlib.crc32(payload) & 0xFFFFFFFF:
        raise FormatError("checksum mismatch in raster payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(len(bands), rows, cols).astype(np.float32)
    return BandRasters(city, data, bands)


def import_rasters(path):
    with open(path, "rb") as f:
        return parse_rasters(f.read())
