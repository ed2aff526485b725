"""Core data types, LiDAR rasterization and patch containers.

A patch container is an uncompressed zip archive of named ``.npy`` members
(readable with :func:`numpy.load`), written with fixed timestamps so that
identical content always produces identical bytes.
"""

from __future__ import annotations

import datetime as dt
import enum
import io
import json
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoders import day_of_year, encode_angles
from .errors import DateOutOfRange, PatchFormatError, TooFewObservations

BAND_NAMES = ("B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B11", "B12")
N_BANDS = len(BAND_NAMES)
N_ANGLE_CHANNELS = 6
N_INPUT_CHANNELS = N_BANDS + 1 + N_ANGLE_CHANNELS  # bands, cloud mask, encoded angles

T_MIN = 5
MIN_VEG_HEIGHT = 1.5
CROP_MAX_HEIGHT = 5.0
MAX_CLOUD_FRACTION = 0.5
MAX_MISSING_FRACTION = 0.1
# DN -> surface reflectance for L2A products.
REFLECTANCE_SCALE = 1e-4

# May 1st (non-leap) .. October 31st (leap)
SEASON_DOY = (121, 305)
SEASON_MONTHS = range(5, 11)

CONTAINER_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class GeoInfo:
    """Upper-left corner, square pixel size (m) and CRS of a grid."""

    x0: float
    y0: float
    pixel_size: float
    crs: str = "EPSG:2154"

    def offset(self, rows: float, cols: float) -> "GeoInfo":
        return replace(self, x0=self.x0 + cols * self.pixel_size, y0=self.y0 - rows * self.pixel_size)

    def rescaled(self, factor: int) -> "GeoInfo":
        return replace(self, pixel_size=self.pixel_size / factor)

    def to_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "pixel_size": self.pixel_size, "crs": self.crs}

    @classmethod
    def from_dict(cls, d: dict) -> "GeoInfo":
        return cls(float(d["x0"]), float(d["y0"]), float(d["pixel_size"]), str(d["crs"]))


def _check_doy_in_season(dates: np.ndarray) -> None:
    for d in dates:
        if not 1 <= d <= 366:
            raise DateOutOfRange(int(d))
        if not SEASON_DOY[0] <= d <= SEASON_DOY[1]:
            raise DateOutOfRange(int(d), "May-October (DOY 121..305)")


@dataclass(frozen=True, eq=False)
class SITSPatch:
    """A Sentinel-2 style time series over one spatial window.

    ``bands`` holds surface reflectance (T, 10, H, W); ``cloud`` a binary
    cloud mask (T, H, W); ``angles`` the patch-center sun/view angles in
    radians as (sun zenith, sun azimuth, view zenith, view azimuth) per
    date; ``dates`` day-of-year integers. Entries past ``valid_length`` are
    padding.
    """

    bands: np.ndarray
    cloud: np.ndarray
    angles: np.ndarray
    dates: np.ndarray
    geo: GeoInfo
    valid_length: int = -1
    year: int | None = None

    def __post_init__(self):
        bands = np.asarray(self.bands)
        if bands.ndim != 4 or bands.shape[1] != N_BANDS:
            raise PatchFormatError("bands", f"expected (T, {N_BANDS}, H, W), got {bands.shape}")
        t, _, h, w = bands.shape
        if np.asarray(self.cloud).shape != (t, h, w):
            raise PatchFormatError("cloud", f"expected {(t, h, w)}, got {np.asarray(self.cloud).shape}")
        if np.asarray(self.angles).shape != (t, 4):
            raise PatchFormatError("angles", f"expected {(t, 4)}, got {np.asarray(self.angles).shape}")
        dates = np.asarray(self.dates)
        if dates.shape != (t,) or not np.issubdtype(dates.dtype, np.integer):
            raise PatchFormatError("dates", f"expected {t} integers, got {dates.dtype} {dates.shape}")
        object.__setattr__(self, "cloud", np.asarray(self.cloud).astype(bool))
        object.__setattr__(self, "dates", dates.astype(np.int64))
        if self.valid_length < 0:
            object.__setattr__(self, "valid_length", t)
        if self.valid_length > t:
            raise PatchFormatError("valid_length", f"{self.valid_length} exceeds series length {t}")
        if self.valid_length < T_MIN:
            raise TooFewObservations(self.valid_length, T_MIN)
        valid = self.dates[: self.valid_length]
        _check_doy_in_season(valid)
        if np.any(np.diff(valid) <= 0):
            raise PatchFormatError("dates", "dates must be strictly increasing")

    @property
    def length(self) -> int:
        return self.bands.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bands.shape[2], self.bands.shape[3]

    def encoded_angles(self) -> np.ndarray:
        return encode_angles(*self.angles.T)

    def select(self, indices: Sequence[int]) -> "SITSPatch":
        """Sub-series at ``indices`` (must be increasing, within valid entries)."""
        idx = np.asarray(indices, dtype=np.int64)
        return SITSPatch(self.bands[idx], self.cloud[idx], self.angles[idx], self.dates[idx],
                         self.geo, year=self.year)

    def crop(self, row: int, col: int, height: int, width: int) -> "SITSPatch":
        h, w = self.shape
        if row < 0 or col < 0 or row + height > h or col + width > w:
            raise ValueError(f"crop {(row, col, height, width)} outside patch of size {(h, w)}")
        sl = (slice(row, row + height), slice(col, col + width))
        return SITSPatch(self.bands[:, :, sl[0], sl[1]], self.cloud[:, sl[0], sl[1]], self.angles,
                         self.dates, self.geo.offset(row, col), self.valid_length, self.year)

    def equals(self, other: "SITSPatch") -> bool:
        return (self.geo == other.geo and self.valid_length == other.valid_length
                and self.year == other.year
                and all(_same_array(getattr(self, n), getattr(other, n))
                        for n in ("bands", "cloud", "angles", "dates")))


@dataclass(frozen=True, eq=False)
class ReferenceRaster:
    """LiDAR-derived canopy height grid (m) at the target resolution."""

    heights: np.ndarray
    valid_mask: np.ndarray
    lidar_date: int
    resolution: float
    geo: GeoInfo | None = None
    year: int | None = None

    def __post_init__(self):
        heights = np.asarray(self.heights)
        valid = np.asarray(self.valid_mask).astype(bool)
        if heights.ndim != 2:
            raise PatchFormatError("heights", f"expected a 2-D grid, got shape {heights.shape}")
        if valid.shape != heights.shape:
            raise PatchFormatError("valid_mask", f"shape {valid.shape} != heights {heights.shape}")
        if not np.all(np.isfinite(heights)) or np.any(heights < 0):
            raise PatchFormatError("heights", "heights must be finite and non-negative")
        if np.any(heights[valid] < MIN_VEG_HEIGHT):
            raise PatchFormatError("valid_mask", f"valid pixels below {MIN_VEG_HEIGHT} m")
        if not 1 <= int(self.lidar_date) <= 366:
            raise DateOutOfRange(self.lidar_date)
        if self.resolution <= 0:
            raise PatchFormatError("resolution", "must be positive")
        object.__setattr__(self, "valid_mask", valid)
        object.__setattr__(self, "lidar_date", int(self.lidar_date))
        object.__setattr__(self, "resolution", float(self.resolution))

    @property
    def shape(self) -> tuple[int, int]:
        return self.heights.shape

    def crop(self, row: int, col: int, height: int, width: int) -> "ReferenceRaster":
        h, w = self.shape
        if row < 0 or col < 0 or row + height > h or col + width > w:
            raise ValueError(f"crop {(row, col, height, width)} outside reference of size {(h, w)}")
        geo = self.geo.offset(row, col) if self.geo is not None else None
        return replace(self, heights=self.heights[row:row + height, col:col + width],
                       valid_mask=self.valid_mask[row:row + height, col:col + width], geo=geo)

    def equals(self, other: "ReferenceRaster") -> bool:
        return (self.lidar_date == other.lidar_date and self.resolution == other.resolution
                and self.geo == other.geo and self.year == other.year
                and _same_array(self.heights, other.heights)
                and _same_array(self.valid_mask, other.valid_mask))


class PointClass(enum.IntEnum):
    VEGETATION = 0
    GROUND = 1
    BUILDING = 2
    OTHER = 3


@dataclass(frozen=True, eq=False)
class PointCloudSample:
    """Classified, height-normalized LiDAR points plus crop parcels.

    ``points`` is (N, 3) x/y/z in meters with z the height above ground;
    ``classes`` holds :class:`PointClass` codes; ``crop_parcels`` are
    shapely polygons in the same CRS.
    """

    points: np.ndarray
    classes: np.ndarray
    crop_parcels: list = field(default_factory=list)
    date: int = 182
    year: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise PatchFormatError("points", f"expected (N, 3), got {pts.shape}")
        cls = np.asarray(self.classes)
        if cls.shape != (pts.shape[0],):
            raise PatchFormatError("classes", f"expected {pts.shape[0]} labels, got {cls.shape}")
        bad = ~np.isfinite(pts)
        if bad.any():
            rows = np.flatnonzero(bad.any(axis=1))
            raise PatchFormatError(
                "points", f"{rows.size} points with non-finite coordinates, first at index {rows[0]}")
        for i, poly in enumerate(self.crop_parcels):
            if not poly.is_valid:
                raise PatchFormatError(f"crop_parcels[{i}]", "polygon is not simple")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "classes", cls.astype(np.int64))


def _same_array(a, b) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    return a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)


# --------------------------------------------------------------------------
# Rasterization
# --------------------------------------------------------------------------

def percentile_by_group(group_ids: np.ndarray, values: np.ndarray, q: float):
    """Per-group percentile with linear interpolation between order statistics.

    Returns ``(unique_ids, percentiles)``.
    """
    order = np.lexsort((values, group_ids))
    gid, val = group_ids[order], values[order]
    uniq, start, counts = np.unique(gid, return_index=True, return_counts=True)
    pos = (counts - 1) * (q / 100.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, counts - 1)
    frac = pos - lo
    below, above = val[start + lo], val[start + hi]
    return uniq, below + (above - below) * frac


def pixel_centers_in_parcels(shape: tuple[int, int], geo: GeoInfo, parcels: Iterable) -> np.ndarray:
    import shapely

    rows, cols = shape
    inside = np.zeros(shape, dtype=bool)
    xs = geo.x0 + (np.arange(cols) + 0.5) * geo.pixel_size
    ys = geo.y0 - (np.arange(rows) + 0.5) * geo.pixel_size
    gx, gy = np.meshgrid(xs, ys)
    for poly in parcels:
        inside |= shapely.contains_xy(poly, gx, gy)
    return inside


def apply_vegetation_masks(heights: np.ndarray, in_crop: np.ndarray | None = None):
    """Zero sub-threshold pixels and build the validity mask.

    Pixels below 1.5 m become 0 and invalid; pixels inside crop parcels
    lower than 5 m keep their height but are invalid.
    """
    heights = np.where(heights >= MIN_VEG_HEIGHT, heights, 0.0)
    valid = heights >= MIN_VEG_HEIGHT
    if in_crop is not None:
        valid &= ~(in_crop & (heights < CROP_MAX_HEIGHT))
    return heights, valid


def rasterize_p95(cloud: PointCloudSample, resolution: float,
                  extent: tuple[float, float, float, float], crs: str = "EPSG:2154") -> ReferenceRaster:
    """Grid the 95th percentile of vegetation point heights.

    ``extent`` is ``(xmin, ymin, xmax, ymax)`` and must be a whole number
    of pixels on each axis. A point belongs to the pixel whose half-open
    cell ``[x, x + res) x (y - res, y]`` contains it.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    xmin, ymin, xmax, ymax = map(float, extent)
    ncols_f, nrows_f = (xmax - xmin) / resolution, (ymax - ymin) / resolution
    ncols, nrows = int(round(ncols_f)), int(round(nrows_f))
    if ncols <= 0 or nrows <= 0:
        raise ValueError(f"empty extent {extent}")
    if abs(ncols_f - ncols) > 1e-9 * max(1, ncols) or abs(nrows_f - nrows) > 1e-9 * max(1, nrows):
        raise ValueError(f"extent {extent} is not aligned to a {resolution} m grid")

    veg = cloud.classes == PointClass.VEGETATION
    x, y, z = cloud.points[veg].T
    col = np.floor((x - xmin) / resolution).astype(np.int64)
    row = np.floor((ymax - y) / resolution).astype(np.int64)
    inside = (col >= 0) & (col < ncols) & (row >= 0) & (row < nrows)

    grid = np.zeros((nrows, ncols), dtype=np.float64)
    if inside.any():
        ids, p95 = percentile_by_group(row[inside] * ncols + col[inside], z[inside], 95.0)
        grid.flat[ids] = p95

    geo = GeoInfo(xmin, ymax, float(resolution), crs)
    in_crop = pixel_centers_in_parcels(grid.shape, geo, cloud.crop_parcels) if cloud.crop_parcels else None
    heights, valid = apply_vegetation_masks(grid, in_crop)
    return ReferenceRaster(heights, valid, cloud.date, resolution, geo, cloud.year)


# --------------------------------------------------------------------------
# Series filtering
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Acquisition:
    """One candidate image with its quality statistics."""

    date: dt.date
    bands: np.ndarray
    cloud: np.ndarray
    angles: tuple[float, float, float, float]
    cloud_fraction: float
    missing_fraction: float


def binarize_cloud_mask(mask: np.ndarray) -> np.ndarray:
    """Any non-zero cloud/shadow flag counts as cloud."""
    return np.asarray(mask) != 0


def dn_to_reflectance(dn: np.ndarray) -> np.ndarray:
    return np.asarray(dn, dtype=np.float32) * REFLECTANCE_SCALE


def filter_series(candidates: Sequence[Acquisition], lidar_date: dt.date, geo: GeoInfo,
                  min_obs: int = T_MIN) -> SITSPatch:
    """Keep clean May-October acquisitions from the LiDAR year.

    Images with more than 50 % cloud or 10 % missing data are dropped.
    Raises :class:`TooFewObservations` when fewer than ``min_obs`` remain.
    """
    kept: dict[dt.date, Acquisition] = {}
    for acq in sorted(candidates, key=lambda a: a.date):
        if acq.date.year != lidar_date.year or acq.date.month not in SEASON_MONTHS:
            continue
        if acq.cloud_fraction > MAX_CLOUD_FRACTION or acq.missing_fraction > MAX_MISSING_FRACTION:
            continue
        kept.setdefault(acq.date, acq)
    if len(kept) < min_obs:
        raise TooFewObservations(len(kept), min_obs)
    acqs = list(kept.values())
    return SITSPatch(
        bands=np.stack([a.bands for a in acqs]).astype(np.float32),
        cloud=np.stack([binarize_cloud_mask(a.cloud) for a in acqs]),
        angles=np.array([a.angles for a in acqs], dtype=np.float64),
        dates=np.array([day_of_year(a.date) for a in acqs], dtype=np.int64),
        geo=geo,
        year=lidar_date.year,
    )


# --------------------------------------------------------------------------
# Container I/O
# --------------------------------------------------------------------------

def _write_archive(path: Path, arrays: dict[str, np.ndarray]) -> None:
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_DATE)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def _meta_array(meta: dict) -> np.ndarray:
    return np.array(json.dumps(meta, sort_keys=True))


def save_patch(path, patch: SITSPatch, reference: ReferenceRaster | None = None) -> Path:
    """Write a patch (and optionally its reference raster) to one container."""
    path = Path(path)
    meta = {"version": CONTAINER_VERSION, "geo": patch.geo.to_dict(),
            "valid_length": patch.valid_length, "year": patch.year}
    arrays = {"bands": patch.bands, "cloud": patch.cloud, "angles": patch.angles, "dates": patch.dates}
    if reference is not None:
        arrays["ref_heights"] = reference.heights
        arrays["ref_valid"] = reference.valid_mask
        meta["reference"] = {
            "lidar_date": reference.lidar_date, "resolution": reference.resolution,
            "year": reference.year,
            "geo": reference.geo.to_dict() if reference.geo is not None else None,
        }
    arrays["meta"] = _meta_array(meta)
    _write_archive(path, arrays)
    return path


def _field(archive, name: str) -> np.ndarray:
    try:
        return archive[name]
    except KeyError:
        raise PatchFormatError(name, "missing from container") from None
    except Exception as exc:  # noqa: BLE001 - numpy raises assorted errors on bad members
        raise PatchFormatError(name, f"unreadable ({exc})") from exc


def _meta_value(meta: dict, key: str, where: str = ""):
    try:
        return meta[key]
    except KeyError:
        raise PatchFormatError(f"{where}{key}", "missing from metadata") from None


def load_patch(path) -> tuple[SITSPatch, ReferenceRaster | None]:
    """Read a container written by :func:`save_patch`; invariants are re-checked."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        archive = np.load(path, allow_pickle=False)
    except Exception as exc:  # noqa: BLE001
        raise PatchFormatError("<container>", f"not a readable patch archive ({exc})") from exc
    with archive:
        try:
            raw = _field(archive, "meta")
            meta = json.loads(str(raw.reshape(-1)[0]) if raw.size == 1 else "")
        except json.JSONDecodeError as exc:
            raise PatchFormatError("meta", "invalid JSON") from exc
        version = _meta_value(meta, "version")
        if version != CONTAINER_VERSION:
            raise PatchFormatError("version", f"unsupported container version {version}")
        try:
            geo = GeoInfo.from_dict(_meta_value(meta, "geo"))
        except (KeyError, TypeError, ValueError) as exc:
            raise PatchFormatError("geo", f"malformed ({exc})") from exc
        patch = SITSPatch(
            bands=_field(archive, "bands"), cloud=_field(archive, "cloud"),
            angles=_field(archive, "angles"), dates=_field(archive, "dates"), geo=geo,
            valid_length=int(_meta_value(meta, "valid_length")), year=meta.get("year"),
        )
        reference = None
        if "reference" in meta:
            rmeta = meta["reference"]
            rgeo = rmeta.get("geo")
            reference = ReferenceRaster(
                heights=_field(archive, "ref_heights"), valid_mask=_field(archive, "ref_valid"),
                lidar_date=_meta_value(rmeta, "lidar_date", "reference."),
                resolution=_meta_value(rmeta, "resolution", "reference."),
                geo=GeoInfo.from_dict(rgeo) if rgeo else None, year=rmeta.get("year"),
            )
    return patch, reference


# --------------------------------------------------------------------------
# GeoTIFF and manifests
# --------------------------------------------------------------------------

def write_geotiff(path, array: np.ndarray, geo: GeoInfo, nodata: float | None = None) -> Path:
    """Single-band float32 GeoTIFF with the grid's CRS and affine transform."""
    import rasterio
    from rasterio.transform import Affine

    path = Path(path)
    array = np.asarray(array, dtype=np.float32)
    profile = {
        "driver": "GTiff", "dtype": "float32", "count": 1,
        "height": array.shape[0], "width": array.shape[1],
        "crs": geo.crs, "transform": Affine(geo.pixel_size, 0.0, geo.x0, 0.0, -geo.pixel_size, geo.y0),
        "nodata": nodata,
    }
    with rasterio.open(path, "w", **profile) as dst:
        dst.write(array, 1)
    return path


def read_geotiff(path) -> tuple[np.ndarray, GeoInfo]:
    import rasterio

    with rasterio.open(path) as src:
        data = src.read(1)
        t = src.transform
        crs = src.crs.to_string() if src.crs is not None else ""
    return data, GeoInfo(t.c, t.f, t.a, crs)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    split: str


def write_manifest(path, entries: Iterable[ManifestEntry]) -> Path:
    path = Path(path)
    lines = [f"{e.path}\t{e.split}\n" for e in entries]
    path.write_text("".join(lines))
    return path


def read_manifest(path) -> list[ManifestEntry]:
    """One ``<patch path><TAB><split>`` per line; ``#`` starts a comment."""
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 2:
            raise PatchFormatError(f"manifest line {lineno}", f"expected '<path> <split>', got {line!r}")
        entries.append(ManifestEntry(parts[0], parts[1]))
    return entries
