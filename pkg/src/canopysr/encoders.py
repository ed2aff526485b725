"""Date and acquisition-angle encodings.

Dates are handled as day-of-year (DOY) integers, 1-based, with the year
dropped after the calendar of the acquisition year has been applied.
Sentinel-2 dates become offsets from January 1st, the LiDAR reference date
an offset from July 1st; both go through the same sinusoidal encoding.
"""

from __future__ import annotations

import calendar
import datetime as dt

import numpy as np
import torch

from .errors import DateOutOfRange

DEFAULT_TAU = 365.0
# Non-leap calendar used whenever the year is unknown.
_DEFAULT_YEAR = 2021


def _check_doy(doy: int) -> int:
    if not 1 <= int(doy) <= 366 or int(doy) != doy:
        raise DateOutOfRange(doy)
    return int(doy)


def day_of_year(date: dt.date) -> int:
    return date.timetuple().tm_yday


def doy_from_ddmm(text: str, year: int | None = None) -> int:
    """Parse a ``DD-MM`` string into a day of year.

    ``year`` selects the calendar (leap or not); without it a non-leap
    year is assumed.
    """
    try:
        day, month = (int(part) for part in text.strip().split("-"))
        date = dt.date(year or _DEFAULT_YEAR, month, day)
    except (ValueError, TypeError) as exc:
        raise ValueError(f"cannot parse date {text!r}, expected DD-MM") from exc
    return day_of_year(date)


def july_first(year: int | None = None) -> int:
    return 182 + int(calendar.isleap(year)) if year is not None else 182


def normalize_doy_s2(doy: int) -> int:
    """Offset in days from January 1st."""
    return _check_doy(doy) - 1


def normalize_doy_lidar(doy: int, year: int | None = None) -> int:
    """Signed offset in days from July 1st (negative before it)."""
    return _check_doy(doy) - july_first(year)


def positional_encoding(offset, d: int = 64, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Sinusoidal encoding of one or many day offsets.

    Returns an array of shape ``(*offset.shape, d)`` whose even entries are
    ``sin(offset / tau**(2k/d))`` and odd entries the matching cosines.
    """
    if d <= 0 or d % 2:
        raise ValueError(f"encoding dimension must be a positive even number, got {d}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    offset = np.asarray(offset, dtype=np.float64)
    k = np.arange(d // 2, dtype=np.float64)
    angle = offset[..., None] / tau ** (2.0 * k / d)
    out = np.empty(offset.shape + (d,), dtype=np.float64)
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


def sinusoidal_encoding(offsets: torch.Tensor, d: int, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Torch twin of :func:`positional_encoding` used inside the network."""
    if d <= 0 or d % 2:
        raise ValueError(f"encoding dimension must be a positive even number, got {d}")
    dtype = offsets.dtype if offsets.is_floating_point() else torch.get_default_dtype()
    offsets = offsets.to(dtype)
    k = torch.arange(d // 2, dtype=dtype, device=offsets.device)
    angle = offsets[..., None] / tau ** (2.0 * k / d)
    out = torch.stack((torch.sin(angle), torch.cos(angle)), dim=-1)
    return out.flatten(-2)


def encode_angles(sun_zenith, sun_azimuth, view_zenith, view_azimuth) -> np.ndarray:
    """Six-component trigonometric encoding of acquisition angles (radians).

    Order: cos(sun zenith), cos(sun azimuth), sin(sun azimuth),
    cos(view zenith), cos(view azimuth), sin(view azimuth). Inputs may be
    arrays; the components are stacked on a trailing axis.
    """
    angles = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64)
                                   for a in (sun_zenith, sun_azimuth, view_zenith, view_azimuth)))
    if not all(np.all(np.isfinite(a)) for a in angles):
        raise ValueError("acquisition angles must be finite")
    sz, sa, vz, va = angles
    return np.stack([np.cos(sz), np.cos(sa), np.sin(sa), np.cos(vz), np.cos(va), np.sin(va)], axis=-1)
