"""Wrapped-phase retrieval: N-step phase shifting and Fourier-transform demodulation.

Sign convention: for ``I_n = A + B cos(Phi + 2 pi n / N)`` the least-squares
sums give ``M = -(N B / 2) sin(Phi)`` and ``D = (N B / 2) cos(Phi)``, so the
wrapped phase is ``atan2(-M, D)``.  This makes ``phi`` equal to ``Phi`` wrapped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODULATION_THRESHOLD = 0.02


class PhaseError(ValueError):
    pass


@dataclass
class PhaseMaps:
    M: np.ndarray
    D: np.ndarray
    phi: np.ndarray
    B_mod: np.ndarray
    mask: np.ndarray


def _images(stack):
    images = getattr(stack, "images", stack)
    if isinstance(images, (list, tuple)):
        shapes = {np.shape(im) for im in images}
        if len(shapes) != 1:
            raise PhaseError("fringe images have mismatched dimensions")
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or images.shape[0] < 3:
        raise PhaseError("need an (N, H, W) stack with N >= 3")
    return images


def ps_numerator_denominator(stack):
    """Least-squares sums ``M = sum I_n sin(2 pi n/N)``, ``D = sum I_n cos(2 pi n/N)``."""
    images = _images(stack)
    N = images.shape[0]
    delta = 2.0 * np.pi * np.arange(N) / N
    M = np.tensordot(np.sin(delta), images, axes=1)
    D = np.tensordot(np.cos(delta), images, axes=1)
    return M, D


def wrapped_phase(M, D, return_valid: bool = False):
    """``atan2(-M, D)`` in (-pi, pi]; pixels with ``M = D = 0`` give 0 and are invalid."""
    M = np.asarray(M, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    if M.shape != D.shape:
        raise PhaseError("M and D maps differ in size")
    valid = (M != 0) | (D != 0)
    phi = np.where(valid, np.arctan2(-M, D), 0.0)
    phi = np.where(phi == -np.pi, np.pi, phi)
    phi = phi + 0.0  # normalise -0.0
    if return_valid:
        return phi, valid
    return phi


def modulation(M, D, N: int, threshold: float = MODULATION_THRESHOLD):
    """Fringe amplitude ``(2/N) sqrt(M^2 + D^2)`` and the mask ``B_mod >= threshold``."""
    if N < 3:
        raise PhaseError("N must be >= 3")
    B_mod = (2.0 / N) * np.hypot(M, D)
    return B_mod, B_mod >= threshold


def retrieve_ps(stack, threshold: float = MODULATION_THRESHOLD) -> PhaseMaps:
    images = _images(stack)
    M, D = ps_numerator_denominator(images)
    phi, valid = wrapped_phase(M, D, return_valid=True)
    B_mod, mask = modulation(M, D, images.shape[0], threshold)
    return PhaseMaps(M, D, phi, B_mod, mask & valid)


def phase_maps_from_md(M, D, N: int = 3, threshold: float = MODULATION_THRESHOLD) -> PhaseMaps:
    phi, valid = wrapped_phase(M, D, return_valid=True)
    B_mod, mask = modulation(M, D, N, threshold)
    return PhaseMaps(np.asarray(M), np.asarray(D), phi, B_mod, mask & valid)


# -- Fourier transform profilometry ---------------------------------------------


def estimate_carrier(image) -> tuple[float, float]:
    """Spectral peak (cycles/px, ``(fu, fv)``) in the half plane ``fu > 0``."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    spec = np.abs(np.fft.fft2(image - image.mean()))
    fu = np.fft.fftfreq(w)
    fv = np.fft.fftfreq(h)
    FU, FV = np.meshgrid(fu, fv)
    spec = np.where((FU > 0) | ((FU == 0) & (FV > 0)), spec, 0.0)
    j = np.unravel_index(np.argmax(spec), spec.shape)
    return float(FU[j]), float(FV[j])


def ft_wrapped_phase(image, carrier_freq=None):
    """Single-frame wrapped phase by carrier demodulation.

    The fundamental lobe is isolated with a raised-cosine window of radius
    ``|carrier| / 2`` centred on the carrier; the carrier is kept so the result
    is directly comparable with phase shifting.  A border band as wide as the
    spatial half width of the window kernel, ``1 / radius`` (two fringe
    periods), is masked.

    Returns ``(phi, mask)``.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if carrier_freq is None:
        carrier = estimate_carrier(image)
    elif np.ndim(carrier_freq) == 0:
        carrier = (float(carrier_freq), 0.0)
    else:
        carrier = (float(carrier_freq[0]), float(carrier_freq[1]))
    fu0, fv0 = carrier
    # separation from DC measured in FFT bins
    sep_bins = np.hypot(fu0 * w, fv0 * h)
    if sep_bins < 2.0 or not np.any(image != image.flat[0]):
        raise PhaseError("carrier too low")
    spec = np.fft.fft2(image)
    FU, FV = np.meshgrid(np.fft.fftfreq(w), np.fft.fftfreq(h))
    radius = 0.5 * np.hypot(fu0, fv0)
    dist = np.hypot(FU - fu0, FV - fv0)
    window = np.where(dist < radius, 0.5 * (1.0 + np.cos(np.pi * dist / radius)), 0.0)
    analytic = np.fft.ifft2(spec * window)
    phi = np.angle(analytic)
    phi = np.where(phi == -np.pi, np.pi, phi)
    border = int(np.ceil(1.0 / radius))
    mask = np.zeros((h, w), dtype=bool)
    mask[border : h - border, border : w - border] = True
    return phi, mask
