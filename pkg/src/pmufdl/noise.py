"""PMU measurement noise model: polar sigmas and rectangular propagation.

PMU noise is specified in polar form: a magnitude standard deviation as a
fraction of the true magnitude and an absolute phase standard deviation in
radians.  Estimation works in rectangular coordinates, so the polar sigmas
are propagated through a first-order linearization at the operating point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: Magnitudes below this fraction of the nominal are treated as zero when
#: linearizing, and the nominal magnitude is used instead.
MAGNITUDE_FLOOR_FRACTION = 1e-6

#: Smallest admissible measurement variance; keeps R positive definite when
#: a caller passes all-zero sigmas.
VARIANCE_FLOOR = 1e-30


@dataclass(frozen=True)
class NoiseParams:
    """Per-channel PMU noise standard deviations and the sampling period.

    Magnitude sigmas are fractions of the measured magnitude; phase sigmas
    are radians.  ``nominal_current_a`` anchors the noise floor of current
    channels whose true value is zero (a PMU current input has a rated range
    regardless of the flowing current); the voltage nominal defaults to the
    mean source EMF magnitude of the grid at hand.
    """

    sigma_v_mag: float = 1.6e-5
    sigma_i_mag: float = 4e-3
    sigma_v_phase: float = 5.1e-5
    sigma_i_phase: float = 5.8e-3
    sample_period: float = 0.02
    nominal_voltage_v: float | None = None
    nominal_current_a: float = 10.0

    def __post_init__(self):
        for name in ("sigma_v_mag", "sigma_i_mag", "sigma_v_phase",
                     "sigma_i_phase", "sample_period"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def scaled(self, factor: float) -> "NoiseParams":
        """All four sigmas multiplied by ``factor`` (sampling unchanged)."""
        return NoiseParams(
            sigma_v_mag=self.sigma_v_mag * factor,
            sigma_i_mag=self.sigma_i_mag * factor,
            sigma_v_phase=self.sigma_v_phase * factor,
            sigma_i_phase=self.sigma_i_phase * factor,
            sample_period=self.sample_period,
            nominal_voltage_v=self.nominal_voltage_v,
            nominal_current_a=self.nominal_current_a)

    def zero_noise(self) -> "NoiseParams":
        return self.scaled(0.0)


def rect_variances(
    phasors: np.ndarray,
    sigma_mag_frac: float,
    sigma_phase: float,
    nominal: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """First-order polar-to-rectangular variance propagation.

    For u = m*exp(j*t):  Var(Re) = m^2 (cos^2 t * s_m^2 + sin^2 t * s_p^2),
    Var(Im) = m^2 (sin^2 t * s_m^2 + cos^2 t * s_p^2), with s_m the
    fractional magnitude sigma.  Cross-covariances are dropped.

    Phasors with magnitude below ``MAGNITUDE_FLOOR_FRACTION * nominal`` fall
    back to the nominal magnitude at angle zero; the returned boolean mask
    flags those channels.
    """
    u = np.asarray(phasors, dtype=complex)
    mag = np.abs(u)
    ang = np.angle(u)
    fallback = mag < MAGNITUDE_FLOOR_FRACTION * nominal
    mag_eff = np.where(fallback, nominal, mag)
    ang_eff = np.where(fallback, 0.0, ang)
    c2 = np.cos(ang_eff) ** 2
    s2 = np.sin(ang_eff) ** 2
    var_re = mag_eff**2 * (c2 * sigma_mag_frac**2 + s2 * sigma_phase**2)
    var_im = mag_eff**2 * (s2 * sigma_mag_frac**2 + c2 * sigma_phase**2)
    return var_re, var_im, fallback


def apply_polar_noise(
    phasors: np.ndarray,
    sigma_mag_frac: float,
    sigma_phase: float,
    nominal: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw one noisy realization of the given phasors.

    Regular channels get multiplicative magnitude noise and additive phase
    noise.  Channels at (numerically) zero magnitude get additive rectangular
    noise anchored at the nominal magnitude, mirroring the variance fallback
    of :func:`rect_variances` so synthesized noise matches the assumed R.
    """
    u = np.asarray(phasors, dtype=complex)
    mag = np.abs(u)
    eps_m = rng.standard_normal(u.shape)
    eps_p = rng.standard_normal(u.shape)
    fallback = mag < MAGNITUDE_FLOOR_FRACTION * nominal
    # multiplying u directly keeps the zero-sigma stream bit-identical
    noisy = u * (1.0 + sigma_mag_frac * eps_m) * np.exp(1j * sigma_phase * eps_p)
    additive = u + nominal * (sigma_mag_frac * eps_m + 1j * sigma_phase * eps_p)
    return np.where(fallback, additive, noisy)
