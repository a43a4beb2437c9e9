"""Closed-form LiDAR power/precision model and frugal-sensing savings.

All quantities are SI.  The relations implemented here:

    E_pulse  = P_r * (4*pi*R^2)^2 * tau / (A_r * rho * eta)   (R^4 law)
    P_laser  = E_pulse * f_pulse / eta_laser
    P_scan   = V_motor * I_motor / eta_motor
    delta_R  = c * tau / 2
    delta_th = lambda / D
    f_pulse_req = c / (2*delta_R);  f_s = c / delta_R  (Nyquist)
    P_ADC    = k_adc * (c / delta_R) * 2^N_bits
    P_signal = k_signal * f_s * log2(N_fft)
    P_control = P_ADC + P_MCU
    P_total  = P_laser + P_scan + P_signal + P_control

Masking savings scale the duty-cycled components (laser, ADC, signal) by
the fraction of sensed angular groups, and the laser additionally by
(max sensed range / design range)^4; motor and MCU power are untouched.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

from .errors import InvalidParams
from .radial_mask import MaskStats

SPEED_OF_LIGHT = 299_792_458.0  # m/s, exact SI value


@dataclass(frozen=True)
class EnergyParams:
    """Inputs of the power model; defaults sketch a 100 m pulsed unit."""

    P_r: float = 1e-9  # minimum received signal, W
    R: float = 100.0  # design range, m
    tau: float = 5e-9  # pulse width, s
    A_r: float = 1e-3  # receiver aperture area, m^2
    rho: float = 0.5  # target reflectivity
    eta: float = 0.5  # system efficiency
    f_pulse: float = 1e5  # pulse repetition frequency, Hz
    eta_laser: float = 0.25
    V_motor: float = 12.0  # V
    I_motor: float = 0.5  # A
    eta_motor: float = 0.8
    k_adc: float = 1e-12  # J per (sample * code)
    N_bits: int = 12
    P_MCU: float = 0.2  # W
    k_signal: float = 1e-10  # W per (sample/s * log2-sample)
    N_fft: int = 1024  # samples per processing window
    lam: float = 905e-9  # laser wavelength, m
    D_aperture: float = 0.01  # m

    def __post_init__(self):
        positive = {
            "R": self.R,
            "tau": self.tau,
            "A_r": self.A_r,
            "lam": self.lam,
            "D_aperture": self.D_aperture,
        }
        for name, v in positive.items():
            if not v > 0:
                raise InvalidParams(f"{name} must be positive, got {v}")
        unit = {
            "rho": self.rho,
            "eta": self.eta,
            "eta_laser": self.eta_laser,
            "eta_motor": self.eta_motor,
        }
        for name, v in unit.items():
            if not 0 < v <= 1:
                raise InvalidParams(f"{name} must lie in (0, 1], got {v}")
        nonneg = {
            "P_r": self.P_r,
            "f_pulse": self.f_pulse,
            "V_motor": self.V_motor,
            "I_motor": self.I_motor,
            "k_adc": self.k_adc,
            "k_signal": self.k_signal,
            "P_MCU": self.P_MCU,
        }
        for name, v in nonneg.items():
            if v < 0:
                raise InvalidParams(f"{name} must be non-negative, got {v}")
        if self.N_bits < 1:
            raise InvalidParams("N_bits must be >= 1")
        if self.N_fft < 2:
            raise InvalidParams("N_fft must be >= 2")


@dataclass(frozen=True)
class EnergyReport:
    E_pulse: float
    P_laser: float
    P_scan: float
    P_signal: float
    P_ADC: float
    P_control: float
    P_total: float
    delta_R: float
    delta_theta: float
    f_s: float

    def to_json_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class FrugalReport:
    masked_P_laser: float
    masked_P_signal: float
    masked_P_ADC: float
    masked_P_total: float
    duty: float
    range_scale: float

    def to_json_dict(self) -> dict:
        return dict(self.__dict__)


def pulse_energy(p: EnergyParams) -> float:
    """Energy per pulse needed to close the link at range R; grows as R^4."""
    denom = p.A_r * p.rho * p.eta
    if denom <= 0:
        raise InvalidParams("A_r * rho * eta must be positive")
    return p.P_r * (4.0 * math.pi * p.R**2) ** 2 * p.tau / denom


def laser_power(E_pulse: float, f_pulse: float, eta_laser: float) -> float:
    if eta_laser <= 0:
        raise InvalidParams("eta_laser must be positive")
    return E_pulse * f_pulse / eta_laser


def scan_power(V_motor: float, I_motor: float, eta_motor: float) -> float:
    if eta_motor <= 0:
        raise InvalidParams("eta_motor must be positive")
    return V_motor * I_motor / eta_motor


def range_resolution(tau: float) -> float:
    """Smallest separable distance along the beam: c * tau / 2."""
    if tau < 0:
        raise InvalidParams("tau must be non-negative")
    return SPEED_OF_LIGHT * tau / 2.0


def angular_precision(lam: float, D_aperture: float) -> float:
    """Diffraction-limited beam divergence lambda / D, in radians."""
    if D_aperture <= 0:
        raise InvalidParams("D_aperture must be positive")
    return lam / D_aperture


def nyquist_sampling(delta_R: float) -> tuple[float, float]:
    """(required pulse rate, ADC sampling rate) for a range resolution."""
    if delta_R <= 0:
        raise InvalidParams("delta_R must be positive")
    f_pulse_req = SPEED_OF_LIGHT / (2.0 * delta_R)
    return f_pulse_req, 2.0 * f_pulse_req


def adc_power(k_adc: float, delta_R: float, N_bits: int) -> float:
    """ADC power k * (c / delta_R) * 2^N; doubles per extra bit."""
    if delta_R <= 0:
        raise InvalidParams("delta_R must be positive")
    if N_bits < 1:
        raise InvalidParams("N_bits must be >= 1")
    if k_adc < 0:
        raise InvalidParams("k_adc must be non-negative")
    return k_adc * (SPEED_OF_LIGHT / delta_R) * 2.0**N_bits


def signal_power(k_signal: float, f_s: float, N_fft: int) -> float:
    """Window-processing power, linear in rate and log in window length."""
    if N_fft < 2:
        raise InvalidParams("N_fft must be >= 2")
    if k_signal < 0 or f_s < 0:
        raise InvalidParams("k_signal and f_s must be non-negative")
    return k_signal * f_s * math.log2(N_fft)


def total_power(p: EnergyParams) -> EnergyReport:
    """Evaluate the whole model; warns (not errors) when the configured
    pulse rate exceeds what the ADC sampling rate can resolve."""
    e_pulse = pulse_energy(p)
    p_laser = laser_power(e_pulse, p.f_pulse, p.eta_laser)
    p_scan = scan_power(p.V_motor, p.I_motor, p.eta_motor)
    d_r = range_resolution(p.tau)
    d_theta = angular_precision(p.lam, p.D_aperture)
    _, f_s = nyquist_sampling(d_r)
    if f_s < 2.0 * p.f_pulse:
        warnings.warn(
            f"sampling rate f_s={f_s:.4g} Hz is below twice the pulse "
            f"rate {p.f_pulse:.4g} Hz",
            stacklevel=2,
        )
    p_adc = adc_power(p.k_adc, d_r, p.N_bits)
    p_signal = signal_power(p.k_signal, f_s, p.N_fft)
    p_control = p_adc + p.P_MCU
    return EnergyReport(
        E_pulse=e_pulse,
        P_laser=p_laser,
        P_scan=p_scan,
        P_signal=p_signal,
        P_ADC=p_adc,
        P_control=p_control,
        P_total=p_laser + p_scan + p_signal + p_control,
        delta_R=d_r,
        delta_theta=d_theta,
        f_s=f_s,
    )


def frugal_savings(
    report: EnergyReport, stats: MaskStats, R_design: float
) -> FrugalReport:
    """Power after masking: laser/ADC/signal scale with the sensed-group
    duty cycle, the laser additionally with (sensed range / design)^4;
    motor and MCU are exempt."""
    if R_design <= 0:
        raise InvalidParams("R_design must be positive")
    duty = stats.group_visible_fraction
    if not 0.0 <= duty <= 1.0 or not math.isfinite(stats.max_sensed_range):
        raise InvalidParams("mask stats out of range")
    range_scale = (min(stats.max_sensed_range, R_design) / R_design) ** 4
    p_mcu = report.P_control - report.P_ADC
    masked_laser = report.P_laser * duty * range_scale
    masked_signal = report.P_signal * duty
    masked_adc = report.P_ADC * duty
    return FrugalReport(
        masked_P_laser=masked_laser,
        masked_P_signal=masked_signal,
        masked_P_ADC=masked_adc,
        masked_P_total=masked_laser
        + report.P_scan
        + masked_signal
        + masked_adc
        + p_mcu,
        duty=duty,
        range_scale=range_scale,
    )
