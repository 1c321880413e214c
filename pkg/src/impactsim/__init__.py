"""Simulator and analysis toolkit for a dual-layer acoustic/resistive-grid
micrometeoroid impact sensor."""

from .acquisition import AcsConfig, DigitizedRecord, RgsConfig, acquire, rgs_measure
from .analysis import (
    PIPELINE_ARRIVAL,
    ArrivalParams,
    ImpactSolution,
    analyze_capture,
    energy_arrival_time,
    estimate_size,
    multilaterate,
    regress_loglinear,
    solve_impact,
)
from .campaign import CampaignConfig, CampaignReport, emit, run_campaign, table3
from .controller import Controller, ProtectedStore, calibrate_wave_speed, step
from .geometry import GridLayout, SensorGeometry, traces_intersected
from .metrics import single_tone_metrics, spectrum, two_tone_ip3
from .synth import ImpactScenario, SynthConfig, simulate_shot

__version__ = "0.1.0"
