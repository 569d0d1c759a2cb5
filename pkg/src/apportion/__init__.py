"""Emission source apportionment from point-sensor methane concentrations.

Modules
-------
forward      Gaussian puff transport and design matrices
preprocess   wind aggregation, spike detection, background removal
model        spike-and-slab regression with AR(1) errors and its Gibbs sampler
pipeline     windowed inversion over a deployment
reporting    inventories, alerts and evaluation
simstudy     synthetic data, misalignment sweeps and the OLS baseline
cli          ``apportion`` command-line entry point
"""

from .forward import DesignMatrix, SimConfig, build_design_matrix
from .model import Hyperparams, SamplerConfig, WindowData, run_gibbs
from .pipeline import PipelineConfig, WindowResult, process_window, run_deployment
from .site import SensorSpec, SourceSpec, TimeWindow, WindRecord

__all__ = [
    "DesignMatrix", "SimConfig", "build_design_matrix", "Hyperparams", "SamplerConfig", "WindowData",
    "run_gibbs", "PipelineConfig", "WindowResult", "process_window", "run_deployment", "SensorSpec",
    "SourceSpec", "TimeWindow", "WindRecord",
]
