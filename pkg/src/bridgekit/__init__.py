"""Endpoint-conditioned diffusion-bridge translation with measurable error budgets."""
from .bridge import (BridgeState, DimensionError, FieldOutput, SingularConversionError, noise_mean_to_score,
                     reverse_sde_drift, sample_zt, score_to_noise_mean, score_to_velocity, velocity_target)
from .oracle import GaussianDomain, OracleField, SingularSystemError, oracle_field, posterior_mean
from .sampler import SamplerConfig, Trajectory, invert, reverse_ode, reverse_sde, translate
from .schedule import EPS, Kind, Schedule, ScheduleDomainError

__version__ = "0.1.0"
