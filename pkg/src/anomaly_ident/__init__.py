"""Anomaly cause identification for manipulation episodes with HMM, CRF and LSTM labelers."""

from .episode import AnomalyClass, Episode, Observation, read_episodes, write_episodes

__all__ = ["AnomalyClass", "Episode", "Observation", "read_episodes", "write_episodes"]
__version__ = "0.1.0"
