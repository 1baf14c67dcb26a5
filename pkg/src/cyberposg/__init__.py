"""Attacker-defender cyber game simulator with double-oracle equilibrium search."""

import logging

from .env import CyberEnv, EnvConfig, ZeroDayConfig
from .model import AttackerAction, DefenderAction, Role

logging.getLogger(__name__).addHandler(logging.NullHandler())

__all__ = ["AttackerAction", "CyberEnv", "DefenderAction", "EnvConfig", "Role", "ZeroDayConfig"]
__version__ = "0.1.0"
