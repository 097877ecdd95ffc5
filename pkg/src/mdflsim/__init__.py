"""Simulator and training harness for mobility-aware decentralized federated
learning in vehicular networks: mobility traces, energy/time accounting,
leader election, a from-scratch FL stack and a multi-agent PPO scheduler."""

from . import comms, config, flcore, marl, mobility, nn, protocol, runner

__all__ = ["comms", "config", "flcore", "marl", "mobility", "nn", "protocol",
           "runner"]
__version__ = "0.1.0"
