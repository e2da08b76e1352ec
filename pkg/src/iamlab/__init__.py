"""Influence-aware memory policies, POMDP benchmarks and a recurrent PPO trainer."""

__version__ = "0.1.0"
