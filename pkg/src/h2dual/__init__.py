"""Dual-sourcing inventory control for hydrogen supply: MDP solver, heuristics and simulator."""

__version__ = "0.1.0"
