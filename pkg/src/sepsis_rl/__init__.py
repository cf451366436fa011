"""Graph-based offline RL for sepsis-style patient trajectories."""

__version__ = "0.1.0"
