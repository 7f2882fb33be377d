"""Continuing soft actor-critic on native continuing control tasks.

Modules: ``approx`` (MLPs, Adam, Polyak), ``envs`` (continuing tasks with reset
schedules), ``agent`` (the learner), ``interventions`` (exploration fixes),
``metrics`` and ``harness`` (configs, runs, sweeps, CLI).
"""

__version__ = "0.1.0"
