"""Deterministic desk-scale simulator of an image-guided vein cannulation
procedure: ground-truth world, synthetic planar/depth imaging, classical
perception, a navigation/contact/puncture state machine, a batch harness
with report generation, and a live session server for the browser UI."""

__version__ = "0.1.0"

from .scenario import Scenario, compact_scenario, default_scenario, load_scenario
from .world import WorldState, step, evaluate_tissue_state, inject_air

__all__ = ["Scenario", "compact_scenario", "default_scenario", "load_scenario",
           "WorldState", "step", "evaluate_tissue_state", "inject_air",
           "__version__"]
