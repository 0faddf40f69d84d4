from .memory import MemoryFault, SimMemory
from .scenario import Scenario, PlantedVuln, load_scenario, corpus_dir, load_corpus
from .machine import SimAdapter, SimSession, reset_launch_counter

__all__ = [
    "MemoryFault",
    "SimMemory",
    "Scenario",
    "PlantedVuln",
    "load_scenario",
    "corpus_dir",
    "load_corpus",
    "SimAdapter",
    "SimSession",
    "reset_launch_counter",
]
