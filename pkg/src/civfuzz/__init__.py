"""civfuzz: an interface fuzzer for compartment boundaries.

Alters data crossing a trust boundary in either direction (sandboxed callee
or safeboxed caller), then deduplicates, reproduces, minimizes, triages, and
classifies the resulting crashes.  Ships with a deterministic simulated
target carrying a seeded vulnerability corpus.
"""

__version__ = "0.1.0"

from .iface import Direction, InterfaceSpec, load_interface_spec
from .campaign import CampaignConfig, CampaignReport, run_campaign
from .mutation import MutationConfig

__all__ = [
    "Direction",
    "InterfaceSpec",
    "load_interface_spec",
    "CampaignConfig",
    "CampaignReport",
    "run_campaign",
    "MutationConfig",
    "__version__",
]
