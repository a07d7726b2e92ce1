"""masfuzz: fuzz-driver synthesis from multidimensional API sequences with
coverage-guided driver scheduling.

Importing the package registers every stub-oracle rule, so
:class:`masfuzz.oracles.StubOracle` can answer all pipeline tasks.
"""

from . import (  # noqa: F401  (imported for their stub-rule registrations)
    coverage,
    executor,
    metainfo,
    mutation,
    oracles,
    scheduler,
    semantics,
    sequences,
    synthesis,
    triage,
)
from .config import CampaignConfig, parse_duration
from .errors import MasfuzzError

__all__ = ["CampaignConfig", "MasfuzzError", "parse_duration"]
__version__ = "0.1.0"
