# coding: utf8
"""needlegrasp: simulate autonomous visual-servo grasping of a suturing needle.
"""

import sys

from .__about__ import (
    __author__,
    __copyright__,
    __credits__,
    __license__,
    __version__,
    __maintainer__,
    __email__,
    __status__,
)

VERSION_REQUIRED = (3, 8)

if not sys.version_info >= VERSION_REQUIRED:
    raise NotImplementedError(
        f"you must have at least Python {'.'.join(str(v) for v in VERSION_REQUIRED)}"
    )

from .config import ScenarioConfig, load_config  # noqa: E402
from .harness import run_batch, run_trial, simulate_calibration, verify_accuracy_table  # noqa: E402

# don't muck up the namespace
del sys
