"""Time-optimal quantum gate protocols from penalty-metric geodesics.

The solver enumerates matrix-log branches of the target, deforms each
constant-Hamiltonian geodesic along the penalty parameter ``q`` and finally
shoots the brachistochrone boundary-value problem from the large-``q`` limit.
"""
import logging
import os

from ._backend import BACKEND, IntegrationError

__version__ = "0.1.0"


def _configure_logging() -> None:
    level = os.environ.get("QBRACH_LOG_LEVEL")
    if not level:
        return
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


_configure_logging()

__all__ = ["BACKEND", "IntegrationError", "__version__"]
