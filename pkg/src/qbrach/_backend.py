"""Select the flow kernel at import time.

The compiled ``_flow`` extension is preferred.  Setting ``QBRACH_BACKEND=python``
forces the numpy implementation; both expose the same ``flow`` signature.
"""
import logging
import os

from ._flow_py import IntegrationError
from ._flow_py import flow as flow_python

log = logging.getLogger(__name__)

BACKEND = "python"
flow = flow_python
flow_compiled = None

if os.environ.get("QBRACH_BACKEND", "").lower() != "python":
    try:
        from ._flow import flow as flow_compiled
    except ImportError:  # extension not built
        log.debug("compiled flow kernel unavailable, using numpy fallback")
    else:
        flow = flow_compiled
        BACKEND = "compiled"

__all__ = ["BACKEND", "IntegrationError", "flow", "flow_compiled", "flow_python"]
