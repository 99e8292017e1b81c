"""Layer-wise lens decoding and depth analysis (C++ core)."""

from ._core import *  # noqa: F401,F403
from ._core import __version__, report_kinds  # noqa: F401

import numpy as _np


def write_token_stream(path, token_ids):
    """Write ids as little-endian uint32, the default input of `depthlens freq`."""
    _np.asarray(token_ids, dtype="<u4").tofile(path)
