"""Alias of :mod:`gradflows.euclidean` under its long name."""

import sys

from . import euclidean

sys.modules[__name__] = euclidean
