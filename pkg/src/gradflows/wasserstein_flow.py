"""Alias of :mod:`gradflows.wasserstein` under its long name."""

import sys

from . import wasserstein

sys.modules[__name__] = wasserstein
