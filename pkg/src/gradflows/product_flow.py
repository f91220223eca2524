"""Alias of :mod:`gradflows.product` under its long name."""

import sys

from . import product

sys.modules[__name__] = product
