# Copyright Contributors to the DGTR Project
# SPDX-License-Identifier: Apache-2.0
#
"""Distributed sparse-view Gaussian reconstruction, desk-scale edition."""

from ._core import *  # noqa: F401,F403
from ._core import (
    Benchmark,
    Camera,
    ContractError,
    FormatError,
    GaussianModel,
    NumericError,
    TransportError,
)

__version__ = "0.1.0"
