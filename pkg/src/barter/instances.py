"""Small reference economies used in documentation and tests."""

from __future__ import annotations

from .economy import EconomyInstance, UtilitySpec


def worked_example() -> EconomyInstance:
    """Three agents, three commodities, unit prices and weights, linear utilities."""
    return EconomyInstance(
        prices=(1, 1, 1),
        weights=(1, 1, 1),
        endowments=((18, 3, 3), (13, 4, 55), (22, 2, 2)),
        utilities=(
            UtilitySpec.linear((75, 11, 13)),
            UtilitySpec.linear((4, 3, 9)),
            UtilitySpec.linear((55, 2, 3)),
        ),
    )


def example_one() -> EconomyInstance:
    """Two agents, two commodities, CARA utilities ``2 - exp(-a1 x1) - exp(-a2 x2)``."""
    return EconomyInstance(
        prices=(5, 10),
        weights=(5, 6),
        endowments=((40, 188), (142, 66)),
        utilities=(
            UtilitySpec.cara((0.051, 0.011), offset=2.0),
            UtilitySpec.cara((0.1, 0.031), offset=2.0),
        ),
    )
