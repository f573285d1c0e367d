"""Sample-weighted FedAvg.

Updates are summed in a canonical order (sorted by weight, then content),
so the result is exactly invariant under permutation of the input list.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import EmptyUpdateSet, LayoutMismatch
from ..mlcore.params import ParamVector


def fedavg_aggregate(updates: Sequence[tuple]) -> ParamVector:
    """Weighted mean of (params, num_samples) updates.

    Weights are num_samples / total; layouts must match exactly.
    """
    updates = list(updates)
    if not updates:
        raise EmptyUpdateSet("no updates to aggregate")
    layout = updates[0][0].layout()
    for params, num_samples in updates:
        if params.layout() != layout:
            raise LayoutMismatch(
                f"update layout {params.layout()} != {layout}")
        if num_samples <= 0:
            raise EmptyUpdateSet("num_samples must be positive")
    total = sum(n for _, n in updates)
    order = sorted(range(len(updates)),
                   key=lambda i: (updates[i][1],
                                  updates[i][0].to_flat().tobytes()))
    stacked = np.stack([updates[i][0].to_flat() for i in order])
    weights = np.array([updates[i][1] / total for i in order])
    flat = (weights[:, None] * stacked).sum(axis=0)
    return ParamVector.from_flat(layout, flat)
