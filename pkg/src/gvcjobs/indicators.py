"""Forward/backward GVC participation and GVC position from sector accounts."""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .panel import PanelDataset

BALANCED_BAND = 1e-9
ACCOUNT_FIELDS = ("v_gvc", "va", "y_gvc", "y", "upstreamness", "downstreamness")


class MaskedIndicator(ValueError):
    """The indicator is undefined for these accounts; ``reason`` says why."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class Orientation(str, enum.Enum):
    FORWARD = "forward-oriented"
    BACKWARD = "backward-oriented"
    BALANCED = "balanced"


@dataclass(frozen=True)
class SectorAccounts:
    """Raw accounts of one country-sector-year.

    ``v_gvc`` is domestic value added in gross exports, ``va`` total value
    added, ``y_gvc`` gross imports of intermediates and ``y`` gross output.
    Upstreamness and downstreamness are distances (in production stages)
    from final demand and from primary factors.
    """

    v_gvc: float
    va: float
    y_gvc: float
    y: float
    upstreamness: float = 1.0
    downstreamness: float = 1.0


@dataclass(frozen=True)
class GvcIndicators:
    forward: float
    backward: float
    position: float
    orientation: Orientation


def forward_participation(acc: SectorAccounts) -> float:
    if not acc.va > 0:
        raise MaskedIndicator(f"value added must be positive, got {acc.va}")
    if acc.v_gvc < 0:
        raise MaskedIndicator(f"domestic value added in exports is negative ({acc.v_gvc})")
    return acc.v_gvc / acc.va


def backward_participation(acc: SectorAccounts) -> float:
    if not acc.y > 0:
        raise MaskedIndicator(f"gross output must be positive, got {acc.y}")
    if acc.y_gvc < 0:
        raise MaskedIndicator(f"intermediate imports are negative ({acc.y_gvc})")
    return acc.y_gvc / acc.y


def gvc_position(acc: SectorAccounts) -> float:
    if not acc.downstreamness > 0:
        raise MaskedIndicator(f"downstreamness must be positive, got {acc.downstreamness}")
    if not acc.upstreamness > 0:
        raise MaskedIndicator(f"upstreamness must be positive, got {acc.upstreamness}")
    return acc.upstreamness / acc.downstreamness


def classify_orientation(position: float, band: float = BALANCED_BAND) -> Orientation:
    if not position > 0:
        raise ValueError(f"GVC position must be positive, got {position}")
    if position > 1.0 + band:
        return Orientation.FORWARD
    if position < 1.0 - band:
        return Orientation.BACKWARD
    return Orientation.BALANCED


def compute_indicators(acc: SectorAccounts) -> GvcIndicators:
    pos = gvc_position(acc)
    return GvcIndicators(
        forward_participation(acc), backward_participation(acc), pos, classify_orientation(pos)
    )


def _ratio(num, den, num_bad, den_bad, what, reasons):
    bad_den = den_bad | ~(den > 0)
    bad_num = num_bad | (num < 0)
    reasons[f"{what}: non-positive or missing denominator"] += int(np.sum(bad_den))
    reasons[f"{what}: negative or missing numerator"] += int(np.sum(bad_num & ~bad_den))
    bad = bad_den | bad_num
    out = np.zeros_like(num)
    out[~bad] = num[~bad] / den[~bad]
    return out, bad


def indicator_panel(accounts: PanelDataset) -> tuple[PanelDataset, dict[str, int]]:
    """Add ``gvc_forward``, ``gvc_backward`` and ``gvc_position`` columns.

    Rows where an indicator is undefined get a missing entry; the returned
    counter tallies the reasons. The indicators are unwinsorized.
    """
    for f in ACCOUNT_FIELDS:
        accounts.column(f)
    c = {f: accounts.column(f) for f in ACCOUNT_FIELDS}
    reasons: Counter = Counter()
    fwd, fwd_bad = _ratio(c["v_gvc"].values, c["va"].values, c["v_gvc"].missing, c["va"].missing,
                          "forward", reasons)
    bwd, bwd_bad = _ratio(c["y_gvc"].values, c["y"].values, c["y_gvc"].missing, c["y"].missing,
                          "backward", reasons)
    up_bad = c["upstreamness"].missing | ~(c["upstreamness"].values > 0)
    pos, pos_bad = _ratio(c["upstreamness"].values, c["downstreamness"].values, up_bad,
                          c["downstreamness"].missing, "position", reasons)
    out = (
        accounts.with_column("gvc_forward", fwd, fwd_bad, "domestic VA in exports / value added")
        .with_column("gvc_backward", bwd, bwd_bad, "intermediate imports / gross output")
        .with_column("gvc_position", pos, pos_bad, "upstreamness / downstreamness")
    )
    return out, {k: v for k, v in reasons.items() if v}
