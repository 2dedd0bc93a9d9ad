"""Key generation on point-to-point QKD links.

Rates and error rates follow explicit parametric stand-in models: a link's
secret-key rate decays exponentially with path loss and linearly with the
launch-power-weighted count of coexisting classical channels, and its QBER
grows with both. The parameters live in the scenario per module, so the
acceptance story is property-based (monotonicity, cutoffs) rather than a
fit to any measured device.

Key material is produced in discrete time steps from a seeded counter-mode
generator; identical (seed, scenario, command sequence) always yields
bitwise-identical blocks regardless of host scheduling, because each
(link, tick) pair owns an independent substream.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

from . import kernels
from .netmodel import RateParams

MASK64 = kernels.MASK64

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


class SimError(Exception):
    pass


class InactiveLinkError(SimError):
    pass


class UnsupportedModeError(SimError):
    pass


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & MASK64
    return h


def derive_seed(base: int, *parts) -> int:
    """Fold strings/integers into a 64-bit substream seed."""
    h = base & MASK64
    for part in parts:
        if isinstance(part, str):
            v = fnv1a64(part.encode("utf-8"))
        else:
            v = int(part) & MASK64
        h = kernels.mix64((h + v) & MASK64)
    return h


# ---------------------------------------------------------------------------
# Rate / QBER models


def link_qber(params: RateParams, loss_db: float,
              classical_power_index: float) -> float:
    """Error fraction, monotone non-decreasing in loss and classical power."""
    if loss_db < 0:
        raise ValueError("loss_db must be >= 0")
    noise = (
        params.noise_coeff
        * classical_power_index
        * 10.0 ** (loss_db / 10.0 - 1.0)
        * params.qber0
    )
    return min(0.5, params.qber0 + noise)


def link_rate(params: RateParams, loss_db: float,
              classical_power_index: float,
              abort_qber: Optional[float] = None) -> float:
    """Secret-key rate in bits/s; zero beyond the loss cutoff or QBER abort."""
    if loss_db < 0:
        raise ValueError("loss_db must be >= 0")
    if loss_db > params.max_loss_db:
        return 0.0
    if abort_qber is not None:
        if link_qber(params, loss_db, classical_power_index) >= abort_qber:
            return 0.0
    rate = (
        params.r0_bps
        * 10.0 ** (-loss_db / 10.0)
        * max(0.0, 1.0 - params.noise_coeff * classical_power_index)
    )
    return max(0.0, rate)


# ---------------------------------------------------------------------------
# Link state and stepping


@dataclass(frozen=True)
class KeyBlock:
    block_id: str  # 128-bit hex
    link_id: str
    vendor: str
    stream_tag: str
    data: bytes
    created_at: int
    mode: str


@dataclass(frozen=True)
class QkdLinkState:
    link_id: str
    src_module: str
    dst_module: str
    src_node: str
    dst_node: str
    vendor: str
    family: str
    mode: str
    rate_bps: float
    qber: float
    abort_qber: float
    channel: Optional[int]
    loss_db: float
    seed: int
    tick: int = 0
    bit_credit: float = 0.0
    active: bool = True

    @property
    def raw_capable(self) -> bool:
        return self.family == "CV"


def set_mode(state: QkdLinkState, mode: str) -> QkdLinkState:
    if mode not in ("distilled", "raw"):
        raise UnsupportedModeError(f"unknown mode '{mode}'")
    if mode == state.mode:
        return state
    if mode == "raw" and not state.raw_capable:
        raise UnsupportedModeError(
            f"link '{state.link_id}': raw mode is not supported by "
            f"{state.family} modules"
        )
    return replace(state, mode=mode)


def step(state: QkdLinkState, dt_s: float
         ) -> tuple[QkdLinkState, Optional[KeyBlock], Optional[KeyBlock]]:
    """Advance one tick; emit matching key blocks for both link endpoints.

    Byte production uses floor accounting with a carried bit credit, so the
    cumulative output over any horizon stays within one byte of rate*time.
    In distilled mode both blocks are identical; in raw mode the far-end
    block has each bit independently flipped with probability qber.
    """
    if dt_s <= 0:
        raise ValueError("dt_s must be > 0")
    if not state.active:
        raise InactiveLinkError(f"link '{state.link_id}' is inactive")

    budget_bits = state.bit_credit + state.rate_bps * dt_s
    nbytes = int(budget_bits // 8.0)
    credit = budget_bits - 8.0 * nbytes
    tick = state.tick
    new_state = replace(state, tick=tick + 1, bit_credit=credit)
    if nbytes <= 0:
        return new_state, None, None

    key_seed = derive_seed(state.seed, "key", tick)
    id_seed = derive_seed(state.seed, "blockid", tick)
    block_id = kernels.fill_keystream(id_seed, 0, 16).hex()
    data = kernels.fill_keystream(key_seed, 0, nbytes)

    if state.mode == "raw":
        threshold = min(1 << 64, round(state.qber * float(1 << 64)))
        noise_seed = derive_seed(state.seed, "noise", tick)
        far_data = kernels.corrupt_bits(data, threshold, noise_seed)
    else:
        far_data = data

    src_block = KeyBlock(
        block_id=block_id,
        link_id=state.link_id,
        vendor=state.vendor,
        stream_tag=state.link_id,
        data=data,
        created_at=tick,
        mode=state.mode,
    )
    dst_block = replace(src_block, data=far_data)
    return new_state, src_block, dst_block
