"""Gas metering and Wei fee arithmetic for contract calls.

A call produces a trace of primitive operations. In compositional mode the
gas used is ``call_base`` plus the per-primitive costs (``deploy_base`` for a
deployment). A schedule may instead pin a fixed figure per function name;
the bundled ``table1`` schedule pins the measured costs of the three escrow
functions.

Schedule file format (TOML)::

    deploy_base = 500000
    per_state_write = 5000
    per_value_transfer = 9000
    per_event_emit = 1500
    call_base = 21000
    gas_limit = 8000000            # optional

    [overrides]                    # optional, function name -> gas
    contractDeploy = 834625
"""

from __future__ import annotations

import sys
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigError, GasLimitExceeded

WEI_PER_GWEI = 10**9
WEI_PER_ETH = 10**18
DEFAULT_GAS_PRICE_WEI = 25 * WEI_PER_GWEI

# function names as they appear in gas reports
DEPLOY = "contractDeploy"
PAY = "consumerPay"
SETTLE = "paymentSettle"
PROVENANCE = "commitProvenance"
REFUND = "timeoutRefund"


class Op(str, Enum):
    DEPLOY = "deploy"
    STATE_WRITE = "state_write"
    VALUE_TRANSFER = "value_transfer"
    EVENT_EMIT = "event_emit"


@dataclass(frozen=True)
class GasSchedule:
    deploy_base: int = 500_000
    per_state_write: int = 5_000
    per_value_transfer: int = 9_000
    per_event_emit: int = 1_500
    call_base: int = 21_000
    overrides: Mapping[str, int] = field(default_factory=dict)
    gas_limit: int | None = 8_000_000
    name: str = "default"

    def __post_init__(self) -> None:
        for attr in ("deploy_base", "per_state_write", "per_value_transfer", "per_event_emit", "call_base"):
            value = getattr(self, attr)
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ValueError(f"{attr} must be a non-negative integer, got {value!r}")
        for fn, value in self.overrides.items():
            if not isinstance(value, int) or value < 0:
                raise ValueError(f"override for {fn} must be a non-negative integer")

    def cost_of(self, op: Op) -> int:
        return {
            Op.DEPLOY: self.deploy_base,
            Op.STATE_WRITE: self.per_state_write,
            Op.VALUE_TRANSFER: self.per_value_transfer,
            Op.EVENT_EMIT: self.per_event_emit,
        }[op]


@dataclass(frozen=True)
class GasReceipt:
    function_name: str
    gas_used: int
    gas_price_wei: int
    fee_wei: int
    reverted: bool = False

    @property
    def fee_eth(self) -> str:
        return format_eth(self.fee_wei)


def meter_gas(
    trace: Iterable[Op],
    schedule: GasSchedule,
    function_name: str | None = None,
    *,
    enforce_limit: bool = True,
) -> int:
    if function_name is not None and function_name in schedule.overrides:
        used = schedule.overrides[function_name]
    else:
        counts = Counter(trace)
        used = schedule.call_base + sum(schedule.cost_of(op) * n for op, n in counts.items())
    if enforce_limit and schedule.gas_limit is not None and used > schedule.gas_limit:
        raise GasLimitExceeded(f"{function_name or 'call'} needs {used} gas, limit is {schedule.gas_limit}")
    return used


def format_eth(wei: int, places: int = 6) -> str:
    quantum = Decimal(1).scaleb(-places)
    return str((Decimal(wei) / WEI_PER_ETH).quantize(quantum, rounding=ROUND_HALF_UP))


def fee_of(gas_used: int, gas_price_wei: int = DEFAULT_GAS_PRICE_WEI, function_name: str = "") -> GasReceipt:
    if gas_used < 0 or gas_price_wei < 0:
        raise ValueError("gas and gas price must be non-negative")
    return GasReceipt(function_name, gas_used, gas_price_wei, gas_used * gas_price_wei)


# --------------------------------------------------------------------------- loading

_FIELDS = ("deploy_base", "per_state_write", "per_value_transfer", "per_event_emit", "call_base")


def schedule_from_mapping(data: Mapping, name: str = "custom") -> GasSchedule:
    unknown = set(data) - set(_FIELDS) - {"overrides", "gas_limit", "name"}
    if unknown:
        raise ConfigError(f"unknown gas schedule keys: {sorted(unknown)}", field=sorted(unknown)[0])
    kwargs: dict = {}
    for key in _FIELDS:
        if key not in data:
            raise ConfigError("missing gas schedule field", field=key)
        kwargs[key] = data[key]
    overrides = data.get("overrides", {})
    if not isinstance(overrides, Mapping):
        raise ConfigError("overrides must be a table", field="overrides")
    try:
        return GasSchedule(
            **kwargs,
            overrides=dict(overrides),
            gas_limit=data.get("gas_limit", GasSchedule.gas_limit),
            name=data.get("name", name),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_schedule(ref: str | Path) -> GasSchedule:
    """Load a schedule by bundled name (``default``, ``table1``) or file path."""
    ref_str = str(ref)
    bundled = resources.files("datashare") / "schedules" / f"{ref_str}.toml"
    if "/" not in ref_str and not ref_str.endswith(".toml") and bundled.is_file():
        text, name = bundled.read_text(encoding="utf-8"), ref_str
    else:
        path = Path(ref)
        if not path.is_file():
            raise ConfigError(f"gas schedule {ref_str!r} is neither bundled nor a file", field="gas_schedule")
        text, name = path.read_text(encoding="utf-8"), path.stem
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"gas schedule {ref_str}: {exc}") from exc
    return schedule_from_mapping(data, name)
