"""Scenario configs, the scenario runner and report rendering.

Scenario file grammar (TOML)::

    name = "basic_sale"                 # optional, defaults to the file stem
    rng_seed = 42                       # required
    block_interval_seconds = 15         # optional, default 15
    gas_schedule = "default"            # bundled name or path relative to this file
    gas_price_gwei = 25                 # optional, default 25
    chunk_size = 4096                   # optional, default 4096
    crypto = "rsa-aes"                  # optional: rsa-aes | toy
    timeout_blocks = 10                 # optional; enables timeout refunds

    [[participants]]
    id = "alice"
    role = "owner"                      # owner | consumer, or roles = [...]
    balance = 1000
    adversarial = false                 # optional; answers every query with garbage

    [[items]]
    id = "sleep-study"
    owner = "alice"
    deposit = 1000
    data_hex = "00ff..."                # exactly one of data_hex, data_text,
                                        # data_file (relative path) or data_size
    metadata = { topic = "sleep" }

    [[actions]]                         # executed in order
    do = "publish"                      # publish | purchase | retrieve | delete
    item = "sleep-study"                #   | provenance | relist | refund
    consumer = "bob"                    # purchase, retrieve, refund
    expect_error = "ContentGone"        # optional: the action must fail this way

``data_size`` produces deterministic filler bytes derived from the item id.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import gas
from .crypto import DEFAULT_CHUNK_SIZE, content_hash, get_provider
from .encoding import Address, Digest
from .errors import ConfigError, DataShareError, UnknownContract
from .escrow import Role
from .gas import GasSchedule, format_eth, load_schedule
from .netsim import DEFAULT_BLOCK_INTERVAL, World

ACTIONS = ("publish", "purchase", "retrieve", "delete", "provenance", "relist", "refund")

# externally measured figures the calibrated schedule is compared against
REFERENCE_FEES_ETH = {gas.DEPLOY: "0.020866", gas.PAY: "0.000866", gas.SETTLE: "0.001247"}
REFERENCE_CALL_TOTAL_ETH = "0.002113"

GAS_COLUMNS = ("Function", "ContractState", "Cost (Gas)", "Tx fee (ETH)", "Sim latency (s)")


@dataclass(frozen=True)
class Participant:
    id: str
    roles: tuple[str, ...]
    balance: int
    adversarial: bool = False


@dataclass(frozen=True)
class ItemSpec:
    id: str
    owner: str
    deposit: int
    data: bytes
    metadata: dict[str, str]


@dataclass(frozen=True)
class Action:
    index: int
    do: str
    params: dict[str, Any]
    expect_error: str | None = None


@dataclass
class ScenarioConfig:
    name: str
    rng_seed: int
    participants: list[Participant]
    items: dict[str, ItemSpec]
    actions: list[Action]
    block_interval_seconds: int = DEFAULT_BLOCK_INTERVAL
    gas_schedule: GasSchedule = field(default_factory=GasSchedule)
    gas_price_wei: int = gas.DEFAULT_GAS_PRICE_WEI
    chunk_size: int = DEFAULT_CHUNK_SIZE
    crypto: str = "rsa-aes"
    timeout_blocks: int | None = None
    source: Path | None = None


@dataclass
class GasRow:
    function: str
    state: str
    gas: int
    fee_wei: int
    latency: int | None

    @property
    def fee_eth(self) -> str:
        return format_eth(self.fee_wei)


@dataclass
class ScenarioReport:
    name: str
    initial_balances: dict[str, int]
    final_balances: dict[str, int]
    contract_states: dict[str, dict[str, Any]]
    gas_table: list[GasRow]
    audit_trails: dict[str, list[dict]]
    chain_ok: bool
    chain_height: int
    schedule_name: str
    outcomes: list[str] = field(default_factory=list)
    reverted_calls: list[str] = field(default_factory=list)
    provenance: list[dict[str, str]] = field(default_factory=list)
    plaintexts_match: dict[str, bool] = field(default_factory=dict)
    failed_action: int | None = None
    error: str | None = None

    @property
    def net_balances(self) -> dict[str, int]:
        return {k: self.final_balances[k] - self.initial_balances.get(k, 0) for k in self.final_balances}

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "initial_balances": self.initial_balances,
            "final_balances": self.final_balances,
            "net_balances": self.net_balances,
            "contract_states": self.contract_states,
            "gas_table": [
                {"function": r.function, "state": r.state, "gas": r.gas, "fee_eth": r.fee_eth, "latency_s": r.latency}
                for r in self.gas_table
            ],
            "audit_trails": self.audit_trails,
            "chain_ok": self.chain_ok,
            "chain_height": self.chain_height,
            "schedule": self.schedule_name,
            "outcomes": self.outcomes,
            "reverted_calls": self.reverted_calls,
            "provenance": self.provenance,
            "plaintexts_match": self.plaintexts_match,
            "failed_action": self.failed_action,
            "error": self.error,
        }


class ScenarioFailure(DataShareError):
    """A simulation error aborted the run; ``report`` holds the partial state."""

    def __init__(self, report: ScenarioReport, index: int, cause: Exception) -> None:
        self.report = report
        self.index = index
        self.cause = cause
        super().__init__(f"action {index} failed: {type(cause).__name__}: {cause}")


# --------------------------------------------------------------------------- parsing


def _require(table: Mapping, key: str, where: str, kind: type | tuple[type, ...] = object) -> Any:
    if key not in table:
        raise ConfigError("missing required field", field=f"{where}{key}")
    value = table[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"expected an integer, got {value!r}", field=f"{where}{key}")
    if kind is not object and kind is not int and not isinstance(value, kind):
        raise ConfigError(f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}", field=f"{where}{key}")
    return value


def _optional_int(table: Mapping, key: str, default: int | None, where: str = "") -> int | None:
    if key not in table:
        return default
    return _require(table, key, where, int)


def resolve_config_path(ref: str | Path) -> Path:
    path = Path(ref)
    if path.is_file():
        return path
    bundled = resources.files("datashare") / "scenarios" / f"{ref}.toml"
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"scenario {str(ref)!r} is neither a file nor a bundled scenario")


def load_config(ref: str | Path) -> ScenarioConfig:
    path = resolve_config_path(ref)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc), line=line) from exc
    return parse_config(data, base_dir=path.parent, default_name=path.stem, source=path)


def parse_config(
    data: Mapping[str, Any],
    *,
    base_dir: Path = Path("."),
    default_name: str = "scenario",
    source: Path | None = None,
) -> ScenarioConfig:
    known = {
        "name", "rng_seed", "block_interval_seconds", "gas_schedule", "gas_price_gwei", "gas_price_wei",
        "chunk_size", "crypto", "timeout_blocks", "participants", "items", "actions",
    }
    for key in data:
        if key not in known:
            raise ConfigError("unknown top-level field", field=key)
    rng_seed = _require(data, "rng_seed", "", int)
    interval = _optional_int(data, "block_interval_seconds", DEFAULT_BLOCK_INTERVAL)
    chunk_size = _optional_int(data, "chunk_size", DEFAULT_CHUNK_SIZE)
    if interval is None or interval < 1:
        raise ConfigError("must be >= 1", field="block_interval_seconds")
    if chunk_size is None or chunk_size < 1:
        raise ConfigError("must be >= 1", field="chunk_size")
    if "gas_price_wei" in data:
        price = _require(data, "gas_price_wei", "", int)
    else:
        price = _optional_int(data, "gas_price_gwei", 25) * gas.WEI_PER_GWEI
    crypto = data.get("crypto", "rsa-aes")
    try:
        get_provider(crypto)
    except ValueError as exc:
        raise ConfigError(str(exc), field="crypto") from None

    schedule_ref = data.get("gas_schedule", "default")
    local = base_dir / str(schedule_ref)
    schedule = load_schedule(local if local.is_file() else schedule_ref)

    participants = []
    seen: set[str] = set()
    for i, p in enumerate(_require(data, "participants", "", list)):
        where = f"participants[{i}]."
        pid = _require(p, "id", where, str)
        if pid in seen:
            raise ConfigError(f"duplicate participant {pid!r}", field=f"{where}id")
        seen.add(pid)
        roles = p.get("roles", [p["role"]] if "role" in p else None)
        if not roles:
            raise ConfigError("missing required field", field=f"{where}role")
        for role in roles:
            if role not in (Role.OWNER.value, Role.CONSUMER.value):
                raise ConfigError(f"unknown role {role!r}", field=f"{where}role")
        balance = _optional_int(p, "balance", 0, where)
        if balance < 0:
            raise ConfigError("balance must be non-negative", field=f"{where}balance")
        participants.append(Participant(pid, tuple(roles), balance, bool(p.get("adversarial", False))))

    items: dict[str, ItemSpec] = {}
    for i, it in enumerate(data.get("items", [])):
        where = f"items[{i}]."
        iid = _require(it, "id", where, str)
        owner = _require(it, "owner", where, str)
        if owner not in seen:
            raise ConfigError(f"unknown participant {owner!r}", field=f"{where}owner")
        deposit = _require(it, "deposit", where, int)
        sources = [k for k in ("data_hex", "data_text", "data_file", "data_size") if k in it]
        if len(sources) != 1:
            raise ConfigError("give exactly one of data_hex, data_text, data_file, data_size", field=f"{where}data_hex")
        src = sources[0]
        try:
            if src == "data_hex":
                payload = bytes.fromhex(it["data_hex"])
            elif src == "data_text":
                payload = str(it["data_text"]).encode("utf-8")
            elif src == "data_file":
                payload = (base_dir / it["data_file"]).read_bytes()
            else:
                payload = filler_bytes(iid, _require(it, "data_size", where, int))
        except (ValueError, OSError) as exc:
            raise ConfigError(str(exc), field=f"{where}{src}") from None
        metadata = it.get("metadata", {})
        if not isinstance(metadata, Mapping):
            raise ConfigError("metadata must be a table", field=f"{where}metadata")
        items[iid] = ItemSpec(iid, owner, deposit, payload, {str(k): str(v) for k, v in metadata.items()})

    actions = []
    for i, act in enumerate(_require(data, "actions", "", list)):
        where = f"actions[{i}]."
        do = _require(act, "do", where, str)
        if do not in ACTIONS:
            raise ConfigError(f"unknown action {do!r}; choose from {', '.join(ACTIONS)}", field=f"{where}do")
        params = {k: v for k, v in act.items() if k not in ("do", "expect_error")}
        needs = {
            "publish": ("item",),
            "purchase": ("item", "consumer"),
            "retrieve": ("item", "consumer"),
            "delete": ("item",),
            "provenance": ("researcher", "research_id"),
            "relist": ("item", "deposit"),
            "refund": ("item", "consumer"),
        }[do]
        for key in needs:
            _require(params, key, where)
        if "item" in params and params["item"] not in items:
            raise ConfigError(f"unknown item {params['item']!r}", field=f"{where}item")
        for key in ("consumer", "researcher"):
            if key in params and params[key] not in seen:
                raise ConfigError(f"unknown participant {params[key]!r}", field=f"{where}{key}")
        actions.append(Action(i, do, params, act.get("expect_error")))

    return ScenarioConfig(
        name=str(data.get("name", default_name)),
        rng_seed=rng_seed,
        participants=participants,
        items=items,
        actions=actions,
        block_interval_seconds=interval,
        gas_schedule=schedule,
        gas_price_wei=price,
        chunk_size=chunk_size,
        crypto=crypto,
        timeout_blocks=_optional_int(data, "timeout_blocks", None),
        source=source,
    )


def filler_bytes(label: str, size: int) -> bytes:
    if size < 0:
        raise ValueError("data_size must be non-negative")
    return hashlib.shake_256(b"datashare/filler/" + label.encode("utf-8")).digest(size) if size else b""


# --------------------------------------------------------------------------- running


def build_world(config: ScenarioConfig) -> World:
    world = World(
        seed=config.rng_seed,
        block_interval=config.block_interval_seconds,
        provider=get_provider(config.crypto),
        schedule=config.gas_schedule,
        gas_price_wei=config.gas_price_wei,
        chunk_size=config.chunk_size,
        timeout_blocks=config.timeout_blocks,
    )
    for p in config.participants:
        world.add_node(p.id, p.roles, p.balance, adversarial=p.adversarial)
    world.run_to_quiescence()
    return world


def _execute(world: World, config: ScenarioConfig, action: Action, item_ids: dict[str, Digest]) -> str:
    params = action.params
    if action.do == "publish":
        spec = config.items[params["item"]]
        item_ids[spec.id] = world.publish_data(spec.owner, spec.data, spec.metadata, spec.deposit)
        return f"published {spec.id} as {item_ids[spec.id].hex()[:16]}"
    item_id = item_ids.get(params.get("item", ""))
    if "item" in params and item_id is None:
        raise ConfigError(f"item {params['item']!r} used before it was published", field=f"actions[{action.index}].item")
    if action.do == "purchase":
        contract = world.purchase(params["consumer"], item_id)
        return f"{params['consumer']} bought {params['item']} via {contract.addr}"
    if action.do == "retrieve":
        plaintext = world.retrieve_and_confirm(params["consumer"], item_id)
        return f"{params['consumer']} received {len(plaintext)} bytes of {params['item']}"
    if action.do == "delete":
        owner = config.items[params["item"]].owner
        receipt = world.delete_item(owner, item_id)
        return f"{owner} deleted {params['item']} ({receipt.deleted_chunk_count} chunks)"
    if action.do == "provenance":
        record = world.commit_provenance(params["researcher"], str(params["research_id"]), params.get("metadata", {}))
        return f"provenance {record.research_id} committed in tx {record.tx_id.hex()[:16]}"
    if action.do == "relist":
        owner = config.items[params["item"]].owner
        addr = world.relist(owner, item_id, int(params["deposit"]))
        return f"{owner} relisted {params['item']} via {addr}"
    if action.do == "refund":
        consumer = world.node(params["consumer"])
        world.env.timeout_refund(world.contract_for(item_id, consumer.addr), consumer.addr)
        return f"{params['consumer']} reclaimed stakes on {params['item']}"
    raise AssertionError(action.do)  # pragma: no cover


def collect_report(world: World, config: ScenarioConfig) -> ScenarioReport:
    id_by_addr = {n.addr: n.node_id for n in world.nodes.values()}

    def name(addr: Address | None) -> str | None:
        return None if addr is None else id_by_addr.get(addr, str(addr))

    contracts = {
        str(c.addr): {
            "item": c.item_id.hex(),
            "owner": name(c.owner),
            "consumer": name(c.consumer),
            "state": c.state.value,
            "deposit": c.deposit,
            "price": c.price,
            "balance": c.balance,
        }
        for c in world.env.contracts.values()
    }
    rows = [
        GasRow(
            call.function_name,
            call.state_after,
            call.receipt.gas_used,
            call.receipt.fee_wei,
            world.call_latency(call.tx_id, call.submitted_height),
        )
        for call in world.env.calls
        if not call.receipt.reverted
    ]
    trails = {addr: [e.to_dict() for e in world.env.audit_trail(Address.parse(addr))] for addr in contracts}
    if world.env.provenance:
        trails[str(world.env.provenance_addr)] = [e.to_dict() for e in world.env.audit_trail(world.env.provenance_addr)]
    matches = {}
    for spec in config.items.values():
        for node in world.nodes.values():
            got = node.received.get(content_hash(spec.data))
            if got is not None:
                matches[f"{spec.id}@{node.node_id}"] = got == spec.data
    return ScenarioReport(
        name=config.name,
        initial_balances={p.id: p.balance for p in config.participants},
        final_balances={nid: world.balance(nid) for nid in world.nodes},
        contract_states=contracts,
        gas_table=rows,
        audit_trails=trails,
        chain_ok=world.chain.verify().ok,
        chain_height=world.chain.height,
        schedule_name=config.gas_schedule.name,
        reverted_calls=[f"{c.function_name}: {c.error}" for c in world.env.calls if c.receipt.reverted],
        provenance=[{"research_id": r.research_id, "researcher": name(r.researcher), "tx": r.tx_id.hex()} for r in world.env.provenance],
        plaintexts_match=matches,
    )


def execute_scenario(config: ScenarioConfig) -> tuple[World, ScenarioReport]:
    """Run every action; raise :class:`ScenarioFailure` carrying a partial report on error."""
    world = build_world(config)
    item_ids: dict[str, Digest] = {}
    outcomes: list[str] = []
    for action in config.actions:
        try:
            outcome = _execute(world, config, action, item_ids)
            if action.expect_error:
                raise ConfigError(
                    f"expected {action.expect_error} but the action succeeded", field=f"actions[{action.index}].expect_error"
                )
        except DataShareError as exc:
            if isinstance(exc, ConfigError) or type(exc).__name__ != action.expect_error:
                world.run_to_quiescence()
                report = collect_report(world, config)
                report.outcomes = outcomes
                report.failed_action = action.index
                report.error = f"action {action.index} ({action.do}): {type(exc).__name__}: {exc}"
                if isinstance(exc, ConfigError):
                    raise
                raise ScenarioFailure(report, action.index, exc) from exc
            outcome = f"{action.do} failed as expected: {type(exc).__name__}"
        outcomes.append(f"[{action.index}] {outcome}")
        world.run_to_quiescence()
    report = collect_report(world, config)
    report.outcomes = outcomes
    return world, report


def run_scenario(config_path: str | Path, *, report_dir: str | Path | None = None) -> ScenarioReport:
    config = load_config(config_path)
    try:
        world, report = execute_scenario(config)
    except ScenarioFailure as failure:
        if report_dir is not None:
            write_report(failure.report, None, report_dir)
        raise
    if report_dir is not None:
        write_report(report, world, report_dir)
    return report


def write_report(report: ScenarioReport, world: World | None, report_dir: str | Path) -> Path:
    out = Path(report_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{report.name}.report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    (out / f"{report.name}.gas.txt").write_text(emit_gas_report(report), encoding="utf-8")
    if world is not None:
        world.export_log(out / f"{report.name}.events.jsonl")
        world.chain.export(out / f"{report.name}.chain")
    return out


# --------------------------------------------------------------------------- rendering


def emit_gas_report(report: ScenarioReport) -> str:
    cells = [list(GAS_COLUMNS)]
    for row in report.gas_table:
        cells.append([row.function, row.state, str(row.gas), row.fee_eth, "-" if row.latency is None else str(row.latency)])
    widths = [max(len(r[i]) for r in cells) for i in range(len(GAS_COLUMNS))]

    def fmt(row: list[str]) -> str:
        return " | ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))).rstrip()

    lines = [fmt(cells[0]), "-+-".join("-" * w for w in widths)]
    lines.extend(fmt(r) for r in cells[1:])
    calls = [r for r in report.gas_table if r.function != gas.DEPLOY]
    if calls:
        total = sum(r.fee_wei for r in calls)
        calibrated = report.schedule_name == "table1"
        suffix = f" (reference measurement: {REFERENCE_CALL_TOTAL_ETH} ETH [1])" if calibrated else ""
        lines.append("")
        lines.append(f"Function-call total excluding deploy: {format_eth(total)} ETH{suffix}")
        if calibrated:
            lines.append(
                f"[1] The reference measurement lists {REFERENCE_FEES_ETH[gas.SETTLE]} ETH for {gas.SETTLE}, "
                f"but its own 47611 gas x 25 Gwei is {format_eth(47611 * 25 * gas.WEI_PER_GWEI)} ETH; "
                f"its call total {REFERENCE_CALL_TOTAL_ETH} ETH follows the listed fee. Fees here are gas x price."
            )
    return "\n".join(lines) + "\n"


def format_event(event: Mapping[str, Any]) -> str:
    amounts = ",".join(f"{k}={v}" for k, v in event["amounts"].items()) or "-"
    return (
        f"#{event['seq']:<4} block {event['block']:<4} {event['event']:<14} {event['function']:<14} "
        f"actor={event['actor']} state={event['state']} {amounts}"
    )


def audit_lines(report: ScenarioReport, contract_addr: str) -> list[str]:
    try:
        key = str(Address.parse(contract_addr))
    except ValueError:
        raise UnknownContract(f"{contract_addr!r} is not an address") from None
    if key not in report.audit_trails:
        raise UnknownContract(f"no contract at {key}")
    return [format_event(e) for e in report.audit_trails[key]]


def render_summary(report: ScenarioReport) -> str:
    lines = [f"scenario {report.name}"]
    lines.extend(f"  {o}" for o in report.outcomes)
    if report.error:
        lines.append(f"  ERROR {report.error}")
    lines.append("balances (final / net):")
    for nid, bal in report.final_balances.items():
        lines.append(f"  {nid:<12} {bal:>16} {report.net_balances[nid]:>+16}")
    lines.append("contracts:")
    for addr, info in report.contract_states.items():
        lines.append(
            f"  {addr} {info['state']:<8} owner={info['owner']} consumer={info['consumer']} "
            f"deposit={info['deposit']} price={info['price']} balance={info['balance']}"
        )
    for key, ok in report.plaintexts_match.items():
        lines.append(f"delivery {key}: {'plaintext matches' if ok else 'PLAINTEXT MISMATCH'}")
    lines.append(f"chain: height {report.chain_height}, verification {'ok' if report.chain_ok else 'FAILED'}")
    lines.append("")
    lines.append(emit_gas_report(report).rstrip("\n"))
    return "\n".join(lines) + "\n"
