"""Contract engine: participant registry, double-deposit escrow, provenance and gas.

The escrow lifecycle for one item and one buyer::

    deploy (owner stakes e_d, price e_p = e_d / 2)     Created   r_b = e_d
    consumerPay (consumer pays 2 * e_p)                Locked    r_b = 2 * e_d
    paymentSettle (consumer confirms delivery)         Inactive  r_b = 0
        consumer is refunded e_p, owner receives e_d + e_p

The contract holds custody of every staked token. Each call is atomic: any
error restores balances, contract state, events and staged chain writes.
Gas is metered per call and reported; it is accounted in Wei and never
deducted from token balances.
"""

from __future__ import annotations

import json
import random
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator, Mapping

from . import gas
from .chain import ACCESS, CONTRACTS, PROVENANCE, Chain
from .crypto import SymmetricKey, WrappedKey, unwrap_key, wrap_key
from .encoding import Address, Digest, u64
from .errors import (
    ContractError,
    DataShareError,
    DuplicateRegistration,
    FeatureDisabled,
    InsufficientFunds,
    OddDeposit,
    SelfDealing,
    Unauthorized,
    UnknownContract,
    UnknownRecipientKey,
    WrongState,
)
from .gas import GasReceipt, GasSchedule, Op


class Role(str, Enum):
    OWNER = "owner"
    CONSUMER = "consumer"


class State(str, Enum):
    CREATED = "Created"
    LOCKED = "Locked"
    INACTIVE = "Inactive"


@dataclass
class Registry:
    owners: set[Address] = field(default_factory=set)
    consumers: set[Address] = field(default_factory=set)
    contracts: set[Address] = field(default_factory=set)
    pubkeys: dict[Address, bytes] = field(default_factory=dict)

    def is_registered(self, addr: Address) -> bool:
        return addr in self.owners or addr in self.consumers

    def public_key(self, addr: Address) -> bytes:
        try:
            return self.pubkeys[addr]
        except KeyError:
            raise UnknownRecipientKey(f"no public key published for {addr}") from None


@dataclass(frozen=True)
class Event:
    seq: int
    contract_addr: Address
    name: str
    function_name: str
    actor: Address
    state_after: str
    amounts: tuple[tuple[str, int], ...]
    block_height: int
    detail: tuple[tuple[str, str], ...] = ()

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "contract": str(self.contract_addr),
            "event": self.name,
            "function": self.function_name,
            "actor": str(self.actor),
            "state": self.state_after,
            "amounts": dict(self.amounts),
            "block": self.block_height,
            "detail": dict(self.detail),
        }


@dataclass
class EscrowContract:
    addr: Address
    owner: Address
    item_id: Digest
    deposit: int
    price: int
    balance: int
    state: State = State.CREATED
    consumer: Address | None = None
    events: list[Event] = field(default_factory=list)
    key_custody: WrappedKey | None = None
    locked_height: int | None = None
    access_tx: Digest | None = None


@dataclass(frozen=True)
class ProvenanceRecord:
    research_id: str
    metadata: tuple[tuple[str, str], ...]
    researcher: Address
    tx_id: Digest


@dataclass(frozen=True)
class CallRecord:
    """One metered contract call, successful or reverted."""

    function_name: str
    contract_addr: Address | None
    caller: Address
    state_after: str
    receipt: GasReceipt
    submitted_height: int
    tx_id: Digest | None
    error: str | None = None


# primitive traces per function; settle differs from pay only in its second transfer
TRACES: dict[str, tuple[Op, ...]] = {
    gas.DEPLOY: (Op.DEPLOY,) + (Op.STATE_WRITE,) * 6 + (Op.VALUE_TRANSFER, Op.EVENT_EMIT),
    gas.PAY: (Op.STATE_WRITE,) * 3 + (Op.VALUE_TRANSFER,) + (Op.EVENT_EMIT,) * 2,
    gas.SETTLE: (Op.STATE_WRITE,) * 3 + (Op.VALUE_TRANSFER,) * 2 + (Op.EVENT_EMIT,) * 2,
    gas.PROVENANCE: (Op.STATE_WRITE, Op.EVENT_EMIT),
    gas.REFUND: (Op.STATE_WRITE,) * 3 + (Op.VALUE_TRANSFER,) * 2 + (Op.EVENT_EMIT,),
}

CONTRACT_FUNCTIONS = (gas.DEPLOY, gas.PAY, gas.SETTLE)


class ContractEnv:
    """Executes contract calls against a registry, token balances and a chain.

    ``chain.system`` doubles as the engine key: it signs registry and event
    log entries and holds escrowed item keys until a sale releases them.
    """

    def __init__(
        self,
        chain: Chain,
        *,
        schedule: GasSchedule | None = None,
        gas_price_wei: int = gas.DEFAULT_GAS_PRICE_WEI,
        rng: random.Random | None = None,
        timeout_blocks: int | None = None,
    ) -> None:
        self.chain = chain
        self.engine = chain.system
        self.schedule = schedule or GasSchedule()
        self.gas_price_wei = gas_price_wei
        self.rng = rng or random.Random(0)
        self.timeout_blocks = timeout_blocks
        self.registry = Registry()
        self.balances: dict[Address, int] = {}
        self.contracts: dict[Address, EscrowContract] = {}
        self.events: list[Event] = []
        self.calls: list[CallRecord] = []
        self.provenance: list[ProvenanceRecord] = []
        self.provenance_addr = Address.derive(b"datashare/provenance", self.engine.owner_addr)
        self.registry.contracts.add(self.provenance_addr)
        self._provenance_events: list[Event] = []
        self._deploy_nonce: dict[Address, int] = {}
        self._seq = 0

    # ------------------------------------------------------------------ accounts

    def mint(self, addr: Address, amount: int) -> None:
        """Genesis allocation; the only way tokens enter the system."""
        if amount < 0:
            raise ValueError("cannot mint a negative amount")
        self.balances[addr] = self.balances.get(addr, 0) + amount

    def balance_of(self, addr: Address) -> int:
        return self.balances.get(addr, 0)

    def total_supply(self) -> int:
        return sum(self.balances.values()) + sum(c.balance for c in self.contracts.values())

    def register(self, addr: Address, role: Role | str, public_key: bytes) -> None:
        role = Role(role)
        if Address.derive(public_key) != addr:
            raise ValueError(f"public key does not belong to {addr}")
        if addr in self.registry.contracts:
            raise DuplicateRegistration(f"{addr} is a contract address")
        members = self.registry.owners if role is Role.OWNER else self.registry.consumers
        if addr in members:
            raise DuplicateRegistration(f"{addr} already registered as {role.value}")
        members.add(addr)
        if addr not in self.registry.pubkeys:
            self.registry.pubkeys[addr] = public_key
            if not self.chain.is_publisher(addr):
                self.chain.admit(public_key)
        self.balances.setdefault(addr, 0)

    def contract(self, addr: Address) -> EscrowContract:
        try:
            return self.contracts[addr]
        except KeyError:
            raise UnknownContract(f"no contract at {addr}") from None

    # ------------------------------------------------------------------ plumbing

    @contextmanager
    def _atomic(self, target: Address | None = None) -> Iterator[None]:
        # a call mutates at most its target contract; contracts it creates are dropped on rollback
        balances = dict(self.balances)
        known = set(self.contracts)
        saved = self.contracts.get(target) if target is not None else None
        snapshot = replace(saved, events=list(saved.events)) if saved is not None else None
        registry_contracts = set(self.registry.contracts)
        nonces = dict(self._deploy_nonce)
        n_events, n_pending, n_prov = len(self.events), len(self.chain.pending), len(self.provenance)
        n_prov_events, seq = len(self._provenance_events), self._seq
        try:
            yield
        except BaseException:
            self.balances = balances
            for addr in [a for a in self.contracts if a not in known]:
                del self.contracts[addr]
            if saved is not None and snapshot is not None:
                saved.__dict__.update(snapshot.__dict__)
            self.registry.contracts = registry_contracts
            self._deploy_nonce = nonces
            del self.events[n_events:]
            del self.chain.pending[n_pending:]
            del self.provenance[n_prov:]
            del self._provenance_events[n_prov_events:]
            self._seq = seq
            raise

    def _emit(
        self,
        contract: EscrowContract | None,
        name: str,
        function_name: str,
        actor: Address,
        amounts: Mapping[str, int] | None = None,
        detail: Mapping[str, str] | None = None,
    ) -> Event:
        self._seq += 1
        event = Event(
            seq=self._seq,
            contract_addr=contract.addr if contract else self.provenance_addr,
            name=name,
            function_name=function_name,
            actor=actor,
            state_after=contract.state.value if contract else "-",
            amounts=tuple(sorted((amounts or {}).items())),
            block_height=self.chain.height + 1,
            detail=tuple(sorted((detail or {}).items())),
        )
        (contract.events if contract else self._provenance_events).append(event)
        self.events.append(event)
        return event

    def _log_tx(self, contract_addr: Address, function_name: str, events: list[Event]) -> Digest:
        payload = json.dumps([e.to_dict() for e in events], sort_keys=True, separators=(",", ":")).encode()
        tx = self.chain.publish_item(CONTRACTS, str(contract_addr), payload, self.engine, {"function": function_name})
        return tx.tx_id

    def _metered(self, function_name: str, contract_addr: Address | None, caller: Address, body) -> object:
        """Run ``body`` atomically, meter it, log its events on chain and record a receipt."""
        submitted = self.chain.height
        first_event = len(self.events)
        try:
            with self._atomic(contract_addr):
                result = body()
                gas_used = gas.meter_gas(TRACES[function_name], self.schedule, function_name)
                addr = contract_addr or (result.addr if isinstance(result, EscrowContract) else self.provenance_addr)
                tx_id = self._log_tx(addr, function_name, self.events[first_event:])
        except DataShareError as exc:
            receipt = gas.fee_of(self.schedule.call_base, self.gas_price_wei, function_name)
            self.calls.append(
                CallRecord(
                    function_name,
                    contract_addr,
                    caller,
                    self.contracts[contract_addr].state.value if contract_addr in self.contracts else "-",
                    replace(receipt, reverted=True),
                    submitted,
                    None,
                    f"{type(exc).__name__}: {exc}",
                )
            )
            raise
        state = self.contracts[addr].state.value if addr in self.contracts else "-"
        self.calls.append(
            CallRecord(
                function_name,
                addr,
                caller,
                state,
                gas.fee_of(gas_used, self.gas_price_wei, function_name),
                submitted,
                tx_id,
            )
        )
        return result

    # modifiers
    def _only_state(self, contract: EscrowContract, state: State, function_name: str) -> None:
        if contract.state is not state:
            raise WrongState(f"{function_name} requires {state.value}, contract is {contract.state.value}")

    def _only_role(self, addr: Address, role: Role) -> None:
        members = self.registry.owners if role is Role.OWNER else self.registry.consumers
        if addr not in members:
            raise Unauthorized(f"{addr} is not a registered {role.value}")

    # ------------------------------------------------------------------ escrow

    def deploy_contract(
        self,
        owner: Address,
        deposit: int,
        item_id: Digest,
        *,
        key_custody: WrappedKey | None = None,
    ) -> EscrowContract:
        """Create a contract in Created with the owner's deposit held in custody.

        ``key_custody`` is the item's symmetric key wrapped to the engine; it
        is re-wrapped for the buyer when a payment locks the contract.
        """

        def body() -> EscrowContract:
            self._only_role(owner, Role.OWNER)
            if deposit <= 0 or deposit % 2:
                raise OddDeposit(f"deposit must be a positive even amount, got {deposit}")
            if self.balance_of(owner) < deposit:
                raise InsufficientFunds(f"{owner} holds {self.balance_of(owner)}, deposit is {deposit}")
            if key_custody is not None and key_custody.item_id != item_id:
                raise ContractError("escrowed key belongs to a different item")
            nonce = self._deploy_nonce.get(owner, 0)
            addr = Address.derive(b"datashare/contract", owner, u64(nonce))
            while addr in self.registry.contracts or self.registry.is_registered(addr):
                nonce += 1
                addr = Address.derive(b"datashare/contract", owner, u64(nonce))
            self._deploy_nonce[owner] = nonce + 1
            self.balances[owner] -= deposit
            contract = EscrowContract(
                addr=addr,
                owner=owner,
                item_id=item_id,
                deposit=deposit,
                price=deposit // 2,
                balance=deposit,
                key_custody=key_custody,
            )
            self.contracts[addr] = contract
            self.registry.contracts.add(addr)
            self._emit(
                contract,
                "Deployed",
                gas.DEPLOY,
                owner,
                {"deposit": deposit, "price": contract.price, "balance": contract.balance},
                {"item": item_id.hex()},
            )
            return contract

        return self._metered(gas.DEPLOY, None, owner, body)  # type: ignore[return-value]

    def consumer_pay(self, contract_addr: Address, consumer: Address) -> EscrowContract:
        contract = self.contract(contract_addr)

        def body() -> EscrowContract:
            self._only_state(contract, State.CREATED, gas.PAY)
            if consumer == contract.owner:
                raise SelfDealing("an owner cannot buy its own item")
            self._only_role(consumer, Role.CONSUMER)
            payment = 2 * contract.price
            if self.balance_of(consumer) < payment:
                raise InsufficientFunds(f"{consumer} holds {self.balance_of(consumer)}, payment is {payment}")
            self.balances[consumer] -= payment
            contract.balance += payment
            contract.consumer = consumer
            contract.state = State.LOCKED
            contract.locked_height = self.chain.height + 1
            self._emit(contract, "Paid", gas.PAY, consumer, {"paid": payment, "balance": contract.balance})
            self._grant_access(contract, consumer)
            return contract

        return self._metered(gas.PAY, contract_addr, consumer, body)  # type: ignore[return-value]

    def _grant_access(self, contract: EscrowContract, consumer: Address) -> None:
        detail: dict[str, str] = {"consumer": str(consumer)}
        if contract.key_custody is not None:
            key = unwrap_key(contract.key_custody, self.engine.private_key, self.chain.provider)
            wrapped = wrap_key(
                key,
                self.registry.public_key(consumer),
                consumer,
                rng=self.rng,
                provider=self.chain.provider,
            )
            tx = self.chain.publish_item(
                ACCESS,
                f"{contract.item_id.hex()}/{consumer}",
                wrapped.encode(),
                self.engine,
                {"contract": str(contract.addr), "item": contract.item_id.hex(), "recipient": str(consumer)},
            )
            contract.access_tx = tx.tx_id
            detail["access_tx"] = tx.tx_id.hex()
        self._emit(contract, "AccessGranted", gas.PAY, self.engine.owner_addr, {}, detail)

    def confirm_delivery(self, contract_addr: Address, consumer: Address) -> EscrowContract:
        contract = self.contract(contract_addr)

        def body() -> EscrowContract:
            self._only_state(contract, State.LOCKED, gas.SETTLE)
            if consumer != contract.consumer:
                raise Unauthorized("only the recorded consumer may confirm delivery")
            contract.state = State.INACTIVE
            contract.balance -= contract.price
            self.balances[consumer] = self.balance_of(consumer) + contract.price
            self._emit(contract, "Confirmed", gas.SETTLE, consumer, {"refund": contract.price, "balance": contract.balance})
            payout = contract.balance
            contract.balance = 0
            self.balances[contract.owner] = self.balance_of(contract.owner) + payout
            self._emit(contract, "Settled", gas.SETTLE, consumer, {"payout": payout, "balance": 0})
            return contract

        return self._metered(gas.SETTLE, contract_addr, consumer, body)  # type: ignore[return-value]

    def timeout_refund(self, contract_addr: Address, caller: Address) -> EscrowContract:
        """Optional extension: unwind a Locked contract after ``timeout_blocks``."""
        contract = self.contract(contract_addr)

        def body() -> EscrowContract:
            if self.timeout_blocks is None:
                raise FeatureDisabled("timeout refunds are disabled")
            self._only_state(contract, State.LOCKED, gas.REFUND)
            if caller not in (contract.owner, contract.consumer):
                raise Unauthorized("only the parties may request a refund")
            assert contract.locked_height is not None and contract.consumer is not None
            if self.chain.height - contract.locked_height < self.timeout_blocks:
                raise WrongState("timeout has not elapsed")
            refund = 2 * contract.price
            self.balances[contract.consumer] += refund
            self.balances[contract.owner] += contract.deposit
            contract.balance = 0
            contract.state = State.INACTIVE
            self._emit(contract, "Refunded", gas.REFUND, caller, {"consumer_refund": refund, "owner_refund": contract.deposit, "balance": 0})
            return contract

        return self._metered(gas.REFUND, contract_addr, caller, body)  # type: ignore[return-value]

    def call(self, function_name: str, contract_addr: Address, caller: Address) -> EscrowContract:
        """Invoke a contract function by its report name on an existing contract."""
        if function_name == gas.DEPLOY:
            contract = self.contract(contract_addr)

            def body() -> EscrowContract:
                raise WrongState(f"contract {contract.addr} is already deployed")

            return self._metered(gas.DEPLOY, contract_addr, caller, body)  # type: ignore[return-value]
        if function_name == gas.PAY:
            return self.consumer_pay(contract_addr, caller)
        if function_name == gas.SETTLE:
            return self.confirm_delivery(contract_addr, caller)
        if function_name == gas.REFUND:
            return self.timeout_refund(contract_addr, caller)
        raise ValueError(f"unknown contract function {function_name!r}")

    # ------------------------------------------------------------------ annotations

    def note(
        self,
        contract_addr: Address,
        name: str,
        actor: Address,
        detail: Mapping[str, str] | None = None,
    ) -> Event:
        """Append an unmetered audit event (delivery, failed delivery, deletion)."""
        contract = self.contract(contract_addr)
        event = self._emit(contract, name, "-", actor, {}, detail)
        self._log_tx(contract_addr, name, [event])
        return event

    def record_delivery(self, contract_addr: Address, consumer: Address, item_id: Digest) -> Event:
        contract = self.contract(contract_addr)
        self._only_state(contract, State.LOCKED, "recordDelivery")
        if consumer != contract.consumer:
            raise Unauthorized("only the recorded consumer may acknowledge delivery")
        if item_id != contract.item_id:
            raise ContractError("delivered content does not match the contract item")
        return self.note(contract_addr, "Delivered", consumer, {"item": item_id.hex()})

    # ------------------------------------------------------------------ provenance

    def commit_provenance(
        self, researcher: Address, research_id: str, metadata: Mapping[str, str] | None = None
    ) -> ProvenanceRecord:
        meta = tuple(sorted((str(k), str(v)) for k, v in (metadata or {}).items()))

        def body() -> ProvenanceRecord:
            if not self.registry.is_registered(researcher):
                raise Unauthorized(f"{researcher} is not registered")
            payload = json.dumps(
                {"research_id": research_id, "researcher": str(researcher), "metadata": dict(meta)},
                sort_keys=True,
                separators=(",", ":"),
            ).encode()
            tx = self.chain.publish_item(
                PROVENANCE, research_id, payload, self.engine, meta + (("researcher", str(researcher)),)
            )
            record = ProvenanceRecord(research_id, meta, researcher, tx.tx_id)
            self.provenance.append(record)
            self._emit(None, "ProvenanceCommitted", gas.PROVENANCE, researcher, {}, {"research_id": research_id, "tx": tx.tx_id.hex()})
            return record

        return self._metered(gas.PROVENANCE, self.provenance_addr, researcher, body)  # type: ignore[return-value]

    # ------------------------------------------------------------------ audit

    def audit_trail(self, contract_addr: Address) -> list[Event]:
        if contract_addr == self.provenance_addr:
            return list(self._provenance_events)
        return list(self.contract(contract_addr).events)


def fresh_symmetric_key(item_id: Digest, rng: random.Random) -> SymmetricKey:
    return SymmetricKey(rng.randbytes(32), item_id)
