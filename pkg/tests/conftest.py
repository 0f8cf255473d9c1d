import random

import pytest
from hypothesis import HealthCheck, settings

from datashare.chain import Chain
from datashare.crypto import PROVIDERS, generate_keypair
from datashare.encoding import sha256
from datashare.escrow import ContractEnv, Role
from datashare.gas import GasSchedule

settings.register_profile(
    "default",
    max_examples=100,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

TOY = PROVIDERS["toy"]
RSA = PROVIDERS["rsa-aes"]


def seed_for(label: str) -> bytes:
    return bytes(sha256(b"test-seed/", label.encode()))


def keypair(label: str, provider=TOY):
    return generate_keypair(seed_for(label), provider)


@pytest.fixture
def toy():
    return TOY


@pytest.fixture
def system_key():
    return keypair("system")


@pytest.fixture
def chain(system_key):
    return Chain(system_key, provider=TOY)


class Parties:
    """An engine with a registered owner, consumer and an unregistered outsider."""

    def __init__(self, schedule: GasSchedule | None = None, balance: int = 10_000, timeout_blocks=None):
        self.chain = Chain(keypair("system"), provider=TOY)
        self.env = ContractEnv(self.chain, schedule=schedule, rng=random.Random(1), timeout_blocks=timeout_blocks)
        self.owner = keypair("owner")
        self.consumer = keypair("consumer")
        self.outsider = keypair("outsider")
        self.env.register(self.owner.owner_addr, Role.OWNER, self.owner.public_key)
        self.env.register(self.consumer.owner_addr, Role.CONSUMER, self.consumer.public_key)
        self.env.mint(self.owner.owner_addr, balance)
        self.env.mint(self.consumer.owner_addr, balance)
        self.env.mint(self.outsider.owner_addr, balance)
        self.chain.seal_pending()

    def addr(self, who: str):
        return getattr(self, who).owner_addr


@pytest.fixture
def parties():
    return Parties()


ACTORS = tuple(keypair(f"actor-{i}") for i in range(4))


def random_sequence_env(rng: random.Random, timeout_blocks=None):
    """Fresh engine with four actors of random roles and balances."""
    chain = Chain(keypair("system"), provider=TOY)
    env = ContractEnv(chain, rng=random.Random(rng.random()), timeout_blocks=timeout_blocks)
    for kp in ACTORS:
        roles = rng.choice([(Role.OWNER,), (Role.CONSUMER,), (Role.OWNER, Role.CONSUMER), ()])
        for role in roles:
            env.register(kp.owner_addr, role, kp.public_key)
        env.mint(kp.owner_addr, rng.randrange(0, 5_000))
    chain.seal_pending()
    return env


def random_operation(env: ContractEnv, rng: random.Random) -> str:
    """Apply one random contract operation and return its outcome; contract errors are expected."""
    from datashare import gas
    from datashare.crypto import content_hash
    from datashare.errors import DataShareError

    actor = rng.choice(ACTORS).owner_addr
    contracts = sorted(env.contracts)
    op = rng.choice(["deploy", "pay", "settle", "redeploy", "refund", "provenance", "seal"])
    try:
        if op == "deploy" or not contracts:
            deposit = rng.choice([rng.randrange(-4, 4_000), 2 * rng.randrange(1, 2_000)])
            env.deploy_contract(actor, deposit, content_hash(rng.randbytes(8)))
            return "deploy"
        target = rng.choice(contracts)
        if op == "pay":
            env.consumer_pay(target, actor)
        elif op == "settle":
            who = env.contracts[target].consumer if rng.random() < 0.6 and env.contracts[target].consumer else actor
            env.confirm_delivery(target, who)
        elif op == "redeploy":
            env.call(gas.DEPLOY, target, actor)
        elif op == "refund":
            env.timeout_refund(target, actor)
        elif op == "provenance":
            env.commit_provenance(actor, f"study-{rng.randrange(5)}")
        else:
            env.chain.seal_pending(env.chain.tip.timestamp + 15)
        return op
    except DataShareError as exc:
        return f"{op}!{type(exc).__name__}"


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE_RESULTS: dict[str, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    ACCEPTANCE_RESULTS[number] = ("PASS" if report.passed else "FAIL", title)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS, key=int):
        verdict, title = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"[{verdict}] criterion {number}: {title}")
