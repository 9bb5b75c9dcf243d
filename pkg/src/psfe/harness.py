"""Adversary harness: wire-level attacks, the differencing demo, and the
empirical privacy-ratio experiment.

Attacks run against real TCP services through an interposing proxy that
sees exactly what a network attacker sees: framed ciphertext bytes. A
strategy may pass frames through untouched, flip bytes in a chosen payload
field, or replace a frame of a given kind with a previously captured one.
Every non-passthrough strategy must end in the victim rejecting with the
expected error class; the proxy keeps a transcript for the verdict.

The statistical experiments (differencing demo, privacy ratio) drive the
same full message path over the in-process transport, where tens of
thousands of protocol runs fit in seconds.
"""

from __future__ import annotations

import logging
import math
import random
import statistics
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .clients import AnalystSession, CuratorSession
from .crypto import gen_party_keys, hash_bytes
from .dataset import PlainDataset
from .fixtures import (
    clinical_fixture,
    cohort_fixture,
    neighbouring_pair,
    plaintext_aggregate,
)
from .services import AnalystInfo, CspConfig, CspService, MaConfig, MaService
from .transport import FrameServer, LocalTransport, TcpTransport
from .wire import FnKind, MessageKind, field_spans

log = logging.getLogger("psfe.harness")


# ---------------------------------------------------------------------------
# interposed channels


class Strategy:
    """Byte-transparent baseline; subclasses mutate or replay frames."""

    name = "passthrough"

    def process(self, body: bytes, rng: random.Random, transcript: list[str]) -> list[bytes]:
        return [body]


class TamperField(Strategy):
    """Flip one random byte inside a payload field of the target kind."""

    def __init__(self, target_kind: MessageKind, field_index: int):
        self.target_kind = target_kind
        self.field_index = field_index
        self.name = f"tamper(kind={int(target_kind)},field={field_index})"

    def process(self, body, rng, transcript):
        if body[0] != self.target_kind:
            return [body]
        start, end = field_spans(body)[self.field_index]
        position = rng.randrange(start, end)
        mask = rng.randrange(1, 256)
        mutated = bytearray(body)
        mutated[position] ^= mask
        transcript.append(
            f"flipped byte {position} of kind {body[0]} with mask {mask:#04x}"
        )
        return [bytes(mutated)]


class ReplayOld(Strategy):
    """Capture the first frame of the target kind; substitute it for later ones."""

    def __init__(self, target_kind: MessageKind):
        self.target_kind = target_kind
        self.name = f"replay(kind={int(target_kind)})"
        self._captured: bytes | None = None

    def process(self, body, rng, transcript):
        if body[0] != self.target_kind:
            return [body]
        if self._captured is None:
            self._captured = body
            transcript.append(f"captured kind {body[0]} frame ({len(body)} bytes)")
            return [body]
        transcript.append(f"substituted old kind {body[0]} frame")
        return [self._captured]


class InterposedChannel:
    """TCP proxy standing between a sender and one listener."""

    def __init__(
        self,
        upstream_address: str,
        strategy: Strategy,
        rng: random.Random,
        max_delay_s: float = 0.005,
    ):
        self.upstream_address = upstream_address
        self.strategy = strategy
        self.transcript: list[str] = []
        self._rng = rng
        self._max_delay_s = max_delay_s
        self._tcp = TcpTransport()
        self._server = FrameServer(self._on_frame)

    @property
    def address(self) -> str:
        return self._server.address

    def start(self) -> "InterposedChannel":
        self._server.start()
        return self

    def stop(self) -> None:
        self._server.stop()

    def _on_frame(self, body: bytes) -> list[bytes]:
        if self._max_delay_s:
            time.sleep(self._rng.uniform(0.0, self._max_delay_s))
        for out in self.strategy.process(body, self._rng, self.transcript):
            self._tcp.send(self.upstream_address, out)
        return []


# ---------------------------------------------------------------------------
# deployments


@dataclass
class Deployment:
    """One complete party set, wired over TCP or the in-process transport."""

    curator: CuratorSession
    analysts: list[AnalystSession]
    csp: CspService
    ma: MaService
    servers: list[FrameServer] = field(default_factory=list)
    proxies: list[InterposedChannel] = field(default_factory=list)

    @property
    def analyst(self) -> AnalystSession:
        return self.analysts[0]

    def close(self) -> None:
        for server in self.servers:
            server.stop()
        for proxy in self.proxies:
            proxy.stop()


def build_deployment(
    ds: PlainDataset | None = None,
    *,
    tcp: bool = False,
    n_analysts: int = 1,
    epsilon: float = 1.0,
    budget_cap: float | None = None,
    noise_enabled: bool = True,
    seed: int | None = None,
    window_ms: int = 30_000,
    timeout_s: float = 10.0,
    analyst_channel: Strategy | None = None,
    csp_to_ma_channel: Strategy | None = None,
    run_setup: bool = True,
) -> Deployment:
    """Stand up curator, storage server, authority and analysts.

    Channel strategies interpose the analyst-inbound leg or the storage
    server to authority leg; they force TCP since they proxy real sockets.
    """
    rng = random.Random(seed) if seed is not None else random.SystemRandom()
    if analyst_channel or csp_to_ma_channel:
        tcp = True

    curator_enc, curator_sig = gen_party_keys(rng)
    csp_enc, csp_sig = gen_party_keys(rng)
    ma_enc, ma_sig = gen_party_keys(rng)
    analyst_keys = [gen_party_keys(rng) for _ in range(n_analysts)]

    servers: list[FrameServer] = []
    proxies: list[InterposedChannel] = []

    class _Late:
        def __init__(self):
            self.target = None

        def __call__(self, body: bytes) -> list[bytes]:
            return self.target(body) if self.target else []

    if tcp:
        transport = TcpTransport()
        csp_slot, ma_slot = _Late(), _Late()
        csp_server = FrameServer(csp_slot)
        ma_server = FrameServer(ma_slot)
        analyst_slots = [_Late() for _ in range(n_analysts)]
        analyst_servers = [FrameServer(slot) for slot in analyst_slots]
        servers = [csp_server, ma_server, *analyst_servers]
        csp_address = csp_server.address
        ma_address = ma_server.address
        analyst_addresses = [s.address for s in analyst_servers]
        if analyst_channel is not None:
            proxy = InterposedChannel(
                analyst_addresses[0], analyst_channel, random.Random(rng.random())
            )
            proxies.append(proxy)
            analyst_addresses = [proxy.address, *analyst_addresses[1:]]
        ma_address_for_csp = ma_address
        if csp_to_ma_channel is not None:
            proxy = InterposedChannel(
                ma_address, csp_to_ma_channel, random.Random(rng.random())
            )
            proxies.append(proxy)
            ma_address_for_csp = proxy.address
    else:
        transport = LocalTransport()
        csp_address = "local:csp"
        ma_address = "local:ma"
        analyst_addresses = [f"local:analyst{i}" for i in range(n_analysts)]
        ma_address_for_csp = ma_address

    def analyst_infos(with_enc: bool) -> dict[bytes, AnalystInfo]:
        infos = {}
        for (enc, sig), address in zip(analyst_keys, analyst_addresses):
            info = AnalystInfo(
                verification_key=sig.verification_key,
                address=address,
                encryption_public=enc.public_key if with_enc else None,
            )
            infos[hash_bytes(sig.verification_key)] = info
        return infos

    csp = CspService(
        csp_enc,
        csp_sig,
        CspConfig(
            curator_vk=curator_sig.verification_key,
            ma_vk=ma_sig.verification_key,
            ma_address=ma_address_for_csp,
            analysts=analyst_infos(with_enc=False),
            window_ms=window_ms,
        ),
        transport,
    )
    ma = MaService(
        ma_enc,
        ma_sig,
        MaConfig(
            curator_vk=curator_sig.verification_key,
            csp_vk=csp_sig.verification_key,
            csp_address=csp_address,
            analysts=analyst_infos(with_enc=True),
            default_epsilon=epsilon,
            budget_cap=budget_cap,
            window_ms=window_ms,
            noise_enabled=noise_enabled,
        ),
        transport,
        rng=random.Random(rng.random()) if seed is not None else None,
    )
    curator = CuratorSession(
        curator_enc,
        curator_sig,
        csp_address=csp_address,
        csp_vk=csp_sig.verification_key,
        csp_encryption_public=csp_enc.public_key,
        ma_address=ma_address,
        ma_vk=ma_sig.verification_key,
        ma_encryption_public=ma_enc.public_key,
        transport=transport,
        window_ms=window_ms,
        rng=random.Random(rng.random()) if seed is not None else None,
    )
    analysts = [
        AnalystSession(
            enc,
            sig,
            ma_address=ma_address,
            ma_vk=ma_sig.verification_key,
            csp_vk=csp_sig.verification_key,
            transport=transport,
            window_ms=window_ms,
            timeout_s=timeout_s,
        )
        for enc, sig in analyst_keys
    ]

    if tcp:
        csp_slot.target = csp.handle_frame
        ma_slot.target = ma.handle_frame
        for slot, session in zip(analyst_slots, analysts):
            slot.target = session.handle_frame
        for server in servers:
            server.start()
        for proxy in proxies:
            proxy.start()
    else:
        transport.register(csp_address, csp.handle_frame)
        transport.register(ma_address, ma.handle_frame)
        for address, session in zip(analyst_addresses, analysts):
            transport.register(address, session.handle_frame)

    deployment = Deployment(
        curator=curator,
        analysts=analysts,
        csp=csp,
        ma=ma,
        servers=servers,
        proxies=proxies,
    )
    if run_setup:
        report = curator.setup(ds if ds is not None else clinical_fixture())
        if not report.complete:
            deployment.close()
            raise RuntimeError(
                f"setup failed: dataset={report.dataset_error} lists={report.lists_error}"
            )
    return deployment


# ---------------------------------------------------------------------------
# attacks


@dataclass
class AttackVerdict:
    attack: str
    strategy: str
    detected: bool
    error_class: str | None
    transcript: list[str]


_ATTACKS = {
    # strategy key: (attack family, channel, strategy factory, expected classes)
    "replay-result": (
        "result-substitution",
        "analyst",
        lambda: ReplayOld(MessageKind.QUERY_RESULT),
        {"replay-detected", "stale-timestamp"},
    ),
    "substitute-result": (
        "result-substitution",
        "analyst",
        lambda: TamperField(MessageKind.QUERY_RESULT, 1),
        {"bad-signature"},
    ),
    "tamper-key": (
        "key-substitution",
        "analyst",
        lambda: TamperField(MessageKind.NOISY_KEY, 1),
        {"bad-signature", "decryption-error"},
    ),
    "replay-key": (
        "key-substitution",
        "analyst",
        lambda: ReplayOld(MessageKind.NOISY_KEY),
        {"replay-detected", "stale-timestamp"},
    ),
    "tamper-indices": (
        "key-substitution",
        "csp-to-ma",
        lambda: TamperField(MessageKind.KEY_INDICES, 1),
        {"bad-signature", "unknown-key-index"},
    ),
    "tamper-function": (
        "key-substitution",
        "csp-to-ma",
        lambda: TamperField(MessageKind.KEY_INDICES, 2),
        {"bad-signature"},
    ),
}

ATTACK_STRATEGIES = tuple(_ATTACKS)


def run_attack(
    strategy_key: str, seed: int | None = None, timeout_s: float = 0.5
) -> AttackVerdict:
    """One isolated attack run over real TCP; see ATTACK_STRATEGIES."""
    attack, channel, make_strategy, expected = _ATTACKS[strategy_key]
    strategy = make_strategy()
    needs_two_queries = isinstance(strategy, ReplayOld)
    deployment = build_deployment(
        clinical_fixture(),
        seed=seed,
        timeout_s=timeout_s,
        analyst_channel=strategy if channel == "analyst" else None,
        csp_to_ma_channel=strategy if channel == "csp-to-ma" else None,
    )
    transcript: list[str] = []
    try:
        outcome = deployment.analyst.query("flu", "Age", FnKind.SUM)
        transcript.append(f"query 1 status={outcome.status}")
        if needs_two_queries:
            outcome = deployment.analyst.query("flu", "Age", FnKind.SUM)
            transcript.append(f"query 2 status={outcome.status}")
        victim = deployment.analyst.rejections + deployment.ma.rejections
        hit = next((r for r in victim if r.error_class in expected), None)
        transcript.extend(
            f"rejection kind={r.kind} class={r.error_class}" for r in victim
        )
        transcript.extend(deployment.proxies[0].transcript)
        return AttackVerdict(
            attack=attack,
            strategy=strategy_key,
            detected=hit is not None,
            error_class=hit.error_class if hit else None,
            transcript=transcript,
        )
    finally:
        deployment.close()


def run_passthrough_control(seed: int | None = None) -> AttackVerdict:
    """Interpose both channels transparently; the query must succeed cleanly."""
    deployment = build_deployment(
        clinical_fixture(),
        seed=seed,
        analyst_channel=Strategy(),
        csp_to_ma_channel=Strategy(),
    )
    try:
        outcome = deployment.analyst.query("flu", "Age", FnKind.SUM)
        rejections = (
            deployment.analyst.rejections
            + deployment.ma.rejections
            + deployment.csp.rejections
        )
        detected = bool(rejections) or outcome.status != "ok"
        return AttackVerdict(
            attack="control",
            strategy="passthrough",
            detected=detected,
            error_class=rejections[0].error_class if rejections else None,
            transcript=[f"query status={outcome.status}"],
        )
    finally:
        deployment.close()


def run_result_substitution(strategy: str, seed: int | None = None) -> AttackVerdict:
    key = {"replay": "replay-result", "substitute": "substitute-result"}[strategy]
    return run_attack(key, seed=seed)


def run_key_substitution(strategy: str, seed: int | None = None) -> AttackVerdict:
    key = {
        "tamper-key": "tamper-key",
        "tamper-indices": "tamper-indices",
        "tamper-function": "tamper-function",
        "replay": "replay-key",
    }[strategy]
    return run_attack(key, seed=seed)


# ---------------------------------------------------------------------------
# differencing demo


def _rounded_laplace(b: float, rng: random.Random) -> int:
    """Independent noise model used by the oracles below (no shared code path)."""
    while True:
        u = rng.random() - 0.5
        if u == -0.5:
            continue
        if u == 0.0:
            x = 0.0
        else:
            x = -b * math.copysign(1.0, u) * math.log(1.0 - 2.0 * abs(u))
        return math.floor(x + 0.5) if x >= 0 else math.ceil(x - 0.5)


def estimator_oracle_stdev(
    scale: float, trials: int = 200_000, rng: random.Random | None = None
) -> float:
    """Monte-Carlo spread of the two-query differencing estimator.

    Simulates 4*L4 - 3*L3 where L4 and L3 are the noisy averages the
    protocol would return (noise added to each sum, then divided).
    """
    rng = rng or random.Random(0xD1FF)
    sum4, sum3 = 191, 126  # all four ages; first three ages
    samples = [
        4 * ((sum4 + _rounded_laplace(scale, rng)) / 4)
        - 3 * ((sum3 + _rounded_laplace(scale, rng)) / 3)
        for _ in range(trials)
    ]
    return statistics.pstdev(samples)


@dataclass
class DifferencingReport:
    epsilon: float
    trials: int
    exact_avg_all: float
    exact_avg_first_three: float
    exact_recovered: float
    estimator_stdev: float
    oracle_stdev: float

    @property
    def stdev_within_tolerance(self) -> bool:
        return abs(self.estimator_stdev - self.oracle_stdev) <= 0.10 * self.oracle_stdev


def run_differencing_demo(
    epsilon: float, trials: int, seed: int | None = None
) -> DifferencingReport:
    """Recover one patient's age from two overlapping averages.

    Without noise the attack recovers the age exactly; with noise at the
    given privacy factor the same estimator has the spread predicted by
    the Monte-Carlo oracle, which is what makes repeated differencing
    unprofitable at small epsilon.
    """
    ds = cohort_fixture()

    exact = build_deployment(ds, noise_enabled=False, seed=seed)
    try:
        avg_all = exact.analyst.query("central", "Age", FnKind.AVG).value
        avg_first_three = exact.analyst.query("early", "Age", FnKind.AVG).value
    finally:
        exact.close()
    recovered = 4 * avg_all - 3 * avg_first_three

    noisy = build_deployment(ds, epsilon=epsilon, seed=seed)
    try:
        samples = []
        for _ in range(trials):
            a4 = noisy.analyst.query("central", "Age", FnKind.AVG)
            a3 = noisy.analyst.query("early", "Age", FnKind.AVG)
            samples.append(4 * a4.value - 3 * a3.value)
    finally:
        noisy.close()

    scale = 120.0 / epsilon  # Age range is [0, 120]
    oracle_rng = random.Random(seed if seed is not None else 0xD1FF)
    return DifferencingReport(
        epsilon=epsilon,
        trials=trials,
        exact_avg_all=avg_all,
        exact_avg_first_three=avg_first_three,
        exact_recovered=recovered,
        estimator_stdev=statistics.pstdev(samples),
        oracle_stdev=estimator_oracle_stdev(scale, rng=oracle_rng),
    )


# ---------------------------------------------------------------------------
# empirical privacy ratio


def rounded_laplace_pmf(z: int, b: float) -> float:
    """Exact probability that rounded Laplace(0, b) noise equals z."""
    if z == 0:
        return 1.0 - math.exp(-0.5 / b)
    return math.exp(-abs(z) / b) * math.sinh(0.5 / b)


@dataclass
class RatioReport:
    epsilon: float
    trials: int
    bound: float
    max_ratio: float
    bins_checked: int
    violations: int

    @property
    def ok(self) -> bool:
        return self.violations == 0 and self.bins_checked > 0


def _collect_outputs(
    ds: PlainDataset,
    value_term: str,
    variable_term: str,
    epsilon: float,
    trials: int,
    seed: int,
    workers: int,
) -> Counter:
    """Histogram of integer query outputs over repeated full protocol runs."""

    def worker(worker_seed: int, n: int) -> Counter:
        deployment = build_deployment(ds, epsilon=epsilon, seed=worker_seed)
        counts: Counter = Counter()
        try:
            for _ in range(n):
                outcome = deployment.analyst.query(value_term, variable_term, FnKind.SUM)
                if outcome.status != "ok":
                    raise RuntimeError(f"query failed: {outcome.status}")
                counts[int(outcome.value)] += 1
        finally:
            deployment.close()
        return counts

    share = [trials // workers] * workers
    share[0] += trials - sum(share)
    merged: Counter = Counter()
    if workers == 1:
        return worker(seed, trials)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(worker, seed + 1000 * i, n) for i, n in enumerate(share)
        ]
        for future in futures:
            merged.update(future.result())
    return merged


def run_dp_ratio_experiment(
    epsilon: float,
    trials: int,
    seed: int = 2024,
    workers: int = 2,
    min_expected: float = 500.0,
    slack: float = 1.15,
    pair: tuple[PlainDataset, PlainDataset] | None = None,
) -> RatioReport:
    """Compare output histograms of one query on two neighbouring datasets.

    Every integer output bin whose expected hit count is at least
    ``min_expected`` under both datasets must show an observed probability
    ratio within exp(epsilon) times the statistical slack, in both
    directions.
    """
    ds_a, ds_b = pair if pair is not None else neighbouring_pair()
    value_term, variable_term = "flu", "cases"
    true_a, _ = plaintext_aggregate(ds_a, value_term, variable_term)
    true_b, _ = plaintext_aggregate(ds_b, value_term, variable_term)

    hist_a = _collect_outputs(
        ds_a, value_term, variable_term, epsilon, trials, seed, workers
    )
    hist_b = _collect_outputs(
        ds_b, value_term, variable_term, epsilon, trials, seed + 77_000, workers
    )

    scale = 1.0 / epsilon  # the "cases" column has unit sensitivity
    bound = math.exp(epsilon) * slack
    lo = min(true_a, true_b) - int(20 * scale) - 5
    hi = max(true_a, true_b) + int(20 * scale) + 5
    max_ratio = 0.0
    bins_checked = 0
    violations = 0
    for z in range(lo, hi + 1):
        expected_a = trials * rounded_laplace_pmf(z - true_a, scale)
        expected_b = trials * rounded_laplace_pmf(z - true_b, scale)
        if min(expected_a, expected_b) < min_expected:
            continue
        bins_checked += 1
        observed_a, observed_b = hist_a.get(z, 0), hist_b.get(z, 0)
        if observed_a == 0 or observed_b == 0:
            violations += 1
            max_ratio = math.inf
            continue
        ratio = max(observed_a / observed_b, observed_b / observed_a)
        max_ratio = max(max_ratio, ratio)
        if ratio > bound:
            violations += 1
    return RatioReport(
        epsilon=epsilon,
        trials=trials,
        bound=bound,
        max_ratio=max_ratio,
        bins_checked=bins_checked,
        violations=violations,
    )
