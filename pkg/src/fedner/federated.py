"""Synchronous federated training with a shared/private model split.

Each round the coordinator sends the global shared parameters and a batch
size to every platform. A platform samples its batch, computes the mean
CRF loss, steps its private parameters locally and returns only the
gradient with respect to the shared parameters. The coordinator weights the
gradients by local training-set size, steps the shared parameters and
starts the next round.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import transport
from .autodiff import NonFiniteError
from .data import Corpus, Vocab, alphabet_for, build_vocab
from .evaluate import extract_spans, relax_prf, strict_prf
from .model import ContextualEmbeddings, ModelConfig, NerModel, flatten, get_strategy, init_params
from .model import partition_names, unflatten
from .optim import make_optimizer
from .transport import GradientPacket

log = logging.getLogger(__name__)

__all__ = [
    "GradientPacket",
    "RoundAborted",
    "FederationConfig",
    "allocate_batch_sizes",
    "aggregate",
    "aggregation_weights",
    "BatchSampler",
    "Platform",
    "Coordinator",
    "RoundReport",
    "FederationResult",
    "build_federation",
    "run_federation",
    "run_until_converged",
    "CentralTrainer",
    "evaluate_model",
]


class RoundAborted(RuntimeError):
    pass


def allocate_batch_sizes(n: int, sizes: Sequence[int]) -> list[int]:
    """Split a global batch of `n` in proportion to `sizes`.

    Largest-remainder rounding, then every platform is lifted to at least
    one sentence by taking from the largest allocations.
    """
    sizes = [int(s) for s in sizes]
    if not sizes or any(s < 1 for s in sizes):
        raise ValueError("every platform needs at least one training sentence")
    if n < len(sizes):
        raise ValueError(f"global batch {n} is smaller than the number of platforms {len(sizes)}")
    total = sum(sizes)
    shares = [n * s / total for s in sizes]
    alloc = [math.floor(x) for x in shares]
    order = sorted(range(len(sizes)), key=lambda i: (-(shares[i] - alloc[i]), i))
    for i in order[: n - sum(alloc)]:
        alloc[i] += 1
    for i in range(len(alloc)):
        while alloc[i] < 1:
            donor = max(range(len(alloc)), key=lambda j: (alloc[j], -j))
            alloc[donor] -= 1
            alloc[i] += 1
    return alloc


def aggregation_weights(packets: Sequence[GradientPacket]) -> list[float]:
    total = sum(p.weight for p in packets)
    return [p.weight / total for p in packets]


def aggregate(packets: Sequence[GradientPacket], platforms: Optional[Sequence[int]] = None,
              round_no: Optional[int] = None) -> np.ndarray:
    """Size-weighted sum of the packets' gradients, in platform-id order."""
    if not packets:
        raise ValueError("no packets to aggregate")
    ids = [p.platform for p in packets]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate packets from platforms {sorted(i for i in ids if ids.count(i) > 1)}")
    if platforms is not None and set(ids) != set(platforms):
        raise ValueError(f"missing packets from platforms {sorted(set(platforms) - set(ids))}")
    rounds = {p.round for p in packets}
    if len(rounds) != 1 or (round_no is not None and rounds != {round_no}):
        raise ValueError(f"packets from rounds {sorted(rounds)} cannot be aggregated for round {round_no}")
    sizes = {p.gradient.size for p in packets}
    if len(sizes) != 1:
        raise ValueError(f"gradient lengths differ: {sorted(sizes)}")
    packets = sorted(packets, key=lambda p: p.platform)
    weights = aggregation_weights(packets)
    out = weights[0] * packets[0].gradient
    for w, p in zip(weights[1:], packets[1:]):
        out = out + w * p.gradient
    return out


class BatchSampler:
    """Draws batches without replacement, reshuffling once the pool runs dry."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.queue: list[int] = []

    def take(self, k: int) -> list[int]:
        if k > self.n:
            raise ValueError(f"batch of {k} requested from {self.n} sentences")
        batch = self.queue[:k]
        self.queue = self.queue[k:]
        if len(batch) < k:
            fresh = [int(i) for i in self.rng.permutation(self.n)]
            chosen = set(batch)
            extra = [i for i in fresh if i not in chosen][: k - len(batch)]
            taken = set(extra)
            self.queue = [i for i in fresh if i not in taken]
            batch = batch + extra
        return batch


@dataclass
class FederationConfig:
    strategy: str = "fedner-default"
    batch_size: int = 64
    lr: float = 0.001
    optimizer: str = "adam"
    private_optimizer: Optional[str] = None
    private_lr: Optional[float] = None
    max_rounds: int = 100
    tolerance: float = -math.inf  # >= 0 enables early stopping on the moving-average rule
    window: int = 10
    seed: int = 0
    eval_every: int = 0
    transport: str = "inproc"
    address: str = "127.0.0.1:0"

    def validate(self, n_platforms: int) -> None:
        get_strategy(self.strategy)
        if self.batch_size < n_platforms:
            raise ValueError(f"batch_size {self.batch_size} < number of platforms {n_platforms}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.private_lr is not None and self.private_lr < 0:
            raise ValueError("private_lr must be non-negative")
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be non-negative")
        if self.transport not in ("inproc", "socket"):
            raise ValueError(f"unknown transport {self.transport!r}")


def evaluate_model(model: NerModel, corpus: Corpus) -> dict:
    gold = [extract_spans(s.tags) for s in corpus.sentences]
    pred = [extract_spans(model.predict(s)) for s in corpus.sentences]
    return {"strict": strict_prf(gold, pred), "relax": relax_prf(gold, pred), "gold": gold, "pred": pred}


class Platform:
    """A data holder. Its corpus never leaves this object."""

    def __init__(self, platform_id: int, train: Corpus, model: NerModel, shared_names: Sequence[str],
                 private_names: Sequence[str], optimizer, seed, test: Optional[Corpus] = None):
        if len(train) < 1:
            raise ValueError("a platform needs at least one training sentence")
        self.id = platform_id
        self.name = train.platform
        self.train = train
        self.test = test
        self.model = model
        self.shared_names = list(shared_names)
        self.private_names = list(private_names)
        self.optimizer = optimizer
        self.rng = np.random.default_rng(seed)
        self.sampler = BatchSampler(len(train), self.rng)
        self.shapes = model.shapes

    @property
    def n_samples(self) -> int:
        return len(self.train)

    def load_shared(self, theta_s: np.ndarray) -> None:
        self.model.params.update(unflatten(np.asarray(theta_s), self.shared_names, self.shapes))

    @property
    def private(self) -> np.ndarray:
        return flatten(self.model.params, self.private_names)

    def update(self, theta_s: np.ndarray, n_batch: int, round_no: int) -> GradientPacket:
        """One local step; returns the shared-parameter gradient of the mean batch loss."""
        self.load_shared(theta_s)
        batch = [self.train.sentences[i] for i in self.sampler.take(n_batch)]
        try:
            loss, grads = self.model.loss_and_grads(batch, train=True, rng=self.rng)
        except NonFiniteError as exc:
            raise RoundAborted(f"platform {self.id} ({self.name}) round {round_no}: {exc}") from exc
        grad_s = flatten(grads, self.shared_names)
        grad_p = flatten(grads, self.private_names)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad_s)) and np.all(np.isfinite(grad_p))):
            raise RoundAborted(
                f"platform {self.id} ({self.name}) round {round_no}: non-finite loss or gradient "
                f"(loss={loss})"
            )
        if self.private_names:
            theta_p = self.optimizer.step(self.private, grad_p)
            self.model.params.update(unflatten(theta_p, self.private_names, self.shapes))
        return GradientPacket(self.id, round_no, grad_s, self.n_samples, loss)

    def view(self, theta_s: np.ndarray) -> NerModel:
        """A read-only copy of this platform's model with the given shared parameters."""
        params = dict(self.model.params)
        params.update(unflatten(np.asarray(theta_s), self.shared_names, self.shapes))
        m = self.model
        return NerModel(m.config, m.vocab, m.labels, params, m.context)

    def evaluate(self, theta_s: np.ndarray, corpus: Optional[Corpus] = None) -> dict:
        return evaluate_model(self.view(theta_s), corpus if corpus is not None else self.test)


class Coordinator:
    """Holds the global shared parameters and applies aggregated gradients."""

    def __init__(self, theta_s: np.ndarray, optimizer, platform_ids: Sequence[int]):
        self.theta = np.asarray(theta_s, dtype=float).copy()
        self.optimizer = optimizer
        self.platform_ids = list(platform_ids)
        self.round = 0
        self.pending: dict[int, GradientPacket] = {}

    def receive(self, packet: GradientPacket) -> None:
        if packet.platform not in self.platform_ids:
            raise ValueError(f"packet from unknown platform {packet.platform}")
        if packet.platform in self.pending:
            raise ValueError(f"duplicate packet from platform {packet.platform}")
        if packet.round != self.round:
            raise ValueError(f"packet for round {packet.round} during round {self.round}")
        if packet.gradient.size != self.theta.size:
            raise ValueError(f"gradient has {packet.gradient.size} values, expected {self.theta.size}")
        self.pending[packet.platform] = packet

    @property
    def complete(self) -> bool:
        return len(self.pending) == len(self.platform_ids)

    def close_round(self) -> np.ndarray:
        if not self.complete:
            missing = sorted(set(self.platform_ids) - set(self.pending))
            raise RoundAborted(f"round {self.round} closed without packets from {missing}")
        agg = aggregate(list(self.pending.values()), self.platform_ids, self.round)
        self.pending = {}
        return self.server_step(agg)

    def server_step(self, agg_grad: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(agg_grad)):
            raise RoundAborted("aggregated gradient is not finite")
        if self.theta.size:
            self.theta = self.optimizer.step(self.theta, agg_grad)
        self.round += 1
        return self.theta


@dataclass
class RoundReport:
    round: int
    losses: dict  # platform id -> mean batch loss
    global_loss: float  # size-weighted across platforms
    batch_sizes: list
    metrics: Optional[dict] = None  # platform id or "global" -> {"strict": PRF, "relax": PRF}
    wall_time: float = 0.0


@dataclass
class FederationResult:
    coordinator: Coordinator
    platforms: list
    reports: list = field(default_factory=list)

    @property
    def theta_s(self) -> np.ndarray:
        return self.coordinator.theta

    def models(self) -> list[NerModel]:
        return [p.view(self.coordinator.theta) for p in self.platforms]

    def evaluate(self) -> dict:
        return evaluate_platforms(self.platforms, self.coordinator.theta)


def evaluate_platforms(platforms, theta_s) -> dict:
    out = {}
    all_gold, all_pred = [], []
    for p in platforms:
        res = p.evaluate(theta_s)
        out[p.id] = {"strict": res["strict"], "relax": res["relax"]}
        all_gold += res["gold"]
        all_pred += res["pred"]
    out["global"] = {"strict": strict_prf(all_gold, all_pred), "relax": relax_prf(all_gold, all_pred)}
    return out


def label_alphabets(train: Sequence[Corpus], strategy) -> list[list[str]]:
    """Each platform's own alphabet, or the union when label layers are shared."""
    if strategy.shares_labels():
        union = alphabet_for({t for c in train for t in c.entity_types})
        return [union for _ in train]
    return [c.alphabet for c in train]


def build_federation(train: Sequence[Corpus], model_config: ModelConfig, config: FederationConfig,
                     test: Optional[Sequence[Corpus]] = None, vocab: Optional[Vocab] = None,
                     context: Optional[Sequence[Optional[ContextualEmbeddings]]] = None,
                     platform_seeds: Optional[Sequence[int]] = None, pretrained=None):
    """Initialise the coordinator and one platform per training corpus.

    Every party draws the full parameter set from ``default_rng(seed)``; the
    coordinator keeps the shared part and each platform the private part.
    Platform ``i`` samples batches and dropout masks from
    ``default_rng([seed, i])`` unless `platform_seeds` overrides it.
    """
    config.validate(len(train))
    strategy = get_strategy(config.strategy)
    vocab = vocab or build_vocab(train)
    alphabets = label_alphabets(train, strategy)
    platforms = []
    theta_s = None
    for i, corpus in enumerate(train):
        params = init_params(
            model_config, vocab.n_words, vocab.n_chars, len(alphabets[i]),
            np.random.default_rng(config.seed), pretrained,
        )
        shared, private = partition_names(params, strategy)
        if theta_s is None:
            theta_s = flatten(params, shared)
        ctx = context[i] if context else None
        model = NerModel(model_config, vocab, alphabets[i], params, ctx)
        seed = platform_seeds[i] if platform_seeds is not None else [config.seed, i]
        opt = make_optimizer(config.private_optimizer or config.optimizer,
                             config.lr if config.private_lr is None else config.private_lr)
        platforms.append(
            Platform(i, corpus, model, shared, private, opt, seed, test[i] if test else None)
        )
    coordinator = Coordinator(theta_s, make_optimizer(config.optimizer, config.lr), [p.id for p in platforms])
    return coordinator, platforms


def serve_platform(platform: Platform, channel) -> None:
    """Platform side of the protocol: register, answer rounds until SHUTDOWN."""
    channel.send(transport.register(platform.id, platform.n_samples))
    try:
        while True:
            msg = channel.recv()
            if msg.kind == transport.Kind.ROUND_START:
                packet = platform.update(msg.params, msg.batch, msg.round)
                channel.send(transport.gradient(packet))
            elif msg.kind == transport.Kind.MODEL_BROADCAST:
                platform.load_shared(msg.params)
            elif msg.kind == transport.Kind.SHUTDOWN:
                return
    finally:
        channel.close()


class _Moving:
    """Moving average of the loss and how much it fell over the last window."""

    def __init__(self, window: int):
        self.window = window
        self.values: list[float] = []
        self.averages: list[float] = []

    def push(self, x: float) -> float:
        """Add a value; return the drop of the average since `window` rounds ago.

        Before `window` rounds have passed the reference is +inf, so only an
        infinite tolerance can stop training that early.
        """
        self.values.append(x)
        self.averages.append(float(np.mean(self.values[-self.window :])))
        r = len(self.averages)
        before = self.averages[r - 1 - self.window] if r > self.window else math.inf
        return before - self.averages[-1]


class _Session:
    """Coordinator-side connection state for one run."""

    def __init__(self, coordinator: Coordinator, channels: dict, sizes: dict, batch_size: int):
        self.coordinator = coordinator
        self.channels = channels  # platform id -> channel
        ids = sorted(channels)
        alloc = allocate_batch_sizes(batch_size, [sizes[i] for i in ids])
        self.batch = dict(zip(ids, alloc))
        self.sizes = sizes

    def run_round(self) -> RoundReport:
        start = time.perf_counter()
        c = self.coordinator
        round_no = c.round
        for pid in sorted(self.channels):
            self.channels[pid].send(transport.round_start(round_no, c.theta, self.batch[pid]))
        losses = {}
        for pid in sorted(self.channels):
            try:
                msg = self.channels[pid].recv()
            except transport.ChannelClosed as exc:
                raise RoundAborted(f"platform {pid} dropped out of round {round_no}: {exc}") from exc
            if msg.kind != transport.Kind.GRADIENT or msg.packet.platform != pid:
                raise RoundAborted(f"unexpected {msg.kind.name} from platform {pid}")
            c.receive(msg.packet)
            losses[pid] = msg.packet.loss
        weights = aggregation_weights(list(c.pending.values()))
        global_loss = float(sum(w * p.loss for w, p in zip(weights, c.pending.values())))
        c.close_round()
        return RoundReport(round_no + 1, losses, global_loss, [self.batch[i] for i in sorted(self.batch)],
                           wall_time=time.perf_counter() - start)

    def finish(self) -> None:
        for pid in sorted(self.channels):
            try:
                self.channels[pid].send(transport.broadcast(self.coordinator.round, self.coordinator.theta))
                self.channels[pid].send(transport.shutdown())
            except transport.ChannelClosed:
                pass


def accept_platforms(listener, n_platforms: int, timeout: Optional[float] = None):
    """Accept `n_platforms` connections; return (channels by id, sample counts by id)."""
    channels, sizes = {}, {}
    while len(channels) < n_platforms:
        ch = listener.accept(timeout)
        msg = ch.recv(timeout)
        if msg.kind != transport.Kind.REGISTER:
            raise RoundAborted(f"expected REGISTER, got {msg.kind.name}")
        if msg.sender in channels:
            raise RoundAborted(f"platform {msg.sender} registered twice")
        channels[msg.sender] = ch
        sizes[msg.sender] = msg.count
    return channels, sizes


def drive(coordinator: Coordinator, channels: dict, sizes: dict, config: FederationConfig,
          on_round: Optional[Callable[[RoundReport], None]] = None,
          evaluate: Optional[Callable[[np.ndarray], dict]] = None) -> list[RoundReport]:
    """Run rounds until `max_rounds` or convergence, then broadcast and shut down."""
    session = _Session(coordinator, channels, sizes, config.batch_size)
    moving = _Moving(config.window)
    reports = []
    try:
        for r in range(config.max_rounds):
            report = session.run_round()
            if evaluate is not None and config.eval_every and (
                report.round % config.eval_every == 0 or report.round == config.max_rounds
            ):
                report.metrics = evaluate(coordinator.theta)
            reports.append(report)
            if on_round is not None:
                on_round(report)
            log.debug("round %d loss %.4f", report.round, report.global_loss)
            if moving.push(report.global_loss) <= config.tolerance:
                log.info("converged after %d rounds", report.round)
                break
    finally:
        session.finish()
    return reports


def run_federation(coordinator: Coordinator, platforms: Sequence[Platform], config: FederationConfig,
                   on_round=None) -> FederationResult:
    """Run platforms on threads connected to the coordinator over the configured transport."""
    errors: list[BaseException] = []

    def worker(platform, channel_factory):
        try:
            serve_platform(platform, channel_factory())
        except BaseException as exc:  # surfaced to the caller below
            errors.append(exc)

    threads = []
    listener = None
    if config.transport == "socket":
        listener = transport.socket_listen(config.address)
        addr = listener.address
        for p in platforms:
            threads.append(threading.Thread(
                target=worker, args=(p, lambda: transport.socket_connect(addr)), daemon=True))
    else:
        coordinator_ends = {}
        for p in platforms:
            mine, theirs = transport.in_process_pair()
            coordinator_ends[p.id] = mine
            threads.append(threading.Thread(target=worker, args=(p, lambda t=theirs: t), daemon=True))
    for t in threads:
        t.start()
    evaluate = (lambda theta: evaluate_platforms(platforms, theta)) if config.eval_every else None
    try:
        if listener is not None:
            channels, sizes = accept_platforms(listener, len(platforms), timeout=60)
        else:
            channels = {}
            sizes = {}
            for pid, ch in coordinator_ends.items():
                msg = ch.recv(timeout=60)
                channels[msg.sender] = ch
                sizes[msg.sender] = msg.count
        reports = drive(coordinator, channels, sizes, config, on_round, evaluate)
    except RoundAborted:
        for t in threads:
            t.join(timeout=5)
        if errors:
            raise errors[0]
        raise
    finally:
        for t in threads:
            t.join(timeout=30)
        if listener is not None:
            listener.close()
    if errors:
        raise errors[0]
    return FederationResult(coordinator, list(platforms), reports)


def run_until_converged(train: Sequence[Corpus], model_config: ModelConfig, config: FederationConfig,
                        test: Optional[Sequence[Corpus]] = None, on_round=None, **kwargs) -> FederationResult:
    coordinator, platforms = build_federation(train, model_config, config, test=test, **kwargs)
    if config.max_rounds == 0:
        return FederationResult(coordinator, platforms, [])
    return run_federation(coordinator, platforms, config, on_round)


# -- centralized baseline ------------------------------------------------------------


class CentralTrainer:
    """Ordinary mini-batch training of one model on one corpus.

    Initialisation draws from ``default_rng(seed)`` and batches/dropout from
    ``default_rng([seed, 0])``, the same streams a lone federated platform uses.
    """

    def __init__(self, train: Corpus, model_config: ModelConfig, batch_size: int = 64, lr: float = 0.001,
                 optimizer: str = "adam", seed: int = 0, vocab: Optional[Vocab] = None,
                 context: Optional[ContextualEmbeddings] = None, labels=None, pretrained=None):
        self.train = train
        self.batch_size = min(batch_size, len(train))
        vocab = vocab or build_vocab([train])
        labels = labels or train.alphabet
        params = init_params(model_config, vocab.n_words, vocab.n_chars, len(labels),
                             np.random.default_rng(seed), pretrained)
        self.model = NerModel(model_config, vocab, labels, params, context)
        self.names = list(params)
        self.optimizer = make_optimizer(optimizer, lr)
        self.rng = np.random.default_rng([seed, 0])
        self.sampler = BatchSampler(len(train), self.rng)
        self.round = 0

    def step(self) -> tuple[float, dict]:
        batch = [self.train.sentences[i] for i in self.sampler.take(self.batch_size)]
        loss, grads = self.model.loss_and_grads(batch, train=True, rng=self.rng)
        theta = self.optimizer.step(flatten(self.model.params, self.names), flatten(grads, self.names))
        self.model.params.update(unflatten(theta, self.names, self.model.shapes))
        self.round += 1
        return loss, grads

    def run(self, rounds: int, on_round=None) -> list[float]:
        losses = []
        for _ in range(rounds):
            loss, _ = self.step()
            losses.append(loss)
            if on_round is not None:
                on_round(self.round, loss)
        return losses

    def evaluate(self, corpus: Corpus) -> dict:
        return evaluate_model(self.model, corpus)
