"""TDMA round orchestration over a reliable control channel and a lossy data link.

One round, in simulated time:

1. both clients train locally;
2. client 1 sends its packet train;          3. server -> client 1: AckReceived
4. server -> client 2: StartTransmit;         5. client 2 sends its packet train
6. server -> client 2: AckReceived;           7. server aggregates (FedAvg)
8. server -> clients: ActivateReceiver, then broadcasts the global train
9. clients -> server: ReceivedGlobalConfirm;  10. server: HaltBroadcast
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from .codec import GapPolicy, encode_params, reassemble
from .data import ClientDataset, LabeledImage
from .model import AdamState, ModelParams, TrainConfig, evaluate, fed_avg, init_model, run_local_training
from .phy import ChannelModel, PhyConfig, TransmissionReport, transmit_train_detailed

SERVER, CLIENT1, CLIENT2, BROADCAST = "server", "client1", "client2", "*"
CLIENTS = (CLIENT1, CLIENT2)


class MessageKind(enum.Enum):
    ACK_RECEIVED = "AckReceived"
    START_TRANSMIT = "StartTransmit"
    ACTIVATE_RECEIVER = "ActivateReceiver"
    RECEIVED_GLOBAL_CONFIRM = "ReceivedGlobalConfirm"
    HALT_BROADCAST = "HaltBroadcast"


ROUND_PROTOCOL = (
    (MessageKind.ACK_RECEIVED, SERVER, CLIENT1),
    (MessageKind.START_TRANSMIT, SERVER, CLIENT2),
    (MessageKind.ACK_RECEIVED, SERVER, CLIENT2),
    (MessageKind.ACTIVATE_RECEIVER, SERVER, CLIENT1),
    (MessageKind.ACTIVATE_RECEIVER, SERVER, CLIENT2),
    (MessageKind.RECEIVED_GLOBAL_CONFIRM, CLIENT1, SERVER),
    (MessageKind.RECEIVED_GLOBAL_CONFIRM, CLIENT2, SERVER),
    (MessageKind.HALT_BROADCAST, SERVER, BROADCAST),
)

# Data-channel stream ids; they key the per-packet noise seeds.
LINK_STREAMS = {"client1->server": 1, "client2->server": 2, "server->client1": 3, "server->client2": 4}


class ProtocolError(RuntimeError):
    pass


class RoundAbortedError(RuntimeError):
    def __init__(self, round_index: int, link: str, diagnostic: str):
        super().__init__(f"round {round_index} aborted on {link}: {diagnostic}")
        self.round_index = round_index
        self.link = link


@dataclass(frozen=True)
class ControlMessage:
    kind: MessageKind
    sender: str
    recipient: str
    timestamp: float

    def __post_init__(self):
        if self.sender == self.recipient:
            raise ProtocolError(f"{self.kind.value}: sender and recipient are both {self.sender}")


class ControlChannel:
    """Reliable side channel with fixed latency that enforces the round protocol."""

    def __init__(self, latency_s: float = 0.005):
        self.latency_s = latency_s
        self.messages: list[ControlMessage] = []

    @property
    def expected(self):
        pos = len(self.messages)
        return ROUND_PROTOCOL[pos] if pos < len(ROUND_PROTOCOL) else None

    def send(self, kind: MessageKind, sender: str, recipient: str, now: float) -> float:
        """Record the message and return its delivery time."""
        observed = (kind, sender, recipient)
        if observed != self.expected:
            exp = "end of round" if self.expected is None else _describe(self.expected)
            raise ProtocolError(f"expected {exp}, observed {_describe(observed)}")
        self.messages.append(ControlMessage(kind, sender, recipient, now))
        return now + self.latency_s

    @property
    def complete(self) -> bool:
        return len(self.messages) == len(ROUND_PROTOCOL)


def _describe(entry) -> str:
    kind, sender, recipient = entry
    return f"{kind.value} {sender}->{recipient}"


@dataclass(frozen=True)
class DataInterval:
    start: float
    end: float
    link: str


class DataChannel:
    """Shared radio channel; overlapping transmissions violate TDMA."""

    def __init__(self):
        self.intervals: list[DataInterval] = []

    def occupy(self, link: str, start: float, duration: float) -> float:
        end = start + duration
        for iv in self.intervals:
            if start < iv.end and iv.start < end:
                raise ProtocolError(f"TDMA violation: {link} overlaps {iv.link}")
        self.intervals.append(DataInterval(start, end, link))
        return end


@dataclass
class RoundTimings:
    t_c1_c1: float
    t_c2_c2: float
    t_c1_s: float
    t_c2_s: float
    t_s_s: float
    t_s_broadcast: float
    t_control: float
    serial_compute: bool = False

    @property
    def t_compute(self) -> float:
        if self.serial_compute:
            return self.t_c1_c1 + self.t_c2_c2
        return max(self.t_c1_c1, self.t_c2_c2)

    @property
    def total(self) -> float:
        return (self.t_compute + self.t_c1_s + self.t_c2_s + self.t_s_s
                + self.t_s_broadcast + self.t_control)


@dataclass(frozen=True)
class TraceEvent:
    time: float
    node: str
    event: str
    step: int


@dataclass
class LinkStats:
    link: str
    sent: int
    detected: int
    crc_ok: int
    airtime_s: float

    @classmethod
    def from_report(cls, link: str, report: TransmissionReport) -> "LinkStats":
        return cls(link, report.n_sent, report.n_detected, report.n_crc_ok, report.airtime_s)

    @property
    def corrupted_fraction(self) -> float:
        return 1.0 - self.crc_ok / self.sent if self.sent else 0.0


@dataclass
class RoundTrace:
    round_index: int
    start_time: float
    events: list[TraceEvent]
    timings: RoundTimings
    messages: list[ControlMessage]
    data_intervals: list[DataInterval]
    links: list[LinkStats]
    wall_clock_s: dict = field(default_factory=dict)

    @property
    def end_time(self) -> float:
        return self.start_time + self.timings.total


@dataclass(frozen=True)
class RoundOptions:
    gap_policy: GapPolicy = GapPolicy.HOLD_PREVIOUS
    control_latency_s: float = 0.005
    serial_compute: bool = False
    persist_optimizer: bool = False
    compute_timing: str = "analytic"
    seconds_per_sample_epoch: float = 1e-4
    aggregation_seconds: float = 0.01
    wall_clock_scale: float = 1.0
    # abort the round when more than this fraction of a train's frames go undetected
    max_frame_loss: float = 0.5


def _round_seed(base: int, round_index: int, client_id: int) -> int:
    return int(np.random.SeedSequence([base, round_index, client_id]).generate_state(1)[0])


class Federation:
    """Server and two clients, each holding its own copy of the global model."""

    def __init__(
        self,
        clients: tuple[ClientDataset, ClientDataset],
        global_params: ModelParams,
        train_config: TrainConfig,
        phy_config: PhyConfig,
        channel_model: ChannelModel,
        options: RoundOptions = RoundOptions(),
    ):
        if len(clients) != 2:
            raise ValueError("exactly two clients are supported")
        self.clients = tuple(clients)
        self.global_params = global_params
        self.client_params = [global_params, global_params]
        self.optimizer_states: list[AdamState | None] = [None, None]
        self.train_config = train_config
        self.phy_config = phy_config
        self.channel_model = channel_model
        self.options = options
        self.clock = 0.0

    def _compute_time(self, wall: float, n_samples: int) -> float:
        opts = self.options
        if opts.compute_timing == "wall":
            return wall * opts.wall_clock_scale
        return self.train_config.epochs * n_samples * opts.seconds_per_sample_epoch

    def _send(self, train, link: str, round_index: int) -> TransmissionReport:
        model = self.channel_model
        stream = round_index * 16 + LINK_STREAMS[link]
        report = transmit_train_detailed(train, self.phy_config, model, stream)
        lost = report.n_sent - report.n_detected
        if report.n_sent and lost > self.options.max_frame_loss * report.n_sent:
            raise RoundAbortedError(
                round_index, link,
                f"{lost} of {report.n_sent} frames not found (snr {model.snr_db} dB)",
            )
        return report

    def run_round(self, round_index: int) -> RoundTrace:
        opts = self.options
        ctrl = ControlChannel(opts.control_latency_s)
        data = DataChannel()
        events: list[TraceEvent] = []
        links: list[LinkStats] = []
        wall: dict[str, float] = {}
        t0 = self.clock

        def log(t, node, event, step):
            events.append(TraceEvent(t, node, event, step))

        def control(kind, sender, recipient, now, step):
            log(now, sender, f"{kind.value} -> {recipient}", step)
            return ctrl.send(kind, sender, recipient, now)

        # 1. local training
        updates, compute = [], []
        start = t0
        for k, client in enumerate(self.clients):
            node = CLIENTS[k]
            cfg = TrainConfig(
                learning_rate=self.train_config.learning_rate,
                epochs=self.train_config.epochs,
                batch_size=self.train_config.batch_size,
                adam_beta1=self.train_config.adam_beta1,
                adam_beta2=self.train_config.adam_beta2,
                adam_epsilon=self.train_config.adam_epsilon,
                seed=_round_seed(self.train_config.seed, round_index, client.client_id),
            )
            state = self.optimizer_states[k] if opts.persist_optimizer else None
            tic = time.perf_counter()
            result = run_local_training(self.client_params[k], client, cfg, state)
            wall[f"train_{node}"] = time.perf_counter() - tic
            self.optimizer_states[k] = result.optimizer_state
            dt = self._compute_time(wall[f"train_{node}"], len(client))
            compute.append(dt)
            log(start, node, f"train_start epochs={cfg.epochs} samples={len(client)}", 1)
            log(start + dt, node, "train_done", 1)
            if opts.serial_compute:
                start += dt
            updates.append(result.params)
        now = t0 + (sum(compute) if opts.serial_compute else max(compute))

        # 2-6. TDMA uplink slots, client 1 first
        received = []
        uplink_time = []
        for k, node in enumerate(CLIENTS):
            link = f"{node}->{SERVER}"
            train = encode_params(updates[k])
            report = self._send(train, link, round_index)
            tx_step = 2 if k == 0 else 5
            log(now, node, f"data_tx_start {link} packets={report.n_sent}", tx_step)
            now = data.occupy(link, now, report.airtime_s)
            log(now, SERVER, f"data_rx_end {link} crc_ok={report.n_crc_ok}/{report.n_sent}", tx_step)
            links.append(LinkStats.from_report(link, report))
            uplink_time.append(report.airtime_s)
            rebuilt = reassemble(report.packets, train.header, self.global_params, opts.gap_policy)
            received.append(rebuilt.params)
            now = control(MessageKind.ACK_RECEIVED, SERVER, node, now, 3 if k == 0 else 6)
            if k == 0:
                now = control(MessageKind.START_TRANSMIT, SERVER, CLIENT2, now, 4)

        # 7. aggregation
        tic = time.perf_counter()
        new_global = fed_avg([(p, len(c)) for p, c in zip(received, self.clients)])
        wall["aggregate"] = time.perf_counter() - tic
        t_s_s = (wall["aggregate"] * opts.wall_clock_scale if opts.compute_timing == "wall"
                 else opts.aggregation_seconds)
        log(now, SERVER, "aggregate_start", 7)
        now += t_s_s
        log(now, SERVER, "aggregate_done", 7)

        # 8. broadcast: one transmission, independent noise at each receiver
        now = control(MessageKind.ACTIVATE_RECEIVER, SERVER, CLIENT1, now, 8)
        now = control(MessageKind.ACTIVATE_RECEIVER, SERVER, CLIENT2, now, 8)
        train = encode_params(new_global)
        reports = [self._send(train, f"{SERVER}->{node}", round_index) for node in CLIENTS]
        airtime = reports[0].airtime_s
        log(now, SERVER, f"broadcast_tx_start packets={len(train)}", 8)
        now = data.occupy(f"{SERVER}->{BROADCAST}", now, airtime)
        log(now, SERVER, "broadcast_tx_end", 8)
        for k, (node, report) in enumerate(zip(CLIENTS, reports)):
            links.append(LinkStats.from_report(f"{SERVER}->{node}", report))
            log(now, node, f"data_rx_end {SERVER}->{node} crc_ok={report.n_crc_ok}/{report.n_sent}", 8)
            rebuilt = reassemble(report.packets, train.header, self.client_params[k], opts.gap_policy)
            self.client_params[k] = rebuilt.params

        # 9-10. confirmations and halt
        now = control(MessageKind.RECEIVED_GLOBAL_CONFIRM, CLIENT1, SERVER, now, 9)
        now = control(MessageKind.RECEIVED_GLOBAL_CONFIRM, CLIENT2, SERVER, now, 9)
        now = control(MessageKind.HALT_BROADCAST, SERVER, BROADCAST, now, 10)
        if not ctrl.complete:
            raise ProtocolError("round ended before the control exchange completed")

        timings = RoundTimings(
            t_c1_c1=compute[0],
            t_c2_c2=compute[1],
            t_c1_s=uplink_time[0],
            t_c2_s=uplink_time[1],
            t_s_s=t_s_s,
            t_s_broadcast=airtime,
            t_control=len(ctrl.messages) * ctrl.latency_s,
            serial_compute=opts.serial_compute,
        )
        self.global_params = new_global
        self.clock = t0 + timings.total
        events.sort(key=lambda e: e.time)
        return RoundTrace(round_index, t0, events, timings, list(ctrl.messages),
                          list(data.intervals), links, wall)


def run_round(
    global_params: ModelParams,
    clients,
    train_config: TrainConfig,
    phy_config: PhyConfig,
    channel_model: ChannelModel,
    round_index: int = 1,
    options: RoundOptions = RoundOptions(),
):
    """One round from a common starting model; returns ``(new_global, trace)``."""
    fed = Federation(clients, global_params, train_config, phy_config, channel_model, options)
    trace = fed.run_round(round_index)
    return fed.global_params, trace


# -- sessions -----------------------------------------------------------------

@dataclass
class SessionResult:
    accuracies: list[float]
    confusions: list[np.ndarray]
    traces: list[RoundTrace]
    initial_model: ModelParams
    final_model: ModelParams
    converged: bool
    threshold: float

    @property
    def rounds(self) -> int:
        return len(self.accuracies)

    @property
    def best_accuracy(self) -> float:
        return max(self.accuracies)

    @property
    def final_accuracy(self) -> float:
        return self.accuracies[-1]

    @property
    def total_time_s(self) -> float:
        return sum(t.timings.total for t in self.traces)


def federation_from_config(config, clients, phy_config=None) -> Federation:
    init = init_model(config.init_seed, config.hidden)
    train_cfg = TrainConfig(learning_rate=config.lr, epochs=config.epochs,
                            batch_size=config.batch_size, seed=config.init_seed)
    phy = phy_config or PhyConfig(tx_power_db=config.tx_power_db, noise_floor_db=config.noise_floor_db)
    channel = ChannelModel.from_config(phy, config.channel_seed, config.noiseless)
    options = RoundOptions(
        gap_policy=config.gap_policy,
        control_latency_s=config.control_latency_s,
        serial_compute=config.serial_compute,
        persist_optimizer=config.persist_optimizer,
        compute_timing=config.compute_timing,
        seconds_per_sample_epoch=config.seconds_per_sample_epoch,
        aggregation_seconds=config.aggregation_seconds,
        wall_clock_scale=config.wall_clock_scale,
    )
    return Federation(tuple(clients), init, train_cfg, phy, channel, options)


def run_session(config, clients=None, test: list[LabeledImage] | None = None, progress=None) -> SessionResult:
    """Run rounds until test accuracy reaches the threshold or ``max_rounds`` is hit.

    ``clients``/``test`` are loaded from ``config.data_dir`` when omitted.
    """
    if clients is None or test is None:
        from .data import load_mnist_dir, partition

        train, test = load_mnist_dir(config.data_dir, config.classes, config.data_seed, config.max_per_class)
        clients = partition(train, config.partition, config.data_seed)
    fed = federation_from_config(config, clients)
    initial = fed.global_params
    accs, confusions, traces = [], [], []
    converged = False
    for r in range(1, config.max_rounds + 1):
        try:
            trace = fed.run_round(r)
        except ProtocolError as exc:
            raise ProtocolError(f"round {r}: {exc}") from exc
        acc, conf = evaluate(fed.global_params, test)
        accs.append(acc)
        confusions.append(conf)
        traces.append(trace)
        if progress:
            progress(r, acc, trace)
        if acc >= config.threshold:
            converged = True
            break
    return SessionResult(accs, confusions, traces, initial, fed.global_params, converged, config.threshold)


# -- reporting ------------------------------------------------------------------

TIMING_COLUMNS = ("round", "acc", "t_c1_c1", "t_c2_c2", "t_c1_s", "t_c2_s", "t_s_s", "t_broadcast", "t_control",
                  "total")


@dataclass
class TimingReport:
    rows: list[dict]
    cumulative: dict
    compute_mode: str

    def to_csv(self) -> str:
        lines = [",".join(TIMING_COLUMNS)]
        for row in self.rows:
            lines.append(",".join(_fmt(row[c]) for c in TIMING_COLUMNS))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        head = f"{'round':>5} {'acc':>6} " + " ".join(f"{c:>10}" for c in TIMING_COLUMNS[2:])
        out = [f"# compute timing: {self.compute_mode}", head]
        for row in self.rows + [self.cumulative]:
            acc = "" if row["acc"] is None else f"{row['acc']:.4f}"
            out.append(f"{str(row['round']):>5} {acc:>6} "
                       + " ".join(f"{row[c]:>10.3f}" for c in TIMING_COLUMNS[2:]))
        return "\n".join(out) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 9))
    return str(v)


def timing_report(traces: list[RoundTrace], accuracies=None, compute_mode: str = "analytic") -> TimingReport:
    """Per-round and cumulative breakdown of every RoundTimings component (seconds)."""
    if not traces:
        raise ValueError("timing_report needs at least one round")
    rows = []
    for i, tr in enumerate(traces):
        t = tr.timings
        rows.append({
            "round": tr.round_index,
            "acc": None if accuracies is None else float(accuracies[i]),
            "t_c1_c1": t.t_c1_c1, "t_c2_c2": t.t_c2_c2,
            "t_c1_s": t.t_c1_s, "t_c2_s": t.t_c2_s,
            "t_s_s": t.t_s_s, "t_broadcast": t.t_s_broadcast,
            "t_control": t.t_control, "total": t.total,
        })
    cumulative = {"round": "total", "acc": None}
    for key in ("t_c1_c1", "t_c2_c2", "t_c1_s", "t_c2_s", "t_s_s", "t_broadcast", "t_control", "total"):
        cumulative[key] = sum(r[key] for r in rows)
    return TimingReport(rows, cumulative, compute_mode)


def format_trace(traces: list[RoundTrace]) -> str:
    """``<sim_time_s> <node> <event>`` lines, session-absolute time."""
    return "".join(f"{e.time:.6f} {e.node} {e.event}\n" for tr in traces for e in tr.events)
