import pytest

from fedair.codec import encode_params
from fedair.config import ExperimentConfig
from fedair.data import partition
from fedair.model import TrainConfig, init_model
from fedair.phy import ChannelModel, PhyConfig, train_airtime_s
from fedair.protocol import (BROADCAST, CLIENT1, CLIENT2, ROUND_PROTOCOL, SERVER, ControlChannel, DataChannel,
                             Federation, MessageKind, ProtocolError, RoundAbortedError, RoundOptions,
                             RoundTimings, format_trace, run_round, run_session, timing_report)

HIDDEN = (2, 2)
PHY = PhyConfig()


@pytest.fixture
def toy_clients(toy_train):
    return partition(toy_train, "noniid")


def make_federation(clients, channel=ChannelModel(), epochs=1, options=RoundOptions(), seed=0):
    return Federation(clients, init_model(seed, HIDDEN), TrainConfig(learning_rate=1e-3, epochs=epochs, seed=seed),
                      PHY, channel, options)


def assert_trace_conforms(trace):
    times = [e.time for e in trace.events]
    assert times == sorted(times)
    steps = [e.step for e in trace.events]
    assert steps == sorted(steps), steps
    assert set(steps) == set(range(1, 11))
    ivs = sorted(trace.data_intervals, key=lambda iv: iv.start)
    for a, b in zip(ivs, ivs[1:]):
        assert a.end <= b.start
    assert [iv.link for iv in ivs] == ["client1->server", "client2->server", "server->*"]
    msgs = [(m.kind, m.sender, m.recipient) for m in trace.messages]
    assert msgs == list(ROUND_PROTOCOL)
    stamps = [m.timestamp for m in trace.messages]
    assert stamps == sorted(stamps)


def test_round_event_order_and_tdma(toy_clients):
    fed = make_federation(toy_clients)
    for r in (1, 2):
        trace = fed.run_round(r)
        assert_trace_conforms(trace)
        assert trace.round_index == r


def test_causality_ack_before_start(toy_clients):
    trace = make_federation(toy_clients).run_round(1)
    names = [e.event for e in trace.events]
    ack1 = names.index(f"{MessageKind.ACK_RECEIVED.value} -> {CLIENT1}")
    start2 = names.index(f"{MessageKind.START_TRANSMIT.value} -> {CLIENT2}")
    halt = names.index(f"{MessageKind.HALT_BROADCAST.value} -> {BROADCAST}")
    confirms = [i for i, n in enumerate(names) if n.startswith(MessageKind.RECEIVED_GLOBAL_CONFIRM.value)]
    assert ack1 < start2 and len(confirms) == 2 and max(confirms) < halt
    c2_tx = next(i for i, e in enumerate(trace.events) if e.node == CLIENT2 and "data_tx_start" in e.event)
    assert start2 < c2_tx


def test_out_of_order_message_is_protocol_error():
    ctrl = ControlChannel()
    with pytest.raises(ProtocolError, match="expected AckReceived server->client1, observed StartTransmit"):
        ctrl.send(MessageKind.START_TRANSMIT, SERVER, CLIENT2, 0.0)
    for kind, a, b in ROUND_PROTOCOL:
        ctrl.send(kind, a, b, 0.0)
    with pytest.raises(ProtocolError, match="end of round"):
        ctrl.send(MessageKind.HALT_BROADCAST, SERVER, BROADCAST, 0.0)


def test_self_addressed_message_rejected():
    from fedair.protocol import ControlMessage
    with pytest.raises(ProtocolError):
        ControlMessage(MessageKind.ACK_RECEIVED, SERVER, SERVER, 0.0)


def test_tdma_overlap_rejected():
    ch = DataChannel()
    ch.occupy("a", 0.0, 1.0)
    ch.occupy("b", 1.0, 1.0)
    with pytest.raises(ProtocolError, match="TDMA"):
        ch.occupy("c", 1.5, 0.1)


def test_noop_round_returns_global(toy_clients):
    g = init_model(3, HIDDEN)
    new, trace = run_round(g, toy_clients, TrainConfig(epochs=0), PHY, ChannelModel())
    assert new == g
    assert_trace_conforms(trace)


def test_uplink_airtime_matches_train(toy_clients):
    fed = make_federation(toy_clients)
    trace = fed.run_round(1)
    n = len(encode_params(init_model(0, HIDDEN)))
    assert trace.timings.t_c1_s == pytest.approx(train_airtime_s(n, PHY))
    assert trace.timings.t_s_broadcast == trace.timings.t_c2_s == trace.timings.t_c1_s


def test_full_model_uplink_airtime():
    # 12,099 parameters -> 3,025 packets -> 121.968 s at 252 symbols / 6250 sym/s
    assert train_airtime_s(len(encode_params(init_model(0))), PHY) == pytest.approx(121.968)


def test_timing_additivity_and_modes(toy_clients):
    trace = make_federation(toy_clients, epochs=2).run_round(1)
    t = trace.timings
    assert t.total == pytest.approx(max(t.t_c1_c1, t.t_c2_c2) + t.t_c1_s + t.t_c2_s + t.t_s_s
                                    + t.t_s_broadcast + t.t_control)
    assert t.t_control == pytest.approx(8 * 0.005)
    assert t.t_c1_c1 == pytest.approx(2 * len(toy_clients[0]) * 1e-4)
    assert trace.end_time == pytest.approx(trace.events[-1].time + 0.005)
    serial = make_federation(toy_clients, epochs=2, options=RoundOptions(serial_compute=True)).run_round(1)
    assert serial.timings.total == pytest.approx(t.total + min(t.t_c1_c1, t.t_c2_c2))
    assert_trace_conforms(serial)
    for v in (t.t_c1_c1, t.t_c2_c2, t.t_c1_s, t.t_c2_s, t.t_s_s, t.t_s_broadcast, t.t_control):
        assert v >= 0


def test_wall_clock_mode(toy_clients):
    opts = RoundOptions(compute_timing="wall", wall_clock_scale=2.0)
    trace = make_federation(toy_clients, options=opts).run_round(1)
    assert trace.timings.t_c1_c1 == pytest.approx(2.0 * trace.wall_clock_s["train_client1"])


def test_timing_report(toy_clients):
    fed = make_federation(toy_clients)
    traces = [fed.run_round(r) for r in (1, 2, 3)]
    rep = timing_report(traces, [0.1, 0.2, 0.3])
    assert rep.cumulative["total"] == pytest.approx(sum(tr.timings.total for tr in traces))
    # noiseless, identical configs: identical transmit times every round
    assert len({r["t_c1_s"] for r in rep.rows}) == 1
    lines = rep.to_csv().splitlines()
    assert lines[0] == "round,acc,t_c1_c1,t_c2_c2,t_c1_s,t_c2_s,t_s_s,t_broadcast,t_control,total"
    assert len(lines) == 4
    for line in lines[1:]:
        v = [float(x) for x in line.split(",")[2:]]
        assert max(v[0], v[1]) + sum(v[2:7]) == pytest.approx(v[7])
    assert "analytic" in rep.to_text()
    with pytest.raises(ValueError):
        timing_report([])
    # rounds chain in simulated time
    assert traces[1].start_time == pytest.approx(traces[0].end_time)
    text = format_trace(traces)
    first = text.splitlines()[0].split(" ", 2)
    assert float(first[0]) == 0.0 and first[1] in (CLIENT1, CLIENT2)


def test_round_abort_when_no_frame_found(toy_clients):
    fed = make_federation(toy_clients, channel=ChannelModel(snr_db=-60, seed=1))
    with pytest.raises(RoundAbortedError) as err:
        fed.run_round(1)
    assert err.value.link == "client1->server"


def test_noisy_round_keeps_shapes(toy_clients):
    fed = make_federation(toy_clients, channel=ChannelModel(snr_db=4.0, seed=2))
    trace = fed.run_round(1)
    assert fed.global_params.layer_shapes == init_model(0, HIDDEN).layer_shapes
    assert any(ls.crc_ok < ls.sent for ls in trace.links)
    assert_trace_conforms(trace)


def test_broadcast_updates_clients(toy_clients):
    fed = make_federation(toy_clients)
    fed.run_round(1)
    assert fed.client_params[0] == fed.global_params == fed.client_params[1]


def _session_config(tmp_path, **kw):
    base = dict(hidden=HIDDEN, epochs=1, max_rounds=3, accuracy_threshold=1.01, noiseless=False,
                tx_power_db=8.0)
    base.update(kw)
    return ExperimentConfig(**base)


def test_session_is_bit_reproducible(toy_clients, toy_test, tmp_path):
    cfg = _session_config(tmp_path)
    a = run_session(cfg, toy_clients, toy_test)
    b = run_session(cfg, toy_clients, toy_test)
    assert a.final_model == b.final_model
    assert a.accuracies == b.accuracies
    assert [t.events for t in a.traces] == [t.events for t in b.traces]
    assert [[(l.sent, l.crc_ok) for l in t.links] for t in a.traces] == \
        [[(l.sent, l.crc_ok) for l in t.links] for t in b.traces]
    for t in a.traces:
        assert_trace_conforms(t)


def test_session_stopping_rules(toy_clients, toy_test, tmp_path):
    assert run_session(_session_config(tmp_path, accuracy_threshold=0.0), toy_clients, toy_test).rounds == 1
    capped = run_session(_session_config(tmp_path, max_rounds=3), toy_clients, toy_test)
    assert capped.rounds == 3 and not capped.converged
    assert all(0.0 <= a <= 1.0 for a in capped.accuracies)
    assert capped.total_time_s == pytest.approx(sum(t.timings.total for t in capped.traces))


def test_session_noop_is_bit_exact(toy_clients, toy_test, tmp_path):
    res = run_session(_session_config(tmp_path, epochs=0, max_rounds=1, noiseless=True), toy_clients, toy_test)
    assert res.final_model == res.initial_model


def test_persist_optimizer_changes_training(toy_clients, toy_test, tmp_path):
    a = run_session(_session_config(tmp_path, noiseless=True, max_rounds=2), toy_clients, toy_test)
    b = run_session(_session_config(tmp_path, noiseless=True, max_rounds=2, persist_optimizer=True),
                    toy_clients, toy_test)
    assert a.traces[0].timings.total == b.traces[0].timings.total
    assert a.final_model != b.final_model


def test_session_error_carries_round(toy_clients, toy_test, tmp_path, monkeypatch):
    from fedair import protocol

    calls = {"n": 0}
    original = protocol.ControlChannel.send

    def flaky(self, kind, sender, recipient, now):
        calls["n"] += 1
        if calls["n"] == len(ROUND_PROTOCOL) + 2:  # second message of round 2
            kind = MessageKind.HALT_BROADCAST
        return original(self, kind, sender, recipient, now)

    monkeypatch.setattr(protocol.ControlChannel, "send", flaky)
    with pytest.raises(ProtocolError, match="round 2"):
        run_session(_session_config(tmp_path, noiseless=True), toy_clients, toy_test)


def test_two_clients_required(toy_train):
    with pytest.raises(ValueError):
        Federation((partition(toy_train, "iid")[0],), init_model(0, HIDDEN), TrainConfig(), PHY, ChannelModel())


def test_round_timings_serial_property():
    t = RoundTimings(1.0, 2.0, 3.0, 4.0, 0.5, 6.0, 0.04)
    assert t.t_compute == 2.0 and t.total == pytest.approx(15.54)
    t.serial_compute = True
    assert t.t_compute == 3.0 and t.total == pytest.approx(16.54)


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason="desk-scale subset (400 train images/class) plateaus near 0.965 IID accuracy")
def test_iid_reaches_reference_threshold(mnist, mnist_clients):
    # reference result: IID, 10 epochs converges in 3 rounds; trend tolerance +-2 rounds
    cfg = ExperimentConfig(partition="iid", epochs=10, noiseless=True, accuracy_threshold=0.98, max_rounds=5)
    result = run_session(cfg, mnist_clients["iid"], mnist[1])
    assert result.converged and 1 <= result.rounds <= 5
