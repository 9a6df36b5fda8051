"""Framed wire protocol, worker server, and client slot pool."""

import socket
import struct
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowpipe.codec import BIN_V1, TEXT_V1, get_codec
from flowpipe.envelope import payload
from flowpipe.errors import MalformedBody, Oversize, Truncated, Unreachable, VersionMismatch
from flowpipe.remote import (
    MAX_FRAME_BYTES,
    PROTOCOL_VERSION,
    WorkerServer,
    connect,
    decode_frame,
    encode_frame,
)
from flowpipe.worker import FunctionRef, WorkerChain, WorkerRegistry, apply_chain, compose_chain


def sample_messages():
    env = payload({"k": [1, 2, b"\x00"]}, 3)
    from flowpipe import envelope as env_mod

    return [
        {"type": "HELLO", "protocol_version": 1, "client_name": "c", "codec": TEXT_V1},
        {"type": "HELLO_ACK", "protocol_version": 1, "worker_names": ["identity"], "slots": 2},
        {"type": "CALL", "call_id": 9, "piper": "p",
         "chain": WorkerChain((FunctionRef("identity"),)).to_wire(),
         "inbox": [env_mod.to_wire(env)]},
        {"type": "RESULT", "call_id": 9, "envelope": env_mod.to_wire(env)},
        {"type": "PING"},
        {"type": "PONG"},
        {"type": "SHUTDOWN"},
    ]


class TestFrames:
    @pytest.mark.parametrize("codec_id", [TEXT_V1, BIN_V1])
    def test_roundtrip_every_message_type(self, codec_id):
        for msg in sample_messages():
            assert decode_frame(encode_frame(msg, codec_id), codec_id) == msg

    def test_oversize_encode(self):
        msg = {"type": "PING", "pad": "x" * (MAX_FRAME_BYTES + 1)}
        with pytest.raises(Oversize):
            encode_frame(msg)

    def test_oversize_declared_length(self):
        data = struct.pack(">I", MAX_FRAME_BYTES + 1) + b"{}"
        with pytest.raises(Oversize):
            decode_frame(data)

    def test_truncated_header_and_body(self):
        with pytest.raises(Truncated):
            decode_frame(b"\x00\x00")
        full = encode_frame({"type": "PING"})
        with pytest.raises(Truncated):
            decode_frame(full[:-1])

    def test_unknown_type_rejected(self):
        body = get_codec(TEXT_V1).encode({"type": "NOPE"})
        with pytest.raises(MalformedBody):
            decode_frame(struct.pack(">I", len(body)) + body)

    def test_missing_field_rejected(self):
        body = get_codec(TEXT_V1).encode({"type": "CALL", "call_id": 1})
        with pytest.raises(MalformedBody):
            decode_frame(struct.pack(">I", len(body)) + body)

    @given(data=st.binary(max_size=300))
    @settings(max_examples=300, deadline=None)
    def test_fuzz_never_crashes(self, data):
        try:
            decode_frame(data, TEXT_V1)
        except (Oversize, Truncated, MalformedBody):
            pass
        try:
            decode_frame(data, BIN_V1)
        except (Oversize, Truncated, MalformedBody):
            pass


def make_server_registry():
    reg = WorkerRegistry()
    reg.register("inc", lambda inbox: inbox[0] + 1)
    reg.register("sleepy", lambda inbox, s=0.1: (time.sleep(s), inbox[0])[1])
    reg.register("boom", lambda inbox: 1 / 0)
    return reg


@pytest.fixture
def server():
    srv = WorkerServer(make_server_registry(), port=0, slots=2)
    srv.start()
    yield srv
    srv.stop()


class TestHandshake:
    def test_hello_ack_lists_workers_and_slots(self, server):
        pool = connect("127.0.0.1", server.port)
        assert "identity" in pool.worker_names
        assert "inc" in pool.worker_names
        assert pool.slots == 2
        pool.close()

    def test_connect_dead_port(self):
        sacrificial = socket.socket()
        sacrificial.bind(("127.0.0.1", 0))
        port = sacrificial.getsockname()[1]
        sacrificial.close()
        with pytest.raises(Unreachable):
            connect("127.0.0.1", port, timeout_s=1.0)

    def test_version_mismatch(self):
        listener = socket.socket()
        listener.bind(("127.0.0.1", 0))
        listener.listen(1)
        port = listener.getsockname()[1]

        def impostor():
            conn, _ = listener.accept()
            from flowpipe.remote import read_frame, write_frame

            read_frame(conn, get_codec(TEXT_V1))
            write_frame(conn, {"type": "HELLO_ACK", "protocol_version": 99,
                               "worker_names": [], "slots": 1}, get_codec(TEXT_V1))
            conn.close()

        t = threading.Thread(target=impostor, daemon=True)
        t.start()
        with pytest.raises(VersionMismatch):
            connect("127.0.0.1", port)
        listener.close()


class TestCalls:
    def test_identity_roundtrip(self, server):
        pool = connect("127.0.0.1", server.port)
        chain = WorkerChain((FunctionRef("identity"),))
        out = pool.call(chain, [payload(7, 0)], piper="p")
        assert not out.is_fault and out.value == 7 and out.item_index == 0
        pool.close()

    def test_bin_codec_connection(self, server):
        pool = connect("127.0.0.1", server.port, codec=BIN_V1)
        chain = WorkerChain((FunctionRef("inc"),))
        out = pool.call(chain, [payload(byte_heavy := b"\x00\x01" * 100, 0)], piper="p")
        assert out.is_fault  # bytes + 1 raises TypeError remotely: a user fault
        out2 = pool.call(chain, [payload(41, 1)], piper="p")
        assert out2.value == 42
        pool.close()

    def test_unknown_chain_name_is_remote_error(self, server):
        pool = connect("127.0.0.1", server.port)
        chain = WorkerChain((FunctionRef("nosuch"),))
        out = pool.call(chain, [payload(1, 0)], piper="p")
        assert out.is_fault and out.fault.error_class == "remote_error"
        assert "nosuch" in out.fault.message
        pool.close()

    def test_remote_fault_provenance_matches_local(self, server):
        registry = make_server_registry()
        chain = compose_chain(["inc", "boom"], registry)
        local = apply_chain(chain, [payload(5, 3)], piper="p", registry=registry)
        pool = connect("127.0.0.1", server.port)
        remote_env = pool.call(chain, [payload(5, 3)], piper="p")
        pool.close()
        assert remote_env.is_fault and local.is_fault
        assert remote_env.fault.origin_piper == local.fault.origin_piper == "p"
        assert remote_env.fault.stage_index == local.fault.stage_index == 1
        assert remote_env.item_index == local.item_index == 3

    def test_slots_bound_serializes_third_call(self, server):
        pool = connect("127.0.0.1", server.port)
        chain = WorkerChain((FunctionRef("sleepy", {"s": 0.1}),))
        t0 = time.monotonic()
        done = []

        def call(i):
            pool.call(chain, [payload(i, 0)], piper="p")
            done.append(time.monotonic() - t0)

        threads = [threading.Thread(target=call, args=(i,)) for i in range(3)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=5)
        assert len(done) == 3
        # two slots: the third 100 ms call waits for a slot
        assert max(done) >= 0.18
        assert max(done) < 2.0
        pool.close()

    def test_results_matched_by_call_id_not_order(self, server):
        pool = connect("127.0.0.1", server.port)
        slow = WorkerChain((FunctionRef("sleepy", {"s": 0.2}),))
        fast = WorkerChain((FunctionRef("inc"),))
        results = {}

        def call(tag, chain, value):
            results[tag] = pool.call(chain, [payload(value, 0)], piper="p")

        t_slow = threading.Thread(target=call, args=("slow", slow, 10))
        t_fast = threading.Thread(target=call, args=("fast", fast, 1))
        t_slow.start()
        time.sleep(0.02)
        t_fast.start()
        t_fast.join(timeout=5)
        assert "slow" not in results  # fast overtook: inverted completion
        t_slow.join(timeout=5)
        assert results["slow"].value == 10
        assert results["fast"].value == 2
        pool.close()

    def test_server_killed_mid_call(self):
        srv = WorkerServer(make_server_registry(), port=0, slots=1)
        srv.start()
        pool = connect("127.0.0.1", srv.port)
        chain = WorkerChain((FunctionRef("sleepy", {"s": 2.0}),))
        holder = {}

        def call():
            holder["env"] = pool.call(chain, [payload(1, 5)], piper="p")

        t = threading.Thread(target=call)
        t.start()
        time.sleep(0.1)
        srv.stop()
        t.join(timeout=5)
        env = holder["env"]
        assert env.is_fault and env.fault.error_class == "remote_error"
        assert env.item_index == 5
        pool.close()

    def test_shutdown_message_stops_server(self):
        srv = WorkerServer(make_server_registry(), port=0, slots=1)
        waiter = threading.Thread(target=srv.run_forever, daemon=True)
        waiter.start()
        time.sleep(0.05)
        pool = connect("127.0.0.1", srv.port)
        pool.shutdown_server()
        waiter.join(timeout=5)
        assert not waiter.is_alive()
        pool.close()
