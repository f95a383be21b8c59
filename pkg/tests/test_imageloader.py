import random
import threading

import pytest

from coldboot.blockstore import BlockStore, Layer, LayeredImageSpec, build_image
from coldboot.errors import FetchError, NotFound, TraceError
from coldboot.imageloader import (AccessTrace, HotSet, Node, PeerServer, Policy, RemotePeer, Tracker,
                                  TrackerClient, TrackerServer, derive_hotset, download_trace,
                                  record_trace, start_container, upload_trace)
from oracles import write_layer

BS = 4096


@pytest.fixture
def image(tmp_path):
    rng = random.Random(3)
    files = {"/bin/app": rng.randbytes(10 * BS), "/lib/so": rng.randbytes(3 * BS + 17), "/etc/conf": b"k=v\n"}
    d = tmp_path / "layer"
    d.mkdir()
    write_layer(d, files)
    store = BlockStore(tmp_path / "registry")
    return build_image(LayeredImageSpec("app", [Layer(d)]), store, block_size=BS), store


class Counting:
    def __init__(self, inner, corrupt=False):
        self.inner, self.corrupt, self.calls = inner, corrupt, 0
        self.lock = threading.Lock()

    def get_block(self, block_id):
        with self.lock:
            self.calls += 1
        data = self.inner.get_block(block_id)
        return b"bad" + data[3:] if self.corrupt else data


class FakePeer:
    def __init__(self, store, corrupt=False):
        self.store, self.corrupt, self.calls = store, corrupt, 0

    def get_block(self, block_id):
        self.calls += 1
        data = self.store.get_block(block_id)
        return (b"\0" + data[1:] if self.corrupt else data), block_id


def test_record_trace_collapses_consecutive_repeats(image):
    m, _ = image
    stream = [(5, "/bin/app", 0), (1, "/bin/app", 10), (6, "/bin/app", 100), (7, "/lib/so", 0),
              (8, "/bin/app", 1)]
    trace = record_trace(m, stream)
    assert [(e.t, e.path, e.block_index) for e in trace.events] == [
        (1, "/bin/app", 0), (7, "/lib/so", 0), (8, "/bin/app", 0)]


def test_record_trace_is_stable_for_equal_times(image):
    m, _ = image
    trace = record_trace(m, [(3, "/lib/so", 0), (3, "/bin/app", BS)])
    assert [e.path for e in trace.events] == ["/lib/so", "/bin/app"]


def test_record_trace_rejects_bad_access(image):
    m, _ = image
    with pytest.raises(TraceError):
        record_trace(m, [(0, "/nope", 0)])
    with pytest.raises(TraceError):
        record_trace(m, [(0, "/etc/conf", 4)])


def test_hotset_first_access_governs(image):
    m, _ = image
    trace = record_trace(m, [(10, "/bin/app", 0), (120_000, "/bin/app", BS), (120_001, "/bin/app", 2 * BS),
                             (200_000, "/bin/app", 0)])
    hot = derive_hotset(trace, 120_000, m)
    f = m.file("/bin/app")
    assert hot.blocks == [f.blocks[0], f.blocks[1]]
    assert f.blocks[2] not in hot


def test_hotset_window_must_be_positive(image):
    m, _ = image
    with pytest.raises(ValueError):
        derive_hotset(AccessTrace("app", []), 0, m)


def test_trace_jsonl_roundtrip(image):
    m, _ = image
    trace = record_trace(m, [(1, "/bin/app", 0), (2, "/lib/so", BS)])
    again = AccessTrace.from_jsonl(trace.to_jsonl())
    assert again == trace
    assert HotSet.from_dict(derive_hotset(trace, 5, m).to_dict()) == derive_hotset(trace, 5, m)


def test_source_preference_peer_then_cache_then_registry(image):
    m, store = image
    bid = m.file("/bin/app").blocks[0]
    tracker = Tracker()
    registry, cache = Counting(store), Counting(store)
    peer = FakePeer(store)
    tracker.announce(bid, "p1")
    node = Node("n0", m, tracker, registry, peers={"p1": peer}, cluster_cache=cache)
    assert node.fetch_block(bid)[1] == "peer"
    assert (registry.calls, cache.calls) == (0, 0)
    other = m.file("/bin/app").blocks[1]
    assert node.fetch_block(other)[1] == "cache"
    node2 = Node("n2", m, tracker, registry)
    assert node2.fetch_block(m.file("/lib/so").blocks[0])[1] == "registry"
    assert tracker.locate(bid) == ["n0", "p1"]


def test_corrupt_peer_is_skipped(image):
    m, store = image
    bid = m.file("/bin/app").blocks[3]
    tracker = Tracker()
    tracker.announce(bid, "evil")
    node = Node("n0", m, tracker, Counting(store), peers={"evil": FakePeer(store, corrupt=True)})
    data, tag = node.fetch_block(bid)
    assert tag == "registry" and data == store.get_block(bid)
    assert node.metrics.corrupt_responses == 1


def test_all_sources_bad(image):
    m, store = image
    node = Node("n0", m, Tracker(), Counting(store, corrupt=True))
    with pytest.raises(FetchError):
        node.fetch_block(m.file("/lib/so").blocks[1])


def test_concurrent_faults_fetch_once(image):
    m, store = image
    registry = Counting(store)
    node = Node("n0", m, Tracker(), registry)
    bid = m.file("/bin/app").blocks[5]
    threads = [threading.Thread(target=node.ensure, args=(bid,)) for _ in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert registry.calls == 1


def test_prefetch_leaves_no_faults_in_window(image):
    m, store = image
    stream = [(t * 1000, "/bin/app", (t % 10) * BS) for t in range(200)] + [(300, "/lib/so", 0)]
    trace = record_trace(m, stream)
    hot = derive_hotset(trace, 120_000, m)
    node = Node("n1", m, Tracker(), Counting(store))
    handle = start_container(node, hot, Policy.PREFETCH, stream_workers=8)
    handle.replay(stream)
    assert handle.faults_within(120_000) == []
    assert handle.wait_streaming(timeout=30)
    assert handle.complete
    handle.stop()


def test_lazy_only_faults(image):
    m, store = image
    node = Node("n1", m, Tracker(), Counting(store))
    handle = start_container(node, None, "lazy_only")
    faults = handle.replay([(0, "/bin/app", 0), (1, "/bin/app", 1), (2, "/lib/so", BS)])
    assert [(f.path, f.block_index) for f in faults] == [("/bin/app", 0), ("/lib/so", 1)]
    assert not handle.complete


def test_prefetch_without_hotset_falls_back(image):
    m, store = image
    handle = start_container(Node("n1", m, Tracker(), Counting(store)), None, Policy.PREFETCH)
    assert handle.fell_back and handle.policy is Policy.LAZY_ONLY


def test_node_read_matches_source(image):
    m, store = image
    node = Node("n1", m, Tracker(), store)
    want = store.get_block(m.file("/lib/so").blocks[3])[:17]
    assert node.read("/lib/so", 3 * BS, 17) == want


def test_over_the_wire(image):
    m, store = image
    with TrackerServer() as ts:
        seeder_tracker = TrackerClient(ts.endpoint)
        seeder = Node("seed", m, seeder_tracker, store)
        with PeerServer(seeder) as ps:
            endpoints = {"seed": ps.endpoint}
            for b in m.block_ids():
                seeder.ensure(b)
            registry = Counting(store)
            peers = {}

            def resolve(holder):
                if holder not in peers:
                    peers[holder] = RemotePeer(endpoints[holder])
                return peers[holder]

            node = Node("n1", m, TrackerClient(ts.endpoint), registry, peers=resolve)
            for b in m.block_ids():
                data, tag = node.fetch_block(b)
                assert tag == "peer" and data == store.get_block(b)
            assert registry.calls == 0
            with pytest.raises(NotFound):
                RemotePeer(ps.endpoint).get_block("00" * 32)

        trace = record_trace(m, [(0, "/etc/conf", 0)])
        upload_trace(seeder_tracker, trace)
        assert download_trace(TrackerClient(ts.endpoint), "app") == trace
        with pytest.raises(NotFound):
            download_trace(seeder_tracker, "other")
