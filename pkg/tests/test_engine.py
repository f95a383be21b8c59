import math
import random

import pytest

from coldboot.clustersim import Barrier, FlowNetwork, Resource, Simulator


def maxmin_oracle(capacities, routes, caps):
    """Textbook water filling: raise every unfrozen rate together until a link or a cap saturates."""
    rates = [0.0] * len(routes)
    live = set(range(len(routes)))
    while live:
        step = math.inf
        for link, cap in capacities.items():
            users = [i for i in live if link in routes[i]]
            if users:
                used = sum(rates[i] for i in range(len(routes)) if link in routes[i])
                step = min(step, (cap - used) / len(users))
        for i in live:
            step = min(step, caps[i] - rates[i])
        for i in live:
            rates[i] += step
        done = set()
        for link, cap in capacities.items():
            used = sum(rates[i] for i in range(len(routes)) if link in routes[i])
            if used >= cap - 1e-9:
                done |= {i for i in live if link in routes[i]}
        done |= {i for i in live if rates[i] >= caps[i] - 1e-9}
        live -= done
    return rates


def test_timeouts_run_in_order_with_stable_ties():
    sim = Simulator()
    seen = []

    def proc(name, delay):
        yield sim.timeout(delay)
        seen.append((sim.now, name))

    for name, delay in [("a", 5), ("b", 1), ("c", 5)]:
        sim.process(proc(name, delay))
    sim.run()
    assert seen == [(1, "b"), (5, "a"), (5, "c")]


def test_negative_delay_rejected():
    with pytest.raises(ValueError):
        Simulator().timeout(-1)


def test_resource_is_fifo():
    sim = Simulator()
    res = Resource(sim, capacity=1)
    out = []

    def user(name):
        yield res.acquire()
        yield sim.timeout(10)
        out.append((name, sim.now))
        res.release()

    for n in "xyz":
        sim.process(user(n))
    sim.run()
    assert out == [("x", 10), ("y", 20), ("z", 30)]


def test_barrier_releases_at_last_arrival():
    sim = Simulator()
    bar = Barrier(sim, 3)
    times = []

    def p(d):
        yield sim.timeout(d)
        yield bar.arrive()
        times.append(sim.now)

    for d in (1, 7, 3):
        sim.process(p(d))
    sim.run()
    assert times == [7, 7, 7]


def test_two_flows_share_a_link():
    sim = Simulator()
    net = FlowNetwork(sim)
    link = net.link("l", 1e9)
    ends = []
    for size in (1e6, 2e6):
        net.transfer(size, [link]).on(lambda f: ends.append(f.end))
    sim.run()
    assert ends == pytest.approx([2.0, 3.0])
    assert link.bytes_delivered == pytest.approx(3e6)


@pytest.mark.parametrize("seed", range(25))
def test_allocation_matches_water_filling(seed):
    rng = random.Random(seed)
    sim = Simulator()
    net = FlowNetwork(sim)
    names = [f"l{k}" for k in range(rng.randint(1, 5))]
    capacities = {n: rng.uniform(1e8, 5e9) for n in names}
    links = {n: net.link(n, capacities[n]) for n in names}
    routes, caps = [], []
    for _ in range(rng.randint(1, 12)):
        route = rng.sample(names, rng.randint(1, len(names)))
        cap = rng.choice([math.inf, rng.uniform(5e7, 3e9)])
        routes.append(route)
        caps.append(cap)
        net.transfer(1e12, [links[n] for n in route], max_rate_bps=cap)
    flows = sorted({f.id: f for l in links.values() for f in l.active}.values(), key=lambda f: f.id)
    want = maxmin_oracle({n: c / 1000 for n, c in capacities.items()}, routes, [c / 1000 for c in caps])
    assert [f.rate for f in flows] == pytest.approx(want, rel=1e-6)


def test_throttle_is_sticky():
    sim = Simulator()
    net = FlowNetwork(sim)
    src = net.link("src", 1e9, threshold=1, penalty=4.0)
    done = {}
    net.transfer(1e6, [src], tag="a").on(lambda f: done.setdefault("a", f))
    net.transfer(1e6, [src], tag="b").on(lambda f: done.setdefault("b", f))
    sim.run()
    assert src.flows_throttled == 1
    assert done["b"].throttled == [src] and done["a"].throttled == []
    # b gets an eighth while a is active, then a quarter of the link alone
    assert done["a"].end == pytest.approx(1e6 / (1e6 * 7 / 8))
    t_a = done["a"].end
    left = 1e6 - t_a * 1e6 / 8
    assert done["b"].end == pytest.approx(t_a + left / (1e6 / 4))


def test_zero_byte_flow_completes_immediately():
    sim = Simulator()
    net = FlowNetwork(sim)
    ev = net.transfer(0, [net.link("l", 1e9)])
    assert ev.triggered and ev.value.end == 0
