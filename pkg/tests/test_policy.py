"""Tests for admission, peer selection strategies and the centralized proxy scorer."""

import random

import pytest

from geokv.cost import CostParams, estimate_cost, queue_wait_time
from geokv.errors import AllRegionsSaturatedError, NoPeerAvailableError
from geokv.policy import (
    DecisionKind,
    PeerSummary,
    PolicyConfig,
    RegionState,
    Strategy,
    handle_request,
    local_has_capacity,
    route_central,
    score_central,
    select_peer_gorgo,
    select_peer_least_load,
    select_peer_prefix_trie,
)
from geokv.prefix_index import PrefixIndex
from geokv.sim import Backend, BackendModel

# Per-token rate implied by the worked three-region example (ms/token).
EXAMPLE_T_P = 0.0466


@pytest.fixture
def example_peers():
    """US-West 3 ms away with 6500 running tokens, Germany idle, Israel with 4200 queued tokens."""
    return [
        PeerSummary(region_id="us-west", rtt_ms=3.0, state=RegionState(region_id="us-west", running_tokens=6500)),
        PeerSummary(region_id="germany", rtt_ms=281.0, state=RegionState(region_id="germany")),
        PeerSummary(region_id="israel", rtt_ms=183.0, state=RegionState(region_id="israel", waiting_tokens=4200)),
    ]


@pytest.fixture
def example_index():
    """US-West holds 5% of the prompt, Israel 15%, Germany nothing."""
    tokens = tuple(range(1000))
    index = PrefixIndex(block_size=1)
    index.insert(tokens[:50], "us-west", now=0)
    index.insert(tokens[:150], "israel", now=0)
    return index


@pytest.fixture
def saturated_ingress(busy_state):
    """Ingress one long prompt behind, peers as last gossiped: Germany idle, Israel mid-prefill."""
    local = busy_state("us-west", running_tokens=3200)
    peers = [
        PeerSummary(region_id="germany", rtt_ms=281.0, state=RegionState(region_id="germany")),
        PeerSummary(
            region_id="israel", rtt_ms=183.0, state=RegionState(region_id="israel", running_requests=1, running_tokens=3429)
        ),
    ]
    return local, peers


def test_local_has_capacity(policy_config):
    """Test both admission bounds, each exclusive."""
    assert local_has_capacity(RegionState(region_id="a"), policy_config)
    assert not local_has_capacity(RegionState(region_id="a", running_requests=10), policy_config)
    assert not local_has_capacity(RegionState(region_id="a", kv_cache_used_fraction=0.9), policy_config)
    assert local_has_capacity(RegionState(region_id="a", running_requests=9, kv_cache_used_fraction=0.89), policy_config)


def test_queue_wait_matches_example_delays():
    """Test the queue delays quoted for the three-region example."""
    assert queue_wait_time(6500, EXAMPLE_T_P, 1.0) == pytest.approx(302.9, abs=3)
    assert queue_wait_time(4200, EXAMPLE_T_P, 1.0) == pytest.approx(195.75, abs=0.1)


def test_example_costs_without_prefill(example_peers):
    """Test the per-region estimates with the prompt's prefill term zeroed out."""
    params = CostParams(t_p=EXAMPLE_T_P)
    totals = {p.region_id: estimate_cost(p, 1000, 1000, params).total_ms for p in example_peers}
    assert totals["us-west"] == pytest.approx(305.9, abs=0.01)
    assert totals["germany"] == pytest.approx(281.0)
    assert totals["israel"] == pytest.approx(378.72, abs=0.01)


def test_example_gorgo_picks_germany(make_request, example_peers, example_index):
    """Test that the cost argmin picks the idle far region over the cache holder."""
    req = make_request(tokens=tuple(range(1000)))
    chosen, table = select_peer_gorgo(req, None, example_peers, example_index, CostParams(t_p=EXAMPLE_T_P))
    assert chosen == "germany"
    assert {b.region_id for b in table} == {"us-west", "germany", "israel"}
    assert {b.region_id: b.overlap_tokens for b in table} == {"us-west": 50, "germany": 0, "israel": 150}


def test_example_prefix_trie_picks_israel(make_request, example_peers, example_index):
    """Test that prefix-trie routing follows the largest cache hit."""
    req = make_request(tokens=tuple(range(1000)))
    assert select_peer_prefix_trie(req, example_peers, example_index) == "israel"


def test_example_least_load_picks_germany(example_peers):
    """Test that least-load routing picks the idle region."""
    assert select_peer_least_load(example_peers) == "germany"


def test_least_load_tie_breaks():
    """Test that equal loads go to the lower RTT, then the smaller id."""
    state = RegionState(region_id="x", waiting_tokens=10)
    peers = [
        PeerSummary(region_id="c", rtt_ms=50.0, state=state),
        PeerSummary(region_id="b", rtt_ms=20.0, state=state),
        PeerSummary(region_id="a", rtt_ms=20.0, state=state),
    ]
    assert select_peer_least_load(peers) == "a"


def test_least_load_request_metric():
    """Test the request-count availability measure."""
    peers = [
        PeerSummary(region_id="a", rtt_ms=1.0, state=RegionState(region_id="a", waiting_requests=3, waiting_tokens=10)),
        PeerSummary(region_id="b", rtt_ms=1.0, state=RegionState(region_id="b", waiting_requests=1, waiting_tokens=900)),
    ]
    assert select_peer_least_load(peers) == "a"
    assert select_peer_least_load(peers, "requests") == "b"


def test_prefix_trie_falls_back_to_least_load(make_request):
    """Test that zero overlap everywhere defers to least-load."""
    peers = [
        PeerSummary(region_id="a", rtt_ms=1.0, state=RegionState(region_id="a", waiting_tokens=100)),
        PeerSummary(region_id="b", rtt_ms=9.0, state=RegionState(region_id="b")),
    ]
    req = make_request(tokens=(1, 2, 3))
    assert select_peer_prefix_trie(req, peers, PrefixIndex()) == select_peer_least_load(peers) == "b"


def test_selection_rejects_empty_peer_sets(make_request):
    """Test that every selector refuses an empty candidate set."""
    req = make_request()
    with pytest.raises(NoPeerAvailableError):
        select_peer_least_load([])
    with pytest.raises(NoPeerAvailableError):
        select_peer_prefix_trie(req, [], PrefixIndex())
    with pytest.raises(NoPeerAvailableError):
        select_peer_gorgo(req, None, [], PrefixIndex(), CostParams())


def test_gorgo_dominant_candidate(make_request):
    """Test that a free, fully cached neighbour costs nothing and wins."""
    tokens = tuple(range(64))
    index = PrefixIndex()
    index.insert(tokens, "near", now=0)
    peers = [
        PeerSummary(region_id="near", rtt_ms=0.0, state=RegionState(region_id="near")),
        PeerSummary(region_id="far", rtt_ms=40.0, state=RegionState(region_id="far")),
    ]
    chosen, table = select_peer_gorgo(make_request(tokens=tokens), None, peers, index, CostParams())
    assert chosen == "near"
    assert next(b for b in table if b.region_id == "near").total_ms == 0


def test_gorgo_matches_brute_force_rescoring(make_request):
    """Test the argmin against an independent re-scoring of 50-candidate sets."""
    rng = random.Random(7)
    params = CostParams()
    for trial in range(100):
        tokens = tuple(rng.randrange(8) for _ in range(rng.randint(1, 200)))
        index = PrefixIndex(block_size=1)
        peers = []
        for i in range(50):
            region = f"r{i:02d}"
            if rng.random() < 0.5:
                index.insert(tokens[: rng.randint(1, len(tokens))], region, now=trial)
            state = RegionState(region_id=region, running_tokens=rng.randrange(5000), waiting_tokens=rng.randrange(5000))
            peers.append(PeerSummary(region_id=region, rtt_ms=float(rng.randrange(300)), state=state))

        def oracle_cost(peer, tokens=tokens, index=index):
            overlap = index.overlap_for_node(tokens, peer.region_id)
            total = peer.rtt_ms + (len(tokens) - overlap) * params.t_p + peer.state.pending_tokens * params.t_p
            return (total, peer.rtt_ms, peer.region_id)

        expected = min(peers, key=oracle_cost).region_id
        chosen, table = select_peer_gorgo(make_request(tokens=tokens), None, peers, index, params)
        assert len(table) == 50
        assert chosen == expected


def test_gorgo_dominance(make_request):
    """Test that a candidate no worse on every component and better on one is never passed over."""
    rng = random.Random(11)
    tokens = tuple(range(256))
    for _ in range(200):
        index = PrefixIndex(block_size=1)
        y_overlap = rng.randint(0, 200)
        x_overlap = rng.randint(y_overlap, 256)
        if y_overlap:
            index.insert(tokens[:y_overlap], "y", now=0)
        if x_overlap:
            index.insert(tokens[:x_overlap], "x", now=0)
        y_rtt, y_pending = rng.uniform(0, 300), rng.randint(0, 5000)
        x_rtt, x_pending = rng.uniform(0, y_rtt), rng.randint(0, y_pending)
        peers = [
            PeerSummary(region_id="y", rtt_ms=y_rtt, state=RegionState(region_id="y", waiting_tokens=y_pending)),
            PeerSummary(region_id="x", rtt_ms=x_rtt, state=RegionState(region_id="x", waiting_tokens=x_pending)),
        ]
        chosen, _ = select_peer_gorgo(make_request(tokens=tokens), None, peers, index, CostParams())
        assert chosen == "x"


def test_gorgo_zero_queue_weight_ignores_load(make_request):
    """Test that with q_s = 0 the ranking depends only on RTT and residual prefill."""
    peers = [
        PeerSummary(region_id="busy", rtt_ms=10.0, state=RegionState(region_id="busy", waiting_tokens=100_000)),
        PeerSummary(region_id="idle", rtt_ms=20.0, state=RegionState(region_id="idle")),
    ]
    chosen, _ = select_peer_gorgo(make_request(tokens=(1, 2)), None, peers, PrefixIndex(), CostParams(q_s=0.0))
    assert chosen == "busy"


def test_gorgo_excludes_old_summaries(make_request):
    """Test the exclusion bound: old peers drop out, and with nothing left selection fails."""
    params = CostParams(exclude_after_ms=100.0)
    old = PeerSummary(region_id="old", rtt_ms=0.0, state=RegionState(region_id="old"), as_of_us=0)
    new = PeerSummary(region_id="new", rtt_ms=50.0, state=RegionState(region_id="new"), as_of_us=150_000)
    req = make_request()
    chosen, table = select_peer_gorgo(req, None, [old, new], PrefixIndex(), params, now_us=200_000)
    assert chosen == "new"
    assert [b.region_id for b in table] == ["new"]
    with pytest.raises(NoPeerAvailableError):
        select_peer_gorgo(req, None, [old], PrefixIndex(), params, now_us=200_000)


@pytest.mark.parametrize("strategy", list(Strategy))
def test_idle_local_always_serves(make_request, strategy):
    """Test the admission short-circuit under every strategy."""
    decision = handle_request(
        make_request(), RegionState(region_id="us-west"), [], PrefixIndex(), PolicyConfig(strategy=strategy)
    )
    assert decision.kind == DecisionKind.SERVE_LOCAL
    assert decision.target is None


def test_saturated_ingress_gorgo_forwards_to_germany(make_request, saturated_ingress):
    """Test the per-request decision: Germany beats the local queue and Israel's backlog."""
    local, peers = saturated_ingress
    req = make_request(tokens=tuple(range(650)))
    decision = handle_request(req, local, peers, PrefixIndex(), PolicyConfig())

    assert decision.kind == DecisionKind.FORWARD
    assert decision.target == "germany"
    assert decision.chosen_cost == pytest.approx(281 + 650 * 0.0938)
    costs = {b.region_id: b.total_ms for b in decision.breakdown}
    assert costs["us-west"] == pytest.approx((650 + 3200) * 0.0938)
    assert costs["israel"] == pytest.approx(183 + (650 + 3429) * 0.0938)


def test_saturated_ingress_prefix_trie_forwards_to_israel(make_request, saturated_ingress):
    """Test that prefix-trie routing chases Israel's cached prefix across the backlog."""
    local, peers = saturated_ingress
    tokens = tuple(range(650))
    index = PrefixIndex()
    index.insert(tokens[:400], "israel", now=0)
    decision = handle_request(make_request(tokens=tokens), local, peers, index, PolicyConfig(strategy=Strategy.PREFIX_TRIE))
    assert decision.kind == DecisionKind.FORWARD
    assert decision.target == "israel"

    gorgo = handle_request(make_request(tokens=tokens), local, peers, index, PolicyConfig())
    assert gorgo.target == "germany"


def test_gorgo_queues_locally_when_cheapest(make_request, busy_state):
    """Test that a short local queue beats distant idle peers."""
    local = busy_state("us-west", running_tokens=100)
    peers = [PeerSummary(region_id="germany", rtt_ms=281.0, state=RegionState(region_id="germany"))]
    decision = handle_request(make_request(tokens=tuple(range(100))), local, peers, PrefixIndex(), PolicyConfig())
    assert decision.kind == DecisionKind.QUEUE_LOCAL
    assert decision.cause == "cheapest"
    assert decision.chosen_cost == pytest.approx(200 * 0.0938)


def test_hop_bound_queues_locally(make_request, busy_state):
    """Test that a request at the hop bound is never forwarded."""
    req = make_request()
    for i, region in enumerate(["a", "b", "c"]):
        req.add_hop(region, i + 1)
    assert req.hop_count == 2
    peers = [PeerSummary(region_id="d", rtt_ms=1.0, state=RegionState(region_id="d"))]
    decision = handle_request(req, busy_state("c"), peers, PrefixIndex(), PolicyConfig(max_hops=2))
    assert decision.kind == DecisionKind.QUEUE_LOCAL
    assert decision.cause == "max_hops"


def test_hop_bound_with_full_queue_rejects(make_request, busy_state):
    """Test that a full local queue at the hop bound rejects."""
    req = make_request(tokens=tuple(range(10)))
    req.add_hop("a", 1)
    req.add_hop("b", 2)
    local = busy_state("b", waiting_tokens=100, queue_limit_tokens=105)
    decision = handle_request(req, local, [], PrefixIndex(), PolicyConfig(max_hops=1))
    assert decision.kind == DecisionKind.REJECT
    assert decision.cause == "saturated"


def test_visited_regions_are_not_candidates(make_request, busy_state):
    """Test that a request never bounces back to a region it came through."""
    req = make_request()
    req.add_hop("germany", 1)
    req.add_hop("us-west", 2)
    peers = [
        PeerSummary(region_id="germany", rtt_ms=1.0, state=RegionState(region_id="germany")),
        PeerSummary(region_id="israel", rtt_ms=100.0, state=RegionState(region_id="israel")),
    ]
    decision = handle_request(req, busy_state("us-west", running_tokens=50_000), peers, PrefixIndex(), PolicyConfig())
    assert decision.target == "israel"


def test_no_peers_queues_locally(make_request, busy_state):
    """Test the saturated ingress with an empty peer table."""
    decision = handle_request(make_request(), busy_state("solo"), [], PrefixIndex(), PolicyConfig())
    assert decision.kind == DecisionKind.QUEUE_LOCAL
    assert decision.cause == "no_peers"


def test_hop_count_above_bound_is_rejected_input(make_request, busy_state):
    """Test that handle_request refuses requests already past the hop bound."""
    req = make_request()
    for i in range(4):
        req.add_hop(f"r{i}", i + 1)
    with pytest.raises(ValueError):
        handle_request(req, busy_state("r3"), [], PrefixIndex(), PolicyConfig(max_hops=2))


def test_decisions_are_deterministic(make_request, saturated_ingress):
    """Test that identical inputs give identical decisions."""
    local, peers = saturated_ingress
    for strategy in Strategy:
        cfg = PolicyConfig(strategy=strategy)
        first = handle_request(make_request(tokens=tuple(range(650))), local, peers, PrefixIndex(), cfg)
        second = handle_request(make_request(tokens=tuple(range(650))), local, peers, PrefixIndex(), cfg)
        assert first == second


def test_central_idle_equal_rtt_follows_overlap(make_request):
    """Test that with nothing else to separate regions the proxy picks the cache holder."""
    tokens = tuple(range(128))
    index = PrefixIndex()
    index.insert(tokens[:96], "b", now=0)
    states = [RegionState(region_id=r) for r in ("a", "b", "c")]
    region = route_central(make_request(tokens=tokens), states, index, dict.fromkeys("abc", 10.0), CostParams())
    assert region == "b"


def test_central_example_picks_germany(make_request):
    """Test the proxy co-located with the US-West ingress on the example states."""
    states = [
        RegionState(region_id="us-west", running_tokens=6500),
        RegionState(region_id="germany"),
        RegionState(region_id="israel", waiting_tokens=4200),
    ]
    rtts = {"us-west": 3.0, "germany": 281.0, "israel": 183.0}
    region = route_central(make_request(tokens=tuple(range(1000))), states, PrefixIndex(), rtts, CostParams(t_p=EXAMPLE_T_P))
    assert region == "germany"


def test_central_all_saturated(make_request):
    """Test that the proxy signals back-off when no region has queue room."""
    states = [RegionState(region_id=r, waiting_tokens=10, queue_limit_tokens=10) for r in ("a", "b")]
    with pytest.raises(AllRegionsSaturatedError):
        score_central(make_request(), states, PrefixIndex(), {"a": 0.0, "b": 0.0}, CostParams())
    with pytest.raises(NoPeerAvailableError):
        score_central(make_request(), [], PrefixIndex(), {}, CostParams())


def test_central_matches_decentralized_argmin(make_request):
    """Test central scoring against the decentralized argmin with proxy RTTs on 500 random snapshots."""
    rng = random.Random(2024)
    params = CostParams()
    regions = ["us-west", "germany", "israel", "japan", "brazil"]
    for step in range(500):
        tokens = tuple(rng.randrange(16) for _ in range(rng.randint(1, 300)))
        index = PrefixIndex(block_size=rng.choice([1, 4, 16]))
        for region in regions:
            if rng.random() < 0.6:
                index.insert(tokens[: rng.randint(1, len(tokens))], region, now=step)
        states = [
            RegionState(region_id=r, running_tokens=rng.randrange(8000), waiting_tokens=rng.randrange(8000))
            for r in regions
        ]
        rtts = {r: float(rng.randrange(0, 300)) for r in regions}
        req = make_request(tokens=tokens, request_id=step)

        central = route_central(req, states, index, rtts, params)
        peers = [PeerSummary(region_id=s.region_id, rtt_ms=rtts[s.region_id], state=s) for s in states]
        decentralized, _ = select_peer_gorgo(req, None, peers, index, params)
        assert central == decentralized


def test_full_decoding_batch_forwards_to_idle_peer(make_request):
    """Test that a batch whose only slot is busy decoding a long answer sends arrivals to an idle peer."""
    backend = Backend("us-west", BackendModel(max_running=1), block_size=16, schedule=lambda *_: None)
    backend.admit(make_request(tokens=tuple(range(16)), output_tokens=100), 0)
    backend.on_admit(0, 0)
    backend.on_prefill_done(0, 152_221)
    local = backend.state(400_000)
    assert local.running_tokens > 0

    peers = [PeerSummary(region_id="germany", rtt_ms=281.0, state=RegionState(region_id="germany"))]
    req = make_request(tokens=tuple(range(1000, 1500)), request_id=1)
    decision = handle_request(req, local, peers, PrefixIndex(), PolicyConfig(running_threshold=1))
    assert decision.kind == DecisionKind.FORWARD
    assert decision.target == "germany"
