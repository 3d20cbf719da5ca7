import json

import numpy as np
import pytest

from certpgo import manifold as mf
from certpgo.certify import DC2Config, dc2_pgo, init_chordal
from certpgo.netsim import (
    ControlSignal, EigSegment, NetworkTeam, PrivacyViolation, PublicPoseUpdate, RoundScheduler,
    payload_units, run_distributed,
)
from certpgo.posegraph import PoseGraph, build_connection_laplacian, partition
from certpgo.rbcd import SolverConfig, rbcd, rbcd_pp, select

from conftest import three_robot_graph, make_central


def make_network(graph, record=True):
    return NetworkTeam(graph, partition(graph), build_connection_laplacian(graph), record=record)


def drop_inter_edges(graph, keep_every=2):
    """Same graph with only every ``keep_every``-th inter-robot edge kept."""
    own = graph.ownership
    intra = [e for e in graph.edges if own[e.i] == own[e.j]]
    inter = [e for e in graph.edges if own[e.i] != own[e.j]]
    return PoseGraph(graph.dimension, graph.num_poses, tuple(intra + inter[::keep_every]), own)


def one_pose_round_payload(graph):
    team = make_network(graph)
    team.share(np.zeros((graph.d + 2, (graph.d + 1) * graph.n)))
    return team.audit()["max_pose_round_payload"], team.m_inter


# -- equivalence -------------------------------------------------------------

@pytest.mark.parametrize("rule", ["greedy", "uniform", "importance"])
def test_three_robot_distributed_trace_equals_central(rule):
    g, _ = three_robot_graph(seed=0)
    cfg = DC2Config(solver=SolverConfig(grad_tol=1e-1, max_iters=2000, selection=rule, seed=1), seed=1)
    central = dc2_pgo(g, cfg)
    dist, team = run_distributed(g, config=cfg)
    assert dist.cost_trace == central.cost_trace
    assert dist.f_sdp == central.f_sdp and dist.certified == central.certified
    np.testing.assert_array_equal(dist.poses.matrix(), central.poses.matrix())
    assert team.audit()["private_leaks"] == 0


@pytest.mark.parametrize("solver", [rbcd, rbcd_pp])
def test_both_solvers_equivalent_on_sim(small_sim, solver):
    g, _ = small_sim
    X0 = mf.random_lift(init_chordal(g), 4, seed=2)
    cfg = SolverConfig(grad_tol=1e-2, max_iters=300, seed=2)
    _, log_c = solver(make_central(g), X0, cfg)
    _, log_n = solver(make_network(g), X0, cfg)
    assert log_c.costs == log_n.costs
    assert log_c.grad_norms == log_n.grad_norms


def test_chordal_init_equivalent(small_sim):
    g, _ = small_sim
    a = init_chordal(g, team=make_central(g))
    b = init_chordal(g, team=make_network(g))
    np.testing.assert_array_equal(a.matrix(), b.matrix())


def test_floodmax_selects_central_argmax(small_sim):
    g, _ = small_sim
    team = make_network(g)
    rng = np.random.default_rng(0)
    for _ in range(5):
        values = rng.random(team.num_robots).tolist()
        before = team.net.round
        seen = team.flood(values)
        assert team.net.round - before == team.diameter
        assert select("greedy", seen) == int(np.argmax(values))


# -- communication contracts -------------------------------------------------

def test_relay_sends_one_matrix_per_hop(small_sim):
    g, _ = small_sim
    team = make_network(g)
    sent = []
    original = team.net.send
    team.net.send = lambda msg: (sent.append(msg), original(msg))
    Y1 = np.random.default_rng(1).standard_normal((5, 3))
    out = team.relay(Y1)
    np.testing.assert_array_equal(out, Y1)
    assert len(sent) == team.num_robots - 1
    assert all(isinstance(m, ControlSignal) and m.value.shape == (5, 3) for m in sent)
    # every robot other than the root receives it exactly once
    assert sorted(m.receiver for m in sent) == list(range(1, team.num_robots))


def test_zero_inter_robot_edges_zero_payload(small_sim):
    # connected graphs need inter-robot edges whenever there are several robots,
    # so the zero case is the same graph owned by a single robot
    g, _ = small_sim
    single = PoseGraph(g.dimension, g.num_poses, g.edges, np.zeros(g.num_poses, int))
    team = make_network(single)
    team.share(np.zeros((4, 4 * g.n)))
    audit = team.audit()
    assert audit["m_inter"] == 0 and audit["max_pose_round_payload"] == 0


def test_payload_bounded_by_inter_robot_edges(small_sim):
    g, _ = small_sim
    payload, m_inter = one_pose_round_payload(g)
    assert 0 < payload <= 2 * m_inter


def test_doubling_inter_robot_closures_doubles_payload(grid9):
    g, _ = grid9
    full, m_full = one_pose_round_payload(g)
    half, m_half = one_pose_round_payload(drop_inter_edges(g))
    assert m_full >= 2 * m_half - 1
    assert 1.8 <= full / half <= 2.2


def test_eig_round_one_exchange_per_neighbor(small_sim):
    g, _ = small_sim
    team = make_network(g)
    sent = []
    original = team.net.send
    team.net.send = lambda msg: (sent.append(msg), original(msg))
    rounds = team.net.round
    team.share(np.zeros((4, 4 * g.n)), "eig")
    assert team.net.round == rounds + 1
    assert all(isinstance(m, EigSegment) for m in sent)
    pairs = {(m.sender, m.receiver) for m in sent}
    expected = {(a, b) for a in range(team.num_robots) for b in team.part.neighbors[a]}
    assert pairs == expected
    # each public pose goes once to each robot that needs it
    assert len(sent) == sum(blk.nbr_poses.size for blk in team.blocks)


def test_private_pose_cannot_be_sent(small_sim):
    g, _ = small_sim
    team = make_network(g)
    private = int(np.flatnonzero(~team.part.is_public)[0])
    owner = int(team.part.owner[private])
    other = (owner + 1) % team.num_robots
    team.outgoing[owner].append((other, private))
    with pytest.raises(PrivacyViolation):
        team.share(np.zeros((4, 4 * g.n)))


def test_audit_reports_no_leaks_after_full_run(small_sim):
    g, _ = small_sim
    _, team = run_distributed(g, config=DC2Config(seed=0))
    audit = team.audit()
    assert audit["private_leaks"] == 0
    assert team.accessed_poses <= set(np.flatnonzero(team.part.is_public).tolist())
    assert audit["max_pose_round_payload"] <= audit["payload_bound_constant"] * audit["m_inter"]
    assert {"pose", "eig", "Y1"} <= set(audit["phases"])


# -- transcripts and scheduler -----------------------------------------------

def test_transcripts_deterministic_and_json(small_sim_2d):
    g, _ = small_sim_2d
    cfg = DC2Config(seed=4, solver=SolverConfig(grad_tol=1e-1, max_iters=2000, selection="uniform", seed=4))
    _, a = run_distributed(g, config=cfg)
    _, b = run_distributed(g, config=cfg)
    ta, tb = a.net.dump_transcript(), b.net.dump_transcript()
    assert ta == tb and ta
    for line in ta.splitlines()[:200]:
        rec = json.loads(line)
        assert set(rec) == {"round", "type", "sender", "receiver", "tag", "pose", "payload"}


def test_scheduler_delivers_next_round_in_send_order():
    net = RoundScheduler(2)
    m1 = PublicPoseUpdate(0, 1, 3, np.zeros((2, 3)))
    m2 = PublicPoseUpdate(0, 1, 5, np.zeros((2, 3)))
    net.send(m1)
    net.send(m2)
    assert net.inboxes[1] == []
    net.deliver("pose")
    assert net.inboxes[1] == [m1, m2] and net.round == 1
    assert payload_units(m1) == 1 and payload_units(ControlSignal(0, 1, "restart")) == 0
    net.deliver("pose")
    assert net.inboxes[1] == []


def test_spanning_tree_init_rejected_in_distributed_mode(small_sim):
    g, _ = small_sim
    with pytest.raises(ValueError):
        run_distributed(g, config=DC2Config(init="spanning-tree"))
