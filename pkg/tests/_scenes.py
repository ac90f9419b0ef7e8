"""Seeded random worlds for property sweeps."""

import numpy as np

from gbplan.belief import IntentionBelief, feasible_intentions
from gbplan.dcp_tree import extract_policy_sequences, update_dcp_tree
from gbplan.maps import straight_road
from gbplan.world import Vehicle, VehicleParams, VehicleState, WorldState, full_action_set

ACTIONS = full_action_set()
SEQUENCES = extract_policy_sequences(update_dcp_tree(ACTIONS, ACTIONS[1], 4))


def random_world(rng, n_max=10, n_lanes=None, length=400.0):
    n_lanes = n_lanes or int(rng.integers(1, 4))
    lm = straight_road(n_lanes, length)
    cars = []
    taken = {i: [] for i in range(n_lanes)}
    n = int(rng.integers(1, n_max + 1))
    for vid in range(n):
        for _ in range(50):
            lane = int(rng.integers(n_lanes))
            x = float(rng.uniform(60.0, length - 60.0)) if vid else 150.0
            if all(abs(x - o) > 7.0 for o in taken[lane]):
                break
        else:
            continue
        taken[lane].append(x)
        v = float(rng.uniform(0.0, 15.0))
        cars.append(Vehicle(VehicleParams(vid), VehicleState(x, 3.5 * lane, 0.0, v)))
    return WorldState(0.0, lm, cars, 0)


def random_beliefs(rng, world, p_uncertain=0.6):
    out = {}
    for v in world.agents:
        ok = np.array([lat in feasible_intentions(world, v.id) for lat in range(3)], dtype=float)
        conc = 1.0 if rng.random() < p_uncertain else 0.1
        p = rng.dirichlet(np.full(3, conc)) * ok
        p = p / p.sum() if p.sum() > 0 else ok / ok.sum()
        out[v.id] = IntentionBelief.from_probs(v.id, p)
    return out


def random_scene(seed):
    rng = np.random.default_rng(seed)
    world = random_world(rng)
    beliefs = random_beliefs(rng, world)
    seq = SEQUENCES[int(rng.integers(len(SEQUENCES)))]
    return world, beliefs, seq
