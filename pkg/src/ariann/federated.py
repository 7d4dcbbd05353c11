"""n-client private federated learning over the 2-party substrate.

Each client trains a 2-party-shared model copy against the server; updated
client-side shares are aggregated through pairwise PRG masks that cancel in
the sum, so a randomly chosen aggregator client learns only the sum of
share-1 vectors and the server only the sum of share-0 vectors. Collusion of
up to k clients with the server reveals nothing about a non-colluding
client's update: every update is blinded by at least one surviving mask.

Seed exchange is simulated as authenticated in-process delivery; mask
derivation is expand(seed XOR round counter XOR block counter), see
prg.mask_stream.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from . import prg, train as train_mod
from .dealer import make_dealer
from .ring import RingTensor, ring_mask
from .runtime import run_local_pair
from .sharing import AdditiveShare, forbid_reconstruction, share, truncate
from .train import PrivateModel, TrainConfig


@dataclass(frozen=True)
class FlTopology:
    """Ring of n clients; client i shares seeds with its k successors.

    n = 1 with k = 0 is the degenerate single-client case (no masking, plain
    2-party training); otherwise 1 <= k < n.
    """

    n_clients: int
    k: int

    def __post_init__(self):
        if self.n_clients == 1:
            if self.k != 0:
                raise ValueError("a single client cannot exchange seeds")
        elif not 1 <= self.k < self.n_clients:
            raise ValueError("need 1 <= k < n_clients")

    def seed_edges(self) -> list:
        """Directed (giver, receiver) pairs; exactly n*k edges."""
        n = self.n_clients
        return [(i, (i + j) % n) for i in range(n) for j in range(1, self.k + 1)]


def parse_topology_config(text: str):
    """key=value config: n, k, and optional clientI=host:port endpoints."""
    values = {}
    endpoints = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key.startswith("client"):
            endpoints[int(key[6:])] = val
        else:
            values[key] = val
    topo = FlTopology(int(values["n"]), int(values["k"]))
    return topo, endpoints


def format_topology_config(topo: FlTopology, endpoints: dict = None) -> str:
    lines = [f"n={topo.n_clients}", f"k={topo.k}"]
    for idx in sorted(endpoints or {}):
        lines.append(f"client{idx}={endpoints[idx]}")
    return "\n".join(lines) + "\n"


def make_seed_table(topo: FlTopology, rng: np.random.Generator) -> dict:
    """One 16-byte seed per directed edge, held by both endpoints."""
    return {edge: prg.random_seeds(rng, 1)[0].tobytes()
            for edge in topo.seed_edges()}


def client_mask(topo: FlTopology, seed_table: dict, client: int,
                round_idx: int, size: int, n_bits: int) -> np.ndarray:
    """Global mask mu_i = sum of own-seed masks minus received-seed masks."""
    mask = np.zeros(size, dtype=np.uint64)
    width = ring_mask(n_bits)
    for giver, receiver in topo.seed_edges():
        if giver == client:
            mask = (mask + prg.mask_stream(seed_table[(giver, receiver)],
                                           round_idx, size, n_bits)) & width
        elif receiver == client:
            mask = (mask - prg.mask_stream(seed_table[(giver, receiver)],
                                           round_idx, size, n_bits)) & width
    return mask


def fl_mask(topo: FlTopology, seed_table: dict, client: int, round_idx: int,
            vec: np.ndarray, n_bits: int) -> np.ndarray:
    """Blind one client's share vector before sending it to the aggregator."""
    mu = client_mask(topo, seed_table, client, round_idx, vec.size, n_bits)
    return (vec + mu) & ring_mask(n_bits)


def fl_aggregate(server_vecs: list, masked_client_vecs: list,
                 n_bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Sum both sides; masks cancel, so the result is a sharing of the sum.

    Raises if any client contribution is missing (no dropout recovery).
    """
    if any(v is None for v in server_vecs) or any(v is None for v in masked_client_vecs):
        raise ValueError("missing client share: aggregation round aborted")
    if len(server_vecs) != len(masked_client_vecs):
        raise ValueError("server/client share counts differ")
    width = ring_mask(n_bits)
    agg0 = np.zeros_like(server_vecs[0])
    for v in server_vecs:
        agg0 = (agg0 + v) & width
    agg1 = np.zeros_like(masked_client_vecs[0])
    for v in masked_client_vecs:
        agg1 = (agg1 + v) & width
    return agg0, agg1


# ---------------------------------------------------------------------------
# Model <-> flat vector plumbing
# ---------------------------------------------------------------------------

def model_vector(model: PrivateModel) -> np.ndarray:
    parts = []
    for layer in model.layers:
        for _, param, _, _ in layer.parameters():
            parts.append(param.values.data.reshape(-1))
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.uint64)


def load_model_vector(model: PrivateModel, vec: np.ndarray):
    off = 0
    for layer in model.layers:
        for attr, param, _, vel_attr in layer.parameters():
            size = param.values.size
            data = vec[off:off + size].reshape(param.shape).copy()
            setattr(layer, attr,
                    AdditiveShare(param.party,
                                  RingTensor(data, param.n_bits, _trusted=True),
                                  param.precision))
            setattr(layer, vel_attr, train_mod._zeros_like(param))
            off += size
    if off != vec.size:
        raise ValueError("vector does not match the model")


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

@dataclass
class FlSession:
    topology: FlTopology
    n_bits: int
    precision: int
    server_models: list = field(default_factory=list)
    client_models: list = field(default_factory=list)
    seed_table: dict = None
    round_idx: int = 0
    public_rng: np.random.Generator = None


def fl_init(params_float: list, topo: FlTopology, n_bits: int, precision: int,
            rng: np.random.Generator, public_seed: int = 0) -> FlSession:
    """Server secret-shares an independent copy of the model per client."""
    state = FlSession(topo, n_bits, precision)
    for _ in range(topo.n_clients):
        m0, m1 = train_mod.mlp_from_params(params_float, n_bits, precision, rng)
        state.server_models.append(m0)
        state.client_models.append(m1)
    state.seed_table = make_seed_table(topo, rng)
    state.public_rng = np.random.default_rng(public_seed)
    return state


def fl_round(state: FlSession, client_data: list, config: TrainConfig,
             dealer_seed: int = 0, normalize: bool = True) -> int:
    """One federated round: parallel 2-party training, mask, aggregate.

    client_data[i] = (x_shares_pair, y_shares_pair) with party 0 = server.
    The aggregate stays shared end to end; returns the aggregator's index.
    The reference protocol sums client models; here the sum is additionally
    normalized by 1/n so the next round trains at the original scale (opt out
    with normalize=False).
    """
    topo = state.topology
    n = topo.n_clients
    errors = [None] * n

    def run_client(i):
        try:
            d = make_dealer(state.n_bits, seed=(dealer_seed, state.round_idx, i))
            (xs, ys) = client_data[i]
            models = {0: state.server_models[i], 1: state.client_models[i]}

            def program(session):
                prep = d.for_party(session.party)
                train_mod.train(session, models[session.party],
                                xs[session.party], ys[session.party],
                                config, prep)
                return None

            run_local_pair(program)
        except BaseException as exc:
            errors[i] = exc

    with forbid_reconstruction("federated round must not open model state"):
        threads = [threading.Thread(target=run_client, args=(i,)) for i in range(n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for err in errors:
            if err is not None:
                raise RuntimeError("client training failed: round aborted") from err

        aggregator = int(state.public_rng.integers(0, n))
        server_vecs = [model_vector(m) for m in state.server_models]
        masked = [fl_mask(topo, state.seed_table, i, state.round_idx,
                          model_vector(state.client_models[i]), state.n_bits)
                  for i in range(n)]
        agg0, agg1 = fl_aggregate(server_vecs, masked, state.n_bits)

        if normalize:
            p = state.precision
            pair = (AdditiveShare(0, RingTensor(agg0, state.n_bits), p),
                    AdditiveShare(1, RingTensor(agg1, state.n_bits), p))
            pair = tuple(truncate(s.mul_public_fixed(1.0 / n, p), p) for s in pair)
            agg0, agg1 = pair[0].values.data, pair[1].values.data

        for i in range(n):
            load_model_vector(state.server_models[i], agg0)
            load_model_vector(state.client_models[i], agg1)
    state.round_idx += 1
    return aggregator
