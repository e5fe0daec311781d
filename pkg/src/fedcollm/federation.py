"""Federated co-tuning orchestration.

One communication round: broadcast the global small-model adapter, let
every client fine-tune a copy on its private shard, aggregate the client
adapters (plain mean or masked secure aggregation), then run the mutual
transfer phase on the server where the large and small models fine-tune
on auxiliary data while distilling from each other's frozen logits.

Also hosts the baseline runners (standalone, fedavg, centralized) that
the experiment layer wraps with evaluation.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import lora, secagg
from .errors import ProtocolError
from .losses import DistillWeights, server_losses, task_loss
from .lora import LoraAdapterSet
from .model import LanguageModel, forward
from .seeding import derive_seed
from .tensor import backward, sgd_step

BOS_ID = 1
F64_BYTES = 8
FIXED_POINT_BYTES = 4


def training_sequence(doc: list[int], context_len: int) -> list[int]:
    """Prepend BOS and clamp to the model context."""
    return ([BOS_ID] + list(doc))[:context_len]


@dataclass
class ClientState:
    """One simulated client: a private shard and a local adapter for the
    shared frozen small model."""

    client_id: int
    docs: list[list[int]]
    model: LanguageModel          # shared, frozen
    adapters: LoraAdapterSet      # theta_k
    lr: float
    local_epochs: int
    batch_size: int = 4


@dataclass
class ServerState:
    """Server holdings: the large model with its adapter, the global small
    model adapter, and auxiliary data for the transfer phase."""

    slm: LanguageModel
    slm_adapters: LoraAdapterSet              # global theta
    llm: LanguageModel | None = None
    llm_adapters: LoraAdapterSet | None = None   # omega
    aux_docs: list[list[int]] = field(default_factory=list)
    distill_steps: int = 0                    # R
    lr_theta: float = 5e-3
    lr_omega: float = 5e-3
    weights: DistillWeights = field(default_factory=DistillWeights)
    kd_direction: str = "forward"
    distill_batch_size: int = 4


@dataclass
class RoundTranscript:
    """Audit record of one communication round."""

    round_index: int
    broadcast_checksum: str
    client_checksums: dict[int, str]
    client_losses: dict[int, list[float]]
    aggregate_checksum: str
    distill_losses: list[tuple[float, float]]
    bytes_down: int
    bytes_up: int

    @property
    def bytes_total(self) -> int:
        return self.bytes_down + self.bytes_up

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "broadcast_checksum": self.broadcast_checksum,
            "client_checksums": {str(k): v for k, v in self.client_checksums.items()},
            "client_losses": {str(k): v for k, v in self.client_losses.items()},
            "aggregate_checksum": self.aggregate_checksum,
            "distill_losses": [[f, g] for f, g in self.distill_losses],
            "bytes_down": self.bytes_down,
            "bytes_up": self.bytes_up,
            "bytes_total": self.bytes_total,
        }


class RunResult(NamedTuple):
    theta: LoraAdapterSet
    omega: LoraAdapterSet | None
    transcripts: list[RoundTranscript]


@dataclass(frozen=True)
class FederationConfig:
    rounds: int
    master_seed: int
    parallel_clients: bool = False


# ---------------------------------------------------------------------------
# transports
# ---------------------------------------------------------------------------


class PlainTransport:
    """Uploads raw f64 adapter vectors; the server sees every update."""

    name = "plain"
    bytes_per_param = F64_BYTES

    def __init__(self):
        self.bytes_down = 0
        self.bytes_up = 0
        self._round = 0
        self._uploads: dict[int, np.ndarray] = {}

    def round_start(self, round_index: int) -> None:
        self._round = round_index
        self._uploads = {}

    def broadcast(self, adapters: LoraAdapterSet, n_clients: int) -> LoraAdapterSet:
        vec = lora.flatten(adapters)
        self.bytes_down += n_clients * vec.size * F64_BYTES
        return adapters.copy()

    def upload(self, client_id: int, adapters: LoraAdapterSet) -> None:
        vec = lora.flatten(adapters)
        self.bytes_up += vec.size * F64_BYTES
        self._uploads[client_id] = (vec, adapters.config)

    def aggregate_uploads(self, n_layers, d_model, lora_cfg) -> LoraAdapterSet:
        vectors = [self._uploads[cid][0] for cid in sorted(self._uploads)]
        mean = np.mean(np.stack(vectors, axis=0), axis=0)
        return lora.unflatten_dims(mean, n_layers, d_model, lora_cfg)


class SecureTransport:
    """Fixed-point wire format; uploads are pairwise-masked so the server
    only ever recovers the mean of the client updates."""

    name = "secure"
    bytes_per_param = FIXED_POINT_BYTES

    def __init__(self, master_seed: int, client_ids, clip: float = 0.1):
        self.clip = clip
        self.client_ids = sorted(client_ids)
        self.seeds = secagg.PairwiseSeeds.trusted_setup(master_seed, self.client_ids)
        self.bytes_down = 0
        self.bytes_up = 0
        self._round = 0
        self._shares: list[secagg.MaskedShare] = []

    def round_start(self, round_index: int) -> None:
        self._round = round_index
        self._shares = []

    def broadcast(self, adapters: LoraAdapterSet, n_clients: int) -> LoraAdapterSet:
        vec = lora.flatten(adapters)
        q = secagg.quantize(vec, self.clip)
        self.bytes_down += n_clients * q.size * FIXED_POINT_BYTES
        received = secagg.dequantize(q, self.clip)
        return lora.unflatten_dims(received, adapters.n_layers, adapters.d_model,
                                   adapters.config)

    def upload(self, client_id: int, adapters: LoraAdapterSet) -> None:
        vec = lora.flatten(adapters)
        share = secagg.mask_update(client_id, vec, self.seeds, self.clip, self._round)
        self.bytes_up += share.values.size * FIXED_POINT_BYTES
        self._shares.append(share)

    def aggregate_uploads(self, n_layers, d_model, lora_cfg) -> LoraAdapterSet:
        mean = secagg.secure_aggregate(self._shares, self.clip, expected_clients=self.client_ids)
        return lora.unflatten_dims(mean, n_layers, d_model, lora_cfg)


def make_transport(kind: str, master_seed: int, client_ids, clip: float = 0.1):
    if kind == "plain":
        return PlainTransport()
    if kind == "secure":
        return SecureTransport(master_seed, client_ids, clip)
    raise ProtocolError(f"unknown transport kind {kind!r}")


# ---------------------------------------------------------------------------
# local and server-side updates
# ---------------------------------------------------------------------------


def _batch_loss(model: LanguageModel, adapters: LoraAdapterSet, docs: list[list[int]]):
    terms = []
    for doc in docs:
        seq = training_sequence(doc, model.config.context_len)
        logits = forward(model, seq, adapters)
        terms.append(task_loss(logits, seq))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / len(terms)


def _train_adapters(
    model: LanguageModel,
    adapters: LoraAdapterSet,
    docs: list[list[int]],
    lr: float,
    epochs: int,
    batch_size: int,
    seed: int,
) -> list[float]:
    """In-place SGD on the adapter set; returns mean training loss per epoch."""
    params = adapters.trainable_params()
    rng = np.random.default_rng(seed)
    epoch_losses = []
    for _ in range(epochs):
        order = rng.permutation(len(docs))
        step_losses = []
        for start in range(0, len(order), batch_size):
            batch = [docs[i] for i in order[start : start + batch_size]]
            loss = _batch_loss(model, adapters, batch)
            backward(loss, leaves=params)
            sgd_step(params, lr)
            step_losses.append(loss.item())
        epoch_losses.append(float(np.mean(step_losses)))
    return epoch_losses


def client_update(
    client: ClientState, global_theta: LoraAdapterSet, shuffle_seed: int
) -> tuple[LoraAdapterSet, list[float]]:
    """Replace the local adapter with the received global one, then run E
    local epochs of SGD on the client's shard. The frozen base is untouched."""
    if not client.adapters.same_config(global_theta):
        raise ProtocolError(
            f"client {client.client_id}: adapter config does not match the broadcast"
        )
    theta_k = global_theta.copy()
    client.adapters = theta_k
    losses = _train_adapters(
        client.model, theta_k, client.docs, client.lr,
        client.local_epochs, client.batch_size, shuffle_seed,
    )
    return theta_k, losses


def aggregate(updates: list[LoraAdapterSet]) -> LoraAdapterSet:
    """Uniform elementwise mean of client adapter sets."""
    if not updates:
        raise ProtocolError("aggregate received no updates")
    first = updates[0]
    for upd in updates[1:]:
        if not first.same_config(upd):
            raise ProtocolError("aggregate received mismatched adapter configs")
    mean = np.mean(np.stack([lora.flatten(u) for u in updates], axis=0), axis=0)
    return lora.unflatten_dims(mean, first.n_layers, first.d_model, first.config)


def mutual_transfer(server: ServerState, seed: int) -> list[tuple[float, float]]:
    """R steps of bidirectional transfer on auxiliary batches.

    Both losses are computed from logits captured before either update,
    then theta and omega step sequentially. Returns (L_f, L_g) per step.
    """
    if server.distill_steps == 0:
        return []
    if server.llm is None or server.llm_adapters is None:
        raise ProtocolError("mutual transfer requires the server language model")
    if not server.aux_docs:
        raise ProtocolError("mutual transfer requires a non-empty auxiliary shard")
    if server.llm.config.vocab_size != server.slm.config.vocab_size:
        raise ProtocolError("server models must share one vocabulary")

    theta_params = server.slm_adapters.trainable_params()
    omega_params = server.llm_adapters.trainable_params()
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(server.distill_steps):
        take = min(server.distill_batch_size, len(server.aux_docs))
        batch_ids = rng.choice(len(server.aux_docs), size=take, replace=False)
        f_terms, g_terms = [], []
        for i in batch_ids:
            seq = training_sequence(server.aux_docs[int(i)],
                                    min(server.slm.config.context_len,
                                        server.llm.config.context_len))
            llm_logits = forward(server.llm, seq, server.llm_adapters)
            slm_logits = forward(server.slm, seq, server.slm_adapters)
            loss_f, loss_g = server_losses(
                llm_logits, slm_logits, seq, server.weights, server.kd_direction
            )
            f_terms.append(loss_f)
            g_terms.append(loss_g)
        loss_f = f_terms[0]
        loss_g = g_terms[0]
        for t in f_terms[1:]:
            loss_f = loss_f + t
        for t in g_terms[1:]:
            loss_g = loss_g + t
        loss_f = loss_f / len(f_terms)
        loss_g = loss_g / len(g_terms)
        backward(loss_g, leaves=theta_params)
        backward(loss_f, leaves=omega_params)
        sgd_step(theta_params, server.lr_theta)
        sgd_step(omega_params, server.lr_omega)
        losses.append((loss_f.item(), loss_g.item()))
    return losses


# ---------------------------------------------------------------------------
# full protocol and baselines
# ---------------------------------------------------------------------------


def run_fedcollm(
    config: FederationConfig,
    clients: list[ClientState],
    server: ServerState,
    transport,
) -> RunResult:
    """T rounds of broadcast, local updates, aggregation, mutual transfer.

    Deterministic in (configs, master seed, data); raises ProtocolError if
    a frozen base model changed during the run.
    """
    if not clients:
        raise ProtocolError("run_fedcollm needs at least one client")
    if config.rounds < 1:
        raise ProtocolError("run_fedcollm needs at least one round")

    phi_before = server.slm.checksum()
    psi_before = server.llm.checksum() if server.llm is not None else None

    lora_cfg = server.slm_adapters.config
    transcripts = []

    for t in range(1, config.rounds + 1):
        transport.round_start(t)
        theta = server.slm_adapters
        broadcast_sum = theta.checksum()
        received = transport.broadcast(theta, len(clients))

        def one_client(client: ClientState):
            seed = derive_seed(config.master_seed, "client", client.client_id, "round", t)
            return client.client_id, client_update(client, received, seed)

        if config.parallel_clients:
            with ThreadPoolExecutor(max_workers=len(clients)) as pool:
                results = dict(pool.map(one_client, clients))
        else:
            results = dict(one_client(c) for c in clients)

        client_checksums = {}
        client_losses = {}
        for cid in sorted(results):
            updated, losses = results[cid]
            transport.upload(cid, updated)
            client_checksums[cid] = updated.checksum()
            client_losses[cid] = losses

        aggregated = transport.aggregate_uploads(
            server.slm_adapters.n_layers, server.slm_adapters.d_model, lora_cfg)
        server.slm_adapters = aggregated

        distill_losses = mutual_transfer(
            server, derive_seed(config.master_seed, "distill", "round", t)
        )

        transcripts.append(
            RoundTranscript(
                round_index=t,
                broadcast_checksum=broadcast_sum,
                client_checksums=client_checksums,
                client_losses=client_losses,
                aggregate_checksum=aggregated.checksum(),
                distill_losses=distill_losses,
                bytes_down=transport.bytes_down,
                bytes_up=transport.bytes_up,
            )
        )
        transport.bytes_down = 0
        transport.bytes_up = 0

    if server.slm.checksum() != phi_before:
        raise ProtocolError("frozen small-model base changed during the run")
    if psi_before is not None and server.llm.checksum() != psi_before:
        raise ProtocolError("frozen large-model base changed during the run")

    return RunResult(server.slm_adapters, server.llm_adapters, transcripts)


def run_standalone(
    clients: list[ClientState], rounds: int, master_seed: int
) -> dict[int, tuple[LoraAdapterSet, list[list[float]]]]:
    """Each client trains alone for the same round/epoch schedule, with the
    same per-round data order seeds as the federated run, no aggregation."""
    out = {}
    for client in clients:
        theta = client.adapters
        curves = []
        for t in range(1, rounds + 1):
            seed = derive_seed(master_seed, "client", client.client_id, "round", t)
            theta, losses = client_update(client, theta, seed)
            curves.append(losses)
        out[client.client_id] = (theta, curves)
    return out


def run_fedavg(
    config: FederationConfig,
    clients: list[ClientState],
    server: ServerState,
    transport,
) -> RunResult:
    """Plain federated averaging: the co-tuning loop with no transfer phase
    and no server language model."""
    server.distill_steps = 0
    server.llm = None
    server.llm_adapters = None
    return run_fedcollm(config, clients, server, transport)


def run_centralized(
    model: LanguageModel,
    adapters: LoraAdapterSet,
    docs: list[list[int]],
    lr: float,
    epochs: int,
    batch_size: int,
    master_seed: int,
) -> tuple[LoraAdapterSet, list[float]]:
    """Fine-tune one adapter on the pooled dataset (all client shards plus
    the auxiliary shard)."""
    if not docs:
        raise ProtocolError("centralized training needs documents")
    adapters = adapters.copy()
    losses = _train_adapters(
        model, adapters, docs, lr, epochs, batch_size,
        derive_seed(master_seed, "centralized"),
    )
    return adapters, losses
