"""Experiment assembly: build corpus, splits, models, and adapters from an
ExperimentConfig, run the protocol or a baseline, and emit the run
directory artifacts (config snapshot, metrics JSONL, transcripts,
checkpoints, eval report)."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

from . import checkpoint, data, federation, lora, model
from .config import (
    BASELINE_KINDS,
    ExperimentConfig,
    canonical_json,
    config_digest,
)
from .errors import ConfigError, InputError, ProtocolError
from .federation import ClientState, FederationConfig, ServerState, make_transport
from .losses import DistillWeights
from .lora import LoraConfig
from .model import ModelConfig
from .seeding import derive_seed

PHASE_ORDER = {"client_local": 0, "aggregate": 1, "distill": 2, "eval": 3}


class MetricsWriter:
    """Appends MetricsRecord lines in strict (round, phase, step) order."""

    def __init__(self, path: Path, run_id: str):
        self.path = path
        self.run_id = run_id
        self._last = (-1, -1, -1)
        self._fh = open(path, "w", encoding="utf-8")

    def record(self, phase: str, round_index: int, step: int, metrics: dict) -> None:
        key = (round_index, PHASE_ORDER[phase], step)
        if key <= self._last:
            raise ProtocolError(f"metrics out of order: {key} after {self._last}")
        self._last = key
        line = {
            "run_id": self.run_id,
            "phase": phase,
            "round": round_index,
            "step": step,
            "metrics": {k: metrics[k] for k in sorted(metrics)},
            "wall_time": time.time(),
        }
        self._fh.write(json.dumps(line, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()


@dataclass
class Bundle:
    """Everything a run needs, derived deterministically from the config."""

    cfg: ExperimentConfig
    corpus: data.Corpus
    split: data.FederatedSplit
    slm_cfg: ModelConfig
    llm_cfg: ModelConfig
    slm: model.LanguageModel
    llm: model.LanguageModel
    theta: lora.LoraAdapterSet
    omega: lora.LoraAdapterSet
    client_docs: list[list[list[int]]]
    aux_docs: list[list[int]]
    eval_docs: list[list[int]]
    mcq: list[data.McqInstance]


def build_bundle(cfg: ExperimentConfig) -> Bundle:
    cfg.validate()
    if cfg.data.path is not None:
        corpus = data.load_corpus(cfg.data.path)
    else:
        corpus = data.make_synthetic_corpus(n_docs=cfg.data.n_docs, seed=cfg.data.corpus_seed)

    split = data.partition(
        corpus, cfg.clients, scheme=cfg.data.partition,
        seed=derive_seed(cfg.seed, "partition"), beta=cfg.data.beta,
    )

    slm_cfg = ModelConfig(
        n_layers=cfg.slm.n_layers, d_model=cfg.slm.d_model, n_heads=cfg.slm.n_heads,
        vocab_size=corpus.vocab_size, context_len=cfg.slm.context_len,
        seed=derive_seed(cfg.seed, "model", "slm"),
    )
    llm_cfg = ModelConfig(
        n_layers=cfg.llm.n_layers, d_model=cfg.llm.d_model, n_heads=cfg.llm.n_heads,
        vocab_size=corpus.vocab_size, context_len=cfg.llm.context_len,
        seed=derive_seed(cfg.seed, "model", "llm"),
    )
    slm = model.init_model(slm_cfg)
    llm = model.init_model(llm_cfg)

    theta = lora.new_adapters(slm_cfg, LoraConfig(
        rank=cfg.slm_lora.rank, alpha=cfg.slm_lora.alpha,
        targets=tuple(cfg.slm_lora.targets), seed=derive_seed(cfg.seed, "lora", "slm"),
    ))
    omega = lora.new_adapters(llm_cfg, LoraConfig(
        rank=cfg.llm_lora.rank, alpha=cfg.llm_lora.alpha,
        targets=tuple(cfg.llm_lora.targets), seed=derive_seed(cfg.seed, "lora", "llm"),
    ))

    docs = corpus.documents
    client_docs = [[docs[i] for i in shard] for shard in split.client_shards]
    aux_docs = [docs[i] for i in split.aux]
    eval_docs = [docs[i] for i in split.eval]
    mcq = data.make_mcq_set(
        corpus, cfg.eval.mcq_n, seed=derive_seed(cfg.seed, "mcq"),
        prompt_len=cfg.eval.mcq_prompt_len, choice_len=cfg.eval.mcq_choice_len,
        n_choices=cfg.eval.mcq_choices, doc_ids=split.eval,
    )
    return Bundle(cfg, corpus, split, slm_cfg, llm_cfg, slm, llm, theta, omega,
                  client_docs, aux_docs, eval_docs, mcq)


def make_clients(bundle: Bundle) -> list[ClientState]:
    cfg = bundle.cfg
    return [
        ClientState(
            client_id=k, docs=bundle.client_docs[k], model=bundle.slm,
            adapters=bundle.theta.copy(), lr=cfg.lr_theta,
            local_epochs=cfg.local_epochs, batch_size=cfg.batch_size,
        )
        for k in range(cfg.clients)
    ]


def make_server(bundle: Bundle, with_llm: bool = True) -> ServerState:
    cfg = bundle.cfg
    return ServerState(
        slm=bundle.slm, slm_adapters=bundle.theta.copy(),
        llm=bundle.llm if with_llm else None,
        llm_adapters=bundle.omega.copy() if with_llm else None,
        aux_docs=bundle.aux_docs, distill_steps=cfg.distill_steps,
        lr_theta=cfg.lr_theta, lr_omega=cfg.lr_omega,
        weights=DistillWeights(lam=cfg.distill.lam, temperature=cfg.distill.temperature),
        kd_direction=cfg.distill.direction,
        distill_batch_size=cfg.distill_batch_size,
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _eval_one(lm, adapters, bundle: Bundle) -> dict:
    seqs = [federation.training_sequence(d, lm.config.context_len) for d in bundle.eval_docs]
    ppl = model.perplexity(lm, adapters, seqs)
    correct = 0
    for inst in bundle.mcq:
        prompt = [data.BOS_ID] + inst.prompt
        chosen, _ = model.score_choices(
            lm, adapters, prompt, inst.choices,
            length_normalize=bundle.cfg.eval.length_normalize,
        )
        correct += int(chosen == inst.gold)
    accuracy = correct / len(bundle.mcq) if bundle.mcq else float("nan")
    return {"perplexity": ppl, "mcq_accuracy": accuracy}


def evaluate(bundle: Bundle, theta=None, omega=None) -> dict:
    """Perplexity and choice accuracy on the shared held-out sets.

    Either adapter argument may be None to skip that model; the report
    schema stays identical (null metric values)."""
    slm_metrics = _eval_one(bundle.slm, theta, bundle) if theta is not None else None
    llm_metrics = _eval_one(bundle.llm, omega, bundle) if omega is not None else None
    empty = {"perplexity": None, "mcq_accuracy": None}
    return {"slm": slm_metrics or dict(empty), "llm": llm_metrics or dict(empty)}


def report_skeleton(cfg: ExperimentConfig, method: str) -> dict:
    return {
        "run_id": run_id_for(cfg, method),
        "method": method,
        "config_digest": config_digest(cfg),
        "slm": {"perplexity": None, "mcq_accuracy": None},
        "llm": {"perplexity": None, "mcq_accuracy": None},
        "clients": {},
    }


def run_id_for(cfg: ExperimentConfig, method: str) -> str:
    return derive_run_id(config_digest(cfg), method)


def derive_run_id(digest: str, method: str) -> str:
    import hashlib

    return hashlib.sha256(f"{digest}:{method}".encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# run drivers
# ---------------------------------------------------------------------------


def _prepare_run_dir(cfg: ExperimentConfig, method: str) -> tuple[Path, MetricsWriter, str]:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "config.json").write_text(canonical_json(cfg) + "\n", encoding="utf-8")
    run_id = run_id_for(cfg, method)
    writer = MetricsWriter(out / "metrics.jsonl", run_id)
    return out, writer, run_id


def _write_transcripts(out: Path, transcripts) -> None:
    with open(out / "transcripts.jsonl", "w", encoding="utf-8") as fh:
        for tr in transcripts:
            fh.write(json.dumps(tr.to_dict(), sort_keys=True) + "\n")


def _record_eval(writer: MetricsWriter, round_index: int, report: dict) -> None:
    metrics = {}
    for side in ("slm", "llm"):
        for key, value in report[side].items():
            if value is not None:
                metrics[f"{side}_{key}"] = value
    writer.record("eval", round_index, 0, metrics)


def _emit_round_metrics(writer: MetricsWriter, transcripts, expected_bpp: int,
                        n_clients: int, param_count: int) -> None:
    for tr in transcripts:
        step = 0
        for cid in sorted(tr.client_losses):
            for epoch, loss in enumerate(tr.client_losses[cid]):
                writer.record("client_local", tr.round_index, step,
                              {"client_id": cid, "epoch": epoch, "loss": loss})
                step += 1
        expected = 2 * n_clients * param_count * expected_bpp
        if tr.bytes_total != expected:
            raise ProtocolError(
                f"round {tr.round_index}: byte tally {tr.bytes_total} != "
                f"closed form {expected}"
            )
        writer.record("aggregate", tr.round_index, 0,
                      {"bytes_down": tr.bytes_down, "bytes_up": tr.bytes_up,
                       "bytes_total": tr.bytes_total})
        for step, (loss_f, loss_g) in enumerate(tr.distill_losses):
            writer.record("distill", tr.round_index, step,
                          {"loss_f": loss_f, "loss_g": loss_g})


def run_fedcollm_experiment(cfg: ExperimentConfig) -> dict:
    """The full protocol run; returns the eval report after writing all
    run-directory artifacts."""
    bundle = build_bundle(cfg)
    out, writer, run_id = _prepare_run_dir(cfg, "fedcollm")
    try:
        report = report_skeleton(cfg, "fedcollm")
        initial = None
        if cfg.eval.initial:
            initial = evaluate(bundle, bundle.theta, bundle.omega)
            _record_eval(writer, 0, initial)

        clients = make_clients(bundle)
        server = make_server(bundle, with_llm=True)
        theta, omega = server.slm_adapters, server.llm_adapters
        transcripts = []
        if cfg.rounds > 0:
            transport = make_transport(cfg.transport, cfg.seed, range(cfg.clients), cfg.clip)
            fed_cfg = FederationConfig(rounds=cfg.rounds, master_seed=cfg.seed,
                                       parallel_clients=cfg.parallel_clients)
            theta, omega, transcripts = federation.run_fedcollm(
                fed_cfg, clients, server, transport
            )
            pc = lora.flatten(theta).size
            _emit_round_metrics(writer, transcripts, transport.bytes_per_param,
                                cfg.clients, pc)
            final = evaluate(bundle, theta, omega)
            _record_eval(writer, cfg.rounds, final)
        elif initial is not None:
            final = initial    # nothing trained; the initial eval stands
        else:
            final = evaluate(bundle, theta, omega)
            _record_eval(writer, 0, final)
        report["slm"], report["llm"] = final["slm"], final["llm"]

        _write_transcripts(out, transcripts)
        checkpoint.save_adapters(out / "checkpoints" / "slm_adapters.fclm",
                                 theta, bundle.slm_cfg)
        if omega is not None:
            checkpoint.save_adapters(out / "checkpoints" / "llm_adapters.fclm",
                                     omega, bundle.llm_cfg)
        (out / "eval_report.json").write_text(
            json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        return report
    finally:
        writer.close()


def run_baseline(kind: str, cfg: ExperimentConfig) -> dict:
    """Run one of the four baselines with the same reporting surface as the
    full protocol so reports are row-comparable."""
    if kind not in BASELINE_KINDS:
        raise ConfigError(f"unknown baseline kind {kind!r}; expected one of {BASELINE_KINDS}")
    bundle = build_bundle(cfg)
    out, writer, run_id = _prepare_run_dir(cfg, kind)
    try:
        report = report_skeleton(cfg, kind)
        transcripts = []

        if kind == "zero_shot":
            final = evaluate(bundle, bundle.theta, bundle.omega)
            report["slm"], report["llm"] = final["slm"], final["llm"]
            _record_eval(writer, 0, final)
            theta, omega = bundle.theta, bundle.omega

        elif kind == "standalone":
            clients = make_clients(bundle)
            results = federation.run_standalone(clients, cfg.rounds, cfg.seed)
            step = 0
            for rnd in range(1, cfg.rounds + 1):
                for cid in sorted(results):
                    for epoch, loss in enumerate(results[cid][1][rnd - 1]):
                        writer.record("client_local", rnd, step,
                                      {"client_id": cid, "epoch": epoch, "loss": loss})
                        step += 1
                step = 0
            per_client = {}
            ppl_sum, acc_sum = 0.0, 0.0
            for cid, (theta_k, _) in sorted(results.items()):
                metrics = _eval_one(bundle.slm, theta_k, bundle)
                per_client[str(cid)] = metrics
                ppl_sum += metrics["perplexity"]
                acc_sum += metrics["mcq_accuracy"]
                checkpoint.save_adapters(
                    out / "checkpoints" / f"slm_adapters_client{cid}.fclm",
                    theta_k, bundle.slm_cfg,
                )
            n = len(results)
            report["clients"] = per_client
            report["slm"] = {"perplexity": ppl_sum / n, "mcq_accuracy": acc_sum / n}
            _record_eval(writer, cfg.rounds, {"slm": report["slm"],
                                              "llm": {"perplexity": None, "mcq_accuracy": None}})
            theta, omega = None, None

        elif kind == "fedavg":
            clients = make_clients(bundle)
            server = make_server(bundle, with_llm=False)
            theta, omega = server.slm_adapters, None
            if cfg.rounds > 0:
                transport = make_transport(cfg.transport, cfg.seed, range(cfg.clients),
                                           cfg.clip)
                fed_cfg = FederationConfig(rounds=cfg.rounds, master_seed=cfg.seed,
                                           parallel_clients=cfg.parallel_clients)
                theta, omega, transcripts = federation.run_fedavg(
                    fed_cfg, clients, server, transport
                )
                pc = lora.flatten(theta).size
                _emit_round_metrics(writer, transcripts, transport.bytes_per_param,
                                    cfg.clients, pc)
            final = evaluate(bundle, theta, None)
            report["slm"] = final["slm"]
            _record_eval(writer, cfg.rounds, final)

        else:  # centralized
            pooled = [doc for shard in bundle.client_docs for doc in shard] + bundle.aux_docs
            epochs = max(1, cfg.rounds * cfg.local_epochs)
            omega, losses = federation.run_centralized(
                bundle.llm, bundle.omega, pooled, cfg.lr_omega, epochs,
                cfg.batch_size, cfg.seed,
            )
            for epoch, loss in enumerate(losses):
                writer.record("client_local", 1, epoch,
                              {"client_id": -1, "epoch": epoch, "loss": loss})
            final = evaluate(bundle, None, omega)
            report["llm"] = final["llm"]
            _record_eval(writer, max(cfg.rounds, 1), final)
            theta = None

        _write_transcripts(out, transcripts)
        if theta is not None:
            checkpoint.save_adapters(out / "checkpoints" / "slm_adapters.fclm",
                                     theta, bundle.slm_cfg)
        if omega is not None:
            checkpoint.save_adapters(out / "checkpoints" / "llm_adapters.fclm",
                                     omega, bundle.llm_cfg)
        (out / "eval_report.json").write_text(
            json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        return report
    finally:
        writer.close()


def run_eval_only(cfg: ExperimentConfig, slm_adapters_path=None, llm_adapters_path=None) -> dict:
    """Evaluate fresh or checkpointed adapters without any training."""
    bundle = build_bundle(cfg)
    theta, omega = bundle.theta, bundle.omega
    if slm_adapters_path is not None:
        theta, ckpt_cfg = checkpoint.load_adapters(slm_adapters_path)
        if ckpt_cfg.d_model != bundle.slm_cfg.d_model:
            raise InputError("small-model adapter checkpoint does not match the config")
    if llm_adapters_path is not None:
        omega, ckpt_cfg = checkpoint.load_adapters(llm_adapters_path)
        if ckpt_cfg.d_model != bundle.llm_cfg.d_model:
            raise InputError("large-model adapter checkpoint does not match the config")
    out, writer, run_id = _prepare_run_dir(cfg, "eval")
    try:
        report = report_skeleton(cfg, "eval")
        final = evaluate(bundle, theta, omega)
        report["slm"], report["llm"] = final["slm"], final["llm"]
        _record_eval(writer, 0, final)
        (out / "eval_report.json").write_text(
            json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        return report
    finally:
        writer.close()
