"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest -s tests/test_acceptance.py` to see the per-criterion
lines; the directional comparisons (criterion 5) train all five methods
on the bundled synthetic corpus and take a few minutes.
"""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest

from fedcollm import lora
from fedcollm.cli import main as cli_main
from fedcollm.config import ExperimentConfig
from fedcollm.experiment import run_baseline, run_fedcollm_experiment
from fedcollm.federation import (
    ClientState,
    FederationConfig,
    ServerState,
    make_transport,
    run_fedavg,
    run_fedcollm,
    run_standalone,
)
from fedcollm.losses import DistillWeights, kd_loss, server_losses, task_loss
from fedcollm.lora import LoraConfig, flatten, new_adapters
from fedcollm.model import ModelConfig, forward, init_model
from fedcollm.secagg import (
    PairwiseSeeds,
    mask_update,
    masked_modular_sum,
    quantize,
    secure_aggregate,
)
from fedcollm.tensor import Tensor, backward

from _gradcheck import check_grads


@contextmanager
def criterion(number, name):
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {number} {name}: FAIL")
        raise
    print(f"ACCEPTANCE {number} {name}: PASS")


# ---------------------------------------------------------------------------
# 1. gradient integrity
# ---------------------------------------------------------------------------


def test_criterion_1_gradient_integrity():
    with criterion(1, "gradient integrity"):
        start = time.time()
        rng = np.random.default_rng(0)

        # every loss op in isolation
        logits = Tensor(rng.normal(size=(6, 9)), requires_grad=True)
        targets = rng.integers(0, 9, size=6)
        check_grads(lambda: task_loss(logits, targets), [logits])

        teacher = Tensor(rng.normal(size=(6, 9)))
        for direction in ("forward", "reverse"):
            student = Tensor(rng.normal(size=(6, 9)), requires_grad=True)
            check_grads(
                lambda: kd_loss(student, teacher, DistillWeights(temperature=1.6),
                                direction),
                [student],
            )

        llm_logits = Tensor(rng.normal(size=(5, 9)), requires_grad=True)
        slm_logits = Tensor(rng.normal(size=(5, 9)), requires_grad=True)
        t2 = rng.integers(0, 9, size=5)
        w = DistillWeights(lam=0.8, temperature=1.2)
        check_grads(lambda: server_losses(llm_logits, slm_logits, t2, w)[0], [llm_logits])
        check_grads(lambda: server_losses(llm_logits, slm_logits, t2, w)[1], [slm_logits])

        # full 2-layer small model: adapters and (unfrozen) base parameters
        cfg = ModelConfig(n_layers=2, d_model=16, n_heads=4, vocab_size=12,
                          context_len=10, seed=3)
        model = init_model(cfg)
        adapters = new_adapters(cfg, LoraConfig(rank=2, alpha=4.0, seed=4))
        for _, (a_mat, b_mat) in adapters.entries.items():
            b_mat.data[:] = rng.normal(0, 0.02, size=b_mat.shape)
        for p in model.params.values():
            p.requires_grad = True
        seq = [1, 5, 3, 7, 2, 9, 4, 6]
        params = adapters.trainable_params() + list(model.params.values())
        check_grads(lambda: task_loss(forward(model, seq, adapters), seq), params)

        elapsed = time.time() - start
        assert elapsed < 60, f"gradient integrity took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 2. secure-aggregation exactness
# ---------------------------------------------------------------------------


def test_criterion_2_secure_aggregation_exactness():
    with criterion(2, "secure-aggregation exactness"):
        start = time.time()
        rng = np.random.default_rng(1)
        n_trials = 1000
        for trial in range(n_trials):
            k = int(rng.integers(1, 9))
            length = int(rng.integers(1, 4097))
            clip = float(rng.uniform(0.05, 1.0))
            seeds = PairwiseSeeds.trusted_setup(trial, range(k))
            updates = rng.uniform(-clip, clip, size=(k, length))
            shares = [mask_update(i, updates[i], seeds, clip, round_index=trial)
                      for i in range(k)]

            want_sum = np.zeros(length, dtype=np.uint64)
            for i in range(k):
                want_sum = (want_sum + quantize(updates[i], clip)) % 2**32
            assert np.array_equal(masked_modular_sum(shares), want_sum)

            mean = secure_aggregate(shares, clip, expected_clients=range(k))
            err = np.abs(mean - updates.mean(axis=0)).max()
            assert err <= 2.0 ** -16 * clip, f"trial {trial}: error {err}"
        elapsed = time.time() - start
        assert elapsed < 60, f"secagg exactness took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 3. protocol equivalences
# ---------------------------------------------------------------------------


SLM_CFG = ModelConfig(n_layers=2, d_model=16, n_heads=4, vocab_size=12,
                      context_len=16, seed=100)
LLM_CFG = ModelConfig(n_layers=2, d_model=24, n_heads=4, vocab_size=12,
                      context_len=16, seed=101)
LORA_CFG = LoraConfig(rank=2, alpha=4.0, targets=("q", "v"), seed=7)


def _toy_docs(n, seed, length=10):
    rng = np.random.default_rng(seed)
    return [[int(x) for x in rng.integers(2, 12, size=length)] for _ in range(n)]


def _toy_setup(k, with_llm, distill_steps, slm):
    clients = [
        ClientState(client_id=i, docs=_toy_docs(4, 20 + i), model=slm,
                    adapters=new_adapters(SLM_CFG, LORA_CFG), lr=0.05,
                    local_epochs=1, batch_size=2)
        for i in range(k)
    ]
    server = ServerState(
        slm=slm, slm_adapters=new_adapters(SLM_CFG, LORA_CFG),
        llm=init_model(LLM_CFG) if with_llm else None,
        llm_adapters=new_adapters(LLM_CFG, LoraConfig(rank=2, alpha=4.0, seed=8))
        if with_llm else None,
        aux_docs=_toy_docs(4, 77), distill_steps=distill_steps,
        lr_theta=0.05, lr_omega=0.05, weights=DistillWeights(),
        distill_batch_size=2,
    )
    return clients, server


def test_criterion_3_protocol_equivalences():
    with criterion(3, "protocol equivalences"):
        slm = init_model(SLM_CFG)
        phi_before = slm.checksum()

        clients, server = _toy_setup(3, with_llm=True, distill_steps=0, slm=slm)
        tr = make_transport("plain", 42, range(3))
        r0 = run_fedcollm(FederationConfig(rounds=2, master_seed=42), clients, server, tr)
        psi_before = server.llm.checksum() if server.llm else None

        clients, server = _toy_setup(3, with_llm=True, distill_steps=9, slm=slm)
        tr = make_transport("plain", 42, range(3))
        fa = run_fedavg(FederationConfig(rounds=2, master_seed=42), clients, server, tr)
        assert np.array_equal(flatten(r0.theta), flatten(fa.theta)), \
            "R=0 run does not bitwise-match the averaging baseline"

        clients, server = _toy_setup(1, with_llm=False, distill_steps=0, slm=slm)
        tr = make_transport("plain", 55, [0])
        single = run_fedavg(FederationConfig(rounds=3, master_seed=55),
                            clients, server, tr)
        alone = ClientState(client_id=0, docs=_toy_docs(4, 20), model=slm,
                            adapters=new_adapters(SLM_CFG, LORA_CFG), lr=0.05,
                            local_epochs=1, batch_size=2)
        standalone = run_standalone([alone], rounds=3, master_seed=55)
        assert np.array_equal(flatten(single.theta), flatten(standalone[0][0])), \
            "single-client averaging does not bitwise-match standalone"

        assert slm.checksum() == phi_before, "small-model base drifted"


# ---------------------------------------------------------------------------
# 4. communication accounting
# ---------------------------------------------------------------------------


def test_criterion_4_communication_accounting(capsys):
    with criterion(4, "communication accounting"):
        import re

        expected_pct = {"gpt2": 0.238, "opt": 0.239, "llama2": 0.234}
        expected_count = {"gpt2": 294_912, "opt": 3_145_728, "llama2": 3_145_728}
        for preset, want in expected_pct.items():
            assert cli_main(["commcost", "--preset", preset]) == 0
            out = capsys.readouterr().out
            assert str(expected_count[preset]) in out
            pct = float(re.search(r"(\d+\.\d+)%", out).group(1))
            assert abs(pct - want) <= 0.01, f"{preset}: {pct} vs {want}"

        slm = init_model(SLM_CFG)
        for transport, bpp in (("plain", 8), ("secure", 4)):
            clients, server = _toy_setup(3, with_llm=False, distill_steps=0, slm=slm)
            tr = make_transport(transport, 9, range(3))
            result = run_fedcollm(FederationConfig(rounds=2, master_seed=9),
                                  clients, server, tr)
            pc = flatten(result.theta).size
            for transcript in result.transcripts:
                assert transcript.bytes_total == 2 * 3 * pc * bpp


# ---------------------------------------------------------------------------
# 5. desk-scale directional analog of the published comparison
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def preset_reports(tmp_path_factory):
    """All five methods on the bundled synthetic corpus at the acceptance
    preset (K=4, T=5, E=1, R=10, fixed seed)."""
    base = tmp_path_factory.mktemp("acceptance5")
    reports = {}
    start = time.time()

    def fresh(name):
        cfg = ExperimentConfig()
        cfg.out_dir = str(base / name)
        assert (cfg.clients, cfg.rounds, cfg.local_epochs, cfg.distill_steps) == (4, 5, 1, 10)
        return cfg

    reports["fedcollm"] = run_fedcollm_experiment(fresh("fedcollm"))
    for kind in ("zero_shot", "standalone", "fedavg", "centralized"):
        reports[kind] = run_baseline(kind, fresh(kind))
    reports["_elapsed"] = time.time() - start
    return reports


def test_criterion_5_directional_comparisons(preset_reports):
    with criterion(5, "desk-scale directional comparisons"):
        r = preset_reports
        fed, alone = r["fedcollm"], r["standalone"]
        fedavg, zero, central = r["fedavg"], r["zero_shot"], r["centralized"]

        assert fed["slm"]["perplexity"] <= alone["slm"]["perplexity"], (
            f"(a) co-tuned SLM {fed['slm']['perplexity']:.3f} worse than "
            f"standalone mean {alone['slm']['perplexity']:.3f}"
        )
        assert fed["slm"]["mcq_accuracy"] >= fedavg["slm"]["mcq_accuracy"] - 0.01, (
            f"(b) co-tuned SLM accuracy {fed['slm']['mcq_accuracy']:.3f} more than "
            f"1pp below averaging baseline {fedavg['slm']['mcq_accuracy']:.3f}"
        )
        assert fed["llm"]["perplexity"] <= zero["llm"]["perplexity"], (
            f"(c) co-tuned LLM {fed['llm']['perplexity']:.3f} worse than "
            f"zero-shot {zero['llm']['perplexity']:.3f}"
        )
        assert fed["llm"]["perplexity"] <= 1.10 * central["llm"]["perplexity"], (
            f"(d) co-tuned LLM {fed['llm']['perplexity']:.3f} not within 10% of "
            f"centralized {central['llm']['perplexity']:.3f}"
        )
        assert r["_elapsed"] < 15 * 60, f"preset runs took {r['_elapsed']:.0f}s"


def test_preset_centralized_beats_zero_shot(preset_reports):
    central = preset_reports["centralized"]["llm"]["perplexity"]
    zero = preset_reports["zero_shot"]["llm"]["perplexity"]
    assert central <= zero


# ---------------------------------------------------------------------------
# 6. distillation mechanics
# ---------------------------------------------------------------------------


def test_criterion_6_distillation_mechanics():
    with criterion(6, "distillation mechanics"):
        rng = np.random.default_rng(6)
        w = DistillWeights(lam=1.0, temperature=1.0)
        vocab = 8
        n_pairs = 100_000
        n_equal = 500   # constructed equal-after-shift pairs interleaved

        student_logits = rng.normal(0.0, 2.0, size=(n_pairs, vocab))
        teacher_logits = rng.normal(0.0, 2.0, size=(n_pairs, vocab))
        equal_ids = rng.choice(n_pairs, size=n_equal, replace=False)
        shifts = rng.normal(0.0, 3.0, size=n_equal)
        for idx, shift in zip(equal_ids, shifts):
            teacher_logits[idx] = student_logits[idx] + shift
        equal_set = set(int(i) for i in equal_ids)

        for i in range(n_pairs):
            value = kd_loss(Tensor(student_logits[i : i + 1]),
                            Tensor(teacher_logits[i : i + 1]), w).item()
            assert value >= 0.0, f"pair {i}: negative divergence {value}"
            if i in equal_set:
                assert value <= 1e-9, f"pair {i}: equal distributions but {value}"
            else:
                assert value > 1e-9, f"pair {i}: distinct distributions but {value}"

        # teacher-side gradients identically absent
        student = Tensor(rng.normal(size=(4, vocab)), requires_grad=True)
        teacher = Tensor(rng.normal(size=(4, vocab)), requires_grad=True)
        backward(kd_loss(student, teacher, w))
        assert teacher.grad is None

        llm_logits = Tensor(rng.normal(size=(4, vocab)), requires_grad=True)
        slm_logits = Tensor(rng.normal(size=(4, vocab)), requires_grad=True)
        targets = rng.integers(0, vocab, size=4)
        backward(server_losses(llm_logits, slm_logits, targets, w)[0])
        assert slm_logits.grad is None

        # d(loss)/d(lam) equals the divergence value, by finite differences
        kd_value = kd_loss(llm_logits, slm_logits.detach(), w).item()
        h = 1e-6
        hi, _ = server_losses(llm_logits, slm_logits, targets, DistillWeights(lam=1 + h))
        lo, _ = server_losses(llm_logits, slm_logits, targets, DistillWeights(lam=1 - h))
        assert abs((hi.item() - lo.item()) / (2 * h) - kd_value) < 1e-6


# ---------------------------------------------------------------------------
# 7. determinism and reproducibility
# ---------------------------------------------------------------------------


def test_criterion_7_determinism(tmp_path, capsys):
    with criterion(7, "determinism and reproducibility"):
        def run(out):
            cfg = {
                "seed": 2024, "out_dir": str(out), "clients": 2, "rounds": 2,
                "local_epochs": 1, "distill_steps": 2, "distill_batch_size": 2,
                "batch_size": 2, "transport": "secure",
                "slm": {"n_layers": 1, "d_model": 16, "n_heads": 2, "context_len": 32},
                "llm": {"n_layers": 1, "d_model": 24, "n_heads": 2, "context_len": 32},
                "slm_lora": {"rank": 2, "alpha": 4.0},
                "llm_lora": {"rank": 2, "alpha": 4.0},
                "data": {"n_docs": 60}, "eval": {"mcq_n": 6},
            }
            path = tmp_path / f"{out.name}.json"
            path.write_text(json.dumps(cfg))
            assert cli_main(["fedcollm", "--config", str(path)]) == 0
            capsys.readouterr()

        run(tmp_path / "r1")
        run(tmp_path / "r2")

        def metrics_without_wall_time(out):
            lines = (out / "metrics.jsonl").read_text().splitlines()
            stripped = []
            for line in lines:
                record = json.loads(line)
                record.pop("wall_time")
                stripped.append(json.dumps(record, sort_keys=True))
            return "\n".join(stripped).encode()

        assert metrics_without_wall_time(tmp_path / "r1") == \
            metrics_without_wall_time(tmp_path / "r2")
        for name in ("slm_adapters.fclm", "llm_adapters.fclm"):
            a = (tmp_path / "r1" / "checkpoints" / name).read_bytes()
            b = (tmp_path / "r2" / "checkpoints" / name).read_bytes()
            assert a == b, f"checkpoint {name} differs between replays"
        a = (tmp_path / "r1" / "transcripts.jsonl").read_bytes()
        b = (tmp_path / "r2" / "transcripts.jsonl").read_bytes()
        assert a == b, "transcripts differ between replays"
