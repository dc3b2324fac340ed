"""Acceptance criteria 1-8. Each test appends one PASS/FAIL line, shown in the
"acceptance criteria" section of the pytest terminal summary.

Criteria 6 and 7 train the toy model on the 5000/1000 synthetic set from
``configs/`` (a few minutes on one CPU core); run ``pytest -m "not slow"`` to skip them.
"""

import json
import random
import time
from pathlib import Path

import pytest
import torch

from oracles import compare_case, random_case
from tdr import cli
from tdr.featurize import Vocab
from tdr.fusion import build_mask, split
from tdr.harness.evaluate import evaluate, predict
from tdr.harness.gradcheck import TOLERANCE, gradcheck
from tdr.harness.train import fit, prepare, seed_everything, train
from tdr.model import TDRModel, load_checkpoint
from tdr.schema import load_candidates, load_dataset, model_config_from_mapping, read_flat_config
from tdr.synthgen import GenConfig, emit_candidate_set, generate
from tdr.targets import normalize_answer, vqa_accuracy

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def record(log, n, name, ok, detail):
    log.append(f"{'PASS' if ok else 'FAIL'} criterion {n} ({name}): {detail}")
    assert ok, detail


def test_1_loss_oracle_equivalence(acceptance_log):
    rng = random.Random(2024)
    worst = max(compare_case(random_case(rng, max_n=4, max_c=5, max_m=3, max_t=3)) for _ in range(200))
    record(acceptance_log, 1, "loss oracles", worst < 1e-9, f"max |diff| {worst:.2e} over 200 batches (tol 1e-9)")


def test_2_gradient_check(acceptance_log):
    start = time.perf_counter()
    report = gradcheck(seed=0)
    groups = ", ".join(f"{k} {v:.1e}" for k, v in sorted(report.per_group.items()))
    record(acceptance_log, 2, "gradient check", report.passed,
           f"max rel error {report.max_rel_error:.2e} (tol {TOLERANCE:g}) over {report.n_coordinates} "
           f"coordinates [{groups}] in {time.perf_counter() - start:.0f}s")


def _fused(model, batch, prev, bump=None):
    bundle = model.embed.bundle(batch, prev)
    if bump is not None:
        bundle.h_dec = bundle.h_dec + bump
    c = model.config
    mask = build_mask(*bundle.encoder_masks, c.T)
    return split(model.fusion(model.embed.pack(bundle), mask), c.V + 1, c.E, c.M, c.T)


def test_3_causality_and_isolation(acceptance_log, problem):
    model, batch, targets, *_ = problem
    prev = targets["prev_slots"]
    base = _fused(model, batch, prev)
    T = model.config.T
    leak = 0.0
    torch.manual_seed(0)
    for step in range(T):
        bump = torch.zeros_like(base.z_dec)
        bump[:, step] = 5.0 * torch.randn_like(bump[:, step])
        moved = _fused(model, batch, prev, bump)
        for name in ("z_cls", "z_word", "z_obj", "z_ocr"):
            leak = max(leak, (getattr(base, name) - getattr(moved, name)).abs().max().item())
        if step:
            leak = max(leak, (base.z_dec[:, :step] - moved.z_dec[:, :step]).abs().max().item())
    record(acceptance_log, 3, "causality/isolation", leak < 1e-6,
           f"max change upstream of a perturbed decoder step {leak:.2e} (bound 1e-6)")


def test_4_metric_correctness(acceptance_log):
    sweep = all(vqa_accuracy("cat", ["cat"] * k + ["dog"] * (10 - k)) == min(k / 3, 1.0) for k in range(11))
    golden = normalize_answer("The Dog") == "dog" and normalize_answer("Seven") == "7"
    record(acceptance_log, 4, "metric", sweep and golden,
           f"match-count sweep 0..10 {'ok' if sweep else 'wrong'}, golden normalization {'ok' if golden else 'wrong'}")


def test_5_weight_identity(acceptance_log, tmp_path, gen_config, candidates):
    # float64 so the logged values carry enough digits for a 1e-9 recomposition check
    config = model_config_from_mapping(dict(profile="toy", d=16, num_layers=1, num_heads=2, V=12, E=4, M=8,
                                            T=4, D_ft=4, D_p=6, D_fr=8, D_obj=6, gate_hidden=8,
                                            batch_size=8, C=len(candidates), seed=1))
    kept, bundles = prepare(generate(gen_config, n=120), candidates, config)
    seed_everything(config.seed)
    model = TDRModel(config, Vocab.build(kept), candidates).double()
    log = tmp_path / "log.jsonl"
    fit(model, kept, bundles, epochs=2, log_path=log)
    rows = [json.loads(line) for line in log.read_text().splitlines()]
    omega = max(abs(r["omega_cls"] + r["omega_ptr"] - 1) for r in rows)
    recompose = max(abs(r["omega_cls"] * r["l_cls"] + r["omega_ptr"] * r["l_ptr"] + r["l_gate"] - r["total"])
                    for r in rows)
    record(acceptance_log, 5, "weight identity", omega < 1e-12 and recompose < 1e-9,
           f"{len(rows)} batches: max |w_cls + w_ptr - 1| {omega:.1e}, max recomposition error {recompose:.1e} (tol 1e-9)")


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """Generate the 5000/1000 set, train the toy model, predict with and without the gate."""
    root = tmp_path_factory.mktemp("toy")
    gen = GenConfig.from_mapping(read_flat_config(CONFIGS / "gen_toy.yaml"))
    assert (gen.n_instances, gen.n_eval, gen.p_text_question, gen.annotator_noise) == (5000, 1000, 0.5, 0.1)
    cli.main(["gen-data", "--config", str(CONFIGS / "gen_toy.yaml"), "--out", str(root)])
    start = time.perf_counter()
    config = model_config_from_mapping(read_flat_config(CONFIGS / "model_toy.yaml"))
    ckpt = train(root / "train.jsonl", root / "candidates.txt", config, root / "model")
    minutes = (time.perf_counter() - start) / 60
    model = load_checkpoint(ckpt)
    insts = load_dataset(root / "eval.jsonl", model.config)
    cands = load_candidates(root / "candidates.txt")
    T, M = model.config.T, model.config.M
    full = evaluate(predict(model, insts), insts, cands, T, M)
    ablated = evaluate(predict(model, insts, force_branch=1), insts, cands, T, M)
    return dict(full=full, ablated=ablated, minutes=minutes, log=root / "model" / "train_log.jsonl")


@pytest.mark.slow
def test_6_routing_learnability(acceptance_log, toy_run):
    r = toy_run["full"]
    ok = r.gating_accuracy >= 0.95 and r.gating_f1 >= 0.90
    record(acceptance_log, 6, "routing", ok,
           f"gate accuracy {r.gating_accuracy:.4f} (>= 0.95), F1 {r.gating_f1:.4f} (>= 0.90) "
           f"on {r.n_instances} eval instances; training took {toy_run['minutes']:.1f} min")


@pytest.mark.slow
def test_7_answer_source_gap(acceptance_log, toy_run):
    full, ablated = toy_run["full"].by_answer_source, toy_run["ablated"].by_answer_source
    ok = full["ocr_token"] >= 0.80 and full["candidate_set"] >= 0.80 and ablated["ocr_token"] <= 0.10
    record(acceptance_log, 7, "answer sources", ok,
           f"full model OCR-source {full['ocr_token']:.4f} (>= 0.80), candidate-set {full['candidate_set']:.4f} "
           f"(>= 0.80); classifier-only OCR-source {ablated['ocr_token']:.4f} (<= 0.10)")


@pytest.mark.slow
def test_5b_weight_identity_on_toy_run(toy_run):
    rows = [json.loads(line) for line in toy_run["log"].read_text().splitlines()]
    assert all(abs(r["omega_cls"] + r["omega_ptr"] - 1) < 1e-12 for r in rows)
    # float32 losses: recomposition holds to single precision
    assert all(abs(r["omega_cls"] * r["l_cls"] + r["omega_ptr"] * r["l_ptr"] + r["l_gate"] - r["total"])
               < 1e-5 * max(1.0, r["total"]) for r in rows)


def _end_to_end(root):
    gen = root / "gen.yaml"
    gen.write_text("n_instances: 200\nn_eval: 60\nmax_objects: 4\nD_ft: 8\nD_p: 8\nD_fr: 8\nD_obj: 8\nseed: 11\n")
    model = root / "model.yaml"
    model.write_text("profile: toy\nd: 16\nnum_layers: 1\nnum_heads: 2\nV: 12\nE: 4\nM: 8\nT: 4\n"
                     "D_ft: 8\nD_p: 8\nD_fr: 8\nD_obj: 8\ngate_hidden: 16\nepochs: 2\nseed: 11\n")
    data, run = root / "data", root / "run"
    steps = [
        ["gen-data", "--config", str(gen), "--out", str(data)],
        ["train", "--data", str(data / "train.jsonl"), "--candidates", str(data / "candidates.txt"),
         "--config", str(model), "--out", str(run)],
        ["predict", "--ckpt", str(run / "model.pt"), "--data", str(data / "eval.jsonl"), "--out", str(root / "p.jsonl")],
        ["eval", "--pred", str(root / "p.jsonl"), "--data", str(data / "eval.jsonl"), "--out", str(root / "report.json")],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, argv
    return (root / "report.json").read_bytes()


def test_8_reproducibility(acceptance_log, tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a, b = _end_to_end(tmp_path / "a"), _end_to_end(tmp_path / "b")
    record(acceptance_log, 8, "reproducibility", a == b,
           f"two seeded gen-data/train/predict/eval runs gave {'identical' if a == b else 'different'} reports "
           f"({len(a)} bytes)")
