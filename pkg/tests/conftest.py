import pytest
import torch

from tdr.featurize import BEGIN, Vocab
from tdr.harness.train import prepare
from tdr.model import TDRModel, teacher_inputs
from tdr.schema import ModelConfig, OCRTokenRecord, VQAInstance
from tdr.synthgen import GenConfig, emit_candidate_set, generate


def small_gen(**kw) -> GenConfig:
    base = dict(n_instances=40, n_eval=10, max_objects=4, max_count=3, max_ocr_distractors=2,
                max_answer_tokens=3, D_ft=4, D_p=6, D_fr=8, D_obj=6, seed=3)
    base.update(kw)
    return GenConfig(**base)


def small_config(**kw) -> ModelConfig:
    base = dict(d=16, num_layers=2, num_heads=2, V=12, E=4, M=8, T=4, D_ft=4, D_p=6, D_fr=8,
                D_obj=6, gate_hidden=16, dropout=0.0, batch_size=8, epochs=1, seed=0)
    base.update(kw)
    return ModelConfig.toy(**base)


def make_token(text="SIGN", box=(0.1, 0.1, 0.3, 0.2), dims=(4, 6, 8), fill=0.5) -> OCRTokenRecord:
    return OCRTokenRecord(text=text, x_ft=(fill,) * dims[0], x_p=(fill,) * dims[1],
                          x_fr=(fill,) * dims[2], x_spt=box)


def make_instance(iid="q0", answers=("yes",) * 10, ocr=(), words=("is", "there", "a", "dog"),
                  answer_type="yes/no", n_obj=1) -> VQAInstance:
    return VQAInstance(
        instance_id=iid,
        question_words=words,
        object_features=tuple((0.1 * (k + 1),) * 6 for k in range(n_obj)),
        object_tags=("dog",) * n_obj,
        ocr_tokens=tuple(ocr),
        human_answers=tuple(answers),
        answer_type=answer_type,
    )


@pytest.fixture
def gen_config():
    return small_gen()


@pytest.fixture
def instances(gen_config):
    return generate(gen_config)


@pytest.fixture
def candidates(gen_config):
    return emit_candidate_set(gen_config)


@pytest.fixture
def problem(instances, candidates):
    """Tiny float64 model in eval mode plus one encoded batch with targets."""
    config = small_config(C=len(candidates))
    kept, bundles = prepare(instances, candidates, config)
    torch.manual_seed(0)
    model = TDRModel(config, Vocab.build(kept), candidates).double().eval()
    batch = model.encode(kept)
    targets = teacher_inputs(bundles, config.T, config.M, dtype=torch.float64)
    return model, batch, targets, kept, bundles


def begin_prev(n, T, M):
    prev = torch.full((n, T), M, dtype=torch.long)
    prev[:, 0] = BEGIN
    return prev


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return pytestconfig.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
