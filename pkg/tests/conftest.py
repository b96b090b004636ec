import os

import numpy as np
import pytest
import torch

from bbb.datamodel import SplitPolicy, records_from_metadata, split_dataset
from bbb.synthgen import GeneratorConfig, generate_dataset, load_metadata

DESK_MODELS = ["rondo", "mfactory", "oldbike", "enduro"]


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    """4 models x 10 IDs x 4 renders at 64px: 160 images, 80 before/80 after."""
    out = str(tmp_path_factory.mktemp("desk_dataset"))
    cfg = GeneratorConfig(models=DESK_MODELS, ids_per_model=10, renders_per_id=4,
                          image_size=64)
    manifest = generate_dataset(cfg, master_seed=1234, out_dir=out)
    return out, cfg, manifest


@pytest.fixture(scope="session")
def desk_records(desk_dataset):
    out, _, _ = desk_dataset
    return records_from_metadata(load_metadata(out), out)


@pytest.fixture(scope="session")
def desk_policy():
    return SplitPolicy(train_models=["rondo", "mfactory", "oldbike"],
                       val_seen_models=["oldbike"],
                       val_unseen_models=[],
                       stress_models=["enduro"],
                       val_ids_per_seen_model=2)


@pytest.fixture(scope="session")
def desk_splits(desk_records, desk_policy):
    return split_dataset(desk_records, desk_policy, seed=7)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    np.random.seed(0)


ACCEPTANCE_TITLES = {
    "test_01_metric_oracles": "retrieval/classification metric oracles",
    "test_02_triplet_oracle": "batch-hard triplet oracle",
    "test_03_composite_loss_arithmetic": "composite loss arithmetic",
    "test_04_gradient_checks": "gradient checks (finite difference + GRL)",
    "test_05_generator_statistics": "generator statistics audit",
    "test_06_label_soundness": "label soundness (segmentation + break gap)",
    "test_07_determinism": "end-to-end determinism",
    "test_08_overfit_smoke": "overfit smoke test",
    "test_09_diversion_zero_gradients": "real-batch diversion contract",
    "test_10_paper_scale_shapes": "paper-scale architecture contract",
    "test_11_ablation_modes": "ablation modes",
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion."""
    verdicts = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance" not in rep.nodeid:
                continue
            name = rep.nodeid.rsplit("::", 1)[-1]
            if name in ACCEPTANCE_TITLES:
                verdicts[name] = "PASS" if outcome == "passed" else "FAIL"
    if not verdicts:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for i, (name, title) in enumerate(sorted(ACCEPTANCE_TITLES.items()), 1):
        verdict = verdicts.get(name)
        if verdict:
            terminalreporter.write_line(f"  {i:>2}. {title}: {verdict}")
