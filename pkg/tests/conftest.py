import contextlib
import io
import json
import sys
from pathlib import Path
from types import SimpleNamespace

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from facedet.cli import main  # noqa: E402
from facedet.config import DetectorConfig  # noqa: E402
from facedet.dataio import SizeLaw, WiderDataset, generate_synthetic_dataset  # noqa: E402

torch.set_num_threads(1)

TINY = [
    "network.backbone_channels=[8, 8, 8, 8, 8, 8]",
    "network.lfpn_channels=8",
    "network.dense.growth_channels=8",
    "network.dense.projection_channels=8",
    "optim.batch_size=2",
]


def run_cli(argv: list[str]) -> tuple[int, str]:
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = main(argv)
    return code, out.getvalue()


@pytest.fixture(scope="session")
def tiny_cfg() -> DetectorConfig:
    """Narrow network for loop-level tests that need many iterations."""
    return DetectorConfig().with_overrides(TINY)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory) -> WiderDataset:
    root = tmp_path_factory.mktemp("small")
    generate_synthetic_dataset(root, 4, faces_per_image=(1, 3), seed=1)
    return WiderDataset(root)


@pytest.fixture(scope="session")
def single_face_run(tmp_path_factory):
    """One 500-iteration CLI training run on a single one-face image, shared by tests."""
    root = tmp_path_factory.mktemp("single")
    data = root / "data"
    records = generate_synthetic_dataset(data, 1, faces_per_image=(1, 1), law=SizeLaw(32, 64), seed=5)
    sets = [f'io.data_root="{data}"', "sampler.augment=false", "optim.lr_peak=0.01",
            "optim.scale=240", "optim.batch_size=2", "optim.checkpoint_every=250"]
    args = [a for s in sets for a in ("--set", s)]
    code, out = run_cli(["train", *args, "--deterministic", "--out", str(root / "run")])
    log = [json.loads(line) for line in (root / "run" / "train_log.jsonl").read_text().splitlines()]
    return SimpleNamespace(root=root, data=data, run=root / "run", args=args, code=code,
                           summary=json.loads(out) if code == 0 else None, log=log, record=records[0])


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS, line

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(line(number))
