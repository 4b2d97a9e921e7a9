import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


TINY_TRAIN = dict(resolution=16, L=8, T=10, batch_size=4, lr=1e-3, base_channels=8,
                  channel_mults=(1, 2), embed_dim=8, checkpoint_interval=25)


@pytest.fixture(scope="session")
def tiny_faces(tmp_path_factory):
    from diffwm.data import ingest_dataset, write_toy_faces

    root = tmp_path_factory.mktemp("faces")
    write_toy_faces(root, n=40, size=16, seed=0)
    return root, ingest_dataset(root, 16, split_seed=0)


@pytest.fixture(scope="session")
def tiny_ae():
    from diffwm.distortions import AutoencoderConfig, FrozenAutoencoder, SurrogateDeepfake

    torch.manual_seed(0)
    ae = FrozenAutoencoder(AutoencoderConfig(base_channels=8, latent_channels=4)).freeze()
    torch.manual_seed(1)
    sur = SurrogateDeepfake(FrozenAutoencoder(AutoencoderConfig(base_channels=8, latent_channels=4)).freeze())
    return ae, sur


# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {title}  [{detail}]")
