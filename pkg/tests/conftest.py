import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from auxnas.data import SyntheticDataset, gen_synthetic  # noqa: E402


@pytest.fixture(scope="session")
def std_ds(tmp_path_factory):
    """The standard synthetic 2-task set: 1024 train / 256 val at 32x32."""
    root = tmp_path_factory.mktemp("stdset") / "std"
    gen_synthetic(str(root), seed=100, n=1344, h=32, w=32, k=5, val_n=256, test_n=64)
    return SyntheticDataset(str(root))
