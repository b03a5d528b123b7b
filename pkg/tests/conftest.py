import numpy as np
import pytest

from amup import rng
from amup.netcore import ArchSpec

# one small spec per layer type; used by gradient, JVP and determinism tests
LAYER_SPECS = {
    "mlp": ArchSpec("mlp", 3, 7, 5),
    "mlp-gelu": ArchSpec("mlp", 3, 6, 4, activation="gelu"),
    "cnn1d-circular": ArchSpec("cnn1d", 3, 4, 3, (6,), kernel=3),
    "cnn1d-zero": ArchSpec("cnn1d", 3, 4, 3, (6,), kernel=3, padding="zero"),
    "cnn1d-k5": ArchSpec("cnn1d", 2, 3, 2, (7,), kernel=5),
    "cnn2d": ArchSpec("cnn2d", 2, 3, 2, (4, 5), kernel=3),
    "cnn2d-zero": ArchSpec("cnn2d", 2, 3, 2, (4, 4), kernel=3, padding="zero"),
    "resnet-dense": ArchSpec("resnet", 3, 6, 4),
    "resnet-dense-2": ArchSpec("resnet", 2, 5, 3, branch_depth=2),
    "resnet-conv1d": ArchSpec("resnet", 2, 4, 3, (6,)),
    "resnet-conv2d": ArchSpec("resnet", 2, 3, 2, (4, 4), branch_depth=2),
}


def random_batch(spec: ArchSpec, n: int, seed: int = 0) -> np.ndarray:
    return rng.normal(rng.stream(seed, 99), (n, *spec.input_shape))


@pytest.fixture(params=sorted(LAYER_SPECS))
def layer_spec(request) -> ArchSpec:
    return LAYER_SPECS[request.param]


# ------------------------------------------------------------ acceptance log

ACCEPTANCE_TITLES = {
    1: "exact identities",
    2: "gate moments",
    3: "layerwise invariance (circular CNN1D)",
    4: "zero-padding boundary correction",
    5: "ResNet recursion",
    6: "S_bar growth law in L and eta",
    7: "depth-LR exponent on synthetic10",
    8: "zero-shot transfer",
    9: "width invariance of calibrated eta",
    10: "aggregator counterexamples",
    11: "engineering: determinism, resume, gradients",
}
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def record(criterion: int, part: str, passed: bool, detail: str) -> None:
    """Log one checked part of an acceptance criterion, then assert it."""
    ACCEPTANCE.setdefault(criterion, []).append((part, bool(passed), detail))
    assert passed, f"criterion {criterion} ({part}): {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in ACCEPTANCE_TITLES.items():
        parts = ACCEPTANCE.get(n)
        if parts is None:
            tr.write_line(f"criterion {n:2d} NOT RUN  {title}")
            continue
        ok = all(p[1] for p in parts)
        tr.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}     {title}")
        for part, passed, detail in parts:
            tr.write_line(f"      {'ok ' if passed else 'BAD'} {part}: {detail}")
