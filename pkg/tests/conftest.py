import numpy as np
import pytest

from schedlift.loopnest import KernelSpec


def rand_inputs(spec: KernelSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Random buffers in [-1, 1] for every input role of the kernel."""
    return {
        role: rng.uniform(-1.0, 1.0, size=spec.shapes[role].dims)
        for role in spec.input_roles()
    }


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
