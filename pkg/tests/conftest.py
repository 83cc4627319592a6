import numpy as np
import pytest

from slotgcn.graph_io import SampledAdjacency


@pytest.fixture
def make_adj():
    def build(num_nodes, targets, n=1):
        """targets: {target: [sources]}; everything else is zero-weight padding."""
        neighbors = np.tile(np.arange(num_nodes)[:, None], (1, n))
        weights = np.zeros((num_nodes, n))
        for v, sources in targets.items():
            for k, u in enumerate(sources):
                neighbors[v, k] = u
                weights[v, k] = 1.0 / (len(sources) + 1)
        self_weight = np.array(
            [1.0 / (len(targets.get(v, [])) + 1) for v in range(num_nodes)])
        return SampledAdjacency(n=n, neighbors=neighbors, weights=weights,
                                self_weight=self_weight)

    return build
